"""Two-dimensional drift toy: estimate where a withheld class mean moved.

The "extractors" are the identity (before) and the drift transform (after).
Only reference classes are observed after the drift; the target class's
new mean must be inferred from them, either by kernel-weighted drift vectors
(SDC) or by a learned affine projector (LDC).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .drift import Projector, ProjectorConfig, fit_projector, sdc_shift
from .errors import ParameterError

DEFAULT_SDC_SIGMA = 1.0


def default_toy_projector_config(**kw):
    # a translation is not linear through the origin, so the toy projector has a bias
    return ProjectorConfig(**{"variant": "linear_bias", "epochs": 400, "lr": 0.02, "batch_size": 64, **kw})


@dataclass
class ToyResult:
    scenario: dict
    target_class: int
    reference_classes: list
    old_mean: np.ndarray
    true_mean: np.ndarray
    sdc_estimate: np.ndarray
    ldc_estimate: np.ndarray
    sdc_fallback: bool
    projector: Projector

    @property
    def sdc_error(self):
        return float(np.linalg.norm(self.sdc_estimate - self.true_mean))

    @property
    def ldc_error(self):
        return float(np.linalg.norm(self.ldc_estimate - self.true_mean))


def run_toy(scenario, reference_classes=None, target_class=0, sdc_sigma=DEFAULT_SDC_SIGMA, ldc_cfg=None):
    """Estimate the drifted mean of ``target_class`` from the reference classes only."""
    if reference_classes is None:
        reference_classes = [k for k in range(scenario.num_classes) if k != target_class]
    reference_classes = sorted(int(k) for k in reference_classes)
    if target_class in reference_classes:
        raise ParameterError("the target class cannot also be a reference class")
    if not 0 <= target_class < scenario.num_classes:
        raise ParameterError(f"no class {target_class} in the scenario")
    ref = np.isin(scenario.y_after, reference_classes)
    if not ref.any():
        raise ParameterError("no reference samples observed after the drift")
    old_feats, new_feats = scenario.x_source[ref], scenario.x_after[ref]

    old_mean = scenario.x_before[scenario.y_before == target_class].mean(axis=0)
    sdc_est, fallback = sdc_shift(old_feats, new_feats, old_mean[None], sdc_sigma)
    projector = fit_projector(old_feats, new_feats, ldc_cfg or default_toy_projector_config())
    return ToyResult(
        scenario={
            "theta": scenario.theta,
            "scale": scenario.scale,
            "translation": scenario.translation.tolist(),
            "paired": scenario.paired,
        },
        target_class=int(target_class),
        reference_classes=reference_classes,
        old_mean=old_mean,
        true_mean=scenario.true_means[target_class],
        sdc_estimate=sdc_est[0],
        ldc_estimate=projector(old_mean[None])[0],
        sdc_fallback=bool(fallback[0]),
        projector=projector,
    )
