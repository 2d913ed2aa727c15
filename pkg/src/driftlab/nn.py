"""Small dense layers, losses and optimizers with hand-derived gradients.

Everything here works on float64 numpy arrays laid out as ``(batch, features)``.
Layers cache what they need during ``forward`` and accumulate nothing: each
``backward`` call overwrites the stored parameter gradients.
"""

from __future__ import annotations

import numpy as np

from .errors import DimensionError, ParameterError

DTYPE = np.float64


def as_matrix(x, name="x"):
    """Return ``x`` as a 2-D float64 array, promoting a single vector to one row."""
    arr = np.asarray(x, dtype=DTYPE)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[0] == 0 or arr.shape[1] == 0:
        raise DimensionError(f"{name} must be a non-empty matrix, got shape {arr.shape}")
    return arr


class Module:
    """Base class for differentiable layers."""

    def __init__(self):
        self.params: list[np.ndarray] = []
        self.grads: list[np.ndarray] = []

    def __call__(self, x):
        return self.apply(x)

    def apply(self, x):
        """Forward pass without caching anything for ``backward``."""
        raise NotImplementedError

    def forward(self, x):
        raise NotImplementedError

    def backward(self, grad_out):
        raise NotImplementedError

    def describe(self) -> dict:
        raise NotImplementedError

    def zero_grad(self):
        for g in self.grads:
            g.fill(0.0)


class Linear(Module):
    """Affine map ``y = x W^T + b``.

    ``init`` is one of ``"uniform"`` (U(-1/sqrt(fan_in), 1/sqrt(fan_in)), bias
    included), ``"identity"`` (square only, zero bias) or ``"zeros"``.
    """

    def __init__(self, in_dim, out_dim, bias=True, init="uniform", rng=None):
        super().__init__()
        if in_dim < 1 or out_dim < 1:
            raise DimensionError(f"Linear dims must be positive, got {in_dim}->{out_dim}")
        self.in_dim, self.out_dim, self.has_bias = int(in_dim), int(out_dim), bool(bias)
        if init == "uniform":
            if rng is None:
                raise ParameterError("uniform init needs an rng")
            bound = 1.0 / np.sqrt(in_dim)
            weight = rng.uniform(-bound, bound, size=(out_dim, in_dim))
            b = rng.uniform(-bound, bound, size=out_dim)
        elif init == "identity":
            if in_dim != out_dim:
                raise DimensionError("identity init requires a square layer")
            weight = np.eye(in_dim)
            b = np.zeros(out_dim)
        elif init == "zeros":
            weight = np.zeros((out_dim, in_dim))
            b = np.zeros(out_dim)
        else:
            raise ParameterError(f"unknown init {init!r}")
        self.weight = weight.astype(DTYPE)
        self.params = [self.weight]
        self.grads = [np.zeros_like(self.weight)]
        if self.has_bias:
            self.bias = b.astype(DTYPE)
            self.params.append(self.bias)
            self.grads.append(np.zeros_like(self.bias))
        else:
            self.bias = None
        self._x = None

    def apply(self, x):
        if x.shape[-1] != self.in_dim:
            raise DimensionError(f"expected {self.in_dim} input features, got {x.shape[-1]}")
        y = x @ self.weight.T
        if self.has_bias:
            y = y + self.bias
        return y

    def forward(self, x):
        y = self.apply(x)
        self._x = x
        return y

    def backward(self, grad_out):
        self.grads[0][...] = grad_out.T @ self._x
        if self.has_bias:
            self.grads[1][...] = grad_out.sum(axis=0)
        return grad_out @ self.weight

    def describe(self):
        return {"type": "linear", "in": self.in_dim, "out": self.out_dim, "bias": self.has_bias}


class ReLU(Module):
    def apply(self, x):
        return np.maximum(x, 0.0)

    def forward(self, x):
        self._mask = x > 0
        return np.where(self._mask, x, 0.0)

    def backward(self, grad_out):
        return np.where(self._mask, grad_out, 0.0)

    def describe(self):
        return {"type": "relu"}


class Sequential(Module):
    def __init__(self, *layers):
        super().__init__()
        self.layers = list(layers)
        self._collect()

    def _collect(self):
        self.params = [p for layer in self.layers for p in layer.params]
        self.grads = [g for layer in self.layers for g in layer.grads]

    def apply(self, x):
        for layer in self.layers:
            x = layer.apply(x)
        return x

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, grad_out):
        for layer in reversed(self.layers):
            grad_out = layer.backward(grad_out)
        return grad_out

    def describe(self):
        return {"type": "sequential", "layers": [layer.describe() for layer in self.layers]}


class Residual(Module):
    """Additive skip connection ``y = x + inner(x)``."""

    def __init__(self, inner):
        super().__init__()
        self.inner = inner
        self.params = inner.params
        self.grads = inner.grads

    def apply(self, x):
        return x + self.inner.apply(x)

    def forward(self, x):
        return x + self.inner.forward(x)

    def backward(self, grad_out):
        return grad_out + self.inner.backward(grad_out)

    def describe(self):
        return {"type": "residual", "inner": self.inner.describe()}


def build_module(desc: dict) -> Module:
    """Rebuild a module from ``Module.describe()`` output, parameters zeroed."""
    kind = desc.get("type")
    if kind == "linear":
        return Linear(desc["in"], desc["out"], bias=desc["bias"], init="zeros")
    if kind == "relu":
        return ReLU()
    if kind == "sequential":
        return Sequential(*(build_module(d) for d in desc["layers"]))
    if kind == "residual":
        return Residual(build_module(desc["inner"]))
    raise ParameterError(f"unknown layer type {kind!r}")


def mlp(sizes, rng, final_relu=False):
    """Fully connected ReLU network through the given layer widths."""
    if len(sizes) < 2:
        raise ParameterError("an MLP needs at least input and output sizes")
    layers = []
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        layers.append(Linear(a, b, rng=rng))
        if i < len(sizes) - 2 or final_relu:
            layers.append(ReLU())
    return Sequential(*layers)


# -- losses ------------------------------------------------------------------


def softmax(z, axis=-1):
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(z, axis=-1):
    z = z - z.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def mse_loss(pred, target):
    """Mean over rows of the squared Euclidean distance, and its gradient.

    The sum runs over feature dimensions and is divided by the number of rows
    only, so a single row displaced by a unit vector costs exactly 1.
    """
    pred = np.asarray(pred, dtype=DTYPE)
    target = np.asarray(target, dtype=DTYPE)
    if pred.shape != target.shape or pred.ndim != 2:
        raise DimensionError(f"mse_loss shapes differ: {pred.shape} vs {target.shape}")
    n = pred.shape[0]
    if n < 1:
        raise DimensionError("mse_loss needs at least one row")
    diff = pred - target
    return float(np.sum(diff * diff) / n), (2.0 / n) * diff


def cross_entropy(logits, labels):
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    logits = np.asarray(logits, dtype=DTYPE)
    labels = np.asarray(labels)
    n, c = logits.shape
    if labels.shape != (n,):
        raise DimensionError(f"expected {n} labels, got shape {labels.shape}")
    if n and (labels.min() < 0 or labels.max() >= c):
        raise IndexError(f"labels must lie in [0, {c}), got range [{labels.min()}, {labels.max()}]")
    logp = log_softmax(logits)
    rows = np.arange(n)
    loss = -float(logp[rows, labels].mean())
    grad = np.exp(logp)
    grad[rows, labels] -= 1.0
    return loss, grad / n


def distill_ce(teacher_logits, student_logits, temperature):
    """Cross-entropy from temperature-softened teacher to student distributions.

    The teacher is a constant target; the returned gradient is with respect to
    the student logits only.
    """
    if temperature <= 0:
        raise ParameterError(f"temperature must be positive, got {temperature}")
    teacher_logits = np.asarray(teacher_logits, dtype=DTYPE)
    student_logits = np.asarray(student_logits, dtype=DTYPE)
    if teacher_logits.shape != student_logits.shape:
        raise DimensionError(
            f"teacher/student shapes differ: {teacher_logits.shape} vs {student_logits.shape}"
        )
    n = teacher_logits.shape[0]
    target = softmax(teacher_logits / temperature)
    logq = log_softmax(student_logits / temperature)
    loss = -float(np.sum(target * logq) / n)
    grad = (np.exp(logq) - target) / (temperature * n)
    return loss, grad


# -- optimizers --------------------------------------------------------------


def _check_shapes(params, grads):
    if len(params) != len(grads):
        raise DimensionError(f"{len(params)} parameters but {len(grads)} gradients")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise DimensionError(f"gradient shape {g.shape} does not match parameter {p.shape}")


class SGD:
    """Stochastic gradient descent with heavy-ball momentum and L2 weight decay."""

    kind = "sgd-momentum"

    def __init__(self, params, lr, momentum=0.0, weight_decay=0.0):
        if lr <= 0:
            raise ParameterError(f"learning rate must be positive, got {lr}")
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.buffers = [np.zeros_like(p) for p in self.params]
        self.step_count = 0

    def step(self, grads):
        _check_shapes(self.params, grads)
        self.step_count += 1
        for p, g, buf in zip(self.params, grads, self.buffers):
            if self.weight_decay:
                g = g + self.weight_decay * p
            if self.momentum:
                buf *= self.momentum
                buf += g
                g = buf
            p -= self.lr * g


class Adam:
    """Adam with bias-corrected first and second moments."""

    kind = "adam"

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        if lr <= 0:
            raise ParameterError(f"learning rate must be positive, got {lr}")
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in self.params]
        self.v = [np.zeros_like(p) for p in self.params]
        self.step_count = 0

    def step(self, grads):
        _check_shapes(self.params, grads)
        self.step_count += 1
        c1 = 1.0 - self.beta1**self.step_count
        c2 = 1.0 - self.beta2**self.step_count
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def numerical_gradient(fn, x, h=1e-5):
    """Central finite-difference gradient of scalar ``fn()`` w.r.t. array ``x``.

    ``x`` is perturbed in place and restored; ``fn`` must read it on each call.
    """
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + h
        f_plus = fn()
        x[idx] = orig - h
        f_minus = fn()
        x[idx] = orig
        grad[idx] = (f_plus - f_minus) / (2 * h)
    return grad


def relative_error(a, b):
    a, b = np.asarray(a), np.asarray(b)
    denom = max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)
