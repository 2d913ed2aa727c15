"""Building the pieces of a drift-compensated learner by hand.

Train two tasks with LwF, fit the projector between the two frozen
extractors on unlabeled task-2 inputs, and compare the moved prototypes
with the ones recomputed from the old data.
"""

import numpy as np

from driftlab.data import generate_blob_stream, train_test_split
from driftlab.drift import ProjectorConfig, ldc_correct, oracle_correct, sdc_correct, train_projector
from driftlab.evaluation import accuracy_over_seen, cosine_distances
from driftlab.prototypes import PrototypePool, compute_prototypes
from driftlab.training import FeatureExtractor, LwFTrainer, TrainConfig

stream = generate_blob_stream(2, 4, 16, 300, 4.0, seed=0)
train, test = train_test_split(stream, 0.3, seed=0)
trainer = LwFTrainer(FeatureExtractor.mlp(16, rng=0), TrainConfig(epoch_scale=0.1))

f1 = trainer.session(train.tasks[0])
pool = PrototypePool(16).add_many(compute_prototypes(f1, train.tasks[0]), 1)
f2 = trainer.session(train.tasks[1])

# only the inputs of the new task are used: no labels, no old samples
proj = train_projector(f1, f2, train.tasks[1].x, ProjectorConfig.semi_supervised())
print(f"projector MSE after training: {proj.final_loss:.4f}")

pools = {
    "naive": pool.copy(),
    "sdc": sdc_correct(pool, f1, f2, train.tasks[1].x, sigma=0.3, task=2)[0],
    "ldc": ldc_correct(pool, proj, task=2),
    "oracle": oracle_correct(pool, f2, train.tasks[:1], task=2),
}
new = compute_prototypes(f2, train.tasks[1])
x = np.concatenate([t.x for t in test])
y = np.concatenate([t.y for t in test])
for name, p in pools.items():
    _, dist = cosine_distances(p, pools["oracle"])
    p.add_many(new, 2)
    print(f"{name:<7} accuracy {100 * accuracy_over_seen(f2, p, x, y):6.2f}   mean cosine to oracle {dist.mean():.4f}")
