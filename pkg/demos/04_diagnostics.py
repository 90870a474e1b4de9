"""Gradient similarity, loss curvature and the explanatory regression.

Run: python demos/04_diagnostics.py
"""

import tempfile

import numpy as np

from ut_transfer import (ArchitectureDescriptor, SteppedSchedule, TrainConfig, build_model, curvature,
                         gradient_similarity, ols_fit, pearson, synth_gaussians, train)

data = synth_gaussians(classes=4, dims=64, per_class=150, seed=0, mean_distance=10.0, test_per_class=100,
                       shape=(1, 8, 8))
desc = ArchitectureDescriptor("smallcnn", data.input_shape, data.num_classes, (4, 8, 8),
                              input_mean=data.mean, input_std=data.std)
cfg = TrainConfig(epochs=8, batch_size=32, schedule=SteppedSchedule(0.05, 0.1, (4, 6)))
x, y = data.eval_set(128, seed=1)

with tempfile.TemporaryDirectory() as tmp:
    a = train(build_model(desc, seed=1, mode="train"), data, cfg, f"{tmp}/a")
    b = train(build_model(desc, seed=2, mode="train"), data, cfg, f"{tmp}/b")
    target = b.load(len(b)).model
    sims, curvs = [], []
    for epoch in a.epochs:
        m = a.load(epoch).model
        s = gradient_similarity(m, target, x, y, names=(("a", epoch), ("b", len(b))))
        c = curvature(m, x, y, h=0.01, name=("a", epoch))
        sims.append(s.value)
        curvs.append(c.value)
        print(f"epoch {epoch}: similarity to target {s.value:+.3f} ({s.skipped} skipped)   curvature {c.value:.3f}")

r, p = pearson(np.arange(1, len(sims) + 1), sims)
print(f"similarity vs epoch: r = {r:+.3f}, p = {p:.3g}")

# OLS reports standard errors and two-tailed p-values; here curvature is regressed on epoch.
X = np.column_stack([np.ones(len(curvs)), np.arange(1, len(curvs) + 1)])
print(ols_fit(X, np.array(curvs), names=["const", "epoch"]).summary())
