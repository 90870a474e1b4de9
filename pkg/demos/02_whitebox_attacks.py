"""Train a small CNN on Gaussian blobs, then attack it with every generator.

Run: python demos/02_whitebox_attacks.py
"""

import tempfile

import numpy as np

from ut_transfer import (ArchitectureDescriptor, AttackSpec, ILAParams, SteppedSchedule, TAPParams, TrainConfig,
                         build_model, evaluate_accuracy, run_attack, select_fully_trained, synth_gaussians, train)
from ut_transfer.checkpoint import read_checkpoint

data = synth_gaussians(classes=4, dims=64, per_class=150, seed=0, mean_distance=10.0, test_per_class=100,
                       shape=(1, 8, 8))
desc = ArchitectureDescriptor("smallcnn", data.input_shape, data.num_classes, (4, 8, 8),
                              input_mean=data.mean, input_std=data.std)

with tempfile.TemporaryDirectory() as tmp:
    store = train(build_model(desc, seed=1, mode="train"), data,
                  TrainConfig(epochs=8, batch_size=32, schedule=SteppedSchedule(0.05, 0.1, (4, 6)), seed=1), tmp)
    best = select_fully_trained(store)
    model = read_checkpoint(store.path(best)).model
print(f"fully trained epoch {best}: val loss {store.record(best).val_loss:.3f}")

x, y = data.eval_set(200, seed=0)
print(f"clean accuracy {evaluate_accuracy(model, x, y):.1f}%")

# The budget is an l-inf ball of radius epsilon in [0, 1] pixel space.
specs = [
    AttackSpec("fgsm", epsilon=0.05),
    AttackSpec("ifgsm", epsilon=0.05, step_size=0.005, iterations=20),
    AttackSpec("mifgsm", epsilon=0.05, step_size=0.005, iterations=20, decay=0.9),
    AttackSpec("ila", epsilon=0.05, ila=ILAParams(base_iterations=10, enhance_iterations=10, layer="block1")),
    AttackSpec("tap", epsilon=0.05, iterations=20, tap=TAPParams(feature_weight=0.01)),
]
for spec in specs:
    adv = run_attack(model, x, y, spec)
    linf = np.abs(adv.x_adv - x).max()
    print(f"{spec.kind:7s} white-box accuracy {evaluate_accuracy(model, adv.x_adv, y):5.1f}%   max |delta| {linf:.3f}")
