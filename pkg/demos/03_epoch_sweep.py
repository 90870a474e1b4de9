"""Sweep every other surrogate epoch against a separately trained target.

The surrogate's checkpoints are attacked one by one; the target only scores
the results. The plot marks the best epoch and the fully trained one.

Run: python demos/03_epoch_sweep.py [out.svg]
"""

import sys
import tempfile

from ut_transfer import (ArchitectureDescriptor, AttackSpec, SteppedSchedule, TrainConfig, best_surrogate_epoch,
                         build_model, epoch_sweep, select_fully_trained, synth_gaussians, train)
from ut_transfer.report import sweep_svg
from ut_transfer.transfer import ModelRef

data = synth_gaussians(classes=4, dims=64, per_class=150, seed=0, mean_distance=10.0, test_per_class=100,
                       shape=(1, 8, 8))
cfg = TrainConfig(epochs=12, batch_size=32, schedule=SteppedSchedule(0.05, 0.1, (6, 9)))


def desc(widths):
    return ArchitectureDescriptor("smallcnn", data.input_shape, data.num_classes, widths,
                                  input_mean=data.mean, input_std=data.std)


with tempfile.TemporaryDirectory() as tmp:
    surrogate = train(build_model(desc((4, 8, 8)), seed=1, mode="train"), data, cfg, f"{tmp}/s")
    target_store = train(build_model(desc((8, 8, 16)), seed=2, mode="train"), data, cfg, f"{tmp}/t")
    t_epoch = select_fully_trained(target_store)
    target = ModelRef.from_checkpoint("target", target_store.load(t_epoch))

    x, y = data.eval_set(200, seed=0)
    attacks = [AttackSpec("mifgsm", epsilon=0.1, step_size=0.01), AttackSpec("ifgsm", epsilon=0.1, step_size=0.01)]
    full = select_fully_trained(surrogate)
    matrix = epoch_sweep(surrogate, "surrogate", 2, [target], attacks, x, y, include=[full])

print(f"target fully trained at epoch {t_epoch}; surrogate fully trained at epoch {full}")
for attack in matrix.attacks:
    means = matrix.mean_by_epoch(attack)
    print(attack, " ".join(f"{e}:{a:.1f}" for e, a in means.items()))
best = best_surrogate_epoch(matrix, "mifgsm")
print(f"best mifgsm surrogate epoch {best} ({matrix.mean_by_epoch('mifgsm')[best]:.1f}%)")

svg = sweep_svg(matrix, "surrogate", best, fully_trained=full)
out = sys.argv[1] if len(sys.argv) > 1 else "sweep_demo.svg"
with open(out, "w") as fh:
    fh.write(svg)
print("wrote", out)
