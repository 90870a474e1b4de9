"""Fast-FGSM adversarial training versus natural training.

Run: python demos/06_adversarial_training.py
"""

import tempfile

from ut_transfer import (ArchitectureDescriptor, AttackSpec, CyclicSchedule, FastFGSM, TrainConfig,
                         adversarial_train_fgsm, build_model, evaluate_accuracy, run_attack, synth_gaussians, train)

data = synth_gaussians(classes=4, dims=64, per_class=150, seed=0, mean_distance=10.0, test_per_class=100,
                       shape=(1, 8, 8))
desc = ArchitectureDescriptor("smallcnn", data.input_shape, data.num_classes, (4, 8, 8),
                              input_mean=data.mean, input_std=data.std)
schedule = CyclicSchedule(min_lr=0.0, max_lr=0.05, period=8)
x, y = data.eval_set(200, seed=0)
attack = AttackSpec("ifgsm", epsilon=0.02, step_size=0.002, iterations=20)

with tempfile.TemporaryDirectory() as tmp:
    natural = train(build_model(desc, seed=1, mode="train"), data,
                    TrainConfig(epochs=8, batch_size=32, schedule=schedule), f"{tmp}/nat")
    robust = adversarial_train_fgsm(build_model(desc, seed=1, mode="train"), data,
                                    TrainConfig(epochs=8, batch_size=32, schedule=schedule,
                                                adversarial=FastFGSM(epsilon=0.02)), f"{tmp}/rob")
    for name, store in (("natural", natural), ("fast-FGSM", robust)):
        m = store.load(len(store)).model
        adv = run_attack(m, x, y, attack).x_adv
        print(f"{name:9s} clean {evaluate_accuracy(m, x, y):5.1f}%   under white-box I-FGSM "
              f"{evaluate_accuracy(m, adv, y):5.1f}%")
