import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ut_transfer import tensor as T
from ut_transfer.attacks import (AttackError, AttackSpec, ILAParams, TAPParams, _sign_ascent, clip_to_ball,
                                 feature_distance, fgsm, ifgsm, ila_enhance, mifgsm, run_attack, tap, tap_objective)
from ut_transfer.models import ModelError, forward
from conftest import tiny


def batch(n=6, shape=(1, 8, 8), seed=0, classes=3):
    rng = np.random.default_rng(seed)
    return rng.random((n,) + shape).astype(np.float32), rng.integers(0, classes, n)


def test_clip_to_ball_examples():
    assert clip_to_ball(np.array([0.3]), np.array([0.3]), 0.05).tolist() == [0.3]
    assert clip_to_ball(np.array([1.06]), np.array([0.98]), 0.05).tolist() == [1.0]
    assert clip_to_ball(np.array([0.60]), np.array([0.50]), 0.05) == pytest.approx([0.55])
    with pytest.raises(T.ShapeError):
        clip_to_ball(np.zeros(2), np.zeros(3), 0.1)


def test_fgsm_hand_example(f64):
    # a model-free check of the update rule through the shared loop
    x = np.array([[0.20, 0.70]])
    spec = AttackSpec("ifgsm", epsilon=0.05, step_size=0.05, iterations=1)
    out, _ = _sign_ascent(None, x, None, spec, 1, lambda cur: np.array([[-1.3, 0.0]]))
    assert out == pytest.approx(np.array([[0.15, 0.70]]))


def test_spec_validation():
    assert AttackSpec("ifgsm").validate() == []
    fields = [f for f, _ in AttackSpec("ifgsm", epsilon=-1, step_size=0, iterations=0, decay=-1).validate()]
    assert fields == ["epsilon", "step_size", "iterations", "decay"]
    assert AttackSpec("nope").validate()
    assert AttackSpec("ila").validate()  # layer missing
    with pytest.raises(AttackError):
        AttackSpec("tap", tap=TAPParams(smooth_kernel=0)).check()


def test_reductions_exact():
    m = tiny("smallcnn", seed=1)
    x, y = batch()
    one = AttackSpec("ifgsm", epsilon=0.05, step_size=0.05, iterations=1)
    assert np.array_equal(fgsm(m, x, y, 0.05).x_adv, ifgsm(m, x, y, one).x_adv)
    spec = AttackSpec("ifgsm", iterations=8)
    _, ti = ifgsm(m, x, y, spec, return_trajectory=True)
    _, tm = mifgsm(m, x, y, AttackSpec("mifgsm", iterations=8, decay=0.0), return_trajectory=True)
    assert all(np.array_equal(a, b) for a, b in zip(ti, tm))


def test_tap_without_extra_terms_is_ifgsm():
    m = tiny("smallcnn", seed=2)
    x, y = batch(seed=2)
    spec = AttackSpec("tap", iterations=6, tap=TAPParams(feature_weight=0.0, smooth_weight=0.0))
    assert np.array_equal(tap(m, x, y, spec).x_adv, ifgsm(m, x, y, AttackSpec("ifgsm", iterations=6)).x_adv)


def test_tap_feature_term_vanishes_at_zero_perturbation():
    m = tiny("smallcnn", seed=2)
    x, y = batch(seed=2)
    spec = AttackSpec("tap", tap=TAPParams(feature_weight=1.0, smooth_weight=0.0))
    obj = tap_objective(m, x, x, y, spec).item()
    with T.no_grad():
        ce = T.cross_entropy(forward(m, x)[0], y, reduction="sum").item()
    assert obj == ce
    assert np.all(feature_distance(m, x, x) == 0)


def test_tap_feature_weight_raises_feature_distance():
    m = tiny("smallcnn", seed=3, widths=(4, 4, 4))
    x, y = batch(n=16, seed=3)
    dists = []
    for lam in (0.0, 0.001, 0.01):
        spec = AttackSpec("tap", iterations=10, tap=TAPParams(feature_weight=lam, smooth_weight=0.0))
        dists.append(feature_distance(m, tap(m, x, y, spec).x_adv, x).mean())
    assert dists[0] <= dists[1] <= dists[2]


def test_constant_gradient_momentum_matches_ifgsm(f64):
    x = np.full((1, 3), 0.5)
    grad = lambda cur: np.array([[2.0, -1.0, 0.5]])  # noqa: E731
    a, _ = _sign_ascent(None, x, None, AttackSpec("ifgsm"), 20, grad)
    b, _ = _sign_ascent(None, x, None, AttackSpec("mifgsm"), 20, grad, momentum=0.9)
    assert np.array_equal(a, b)


def test_momentum_keeps_direction_through_a_flip(f64):
    # gradients +1, +1, -1 at iterations 0, 1, 2: accumulator 1, 1.9, 0.71 keeps its sign
    grads = iter([1.0, 1.0, -1.0])
    g = lambda cur: np.array([[next(grads)]])  # noqa: E731
    spec = AttackSpec("mifgsm", epsilon=1.0, step_size=0.01)
    _, traj = _sign_ascent(None, np.array([[0.5]]), None, spec, 3, g, momentum=0.9)
    assert [round(float(t[0, 0]), 10) for t in traj] == [0.51, 0.52, 0.53]
    grads = iter([1.0, 1.0, -1.0])
    _, traj = _sign_ascent(None, np.array([[0.5]]), None, spec, 3, g)
    assert round(float(traj[-1][0, 0]), 10) == 0.51


def test_zero_gradient_examples_do_not_move():
    m = tiny("mlp")
    m.params["head.weight"].data[:] = 0  # logits independent of the input
    x, y = batch()
    for kind in ("fgsm", "ifgsm", "mifgsm"):
        assert np.array_equal(run_attack(m, x, y, AttackSpec(kind, iterations=3)).x_adv, x)


def test_ila_degenerate_guide():
    m = tiny("mlp")
    m.params["head.weight"].data[:] = 0
    x, y = batch()
    spec = AttackSpec("ila", ila=ILAParams(layer="hidden0"))
    with pytest.raises(AttackError, match="degenerate"):
        ila_enhance(m, x, y, spec)
    with pytest.raises(ModelError):
        ila_enhance(tiny("mlp"), x, y, AttackSpec("ila", ila=ILAParams(layer="nope")))


def test_ila_amplifies_guide_direction():
    m = tiny("mlp", seed=4, widths=(10,))
    x, y = batch(n=8, seed=4)
    spec = AttackSpec("ila", ila=ILAParams(base_kind="ifgsm", base_iterations=10, enhance_iterations=10, layer="hidden0"))
    guide = ifgsm(m, x, y, AttackSpec("ifgsm", iterations=10)).x_adv

    def feat(v):
        with T.no_grad():
            return forward(m, v, ("hidden0",))[1]["hidden0"].data.astype(np.float64)

    dg = feat(guide) - feat(x)
    dnew = feat(ila_enhance(m, x, y, spec).x_adv) - feat(x)
    assert np.all((dnew * dg).sum(axis=1) >= (dg * dg).sum(axis=1) - 1e-6)


def test_attacks_do_not_touch_parameters_and_are_deterministic():
    m = tiny("mini_vgg", seed=5)
    before = {k: v.copy() for k, v in m.state().items()}
    x, y = batch(seed=5)
    specs = [AttackSpec("fgsm"), AttackSpec("ifgsm", iterations=3), AttackSpec("mifgsm", iterations=3),
             AttackSpec("tap", iterations=3)]
    for spec in specs:
        a = run_attack(m, x, y, spec).x_adv
        assert np.array_equal(a, run_attack(m, x, y, spec).x_adv)
    assert all(np.array_equal(before[k], v) for k, v in m.state().items())
    mlp = tiny("mlp", seed=5)
    before = {k: v.copy() for k, v in mlp.state().items()}
    spec = AttackSpec("ila", ila=ILAParams(base_iterations=2, enhance_iterations=2, layer="hidden0"))
    assert np.array_equal(run_attack(mlp, x, y, spec).x_adv, run_attack(mlp, x, y, spec).x_adv)
    assert all(np.array_equal(before[k], v) for k, v in mlp.state().items())


def test_attacks_require_eval_mode():
    m = tiny("mlp").train()
    x, y = batch()
    with pytest.raises(ModelError):
        run_attack(m, x, y, AttackSpec("fgsm"))


def test_chunking_does_not_change_results():
    m = tiny("mlp", seed=6)
    x, y = batch(n=10, seed=6)
    spec = AttackSpec("mifgsm", iterations=5)
    a = run_attack(m, x, y, spec, batch_size=3).x_adv
    b = run_attack(m, x, y, spec, batch_size=100).x_adv
    np.testing.assert_allclose(a, b, atol=1e-6)


MODELS = {fam: tiny(fam, seed=9) for fam in ("mlp", "smallcnn", "mini_resnet", "mini_vgg")}


@settings(max_examples=60, deadline=None)
@given(st.sampled_from(sorted(MODELS)), st.sampled_from(["fgsm", "ifgsm", "mifgsm", "ila", "tap"]),
       st.floats(0, 0.3), st.floats(0.001, 0.1), st.integers(1, 4), st.integers(0, 10_000))
def test_outputs_respect_budget_and_range(family, kind, eps, alpha, iters, seed):
    m = MODELS[family]
    x, y = batch(n=3, seed=seed)
    spec = AttackSpec(kind, epsilon=eps, step_size=alpha, iterations=iters,
                      ila=ILAParams(base_iterations=iters, enhance_iterations=iters, layer=m.block_names[0]))
    try:
        out = run_attack(m, x, y, spec)
    except AttackError:
        assert kind == "ila"
        return
    assert np.abs(out.x_adv.astype(np.float64) - x).max() <= eps + 1e-6
    assert out.x_adv.min() >= 0 and out.x_adv.max() <= 1
    if eps == 0:
        assert np.array_equal(out.x_adv, x)
