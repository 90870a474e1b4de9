import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ut_transfer import tensor as T
from ut_transfer.diagnostics import (CurvatureRecord, DiagnosticsError, GradientSimilarityRecord, attack_gap,
                                     curvature, curvature_csv, curvature_values, explanatory_design,
                                     explanatory_model, gap_curvature_correlation, gradient_similarity, ols_fit,
                                     parse_curvature_csv, parse_similarity_csv, pearson, similarity_accuracy_correlation,
                                     similarity_csv, similarity_from_gradients)
from ut_transfer.models import forward
from ut_transfer.transfer import TransferCell, TransferMatrix
from conftest import tiny


def data(n=16, seed=0):
    rng = np.random.default_rng(seed)
    return rng.random((n, 1, 8, 8)).astype(np.float32), rng.integers(0, 3, n)


# reference implementations written from the textbook definitions

def brute_pearson(x, y):
    n = len(x)
    sx, sy = sum(x), sum(y)
    sxy = sum(a * b for a, b in zip(x, y))
    sxx, syy = sum(a * a for a in x), sum(b * b for b in y)
    return (n * sxy - sx * sy) / np.sqrt((n * sxx - sx * sx) * (n * syy - sy * sy))


def normal_equations(X, y):
    xtx = X.T @ X
    beta = np.linalg.solve(xtx, X.T @ y)
    resid = y - X @ beta
    s2 = resid @ resid / (len(y) - X.shape[1])
    return beta, np.sqrt(np.diag(np.linalg.inv(xtx)) * s2)


def student_t_two_tailed(t, df, steps=200_000):
    # midpoint integration of the Student-t density on [0, |t|]
    from math import gamma, pi, sqrt
    c = gamma((df + 1) / 2) / (sqrt(df * pi) * gamma(df / 2))
    u = (np.arange(steps) + 0.5) * abs(t) / steps
    area = c * np.sum((1 + u * u / df) ** (-(df + 1) / 2)) * abs(t) / steps
    return 1 - 2 * area


def test_similarity_hand_examples():
    gs = np.array([[1.0, 0.0], [0.0, 1.0]])
    gt = np.array([[1.0, 0.0], [1.0, 0.0]])
    assert similarity_from_gradients(gs, gt) == (0.5, 2, 0)
    assert similarity_from_gradients(gs, -gs)[0] == -1.0
    value, used, skipped = similarity_from_gradients(np.array([[1.0, 1.0], [0.0, 0.0]]), np.ones((2, 2)))
    assert (value, used, skipped) == (pytest.approx(1.0), 1, 1)
    with pytest.raises(DiagnosticsError, match="undefined"):
        similarity_from_gradients(np.zeros((2, 3)), np.ones((2, 3)))


def test_self_similarity_is_one():
    for fam in ("mlp", "smallcnn", "mini_resnet"):
        m = tiny(fam, seed=3)
        x, y = data()
        rec = gradient_similarity(m, m, x, y, names=((fam, 1), (fam, 1)))
        assert isinstance(rec, GradientSimilarityRecord)
        assert rec.value == pytest.approx(1.0, abs=1e-6)
        assert rec.n + rec.skipped == len(x)


def test_similarity_parallel_matches_serial():
    a, b = tiny("smallcnn", seed=1), tiny("smallcnn", seed=2)
    x, y = data(n=40)
    r1 = gradient_similarity(a, b, x, y, batch_size=7)
    r2 = gradient_similarity(a, b, x, y, batch_size=7, jobs=4)
    assert r1 == r2 and abs(r1.value) <= 1 + 1e-9


def test_quadratic_curvature_closed_form(f64):
    vals, ok = curvature_values(lambda v: 2 * v, np.array([[1.0]]), h=0.1)
    assert ok.all() and vals[0] == pytest.approx(2.0, abs=1e-9)
    vals, ok = curvature_values(lambda v: 2 * v, np.array([[1.0], [0.0]]), h=0.1)
    assert ok.tolist() == [True, False] and vals[1] == 0


def test_linear_model_has_zero_curvature():
    m = tiny("mlp", seed=4)
    m.params["hidden0.bias"].data[:] = 100.0  # every unit active: the network is affine
    x, y = data()
    rec = curvature(m, x, y, loss_fn=lambda logits, labels: T.tensor_sum(logits))
    assert rec.value == 0.0 and rec.skipped == 0


def test_curvature_errors_and_order_invariance():
    m = tiny("smallcnn", seed=5)
    x, y = data(n=12, seed=5)
    with pytest.raises(DiagnosticsError):
        curvature(m, x, y, h=0.0)
    with pytest.raises(DiagnosticsError):
        curvature(m, x, y, direction="random")
    perm = np.random.default_rng(0).permutation(len(x))
    assert curvature(m, x, y).value == pytest.approx(curvature(m, x[perm], y[perm]).value, rel=1e-12)
    dead = tiny("mlp")
    dead.params["head.weight"].data[:] = 0
    with pytest.raises(DiagnosticsError, match="every example"):
        curvature(dead, x, y)


def fd_curvature(model, x, y, h):
    """Independent curvature using finite-difference input gradients."""
    def losses(b):
        with T.no_grad():
            logp = T.log_softmax(forward(model, b)[0]).data
        return -logp[np.arange(len(b)), y]

    g0 = T.per_example_fd_gradient(losses, x, h=1e-6).reshape(len(x), -1)
    z = np.where(np.abs(g0) > 1e-9, np.sign(g0), 0.0)
    z /= np.linalg.norm(z, axis=1, keepdims=True)
    g1 = T.per_example_fd_gradient(losses, x + h * z.reshape(x.shape), h=1e-6).reshape(len(x), -1)
    return np.linalg.norm(g1 - g0, axis=1).mean() / h


def test_curvature_matches_finite_difference_oracle():
    with T.precision(np.float64):
        m = tiny("smallcnn", seed=6, widths=(3, 4, 4))
        x, y = data(n=32, seed=6)
        x = x.astype(np.float64)
        ours = curvature(m, x, y, h=0.01).value
        assert ours == pytest.approx(fd_curvature(m, x, y, 0.01), rel=1e-4)


def test_pearson_examples():
    xs = np.arange(6.0)
    assert pearson(xs, 2 * xs + 1) == (1.0, 0.0)
    assert pearson(xs, -xs)[0] == -1.0
    r, _ = pearson([1, 2, 3, 4, 5], [2, 1, 4, 3, 5])
    assert abs(r - 0.8) < 1e-12
    for bad in ([1, 1, 1], [1, 2]):
        with pytest.raises(DiagnosticsError):
            pearson(bad, [1, 2, 3][: len(bad)])


@settings(max_examples=50)
@given(st.floats(-100, 100).filter(lambda a: abs(a) > 1e-3), st.floats(-10, 10))
def test_pearson_sign_of_affine_map(a, b):
    xs = np.array([0.3, 1.7, 2.2, 5.0, 5.5])
    assert pearson(xs, a * xs + b)[0] == np.sign(a)


def test_pearson_p_value_against_integration():
    rng = np.random.default_rng(0)
    for n in (5, 12, 40):
        x = rng.normal(size=n)
        y = 0.4 * x + rng.normal(size=n)
        r, p = pearson(x, y)
        t = r * np.sqrt((n - 2) / (1 - r * r))
        assert p == pytest.approx(student_t_two_tailed(t, n - 2), abs=1e-8)


def test_pearson_and_ols_against_brute_force():
    rng = np.random.default_rng(1)
    for _ in range(100):
        n, k = rng.integers(8, 60), rng.integers(1, 6)
        X = np.column_stack([np.ones(n), rng.normal(size=(n, k))])
        y = X @ rng.normal(size=k + 1) + rng.normal(size=n)
        res = ols_fit(X, y)
        beta, se = normal_equations(X, y)
        np.testing.assert_allclose(res.coef, beta, rtol=0, atol=1e-8)
        np.testing.assert_allclose(res.stderr, se, rtol=1e-8)
        assert np.abs(X.T @ res.residuals).max() < 1e-8
        assert pearson(X[:, 1], y)[0] == pytest.approx(brute_pearson(X[:, 1], y), abs=1e-8)


def test_ols_examples():
    X = np.array([[1.0, 0], [1, 1], [1, 2]])
    res = ols_fit(X, np.array([1.0, 3, 5]), names=["const", "x"])
    assert res.coef == pytest.approx([1, 2]) and res.r2 == pytest.approx(1.0)
    flat = ols_fit(X, np.full(3, 4.0))
    assert flat.coef[1] == pytest.approx(0, abs=1e-12) and flat.r2 == 0
    with pytest.raises(DiagnosticsError, match="dependent columns"):
        ols_fit(np.column_stack([np.ones(4), np.arange(4.0), 2 * np.arange(4.0)]), np.arange(4.0),
                names=["c", "a", "b"])
    with pytest.raises(DiagnosticsError):
        ols_fit(np.ones((2, 3)), np.ones(2))
    assert "const" in res.summary()


def planted(seed=0, sources=("s1", "s2"), epochs=range(1, 13), targets=("t1", "t2")):
    rng = np.random.default_rng(seed)
    coef = {"similarity": -30.0, "similarity^2": 12.0, "curvature": 4.0, "s1": 60.0, "s2": 45.0}
    cells, sims, curvs = [], {}, {}
    for s in sources:
        for e in epochs:
            curvs[(s, e)] = float(rng.uniform(0.5, 3))
            for t in targets:
                sims[(s, e, t, 1)] = float(rng.uniform(-0.2, 0.9))
                v = sims[(s, e, t, 1)]
                acc = coef[s] + coef["similarity"] * v + coef["similarity^2"] * v * v + coef["curvature"] * curvs[(s, e)]
                cells.append(TransferCell(s, e, t, 1, "mifgsm", 0.05, 100, 90.0, acc))
    return TransferMatrix(cells), sims, curvs, coef


def test_explanatory_model_recovers_planted_coefficients():
    m, sims, curvs, coef = planted()
    res = explanatory_model(m, sims, curvs)
    assert res.r2 == pytest.approx(1.0, abs=1e-9)
    got = dict(zip(res.names, res.coef))
    for name in ("similarity", "similarity^2", "curvature"):
        assert got[name] == pytest.approx(coef[name], abs=1e-6)
    assert got["source[s1]"] == pytest.approx(coef["s1"], abs=1e-6)
    recs = [GradientSimilarityRecord((k[0], k[1]), (k[2], k[3]), 10, v, 0) for k, v in sims.items()]
    crecs = [CurvatureRecord(k, 0.01, 10, v, 0) for k, v in curvs.items()]
    assert np.allclose(explanatory_model(m, recs, crecs).coef, res.coef)


def test_explanatory_model_lists_missing_cells():
    m, sims, curvs, _ = planted()
    del sims[("s1", 3, "t2", 1)]
    del curvs[("s2", 5)]
    with pytest.raises(DiagnosticsError) as err:
        explanatory_design(m, sims, curvs)
    assert "s1@3->t2@1" in str(err.value) and "curvature for s2@5" in str(err.value)


def test_correlation_helpers():
    cells = []
    for e, (mi, i) in enumerate([(20.0, 30.0), (25.0, 29.0), (40.0, 35.0), (45.0, 36.0)], start=1):
        cells += [TransferCell("s", e, "t", 1, "mifgsm", 0.05, 10, 90.0, mi),
                  TransferCell("s", e, "t", 1, "ifgsm", 0.05, 10, 90.0, i)]
    m = TransferMatrix(cells)
    assert attack_gap(m, "mifgsm", "ifgsm") == {1: -10.0, 2: -4.0, 3: 5.0, 4: 9.0}
    r, _ = gap_curvature_correlation(m, {("s", e): float(e) for e in range(1, 5)})
    assert r > 0.95
    sims = {("s", e, "t", 1): 1.0 - 0.1 * e for e in range(1, 5)}
    assert similarity_accuracy_correlation(m, sims, "mifgsm")[0] < -0.9


def test_diagnostics_csv_round_trip():
    sims = [GradientSimilarityRecord(("a", 1), ("b", 3), 10, 0.1 + 1e-17, 2)]
    curvs = [CurvatureRecord(("a", 1), 0.01, 64, 1 / 3, 0)]
    assert parse_similarity_csv(similarity_csv(sims)) == sims
    assert parse_curvature_csv(curvature_csv(curvs)) == curvs
