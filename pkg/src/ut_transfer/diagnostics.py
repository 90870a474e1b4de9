"""Why some checkpoints transfer better: gradient alignment, curvature, regression."""

from __future__ import annotations

import csv
import io
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np
import scipy.linalg
from scipy import special

from .models import LossFn, Model, input_gradient
from .transfer import TransferMatrix

GradFn = Callable[[np.ndarray], np.ndarray]


class DiagnosticsError(ValueError):
    pass


@dataclass(frozen=True)
class GradientSimilarityRecord:
    surrogate: tuple[str, int]
    target: tuple[str, int]
    n: int
    value: float
    skipped: int = 0


@dataclass(frozen=True)
class CurvatureRecord:
    model: tuple[str, int]
    h: float
    n: int
    value: float
    skipped: int = 0


@dataclass(frozen=True)
class RegressionResult:
    names: tuple[str, ...]
    coef: np.ndarray
    stderr: np.ndarray
    pvalue: np.ndarray
    r2: float
    n: int
    residuals: np.ndarray
    centred: bool = True

    def as_dict(self) -> dict[str, tuple[float, float, float]]:
        return {n: (float(c), float(s), float(p))
                for n, c, s, p in zip(self.names, self.coef, self.stderr, self.pvalue)}

    def summary(self) -> str:
        """Aligned table: one row per regressor with estimate, standard error and p-value."""
        width = max(12, *(len(n) for n in self.names))
        lines = [f"{'regressor':<{width}}  {'coef':>12}  {'std err':>12}  {'p':>10}"]
        for n, c, s, p in zip(self.names, self.coef, self.stderr, self.pvalue):
            lines.append(f"{n:<{width}}  {c:>12.6g}  {s:>12.6g}  {p:>10.4g}  {_stars(p)}")
        kind = "R^2" if self.centred else "R^2 (uncentred)"
        lines.append(f"{kind} = {self.r2:.4f}, n = {self.n}")
        return "\n".join(lines) + "\n"


def _stars(p: float) -> str:
    if not np.isfinite(p):
        return ""
    return "***" if p < 0.001 else "**" if p < 0.01 else "*" if p < 0.05 else ""


def _batched(fn, x: np.ndarray, batch_size: int, jobs: int) -> np.ndarray:
    chunks = [slice(s, s + batch_size) for s in range(0, len(x), batch_size)]
    if jobs > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            parts = list(pool.map(fn, chunks))
    else:
        parts = [fn(c) for c in chunks]
    return np.concatenate(parts) if parts else np.zeros((0,))


def _mean(values: np.ndarray) -> float:
    # numpy's pairwise summation on a contiguous float64 vector has a fixed
    # layout, so the mean does not depend on how chunks were scheduled
    return float(np.ascontiguousarray(values, dtype=np.float64).sum() / len(values))


def cosine_rows(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise cosine of flattened arrays; returns (values, valid mask)."""
    a = np.asarray(a, dtype=np.float64).reshape(len(a), -1)
    b = np.asarray(b, dtype=np.float64).reshape(len(b), -1)
    if a.shape != b.shape:
        raise DiagnosticsError(f"gradient shapes differ: {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a, axis=1), np.linalg.norm(b, axis=1)
    valid = (na > 0) & (nb > 0)
    out = np.zeros(len(a))
    out[valid] = np.einsum("ij,ij->i", a[valid], b[valid]) / (na[valid] * nb[valid])
    return np.clip(out, -1.0, 1.0), valid


def similarity_from_gradients(gs: np.ndarray, gt: np.ndarray) -> tuple[float, int, int]:
    """Mean cosine over examples where both gradients are nonzero: (value, used, skipped)."""
    values, valid = cosine_rows(gs, gt)
    if not valid.any():
        raise DiagnosticsError("gradient similarity undefined: every example has a zero gradient")
    return _mean(values[valid]), int(valid.sum()), int((~valid).sum())


def gradient_similarity(surrogate: Model, target: Model, x: np.ndarray, labels: np.ndarray,
                        names: tuple[tuple[str, int], tuple[str, int]] = (("", 0), ("", 0)),
                        batch_size: int = 250, jobs: int = 1) -> GradientSimilarityRecord:
    """Mean cosine similarity between the two models' input gradients on clean inputs."""
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise DiagnosticsError("gradient_similarity: empty eval set")
    for m in (surrogate, target):
        if tuple(x.shape[1:]) != m.descriptor.input_shape:
            raise DiagnosticsError(f"model expects {m.descriptor.input_shape}, inputs are {tuple(x.shape[1:])}")

    def both(sl):
        gs = input_gradient(surrogate, x[sl], labels[sl]).reshape(len(labels[sl]), -1)
        gt = input_gradient(target, x[sl], labels[sl]).reshape(len(labels[sl]), -1)
        return np.stack([gs, gt], axis=1)

    pairs = _batched(both, np.asarray(x), batch_size, jobs)
    value, used, skipped = similarity_from_gradients(pairs[:, 0], pairs[:, 1])
    return GradientSimilarityRecord(tuple(names[0]), tuple(names[1]), used, value, skipped)


def curvature_values(grad_fn: GradFn, x: np.ndarray, h: float = 0.01,
                     direction: str = "sign") -> tuple[np.ndarray, np.ndarray]:
    """Per-example ``|| g(x + h z) - g(x) ||_2 / h`` for a unit direction ``z``.

    ``direction="sign"`` uses the normalized gradient sign, ``"gradient"`` the
    normalized gradient itself. ``grad_fn`` maps a batch to per-example
    gradients of the same shape. Returns (values, valid mask); examples whose
    gradient is zero have no direction and are marked invalid.
    """
    if not h > 0:
        raise DiagnosticsError(f"curvature step h must be > 0, got {h}")
    if direction not in ("sign", "gradient"):
        raise DiagnosticsError(f"unknown curvature direction rule {direction!r}")
    x = np.asarray(x)
    n = len(x)
    g0 = np.asarray(grad_fn(x))
    flat = g0.reshape(n, -1).astype(np.float64)
    z = np.sign(flat) if direction == "sign" else flat.copy()
    norms = np.linalg.norm(z, axis=1)
    valid = norms > 0
    z[valid] /= norms[valid, None]
    x_step = (x.reshape(n, -1) + h * z).astype(x.dtype).reshape(x.shape)
    g1 = np.asarray(grad_fn(x_step)).reshape(n, -1).astype(np.float64)
    values = np.linalg.norm(g1 - flat, axis=1) / h
    values[~valid] = 0.0
    return values, valid


def curvature(model: Model, x: np.ndarray, labels: np.ndarray, h: float = 0.01, direction: str = "sign",
              name: tuple[str, int] = ("", 0), loss_fn: LossFn | None = None,
              batch_size: int = 250, jobs: int = 1) -> CurvatureRecord:
    """Mean finite-difference curvature magnitude of the loss around each input.

    The step is taken in unclipped input space so the probe stays a pure
    finite difference.
    """
    labels = np.asarray(labels)
    x = np.asarray(x)
    if len(labels) == 0:
        raise DiagnosticsError("curvature: empty subset")

    def chunk(sl):
        vals, ok = curvature_values(lambda b: input_gradient(model, b, labels[sl], loss_fn=loss_fn),
                                    x[sl], h, direction)
        return np.stack([vals, ok.astype(np.float64)], axis=1)

    res = _batched(chunk, x, batch_size, jobs)
    valid = res[:, 1] > 0
    if not valid.any():
        raise DiagnosticsError("curvature undefined: every example has a zero gradient")
    return CurvatureRecord(tuple(name), float(h), int(valid.sum()), _mean(res[valid, 0]), int((~valid).sum()))


def pearson(xs: Sequence[float], ys: Sequence[float]) -> tuple[float, float]:
    """Product-moment correlation and its two-tailed p-value (Student t, n - 2 dof)."""
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise DiagnosticsError(f"pearson needs equal-length 1-D series, got {x.shape} and {y.shape}")
    n = len(x)
    if n < 3:
        raise DiagnosticsError(f"pearson needs at least 3 points, got {n}")
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0 or syy == 0:
        raise DiagnosticsError("correlation undefined for a constant series")
    u, v = dx / np.sqrt(sxx), dy / np.sqrt(syy)
    # 1 -/+ |u -/+ v|^2 / 2 avoids cancellation near |r| = 1, so affine series give exactly +-1
    if u @ v >= 0:
        r = float(max(1.0 - ((u - v) @ (u - v)) / 2.0, 0.0))
    else:
        r = float(min(((u + v) @ (u + v)) / 2.0 - 1.0, 0.0))
    df = n - 2
    if abs(r) == 1.0:
        return r, 0.0
    t2 = r * r * df / (1.0 - r * r)
    # P(|T| > t) for Student t equals I_{df/(df+t^2)}(df/2, 1/2)
    p = float(special.betainc(df / 2.0, 0.5, df / (df + t2)))
    return r, p


def t_two_tailed(t: np.ndarray, df: int) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        x = df / (df + t * t)
        p = special.betainc(df / 2.0, 0.5, x)
    return np.where(np.isinf(t), 0.0, p)


def ols_fit(X: np.ndarray, y: np.ndarray, names: Sequence[str] | None = None, rtol: float = 1e-10) -> RegressionResult:
    """Ordinary least squares via a column-pivoted QR factorization.

    R^2 is centred when a constant lies in the column space of ``X`` and
    uncentred otherwise, so it always lies in [0, 1]. For constant ``y`` it
    is reported as 0.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2 or y.shape != (X.shape[0],):
        raise DiagnosticsError(f"ols_fit: X must be (n, k) and y (n,), got {X.shape} and {y.shape}")
    n, k = X.shape
    names = tuple(names) if names is not None else tuple(f"x{i}" for i in range(k))
    if len(names) != k:
        raise DiagnosticsError(f"{len(names)} names for {k} columns")
    if n < k:
        raise DiagnosticsError(f"ols_fit: {n} rows cannot identify {k} columns")
    if not (np.isfinite(X).all() and np.isfinite(y).all()):
        raise DiagnosticsError("ols_fit: non-finite values in X or y")
    Q, R, piv = scipy.linalg.qr(X, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    tol = rtol * max(diag[0] if k else 0.0, 1.0) * max(n, k)
    rank = int((diag > tol).sum())
    if rank < k:
        dependent = sorted(names[j] for j in piv[rank:])
        raise DiagnosticsError(f"design matrix is rank deficient ({rank} < {k}); "
                               f"linearly dependent columns: {', '.join(dependent)}")
    beta_p = scipy.linalg.solve_triangular(R, Q.T @ y)
    coef = np.empty(k)
    coef[piv] = beta_p
    resid = y - X @ coef
    ss_res = float(resid @ resid)
    df = n - k
    rinv = scipy.linalg.solve_triangular(R, np.eye(k))
    cov_p = rinv @ rinv.T
    cov = np.empty_like(cov_p)
    cov[np.ix_(piv, piv)] = cov_p
    if df > 0:
        se = np.sqrt(np.diag(cov) * ss_res / df)
        with np.errstate(divide="ignore", invalid="ignore"):
            t = coef / se
        pv = t_two_tailed(t, df)
        pv = np.where((se == 0) & (coef == 0), 1.0, pv)
    else:
        se = np.full(k, np.nan)
        pv = np.full(k, np.nan)

    ones = np.ones(n)
    centred = bool(np.linalg.norm(ones - Q @ (Q.T @ ones)) <= 1e-8 * np.sqrt(n))
    ss_tot = float(((y - y.mean()) ** 2).sum()) if centred else float(y @ y)
    r2 = 0.0 if ss_tot == 0 else float(np.clip(1.0 - ss_res / ss_tot, 0.0, 1.0))
    return RegressionResult(names, coef, se, pv, r2, n, resid, centred)


def explanatory_design(matrix: TransferMatrix, sims: Mapping[tuple, float], curvatures: Mapping[tuple, float],
                       attack: str | None = None) -> tuple[np.ndarray, np.ndarray, tuple[str, ...]]:
    """Design for post-attack accuracy on similarity, similarity^2, curvature and per-source constants.

    ``sims`` is keyed by ``(surrogate_arch, surrogate_epoch, target_arch,
    target_epoch)`` and ``curvatures`` by ``(surrogate_arch, surrogate_epoch)``.
    """
    cells = [c for c in matrix.cells if attack is None or c.attack == attack]
    if not cells:
        raise DiagnosticsError("explanatory_model: no cells to regress")
    missing = []
    for c in cells:
        if (c.surrogate_arch, c.surrogate_epoch, c.target_arch, c.target_epoch) not in sims:
            missing.append(f"similarity for {c.surrogate_arch}@{c.surrogate_epoch}->{c.target_arch}@{c.target_epoch}")
        if (c.surrogate_arch, c.surrogate_epoch) not in curvatures:
            missing.append(f"curvature for {c.surrogate_arch}@{c.surrogate_epoch}")
    if missing:
        raise DiagnosticsError("missing diagnostics for cells: " + "; ".join(sorted(set(missing))))
    sources = sorted({c.surrogate_arch for c in cells})
    rows, ys = [], []
    for c in cells:
        s = float(sims[(c.surrogate_arch, c.surrogate_epoch, c.target_arch, c.target_epoch)])
        k = float(curvatures[(c.surrogate_arch, c.surrogate_epoch)])
        rows.append([s, s * s, k] + [1.0 if c.surrogate_arch == src else 0.0 for src in sources])
        ys.append(c.post_attack_acc)
    names = ("similarity", "similarity^2", "curvature") + tuple(f"source[{s}]" for s in sources)
    return np.array(rows), np.array(ys), names


def explanatory_model(matrix: TransferMatrix, sims, curvatures, attack: str | None = None) -> RegressionResult:
    """OLS of post-attack accuracy on the explanatory regressors.

    ``sims``/``curvatures`` may be mappings (see :func:`explanatory_design`) or
    sequences of records.
    """
    X, y, names = explanatory_design(matrix, _sim_map(sims), _curv_map(curvatures), attack)
    return ols_fit(X, y, names)


def _sim_map(sims) -> dict:
    if isinstance(sims, Mapping):
        return dict(sims)
    return {(*r.surrogate, *r.target): r.value for r in sims}


def _curv_map(curvs) -> dict:
    if isinstance(curvs, Mapping):
        return dict(curvs)
    return {tuple(r.model): r.value for r in curvs}


def per_epoch_similarity(sims, surrogate: str | None = None) -> dict[int, float]:
    """Mean similarity across targets for each surrogate epoch."""
    acc: dict[int, list[float]] = {}
    for (sa, se, _ta, _te), v in sorted(_sim_map(sims).items()):
        if surrogate is None or sa == surrogate:
            acc.setdefault(se, []).append(v)
    return {e: float(np.mean(v)) for e, v in sorted(acc.items())}


def similarity_accuracy_correlation(matrix: TransferMatrix, sims, attack: str) -> tuple[float, float]:
    """pearson(mean similarity per surrogate epoch, mean post-attack accuracy per epoch)."""
    sim = per_epoch_similarity(sims)
    acc = matrix.mean_by_epoch(attack)
    epochs = sorted(set(sim) & set(acc))
    return pearson([sim[e] for e in epochs], [acc[e] for e in epochs])


def attack_gap(matrix: TransferMatrix, attack_a: str, attack_b: str) -> dict[int, float]:
    """Per surrogate epoch: mean accuracy under ``attack_a`` minus under ``attack_b``."""
    a, b = matrix.mean_by_epoch(attack_a), matrix.mean_by_epoch(attack_b)
    return {e: a[e] - b[e] for e in sorted(set(a) & set(b))}


def gap_curvature_correlation(matrix: TransferMatrix, curvatures, attack_a: str = "mifgsm",
                              attack_b: str = "ifgsm", surrogate: str | None = None) -> tuple[float, float]:
    """pearson(curvature per surrogate epoch, accuracy gap between two attacks)."""
    gap = attack_gap(matrix if surrogate is None else matrix.select(surrogate=surrogate), attack_a, attack_b)
    curv = {e: v for (a, e), v in _curv_map(curvatures).items() if surrogate is None or a == surrogate}
    epochs = sorted(set(gap) & set(curv))
    return pearson([curv[e] for e in epochs], [gap[e] for e in epochs])


SIMILARITY_FIELDS = ("surrogate_arch", "surrogate_epoch", "target_arch", "target_epoch", "n", "skipped", "similarity")
CURVATURE_FIELDS = ("arch", "epoch", "h", "n", "skipped", "curvature")


def similarity_csv(records: Sequence[GradientSimilarityRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SIMILARITY_FIELDS)
    for r in sorted(records, key=lambda r: (r.surrogate, r.target)):
        w.writerow([*r.surrogate, *r.target, r.n, r.skipped, repr(r.value)])
    return buf.getvalue()


def curvature_csv(records: Sequence[CurvatureRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CURVATURE_FIELDS)
    for r in sorted(records, key=lambda r: (r.model, r.h)):
        w.writerow([*r.model, repr(r.h), r.n, r.skipped, repr(r.value)])
    return buf.getvalue()


def _read_rows(text: str, fields: tuple[str, ...]) -> list[list[str]]:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or tuple(rows[0]) != fields:
        raise DiagnosticsError(f"CSV header must be {','.join(fields)}")
    for row in rows[1:]:
        if len(row) != len(fields):
            raise DiagnosticsError(f"malformed CSV row {row}")
    return rows[1:]


def parse_similarity_csv(text: str) -> list[GradientSimilarityRecord]:
    return [GradientSimilarityRecord((r[0], int(r[1])), (r[2], int(r[3])), int(r[4]), float(r[6]), int(r[5]))
            for r in _read_rows(text, SIMILARITY_FIELDS)]


def parse_curvature_csv(text: str) -> list[CurvatureRecord]:
    return [CurvatureRecord((r[0], int(r[1])), float(r[2]), int(r[3]), float(r[5]), int(r[4]))
            for r in _read_rows(text, CURVATURE_FIELDS)]
