"""Downstream prediction and statistics.

Protocol per target: stratified k-fold over subjects; per fold, remove
age/sex effects from the targets by a linear regression fit on the
training subjects only, standardize features on the training fold, pick
the ridge strength by inner cross-validation, fit kernel ridge
regression, and predict the held-out subjects.  Pearson correlation is
computed on the out-of-fold predictions concatenated across folds, with
percentile-bootstrap confidence intervals, paired bootstrap tests, and
permutation tests against region-permuted baselines.
"""

from __future__ import annotations

import warnings as _warnings
from dataclasses import dataclass

import numpy as np

from .errors import DataError, NumericError

LAMBDA_GRID = (1e-3, 1e-2, 1e-1, 1.0, 10.0, 100.0)
STRATIFY_BINS = 5


@dataclass(frozen=True)
class CVPlan:
    """Fold id per subject; fold sizes differ by at most one."""

    n_folds: int
    assignment: np.ndarray
    bins: int
    seed: int

    def fold(self, f: int) -> np.ndarray:
        return np.flatnonzero(self.assignment == f)

    def train(self, f: int) -> np.ndarray:
        return np.flatnonzero(self.assignment != f)


def stratified_kfold(targets, k: int, bins: int = STRATIFY_BINS, seed=0) -> CVPlan:
    """Quantile-bin the targets, shuffle within bins, deal round-robin."""
    y = np.asarray(targets, dtype=np.float64)
    n = y.size
    if n < k:
        raise DataError(f"cannot make {k} folds from {n} subjects")
    if bins < 1:
        raise DataError("bins must be >= 1")
    edges = np.unique(np.quantile(y, np.linspace(0.0, 1.0, bins + 1)[1:-1]))
    bin_ids = np.searchsorted(edges, y, side="right")
    rng = np.random.default_rng(seed)
    assignment = np.empty(n, dtype=np.int64)
    cursor = 0
    for b in np.unique(bin_ids):
        members = np.flatnonzero(bin_ids == b)
        members = members[rng.permutation(members.size)]
        for idx in members:
            assignment[idx] = cursor % k
            cursor += 1
    return CVPlan(n_folds=k, assignment=assignment, bins=bins, seed=seed if np.isscalar(seed) else tuple(seed))


def residualize_confounds(targets, confounds, train_idx) -> np.ndarray:
    """OLS on [1, age, sex] fit on the training rows, residuals for all rows.

    A confound that is constant on the training rows (e.g. a single-sex
    fold) is dropped from the design with a warning.
    """
    y = np.asarray(targets, dtype=np.float64)
    c = np.asarray(confounds, dtype=np.float64)
    train_idx = np.asarray(train_idx, dtype=np.int64)
    if c.ndim != 2 or c.shape[0] != y.size:
        raise DataError("confounds must be (n_subjects, n_confounds)")
    keep = []
    for j in range(c.shape[1]):
        if np.ptp(c[train_idx, j]) > 0:
            keep.append(j)
        else:
            _warnings.warn(
                f"confound column {j} is constant on the training fold; dropped",
                stacklevel=2,
            )
    design = np.column_stack([np.ones(y.size), c[:, keep]])
    beta, *_ = np.linalg.lstsq(design[train_idx], y[train_idx], rcond=None)
    return y - design @ beta


@dataclass
class KRRModel:
    kernel: str
    lam: float
    alpha: np.ndarray
    x_train: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    bandwidth: float | None = None


def _standardize(x, mean, std):
    return (x - mean) / std


def _kernel_matrix(model_kernel: str, a: np.ndarray, b: np.ndarray,
                   bandwidth: float | None) -> np.ndarray:
    if model_kernel == "linear":
        return a @ b.T
    if model_kernel == "rbf":
        sq = ((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=-1)
        return np.exp(-sq / (2.0 * bandwidth * bandwidth))
    raise DataError(f"unknown kernel: {model_kernel!r}")


def _median_bandwidth(z: np.ndarray) -> float:
    diff = z[:, None, :] - z[None, :, :]
    dist = np.sqrt((diff * diff).sum(axis=-1))
    iu = np.triu_indices(z.shape[0], k=1)
    med = float(np.median(dist[iu])) if iu[0].size else 1.0
    return med if med > 0 else 1.0


def krr_fit(features, targets, kernel: str = "linear", lam: float = 1.0) -> KRRModel:
    """Dual kernel ridge solution alpha = (K + lam * n * I)^-1 y.

    Features are standardized with statistics of the given (training) rows.
    """
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    if lam < 0:
        raise DataError("ridge strength must be >= 0")
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    std = np.where(std > 0, std, 1.0)
    z = _standardize(x, mean, std)
    bandwidth = _median_bandwidth(z) if kernel == "rbf" else None
    k = _kernel_matrix(kernel, z, z, bandwidth)
    n = x.shape[0]
    system = k + lam * n * np.eye(n)
    try:
        alpha = np.linalg.solve(system, y)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"singular kernel system: {exc}") from exc
    if not np.all(np.isfinite(alpha)):
        raise NumericError("kernel ridge solve produced non-finite coefficients")
    residual = np.max(np.abs(system @ alpha - y))
    if residual > 1e-6 * (np.max(np.abs(y)) + 1.0):
        raise NumericError("kernel ridge system is numerically singular")
    return KRRModel(
        kernel=kernel, lam=lam, alpha=alpha, x_train=z, mean=mean, std=std,
        bandwidth=bandwidth,
    )


def krr_predict(model: KRRModel, features) -> np.ndarray:
    x = np.asarray(features, dtype=np.float64)
    z = _standardize(x, model.mean, model.std)
    k = _kernel_matrix(model.kernel, z, model.x_train, model.bandwidth)
    return k @ model.alpha


def pearson(y, yhat) -> float:
    """Product-moment correlation; degenerate input raises NumericError."""
    a = np.asarray(y, dtype=np.float64)
    b = np.asarray(yhat, dtype=np.float64)
    if a.size != b.size or a.size < 2:
        raise DataError("pearson requires two equal-length vectors of size >= 2")
    da = a - a.mean()
    db = b - b.mean()
    sa = float(np.sqrt((da * da).sum()))
    sb = float(np.sqrt((db * db).sum()))
    if sa == 0.0 or sb == 0.0:
        raise NumericError("pearson undefined for a constant input")
    return float(np.clip((da * db).sum() / (sa * sb), -1.0, 1.0))


def select_lambda(features, targets, grid=LAMBDA_GRID, inner_k: int = 5,
                  seed=0, kernel: str = "linear", bins: int = STRATIFY_BINS) -> float:
    """Inner-CV ridge selection: highest out-of-fold r, ties to the smallest."""
    grid = tuple(grid)
    if not grid:
        raise DataError("lambda grid must be nonempty")
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    if len(grid) == 1:
        return float(grid[0])
    plan = stratified_kfold(y, inner_k, bins=bins, seed=seed)
    best_lam, best_r = None, -np.inf
    for lam in sorted(grid):
        preds = np.empty_like(y)
        try:
            for f in range(inner_k):
                tr, te = plan.train(f), plan.fold(f)
                model = krr_fit(x[tr], y[tr], kernel=kernel, lam=lam)
                preds[te] = krr_predict(model, x[te])
            r = pearson(y, preds)
        except NumericError:
            continue
        if r > best_r:
            best_lam, best_r = lam, r
    if best_lam is None:
        # every candidate failed; fall back to the strongest shrinkage
        return float(max(grid))
    return float(best_lam)


@dataclass(frozen=True)
class PredictionRecord:
    """Out-of-fold predictions: each subject predicted exactly once."""

    y_true: np.ndarray
    y_pred: np.ndarray
    fold: np.ndarray

    def __post_init__(self):
        yt = np.asarray(self.y_true, dtype=np.float64)
        yp = np.asarray(self.y_pred, dtype=np.float64)
        fd = np.asarray(self.fold, dtype=np.int64)
        if not (yt.size == yp.size == fd.size):
            raise DataError("prediction record arrays must align")
        object.__setattr__(self, "y_true", yt)
        object.__setattr__(self, "y_pred", yp)
        object.__setattr__(self, "fold", fd)

    @property
    def n(self) -> int:
        return self.y_true.size


@dataclass(frozen=True)
class StatResult:
    r: float
    ci_low: float
    ci_high: float
    delta: float
    n: int
    seed: int
    p_paired: float | None = None
    p_perm: float | None = None


def _replicate_rng(seed, rep: int) -> np.random.Generator:
    base = [seed] if np.isscalar(seed) else list(seed)
    return np.random.default_rng(base + [rep])


def bootstrap_ci(record: PredictionRecord, n_boot: int = 1000, level: float = 0.95,
                 seed=0) -> StatResult:
    """Percentile bootstrap over subjects; constant replicates are skipped."""
    if record.n < 10:
        raise DataError("bootstrap CI requires at least 10 subjects")
    r_obs = pearson(record.y_true, record.y_pred)
    rs = []
    skipped = 0
    for rep in range(n_boot):
        rng = _replicate_rng(seed, rep)
        idx = rng.integers(0, record.n, record.n)
        try:
            rs.append(pearson(record.y_true[idx], record.y_pred[idx]))
        except NumericError:
            skipped += 1
    if skipped > 0.1 * n_boot:
        raise NumericError(
            f"bootstrap degenerate: {skipped}/{n_boot} constant replicates"
        )
    tail = 100.0 * (1.0 - level) / 2.0
    lo, hi = np.percentile(rs, [tail, 100.0 - tail])
    return StatResult(
        r=r_obs, ci_low=float(lo), ci_high=float(hi), delta=float((hi - lo) / 2.0),
        n=record.n, seed=int(seed) if np.isscalar(seed) else tuple(seed),
    )


def paired_bootstrap_test(record_a: PredictionRecord, record_b: PredictionRecord,
                          n_boot: int = 1000, seed=0) -> float:
    """Two-sided paired bootstrap on the difference of Pearson correlations."""
    if record_a.n != record_b.n or not np.array_equal(record_a.y_true, record_b.y_true):
        raise DataError("paired bootstrap requires identical subject sets")
    n = record_a.n
    deltas = []
    for rep in range(n_boot):
        rng = _replicate_rng(seed, rep)
        idx = rng.integers(0, n, n)
        try:
            ra = pearson(record_a.y_true[idx], record_a.y_pred[idx])
            rb = pearson(record_b.y_true[idx], record_b.y_pred[idx])
        except NumericError:
            continue
        deltas.append(ra - rb)
    if not deltas:
        raise NumericError("paired bootstrap: no valid replicates")
    d = np.asarray(deltas)
    p = 2.0 * min(float(np.mean(d <= 0.0)), float(np.mean(d >= 0.0)))
    return float(min(1.0, max(p, 1.0 / len(deltas))))


def permutation_test(observed_r: float, null_rs) -> float:
    """One-sided p = (1 + #{null >= observed}) / (1 + P)."""
    nulls = np.asarray(null_rs, dtype=np.float64)
    if nulls.size == 0:
        raise DataError("permutation test requires at least one null value")
    return float((1 + np.sum(nulls >= observed_r)) / (1 + nulls.size))


@dataclass
class EvaluationReport:
    """Per-target downstream results: statistics plus out-of-fold predictions."""

    results: dict
    records: dict
    k: int
    seed: int


def run_downstream(embeddings, targets: dict, confounds, k: int = 10, seed=0,
                   kernel: str = "linear", grid=LAMBDA_GRID,
                   bins: int = STRATIFY_BINS, inner_k: int = 5,
                   n_boot: int = 1000,
                   residualize_features: bool = False) -> EvaluationReport:
    """Full evaluation protocol for frozen embeddings.

    ``targets`` maps target name to an (n,) score array aligned with the
    embedding rows; ``confounds`` is (n, 2) age/sex.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    c = np.asarray(confounds, dtype=np.float64)
    n = x.shape[0]
    if c.shape[0] != n:
        raise DataError("confound rows must align with embeddings")
    results = {}
    records = {}
    for t_idx, (name, raw) in enumerate(sorted(targets.items())):
        y_raw = np.asarray(raw, dtype=np.float64)
        if y_raw.size != n:
            raise DataError(f"target {name!r} does not align with embeddings")
        plan = stratified_kfold(y_raw, k, bins=bins, seed=[_to_int(seed), t_idx])
        y_true = np.empty(n)
        y_pred = np.empty(n)
        for f in range(k):
            tr, te = plan.train(f), plan.fold(f)
            y_adj = residualize_confounds(y_raw, c, tr)
            feats = x
            if residualize_features:
                feats = _residualize_matrix(x, c, tr)
            lam = select_lambda(
                feats[tr], y_adj[tr], grid=grid, inner_k=inner_k,
                seed=[_to_int(seed), t_idx, f], kernel=kernel, bins=bins,
            )
            model = krr_fit(feats[tr], y_adj[tr], kernel=kernel, lam=lam)
            y_pred[te] = krr_predict(model, feats[te])
            y_true[te] = y_adj[te]
        record = PredictionRecord(y_true=y_true, y_pred=y_pred, fold=plan.assignment)
        records[name] = record
        results[name] = bootstrap_ci(record, n_boot=n_boot, seed=[_to_int(seed), t_idx])
    return EvaluationReport(results=results, records=records, k=k, seed=_to_int(seed))


def _to_int(seed) -> int:
    if np.isscalar(seed):
        return int(seed)
    raise DataError("run_downstream seed must be an integer")


def _residualize_matrix(x: np.ndarray, confounds: np.ndarray,
                        train_idx) -> np.ndarray:
    train_idx = np.asarray(train_idx, dtype=np.int64)
    keep = [j for j in range(confounds.shape[1]) if np.ptp(confounds[train_idx, j]) > 0]
    design = np.column_stack([np.ones(x.shape[0]), confounds[:, keep]])
    beta, *_ = np.linalg.lstsq(design[train_idx], x[train_idx], rcond=None)
    return x - design @ beta
