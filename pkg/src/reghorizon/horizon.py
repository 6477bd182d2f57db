"""Total-regularization analysis over sweep results.

The metric of an over-regularized run is modelled as linear in the four knobs
(alpha_cr, alpha_rd, alpha_t, dropout). Fixing the metric-vs-R slope to -1
and pinning R(0, 0, 1, 0) = 0 turns the OLS coefficients into the R weights.
"""
from __future__ import annotations

import csv
import io
import json
from collections import defaultdict
from dataclasses import dataclass, field
from itertools import product
from typing import Iterable, Sequence

import numpy as np

from .errors import AnalysisError, ConfigError, InsufficientDataError, UsageError
from .trainer import RunRecord, TrainConfig

AXES = ("alpha_cr", "alpha_rd", "alpha_t", "dropout")
COLUMNS = ("alpha_cr", "alpha_rd", "alpha_t", "dropout", "intercept")
DEFAULT_BASE = {"alpha_cr": 1.0, "alpha_rd": 5.0, "alpha_t": 1.0}
MIN_POINTS = 6
COND_LIMIT = 1e10


@dataclass
class SweepSpec:
    base: TrainConfig
    axes: dict[str, list[float]]
    seeds: list[int] = field(default_factory=lambda: [0])

    def validate(self) -> "SweepSpec":
        if not self.axes or not any(self.axes.values()):
            raise ConfigError("sweep needs at least one non-empty axis")
        for name, values in self.axes.items():
            if name not in AXES:
                raise ConfigError(f"unknown sweep axis {name!r}")
            for v in values:
                if not np.isfinite(v) or v < 0:
                    raise ConfigError(f"axis {name} has invalid value {v}")
        if not self.seeds:
            raise ConfigError("sweep needs at least one seed")
        return self


def _with(base: TrainConfig, point: dict[str, float], seed: int) -> TrainConfig:
    w = base.weights
    weights = type(w)(**{**w.to_dict(), **{k: v for k, v in point.items() if k != "dropout"}})
    d = base.to_dict()
    d.update(weights=weights, dropout=point.get("dropout", base.dropout), seed=seed)
    return TrainConfig(**d)


def expand_grid(spec: SweepSpec) -> list[TrainConfig]:
    """One-axis-at-a-time grid: each alpha axis crossed with every dropout value."""
    spec.validate()
    base = {"alpha_cr": spec.base.weights.alpha_cr, "alpha_rd": spec.base.weights.alpha_rd,
            "alpha_t": spec.base.weights.alpha_t, "dropout": spec.base.dropout}
    dropouts = spec.axes.get("dropout") or [spec.base.dropout]
    alpha_axes = [a for a in ("alpha_cr", "alpha_rd", "alpha_t") if spec.axes.get(a)]
    points: list[tuple[float, ...]] = []
    seen: set[tuple[float, ...]] = set()

    def emit(p: dict[str, float]):
        key = tuple(float(p[a]) for a in AXES)
        if key not in seen:
            seen.add(key)
            points.append(key)

    if not alpha_axes:
        for d in dropouts:
            emit({**base, "dropout": d})
    for axis in alpha_axes:
        for v, d in product(spec.axes[axis], dropouts):
            emit({**base, axis: v, "dropout": d})
    return [_with(spec.base, dict(zip(AXES, key)), seed) for key in points for seed in spec.seeds]


# ---------------------------------------------------------------- selection


def select_over_regularized(series: Sequence[tuple[float, float]]) -> list[tuple[float, float]]:
    """Points strictly after the (first) metric peak of a dropout-sorted series."""
    if len(series) < 2:
        raise UsageError("need at least two points to locate a peak")
    drops = [d for d, _ in series]
    if any(b < a for a, b in zip(drops, drops[1:])):
        raise UsageError("series must be sorted by dropout")
    metrics = [m for _, m in series]
    peak = int(np.argmax(metrics))
    return list(series[peak + 1:])


def aggregate_seeds(records: Iterable[RunRecord]) -> list[RunRecord]:
    """Average successful records sharing (alpha_cr, alpha_rd, alpha_t, dropout)."""
    groups: dict[tuple[float, ...], list[RunRecord]] = defaultdict(list)
    for r in records:
        if not r.failed:
            groups[(r.alpha_cr, r.alpha_rd, r.alpha_t, r.dropout)].append(r)
    out = []
    for key in sorted(groups):
        rs = groups[key]
        out.append(RunRecord(*key, dev_metric=float(np.mean([r.dev_metric for r in rs])),
                             test_metric=float(np.mean([r.test_metric for r in rs])),
                             seed=rs[0].seed, config_hash=rs[0].config_hash))
    return out


def over_regularized_points(records: Iterable[RunRecord]) -> list[RunRecord]:
    """Group by alpha triple, sort by dropout, keep what follows each series' peak."""
    series: dict[tuple[float, ...], list[RunRecord]] = defaultdict(list)
    for r in aggregate_seeds(records):
        series[(r.alpha_cr, r.alpha_rd, r.alpha_t)].append(r)
    chosen = []
    for key in sorted(series):
        rs = sorted(series[key], key=lambda r: r.dropout)
        if len(rs) < 2:
            continue
        kept = select_over_regularized([(r.dropout, r.dev_metric) for r in rs])
        chosen += rs[len(rs) - len(kept):]
    return chosen


# ---------------------------------------------------------------- regression


@dataclass
class RegressionFit:
    beta_cr: float
    beta_rd: float
    beta_t: float
    beta_do: float
    beta_f: float
    beta_B: float
    n_points: int
    residual_rms: float
    beta_R: float = -1.0
    std_errors: dict[str, float] = field(default_factory=dict)

    def report(self) -> dict:
        return {"beta_cr": self.beta_cr, "beta_rd": self.beta_rd, "beta_t": self.beta_t,
                "beta_do": self.beta_do, "beta_f": self.beta_f, "beta_B": self.beta_B,
                "residual_rms": self.residual_rms, "n_points": self.n_points}

    def to_json(self) -> str:
        return json.dumps(self.report(), indent=2)


def design_matrix(points: Sequence[RunRecord]) -> np.ndarray:
    return np.array([[p.alpha_cr, p.alpha_rd, p.alpha_t, p.dropout, 1.0] for p in points])


def _collinear_columns(x: np.ndarray) -> list[str]:
    _, s, vt = np.linalg.svd(x, full_matrices=False)
    tol = s.max() * max(x.shape) * np.finfo(float).eps
    null = vt[s <= tol]
    involved = np.any(np.abs(null) > 1e-8, axis=0) if null.size else np.zeros(x.shape[1], bool)
    return [c for c, hit in zip(COLUMNS, involved) if hit]


def ols(x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Least squares via the normal equations; pseudo-inverse when ill-conditioned.

    Returns (coefficients, (X^T X)^-1).
    """
    rank = np.linalg.matrix_rank(x)
    if rank < x.shape[1]:
        cols = _collinear_columns(x)
        raise AnalysisError(f"design matrix is rank deficient; collinear columns: {', '.join(cols)}")
    xtx = x.T @ x
    if np.linalg.cond(xtx) > COND_LIMIT:
        inv = np.linalg.pinv(xtx)
        return inv @ (x.T @ y), inv
    return np.linalg.solve(xtx, x.T @ y), np.linalg.inv(xtx)


def fit_regression(points: Sequence[RunRecord], metric: str = "dev_metric") -> RegressionFit:
    """Regress the metric on the four knobs and convert to R weights (beta_R = -1)."""
    if len(points) < MIN_POINTS:
        raise InsufficientDataError(len(points), MIN_POINTS)
    # canonical row order makes the fit independent of input ordering
    rows = sorted(points, key=lambda p: (p.alpha_cr, p.alpha_rd, p.alpha_t, p.dropout,
                                         getattr(p, metric)))
    x = design_matrix(rows)
    y = np.array([getattr(p, metric) for p in rows], dtype=float)
    coef, inv = ols(x, y)
    c_cr, c_rd, c_t, c_do, c0 = coef
    resid = y - x @ coef
    n, k = x.shape
    dof = n - k
    sigma2 = float(resid @ resid) / dof if dof > 0 else float("nan")
    cov = sigma2 * inv
    se = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    se_b = float(np.sqrt(max(cov[4, 4] + cov[2, 2] + 2 * cov[2, 4], 0.0)))
    beta_t = -c_t
    return RegressionFit(
        beta_cr=float(-c_cr), beta_rd=float(-c_rd), beta_t=float(beta_t), beta_do=float(-c_do),
        beta_f=float(-beta_t), beta_B=float(c0 + c_t), n_points=n,
        residual_rms=float(np.sqrt(np.mean(resid ** 2))),
        std_errors={"beta_cr": float(se[0]), "beta_rd": float(se[1]), "beta_t": float(se[2]),
                    "beta_do": float(se[3]), "beta_f": float(se[2]), "beta_B": se_b},
    )


def fit_family(points: Sequence[RunRecord], family: str,
               metric: str = "dev_metric") -> dict[str, float]:
    """Reduced fit for one tuning family: metric on (tuned alpha, dropout, 1).

    The other alphas are constant within a family, so only the tuned alpha's
    and dropout's R weights are identifiable.
    """
    if family not in ("alpha_cr", "alpha_rd", "alpha_t"):
        raise UsageError(f"unknown family {family!r}")
    if len(points) < 3:
        raise InsufficientDataError(len(points), 3)
    x = np.array([[getattr(p, family), p.dropout, 1.0] for p in points])
    y = np.array([getattr(p, metric) for p in points])
    coef, _ = ols(x, y)
    return {f"beta_{family.split('_')[1]}": float(-coef[0]), "beta_do": float(-coef[1]),
            "intercept": float(coef[2]), "n_points": len(points)}


def total_R(fit: RegressionFit, point: Sequence[float]) -> float:
    """R at (alpha_cr, alpha_rd, alpha_t, dropout)."""
    a_cr, a_rd, a_t, d = point
    return (fit.beta_cr * a_cr + fit.beta_rd * a_rd + fit.beta_t * a_t
            + fit.beta_do * d + fit.beta_f)


# ---------------------------------------------------------------- collapse


def family_of(r: RunRecord, base: dict[str, float] | None = None) -> str:
    """Which alpha deviates from the base point: a family name, 'base' or 'mixed'."""
    base = base or DEFAULT_BASE
    diff = [a for a in ("alpha_cr", "alpha_rd", "alpha_t")
            if not np.isclose(getattr(r, a), base[a])]
    if not diff:
        return "base"
    return diff[0] if len(diff) == 1 else "mixed"


@dataclass
class CollapseRow:
    R: float
    metric: float
    family: str
    dropout: float


def collapse_export(fit: RegressionFit, records: Sequence[RunRecord],
                    base: dict[str, float] | None = None,
                    metric: str = "dev_metric") -> list[CollapseRow]:
    return [CollapseRow(R=total_R(fit, (r.alpha_cr, r.alpha_rd, r.alpha_t, r.dropout)),
                        metric=float(getattr(r, metric)), family=family_of(r, base),
                        dropout=r.dropout)
            for r in records]


def collapse_csv(rows: Sequence[CollapseRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["R", "metric", "family", "dropout"])
    for row in rows:
        w.writerow([repr(row.R), repr(row.metric), row.family, repr(row.dropout)])
    return buf.getvalue()


# ---------------------------------------------------------------- significance


def paired_bootstrap(scores_a: Sequence[float], scores_b: Sequence[float],
                     n_resamples: int = 1000, seed: int = 0) -> float:
    """Fraction of item resamples in which system A does not beat system B.

    Ties count against A, so identical inputs give p = 1.
    """
    a = np.asarray(scores_a, dtype=float)
    b = np.asarray(scores_b, dtype=float)
    if a.shape != b.shape:
        raise UsageError("paired bootstrap needs equal-length score lists")
    if a.size < 10:
        raise UsageError("paired bootstrap needs at least 10 items")
    if n_resamples < 1000:
        raise UsageError("use at least 1000 resamples")
    gen = np.random.default_rng(seed)
    idx = gen.integers(0, a.size, size=(n_resamples, a.size))
    return float(np.mean(a[idx].mean(axis=1) <= b[idx].mean(axis=1)))


def records_from_jsonl(text: str) -> list[RunRecord]:
    return [RunRecord.from_dict(json.loads(line)) for line in text.splitlines() if line.strip()]
