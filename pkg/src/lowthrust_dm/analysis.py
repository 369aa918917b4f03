"""Solution records, dataset files and solution-structure analytics."""
from __future__ import annotations

import csv
import io
import json
import math
import os
import tempfile
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .indirect import DecisionVector
from .rng import stream

DATASET_COLUMNS = ("alpha", "tau_s", "tau_i", "tau_f", "lr1", "lr2", "lr3", "lv1", "lv2", "lv3",
                   "lm0", "dv_mps", "delta_c", "feasible", "source", "wall_time_s")
SOURCES = ("uniform", "act", "diffusion")

# direction of the linear costate cluster, lam_r0_1 = 1.3692 lam_v0_2
LINEAR_SLOPE = 1.3692
LAMBDA_PRIME_COEFFS = (math.cos(math.atan(LINEAR_SLOPE)), math.sin(math.atan(LINEAR_SLOPE)))

# published three-component projection of GTO costates (rows: PC1..PC3)
GTO_PCA_COMPONENTS = np.array([
    [0.408, -0.853, -0.289, 0.117, 0.052, -0.074],
    [0.588, 0.486, -0.564, -0.031, -0.126, -0.289],
    [-0.654, -0.068, -0.744, -0.094, 0.074, -0.014],
])
GTO_PCA_MEAN = np.array([0.076, 0.927, -0.464, -0.096, -0.114, -0.182])
GTO_PCA_RATIOS = np.array([0.5998, 0.2701, 0.1250])
for _a in (GTO_PCA_COMPONENTS, GTO_PCA_MEAN, GTO_PCA_RATIOS):
    _a.setflags(write=False)


class DatasetFormatError(ValueError):
    def __init__(self, message, line=None):
        super().__init__(f"line {line}: {message}" if line is not None else message)
        self.line = line


# --------------------------------------------------------------------- records

@dataclass(frozen=True)
class SolutionRecord:
    alpha: float
    decision: DecisionVector
    dv: float  # m/s
    delta_c: float
    feasible: bool
    source: str
    wall_time: float = 0.0

    def __post_init__(self):
        if self.source not in SOURCES:
            raise ValueError(f"source must be one of {SOURCES}, got {self.source!r}")
        if self.dv < 0:
            raise ValueError("delta-v must be non-negative")

    def to_row(self) -> list:
        d = self.decision
        nums = [self.alpha, d.tau_s, d.tau_i, d.tau_f, *d.lam_r0, *d.lam_v0, d.lam_m0, self.dv,
                self.delta_c]
        return [repr(float(x)) for x in nums] + [str(int(self.feasible)), self.source,
                                                 repr(float(self.wall_time))]

    @classmethod
    def from_row(cls, row) -> "SolutionRecord":
        vals = [float(x) for x in row[:13]]
        decision = DecisionVector(vals[1], vals[2], vals[3], vals[4:7], vals[7:10], vals[10])
        feasible = row[13].strip().lower()
        if feasible not in ("0", "1", "true", "false"):
            raise ValueError(f"feasible flag must be 0/1, got {row[13]!r}")
        return cls(alpha=vals[0], decision=decision, dv=vals[11], delta_c=vals[12],
                   feasible=feasible in ("1", "true"), source=row[14].strip(),
                   wall_time=float(row[15]))


def atomic_write_text(path, text: str) -> None:
    """Write through a temporary file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dataset_text(records) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(DATASET_COLUMNS)
    for rec in records:
        writer.writerow(rec.to_row())
    return buf.getvalue()


def write_dataset(path, records) -> None:
    atomic_write_text(path, dataset_text(records))


def read_dataset(path) -> list:
    path = Path(path)
    records = []
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DatasetFormatError(f"{path}: empty file", 1)
        if tuple(h.strip() for h in header) != DATASET_COLUMNS:
            raise DatasetFormatError(f"{path}: unexpected header {','.join(header)}", 1)
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(DATASET_COLUMNS):
                raise DatasetFormatError(f"{path}: expected {len(DATASET_COLUMNS)} fields, "
                                         f"got {len(row)}", line)
            try:
                records.append(SolutionRecord.from_row(row))
            except ValueError as exc:
                raise DatasetFormatError(f"{path}: {exc}", line) from None
    return records


def costate_matrix(records) -> np.ndarray:
    return np.array([r.decision.costates for r in records]).reshape(-1, 6)


# --------------------------------------------------------------------- structure

def pareto_front(points, return_indices=False):
    """Points not dominated in (dv, tau_s); returned sorted by dv, ties in input order.

    A point is dominated when another is no worse in both coordinates and
    strictly better in at least one.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    if pts.size and not np.all(np.isfinite(pts)):
        raise ValueError("pareto_front needs finite values")
    order = np.lexsort((pts[:, 1], pts[:, 0]))
    keep = []
    best_tau = math.inf  # smallest tau among strictly smaller dv
    i = 0
    n = len(order)
    while i < n:
        j = i
        dv = pts[order[i], 0]
        while j < n and pts[order[j], 0] == dv:
            j += 1
        group = order[i:j]
        tau_min = pts[group[0], 1]
        if tau_min < best_tau:
            keep.extend(k for k in group if pts[k, 1] == tau_min)
            best_tau = tau_min
        i = j
    idx = np.array(sorted(keep, key=lambda k: (pts[k, 0], k)), dtype=int)
    front = pts[idx] if idx.size else np.zeros((0, 2))
    return (front, idx) if return_indices else front


def lambda_prime(lam_r0_1, lam_v0_2):
    """Projection onto the unit direction of the linear costate cluster."""
    a, b = LAMBDA_PRIME_COEFFS
    out = a * np.asarray(lam_r0_1, dtype=float) + b * np.asarray(lam_v0_2, dtype=float)
    return float(out) if np.ndim(out) == 0 else out


def pca_fit(data, k):
    """Return ``(mean, components (k', 6), variance_ratios)`` with k' <= k.

    Components follow the convention that the first nonzero entry is
    positive.  Rank-deficient data yield fewer components and a warning.
    """
    X = np.asarray(data, dtype=float)
    if X.ndim != 2 or X.shape[0] < k + 1:
        raise ValueError(f"pca_fit needs at least {k + 1} points")
    mean = X.mean(axis=0)
    Xc = X - mean
    _, s, Vt = np.linalg.svd(Xc, full_matrices=False)
    var = s**2
    total = var.sum()
    if total == 0:
        warnings.warn("data have zero variance; no principal components", RuntimeWarning)
        return mean, np.zeros((0, X.shape[1])), np.zeros(0)
    rank = int(np.sum(s > s[0] * max(X.shape) * np.finfo(float).eps))
    if rank < k:
        warnings.warn(f"data have rank {rank}; returning {rank} components", RuntimeWarning)
    k_eff = min(k, rank)
    comps = Vt[:k_eff].copy()
    for row in comps:
        nz = np.flatnonzero(np.abs(row) > 1e-15)
        if nz.size and row[nz[0]] < 0:
            row *= -1.0
    return mean, comps, var[:k_eff] / total


class CostatePCA(TransformerMixin, BaseEstimator):
    """Principal-component projection of initial costates."""

    def __init__(self, n_components: int = 3):
        self.n_components = n_components

    def fit(self, X, y=None):
        X = check_array(X, dtype=float)
        self.mean_, self.components_, self.explained_variance_ratio_ = pca_fit(X, self.n_components)
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "components_")
        X = check_array(X, dtype=float)
        return (X - self.mean_) @ self.components_.T

    def inverse_transform(self, Z):
        check_is_fitted(self, "components_")
        return np.asarray(Z, dtype=float) @ self.components_ + self.mean_

    @classmethod
    def published_gto(cls) -> "CostatePCA":
        """The printed three-component GTO transform, as a fitted estimator."""
        est = cls(n_components=3)
        est.mean_ = GTO_PCA_MEAN.copy()
        est.components_ = GTO_PCA_COMPONENTS.copy()
        est.explained_variance_ratio_ = GTO_PCA_RATIOS.copy()
        est.n_features_in_ = 6
        return est


def gto_pca_transform(costates) -> np.ndarray:
    return CostatePCA.published_gto().transform(np.atleast_2d(costates))


# --------------------------------------------------------------------- benchmark

@dataclass(frozen=True)
class BenchmarkSummary:
    n_sampled: int
    n_local: int
    n_converged: int
    local_over_global: float | None  # percent
    converged_over_local: float | None
    feasibility_ratio: float | None
    runtime_min: float | None
    sampling_time_min: float | None
    solutions_per_min: float | None
    avg_dv: float | None

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _pct(num, den):
    return None if den == 0 else 100.0 * num / den


def benchmark(records, n_sampled: int, timings: dict | None = None) -> BenchmarkSummary:
    """Warm-start metrics for one (method, alpha) cell.

    ``records`` are the screening-accepted solutions (feasible or not after
    refinement); ``timings`` holds seconds under ``sampling``, ``screening``
    and ``solving``.  Ratios with a zero denominator are ``None``.
    """
    records = list(records)
    n_local = len(records)
    n_conv = sum(1 for r in records if r.feasible)
    if n_local > n_sampled:
        raise ValueError("more accepted solutions than samples")
    runtime = sampling = per_min = None
    if timings is not None:
        sampling = timings.get("sampling", 0.0) / 60.0
        runtime = sampling + (timings.get("screening", 0.0) + timings.get("solving", 0.0)) / 60.0
        if n_conv == 0:
            per_min = 0.0
        elif runtime > 0:
            per_min = n_conv / runtime
    dvs = [r.dv for r in records if r.feasible]
    return BenchmarkSummary(
        n_sampled=int(n_sampled), n_local=n_local, n_converged=n_conv,
        local_over_global=_pct(n_local, n_sampled),
        converged_over_local=_pct(n_conv, n_local),
        feasibility_ratio=_pct(n_conv, n_sampled),
        runtime_min=runtime, sampling_time_min=sampling, solutions_per_min=per_min,
        avg_dv=float(np.mean(dvs)) if dvs else None,
    )


# --------------------------------------------------------------------- baselines

def uniform_envelope(levels: dict, alpha: float):
    """Per-coordinate (lo, hi) over the training levels neighbouring ``alpha``.

    ``levels`` maps each training alpha to its (n, 6) costate array.  The
    nearest level below and above ``alpha`` are used (one of them if alpha
    lies outside the trained range or on a level).
    """
    if not levels:
        raise ValueError("no training levels available")
    keys = sorted(levels)
    below = [a for a in keys if a <= alpha]
    above = [a for a in keys if a >= alpha]
    chosen = {below[-1] if below else above[0], above[0] if above else below[-1]}
    data = np.vstack([np.asarray(levels[a], dtype=float).reshape(-1, 6) for a in sorted(chosen)])
    return data.min(axis=0), data.max(axis=0)


def sample_uniform(lo, hi, count: int, seed) -> np.ndarray:
    rng = seed if isinstance(seed, np.random.Generator) else stream(seed)
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    return lo + rng.random((count, lo.size)) * (hi - lo)
