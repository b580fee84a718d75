"""
Patient-aware losses on projection-head embeddings, with exact gradients.

For a batch Z (B x d) grouped by patient:

    mu_p  = mean of patient p's rows
    S_W   = sum_p sum_{i in p} ||z_i - mu_p||^2
    S_B   = sum_{p != q} ||mu_p - mu_q||^2        (ordered pairs)
    PCSL  = S_W / (S_B + eps)
    mu_G  = mean over patients of mu_p           (unweighted by sample count)
    GPAL  = (1/|P|) sum_p ||mu_p - mu_G||^2
    total = CE + lambda_pcsl * PCSL + lambda_gpal * GPAL

Everything is computed in float64. Reductions over patients run in
ascending patient-id order, so reordering whole patient blocks leaves every
value bitwise unchanged. Batches with fewer than two patients give
PCSL = 0 and no PCSL gradient.
"""

from dataclasses import dataclass
from functools import cached_property
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .errors import DataError, NumericError

DEFAULT_LAMBDA_PCSL = 50.0
DEFAULT_LAMBDA_GPAL = 0.0005
DEFAULT_EPSILON = 1e-8
GRADCHECK_TOL = 1e-4


@dataclass(frozen=True)
class LossWeights:
    lambda_pcsl: float = DEFAULT_LAMBDA_PCSL
    lambda_gpal: float = DEFAULT_LAMBDA_GPAL
    epsilon: float = DEFAULT_EPSILON

    def __post_init__(self):
        if self.lambda_pcsl < 0 or self.lambda_gpal < 0:
            raise ValueError("Loss weights must be non-negative")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")


@dataclass(frozen=True)
class PatientGroups:
    """Patient id for every batch row."""

    assignment: Tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "assignment", tuple(int(p) for p in self.assignment))
        if not self.assignment:
            raise DataError("PatientGroups needs at least one row")

    @classmethod
    def from_ids(cls, ids: Sequence[int]) -> "PatientGroups":
        return cls(tuple(ids))

    def __len__(self) -> int:
        return len(self.assignment)

    @cached_property
    def patients(self) -> Tuple[int, ...]:
        """Distinct patients in first-occurrence order."""
        return tuple(dict.fromkeys(self.assignment))

    @cached_property
    def members(self) -> Tuple[np.ndarray, ...]:
        """Row indices of each patient, aligned with `patients`."""
        position = {p: j for j, p in enumerate(self.patients)}
        buckets: List[List[int]] = [[] for _ in self.patients]
        for i, p in enumerate(self.assignment):
            buckets[position[p]].append(i)
        return tuple(np.asarray(b, dtype=np.intp) for b in buckets)

    @cached_property
    def canonical(self) -> np.ndarray:
        """Positions into `patients` sorted by ascending patient id."""
        return np.argsort(np.asarray(self.patients), kind="stable")

    @property
    def n_patients(self) -> int:
        return len(self.patients)


@dataclass(frozen=True)
class PcslTerms:
    pcsl: float
    s_w: float
    s_b: float
    degenerate: bool


@dataclass(frozen=True)
class LossBundle:
    ce: float
    pcsl: float
    gpal: float
    total: float
    s_w: float
    s_b: float
    centroids: np.ndarray
    global_centroid: np.ndarray
    grad_Z: np.ndarray
    degenerate: bool = False


# =============================================================================
# FORWARD
# =============================================================================

def _as_embeddings(Z, g: PatientGroups, dtype=np.float64) -> np.ndarray:
    Z = np.asarray(Z, dtype=dtype)
    if Z.ndim != 2 or Z.shape[0] < 1 or Z.shape[1] < 1:
        raise DataError(f"Embeddings must be a non-empty B x d matrix, got shape {Z.shape}")
    if Z.shape[0] != len(g):
        raise DataError(f"{Z.shape[0]} embeddings but {len(g)} patient assignments")
    if not np.all(np.isfinite(Z)):
        raise NumericError("Embeddings contain NaN or Inf")
    return Z


def patient_centroids(Z, g: PatientGroups) -> Tuple[np.ndarray, np.ndarray]:
    """Centroid and sample count per patient, in first-occurrence order."""
    Z = _as_embeddings(Z, g)
    return _centroids(Z, g)


def _centroids(Z: np.ndarray, g: PatientGroups) -> Tuple[np.ndarray, np.ndarray]:
    centroids = np.stack([Z[m].mean(axis=0) for m in g.members])
    counts = np.asarray([len(m) for m in g.members], dtype=np.intp)
    return centroids, counts


@dataclass(frozen=True)
class _Scatter:
    centroids: np.ndarray
    counts: np.ndarray
    global_centroid: np.ndarray
    s_w: float
    s_b: float
    gpal: float


def _scatter(Z: np.ndarray, g: PatientGroups) -> _Scatter:
    centroids, counts = _centroids(Z, g)
    ordered = centroids[g.canonical]

    s_w = Z.dtype.type(0.0)
    for j in g.canonical:
        diff = Z[g.members[j]] - centroids[j]
        s_w += np.sum(diff * diff)

    pair = ordered[:, None, :] - ordered[None, :, :]
    s_b = np.sum(pair * pair)

    global_centroid = ordered.mean(axis=0)
    spread = ordered - global_centroid
    gpal = np.sum(spread * spread) / len(ordered)

    return _Scatter(centroids, counts, global_centroid, s_w, s_b, gpal)


def pcsl_forward(Z, g: PatientGroups, epsilon: float = DEFAULT_EPSILON) -> PcslTerms:
    """S_W / (S_B + eps); zero with degenerate=True when |P| < 2."""
    Z = _as_embeddings(Z, g)
    stats = _scatter(Z, g)
    if g.n_patients < 2:
        return PcslTerms(0.0, float(stats.s_w), 0.0, True)
    return PcslTerms(float(stats.s_w / (stats.s_b + epsilon)), float(stats.s_w), float(stats.s_b), False)


def gpal_forward(Z, g: PatientGroups) -> Tuple[float, np.ndarray]:
    """Mean squared distance of patient centroids to their mean."""
    Z = _as_embeddings(Z, g)
    stats = _scatter(Z, g)
    return float(stats.gpal), stats.global_centroid


def total_loss(ce: float, pcsl: float, gpal: float, w: LossWeights) -> float:
    """CE + lambda_pcsl * PCSL + lambda_gpal * GPAL (fixed evaluation order)."""
    return ce + w.lambda_pcsl * pcsl + w.lambda_gpal * gpal


def _objective(Z: np.ndarray, g: PatientGroups, w: LossWeights):
    """lambda_pcsl * PCSL + lambda_gpal * GPAL in Z's own precision."""
    stats = _scatter(Z, g)
    value = w.lambda_gpal * stats.gpal
    if g.n_patients >= 2:
        value = w.lambda_pcsl * (stats.s_w / (stats.s_b + w.epsilon)) + value
    return value


# =============================================================================
# BACKWARD
# =============================================================================

def _backward(Z: np.ndarray, g: PatientGroups, w: LossWeights, stats: _Scatter) -> np.ndarray:
    grad = np.zeros_like(Z)
    n_patients = g.n_patients
    offsets = stats.centroids - stats.global_centroid

    if n_patients >= 2 and w.lambda_pcsl != 0.0:
        denom = stats.s_b + w.epsilon
        for j, rows in enumerate(g.members):
            d_sw = 2.0 * (Z[rows] - stats.centroids[j])
            d_sb = (4.0 * n_patients / stats.counts[j]) * offsets[j]
            grad[rows] += w.lambda_pcsl * (d_sw / denom - (stats.s_w / (denom * denom)) * d_sb)

    if w.lambda_gpal != 0.0:
        for j, rows in enumerate(g.members):
            grad[rows] += w.lambda_gpal * (2.0 / (n_patients * stats.counts[j])) * offsets[j]

    return grad


def patient_loss_backward(Z, g: PatientGroups, w: LossWeights) -> np.ndarray:
    """d(lambda_pcsl * PCSL + lambda_gpal * GPAL) / dZ through the centroids."""
    Z = _as_embeddings(Z, g)
    return _backward(Z, g, w, _scatter(Z, g))


def loss_bundle(Z, g: PatientGroups, ce: float, w: LossWeights) -> LossBundle:
    """Every loss value, intermediate statistic and dL/dZ for one batch."""
    Z = _as_embeddings(Z, g)
    stats = _scatter(Z, g)
    degenerate = g.n_patients < 2
    pcsl = 0.0 if degenerate else float(stats.s_w / (stats.s_b + w.epsilon))
    gpal = float(stats.gpal)
    return LossBundle(
        ce=float(ce),
        pcsl=pcsl,
        gpal=gpal,
        total=total_loss(float(ce), pcsl, gpal, w),
        s_w=float(stats.s_w),
        s_b=0.0 if degenerate else float(stats.s_b),
        centroids=stats.centroids,
        global_centroid=stats.global_centroid,
        grad_Z=_backward(Z, g, w, stats),
        degenerate=degenerate,
    )


# =============================================================================
# FINITE-DIFFERENCE ORACLE
# =============================================================================

def _oracle_dtype():
    # extended precision where the platform has it; plain float64 otherwise
    return np.longdouble


def finite_diff_check(Z, g: PatientGroups, w: LossWeights, h: float = 1e-5) -> Tuple[float, float]:
    """
    Compare the analytic gradient with central differences per coordinate.

    Returns (max_rel_err, max_abs_err); relative error uses the denominator
    max(|analytic|, |numeric|, 1e-12).
    """
    if not h > 0:
        raise ValueError("Finite-difference step must be positive")
    Z = _as_embeddings(Z, g)
    analytic = patient_loss_backward(Z, g, w)

    Zx = Z.astype(_oracle_dtype())
    step = _oracle_dtype()(h)
    numeric = np.zeros_like(Z)
    for idx in np.ndindex(*Z.shape):
        original = Zx[idx]
        Zx[idx] = original + step
        f_plus = _objective(Zx, g, w)
        Zx[idx] = original - step
        f_minus = _objective(Zx, g, w)
        Zx[idx] = original
        numeric[idx] = float((f_plus - f_minus) / (2 * step))

    abs_err = np.abs(analytic - numeric)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-12)
    return float(np.max(abs_err / denom)), float(np.max(abs_err))


def random_batch(rng: np.random.Generator, batch: int, dim: int,
                 min_patients: int = 2, max_patients: int = 6) -> Tuple[np.ndarray, PatientGroups]:
    """Random embeddings where every drawn patient has at least one row."""
    n_patients = int(rng.integers(min_patients, max_patients + 1))
    n_patients = max(1, min(n_patients, batch))
    assignment = np.concatenate([
        np.arange(n_patients),
        rng.integers(0, n_patients, size=batch - n_patients),
    ])
    assignment = rng.permutation(assignment)
    centers = rng.normal(0.0, 1.0, size=(n_patients, dim))
    Z = centers[assignment] + rng.normal(0.0, 0.5, size=(batch, dim))
    ids = (assignment * 7 + 3).tolist()
    return Z, PatientGroups.from_ids(ids)


@dataclass(frozen=True)
class GradcheckRow:
    trial: int
    batch: int
    n_patients: int
    dim: int
    max_rel_err: float
    max_abs_err: float


@dataclass(frozen=True)
class GradcheckReport:
    rows: Tuple[GradcheckRow, ...]
    tol: float = GRADCHECK_TOL

    @property
    def max_rel_err(self) -> float:
        return max((r.max_rel_err for r in self.rows), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tol

    def format_table(self) -> str:
        lines = ["trial, B, |P|, d, max_rel_err"]
        for r in self.rows:
            lines.append(f"{r.trial}, {r.batch}, {r.n_patients}, {r.dim}, {r.max_rel_err:.3e}")
        lines.append(f"{'PASS' if self.passed else 'FAIL'} tol={self.tol:g}")
        return "\n".join(lines) + "\n"


def gradcheck(trials: int = 100, batch: int = 16, dim: int = 8, seed: int = 0,
              h: float = 1e-5, weights: Optional[LossWeights] = None,
              min_patients: int = 2, max_patients: int = 6,
              tol: float = GRADCHECK_TOL) -> GradcheckReport:
    """Finite-difference verification over `trials` random batches."""
    weights = weights or LossWeights()
    rng = np.random.default_rng(seed)
    rows = []
    for trial in range(trials):
        Z, g = random_batch(rng, batch, dim, min_patients, max_patients)
        rel, abs_ = finite_diff_check(Z, g, weights, h)
        rows.append(GradcheckRow(trial, batch, g.n_patients, dim, rel, abs_))
    return GradcheckReport(tuple(rows), tol)
