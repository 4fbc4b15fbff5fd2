"""Covariate-indexed random partitions built from thresholded Gaussian processes.

The generative construction: stick weights v_k ~ Beta(1, alpha) define per-stick
acceptance probabilities; each object carries one latent Gaussian function per
stick over the covariate locations (unit marginal variance everywhere); at a
location the object takes the first stick whose function value falls below that
stick's normal-quantile threshold, with the truncation level K as fallback.
Marginally at any single location the induced partition is CRP(alpha)
distributed, which the oracle utilities in this module let tests verify.

Labels are integers in 1..K. Assignment fields are integer arrays indexed
[location, object]. Partitions are frozensets of frozensets of 0-based object
indices; cluster labels are not part of a partition.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

__all__ = [
    "TruncationConfig",
    "StickWeights",
    "Partition",
    "PriorDraw",
    "normal_quantile",
    "threshold_of",
    "stick_lengths",
    "assign",
    "assignment_field",
    "sample_prior",
    "partition_from_labels",
    "partition_of",
    "adjusted_rand_index",
    "crp_log_prob",
]

# v values are pushed this far inside (0,1) before quantile evaluation so
# thresholds stay finite even when a Beta draw underflows to 0.0 or rounds
# to 1.0 in floating point.
V_CLAMP = 1e-12

Partition = frozenset  # frozenset[frozenset[int]] over 0-based object indices


@dataclass(frozen=True)
class TruncationConfig:
    """Truncated stick-breaking configuration.

    K is the number of explicitly represented clusters; objects that fall
    past stick K-1 take label K. discount > 0 switches the stick prior to
    Beta(1-discount, alpha + k*discount), giving Pitman-Yor marginals; it is
    exposed but never sampled.
    """

    K: int
    alpha: float
    discount: float = 0.0

    def __post_init__(self):
        if self.K < 2:
            raise ValueError(f"truncation level must be >= 2, got {self.K}")
        if not 0.0 <= self.discount < 1.0:
            raise ValueError(f"discount must lie in [0, 1), got {self.discount}")
        if not self.alpha > -self.discount:
            raise ValueError(
                f"alpha must exceed -discount, got alpha={self.alpha} discount={self.discount}"
            )


@dataclass(frozen=True)
class StickWeights:
    """Stick variables v (length K-1) with their normal-quantile thresholds.

    Construct through :meth:`from_v`, which clamps v into
    [V_CLAMP, 1 - V_CLAMP] and freezes both arrays.
    """

    v: np.ndarray
    thresholds: np.ndarray

    @classmethod
    def from_v(cls, v) -> "StickWeights":
        v = np.clip(np.asarray(v, dtype=float), V_CLAMP, 1.0 - V_CLAMP)
        thresholds = normal_quantile(v)
        v.flags.writeable = False
        thresholds.flags.writeable = False
        return cls(v=v, thresholds=thresholds)

    @property
    def K(self) -> int:
        return len(self.v) + 1


class PriorDraw(NamedTuple):
    sticks: StickWeights
    gp_values: np.ndarray  # (T, N, K-1)
    labels: np.ndarray  # (T, N) ints in 1..K


# ---------------------------------------------------------------------------
# standard normal quantile
# ---------------------------------------------------------------------------

# Acklam's rational approximation to the standard normal quantile, refined
# below with one Halley step against the erfc-based CDF. Thresholds enter
# hard indicator comparisons, so the refined accuracy (~1e-13 absolute over
# the clamp range) matters.
_ACKLAM_A = (
    -3.969683028665376e01, 2.209460984245205e02, -2.759285104469687e02,
    1.383577518672690e02, -3.066479806614716e01, 2.506628277459239e00,
)
_ACKLAM_B = (
    -5.447609879822406e01, 1.615858368580409e02, -1.556989798598866e02,
    6.680131188771972e01, -1.328068155288572e01,
)
_ACKLAM_C = (
    -7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e00,
    -2.549732539343734e00, 4.374664141464968e00, 2.938163982698783e00,
)
_ACKLAM_D = (
    7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e00,
    3.754408661907416e00,
)
_P_LOW = 0.02425
_SQRT2 = math.sqrt(2.0)
_SQRT2PI = math.sqrt(2.0 * math.pi)


def _acklam(p: float) -> float:
    a, b, c, d = _ACKLAM_A, _ACKLAM_B, _ACKLAM_C, _ACKLAM_D
    if p < _P_LOW:
        q = math.sqrt(-2.0 * math.log(p))
        return (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) / (
            (((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0
        )
    if p > 1.0 - _P_LOW:
        q = math.sqrt(-2.0 * math.log(1.0 - p))
        return -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) / (
            (((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0
        )
    q = p - 0.5
    r = q * q
    return (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q / (
        ((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0
    )


def _quantile_half(p: float) -> float:
    # p in (0, 0.5]; x <= 0, so erfc sees a nonnegative argument and returns
    # Phi(x) with full relative precision, keeping the residual accurate
    x = _acklam(p)
    err = 0.5 * math.erfc(-x / _SQRT2) - p
    u = err * _SQRT2PI * math.exp(0.5 * x * x)
    # one Halley refinement
    return x - u / (1.0 + 0.5 * x * u)


def _quantile_scalar(p: float) -> float:
    if p > 0.5:
        # 1 - p is exact for p in [0.5, 1], so the reflection loses nothing
        return -_quantile_half(1.0 - p)
    return _quantile_half(p)


_quantile_vec = np.vectorize(_quantile_scalar, otypes=[float])


def normal_quantile(p):
    """Standard normal quantile of ``p`` (scalar or array), p in (0, 1)."""
    if np.isscalar(p):
        return _quantile_scalar(float(p))
    return _quantile_vec(p)


def threshold_of(v_k: float) -> float:
    """Threshold eta with Phi(eta) = v_k, after clamping v_k inside (0, 1)."""
    return _quantile_scalar(float(np.clip(v_k, V_CLAMP, 1.0 - V_CLAMP)))


# ---------------------------------------------------------------------------
# stick-breaking and assignment
# ---------------------------------------------------------------------------

def stick_lengths(sticks: StickWeights) -> np.ndarray:
    """Mixture proportions pi_k = v_k * prod_{l<k}(1 - v_l), length K-1.

    The leftover mass prod_k (1 - v_k) goes to the truncation label K;
    appending it yields a probability vector.
    """
    v = sticks.v
    survive = np.concatenate(([1.0], np.cumprod(1.0 - v)[:-1]))
    return v * survive


def assign(f_row: np.ndarray, thresholds: np.ndarray) -> int:
    """First stick (1-based) whose function value is below its threshold.

    Returns K = len(f_row) + 1 when no stick accepts (truncation fallback).
    """
    below = np.asarray(f_row) < np.asarray(thresholds)
    hit = np.argmax(below)
    if below[hit]:
        return int(hit) + 1
    return len(below) + 1


def assignment_field(gp_values: np.ndarray, thresholds: np.ndarray) -> np.ndarray:
    """Vectorized assignment: gp_values (T, N, K-1) -> labels (T, N) in 1..K."""
    below = gp_values < thresholds[None, None, :]
    first = np.argmax(below, axis=2)
    labels = np.where(below.any(axis=2), first + 1, below.shape[2] + 1)
    return labels.astype(np.int64)


def sample_stick_weights(config: TruncationConfig, rng: np.random.Generator) -> StickWeights:
    """Draw v_k for k = 1..K-1 from the (possibly Pitman-Yor) stick prior."""
    k = np.arange(1, config.K)
    if config.discount == 0.0:
        v = rng.beta(1.0, config.alpha, size=config.K - 1)
    else:
        v = rng.beta(1.0 - config.discount, config.alpha + k * config.discount)
    return StickWeights.from_v(v)


def sample_prior(
    config: TruncationConfig,
    gram,
    n_objects: int,
    rng: np.random.Generator,
) -> PriorDraw:
    """One draw of (sticks, GP values, assignments) from the prior.

    Parameters
    ----------
    config : TruncationConfig
    gram : GramMatrix
        T x T unit-diagonal covariance over the covariate locations; its
        Cholesky factor couples each object's per-stick functions across
        locations.
    n_objects : int
    rng : np.random.Generator

    Returns
    -------
    PriorDraw
        gp_values has shape (T, N, K-1); labels has shape (T, N).
    """
    sticks = sample_stick_weights(config, rng)
    chol = gram.cholesky()
    T = chol.shape[0]
    z = rng.standard_normal((T, n_objects, config.K - 1))
    gp_values = np.einsum("ij,jnk->ink", chol, z)
    labels = assignment_field(gp_values, sticks.thresholds)
    return PriorDraw(sticks=sticks, gp_values=gp_values, labels=labels)


# ---------------------------------------------------------------------------
# partitions and oracles
# ---------------------------------------------------------------------------

def partition_from_labels(labels) -> Partition:
    """Group 0-based object indices by equal label; the labels themselves are discarded."""
    groups: dict[int, list[int]] = {}
    for idx, lab in enumerate(np.asarray(labels).ravel()):
        groups.setdefault(int(lab), []).append(idx)
    return frozenset(frozenset(g) for g in groups.values())


def partition_of(field: np.ndarray, tau: int) -> Partition:
    """Partition induced at location ``tau`` of an assignment field (T, N)."""
    return partition_from_labels(np.asarray(field)[tau])


def _labels_of_partition(p: Partition, index_of: dict) -> np.ndarray:
    labels = np.full(len(index_of), -1, dtype=np.int64)
    for lab, block in enumerate(p):
        for obj in block:
            labels[index_of[obj]] = lab
    return labels


def adjusted_rand_index(p: Partition, q: Partition) -> float:
    """Adjusted Rand index between two partitions of the same ground set.

    1.0 iff the partitions are identical (by convention also when both are
    the all-singletons or single-block partition); 0 in expectation under
    random relabeling. Object ids may be any hashable values.
    """
    ground_p = frozenset().union(*p)
    ground_q = frozenset().union(*q)
    if ground_p != ground_q:
        raise ValueError("partitions must cover the same ground set")
    index_of = {obj: i for i, obj in enumerate(ground_p)}
    a = _labels_of_partition(p, index_of)
    b = _labels_of_partition(q, index_of)
    return ari_from_labels(a, b)


def ari_from_labels(a, b) -> float:
    """Adjusted Rand index from two label arrays of equal length."""
    a = np.asarray(a).ravel()
    b = np.asarray(b).ravel()
    if a.shape != b.shape:
        raise ValueError("label arrays must have identical length")
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    contingency = np.zeros((ai.max() + 1, bi.max() + 1), dtype=np.int64)
    np.add.at(contingency, (ai, bi), 1)

    def comb2(x):
        return x * (x - 1) / 2.0

    sum_ij = comb2(contingency).sum()
    sum_a = comb2(contingency.sum(axis=1)).sum()
    sum_b = comb2(contingency.sum(axis=0)).sum()
    total = comb2(len(a))
    expected = sum_a * sum_b / total if total > 0 else 0.0
    max_index = 0.5 * (sum_a + sum_b)
    if max_index == expected:
        return 1.0
    return float((sum_ij - expected) / (max_index - expected))


def crp_log_prob(p: Partition, alpha: float) -> float:
    """Exact log probability of a partition under CRP(alpha).

    Computed by the sequential-seating product: object i joins an existing
    block of current size m with probability m / (i + alpha) and opens a new
    block with probability alpha / (i + alpha), taking objects in increasing
    index order. Exchangeability makes the order irrelevant.
    """
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    block_of = {}
    for block_id, block in enumerate(p):
        for obj in block:
            block_of[obj] = block_id
    objects = sorted(block_of)
    sizes: dict[int, int] = {}
    logp = 0.0
    for i, obj in enumerate(objects):
        b = block_of[obj]
        if i > 0:
            if b in sizes:
                logp += math.log(sizes[b]) - math.log(i + alpha)
            else:
                logp += math.log(alpha) - math.log(i + alpha)
        sizes[b] = sizes.get(b, 0) + 1
    return logp
