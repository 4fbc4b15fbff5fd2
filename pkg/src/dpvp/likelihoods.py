"""Collapsed conjugate marginal likelihoods for the two observation models.

Multitask data: each source is an N x D real matrix scored under a diagonal
normal-gamma model per cluster and dimension, with the cluster means and
precisions integrated out. Network data: each snapshot is an N x N binary
matrix scored under a beta-Bernoulli block model with the per-block-pair link
probabilities integrated out; block pairs are unordered, the diagonal is never
scored, and symmetric data is counted over unordered object pairs only.

Both models expose the same incremental interface the samplers rely on:
remove_object / object_loglik / add_object, where object_loglik(n, labels)
is the log posterior predictive of object n's observations inserted into the
clusters named by labels, given the remaining objects. Differences of that
score across label choices equal differences of the full collapsed marginal,
which is all the samplers need. Masked entries contribute nothing anywhere.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import betaln, gammaln

__all__ = [
    "GaussianHyper",
    "BetaHyper",
    "SourceMatrix",
    "Snapshot",
    "MultitaskData",
    "NetworkData",
    "gaussian_marginal_loglik",
    "gaussian_posterior_predictive",
    "network_marginal_loglik",
    "network_predictive",
    "total_loglik",
    "MultitaskModel",
    "NetworkModel",
    "NullModel",
]

LOG2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class GaussianHyper:
    """Normal-gamma hyperparameters: mean mu0, mean-precision scale kappa0,
    gamma shape alpha0, gamma rate beta0."""

    mu0: float = 0.0
    kappa0: float = 0.1
    alpha0: float = 0.1
    beta0: float = 0.1

    def __post_init__(self):
        if min(self.kappa0, self.alpha0, self.beta0) <= 0:
            raise ValueError("kappa0, alpha0, beta0 must be positive")


@dataclass(frozen=True)
class BetaHyper:
    """Symmetric beta prior on block link probabilities."""

    beta: float = 0.1

    def __post_init__(self):
        if self.beta <= 0:
            raise ValueError("beta must be positive")


@dataclass
class SourceMatrix:
    """One multitask source: values (N, D) with a boolean observation mask."""

    values: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.values.shape != self.mask.shape:
            raise ValueError("mask shape must match values")


@dataclass
class Snapshot:
    """One network snapshot: binary values (N, N) with a boolean mask."""

    values: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.values.shape != self.mask.shape or self.values.ndim != 2:
            raise ValueError("mask shape must match values")
        if self.values.shape[0] != self.values.shape[1]:
            raise ValueError("snapshots must be square")


@dataclass
class MultitaskData:
    """Sources plus the kernel location index each source lives at."""

    sources: list
    source_locations: tuple = None

    def __post_init__(self):
        if self.source_locations is None:
            self.source_locations = tuple(range(len(self.sources)))
        if len(self.source_locations) != len(self.sources):
            raise ValueError("one location per source")
        n = {s.values.shape[0] for s in self.sources}
        if len(n) > 1:
            raise ValueError("all sources must share the object set")

    @property
    def n_objects(self) -> int:
        return self.sources[0].values.shape[0]

    @property
    def n_locations(self) -> int:
        return max(self.source_locations) + 1


@dataclass
class NetworkData:
    """Snapshots plus their kernel locations and the symmetry convention."""

    snapshots: list
    symmetric: bool = True
    snapshot_locations: tuple = None

    def __post_init__(self):
        if self.snapshot_locations is None:
            self.snapshot_locations = tuple(range(len(self.snapshots)))
        if len(self.snapshot_locations) != len(self.snapshots):
            raise ValueError("one location per snapshot")
        n = {s.values.shape[0] for s in self.snapshots}
        if len(n) > 1:
            raise ValueError("all snapshots must share the object set")

    @property
    def n_objects(self) -> int:
        return self.snapshots[0].values.shape[0]

    @property
    def n_locations(self) -> int:
        return max(self.snapshot_locations) + 1


# ---------------------------------------------------------------------------
# closed-form cells
# ---------------------------------------------------------------------------

def _gaussian_cells(m, total, total_sq, hyper):
    """Log marginal per (cluster, dimension) cell from count/sum/sum-of-squares.

    Uses the cancellation-stable posterior rate: beta0 + scatter/2 +
    kappa0*m*(mean-mu0)^2 / (2*(kappa0+m)). Cells with m=0 contribute 0.
    """
    m = np.asarray(m, dtype=float)
    kap = hyper.kappa0 + m
    a = hyper.alpha0 + 0.5 * m
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = np.where(m > 0, total / np.maximum(m, 1), 0.0)
    scatter = np.maximum(total_sq - m * mean * mean, 0.0)
    b = hyper.beta0 + 0.5 * scatter + 0.5 * hyper.kappa0 * m * (mean - hyper.mu0) ** 2 / kap
    cells = (
        gammaln(a)
        - gammaln(hyper.alpha0)
        + hyper.alpha0 * math.log(hyper.beta0)
        - a * np.log(b)
        + 0.5 * (math.log(hyper.kappa0) - np.log(kap))
        - 0.5 * m * LOG2PI
    )
    return np.where(m > 0, cells, 0.0)


def _posterior_cells(m, total, total_sq, hyper):
    """Posterior normal-gamma parameters (kappa, mu, a, b) per cell."""
    m = np.asarray(m, dtype=float)
    kap = hyper.kappa0 + m
    mu = (hyper.kappa0 * hyper.mu0 + total) / kap
    a = hyper.alpha0 + 0.5 * m
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = np.where(m > 0, total / np.maximum(m, 1), 0.0)
    scatter = np.maximum(total_sq - m * mean * mean, 0.0)
    b = hyper.beta0 + 0.5 * scatter + 0.5 * hyper.kappa0 * m * (mean - hyper.mu0) ** 2 / kap
    return kap, mu, a, b


def _student_t_logpdf(y, df, loc, scale_sq):
    z = (y - loc) ** 2 / (df * scale_sq)
    return (
        gammaln(0.5 * (df + 1))
        - gammaln(0.5 * df)
        - 0.5 * np.log(df * math.pi * scale_sq)
        - 0.5 * (df + 1) * np.log1p(z)
    )


def gaussian_marginal_loglik(values, mask, labels, hyper: GaussianHyper) -> float:
    """Collapsed normal-gamma log marginal of one source under an assignment.

    values, mask: (N, D); labels: (N,) positive ints. Masked entries are
    skipped; a fully masked source scores 0.
    """
    values = np.asarray(values, dtype=float)
    mask = np.asarray(mask, dtype=bool)
    labels = np.asarray(labels)
    if not mask.any():
        return 0.0
    _, idx = np.unique(labels, return_inverse=True)
    n_lab = idx.max() + 1
    D = values.shape[1]
    m = np.zeros((n_lab, D))
    total = np.zeros((n_lab, D))
    total_sq = np.zeros((n_lab, D))
    v = np.where(mask, values, 0.0)
    np.add.at(m, idx, mask.astype(float))
    np.add.at(total, idx, v)
    np.add.at(total_sq, idx, v * v)
    return float(_gaussian_cells(m, total, total_sq, hyper).sum())


def gaussian_posterior_predictive(y_star, mask_star, stats, hyper: GaussianHyper) -> float:
    """Log Student-t predictive of a row under one cluster's statistics.

    stats is an (m, total, total_sq) triple of D-vectors; empty stats give
    the prior predictive. Only unmasked dimensions contribute.
    """
    y_star = np.asarray(y_star, dtype=float)
    mask_star = np.asarray(mask_star, dtype=bool)
    if not mask_star.any():
        return 0.0
    m, total, total_sq = stats
    kap, mu, a, b = _posterior_cells(m, total, total_sq, hyper)
    scale_sq = b * (kap + 1) / (a * kap)
    cell = _student_t_logpdf(y_star, 2.0 * a, mu, scale_sq)
    return float(np.sum(cell[mask_star]))


def network_marginal_loglik(
    values, mask, labels, hyper: BetaHyper, symmetric: bool
) -> float:
    """Collapsed beta-Bernoulli log marginal of one snapshot.

    Block pairs are unordered; the diagonal is excluded; symmetric data is
    counted over object pairs n < n' only, directed data over both ordered
    pairs. A snapshot with no observed pairs scores 0.
    """
    values = np.asarray(values)
    mask = np.asarray(mask, dtype=bool)
    labels = np.asarray(labels)
    N = values.shape[0]
    obs = mask & ~np.eye(N, dtype=bool)
    if symmetric:
        obs &= np.triu(np.ones((N, N), dtype=bool), k=1)
    if not obs.any():
        return 0.0
    i_idx, j_idx = np.nonzero(obs)
    _, compact = np.unique(labels, return_inverse=True)
    L = compact.max() + 1
    li, lj = compact[i_idx], compact[j_idx]
    pid = np.minimum(li, lj) * L + np.maximum(li, lj)
    y = values[i_idx, j_idx]
    n1 = np.bincount(pid[y == 1], minlength=L * L).astype(float)
    n0 = np.bincount(pid[y != 1], minlength=L * L).astype(float)
    touched = (n1 + n0) > 0
    b = hyper.beta
    return float(
        np.sum(betaln(b + n1[touched], b + n0[touched]) - betaln(b, b))
    )


def network_predictive(n1: float, n0: float, hyper: BetaHyper) -> float:
    """Posterior mean link probability for a block pair: (b+n1)/(2b+n1+n0)."""
    if n1 < 0 or n0 < 0:
        raise ValueError("counts must be nonnegative")
    return (hyper.beta + n1) / (2.0 * hyper.beta + n1 + n0)


def total_loglik(data, field, hyper) -> float:
    """Sum of per-source (or per-snapshot) collapsed marginals.

    field: (n_locations, N) assignment matrix; each source is scored at the
    column of its location.
    """
    field = np.asarray(field)
    out = 0.0
    if isinstance(data, MultitaskData):
        for src, loc in zip(data.sources, data.source_locations):
            out += gaussian_marginal_loglik(src.values, src.mask, field[loc], hyper)
    elif isinstance(data, NetworkData):
        for snap, loc in zip(data.snapshots, data.snapshot_locations):
            out += network_marginal_loglik(
                snap.values, snap.mask, field[loc], hyper, data.symmetric
            )
    else:
        raise TypeError(f"unsupported data type {type(data).__name__}")
    return out


# ---------------------------------------------------------------------------
# incremental models for the samplers
# ---------------------------------------------------------------------------

class MultitaskModel:
    """Stateful collapsed Gaussian model over all sources.

    Cluster statistics are indexed by (source, cluster 0..K-1, dimension) and
    kept in sync through remove_object / add_object. object_loglik inserts an
    object's rows into the clusters named by a per-location label vector and
    returns the summed log posterior predictive.
    """

    def __init__(self, data: MultitaskData, n_clusters: int, hyper: GaussianHyper = None):
        self.data = data
        self.K = n_clusters
        self.hyper = hyper or GaussianHyper()
        self.n_locations = data.n_locations
        self._rows = []
        for src in data.sources:
            v = np.where(src.mask, src.values, 0.0)
            self._rows.append((v, src.mask.astype(float)))
        self.labels = None
        self._m = None

    def set_assignments(self, field):
        """Rebuild all statistics from a full (n_locations, N) label matrix."""
        field = np.asarray(field)
        self.labels = field.copy()
        self._m = []
        self._total = []
        self._total_sq = []
        for (v, w), loc in zip(self._rows, self.data.source_locations):
            idx = field[loc] - 1
            D = v.shape[1]
            m = np.zeros((self.K, D))
            total = np.zeros((self.K, D))
            total_sq = np.zeros((self.K, D))
            np.add.at(m, idx, w)
            np.add.at(total, idx, v)
            np.add.at(total_sq, idx, v * v)
            self._m.append(m)
            self._total.append(total)
            self._total_sq.append(total_sq)

    def remove_object(self, n: int):
        for s, loc in enumerate(self.data.source_locations):
            k = self.labels[loc, n] - 1
            v, w = self._rows[s]
            self._m[s][k] -= w[n]
            self._total[s][k] -= v[n]
            self._total_sq[s][k] -= v[n] * v[n]

    def add_object(self, n: int, labels_n):
        for s, loc in enumerate(self.data.source_locations):
            k = labels_n[loc] - 1
            v, w = self._rows[s]
            self._m[s][k] += w[n]
            self._total[s][k] += v[n]
            self._total_sq[s][k] += v[n] * v[n]
        self.labels[:, n] = labels_n

    def object_loglik(self, n: int, labels_n) -> float:
        """Log predictive of object n's rows inserted at labels_n (object absent)."""
        out = 0.0
        for s, loc in enumerate(self.data.source_locations):
            k = labels_n[loc] - 1
            src = self.data.sources[s]
            row_mask = src.mask[n]
            if not row_mask.any():
                continue
            stats = (self._m[s][k], self._total[s][k], self._total_sq[s][k])
            out += gaussian_posterior_predictive(src.values[n], row_mask, stats, self.hyper)
        return out

    def full_loglik(self, field=None) -> float:
        field = self.labels if field is None else np.asarray(field)
        return total_loglik(self.data, field, self.hyper)

    def heldout_log_predictive(self, source: int, n: int, d: int, y: float) -> float:
        """Log Student-t density of one heldout entry under the current state."""
        loc = self.data.source_locations[source]
        k = self.labels[loc, n] - 1
        m = self._m[source][k, d]
        kap, mu, a, b = _posterior_cells(
            m, self._total[source][k, d], self._total_sq[source][k, d], self.hyper
        )
        scale_sq = b * (kap + 1) / (a * kap)
        return float(_student_t_logpdf(y, 2.0 * a, mu, scale_sq))


class NetworkModel:
    """Stateful collapsed beta-Bernoulli block model over all snapshots.

    Counts are kept per snapshot in (K, K) matrices indexed at (lo, hi) for
    the unordered block pair. Directed data contributes both ordered object
    pairs to the same unordered block pair.
    """

    def __init__(self, data: NetworkData, n_clusters: int, hyper: BetaHyper = None):
        self.data = data
        self.K = n_clusters
        self.hyper = hyper or BetaHyper()
        self.n_locations = data.n_locations
        N = data.n_objects
        # per snapshot, per object: partner indices and link values over all
        # observed pairs involving the object (unordered pairs for symmetric
        # data, both directions for directed)
        self._pairs = []
        for snap in data.snapshots:
            mask = snap.mask & ~np.eye(N, dtype=bool)
            per_obj = []
            for n in range(N):
                if data.symmetric:
                    upper = np.nonzero(mask[n, n + 1 :])[0] + n + 1
                    lower = np.nonzero(mask[:n, n])[0]
                    partners = np.concatenate([lower, upper]).astype(np.int64)
                    y = np.concatenate(
                        [snap.values[lower, n], snap.values[n, upper]]
                    )
                else:
                    out_p = np.nonzero(mask[n])[0]
                    in_p = np.nonzero(mask[:, n])[0]
                    partners = np.concatenate([out_p, in_p]).astype(np.int64)
                    y = np.concatenate([snap.values[n, out_p], snap.values[in_p, n]])
                per_obj.append((partners, (np.asarray(y) == 1).astype(np.int64)))
            self._pairs.append(per_obj)
        self.labels = None

    def set_assignments(self, field):
        field = np.asarray(field)
        self.labels = field.copy()
        self._n1 = []
        self._n0 = []
        N = self.data.n_objects
        for snap, loc in zip(self.data.snapshots, self.data.snapshot_locations):
            labels0 = field[loc] - 1
            mask = snap.mask & ~np.eye(N, dtype=bool)
            if self.data.symmetric:
                mask = mask & np.triu(np.ones((N, N), dtype=bool), k=1)
            i_idx, j_idx = np.nonzero(mask)
            li, lj = labels0[i_idx], labels0[j_idx]
            lo, hi = np.minimum(li, lj), np.maximum(li, lj)
            y = np.asarray(snap.values)[i_idx, j_idx] == 1
            n1 = np.zeros((self.K, self.K))
            n0 = np.zeros((self.K, self.K))
            np.add.at(n1, (lo[y], hi[y]), 1.0)
            np.add.at(n0, (lo[~y], hi[~y]), 1.0)
            self._n1.append(n1)
            self._n0.append(n0)

    def _scatter(self, t: int, n: int, labels0, k: int, sign: float):
        partners, y = self._pairs[t][n]
        if len(partners) == 0:
            return
        lp = labels0[partners]
        lo = np.minimum(lp, k)
        hi = np.maximum(lp, k)
        np.add.at(self._n1[t], (lo[y == 1], hi[y == 1]), sign)
        np.add.at(self._n0[t], (lo[y == 0], hi[y == 0]), sign)

    def remove_object(self, n: int):
        for t, loc in enumerate(self.data.snapshot_locations):
            labels0 = self.labels[loc] - 1
            self._scatter(t, n, labels0, self.labels[loc, n] - 1, -1.0)

    def add_object(self, n: int, labels_n):
        for t, loc in enumerate(self.data.snapshot_locations):
            labels0 = self.labels[loc] - 1
            self._scatter(t, n, labels0, labels_n[loc] - 1, +1.0)
        self.labels[:, n] = labels_n

    def object_loglik(self, n: int, labels_n) -> float:
        """Log predictive of object n's links inserted at labels_n (object absent)."""
        b = self.hyper.beta
        out = 0.0
        for t, loc in enumerate(self.data.snapshot_locations):
            partners, y = self._pairs[t][n]
            if len(partners) == 0:
                continue
            k = labels_n[loc] - 1
            lp = self.labels[loc, partners] - 1
            lo = np.minimum(lp, k)
            hi = np.maximum(lp, k)
            pid = lo * self.K + hi
            a1 = np.bincount(pid[y == 1], minlength=self.K * self.K)
            a0 = np.bincount(pid[y == 0], minlength=self.K * self.K)
            touched = np.nonzero(a1 + a0)[0]
            n1 = self._n1[t].ravel()[touched]
            n0 = self._n0[t].ravel()[touched]
            out += float(
                np.sum(
                    betaln(b + n1 + a1[touched], b + n0 + a0[touched])
                    - betaln(b + n1, b + n0)
                )
            )
        return out

    def full_loglik(self, field=None) -> float:
        field = self.labels if field is None else np.asarray(field)
        return total_loglik(self.data, field, self.hyper)

    def heldout_log_predictive(self, snapshot: int, i: int, j: int, y) -> float:
        """Log probability of one heldout link value under the current state."""
        loc = self.data.snapshot_locations[snapshot]
        ki = self.labels[loc, i] - 1
        kj = self.labels[loc, j] - 1
        lo, hi = min(ki, kj), max(ki, kj)
        rho = network_predictive(self._n1[snapshot][lo, hi], self._n0[snapshot][lo, hi], self.hyper)
        return math.log(rho) if y == 1 else math.log1p(-rho)


class NullModel:
    """Likelihood-free stand-in: every score is zero (prior-only runs)."""

    def __init__(self, n_objects: int, n_locations: int):
        self.n_objects = n_objects
        self.n_locations = n_locations
        self.labels = None

    def set_assignments(self, field):
        self.labels = np.asarray(field).copy()

    def remove_object(self, n: int):
        pass

    def add_object(self, n: int, labels_n):
        self.labels[:, n] = labels_n

    def object_loglik(self, n: int, labels_n) -> float:
        return 0.0

    def full_loglik(self, field=None) -> float:
        return 0.0
