"""Posterior sampling for covariate-indexed partitions.

One iteration updates, in fixed order: the Gaussian function values F by
elliptical slice sampling (per-object blocks of K-1 coupled GPs, a global
joint move over (F, v), an alternation of the two, or per-object blocks
followed by single-location conditional moves), each stick weight v_k
by univariate slice sampling on the logit scale, the kernel hyperparameters
by univariate slice sampling on their free parameterization, and the
concentration alpha by slice sampling on the log scale under a Gamma(1,1)
prior. Cluster parameters never appear: the likelihood models score collapsed
conjugate marginals.

Initialization runs a collapsed Gibbs sampler for the exchangeable
single-partition special case (all sources or snapshots pooled at one
location), then lifts its final partition into a full state whose assignment
field reproduces that partition at every location.

Randomness comes from one counter-based stream per operation class, derived
from a single seed, so adding trace fields or toggling updates never perturbs
the draws of unrelated operations; traces are bit-reproducible given (seed,
options, data).
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import betaln, expit, logit, ndtr

from .kernels import NotPSD, chol
from .likelihoods import MultitaskData, MultitaskModel, NetworkData, NetworkModel, NullModel
from .partitions import (
    StickWeights,
    TruncationConfig,
    V_CLAMP,
    assign,
    assignment_field,
    normal_quantile,
    sample_prior,
    threshold_of,
)

__all__ = [
    "SamplerOptions",
    "SamplerState",
    "TraceRecord",
    "Trace",
    "slice_sample",
    "ess_update_object",
    "ess_update_object_location",
    "label_swap_pass",
    "sweep_F",
    "slice_sample_v",
    "slice_sample_kernel",
    "slice_sample_kernel_whitened",
    "slice_sample_alpha",
    "run_dpm_gibbs",
    "init_from_shared_dpm",
    "run",
]

MAX_SHRINK = 1000

STREAM_NAMES = ("init", "ess", "v", "kernel", "alpha", "extra")


@dataclass
class SamplerOptions:
    iterations: int = 1000
    burnin: int = 500
    thin: int = 1
    seed: int = 0
    slice_width: float = 1.0
    max_stepout: int = 20
    f_mode: str = "per_object"  # per_object | global | alternating | per_object_location
    sample_v: bool = True
    sample_kernel: bool = True
    kernel_delay: int = 0  # sweeps before kernel updates start (burnin staging)
    kernel_interweave: bool = False  # add whitened kernel pass after each standard one
    kernel_collapse: str = "columns"  # columns | reached (marginalization granularity)
    label_swaps: bool = False  # add label-swap Metropolis passes over locations
    sample_alpha: bool = True
    record_assignments: bool = True
    init: str = "dpm"  # dpm | prior
    init_sweeps: int = 100
    debug_checks: bool = False

    def __post_init__(self):
        if not 0 <= self.burnin < self.iterations:
            raise ValueError("burnin must satisfy 0 <= burnin < iterations")
        if self.thin < 1:
            raise ValueError("thin must be >= 1")
        if self.slice_width <= 0:
            raise ValueError("slice width must be positive")
        if self.f_mode not in ("per_object", "global", "alternating", "per_object_location"):
            raise ValueError(f"unknown F update mode {self.f_mode!r}")
        if self.kernel_delay < 0:
            raise ValueError("kernel_delay must be >= 0")
        if self.kernel_collapse not in ("columns", "reached"):
            raise ValueError(f"unknown kernel collapse {self.kernel_collapse!r}")
        if self.init not in ("dpm", "prior"):
            raise ValueError(f"unknown init {self.init!r}")


@dataclass
class SamplerState:
    """Mutable chain state plus caches kept in sync by the update operations."""

    F: np.ndarray  # (T, N, K-1)
    sticks: StickWeights
    kernel: object
    gram: object
    alpha: float
    discount: float
    field: np.ndarray  # (T, N) cached assignments, always assign(F, sticks)

    @property
    def K(self) -> int:
        return self.sticks.K

    def labels_of_object(self, n: int) -> np.ndarray:
        return _object_labels(self.F[:, n, :], self.sticks.thresholds)


@dataclass
class TraceRecord:
    iteration: int
    loglik: float
    log_prior_sticks: float
    log_prior_alpha: float
    log_prior_kernel: float
    alpha: float
    kernel_params: dict
    cluster_counts: list
    assignments: np.ndarray = None


class Trace:
    """Retained samples plus enough metadata to reproduce the run."""

    def __init__(self, meta: dict):
        self.meta = meta
        self.records: list = []

    def append(self, record: TraceRecord):
        self.records.append(record)

    def __len__(self):
        return len(self.records)

    def loglik(self) -> np.ndarray:
        return np.array([r.loglik for r in self.records])

    def alpha(self) -> np.ndarray:
        return np.array([r.alpha for r in self.records])

    def kernel_param(self, name: str) -> np.ndarray:
        return np.array([r.kernel_params[name] for r in self.records])

    def kernel_param_names(self) -> list:
        return list(self.records[0].kernel_params) if self.records else []

    def assignments(self) -> list:
        return [r.assignments for r in self.records if r.assignments is not None]

    def kernel_summary(self):
        """Per parameter: posterior mean and central 95% interval."""
        out = []
        for name in self.kernel_param_names():
            draws = self.kernel_param(name)
            lo, hi = np.percentile(draws, [2.5, 97.5])
            out.append((name, float(draws.mean()), float(lo), float(hi)))
        return out

    def write_jsonl(self, path):
        with open(path, "w") as fh:
            for r in self.records:
                fh.write(
                    json.dumps(
                        {
                            "iteration": r.iteration,
                            "loglik": r.loglik,
                            "log_prior_sticks": r.log_prior_sticks,
                            "log_prior_alpha": r.log_prior_alpha,
                            "log_prior_kernel": r.log_prior_kernel,
                            "alpha": r.alpha,
                            "kernel_params": r.kernel_params,
                            "cluster_counts": r.cluster_counts,
                        }
                    )
                    + "\n"
                )

    def write_assignments_csv(self, path):
        """Final retained assignment snapshot: rows = objects, columns = locations."""
        snaps = self.assignments()
        if not snaps:
            raise ValueError("no assignment snapshots were recorded")
        last = snaps[-1]
        T, N = last.shape
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["object"] + [f"location_{t}" for t in range(T)])
            for n in range(N):
                writer.writerow([n] + [int(last[t, n]) for t in range(T)])

    def write_kernel_posterior_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["parameter", "mean", "ci_2.5", "ci_97.5"])
            for name, mean, lo, hi in self.kernel_summary():
                writer.writerow([name, f"{mean:.10g}", f"{lo:.10g}", f"{hi:.10g}"])


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def _object_labels(f_n: np.ndarray, thresholds: np.ndarray) -> np.ndarray:
    """Labels of one object across locations from its (T, K-1) function values."""
    below = f_n < thresholds[None, :]
    first = np.argmax(below, axis=1)
    return np.where(below.any(axis=1), first + 1, thresholds.shape[0] + 1).astype(np.int64)


def slice_sample(x0, logf, rng, width=1.0, max_stepout=20, max_shrink=MAX_SHRINK):
    """Univariate step-out-and-shrink slice sampler (random step-out split).

    Returns an x with logf(x) >= the slice level; raises after max_shrink
    failed shrink steps, which signals a broken target rather than bad luck.
    """
    log_y = logf(x0) + math.log(1.0 - rng.random())
    left = x0 - width * rng.random()
    right = left + width
    j = int(math.floor(max_stepout * rng.random()))
    k = (max_stepout - 1) - j
    while j > 0 and log_y < logf(left):
        left -= width
        j -= 1
    while k > 0 and log_y < logf(right):
        right += width
        k -= 1
    for _ in range(max_shrink):
        x1 = left + (right - left) * rng.random()
        if logf(x1) >= log_y:
            return x1
        if x1 < x0:
            left = x1
        else:
            right = x1
    raise RuntimeError("slice sampler exhausted its shrink budget")


def _stick_log_prior(v: np.ndarray, alpha: float, discount: float) -> float:
    """Sum of log Beta densities of the stick variables."""
    k = np.arange(1, len(v) + 1)
    a = 1.0 - discount
    b = alpha + k * discount
    return float(np.sum((a - 1) * np.log(v) + (b - 1) * np.log1p(-v) - betaln(a, b)))


def _v_to_u(v: np.ndarray, alpha: float, discount: float) -> np.ndarray:
    """Standard normal auxiliaries with v = BetaPPF(Phi(u)) under the stick prior."""
    if discount == 0.0:
        p = -np.expm1(alpha * np.log1p(-v))  # Beta(1, alpha) CDF
    else:
        from scipy.stats import beta as beta_dist

        k = np.arange(1, len(v) + 1)
        p = beta_dist.cdf(v, 1.0 - discount, alpha + k * discount)
    return normal_quantile(np.clip(p, V_CLAMP, 1 - V_CLAMP))


def _u_to_v(u: np.ndarray, alpha: float, discount: float) -> np.ndarray:
    p = ndtr(u)
    if discount == 0.0:
        v = -np.expm1(np.log1p(-p) / alpha)
    else:
        from scipy.stats import beta as beta_dist

        k = np.arange(1, len(u) + 1)
        v = beta_dist.ppf(p, 1.0 - discount, alpha + k * discount)
    return np.clip(v, V_CLAMP, 1 - V_CLAMP)


# ---------------------------------------------------------------------------
# F updates
# ---------------------------------------------------------------------------

def ess_update_object(state: SamplerState, model, n: int, rng) -> SamplerState:
    """Elliptical slice update of object n's K-1 coupled GP stacks.

    The auxiliary prior draw uses the shared T x T Cholesky once per stick
    (the prior over the (K-1)*T stack is block diagonal). The likelihood is
    the object's collapsed insertion score with the object removed from the
    sufficient statistics, so additive constants shared by all label choices
    cancel and detailed balance holds for the conditional target.
    """
    thresholds = state.sticks.thresholds
    L = state.gram.cholesky()
    T, K1 = state.F.shape[0], state.F.shape[2]
    model.remove_object(n)
    f0 = state.F[:, n, :].copy()
    nu = L @ rng.standard_normal((T, K1))
    log_y = model.object_loglik(n, _object_labels(f0, thresholds)) + math.log(
        1.0 - rng.random()
    )
    theta = rng.uniform(0.0, 2.0 * math.pi)
    lo, hi = theta - 2.0 * math.pi, theta
    for _ in range(MAX_SHRINK):
        f1 = f0 * math.cos(theta) + nu * math.sin(theta)
        labels1 = _object_labels(f1, thresholds)
        if model.object_loglik(n, labels1) > log_y:
            state.F[:, n, :] = f1
            state.field[:, n] = labels1
            model.add_object(n, labels1)
            return state
        if theta < 0:
            lo = theta
        else:
            hi = theta
        theta = rng.uniform(lo, hi)
    raise RuntimeError("elliptical slice sampler exhausted its shrink budget")


def _location_conditionals(gram) -> list:
    """Per-location conditional of f(t) given the values elsewhere.

    Returns, for each location t, (other_indices, weights, variance) with
    mean weights @ f(others) and the stated variance; shared by all sticks
    because they share the gram. With one location this is the prior itself.
    """
    S = gram.sigma
    out = []
    for t in range(gram.T):
        others = [u for u in range(gram.T) if u != t]
        if not others:
            out.append((others, np.zeros(0), float(S[t, t])))
            continue
        cross = S[np.ix_(others, [t])][:, 0]
        w = np.linalg.solve(S[np.ix_(others, others)], cross)
        out.append((others, w, max(float(S[t, t] - cross @ w), 1e-12)))
    return out


def ess_update_object_location(state: SamplerState, model, n: int, t: int, cond, rng) -> SamplerState:
    """Elliptical slice update of object n's stick values at one location.

    The ellipse lives in the GP conditional of location t given the object's
    values elsewhere, so the move never disturbs other locations and its
    acceptance depends on the likelihood only through the label at t. This
    lets a weakly informative location reseat its labels at full-width angles
    instead of the tiny joint angles the strongly pinned locations force.
    """
    others, w, var = cond[t]
    thresholds = state.sticks.thresholds
    f_n = state.F[:, n, :]
    mu = w @ f_n[others] if others else np.zeros(f_n.shape[1])
    g0 = f_n[t] - mu
    nu = math.sqrt(var) * rng.standard_normal(f_n.shape[1])
    labels = state.field[:, n].copy()
    model.remove_object(n)
    log_y = model.object_loglik(n, labels) + math.log(1.0 - rng.random())
    theta = rng.uniform(0.0, 2.0 * math.pi)
    lo, hi = theta - 2.0 * math.pi, theta
    for _ in range(MAX_SHRINK):
        f1 = g0 * math.cos(theta) + nu * math.sin(theta) + mu
        labels[t] = assign(f1, thresholds)
        if model.object_loglik(n, labels) > log_y:
            state.F[t, n, :] = f1
            state.field[t, n] = labels[t]
            model.add_object(n, labels)
            return state
        if theta < 0:
            lo = theta
        else:
            hi = theta
        theta = rng.uniform(lo, hi)
    raise RuntimeError("elliptical slice sampler exhausted its shrink budget")


def _label_region_logmass(c: int, mu: np.ndarray, s: float, thresholds: np.ndarray) -> float:
    """Log prior mass of the stick region implying label c at one location.

    Label c requires sticks 1..c-1 above their thresholds and stick c below
    (no final constraint for the truncation fallback c = K); components are
    independent N(mu_k, s^2) given the other locations.
    """
    K1 = len(thresholds)
    z = (thresholds - mu) / s
    total = 0.0
    for k in range(min(c - 1, K1)):
        total += math.log(max(1.0 - float(ndtr(z[k])), V_CLAMP))
    if c <= K1:
        total += math.log(max(float(ndtr(z[c - 1])), V_CLAMP))
    return total


def _draw_label_region(c: int, mu: np.ndarray, s: float, thresholds: np.ndarray, rng) -> np.ndarray:
    """Stick values at one location drawn from the conditional prior on label c's region."""
    K1 = len(thresholds)
    z = (thresholds - mu) / s
    cdf = ndtr(z)
    u = rng.random(K1)
    p = np.empty(K1)
    for k in range(K1):
        if k < c - 1:
            p[k] = cdf[k] + u[k] * (1.0 - cdf[k])  # above threshold
        elif k == c - 1 and c <= K1:
            p[k] = u[k] * cdf[k]  # below threshold
        else:
            p[k] = u[k]  # unread by assign: free
    return mu + s * normal_quantile(np.clip(p, V_CLAMP, 1.0 - V_CLAMP))


def label_swap_pass(state: SamplerState, model, rng) -> SamplerState:
    """One label-swap Metropolis move per location.

    Swapping two cluster labels at one location leaves the induced partition,
    and with it the data likelihood, unchanged; what moves is which stick
    regions the objects occupy. Incremental updates cannot connect these
    modes (every path through single-object moves breaks the partition), so
    without this move the chain freezes into the label arrangement it
    happened to start from. Proposals redraw the affected objects' stick
    values at that location from the conditional prior truncated to the
    swapped regions, which cancels down to an acceptance ratio of region
    masses. Where the kernel has learnt strong cross-location correlation the
    ratio is astronomically small and the arrangement stays frozen; where the
    data are indifferent the swap accepts freely and the arrangement mixes.
    """
    T, N, K1 = state.F.shape
    K = K1 + 1
    cond = _location_conditionals(state.gram)
    thresholds = state.sticks.thresholds
    for t in range(T):
        # pairs are drawn among the occupied labels plus the next unused one;
        # the swap can change that candidate set, so the selection probability
        # enters the Hastings ratio and out-of-range reverse pairs reject
        m = min(int(state.field[t].max()) + 1, K)
        if m < 2:
            continue
        j, l = rng.choice(np.arange(1, m + 1), size=2, replace=False)
        affected = np.nonzero((state.field[t] == j) | (state.field[t] == l))[0]
        if len(affected) == 0:
            continue
        new_labels = state.field[t].copy()
        new_labels[affected] = np.where(new_labels[affected] == j, l, j)
        m_rev = min(int(new_labels.max()) + 1, K)
        if j > m_rev or l > m_rev:
            continue
        others, w, var = cond[t]
        s = math.sqrt(var)
        mus = (
            np.einsum("o,onk->nk", w, state.F[others]) if others else np.zeros((N, K1))
        )
        log_accept = math.log(m * (m - 1)) - math.log(m_rev * (m_rev - 1))
        proposals = {}
        for n in affected:
            c = int(state.field[t, n])
            c_new = int(new_labels[n])
            log_accept += _label_region_logmass(c_new, mus[n], s, thresholds)
            log_accept -= _label_region_logmass(c, mus[n], s, thresholds)
            proposals[n] = (c_new, _draw_label_region(c_new, mus[n], s, thresholds, rng))
        if math.log(max(rng.random(), 1e-300)) < log_accept:
            for n, (c_new, f_new) in proposals.items():
                state.F[t, n, :] = f_new
                state.field[t, n] = c_new
            model.set_assignments(state.field)
    return state


def _global_ess(state: SamplerState, model, rng) -> SamplerState:
    """One ESS transition on the whole F stack jointly with v.

    v rides along through standard normal auxiliaries u with
    v = BetaPPF(Phi(u)); the stick prior is then exactly the N(0, I) prior
    the ellipse assumes, so only the collapsed data likelihood is thresholded.
    """
    T, N, K1 = state.F.shape
    L = state.gram.cholesky()
    u0 = _v_to_u(state.sticks.v, state.alpha, state.discount)
    nu_F = np.einsum("ij,jnk->ink", L, rng.standard_normal((T, N, K1)))
    nu_u = rng.standard_normal(K1)
    log_y = model.full_loglik(state.field) + math.log(1.0 - rng.random())
    theta = rng.uniform(0.0, 2.0 * math.pi)
    lo, hi = theta - 2.0 * math.pi, theta
    for _ in range(MAX_SHRINK):
        c, s = math.cos(theta), math.sin(theta)
        F1 = state.F * c + nu_F * s
        u1 = u0 * c + nu_u * s
        v1 = _u_to_v(u1, state.alpha, state.discount)
        sticks1 = StickWeights.from_v(v1)
        field1 = assignment_field(F1, sticks1.thresholds)
        if model.full_loglik(field1) > log_y:
            state.F = F1
            state.sticks = sticks1
            state.field = field1
            model.set_assignments(field1)
            return state
        if theta < 0:
            lo = theta
        else:
            hi = theta
        theta = rng.uniform(lo, hi)
    raise RuntimeError("elliptical slice sampler exhausted its shrink budget")


def sweep_F(state: SamplerState, model, rng, mode="per_object", iteration=0) -> SamplerState:
    """One F update pass; alternating switches mode by iteration parity."""
    if mode == "alternating":
        mode = "per_object" if iteration % 2 == 0 else "global"
    if mode == "per_object":
        for n in range(state.F.shape[1]):
            ess_update_object(state, model, n, rng)
        return state
    if mode == "per_object_location":
        cond = _location_conditionals(state.gram)
        for n in range(state.F.shape[1]):
            ess_update_object(state, model, n, rng)
            for t in range(state.F.shape[0]):
                ess_update_object_location(state, model, n, t, cond, rng)
        return state
    if mode == "global":
        return _global_ess(state, model, rng)
    raise ValueError(f"unknown F update mode {mode!r}")


# ---------------------------------------------------------------------------
# v, kernel, alpha updates
# ---------------------------------------------------------------------------

def slice_sample_v(state: SamplerState, model, rng, width=1.0, max_stepout=20) -> SamplerState:
    """Slice-update each v_k on the logit scale.

    Target: Beta stick prior times the logit Jacobian v(1-v) times the
    collapsed likelihood with assignments recomputed under the candidate
    (only stick k's threshold moves per update).
    """
    v = state.sticks.v.copy()
    thresholds = state.sticks.thresholds.copy()
    a_d = 1.0 - state.discount
    for k in range(len(v)):
        b_d = state.alpha + (k + 1) * state.discount

        def logf(x):
            vk = float(expit(x))
            if not (V_CLAMP <= vk <= 1.0 - V_CLAMP):
                return -math.inf
            thr = thresholds.copy()
            thr[k] = threshold_of(vk)
            field = assignment_field(state.F, thr)
            log_prior = (a_d - 1) * math.log(vk) + (b_d - 1) * math.log1p(-vk) - betaln(
                a_d, b_d
            )
            jacobian = math.log(vk) + math.log1p(-vk)
            return log_prior + jacobian + model.full_loglik(field)

        x1 = slice_sample(float(logit(v[k])), logf, rng, width, max_stepout)
        v[k] = float(np.clip(expit(x1), V_CLAMP, 1.0 - V_CLAMP))
        thresholds[k] = threshold_of(v[k])
    state.sticks = StickWeights.from_v(v)
    state.field = assignment_field(state.F, state.sticks.thresholds)
    model.set_assignments(state.field)
    return state


def _kernel_gp_loglik(kernel, F_constrained) -> float:
    """Log prior of the constrained GP stacks under a candidate kernel."""
    try:
        gram = kernel.gram()
        vecs = np.moveaxis(F_constrained, 0, -1)  # (N, kmax, T)
        return float(np.sum(gram.mvn_logpdf(vecs)))
    except NotPSD:
        return -math.inf


def _reached_mask(field, K1: int) -> np.ndarray:
    """(T, N, K1) flags for the sticks assign actually evaluated: k < c_n(t)."""
    return np.arange(K1)[None, None, :] < np.asarray(field)[:, :, None]


def _masked_gp_loglik(kernel, F, reached) -> float:
    """GP log density of the stick-evaluated components only.

    Components assign never read integrate out of the Gaussian exactly, so
    they are dropped; vectors sharing an evaluation pattern are batched.
    """
    try:
        S = kernel.gram().sigma
    except NotPSD:
        return -math.inf
    T = F.shape[0]
    vecs = F.reshape(T, -1).T
    pats = reached.reshape(T, -1).T
    total = 0.0
    for pat in np.unique(pats, axis=0):
        if not pat.any():
            continue
        rows = np.nonzero((pats == pat).all(axis=1))[0]
        idx = np.nonzero(pat)[0]
        try:
            L = chol(S[np.ix_(idx, idx)])
        except NotPSD:
            return -math.inf
        x = solve_triangular(L, vecs[np.ix_(rows, idx)].T, lower=True)
        total += -0.5 * float(np.sum(x * x)) - len(rows) * (
            float(np.log(np.diag(L)).sum()) + 0.5 * len(idx) * math.log(2.0 * math.pi)
        )
    return total


def _redraw_unreached(state: SamplerState, rng) -> None:
    """Refresh the components assign never read from the kernel conditional.

    Together with the masked kernel target this forms a blocked update of
    (kernel, unread components): marginalize, move the kernel, then restore
    the unread values from their exact conditional given the kept ones.
    Assignments cannot change because assign never reads what is refreshed.
    """
    S = state.gram.sigma
    T, N, K1 = state.F.shape
    reached = _reached_mask(state.field, K1)
    vecs = state.F.reshape(T, -1).T.copy()
    pats = reached.reshape(T, -1).T
    for pat in np.unique(pats, axis=0):
        if pat.all():
            continue
        rows = np.nonzero((pats == pat).all(axis=1))[0]
        obs = np.nonzero(pat)[0]
        mis = np.nonzero(~pat)[0]
        if len(obs) == 0:
            L = chol(S[np.ix_(mis, mis)])
            vecs[np.ix_(rows, mis)] = rng.standard_normal((len(rows), len(mis))) @ L.T
            continue
        Smo = S[np.ix_(mis, obs)]
        W = np.linalg.solve(S[np.ix_(obs, obs)], Smo.T).T
        L = chol(S[np.ix_(mis, mis)] - W @ Smo.T)
        mean = vecs[np.ix_(rows, obs)] @ W.T
        vecs[np.ix_(rows, mis)] = mean + rng.standard_normal((len(rows), len(mis))) @ L.T
    state.F = np.ascontiguousarray(vecs.T.reshape(T, N, K1))


def slice_sample_kernel(
    state: SamplerState, model, rng, width=1.0, max_stepout=20, collapse="columns"
) -> SamplerState:
    """Slice-update each free kernel parameter.

    With collapse="columns", the GP product runs only over sticks k <= max
    assignment: columns past that bound constrain nothing and are
    marginalized out of the target, then redrawn from the accepted kernel so
    the joint state stays exact. collapse="reached" applies the same
    marginalization identity per object and location, keeping only the
    components assign actually evaluated: the values that are pure prior
    bookkeeping then stop feeding back into the kernel target, which
    otherwise re-confirms whatever kernel generated them. Assignments never
    change here.
    """
    T, N, K1 = state.F.shape
    params = state.kernel.free_params().astype(float)
    if collapse == "reached":
        reached = _reached_mask(state.field, K1)

        def gp_term(cand):
            return _masked_gp_loglik(cand, state.F, reached)

    else:
        kmax = min(int(state.field.max()), K1)
        F_constrained = state.F[:, :, :kmax]

        def gp_term(cand):
            return _kernel_gp_loglik(cand, F_constrained)

    for i in range(len(params)):

        def logf(x):
            p = params.copy()
            p[i] = x
            cand = state.kernel.with_free_params(p)
            lp = cand.log_prior_free()
            if lp == -math.inf:
                return -math.inf
            return lp + gp_term(cand)

        params[i] = slice_sample(float(params[i]), logf, rng, width, max_stepout)
    state.kernel = state.kernel.with_free_params(params)
    state.gram = state.kernel.gram()
    if collapse == "reached":
        _redraw_unreached(state, rng)
    elif kmax < K1:
        L = state.gram.cholesky()
        z = rng.standard_normal((T, N, K1 - kmax))
        state.F[:, :, kmax:] = np.einsum("ij,jnk->ink", L, z)
    return state


def slice_sample_kernel_whitened(
    state: SamplerState, model, rng, width=1.0, max_stepout=20
) -> SamplerState:
    """Slice-update kernel parameters with the whitened field held fixed.

    Reparameterize F = L(theta) eps per stick stack and condition on eps: the
    GP density cancels, leaving kernel prior times the data likelihood of the
    assignments the transported F induces. This complements the standard
    update, whose steps shrink as F conforms to the current kernel: here the
    field rides along, so parameters the data are indifferent to can traverse
    their whole marginal range in one pass. Because the Cholesky factor is
    lower triangular, a parameter only transports the locations ordered at or
    after the ones it touches; earlier locations keep their values exactly.

    Slices run along each coordinate and then along random two-parameter
    directions: a coordinate move transports only the locations its parameter
    touches, while the paired directions walk positive-definiteness ridges
    (one correlation near its bound pins the others to linear combinations)
    without dragging every parameter at once.
    """
    L0 = state.gram.cholesky()
    T, N, K1 = state.F.shape
    eps = solve_triangular(L0, state.F.reshape(T, -1), lower=True).reshape(T, N, K1)
    thresholds = state.sticks.thresholds
    params = state.kernel.free_params().astype(float)
    P = len(params)

    def logf_at(p):
        cand = state.kernel.with_free_params(p)
        lp = cand.log_prior_free()
        if lp == -math.inf:
            return -math.inf
        try:
            L = cand.gram().cholesky()
        except NotPSD:
            return -math.inf
        F1 = np.einsum("ij,jnk->ink", L, eps)
        return lp + model.full_loglik(assignment_field(F1, thresholds))

    directions = [np.eye(P)[p] for p in range(P)]
    for _ in range(P if P >= 2 else 0):
        a, b = rng.choice(P, size=2, replace=False)
        angle = rng.random() * 2.0 * math.pi
        u = np.zeros(P)
        u[a], u[b] = math.cos(angle), math.sin(angle)
        directions.append(u)
    for u in directions:

        def logf(s):
            return logf_at(params + s * u)

        step = slice_sample(0.0, logf, rng, width, max_stepout)
        params = params + step * u
    state.kernel = state.kernel.with_free_params(params)
    state.gram = state.kernel.gram()
    state.F = np.einsum("ij,jnk->ink", state.gram.cholesky(), eps)
    state.field = assignment_field(state.F, thresholds)
    model.set_assignments(state.field)
    return state


def slice_sample_alpha(state: SamplerState, model, rng, width=1.0, max_stepout=20) -> SamplerState:
    """Slice-update alpha on the log scale under its Gamma(1,1) prior."""
    v = state.sticks.v
    d = state.discount

    def logf(x):
        a = math.exp(x)
        return -a + _stick_log_prior(v, a, d) + x  # prior + sticks + Jacobian

    x1 = slice_sample(math.log(state.alpha), logf, rng, width, max_stepout)
    state.alpha = math.exp(x1)
    return state


# ---------------------------------------------------------------------------
# DPM initialization
# ---------------------------------------------------------------------------

def _pooled_model(model):
    """Same likelihood with every source or snapshot mapped to location 0."""
    if isinstance(model, MultitaskModel):
        data = MultitaskData(model.data.sources, source_locations=(0,) * len(model.data.sources))
        return MultitaskModel(data, n_clusters=data.n_objects, hyper=model.hyper)
    if isinstance(model, NetworkModel):
        data = NetworkData(
            model.data.snapshots,
            symmetric=model.data.symmetric,
            snapshot_locations=(0,) * len(model.data.snapshots),
        )
        return NetworkModel(data, n_clusters=data.n_objects, hyper=model.hyper)
    raise TypeError(f"no pooled variant for {type(model).__name__}")


def run_dpm_gibbs(pooled_model, alpha: float, n_sweeps: int, rng, labels=None):
    """Collapsed Gibbs sampling of a single exchangeable partition.

    Restaurant-style updates: each object in turn is removed and reseated at
    an existing block with weight (block size) * predictive, or a fresh block
    with weight alpha * predictive. Returns final labels (1-based) and the
    per-sweep collapsed data log likelihood.
    """
    N = pooled_model.data.n_objects
    if labels is None:
        # all-singletons start: merges are cheap moves for a restaurant-style
        # sampler, splits are not, so starting merged tends to stick
        labels = np.arange(1, N + 1, dtype=np.int64)
    else:
        labels = np.asarray(labels, dtype=np.int64).copy()
    pooled_model.set_assignments(labels[None, :])
    loglik_path = np.empty(n_sweeps)
    for sweep in range(n_sweeps):
        for n in range(N):
            pooled_model.remove_object(n)
            others = np.delete(labels, n)
            active, sizes = np.unique(others, return_counts=True)
            fresh = next(l for l in range(1, N + 1) if l not in set(active))
            cand = np.append(active, fresh)
            logw = np.empty(len(cand))
            for i, k in enumerate(cand):
                prior = math.log(sizes[i]) if i < len(active) else math.log(alpha)
                logw[i] = prior + pooled_model.object_loglik(n, np.array([k]))
            w = np.exp(logw - logw.max())
            w /= w.sum()
            choice = cand[rng.choice(len(cand), p=w)]
            labels[n] = choice
            pooled_model.add_object(n, np.array([choice]))
        loglik_path[sweep] = pooled_model.full_loglik()
    return labels, loglik_path


def _relabel_by_size(labels: np.ndarray, n_max: int) -> np.ndarray:
    """1-based labels renumbered by decreasing block size; blocks past n_max
    collapse into label n_max."""
    active, counts = np.unique(labels, return_counts=True)
    order = active[np.argsort(-counts, kind="stable")]
    mapping = {old: min(new + 1, n_max) for new, old in enumerate(order)}
    return np.array([mapping[l] for l in labels], dtype=np.int64)


def _sample_truncated_normal(threshold: float, above: bool, size, rng) -> np.ndarray:
    """Standard-normal draws truncated to one side of a threshold, by inverse CDF."""
    cdf = float(ndtr(threshold))
    u = rng.random(size)
    p = cdf + u * (1.0 - cdf) if above else u * cdf
    return normal_quantile(np.clip(p, V_CLAMP, 1.0 - V_CLAMP))


def init_from_shared_dpm(
    model, config: TruncationConfig, kernel, rng, n_sweeps: int = 100
) -> SamplerState:
    """Build a full sampler state from a pooled-partition Gibbs warm-up.

    The warm-up partition (blocks relabeled by decreasing size) is reproduced
    exactly at every location: v_k is the empirical stick fraction of block k
    (clamped), constrained function values are sampled from a standard normal
    truncated to the side of the threshold the assignment implies
    (independently per location, so the initial state carries no spurious
    cross-location correlation for the kernel updates to lock onto), and
    unconstrained stacks are prior draws.
    """
    pooled = _pooled_model(model)
    raw_labels, _ = run_dpm_gibbs(pooled, config.alpha, n_sweeps, rng)
    labels = _relabel_by_size(raw_labels, config.K)
    N = len(labels)
    gram = kernel.gram()
    T = gram.T
    K1 = config.K - 1

    # empirical stick fractions: v_k = n_k / (objects not claimed by sticks < k)
    sizes = np.bincount(labels, minlength=config.K + 1)[1:]  # index k-1 -> size
    remaining = N - np.concatenate(([0], np.cumsum(sizes)[:-1]))
    with np.errstate(invalid="ignore", divide="ignore"):
        v = np.where(remaining[:K1] > 0, sizes[:K1] / np.maximum(remaining[:K1], 1), np.nan)
    prior_draws = rng.beta(1.0 - config.discount, config.alpha + np.arange(1, config.K) * config.discount)
    v = np.where(np.isnan(v), prior_draws, v)
    sticks = StickWeights.from_v(v)

    # F: prior draws everywhere, then constrained entries redrawn from the
    # truncated region the assignment implies, independently per location
    L = gram.cholesky()
    F = np.einsum("ij,jnk->ink", L, rng.standard_normal((T, N, K1)))
    for k in range(K1):
        thr = float(sticks.thresholds[k])
        rejected = labels > (k + 1)
        F[:, rejected, k] = _sample_truncated_normal(thr, True, (T, int(rejected.sum())), rng)
        accepted = labels == (k + 1)
        F[:, accepted, k] = _sample_truncated_normal(thr, False, (T, int(accepted.sum())), rng)

    field = np.tile(labels, (T, 1))
    state = SamplerState(
        F=F,
        sticks=sticks,
        kernel=kernel,
        gram=gram,
        alpha=config.alpha,
        discount=config.discount,
        field=field,
    )
    model.set_assignments(field)
    return state


# ---------------------------------------------------------------------------
# the full chain
# ---------------------------------------------------------------------------

def _check_consistency(state: SamplerState, model):
    recomputed = assignment_field(state.F, state.sticks.thresholds)
    if not np.array_equal(recomputed, state.field):
        raise AssertionError("cached assignment field drifted from assign(F, v)")
    if model.labels is not None and not np.array_equal(model.labels, state.field):
        raise AssertionError("likelihood model labels drifted from state field")
    ll_cached = model.full_loglik()
    ll_fresh = model.full_loglik(state.field)
    if not math.isclose(ll_cached, ll_fresh, rel_tol=0, abs_tol=1e-8):
        raise AssertionError("sufficient statistics drifted from recomputation")


def _make_streams(seed: int) -> dict:
    children = np.random.SeedSequence(seed).spawn(len(STREAM_NAMES))
    return {
        name: np.random.Generator(np.random.Philox(child))
        for name, child in zip(STREAM_NAMES, children)
    }


def _prior_state(model, config: TruncationConfig, kernel, rng) -> SamplerState:
    gram = kernel.gram()
    n = model.data.n_objects if hasattr(model, "data") else model.n_objects
    draw = sample_prior(config, gram, n, rng)
    state = SamplerState(
        F=draw.gp_values.copy(),
        sticks=draw.sticks,
        kernel=kernel,
        gram=gram,
        alpha=config.alpha,
        discount=config.discount,
        field=draw.labels.copy(),
    )
    model.set_assignments(state.field)
    return state


def run(model, kernel, config: TruncationConfig, options: SamplerOptions) -> Trace:
    """Run one chain and return the retained trace.

    Per iteration: sweep_F, then v, kernel, and alpha slice updates (each
    toggleable). Records are appended after burnin at the thinning interval.
    """
    streams = _make_streams(options.seed)
    if options.init == "prior" or isinstance(model, NullModel):
        state = _prior_state(model, config, kernel, streams["init"])
    else:
        state = init_from_shared_dpm(model, config, kernel, streams["init"], options.init_sweeps)

    trace = Trace(
        meta={
            "iterations": options.iterations,
            "burnin": options.burnin,
            "thin": options.thin,
            "seed": options.seed,
            "f_mode": options.f_mode,
            "kernel_delay": options.kernel_delay,
            "K": config.K,
            "n_locations": state.field.shape[0],
            "n_objects": state.field.shape[1],
        }
    )
    for it in range(options.iterations):
        sweep_F(state, model, streams["ess"], options.f_mode, iteration=it)
        if options.label_swaps and it > options.kernel_delay:
            # deferred until after the first kernel update: swaps are gauge
            # moves, and before the kernel has locked the data-pinned
            # locations together a swap there accepts freely and scrambles
            # the alignment the run is measuring
            label_swap_pass(state, model, streams["extra"])
        if options.sample_v:
            slice_sample_v(state, model, streams["v"], options.slice_width, options.max_stepout)
        if options.sample_kernel and it >= options.kernel_delay:
            # staging: letting the field settle before the first kernel move
            # keeps early aligned-by-init assignments from locking the kernel
            # into spurious cross-location correlation
            slice_sample_kernel(
                state,
                model,
                streams["kernel"],
                options.slice_width,
                options.max_stepout,
                collapse=options.kernel_collapse,
            )
            if options.kernel_interweave:
                slice_sample_kernel_whitened(
                    state, model, streams["kernel"], options.slice_width, options.max_stepout
                )
        if options.sample_alpha:
            slice_sample_alpha(
                state, model, streams["alpha"], options.slice_width, options.max_stepout
            )
        if options.debug_checks:
            _check_consistency(state, model)
        if it >= options.burnin and (it - options.burnin) % options.thin == 0:
            loglik = model.full_loglik()
            if not math.isfinite(loglik):
                raise RuntimeError(f"non-finite log likelihood at iteration {it}")
            trace.append(
                TraceRecord(
                    iteration=it,
                    loglik=loglik,
                    log_prior_sticks=_stick_log_prior(
                        state.sticks.v, state.alpha, state.discount
                    ),
                    log_prior_alpha=-state.alpha,
                    log_prior_kernel=float(state.kernel.log_prior()),
                    alpha=state.alpha,
                    kernel_params=dict(
                        zip(state.kernel.param_names(), map(float, state.kernel.param_values()))
                    ),
                    cluster_counts=[
                        int(len(np.unique(state.field[t]))) for t in range(state.field.shape[0])
                    ],
                    assignments=state.field.copy() if options.record_assignments else None,
                )
            )
    trace.final_state = state
    return trace
