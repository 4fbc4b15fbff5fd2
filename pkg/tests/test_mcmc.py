"""Tests for the samplers: prior recovery, slice targets, initialization, runs."""

import json
import math

import numpy as np
import pytest

from dpvp.kernels import (
    SimilarityKernel,
    SquaredExponentialKernel,
    TreeKernel,
)
from dpvp.likelihoods import (
    MultitaskData,
    MultitaskModel,
    NetworkData,
    NetworkModel,
    NullModel,
    Snapshot,
    SourceMatrix,
)
from dpvp.mcmc import (
    SamplerOptions,
    SamplerState,
    ess_update_object,
    ess_update_object_location,
    init_from_shared_dpm,
    label_swap_pass,
    _location_conditionals,
    run,
    run_dpm_gibbs,
    slice_sample,
    slice_sample_alpha,
    slice_sample_kernel,
    slice_sample_kernel_whitened,
    slice_sample_v,
    sweep_F,
    _pooled_model,
)
from dpvp.partitions import (
    StickWeights,
    TruncationConfig,
    ari_from_labels,
    assignment_field,
    crp_log_prob,
    partition_from_labels,
    sample_prior,
)


def _null_state(T=2, N=2, K=3, seed=0, lengthscale=1.0, locations=None):
    if locations is None:
        locations = tuple(float(t) for t in range(T))
    kernel = SquaredExponentialKernel(locations=locations, lengthscale=lengthscale)
    config = TruncationConfig(K=K, alpha=1.0)
    rng = np.random.default_rng(seed)
    draw = sample_prior(config, kernel.gram(), N, rng)
    state = SamplerState(
        F=draw.gp_values.copy(),
        sticks=draw.sticks,
        kernel=kernel,
        gram=kernel.gram(),
        alpha=1.0,
        discount=0.0,
        field=draw.labels.copy(),
    )
    model = NullModel(n_objects=N, n_locations=T)
    model.set_assignments(state.field)
    return state, model


def _three_cluster_data(rng, N=12, D=4, spread=3.0):
    truth = np.repeat([1, 2, 3], N // 3)
    means = np.array([-spread, 0.0, spread])[truth - 1]
    sources = []
    for _ in range(2):
        y = means[:, None] + rng.standard_normal((N, D))
        sources.append(SourceMatrix(y, np.ones_like(y, dtype=bool)))
    return MultitaskData(sources), truth


# ---------------------------------------------------------------------------
# elliptical slice updates
# ---------------------------------------------------------------------------

def test_ess_prior_recovery():
    # constant likelihood: sweeps must preserve the GP prior
    state, model = _null_state(T=2, N=2, K=3, lengthscale=1.0, locations=(0.0, 0.8))
    rng = np.random.default_rng(42)
    samples = np.empty((5000, 2, 2, 2))
    for s in range(5000):
        sweep_F(state, model, rng, "per_object")
        samples[s] = state.F
    means = samples.mean(axis=0)
    variances = samples.var(axis=0)
    assert np.all(np.abs(means) < 0.05)
    assert np.all(np.abs(variances - 1.0) < 0.1)
    rho = state.gram.sigma[0, 1]
    for n in range(2):
        for k in range(2):
            emp = np.corrcoef(samples[:, 0, n, k], samples[:, 1, n, k])[0, 1]
            assert abs(emp - rho) < 0.05


def test_ess_single_object_locality():
    state, model = _null_state(T=3, N=6, K=5, seed=1)
    before = state.F.copy()
    rng = np.random.default_rng(2)
    ess_update_object(state, model, 2, rng)
    others = [n for n in range(6) if n != 2]
    np.testing.assert_array_equal(state.F[:, others, :], before[:, others, :])
    assert not np.array_equal(state.F[:, 2, :], before[:, 2, :])


def test_ess_keeps_field_synced():
    state, model = _null_state(T=2, N=5, K=4, seed=3)
    rng = np.random.default_rng(4)
    for _ in range(50):
        sweep_F(state, model, rng, "per_object")
        np.testing.assert_array_equal(
            state.field, assignment_field(state.F, state.sticks.thresholds)
        )
        np.testing.assert_array_equal(state.field, model.labels)


def test_sweep_modes_touch_only_their_fields():
    state, model = _null_state(T=2, N=4, K=4, seed=5)
    rng = np.random.default_rng(6)
    kernel_before = state.kernel
    alpha_before = state.alpha
    v_before = state.sticks.v.copy()
    sweep_F(state, model, rng, "per_object")
    assert state.kernel is kernel_before
    assert state.alpha == alpha_before
    np.testing.assert_array_equal(state.sticks.v, v_before)  # per-object leaves v
    sweep_F(state, model, rng, "global")
    assert state.kernel is kernel_before
    assert state.alpha == alpha_before  # global may move v but never kernel/alpha


def test_global_mode_preserves_prior_moments():
    # joint (F, v) ESS against a constant likelihood must hold the v prior
    state, model = _null_state(T=2, N=3, K=4, seed=7)
    rng = np.random.default_rng(8)
    v_samples = []
    for _ in range(4000):
        sweep_F(state, model, rng, "global")
        v_samples.append(state.sticks.v.copy())
    v_samples = np.array(v_samples)
    # Beta(1, 1) mean 0.5 at alpha=1
    assert np.all(np.abs(v_samples.mean(axis=0) - 0.5) < 0.05)


def test_location_mode_preserves_prior():
    # conditional-ellipse moves against a constant likelihood must keep the
    # GP prior exactly: means, variances, and the cross-location correlation
    state, model = _null_state(T=2, N=2, K=3, lengthscale=1.0, locations=(0.0, 0.8))
    rng = np.random.default_rng(21)
    samples = np.empty((3000, 2, 2, 2))
    for s in range(3000):
        sweep_F(state, model, rng, "per_object_location")
        samples[s] = state.F
    assert np.all(np.abs(samples.mean(axis=0)) < 0.07)
    assert np.all(np.abs(samples.var(axis=0) - 1.0) < 0.12)
    rho = state.gram.sigma[0, 1]
    for n in range(2):
        for k in range(2):
            emp = np.corrcoef(samples[:, 0, n, k], samples[:, 1, n, k])[0, 1]
            assert abs(emp - rho) < 0.07


def test_location_move_touches_single_location():
    state, model = _null_state(T=3, N=6, K=5, seed=13)
    before = state.F.copy()
    rng = np.random.default_rng(14)
    cond = _location_conditionals(state.gram)
    ess_update_object_location(state, model, 2, 1, cond, rng)
    np.testing.assert_array_equal(state.F[0], before[0])
    np.testing.assert_array_equal(state.F[2], before[2])
    others = [n for n in range(6) if n != 2]
    np.testing.assert_array_equal(state.F[1, others, :], before[1, others, :])
    assert not np.array_equal(state.F[1, 2, :], before[1, 2, :])
    np.testing.assert_array_equal(
        state.field, assignment_field(state.F, state.sticks.thresholds)
    )
    np.testing.assert_array_equal(state.field, model.labels)


def test_location_mode_melts_indifferent_location():
    # one source is strongly three-cluster, the other pure noise; starting
    # both locations at the three-way split, the single-location conditional
    # moves must let the noise location abandon that split (its likelihood
    # prefers pooling) while the informative location keeps it
    rng = np.random.default_rng(15)
    N, D, K = 12, 4, 6
    truth = np.repeat([1, 2, 3], N // 3)
    means = np.array([-4.0, 0.0, 4.0])[truth - 1]
    strong = means[:, None] + rng.standard_normal((N, D))
    noise = rng.standard_normal((N, D))
    data = MultitaskData(
        [SourceMatrix(strong, np.ones_like(strong, dtype=bool)),
         SourceMatrix(noise, np.ones_like(noise, dtype=bool))]
    )
    kernel = SimilarityKernel.identity(2)
    sticks = StickWeights.from_v(np.full(K - 1, 0.5))
    # function values consistent with the three-way split at both locations
    F = np.abs(rng.standard_normal((2, N, K - 1))) + 0.1
    for n in range(N):
        F[:, n, truth[n] - 1] = -np.abs(rng.standard_normal(2)) - 0.1
    state = SamplerState(
        F=F,
        sticks=sticks,
        kernel=kernel,
        gram=kernel.gram(),
        alpha=1.0,
        discount=0.0,
        field=assignment_field(F, sticks.thresholds),
    )
    start = partition_from_labels(state.field[1])
    np.testing.assert_array_equal(state.field[0], truth)
    model = MultitaskModel(data, n_clusters=K)
    model.set_assignments(state.field)
    moved = 0
    for it in range(100):
        sweep_F(state, model, rng, "per_object_location")
        if it >= 50 and partition_from_labels(state.field[1]) != start:
            moved += 1
    assert moved >= 25
    assert ari_from_labels(state.field[0], truth) == 1.0


def test_whitened_kernel_pass_targets_prior_under_null_likelihood():
    # given the whitened field, the GP density cancels, so with a constant
    # likelihood the pass must sample the kernel prior: for a two-location
    # similarity kernel that is uniform on (-1, 1)
    state, model = _null_state(T=2, N=2, K=3, seed=13)
    kernel = SimilarityKernel(offdiag=(0.0,))
    state.kernel = kernel
    state.gram = kernel.gram()
    rng = np.random.default_rng(17)
    rhos = np.empty(4000)
    for s in range(4000):
        sweep_F(state, model, rng, "per_object_location")
        slice_sample_kernel_whitened(state, model, rng)
        rhos[s] = state.kernel.free_params()[0]
    assert abs(rhos.mean()) < 0.06
    assert abs((np.abs(rhos) > 0.5).mean() - 0.5) < 0.06


def test_whitened_kernel_pass_keeps_state_consistent():
    rng = np.random.default_rng(23)
    data, _ = _three_cluster_data(rng)
    model = MultitaskModel(data, n_clusters=8)
    kernel = SquaredExponentialKernel(locations=(0.0, 1.0), lengthscale=1.0)
    trace = run(
        model,
        kernel,
        TruncationConfig(K=8, alpha=1.0),
        SamplerOptions(
            iterations=10, burnin=0, seed=24, kernel_interweave=True, init_sweeps=10
        ),
    )
    assert np.all(np.isfinite([rec.loglik for rec in trace.records]))
    assert all(np.isfinite(rec.kernel_params["lengthscale"]) for rec in trace.records)


def test_label_swap_stationary_matches_seat_probabilities():
    # one object, one location, constant likelihood: swap moves alone form a
    # chain over the labels whose stationary law must equal the stick-breaking
    # seat probabilities; a wrong acceptance ratio (e.g. dropping the
    # pair-selection correction) visibly skews it
    K = 3
    v = np.array([0.5, 0.4])
    seat = np.array([0.5, 0.5 * 0.4, 0.5 * 0.6])
    sticks = StickWeights.from_v(v)
    kernel = SimilarityKernel.identity(1)
    rng = np.random.default_rng(3)
    F = rng.standard_normal((1, 1, K - 1))
    state = SamplerState(
        F=F,
        sticks=sticks,
        kernel=kernel,
        gram=kernel.gram(),
        alpha=1.0,
        discount=0.0,
        field=assignment_field(F, sticks.thresholds),
    )
    model = NullModel(n_objects=1, n_locations=1)
    model.set_assignments(state.field)
    counts = np.zeros(K)
    for s in range(60000):
        label_swap_pass(state, model, rng)
        if s >= 1000:
            counts[state.field[0, 0] - 1] += 1
    freqs = counts / counts.sum()
    assert np.abs(freqs - seat).max() < 0.02


def test_label_swap_mixes_free_labels_and_respects_locked_ones():
    # swaps relabel clusters without touching the partition; with an identity
    # kernel the pooled location's label must hop between gauges, while a
    # near-unit cross-location correlation makes any relabel astronomically
    # unlikely, freezing the arrangement the kernel has locked in
    N, K = 9, 5
    truth = np.repeat([1, 2, 3], 3)
    sticks = StickWeights.from_v(np.full(K - 1, 0.5))

    def aligned_state(kernel, rng):
        F = np.abs(rng.standard_normal((2, N, K - 1))) + 0.1
        for n in range(N):
            F[:, n, truth[n] - 1] = -np.abs(rng.standard_normal(2)) - 0.1
        return SamplerState(
            F=F,
            sticks=sticks,
            kernel=kernel,
            gram=kernel.gram(),
            alpha=1.0,
            discount=0.0,
            field=assignment_field(F, sticks.thresholds),
        )

    rng = np.random.default_rng(5)
    free = aligned_state(SimilarityKernel.identity(2), rng)
    model = NullModel(n_objects=N, n_locations=2)
    model.set_assignments(free.field)
    hops = 0
    for _ in range(300):
        before = free.field.copy()
        label_swap_pass(free, model, rng)
        if np.any(free.field != before):
            hops += 1
        assert partition_from_labels(free.field[0]) == partition_from_labels(before[0])
        assert partition_from_labels(free.field[1]) == partition_from_labels(before[1])
    assert hops >= 30

    locked = aligned_state(SimilarityKernel(offdiag=(0.97,)), rng)
    model = NullModel(n_objects=N, n_locations=2)
    model.set_assignments(locked.field)
    start = locked.field.copy()
    for _ in range(300):
        label_swap_pass(locked, model, rng)
    np.testing.assert_array_equal(locked.field, start)


def test_modes_agree_in_stationary_distribution():
    rng = np.random.default_rng(9)
    data, _ = _three_cluster_data(rng)
    means = {}
    for mode in ("per_object", "global", "alternating"):
        model = MultitaskModel(data, n_clusters=8)
        kernel = SquaredExponentialKernel(locations=(0.0, 1.0), lengthscale=1.0)
        trace = run(
            model,
            kernel,
            TruncationConfig(K=8, alpha=1.0),
            SamplerOptions(iterations=120, burnin=40, seed=11, f_mode=mode, init_sweeps=30),
        )
        means[mode] = trace.loglik().mean()
    vals = list(means.values())
    assert max(vals) - min(vals) < 3.0  # nats, generous Monte Carlo margin


# ---------------------------------------------------------------------------
# slice sampler core
# ---------------------------------------------------------------------------

def test_slice_sample_standard_normal_moments():
    rng = np.random.default_rng(10)
    logf = lambda x: -0.5 * x * x
    x = 0.0
    draws = np.empty(20000)
    for i in range(20000):
        x = slice_sample(x, logf, rng)
        draws[i] = x
    assert abs(draws.mean()) < 0.03
    assert abs(draws.var() - 1.0) < 0.05


def test_slice_sample_respects_bounded_support():
    rng = np.random.default_rng(11)
    logf = lambda x: 0.0 if 2.0 <= x <= 3.0 else -math.inf
    x = 2.5
    draws = [x := slice_sample(x, logf, rng) for _ in range(2000)]
    draws = np.array(draws)
    assert draws.min() >= 2.0 and draws.max() <= 3.0
    assert abs(draws.mean() - 2.5) < 0.02


def test_slice_sample_exhausts_on_broken_target():
    rng = np.random.default_rng(12)
    calls = {"n": 0}

    def logf(x):
        # valid at the current point, invalid everywhere else: shrinkage can
        # never terminate and must hit the budget
        calls["n"] += 1
        return 0.0 if calls["n"] == 1 else -math.inf

    with pytest.raises(RuntimeError):
        slice_sample(0.0, logf, rng)


# ---------------------------------------------------------------------------
# v updates
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("alpha,want", [(1.0, 0.5), (3.0, 0.25)])
def test_slice_v_prior_only_moments(alpha, want):
    state, model = _null_state(T=1, N=2, K=4, seed=13)
    state.alpha = alpha
    rng = np.random.default_rng(14)
    total = 0.0
    count = 0
    for _ in range(10_000):
        slice_sample_v(state, model, rng)
        total += state.sticks.v.sum()
        count += len(state.sticks.v)
    assert abs(total / count - want) < 0.02


def test_slice_v_far_f_keeps_assignments():
    state, model = _null_state(T=2, N=4, K=4, seed=15)
    state.F = np.where(state.F > 0, 10.0, -10.0)
    state.field = assignment_field(state.F, state.sticks.thresholds)
    model.set_assignments(state.field)
    before = state.field.copy()
    rng = np.random.default_rng(16)
    for _ in range(20):
        slice_sample_v(state, model, rng)
    np.testing.assert_array_equal(state.field, before)


def test_slice_v_posterior_shifts_with_likelihood():
    # objects pinned to two groups by strongly separated data
    rng = np.random.default_rng(17)
    y = np.repeat([5.0, -5.0], 3)[:, None] + 0.1 * rng.standard_normal((6, 3))
    data = MultitaskData([SourceMatrix(y, np.ones_like(y, dtype=bool))])
    model = MultitaskModel(data, n_clusters=5)
    kernel = SquaredExponentialKernel(locations=(0.0,), lengthscale=1.0)
    trace = run(
        model,
        kernel,
        TruncationConfig(K=5, alpha=1.0),
        SamplerOptions(iterations=200, burnin=50, seed=18, init_sweeps=30),
    )
    counts = [r.cluster_counts[0] for r in trace.records]
    assert np.mean(np.array(counts) == 2) > 0.8


# ---------------------------------------------------------------------------
# kernel updates
# ---------------------------------------------------------------------------

def _state_with_F_from(kernel, N, K, rng, alpha=1.0):
    gram = kernel.gram()
    T = gram.T
    L = gram.cholesky()
    F = np.einsum("ij,jnk->ink", L, rng.standard_normal((T, N, K - 1)))
    v = rng.beta(1.0, alpha, size=K - 1)
    sticks = StickWeights.from_v(v)
    field = assignment_field(F, sticks.thresholds)
    state = SamplerState(
        F=F, sticks=sticks, kernel=kernel, gram=gram, alpha=alpha, discount=0.0, field=field
    )
    model = NullModel(n_objects=N, n_locations=T)
    model.set_assignments(field)
    return state, model


def test_kernel_slice_recovers_se_lengthscale():
    hit = 0
    for seed in range(10):
        rng = np.random.default_rng(100 + seed)
        truth = SquaredExponentialKernel(locations=tuple(map(float, range(7))), lengthscale=2.0)
        state, model = _state_with_F_from(truth, N=30, K=6, rng=rng)
        # start the chain away from the truth
        state.kernel = SquaredExponentialKernel(
            locations=truth.locations, lengthscale=0.5
        )
        state.gram = state.kernel.gram()
        # force the full product: every stick constrained
        state.field = np.full_like(state.field, 6)
        draws = []
        for _ in range(150):
            slice_sample_kernel(state, model, rng)
            draws.append(state.kernel.lengthscale)
        if 1.0 <= np.median(draws[50:]) <= 4.0:
            hit += 1
    assert hit >= 9


def test_kernel_slice_similarity_interval_excludes_zero():
    rng = np.random.default_rng(19)
    truth = SimilarityKernel(offdiag=(0.9,))
    state, model = _state_with_F_from(truth, N=30, K=6, rng=rng)
    state.kernel = SimilarityKernel(offdiag=(0.0,))
    state.gram = state.kernel.gram()
    state.field = np.full_like(state.field, 6)
    draws = []
    for _ in range(200):
        slice_sample_kernel(state, model, rng)
        draws.append(state.kernel.offdiag[0])
    lo, hi = np.percentile(draws[50:], [2.5, 97.5])
    assert lo > 0.0


def test_kernel_slice_never_changes_assignments():
    rng = np.random.default_rng(20)
    kernel = SquaredExponentialKernel(locations=(0.0, 1.0, 2.0), lengthscale=1.0)
    state, model = _state_with_F_from(kernel, N=10, K=6, rng=rng)
    before = state.field.copy()
    for _ in range(30):
        slice_sample_kernel(state, model, rng)
        np.testing.assert_array_equal(state.field, before)
        np.testing.assert_array_equal(
            state.field, assignment_field(state.F, state.sticks.thresholds)
        )


def test_kernel_slice_tree_branches_stay_valid():
    rng = np.random.default_rng(21)
    kernel = TreeKernel.from_newick("((A:0.3,B:0.3):0.7,(C:0.5,D:0.5):0.5);")
    state, model = _state_with_F_from(kernel, N=12, K=5, rng=rng)
    for _ in range(50):
        slice_sample_kernel(state, model, rng)
        assert state.kernel.log_prior_free() == 0.0
        np.testing.assert_allclose(np.diag(state.kernel.gram().sigma), 1.0)


def test_kernel_truncation_matches_integrated_tail():
    # with 2 sticks and max assignment 1, the truncated product equals the
    # full product with the unconstrained stick integrated out; matched seeds
    # must accept the identical value
    rng_draw = np.random.default_rng(22)
    kernel = SquaredExponentialKernel(locations=(0.0, 1.0, 2.0), lengthscale=1.5)
    gram = kernel.gram()
    L = gram.cholesky()
    F = np.einsum("ij,jnk->ink", L, rng_draw.standard_normal((3, 8, 2)))

    def make_target(columns):
        def logf(x):
            cand = SquaredExponentialKernel(locations=kernel.locations, lengthscale=math.exp(x))
            lp = cand.log_prior_free()
            vecs = np.moveaxis(F[:, :, :columns], 0, -1)
            return lp + float(np.sum(cand.gram().mvn_logpdf(vecs)))

        return logf

    truncated = make_target(1)

    def integrated(x):
        # tail stick integrates to one for every candidate kernel
        return truncated(x) + math.log(1.0)

    x0 = math.log(1.5)
    a = slice_sample(x0, truncated, np.random.default_rng(23))
    b = slice_sample(x0, integrated, np.random.default_rng(23))
    assert a == b


def test_kernel_slice_refreshes_unconstrained_sticks():
    rng = np.random.default_rng(24)
    kernel = SquaredExponentialKernel(locations=(0.0, 1.0), lengthscale=1.0)
    state, model = _state_with_F_from(kernel, N=6, K=8, rng=rng)
    state.field = np.ones_like(state.field)  # only stick 1 constrained
    tail_before = state.F[:, :, 1:].copy()
    head_before = state.F[:, :, :1].copy()
    slice_sample_kernel(state, model, rng)
    np.testing.assert_array_equal(state.F[:, :, :1], head_before)
    assert not np.array_equal(state.F[:, :, 1:], tail_before)


# ---------------------------------------------------------------------------
# alpha updates
# ---------------------------------------------------------------------------

def _alpha_posterior_grid(v, grid):
    dens = np.array(
        [
            math.exp(-a) * np.prod(a * (1 - np.asarray(v)) ** (a - 1))
            for a in grid
        ]
    )
    return dens / dens.sum()


def test_alpha_slice_matches_grid_posterior():
    v = np.full(10, 0.5)
    state, model = _null_state(T=1, N=2, K=11, seed=25)
    state.sticks = StickWeights.from_v(v)
    rng = np.random.default_rng(26)
    draws = np.empty(20_000)
    for i in range(draws.size):
        slice_sample_alpha(state, model, rng)
        draws[i] = state.alpha
    edges = np.linspace(0.0, 12.0, 61)
    hist, _ = np.histogram(draws, bins=edges)
    hist = hist / draws.size
    centers = 0.5 * (edges[:-1] + edges[1:])
    grid_mass = _alpha_posterior_grid(v, centers)
    tv = 0.5 * np.sum(np.abs(hist - grid_mass))
    assert tv <= 0.05


def test_alpha_slice_no_sticks_recovers_gamma_prior():
    state, model = _null_state(T=1, N=2, K=2, seed=27)
    state.sticks = StickWeights.from_v(np.empty(0))
    rng = np.random.default_rng(28)
    draws = np.empty(20_000)
    for i in range(draws.size):
        slice_sample_alpha(state, model, rng)
        draws[i] = state.alpha
    # Gamma(1,1): mean 1, variance 1
    assert abs(draws.mean() - 1.0) < 0.05
    assert abs(draws.var() - 1.0) < 0.15


def test_alpha_posterior_rises_for_smaller_sticks():
    big = np.full(8, 0.7)
    small = np.full(8, 0.2)
    grid = np.linspace(0.01, 15.0, 3000)
    mean_big = np.sum(grid * _alpha_posterior_grid(big, grid))
    mean_small = np.sum(grid * _alpha_posterior_grid(small, grid))
    assert mean_small > mean_big

    means = {}
    for name, v in (("big", big), ("small", small)):
        state, model = _null_state(T=1, N=2, K=9, seed=29)
        state.sticks = StickWeights.from_v(v)
        rng = np.random.default_rng(30)
        draws = np.empty(5000)
        for i in range(draws.size):
            slice_sample_alpha(state, model, rng)
            draws[i] = state.alpha
        means[name] = draws.mean()
    assert means["small"] > means["big"]
    assert means["small"] == pytest.approx(mean_small, rel=0.1)
    assert means["big"] == pytest.approx(mean_big, rel=0.1)


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------

def test_init_assignments_identical_across_locations():
    rng = np.random.default_rng(31)
    data, _ = _three_cluster_data(rng)
    model = MultitaskModel(data, n_clusters=8)
    kernel = SquaredExponentialKernel(locations=(0.0, 1.0), lengthscale=1.0)
    state = init_from_shared_dpm(
        model, TruncationConfig(K=8, alpha=1.0), kernel, np.random.default_rng(32), 40
    )
    assert np.all(state.field == state.field[0])


def test_init_state_reproduces_dpm_partition():
    rng = np.random.default_rng(33)
    data, _ = _three_cluster_data(rng)
    model = MultitaskModel(data, n_clusters=8)
    kernel = SquaredExponentialKernel(locations=(0.0, 1.0), lengthscale=1.0)
    state = init_from_shared_dpm(
        model, TruncationConfig(K=8, alpha=1.0), kernel, np.random.default_rng(34), 40
    )
    recomputed = assignment_field(state.F, state.sticks.thresholds)
    np.testing.assert_array_equal(recomputed, state.field)
    # blocks numbered by decreasing size
    sizes = np.bincount(state.field[0])[1:]
    active = sizes[sizes > 0]
    assert np.all(np.diff(active) <= 0)


def test_init_recovers_three_clusters():
    hits = 0
    for seed in range(10):
        rng = np.random.default_rng(200 + seed)
        data, truth = _three_cluster_data(rng, N=30, D=5)
        model = MultitaskModel(data, n_clusters=10)
        kernel = SquaredExponentialKernel(locations=(0.0, 1.0), lengthscale=1.0)
        state = init_from_shared_dpm(
            model, TruncationConfig(K=10, alpha=1.0), kernel, np.random.default_rng(seed), 50
        )
        if ari_from_labels(state.field[0], truth) >= 0.9:
            hits += 1
    assert hits >= 9


def test_init_network_pooled_gibbs():
    rng = np.random.default_rng(35)
    N = 16
    truth = np.repeat([1, 2], N // 2)
    snaps = []
    for _ in range(3):
        p = np.where(truth[:, None] == truth[None, :], 0.85, 0.05)
        vals = (rng.random((N, N)) < p).astype(int)
        vals = np.triu(vals, 1)
        vals = vals + vals.T
        snaps.append(Snapshot(vals, np.ones((N, N), dtype=bool)))
    data = NetworkData(snaps, symmetric=True)
    model = NetworkModel(data, n_clusters=8)
    pooled = _pooled_model(model)
    labels, _ = run_dpm_gibbs(pooled, 1.0, 40, np.random.default_rng(36))
    assert ari_from_labels(labels, truth) >= 0.9


# ---------------------------------------------------------------------------
# run()
# ---------------------------------------------------------------------------

def _record_key(r):
    return (
        r.iteration,
        r.loglik,
        r.log_prior_sticks,
        r.log_prior_alpha,
        r.log_prior_kernel,
        r.alpha,
        tuple(sorted(r.kernel_params.items())),
        tuple(r.cluster_counts),
        r.assignments.tobytes(),
    )


def test_run_identical_seeds_identical_traces():
    rng = np.random.default_rng(37)
    data, _ = _three_cluster_data(rng)

    def chain():
        model = MultitaskModel(data, n_clusters=8)
        kernel = SquaredExponentialKernel(locations=(0.0, 1.0), lengthscale=1.0)
        return run(
            model,
            kernel,
            TruncationConfig(K=8, alpha=1.0),
            SamplerOptions(iterations=30, burnin=10, seed=99, init_sweeps=20),
        )

    a, b = chain(), chain()
    assert [_record_key(r) for r in a.records] == [_record_key(r) for r in b.records]


def test_run_prior_only_matches_crp_marginal():
    # NullModel chain with alpha held at 1: retained per-location partitions
    # must follow CRP(1)
    model = NullModel(n_objects=3, n_locations=1)
    kernel = SquaredExponentialKernel(locations=(0.0,), lengthscale=1.0)
    trace = run(
        model,
        kernel,
        TruncationConfig(K=12, alpha=1.0),
        SamplerOptions(
            iterations=12_500,
            burnin=500,
            seed=41,
            sample_kernel=False,
            sample_alpha=False,
            init="prior",
        ),
    )
    counts = {}
    for r in trace.records:
        p = partition_from_labels(r.assignments[0])
        counts[p] = counts.get(p, 0) + 1
    n = len(trace)

    def all_partitions(items):
        items = list(items)
        if not items:
            yield frozenset()
            return
        first, rest = items[0], items[1:]
        for sub in all_partitions(rest):
            yield frozenset(sub | {frozenset({first})})
            for block in sub:
                others = sub - {block}
                yield frozenset(others | {block | {first}})

    tv = 0.5 * sum(
        abs(counts.get(p, 0) / n - math.exp(crp_log_prob(p, 1.0)))
        for p in all_partitions(range(3))
    )
    assert tv <= 0.02


def test_run_debug_checks_pass_throughout():
    rng = np.random.default_rng(43)
    data, _ = _three_cluster_data(rng)
    model = MultitaskModel(data, n_clusters=6)
    kernel = SquaredExponentialKernel(locations=(0.0, 1.0), lengthscale=1.0)
    run(
        model,
        kernel,
        TruncationConfig(K=6, alpha=1.0),
        SamplerOptions(iterations=25, burnin=5, seed=44, debug_checks=True, init_sweeps=20),
    )


def test_run_network_debug_checks_pass():
    rng = np.random.default_rng(45)
    N = 10
    truth = np.repeat([1, 2], 5)
    snaps = []
    for _ in range(3):
        p = np.where(truth[:, None] == truth[None, :], 0.8, 0.1)
        vals = (rng.random((N, N)) < p).astype(int)
        vals = np.triu(vals, 1)
        vals = vals + vals.T
        snaps.append(Snapshot(vals, np.ones((N, N), dtype=bool)))
    data = NetworkData(snaps, symmetric=True)
    model = NetworkModel(data, n_clusters=6)
    kernel = SquaredExponentialKernel(locations=(0.0, 1.0, 2.0), lengthscale=1.5)
    run(
        model,
        kernel,
        TruncationConfig(K=6, alpha=1.0),
        SamplerOptions(iterations=25, burnin=5, seed=46, debug_checks=True, init_sweeps=20),
    )


def test_options_validation():
    with pytest.raises(ValueError):
        SamplerOptions(iterations=10, burnin=10)
    with pytest.raises(ValueError):
        SamplerOptions(thin=0)
    with pytest.raises(ValueError):
        SamplerOptions(f_mode="nope")
    with pytest.raises(ValueError):
        SamplerOptions(init="nope")
    with pytest.raises(ValueError):
        SamplerOptions(kernel_delay=-1)


def test_kernel_delay_stages_kernel_updates():
    # with a delay of d, the kernel must sit at its initial value for the
    # first d iterations and move afterwards
    rng = np.random.default_rng(31)
    data, _ = _three_cluster_data(rng)
    model = MultitaskModel(data, n_clusters=8)
    kernel = SquaredExponentialKernel(locations=(0.0, 1.0), lengthscale=1.0)
    trace = run(
        model,
        kernel,
        TruncationConfig(K=8, alpha=1.0),
        SamplerOptions(
            iterations=12, burnin=0, seed=32, kernel_delay=6, init_sweeps=10
        ),
    )
    ls = trace.kernel_param("lengthscale")
    assert np.all(ls[:6] == 1.0)
    assert np.any(ls[6:] != 1.0)


def test_trace_persistence_round_trip(tmp_path):
    rng = np.random.default_rng(47)
    data, _ = _three_cluster_data(rng)
    model = MultitaskModel(data, n_clusters=6)
    kernel = SquaredExponentialKernel(locations=(0.0, 1.0), lengthscale=1.0)
    trace = run(
        model,
        kernel,
        TruncationConfig(K=6, alpha=1.0),
        SamplerOptions(iterations=20, burnin=10, seed=48, init_sweeps=15),
    )
    jl = tmp_path / "trace.jsonl"
    trace.write_jsonl(jl)
    rows = [json.loads(line) for line in jl.read_text().splitlines()]
    assert len(rows) == len(trace)
    assert rows[0]["iteration"] == trace.records[0].iteration
    assert rows[-1]["loglik"] == pytest.approx(trace.records[-1].loglik)

    ac = tmp_path / "assignments.csv"
    trace.write_assignments_csv(ac)
    lines = ac.read_text().splitlines()
    assert lines[0] == "object,location_0,location_1"
    assert len(lines) == 1 + 12

    kp = tmp_path / "kernel_posterior.csv"
    trace.write_kernel_posterior_csv(kp)
    lines = kp.read_text().splitlines()
    assert lines[0] == "parameter,mean,ci_2.5,ci_97.5"
    assert lines[1].startswith("lengthscale,")
