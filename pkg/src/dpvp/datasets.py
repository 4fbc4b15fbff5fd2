"""Synthetic data generators, CSV loaders, holdout plans, and heldout scoring.

The on-disk interchange format is one CSV per matrix (header row naming the
columns, first column an object label, empty cell = missing entry) plus a
manifest of key=value lines tying the matrices to covariate values.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import logsumexp

from .kernels import SquaredExponentialKernel
from .likelihoods import (
    MultitaskData,
    MultitaskModel,
    NetworkData,
    NetworkModel,
    Snapshot,
    SourceMatrix,
)
from .mcmc import SamplerOptions, Trace, TraceRecord, run
from .partitions import TruncationConfig, sample_prior

VDB_TIMES = (0.0, 2.0, 4.0, 6.0, 9.0, 12.0, 15.0)  # weeks


@dataclass
class DatasetBundle:
    """A dataset plus everything needed to fit and score it.

    covariates holds one kernel input value per source/snapshot; truth, when
    present, is the generating assignment field (n_parts, N).
    """

    kind: str  # multitask | network
    data: object
    covariates: tuple
    truth: np.ndarray = None
    standardization: list = None

    def __post_init__(self):
        if self.kind not in ("multitask", "network"):
            raise ValueError(f"unknown dataset kind {self.kind!r}")


@dataclass(frozen=True)
class Standardization:
    """Per-dimension affine map fitted on the observed entries of one source."""

    mean: np.ndarray
    std: np.ndarray

    def apply(self, values):
        return (values - self.mean) / self.std

    def invert(self, values):
        return values * self.std + self.mean


# ---------------------------------------------------------------------------
# synthetic generators
# ---------------------------------------------------------------------------

def three_cluster_labels(n_objects: int = 30) -> np.ndarray:
    """Three equal blocks over n_objects, labelled 1, 2, 3."""
    if n_objects % 3:
        raise ValueError("n_objects must be divisible by 3")
    return np.repeat(np.array([1, 2, 3], dtype=np.int64), n_objects // 3)


def _three_cluster_source(truth, n_dims, spread, rng) -> SourceMatrix:
    means = np.array([-spread, 0.0, spread])[truth - 1]
    y = means[:, None] + rng.standard_normal((len(truth), n_dims))
    return SourceMatrix(y, np.ones_like(y, dtype=bool))


def gen_gaussian_clusters(rng) -> DatasetBundle:
    """Single source: 30 objects in three equal clusters at -3, 0, +3 per
    dimension, unit isotropic noise, 5 dimensions."""
    truth = three_cluster_labels(30)
    src = _three_cluster_source(truth, 5, 3.0, rng)
    data = MultitaskData([src], source_locations=(0,))
    return DatasetBundle("multitask", data, (0.0,), truth=truth[None, :])


def gen_multitask_t3(rng) -> DatasetBundle:
    """Three sources over 30 shared objects: the first two repeat the
    three-cluster structure, the third is a single standard-normal cluster."""
    truth = three_cluster_labels(30)
    sources = [
        _three_cluster_source(truth, 5, 3.0, rng),
        _three_cluster_source(truth, 5, 3.0, rng),
    ]
    y3 = rng.standard_normal((30, 5))
    sources.append(SourceMatrix(y3, np.ones_like(y3, dtype=bool)))
    data = MultitaskData(sources, source_locations=(0, 1, 2))
    truth_field = np.vstack([truth, truth, np.ones(30, dtype=np.int64)])
    return DatasetBundle("multitask", data, (0.0, 1.0, 2.0), truth=truth_field)


def default_evolution_schedule(n_objects: int = 30, n_times: int = 6) -> np.ndarray:
    """Two flanking blocks shrink as a third grows between them.

    At step j the middle block holds the 4j innermost objects; the flanks
    keep the rest. Block sizes run 15/15/0 down to 5/5/20 over six steps.
    """
    if n_objects % 2:
        raise ValueError("n_objects must be even")
    half = n_objects // 2
    schedule = np.empty((n_times, n_objects), dtype=np.int64)
    for j in range(n_times):
        g = min(2 * j, half - 1)
        schedule[j, : half - g] = 1
        schedule[j, half - g : half + g] = 3
        schedule[j, half + g :] = 2
    return schedule


def _links_from_blocks(labels, p_in, p_out, rng) -> Snapshot:
    n = len(labels)
    same = labels[:, None] == labels[None, :]
    p = np.where(same, p_in, p_out)
    draw = (rng.random((n, n)) < p).astype(np.int64)
    vals = np.triu(draw, 1)
    vals = vals + vals.T
    mask = ~np.eye(n, dtype=bool)
    return Snapshot(vals, mask)


def gen_evolving_network(
    rng, schedule=None, p_in: float = 0.9, p_out: float = 0.05, times=None
) -> DatasetBundle:
    """Symmetric binary snapshots drawn from a block schedule.

    Within-block pairs link with probability p_in, between-block with p_out;
    the diagonal is unobserved. Defaults follow the six-step two-blocks-to-
    three narrative over 30 objects.
    """
    if not 0.0 <= p_out <= p_in <= 1.0:
        raise ValueError("need 0 <= p_out <= p_in <= 1")
    schedule = default_evolution_schedule() if schedule is None else np.asarray(schedule)
    if schedule.ndim != 2:
        raise ValueError("schedule must be (n_times, n_objects)")
    if times is None:
        times = tuple(float(t) for t in range(schedule.shape[0]))
    if len(times) != schedule.shape[0]:
        raise ValueError("one time covariate per schedule row")
    snaps = [_links_from_blocks(row, p_in, p_out, rng) for row in schedule]
    data = NetworkData(snaps, symmetric=True, snapshot_locations=tuple(range(len(snaps))))
    return DatasetBundle("network", data, tuple(times), truth=schedule.copy())


def gen_se_surrogate_network(
    rng,
    n_objects: int = 32,
    times=VDB_TIMES,
    lengthscale: float = 4.0,
    alpha: float = 2.0,
    K: int = 10,
    p_in: float = 0.8,
    p_out: float = 0.15,
) -> DatasetBundle:
    """Network series whose partitions evolve under a squared-exponential
    prior: the generating schedule is a draw from the partition process
    itself, links then follow the block schedule."""
    kernel = SquaredExponentialKernel(locations=tuple(times), lengthscale=lengthscale)
    config = TruncationConfig(K=K, alpha=alpha)
    schedule = sample_prior(config, kernel.gram(), n_objects, rng).labels
    return gen_evolving_network(rng, schedule=schedule, p_in=p_in, p_out=p_out, times=times)


# ---------------------------------------------------------------------------
# standardization
# ---------------------------------------------------------------------------

def standardize_source(src: SourceMatrix):
    """Zero mean, unit variance per dimension over the observed entries."""
    w = src.mask.astype(float)
    count = w.sum(axis=0)
    if np.any(count < 2):
        bad = int(np.argmin(count))
        raise ValueError(f"column {bad} has fewer than 2 observed entries")
    vals = np.where(src.mask, src.values, 0.0)
    mean = vals.sum(axis=0) / count
    var = (w * (vals - mean) ** 2).sum(axis=0) / count
    if np.any(var < 1e-24):
        bad = int(np.argmin(var))
        raise ValueError(f"column {bad} is constant; cannot standardize")
    std = np.sqrt(var)
    out = np.where(src.mask, (src.values - mean) / std, np.nan)
    return SourceMatrix(out, src.mask.copy()), Standardization(mean, std)


# ---------------------------------------------------------------------------
# CSV matrices
# ---------------------------------------------------------------------------

def write_matrix_csv(path, values, mask=None, col_labels=None, integer=False):
    values = np.asarray(values)
    n, d = values.shape
    mask = np.ones((n, d), dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if col_labels is None:
        col_labels = [f"c{j}" for j in range(d)]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["object"] + list(col_labels))
        for i in range(n):
            row = [str(i)]
            for j in range(d):
                if not mask[i, j]:
                    row.append("")
                elif integer:
                    row.append(str(int(values[i, j])))
                else:
                    row.append(repr(float(values[i, j])))
            writer.writerow(row)


def _read_matrix_csv(path):
    """Numeric matrix with missing entries; returns (values, mask, col_labels).

    Unparseable cells raise with the file, line, and column named. Missing
    entries hold nan in values and False in mask.
    """
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty file") from None
        col_labels = header[1:]
        width = len(col_labels)
        for ln, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != width + 1:
                raise ValueError(
                    f"{path}, line {ln}: expected {width + 1} fields, got {len(row)}"
                )
            parsed = []
            for cj, cell in enumerate(row[1:], start=2):
                text = cell.strip()
                if text == "":
                    parsed.append(math.nan)
                    continue
                try:
                    parsed.append(float(text))
                except ValueError:
                    raise ValueError(
                        f"{path}, line {ln}, column {cj}: "
                        f"could not parse {cell!r} as a number"
                    ) from None
            rows.append(parsed)
    values = np.array(rows, dtype=float)
    if values.size == 0:
        raise ValueError(f"{path}: no data rows")
    mask = ~np.isnan(values)
    return values, mask, col_labels


def load_multitask_csv(paths, locations=None, standardize=True) -> DatasetBundle:
    """One CSV per source over a shared object set; sources are standardized
    per dimension unless disabled."""
    sources = []
    for path in paths:
        values, mask, _ = _read_matrix_csv(path)
        sources.append(SourceMatrix(values, mask))
    n_set = {s.values.shape[0] for s in sources}
    if len(n_set) > 1:
        raise ValueError(f"sources disagree on object count: {sorted(n_set)}")
    if locations is None:
        locations = tuple(float(t) for t in range(len(sources)))
    if len(locations) != len(sources):
        raise ValueError("one covariate per source")
    params = None
    if standardize:
        params = []
        fitted = []
        for src in sources:
            out, st = standardize_source(src)
            fitted.append(out)
            params.append(st)
        sources = fitted
    data = MultitaskData(sources, source_locations=tuple(range(len(sources))))
    return DatasetBundle(
        "multitask", data, tuple(locations), standardization=params
    )


def load_network_csv(paths, times=None, symmetric=True) -> DatasetBundle:
    """One square CSV per snapshot; observed entries must be 0 or 1."""
    snaps = []
    for path in paths:
        values, mask, _ = _read_matrix_csv(path)
        if values.shape[0] != values.shape[1]:
            raise ValueError(f"{path}: snapshot must be square, got {values.shape}")
        observed = values[mask]
        if observed.size and not np.isin(observed, (0.0, 1.0)).all():
            bad = observed[~np.isin(observed, (0.0, 1.0))][0]
            raise ValueError(f"{path}: non-binary network entry {bad!r}")
        snaps.append(Snapshot(np.where(mask, values, 0.0).astype(np.int64), mask))
    n_set = {s.values.shape[0] for s in snaps}
    if len(n_set) > 1:
        raise ValueError(f"snapshots disagree on object count: {sorted(n_set)}")
    if times is None:
        times = tuple(float(t) for t in range(len(snaps)))
    if len(times) != len(snaps):
        raise ValueError("one time covariate per snapshot")
    data = NetworkData(snaps, symmetric=symmetric, snapshot_locations=tuple(range(len(snaps))))
    return DatasetBundle("network", data, tuple(times))


# ---------------------------------------------------------------------------
# manifests and truth files
# ---------------------------------------------------------------------------

def write_truth_csv(path, truth):
    truth = np.asarray(truth)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["object"] + [f"location_{t}" for t in range(truth.shape[0])])
        for n in range(truth.shape[1]):
            writer.writerow([n] + [int(truth[t, n]) for t in range(truth.shape[0])])


def read_truth_csv(path) -> np.ndarray:
    values, mask, _ = _read_matrix_csv(path)
    if not mask.all():
        raise ValueError(f"{path}: truth files cannot have missing entries")
    return values.T.astype(np.int64)


def write_dataset(outdir, bundle: DatasetBundle) -> str:
    """Write a bundle as CSVs plus a manifest; returns the manifest path."""
    os.makedirs(outdir, exist_ok=True)
    lines = [f"kind={bundle.kind}"]
    if bundle.kind == "multitask":
        for i, (src, cov) in enumerate(zip(bundle.data.sources, bundle.covariates)):
            name = f"source_{i + 1}.csv"
            write_matrix_csv(os.path.join(outdir, name), src.values, src.mask)
            lines.append(f"source={name},{cov!r}")
    else:
        lines.append(f"symmetric={'true' if bundle.data.symmetric else 'false'}")
        for i, (snap, cov) in enumerate(zip(bundle.data.snapshots, bundle.covariates)):
            name = f"snapshot_{i + 1}.csv"
            write_matrix_csv(
                os.path.join(outdir, name), snap.values, snap.mask, integer=True
            )
            lines.append(f"snapshot={name},{cov!r}")
    if bundle.truth is not None:
        write_truth_csv(os.path.join(outdir, "truth.csv"), bundle.truth)
        lines.append("truth=truth.csv")
    manifest = os.path.join(outdir, "manifest.txt")
    with open(manifest, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    return manifest


def _parse_manifest(path):
    entries = []
    meta = {}
    with open(path) as fh:
        for ln, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"{path}, line {ln}: expected key=value")
            key, value = line.split("=", 1)
            key = key.strip()
            value = value.strip()
            if key in ("source", "snapshot", "wave"):
                entries.append((key, value))
            else:
                meta[key] = value
    return meta, entries


def load_dataset(manifest_path, standardize=True) -> DatasetBundle:
    """Load a dataset named by a manifest of key=value lines.

    kind=multitask lists source=<csv>,<covariate> lines; kind=network lists
    snapshot=<csv>,<covariate> lines plus symmetric=true|false; kind=vdb
    lists wave=<csv> lines of raw 0-5 survey codes. Paths are relative to
    the manifest.
    """
    meta, entries = _parse_manifest(manifest_path)
    base = os.path.dirname(os.path.abspath(manifest_path))
    kind = meta.get("kind")
    if kind not in ("multitask", "network", "vdb"):
        raise ValueError(f"{manifest_path}: unknown or missing kind {kind!r}")

    def split_entry(key_wanted, with_cov=True):
        out = []
        for key, value in entries:
            if key != key_wanted:
                raise ValueError(
                    f"{manifest_path}: unexpected {key}= line in a {kind} manifest"
                )
            if with_cov:
                if "," not in value:
                    raise ValueError(
                        f"{manifest_path}: {key}= lines need <path>,<covariate>"
                    )
                p, cov = value.rsplit(",", 1)
                out.append((os.path.join(base, p.strip()), float(cov)))
            else:
                out.append((os.path.join(base, value), None))
        if not out:
            raise ValueError(f"{manifest_path}: no {key_wanted}= lines")
        return out

    truth = None
    if "truth" in meta:
        truth = read_truth_csv(os.path.join(base, meta["truth"]))
    if kind == "multitask":
        named = split_entry("source")
        bundle = load_multitask_csv(
            [p for p, _ in named], [c for _, c in named], standardize=standardize
        )
    elif kind == "network":
        named = split_entry("snapshot")
        symmetric = meta.get("symmetric", "true").lower() != "false"
        bundle = load_network_csv(
            [p for p, _ in named], [c for _, c in named], symmetric=symmetric
        )
    else:
        named = split_entry("wave", with_cov=False)
        waves = []
        for p, _ in named:
            values, mask, _ = _read_matrix_csv(p)
            waves.append(np.where(mask, values, math.nan))
        bundle = vdb_preprocess(waves)
    bundle.truth = truth
    return bundle


# ---------------------------------------------------------------------------
# survey preprocessing
# ---------------------------------------------------------------------------

def vdb_preprocess(waves, times=VDB_TIMES) -> DatasetBundle:
    """Binarize and symmetrize seven waves of 0-5 friendship survey codes.

    Codes 1 (best friendship), 2 (friendship), 3 (friendly) map to a link;
    4 (neutral), 0 (unknown person), 5 (troubled) map to a non-link; 6 and 9
    (non-response) and empty cells are missing. A pair links if either
    direction reports a link; it is observed if either direction responded;
    the diagonal is always missing.
    """
    if len(waves) != len(times):
        raise ValueError(f"expected {len(times)} waves, got {len(waves)}")
    snaps = []
    for w, wave in enumerate(waves):
        wave = np.asarray(wave, dtype=float)
        if wave.ndim != 2 or wave.shape[0] != wave.shape[1]:
            raise ValueError(f"wave {w}: matrix must be square, got {wave.shape}")
        if wave.shape[0] != 32:
            raise ValueError(f"wave {w}: expected 32 individuals, got {wave.shape[0]}")
        known = np.isnan(wave) | np.isin(wave, (0, 1, 2, 3, 4, 5, 6, 9))
        if not known.all():
            bad = wave[~known][0]
            raise ValueError(f"wave {w}: unknown survey code {bad!r}")
        responded = ~(np.isnan(wave) | np.isin(wave, (6, 9)))
        link = np.isin(wave, (1, 2, 3))
        observed = (responded | responded.T) & ~np.eye(32, dtype=bool)
        vals = ((link & responded) | (link & responded).T).astype(np.int64)
        snaps.append(Snapshot(np.where(observed, vals, 0), observed))
    data = NetworkData(snaps, symmetric=True, snapshot_locations=tuple(range(len(snaps))))
    return DatasetBundle("network", data, tuple(times))


# ---------------------------------------------------------------------------
# holdout plans
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class HoldoutPlan:
    """Per-repeat heldout masks over a dataset's observed entries.

    Entries are drawn without replacement; within each run of floor(1/fraction)
    consecutive repeats the masks are pairwise disjoint.
    """

    fraction: float
    n_repeats: int
    seed: int
    masks: tuple  # per repeat: tuple over parts of boolean arrays, True = held out

    @classmethod
    def _build(cls, fraction, n_repeats, seed, shapes, eligible, mark):
        if not 0.0 < fraction < 1.0:
            raise ValueError("fraction must lie in (0, 1)")
        if n_repeats < 1:
            raise ValueError("need at least one repeat")
        M = len(eligible)
        m = int(round(fraction * M))
        if m < 1:
            raise ValueError(f"fraction {fraction} selects no entries out of {M}")
        per_block = max(1, min(int(1.0 / fraction), M // m))
        rng = np.random.default_rng(seed)
        masks = []
        perm = None
        for r in range(n_repeats):
            within = r % per_block
            if within == 0:
                perm = rng.permutation(M)
            chosen = perm[within * m : (within + 1) * m]
            parts = [np.zeros(s, dtype=bool) for s in shapes]
            for e in chosen:
                mark(parts, eligible[e])
            masks.append(tuple(parts))
        return cls(fraction, n_repeats, seed, tuple(masks))

    @classmethod
    def for_multitask(cls, data: MultitaskData, fraction=0.1, n_repeats=10, seed=0, sources=None):
        """Hold out observed cells of the named sources (default: all)."""
        scope = range(len(data.sources)) if sources is None else sources
        scope = set(scope)
        eligible = []
        for s, src in enumerate(data.sources):
            if s not in scope:
                continue
            for i, j in zip(*np.nonzero(src.mask)):
                eligible.append((s, int(i), int(j)))
        shapes = [src.mask.shape for src in data.sources]

        def mark(parts, entry):
            s, i, j = entry
            parts[s][i, j] = True

        return cls._build(fraction, n_repeats, seed, shapes, eligible, mark)

    @classmethod
    def for_network(cls, data: NetworkData, fraction=0.1, n_repeats=10, seed=0):
        """Hold out observed off-diagonal entries; symmetric data is held out
        by unordered pair (both directions masked together)."""
        eligible = []
        N = data.n_objects
        for t, snap in enumerate(data.snapshots):
            obs = snap.mask & ~np.eye(N, dtype=bool)
            if data.symmetric:
                obs = obs & np.triu(np.ones((N, N), dtype=bool), k=1)
            for i, j in zip(*np.nonzero(obs)):
                eligible.append((t, int(i), int(j)))
        shapes = [snap.mask.shape for snap in data.snapshots]
        symmetric = data.symmetric

        def mark(parts, entry):
            t, i, j = entry
            parts[t][i, j] = True
            if symmetric:
                parts[t][j, i] = True

        return cls._build(fraction, n_repeats, seed, shapes, eligible, mark)

    def train(self, data, r: int):
        """The dataset with repeat r's heldout entries removed from the masks."""
        held = self.masks[r]
        if isinstance(data, MultitaskData):
            sources = [
                SourceMatrix(src.values, src.mask & ~h)
                for src, h in zip(data.sources, held)
            ]
            return MultitaskData(sources, source_locations=data.source_locations)
        snaps = [
            Snapshot(snap.values, snap.mask & ~h)
            for snap, h in zip(data.snapshots, held)
        ]
        return NetworkData(
            snaps, symmetric=data.symmetric, snapshot_locations=data.snapshot_locations
        )

    def heldout(self, data, r: int) -> list:
        """Repeat r's heldout entries as (part, i, j, value) tuples.

        Symmetric network entries appear once, as their upper-triangle pair.
        """
        held = self.masks[r]
        out = []
        if isinstance(data, MultitaskData):
            for s, (src, h) in enumerate(zip(data.sources, held)):
                for i, j in zip(*np.nonzero(h & src.mask)):
                    out.append((s, int(i), int(j), float(src.values[i, j])))
            return out
        N = data.n_objects
        for t, (snap, h) in enumerate(zip(data.snapshots, held)):
            sel = h & snap.mask & ~np.eye(N, dtype=bool)
            if data.symmetric:
                sel = sel & np.triu(np.ones((N, N), dtype=bool), k=1)
            for i, j in zip(*np.nonzero(sel)):
                out.append((t, int(i), int(j), int(snap.values[i, j])))
        return out


# ---------------------------------------------------------------------------
# heldout scoring
# ---------------------------------------------------------------------------

def heldout_log_predictive(trace: Trace, model, entries) -> float:
    """Per-entry mean log posterior predictive, averaged over retained samples.

    Each entry's predictive is the arithmetic mean over retained samples of
    the collapsed predictive under that sample's assignments; the score is
    the mean over entries of its log. The model must hold the training data
    the trace was fitted on.
    """
    snapshots = trace.assignments()
    if not snapshots:
        raise ValueError("trace holds no assignment snapshots")
    if not entries:
        raise ValueError("no heldout entries to score")
    S = len(snapshots)
    logp = np.empty((S, len(entries)))
    for s, field_s in enumerate(snapshots):
        model.set_assignments(field_s)
        for e, (part, i, j, y) in enumerate(entries):
            logp[s, e] = model.heldout_log_predictive(part, i, j, y)
    return float(np.mean(logsumexp(logp, axis=0) - math.log(S)))


# ---------------------------------------------------------------------------
# baselines
# ---------------------------------------------------------------------------

def _model_for(data, K: int):
    if isinstance(data, MultitaskData):
        return MultitaskModel(data, n_clusters=K)
    if isinstance(data, NetworkData):
        return NetworkModel(data, n_clusters=K)
    raise TypeError(f"unsupported data type {type(data).__name__}")


def _at_single_location(data):
    if isinstance(data, MultitaskData):
        return MultitaskData(list(data.sources), source_locations=(0,) * len(data.sources))
    return NetworkData(
        list(data.snapshots),
        symmetric=data.symmetric,
        snapshot_locations=(0,) * len(data.snapshots),
    )


def _parts(data):
    if isinstance(data, MultitaskData):
        for src in data.sources:
            yield MultitaskData([src], source_locations=(0,))
    else:
        for snap in data.snapshots:
            yield NetworkData([snap], symmetric=data.symmetric, snapshot_locations=(0,))


def _identity_locations(data):
    locs = (
        data.source_locations if isinstance(data, MultitaskData) else data.snapshot_locations
    )
    return tuple(locs) == tuple(range(len(locs)))


def fit_baseline(kind: str, data, config: TruncationConfig, options: SamplerOptions) -> Trace:
    """The two ends of the coupling spectrum, in the common trace format.

    shared: one chain with every source/snapshot at a single latent location
    (one partition, per-part collapsed parameters). independent: one
    single-location chain per part, records stitched side by side so that
    row tau of a stitched assignment snapshot is part tau's labelling.
    """
    unit_kernel = SquaredExponentialKernel(locations=(0.0,), lengthscale=1.0)
    opts = replace(options, sample_kernel=False)
    if kind == "shared":
        trace = run(_model_for(_at_single_location(data), config.K), unit_kernel, config, opts)
        trace.meta["baseline"] = "shared"
        return trace
    if kind != "independent":
        raise ValueError(f"unknown baseline kind {kind!r}")
    if not _identity_locations(data):
        raise ValueError("independent baseline expects one location per part, in order")
    traces = []
    for tau, part in enumerate(_parts(data)):
        part_opts = replace(opts, seed=opts.seed + 1_000_003 * (tau + 1))
        traces.append(run(_model_for(part, config.K), unit_kernel, config, part_opts))
    return _stitch_independent(traces)


def _stitch_independent(traces) -> Trace:
    out = Trace({"baseline": "independent", "chains": [t.meta for t in traces]})
    for recs in zip(*(t.records for t in traces)):
        have_assign = all(r.assignments is not None for r in recs)
        stacked = np.vstack([r.assignments for r in recs]) if have_assign else None
        out.append(
            TraceRecord(
                iteration=recs[0].iteration,
                loglik=float(sum(r.loglik for r in recs)),
                log_prior_sticks=float(sum(r.log_prior_sticks for r in recs)),
                log_prior_alpha=float(sum(r.log_prior_alpha for r in recs)),
                log_prior_kernel=float(sum(r.log_prior_kernel for r in recs)),
                alpha=float(np.mean([r.alpha for r in recs])),
                kernel_params={},
                cluster_counts=[r.cluster_counts[0] for r in recs],
                assignments=stacked,
            )
        )
    out.final_state = None
    return out


# ---------------------------------------------------------------------------
# evaluation harness
# ---------------------------------------------------------------------------

@dataclass
class EvalResult:
    method: str
    mean: float
    stderr: float
    scores: list = field(default_factory=list)


METHOD_NAMES = ("independent", "shared", "mcm", "ecs")


def evaluate_methods(
    data, methods, config: TruncationConfig, options: SamplerOptions, plan: HoldoutPlan, kernel=None
) -> list:
    """Heldout log predictive per method: mean and stderr over repeats.

    mcm/ecs fit the full coupled model with the supplied kernel; the two
    baselines ignore it. All methods share each repeat's train/heldout split
    and base seed.
    """
    for m in methods:
        if m not in METHOD_NAMES:
            raise ValueError(f"unknown method {m!r}")
        if m in ("mcm", "ecs") and kernel is None:
            raise ValueError(f"method {m!r} needs a kernel")
    scores = {m: [] for m in methods}
    for r in range(plan.n_repeats):
        train = plan.train(data, r)
        entries = plan.heldout(data, r)
        opts = replace(options, seed=options.seed + 7919 * r)
        for m in methods:
            if m in ("mcm", "ecs"):
                trace = run(_model_for(train, config.K), kernel, config, opts)
                score_model = _model_for(train, config.K)
            elif m == "shared":
                trace = fit_baseline("shared", train, config, opts)
                score_model = _model_for(_at_single_location(train), config.K)
            else:
                trace = fit_baseline("independent", train, config, opts)
                score_model = _model_for(train, config.K)
            scores[m].append(heldout_log_predictive(trace, score_model, entries))
    results = []
    for m in methods:
        vals = np.array(scores[m])
        stderr = float(vals.std(ddof=1) / math.sqrt(len(vals))) if len(vals) > 1 else 0.0
        results.append(EvalResult(m, float(vals.mean()), stderr, [float(v) for v in vals]))
    return results
