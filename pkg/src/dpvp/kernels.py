"""Gram matrices over covariate locations and their hyperparameter priors.

Three kernel families produce the T x T covariance that couples each object's
per-stick Gaussian functions across locations: a squared exponential over
scalar covariates (time), a free-form similarity matrix with Uniform[-1,1]
off-diagonals, and a unit-height rooted tree whose MRCA depths give the
covariances. The diagonal is fixed at 1 in every family, which keeps the
stick thresholds standard-normal quantiles.

Positive semidefiniteness is tested by Cholesky success with a small jitter
ladder (0, 1e-10, 1e-8); anything that still fails raises NotPSD carrying the
failing leading principal minor order, which the samplers use as a rejection
signal for similarity proposals.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np
from scipy.linalg import solve_triangular
from scipy.linalg.lapack import dpotrf

__all__ = [
    "NotPSD",
    "TreeHeightError",
    "GramMatrix",
    "se_gram",
    "similarity_gram",
    "tree_gram",
    "kernel_log_prior",
    "SquaredExponentialKernel",
    "SimilarityKernel",
    "TreeKernel",
    "TreeNode",
    "parse_newick",
]

JITTERS = (0.0, 1e-10, 1e-8)
HEIGHT_TOL = 1e-9


class NotPSD(ValueError):
    """Matrix is not positive semidefinite under the jitter ladder.

    minor_index is the 1-based order of the leading principal minor that is
    not positive definite, as reported by the factorization.
    """

    def __init__(self, minor_index: int):
        self.minor_index = minor_index
        super().__init__(f"matrix not PSD: leading minor of order {minor_index} not positive")


class TreeHeightError(ValueError):
    """Some root-to-leaf path length differs from 1 beyond tolerance."""


class GramMatrix:
    """Symmetric unit-diagonal covariance with a lazily cached Cholesky factor.

    The factor is of sigma + jitter*I for the smallest jitter in JITTERS that
    succeeds; the log determinant used by mvn_logpdf comes from that factor.
    Immutable after construction (the factor is computed at most once).
    """

    def __init__(self, sigma: np.ndarray):
        sigma = np.asarray(sigma, dtype=float)
        if sigma.ndim != 2 or sigma.shape[0] != sigma.shape[1]:
            raise ValueError(f"gram matrix must be square, got shape {sigma.shape}")
        self.sigma = sigma
        self.sigma.flags.writeable = False
        self._chol: Optional[np.ndarray] = None

    @property
    def T(self) -> int:
        return self.sigma.shape[0]

    def cholesky(self) -> np.ndarray:
        if self._chol is None:
            self._chol = chol(self.sigma)
        return self._chol

    def mvn_logpdf(self, x: np.ndarray):
        """Zero-mean multivariate normal log density along the last axis of x."""
        L = self.cholesky()
        x = np.asarray(x, dtype=float)
        lead = x.shape[:-1]
        flat = x.reshape(-1, self.T).T
        z = solve_triangular(L, flat, lower=True)
        quad = np.sum(z * z, axis=0)
        logdet = 2.0 * np.sum(np.log(np.diag(L)))
        out = -0.5 * (quad + logdet + self.T * math.log(2.0 * math.pi))
        return out.reshape(lead) if lead else float(out[0])

    def sample(self, shape, rng: np.random.Generator) -> np.ndarray:
        """Draws of shape (*shape, T) from N(0, sigma)."""
        L = self.cholesky()
        z = rng.standard_normal(tuple(shape) + (self.T,))
        return z @ L.T


def chol(sigma: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor of sigma + jitter*I under the escalation policy."""
    sigma = np.asarray(sigma, dtype=float)
    n = sigma.shape[0]
    last_info = n
    for jitter in JITTERS:
        attempt = sigma if jitter == 0.0 else sigma + jitter * np.eye(n)
        L, info = dpotrf(attempt, lower=1, clean=1)
        if info == 0:
            return L
        last_info = int(info)
    raise NotPSD(last_info)


# ---------------------------------------------------------------------------
# squared exponential
# ---------------------------------------------------------------------------

def se_gram(locations, lengthscale: float) -> GramMatrix:
    """Squared exponential covariance exp(-(t - t')^2 / (2 l^2)), unit diagonal."""
    if not lengthscale > 0:
        raise ValueError(f"lengthscale must be positive, got {lengthscale}")
    t = np.asarray(locations, dtype=float).ravel()
    d = t[:, None] - t[None, :]
    return GramMatrix(np.exp(-(d * d) / (2.0 * lengthscale**2)))


# ---------------------------------------------------------------------------
# similarity
# ---------------------------------------------------------------------------

def _n_locations_from_pairs(n_pairs: int) -> int:
    T = (1 + math.isqrt(1 + 8 * n_pairs)) // 2
    if T * (T - 1) // 2 != n_pairs:
        raise ValueError(f"offdiag length {n_pairs} is not T*(T-1)/2 for integer T")
    return T


def similarity_gram(offdiag) -> GramMatrix:
    """Unit-diagonal symmetric matrix from upper-triangle entries, PSD-checked.

    offdiag lists the unordered pairs in row-major upper-triangle order:
    (0,1), (0,2), ..., (0,T-1), (1,2), ... Raises NotPSD if the assembled
    matrix fails Cholesky after the jitter ladder.
    """
    offdiag = np.asarray(offdiag, dtype=float).ravel()
    if np.any(np.abs(offdiag) > 1):
        raise ValueError("similarity entries must lie in [-1, 1]")
    T = _n_locations_from_pairs(len(offdiag))
    sigma = np.eye(T)
    iu = np.triu_indices(T, k=1)
    sigma[iu] = offdiag
    sigma[(iu[1], iu[0])] = offdiag
    gram = GramMatrix(sigma)
    gram.cholesky()  # PSD test, may raise NotPSD
    return gram


# ---------------------------------------------------------------------------
# tree
# ---------------------------------------------------------------------------

@dataclass
class TreeNode:
    """Node of a rooted tree; branch_length is the edge to the parent (root: 0)."""

    name: Optional[str] = None
    branch_length: float = 0.0
    children: tuple = ()

    def leaves(self) -> list["TreeNode"]:
        if not self.children:
            return [self]
        out = []
        for child in self.children:
            out.extend(child.leaves())
        return out

    def nonroot_nodes(self) -> list["TreeNode"]:
        """All nodes except the root, in preorder (parent before child)."""
        out = []

        def walk(node):
            for child in node.children:
                out.append(child)
                walk(child)

        walk(self)
        return out


_TOKEN = re.compile(r"\s*([(),;]|[^\s(),;:]+|:)\s*")


def parse_newick(text: str) -> TreeNode:
    """Parse a Newick-style tree, e.g. "((A:0.3,B:0.3):0.7,C:1.0);".

    Leaves must be named; internal nodes may be unnamed. Branch lengths
    follow a colon and are required on every non-root edge.
    """
    tokens = _TOKEN.findall(text)
    pos = 0

    def peek():
        return tokens[pos] if pos < len(tokens) else None

    def take():
        nonlocal pos
        tok = tokens[pos]
        pos += 1
        return tok

    def parse_node() -> TreeNode:
        children = ()
        name = None
        if peek() == "(":
            take()
            kids = [parse_node()]
            while peek() == ",":
                take()
                kids.append(parse_node())
            if take() != ")":
                raise ValueError("unbalanced parentheses in tree text")
            children = tuple(kids)
            if peek() not in ("(", ")", ",", ":", ";", None):
                name = take()
        else:
            name = take()
            if name in ("(", ")", ",", ":", ";"):
                raise ValueError(f"expected a leaf name, got {name!r}")
        length = 0.0
        if peek() == ":":
            take()
            length = float(take())
        return TreeNode(name=name, branch_length=length, children=children)

    root = parse_node()
    if peek() == ";":
        take()
    if pos != len(tokens):
        raise ValueError("trailing tokens after tree")
    for leaf in root.leaves():
        if leaf.name is None:
            raise ValueError("every leaf must be named")
    return root


def _leaf_depth_paths(root: TreeNode):
    """Per leaf (appearance order): list of cumulative depths at each ancestor
    below the root, ending at the leaf itself."""
    paths = []

    def walk(node, depth, trail):
        for child in node.children:
            d = depth + child.branch_length
            if child.children:
                walk(child, d, trail + [d])
            else:
                paths.append((child.name, trail + [d]))

    walk(root, 0.0, [])
    return paths


def tree_gram(topology: TreeNode, branch_lengths=None) -> GramMatrix:
    """Covariance from a unit-height rooted tree: Sigma(i,j) = MRCA depth.

    Leaves map to locations in order of appearance. branch_lengths, when
    given, replaces the edge lengths of all non-root nodes in preorder.
    Raises TreeHeightError unless every root-to-leaf path length is 1
    within 1e-9.
    """
    if branch_lengths is not None:
        nodes = topology.nonroot_nodes()
        branch_lengths = np.asarray(branch_lengths, dtype=float).ravel()
        if len(branch_lengths) != len(nodes):
            raise ValueError(
                f"expected {len(nodes)} branch lengths (non-root nodes in preorder), "
                f"got {len(branch_lengths)}"
            )
        if np.any(branch_lengths < 0):
            raise ValueError("branch lengths must be nonnegative")
        for node, length in zip(nodes, branch_lengths):
            node.branch_length = float(length)

    paths = _leaf_depth_paths(topology)
    T = len(paths)
    if T < 1:
        raise ValueError("tree has no leaves")
    for name, trail in paths:
        if abs(trail[-1] - 1.0) > HEIGHT_TOL:
            raise TreeHeightError(
                f"root-to-leaf path for {name!r} has length {trail[-1]:.12g}, expected 1"
            )

    # ancestor identity by path prefix: two leaves share ancestors exactly up
    # to the longest common prefix of their depth trails, walking the same tree
    trails = [trail for _, trail in paths]
    ancestor_ids = []

    def collect_ids(node, ids):
        for child in node.children:
            child_ids = ids + [id(child)]
            if child.children:
                collect_ids(child, child_ids)
            else:
                ancestor_ids.append(child_ids)

    collect_ids(topology, [])

    sigma = np.eye(T)
    for i in range(T):
        for j in range(i + 1, T):
            depth = 0.0
            for a, b, d in zip(ancestor_ids[i], ancestor_ids[j], trails[i]):
                if a != b:
                    break
                depth = d
            sigma[i, j] = sigma[j, i] = depth
    return GramMatrix(sigma)


# ---------------------------------------------------------------------------
# kernel objects for the samplers
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SquaredExponentialKernel:
    """SE kernel over fixed scalar locations with an exponential lengthscale prior."""

    locations: tuple
    lengthscale: float = 1.0
    prior_rate: float = 1.0

    def gram(self) -> GramMatrix:
        return se_gram(self.locations, self.lengthscale)

    def log_prior(self) -> float:
        if self.lengthscale <= 0:
            return -math.inf
        return math.log(self.prior_rate) - self.prior_rate * self.lengthscale

    # free parameterization: log lengthscale (unconstrained)
    def free_params(self) -> np.ndarray:
        return np.array([math.log(self.lengthscale)])

    def with_free_params(self, params) -> "SquaredExponentialKernel":
        return replace(self, lengthscale=math.exp(float(params[0])))

    def log_prior_free(self) -> float:
        # exponential density in l plus the log-scale Jacobian dl/d(log l) = l
        return self.log_prior() + math.log(self.lengthscale)

    def param_names(self):
        return ["lengthscale"]

    def param_values(self):
        return [self.lengthscale]


@dataclass(frozen=True)
class SimilarityKernel:
    """Free-form unit-diagonal covariance with Uniform[-1,1] off-diagonals.

    Non-PSD assemblies have prior density zero (log prior -inf), which is the
    rejection rule the slice sampler relies on.
    """

    offdiag: tuple

    @classmethod
    def identity(cls, T: int) -> "SimilarityKernel":
        return cls(offdiag=(0.0,) * (T * (T - 1) // 2))

    def gram(self) -> GramMatrix:
        return similarity_gram(self.offdiag)

    def log_prior(self) -> float:
        off = np.asarray(self.offdiag)
        if np.any(np.abs(off) > 1):
            return -math.inf
        try:
            self.gram()
        except NotPSD:
            return -math.inf
        return 0.0

    # free parameterization: the off-diagonal entries themselves (bounded
    # support handled by the -inf prior outside it)
    def free_params(self) -> np.ndarray:
        return np.asarray(self.offdiag, dtype=float)

    def with_free_params(self, params) -> "SimilarityKernel":
        return replace(self, offdiag=tuple(float(p) for p in params))

    def log_prior_free(self) -> float:
        return self.log_prior()

    def param_names(self):
        T = _n_locations_from_pairs(len(self.offdiag))
        iu = np.triu_indices(T, k=1)
        return [f"sigma[{i},{j}]" for i, j in zip(*iu)]

    def param_values(self):
        return list(self.offdiag)


class TreeKernel:
    """Unit-height tree kernel; internal branch lengths are the free parameters.

    Pendant (leaf-adjacent) branches are determined by the unit-height
    constraint: pendant = 1 - depth of the leaf's parent. A parameter vector
    that drives any branch negative gets prior density zero. Covariances
    depend only on the internal branches (MRCA depths), so this
    parameterization loses nothing.
    """

    def __init__(self, topology: TreeNode):
        self.topology = topology
        self._internal = [n for n in topology.nonroot_nodes() if n.children]
        self._validate_or_raise()

    @classmethod
    def from_newick(cls, text: str) -> "TreeKernel":
        return cls(parse_newick(text))

    def _pendant_slacks(self):
        """(leaf, parent_depth) pairs; pendant length must equal 1 - parent_depth."""
        out = []

        def walk(node, depth):
            for child in node.children:
                d = depth + child.branch_length
                if child.children:
                    walk(child, d)
                else:
                    out.append((child, depth))

        walk(self.topology, 0.0)
        return out

    def _apply_height_constraint(self) -> bool:
        """Set pendant lengths from the constraint; False if any branch is invalid."""
        for node in self._internal:
            if node.branch_length < 0:
                return False
        for leaf, parent_depth in self._pendant_slacks():
            pendant = 1.0 - parent_depth
            if pendant < 0:
                return False
            leaf.branch_length = pendant
        return True

    def _validate_or_raise(self):
        if not self._apply_height_constraint():
            raise TreeHeightError("internal branch lengths exceed the unit height")

    def gram(self) -> GramMatrix:
        return tree_gram(self.topology)

    def log_prior(self) -> float:
        for node in self._internal:
            if node.branch_length < 0:
                return -math.inf
        for _, parent_depth in self._pendant_slacks():
            if parent_depth > 1.0:
                return -math.inf
        return 0.0

    def free_params(self) -> np.ndarray:
        return np.array([n.branch_length for n in self._internal])

    def with_free_params(self, params) -> "TreeKernel":
        clone = TreeKernel.__new__(TreeKernel)
        clone.topology = _copy_tree(self.topology)
        clone._internal = [n for n in clone.topology.nonroot_nodes() if n.children]
        for node, val in zip(clone._internal, params):
            node.branch_length = float(val)
        if not clone._apply_height_constraint():
            # leave an invalid state that log_prior reports as -inf
            pass
        return clone

    def log_prior_free(self) -> float:
        ok = all(n.branch_length >= 0 for n in self._internal) and all(
            parent_depth <= 1.0 for _, parent_depth in self._pendant_slacks()
        )
        return 0.0 if ok else -math.inf

    def param_names(self):
        return [f"branch[{i}]" for i in range(len(self._internal))]

    def param_values(self):
        return [n.branch_length for n in self._internal]


def _copy_tree(node: TreeNode) -> TreeNode:
    return TreeNode(
        name=node.name,
        branch_length=node.branch_length,
        children=tuple(_copy_tree(c) for c in node.children),
    )


def kernel_log_prior(kernel) -> float:
    """Log prior density of a kernel's hyperparameters (-inf when invalid)."""
    return kernel.log_prior()
