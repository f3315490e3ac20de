"""Functional connectivity matrices, parcellations, and network-pair patching.

A connectivity matrix over R regions is partitioned into blocks indexed
by unordered network pairs (l, m), l <= m: the diagonal blocks hold
within-network connectivity, the off-diagonal blocks between-network
connectivity.  Only the upper-triangle orientation of each inter-network
block is stored (rows from network l, columns from network m); the lower
mirror is reconstructed on reassembly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError

SYM_TOL = 1e-9
DIAG_TOL = 1e-9
RANGE_TOL = 1e-9


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class FCMatrix:
    """Symmetric R x R correlation matrix with unit diagonal."""

    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] != v.shape[1]:
            raise DataError(f"FC matrix must be square, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise DataError("FC matrix contains non-finite entries")
        if np.max(np.abs(v - v.T)) > SYM_TOL:
            raise DataError("FC matrix is not symmetric within 1e-9")
        if np.max(np.abs(np.diagonal(v) - 1.0)) > DIAG_TOL:
            raise DataError("FC matrix diagonal is not 1 within 1e-9")
        if v.min() < -1.0 - RANGE_TOL or v.max() > 1.0 + RANGE_TOL:
            raise DataError("FC matrix has entries outside [-1, 1]")
        object.__setattr__(self, "values", _freeze(v))

    @property
    def size(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True, eq=False)
class Parcellation:
    """Assignment of each region to exactly one network.

    ``assignment[i]`` is the network id of region i, ids 0..network_count-1.
    ``ordering[l]`` lists the regions of network l in matrix order; that
    order fixes the row/column layout of every patch.
    """

    assignment: np.ndarray

    def __post_init__(self):
        a = np.array(self.assignment, dtype=np.int64)
        if a.ndim != 1 or a.size == 0:
            raise DataError("parcellation assignment must be a nonempty 1-D vector")
        if a.min() < 0:
            raise DataError("network ids must be nonnegative")
        n_net = int(a.max()) + 1
        sizes = np.bincount(a, minlength=n_net)
        if np.any(sizes == 0):
            empty = int(np.flatnonzero(sizes == 0)[0])
            raise DataError(f"network {empty} has no regions")
        ordering = tuple(_freeze(np.flatnonzero(a == l)) for l in range(n_net))
        object.__setattr__(self, "assignment", _freeze(a))
        object.__setattr__(self, "network_count", n_net)
        object.__setattr__(self, "network_sizes", tuple(int(s) for s in sizes))
        object.__setattr__(self, "ordering", ordering)

    @property
    def n_regions(self) -> int:
        return self.assignment.size


@dataclass(frozen=True, eq=False)
class PatchLayout:
    """Ordered enumeration of network pairs (l, m), l <= m, with block shapes."""

    pairs: tuple
    shapes: tuple

    def __post_init__(self):
        if len(self.pairs) != len(self.shapes):
            raise DataError("pairs and shapes must have equal length")
        if list(self.pairs) != sorted(set(self.pairs)):
            raise DataError("pairs must be sorted lexicographically and unique")
        for l, m in self.pairs:
            if l > m:
                raise DataError(f"pair ({l},{m}) violates l <= m")

    @property
    def n_patch(self) -> int:
        return len(self.pairs)

    def index_of(self, pair) -> int:
        return self.pairs.index(pair)


@dataclass(frozen=True, eq=False)
class Patch:
    """One connectivity block: the |N_l| x |N_m| submatrix for pair (l, m)."""

    pair: tuple
    block: np.ndarray

    def __post_init__(self):
        b = np.array(self.block, dtype=np.float64)
        if b.ndim != 2:
            raise DataError("patch block must be 2-D")
        object.__setattr__(self, "block", _freeze(b))


@dataclass(frozen=True, eq=False)
class Subject:
    subject_id: str
    fc: FCMatrix
    age: float
    sex: int
    targets: dict


@dataclass(frozen=True, eq=False)
class Cohort:
    """Aligned set of subjects sharing region count and target names."""

    subjects: tuple

    def __post_init__(self):
        subs = tuple(self.subjects)
        if not subs:
            raise DataError("cohort is empty")
        r = subs[0].fc.size
        names = set(subs[0].targets)
        for s in subs:
            if s.fc.size != r:
                raise DataError("subjects have inconsistent region counts")
            if set(s.targets) != names:
                raise DataError("subjects have inconsistent target names")
        object.__setattr__(self, "subjects", subs)

    def __len__(self) -> int:
        return len(self.subjects)

    @property
    def n_regions(self) -> int:
        return self.subjects[0].fc.size

    @property
    def target_names(self) -> tuple:
        return tuple(sorted(self.subjects[0].targets))

    def target_array(self, name: str) -> np.ndarray:
        return np.array([s.targets[name] for s in self.subjects], dtype=np.float64)

    @property
    def confounds(self) -> np.ndarray:
        """(n, 2) array of [age, sex] per subject, manifest order."""
        return np.array([[s.age, float(s.sex)] for s in self.subjects], dtype=np.float64)


def build_layout(parc: Parcellation) -> PatchLayout:
    """Enumerate all N_n(N_n+1)/2 network pairs of a parcellation."""
    n = parc.network_count
    pairs = tuple((l, m) for l in range(n) for m in range(l, n))
    shapes = tuple((parc.network_sizes[l], parc.network_sizes[m]) for l, m in pairs)
    return PatchLayout(pairs=pairs, shapes=shapes)


def extract_patches(fc: FCMatrix, parc: Parcellation, layout: PatchLayout) -> list:
    """Cut the FC matrix into one block per layout pair.

    Rows follow ``parc.ordering[l]``, columns ``parc.ordering[m]``; diagonal
    pairs inherit symmetry and unit diagonal from the FC matrix.
    """
    if fc.size != parc.n_regions:
        raise DataError(
            f"FC matrix has {fc.size} regions, parcellation has {parc.n_regions}"
        )
    patches = []
    for l, m in layout.pairs:
        block = fc.values[np.ix_(parc.ordering[l], parc.ordering[m])]
        patches.append(Patch(pair=(l, m), block=block))
    return patches


def reassemble(patches: list, layout: PatchLayout, parc: Parcellation) -> FCMatrix:
    """Inverse of :func:`extract_patches`: rebuild the full symmetric matrix.

    Upper-triangle blocks are mirrored into the lower triangle.
    """
    seen = {}
    for p in patches:
        if p.pair in seen:
            raise DataError(f"duplicate patch for pair {p.pair}")
        seen[p.pair] = p
    missing = [pr for pr in layout.pairs if pr not in seen]
    if missing or len(seen) != layout.n_patch:
        raise DataError(f"patch set does not match layout (missing {missing})")
    r = parc.n_regions
    out = np.zeros((r, r), dtype=np.float64)
    for (l, m), shape in zip(layout.pairs, layout.shapes):
        block = seen[(l, m)].block
        if block.shape != shape:
            raise DataError(
                f"patch ({l},{m}) has shape {block.shape}, layout expects {shape}"
            )
        rows, cols = parc.ordering[l], parc.ordering[m]
        out[np.ix_(rows, cols)] = block
        if l != m:
            out[np.ix_(cols, rows)] = block.T
    return FCMatrix(values=out)


def vec(p: Patch) -> np.ndarray:
    """Row-major flattening: row index runs over network l, column over m."""
    return p.block.reshape(-1)


def unvec(v: np.ndarray, shape) -> np.ndarray:
    """Inverse of :func:`vec` for a block of the given shape."""
    v = np.asarray(v, dtype=np.float64)
    if v.size != shape[0] * shape[1]:
        raise DataError(f"vector of length {v.size} cannot fill block {shape}")
    return v.reshape(shape)


def region_permutation(n_regions: int, seed) -> np.ndarray:
    """Uniformly random bijection of region indices, deterministic per seed."""
    rng = np.random.default_rng(seed)
    return rng.permutation(n_regions)


def apply_region_permutation(parc: Parcellation, perm: np.ndarray) -> Parcellation:
    """Relabel regions: region i takes the network of region perm[i]."""
    perm = np.asarray(perm, dtype=np.int64)
    if perm.size != parc.n_regions or np.any(np.sort(perm) != np.arange(perm.size)):
        raise DataError("perm is not a permutation of the region indices")
    return Parcellation(assignment=parc.assignment[perm])


def permute_regions(parc: Parcellation, seed) -> Parcellation:
    """Randomly shuffle the region-to-network assignment (sizes preserved)."""
    return apply_region_permutation(parc, region_permutation(parc.n_regions, seed))


def square_layout(n_regions: int, side: int):
    """Structure-agnostic patching: contiguous pseudo-networks of ``side`` regions.

    Returns the pseudo-parcellation and its upper-triangle pair layout,
    mirroring the network patch-count convention.
    """
    if side < 1 or n_regions % side != 0:
        raise DataError(f"side {side} does not divide region count {n_regions}")
    assignment = np.arange(n_regions) // side
    parc = Parcellation(assignment=assignment)
    return parc, build_layout(parc)


def balanced_sizes(n_regions: int, n_networks: int) -> tuple:
    """Split R regions into N nearly equal network sizes (first groups larger)."""
    if not 1 <= n_networks <= n_regions:
        raise DataError(f"cannot split {n_regions} regions into {n_networks} networks")
    base, extra = divmod(n_regions, n_networks)
    return tuple(base + (1 if l < extra else 0) for l in range(n_networks))


def parcellation_from_sizes(sizes) -> Parcellation:
    """Parcellation with network l occupying the next ``sizes[l]`` regions."""
    assignment = np.repeat(np.arange(len(sizes)), sizes)
    return Parcellation(assignment=assignment)


def merge_networks(parc: Parcellation, factor: int) -> Parcellation:
    """Coarsen a parcellation by merging consecutive network ids in groups."""
    if factor < 1:
        raise DataError("merge factor must be >= 1")
    return Parcellation(assignment=parc.assignment // factor)
