"""Synthetic cohorts with planted network-block structure and behavior signal.

Each subject's latent connectivity is block-constant over network pairs
(within-network coupling w, between-network base b, per-pair jitter),
perturbed by entrywise noise, then projected onto the set of valid
correlation matrices by alternating projections (PSD cone vs. unit
diagonal + [-1,1] box).  The behavior target is a linear function of the
mean connectivity inside designated signal blocks, plus age/sex effects
and Gaussian noise, so network-aware models have genuine signal to find.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError, NumericError
from .fc import Cohort, FCMatrix, Parcellation, Subject, balanced_sizes, parcellation_from_sizes

EIG_TOL = 1e-8


@dataclass(frozen=True)
class SynthSpec:
    n_regions: int = 60
    n_networks: int = 6
    network_sizes: tuple | None = None
    within: float = 0.35
    between: float = 0.05
    coupling_jitter: float = 0.05
    noise: float = 0.05
    signal_blocks: tuple = ((0, 0), (1, 2))
    effect_size: float = 1.0
    age_slope: float = 0.02
    sex_offset: float = 0.1
    target_noise: float = 0.1
    n_subjects: int = 200
    seed: int = 0
    target_name: str = "score"

    def __post_init__(self):
        sizes = self.network_sizes
        if sizes is None:
            sizes = balanced_sizes(self.n_regions, self.n_networks)
        else:
            sizes = tuple(int(s) for s in sizes)
        if len(sizes) != self.n_networks or sum(sizes) != self.n_regions:
            raise DataError("network_sizes must have n_networks entries summing to n_regions")
        if any(s < 1 for s in sizes):
            raise DataError("network sizes must be positive")
        object.__setattr__(self, "network_sizes", sizes)
        if not 0.0 < self.within < 1.0:
            raise DataError("within-network coupling must lie in (0, 1)")
        if not -0.3 < self.between < 0.3:
            raise DataError("between-network coupling must lie in (-0.3, 0.3)")
        if min(self.coupling_jitter, self.noise, self.target_noise) < 0:
            raise DataError("noise scales must be nonnegative")
        if self.n_subjects < 1:
            raise DataError("n_subjects must be >= 1")
        for l, m in self.signal_blocks:
            if not (0 <= l <= m < self.n_networks):
                raise DataError(f"signal block ({l},{m}) invalid for {self.n_networks} networks")

    def parcellation(self) -> Parcellation:
        return parcellation_from_sizes(self.network_sizes)


def nearest_correlation(matrix: np.ndarray, max_iter: int = 100,
                        tol: float = EIG_TOL) -> np.ndarray:
    """Alternating projections onto the PSD cone and the unit-diagonal box.

    Returns a symmetric matrix with exact unit diagonal, entries in
    [-1, 1], and smallest eigenvalue >= -tol; raises NumericError if that
    is not reached within ``max_iter`` sweeps.
    """
    y = np.array(matrix, dtype=np.float64)
    y = (y + y.T) / 2.0
    np.fill_diagonal(y, 1.0)
    np.clip(y, -1.0, 1.0, out=y)
    for _ in range(max_iter):
        w, v = np.linalg.eigh(y)
        if w[0] >= -tol:
            return y
        x = (v * np.maximum(w, 0.0)) @ v.T
        y = (x + x.T) / 2.0
        np.fill_diagonal(y, 1.0)
        np.clip(y, -1.0, 1.0, out=y)
    raise NumericError(
        f"nearest-correlation projection did not converge in {max_iter} iterations"
    )


def _subject_rng(seed: int, index: int) -> np.random.Generator:
    # per-subject streams so parallel generation cannot change outputs
    return np.random.default_rng([seed, index])


def _block_mean(values: np.ndarray, parc: Parcellation, pair) -> float:
    l, m = pair
    return float(values[np.ix_(parc.ordering[l], parc.ordering[m])].mean())


def gen_subject(spec: SynthSpec, index: int) -> Subject:
    rng = _subject_rng(spec.seed, index)
    parc = spec.parcellation()
    n_net = spec.n_networks
    r = spec.n_regions

    age = float(rng.uniform(8.0, 18.0))
    sex = int(rng.integers(0, 2))

    coupling = np.empty((n_net, n_net))
    for l in range(n_net):
        for m in range(l, n_net):
            base = spec.within if l == m else spec.between
            c = base + rng.normal(0.0, spec.coupling_jitter)
            coupling[l, m] = coupling[m, l] = c
    latent = coupling[parc.assignment[:, None], parc.assignment[None, :]].copy()
    np.fill_diagonal(latent, 1.0)

    if spec.noise > 0:
        iu = np.triu_indices(r, k=1)
        noise = np.zeros((r, r))
        noise[iu] = rng.normal(0.0, spec.noise, len(iu[0]))
        latent = latent + noise + noise.T

    values = nearest_correlation(latent)
    fc = FCMatrix(values=values)

    signal = sum(_block_mean(values, parc, pair) for pair in spec.signal_blocks)
    target = (
        spec.effect_size * signal
        + spec.age_slope * age
        + spec.sex_offset * sex
        + rng.normal(0.0, spec.target_noise)
    )
    return Subject(
        subject_id=f"sub-{index:04d}",
        fc=fc,
        age=age,
        sex=sex,
        targets={spec.target_name: float(target)},
    )


def gen_cohort(spec: SynthSpec) -> Cohort:
    """Generate the full cohort; bit-reproducible for a given spec."""
    return Cohort(subjects=tuple(gen_subject(spec, i) for i in range(spec.n_subjects)))
