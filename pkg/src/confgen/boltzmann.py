"""Classical energy surrogate, Metropolis reference sampler, and the
self-normalized importance-sampling estimator of Boltzmann-averaged
properties.

The energy model is harmonic in bond lengths and bond angles with an optional
soft steric floor; energies are in kJ/mol, so k_B enters through the gas
constant (k_B*T at 500 K is 8.314*500/1000 kJ/mol).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError
from .molgraph import Conformation
from .nnet import ShapeError

GAS_CONSTANT_KJ_PER_MOL_K = 8.314462618e-3


class DegenerateWeightsError(DomainError):
    """All importance weights vanished or became non-finite."""


@dataclass(frozen=True)
class BondTerm:
    i: int
    j: int
    rest_length: float  # ångström
    stiffness: float  # kJ/mol/Å^2


@dataclass(frozen=True)
class AngleTerm:
    """Harmonic angle at atom `j` between the i-j and k-j directions."""

    i: int
    j: int
    k: int
    rest_angle: float  # radians
    stiffness: float  # kJ/mol/rad^2


@dataclass(frozen=True)
class StericTerm:
    """Soft repulsion pushing every non-bonded pair above `floor`."""

    floor: float  # ångström
    stiffness: float  # kJ/mol/Å^2


@dataclass
class EnergyModel:
    bonds: tuple = ()
    angles: tuple = ()
    steric: StericTerm | None = None

    def __post_init__(self):
        self.bonds = tuple(self.bonds)
        self.angles = tuple(self.angles)
        for t in self.bonds:
            if t.rest_length <= 0 or t.stiffness <= 0:
                raise ValueError("bond terms need positive rest length and stiffness")
        for t in self.angles:
            if t.stiffness <= 0:
                raise ValueError("angle terms need positive stiffness")
        self._compiled: dict[int, tuple] = {}

    def _indices(self, n: int) -> tuple:
        """Vectorized index arrays for `n` atoms, cached per atom count."""
        cached = self._compiled.get(n)
        if cached is not None:
            return cached
        bi = np.array([t.i for t in self.bonds], dtype=np.int64)
        bj = np.array([t.j for t in self.bonds], dtype=np.int64)
        br = np.array([t.rest_length for t in self.bonds])
        bk = np.array([t.stiffness for t in self.bonds])
        ai = np.array([t.i for t in self.angles], dtype=np.int64)
        aj = np.array([t.j for t in self.angles], dtype=np.int64)
        ak = np.array([t.k for t in self.angles], dtype=np.int64)
        ar = np.array([t.rest_angle for t in self.angles])
        astiff = np.array([t.stiffness for t in self.angles])
        for idx in (bi, bj, ai, aj, ak):
            if idx.size and (idx.min() < 0 or idx.max() >= n):
                raise ValueError("energy term references a missing atom")
        bonded = {frozenset((t.i, t.j)) for t in self.bonds}
        iu = np.triu_indices(n, k=1)
        mask = np.array(
            [frozenset((int(a), int(b))) not in bonded for a, b in zip(*iu)]
        )
        si, sj = iu[0][mask], iu[1][mask]
        cached = (bi, bj, br, bk, ai, aj, ak, ar, astiff, si, sj)
        self._compiled[n] = cached
        return cached

    def energy_of(self, positions: np.ndarray) -> float:
        positions = np.asarray(positions, dtype=np.float64)
        n = positions.shape[0]
        bi, bj, br, bk, ai, aj, ak, ar, astiff, si, sj = self._indices(n)
        e = 0.0
        if bi.size:
            d = np.sqrt(((positions[bi] - positions[bj]) ** 2).sum(axis=1))
            e += float((bk * (d - br) ** 2).sum())
        if ai.size:
            va = positions[ai] - positions[aj]
            vb = positions[ak] - positions[aj]
            cosang = (va * vb).sum(axis=1) / (
                np.linalg.norm(va, axis=1) * np.linalg.norm(vb, axis=1)
            )
            theta = np.arccos(np.clip(cosang, -1.0, 1.0))
            e += float((astiff * (theta - ar) ** 2).sum())
        if self.steric is not None and si.size:
            d = np.sqrt(((positions[si] - positions[sj]) ** 2).sum(axis=1))
            gap = np.maximum(self.steric.floor - d, 0.0)
            e += float(self.steric.stiffness * (gap**2).sum())
        return e


def energy(m: EnergyModel, x: Conformation) -> float:
    """Total energy in kJ/mol of a conformation under the surrogate model."""
    return m.energy_of(x.positions)


@dataclass
class ISConfig:
    """Temperature and sample budget for Boltzmann reweighting."""

    temperature: float  # kelvin
    n_samples: int = 50

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.n_samples < 1:
            raise ValueError("need at least one sample")

    @property
    def kbt(self) -> float:
        """k_B*T in kJ/mol."""
        return GAS_CONSTANT_KJ_PER_MOL_K * self.temperature


@dataclass
class MetropolisResult:
    elements: tuple
    positions: np.ndarray  # (n_kept, n_atoms, 3)
    acceptance_rate: float
    step_size: float

    def conformations(self) -> list[Conformation]:
        return [Conformation(self.elements, p) for p in self.positions]

    def __len__(self) -> int:
        return self.positions.shape[0]


def metropolis_sample(m: EnergyModel, x0: Conformation, steps: int, cfg: ISConfig,
                      rng: np.random.Generator, *, step_size: float = 0.05,
                      burn_in: int = 0, thin: int = 1,
                      tune: bool = True) -> MetropolisResult:
    """Random-walk Metropolis in Cartesian coordinates.

    Every atom receives an isotropic Gaussian displacement per proposal and
    the move is accepted with probability min(1, exp(-dE / k_B T)). During
    burn-in the step size is nudged toward a 40-50% acceptance rate; it is
    frozen afterwards so the retained chain targets the Boltzmann
    distribution. Keeps every `thin`-th of the `steps` post-burn-in states.
    """
    if steps < 1:
        raise ValueError("need at least one step")
    pos = x0.positions.copy()
    kbt = cfg.kbt
    e = m.energy_of(pos)
    n_atoms = pos.shape[0]

    kept = []
    accepted_main = 0
    window_accepted = 0
    window_size = 50
    total = burn_in + steps

    chunk = 4096
    noise = logu = None
    for i in range(total):
        j = i % chunk
        if j == 0:
            # draw proposal noise and acceptance thresholds in blocks
            noise = rng.standard_normal((min(chunk, total - i), n_atoms, 3))
            logu = np.log(rng.random(min(chunk, total - i)))
        prop = pos + step_size * noise[j]
        e_prop = m.energy_of(prop)
        if logu[j] < -(e_prop - e) / kbt:
            pos = prop
            e = e_prop
            if i >= burn_in:
                accepted_main += 1
            else:
                window_accepted += 1
        if tune and i < burn_in and (i + 1) % window_size == 0:
            rate = window_accepted / window_size
            if rate > 0.5:
                step_size *= 1.1
            elif rate < 0.4:
                step_size *= 0.9
            window_accepted = 0
        if i >= burn_in and (i - burn_in + 1) % thin == 0:
            kept.append(pos.copy())

    return MetropolisResult(
        elements=x0.elements,
        positions=np.asarray(kept) if kept else np.empty((0, n_atoms, 3)),
        acceptance_rate=accepted_main / steps,
        step_size=step_size,
    )


@dataclass
class Observable:
    """A named scalar function of a conformation."""

    name: str
    fn: object

    def __call__(self, x: Conformation) -> float:
        return float(self.fn(x))


def observable_by_name(spec: str) -> Observable:
    """Built-ins: "one", "rgyr", and "distance:i-j" for an atom pair."""
    if spec == "one":
        return Observable("one", lambda x: 1.0)
    if spec == "rgyr":
        def rgyr(x: Conformation) -> float:
            centered = x.positions - x.positions.mean(axis=0)
            return math.sqrt(float((centered**2).sum(axis=1).mean()))
        return Observable("rgyr", rgyr)
    if spec.startswith("distance:"):
        try:
            i_str, j_str = spec.split(":", 1)[1].split("-")
            i, j = int(i_str), int(j_str)
        except ValueError as e:
            raise ValueError(f"bad distance observable {spec!r}; use distance:i-j") from e
        return Observable(
            spec, lambda x: float(np.linalg.norm(x.positions[i] - x.positions[j]))
        )
    raise ValueError(f"unknown observable {spec!r}")


def _min_pairwise_conformation_distance(proposals) -> float:
    """Smallest distance between proposals' interatomic-distance vectors.

    An isometry-invariant overlap diagnostic: tiny values mean near-duplicate
    conformations.
    """
    if len(proposals) < 2:
        return math.inf
    n = proposals[0].positions.shape[0]
    iu = np.triu_indices(n, k=1)
    rows = np.stack(
        [
            np.sqrt(((x.positions[iu[0]] - x.positions[iu[1]]) ** 2).sum(axis=1))
            for x in proposals
        ]
    )
    sq = (rows**2).sum(axis=1)
    pair_sq = np.maximum(sq[:, None] + sq[None, :] - 2.0 * rows @ rows.T, 0.0)
    ku = np.triu_indices(len(proposals), k=1)
    return float(np.sqrt(pair_sq[ku].min()))


@dataclass
class IsEstimate:
    value: float
    ess: float
    n: int
    weights: np.ndarray = field(repr=False)
    standard_error: float
    min_pairwise_distance: float

    def as_dict(self) -> dict:
        return {
            "value": self.value,
            "ess": self.ess,
            "n": self.n,
            "standard_error": self.standard_error,
            "min_pairwise_distance": self.min_pairwise_distance,
            "max_weight": float(self.weights.max()),
        }


def is_estimate(obs: Observable, proposals, m: EnergyModel, cfg: ISConfig, *,
                energies=None) -> IsEstimate:
    """Self-normalized Boltzmann reweighting of proposal conformations.

    Every proposal is weighted by its unnormalized Boltzmann factor
    exp(-E / k_B T) (shifted by the minimum energy for stability) and the
    observable average is normalized by the weight sum, which makes the
    estimate independent of any constant added to all energies. Precomputed
    `energies` may be supplied to skip the model evaluation.
    """
    proposals = list(proposals)
    if not proposals:
        raise ShapeError("need at least one proposal")
    if energies is None:
        energies = np.array([m.energy_of(x.positions) for x in proposals])
    else:
        energies = np.asarray(energies, dtype=np.float64)
        if energies.shape != (len(proposals),):
            raise ShapeError("one energy per proposal required")

    finite = np.isfinite(energies)
    if not finite.any():
        raise DegenerateWeightsError("no proposal has a finite energy")
    shift = energies[finite].min()
    with np.errstate(over="ignore"):
        weights = np.exp(-(energies - shift) / cfg.kbt)
    weights[~np.isfinite(weights)] = 0.0
    total = weights.sum()
    if not (np.isfinite(total) and total > 0.0):
        raise DegenerateWeightsError("importance weights vanished after shifting")

    values = np.array([obs(x) for x in proposals])
    estimate = float((values * weights).sum() / total)
    normalized = weights / total
    ess = float(1.0 / (normalized**2).sum())
    se = float(np.sqrt((normalized**2 * (values - estimate) ** 2).sum()))
    return IsEstimate(
        value=estimate,
        ess=ess,
        n=len(proposals),
        weights=normalized,
        standard_error=se,
        min_pairwise_distance=_min_pairwise_conformation_distance(proposals),
    )
