"""Euclidean distance geometry: bounds, smoothing, metrization, embedding.

Per-edge Gaussian distance predictions become lower/upper bounds (mean minus
and plus one standard deviation), every unconstrained atom pair gets a steric
floor and a large ceiling, and the classical three-step procedure follows:
triangle-inequality bound smoothing, drawing a random distance matrix from
within the bounds, and a spectral best-fit embedding refined against a hinge
penalty on bound violations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nnet
from .cvae import GaussianEdgeDist
from .errors import DomainError, NumericalError
from .molgraph import Conformation, ExtendedGraph

STERIC_FLOOR = 1.0
DISTANCE_CEILING = 1000.0
EDGE_LOWER_FLOOR = 0.5


class InconsistentBoundsError(DomainError):
    """A lower bound exceeds the matching upper bound; `pair` names the atoms."""

    def __init__(self, i: int, j: int, lower: float, upper: float):
        super().__init__(
            f"bounds for atom pair ({i}, {j}) are inconsistent: "
            f"lower {lower:.6g} > upper {upper:.6g}"
        )
        self.pair = (i, j)


@dataclass
class BoundsMatrix:
    """Symmetric per-pair lower/upper distance bounds with a zero diagonal."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        self.lower = np.asarray(self.lower, dtype=np.float64)
        self.upper = np.asarray(self.upper, dtype=np.float64)
        n = self.lower.shape[0]
        if self.lower.shape != (n, n) or self.upper.shape != (n, n):
            raise ValueError("bounds must be square matrices of equal size")

    @property
    def n(self) -> int:
        return self.lower.shape[0]

    def copy(self) -> "BoundsMatrix":
        return BoundsMatrix(self.lower.copy(), self.upper.copy())

    @classmethod
    def from_distance_matrix(cls, d: np.ndarray) -> "BoundsMatrix":
        d = np.asarray(d, dtype=np.float64)
        return cls(d.copy(), d.copy())


def make_bounds(eg: ExtendedGraph, ged: GaussianEdgeDist, *,
                edge_floor: float = EDGE_LOWER_FLOOR,
                steric_floor: float = STERIC_FLOOR,
                ceiling: float = DISTANCE_CEILING) -> BoundsMatrix:
    """Bounds mean-minus-sigma to mean-plus-sigma per edge; defaults elsewhere.

    Both edge bounds are floored at `edge_floor`, which keeps lower <= upper
    even for overdispersed predictions.
    """
    if len(ged) != eg.n_edges:
        raise nnet.ShapeError(
            f"{len(ged)} edge distributions for a graph with {eg.n_edges} edges"
        )
    if not (np.isfinite(ged.mean).all() and np.isfinite(ged.var).all()):
        raise NumericalError("edge distribution contains non-finite values",
                             term="bounds")
    n = eg.n_nodes
    lower = np.full((n, n), steric_floor)
    upper = np.full((n, n), ceiling)
    sigma = ged.std
    lo = np.maximum(ged.mean - sigma, edge_floor)
    hi = np.maximum(ged.mean + sigma, edge_floor)
    lower[eg.src, eg.dst] = lo
    lower[eg.dst, eg.src] = lo
    upper[eg.src, eg.dst] = hi
    upper[eg.dst, eg.src] = hi
    np.fill_diagonal(lower, 0.0)
    np.fill_diagonal(upper, 0.0)
    return BoundsMatrix(lower, upper)


def _smoothing_pass(lower: np.ndarray, upper: np.ndarray) -> bool:
    """One Floyd-Warshall sweep, in place on both matrices; True if anything moved.

    Both matrices stay symmetric: the upper update is symmetric in (i, j) and
    the two lower candidates map onto each other under transposition.
    """
    n = lower.shape[0]
    changed = False
    for k in range(n):
        shrunk = np.minimum(upper, upper[:, k, None] + upper[None, k, :])
        if (shrunk < upper).any():
            changed = True
        upper[...] = shrunk
        grown = np.maximum(
            lower,
            np.maximum(lower[:, k, None] - upper[None, k, :],
                       lower[None, k, :] - upper[:, k, None]),
        )
        np.fill_diagonal(grown, 0.0)
        if (grown > lower).any():
            changed = True
        lower[...] = grown
        _raise_if_crossed(lower, upper)
    return changed


def _raise_if_crossed(lower: np.ndarray, upper: np.ndarray) -> None:
    bad = lower - upper > 1e-9
    if bad.any():
        i, j = np.argwhere(bad)[0]
        raise InconsistentBoundsError(int(i), int(j), float(lower[i, j]),
                                      float(upper[i, j]))


def smooth_bounds(b: BoundsMatrix) -> BoundsMatrix:
    """Tighten bounds to triangle-inequality consistency.

    Upper bounds relax to all-pairs shortest paths over the upper matrix;
    lower bounds grow from lower(i,k) - upper(k,j) differences. Sweeps repeat
    until a fixed point, so a second application is a no-op.
    """
    lower = b.lower.copy()
    upper = b.upper.copy()
    _raise_if_crossed(lower, upper)
    for _ in range(b.n + 1):
        if not _smoothing_pass(lower, upper):
            break
    return BoundsMatrix(lower, upper)


def metrize(b: BoundsMatrix, rng: np.random.Generator) -> np.ndarray:
    """Draw one symmetric distance matrix uniformly from within the bounds."""
    n = b.n
    u = rng.random((n, n))
    d = b.lower + (b.upper - b.lower) * u
    d = np.triu(d, k=1)
    return d + d.T


def gram_embed(d: np.ndarray) -> np.ndarray:
    """Classical best-fit embedding of a distance matrix into three dimensions.

    Squared distances to the centroid give the Gram matrix
    g(i,j) = (d0(i)^2 + d0(j)^2 - d(i,j)^2) / 2, whose top three eigenpairs
    (negative eigenvalues clamped to zero) provide the coordinates.
    """
    d = np.asarray(d, dtype=np.float64)
    n = d.shape[0]
    d2 = d**2
    d0_sq = d2.mean(axis=1) - d2.sum() / (2.0 * n * n)
    gram = 0.5 * (d0_sq[:, None] + d0_sq[None, :] - d2)
    try:
        evals, evecs = np.linalg.eigh(gram)
    except np.linalg.LinAlgError as e:
        raise NumericalError(f"eigendecomposition failed: {e}", term="gram") from e
    order = np.argsort(evals)[::-1][: min(3, n)]
    lam = np.clip(evals[order], 0.0, None)
    coords = np.zeros((n, 3))
    coords[:, : order.shape[0]] = evecs[:, order] * np.sqrt(lam)
    return coords


@dataclass
class EmbedResult:
    conformation: Conformation
    converged: bool
    max_violation: float
    iterations: int


def _pair_violation(coords: np.ndarray, lower: np.ndarray, upper: np.ndarray,
                    iu: tuple) -> float:
    diff = coords[iu[0]] - coords[iu[1]]
    dist = np.sqrt((diff**2).sum(axis=1))
    over = dist - upper[iu]
    under = lower[iu] - dist
    worst = max(over.max(initial=0.0), under.max(initial=0.0))
    return max(worst, 0.0)


def refine(coords: np.ndarray, b: BoundsMatrix, tol: float = 1e-3,
           max_iter: int = 2000, lr: float = 0.05):
    """Minimize the squared-hinge violation energy with Adam.

    E = sum over pairs of max(0, |ri-rj|^2 - upper^2)^2
                       + max(0, lower^2 - |ri-rj|^2)^2.
    Only steps that do not increase E (beyond 1e-12) are accepted; the best
    iterate is returned. Stops once its largest per-pair distance violation
    drops to `tol`, or after `max_iter` steps.

    Returns (coords, converged, max_violation, iterations).
    """
    coords = np.asarray(coords, dtype=np.float64).copy()
    n = coords.shape[0]
    iu = np.triu_indices(n, k=1)
    lo2 = b.lower[iu] ** 2
    hi2 = b.upper[iu] ** 2

    def energy_grad(x):
        diff = x[iu[0]] - x[iu[1]]
        sq = (diff**2).sum(axis=1)
        over = np.maximum(sq - hi2, 0.0)
        under = np.maximum(lo2 - sq, 0.0)
        e = float((over**2 + under**2).sum())
        coef = 4.0 * (over - under)
        g = np.zeros_like(x)
        contrib = coef[:, None] * diff
        np.add.at(g, iu[0], contrib)
        np.add.at(g, iu[1], -contrib)
        return e, g

    best = coords.copy()
    best_energy, _ = energy_grad(coords)
    if not np.isfinite(best_energy):
        raise NumericalError("violation energy is not finite", term="refine")
    violation = _pair_violation(best, b.lower, b.upper, iu)
    if violation <= tol:
        return best, True, violation, 0

    x = nnet.param(coords)
    adam = nnet.Adam([x], lr=lr)
    iterations = 0
    for step in range(1, max_iter + 1):
        e, g = energy_grad(x.data)
        if not np.isfinite(e):
            raise NumericalError("violation energy is not finite", term="refine")
        if e <= best_energy + 1e-12:
            best_energy = e
            best = x.data.copy()
            violation = _pair_violation(best, b.lower, b.upper, iu)
            if violation <= tol:
                break
        adam.step(grads=[g])
        iterations = step
    violation = _pair_violation(best, b.lower, b.upper, iu)
    return best, violation <= tol, violation, iterations


def embed_conformation(eg: ExtendedGraph, ged: GaussianEdgeDist,
                       rng: np.random.Generator, tol: float = 1e-3, *,
                       max_iter: int = 2000, lr: float = 0.05) -> EmbedResult:
    """Full pipeline from predicted edge Gaussians to one conformation.

    Bound smoothing failures raise InconsistentBoundsError; refinement that
    stops short of `tol` is reported through the `converged` flag instead.
    One conformation is produced per set of bounds.
    """
    bounds = smooth_bounds(make_bounds(eg, ged))
    d = metrize(bounds, rng)
    coords, converged, violation, iterations = refine(
        gram_embed(d), bounds, tol=tol, max_iter=max_iter, lr=lr
    )
    conf = Conformation(eg.source_graph.elements, coords)
    return EmbedResult(conf, converged, violation, iterations)


@dataclass
class EmbedBatchReport:
    """Outcome statistics for a batch of embedding attempts."""

    n_samples: int
    n_smoothing_ok: int
    n_converged: int
    violations: list

    @property
    def smoothing_rate(self) -> float:
        return self.n_smoothing_ok / self.n_samples if self.n_samples else 0.0

    @property
    def convergence_rate(self) -> float:
        return self.n_converged / self.n_samples if self.n_samples else 0.0

    def as_dict(self) -> dict:
        v = np.asarray(self.violations, dtype=np.float64)
        return {
            "n_samples": self.n_samples,
            "n_smoothing_ok": self.n_smoothing_ok,
            "n_converged": self.n_converged,
            "smoothing_rate": self.smoothing_rate,
            "convergence_rate": self.convergence_rate,
            "mean_max_violation": float(v.mean()) if v.size else 0.0,
            "worst_violation": float(v.max()) if v.size else 0.0,
        }


def embed_batch(eg: ExtendedGraph, geds, seed: int, tol: float = 1e-3) -> tuple:
    """Embed many sampled edge distributions with independent RNG streams.

    Returns (results, report) where `results` holds an EmbedResult for every
    sample that passed smoothing, in input order.
    """
    geds = list(geds)
    results = []
    violations = []
    for k, ged in enumerate(geds):
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(k,)))
        try:
            result = embed_conformation(eg, ged, rng, tol=tol)
        except InconsistentBoundsError:
            continue
        violations.append(result.max_violation)
        results.append(result)
    report = EmbedBatchReport(
        n_samples=len(geds),
        n_smoothing_ok=len(results),
        n_converged=sum(1 for r in results if r.converged),
        violations=violations,
    )
    return results, report
