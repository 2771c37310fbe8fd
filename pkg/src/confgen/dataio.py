"""Dataset serialization, disjoint-graph splitting, and synthetic benchmarks.

Datasets are line-delimited JSON: a header line carrying the schema version,
then one record per line holding a molecule id, its bond graph, the seed its
extended graph was built with, and one conformation. All conformations of a
molecule share one build seed so their distance sets stay index-aligned.
Floats are written with shortest round-trip precision, so read(write(x)) is
bit-identical.

The synthetic benchmark replaces an external quantum-chemistry dataset: toy
C/O/H molecules with harmonic bond/angle energies are sampled with the
Metropolis chain at a fixed temperature.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import edg
from .boltzmann import (
    AngleTerm,
    BondTerm,
    EnergyModel,
    ISConfig,
    StericTerm,
    metropolis_sample,
)
from .errors import DomainError, UsageError
from .molgraph import (
    Bond,
    Conformation,
    MolGraph,
    build_extended_graph,
    extract_distances,
)

DATASET_FORMAT = "confgen-dataset"
DATASET_VERSION = 1
BENCHMARK_FORMAT = "confgen-benchmark"


class ParseError(UsageError):
    """A dataset or spec file line could not be parsed."""


class GenerationError(DomainError):
    """Synthetic sampling failed (e.g. pathologically low MCMC acceptance)."""


@dataclass
class DatasetRecord:
    molecule: str
    graph: MolGraph
    build_seed: int
    conformation: Conformation


@dataclass
class SplitManifest:
    """Molecule ids per split; disjoint by construction."""

    train: tuple
    validation: tuple
    test: tuple
    seed: int

    def split_of(self, molecule: str) -> str:
        for name in ("train", "validation", "test"):
            if molecule in getattr(self, name):
                return name
        raise KeyError(molecule)


# --- json codecs -----------------------------------------------------------

def graph_to_dict(g: MolGraph) -> dict:
    return {
        "nodes": [{"element": e, "chiral": c} for e, c in g.nodes],
        "bonds": [
            {
                "i": b.i,
                "j": b.j,
                "type": b.bond_type,
                "stereo": b.stereo,
                "aromatic": b.is_aromatic,
                "conjugated": b.is_conjugated,
                "rings": list(b.ring_sizes),
            }
            for b in g.bonds
        ],
    }


def graph_from_dict(d: dict) -> MolGraph:
    nodes = tuple((n["element"], n.get("chiral", "None")) for n in d["nodes"])
    bonds = tuple(
        Bond(
            b["i"],
            b["j"],
            bond_type=b.get("type", "single"),
            stereo=b.get("stereo", "None"),
            is_aromatic=b.get("aromatic", False),
            is_conjugated=b.get("conjugated", False),
            ring_sizes=tuple(b.get("rings", ())),
        )
        for b in d["bonds"]
    )
    return MolGraph(nodes, bonds)


def _record_to_dict(r: DatasetRecord) -> dict:
    return {
        "molecule": r.molecule,
        "graph": graph_to_dict(r.graph),
        "build_seed": r.build_seed,
        "positions": r.conformation.positions.tolist(),
    }


def _record_from_dict(d: dict) -> DatasetRecord:
    graph = graph_from_dict(d["graph"])
    return DatasetRecord(
        molecule=str(d["molecule"]),
        graph=graph,
        build_seed=int(d["build_seed"]),
        conformation=Conformation(graph.elements, np.asarray(d["positions"])),
    )


def write_dataset(path, records) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"format": DATASET_FORMAT, "version": DATASET_VERSION}))
        fh.write("\n")
        for r in records:
            fh.write(json.dumps(_record_to_dict(r)))
            fh.write("\n")


def read_dataset(path) -> list[DatasetRecord]:
    """Read records back; an empty file is an empty dataset."""
    records: list[DatasetRecord] = []
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline()
        if not header.strip():
            return records
        try:
            head = json.loads(header)
            if head.get("format") != DATASET_FORMAT:
                raise ValueError(f"expected format {DATASET_FORMAT!r}")
            if head.get("version") != DATASET_VERSION:
                raise ValueError(f"unsupported version {head.get('version')}")
        except (json.JSONDecodeError, ValueError) as e:
            raise ParseError(f"{path}:1: bad dataset header: {e}") from e
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            try:
                records.append(_record_from_dict(json.loads(line)))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
                raise ParseError(f"{path}:{lineno}: bad record: {e}") from e
    return records


def group_records(records) -> dict:
    """molecule id -> (graph, build_seed, [conformations]), insertion-ordered."""
    grouped: dict[str, tuple] = {}
    for r in records:
        if r.molecule not in grouped:
            grouped[r.molecule] = (r.graph, r.build_seed, [])
        grouped[r.molecule][2].append(r.conformation)
    return grouped


def extended_graphs(records) -> dict:
    """molecule id -> ExtendedGraph, built with each molecule's stored seed."""
    return {
        mol: build_extended_graph(graph, seed)
        for mol, (graph, seed, _) in group_records(records).items()
    }


def training_pairs(records) -> list[tuple]:
    """(molecule, ExtendedGraph, distance vector) per record."""
    graphs = extended_graphs(records)
    pairs = []
    for r in records:
        eg = graphs[r.molecule]
        pairs.append((r.molecule, eg, extract_distances(eg, r.conformation).values))
    return pairs


def distance_matrix_by_molecule(records) -> dict:
    """molecule id -> (n_conformations x n_edges) distance matrix."""
    graphs = extended_graphs(records)
    out: dict[str, list] = {mol: [] for mol in graphs}
    for r in records:
        eg = graphs[r.molecule]
        out[r.molecule].append(extract_distances(eg, r.conformation).values)
    return {mol: np.stack(rows) for mol, rows in out.items() if rows}


# --- splitting ---------------------------------------------------------------

def split_disjoint(records, fractions=(0.8, 0.1, 0.1), seed: int = 0) -> SplitManifest:
    """Partition molecules (never individual conformations) into splits.

    Counts follow the fractions by largest remainder, with every positive
    fraction guaranteed at least one molecule.
    """
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3:
        raise ValueError("expected (train, validation, test) fractions")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError("fractions must sum to 1")
    molecules = sorted({r.molecule for r in records})
    required = sum(1 for f in fractions if f > 0)
    if len(molecules) < required:
        raise ValueError(
            f"{len(molecules)} unique molecules cannot fill {required} splits"
        )

    counts = [math.floor(f * len(molecules)) for f in fractions]
    remainders = [f * len(molecules) - c for f, c in zip(fractions, counts)]
    while sum(counts) < len(molecules):
        i = max(range(3), key=lambda i: remainders[i])
        counts[i] += 1
        remainders[i] = -1.0
    for i, f in enumerate(fractions):
        if f > 0 and counts[i] == 0:
            donor = max(range(3), key=lambda j: counts[j])
            counts[donor] -= 1
            counts[i] += 1

    rng = np.random.default_rng(seed)
    order = [molecules[i] for i in rng.permutation(len(molecules))]
    train = tuple(sorted(order[: counts[0]]))
    validation = tuple(sorted(order[counts[0] : counts[0] + counts[1]]))
    test = tuple(sorted(order[counts[0] + counts[1] :]))
    return SplitManifest(train, validation, test, int(seed))


def select_split(records, molecule_ids) -> list[DatasetRecord]:
    wanted = set(molecule_ids)
    return [r for r in records if r.molecule in wanted]


# --- synthetic benchmark -----------------------------------------------------

_BOND_REST = {("C", "C"): 1.526, ("C", "O"): 1.43, ("C", "H"): 1.09, ("H", "O"): 0.96}
_BOND_STIFF = {("C", "C"): 1300.0, ("C", "O"): 1500.0, ("C", "H"): 1500.0,
               ("H", "O"): 1700.0}
_TETRAHEDRAL = math.acos(-1.0 / 3.0)
_ANGLE_STIFF = 250.0
_STERIC = {"floor": 1.5, "stiffness": 100.0}


def _pair_key(a: str, b: str) -> tuple:
    return tuple(sorted((a, b)))


def _toy_molecule(name: str, elements, bond_pairs, ring: tuple = ()) -> dict:
    """Benchmark entry for one molecule: graph bonds plus harmonic terms.

    `ring` lists the atoms of a single small ring, if any; angles inside the
    ring get law-of-cosines rest values so the rest geometry is realizable.
    """
    elements = list(elements)
    ring = set(ring)
    adjacency: dict[int, list[int]] = {i: [] for i in range(len(elements))}
    for i, j in bond_pairs:
        adjacency[i].append(j)
        adjacency[j].append(i)

    def rest(i: int, j: int) -> float:
        return _BOND_REST[_pair_key(elements[i], elements[j])]

    def ring_angle(i: int, center: int, k: int) -> float:
        if len(ring) == 3:
            # rest angle consistent with the three side lengths
            a, b = rest(i, center), rest(k, center)
            c = rest(i, k)
            return math.acos((a * a + b * b - c * c) / (2 * a * b))
        # larger rings: interior angle of the regular polygon
        return (len(ring) - 2) * math.pi / len(ring)

    bonds_json = []
    energy_bonds = []
    for i, j in bond_pairs:
        entry = {"i": i, "j": j}
        if ring and i in ring and j in ring:
            entry["rings"] = [len(ring)]
        bonds_json.append(entry)
        energy_bonds.append(
            {"i": i, "j": j, "rest": rest(i, j),
             "stiffness": _BOND_STIFF[_pair_key(elements[i], elements[j])]}
        )

    energy_angles = []
    for center, neighbors in adjacency.items():
        for a_idx in range(len(neighbors)):
            for b_idx in range(a_idx + 1, len(neighbors)):
                i, k = neighbors[a_idx], neighbors[b_idx]
                if {i, center, k} <= ring:
                    theta = ring_angle(i, center, k)
                else:
                    theta = _TETRAHEDRAL
                energy_angles.append(
                    {"i": i, "j": center, "k": k, "rest": theta,
                     "stiffness": _ANGLE_STIFF}
                )

    return {
        "name": name,
        "elements": elements,
        "bonds": bonds_json,
        "energy": {"bonds": energy_bonds, "angles": energy_angles,
                   "steric": dict(_STERIC)},
    }


def default_benchmark_spec(count: int = 2000) -> dict:
    """Ten toy C/O/H molecules: chains, branched chains, and small rings."""
    molecules = [
        _toy_molecule("methanol", "COHHHH",
                      [(0, 1), (0, 2), (0, 3), (0, 4), (1, 5)]),
        _toy_molecule("ethanol", "CCOHHHHHH",
                      [(0, 1), (1, 2), (0, 3), (0, 4), (0, 5), (1, 6), (1, 7), (2, 8)]),
        _toy_molecule("propane", "CCCHHHHHHHH",
                      [(0, 1), (1, 2), (0, 3), (0, 4), (0, 5), (1, 6), (1, 7),
                       (2, 8), (2, 9), (2, 10)]),
        _toy_molecule("dimethyl-ether", "COCHHHHHH",
                      [(0, 1), (1, 2), (0, 3), (0, 4), (0, 5), (2, 6), (2, 7), (2, 8)]),
        _toy_molecule("glycol", "OCCOHHHHHH",
                      [(0, 1), (1, 2), (2, 3), (0, 4), (1, 5), (1, 6), (2, 7),
                       (2, 8), (3, 9)]),
        _toy_molecule("isobutane", "CCCCHHHHHHHHHH",
                      [(0, 1), (0, 2), (0, 3), (0, 4), (1, 5), (1, 6), (1, 7),
                       (2, 8), (2, 9), (2, 10), (3, 11), (3, 12), (3, 13)]),
        _toy_molecule("oxirane", "CCOHHHH",
                      [(0, 1), (0, 2), (1, 2), (0, 3), (0, 4), (1, 5), (1, 6)],
                      ring=(0, 1, 2)),
        _toy_molecule("propanol", "CCCOHHHHHHHH",
                      [(0, 1), (1, 2), (2, 3), (0, 4), (0, 5), (0, 6), (1, 7),
                       (1, 8), (2, 9), (2, 10), (3, 11)]),
        _toy_molecule("isopropanol", "CCCOHHHHHHHH",
                      [(0, 1), (1, 2), (1, 3), (0, 4), (0, 5), (0, 6), (1, 7),
                       (2, 8), (2, 9), (2, 10), (3, 11)]),
        _toy_molecule("oxetane", "CCCOHHHHHH",
                      [(0, 1), (1, 2), (2, 3), (0, 3), (0, 4), (0, 5), (1, 6),
                       (1, 7), (2, 8), (2, 9)],
                      ring=(0, 1, 2, 3)),
    ]
    return {
        "format": BENCHMARK_FORMAT,
        "version": 1,
        "temperature": 500.0,
        "defaults": {"count": count, "burn_in": 5000, "thin": 20,
                     "step": 0.07, "tune": True},
        "molecules": molecules,
    }


def energy_model_from_dict(d: dict) -> EnergyModel:
    bonds = tuple(
        BondTerm(t["i"], t["j"], t["rest"], t["stiffness"]) for t in d.get("bonds", ())
    )
    angles = tuple(
        AngleTerm(t["i"], t["j"], t["k"], t["rest"], t["stiffness"])
        for t in d.get("angles", ())
    )
    steric = d.get("steric")
    return EnergyModel(
        bonds,
        angles,
        StericTerm(steric["floor"], steric["stiffness"]) if steric else None,
    )


def load_benchmark_spec(path) -> dict:
    try:
        spec = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ParseError(f"{path}: not valid JSON: {e}") from e
    if spec.get("format") != BENCHMARK_FORMAT:
        raise ParseError(f"{path}: expected format {BENCHMARK_FORMAT!r}")
    if "molecules" not in spec or "temperature" not in spec:
        raise ParseError(f"{path}: benchmark spec needs molecules and temperature")
    return spec


def _molecule_graph(entry: dict) -> MolGraph:
    bonds = tuple(
        Bond(b["i"], b["j"], ring_sizes=tuple(b.get("rings", ())))
        for b in entry["bonds"]
    )
    return MolGraph.from_elements(entry["elements"], bonds)


def initial_conformation(graph: MolGraph, model: EnergyModel, seed: int) -> Conformation:
    """Rough rest-geometry coordinates via the distance-geometry pipeline.

    Bond and angle rest values become tight distance bounds; everything else
    keeps the default steric floor and ceiling. Residual strain is left for
    MCMC burn-in to relax.
    """
    n = graph.n_atoms
    lower = np.full((n, n), edg.STERIC_FLOOR)
    upper = np.full((n, n), edg.DISTANCE_CEILING)

    def clamp(i: int, j: int, d: float, slack: float) -> None:
        lower[i, j] = lower[j, i] = max(d - slack, 0.1)
        upper[i, j] = upper[j, i] = d + slack

    rests = {}
    for t in model.bonds:
        clamp(t.i, t.j, t.rest_length, 0.01)
        rests[frozenset((t.i, t.j))] = t.rest_length
    for t in model.angles:
        a = rests.get(frozenset((t.i, t.j)))
        b = rests.get(frozenset((t.k, t.j)))
        if a is None or b is None:
            continue
        d13 = math.sqrt(a * a + b * b - 2 * a * b * math.cos(t.rest_angle))
        if frozenset((t.i, t.k)) not in rests:
            clamp(t.i, t.k, d13, 0.05)
    np.fill_diagonal(lower, 0.0)
    np.fill_diagonal(upper, 0.0)

    rng = np.random.default_rng(seed)
    bounds = edg.smooth_bounds(edg.BoundsMatrix(lower, upper))
    coords, _, _, _ = edg.refine(edg.gram_embed(edg.metrize(bounds, rng)), bounds,
                                 tol=1e-2)
    return Conformation(graph.elements, coords)


def make_synthetic_benchmark(spec: dict, seed: int) -> list[DatasetRecord]:
    """Sample every molecule of the spec with the Metropolis chain.

    Per molecule, a child seed stream drives the initial geometry, the
    extended-graph build seed, and the chain, so the whole dataset is a pure
    function of (spec, seed). Acceptance below 1% aborts with a hint.
    """
    defaults = spec.get("defaults", {})
    cfg = ISConfig(temperature=float(spec["temperature"]))
    records: list[DatasetRecord] = []
    for index, entry in enumerate(spec["molecules"]):
        name = entry["name"]
        graph = _molecule_graph(entry)
        model = energy_model_from_dict(entry["energy"])
        count = int(entry.get("count", defaults.get("count", 100)))
        burn_in = int(entry.get("burn_in", defaults.get("burn_in", 2000)))
        thin = int(entry.get("thin", defaults.get("thin", 10)))
        step = float(entry.get("step", defaults.get("step", 0.07)))
        tune = bool(entry.get("tune", defaults.get("tune", True)))

        child = np.random.SeedSequence(seed, spawn_key=(index,))
        init_seed, build_seed, chain_seed = child.generate_state(3)
        x0 = initial_conformation(graph, model, int(init_seed))
        result = metropolis_sample(
            model, x0, steps=count * thin, cfg=cfg,
            rng=np.random.default_rng(int(chain_seed)),
            step_size=step, burn_in=burn_in, thin=thin, tune=tune,
        )
        if result.acceptance_rate < 0.01:
            raise GenerationError(
                f"molecule {name!r}: MCMC acceptance {result.acceptance_rate:.2%} "
                f"is pathologically low; adjust the proposal step size"
            )
        for conf in result.conformations():
            records.append(DatasetRecord(name, graph, int(build_seed), conf))
    return records
