import math

import numpy as np
import pytest

from confgen import boltzmann
from confgen.boltzmann import (
    AngleTerm,
    BondTerm,
    DegenerateWeightsError,
    EnergyModel,
    ISConfig,
    StericTerm,
    energy,
    is_estimate,
    metropolis_sample,
    observable_by_name,
)
from confgen.molgraph import Conformation

from conftest import single_bond_quadrature


def water_model():
    return EnergyModel(
        bonds=(BondTerm(0, 1, 0.96, 1700.0), BondTerm(0, 2, 0.96, 1700.0)),
        angles=(AngleTerm(1, 0, 2, math.radians(104.5), 250.0),),
        steric=StericTerm(1.5, 100.0),
    )


def water_at_rest():
    theta = math.radians(104.5)
    return Conformation(
        ("O", "H", "H"),
        [[0, 0, 0], [0.96, 0, 0],
         [0.96 * math.cos(theta), 0.96 * math.sin(theta), 0]],
    )


class TestEnergy:
    def test_zero_at_rest_geometry(self):
        # steric floor 1.5 is below the H..H separation, so nothing engages
        assert energy(water_model(), water_at_rest()) == pytest.approx(0.0, abs=1e-20)

    def test_single_stretched_bond(self):
        m = EnergyModel(bonds=(BondTerm(0, 1, 1.0, 300.0),))
        x = Conformation(("C", "C"), [[0, 0, 0], [1.25, 0, 0]])
        assert energy(m, x) == pytest.approx(300.0 * 0.25**2)

    def test_matches_term_by_term_recomputation(self):
        rng = np.random.default_rng(0)
        m = water_model()
        for _ in range(10):
            pos = water_at_rest().positions + 0.3 * rng.standard_normal((3, 3))
            x = Conformation(("O", "H", "H"), pos)

            expected = 0.0
            for t in m.bonds:
                d = np.linalg.norm(pos[t.i] - pos[t.j])
                expected += t.stiffness * (d - t.rest_length) ** 2
            for t in m.angles:
                va, vb = pos[t.i] - pos[t.j], pos[t.k] - pos[t.j]
                cosv = va @ vb / (np.linalg.norm(va) * np.linalg.norm(vb))
                expected += t.stiffness * (math.acos(np.clip(cosv, -1, 1))
                                           - t.rest_angle) ** 2
            d_hh = np.linalg.norm(pos[1] - pos[2])
            expected += m.steric.stiffness * max(m.steric.floor - d_hh, 0.0) ** 2

            assert energy(m, x) == pytest.approx(expected, rel=1e-12)

    def test_invalid_terms_rejected(self):
        with pytest.raises(ValueError):
            EnergyModel(bonds=(BondTerm(0, 1, -1.0, 300.0),))
        m = EnergyModel(bonds=(BondTerm(0, 5, 1.0, 300.0),))
        with pytest.raises(ValueError):
            energy(m, Conformation(("C", "C"), [[0, 0, 0], [1, 0, 0]]))


class TestMetropolis:
    def test_high_temperature_accepts_everything(self, single_bond_system):
        model, x0, _ = single_bond_system
        hot = ISConfig(temperature=1e9)
        res = metropolis_sample(model, x0, steps=2000, cfg=hot,
                                rng=np.random.default_rng(0), tune=False)
        assert res.acceptance_rate > 0.999

    def test_fixed_seed_reproduces_chain(self, single_bond_system):
        model, x0, cfg = single_bond_system
        a = metropolis_sample(model, x0, steps=3000, cfg=cfg,
                              rng=np.random.default_rng(5), burn_in=200, thin=5)
        b = metropolis_sample(model, x0, steps=3000, cfg=cfg,
                              rng=np.random.default_rng(5), burn_in=200, thin=5)
        assert np.array_equal(a.positions, b.positions)
        assert a.acceptance_rate == b.acceptance_rate

    def test_thinning_controls_chain_length(self, single_bond_system):
        model, x0, cfg = single_bond_system
        res = metropolis_sample(model, x0, steps=1000, cfg=cfg,
                                rng=np.random.default_rng(1), thin=10)
        assert len(res) == 100

    def test_long_chain_matches_quadrature_moments(self, single_bond_system,
                                                   long_single_bond_chain):
        model, _, cfg = single_bond_system
        bond = model.bonds[0]
        mean_q, var_q = single_bond_quadrature(bond.rest_length, bond.stiffness,
                                               cfg.kbt)
        pos = long_single_bond_chain.positions
        d = np.sqrt(((pos[:, 0] - pos[:, 1]) ** 2).sum(axis=1))
        assert abs(d.mean() - mean_q) / mean_q < 0.05
        assert abs(d.var() - var_q) / var_q < 0.05


class TestObservables:
    def test_builtins(self):
        x = Conformation(("C", "C"), [[0, 0, 0], [2.0, 0, 0]])
        assert observable_by_name("one")(x) == 1.0
        assert observable_by_name("distance:0-1")(x) == pytest.approx(2.0)
        assert observable_by_name("rgyr")(x) == pytest.approx(1.0)

    def test_unknown_name(self):
        with pytest.raises(ValueError):
            observable_by_name("entropy")


class TestIsEstimate:
    def _proposals(self, rng, n=20):
        return [
            Conformation(("O", "H"), [[0, 0, 0], [0.96 + dx, 0, 0]])
            for dx in rng.normal(0, 0.05, size=n)
        ]

    def test_constant_observable_is_exactly_one(self, single_bond_system):
        model, _, cfg = single_bond_system
        proposals = self._proposals(np.random.default_rng(0))
        est = is_estimate(observable_by_name("one"), proposals, model, cfg)
        assert est.value == 1.0

    def test_identical_proposals_return_observable(self, single_bond_system):
        model, _, cfg = single_bond_system
        x = Conformation(("O", "H"), [[0, 0, 0], [1.10, 0, 0]])
        est = is_estimate(observable_by_name("distance:0-1"), [x] * 7, model, cfg)
        assert est.value == pytest.approx(1.10)
        assert est.ess == pytest.approx(7.0)

    def test_constant_energy_shift_is_exact(self, single_bond_system):
        # dyadic energies make the shifted subtraction exact in floating point
        model, _, cfg = single_bond_system
        rng = np.random.default_rng(1)
        proposals = self._proposals(rng)
        obs = observable_by_name("distance:0-1")
        energies = rng.integers(0, 64, size=len(proposals)) * 0.25
        base = is_estimate(obs, proposals, model, cfg, energies=energies)
        shifted = is_estimate(obs, proposals, model, cfg, energies=energies + 13.5)
        assert shifted.value == base.value
        assert shifted.ess == base.ess

    def test_rigid_motion_invariance(self, single_bond_system):
        model, _, cfg = single_bond_system
        rng = np.random.default_rng(2)
        proposals = self._proposals(rng)
        q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
        moved = [Conformation(x.elements, x.positions @ q.T + [1.0, -2.0, 0.5])
                 for x in proposals]
        obs = observable_by_name("distance:0-1")
        a = is_estimate(obs, proposals, model, cfg)
        b = is_estimate(obs, moved, model, cfg)
        assert b.value == pytest.approx(a.value, rel=1e-9)
        assert b.ess == pytest.approx(a.ess, rel=1e-9)

    def test_ess_bounds(self, single_bond_system):
        model, _, cfg = single_bond_system
        proposals = self._proposals(np.random.default_rng(3), n=30)
        est = is_estimate(observable_by_name("one"), proposals, model, cfg)
        assert est.ess <= est.n
        flat = is_estimate(observable_by_name("one"), proposals, model, cfg,
                           energies=np.zeros(30))
        assert flat.ess == pytest.approx(30.0)

    def test_degenerate_weights(self, single_bond_system):
        model, _, cfg = single_bond_system
        proposals = self._proposals(np.random.default_rng(4), n=3)
        with pytest.raises(DegenerateWeightsError):
            is_estimate(observable_by_name("one"), proposals, model, cfg,
                        energies=np.array([np.inf, np.nan, np.inf]))

    def test_overlap_diagnostic_reported(self, single_bond_system):
        model, _, cfg = single_bond_system
        proposals = self._proposals(np.random.default_rng(5))
        est = is_estimate(observable_by_name("one"), proposals, model, cfg)
        assert est.min_pairwise_distance > 0.0
        assert math.isfinite(est.min_pairwise_distance)
