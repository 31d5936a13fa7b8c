import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from photostat.distributions import (
    ModelSpec,
    PhotonDistribution,
    heralded_photon,
    make_coherent,
    make_fock,
    make_multithermal,
    make_thermal,
)
from photostat.em import EmConfig, ReconstructionResult, reconstruct, reconstruct_frequencies
from photostat.errors import (
    DomainError,
    IllPosedFitError,
    ShapeError,
    UndefinedUncertaintyError,
    UndefinedValueError,
)
from photostat.forward import (
    EfficiencyGrid,
    OnOffDataset,
    response_matrix_entries,
    simulate_dataset,
)
from photostat.inference import (
    ParameterGrid,
    UncertaintyReport,
    confidence_intervals,
    fit_model,
    klyshko,
    klyshko_with_uncertainty,
    poisson_background_fit,
    residual_uncertainty,
    scan_modes,
)


def flat_delta(N, value=0.01):
    return UncertaintyReport(np.full(N + 1, value), np.zeros(N + 1, dtype=int))


class TestUncertainty:
    def test_single_row(self):
        A = response_matrix_entries([0.5], 2)
        rep = residual_uncertainty([0.01], A)
        assert rep.delta_rho[2] == pytest.approx(0.04, abs=1e-15)
        np.testing.assert_allclose(rep.delta_rho, [0.01, 0.02, 0.04])

    def test_zero_on_exact_fit(self):
        # Dyadic values: p = 11/16 and 37/64 are exact binary fractions.
        rho = PhotonDistribution([0.5, 0.25, 0.25])
        g = EfficiencyGrid([0.5, 0.75])
        data = OnOffDataset(g, [11, 37], [16, 64])
        res = ReconstructionResult(rho, 0, 0.0, True, etas=g.etas)
        rep = confidence_intervals(res, data)
        assert rep.delta_rho.tolist() == [0.0, 0.0, 0.0]
        assert rep.excluded_pairs == []

    def test_floor_excludes_and_reports(self):
        A = response_matrix_entries([0.2, 0.995], 4)
        rep = residual_uncertainty([0.001, 0.002], A)
        assert [tuple(p) for p in rep.excluded_pairs] == [(1, 3), (1, 4)]
        assert rep.excluded_terms.tolist() == [0, 0, 0, 1, 1]
        assert rep.delta_rho[4] == pytest.approx(0.001 / 0.8**4)

    def test_undefined_index(self):
        # 0.005**2 is retained, 0.005**3 falls below the floor
        A = response_matrix_entries([0.995, 1.0], 3)
        rep = residual_uncertainty([0.01, 0.02], A)
        assert rep.undefined_indices == [3]
        assert rep.excluded_terms.tolist() == [0, 1, 1, 2]
        with pytest.raises(UndefinedUncertaintyError):
            rep.at(3)
        assert rep.at(0) == pytest.approx(0.015)
        assert json.loads(json.dumps(rep.to_dict()))["delta_rho"][3] is None

    @settings(max_examples=30)
    @given(st.permutations(range(6)))
    def test_row_order_invariant(self, perm):
        etas = np.linspace(0.1, 0.7, 6)
        A = response_matrix_entries(etas, 5)
        r = np.array([1e-3, -2e-3, 5e-4, 3e-3, -1e-4, 2e-4])
        base = residual_uncertainty(r, A).delta_rho
        perm = list(perm)
        np.testing.assert_allclose(residual_uncertainty(r[perm], A[perm]).delta_rho, base, rtol=1e-14)

    def test_grid_mismatch(self):
        data = OnOffDataset(EfficiencyGrid([0.1, 0.2]), [9, 8], [10, 10])
        res = ReconstructionResult(make_fock(0, 2), 0, 0.0, True, etas=np.array([0.1, 0.3]))
        with pytest.raises(ShapeError):
            confidence_intervals(res, data)

    def test_nonnegative_and_sized(self):
        truth = make_coherent(0.3, 8)
        data = simulate_dataset(truth, EfficiencyGrid.equally_spaced(10, 0.6), 10**5, 3)
        res = reconstruct(data, EmConfig(8, max_iterations=5000))
        rep = confidence_intervals(res, data)
        assert rep.delta_rho.shape == (9,)
        assert np.all(rep.delta_rho >= 0)


class TestKlyshko:
    @pytest.mark.parametrize("mu", [0.1, 0.5, 1.0, 2.0])
    @pytest.mark.parametrize("n", [1, 2, 3, 4, 5])
    def test_poisson(self, mu, n):
        assert klyshko(make_coherent(mu, 30), n) == pytest.approx(1.0, abs=1e-12)

    @pytest.mark.parametrize("n", [1, 2, 3, 4, 5])
    def test_thermal(self, n):
        assert klyshko(make_thermal(0.74, 40), n) == pytest.approx((n + 1) / n, abs=1e-12)

    def test_heralded(self):
        d = heralded_photon(0.027, 0.0185, 6)
        rho1 = (1 - 0.027) / 1.0185
        expected = 2 * 0.027 * 0.0185 * rho1 / rho1**2
        assert klyshko(d, 1) == pytest.approx(expected, rel=1e-12)
        assert klyshko(d, 1) == pytest.approx(1.046e-3, rel=1e-3)

    @settings(max_examples=50)
    @given(st.floats(0, 0.05), st.floats(0, 0.05))
    def test_heralded_is_nonclassical(self, vacuum, ratio):
        assert klyshko(heralded_photon(vacuum, ratio, 4), 1) < 1

    @pytest.mark.parametrize("n", [0, 3])
    def test_index_range(self, n):
        with pytest.raises(DomainError):
            klyshko(PhotonDistribution([0.4, 0.3, 0.2, 0.1]), n)

    def test_zero_denominator(self):
        with pytest.raises(UndefinedValueError):
            klyshko(PhotonDistribution([0.5, 0.0, 0.5]), 1)

    def test_propagation_example(self):
        rho = PhotonDistribution([0.5, 0.25, 0.25])
        delta = flat_delta(2)
        value, err = klyshko_with_uncertainty(rho, delta, 1)
        rel = math.sqrt((0.01 / 0.5) ** 2 + (0.01 / 0.25) ** 2 + 4 * (0.01 / 0.25) ** 2)
        assert value == pytest.approx(4.0, abs=1e-12)
        assert rel == pytest.approx(0.091652, abs=1e-6)
        assert err == pytest.approx(4.0 * rel, abs=1e-12)
        assert err == pytest.approx(0.366606, abs=1e-6)

    def test_propagation_scales_linearly(self):
        rho = make_coherent(0.5, 10)
        _, e1 = klyshko_with_uncertainty(rho, flat_delta(10, 0.003), 2)
        _, e2 = klyshko_with_uncertainty(rho, flat_delta(10, 0.006), 2)
        assert e2 == pytest.approx(2 * e1, rel=1e-14)

    def test_zero_uncertainty(self):
        assert klyshko_with_uncertainty(make_coherent(0.5, 10), flat_delta(10, 0.0), 1)[1] == 0.0

    def test_zero_neighbour(self):
        with pytest.raises(UndefinedValueError):
            klyshko_with_uncertainty(PhotonDistribution([0.5, 0.5, 0.0]), flat_delta(2), 1)


class TestFits:
    @pytest.mark.parametrize(
        "family, spec",
        [
            ("coherent", ModelSpec("coherent", 10, mu=0.7)),
            ("thermal", ModelSpec("thermal", 30, mu=0.4)),
            ("fock", ModelSpec("fock", 5, n0=2)),
        ],
    )
    def test_recovers_generating_model(self, family, spec):
        rho = spec.build()
        fit = fit_model(rho, flat_delta(spec.truncation), family)
        assert fit.reduced_chi_square == pytest.approx(0.0, abs=1e-12)
        for key, value in fit.fitted_parameters.items():
            assert value == pytest.approx(getattr(spec, key), abs=1e-6)

    def test_multithermal_scan_recovers_modes(self):
        rho = make_multithermal(0.74, 3, 20)
        fit = fit_model(rho, flat_delta(20), "multithermal", ParameterGrid(modes=(1, 2, 3, 4, 100)))
        assert fit.fitted_parameters["modes"] == 3
        assert fit.fitted_parameters["mu"] == pytest.approx(0.74, abs=1e-6)
        assert fit.reduced_chi_square == pytest.approx(0.0, abs=1e-12)
        assert fit.degrees_of_freedom == 21 - 2

    def test_scan_modes_one_entry_per_mode(self):
        rho = make_multithermal(0.74, 2, 20)
        scans = scan_modes(rho, flat_delta(20), [1, 2, 500])
        assert [s.fitted_parameters["modes"] for s in scans] == [1, 2, 500]
        chi = [s.reduced_chi_square for s in scans]
        assert chi[1] < chi[0] and chi[1] < chi[2]

    def test_tie_goes_to_first_grid_point(self):
        rho = make_fock(0, 4)
        fit = fit_model(rho, flat_delta(4), "multithermal", ParameterGrid(modes=(3, 1, 2)))
        assert fit.fitted_parameters["modes"] == 3

    def test_zero_uncertainty_is_ill_posed(self):
        with pytest.raises(IllPosedFitError):
            fit_model(make_coherent(0.5, 10), flat_delta(10, 0.0), "coherent")

    def test_nan_indices_are_skipped(self):
        rho = make_coherent(0.5, 10)
        delta = np.full(11, 0.01)
        delta[10] = np.nan
        rep = UncertaintyReport(delta, np.zeros(11, dtype=int))
        fit = fit_model(rho, rep, "coherent")
        assert fit.degrees_of_freedom == 10 - 1

    def test_unknown_family(self):
        with pytest.raises(DomainError):
            fit_model(make_coherent(0.5, 10), flat_delta(10), "squeezed")

    def test_bad_grid(self):
        with pytest.raises(DomainError):
            ParameterGrid(modes=())
        with pytest.raises(DomainError):
            ParameterGrid(modes=(0,))
        with pytest.raises(DomainError):
            ParameterGrid(weights=(1.2,))


class TestBackgroundFit:
    def test_unit_weight_matches_plain_fit(self):
        rho = make_multithermal(0.6, 2, 12)
        delta = flat_delta(12, 0.002)
        grid = ParameterGrid(modes=(1, 2, 5), weights=(1.0,))
        a = poisson_background_fit(rho, delta, "multithermal", grid)
        b = fit_model(rho, delta, "multithermal", grid)
        assert a.reduced_chi_square == pytest.approx(b.reduced_chi_square, abs=1e-15)
        assert a.degrees_of_freedom == b.degrees_of_freedom
        assert a.model == b.model

    def test_exact_mixture(self):
        N = 10
        truth = ModelSpec("mixture", N, components=(
            (0.5, ModelSpec("multithermal", N, mu=0.5, modes=2)),
            (0.5, ModelSpec("coherent", N, mu=0.3)),
        ))
        rho = truth.build()
        fit = poisson_background_fit(rho, flat_delta(N, 1e-3), "multithermal", ParameterGrid(modes=(2,)))
        assert fit.fitted_parameters["weight"] == 0.5
        assert fit.reduced_chi_square < 1e-8

    def test_simulated_mixture(self, mixture_reconstruction):
        rho, delta = mixture_reconstruction
        grid = ParameterGrid(modes=(2,))
        mixed = poisson_background_fit(rho, delta, "multithermal", grid)
        plain = fit_model(rho, delta, "multithermal", grid)
        assert abs(mixed.fitted_parameters["weight"] - 0.5) <= 0.15
        assert mixed.reduced_chi_square <= plain.reduced_chi_square

    def test_bad_base(self):
        with pytest.raises(DomainError):
            poisson_background_fit(make_coherent(0.5, 10), flat_delta(10), "fock")


@pytest.fixture(scope="module")
def mixture_reconstruction():
    N = 10
    truth = ModelSpec("mixture", N, components=(
        (0.5, ModelSpec("multithermal", N, mu=0.5, modes=2)),
        (0.5, ModelSpec("coherent", N, mu=0.3)),
    )).build()
    data = simulate_dataset(truth, EfficiencyGrid.equally_spaced(20, 0.9), 10**6, 12345)
    res = reconstruct(data, EmConfig(N))
    return res.rho, confidence_intervals(res, data)


def test_coherent_recovery_end_to_end():
    truth = make_coherent(0.02, 8)
    data = simulate_dataset(truth, EfficiencyGrid.equally_spaced(15, 0.66), 10**6, 12345)
    res = reconstruct(data, EmConfig(8, max_iterations=10**5))
    fit = fit_model(res.rho, confidence_intervals(res, data), "coherent")
    assert abs(fit.fitted_parameters["mu"] - 0.02) <= 0.1 * 0.02


def test_exact_data_gives_zero_uncertainty():
    truth = PhotonDistribution([0.5, 0.3, 0.2])
    etas = np.linspace(0.1, 0.9, 10)
    f = response_matrix_entries(etas, 2) @ truth.probs
    res = reconstruct_frequencies(f, etas, EmConfig(2, tolerance=1e-15, max_iterations=10**5))
    rep = residual_uncertainty(response_matrix_entries(etas, 2) @ res.rho.probs - f,
                               response_matrix_entries(etas, 2))
    assert np.all(rep.delta_rho < 1e-13)
