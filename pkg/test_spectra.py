import numpy as np
import pytest
from numpy.testing import assert_allclose
from scipy.integrate import quad

from errors import ParameterError
from spectra import (
    Histogram,
    distribution_distance,
    empirical_pdf,
    pool_stats,
    reference_cdf,
    reference_histogram,
    reference_mean,
    reference_pdf,
    select_window,
    spacing_ratios,
    spectrum_stats,
    symmetrize,
    symmetrized_mean,
)


def goe_ratio_sample(n, seed=0):
    """Spacing ratios of 3x3 GOE matrices, distributed exactly as the GOE reference."""
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((n, 3, 3))
    e = np.linalg.eigvalsh(0.5 * (a + np.transpose(a, (0, 2, 1))))
    return (e[:, 2] - e[:, 1]) / (e[:, 1] - e[:, 0])


def poisson_ratio_sample(n, seed=0):
    u = np.random.default_rng(seed).uniform(size=n)
    return u / (1.0 - u)


def test_ratios_of_small_spectrum():
    result = spacing_ratios([0.0, 1.0, 3.0, 4.0])
    assert_allclose(result.ratios, [2.0, 0.5])
    assert result.n_dropped == 0
    assert_allclose(symmetrize(result.ratios), [0.5, 0.5])


def test_degenerate_spacings_are_dropped_before_ratios():
    result = spacing_ratios([0.0, 1.0, 1.0, 3.0])
    assert_allclose(result.ratios, [2.0])
    assert result.n_dropped == 1


def test_ratios_are_scale_and_shift_invariant():
    e = np.cumsum(np.random.default_rng(1).exponential(size=50))
    base = spacing_ratios(e).ratios
    assert np.array_equal(spacing_ratios(4.0 * e).ratios, base)
    assert_allclose(spacing_ratios(3.7 * e + 1.2).ratios, base, rtol=1e-10)


@pytest.mark.parametrize("levels", [[0.0, 1.0], [0.0, 2.0, 1.0]])
def test_bad_spectra_are_rejected(levels):
    with pytest.raises(ParameterError):
        spacing_ratios(levels)


def test_equal_spacings_have_unit_mean():
    assert symmetrized_mean(spacing_ratios(np.arange(10.0)).ratios) == 1.0
    with pytest.raises(ParameterError):
        symmetrized_mean([])


def test_reference_means():
    assert reference_mean("poisson") == pytest.approx(2 * np.log(2) - 1, abs=1e-10)
    assert reference_mean("goe") == pytest.approx(4 - 2 * np.sqrt(3), abs=1e-10)


@pytest.mark.parametrize("kind", ["poisson", "goe"])
def test_reference_densities_are_normalized(kind):
    total, _ = quad(lambda s: reference_pdf(kind, s), 0.0, np.inf, limit=200)
    assert total == pytest.approx(1.0, abs=1e-6)
    assert reference_cdf(kind, 1.0) == pytest.approx(0.5, abs=1e-8)
    assert reference_cdf(kind, np.inf) == pytest.approx(1.0)


def test_reference_density_values():
    assert reference_pdf("poisson", 0.0) == 1.0
    assert reference_pdf("goe", 0.0) == 0.0
    assert reference_pdf("goe", 1.0) == pytest.approx(27.0 / 8.0 * 2.0 / 3.0 ** 2.5)
    with pytest.raises(ParameterError):
        reference_pdf("gue", 1.0)


def test_poisson_spectrum_mean():
    e = np.cumsum(np.random.default_rng(7).exponential(size=500_000))
    stats = spectrum_stats(e)
    assert stats.mean_sym == pytest.approx(0.386, abs=0.005)
    assert stats.tv_poisson < stats.tv_goe


def test_goe_matrix_bulk_mean():
    rng = np.random.default_rng(11)
    parts = []
    for _ in range(100):
        a = rng.standard_normal((400, 400))
        e = np.linalg.eigvalsh(0.5 * (a + a.T))
        parts.append(spectrum_stats(e, index_window=(133, 267)))
    pooled = pool_stats(parts)
    assert pooled.mean_sym == pytest.approx(0.536, abs=0.01)
    assert pooled.tv_goe < pooled.tv_poisson


def test_histogram_density_and_overflow():
    hist = empirical_pdf([1.0, 1.0, 7.0, 9.0], n_bins=10, s_max=2.0)
    assert hist.density[5] == pytest.approx(0.5 / 0.2)
    assert hist.overflow == 0.5
    assert hist.retained + hist.overflow == pytest.approx(1.0)


def test_reference_histogram_has_zero_distance_to_itself():
    edges = np.linspace(0.0, 5.0, 41)
    for kind in ("poisson", "goe"):
        ref = reference_histogram(kind, edges)
        assert ref.retained + ref.overflow == pytest.approx(1.0, abs=1e-8)
        assert distribution_distance(ref, kind) == pytest.approx(0.0, abs=1e-12)


def test_sampled_distributions_are_close_to_their_references():
    poisson = empirical_pdf(poisson_ratio_sample(100_000, seed=1))
    goe = empirical_pdf(goe_ratio_sample(100_000, seed=2))
    assert distribution_distance(poisson, "poisson") < 0.02
    assert distribution_distance(goe, "goe") < 0.02
    assert distribution_distance(poisson, "goe") > 0.15


def test_distance_counts_overflow_mismatch():
    edges = np.linspace(0.0, 5.0, 41)
    ref = reference_histogram("poisson", edges)
    shifted = Histogram(edges, ref.density, 0, ref.overflow + 0.1)
    assert distribution_distance(shifted, "poisson") == pytest.approx(0.05, abs=1e-12)


def test_pooling_ignores_order():
    rng = np.random.default_rng(3)
    parts = [spectrum_stats(np.cumsum(rng.exponential(size=200))) for _ in range(4)]
    forward = pool_stats(parts)
    backward = pool_stats(parts[::-1])
    assert forward.mean_sym == backward.mean_sym
    assert np.array_equal(forward.histogram.density, backward.histogram.density)
    assert forward.n_levels == 800


def test_windows():
    e = np.arange(10.0)
    levels, window = select_window(e, index_window=(2, 5))
    assert_allclose(levels, [2.0, 3.0, 4.0])
    assert window == (2, 5)
    levels, window = select_window(e, energy_window=(3.5, 7.0))
    assert_allclose(levels, [4.0, 5.0, 6.0, 7.0])
    assert window == (4, 8)


def test_window_with_too_few_levels_is_rejected():
    with pytest.raises(ParameterError):
        spectrum_stats(np.arange(10.0), index_window=(0, 2))


def test_summary_carries_references():
    summary = spectrum_stats(np.cumsum(np.ones(20)) ** 1.5).summary()
    assert summary["n_levels"] == 20
    assert summary["n_ratios"] == 18
    assert summary["reference_goe"] == pytest.approx(0.5359, abs=1e-4)
