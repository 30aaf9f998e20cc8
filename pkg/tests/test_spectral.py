import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from zsqbench import spectral as S
from zsqbench.errors import DomainError, NumericError, ParameterError

from oracles import naive_dft2

POW2 = [1, 2, 4, 8, 16]
ODD = [3, 5, 6, 7, 12]


# -- transform oracle ----------------------------------------------------------------------

@pytest.mark.parametrize("h", POW2 + ODD)
@pytest.mark.parametrize("w", [1, 4, 5, 16])
def test_fft2_matches_naive_dft(h, w, rng):
    x = rng.normal(size=(h, w))
    np.testing.assert_allclose(S.fft2(x).coeffs, naive_dft2(x), rtol=0, atol=1e-6)


def test_fft2_random_8x8_against_oracle(rng):
    x = rng.uniform(-1, 1, (8, 8))
    assert np.max(np.abs(S.fft2(x).coeffs - naive_dft2(x))) < 1e-6


def test_fft2_is_batched_over_leading_axes(rng):
    x = rng.normal(size=(2, 3, 8, 8))
    batched = S.fft2(x).coeffs
    for i in range(2):
        for c in range(3):
            np.testing.assert_allclose(batched[i, c], S.fft2(x[i, c]).coeffs, atol=1e-12)


def test_constant_image_has_only_dc(rng):
    c, n = 0.7, 16
    f = S.fft2(np.full((n, n), c)).magnitude
    assert f[n // 2, n // 2] == pytest.approx(c * n)
    f[n // 2, n // 2] = 0
    assert f.max() < 1e-12


def test_corner_impulse_has_flat_magnitude():
    x = np.zeros((8, 8))
    x[0, 0] = 1.0
    np.testing.assert_allclose(S.fft2(x).magnitude, np.full((8, 8), 1 / 8), atol=1e-12)


@pytest.mark.parametrize("shape", [(0, 4), (4, 0), (3,)])
def test_empty_or_flat_input_is_domain_error(shape):
    with pytest.raises(DomainError):
        S.fft2(np.zeros(shape))


@pytest.mark.parametrize("n", [2, 4, 8, 16, 32, 64, 128])
def test_round_trip_power_of_two_sizes(n, rng):
    x = rng.normal(size=(n, n))
    assert np.max(np.abs(S.ifft2(S.fft2(x)) - x)) <= 1e-5


@settings(max_examples=60, deadline=None)
@given(hnp.arrays(np.float64, st.tuples(st.sampled_from([1, 2, 3, 4, 8, 9, 16]), st.sampled_from([1, 2, 4, 5, 16, 32])),
                  elements=st.floats(-100, 100)))
def test_parseval_and_round_trip(x):
    f = S.fft2(x)
    e_img, e_spec = np.sum(x ** 2), np.sum(f.magnitude ** 2)
    assert abs(e_img - e_spec) <= 1e-4 * max(e_img, 1e-12) + 1e-12
    assert np.max(np.abs(S.ifft2(f).real - x)) <= 1e-5 * max(1.0, np.abs(x).max())


@settings(max_examples=60, deadline=None)
@given(hnp.arrays(np.float64, st.sampled_from([(4, 4), (8, 8), (16, 8), (5, 7)]), elements=st.floats(-10, 10)))
def test_real_input_spectrum_is_conjugate_symmetric(x):
    h, w = x.shape
    F = np.fft.ifftshift(S.fft2(x).coeffs)  # back to natural order for index arithmetic
    mirror = F[(-np.arange(h)) % h][:, (-np.arange(w)) % w]
    assert np.max(np.abs(F - np.conj(mirror))) <= 1e-4


# -- Gaussian mask -------------------------------------------------------------------------

def test_mask_values_at_reference_radii():
    m = S.gaussian_mask(64, 64, 5.0)
    assert m.values[32, 32] == 1.0
    assert m.values[32, 37] == pytest.approx(np.exp(-0.5), rel=1e-12)   # D = D0
    assert m.values[32 + 15, 32] == pytest.approx(np.exp(-4.5), rel=1e-12)  # D = 3 D0
    assert np.exp(-0.5) == pytest.approx(0.60653, abs=1e-5)
    assert np.exp(-4.5) == pytest.approx(0.01111, abs=1e-5)


@pytest.mark.parametrize("d0", [0.0, -1.0])
def test_mask_rejects_nonpositive_cutoff(d0):
    with pytest.raises(ParameterError):
        S.gaussian_mask(8, 8, d0)


@settings(max_examples=50, deadline=None)
@given(st.sampled_from([4, 7, 8, 16, 32]), st.floats(1.0, 50))  # D0 >= 1 keeps exp() clear of underflow
def test_mask_is_radial_and_decreasing(n, d0):
    m = S.gaussian_mask(n, n, d0).values
    d = S.radius_grid(n, n)
    assert np.all(m > 0) and np.all(m <= 1)
    assert m[n // 2, n // 2] == 1.0
    order = np.argsort(d, axis=None, kind="stable")
    dv, mv = d.ravel()[order], m.ravel()[order]
    # equal radius -> equal mask value; larger radius -> strictly smaller mask value
    same = np.isclose(np.diff(dv), 0)
    assert np.all(np.abs(np.diff(mv)[same]) < 1e-15)
    assert np.all(np.diff(mv)[~same] < 0)


def test_rescale_d0():
    assert S.rescale_d0(56.0, 32) == pytest.approx(8.0)


# -- low-pass filter -------------------------------------------------------------------------

def test_constant_image_passes_unchanged():
    x = np.full((3, 16, 16), -0.4, np.float32)
    np.testing.assert_allclose(S.lowpass_filter(x, 2.0), x, atol=1e-5)


def test_huge_cutoff_is_all_pass(rng):
    x = rng.normal(size=(2, 3, 32, 32)).astype(np.float32)
    np.testing.assert_allclose(S.lowpass_filter(x, 1e6), x, atol=1e-4)


def test_checkerboard_is_removed():
    n = 32
    x = np.where(np.add.outer(np.arange(n), np.arange(n)) % 2 == 0, 1.0, -1.0)
    y = S.lowpass_filter(x, n / 8)
    assert np.sum(y ** 2) < 0.01 * np.sum(x ** 2)


def test_filter_clamps_to_value_range(rng):
    x = rng.uniform(-1, 1, (3, 8, 8)).astype(np.float32)
    x[:, 0, 0] = 5.0
    lo, hi = np.array([-0.5, -0.6, -0.7]).reshape(3, 1, 1), np.array([0.2, 0.3, 0.4]).reshape(3, 1, 1)
    y = S.lowpass_filter(x, 2.0, value_range=(lo, hi))
    assert np.all(y >= lo - 1e-7) and np.all(y <= hi + 1e-7)
    assert y.dtype == np.float32


def test_imaginary_residue_guard(rng):
    # a zero tolerance trips the guard on ordinary rounding noise
    with pytest.raises(NumericError):
        S.lowpass_filter(rng.normal(size=(8, 8)), 2.0, residue_tol=0.0)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.5, 8), st.floats(0.5, 8))
def test_smaller_cutoff_leaves_less_high_band_energy(seed, a, b):
    d0a, d0b = sorted((a, b))
    x = np.random.default_rng(seed).normal(size=(16, 16))
    band = S.radius_grid(16, 16) > 16 / 4

    def high(y):
        return np.sum(S.fft2(y).magnitude[band] ** 2)

    assert high(S.lowpass_filter(x, d0a)) <= high(S.lowpass_filter(x, d0b)) * (1 + 1e-9) + 1e-12


# -- amplitude distribution ---------------------------------------------------------------------

def test_constant_batch_puts_everything_in_bin_zero():
    prof = S.amplitude_distribution(np.full((4, 3, 16, 16), 0.3), num_bins=8)
    assert prof.mean[0] > 0
    assert np.all(prof.mean[1:] < 1e-12)


def test_white_noise_profile_is_flat():
    x = np.random.default_rng(0).normal(size=(256, 16, 16))
    prof = S.amplitude_distribution(x, num_bins=8)
    body = prof.mean[1:]
    assert body.max() / body.min() < 2


def test_filtering_lowers_the_top_quartile(rng):
    x = rng.normal(size=(16, 3, 32, 32))
    before = S.amplitude_distribution(x).high_band_mean()
    after = S.amplitude_distribution(S.lowpass_filter(x, 32 / 8)).high_band_mean()
    assert after < before


def test_profile_bins_cover_every_cell():
    prof = S.amplitude_distribution(np.zeros((1, 8, 8)), num_bins=4)
    assert prof.counts.sum() == 64
    assert prof.edges[0] == 0 and prof.edges[-1] == pytest.approx(np.sqrt(32))
    assert len(prof.to_rows()) == 4


def test_profile_errors():
    with pytest.raises(ParameterError):
        S.amplitude_distribution(np.zeros((2, 8, 8)), num_bins=1)
    with pytest.raises(DomainError):
        S.amplitude_distribution(np.zeros((0, 8, 8)))


# -- noise ---------------------------------------------------------------------------------------

@pytest.mark.parametrize("kind", S.NOISE_KINDS)
def test_zero_level_is_identity(kind, rng):
    x = rng.normal(size=(3, 8, 8)).astype(np.float32)
    np.testing.assert_array_equal(S.inject_noise(x, kind, 0.0, rng), x)


def test_full_salt_pepper_hits_only_extremes(rng):
    x = rng.uniform(0.2, 0.8, (3, 16, 16))
    x[0, 0, 0], x[0, 0, 1] = 0.0, 1.0
    y = S.inject_noise(x, "salt_pepper", 1.0, rng)
    assert set(np.unique(y)) <= {0.0, 1.0}


def test_salt_pepper_respects_explicit_range(rng):
    y = S.inject_noise(np.zeros((4, 4)), "salt_pepper", 1.0, rng, value_range=(-2.0, 3.0))
    assert set(np.unique(y)) <= {-2.0, 3.0}


def test_gaussian_noise_std():
    y = S.inject_noise(np.zeros(10 ** 6), "gaussian", 0.1, np.random.default_rng(0))
    assert 0.095 <= y.std() <= 0.105


def test_uniform_noise_bounds_and_speckle_scales(rng):
    u = S.inject_noise(np.zeros(10_000), "uniform", 0.3, rng)
    assert u.min() >= -0.3 and u.max() <= 0.3
    s = S.inject_noise(np.zeros(100), "speckle", 0.5, rng)
    assert np.all(s == 0)


@pytest.mark.parametrize("kind,level", [("gaussian", -0.1), ("salt_pepper", 1.5), ("pink", 0.1)])
def test_noise_parameter_errors(kind, level):
    with pytest.raises(ParameterError):
        S.inject_noise(np.zeros(4), kind, level)


def test_noise_is_seed_deterministic():
    a = S.inject_noise(np.zeros(50), "gaussian", 1.0, np.random.default_rng(3))
    b = S.inject_noise(np.zeros(50), "gaussian", 1.0, np.random.default_rng(3))
    assert a.tobytes() == b.tobytes()
