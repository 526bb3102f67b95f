from dataclasses import fields

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from swapnet_ct.corruption import (
    I0,
    AwgnParams,
    BackgroundPoly,
    CorruptionParams,
    CorruptionRanges,
    apply_blur,
    apply_scatter,
    background_coeffs,
    background_field,
    colored_noise,
    corrupt_awgn,
    corrupt_post_log,
    gaussian_kernel2d,
    input_snr_db,
    poisson_field,
    sample_params,
    sample_stack_params,
)
from swapnet_ct.geometry import POST_LOG, Volume, desk_geometry, forward_project
from swapnet_ct.phantom import PhantomSpec, generate_phantom, randomize_spec

RANGE_FIELDS = {
    "blur_sigma_px": "blur_sigma_px",
    "blur_orientation_deg": "blur_orientation_deg",
    "scatter_sigma_px": "scatter_sigma_px",
    "scatter_kappa": "scatter_kappa",
    "background_level": "background_level",
    "background_tilt_x": "background_tilt",
    "background_tilt_y": "background_tilt",
    "gamma_level": "gamma_level",
    "photon_level": "photon_level",
}


@pytest.fixture(scope="module")
def phantom():
    return generate_phantom(randomize_spec(PhantomSpec(), 11))


def test_published_ranges():
    r = CorruptionRanges()
    assert r.blur_sigma_px == (1, 3)
    assert r.blur_orientation_deg == (5, 26)
    assert r.scatter_sigma_px == (10, 30)
    assert r.scatter_kappa == (0.1, 0.3)
    assert r.background_level == (0.5, 1.5)
    assert r.background_tilt == (-0.1, 0.1)
    assert r.gamma_level == (39000, 50000)
    assert r.photon_level == (350, 450)
    assert r.i0 == 3.201e-4


def test_blur_sigma_uniform_statistics():
    vals = np.array([sample_params(rng_seed=s).blur_sigma_px for s in range(10_000)])
    assert vals.min() >= 1 and vals.max() <= 3
    assert vals.mean() == pytest.approx(2.0, abs=0.02)


def test_same_seed_same_params_and_views_differ():
    assert sample_params(rng_seed=9) == sample_params(rng_seed=9)
    a, b = sample_stack_params(CorruptionRanges(), 3, 2)
    assert a.scatter_sigma_px != b.scatter_sigma_px
    assert sample_stack_params(CorruptionRanges(), 3, 2) == [a, b]


def test_kernels_unit_sum():
    for args in [(1.0,), (2.0, 1.0, 15.0), (3.0, 1.5, 26.0), (0.5,)]:
        assert gaussian_kernel2d(*args).sum() == pytest.approx(1.0, abs=1e-12)


def test_flat_image_passes_through_blur_and_scatter():
    flat = np.full((40, 40), 2.5)
    p = CorruptionParams(blur_sigma_px=2.0, scatter_kappa=0.2, scatter_sigma_px=20.0)
    np.testing.assert_allclose(apply_blur(flat, p), flat, rtol=1e-6)
    np.testing.assert_allclose(apply_scatter(flat, p), 0.2 * flat, rtol=1e-6)


def test_point_source_second_moments():
    img = np.zeros((41, 41))
    img[20, 20] = 1.0
    p = CorruptionParams(blur_sigma_px=2.0, blur_orientation_deg=0.0, detector_blur_sigma_px=0.0)
    out = apply_blur(img, p)
    assert out.sum() == pytest.approx(1.0, rel=1e-6)
    idx = np.arange(41) - 20
    along_row = (out.sum(axis=0) * idx**2).sum()  # spread over column index
    across = (out.sum(axis=1) * idx**2).sum()
    assert along_row == pytest.approx(2.0**2, rel=0.05)
    assert across == pytest.approx((2.0 * p.blur_aspect) ** 2, rel=0.05)


def test_blur_flux_preserved():
    rng = np.random.default_rng(0)
    img = np.zeros((48, 48))
    img[12:36, 12:36] = rng.random((24, 24))
    out = apply_blur(img, sample_params(rng_seed=4))
    assert out.sum() == pytest.approx(img.sum(), rel=1e-4)


def _edge_width(profile):
    lo, hi = profile.min(), profile.max()
    p = (profile - lo) / (hi - lo)
    return np.argmax(p >= 0.9) - np.argmax(p >= 0.1)


def test_edge_width_grows_with_sigma():
    img = np.zeros((48, 48))
    img[:, 24:] = 1.0
    widths = []
    for s in (1.0, 3.0):
        out = apply_blur(img, CorruptionParams(blur_sigma_px=s, blur_orientation_deg=0.0, detector_blur_sigma_px=0.0))
        fine = np.interp(np.linspace(0, 47, 4701), np.arange(48), out[24])
        widths.append(_edge_width(fine))
    assert widths[1] > widths[0]


def test_blur_kernel_larger_than_detector_rejected():
    with pytest.raises(ValueError, match="larger than the detector"):
        apply_blur(np.ones((20, 20)), CorruptionParams(blur_sigma_px=3.0))


def test_scatter_zero_and_energy_ratio():
    p = CorruptionParams(scatter_kappa=0.2, scatter_sigma_px=10.0)
    assert not apply_scatter(np.zeros((32, 32)), p).any()
    img = np.zeros((160, 160))
    yy, xx = np.mgrid[:160, :160]
    img[(yy - 80) ** 2 + (xx - 80) ** 2 < 15**2] = 1.0
    ratio = apply_scatter(img, p).sum() / img.sum()
    assert ratio == pytest.approx(0.2, rel=0.02)


def test_background_polynomial():
    assert not background_field(BackgroundPoly((0.0, 0.0), (0.0, 0.0)), (5, 6)).any()
    np.testing.assert_array_equal(background_field(BackgroundPoly((3.0,), (0.0,)), (4, 4)), 3.0)
    f = background_field(BackgroundPoly((1.0, 0.1), (0.0, -0.1)), (11, 11))
    # row 0 is y=-1, last column is x=+1
    assert f[0, -1] == pytest.approx(1.2, abs=1e-12)


def test_background_coefficients_relative_to_centre():
    p = CorruptionParams(background_level=1.3, background_tilt_x=0.05, background_tilt_y=-0.08)
    c = background_coeffs(p, 2.0)
    assert c.a[0] == pytest.approx(2.6)
    assert c.a[1] / c.a[0] == pytest.approx(0.05)
    assert c.b[1] / c.a[0] == pytest.approx(-0.08)


def test_all_ranges_honoured_over_ten_thousand_draws():
    r = CorruptionRanges()
    draws = [sample_params(r, s) for s in range(10_000)]
    for name, rng_name in RANGE_FIELDS.items():
        vals = np.array([getattr(d, name) for d in draws])
        lo, hi = getattr(r, rng_name)
        assert vals.min() >= lo and vals.max() <= hi, name


def test_poisson_variance_equals_mean():
    rng = np.random.default_rng(0)
    signal = np.linspace(0.5, 1.5, 1000 * 1000).reshape(1000, 1000)
    counts, lam = poisson_field(signal, 400.0, rng)
    resid = counts - lam
    assert resid.var() / lam.mean() == pytest.approx(1.0, abs=0.03)
    assert counts.mean() == pytest.approx(400.0, rel=1e-3)


def test_gamma_component_concentrates():
    s = np.linspace(0.5, 1.5, 64 * 64).reshape(64, 64)
    p = CorruptionParams(gamma_level=1e9, kappa_p=0.0, gamma_kernel_sigma_px=0.0)
    eta = colored_noise(s, p, np.random.default_rng(1))
    assert np.std(eta / s) < 1e-4


def test_noise_variance_tracks_signal():
    s = np.tile(np.linspace(0.2, 2.0, 24), (6, 1))
    p = CorruptionParams(gamma_level=1000.0, kappa_g=1.0, kappa_p=0.0, gamma_kernel_sigma_px=0.0)
    rng = np.random.default_rng(2)
    draws = np.stack([colored_noise(s, p, rng) for _ in range(4000)])
    var = draws.var(axis=0)
    assert np.corrcoef(var.ravel(), s.ravel())[0, 1] > 0.99


def test_negative_signal_rejected():
    with pytest.raises(ValueError, match="non-negative"):
        colored_noise(-np.ones((4, 4)), CorruptionParams(), np.random.default_rng(0))


def test_disabled_roundtrip_exact(phantom):
    g = desk_geometry(4)
    clean = forward_project(phantom, g)
    y = corrupt_post_log(phantom, g, CorruptionParams.disabled(), clean=clean)
    assert y.tag == POST_LOG
    assert np.max(np.abs(y.data - clean.data)) <= 1e-6 * np.max(np.abs(clean.data))


def test_zero_volume_disabled_gives_zero():
    g = desk_geometry(2)
    y = corrupt_post_log(np.zeros(g.volume_shape), g, CorruptionParams.disabled())
    assert np.max(np.abs(y.data)) < 1e-12


def test_scatter_only_lowers_post_log():
    g = desk_geometry(4)
    vol = np.full(g.volume_shape, 0.5)
    clean = forward_project(vol, g)
    y = corrupt_post_log(vol, g, CorruptionParams(components=("scatter",), scatter_kappa=0.2), clean=clean)
    assert np.all(y.data <= clean.data + 1e-12)
    assert np.any(y.data < clean.data)


@settings(max_examples=8, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_full_model_always_finite(seed):
    g = desk_geometry(4)
    vol = generate_phantom(randomize_spec(PhantomSpec(), seed % 1000))
    y = corrupt_post_log(vol, g, sample_stack_params(CorruptionRanges(), seed, 4))
    assert np.all(np.isfinite(y.data))


def test_full_model_deterministic(phantom):
    g = desk_geometry(4)
    ps = sample_stack_params(CorruptionRanges(), 5, 4)
    a = corrupt_post_log(phantom, g, ps)
    b = corrupt_post_log(phantom, g, ps)
    assert a.data.tobytes() == b.data.tobytes()


def test_params_dict_roundtrip():
    p = sample_params(rng_seed=3)
    d = p.to_dict()
    assert {f.name for f in fields(CorruptionParams)} == set(d)
    assert CorruptionParams(**{**d, "components": tuple(d["components"])}) == p


def test_awgn_hits_target(phantom):
    g = desk_geometry(4)
    clean = forward_project(phantom, g)
    for seed in range(5):
        y = corrupt_awgn(phantom, g, AwgnParams(40.0, seed), clean=clean)
        assert input_snr_db(clean.data, y.data) == pytest.approx(40.0, abs=0.1)


def test_awgn_reproducible_and_zero_db(phantom):
    g = desk_geometry(4)
    clean = forward_project(phantom, g)
    a = corrupt_awgn(phantom, g, AwgnParams(40.0, 1), clean=clean)
    b = corrupt_awgn(phantom, g, AwgnParams(40.0, 1), clean=clean)
    assert a.data.tobytes() == b.data.tobytes()
    z = corrupt_awgn(phantom, g, AwgnParams(0.0, 1), clean=clean)
    assert np.linalg.norm(z.data - clean.data) == pytest.approx(np.linalg.norm(clean.data), rel=1e-3)


def test_awgn_infinite_target_is_clean_and_zero_signal_rejected(phantom):
    g = desk_geometry(2)
    clean = forward_project(phantom, g)
    y = corrupt_awgn(phantom, g, AwgnParams(float("inf")), clean=clean)
    np.testing.assert_array_equal(y.data, clean.data)
    with pytest.raises(ValueError, match="zero energy"):
        corrupt_awgn(np.zeros(g.volume_shape), g, AwgnParams())


def test_i0_constant():
    assert I0 == 3.201e-4
    with pytest.raises(ValueError):
        CorruptionParams(i0=0.0)
    with pytest.raises(ValueError):
        CorruptionParams(components=("glare",))


def test_non_finite_volume_rejected():
    g = desk_geometry(2)
    vol = np.zeros(g.volume_shape)
    vol[16, 16, 16] = np.nan
    with pytest.raises(ValueError, match="non-finite"):
        corrupt_awgn(vol, g)
    with pytest.raises(ValueError, match="non-finite"):
        corrupt_post_log(vol, g, CorruptionParams.disabled())
