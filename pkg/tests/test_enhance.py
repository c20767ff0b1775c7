import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from plaquekit.enhance import (
    EnhanceParams,
    Spectrum,
    band_threshold,
    dft2,
    enhance_channel,
    enhance_image,
    idft2,
    low_pass_filter,
    low_pass_mask,
)
from plaquekit.errors import NonRealResult
from plaquekit.raster import (
    DIRECTIONAL_LAPLACIAN,
    ColorSpace,
    PlanarImage,
    convolve2d,
)


def naive_dft(x):
    """O(n^4) DFT straight from the definition, DC moved to the centre."""
    h, w = x.shape
    ky = np.arange(h)[:, None]
    kx = np.arange(w)[:, None]
    fy = np.exp(-2j * np.pi * ky * np.arange(h)[None, :] / h)
    fx = np.exp(-2j * np.pi * kx * np.arange(w)[None, :] / w)
    return np.roll(fy @ x @ fx.T, (h // 2, w // 2), axis=(0, 1))


def test_dft_matches_definition():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(6, 9))
    np.testing.assert_allclose(dft2(PlanarImage.gray(x)).data, naive_dft(x), atol=1e-10)


def test_dft_of_constant():
    n, v = 8, 3.0
    s = dft2(PlanarImage.gray(np.full((n, n), v))).data
    assert s[n // 2, n // 2] == pytest.approx(v * n * n)
    s2 = s.copy()
    s2[n // 2, n // 2] = 0
    assert np.abs(s2).max() < 1e-9


def test_dft_of_impulse_is_flat():
    x = np.zeros((8, 8))
    x[0, 0] = 1.0
    np.testing.assert_allclose(np.abs(dft2(PlanarImage.gray(x)).data), 1.0, atol=1e-12)


@pytest.mark.parametrize("shape", [(7, 5), (32, 32), (33, 64)])
def test_dft_roundtrip(shape):
    rng = np.random.default_rng(1)
    x = rng.uniform(0, 255, size=shape)
    back = idft2(dft2(PlanarImage.gray(x))).plane()
    assert np.linalg.norm(back - x) <= 1e-9 * np.linalg.norm(x)


def test_idft_of_zero_spectrum():
    out = idft2(Spectrum(np.zeros((4, 6)))).plane()
    assert not out.any()


def test_idft_of_dc_only():
    n, v = 8, 5.0
    s = np.zeros((n, n), complex)
    s[n // 2, n // 2] = v * n * n
    np.testing.assert_allclose(idft2(Spectrum(s)).plane(), v, atol=1e-12)


def test_idft_detects_broken_symmetry():
    rng = np.random.default_rng(2)
    s = dft2(PlanarImage.gray(rng.uniform(0, 255, (8, 8)))).data.copy()
    s[1, 2] += 10.0
    with pytest.raises(NonRealResult):
        idft2(Spectrum(s))


def test_low_pass_full_radius_is_identity():
    rng = np.random.default_rng(3)
    for h, w in [(8, 8), (9, 7), (16, 10)]:
        s = dft2(PlanarImage.gray(rng.uniform(0, 255, (h, w))))
        out = low_pass_filter(s, np.hypot(w / 2, h / 2))
        assert out.data.tobytes() == s.data.tobytes()


def test_low_pass_below_one_keeps_dc():
    rng = np.random.default_rng(4)
    x = rng.uniform(0, 255, (12, 10))
    s = low_pass_filter(dft2(PlanarImage.gray(x)), 0.5)
    assert np.count_nonzero(s.data) == 1
    np.testing.assert_allclose(idft2(s).plane(), x.mean(), atol=1e-9)


def test_low_pass_mask_radius():
    m = low_pass_mask((9, 9), 1.0)
    assert m.sum() == 5  # DC plus its four unit neighbours
    assert m[4, 4] and m[3, 4] and not m[3, 3]


def test_low_pass_removes_high_sinusoid():
    n, r = 32, 6
    y, x = np.mgrid[0:n, 0:n]
    wave = 40 * np.cos(2 * np.pi * r * x / n) + 25 * np.sin(2 * np.pi * r * y / n)
    out = idft2(low_pass_filter(dft2(PlanarImage.gray(wave)), r - 0.5)).plane()
    assert np.abs(out).max() <= 1e-9
    kept = idft2(low_pass_filter(dft2(PlanarImage.gray(wave)), r)).plane()
    np.testing.assert_allclose(kept, wave, atol=1e-9)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.1, 20))
def test_low_pass_idempotent(seed, c):
    rng = np.random.default_rng(seed)
    s = dft2(PlanarImage.gray(rng.uniform(0, 255, (10, 13))))
    once = low_pass_filter(s, c)
    assert low_pass_filter(once, c).data.tobytes() == once.data.tobytes()


@settings(max_examples=50, deadline=None)
@given(st.floats(0.01, 30), st.floats(0.01, 30))
def test_low_pass_mask_monotone(a, b):
    lo, hi = sorted((a, b))
    assert not (low_pass_mask((17, 12), lo) & ~low_pass_mask((17, 12), hi)).any()


def test_parseval():
    rng = np.random.default_rng(5)
    x = rng.uniform(0, 255, (20, 24))
    s = dft2(PlanarImage.gray(x)).data
    assert np.sum(np.abs(s) ** 2) / x.size == pytest.approx(np.sum(x**2), rel=1e-9)


def test_params_validation_and_default_cutoff():
    with pytest.raises(ValueError):
        EnhanceParams(cutoff=0)
    with pytest.raises(ValueError):
        EnhanceParams(t_low=10, t_high=5)
    assert EnhanceParams().resolve(256, 128).cutoff == 32
    assert EnhanceParams(cutoff=8).resolve(256, 256).cutoff == 8
    p = EnhanceParams(cutoff=8, t_low=20, t_high=255)
    assert EnhanceParams.from_dict(p.to_dict()) == p


def test_band_threshold_is_inclusive():
    v = np.array([19.9, 20.0, 100.0, 255.0, 255.1])
    assert band_threshold(v, 20, 255).tolist() == [0, 255, 255, 255, 0]


@pytest.mark.parametrize("v, expected", [(3, 0), (4, 255), (50, 255), (70, 0)])
def test_enhance_constant_image(v, expected):
    # convolved plane is 4 * v; band [13, 200]
    p = EnhanceParams(cutoff=4, t_low=13, t_high=200)
    out = enhance_channel(PlanarImage.gray(np.full((16, 16), v, np.uint8)), p).plane()
    assert (out == expected).all()


def test_enhance_open_band_is_all_on():
    rng = np.random.default_rng(6)
    p = EnhanceParams(cutoff=3, t_low=-np.inf, t_high=np.inf)
    out = enhance_channel(PlanarImage.gray(rng.integers(0, 256, (16, 16)).astype(np.uint8)), p)
    assert (out.plane() == 255).all()


def compose_stages(gray, p):
    spec = dft2(gray)
    spec = low_pass_filter(spec, p.cutoff)
    smooth = idft2(spec)
    conv = convolve2d(smooth, DIRECTIONAL_LAPLACIAN).plane()
    return np.where((conv >= p.t_low) & (conv <= p.t_high), 255, 0).astype(np.uint8)


@pytest.mark.parametrize("seed", range(5))
def test_enhance_channel_equals_stage_composition(seed):
    rng = np.random.default_rng(seed)
    gray = PlanarImage.gray(rng.integers(0, 256, (32, 32)).astype(np.uint8))
    p = EnhanceParams(cutoff=float(rng.uniform(2, 12)), t_low=20, t_high=400)
    assert np.array_equal(enhance_channel(gray, p).plane(), compose_stages(gray, p))


def test_enhance_image_contract():
    rng = np.random.default_rng(7)
    img = PlanarImage.rgb(rng.integers(0, 256, (40, 48, 3)))
    out = enhance_image(img)
    assert out.space is ColorSpace.RGBA_ENHANCED
    assert out.data.shape == (40, 48, 4)
    assert out.data[:, :, :3].tobytes() == img.data.tobytes()
    assert set(np.unique(out.data[:, :, 3])) <= {0, 255}
