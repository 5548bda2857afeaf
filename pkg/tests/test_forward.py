import math

import pytest
import torch

from polycgh.colorimetry import speckle_contrast
from polycgh.forward import (
    IntensityCube,
    SystemConfig,
    eyebox,
    forward,
    forward_intensity,
    ncc_peak,
    perceive,
    perceive_flat,
    speckle_correlation,
)
from polycgh.illumination import SpectralSource, init_wavelengths, square_tilt_grid
from polycgh.slm import SlmSpec


SPEC = SlmSpec(64, 48, 8e-6, 3 * math.pi, 550e-9)


def make_config(n_slms=2, n_wl=2, n_frames=1, planes=(10e-3,), gap=2e-3, band_limit=True):
    src = init_wavelengths(n_wl, (480e-9, 620e-9))
    return SystemConfig([SPEC] * n_slms, gap, list(planes), src,
                        n_frames=n_frames, band_limit=band_limit)


def rand_patterns(cfg, seed=0):
    gen = torch.Generator().manual_seed(seed)
    s = cfg.slm_specs[0]
    return torch.rand(cfg.n_slms, cfg.n_frames, s.height, s.width, generator=gen,
                      dtype=torch.float64)


def test_zero_phase_plane_wave_uniform_intensity():
    cfg = make_config(planes=(9e-3, 11e-3))
    g = torch.zeros(2, 1, 48, 64, dtype=torch.float64)
    cube = forward(cfg, g)
    assert cube.values.shape == (1, 2, 2, 96, 128)
    for wl_i in range(2):
        v = cube.values[0, wl_i]
        assert (v - 1.0).abs().max() < 1e-9  # a_i = 1


def test_amplitudes_scale_linearly():
    cfg = make_config()
    g = rand_patterns(cfg, 1)
    a = torch.tensor([[0.7, 1.3]], dtype=torch.float64)
    b = torch.tensor([[0.4, 0.2]], dtype=torch.float64)
    cube_a = forward_intensity(cfg, g, amplitudes=a)
    cube_b = forward_intensity(cfg, g, amplitudes=b)
    cube_ab = forward_intensity(cfg, g, amplitudes=a + b)
    assert (cube_ab - cube_a - cube_b).abs().max() < 1e-9


def test_global_phase_offset_invariance():
    cfg = make_config()
    g = rand_patterns(cfg, 2)
    base = forward_intensity(cfg, g)
    lifted = g.clone()
    lifted[0] += 0.11  # constant grayscale offset = per-wavelength global phase
    shifted = forward_intensity(cfg, lifted)
    assert (base - shifted).abs().max() < 1e-9


def test_second_slm_zero_phase_folds_into_distance():
    # without the wrap-around band limit the composition is exact
    cfg2 = make_config(n_slms=2, planes=(8e-3,), gap=2e-3, band_limit=False)
    g2 = rand_patterns(cfg2, 3)
    g2[1] = 0.0
    cfg1 = make_config(n_slms=1, planes=(10e-3,), band_limit=False)
    out2 = forward_intensity(cfg2, g2)
    out1 = forward_intensity(cfg1, g2[:1])
    assert (out2[0, :, 0] - out1[0, :, 0]).abs().max() < 1e-9


def test_single_slm_reduces_to_direct_propagation():
    from polycgh.field import ComplexField
    from polycgh.propagation import propagate
    from polycgh.slm import slm_field, Lut

    cfg = make_config(n_slms=1, planes=(7e-3,))
    g = rand_patterns(cfg, 4)
    out = forward_intensity(cfg, g)
    lut = Lut.linear(SPEC)
    for i, wl in enumerate(cfg.source.wavelengths):
        f = slm_field(g[0, 0], lut, float(wl), SPEC)
        prop = propagate(f, 7e-3)
        expected = prop.samples.real**2 + prop.samples.imag**2
        assert (out[0, i, 0] - expected).abs().max() < 1e-10


def test_random_phases_give_fully_developed_speckle():
    cfg = make_config(n_slms=2, n_wl=1, planes=(25e-3,))
    g = rand_patterns(cfg, 5)
    cube = forward(cfg, g)
    roi = cube.values[0, 0, 0, 24:-24, 24:-24]
    assert abs(speckle_contrast(roi) - 1.0) < 0.1


def test_forward_validates_pattern_shape():
    cfg = make_config()
    with pytest.raises(ValueError):
        forward(cfg, torch.zeros(1, 1, 48, 64, dtype=torch.float64))


def test_cube_validation_flags_bad_values():
    cfg = make_config(n_wl=1)
    cube = IntensityCube(torch.full((1, 1, 1, 4, 4), -1.0), cfg.source.wavelengths, [10e-3])
    with pytest.raises(ValueError):
        cube.validate()


def test_perceive_sums_frames_linearly():
    cfg1 = make_config(n_frames=1)
    g = rand_patterns(cfg1, 6)
    cube1 = forward(cfg1, g)
    cfg3 = make_config(n_frames=3)
    g3 = g.repeat(1, 3, 1, 1)
    a3 = cfg3.source.amplitudes.unsqueeze(0).repeat(3, 1) / 3.0
    cube3 = forward(cfg3, g3, amplitudes=a3)
    img1 = perceive(cube1)[0].data
    img3 = perceive(cube3)[0].data
    assert (img1 - img3).abs().max() < 1e-9


def test_perceive_zero_cube_black():
    cfg = make_config()
    cube = IntensityCube(torch.zeros(1, 2, 1, 96, 128), cfg.source.wavelengths, [10e-3], cfg)
    img = perceive(cube)[0]
    assert torch.all(img.data == 0)


def test_perceive_additive_in_linear_space():
    cfg = make_config()
    g = rand_patterns(cfg, 7)
    cube = forward(cfg, g)
    half = IntensityCube(cube.values * 0.5, cube.wavelengths, cube.distances, cfg)
    full_img = perceive(cube)[0].data
    half_img = perceive(half)[0].data
    assert (full_img - 2 * half_img).abs().max() < 1e-9


def test_perceive_flat_sums_everything():
    cfg = make_config(planes=(9e-3, 11e-3))
    g = rand_patterns(cfg, 8)
    cube = forward(cfg, g)
    flat = perceive_flat(cube)
    assert flat.shape == (2, 96, 128)
    assert torch.allclose(flat, cube.values.sum(dim=(0, 1)))


def test_eyebox_dc_spot_for_plane_wave():
    cfg = make_config(n_wl=1)
    g = torch.zeros(2, 1, 48, 64, dtype=torch.float64)
    box = eyebox(cfg, g, 0, 0)
    h, w = box.shape
    dc = box[h // 2, w // 2]
    rest = box.clone()
    rest[h // 2, w // 2] = 0
    assert dc > 1e6 * rest.max()


def test_eyebox_band_occupancy_for_random_phase():
    cfg = make_config(n_wl=1)
    g = rand_patterns(cfg, 9)
    box = eyebox(cfg, g, 0, 0)
    h, w = box.shape
    # central half-band in each axis = the SLM diffraction band before upsampling
    band = box[h // 4 : -h // 4, w // 4 : -w // 4]
    occupancy = float((band > 0.05 * band.mean()).to(torch.float64).mean())
    assert occupancy > 0.9


@pytest.mark.parametrize("n", [4, 8])
def test_eyebox_averaging_reduces_pupil_contrast(n):
    # the 3*pi phase range leaves an undiffracted DC beam (mean of exp(j*phase)
    # is nonzero); measure contrast on the DC-blocked pupil like the physical
    # system does, over the flat center of the replication envelope
    cfg = make_config(n_wl=1)
    acc = None
    for s in range(n):
        g = rand_patterns(cfg, 100 + s)
        box = eyebox(cfg, g, 0, 0)
        acc = box if acc is None else acc + box
    h, w = acc.shape
    cy, cx = h // 2, w // 2
    ry, rx = int(h * 0.15), int(w * 0.15)
    roi = acc[cy - ry : cy + ry, cx - rx : cx + rx] / n
    mask = torch.ones_like(roi, dtype=torch.bool)
    my, mx = roi.shape[0] // 2, roi.shape[1] // 2
    mask[my - 2 : my + 3, mx - 2 : mx + 3] = False
    vals = roi[mask]
    c = float(vals.std() / vals.mean())
    assert abs(c - 1 / math.sqrt(n)) * math.sqrt(n) < 0.1


def test_ncc_peak_properties():
    gen = torch.Generator().manual_seed(11)
    a = torch.rand(32, 32, generator=gen, dtype=torch.float64)
    assert ncc_peak(a, a) == pytest.approx(1.0, abs=1e-12)
    rolled = torch.roll(a, shifts=(3, 5), dims=(0, 1))
    assert ncc_peak(a, rolled) == pytest.approx(1.0, abs=1e-12)
    with pytest.raises(ValueError):
        ncc_peak(torch.ones(4, 4), torch.ones(4, 4))


def test_speckle_correlation_zero_delta_is_one():
    cfg = make_config(n_wl=1, planes=(10e-3,))
    g = rand_patterns(cfg, 12)
    deltas = torch.tensor([0.0, 4e-9], dtype=torch.float64)
    curves = speckle_correlation(cfg, g, "wavelength", deltas, gaps=[2e-3])
    assert float(curves[0, 0]) == pytest.approx(1.0, abs=1e-12)
    assert curves[0, 1] < 1.0


def test_speckle_correlation_rejects_bad_sweep():
    cfg = make_config(n_wl=1)
    with pytest.raises(ValueError):
        speckle_correlation(cfg, rand_patterns(cfg), "phase", torch.zeros(1), [1e-3])


def test_multisource_incoherent_sum():
    src = SpectralSource(
        wavelengths=torch.tensor([550e-9], dtype=torch.float64),
        amplitudes=torch.ones(1, dtype=torch.float64),
        mode="multisource",
        tilts=square_tilt_grid(2, 8e3),
    )
    cfg = SystemConfig([SPEC, SPEC], 2e-3, [10e-3], src, n_frames=1)
    g = rand_patterns(cfg, 13)
    combined = forward_intensity(cfg, g)[0, 0, 0]
    total = torch.zeros_like(combined)
    for k in range(4):
        single = SpectralSource(
            wavelengths=src.wavelengths.clone(),
            amplitudes=src.amplitudes.clone(),
            mode="multisource",
            tilts=src.tilts[k : k + 1].clone(),
        )
        cfg_k = SystemConfig([SPEC, SPEC], 2e-3, [10e-3], single, n_frames=1)
        total = total + forward_intensity(cfg_k, g)[0, 0, 0]
    assert (combined - total).abs().max() < 1e-9


def test_config_validation():
    with pytest.raises(ValueError):
        make_config(n_slms=2, gap=0.0)
    src = init_wavelengths(1, (500e-9, 600e-9))
    with pytest.raises(ValueError):
        SystemConfig([SPEC], 1e-3, [], src)
    with pytest.raises(ValueError):
        SystemConfig([SPEC], 1e-3, [10e-3], src, n_frames=0)
