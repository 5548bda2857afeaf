import math

import pytest
import torch

from polycgh.calibration import (
    ApertureModel,
    CalibrationDataset,
    HyperspectralModel,
    centroid,
    evaluate_model,
    fit,
    legendre_values,
    lenslet_pattern,
    load_model_bytes,
    nominal_model,
    opd_map,
    perturbed_model,
    predict_batch,
    save_model_bytes,
    spatial_basis,
    synth_dataset,
    warp_from_dot_grid,
    zernike_coeffs,
    zernike_maps,
)
from polycgh.field import GridSpec
from polycgh.slm import Lut, SlmSpec, TpsWarp
from polycgh.zernike import noll_to_nm, zernike_term


BAND = (460e-9, 650e-9)


def small_model(**kw):
    args = dict(slm_width=32, slm_height=24, gap=1e-3, band=BAND, n_anchors=4)
    args.update(kw)
    return nominal_model(**args)


# --- Zernike basis -----------------------------------------------------------


def test_noll_indices_match_convention():
    expected = {1: (0, 0), 2: (1, 1), 3: (1, -1), 4: (2, 0), 5: (2, -2), 6: (2, 2),
                7: (3, -1), 8: (3, 1), 9: (3, -3), 10: (3, 3), 11: (4, 0)}
    for j, nm in expected.items():
        assert noll_to_nm(j) == nm


def test_zernike_tilt_is_linear_in_x():
    grid = GridSpec(64, 64, 4e-6)
    maps = zernike_maps(grid, 3)
    tilt_x = maps[1]  # Noll 2
    row = tilt_x[32, :]
    inside = row != 0
    xs = torch.arange(64, dtype=torch.float64)[inside]
    vals = row[inside]
    slope = (vals[1:] - vals[:-1]) / (xs[1:] - xs[:-1])
    assert torch.allclose(slope, slope[0].expand_as(slope), atol=1e-9)


def test_zernike_numerical_orthogonality():
    grid = GridSpec(512, 512, 4e-6)
    maps = zernike_maps(grid, 13)
    disk = maps[0] != 0
    area = disk.sum()
    for i in range(13):
        for j in range(i + 1, 13):
            v = float((maps[i] * maps[j]).sum() / area)
            assert abs(v) < 1e-3


def test_opd_map_piston_and_outside_disk():
    grid = GridSpec(32, 32, 4e-6)
    ap = ApertureModel.identity(BAND)
    ap.zernike_coeffs[0, 0, 0] = 123e-9  # piston
    opd = opd_map(ap, grid, 550e-9)
    maps = zernike_maps(grid, 1)
    disk = maps[0] != 0
    assert torch.allclose(opd[disk], torch.full_like(opd[disk], 123e-9))
    assert torch.all(opd[~disk] == 0)


def test_zernike_coeff_wavelength_polynomial():
    ap = ApertureModel.identity(BAND)
    ap.zernike_coeffs[3, 0, 0] = 100e-9
    ap.zernike_coeffs[3, 0, 1] = 50e-9  # linear in normalized wavelength
    lo, hi = BAND
    z_lo = zernike_coeffs(ap, (0.0, 0.0), lo)[3]
    z_hi = zernike_coeffs(ap, (0.0, 0.0), hi)[3]
    z_mid = zernike_coeffs(ap, (0.0, 0.0), (lo + hi) / 2)[3]
    assert float(z_mid) == pytest.approx((float(z_lo) + float(z_hi)) / 2, rel=1e-12)
    assert float(z_lo) == pytest.approx(50e-9, rel=1e-12)
    assert float(z_hi) == pytest.approx(150e-9, rel=1e-12)
    with pytest.raises(ValueError):
        zernike_coeffs(ap, (0.0, 0.0), 300e-9)


def test_zero_coefficients_give_zero():
    ap = ApertureModel.identity(BAND)
    z = zernike_coeffs(ap, (0.3, -0.2), 500e-9)
    assert torch.all(z == 0)


def test_spatial_basis_legendre():
    vals = legendre_values(3, torch.tensor(0.5, dtype=torch.float64))
    assert float(vals[0]) == 1.0
    assert float(vals[1]) == 0.5
    assert float(vals[2]) == pytest.approx((3 * 0.25 - 1) / 2)
    b = spatial_basis(3, 0.4, -0.6)
    assert b.shape == (3,)
    assert float(b[0]) == 1.0 and float(b[1]) == pytest.approx(0.4)


# --- model plumbing ------------------------------------------------------------


def test_archive_round_trip_lossless():
    truth = perturbed_model(small_model(), seed=3)
    back = load_model_bytes(save_model_bytes(truth))
    assert torch.equal(back.source.amplitude, truth.source.amplitude)
    assert torch.equal(back.source.opd, truth.source.opd)
    for a, b in zip(truth.luts, back.luts):
        assert torch.equal(a.coeffs, b.coeffs)
    for a, b in zip(truth.apertures, back.apertures):
        assert torch.equal(a.zernike_coeffs, b.zernike_coeffs)
    assert torch.equal(back.warp.dst, truth.warp.dst)
    assert back.gap == truth.gap


def test_perturbed_model_properties():
    truth = perturbed_model(small_model(), seed=5)
    for lut in truth.luts:
        assert torch.all(torch.diff(lut.coeffs) >= 0)  # monotone
    assert torch.all(truth.source.amplitude >= 0)
    inj = truth.apertures[-1].zernike_coeffs[:, 0, 0].abs()
    assert int((inj > 0).sum()) == 3


def test_synth_dataset_deterministic_and_structured():
    truth = perturbed_model(small_model(), seed=1)
    d1 = synth_dataset(truth, n_pairs=12, seed=9, plane=3e-3)
    d2 = synth_dataset(truth, n_pairs=12, seed=9, plane=3e-3)
    assert torch.equal(d1.images, d2.images)
    assert torch.equal(d1.patterns, d2.patterns)
    assert d1.patterns.min() >= 0 and d1.patterns.max() <= 15
    assert int(d1.held_out.sum()) == 1 or int(d1.held_out.sum()) == 2
    # blur ladder: the heavily blurred pattern is smoother than the raw one
    raw_tv = (d1.patterns[0, 0].diff(dim=0).abs()).mean()
    smooth_tv = (d1.patterns[4, 0].diff(dim=0).abs()).mean()
    assert smooth_tv < raw_tv


def test_synth_dataset_empty():
    truth = small_model()
    d = synth_dataset(truth, n_pairs=0)
    assert d.n_pairs == 0


def test_predict_matches_self_consistency():
    truth = perturbed_model(small_model(), seed=2)
    ds = synth_dataset(truth, n_pairs=4, seed=3, plane=3e-3)
    rep = evaluate_model(truth, ds)
    assert rep["mean_psnr_db"] == math.inf


def test_fit_fixed_point_keeps_parameters():
    init = small_model()
    ds = synth_dataset(init, n_pairs=8, seed=4, plane=3e-3)
    before = init.luts[0].coeffs.clone()
    fitted, report = fit(init, ds, iterations=20)
    assert (fitted.luts[0].coeffs - before).abs().max() < 1e-6
    assert (fitted.apertures[-1].zernike_coeffs).abs().max() < 1e-12
    assert report["after"]["held_out_psnr_db"] > 80


def test_fit_recovers_single_defocus():
    base = small_model()
    truth = perturbed_model(base, seed=0, zernike_injection={4: 0.4},
                            lut_jitter=0.0, source_amp_variation=0.0, source_opd_scale=0.0)
    ds = synth_dataset(truth, n_pairs=24, seed=5, plane=3e-3)
    fitted, report = fit(small_model(), ds, iterations=120)
    ref = truth.lambda_ref
    recovered = report["zernike_mean_coeffs"][f"hop{len(truth.apertures) - 1}"][3]
    assert abs(recovered - 0.4 * ref) / (0.4 * ref) < 0.05
    assert report["after"]["held_out_psnr_db"] > report["before"]["held_out_psnr_db"] + 10


def test_dataset_validation():
    with pytest.raises(ValueError):
        CalibrationDataset(torch.zeros(2, 2, 4, 4), torch.zeros(3), torch.zeros(2),
                           torch.zeros(2, 8, 8), torch.zeros(2, dtype=torch.bool))
    truth = small_model()
    with pytest.raises(ValueError):
        fit(truth, synth_dataset(truth, n_pairs=0))


# --- alignment helpers -----------------------------------------------------------


def test_centroid_and_dot_grid_warp():
    h, w = 48, 64
    ys = torch.arange(h, dtype=torch.float64).unsqueeze(1)
    xs = torch.arange(w, dtype=torch.float64).unsqueeze(0)

    def dots(centers):
        img = torch.zeros(h, w, dtype=torch.float64)
        for cx, cy in centers:
            img += torch.exp(-(((xs - cx) ** 2 + (ys - cy) ** 2) / 4.0))
        return img

    nominal = torch.tensor([[16.0, 12.0], [48.0, 12.0], [16.0, 36.0], [48.0, 36.0]])
    shift = torch.tensor([2.5, -1.5])
    ref = dots(nominal.tolist())
    obs = dots((nominal + shift).tolist())
    warp = warp_from_dot_grid(ref, obs, nominal, window=8)
    mapped = warp.map_points(torch.tensor([[30.0, 20.0]]))
    assert torch.allclose(mapped, torch.tensor([[32.5, 18.5]]), atol=0.05)


def test_lenslet_pattern_focuses_dots():
    spec = SlmSpec(64, 48, 8e-6, 3 * math.pi, 550e-9, bit_depth="4bit")
    lut = Lut.linear(spec)
    centers = torch.tensor([[0.0, 0.0]], dtype=torch.float64)
    focal = 3e-3
    levels = lenslet_pattern(spec, lut, centers, focal, 550e-9)
    assert levels.min() >= 0 and levels.max() <= 15
    model = nominal_model(slm_width=64, slm_height=48, gap=1e-3, band=BAND, n_anchors=4)
    img = model.predict(torch.stack([levels, torch.zeros_like(levels)]), 550e-9, focal)
    peak = img.flatten().argmax()
    py, px = divmod(int(peak), img.shape[1])
    assert abs(py - img.shape[0] // 2) <= 2 and abs(px - img.shape[1] // 2) <= 2
    assert float(img.max()) > 20 * float(img.mean())


def test_centroid_rejects_empty():
    with pytest.raises(ValueError):
        centroid(torch.zeros(4, 4))
