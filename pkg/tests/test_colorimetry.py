import math

import pytest
import torch

from polycgh.colorimetry import (
    SRGB_TO_XYZ,
    WHITE_E,
    ColorImage,
    ciede2000_lab,
    convert,
    default_cone_fundamentals,
    delta_e_2000,
    lms_response,
    psnr,
    speckle_contrast,
)


# Standard CIEDE2000 verification pairs (Lab1, Lab2, expected dE00).
CIEDE2000_PAIRS = [
    ((50.0000, 2.6772, -79.7751), (50.0000, 0.0000, -82.7485), 2.0425),
    ((50.0000, 3.1571, -77.2803), (50.0000, 0.0000, -82.7485), 2.8615),
    ((50.0000, 2.8361, -74.0200), (50.0000, 0.0000, -82.7485), 3.4412),
    ((50.0000, -1.3802, -84.2814), (50.0000, 0.0000, -82.7485), 1.0000),
    ((50.0000, -1.1848, -84.8006), (50.0000, 0.0000, -82.7485), 1.0000),
    ((50.0000, -0.9009, -85.5211), (50.0000, 0.0000, -82.7485), 1.0000),
    ((50.0000, 0.0000, 0.0000), (50.0000, -1.0000, 2.0000), 2.3669),
    ((50.0000, -1.0000, 2.0000), (50.0000, 0.0000, 0.0000), 2.3669),
    ((50.0000, 2.4900, -0.0010), (50.0000, -2.4900, 0.0009), 7.1792),
    ((50.0000, 2.4900, -0.0010), (50.0000, -2.4900, 0.0010), 7.1792),
    ((50.0000, 2.4900, -0.0010), (50.0000, -2.4900, 0.0011), 7.2195),
    ((50.0000, 2.4900, -0.0010), (50.0000, -2.4900, 0.0012), 7.2195),
    ((50.0000, -0.0010, 2.4900), (50.0000, 0.0009, -2.4900), 4.8045),
    ((50.0000, -0.0010, 2.4900), (50.0000, 0.0010, -2.4900), 4.8045),
    ((50.0000, -0.0010, 2.4900), (50.0000, 0.0011, -2.4900), 4.7461),
    ((50.0000, 2.5000, 0.0000), (50.0000, 0.0000, -2.5000), 4.3065),
    ((50.0000, 2.5000, 0.0000), (73.0000, 25.0000, -18.0000), 27.1492),
    ((50.0000, 2.5000, 0.0000), (61.0000, -5.0000, 29.0000), 22.8977),
    ((50.0000, 2.5000, 0.0000), (56.0000, -27.0000, -3.0000), 31.9030),
    ((50.0000, 2.5000, 0.0000), (58.0000, 24.0000, 15.0000), 19.4535),
    ((50.0000, 2.5000, 0.0000), (50.0000, 3.1736, 0.5854), 1.0000),
    ((50.0000, 2.5000, 0.0000), (50.0000, 3.2972, 0.0000), 1.0000),
    ((50.0000, 2.5000, 0.0000), (50.0000, 1.8634, 0.5757), 1.0000),
    ((50.0000, 2.5000, 0.0000), (50.0000, 3.2592, 0.3350), 1.0000),
    ((60.2574, -34.0099, 36.2677), (60.4626, -34.1751, 39.4387), 1.2644),
    ((63.0109, -31.0961, -5.8663), (62.8187, -29.7946, -4.0864), 1.2630),
    ((61.2901, 3.7196, -5.3901), (61.4292, 2.2480, -4.9620), 1.8731),
    ((35.0831, -44.1164, 3.7933), (35.0232, -40.0716, 1.5901), 1.8645),
    ((22.7233, 20.0904, -46.6940), (23.0331, 14.9730, -42.5619), 2.0373),
    ((36.4612, 47.8580, 18.3852), (36.2715, 50.5065, 21.2231), 1.4146),
    ((90.8027, -2.0831, 1.4410), (91.1528, -1.6435, 0.0447), 1.4441),
    ((90.9257, -0.5406, -0.9208), (88.6381, -0.8985, -0.7239), 1.5381),
    ((6.7747, -0.2908, -2.4247), (5.8714, -0.0985, -2.2286), 0.6377),
    ((2.0776, 0.0795, -1.1350), (0.9033, -0.0636, -0.5514), 0.9082),
]


def rand_img(seed, shape=(7, 5, 3), scale=1.0, offset=0.0):
    gen = torch.Generator().manual_seed(seed)
    return torch.rand(shape, generator=gen, dtype=torch.float64) * scale + offset


def test_ciede2000_reference_pairs():
    lab1 = torch.tensor([p[0] for p in CIEDE2000_PAIRS], dtype=torch.float64)
    lab2 = torch.tensor([p[1] for p in CIEDE2000_PAIRS], dtype=torch.float64)
    expected = torch.tensor([p[2] for p in CIEDE2000_PAIRS], dtype=torch.float64)
    got = ciede2000_lab(lab1, lab2)
    assert (got - expected).abs().max() < 1e-4


def test_delta_e_zero_for_identical_and_symmetry():
    img = ColorImage(rand_img(0), "xyz")
    de, mean = delta_e_2000(img, ColorImage(img.data.clone(), "xyz"))
    assert de.abs().max() < 1e-12 and mean < 1e-12
    other = ColorImage(rand_img(1), "xyz")
    d1, _ = delta_e_2000(img, other)
    d2, _ = delta_e_2000(other, img)
    assert torch.allclose(d1, d2, atol=1e-12)
    assert torch.all(d1 >= 0)


def test_matrix_round_trips_machine_precision():
    for src, dst in [("xyz", "lms"), ("xyz", "srgb-linear"), ("lms", "srgb-linear")]:
        img = ColorImage(rand_img(2), src)
        back = convert(convert(img, dst), src)
        assert (back.data - img.data).abs().max() < 1e-12


def test_gamma_round_trip():
    img = ColorImage(rand_img(3), "srgb-linear")
    back = convert(convert(img, "srgb"), "srgb-linear")
    assert (back.data - img.data).abs().max() < 1e-12


def test_lchuv_round_trip():
    img = ColorImage(rand_img(4, scale=0.8, offset=0.1), "xyz")
    back = convert(convert(img, "lchuv"), "xyz")
    assert (back.data - img.data).abs().max() < 1e-10


def test_equal_energy_white_has_zero_chroma_at_white_e():
    img = ColorImage(torch.ones(3, 3, 3, dtype=torch.float64), "xyz")
    lch = convert(img, "lchuv", white=WHITE_E)
    assert lch.data[..., 1].abs().max() < 1e-10


def test_srgb_red_maps_to_first_matrix_column():
    img = ColorImage(torch.tensor([[[1.0, 0.0, 0.0]]], dtype=torch.float64), "srgb-linear")
    xyz = convert(img, "xyz").data[0, 0]
    assert torch.allclose(xyz, SRGB_TO_XYZ[:, 0], atol=1e-14)


def test_unknown_space_rejected():
    with pytest.raises(ValueError):
        ColorImage(torch.zeros(2, 2, 3), "hsv")
    with pytest.raises(ValueError):
        convert(ColorImage(torch.zeros(2, 2, 3, dtype=torch.float64), "xyz"), "hsv")


def test_lms_response_zero_cube():
    cube = torch.zeros(2, 4, 4, dtype=torch.float64)
    out = lms_response(cube, torch.tensor([450e-9, 550e-9], dtype=torch.float64))
    assert torch.all(out.data == 0)
    assert out.space == "lms"


def test_lms_response_single_wavelength_reads_table():
    cf = default_cone_fundamentals()
    wl = torch.tensor([550e-9], dtype=torch.float64)
    cube = torch.ones(1, 3, 3, dtype=torch.float64)
    out = lms_response(cube, wl, cf)
    expected = cf.weights(torch.tensor(550e-9, dtype=torch.float64))
    assert torch.allclose(out.data[0, 0], expected, atol=1e-14)
    # tabulated row at exactly 550nm should match the interpolant
    row = cf.table[(cf.wavelengths_nm == 550.0).nonzero().item()]
    assert torch.allclose(expected, row, atol=1e-14)


def test_lms_response_additive_and_monotone():
    wl = torch.tensor([480e-9, 560e-9, 620e-9], dtype=torch.float64)
    c1 = rand_img(5, (3, 4, 4))
    c2 = rand_img(6, (3, 4, 4))
    lhs = lms_response(c1 + c2, wl).data
    rhs = lms_response(c1, wl).data + lms_response(c2, wl).data
    assert torch.allclose(lhs, rhs, atol=1e-12)
    bumped = c1.clone()
    bumped[1, 2, 2] += 0.5
    delta = lms_response(bumped, wl).data - lms_response(c1, wl).data
    assert torch.all(delta >= 0)


def test_lms_response_rejects_negative():
    cube = -torch.ones(1, 2, 2, dtype=torch.float64)
    with pytest.raises(ValueError):
        lms_response(cube, torch.tensor([550e-9], dtype=torch.float64))


def test_cone_weights_zero_outside_support():
    cf = default_cone_fundamentals()
    assert torch.all(cf.weights(torch.tensor(380e-9, dtype=torch.float64)) == 0)
    assert torch.all(cf.weights(torch.tensor(765e-9, dtype=torch.float64)) == 0)
    assert torch.all(cf.table >= 0)


def test_psnr_identical_is_inf():
    img = ColorImage(rand_img(7), "srgb-linear")
    assert psnr(img, ColorImage(img.data.clone(), "srgb-linear")) == math.inf


def test_psnr_mse_equal_peak_square_is_zero_db():
    target = ColorImage(torch.ones(4, 4, 3, dtype=torch.float64), "srgb-linear")
    result = ColorImage(torch.zeros(4, 4, 3, dtype=torch.float64), "srgb-linear")
    assert psnr(result, target) == pytest.approx(0.0, abs=1e-12)


def test_psnr_doubling_mse_drops_3dB():
    target = ColorImage(torch.ones(8, 8, 3, dtype=torch.float64), "srgb-linear")
    e = rand_img(8, (8, 8, 3), scale=0.1)
    a1 = ColorImage(target.data + e, "srgb-linear")
    a2 = ColorImage(target.data + math.sqrt(2.0) * e, "srgb-linear")
    diff = psnr(a1, target) - psnr(a2, target)
    assert abs(diff - 10 * math.log10(2.0)) < 1e-9


def test_psnr_scale_invariant_ordering():
    target = ColorImage(rand_img(9, scale=0.5, offset=0.25), "srgb-linear")
    a = ColorImage(target.data + 0.02 * rand_img(10), "srgb-linear")
    b = ColorImage(target.data + 0.05 * rand_img(11), "srgb-linear")
    assert psnr(a, target) > psnr(b, target)
    s = 3.7
    a_s = ColorImage(s * a.data, "srgb-linear")
    b_s = ColorImage(s * b.data, "srgb-linear")
    t_s = ColorImage(s * target.data, "srgb-linear")
    assert psnr(a_s, t_s) == pytest.approx(psnr(a, target), abs=1e-9)
    assert psnr(a_s, t_s) > psnr(b_s, t_s)


def test_speckle_contrast_constant_image_is_zero():
    assert speckle_contrast(torch.full((16, 16), 2.5, dtype=torch.float64)) == 0.0


def test_speckle_contrast_fully_developed():
    gen = torch.Generator().manual_seed(12)
    re = torch.randn(256, 256, generator=gen, dtype=torch.float64)
    im = torch.randn(256, 256, generator=gen, dtype=torch.float64)
    intensity = re**2 + im**2
    c = speckle_contrast(intensity)
    assert abs(c - 1.0) < 0.05


@pytest.mark.parametrize("n", [4, 16])
def test_speckle_contrast_incoherent_averaging(n):
    gen = torch.Generator().manual_seed(100 + n)
    acc = torch.zeros(256, 256, dtype=torch.float64)
    for _ in range(n):
        re = torch.randn(256, 256, generator=gen, dtype=torch.float64)
        im = torch.randn(256, 256, generator=gen, dtype=torch.float64)
        acc += re**2 + im**2
    c = speckle_contrast(acc / n)
    assert abs(c - 1.0 / math.sqrt(n)) < 0.05 / math.sqrt(n)


def test_speckle_contrast_errors():
    with pytest.raises(ValueError):
        speckle_contrast(torch.zeros(4, 4, dtype=torch.float64))
    with pytest.raises(ValueError):
        speckle_contrast(torch.tensor([], dtype=torch.float64))
