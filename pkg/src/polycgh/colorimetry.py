"""Perceptual color: cone responses, colorspace conversions, image metrics.

Supported colorspace tags: ``lms``, ``xyz``, ``srgb-linear``, ``srgb``
(gamma-encoded), ``lchuv`` and ``lab``. All conversions route through XYZ.
The cone-response table and its matching cone-to-XYZ matrix ship as a
versioned CSV next to this module.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from importlib import resources

import torch

SPACES = ("lms", "xyz", "srgb-linear", "srgb", "lchuv", "lab")

# sRGB primaries and D65 white (chromaticity coordinates); the XYZ matrix is
# derived exactly from these so that the inverse round-trips to machine
# precision instead of relying on the rounded published entries.
_SRGB_PRIMARIES = ((0.64, 0.33), (0.30, 0.60), (0.15, 0.06))
_D65_XY = (0.3127, 0.3290)


def _derive_srgb_matrix() -> torch.Tensor:
    cols = []
    for x, y in _SRGB_PRIMARIES:
        cols.append(torch.tensor([x / y, 1.0, (1.0 - x - y) / y], dtype=torch.float64))
    m0 = torch.stack(cols, dim=1)
    wx, wy = _D65_XY
    white = torch.tensor([wx / wy, 1.0, (1.0 - wx - wy) / wy], dtype=torch.float64)
    s = torch.linalg.solve(m0, white)
    return m0 * s.unsqueeze(0)


SRGB_TO_XYZ = _derive_srgb_matrix()
XYZ_TO_SRGB = torch.linalg.inv(SRGB_TO_XYZ)
WHITE_D65 = SRGB_TO_XYZ @ torch.ones(3, dtype=torch.float64)
WHITE_E = torch.ones(3, dtype=torch.float64)


@dataclass(frozen=True)
class ConeFundamentals:
    """Tabulated long/medium/short cone weights with linear interpolation.

    Weights are zero outside the tabulated support. ``lms_to_xyz`` is the
    exact matrix recorded in the data file header.
    """

    wavelengths_nm: torch.Tensor  # (N,) uniform 1nm grid
    table: torch.Tensor  # (N, 3)
    lms_to_xyz: torch.Tensor  # (3, 3)
    version: str

    @staticmethod
    def load_default() -> "ConeFundamentals":
        text = resources.files("polycgh.data").joinpath("cone_fundamentals_2deg.csv").read_text()
        return ConeFundamentals.parse(text)

    @staticmethod
    def parse(text: str) -> "ConeFundamentals":
        version = "unversioned"
        matrix_rows = []
        rows = []
        for line in text.splitlines():
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                body = line.lstrip("# ").strip()
                if body.startswith("M "):
                    matrix_rows.append([float(v) for v in body[2:].split()])
                elif body.startswith("cone_fundamentals"):
                    version = body
                continue
            if line[0].isalpha():
                continue  # header row
            parts = line.split(",")
            rows.append([float(p) for p in parts])
        data = torch.tensor(rows, dtype=torch.float64)
        if len(matrix_rows) != 3:
            raise ValueError("cone table header must record the 3x3 lms_to_xyz matrix")
        return ConeFundamentals(
            wavelengths_nm=data[:, 0],
            table=data[:, 1:4],
            lms_to_xyz=torch.tensor(matrix_rows, dtype=torch.float64),
            version=version,
        )

    def weights(self, wavelength) -> torch.Tensor:
        """(..., 3) cone weights at wavelengths in meters; differentiable.

        Linear interpolation between table rows; identically zero outside the
        tabulated support (with zero gradient there).
        """
        wl = wavelength if torch.is_tensor(wavelength) else torch.as_tensor(wavelength, dtype=torch.float64)
        scalar = wl.dim() == 0
        wl_nm = wl.reshape(-1) * 1e9
        lo = self.wavelengths_nm[0]
        step = self.wavelengths_nm[1] - self.wavelengths_nm[0]
        t = (wl_nm - lo) / step
        inside = (t.detach() >= 0) & (t.detach() <= self.wavelengths_nm.numel() - 1)
        i0 = torch.clamp(torch.floor(t.detach()), 0, self.wavelengths_nm.numel() - 2).long()
        frac = (t - i0).clamp(0.0, 1.0)
        w = self.table[i0] * (1.0 - frac).unsqueeze(-1) + self.table[i0 + 1] * frac.unsqueeze(-1)
        w = w * inside.unsqueeze(-1)
        return w.squeeze(0) if scalar else w


_DEFAULT_CF: ConeFundamentals | None = None


def default_cone_fundamentals() -> ConeFundamentals:
    global _DEFAULT_CF
    if _DEFAULT_CF is None:
        _DEFAULT_CF = ConeFundamentals.load_default()
    return _DEFAULT_CF


@dataclass
class ColorImage:
    """A 3-channel image tagged with the colorspace its values live in."""

    data: torch.Tensor  # (H, W, 3)
    space: str

    def __post_init__(self):
        if self.data.shape[-1] != 3:
            raise ValueError(f"expected 3 channels, got shape {tuple(self.data.shape)}")
        if self.space not in SPACES:
            raise ValueError(f"unknown colorspace tag {self.space!r}")


def lms_response(cube: torch.Tensor, wavelengths, cf: ConeFundamentals | None = None) -> ColorImage:
    """Integrate a per-wavelength intensity cube into cone responses.

    ``cube`` has shape (N, H, W) with one nonnegative intensity image per
    wavelength; source amplitudes are assumed already folded into the
    intensities (they are applied once, in the forward model). Returns the
    per-pixel weighted sum over wavelengths as an ``lms`` image.
    """
    cf = cf or default_cone_fundamentals()
    if torch.any(cube.detach() < 0):
        raise ValueError("intensity cube must be nonnegative")
    wl = wavelengths if torch.is_tensor(wavelengths) else torch.as_tensor(wavelengths, dtype=torch.float64)
    w = cf.weights(wl).to(cube.dtype)  # (N, 3)
    data = torch.einsum("nhw,nc->hwc", cube, w)
    return ColorImage(data, "lms")


def _apply_matrix(data: torch.Tensor, m: torch.Tensor) -> torch.Tensor:
    return data @ m.to(data.dtype).T


def _srgb_encode(c: torch.Tensor) -> torch.Tensor:
    # sign-preserving extension keeps slightly negative model outputs finite
    a = torch.abs(c)
    enc = torch.where(a <= 0.0031308, 12.92 * a, 1.055 * torch.pow(a.clamp_min(1e-30), 1.0 / 2.4) - 0.055)
    return torch.sign(c) * enc


def _srgb_decode(c: torch.Tensor) -> torch.Tensor:
    a = torch.abs(c)
    dec = torch.where(a <= 0.04045, a / 12.92, torch.pow(((a + 0.055) / 1.055).clamp_min(1e-30), 2.4))
    return torch.sign(c) * dec


def _luv_f(t: torch.Tensor) -> torch.Tensor:
    d = (6.0 / 29.0) ** 3
    return torch.where(t > d, torch.pow(t.clamp_min(1e-30), 1.0 / 3.0), t / (3 * (6.0 / 29.0) ** 2) + 4.0 / 29.0)


def _luv_f_inv(ft: torch.Tensor) -> torch.Tensor:
    d = 6.0 / 29.0
    return torch.where(ft > d, ft**3, 3 * d**2 * (ft - 4.0 / 29.0))


def _xyz_to_lchuv(data: torch.Tensor, white: torch.Tensor) -> torch.Tensor:
    x, y, z = data[..., 0], data[..., 1], data[..., 2]
    wn = white.to(data.dtype)
    denom_n = wn[0] + 15 * wn[1] + 3 * wn[2]
    un = 4 * wn[0] / denom_n
    vn = 9 * wn[1] / denom_n
    denom = x + 15 * y + 3 * z
    ok = denom.detach().abs() > 1e-30
    up = torch.where(ok, 4 * x / torch.where(ok, denom, torch.ones_like(denom)), un)
    vp = torch.where(ok, 9 * y / torch.where(ok, denom, torch.ones_like(denom)), vn)
    ll = 116.0 * _luv_f(y / wn[1]) - 16.0
    us = 13.0 * ll * (up - un)
    vs = 13.0 * ll * (vp - vn)
    c = torch.sqrt(us**2 + vs**2 + 1e-300)
    h = torch.atan2(vs, us)
    return torch.stack([ll, c, h], dim=-1)


def _lchuv_to_xyz(data: torch.Tensor, white: torch.Tensor) -> torch.Tensor:
    ll, c, h = data[..., 0], data[..., 1], data[..., 2]
    wn = white.to(data.dtype)
    denom_n = wn[0] + 15 * wn[1] + 3 * wn[2]
    un = 4 * wn[0] / denom_n
    vn = 9 * wn[1] / denom_n
    us = c * torch.cos(h)
    vs = c * torch.sin(h)
    ok = ll.detach().abs() > 1e-12
    safe_l = torch.where(ok, ll, torch.ones_like(ll))
    up = torch.where(ok, us / (13.0 * safe_l) + un, torch.full_like(us, float(un)))
    vp = torch.where(ok, vs / (13.0 * safe_l) + vn, torch.full_like(vs, float(vn)))
    y = wn[1] * _luv_f_inv((ll + 16.0) / 116.0)
    x = y * 9.0 * up / (4.0 * vp)
    z = y * (12.0 - 3.0 * up - 20.0 * vp) / (4.0 * vp)
    return torch.stack([x, y, z], dim=-1)


def _xyz_to_lab(data: torch.Tensor, white: torch.Tensor) -> torch.Tensor:
    wn = white.to(data.dtype)
    fx = _luv_f(data[..., 0] / wn[0])
    fy = _luv_f(data[..., 1] / wn[1])
    fz = _luv_f(data[..., 2] / wn[2])
    return torch.stack([116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)], dim=-1)


def _lab_to_xyz(data: torch.Tensor, white: torch.Tensor) -> torch.Tensor:
    wn = white.to(data.dtype)
    fy = (data[..., 0] + 16.0) / 116.0
    fx = fy + data[..., 1] / 500.0
    fz = fy - data[..., 2] / 200.0
    return torch.stack(
        [wn[0] * _luv_f_inv(fx), wn[1] * _luv_f_inv(fy), wn[2] * _luv_f_inv(fz)], dim=-1
    )


def _to_xyz(img: ColorImage, cf: ConeFundamentals, white: torch.Tensor) -> torch.Tensor:
    d = img.data
    if img.space == "xyz":
        return d
    if img.space == "lms":
        return _apply_matrix(d, cf.lms_to_xyz)
    if img.space == "srgb-linear":
        return _apply_matrix(d, SRGB_TO_XYZ)
    if img.space == "srgb":
        return _apply_matrix(_srgb_decode(d), SRGB_TO_XYZ)
    if img.space == "lchuv":
        return _lchuv_to_xyz(d, white)
    if img.space == "lab":
        return _lab_to_xyz(d, white)
    raise ValueError(f"no conversion from {img.space!r}")


def convert(img: ColorImage, target: str, cf: ConeFundamentals | None = None,
            white: torch.Tensor | None = None) -> ColorImage:
    """Convert between colorspace tags (any pair from :data:`SPACES`).

    ``white`` selects the reference white for the Luv/Lab paths (XYZ triple,
    default D65); matrix-only paths round-trip to machine precision.
    """
    if target not in SPACES:
        raise ValueError(f"unknown target colorspace {target!r}")
    cf = cf or default_cone_fundamentals()
    white = WHITE_D65 if white is None else white
    if img.space == target:
        return ColorImage(img.data.clone(), target)
    xyz = _to_xyz(img, cf, white)
    if target == "xyz":
        return ColorImage(xyz, "xyz")
    if target == "lms":
        return ColorImage(_apply_matrix(xyz, torch.linalg.inv(cf.lms_to_xyz)), "lms")
    if target == "srgb-linear":
        return ColorImage(_apply_matrix(xyz, XYZ_TO_SRGB), "srgb-linear")
    if target == "srgb":
        return ColorImage(_srgb_encode(_apply_matrix(xyz, XYZ_TO_SRGB)), "srgb")
    if target == "lchuv":
        return ColorImage(_xyz_to_lchuv(xyz, white), "lchuv")
    if target == "lab":
        return ColorImage(_xyz_to_lab(xyz, white), "lab")
    raise ValueError(f"no conversion to {target!r}")


def delta_e_2000(a: ColorImage, b: ColorImage, cf: ConeFundamentals | None = None,
                 white: torch.Tensor | None = None) -> tuple[torch.Tensor, float]:
    """Per-pixel CIEDE2000 color difference and its mean.

    Inputs may be in any supported space; both are converted to Lab with the
    given white point first.
    """
    if a.data.shape != b.data.shape:
        raise ValueError("image dims must match")
    lab1 = convert(a, "lab", cf, white).data
    lab2 = convert(b, "lab", cf, white).data
    de = ciede2000_lab(lab1, lab2)
    return de, float(de.mean())


def ciede2000_lab(lab1: torch.Tensor, lab2: torch.Tensor) -> torch.Tensor:
    """CIEDE2000 on (..., 3) Lab tensors (kL = kC = kH = 1)."""
    l1, a1, b1 = lab1[..., 0], lab1[..., 1], lab1[..., 2]
    l2, a2, b2 = lab2[..., 0], lab2[..., 1], lab2[..., 2]
    c1 = torch.sqrt(a1**2 + b1**2)
    c2 = torch.sqrt(a2**2 + b2**2)
    c_bar = 0.5 * (c1 + c2)
    c7 = c_bar**7
    g = 0.5 * (1.0 - torch.sqrt(c7 / (c7 + 25.0**7)))
    a1p = (1.0 + g) * a1
    a2p = (1.0 + g) * a2
    c1p = torch.sqrt(a1p**2 + b1**2)
    c2p = torch.sqrt(a2p**2 + b2**2)

    def hue(ap, b):
        h = torch.rad2deg(torch.atan2(b, ap))
        h = torch.where(h < 0, h + 360.0, h)
        return torch.where((ap == 0) & (b == 0), torch.zeros_like(h), h)

    h1p = hue(a1p, b1)
    h2p = hue(a2p, b2)

    dlp = l2 - l1
    dcp = c2p - c1p
    dh = h2p - h1p
    zero_c = (c1p * c2p) == 0
    dh = torch.where(dh > 180.0, dh - 360.0, dh)
    dh = torch.where(dh < -180.0, dh + 360.0, dh)
    dh = torch.where(zero_c, torch.zeros_like(dh), dh)
    dhp = 2.0 * torch.sqrt(c1p * c2p) * torch.sin(torch.deg2rad(dh) / 2.0)

    l_bar = 0.5 * (l1 + l2)
    cp_bar = 0.5 * (c1p + c2p)
    hsum = h1p + h2p
    habs = torch.abs(h1p - h2p)
    h_bar = torch.where(habs <= 180.0, 0.5 * hsum, torch.where(hsum < 360.0, 0.5 * (hsum + 360.0), 0.5 * (hsum - 360.0)))
    h_bar = torch.where(zero_c, hsum, h_bar)

    t = (
        1.0
        - 0.17 * torch.cos(torch.deg2rad(h_bar - 30.0))
        + 0.24 * torch.cos(torch.deg2rad(2.0 * h_bar))
        + 0.32 * torch.cos(torch.deg2rad(3.0 * h_bar + 6.0))
        - 0.20 * torch.cos(torch.deg2rad(4.0 * h_bar - 63.0))
    )
    d_theta = 30.0 * torch.exp(-(((h_bar - 275.0) / 25.0) ** 2))
    cp7 = cp_bar**7
    rc = 2.0 * torch.sqrt(cp7 / (cp7 + 25.0**7))
    lm50 = (l_bar - 50.0) ** 2
    sl = 1.0 + 0.015 * lm50 / torch.sqrt(20.0 + lm50)
    sc = 1.0 + 0.045 * cp_bar
    sh = 1.0 + 0.015 * cp_bar * t
    rt = -torch.sin(torch.deg2rad(2.0 * d_theta)) * rc
    return torch.sqrt(
        (dlp / sl) ** 2 + (dcp / sc) ** 2 + (dhp / sh) ** 2 + rt * (dcp / sc) * (dhp / sh)
    )


def luminance(img: ColorImage, cf: ConeFundamentals | None = None,
              white: torch.Tensor | None = None) -> torch.Tensor:
    """CIE LUV lightness channel of an image."""
    white = WHITE_D65 if white is None else white
    y = convert(img, "xyz", cf, white).data[..., 1]
    return 116.0 * _luv_f(y / white.to(y.dtype)[1]) - 16.0


def psnr(a: ColorImage, b: ColorImage, space: str = "srgb-linear",
         cf: ConeFundamentals | None = None) -> float:
    """Peak signal-to-noise ratio in dB, computed in a named space.

    ``b`` is the reference image; the peak is its maximum channel value in
    that space. ``space`` may also be ``luminance`` (the L channel of CIE
    LUV). Identical images report ``inf``.
    """
    if a.data.shape != b.data.shape:
        raise ValueError("image dims must match")
    if space == "luminance":
        pa = luminance(a, cf)
        pb = luminance(b, cf)
    else:
        pa = convert(a, space, cf).data
        pb = convert(b, space, cf).data
    mse = float(torch.mean((pa - pb) ** 2))
    peak = float(pb.max())
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def speckle_contrast(img: torch.Tensor) -> float:
    """Contrast ``std / mean`` of a nonnegative intensity image."""
    if img.numel() == 0:
        raise ValueError("empty image")
    if torch.any(img.detach() < 0):
        raise ValueError("intensity must be nonnegative")
    mean = float(img.mean())
    if mean == 0.0:
        raise ValueError("zero-mean image has undefined contrast")
    return float(img.std()) / mean
