"""Focal-stack optimization targets with geometric defocus blur.

A 2D image is split into depth layers; at every requested focal plane each
layer is blurred by a normalized disk whose diameter grows linearly with the
layer's distance from that plane, capped by the modulator's maximum
diffraction angle. Layers composite back-to-front so nearer content occludes
blurred farther content.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field

import torch

from .colorimetry import ColorImage, convert


@dataclass
class DefocusModel:
    """Disk-kernel defocus geometry tied to the display's diffraction limit."""

    center_wavelength: float = 550e-9
    pitch: float = 4e-6  # simulation grid pitch in meters
    per_channel_wavelengths: tuple[float, float, float] | None = None

    @property
    def max_half_angle(self) -> float:
        """Largest diffraction half-angle the grid can steer, in radians."""
        return math.asin(self.center_wavelength / (2.0 * self.pitch))

    def kernel_diameter(self, dz: float, wavelength: float | None = None) -> float:
        """Blur disk diameter in meters for defocus ``dz`` (affine, zero intercept)."""
        wl = self.center_wavelength if wavelength is None else wavelength
        theta = math.asin(wl / (2.0 * self.pitch))
        return 2.0 * abs(dz) * math.tan(theta)

    def kernel_diameter_px(self, dz: float, wavelength: float | None = None) -> float:
        return self.kernel_diameter(dz, wavelength) / self.pitch


@dataclass
class FocalStackTarget:
    """A set of focal planes used as the optimization target."""

    planes: list[tuple[float, ColorImage]]
    loss_space: str = "srgb-linear"
    border_crop: int = 16

    def __post_init__(self):
        if not self.planes:
            raise ValueError("focal stack needs at least one plane")
        zs = [z for z, _ in self.planes]
        if any(b <= a for a, b in zip(zs, zs[1:])):
            raise ValueError("plane distances must be strictly increasing")
        shapes = {tuple(img.data.shape) for _, img in self.planes}
        if len(shapes) != 1:
            raise ValueError("all plane images must share dims")

    @property
    def distances(self) -> list[float]:
        return [z for z, _ in self.planes]


def disk_kernel(shape: tuple[int, int], diameter_px: float, dtype=torch.float64) -> torch.Tensor:
    """Centered, unit-sum disk kernel rasterized with a 1px soft edge.

    Diameters below one pixel degenerate to a delta (no blur).
    """
    h, w = shape
    radius = diameter_px / 2.0
    if radius < 0.5:
        k = torch.zeros(shape, dtype=dtype)
        k[h // 2, w // 2] = 1.0
        return k
    ys = torch.arange(h, dtype=dtype) - h // 2
    xs = torch.arange(w, dtype=dtype) - w // 2
    r = torch.sqrt(ys.unsqueeze(1) ** 2 + xs.unsqueeze(0) ** 2)
    k = torch.clamp(radius - r + 0.5, 0.0, 1.0)
    return k / k.sum()


def _convolve_circular(img: torch.Tensor, kernel: torch.Tensor) -> torch.Tensor:
    """Circular convolution via FFT; conserves the image sum for unit-sum kernels.

    The kernel is given centered at ``(H//2, W//2)``; ifftshift moves its
    center to the origin so no parity-dependent offset appears.
    """
    k = torch.fft.ifftshift(kernel, dim=(-2, -1))
    spec = torch.fft.fft2(img.to(torch.complex128)) * torch.fft.fft2(k.to(torch.complex128))
    return torch.fft.ifft2(spec).real


def _blur_channels(data: torch.Tensor, model: DefocusModel, dz: float) -> torch.Tensor:
    """Blur (H, W, C) data with the defocus disk (optionally per channel).

    Single-channel inputs (the compositing masks) always use the center
    wavelength; per-channel kernels only apply to the color content itself.
    """
    h, w = data.shape[0], data.shape[1]
    n_ch = data.shape[-1]
    if model.per_channel_wavelengths is None or n_ch != len(model.per_channel_wavelengths):
        k = disk_kernel((h, w), model.kernel_diameter_px(dz))
        return torch.stack([_convolve_circular(data[..., c], k) for c in range(n_ch)], dim=-1)
    out = []
    for c, wl in enumerate(model.per_channel_wavelengths):
        k = disk_kernel((h, w), model.kernel_diameter_px(dz, wl))
        out.append(_convolve_circular(data[..., c], k))
    return torch.stack(out, dim=-1)


def synth_focal_stack(
    image: ColorImage,
    layers: list[tuple[float, torch.Tensor]],
    planes: list[float],
    model: DefocusModel | None = None,
    loss_space: str = "srgb-linear",
    border_crop: int = 16,
) -> FocalStackTarget:
    """Build a focal stack from depth layers of one image.

    ``layers`` is a list of ``(depth_m, mask)`` pairs ordered or unordered;
    masks are in [0, 1] and should cover every pixel. At each plane, layers
    are composited back-to-front after blurring both the masked content and
    the mask itself by the plane-to-layer defocus disk.
    """
    if not planes:
        raise ValueError("need at least one focal plane")
    if not layers:
        raise ValueError("need at least one layer")
    model = model or DefocusModel()
    data = image.data.to(torch.float64)
    cover = torch.zeros(data.shape[:2], dtype=torch.float64)
    for _, mask in layers:
        cover = cover + mask.to(torch.float64)
    if float(cover.min()) < 1.0 - 1e-9:
        raise ValueError("depth assignment must cover all pixels")

    ordered = sorted(layers, key=lambda lz: -lz[0])  # far to near
    out_planes: list[tuple[float, ColorImage]] = []
    for z in sorted(planes):
        acc = torch.zeros_like(data)
        for depth, mask in ordered:
            m = mask.to(torch.float64)
            dz = z - depth
            blurred = _blur_channels(data * m.unsqueeze(-1), model, dz)
            alpha = _blur_channels(m.unsqueeze(-1), model, dz)[..., 0].clamp(0.0, 1.0)
            acc = acc * (1.0 - alpha).unsqueeze(-1) + blurred
        out_planes.append((z, ColorImage(acc, image.space)))
    return FocalStackTarget(out_planes, loss_space=loss_space, border_crop=border_crop)


def saturation_scale(target: ColorImage, factor: float) -> ColorImage:
    """Scale perceptual chroma of an XYZ image, leaving lightness untouched."""
    if not 0.0 <= factor <= 1.0:
        raise ValueError("saturation factor must be in [0, 1]")
    if target.space != "xyz":
        raise ValueError("saturation_scale expects an xyz-tagged image")
    lch = convert(target, "lchuv")
    scaled = lch.data.clone()
    scaled[..., 1] = scaled[..., 1] * factor
    return convert(ColorImage(scaled, "lchuv"), "xyz")


# --- procedural test scenes -------------------------------------------------


def make_scene(kind: str, width: int, height: int, seed: int = 0) -> ColorImage:
    """Deterministic neutral test scenes in linear sRGB, values in [0.02, 0.95].

    Kinds: ``rings`` (colored concentric rings with texture), ``bars``
    (color bars with a luminance ramp), ``checker`` (soft checkerboard).
    """
    gen = torch.Generator().manual_seed(seed)
    ys = torch.linspace(-1.0, 1.0, height, dtype=torch.float64).unsqueeze(1)
    xs = torch.linspace(-1.0, 1.0, width, dtype=torch.float64).unsqueeze(0)
    if kind == "rings":
        r = torch.sqrt((xs * width / height) ** 2 + ys**2)
        base = 0.5 + 0.45 * torch.sin(2 * math.pi * 2.5 * r)
        hue = 0.5 + 0.5 * torch.sin(2 * math.pi * (r + xs / 3.0))
        img = torch.stack([base * hue, base * (1 - 0.6 * hue), 0.3 + 0.5 * (1 - base)], dim=-1)
    elif kind == "bars":
        seg = torch.floor((xs + 1.0) * 3.0).clamp(0, 5)
        colors = torch.tensor(
            [[0.9, 0.1, 0.1], [0.9, 0.8, 0.1], [0.1, 0.8, 0.2],
             [0.1, 0.7, 0.9], [0.2, 0.2, 0.9], [0.8, 0.2, 0.8]],
            dtype=torch.float64,
        )
        img = colors[seg.long()].squeeze(0).expand(height, width, 3).clone()
        ramp = (0.35 + 0.65 * (ys + 1.0) / 2.0).unsqueeze(-1)
        img = img * ramp
    elif kind == "checker":
        cells = (torch.floor((xs + 1) * 4) + torch.floor((ys + 1) * 3)) % 2
        img = torch.stack([0.2 + 0.6 * cells, 0.4 + 0.3 * (1 - cells), 0.3 + 0.4 * cells], dim=-1)
    else:
        raise ValueError(f"unknown scene kind {kind!r}")
    noise = 0.02 * torch.rand(height, width, 1, generator=gen, dtype=torch.float64)
    return ColorImage((img + noise).clamp(0.02, 0.95), "srgb-linear")


def make_depth_layers(width: int, height: int, depths: list[float]) -> list[tuple[float, torch.Tensor]]:
    """Vertical-band depth assignment: left-to-right strips, one per depth."""
    n = len(depths)
    if n < 1:
        raise ValueError("need at least one depth")
    xs = torch.arange(width).unsqueeze(0).expand(height, width)
    layers = []
    for i, d in enumerate(depths):
        lo = i * width // n
        hi = (i + 1) * width // n if i < n - 1 else width
        mask = ((xs >= lo) & (xs < hi)).to(torch.float64)
        layers.append((d, mask))
    return layers


def gamut_sweep_scene(width: int, height: int, lightness: float = 60.0,
                      max_chroma: float = 80.0) -> ColorImage:
    """Wide-gamut XYZ target: hue varies along x, chroma along y."""
    ys = torch.linspace(0.0, 1.0, height, dtype=torch.float64).unsqueeze(1)
    xs = torch.linspace(-math.pi, math.pi, width, dtype=torch.float64).unsqueeze(0)
    ll = torch.full((height, width), lightness, dtype=torch.float64)
    c = (max_chroma * ys).expand(height, width)
    h = xs.expand(height, width)
    lch = torch.stack([ll, c, h], dim=-1)
    return convert(ColorImage(lch, "lchuv"), "xyz")
