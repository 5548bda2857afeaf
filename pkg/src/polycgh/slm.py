"""Phase SLM response: grayscale-to-phase lookup, quantization, alignment warp.

The lookup table is defined at a reference wavelength; the mirror travel sets
a wavelength-independent optical path difference, so the phase at any other
wavelength is the reference phase scaled by ``wl_ref / wl``.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import torch

from .field import ComplexField, GridSpec, upsample2x


@dataclass(frozen=True)
class SlmSpec:
    """Static description of one SLM panel."""

    width: int
    height: int
    pitch: float  # meters
    phase_range: float  # radians at the reference wavelength
    reference_wavelength: float  # meters
    bit_depth: str = "continuous"  # "continuous" or "4bit"

    def __post_init__(self):
        if self.phase_range <= 0:
            raise ValueError("phase_range must be positive")
        if self.bit_depth not in ("continuous", "4bit"):
            raise ValueError(f"unknown bit depth {self.bit_depth!r}")

    @property
    def grid(self) -> GridSpec:
        return GridSpec(self.width, self.height, self.pitch)


@dataclass
class Lut:
    """Grayscale-to-phase map at a reference wavelength.

    Continuous mode: ``phase = scale * g`` with ``g`` in [0, 1] at full range.
    4-bit mode: 16 coefficients indexed by levels 0..15; fractional levels are
    linearly interpolated (exact at the integers), which also provides the
    slope used by quantization-aware gradients.
    """

    reference_wavelength: float
    mode: str = "continuous"
    scale: float = 3.0 * torch.pi
    coeffs: torch.Tensor | None = None

    @staticmethod
    def linear(spec: SlmSpec) -> "Lut":
        """Idealized LUT covering the spec's phase range."""
        if spec.bit_depth == "continuous":
            return Lut(spec.reference_wavelength, "continuous", scale=spec.phase_range)
        coeffs = torch.linspace(0.0, spec.phase_range, 16, dtype=torch.float64)
        return Lut(spec.reference_wavelength, "4bit", coeffs=coeffs)

    def phase_at_reference(self, g: torch.Tensor) -> torch.Tensor:
        if self.mode == "continuous":
            return self.scale * g
        c = self.coeffs.to(g.dtype)
        if (g.detach().min() < 0) or (g.detach().max() > 15):
            raise ValueError("4-bit grayscale out of range [0, 15]")
        i0 = torch.clamp(torch.floor(g.detach()), 0, 14)
        frac = g - i0
        i0 = i0.long()
        return c[i0] * (1.0 - frac) + c[i0 + 1] * frac


def lut_phase(g: torch.Tensor, lut: Lut, wavelength) -> torch.Tensor:
    """Phase in radians at ``wavelength``: reference phase times ``wl_ref / wl``.

    ``wavelength`` may be a tensor (broadcast against ``g``) to keep the
    dispersion-free scaling differentiable.
    """
    ref = lut.phase_at_reference(g)
    if torch.is_tensor(wavelength):
        return ref * (lut.reference_wavelength / wavelength)
    return ref * (lut.reference_wavelength / float(wavelength))


def quantize_ste(g: torch.Tensor) -> torch.Tensor:
    """Round to the nearest 4-bit level, with a straight-through gradient.

    Forward: clamp to [0, 15] then round half-up. Backward: identity inside
    the clamp range, zero outside.
    """
    clamped = torch.clamp(g, 0.0, 15.0)
    return clamped + (torch.floor(clamped + 0.5) - clamped).detach()


def slm_field(g: torch.Tensor, lut: Lut, wavelength: float, spec: SlmSpec) -> ComplexField:
    """Unit-amplitude field ``exp(j*phase)`` on the 2x-upsampled grid."""
    if tuple(g.shape[-2:]) != (spec.height, spec.width):
        raise ValueError(f"pattern shape {tuple(g.shape)} does not match SLM {spec.height}x{spec.width}")
    up, grid2 = upsample2x(g, spec.grid)
    phase = lut_phase(up, lut, wavelength)
    return ComplexField(grid2, torch.exp(1j * phase.to(torch.float64)), wavelength)


def slm_phase_tensor(g: torch.Tensor, lut: Lut, wavelength, grid: GridSpec) -> torch.Tensor:
    """Batched upsample + LUT for the optimization path; returns phase (..., 2H, 2W)."""
    up, _ = upsample2x(g, grid)
    return lut_phase(up, lut, wavelength)


# ---------------------------------------------------------------------------
# Thin-plate-spline alignment warp


def _tps_kernel(r2: torch.Tensor) -> torch.Tensor:
    # r^2 * log(r) written on r^2; the limit at r=0 is 0
    return torch.where(r2 > 0, 0.5 * r2 * torch.log(r2.clamp_min(1e-300)), torch.zeros_like(r2))


@dataclass
class TpsWarp:
    """Smooth 2D warp fitted to control-point correspondences.

    Maps output pixel coordinates to input sampling coordinates (an inverse
    warp); fitting solves the standard radial-basis system with a small
    diagonal regularizer. Shared across wavelengths.
    """

    src: torch.Tensor  # (K, 2) control points, pixel coords (x, y)
    dst: torch.Tensor  # (K, 2) where each control point samples from
    regularization: float = 1e-8
    _weights: torch.Tensor = dc_field(init=False, repr=False, default=None)
    _affine: torch.Tensor = dc_field(init=False, repr=False, default=None)

    def __post_init__(self):
        self.refit()

    def refit(self) -> None:
        """Solve for spline weights; differentiable with respect to ``dst``."""
        src = self.src.to(torch.float64)
        k = src.shape[0]
        d2 = torch.cdist(src, src) ** 2
        kern = _tps_kernel(d2) + self.regularization * torch.eye(k, dtype=torch.float64)
        p = torch.cat([torch.ones(k, 1, dtype=torch.float64), src], dim=1)  # (K, 3)
        top = torch.cat([kern, p], dim=1)
        bottom = torch.cat([p.T, torch.zeros(3, 3, dtype=torch.float64)], dim=1)
        system = torch.cat([top, bottom], dim=0)
        rhs = torch.cat([self.dst.to(torch.float64), torch.zeros(3, 2, dtype=torch.float64)], dim=0)
        sol = torch.linalg.solve(system, rhs)
        self._weights = sol[:k]
        self._affine = sol[k:]

    def map_points(self, pts: torch.Tensor) -> torch.Tensor:
        """Apply the warp to points of shape (..., 2)."""
        src = self.src.to(torch.float64)
        flat = pts.reshape(-1, 2).to(torch.float64)
        d2 = torch.cdist(flat, src) ** 2
        out = _tps_kernel(d2) @ self._weights
        out = out + self._affine[0] + flat @ self._affine[1:]
        return out.reshape(pts.shape)

    def sample_coords(self, grid: GridSpec) -> tuple[torch.Tensor, torch.Tensor]:
        """Sampling coordinates (x, y) for every output pixel of ``grid``."""
        ys, xs = torch.meshgrid(
            torch.arange(grid.height, dtype=torch.float64),
            torch.arange(grid.width, dtype=torch.float64),
            indexing="ij",
        )
        pts = torch.stack([xs, ys], dim=-1)
        mapped = self.map_points(pts)
        return mapped[..., 0], mapped[..., 1]

    @staticmethod
    def from_grid(grid: GridSpec, displacements: torch.Tensor | None = None,
                  points_per_axis: int = 4, regularization: float = 1e-8) -> "TpsWarp":
        """Control points on a regular lattice; zero displacement = identity."""
        xs = torch.linspace(0, grid.width - 1, points_per_axis, dtype=torch.float64)
        ys = torch.linspace(0, grid.height - 1, points_per_axis, dtype=torch.float64)
        gy, gx = torch.meshgrid(ys, xs, indexing="ij")
        src = torch.stack([gx.reshape(-1), gy.reshape(-1)], dim=-1)
        dst = src if displacements is None else src + displacements.reshape(-1, 2)
        return TpsWarp(src, dst, regularization)


def bilinear_sample(img: torch.Tensor, x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Sample ``img[..., H, W]`` at real-valued pixel coords; outside reads 0.

    Differentiable with respect to both the image and the coordinates.
    """
    h, w = img.shape[-2:]
    x0 = torch.floor(x)
    y0 = torch.floor(y)
    fx = (x - x0).to(img.real.dtype if torch.is_complex(img) else img.dtype)
    fy = (y - y0).to(fx.dtype)
    out = None
    for dy in (0, 1):
        for dx in (0, 1):
            xi = x0.long() + dx
            yi = y0.long() + dy
            valid = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
            wgt = (fx if dx else 1 - fx) * (fy if dy else 1 - fy)
            wgt = wgt * valid.to(wgt.dtype)
            xi = xi.clamp(0, w - 1)
            yi = yi.clamp(0, h - 1)
            vals = img[..., yi, xi]
            term = vals * wgt
            out = term if out is None else out + term
    return out


def warp_field(f: ComplexField, warp: TpsWarp | None) -> ComplexField:
    """Resample a complex field through an alignment warp.

    Real and imaginary parts are bilinearly interpolated independently;
    samples mapped outside the field read as zero.
    """
    if warp is None:
        return f
    x, y = warp.sample_coords(f.grid)
    re = bilinear_sample(f.samples.real, x, y)
    im = bilinear_sample(f.samples.imag, x, y)
    return ComplexField(f.grid, torch.complex(re, im), f.wavelength)


def warp_tensor(samples: torch.Tensor, grid: GridSpec, warp: TpsWarp | None) -> torch.Tensor:
    """Batched raw-tensor form of :func:`warp_field`."""
    if warp is None:
        return samples
    x, y = warp.sample_coords(grid)
    if torch.is_complex(samples):
        re = bilinear_sample(samples.real, x.to(samples.real.dtype), y.to(samples.real.dtype))
        im = bilinear_sample(samples.imag, x.to(samples.real.dtype), y.to(samples.real.dtype))
        return torch.complex(re, im)
    return bilinear_sample(samples, x.to(samples.dtype), y.to(samples.dtype))
