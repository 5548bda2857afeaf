"""Polychromatic source description: wavelength sets, amplitudes, incident fields."""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field

import torch

from .field import ComplexField, GridSpec, spatial_coords

VISIBLE_BAND = (380e-9, 780e-9)
_TWO_PI = 2.0 * math.pi


@dataclass
class SourceAnchorModel:
    """Amplitude and optical-path-difference grids stored at anchor wavelengths.

    Between anchors both quantities are linearly interpolated in wavelength;
    at an anchor the stored grids are returned exactly. Learning the OPD
    (rather than phase) keeps the representation free of wrap artifacts.
    """

    anchors: torch.Tensor  # (A,) meters, strictly increasing
    amplitude: torch.Tensor  # (A, H, W) >= 0
    opd: torch.Tensor  # (A, H, W) meters

    def __post_init__(self):
        if self.anchors.numel() < 2:
            raise ValueError("need at least 2 anchor wavelengths")
        if not torch.all(self.anchors[1:] > self.anchors[:-1]):
            raise ValueError("anchors must be strictly increasing")
        if self.amplitude.shape != self.opd.shape or self.amplitude.shape[0] != self.anchors.numel():
            raise ValueError("amplitude/opd grids must share dims, one per anchor")

    def interpolate(self, wavelength) -> tuple[torch.Tensor, torch.Tensor]:
        """(amplitude, opd) at one wavelength; differentiable in the grids and wavelength."""
        wl = wavelength if torch.is_tensor(wavelength) else torch.as_tensor(wavelength, dtype=torch.float64)
        anchors = self.anchors
        lo = float(anchors[0])
        hi = float(anchors[-1])
        wl_val = float(wl.detach()) if torch.is_tensor(wl) else float(wl)
        if wl_val < lo - 1e-15 or wl_val > hi + 1e-15:
            raise ValueError(f"wavelength {wl_val:.3e} outside anchor range [{lo:.3e}, {hi:.3e}]")
        idx = int(torch.searchsorted(anchors.detach(), torch.as_tensor(wl_val), right=True)) - 1
        idx = max(0, min(idx, anchors.numel() - 2))
        w1 = anchors[idx]
        w2 = anchors[idx + 1]
        t = (wl - w1) / (w2 - w1)
        t = t.clamp(0.0, 1.0) if torch.is_tensor(t) else min(max(t, 0.0), 1.0)
        amp = (1 - t) * self.amplitude[idx] + t * self.amplitude[idx + 1]
        opd = (1 - t) * self.opd[idx] + t * self.opd[idx + 1]
        return amp, opd

    def interpolate_batch(self, wavelengths: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Batched form of :meth:`interpolate` over (N,) wavelengths.

        Accepts externally supplied amplitude/opd tensors implicitly through
        ``self``; differentiable in the stored grids.
        """
        return interpolate_anchor_grids(self.anchors, self.amplitude, self.opd, wavelengths)


def interpolate_anchor_grids(
    anchors: torch.Tensor,
    amplitude: torch.Tensor,
    opd: torch.Tensor,
    wavelengths: torch.Tensor,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Linear interpolation of per-anchor grids at (N,) wavelengths -> (N, H, W)."""
    lo = float(anchors[0])
    hi = float(anchors[-1])
    wl = wavelengths.detach()
    if float(wl.min()) < lo - 1e-15 or float(wl.max()) > hi + 1e-15:
        raise ValueError(f"wavelengths outside anchor range [{lo:.3e}, {hi:.3e}]")
    idx = torch.searchsorted(anchors.detach(), wl, right=True) - 1
    idx = idx.clamp(0, anchors.numel() - 2)
    w1 = anchors[idx]
    w2 = anchors[idx + 1]
    t = ((wavelengths - w1) / (w2 - w1)).clamp(0.0, 1.0).reshape(-1, 1, 1)
    amp = (1 - t) * amplitude[idx] + t * amplitude[idx + 1]
    out_opd = (1 - t) * opd[idx] + t * opd[idx + 1]
    return amp, out_opd


@dataclass
class SpectralSource:
    """The set of source lines: wavelengths, their amplitudes and field shape.

    ``mode`` is one of ``ideal`` (unit plane wave), ``multisource`` (a grid of
    tilted plane waves whose intensities add incoherently) or ``learned``
    (anchor-interpolated amplitude/OPD field from calibration).
    """

    wavelengths: torch.Tensor  # (N,) meters
    amplitudes: torch.Tensor  # (N,) >= 0
    mode: str = "ideal"
    tilts: torch.Tensor | None = None  # (S, 2) rad/m phase slopes, multisource mode
    anchor_model: SourceAnchorModel | None = None
    trainable_wavelengths: bool = False
    band: tuple[float, float] = dc_field(default=VISIBLE_BAND)

    def __post_init__(self):
        if self.wavelengths.numel() < 1:
            raise ValueError("need at least one wavelength")
        if torch.any(self.amplitudes < 0):
            raise ValueError("amplitudes must be nonnegative")
        if self.mode not in ("ideal", "multisource", "learned"):
            raise ValueError(f"unknown source mode {self.mode!r}")
        if self.mode == "multisource" and (self.tilts is None or self.tilts.numel() == 0):
            raise ValueError("multisource mode needs a tilt list")
        if self.mode == "learned" and self.anchor_model is None:
            raise ValueError("learned mode needs an anchor model")

    @property
    def n_wavelengths(self) -> int:
        return int(self.wavelengths.numel())

    @property
    def n_sources(self) -> int:
        return int(self.tilts.shape[0]) if self.mode == "multisource" else 1


def tilt_field(grid: GridSpec, tilt: torch.Tensor, dtype=torch.float64) -> torch.Tensor:
    """Plane wave ``exp(j * x . m)`` for a phase slope ``m`` in rad/m."""
    x, y = spatial_coords(grid, dtype=dtype)
    phase = x * tilt[0] + y * tilt[1]
    return torch.exp(1j * phase)


def source_field(src: SpectralSource, i: int, grid: GridSpec,
                 source_index: int = 0, dtype=torch.float64) -> ComplexField:
    """Incident field of the i-th wavelength (unit amplitude scale convention)."""
    if i < 0 or i >= src.n_wavelengths:
        raise IndexError(f"wavelength index {i} out of range")
    wl = float(src.wavelengths[i])
    samples = source_field_tensor(src, src.wavelengths[i], grid, source_index, dtype)
    return ComplexField(grid, samples, wl)


def source_field_tensor(src: SpectralSource, wavelength, grid: GridSpec,
                        source_index: int = 0, dtype=torch.float64) -> torch.Tensor:
    """Raw-tensor incident field; differentiable in wavelength / anchor grids."""
    if src.mode == "ideal":
        return torch.ones(grid.shape, dtype=_complex_of(dtype))
    if src.mode == "multisource":
        return tilt_field(grid, src.tilts[source_index].to(dtype), dtype=dtype)
    amp, opd = src.anchor_model.interpolate(wavelength)
    wl = wavelength if torch.is_tensor(wavelength) else torch.as_tensor(wavelength, dtype=torch.float64)
    return (amp * torch.exp(1j * (_TWO_PI / wl) * opd)).to(_complex_of(dtype))


def _complex_of(dtype) -> torch.dtype:
    return torch.complex64 if dtype == torch.float32 else torch.complex128


def init_wavelengths(n: int, band: tuple[float, float], strategy: str = "uniform") -> SpectralSource:
    """Evenly spaced wavelengths across a band, with equal unit amplitudes.

    ``strategy="optimizable"`` flags the wavelengths as trainable; the
    optimizer keeps them inside the band through a sigmoid reparameterization.
    A single wavelength lands at the band center.
    """
    lo, hi = band
    if not (0 < lo < hi):
        raise ValueError(f"invalid band {band}")
    if lo < VISIBLE_BAND[0] or hi > VISIBLE_BAND[1]:
        raise ValueError(f"band {band} outside the visible range {VISIBLE_BAND}")
    if n < 1:
        raise ValueError("need n >= 1")
    if n == 1:
        wl = torch.tensor([(lo + hi) / 2.0], dtype=torch.float64)
    else:
        wl = torch.linspace(lo, hi, n, dtype=torch.float64)
    if strategy not in ("uniform", "optimizable"):
        raise ValueError(f"unknown strategy {strategy!r}")
    return SpectralSource(
        wavelengths=wl,
        amplitudes=torch.ones(n, dtype=torch.float64),
        mode="ideal",
        trainable_wavelengths=(strategy == "optimizable"),
        band=(lo, hi),
    )


def centered_wavelengths(n: int, spacing: float, center: float = 550e-9) -> torch.Tensor:
    """``n`` lines at fixed ``spacing``, centered on ``center`` (band span (n-1)*spacing)."""
    if n < 1:
        raise ValueError("need n >= 1")
    offsets = (torch.arange(n, dtype=torch.float64) - (n - 1) / 2.0) * spacing
    return center + offsets


def square_tilt_grid(n_per_axis: int, spacing: float) -> torch.Tensor:
    """A centered n x n grid of phase slopes (rad/m) for multisource illumination."""
    if n_per_axis < 1:
        raise ValueError("need n >= 1")
    offs = (torch.arange(n_per_axis, dtype=torch.float64) - (n_per_axis - 1) / 2.0) * spacing
    gy, gx = torch.meshgrid(offs, offs, indexing="ij")
    return torch.stack([gx.reshape(-1), gy.reshape(-1)], dim=-1)
