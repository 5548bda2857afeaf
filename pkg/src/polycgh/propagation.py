"""Free-space propagation by the band-limited angular spectrum method.

The transfer function for distance ``z`` at wavelength ``wl`` is

    H(u) = exp(2*pi*j * z / wl * sqrt(1 - |wl*u|^2))   for |u| < 1/wl, else 0,

optionally restricted further to the per-axis frequency limit

    u_lim = 1 / (wl * sqrt((2*z / (N*pitch))^2 + 1))

which suppresses the wrap-around aliasing of the circular convolution for
large ``z`` on small grids. ``H(-z) = conj(H(z))``, so back-propagation is the
exact inverse on the passband.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass

import torch

from .field import ComplexField, GridSpec, fft2c, freq_coords, freq_coords_natural, ifft2c

_TWO_PI = 2.0 * math.pi

_KERNEL_CACHE: dict[tuple, torch.Tensor] = {}
_CACHE_LOCK = threading.Lock()


@dataclass
class AsmKernel:
    """Sampled transfer function plus its pass mask for one (grid, z, wl)."""

    grid: GridSpec
    z: float
    wavelength: float
    transfer: torch.Tensor  # complex, shape (H, W)
    mask: torch.Tensor  # bool, shape (H, W)


@dataclass
class ApertureFunction:
    """Complex pupil sampled on a frequency grid: amplitude and path-length error.

    The applied factor is ``amplitude * exp(2*pi*j * opd / wl)``. ``None``
    members mean "identity" for that part.
    """

    amplitude: torch.Tensor | None = None  # real >= 0, shape (H, W)
    opd: torch.Tensor | None = None  # meters, shape (H, W)

    @staticmethod
    def identity() -> "ApertureFunction":
        return ApertureFunction(None, None)

    @property
    def is_identity(self) -> bool:
        return self.amplitude is None and self.opd is None

    def complex_value(self, wavelength, dtype=torch.float64) -> torch.Tensor | None:
        """The multiplicative pupil factor at one wavelength, or None if identity."""
        if self.is_identity:
            return None
        out = None
        if self.opd is not None:
            wl = wavelength if torch.is_tensor(wavelength) else torch.as_tensor(wavelength, dtype=dtype)
            out = torch.exp(1j * (_TWO_PI / wl) * self.opd.to(dtype))
        if self.amplitude is not None:
            amp = self.amplitude.to(dtype)
            out = amp + 0j if out is None else out * amp
        return out


def circular_aperture(grid: GridSpec, cutoff: float, dtype=torch.float64) -> ApertureFunction:
    """Hard circular low-pass pupil with radius ``cutoff`` in cycles/m."""
    ux, uy = freq_coords(grid, dtype=dtype)
    amp = ((ux**2 + uy**2) <= cutoff**2).to(dtype)
    return ApertureFunction(amplitude=amp, opd=None)


def asm_transfer(
    grid: GridSpec,
    z: float,
    wavelength,
    band_limit: bool = True,
    dtype=torch.float64,
    natural_order: bool = False,
) -> torch.Tensor:
    """Transfer function tensor, differentiable in ``wavelength`` when it is a tensor.

    ``wavelength`` may be a float or a tensor with any leading batch shape;
    the result broadcasts to ``(..., H, W)``. The pass masks are evaluated on
    detached wavelengths (the cutoff location carries no useful gradient).
    ``natural_order`` samples the kernel in raw FFT index order (DC at 0) for
    shift-free inner loops.
    """
    coords = freq_coords_natural if natural_order else freq_coords
    ux, uy = coords(grid, dtype=dtype)
    u2 = ux**2 + uy**2  # (H, W)
    wl = wavelength if torch.is_tensor(wavelength) else torch.as_tensor(wavelength, dtype=dtype)
    wl = wl.reshape(wl.shape + (1, 1)) if wl.dim() > 0 else wl
    wl_c = wl.detach()

    arg = 1.0 - (wl**2) * u2
    mask = (1.0 - (wl_c**2) * u2) > 0
    if band_limit and z != 0.0:
        scale = torch.sqrt(torch.as_tensor((2.0 * z / (grid.width * grid.pitch)) ** 2 + 1.0, dtype=dtype))
        ulim_x = 1.0 / (wl_c * scale)
        scale = torch.sqrt(torch.as_tensor((2.0 * z / (grid.height * grid.pitch)) ** 2 + 1.0, dtype=dtype))
        ulim_y = 1.0 / (wl_c * scale)
        mask = mask & (torch.abs(ux) <= ulim_x) & (torch.abs(uy) <= ulim_y)

    # sqrt gradient blows up at 0; keep the argument away from it off-mask
    safe = torch.where(mask, arg, torch.ones_like(arg))
    phase = (_TWO_PI * z / wl) * torch.sqrt(safe)
    return torch.exp(1j * phase) * mask


def asm_kernel(grid: GridSpec, z: float, wavelength: float, band_limit: bool = True,
               dtype=torch.float64) -> AsmKernel:
    """Build (or fetch from cache) the sampled kernel for fixed parameters."""
    transfer = _cached_transfer(grid, z, wavelength, band_limit, dtype)
    mask = transfer != 0
    return AsmKernel(grid, z, wavelength, transfer, mask)


def _cached_transfer(grid: GridSpec, z: float, wavelength: float, band_limit: bool,
                     dtype, natural_order: bool = False) -> torch.Tensor:
    key = (grid.width, grid.height, grid.pitch, float(z), float(wavelength), band_limit,
           dtype, natural_order)
    with _CACHE_LOCK:
        hit = _KERNEL_CACHE.get(key)
    if hit is not None:
        return hit
    transfer = asm_transfer(grid, z, wavelength, band_limit, dtype, natural_order)
    with _CACHE_LOCK:
        _KERNEL_CACHE[key] = transfer
    return transfer


def clear_kernel_cache() -> None:
    with _CACHE_LOCK:
        _KERNEL_CACHE.clear()


def propagate(
    field: ComplexField,
    z: float,
    aperture: ApertureFunction | None = None,
    band_limit: bool = True,
) -> ComplexField:
    """Propagate a field by ``z`` meters, optionally through a pupil function.

    Computes ``ifft2(fft2(f) * H * A)``. With an identity aperture and a
    spectrum inside the pass band this conserves energy exactly.
    """
    dtype = field.samples.real.dtype
    spectrum = fft2c(field.samples)
    transfer = _cached_transfer(field.grid, z, field.wavelength, band_limit, dtype)
    spectrum = spectrum * transfer
    if aperture is not None and not aperture.is_identity:
        pupil = aperture.complex_value(field.wavelength, dtype=dtype)
        if tuple(pupil.shape[-2:]) != field.grid.shape:
            raise ValueError(
                f"aperture sampled on {tuple(pupil.shape[-2:])}, field grid is {field.grid.shape}"
            )
        spectrum = spectrum * pupil
    return ComplexField(field.grid, ifft2c(spectrum), field.wavelength)


def propagate_tensor(
    samples: torch.Tensor,
    grid: GridSpec,
    z: float,
    wavelength,
    pupil: torch.Tensor | None = None,
    band_limit: bool = True,
) -> torch.Tensor:
    """Batched raw-tensor form of :func:`propagate` for the optimization path.

    ``samples`` has shape ``(..., H, W)``; ``wavelength`` may be a tensor
    broadcastable against the leading batch shape (kept differentiable).
    ``pupil`` is a precomputed complex factor or None.
    """
    dtype = samples.real.dtype
    if torch.is_tensor(wavelength) and wavelength.requires_grad:
        transfer = asm_transfer(grid, z, wavelength, band_limit, dtype)
    elif torch.is_tensor(wavelength) and wavelength.dim() > 0:
        transfer = torch.stack(
            [_cached_transfer(grid, z, float(w), band_limit, dtype) for w in wavelength]
        )
    else:
        wl = float(wavelength) if torch.is_tensor(wavelength) else wavelength
        transfer = _cached_transfer(grid, z, wl, band_limit, dtype)
    spectrum = fft2c(samples) * transfer
    if pupil is not None:
        spectrum = spectrum * pupil
    return ifft2c(spectrum)


def eval_aperture(model, grid: GridSpec, wavelength: float, dtype=torch.float64) -> ApertureFunction:
    """Sample an aperture model on a frequency grid at one wavelength.

    ``model`` is any object exposing ``sample(grid, wavelength, dtype)``
    (see :class:`polycgh.calibration.ApertureModel`); ``None`` gives identity.
    """
    if model is None:
        return ApertureFunction.identity()
    return model.sample(grid, wavelength, dtype=dtype)
