"""Complex optical fields on regular sample grids, and their Fourier transforms.

Conventions used throughout the package:

* arrays are indexed ``[row, col]`` == ``[y, x]``; a grid of ``width`` x
  ``height`` pixels is stored as a tensor of shape ``(height, width)``,
* spatial coordinates are centered: pixel ``k`` sits at ``(k - N // 2) * pitch``,
* Fourier transforms are unitary (norm preserved) and DC-centered, i.e. the
  zero-frequency sample of a spectrum lives at index ``(H // 2, W // 2)``,
* frequency samples are in cycles per meter.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch


@dataclass(frozen=True)
class GridSpec:
    """Sampling geometry of a field: pixel counts and square pixel pitch.

    Parameters
    ----------
    width, height : int
        Number of samples along x and y.
    pitch : float
        Sample spacing in meters (square pixels).
    """

    width: int
    height: int
    pitch: float

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"grid dims must be positive, got {self.width}x{self.height}")
        if self.pitch <= 0:
            raise ValueError(f"pitch must be positive, got {self.pitch}")

    @property
    def shape(self) -> tuple[int, int]:
        """Tensor shape ``(height, width)``."""
        return (self.height, self.width)

    @property
    def extent(self) -> tuple[float, float]:
        """Physical size ``(width * pitch, height * pitch)`` in meters."""
        return (self.width * self.pitch, self.height * self.pitch)

    def half_pitch(self) -> "GridSpec":
        """The grid obtained by 2x nearest-neighbor upsampling."""
        return GridSpec(self.width * 2, self.height * 2, self.pitch / 2)


@dataclass
class ComplexField:
    """A monochromatic complex field sampled on a :class:`GridSpec`."""

    grid: GridSpec
    samples: torch.Tensor
    wavelength: float

    def __post_init__(self):
        if tuple(self.samples.shape[-2:]) != self.grid.shape:
            raise ValueError(
                f"samples shape {tuple(self.samples.shape)} does not match grid {self.grid.shape}"
            )
        if self.wavelength <= 0:
            raise ValueError(f"wavelength must be positive, got {self.wavelength}")
        if not torch.is_complex(self.samples):
            raise TypeError("samples must be a complex tensor")

    def validate_finite(self) -> None:
        if not torch.isfinite(self.samples.real).all() or not torch.isfinite(self.samples.imag).all():
            raise ValueError("field contains non-finite samples")

    def clone(self) -> "ComplexField":
        return ComplexField(self.grid, self.samples.clone(), self.wavelength)


def spatial_coords(grid: GridSpec, dtype=torch.float64, device=None) -> tuple[torch.Tensor, torch.Tensor]:
    """Centered spatial coordinates ``(x, y)`` in meters, broadcastable to the grid shape.

    Returns ``x`` of shape ``(1, W)`` and ``y`` of shape ``(H, 1)``.
    """
    x = (torch.arange(grid.width, dtype=dtype, device=device) - grid.width // 2) * grid.pitch
    y = (torch.arange(grid.height, dtype=dtype, device=device) - grid.height // 2) * grid.pitch
    return x.unsqueeze(0), y.unsqueeze(1)


def freq_coords(grid: GridSpec, dtype=torch.float64, device=None) -> tuple[torch.Tensor, torch.Tensor]:
    """DC-centered frequency coordinates ``(u_x, u_y)`` in cycles per meter.

    ``u_k = (k - N // 2) / (N * pitch)``; the extreme frequency equals the
    Nyquist rate ``1 / (2 * pitch)`` for even N.
    """
    ux = (torch.arange(grid.width, dtype=dtype, device=device) - grid.width // 2) / (
        grid.width * grid.pitch
    )
    uy = (torch.arange(grid.height, dtype=dtype, device=device) - grid.height // 2) / (
        grid.height * grid.pitch
    )
    return ux.unsqueeze(0), uy.unsqueeze(1)


def freq_coords_natural(grid: GridSpec, dtype=torch.float64, device=None) -> tuple[torch.Tensor, torch.Tensor]:
    """Frequency coordinates in the raw FFT sample order (DC at index 0)."""
    ux, uy = freq_coords(grid, dtype=dtype, device=device)
    return (
        torch.fft.ifftshift(ux, dim=-1),
        torch.fft.ifftshift(uy, dim=-2),
    )


def fft2c(x: torch.Tensor) -> torch.Tensor:
    """Unitary, DC-centered 2D FFT over the last two axes of a centered signal."""
    return torch.fft.fftshift(
        torch.fft.fft2(torch.fft.ifftshift(x, dim=(-2, -1)), norm="ortho"), dim=(-2, -1)
    )


def ifft2c(x: torch.Tensor) -> torch.Tensor:
    """Inverse of :func:`fft2c` (exact to machine precision)."""
    return torch.fft.fftshift(
        torch.fft.ifft2(torch.fft.ifftshift(x, dim=(-2, -1)), norm="ortho"), dim=(-2, -1)
    )


def fft2(field: ComplexField) -> ComplexField:
    """Forward unitary Fourier transform of a field.

    The result holds DC-centered frequency-domain samples on the same grid
    object; pair with :func:`freq_coords` for physical frequencies.
    """
    field.validate_finite()
    return ComplexField(field.grid, fft2c(field.samples), field.wavelength)


def ifft2(field: ComplexField) -> ComplexField:
    """Inverse unitary Fourier transform; ``ifft2(fft2(f)) == f``."""
    field.validate_finite()
    return ComplexField(field.grid, ifft2c(field.samples), field.wavelength)


def upsample2x(pattern: torch.Tensor, grid: GridSpec) -> tuple[torch.Tensor, GridSpec]:
    """Replicate every sample into a 2x2 block, halving the pitch.

    Models one physical SLM pixel covering four simulation samples; this is
    block replication, not interpolation. Works on any leading batch shape.
    """
    if tuple(pattern.shape[-2:]) != grid.shape:
        raise ValueError(f"pattern shape {tuple(pattern.shape)} does not match grid {grid.shape}")
    up = pattern.repeat_interleave(2, dim=-2).repeat_interleave(2, dim=-1)
    return up, grid.half_pitch()


def block_downsample2x(pattern: torch.Tensor) -> torch.Tensor:
    """Average 2x2 blocks; exact inverse of :func:`upsample2x` on its outputs."""
    h, w = pattern.shape[-2:]
    if h % 2 or w % 2:
        raise ValueError("block downsample needs even dims")
    return pattern.reshape(*pattern.shape[:-2], h // 2, 2, w // 2, 2).mean(dim=(-3, -1))


def energy(field: ComplexField) -> float:
    """Total power ``sum |samples|^2``; invariant under the unitary transforms."""
    return float(torch.sum(torch.abs(field.samples) ** 2).item())
