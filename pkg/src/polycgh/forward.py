"""Image formation for the dual-modulator polychromatic display.

For every (frame, wavelength, source) the chain is

    source field -> SLM1 phase -> gap propagation -> alignment warp
                 -> SLM2 phase -> propagation to each sensor plane -> |.|^2

Intensities add incoherently over the source grid; amplitudes scale each
(frame, wavelength) once. Everything is expressed on raw batched tensors so
the same code serves plain evaluation and gradient-based optimization.

The inner loop runs in the raw FFT sample order ("natural" layout, DC at
index 0) with kernels cached in that order; this avoids the fftshift copies
that otherwise dominate CPU time. Public entry points return images in
ordinary centered layout.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .colorimetry import ColorImage, ConeFundamentals, convert, lms_response
from .field import GridSpec, fft2c, ifft2c
from .illumination import SpectralSource, source_field_tensor, tilt_field
from .propagation import asm_transfer, _cached_transfer
from .slm import Lut, SlmSpec, TpsWarp, quantize_ste, slm_phase_tensor, warp_tensor


def _ifftshift2(x: torch.Tensor) -> torch.Tensor:
    return torch.fft.ifftshift(x, dim=(-2, -1))


def _fftshift2(x: torch.Tensor) -> torch.Tensor:
    return torch.fft.fftshift(x, dim=(-2, -1))


@dataclass
class SystemConfig:
    """Geometry, devices and source of one simulated display."""

    slm_specs: list[SlmSpec]
    gap: float  # distance between the two SLMs, meters
    plane_distances: list[float]  # sensor planes, meters from the last SLM
    source: SpectralSource
    luts: list[Lut] | None = None
    apertures: list | None = None  # per hop ApertureModel (duck-typed) or None
    warp: TpsWarp | None = None
    n_frames: int = 1
    quantize: bool = False
    band_limit: bool = True
    dtype: torch.dtype = torch.float64

    def __post_init__(self):
        if len(self.slm_specs) not in (1, 2):
            raise ValueError("supported modulator counts are 1 and 2")
        if len(self.slm_specs) == 2:
            if self.gap <= 0:
                raise ValueError("two-SLM systems need a positive gap")
            if (self.slm_specs[0].width, self.slm_specs[0].height) != (
                self.slm_specs[1].width,
                self.slm_specs[1].height,
            ):
                raise ValueError("both SLMs must share a resolution")
        if self.n_frames < 1:
            raise ValueError("need at least one time frame")
        if not self.plane_distances:
            raise ValueError("need at least one sensor plane")
        if self.quantize and any(s.bit_depth != "4bit" for s in self.slm_specs):
            raise ValueError("quantized runs need 4-bit SLM specs (level-domain patterns)")
        if self.luts is None:
            self.luts = [Lut.linear(s) for s in self.slm_specs]
        if self.apertures is None:
            self.apertures = [None, None]

    @property
    def n_slms(self) -> int:
        return len(self.slm_specs)

    @property
    def sim_grid(self) -> GridSpec:
        """The 2x-upsampled grid all wave propagation happens on."""
        return self.slm_specs[0].grid.half_pitch()

    @property
    def complex_dtype(self) -> torch.dtype:
        return torch.complex64 if self.dtype == torch.float32 else torch.complex128


@dataclass
class IntensityCube:
    """Per (frame, wavelength, plane) nonnegative intensity images."""

    values: torch.Tensor  # (N_t, N_wl, N_z, H, W)
    wavelengths: torch.Tensor  # (N_wl,)
    distances: list[float]
    config: SystemConfig | None = None

    def validate(self) -> None:
        v = self.values.detach()
        if not torch.isfinite(v).all():
            raise ValueError("intensity cube contains non-finite values")
        if v.min() < 0:
            raise ValueError("intensity cube contains negative values")


def _check_patterns(cfg: SystemConfig, patterns: torch.Tensor) -> None:
    spec = cfg.slm_specs[0]
    expected = (cfg.n_slms, cfg.n_frames, spec.height, spec.width)
    if tuple(patterns.shape) != expected:
        raise ValueError(f"pattern tensor shape {tuple(patterns.shape)} != expected {expected}")


def _pupil_stack(cfg: SystemConfig, hop: int, wavelengths: torch.Tensor) -> torch.Tensor | None:
    """Complex pupil factors (N_wl, H, W) in natural order, or None if identity."""
    model = cfg.apertures[hop] if hop < len(cfg.apertures) else None
    if model is None:
        return None
    grid = cfg.sim_grid
    vals = []
    for wl in wavelengths:
        ap = model.sample(grid, wl, dtype=cfg.dtype)
        pupil = ap.complex_value(wl, dtype=cfg.dtype)
        vals.append(
            pupil if pupil is not None else torch.ones(grid.shape, dtype=cfg.complex_dtype)
        )
    return _ifftshift2(torch.stack(vals).to(cfg.complex_dtype))


def _transfer_stack(cfg: SystemConfig, z: float, wavelengths: torch.Tensor) -> torch.Tensor:
    """Natural-order kernels (N_wl, H, W); cached per wavelength when constant."""
    grid = cfg.sim_grid
    if wavelengths.requires_grad:
        h = asm_transfer(grid, z, wavelengths, cfg.band_limit, cfg.dtype, natural_order=True)
        return h.to(cfg.complex_dtype)
    return torch.stack(
        [
            _cached_transfer(grid, z, float(w), cfg.band_limit, cfg.dtype, natural_order=True)
            for w in wavelengths
        ]
    ).to(cfg.complex_dtype)


def _slm_phase_factors(cfg: SystemConfig, patterns: torch.Tensor,
                       wavelengths: torch.Tensor) -> list[torch.Tensor]:
    """exp(j*phase) per SLM, shape (N_t, N_wl, H, W), natural order."""
    factors = []
    for k in range(cfg.n_slms):
        g = patterns[k].to(cfg.dtype)
        if cfg.quantize:
            g = quantize_ste(g)
        ref_phase = slm_phase_tensor(g, cfg.luts[k], cfg.luts[k].reference_wavelength,
                                     cfg.slm_specs[k].grid)
        ref_phase = _ifftshift2(ref_phase)  # cheap: one real (N_t, H, W) tensor
        # reference phase scaled per wavelength: phase * wl_ref / wl
        scale = (cfg.luts[k].reference_wavelength / wavelengths).to(cfg.dtype)
        phase = ref_phase.unsqueeze(1) * scale.reshape(1, -1, 1, 1)
        factors.append(torch.polar(torch.ones((), dtype=cfg.dtype).expand_as(phase), phase))
    return factors


def _source_stack(cfg: SystemConfig, wavelengths: torch.Tensor) -> torch.Tensor | None:
    """Incident fields (N_wl, S, H, W) natural order; None for unit plane waves."""
    grid = cfg.sim_grid
    src = cfg.source
    if src.mode == "ideal":
        return None
    if src.mode == "multisource":
        fields = torch.stack(
            [tilt_field(grid, t.to(torch.float64), dtype=cfg.dtype) for t in src.tilts]
        )
        fields = fields.unsqueeze(0).expand(len(wavelengths), -1, -1, -1)
        return _ifftshift2(fields.to(cfg.complex_dtype))
    fields = torch.stack(
        [source_field_tensor(src, wl, grid, dtype=cfg.dtype) for wl in wavelengths]
    )
    return _ifftshift2(fields.unsqueeze(1).to(cfg.complex_dtype))


def _field_after_slms(cfg: SystemConfig, patterns: torch.Tensor,
                      wavelengths: torch.Tensor) -> torch.Tensor:
    """Natural-order field (N_t, N_wl, S, H, W) exiting the modulator stack."""
    phases = _slm_phase_factors(cfg, patterns, wavelengths)
    source = _source_stack(cfg, wavelengths)
    field = phases[0].unsqueeze(2)
    if source is not None:
        field = field * source.unsqueeze(0)
    if cfg.n_slms == 2:
        h1 = _transfer_stack(cfg, cfg.gap, wavelengths).reshape(1, -1, 1, *cfg.sim_grid.shape)
        spectrum = torch.fft.fft2(field, norm="ortho") * h1
        p1 = _pupil_stack(cfg, 0, wavelengths)
        if p1 is not None:
            spectrum = spectrum * p1.unsqueeze(0).unsqueeze(2)
        field = torch.fft.ifft2(spectrum, norm="ortho")
        if cfg.warp is not None:
            field = _ifftshift2(warp_tensor(_fftshift2(field), cfg.sim_grid, cfg.warp))
        field = field * phases[1].unsqueeze(2)
    return field


def forward_intensity(
    cfg: SystemConfig,
    patterns: torch.Tensor,
    wavelengths: torch.Tensor | None = None,
    amplitudes: torch.Tensor | None = None,
    natural_output: bool = False,
) -> torch.Tensor:
    """The differentiable core: intensities (N_t, N_wl, N_z, H, W).

    ``patterns`` is (n_slms, N_t, h, w) grayscale; ``amplitudes`` is
    (N_t, N_wl) and defaults to the source amplitudes on every frame.
    ``natural_output=True`` skips the final layout shift (for inner loops
    whose consumers are layout-invariant or pre-shifted).
    """
    _check_patterns(cfg, patterns)
    wl = cfg.source.wavelengths if wavelengths is None else wavelengths
    if amplitudes is None:
        amplitudes = cfg.source.amplitudes.unsqueeze(0).expand(cfg.n_frames, -1)
    field = _field_after_slms(cfg, patterns, wl)

    spectrum = torch.fft.fft2(field, norm="ortho")
    p2 = _pupil_stack(cfg, 1 if cfg.n_slms == 2 else 0, wl)
    if p2 is not None:
        spectrum = spectrum * p2.unsqueeze(0).unsqueeze(2)
    outputs = []
    for z in cfg.plane_distances:
        hz = _transfer_stack(cfg, z, wl).reshape(1, -1, 1, *cfg.sim_grid.shape)
        out = torch.fft.ifft2(spectrum * hz, norm="ortho")
        intensity = (out.real**2 + out.imag**2).sum(dim=2)  # incoherent over sources
        outputs.append(intensity)
    cube = torch.stack(outputs, dim=2)  # (N_t, N_wl, N_z, H, W)
    cube = cube * amplitudes.to(cube.dtype).reshape(cfg.n_frames, -1, 1, 1, 1)
    return cube if natural_output else _fftshift2(cube)


def forward(cfg: SystemConfig, patterns: torch.Tensor,
            amplitudes: torch.Tensor | None = None) -> IntensityCube:
    """Full image formation; validates and boxes the result."""
    values = forward_intensity(cfg, patterns, amplitudes=amplitudes)
    cube = IntensityCube(values, cfg.source.wavelengths.clone(), list(cfg.plane_distances), cfg)
    cube.validate()
    return cube


def perceive(cube: IntensityCube, cf: ConeFundamentals | None = None,
             target_space: str = "srgb-linear") -> list[ColorImage]:
    """Temporal integration + cone response + colorspace, one image per plane."""
    summed = cube.values.sum(dim=0)  # (N_wl, N_z, H, W)
    out = []
    for zi in range(summed.shape[1]):
        lms = lms_response(summed[:, zi], cube.wavelengths, cf)
        out.append(convert(lms, target_space, cf))
    return out


def perceive_flat(cube: IntensityCube) -> torch.Tensor:
    """Monochromatic sensor with flat spectral response: plain sums (N_z, H, W)."""
    return cube.values.sum(dim=0).sum(dim=0)


def eyebox(cfg: SystemConfig, patterns: torch.Tensor, wl_index: int, frame: int) -> torch.Tensor:
    """Pupil-plane intensity |FFT|^2 of the field leaving the modulator stack.

    Computed from the field at the sensor side of the final SLM (z = 0); with
    identity apertures the pupil intensity is the same at any downstream
    plane because propagation only adds unit-modulus phase per frequency.
    DC-centered.
    """
    _check_patterns(cfg, patterns)
    field = _field_after_slms(cfg, patterns, cfg.source.wavelengths)
    pupil = torch.fft.fft2(field[frame, wl_index], norm="ortho")  # (S, H, W)
    return _fftshift2((pupil.real**2 + pupil.imag**2).sum(dim=0))


def ncc_peak(a: torch.Tensor, b: torch.Tensor) -> float:
    """Peak of the zero-mean normalized cross-correlation over all shifts."""
    a0 = (a - a.mean()).to(torch.float64)
    b0 = (b - b.mean()).to(torch.float64)
    cc = torch.fft.ifft2(torch.fft.fft2(a0) * torch.fft.fft2(b0).conj()).real
    denom = torch.sqrt((a0**2).sum() * (b0**2).sum())
    if float(denom) == 0.0:
        raise ValueError("correlation undefined for constant images")
    return float(cc.max() / denom)


def speckle_correlation(
    cfg: SystemConfig,
    patterns: torch.Tensor,
    sweep: str,
    deltas: torch.Tensor,
    gaps: list[float],
    plane: float | None = None,
) -> torch.Tensor:
    """Memory-effect curves: correlation vs parameter delta, one row per gap.

    ``sweep`` is ``wavelength`` (delta in meters added to the center
    wavelength) or ``tilt`` (delta is a phase slope in rad/m along x). The
    pattern set stays fixed; the correlation is the peak normalized
    cross-correlation against the zero-delta intensity.
    """
    if sweep not in ("wavelength", "tilt"):
        raise ValueError(f"unknown sweep kind {sweep!r}")
    z = plane if plane is not None else cfg.plane_distances[len(cfg.plane_distances) // 2]
    center_wl = float(cfg.source.wavelengths[cfg.source.n_wavelengths // 2])
    curves = torch.zeros(len(gaps), len(deltas), dtype=torch.float64)
    for gi, gap in enumerate(gaps):
        ref = None
        for di, delta in enumerate(deltas):
            wl = center_wl + (float(delta) if sweep == "wavelength" else 0.0)
            if sweep == "tilt" and float(delta) != 0.0:
                src = SpectralSource(
                    wavelengths=torch.tensor([wl], dtype=torch.float64),
                    amplitudes=torch.ones(1, dtype=torch.float64),
                    mode="multisource",
                    tilts=torch.tensor([[float(delta), 0.0]], dtype=torch.float64),
                )
            else:
                src = SpectralSource(
                    wavelengths=torch.tensor([wl], dtype=torch.float64),
                    amplitudes=torch.ones(1, dtype=torch.float64),
                    mode="ideal",
                )
            sub = SystemConfig(
                slm_specs=cfg.slm_specs,
                gap=gap if gap > 0 else 1e-12,
                plane_distances=[z],
                source=src,
                luts=cfg.luts,
                apertures=cfg.apertures,
                warp=cfg.warp,
                n_frames=1,
                quantize=cfg.quantize,
                band_limit=cfg.band_limit,
                dtype=cfg.dtype,
            )
            if gap == 0.0:
                sub.gap = 0.0 if sub.n_slms == 1 else 1e-12
                intensity = _zero_gap_intensity(sub, patterns, z)
            else:
                intensity = forward_intensity(sub, patterns, natural_output=True)[0, 0, 0]
            if di == 0:
                ref = intensity
            curves[gi, di] = ncc_peak(ref, intensity)
    return curves


def _zero_gap_intensity(cfg: SystemConfig, patterns: torch.Tensor, z: float) -> torch.Tensor:
    """Both modulator phases applied at the same plane (gap = 0 reference)."""
    wl = cfg.source.wavelengths
    phases = _slm_phase_factors(cfg, patterns, wl)
    combined = phases[0]
    if cfg.n_slms == 2:
        combined = combined * phases[1]
    field = combined.unsqueeze(2)
    source = _source_stack(cfg, wl)
    if source is not None:
        field = field * source.unsqueeze(0)
    hz = _transfer_stack(cfg, z, wl).reshape(1, -1, 1, *cfg.sim_grid.shape)
    out = torch.fft.ifft2(torch.fft.fft2(field, norm="ortho") * hz, norm="ortho")
    return (out.real**2 + out.imag**2).sum(dim=2)[0, 0]
