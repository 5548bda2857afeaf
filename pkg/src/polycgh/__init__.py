"""Polychromatic dual-SLM holographic display simulation and optimization."""

from .field import ComplexField, GridSpec, energy, fft2, ifft2, upsample2x
from .propagation import ApertureFunction, AsmKernel, asm_kernel, eval_aperture, propagate
from .slm import Lut, SlmSpec, TpsWarp, lut_phase, quantize_ste, slm_field, warp_field
from .illumination import SourceAnchorModel, SpectralSource, init_wavelengths, source_field
from .colorimetry import (
    ColorImage,
    ConeFundamentals,
    convert,
    delta_e_2000,
    lms_response,
    psnr,
    speckle_contrast,
)

__version__ = "0.1.0"

__all__ = [
    "ComplexField",
    "GridSpec",
    "energy",
    "fft2",
    "ifft2",
    "upsample2x",
    "ApertureFunction",
    "AsmKernel",
    "asm_kernel",
    "eval_aperture",
    "propagate",
    "Lut",
    "SlmSpec",
    "TpsWarp",
    "lut_phase",
    "quantize_ste",
    "slm_field",
    "warp_field",
    "SourceAnchorModel",
    "SpectralSource",
    "init_wavelengths",
    "source_field",
    "ColorImage",
    "ConeFundamentals",
    "convert",
    "delta_e_2000",
    "lms_response",
    "psnr",
    "speckle_contrast",
]
