"""Experiment configuration: strict YAML schema with unit-suffixed keys.

Physical quantities carry their unit in the key name (``_nm``, ``_um``,
``_mm``, ``_pi``) and are converted to SI base units while parsing. Unknown
keys anywhere in the file are rejected.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import torch
import yaml

from .forward import SystemConfig
from .illumination import SpectralSource, centered_wavelengths, init_wavelengths, square_tilt_grid
from .optimize import MODES
from .slm import SlmSpec
from .targets import (
    DefocusModel,
    FocalStackTarget,
    gamut_sweep_scene,
    make_depth_layers,
    make_scene,
    saturation_scale,
    synth_focal_stack,
)
from .colorimetry import ColorImage, convert


class ConfigError(ValueError):
    """Schema violation in an experiment config file."""


def _require_mapping(node, path):
    if not isinstance(node, dict):
        raise ConfigError(f"{path}: expected a mapping")
    return node


def _take(node: dict, path: str, key: str, kind, default=None, required=False):
    if key not in node:
        if required:
            raise ConfigError(f"{path}.{key}: required key missing")
        return default
    val = node.pop(key)
    if kind is float and isinstance(val, int):
        val = float(val)
    if kind is not None and not isinstance(val, kind):
        raise ConfigError(f"{path}.{key}: expected {getattr(kind, '__name__', kind)}, got {type(val).__name__}")
    return val


def _reject_unknown(node: dict, path: str):
    if node:
        raise ConfigError(f"{path}: unknown keys {sorted(node.keys())}")


@dataclass
class ExperimentConfig:
    """Parsed, unit-converted experiment description."""

    seed: int
    precision: torch.dtype
    output: str | None
    threads: int
    mode: str
    frames: int
    loss_space: str
    # system
    slm_width: int
    slm_height: int
    pitch: float
    n_slms: int
    gap: float
    phase_range: float
    reference_wavelength: float
    bit_depth: str
    band_limit: bool
    quantize: bool
    # planes
    plane_distances: list[float]
    # source
    wavelengths: torch.Tensor
    band: tuple[float, float]
    source_mode: str
    tilt_grid: int
    tilt_spacing: float
    optimize_wavelengths: bool
    # target
    target_kind: str
    scene: str
    image_path: str | None
    layer_depths: list[float]
    saturation: float
    border_crop: int
    # optimizer
    iterations: int
    lr_phase: float
    lr_amplitude: float
    lr_wavelength: float
    trace_every: int
    # command extras
    ablate: dict = dc_field(default_factory=dict)
    correlate: dict = dc_field(default_factory=dict)
    calibrate: dict = dc_field(default_factory=dict)
    raw_text: str = ""


def load_config(path) -> ExperimentConfig:
    text = Path(path).read_text()
    return parse_config(text)


def parse_config(text: str) -> ExperimentConfig:
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML: {exc}") from exc
    root = dict(_require_mapping(doc, "<root>"))

    seed = _take(root, "<root>", "seed", int, required=True)
    precision_name = _take(root, "<root>", "precision", str, default="float64")
    if precision_name not in ("float64", "float32"):
        raise ConfigError(f"precision must be float64 or float32, got {precision_name!r}")
    precision = torch.float64 if precision_name == "float64" else torch.float32
    output = _take(root, "<root>", "output", str, default=None)
    threads = _take(root, "<root>", "threads", int, default=1)
    mode = _take(root, "<root>", "mode", str, default="polychromatic")
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}, got {mode!r}")
    frames = _take(root, "<root>", "frames", int, default=1)
    loss_space = _take(root, "<root>", "loss_space", str, default="srgb-linear")
    if loss_space not in ("srgb-linear", "srgb", "xyz", "lms", "intensity"):
        raise ConfigError(f"unsupported loss_space {loss_space!r}")

    sys_node = _require_mapping(_take(root, "<root>", "system", dict, required=True), "system")
    sys_node = dict(sys_node)
    slm_width = _take(sys_node, "system", "slm_width", int, required=True)
    slm_height = _take(sys_node, "system", "slm_height", int, required=True)
    pitch = _take(sys_node, "system", "pitch_um", float, default=8.0) * 1e-6
    n_slms = _take(sys_node, "system", "n_slms", int, default=2)
    gap = _take(sys_node, "system", "gap_mm", float, default=2.0) * 1e-3
    phase_range = _take(sys_node, "system", "phase_range_pi", float, default=3.0) * math.pi
    ref_wl = _take(sys_node, "system", "reference_wavelength_nm", float, default=550.0) * 1e-9
    bit_depth = _take(sys_node, "system", "bit_depth", str, default="continuous")
    if bit_depth not in ("continuous", "4bit"):
        raise ConfigError(f"system.bit_depth must be continuous or 4bit, got {bit_depth!r}")
    band_limit = _take(sys_node, "system", "band_limit", bool, default=True)
    quantize = _take(sys_node, "system", "quantize", bool, default=(bit_depth == "4bit"))
    _reject_unknown(sys_node, "system")

    planes_node = dict(_require_mapping(_take(root, "<root>", "planes", dict, required=True), "planes"))
    if "distances_mm" in planes_node:
        distances = _take(planes_node, "planes", "distances_mm", list, required=True)
        plane_distances = [float(d) * 1e-3 for d in distances]
    else:
        start = _take(planes_node, "planes", "start_mm", float, required=True) * 1e-3
        end = _take(planes_node, "planes", "end_mm", float, required=True) * 1e-3
        count = _take(planes_node, "planes", "count", int, required=True)
        if count < 1 or end < start:
            raise ConfigError("planes: need count >= 1 and end_mm >= start_mm")
        plane_distances = (
            [start] if count == 1 else [start + (end - start) * i / (count - 1) for i in range(count)]
        )
    _reject_unknown(planes_node, "planes")

    src_node = dict(_require_mapping(_take(root, "<root>", "source", dict, required=True), "source"))
    band_nm = _take(src_node, "source", "band_nm", list, default=[460.0, 650.0])
    band = (float(band_nm[0]) * 1e-9, float(band_nm[1]) * 1e-9)
    if "wavelengths_nm" in src_node:
        wl_list = _take(src_node, "source", "wavelengths_nm", list, required=True)
        wavelengths = torch.tensor([float(w) * 1e-9 for w in wl_list], dtype=torch.float64)
    elif "spacing_nm" in src_node:
        n = _take(src_node, "source", "n_wavelengths", int, required=True)
        spacing = _take(src_node, "source", "spacing_nm", float, required=True) * 1e-9
        center = _take(src_node, "source", "center_nm", float, default=550.0) * 1e-9
        wavelengths = centered_wavelengths(n, spacing, center)
    else:
        n = _take(src_node, "source", "n_wavelengths", int, required=True)
        wavelengths = init_wavelengths(n, band).wavelengths
    source_mode = _take(src_node, "source", "mode", str, default="ideal")
    if source_mode not in ("ideal", "multisource"):
        raise ConfigError(f"source.mode must be ideal or multisource, got {source_mode!r}")
    tilt_grid = _take(src_node, "source", "tilt_grid", int, default=2)
    tilt_spacing = _take(src_node, "source", "tilt_spacing_rad_per_m", float, default=8.0e3)
    optimize_wl = _take(src_node, "source", "optimize_wavelengths", bool, default=False)
    _reject_unknown(src_node, "source")

    tgt_node = dict(_require_mapping(_take(root, "<root>", "target", dict, required=True), "target"))
    target_kind = _take(tgt_node, "target", "kind", str, default="procedural")
    if target_kind not in ("procedural", "image", "gamut"):
        raise ConfigError(f"target.kind must be procedural, image or gamut, got {target_kind!r}")
    scene = _take(tgt_node, "target", "scene", str, default="rings")
    image_path = _take(tgt_node, "target", "image_path", str, default=None)
    depths_mm = _take(tgt_node, "target", "layer_depths_mm", list, default=None)
    layer_depths = (
        [float(d) * 1e-3 for d in depths_mm]
        if depths_mm is not None
        else [plane_distances[0], plane_distances[len(plane_distances) // 2], plane_distances[-1]]
    )
    saturation = _take(tgt_node, "target", "saturation", float, default=1.0)
    border_crop = _take(tgt_node, "target", "border_crop_px", int, default=16)
    _reject_unknown(tgt_node, "target")

    opt_node = dict(_require_mapping(_take(root, "<root>", "optimizer", dict, default={}), "optimizer"))
    iterations = _take(opt_node, "optimizer", "iterations", int, default=1000)
    lr_phase = _take(opt_node, "optimizer", "lr_phase", float, default=0.05)
    lr_amplitude = _take(opt_node, "optimizer", "lr_amplitude", float, default=0.01)
    lr_wavelength = _take(opt_node, "optimizer", "lr_wavelength", float, default=0.01)
    trace_every = _take(opt_node, "optimizer", "trace_every", int, default=25)
    _reject_unknown(opt_node, "optimizer")

    ablate = dict(_require_mapping(_take(root, "<root>", "ablate", dict, default={}), "ablate"))
    correlate = dict(_require_mapping(_take(root, "<root>", "correlate", dict, default={}), "correlate"))
    calibrate = dict(_require_mapping(_take(root, "<root>", "calibrate", dict, default={}), "calibrate"))
    _reject_unknown(root, "<root>")

    return ExperimentConfig(
        seed=seed, precision=precision, output=output, threads=threads, mode=mode,
        frames=frames, loss_space=loss_space,
        slm_width=slm_width, slm_height=slm_height, pitch=pitch, n_slms=n_slms, gap=gap,
        phase_range=phase_range, reference_wavelength=ref_wl, bit_depth=bit_depth,
        band_limit=band_limit, quantize=quantize,
        plane_distances=plane_distances,
        wavelengths=wavelengths, band=band, source_mode=source_mode,
        tilt_grid=tilt_grid, tilt_spacing=tilt_spacing, optimize_wavelengths=optimize_wl,
        target_kind=target_kind, scene=scene, image_path=image_path,
        layer_depths=layer_depths, saturation=saturation, border_crop=border_crop,
        iterations=iterations, lr_phase=lr_phase, lr_amplitude=lr_amplitude,
        lr_wavelength=lr_wavelength, trace_every=trace_every,
        ablate=ablate, correlate=correlate, calibrate=calibrate, raw_text=text,
    )


def build_system(cfg: ExperimentConfig, wavelengths: torch.Tensor | None = None,
                 n_frames: int | None = None) -> SystemConfig:
    """Instantiate the runtime system description from a parsed config."""
    spec = SlmSpec(cfg.slm_width, cfg.slm_height, cfg.pitch, cfg.phase_range,
                   cfg.reference_wavelength, cfg.bit_depth)
    wl = cfg.wavelengths if wavelengths is None else wavelengths
    if cfg.source_mode == "multisource":
        source = SpectralSource(
            wavelengths=wl.clone(),
            amplitudes=torch.ones(wl.numel(), dtype=torch.float64),
            mode="multisource",
            tilts=square_tilt_grid(cfg.tilt_grid, cfg.tilt_spacing),
            band=cfg.band,
            trainable_wavelengths=cfg.optimize_wavelengths,
        )
    else:
        source = SpectralSource(
            wavelengths=wl.clone(),
            amplitudes=torch.ones(wl.numel(), dtype=torch.float64),
            mode="ideal",
            band=cfg.band,
            trainable_wavelengths=cfg.optimize_wavelengths,
        )
    return SystemConfig(
        slm_specs=[spec] * cfg.n_slms,
        gap=cfg.gap,
        plane_distances=list(cfg.plane_distances),
        source=source,
        n_frames=cfg.frames if n_frames is None else n_frames,
        quantize=cfg.quantize,
        band_limit=cfg.band_limit,
        dtype=cfg.precision,
    )


def build_target(cfg: ExperimentConfig) -> FocalStackTarget:
    """Construct the focal-stack target named by the config."""
    width = cfg.slm_width * 2
    height = cfg.slm_height * 2
    if cfg.target_kind == "image":
        if cfg.image_path is None:
            raise ConfigError("target.kind=image needs target.image_path")
        from .imio import read_png_linear  # local import to keep config light

        data = read_png_linear(cfg.image_path)
        if data.shape[0] != height or data.shape[1] != width:
            raise ConfigError(
                f"target image is {tuple(data.shape[:2])}, system needs {(height, width)}"
            )
        img = ColorImage(data, "srgb-linear")
    elif cfg.target_kind == "gamut":
        xyz = gamut_sweep_scene(width, height)
        if cfg.saturation < 1.0:
            xyz = saturation_scale(xyz, cfg.saturation)
        img = convert(xyz, "srgb-linear")
    else:
        img = make_scene(cfg.scene, width, height, seed=cfg.seed)
    if cfg.target_kind != "gamut" and cfg.saturation < 1.0:
        xyz = saturation_scale(convert(img, "xyz"), cfg.saturation)
        img = convert(xyz, "srgb-linear")
    layers = make_depth_layers(width, height, cfg.layer_depths)
    model = DefocusModel(center_wavelength=550e-9, pitch=cfg.pitch / 2.0)
    return synth_focal_stack(img, layers, cfg.plane_distances, model=model,
                             loss_space=cfg.loss_space if cfg.loss_space != "intensity" else "srgb-linear",
                             border_crop=cfg.border_crop)
