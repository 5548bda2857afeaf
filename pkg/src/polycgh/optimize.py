"""Gradient-based hologram optimization against focal-stack targets.

The trainables are the SLM grayscale patterns (per SLM, per frame), the
per-(frame, wavelength) source amplitudes and optionally the wavelengths
themselves. Amplitudes stay nonnegative through squaring an unconstrained
parameter; trainable wavelengths stay inside their band through a scaled
sigmoid. The scalar objective is the mean squared error between the rendered
focal stack and the target in a configurable color space, with a border crop.

Color-mode protocols:

* ``time-sequential``: one wavelength per frame, each frame optimized
  independently against the target decomposed into the laser-primary basis;
* ``simultaneous``: three wavelengths jointly in a single frame;
* ``multiplexed``: three wavelengths jointly across several frames;
* ``polychromatic``: any number of wavelengths jointly (the wavelength-
  multiplexed display this package is about);
* ``multisource`` / ``polychromatic+multisource``: the same with a tilted
  source grid whose intensities add incoherently.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field, replace

import torch

from .colorimetry import (
    ColorImage,
    ConeFundamentals,
    convert,
    default_cone_fundamentals,
    delta_e_2000,
    luminance,
    psnr,
    speckle_contrast,
)
from .forward import IntensityCube, SystemConfig, forward_intensity
from .illumination import SpectralSource
from .targets import FocalStackTarget

MODES = (
    "time-sequential",
    "simultaneous",
    "multiplexed",
    "polychromatic",
    "multisource",
    "polychromatic+multisource",
)


class OptimizationDiverged(RuntimeError):
    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace or []


@dataclass
class TrainableState:
    """All trainable tensors of one optimization problem."""

    patterns: torch.Tensor  # (n_slms, N_t, h, w)
    amp_raw: torch.Tensor  # (N_t, N_wl); amplitude = amp_raw**2 * mask
    wl_raw: torch.Tensor | None = None  # (N_wl,) sigmoid parameters, or None

    def detach_clone(self) -> "TrainableState":
        return TrainableState(
            self.patterns.detach().clone(),
            self.amp_raw.detach().clone(),
            None if self.wl_raw is None else self.wl_raw.detach().clone(),
        )

    def requires_grad_(self, flags: dict[str, bool]) -> "TrainableState":
        self.patterns.requires_grad_(flags.get("patterns", True))
        self.amp_raw.requires_grad_(flags.get("amplitudes", True))
        if self.wl_raw is not None:
            self.wl_raw.requires_grad_(flags.get("wavelengths", True))
        return self


@dataclass
class OptimizationProblem:
    """One solvable problem: system + prepared target + solver settings."""

    config: SystemConfig
    target: torch.Tensor  # (N_z, H, W, 3) in target_space, or (N_z, H, W) intensity
    target_space: str  # colorspace tag or "intensity"
    border_crop: int = 16
    iterations: int = 1000
    lr_phase: float = 0.05
    lr_amplitude: float = 0.01
    lr_wavelength: float = 0.01
    seed: int = 0
    optimize_amplitudes: bool = True
    optimize_wavelengths: bool = False
    amplitude_mask: torch.Tensor | None = None  # (N_t, N_wl) 0/1
    trace_every: int = 25
    cone: ConeFundamentals | None = None

    def __post_init__(self):
        nz = len(self.config.plane_distances)
        if self.target.shape[0] != nz:
            raise ValueError(f"target has {self.target.shape[0]} planes, config has {nz}")
        want_3c = self.target_space != "intensity"
        if want_3c and (self.target.dim() != 4 or self.target.shape[-1] != 3):
            raise ValueError("3-channel loss spaces need a (N_z, H, W, 3) target")
        if not want_3c and self.target.dim() != 3:
            raise ValueError("intensity loss needs a (N_z, H, W) target")
        h, w = self.config.sim_grid.shape
        if self.target.shape[1] != h or self.target.shape[2] != w:
            raise ValueError(
                f"target resolution {tuple(self.target.shape[1:3])} does not match simulation grid {(h, w)}"
            )
        if self.optimize_wavelengths and not self.config.source.trainable_wavelengths:
            self.config.source.trainable_wavelengths = True
        if self.amplitude_mask is None:
            self.amplitude_mask = torch.ones(
                self.config.n_frames, self.config.source.n_wavelengths, dtype=torch.float64
            )
        # the inner loop works in raw FFT layout: pre-shift the target and the
        # border-crop weights once
        m = self.border_crop
        weights = torch.zeros(h, w, dtype=torch.float64)
        if m > 0:
            weights[m:-m, m:-m] = 1.0
        else:
            weights[:] = 1.0
        self._weights_nat = torch.fft.ifftshift(weights)
        if want_3c:
            tgt_nat = torch.fft.ifftshift(self.target, dim=(1, 2))
            self._peak = float((self.target.amax(dim=(0, 3)) * weights).max())
        else:
            tgt_nat = torch.fft.ifftshift(self.target, dim=(1, 2))
            self._peak = float((self.target.amax(dim=0) * weights).max())
        self._target_nat = tgt_nat
        self._weight_count = float(weights.sum())

    @property
    def cone_fundamentals(self) -> ConeFundamentals:
        return self.cone or default_cone_fundamentals()


def prepare_target(stack: FocalStackTarget, space: str,
                   cf: ConeFundamentals | None = None) -> torch.Tensor:
    """Stack plane images into one tensor, converted into the loss space."""
    imgs = [convert(img, space, cf).data for _, img in stack.planes]
    return torch.stack(imgs, dim=0)


def _crop(x: torch.Tensor, margin: int, channels_last: bool) -> torch.Tensor:
    if margin <= 0:
        return x
    if channels_last:
        return x[:, margin:-margin, margin:-margin, :]
    return x[:, margin:-margin, margin:-margin]


def _wl_bounds(src: SpectralSource) -> tuple[float, float]:
    return src.band


def wavelengths_from_raw(problem: OptimizationProblem, wl_raw: torch.Tensor | None) -> torch.Tensor:
    """Sigmoid reparameterization keeping trained wavelengths inside the band."""
    src = problem.config.source
    if wl_raw is None:
        return src.wavelengths
    lo, hi = _wl_bounds(src)
    return lo + (hi - lo) * torch.sigmoid(wl_raw)


def init_state(problem: OptimizationProblem, generator: torch.Generator | None = None) -> TrainableState:
    """Random full-range phase patterns, brightness-matched amplitudes.

    The source amplitudes are scaled once by the least-squares global factor
    between a unit-amplitude probe rendering and the target, so the descent
    starts at the right overall brightness instead of spending its budget on
    a global rescale.
    """
    cfg = problem.config
    gen = generator or torch.Generator().manual_seed(problem.seed)
    spec = cfg.slm_specs[0]
    hi = 15.0 if cfg.quantize or spec.bit_depth == "4bit" else 1.0
    patterns = (
        torch.rand(cfg.n_slms, cfg.n_frames, spec.height, spec.width, generator=gen,
                   dtype=torch.float64) * hi
    ).to(cfg.dtype)
    amp_raw = torch.sqrt(cfg.source.amplitudes.to(torch.float64)).unsqueeze(0).repeat(
        cfg.n_frames, 1
    ).to(cfg.dtype)
    wl_raw = None
    if problem.optimize_wavelengths:
        lo, hi_b = _wl_bounds(cfg.source)
        frac = (cfg.source.wavelengths - lo) / (hi_b - lo)
        frac = frac.clamp(0.005, 0.995)  # keep the sigmoid init finite at band edges
        wl_raw = torch.log(frac / (1.0 - frac)).to(torch.float64)

    state = TrainableState(patterns, amp_raw, wl_raw)
    with torch.no_grad():
        wl = wavelengths_from_raw(problem, wl_raw)
        amps = (amp_raw**2) * problem.amplitude_mask.to(amp_raw.dtype)
        cube = forward_intensity(cfg, patterns, wl, amps, natural_output=True)
        out = render_output(problem, cube, wl).to(torch.float64)
        t = problem._target_nat.to(torch.float64)
        w = problem._weights_nat
        if problem.target_space != "intensity":
            w = w.unsqueeze(-1)
        denom = float((out * out * w).sum())
        scale = float((out * t * w).sum()) / denom if denom > 0 else 1.0
        state.amp_raw = (amp_raw * math.sqrt(max(scale, 1e-12))).to(cfg.dtype)
    return state


def render_output(problem: OptimizationProblem, cube_values: torch.Tensor,
                  wavelengths: torch.Tensor) -> torch.Tensor:
    """Cube -> loss-space stack; keeps the graph for backprop."""
    summed = cube_values.sum(dim=0)  # (N_wl, N_z, H, W)
    if problem.target_space == "intensity":
        return summed.sum(dim=0)
    cf = problem.cone_fundamentals
    w = cf.weights(wavelengths).to(summed.dtype)  # (N_wl, 3)
    lms = torch.einsum("nzhw,nc->zhwc", summed, w)
    if problem.target_space == "lms":
        return lms
    return convert(ColorImage(lms, "lms"), problem.target_space, cf).data


def evaluate(problem: OptimizationProblem, state: TrainableState) -> tuple[torch.Tensor, torch.Tensor]:
    """(scalar loss, rendered natural-layout output stack) with gradients attached.

    The loss is the mean squared error over the border-cropped region,
    evaluated as a weighted sum so the whole chain stays in raw FFT layout.
    """
    cfg = problem.config
    wl = wavelengths_from_raw(problem, state.wl_raw)
    amps = (state.amp_raw**2) * problem.amplitude_mask.to(state.amp_raw.dtype)
    cube = forward_intensity(cfg, state.patterns, wl, amps, natural_output=True)
    out = render_output(problem, cube, wl)
    channels_last = problem.target_space != "intensity"
    t = problem._target_nat.to(out.dtype)
    w = problem._weights_nat.to(out.dtype)
    sq = (out - t) ** 2
    if channels_last:
        loss = (sq * w.unsqueeze(-1)).sum() / (problem._weight_count * sq.shape[0] * 3)
    else:
        loss = (sq * w).sum() / (problem._weight_count * sq.shape[0])
    return loss, out


def loss(problem: OptimizationProblem, state: TrainableState) -> float:
    with torch.no_grad():
        value, _ = evaluate(problem, state)
    return float(value)


def gradients(problem: OptimizationProblem, state: TrainableState) -> dict[str, torch.Tensor]:
    """Reverse-mode gradients for every trainable group; rejects non-finite ones."""
    work = state.detach_clone().requires_grad_(
        {"wavelengths": problem.optimize_wavelengths}
    )
    value, _ = evaluate(problem, work)
    value.backward()
    grads = {"patterns": work.patterns.grad, "amplitudes": work.amp_raw.grad}
    if work.wl_raw is not None and work.wl_raw.grad is not None:
        grads["wavelengths"] = work.wl_raw.grad
    for name, g in grads.items():
        if g is not None and not torch.isfinite(g).all():
            raise OptimizationDiverged(f"non-finite gradient in {name}")
    return grads


@dataclass
class OptimizationResult:
    state: TrainableState
    best_loss: float
    trace: list[dict]  # iteration, loss, psnr (loss space)
    wavelengths: torch.Tensor
    amplitudes: torch.Tensor  # (N_t, N_wl) effective


def optimize(problem: OptimizationProblem, state0: TrainableState | None = None) -> OptimizationResult:
    """Adam descent over the trainables; returns the best-loss state seen."""
    cfg = problem.config
    gen = torch.Generator().manual_seed(problem.seed)
    state = (state0.detach_clone() if state0 is not None else init_state(problem, gen))
    state.requires_grad_({"wavelengths": problem.optimize_wavelengths})

    groups = [{"params": [state.patterns], "lr": problem.lr_phase}]
    if problem.optimize_amplitudes:
        groups.append({"params": [state.amp_raw], "lr": problem.lr_amplitude})
    else:
        state.amp_raw.requires_grad_(False)
    if problem.optimize_wavelengths and state.wl_raw is not None:
        groups.append({"params": [state.wl_raw], "lr": problem.lr_wavelength})
    opt = torch.optim.Adam(groups, betas=(0.9, 0.999))

    best = state.detach_clone()
    best_loss = math.inf
    trace: list[dict] = []
    for it in range(problem.iterations + 1):
        opt.zero_grad(set_to_none=True)
        value, out = evaluate(problem, state)
        fval = float(value.detach())
        if not math.isfinite(fval):
            raise OptimizationDiverged(f"loss diverged at iteration {it}", trace)
        if fval < best_loss:
            best_loss = fval
            best = state.detach_clone()
        if it % problem.trace_every == 0 or it == problem.iterations:
            trace.append({"iteration": it, "loss": fval,
                          "psnr_db": _quick_psnr(problem, out.detach())})
        if it == problem.iterations:
            break
        value.backward()
        opt.step()
        _assert_parameter_invariants(problem, state)

    wl = wavelengths_from_raw(problem, best.wl_raw).detach()
    amps = ((best.amp_raw**2) * problem.amplitude_mask.to(best.amp_raw.dtype)).detach()
    return OptimizationResult(best, best_loss, trace, wl, amps)


def _assert_parameter_invariants(problem: OptimizationProblem, state: TrainableState) -> None:
    # nonnegativity / band membership are structural; cheap belt-and-braces check
    amps = (state.amp_raw.detach() ** 2)
    if float(amps.min()) < 0:
        raise OptimizationDiverged("amplitude turned negative")
    if state.wl_raw is not None:
        lo, hi = _wl_bounds(problem.config.source)
        wl = wavelengths_from_raw(problem, state.wl_raw.detach())
        if float(wl.min()) < lo or float(wl.max()) > hi:
            raise OptimizationDiverged("wavelength left the configured band")


def _quick_psnr(problem: OptimizationProblem, out: torch.Tensor) -> float:
    """Loss-space PSNR of a natural-layout output against the prepared target."""
    channels_last = problem.target_space != "intensity"
    o = out.to(torch.float64)
    t = problem._target_nat.to(torch.float64)
    w = problem._weights_nat
    sq = (o - t) ** 2
    if channels_last:
        mse = float((sq * w.unsqueeze(-1)).sum() / (problem._weight_count * sq.shape[0] * 3))
    else:
        mse = float((sq * w).sum() / (problem._weight_count * sq.shape[0]))
    peak = problem._peak
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


# --- color-mode protocols ---------------------------------------------------


def primary_mixing_matrix(wavelengths: torch.Tensor, space: str,
                          cf: ConeFundamentals | None = None) -> torch.Tensor:
    """Columns are the loss-space color vectors of unit-intensity laser lines."""
    cf = cf or default_cone_fundamentals()
    cols = []
    for wl in wavelengths:
        lms = cf.weights(wl)
        vec = convert(ColorImage(lms.reshape(1, 1, 3), "lms"), space, cf).data.reshape(3)
        cols.append(vec)
    return torch.stack(cols, dim=1)


def primary_decomposition(target: torch.Tensor, wavelengths: torch.Tensor, space: str,
                          cf: ConeFundamentals | None = None) -> torch.Tensor:
    """Express a (N_z, H, W, 3) linear-space target in the laser-primary basis.

    Returns (N_wl, N_z, H, W) nonnegative per-line intensity targets; colors
    outside the laser gamut are clamped at zero contribution.
    """
    if wavelengths.numel() != 3:
        raise ValueError("primary decomposition needs exactly 3 laser lines")
    if space not in ("srgb-linear", "xyz", "lms"):
        raise ValueError("primary decomposition is defined for linear spaces")
    m = primary_mixing_matrix(wavelengths, space, cf)
    sol = torch.linalg.solve(m.to(target.dtype), target.reshape(-1, 3).T)
    per_line = sol.T.reshape(*target.shape[:-1], 3).clamp_min(0.0)
    return per_line.permute(3, 0, 1, 2)


@dataclass
class ModeRun:
    """Everything a report needs from one solved color-mode run."""

    mode: str
    config: SystemConfig
    patterns: torch.Tensor  # (n_slms, N_t, h, w)
    amplitudes: torch.Tensor  # (N_t, N_wl)
    wavelengths: torch.Tensor
    traces: list[list[dict]]
    best_loss: float


def run_mode(
    mode: str,
    config: SystemConfig,
    target: FocalStackTarget,
    loss_space: str = "srgb-linear",
    iterations: int = 1000,
    seed: int = 0,
    lr_phase: float = 0.05,
    lr_amplitude: float = 0.01,
    lr_wavelength: float = 0.01,
    optimize_wavelengths: bool = False,
    trace_every: int = 25,
    cf: ConeFundamentals | None = None,
    state0: TrainableState | None = None,
) -> ModeRun:
    """Build and solve the optimization problem(s) matching a color mode."""
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; choose from {MODES}")
    src = config.source
    n_wl = src.n_wavelengths
    n_t = config.n_frames
    sequential = mode in ("time-sequential", "multisource")
    if sequential:
        if n_wl != n_t:
            raise ValueError(f"{mode} needs one wavelength per frame (N_wl == N_t)")
        if loss_space != "intensity" and n_wl != 3:
            raise ValueError(f"{mode} color runs need exactly 3 wavelengths")
    if mode == "simultaneous":
        if n_t != 1:
            raise ValueError("simultaneous mode is single-frame")
        if n_wl != 3:
            raise ValueError("simultaneous mode uses 3 wavelengths")
    if mode == "multiplexed" and n_wl != 3:
        raise ValueError("multiplexed mode uses 3 wavelengths")
    if mode in ("multisource", "polychromatic+multisource") and src.mode != "multisource":
        raise ValueError(f"{mode} needs a multisource tilt grid on the source")
    if mode in ("polychromatic", "multiplexed", "simultaneous") and src.mode == "multisource":
        raise ValueError(f"{mode} expects a single-source illumination")
    if sequential and optimize_wavelengths:
        raise ValueError("per-frame sequential runs keep their wavelengths fixed")

    if not sequential:
        target_tensor = (
            prepare_target(target, loss_space, cf)
            if loss_space != "intensity"
            else _intensity_target(target)
        )
        problem = OptimizationProblem(
            config=config,
            target=target_tensor,
            target_space=loss_space,
            border_crop=target.border_crop,
            iterations=iterations,
            lr_phase=lr_phase,
            lr_amplitude=lr_amplitude,
            lr_wavelength=lr_wavelength,
            seed=seed,
            optimize_wavelengths=optimize_wavelengths,
            trace_every=trace_every,
            cone=cf,
        )
        result = optimize(problem, state0=state0)
        return ModeRun(mode, config, result.state.patterns.detach(), result.amplitudes,
                       result.wavelengths, [result.trace], result.best_loss)

    # one independent single-frame problem per wavelength/channel
    if loss_space == "intensity":
        full = _intensity_target(target)
        per_line = torch.stack([full / n_wl for _ in range(n_wl)])
    else:
        linear = prepare_target(target, loss_space, cf)
        per_line = primary_decomposition(linear, src.wavelengths, loss_space, cf)

    spec = config.slm_specs[0]
    patterns = torch.zeros(config.n_slms, n_t, spec.height, spec.width, dtype=config.dtype)
    amplitudes = torch.zeros(n_t, n_wl, dtype=config.dtype)
    traces = []
    total_loss = 0.0
    for c in range(n_wl):
        sub_source = SpectralSource(
            wavelengths=src.wavelengths[c : c + 1].clone(),
            amplitudes=torch.ones(1, dtype=torch.float64),
            mode=src.mode,
            tilts=None if src.tilts is None else src.tilts.clone(),
            anchor_model=src.anchor_model,
            band=src.band,
        )
        sub_config = replace(config, source=sub_source, n_frames=1)
        problem = OptimizationProblem(
            config=sub_config,
            target=per_line[c],
            target_space="intensity",
            border_crop=target.border_crop,
            iterations=iterations,
            lr_phase=lr_phase,
            lr_amplitude=lr_amplitude,
            seed=seed + 1000 * c,
            trace_every=trace_every,
            cone=cf,
        )
        result = optimize(problem)
        patterns[:, c] = result.state.patterns.detach()[:, 0]
        amplitudes[c, c] = result.amplitudes[0, 0]
        traces.append(result.trace)
        total_loss += result.best_loss
    return ModeRun(mode, config, patterns, amplitudes, src.wavelengths.clone(), traces,
                   total_loss / n_wl)


def _intensity_target(target: FocalStackTarget) -> torch.Tensor:
    """Single-channel targets: luminance-like channel mean of the plane images."""
    planes = []
    for _, img in target.planes:
        if img.space == "srgb-linear":
            planes.append(img.data.mean(dim=-1))
        else:
            planes.append(convert(img, "xyz").data[..., 1])
    return torch.stack(planes)


# --- evaluation --------------------------------------------------------------


def plane_metrics(out_lin: ColorImage, target_img: ColorImage, margin: int,
                  cf: ConeFundamentals | None = None) -> dict:
    """Reporting metrics for one plane: PSNRs, color difference, residual speckle.

    Residual speckle contrast is the contrast of result/target channel-mean
    over the target's bright region (direct speckle measurement on a
    structured image would report the image content itself).
    """
    cf = cf or default_cone_fundamentals()
    out_lin = convert(out_lin, "srgb-linear", cf)
    tgt_lin = convert(target_img, "srgb-linear", cf)

    def crop(img: ColorImage) -> ColorImage:
        if margin <= 0:
            return img
        return ColorImage(img.data[margin:-margin, margin:-margin, :], img.space)

    oc, tc = crop(out_lin), crop(tgt_lin)
    oxyz, txyz = convert(oc, "xyz", cf), convert(tc, "xyz", cf)
    de_map, de_mean = delta_e_2000(oxyz, txyz, cf)
    bright = tc.data.mean(dim=-1) > 0.5 * float(tc.data.mean(dim=-1).max())
    ratio = (oc.data.mean(dim=-1)[bright] / tc.data.mean(dim=-1)[bright]).clamp_min(0.0)
    return {
        "psnr_lum_db": psnr(oc, tc, "luminance", cf),
        "psnr_xyz_db": psnr(oc, tc, "xyz", cf),
        "psnr_srgb_db": psnr(oc, tc, "srgb-linear", cf),
        "delta_e2000_mean": de_mean,
        "delta_e2000_sum": float(de_map.sum()),
        "speckle_contrast": speckle_contrast(ratio),
    }


def evaluate_run(run: ModeRun, target: FocalStackTarget,
                 cf: ConeFundamentals | None = None,
                 loss_space: str = "srgb-linear") -> dict:
    """Render a solved run and compute the reporting metrics per plane.

    Returns per-plane linear-sRGB/XYZ images plus PSNR (luminance, XYZ, sRGB),
    CIEDE2000 mean and sum, and residual speckle contrast. With
    ``loss_space="intensity"`` the run is scored against the single-channel
    intensity target instead (flat-response sensor protocol) and the
    aggregate carries ``psnr_intensity_db``.
    """
    cf = cf or default_cone_fundamentals()
    cube_values = forward_intensity(run.config, run.patterns, run.wavelengths,
                                    run.amplitudes)
    cube = IntensityCube(cube_values.detach(), run.wavelengths, list(run.config.plane_distances),
                         run.config)
    cube.validate()
    summed = cube.values.sum(dim=0)
    margin = target.border_crop
    if loss_space == "intensity":
        return _evaluate_intensity(summed, target, margin)
    rows = []
    images = []
    for zi, (z, target_img) in enumerate(target.planes):
        w = cf.weights(run.wavelengths).to(summed.dtype)
        lms = torch.einsum("nhw,nc->hwc", summed[:, zi], w)
        out_lin = convert(ColorImage(lms.to(torch.float64), "lms"), "srgb-linear", cf)
        row = {"plane_m": z}
        row.update(plane_metrics(out_lin, target_img, margin, cf))
        rows.append(row)
        images.append({"plane_m": z, "srgb_linear": out_lin.data,
                       "xyz": convert(out_lin, "xyz", cf).data})
    agg = {
        "psnr_lum_db": _mean_psnr([r["psnr_lum_db"] for r in rows]),
        "psnr_xyz_db": _mean_psnr([r["psnr_xyz_db"] for r in rows]),
        "psnr_srgb_db": _mean_psnr([r["psnr_srgb_db"] for r in rows]),
        "delta_e2000_mean": sum(r["delta_e2000_mean"] for r in rows) / len(rows),
        "delta_e2000_sum": sum(r["delta_e2000_sum"] for r in rows),
        "speckle_contrast": sum(r["speckle_contrast"] for r in rows) / len(rows),
    }
    return {"per_plane": rows, "aggregate": agg, "images": images}


def _evaluate_intensity(summed: torch.Tensor, target: FocalStackTarget, margin: int) -> dict:
    intensity = summed.sum(dim=0).to(torch.float64)  # (N_z, H, W)
    tgt = _intensity_target(target).to(torch.float64)
    rows = []
    images = []
    for zi, (z, _) in enumerate(target.planes):
        o = intensity[zi, margin:-margin, margin:-margin] if margin > 0 else intensity[zi]
        t = tgt[zi, margin:-margin, margin:-margin] if margin > 0 else tgt[zi]
        mse = float(torch.mean((o - t) ** 2))
        peak = float(t.max())
        bright = t > 0.5 * peak
        ratio = (o[bright] / t[bright]).clamp_min(0.0)
        rows.append({
            "plane_m": z,
            "psnr_intensity_db": math.inf if mse == 0 else 10 * math.log10(peak * peak / mse),
            "speckle_contrast": speckle_contrast(ratio),
        })
        gray = (intensity[zi] / max(peak, 1e-30)).clamp(0.0, 1.0)
        images.append({"plane_m": z, "srgb_linear": gray.unsqueeze(-1).repeat(1, 1, 3),
                       "xyz": gray.unsqueeze(-1).repeat(1, 1, 3)})
    agg = {
        "psnr_intensity_db": _mean_psnr([r["psnr_intensity_db"] for r in rows]),
        "speckle_contrast": sum(r["speckle_contrast"] for r in rows) / len(rows),
    }
    return {"per_plane": rows, "aggregate": agg, "images": images}


def _mean_psnr(values: list[float]) -> float:
    finite = [v for v in values if math.isfinite(v)]
    return sum(finite) / len(finite) if finite else math.inf
