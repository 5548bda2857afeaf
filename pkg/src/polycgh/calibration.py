"""Learnable hyperspectral system model and synthetic self-calibration.

The model couples, per wavelength: an anchor-interpolated source field
(amplitude + optical path difference), a 16-entry lookup table per SLM with
structural ``wl_ref / wl`` scaling, a complex pupil per relay hop whose OPD is
a Zernike expansion with polynomial wavelength dependence, and one thin-plate
alignment warp shared across wavelengths. Fitting minimizes intensity-domain
MSE between predicted and observed images over all learnable parameters.
"""

from __future__ import annotations

import io
import json
import math
import time
import zipfile
from dataclasses import dataclass, field as dc_field

import numpy as np
import torch

from .field import GridSpec, fft2c, freq_coords, ifft2c, upsample2x
from .illumination import SourceAnchorModel, interpolate_anchor_grids
from .propagation import ApertureFunction, _cached_transfer
from .slm import Lut, SlmSpec, TpsWarp, bilinear_sample, warp_tensor
from .zernike import zernike_stack

_TWO_PI = 2.0 * math.pi

ARCHIVE_VERSION = "polycgh-model-1"


def legendre_values(order: int, x: torch.Tensor) -> torch.Tensor:
    """Legendre polynomials P_0..P_order at x in [-1, 1], stacked first."""
    outs = [torch.ones_like(x)]
    if order >= 1:
        outs.append(x)
    for n in range(1, order):
        outs.append(((2 * n + 1) * x * outs[n] - n * outs[n - 1]) / (n + 1))
    return torch.stack(outs[: order + 1])


def spatial_basis(count: int, u: float, v: float) -> torch.Tensor:
    """Graded tensor-product Legendre basis values at one normalized position."""
    if count == 1:
        return torch.ones(1, dtype=torch.float64)
    # enumerate (ix, iy) by total degree, then x-degree
    pairs = []
    deg = 0
    while len(pairs) < count:
        for ix in range(deg, -1, -1):
            pairs.append((ix, deg - ix))
            if len(pairs) == count:
                break
        deg += 1
    max_d = max(max(p) for p in pairs)
    px = legendre_values(max_d, torch.tensor(u, dtype=torch.float64))
    py = legendre_values(max_d, torch.tensor(v, dtype=torch.float64))
    return torch.stack([px[ix] * py[iy] for ix, iy in pairs])


@dataclass
class ApertureModel:
    """Pupil of one relay hop: amplitude at a reference wavelength + OPD expansion.

    ``zernike_coeffs`` has shape (n_zernike, spatial_count, poly_degree + 1),
    in meters; the OPD at (u_pos, wl) is the Zernike sum with coefficients
    ``sum_ij c[n, i, j] * psi_i(u_pos) * wl_hat^j`` where ``wl_hat`` is the
    wavelength normalized to [-1, 1] over the calibrated band. The amplitude
    mask is stored at ``lambda_ref`` and geometrically rescaled by
    ``wl / lambda_ref`` in frequency (an iris passes fewer frequencies at
    longer wavelengths); queries outside the stored grid read zero.
    """

    lambda_ref: float
    band: tuple[float, float]
    zernike_coeffs: torch.Tensor
    amplitude_ref: torch.Tensor | None = None  # (H, W) >= 0 at lambda_ref
    n_zernike: int = 13
    spatial_count: int = 1  # M + 1 basis functions; 1 = shift-invariant
    poly_degree: int = 8

    def __post_init__(self):
        want = (self.n_zernike, self.spatial_count, self.poly_degree + 1)
        if tuple(self.zernike_coeffs.shape) != want:
            raise ValueError(f"zernike_coeffs shape {tuple(self.zernike_coeffs.shape)} != {want}")
        if self.amplitude_ref is not None and self.amplitude_ref.detach().min() < 0:
            raise ValueError("amplitude mask must be nonnegative")

    @staticmethod
    def identity(band: tuple[float, float], lambda_ref: float | None = None,
                 n_zernike: int = 13, spatial_count: int = 1, poly_degree: int = 8) -> "ApertureModel":
        ref = band[1] if lambda_ref is None else lambda_ref
        return ApertureModel(
            lambda_ref=ref,
            band=band,
            zernike_coeffs=torch.zeros(n_zernike, spatial_count, poly_degree + 1, dtype=torch.float64),
            amplitude_ref=None,
            n_zernike=n_zernike,
            spatial_count=spatial_count,
            poly_degree=poly_degree,
        )

    def normalized_wavelength(self, wavelength) -> torch.Tensor:
        lo, hi = self.band
        wl = wavelength if torch.is_tensor(wavelength) else torch.as_tensor(wavelength, dtype=torch.float64)
        wl_val = wl.detach()
        if bool((wl_val < lo - 1e-15).any()) or bool((wl_val > hi + 1e-15).any()):
            raise ValueError(f"wavelength outside calibrated band [{lo:.3e}, {hi:.3e}]")
        return 2.0 * (wl - lo) / (hi - lo) - 1.0

    def sample(self, grid: GridSpec, wavelength, dtype=torch.float64) -> ApertureFunction:
        """Pupil (amplitude, OPD) sampled on a frequency grid at one wavelength."""
        amp = sample_amplitude(self, grid, wavelength, dtype)
        opd = opd_map(self, grid, wavelength).to(dtype)
        return ApertureFunction(amplitude=amp, opd=opd)


def zernike_coeffs(model: ApertureModel, u_pos: tuple[float, float], wavelength) -> torch.Tensor:
    """The n_zernike coefficient values at one field position and wavelength."""
    lam_hat = model.normalized_wavelength(wavelength)
    powers = torch.stack([lam_hat**j for j in range(model.poly_degree + 1)])
    psi = spatial_basis(model.spatial_count, *u_pos)
    return torch.einsum("nij,i,j->n", model.zernike_coeffs, psi, powers.to(torch.float64))


def _disk_coords(grid: GridSpec, dtype=torch.float64) -> tuple[torch.Tensor, torch.Tensor]:
    """(rho, theta) of the frequency grid against the inscribed Nyquist disk."""
    ux, uy = freq_coords(grid, dtype=dtype)
    radius = 1.0 / (2.0 * grid.pitch)
    rho = torch.sqrt(ux**2 + uy**2) / radius
    theta = torch.atan2(uy.expand(grid.height, grid.width), ux.expand(grid.height, grid.width))
    return rho, theta


_ZMAP_CACHE: dict[tuple, torch.Tensor] = {}


def zernike_maps(grid: GridSpec, n_terms: int) -> torch.Tensor:
    key = (grid.width, grid.height, grid.pitch, n_terms)
    hit = _ZMAP_CACHE.get(key)
    if hit is None:
        rho, theta = _disk_coords(grid)
        hit = zernike_stack(n_terms, rho, theta)
        _ZMAP_CACHE[key] = hit
    return hit


def opd_map(model: ApertureModel, grid: GridSpec, wavelength,
            u_pos: tuple[float, float] = (0.0, 0.0)) -> torch.Tensor:
    """OPD in meters over the frequency grid; zero outside the inscribed disk."""
    z = zernike_coeffs(model, u_pos, wavelength)
    maps = zernike_maps(grid, model.n_zernike)
    return torch.einsum("n,nhw->hw", z.to(maps.dtype), maps)


def sample_amplitude(model: ApertureModel, grid: GridSpec, wavelength, dtype=torch.float64) -> torch.Tensor | None:
    """Geometrically rescaled amplitude mask at one wavelength (None = unity)."""
    if model.amplitude_ref is None:
        return None
    wl = float(wavelength.detach()) if torch.is_tensor(wavelength) else float(wavelength)
    scale = wl / model.lambda_ref
    h, w = model.amplitude_ref.shape
    ys = (torch.arange(grid.height, dtype=torch.float64) - grid.height // 2) * scale + h // 2
    xs = (torch.arange(grid.width, dtype=torch.float64) - grid.width // 2) * scale + w // 2
    gy = ys.unsqueeze(1).expand(grid.height, grid.width)
    gx = xs.unsqueeze(0).expand(grid.height, grid.width)
    return bilinear_sample(model.amplitude_ref.to(dtype), gx, gy)


@dataclass
class HyperspectralModel:
    """All learnable parts of one display system plus its fixed geometry."""

    slm_specs: list[SlmSpec]
    gap: float
    lambda_ref: float
    band: tuple[float, float]
    source: SourceAnchorModel
    luts: list[Lut]
    apertures: list[ApertureModel]
    warp: TpsWarp | None = None

    @property
    def sim_grid(self) -> GridSpec:
        return self.slm_specs[0].grid.half_pitch()

    def predict(self, patterns: torch.Tensor, wavelength: float, z: float) -> torch.Tensor:
        """Intensity image for one (pattern set, wavelength, plane)."""
        out = predict_batch(self, patterns.unsqueeze(0),
                            torch.tensor([wavelength], dtype=torch.float64), z)
        return out[0]

    def clone(self) -> "HyperspectralModel":
        return load_model_bytes(save_model_bytes(self))


def predict_batch(model: HyperspectralModel, patterns: torch.Tensor,
                  wavelengths: torch.Tensor, z: float,
                  overrides: dict | None = None) -> torch.Tensor:
    """Predicted intensities (N, H, W) for per-pair patterns and wavelengths.

    ``patterns`` is (N, n_slms, h, w) in grayscale levels. ``overrides`` maps
    parameter names to live tensors during fitting (see :func:`fit`).
    """
    ov = overrides or {}
    grid = model.sim_grid
    n = patterns.shape[0]
    n_slms = len(model.slm_specs)
    wl = wavelengths.to(torch.float64)

    src_amp = ov.get("source_amplitude", model.source.amplitude)
    src_opd = ov.get("source_opd", model.source.opd)
    amp, opd = interpolate_anchor_grids(model.source.anchors, src_amp, src_opd, wl)
    field = (amp * torch.exp(1j * (_TWO_PI / wl.reshape(-1, 1, 1)) * opd)).to(torch.complex128)

    zmaps = zernike_maps(grid, model.apertures[0].n_zernike)
    for k in range(n_slms):
        lut_coeffs = ov.get(f"lut{k}", model.luts[k].coeffs)
        phase_ref = _lut_apply(patterns[:, k], lut_coeffs)
        up, _ = upsample2x(phase_ref, model.slm_specs[k].grid)
        phase = up * (model.luts[k].reference_wavelength / wl.reshape(-1, 1, 1))
        field = field * torch.exp(1j * phase)
        if k == n_slms - 1:
            break
        h1 = torch.stack([_cached_transfer(grid, model.gap, float(w), True, torch.float64) for w in wl])
        spectrum = fft2c(field) * h1
        spectrum = spectrum * _pupil_batch(model.apertures[0], ov, "ap0", grid, wl, zmaps)
        field = ifft2c(spectrum)
        field = _apply_warp(field, grid, model, ov)

    spectrum = fft2c(field)
    hop = n_slms - 1
    hz = torch.stack([_cached_transfer(grid, z, float(w), True, torch.float64) for w in wl])
    spectrum = spectrum * hz
    spectrum = spectrum * _pupil_batch(model.apertures[hop], ov, f"ap{hop}", grid, wl, zmaps)
    out = ifft2c(spectrum)
    return out.real**2 + out.imag**2


def _lut_apply(levels: torch.Tensor, coeffs: torch.Tensor) -> torch.Tensor:
    i0 = torch.clamp(torch.floor(levels.detach()), 0, 14)
    frac = levels - i0
    i0 = i0.long()
    return coeffs[i0] * (1.0 - frac) + coeffs[i0 + 1] * frac


def _pupil_batch(ap: ApertureModel, ov: dict, key: str, grid: GridSpec,
                 wl: torch.Tensor, zmaps: torch.Tensor) -> torch.Tensor:
    coeffs = ov.get(f"{key}_zernike", ap.zernike_coeffs)
    lam_hat = ap.normalized_wavelength(wl)  # (N,)
    powers = torch.stack([lam_hat**j for j in range(ap.poly_degree + 1)], dim=1)  # (N, P+1)
    psi = spatial_basis(ap.spatial_count, 0.0, 0.0)
    zn = torch.einsum("nij,i,Nj->Nn", coeffs, psi, powers)  # (N, n_zern)
    opd = torch.einsum("Nn,nhw->Nhw", zn.to(zmaps.dtype), zmaps)
    pupil = torch.exp(1j * (_TWO_PI / wl.reshape(-1, 1, 1)) * opd)
    amp_ref = ov.get(f"{key}_amplitude", ap.amplitude_ref)
    if amp_ref is not None:
        vals = []
        for i, w in enumerate(wl):
            tmp = ApertureModel(
                lambda_ref=ap.lambda_ref, band=ap.band, zernike_coeffs=ap.zernike_coeffs,
                amplitude_ref=amp_ref, n_zernike=ap.n_zernike,
                spatial_count=ap.spatial_count, poly_degree=ap.poly_degree,
            )
            vals.append(sample_amplitude(tmp, grid, float(w)))
        pupil = pupil * torch.stack(vals).to(pupil.dtype)
    return pupil


def _apply_warp(field: torch.Tensor, grid: GridSpec, model: HyperspectralModel, ov: dict) -> torch.Tensor:
    disp = ov.get("warp_disp")
    if disp is not None:
        warp = TpsWarp(model.warp.src, model.warp.src + disp)
        return warp_tensor(field, grid, warp)
    return warp_tensor(field, grid, model.warp)


# --- synthetic data ----------------------------------------------------------


@dataclass
class CalibrationDataset:
    """(pattern set, wavelength, plane) -> observed intensity image pairs."""

    patterns: torch.Tensor  # (N, n_slms, h, w) levels 0..15
    wavelengths: torch.Tensor  # (N,)
    distances: torch.Tensor  # (N,)
    images: torch.Tensor  # (N, H, W)
    held_out: torch.Tensor  # (N,) bool

    def __post_init__(self):
        n = self.patterns.shape[0]
        if not (self.wavelengths.shape[0] == self.distances.shape[0] == self.images.shape[0] == n
                == self.held_out.shape[0]):
            raise ValueError("dataset fields must agree on the pair count")

    @property
    def n_pairs(self) -> int:
        return int(self.patterns.shape[0])

    def subset(self, mask: torch.Tensor) -> "CalibrationDataset":
        return CalibrationDataset(
            self.patterns[mask], self.wavelengths[mask], self.distances[mask],
            self.images[mask], self.held_out[mask],
        )


def _gaussian_blur(img: torch.Tensor, sigma: float) -> torch.Tensor:
    if sigma <= 0:
        return img
    radius = max(1, int(3 * sigma))
    xs = torch.arange(-radius, radius + 1, dtype=torch.float64)
    k1 = torch.exp(-0.5 * (xs / sigma) ** 2)
    k1 = k1 / k1.sum()
    pad = radius
    x = torch.nn.functional.pad(img.unsqueeze(0).unsqueeze(0), (pad, pad, pad, pad), mode="circular")
    x = torch.nn.functional.conv2d(x, k1.reshape(1, 1, 1, -1))
    x = torch.nn.functional.conv2d(x, k1.reshape(1, 1, -1, 1))
    return x[0, 0]


def synth_dataset(
    ground_truth: HyperspectralModel,
    n_pairs: int = 100,
    blur_sigmas: tuple[float, ...] = (0.0, 1.0, 2.0, 4.0, 8.0),
    plane: float = 3e-3,
    seed: int = 0,
    held_out_fraction: float = 0.1,
) -> CalibrationDataset:
    """Random blur-ladder patterns pushed through a ground-truth model.

    Patterns are uniform noise blurred by a cycling ladder of Gaussian widths
    and re-normalized to the full 4-bit level range; each pair gets one
    wavelength from a uniform sweep over the calibrated band. Deterministic
    given the seed.
    """
    gen = torch.Generator().manual_seed(seed)
    spec = ground_truth.slm_specs[0]
    n_slms = len(ground_truth.slm_specs)
    lo, hi = ground_truth.band
    patterns = torch.zeros(n_pairs, n_slms, spec.height, spec.width, dtype=torch.float64)
    wavelengths = torch.zeros(n_pairs, dtype=torch.float64)
    for i in range(n_pairs):
        sigma = blur_sigmas[i % len(blur_sigmas)]
        for k in range(n_slms):
            raw = torch.rand(spec.height, spec.width, generator=gen, dtype=torch.float64)
            sm = _gaussian_blur(raw, sigma)
            lo_v, hi_v = float(sm.min()), float(sm.max())
            norm = (sm - lo_v) / (hi_v - lo_v) if hi_v > lo_v else torch.zeros_like(sm)
            patterns[i, k] = torch.round(norm * 15.0)
        wavelengths[i] = lo + (hi - lo) * (i + 0.5) / n_pairs
    if n_pairs == 0:
        return CalibrationDataset(
            patterns, wavelengths, torch.zeros(0, dtype=torch.float64),
            torch.zeros(0, *ground_truth.sim_grid.shape, dtype=torch.float64),
            torch.zeros(0, dtype=torch.bool),
        )
    with torch.no_grad():
        images = predict_batch(ground_truth, patterns, wavelengths, plane)
    distances = torch.full((n_pairs,), plane, dtype=torch.float64)
    held_out = torch.zeros(n_pairs, dtype=torch.bool)
    stride = max(1, int(round(1.0 / held_out_fraction))) if held_out_fraction > 0 else n_pairs + 1
    held_out[stride - 1 :: stride] = True
    return CalibrationDataset(patterns, wavelengths, distances, images, held_out)


# --- fitting ------------------------------------------------------------------


def evaluate_model(model: HyperspectralModel, dataset: CalibrationDataset,
                   overrides: dict | None = None) -> dict:
    """Per-pair prediction PSNR (dB) against a dataset; no gradients."""
    with torch.no_grad():
        rows = []
        for i in range(dataset.n_pairs):
            pred = predict_batch(model, dataset.patterns[i : i + 1],
                                 dataset.wavelengths[i : i + 1],
                                 float(dataset.distances[i]), overrides)[0]
            obs = dataset.images[i]
            mse = float(torch.mean((pred - obs) ** 2))
            peak = float(obs.max())
            rows.append({
                "wavelength_nm": float(dataset.wavelengths[i]) * 1e9,
                "psnr_db": math.inf if mse == 0 else 10 * math.log10(peak * peak / mse),
                "held_out": bool(dataset.held_out[i]),
            })
    held = [r["psnr_db"] for r in rows if r["held_out"]]
    return {
        "per_pair": rows,
        "mean_psnr_db": sum(r["psnr_db"] for r in rows) / len(rows),
        "held_out_psnr_db": sum(held) / len(held) if held else math.nan,
    }


def fit(
    model_init: HyperspectralModel,
    dataset: CalibrationDataset,
    iterations: int = 300,
    lr: float = 0.05,
    lr_source: float = 0.002,
    lr_warp: float = 0.05,
    fit_warp: bool = True,
    verbose: bool = False,
) -> tuple[HyperspectralModel, dict]:
    """Gradient-descent calibration of all learnable parameters.

    Path-length quantities are fitted in units of the reference wavelength so
    one learning-rate scale serves every group; the dense source grids get a
    much smaller step than the low-dimensional pupil/LUT parameters, which
    keeps the joint problem well conditioned. Returns the fitted model and a
    report with held-out PSNR per wavelength before/after plus the fitted
    Zernike coefficient summary.
    """
    if dataset.n_pairs == 0:
        raise ValueError("cannot fit on an empty dataset")
    model = model_init.clone()
    train = dataset.subset(~dataset.held_out)
    ref = model.lambda_ref

    leaves: dict[str, torch.Tensor] = {
        "source_amp_raw": torch.sqrt(model.source.amplitude.clamp_min(0.0)).requires_grad_(True),
        "source_opd_n": (model.source.opd / ref).clone().requires_grad_(True),
    }
    for k in range(len(model.slm_specs)):
        leaves[f"lut{k}"] = model.luts[k].coeffs.clone().requires_grad_(True)
    for h, ap in enumerate(model.apertures):
        leaves[f"ap{h}_zern_n"] = (ap.zernike_coeffs / ref).clone().requires_grad_(True)
        if ap.amplitude_ref is not None:
            leaves[f"ap{h}_amp_raw"] = torch.sqrt(ap.amplitude_ref.clamp_min(0.0)).requires_grad_(True)
    if fit_warp and model.warp is not None:
        leaves["warp_disp"] = (model.warp.dst - model.warp.src).clone().requires_grad_(True)

    def overrides() -> dict:
        ov = {
            "source_amplitude": leaves["source_amp_raw"] ** 2,
            "source_opd": leaves["source_opd_n"] * ref,
        }
        for k in range(len(model.slm_specs)):
            ov[f"lut{k}"] = leaves[f"lut{k}"]
        for h in range(len(model.apertures)):
            ov[f"ap{h}_zernike"] = leaves[f"ap{h}_zern_n"] * ref
            key = f"ap{h}_amp_raw"
            if key in leaves:
                ov[f"ap{h}_amplitude"] = leaves[key] ** 2
        if "warp_disp" in leaves:
            ov["warp_disp"] = leaves["warp_disp"]
        return ov

    report: dict = {"before": evaluate_model(model, dataset)}
    groups = [
        {"params": [v for k, v in leaves.items() if k.startswith(("lut", "ap"))], "lr": lr},
        {"params": [leaves["source_amp_raw"], leaves["source_opd_n"]], "lr": lr_source},
    ]
    if "warp_disp" in leaves:
        groups.append({"params": [leaves["warp_disp"]], "lr": lr_warp})
    opt = torch.optim.Adam([g for g in groups if g["params"]], betas=(0.9, 0.999))

    z_train = float(train.distances[0])
    t0 = time.monotonic()
    trace = []
    for it in range(iterations):
        opt.zero_grad(set_to_none=True)
        pred = predict_batch(model, train.patterns, train.wavelengths, z_train, overrides())
        loss = torch.mean((pred - train.images) ** 2)
        fval = float(loss.detach())
        if not math.isfinite(fval):
            norms = {k: float(v.grad.norm()) if v.grad is not None else 0.0 for k, v in leaves.items()}
            raise RuntimeError(f"calibration diverged at iteration {it}; last gradient norms {norms}")
        loss.backward()
        opt.step()
        if it % 25 == 0 or it == iterations - 1:
            trace.append({"iteration": it, "loss": fval})
            if verbose:
                print(f"  fit iter {it}: loss {fval:.3e}")

    # write fitted leaves back into the model
    with torch.no_grad():
        model.source.amplitude = (leaves["source_amp_raw"] ** 2).detach()
        model.source.opd = (leaves["source_opd_n"] * ref).detach()
        for k in range(len(model.slm_specs)):
            model.luts[k].coeffs = leaves[f"lut{k}"].detach()
        for h, ap in enumerate(model.apertures):
            ap.zernike_coeffs = (leaves[f"ap{h}_zern_n"] * ref).detach()
            key = f"ap{h}_amp_raw"
            if key in leaves:
                ap.amplitude_ref = (leaves[key] ** 2).detach()
        if "warp_disp" in leaves:
            model.warp = TpsWarp(model.warp.src, model.warp.src + leaves["warp_disp"].detach())

    report["after"] = evaluate_model(model, dataset)
    report["trace"] = trace
    report["fit_seconds"] = time.monotonic() - t0
    report["zernike_mean_coeffs"] = {
        f"hop{h}": _mean_zernike(ap, dataset.wavelengths).tolist()
        for h, ap in enumerate(model.apertures)
    }
    return model, report


def _mean_zernike(ap: ApertureModel, wavelengths: torch.Tensor) -> torch.Tensor:
    """Fitted Z_n averaged over the dataset wavelengths (shift-invariant position)."""
    vals = torch.stack([zernike_coeffs(ap, (0.0, 0.0), float(w)) for w in wavelengths])
    return vals.mean(dim=0)


# --- alignment from dot grids -------------------------------------------------


def lenslet_pattern(spec: SlmSpec, lut: Lut, centers: torch.Tensor, focal: float,
                    wavelength: float) -> torch.Tensor:
    """Grayscale levels of a quantized converging lenslet array.

    Each center gets a paraxial lens phase ``-pi r^2 / (wl f)`` (evaluated on
    the nearest lenslet center), wrapped into the LUT range and quantized to
    levels; displaying it focuses a dot grid at distance ``focal``.
    """
    ys = (torch.arange(spec.height, dtype=torch.float64) - spec.height // 2) * spec.pitch
    xs = (torch.arange(spec.width, dtype=torch.float64) - spec.width // 2) * spec.pitch
    gy = ys.unsqueeze(1).expand(spec.height, spec.width)
    gx = xs.unsqueeze(0).expand(spec.height, spec.width)
    d2 = (gx.unsqueeze(-1) - centers[:, 0]) ** 2 + (gy.unsqueeze(-1) - centers[:, 1]) ** 2
    r2 = d2.min(dim=-1).values
    phase = -math.pi * r2 / (wavelength * focal)
    full = lut.phase_at_reference(torch.tensor(15.0, dtype=torch.float64)) * (
        lut.reference_wavelength / wavelength
    )
    levels = torch.remainder(phase, float(full)) / float(full) * 15.0
    return torch.round(levels)


def centroid(img: torch.Tensor) -> tuple[float, float]:
    """Intensity centroid (x, y) in pixel coordinates."""
    total = float(img.sum())
    if total <= 0:
        raise ValueError("cannot take the centroid of a non-positive image")
    ys = torch.arange(img.shape[0], dtype=torch.float64)
    xs = torch.arange(img.shape[1], dtype=torch.float64)
    cy = float((img.sum(dim=1) * ys).sum() / total)
    cx = float((img.sum(dim=0) * xs).sum() / total)
    return cx, cy


def warp_from_dot_grid(reference: torch.Tensor, observed: torch.Tensor,
                       nominal: torch.Tensor, window: int = 8,
                       regularization: float = 1e-8) -> TpsWarp:
    """Thin-plate alignment init from matching dot-grid intensity images.

    ``nominal`` holds the (K, 2) expected dot positions in pixels; dots are
    located by windowed centroids in both images and the warp maps reference
    coordinates to observed coordinates.
    """
    src_pts = []
    dst_pts = []
    for k in range(nominal.shape[0]):
        x0, y0 = float(nominal[k, 0]), float(nominal[k, 1])
        sy = slice(max(0, int(y0) - window), min(reference.shape[0], int(y0) + window + 1))
        sx = slice(max(0, int(x0) - window), min(reference.shape[1], int(x0) + window + 1))
        rx, ry = centroid(reference[sy, sx])
        ox, oy = centroid(observed[sy, sx])
        src_pts.append([sx.start + rx, sy.start + ry])
        dst_pts.append([sx.start + ox, sy.start + oy])
    return TpsWarp(
        torch.tensor(src_pts, dtype=torch.float64),
        torch.tensor(dst_pts, dtype=torch.float64),
        regularization,
    )


# --- archive I/O ---------------------------------------------------------------


def save_model_bytes(model: HyperspectralModel) -> bytes:
    buf = io.BytesIO()
    spec = model.slm_specs[0]
    manifest = {
        "version": ARCHIVE_VERSION,
        "lambda_ref_m": model.lambda_ref,
        "band_m": list(model.band),
        "gap_m": model.gap,
        "n_slms": len(model.slm_specs),
        "slm": {
            "width": spec.width,
            "height": spec.height,
            "pitch_m": spec.pitch,
            "phase_range_rad": spec.phase_range,
            "reference_wavelength_m": spec.reference_wavelength,
            "bit_depth": spec.bit_depth,
        },
        "anchors_m": [float(a) for a in model.source.anchors],
        "apertures": [
            {
                "lambda_ref_m": ap.lambda_ref,
                "n_zernike": ap.n_zernike,
                "spatial_count": ap.spatial_count,
                "poly_degree": ap.poly_degree,
                "has_amplitude": ap.amplitude_ref is not None,
            }
            for ap in model.apertures
        ],
        "spatial_basis": "graded tensor-product Legendre",
        "has_warp": model.warp is not None,
    }
    arrays: dict[str, torch.Tensor] = {
        "source_amplitude": model.source.amplitude,
        "source_opd": model.source.opd,
    }
    for k, lut in enumerate(model.luts):
        arrays[f"lut{k}"] = lut.coeffs
    for h, ap in enumerate(model.apertures):
        arrays[f"ap{h}_zernike"] = ap.zernike_coeffs
        if ap.amplitude_ref is not None:
            arrays[f"ap{h}_amplitude"] = ap.amplitude_ref
    if model.warp is not None:
        arrays["warp_src"] = model.warp.src
        arrays["warp_dst"] = model.warp.dst
    with zipfile.ZipFile(buf, "w", zipfile.ZIP_DEFLATED) as zf:
        zf.writestr("manifest.json", json.dumps(manifest, indent=2, sort_keys=True))
        for name, tensor in arrays.items():
            arr_buf = io.BytesIO()
            np.save(arr_buf, tensor.detach().numpy().astype("<f8"))
            zf.writestr(f"{name}.npy", arr_buf.getvalue())
    return buf.getvalue()


def save_model(path, model: HyperspectralModel) -> None:
    with open(path, "wb") as fh:
        fh.write(save_model_bytes(model))


def load_model_bytes(data: bytes) -> HyperspectralModel:
    with zipfile.ZipFile(io.BytesIO(data)) as zf:
        manifest = json.loads(zf.read("manifest.json"))
        if manifest["version"] != ARCHIVE_VERSION:
            raise ValueError(f"unsupported model archive version {manifest['version']!r}")

        def arr(name):
            return torch.from_numpy(np.load(io.BytesIO(zf.read(f"{name}.npy"))).copy())

        s = manifest["slm"]
        spec = SlmSpec(s["width"], s["height"], s["pitch_m"], s["phase_range_rad"],
                       s["reference_wavelength_m"], s["bit_depth"])
        specs = [spec] * manifest["n_slms"]
        source = SourceAnchorModel(
            torch.tensor(manifest["anchors_m"], dtype=torch.float64),
            arr("source_amplitude"), arr("source_opd"),
        )
        luts = [
            Lut(s["reference_wavelength_m"], "4bit", coeffs=arr(f"lut{k}"))
            for k in range(manifest["n_slms"])
        ]
        apertures = []
        for h, am in enumerate(manifest["apertures"]):
            apertures.append(
                ApertureModel(
                    lambda_ref=am["lambda_ref_m"],
                    band=tuple(manifest["band_m"]),
                    zernike_coeffs=arr(f"ap{h}_zernike"),
                    amplitude_ref=arr(f"ap{h}_amplitude") if am["has_amplitude"] else None,
                    n_zernike=am["n_zernike"],
                    spatial_count=am["spatial_count"],
                    poly_degree=am["poly_degree"],
                )
            )
        warp = None
        if manifest["has_warp"]:
            warp = TpsWarp(arr("warp_src"), arr("warp_dst"))
        return HyperspectralModel(
            slm_specs=specs,
            gap=manifest["gap_m"],
            lambda_ref=manifest["lambda_ref_m"],
            band=tuple(manifest["band_m"]),
            source=source,
            luts=luts,
            apertures=apertures,
            warp=warp,
        )


def load_model(path) -> HyperspectralModel:
    with open(path, "rb") as fh:
        return load_model_bytes(fh.read())


# --- standard synthetic scenario ----------------------------------------------


def nominal_model(
    slm_width: int = 64,
    slm_height: int = 48,
    pitch: float = 8e-6,
    gap: float = 1e-3,
    band: tuple[float, float] = (460e-9, 650e-9),
    lambda_ref: float = 550e-9,
    n_anchors: int = 10,
    n_slms: int = 2,
    phase_range: float = 3 * math.pi,
) -> HyperspectralModel:
    """The unperturbed starting model: flat source, linear LUTs, zero OPD."""
    spec = SlmSpec(slm_width, slm_height, pitch, phase_range, lambda_ref, bit_depth="4bit")
    grid = spec.grid.half_pitch()
    anchors = torch.linspace(band[0], band[1], n_anchors, dtype=torch.float64)
    source = SourceAnchorModel(
        anchors,
        torch.ones(n_anchors, grid.height, grid.width, dtype=torch.float64),
        torch.zeros(n_anchors, grid.height, grid.width, dtype=torch.float64),
    )
    luts = [Lut.linear(spec) for _ in range(n_slms)]
    apertures = [ApertureModel.identity(band, lambda_ref=band[1]) for _ in range(2 if n_slms == 2 else 1)]
    warp = TpsWarp.from_grid(grid, points_per_axis=4)
    return HyperspectralModel([spec] * n_slms, gap, lambda_ref, band, source, luts, apertures, warp)


def perturbed_model(base: HyperspectralModel, seed: int = 0,
                    zernike_injection: dict[int, float] | None = None,
                    lut_jitter: float = 0.08,
                    source_amp_variation: float = 0.3,
                    source_opd_scale: float = 0.3) -> HyperspectralModel:
    """A ground-truth model: injected pupil OPD, randomized monotone LUTs,
    smooth non-flat source amplitude and OPD.

    ``zernike_injection`` maps Noll indices (1-based) to coefficients in units
    of the reference wavelength, applied to the sensor-side hop, constant in
    wavelength. Default injects defocus, astigmatism and coma near half a
    wave.
    """
    gen = torch.Generator().manual_seed(seed)
    model = base.clone()
    ref = model.lambda_ref
    inj = zernike_injection if zernike_injection is not None else {4: 0.5, 6: 0.4, 8: 0.3}
    hop = len(model.apertures) - 1
    for j, mag in inj.items():
        model.apertures[hop].zernike_coeffs[j - 1, 0, 0] = mag * ref

    for lut in model.luts:
        steps = torch.diff(lut.coeffs)
        jitter = 1.0 + lut_jitter * (2 * torch.rand(steps.shape, generator=gen, dtype=torch.float64) - 1)
        new = torch.cat([lut.coeffs[:1], lut.coeffs[0] + torch.cumsum(steps * jitter, dim=0)])
        lut.coeffs = new

    grid = model.sim_grid
    ys = torch.linspace(-1, 1, grid.height, dtype=torch.float64).unsqueeze(1)
    xs = torch.linspace(-1, 1, grid.width, dtype=torch.float64).unsqueeze(0)
    for a in range(model.source.anchors.numel()):
        t = a / max(1, model.source.anchors.numel() - 1)
        cx = 0.6 * math.cos(2.2 * t)
        cy = 0.6 * math.sin(1.7 * t)
        bump = torch.exp(-(((xs - cx) ** 2 + (ys - cy) ** 2) / 0.8))
        model.source.amplitude[a] = 1.0 + source_amp_variation * (bump - 0.5)
        model.source.opd[a] = source_opd_scale * ref * (
            0.5 * xs * (1 - t) + 0.4 * ys * t + 0.3 * xs * ys + 0.2 * (xs**2 - ys**2) * t
        )
    model.source.amplitude.clamp_(min=0.05)
    return model
