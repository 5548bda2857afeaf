"""Command-line experiment runner.

Subcommands: ``optimize``, ``ablate``, ``correlate``, ``calibrate``,
``metrics``. Every run writes a complete result bundle into the output
directory or nothing at all (the bundle is assembled in a scratch directory
and renamed into place on success).

Exit codes: 0 success, 2 config error, 3 numerical divergence, 4 I/O error.
"""

from __future__ import annotations

import argparse
import json
import math
import shutil
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .calibration import (
    evaluate_model,
    fit,
    nominal_model,
    perturbed_model,
    save_model,
    synth_dataset,
    zernike_coeffs,
)
from .colorimetry import ColorImage, default_cone_fundamentals
from .config import ConfigError, ExperimentConfig, build_system, build_target, load_config
from .forward import speckle_correlation
from .illumination import centered_wavelengths
from .imio import read_csv, read_pfm, write_csv, write_json, write_pfm, write_png_srgb, \
    save_raw_pattern, load_raw_pattern
from .optimize import ModeRun, OptimizationDiverged, evaluate_run, plane_metrics, run_mode
from .plots import plot_calibration, plot_correlation, plot_heatmap, plot_planes, plot_traces
from .targets import FocalStackTarget

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_IO = 4

METRIC_COLUMNS = [
    "plane", "psnr_lum_db", "psnr_xyz_db", "psnr_srgb_db",
    "delta_e2000_mean", "delta_e2000_sum", "speckle_contrast",
]


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OptimizationDiverged as exc:
        print(f"numerical divergence: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="polycgh",
                                     description="polychromatic holographic display toolkit")
    sub = parser.add_subparsers(required=True)
    for name, func, needs_resume in [
        ("optimize", cmd_optimize, True),
        ("ablate", cmd_ablate, False),
        ("correlate", cmd_correlate, False),
        ("calibrate", cmd_calibrate, False),
    ]:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="experiment config (YAML)")
        p.add_argument("--out", default=None, help="output bundle directory")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--threads", type=int, default=None, help="override the thread count")
        if needs_resume:
            p.add_argument("--resume", default=None, help="checkpoint directory to resume from")
        p.set_defaults(func=func)
    p = sub.add_parser("metrics")
    p.add_argument("--bundle", required=True, help="existing result bundle directory")
    p.add_argument("--out", default=None, help="CSV path (default: metrics_recomputed.csv in bundle)")
    p.set_defaults(func=cmd_metrics)
    return parser


def _prepare(args) -> tuple[ExperimentConfig, Path]:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.threads is not None:
        cfg.threads = args.threads
    torch.set_num_threads(max(1, cfg.threads))
    out = args.out or cfg.output
    if out is None:
        raise ConfigError("no output directory: set --out or the config 'output' key")
    return cfg, Path(out)


class _Bundle:
    """Scratch directory renamed into place only when the run succeeded."""

    def __init__(self, final: Path):
        self.final = final
        self.tmp = final.with_name(final.name + ".partial")

    def __enter__(self) -> Path:
        if self.final.exists():
            raise OSError(f"output directory {self.final} already exists")
        if self.tmp.exists():
            shutil.rmtree(self.tmp)
        self.tmp.mkdir(parents=True)
        return self.tmp

    def __exit__(self, exc_type, exc, tb):
        if exc_type is None:
            self.tmp.rename(self.final)
        else:
            shutil.rmtree(self.tmp, ignore_errors=True)
        return False


def _manifest(cfg: ExperimentConfig, extra: dict) -> dict:
    base = {
        "tool": "polycgh",
        "version": __version__,
        "seed": cfg.seed,
        "threads": cfg.threads,
        "precision": "float32" if cfg.precision == torch.float32 else "float64",
        "pfm_convention": "little-endian, scale -1.0, linear values",
        "eyebox_plane": "pupil spectrum of the field at the sensor side of the last SLM (z = 0)",
    }
    base.update(extra)
    return base


def _write_common(tmp: Path, cfg: ExperimentConfig, manifest: dict) -> None:
    (tmp / "config_echo.yaml").write_text(cfg.raw_text)
    write_json(tmp / "manifest.json", manifest)


# --- optimize ---------------------------------------------------------------


def _metric_rows(evaluation: dict) -> tuple[list[str], list[list]]:
    if "psnr_intensity_db" in evaluation["aggregate"]:
        header = ["plane", "psnr_intensity_db", "speckle_contrast"]
        rows = [[f"{r['plane_m'] * 1e3:.6g}mm", r["psnr_intensity_db"], r["speckle_contrast"]]
                for r in evaluation["per_plane"]]
        agg = evaluation["aggregate"]
        rows.append(["aggregate", agg["psnr_intensity_db"], agg["speckle_contrast"]])
        return header, rows
    rows = []
    for r in evaluation["per_plane"]:
        rows.append([
            f"{r['plane_m'] * 1e3:.6g}mm", r["psnr_lum_db"], r["psnr_xyz_db"],
            r["psnr_srgb_db"], r["delta_e2000_mean"], r["delta_e2000_sum"],
            r["speckle_contrast"],
        ])
    agg = evaluation["aggregate"]
    rows.append([
        "aggregate", agg["psnr_lum_db"], agg["psnr_xyz_db"], agg["psnr_srgb_db"],
        agg["delta_e2000_mean"], agg["delta_e2000_sum"], agg["speckle_contrast"],
    ])
    return METRIC_COLUMNS, rows


def _write_run_bundle(tmp: Path, cfg: ExperimentConfig, run: ModeRun, target: FocalStackTarget,
                      evaluation: dict, elapsed: float) -> None:
    for i, entry in enumerate(evaluation["images"]):
        write_png_srgb(tmp / f"plane_{i:02d}.png", entry["srgb_linear"])
        write_pfm(tmp / f"plane_{i:02d}.pfm", entry["srgb_linear"])
    header, rows = _metric_rows(evaluation)
    write_csv(tmp / "metrics.csv", header, rows)
    trace_rows = []
    for pi, trace in enumerate(run.traces):
        for row in trace:
            trace_rows.append([pi, row["iteration"], row["loss"], row["psnr_db"]])
    write_csv(tmp / "trace.csv", ["problem", "iteration", "loss", "psnr_db"], trace_rows)
    plot_traces(run.traces, tmp / "trace.png")
    plot_planes(evaluation["images"], tmp / "planes.png")
    _write_checkpoint(tmp / "checkpoint", cfg, run)
    _write_common(tmp, cfg, _manifest(cfg, {
        "command": "optimize",
        "mode": run.mode,
        "elapsed_seconds": elapsed,
        "wavelengths_nm": [w * 1e9 for w in run.wavelengths.tolist()],
        "amplitudes": run.amplitudes.to(torch.float64).tolist(),
        "best_loss": run.best_loss,
        "planes_m": list(run.config.plane_distances),
    }))


def _write_checkpoint(ckpt: Path, cfg: ExperimentConfig, run: ModeRun) -> None:
    ckpt.mkdir()
    for s in range(run.patterns.shape[0]):
        for t in range(run.patterns.shape[1]):
            save_raw_pattern(ckpt / f"pattern_s{s}_t{t}.raw",
                             run.patterns[s, t].to(torch.float64), cfg.pitch)
    write_json(ckpt / "state.json", {
        "mode": run.mode,
        "n_slms": int(run.patterns.shape[0]),
        "n_frames": int(run.patterns.shape[1]),
        "amplitudes": run.amplitudes.to(torch.float64).tolist(),
        "wavelengths_m": run.wavelengths.to(torch.float64).tolist(),
        "seed": cfg.seed,
    })


def load_checkpoint(ckpt: Path) -> dict:
    meta = json.loads((Path(ckpt) / "state.json").read_text())
    patterns = []
    for s in range(meta["n_slms"]):
        frames = []
        for t in range(meta["n_frames"]):
            arr, _ = load_raw_pattern(Path(ckpt) / f"pattern_s{s}_t{t}.raw")
            frames.append(arr)
        patterns.append(torch.stack(frames))
    meta["patterns"] = torch.stack(patterns)
    return meta


def cmd_optimize(args) -> int:
    cfg, out = _prepare(args)
    state0 = None
    if getattr(args, "resume", None):
        ck = load_checkpoint(Path(args.resume))
        from .optimize import TrainableState

        state0 = TrainableState(
            ck["patterns"].to(cfg.precision),
            torch.sqrt(torch.tensor(ck["amplitudes"], dtype=torch.float64)).to(cfg.precision),
        )
    t0 = time.monotonic()
    system = build_system(cfg)
    target = build_target(cfg)
    run = run_mode(
        cfg.mode, system, target,
        loss_space=cfg.loss_space, iterations=cfg.iterations, seed=cfg.seed,
        lr_phase=cfg.lr_phase, lr_amplitude=cfg.lr_amplitude, lr_wavelength=cfg.lr_wavelength,
        optimize_wavelengths=cfg.optimize_wavelengths, trace_every=cfg.trace_every,
        state0=state0,
    )
    evaluation = evaluate_run(run, target, loss_space=cfg.loss_space)
    with _Bundle(out) as tmp:
        _write_run_bundle(tmp, cfg, run, target, evaluation, time.monotonic() - t0)
    agg = evaluation["aggregate"]
    if "psnr_intensity_db" in agg:
        print(f"optimize[{cfg.mode}]: intensity {agg['psnr_intensity_db']:.2f} dB -> {out}")
    else:
        print(f"optimize[{cfg.mode}]: srgb {agg['psnr_srgb_db']:.2f} dB, "
              f"xyz {agg['psnr_xyz_db']:.2f} dB, dE {agg['delta_e2000_mean']:.2f} -> {out}")
    return EXIT_OK


# --- ablate -------------------------------------------------------------------


def cmd_ablate(args) -> int:
    cfg, out = _prepare(args)
    node = dict(cfg.ablate)
    n_list = [int(n) for n in node.pop("n_wavelengths", [2, 4, 8, 16])]
    spacing_list = [float(s) for s in node.pop("spacing_nm", [2.0, 4.0, 8.0, 16.0])]
    center = float(node.pop("center_nm", 550.0)) * 1e-9
    iterations = int(node.pop("iterations", cfg.iterations))
    if node:
        raise ConfigError(f"ablate: unknown keys {sorted(node)}")
    target = build_target(cfg)
    t0 = time.monotonic()
    rows = []
    psnr_grid = np.full((len(n_list), len(spacing_list)), np.nan)
    for i, n in enumerate(n_list):
        for j, spacing in enumerate(spacing_list):
            wl = centered_wavelengths(n, spacing * 1e-9, center)
            try:
                system = build_system(cfg, wavelengths=wl)
                run = run_mode(cfg.mode, system, target, loss_space=cfg.loss_space,
                               iterations=iterations, seed=cfg.seed,
                               lr_phase=cfg.lr_phase, lr_amplitude=cfg.lr_amplitude,
                               trace_every=cfg.trace_every)
                cell = evaluate_run(run, target, loss_space=cfg.loss_space)
                psnr = (cell["aggregate"]["psnr_srgb_db"] if cfg.loss_space != "intensity"
                        else cell["aggregate"]["psnr_intensity_db"])
                contrast = cell["aggregate"]["speckle_contrast"]
                psnr_grid[i, j] = psnr
                rows.append([n, spacing, (n - 1) * spacing, psnr, contrast, run.best_loss, ""])
            except (OptimizationDiverged, ValueError) as exc:
                rows.append([n, spacing, (n - 1) * spacing, math.nan, math.nan, math.nan, str(exc)])
    with _Bundle(out) as tmp:
        write_csv(tmp / "heatmap.csv",
                  ["n_wavelengths", "spacing_nm", "bandwidth_nm", "psnr_db",
                   "speckle_contrast", "loss", "error"], rows)
        plot_heatmap(n_list, spacing_list, psnr_grid, tmp / "heatmap.png")
        _write_common(tmp, cfg, _manifest(cfg, {
            "command": "ablate",
            "elapsed_seconds": time.monotonic() - t0,
            "n_wavelengths": n_list,
            "spacing_nm": spacing_list,
            "iterations": iterations,
        }))
    print(f"ablate: {len(rows)} cells -> {out}")
    return EXIT_OK


# --- correlate ------------------------------------------------------------------


def cmd_correlate(args) -> int:
    cfg, out = _prepare(args)
    node = dict(cfg.correlate)
    sweep = node.pop("sweep", "both")
    deltas_nm = [float(d) for d in node.pop("deltas_nm", [0, 1, 2, 4, 8, 12, 16])]
    tilt_deltas = [float(d) for d in node.pop("tilt_deltas_rad_per_m",
                                              [0, 1.25e3, 2.5e3, 5e3, 1e4, 1.5e4, 2e4])]
    gaps_mm = [float(g) for g in node.pop("gaps_mm", [0.0, 5.0])]
    plane = float(node.pop("plane_mm", 10.0)) * 1e-3
    n_seeds = int(node.pop("n_seeds", 8))
    if node:
        raise ConfigError(f"correlate: unknown keys {sorted(node)}")
    if sweep not in ("wavelength", "tilt", "both"):
        raise ConfigError(f"correlate.sweep must be wavelength, tilt or both, got {sweep!r}")
    sweeps = ["wavelength", "tilt"] if sweep == "both" else [sweep]

    system = build_system(cfg)
    spec = system.slm_specs[0]
    t0 = time.monotonic()
    rows = []
    for kind in sweeps:
        deltas = torch.tensor(
            [d * 1e-9 for d in deltas_nm] if kind == "wavelength" else tilt_deltas,
            dtype=torch.float64,
        )
        acc = torch.zeros(len(gaps_mm), len(deltas), dtype=torch.float64)
        for s in range(n_seeds):
            gen = torch.Generator().manual_seed(cfg.seed + s)
            patterns = torch.rand(system.n_slms, 1, spec.height, spec.width,
                                  generator=gen, dtype=torch.float64)
            acc += speckle_correlation(system, patterns, kind, deltas,
                                       [g * 1e-3 for g in gaps_mm], plane)
        acc /= n_seeds
        for gi, gap in enumerate(gaps_mm):
            for di in range(len(deltas)):
                rows.append({
                    "sweep": kind, "delta": float(deltas[di]), "gap_mm": gap,
                    "correlation": float(acc[gi, di]),
                })
    with _Bundle(out) as tmp:
        write_csv(tmp / "correlation.csv", ["sweep", "delta", "gap_mm", "correlation"],
                  [[r["sweep"], r["delta"], r["gap_mm"], r["correlation"]] for r in rows])
        plot_correlation(rows, tmp / "correlation.png")
        _write_common(tmp, cfg, _manifest(cfg, {
            "command": "correlate",
            "elapsed_seconds": time.monotonic() - t0,
            "plane_m": plane,
            "n_seeds": n_seeds,
        }))
    print(f"correlate: {len(rows)} rows -> {out}")
    return EXIT_OK


# --- calibrate -------------------------------------------------------------------


def cmd_calibrate(args) -> int:
    cfg, out = _prepare(args)
    node = dict(cfg.calibrate)
    n_pairs = int(node.pop("n_pairs", 100))
    slm_w = int(node.pop("slm_width", 64))
    slm_h = int(node.pop("slm_height", 48))
    gap = float(node.pop("gap_mm", 1.0)) * 1e-3
    plane = float(node.pop("plane_mm", 3.0)) * 1e-3
    alt_plane = float(node.pop("alt_plane_mm", 4.0)) * 1e-3
    iterations = int(node.pop("iterations", 300))
    n_anchors = int(node.pop("anchors", 10))
    zero_perturbation = bool(node.pop("zero_perturbation", False))
    if node:
        raise ConfigError(f"calibrate: unknown keys {sorted(node)}")

    t0 = time.monotonic()
    base = nominal_model(slm_width=slm_w, slm_height=slm_h, gap=gap, band=cfg.band,
                         n_anchors=n_anchors, n_slms=cfg.n_slms)
    truth = base.clone() if zero_perturbation else perturbed_model(base, seed=cfg.seed)
    dataset = synth_dataset(truth, n_pairs=n_pairs, plane=plane, seed=cfg.seed + 1)
    fitted, report = fit(nominal_model(slm_width=slm_w, slm_height=slm_h, gap=gap,
                                       band=cfg.band, n_anchors=n_anchors, n_slms=cfg.n_slms),
                         dataset, iterations=iterations)

    alt_dataset = synth_dataset(truth, n_pairs=max(10, n_pairs // 10), plane=alt_plane,
                                seed=cfg.seed + 2)
    cross = evaluate_model(fitted, alt_dataset)
    ref = truth.lambda_ref
    source_opd_err = [
        float(torch.sqrt(torch.mean((fitted.source.opd[a] - truth.source.opd[a]) ** 2)) / ref)
        for a in range(truth.source.anchors.numel())
    ]
    hop = len(truth.apertures) - 1
    true_z = truth.apertures[hop].zernike_coeffs[:, 0, 0]
    fit_z = torch.tensor(report["zernike_mean_coeffs"][f"hop{hop}"], dtype=torch.float64)
    report_out = {
        "held_out_psnr_before_db": report["before"]["held_out_psnr_db"],
        "held_out_psnr_after_db": report["after"]["held_out_psnr_db"],
        "cross_plane_psnr_db": cross["mean_psnr_db"],
        "cross_plane_m": alt_plane,
        "fit_seconds": report["fit_seconds"],
        "per_anchor_source_opd_rms_error_waves": source_opd_err,
        "zernike_true_waves": (true_z / ref).tolist(),
        "zernike_fitted_waves": (fit_z / ref).tolist(),
        "n_pairs": n_pairs,
    }
    with _Bundle(out) as tmp:
        save_model(tmp / "model.zip", fitted)
        write_json(tmp / "report.json", report_out)
        write_csv(tmp / "held_out.csv", ["wavelength_nm", "psnr_db", "held_out"],
                  [[r["wavelength_nm"], r["psnr_db"], int(r["held_out"])]
                   for r in report["after"]["per_pair"]])
        plot_calibration(report, tmp / "calibration.png")
        _write_common(tmp, cfg, _manifest(cfg, {
            "command": "calibrate",
            "elapsed_seconds": time.monotonic() - t0,
            "plane_m": plane,
            "n_pairs": n_pairs,
        }))
    print(f"calibrate: held-out {report_out['held_out_psnr_after_db']:.2f} dB "
          f"(from {report_out['held_out_psnr_before_db']:.2f}) -> {out}")
    return EXIT_OK


# --- metrics ---------------------------------------------------------------------


def cmd_metrics(args) -> int:
    bundle = Path(args.bundle)
    echo = bundle / "config_echo.yaml"
    if not echo.exists():
        raise OSError(f"{bundle} is not a result bundle (missing config_echo.yaml)")
    from .config import parse_config

    cfg = parse_config(echo.read_text())
    torch.set_num_threads(max(1, cfg.threads))
    target = build_target(cfg)
    cf = default_cone_fundamentals()
    rows = []
    for i, (z, tgt_img) in enumerate(target.planes):
        pfm = bundle / f"plane_{i:02d}.pfm"
        if not pfm.exists():
            raise OSError(f"missing {pfm}")
        data = read_pfm(pfm).to(torch.float64)
        out_img = ColorImage(data, "srgb-linear")
        m = plane_metrics(out_img, tgt_img, target.border_crop, cf)
        rows.append([f"{z * 1e3:.6g}mm", m["psnr_lum_db"], m["psnr_xyz_db"], m["psnr_srgb_db"],
                     m["delta_e2000_mean"], m["delta_e2000_sum"], m["speckle_contrast"]])
    out_path = Path(args.out) if args.out else bundle / "metrics_recomputed.csv"
    write_csv(out_path, METRIC_COLUMNS, rows)
    print(f"metrics: {len(rows)} planes -> {out_path}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
