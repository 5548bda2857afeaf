"""Regenerate the packaged cone-response table.

The table is built from the multi-lobe piecewise-Gaussian analytic fits to the
CIE 1931 2-degree color matching functions (Wyman, Sloan & Shirley, JCGT 2013)
mapped through the Hunt-Pointer-Estevez XYZ-to-cone matrix, with each channel
normalized to unit peak. The exact inverse matrix (cone -> XYZ) is written
into the file header so image-space conversions stay consistent with the
table no matter how it was produced.

Run from the repo root:  python3 tools/gen_cone_table.py
"""

import pathlib

import numpy as np

OUT = pathlib.Path(__file__).resolve().parents[1] / "src" / "polycgh" / "data" / "cone_fundamentals_2deg.csv"

HPE = np.array(
    [
        [0.38971, 0.68898, -0.07868],
        [-0.22981, 1.18340, 0.04641],
        [0.0, 0.0, 1.0],
    ]
)


def _lobe(wave, mu, s_lo, s_hi):
    t = (wave - mu) * np.where(wave < mu, s_lo, s_hi)
    return np.exp(-0.5 * t * t)


def cmf_1931(wave):
    x = (
        0.362 * _lobe(wave, 442.0, 0.0624, 0.0374)
        + 1.056 * _lobe(wave, 599.8, 0.0264, 0.0323)
        - 0.065 * _lobe(wave, 501.1, 0.0490, 0.0382)
    )
    y = 0.821 * _lobe(wave, 568.8, 0.0213, 0.0247) + 0.286 * _lobe(wave, 530.9, 0.0613, 0.0322)
    z = 1.217 * _lobe(wave, 437.0, 0.0845, 0.0278) + 0.681 * _lobe(wave, 459.0, 0.0385, 0.0725)
    return np.stack([x, y, z])


def main():
    wave = np.arange(390.0, 731.0, 1.0)
    xyz = cmf_1931(wave)  # (3, N)
    lms = HPE @ xyz
    lms = np.clip(lms, 0.0, None)
    peaks = lms.max(axis=1)
    lms_n = lms / peaks[:, None]
    # cone -> XYZ consistent with the normalized table: inv(diag(1/peaks) @ HPE)
    m = np.linalg.inv(np.diag(1.0 / peaks) @ HPE)

    lines = [
        "# cone_fundamentals_2deg v1",
        "# 2-degree observer cone response weights, unit peak per channel, 1nm steps.",
        "# Built from the multi-lobe Gaussian CIE-1931 CMF fits (Wyman/Sloan/Shirley 2013)",
        "# mapped through the Hunt-Pointer-Estevez cone matrix; negatives clipped to 0.",
        "# lms_to_xyz matrix (row-major, applied to column vectors [l m s]^T):",
    ]
    for row in m:
        lines.append("# M " + " ".join(f"{v:.17g}" for v in row))
    lines.append("wavelength_nm,l,m,s")
    for i, w in enumerate(wave):
        lines.append(f"{w:.1f},{lms_n[0, i]:.12g},{lms_n[1, i]:.12g},{lms_n[2, i]:.12g}")
    OUT.parent.mkdir(parents=True, exist_ok=True)
    OUT.write_text("\n".join(lines) + "\n")
    print(f"wrote {OUT} ({len(wave)} rows)")
    print("lms_to_xyz:\n", m)


if __name__ == "__main__":
    main()
