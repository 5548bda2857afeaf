import math

import pytest
import torch

from polycgh.field import (
    ComplexField,
    GridSpec,
    block_downsample2x,
    energy,
    fft2,
    fft2c,
    freq_coords,
    ifft2,
    upsample2x,
)
from conftest import random_field_samples


def make_field(w, h, pitch=8e-6, wl=550e-9, seed=0):
    grid = GridSpec(w, h, pitch)
    return ComplexField(grid, random_field_samples(grid.shape, seed), wl)


def test_gridspec_validation():
    with pytest.raises(ValueError):
        GridSpec(0, 4, 1e-6)
    with pytest.raises(ValueError):
        GridSpec(4, 4, -1e-6)


def test_field_shape_and_wavelength_validation():
    grid = GridSpec(4, 3, 1e-6)
    with pytest.raises(ValueError):
        ComplexField(grid, torch.ones(4, 4, dtype=torch.complex128), 550e-9)
    with pytest.raises(ValueError):
        ComplexField(grid, torch.ones(3, 4, dtype=torch.complex128), -1.0)


def test_constant_field_spectrum_is_dc_delta():
    grid = GridSpec(16, 12, 8e-6)
    f = ComplexField(grid, torch.ones(grid.shape, dtype=torch.complex128), 550e-9)
    spec = fft2(f).samples
    dc = spec[grid.height // 2, grid.width // 2]
    assert abs(dc - math.sqrt(16 * 12)) < 1e-12
    off = spec.clone()
    off[grid.height // 2, grid.width // 2] = 0
    assert off.abs().max() < 1e-12


def test_dc_delta_inverts_to_constant():
    grid = GridSpec(8, 8, 1e-6)
    spec = torch.zeros(grid.shape, dtype=torch.complex128)
    spec[4, 4] = 8.0
    f = ifft2(ComplexField(grid, spec, 550e-9))
    assert torch.allclose(f.samples, torch.ones_like(f.samples), atol=1e-13)


@pytest.mark.parametrize("w,h", [(64, 48), (512, 384), (1024, 1024)])
def test_round_trip_machine_precision(w, h):
    f = make_field(w, h, seed=w + h)
    back = ifft2(fft2(f))
    assert (back.samples - f.samples).abs().max() < 1e-12


def test_parseval_energy_preserved():
    for seed in range(4):
        f = make_field(96, 64, seed=seed)
        e_spatial = energy(f)
        e_freq = energy(fft2(f))
        assert abs(e_spatial - e_freq) / e_spatial < 1e-10


def test_ifft_linearity():
    f = make_field(32, 24, seed=1)
    g = make_field(32, 24, seed=2)
    a, b = 1.7, -0.4 + 0.3j
    lhs = ifft2(ComplexField(f.grid, a * f.samples + b * g.samples, f.wavelength)).samples
    rhs = a * ifft2(f).samples + b * ifft2(g).samples
    assert (lhs - rhs).abs().max() < 1e-12


def test_fft_rejects_nonfinite():
    grid = GridSpec(4, 4, 1e-6)
    bad = torch.ones(grid.shape, dtype=torch.complex128)
    bad[0, 0] = complex(float("nan"), 0.0)
    with pytest.raises(ValueError):
        fft2(ComplexField(grid, bad, 550e-9))


def test_freq_coords_nyquist():
    grid = GridSpec(16, 10, 4e-6)
    ux, uy = freq_coords(grid)
    assert ux.abs().max() == pytest.approx(1.0 / (2 * grid.pitch))
    assert uy.abs().max() == pytest.approx(1.0 / (2 * grid.pitch))
    assert ux[0, grid.width // 2] == 0.0


def test_upsample2x_single_value():
    grid = GridSpec(1, 1, 8e-6)
    up, grid2 = upsample2x(torch.tensor([[3.5]], dtype=torch.float64), grid)
    assert torch.equal(up, torch.full((2, 2), 3.5, dtype=torch.float64))
    assert grid2.pitch == 4e-6


def test_upsample2x_paper_native_size():
    grid = GridSpec(512, 384, 8e-6)
    up, grid2 = upsample2x(torch.zeros(grid.shape, dtype=torch.float64), grid)
    assert up.shape == (768, 1024)
    assert (grid2.width, grid2.height, grid2.pitch) == (1024, 768, 4e-6)


def test_upsample2x_checkerboard_replication():
    grid = GridSpec(4, 4, 8e-6)
    yy, xx = torch.meshgrid(torch.arange(4), torch.arange(4), indexing="ij")
    board = ((xx + yy) % 2).to(torch.float64)
    up, _ = upsample2x(board, grid)
    for i in range(4):
        for j in range(4):
            block = up[2 * i : 2 * i + 2, 2 * j : 2 * j + 2]
            assert torch.all(block == board[i, j])


def test_block_downsample_recovers_upsampled():
    grid = GridSpec(17, 9, 8e-6)
    gen = torch.Generator().manual_seed(3)
    pat = torch.rand(grid.shape, generator=gen, dtype=torch.float64)
    up, _ = upsample2x(pat, grid)
    assert torch.equal(block_downsample2x(up), pat)


def test_energy_basics():
    grid = GridSpec(8, 4, 1e-6)
    zero = ComplexField(grid, torch.zeros(grid.shape, dtype=torch.complex128), 550e-9)
    assert energy(zero) == 0.0
    ones = ComplexField(grid, torch.ones(grid.shape, dtype=torch.complex128), 550e-9)
    assert energy(ones) == pytest.approx(32.0)


def test_fft2c_batched_matches_single():
    x = random_field_samples((3, 16, 8), seed=9)
    batched = fft2c(x)
    for i in range(3):
        assert torch.allclose(batched[i], fft2c(x[i]), atol=1e-14)
