import cmath
import math

import pytest
import torch

from polycgh.field import ComplexField, GridSpec, fft2c, freq_coords, ifft2c, energy
from polycgh.propagation import (
    ApertureFunction,
    asm_kernel,
    asm_transfer,
    circular_aperture,
    propagate,
)
from conftest import random_field_samples


WL = 550e-9


def band_limited_field(grid, z_list, wl=WL, seed=0):
    """Random field whose spectrum fits inside every kernel mask of z_list."""
    spec = random_field_samples(grid.shape, seed)
    mask = torch.ones(grid.shape, dtype=torch.bool)
    for z in z_list:
        mask &= asm_kernel(grid, z, wl).mask
    # stay strictly interior so kernels agree on every retained sample
    spec = spec * mask
    return ComplexField(grid, ifft2c(spec), wl)


def test_kernel_dc_value():
    grid = GridSpec(32, 32, 8e-6)
    for z in (1e-3, -2.5e-3):
        k = asm_kernel(grid, z, WL)
        expected = cmath.exp(2j * math.pi * z / WL)
        assert abs(k.transfer[16, 16] - expected) < 1e-12


def test_kernel_zero_beyond_evanescent_cutoff():
    # coarse wavelength so the cutoff lands inside the sampled band
    grid = GridSpec(64, 64, 1e-6)
    wl = 2.5e-6
    k = asm_kernel(grid, 1e-4, wl, band_limit=False)
    ux, uy = freq_coords(grid)
    outside = (ux**2 + uy**2) >= (1.0 / wl) ** 2
    assert torch.all(k.transfer[outside] == 0)
    inside = ~outside
    assert torch.allclose(k.transfer[inside].abs(), torch.ones(1, dtype=torch.float64), atol=1e-12)


def test_kernel_unit_modulus_on_passband():
    grid = GridSpec(48, 32, 8e-6)
    k = asm_kernel(grid, 5e-3, WL)
    mags = k.transfer[k.mask].abs()
    assert torch.allclose(mags, torch.ones_like(mags), atol=1e-12)


def test_kernel_z_zero_is_identity_on_passband():
    grid = GridSpec(32, 32, 8e-6)
    k = asm_kernel(grid, 0.0, WL)
    assert torch.all(k.transfer[k.mask] == 1.0 + 0.0j)


def test_plane_wave_picks_up_global_phase():
    grid = GridSpec(64, 48, 8e-6)
    f = ComplexField(grid, torch.ones(grid.shape, dtype=torch.complex128), WL)
    z = 3e-3
    out = propagate(f, z)
    expected = cmath.exp(2j * math.pi * z / WL)
    assert (out.samples - expected).abs().max() < 1e-11


def test_back_propagation_round_trip():
    grid = GridSpec(128, 96, 8e-6)
    f = band_limited_field(grid, [7e-3], seed=4)
    out = propagate(propagate(f, 7e-3), -7e-3)
    assert (out.samples - f.samples).abs().max() < 1e-10


def test_energy_conservation_band_limited():
    grid = GridSpec(256, 192, 8e-6)
    for seed in range(3):
        f = band_limited_field(grid, [10e-3], seed=seed)
        out = propagate(f, 10e-3)
        rel = abs(energy(out) - energy(f)) / energy(f)
        assert rel < 1e-8


def test_composition_of_distances():
    grid = GridSpec(128, 128, 8e-6)
    z1, z2 = 4e-3, 6e-3
    f = band_limited_field(grid, [z1, z2, z1 + z2], seed=7)
    once = propagate(f, z1 + z2)
    twice = propagate(propagate(f, z1), z2)
    assert (once.samples - twice.samples).abs().max() < 1e-9


def test_conjugate_symmetry():
    grid = GridSpec(64, 64, 8e-6)
    f = band_limited_field(grid, [5e-3], seed=11)
    conj_in = ComplexField(grid, f.samples.conj(), WL)
    lhs = propagate(conj_in, 5e-3).samples
    rhs = propagate(f, -5e-3).samples.conj()
    assert (lhs - rhs).abs().max() < 1e-11


def test_wavelength_cutoff_monotonicity():
    grid = GridSpec(256, 256, 4e-6)
    z = 25e-3
    counts = []
    for wl in (450e-9, 550e-9, 650e-9):
        counts.append(int(asm_kernel(grid, z, wl).mask.sum()))
    assert counts[0] > counts[1] > counts[2]


def test_band_limit_uses_magnitude_of_z():
    grid = GridSpec(64, 64, 8e-6)
    k_fwd = asm_kernel(grid, 9e-3, WL)
    k_bwd = asm_kernel(grid, -9e-3, WL)
    assert torch.equal(k_fwd.mask, k_bwd.mask)
    assert (k_bwd.transfer - k_fwd.transfer.conj()).abs().max() < 1e-12


def test_identity_aperture_matches_plain_propagation():
    grid = GridSpec(32, 32, 8e-6)
    f = band_limited_field(grid, [2e-3], seed=5)
    a = propagate(f, 2e-3, aperture=ApertureFunction.identity())
    b = propagate(f, 2e-3)
    assert torch.equal(a.samples, b.samples)


def test_piston_opd_is_global_phase():
    grid = GridSpec(32, 32, 8e-6)
    c = 120e-9
    ap = ApertureFunction(amplitude=None, opd=torch.full(grid.shape, c, dtype=torch.float64))
    f = band_limited_field(grid, [1e-3], seed=6)
    with_ap = propagate(f, 1e-3, aperture=ap)
    plain = propagate(f, 1e-3)
    expected = cmath.exp(2j * math.pi * c / WL)
    assert (with_ap.samples - plain.samples * expected).abs().max() < 1e-11


def test_aperture_grid_mismatch_raises():
    grid = GridSpec(32, 32, 8e-6)
    ap = ApertureFunction(amplitude=torch.ones(16, 16, dtype=torch.float64))
    f = ComplexField(grid, torch.ones(grid.shape, dtype=torch.complex128), WL)
    with pytest.raises(ValueError):
        propagate(f, 1e-3, aperture=ap)


def test_circular_aperture_cuts_high_frequencies():
    grid = GridSpec(64, 64, 8e-6)
    cutoff = 1.0 / (4 * grid.pitch)
    ap = circular_aperture(grid, cutoff)
    f = ComplexField(grid, random_field_samples(grid.shape, 3), WL)
    out = propagate(f, 1e-3, aperture=ap)
    spec = fft2c(out.samples)
    ux, uy = freq_coords(grid)
    outside = (ux**2 + uy**2) > cutoff**2
    assert spec[outside].abs().max() < 1e-12


def test_transfer_batched_wavelengths():
    grid = GridSpec(32, 24, 8e-6)
    wls = torch.tensor([450e-9, 650e-9], dtype=torch.float64)
    h = asm_transfer(grid, 2e-3, wls)
    assert h.shape == (2, 24, 32)
    for i, wl in enumerate(wls):
        single = asm_transfer(grid, 2e-3, float(wl))
        assert (h[i] - single).abs().max() < 1e-14
