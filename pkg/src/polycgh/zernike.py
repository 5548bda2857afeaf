"""Noll-ordered Zernike polynomials on the unit disk.

Normalization follows the Noll convention: the mean square of every term over
the unit disk is 1 (piston aside, terms are zero-mean). Values outside the
disk are zero.
"""

from __future__ import annotations

import math

import torch


def noll_to_nm(j: int) -> tuple[int, int]:
    """Map a 1-based Noll index to (radial order n, azimuthal frequency m)."""
    if j < 1:
        raise ValueError("Noll indices start at 1")
    n = 0
    k = j - 1
    while k > n:
        n += 1
        k -= n
    m = (-1) ** j * ((n % 2) + 2 * ((k + ((n + 1) % 2)) // 2))
    return n, m


def radial_poly(n: int, m: int, rho: torch.Tensor) -> torch.Tensor:
    m = abs(m)
    out = torch.zeros_like(rho)
    for k in range((n - m) // 2 + 1):
        c = (
            (-1) ** k
            * math.factorial(n - k)
            / (math.factorial(k) * math.factorial((n + m) // 2 - k) * math.factorial((n - m) // 2 - k))
        )
        out = out + c * rho ** (n - 2 * k)
    return out


def zernike_term(j: int, rho: torch.Tensor, theta: torch.Tensor) -> torch.Tensor:
    """Z_j sampled at polar coordinates; zero outside the unit disk."""
    n, m = noll_to_nm(j)
    r = radial_poly(n, m, rho)
    if m == 0:
        z = math.sqrt(n + 1.0) * r
    elif m > 0:
        z = math.sqrt(2.0 * (n + 1)) * r * torch.cos(m * theta)
    else:
        z = math.sqrt(2.0 * (n + 1)) * r * torch.sin(-m * theta)
    return z * (rho <= 1.0)


def zernike_stack(n_terms: int, rho: torch.Tensor, theta: torch.Tensor) -> torch.Tensor:
    """Terms 1..n_terms stacked along a new leading axis."""
    return torch.stack([zernike_term(j, rho, theta) for j in range(1, n_terms + 1)])
