import torch
import pytest


@pytest.fixture(autouse=True)
def _single_thread():
    # keep runs reproducible regardless of host CPU count
    torch.set_num_threads(1)


def random_field_samples(shape, seed, dtype=torch.complex128):
    gen = torch.Generator().manual_seed(seed)
    real_dtype = torch.float64 if dtype == torch.complex128 else torch.float32
    re = torch.randn(shape, generator=gen, dtype=real_dtype)
    im = torch.randn(shape, generator=gen, dtype=real_dtype)
    return torch.complex(re, im)
