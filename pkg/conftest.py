"""Pytest configuration ensuring project root is importable, plus shared builders."""

import sys
from pathlib import Path

import pytest

PROJECT_ROOT = Path(__file__).resolve().parent
if str(PROJECT_ROOT) not in sys.path:
    sys.path.insert(0, str(PROJECT_ROOT))

from app.efficiency import ConstantEfficiency  # noqa: E402
from app.modes import GpuConfig  # noqa: E402
from app.schemas import GpuCatalog, GpuSpec, MemCoeffs, ModelArch, TrainConfig  # noqa: E402
from app.strategy import ParallelParams, Strategy  # noqa: E402

A800 = {
    "name": "A800",
    "peak_flops": 312e12,
    "mem_bytes": 85899345920,
    "intra_node_bw": 400e9,
    "inter_node_bw": 25e9,
    "gpus_per_node": 8,
    "price_per_hour": 1.6,
    "host_bw": 32e9,
}


@pytest.fixture
def a800():
    return GpuSpec.model_validate(A800)


@pytest.fixture
def catalog(a800):
    h100 = a800.model_copy(
        update={
            "name": "H100",
            "peak_flops": 989e12,
            "intra_node_bw": 900e9,
            "inter_node_bw": 50e9,
            "price_per_second": 3.0 / 3600,
            "host_bw": 64e9,
        }
    )
    return GpuCatalog(gpus=(a800, h100))


@pytest.fixture
def llama7b():
    return ModelArch(
        family="llama2-7b",
        num_layers=32,
        hidden_size=4096,
        num_heads=32,
        intermediate_size=11008,
        vocab_size=32000,
        mlp_matrices=3,
        tied_embeddings=False,
    )


@pytest.fixture
def tiny_arch():
    return ModelArch(
        family="tiny",
        num_layers=4,
        hidden_size=64,
        num_heads=4,
        intermediate_size=256,
        vocab_size=128,
    )


@pytest.fixture
def train():
    return TrainConfig(global_batch=64, seq_len=1024)


@pytest.fixture
def eff():
    return ConstantEfficiency(0.5)


@pytest.fixture
def coeffs():
    return MemCoeffs()


def make_strategy(arch, gpu_type="A800", gpus=8, partition=None, type_limits=(), **values):
    """Strategy on a single-type config (or a heterogeneous one when type_limits is given)."""
    values.setdefault("pp", 1)
    values.setdefault("tp", 1)
    values.setdefault("micro_batch", 1)
    values.setdefault("dp", gpus // (values["pp"] * values["tp"]))
    if type_limits:
        config = GpuConfig(entries=(), total=gpus, type_limits=tuple(type_limits))
    else:
        config = GpuConfig(entries=((gpu_type, gpus),), total=gpus)
    return Strategy.build(config, ParallelParams(**values), arch, partition)
