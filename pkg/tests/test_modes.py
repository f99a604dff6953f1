import pytest

from app.errors import ModeError
from app.modes import GpuConfig, generate_gpu_configs
from app.schemas import GpuCatalog, SearchRequest


def request(**data):
    return SearchRequest.model_validate(data)


def test_homogeneous_single_config(catalog):
    configs = generate_gpu_configs(request(mode="homogeneous", gpu_type="A800", gpu_count=32768), catalog)
    assert configs == [GpuConfig(entries=(("A800", 32768),), total=32768)]
    assert configs[0].gpu_type == "A800"
    assert configs[0].label == "A800x32768"


def test_cost_mode_doubling_ladder(catalog):
    configs = generate_gpu_configs(request(mode="cost", gpu_type="H100", max_gpus=4096), catalog)
    counts = [config.total for config in configs]
    assert counts == [2, 4, 8, 16, 32, 64, 128, 256, 512, 1024, 2048, 4096]
    assert all(config.entries == (("H100", config.total),) for config in configs)


def test_cost_mode_ladder_ends_at_max(catalog):
    counts = [c.total for c in generate_gpu_configs(request(mode="cost", gpu_type="H100", max_gpus=12), catalog)]
    assert counts == [2, 4, 8, 12]
    counts = [c.total for c in generate_gpu_configs(request(mode="cost", gpu_type="H100", max_gpus=1), catalog)]
    assert counts == [1]


def test_cost_mode_linear_ladder(catalog):
    configs = generate_gpu_configs(
        request(mode="cost", gpu_type="A800", max_gpus=9, ladder="linear"), catalog
    )
    assert [c.total for c in configs] == [2, 4, 6, 8, 9]


def test_heterogeneous_symbolic_config(catalog):
    configs = generate_gpu_configs(
        request(mode="heterogeneous", gpu_count=8192, type_limits={"A800": 2048, "H100": 7168}), catalog
    )
    assert len(configs) == 1
    config = configs[0]
    assert config.heterogeneous
    assert config.total == 8192
    assert config.type_limits == (("A800", 2048), ("H100", 7168))
    with pytest.raises(ModeError):
        config.gpu_type


def test_unknown_gpu_type(catalog):
    with pytest.raises(ModeError) as err:
        generate_gpu_configs(request(mode="homogeneous", gpu_type="B200", gpu_count=8), catalog)
    assert err.value.entity == "B200"


def test_availability_caps(catalog):
    limited = GpuCatalog(gpus=tuple(g.model_copy(update={"max_available": 16}) for g in catalog.gpus))
    with pytest.raises(ModeError):
        generate_gpu_configs(request(mode="homogeneous", gpu_type="A800", gpu_count=32), limited)
    configs = generate_gpu_configs(request(mode="cost", gpu_type="A800", max_gpus=64), limited)
    assert configs[-1].total == 16
    hetero = generate_gpu_configs(
        request(mode="heterogeneous", gpu_count=32, type_limits={"A800": 64, "H100": 8}), limited
    )
    assert hetero[0].type_limits == (("A800", 16), ("H100", 8))


@pytest.mark.parametrize(
    "data",
    [
        {"mode": "homogeneous", "gpu_count": 8},
        {"mode": "heterogeneous", "gpu_count": 8},
        {"mode": "cost", "gpu_type": "A800"},
        {"mode": "heterogeneous", "gpu_count": 8, "type_limits": {"A800": 0}},
    ],
)
def test_request_missing_fields(data):
    with pytest.raises(ValueError):
        SearchRequest.model_validate(data)
