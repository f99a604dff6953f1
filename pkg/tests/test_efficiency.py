import json

import pytest

from app.efficiency import (
    ConstantEfficiency,
    EfficiencyQuery,
    LookupEfficiency,
    ProfileSample,
    TreeEnsembleEfficiency,
    calibrate_efficiency,
    collective_factor,
    load_efficiency_model,
    load_profile_csv,
    predict_efficiency,
    size_bucket,
)
from app.errors import EfficiencyModelError
from app.fixtures import load_fixture
from app.schemas import TreeNode

MATMUL_4096 = EfficiencyQuery(kind="matmul_qkv", theta=2 * 4096**3, gpu="A800", peak=312e12)


def sample(ratio, row=2, theta=1.0, peak=1.0):
    return ProfileSample(row, "matmul", "A800", "device", theta, peak, (theta / peak) / ratio)


def test_constant_model():
    assert predict_efficiency(ConstantEfficiency(0.5), MATMUL_4096) == 0.5
    assert ConstantEfficiency(0.5).predict(EfficiencyQuery(kind="p2p", theta=1.0, gpu="H100")) == 0.5


def test_ensemble_sum_is_clamped():
    model = TreeEnsembleEfficiency(trees=(TreeNode(leaf=3.0), TreeNode(leaf=0.7)))
    assert model.predict(MATMUL_4096) == 1.0
    negative = TreeEnsembleEfficiency(trees=(TreeNode(leaf=-2.0),))
    assert 0 < negative.predict(MATMUL_4096) < 1e-3


def test_ensemble_split_goes_left_below_threshold():
    tree = TreeNode(feature=0, threshold=10.0, left=TreeNode(leaf=0.3), right=TreeNode(leaf=0.8))
    model = TreeEnsembleEfficiency(trees=(tree,), base_score=0.1)
    small = EfficiencyQuery(kind="matmul", theta=1e9, gpu="A800", peak=312e12)
    large = EfficiencyQuery(kind="matmul", theta=1e11, gpu="A800", peak=312e12)
    assert model.predict(small) == pytest.approx(0.4)
    assert model.predict(large) == pytest.approx(0.9)


def test_ensemble_bad_feature_index():
    tree = TreeNode(feature=9, threshold=1.0, left=TreeNode(leaf=0.3), right=TreeNode(leaf=0.8))
    with pytest.raises(EfficiencyModelError):
        TreeEnsembleEfficiency(trees=(tree,)).predict(MATMUL_4096)


def test_lookup_falls_back_to_default():
    model = LookupEfficiency(table={("matmul", "large", "A800", "device"): 0.7}, default=0.4)
    assert model.predict(MATMUL_4096) == 0.7
    assert model.predict(EfficiencyQuery(kind="matmul", theta=10.0, gpu="A800")) == 0.4


def test_buckets_and_collective_factors():
    assert size_bucket(5e8, False) == "small"
    assert size_bucket(1e10, False) == "medium"
    assert size_bucket(2e11, False) == "large"
    assert size_bucket(1024, True) == "small"
    assert size_bucket(64 * 1024**2, True) == "large"
    assert collective_factor("tp_allreduce", 4) == 1.5
    assert collective_factor("tp_allgather", 4) == 0.75
    assert collective_factor("p2p_activation", 2) == 1.0


def test_calibration_examples():
    assert calibrate_efficiency([sample(1.0)]).table == {("matmul", "small", "A800", "device"): 1.0}
    median = calibrate_efficiency([sample(0.4), sample(0.5), sample(0.9)])
    assert median.table[("matmul", "small", "A800", "device")] == 0.5
    noisy = calibrate_efficiency([sample(1.3)])
    assert noisy.table[("matmul", "small", "A800", "device")] == 1.0


def test_calibration_rejects_non_positive_measurement():
    bad = ProfileSample(7, "matmul", "A800", "device", 1.0, 1.0, 0.0)
    with pytest.raises(EfficiencyModelError) as err:
        calibrate_efficiency([bad])
    assert "row 7" in str(err.value)


def test_fixture_profile_calibrates_to_062():
    fixture = load_fixture("llama2-7b-a800-64")
    model = calibrate_efficiency(fixture.samples)
    assert model.predict(MATMUL_4096) == pytest.approx(0.62)
    allreduce = EfficiencyQuery(
        kind="dp_allreduce", theta=2 * 7 / 8 * 268435456, gpu="A800", scope="intra_node", group_size=8
    )
    assert model.predict(allreduce) == pytest.approx(0.8)
    # Keys the profile never measured use the default.
    assert model.predict(EfficiencyQuery(kind="matmul", theta=2 * 4096**3, gpu="H100")) == 0.5


def test_profile_csv_row_errors(tmp_path):
    fixture = load_fixture("llama2-7b-a800-64")
    header = "kind,m,n,k_or_bytes,gpu,scope,measured_seconds\n"
    cases = [
        "matmul,8,8,8,B200,intra_node,1e-3\n",
        "softmax_fused,8,8,8,A800,intra_node,1e-3\n",
        "matmul,8,8,8,A800,somewhere,1e-3\n",
        "matmul,0,8,8,A800,intra_node,1e-3\n",
    ]
    for body in cases:
        path = tmp_path / "profile.csv"
        path.write_text(header + "matmul,8,8,8,A800,intra_node,1e-3\n" + body, encoding="utf-8")
        with pytest.raises(EfficiencyModelError) as err:
            load_profile_csv(path, fixture.catalog)
        assert err.value.entity == "row 3"


def write(path, payload):
    path.write_text(json.dumps(payload), encoding="utf-8")
    return path


def test_load_model_files(tmp_path):
    assert isinstance(load_efficiency_model(None), ConstantEfficiency)
    constant = load_efficiency_model(write(tmp_path / "c.json", {"type": "constant", "eta": 0.7}))
    assert constant.predict(MATMUL_4096) == 0.7
    lookup = load_efficiency_model(
        write(
            tmp_path / "l.json",
            {
                "type": "lookup",
                "default": 0.3,
                "entries": [{"kind": "matmul", "bucket": "large", "gpu": "A800", "scope": "device", "eta": 0.9}],
            },
        )
    )
    assert lookup.predict(MATMUL_4096) == 0.9
    trees = [{"leaf": 0.25}, {"feature": 1, "threshold": 0.5, "left": {"leaf": 0.5}, "right": {"leaf": 0.1}}]
    bare = load_efficiency_model(write(tmp_path / "e.json", trees))
    assert bare.predict(MATMUL_4096) == pytest.approx(0.75)


@pytest.mark.parametrize(
    "payload",
    [
        {"type": "forest"},
        {"type": "constant", "eta": 0},
        {"type": "ensemble", "trees": []},
        {"type": "ensemble", "trees": [{"feature": 0, "threshold": 1.0}]},
        {"type": "lookup", "entries": [{"kind": "matmul"}]},
    ],
)
def test_bad_model_files(tmp_path, payload):
    with pytest.raises(EfficiencyModelError):
        load_efficiency_model(write(tmp_path / "m.json", payload))


def test_csv_model_needs_catalog(tmp_path):
    path = tmp_path / "profile.csv"
    path.write_text("kind,m,n,k_or_bytes,gpu,scope,measured_seconds\n", encoding="utf-8")
    with pytest.raises(EfficiencyModelError):
        load_efficiency_model(path)
    assert load_efficiency_model(path, load_fixture("tiny-gpt-8").catalog).table == {}
