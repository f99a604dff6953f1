import json

import pytest

from app.cli import build_parser, main, render_json, settings_from_args
from app.errors import ReportError
from app.schemas import SearchSettings
from app.search import evaluate_strategies, resolve_inputs, run_search
from app.strategy import enumerate_strategies

TINY = "tiny-gpt-8"
HETERO = "hetero-a800-h100-1024"


def write_json(path, payload):
    path.write_text(json.dumps(payload), encoding="utf-8")
    return str(path)


def test_tiny_fixture_report():
    report = run_search(SearchSettings(fixture=TINY))
    counts = report.counts
    assert counts.search_space_size == 48
    assert counts.generated == 48
    assert counts.simulated == 48
    assert counts.balanced
    assert report.exit_code == 0
    assert len(report.ranked) == 10
    assert report.selected is not None
    assert report.selected.point == report.frontier[0]
    keys = [item.point.sort_key() for item in report.ranked]
    assert keys == sorted(keys)


def test_singleton_space(tmp_path):
    space = write_json(
        tmp_path / "space.json",
        {
            "pp": [1],
            "tp": [1],
            "micro_batch": [1],
            "sequence_parallel": [False],
            "distributed_optimizer": [False],
            "recompute_granularity": ["none"],
        },
    )
    report = run_search(SearchSettings(fixture=TINY, space=space))
    assert report.counts.generated == 1
    assert len(report.ranked) == 1
    assert report.ranked[0].strategy.params.dp == 8


def test_always_true_rules_drop_everything(tmp_path):
    rules = tmp_path / "rules.txt"
    rules.write_text("everything: true\n", encoding="utf-8")
    report = run_search(SearchSettings(fixture=TINY, rules=str(rules)))
    assert report.counts.rule_dropped["everything"] == report.counts.generated == 48
    assert report.counts.balanced
    assert report.exit_code == 2
    payload = report.to_dict()
    assert payload["strategies"] == []
    assert payload["selected"] is None


def test_budget_below_every_price():
    report = run_search(SearchSettings(fixture=TINY, max_money=0.0))
    assert report.counts.simulated == 48
    assert report.selected is None
    assert report.exit_code == 2


def test_token_budget_prices_training_run():
    per_iteration = run_search(SearchSettings(fixture=TINY, top_k=1))
    tokens = 16 * 512 * 1000
    priced = run_search(SearchSettings(fixture=TINY, top_k=1, total_tokens=tokens))
    assert priced.ranked[0].point.money == pytest.approx(1000 * per_iteration.ranked[0].point.money)


def test_top_k_and_determinism():
    first = run_search(SearchSettings(fixture=TINY, top_k=3))
    second = run_search(SearchSettings(fixture=TINY, top_k=3))
    assert len(first.ranked) == 3
    assert render_json(first) == render_json(second)
    assert "timings" not in first.to_dict()


def test_worker_pool_matches_serial():
    inputs = resolve_inputs(SearchSettings(fixture=TINY))
    strategies = list(enumerate_strategies(inputs.configs, inputs.space, inputs.arch, inputs.train)) * 7
    serial = evaluate_strategies(strategies, inputs.catalog, inputs.eff, inputs.train)
    pooled = evaluate_strategies(strategies, inputs.catalog, inputs.eff, inputs.train, workers=4)
    assert [item.point for item in pooled] == [item.point for item in serial]


def test_hetero_fixture_counts_balance():
    report = run_search(SearchSettings(fixture=HETERO))
    counts = report.counts
    assert counts.generated > counts.search_space_size
    assert counts.balanced
    assert counts.unsupported == 0
    assert report.exit_code == 0
    # Every ranked strategy fills the requested pool.
    assert all(sum(n for _, n in item.strategy.gpu_bill()) == 1024 for item in report.ranked)


def test_faster_pools_rank_higher(tmp_path):
    eff_model = write_json(tmp_path / "eta.json", {"type": "constant", "eta": 0.5})

    def best(**overrides):
        report = run_search(SearchSettings(fixture=HETERO, eff_model=eff_model, **overrides))
        assert report.ranked
        return report.ranked[0].point.throughput

    mixed = best()
    homogeneous = {
        gpu: best(mode="homogeneous", gpu_type=gpu, gpu_count=1024) for gpu in ("A800", "H800", "H100")
    }
    assert homogeneous["H100"] >= homogeneous["H800"] >= mixed >= homogeneous["A800"]


def test_cost_mode_spans_ladder():
    report = run_search(SearchSettings(fixture=TINY, mode="cost", max_gpus=8, top_k=200))
    assert report.request["configs"] == ["A800x2", "A800x4", "A800x8"]
    assert report.counts.balanced
    assert {item.strategy.num_gpus for item in report.ranked} == {2, 4, 8}


def test_cli_json_to_file(tmp_path):
    out = tmp_path / "report.json"
    assert main(["--fixture", TINY, "--top-k", "2", "--out", str(out)]) == 0
    payload = json.loads(out.read_text(encoding="utf-8"))
    assert payload["counts"]["generated"] == 48
    assert [entry["rank"] for entry in payload["strategies"]] == [1, 2]
    cost = payload["strategies"][0]["cost"]
    assert cost["T_total"] == pytest.approx(cost["T_comp"] + cost["T_comm"] + cost["T_bubble"])


def test_cli_text_format(capsys):
    assert main(["--fixture", TINY, "--format", "text", "--top-k", "1"]) == 0
    text = capsys.readouterr().out
    assert "generated 48" in text
    assert "selected " in text


def test_cli_timings_flag(capsys):
    assert main(["--fixture", TINY, "--top-k", "0", "--include-timings"]) == 0
    payload = json.loads(capsys.readouterr().out)
    assert set(payload["timings"]) == {"search_s", "simulation_s", "e2e_s"}
    assert all(value >= 0 for value in payload["timings"].values())


@pytest.mark.parametrize(
    "argv",
    [
        ["--fixture", TINY, "--format", "xml"],
        ["--fixture", "no-such-fixture"],
        ["--mode", "homogeneous"],
        ["--fixture", TINY, "--type-limit", "A800"],
        ["--fixture", TINY, "--top-k", "-1"],
    ],
)
def test_cli_errors_exit_one(argv, capsys):
    assert main(argv) == 1
    assert capsys.readouterr().err.startswith("error: ")


def test_cli_empty_result_exit_two(tmp_path, capsys):
    rules = tmp_path / "rules.txt"
    rules.write_text("everything: true\n", encoding="utf-8")
    assert main(["--fixture", TINY, "--rules", str(rules)]) == 2
    assert json.loads(capsys.readouterr().out)["strategies"] == []


def test_cli_overlong_rule_exits_one(tmp_path, capsys):
    rules = tmp_path / "rules.txt"
    rules.write_text("long: " + " + ".join(["$pp"] * 3000) + " > 0\n", encoding="utf-8")
    assert main(["--fixture", TINY, "--rules", str(rules)]) == 1
    assert "too deeply" in capsys.readouterr().err


def test_settings_from_args_reads_workers_env(monkeypatch):
    monkeypatch.setenv("PARASEARCH_WORKERS", "3")
    args = build_parser().parse_args(["--fixture", TINY, "--type-limit", "A800=8", "--type-limit", "H100=4"])
    settings = settings_from_args(args)
    assert settings.workers == 3
    assert settings.type_limits == (("A800", 8), ("H100", 4))
    monkeypatch.setenv("PARASEARCH_WORKERS", "many")
    with pytest.raises(ReportError):
        settings_from_args(args)
