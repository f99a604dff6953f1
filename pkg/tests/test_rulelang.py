import random
from collections import Counter

import pytest

from app.constants import DEFAULT_RULES
from app.errors import RuleEvalError, RuleSyntaxError
from app.rulelang import (
    BINDING_POWER,
    BinOp,
    BoolLit,
    IntLit,
    NoneLit,
    SymLit,
    Var,
    eval_rule,
    evaluate,
    filter_by_rules,
    load_rules,
    parse_expression,
    parse_rules,
    render,
    strategy_bindings,
)
from app.schemas import TrainConfig
from conftest import make_strategy

TRAIN = TrainConfig(global_batch=64, seq_len=1024)


def test_flash_rule_tree():
    expr = parse_expression("$use_flash_attn != None && $recompute_granularity == selective")
    assert expr == BinOp(
        "&&",
        BinOp("!=", Var("use_flash_attn"), NoneLit()),
        BinOp("==", Var("recompute_granularity"), SymLit("selective")),
    )


def test_and_binds_tighter_than_or():
    expr = parse_expression("$a == 1 || $b == 1 && $c == 1")
    assert expr == BinOp(
        "||",
        BinOp("==", Var("a"), IntLit(1)),
        BinOp("&&", BinOp("==", Var("b"), IntLit(1)), BinOp("==", Var("c"), IntLit(1))),
    )


def test_left_associativity():
    assert parse_expression("10 - 3 - 2") == BinOp("-", BinOp("-", IntLit(10), IntLit(3)), IntLit(2))
    assert evaluate(parse_expression("10 - 3 - 2"), {}) == 5
    assert evaluate(parse_expression("2 + 3 * 4 % 5"), {}) == 4


def test_literals():
    assert parse_expression("TRUE") == BoolLit(True)
    assert parse_expression("false") == BoolLit(False)
    assert parse_expression("None") == NoneLit()
    assert parse_expression("none") == SymLit("none")
    assert parse_expression("-7") == IntLit(-7)
    assert parse_expression("($x)") == Var("x")


def test_incomplete_expression_reports_end_column():
    with pytest.raises(RuleSyntaxError) as err:
        parse_expression("$a == ")
    assert err.value.line == 1
    assert err.value.column == len("$a == ") + 1


@pytest.mark.parametrize(
    "text, column, fragment",
    [
        ("$a = 1", 4, "'=='"),
        ("$a & $b", 4, "'&&'"),
        ("$a | $b", 4, "'||'"),
        ("!$a", 1, "'!='"),
        ("$a / 2", 4, "division"),
        ("$ a", 1, "variable name"),
        ("($a == 1", 9, "expected ')'"),
        ("$a == 1)", 8, "unexpected ')'"),
        ("$a == 1 2", 9, "after a complete expression"),
        ("$a @ 1", 4, "unexpected character"),
        ("- $a", 1, "unexpected '-'"),
    ],
)
def test_syntax_errors(text, column, fragment):
    with pytest.raises(RuleSyntaxError) as err:
        parse_expression(text)
    assert err.value.column == column
    assert fragment in err.value.message


def test_integer_literal_range():
    assert parse_expression("9223372036854775807") == IntLit(2**63 - 1)
    with pytest.raises(RuleSyntaxError):
        parse_expression("9223372036854775808")
    with pytest.raises(RuleSyntaxError):
        parse_expression("1" * 5000)


def test_nesting_limit():
    assert parse_expression("(" * 50 + "1" + ")" * 50) == IntLit(1)
    with pytest.raises(RuleSyntaxError) as err:
        parse_expression("(" * 300 + "1" + ")" * 300)
    assert "too deeply" in err.value.message


def test_flat_chain_height_limit():
    short = parse_expression(" + ".join(["1"] * 150) + " > 0")
    assert evaluate(short, {}) is True
    assert parse_expression(render(short)) == short
    with pytest.raises(RuleSyntaxError) as err:
        parse_expression(" + ".join(["1"] * 3000) + " > 0")
    assert "too deeply" in err.value.message
    # The 201st "+" pushes the tree past the limit.
    assert (err.value.line, err.value.column) == (1, 803)


def test_parse_rules_names_comments_and_lines():
    rules = parse_rules(
        "# header\n"
        "\n"
        "big_tp: $tensor_model_parallel_size > 8  # inline\n"
        "$pp == 3\n"
    )
    assert rules.names == ["big_tp", "rule_4"]
    assert rules.rules[0].line == 3
    assert rules.rules[1].expr == BinOp("==", Var("pp"), IntLit(3))


def test_parse_rules_error_carries_line():
    with pytest.raises(RuleSyntaxError) as err:
        parse_rules("ok: $pp == 1\nbad: $pp === 1\n")
    assert err.value.line == 2
    assert err.value.module == "rulelang"


def test_duplicate_rule_names():
    with pytest.raises(RuleSyntaxError):
        parse_rules("a: $pp == 1\na: $tp == 1\n")


def test_load_rules(tmp_path):
    assert len(load_rules(None)) == 0
    path = tmp_path / "rules.txt"
    path.write_text(DEFAULT_RULES, encoding="utf-8")
    rules = load_rules(path)
    assert rules.names == ["flash_attn_selective", "recompute_layers", "gpu_division"]
    with pytest.raises(RuleSyntaxError):
        load_rules(tmp_path / "missing.txt")


def test_division_rule_examples():
    rule = parse_rules(DEFAULT_RULES).rules[2]
    kept = {"num_gpus": 64, "pipeline_model_parallel_size": 4, "tensor_model_parallel_size": 8}
    assert evaluate(rule.expr, kept) is False
    dropped = dict(kept, pipeline_model_parallel_size=3)
    assert evaluate(rule.expr, dropped) is True
    recompute = parse_rules(DEFAULT_RULES).rules[1]
    assert evaluate(recompute.expr, {"recompute_num_layers": 5, "pipeline_model_parallel_size": 4}) is True


def six_strategies(arch):
    return [
        make_strategy(arch, gpus=64, pp=4, tp=8),
        make_strategy(arch, gpus=64, pp=4, tp=8, recompute_granularity="selective"),
        make_strategy(arch, gpus=64, pp=4, tp=8, recompute_granularity="selective", use_flash_attn=None),
        make_strategy(arch, gpus=64, pp=4, tp=8, recompute_granularity="full", recompute_num_layers=5),
        make_strategy(arch, gpus=64, pp=3, tp=8),
        make_strategy(arch, gpus=64, pp=2, tp=1, recompute_granularity="selective", use_flash_attn=False),
    ]


def test_default_rules_keep_drop_table(llama7b):
    rules = parse_rules(DEFAULT_RULES)
    strategies = six_strategies(llama7b)
    dropped = [any(eval_rule(rule, s, TRAIN) for rule in rules) for s in strategies]
    assert dropped == [False, True, False, True, True, False]

    counters = Counter()
    survivors = list(filter_by_rules(strategies, rules, TRAIN, counters))
    assert [s.id for s in survivors] == [strategies[0].id, strategies[2].id, strategies[5].id]
    assert counters == Counter({"flash_attn_selective": 1, "recompute_layers": 1, "gpu_division": 1})


def test_flash_attention_off_is_none_for_rules_and_memory(llama7b):
    rule = parse_rules(DEFAULT_RULES).rules[0]
    off = make_strategy(llama7b, recompute_granularity="selective", use_flash_attn=False)
    absent = make_strategy(llama7b, recompute_granularity="selective", use_flash_attn=None)
    on = make_strategy(llama7b, recompute_granularity="selective", use_flash_attn=True)
    assert off.params.use_flash_attn is None
    assert off.id == absent.id
    assert strategy_bindings(off, TRAIN)["use_flash_attn"] is None
    assert [eval_rule(rule, s, TRAIN) for s in (off, absent, on)] == [False, False, True]
    assert [s.params.flash_attention for s in (off, absent, on)] == [False, False, True]


def test_empty_and_always_true_rulesets(llama7b):
    strategies = six_strategies(llama7b)
    assert list(filter_by_rules(strategies, parse_rules(""), TRAIN)) == strategies
    counters = Counter()
    assert list(filter_by_rules(strategies, parse_rules("all: true"), TRAIN, counters)) == []
    assert counters["all"] == 6


@pytest.mark.parametrize(
    "text, bindings",
    [
        ("$pp == selective", {"pp": 4}),
        ("$pp < true", {"pp": 4}),
        ("$pp && true", {"pp": 4}),
        ("$pp % 0 == 1", {"pp": 4}),
        ("$big + 1 > 0", {"big": 2**63 - 1}),
        ("$missing == 1", {}),
    ],
)
def test_evaluation_errors(text, bindings):
    with pytest.raises(RuleEvalError):
        evaluate(parse_expression(text), bindings)


def test_none_equals_only_none():
    assert evaluate(parse_expression("$x == None"), {"x": None}) is True
    assert evaluate(parse_expression("$x != None"), {"x": 0}) is True
    assert evaluate(parse_expression("$x == None"), {"x": False}) is False


def test_short_circuit_skips_bad_operand():
    assert evaluate(parse_expression("false && $missing == 1"), {}) is False
    assert evaluate(parse_expression("true || 1 % 0 == 1"), {}) is True


def test_non_boolean_rule_names_strategy(llama7b):
    rules = parse_rules("sum: $pp + 1")
    with pytest.raises(RuleEvalError) as err:
        list(filter_by_rules(six_strategies(llama7b), rules, TRAIN))
    assert err.value.entity == six_strategies(llama7b)[0].id


def test_bindings_cover_aliases(llama7b):
    s = make_strategy(llama7b, gpus=64, pp=4, tp=8, micro_batch=2)
    rules = parse_rules(
        "a: $pipeline_model_parallel_size == $pp && $micro_batch_size == 2\n"
        "b: $dp == 2 && $num_microbatches == 16 && $gpu_type == A800\n"
    )
    assert [eval_rule(rule, s, TRAIN) for rule in rules] == [True, True]


def test_default_rules_render_round_trip():
    for rule in parse_rules(DEFAULT_RULES):
        assert parse_expression(render(rule.expr)) == rule.expr


# Random trees: minimal parentheses derived from the binding powers must
# parse back to the same tree and evaluate the same way.

INT_VARS = {"x": 3, "y": -4, "z": 11}
ARITHMETIC = ("+", "-", "*", "%")
COMPARISONS = ("==", "!=", "<", "<=", ">", ">=")


def random_int_expr(rng, depth):
    if depth == 0 or rng.random() < 0.3:
        if rng.random() < 0.5:
            return Var(rng.choice(sorted(INT_VARS)))
        return IntLit(rng.randint(-9, 9))
    return BinOp(rng.choice(ARITHMETIC), random_int_expr(rng, depth - 1), random_int_expr(rng, depth - 1))


def random_bool_expr(rng, depth):
    if depth == 0 or rng.random() < 0.3:
        if rng.random() < 0.2:
            return BoolLit(rng.random() < 0.5)
        return BinOp(rng.choice(COMPARISONS), random_int_expr(rng, 2), random_int_expr(rng, 2))
    return BinOp(rng.choice(("&&", "||")), random_bool_expr(rng, depth - 1), random_bool_expr(rng, depth - 1))


def render_minimal(expr):
    if not isinstance(expr, BinOp):
        return render(expr)
    power = BINDING_POWER[expr.op]
    left, right = render_minimal(expr.left), render_minimal(expr.right)
    if isinstance(expr.left, BinOp) and BINDING_POWER[expr.left.op] < power:
        left = f"({left})"
    if isinstance(expr.right, BinOp) and BINDING_POWER[expr.right.op] <= power:
        right = f"({right})"
    return f"{left} {expr.op} {right}"


def outcome(expr):
    try:
        return evaluate(expr, INT_VARS)
    except RuleEvalError:
        return "error"


def test_precedence_and_associativity_laws():
    rng = random.Random(20240601)
    for _ in range(10_000):
        tree = random_bool_expr(rng, 4)
        for text in (render(tree), render_minimal(tree)):
            parsed = parse_expression(text)
            assert parsed == tree, text
            assert outcome(parsed) == outcome(tree)


FUZZ_PIECES = [
    "$pp", "$tp", "1", "-", "42", "==", "!=", "<", "<=", ">", ">=", "&&", "||", "+", "*", "%", "(", ")",
    "=", "&", "|", "!", "/", "$", "None", "true", "abc", " ", "#", "@", "99999999999999999999",
]


def test_parser_fuzz_only_raises_syntax_errors():
    rng = random.Random(7)
    for _ in range(100_000):
        text = "".join(rng.choice(FUZZ_PIECES) for _ in range(rng.randint(0, 8)))
        try:
            parse_expression(text)
        except RuleSyntaxError as exc:
            assert exc.column >= 1
