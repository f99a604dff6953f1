"""Rule expression language: tokenizer, Pratt parser, evaluator and strategy filter.

A rules file holds one boolean expression per line. A strategy matching any
rule is dropped. Grammar, loosest binding first::

    expr   := expr '||' expr | expr '&&' expr
            | expr ('=='|'!='|'<'|'<='|'>'|'>=') expr
            | expr ('+'|'-') expr | expr ('*'|'%') expr
            | '$' name | integer | '-' integer | symbol | 'None' | 'true' | 'false'
            | '(' expr ')'

Equal-precedence operators associate left to right. A line may start with
``name:`` to label the rule.
"""

from __future__ import annotations

import logging
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, Iterator, List, Optional, Tuple, Union

from .constants import INT64_MAX, INT64_MIN, PARAM_FIELDS
from .errors import RuleEvalError, RuleSyntaxError
from .schemas import TrainConfig
from .strategy import PARAM_ALIASES, Strategy

logger = logging.getLogger(__name__)

MAX_DEPTH = 200

BINDING_POWER = {
    "||": 10,
    "&&": 20,
    "==": 30,
    "!=": 30,
    "<": 30,
    "<=": 30,
    ">": 30,
    ">=": 30,
    "+": 40,
    "-": 40,
    "*": 50,
    "%": 50,
}
LOGICAL_OPS = ("&&", "||")
EQUALITY_OPS = ("==", "!=")

_TOKEN_RE = re.compile(
    r"""
    (?P<space>\s+)
    | (?P<var>\$[A-Za-z_][A-Za-z0-9_]*)
    | (?P<int>[0-9]+)
    | (?P<ident>[A-Za-z_][A-Za-z0-9_]*)
    | (?P<op>==|!=|<=|>=|&&|\|\||[<>+\-*%()])
    """,
    re.VERBOSE,
)
_RULE_NAME_RE = re.compile(r"\s*([A-Za-z_][A-Za-z0-9_]*)\s*:")

_HINTS = {
    "=": "unknown operator '=' (use '==' to compare)",
    "&": "unknown operator '&' (use '&&')",
    "|": "unknown operator '|' (use '||')",
    "!": "unknown operator '!' (use '!=')",
    "/": "unknown operator '/' (division is not supported)",
    "$": "expected a variable name after '$'",
}


@dataclass(frozen=True)
class Var:
    name: str
    column: int = field(default=0, compare=False)


@dataclass(frozen=True)
class IntLit:
    value: int


@dataclass(frozen=True)
class SymLit:
    name: str


@dataclass(frozen=True)
class BoolLit:
    value: bool


@dataclass(frozen=True)
class NoneLit:
    pass


@dataclass(frozen=True)
class BinOp:
    op: str
    left: "RuleExpr"
    right: "RuleExpr"


RuleExpr = Union[Var, IntLit, SymLit, BoolLit, NoneLit, BinOp]
Value = Union[int, bool, str, None]


@dataclass(frozen=True)
class Rule:
    name: str
    expr: RuleExpr
    source: str
    line: int = 0


@dataclass(frozen=True)
class RuleSet:
    rules: Tuple[Rule, ...] = ()

    def __iter__(self) -> Iterator[Rule]:
        return iter(self.rules)

    def __len__(self) -> int:
        return len(self.rules)

    @property
    def names(self) -> List[str]:
        return [rule.name for rule in self.rules]


@dataclass(frozen=True)
class _Token:
    kind: str
    text: str
    column: int


def _tokenize(line: str, start: int, line_no: int) -> List[_Token]:
    tokens = []
    position = start
    while position < len(line):
        if line[position] == "#":
            break
        match = _TOKEN_RE.match(line, position)
        if match is None:
            char = line[position]
            message = _HINTS.get(char, f"unexpected character {char!r}")
            raise RuleSyntaxError(message, line_no, position + 1, entity=char)
        kind = match.lastgroup
        text = match.group()
        if kind == "int" and (len(text) > 19 or int(text) > INT64_MAX):
            raise RuleSyntaxError("integer literal out of range", line_no, position + 1, entity=text)
        if kind != "space":
            tokens.append(_Token(kind, text, position + 1))
        position = match.end()
    return tokens


class _Parser:
    def __init__(self, tokens: List[_Token], line_no: int, end_column: int):
        self.tokens = tokens + [_Token("end", "", end_column)]
        self.index = 0
        self.line_no = line_no

    @property
    def current(self) -> _Token:
        return self.tokens[self.index]

    def advance(self) -> _Token:
        token = self.tokens[self.index]
        if token.kind != "end":
            self.index += 1
        return token

    def error(self, message: str, token: _Token) -> RuleSyntaxError:
        return RuleSyntaxError(message, self.line_no, token.column, entity=token.text or "<end>")

    def parse(self) -> RuleExpr:
        expr, _ = self.expression(0, 0)
        token = self.current
        if token.kind != "end":
            if token.text == ")":
                raise self.error("unbalanced parenthesis: unexpected ')'", token)
            raise self.error(f"unexpected '{token.text}' after a complete expression", token)
        return expr

    def binding_power(self, token: _Token) -> int:
        if token.kind != "op":
            return 0
        return BINDING_POWER.get(token.text, 0)

    def expression(self, rbp: int, depth: int) -> Tuple[RuleExpr, int]:
        """Parse one expression; returns the tree and its height."""
        if depth > MAX_DEPTH:
            raise self.error("expression nested too deeply", self.current)
        left, height = self.nud(self.advance(), depth)
        while rbp < self.binding_power(self.current):
            operator = self.advance()
            right, right_height = self.expression(BINDING_POWER[operator.text], depth + 1)
            # Tree height bounds the recursion of evaluate() and render().
            height = max(height, right_height) + 1
            if height > MAX_DEPTH:
                raise self.error(f"expression nested too deeply (more than {MAX_DEPTH} levels)", operator)
            left = BinOp(operator.text, left, right)
        return left, height

    def nud(self, token: _Token, depth: int) -> Tuple[RuleExpr, int]:
        if token.kind == "end":
            raise self.error("unexpected end of expression", token)
        if token.kind == "var":
            return Var(token.text[1:], token.column), 0
        if token.kind == "int":
            return IntLit(int(token.text)), 0
        if token.kind == "ident":
            lowered = token.text.lower()
            if token.text == "None":
                return NoneLit(), 0
            if lowered in ("true", "false"):
                return BoolLit(lowered == "true"), 0
            return SymLit(token.text), 0
        if token.text == "(":
            inner = self.expression(0, depth + 1)
            closing = self.current
            if closing.text != ")":
                raise self.error("unbalanced parenthesis: expected ')'", closing)
            self.advance()
            return inner
        if token.text == "-" and self.current.kind == "int":
            literal = self.advance()
            return IntLit(-int(literal.text)), 0
        raise self.error(f"unexpected '{token.text}'", token)


def _parse_line(line: str, line_no: int, start: int = 0) -> RuleExpr:
    tokens = _tokenize(line, start, line_no)
    return _Parser(tokens, line_no, len(line) + 1).parse()


def parse_expression(text: str) -> RuleExpr:
    """Parse a single expression; errors report line 1."""
    return _parse_line(text, 1)


def parse_rules(text: str) -> RuleSet:
    """One rule per non-empty, non-comment line."""
    rules: List[Rule] = []
    seen = set()
    for line_no, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        name_match = _RULE_NAME_RE.match(line)
        if name_match:
            name, start = name_match.group(1), name_match.end()
        else:
            name, start = f"rule_{line_no}", 0
        if name in seen:
            raise RuleSyntaxError(f"duplicate rule name '{name}'", line_no, 1, entity=name)
        seen.add(name)
        rules.append(Rule(name=name, expr=_parse_line(line, line_no, start), source=stripped, line=line_no))
    return RuleSet(tuple(rules))


def load_rules(path: Optional[str | Path]) -> RuleSet:
    """Read a rules file; no path means no rules."""
    if path is None:
        return RuleSet()
    file_path = Path(path)
    try:
        text = file_path.read_text(encoding="utf-8")
    except OSError as exc:
        raise RuleSyntaxError(f"cannot read {file_path}: {exc.strerror or exc}", 0, 0, entity=str(file_path)) from exc
    ruleset = parse_rules(text)
    logger.debug("loaded %d rules from %s", len(ruleset), file_path)
    return ruleset


def render(expr: RuleExpr) -> str:
    """Fully parenthesised source text that parses back to an equal tree."""
    if isinstance(expr, Var):
        return f"${expr.name}"
    if isinstance(expr, IntLit):
        return str(expr.value)
    if isinstance(expr, SymLit):
        return expr.name
    if isinstance(expr, BoolLit):
        return "true" if expr.value else "false"
    if isinstance(expr, NoneLit):
        return "None"
    return f"({render(expr.left)} {expr.op} {render(expr.right)})"


def strategy_bindings(s: Strategy, train: TrainConfig) -> Dict[str, Value]:
    """Variables a rule may reference for one strategy."""
    params = s.params
    bindings: Dict[str, Value] = {name: getattr(params, name) for name in PARAM_FIELDS if name != "moe"}
    for alias, name in PARAM_ALIASES.items():
        bindings[alias] = bindings[name]
    moe = params.moe
    bindings.update(
        {
            "dp": params.dp,
            "data_parallel_size": params.dp,
            "num_gpus": s.num_gpus,
            "num_layers": s.arch.num_layers,
            "hidden_size": s.arch.hidden_size,
            "num_attention_heads": s.arch.num_heads,
            "global_batch": train.global_batch,
            "seq_len": train.seq_len,
            "num_microbatches": s.num_microbatches(train),
            "gpu_type": None if s.heterogeneous else s.gpu_config.gpu_type,
            "num_experts": moe.num_experts if moe is not None else None,
            "expert_model_parallel_size": moe.ep_size if moe is not None else None,
            "moe_router_topk": moe.topk if moe is not None else None,
        }
    )
    return bindings


def _kind(value: Value) -> str:
    if value is None:
        return "None"
    if isinstance(value, bool):
        return "boolean"
    if isinstance(value, int):
        return "integer"
    return "symbol"


def _checked(value: int, rule_name: str) -> int:
    if not INT64_MIN <= value <= INT64_MAX:
        raise RuleEvalError(f"integer overflow in rule '{rule_name}'", entity=rule_name)
    return value


def evaluate(expr: RuleExpr, bindings: Dict[str, Value], rule_name: str = "<expr>") -> Value:
    """Evaluate with short-circuit && and ||."""
    if isinstance(expr, Var):
        if expr.name not in bindings:
            raise RuleEvalError(f"unbound variable '${expr.name}' in rule '{rule_name}'", entity=rule_name)
        return bindings[expr.name]
    if isinstance(expr, IntLit):
        return expr.value
    if isinstance(expr, SymLit):
        return expr.name
    if isinstance(expr, BoolLit):
        return expr.value
    if isinstance(expr, NoneLit):
        return None

    op = expr.op
    left = evaluate(expr.left, bindings, rule_name)
    if op in LOGICAL_OPS:
        if not isinstance(left, bool):
            raise RuleEvalError(f"'{op}' needs booleans, got {_kind(left)} in rule '{rule_name}'", entity=rule_name)
        if (op == "&&" and not left) or (op == "||" and left):
            return left
        right = evaluate(expr.right, bindings, rule_name)
        if not isinstance(right, bool):
            raise RuleEvalError(f"'{op}' needs booleans, got {_kind(right)} in rule '{rule_name}'", entity=rule_name)
        return right

    right = evaluate(expr.right, bindings, rule_name)
    left_kind, right_kind = _kind(left), _kind(right)
    if op in EQUALITY_OPS:
        if left is None or right is None:
            equal = left is None and right is None
        elif left_kind != right_kind:
            raise RuleEvalError(
                f"cannot compare {left_kind} with {right_kind} in rule '{rule_name}'", entity=rule_name
            )
        else:
            equal = left == right
        return equal if op == "==" else not equal

    if left_kind != "integer" or right_kind != "integer":
        raise RuleEvalError(
            f"'{op}' needs integers, got {left_kind} and {right_kind} in rule '{rule_name}'", entity=rule_name
        )
    if op == "<":
        return left < right
    if op == "<=":
        return left <= right
    if op == ">":
        return left > right
    if op == ">=":
        return left >= right
    if op == "+":
        return _checked(left + right, rule_name)
    if op == "-":
        return _checked(left - right, rule_name)
    if op == "*":
        return _checked(left * right, rule_name)
    if right == 0:
        raise RuleEvalError(f"modulo by zero in rule '{rule_name}'", entity=rule_name)
    return left % right


def _matches(rule: Rule, bindings: Dict[str, Value]) -> bool:
    result = evaluate(rule.expr, bindings, rule.name)
    if not isinstance(result, bool):
        raise RuleEvalError(f"rule '{rule.name}' evaluated to {_kind(result)}, not a boolean", entity=rule.name)
    return result


def eval_rule(rule: Rule, s: Strategy, train: TrainConfig) -> bool:
    """True when the strategy matches the rule and must be dropped."""
    return _matches(rule, strategy_bindings(s, train))


def filter_by_rules(
    strategies: Iterable[Strategy],
    rules: RuleSet,
    train: TrainConfig,
    counters: Optional[Counter] = None,
) -> Iterator[Strategy]:
    """Pass strategies matching no rule; count drops under the first matching rule's name."""
    for s in strategies:
        if not rules.rules:
            yield s
            continue
        bindings = strategy_bindings(s, train)
        dropped_by = None
        for rule in rules:
            try:
                matched = _matches(rule, bindings)
            except RuleEvalError as exc:
                raise RuleEvalError(f"{exc.message} (strategy {s.id})", entity=s.id) from exc
            if matched:
                dropped_by = rule.name
                break
        if dropped_by is None:
            yield s
        elif counters is not None:
            counters[dropped_by] += 1
