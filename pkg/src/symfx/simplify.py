"""Reduce a program to a printable expression tree.

Forward symbolic execution inlines variables, which drops dead code for
free; smart constructors fold constant subtrees (zero-initialized
variables, identities). Parameters stay symbolic. No general algebraic
rewriting is attempted.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import dsl
from .dsl import Instruction, Program

_POWER_EXP = {"POW2": 2, "POW3": 3, "POW4": 4, "POW6": 6}
_UNARY_FN = {
    "SQRT": np.sqrt,
    "CBRT": np.cbrt,
    "FX_PBE": dsl._fx_pbe,
    "FX_RPBE": dsl._fx_rpbe,
    "FX_B88": dsl._fx_b88,
}


@dataclass(frozen=True)
class Expr:
    """One expression node: 'const', 'sym', binary/unary ops, 'utransform'."""

    op: str
    args: tuple = ()
    value: float | None = None  # const payload
    name: str | None = None  # symbol name, or gamma name for utransform

    def is_const(self, v: float | None = None) -> bool:
        return self.op == "const" and (v is None or self.value == v)


def const(v: float) -> Expr:
    return Expr("const", value=float(v))


def sym(name: str) -> Expr:
    return Expr("sym", name=name)


ZERO = const(0.0)


def add(a: Expr, b: Expr) -> Expr:
    if a.is_const() and b.is_const():
        return const(a.value + b.value)
    if a.is_const(0.0):
        return b
    if b.is_const(0.0):
        return a
    return Expr("add", (a, b))


def sub(a: Expr, b: Expr) -> Expr:
    if a.is_const() and b.is_const():
        return const(a.value - b.value)
    if b.is_const(0.0):
        return a
    return Expr("sub", (a, b))


def mul(a: Expr, b: Expr) -> Expr:
    if a.is_const() and b.is_const():
        return const(a.value * b.value)
    if a.is_const(0.0) or b.is_const(0.0):
        return ZERO
    if a.is_const(1.0):
        return b
    if b.is_const(1.0):
        return a
    return Expr("mul", (a, b))


def div(a: Expr, b: Expr) -> Expr:
    if a.is_const() and b.is_const() and b.value != 0.0:
        return const(a.value / b.value)
    if a.is_const(0.0):
        return ZERO
    if b.is_const(1.0):
        return a
    return Expr("div", (a, b))


def power(a: Expr, n: int) -> Expr:
    if a.is_const():
        return const(a.value**n)
    return Expr("pow", (a,), value=float(n))


def unary(op: str, a: Expr) -> Expr:
    if a.is_const():
        return const(float(_UNARY_FN[op](a.value)))
    return Expr(op.lower(), (a,))


def utransform(a: Expr, gamma_name: str) -> Expr:
    if a.is_const(0.0):
        return ZERO
    return Expr("utransform", (a,), name=gamma_name)


def simplify_to_expression(program: Program) -> Expr:
    """Expression for the final "F" over features and named parameters."""
    env: dict[str, Expr] = {v: ZERO for v in program.schema.variables}
    for name in program.schema.features:
        env[name] = sym(name)
    for name in program.schema.param_names:
        env[name] = sym(name)
    for ins in program.instructions:
        env[ins.out] = _step(ins, env)
    return env["F"]


def _step(ins: Instruction, env) -> Expr:
    op = ins.opcode
    if op == "ADD":
        return add(env[ins.in1], env[ins.in2])
    if op == "SUB":
        return sub(env[ins.in1], env[ins.in2])
    if op == "MUL":
        return mul(env[ins.in1], env[ins.in2])
    if op == "DIV":
        return div(env[ins.in1], env[ins.in2])
    if op == "MULADD":
        return add(env[ins.out], mul(env[ins.in1], env[ins.in2]))
    if op in _POWER_EXP:
        return power(env[ins.in1], _POWER_EXP[op])
    if op in _UNARY_FN:
        return unary(op, env[ins.in1])
    if op == "UTRANSFORM":
        return utransform(env[ins.in1], ins.gamma)
    if op == "EC_PBE":
        return Expr("ec_pbe", tuple(sym(n) for n in dsl.DENSITY_FEATURES))
    raise dsl.SchemaError(f"unknown opcode {op}")


def evaluate(expr: Expr, env: dict[str, float]) -> float:
    """Numeric value of an expression tree; used to check semantics."""
    with np.errstate(all="ignore"):
        return float(_eval(expr, env))


def _eval(expr: Expr, env):
    if expr.op == "const":
        return expr.value
    if expr.op == "sym":
        return env[expr.name]
    a = _eval(expr.args[0], env)
    if expr.op == "pow":
        return float(np.float64(a) ** int(expr.value))
    if expr.op == "utransform":
        gv = env[expr.name] * a
        return gv / (1.0 + gv)
    if expr.op in ("sqrt", "cbrt", "fx_pbe", "fx_rpbe", "fx_b88"):
        return float(_UNARY_FN[expr.op.upper()](np.float64(a)))
    if expr.op == "ec_pbe":
        from .physics import pbe_correlation_from_features

        vals = [env[s.name] for s in expr.args]
        return float(pbe_correlation_from_features(*map(np.float64, vals)))
    b = _eval(expr.args[1], env)
    if expr.op == "add":
        return a + b
    if expr.op == "sub":
        return a - b
    if expr.op == "mul":
        return a * b
    if expr.op == "div":
        return np.float64(a) / np.float64(b)
    raise ValueError(f"unknown node {expr.op}")


_PRECEDENCE = {"add": 1, "sub": 1, "mul": 2, "div": 2}


def to_text(expr: Expr, values: dict[str, float] | None = None) -> str:
    """Infix rendering; ``values`` substitutes parameter names if given."""
    return _fmt(expr, 0, values or {})


def _fmt_const(v: float) -> str:
    if v == int(v) and abs(v) < 1e16:
        return str(int(v))
    return format(v, "g")


def _fmt(e: Expr, parent_prec: int, values) -> str:
    if e.op == "const":
        return _fmt_const(e.value)
    if e.op == "sym":
        if e.name in values:
            return _fmt_const(values[e.name])
        return e.name
    if e.op == "pow":
        base = _fmt(e.args[0], 3, values)
        return f"{base}^{int(e.value)}"
    if e.op == "utransform":
        g = _fmt_const(values[e.name]) if e.name in values else e.name
        return f"u[{g}]({_fmt(e.args[0], 0, values)})"
    if e.op in ("sqrt", "cbrt", "fx_pbe", "fx_rpbe", "fx_b88", "ec_pbe"):
        inner = ", ".join(_fmt(a, 0, values) for a in e.args)
        return f"{e.op}({inner})"
    prec = _PRECEDENCE[e.op]
    glyph = {"add": " + ", "sub": " - ", "mul": "*", "div": "/"}[e.op]
    left = _fmt(e.args[0], prec, values)
    # right child needs parens at equal precedence for - and /
    right = _fmt(e.args[1], prec + (1 if e.op in ("sub", "div") else 0), values)
    text = left + glyph + right
    if prec < parent_prec:
        return f"({text})"
    return text
