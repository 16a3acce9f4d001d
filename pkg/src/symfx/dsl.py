"""Instruction-based representation of enhancement factors.

A Program is an ordered list of instructions operating on a workspace of
named features (read-only inputs), variables (read-write, zero-initialized,
with the distinguished output "F") and scalar/gamma parameters. Execution
follows IEEE semantics: division by zero and domain errors produce
inf/nan values that propagate; callers are responsible for detecting
non-finite results.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

# opcode -> (number of explicit inputs, reads own output, takes a gamma slot)
OPCODE_TABLE: dict[str, tuple[int, bool, bool]] = {
    "ADD": (2, False, False),
    "SUB": (2, False, False),
    "MUL": (2, False, False),
    "DIV": (2, False, False),
    "MULADD": (2, True, False),  # out <- out + in1 * in2
    "POW2": (1, False, False),
    "POW3": (1, False, False),
    "POW4": (1, False, False),
    "POW6": (1, False, False),
    "SQRT": (1, False, False),
    "CBRT": (1, False, False),
    "UTRANSFORM": (1, False, True),  # out <- g*in1 / (1 + g*in1)
    "FX_PBE": (1, False, False),
    "FX_RPBE": (1, False, False),
    "FX_B88": (1, False, False),
    "EC_PBE": (0, False, False),  # reads reserved density features
}

OPCODES = tuple(OPCODE_TABLE)

# Reserved feature names the EC_PBE building block reads directly.
DENSITY_FEATURES = ("rho_a", "rho_b", "x2_a", "x2_b")

# Standard constants of the exchange building blocks.
PBE_KAPPA = 0.804
PBE_MU = 0.21951
B88_BETA = 0.0042

# s^2 = x^2 / (4 (3 pi^2)^(2/3)) converts the reduced gradient convention.
_S2_PER_X2 = 1.0 / (4.0 * (3.0 * math.pi**2) ** (2.0 / 3.0))
_B88_CX = 0.75 * (6.0 / math.pi) ** (1.0 / 3.0)


class SchemaError(ValueError):
    """Program or workspace contents violate the schema."""


@dataclass(frozen=True)
class WorkspaceSchema:
    """Named symbol groups available to a program."""

    features: tuple[str, ...]
    variables: tuple[str, ...]
    scalar_params: tuple[str, ...] = ()
    gamma_params: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "features", tuple(self.features))
        object.__setattr__(self, "variables", tuple(self.variables))
        object.__setattr__(self, "scalar_params", tuple(self.scalar_params))
        object.__setattr__(self, "gamma_params", tuple(self.gamma_params))
        if "F" not in self.variables:
            raise SchemaError('schema must contain the output variable "F"')
        names = (
            self.features + self.variables + self.scalar_params + self.gamma_params
        )
        if len(set(names)) != len(names):
            raise SchemaError("symbol names must be unique across groups")

    @property
    def param_names(self) -> tuple[str, ...]:
        """Scalar then gamma parameters, in schema order."""
        return self.scalar_params + self.gamma_params

    @property
    def argument_names(self) -> tuple[str, ...]:
        """Symbols legal as instruction inputs (gammas excluded)."""
        return self.features + self.variables + self.scalar_params

    @property
    def has_density_features(self) -> bool:
        return all(name in self.features for name in DENSITY_FEATURES)


@dataclass(frozen=True)
class Instruction:
    opcode: str
    out: str
    in1: str | None = None
    in2: str | None = None
    gamma: str | None = None

    def arg_slots(self) -> tuple[str, ...]:
        """Names of the mutable input slots this opcode carries."""
        n_in, _, has_gamma = OPCODE_TABLE[self.opcode]
        slots = ("in1", "in2")[:n_in]
        return slots + ("gamma",) if has_gamma else slots


@dataclass(frozen=True)
class Program:
    schema: WorkspaceSchema
    instructions: tuple[Instruction, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "instructions", tuple(self.instructions))

    def __len__(self) -> int:
        return len(self.instructions)

    def replace_instructions(self, instructions) -> "Program":
        return Program(self.schema, tuple(instructions))


@dataclass(frozen=True)
class Violation:
    index: int  # instruction index, -1 for schema-level problems
    rule: str
    detail: str = ""


def validate(program: Program) -> list[Violation]:
    """Return all invariant violations; empty list means the program is valid."""
    schema = program.schema
    legal_inputs = set(schema.argument_names)
    variables = set(schema.variables)
    gammas = set(schema.gamma_params)
    out: list[Violation] = []
    for i, ins in enumerate(program.instructions):
        if ins.opcode not in OPCODE_TABLE:
            out.append(Violation(i, "unknown-opcode", ins.opcode))
            continue
        n_in, _, has_gamma = OPCODE_TABLE[ins.opcode]
        if ins.out not in variables:
            if ins.out in schema.features:
                out.append(Violation(i, "output-is-feature", ins.out))
            elif ins.out in schema.scalar_params or ins.out in gammas:
                out.append(Violation(i, "output-is-parameter", ins.out))
            else:
                out.append(Violation(i, "unknown-symbol", ins.out))
        for slot, name in (("in1", ins.in1), ("in2", ins.in2)):
            want = slot == "in1" and n_in >= 1 or slot == "in2" and n_in >= 2
            if want:
                if name is None:
                    out.append(Violation(i, "missing-argument", slot))
                elif name in gammas:
                    out.append(Violation(i, "gamma-as-argument", name))
                elif name not in legal_inputs:
                    out.append(Violation(i, "unknown-symbol", name))
            elif name is not None:
                out.append(Violation(i, "extra-argument", slot))
        if has_gamma:
            if ins.gamma is None:
                out.append(Violation(i, "missing-gamma", ""))
            elif ins.gamma not in gammas:
                out.append(Violation(i, "unknown-symbol", ins.gamma or ""))
        elif ins.gamma is not None:
            out.append(Violation(i, "extra-argument", "gamma"))
        if ins.opcode == "EC_PBE" and not schema.has_density_features:
            out.append(Violation(i, "density-features-unavailable", ""))
    return out


def _fx_pbe(x2):
    s2 = x2 * _S2_PER_X2
    return 1.0 + PBE_KAPPA - PBE_KAPPA / (1.0 + PBE_MU * s2 / PBE_KAPPA)


def _fx_rpbe(x2):
    s2 = x2 * _S2_PER_X2
    return 1.0 + PBE_KAPPA * (1.0 - np.exp(-PBE_MU * s2 / PBE_KAPPA))


def _fx_b88(x2):
    x = np.sqrt(x2)
    return 1.0 + B88_BETA * x2 / (_B88_CX * (1.0 + 6.0 * B88_BETA * x * np.arcsinh(x)))


def _ec_pbe(ws):
    # Lazy import: physics depends on dsl for closed-form program oracles.
    from .physics import pbe_correlation_from_features

    return pbe_correlation_from_features(
        ws["rho_a"], ws["rho_b"], ws["x2_a"], ws["x2_b"]
    )


def _apply(ins: Instruction, ws: dict) -> None:
    op = ins.opcode
    if op == "ADD":
        ws[ins.out] = ws[ins.in1] + ws[ins.in2]
    elif op == "SUB":
        ws[ins.out] = ws[ins.in1] - ws[ins.in2]
    elif op == "MUL":
        ws[ins.out] = ws[ins.in1] * ws[ins.in2]
    elif op == "DIV":
        ws[ins.out] = ws[ins.in1] / ws[ins.in2]
    elif op == "MULADD":
        ws[ins.out] = ws[ins.out] + ws[ins.in1] * ws[ins.in2]
    elif op == "POW2":
        v = ws[ins.in1]
        ws[ins.out] = v * v
    elif op == "POW3":
        v = ws[ins.in1]
        ws[ins.out] = v * v * v
    elif op == "POW4":
        v = ws[ins.in1]
        v2 = v * v
        ws[ins.out] = v2 * v2
    elif op == "POW6":
        v = ws[ins.in1]
        v2 = v * v
        ws[ins.out] = v2 * v2 * v2
    elif op == "SQRT":
        ws[ins.out] = np.sqrt(ws[ins.in1])
    elif op == "CBRT":
        ws[ins.out] = np.cbrt(ws[ins.in1])
    elif op == "UTRANSFORM":
        g = ws[ins.gamma]
        gv = g * ws[ins.in1]
        ws[ins.out] = gv / (1.0 + gv)
    elif op == "FX_PBE":
        ws[ins.out] = _fx_pbe(ws[ins.in1])
    elif op == "FX_RPBE":
        ws[ins.out] = _fx_rpbe(ws[ins.in1])
    elif op == "FX_B88":
        ws[ins.out] = _fx_b88(ws[ins.in1])
    elif op == "EC_PBE":
        ws[ins.out] = _ec_pbe(ws)
    else:  # pragma: no cover - validate() rejects these
        raise SchemaError(f"unknown opcode {op}")


def _check_coverage(program: Program, features, params) -> None:
    missing = [n for n in program.schema.features if n not in features]
    missing += [n for n in program.schema.param_names if n not in params]
    if missing:
        raise SchemaError(f"missing workspace values for {missing}")


def execute_batch(program: Program, feature_columns, params) -> np.ndarray:
    """Run the program once over column inputs.

    ``feature_columns`` maps feature names to equal-length arrays of G grid
    values; ``params`` maps parameter names to scalars, or to (P, 1) columns
    to evaluate P parameter sets in one pass (result then has shape (P, G)).
    """
    _check_coverage(program, feature_columns, params)
    cols = {k: np.asarray(v, dtype=np.float64) for k, v in feature_columns.items()}
    lengths = {v.shape[-1] for v in cols.values()}
    if len(lengths) > 1:
        raise SchemaError(f"feature columns disagree on length: {sorted(lengths)}")
    length = lengths.pop() if lengths else 0

    ws: dict = dict(cols)
    for name, value in params.items():
        ws[name] = np.asarray(value, dtype=np.float64)
    for name in program.schema.variables:
        ws[name] = np.float64(0.0)

    shape = np.broadcast_shapes(
        (length,), *(ws[n].shape for n in program.schema.param_names)
    )
    with np.errstate(all="ignore"):
        for ins in program.instructions:
            _apply(ins, ws)
        result = np.asarray(ws["F"], dtype=np.float64)
        if result.shape != shape:
            result = np.array(np.broadcast_to(result, shape))
    return result


def execute(program: Program, features, params) -> float:
    """Evaluate the program at a single point; returns the final "F"."""
    cols = {k: np.asarray([v], dtype=np.float64) for k, v in features.items()}
    return float(execute_batch(program, cols, params)[..., 0])


def live_instruction_indices(program: Program) -> set[int]:
    """Indices of instructions whose effects can reach the final "F"."""
    needed = {"F"}
    live: set[int] = set()
    for i in range(len(program.instructions) - 1, -1, -1):
        ins = program.instructions[i]
        _, reads_out, _ = OPCODE_TABLE[ins.opcode]
        if ins.out not in needed:
            continue
        live.add(i)
        if not reads_out:
            needed.discard(ins.out)
        reads = [n for n in (ins.in1, ins.in2) if n is not None]
        if ins.opcode == "EC_PBE":
            reads.extend(DENSITY_FEATURES)
        needed.update(n for n in reads if n in program.schema.variables)
        if reads_out:
            needed.add(ins.out)
    return live


def used_params(program: Program) -> tuple[str, ...]:
    """Parameters referenced by live instructions, in schema order."""
    live = live_instruction_indices(program)
    seen = set()
    for i in live:
        ins = program.instructions[i]
        for name in (ins.in1, ins.in2, ins.gamma):
            if name is not None:
                seen.add(name)
    return tuple(n for n in program.schema.param_names if n in seen)


# --- text serialization ------------------------------------------------
#
# Schema header (one group per line, comma separated), a "---" divider,
# then one instruction per line:  out = OPCODE(in1[, in2][; gamma])

def format_program(program: Program) -> str:
    s = program.schema
    lines = [
        "features: " + ", ".join(s.features),
        "variables: " + ", ".join(s.variables),
        "scalars: " + ", ".join(s.scalar_params),
        "gammas: " + ", ".join(s.gamma_params),
        "---",
    ]
    for ins in program.instructions:
        args = ", ".join(n for n in (ins.in1, ins.in2) if n is not None)
        if ins.gamma is not None:
            args += "; " + ins.gamma
        lines.append(f"{ins.out} = {ins.opcode}({args})")
    return "\n".join(lines) + "\n"


class ParseError(ValueError):
    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


def _parse_names(line_no: int, line: str, tag: str) -> tuple[str, ...]:
    prefix = tag + ":"
    if not line.startswith(prefix):
        raise ParseError(line_no, f"expected '{tag}:' header")
    body = line[len(prefix):].strip()
    return tuple(n.strip() for n in body.split(",") if n.strip())


def parse_program(text: str) -> Program:
    lines = [ln for ln in (raw.strip() for raw in text.splitlines()) if ln]
    if len(lines) < 5 or lines[4] != "---":
        raise ParseError(0, "expected 4 header lines followed by '---'")
    schema = WorkspaceSchema(
        features=_parse_names(1, lines[0], "features"),
        variables=_parse_names(2, lines[1], "variables"),
        scalar_params=_parse_names(3, lines[2], "scalars"),
        gamma_params=_parse_names(4, lines[3], "gammas"),
    )
    instructions = []
    for offset, line in enumerate(lines[5:], start=6):
        lhs, eq, rhs = line.partition("=")
        if not eq:
            raise ParseError(offset, "expected 'out = OPCODE(...)'")
        out = lhs.strip()
        rhs = rhs.strip()
        open_idx = rhs.find("(")
        if open_idx < 0 or not rhs.endswith(")"):
            raise ParseError(offset, "malformed instruction call")
        opcode = rhs[:open_idx].strip()
        if opcode not in OPCODE_TABLE:
            raise ParseError(offset, f"unknown opcode {opcode!r}")
        body = rhs[open_idx + 1 : -1]
        gamma = None
        if ";" in body:
            body, _, gpart = body.partition(";")
            gamma = gpart.strip() or None
        names = [n.strip() for n in body.split(",") if n.strip()]
        if len(names) > 2:
            raise ParseError(offset, "too many arguments")
        in1 = names[0] if len(names) >= 1 else None
        in2 = names[1] if len(names) >= 2 else None
        instructions.append(Instruction(opcode, out, in1, in2, gamma))
    program = Program(schema, tuple(instructions))
    problems = validate(program)
    if problems:
        v = problems[0]
        raise ParseError(6 + v.index, f"{v.rule} ({v.detail})")
    return program
