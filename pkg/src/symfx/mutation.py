"""Mutation rules over functional forms.

Each mutation picks one enhancement factor and applies exactly one of
four rules: insert an instruction, remove one, change an instruction's
operation, or change one argument. Inapplicable draws (removal from an
empty program, insertion at capacity, no alternative symbol) are
resampled; after ``max_attempts`` failures the parent is returned
unchanged and the caller's fingerprint cache absorbs the duplicate.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dsl import OPCODE_TABLE, OPCODES, Instruction, Program, validate
from .forms import FACTORS, FunctionalForm

RULES = ("insert", "remove", "change_op", "change_arg")

# Arithmetic 5 x 0.06, powers 6 x 0.05, the u-transform 0.1, four
# building blocks 0.075 each; sums to exactly 1.
DEFAULT_INSTRUCTION_PROBS = {
    "ADD": 0.06, "SUB": 0.06, "MUL": 0.06, "DIV": 0.06, "MULADD": 0.06,
    "POW2": 0.05, "POW3": 0.05, "POW4": 0.05, "POW6": 0.05,
    "SQRT": 0.05, "CBRT": 0.05,
    "UTRANSFORM": 0.10,
    "FX_PBE": 0.075, "FX_RPBE": 0.075, "FX_B88": 0.075, "EC_PBE": 0.075,
}

# Proof-of-principle subset used for the exchange rediscovery runs.
B97_SUBSET_PROBS = {"ADD": 0.25, "MULADD": 0.25, "POW2": 0.25, "UTRANSFORM": 0.25}


@dataclass
class MutationConfig:
    max_instructions: int = 24
    rule_weights: tuple[float, float, float, float] = (1.0, 1.0, 1.0, 1.0)
    instruction_probs: dict[str, float] = field(
        default_factory=lambda: dict(DEFAULT_INSTRUCTION_PROBS)
    )
    mutable_factors: tuple[str, ...] = FACTORS
    max_attempts: int = 100

    def __post_init__(self):
        if self.max_instructions < 1:
            raise ValueError("max_instructions must be positive")
        total = sum(self.instruction_probs.values())
        if abs(total - 1.0) > 1e-12:
            raise ValueError(f"instruction_probs sum to {total}, expected 1.0")
        unknown = set(self.instruction_probs) - set(OPCODES)
        if unknown:
            raise ValueError(f"unknown opcodes {sorted(unknown)}")
        if any(w < 0 for w in self.rule_weights) or sum(self.rule_weights) <= 0:
            raise ValueError("rule_weights must be nonnegative with positive sum")
        bad = [f for f in self.mutable_factors if f not in FACTORS]
        if bad:
            raise ValueError(f"unknown factors {bad}")

    @property
    def opcode_order(self) -> tuple[str, ...]:
        return tuple(op for op in OPCODES if op in self.instruction_probs)


def _sample_opcode(cfg: MutationConfig, schema, rng, exclude=None):
    names, probs = [], []
    for op in cfg.opcode_order:
        if op == exclude:
            continue
        if op == "EC_PBE" and not schema.has_density_features:
            continue
        if OPCODE_TABLE[op][2] and not schema.gamma_params:
            continue
        names.append(op)
        probs.append(cfg.instruction_probs[op])
    if not names:
        return None
    p = np.asarray(probs)
    return names[rng.choice(len(names), p=p / p.sum())]


def _choice(rng, seq):
    return seq[rng.integers(len(seq))]


def _fill_args(opcode, schema, rng, in1=None, in2=None, gamma=None):
    n_in, _, has_gamma = OPCODE_TABLE[opcode]
    args = schema.argument_names
    out_in1 = in1 if n_in >= 1 and in1 is not None else (
        _choice(rng, args) if n_in >= 1 else None
    )
    out_in2 = in2 if n_in >= 2 and in2 is not None else (
        _choice(rng, args) if n_in >= 2 else None
    )
    out_gamma = gamma if has_gamma and gamma is not None else (
        _choice(rng, schema.gamma_params) if has_gamma else None
    )
    return out_in1, out_in2, out_gamma


def rule_insert(program: Program, cfg: MutationConfig, rng) -> Program | None:
    if len(program) >= cfg.max_instructions:
        return None
    schema = program.schema
    opcode = _sample_opcode(cfg, schema, rng)
    if opcode is None:
        return None
    pos = int(rng.integers(len(program) + 1))
    out = _choice(rng, schema.variables)
    in1, in2, gamma = _fill_args(opcode, schema, rng)
    ins = Instruction(opcode, out, in1, in2, gamma)
    new = list(program.instructions)
    new.insert(pos, ins)
    return program.replace_instructions(new)


def rule_remove(program: Program, cfg: MutationConfig, rng) -> Program | None:
    if len(program) == 0:
        return None
    idx = int(rng.integers(len(program)))
    new = list(program.instructions)
    del new[idx]
    return program.replace_instructions(new)


def rule_change_op(program: Program, cfg: MutationConfig, rng) -> Program | None:
    if len(program) == 0:
        return None
    idx = int(rng.integers(len(program)))
    old = program.instructions[idx]
    opcode = _sample_opcode(cfg, program.schema, rng, exclude=old.opcode)
    if opcode is None:
        return None
    n_in, _, has_gamma = OPCODE_TABLE[opcode]
    in1, in2, gamma = _fill_args(
        opcode,
        program.schema,
        rng,
        in1=old.in1 if n_in >= 1 else None,
        in2=old.in2 if n_in >= 2 else None,
        gamma=old.gamma if has_gamma else None,
    )
    new = list(program.instructions)
    new[idx] = Instruction(opcode, old.out, in1, in2, gamma)
    return program.replace_instructions(new)


def rule_change_arg(program: Program, cfg: MutationConfig, rng) -> Program | None:
    if len(program) == 0:
        return None
    idx = int(rng.integers(len(program)))
    ins = program.instructions[idx]
    slots = ins.arg_slots()
    if not slots:
        return None
    slot = _choice(rng, slots)
    schema = program.schema
    pool = schema.gamma_params if slot == "gamma" else schema.argument_names
    current = getattr(ins, slot)
    candidates = [n for n in pool if n != current]
    if not candidates:
        return None
    value = _choice(rng, candidates)
    new = list(program.instructions)
    new[idx] = Instruction(
        ins.opcode,
        ins.out,
        value if slot == "in1" else ins.in1,
        value if slot == "in2" else ins.in2,
        value if slot == "gamma" else ins.gamma,
    )
    return program.replace_instructions(new)


_RULE_FNS = {
    "insert": rule_insert,
    "remove": rule_remove,
    "change_op": rule_change_op,
    "change_arg": rule_change_arg,
}


def mutate(form: FunctionalForm, cfg: MutationConfig, rng) -> FunctionalForm:
    """One applied rule on one uniformly chosen enhancement factor.

    Returns the parent unchanged if no applicable mutation is found within
    ``cfg.max_attempts`` draws.
    """
    weights = np.asarray(cfg.rule_weights, dtype=np.float64)
    weights = weights / weights.sum()
    for _ in range(cfg.max_attempts):
        factor = _choice(rng, cfg.mutable_factors)
        rule = RULES[rng.choice(len(RULES), p=weights)]
        candidate = _RULE_FNS[rule](form.program(factor), cfg, rng)
        if candidate is None or validate(candidate):
            continue
        return form.replace(factor, candidate)
    return form
