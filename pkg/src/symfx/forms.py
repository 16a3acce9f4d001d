"""Functional forms: triplets of programs with a flat parameter layout.

A form holds one program per enhancement factor (exchange, same-spin
correlation, opposite-spin correlation). Scalar and gamma parameters
of the three programs are flattened into a single vector in factor order
(x, css, cos), each factor in schema order, for the parameter optimizer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dsl import Instruction, Program, WorkspaceSchema, used_params
from .fingerprint import ProbeSet, combine_digests, fingerprint

FACTORS = ("x", "css", "cos")


@dataclass(frozen=True)
class FunctionalForm:
    x: Program
    css: Program
    cos: Program

    def program(self, factor: str) -> Program:
        return getattr(self, factor)

    def replace(self, factor: str, program: Program) -> "FunctionalForm":
        parts = {f: self.program(f) for f in FACTORS}
        parts[factor] = program
        return FunctionalForm(**parts)

    @property
    def param_layout(self) -> tuple[tuple[str, str], ...]:
        """Flat (factor, name) order of the trainable parameters."""
        return tuple(
            (f, n) for f in FACTORS for n in self.program(f).schema.param_names
        )

    @property
    def n_params(self) -> int:
        return len(self.param_layout)

    def split_params(self, flat) -> dict[str, dict[str, float]]:
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape[-1] != self.n_params:
            raise ValueError(
                f"expected {self.n_params} parameters, got {flat.shape[-1]}"
            )
        out: dict[str, dict] = {f: {} for f in FACTORS}
        for i, (factor, name) in enumerate(self.param_layout):
            out[factor][name] = flat[..., i]
        return out

    def join_params(self, by_factor) -> np.ndarray:
        return np.array(
            [by_factor[f][n] for f, n in self.param_layout], dtype=np.float64
        )

    def used_param_indices(self) -> np.ndarray:
        """Flat indices of parameters that live instructions can reach."""
        used = {(f, n) for f in FACTORS for n in used_params(self.program(f))}
        return np.array(
            [i for i, key in enumerate(self.param_layout) if key in used], dtype=int
        )

    def digests(self, probe: ProbeSet | None = None) -> tuple[int, int, int]:
        return tuple(fingerprint(self.program(f), probe) for f in FACTORS)

    def digest(self, probe: ProbeSet | None = None) -> int:
        return combine_digests(self.digests(probe))

    def total_instructions(self) -> int:
        return sum(len(self.program(f)) for f in FACTORS)


# --- built-in programs ---------------------------------------------------

B97X_SCHEMA = WorkspaceSchema(
    features=("x2",),
    variables=("v0", "v1", "F"),
    scalar_params=("c0", "c1", "c2"),
    gamma_params=("gamma",),
)

# F = c0 + c1*u + c2*u^2 with u = gamma*x2 / (1 + gamma*x2)
_B97X_INSTRUCTIONS = (
    Instruction("UTRANSFORM", "v0", "x2", gamma="gamma"),
    Instruction("ADD", "F", "c0", "F"),
    Instruction("MULADD", "F", "c1", "v0"),
    Instruction("POW2", "v1", "v0"),
    Instruction("MULADD", "F", "c2", "v1"),
)

_MGGA_FEATURES = ("w", "x2")


def _mgga_schema(variables, scalars, spare_variables=0, spare_scalars=0):
    n = sum(1 for v in variables if v.startswith("v"))
    extra_v = tuple(f"v{n + i}" for i in range(spare_variables))
    extra_s = tuple(f"a{i}" for i in range(spare_scalars))
    return WorkspaceSchema(
        features=_MGGA_FEATURES,
        variables=tuple(variables) + extra_v,
        scalar_params=tuple(scalars) + extra_s,
        gamma_params=("gamma",),
    )


def _wb97mv_x_schema(spare_variables=0, spare_scalars=0):
    return _mgga_schema(
        ("F", "v0", "v1"), ("c00", "c10", "c01"), spare_variables, spare_scalars
    )


def _wb97mv_css_schema(spare_variables=0, spare_scalars=0):
    return _mgga_schema(
        ("F", "v0", "v1", "v2", "v3"),
        ("c00", "c10", "c20", "c43", "c04"),
        spare_variables,
        spare_scalars,
    )


def _wb97mv_cos_schema(spare_variables=0, spare_scalars=0):
    return _mgga_schema(
        ("F", "v0", "v1", "v2", "v3"),
        ("c00", "c10", "c20", "c21", "c60", "c61"),
        spare_variables,
        spare_scalars,
    )


# F = c00 + c10*w + c01*u
_WB97MV_X_INSTRUCTIONS = (
    Instruction("UTRANSFORM", "v0", "x2", gamma="gamma"),
    Instruction("ADD", "F", "c00", "F"),
    Instruction("MUL", "v1", "c10", "w"),
    Instruction("ADD", "F", "F", "v1"),
    Instruction("MUL", "v1", "c01", "v0"),
    Instruction("ADD", "F", "F", "v1"),
)

# F = c00 + c10*w + c20*w^2 + c43*w^4*u^3 + c04*u^4
_WB97MV_CSS_INSTRUCTIONS = (
    Instruction("UTRANSFORM", "v0", "x2", gamma="gamma"),
    Instruction("ADD", "F", "c00", "F"),
    Instruction("MULADD", "F", "c10", "w"),
    Instruction("POW2", "v1", "w"),
    Instruction("MULADD", "F", "c20", "v1"),
    Instruction("POW4", "v1", "w"),
    Instruction("POW3", "v2", "v0"),
    Instruction("MUL", "v3", "v1", "v2"),
    Instruction("MULADD", "F", "c43", "v3"),
    Instruction("POW4", "v2", "v0"),
    Instruction("MULADD", "F", "c04", "v2"),
)

# F = c00 + c10*w + c20*w^2 + c21*w^2*u + c60*w^6 + c61*w^6*u
_WB97MV_COS_INSTRUCTIONS = (
    Instruction("UTRANSFORM", "v0", "x2", gamma="gamma"),
    Instruction("ADD", "F", "c00", "F"),
    Instruction("MULADD", "F", "c10", "w"),
    Instruction("POW2", "v1", "w"),
    Instruction("MULADD", "F", "c20", "v1"),
    Instruction("MUL", "v3", "v1", "v0"),
    Instruction("MULADD", "F", "c21", "v3"),
    Instruction("POW6", "v1", "w"),
    Instruction("MULADD", "F", "c60", "v1"),
    Instruction("MUL", "v3", "v1", "v0"),
    Instruction("MULADD", "F", "c61", "v3"),
)

def builtin_program(
    name: str, spare_variables: int = 0, spare_scalars: int = 0
) -> Program:
    """Instruction sequences of the reference enhancement factors."""
    if name == "B97X":
        return Program(B97X_SCHEMA, _B97X_INSTRUCTIONS)
    if name == "WB97MV_X":
        schema = _wb97mv_x_schema(spare_variables, spare_scalars)
        return Program(schema, _WB97MV_X_INSTRUCTIONS)
    if name == "WB97MV_CSS":
        schema = _wb97mv_css_schema(spare_variables, spare_scalars)
        return Program(schema, _WB97MV_CSS_INSTRUCTIONS)
    if name == "WB97MV_COS":
        schema = _wb97mv_cos_schema(spare_variables, spare_scalars)
        return Program(schema, _WB97MV_COS_INSTRUCTIONS)
    raise KeyError(f"unknown builtin program {name!r}")


def wb97mv_form(spare_variables: int = 2, spare_scalars: int = 2) -> FunctionalForm:
    """The power-series meta-GGA seed form, with configurable spare capacity."""
    return FunctionalForm(
        x=builtin_program("WB97MV_X", spare_variables, spare_scalars),
        css=builtin_program("WB97MV_CSS", spare_variables, spare_scalars),
        cos=builtin_program("WB97MV_COS", spare_variables, spare_scalars),
    )


def b97x_form() -> FunctionalForm:
    """Exchange-only form: the reference 5-instruction exchange program."""
    return FunctionalForm(
        x=builtin_program("B97X"),
        css=Program(_zero_schema()),
        cos=Program(_zero_schema()),
    )


def _zero_schema() -> WorkspaceSchema:
    return WorkspaceSchema(features=_MGGA_FEATURES, variables=("F",))


def rediscovery_schema(
    n_scalars: int = 4, n_gammas: int = 1, n_variables: int = 3
) -> WorkspaceSchema:
    """Search workspace for the exchange-rediscovery experiment."""
    return WorkspaceSchema(
        features=("x2",),
        variables=tuple(f"v{i}" for i in range(n_variables - 1)) + ("F",),
        scalar_params=tuple(f"c{i}" for i in range(n_scalars)),
        gamma_params=tuple(
            "gamma" if i == 0 else f"gamma{i}" for i in range(n_gammas)
        ),
    )


def empty_rediscovery_form(schema: WorkspaceSchema | None = None) -> FunctionalForm:
    """Empty exchange program (constant zero) with inert correlation factors."""
    return FunctionalForm(
        x=Program(schema or rediscovery_schema()),
        css=Program(_zero_schema()),
        cos=Program(_zero_schema()),
    )


def form_to_dict(form: FunctionalForm) -> dict:
    """Text-serialized programs per factor (wire and file format)."""
    from .dsl import format_program

    return {f: format_program(form.program(f)) for f in FACTORS}


def form_from_dict(d: dict) -> FunctionalForm:
    from .dsl import parse_program

    return FunctionalForm(**{f: parse_program(d[f]) for f in FACTORS})
