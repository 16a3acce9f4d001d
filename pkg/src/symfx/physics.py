"""Semilocal exchange-correlation assembly on density grids.

All quantities are in Hartree atomic units. Energies are assembled
non-self-consistently: grids carry fixed spin densities, gradient norms
and kinetic-energy densities; enhancement factors multiply short-range
LDA exchange and Stoll-partitioned LSDA correlation energy densities.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import erf

HARTREE_TO_KCAL = 627.509474

# Channels below this density contribute nothing and get zeroed features,
# so grid tails cannot poison parameter training.
RHO_FLOOR = 1e-12

LDA_X_COEF = -0.75 * (6.0 / math.pi) ** (1.0 / 3.0)
TAU_HEG_COEF = 0.3 * (6.0 * math.pi**2) ** (2.0 / 3.0)
X2_PER_S2 = 4.0 * (3.0 * math.pi**2) ** (2.0 / 3.0)

DEFAULT_OMEGA = 0.3


@dataclass
class GridDensities:
    """Per-point quadrature weights and spin-resolved density data."""

    w: np.ndarray
    rho_a: np.ndarray
    rho_b: np.ndarray
    grad_a: np.ndarray
    grad_b: np.ndarray
    tau_a: np.ndarray
    tau_b: np.ndarray

    def __post_init__(self):
        for name in ("w", "rho_a", "rho_b", "grad_a", "grad_b", "tau_a", "tau_b"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))

    @property
    def n_points(self) -> int:
        return self.w.shape[0]

    def swap_spin(self) -> "GridDensities":
        return GridDensities(
            self.w, self.rho_b, self.rho_a, self.grad_b, self.grad_a,
            self.tau_b, self.tau_a,
        )


@dataclass
class DerivedFeatures:
    """Parameter-independent columns entering enhancement factors."""

    x2_a: np.ndarray
    x2_b: np.ndarray
    w_a: np.ndarray
    w_b: np.ndarray
    x2_ave: np.ndarray
    w_ave: np.ndarray
    e_x_sr_a: np.ndarray
    e_x_sr_b: np.ndarray
    e_css_a: np.ndarray
    e_css_b: np.ndarray
    e_cos: np.ndarray

    COLUMNS = (
        "x2_a", "x2_b", "w_a", "w_b", "x2_ave", "w_ave",
        "e_x_sr_a", "e_x_sr_b", "e_css_a", "e_css_b", "e_cos",
    )


def lda_exchange_per_spin(rho_sigma) -> np.ndarray:
    """Spin-scaled LDA exchange energy density, -(3/4)(6/pi)^(1/3) rho^(4/3)."""
    rho = np.asarray(rho_sigma, dtype=np.float64)
    if np.any(rho < 0):
        raise ValueError("negative spin density")
    return LDA_X_COEF * rho ** (4.0 / 3.0)


def sr_attenuation(a_sigma) -> np.ndarray:
    """Short-range attenuation of LDA exchange; 1 at a=0, ~1/(9a^2) for large a."""
    a = np.asarray(a_sigma, dtype=np.float64)
    if np.any(a < 0):
        raise ValueError("attenuation argument must be nonnegative")
    with np.errstate(divide="ignore", over="ignore"):
        inv = np.where(a > 0, 1.0 / np.where(a > 0, a, 1.0), np.inf)
        a2 = a * a
        a3 = a2 * a
        direct = 1.0 - (2.0 / 3.0) * a * (
            2.0 * math.sqrt(math.pi) * erf(inv)
            - 3.0 * a
            + a3
            + (2.0 * a - a3) * np.exp(-inv * inv)
        )
    # The direct expression cancels catastrophically for large a.
    with np.errstate(divide="ignore", invalid="ignore"):
        tail = 1.0 / (9.0 * a2) - 1.0 / (60.0 * a2 * a2)
    out = np.where(a > 100.0, tail, direct)
    return np.clip(out, 0.0, 1.0)


# Uniform-gas correlation parametrization (unpolarized, polarized, spin
# stiffness fits sharing one rational form).
_PW92_SETS = {
    "eps0": (0.031091, 0.21370, 7.5957, 3.5876, 1.6382, 0.49294),
    "eps1": (0.015545, 0.20548, 14.1189, 6.1977, 3.3662, 0.62517),
    "alpha": (0.016887, 0.11125, 10.357, 3.6231, 0.88026, 0.49671),
}
_F_DD0 = 8.0 / (9.0 * (2.0 ** (4.0 / 3.0) - 2.0))


def _pw92_g(rs, which: str) -> np.ndarray:
    A, a1, b1, b2, b3, b4 = _PW92_SETS[which]
    sqrs = np.sqrt(rs)
    den = 2.0 * A * (b1 * sqrs + b2 * rs + b3 * rs * sqrs + b4 * rs * rs)
    return -2.0 * A * (1.0 + a1 * rs) * np.log1p(1.0 / den)


def pw92_epsilon(rs, zeta) -> np.ndarray:
    """Correlation energy per electron of the uniform gas."""
    rs = np.asarray(rs, dtype=np.float64)
    z = np.asarray(zeta, dtype=np.float64)
    e0 = _pw92_g(rs, "eps0")
    e1 = _pw92_g(rs, "eps1")
    alpha = -_pw92_g(rs, "alpha")
    f = (np.power(1.0 + z, 4.0 / 3.0) + np.power(1.0 - z, 4.0 / 3.0) - 2.0) / (
        2.0 ** (4.0 / 3.0) - 2.0
    )
    z2 = z * z
    z4 = z2 * z2
    return e0 + alpha * f / _F_DD0 * (1.0 - z4) + (e1 - e0) * f * z4


def lsda_correlation(rho_a, rho_b) -> np.ndarray:
    """Uniform-gas correlation energy density for the given spin densities."""
    ra = np.asarray(rho_a, dtype=np.float64)
    rb = np.asarray(rho_b, dtype=np.float64)
    if np.any(ra < 0) or np.any(rb < 0):
        raise ValueError("negative spin density")
    rho = ra + rb
    ok = rho > 0
    rho_safe = np.where(ok, rho, 1.0)
    rs = (3.0 / (4.0 * math.pi * rho_safe)) ** (1.0 / 3.0)
    zeta = np.clip((ra - rb) / rho_safe, -1.0, 1.0)
    e = rho_safe * pw92_epsilon(rs, zeta)
    return np.where(ok, e, 0.0)


def stoll_split(rho_a, rho_b):
    """Same-spin and opposite-spin pieces of the LSDA correlation density."""
    ra = np.asarray(rho_a, dtype=np.float64)
    rb = np.asarray(rho_b, dtype=np.float64)
    e_css_a = lsda_correlation(ra, np.zeros_like(ra))
    e_css_b = lsda_correlation(rb, np.zeros_like(rb))
    e_cos = lsda_correlation(ra, rb) - (e_css_a + e_css_b)
    return e_css_a, e_css_b, e_cos


def _channel_features(rho, grad, tau, mask):
    rho_safe = np.where(mask, rho, 1.0)
    x = grad * rho_safe ** (-4.0 / 3.0)
    x2 = np.where(mask, x * x, 0.0)
    tau_heg = TAU_HEG_COEF * rho_safe ** (5.0 / 3.0)
    # (t-1)/(t+1) with t = tau_heg/tau, written to stay finite at tau = 0
    w = np.where(mask, (tau_heg - tau) / (tau_heg + tau), 0.0)
    return x2, w, np.where(mask, tau_heg, 1.0)


def derived_features(dens: GridDensities, omega: float) -> DerivedFeatures:
    """All parameter-independent feature and energy-density columns."""
    mask_a = dens.rho_a >= RHO_FLOOR
    mask_b = dens.rho_b >= RHO_FLOOR
    ra = np.where(mask_a, dens.rho_a, 0.0)
    rb = np.where(mask_b, dens.rho_b, 0.0)

    x2_a, w_a, heg_a = _channel_features(ra, dens.grad_a, dens.tau_a, mask_a)
    x2_b, w_b, heg_b = _channel_features(rb, dens.grad_b, dens.tau_b, mask_b)
    x2_ave = 0.5 * (x2_a + x2_b)

    # t_sigma = tau_heg/tau as a p/q pair; masked channels behave as t = 1.
    pa = np.where(mask_a, heg_a, 1.0)
    qa = np.where(mask_a, dens.tau_a, 1.0)
    pb = np.where(mask_b, heg_b, 1.0)
    qb = np.where(mask_b, dens.tau_b, 1.0)
    num = pa * qb + pb * qa
    den = num + 2.0 * (qa * qb)
    w_ave = np.where(den > 0, (num - 2.0 * (qa * qb)) / np.where(den > 0, den, 1.0), 1.0)

    e_x_sr_a = _sr_exchange(ra, mask_a, omega)
    e_x_sr_b = _sr_exchange(rb, mask_b, omega)
    e_css_a, e_css_b, e_cos = stoll_split(ra, rb)
    return DerivedFeatures(
        x2_a, x2_b, w_a, w_b, x2_ave, w_ave,
        e_x_sr_a, e_x_sr_b, e_css_a, e_css_b, e_cos,
    )


def _sr_exchange(rho, mask, omega):
    e_x = lda_exchange_per_spin(rho)
    if omega == 0.0:
        return e_x
    rho_safe = np.where(mask, rho, 1.0)
    k_f = (6.0 * math.pi**2 * rho_safe) ** (1.0 / 3.0)
    att = sr_attenuation(omega / k_f)
    return np.where(mask, e_x * att, 0.0)


def pbe_correlation_from_features(rho_a, rho_b, x2_a, x2_b) -> np.ndarray:
    """PBE correlation energy density from workspace density features.

    The total gradient norm is reconstructed assuming parallel channel
    gradients, which is exact for the radially scaled synthetic densities.
    """
    beta = 0.06672455060314922
    gamma = (1.0 - math.log(2.0)) / math.pi**2
    ra = np.maximum(np.asarray(rho_a, dtype=np.float64), 0.0)
    rb = np.maximum(np.asarray(rho_b, dtype=np.float64), 0.0)
    rho = ra + rb
    ok = rho > RHO_FLOOR
    rho_s = np.where(ok, rho, 1.0)
    grad = np.sqrt(np.maximum(x2_a, 0.0)) * ra ** (4.0 / 3.0) + np.sqrt(
        np.maximum(x2_b, 0.0)
    ) * rb ** (4.0 / 3.0)
    rs = (3.0 / (4.0 * math.pi * rho_s)) ** (1.0 / 3.0)
    zeta = np.clip((ra - rb) / rho_s, -1.0, 1.0)
    phi = 0.5 * (
        np.power(1.0 + zeta, 2.0 / 3.0) + np.power(1.0 - zeta, 2.0 / 3.0)
    )
    eps = pw92_epsilon(rs, zeta)
    k_f = (3.0 * math.pi**2 * rho_s) ** (1.0 / 3.0)
    k_s = np.sqrt(4.0 * k_f / math.pi)
    t2 = (grad / (2.0 * phi * k_s * rho_s)) ** 2
    phi3 = phi**3
    with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
        expo = np.exp(-eps / (gamma * phi3)) - 1.0
        a_coef = beta / gamma / np.where(expo != 0, expo, 1e-300)
        at2 = a_coef * t2
        h_arg = (beta / gamma) * t2 * (1.0 + at2) / (1.0 + at2 + at2 * at2)
        h = gamma * phi3 * np.log1p(h_arg)
        e = rho_s * (eps + h)
    return np.where(ok, np.where(np.isfinite(e), e, 0.0), 0.0)


# --- bound evaluators ----------------------------------------------------

FACTOR_KINDS = ("x", "css", "cos")


class BoundForm:
    """A functional form with fixed parameter values per factor."""

    def __init__(self, form, params_by_factor):
        self.form = form
        self.params = params_by_factor

    def factor_values(self, factor: str, x2, w, extra=None) -> np.ndarray:
        from .dsl import execute_batch

        program = self.form.program(factor)
        columns = {"x2": x2, "w": w}
        if extra:
            columns.update(extra)
        columns = {k: v for k, v in columns.items() if k in program.schema.features}
        return execute_batch(program, columns, self.params[factor])


def bind_form(form, params) -> BoundForm:
    """Bind a flat parameter vector (or per-factor dict) to a form."""
    if not isinstance(params, dict):
        params = form.split_params(params)
    return BoundForm(form, params)


def exc_sl(bound, dens: GridDensities, omega: float = DEFAULT_OMEGA) -> float:
    """Semilocal XC energy of one system grid."""
    feats = derived_features(dens, omega)
    return exc_sl_from_features(bound, feats, dens.w, extra=_extra_columns(dens))


def _extra_columns(dens: GridDensities):
    return {"rho_a": dens.rho_a, "rho_b": dens.rho_b}


def exc_sl_from_features(bound, f: DerivedFeatures, w_g, extra=None) -> float:
    """Integrate enhancement-weighted energy densities over the grid."""
    extra = extra or {}
    extra_a = dict(extra)
    extra_a.update({"x2_a": f.x2_a, "x2_b": f.x2_b})
    fx_a = bound.factor_values("x", f.x2_a, f.w_a, extra_a)
    fx_b = bound.factor_values("x", f.x2_b, f.w_b, extra_a)
    fc_a = bound.factor_values("css", f.x2_a, f.w_a, extra_a)
    fc_b = bound.factor_values("css", f.x2_b, f.w_b, extra_a)
    fo = bound.factor_values("cos", f.x2_ave, f.w_ave, extra_a)
    integrand = (
        (f.e_x_sr_a * fx_a + f.e_x_sr_b * fx_b)
        + (f.e_css_a * fc_a + f.e_css_b * fc_b)
        + f.e_cos * fo
    )
    return float(np.sum(w_g * integrand, axis=-1))


# --- closed-form reference functionals -----------------------------------


def _u(p, x2):
    g = p["gamma"]
    gx = g * np.asarray(x2, dtype=np.float64)
    return gx / (1.0 + gx)


def _zero(p, x2, w):
    return np.zeros(np.broadcast_shapes(np.shape(x2), np.shape(w)))


def _b97x_x(p, x2, w):
    # association mirrors the 5-instruction program exactly (bitwise)
    u = _u(p, x2)
    return p["c0"] + p["c1"] * u + p["c2"] * (u * u)


def _wb97mv_x(p, x2, w):
    return p["c00"] + p["c10"] * w + p["c01"] * _u(p, x2)


def _wb97mv_css(p, x2, w):
    # association mirrors the 11-instruction program exactly (bitwise)
    u = _u(p, x2)
    w2 = w * w
    u2 = u * u
    return (
        p["c00"]
        + p["c10"] * w
        + p["c20"] * w2
        + p["c43"] * ((w2 * w2) * (u2 * u))
        + p["c04"] * (u2 * u2)
    )


def _wb97mv_cos(p, x2, w):
    # association mirrors the 11-instruction program exactly (bitwise)
    u = _u(p, x2)
    w2 = w * w
    w6 = w2 * w2 * w2
    return (
        p["c00"]
        + p["c10"] * w
        + p["c20"] * w2
        + p["c21"] * (w2 * u)
        + p["c60"] * w6
        + p["c61"] * (w6 * u)
    )


def _gas22_x(p, x2, w):
    return p["c0"] + p["c1"] * w + p["c2"] * _u(p, x2)


def _gas22_css(p, x2, w):
    u = _u(p, x2)
    w2 = w * w
    u6 = (u * u * u) ** 2
    return p["c1"] * w + p["c2"] * w2 + p["c3"] * (w2 * w2) * u6 + p["c4"] * u6 + u


def _gas22_cos(p, x2, w):
    w2 = w * w
    w6 = w2 * w2 * w2
    xr = np.cbrt(np.asarray(x2, dtype=np.float64))
    return p["c0"] + p["c2"] * w2 + p["c3"] * w6 + p["c4"] * w6 * xr + p["c5"] * w2 * xr


def _gas22b_css(p, x2, w):
    u = _u(p, x2)
    w2 = w * w
    u2 = u * u
    return (
        p["c1"] * w
        + p["c2"] * w2
        + p["c3"] * (w2 * w2) * (u2 * u2 * u2)
        + p["c4"] * (u2 * u2)
        + u
    )


GAS22_PARAMS = {
    "x": {
        "c0": 0.862139736374172,
        "c1": 0.317533683085033,
        "c2": 0.936993691972698,
        "gamma": 0.003840616724010807,
    },
    "css": {
        "c1": -4.10753796482853,
        "c2": -5.24218990333846,
        "c3": 7.5380689617542,
        "c4": -1.76643208454076,
        "gamma": 0.46914023462026644,
    },
    "cos": {
        "c0": 0.805124374375355,
        "c2": 7.98909430970845,
        "c3": -7.54815900595292,
        "c4": 2.00093961824784,
        "c5": -1.76098915061634,
    },
}

B97X_PARAMS = {
    "x": {"c0": 0.8094, "c1": 0.5073, "c2": 0.7481, "gamma": 0.004},
    "css": {},
    "cos": {},
}

# Default seed coefficients for the power-series meta-GGA form. These are
# artifact defaults for dataset generation and curve comparison; searches
# re-optimize every parameter on the training split before use.
WB97MV_PARAMS = {
    "x": {"c00": 0.85, "c10": 1.007, "c01": 0.259, "gamma": 0.004},
    "css": {
        "c00": 0.443,
        "c10": -1.437,
        "c20": -4.535,
        "c43": -1.187,
        "c04": -4.08,
        "gamma": 0.2,
    },
    "cos": {
        "c00": 1.0,
        "c10": 1.358,
        "c20": 2.924,
        "c21": -1.39,
        "c60": -8.812,
        "c61": 9.142,
        "gamma": 0.006,
    },
}


@dataclass(frozen=True)
class ClosedForm:
    """Direct formulas for the three enhancement factors of one functional."""

    name: str
    fns: dict
    defaults: dict | None

    def factor_values(self, factor: str, x2, w, extra=None, params=None):
        p = params if params is not None else (self.defaults or {}).get(factor)
        if p is None:
            raise KeyError(f"{self.name} has no default parameters; pass params")
        return np.asarray(self.fns[factor](p, x2, w), dtype=np.float64)

    def bind(self, params_by_factor=None) -> "BoundClosedForm":
        params = params_by_factor or self.defaults
        if params is None:
            raise KeyError(f"{self.name} has no default parameters; pass params")
        return BoundClosedForm(self, params)


@dataclass(frozen=True)
class BoundClosedForm:
    closed: ClosedForm
    params: dict

    def factor_values(self, factor: str, x2, w, extra=None):
        return self.closed.factor_values(factor, x2, w, params=self.params[factor])


_CLOSED_FORMS = {
    "B97X": ({"x": _b97x_x, "css": _zero, "cos": _zero}, B97X_PARAMS),
    "WB97MV": (
        {"x": _wb97mv_x, "css": _wb97mv_css, "cos": _wb97mv_cos},
        WB97MV_PARAMS,
    ),
    "GAS22A": (
        {"x": _wb97mv_x, "css": _wb97mv_css, "cos": _wb97mv_cos},
        WB97MV_PARAMS,
    ),
    "GAS22B": ({"x": _gas22_x, "css": _gas22b_css, "cos": _wb97mv_cos}, None),
    "GAS22C": ({"x": _gas22_x, "css": _gas22_css, "cos": _gas22_cos}, GAS22_PARAMS),
    "GAS22": ({"x": _gas22_x, "css": _gas22_css, "cos": _gas22_cos}, GAS22_PARAMS),
}


def closed_form(name: str) -> ClosedForm:
    """Reference enhancement-factor formulas usable as oracles and targets."""
    try:
        fns, defaults = _CLOSED_FORMS[name.upper()]
    except KeyError:
        raise KeyError(f"unknown closed form {name!r}") from None
    return ClosedForm(name.upper(), fns, defaults)


def fxc_curves(bound, s_values, w_values, rs_values):
    """Total XC enhancement over full LDA at closed-shell reference points.

    Returns rows (w, rs, s, fxc) for each combination, iterating s fastest.
    """
    rows = []
    s_values = np.asarray(s_values, dtype=np.float64)
    x2 = X2_PER_S2 * s_values * s_values
    for w_val in w_values:
        w_col = np.full_like(s_values, float(w_val))
        for rs in rs_values:
            if rs <= 0:
                raise ValueError("rs must be positive")
            rho = 3.0 / (4.0 * math.pi * rs**3)
            rho_sigma = np.full_like(s_values, rho / 2.0)
            e_x = 2.0 * lda_exchange_per_spin(rho_sigma)
            e_css_a, e_css_b, e_cos = stoll_split(rho_sigma, rho_sigma)
            num = (
                e_x * bound.factor_values("x", x2, w_col)
                + (e_css_a + e_css_b) * bound.factor_values("css", x2, w_col)
                + e_cos * bound.factor_values("cos", x2, w_col)
            )
            den = e_x + (e_css_a + e_css_b) + e_cos
            fxc = num / den
            rows.extend(
                (float(w_val), float(rs), float(s), float(v))
                for s, v in zip(s_values, fxc)
            )
    return rows
