"""Covariance matrix adaptation evolution strategy with box constraints.

Standard (mu/mu_w, lambda) CMA-ES: cumulative step-size adaptation plus
rank-one and rank-mu covariance updates. Candidates are projected onto
the box before evaluation and recombination; each restart starts from a
fresh unit-Gaussian mean. Used to fit functional parameters against the
training objective, but takes any objective callable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np


@dataclass
class CmaesConfig:
    dimension: int
    population: int | None = None  # default 4 + floor(3 ln n)
    sigma0: float = 0.5
    low: float = -10.0
    high: float = 10.0
    max_evaluations: int = 30_000
    tol_fun: float = 1e-12
    tol_window: int = 20
    restarts: int = 5
    seed: int = 0
    max_condition: float = 1e6

    def __post_init__(self):
        if self.dimension < 0:
            raise ValueError("dimension must be nonnegative")
        if self.low >= self.high:
            raise ValueError("bounds must satisfy low < high")
        if self.population is not None and self.population < 2:
            raise ValueError("population must be at least 2")

    @property
    def lam(self) -> int:
        if self.population is not None:
            return self.population
        return 4 + int(3 * math.log(max(self.dimension, 1)))


@dataclass
class MinimizeResult:
    x: np.ndarray
    value: float
    evaluations: int
    restarts_aborted: int = 0


def _run_restart(batch, cfg: CmaesConfig, rng, budget: int):
    n = cfg.dimension
    lam = cfg.lam
    mu = lam // 2
    raw = np.log((lam + 1.0) / 2.0) - np.log(np.arange(1, lam + 1))
    pos = raw[:mu]
    mueff = pos.sum() ** 2 / np.sum(pos**2)
    neg = raw[mu:]
    mueff_neg = neg.sum() ** 2 / np.sum(neg**2)

    cc = (4.0 + mueff / n) / (n + 4.0 + 2.0 * mueff / n)
    cs = (mueff + 2.0) / (n + mueff + 5.0)
    c1 = 2.0 / ((n + 1.3) ** 2 + mueff)
    cmu = min(1.0 - c1, 2.0 * (mueff - 2.0 + 1.0 / mueff) / ((n + 2.0) ** 2 + mueff))
    damps = 1.0 + 2.0 * max(0.0, math.sqrt((mueff - 1.0) / (n + 1.0)) - 1.0) + cs
    chi_n = math.sqrt(n) * (1.0 - 1.0 / (4.0 * n) + 1.0 / (21.0 * n * n))

    # active CMA: the worst candidates enter the covariance update with
    # negative weights, scaled to keep C positive definite in expectation
    alpha_neg = min(
        1.0 + c1 / cmu,
        1.0 + 2.0 * mueff_neg / (mueff + 2.0),
        (1.0 - c1 - cmu) / (n * cmu),
    )
    weights = raw.copy()
    weights[:mu] = pos / pos.sum()
    weights[mu:] = alpha_neg * neg / np.abs(neg).sum()
    w_sum_all = weights.sum()

    mean = np.clip(rng.standard_normal(n), cfg.low, cfg.high)
    sigma = cfg.sigma0
    cov = np.eye(n)
    basis = np.eye(n)
    scales = np.ones(n)
    inv_sqrt = np.eye(n)
    p_sigma = np.zeros(n)
    p_cov = np.zeros(n)

    best_x = mean.copy()
    best_val = math.inf
    evals = 0
    f_scale = 1.0
    gen_best: list[float] = []
    aborted = False

    while evals + lam <= budget:
        z = rng.standard_normal((lam, n))
        y = z * scales @ basis.T
        x = mean + sigma * y
        repaired = np.clip(x, cfg.low, cfg.high)
        raw = np.asarray(batch(repaired), dtype=np.float64)
        evals += lam
        finite = np.isfinite(raw)
        if not finite.any():
            aborted = True
            break
        raw = np.where(finite, raw, math.inf)
        # rank the unrepaired samples by value plus a quadratic repair
        # penalty; adapting on clipped samples stalls sigma at the box.
        f_scale = 0.9 * f_scale + 0.1 * float(np.median(raw[finite]))
        violation = np.sum((x - repaired) ** 2, axis=1)
        vals = raw + (1.0 + abs(f_scale)) * violation
        order = np.argsort(vals, kind="stable")
        if raw[order[0]] < best_val and violation[order[0]] == 0.0:
            best_val = float(raw[order[0]])
            best_x = repaired[order[0]].copy()
        gen_best.append(float(raw[order[0]]))
        window = gen_best[-cfg.tol_window:]
        if len(gen_best) >= cfg.tol_window and max(window) - min(window) < cfg.tol_fun:
            break

        elite = x[order[:mu]]
        new_mean = np.clip(weights[:mu] @ elite, cfg.low, cfg.high)
        y_w = (new_mean - mean) / sigma
        p_sigma = (1.0 - cs) * p_sigma + math.sqrt(cs * (2.0 - cs) * mueff) * (
            inv_sqrt @ y_w
        )
        gen = len(gen_best)
        h_norm = np.linalg.norm(p_sigma) / math.sqrt(
            1.0 - (1.0 - cs) ** (2.0 * gen)
        )
        h_sig = 1.0 if h_norm / chi_n < 1.4 + 2.0 / (n + 1.0) else 0.0
        p_cov = (1.0 - cc) * p_cov + h_sig * math.sqrt(cc * (2.0 - cc) * mueff) * y_w

        y_all = (x[order] - mean) / sigma
        w_adj = weights.copy()
        if n > 0:
            norms = np.sum((y_all @ inv_sqrt.T) ** 2, axis=1)
            negs = weights < 0
            w_adj[negs] = weights[negs] * n / np.maximum(norms[negs], 1e-30)
        rank_mu = (w_adj[:, None] * y_all).T @ y_all
        delta_hsig = (1.0 - h_sig) * cc * (2.0 - cc)
        cov = (
            (1.0 + c1 * delta_hsig - c1 - cmu * w_sum_all) * cov
            + c1 * np.outer(p_cov, p_cov)
            + cmu * rank_mu
        )
        sigma *= math.exp((cs / damps) * (np.linalg.norm(p_sigma) / chi_n - 1.0))
        if not math.isfinite(sigma) or sigma > 1e8:
            break
        mean = new_mean

        cov = (cov + cov.T) / 2.0
        eigvals, basis = np.linalg.eigh(cov)
        # positive-definiteness repair plus a condition cap: letting one
        # axis collapse freezes coordinates with steep cone-like slopes.
        floor = max(1e-14, float(eigvals.max()) / cfg.max_condition)
        eigvals = np.maximum(eigvals, floor)
        scales = np.sqrt(eigvals)
        inv_sqrt = (basis / scales) @ basis.T

    return best_x, best_val, evals, aborted


def minimize(f, cfg: CmaesConfig, batch=None) -> MinimizeResult:
    """Best parameters over ``cfg.restarts`` independent CMA-ES runs.

    ``f`` maps a parameter vector to a scalar; ``batch``, if given, maps a
    (P, n) matrix to P values and is used for whole generations.
    """
    if batch is None:
        batch = lambda xs: np.array([f(x) for x in xs])
    rng = np.random.default_rng(cfg.seed)
    if cfg.dimension == 0:
        empty = np.zeros(0)
        return MinimizeResult(empty, float(batch(empty[None])[0]), 1)

    best_x = np.zeros(cfg.dimension)
    best_val = math.inf
    total = 0
    aborted = 0
    for _ in range(max(1, cfg.restarts)):
        budget = max(cfg.lam, cfg.max_evaluations)
        x, val, used, did_abort = _run_restart(batch, cfg, rng, budget)
        total += used
        aborted += int(did_abort)
        if val < best_val:
            best_val = val
            best_x = x
    return MinimizeResult(best_x, best_val, total, aborted)


@dataclass
class FitResult:
    params: np.ndarray  # full flat vector, unused entries zero
    j_train: float
    evaluations: int


def fit_functional(form, ctx, cfg: CmaesConfig) -> FitResult:
    """Optimize the parameters a form actually uses against the train split.

    Parameters unreachable from live instructions are pinned to zero and
    excluded from the search dimensions.
    """
    used = form.used_param_indices()
    n_total = form.n_params
    n_used = len(used)
    fit_cfg = replace(cfg, dimension=n_used)

    def expand(matrix):
        full = np.zeros((matrix.shape[0], n_total))
        if n_used:
            full[:, used] = matrix
        return full

    def batch(matrix):
        return ctx.wrmsd_population(form, expand(np.atleast_2d(matrix)), "train")

    if n_used == 0:
        j = ctx.wrmsd(form, np.zeros(n_total), "train")
        return FitResult(np.zeros(n_total), j, 1)

    res = minimize(None, fit_cfg, batch=batch)
    full = expand(res.x[None, :])[0]
    if not math.isfinite(res.value):
        return FitResult(np.zeros(n_total), ctx.penalty, res.evaluations)
    return FitResult(full, res.value, res.evaluations)
