"""Weighted-RMSD objective over property records.

The training loop evaluates one functional form for whole populations of
parameter vectors; per split, all referenced systems' feature columns are
stacked once so a P-vector batch needs a single interpreter pass per
enhancement factor. Summation orders are fixed (records by id, terms in
stored order, grid points in stack order) so results are bit-reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataset import Dataset, PropertyRecord, exc_from_cache
from .physics import DEFAULT_OMEGA, HARTREE_TO_KCAL, bind_form

PENALTY = 1e10


@dataclass
class SplitBundle:
    records: list[PropertyRecord]
    system_ids: list[str]
    e_base: np.ndarray  # (n_sys,)
    weights: np.ndarray  # (n_rec,)
    e_ref: np.ndarray  # (n_rec,) kcal/mol
    terms: list[list[tuple[int, float]]]  # per record: (system index, coeff)
    # channel stack: [sys0 alpha | sys0 beta | sys1 alpha | ...]
    spin_x2: np.ndarray
    spin_w: np.ndarray
    spin_starts: np.ndarray
    coef_x: np.ndarray  # quadrature weight times e_x_sr per channel row
    coef_css: np.ndarray
    # spin-averaged stack: [sys0 | sys1 | ...]
    ave_x2: np.ndarray
    ave_w: np.ndarray
    ave_starts: np.ndarray
    coef_cos: np.ndarray
    spin_extra: dict
    ave_extra: dict
    total_points: int


def _build_bundle(dataset: Dataset, cache, split: str) -> SplitBundle:
    records = sorted(dataset.split_records(split), key=lambda r: r.record_id)
    if not records:
        raise ValueError(f"split {split!r} is empty")
    system_ids = sorted({sid for r in records for sid, _ in r.terms})
    index = {sid: i for i, sid in enumerate(system_ids)}

    spin_x2, spin_w, coef_x, coef_css = [], [], [], []
    ave_x2, ave_w, coef_cos = [], [], []
    spin_extra = {k: [] for k in ("rho_a", "rho_b", "x2_a", "x2_b")}
    ave_extra = {k: [] for k in ("rho_a", "rho_b", "x2_a", "x2_b")}
    spin_starts, ave_starts = [], []
    spin_pos = ave_pos = 0
    e_base = np.empty(len(system_ids))
    total_points = 0
    for i, sid in enumerate(system_ids):
        sf = cache.systems[sid]
        f = sf.feats
        e_base[i] = sf.e_base
        g = sf.w.shape[0]
        total_points += g
        spin_starts.append(spin_pos)
        ave_starts.append(ave_pos)
        spin_pos += 2 * g
        ave_pos += g
        spin_x2 += [f.x2_a, f.x2_b]
        spin_w += [f.w_a, f.w_b]
        coef_x += [sf.w * f.e_x_sr_a, sf.w * f.e_x_sr_b]
        coef_css += [sf.w * f.e_css_a, sf.w * f.e_css_b]
        ave_x2.append(f.x2_ave)
        ave_w.append(f.w_ave)
        coef_cos.append(sf.w * f.e_cos)
        for key in spin_extra:
            col = sf.extra_columns[key]
            spin_extra[key] += [col, col]
            ave_extra[key].append(col)

    terms = [[(index[sid], c) for sid, c in r.terms] for r in records]
    return SplitBundle(
        records=records,
        system_ids=system_ids,
        e_base=e_base,
        weights=np.array([r.weight for r in records]),
        e_ref=np.array([r.e_ref for r in records]),
        terms=terms,
        spin_x2=np.concatenate(spin_x2),
        spin_w=np.concatenate(spin_w),
        spin_starts=np.array(spin_starts, dtype=np.intp),
        coef_x=np.concatenate(coef_x),
        coef_css=np.concatenate(coef_css),
        ave_x2=np.concatenate(ave_x2),
        ave_w=np.concatenate(ave_w),
        ave_starts=np.array(ave_starts, dtype=np.intp),
        coef_cos=np.concatenate(coef_cos),
        spin_extra={k: np.concatenate(v) for k, v in spin_extra.items()},
        ave_extra={k: np.concatenate(v) for k, v in ave_extra.items()},
        total_points=total_points,
    )


class ObjectiveContext:
    """Shared read-only evaluation state for one dataset and omega."""

    def __init__(self, dataset: Dataset, omega: float | None = None,
                 penalty: float = PENALTY):
        self.dataset = dataset
        self.omega = dataset.metadata.get("omega", DEFAULT_OMEGA) if omega is None else omega
        self.penalty = penalty
        self.cache = dataset.features(self.omega)
        self.stats = {"objective_evals": 0, "point_touches": 0}
        self._bundles: dict[str, SplitBundle] = {}

    def bundle(self, split: str) -> SplitBundle:
        b = self._bundles.get(split)
        if b is None:
            b = _build_bundle(self.dataset, self.cache, split)
            self._bundles[split] = b
        return b

    # --- energies ---------------------------------------------------------

    def total_energy(self, form, params, system_id: str) -> float:
        """e_base plus the semilocal XC energy of one system."""
        sf = self.cache.systems[system_id]
        return sf.e_base + exc_from_cache(bind_form(form, params), sf)

    def _factor_columns(self, program, bundle, factor):
        if factor == "cos":
            cols = {"x2": bundle.ave_x2, "w": bundle.ave_w}
            extra = bundle.ave_extra
        else:
            cols = {"x2": bundle.spin_x2, "w": bundle.spin_w}
            extra = bundle.spin_extra
        cols.update(extra)
        return {k: v for k, v in cols.items() if k in program.schema.features}

    def system_energies(self, form, params_matrix, split: str) -> np.ndarray:
        """Total energies, shape (P, n_systems), for P parameter vectors."""
        from .dsl import execute_batch

        bundle = self.bundle(split)
        pm = np.asarray(params_matrix, dtype=np.float64)
        by_factor = form.split_params(pm)
        e_sys = np.broadcast_to(bundle.e_base, (pm.shape[0], len(bundle.system_ids)))
        e_sys = np.array(e_sys)
        for factor, starts, coef in (
            ("x", bundle.spin_starts, bundle.coef_x),
            ("css", bundle.spin_starts, bundle.coef_css),
            ("cos", bundle.ave_starts, bundle.coef_cos),
        ):
            program = form.program(factor)
            cols = self._factor_columns(program, bundle, factor)
            params = {n: v[:, None] for n, v in by_factor[factor].items()}
            fvals = execute_batch(program, cols, params)
            e_sys += np.add.reduceat(fvals * coef, starts, axis=-1)
        self.stats["objective_evals"] += pm.shape[0]
        self.stats["point_touches"] += pm.shape[0] * bundle.total_points
        return e_sys

    # --- objectives -------------------------------------------------------

    def wrmsd_population(self, form, params_matrix, split: str) -> np.ndarray:
        pm = np.atleast_2d(np.asarray(params_matrix, dtype=np.float64))
        bundle = self.bundle(split)
        e_sys = self.system_energies(form, pm, split)
        n_rec = len(bundle.records)
        e_rec = np.zeros((pm.shape[0], n_rec))
        for j, terms in enumerate(bundle.terms):
            for sys_idx, coeff in terms:
                e_rec[:, j] += coeff * e_sys[:, sys_idx]
        err = e_rec * HARTREE_TO_KCAL - bundle.e_ref
        j_val = np.sqrt(np.sum(bundle.weights * err * err, axis=-1) / n_rec)
        bad = ~np.all(np.isfinite(e_rec), axis=-1)
        j_val[bad] = self.penalty
        return j_val

    def wrmsd(self, form, params, split: str) -> float:
        flat = np.asarray(params, dtype=np.float64)
        return float(self.wrmsd_population(form, flat[None, :], split)[0])

    def fitness(self, form, params) -> float:
        """Negative validation error of a trained form."""
        return -self.wrmsd(form, params, "val")
