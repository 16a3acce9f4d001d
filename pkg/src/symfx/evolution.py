"""Regularized evolution over functional forms.

The population is a FIFO of trained individuals: tournament selection
picks parents by fitness, children are mutated, trained on the train
split, scored on the validation split, and inserted; once capacity is
exceeded the oldest individual is evicted regardless of fitness. A
fingerprint cache short-circuits training of value-equivalent forms.
Random-search mode is the same loop with tournament size 1.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .cmaes import CmaesConfig, fit_functional
from .fingerprint import combine_digests
from .forms import FunctionalForm
from .mutation import MutationConfig, mutate
from .objective import ObjectiveContext
from .physics import DEFAULT_OMEGA


@dataclass
class Individual:
    form: FunctionalForm
    params: np.ndarray
    fitness: float
    j_train: float
    j_val: float
    birth_index: int
    digests: tuple[int, int, int]
    evals_used: int = 0

    @property
    def digest(self) -> int:
        return combine_digests(self.digests)


@dataclass
class Population:
    capacity: int = 100
    members: list[Individual] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.members)

    def insert(self, ind: Individual) -> Individual | None:
        """Append a newborn; evict and return the oldest if over capacity."""
        self.members.append(ind)
        if len(self.members) > self.capacity:
            oldest = min(range(len(self.members)), key=lambda i: self.members[i].birth_index)
            return self.members.pop(oldest)
        return None


def tournament_select(pop: Population, k: int, rng) -> Individual:
    """Best-of-k by fitness; ties go to the younger individual."""
    if len(pop) == 0:
        raise ValueError("empty population")
    size = min(k, len(pop))
    idx = rng.choice(len(pop), size=size, replace=False)
    chosen = [pop.members[i] for i in idx]
    return max(chosen, key=lambda ind: (ind.fitness, ind.birth_index))


class FitnessCache:
    """First-write-wins map from digest triples to training outcomes."""

    def __init__(self):
        self._map: dict[tuple[int, int, int], tuple] = {}
        self.hits = 0
        self.misses = 0

    def lookup(self, digests):
        entry = self._map.get(tuple(digests))
        if entry is None:
            self.misses += 1
        else:
            self.hits += 1
        return entry

    def store(self, digests, fitness, j_train, j_val, params) -> None:
        self._map.setdefault(tuple(digests), (fitness, j_train, j_val, np.array(params)))

    def __len__(self) -> int:
        return len(self._map)


@dataclass
class HistoryRow:
    birth_index: int
    parent_digest: int
    child_digest: int
    j_train: float
    j_val: float
    evaluations_used: int
    wall_ms: float

    CSV_HEADER = "birth_index,parent_digest,child_digest,j_train,j_val,evaluations_used,wall_ms"

    def csv_line(self) -> str:
        return (
            f"{self.birth_index},{self.parent_digest:016x},{self.child_digest:016x},"
            f"{self.j_train:.10e},{self.j_val:.10e},{self.evaluations_used},"
            f"{self.wall_ms:.3f}"
        )


@dataclass
class SearchConfig:
    budget: int = 1000
    capacity: int = 100
    tournament_size: int = 25
    mode: str = "evolution"  # "evolution" | "random_search"
    seed: int = 0
    omega: float = DEFAULT_OMEGA
    mutation: MutationConfig = field(default_factory=MutationConfig)
    cmaes_sigma0: float = 0.5
    cmaes_population: int | None = None
    cmaes_max_evaluations: int = 2000
    cmaes_tol_fun: float = 1e-10
    cmaes_tol_window: int = 12
    cmaes_restarts: int = 5
    early_stop_j_val: float | None = None

    def __post_init__(self):
        if self.mode not in ("evolution", "random_search"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.mode == "random_search":
            self.tournament_size = 1
        if not 1 <= self.tournament_size <= self.capacity:
            raise ValueError("need 1 <= tournament_size <= capacity")
        if self.budget < 0:
            raise ValueError("budget must be nonnegative")

    def cmaes_for(self, dimension: int, seed: int) -> CmaesConfig:
        return CmaesConfig(
            dimension=dimension,
            population=self.cmaes_population,
            sigma0=self.cmaes_sigma0,
            max_evaluations=self.cmaes_max_evaluations,
            tol_fun=self.cmaes_tol_fun,
            tol_window=self.cmaes_tol_window,
            restarts=self.cmaes_restarts,
            seed=seed,
        )


def train_candidate(form, ctx: ObjectiveContext, cfg: SearchConfig, seed: int):
    """Fit parameters on the train split and score on the validation split.

    Returns (params, j_train, j_val, evaluations). Failures surface as the
    penalty objective value, never as exceptions.
    """
    fit = fit_functional(form, ctx, cfg.cmaes_for(form.n_params, seed))
    j_val = ctx.wrmsd(form, fit.params, "val")
    return fit.params, fit.j_train, j_val, fit.evaluations


def _training_seed(cfg_seed: int, birth_index: int) -> int:
    # stream tag 2 keeps training draws disjoint from the selection stream
    ss = np.random.SeedSequence(entropy=(cfg_seed, 2, birth_index))
    return int(ss.generate_state(1)[0])


@dataclass
class SearchState:
    population: Population
    cache: FitnessCache
    history: list[HistoryRow]
    best: Individual | None = None
    birth_counter: int = 0

    def note_best(self, ind: Individual) -> None:
        if self.best is None or ind.j_val < self.best.j_val:
            self.best = ind


@dataclass
class SearchResult:
    best: Individual
    history: list[HistoryRow]
    population: Population
    cache_hits: int
    cache_misses: int
    objective_evals: int

    def cumulative_min(self) -> list[tuple[int, float]]:
        out = []
        cur = float("inf")
        for row in self.history:
            cur = min(cur, row.j_val)
            out.append((row.birth_index, cur))
        return out


def seed_population(state: SearchState, seed_forms, ctx, cfg) -> None:
    """Train and insert the initial individuals through the same pipeline."""
    for form in seed_forms:
        t0 = time.perf_counter()
        birth = state.birth_counter
        state.birth_counter += 1
        params, j_train, j_val, evals = train_candidate(
            form, ctx, cfg, _training_seed(cfg.seed, birth)
        )
        ind = Individual(
            form, params, -j_val, j_train, j_val, birth, form.digests(), evals
        )
        state.cache.store(ind.digests, ind.fitness, j_train, j_val, params)
        state.population.insert(ind)
        state.note_best(ind)
        state.history.append(
            HistoryRow(
                birth, 0, ind.digest, j_train, j_val, evals,
                (time.perf_counter() - t0) * 1e3,
            )
        )


def evolve_step(state: SearchState, ctx, cfg: SearchConfig, rng) -> Individual:
    """Select, mutate, train (or reuse cached fitness), insert one child."""
    t0 = time.perf_counter()
    parent = tournament_select(state.population, cfg.tournament_size, rng)
    child_form = mutate(parent.form, cfg.mutation, rng)
    digests = child_form.digests()
    birth = state.birth_counter
    state.birth_counter += 1
    cached = state.cache.lookup(digests)
    if cached is not None:
        fitness, j_train, j_val, params = cached
        evals = 0
    else:
        params, j_train, j_val, evals = train_candidate(
            child_form, ctx, cfg, _training_seed(cfg.seed, birth)
        )
        fitness = -j_val
        state.cache.store(digests, fitness, j_train, j_val, params)
    child = Individual(child_form, params, fitness, j_train, j_val, birth, digests, evals)
    state.population.insert(child)
    state.note_best(child)
    state.history.append(
        HistoryRow(
            birth, parent.digest, child.digest, j_train, j_val, evals,
            (time.perf_counter() - t0) * 1e3,
        )
    )
    return child


def run_search(cfg: SearchConfig, dataset, seed_forms) -> SearchResult:
    """Single-process search: seeds, then ``budget`` mutation steps."""
    ctx = ObjectiveContext(dataset, cfg.omega)
    state = SearchState(Population(cfg.capacity), FitnessCache(), [])
    seed_population(state, seed_forms, ctx, cfg)
    rng = np.random.default_rng(np.random.SeedSequence(entropy=(cfg.seed, 1)))
    for _ in range(cfg.budget):
        evolve_step(state, ctx, cfg, rng)
        if (
            cfg.early_stop_j_val is not None
            and state.best is not None
            and state.best.j_val <= cfg.early_stop_j_val
        ):
            break
    return SearchResult(
        state.best,
        state.history,
        state.population,
        state.cache.hits,
        state.cache.misses,
        ctx.stats["objective_evals"],
    )
