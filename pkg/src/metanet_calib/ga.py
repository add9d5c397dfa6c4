"""Genetic-algorithm baseline over the same parameter vector and loss."""

from __future__ import annotations

import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .calibration import CalibrationResult, _check_inputs, score_schedule
from .core import DEFAULT_OPTIONS, BoundaryConditions, ModelOptions, NetworkGeometry
from .objective import LossConfig, ObservedField, WindowObjective
from .params import Bounds, ParameterVector, default_free_mask, default_warm_start


@dataclass(frozen=True)
class GaConfig:
    population_size: int = 50
    crossover_rate: float = 0.8
    mutation_rate: float = 0.1
    mutation_scale: float = 0.1  # std of Gaussian mutation as a fraction of the bound range
    generations: int = 200
    elitism_count: int = 2
    tournament_size: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.population_size < 2:
            raise ValueError("population_size must be at least 2")
        if not 0 <= self.elitism_count < self.population_size:
            raise ValueError("elitism_count must be below population_size")
        if not (0 <= self.crossover_rate <= 1 and 0 <= self.mutation_rate <= 1):
            raise ValueError("crossover_rate and mutation_rate must lie in [0, 1]")
        if self.tournament_size < 1 or self.generations < 0:
            raise ValueError("tournament_size must be >= 1 and generations >= 0")


def _evaluate(objective, pop, pool):
    if pool is None:
        return np.array([objective.value(x) for x in pop])
    return np.array(list(pool.map(objective.value, list(pop))))


def calibrate_ga(observed: ObservedField, bc: BoundaryConditions, geom: NetworkGeometry, bounds: Bounds,
                 cfg: GaConfig = GaConfig(), *, warm_start=None, initial_population=None,
                 loss: LossConfig | None = None, options: ModelOptions = DEFAULT_OPTIONS,
                 free_mask=None, workers: int = 1) -> CalibrationResult:
    """Tournament selection, uniform crossover, clipped Gaussian mutation and elitism.

    The search runs on normalised coordinates. ``warm_start`` (if given) is
    placed in the initial population; ``initial_population`` is an optional
    ``(k, n)`` array of normalised individuals that replaces the first ``k``
    random ones.
    """
    t_start = time.perf_counter()
    mask = default_free_mask(geom) if free_mask is None else free_mask
    template_blocks = default_warm_start(geom) if warm_start is None else warm_start
    template = (template_blocks if isinstance(template_blocks, ParameterVector)
                else ParameterVector.from_blocks(np.clip(template_blocks, bounds.lower, bounds.upper), bounds, mask))
    _check_inputs(observed, bc, geom, bounds, template)
    obj = WindowObjective(observed, bc, geom, template, (0,), 0, observed.horizon,
                          loss=loss or LossConfig(), options=options)
    rng = np.random.default_rng(cfg.seed)
    n = len(template)
    pop = rng.random((cfg.population_size, n))
    k = 0
    if warm_start is not None:
        pop[0] = template.normalized()
        k = 1
    if initial_population is not None:
        init = np.clip(np.atleast_2d(np.asarray(initial_population, float)), 0.0, 1.0)
        m = min(len(init), cfg.population_size - k)
        pop[k:k + m] = init[:m]

    pool = ProcessPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        fit = _evaluate(obj, pop, pool)
        best_i = int(np.argmin(fit))
        best_x, best_f = pop[best_i].copy(), float(fit[best_i])
        trace = [best_f]
        for _ in range(cfg.generations):
            order = np.argsort(fit, kind="stable")
            children = [pop[i].copy() for i in order[:cfg.elitism_count]]
            while len(children) < cfg.population_size:
                parents = []
                for _ in range(2):
                    cand = rng.integers(0, cfg.population_size, cfg.tournament_size)
                    parents.append(pop[cand[np.argmin(fit[cand])]])
                if rng.random() < cfg.crossover_rate:
                    child = np.where(rng.random(n) < 0.5, parents[0], parents[1])
                else:
                    child = parents[0].copy()
                hit = rng.random(n) < cfg.mutation_rate
                child = np.clip(child + hit * rng.normal(0.0, cfg.mutation_scale, n), 0.0, 1.0)
                children.append(child)
            pop = np.array(children)
            fit = _evaluate(obj, pop, pool)
            i = int(np.argmin(fit))
            if fit[i] < best_f:
                best_x, best_f = pop[i].copy(), float(fit[i])
            trace.append(best_f)
    finally:
        if pool is not None:
            pool.shutdown()

    theta = template.with_normalized(best_x)
    schedule = theta.to_schedule()
    final_loss, final_mape = score_schedule(schedule, observed, bc, geom, loss, options)
    return CalibrationResult(
        method="ga",
        theta_star=theta,
        schedule=schedule,
        loss_trace=trace,
        final_loss=final_loss,
        final_mape=final_mape,
        iterations=cfg.generations,
        wall_time_s=time.perf_counter() - t_start,
        termination_reason="max-generations",
        warm_start_used=template,
        n_evaluations=cfg.population_size * (cfg.generations + 1),
        blowups=obj.n_blowups if pool is None else 0,
    )
