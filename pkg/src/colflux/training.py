"""Stochastic policy training with measurement selection.

Each iteration draws a small batch of (start state, noise vector) pairs
from the pools, evaluates the exact rollout gradient for every pair, and
applies an RMSProp update to the flat parameter vector. An optional
elastic-net penalty shrinks the whole vector and, through the selection
gate, exposes which measurements the controller actually needs; the
regularised workflow prunes the gate and retrains from the original
initialisation with the gate pinned.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, replace

import numpy as np

from .column import ColumnParams
from .diffsim import CostSample, SimConfig, batch_cost_gradient
from .policy import PRUNE_TOL, PolicyParams, PolicySpec, freeze_gate, prune_selection
from .sampling import InitialConditionPool, NoisePool, load_table

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Phase:
    """One stretch of the schedule: iterations, batch size, sample weight."""

    iterations: int
    batch_size: int = 1
    weight: float = 1.0

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.weight <= 0:
            raise ValueError("weight must be positive")


@dataclass(frozen=True)
class TrainConfig:
    """Schedule, optimiser constants, penalty and seeds for one training."""

    phases: tuple[Phase, ...] = (Phase(2000, 1, 1.0), Phase(750, 2, 0.5))
    lr: float = 0.001
    rho: float = 0.9
    eps: float = 1e-8
    elastic: tuple[float, float] | None = None
    draw_seed: int = 0
    init_seed: int = 0
    sim: SimConfig = SimConfig()
    workers: int = 1

    def __post_init__(self):
        if not self.phases:
            raise ValueError("schedule needs at least one phase")
        if self.lr <= 0 or not 0 <= self.rho < 1 or self.eps <= 0:
            raise ValueError("bad optimiser constants")
        if self.elastic is not None:
            l1, mix = self.elastic
            if l1 < 0 or not 0 <= mix <= 1:
                raise ValueError("elastic penalty needs l1 >= 0 and mix in [0, 1]")
        if self.workers < 1:
            raise ValueError("workers must be positive")

    @property
    def total_iterations(self) -> int:
        return sum(p.iterations for p in self.phases)


@dataclass(eq=False)
class TrainRecord:
    """Per-iteration objective, gradient norm and wall time, plus outcome.

    objective includes the penalty when one is active; grad_norm is the
    two-norm of the update direction actually fed to the optimiser.
    wall_ms is diagnostic timing and is the one column excluded from
    reproducibility comparisons.
    """

    objective: np.ndarray
    grad_norm: np.ndarray
    wall_ms: np.ndarray
    theta_final: np.ndarray
    selected: tuple[int, ...] | None = None

    def equals_deterministic(self, other: "TrainRecord") -> bool:
        return (
            np.array_equal(self.objective, other.objective)
            and np.array_equal(self.grad_norm, other.grad_norm)
            and np.array_equal(self.theta_final, other.theta_final)
            and self.selected == other.selected
        )

    def to_csv(self, path, include_wall: bool = True) -> None:
        """Write the record; include_wall=False omits the timing column.

        Timing is a measurement of the machine, not of the training run,
        so reproducible artifact pipelines drop it.
        """
        n = self.objective.size
        cols = [np.arange(n, dtype=np.float64), self.objective, self.grad_norm]
        names = "iteration,objective,grad_norm"
        if include_wall:
            cols.append(self.wall_ms)
            names += ",wall_ms"
        header = ""
        if self.selected is not None:
            header += f"# selected={','.join(str(s) for s in self.selected)}\n"
        header += f"# theta={','.join(repr(float(v)) for v in self.theta_final)}\n"
        header += names
        np.savetxt(path, np.column_stack(cols), fmt="%.17g", delimiter=",",
                   header=header, comments="")

    @classmethod
    def from_csv(cls, path) -> "TrainRecord":
        meta, names, arr = load_table(path)
        selected = None
        if "selected" in meta:
            selected = tuple(int(v) for v in meta["selected"].split(",") if v)
        theta = np.empty(0)
        if "theta" in meta:
            theta = np.array([float(v) for v in meta["theta"].split(",")])
        if "wall_ms" in names:
            wall = arr[:, names.index("wall_ms")].copy()
        else:
            wall = np.zeros(arr.shape[0])
        return cls(
            objective=arr[:, 1].copy(),
            grad_norm=arr[:, 2].copy(),
            wall_ms=wall,
            theta_final=theta,
            selected=selected,
        )


def rmsprop_step(
    nu: np.ndarray, theta: np.ndarray, grad: np.ndarray,
    lr: float, rho: float, eps: float,
) -> tuple[np.ndarray, np.ndarray]:
    """One RMSProp update; returns the new (accumulator, parameters)."""
    if not np.all(np.isfinite(grad)):
        bad = int(np.flatnonzero(~np.isfinite(grad))[0])
        raise FloatingPointError(f"non-finite gradient component at index {bad}")
    nu_new = rho * nu + (1.0 - rho) * grad * grad
    theta_new = theta - lr * grad / (np.sqrt(nu_new) + eps)
    return nu_new, theta_new


def elastic_penalty(
    theta: np.ndarray, l1: float, mix: float
) -> tuple[float, np.ndarray]:
    """Elastic-net value and subgradient; |.| takes subgradient 0 at 0."""
    value = l1 * (mix * np.abs(theta).sum() + 0.5 * (1.0 - mix) * theta @ theta)
    grad = l1 * (mix * np.sign(theta) + (1.0 - mix) * theta)
    return float(value), grad


def _draw_batch(
    rng: np.random.Generator,
    pool: InitialConditionPool,
    noise: NoisePool,
    phase: Phase,
) -> list[CostSample]:
    """Uniform with-replacement draws; state index then noise index."""
    batch = []
    for _ in range(phase.batch_size):
        i = int(rng.integers(0, len(pool)))
        j = int(rng.integers(0, len(noise)))
        batch.append(
            CostSample(
                state=pool.state(i),
                feed=pool.feed_at(i),
                eta=noise.eta[j].copy(),
                weight=phase.weight,
            )
        )
    return batch


def train(
    spec: PolicySpec,
    pool: InitialConditionPool,
    noise: NoisePool,
    config: TrainConfig,
    params: ColumnParams,
    init: PolicyParams | None = None,
) -> tuple[PolicyParams, TrainRecord]:
    """Run the schedule; returns the final parameters and the record.

    Identical config, seeds and pools reproduce the deterministic fields
    of the record exactly. Frozen selection-gate entries receive zero
    update. A non-finite objective or gradient aborts loudly.
    """
    pol = init if init is not None else PolicyParams.init(spec, config.init_seed)
    if pol.spec != spec:
        raise ValueError("initial parameters built for a different architecture")
    theta = pol.flatten()
    nu = np.zeros_like(theta)
    rng = np.random.default_rng(config.draw_seed)
    frozen = pol.frozen_theta_mask()

    total = config.total_iterations
    objective = np.empty(total)
    grad_norm = np.empty(total)
    wall_ms = np.empty(total)
    it = 0
    for phase in config.phases:
        for _ in range(phase.iterations):
            t0 = time.perf_counter()
            batch = _draw_batch(rng, pool, noise, phase)
            cur = pol.with_theta(theta)
            J, grad = batch_cost_gradient(
                cur, batch, params, config.sim, workers=config.workers
            )
            if config.elastic is not None:
                pen, pen_grad = elastic_penalty(theta, *config.elastic)
                J += pen
                grad = grad + pen_grad
            if frozen.any():
                grad[frozen] = 0.0
            if not np.isfinite(J):
                raise FloatingPointError(f"objective diverged at iteration {it}")
            nu, theta = rmsprop_step(
                nu, theta, grad, config.lr, config.rho, config.eps
            )
            objective[it] = J
            grad_norm[it] = np.sqrt(grad @ grad)
            wall_ms[it] = (time.perf_counter() - t0) * 1e3
            it += 1
            if it % 250 == 0:
                log.info("iteration %d/%d: objective %.3e", it, total, J)

    final = pol.with_theta(theta)
    record = TrainRecord(
        objective=objective,
        grad_norm=grad_norm,
        wall_ms=wall_ms,
        theta_final=theta.copy(),
    )
    return final, record


def regularized_workflow(
    spec: PolicySpec,
    pool: InitialConditionPool,
    noise: NoisePool,
    config: TrainConfig,
    params: ColumnParams,
    elastic: tuple[float, float] = (0.01, 0.99),
    prune_tol: float = PRUNE_TOL,
) -> tuple[PolicyParams, TrainRecord, tuple[int, ...]]:
    """Regularise, prune the selection gate, retrain with the gate pinned.

    Phase one trains under the elastic-net penalty from the seed
    initialisation. Gate entries below prune_tol are zeroed, and phase two
    restarts from the same initialisation with the pruned gate held fixed
    (no penalty; fresh draws from a shifted stream). Returns the retrained
    parameters, the retrain record, and the 1-based surviving input
    positions.
    """
    theta0 = PolicyParams.init(spec, config.init_seed)
    cfg_a = replace(config, elastic=elastic)
    shrunk, record_a = train(spec, pool, noise, cfg_a, params, init=theta0)
    pruned, selected = prune_selection(shrunk, prune_tol)
    if not selected:
        raise RuntimeError(
            "pruning removed every measurement "
            f"(tolerance {prune_tol}, gate range "
            f"[{np.abs(shrunk.h).min():.3e}, {np.abs(shrunk.h).max():.3e}]); "
            "nothing left to retrain"
        )
    log.info(
        "pruning kept %d of %d inputs: %s",
        len(selected), spec.n_inputs, list(selected),
    )

    restart = freeze_gate(
        replace(theta0, h=pruned.h.copy(), h_frozen=pruned.h_frozen.copy())
    )
    cfg_b = replace(config, elastic=None, draw_seed=config.draw_seed + 1)
    final, record_b = train(spec, pool, noise, cfg_b, params, init=restart)
    record_b.selected = selected
    return final, record_b, selected


def smoothed(values: np.ndarray, window: int = 100) -> np.ndarray:
    """Trailing moving average used for monitoring noisy objectives."""
    values = np.asarray(values, dtype=np.float64)
    if window < 1:
        raise ValueError("window must be positive")
    out = np.empty_like(values)
    c = np.cumsum(np.insert(values, 0, 0.0))
    for i in range(values.size):
        lo = max(0, i - window + 1)
        out[i] = (c[i + 1] - c[lo]) / (i + 1 - lo)
    return out
