"""Full-state-feedback receding-horizon benchmark controller.

Each solve is a single-shooting optimal control problem on a fixed RK4 grid:
piecewise-constant controls on coarse intervals, squashed into the box
(0, u_max) by a tanh map so the search is unconstrained, gradients from the
discrete adjoint of the rollout, and L-BFGS as the outer loop. The feed seen
at solve time is held constant over the prediction horizon.

The receding-horizon wrapper keeps the previous solution as a warm start
(shifted by one interval, last interval repeated) and falls back to the
previously applied control when a solve comes back unusable.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import minimize

from . import _kernels as _k
from .column import ColumnParams, ColumnState, Controls, FeedConditions
from .diffsim import X_BOTTOM_TARGET, X_TOP_TARGET, SimConfig, cost_vector

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class OcpConfig:
    """Horizon discretisation, optimiser settings and regulation targets."""

    horizon: float = 20.0
    dt: float = 0.5
    h: float = 0.005
    max_iter: int = 150
    gtol: float = 1e-8
    maxcor: int = 10
    x_bottom_target: float = X_BOTTOM_TARGET
    x_top_target: float = X_TOP_TARGET

    def __post_init__(self):
        if self.horizon <= 0 or self.dt <= 0 or self.h <= 0:
            raise ValueError("horizon, dt and h must be positive")
        n_iv = round(self.horizon / self.dt)
        if abs(self.horizon - n_iv * self.dt) > 1e-9:
            raise ValueError("horizon must be an integer multiple of dt")
        spi = round(self.dt / self.h)
        if abs(self.dt - spi * self.h) > 1e-9:
            raise ValueError("dt must be an integer multiple of h")
        if self.max_iter < 1:
            raise ValueError("max_iter must be positive")

    @property
    def n_intervals(self) -> int:
        return round(self.horizon / self.dt)

    @property
    def steps_per_interval(self) -> int:
        return round(self.dt / self.h)

    @property
    def n_steps(self) -> int:
        return self.n_intervals * self.steps_per_interval


@dataclass(frozen=True, eq=False)
class ControlSequence:
    """Piecewise-constant controls over the prediction horizon.

    converged / n_iter describe the solve that produced the sequence.
    """

    u: np.ndarray
    converged: bool = True
    n_iter: int = 0

    def __post_init__(self):
        u = np.asarray(self.u, dtype=np.float64)
        object.__setattr__(self, "u", u)
        if u.ndim != 2 or u.shape[1] != 2:
            raise ValueError("control sequence must have shape (n_intervals, 2)")
        if not np.all(np.isfinite(u)):
            raise ValueError("control sequence contains non-finite entries")

    @classmethod
    def constant(cls, controls: Controls, n_intervals: int) -> "ControlSequence":
        return cls(u=np.tile(controls.as_array(), (n_intervals, 1)))

    def first(self) -> Controls:
        return Controls(float(self.u[0, 0]), float(self.u[0, 1]))

    def shifted(self) -> "ControlSequence":
        """Drop the applied interval; repeat the final one."""
        return replace(self, u=np.vstack([self.u[1:], self.u[-1:]]))


def _squash(v: np.ndarray, u_max: np.ndarray) -> np.ndarray:
    return 0.5 * u_max * (1.0 + np.tanh(v))


def _unsquash(u: np.ndarray, u_max: np.ndarray) -> np.ndarray:
    r = np.clip(2.0 * u / u_max - 1.0, -1.0 + 1e-12, 1.0 - 1e-12)
    return np.arctanh(r)


def solve_ocp(
    state: ColumnState,
    feed: FeedConditions,
    warm: ControlSequence | None,
    params: ColumnParams,
    config: OcpConfig,
) -> tuple[ControlSequence, float]:
    """Minimise the horizon cost; deterministic for fixed inputs.

    The returned cost never exceeds the warm start's cost (the optimiser
    starts there and only accepts decreases). A rollout that hits the
    holdup singularity inside a line search is reported to the optimiser
    as an infinite value, which shrinks the step.
    """
    n_iv = config.n_intervals
    spi = config.steps_per_interval
    n_steps = config.n_steps
    u_max = np.asarray(params.u_max)
    cp = params.pack()
    sim = SimConfig(
        t_f=config.horizon, h=config.h,
        x_bottom_target=config.x_bottom_target,
        x_top_target=config.x_top_target,
    )
    cc = cost_vector(sim, params)
    z0 = state.as_vector()
    fv = feed.as_array()
    n2 = 2 * params.N_T
    Z = np.empty((n_steps + 1, n2))
    ubar = np.empty((n_iv, 2))
    nf0 = params.N_F - 1

    if warm is None:
        warm = ControlSequence.constant(Controls.nominal(params), n_iv)
    if warm.u.shape[0] != n_iv:
        raise ValueError(
            f"warm start has {warm.u.shape[0]} intervals, config wants {n_iv}"
        )

    def objective(vflat):
        v = vflat.reshape(n_iv, 2)
        useq = _squash(v, u_max)
        status, J = _k.pw_rollout(
            z0, fv, useq, spi, cp, cc, params.N_T, nf0, config.h, n_steps, Z
        )
        if status != 0:
            return np.inf, np.zeros_like(vflat)
        _k.pw_adjoint(
            Z, fv, useq, spi, cp, cc, params.N_T, nf0, config.h, n_steps, ubar
        )
        sech2 = 1.0 - np.tanh(v) ** 2
        vbar = ubar * 0.5 * u_max * sech2
        return J, vbar.ravel()

    v0 = _unsquash(warm.u, u_max).ravel()
    res = minimize(
        objective,
        v0,
        jac=True,
        method="L-BFGS-B",
        options={
            "maxcor": config.maxcor,
            "maxiter": config.max_iter,
            "maxfun": 20 * config.max_iter,
            "ftol": 1e-16,
            "gtol": config.gtol,
        },
    )
    ok = bool(np.isfinite(res.fun)) and res.status in (0, 1)
    if not ok:
        log.warning("horizon solve failed: status=%s %s", res.status, res.message)
    seq = ControlSequence(
        u=_squash(res.x.reshape(n_iv, 2), u_max), converged=ok, n_iter=res.nit
    )
    return seq, float(res.fun)


@dataclass
class MpcController:
    """Receding-horizon wrapper with warm starts and a safe fallback."""

    params: ColumnParams
    config: OcpConfig = field(default_factory=OcpConfig)
    warm: ControlSequence | None = None
    last_applied: Controls | None = None
    n_solves: int = 0
    n_failures: int = 0
    iter_total: int = 0

    def __call__(self, state: ColumnState, t: float, feed: FeedConditions) -> Controls:
        warm = self.warm.shifted() if self.warm is not None else None
        seq, cost = solve_ocp(state, feed, warm, self.params, self.config)
        self.n_solves += 1
        self.iter_total += seq.n_iter
        if not seq.converged:
            self.n_failures += 1
            fallback = self.last_applied or Controls.nominal(self.params)
            log.warning(
                "t=%.2f: solve unusable, holding previous control (%.4f, %.4f)",
                t, fallback.lt, fallback.vb,
            )
            return fallback
        self.warm = seq
        u = seq.first()
        u.check_bounds(self.params)
        self.last_applied = u
        return u
