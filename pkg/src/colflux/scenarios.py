"""Disturbance scenarios and closed-loop evaluation.

A scenario is a long run from a flat-composition cold start: the plant
settles for a start offset, then a stream of step disturbances hits the
feed rate, feed composition, or feed liquid fraction at random spacings.
Controllers are scored by the cumulative running cost accumulated from the
first event onward. Evaluation variants cover measurement-noise stress
(constant bias per run, per-step redraws, bound-saturating signs) and a
plant/model mismatch that scales what the plant receives relative to what
the controller commanded.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels as _k
from .column import (
    ColumnParams,
    ColumnState,
    FeedConditions,
    NoiseSpec,
    SingularHoldupError,
)
from .diffsim import SimConfig, Trajectory, cost_vector, quadrature
from .mpc import MpcController, OcpConfig
from .policy import PolicyParams, forward_batch
from .sampling import RegionData, truncated_normal_ppf

log = logging.getLogger(__name__)

CHANNELS = ("F", "zF", "qF")
DEFAULT_RANGES = {"F": (0.8, 1.2), "zF": (0.4, 0.6), "qF": (0.8, 1.0)}
GAP_CHOICES = np.linspace(0.5, 10.0, 10)
N_LEVELS = 15
START_OFFSET = 15.0
NOISE_MODES = ("none", "constant_bias", "per_step", "extreme")
ENVELOPE_CHUNK = 4096


@dataclass(frozen=True)
class MismatchMode:
    """Evaluation stress variant and its constants."""

    kind: str = "none"  # none | extreme_noise | multiplicative_io
    factors: tuple[float, float] = (1.1, 0.9)

    def __post_init__(self):
        if self.kind not in ("none", "extreme_noise", "multiplicative_io"):
            raise ValueError(f"unknown mismatch kind {self.kind!r}")
        if self.factors[0] <= 0 or self.factors[1] <= 0:
            raise ValueError("mismatch factors must be positive")


@dataclass(frozen=True, eq=False)
class DisturbanceSequence:
    """Step events on the feed channels, plus the run duration.

    times are event instants in minutes (strictly increasing, first at the
    start offset); channels index into CHANNELS; levels are the absolute
    values the channel steps to.
    """

    times: np.ndarray
    channels: np.ndarray
    levels: np.ndarray
    duration: float
    start: float = START_OFFSET
    seed: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "times", np.asarray(self.times, dtype=np.float64))
        object.__setattr__(self, "channels", np.asarray(self.channels, dtype=np.int64))
        object.__setattr__(self, "levels", np.asarray(self.levels, dtype=np.float64))
        k = self.times.size
        if self.channels.shape != (k,) or self.levels.shape != (k,):
            raise ValueError("event arrays disagree on length")
        if k and np.any(np.diff(self.times) <= 0):
            raise ValueError("event times must be strictly increasing")
        if k and (self.times[0] < self.start - 1e-9):
            raise ValueError("first event precedes the start offset")
        if k and np.any((self.channels < 0) | (self.channels >= len(CHANNELS))):
            raise ValueError("channel index out of range")
        if self.duration <= (self.times[-1] if k else self.start):
            raise ValueError("duration must extend past the last event")

    @property
    def n_events(self) -> int:
        return self.times.size

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(f"# duration={self.duration!r}\n")
            fh.write(f"# start={self.start!r}\n")
            if self.seed is not None:
                fh.write(f"# seed={self.seed}\n")
            writer = csv.writer(fh)
            writer.writerow(["time", "channel", "level"])
            for t, c, v in zip(self.times, self.channels, self.levels):
                writer.writerow([repr(float(t)), CHANNELS[c], repr(float(v))])

    @classmethod
    def from_csv(cls, path) -> "DisturbanceSequence":
        meta = {}
        rows = []
        with open(path) as fh:
            body = []
            for line in fh:
                if line.startswith("#"):
                    k, _, v = line[1:].strip().partition("=")
                    meta[k.strip()] = v.strip()
                else:
                    body.append(line)
            reader = csv.reader(io.StringIO("".join(body)))
            header = next(reader)
            if header != ["time", "channel", "level"]:
                raise ValueError(f"unexpected event columns: {header}")
            for row in reader:
                if row:
                    rows.append(row)
        return cls(
            times=np.array([float(r[0]) for r in rows]),
            channels=np.array([CHANNELS.index(r[1]) for r in rows]),
            levels=np.array([float(r[2]) for r in rows]),
            duration=float(meta["duration"]),
            start=float(meta.get("start", START_OFFSET)),
            seed=int(meta["seed"]) if "seed" in meta else None,
        )


def generate_disturbance_sequence(
    seed: int,
    n_events: int = 100,
    ranges: dict[str, tuple[float, float]] | None = None,
    start: float = START_OFFSET,
) -> DisturbanceSequence:
    """Draw a random event stream.

    Gaps between consecutive events come uniformly from ten equally spaced
    choices between 0.5 and 10 minutes; the struck channel is uniform over
    the three feed channels, and the new level is uniform over a 15-point
    grid spanning the channel's range. Per event the draw order is gap,
    channel, level. The run extends one final gap past the last event.
    """
    rng = np.random.default_rng(seed)
    ranges = dict(DEFAULT_RANGES if ranges is None else ranges)
    grids = {
        c: np.linspace(ranges[c][0], ranges[c][1], N_LEVELS) for c in CHANNELS
    }
    times = np.empty(n_events)
    channels = np.empty(n_events, dtype=np.int64)
    levels = np.empty(n_events)
    t = start
    for k in range(n_events):
        gap = float(GAP_CHOICES[rng.integers(0, GAP_CHOICES.size)])
        channels[k] = rng.integers(0, len(CHANNELS))
        levels[k] = grids[CHANNELS[channels[k]]][rng.integers(0, N_LEVELS)]
        times[k] = t
        t += gap
    duration = t  # start + all gaps; the final gap extends past the last event
    return DisturbanceSequence(
        times=times, channels=channels, levels=levels,
        duration=duration, start=start, seed=seed,
    )


def _grid_index(t: float, h: float) -> int:
    return int(math.ceil(t / h - 1e-9))


def feed_segments(
    seq: DisturbanceSequence, params: ColumnParams, h: float
) -> tuple[int, list[tuple[int, int, FeedConditions]]]:
    """Split the run into feed-constant spans of the step grid.

    Event times are snapped up to the next grid node. Returns the total
    step count and (start node, end node, feed) triples covering it.
    """
    n_total = _grid_index(seq.duration, h)
    cur = [params.F0, params.zF0, params.qF0]
    segs = []
    prev = 0
    for t, c, v in zip(seq.times, seq.channels, seq.levels):
        idx = _grid_index(float(t), h)
        if idx > prev:
            segs.append((prev, idx, FeedConditions(*cur)))
            prev = idx
        cur[int(c)] = float(v)
    if n_total > prev:
        segs.append((prev, n_total, FeedConditions(*cur)))
    return n_total, segs


def _draw_noise(
    mode: str,
    noise: NoiseSpec,
    n_total: int,
    seed: int,
) -> tuple[np.ndarray, int]:
    """Noise rows and stride for the kernels (stride 0: one shared row)."""
    nm = noise.sigma.size
    if mode == "none":
        return np.zeros((1, nm)), 0
    rng = np.random.default_rng(seed)
    if mode == "constant_bias":
        eta = truncated_normal_ppf(
            rng.uniform(size=nm), 0.0, noise.sigma, -noise.bound, noise.bound
        )
        return eta.reshape(1, nm), 0
    if mode == "extreme":
        signs = rng.integers(0, 2, nm) * 2 - 1
        return (signs * noise.bound).reshape(1, nm), 0
    if mode == "per_step":
        u = rng.uniform(size=(n_total + 1, nm))
        eta = truncated_normal_ppf(
            u, 0.0, noise.sigma[None, :], -noise.bound[None, :], noise.bound[None, :]
        )
        return eta, 1
    raise ValueError(f"unknown noise mode {mode!r}; expected one of {NOISE_MODES}")


def _initial_state(params: ColumnParams) -> ColumnState:
    return ColumnState.equimolar(params)


def simulate_closed_loop(
    controller,
    seq: DisturbanceSequence,
    params: ColumnParams,
    noise: NoiseSpec | None = None,
    noise_mode: str = "none",
    io_factors: tuple[float, float] | None = None,
    seed: int = 0,
    sim: SimConfig | None = None,
    ocp: OcpConfig | None = None,
) -> Trajectory:
    """Run one controller through a scenario from a flat cold start.

    controller is either PolicyParams or an MpcController (or the string
    "mpc" for a fresh benchmark controller). Recorded controls are the
    commanded values; io_factors scale what the plant receives. Noise
    modes perturb only what a policy controller hears; the benchmark
    controller reads the true state and accepts none of them.
    """
    sim = sim or SimConfig(t_f=0.0)
    h = sim.h
    n_total, segs = feed_segments(seq, params, h)
    fac = (1.0, 1.0) if io_factors is None else (float(io_factors[0]), float(io_factors[1]))
    n2 = 2 * params.N_T
    cp = params.pack()
    cc = cost_vector(sim, params)
    nf0 = params.N_F - 1

    Z = np.empty((n_total + 1, n2))
    U = np.empty((n_total + 1, 2))
    LV = np.empty(n_total + 1)
    FD = np.empty((n_total + 1, 3))
    Z[0] = _initial_state(params).as_vector()
    t = np.arange(n_total + 1) * h

    if isinstance(controller, str):
        if controller != "mpc":
            raise ValueError(f"unknown controller name {controller!r}")
        controller = MpcController(params, ocp or OcpConfig())

    if isinstance(controller, MpcController):
        if noise_mode != "none":
            raise ValueError(
                "the benchmark controller reads the true state; "
                "noise modes do not apply"
            )
        _run_mpc(controller, Z, U, LV, FD, n_total, segs, params, cp, cc, nf0,
                 h, fac)
    elif isinstance(controller, PolicyParams):
        nsp = noise or NoiseSpec.table_default(params)
        eta2d, stride = _draw_noise(noise_mode, nsp, n_total, seed)
        _run_policy(controller, Z, U, LV, FD, segs, eta2d, stride, params, cp,
                    cc, nf0, h, fac)
    else:
        raise TypeError(f"unsupported controller: {type(controller).__name__}")

    return Trajectory(t=t, states=Z, controls=U, stage_cost=LV, feed=FD)


def _run_policy(pol, Z, U, LV, FD, segs, eta2d, stride, params, cp, cc, nf0,
                h, fac):
    sel = pol.spec.slot_array()
    theta = pol.flatten()
    ni, w = pol.spec.n_inputs, pol.spec.width
    for a, b, feed in segs:
        fv = feed.as_array()
        eta_view = eta2d[a : b + 1] if stride else eta2d
        status = _k.sim_policy_segment(
            Z[a : b + 1], U[a : b + 1], LV[a : b + 1], b - a, fv, eta_view,
            stride, sel, theta, ni, w, cp, cc, params.N_T, nf0, h,
            fac[0], fac[1],
        )
        if status != 0:
            raise SingularHoldupError(
                f"holdup on stage {status} vanished near t={a * h:.2f}"
            )
        FD[a : b + 1] = fv


def _run_mpc(ctl, Z, U, LV, FD, n_total, segs, params, cp, cc, nf0, h, fac):
    spi = ctl.config.steps_per_interval
    n_t = params.N_T
    boundaries = sorted({a for a, _, _ in segs} | {n_total})
    seg_feed = {a: feed for a, _, feed in segs}
    cur_feed = segs[0][2]
    next_log = 0.0
    for s in range(0, n_total, spi):
        e = min(s + spi, n_total)
        if s in seg_feed:
            cur_feed = seg_feed[s]
        state = ColumnState(Z[s, :n_t].copy(), Z[s, n_t:].copy())
        u = ctl(state, s * h, cur_feed)
        cuts = [s] + [b for b in boundaries if s < b < e] + [e]
        for p, q in zip(cuts[:-1], cuts[1:]):
            if p in seg_feed:
                cur_feed = seg_feed[p]
            fv = cur_feed.as_array()
            status = _k.sim_const_u_segment(
                Z[p : q + 1], U[p : q + 1], LV[p : q + 1], q - p, fv,
                u.lt, u.vb, cp, cc, n_t, nf0, h, fac[0], fac[1],
            )
            if status != 0:
                raise SingularHoldupError(
                    f"holdup on stage {status} vanished near t={p * h:.2f}"
                )
            FD[p : q + 1] = fv
        if s * h >= next_log:
            log.info("benchmark run: t=%.1f/%.1f min, %d solves",
                     s * h, n_total * h, ctl.n_solves)
            next_log += 60.0


def cumulative_objective(traj: Trajectory, t_start: float = START_OFFSET) -> float:
    """Integrated running cost from t_start to the end of the record."""
    h = traj.spacing
    idx = int(round(t_start / h))
    if abs(idx * h - t_start) > 1e-9 or idx >= traj.t.size:
        raise ValueError(f"t_start={t_start} is not on the trajectory grid")
    return quadrature(traj.stage_cost[idx:], h)


def estimate_operating_region(
    seq: DisturbanceSequence,
    params: ColumnParams,
    ocp: OcpConfig | None = None,
    log_dt: float = 0.1,
) -> tuple[RegionData, Trajectory]:
    """Run the benchmark controller over a scenario and log coarsely.

    Returns the region summary (temperatures, holdups, feed on the log_dt
    grid) together with the full benchmark trajectory.
    """
    traj = simulate_closed_loop("mpc", seq, params, ocp=ocp)
    h = traj.spacing
    stride = int(round(log_dt / h))
    if abs(stride * h - log_dt) > 1e-9 or stride < 1:
        raise ValueError("log_dt must be a multiple of the step size")
    sl = slice(0, traj.t.size, stride)
    region = RegionData(
        t=traj.t[sl].copy(),
        temperatures=traj.temperatures(params)[sl],
        holdups=traj.holdups()[sl].copy(),
        feed=traj.feed[sl].copy(),
    )
    return region, traj


@dataclass(frozen=True, eq=False)
class EnvelopeData:
    """Per-node spread of a policy's control response to noise redraws."""

    t: np.ndarray
    base: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    std: np.ndarray

    def mean_width(self) -> np.ndarray:
        """Average (hi - lo) per control channel."""
        return (self.hi - self.lo).mean(axis=0)

    def to_csv(self, path) -> None:
        names = ["t", "L_T", "V_B", "LT_lo", "LT_hi", "VB_lo", "VB_hi",
                 "LT_std", "VB_std"]
        data = np.column_stack([
            self.t, self.base[:, 0], self.base[:, 1],
            self.lo[:, 0], self.hi[:, 0], self.lo[:, 1], self.hi[:, 1],
            self.std[:, 0], self.std[:, 1],
        ])
        np.savetxt(path, data, fmt="%.17g", delimiter=",",
                   header=",".join(names), comments="")


def control_noise_envelope(
    pol: PolicyParams,
    traj: Trajectory,
    params: ColumnParams,
    noise: NoiseSpec | None = None,
    n_draws: int = 100,
    seed: int = 0,
) -> EnvelopeData:
    """Re-evaluate the policy under noise redraws along a trajectory.

    At every grid node the true measurement is perturbed by n_draws
    independent truncated-normal vectors and the policy's response spread
    is recorded. The trajectory must carry feed conditions.
    """
    if traj.feed is None:
        raise ValueError("trajectory carries no feed log")
    nsp = noise or NoiseSpec.table_default(params)
    n_t = params.N_T
    m = traj.t.size
    T = traj.temperatures(params)
    meas = np.empty((m, nsp.sigma.size))
    meas[:, :n_t] = T
    meas[:, n_t] = traj.feed[:, 0]
    meas[:, n_t + 1] = (
        traj.feed[:, 1] * params.T_bL + (1.0 - traj.feed[:, 1]) * params.T_bH
    )
    meas[:, n_t + 2] = traj.feed[:, 2]
    meas[:, n_t + 3] = traj.holdups()[:, 0]
    meas[:, n_t + 4] = traj.holdups()[:, -1]

    base = np.empty((m, 2))
    lo = np.empty((m, 2))
    hi = np.empty((m, 2))
    std = np.empty((m, 2))
    rng = np.random.default_rng(seed)
    nm = nsp.sigma.size
    for a in range(0, m, ENVELOPE_CHUNK):
        b = min(a + ENVELOPE_CHUNK, m)
        u = rng.uniform(size=(b - a, n_draws, nm))
        eta = truncated_normal_ppf(
            u, 0.0, nsp.sigma[None, None, :],
            -nsp.bound[None, None, :], nsp.bound[None, None, :],
        )
        # The zero draw rides along as row 0 so the reported base goes
        # through the identical evaluation path and the envelope brackets
        # it by construction.
        stacked = np.concatenate([np.zeros((b - a, 1, nm)), eta], axis=1)
        resp = forward_batch(pol, meas[a:b, None, :] + stacked, params)
        base[a:b] = resp[:, 0]
        lo[a:b] = resp.min(axis=1)
        hi[a:b] = resp.max(axis=1)
        std[a:b] = resp[:, 1:].std(axis=1)
    return EnvelopeData(t=traj.t.copy(), base=base, lo=lo, hi=hi, std=std)


@dataclass(frozen=True)
class EvalReport:
    """Cumulative objectives per controller and evaluation mode."""

    rows: tuple[tuple[str, str, float], ...]
    meta: dict = field(default_factory=dict)

    def value(self, policy: str, mode: str) -> float:
        for p, m, v in self.rows:
            if p == policy and m == mode:
                return v
        raise KeyError(f"no row for ({policy}, {mode})")

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            for k, v in sorted(self.meta.items()):
                fh.write(f"# {k}={v}\n")
            writer = csv.writer(fh)
            writer.writerow(["controller", "mode", "objective"])
            for p, m, v in self.rows:
                writer.writerow([p, m, repr(float(v))])

    @classmethod
    def from_csv(cls, path) -> "EvalReport":
        meta = {}
        rows = []
        with open(path) as fh:
            body = []
            for line in fh:
                if line.startswith("#"):
                    k, _, v = line[1:].strip().partition("=")
                    meta[k.strip()] = v.strip()
                else:
                    body.append(line)
        reader = csv.reader(io.StringIO("".join(body)))
        next(reader)
        for row in reader:
            if row:
                rows.append((row[0], row[1], float(row[2])))
        return cls(rows=tuple(rows), meta=meta)

    def render(self) -> str:
        """Fixed-width text table, one controller per line."""
        modes = []
        for _, m, _ in self.rows:
            if m not in modes:
                modes.append(m)
        names = []
        for p, _, _ in self.rows:
            if p not in names:
                names.append(p)
        width = max(len(n) for n in names + ["controller"]) + 2
        head = "controller".ljust(width) + "".join(m.rjust(22) for m in modes)
        lines = [head]
        for p in names:
            cells = []
            for m in modes:
                try:
                    cells.append(f"{self.value(p, m):.4f}".rjust(22))
                except KeyError:
                    cells.append("-".rjust(22))
            lines.append(p.ljust(width) + "".join(cells))
        return "\n".join(lines)


def run_table4(
    policies: dict[str, PolicyParams],
    seq: DisturbanceSequence,
    params: ColumnParams,
    seed: int = 0,
    n_bias_draws: int = 10,
    noise: NoiseSpec | None = None,
    ocp: OcpConfig | None = None,
) -> EvalReport:
    """Score the benchmark and trained controllers on one scenario.

    Every controller is run without noise; policies additionally face one
    constant measurement bias (the first of n_bias_draws seeded draws) and
    the mean over all n_bias_draws draws. The benchmark sees the true
    state, so its bias entries are omitted.
    """
    draws = [
        int(s.generate_state(1)[0])
        for s in np.random.SeedSequence(seed).spawn(n_bias_draws)
    ]
    rows = []
    log.info("table run: benchmark controller, no noise")
    traj = simulate_closed_loop("mpc", seq, params, ocp=ocp)
    rows.append(("mpc", "no_noise", cumulative_objective(traj, seq.start)))
    for name, pol in policies.items():
        log.info("table run: %s, no noise", name)
        traj = simulate_closed_loop(pol, seq, params, noise=noise)
        rows.append((name, "no_noise", cumulative_objective(traj, seq.start)))
        vals = []
        for i, ds in enumerate(draws):
            log.info("table run: %s, bias draw %d/%d", name, i + 1, len(draws))
            traj = simulate_closed_loop(
                pol, seq, params, noise=noise,
                noise_mode="constant_bias", seed=ds,
            )
            vals.append(cumulative_objective(traj, seq.start))
        rows.append((name, "constant_bias", vals[0]))
        rows.append((name, "constant_bias_mean", float(np.mean(vals))))
    return EvalReport(
        rows=tuple(rows),
        meta={"seed": seed, "n_bias_draws": n_bias_draws,
              "sequence_seed": seq.seed, "n_events": seq.n_events},
    )
