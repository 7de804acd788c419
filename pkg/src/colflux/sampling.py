"""Operating-region statistics and quasi-random pool construction.

Training pools are drawn from the region a well-tuned controller actually
visits: a closed-loop benchmark run is summarised as two separate truncated
multivariate normals (one over stage temperatures, one over stage holdups),
and pool members come from a Sobol design pushed through the truncated
marginals, with the fitted cross-correlations imposed by rank reordering
(Iman-Conover). Temperatures are then mapped back to compositions. Feed
conditions are attached by striding through the source run, and measurement
noise pools use the same quasi-random machinery on the 30 noise slots.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cholesky, solve_triangular
from scipy.special import ndtr, ndtri
from scipy.stats import qmc, rankdata

from .column import (
    MIN_HOLDUP,
    N_MEAS,
    ColumnParams,
    ColumnState,
    FeedConditions,
    NoiseSpec,
)

MAX_SOBOL_DIM = 64
MVN_RIDGE = 1e-10
RESAMPLE_CAP = 100


class PoolBuildError(RuntimeError):
    """A pool coordinate kept violating its physical range."""


def sobol_points(n: int, d: int) -> np.ndarray:
    """First n points of the d-dimensional Sobol sequence in (0, 1)^d.

    Unscrambled direction numbers; the all-zeros leading point is skipped
    so every coordinate stays strictly inside the unit interval.
    """
    if not 1 <= d <= MAX_SOBOL_DIM:
        raise ValueError(f"dimension must lie in [1, {MAX_SOBOL_DIM}]")
    if not 1 <= n <= 2**20:
        raise ValueError("point count must lie in [1, 2^20]")
    gen = qmc.Sobol(d, scramble=False)
    gen.fast_forward(1)
    return gen.random(n)


def truncated_normal_ppf(u, mean, sigma, lo, hi):
    """Inverse CDF of a normal restricted to [lo, hi]; u in (0, 1)."""
    u = np.asarray(u, dtype=np.float64)
    a = ndtr((lo - mean) / sigma)
    b = ndtr((hi - mean) / sigma)
    return mean + sigma * ndtri(a + u * (b - a))


@dataclass(frozen=True, eq=False)
class TruncatedMvn:
    """A multivariate normal truncated to mean +- 3 sigma per coordinate."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mean", np.asarray(self.mean, dtype=np.float64))
        object.__setattr__(self, "cov", np.asarray(self.cov, dtype=np.float64))
        d = self.mean.size
        if self.cov.shape != (d, d):
            raise ValueError("covariance shape does not match the mean")

    @property
    def sigma(self) -> np.ndarray:
        return np.sqrt(np.diag(self.cov))

    @property
    def lo(self) -> np.ndarray:
        return self.mean - 3.0 * self.sigma

    @property
    def hi(self) -> np.ndarray:
        return self.mean + 3.0 * self.sigma

    def corr(self) -> np.ndarray:
        s = self.sigma
        c = self.cov / np.outer(s, s)
        np.fill_diagonal(c, 1.0)
        return 0.5 * (c + c.T)


def fit_truncated_mvn(data: np.ndarray) -> TruncatedMvn:
    """Fit mean and covariance; a ridge of 1e-10 restores definiteness.

    A constant column gets variance 1e-10, so sampling reproduces the
    constant to within a few times 1e-5.
    """
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2 or data.shape[0] < 2:
        raise ValueError("need a (rows, dims) array with at least two rows")
    mean = data.mean(axis=0)
    cov = np.atleast_2d(np.cov(data, rowvar=False))
    if np.min(np.linalg.eigvalsh(cov)) < MVN_RIDGE:
        cov = cov + MVN_RIDGE * np.eye(cov.shape[0])
    return TruncatedMvn(mean=mean, cov=cov)


def iman_conover(samples: np.ndarray, target_corr: np.ndarray) -> np.ndarray:
    """Impose a correlation structure by rank reordering.

    Column marginals are preserved exactly (each output column is a
    permutation of the input column); the rank correlation approaches the
    target. Uses van der Waerden scores, decorrelated by the empirical
    score correlation and recorrelated by a factor of the target.
    """
    samples = np.asarray(samples, dtype=np.float64)
    n, d = samples.shape
    if n <= d:
        raise ValueError(
            "need more samples than dimensions to decorrelate the scores"
        )
    if target_corr.shape != (d, d):
        raise ValueError("correlation shape does not match the samples")
    try:
        P = cholesky(target_corr, lower=True)
    except np.linalg.LinAlgError:
        # Semidefinite targets (perfect dependence between columns) have no
        # Cholesky factor; an eigenvalue square root covers them. Genuinely
        # indefinite matrices still raise.
        evals, evecs = np.linalg.eigh(target_corr)
        if evals.min() < -1e-8 * max(1.0, evals.max()):
            raise np.linalg.LinAlgError(
                "target correlation is not positive semidefinite"
            ) from None
        P = evecs * np.sqrt(np.clip(evals, 0.0, None))

    ranks = rankdata(samples, axis=0)
    scores = ndtri(ranks / (n + 1))
    with np.errstate(invalid="ignore"):
        E = np.corrcoef(scores, rowvar=False)
    E = np.atleast_2d(E)
    if not np.all(np.isfinite(E)):
        raise ValueError("degenerate sample ranks: constant column?")
    Q = cholesky(E, lower=True)
    decorrelated = solve_triangular(Q, scores.T, lower=True).T
    Y = decorrelated @ P.T

    out = np.empty_like(samples)
    for j in range(d):
        order = rankdata(Y[:, j], method="ordinal").astype(np.intp) - 1
        out[:, j] = np.sort(samples[:, j])[order]
    return out


@dataclass(frozen=True, eq=False)
class RegionData:
    """Closed-loop log on a coarse grid: what the plant actually visits."""

    t: np.ndarray
    temperatures: np.ndarray
    holdups: np.ndarray
    feed: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "t", np.asarray(self.t, dtype=np.float64))
        object.__setattr__(
            self, "temperatures", np.asarray(self.temperatures, dtype=np.float64)
        )
        object.__setattr__(self, "holdups", np.asarray(self.holdups, dtype=np.float64))
        object.__setattr__(self, "feed", np.asarray(self.feed, dtype=np.float64))
        m = self.t.size
        if (
            self.temperatures.shape[0] != m
            or self.holdups.shape != self.temperatures.shape
            or self.feed.shape != (m, 3)
        ):
            raise ValueError("region arrays disagree on row count")

    @property
    def n_stages(self) -> int:
        return self.temperatures.shape[1]

    def quantiles(self, qs=(0, 5, 25, 50, 75, 95, 100)) -> dict[str, np.ndarray]:
        """Per-stage temperature and holdup quantiles (rows follow qs)."""
        return {
            "q": np.asarray(qs, dtype=np.float64),
            "temperatures": np.percentile(self.temperatures, qs, axis=0),
            "holdups": np.percentile(self.holdups, qs, axis=0),
        }

    def to_csv(self, path) -> None:
        n = self.n_stages
        names = (
            ["t"]
            + [f"T_{j+1}" for j in range(n)]
            + [f"M_{j+1}" for j in range(n)]
            + ["F", "zF", "qF"]
        )
        data = np.column_stack([self.t, self.temperatures, self.holdups, self.feed])
        np.savetxt(path, data, fmt="%.17g", delimiter=",",
                   header=",".join(names), comments="")

    @classmethod
    def from_csv(cls, path) -> "RegionData":
        _, names, arr = load_table(path)
        col = {name: arr[:, i] for i, name in enumerate(names)}
        n = sum(1 for c in names if c.startswith("T_"))
        return cls(
            t=col["t"],
            temperatures=np.column_stack([col[f"T_{j+1}"] for j in range(n)]),
            holdups=np.column_stack([col[f"M_{j+1}"] for j in range(n)]),
            feed=np.column_stack([col["F"], col["zF"], col["qF"]]),
        )


@dataclass(frozen=True, eq=False)
class InitialConditionPool:
    """Start states and matching feed conditions for training rollouts."""

    holdups: np.ndarray
    compositions: np.ndarray
    feed: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "holdups", np.asarray(self.holdups, dtype=np.float64))
        object.__setattr__(
            self, "compositions", np.asarray(self.compositions, dtype=np.float64)
        )
        object.__setattr__(self, "feed", np.asarray(self.feed, dtype=np.float64))
        n = self.holdups.shape[0]
        if self.compositions.shape != self.holdups.shape or self.feed.shape != (n, 3):
            raise ValueError("pool arrays disagree on sample count")

    def __len__(self) -> int:
        return self.holdups.shape[0]

    def state(self, i: int) -> ColumnState:
        return ColumnState(self.holdups[i].copy(), self.compositions[i].copy())

    def feed_at(self, i: int) -> FeedConditions:
        f = self.feed[i]
        return FeedConditions(float(f[0]), float(f[1]), float(f[2]))

    def to_csv(self, path) -> None:
        n = self.holdups.shape[1]
        names = (
            [f"M_{j+1}" for j in range(n)]
            + [f"x_{j+1}" for j in range(n)]
            + ["F", "zF", "qF"]
        )
        header = "".join(f"# {k}={v}\n" for k, v in sorted(self.meta.items()))
        header += ",".join(names)
        data = np.column_stack([self.holdups, self.compositions, self.feed])
        np.savetxt(path, data, fmt="%.17g", delimiter=",",
                   header=header, comments="")

    @classmethod
    def from_csv(cls, path) -> "InitialConditionPool":
        meta, names, arr = load_table(path)
        col = {name: arr[:, i] for i, name in enumerate(names)}
        n = sum(1 for c in names if c.startswith("M_"))
        return cls(
            holdups=np.column_stack([col[f"M_{j+1}"] for j in range(n)]),
            compositions=np.column_stack([col[f"x_{j+1}"] for j in range(n)]),
            feed=np.column_stack([col["F"], col["zF"], col["qF"]]),
            meta=meta,
        )


@dataclass(frozen=True, eq=False)
class NoisePool:
    """Pre-drawn measurement noise vectors, one row per draw."""

    eta: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "eta", np.asarray(self.eta, dtype=np.float64))
        if self.eta.ndim != 2 or self.eta.shape[1] != N_MEAS:
            raise ValueError(f"noise pool must have {N_MEAS} columns")

    def __len__(self) -> int:
        return self.eta.shape[0]

    @classmethod
    def zeros(cls, n: int) -> "NoisePool":
        return cls(eta=np.zeros((n, N_MEAS)), meta={"kind": "zero"})

    def to_csv(self, path) -> None:
        names = [f"eta_{j+1}" for j in range(N_MEAS)]
        header = "".join(f"# {k}={v}\n" for k, v in sorted(self.meta.items()))
        header += ",".join(names)
        np.savetxt(path, self.eta, fmt="%.17g", delimiter=",",
                   header=header, comments="")

    @classmethod
    def from_csv(cls, path) -> "NoisePool":
        meta, _, arr = load_table(path)
        return cls(eta=arr, meta=meta)


def _read_meta(path) -> tuple[dict, int]:
    """Parse leading '# key=value' lines; returns (meta, lines consumed)."""
    meta = {}
    count = 0
    with open(path) as fh:
        for line in fh:
            if not line.startswith("#"):
                break
            count += 1
            body = line[1:].strip()
            if "=" in body:
                k, v = body.split("=", 1)
                meta[k.strip()] = v.strip()
    return meta, count


def load_table(path) -> tuple[dict, list[str], np.ndarray]:
    """Read a CSV with optional leading '# key=value' lines.

    Returns (meta, column names, data) with data shaped (rows, columns).
    """
    meta, skip = _read_meta(path)
    data = np.genfromtxt(path, delimiter=",", names=True, skip_header=skip)
    names = list(data.dtype.names)
    data = np.atleast_1d(data)
    return meta, names, data.view(np.float64).reshape(data.shape[0], len(names))


def _sample_block(pts: np.ndarray, mvn: TruncatedMvn) -> np.ndarray:
    vals = truncated_normal_ppf(
        pts, mvn.mean[None, :], mvn.sigma[None, :], mvn.lo[None, :], mvn.hi[None, :]
    )
    return iman_conover(vals, mvn.corr())


def _redraw_coordinate(rng, mvn: TruncatedMvn, j: int, feasible) -> float:
    """Redraw one marginal until it lands in its physical range."""
    for _ in range(RESAMPLE_CAP):
        v = truncated_normal_ppf(
            rng.uniform(), mvn.mean[j], mvn.sigma[j], mvn.lo[j], mvn.hi[j]
        )
        if feasible(v):
            return float(v)
    raise PoolBuildError(
        f"coordinate {j} stayed outside its physical range after "
        f"{RESAMPLE_CAP} redraws"
    )


def build_initial_pool(
    region: RegionData, n: int, seed: int, params: ColumnParams,
    exclude_before: float = 15.0,
) -> InitialConditionPool:
    """Quasi-random start states drawn over the fitted operating region.

    Rows logged before ``exclude_before`` minutes are dropped from the fit:
    the cold-start transient lies outside the region the plant occupies in
    normal operation, and folding it in inflates the end-stage variances by
    two orders of magnitude. Temperatures and holdups come from separately
    fitted truncated MVNs; one Sobol design covers both blocks (temperature
    dims first). After the rank reordering, temperatures map to
    compositions, and any coordinate outside its physical range is redrawn
    pseudo-randomly (in row-major order, which keeps the pool reproducible
    for a fixed seed).
    """
    n_t = region.n_stages
    keep = region.t >= exclude_before - 1e-9
    if not np.any(keep):
        raise PoolBuildError("no region rows left after start-up exclusion")
    temps_data = region.temperatures[keep]
    holds_data = region.holdups[keep]
    feed_data = region.feed[keep]
    mvn_t = fit_truncated_mvn(temps_data)
    mvn_m = fit_truncated_mvn(holds_data)
    pts = sobol_points(n, 2 * n_t)
    temps = _sample_block(pts[:, :n_t], mvn_t)
    holds = _sample_block(pts[:, n_t:], mvn_m)

    span = params.T_bH - params.T_bL
    rng = np.random.default_rng(seed)
    for i in range(n):
        for j in range(n_t):
            if not params.T_bL <= temps[i, j] <= params.T_bH:
                temps[i, j] = _redraw_coordinate(
                    rng, mvn_t, j, lambda v: params.T_bL <= v <= params.T_bH
                )
            if holds[i, j] <= MIN_HOLDUP:
                holds[i, j] = _redraw_coordinate(
                    rng, mvn_m, j, lambda v: v > MIN_HOLDUP
                )
    x = (params.T_bH - temps) / span

    m = feed_data.shape[0]
    idx = (np.arange(n) * m) // n
    return InitialConditionPool(
        holdups=holds,
        compositions=x,
        feed=feed_data[idx].copy(),
        meta={"seed": seed, "size": n, "kind": "initial"},
    )


def build_noise_pool(
    noise: NoiseSpec, n: int, seed: int, zero: bool = False
) -> NoisePool:
    """Quasi-random truncated-normal noise rows (or an all-zeros pool)."""
    if zero:
        pool = NoisePool.zeros(n)
        pool.meta.update({"seed": seed, "size": n})
        return pool
    if N_MEAS > MAX_SOBOL_DIM:
        raise ValueError("noise dimension exceeds the Sobol cap")
    pts = sobol_points(n, N_MEAS)
    eta = truncated_normal_ppf(
        pts,
        np.zeros(N_MEAS)[None, :],
        noise.sigma[None, :],
        -noise.bound[None, :],
        noise.bound[None, :],
    )
    return NoisePool(eta=eta, meta={"seed": seed, "size": n, "kind": "truncnorm"})
