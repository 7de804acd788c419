"""Static output-feedback neural controller.

The controller maps a noisy measurement vector through input normalisation,
a trainable diagonal selection gate, one sigmoid hidden layer, and a scaled
sigmoid output onto the two manipulated flows. All trainable parameters,
the selection gate included, live in a single flat vector so the optimiser
and the compiled adjoint kernels can treat them uniformly.

This module is the readable numpy reference; the hot-path twin lives in
``colflux._kernels`` and the tests hold the two together.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import expit

from .column import (
    N_MEAS,
    SLOT_F,
    SLOT_M_BOTTOM,
    SLOT_M_TOP,
    SLOT_QF,
    SLOT_TF,
    ColumnParams,
    Controls,
)

PRUNE_TOL = 1e-3


def _sigmoid(a):
    return expit(a)


@dataclass(frozen=True)
class PolicySpec:
    """Architecture of a controller: which inputs it sees and its layer sizes.

    input_slots are 0-based measurement indices (0..N_T-1 temperatures,
    then feed rate, feed temperature, feed liquid fraction, reboiler and
    condenser holdups). Serialized files use 1-based slot numbers.
    """

    input_slots: tuple[int, ...]
    hidden: tuple[int, ...] = (30,)
    u_max: tuple[float, float] = (2.75, 3.25)
    activation: str = "sigmoid"

    def __post_init__(self):
        slots = tuple(int(s) for s in self.input_slots)
        object.__setattr__(self, "input_slots", slots)
        object.__setattr__(self, "hidden", tuple(int(w) for w in self.hidden))
        object.__setattr__(self, "u_max", (float(self.u_max[0]), float(self.u_max[1])))
        if len(slots) == 0:
            raise ValueError("policy needs at least one input slot")
        if len(set(slots)) != len(slots):
            raise ValueError("duplicate input slots")
        if min(slots) < 0 or max(slots) >= N_MEAS:
            raise ValueError(f"input slots must lie in [0, {N_MEAS})")
        if len(self.hidden) != 1:
            raise ValueError("exactly one hidden layer is supported")
        if self.hidden[0] < 1:
            raise ValueError("hidden width must be positive")
        if self.activation != "sigmoid":
            raise ValueError("only sigmoid activation is supported")
        if self.u_max[0] <= 0 or self.u_max[1] <= 0:
            raise ValueError("control bounds must be positive")

    @property
    def n_inputs(self) -> int:
        return len(self.input_slots)

    @property
    def width(self) -> int:
        return self.hidden[0]

    @property
    def theta_dim(self) -> int:
        """Length of the flat trainable vector, selection gate included."""
        ni, w = self.n_inputs, self.width
        return ni + w * ni + w + 2 * w + 2

    def slot_array(self) -> np.ndarray:
        return np.asarray(self.input_slots, dtype=np.int64)


@dataclass(frozen=True, eq=False)
class PolicyParams:
    """Trainable parameters of one controller.

    h is the diagonal selection gate, one entry per input slot; h_frozen
    marks entries excluded from further updates (pruned or pinned).
    """

    spec: PolicySpec
    h: np.ndarray
    w0: np.ndarray
    b0: np.ndarray
    w1: np.ndarray
    b1: np.ndarray
    h_frozen: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        ni, w = self.spec.n_inputs, self.spec.width
        object.__setattr__(self, "h", np.asarray(self.h, dtype=np.float64))
        object.__setattr__(self, "w0", np.asarray(self.w0, dtype=np.float64))
        object.__setattr__(self, "b0", np.asarray(self.b0, dtype=np.float64))
        object.__setattr__(self, "w1", np.asarray(self.w1, dtype=np.float64))
        object.__setattr__(self, "b1", np.asarray(self.b1, dtype=np.float64))
        if self.h_frozen is None:
            object.__setattr__(self, "h_frozen", np.zeros(ni, dtype=bool))
        else:
            object.__setattr__(
                self, "h_frozen", np.asarray(self.h_frozen, dtype=bool)
            )
        shapes = {
            "h": (self.h.shape, (ni,)),
            "w0": (self.w0.shape, (w, ni)),
            "b0": (self.b0.shape, (w,)),
            "w1": (self.w1.shape, (2, w)),
            "b1": (self.b1.shape, (2,)),
            "h_frozen": (self.h_frozen.shape, (ni,)),
        }
        for name, (got, want) in shapes.items():
            if got != want:
                raise ValueError(f"{name} has shape {got}, expected {want}")
        for name in ("h", "w0", "b0", "w1", "b1"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"{name} contains non-finite entries")

    @classmethod
    def init(cls, spec: PolicySpec, seed: int) -> "PolicyParams":
        """Glorot-uniform weights, zero biases, selection gate at one.

        Draw order is fixed (hidden weights, then output weights) so a seed
        pins the whole initial vector.
        """
        rng = np.random.default_rng(seed)
        ni, w = spec.n_inputs, spec.width
        lim0 = np.sqrt(6.0 / (ni + w))
        lim1 = np.sqrt(6.0 / (w + 2))
        w0 = rng.uniform(-lim0, lim0, size=(w, ni))
        w1 = rng.uniform(-lim1, lim1, size=(2, w))
        return cls(
            spec=spec,
            h=np.ones(ni),
            w0=w0,
            b0=np.zeros(w),
            w1=w1,
            b1=np.zeros(2),
        )

    @classmethod
    def zeros(cls, spec: PolicySpec) -> "PolicyParams":
        ni, w = spec.n_inputs, spec.width
        return cls(
            spec=spec,
            h=np.zeros(ni),
            w0=np.zeros((w, ni)),
            b0=np.zeros(w),
            w1=np.zeros((2, w)),
            b1=np.zeros(2),
        )

    def flatten(self) -> np.ndarray:
        """Flat vector [h, w0 row-major, b0, w1 row-major, b1]."""
        return np.concatenate(
            [self.h, self.w0.ravel(), self.b0, self.w1.ravel(), self.b1]
        )

    def with_theta(self, theta: np.ndarray) -> "PolicyParams":
        """Rebuild parameters from a flat vector (inverse of flatten)."""
        ni, w = self.spec.n_inputs, self.spec.width
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != (self.spec.theta_dim,):
            raise ValueError(
                f"theta has shape {theta.shape}, expected ({self.spec.theta_dim},)"
            )
        o = ni
        w0 = theta[o : o + w * ni].reshape(w, ni)
        o += w * ni
        b0 = theta[o : o + w]
        o += w
        w1 = theta[o : o + 2 * w].reshape(2, w)
        o += 2 * w
        b1 = theta[o : o + 2]
        return PolicyParams(
            spec=self.spec,
            h=theta[:ni].copy(),
            w0=w0.copy(),
            b0=b0.copy(),
            w1=w1.copy(),
            b1=b1.copy(),
            h_frozen=self.h_frozen.copy(),
        )

    def frozen_theta_mask(self) -> np.ndarray:
        """Boolean mask over the flat vector: True where updates are blocked."""
        mask = np.zeros(self.spec.theta_dim, dtype=bool)
        mask[: self.spec.n_inputs] = self.h_frozen
        return mask


def normalize_inputs(meas: np.ndarray, params: ColumnParams) -> np.ndarray:
    """Scale temperature slots to [0, 1] by the boiling-point span.

    Flow, fraction and holdup slots pass through unchanged; they already
    live on an order-one scale.
    """
    meas = np.asarray(meas, dtype=np.float64)
    if meas.shape[-1] != N_MEAS:
        raise ValueError(f"expected {N_MEAS} measurement slots, got {meas.shape}")
    span = params.T_bH - params.T_bL
    out = meas.astype(np.float64, copy=True)
    out[..., : params.N_T] = (meas[..., : params.N_T] - params.T_bL) / span
    out[..., SLOT_TF] = (meas[..., SLOT_TF] - params.T_bL) / span
    return out


def forward(
    pol: PolicyParams, meas: np.ndarray, params: ColumnParams
) -> Controls:
    """Evaluate the controller on one (noisy) measurement vector."""
    zeta = normalize_inputs(meas, params)
    sel = pol.spec.slot_array()
    g = pol.h * zeta[sel]
    hid = _sigmoid(pol.w0 @ g + pol.b0)
    s = _sigmoid(pol.w1 @ hid + pol.b1)
    u = np.asarray(pol.spec.u_max) * s
    return Controls(float(u[0]), float(u[1]))


def forward_batch(
    pol: PolicyParams, meas: np.ndarray, params: ColumnParams
) -> np.ndarray:
    """Vectorised forward pass over a batch of measurement rows."""
    zeta = normalize_inputs(meas, params)
    sel = pol.spec.slot_array()
    g = pol.h * zeta[..., sel]
    hid = _sigmoid(g @ pol.w0.T + pol.b0)
    s = _sigmoid(hid @ pol.w1.T + pol.b1)
    return np.asarray(pol.spec.u_max) * s


def prune_selection(pol: PolicyParams, tol: float = PRUNE_TOL):
    """Zero and freeze selection-gate entries with |h| below tol.

    Returns (pruned params, selected) where selected holds the 1-based
    positions, within the policy's input list, of the surviving entries.
    """
    h = pol.h.copy()
    keep = np.abs(h) >= tol
    h[~keep] = 0.0
    frozen = pol.h_frozen | ~keep
    pruned = replace(pol, h=h, h_frozen=frozen)
    selected = tuple(int(i) + 1 for i in np.nonzero(keep)[0])
    if not selected:
        warnings.warn(
            "pruning removed every selection-gate entry; the controller "
            "no longer sees any measurement",
            RuntimeWarning,
            stacklevel=2,
        )
    return pruned, selected


def freeze_gate(pol: PolicyParams) -> PolicyParams:
    """Pin the whole selection gate at its current values."""
    return replace(pol, h_frozen=np.ones(pol.spec.n_inputs, dtype=bool))


def to_json_dict(pol: PolicyParams, meta: dict | None = None) -> dict:
    """JSON-ready representation; input slots are recorded 1-based."""
    return {
        "format": "colflux-policy-1",
        "input_slots": [s + 1 for s in pol.spec.input_slots],
        "hidden": list(pol.spec.hidden),
        "u_max": list(pol.spec.u_max),
        "activation": pol.spec.activation,
        "h": pol.h.tolist(),
        "h_frozen": pol.h_frozen.astype(int).tolist(),
        "w0": pol.w0.tolist(),
        "b0": pol.b0.tolist(),
        "w1": pol.w1.tolist(),
        "b1": pol.b1.tolist(),
        "meta": dict(meta or {}),
    }


def from_json_dict(doc: dict) -> PolicyParams:
    if doc.get("format") != "colflux-policy-1":
        raise ValueError(f"unrecognised policy format: {doc.get('format')!r}")
    spec = PolicySpec(
        input_slots=tuple(int(s) - 1 for s in doc["input_slots"]),
        hidden=tuple(doc["hidden"]),
        u_max=tuple(doc["u_max"]),
        activation=doc["activation"],
    )
    return PolicyParams(
        spec=spec,
        h=np.array(doc["h"], dtype=np.float64),
        w0=np.array(doc["w0"], dtype=np.float64),
        b0=np.array(doc["b0"], dtype=np.float64),
        w1=np.array(doc["w1"], dtype=np.float64),
        b1=np.array(doc["b1"], dtype=np.float64),
        h_frozen=np.array(doc["h_frozen"], dtype=bool),
    )


def serialize(pol: PolicyParams, meta: dict | None = None) -> bytes:
    """Round-trip-exact byte encoding (floats are written as repr)."""
    return json.dumps(to_json_dict(pol, meta), indent=1, sort_keys=True).encode()


def deserialize(data: bytes) -> PolicyParams:
    return from_json_dict(json.loads(data.decode()))


def save(pol: PolicyParams, path, meta: dict | None = None) -> None:
    with open(path, "wb") as fh:
        fh.write(serialize(pol, meta))


def load(path) -> PolicyParams:
    with open(path, "rb") as fh:
        return deserialize(fh.read())


def load_meta(path) -> dict:
    with open(path) as fh:
        return json.load(fh).get("meta", {})
