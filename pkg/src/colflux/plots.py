"""SVG plot emission for trajectory and envelope CSV artifacts.

Two plot kinds cover the figures worth drawing from closed-loop runs: the
stage-temperature fan (every stage over time, the product ends highlighted,
pure-component boiling points dashed) and the control-input traces with an
optional noise-envelope band. Output is SVG with a pinned hash salt and no
creation date, so a fixed input file always yields identical bytes.
"""

from __future__ import annotations

import io

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

from .column import ColumnParams
from .sampling import load_table

KINDS = ("temperatures", "controls")

_RC = {
    "svg.hashsalt": "colflux",
    "figure.figsize": (8.0, 4.5),
    "figure.dpi": 100,
    "font.size": 10,
    "axes.grid": True,
    "grid.alpha": 0.3,
}


def _columns(path) -> dict:
    try:
        _, names, arr = load_table(path)
    except Exception as exc:
        raise ValueError(f"cannot read plot data from {path}: {exc}") from exc
    return {name: arr[:, i] for i, name in enumerate(names)}


def _temperature_figure(col: dict, params: ColumnParams):
    stages = sorted(
        (int(name[2:]) for name in col if name.startswith("T_")),
    )
    if not stages or "t" not in col:
        raise ValueError("temperature plot needs a t column and T_i columns")
    fig, ax = plt.subplots()
    t = col["t"]
    for i in stages:
        ax.plot(t, col[f"T_{i}"], color="0.7", linewidth=0.6, zorder=1)
    ax.plot(t, col[f"T_{stages[0]}"], color="#b02428", linewidth=1.6,
            label=f"reboiler T_{stages[0]}", zorder=3)
    ax.plot(t, col[f"T_{stages[-1]}"], color="#1f5fa8", linewidth=1.6,
            label=f"condenser T_{stages[-1]}", zorder=3)
    for bp in (params.T_bL, params.T_bH):
        ax.axhline(bp, color="black", linestyle="--", linewidth=1.0, zorder=2)
    ax.set_ylim(341.0, 358.0)
    ax.set_xlabel("time [min]")
    ax.set_ylabel("stage temperature [K]")
    ax.legend(loc="center right")
    return fig


def _control_figure(col: dict, params: ColumnParams):
    if "t" not in col or "L_T" not in col or "V_B" not in col:
        raise ValueError("control plot needs t, L_T, and V_B columns")
    fig, ax = plt.subplots()
    t = col["t"]
    has_band = "LT_lo" in col and "VB_lo" in col
    if has_band:
        ax.fill_between(t, col["LT_lo"], col["LT_hi"], color="#b02428",
                        alpha=0.25, linewidth=0, label="reflux noise range")
        ax.fill_between(t, col["VB_lo"], col["VB_hi"], color="#1f5fa8",
                        alpha=0.25, linewidth=0, label="boilup noise range")
    ax.plot(t, col["L_T"], color="#b02428", linewidth=1.4, label="reflux L_T")
    ax.plot(t, col["V_B"], color="#1f5fa8", linewidth=1.4, label="boilup V_B")
    ax.axhline(params.u_max[0], color="#b02428", linestyle=":", linewidth=1.0)
    ax.axhline(params.u_max[1], color="#1f5fa8", linestyle=":", linewidth=1.0)
    ax.axhline(0.0, color="black", linestyle=":", linewidth=0.8)
    ax.set_xlabel("time [min]")
    ax.set_ylabel("control input [kmol/min]")
    ax.legend(loc="center right")
    return fig


def emit_plot(csv_path, kind: str, out_path, params: ColumnParams | None = None) -> bytes:
    """Render one CSV artifact to SVG; returns the SVG bytes.

    kind selects between the stage-temperature fan and the control traces.
    Control plots pick up an envelope band automatically when the input
    carries LT_lo/LT_hi/VB_lo/VB_hi columns.
    """
    if kind not in KINDS:
        raise ValueError(f"unknown plot kind {kind!r}, expected one of {KINDS}")
    p = params or ColumnParams()
    col = _columns(csv_path)
    with plt.rc_context(_RC):
        if kind == "temperatures":
            fig = _temperature_figure(col, p)
        else:
            fig = _control_figure(col, p)
        buf = io.BytesIO()
        try:
            fig.savefig(buf, format="svg", metadata={"Date": None})
        finally:
            plt.close(fig)
    data = buf.getvalue()
    with open(out_path, "wb") as fh:
        fh.write(data)
    return data
