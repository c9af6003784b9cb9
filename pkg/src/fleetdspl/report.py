"""Render a run trace as a per-tick CSV table and a matplotlib figure."""

from __future__ import annotations

import csv
import os
from collections.abc import Sequence

from fleetdspl.trace import TraceEvent

COLUMNS = ("t", "value", "effective", "total_current", "total_predicted", "adaptations", "commands", "mode")


def timeline_rows(events: Sequence[TraceEvent], variable: str = "soil_moisture") -> list[dict]:
    """One row per tick: last reading of ``variable`` plus loop outcomes."""
    rows: dict[int, dict] = {}
    adaptations = 0
    mode = ""
    for ev in events:
        row = rows.setdefault(ev.t, {c: "" for c in COLUMNS} | {"t": ev.t, "commands": 0})
        if ev.kind == "Reading" and ev.payload.get("variable") == variable:
            row["value"] = ev.payload["value"]
        elif ev.kind == "Analyze":
            for key in ("effective", "total_current", "total_predicted"):
                row[key] = ev.payload[key]
            mode = ev.payload.get("mode", mode)
        elif ev.kind == "ModeSwitch":
            mode = ev.payload["mode"]
        elif ev.kind == "Command":
            row["commands"] += 1
        elif ev.kind == "Adapt":
            adaptations += 1
        row["adaptations"] = adaptations
        row["mode"] = mode
    return [rows[t] for t in sorted(rows)]


def write_csv(rows: Sequence[dict], path: str) -> str:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=COLUMNS)
        writer.writeheader()
        writer.writerows(rows)
    return path


def plot_timeline(events: Sequence[TraceEvent], rows: Sequence[dict], path: str, variable: str = "soil_moisture") -> str:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, (ax_v, ax_s) = plt.subplots(2, 1, sharex=True, figsize=(9, 5.5))
    ts = [r["t"] for r in rows if r["value"] != ""]
    ax_v.plot(ts, [r["value"] for r in rows if r["value"] != ""], color="tab:blue", lw=1.2, label=variable)
    for ev in events:
        if ev.kind == "Adapt":
            ax_v.axvline(ev.t, color="tab:green", lw=0.6, alpha=0.5)
        elif ev.kind == "Fact":
            ax_v.axvline(ev.payload["valid_at"], color="tab:purple", ls="--", lw=0.8)
        elif ev.kind == "ModeSwitch":
            ax_v.axvline(ev.t, color="black", ls=":", lw=0.8)
        elif ev.kind == "Warning":
            ax_v.axvline(ev.t, color="tab:red", lw=0.8)
    ax_v.set_ylabel(variable)
    ax_v.legend(loc="upper right", frameon=False)

    analyzed = [r for r in rows if r["effective"] != ""]
    at = [r["t"] for r in analyzed]
    ax_s.step(at, [r["total_current"] for r in analyzed], where="post", lw=0.9, label="current")
    ax_s.step(at, [r["total_predicted"] for r in analyzed], where="post", lw=0.9, label="predicted")
    ax_s.step(at, [r["effective"] for r in analyzed], where="post", lw=1.4, color="black", label="effective")
    ax_s.set_ylim(-0.05, 1.05)
    ax_s.set_xlabel("tick")
    ax_s.set_ylabel("satisfaction")
    ax_s.legend(loc="lower right", frameon=False, ncol=3)

    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def render_report(events: Sequence[TraceEvent], out_dir: str, variable: str = "soil_moisture") -> tuple[str, str]:
    os.makedirs(out_dir, exist_ok=True)
    rows = timeline_rows(events, variable)
    csv_path = write_csv(rows, os.path.join(out_dir, "timeline.csv"))
    png_path = plot_timeline(events, rows, os.path.join(out_dir, "timeline.png"), variable)
    return csv_path, png_path
