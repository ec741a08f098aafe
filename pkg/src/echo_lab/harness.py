"""Metrics stream, run manifest, and the refinement-scatter / failure-drift exports.

All outputs are plain text:

* ``metrics.jsonl``: one JSON object per train step, fixed key order
  (:data:`echo_lab.trainer.RECORD_FIELDS`), numbers at 9 significant digits.
* ``scatter.tsv``: ``#``-prefixed header with the window's step range, then
  tab-separated ``s_o  s_r`` rows, one per refinement, cascades with
  ``s_o == 1`` removed.
* ``drift.jsonl``: one ``histogram`` record per phase window followed by
  ``divergence`` records (Jensen-Shannon, natural log) between phase pairs.
* ``manifest.txt``: ``key = value`` lines echoing the full configuration.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence, TextIO

import numpy as np

from echo_lab.rollout import RolloutGroup
from echo_lab.toyworld import Trajectory, WorldSpec, mismatch_count
from echo_lab.trainer import RECORD_FIELDS, TrainRecord

__version__ = "0.1.0"


def format_number(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    if not math.isfinite(x):
        return "null"
    return format(x, ".9g")


# --------------------------------------------------------------------------
# metrics


def format_record(record: TrainRecord) -> str:
    parts = [f'"{name}":{format_number(getattr(record, name))}' for name in RECORD_FIELDS]
    return "{" + ",".join(parts) + "}"


def emit_metrics(record: TrainRecord, sink: TextIO) -> None:
    """Append one metrics line; I/O errors surface with the step index."""
    try:
        sink.write(format_record(record) + "\n")
        sink.flush()
    except OSError as exc:
        raise OSError(f"failed to write metrics for step {record.step}: {exc}") from exc


def read_metrics(path: str | Path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


# --------------------------------------------------------------------------
# scatter export


@dataclass
class ScatterWindow:
    first_step: int
    last_step: int
    rows: list[tuple[float, float]] = field(default_factory=list)

    @classmethod
    def from_groups(
        cls, groups_by_step: Sequence[tuple[int, Sequence[RolloutGroup]]]
    ) -> "ScatterWindow":
        if not groups_by_step:
            raise ValueError("scatter window is empty")
        steps = [s for s, _ in groups_by_step]
        win = cls(min(steps), max(steps))
        for _, groups in groups_by_step:
            for g in groups:
                if g.s_o >= 1.0:
                    continue
                win.rows.extend((g.s_o, s) for s in g.s_r)
        return win

    def improvement_mass(self, min_s_o: float = 0.0) -> float:
        """Fraction of rows with ``s_r > s_o`` among rows with ``s_o >= min_s_o``."""
        sel = [(a, b) for a, b in self.rows if a >= min_s_o]
        if not sel:
            return float("nan")
        return sum(b > a for a, b in sel) / len(sel)


def write_scatter(win: ScatterWindow, fh: TextIO) -> None:
    fh.write(f"# steps {win.first_step}-{win.last_step}\n")
    fh.write(f"# rows {len(win.rows)}\n")
    fh.write("s_o\ts_r\n")
    for a, b in win.rows:
        fh.write(f"{format_number(a)}\t{format_number(b)}\n")


def export_scatter(
    groups_by_step: Sequence[tuple[int, Sequence[RolloutGroup]]], path: str | Path
) -> ScatterWindow:
    win = ScatterWindow.from_groups(groups_by_step)
    with open(path, "w", encoding="utf-8") as fh:
        write_scatter(win, fh)
    return win


def read_scatter(path: str | Path) -> ScatterWindow:
    first = last = -1
    rows: list[tuple[float, float]] = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if line.startswith("# steps "):
                a, _, b = line[len("# steps "):].partition("-")
                first, last = int(a), int(b)
            elif line.startswith("#") or line == "s_o\ts_r" or not line:
                continue
            else:
                a, b = line.split("\t")
                rows.append((float(a), float(b)))
    return ScatterWindow(first, last, rows)


# --------------------------------------------------------------------------
# failure-drift analysis


@dataclass
class PhaseHistogram:
    """Counts of failed trajectories bucketed by mismatch count ``0..L``."""

    label: str
    counts: np.ndarray
    first_step: int = -1
    last_step: int = -1

    def __post_init__(self) -> None:
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if np.any(self.counts < 0):
            raise ValueError("histogram counts must be non-negative")

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @classmethod
    def from_trajectories(
        cls,
        label: str,
        world: WorldSpec,
        trajectories: Iterable[Trajectory],
        first_step: int = -1,
        last_step: int = -1,
    ) -> "PhaseHistogram":
        counts = np.zeros(world.seq_len + 1, dtype=np.int64)
        for t in trajectories:
            k = mismatch_count(world, t.query_id, t.tokens)
            if k > 0:
                counts[k] += 1
        return cls(label, counts, first_step, last_step)


def drift_divergence(h1: PhaseHistogram, h2: PhaseHistogram) -> float:
    """Jensen-Shannon divergence (nats) between two normalized histograms."""
    a = np.asarray(h1.counts, dtype=np.float64)
    b = np.asarray(h2.counts, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("histograms must share the same bucket space")
    if a.sum() == 0 and b.sum() == 0:
        raise ValueError("both histograms are empty")
    if a.sum() == 0 or b.sum() == 0:
        raise ValueError("cannot normalize an empty histogram")
    p, q = a / a.sum(), b / b.sum()
    m = 0.5 * (p + q)

    def kl(x: np.ndarray) -> float:
        nz = x > 0
        return float(np.sum(x[nz] * np.log(x[nz] / m[nz])))

    return 0.5 * kl(p) + 0.5 * kl(q)


def failed_proposals(groups: Sequence) -> list[Trajectory]:
    """Proposals from a step's groups (cascades or plain proposal lists)."""
    out: list[Trajectory] = []
    for g in groups:
        if isinstance(g, RolloutGroup):
            out.append(g.proposal)
        else:
            out.extend(g)
    return [t for t in out if t.score is not None and t.score < 1.0]


def phase_windows(steps: int, window: int) -> dict[str, tuple[int, int]]:
    """Half-open step ranges for the drift phases.

    ``early`` and ``early_next`` are the first two adjacent windows,
    ``intermediate`` is centred, ``late`` is the final window.
    """
    if steps <= 0:
        return {}
    w = max(1, min(window, steps // 4 if steps >= 4 else 1))
    mid = max(0, (steps - w) // 2)
    return {
        "early": (0, w),
        "early_next": (w, min(2 * w, steps)),
        "intermediate": (mid, mid + w),
        "late": (steps - w, steps),
    }


DRIFT_PAIRS = (("early", "early_next"), ("early", "intermediate"), ("early", "late"),
               ("intermediate", "late"))


def drift_report(
    world: WorldSpec,
    proposals_by_step: dict[int, list[Trajectory]],
    steps: int,
    window: int,
) -> tuple[dict[str, PhaseHistogram], dict[tuple[str, str], Optional[float]]]:
    hists: dict[str, PhaseHistogram] = {}
    for label, (lo, hi) in phase_windows(steps, window).items():
        trajs = [t for s in range(lo, hi) for t in proposals_by_step.get(s, [])]
        hists[label] = PhaseHistogram.from_trajectories(label, world, trajs, lo, hi - 1)
    divs: dict[tuple[str, str], Optional[float]] = {}
    for a, b in DRIFT_PAIRS:
        if a in hists and b in hists:
            try:
                divs[(a, b)] = drift_divergence(hists[a], hists[b])
            except ValueError:
                divs[(a, b)] = None
    return hists, divs


def write_drift(
    hists: dict[str, PhaseHistogram],
    divs: dict[tuple[str, str], Optional[float]],
    fh: TextIO,
) -> None:
    for h in hists.values():
        counts = ",".join(str(int(c)) for c in h.counts)
        fh.write(
            f'{{"kind":"histogram","phase":"{h.label}","first_step":{h.first_step},'
            f'"last_step":{h.last_step},"counts":[{counts}]}}\n'
        )
    for (a, b), d in divs.items():
        val = "null" if d is None else format_number(d)
        fh.write(f'{{"kind":"divergence","a":"{a}","b":"{b}","jsd":{val}}}\n')


def read_drift(path: str | Path) -> tuple[dict[str, PhaseHistogram], dict[tuple[str, str], Optional[float]]]:
    hists: dict[str, PhaseHistogram] = {}
    divs: dict[tuple[str, str], Optional[float]] = {}
    for rec in read_metrics(path):
        if rec["kind"] == "histogram":
            hists[rec["phase"]] = PhaseHistogram(
                rec["phase"], rec["counts"], rec["first_step"], rec["last_step"]
            )
        else:
            divs[(rec["a"], rec["b"])] = rec["jsd"]
    return hists, divs


# --------------------------------------------------------------------------
# manifest


def write_manifest(path: str | Path, entries: dict) -> None:
    lines = [f"# echo-lab run manifest"]
    for k, v in entries.items():
        lines.append(f"{k} = {v}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_manifest(path: str | Path) -> dict[str, str]:
    out: dict[str, str] = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        k, _, v = line.partition("=")
        out[k.strip()] = v.strip()
    return out
