"""Trajectory error, relocation statistics, improvement percentages and alignment fitness."""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass

import numpy as np

from .geometry import Pose
from .odometry import IcpParams, _collinear, icp_register, kabsch


@dataclass(frozen=True)
class TrajectoryReport:
    errors: np.ndarray
    mae: float
    first_reloc: int | None
    reloc_count: int
    method: str = ""
    relocated: np.ndarray | None = None  # bool per frame


def _positions(traj) -> np.ndarray:
    out = []
    for p in traj:
        out.append(p.translation if isinstance(p, Pose) else np.asarray(p, dtype=np.float64)[:3])
    return np.array(out, dtype=np.float64).reshape(-1, 3)


def trajectory_mae(est, gt, events=(), method: str = "", first_reloc: int | None = None) -> TrajectoryReport:
    """Per-frame 3D position error against ground truth, with relocation statistics from ``events``.

    ``first_reloc`` overrides the value derived from the events, for runs
    whose initial alignment is not logged as a relocation.
    """
    a, b = _positions(est), _positions(gt)
    if len(a) != len(b):
        raise ValueError(f"trajectory lengths differ: {len(a)} vs {len(b)}")
    if len(a) == 0:
        raise ValueError("empty trajectory")
    err = np.linalg.norm(a - b, axis=1)
    accepted = [e for e in events if e.accepted]
    relocated = np.zeros(len(a), dtype=bool)
    for e in accepted:
        if 0 <= e.frame < len(a):
            relocated[e.frame] = True
    first = min((e.frame for e in accepted if e.kind == "initial"), default=None)
    if first_reloc is not None:
        first = first_reloc
    return TrajectoryReport(err, float(err.mean()), first, len(accepted), method, relocated)


def improvement_pct(mae_baseline: float, mae_ours: float) -> float:
    if mae_baseline == 0:
        raise ZeroDivisionError("baseline MAE is zero")
    if mae_baseline < 0 or mae_ours < 0:
        raise ValueError("MAE values must be non-negative")
    return 100.0 * (mae_baseline - mae_ours) / mae_baseline


def align_fitness(est, gt, params: IcpParams | None = None) -> float:
    """Mean squared residual after rigidly aligning ``est`` onto ``gt``.

    Frame-aligned inputs (equal length) use index correspondences, for which
    the closed-form fit is the ICP fixed point; otherwise nearest-neighbour
    ICP runs from the identity with the given parameters.
    """
    a, b = _positions(est), _positions(gt)
    if len(a) < 3 or len(b) < 3:
        raise ValueError("alignment needs at least 3 positions")
    if _collinear(a) or _collinear(b):
        raise ValueError("degenerate alignment: positions are collinear")
    if len(a) == len(b):
        T = kabsch(a, b)
        return float(np.mean(np.sum((T.apply(a) - b) ** 2, axis=1)))
    params = params or IcpParams(max_corr_dist=1e6)
    res = icp_register(a, b, Pose.identity(), params)
    if not res.ok:
        raise ValueError("degenerate alignment")
    return res.fitting_score


def write_errors_csv(path: str | os.PathLike, report: TrajectoryReport) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame", "err_m", "relocated"])
        rel = report.relocated if report.relocated is not None else np.zeros(len(report.errors), bool)
        for i, (e, r) in enumerate(zip(report.errors, rel)):
            w.writerow([i, f"{e:.6f}", int(r)])


SUMMARY_HEADER = ["map", "sequence", "method", "first_reloc", "reloc_count", "mae_m", "improvement_pct"]


def summary_rows(map_name: str, sequence: str, reports: dict[str, TrajectoryReport], baseline: str = "lego") -> list[list]:
    """Table rows per method; improvement is relative to ``baseline`` when present."""
    rows = []
    base = reports.get(baseline)
    for method, rep in reports.items():
        imp = ""
        if base is not None and method != baseline and base.mae > 0:
            imp = f"{improvement_pct(base.mae, rep.mae):.2f}"
        first = "" if rep.first_reloc is None else rep.first_reloc
        rows.append([map_name, sequence, method, first, rep.reloc_count, f"{rep.mae:.2f}", imp])
    return rows


def write_summary_csv(path: str | os.PathLike, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SUMMARY_HEADER)
        w.writerows(rows)


def concat_mae(reports) -> float:
    """MAE over the concatenation of several error series."""
    errs = np.concatenate([r.errors for r in reports])
    return float(errs.mean()) if len(errs) else math.nan
