"""CSV artifacts.  Every file has a header row naming its columns."""
from __future__ import annotations

import csv
from pathlib import Path

import numpy as np


def write_csv(path, header, rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])
    return path


def read_csv(path):
    """(header, float array of shape (rows, cols))."""
    with open(path, newline="") as fh:
        rd = csv.reader(fh)
        header = next(rd)
        rows = [[float(v) for v in row] for row in rd]
    return header, np.array(rows, float).reshape(len(rows), len(header))


def _fmt(v):
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def trajectories_rows(tr, policy_name: str = ""):
    """Rows (trajectory, t, x1.., u) for a Trajectories batch."""
    M, T, n = tr.x.shape
    for j in range(M):
        for k in range(T):
            yield [j, tr.t[k], *tr.x[j, k], tr.u[j, k]]


def write_trajectories(path, tr, dim: int | None = None) -> Path:
    n = tr.x.shape[2] if tr is not None else int(dim)
    header = ["trajectory", "t"] + [f"x{i + 1}" for i in range(n)] + ["u"]
    rows = [] if tr is None else trajectories_rows(tr)
    return write_csv(path, header, rows)


def write_control_curve(path, X, u_data, u_analytic=None) -> Path:
    X = np.atleast_2d(np.asarray(X, float))
    if X.shape[0] == 1 and X.shape[1] != 1:
        X = X.T
    cols = [f"x{i + 1}" for i in range(X.shape[1])] if X.shape[1] > 1 else ["x"]
    header = cols + ["u_data"] + (["u_analytic"] if u_analytic is not None else [])
    data = [X, np.asarray(u_data)[:, None]]
    if u_analytic is not None:
        data.append(np.asarray(u_analytic)[:, None])
    return write_csv(path, header, np.hstack(data))


def write_value_history(path, history, labels) -> Path:
    header = ["iteration"] + [f"W[{lab}]" for lab in labels] + ["spectral_radius", "cost", "cost_stderr"]
    rows = [[h.iteration, *h.W, h.spectral_radius, h.cost, h.cost_se] for h in history]
    return write_csv(path, header, rows)


def write_occupancy(path, points, density, visits, predicted) -> Path:
    """Per basis function: center, rho at the center, sum of psi_k over visited
    states, and the predicted integral of psi_k * rho."""
    points = np.atleast_2d(points)
    header = [f"c{i + 1}" for i in range(points.shape[1])] + ["rho", "visits", "predicted"]
    cols = [np.asarray(c, float)[:, None] for c in (density, visits, predicted)]
    return write_csv(path, header, np.hstack([points, *cols]))
