"""Convergence measurement: residuals, KKT criterion, rates, cone gaps."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np


@dataclass
class ConvergenceTrace:
    """Per-iteration record of a primal-dual run.

    h_last is the quadratic feasibility residual 0.5*||Ax-b||^2 of the last
    iterate, h_erg the same for the running mean of the iterates; kkt is
    NaN on iterations where it was not evaluated.
    """

    k: list = field(default_factory=list)
    cost: list = field(default_factory=list)
    h_last: list = field(default_factory=list)
    h_erg: list = field(default_factory=list)
    resid_inf: list = field(default_factory=list)
    kkt: list = field(default_factory=list)
    dlmp_drift: list = field(default_factory=list)
    y_snapshots: dict = field(default_factory=dict)

    def record(self, k, cost, h_last, h_erg, resid_inf, kkt=np.nan,
               dlmp_drift=np.nan, y=None):
        if self.k and k <= self.k[-1]:
            raise ValueError("trace records must be strictly increasing in k")
        if h_last < 0 or (not np.isnan(h_erg) and h_erg < 0):
            raise ValueError("feasibility residuals are nonnegative")
        self.k.append(int(k))
        self.cost.append(float(cost))
        self.h_last.append(float(h_last))
        self.h_erg.append(float(h_erg))
        self.resid_inf.append(float(resid_inf))
        self.kkt.append(float(kkt))
        self.dlmp_drift.append(float(dlmp_drift))
        if y is not None:
            self.y_snapshots[int(k)] = np.array(y, copy=True)

    def as_arrays(self):
        return {name: np.asarray(getattr(self, name), dtype=float)
                for name in ("k", "cost", "h_last", "h_erg", "resid_inf",
                             "kkt", "dlmp_drift")}

    def last_kkt(self):
        vals = [v for v in self.kkt if not np.isnan(v)]
        return vals[-1] if vals else np.nan


def write_trace_csv(trace: ConvergenceTrace, path):
    cols = trace.as_arrays()
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["k", "cost", "h_last", "h_erg", "resid_inf", "kkt",
                         "dlmp_drift"])
        for i in range(len(cols["k"])):
            writer.writerow([int(cols["k"][i])] + [
                repr(cols[c][i]) for c in ("cost", "h_last", "h_erg",
                                           "resid_inf", "kkt", "dlmp_drift")])


def write_dlmp_csv(path, bus_ids, y_p, y_q):
    """Price snapshot: one row (bus, t, y_p, y_q) per bus and period."""
    y_p = np.asarray(y_p)
    y_q = np.asarray(y_q)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bus", "t", "y_p", "y_q"])
        for i, n in enumerate(bus_ids):
            for t in range(y_p.shape[1]):
                writer.writerow([n, t, repr(float(y_p[i, t])), repr(float(y_q[i, t]))])


def read_dlmp_csv(path):
    rows = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            rows[(int(row["bus"]), int(row["t"]))] = (float(row["y_p"]),
                                                      float(row["y_q"]))
    return rows


# ---------------------------------------------------------------------------

def kkt_residual(parts, y, problem, scales=None, tol=1e-11) -> float:
    """Stationarity surrogate paired with primal feasibility.

    Returns the larger of (a) the metric-scaled prox residual
    ||x - Pi_X(x - D^{-1}(grad_phi(x) + A'y))||_inf, which vanishes exactly
    at saddle points, and (b) ||Ax - b||_inf.
    """
    worst = 0.0
    for i, blk in enumerate(problem.blocks):
        d_i = 1.0 if scales is None else scales[i]
        w = parts[i] - (blk.cost.grad(parts[i]) + blk.A.T @ y) / d_i
        proj = blk.project(w, tol=tol)
        worst = max(worst, float(np.max(np.abs(parts[i] - proj), initial=0.0)))
    feas = float(np.max(np.abs(problem.residual(parts)), initial=0.0))
    return max(worst, feas)


def cone_tightness(x0, layout):
    """Per-(line, period) relaxation gap v*l - (f^2 + g^2); zero everywhere
    means the conic relaxation is exact at this point."""
    x0 = np.asarray(x0)
    f, g = x0[layout.idx_f], x0[layout.idx_g]
    v, l = x0[layout.idx_v], x0[layout.idx_l]
    return v * l - (f * f + g * g)


def rate_fit(trace: ConvergenceTrace, window):
    """OLS slopes of log h(x^k) and log h(s^k) against log k on a window.

    ``window`` is an inclusive (k_lo, k_hi) range.  Returns (slope_last,
    slope_erg); entries with nonpositive or missing h are dropped.
    """
    k_lo, k_hi = window
    arrays = trace.as_arrays()
    k = arrays["k"]
    sel = (k >= k_lo) & (k <= k_hi) & (k >= 1)
    if sel.sum() < 2:
        raise ValueError(f"degenerate window {window}")

    def slope(values):
        mask = sel & (values > 0) & ~np.isnan(values)
        if mask.sum() < 2:
            raise ValueError(f"window {window} has fewer than two positive samples")
        lx = np.log(k[mask])
        ly = np.log(values[mask])
        return float(np.polyfit(lx, ly, 1)[0])

    return slope(arrays["h_last"]), slope(arrays["h_erg"])


def dual_drift(y_history, window=50):
    """||y^k - y^{k-window}||_inf given the recent dual history (deque)."""
    if len(y_history) <= window:
        return np.nan
    return float(np.max(np.abs(y_history[-1] - y_history[-1 - window])))
