"""Coupled system assembly: block layouts, balance rows, costs, smoothness.

The decision vector is split into one network-operator block
x0 = (p0, q0, f, g, v, l) and one block per aggregator holding
(p_c, p_p, q_p) for each managed bus and period.  The coupling rows are the
active and reactive flow-balance equations of every non-root bus, ordered
active rows first (bus-major, period-minor), and their duals are the
locational prices.  The root's own balance is not a coupling row; it lives
in the affine part of the network set, so the dual vector stays 2*N*T
dimensional.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import NetworkInstance, ancestor_map
from .projections import DsoFeasibleSet, DsoProjector, LaFeasibleSet, prox_la, prox_dso
from .solver import BlockProblem


# ---------------------------------------------------------------------------
# layouts

@dataclass(frozen=True)
class DsoLayout:
    """Index map inside the network block: p0, q0 in R^T and f, g, v, l in
    R^{N x T}; total dimension 2T + 4NT."""

    T: int
    bus_ids: tuple[int, ...]          # non-root buses, ascending
    idx_p0: np.ndarray
    idx_q0: np.ndarray
    idx_f: np.ndarray                 # (N, T)
    idx_g: np.ndarray
    idx_v: np.ndarray
    idx_l: np.ndarray

    @classmethod
    def build(cls, instance: NetworkInstance) -> "DsoLayout":
        T = instance.T
        ids = tuple(b.id for b in instance.grid_buses)
        N = len(ids)
        grid = np.arange(N * T).reshape(N, T)
        off = 2 * T
        return cls(
            T=T, bus_ids=ids,
            idx_p0=np.arange(0, T),
            idx_q0=np.arange(T, 2 * T),
            idx_f=off + grid,
            idx_g=off + N * T + grid,
            idx_v=off + 2 * N * T + grid,
            idx_l=off + 3 * N * T + grid,
        )

    @property
    def N(self) -> int:
        return len(self.bus_ids)

    @property
    def dim(self) -> int:
        return 2 * self.T + 4 * self.N * self.T

    def pos(self, bus_id: int) -> int:
        return self.bus_ids.index(bus_id)

    def row_p(self, bus_id: int, t: int) -> int:
        """Coupling row of the active balance at (bus, t)."""
        return self.pos(bus_id) * self.T + t

    def row_q(self, bus_id: int, t: int) -> int:
        return self.N * self.T + self.pos(bus_id) * self.T + t

    @property
    def n_rows(self) -> int:
        return 2 * self.N * self.T


@dataclass(frozen=True)
class LaLayout:
    """Index map inside one aggregator block: per managed bus (ascending),
    contiguous (p_c, p_p, q_p) runs of length T each."""

    T: int
    bus_ids: tuple[int, ...]

    @property
    def dim(self) -> int:
        return 3 * len(self.bus_ids) * self.T

    def col_pc(self, j: int, t: int) -> int:
        return (3 * j + 0) * self.T + t

    def col_pp(self, j: int, t: int) -> int:
        return (3 * j + 1) * self.T + t

    def col_qp(self, j: int, t: int) -> int:
        return (3 * j + 2) * self.T + t


# ---------------------------------------------------------------------------
# coupling system

@dataclass(frozen=True)
class CouplingSystem:
    """A0 x0 + sum_a A_a x_a = b with b split as b0 + sum_a b_a."""

    layout: DsoLayout
    la_layouts: tuple[LaLayout, ...]
    A0: np.ndarray
    A_blocks: tuple[np.ndarray, ...]
    b: np.ndarray
    b0: np.ndarray
    b_blocks: tuple[np.ndarray, ...]

    def residual(self, x0, la_vectors):
        r = self.A0 @ x0 - self.b
        for A_a, x_a in zip(self.A_blocks, la_vectors):
            r += A_a @ x_a
        return r


def build_coupling(instance: NetworkInstance) -> CouplingSystem:
    """Assemble the flow-balance rows of a validated instance.

    Active row at (n, t):  f_n - sum_children(f_m - R_m*l_m) + p_n + g_n*v_n
    Reactive row at (n, t): g_n - sum_children(g_m - X_m*l_m) + q_n - B_n*v_n
    with p_n = p_c - p_p and q_n = tau_n*p_c - q_p contributed by the
    aggregator owning bus n.  All-flexible instances have b = 0.
    """
    lay = DsoLayout.build(instance)
    T, q = instance.T, lay.n_rows
    _, children = ancestor_map(instance)
    bus = {b.id: b for b in instance.buses}

    A0 = np.zeros((q, lay.dim))
    for n in lay.bus_ids:
        i = lay.pos(n)
        for t in range(T):
            rp, rq = lay.row_p(n, t), lay.row_q(n, t)
            A0[rp, lay.idx_f[i, t]] += 1.0
            A0[rq, lay.idx_g[i, t]] += 1.0
            A0[rp, lay.idx_v[i, t]] += bus[n].g
            A0[rq, lay.idx_v[i, t]] -= bus[n].B
            for m in children[n]:
                j = lay.pos(m)
                A0[rp, lay.idx_f[j, t]] -= 1.0
                A0[rp, lay.idx_l[j, t]] += bus[m].R
                A0[rq, lay.idx_g[j, t]] -= 1.0
                A0[rq, lay.idx_l[j, t]] += bus[m].X

    la_layouts = []
    A_blocks = []
    b_blocks = []
    for agg in instance.aggregator_ids():
        ids = tuple(instance.aggregator_buses(agg))
        la = LaLayout(T=T, bus_ids=ids)
        A_a = np.zeros((q, la.dim))
        for j, n in enumerate(ids):
            tau = instance.profile(n).tau
            for t in range(T):
                rp, rq = lay.row_p(n, t), lay.row_q(n, t)
                A_a[rp, la.col_pc(j, t)] += 1.0
                A_a[rq, la.col_pc(j, t)] += tau
                A_a[rp, la.col_pp(j, t)] -= 1.0
                A_a[rq, la.col_qp(j, t)] -= 1.0
        la_layouts.append(la)
        A_blocks.append(A_a)
        b_blocks.append(np.zeros(q))

    return CouplingSystem(
        layout=lay, la_layouts=tuple(la_layouts), A0=A0,
        A_blocks=tuple(A_blocks), b=np.zeros(q), b0=np.zeros(q),
        b_blocks=tuple(b_blocks),
    )


def dso_affine_rows(instance: NetworkInstance, lay: DsoLayout):
    """Affine equalities internal to the network block: Ohm's law per line
    and period, plus the root power balance (the root injection is the net
    of what its child lines deliver)."""
    T = instance.T
    _, children = ancestor_map(instance)
    bus = {b.id: b for b in instance.buses}
    root = instance.root
    n_rows = lay.N * T + 2 * T
    C = np.zeros((n_rows, lay.dim))
    d = np.zeros(n_rows)

    r = 0
    for n in lay.bus_ids:
        i = lay.pos(n)
        bn = bus[n]
        for t in range(T):
            C[r, lay.idx_v[i, t]] = 1.0
            C[r, lay.idx_f[i, t]] = -2.0 * bn.R
            C[r, lay.idx_g[i, t]] = -2.0 * bn.X
            C[r, lay.idx_l[i, t]] = bn.R**2 + bn.X**2
            if bn.parent == root.id:
                d[r] = instance.v0
            else:
                C[r, lay.idx_v[lay.pos(bn.parent), t]] = -1.0
            r += 1
    for t in range(T):
        C[r, lay.idx_p0[t]] = 1.0
        for m in children[root.id]:
            j = lay.pos(m)
            C[r, lay.idx_f[j, t]] = -1.0
            C[r, lay.idx_l[j, t]] = bus[m].R
        d[r] = -root.g * instance.v0
        r += 1
    for t in range(T):
        C[r, lay.idx_q0[t]] = 1.0
        for m in children[root.id]:
            j = lay.pos(m)
            C[r, lay.idx_g[j, t]] = -1.0
            C[r, lay.idx_l[j, t]] = bus[m].X
        d[r] = root.B * instance.v0
        r += 1
    return C, d


def build_dso_geometry(instance: NetworkInstance, lay: DsoLayout) -> DsoFeasibleSet:
    C, d = dso_affine_rows(instance, lay)
    T = instance.T
    R = np.array([[b.R] * T for b in instance.grid_buses])
    X = np.array([[b.X] * T for b in instance.grid_buses])
    S = np.array([[b.S] * T for b in instance.grid_buses])
    v_min = np.array([[b.v_min] * T for b in instance.grid_buses])
    v_max = np.array([[b.v_max] * T for b in instance.grid_buses])
    return DsoFeasibleSet(
        m0=lay.dim, idx_p0=lay.idx_p0, idx_q0=lay.idx_q0,
        idx_f=lay.idx_f, idx_g=lay.idx_g, idx_v=lay.idx_v, idx_l=lay.idx_l,
        C=C, d=d, R=R, X=X, S=S, v_min=v_min, v_max=v_max,
    )


# ---------------------------------------------------------------------------
# costs

class DsoCost:
    """Root generation cost plus resistive-loss penalty.

    Per period t the root production s = -p0_t >= 0 costs
    lin_t*s + quad_t*s^2; losses cost k_loss * sum R_n * l_{n,t}.
    """

    def __init__(self, instance: NetworkInstance, lay: DsoLayout):
        self.lay = lay
        self.lin = np.array([c[0] for c in instance.cost])
        self.quad = np.array([c[1] for c in instance.cost])
        self.k_loss = instance.k_loss
        self.loss_coef = instance.k_loss * np.array(
            [[b.R] * instance.T for b in instance.grid_buses])

    def value(self, x0) -> float:
        p0 = x0[self.lay.idx_p0]
        gen = np.sum(self.lin * (-p0) + self.quad * p0 * p0)
        loss = np.sum(self.loss_coef * x0[self.lay.idx_l])
        return float(gen + loss)

    def grad(self, x0):
        g = np.zeros_like(x0)
        g[self.lay.idx_p0] = -self.lin + 2.0 * self.quad * x0[self.lay.idx_p0]
        g[self.lay.idx_l] = self.loss_coef
        return g

    def lam_diag(self):
        lam = np.zeros(self.lay.dim)
        lam[self.lay.idx_p0] = 2.0 * self.quad
        return lam


class ZeroCost:
    """Indifferent aggregator: zero cost, zero gradient, zero curvature."""

    def __init__(self, dim: int):
        self.dim = dim

    def value(self, x) -> float:
        return 0.0

    def grad(self, x):
        return np.zeros(self.dim)

    def lam_diag(self):
        return np.zeros(self.dim)


class QuadraticCost:
    """0.5 * x' diag(w) x, mainly for tests and synthetic problems."""

    def __init__(self, dim: int, weights=1.0):
        self.dim = dim
        self.w = np.broadcast_to(np.asarray(weights, dtype=float), (dim,)).copy()

    def value(self, x) -> float:
        return float(0.5 * np.sum(self.w * np.asarray(x) ** 2))

    def grad(self, x):
        return self.w * np.asarray(x)

    def lam_diag(self):
        return self.w.copy()


def dso_cost(instance: NetworkInstance, x0) -> float:
    """Network operator cost of one block vector."""
    lay = DsoLayout.build(instance)
    x0 = np.asarray(x0, dtype=float)
    if x0.shape != (lay.dim,):
        raise ValueError(f"expected block vector of length {lay.dim}, got {x0.shape}")
    return DsoCost(instance, lay).value(x0)


def la_cost(cost, x_a) -> float:
    """Aggregator cost; the benchmark default is identically zero."""
    return cost.value(np.asarray(x_a, dtype=float))


def smoothness_matrix(problem) -> np.ndarray:
    """Block-diagonal curvature bound for the separable smooth cost.

    Returns the dense diagonal matrix whose blocks are each cost's
    second-derivative diagonal; the quadratic upper model built from it
    dominates every block cost on its domain.
    """
    lam = np.concatenate([blk.cost.lam_diag() for blk in problem.blocks])
    return np.diag(lam)


# ---------------------------------------------------------------------------
# block problem

class DsoBlock:
    """Network-operator block: cones and affine physics, iterative prox."""

    def __init__(self, instance: NetworkInstance, lay: DsoLayout, A0, b0, cost):
        self.layout = lay
        self.A = A0
        self.b_own = b0
        self.cost = cost
        self.dim = lay.dim
        self.v0 = instance.v0
        self.geometry = build_dso_geometry(instance, lay)
        self._prox_proj = DsoProjector(self.geometry)
        self._pure_proj = DsoProjector(self.geometry)
        self.last_inner = (0.0, 0)

    def start(self):
        return self.geometry.start(self.v0)

    def prox(self, anchor, grad, scale, tol=1e-10, strict=False):
        x, residual, cycles = prox_dso(self._prox_proj, anchor, grad, scale,
                                       tol=tol, strict=strict)
        self.last_inner = (residual, cycles)
        return x

    def project(self, w, tol=1e-11):
        """Projection for diagnostics; keeps the prox warm start untouched."""
        x, _, _ = self._pure_proj.project(np.asarray(w, dtype=float), tol=tol)
        return x

    def contains(self, x, tol=1e-8):
        return self.geometry.violation(np.asarray(x, dtype=float)) <= tol


class LaBlock:
    """Aggregator block: polyhedral set with exact closed-form prox."""

    def __init__(self, agg_id, la_set: LaFeasibleSet, A_a, b_a, cost):
        self.agg_id = agg_id
        self.set = la_set
        self.A = A_a
        self.b_own = b_a
        self.cost = cost
        self.dim = la_set.dim

    def start(self):
        return self.set.start()

    def prox(self, anchor, grad, scale, tol=None, strict=False):
        return prox_la(self.set, anchor, grad, scale)

    def project(self, w, tol=None):
        return self.set.project(np.asarray(w, dtype=float))

    def contains(self, x, tol=1e-9):
        return self.set.contains(x, tol=tol)


class OpfProblem(BlockProblem):
    """Coupled network/aggregator problem in block form."""

    def __init__(self, instance: NetworkInstance, la_costs=None):
        self.instance = instance
        self.coupling = build_coupling(instance)
        lay = self.coupling.layout
        self.layout = lay

        blocks = [DsoBlock(instance, lay, self.coupling.A0, self.coupling.b0,
                           DsoCost(instance, lay))]
        self.agg_ids = instance.aggregator_ids()
        for k, agg in enumerate(self.agg_ids):
            la = LaFeasibleSet.from_profiles(
                [instance.profile(n) for n in instance.aggregator_buses(agg)])
            cost = None if la_costs is None else la_costs.get(agg)
            cost = cost or ZeroCost(la.dim)
            blocks.append(LaBlock(agg, la, self.coupling.A_blocks[k],
                                  self.coupling.b_blocks[k], cost))
        super().__init__(blocks, self.coupling.b)

    @property
    def n_aggregators(self) -> int:
        return len(self.blocks) - 1

    def dlmp(self, y):
        """Dual vector as (active, reactive) arrays of shape (N, T)."""
        NT = self.layout.N * self.layout.T
        y = np.asarray(y)
        return (y[:NT].reshape(self.layout.N, self.layout.T),
                y[NT:].reshape(self.layout.N, self.layout.T))


def build_opf_problem(instance: NetworkInstance, la_costs=None) -> OpfProblem:
    return OpfProblem(instance, la_costs=la_costs)


def export_triplets(matrix, path):
    """Write a dense matrix as 'row col value' triplets for external checks."""
    matrix = np.asarray(matrix)
    rows, cols = np.nonzero(matrix)
    with open(path, "w") as fh:
        fh.write(f"{matrix.shape[0]} {matrix.shape[1]} {len(rows)}\n")
        for r, c in zip(rows, cols):
            fh.write(f"{r} {c} {matrix[r, c]!r}\n")
