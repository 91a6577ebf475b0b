"""Exact projections and proximal steps for the per-block feasible sets.

Aggregator sets are polyhedral and are projected in closed form (box plus a
single energy budget via a monotone scalar dual, and a 2-D production wedge
by face enumeration).  The network-side set is an intersection of an affine
subspace (Ohm rows plus the root power balance), boxes, two flow disks per
line and period, and one rotated second-order cone per line and period; its
projection runs a Dykstra cycle over those families, every member of which
is projected exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve


# ---------------------------------------------------------------------------
# rotated second-order cone  {f^2 + g^2 <= v*l, v >= 0, l >= 0}

_SQ2 = np.sqrt(2.0)


def _elliptic_project(z, u, wsq):
    """Project rows of (z, u) onto {||W z|| <= u}, W = diag(sqrt(wsq)).

    Only called with u > 0 for points strictly outside both the cone and its
    polar.  The multiplier equation, cleared of its pole at t = 1, reads
    G(t) = (1-t)^2 * sum_j wsq_j z_j^2 / (1 + t*wsq_j)^2 - u^2 = 0 and is
    strictly decreasing on [0, 1]; solved by bracketed Newton.
    """
    zz = wsq * z * z
    u2 = u * u
    lo = np.zeros(u.shape)
    hi = np.ones(u.shape)
    t = np.zeros(u.shape)
    for _ in range(60):
        den = 1.0 + t[..., None] * wsq
        s1 = np.sum(zz / den**2, axis=-1)
        s2 = np.sum(wsq * zz / den**3, axis=-1)
        omt = 1.0 - t
        G = omt * omt * s1 - u2
        dG = -2.0 * omt * s1 - 2.0 * omt * omt * s2
        pos = G > 0
        lo = np.where(pos, t, lo)
        hi = np.where(pos, hi, t)
        step = np.where(dG < 0, G / dG, 0.0)
        t_new = t - step
        bad = (t_new <= lo) | (t_new >= hi)
        t_new = np.where(bad, 0.5 * (lo + hi), t_new)
        if np.max(np.abs(t_new - t)) < 1e-17:
            t = t_new
            break
        t = t_new
    z_new = z / (1.0 + t[..., None] * wsq)
    u_new = u / (1.0 - t)
    return z_new, u_new


def project_rotated_soc(points):
    """Euclidean projection onto the rotated cone, vectorized over rows.

    ``points`` has shape (..., 4) with columns (f, g, v, l).  The (v, l)
    plane is rotated to (s, u) = ((v-l)/sqrt2, (v+l)/sqrt2), an isometry
    under which the set becomes the elliptic cone 2f^2 + 2g^2 + s^2 <= u^2,
    u >= 0; the multiplier equation of that projection is solved exactly and
    the result is rotated back.
    """
    pts = np.asarray(points, dtype=float)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    f, g, v, l = pts[..., 0], pts[..., 1], pts[..., 2], pts[..., 3]
    s = (v - l) / _SQ2
    u = (v + l) / _SQ2
    z = np.stack([f, g, s], axis=-1)

    wsq = np.array([2.0, 2.0, 1.0])
    norm_w = np.sqrt(np.sum(wsq * z * z, axis=-1))
    inside = (norm_w <= u)
    # polar cone of the elliptic cone: u <= -||W^{-1} z||
    norm_winv = np.sqrt(np.sum(z * z / wsq, axis=-1))
    polar = (norm_winv <= -u) & ~inside

    z_out = z.copy()
    u_out = u.copy()
    z_out[polar] = 0.0
    u_out[polar] = 0.0

    rest = ~inside & ~polar
    if np.any(rest):
        zr, ur = z[rest], u[rest]
        zp = np.empty_like(zr)
        up = np.empty_like(ur)

        pos = ur > 0
        if np.any(pos):
            zp[pos], up[pos] = _elliptic_project(zr[pos], ur[pos], wsq)
        zero = ur == 0
        if np.any(zero):
            # multiplier sits exactly at 1/2; u comes from the active surface
            zz = zr[zero] / (1.0 + wsq)
            zp[zero] = zz
            up[zero] = np.sqrt(np.sum(wsq * zz * zz, axis=-1))
        neg = ur < 0
        if np.any(neg):
            # Moreau: P_E(x) = x + P_{E2}(-x) with E2 the polar's negative,
            # an elliptic cone with inverted weights and positive u part
            z2, u2 = _elliptic_project(-zr[neg], -ur[neg], 1.0 / wsq)
            zp[neg] = zr[neg] + z2
            up[neg] = ur[neg] + u2

        z_out[rest] = zp
        u_out[rest] = up

    f_o, g_o, s_o = z_out[..., 0], z_out[..., 1], z_out[..., 2]
    v_o = np.maximum((u_out + s_o) / _SQ2, 0.0)
    l_o = np.maximum((u_out - s_o) / _SQ2, 0.0)
    out = np.stack([f_o, g_o, v_o, l_o], axis=-1)
    # points already in the cone pass through bitwise
    out = np.where(inside[..., None], pts, out)
    return out[0] if single else out


# ---------------------------------------------------------------------------
# flow disks

def project_disk(f, g, radius):
    """Radial projection of (f, g) onto f^2 + g^2 <= radius^2."""
    r = np.hypot(f, g)
    scale = np.where(r > radius, radius / np.where(r > 0, r, 1.0), 1.0)
    return f * scale, g * scale


@dataclass
class FarDiskData:
    """Spectral data of B = [[1,0,-R],[0,1,-X]] per line, for the far-end
    disk (f - R*l)^2 + (g - X*l)^2 <= S^2 over variables (f, g, l)."""

    sig2: np.ndarray   # (..., 2) nonzero eigenvalues of B^T B
    V: np.ndarray      # (..., 3, 2) orthonormal eigenvectors
    S: np.ndarray      # (...,) radius

    @classmethod
    def build(cls, R, X, S):
        R, X, S = np.broadcast_arrays(*map(np.asarray, (R, X, S)))
        shape = R.shape
        BBt = np.empty(shape + (2, 2))
        BBt[..., 0, 0] = 1.0 + R * R
        BBt[..., 0, 1] = BBt[..., 1, 0] = R * X
        BBt[..., 1, 1] = 1.0 + X * X
        lam, U = np.linalg.eigh(BBt)
        # columns of B^T U scaled to unit length are eigenvectors of B^T B
        Bt = np.zeros(shape + (3, 2))
        Bt[..., 0, 0] = 1.0
        Bt[..., 1, 1] = 1.0
        Bt[..., 2, 0] = -R
        Bt[..., 2, 1] = -X
        V = Bt @ U
        V = V / np.linalg.norm(V, axis=-2, keepdims=True)
        return cls(sig2=lam, V=V, S=np.array(S, dtype=float))

    def project(self, f, g, l):
        x = np.stack([f, g, l], axis=-1)
        c = np.einsum("...ij,...i->...j", self.V, x)
        cc = self.sig2 * c * c
        S2 = self.S**2
        outside = np.sum(cc, axis=-1) > S2
        if not np.any(outside):
            return f, g, l
        # H(mu) = sum_j sig2_j c_j^2/(1+2 mu sig2_j)^2 - S^2 is decreasing
        # and convex, so Newton from 0 increases monotonically to the root
        mu = np.zeros(outside.shape)
        for _ in range(60):
            den = 1.0 + 2.0 * mu[..., None] * self.sig2
            H = np.sum(cc / den**2, axis=-1) - S2
            dH = np.sum(-4.0 * self.sig2 * cc / den**3, axis=-1)
            step = np.where(outside & (dH < 0), H / dH, 0.0)
            mu = mu - step
            if np.max(np.abs(step)) < 1e-18:
                break
        shrink = 1.0 / (1.0 + 2.0 * mu[..., None] * self.sig2) - 1.0
        x_new = x + np.einsum("...ij,...j->...i", self.V, shrink * c)
        x = np.where(outside[..., None], x_new, x)
        return x[..., 0], x[..., 1], x[..., 2]


# ---------------------------------------------------------------------------
# aggregator feasible set

def project_box_energy(w, lo, hi, energy, weights=None):
    """Project rows of w onto {lo <= p <= hi, sum(p) >= energy}.

    w, lo, hi: (nb, T); energy: (nb,).  The energy budget dual is found by
    bisection on the monotone map mu -> sum(clip(w + mu/d)); requires
    energy <= sum(hi) (validated at ingestion).  Returns (p, mu).
    """
    w = np.asarray(w, dtype=float)
    d = np.ones_like(w) if weights is None else np.broadcast_to(weights, w.shape)
    p = np.clip(w, lo, hi)
    need = np.sum(p, axis=-1) < energy
    mu = np.zeros(w.shape[:-1])
    if not np.any(need):
        return p, mu
    # sum_t clip(w + mu/d) is piecewise linear and nondecreasing in mu with
    # breakpoints where a coordinate enters/leaves its box; locate the
    # active segment and interpolate exactly
    zero_bp = np.zeros(w.shape[:-1] + (1,))
    bps = np.sort(np.concatenate([d * (lo - w), d * (hi - w), zero_bp], axis=-1),
                  axis=-1)
    totals = np.sum(np.clip(w[..., None, :] + bps[..., :, None] / d[..., None, :],
                            lo[..., None, :], hi[..., None, :]), axis=-1)
    j = np.sum(totals < np.asarray(energy)[..., None], axis=-1)
    j = np.clip(j, 1, bps.shape[-1] - 1)
    bp_hi = np.take_along_axis(bps, j[..., None], axis=-1)[..., 0]
    bp_lo = np.take_along_axis(bps, (j - 1)[..., None], axis=-1)[..., 0]
    m_hi = np.take_along_axis(totals, j[..., None], axis=-1)[..., 0]
    m_lo = np.take_along_axis(totals, (j - 1)[..., None], axis=-1)[..., 0]
    gap = m_hi - m_lo
    frac = np.where(gap > 0, (energy - m_lo) / np.where(gap > 0, gap, 1.0), 1.0)
    mu = np.where(need, bp_lo + frac * (bp_hi - bp_lo), 0.0)
    p = np.clip(w + mu[..., None] / d, lo, hi)
    return p, mu


def project_wedge(wp, wq, cap, rlo, rhi, weight_p=None, weight_q=None):
    """Project (wp, wq) elementwise onto {0 <= p <= cap, rlo*p <= q <= rhi*p}.

    The wedge is the convex hull of (0,0), (cap, rlo*cap), (cap, rhi*cap);
    outside points are resolved by projecting onto each edge segment and
    keeping the (weighted-) nearest feasible candidate.
    """
    wp = np.asarray(wp, dtype=float)
    wq = np.asarray(wq, dtype=float)
    dp = np.ones_like(wp) if weight_p is None else np.broadcast_to(weight_p, wp.shape)
    dq = np.ones_like(wq) if weight_q is None else np.broadcast_to(weight_q, wq.shape)

    inside = (wp >= 0) & (wp <= cap) & (rlo * wp <= wq) & (wq <= rhi * wp)

    def seg(ax, ay, bx, by):
        ex, ey = bx - ax, by - ay
        denom = dp * ex * ex + dq * ey * ey
        s = np.where(denom > 0,
                     (dp * (wp - ax) * ex + dq * (wq - ay) * ey) / np.where(denom > 0, denom, 1.0),
                     0.0)
        s = np.clip(s, 0.0, 1.0)
        px, py = ax + s * ex, ay + s * ey
        dist = dp * (wp - px) ** 2 + dq * (wq - py) ** 2
        return px, py, dist

    zeros = np.zeros_like(wp)
    cands = [
        seg(zeros, zeros, cap, rlo * cap),
        seg(zeros, zeros, cap, rhi * cap),
        seg(cap, rlo * cap, cap, rhi * cap),
    ]
    dists = np.stack([c[2] for c in cands])
    best = np.argmin(dists, axis=0)
    px = np.choose(best, [c[0] for c in cands])
    py = np.choose(best, [c[1] for c in cands])
    return np.where(inside, wp, px), np.where(inside, wq, py)


@dataclass
class LaFeasibleSet:
    """Stacked feasible-set data for the buses managed by one aggregator.

    The block vector is, per bus, the concatenation (p_c, p_p, q_p), each of
    length T.  Consumption reactive power is tied to p_c by the fixed ratio
    and is not a variable.
    """

    buses: list
    p_min: np.ndarray     # (nb, T)
    p_max: np.ndarray
    energy: np.ndarray    # (nb,)
    tau: np.ndarray       # (nb,)
    prod_max: np.ndarray  # (nb, T)
    ratio_min: np.ndarray
    ratio_max: np.ndarray

    @classmethod
    def from_profiles(cls, profiles):
        profiles = sorted(profiles, key=lambda p: p.bus)
        return cls(
            buses=[p.bus for p in profiles],
            p_min=np.array([p.p_min for p in profiles], dtype=float),
            p_max=np.array([p.p_max for p in profiles], dtype=float),
            energy=np.array([p.energy for p in profiles], dtype=float),
            tau=np.array([p.tau for p in profiles], dtype=float),
            prod_max=np.array([p.prod_max for p in profiles], dtype=float),
            ratio_min=np.array([p.prod_ratio_min for p in profiles], dtype=float),
            ratio_max=np.array([p.prod_ratio_max for p in profiles], dtype=float),
        )

    @property
    def nb(self) -> int:
        return len(self.buses)

    @property
    def T(self) -> int:
        return self.p_min.shape[1]

    @property
    def dim(self) -> int:
        return 3 * self.nb * self.T

    def split(self, x):
        parts = np.asarray(x, dtype=float).reshape(self.nb, 3, self.T)
        return parts[:, 0, :], parts[:, 1, :], parts[:, 2, :]

    def join(self, pc, pp, qp):
        return np.stack([pc, pp, qp], axis=1).reshape(self.dim)

    def project(self, x, weights=None):
        """Exact projection of a block vector, optionally in a diagonal metric."""
        pc, pp, qp = self.split(x)
        if weights is None:
            w_pc = w_pp = w_qp = None
        else:
            w_pc, w_pp, w_qp = self.split(weights)
        pc_new, _ = project_box_energy(pc, self.p_min, self.p_max, self.energy, w_pc)
        pp_new, qp_new = project_wedge(pp, qp, self.prod_max, self.ratio_min,
                                       self.ratio_max, w_pp, w_qp)
        return self.join(pc_new, pp_new, qp_new)

    def contains(self, x, tol=1e-9):
        pc, pp, qp = self.split(x)
        ok = (pc >= self.p_min - tol).all() and (pc <= self.p_max + tol).all()
        ok &= bool((pc.sum(axis=1) >= self.energy - tol).all())
        ok &= bool((pp >= -tol).all() and (pp <= self.prod_max + tol).all())
        ok &= bool((qp >= self.ratio_min * pp - tol).all())
        ok &= bool((qp <= self.ratio_max * pp + tol).all())
        return ok

    def start(self):
        """Canonical feasible point: the projection of the origin."""
        return self.project(np.zeros(self.dim))


def prox_la(la_set: LaFeasibleSet, anchor, grad, metric):
    """argmin <grad, u> + 0.5*||u - anchor||_M^2 over the aggregator set.

    ``metric`` is a positive scalar or a positive diagonal (as a vector).
    Solved exactly: box-plus-budget by a monotone scalar dual per bus, the
    production wedge by face enumeration.
    """
    metric = np.asarray(metric, dtype=float)
    if np.any(metric <= 0):
        raise ValueError("prox metric must be positive")
    w = anchor - grad / metric
    weights = None if metric.ndim == 0 else metric
    return la_set.project(w, weights)


# ---------------------------------------------------------------------------
# network-side feasible set (affine + boxes + disks + cones)

@dataclass
class DsoFeasibleSet:
    """Geometry of the network operator's feasible set.

    Affine rows collect Ohm's law per line and period plus the root power
    balance; the remaining families act per line and period on the
    (f, g, v, l) coordinates, plus sign/box constraints on v, l and the root
    injection p0 <= 0.
    """

    m0: int
    idx_p0: np.ndarray
    idx_q0: np.ndarray
    idx_f: np.ndarray   # (N, T) column of f_{n,t}
    idx_g: np.ndarray
    idx_v: np.ndarray
    idx_l: np.ndarray
    C: np.ndarray
    d: np.ndarray
    R: np.ndarray       # (N, T) line parameters broadcast over periods
    X: np.ndarray
    S: np.ndarray
    v_min: np.ndarray
    v_max: np.ndarray
    _cho: tuple = field(init=False, repr=False)
    _far: FarDiskData = field(init=False, repr=False)

    def __post_init__(self):
        self._cho = cho_factor(self.C @ self.C.T)
        self._far = FarDiskData.build(self.R, self.X, self.S)

    # elementary projections -------------------------------------------------
    def project_affine(self, x):
        return x - self.C.T @ cho_solve(self._cho, self.C @ x - self.d)

    def project_box(self, x):
        y = x.copy()
        y[self.idx_p0] = np.minimum(y[self.idx_p0], 0.0)
        y[self.idx_v] = np.clip(y[self.idx_v], self.v_min, self.v_max)
        y[self.idx_l] = np.maximum(y[self.idx_l], 0.0)
        return y

    def project_near_disk(self, x):
        y = x.copy()
        f, g = project_disk(y[self.idx_f], y[self.idx_g], self.S)
        y[self.idx_f], y[self.idx_g] = f, g
        return y

    def project_far_disk(self, x):
        y = x.copy()
        f, g, l = self._far.project(y[self.idx_f], y[self.idx_g], y[self.idx_l])
        y[self.idx_f], y[self.idx_g], y[self.idx_l] = f, g, l
        return y

    def project_cone(self, x):
        y = x.copy()
        pts = np.stack([y[self.idx_f], y[self.idx_g], y[self.idx_v], y[self.idx_l]],
                       axis=-1)
        out = project_rotated_soc(pts.reshape(-1, 4)).reshape(pts.shape)
        y[self.idx_f] = out[..., 0]
        y[self.idx_g] = out[..., 1]
        y[self.idx_v] = out[..., 2]
        y[self.idx_l] = out[..., 3]
        return y

    def violation(self, x):
        """Maximum constraint violation across all families."""
        f, g = x[self.idx_f], x[self.idx_g]
        v, l = x[self.idx_v], x[self.idx_l]
        aff = np.max(np.abs(self.C @ x - self.d)) if self.C.size else 0.0
        cone = np.max(f * f + g * g - v * l, initial=0.0)
        near = np.max(f * f + g * g - self.S**2, initial=0.0)
        fr = f - self.R * l
        gr = g - self.X * l
        far = np.max(fr * fr + gr * gr - self.S**2, initial=0.0)
        box = max(
            np.max(x[self.idx_p0], initial=0.0),
            np.max(self.v_min - v, initial=0.0),
            np.max(v - self.v_max, initial=0.0),
            np.max(-l, initial=0.0),
        )
        return max(aff, cone, near, far, box, 0.0)

    def start(self, v0):
        """Flat start: zero flows and injections, all voltages at v0."""
        x = np.zeros(self.m0)
        x[self.idx_v] = v0
        return x


class ProxFailure(RuntimeError):
    """Inner projection did not reach the requested residual."""

    def __init__(self, message, residual, cycles):
        super().__init__(message)
        self.residual = residual
        self.cycles = cycles


class DsoProjector:
    """Dykstra cycle over the network set's families, with warm starts.

    The corrections are kept between calls so that each call starts from
    x = w - sum(corrections); any near-fixed point of the cycle map then
    certifies the projection (corrections lie in the normal cones).
    """

    def __init__(self, geometry: DsoFeasibleSet, max_cycles: int = 4000):
        self.geo = geometry
        self.max_cycles = max_cycles
        self._ops = [
            geometry.project_affine,
            geometry.project_box,
            geometry.project_near_disk,
            geometry.project_far_disk,
            geometry.project_cone,
        ]
        self._q = None

    def reset(self):
        self._q = None

    def project(self, w, tol=1e-10, strict=False):
        """Projection of w onto the set; returns (point, residual, cycles)."""
        cold = self._q is None
        if cold:
            q = [np.zeros_like(w) for _ in self._ops]
            x = w.copy()
        else:
            q = self._q
            x = w - sum(q)
        last = None
        residual = np.inf
        for cycle in range(1, self.max_cycles + 1):
            for j, op in enumerate(self._ops):
                target = x + q[j]
                y = op(target)
                q[j] = target - y
                x = y
            if last is None:
                if cold and self.geo.violation(x) == 0.0 and np.array_equal(x, w):
                    # feasible input: every projection was the identity
                    residual = 0.0
                    break
                residual = np.inf  # cycle movement not measurable yet
            else:
                move = float(np.max(np.abs(x - last)))
                residual = max(self.geo.violation(x), move)
            last = x.copy()
            if residual <= tol:
                break
        self._q = q
        if residual > tol and strict:
            raise ProxFailure(
                f"network projection stalled at residual {residual:.3e} "
                f"after {cycle} cycles (target {tol:.1e})", residual, cycle)
        return x, residual, cycle


def prox_dso(projector: DsoProjector, anchor, grad, scale, tol=1e-10, strict=False):
    """argmin <grad, u> + (scale/2)*||u - anchor||^2 over the network set.

    ``scale`` must be a positive scalar; the prox is then the Euclidean
    projection of anchor - grad/scale, delegated to the Dykstra cycle with
    the given inner tolerance.
    """
    if not np.isscalar(scale) and np.ndim(scale) != 0:
        raise ValueError("network prox supports scalar metrics only")
    if scale <= 0:
        raise ValueError("prox metric must be positive")
    w = anchor - np.asarray(grad, dtype=float) / float(scale)
    return projector.project(w, tol=tol, strict=strict)


# ---------------------------------------------------------------------------
# block metric description

@dataclass
class BlockMetric:
    """Per-block prox metric: a dominating diagonal and, optionally, the
    exact diagonal-plus-sigma*A^T A form behind a flag."""

    diag: float | np.ndarray
    exact: np.ndarray | None = None
    use_exact: bool = False
    min_eig: float = 0.0

    def as_scale(self):
        if self.use_exact:
            raise NotImplementedError("exact metric prox goes through the dense path")
        return self.diag
