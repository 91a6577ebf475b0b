"""Compiled per-point kernels for the hot projections.

Numerically these mirror the vectorized numpy implementations in
``projections`` (same case analysis, same Newton iterations); they exist
because the Dykstra cycle calls them thousands of times on arrays of a few
dozen points, where per-call numpy overhead dominates.  ``projections``
falls back to the numpy path when numba is unavailable.
"""

from __future__ import annotations

import numpy as np

try:
    from numba import njit
    HAS_NUMBA = True
except ImportError:          # pragma: no cover - exercised only without numba
    HAS_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(fn):
            return fn
        if args and callable(args[0]):
            return args[0]
        return wrap

_SQ2 = np.sqrt(2.0)


@njit(cache=True)
def _elliptic_root(z1, z2, z3, u, w1, w2, w3):
    """Multiplier t in [0, 1) for the elliptic-cone projection; solves
    (1-t)^2 * sum_j w_j z_j^2/(1+t*w_j)^2 = u^2 by bracketed Newton."""
    u2 = u * u
    lo = 0.0
    hi = 1.0
    t = 0.0
    a1 = w1 * z1 * z1
    a2 = w2 * z2 * z2
    a3 = w3 * z3 * z3
    for _ in range(100):
        d1 = 1.0 + t * w1
        d2 = 1.0 + t * w2
        d3 = 1.0 + t * w3
        s1 = a1 / (d1 * d1) + a2 / (d2 * d2) + a3 / (d3 * d3)
        s2 = (w1 * a1 / (d1 * d1 * d1) + w2 * a2 / (d2 * d2 * d2)
              + w3 * a3 / (d3 * d3 * d3))
        omt = 1.0 - t
        G = omt * omt * s1 - u2
        dG = -2.0 * omt * s1 - 2.0 * omt * omt * s2
        if G > 0.0:
            lo = t
        else:
            hi = t
        if dG < 0.0:
            t_new = t - G / dG
        else:
            t_new = 0.5 * (lo + hi)
        if t_new <= lo or t_new >= hi:
            t_new = 0.5 * (lo + hi)
        if abs(t_new - t) < 1e-17:
            t = t_new
            break
        t = t_new
    return t


@njit(cache=True)
def cone_project_batch(pts):
    """Rows (f, g, v, l) projected onto {f^2+g^2 <= v*l, v >= 0, l >= 0}."""
    n = pts.shape[0]
    out = np.empty_like(pts)
    for i in range(n):
        f = pts[i, 0]
        g = pts[i, 1]
        v = pts[i, 2]
        l = pts[i, 3]
        s = (v - l) / _SQ2
        u = (v + l) / _SQ2
        nw2 = 2.0 * f * f + 2.0 * g * g + s * s
        if nw2 <= u * u and u >= 0.0:
            out[i, 0] = f
            out[i, 1] = g
            out[i, 2] = v
            out[i, 3] = l
            continue
        ninv2 = 0.5 * f * f + 0.5 * g * g + s * s
        if u <= 0.0 and ninv2 <= u * u:
            out[i, 0] = 0.0
            out[i, 1] = 0.0
            out[i, 2] = 0.0
            out[i, 3] = 0.0
            continue
        if u > 0.0:
            t = _elliptic_root(f, g, s, u, 2.0, 2.0, 1.0)
            fo = f / (1.0 + 2.0 * t)
            go = g / (1.0 + 2.0 * t)
            so = s / (1.0 + t)
            uo = u / (1.0 - t)
        elif u == 0.0:
            fo = f / 3.0
            go = g / 3.0
            so = s / 2.0
            uo = np.sqrt(2.0 * fo * fo + 2.0 * go * go + so * so)
        else:
            # Moreau: P_E(x) = x + P_E2(-x), E2 with inverted weights
            t = _elliptic_root(-f, -g, -s, -u, 0.5, 0.5, 1.0)
            fo = f + (-f) / (1.0 + 0.5 * t)
            go = g + (-g) / (1.0 + 0.5 * t)
            so = s + (-s) / (1.0 + t)
            uo = u + (-u) / (1.0 - t)
        vo = (uo + so) / _SQ2
        lo_ = (uo - so) / _SQ2
        if vo < 0.0:
            vo = 0.0
        if lo_ < 0.0:
            lo_ = 0.0
        out[i, 0] = fo
        out[i, 1] = go
        out[i, 2] = vo
        out[i, 3] = lo_
    return out


@njit(cache=True)
def far_disk_project_batch(f, g, l, V, sig2, S2):
    """Rows (f, g, l) projected onto (f-R*l)^2+(g-X*l)^2 <= S^2 using the
    per-line spectral data of B = [[1,0,-R],[0,1,-X]]."""
    n = f.shape[0]
    fo = np.empty_like(f)
    go = np.empty_like(g)
    lo = np.empty_like(l)
    for i in range(n):
        c1 = V[i, 0, 0] * f[i] + V[i, 1, 0] * g[i] + V[i, 2, 0] * l[i]
        c2 = V[i, 0, 1] * f[i] + V[i, 1, 1] * g[i] + V[i, 2, 1] * l[i]
        s1 = sig2[i, 0]
        s2 = sig2[i, 1]
        a1 = s1 * c1 * c1
        a2 = s2 * c2 * c2
        if a1 + a2 <= S2[i]:
            fo[i] = f[i]
            go[i] = g[i]
            lo[i] = l[i]
            continue
        mu = 0.0
        for _ in range(100):
            d1 = 1.0 + 2.0 * mu * s1
            d2 = 1.0 + 2.0 * mu * s2
            H = a1 / (d1 * d1) + a2 / (d2 * d2) - S2[i]
            dH = -4.0 * (s1 * a1 / (d1 * d1 * d1) + s2 * a2 / (d2 * d2 * d2))
            if dH >= 0.0:
                break
            step = H / dH
            mu = mu - step
            if abs(step) < 1e-18:
                break
        k1 = 1.0 / (1.0 + 2.0 * mu * s1) - 1.0
        k2 = 1.0 / (1.0 + 2.0 * mu * s2) - 1.0
        fo[i] = f[i] + V[i, 0, 0] * k1 * c1 + V[i, 0, 1] * k2 * c2
        go[i] = g[i] + V[i, 1, 0] * k1 * c1 + V[i, 1, 1] * k2 * c2
        lo[i] = l[i] + V[i, 2, 0] * k1 * c1 + V[i, 2, 1] * k2 * c2
    return fo, go, lo
