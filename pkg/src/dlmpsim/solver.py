"""Randomized block-coordinate primal-dual method with arbitrary sampling.

Solves  min sum_i phi_i(x_i) + delta_{X_i}(x_i)  subject to  x minimizing
h(x) = 0.5*||Ax - b||^2, by sampling a subset I of blocks each iteration,
taking a prox step on each sampled block against the current dual vector,
and running two coupled dual recursions:

    z^{k+1} = z^k + sigma * A (x^{k+1} - x^k)
    y^{k+1} = y^k + sigma * A P (x^{k+1} - x^k) + z^{k+1}

with P = diag(1/p_i) built from the sampling marginals and the averaging
weight sequence fixed at theta_k = 1/(k+1).  The primal-only averaged form
(extrapolation on the running average) is provided alongside for
verification; both produce identical primal iterates for matching draws.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .diagnostics import ConvergenceTrace, dual_drift, kkt_residual


# ---------------------------------------------------------------------------
# sampling schemes

@dataclass(frozen=True)
class SamplingScheme:
    """Finite family of block subsets with probabilities.

    Derived data: marginals p_i, pairwise marginals p_ij, the weighting
    P = diag(1/p_i), and (given the coupling blocks) the second-moment
    matrix Sigma with blocks p_ij/(p_i p_j) * A_i' A_j.
    """

    d: int
    subsets: tuple[tuple[int, ...], ...]
    probs: np.ndarray

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=float)
        if probs.shape != (len(self.subsets),) or np.any(probs < 0):
            raise ValueError("one nonnegative probability per subset required")
        if abs(probs.sum() - 1.0) > 1e-12:
            raise ValueError(f"subset probabilities sum to {probs.sum()}, not 1")
        if np.any(self.marginals() <= 0):
            raise ValueError("every block needs positive sampling probability")

    def marginals(self):
        p = np.zeros(self.d)
        for subset, pi in zip(self.subsets, self.probs):
            for i in subset:
                p[i] += pi
        return p

    def pairwise(self):
        pij = np.zeros((self.d, self.d))
        for subset, pi in zip(self.subsets, self.probs):
            for i in subset:
                for j in subset:
                    pij[i, j] += pi
        return pij

    @property
    def p(self):
        return self.marginals()

    def weighting_diag(self, dims):
        """Diagonal of P expanded to full primal dimension."""
        p = self.marginals()
        return np.concatenate([np.full(m, 1.0 / p[i]) for i, m in enumerate(dims)])

    def sigma_matrix(self, A_blocks):
        """Sigma = E[U_I P A'A P U_I] as a dense matrix."""
        p = self.marginals()
        pij = self.pairwise()
        dims = [A.shape[1] for A in A_blocks]
        off = np.concatenate([[0], np.cumsum(dims)])
        m = int(off[-1])
        sig = np.zeros((m, m))
        for i in range(self.d):
            for j in range(self.d):
                if pij[i, j] == 0:
                    continue
                coef = pij[i, j] / (p[i] * p[j])
                sig[off[i]:off[i + 1], off[j]:off[j + 1]] = coef * (
                    A_blocks[i].T @ A_blocks[j])
        return sig

    def check_identity(self, dims=None) -> float:
        """Max deviation of E[U_I P] from the identity (enumeration)."""
        acc = np.zeros(self.d)
        p = self.marginals()
        for subset, pi in zip(self.subsets, self.probs):
            for i in subset:
                acc[i] += pi / p[i]
        return float(np.max(np.abs(acc - 1.0)))

    def draw_sequence(self, seed, K):
        """Subset indices for iterations 0..K-1; one uniform draw each."""
        rng = np.random.Generator(np.random.Philox(key=seed))
        u = rng.random(size=K)
        cum = np.cumsum(self.probs)
        cum[-1] = 1.0
        return np.searchsorted(cum, u, side="right").astype(int)


def make_sampling(name: str, d: int) -> SamplingScheme:
    """Named schemes over d blocks (block 0 is the network operator).

    - "ppdlmp": pairs {0, a} for each aggregator block a, uniformly; the
      operator is sampled every iteration, each aggregator with marginal
      1/(d-1).
    - "full": the single subset of all blocks (deterministic).
    - "singleton": uniform single-block subsets.
    """
    if name == "ppdlmp":
        if d < 2:
            raise ValueError("pair sampling needs at least one aggregator block")
        p = d - 1
        return SamplingScheme(d, tuple((0, a) for a in range(1, d)),
                              np.full(p, 1.0 / p))
    if name == "full":
        return SamplingScheme(d, (tuple(range(d)),), np.array([1.0]))
    if name == "singleton":
        return SamplingScheme(d, tuple((i,) for i in range(d)),
                              np.full(d, 1.0 / d))
    raise ValueError(f"unknown sampling scheme {name!r}")


# ---------------------------------------------------------------------------
# step-size construction

@dataclass
class StepMetrics:
    """Per-block prox scales plus the step-size condition certificate.

    scales[i] dominates the exact metric (1/tau_i)I + p_i*Lambda_i
    + sigma*A_i'A_i in the positive semidefinite order, so the certificate
    min_eig(blockdiag[((1/tau_i)I + sigma*A_i'A_i)/p_i] - sigma*Sigma) > 0
    covers the scales actually used.
    """

    sigma: float
    tau: np.ndarray
    scales: np.ndarray
    valid: bool
    margin: float
    exact: list = field(default_factory=list, repr=False)


def _condition_margin(A_blocks, sigma, tau, sampling):
    p = sampling.marginals()
    dims = [A.shape[1] for A in A_blocks]
    off = np.concatenate([[0], np.cumsum(dims)])
    M = -sigma * sampling.sigma_matrix(A_blocks)
    for i, A in enumerate(A_blocks):
        blk = (np.eye(dims[i]) / tau[i] + sigma * (A.T @ A)) / p[i]
        M[off[i]:off[i + 1], off[i]:off[i + 1]] += blk
    return float(scipy.linalg.eigh(M, eigvals_only=True)[0])


def stepsize_matrices(lam_blocks, A_blocks, sigma, tau, sampling) -> StepMetrics:
    """Diagonal-dominating prox scales and the validity certificate.

    lam_blocks: per-block curvature diagonals of the smooth costs.
    tau: positive scalar or per-block vector of primal step parameters.
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    d = len(A_blocks)
    tau = np.broadcast_to(np.asarray(tau, dtype=float), (d,)).copy()
    if np.any(tau <= 0):
        raise ValueError("tau must be positive")
    p = sampling.marginals()
    scales = np.empty(d)
    exact = []
    for i, A in enumerate(A_blocks):
        lam_max = float(np.max(lam_blocks[i], initial=0.0))
        a_norm2 = float(np.linalg.norm(A, 2)) ** 2 if A.size else 0.0
        scales[i] = 1.0 / tau[i] + p[i] * lam_max + sigma * a_norm2
        exact.append(np.diag(np.full(A.shape[1], 1.0 / tau[i]))
                     + p[i] * np.diag(lam_blocks[i]) + sigma * (A.T @ A))
    margin = _condition_margin(A_blocks, sigma, tau, sampling)
    return StepMetrics(sigma=sigma, tau=tau, scales=scales,
                       valid=margin > 0, margin=margin, exact=exact)


def auto_tau(A_blocks, sigma, sampling, margin=0.05, tau_max=1e8) -> float:
    """Largest uniform tau passing the step-size condition, shrunk by the
    requested margin; found by bisection on the certificate's sign."""
    def ok(tau):
        return _condition_margin(A_blocks, sigma, np.full(len(A_blocks), tau),
                                 sampling) > 0

    lo = 1e-9
    if not ok(lo):
        raise ValueError("step-size condition fails even for tiny tau")
    if ok(tau_max):
        return (1.0 - margin) * tau_max
    hi = tau_max
    for _ in range(200):
        mid = np.sqrt(lo * hi)
        if ok(mid):
            lo = mid
        else:
            hi = mid
        if hi / lo < 1.0 + 1e-6:
            break
    return (1.0 - margin) * lo


@dataclass(frozen=True)
class InnerTolerance:
    """Summable inner-accuracy schedule for iterative block proxes."""

    eps0: float = 1e-4
    floor: float = 1e-10

    def at(self, k: int) -> float:
        return max(self.floor, self.eps0 / (k + 1) ** 2)


# ---------------------------------------------------------------------------
# generic blocks and problems (synthetic instances, tests, demos)

class FreeBlock:
    """Unconstrained block."""

    def __init__(self, dim, A, cost):
        self.dim = dim
        self.A = np.asarray(A, dtype=float).reshape(-1, dim)
        self.b_own = np.zeros(self.A.shape[0])
        self.cost = cost

    def start(self):
        return np.zeros(self.dim)

    def prox(self, anchor, grad, scale, tol=None, strict=False):
        return anchor - grad / scale

    def project(self, w, tol=None):
        return np.asarray(w, dtype=float)

    def contains(self, x, tol=0.0):
        return True


class BoxBlock:
    """Box-constrained block."""

    def __init__(self, dim, A, cost, lo=-np.inf, hi=np.inf):
        self.dim = dim
        self.A = np.asarray(A, dtype=float).reshape(-1, dim)
        self.b_own = np.zeros(self.A.shape[0])
        self.cost = cost
        self.lo = np.broadcast_to(np.asarray(lo, dtype=float), (dim,))
        self.hi = np.broadcast_to(np.asarray(hi, dtype=float), (dim,))

    def start(self):
        return np.clip(np.zeros(self.dim), self.lo, self.hi)

    def prox(self, anchor, grad, scale, tol=None, strict=False):
        return np.clip(anchor - grad / scale, self.lo, self.hi)

    def project(self, w, tol=None):
        return np.clip(w, self.lo, self.hi)

    def contains(self, x, tol=1e-12):
        return bool(np.all(x >= self.lo - tol) and np.all(x <= self.hi + tol))


class BlockProblem:
    """Generic container pairing blocks with the coupling target b."""

    def __init__(self, blocks, b):
        self.blocks = list(blocks)
        self.b = np.asarray(b, dtype=float)
        self.q = self.b.shape[0]
        self.dims = [blk.dim for blk in self.blocks]
        self.offsets = np.concatenate([[0], np.cumsum(self.dims)])
        self.dim = int(self.offsets[-1])

    @property
    def d(self):
        return len(self.blocks)

    def split(self, x):
        return [x[self.offsets[i]:self.offsets[i + 1]] for i in range(self.d)]

    def join(self, parts):
        return np.concatenate(parts)

    def start(self):
        return [blk.start() for blk in self.blocks]

    def full_A(self):
        return np.hstack([blk.A for blk in self.blocks])

    def residual(self, parts):
        r = -self.b.copy()
        for blk, x_i in zip(self.blocks, parts):
            r += blk.A @ x_i
        return r

    def phi(self, parts):
        return float(sum(blk.cost.value(x_i) for blk, x_i in zip(self.blocks, parts)))

    def h(self, parts):
        r = self.residual(parts)
        return float(0.5 * np.dot(r, r))


def metrics_for(problem, sampling, sigma=1.0, tau=None, margin=0.05) -> StepMetrics:
    """Step metrics for a problem, auto-tuning tau when not supplied."""
    A_blocks = [blk.A for blk in problem.blocks]
    if tau is None:
        tau = auto_tau(A_blocks, sigma, sampling, margin=margin)
    lam_blocks = [blk.cost.lam_diag() for blk in problem.blocks]
    return stepsize_matrices(lam_blocks, A_blocks, sigma, tau, sampling)


# ---------------------------------------------------------------------------
# the dual-form solver

@dataclass
class RunResult:
    trace: ConvergenceTrace
    x_parts: list
    s_parts: list
    y: np.ndarray
    z: np.ndarray
    iterations: int
    kkt: float
    converged: bool
    x_history: list | None = None
    y_history: list | None = None


class SolverError(RuntimeError):
    pass


def run(problem, sampling, metrics, sigma, K, seed=0, *,
        inner: InnerTolerance = InnerTolerance(), x0_parts=None,
        kkt_every=0, stop_kkt=None, y_snapshot_every=0,
        drift_window=50, history=False, strict_inner=False,
        allow_invalid=False) -> RunResult:
    """Run K iterations of the randomized primal-dual method.

    Deterministic for a fixed seed.  ``kkt_every`` > 0 evaluates the KKT
    residual at that cadence (and on the last iteration); ``stop_kkt``
    stops early once the KKT residual reaches the threshold.  Inner prox
    failures carry the iteration index.
    """
    if not metrics.valid and not allow_invalid:
        raise SolverError(
            f"step-size condition violated (margin {metrics.margin:.3e}); "
            "pass allow_invalid=True to override")
    p = sampling.marginals()
    parts = [np.array(x, dtype=float) for x in (x0_parts or problem.start())]
    r = problem.residual(parts)
    z = sigma * r
    y = z.copy()
    s_parts = [np.zeros_like(x) for x in parts]
    rs = np.zeros_like(r)

    trace = ConvergenceTrace()
    y_hist = deque(maxlen=drift_window + 1)
    y_hist.append(y.copy())
    kkt0 = (kkt_residual(parts, y, problem, scales=metrics.scales)
            if kkt_every else np.nan)
    trace.record(0, problem.phi(parts), 0.5 * float(r @ r), np.nan,
                 float(np.max(np.abs(r), initial=0.0)), kkt=kkt0,
                 y=y if y_snapshot_every else None)
    xh = [[np.array(x, copy=True) for x in parts]] if history else None
    yh = [y.copy()] if history else None

    draws = sampling.draw_sequence(seed, K)
    kkt_val = kkt0
    converged = stop_kkt is not None and not np.isnan(kkt0) and kkt0 <= stop_kkt
    it = 0
    while it < K and not converged:
        subset = sampling.subsets[draws[it]]
        eps = inner.at(it)
        Ad = np.zeros(problem.q)
        APd = np.zeros(problem.q)
        for i in subset:
            blk = problem.blocks[i]
            g = blk.cost.grad(parts[i]) + blk.A.T @ y
            try:
                x_new = blk.prox(parts[i], g, metrics.scales[i] / p[i],
                                 tol=eps, strict=strict_inner)
            except Exception as exc:
                raise SolverError(f"prox of block {i} failed at iteration {it}: {exc}") from exc
            delta = x_new - parts[i]
            Adelta = blk.A @ delta
            Ad += Adelta
            APd += Adelta / p[i]
            parts[i] = x_new
        z = z + sigma * Ad
        y = y + sigma * APd + z
        it += 1

        for i in range(problem.d):
            s_parts[i] = s_parts[i] + (parts[i] - s_parts[i]) / it
        r = z / sigma
        rs = rs + (r - rs) / it
        y_hist.append(y.copy())
        if history:
            xh.append([np.array(x, copy=True) for x in parts])
            yh.append(y.copy())

        want_kkt = kkt_every and (it % kkt_every == 0 or it == K)
        if want_kkt:
            kkt_val = kkt_residual(parts, y, problem, scales=metrics.scales)
            if stop_kkt is not None and kkt_val <= stop_kkt:
                converged = True
        trace.record(it, problem.phi(parts), 0.5 * float(r @ r),
                     0.5 * float(rs @ rs), float(np.max(np.abs(r), initial=0.0)),
                     kkt=kkt_val if want_kkt else np.nan,
                     dlmp_drift=dual_drift(y_hist, drift_window),
                     y=y if (y_snapshot_every and it % y_snapshot_every == 0) else None)

    return RunResult(trace=trace, x_parts=parts, s_parts=s_parts, y=y, z=z,
                     iterations=it, kkt=kkt_val,
                     converged=bool(converged or stop_kkt is None),
                     x_history=xh, y_history=yh)


# ---------------------------------------------------------------------------
# averaged primal form (extrapolated running average), used for verification

class AveragedForm:
    """Primal-only form driven by gradients of h at extrapolated averages.

    Maintains x^k, S^k (the P-weighted average recursion), and the
    weighted cost accumulator used by the Lyapunov function.  Equivalent to
    the dual form when y^k = (sigma/theta_k)(A Z^k - b).
    """

    def __init__(self, problem, sampling, metrics, sigma, x0_parts=None,
                 inner: InnerTolerance = InnerTolerance()):
        self.problem = problem
        self.sampling = sampling
        self.metrics = metrics
        self.sigma = sigma
        self.inner = inner
        self.p = sampling.marginals()
        self.k = 0
        self.x = [np.array(v, dtype=float) for v in (x0_parts or problem.start())]
        self.S = [np.array(v, copy=True) for v in self.x]
        self.phihat = np.array([blk.cost.value(x_i)
                                for blk, x_i in zip(problem.blocks, self.x)])

    def clone(self):
        other = AveragedForm.__new__(AveragedForm)
        other.__dict__.update({
            "problem": self.problem, "sampling": self.sampling,
            "metrics": self.metrics, "sigma": self.sigma, "inner": self.inner,
            "p": self.p, "k": self.k,
            "x": [v.copy() for v in self.x],
            "S": [v.copy() for v in self.S],
            "phihat": self.phihat.copy(),
        })
        return other

    @property
    def theta(self):
        return 1.0 / (self.k + 1)

    def z_parts(self):
        th = self.theta
        return [(1.0 - th) * S_i + th * x_i for S_i, x_i in zip(self.S, self.x)]

    def dual_equivalent(self):
        th = self.theta
        Z = self.z_parts()
        return (self.sigma / th) * self.problem.residual(Z)

    def step(self, subset):
        """One update on the given block subset (caller supplies the draw)."""
        th = self.theta
        Z = self.z_parts()
        rZ = self.problem.residual(Z)
        coef = self.sigma / th
        phi_old = np.array([blk.cost.value(x_i)
                            for blk, x_i in zip(self.problem.blocks, self.x)])
        eps = self.inner.at(self.k)
        new_S = list(Z)
        for i in subset:
            blk = self.problem.blocks[i]
            g = blk.cost.grad(self.x[i]) + coef * (blk.A.T @ rZ)
            x_new = blk.prox(self.x[i], g, self.metrics.scales[i] / self.p[i], tol=eps)
            new_S[i] = Z[i] + th * (x_new - self.x[i]) / self.p[i]
            self.x[i] = x_new
        self.S = new_S
        phi_new = np.array([blk.cost.value(x_i)
                            for blk, x_i in zip(self.problem.blocks, self.x)])
        pinv_diag = 1.0 / self.p
        self.phihat = ((1.0 - th) * self.phihat
                       - th * (pinv_diag - 1.0) * phi_old
                       + th * pinv_diag * phi_new)
        self.k += 1

    def lyapunov(self, xstar_parts, phi_star, h_star=0.0):
        """V = k(Phi_hat - Phi*) + sigma k^2 (h(S)-h*) + 0.5||x-x*||^2_{P^2 T}."""
        kk = self.k
        quad = 0.0
        for i, blk in enumerate(self.problem.blocks):
            w = self.metrics.scales[i] / self.p[i] ** 2
            diff = self.x[i] - xstar_parts[i]
            quad += w * float(diff @ diff)
        hS = self.problem.h(self.S)
        return (kk * (float(self.phihat.sum()) - phi_star)
                + self.sigma * kk**2 * (hS - h_star) + 0.5 * quad)


def run_averaged(problem, sampling, metrics, sigma, K, seed=0, *,
                 inner: InnerTolerance = InnerTolerance(), x0_parts=None,
                 history=False):
    """Drive the averaged form with the same draw stream as ``run``."""
    form = AveragedForm(problem, sampling, metrics, sigma, x0_parts, inner)
    draws = sampling.draw_sequence(seed, K)
    xh = [[v.copy() for v in form.x]] if history else None
    yh = [form.dual_equivalent()] if history else None
    for k in range(K):
        form.step(sampling.subsets[draws[k]])
        if history:
            xh.append([v.copy() for v in form.x])
            yh.append(form.dual_equivalent())
    return form, xh, yh


# ---------------------------------------------------------------------------
# verifiable identities

def eso_check(x_parts, t_parts, sampling, A_blocks, b) -> float:
    """Deviation of the separable expectation identity for the residual.

    Enumerates E_I[h(x + U_I P t)] and compares with
    h(x) + <grad h(x), t> + 0.5*||t||^2_Sigma; both sides agree exactly for
    the quadratic h, so the return value is numerical noise.
    """
    p = sampling.marginals()
    Ax = sum(A @ x for A, x in zip(A_blocks, x_parts)) - b
    At = [A @ t for A, t in zip(A_blocks, t_parts)]

    lhs = 0.0
    for subset, pi in zip(sampling.subsets, sampling.probs):
        r = Ax.copy()
        for i in subset:
            r = r + At[i] / p[i]
        lhs += pi * 0.5 * float(r @ r)

    rhs = 0.5 * float(Ax @ Ax) + float(Ax @ sum(At))
    pij = sampling.pairwise()
    for i in range(sampling.d):
        for j in range(sampling.d):
            if pij[i, j]:
                rhs += 0.5 * pij[i, j] / (p[i] * p[j]) * float(At[i] @ At[j])
    return abs(lhs - rhs)


def gamma_coefficients(K, sampling, theta=None) -> np.ndarray:
    """Averaging weights gamma[k, l, i] with S^k = sum_l gamma_{k,l} x^l.

    Per-block scalars (the weighting P is scalar per block).  Row k of the
    table satisfies sum_l gamma[k, l] = 1 for every block; rows are defined
    for k >= 1.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    pinv = 1.0 / sampling.marginals()   # diagonal of P per block
    d = sampling.d
    gam = np.zeros((K + 1, K + 1, d))
    if theta is None:
        # theta_k = 1/(k+1) telescopes the recursion exactly:
        # gamma_{k,0} = (Id-P)/k, gamma_{k,l} = Id/k for 0<l<k,
        # gamma_{k,k} = P/k
        for k in range(1, K + 1):
            gam[k, 0] = (1.0 - pinv) / k
            gam[k, 1:k] = 1.0 / k
            gam[k, k] = pinv / k
        return gam
    gam[1, 0] = 1.0 - theta(0) * pinv
    gam[1, 1] = theta(0) * pinv
    for k in range(1, K):
        th = theta(k)
        gam[k + 1, :k] = (1.0 - th) * gam[k, :k]
        gam[k + 1, k] = (1.0 - th) * gam[k, k] - th * (pinv - 1.0)
        gam[k + 1, k + 1] = th * pinv
    return gam
