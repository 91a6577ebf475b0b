"""In-process actor simulation of the price-coordination protocol.

One operator actor and p aggregator actors run the randomized coordination
scheme while exchanging *dual-space* vectors only: initial bids, price
broadcasts, and bid deltas.  Actors are simulated with explicit mailboxes
(rendezvous delivery at iteration boundaries) so the message log is total
and deterministic for a fixed seed; the log is the object audited by the
privacy check.
"""

from __future__ import annotations

import hashlib
import json
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .assembly import OpfProblem, build_opf_problem
from .diagnostics import ConvergenceTrace, dual_drift, kkt_residual
from .solver import InnerTolerance, StepMetrics, make_sampling, metrics_for, run

INIT_BID = "init_bid"
DLMP_BROADCAST = "dlmp_broadcast"
BID_DELTA = "bid_delta"
_KINDS = (INIT_BID, DLMP_BROADCAST, BID_DELTA)
_FIELDS = ("kind", "k", "sender", "receiver", "payload")


@dataclass(frozen=True)
class Message:
    """One inter-actor record; payloads always live in the dual space."""

    kind: str
    k: int
    sender: str
    receiver: str
    payload: np.ndarray


class MessageLog:
    """Append-only log of every inter-actor data flow."""

    def __init__(self):
        self.messages: list[Message] = []

    def send(self, kind, k, sender, receiver, payload):
        msg = Message(kind, int(k), sender, receiver,
                      np.array(payload, dtype=float, copy=True))
        self.messages.append(msg)
        return msg

    def inject(self, message: Message):
        """Append an arbitrary message (negative tests)."""
        self.messages.append(message)

    def counts(self) -> dict:
        out: dict[str, int] = {}
        for m in self.messages:
            out[m.kind] = out.get(m.kind, 0) + 1
        return out

    def digest(self) -> dict:
        sha = hashlib.sha256()
        for m in self.messages:
            sha.update(m.kind.encode())
            sha.update(np.ascontiguousarray(m.payload, dtype=float).tobytes())
        return {"messages": len(self.messages), "counts": self.counts(),
                "payload_sha256": sha.hexdigest()}

    def export_jsonl(self, path, include_payload=False):
        with open(path, "w") as fh:
            for m in self.messages:
                rec = {
                    "kind": m.kind, "k": m.k, "sender": m.sender,
                    "receiver": m.receiver, "dim": int(np.size(m.payload)),
                    "payload_sha256": hashlib.sha256(
                        np.ascontiguousarray(m.payload, dtype=float).tobytes()
                    ).hexdigest(),
                }
                if include_payload:
                    rec["payload"] = np.asarray(m.payload).tolist()
                fh.write(json.dumps(rec) + "\n")


class AggregatorActor:
    """Holds private feasible-set data and plans; speaks in bids only."""

    def __init__(self, name, block, prox_scale, inner: InnerTolerance):
        self.name = name
        self.block = block
        self.prox_scale = prox_scale
        self.inner = inner
        self.x = block.start()

    def init_bid(self):
        return self.block.A @ self.x - self.block.b_own

    def respond(self, y, k):
        """Prox against the received prices; returns the bid delta."""
        g = self.block.cost.grad(self.x) + self.block.A.T @ y
        x_new = self.block.prox(self.x, g, self.prox_scale, tol=self.inner.at(k))
        delta = self.block.A @ (x_new - self.x)
        self.x = x_new
        return delta


class OperatorActor:
    """Holds the network data, the prices, and the bid accumulator."""

    def __init__(self, block, sigma, n_aggregators, prox_scale,
                 inner: InnerTolerance, strict_inner=False):
        self.block = block
        self.sigma = sigma
        self.p = n_aggregators
        self.prox_scale = prox_scale
        self.inner = inner
        self.strict_inner = strict_inner
        self.x = block.start()
        self.gamma = None
        self.y = None

    def absorb_bids(self, bids):
        self.gamma = self.sigma * sum(bids)
        self.y = self.gamma + self.sigma * (self.block.A @ self.x - self.block.b_own)

    def local_step(self, k):
        g = self.block.cost.grad(self.x) + self.block.A.T @ self.y
        x_new = self.block.prox(self.x, g, self.prox_scale,
                                tol=self.inner.at(k), strict=self.strict_inner)
        return x_new

    def price_update(self, x_new, bid_delta):
        A0, b0 = self.block.A, self.block.b_own
        self.y = (self.y + self.sigma * (A0 @ (2.0 * x_new - self.x) - b0)
                  + self.gamma + self.sigma * (self.p + 1) * bid_delta)
        self.gamma = self.gamma + self.sigma * bid_delta
        self.x = x_new


@dataclass
class SimulationResult:
    trace: ConvergenceTrace
    log: MessageLog
    x_parts: list
    s_parts: list
    y: np.ndarray
    gamma: np.ndarray
    iterations: int
    x_history: list | None = None
    y_history: list | None = None


def simulate(problem: OpfProblem, metrics: StepMetrics, K, seed=0, *,
             inner: InnerTolerance = InnerTolerance(), kkt_every=0,
             y_snapshot_every=0, drift_window=50, history=False,
             strict_inner=False) -> SimulationResult:
    """Run K iterations of the agent protocol; returns trace and message log.

    Per iteration: the operator proxes against the current prices, one
    aggregator drawn uniformly proxes with the p-weighted metric and sends
    its bid delta, all other aggregators freeze, the operator updates prices
    and broadcasts them.
    """
    if not metrics.valid:
        raise ValueError(
            f"step-size condition violated (margin {metrics.margin:.3e})")
    sigma = metrics.sigma
    p = problem.n_aggregators
    sampling = make_sampling("ppdlmp", problem.d)
    marg = sampling.marginals()

    log = MessageLog()
    dso = OperatorActor(problem.blocks[0], sigma, p,
                        metrics.scales[0] / marg[0], inner,
                        strict_inner=strict_inner)
    las = [AggregatorActor(f"la:{problem.agg_ids[a]}", problem.blocks[a + 1],
                           metrics.scales[a + 1] / marg[a + 1], inner)
           for a in range(p)]

    bids = []
    for la in las:
        bid = la.init_bid()
        log.send(INIT_BID, 0, la.name, "dso", bid)
        bids.append(bid)
    dso.absorb_bids(bids)
    log.send(DLMP_BROADCAST, 0, "dso", "all", dso.y)

    parts = [dso.x] + [la.x for la in las]
    s_parts = [np.zeros_like(x) for x in parts]
    r = problem.residual(parts)
    rs = np.zeros_like(r)
    trace = ConvergenceTrace()
    y_hist = deque(maxlen=drift_window + 1)
    y_hist.append(dso.y.copy())
    kkt0 = (kkt_residual(parts, dso.y, problem, scales=metrics.scales)
            if kkt_every else np.nan)
    trace.record(0, problem.phi(parts), 0.5 * float(r @ r), np.nan,
                 float(np.max(np.abs(r), initial=0.0)), kkt=kkt0,
                 y=dso.y if y_snapshot_every else None)
    xh = [[np.array(x, copy=True) for x in parts]] if history else None
    yh = [dso.y.copy()] if history else None

    draws = sampling.draw_sequence(seed, K)
    for k in range(K):
        a = int(draws[k])            # subset {0, a+1} maps to aggregator a
        y_k = dso.y
        x0_new = dso.local_step(k)
        delta = las[a].respond(y_k, k)
        log.send(BID_DELTA, k, las[a].name, "dso", delta)
        dso.price_update(x0_new, delta)
        log.send(DLMP_BROADCAST, k + 1, "dso", "all", dso.y)

        parts = [dso.x] + [la.x for la in las]
        it = k + 1
        for i in range(problem.d):
            s_parts[i] = s_parts[i] + (parts[i] - s_parts[i]) / it
        r = problem.residual(parts)
        rs = rs + (r - rs) / it
        y_hist.append(dso.y.copy())
        if history:
            xh.append([np.array(x, copy=True) for x in parts])
            yh.append(dso.y.copy())
        want_kkt = kkt_every and (it % kkt_every == 0 or it == K)
        kkt_val = (kkt_residual(parts, dso.y, problem, scales=metrics.scales)
                   if want_kkt else np.nan)
        trace.record(it, problem.phi(parts), 0.5 * float(r @ r),
                     0.5 * float(rs @ rs), float(np.max(np.abs(r), initial=0.0)),
                     kkt=kkt_val, dlmp_drift=dual_drift(y_hist, drift_window),
                     y=dso.y if (y_snapshot_every and it % y_snapshot_every == 0)
                     else None)

    return SimulationResult(trace=trace, log=log,
                            x_parts=[np.array(x, copy=True) for x in parts],
                            s_parts=s_parts, y=dso.y.copy(),
                            gamma=dso.gamma.copy(), iterations=K,
                            x_history=xh, y_history=yh)


def simulate_instance(instance, K, seed=0, sigma=1.0, tau=None, **kwargs):
    """Convenience wrapper: build the problem, tune steps, simulate."""
    problem = build_opf_problem(instance)
    sampling = make_sampling("ppdlmp", problem.d)
    metrics = metrics_for(problem, sampling, sigma=sigma, tau=tau)
    return simulate(problem, metrics, K, seed=seed, **kwargs)


# ---------------------------------------------------------------------------

def equivalence_harness(instance, K, seed=0, sigma=1.0, tau=None):
    """Max per-iteration deviation between the agent protocol and the
    generic solver under pair sampling with a shared draw stream.

    Two independent problem builds keep inner warm starts separate; the
    dual-space bookkeeping is algebraically identical, so deviations are
    floating-point noise.
    """
    prob_sim = build_opf_problem(instance)
    prob_gen = build_opf_problem(instance)
    sampling = make_sampling("ppdlmp", prob_sim.d)
    metrics = metrics_for(prob_sim, sampling, sigma=sigma, tau=tau)

    sim = simulate(prob_sim, metrics, K, seed=seed, history=True)
    gen = run(prob_gen, sampling, metrics, metrics.sigma, K, seed=seed,
              history=True)

    dev_x = 0.0
    dev_y = 0.0
    for xs, xg in zip(sim.x_history, gen.x_history):
        for a, b in zip(xs, xg):
            dev_x = max(dev_x, float(np.max(np.abs(a - b), initial=0.0)))
    for ys, yg in zip(sim.y_history, gen.y_history):
        dev_y = max(dev_y, float(np.max(np.abs(ys - yg), initial=0.0)))
    return dev_x, dev_y


# ---------------------------------------------------------------------------
# privacy audit

@dataclass
class AuditReport:
    passed: bool
    counts: dict
    failures: list = field(default_factory=list)

    def __bool__(self):
        return self.passed


def privacy_audit(log: MessageLog, problem: OpfProblem,
                  iterations: int | None = None) -> AuditReport:
    """Verify that every logged flow stays in the dual space.

    Checks: payloads are vectors of the dual dimension 2NT (never a primal
    block dimension), kinds and directions follow the protocol, messages
    carry no fields beyond (kind, k, sender, receiver, payload), and the
    counts match p init bids, K+1 broadcasts, K bid deltas.
    """
    failures = []
    dual_dim = problem.q
    la_names = {f"la:{a}" for a in problem.agg_ids}

    if not log.messages:
        return AuditReport(False, {}, ["empty log: initialization messages missing"])

    for idx, m in enumerate(log.messages):
        label = f"message {idx} (kind={getattr(m, 'kind', '?')}, k={getattr(m, 'k', '?')})"
        extra = set(vars(m)) - set(_FIELDS)
        if extra:
            failures.append(f"{label}: non-protocol fields {sorted(extra)}")
        if m.kind not in _KINDS:
            failures.append(f"{label}: unknown kind")
            continue
        payload = np.asarray(m.payload)
        if payload.shape != (dual_dim,):
            failures.append(
                f"{label}: payload shape {payload.shape} is not the dual "
                f"dimension ({dual_dim},)")
        if m.kind == DLMP_BROADCAST:
            if m.sender != "dso" or m.receiver != "all":
                failures.append(f"{label}: broadcast must flow dso -> all")
        else:
            if m.sender not in la_names or m.receiver != "dso":
                failures.append(f"{label}: bid must flow aggregator -> dso")

    counts = log.counts()
    p = problem.n_aggregators
    n_bid = counts.get(BID_DELTA, 0)
    K = iterations if iterations is not None else n_bid
    expected = {INIT_BID: p, DLMP_BROADCAST: K + 1, BID_DELTA: K}
    for kind, want in expected.items():
        got = counts.get(kind, 0)
        if got != want:
            failures.append(f"count mismatch for {kind}: expected {want}, got {got}")

    init_senders = [m.sender for m in log.messages if m.kind == INIT_BID]
    if sorted(init_senders) != sorted(la_names):
        failures.append("init bids must come from every aggregator exactly once")

    return AuditReport(not failures, counts, failures)


def gamma_consistency(problem: OpfProblem, x_parts, gamma, sigma) -> float:
    """Deviation of the bid accumulator from sigma*(sum_a A_a x_a - b_a)."""
    acc = np.zeros(problem.q)
    for blk, x_a in zip(problem.blocks[1:], x_parts[1:]):
        acc += blk.A @ x_a - blk.b_own
    return float(np.max(np.abs(gamma - sigma * acc), initial=0.0))
