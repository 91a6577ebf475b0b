"""Benchmark scenarios, the deterministic reference oracle, comparisons.

The oracle is the same primal-dual method run with full (deterministic)
sampling until the KKT residual clears a tolerance; randomized runs and
published reference prices for the bundled 15-bus network are compared
against it.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .agents import privacy_audit, simulate
from .assembly import OpfProblem, build_opf_problem
from .diagnostics import (cone_tightness, kkt_residual, read_dlmp_csv,
                          write_dlmp_csv, write_trace_csv)
from .grid import NetworkInstance, fifteen_bus, load_instance
from .solver import (InnerTolerance, make_sampling, metrics_for, run)

# Reference prices (active, reactive) by (bus, period) for the bundled
# benchmark network, as published for this instance; quoted to 3 decimals.
BENCHMARK_DLMPS = {
    (1, 0): (3.721, 0.012), (2, 0): (3.603, 0.048), (3, 0): (3.421, 0.092),
    (4, 0): (3.429, 0.093), (5, 0): (3.433, 0.094), (6, 0): (3.439, 0.096),
    (7, 0): (-0.003, 0.279), (8, 0): (0.004, 0.279), (9, 0): (0.003, 0.279),
    (10, 0): (0.001, 0.279), (11, 0): (-0.0, 0.279), (12, 0): (3.719, 0.001),
    (13, 0): (3.758, 0.016), (14, 0): (3.781, 0.024),
    (1, 1): (1.004, 0.005), (2, 1): (0.98, 0.02), (3, 1): (0.942, 0.041),
    (4, 1): (0.946, 0.042), (5, 1): (0.949, 0.043), (6, 1): (0.951, 0.044),
    (7, 1): (-0.0, 0.115), (8, 1): (0.003, 0.115), (9, 1): (0.002, 0.115),
    (10, 1): (0.001, 0.115), (11, 1): (-0.0, 0.115), (12, 1): (3.567, 0.732),
    (13, 1): (3.583, 0.737), (14, 1): (3.593, 0.741),
}

# Lines reported saturated at the benchmark solution: (bus, period).
BENCHMARK_SATURATED = ((8, 0), (8, 1), (12, 1))


@dataclass
class Scenario:
    """One benchmark configuration; every CLI flag has a field here."""

    instance: str | None = None         # path; None = bundled benchmark
    sigma: float = 1.0
    tau: float | None = None            # None = auto-tuned
    iters: int = 2000
    seed: int = 0
    sampling: str = "ppdlmp"
    out: str | None = None
    oracle_tol: float = 1e-7
    oracle_max_iters: int = 60000
    paper_tol: float = 0.05             # gate against the printed reference prices
    oracle_gate: float = 1e-2           # gate of the randomized run against the oracle
    kkt_every: int = 200
    targets: dict = field(default_factory=dict)   # {(bus,t): (y_p, y_q)}

    @classmethod
    def from_json(cls, path, **overrides):
        with open(path) as fh:
            doc = json.load(fh)
        targets = {(int(r["bus"]), int(r["t"])): (float(r["y_p"]), float(r["y_q"]))
                   for r in doc.pop("targets", [])}
        doc.update({k: v for k, v in overrides.items() if v is not None})
        sc = cls(**doc)
        if targets:
            sc.targets = targets
        return sc

    def load_instance(self) -> NetworkInstance:
        if self.instance is None:
            return fifteen_bus()
        return load_instance(self.instance)

    def resolve_targets(self):
        if self.targets:
            return self.targets
        if self.instance is None:
            return dict(BENCHMARK_DLMPS)
        return {}


@dataclass
class OracleResult:
    x_parts: list
    y: np.ndarray
    kkt: float
    iterations: int
    converged: bool
    trace: object
    seconds: float
    problem: OpfProblem = None


def reference_solve(problem, tol=1e-7, max_iters=60000, sigma=1.0, tau=None,
                    kkt_every=25, seed=0) -> OracleResult:
    """Deterministic full-sampling solve to a KKT tolerance.

    Accepts an OpfProblem, a NetworkInstance, or any block problem.  When
    the iteration cap is hit the best residual achieved is reported with
    converged=False.
    """
    if isinstance(problem, NetworkInstance):
        problem = build_opf_problem(problem)
    sampling = make_sampling("full", problem.d)
    metrics = metrics_for(problem, sampling, sigma=sigma, tau=tau)
    t0 = time.perf_counter()
    res = run(problem, sampling, metrics, metrics.sigma, max_iters, seed=seed,
              inner=InnerTolerance(eps0=1e-6, floor=1e-11),
              kkt_every=kkt_every, stop_kkt=tol)
    seconds = time.perf_counter() - t0
    return OracleResult(x_parts=res.x_parts, y=res.y, kkt=res.kkt,
                        iterations=res.iterations,
                        converged=bool(res.kkt <= tol), trace=res.trace,
                        seconds=seconds, problem=problem)


def dlmp_table(problem: OpfProblem, y) -> dict:
    """{(bus, t): (y_p, y_q)} view of a dual vector."""
    y_p, y_q = problem.dlmp(y)
    lay = problem.layout
    return {(n, t): (float(y_p[lay.pos(n), t]), float(y_q[lay.pos(n), t]))
            for n in lay.bus_ids for t in range(lay.T)}


def line_loading(problem: OpfProblem, x0):
    """Per-(line, period) apparent-power magnitude relative to the limit;
    the larger of the two line ends is reported."""
    geo = problem.blocks[0].geometry
    f, g, l = x0[geo.idx_f], x0[geo.idx_g], x0[geo.idx_l]
    near = np.hypot(f, g)
    far = np.hypot(f - geo.R * l, g - geo.X * l)
    return np.maximum(near, far) / geo.S


def compare_dlmps(candidate: dict, reference: dict, tol: float):
    """Per-key absolute comparison; returns (passed, rows)."""
    rows = []
    ok = True
    for key in sorted(reference):
        ref = reference[key]
        got = candidate.get(key)
        if got is None:
            rows.append({"bus": key[0], "t": key[1], "status": "missing"})
            ok = False
            continue
        err = max(abs(got[0] - ref[0]), abs(got[1] - ref[1]))
        passed = err <= tol
        ok &= passed
        rows.append({"bus": key[0], "t": key[1],
                     "y_p": got[0], "y_q": got[1],
                     "ref_p": ref[0], "ref_q": ref[1],
                     "abs_err": err, "status": "pass" if passed else "fail"})
    return ok, rows


def run_benchmark(scenario: Scenario) -> dict:
    """Execute a scenario end to end and write artifacts.

    Artifacts: trace.csv, dlmp.csv (randomized run), dlmp_oracle.csv,
    message_digest.json, report.json.  The report carries per-target
    pass/fail against the reference prices and the oracle gate.
    """
    out = Path(scenario.out or "bench_out")
    out.mkdir(parents=True, exist_ok=True)
    instance = scenario.load_instance()
    problem = build_opf_problem(instance)
    lay = problem.layout

    oracle = reference_solve(build_opf_problem(instance), tol=scenario.oracle_tol,
                             max_iters=scenario.oracle_max_iters,
                             sigma=scenario.sigma, tau=scenario.tau)
    y_p_o, y_q_o = problem.dlmp(oracle.y)
    write_dlmp_csv(out / "dlmp_oracle.csv", lay.bus_ids, y_p_o, y_q_o)

    sampling = make_sampling(scenario.sampling, problem.d)
    metrics = metrics_for(problem, sampling, sigma=scenario.sigma,
                          tau=scenario.tau)
    t0 = time.perf_counter()
    audit = None
    if scenario.sampling == "ppdlmp":
        sim = simulate(problem, metrics, scenario.iters, seed=scenario.seed,
                       kkt_every=scenario.kkt_every)
        y_run, x_parts, trace = sim.y, sim.x_parts, sim.trace
        sim.log.export_jsonl(out / "messages.jsonl")
        (out / "message_digest.json").write_text(
            json.dumps(sim.log.digest(), indent=2))
        audit = privacy_audit(sim.log, problem, iterations=scenario.iters)
    else:
        res = run(problem, sampling, metrics, metrics.sigma, scenario.iters,
                  seed=scenario.seed, kkt_every=scenario.kkt_every)
        y_run, x_parts, trace = res.y, res.x_parts, res.trace
    run_seconds = time.perf_counter() - t0

    write_trace_csv(trace, out / "trace.csv")
    y_p, y_q = problem.dlmp(y_run)
    write_dlmp_csv(out / "dlmp.csv", lay.bus_ids, y_p, y_q)

    targets = scenario.resolve_targets()
    cand = dlmp_table(problem, y_run)
    paper_ok, paper_rows = (compare_dlmps(cand, targets, scenario.paper_tol)
                            if targets else (True, []))
    oracle_dev = float(np.max(np.abs(y_run - oracle.y)))
    oracle_ok = oracle_dev <= scenario.oracle_gate

    loading = line_loading(problem, x_parts[0])
    saturated = [
        {"bus": int(lay.bus_ids[i]), "t": int(t), "loading": float(loading[i, t])}
        for i, t in zip(*np.nonzero(loading >= 1.0 - 1e-3))
    ]
    gaps = cone_tightness(x_parts[0], lay)

    report = {
        "scenario": {k: (v if not isinstance(v, dict) else None)
                     for k, v in asdict(scenario).items()},
        "oracle": {"kkt": oracle.kkt, "iterations": oracle.iterations,
                   "converged": oracle.converged, "seconds": oracle.seconds},
        "run": {"iterations": scenario.iters, "seconds": run_seconds,
                "h_last": trace.h_last[-1] if trace.h_last else None},
        "paper_targets": {"passed": paper_ok, "tolerance": scenario.paper_tol,
                          "rows": paper_rows},
        "oracle_gate": {"passed": oracle_ok, "deviation": oracle_dev,
                        "tolerance": scenario.oracle_gate},
        "privacy_audit": (None if audit is None else
                          {"passed": audit.passed, "counts": audit.counts,
                           "failures": audit.failures}),
        "saturated_lines": saturated,
        "max_cone_gap": float(np.max(gaps)),
        "passed": bool(paper_ok and oracle_ok and oracle.converged
                       and (audit is None or audit.passed)),
    }
    (out / "report.json").write_text(json.dumps(report, indent=2))
    return report


def check_dlmp_files(candidate_path, reference_path, tol: float) -> dict:
    """Compare two price CSV files at an absolute tolerance."""
    cand = read_dlmp_csv(candidate_path)
    ref = read_dlmp_csv(reference_path)
    ok, rows = compare_dlmps(cand, ref, tol)
    return {"passed": ok, "tolerance": tol, "rows": rows}
