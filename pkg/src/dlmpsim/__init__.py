"""Distribution locational marginal prices on radial grids, computed by a
privacy-preserving randomized block-coordinate primal-dual method."""

from .grid import (Bus, FlexibilityProfile, InstanceError, NetworkInstance,
                   ancestor_map, fifteen_bus, import_table_csv, load_instance,
                   random_instance, serialize_instance)
from .assembly import (CouplingSystem, DsoLayout, LaLayout, OpfProblem,
                       QuadraticCost, ZeroCost, build_coupling,
                       build_opf_problem, dso_cost, export_triplets, la_cost,
                       smoothness_matrix)
from .projections import (LaFeasibleSet, project_rotated_soc, prox_la)
from .solver import (AveragedForm, BlockProblem, BoxBlock, FreeBlock,
                     InnerTolerance, SamplingScheme, StepMetrics, auto_tau,
                     eso_check, gamma_coefficients, make_sampling, metrics_for,
                     run, run_averaged, stepsize_matrices)
from .agents import (AuditReport, Message, MessageLog, equivalence_harness,
                     gamma_consistency, privacy_audit, simulate,
                     simulate_instance)
from .diagnostics import (ConvergenceTrace, cone_tightness, kkt_residual,
                          rate_fit, write_dlmp_csv, write_trace_csv)
from .bench import (BENCHMARK_DLMPS, BENCHMARK_SATURATED, Scenario,
                    check_dlmp_files, dlmp_table, line_loading,
                    reference_solve, run_benchmark)

__version__ = "0.1.0"
