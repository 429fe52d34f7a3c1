"""Distributed asynchronous online vector quantization, deterministically.

A library plus command line for simulating M processors that interleave
online quantizer descent with delayed averaging over a time-varying
communication schedule, and for checking the resulting trajectories against
the consensus and convergence guarantees of the underlying theory.
"""

__version__ = "0.1.0"

from .agreement import (AgreementState, PhiLimits, PhiLimitSeries, PhiTable,
                        agreement_step, agreement_vector, compute_phi,
                        estimate_phi_limits, phi_family, phi_limit_series,
                        phi_response_series)
from .baselines import BaselineRun, clvq_step, lloyd_step, run_clvq, run_lloyd
from .diagnostics import (ConvergenceReport, RunMetrics, compute_metrics,
                          consensus_decay, estimate_lipschitz, summarize, theta,
                          theta_series)
from .engine import (EventLog, RunArtifacts, RunConfig, StepPolicy, dalvq_tick,
                     descent_term, run)
from .errors import ConfigError, ScheduleValidationError
from .geometry import (QuantizerVec, SampleBatch, empirical_distortion,
                       empirical_gradient, gradient_observation,
                       min_component_separation, nearest_cell)
from .measures import (DistributionSpec, StreamHandle, draw_index, init_quantizer,
                       make_batch, sample)
from .schedule import (CommSchedule, ScheduleSpec, ValidationReport,
                       communication_graph, generate, read_trace, validate,
                       write_trace)

__all__ = [
    "__version__",
    "AgreementState", "PhiLimits", "PhiLimitSeries", "PhiTable",
    "agreement_step", "agreement_vector", "compute_phi", "estimate_phi_limits",
    "phi_family", "phi_limit_series", "phi_response_series",
    "BaselineRun", "clvq_step", "lloyd_step", "run_clvq", "run_lloyd",
    "ConvergenceReport", "RunMetrics", "compute_metrics", "consensus_decay",
    "estimate_lipschitz", "summarize", "theta", "theta_series",
    "EventLog", "RunArtifacts", "RunConfig", "StepPolicy", "dalvq_tick",
    "descent_term", "run",
    "ConfigError", "ScheduleValidationError",
    "QuantizerVec", "SampleBatch", "empirical_distortion", "empirical_gradient",
    "gradient_observation", "min_component_separation", "nearest_cell",
    "DistributionSpec", "StreamHandle", "draw_index", "init_quantizer",
    "make_batch", "sample",
    "CommSchedule", "ScheduleSpec", "ValidationReport", "communication_graph",
    "generate", "read_trace", "validate", "write_trace",
]
