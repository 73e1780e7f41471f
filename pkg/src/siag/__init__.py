"""Streaming incremental aggregated gradient (sIAG) on a simulated parameter server."""
from siag._backend import DEFAULT_BACKEND, available_backends
from siag.harness import (ExperimentConfig, ResultSet, run_ensemble, run_experiment, run_trial,
                          slope_fit, speedup_table)
from siag.optimizer import StepSchedule
from siag.problem import ProblemSpec, generate_instance
from siag.schedule import ScheduleConfig, make_schedule
from siag.theory import derive_constants, theorem_bound

__version__ = "0.1.0"
