"""Build-and-reproduce job service: job types, toolchain selection, executors,
durable job store, and outcome classification."""

from crashgym.gym.jobs import (
    BuildJob,
    BuildOutcome,
    BuildOutcomeKind,
    Job,
    JobKind,
    JobState,
    JobValidationError,
    ReproAggregate,
    Reproducer,
    ReproJob,
    ReproOutcome,
    VmResult,
    VmResultKind,
    VmSpec,
    assign_reproducers,
    classify_repro,
)
from crashgym.gym.service import GymService, UnknownJob
from crashgym.gym.toolchains import UnsupportedToolchain, select_toolchain

__all__ = [
    "BuildJob",
    "BuildOutcome",
    "BuildOutcomeKind",
    "GymService",
    "Job",
    "JobKind",
    "JobState",
    "JobValidationError",
    "ReproAggregate",
    "Reproducer",
    "ReproJob",
    "ReproOutcome",
    "UnknownJob",
    "UnsupportedToolchain",
    "VmResult",
    "VmResultKind",
    "VmSpec",
    "assign_reproducers",
    "classify_repro",
    "select_toolchain",
]
