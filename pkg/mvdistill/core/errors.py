"""
mvdistill: Error Hierarchy

Every failure raised by the package carries a machine-readable error code,
the component that raised it, and a structured payload. The CLI renders these
as one-line JSON errors.
"""

from __future__ import annotations

from typing import Any, Dict, Optional


class MvDistillError(Exception):
    """Structured failure propagated to the command layer."""

    error_code: str = "INTERNAL_ERROR"
    component: str = "mvdistill"

    def __init__(
        self,
        message: str,
        payload: Optional[Dict[str, Any]] = None,
        component: Optional[str] = None,
    ):
        super().__init__(message)
        self.message = message
        self.payload = payload or {}
        if component is not None:
            self.component = component

    def to_payload(self) -> Dict[str, Any]:
        return {
            "error_code": self.error_code,
            "component": self.component,
            "message": self.message,
            **({"details": self.payload} if self.payload else {}),
        }


# ━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━
# Contract Errors
# ━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━


class ContractViolation(MvDistillError, ValueError):
    error_code = "CONTRACT_VIOLATION"


class DegeneratePoseError(ContractViolation):
    error_code = "DEGENERATE_POSE"
    component = "camera"


class ScheduleError(ContractViolation):
    error_code = "INVALID_SCHEDULE"
    component = "diffusion"


class SequenceTooLongError(ContractViolation):
    error_code = "SEQUENCE_TOO_LONG"
    component = "denoiser"


class InferenceContractError(ContractViolation):
    """Raised when anything other than an embedding reaches an inference path."""

    error_code = "INFERENCE_CONTRACT"
    component = "inference"


# ━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━
# Storage Errors
# ━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━


class DatasetError(MvDistillError):
    error_code = "DATASET_ERROR"
    component = "dataset"


class DatasetVersionError(DatasetError):
    error_code = "DATASET_VERSION_MISMATCH"


class MissingShardError(DatasetError):
    error_code = "MISSING_SHARD"


class CorruptShardError(DatasetError):
    error_code = "CORRUPT_SHARD"


class CheckpointError(MvDistillError):
    error_code = "CHECKPOINT_ERROR"
    component = "checkpoint"


class ConfigError(MvDistillError):
    error_code = "INVALID_CONFIG"
    component = "config"


# ━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━
# Runtime Errors
# ━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━


class NonFiniteLossError(MvDistillError):
    error_code = "NON_FINITE_LOSS"
    component = "trainer"


class FieldDivergedError(MvDistillError):
    error_code = "FIELD_DIVERGED"
    component = "distill"


class UnknownCommandError(MvDistillError):
    error_code = "UNKNOWN_COMMAND"
    component = "cli"


class UsageError(MvDistillError):
    error_code = "INVALID_ARGUMENTS"
    component = "cli"
