"""Index, verify, and evaluate unresolved sorry obligations in Lean repositories."""

from __future__ import annotations

from .errors import SorryForgeError
from .model import (
    DatasetSnapshot,
    GoalState,
    ProofProposal,
    RepoCategory,
    RepoCoordinates,
    SorryRecord,
    SourceLocation,
    VerdictStatus,
    VerificationVerdict,
    compute_id,
    normalize_goal,
    validate_record,
)

__version__ = "0.1.0"

__all__ = [
    "SorryForgeError",
    "DatasetSnapshot",
    "GoalState",
    "ProofProposal",
    "RepoCategory",
    "RepoCoordinates",
    "SorryRecord",
    "SourceLocation",
    "VerdictStatus",
    "VerificationVerdict",
    "compute_id",
    "normalize_goal",
    "validate_record",
    "__version__",
]
