"""Streaming phase classification with a dual-pathway refinement stage.

A frozen per-frame feature stream passes through a linear baseline head;
a reliability-filtered memory of recent frames and a bank of hard
per-class prototypes each propose a refined feature, and confidence-
driven gates blend them into the final prediction.
"""

from .config import RunConfig
from .errors import ConfigError, ContractViolation, TrainingDivergence
from .gating import ClassifierHead, GateParams, classify, gates, integrate
from .memory import FusionLayer, MemoryBank, MemoryEntry, MemoryConfig, refine, reliability, select_and_weight
from .metrics import MetricsReport, evaluate
from .pipeline import (
    GATE_FORCE0,
    GATE_FORCE1,
    GATE_LEARNED,
    PipelineParams,
    SequenceResult,
    SequenceSession,
    run_sequence,
)
from .prototypes import (
    PolicyNet,
    PolicyState,
    Prototype,
    PrototypeBankSet,
    PrototypeConfig,
    policy_decide,
    policy_state,
    retrieve,
    uncertainty,
)
from .synthetic import LabeledSequence, WorkflowSpec, generate, split
from .training import TrainResult, grad_check, loss_ce, loss_kl, train

__version__ = "0.1.0"

__all__ = [
    "ClassifierHead",
    "ConfigError",
    "ContractViolation",
    "FusionLayer",
    "GATE_FORCE0",
    "GATE_FORCE1",
    "GATE_LEARNED",
    "GateParams",
    "LabeledSequence",
    "MemoryBank",
    "MemoryEntry",
    "MetricsReport",
    "PipelineParams",
    "PolicyNet",
    "PolicyState",
    "Prototype",
    "PrototypeBankSet",
    "MemoryConfig",
    "RunConfig",
    "SequenceResult",
    "SequenceSession",
    "TrainResult",
    "TrainingDivergence",
    "PrototypeConfig",
    "WorkflowSpec",
    "classify",
    "evaluate",
    "gates",
    "generate",
    "grad_check",
    "integrate",
    "loss_ce",
    "loss_kl",
    "policy_decide",
    "policy_state",
    "refine",
    "reliability",
    "retrieve",
    "run_sequence",
    "select_and_weight",
    "split",
    "train",
    "uncertainty",
]
