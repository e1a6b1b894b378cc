"""Flat run configuration: one schema for every command.

Each run writes its fully resolved config next to its outputs, and that
file round-trips as a valid --config input. Unknown keys are rejected so
typos fail loudly instead of silently using defaults.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

from .errors import ConfigError
from .gating import GateParams
from .memory import MemoryConfig
from .prototypes import PolicyNet, PrototypeConfig


@dataclass
class RunConfig:
    seed: int = 0

    # problem shape
    feature_dim: int = 32
    num_phases: int = 7

    # synthetic workflow generator
    num_sequences: int = 20
    mean_durations: list = field(
        default_factory=lambda: [120.0, 90.0, 110.0, 80.0, 20.0, 100.0, 80.0]
    )
    duration_jitter: float = 0.4
    noise_sigma: float = 0.35
    confusable_pairs: list = field(default_factory=lambda: [[1, 2], [5, 6]])
    confusable_cosine: float = 0.9
    ramp_frames: int = 8
    skip_prob: float = 0.1
    train_fraction: float = 0.7

    # memory pathway
    memory_capacity: int = 60
    reliability_threshold: float = 0.75
    temporal_decay: float = 10.0

    # prototype pathway
    prototype_capacity: int = 64
    retrieval_k: int = 8
    policy_mode: str = "deterministic"
    policy_weights_file: str = ""

    # gating
    gate_tau_m: float = 0.7
    gate_tau_u: float = 0.7
    gate_a_init: float = 4.0
    a_clamp_min: float = 0.01
    a_clamp_max: float = 100.0

    # training
    epochs: int = 30
    learning_rate: float = 0.05
    proto_refresh_per_epoch: bool = True

    # execution
    backend: str = ""

    def validate(self) -> "RunConfig":
        c = self
        def bad(msg):
            raise ConfigError(msg)

        if c.num_phases < 2:
            bad("num_phases must be >= 2")
        if c.feature_dim < c.num_phases:
            bad("feature_dim must be >= num_phases (orthonormal centroids need room)")
        if c.num_sequences < 1:
            bad("num_sequences must be >= 1")
        if len(c.mean_durations) != c.num_phases:
            bad(
                f"mean_durations has {len(c.mean_durations)} entries "
                f"but num_phases is {c.num_phases}"
            )
        if any(d < 1 for d in c.mean_durations):
            bad("mean durations must be >= 1 frame")
        if c.duration_jitter < 0:
            bad("duration_jitter must be >= 0")
        if c.noise_sigma < 0:
            bad("noise_sigma must be >= 0")
        if c.ramp_frames < 0:
            bad("ramp_frames must be >= 0")
        if not (0.0 <= c.skip_prob < 1.0):
            bad("skip_prob must lie in [0, 1)")
        seen = set()
        for pair in c.confusable_pairs:
            if len(pair) != 2:
                bad(f"confusable pair {pair} must have exactly two phases")
            a, b = pair
            if not (0 <= a < c.num_phases and 0 <= b < c.num_phases):
                bad(f"confusable pair {pair} references an unknown phase")
            if a == b:
                bad(f"confusable pair {pair} repeats a phase")
            if a in seen or b in seen:
                bad("confusable pairs must not share phases")
            seen.update((a, b))
        if c.confusable_cosine > 1.0:
            bad("confusable_cosine > 1 is not a feasible geometry")
        if c.confusable_cosine < -1.0:
            bad("confusable_cosine < -1 is not a feasible geometry")
        if not (0.0 < c.train_fraction < 1.0):
            bad("train_fraction must lie strictly between 0 and 1")
        if c.memory_capacity < 1:
            bad("memory_capacity must be >= 1")
        if not (-1.0 < c.reliability_threshold <= 3.0):
            bad("reliability_threshold must lie in (-1, 3]")
        if c.temporal_decay <= 0:
            bad("temporal_decay must be positive")
        if c.prototype_capacity < 1:
            bad("prototype_capacity must be >= 1")
        if c.retrieval_k < 1:
            bad("retrieval_k must be >= 1")
        if c.policy_mode not in ("deterministic", "stochastic"):
            bad(f"policy_mode {c.policy_mode!r} not recognized")
        if not (0.0 < c.gate_tau_m < 1.0 and 0.0 < c.gate_tau_u < 1.0):
            bad("gate thresholds must lie in (0, 1)")
        if not (0.0 < c.a_clamp_min <= c.a_clamp_max):
            bad("gate slope clamp range invalid")
        if c.epochs < 1:
            bad("epochs must be >= 1")
        if c.learning_rate <= 0:
            bad("learning_rate must be positive")
        if c.backend not in ("", "python", "compiled"):
            bad(f"backend {c.backend!r} not recognized (use 'python' or 'compiled')")
        if c.seed < 0:
            bad("seed must be a non-negative integer")
        return c

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def field_names(cls) -> set:
        return {f.name for f in dataclasses.fields(cls)}

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        known = cls.field_names()
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        cfg = cls(**data)
        return cfg.validate()

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            with open(path, "r", encoding="utf-8") as fh:
                data = json.load(fh)
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"config {path} is not valid JSON: {e}") from e
        return cls.from_dict(data)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    def with_overrides(self, pairs) -> "RunConfig":
        """Apply repeatable key=value overrides; values parse as JSON."""
        data = self.to_dict()
        known = self.field_names()
        for raw in pairs:
            if "=" not in raw:
                raise ConfigError(f"override {raw!r} must look like key=value")
            key, value = raw.split("=", 1)
            key = key.strip()
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
            try:
                data[key] = json.loads(value)
            except json.JSONDecodeError:
                data[key] = value
        return RunConfig.from_dict(data)

    # component-config extractors

    def memory_config(self) -> MemoryConfig:
        return MemoryConfig(
            capacity=self.memory_capacity,
            threshold=self.reliability_threshold,
            decay=self.temporal_decay,
        )

    def prototype_config(self) -> PrototypeConfig:
        net = None
        if self.policy_mode == "stochastic":
            if self.policy_weights_file:
                net = load_policy_net(self.policy_weights_file)
            else:
                net = PolicyNet.seeded(self.seed)
        return PrototypeConfig(
            capacity=self.prototype_capacity,
            retrieval_k=self.retrieval_k,
            policy_mode=self.policy_mode,
            policy_net=net,
        )

    def gate_params(self) -> GateParams:
        return GateParams(
            a_m=self.gate_a_init,
            a_u=self.gate_a_init,
            tau_m=self.gate_tau_m,
            tau_u=self.gate_tau_u,
        )


def load_policy_net(path) -> PolicyNet:
    import numpy as np

    try:
        with open(path, "r", encoding="utf-8") as fh:
            data = json.load(fh)
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read policy weights {path}: {e}") from e
    try:
        return PolicyNet(
            w1=np.asarray(data["w1"], dtype=float),
            b1=np.asarray(data["b1"], dtype=float),
            w2=np.asarray(data["w2"], dtype=float),
            b2=float(data["b2"]),
        )
    except (KeyError, TypeError, ValueError) as e:
        raise ConfigError(f"policy weights {path} malformed: {e}") from e
