"""Single-file JSON checkpoints with a content hash.

The hash covers every field except itself (sorted-key canonical JSON),
so equal runs produce byte-identical files and tampering is detectable.
"""

from __future__ import annotations

import hashlib
import json

import numpy as np

from .config import RunConfig
from .errors import ConfigError
from .gating import ClassifierHead, GateParams
from .memory import FusionLayer
from .pipeline import PipelineParams
from .prototypes import PolicyNet, PrototypeBankSet, PrototypeConfig


def content_hash(doc: dict) -> str:
    canonical = json.dumps(doc, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def save_checkpoint(path, params: PipelineParams, banks: PrototypeBankSet,
                    cfg: RunConfig, seed: int, class_weights=None, extra: dict | None = None):
    net = params.proto.policy_net
    doc = {
        "format": "phasegate-checkpoint-v1",
        "feature_dim": params.feature_dim,
        "num_phases": params.num_classes,
        "head_weight": params.head.weight.tolist(),
        "fusion_weight": params.fusion.weight.tolist(),
        "fusion_bias": params.fusion.bias.tolist(),
        "gate": {
            "a_m": params.gate.a_m,
            "a_u": params.gate.a_u,
            "tau_m": params.gate.tau_m,
            "tau_u": params.gate.tau_u,
        },
        "memory": {
            "capacity": params.memory.capacity,
            "threshold": params.memory.threshold,
            "decay": params.memory.decay,
        },
        "prototype": {
            "capacity": params.proto.capacity,
            "retrieval_k": params.proto.retrieval_k,
            "policy_mode": params.proto.policy_mode,
        },
        "policy_net": None
        if net is None
        else {"w1": net.w1.tolist(), "b1": net.b1.tolist(), "w2": net.w2.tolist(), "b2": net.b2},
        "prototype_banks": banks.to_lists(),
        "class_weights": None if class_weights is None else np.asarray(class_weights).tolist(),
        "config": cfg.to_dict(),
        "seed": seed,
        "extra": extra or {},
    }
    doc["hash"] = content_hash({k: v for k, v in doc.items() if k != "hash"})
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return doc["hash"]


def load_checkpoint(path):
    """Returns (params, banks, cfg, seed, doc); verifies the content hash."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as e:
        raise ConfigError(f"cannot read checkpoint {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"checkpoint {path} is not valid JSON: {e}") from e
    if doc.get("format") != "phasegate-checkpoint-v1":
        raise ConfigError(f"{path} is not a recognized checkpoint file")
    stored = doc.get("hash")
    actual = content_hash({k: v for k, v in doc.items() if k != "hash"})
    if stored != actual:
        raise ConfigError(f"checkpoint {path} failed its content-hash check")
    cfg = RunConfig.from_dict(doc["config"])
    D = int(doc["feature_dim"])
    C = int(doc["num_phases"])
    net = None
    if doc["policy_net"] is not None:
        pn = doc["policy_net"]
        net = PolicyNet(
            w1=np.asarray(pn["w1"], dtype=np.float64),
            b1=np.asarray(pn["b1"], dtype=np.float64),
            w2=np.asarray(pn["w2"], dtype=np.float64),
            b2=float(pn["b2"]),
        )
    proto_cfg = PrototypeConfig(
        capacity=int(doc["prototype"]["capacity"]),
        retrieval_k=int(doc["prototype"]["retrieval_k"]),
        policy_mode=doc["prototype"]["policy_mode"],
        policy_net=net,
    )
    from .memory import MemoryConfig

    params = PipelineParams(
        head=ClassifierHead(np.asarray(doc["head_weight"], dtype=np.float64)),
        fusion=FusionLayer(
            np.asarray(doc["fusion_weight"], dtype=np.float64),
            np.asarray(doc["fusion_bias"], dtype=np.float64),
        ),
        gate=GateParams(**doc["gate"]),
        memory=MemoryConfig(
            capacity=int(doc["memory"]["capacity"]),
            threshold=float(doc["memory"]["threshold"]),
            decay=float(doc["memory"]["decay"]),
        ),
        proto=proto_cfg,
    ).validate()
    banks = PrototypeBankSet.from_lists(doc["prototype_banks"], proto_cfg.capacity, D)
    if banks.num_classes != C:
        raise ConfigError("checkpoint prototype banks disagree with num_phases")
    return params, banks, cfg, int(doc["seed"]), doc
