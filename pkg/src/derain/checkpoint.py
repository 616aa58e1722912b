"""Self-describing model checkpoints.

A checkpoint is a ``torch.save`` dict holding the schema version, the model
kind and constructor arguments, the named float32 parameter tensors, the
optimizer state and the training step, so :func:`load_checkpoint` can rebuild
the model without any other file.
"""

from pathlib import Path

import torch

from .network import JointDerainNet, NetworkConfig
from .pipeline import DehazeNet, RecurrentDerainer

SCHEMA_VERSION = 1
KINDS = ("joint", "recurrent", "dehaze")


class CheckpointError(OSError):
    pass


def model_kind(model):
    if isinstance(model, RecurrentDerainer):
        return "recurrent"
    if isinstance(model, DehazeNet):
        return "dehaze"
    if isinstance(model, JointDerainNet):
        return "joint"
    raise CheckpointError(f"cannot checkpoint {type(model).__name__}")


def model_args(model):
    if isinstance(model, RecurrentDerainer):
        return {"tau": model.tau, "shared": model.shared}
    return {}


def build_model(kind, network_config, **kwargs):
    cfg = NetworkConfig(**network_config)
    if kind == "joint":
        return JointDerainNet(cfg)
    if kind == "recurrent":
        return RecurrentDerainer(cfg, **kwargs)
    if kind == "dehaze":
        return DehazeNet(cfg)
    raise CheckpointError(f"unknown model kind {kind!r}")


def save_checkpoint(path, model, optimizer=None, step=0, config_hash=None, extra=None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "schema_version": SCHEMA_VERSION,
        "kind": model_kind(model),
        "network_config": model.cfg.to_dict(),
        "model_args": model_args(model),
        "state_dict": {k: v.detach().to(torch.float32).cpu() for k, v in model.state_dict().items()},
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "step": int(step),
        "config_hash": config_hash,
        "extra": extra or {},
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)
    return path


def load_checkpoint(path, dtype=torch.float32):
    """Rebuild a model from ``path``; returns ``(model, payload)``."""
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except (OSError, RuntimeError) as err:
        raise CheckpointError(f"cannot read checkpoint {path}: {err}") from err
    if payload.get("schema_version") != SCHEMA_VERSION:
        raise CheckpointError(f"{path}: unsupported schema {payload.get('schema_version')}")
    model = build_model(payload["kind"], payload["network_config"], **payload["model_args"])
    model.load_state_dict(payload["state_dict"])
    model.to(dtype).eval()
    return model, payload
