"""Recurrent deraining, the dehazing network and stage sequencing.

Each recurrence predicts a residual ``eps_t = O_t - B_t`` and passes its
background on as the next input, so after ``tau`` rounds

    B_tau = O_0 - sum_t eps_t

(``eps`` is measured as rain *removed*, which makes it nonnegative for
additive streaks). Mask and streak predictions are side outputs and are not
fed forward.
"""

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .metrics import psnr
from .network import (ContextualizedDilatedNet, JointDerainNet, NetworkConfig, TrainingDiverged,
                      _identity_init, conv, joint_loss, to_image, to_tensor)

STAGES = ("derain", "dehaze")


class PipelineError(ValueError):
    """Invalid pipeline configuration or missing checkpoint."""


class RecurrentDerainer(nn.Module):
    """A cascade of joint detection/removal networks, one per recurrence.

    With ``shared=True`` a single network is applied at every recurrence and
    ``tau`` may be raised freely at inference.
    """

    def __init__(self, cfg=None, tau=3, shared=False):
        super().__init__()
        if tau < 1:
            raise PipelineError("tau must be >= 1")
        self.cfg = cfg or NetworkConfig()
        self.tau = tau
        self.shared = shared
        self.stages = nn.ModuleList(JointDerainNet(self.cfg) for _ in range(1 if shared else tau))

    def stage(self, t):
        if self.shared:
            return self.stages[0]
        if t >= len(self.stages):
            raise PipelineError(f"model has {len(self.stages)} recurrences, asked for step {t + 1}")
        return self.stages[t]

    def forward(self, O, tau=None):
        """Differentiable recurrence; returns ``[(prediction, eps, B), ...]``."""
        tau = self.tau if tau is None else tau
        out = []
        for t in range(tau):
            pred = self.stage(t)(O)
            eps = O - pred.background
            B = O - eps
            out.append((pred, eps, B))
            O = B
        return out


class DehazeNet(nn.Module):
    """Single-round contextualized dilated extractor with one image head."""

    def __init__(self, cfg=None):
        super().__init__()
        base = cfg or NetworkConfig()
        self.cfg = NetworkConfig(**{**base.to_dict(), "intra_recurrences": 1})
        c, ch = self.cfg.feature_channels, self.cfg.input_channels
        self.extractor = ContextualizedDilatedNet(self.cfg)
        self.out = conv(c + ch, ch, self.cfg.kernel_size)
        _identity_init(self.out, c, ch)

    def forward(self, O):
        return self.out(torch.cat([self.extractor(O), O], 1))


def _dtype(net):
    return next(net.parameters()).dtype


def _as_stage(model, t):
    if isinstance(model, RecurrentDerainer):
        return model.stage(t)
    return model  # a bare JointDerainNet is reused at every recurrence


def derain_once(O, net):
    """One pass: returns ``(eps, mask_prob, streak, background)`` as float64 arrays."""
    O = np.asarray(O, dtype=np.float64)
    with torch.no_grad():
        pred = net(to_tensor(O, _dtype(net)))
    B_hat = to_image(pred.background).reshape(O.shape)
    eps = O - B_hat
    return eps, to_image(pred.mask_prob), to_image(pred.streak), B_hat


@dataclass
class RecurrenceTrace:
    """Per-iteration ``O, eps, R, S, B`` records of one recurrent run."""

    O0: np.ndarray
    steps: list = field(default_factory=list)

    def replay(self):
        """Rebuild ``B_tau`` from ``O_0`` and the logged residues."""
        O = self.O0
        for step in self.steps:
            O = O - step["eps"]
        return O

    def total_residue(self):
        return sum(step["eps"] for step in self.steps)

    def psnr_by_iteration(self, B):
        """PSNR of ``O_0`` and of each ``B_t`` against ``B``, so regressions show."""
        images = [self.O0] + [step["B"] for step in self.steps]
        return [psnr(np.clip(img, 0, 1), B) for img in images]


def derain_recurrent(O0, model, tau=None):
    """Iterate single passes ``tau`` times; returns ``(B_tau, trace)``.

    Intermediate images stay in float64 and are not clipped, so the residues
    telescope exactly.
    """
    if tau is None:
        tau = model.tau if isinstance(model, RecurrentDerainer) else 1
    if tau < 1:
        raise PipelineError("tau must be >= 1")
    O = np.asarray(O0, dtype=np.float64)
    trace = RecurrenceTrace(O.copy())
    for t in range(tau):
        eps, R, S, _ = derain_once(O, _as_stage(model, t))
        B = O - eps
        trace.steps.append({"O": O, "eps": eps, "R": R, "S": S, "B": B})
        O = B
    return O, trace


def recurrent_loss(model, batch, weights=None, tau=None):
    """Summed joint loss over recurrences; iteration ``t`` sees iteration ``t-1``'s output.

    Returns ``(total, [per-iteration totals], [per-iteration breakdowns])``.
    """
    O, B, S, R = batch
    totals, parts = [], []
    for pred, _, _ in model(O, tau):
        total, terms = joint_loss(pred, S, B, R, weights)
        totals.append(total)
        parts.append(terms)
    return sum(totals), totals, parts


def train_recurrent(model, optimizer, batch, weights=None):
    """One gradient step on the summed per-recurrence loss."""
    optimizer.zero_grad(set_to_none=True)
    total, totals, parts = recurrent_loss(model, batch, weights)
    value = total.item()
    if not np.isfinite(value):
        raise TrainingDiverged(f"recurrent loss is {value}")
    total.backward()
    optimizer.step()
    return value, [t.item() for t in totals]


def dehaze_loss(net, batch):
    O, B = batch[0], batch[1]
    return F.mse_loss(net(O), B)


def dehaze(O, net):
    """Apply the dehazing network to one image (float64 in, float64 out)."""
    O = np.asarray(O, dtype=np.float64)
    with torch.no_grad():
        out = net(to_tensor(O, _dtype(net)))
    return to_image(out).reshape(O.shape)


@dataclass
class PipelineConfig:
    tau: int = 3
    stage_sequence: tuple = ("derain", "dehaze", "derain")
    derain_checkpoint: str | None = None
    dehaze_checkpoint: str | None = None
    export_bits: int = 8

    def __post_init__(self):
        self.stage_sequence = tuple(self.stage_sequence)
        if self.tau < 1:
            raise PipelineError("tau must be >= 1")
        if not self.stage_sequence:
            raise PipelineError("stage_sequence must not be empty")
        bad = [s for s in self.stage_sequence if s not in STAGES]
        if bad:
            raise PipelineError(f"unknown stages {bad}; expected {STAGES}")
        if self.export_bits not in (8, 16):
            raise PipelineError("export_bits must be 8 or 16")

    def to_dict(self):
        d = asdict(self)
        d["stage_sequence"] = list(self.stage_sequence)
        return d

    @classmethod
    def from_json(cls, path):
        path = Path(path)
        d = json.loads(path.read_text())
        for key in ("derain_checkpoint", "dehaze_checkpoint"):
            if d.get(key) and not Path(d[key]).is_absolute():
                d[key] = str(path.parent / d[key])
        return cls(**d)


def load_stage_models(cfg):
    """Load one model per distinct stage named in ``cfg.stage_sequence``."""
    from .checkpoint import load_checkpoint

    models = {}
    for stage in dict.fromkeys(cfg.stage_sequence):
        ref = getattr(cfg, f"{stage}_checkpoint")
        if not ref or not Path(ref).is_file():
            raise PipelineError(f"stage '{stage}' needs a checkpoint; got {ref!r}")
        models[stage], _ = load_checkpoint(ref)
    return models


def run_sequence(O, cfg, models=None):
    """Apply the configured stages in order.

    ``models`` maps stage name to a loaded network; missing entries are read
    from the checkpoints in ``cfg``. Returns ``(image, trace)`` where the
    trace has one ``{"stage", "image"}`` record per stage.
    """
    models = dict(models or {})
    missing = [s for s in cfg.stage_sequence if s not in models]
    if missing:
        sub = PipelineConfig(**{**cfg.to_dict(), "stage_sequence": missing})
        models.update(load_stage_models(sub))
    img = np.asarray(O, dtype=np.float64)
    trace = []
    for stage in cfg.stage_sequence:
        if stage == "derain":
            img, _ = derain_recurrent(img, models[stage], cfg.tau)
        else:
            img = dehaze(img, models[stage])
        trace.append({"stage": stage, "image": img})
    return img, trace
