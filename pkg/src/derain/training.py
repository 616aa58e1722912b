"""Crop sampling and training loops with periodic checkpoints."""

import json
import logging
import time
from pathlib import Path

import numpy as np
import torch

from .checkpoint import load_checkpoint, save_checkpoint
from .metrics import psnr
from .network import LossWeights, TrainingDiverged, joint_loss, make_optimizer
from .pipeline import (DehazeNet, RecurrentDerainer, dehaze, dehaze_loss, derain_recurrent,
                       recurrent_loss)

log = logging.getLogger(__name__)


def derain_targets(ex):
    """Training targets ``(B, S, R)`` for a deraining network.

    Streaks are supervised where they are visible (``S * R``). For hazy
    examples the background target keeps the veil, ``a * B + (1 - a) * A``,
    and the streaks are attenuated by ``a``; removing the veil is left to the
    dehazing stage.
    """
    S = ex.S * ex.R
    B = ex.B
    if ex.haze is not None:
        alpha, A = ex.haze.validate()
        A = A.reshape(1, 1, -1) if A.ndim == 1 else A
        B = alpha * B + (1.0 - alpha) * A
        S = alpha * S
    return B, S, ex.R


class CropSampler:
    """Random aligned crops of ``(O, B, S, R)`` batched as float tensors.

    ``target`` selects what ``B``/``S`` mean: ``"derain"`` uses
    :func:`derain_targets`, ``"dehaze"`` pairs the hazy input with the clean
    background.
    """

    def __init__(self, examples, crop=64, batch_size=8, seed=0, target="derain",
                 dtype=torch.float32):
        if not examples:
            raise ValueError("no training examples")
        self.crop, self.batch_size, self.dtype = crop, batch_size, dtype
        self.rng = np.random.default_rng(seed)
        self.items = []
        for ex in examples:
            h, w = ex.O.shape[:2]
            if h < crop or w < crop:
                raise ValueError(f"example {ex.params.get('id')} smaller than crop {crop}")
            if target == "derain":
                B, S, R = derain_targets(ex)
            elif target == "dehaze":
                B, S, R = ex.B, ex.S, ex.R
            else:
                raise ValueError(f"unknown target {target!r}")
            self.items.append((np.asarray(ex.O, np.float32), np.asarray(B, np.float32),
                               np.asarray(S, np.float32), np.asarray(R, np.float32)))

    def state(self):
        return self.rng.bit_generator.state

    def set_state(self, state):
        self.rng.bit_generator.state = state

    def __call__(self):
        c = self.crop
        out = [[], [], [], []]
        for _ in range(self.batch_size):
            O, B, S, R = self.items[self.rng.integers(len(self.items))]
            r = self.rng.integers(O.shape[0] - c + 1)
            q = self.rng.integers(O.shape[1] - c + 1)
            flip = self.rng.random() < 0.5
            for lst, arr in zip(out, (O, B, S, R)):
                patch = arr[r:r + c, q:q + c]
                if flip:
                    patch = patch[:, ::-1]
                lst.append(patch if patch.ndim == 3 else patch[..., None])
        return tuple(torch.from_numpy(np.ascontiguousarray(np.stack(lst).transpose(0, 3, 1, 2)))
                     .to(self.dtype) for lst in out)


def loss_for(model, batch, weights):
    """Training loss and a flat float breakdown for any supported model."""
    if isinstance(model, RecurrentDerainer):
        total, totals, parts = recurrent_loss(model, batch, weights)
        info = {f"iter{t}": v.item() for t, v in enumerate(totals)}
        for t, terms in enumerate(parts):
            info.update({f"iter{t}_{k}": v.item() for k, v in terms.items()})
        return total, info
    if isinstance(model, DehazeNet):
        total = dehaze_loss(model, batch)
        return total, {"mse": total.item()}
    O, B, S, R = batch
    total, terms = joint_loss(model(O), S, B, R, weights)
    return total, {k: v.item() for k, v in terms.items()}


def validation_psnr(model, examples):
    """Mean PSNR of the model's output against each example's training target."""
    scores = []
    model.eval()
    for ex in examples:
        if isinstance(model, DehazeNet):
            out, target = dehaze(ex.O, model), ex.B
        else:
            out, _ = derain_recurrent(ex.O, model)
            target, _, _ = derain_targets(ex)
        scores.append(psnr(np.clip(out, 0, 1), target))
    model.train()
    return float(np.mean(scores))


class Trainer:
    """Adam training with a JSONL log and checkpoints every ``checkpoint_every`` steps.

    Checkpoints go to ``out_dir/last.pt`` (and ``step_XXXXXX.pt``);
    ``best.pt`` tracks the highest validation PSNR when validation examples
    are given. ``resume()`` restores model, optimizer, sampler and step.
    """

    def __init__(self, model, sampler, weights=None, lr=1e-3, out_dir=None,
                 checkpoint_every=500, val_examples=None, config_hash=None):
        self.model = model
        self.sampler = sampler
        self.weights = weights or LossWeights()
        self.optimizer = make_optimizer(model.parameters(), lr)
        self.out_dir = Path(out_dir) if out_dir else None
        self.checkpoint_every = checkpoint_every
        self.val_examples = val_examples or []
        self.config_hash = config_hash
        self.step = 0
        self.best = -np.inf
        self.history = []
        self.last_checkpoint = None

    def train_step(self):
        batch = self.sampler()
        self.optimizer.zero_grad(set_to_none=True)
        try:
            total, info = loss_for(self.model, batch, self.weights)
            value = total.item()
            if not np.isfinite(value):
                raise TrainingDiverged(f"loss is {value}")
        except TrainingDiverged as err:
            raise TrainingDiverged(
                f"{err} at step {self.step}; resume from {self.last_checkpoint}") from err
        total.backward()
        self.optimizer.step()
        return value, info

    def run(self, steps):
        """Train until ``self.step == steps``; returns the list of logged records."""
        self.model.train()
        logfile = open(self.out_dir / "train_log.jsonl", "a") if self.out_dir else None
        try:
            while self.step < steps:
                t0 = time.perf_counter()
                loss, info = self.train_step()
                rec = {"step": self.step, "loss": loss, **info,
                       "seconds": time.perf_counter() - t0}
                self.history.append(rec)
                self.step += 1
                if logfile:
                    logfile.write(json.dumps(rec) + "\n")
                if self.step % 100 == 0:
                    log.info("step %d loss %.5f", self.step, loss)
                if self.out_dir and (self.step % self.checkpoint_every == 0 or self.step == steps):
                    self.checkpoint()
                    logfile.flush()
        finally:
            if logfile:
                logfile.close()
        self.model.eval()
        return self.history

    def checkpoint(self):
        extra = {"sampler_state": json.dumps(self.sampler.state()), "best": self.best}
        if self.val_examples:
            score = validation_psnr(self.model, self.val_examples)
            extra["val_psnr"] = score
            if score > self.best:
                self.best = extra["best"] = score
                save_checkpoint(self.out_dir / "best.pt", self.model, self.optimizer,
                                self.step, self.config_hash, extra)
        save_checkpoint(self.out_dir / f"step_{self.step:06d}.pt", self.model, self.optimizer,
                        self.step, self.config_hash, extra)
        self.last_checkpoint = save_checkpoint(self.out_dir / "last.pt", self.model,
                                               self.optimizer, self.step, self.config_hash, extra)

    def resume(self, path=None):
        path = Path(path) if path else self.out_dir / "last.pt"
        model, payload = load_checkpoint(path)
        self.model.load_state_dict(model.state_dict())
        if payload["optimizer"] is not None:
            self.optimizer.load_state_dict(payload["optimizer"])
        self.step = payload["step"]
        extra = payload["extra"]
        self.best = extra.get("best", -np.inf)
        if "sampler_state" in extra:
            self.sampler.set_state(json.loads(extra["sampler_state"]))
        self.last_checkpoint = path
        return self.step

