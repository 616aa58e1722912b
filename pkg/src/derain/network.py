"""Joint rain detection and removal network.

A contextualized dilated extractor turns the rain image into features ``F``.
Each refinement round adds the outputs of three parallel paths, each two
3x3 convolutions with dilation 1, 2 and 3, to the round's input. Three heads
then predict, by default in this order:

1. detection logits from two convolutions on ``F`` (softmax gives the mask),
2. the streak layer from one convolution on ``[F, R]``,
3. the background from one convolution on ``[F, R, S, O - R * S]``.
"""

import math
from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

HEAD_ORDERINGS = ("R_S_B", "S_R_B", "parallel")


class TrainingDiverged(FloatingPointError):
    """Loss or inputs became NaN/Inf during training."""


@dataclass
class NetworkConfig:
    feature_channels: int = 16
    intra_recurrences: int = 2
    dilation_factors: tuple = (1, 2, 3)
    kernel_size: int = 3
    head_ordering: str = "R_S_B"
    input_channels: int = 3

    def __post_init__(self):
        self.dilation_factors = tuple(int(d) for d in self.dilation_factors)
        if self.head_ordering not in HEAD_ORDERINGS:
            raise ValueError(f"head_ordering must be one of {HEAD_ORDERINGS}")
        if self.kernel_size % 2 != 1:
            raise ValueError("kernel_size must be odd")
        if self.intra_recurrences < 0 or self.feature_channels < 1:
            raise ValueError("invalid intra_recurrences or feature_channels")
        if not self.dilation_factors or min(self.dilation_factors) < 1:
            raise ValueError("dilation_factors must be positive")

    def path_receptive_fields(self):
        """Side length of the receptive field of each two-convolution path."""
        return [1 + 2 * (self.kernel_size - 1) * d for d in self.dilation_factors]

    def extractor_radius(self):
        """How far (in pixels) one input pixel can influence the features."""
        k = self.kernel_size // 2
        return k + self.intra_recurrences * 2 * k * max(self.dilation_factors)

    def to_dict(self):
        d = asdict(self)
        d["dilation_factors"] = list(self.dilation_factors)
        return d


@dataclass
class LossWeights:
    """Weights of the background term and of the detection term."""

    lambda1: float = 1.0
    lambda2: float = 0.1

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("loss weights must be nonnegative")


class Prediction(NamedTuple):
    logits: torch.Tensor      # N x 2 x H x W
    mask_prob: torch.Tensor   # N x 1 x H x W, softmax channel 1
    streak: torch.Tensor      # N x 1 x H x W
    background: torch.Tensor  # N x C x H x W


def conv(cin, cout, kernel_size=3, dilation=1):
    return nn.Conv2d(cin, cout, kernel_size, padding=dilation * (kernel_size // 2),
                     dilation=dilation)


class DilatedPath(nn.Module):
    def __init__(self, channels, dilation, kernel_size=3):
        super().__init__()
        self.dilation = dilation
        self.conv1 = conv(channels, channels, kernel_size, dilation)
        self.conv2 = conv(channels, channels, kernel_size, dilation)

    def forward(self, x):
        return F.relu(self.conv2(F.relu(self.conv1(x))))


class ContextualizedDilatedNet(nn.Module):
    """Input transform followed by ``intra_recurrences`` refinement rounds."""

    def __init__(self, cfg):
        super().__init__()
        c, k = cfg.feature_channels, cfg.kernel_size
        self.cfg = cfg
        self.head = conv(cfg.input_channels, c, k)
        self.rounds = nn.ModuleList(
            nn.ModuleList(DilatedPath(c, d, k) for d in cfg.dilation_factors)
            for _ in range(cfg.intra_recurrences))

    def forward(self, x):
        feats = F.relu(self.head(x))
        for paths in self.rounds:
            feats = feats + sum(path(feats) for path in paths)
        return feats


def _identity_init(layer, first_channel, n):
    """Make output ``i`` copy input ``first_channel + i`` at the centre tap."""
    with torch.no_grad():
        layer.weight.mul_(0.1)
        layer.bias.zero_()
        c = layer.kernel_size[0] // 2
        for i in range(n):
            layer.weight[i, first_channel + i, c, c] += 1.0


class JointDerainNet(nn.Module):
    """Feature extractor plus mask, streak and background heads."""

    def __init__(self, cfg=None):
        super().__init__()
        cfg = cfg or NetworkConfig()
        self.cfg = cfg
        c, k, ch = cfg.feature_channels, cfg.kernel_size, cfg.input_channels
        self.extractor = ContextualizedDilatedNet(cfg)
        order = cfg.head_ordering
        self.detect1 = conv(c + (1 if order == "S_R_B" else 0), c, k)
        self.detect2 = conv(c, 2, k)
        self.streak_head = conv(c + (1 if order == "R_S_B" else 0), 1, k)
        if order == "parallel":
            self.background_head = conv(c + ch, ch, k)
            _identity_init(self.background_head, c, ch)
        else:
            self.background_head = conv(c + 2 + ch, ch, k)
            _identity_init(self.background_head, c + 2, ch)

    def _detect(self, x):
        logits = self.detect2(F.relu(self.detect1(x)))
        return logits, torch.softmax(logits, dim=1)[:, 1:2]

    def forward(self, O):
        feats = self.extractor(O)
        order = self.cfg.head_ordering
        if order == "R_S_B":
            logits, prob = self._detect(feats)
            streak = self.streak_head(torch.cat([feats, prob], 1))
        elif order == "S_R_B":
            streak = self.streak_head(feats)
            logits, prob = self._detect(torch.cat([feats, streak], 1))
        else:
            logits, prob = self._detect(feats)
            streak = self.streak_head(feats)
            background = self.background_head(torch.cat([feats, O], 1))
            return Prediction(logits, prob, streak, background)
        background = self.background_head(
            torch.cat([feats, prob, streak, O - prob * streak], 1))
        return Prediction(logits, prob, streak, background)


def to_tensor(img, dtype=torch.float32):
    """H x W x C numpy image (or N x H x W x C batch) to N x C x H x W."""
    a = np.asarray(img)
    if a.ndim == 2:
        a = a[..., None]
    if a.ndim == 3:
        a = a[None]
    return torch.from_numpy(np.ascontiguousarray(a.transpose(0, 3, 1, 2))).to(dtype)


def to_image(t):
    """Inverse of :func:`to_tensor` for a single image; drops a lone channel."""
    a = t.detach().cpu().double().numpy()[0].transpose(1, 2, 0)
    return a[..., 0] if a.shape[2] == 1 else a


def forward(O, net):
    """Run ``net`` on one H x W x C image; returns numpy arrays."""
    dtype = next(net.parameters()).dtype
    with torch.no_grad():
        pred = net(to_tensor(O, dtype))
    return {
        "logits": to_image(pred.logits),
        "mask_prob": to_image(pred.mask_prob),
        "streak": to_image(pred.streak),
        "background": to_image(pred.background),
    }


def extract_features(O, net):
    dtype = next(net.parameters()).dtype
    with torch.no_grad():
        return to_image(net.extractor(to_tensor(O, dtype)))


def _check_finite(**tensors):
    for name, t in tensors.items():
        if not torch.isfinite(t).all():
            raise TrainingDiverged(f"non-finite values in {name}")


def joint_loss(pred, streak, background, mask, weights=None):
    """Streak MSE + lambda1 * background MSE + lambda2 * detection cross-entropy.

    All terms are per-pixel means. ``mask`` holds 0/1 labels (N x 1 x H x W or
    N x H x W). Returns ``(total, {"streak", "background", "detection"})`` with
    unweighted terms in the breakdown.
    """
    weights = weights or LossWeights()
    _check_finite(logits=pred.logits, streak_pred=pred.streak, background_pred=pred.background,
                  streak=streak, background=background)
    if mask.dim() == 4:
        mask = mask[:, 0]
    if pred.streak.shape != streak.shape or pred.background.shape != background.shape:
        raise ValueError("prediction and target shapes differ")
    terms = {
        "streak": F.mse_loss(pred.streak, streak),
        "background": F.mse_loss(pred.background, background),
        "detection": F.cross_entropy(pred.logits, mask.long()),
    }
    total = (terms["streak"] + weights.lambda1 * terms["background"]
             + weights.lambda2 * terms["detection"])
    return total, terms


def train_step(net, optimizer, batch, weights=None, checkpoint=None):
    """One gradient step on ``batch = (O, B, S, R)`` tensors.

    Returns the pre-update loss and its breakdown as floats. Raises
    :class:`TrainingDiverged` (mentioning ``checkpoint``) on a non-finite loss.
    """
    O, B, S, R = batch
    optimizer.zero_grad(set_to_none=True)
    try:
        total, terms = joint_loss(net(O), S, B, R, weights)
        if not math.isfinite(total.item()):
            raise TrainingDiverged(f"loss is {total.item()}")
    except TrainingDiverged as err:
        raise TrainingDiverged(f"{err}; last good checkpoint: {checkpoint}") from err
    total.backward()
    optimizer.step()
    return total.item(), {k: v.item() for k, v in terms.items()}


def make_optimizer(params, lr=1e-3):
    return torch.optim.Adam(params, lr=lr)
