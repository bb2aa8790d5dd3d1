"""Frame discriminator and the three-term training objective.

The objective couples a pixel reconstruction term, a non-saturating
adversarial term, and a learned perceptual term measured in the
discriminator's own feature space:

    L = L_mse + gamma1 * L_gan(P) + gamma2 * L_lp

with, over predicted frames t = 2..T,

    L_mse    = sum_t mean((v_t - vhat_t)^2)
    L_gan(P) = -sum_t mean(log D(vhat_t))
    L_gan(D) = -sum_t mean(log D(v_t) + log(1 - D(vhat_t)))
    L_lp     = sum_t mean((F(v_t) - F(vhat_t))^2)

where F is the discriminator's last convolutional feature map. Sums run
over time, means over batch and elements; scores are clamped away from
{0, 1} before any log.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from .errors import NumericError, ValidationError

LOG_EPS = 1e-7


def derive_disc_depth(height, width, floor=4):
    """Stride-2 halvings until the short side reaches `floor` (at least one)."""
    side = min(height, width)
    if side < 2:
        raise ValidationError(f"frame side {side} too small to discriminate")
    depth = 0
    while side > floor:
        side = math.ceil(side / 2)
        depth += 1
    return max(depth, 1)


class Discriminator(nn.Module):
    """Stride-2 conv blocks with group normalization, then a sigmoid score head.

    Built for one frame resolution; the flatten size of the final linear layer
    pins it. `capture_features` returns every block's post-activation map, the
    last of which is the perceptual feature space.
    """

    def __init__(self, frame_channels, hidden, height, width, depth=None):
        super().__init__()
        if hidden % 4:
            raise ValidationError(f"discriminator width {hidden} not divisible by 4")
        if depth is None:
            depth = derive_disc_depth(height, width)
        h, w = height, width
        blocks = []
        in_ch = frame_channels
        for _ in range(depth):
            if min(h, w) < 2:
                raise ValidationError(
                    f"depth {depth} collapses a {height}x{width} frame below 1x1")
            blocks.append(nn.Sequential(
                nn.Conv2d(in_ch, hidden, 3, stride=2, padding=1, bias=False),
                nn.GroupNorm(4, hidden),
                nn.LeakyReLU(0.2),
            ))
            in_ch = hidden
            h, w = (h + 1) // 2, (w + 1) // 2
        self.blocks = nn.ModuleList(blocks)
        self.depth = depth
        self.in_shape = (frame_channels, height, width)
        self.feat_shape = (hidden, h, w)
        self.score = nn.Linear(hidden * h * w, 1)

    def forward(self, frame, capture_features=False):
        if frame.dim() != 4 or tuple(frame.shape[1:]) != self.in_shape:
            raise ValidationError(
                f"expected frames [B,{','.join(map(str, self.in_shape))}], "
                f"got {tuple(frame.shape)}")
        x = frame
        features = []
        for block in self.blocks:
            x = block(x)
            features.append(x)
        logit = self.score(x.flatten(1)).squeeze(1)
        if not torch.isfinite(logit).all():
            raise NumericError("non-finite discriminator logits")
        out = torch.sigmoid(logit)
        if capture_features:
            return out, features
        return out


def _frames(seq, name):
    if isinstance(seq, torch.Tensor):
        if seq.dim() != 5:
            raise ValidationError(
                f"{name}: expected [B,T,C,H,W] or a frame list, got {tuple(seq.shape)}")
        return list(seq.unbind(1))
    frames = list(seq)
    for f in frames:
        if f.dim() != 4:
            raise ValidationError(f"{name}: each frame must be [B,C,H,W]")
    return frames


def _paired(truth, pred):
    t, p = _frames(truth, "truth"), _frames(pred, "pred")
    if len(t) != len(p):
        raise ValidationError(f"got {len(t)} truth frames but {len(p)} predictions")
    for a, b in zip(t, p):
        if a.shape != b.shape:
            raise ValidationError(
                f"frame shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    return t, p


def mse_loss(truth, pred):
    """Sum over time of the per-frame mean squared error."""
    t, p = _paired(truth, pred)
    return sum(((a - b) ** 2).mean() for a, b in zip(t, p))


def _clamped_log(score):
    if not torch.isfinite(score).all():
        raise NumericError("non-finite discriminator score")
    return torch.log(score.clamp(LOG_EPS, 1.0 - LOG_EPS))


def gan_loss_predictor(pred, disc):
    """Non-saturating realism loss on the predictions, summed over time."""
    frames = _frames(pred, "pred")
    return -sum(_clamped_log(disc(f)).mean() for f in frames)


def gan_loss_discriminator(truth, pred, disc):
    """Binary cross-entropy on real vs predicted frames, summed over time."""
    t, p = _paired(truth, pred)
    loss = 0.0
    for real, fake in zip(t, p):
        loss = loss - (_clamped_log(disc(real)).mean()
                       + _clamped_log(1.0 - disc(fake)).mean())
    return loss


def feature_distance(truth_frame, pred_frame, disc):
    """Mean squared distance between last-layer discriminator features."""
    _, feats_t = disc(truth_frame, capture_features=True)
    _, feats_p = disc(pred_frame, capture_features=True)
    return ((feats_t[-1] - feats_p[-1]) ** 2).mean()


def lp_loss(truth, pred, disc):
    """Sum over time of the perceptual feature distance."""
    t, p = _paired(truth, pred)
    return sum(feature_distance(a, b, disc) for a, b in zip(t, p))


@dataclass
class LossBundle:
    """Realized loss terms of one step; total follows the composite objective."""

    mse: object
    gan_P: object
    gan_D: object
    lp: object
    total: object
    gamma1: float
    gamma2: float

    def floats(self):
        def item(x):
            return float(x.detach()) if isinstance(x, torch.Tensor) else float(x)
        return LossBundle(item(self.mse), item(self.gan_P), item(self.gan_D),
                          item(self.lp), item(self.total),
                          float(self.gamma1), float(self.gamma2))


def total_loss(mse, gan_P, lp, gamma1, gamma2, gan_D=0.0):
    """Compose the predictor objective; weights gate the adversarial terms."""
    if gamma1 < 0 or gamma2 < 0:
        raise ValidationError(
            f"loss weights must be >= 0, got gamma1={gamma1} gamma2={gamma2}")
    total = mse + gamma1 * gan_P + gamma2 * lp
    return LossBundle(mse, gan_P, gan_D, lp, total, gamma1, gamma2)
