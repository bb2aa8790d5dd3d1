"""Objective quality metrics and the evaluation protocol.

PSNR and SSIM are computed in float64 on clamped predictions. SSIM uses the
standard construction: channel-mean grayscale, 11x11 Gaussian window with
sigma 1.5, stability constants (0.01*max)^2 and (0.03*max)^2. feat_dist is
the mean squared distance between last-layer discriminator features, a
learned-feature proxy that is only meaningful relative to one discriminator.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from numpy.lib.stride_tricks import sliding_window_view

from .adversarial import feature_distance
from .data import read_frames
from .errors import ValidationError
from .trainer import rollout

CSV_COLUMNS = ("sequence_id", "t", "mse", "psnr", "ssim", "feat_dist")


def psnr_from_mse(mse, max_val=1.0):
    if mse < 0:
        raise ValidationError(f"mse must be >= 0, got {mse}")
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(max_val * max_val / mse)


def psnr(truth, pred, max_val=1.0):
    """Peak signal-to-noise ratio in dB; predictions clamped to [0, max_val]."""
    t = np.asarray(truth, dtype=np.float64)
    p = np.asarray(pred, dtype=np.float64)
    if t.shape != p.shape:
        raise ValidationError(f"shape mismatch: {t.shape} vs {p.shape}")
    p = np.clip(p, 0.0, max_val)
    return psnr_from_mse(float(np.mean((t - p) ** 2)), max_val)


def gaussian_window(size=11, sigma=1.5):
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(ax ** 2) / (2.0 * sigma ** 2))
    k = np.outer(g, g)
    return k / k.sum()


def _gray(frame, name):
    arr = np.asarray(frame, dtype=np.float64)
    if arr.ndim == 3:
        return arr.mean(axis=0)
    if arr.ndim == 2:
        return arr
    raise ValidationError(f"{name}: expected [C,H,W] or [H,W], got {arr.shape}")


def ssim(truth, pred, max_val=1.0, window_size=11, sigma=1.5):
    """Mean local structural similarity over all full windows."""
    x = _gray(truth, "truth")
    y = _gray(pred, "pred")
    if x.shape != y.shape:
        raise ValidationError(f"shape mismatch: {x.shape} vs {y.shape}")
    if min(x.shape) < window_size:
        raise ValidationError(
            f"frame {x.shape} smaller than the {window_size}x{window_size} window")
    win = gaussian_window(window_size, sigma)
    wx = sliding_window_view(x, (window_size, window_size))
    wy = sliding_window_view(y, (window_size, window_size))
    mu_x = np.einsum("ijkl,kl->ij", wx, win)
    mu_y = np.einsum("ijkl,kl->ij", wy, win)
    # second moments first, then subtract; keeps x == y bit-identical paths
    var_x = np.einsum("ijkl,kl->ij", wx * wx, win) - mu_x * mu_x
    var_y = np.einsum("ijkl,kl->ij", wy * wy, win) - mu_y * mu_y
    cov = np.einsum("ijkl,kl->ij", wx * wy, win) - mu_x * mu_y
    c1 = (0.01 * max_val) ** 2
    c2 = (0.03 * max_val) ** 2
    score = ((2.0 * (mu_x * mu_y) + c1) * (2.0 * cov + c2)) / \
            ((mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2))
    return float(score.mean())


@dataclass
class MetricRow:
    sequence_id: str
    t: int
    mse: float
    psnr: float
    ssim: float
    feat_dist: float


@dataclass
class MetricsReport:
    """Per-(sequence, t) metric rows plus aggregate views."""

    rows: list[MetricRow] = field(default_factory=list)

    def per_t(self):
        """Mean of each metric grouped by predicted frame index."""
        grouped = {}
        for row in self.rows:
            grouped.setdefault(row.t, []).append(row)
        out = {}
        for t in sorted(grouped):
            rows = grouped[t]
            out[t] = {
                "mse": float(np.mean([r.mse for r in rows])),
                "psnr": float(np.mean([r.psnr for r in rows])),
                "ssim": float(np.mean([r.ssim for r in rows])),
                "feat_dist": float(np.mean([r.feat_dist for r in rows])),
            }
        return out

    def overall(self):
        if not self.rows:
            return {"mse": math.nan, "psnr": math.nan,
                    "ssim": math.nan, "feat_dist": math.nan}
        return {
            "mse": float(np.mean([r.mse for r in self.rows])),
            "psnr": float(np.mean([r.psnr for r in self.rows])),
            "ssim": float(np.mean([r.ssim for r in self.rows])),
            "feat_dist": float(np.mean([r.feat_dist for r in self.rows])),
        }

    def save_csv(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as fh:
            fh.write(",".join(CSV_COLUMNS) + "\n")
            for r in self.rows:
                fh.write(f"{r.sequence_id},{r.t},{r.mse:.8g},{r.psnr:.8g},"
                         f"{r.ssim:.8g},{r.feat_dist:.8g}\n")
        return path


def evaluate(model, manifest, input_horizon, horizon, disc=None, clamp=True):
    """Roll out every manifest sequence and score each predicted frame.

    Context is the first input_horizon frames; rows carry the absolute
    1-based frame index t = input_horizon+1 .. input_horizon+horizon.
    feat_dist is NaN unless a discriminator is given.
    """
    if horizon < 1:
        raise ValidationError(f"horizon must be >= 1, got {horizon}")
    rows = []
    for entry in manifest.entries:
        frames = read_frames(manifest.sequence_path(entry))
        needed = input_horizon + horizon
        if frames.shape[0] < needed:
            raise ValidationError(
                f"{entry.sequence_id} has {frames.shape[0]} frames, "
                f"evaluation needs {needed}")
        context = torch.from_numpy(frames[:input_horizon]).unsqueeze(0)
        preds = rollout(model, context, horizon)[0]
        if clamp:
            preds = preds.clamp(0.0, 1.0)
        for i in range(horizon):
            truth_f = frames[input_horizon + i].astype(np.float64)
            pred_f = preds[i].numpy().astype(np.float64)
            mse_v = float(np.mean((truth_f - pred_f) ** 2))
            feat = math.nan
            if disc is not None:
                with torch.no_grad():
                    feat = float(feature_distance(
                        torch.from_numpy(frames[input_horizon + i]).unsqueeze(0),
                        preds[i].unsqueeze(0), disc))
            rows.append(MetricRow(entry.sequence_id, input_horizon + i + 1,
                                  mse_v, psnr_from_mse(mse_v),
                                  ssim(truth_f, pred_f), feat))
    return MetricsReport(rows)
