"""Training loop, autoregressive rollout, and checkpoint plumbing.

A training step unrolls the model over a window of frames with teacher
forcing: the clip fed at step t always contains ground-truth frames (the
first clips replicate the left edge). The discriminator updates first on
detached predictions, then the predictor updates on the composite objective
with discriminator weights frozen. Temporal states restart from zero for
every window.

Rollout replays the context clips to warm the states, then continues
autoregressively, feeding predicted frames back in once ground truth runs
out.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .adversarial import (Discriminator, gan_loss_discriminator,
                          gan_loss_predictor, lp_loss, mse_loss, total_loss)
from .autoencoder import Predictor
from .config import ModelConfig, TrainConfig
from .data import DatasetManifest, read_frames
from .errors import FormatError, NumericError, ValidationError

CHECKPOINT_VERSION = 1
METRIC_COLUMNS = ("step", "mse", "gan_P", "gan_D", "lp", "total")


class SequenceDataset:
    """All windows of a fixed length over the sequences of a manifest.

    Sequences load eagerly (desk scale); windows of `window` frames are
    enumerated per sequence at the given stride. Sequences shorter than the
    window contribute nothing.
    """

    def __init__(self, manifest: DatasetManifest, window, stride=1):
        if window < 2:
            raise ValidationError(f"window must be >= 2 frames, got {window}")
        if stride < 1:
            raise ValidationError(f"stride must be >= 1, got {stride}")
        self.window = window
        self.sequences = []
        self.ids = []
        self.index = []
        for entry in manifest.entries:
            frames = read_frames(manifest.sequence_path(entry))
            seq_pos = len(self.sequences)
            self.sequences.append(frames)
            self.ids.append(entry.sequence_id)
            for start in range(0, frames.shape[0] - window + 1, stride):
                self.index.append((seq_pos, start))
        if not self.index:
            raise ValidationError(
                f"no sequence in the manifest is {window} frames long")

    def __len__(self):
        return len(self.index)

    def window_at(self, i):
        seq_pos, start = self.index[i]
        return self.sequences[seq_pos][start:start + self.window]

    def batch(self, indices):
        stacked = np.stack([self.window_at(int(i)) for i in indices])
        return torch.from_numpy(stacked)


def clip_at(frames, t, length):
    """Clip ending at 1-based step t from [B, T, C, H, W], left edge replicated."""
    idx = [max(j, 1) - 1 for j in range(t - length + 1, t + 1)]
    return frames[:, idx]


class Trainer:
    """Owns the two optimizers and the batch-sampling stream."""

    def __init__(self, model: Predictor, config: TrainConfig, disc=None):
        if (config.gamma1 > 0 or config.gamma2 > 0) and disc is None:
            raise ValidationError(
                "adversarial weights are nonzero but no discriminator was given")
        self.model = model
        self.disc = disc
        self.config = config
        self.opt_predictor = torch.optim.Adam(model.parameters(),
                                              lr=config.lr_predictor,
                                              betas=(0.9, 0.999))
        self.opt_discriminator = None
        if disc is not None:
            self.opt_discriminator = torch.optim.Adam(disc.parameters(),
                                                      lr=config.lr_discriminator,
                                                      betas=(0.9, 0.999))
        self.rng = np.random.default_rng(config.seed)
        self.step = 0

    def _unroll(self, batch):
        """Teacher-forced predictions over the window; returns (truth, preds)."""
        cfg = self.config
        length = self.model.config.clip_length
        b, t_total = batch.shape[0], batch.shape[1]
        states = self.model.init_states(b, batch.shape[-2], batch.shape[-1],
                                        device=batch.device, dtype=batch.dtype)
        preds = []
        for t in range(1, t_total):
            frame, states = self.model(clip_at(batch, t, length), states)
            preds.append(frame)
        truth = [batch[:, t] for t in range(1, t_total)]
        if cfg.supervise == "tail":
            keep = cfg.predict_horizon_train
            truth, preds = truth[-keep:], preds[-keep:]
        return truth, preds

    def train_step(self, batch):
        cfg = self.config
        required = cfg.input_horizon + cfg.predict_horizon_train
        if batch.dim() != 5:
            raise ValidationError(
                f"expected a [B,T,C,H,W] batch, got {tuple(batch.shape)}")
        if batch.shape[1] < required:
            raise ValidationError(
                f"window of {batch.shape[1]} frames is shorter than "
                f"input+predict horizon {required}")

        truth, preds = self._unroll(batch)
        adversarial = cfg.gamma1 > 0 or cfg.gamma2 > 0

        gan_d = torch.zeros((), dtype=batch.dtype)
        if adversarial:
            self.opt_discriminator.zero_grad()
            gan_d = gan_loss_discriminator(truth, [p.detach() for p in preds],
                                           self.disc)
            gan_d.backward()
            if cfg.grad_clip:
                nn.utils.clip_grad_norm_(self.disc.parameters(), cfg.grad_clip)
            self.opt_discriminator.step()

        mse = mse_loss(truth, preds)
        if adversarial:
            for p in self.disc.parameters():
                p.requires_grad_(False)
            gan_p = gan_loss_predictor(preds, self.disc)
            lp = lp_loss(truth, preds, self.disc)
        else:
            gan_p = torch.zeros((), dtype=batch.dtype)
            lp = torch.zeros((), dtype=batch.dtype)

        bundle = total_loss(mse, gan_p, lp, cfg.gamma1, cfg.gamma2, gan_D=gan_d)
        if not torch.isfinite(bundle.total):
            raise NumericError(
                f"non-finite loss at step {self.step + 1}: mse={float(mse)} "
                f"gan_P={float(gan_p)} lp={float(lp)}")

        self.opt_predictor.zero_grad()
        bundle.total.backward()
        if cfg.grad_clip:
            nn.utils.clip_grad_norm_(self.model.parameters(), cfg.grad_clip)
        self.opt_predictor.step()
        if adversarial:
            for p in self.disc.parameters():
                p.requires_grad_(True)

        self.step += 1
        return bundle.floats()

    def sample_batch(self, dataset):
        indices = self.rng.integers(0, len(dataset), size=self.config.batch_size)
        return dataset.batch(indices)

    def fit(self, dataset, run_dir=None, callback=None):
        """Run config.steps training steps; returns the list of loss bundles.

        With a run directory, per-step losses stream to metrics.csv and
        checkpoints land under checkpoints/ at the configured cadence. An
        optional callback(step, bundle) returning True stops early.
        """
        cfg = self.config
        metrics_file = None
        if run_dir is not None:
            run_dir = Path(run_dir)
            run_dir.mkdir(parents=True, exist_ok=True)
            metrics_file = open(run_dir / "metrics.csv", "w")
            metrics_file.write(",".join(METRIC_COLUMNS) + "\n")
        history = []
        try:
            for _ in range(cfg.steps):
                bundle = self.train_step(self.sample_batch(dataset))
                history.append(bundle)
                if metrics_file is not None:
                    row = (self.step, bundle.mse, bundle.gan_P, bundle.gan_D,
                           bundle.lp, bundle.total)
                    metrics_file.write(",".join(f"{v:.8g}" if isinstance(v, float)
                                                else str(v) for v in row) + "\n")
                    metrics_file.flush()
                if run_dir is not None and cfg.checkpoint_every and \
                        self.step % cfg.checkpoint_every == 0:
                    self.checkpoint(run_dir / "checkpoints" / f"step_{self.step}.ckpt")
                if callback is not None and callback(self.step, bundle):
                    break
            if run_dir is not None and self.step:
                self.checkpoint(run_dir / "checkpoints" / f"step_{self.step}.ckpt")
        finally:
            if metrics_file is not None:
                metrics_file.close()
        return history

    def checkpoint(self, path):
        save_checkpoint(path, model=self.model, train_config=self.config,
                        step=self.step, disc=self.disc,
                        opt_predictor=self.opt_predictor,
                        opt_discriminator=self.opt_discriminator,
                        rng_state=self.rng.bit_generator.state)


def rollout(model, context, horizon):
    """Predict `horizon` frames after an [B, N, C, H, W] context, no gradients."""
    if horizon < 1:
        raise ValidationError(f"rollout horizon must be >= 1, got {horizon}")
    if context.dim() != 5:
        raise ValidationError(
            f"expected [B,N,C,H,W] context, got {tuple(context.shape)}")
    length = model.config.clip_length
    n = context.shape[1]
    if n < 1:
        raise ValidationError("rollout needs at least one context frame")
    with torch.no_grad():
        states = model.init_states(context.shape[0], context.shape[-2],
                                   context.shape[-1], device=context.device,
                                   dtype=context.dtype)
        frames = list(context.unbind(1))
        preds = []
        for t in range(1, n + horizon):
            buffer = torch.stack(frames, dim=1)
            pred, states = model(clip_at(buffer, t, length), states)
            if t >= n:
                preds.append(pred)
                frames.append(pred)
    return torch.stack(preds, dim=1)


@dataclass
class Checkpoint:
    """Parsed checkpoint payload."""

    step: int
    model_config: ModelConfig
    train_config: TrainConfig
    model_state: dict
    disc_state: dict | None
    disc_arch: dict | None
    opt_predictor_state: dict | None
    opt_discriminator_state: dict | None
    rng_state: object | None


def save_checkpoint(path, *, model, train_config, step, disc=None,
                    opt_predictor=None, opt_discriminator=None, rng_state=None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    disc_arch = None
    if disc is not None:
        disc_arch = {
            "frame_channels": disc.in_shape[0],
            "hidden": disc.feat_shape[0],
            "height": disc.in_shape[1],
            "width": disc.in_shape[2],
            "depth": disc.depth,
        }
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "step": int(step),
        "model_config": asdict(model.config),
        "train_config": asdict(train_config),
        "model_state": model.state_dict(),
        "disc_state": disc.state_dict() if disc is not None else None,
        "disc_arch": disc_arch,
        "opt_predictor_state":
            opt_predictor.state_dict() if opt_predictor is not None else None,
        "opt_discriminator_state":
            opt_discriminator.state_dict() if opt_discriminator is not None else None,
        "rng_state": rng_state,
    }
    torch.save(payload, path)
    return path


def load_checkpoint(path):
    path = Path(path)
    if not path.is_file():
        raise FormatError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as e:
        raise FormatError(f"unreadable checkpoint {path}: {e}") from e
    if not isinstance(payload, dict) or "format_version" not in payload:
        raise FormatError(f"{path} is not a checkpoint payload")
    if payload["format_version"] != CHECKPOINT_VERSION:
        raise FormatError(
            f"checkpoint version {payload['format_version']} unsupported "
            f"(expected {CHECKPOINT_VERSION})")
    required = ("step", "model_config", "train_config", "model_state")
    missing = [k for k in required if k not in payload]
    if missing:
        raise FormatError(f"checkpoint missing fields: {missing}")
    try:
        model_config = ModelConfig(**payload["model_config"])
        train_config = TrainConfig(**payload["train_config"])
    except (TypeError, ValidationError) as e:
        raise FormatError(f"checkpoint config invalid: {e}") from e
    return Checkpoint(
        step=payload["step"],
        model_config=model_config,
        train_config=train_config,
        model_state=payload["model_state"],
        disc_state=payload.get("disc_state"),
        disc_arch=payload.get("disc_arch"),
        opt_predictor_state=payload.get("opt_predictor_state"),
        opt_discriminator_state=payload.get("opt_discriminator_state"),
        rng_state=payload.get("rng_state"),
    )


def build_from_checkpoint(ckpt: Checkpoint):
    """Reconstruct (model, disc-or-None) and load their weights."""
    model = Predictor(ckpt.model_config)
    try:
        model.load_state_dict(ckpt.model_state)
    except RuntimeError as e:
        raise ValidationError(f"model state does not fit its config: {e}") from e
    disc = None
    if ckpt.disc_state is not None:
        if ckpt.disc_arch is None:
            raise FormatError("checkpoint has discriminator weights but no shape info")
        disc = Discriminator(**ckpt.disc_arch)
        try:
            disc.load_state_dict(ckpt.disc_state)
        except RuntimeError as e:
            raise ValidationError(f"discriminator state does not fit: {e}") from e
    return model, disc
