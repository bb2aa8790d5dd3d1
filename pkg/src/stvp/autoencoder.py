"""Frame prediction pipeline: dual clip encoders, recurrent core, recall decoders.

One prediction step takes the clip v_{t-L+1:t}, runs it through two
independent encoders (one feeding the temporal side of the recurrent stack,
one the spatial side), advances the stacked cells, then decodes the top-layer
pair back to full resolution. Each decoder layer recalls the matching encoder
layer's activation, scaled by a small weight, before upsampling:

    D^l = Dec^l(D^{l-1} + lambda * E^{-l})

so coarse-to-fine detail lost in the bottleneck can re-enter on the way up.
The two decoded maps are fused by a 1x1 convolution and a pixel shuffle
restores the patch folding applied on the way in.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .config import ModelConfig
from .data import ClipWindow, pixel_shuffle, pixel_unshuffle
from .errors import NumericError, ValidationError
from .stgru import STGRUStack


@dataclass
class FeatureStack:
    """Per-layer encoder activations, finest first, coarsest last."""

    layers: list[torch.Tensor] = field(default_factory=list)

    @property
    def bottleneck(self):
        return self.layers[-1]

    def __len__(self):
        return len(self.layers)


@dataclass
class StepTrace:
    """Intermediate tensors of one prediction step, for tests and inspection."""

    enc_temporal: FeatureStack
    enc_spatial: FeatureStack
    top_temporal: torch.Tensor
    top_spatial: torch.Tensor
    dec_temporal: torch.Tensor
    dec_spatial: torch.Tensor


def fold_clip(clip, patch):
    """[B, L, C, H, W] -> [B, C*p^2, L, H/p, W/p] via per-frame space-to-depth."""
    if clip.dim() != 5:
        raise ValidationError(f"expected a [B,L,C,H,W] clip, got {tuple(clip.shape)}")
    b, length, c, h, w = clip.shape
    flat = pixel_unshuffle(clip.reshape(b * length, c, h, w), patch)
    folded = flat.reshape(b, length, *flat.shape[1:])
    return folded.permute(0, 2, 1, 3, 4).contiguous()


class ClipEncoder(nn.Module):
    """Stride-2 convolutional encoder over a folded clip.

    The first layer is a 3-D convolution spanning the whole clip axis (no
    padding there), which collapses the L frames into one map; the remaining
    depth-1 layers are plain stride-2 convolutions. Post-activation outputs
    of every layer are kept for decoder recall.
    """

    def __init__(self, in_channels, hidden, depth, clip_length=2):
        super().__init__()
        if depth < 1:
            raise ValidationError(f"encoder depth must be >= 1, got {depth}")
        self.depth = depth
        self.clip_length = clip_length
        self.entry = nn.Conv3d(in_channels, hidden, (clip_length, 3, 3),
                               stride=(1, 2, 2), padding=(0, 1, 1))
        self.down = nn.ModuleList(
            nn.Conv2d(hidden, hidden, 3, stride=2, padding=1)
            for _ in range(depth - 1))
        self.act = nn.LeakyReLU(0.2)

    def forward(self, folded):
        if folded.dim() != 5:
            raise ValidationError(
                f"expected folded clip [B,C,L,H,W], got {tuple(folded.shape)}")
        if folded.shape[2] != self.clip_length:
            raise ValidationError(
                f"clip axis {folded.shape[2]} != configured length {self.clip_length}")
        h, w = folded.shape[-2:]
        scale = 2 ** self.depth
        if h % scale or w % scale:
            raise ValidationError(
                f"encoder input {h}x{w} not divisible by 2^{self.depth}")
        x = self.act(self.entry(folded)).squeeze(2)
        stack = FeatureStack([x])
        for conv in self.down:
            x = self.act(conv(x))
            stack.layers.append(x)
        return stack


class RecallDecoder(nn.Module):
    """Transposed-convolution decoder that re-adds encoder activations.

    Layer l upsamples dec_input + weight * enc_layers[-l]; with weight 0 the
    recall paths are inert and the decoder sees only the bottleneck.
    """

    def __init__(self, hidden, depth):
        super().__init__()
        self.depth = depth
        self.up = nn.ModuleList(
            nn.ConvTranspose2d(hidden, hidden, 3, stride=2,
                               padding=1, output_padding=1)
            for _ in range(depth))
        self.act = nn.LeakyReLU(0.2)

    def forward(self, x, enc_stack, recall_weight):
        if len(enc_stack) != self.depth:
            raise ValidationError(
                f"stack has {len(enc_stack)} layers, decoder expects {self.depth}")
        if recall_weight < 0:
            raise ValidationError(f"recall weight must be >= 0, got {recall_weight}")
        for l, deconv in enumerate(self.up, start=1):
            recalled = enc_stack.layers[self.depth - l]
            if recalled.shape != x.shape:
                raise ValidationError(
                    f"decoder layer {l} input {tuple(x.shape)} does not match "
                    f"recalled encoder activation {tuple(recalled.shape)}")
            x = self.act(deconv(x + recall_weight * recalled))
        return x


class FusionHead(nn.Module):
    """1x1 fusion of the two decoded maps, then depth-to-space to full resolution.

    No output activation: predictions stay unbounded during training and are
    clamped to [0,1] only for metrics and export.
    """

    def __init__(self, hidden, frame_channels, patch):
        super().__init__()
        self.patch = patch
        self.proj = nn.Conv2d(2 * hidden, frame_channels * patch ** 2, 1, bias=True)

    def forward(self, dec_temporal, dec_spatial):
        if dec_temporal.shape != dec_spatial.shape:
            raise ValidationError(
                f"fusion inputs differ: {tuple(dec_temporal.shape)} vs "
                f"{tuple(dec_spatial.shape)}")
        y = self.proj(torch.cat([dec_temporal, dec_spatial], dim=1))
        return pixel_shuffle(y, self.patch)


class Predictor(nn.Module):
    """Full next-frame model: encode twice, recur, decode twice, fuse."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        in_channels = config.frame_channels * config.patch ** 2
        self.enc_temporal = ClipEncoder(in_channels, config.hidden,
                                        config.enc_depth, config.clip_length)
        self.enc_spatial = ClipEncoder(in_channels, config.hidden,
                                       config.enc_depth, config.clip_length)
        self.stack = STGRUStack(config.layers, config.hidden, config.kernel_hidden,
                                bias=config.cell_bias, norm=config.cell_norm,
                                norm_affine=config.cell_norm_affine)
        self.dec_temporal = RecallDecoder(config.hidden, config.enc_depth)
        self.dec_spatial = RecallDecoder(config.hidden, config.enc_depth)
        self.head = FusionHead(config.hidden, config.frame_channels, config.patch)

    def feature_size(self, height, width):
        scale = self.config.downscale
        if height % scale or width % scale:
            raise ValidationError(
                f"frame {height}x{width} not divisible by patch*2^depth = {scale}")
        return height // scale, width // scale

    def init_states(self, batch, height, width, device=None, dtype=None):
        h_f, w_f = self.feature_size(height, width)
        return self.stack.init_states(batch, h_f, w_f, device=device, dtype=dtype)

    def forward(self, clip, states, capture=False, force_update=None,
                force_trend=None):
        cfg = self.config
        if clip.dim() != 5:
            raise ValidationError(f"expected [B,L,C,H,W] clip, got {tuple(clip.shape)}")
        if clip.shape[1] != cfg.clip_length:
            raise ValidationError(
                f"clip length {clip.shape[1]} != configured {cfg.clip_length}")
        if clip.shape[2] != cfg.frame_channels:
            raise ValidationError(
                f"clip channels {clip.shape[2]} != configured {cfg.frame_channels}")
        if not torch.isfinite(clip).all():
            raise NumericError("non-finite values in input clip")

        folded = fold_clip(clip, cfg.patch)
        stack_t = self.enc_temporal(folded)
        stack_s = self.enc_spatial(folded)
        new_states, top = self.stack(states, stack_t.bottleneck, stack_s.bottleneck,
                                     force_update=force_update,
                                     force_trend=force_trend)
        dec_t = self.dec_temporal(top.T, stack_t, cfg.recall_weight)
        dec_s = self.dec_spatial(top.S, stack_s, cfg.recall_weight)
        frame = self.head(dec_t, dec_s)

        if capture:
            trace = StepTrace(stack_t, stack_s, top.T, top.S, dec_t, dec_s)
            return frame, new_states, trace
        return frame, new_states


def predict_next_frame(model, clip, states=None):
    """One prediction step from a clip; accepts ClipWindow, array, or tensor.

    Unbatched [L,C,H,W] inputs get a singleton batch axis. Fresh zero states
    are created when none are passed. Returns (frame, new_states) with the
    frame matching the input batching.
    """
    if isinstance(clip, ClipWindow):
        clip = clip.clip
    if isinstance(clip, np.ndarray):
        clip = torch.from_numpy(clip)
    p = next(model.parameters())
    clip = clip.to(device=p.device, dtype=p.dtype)
    squeeze = clip.dim() == 4
    if squeeze:
        clip = clip.unsqueeze(0)
    if states is None:
        states = model.init_states(clip.shape[0], clip.shape[-2], clip.shape[-1],
                                   device=p.device, dtype=p.dtype)
    frame, new_states = model(clip, states)
    if squeeze:
        frame = frame.squeeze(0)
    return frame, new_states


def export_feature_maps(stacks, out_dir, prefix="feat"):
    """Write channel-averaged activations as grayscale PNG heatmaps.

    `stacks` maps a name to a FeatureStack; one image per layer, each
    min-max normalized on its own. Inspection aid only.
    """
    from PIL import Image

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for name, stack in stacks.items():
        for idx, layer in enumerate(stack.layers, start=1):
            fmap = layer.detach().float().mean(dim=1)[0].cpu().numpy()
            lo, hi = float(fmap.min()), float(fmap.max())
            if hi > lo:
                fmap = (fmap - lo) / (hi - lo)
            else:
                fmap = np.zeros_like(fmap)
            img = Image.fromarray((fmap * 255.0).round().astype(np.uint8), mode="L")
            path = out_dir / f"{prefix}-{name}-l{idx}.png"
            img.save(path)
            paths.append(path)
    return paths
