"""Spatiotemporal gated recurrent unit and the stacked memory it forms.

Each cell keeps a temporal state and a spatial state, no hidden state. One
step, with sigma the logistic function, * convolution and . elementwise:

    R = sigma(W_sr * S_in + W_tr * T_prev)          trend gate
    U = sigma(W_su * S_in + W_tu * T_prev)          update gate
    Tc = tanh(W_tt * T_prev + R . (W_st * S_in))    temporal trend
    Sc = tanh(W_ss * S_in  + R . (W_ts * T_prev))   spatial trend
    T_out = (1 - U) . Tc + U . T_prev
    S_out = (1 - U) . Sc + U . S_in

Within one time step the spatial state flows upward through the stack while
each layer's temporal state recurs across time; layer 1 receives the encoded
spatial features directly and a 1x1 fusion of the encoded temporal features
with its previous temporal state.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .errors import NumericError, ValidationError


@dataclass
class LayerState:
    """Recurrent state pair (temporal, spatial) of one layer."""

    T: torch.Tensor
    S: torch.Tensor


@dataclass
class GateActivations:
    """Diagnostic capture of one cell evaluation."""

    R: torch.Tensor
    U: torch.Tensor
    trend_T: torch.Tensor
    trend_S: torch.Tensor


class ChannelLayerNorm(nn.Module):
    """Layer normalization over (C,H,W) with optional per-channel affine.

    Normalizing over the full feature map keeps the module independent of the
    spatial size, so one cell serves any resolution.
    """

    def __init__(self, channels, affine=False, eps=1e-5):
        super().__init__()
        self.eps = eps
        if affine:
            self.weight = nn.Parameter(torch.ones(channels, 1, 1))
            self.bias = nn.Parameter(torch.zeros(channels, 1, 1))
        else:
            self.register_parameter("weight", None)
            self.register_parameter("bias", None)

    def forward(self, x):
        mu = x.mean(dim=(1, 2, 3), keepdim=True)
        var = x.var(dim=(1, 2, 3), keepdim=True, unbiased=False)
        y = (x - mu) / torch.sqrt(var + self.eps)
        if self.weight is not None:
            y = y * self.weight + self.bias
        return y


def _force_gate(gate, override):
    if override is None:
        return gate
    if isinstance(override, torch.Tensor):
        return override.to(gate.dtype)
    return torch.full_like(gate, float(override))


class STGRUCell(nn.Module):
    """One spatiotemporal GRU: gate initialization, trend, and update modules.

    Eight shape-preserving convolutions map hidden channels to hidden
    channels. Biases are off by default; normalization is applied to each
    gate pre-activation sum before its nonlinearity and can be disabled for
    closed-form tests. ``force_update`` / ``force_trend`` override the gates
    and exist for tests only, never for training.
    """

    def __init__(self, channels, kernel=5, bias=False, norm=True, norm_affine=False):
        super().__init__()
        if kernel < 1 or kernel % 2 == 0:
            raise ValidationError(f"cell kernel must be odd, got {kernel}")
        self.channels = channels
        self.kernel = kernel
        pad = kernel // 2

        def conv():
            return nn.Conv2d(channels, channels, kernel, padding=pad, bias=bias)

        # naming: conv_<input><target>, e.g. conv_sr reads S and feeds gate R
        self.conv_sr = conv()
        self.conv_tr = conv()
        self.conv_su = conv()
        self.conv_tu = conv()
        self.conv_tt = conv()
        self.conv_st = conv()
        self.conv_ss = conv()
        self.conv_ts = conv()
        if norm:
            self.norm_r = ChannelLayerNorm(channels, affine=norm_affine)
            self.norm_u = ChannelLayerNorm(channels, affine=norm_affine)
            self.norm_tt = ChannelLayerNorm(channels, affine=norm_affine)
            self.norm_ss = ChannelLayerNorm(channels, affine=norm_affine)
        else:
            self.norm_r = self.norm_u = self.norm_tt = self.norm_ss = nn.Identity()

    def forward(self, temporal_prev, spatial_in, capture_gates=False,
                force_update=None, force_trend=None):
        t_prev, s_in = temporal_prev, spatial_in
        if t_prev.shape != s_in.shape:
            raise ValidationError(
                f"state shapes differ: {tuple(t_prev.shape)} vs {tuple(s_in.shape)}")
        if t_prev.dim() != 4 or t_prev.shape[1] != self.channels:
            raise ValidationError(
                f"expected [B,{self.channels},H,W] states, got {tuple(t_prev.shape)}")
        if not t_prev.is_meta:
            # shape-only (meta) evaluation carries no values to check
            if not (torch.isfinite(t_prev).all() and torch.isfinite(s_in).all()):
                raise NumericError("non-finite values in cell input states")

        r = torch.sigmoid(self.norm_r(self.conv_sr(s_in) + self.conv_tr(t_prev)))
        u = torch.sigmoid(self.norm_u(self.conv_su(s_in) + self.conv_tu(t_prev)))
        r = _force_gate(r, force_trend)
        u = _force_gate(u, force_update)

        trend_t = torch.tanh(self.norm_tt(self.conv_tt(t_prev) + r * self.conv_st(s_in)))
        trend_s = torch.tanh(self.norm_ss(self.conv_ss(s_in) + r * self.conv_ts(t_prev)))

        t_out = (1.0 - u) * trend_t + u * t_prev
        s_out = (1.0 - u) * trend_s + u * s_in

        if capture_gates:
            return t_out, s_out, GateActivations(r, u, trend_t, trend_s)
        return t_out, s_out


class TemporalFusion(nn.Module):
    """1x1 convolution over [encoded_temporal, previous_temporal] feeding layer 1."""

    def __init__(self, channels, bias=True):
        super().__init__()
        self.proj = nn.Conv2d(2 * channels, channels, 1, bias=bias)

    def forward(self, encoded_temporal, temporal_prev):
        if encoded_temporal.shape != temporal_prev.shape:
            raise ValidationError(
                f"fusion inputs differ: {tuple(encoded_temporal.shape)} vs "
                f"{tuple(temporal_prev.shape)}")
        return self.proj(torch.cat([encoded_temporal, temporal_prev], dim=1))


class STGRUStack(nn.Module):
    """K stacked cells plus the layer-1 temporal fusion.

    The spatial input of layer k is the spatial output of layer k-1 (layer 1
    reads the encoded spatial features); temporal states recur across time.
    Returns all K updated states; the top pair is the predicted feature pair
    handed to the decoders.
    """

    def __init__(self, num_layers, channels, kernel=5, bias=False, norm=True,
                 norm_affine=False):
        super().__init__()
        if num_layers < 1:
            raise ValidationError(f"stack needs >= 1 layers, got {num_layers}")
        self.num_layers = num_layers
        self.channels = channels
        self.fusion = TemporalFusion(channels)
        self.cells = nn.ModuleList([
            STGRUCell(channels, kernel, bias=bias, norm=norm, norm_affine=norm_affine)
            for _ in range(num_layers)
        ])

    def init_states(self, batch, height, width, device=None, dtype=None):
        """Zero temporal and spatial states for the start of a sequence."""
        kw = {"device": device, "dtype": dtype}
        return [LayerState(torch.zeros(batch, self.channels, height, width, **kw),
                           torch.zeros(batch, self.channels, height, width, **kw))
                for _ in range(self.num_layers)]

    def forward(self, prev_states, encoded_temporal, encoded_spatial,
                force_update=None, force_trend=None):
        if len(prev_states) != self.num_layers:
            raise ValidationError(
                f"got {len(prev_states)} states for {self.num_layers} layers")
        new_states = []
        spatial = encoded_spatial
        for k, cell in enumerate(self.cells):
            if k == 0:
                temporal_prev = self.fusion(encoded_temporal, prev_states[0].T)
            else:
                temporal_prev = prev_states[k].T
            t_out, s_out = cell(temporal_prev, spatial,
                                force_update=force_update, force_trend=force_trend)
            new_states.append(LayerState(t_out, s_out))
            spatial = s_out
        return new_states, new_states[-1]
