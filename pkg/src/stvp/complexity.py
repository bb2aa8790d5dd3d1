"""Parameter and arithmetic-cost accounting.

Parameters are counted by enumerating stored tensors. Convolution cost is
counted in MACs (one multiply-accumulate = one FLOP) from the shapes seen by
forward hooks during a shape-only evaluation, so the measured route is
independent of the closed forms the tests pin against it. For one recurrent
cell the closed forms are

    params = 8 * C^2 * k^2            (+ 8C bias, + 8C affine-norm terms)
    macs   = 8 * C^2 * k^2 * H * W    per sample at an HxW feature map

Elementwise gate arithmetic and nonlinearities are itemized separately and
excluded from the MAC figure.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import torch
from torch import nn

from .errors import ValidationError
from .stgru import STGRUCell

MAC_ASSUMPTIONS = [
    "one multiply-accumulate counted as one FLOP",
    "convolution cost = C_out*H_out*W_out * (C_in/groups)*prod(kernel) per sample",
    "bias additions excluded from the MAC total",
    "normalization, gating arithmetic, and nonlinearities excluded from the MAC "
    "total and itemized under elementwise",
    "figures are per sample within one recurrent cell",
]


def count_params(module):
    """Total stored parameter elements."""
    return sum(p.numel() for p in module.parameters())


def param_breakdown(module):
    return {name: p.numel() for name, p in module.named_parameters()}


def stgru_param_count(channels, kernel, bias=False, norm_affine=False):
    """Closed-form parameter count of one cell."""
    n = 8 * channels * channels * kernel * kernel
    if bias:
        n += 8 * channels
    if norm_affine:
        n += 8 * channels
    return n


def stgru_conv_macs(channels, kernel, height, width):
    """Closed-form MACs of the eight cell convolutions at one feature map."""
    return 8 * channels * channels * kernel * kernel * height * width


def _layer_macs(mod, inputs, output):
    if isinstance(mod, nn.Conv2d) or isinstance(mod, nn.Conv3d):
        per_out = (mod.in_channels // mod.groups) * math.prod(mod.kernel_size)
        return output[0].numel() * per_out
    if isinstance(mod, nn.ConvTranspose2d):
        per_in = (mod.out_channels // mod.groups) * math.prod(mod.kernel_size)
        return inputs[0][0].numel() * per_in
    if isinstance(mod, nn.Linear):
        return (output[0].numel() // mod.out_features) \
            * mod.in_features * mod.out_features
    return 0


_COUNTED = (nn.Conv2d, nn.Conv3d, nn.ConvTranspose2d, nn.Linear)


def count_macs(module, *inputs):
    """Run one forward pass and total MACs per counted layer.

    Returns (total, {qualified layer name: macs}); shapes come from the live
    activations, not from any formula.
    """
    totals = {}
    handles = []

    def make_hook(name):
        def hook(mod, inp, out):
            totals[name] = totals.get(name, 0) + _layer_macs(mod, inp, out)
        return hook

    for name, mod in module.named_modules():
        if isinstance(mod, _COUNTED):
            handles.append(mod.register_forward_hook(make_hook(name or "self")))
    try:
        module(*inputs)
    finally:
        for h in handles:
            h.remove()
    return sum(totals.values()), totals


@dataclass
class ComplexityReport:
    """Counts plus the conventions they were produced under."""

    params: int
    macs: int
    breakdown: dict = field(default_factory=dict)
    elementwise: dict = field(default_factory=dict)
    assumptions: list = field(default_factory=list)
    settings: dict = field(default_factory=dict)

    def save_json(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        doc = {
            "params": self.params,
            "macs": self.macs,
            "breakdown": self.breakdown,
            "elementwise": self.elementwise,
            "assumptions": self.assumptions,
            "settings": self.settings,
        }
        with open(path, "w") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True)
            fh.write("\n")
        return path


def estimate_flops(module, *inputs):
    """Hook-measured MACs of one forward pass, bundled as a report."""
    macs, breakdown = count_macs(module, *inputs)
    return ComplexityReport(params=count_params(module), macs=macs,
                            breakdown=breakdown, assumptions=list(MAC_ASSUMPTIONS),
                            settings={"input_shapes":
                                      [list(x.shape) for x in inputs]})


def analyze_stgru_unit(channels=128, kernel=5, map_size=16, bias=False,
                       norm=True, norm_affine=False):
    """Account one recurrent cell at the given width, kernel, and feature map.

    The cell is instantiated on the meta device: shapes propagate through a
    real forward pass (hooks measure them) without allocating or computing
    anything, so large configurations stay instant.
    """
    if channels < 1 or map_size < 1:
        raise ValidationError(
            f"channels and map size must be >= 1, got {channels}, {map_size}")
    with torch.device("meta"):
        cell = STGRUCell(channels, kernel, bias=bias, norm=norm,
                         norm_affine=norm_affine)
        t = torch.zeros(1, channels, map_size, map_size)
        s = torch.zeros(1, channels, map_size, map_size)
    macs, breakdown = count_macs(cell, t, s)
    chw = channels * map_size * map_size
    elementwise = {
        "adds": 8 * chw,
        "muls": 6 * chw,
        "nonlinearities": 4 * chw,
    }
    return ComplexityReport(
        params=count_params(cell), macs=macs, breakdown=breakdown,
        elementwise=elementwise, assumptions=list(MAC_ASSUMPTIONS),
        settings={"channels": channels, "kernel": kernel,
                  "map_height": map_size, "map_width": map_size,
                  "bias": bias, "norm_affine": norm_affine})
