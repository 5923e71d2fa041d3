"""U-Net backbone with decoder feature taps, shared by the student and both teachers.

The network exposes two intermediate decoder outputs alongside the logits:
the deepest decoder block (high-level semantic features at 1/8 resolution)
and the final decoder block (low-level detail features at full resolution).
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, asdict

import torch
import torch.nn as nn

from .common import ConfigError, InputError

DOWNSAMPLE_FACTOR = 16  # four 2x poolings


@dataclass
class BackboneConfig:
    in_channels: int = 1
    num_classes: int = 4
    widths: tuple[int, ...] = (16, 32, 64, 128, 256)
    norm: str = "group"  # "group" | "instance" | "none"; batch-independent by design

    def validate(self) -> None:
        if len(self.widths) != 5:
            raise ConfigError(f"widths must list 5 levels, got {len(self.widths)}")
        if any(w <= 0 for w in self.widths):
            raise ConfigError("widths must be positive")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.norm not in ("group", "instance", "none"):
            raise ConfigError(f"unknown norm kind: {self.norm!r}")


@dataclass
class FeatureTaps:
    low: torch.Tensor   # (N, widths[0], H, W) from the final decoder block
    high: torch.Tensor  # (N, widths[3], H/8, W/8) from the deepest decoder block


@dataclass
class ModelOutput:
    logits: torch.Tensor  # (N, K, H, W)
    taps: FeatureTaps

    def probs(self) -> torch.Tensor:
        return torch.softmax(self.logits, dim=1)


def _norm_layer(kind: str, channels: int) -> nn.Module:
    if kind == "group":
        # Keep >= 2 channels per group so the bottleneck stays normalizable
        # even when its spatial extent collapses to 1x1.
        groups = next((g for g in (8, 4, 2) if channels % g == 0 and channels // g >= 2), 1)
        return nn.GroupNorm(groups, channels)
    if kind == "instance":
        return nn.InstanceNorm2d(channels, affine=True)
    return nn.Identity()


def _conv_block(in_ch: int, out_ch: int, norm: str) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(in_ch, out_ch, 3, padding=1, bias=False),
        _norm_layer(norm, out_ch),
        nn.ReLU(inplace=True),
        nn.Conv2d(out_ch, out_ch, 3, padding=1, bias=False),
        _norm_layer(norm, out_ch),
        nn.ReLU(inplace=True),
    )


class UNet(nn.Module):
    """Five-level U-Net; forward returns logits plus low/high decoder taps."""

    def __init__(self, config: BackboneConfig):
        super().__init__()
        config.validate()
        self.config = config
        w = config.widths
        self.enc = nn.ModuleList([
            _conv_block(config.in_channels, w[0], config.norm),
            _conv_block(w[0], w[1], config.norm),
            _conv_block(w[1], w[2], config.norm),
            _conv_block(w[2], w[3], config.norm),
        ])
        self.pool = nn.MaxPool2d(2)
        self.bottleneck = _conv_block(w[3], w[4], config.norm)
        self.up = nn.ModuleList([
            nn.ConvTranspose2d(w[4], w[3], 2, stride=2),
            nn.ConvTranspose2d(w[3], w[2], 2, stride=2),
            nn.ConvTranspose2d(w[2], w[1], 2, stride=2),
            nn.ConvTranspose2d(w[1], w[0], 2, stride=2),
        ])
        self.dec = nn.ModuleList([
            _conv_block(2 * w[3], w[3], config.norm),
            _conv_block(2 * w[2], w[2], config.norm),
            _conv_block(2 * w[1], w[1], config.norm),
            _conv_block(2 * w[0], w[0], config.norm),
        ])
        self.head = nn.Conv2d(w[0], config.num_classes, 1)
        self.fingerprint = _fingerprint(config, [(n, tuple(p.shape)) for n, p in self.named_parameters()])

    def forward(self, x: torch.Tensor) -> ModelOutput:
        skips = []
        for enc in self.enc:
            x = enc(x)
            skips.append(x)
            x = self.pool(x)
        x = self.bottleneck(x)
        high = None
        for i, (up, dec) in enumerate(zip(self.up, self.dec)):
            x = up(x)
            x = dec(torch.cat([x, skips[-1 - i]], dim=1))
            if i == 0:
                high = x
        return ModelOutput(logits=self.head(x), taps=FeatureTaps(low=x, high=high))


def _fingerprint(config: BackboneConfig, named_shapes: list[tuple[str, tuple[int, ...]]]) -> str:
    payload = {"config": {**asdict(config), "widths": list(config.widths)},
               "params": [[n, list(s)] for n, s in named_shapes]}
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]


def build_unet(config: BackboneConfig, seed: int, dtype: torch.dtype = torch.float32) -> UNet:
    """Deterministically initialize a network from (config, seed)."""
    config.validate()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        net = UNet(config)
    return net.to(dtype)


def copy_weights(src: UNet) -> UNet:
    """Deep copy: mutating the copy leaves the source untouched."""
    return copy.deepcopy(src)


def model_dtype(net: UNet) -> torch.dtype:
    return next(net.parameters()).dtype


def forward_pass(net: UNet, images: torch.Tensor, train_mode: bool = True) -> ModelOutput:
    """Run the network; with train_mode off no gradient state is produced."""
    if images.ndim != 4 or images.shape[1] != net.config.in_channels:
        raise InputError(f"expected images (N, {net.config.in_channels}, H, W), "
                         f"got {tuple(images.shape)}")
    if images.shape[2] % DOWNSAMPLE_FACTOR or images.shape[3] % DOWNSAMPLE_FACTOR:
        raise InputError(f"H and W must be divisible by {DOWNSAMPLE_FACTOR}, "
                         f"got {tuple(images.shape[2:])}")
    images = images.to(model_dtype(net))
    if train_mode:
        net.train()
        return net(images)
    net.eval()
    with torch.no_grad():
        return net(images)
