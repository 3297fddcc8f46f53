"""CNN, spectrogram-Transformer and CNN-attention hybrid classifiers.

All models take a batch of log-mel spectrograms ``(B, 128, T)`` and return a
:class:`ModelOutput`. Presets cover the full-size architectures and small
``mini-*`` variants that train on a CPU in seconds.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .features import N_MELS

PATCH = 16
STRIDE = 10


# ---------------------------------------------------------------- specs

@dataclass
class ModelSpec:
    family: str
    preset: str
    num_classes: int
    repr_dim: int
    layers: int = 0
    heads: int = 0
    downsample_factor: int = 1
    patch_size: int = PATCH
    patch_stride: int = STRIDE
    separate_head: bool = False
    input_frames: int = 1000
    input_bins: int = N_MELS
    width_mult: float = 1.0
    depth_mult: float = 1.0
    dropout: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(**d)


# (family, repr_dim, layers/blocks, heads, downsample, extra)
PRESETS = {
    "effnet-b0": dict(family="cnn", repr_dim=1280, layers=16, downsample_factor=32,
                      width_mult=1.0, depth_mult=1.0, dropout=0.2),
    "effnet-b2": dict(family="cnn", repr_dim=1408, layers=23, downsample_factor=32,
                      width_mult=1.1, depth_mult=1.2, dropout=0.3),
    "effnet-b6": dict(family="cnn", repr_dim=2304, layers=45, downsample_factor=32,
                      width_mult=1.8, depth_mult=2.6, dropout=0.5),
    "densenet-121": dict(family="cnn", repr_dim=1024, layers=121, downsample_factor=32),
    "ast-tiny": dict(family="ast", repr_dim=192, layers=12, heads=3),
    "ast-small": dict(family="ast", repr_dim=384, layers=12, heads=6),
    "ast-base": dict(family="ast", repr_dim=768, layers=12, heads=12),
    "hybrid-b0": dict(family="hybrid", repr_dim=1280, layers=16, heads=4, downsample_factor=32,
                      width_mult=1.0, depth_mult=1.0, dropout=0.2),
    "hybrid-b2": dict(family="hybrid", repr_dim=1408, layers=23, heads=4, downsample_factor=32,
                      width_mult=1.1, depth_mult=1.2, dropout=0.3),
    "mini-cnn": dict(family="cnn", repr_dim=64, layers=4, downsample_factor=16),
    "mini-ast": dict(family="ast", repr_dim=32, layers=2, heads=2),
    "mini-hybrid": dict(family="hybrid", repr_dim=64, layers=4, heads=4, downsample_factor=16),
}


def model_spec(preset: str, num_classes: int, input_frames: int = 1000, **overrides) -> ModelSpec:
    if preset not in PRESETS:
        raise ValueError(f"unknown preset {preset!r}; known: {sorted(PRESETS)}")
    params = dict(PRESETS[preset], preset=preset, num_classes=num_classes,
                  input_frames=input_frames)
    params.update(overrides)
    return ModelSpec(**params)


@dataclass
class ModelOutput:
    logits: torch.Tensor
    penult: torch.Tensor
    dis_logits: torch.Tensor | None = None
    attention: list[torch.Tensor] | None = None


@dataclass(frozen=True)
class PatchGrid:
    n_freq: int
    n_time: int

    @property
    def N(self) -> int:
        return self.n_freq * self.n_time


# ------------------------------------------------------------- patchify

def patch_positions(length: int, size: int = PATCH, stride: int = STRIDE) -> int:
    """Number of windows of ``size`` that fit entirely at ``stride`` steps."""
    if length < size:
        return 0
    return (length - size) // stride + 1


def patch_grid(bins: int, frames: int, size: int = PATCH, stride: int = STRIDE) -> PatchGrid:
    return PatchGrid(patch_positions(bins, size, stride), patch_positions(frames, size, stride))


def patchify(spec, size: int = PATCH, stride: int = STRIDE):
    """Split a spectrogram into overlapping ``size x size`` tiles.

    Tiles are ordered frequency-major: tile ``k`` sits at frequency index
    ``k // n_time`` and time index ``k % n_time``. For a 128-bin input the
    frequency axis yields 12 tiles and the top two mel bins are never covered.
    """
    spec = np.asarray(spec)
    if spec.ndim != 2:
        raise ValueError("patchify expects a 2-D spectrogram")
    bins, frames = spec.shape
    if bins < size or frames < size:
        raise ValueError(f"input {spec.shape} smaller than one {size}x{size} patch")
    grid = patch_grid(bins, frames, size, stride)
    tiles = np.lib.stride_tricks.sliding_window_view(spec, (size, size))[::stride, ::stride]
    tiles = tiles[:grid.n_freq, :grid.n_time]
    return tiles.reshape(grid.N, size, size), grid


# -------------------------------------------------- channel adaptation

def adapt_input_channels(kernel3):
    """Collapse an RGB first-layer kernel ``(out, 3, kh, kw)`` to one channel by averaging."""
    shape = tuple(kernel3.shape)
    if len(shape) != 4 or shape[1] != 3:
        raise ValueError(f"expected a kernel with 3 input channels, got shape {shape}")
    if isinstance(kernel3, torch.Tensor):
        return kernel3.mean(dim=1, keepdim=True)
    return np.asarray(kernel3).mean(axis=1, keepdims=True)


# ---------------------------------------------------------- CNN blocks

def round_filters(channels: float, width_mult: float, divisor: int = 8) -> int:
    channels *= width_mult
    new = max(divisor, int(channels + divisor / 2) // divisor * divisor)
    if new < 0.9 * channels:
        new += divisor
    return int(new)


def round_repeats(repeats: int, depth_mult: float) -> int:
    return int(math.ceil(depth_mult * repeats))


class SqueezeExcite(nn.Module):
    def __init__(self, channels, squeeze):
        super().__init__()
        self.reduce = nn.Conv2d(channels, squeeze, 1)
        self.expand = nn.Conv2d(squeeze, channels, 1)

    def forward(self, x):
        s = x.mean((2, 3), keepdim=True)
        return x * torch.sigmoid(self.expand(F.silu(self.reduce(s))))


class MBConv(nn.Module):
    """Inverted bottleneck: 1x1 expand, depthwise kxk, squeeze-excite, 1x1 project."""

    def __init__(self, c_in, c_out, expand, kernel, stride, se_ratio=0.25):
        super().__init__()
        hidden = c_in * expand
        layers = []
        if expand != 1:
            layers += [nn.Conv2d(c_in, hidden, 1, bias=False), nn.BatchNorm2d(hidden), nn.SiLU()]
        layers += [nn.Conv2d(hidden, hidden, kernel, stride, kernel // 2, groups=hidden, bias=False),
                   nn.BatchNorm2d(hidden), nn.SiLU(),
                   SqueezeExcite(hidden, max(1, int(c_in * se_ratio))),
                   nn.Conv2d(hidden, c_out, 1, bias=False), nn.BatchNorm2d(c_out)]
        self.block = nn.Sequential(*layers)
        self.residual = stride == 1 and c_in == c_out

    def forward(self, x):
        y = self.block(x)
        return x + y if self.residual else y


# expand, kernel, stride, c_in, c_out, repeats
EFFICIENTNET_STAGES = [
    (1, 3, 1, 32, 16, 1),
    (6, 3, 2, 16, 24, 2),
    (6, 5, 2, 24, 40, 2),
    (6, 3, 2, 40, 80, 3),
    (6, 5, 1, 80, 112, 3),
    (6, 5, 2, 112, 192, 4),
    (6, 3, 1, 192, 320, 1),
]
MINI_STAGES = [
    (1, 3, 2, 16, 24, 1),
    (4, 3, 2, 24, 32, 1),
    (4, 3, 2, 32, 48, 1),
    (4, 3, 1, 48, 48, 1),
]


def conv_bn_act(c_in, c_out, kernel, stride):
    return nn.Sequential(nn.Conv2d(c_in, c_out, kernel, stride, kernel // 2, bias=False),
                         nn.BatchNorm2d(c_out), nn.SiLU())


class EfficientNetFeatures(nn.Module):
    """Single-channel EfficientNet-style trunk ending in a 1x1 conv to ``out_dim``."""

    def __init__(self, stages, stem, out_dim, width_mult=1.0, depth_mult=1.0):
        super().__init__()
        stem_c = round_filters(stem, width_mult)
        blocks = [conv_bn_act(1, stem_c, 3, 2)]
        c_prev = stem_c
        for expand, k, s, _, c_out, reps in stages:
            c_out = round_filters(c_out, width_mult)
            for r in range(round_repeats(reps, depth_mult)):
                blocks.append(MBConv(c_prev, c_out, expand, k, s if r == 0 else 1))
                c_prev = c_out
        blocks.append(conv_bn_act(c_prev, out_dim, 1, 1))
        self.layers = nn.Sequential(*blocks)

    def forward(self, x):
        return self.layers(x)


class DenseNetFeatures(nn.Module):
    def __init__(self):
        super().__init__()
        from torchvision.models import densenet121

        trunk = densenet121(weights=None).features
        conv0 = trunk.conv0
        conv1 = nn.Conv2d(1, conv0.out_channels, conv0.kernel_size, conv0.stride,
                          conv0.padding, bias=False)
        with torch.no_grad():
            conv1.weight.copy_(adapt_input_channels(conv0.weight))
        trunk.conv0 = conv1
        self.layers = trunk

    def forward(self, x):
        return F.relu(self.layers(x))


def build_cnn_trunk(spec: ModelSpec) -> nn.Module:
    if spec.preset == "densenet-121":
        return DenseNetFeatures()
    if spec.preset.startswith("mini"):
        return EfficientNetFeatures(MINI_STAGES, 16, spec.repr_dim)
    return EfficientNetFeatures(EFFICIENTNET_STAGES, 32, spec.repr_dim,
                                spec.width_mult, spec.depth_mult)


# ---------------------------------------------------------- attention

class MultiHeadSelfAttention(nn.Module):
    def __init__(self, dim, heads):
        super().__init__()
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by {heads} heads")
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):
        B, L, D = x.shape
        q, k, v = self.qkv(x).reshape(B, L, 3, self.heads, D // self.heads).permute(2, 0, 3, 1, 4)
        attn = torch.softmax((q @ k.transpose(-2, -1)) * self.scale, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(B, L, D)
        return self.proj(out), attn


class EncoderBlock(nn.Module):
    """Pre-norm Transformer layer with a 4x GELU MLP."""

    def __init__(self, dim, heads, mlp_ratio=4):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = MultiHeadSelfAttention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, mlp_ratio * dim), nn.GELU(),
                                 nn.Linear(mlp_ratio * dim, dim))

    def forward(self, x):
        a, attn = self.attn(self.norm1(x))
        x = x + a
        return x + self.mlp(self.norm2(x)), attn


# ------------------------------------------------------------ models

class Classifier(nn.Module):
    """Common plumbing: input checking and the (optional) distillation head."""

    family = ""

    def __init__(self, spec: ModelSpec):
        super().__init__()
        self.spec = spec

    def check_input(self, x):
        if x.dim() == 2:
            x = x.unsqueeze(0)
        expected = (self.spec.input_bins, self.spec.input_frames)
        if x.dim() != 3 or tuple(x.shape[1:]) != expected:
            raise ValueError(f"input shape {tuple(x.shape)} does not match (B, {expected[0]}, {expected[1]})")
        return x

    def attention_grid(self):
        """Token grid of the captured attention maps, or None for attention-free models."""
        return None


class CNNClassifier(Classifier):
    family = "cnn"

    def __init__(self, spec: ModelSpec):
        super().__init__(spec)
        self.trunk = build_cnn_trunk(spec)
        self.dropout = nn.Dropout(spec.dropout)
        self.head = nn.Linear(spec.repr_dim, spec.num_classes)
        self.dis_head = nn.Linear(spec.repr_dim, spec.num_classes) if spec.separate_head else None

    def feature_map(self, x):
        return self.trunk(x.unsqueeze(1))

    def pool(self, fmap):
        return fmap.mean(dim=(2, 3))

    def forward(self, x, capture_attention=False):
        x = self.check_input(x)
        h = self.dropout(self.pool(self.feature_map(x)))
        dis = self.dis_head(h) if self.dis_head is not None else None
        return ModelOutput(self.head(h), h, dis, None)


class HybridClassifier(CNNClassifier):
    """CNN trunk, then multi-head self-attention across time frames, then mean pooling."""

    family = "hybrid"
    n_special = 0

    def __init__(self, spec: ModelSpec):
        super().__init__(spec)
        self.time_attention = EncoderBlock(spec.repr_dim, spec.heads or 4)

    def attention_grid(self):
        # one token per downsampled frame; only the time axis is meaningful
        with torch.no_grad():
            fmap = self.feature_map(torch.zeros(1, self.spec.input_bins, self.spec.input_frames))
        return PatchGrid(1, fmap.shape[-1])

    def forward(self, x, capture_attention=False):
        x = self.check_input(x)
        frames = self.feature_map(x).mean(dim=2).transpose(1, 2)  # (B, T', d)
        frames, attn = self.time_attention(frames)
        h = self.dropout(frames.mean(dim=1))
        dis = self.dis_head(h) if self.dis_head is not None else None
        return ModelOutput(self.head(h), h, dis, [attn] if capture_attention else None)


class ASTClassifier(Classifier):
    family = "ast"

    def __init__(self, spec: ModelSpec):
        super().__init__(spec)
        d = spec.repr_dim
        self.grid = patch_grid(spec.input_bins, spec.input_frames, spec.patch_size, spec.patch_stride)
        if self.grid.N == 0:
            raise ValueError("input too small for a single patch")
        # a strided conv is exactly a linear projection of each flattened tile
        self.patch_embed = nn.Conv2d(1, d, spec.patch_size, spec.patch_stride)
        self.n_special = 2 if spec.separate_head else 1
        self.cls_token = nn.Parameter(torch.zeros(1, 1, d))
        self.dis_token = nn.Parameter(torch.zeros(1, 1, d)) if spec.separate_head else None
        self.pos_embed = nn.Parameter(torch.zeros(1, self.grid.N + self.n_special, d))
        self.blocks = nn.ModuleList(EncoderBlock(d, spec.heads) for _ in range(spec.layers))
        self.norm = nn.LayerNorm(d)
        self.head = nn.Linear(d, spec.num_classes)
        self.dis_head = nn.Linear(d, spec.num_classes) if spec.separate_head else None
        for p in (self.cls_token, self.dis_token, self.pos_embed):
            if p is not None:
                nn.init.trunc_normal_(p, std=0.02)

    def attention_grid(self):
        return self.grid

    def embed(self, x):
        tokens = self.patch_embed(x.unsqueeze(1)).flatten(2).transpose(1, 2)  # (B, N, d)
        special = [self.cls_token.expand(len(x), -1, -1)]
        if self.dis_token is not None:
            special.append(self.dis_token.expand(len(x), -1, -1))
        return torch.cat(special + [tokens], dim=1) + self.pos_embed

    def encode(self, tokens, capture_attention=False):
        maps = []
        for blk in self.blocks:
            tokens, attn = blk(tokens)
            if capture_attention:
                maps.append(attn)
        return self.norm(tokens), maps

    def forward(self, x, capture_attention=False):
        x = self.check_input(x)
        h, maps = self.encode(self.embed(x), capture_attention)
        dis = self.dis_head(h[:, 1]) if self.dis_head is not None else None
        return ModelOutput(self.head(h[:, 0]), h[:, 0], dis, maps if capture_attention else None)


FAMILIES = {"cnn": CNNClassifier, "ast": ASTClassifier, "hybrid": HybridClassifier}


def build_model(spec: ModelSpec, seed: int = 0) -> Classifier:
    """Instantiate ``spec`` with parameters drawn from a private RNG seeded by ``seed``."""
    if spec.family not in FAMILIES:
        raise ValueError(f"unknown model family {spec.family!r}")
    if spec.preset not in PRESETS:
        raise ValueError(f"unknown preset {spec.preset!r}")
    if spec.num_classes < 2:
        raise ValueError("num_classes must be >= 2")
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return FAMILIES[spec.family](spec)


def forward(model: Classifier, spec, mode: str = "eval", capture_attention: bool = False) -> ModelOutput:
    """Run ``model`` on a spectrogram or batch (numpy or tensor) in the given mode."""
    if mode not in ("train", "eval"):
        raise ValueError("mode must be 'train' or 'eval'")
    model.train(mode == "train")
    x = torch.as_tensor(np.asarray(spec) if not isinstance(spec, torch.Tensor) else spec,
                        dtype=torch.float32)
    if mode == "eval":
        with torch.no_grad():
            return model(x, capture_attention=capture_attention)
    return model(x, capture_attention=capture_attention)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def ast_parameter_count(d: int, layers: int, num_classes: int, n_patches: int,
                        patch: int = PATCH, separate_head: bool = False) -> int:
    """Closed-form parameter count of :class:`ASTClassifier`."""
    special = 2 if separate_head else 1
    embed = d * patch * patch + d + special * d + (n_patches + special) * d
    per_layer = 2 * d + (3 * d * d + 3 * d) + (d * d + d) + 2 * d + (4 * d * d + 4 * d) + (4 * d * d + d)
    head = (d * num_classes + num_classes) * (2 if separate_head else 1)
    return embed + layers * per_layer + 2 * d + head
