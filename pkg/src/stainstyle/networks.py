"""Generator, conditional discriminator and residual tumor classifier.

All networks take NCHW float tensors with values in [0, 1].  The generator
is a FusionNet-style encoder/decoder: residual blocks with short-cut
connections inside each stage and additive long skips between mirrored
encoder and decoder stages.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F


GRAY_EPS = 1e-4


class ArchitectureError(ValueError):
    pass


@dataclass(frozen=True)
class NetConfig:
    kind: str
    d: int
    depth: int
    base_width: int
    blocks: int = 2
    label_conditioned: bool = False

    def to_dict(self) -> dict:
        return asdict(self)


def _check_dims(d: int, depth: int, base_width: int) -> None:
    if depth < 1 or base_width < 1:
        raise ArchitectureError("depth and base_width must be positive")
    if d <= 0 or d % (2 ** depth):
        raise ArchitectureError(f"d={d} is not divisible by 2**depth={2 ** depth}")


def _seeded(seed: int):
    gen = torch.Generator().manual_seed(seed)
    return gen


def _init_weights(module: nn.Module, seed: int) -> None:
    gen = _seeded(seed)
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
            fan_in = m.weight[0].numel() if not isinstance(m, nn.ConvTranspose2d) else m.weight.shape[0] * m.weight[0, 0].numel()
            std = (2.0 / fan_in) ** 0.5
            with torch.no_grad():
                m.weight.copy_(torch.randn(m.weight.shape, generator=gen) * std)
                if m.bias is not None:
                    m.bias.zero_()
        elif isinstance(m, (nn.BatchNorm2d, nn.InstanceNorm2d)) and m.affine:
            with torch.no_grad():
                m.weight.fill_(1.0)
                m.bias.zero_()


# --------------------------------------------------------------------------- #
# Generator
# --------------------------------------------------------------------------- #

def _conv_in(cin: int, cout: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1, bias=False),
        nn.InstanceNorm2d(cout, affine=True),
        nn.LeakyReLU(0.2),
    )


class FusionResBlock(nn.Module):
    """conv -> residual(conv, conv, conv) -> conv, FusionNet's building block."""

    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.head = _conv_in(cin, cout)
        self.residual = nn.Sequential(_conv_in(cout, cout), _conv_in(cout, cout), _conv_in(cout, cout))
        self.tail = _conv_in(cout, cout)

    def forward(self, x):
        h = self.head(x)
        return self.tail(h + self.residual(h))


class Generator(nn.Module):
    """Maps ``(n, 1, d, d)`` gray tiles to ``(n, 3, d, d)`` color tiles in [0, 1]."""

    def __init__(self, config: NetConfig):
        super().__init__()
        self.config = config
        w = config.base_width
        cin = 2 if config.label_conditioned else 1
        widths = [w * 2 ** k for k in range(config.depth + 1)]
        self.encoders = nn.ModuleList()
        self.downs = nn.ModuleList()
        prev = cin
        for k in range(config.depth):
            self.encoders.append(FusionResBlock(prev, widths[k]))
            self.downs.append(nn.Conv2d(widths[k], widths[k], 2, stride=2))
            prev = widths[k]
        self.bridge = FusionResBlock(prev, widths[config.depth])
        self.ups = nn.ModuleList()
        self.decoders = nn.ModuleList()
        for k in reversed(range(config.depth)):
            self.ups.append(nn.ConvTranspose2d(widths[k + 1], widths[k], 2, stride=2))
            self.decoders.append(FusionResBlock(widths[k], widths[k]))
        # per-pixel head sees decoder features plus the raw gray value (which
        # instance normalization would otherwise erase) and predicts a logit
        # offset from the gray tile, so the output starts near gray-over-RGB
        self.head = nn.Sequential(
            nn.Conv2d(widths[0] + 1, widths[0], 1), nn.LeakyReLU(0.2), nn.Conv2d(widths[0], 3, 1)
        )

    def forward(self, gray, label=None):
        x = gray
        if self.config.label_conditioned:
            if label is None:
                raise ArchitectureError("this generator is label conditioned; pass labels")
            plane = label.to(gray.dtype).view(-1, 1, 1, 1).expand_as(gray)
            x = torch.cat([gray, plane], dim=1)
        skips = []
        for enc, down in zip(self.encoders, self.downs):
            x = enc(x)
            skips.append(x)
            x = down(x)
        x = self.bridge(x)
        for up, dec, skip in zip(self.ups, self.decoders, reversed(skips)):
            x = dec(up(x) + skip)
        offset = self.head(torch.cat([x, gray], dim=1))
        return torch.sigmoid(torch.logit(gray, eps=GRAY_EPS) + offset)


# --------------------------------------------------------------------------- #
# Discriminator
# --------------------------------------------------------------------------- #

class Discriminator(nn.Module):
    """DCGAN-style critic on (gray condition, color candidate, label plane).

    Strided convolutions only; batch normalization after every layer but the
    first.  Returns a probability per sample, shape ``(n,)``.
    """

    def __init__(self, config: NetConfig):
        super().__init__()
        self.config = config
        w = config.base_width
        layers = [nn.Conv2d(5, w, 4, stride=2, padding=1), nn.LeakyReLU(0.2)]
        prev = w
        for k in range(1, config.depth):
            layers += [
                nn.Conv2d(prev, w * 2 ** k, 4, stride=2, padding=1, bias=False),
                nn.BatchNorm2d(w * 2 ** k),
                nn.LeakyReLU(0.2),
            ]
            prev = w * 2 ** k
        self.features = nn.Sequential(*layers)
        side = config.d // 2 ** config.depth
        self.out = nn.Conv2d(prev, 1, side)

    def logits(self, gray, color, label):
        plane = label.to(gray.dtype).view(-1, 1, 1, 1).expand_as(gray)
        x = torch.cat([gray, color, plane], dim=1)
        return self.out(self.features(x)).flatten()

    def forward(self, gray, color, label):
        return torch.sigmoid(self.logits(gray, color, label))


# --------------------------------------------------------------------------- #
# Classifier
# --------------------------------------------------------------------------- #

class BasicBlock(nn.Module):
    def __init__(self, cin: int, cout: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.shortcut = None
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(nn.Conv2d(cin, cout, 1, stride=stride, bias=False), nn.BatchNorm2d(cout))

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        identity = x if self.shortcut is None else self.shortcut(x)
        return F.relu(out + identity)


class Classifier(nn.Module):
    """Small ResNet.  ``forward`` returns ``(features, probability)``.

    ``features`` is the global average pool of the last residual stage, taken
    before the classification layer; its length is ``base_width * 2**(depth-1)``.
    """

    def __init__(self, config: NetConfig):
        super().__init__()
        self.config = config
        w = config.base_width
        self.stem = nn.Sequential(
            nn.Conv2d(3, w, 3, stride=2, padding=1, bias=False), nn.BatchNorm2d(w), nn.ReLU()
        )
        stages = []
        prev = w
        for k in range(config.depth):
            width = w * 2 ** k
            blocks = [BasicBlock(prev, width, stride=1 if k == 0 else 2)]
            blocks += [BasicBlock(width, width) for _ in range(config.blocks - 1)]
            stages.append(nn.Sequential(*blocks))
            prev = width
        self.stages = nn.Sequential(*stages)
        self.feature_dim = prev
        self.fc = nn.Linear(prev, 1)

    def features(self, x):
        return self.stages(self.stem(x)).mean(dim=(2, 3))

    def logits(self, x):
        return self.fc(self.features(x)).flatten()

    def forward(self, x):
        feats = self.features(x)
        return feats, torch.sigmoid(self.fc(feats).flatten())


# --------------------------------------------------------------------------- #
# Builders
# --------------------------------------------------------------------------- #

def _sample_inputs(kind: str, d: int, gen: torch.Generator, n: int = 4):
    gray = torch.rand(n, 1, d, d, generator=gen)
    color = torch.rand(n, 3, d, d, generator=gen)
    label = torch.arange(n) % 2
    return gray, color, label


def check_gradient_flow(model: nn.Module, seed: int = 0) -> list[str]:
    """Names of parameters that receive no gradient on a random batch."""
    gen = _seeded(seed + 1)
    cfg = model.config
    gray, color, label = _sample_inputs(cfg.kind, cfg.d, gen)
    was_training = model.training
    model.train()
    model.zero_grad()
    if isinstance(model, Generator):
        out = model(gray, label if cfg.label_conditioned else None)
        loss = (out * torch.rand(out.shape, generator=gen)).sum()
    elif isinstance(model, Discriminator):
        loss = (model.logits(gray, color, label) * torch.tensor([1.0, -1.0, 0.5, -0.7])).sum()
    else:
        feats, prob = model(color)
        loss = (prob * torch.tensor([1.0, -1.0, 0.5, -0.7])).sum() + (feats * torch.rand(feats.shape, generator=gen)).sum()
    loss.backward()
    dead = [name for name, p in model.named_parameters() if p.grad is None or not torch.any(p.grad != 0)]
    model.zero_grad(set_to_none=True)
    model.train(was_training)
    return dead


def _finish(model: nn.Module, seed: int) -> nn.Module:
    _init_weights(model, seed)
    if isinstance(model, Generator):
        with torch.no_grad():
            model.head[-1].weight.mul_(0.1)
    dead = check_gradient_flow(model, seed)
    if dead:
        raise ArchitectureError(f"parameters without gradient: {dead}")
    model.eval()
    return model


def build_generator(d: int = 64, depth: int = 3, base_width: int = 32, seed: int = 0,
                    label_conditioned: bool = False) -> Generator:
    _check_dims(d, depth, base_width)
    return _finish(Generator(NetConfig("generator", d, depth, base_width, label_conditioned=label_conditioned)), seed)


def build_discriminator(d: int = 64, depth: int = 3, base_width: int = 32, seed: int = 0) -> Discriminator:
    _check_dims(d, depth, base_width)
    return _finish(Discriminator(NetConfig("discriminator", d, depth, base_width)), seed)


def build_classifier(d: int = 64, depth: int = 3, base_width: int = 32, seed: int = 0,
                     blocks: int = 2) -> Classifier:
    # the stem halves the resolution before the residual stages
    _check_dims(d, depth, base_width)
    return _finish(Classifier(NetConfig("classifier", d, depth, base_width, blocks=blocks)), seed)


def build_from_config(config: NetConfig | dict) -> nn.Module:
    if isinstance(config, dict):
        config = NetConfig(**config)
    cls = {"generator": Generator, "discriminator": Discriminator, "classifier": Classifier}.get(config.kind)
    if cls is None:
        raise ArchitectureError(f"unknown network kind {config.kind!r}")
    _check_dims(config.d, config.depth, config.base_width)
    return cls(config)


# --------------------------------------------------------------------------- #
# numpy <-> tensor helpers and forward passes
# --------------------------------------------------------------------------- #

def color_to_tensor(tiles: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    """``(n, d, d, 3)`` or ``(d, d, 3)`` array -> ``(n, 3, d, d)`` tensor."""
    arr = np.asarray(tiles)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[-1] != 3:
        raise ArchitectureError(f"expected color tiles (n, d, d, 3), got {arr.shape}")
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2))).to(dtype)


def gray_to_tensor(tiles: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    """``(n, d, d)`` or ``(d, d)`` array -> ``(n, 1, d, d)`` tensor."""
    arr = np.asarray(tiles)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise ArchitectureError(f"expected gray tiles (n, d, d), got {arr.shape}")
    return torch.from_numpy(np.ascontiguousarray(arr[:, None])).to(dtype)


def tensor_to_color(t: torch.Tensor) -> np.ndarray:
    return t.detach().cpu().double().numpy().transpose(0, 2, 3, 1)


def forward_generator(g: Generator, gray: torch.Tensor, label: torch.Tensor | None = None) -> torch.Tensor:
    """Colorize a batch ``(n, 1, d, d)`` of gray tiles; differentiable in ``g``."""
    d = g.config.d
    if gray.ndim != 4 or gray.shape[1] != 1 or gray.shape[2:] != (d, d):
        raise ArchitectureError(f"generator expects (n, 1, {d}, {d}), got {tuple(gray.shape)}")
    return g(gray, label)


def extract_features(c: Classifier, tiles: torch.Tensor) -> torch.Tensor:
    """Global-average-pooled features ``(n, F_dim)``; differentiable in ``tiles``."""
    if tiles.ndim != 4 or tiles.shape[1] != 3:
        raise ArchitectureError(f"classifier expects (n, 3, d, d), got {tuple(tiles.shape)}")
    return c.features(tiles)
