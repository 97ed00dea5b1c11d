"""Segmentation network contract, reference mini U-Net, training step and checkpoints."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, NamedTuple, Optional, Union

import torch
import torch.nn as nn

from .losses import MccConfig, objective_terms
from .sampler import MixedBatch

CHECKPOINT_FORMAT = "mccseg-checkpoint/1"
EXTERNAL_ARCHITECTURES = ("unet++", "deeplabv3+", "bisenetv1", "hrnet")


class NonFiniteLossError(RuntimeError):
    pass


@dataclass(frozen=True)
class ArchitectureSpec:
    name: str = "mini-unet"
    encoder: str = ""
    num_classes: int = 5
    widths: tuple[int, ...] = (16, 32, 64)

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(self.widths))
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")

    @classmethod
    def from_dict(cls, d: dict) -> "ArchitectureSpec":
        return cls(**d)

    def to_dict(self) -> dict:
        return {**asdict(self), "widths": list(self.widths)}


def _conv_block(cin: int, cout: int, stride: int = 1) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
        nn.Conv2d(cout, cout, 3, padding=1, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


class MiniUNet(nn.Module):
    """Three-stage encoder-decoder with skip connections.

    The first stage runs at full resolution and each later stage halves it
    with a strided convolution, so inputs must be multiples of
    ``2 ** (len(widths) - 1)``.
    """

    def __init__(self, num_classes: int = 5, widths=(16, 32, 64), in_channels: int = 3):
        super().__init__()
        self.num_classes = num_classes
        self.factor = 2 ** (len(widths) - 1)
        self.encoders = nn.ModuleList()
        cin = in_channels
        for i, w in enumerate(widths):
            self.encoders.append(_conv_block(cin, w, stride=1 if i == 0 else 2))
            cin = w
        self.ups = nn.ModuleList()
        self.decoders = nn.ModuleList()
        for w_skip in reversed(widths[:-1]):
            self.ups.append(nn.ConvTranspose2d(cin, w_skip, 2, stride=2))
            self.decoders.append(_conv_block(2 * w_skip, w_skip))
            cin = w_skip
        self.head = nn.Conv2d(cin, num_classes, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h, w = x.shape[-2:]
        if h % self.factor or w % self.factor:
            raise ValueError(f"input {h}x{w} is not a multiple of the downsampling factor {self.factor}")
        skips = []
        for enc in self.encoders:
            x = enc(x)
            skips.append(x)
        for up, dec, skip in zip(self.ups, self.decoders, reversed(skips[:-1])):
            x = dec(torch.cat([up(x), skip], dim=1))
        return self.head(x)


_REGISTRY: dict[str, Callable[[ArchitectureSpec], nn.Module]] = {
    "mini-unet": lambda spec: MiniUNet(spec.num_classes, spec.widths),
}


def register_architecture(name: str, constructor: Callable[[ArchitectureSpec], nn.Module]) -> None:
    """Register an adapter; ``constructor(spec)`` must return a module mapping
    (B, 3, H, W) images to (B, num_classes, H, W) logits."""
    _REGISTRY[name] = constructor


def unregister_architecture(name: str) -> None:
    if name == "mini-unet":
        raise ValueError("the reference network cannot be unregistered")
    _REGISTRY.pop(name, None)


def build_network(spec: ArchitectureSpec, seed: int = 0) -> nn.Module:
    if spec.name not in _REGISTRY:
        if spec.name in EXTERNAL_ARCHITECTURES:
            raise KeyError(f"{spec.name}: adapter not registered")
        raise KeyError(f"unknown architecture {spec.name!r}")
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return _REGISTRY[spec.name](spec)


def make_optimizer(net: nn.Module, lr: float = 1e-3) -> torch.optim.Optimizer:
    return torch.optim.Adam(net.parameters(), lr=lr)


class StepResult(NamedTuple):
    loss: float
    loss_sn: float
    loss_mcc: float


def training_step(
    net: nn.Module,
    batch: MixedBatch,
    regime: str,
    optimizer: torch.optim.Optimizer,
    cfg: MccConfig = MccConfig(),
    ignore_index: int = 0,
    generator: Optional[torch.Generator] = None,
) -> StepResult:
    """One forward pass, one objective evaluation and one optimizer update (in place)."""
    net.train()
    optimizer.zero_grad(set_to_none=False)
    logits = net(batch.images)
    terms = objective_terms(regime, batch, logits, cfg, ignore_index, generator)
    loss = float(terms.total.detach())
    if not math.isfinite(loss):
        raise NonFiniteLossError(f"non-finite loss {loss} on batch {batch.batch_id!r}")
    if terms.total.requires_grad:
        terms.total.backward()
        optimizer.step()
    return StepResult(loss, float(terms.supervised.detach()), float(terms.mcc.detach()))


def save_checkpoint(
    path: Union[str, Path],
    spec: ArchitectureSpec,
    net: nn.Module,
    optimizer: Optional[torch.optim.Optimizer] = None,
    step: int = 0,
    config: Optional[dict] = None,
) -> Path:
    path = Path(path)
    torch.save({
        "format": CHECKPOINT_FORMAT,
        "architecture": spec.to_dict(),
        "state_dict": net.state_dict(),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "step": step,
        "config": config or {},
    }, path)
    return path


@dataclass
class Checkpoint:
    spec: ArchitectureSpec
    net: nn.Module
    step: int
    config: dict = field(default_factory=dict)
    optimizer_state: Optional[dict] = None


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(blob, dict) or blob.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} checkpoint")
    spec = ArchitectureSpec.from_dict(blob["architecture"])
    net = build_network(spec)
    try:
        net.load_state_dict(blob["state_dict"])
    except RuntimeError as e:
        raise ValueError(f"{path}: checkpoint does not match architecture {spec.name!r}: {e}") from e
    net.eval()
    return Checkpoint(spec, net, blob["step"], blob["config"], blob["optimizer"])
