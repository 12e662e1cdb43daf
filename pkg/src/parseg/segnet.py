"""Small 2D residual U-Net with per-sample normalization.

Outputs per-pixel softmax probabilities and the globally pooled activation of
the deepest encoder stage (the "bottleneck" feature used by the mutual terms).
GroupNorm is used throughout so one batch item never influences another.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import __version__

ROLES = ("partial", "full")


class ModelFileError(RuntimeError):
    pass


@dataclass
class BackboneConfig:
    num_classes: int
    depth: int = 3
    base_width: int = 16
    feature_dim: int = 64
    seed: int = 0
    spatial_features: bool = False

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ValueError("need background plus >=1 organ (num_classes >= 2)")
        if self.depth < 2:
            raise ValueError("depth must be >= 2")
        if self.base_width < 1 or self.feature_dim < 1:
            raise ValueError("base_width and feature_dim must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


def _groups(ch: int) -> int:
    for g in (8, 4, 2):
        if ch % g == 0 and ch // g >= 2:
            return g
    return 1


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1, bias=False)
        self.norm1 = nn.GroupNorm(_groups(cout), cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1, bias=False)
        self.norm2 = nn.GroupNorm(_groups(cout), cout)
        self.skip = nn.Identity() if cin == cout else nn.Conv2d(cin, cout, 1, bias=False)

    def forward(self, x):
        y = F.relu(self.norm1(self.conv1(x)))
        y = self.norm2(self.conv2(y))
        return F.relu(y + self.skip(x))


class ResUNet(nn.Module):
    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        w = [cfg.base_width * 2**k for k in range(cfg.depth)]
        self.depth = cfg.depth
        self.enc = nn.ModuleList()
        cin = 1
        for ch in w:
            self.enc.append(ResBlock(cin, ch))
            cin = ch
        self.bottleneck = ResBlock(w[-1], cfg.feature_dim)
        self.up = nn.ModuleList()
        self.dec = nn.ModuleList()
        cin = cfg.feature_dim
        for ch in reversed(w):
            self.up.append(nn.ConvTranspose2d(cin, ch, 2, stride=2))
            self.dec.append(ResBlock(2 * ch, ch))
            cin = ch
        self.head = nn.Conv2d(w[0], cfg.num_classes, 1)
        self.spatial_features = cfg.spatial_features

    def forward(self, x):
        skips = []
        for block in self.enc:
            x = block(x)
            skips.append(x)
            x = F.max_pool2d(x, 2)
        x = self.bottleneck(x)
        if self.spatial_features:
            feat = x.flatten(1)
        else:
            feat = x.mean(dim=(2, 3))
        for up, dec, skip in zip(self.up, self.dec, reversed(skips)):
            x = dec(torch.cat([up(x), skip], dim=1))
        return self.head(x), feat


@dataclass
class ModelHandle:
    """A backbone plus the bookkeeping needed to interpret its channels.

    ``organs[c - 1]`` is the global organ index predicted by output channel ``c``.
    """

    net: ResUNet
    config: BackboneConfig
    role: str
    dataset_index: int
    organs: tuple[int, ...]
    num_organs: int

    @property
    def name(self) -> str:
        return f"{'P' if self.role == 'partial' else 'F'}{self.dataset_index + 1}"

    def parameters(self):
        return self.net.parameters()


@dataclass
class SegmentationOutput:
    probabilities: torch.Tensor  # (B, C, H, W), model-local channels
    bottleneck: torch.Tensor  # (B, F)
    logits: torch.Tensor = field(repr=False)


def init_model(
    cfg: BackboneConfig,
    role: str = "full",
    dataset_index: int = 0,
    organs: Optional[Sequence[int]] = None,
    num_organs: Optional[int] = None,
) -> ModelHandle:
    cfg.validate()
    if role not in ROLES:
        raise ValueError(f"role must be one of {ROLES}")
    if organs is None:
        organs = tuple(range(1, cfg.num_classes))
    organs = tuple(int(o) for o in organs)
    if len(organs) != cfg.num_classes - 1:
        raise ValueError(f"{cfg.num_classes} classes need {cfg.num_classes - 1} organ indices, got {len(organs)}")
    if num_organs is None:
        num_organs = max(organs)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        net = ResUNet(cfg)
    return ModelHandle(net, cfg, role, dataset_index, organs, int(num_organs))


def as_batch(images) -> torch.Tensor:
    x = torch.as_tensor(np.asarray(images) if not torch.is_tensor(images) else images)
    if x.ndim == 2:
        x = x[None, None]
    elif x.ndim == 3:
        x = x[:, None]
    if x.ndim != 4 or x.shape[1] != 1:
        raise ValueError(f"expected (B, H, W) or (B, 1, H, W) images, got {tuple(x.shape)}")
    return x.float()


def forward(model: ModelHandle, images) -> SegmentationOutput:
    x = as_batch(images)
    if x.dtype != next(model.net.parameters()).dtype:
        x = x.to(next(model.net.parameters()).dtype)
    H, W = x.shape[-2:]
    m = 2**model.config.depth
    if H % m or W % m:
        raise ValueError(f"input {H}x{W} not divisible by 2**depth = {m}")
    logits, feat = model.net(x)
    return SegmentationOutput(torch.softmax(logits, dim=1), feat, logits)


def to_global(probabilities: torch.Tensor, organs: Sequence[int], num_organs: int) -> torch.Tensor:
    """Lay model-local channels out on the global ``0..K`` channel axis (zeros elsewhere)."""
    B, C, H, W = probabilities.shape
    if C == num_organs + 1 and tuple(organs) == tuple(range(1, num_organs + 1)):
        return probabilities
    out = probabilities.new_zeros((B, num_organs + 1, H, W))
    index = torch.tensor([0, *organs], dtype=torch.long, device=probabilities.device)
    return out.index_copy(1, index, probabilities)


def predict_labels(model: ModelHandle, images, batch_size: int = 32) -> tuple[np.ndarray, np.ndarray]:
    """Hard global-index labels and winning-probability confidence, eval mode, no grad."""
    lookup = np.array([0, *model.organs], dtype=np.uint8)
    labels, conf = [], []
    was_training = model.net.training
    model.net.eval()
    with torch.no_grad():
        for k in range(0, len(images), batch_size):
            out = forward(model, images[k : k + batch_size])
            c, idx = out.probabilities.max(dim=1)
            labels.append(lookup[idx.numpy()])
            conf.append(c.numpy().astype(np.float32))
    model.net.train(was_training)
    return np.concatenate(labels), np.concatenate(conf)


def extract_features(model: ModelHandle, images, batch_size: int = 32) -> np.ndarray:
    feats = []
    model.net.eval()
    with torch.no_grad():
        for k in range(0, len(images), batch_size):
            feats.append(forward(model, images[k : k + batch_size]).bottleneck.numpy())
    return np.concatenate(feats)


def _sidecar(path: Path) -> Path:
    return path.with_suffix(".json")


def save_model(model: ModelHandle, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(model.net.state_dict(), path)
    meta = {
        "version": __version__,
        "config": model.config.to_dict(),
        "role": model.role,
        "dataset_index": model.dataset_index,
        "organs": list(model.organs),
        "num_organs": model.num_organs,
        "seed": model.config.seed,
    }
    _sidecar(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_model(path, expect_num_classes: Optional[int] = None) -> ModelHandle:
    path = Path(path)
    try:
        meta = json.loads(_sidecar(path).read_text())
        cfg = BackboneConfig(**meta["config"])
    except (OSError, json.JSONDecodeError, KeyError, TypeError) as e:
        raise ModelFileError(f"cannot read checkpoint sidecar for {path}: {e}") from e
    if meta.get("version") != __version__:
        raise ModelFileError(f"checkpoint version {meta.get('version')} != package version {__version__}")
    if expect_num_classes is not None and cfg.num_classes != expect_num_classes:
        raise ModelFileError(f"checkpoint has {cfg.num_classes} classes, expected {expect_num_classes}")
    handle = init_model(cfg, meta["role"], meta["dataset_index"], meta["organs"], meta["num_organs"])
    try:
        state = torch.load(path, map_location="cpu", weights_only=True)
        handle.net.load_state_dict(state)
    except Exception as e:  # torch raises a zoo of types for truncated/garbled files
        raise ModelFileError(f"corrupted checkpoint {path}: {e}") from e
    return handle
