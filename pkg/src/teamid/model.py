"""Embedding backbone: ResNet18-style stages, CBAM placement, Global Attention.

The head is convolution-only: the final feature map is globally averaged into
the embedding, with an optional 1x1 conv when the embedding width differs from
the last stage width. No fully-connected layer exists anywhere after the stem.
"""

from __future__ import annotations

import hashlib
import io
import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch
from torch import nn

CBAM_PLACEMENTS = ("none", "all", "first_block", "last_block")
STAGE_WIDTHS = (64, 128, 256, 512)


@dataclass
class AttentionConfig:
    cbam_placement: str = "none"
    ga_enabled: bool = False
    cbam_reduction: int = 16
    spatial_kernel: int = 7
    ga_width: int | None = None  # None: match stem width

    def cbam_stages(self) -> tuple[int, ...]:
        """Stage indices (0-based) that carry a CBAM module."""
        return {"none": (), "all": (0, 1, 2, 3),
                "first_block": (0,), "last_block": (3,)}[self.cbam_placement]

    def validate(self) -> None:
        if self.cbam_placement not in CBAM_PLACEMENTS:
            raise ValueError(f"unknown cbam_placement {self.cbam_placement!r}")
        for s in self.cbam_stages():
            if STAGE_WIDTHS[s] % self.cbam_reduction != 0:
                raise ValueError(
                    f"cbam_reduction {self.cbam_reduction} does not divide "
                    f"stage width {STAGE_WIDTHS[s]}")
        if self.spatial_kernel % 2 != 1:
            raise ValueError("spatial_kernel must be odd")


@dataclass
class ModelDescriptor:
    backbone: str = "resnet18"
    attention: AttentionConfig = field(default_factory=AttentionConfig)
    embedding_dim: int = 512
    input_resolution: int = 224
    parameter_count: int | None = None

    def validate(self) -> None:
        if self.backbone != "resnet18":
            raise ValueError(f"unsupported backbone {self.backbone!r}")
        self.attention.validate()

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ModelDescriptor":
        d = json.loads(text)
        d["attention"] = AttentionConfig(**d["attention"])
        return cls(**d)


class GlobalAttention(nn.Module):
    """Pooling-free attention on the stem conv output.

    mask = sigmoid(conv3x3(leaky_relu(conv3x3(x)))), applied element-wise.
    The leaky slope retains negative pre-activation weights; no pooling is
    performed anywhere in the module.
    """

    def __init__(self, channels: int, width: int | None = None,
                 negative_slope: float = 0.01):
        super().__init__()
        width = width if width is not None else channels
        self.channels = channels
        self.conv1 = nn.Conv2d(channels, width, 3, padding=1)
        self.conv2 = nn.Conv2d(width, channels, 3, padding=1)
        self.act = nn.LeakyReLU(negative_slope)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[1] != self.channels:
            raise ValueError(
                f"expected {self.channels} channels, got {x.shape[1]}")
        mask = torch.sigmoid(self.conv2(self.act(self.conv1(x))))
        return x * mask


class CBAM(nn.Module):
    """Channel-then-spatial attention (standard formulation)."""

    def __init__(self, channels: int, reduction: int = 16, spatial_kernel: int = 7):
        super().__init__()
        if channels % reduction != 0:
            raise ValueError(
                f"reduction {reduction} does not divide channels {channels}")
        self.channels = channels
        hidden = channels // reduction
        self.mlp = nn.Sequential(
            nn.Conv2d(channels, hidden, 1, bias=False),
            nn.ReLU(),
            nn.Conv2d(hidden, channels, 1, bias=False),
        )
        self.spatial = nn.Conv2d(2, 1, spatial_kernel,
                                 padding=spatial_kernel // 2, bias=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[1] != self.channels:
            raise ValueError(
                f"expected {self.channels} channels, got {x.shape[1]}")
        avg = x.mean(dim=(2, 3), keepdim=True)
        mx = x.amax(dim=(2, 3), keepdim=True)
        channel_mask = torch.sigmoid(self.mlp(avg) + self.mlp(mx))
        x = x * channel_mask
        spatial_in = torch.cat(
            [x.mean(dim=1, keepdim=True), x.amax(dim=1, keepdim=True)], dim=1)
        spatial_mask = torch.sigmoid(self.spatial(spatial_in))
        return x * spatial_mask


class BasicBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_ch)
        self.relu = nn.ReLU(inplace=True)
        if stride != 1 or in_ch != out_ch:
            self.downsample = nn.Sequential(
                nn.Conv2d(in_ch, out_ch, 1, stride=stride, bias=False),
                nn.BatchNorm2d(out_ch))
        else:
            self.downsample = None

    def forward(self, x):
        identity = x if self.downsample is None else self.downsample(x)
        out = self.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return self.relu(out + identity)


class EmbeddingModel(nn.Module):
    """ResNet18-style embedding network with configurable attention."""

    def __init__(self, descriptor: ModelDescriptor):
        super().__init__()
        descriptor.validate()
        att = descriptor.attention
        self.descriptor = descriptor
        self.stem_conv = nn.Conv2d(3, 64, 7, stride=2, padding=3, bias=False)
        self.ga = (GlobalAttention(64, att.ga_width)
                   if att.ga_enabled else None)
        self.stem_bn = nn.BatchNorm2d(64)
        self.stem_pool = nn.MaxPool2d(3, stride=2, padding=1)
        stages = []
        in_ch = 64
        for i, out_ch in enumerate(STAGE_WIDTHS):
            stride = 1 if i == 0 else 2
            stages.append(nn.Sequential(
                BasicBlock(in_ch, out_ch, stride), BasicBlock(out_ch, out_ch)))
            in_ch = out_ch
        self.stages = nn.ModuleList(stages)
        self.cbams = nn.ModuleDict({
            str(i): CBAM(STAGE_WIDTHS[i], att.cbam_reduction, att.spatial_kernel)
            for i in att.cbam_stages()})
        if descriptor.embedding_dim != STAGE_WIDTHS[-1]:
            self.head_conv = nn.Conv2d(
                STAGE_WIDTHS[-1], descriptor.embedding_dim, 1, bias=False)
        else:
            self.head_conv = None

    def forward(self, x: torch.Tensor, normalize: bool = False) -> torch.Tensor:
        if x.shape[-1] != self.descriptor.input_resolution:
            raise ValueError(
                f"expected resolution {self.descriptor.input_resolution}, "
                f"got {x.shape[-1]}")
        x = self.stem_conv(x)
        if self.ga is not None:
            x = self.ga(x)
        x = torch.relu(self.stem_bn(x))
        x = self.stem_pool(x)
        for i, stage in enumerate(self.stages):
            x = stage(x)
            if str(i) in self.cbams:
                x = self.cbams[str(i)](x)
        if self.head_conv is not None:
            x = self.head_conv(x)
        emb = x.mean(dim=(2, 3))
        if normalize:
            emb = nn.functional.normalize(emb, p=2, dim=1)
        return emb


def parameter_count(model: nn.Module) -> int:
    """Exact trainable parameter total, recomputed on every call."""
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def build_model(descriptor: ModelDescriptor, seed: int = 0) -> EmbeddingModel:
    """Construct the model with seeded He-style initialization."""
    descriptor.validate()
    torch.manual_seed(seed)
    model = EmbeddingModel(descriptor)
    for m in model.modules():
        if isinstance(m, nn.Conv2d):
            nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.BatchNorm2d):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)
    descriptor.parameter_count = parameter_count(model)
    return model


def samples_to_tensor(samples, resolution: int) -> torch.Tensor:
    """Stack samples into an NCHW float tensor; resolution must match."""
    if not samples:
        return torch.empty(0, 3, resolution, resolution)
    arrs = []
    for s in samples:
        img = s.image
        if img.shape[0] != resolution or img.shape[1] != resolution:
            raise ValueError(
                f"sample resolution {img.shape[:2]} != configured {resolution}")
        arrs.append(np.transpose(img, (2, 0, 1)))
    return torch.from_numpy(np.stack(arrs).astype(np.float32))


@torch.no_grad()
def embed(model: EmbeddingModel, samples, normalize: bool = True,
          batch_size: int = 64) -> np.ndarray:
    """Inference-mode embeddings for a list of samples, one row per sample."""
    model.eval()
    res = model.descriptor.input_resolution
    out = []
    for i in range(0, len(samples), batch_size):
        x = samples_to_tensor(samples[i:i + batch_size], res)
        out.append(model(x, normalize=normalize).numpy())
    if not out:
        return np.zeros((0, model.descriptor.embedding_dim), dtype=np.float32)
    return np.concatenate(out, axis=0)


def _state_hash(descriptor_json: str, state: dict[str, torch.Tensor]) -> str:
    h = hashlib.sha256()
    h.update(descriptor_json.encode())
    for name in sorted(state):
        h.update(name.encode())
        h.update(state[name].numpy().tobytes())
    return h.hexdigest()


def save_checkpoint(model: EmbeddingModel, path: str | Path) -> str:
    """Write descriptor, flat tensor table, and content hash to one file.

    Returns the content hash.
    """
    path = Path(path)
    state = {k: v.detach().cpu() for k, v in model.state_dict().items()}
    desc_json = model.descriptor.to_json()
    digest = _state_hash(desc_json, state)
    arrays = {f"tensor/{k}": v.numpy() for k, v in state.items()}
    buf = io.BytesIO()
    np.savez(buf, __descriptor__=np.array(desc_json),
             __hash__=np.array(digest), **arrays)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(buf.getvalue())
    return digest


def load_checkpoint(path: str | Path) -> tuple[EmbeddingModel, str]:
    """Rebuild a model from a checkpoint; rejects hash or key mismatches."""
    with np.load(Path(path), allow_pickle=False) as z:
        desc_json = str(z["__descriptor__"])
        stored_hash = str(z["__hash__"])
        state = {k[len("tensor/"):]: torch.from_numpy(z[k].copy())
                 for k in z.files if k.startswith("tensor/")}
    descriptor = ModelDescriptor.from_json(desc_json)
    if _state_hash(desc_json, state) != stored_hash:
        raise ValueError(f"checkpoint {path} content hash mismatch")
    model = EmbeddingModel(descriptor)
    expected = set(model.state_dict())
    if expected != set(state):
        missing = sorted(expected - set(state))[:3]
        extra = sorted(set(state) - expected)[:3]
        raise ValueError(
            f"checkpoint tensors do not match descriptor "
            f"(missing {missing}, unexpected {extra})")
    model.load_state_dict(state)
    descriptor.parameter_count = parameter_count(model)
    model.eval()
    return model, stored_hash


def checkpoint_hash(path: str | Path) -> str:
    with np.load(Path(path), allow_pickle=False) as z:
        return str(z["__hash__"])
