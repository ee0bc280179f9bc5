"""Classifier families.

(a) ``GuidanceClassifier``: noisy-image classifier p(y | x_t, t) whose encoder
    mirrors the denoiser's downsampling path; queried for ∇ log p during sampling.
(b) Downstream recognisers: residual / dense / plainconv / patch_transformer,
    each with a ``desk`` preset (< 1M parameters) and a ``paper`` preset
    (ResNet50 / DenseNet121 / VGG16 / ViT-B adapted to 1×32×32 input).

Every downstream model exposes two named layers: ``penultimate`` (feature
vector used for FID) and ``fc`` (the K-way head).
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Dict, Tuple

import numpy as np
import scipy.special
import torch
import torch.nn.functional as F
from joblib import Parallel, delayed
from torch import nn

from backbone import (
    BackboneConfig,
    Encoder,
    SEResBlock,
    TimeEmbedding,
    _as_batch,
    check_image,
    check_timesteps,
)
from config import IMAGE_SIZE
from errors import ClassOutOfRange, ShapeMismatch

FAMILIES = ("residual", "dense", "plainconv", "patch_transformer")
PRESETS = ("desk", "paper")
FULL_ARCHITECTURES = {
    "residual": "ResNet50",
    "dense": "DenseNet121",
    "plainconv": "VGG16",
    "patch_transformer": "ViT",
}


# ─── guidance classifier ─────────────────────────────────────────────
class GuidanceClassifier(nn.Module):
    """Encoder(x_t, MLP(sinusoidal(t))) → SE-ResBlock → pooled → K logits."""

    def __init__(self, config: BackboneConfig, zero_head: bool = True):
        super().__init__()
        self.config = cfg = config
        e = cfg.embedding_dim
        mid = cfg.widths[-1]
        self.time_embed = TimeEmbedding(e)
        self.encoder = Encoder(cfg)
        self.mid_block = SEResBlock(mid, mid, e, cfg.norm_groups, cfg.se_reduction, cfg.dropout)
        self.out_norm = nn.GroupNorm(cfg.norm_groups, mid)
        self.head = nn.Linear(mid, cfg.class_count)
        if zero_head:
            nn.init.zeros_(self.head.weight)
            nn.init.zeros_(self.head.bias)

    def forward(self, x: torch.Tensor, t) -> torch.Tensor:
        check_image(x, self.config.image_size)
        tb = _as_batch(t, x.shape[0], x.device)
        check_timesteps(tb, self.config.timesteps)
        cond = self.time_embed(tb, x.dtype)
        h, _ = self.encoder(x, cond)
        h = self.mid_block(h, cond)
        return self.head(F.silu(self.out_norm(h)).mean(dim=(-2, -1)))


def guidance_forward(model: GuidanceClassifier, x_t: torch.Tensor, t) -> torch.Tensor:
    """Logits for a single (1, S, S) image → (K,), or a batch → (B, K)."""
    single = x_t.ndim == 3
    logits = model(x_t[None] if single else x_t, t)
    return logits[0] if single else logits


def guidance_log_prob_grad(model: GuidanceClassifier, x_t: torch.Tensor, t, y) -> torch.Tensor:
    """∇_{x_t} log softmax(f(x_t, t))[y] by autograd; same shape as x_t."""
    single = x_t.ndim == 3
    x = x_t[None] if single else x_t
    yb = _as_batch(y, x.shape[0], x.device)
    k = model.config.class_count
    if yb.numel() and (int(yb.min()) < 0 or int(yb.max()) >= k):
        raise ClassOutOfRange(f"class outside [0, {k}): {yb.tolist()}")
    with torch.enable_grad():
        x = x.detach().requires_grad_(True)
        log_probs = F.log_softmax(model(x, t), dim=-1)
        selected = log_probs.gather(1, yb[:, None]).sum()
        (grad,) = torch.autograd.grad(selected, x)
    return grad[0] if single else grad


# ─── downstream specs ────────────────────────────────────────────────
@dataclass(frozen=True)
class DownstreamModelSpec:
    family: str
    class_count: int
    depth_preset: str = "desk"
    input_size: int = IMAGE_SIZE

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}; expected one of {FAMILIES}")
        if self.depth_preset not in PRESETS:
            raise ValueError(f"unknown preset {self.depth_preset!r}; expected one of {PRESETS}")
        if self.class_count < 2:
            raise ValueError(f"class_count must be ≥ 2, got {self.class_count}")

    @property
    def model_id(self) -> str:
        return f"{self.family}-{self.depth_preset}"

    def to_dict(self) -> Dict[str, object]:
        return asdict(self)


class DownstreamNet(nn.Module):
    """logits = fc(penultimate(body(x)))."""

    spec: DownstreamModelSpec
    penultimate: nn.Module
    fc: nn.Linear

    def body(self, x: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc(self.penultimate(self.body(x)))

    @property
    def feature_dim(self) -> int:
        return self.fc.in_features


def _pool() -> nn.Module:
    return nn.Sequential(nn.AdaptiveAvgPool2d(1), nn.Flatten())


# ─── residual ────────────────────────────────────────────────────────
class BasicBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_ch)
        self.shortcut = nn.Identity()
        if stride != 1 or in_ch != out_ch:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_ch, out_ch, 1, stride, bias=False), nn.BatchNorm2d(out_ch)
            )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = F.relu(self.bn1(self.conv1(x)))
        h = self.bn2(self.conv2(h))
        return F.relu(h + self.shortcut(x))


class DeskResNet(DownstreamNet):
    def __init__(self, class_count: int, widths=(16, 32, 64), blocks=2):
        super().__init__()
        self.stem = nn.Sequential(
            nn.Conv2d(1, widths[0], 3, 1, 1, bias=False), nn.BatchNorm2d(widths[0]), nn.ReLU()
        )
        layers, prev = [], widths[0]
        for i, w in enumerate(widths):
            for b in range(blocks):
                layers.append(BasicBlock(prev, w, 2 if (b == 0 and i > 0) else 1))
                prev = w
        self.layers = nn.Sequential(*layers)
        self.penultimate = _pool()
        self.fc = nn.Linear(prev, class_count)

    def body(self, x):
        return self.layers(self.stem(x))


# ─── dense ───────────────────────────────────────────────────────────
class DenseLayer(nn.Module):
    def __init__(self, in_ch: int, growth: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.BatchNorm2d(in_ch), nn.ReLU(), nn.Conv2d(in_ch, 4 * growth, 1, bias=False),
            nn.BatchNorm2d(4 * growth), nn.ReLU(), nn.Conv2d(4 * growth, growth, 3, 1, 1, bias=False),
        )

    def forward(self, x):
        return torch.cat([x, self.net(x)], dim=1)


class DeskDenseNet(DownstreamNet):
    def __init__(self, class_count: int, growth: int = 12, block_layers=(4, 4, 4), init_ch: int = 24):
        super().__init__()
        mods = [nn.Conv2d(1, init_ch, 3, 1, 1, bias=False)]
        ch = init_ch
        for i, n in enumerate(block_layers):
            for _ in range(n):
                mods.append(DenseLayer(ch, growth))
                ch += growth
            if i < len(block_layers) - 1:
                mods += [nn.BatchNorm2d(ch), nn.ReLU(), nn.Conv2d(ch, ch // 2, 1, bias=False), nn.AvgPool2d(2)]
                ch //= 2
        mods += [nn.BatchNorm2d(ch), nn.ReLU()]
        self.features = nn.Sequential(*mods)
        self.penultimate = _pool()
        self.fc = nn.Linear(ch, class_count)

    def body(self, x):
        return self.features(x)


# ─── plain convolutional (VGG-style) ─────────────────────────────────
class DeskVGG(DownstreamNet):
    LAYOUT = (32, 32, "M", 64, 64, "M", 128, 128, "M")

    def __init__(self, class_count: int, hidden: int = 256):
        super().__init__()
        mods, prev = [], 1
        for item in self.LAYOUT:
            if item == "M":
                mods.append(nn.MaxPool2d(2))
            else:
                mods += [nn.Conv2d(prev, item, 3, padding=1), nn.BatchNorm2d(item), nn.ReLU()]
                prev = item
        self.features = nn.Sequential(*mods)
        self.penultimate = nn.Sequential(
            nn.AdaptiveAvgPool2d(1), nn.Flatten(), nn.Linear(prev, hidden), nn.ReLU(), nn.Dropout(0.3)
        )
        self.fc = nn.Linear(hidden, class_count)

    def body(self, x):
        return self.features(x)


# ─── patch transformer (ViT) ─────────────────────────────────────────
class ClassTokenPool(nn.Module):
    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        return tokens[:, 0]


class PatchTransformer(DownstreamNet):
    def __init__(self, class_count: int, image_size: int = IMAGE_SIZE, patch: int = 4,
                 dim: int = 64, depth: int = 4, heads: int = 4, mlp_dim: int = 128,
                 dropout: float = 0.1):
        super().__init__()
        if image_size % patch:
            raise ShapeMismatch(f"image size {image_size} not divisible by patch {patch}")
        self.patch = patch
        self.dim = dim
        self.num_patches = (image_size // patch) ** 2
        self.patch_embed = nn.Conv2d(1, dim, patch, stride=patch)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, dim))
        self.pos_embed = nn.Parameter(torch.randn(1, self.num_patches + 1, dim) * 0.02)
        layer = nn.TransformerEncoderLayer(
            dim, heads, mlp_dim, dropout, activation="gelu", batch_first=True, norm_first=True
        )
        self.transformer = nn.TransformerEncoder(layer, depth, enable_nested_tensor=False)
        self.norm = nn.LayerNorm(dim)
        self.penultimate = ClassTokenPool()
        self.fc = nn.Linear(dim, class_count)

    def token_shape(self) -> Tuple[int, int]:
        """(patch tokens + class token, width)."""
        return self.num_patches + 1, self.dim

    def tokens(self, x: torch.Tensor) -> torch.Tensor:
        patches = self.patch_embed(x).flatten(2).transpose(1, 2)
        cls = self.cls_token.expand(x.shape[0], -1, -1)
        return torch.cat([cls, patches], dim=1) + self.pos_embed

    def body(self, x):
        return self.norm(self.transformer(self.tokens(x)))


# ─── full-size presets (torchvision) ─────────────────────────────────
class TorchvisionNet(DownstreamNet):
    """torchvision body with its head replaced by Identity; 1-channel stem."""

    def __init__(self, body: nn.Module, feature_dim: int, class_count: int):
        super().__init__()
        self.net = body
        self.penultimate = nn.Identity()
        self.fc = nn.Linear(feature_dim, class_count)

    def body(self, x):
        return self.net(x)


def _full_size_model(family: str, k: int, image_size: int) -> DownstreamNet:
    from torchvision import models

    if family == "residual":
        net = models.resnet50(weights=None)
        net.conv1 = nn.Conv2d(1, 64, 3, 1, 1, bias=False)
        net.maxpool = nn.Identity()
        net.fc = nn.Identity()
        return TorchvisionNet(net, 2048, k)
    if family == "dense":
        net = models.densenet121(weights=None)
        net.features.conv0 = nn.Conv2d(1, 64, 3, 1, 1, bias=False)
        net.features.pool0 = nn.Identity()
        net.classifier = nn.Identity()
        return TorchvisionNet(net, 1024, k)
    if family == "plainconv":
        net = models.vgg16(weights=None)
        net.features[0] = nn.Conv2d(1, 64, 3, padding=1)
        net.classifier[6] = nn.Identity()
        return TorchvisionNet(net, 4096, k)
    return PatchTransformer(k, image_size, patch=4, dim=768, depth=12, heads=12, mlp_dim=3072)


def build_downstream(spec: DownstreamModelSpec) -> DownstreamNet:
    k, size = spec.class_count, spec.input_size
    if spec.depth_preset == "paper":
        model = _full_size_model(spec.family, k, size)
    elif spec.family == "residual":
        model = DeskResNet(k)
    elif spec.family == "dense":
        model = DeskDenseNet(k)
    elif spec.family == "plainconv":
        model = DeskVGG(k)
    else:
        model = PatchTransformer(k, size)
    model.spec = spec
    return model


def token_shape(spec: DownstreamModelSpec) -> Tuple[int, int]:
    model = build_downstream(spec)
    if not isinstance(model, PatchTransformer):
        raise ValueError(f"{spec.family} has no token sequence")
    return model.token_shape()


# ─── inference helpers ───────────────────────────────────────────────
def downstream_forward(model: DownstreamNet, x: torch.Tensor) -> torch.Tensor:
    single = x.ndim == 3
    xb = x[None] if single else x
    check_image(xb, model.spec.input_size)
    logits = model(xb)
    return logits[0] if single else logits


def confidence_from_logits(logits):
    """softmax → (argmax with lowest-index ties, its probability, probabilities)."""
    z = np.asarray(logits.detach().cpu() if isinstance(logits, torch.Tensor) else logits,
                   dtype=np.float64)
    probs = scipy.special.softmax(z, axis=-1)
    pred = np.argmax(z, axis=-1)
    if probs.ndim == 1:
        return int(pred), float(probs[pred]), probs
    conf = np.take_along_axis(probs, pred[:, None], axis=1)[:, 0]
    return pred, conf, probs


def predict_confidence(model: DownstreamNet, x: torch.Tensor):
    with torch.no_grad():
        return confidence_from_logits(downstream_forward(model, x))


def _model_device(model: nn.Module) -> torch.device:
    p = next(model.parameters(), None)
    return p.device if p is not None else torch.device("cpu")


def predict_logits(model: nn.Module, images, batch_size: int = 256, n_jobs: int = 1) -> np.ndarray:
    """Eval-mode logits for an (N, 1, S, S) array, optionally sharded over threads."""
    model.eval()
    device = _model_device(model)
    dtype = next(model.parameters()).dtype
    images = torch.as_tensor(np.asarray(images))

    def _run(lo: int, hi: int) -> np.ndarray:
        with torch.no_grad():
            x = images[lo:hi].to(device=device, dtype=dtype)
            return model(x).double().cpu().numpy()

    bounds = [(i, min(i + batch_size, len(images))) for i in range(0, len(images), batch_size)]
    if not bounds:
        return np.zeros((0, model.fc.out_features if hasattr(model, "fc") else 0))
    parts = Parallel(n_jobs=n_jobs, prefer="threads")(delayed(_run)(lo, hi) for lo, hi in bounds)
    return np.concatenate(parts, axis=0)


def score_images(model: nn.Module, images, batch_size: int = 256, n_jobs: int = 1) -> np.ndarray:
    """(N, K) float64 softmax probabilities."""
    logits = predict_logits(model, images, batch_size, n_jobs)
    if len(logits) == 0:
        return logits
    _, _, probs = confidence_from_logits(logits)
    return probs
