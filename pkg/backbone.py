"""SE-enhanced U-Net denoiser ε_θ(x_t, t, y).

Layout for the default 32×32 config (3 levels, widths 64/128/256):

    stem ─ level0 (32²) ─ down ─ level1 (16², linear attn) ─ down ─ level2 (8², linear attn)
          └─ bottleneck: SE-ResBlock → multi-head self-attention → SE-ResBlock
    level2′ ← concat skip ─ up ─ level1′ ← concat skip ─ up ─ level0′ ← concat skip ─ out conv

Conditioning vector = MLP(sinusoidal(t)) + class embedding (zero when y is None);
it is added as a per-channel bias inside every SE-ResBlock.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Tuple

import torch
import torch.nn.functional as F
from einops import rearrange
from torch import nn

from config import (
    ATTENTION_HEADS,
    BASE_CHANNELS,
    BLOCKS_PER_LEVEL,
    CHANNEL_MULTIPLIERS,
    DROPOUT,
    IMAGE_SIZE,
    SE_REDUCTION,
    TIMESTEPS,
)
from errors import (
    ClassOutOfRange,
    OddDimension,
    ShapeMismatch,
    TimestepOutOfRange,
)

LINEAR_ATTENTION_VARIANT = "softmax_qk"   # keys softmaxed over positions, queries over features


@dataclass
class BackboneConfig:
    class_count: int
    image_size: int = IMAGE_SIZE
    timesteps: int = TIMESTEPS
    base_channels: int = BASE_CHANNELS
    channel_multipliers: Tuple[int, ...] = tuple(CHANNEL_MULTIPLIERS)
    blocks_per_level: int = BLOCKS_PER_LEVEL
    embedding_dim: Optional[int] = None
    se_reduction: int = SE_REDUCTION
    attention_heads: int = ATTENTION_HEADS
    dropout: float = DROPOUT
    attention_levels: Tuple[int, ...] = (1, 2)
    norm_groups: int = 8
    linear_attention_variant: str = field(default=LINEAR_ATTENTION_VARIANT)

    def __post_init__(self):
        self.channel_multipliers = tuple(int(m) for m in self.channel_multipliers)
        self.attention_levels = tuple(int(a) for a in self.attention_levels)
        if self.embedding_dim is None:
            self.embedding_dim = 4 * self.base_channels
        self.validate()

    @property
    def levels(self) -> int:
        return len(self.channel_multipliers)

    @property
    def widths(self) -> List[int]:
        return [self.base_channels * m for m in self.channel_multipliers]

    def validate(self) -> None:
        if self.class_count < 1:
            raise ValueError(f"class_count must be ≥ 1, got {self.class_count}")
        if self.levels < 1:
            raise ValueError("channel_multipliers must not be empty")
        if self.image_size % (2 ** (self.levels - 1)):
            raise ValueError(
                f"image_size {self.image_size} not divisible by 2^{self.levels - 1}"
            )
        if self.embedding_dim % 2:
            raise OddDimension(f"embedding_dim must be even, got {self.embedding_dim}")
        if self.base_channels % self.se_reduction:
            raise ValueError(
                f"se_reduction {self.se_reduction} must divide base_channels {self.base_channels}"
            )
        for w in self.widths:
            if w % self.norm_groups:
                raise ValueError(f"width {w} not divisible by norm_groups {self.norm_groups}")
            if w % self.attention_heads:
                raise ValueError(f"width {w} not divisible by attention_heads {self.attention_heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")
        bad = [a for a in self.attention_levels if not 0 <= a < self.levels]
        if bad:
            raise ValueError(f"attention_levels {bad} outside [0, {self.levels})")

    def to_dict(self) -> Dict[str, object]:
        d = asdict(self)
        d["channel_multipliers"] = list(self.channel_multipliers)
        d["attention_levels"] = list(self.attention_levels)
        return d

    @classmethod
    def from_dict(cls, d: Dict[str, object]) -> "BackboneConfig":
        return cls(**d)


# ─── embeddings / gates ──────────────────────────────────────────────
def sinusoidal_embedding(t, dim: int, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """[sin(t·ω_i)…, cos(t·ω_i)…] with ω_i = 10000^(−2i/dim); shape (dim,) or (B, dim)."""
    if dim < 2 or dim % 2:
        raise OddDimension(f"embedding dim must be even and ≥ 2, got {dim}")
    device = t.device if isinstance(t, torch.Tensor) else None
    tt = torch.as_tensor(t, dtype=torch.float64, device=device)
    if bool((tt < 0).any()):
        raise TimestepOutOfRange(f"negative timestep {tt.tolist()}")
    half = dim // 2
    freqs = 10000.0 ** (-2.0 * torch.arange(half, dtype=torch.float64, device=tt.device) / dim)
    args = tt[..., None] * freqs
    return torch.cat([args.sin(), args.cos()], dim=-1).to(dtype)


def se_gate(
    features: torch.Tensor,
    w1: torch.Tensor,
    b1: torch.Tensor,
    w2: torch.Tensor,
    b2: torch.Tensor,
) -> torch.Tensor:
    """s = sigmoid(W₂·relu(W₁·GAP(x) + b₁) + b₂);  out[c] = s[c]·x[c]."""
    c = features.shape[-3]
    if w1.shape[-1] != c or w2.shape[0] != c or w2.shape[-1] != w1.shape[0]:
        raise ShapeMismatch(
            f"gate weights {tuple(w1.shape)}, {tuple(w2.shape)} do not fit {c} channels"
        )
    pooled = features.mean(dim=(-2, -1))
    s = torch.sigmoid(F.linear(F.relu(F.linear(pooled, w1, b1)), w2, b2))
    return features * s[..., None, None]


class SEGate(nn.Module):
    def __init__(self, channels: int, reduction: int):
        super().__init__()
        if channels % reduction:
            raise ShapeMismatch(f"{channels} channels not divisible by reduction {reduction}")
        self.fc1 = nn.Linear(channels, channels // reduction)
        self.fc2 = nn.Linear(channels // reduction, channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return se_gate(x, self.fc1.weight, self.fc1.bias, self.fc2.weight, self.fc2.bias)


class SEResBlock(nn.Module):
    """norm→SiLU→conv, + cond bias, norm→SiLU→dropout→conv, SE gate, + skip."""

    def __init__(self, in_ch: int, out_ch: int, emb_dim: int, groups: int = 8,
                 reduction: int = SE_REDUCTION, dropout: float = 0.0):
        super().__init__()
        self.emb_dim = emb_dim
        self.norm1 = nn.GroupNorm(groups, in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.cond_proj = nn.Linear(emb_dim, out_ch)
        self.norm2 = nn.GroupNorm(groups, out_ch)
        self.dropout = nn.Dropout(dropout)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.se = SEGate(out_ch, reduction)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        if cond.shape[-1] != self.emb_dim:
            raise ShapeMismatch(f"cond length {cond.shape[-1]} != embedding_dim {self.emb_dim}")
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.cond_proj(F.silu(cond))[..., None, None]
        h = self.conv2(self.dropout(F.silu(self.norm2(h))))
        return self.se(h) + self.skip(x)


# ─── attention ───────────────────────────────────────────────────────
class LinearAttention(nn.Module):
    """Efficient attention: cost linear in H·W via the per-head kᵀv context."""

    def __init__(self, channels: int, heads: int = ATTENTION_HEADS, groups: int = 8):
        super().__init__()
        if channels % heads:
            raise ShapeMismatch(f"{channels} channels not divisible by {heads} heads")
        self.heads = heads
        self.scale = (channels // heads) ** -0.5
        self.norm = nn.GroupNorm(groups, channels)
        self.to_qkv = nn.Conv2d(channels, channels * 3, 1, bias=False)
        self.to_out = nn.Conv2d(channels, channels, 1)

    def attend(self, x: torch.Tensor) -> torch.Tensor:
        """Attention output before the output projection, shape (B, C, H, W)."""
        _, _, h, w = x.shape
        qkv = self.to_qkv(self.norm(x)).chunk(3, dim=1)
        q, k, v = (rearrange(t, "b (h d) x y -> b h d (x y)", h=self.heads) for t in qkv)
        q = q.softmax(dim=-2) * self.scale
        k = k.softmax(dim=-1)
        context = torch.einsum("b h d n, b h e n -> b h d e", k, v)
        out = torch.einsum("b h d e, b h d n -> b h e n", context, q)
        return rearrange(out, "b h e (x y) -> b (h e) x y", x=h, y=w)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.to_out(self.attend(x))


class BottleneckAttention(nn.Module):
    """Full multi-head self-attention over flattened spatial positions."""

    def __init__(self, channels: int, heads: int = ATTENTION_HEADS, groups: int = 8):
        super().__init__()
        if channels % heads:
            raise ShapeMismatch(f"{channels} channels not divisible by {heads} heads")
        self.heads = heads
        self.scale = (channels // heads) ** -0.5
        self.norm = nn.GroupNorm(groups, channels)
        self.to_qkv = nn.Conv2d(channels, channels * 3, 1, bias=False)
        self.to_out = nn.Conv2d(channels, channels, 1)

    def _qkv(self, x: torch.Tensor):
        qkv = self.to_qkv(self.norm(x)).chunk(3, dim=1)
        return (rearrange(t, "b (h d) x y -> b h (x y) d", h=self.heads) for t in qkv)

    def attention_weights(self, x: torch.Tensor) -> torch.Tensor:
        """(B, heads, N, N); every row sums to 1."""
        q, k, _ = self._qkv(x)
        sim = torch.einsum("b h i d, b h j d -> b h i j", q, k) * self.scale
        return sim.softmax(dim=-1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        _, _, h, w = x.shape
        q, k, v = self._qkv(x)
        attn = (torch.einsum("b h i d, b h j d -> b h i j", q, k) * self.scale).softmax(dim=-1)
        out = torch.einsum("b h i j, b h j d -> b h i d", attn, v)
        out = rearrange(out, "b h (x y) d -> b (h d) x y", x=h, y=w)
        return x + self.to_out(out)


class Downsample(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, stride=2, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.conv(x)


class Upsample(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.conv(F.interpolate(x, scale_factor=2, mode="nearest"))


# ─── shared pieces ───────────────────────────────────────────────────
class TimeEmbedding(nn.Module):
    """sinusoidal(t) → Linear → SiLU → Linear."""

    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim
        self.mlp = nn.Sequential(nn.Linear(dim, dim), nn.SiLU(), nn.Linear(dim, dim))

    def forward(self, t: torch.Tensor, dtype: torch.dtype) -> torch.Tensor:
        return self.mlp(sinusoidal_embedding(t, self.dim, dtype))


class Encoder(nn.Module):
    """Stem + downsampling path; returns the deepest features and one skip per level."""

    def __init__(self, config: BackboneConfig):
        super().__init__()
        cfg = config
        widths = cfg.widths
        self.stem = nn.Conv2d(1, widths[0], 3, padding=1)
        self.levels = nn.ModuleList()
        prev = widths[0]
        for i, ch in enumerate(widths):
            blocks = nn.ModuleList()
            for _ in range(cfg.blocks_per_level):
                blocks.append(SEResBlock(prev, ch, cfg.embedding_dim, cfg.norm_groups,
                                         cfg.se_reduction, cfg.dropout))
                prev = ch
            self.levels.append(nn.ModuleDict({
                "blocks": blocks,
                "attn": (LinearAttention(ch, cfg.attention_heads, cfg.norm_groups)
                         if i in cfg.attention_levels else nn.Identity()),
                "down": Downsample(ch) if i < cfg.levels - 1 else nn.Identity(),
            }))

    def forward(self, x: torch.Tensor, cond: torch.Tensor):
        h = self.stem(x)
        skips = []
        for level in self.levels:
            for block in level["blocks"]:
                h = block(h, cond)
            h = level["attn"](h)
            skips.append(h)
            h = level["down"](h)
        return h, skips


def _as_batch(t, batch: int, device) -> torch.Tensor:
    if isinstance(t, torch.Tensor) and t.ndim > 0:
        if t.shape[0] != batch:
            raise ShapeMismatch(f"{t.shape[0]} timesteps for a batch of {batch}")
        return t.to(device).long()
    return torch.full((batch,), int(t), dtype=torch.long, device=device)


def check_timesteps(t: torch.Tensor, timesteps: int) -> None:
    if t.numel() and (int(t.min()) < 0 or int(t.max()) >= timesteps):
        raise TimestepOutOfRange(f"timestep outside [0, {timesteps}): {t.tolist()}")


def check_image(x: torch.Tensor, image_size: int) -> None:
    if x.ndim != 4 or x.shape[1] != 1 or x.shape[-2:] != (image_size, image_size):
        raise ShapeMismatch(
            f"expected (B, 1, {image_size}, {image_size}), got {tuple(x.shape)}"
        )


# ─── the denoiser ────────────────────────────────────────────────────
class SEUNet(nn.Module):
    def __init__(self, config: BackboneConfig):
        super().__init__()
        self.config = cfg = config
        widths = cfg.widths
        e = cfg.embedding_dim
        self.time_embed = TimeEmbedding(e)
        self.class_embed = nn.Embedding(cfg.class_count, e)
        self.encoder = Encoder(cfg)

        mid = widths[-1]
        self.mid_block1 = SEResBlock(mid, mid, e, cfg.norm_groups, cfg.se_reduction, cfg.dropout)
        self.mid_attn = BottleneckAttention(mid, cfg.attention_heads, cfg.norm_groups)
        self.mid_block2 = SEResBlock(mid, mid, e, cfg.norm_groups, cfg.se_reduction, cfg.dropout)

        self.decoder = nn.ModuleList()
        prev = mid
        for i in reversed(range(cfg.levels)):
            ch = widths[i]
            blocks = nn.ModuleList()
            in_ch = prev + ch
            for _ in range(cfg.blocks_per_level):
                blocks.append(SEResBlock(in_ch, ch, e, cfg.norm_groups, cfg.se_reduction, cfg.dropout))
                in_ch = ch
            self.decoder.append(nn.ModuleDict({
                "blocks": blocks,
                "attn": (LinearAttention(ch, cfg.attention_heads, cfg.norm_groups)
                         if i in cfg.attention_levels else nn.Identity()),
                "up": Upsample(ch) if i > 0 else nn.Identity(),
            }))
            prev = ch

        self.out_norm = nn.GroupNorm(cfg.norm_groups, widths[0])
        self.out_conv = nn.Conv2d(widths[0], 1, 3, padding=1)

    def condition(self, t: torch.Tensor, y, dtype: torch.dtype) -> torch.Tensor:
        cond = self.time_embed(t, dtype)
        if y is not None:
            cond = cond + self.class_embed(y)
        return cond

    def forward(self, x: torch.Tensor, t, y=None) -> torch.Tensor:
        cfg = self.config
        check_image(x, cfg.image_size)
        tb = _as_batch(t, x.shape[0], x.device)
        check_timesteps(tb, cfg.timesteps)
        yb = None
        if y is not None:
            yb = _as_batch(y, x.shape[0], x.device)
            if yb.numel() and (int(yb.min()) < 0 or int(yb.max()) >= cfg.class_count):
                raise ClassOutOfRange(f"class outside [0, {cfg.class_count}): {yb.tolist()}")

        cond = self.condition(tb, yb, x.dtype)
        h, skips = self.encoder(x, cond)
        h = self.mid_block2(self.mid_attn(self.mid_block1(h, cond)), cond)
        for level in self.decoder:
            h = torch.cat([h, skips.pop()], dim=1)
            for block in level["blocks"]:
                h = block(h, cond)
            h = level["attn"](h)
            h = level["up"](h)
        return self.out_conv(F.silu(self.out_norm(h)))


def denoiser_forward(model: SEUNet, x_t: torch.Tensor, t, y=None) -> torch.Tensor:
    """ε̂ = ε_θ(x_t, t, y); accepts a single (1, S, S) image or a (B, 1, S, S) batch."""
    single = x_t.ndim == 3
    out = model(x_t[None] if single else x_t, t, y)
    return out[0] if single else out


def parameter_count(config: BackboneConfig) -> int:
    return sum(p.numel() for p in SEUNet(config).parameters())


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())

