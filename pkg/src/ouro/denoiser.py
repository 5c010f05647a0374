"""Conditional encoder-decoder velocity predictor with token switching and a
pseudo-3D (video) mode."""

from __future__ import annotations

import copy
import math
import zlib
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from ouro.core import Caption, TaskToken
from ouro.diffusion import X_CONDITION_PLANES, ConfigurationError

LATENT_CHANNELS = 3
IMAGE_CONDITION_PLANES = 3


@dataclass(frozen=True)
class ModelConfig:
    direction: str = "rgb2x"
    base_width: int = 16
    depth: int = 3
    attention_at: tuple[int, ...] | None = None  # stage indices; default: deepest only
    embed_dim: int = 64
    heads: int = 4
    groups: int = 8
    caption_buckets: int = 256
    max_mult: int = 4

    def __post_init__(self):
        if self.direction not in ("rgb2x", "x2rgb"):
            raise ConfigurationError(f"unknown direction {self.direction!r}")
        if self.depth < 2:
            raise ConfigurationError("depth must be >= 2")
        attn = (self.depth,) if self.attention_at is None else tuple(sorted(set(self.attention_at)))
        if self.depth not in attn or any(not 0 <= s <= self.depth for s in attn):
            raise ConfigurationError("attention_at must include the deepest stage and stay within [0, depth]")
        object.__setattr__(self, "attention_at", attn)
        for i in range(self.depth + 1):
            if self.width(i) % self.groups:
                raise ConfigurationError(f"stage width {self.width(i)} not divisible by groups={self.groups}")

    @property
    def cond_channels(self) -> int:
        return IMAGE_CONDITION_PLANES if self.direction == "rgb2x" else X_CONDITION_PLANES

    @property
    def in_channels(self) -> int:
        return LATENT_CHANNELS + self.cond_channels

    def width(self, stage: int) -> int:
        return self.base_width * min(2 ** stage, self.max_mult)

    def to_json(self) -> dict:
        d = asdict(self)
        d["attention_at"] = list(self.attention_at)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["attention_at"] = tuple(d["attention_at"]) if d.get("attention_at") is not None else None
        return cls(**d)


# --- layers that work on B×C×H×W (image) and B×C×F×H×W (video) -------------

class PseudoConv(nn.Module):
    """k×k convolution whose kernel can be inflated to 1×k×k in place."""

    def __init__(self, cin: int, cout: int, k: int = 3, stride: int = 1):
        super().__init__()
        ref = nn.Conv2d(cin, cout, k, stride=stride, padding=k // 2)
        self.weight = nn.Parameter(ref.weight.detach().clone())
        self.bias = nn.Parameter(ref.bias.detach().clone())
        self.stride = stride
        self.pad = k // 2

    @property
    def inflated(self) -> bool:
        return self.weight.dim() == 5

    def inflate(self) -> None:
        if self.inflated:
            raise ConfigurationError("layer already inflated")
        self.weight = nn.Parameter(self.weight.detach().clone().unsqueeze(2))

    def forward(self, x):
        if self.inflated:
            return F.conv3d(x, self.weight, self.bias, stride=(1, self.stride, self.stride),
                            padding=(0, self.pad, self.pad))
        return F.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.pad)


def per_frame(fn, x):
    """Apply an image-space op to each frame of a video tensor."""
    if x.dim() == 4:
        return fn(x)
    b, c, f, h, w = x.shape
    y = fn(x.transpose(1, 2).reshape(b * f, c, h, w))
    return y.reshape(b, f, *y.shape[1:]).transpose(1, 2)


class Norm(nn.GroupNorm):
    def forward(self, x):
        return per_frame(super().forward, x)


def upsample2(x):
    scale = (2.0, 2.0) if x.dim() == 4 else (1.0, 2.0, 2.0)
    return F.interpolate(x, scale_factor=scale, mode="nearest")


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, groups: int):
        super().__init__()
        self.norm1 = Norm(groups, cin)
        self.conv1 = PseudoConv(cin, cout)
        self.norm2 = Norm(groups, cout)
        self.conv2 = PseudoConv(cout, cout)
        self.skip = PseudoConv(cin, cout, k=1) if cin != cout else None

    def forward(self, x):
        h = self.conv1(F.silu(self.norm1(x)))
        h = self.conv2(F.silu(self.norm2(h)))
        return h + (x if self.skip is None else self.skip(x))


class SelfAttention(nn.Module):
    """Multi-head self-attention over all spatial positions; in video mode the
    tokens of every frame are flattened into one joint sequence."""

    def __init__(self, ch: int, heads: int, groups: int):
        super().__init__()
        self.heads = heads
        self.norm = Norm(groups, ch)
        self.qkv = PseudoConv(ch, 3 * ch, k=1)
        self.proj = PseudoConv(ch, ch, k=1)

    def forward(self, x):
        b, c = x.shape[:2]
        spatial = x.shape[2:]
        qkv = self.qkv(self.norm(x)).reshape(b, 3, self.heads, c // self.heads, -1)
        q, k, v = qkv.unbind(1)  # b, heads, d, n
        scores = torch.einsum("bhdn,bhdm->bhnm", q, k) / math.sqrt(c // self.heads)
        out = torch.einsum("bhnm,bhdm->bhdn", scores.softmax(-1), v)
        return x + self.proj(out.reshape(b, c, *spatial))


class TokenEmbedding(nn.Module):
    """Task-token table (RGB->X) or hashed bag-of-words caption embedding (X->RGB)."""

    def __init__(self, direction: str, dim: int, buckets: int):
        super().__init__()
        self.direction = direction
        self.buckets = buckets
        if direction == "rgb2x":
            self.table = nn.Embedding(len(TaskToken), dim)
        else:
            self.table = nn.EmbeddingBag(buckets, dim, mode="mean")

    def task_indices(self, token, batch: int) -> torch.Tensor:
        if isinstance(token, torch.Tensor):
            idx = token.long().reshape(-1)
        else:
            items = token if isinstance(token, (list, tuple)) else [token]
            idx = torch.tensor([TaskToken.parse(t).index if isinstance(t, str) else TaskToken(t).index
                                for t in items], dtype=torch.long)
        if idx.numel() == 1 and batch > 1:
            idx = idx.expand(batch)
        if idx.numel() != batch:
            raise ConfigurationError(f"{idx.numel()} tokens for batch of {batch}")
        return idx

    def caption_bags(self, token, batch: int):
        items = list(token) if isinstance(token, (list, tuple)) else [token]
        if len(items) == 1 and batch > 1:
            items = items * batch
        if len(items) != batch:
            raise ConfigurationError(f"{len(items)} captions for batch of {batch}")
        flat, offsets = [], []
        for cap in items:
            offsets.append(len(flat))
            flat.extend(hash_words(str(cap), self.buckets))
        return torch.tensor(flat, dtype=torch.long), torch.tensor(offsets, dtype=torch.long)

    def forward(self, token, batch: int) -> torch.Tensor:
        if self.direction == "rgb2x":
            return self.table(self.task_indices(token, batch))
        return self.table(*self.caption_bags(token, batch))


def hash_words(text: str, buckets: int) -> list[int]:
    """Deterministic word hashing (crc32; Python's ``hash`` is salted per process)."""
    words = text.lower().replace(",", " ").split() or ["<empty>"]
    return [zlib.crc32(w.encode("utf-8")) % buckets for w in words]


class Denoiser(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.mode = "image"
        self.eval_count = 0
        cfg = config
        g = cfg.groups
        self.stem = PseudoConv(cfg.in_channels, cfg.width(0))
        self.down_blocks = nn.ModuleList()
        self.down_attn = nn.ModuleDict()
        self.downsamplers = nn.ModuleList()
        for i in range(cfg.depth):
            self.down_blocks.append(ResBlock(cfg.width(i), cfg.width(i), g))
            if i in cfg.attention_at:
                self.down_attn[str(i)] = SelfAttention(cfg.width(i), cfg.heads, g)
            self.downsamplers.append(PseudoConv(cfg.width(i), cfg.width(i + 1), stride=2))
        mid = cfg.width(cfg.depth)
        self.embed = TokenEmbedding(cfg.direction, cfg.embed_dim, cfg.caption_buckets)
        self.embed_proj = nn.Linear(cfg.embed_dim, mid)
        self.mid1 = ResBlock(mid, mid, g)
        self.mid_attn = SelfAttention(mid, cfg.heads, g)
        self.mid2 = ResBlock(mid, mid, g)
        self.upsamplers = nn.ModuleList()
        self.up_blocks = nn.ModuleList()
        self.up_attn = nn.ModuleDict()
        for i in reversed(range(cfg.depth)):
            self.upsamplers.append(PseudoConv(cfg.width(i + 1), cfg.width(i)))
            self.up_blocks.append(ResBlock(2 * cfg.width(i), cfg.width(i), g))
            if i in cfg.attention_at:
                self.up_attn[str(i)] = SelfAttention(cfg.width(i), cfg.heads, g)
        self.out_norm = Norm(g, cfg.width(0))
        self.out_conv = PseudoConv(cfg.width(0), LATENT_CHANNELS)

    def check_input(self, zT: torch.Tensor, cond: torch.Tensor) -> None:
        want = 4 if self.mode == "image" else 5
        if zT.dim() != want or cond.dim() != want:
            raise ConfigurationError(f"{self.mode}-mode model expects {want}-D inputs")
        if zT.shape[1] != LATENT_CHANNELS or cond.shape[1] != self.config.cond_channels:
            raise ConfigurationError(
                f"expected {LATENT_CHANNELS}+{self.config.cond_channels} input planes, "
                f"got {zT.shape[1]}+{cond.shape[1]}")
        if zT.shape[2:] != cond.shape[2:] or zT.shape[0] != cond.shape[0]:
            raise ConfigurationError(f"latent {tuple(zT.shape)} and condition {tuple(cond.shape)} disagree")
        h, w = zT.shape[-2:]
        step = 2 ** self.config.depth
        if h % step or w % step:
            raise ConfigurationError(f"resolution {h}×{w} not divisible by 2^depth={step}")

    def forward(self, zT, cond, token):
        if hasattr(cond, "planes"):
            cond = cond.planes
        self.check_input(zT, cond)
        self.eval_count += 1
        x = self.stem(torch.cat([zT, cond], dim=1))
        skips = []
        for i, (block, down) in enumerate(zip(self.down_blocks, self.downsamplers)):
            x = block(x)
            if str(i) in self.down_attn:
                x = self.down_attn[str(i)](x)
            skips.append(x)
            x = down(x)
        x = self.mid1(x)
        emb = self.embed_proj(self.embed(token, x.shape[0]))
        x = x + emb.reshape(emb.shape + (1,) * (x.dim() - 2))
        x = self.mid2(self.mid_attn(x))
        for j, (up, block) in enumerate(zip(self.upsamplers, self.up_blocks)):
            i = self.config.depth - 1 - j
            x = up(upsample2(x))
            x = block(torch.cat([x, skips.pop()], dim=1))
            if str(i) in self.up_attn:
                x = self.up_attn[str(i)](x)
        return self.out_conv(F.silu(self.out_norm(x)))


def build_model(cfg: ModelConfig, seed: int = 0) -> Denoiser:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return Denoiser(cfg)


def inflate_temporal(m: Denoiser) -> Denoiser:
    """Video-mode copy of ``m``: conv kernels gain a temporal axis of extent 1
    and attention runs jointly over frames and space."""
    if m.mode != "image":
        raise ConfigurationError("model is already inflated")
    video = copy.deepcopy(m)
    for layer in video.modules():
        if isinstance(layer, PseudoConv):
            layer.inflate()
    video.mode = "video"
    video.eval_count = 0
    return video


def param_count(m: nn.Module) -> int:
    return sum(p.numel() for p in m.parameters())


def token_for(direction: str, channel: str | None = None, caption: str | Caption | None = None):
    if direction == "rgb2x":
        return TaskToken.parse(channel)
    return str(caption) if caption is not None else "a photo"

