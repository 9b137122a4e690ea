"""Small deformable-attention detection transformer for bubble patches.

Shapes use B for batch, Nq for queries, D for model width, M heads, L levels,
K sampling points per head and level.
"""

from __future__ import annotations

import functools
import math
from dataclasses import asdict, dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from .numerics import DTYPE, bilinear_corners, linear, softmax, weighted_gather


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class DetectorConfig:
    input_size: tuple[int, int] = (64, 64)
    d_model: int = 64
    heads: int = 4
    points: int = 4
    levels: int = 2
    encoder_layers: int = 2
    decoder_layers: int = 2
    queries: int = 25
    ffn_dim: int = 128
    stride_exponent: int = 2
    backbone_channels: tuple[int, int] = (16, 32)
    norm_groups: int = 4

    def level_shapes(self) -> list[tuple[int, int]]:
        h, w = self.input_size
        s = self.stride_exponent
        return [(h >> (s + l), w >> (s + l)) for l in range(self.levels)]

    def validate(self) -> None:
        h, w = self.input_size
        div = 2 ** (self.stride_exponent + self.levels - 1)
        if h % div or w % div or h <= 0 or w <= 0:
            raise ConfigurationError(f"input {h}x{w} must be divisible by {div}")
        if self.levels < 2:
            raise ConfigurationError("need at least two feature levels")
        if self.stride_exponent < 1:
            raise ConfigurationError("stride_exponent must be >= 1")
        if self.d_model % self.heads or (self.d_model // self.heads) % 2:
            raise ConfigurationError("d_model must split into heads of even width")
        if self.d_model % 4:
            raise ConfigurationError("d_model must be a multiple of 4 for the positional encoding")
        for c in (*self.backbone_channels, self.d_model):
            if c % self.norm_groups:
                raise ConfigurationError(f"channel count {c} not divisible by {self.norm_groups} norm groups")
        budget = self.heads * self.levels * self.points
        smallest = min(hh * ww for hh, ww in self.level_shapes())
        if budget >= smallest:
            raise ConfigurationError(
                f"sampling budget M*L*K={budget} must stay below the smallest level's {smallest} pixels")
        if self.queries < 1 or self.encoder_layers < 0 or self.decoder_layers < 1:
            raise ConfigurationError("need >= 1 query, >= 0 encoder layers and >= 1 decoder layer")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_size"] = list(self.input_size)
        d["backbone_channels"] = list(self.backbone_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DetectorConfig":
        d = dict(d)
        for key in ("input_size", "backbone_channels"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class DetectionSet:
    """Per-query class probabilities ``[Nq, 2]`` (bubble, no-object) and boxes ``[Nq, 4]`` (cx, cy, w, h)."""

    probs: torch.Tensor
    boxes: torch.Tensor

    @property
    def scores(self) -> torch.Tensor:
        return self.probs[..., 0]


class Linear(nn.Module):
    """Affine map with the weight stored as ``[Din, Dout]``."""

    def __init__(self, d_in: int, d_out: int):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(d_in, d_out, dtype=DTYPE))
        self.bias = nn.Parameter(torch.zeros(d_out, dtype=DTYPE))
        bound = 1.0 / math.sqrt(d_in)
        nn.init.uniform_(self.weight, -bound, bound)

    def xavier_(self) -> "Linear":
        nn.init.xavier_uniform_(self.weight)
        nn.init.zeros_(self.bias)
        return self

    def forward(self, x):
        return linear(x, self.weight, self.bias)


class ConvNorm(nn.Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, stride: int, groups: int, relu: bool = True):
        super().__init__()
        self.conv = nn.Conv2d(c_in, c_out, kernel, stride=stride, padding=kernel // 2, dtype=DTYPE)
        self.norm = nn.GroupNorm(groups, c_out, dtype=DTYPE)
        self.relu = relu

    def forward(self, x):
        x = self.norm(self.conv(x))
        return F.relu(x) if self.relu else x


class Backbone(nn.Module):
    """Three convolution stages; taps after stages 2 and 3, extra levels by stride-2 convs."""

    def __init__(self, cfg: DetectorConfig):
        super().__init__()
        c1, c2 = cfg.backbone_channels
        d, g = cfg.d_model, cfg.norm_groups
        self.cfg = cfg
        self.stage1 = ConvNorm(1, c1, 3, 2 ** (cfg.stride_exponent - 1), g)
        self.stage2 = ConvNorm(c1, c2, 3, 2, g)
        self.stage3 = ConvNorm(c2, d, 3, 2, g)
        self.proj = nn.ModuleList([ConvNorm(c2, d, 1, 1, g, relu=False), ConvNorm(d, d, 1, 1, g, relu=False)])
        self.extra = nn.ModuleList([ConvNorm(d, d, 3, 2, g, relu=False) for _ in range(cfg.levels - 2)])

    def forward(self, image: torch.Tensor) -> list[torch.Tensor]:
        """``image [B, 1, H, W]`` -> L maps ``[B, D, H_l, W_l]``."""
        h, w = image.shape[-2:]
        div = 2 ** (self.cfg.stride_exponent + self.cfg.levels - 1)
        if h % div or w % div:
            raise ConfigurationError(f"input {h}x{w} must be divisible by {div}")
        x1 = self.stage1(image)
        x2 = self.stage2(x1)
        x3 = self.stage3(x2)
        levels = [self.proj[0](x2), self.proj[1](x3)]
        for conv in self.extra:
            levels.append(conv(levels[-1]))
        return levels


@functools.lru_cache(maxsize=64)
def sine_position(h: int, w: int, d: int, temperature: float = 10000.0) -> torch.Tensor:
    """Fixed 2-D sinusoidal encoding ``[H*W, D]``: first half encodes y, second half x.

    Cached; callers must not modify the returned tensor.
    """
    half = d // 2
    ys = (torch.arange(h, dtype=DTYPE) + 0.5) / h * 2 * math.pi
    xs = (torch.arange(w, dtype=DTYPE) + 0.5) / w * 2 * math.pi
    dim_t = temperature ** (2 * (torch.arange(half, dtype=DTYPE) // 2) / half)
    py = ys[:, None] / dim_t
    px = xs[:, None] / dim_t
    py = torch.stack([py[:, 0::2].sin(), py[:, 1::2].cos()], dim=2).flatten(1)
    px = torch.stack([px[:, 0::2].sin(), px[:, 1::2].cos()], dim=2).flatten(1)
    pos = torch.cat([py[:, None, :].expand(h, w, half), px[None, :, :].expand(h, w, half)], dim=2)
    return pos.reshape(h * w, d)


def pixel_reference_points(shapes: list[tuple[int, int]]) -> torch.Tensor:
    """Normalized ``(x, y)`` centers of every pixel of every level, ``[sum H_l W_l, 2]``."""
    refs = []
    for h, w in shapes:
        ys, xs = torch.meshgrid((torch.arange(h, dtype=DTYPE) + 0.5) / h,
                                (torch.arange(w, dtype=DTYPE) + 0.5) / w, indexing="ij")
        refs.append(torch.stack([xs.reshape(-1), ys.reshape(-1)], dim=1))
    return torch.cat(refs, dim=0)


class DeformableAttention(nn.Module):
    """Each query reads M*L*K bilinear samples placed around its reference point.

    Offsets and attention weights are affine in the query; weights are
    normalized jointly over the L*K points of each head.
    """

    def __init__(self, d_model: int, heads: int, levels: int, points: int):
        super().__init__()
        self.d_model, self.heads, self.levels, self.points = d_model, heads, levels, points
        self.head_dim = d_model // heads
        self.offsets = Linear(d_model, heads * levels * points * 2)
        self.weights = Linear(d_model, heads * levels * points)
        self.value_proj = Linear(d_model, d_model).xavier_()
        self.output_proj = Linear(d_model, d_model).xavier_()
        self._init_offsets()

    @torch.no_grad()
    def _init_offsets(self) -> None:
        nn.init.zeros_(self.offsets.weight)
        angles = torch.arange(self.heads, dtype=DTYPE) * (2 * math.pi / self.heads)
        grid = torch.stack([angles.cos(), angles.sin()], dim=-1)
        grid = grid / grid.abs().max(dim=-1, keepdim=True).values
        grid = grid.view(self.heads, 1, 1, 2).repeat(1, self.levels, self.points, 1)
        for k in range(self.points):
            grid[:, :, k, :] *= k + 1
        self.offsets.bias.copy_(grid.flatten())
        nn.init.zeros_(self.weights.weight)
        nn.init.zeros_(self.weights.bias)

    def sampling_locations(self, query: torch.Tensor, ref: torch.Tensor, shapes) -> list[torch.Tensor]:
        """Per level, pixel-index sample positions ``[B, Nq, M, K, 2]``."""
        b, nq, _ = query.shape
        off = self.offsets(query).view(b, nq, self.heads, self.levels, self.points, 2)
        locs = []
        for l, (h, w) in enumerate(shapes):
            scale = torch.tensor([w, h], dtype=query.dtype)
            base = ref * scale - 0.5  # normalized -> pixel index of the level
            locs.append(base[:, :, None, None, :] + off[:, :, :, l])
        return locs

    def attention_weights(self, query: torch.Tensor) -> torch.Tensor:
        b, nq, _ = query.shape
        a = self.weights(query).view(b, nq, self.heads, self.levels * self.points)
        return softmax(a, axis=-1).view(b, nq, self.heads, self.levels, self.points)

    def forward(self, query: torch.Tensor, ref: torch.Tensor, memory: torch.Tensor,
                shapes: list[tuple[int, int]]) -> torch.Tensor:
        """query ``[B, Nq, D]``, ref ``[B, Nq, 2]`` normalized (x, y), memory ``[B, sum HW, D]``."""
        b, nq, _ = query.shape
        m, dh = self.heads, self.head_dim
        if len(shapes) != self.levels:
            raise ConfigurationError(f"expected {self.levels} levels, got {len(shapes)}")
        budget = m * self.levels * self.points
        if budget >= min(h * w for h, w in shapes):
            raise ConfigurationError(f"sampling budget {budget} not below smallest level size")
        value = self.value_proj(memory)
        locs = self.sampling_locations(query, ref, shapes)
        attn = self.attention_weights(query)
        # gather every (level, point, corner) for a (query, head) at once and
        # contract with attention * bilinear weights in one batched matmul
        idx, wts, start = [], [], 0
        for l, (h, w) in enumerate(shapes):
            i, cw = bilinear_corners(locs[l], h, w)  # [B, Nq, M, K, 4]
            idx.append(i + start)
            wts.append(cw * attn[:, :, :, l, :, None])
            start += h * w
        idx = torch.cat(idx, dim=3).permute(0, 2, 1, 3, 4).reshape(b * m, -1)
        idx = (idx + torch.arange(b * m).unsqueeze(1) * start).reshape(b * m * nq, -1)
        wts = torch.cat(wts, dim=3).permute(0, 2, 1, 3, 4).reshape(b * m * nq, -1)
        v = value.view(b, start, m, dh).permute(0, 2, 1, 3).reshape(b * m * start, dh)
        out = weighted_gather(v, idx, wts).view(b, m, nq, dh)
        out = out.permute(0, 2, 1, 3).reshape(b, nq, m * dh)
        return self.output_proj(out)


class FeedForward(nn.Module):
    def __init__(self, d_model: int, hidden: int):
        super().__init__()
        self.fc1 = Linear(d_model, hidden)
        self.fc2 = Linear(hidden, d_model)

    def forward(self, x):
        return self.fc2(F.relu(self.fc1(x)))


class LayerNorm(nn.LayerNorm):
    def __init__(self, d: int):
        super().__init__(d, dtype=DTYPE)


class EncoderLayer(nn.Module):
    def __init__(self, cfg: DetectorConfig):
        super().__init__()
        self.attn = DeformableAttention(cfg.d_model, cfg.heads, cfg.levels, cfg.points)
        self.norm1 = LayerNorm(cfg.d_model)
        self.ffn = FeedForward(cfg.d_model, cfg.ffn_dim)
        self.norm2 = LayerNorm(cfg.d_model)

    def forward(self, src, pos, ref, shapes):
        src = self.norm1(src + self.attn(src + pos, ref, src, shapes))
        return self.norm2(src + self.ffn(src))


class Encoder(nn.Module):
    """Every pixel of every level attends, deformably, over the whole pyramid."""

    def __init__(self, cfg: DetectorConfig):
        super().__init__()
        self.cfg = cfg
        self.level_embed = nn.Parameter(torch.zeros(cfg.levels, cfg.d_model, dtype=DTYPE))
        nn.init.normal_(self.level_embed, std=0.02)
        self.layers = nn.ModuleList([EncoderLayer(cfg) for _ in range(cfg.encoder_layers)])

    def forward(self, pyramid: list[torch.Tensor]) -> list[torch.Tensor]:
        if not self.layers:
            return pyramid
        shapes, src = flatten_pyramid(pyramid)
        b = src.shape[0]
        pos = torch.cat([sine_position(h, w, self.cfg.d_model) + self.level_embed[l]
                         for l, (h, w) in enumerate(shapes)], dim=0).unsqueeze(0)
        ref = pixel_reference_points(shapes).unsqueeze(0).expand(b, -1, -1)
        for layer in self.layers:
            src = layer(src, pos, ref, shapes)
        return unflatten_pyramid(src, shapes)


def flatten_pyramid(pyramid: list[torch.Tensor]):
    shapes = [tuple(p.shape[-2:]) for p in pyramid]
    flat = torch.cat([p.flatten(2).transpose(1, 2) for p in pyramid], dim=1)
    return shapes, flat


def unflatten_pyramid(flat: torch.Tensor, shapes) -> list[torch.Tensor]:
    out, start = [], 0
    b, _, d = flat.shape
    for h, w in shapes:
        out.append(flat[:, start:start + h * w].transpose(1, 2).reshape(b, d, h, w))
        start += h * w
    return out


class SelfAttention(nn.Module):
    """Dense multi-head attention among the (few) decoder queries."""

    def __init__(self, d_model: int, heads: int):
        super().__init__()
        self.heads = heads
        self.q = Linear(d_model, d_model).xavier_()
        self.k = Linear(d_model, d_model).xavier_()
        self.v = Linear(d_model, d_model).xavier_()
        self.out = Linear(d_model, d_model).xavier_()

    def forward(self, qk: torch.Tensor, value: torch.Tensor) -> torch.Tensor:
        b, n, d = qk.shape
        dh = d // self.heads

        def split(t):
            return t.view(b, n, self.heads, dh).transpose(1, 2)

        q, k, v = split(self.q(qk)), split(self.k(qk)), split(self.v(value))
        a = softmax(q @ k.transpose(-1, -2) / math.sqrt(dh), axis=-1)
        return self.out((a @ v).transpose(1, 2).reshape(b, n, d))


class DecoderLayer(nn.Module):
    def __init__(self, cfg: DetectorConfig):
        super().__init__()
        self.self_attn = SelfAttention(cfg.d_model, cfg.heads)
        self.norm1 = LayerNorm(cfg.d_model)
        self.cross = DeformableAttention(cfg.d_model, cfg.heads, cfg.levels, cfg.points)
        self.norm2 = LayerNorm(cfg.d_model)
        self.ffn = FeedForward(cfg.d_model, cfg.ffn_dim)
        self.norm3 = LayerNorm(cfg.d_model)

    def forward(self, tgt, qpos, ref, memory, shapes):
        qk = tgt + qpos
        tgt = self.norm1(tgt + self.self_attn(qk, tgt))
        tgt = self.norm2(tgt + self.cross(tgt + qpos, ref, memory, shapes))
        return self.norm3(tgt + self.ffn(tgt))


@dataclass
class QuerySet:
    content: torch.Tensor  # [Nq, D]
    position: torch.Tensor  # [Nq, D]
    reference: torch.Tensor  # [Nq, 2] normalized (x, y)


class Decoder(nn.Module):
    def __init__(self, cfg: DetectorConfig):
        super().__init__()
        self.layers = nn.ModuleList([DecoderLayer(cfg) for _ in range(cfg.decoder_layers)])

    def forward(self, queries: QuerySet, memory: list[torch.Tensor]) -> list[torch.Tensor]:
        """Returns the hidden state ``[B, Nq, D]`` after every layer."""
        shapes, flat = flatten_pyramid(memory)
        b = flat.shape[0]
        tgt = queries.content.unsqueeze(0).expand(b, -1, -1)
        qpos = queries.position.unsqueeze(0).expand(b, -1, -1)
        ref = queries.reference.unsqueeze(0).expand(b, -1, -1)
        outs = []
        for layer in self.layers:
            tgt = layer(tgt, qpos, ref, flat, shapes)
            outs.append(tgt)
        return outs


def inverse_sigmoid(x: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    x = x.clamp(eps, 1 - eps)
    return torch.log(x / (1 - x))


_BOX_EPS = 1e-12


class Heads(nn.Module):
    """Class head (linear + softmax over bubble/no-object) and 3-layer box MLP."""

    def __init__(self, d_model: int):
        super().__init__()
        self.cls = Linear(d_model, 2)
        self.box = nn.ModuleList([Linear(d_model, d_model), Linear(d_model, d_model), Linear(d_model, 4)])
        with torch.no_grad():
            self.box[-1].weight.zero_()
            self.box[-1].bias.zero_()

    def forward(self, hidden: torch.Tensor, reference: torch.Tensor | None = None):
        """Returns ``(logits [..., 2], boxes [..., 4])``.

        With ``reference`` the box center is predicted relative to it, in
        logit space, so an untrained head already points at the reference.
        Boxes are kept strictly inside (0, 1) even where the sigmoid saturates
        in floating point.
        """
        logits = self.cls(hidden)
        x = hidden
        for i, layer in enumerate(self.box):
            x = layer(x)
            if i < len(self.box) - 1:
                x = F.relu(x)
        if reference is not None:
            x = x + torch.cat([inverse_sigmoid(reference), torch.zeros_like(reference)], dim=-1)
        return logits, torch.sigmoid(x).clamp(_BOX_EPS, 1.0 - _BOX_EPS)


def predict(heads: Heads, hidden: torch.Tensor, reference: torch.Tensor | None = None) -> DetectionSet:
    logits, boxes = heads(hidden, reference)
    return DetectionSet(softmax(logits, axis=-1), boxes)


def grid_reference(n: int) -> torch.Tensor:
    """``n`` normalized points laid out on the smallest square grid that holds them."""
    side = math.ceil(math.sqrt(n))
    ys, xs = torch.meshgrid((torch.arange(side, dtype=DTYPE) + 0.5) / side,
                            (torch.arange(side, dtype=DTYPE) + 0.5) / side, indexing="ij")
    return torch.stack([xs.reshape(-1), ys.reshape(-1)], dim=1)[:n]


class Detector(nn.Module):
    def __init__(self, cfg: DetectorConfig, seed: int = 0):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        state = torch.random.get_rng_state()
        torch.manual_seed(seed)
        try:
            self.backbone = Backbone(cfg)
            self.encoder = Encoder(cfg)
            self.decoder = Decoder(cfg)
            self.heads = Heads(cfg.d_model)
            self.query_content = nn.Parameter(torch.randn(cfg.queries, cfg.d_model, dtype=DTYPE))
            self.query_position = nn.Parameter(torch.randn(cfg.queries, cfg.d_model, dtype=DTYPE))
            self.query_reference = nn.Parameter(inverse_sigmoid(grid_reference(cfg.queries)))
        finally:
            torch.random.set_rng_state(state)

    def query_set(self) -> QuerySet:
        return QuerySet(self.query_content, self.query_position, torch.sigmoid(self.query_reference))

    def forward(self, images: torch.Tensor) -> dict:
        """``images [B, 1, H, W]`` -> ``logits [Dec, B, Nq, 2]`` and ``boxes [Dec, B, Nq, 4]``."""
        pyramid = self.backbone(images)
        memory = self.encoder(pyramid)
        queries = self.query_set()
        hidden = self.decoder(queries, memory)
        ref = queries.reference.unsqueeze(0).expand(images.shape[0], -1, -1)
        logits, boxes = zip(*(self.heads(h, ref) for h in hidden))
        return {"logits": torch.stack(logits), "boxes": torch.stack(boxes)}

    def detection_sets(self, out: dict, layer: int = -1) -> list[DetectionSet]:
        probs = softmax(out["logits"][layer], axis=-1)
        return [DetectionSet(p, b) for p, b in zip(probs, out["boxes"][layer])]
