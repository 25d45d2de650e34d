"""Image semantic encoder: hierarchical backbone, pyramid decoder, query transformer.

Produces a fixed-size embedding of (n_local + n_global) vectors of width d_sem
that conditions the denoising UNet. The backbone and query transformer play
the role of a pretrained, frozen component; the optional dilated-conv (DC) and
spatial-attention (SA) enhancements are the only trainable parts and are both
exact identities at initialization, so enabling them never changes the
function the model computes at step 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .core_types import ModelConfig, RgbImage

DC_ATTR = "dilated"
SA_ATTR = "spatial_gate"


@dataclass
class FeaturePyramid:
    """Backbone feature maps, finest first; level i is 1/2^(i+2) resolution."""

    levels: list[torch.Tensor]

    def __len__(self) -> int:
        return len(self.levels)


class SpatialAttentionGate(nn.Module):
    """Spatial attention over channel statistics.

    Map = sigmoid(conv_kxk(concat(channel-mean, channel-max))). The conv is
    zero-initialized, which makes the map uniformly 0.5; the gate multiplies
    by 2 * map so it starts as an exact identity.
    """

    ZERO_INIT_PARAMS = ("conv.weight",)

    def __init__(self, kernel_size: int = 7):
        super().__init__()
        if kernel_size % 2 != 1:
            raise ValueError("spatial attention kernel size must be odd")
        self.conv = nn.Conv2d(2, 1, kernel_size, padding=kernel_size // 2, bias=False)
        nn.init.zeros_(self.conv.weight)

    def attention_map(self, x: torch.Tensor) -> torch.Tensor:
        squeeze = x.dim() == 3
        if squeeze:
            x = x.unsqueeze(0)
        if x.dim() != 4:
            raise ValueError(f"expected (C, h, w) or (B, C, h, w) features, got shape {tuple(x.shape)}")
        stats = torch.cat([x.mean(dim=1, keepdim=True), x.max(dim=1, keepdim=True).values], dim=1)
        attn = torch.sigmoid(self.conv(stats))
        return attn[0] if squeeze else attn

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x * (2.0 * self.attention_map(x))


def spatial_attention(features: torch.Tensor, gate: SpatialAttentionGate) -> torch.Tensor:
    """Attention map for (C, h, w) features; values strictly inside (0, 1)."""
    if features.dim() != 3:
        raise ValueError(f"expected (C, h, w) features, got shape {tuple(features.shape)}")
    return gate.attention_map(features)


class DilatedConvEnhance(nn.Module):
    """Residual 3x3 dilated conv; zero-initialized, so an identity at start."""

    ZERO_INIT_PARAMS = ("conv.weight", "conv.bias")

    def __init__(self, channels: int, dilation: int = 2):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, padding=dilation, dilation=dilation)
        nn.init.zeros_(self.conv.weight)
        nn.init.zeros_(self.conv.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.conv(x)


def _window_partition(x: torch.Tensor, ws: int) -> tuple[torch.Tensor, tuple[int, int], tuple[int, int]]:
    b, c, h, w = x.shape
    ph, pw = (-h) % ws, (-w) % ws
    if ph or pw:
        x = F.pad(x, (0, pw, 0, ph))
    hp, wp = h + ph, w + pw
    x = x.view(b, c, hp // ws, ws, wp // ws, ws)
    tokens = x.permute(0, 2, 4, 3, 5, 1).reshape(-1, ws * ws, c)
    return tokens, (h, w), (hp, wp)


def _window_merge(tokens: torch.Tensor, ws: int, hw: tuple[int, int], padded_hw: tuple[int, int]) -> torch.Tensor:
    h, w = hw
    hp, wp = padded_hw
    c = tokens.shape[-1]
    x = tokens.view(-1, hp // ws, wp // ws, ws, ws, c)
    x = x.permute(0, 5, 1, 3, 2, 4).reshape(-1, c, hp, wp)
    return x[:, :, :h, :w]


class WindowAttentionBlock(nn.Module):
    """Pre-norm self-attention within non-overlapping square windows, plus MLP."""

    def __init__(self, channels: int, window: int, heads: int):
        super().__init__()
        self.window = window
        self.norm1 = nn.LayerNorm(channels)
        self.attn = nn.MultiheadAttention(channels, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(channels)
        self.mlp = nn.Sequential(
            nn.Linear(channels, 2 * channels), nn.GELU(), nn.Linear(2 * channels, channels))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        tokens, hw, padded = _window_partition(x, self.window)
        t = self.norm1(tokens)
        tokens = tokens + self.attn(t, t, t, need_weights=False)[0]
        tokens = tokens + self.mlp(self.norm2(tokens))
        return _window_merge(tokens, self.window, hw, padded)


class _BackboneStage(nn.Module):
    def __init__(self, cin: int, cout: int, n_down: int, window: int, heads: int,
                 use_dc: bool, use_sa: bool):
        super().__init__()
        downs: list[nn.Module] = []
        for k in range(n_down):
            downs += [nn.Conv2d(cin if k == 0 else cout, cout, 3, stride=2, padding=1), nn.SiLU()]
        self.down = nn.Sequential(*downs)
        self.attn = WindowAttentionBlock(cout, window, heads)
        # enhancements are only constructed when enabled, so a disabled build
        # is structurally identical to one where they never existed
        setattr(self, DC_ATTR, DilatedConvEnhance(cout) if use_dc else None)
        setattr(self, SA_ATTR, SpatialAttentionGate() if use_sa else None)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.attn(self.down(x))
        dc = getattr(self, DC_ATTR)
        if dc is not None:
            x = dc(x)
        sa = getattr(self, SA_ATTR)
        if sa is not None:
            x = sa(x)
        return x


class PyramidDecoder(nn.Module):
    """Top-down fusion: upsample each coarser level and add via a 1x1 conv."""

    def __init__(self, widths: list[int]):
        super().__init__()
        self.fuse = nn.ModuleList(
            nn.Conv2d(widths[i + 1], widths[i], 1) for i in range(len(widths) - 1))

    def forward(self, levels: list[torch.Tensor]) -> list[torch.Tensor]:
        if len(levels) < 2:
            raise ValueError("pyramid decoder needs at least two levels")
        outs: list[torch.Tensor | None] = [None] * len(levels)
        outs[-1] = levels[-1]
        for i in range(len(levels) - 2, -1, -1):
            up = F.interpolate(outs[i + 1], size=levels[i].shape[-2:],
                               mode="bilinear", align_corners=False)
            outs[i] = levels[i] + self.fuse[i](up)
        return outs  # type: ignore[return-value]


class _AttentionBlock(nn.Module):
    """Pre-norm attention block; self-attention when kv is omitted."""

    def __init__(self, d: int, heads: int):
        super().__init__()
        self.norm_q = nn.LayerNorm(d)
        self.norm_kv = nn.LayerNorm(d)
        self.attn = nn.MultiheadAttention(d, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(d)
        self.mlp = nn.Sequential(nn.Linear(d, 2 * d), nn.GELU(), nn.Linear(2 * d, d))

    def forward(self, q: torch.Tensor, kv: torch.Tensor | None = None) -> torch.Tensor:
        kvn = self.norm_q(q) if kv is None else self.norm_kv(kv)
        q = q + self.attn(self.norm_q(q), kvn, kvn, need_weights=False)[0]
        return q + self.mlp(self.norm2(q))


class QueryTransformer(nn.Module):
    """Learned queries attending over flattened pyramid tokens.

    Local queries cross-attend over the token sequence, global queries join
    for self-attention, and all rows are returned. The output row count is a
    function of the config only, never of the input resolution.
    """

    def __init__(self, widths: list[int], config: ModelConfig):
        super().__init__()
        d = config.d_sem
        self.local_queries = nn.Parameter(torch.empty(config.n_local, d))
        self.global_queries = nn.Parameter(torch.empty(config.n_global, d))
        self.level_proj = nn.ModuleList(nn.Linear(w, d) for w in widths)
        self.level_embed = nn.Parameter(torch.empty(len(widths), d))
        self.cross = _AttentionBlock(d, config.n_heads)
        self.self_blocks = nn.ModuleList(_AttentionBlock(d, config.n_heads) for _ in range(2))
        self.final_norm = nn.LayerNorm(d)

    def tokens_from_pyramid(self, levels: list[torch.Tensor]) -> torch.Tensor:
        if len(levels) != len(self.level_proj):
            raise ValueError(f"expected {len(self.level_proj)} pyramid levels, got {len(levels)}")
        toks = []
        for i, feat in enumerate(levels):
            t = feat.flatten(2).transpose(1, 2)
            toks.append(self.level_proj[i](t) + self.level_embed[i])
        return torch.cat(toks, dim=1)

    def attend(self, tokens: torch.Tensor) -> torch.Tensor:
        b = tokens.shape[0]
        q = self.cross(self.local_queries.expand(b, -1, -1), tokens)
        q = torch.cat([q, self.global_queries.expand(b, -1, -1)], dim=1)
        for blk in self.self_blocks:
            q = blk(q)
        return self.final_norm(q)

    def forward(self, levels: list[torch.Tensor]) -> torch.Tensor:
        return self.attend(self.tokens_from_pyramid(levels))


class ImageSemanticEncoder(nn.Module):
    """Backbone plus pyramid decoder plus query transformer, end to end."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        d = config.d_sem
        if d % 2 != 0 or (d // 2) % config.n_heads != 0:
            raise ValueError("d_sem must be even and d_sem/2 divisible by n_heads")
        self.config = config
        widths = [(d // 2) * 2 ** i for i in range(config.sem_levels)]
        self.widths = widths
        stages = []
        for i, cout in enumerate(widths):
            stages.append(_BackboneStage(
                cin=3 if i == 0 else widths[i - 1],
                cout=cout,
                n_down=2 if i == 0 else 1,
                window=4,
                heads=config.n_heads,
                use_dc=config.use_dilated_conv,
                use_sa=config.use_spatial_attention,
            ))
        self.stages = nn.ModuleList(stages)
        self.pyramid_decoder = PyramidDecoder(widths)
        self.query_transformer = QueryTransformer(widths, config)

    def backbone(self, x: torch.Tensor) -> list[torch.Tensor]:
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """(B, 3, H, W) normalized input to (B, n_local + n_global, d_sem)."""
        decoded = self.pyramid_decoder(self.backbone(x))
        return self.query_transformer(decoded)

    # single-sample wrappers around the batched path

    def _to_input(self, image: RgbImage) -> torch.Tensor:
        from .data_pipeline import to_model_range

        return torch.from_numpy(to_model_range(image.data)).unsqueeze(0)

    def backbone_forward(self, image: RgbImage) -> FeaturePyramid:
        with torch.no_grad():
            feats = self.backbone(self._to_input(image))
        return FeaturePyramid([f[0] for f in feats])

    def decode_pyramid(self, pyramid: FeaturePyramid) -> FeaturePyramid:
        with torch.no_grad():
            outs = self.pyramid_decoder([f.unsqueeze(0) for f in pyramid.levels])
        return FeaturePyramid([f[0] for f in outs])

    def query_transform(self, pyramid: FeaturePyramid) -> torch.Tensor:
        with torch.no_grad():
            out = self.query_transformer([f.unsqueeze(0) for f in pyramid.levels])
        return out[0]

    def embed(self, image: RgbImage) -> torch.Tensor:
        with torch.no_grad():
            return self(self._to_input(image))[0]

    def enhancement_parameter_names(self) -> set[str]:
        tags = (f".{DC_ATTR}.", f".{SA_ATTR}.")
        return {n for n, _ in self.named_parameters() if any(t in n for t in tags)}
