"""LDRCNet building blocks and the networks assembled from them."""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from typing import Dict, List, NamedTuple, Optional

import numpy as np

from . import ops
from .nn import Conv2d, DeformConv2d, Module
from .tensor import Tensor

ABLATIONS = ("full", "s1", "s2", "s3", "s4", "s5")


@dataclass
class ModelConfig:
    base_channels: int = 16
    num_scales: int = 3
    mpb_dilations: List[int] = field(default_factory=lambda: [2, 4])
    rdb_count: int = 3
    rdb_growth: Optional[int] = None
    msib_rb_depths: List[int] = field(default_factory=lambda: [1, 2])
    ca_reduction: int = 4
    ablation: str = "full"

    def __post_init__(self):
        if self.rdb_growth is None:
            self.rdb_growth = max(1, self.base_channels // 2)
        self.ablation = self.ablation.lower()
        self.validate()

    def validate(self) -> None:
        if self.num_scales != 3:
            raise ValueError("num_scales is fixed at 3")
        if self.ablation not in ABLATIONS:
            raise ValueError(f"ablation must be one of {ABLATIONS}, got {self.ablation!r}")
        counts = [self.base_channels, self.rdb_count, self.rdb_growth, self.ca_reduction]
        counts += list(self.mpb_dilations) + list(self.msib_rb_depths)
        if any(int(v) < 1 for v in counts) or not self.mpb_dilations or not self.msib_rb_depths:
            raise ValueError("every width, count and rate must be positive")
        r = self.ca_reduction
        for width in self.attention_widths():
            if width % r:
                raise ValueError(f"ca_reduction {r} does not divide attention width {width}")

    def widths(self) -> List[int]:
        return [self.base_channels * 2**s for s in range(self.num_scales)]

    def attention_widths(self) -> List[int]:
        branches = 2 + len(self.mpb_dilations)
        out = []
        for w in self.widths() + [self.base_channels * 2**self.num_scales]:
            out.append(w * branches)
        out += [2 * w for w in self.widths()]
        return out

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, (list, tuple)):
                v = ",".join(str(i) for i in v)
            lines.append(f"{f.name}={v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        return cls.from_mapping(parse_key_values(text))

    @classmethod
    def from_mapping(cls, kv: Dict[str, str]) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(kv) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        kwargs = {}
        for name, raw in kv.items():
            if name in ("mpb_dilations", "msib_rb_depths"):
                kwargs[name] = [int(t) for t in str(raw).split(",") if t.strip()]
            elif name == "ablation":
                kwargs[name] = str(raw)
            elif name == "rdb_growth" and str(raw) in ("", "None"):
                kwargs[name] = None
            else:
                kwargs[name] = int(raw)
        return cls(**kwargs)


def parse_key_values(text: str) -> Dict[str, str]:
    """Parse ``key=value`` lines; blank lines and ``#`` comments are skipped."""
    kv = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        kv[key.strip().replace("-", "_")] = value.strip()
    return kv


class DegradationRep(NamedTuple):
    deg1: Tensor
    deg2: Tensor
    deg3: Tensor


class Sequential(Module):
    def __init__(self, layers):
        self.layers = list(layers)

    def forward(self, x):
        for layer in self.layers:
            x = layer(x)
        return x


class ChannelAttention(Module):
    def __init__(self, channels: int, reduction: int, rng):
        if channels % reduction:
            raise ValueError(f"{channels} channels not divisible by reduction {reduction}")
        self.squeeze = Conv2d(channels, channels // reduction, 1, rng)
        self.excite = Conv2d(channels // reduction, channels, 1, rng)

    def gates(self, x: Tensor) -> Tensor:
        return ops.sigmoid(self.excite(ops.relu(self.squeeze(ops.global_avgpool(x)))))

    def forward(self, x: Tensor) -> Tensor:
        return ops.scale_channels(x, self.gates(x))


class MultiPathBlock(Module):
    """Parallel pointwise, pooled and dilated branches gated by channel attention."""

    def __init__(self, cin: int, cout: int, cfg: ModelConfig, rng):
        self.point = Conv2d(cin, cout, 1, rng)
        self.pool_proj = Conv2d(cin, cout, 1, rng)
        self.dilated = [Conv2d(cin, cout, 3, rng, dilation=r) for r in cfg.mpb_dilations]
        width = cout * self.branch_count
        self.attention = ChannelAttention(width, cfg.ca_reduction, rng)
        self.fuse = Conv2d(width, cout, 1, rng, zero_init=True)
        self.shortcut = None if cin == cout else Conv2d(cin, cout, 1, rng)

    @property
    def branch_count(self) -> int:
        return 2 + len(self.dilated)

    def forward(self, x: Tensor) -> Tensor:
        branches = [ops.relu(self.point(x)), ops.relu(self.pool_proj(ops.avgpool2d(x, 3, 1, 1)))]
        branches += [ops.relu(conv(x)) for conv in self.dilated]
        y = self.fuse(self.attention(ops.concat_channels(branches)))
        skip = x if self.shortcut is None else self.shortcut(x)
        return ops.add(skip, y)


class ResidualDenseBlock(Module):
    def __init__(self, channels: int, growth: int, rng, layers: int = 3):
        self.convs = [Conv2d(channels + i * growth, growth, 3, rng) for i in range(layers)]
        self.dense_width = channels + layers * growth
        self.fuse = Conv2d(self.dense_width, channels, 1, rng, zero_init=True)

    def forward(self, x: Tensor) -> Tensor:
        feats = [x]
        for conv in self.convs:
            feats.append(ops.relu(conv(ops.concat_channels(feats))))
        return ops.add(x, self.fuse(ops.concat_channels(feats)))


class ResidualBlock(Module):
    def __init__(self, channels: int, rng):
        self.conv1 = Conv2d(channels, channels, 3, rng)
        self.conv2 = Conv2d(channels, channels, 3, rng, zero_init=True)

    def forward(self, x: Tensor) -> Tensor:
        return ops.add(x, self.conv2(ops.relu(self.conv1(x))))


class MSIBlock(Module):
    """Fuses decoder features with a degradation feature of the same resolution.

    Both inputs pass through 1x1 alignment convs and are concatenated under
    channel attention; parallel residual-block chains of different depths then run on
    the gated features and their outputs are concatenated and projected back.
    """

    def __init__(self, feat_channels: int, deg_channels: int, cfg: ModelConfig, rng):
        c = feat_channels
        self.align_feat = Conv2d(c, c, 1, rng)
        self.align_deg = Conv2d(deg_channels, c, 1, rng)
        self.attention = ChannelAttention(2 * c, cfg.ca_reduction, rng)
        self.chains = [Sequential(ResidualBlock(2 * c, rng) for _ in range(d)) for d in cfg.msib_rb_depths]
        self.project = Conv2d(2 * c * len(self.chains), c, 1, rng)

    def forward(self, feat: Tensor, deg: Tensor) -> Tensor:
        if feat.shape[2:] != deg.shape[2:]:
            raise ops.ShapeError(f"MSIBlock spatial mismatch: {feat.shape} vs {deg.shape}")
        fused = self.attention(ops.concat_channels([self.align_feat(feat), self.align_deg(deg)]))
        return self.project(ops.concat_channels([chain(fused) for chain in self.chains]))


class ConcatFusion(Module):
    """Plain concatenation + 1x1 conv; stands in for MSIBlock in ablation S5."""

    def __init__(self, feat_channels: int, deg_channels: int, rng):
        self.conv = Conv2d(feat_channels + deg_channels, feat_channels, 1, rng)

    def forward(self, feat: Tensor, deg: Tensor) -> Tensor:
        return self.conv(ops.concat_channels([feat, deg]))


def _fusion(kind: Optional[str], c: int, cfg: ModelConfig, rng):
    if kind == "msib":
        return MSIBlock(c, c, cfg, rng)
    if kind == "concat":
        return ConcatFusion(c, c, rng)
    return None


def _record(taps, name, t):
    if taps is not None:
        taps[name] = t


class DAEncoder(Module):
    """Rainy image -> (deg1, deg2, deg3) at full, 1/2 and 1/4 resolution."""

    def __init__(self, cfg: ModelConfig, rng, deformable: bool = True):
        widths = cfg.widths()
        self.stem = Conv2d(3, widths[0], 3, rng)
        self.scales = []
        self.downs = []
        for s, w in enumerate(widths):
            if deformable:
                layers = [DeformConv2d(w, w, rng), DeformConv2d(w, w, rng)]
            else:
                layers = [Conv2d(w, w, 3, rng), Conv2d(w, w, 3, rng)]
            self.scales.append(Sequential(layers))
            if s + 1 < len(widths):
                self.downs.append(Conv2d(w, widths[s + 1], 3, rng, stride=2))

    def forward(self, rainy: Tensor, taps: Optional[dict] = None) -> DegradationRep:
        n, c, h, w = rainy.shape
        if c != 3 or h % 4 or w % 4:
            raise ops.ShapeError(f"encoder needs N x 3 x H x W with H, W divisible by 4, got {rainy.shape}")
        f = ops.relu(self.stem(rainy))
        degs = []
        for s, block in enumerate(self.scales):
            for layer in block.layers:
                f = ops.relu(layer(f))
            degs.append(f)
            _record(taps, f"deg{s + 1}", f)
            if s < len(self.downs):
                f = ops.relu(self.downs[s](f))
        return DegradationRep(*degs)


class DerainNet(Module):
    """U-Net with multi-path blocks; degradation features enter the decoder."""

    def __init__(self, cfg: ModelConfig, rng, fusion: Optional[str] = "msib"):
        widths = cfg.widths()
        b = widths[0]
        self.stem = Conv2d(3, b, 3, rng)
        self.enc = [MultiPathBlock(w, w, cfg, rng) for w in widths]
        self.downs = [Conv2d(w, 2 * w, 3, rng, stride=2) for w in widths]
        self.bottleneck = MultiPathBlock(2 * widths[-1], 2 * widths[-1], cfg, rng)
        self.ups = [Conv2d(2 * w, w, 3, rng) for w in widths]
        self.skip_fuse = [Conv2d(2 * w, w, 1, rng) for w in widths]
        fusers = [_fusion(fusion, w, cfg, rng) for w in widths]
        self.fusers = [f for f in fusers if f is not None]
        self.uses_deg = bool(self.fusers)
        self.dec = [MultiPathBlock(w, w, cfg, rng) for w in widths]
        self.head = Conv2d(b, 3, 3, rng)

    def forward(self, rainy: Tensor, deg: Optional[DegradationRep] = None, taps: Optional[dict] = None) -> Tensor:
        n, c, h, w = rainy.shape
        if c != 3 or h % 8 or w % 8:
            raise ops.ShapeError(f"deraining network needs N x 3 x H x W with H, W divisible by 8, got {rainy.shape}")
        if self.uses_deg and deg is None:
            raise ValueError("this configuration needs the degradation representation")
        f = ops.relu(self.stem(rainy))
        skips = []
        for level, (block, down) in enumerate(zip(self.enc, self.downs)):
            f = block(f)
            skips.append(f)
            _record(taps, f"derain.enc{level + 1}", f)
            f = ops.relu(down(f))
        f = self.bottleneck(f)
        _record(taps, "derain.bottleneck", f)
        for level in reversed(range(len(skips))):
            f = ops.relu(self.ups[level](ops.upsample2x(f, "nearest")))
            f = self.skip_fuse[level](ops.concat_channels([f, skips[level]]))
            if self.uses_deg:
                f = self.fusers[level](f, deg[level])
            f = self.dec[level](f)
            _record(taps, f"derain.dec{level + 1}", f)
        out = self.head(f)
        _record(taps, "derain.out", out)
        return out


class ConstraintNet(Module):
    """Clean image + degradation representation -> reconstructed rainy image.

    Only used while training the encoder.
    """

    def __init__(self, cfg: ModelConfig, rng, fusion: str = "msib"):
        b = cfg.base_channels
        self.stem = Conv2d(3, b, 3, rng)
        self.rdbs = [ResidualDenseBlock(b, cfg.rdb_growth, rng) for _ in range(cfg.rdb_count)]
        self.fuse1 = _fusion(fusion, b, cfg, rng)
        self.down2 = Conv2d(b, 2 * b, 3, rng, stride=2)
        self.fuse2 = _fusion(fusion, 2 * b, cfg, rng)
        self.down3 = Conv2d(2 * b, 4 * b, 3, rng, stride=2)
        self.fuse3 = _fusion(fusion, 4 * b, cfg, rng)
        self.up3 = Conv2d(4 * b, 2 * b, 3, rng)
        self.up2 = Conv2d(2 * b, b, 3, rng)
        self.head = Conv2d(b, 3, 3, rng)

    def forward(self, clean: Tensor, deg: DegradationRep, taps: Optional[dict] = None) -> Tensor:
        if clean.shape[1] != 3 or clean.shape[2:] != deg.deg1.shape[2:]:
            raise ops.ShapeError(f"clean image {clean.shape} does not match deg1 {deg.deg1.shape}")
        f = ops.relu(self.stem(clean))
        f = self.rdbs[0](f)
        f = self.fuse1(f, deg.deg1)
        d2 = self.fuse2(ops.relu(self.down2(f)), deg.deg2)
        d3 = self.fuse3(ops.relu(self.down3(d2)), deg.deg3)
        u2 = ops.add(ops.relu(self.up3(ops.upsample2x(d3, "nearest"))), d2)
        f = ops.add(f, self.up2(ops.upsample2x(u2, "nearest")))
        _record(taps, "constraint.fused", f)
        for rdb in self.rdbs[1:]:
            f = rdb(f)
        return self.head(f)


class ResidualHead(Module):
    """Ablation S1: map the degradation representation straight to a rain residual."""

    def __init__(self, cfg: ModelConfig, rng):
        b = cfg.base_channels
        self.conv1 = Conv2d(7 * b, b, 3, rng)
        self.conv2 = Conv2d(b, 3, 3, rng, zero_init=True)

    def forward(self, rainy: Tensor, deg: DegradationRep) -> Tensor:
        up2 = ops.upsample2x(deg.deg2, "nearest")
        up3 = ops.upsample2x(ops.upsample2x(deg.deg3, "nearest"), "nearest")
        stacked = ops.concat_channels([deg.deg1, up2, up3])
        residual = self.conv2(ops.relu(self.conv1(stacked)))
        return ops.sub(rainy, residual)


class LDRCNet(Module):
    """Container for whichever of E, C, D (or the S1 head) an ablation uses."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.config = cfg
        rng = np.random.default_rng(seed)
        ab = cfg.ablation
        self.encoder = None if ab == "s2" else DAEncoder(cfg, rng, deformable=(ab != "s4"))
        fusion = "concat" if ab == "s5" else "msib"
        self.constraint = ConstraintNet(cfg, rng, fusion) if ab not in ("s2", "s3") else None
        if ab == "s1":
            self.derain = None
            self.residual_head = ResidualHead(cfg, rng)
        else:
            self.derain = DerainNet(cfg, rng, fusion=None if ab == "s2" else fusion)
            self.residual_head = None

    @property
    def has_encoder(self) -> bool:
        return self.encoder is not None

    @property
    def has_constraint(self) -> bool:
        return self.constraint is not None

    def encode(self, rainy: Tensor, taps: Optional[dict] = None) -> Optional[DegradationRep]:
        if self.encoder is None:
            return None
        return self.encoder(rainy, taps)

    def reconstruct_rainy(self, clean: Tensor, deg: DegradationRep, taps: Optional[dict] = None) -> Tensor:
        if self.constraint is None:
            raise ValueError(f"ablation {self.config.ablation} has no constraint framework")
        return self.constraint(clean, deg, taps)

    def restore(self, rainy: Tensor, deg: Optional[DegradationRep], taps: Optional[dict] = None) -> Tensor:
        if self.residual_head is not None:
            return self.residual_head(rainy, deg)
        return self.derain(rainy, deg, taps)

    def restorer(self) -> Module:
        return self.residual_head if self.residual_head is not None else self.derain

    def layer_names(self) -> List[str]:
        names = []
        if self.encoder is not None:
            names += ["deg1", "deg2", "deg3"]
        if self.derain is not None:
            names += [f"derain.enc{i}" for i in (1, 2, 3)] + ["derain.bottleneck"]
            names += [f"derain.dec{i}" for i in (3, 2, 1)] + ["derain.out"]
        return names

    def count(self, kind: type) -> int:
        return sum(isinstance(m, kind) for m in self.modules())
