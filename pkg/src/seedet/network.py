"""Encoder-decoder detection network with squeeze-and-excitation blocks.

The encoder is a residual stack (stem conv + max pool, then one stage per
entry of `encoder_channels`, each stage downsampling by 2 except the
first). The decoder upsamples with transposed convolutions, concatenates
the matching encoder feature map, and refines with one SE residual block
per level; a final stride-1 block widens to the feature width the head
sees. The head is a 1x1x1 convolution emitting 5 numbers per anchor slot
per cell: a nodule probability (sigmoid applied) and 4 box offsets.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import tensor as T
from .nn import BatchNorm3d, Conv3d, ConvTranspose3d, Linear, Module
from .tensor import Tensor

# start rare-event probability sigmoid(-4.6) ~ 0.01 so early training is not
# swamped by confident false positives
HEAD_CLS_BIAS_INIT = -4.6


@dataclass(frozen=True)
class NetworkConfig:
    in_channels: int = 1
    encoder_channels: tuple[int, ...] = (24, 32, 64, 64)
    blocks_per_stage: int = 2
    decoder_channels: tuple[int, ...] = (64, 64, 128)
    num_anchors: int = 3
    use_se: bool = True
    se_reduction: int = 16
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1

    def validate(self) -> None:
        if len(self.encoder_channels) < 2:
            raise ValueError("need at least two encoder stages")
        if len(self.decoder_channels) < 2:
            raise ValueError("decoder_channels needs >= 2 entries (levels + feature width)")
        if self.num_upsamples > len(self.encoder_channels) - 1:
            raise ValueError("more decoder levels than encoder stages to skip from")
        if self.num_anchors < 1:
            raise ValueError("need at least one anchor slot")

    @property
    def num_upsamples(self) -> int:
        return len(self.decoder_channels) - 1

    @property
    def output_stride(self) -> int:
        # stem pool /2, each stage after the first /2, each decoder level x2
        down = 2 ** len(self.encoder_channels)
        return down // (2**self.num_upsamples)

    @property
    def min_input_multiple(self) -> int:
        return 2 ** len(self.encoder_channels)

    @property
    def head_channels(self) -> int:
        return self.num_anchors * 5

    def to_dict(self) -> dict:
        return {
            "in_channels": self.in_channels,
            "encoder_channels": list(self.encoder_channels),
            "blocks_per_stage": self.blocks_per_stage,
            "decoder_channels": list(self.decoder_channels),
            "num_anchors": self.num_anchors,
            "use_se": self.use_se,
            "se_reduction": self.se_reduction,
            "bn_eps": self.bn_eps,
            "bn_momentum": self.bn_momentum,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        d = dict(d)
        d["encoder_channels"] = tuple(d["encoder_channels"])
        d["decoder_channels"] = tuple(d["decoder_channels"])
        return cls(**d)


def tiny_config(num_anchors: int = 3) -> NetworkConfig:
    """Small desk-scale network: same topology, output stride still 4."""
    return NetworkConfig(
        encoder_channels=(8, 16, 32),
        blocks_per_stage=1,
        decoder_channels=(32, 32),
        num_anchors=num_anchors,
    )


def gradcheck_config() -> NetworkConfig:
    """Just big enough to exercise every layer type on a 16^3 input."""
    return NetworkConfig(
        encoder_channels=(4, 8, 8),
        blocks_per_stage=1,
        decoder_channels=(8, 16),
        num_anchors=3,
    )


class SqueezeExcite(Module):
    """Channel gating: global average pool, bottleneck MLP, sigmoid."""

    def __init__(self, channels: int, reduction: int, *, rng, dtype):
        super().__init__()
        hidden = max(1, channels // reduction)
        self.fc1 = Linear(channels, hidden, rng=rng, dtype=dtype)
        self.fc2 = Linear(hidden, channels, rng=rng, dtype=dtype)

    def gates(self, u: Tensor) -> Tensor:
        z = T.global_avg_pool(u)
        return T.sigmoid(self.fc2.forward(T.relu(self.fc1.forward(z))))

    def forward(self, u: Tensor) -> Tensor:
        return T.scale_channels(u, self.gates(u))


class SEResidualBlock(Module):
    """conv-bn-relu-conv-bn, channel gating, then shortcut add and relu.

    The gate scales the residual branch before the identity is added, so a
    gate pinned at 1 reduces the block to a plain residual block
    (`gate_pinned` exposes exactly that for equivalence checks).
    """

    def __init__(self, cin: int, cout: int, *, stride: int, cfg: NetworkConfig, rng, dtype):
        super().__init__()
        self.conv1 = Conv3d(cin, cout, 3, stride=stride, pad=1, rng=rng, dtype=dtype)
        self.bn1 = BatchNorm3d(cout, eps=cfg.bn_eps, momentum=cfg.bn_momentum, dtype=dtype)
        self.conv2 = Conv3d(cout, cout, 3, stride=1, pad=1, rng=rng, dtype=dtype)
        self.bn2 = BatchNorm3d(cout, eps=cfg.bn_eps, momentum=cfg.bn_momentum, dtype=dtype)
        if cfg.use_se:
            self.se: Optional[SqueezeExcite] = SqueezeExcite(
                cout, cfg.se_reduction, rng=rng, dtype=dtype
            )
        else:
            self.se = None
        self.gate_pinned = False
        if stride != 1 or cin != cout:
            self.proj = Conv3d(cin, cout, 1, stride=stride, pad=0, rng=rng, dtype=dtype)
            self.proj_bn = BatchNorm3d(cout, eps=cfg.bn_eps, momentum=cfg.bn_momentum, dtype=dtype)
        else:
            self.proj = None
            self.proj_bn = None

    def forward(self, x: Tensor) -> Tensor:
        u = T.relu(self.bn1.forward(self.conv1.forward(x)))
        u = self.bn2.forward(self.conv2.forward(u))
        if self.se is not None and not self.gate_pinned:
            u = self.se.forward(u)
        shortcut = x if self.proj is None else self.proj_bn.forward(self.proj.forward(x))
        return T.relu(u + shortcut)


class _Stage(Module):
    def __init__(self, cin, cout, n_blocks, stride, cfg, rng, dtype):
        super().__init__()
        self.n_blocks = n_blocks
        for i in range(n_blocks):
            block = SEResidualBlock(
                cin if i == 0 else cout,
                cout,
                stride=stride if i == 0 else 1,
                cfg=cfg,
                rng=rng,
                dtype=dtype,
            )
            setattr(self, f"block{i}", block)

    def forward(self, x: Tensor) -> Tensor:
        for i in range(self.n_blocks):
            x = getattr(self, f"block{i}").forward(x)
        return x


class _UpLevel(Module):
    """Transposed-conv upsample, bn+relu, concat skip, one refining block."""

    def __init__(self, cin, skip_ch, cout, cfg, rng, dtype):
        super().__init__()
        self.up = ConvTranspose3d(cin, cin, 2, stride=2, pad=0, rng=rng, dtype=dtype)
        self.up_bn = BatchNorm3d(cin, eps=cfg.bn_eps, momentum=cfg.bn_momentum, dtype=dtype)
        self.block = SEResidualBlock(cin + skip_ch, cout, stride=1, cfg=cfg, rng=rng, dtype=dtype)

    def forward(self, x: Tensor, skip: Tensor) -> Tensor:
        x = T.relu(self.up_bn.forward(self.up.forward(x)))
        return self.block.forward(T.concat([x, skip], axis=1))


class DetectorNet(Module):
    def __init__(self, cfg: NetworkConfig, *, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        enc = cfg.encoder_channels
        self.stem = Conv3d(cfg.in_channels, enc[0], 3, stride=1, pad=1, rng=rng, dtype=dtype)
        self.stem_bn = BatchNorm3d(enc[0], eps=cfg.bn_eps, momentum=cfg.bn_momentum, dtype=dtype)
        self.n_stages = len(enc)
        for i, cout in enumerate(enc):
            cin = enc[0] if i == 0 else enc[i - 1]
            stage = _Stage(
                cin, cout, cfg.blocks_per_stage, stride=1 if i == 0 else 2,
                cfg=cfg, rng=rng, dtype=dtype,
            )
            setattr(self, f"stage{i}", stage)
        dec = cfg.decoder_channels
        self.n_ups = cfg.num_upsamples
        cin = enc[-1]
        for i in range(self.n_ups):
            skip_ch = enc[len(enc) - 2 - i]
            level = _UpLevel(cin, skip_ch, dec[i], cfg, rng, dtype)
            setattr(self, f"up{i}", level)
            cin = dec[i]
        self.feature = SEResidualBlock(cin, dec[-1], stride=1, cfg=cfg, rng=rng, dtype=dtype)
        self.head = Conv3d(dec[-1], cfg.head_channels, 1, stride=1, pad=0, bias=True, rng=rng,
                           dtype=dtype)
        bias = self.head.bias.data
        bias[0 :: 5] = HEAD_CLS_BIAS_INIT  # probability slots only

    def pin_gates(self, pinned: bool = True) -> None:
        for m in self.modules():
            if isinstance(m, SEResidualBlock):
                m.gate_pinned = pinned

    def forward(self, x: Tensor) -> Tensor:
        """[N, Cin, D, H, W] -> [N, A*5, D/S, H/S, W/S] with S = output stride.

        Channel layout per cell: anchor-major, (probability, dx, dy, dz, dr)
        within each anchor slot; the probability channel is already a
        sigmoid output.
        """
        if x.data.ndim != 5:
            raise ValueError("expected [N, C, D, H, W] input")
        mult = self.cfg.min_input_multiple
        for size in x.data.shape[2:]:
            if size % mult != 0 or size < mult * 2:
                raise ValueError(
                    f"spatial extent {size} not supported: must be a multiple of {mult} "
                    f"and at least {2 * mult}"
                )
        h = T.relu(self.stem_bn.forward(self.stem.forward(x)))
        h = T.max_pool3d(h, 2, 2)
        skips = []
        for i in range(self.n_stages):
            h = getattr(self, f"stage{i}").forward(h)
            skips.append(h)
        for i in range(self.n_ups):
            h = getattr(self, f"up{i}").forward(h, skips[self.n_stages - 2 - i])
        h = self.feature.forward(h)
        raw = self.head.forward(h)
        n, _, gz, gy, gx = raw.data.shape
        a = self.cfg.num_anchors
        r5 = T.reshape(raw, (n, a, 5, gz, gy, gx))
        prob = T.sigmoid(r5[:, :, 0:1])
        offs = r5[:, :, 1:5]
        out = T.concat([prob, offs], axis=2)
        return T.reshape(out, (n, a * 5, gz, gy, gx))


def build_network(cfg: NetworkConfig, seed: int = 0, dtype=np.float32) -> DetectorNet:
    rng = np.random.default_rng(np.random.SeedSequence((int(seed), 0x5EED)))
    return DetectorNet(cfg, rng=rng, dtype=dtype)


def without_se(cfg: NetworkConfig) -> NetworkConfig:
    return replace(cfg, use_se=False)
