"""Run configuration: every knob for data, training and evaluation.

`RunConfig()` with no arguments is the full-scale reference setup (the
constants the report quotes); `RunConfig.desk_scale()` is the small
configuration the bundled end-to-end runs use. Configs round-trip through
JSON losslessly.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

from .network import NetworkConfig, tiny_config

ABLATIONS = ("none", "no_se", "no_focal", "baseline")


@dataclass(frozen=True)
class RunConfig:
    # intensity preprocessing
    clip_lo: float = -1200.0
    clip_hi: float = 600.0
    # patch geometry (voxels per side)
    train_patch: int = 128
    eval_patch: int = 208
    eval_overlap: int = 32
    # anchors: cube side lengths in voxels
    anchor_sizes: tuple[float, ...] = (5.0, 10.0, 20.0)
    anchor_stride: int = 4
    iou_pos: float = 0.5
    iou_neg: float = 0.02
    force_closest_match: bool = True
    # loss
    focal_alpha: float = 0.5
    focal_gamma: float = 2.0
    # optimizer
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 40
    epochs: int = 100
    # evaluation
    target_fp_rates: tuple[float, ...] = (0.125, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0)
    nms_iou: float = 0.1
    prob_threshold: float = 0.1
    max_candidates_per_scan: int = 100
    # sampling / augmentation
    nodule_patch_prob: float = 0.7
    flip_prob: float = 0.5
    scale_min: float = 0.75
    scale_max: float = 1.25
    augment_enabled: bool = True
    # plumbing
    seed: int = 0
    dtype: str = "float64"
    checkpoint_every: int = 0  # extra periodic checkpoints; 0 = final only
    log_every: int = 1
    ablation: str = "none"
    network: NetworkConfig = field(default_factory=NetworkConfig)

    def validate(self) -> None:
        if self.ablation not in ABLATIONS:
            raise ValueError(f"unknown ablation {self.ablation!r}, expected one of {ABLATIONS}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")
        if self.clip_hi <= self.clip_lo:
            raise ValueError("clip_hi must exceed clip_lo")
        if self.eval_overlap >= self.eval_patch:
            raise ValueError("eval_overlap must be smaller than eval_patch")
        if len(self.anchor_sizes) != self.network.num_anchors:
            raise ValueError(
                f"{len(self.anchor_sizes)} anchor sizes but network expects "
                f"{self.network.num_anchors} slots"
            )
        if self.train_patch % self.anchor_stride or self.eval_patch % self.anchor_stride:
            raise ValueError("patch sizes must be multiples of the anchor stride")
        self.network.validate()
        if self.network.output_stride != self.anchor_stride:
            raise ValueError(
                f"network output stride {self.network.output_stride} != anchor stride "
                f"{self.anchor_stride}"
            )

    @classmethod
    def desk_scale(cls, **overrides) -> "RunConfig":
        """Small setup for laptop-class runs: tiny network, 64^3 training
        patches, 96^3 eval tiles, small batches, float32 math."""
        base = dict(
            train_patch=64,
            eval_patch=96,
            eval_overlap=32,
            batch_size=4,
            epochs=8,
            dtype="float32",
            network=tiny_config(),
        )
        base.update(overrides)
        return cls(**base)

    def with_ablation(self, kind: str) -> "RunConfig":
        """Return a config for an ablation arm.

        no_se removes the channel-gating blocks; no_focal swaps the focal
        classification term for plain cross-entropy with sampled negatives;
        baseline does both. Each differs from this config in exactly that
        dimension (plus the `ablation` tag itself).
        """
        if kind not in ABLATIONS:
            raise ValueError(f"unknown ablation {kind!r}")
        cfg = replace(self, ablation=kind)
        if kind in ("no_se", "baseline"):
            cfg = replace(cfg, network=replace(cfg.network, use_se=False))
        return cfg

    @property
    def uses_focal(self) -> bool:
        return self.ablation not in ("no_focal", "baseline")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["anchor_sizes"] = list(self.anchor_sizes)
        d["target_fp_rates"] = list(self.target_fp_rates)
        d["network"] = self.network.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        if "network" in d:
            d["network"] = NetworkConfig.from_dict(d["network"])
        for key in ("anchor_sizes", "target_fp_rates"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        return cls.from_dict(json.loads(text))


def load_run_config(path: Optional[str], desk: bool = True, **overrides) -> RunConfig:
    """Config file loader for the CLI: file contents win, then overrides;
    with no file the desk-scale (or full) defaults apply."""
    if path is not None:
        with open(path) as f:
            cfg = RunConfig.from_dict({**json.load(f), **overrides})
    elif desk:
        cfg = RunConfig.desk_scale(**overrides)
    else:
        cfg = RunConfig(**overrides)
    cfg.validate()
    return cfg
