"""Named TreeNet variants and the single-block OSA reference."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from treenet.blocks import BlockGraph, BlockSpec, Classifier, Stem, build_block
from treenet.layers import MaxPool2d, Module

VARIANTS = {
    20: (1, 1, 1, 1),
    40: (1, 1, 2, 2),
    58: (1, 1, 4, 3),
    100: (1, 3, 9, 3),
}
# per-stage (growth rate k, transition width k_cat) for stages 2..5
STAGE_WIDTHS = ((128, 256), (128, 512), (192, 768), (256, 1024))
STEM_WIDTHS = (64, 64, 128)
FIRST_STAGE_INDEX = 2


def bottleneck_width(k_cat: int, floor: int = 128) -> int:
    return max(floor, k_cat // 4)


@dataclass(frozen=True)
class StageSpec:
    blocks: int
    block: BlockSpec
    downsample: bool

    def block_specs(self) -> list:
        """Per-block specs: only the first block changes width."""
        first = self.block
        rest = first.with_input(first.k_cat)
        return [first] + [rest] * (self.blocks - 1)


@dataclass(frozen=True)
class ModelSpec:
    name: str
    stem: Optional[tuple]
    stages: tuple
    num_classes: int = 1000
    in_channels: int = 3
    output_stride: int = 32

    def stage_names(self) -> list:
        return [f"stage{FIRST_STAGE_INDEX + i}" for i in range(len(self.stages))]

    def composed_stride(self) -> int:
        s = 4 if self.stem else 1
        for st in self.stages:
            s *= 2 if st.downsample else 1
        return s


def parse_variant(arch) -> int:
    """Accept 58, '58', 'treenet-58', 'TreeNet58'."""
    text = str(arch).lower().replace("treenet", "").lstrip("-_")
    try:
        v = int(text)
    except ValueError:
        v = None
    if v not in VARIANTS:
        valid = ", ".join(f"treenet-{n}" for n in VARIANTS)
        raise ValueError(f"unknown architecture {arch!r}; valid variants: {valid}")
    return v


def treenet_spec(variant, width_divisor: int = 1, num_classes: int = 1000, **flags) -> ModelSpec:
    """ModelSpec for TreeNet-20/40/58/100.

    ``width_divisor`` scales stem, k, k' and k_cat down uniformly (desk-scale
    training uses 4).  ``flags`` override ``use_srb``/``use_residual``/``use_eca``,
    which default to the complete block.
    """
    v = parse_variant(variant)
    l = 3 if v == 20 else 5
    block_flags = dict(use_srb=True, use_residual=True, use_eca=True)
    block_flags.update(flags)
    d = width_divisor
    stem = tuple(w // d for w in STEM_WIDTHS)
    k_in = stem[-1]
    stages = []
    for i, (n_blocks, (k, k_cat)) in enumerate(zip(VARIANTS[v], STAGE_WIDTHS)):
        kp = bottleneck_width(k_cat)
        bs = BlockSpec(l=l, k=k // d, kp=kp // d, k_cat=k_cat // d, k_in=k_in, **block_flags)
        stages.append(StageSpec(n_blocks, bs, downsample=i > 0))
        k_in = bs.k_cat
    suffix = f"/w{d}" if d != 1 else ""
    return ModelSpec(f"treenet-{v}{suffix}", stem, tuple(stages), num_classes)


def osa_reference_spec(l: int, k: int, k_in: int, k_cat: int, **flags) -> ModelSpec:
    """One OSA block, no stem or classifier; for cost comparisons only."""
    bs = BlockSpec(l=l, k=k, kp=k, k_cat=k_cat, k_in=k_in, kind="osa", **flags)
    return ModelSpec(f"osa-l{l}-k{k}", None, (StageSpec(1, bs, False),), num_classes=0, in_channels=k_in, output_stride=1)


def tree_reference_spec(l: int, k: int, kp: int, k_in: int, k_cat: int, **flags) -> ModelSpec:
    bs = BlockSpec(l=l, k=k, kp=kp, k_cat=k_cat, k_in=k_in, kind="tree", **flags)
    return ModelSpec(f"tree-l{l}-k{k}-kp{kp}", None, (StageSpec(1, bs, False),), num_classes=0, in_channels=k_in, output_stride=1)


class Stage(Module):
    def __init__(self, spec: StageSpec, rng, dtype):
        super().__init__()
        self.spec = spec
        if spec.downsample:
            self.pool = MaxPool2d(3, 2, 1)
        for j, bs in enumerate(spec.block_specs(), start=1):
            self.add_module(f"block{j}", build_block(bs, rng=rng, dtype=dtype))

    def forward(self, x):
        if self.spec.downsample:
            x = self.pool(x)
        for j in range(1, self.spec.blocks + 1):
            x = getattr(self, f"block{j}")(x)
        return x


class Network(BlockGraph):
    """Stem, stages and classifier assembled from a ModelSpec."""

    def __init__(self, spec: ModelSpec, rng=None, dtype=np.float32):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.spec = spec
        self.in_channels = spec.in_channels
        if spec.stem:
            self.stem = Stem(spec.stem, spec.in_channels, rng=rng, dtype=dtype)
        self._stage_names = spec.stage_names()
        for name, st in zip(self._stage_names, spec.stages):
            self.add_module(name, Stage(st, rng, dtype))
        feat = spec.stages[-1].block.k_cat
        if spec.num_classes:
            self.classifier = Classifier(feat, spec.num_classes, rng=rng, dtype=dtype)
            self.out_channels = spec.num_classes
        else:
            self.out_channels = feat

    def features(self, x) -> dict:
        """Intermediate outputs keyed by 'stem', 'stage2', ... plus 'logits'."""
        out = {}
        if self.spec.stem:
            x = self.stem(x)
            out["stem"] = x
        for name in self._stage_names:
            x = getattr(self, name)(x)
            out[name] = x
        if self.spec.num_classes:
            out["logits"] = self.classifier(x)
        return out

    def forward(self, x):
        if self.spec.stem:
            x = self.stem(x)
        for name in self._stage_names:
            x = getattr(self, name)(x)
        if self.spec.num_classes:
            x = self.classifier(x)
        return x


def build_model(spec: ModelSpec, seed: int = 0, dtype=np.float32) -> Network:
    return Network(spec, rng=np.random.default_rng(seed), dtype=dtype)


def with_flags(spec: ModelSpec, **flags) -> ModelSpec:
    """Same network with every block's feature flags replaced."""
    stages = tuple(replace(st, block=replace(st.block, **flags)) for st in spec.stages)
    return replace(spec, stages=stages)
