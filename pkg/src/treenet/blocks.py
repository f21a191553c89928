"""Tree, OSA and supporting blocks built from the leaf layers."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from treenet import ops
from treenet.layers import (
    ECA,
    Add,
    BatchNorm2d,
    Concat,
    Conv2d,
    GlobalAvgPool,
    Linear,
    Module,
    ReLU,
)


@dataclass(frozen=True)
class BlockSpec:
    """Geometry and feature flags of one OSA or Tree block.

    ``l`` is the number of 3x3 stages, ``k`` the branch width, ``kp`` the
    trunk bottleneck width (ignored by OSA blocks), ``k_cat`` the transition
    width and ``k_in`` the input width.
    """

    l: int
    k: int
    kp: int
    k_cat: int
    k_in: int
    use_srb: bool = False
    use_residual: bool = False
    use_eca: bool = False
    kind: str = "tree"
    eca_kernel: Optional[int] = None

    def __post_init__(self):
        if self.kind not in ("tree", "osa"):
            raise ValueError(f"unknown block kind {self.kind!r}")
        if min(self.k, self.kp, self.k_cat, self.k_in) <= 0 or self.l < 1:
            raise ValueError(f"block widths and depth must be positive: {self}")
        if self.kind == "tree" and self.l < 2:
            raise ValueError(f"Tree blocks need l >= 2, got l={self.l}")

    @property
    def concat_width(self) -> int:
        if self.kind == "tree":
            return (self.l + 1) * self.k
        return self.k_in + self.l * self.k

    def with_input(self, k_in: int) -> "BlockSpec":
        return replace(self, k_in=k_in)


class BlockGraph(Module):
    """A composite with declared input/output channel counts."""

    in_channels: int = 0
    out_channels: int = 0

    def weight_count(self) -> int:
        """Convolution/FC/attention weights only: BN affine terms are left out."""
        return self.num_parameters(include_bn=False)


class ConvBNReLU(BlockGraph):
    def __init__(self, in_ch, out_ch, kernel, stride=1, rng=None, dtype=np.float32):
        super().__init__()
        self.in_channels, self.out_channels = in_ch, out_ch
        self.conv = Conv2d(in_ch, out_ch, kernel, stride, rng=rng, dtype=dtype)
        self.bn = BatchNorm2d(out_ch, dtype=dtype)
        self.relu = ReLU()

    def forward(self, x):
        return self.relu(self.bn(self.conv(x)))


class SRB(BlockGraph):
    """3x3 conv with an identity skip added before BN+ReLU.

    The skip exists only when input and output widths agree, so the weight
    count is always that of the plain 3x3 conv.
    """

    def __init__(self, in_ch, out_ch, rng=None, dtype=np.float32):
        super().__init__()
        self.in_channels, self.out_channels = in_ch, out_ch
        self.has_skip = in_ch == out_ch
        self.conv = Conv2d(in_ch, out_ch, 3, 1, 1, rng=rng, dtype=dtype)
        if self.has_skip:
            self.skip = Add()
        self.bn = BatchNorm2d(out_ch, dtype=dtype)
        self.relu = ReLU()

    def forward(self, x):
        y = self.conv(x)
        if self.has_skip:
            y = self.skip(y, x)
        return self.relu(self.bn(y))


def build_srb(in_ch: int, out_ch: int, rng=None, dtype=np.float32) -> SRB:
    return SRB(in_ch, out_ch, rng=rng, dtype=dtype)


def build_eca(channels: int, kernel_size: Optional[int] = None, rng=None, dtype=np.float32) -> ECA:
    return ECA(channels, kernel_size, rng=rng, dtype=dtype)


class OSABlock(BlockGraph):
    def __init__(self, spec: BlockSpec, rng=None, dtype=np.float32):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.spec = spec
        self.in_channels, self.out_channels = spec.k_in, spec.k_cat
        self.n_layers = spec.l
        ch = spec.k_in
        for i in range(1, spec.l + 1):
            self.add_module(f"conv{i}", ConvBNReLU(ch, spec.k, 3, rng=rng, dtype=dtype))
            ch = spec.k
        self.concat = Concat()
        self.transition = ConvBNReLU(spec.concat_width, spec.k_cat, 1, rng=rng, dtype=dtype)
        if spec.use_eca:
            self.eca = ECA(spec.k_cat, spec.eca_kernel, rng=rng, dtype=dtype)
        self.has_residual = spec.use_residual and spec.k_in == spec.k_cat
        if self.has_residual:
            self.residual = Add()

    def forward(self, x):
        feats = [x]
        y = x
        for i in range(1, self.n_layers + 1):
            y = getattr(self, f"conv{i}")(y)
            feats.append(y)
        out = self.transition(self.concat(*feats))
        if self.spec.use_eca:
            out = self.eca(out)
        if self.has_residual:
            out = self.residual(out, x)
        return out


class TreeBlock(BlockGraph):
    """Tree block: a k'-wide 3x3 trunk whose steps each emit a 1x1 k-wide branch.

    Layer names: ``branch0`` (1x1 on the input), ``trunk1..trunk{l-1}`` (3x3
    trunk), ``proj1..proj{l-1}`` (1x1 branch off each trunk step), ``last``
    (final 3x3 to k), then ``concat``, ``transition`` and optional ``eca`` /
    ``residual``.
    """

    def __init__(self, spec: BlockSpec, rng=None, dtype=np.float32):
        super().__init__()
        if spec.kind != "tree":
            raise ValueError("TreeBlock needs a tree BlockSpec")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.spec = spec
        self.in_channels, self.out_channels = spec.k_in, spec.k_cat
        l, k, kp = spec.l, spec.k, spec.kp

        def conv3(cin, cout):
            if spec.use_srb:
                return SRB(cin, cout, rng=rng, dtype=dtype)
            return ConvBNReLU(cin, cout, 3, rng=rng, dtype=dtype)

        self.branch0 = ConvBNReLU(spec.k_in, k, 1, rng=rng, dtype=dtype)
        cin = spec.k_in
        for i in range(1, l):
            self.add_module(f"trunk{i}", conv3(cin, kp))
            self.add_module(f"proj{i}", ConvBNReLU(kp, k, 1, rng=rng, dtype=dtype))
            cin = kp
        self.last = conv3(kp, k)
        self.concat = Concat()
        self.transition = ConvBNReLU(spec.concat_width, spec.k_cat, 1, rng=rng, dtype=dtype)
        if spec.use_eca:
            self.eca = ECA(spec.k_cat, spec.eca_kernel, rng=rng, dtype=dtype)
        self.has_residual = spec.use_residual and spec.k_in == spec.k_cat
        if self.has_residual:
            self.residual = Add()

    @property
    def n_conv3(self) -> int:
        return self.spec.l

    def forward(self, x):
        branches = [self.branch0(x)]
        t = x
        for i in range(1, self.spec.l):
            t = getattr(self, f"trunk{i}")(t)
            branches.append(getattr(self, f"proj{i}")(t))
        branches.append(self.last(t))
        out = self.transition(self.concat(*branches))
        if self.spec.use_eca:
            out = self.eca(out)
        if self.has_residual:
            out = self.residual(out, x)
        return out


def build_osa_block(spec: BlockSpec, rng=None, dtype=np.float32) -> OSABlock:
    return OSABlock(replace(spec, kind="osa"), rng=rng, dtype=dtype)


def build_tree_block_basic(spec: BlockSpec, rng=None, dtype=np.float32) -> TreeBlock:
    return TreeBlock(replace(spec, kind="tree", use_srb=False, use_residual=False, use_eca=False), rng, dtype)


def build_tree_block_complete(spec: BlockSpec, rng=None, dtype=np.float32) -> TreeBlock:
    return TreeBlock(replace(spec, kind="tree", use_srb=True, use_residual=True, use_eca=True), rng, dtype)


def build_block(spec: BlockSpec, rng=None, dtype=np.float32) -> BlockGraph:
    """Build an OSA or Tree block from ``spec``, honouring its feature flags as given."""
    if spec.kind == "osa":
        return OSABlock(spec, rng, dtype)
    return TreeBlock(spec, rng, dtype)


class Stem(BlockGraph):
    def __init__(self, widths=(64, 64, 128), in_ch=3, rng=None, dtype=np.float32):
        super().__init__()
        w1, w2, w3 = widths
        self.in_channels, self.out_channels = in_ch, w3
        self.conv1 = ConvBNReLU(in_ch, w1, 3, stride=2, rng=rng, dtype=dtype)
        self.conv2 = ConvBNReLU(w1, w2, 3, stride=1, rng=rng, dtype=dtype)
        self.conv3 = ConvBNReLU(w2, w3, 3, stride=2, rng=rng, dtype=dtype)

    def forward(self, x):
        if x.shape[1] != self.in_channels:
            raise ValueError(f"stem expects {self.in_channels}-channel input, got {x.shape[1]}")
        return self.conv3(self.conv2(self.conv1(x)))


def build_stem(widths=(64, 64, 128), rng=None, dtype=np.float32) -> Stem:
    return Stem(widths, rng=rng, dtype=dtype)


class Classifier(BlockGraph):
    """Global average pool then a fully-connected layer; returns logits."""

    def __init__(self, in_ch=1024, classes=1000, rng=None, dtype=np.float32):
        super().__init__()
        self.in_channels, self.out_channels = in_ch, classes
        self.gap = GlobalAvgPool()
        self.fc = Linear(in_ch, classes, rng=rng, dtype=dtype)

    def forward(self, x):
        return self.fc(ops.reshape(self.gap(x), (x.shape[0], x.shape[1])))


def build_classifier(in_ch: int = 1024, classes: int = 1000, rng=None, dtype=np.float32) -> Classifier:
    return Classifier(in_ch, classes, rng=rng, dtype=dtype)
