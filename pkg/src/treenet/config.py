"""Experiment config documents: indentation-nested ``key: value`` text.

A document has up to three sections::

    model:            # either explicit geometry or a shorthand
      arch: treenet-20
      width_divisor: 4
      num_classes: 4
    train: {...TrainConfig fields...}
    data: {...DataConfig fields...}

:func:`render` always writes the explicit model form, so
``parse(render(doc)) == doc``.  Unknown keys fail with ``file:line:col``.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Optional

import yaml

from treenet.blocks import BlockSpec
from treenet.train import DataConfig, TrainConfig
from treenet.zoo import ModelSpec, StageSpec, treenet_spec


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ConfigDoc:
    model: ModelSpec
    train: Optional[TrainConfig] = None
    data: Optional[DataConfig] = None


_SCALARS = {"int": int, "float": float, "bool": bool, "str": str}
_SHORTHAND_KEYS = {"arch", "width_divisor", "num_classes", "use_srb", "use_residual", "use_eca"}


class _Reader:
    def __init__(self, text: str, source: str):
        self.source = source
        self.loader = yaml.SafeLoader(text)
        try:
            self.root = self.loader.get_single_node()
        except yaml.YAMLError as exc:
            raise ConfigError(f"{source}: malformed config: {exc}") from None

    def where(self, node) -> str:
        m = node.start_mark
        return f"{self.source}:{m.line + 1}:{m.column + 1}"

    def mapping(self, node, path: str) -> dict:
        if not isinstance(node, yaml.MappingNode):
            raise ConfigError(f"{self.where(node)}: section {path or '<root>'} must be a mapping")
        out = {}
        for knode, vnode in node.value:
            key = knode.value
            if key in out:
                raise ConfigError(f"{self.where(knode)}: duplicate key {key!r} in {path or '<root>'}")
            out[key] = (knode, vnode)
        return out

    def scalar(self, node, typ: str, path: str):
        if not isinstance(node, yaml.ScalarNode):
            raise ConfigError(f"{self.where(node)}: {path} must be a scalar")
        value = self.loader.construct_object(node)
        optional = typ.startswith("Optional[")
        base = typ[9:-1] if optional else typ
        if value is None and optional:
            return None
        conv = _SCALARS[base]
        if base == "float" and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        if not isinstance(value, conv) or (conv is int and isinstance(value, bool)):
            raise ConfigError(f"{self.where(node)}: {path} expects {base}, got {value!r}")
        return value

    def dataclass(self, cls, node, path: str, skip=()):
        entries = self.mapping(node, path)
        fields = {f.name: f for f in dataclasses.fields(cls) if f.name not in skip}
        for key, (knode, _) in entries.items():
            if key not in fields:
                raise ConfigError(f"{self.where(knode)}: unknown key {key!r} in {path}; allowed: {sorted(fields)}")
        kwargs = {}
        for name, f in fields.items():
            if name in entries:
                kwargs[name] = self.scalar(entries[name][1], str(f.type), f"{path}.{name}")
            elif f.default is dataclasses.MISSING:
                raise ConfigError(f"{self.where(node)}: missing key {name!r} in {path}")
        try:
            return cls(**kwargs)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{self.where(node)}: invalid {path}: {exc}") from None

    def int_list(self, node, path: str) -> tuple:
        if not isinstance(node, yaml.SequenceNode):
            raise ConfigError(f"{self.where(node)}: {path} must be a list")
        return tuple(self.scalar(n, "int", f"{path}[{i}]") for i, n in enumerate(node.value))

    def model(self, node) -> ModelSpec:
        entries = self.mapping(node, "model")
        if "arch" in entries:
            for key, (knode, _) in entries.items():
                if key not in _SHORTHAND_KEYS:
                    raise ConfigError(f"{self.where(knode)}: unknown key {key!r} in model; allowed: {sorted(_SHORTHAND_KEYS)}")
            arch = self.scalar(entries["arch"][1], "str", "model.arch")
            kwargs = {}
            if "width_divisor" in entries:
                kwargs["width_divisor"] = self.scalar(entries["width_divisor"][1], "int", "model.width_divisor")
            if "num_classes" in entries:
                kwargs["num_classes"] = self.scalar(entries["num_classes"][1], "int", "model.num_classes")
            for flag in ("use_srb", "use_residual", "use_eca"):
                if flag in entries:
                    kwargs[flag] = self.scalar(entries[flag][1], "bool", f"model.{flag}")
            try:
                return treenet_spec(arch, **kwargs)
            except ValueError as exc:
                raise ConfigError(f"{self.where(entries['arch'][1])}: {exc}") from None

        allowed = {f.name for f in dataclasses.fields(ModelSpec)}
        for key, (knode, _) in entries.items():
            if key not in allowed:
                raise ConfigError(f"{self.where(knode)}: unknown key {key!r} in model; allowed: {sorted(allowed)}")
        for req in ("name", "stages"):
            if req not in entries:
                raise ConfigError(f"{self.where(node)}: missing key {req!r} in model")
        stem = None
        if "stem" in entries and not _is_null(entries["stem"][1]):
            stem = self.int_list(entries["stem"][1], "model.stem")
        snode = entries["stages"][1]
        if not isinstance(snode, yaml.SequenceNode):
            raise ConfigError(f"{self.where(snode)}: model.stages must be a list")
        stages = []
        for i, st in enumerate(snode.value):
            path = f"model.stages[{i}]"
            st_entries = self.mapping(st, path)
            for key, (knode, _) in st_entries.items():
                if key not in ("blocks", "downsample", "block"):
                    raise ConfigError(f"{self.where(knode)}: unknown key {key!r} in {path}")
            if "block" not in st_entries or "blocks" not in st_entries:
                raise ConfigError(f"{self.where(st)}: {path} needs 'blocks' and 'block'")
            block = self.dataclass(BlockSpec, st_entries["block"][1], f"{path}.block")
            n = self.scalar(st_entries["blocks"][1], "int", f"{path}.blocks")
            down = self.scalar(st_entries["downsample"][1], "bool", f"{path}.downsample") if "downsample" in st_entries else False
            stages.append(StageSpec(n, block, down))
        kwargs = dict(name=self.scalar(entries["name"][1], "str", "model.name"), stem=stem, stages=tuple(stages))
        for key in ("num_classes", "in_channels", "output_stride"):
            if key in entries:
                kwargs[key] = self.scalar(entries[key][1], "int", f"model.{key}")
        return ModelSpec(**kwargs)


def _is_null(node) -> bool:
    return isinstance(node, yaml.ScalarNode) and node.tag.endswith(":null")


def parse(text: str, source: str = "<config>") -> ConfigDoc:
    rd = _Reader(text, source)
    if rd.root is None:
        raise ConfigError(f"{source}: empty config")
    entries = rd.mapping(rd.root, "")
    for key, (knode, _) in entries.items():
        if key not in ("model", "train", "data"):
            raise ConfigError(f"{rd.where(knode)}: unknown section {key!r}; allowed: data, model, train")
    if "model" not in entries:
        raise ConfigError(f"{source}: missing 'model' section")
    model = rd.model(entries["model"][1])
    train = rd.dataclass(TrainConfig, entries["train"][1], "train") if "train" in entries else None
    data = rd.dataclass(DataConfig, entries["data"][1], "data") if "data" in entries else None
    return ConfigDoc(model, train, data)


def load(path) -> ConfigDoc:
    with open(path, encoding="utf-8") as f:
        return parse(f.read(), str(path))


def _model_dict(spec: ModelSpec) -> dict:
    return {
        "name": spec.name,
        "num_classes": spec.num_classes,
        "in_channels": spec.in_channels,
        "output_stride": spec.output_stride,
        "stem": list(spec.stem) if spec.stem else None,
        "stages": [
            {"blocks": st.blocks, "downsample": st.downsample, "block": dataclasses.asdict(st.block)}
            for st in spec.stages
        ],
    }


def render(doc: ConfigDoc) -> str:
    out = {"model": _model_dict(doc.model)}
    if doc.train is not None:
        out["train"] = dataclasses.asdict(doc.train)
    if doc.data is not None:
        out["data"] = dataclasses.asdict(doc.data)
    return yaml.safe_dump(out, sort_keys=False, default_flow_style=False)


def default_train_doc() -> ConfigDoc:
    """Desk-scale default: quarter-width TreeNet-20 on 4-class 64x64 blobs."""
    from treenet.train import desk_config

    return ConfigDoc(treenet_spec(20, width_divisor=4, num_classes=4), desk_config(), DataConfig())
