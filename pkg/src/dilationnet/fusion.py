"""Feature fusion across resolutions: frozen backbones, joint dense head.

Stage-2 models are assembled, not trained from scratch: each member's conv
stack is lifted out of its stage-1 checkpoint, pinned in inference mode, and
only the dense head on top of the concatenated features learns.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .checkpoint import Checkpoint, CheckpointError, _net_entries, net_from_checkpoint
from .networks import (
    RESOLUTION_BY_VARIANT,
    VARIANTS,
    DenseUnit,
    GlobalPoolUnit,
    NetStructure,
    net_from_description,
    structure_description,
)
from .ops import concat
from .tensor import Tensor, suspend_recording

HEAD_WIDTHS = (256, 64, 16, 1)


@dataclass
class FrozenBackbone:
    """Conv stack of a trained net: stem, blocks and global pool, head stripped."""

    variant: str
    resolution: int
    feature_width: int
    net: NetStructure

    def features(self, images) -> Tensor:
        """(batch, r, r, 3) -> (batch, feature_width), invisible to records."""
        with suspend_recording():
            out = self.net.forward(images, training=False)
        return out


def extract_backbone(ckpt: Checkpoint, expect_variant: str | None = None) -> FrozenBackbone:
    net = net_from_checkpoint(ckpt)
    if expect_variant is not None and net.tag != expect_variant:
        raise CheckpointError(f"checkpoint holds variant {net.tag}, "
                              f"expected {expect_variant}")
    pool_at = next((i for i, layer in enumerate(net.layers)
                    if isinstance(layer, GlobalPoolUnit)), None)
    if pool_at is None or not any(isinstance(l, DenseUnit) for l in net.layers):
        raise CheckpointError("checkpoint does not hold a full classifier "
                              "(pool or dense head missing)")
    backbone = NetStructure(net.layers[:pool_at + 1], net.input_shape, net.tag)
    for name in backbone.params:
        backbone.params[name] = Tensor(net.params[name].data.copy())
    for name, state in backbone.bn_states.items():
        state.running_mean = net.bn_states[name].running_mean.copy()
        state.running_var = net.bn_states[name].running_var.copy()
    return FrozenBackbone(variant=net.tag, resolution=net.input_shape[0],
                          feature_width=backbone.feature_width(), net=backbone)


@dataclass(frozen=True)
class FusionSpec:
    """Which variants to fuse, and the dense-head widths stacked on top."""

    members: tuple[str, ...]
    widths: tuple[int, ...] = HEAD_WIDTHS

    def __post_init__(self):
        members = tuple(self.members)
        if len(members) < 2:
            raise ValueError("fusion needs at least two member variants")
        if len(set(members)) != len(members):
            raise ValueError(f"duplicate members in {members}")
        unknown = [m for m in members if m not in RESOLUTION_BY_VARIANT]
        if unknown:
            raise ValueError(f"unknown variants {unknown}; choose from {VARIANTS}")
        ordered = tuple(sorted(members, key=RESOLUTION_BY_VARIANT.get))
        object.__setattr__(self, "members", ordered)
        widths = tuple(int(w) for w in self.widths)
        if len(widths) != 4:
            raise ValueError("the head stacks exactly four dense layers, "
                             f"got widths {widths}")
        if widths[-1] != 1 or any(w < 1 for w in widths):
            raise ValueError(f"head widths must be positive and end at 1, "
                             f"got {widths}")
        object.__setattr__(self, "widths", widths)

    @property
    def label(self) -> str:
        return "+".join(self.members)

    @property
    def resolutions(self) -> tuple[int, ...]:
        return tuple(RESOLUTION_BY_VARIANT[m] for m in self.members)


def enumerate_combinations(variants: Sequence[str] = VARIANTS) -> list[FusionSpec]:
    """Every subset of size >= 2, sizes ascending, members in variant order."""
    return [FusionSpec(members=combo)
            for size in range(2, len(variants) + 1)
            for combo in itertools.combinations(tuple(variants), size)]


def fused_width(backbones: Sequence[FrozenBackbone]) -> int:
    return sum(bb.feature_width for bb in backbones)


def build_fusion_head(spec: FusionSpec, in_width: int, seed: int = 0) -> NetStructure:
    layers = []
    width = in_width
    for i, out in enumerate(spec.widths, start=1):
        activation = "sigmoid" if i == len(spec.widths) else "relu"
        layers.append(DenseUnit(f"fuse{i}", width, out, activation=activation))
        width = out
    return NetStructure(layers, (in_width,), spec.label, seed=seed)


def _ordered(backbones: Sequence[FrozenBackbone]) -> list[FrozenBackbone]:
    ordered = sorted(backbones, key=lambda bb: bb.resolution)
    if len({bb.variant for bb in ordered}) != len(ordered):
        raise ValueError("duplicate backbone variants")
    return ordered


def fused_features(backbones: Sequence[FrozenBackbone],
                   group: Mapping[int, "Batch"]) -> Tensor:
    """Concatenate member features for one aligned multi-resolution batch.

    The group maps resolution -> Batch; every member's resolution must be
    present and all streams must carry the same samples in the same order.
    """
    ordered = _ordered(backbones)
    missing = [bb.resolution for bb in ordered if bb.resolution not in group]
    if missing:
        raise ValueError(f"batch group lacks resolutions {missing}")
    ids = group[ordered[0].resolution].ids
    for bb in ordered[1:]:
        if group[bb.resolution].ids != ids:
            raise ValueError("sample ids differ across resolution streams; "
                             "batches are misaligned")
    return concat([bb.features(group[bb.resolution].images) for bb in ordered],
                  axis=1)


def fusion_forward(backbones: Sequence[FrozenBackbone], head: NetStructure,
                   group: Mapping[int, "Batch"]) -> Tensor:
    return head.forward(fused_features(backbones, group))


# -- persistence --------------------------------------------------------------

def fusion_checkpoint(spec: FusionSpec, backbones: Sequence[FrozenBackbone],
                      head: NetStructure,
                      provenance: dict | None = None) -> Checkpoint:
    """Self-contained stage-2 artifact: members' conv stacks plus the head."""
    ordered = _ordered(backbones)
    if tuple(bb.variant for bb in ordered) != spec.members:
        raise ValueError(f"backbones {[bb.variant for bb in ordered]} do not "
                         f"match fusion members {spec.members}")
    structure = {
        "fusion": {"members": list(spec.members), "widths": list(spec.widths)},
        "backbones": {bb.variant: structure_description(bb.net)
                      for bb in ordered},
        "head": structure_description(head),
    }
    tensors: dict[str, np.ndarray] = {}
    for bb in ordered:
        for name, arr in _net_entries(bb.net):
            tensors[f"backbone.{bb.variant}.{name}"] = np.ascontiguousarray(
                arr, dtype=np.float32)
    for name, arr in _net_entries(head):
        tensors[f"head.{name}"] = np.ascontiguousarray(arr, dtype=np.float32)
    return Checkpoint(kind="fusion", variant=spec.label, structure=structure,
                      tensors=tensors, provenance=provenance or {})


def load_fusion(ckpt: Checkpoint) -> tuple[FusionSpec, list[FrozenBackbone], NetStructure]:
    if ckpt.kind != "fusion":
        raise CheckpointError(f"expected a fusion checkpoint, got {ckpt.kind!r}")
    info = ckpt.structure["fusion"]
    spec = FusionSpec(members=tuple(info["members"]), widths=tuple(info["widths"]))

    def fill(net: NetStructure, prefix: str) -> None:
        for name, current in _net_entries(net):
            key = f"{prefix}{name}"
            if key not in ckpt.tensors:
                raise CheckpointError(f"fusion checkpoint lacks tensor {key}")
            arr = ckpt.tensors[key]
            if arr.shape != current.shape:
                raise CheckpointError(f"tensor {key}: shape {arr.shape} does "
                                      f"not match structure {current.shape}")
        for name in net.params:
            net.params[name] = Tensor(ckpt.tensors[f"{prefix}{name}"].copy())
        for name, state in net.bn_states.items():
            state.running_mean = ckpt.tensors[f"{prefix}{name}.running_mean"].copy()
            state.running_var = ckpt.tensors[f"{prefix}{name}.running_var"].copy()

    backbones = []
    for member in spec.members:
        desc = ckpt.structure["backbones"][member]
        net = net_from_description(desc)
        fill(net, f"backbone.{member}.")
        backbones.append(FrozenBackbone(variant=member,
                                        resolution=net.input_shape[0],
                                        feature_width=net.feature_width(),
                                        net=net))
    head = net_from_description(ckpt.structure["head"])
    fill(head, "head.")
    return spec, backbones, head
