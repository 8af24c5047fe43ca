"""Cloud (C) and edge (E) diagnosis networks.

Both networks share a structurally identical front feature extractor
(the ``pre_fe.*`` subtree): two 3x3 conv+BN+ReLU stages. The cloud model
continues with residual stages, the edge model with exactly four
depthwise-separable stages; each posterior block ends in global average
pooling and a projection dense layer to a common feature width, so the
two feature vectors are directly comparable for distribution alignment.
A single dense layer maps features to class logits.

``share_pre_fe`` copies (never aliases) the front block cloud -> edge;
``freeze_pre_fe`` locks those weights and pins their batch-norm layers
to eval mode so the running statistics captured at the end of cloud
training stay fixed.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .layers import (
    BatchNormLayer,
    BuildError,
    Conv2dLayer,
    DenseLayer,
    DepthwiseSeparableBlock,
    ParamStore,
    ResidualBlock,
    global_avg_pool,
)
from .tensor import Tensor, relu

__all__ = [
    "ModelConfig",
    "ArchEntry",
    "CModel",
    "EModel",
    "build_model",
    "share_pre_fe",
    "freeze_pre_fe",
]

PRE_FE_PREFIX = "pre_fe."


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters shared by both models.

    ``pre_fe_channels`` is the single shared front-block definition;
    ``e_stage_channels`` must name exactly four depthwise-separable
    stages. Defaults are sized for CPU training while keeping the edge
    model far smaller than the cloud model.
    """

    input_shape: tuple = (6, 32, 32)
    num_classes: int = 5
    pre_fe_channels: tuple = (12, 12)
    c_stage_channels: tuple = (32, 48, 64, 96)
    c_blocks_per_stage: int = 1
    e_stage_channels: tuple = (16, 24, 32, 48)
    feature_dim: int = 48

    def validate(self) -> None:
        if len(self.input_shape) != 3 or any(int(s) <= 0 for s in self.input_shape):
            raise BuildError(f"input_shape must be [C,H,W] of positive sizes, got {self.input_shape}")
        if self.num_classes < 2:
            raise BuildError(f"num_classes must be >= 2, got {self.num_classes}")
        if len(self.e_stage_channels) != 4:
            raise BuildError(
                f"e_stage_channels must have exactly 4 stages, got {len(self.e_stage_channels)}"
            )
        for fld in ("pre_fe_channels", "c_stage_channels", "e_stage_channels"):
            vals = getattr(self, fld)
            if not vals or any(int(v) <= 0 for v in vals):
                raise BuildError(f"{fld} must be non-empty positive widths, got {vals}")
        if self.c_blocks_per_stage < 1:
            raise BuildError(f"c_blocks_per_stage must be >= 1, got {self.c_blocks_per_stage}")
        if self.feature_dim < 1:
            raise BuildError(f"feature_dim must be >= 1, got {self.feature_dim}")


@dataclass
class ArchEntry:
    """One atomic op of a model's forward pass, for complexity analysis."""

    name: str
    kind: str  # conv | bn | relu | add | gap | dense
    in_shape: tuple  # per-sample [C,H,W] or [D]
    out_shape: tuple
    layer: object = None


class _PreFE:
    def __init__(self, store: ParamStore, config: ModelConfig, rng: np.random.Generator):
        self.convs: List[Conv2dLayer] = []
        self.bns: List[BatchNormLayer] = []
        in_c = config.input_shape[0]
        for i, width in enumerate(config.pre_fe_channels, start=1):
            self.convs.append(
                Conv2dLayer(store, f"pre_fe.conv{i}", in_c, int(width), 3, padding=1, rng=rng)
            )
            self.bns.append(BatchNormLayer(store, f"pre_fe.bn{i}", int(width)))
            in_c = int(width)
        self.out_channels = in_c

    def forward(self, x: Tensor) -> Tensor:
        h = x
        for conv, bn in zip(self.convs, self.bns):
            h = relu(bn.forward(conv.forward(h)))
        return h


class _Model:
    """Shared behavior of both networks, keyed off a ParamStore."""

    kind = ""

    def __init__(self, config: ModelConfig, seed: int):
        config.validate()
        self.config = config
        self.seed = seed
        self.store = ParamStore()
        self._rng = np.random.default_rng(seed)
        self.pre_fe = _PreFE(self.store, config, self._rng)

    # subclasses populate these
    proj: DenseLayer
    classifier: DenseLayer

    def bn_layers(self) -> list:
        bns = list(self.pre_fe.bns)
        bns.extend(self._pos_fe_bns())
        return bns

    def set_training(self, flag: bool) -> None:
        for bn in self.bn_layers():
            bn.set_training(flag)

    def forward_pre_fe(self, x: Tensor) -> Tensor:
        return self.pre_fe.forward(x)

    def features_from_pre_fe(self, h: Tensor) -> Tensor:
        h = self._pos_fe_forward(h)
        return relu(self.proj.forward(global_avg_pool(h)))

    def forward_features(self, x: Tensor) -> Tensor:
        """Pooled feature vector [N, feature_dim]; the alignment target."""
        return self.features_from_pre_fe(self.forward_pre_fe(x))

    def classify(self, features: Tensor) -> Tensor:
        return self.classifier.forward(features)

    def forward_logits(self, x: Tensor) -> Tensor:
        return self.classify(self.forward_features(x))

    # --- structure description -------------------------------------------

    def architecture(self, input_shape: Optional[tuple] = None) -> List[ArchEntry]:
        entries: List[ArchEntry] = []
        shape = tuple(int(s) for s in (input_shape or self.config.input_shape))
        if len(shape) != 3 or shape[0] != self.config.input_shape[0]:
            raise BuildError(f"input shape {shape} does not match the model's channel count")
        for i, (conv, bn) in enumerate(zip(self.pre_fe.convs, self.pre_fe.bns), start=1):
            out = conv.out_shape(shape)
            entries.append(ArchEntry(conv.name, "conv", shape, out, conv))
            entries.append(ArchEntry(bn.name, "bn", out, out, bn))
            entries.append(ArchEntry(f"pre_fe.relu{i}", "relu", out, out))
            shape = out
        shape = self._pos_fe_architecture(entries, shape)
        pooled = (shape[0],)
        entries.append(ArchEntry(self._pos_name + ".gap", "gap", shape, pooled))
        feat = (self.config.feature_dim,)
        entries.append(ArchEntry(self.proj.name, "dense", pooled, feat, self.proj))
        entries.append(ArchEntry(self._pos_name + ".proj_relu", "relu", feat, feat))
        logits = (self.config.num_classes,)
        entries.append(ArchEntry(self.classifier.name, "dense", feat, logits, self.classifier))
        return entries

    def _pos_fe_bns(self) -> list:
        raise NotImplementedError

    def _pos_fe_forward(self, h: Tensor) -> Tensor:
        raise NotImplementedError

    def _pos_fe_architecture(self, entries, shape) -> tuple:
        raise NotImplementedError


class CModel(_Model):
    """Deep residual cloud network."""

    kind = "cloud"
    _pos_name = "c_pos_fe"

    def __init__(self, config: ModelConfig, seed: int):
        super().__init__(config, seed)
        self.stages: List[List[ResidualBlock]] = []
        in_c = self.pre_fe.out_channels
        for si, width in enumerate(config.c_stage_channels, start=1):
            blocks = []
            for bi in range(config.c_blocks_per_stage):
                blocks.append(
                    ResidualBlock(
                        self.store,
                        f"c_pos_fe.stage{si}.block{bi + 1}",
                        in_c,
                        int(width),
                        stride=2 if bi == 0 else 1,
                        rng=self._rng,
                    )
                )
                in_c = int(width)
            self.stages.append(blocks)
        self.proj = DenseLayer(self.store, "c_pos_fe.proj", in_c, config.feature_dim, rng=self._rng)
        self.classifier = DenseLayer(
            self.store, "classifier", config.feature_dim, config.num_classes, rng=self._rng
        )

    def _pos_fe_bns(self):
        return [bn for blocks in self.stages for b in blocks for bn in b.bn_layers()]

    def _pos_fe_forward(self, h):
        for blocks in self.stages:
            for b in blocks:
                h = b.forward(h)
        return h

    def _pos_fe_architecture(self, entries, shape):
        for blocks in self.stages:
            for b in blocks:
                out = b.out_shape(shape)
                mid = b.conv1.out_shape(shape)
                entries.append(ArchEntry(b.conv1.name, "conv", shape, mid, b.conv1))
                entries.append(ArchEntry(b.bn1.name, "bn", mid, mid, b.bn1))
                entries.append(ArchEntry(b.name + ".relu1", "relu", mid, mid))
                entries.append(ArchEntry(b.conv2.name, "conv", mid, out, b.conv2))
                entries.append(ArchEntry(b.bn2.name, "bn", out, out, b.bn2))
                if b.proj is not None:
                    entries.append(ArchEntry(b.proj.name, "conv", shape, out, b.proj))
                    entries.append(ArchEntry(b.proj_bn.name, "bn", out, out, b.proj_bn))
                entries.append(ArchEntry(b.name + ".add", "add", out, out))
                entries.append(ArchEntry(b.name + ".relu2", "relu", out, out))
                shape = out
        return shape


class EModel(_Model):
    """Lightweight edge network: four depthwise-separable stages."""

    kind = "edge"
    _pos_name = "e_pos_fe"

    def __init__(self, config: ModelConfig, seed: int):
        super().__init__(config, seed)
        self.blocks: List[DepthwiseSeparableBlock] = []
        in_c = self.pre_fe.out_channels
        for si, width in enumerate(config.e_stage_channels, start=1):
            self.blocks.append(
                DepthwiseSeparableBlock(
                    self.store, f"e_pos_fe.stage{si}", in_c, int(width), stride=2, rng=self._rng
                )
            )
            in_c = int(width)
        self.proj = DenseLayer(self.store, "e_pos_fe.proj", in_c, config.feature_dim, rng=self._rng)
        self.classifier = DenseLayer(
            self.store, "classifier", config.feature_dim, config.num_classes, rng=self._rng
        )

    def _pos_fe_bns(self):
        return [bn for b in self.blocks for bn in b.bn_layers()]

    def _pos_fe_forward(self, h):
        for b in self.blocks:
            h = b.forward(h)
        return h

    def _pos_fe_architecture(self, entries, shape):
        for b in self.blocks:
            mid = b.depthwise.out_shape(shape)
            out = b.pointwise.out_shape(mid)
            entries.append(ArchEntry(b.depthwise.name, "conv", shape, mid, b.depthwise))
            entries.append(ArchEntry(b.dw_bn.name, "bn", mid, mid, b.dw_bn))
            entries.append(ArchEntry(b.name + ".dw_relu", "relu", mid, mid))
            entries.append(ArchEntry(b.pointwise.name, "conv", mid, out, b.pointwise))
            entries.append(ArchEntry(b.pw_bn.name, "bn", out, out, b.pw_bn))
            entries.append(ArchEntry(b.name + ".pw_relu", "relu", out, out))
            shape = out
        return shape


def build_model(config: ModelConfig, kind: str, seed: int):
    """Deterministically initialized model; same (config, seed) -> same bits."""
    if kind == "cloud":
        return CModel(config, seed)
    if kind == "edge":
        return EModel(config, seed)
    raise BuildError(f"unknown model kind: {kind!r} (expected 'cloud' or 'edge')")


def _pre_fe_names(store: ParamStore) -> list:
    return [n for n in store.names() if n.startswith(PRE_FE_PREFIX)]


def share_pre_fe(source: CModel, target: EModel) -> None:
    """Copy every pre_fe.* tensor from source to target (copy, not alias)."""
    src_names = _pre_fe_names(source.store)
    tgt_names = _pre_fe_names(target.store)
    if src_names != tgt_names:
        extra = next(iter(set(src_names) ^ set(tgt_names)))
        raise BuildError(f"pre_fe structure mismatch at entry {extra!r}")
    for name in src_names:
        src = source.store[name]
        tgt = target.store[name]
        if src.shape != tgt.shape:
            raise BuildError(
                f"pre_fe shape mismatch at {name!r}: {list(src.shape)} vs {list(tgt.shape)}"
            )
        tgt.data[...] = src.data.copy()


def freeze_pre_fe(model: _Model) -> None:
    """Flag pre_fe.* entries frozen and pin its batch norms to eval mode."""
    model.store.freeze_prefix(PRE_FE_PREFIX)
    for bn in model.pre_fe.bns:
        bn.freeze()
