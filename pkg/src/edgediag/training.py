"""Cloud-side supervised training and edge-side knowledge transfer.

Transfer runs after the front block has been shared and frozen. Each
iteration draws one class-balanced source batch and one target batch,
computes the alignment loss between the (fixed) cloud features of the
source batch and the edge features of the target batch, the smoothed
cross entropy of the target batch, and one backward pass per loss. The
loss weights come from the gradient norms at the shared feature node;
since they are constants for backpropagation, the parameter update uses
alpha * g_feature + beta * g_classify directly rather than a third
backward pass. After 90% of the epochs the schedule drops the alignment
term and trains on the classification loss alone.

Because the frozen front block and the cloud model never change during
transfer, their activations for the fixed fine-tuning pool are
precomputed once; the per-iteration tape starts at the edge posterior
block. This is bit-identical to recomputing them every iteration.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .datagen import SampleSet
from .losses import (
    KernelConfig,
    LossTerms,
    SmoothingConfig,
    adaptive_weights,
    in_weighted_phase,
    lmmd,
    smoothed_cross_entropy,
)
from .models import CModel, EModel
from .tensor import NonFiniteError, Tape, Tensor

__all__ = [
    "TrainConfig",
    "EpochReport",
    "ConfusionMatrix",
    "TrainingDiverged",
    "Adam",
    "cosine_lr",
    "one_hot",
    "train_cloud",
    "transfer_edge",
    "evaluate",
    "run_ablation",
    "write_reports",
    "VARIANTS",
]

VARIANTS = ("proposed", "wo_domain_adaptation", "wo_adaptation_adjustment")


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; carries the epoch and batch it happened in."""

    def __init__(self, stage: str, epoch: int, batch: int, detail: str):
        super().__init__(
            f"{stage} diverged at epoch {epoch}, batch {batch}: {detail}"
        )
        self.epoch = epoch
        self.batch = batch


@dataclass
class TrainConfig:
    """Hyperparameters for one training stage (cloud or transfer)."""

    batch_size: int = 32
    num_epoch: int = 100
    lr_max: float = 1e-3
    lr_min: float = 0.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    smoothing_epsilon: float = 0.1
    delta: float = 1e-8
    kernel: KernelConfig = field(default_factory=KernelConfig)

    def validate(self) -> None:
        if self.batch_size < 2:
            raise ValueError(f"batch_size must be >= 2, got {self.batch_size}")
        if self.num_epoch < 0:
            raise ValueError(f"num_epoch must be >= 0, got {self.num_epoch}")
        if self.lr_max < self.lr_min:
            raise ValueError("lr_max must be >= lr_min")
        self.kernel.validate()


@dataclass
class EpochReport:
    """Per-epoch training record. Wall time is kept out of to_record so
    metrics files stay byte-reproducible; writers segregate it."""

    epoch: int
    loss_feature: float
    loss_classify: float
    alpha: float
    beta: float
    lr: float
    train_accuracy: float
    wall_time_s: float

    def to_record(self) -> dict:
        return {
            "epoch": self.epoch,
            "loss_feature": self.loss_feature,
            "loss_classify": self.loss_classify,
            "alpha": self.alpha,
            "beta": self.beta,
            "lr": self.lr,
            "train_accuracy": self.train_accuracy,
        }


@dataclass
class ConfusionMatrix:
    """K x K counts; rows are true labels, columns predictions."""

    counts: np.ndarray

    @classmethod
    def from_predictions(cls, y_true, y_pred, num_classes: int) -> "ConfusionMatrix":
        counts = np.zeros((num_classes, num_classes), dtype=np.int64)
        for t, p in zip(np.asarray(y_true), np.asarray(y_pred)):
            counts[int(t), int(p)] += 1
        return cls(counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def accuracy(self) -> float:
        return float(np.trace(self.counts)) / max(self.total, 1)

    def row_sums(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    def to_text(self, class_names: Optional[Sequence[str]] = None) -> str:
        k = self.counts.shape[0]
        names = list(class_names) if class_names else [str(i) for i in range(k)]
        width = max(6, max(len(n) for n in names) + 1)
        header = " " * width + "".join(f"{n:>{width}}" for n in names)
        lines = [header]
        for i, row in enumerate(self.counts):
            lines.append(f"{names[i]:>{width}}" + "".join(f"{v:>{width}}" for v in row))
        lines.append(f"accuracy: {self.accuracy:.4f}")
        return "\n".join(lines)


def cosine_lr(t: int, total: int, lr_max: float, lr_min: float) -> float:
    """lr(t) = lr_min + 0.5 (lr_max - lr_min)(1 + cos(pi t / total)), t from 0."""
    if total <= 0:
        return lr_max
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * t / total))


def one_hot(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.shape[0], num_classes), dtype=np.float32)
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


class Adam:
    """Adam over a ParamStore; frozen and non-trainable entries are never touched."""

    def __init__(self, store, beta1=0.9, beta2=0.999, eps=1e-8):
        self.store = store
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m: dict = {}
        self._v: dict = {}

    def step(self, lr: float, grads: dict) -> None:
        """Apply one update from {param name: gradient array}."""
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for name, tensor in self.store.optimizable():
            g = grads.get(name)
            if g is None:
                continue
            assert not self.store.is_frozen(name), f"optimizer touched frozen entry {name}"
            g = np.asarray(g, dtype=np.float64)
            m = self._m.get(name)
            if m is None:
                m = np.zeros(tensor.data.shape, dtype=np.float64)
                self._m[name] = m
                self._v[name] = np.zeros(tensor.data.shape, dtype=np.float64)
            v = self._v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            update = lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            tensor.data[...] = (tensor.data.astype(np.float64) - update).astype(np.float32)


def _balanced_batch_indices(rng, class_pools, batch_size: int) -> np.ndarray:
    """Class-balanced draw: every class contributes floor(b/K) or one more."""
    k = len(class_pools)
    base, rem = divmod(batch_size, k)
    counts = np.full(k, base, dtype=np.int64)
    if rem:
        counts[rng.permutation(k)[:rem]] += 1
    picked = []
    for pool, take in zip(class_pools, counts):
        if take == 0:
            continue
        picked.append(rng.choice(pool, size=take, replace=take > len(pool)))
    idx = np.concatenate(picked)
    return idx[rng.permutation(len(idx))]


def _class_pools(labels: np.ndarray) -> list:
    classes = sorted(set(labels.tolist()))
    return [np.flatnonzero(labels == c) for c in classes]


# ---------------------------------------------------------------------------
# stage 1: cloud training

def train_cloud(model: CModel, d_training: SampleSet, cfg: TrainConfig) -> list:
    """Supervised training on source-condition data; returns epoch reports."""
    cfg.validate()
    if np.any(d_training.cond != d_training.cond[0]):
        raise ValueError("cloud training data must come from a single condition")
    k = model.config.num_classes
    smoothing = SmoothingConfig(cfg.smoothing_epsilon, k)
    rng = np.random.default_rng([cfg.seed, 17])
    adam = Adam(model.store, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    params = model.store.optimizable()
    model.set_training(True)

    n = len(d_training)
    labels_1h = one_hot(d_training.y, k)
    reports = []
    for epoch in range(1, cfg.num_epoch + 1):
        t0 = time.perf_counter()
        lr = cosine_lr(epoch - 1, cfg.num_epoch, cfg.lr_max, cfg.lr_min)
        order = rng.permutation(n)
        losses, hits, seen = [], 0, 0
        for b0 in range(0, n, cfg.batch_size):
            idx = order[b0:b0 + cfg.batch_size]
            if len(idx) < 2:
                continue  # batch norm needs more than one row
            xb = Tensor(d_training.x[idx])
            try:
                with Tape() as tape:
                    logits = model.forward_logits(xb)
                    loss = smoothed_cross_entropy(logits, labels_1h[idx], smoothing)
                    grads = tape.backward(loss, [t for _, t in params])
            except NonFiniteError as err:
                raise TrainingDiverged("cloud training", epoch, b0 // cfg.batch_size, str(err))
            loss_val = loss.item()
            if not np.isfinite(loss_val):
                raise TrainingDiverged("cloud training", epoch, b0 // cfg.batch_size, "loss is NaN")
            adam.step(lr, {name: grads[t].data for name, t in params})
            losses.append(loss_val)
            hits += int(np.sum(np.argmax(logits.data, axis=1) == d_training.y[idx]))
            seen += len(idx)
        reports.append(
            EpochReport(
                epoch=epoch,
                loss_feature=0.0,
                loss_classify=float(np.mean(losses)) if losses else 0.0,
                alpha=0.0,
                beta=1.0,
                lr=lr,
                train_accuracy=hits / max(seen, 1),
                wall_time_s=time.perf_counter() - t0,
            )
        )
    return reports


# ---------------------------------------------------------------------------
# stage 2: edge knowledge transfer

def _batched_no_tape(forward, x: np.ndarray, chunk: int = 64) -> np.ndarray:
    outs = []
    for i in range(0, x.shape[0], chunk):
        outs.append(forward(Tensor(x[i:i + chunk])).data)
    return np.concatenate(outs, axis=0)


def transfer_edge(
    c_model: CModel,
    e_model: EModel,
    d_finetune_src: SampleSet,
    d_finetune_tgt: SampleSet,
    cfg: TrainConfig,
    variant: str = "proposed",
    force_weights: Optional[tuple] = None,
) -> list:
    """Fine-tune the edge posterior block and classifier (stage 2).

    ``variant`` selects the full method or one of its two ablations:
    "wo_domain_adaptation" trains on cross entropy alone and
    "wo_adaptation_adjustment" sums both losses with unit weights for
    the whole run. ``force_weights`` pins (alpha, beta) for every epoch,
    a diagnostic hook; alpha == 0 skips the alignment backward pass
    entirely so the update stream is bit-identical to the
    cross-entropy-only path.
    """
    cfg.validate()
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}, expected one of {VARIANTS}")
    frozen = [n for n in e_model.store.names() if n.startswith("pre_fe.")]
    if not frozen or not all(e_model.store.is_frozen(n) for n in frozen):
        raise ValueError("transfer requires share_pre_fe + freeze_pre_fe first")

    k = e_model.config.num_classes
    smoothing = SmoothingConfig(cfg.smoothing_epsilon, k)

    # fixed reference activations: the cloud features of the source pool and
    # the frozen front block's output on the target pool (bit-identical to
    # recomputing per iteration; both paths are eval-mode and frozen)
    c_model.set_training(False)
    f_src_all = _batched_no_tape(c_model.forward_features, d_finetune_src.x)
    h_tgt_all = _batched_no_tape(e_model.forward_pre_fe, d_finetune_tgt.x)

    e_model.set_training(True)
    params = [(n, t) for n, t in e_model.store.optimizable()]
    adam = Adam(e_model.store, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    rng = np.random.default_rng([cfg.seed, 23])

    src_pools = _class_pools(d_finetune_src.y)
    tgt_pools = _class_pools(d_finetune_tgt.y)
    tgt_1h = one_hot(d_finetune_tgt.y, k)
    iters = max(1, math.ceil(len(d_finetune_tgt) / cfg.batch_size))

    reports = []
    for epoch in range(1, cfg.num_epoch + 1):
        t0 = time.perf_counter()
        lr = cosine_lr(epoch - 1, cfg.num_epoch, cfg.lr_max, cfg.lr_min)
        weighted_phase = in_weighted_phase(epoch, cfg.num_epoch)
        lf_sum = lc_sum = a_sum = b_sum = 0.0
        hits = seen = 0
        for it in range(iters):
            src_idx = _balanced_batch_indices(rng, src_pools, cfg.batch_size)
            tgt_idx = _balanced_batch_indices(rng, tgt_pools, cfg.batch_size)
            y_src = d_finetune_src.y[src_idx]
            y_tgt = d_finetune_tgt.y[tgt_idx]
            try:
                with Tape() as tape:
                    feat = e_model.features_from_pre_fe(Tensor(h_tgt_all[tgt_idx]))
                    logits = e_model.classify(feat)
                    l_c = smoothed_cross_entropy(logits, tgt_1h[tgt_idx], smoothing)
                    l_f = lmmd(Tensor(f_src_all[src_idx]), feat, y_src, y_tgt, cfg.kernel)
                    targets = [t for _, t in params] + [feat]
                    g_c = tape.backward(l_c, targets)
                    terms = LossTerms(l_f.item(), l_c.item())
                    terms.validate()

                    g_f = None
                    if force_weights is not None:
                        alpha, beta = force_weights
                    elif variant == "wo_domain_adaptation":
                        alpha, beta = 0.0, 1.0
                    elif variant == "wo_adaptation_adjustment":
                        alpha, beta = 1.0, 1.0
                    elif not weighted_phase:
                        alpha, beta = 0.0, 1.0
                    else:
                        g_f = tape.backward(l_f, targets)
                        w = adaptive_weights(g_f, g_c, feat, terms, cfg.delta)
                        alpha, beta = w.alpha, w.beta

                    if alpha != 0.0:
                        if g_f is None:
                            g_f = tape.backward(l_f, targets)
                        combined = {
                            name: alpha * g_f[t].data.astype(np.float64)
                            + beta * g_c[t].data.astype(np.float64)
                            for name, t in params
                        }
                    elif beta == 1.0:
                        combined = {name: g_c[t].data for name, t in params}
                    else:
                        combined = {
                            name: beta * g_c[t].data.astype(np.float64) for name, t in params
                        }
            except NonFiniteError as err:
                raise TrainingDiverged("transfer", epoch, it, str(err))
            adam.step(lr, combined)
            lf_sum += terms.loss_feature
            lc_sum += terms.loss_classify
            a_sum += alpha
            b_sum += beta
            hits += int(np.sum(np.argmax(logits.data, axis=1) == y_tgt))
            seen += len(tgt_idx)
        reports.append(
            EpochReport(
                epoch=epoch,
                loss_feature=lf_sum / iters,
                loss_classify=lc_sum / iters,
                alpha=a_sum / iters,
                beta=b_sum / iters,
                lr=lr,
                train_accuracy=hits / max(seen, 1),
                wall_time_s=time.perf_counter() - t0,
            )
        )
    return reports


# ---------------------------------------------------------------------------
# evaluation and the ablation harness

def evaluate(model, d_test: SampleSet, chunk: int = 64):
    """Argmax accuracy and confusion matrix in eval mode; restores BN modes."""
    modes = [(bn, bn.training) for bn in model.bn_layers()]
    model.set_training(False)
    try:
        logits = _batched_no_tape(model.forward_logits, d_test.x, chunk)
    finally:
        for bn, was_training in modes:
            bn.set_training(was_training)
    preds = np.argmax(logits, axis=1)
    conf = ConfusionMatrix.from_predictions(d_test.y, preds, model.config.num_classes)
    return conf.accuracy, conf


def run_ablation(
    variant: str,
    c_model: CModel,
    splits,
    e_seed: int,
    cfg: TrainConfig,
):
    """Build a fresh edge model, share + freeze, transfer, evaluate.

    All variants built from the same cloud model and e_seed start from an
    identical shared state, which is what makes the comparison controlled.
    """
    from .models import build_model, freeze_pre_fe, share_pre_fe

    e_model = build_model(c_model.config, "edge", e_seed)
    share_pre_fe(c_model, e_model)
    freeze_pre_fe(e_model)
    reports = transfer_edge(
        c_model, e_model, splits.d_finetune_src, splits.d_finetune_tgt, cfg, variant=variant
    )
    accuracy, conf = evaluate(e_model, splits.d_test)
    return accuracy, conf, e_model, reports


def write_reports(reports, metrics_path, timing_path=None) -> None:
    """One JSON object per line; wall times go to a separate timing file."""
    with open(metrics_path, "w", encoding="utf-8") as fh:
        for r in reports:
            fh.write(json.dumps(r.to_record(), sort_keys=True) + "\n")
    if timing_path is not None:
        with open(timing_path, "w", encoding="utf-8") as fh:
            for r in reports:
                fh.write(
                    json.dumps({"epoch": r.epoch, "wall_time_s": r.wall_time_s}) + "\n"
                )
