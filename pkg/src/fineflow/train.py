"""Deterministic training loop, evaluation, checkpoints, and transfer runs.

Everything downstream of (dataset, TrainConfig) is a pure function of the
seed: shuffles are keyed by (seed, epoch), augmentation by (seed, epoch,
sample index), dropout by (seed, epoch, batch index). Two runs with the same
inputs produce byte-identical logs and checkpoints.
"""

from __future__ import annotations

import json
import struct
import time
from dataclasses import dataclass, field

import numpy as np

from .augment import AugmentConfig, affine_transform, sample_augmentation
from .data import Dataset, SplitIndices, stratified_split
from .errors import CheckpointError, DataError, NumericError, ShapeError
from .image import scale_to_unit
from .layers import CE_CLAMP, AdamState, BatchNormState, adam_step, sparse_ce_loss
from .model import (
    BackboneConfig,
    BatchNormLayer,
    ConvLayer,
    DenseLayer,
    DropoutLayer,
    GlobalPoolLayer,
    HeadConfig,
    Model,
    PipelineConfig,
    ReLULayer,
    ResConvBlock,
    SoftmaxLayer,
    build_backbone,
    forward,
    preprocess,
    set_trainable,
    truncate_and_attach_head,
)
from .rng import DOM_DROPOUT, DOM_INIT, DOM_SHUFFLE, derive, stream
from .tensor import GradTape, Tensor, backward


@dataclass
class TrainConfig:
    epochs: int = 25
    batch_size: int = 32
    lr: float = 1e-4
    seed: int = 1000
    augment: AugmentConfig | None = field(default_factory=AugmentConfig)
    trainable_policy: str | int = "all"

    def __post_init__(self):
        if self.epochs < 1:
            raise ShapeError("epochs must be >= 1")
        if self.batch_size < 2:
            raise ShapeError("batch_size must be >= 2 (batch_norm train mode)")
        if self.lr <= 0:
            raise ShapeError("lr must be positive")


@dataclass
class TrainLog:
    """Per-epoch curve data behind the accuracy/loss graphs."""

    rows: list[tuple[int, float, float, float, float]]  # epoch, tl, ta, vl, va
    wall_seconds: float = 0.0

    def to_csv(self, path: str) -> None:
        lines = ["epoch,train_loss,train_acc,val_loss,val_acc"]
        for epoch, tl, ta, vl, va in self.rows:
            lines.append(f"{epoch},{tl:.6f},{ta:.6f},{vl:.6f},{va:.6f}")
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write("\n".join(lines) + "\n")

    @classmethod
    def from_csv(cls, path: str) -> "TrainLog":
        with open(path, "r", encoding="utf-8", newline="") as fh:
            lines = [ln for ln in fh.read().split("\n") if ln]
        if not lines or lines[0] != "epoch,train_loss,train_acc,val_loss,val_acc":
            raise DataError(f"bad train log header in {path}")
        rows = []
        for ln in lines[1:]:
            e, tl, ta, vl, va = ln.split(",")
            rows.append((int(e), float(tl), float(ta), float(vl), float(va)))
        return cls(rows)


def _batch_tensor(data: Dataset, indices, cache: dict, pipe: PipelineConfig,
                  augment: AugmentConfig | None, seed: int, epoch: int) -> Tensor:
    arrays = []
    for idx in indices:
        img = cache.get(idx)
        if img is None:
            img = preprocess(data.load_image(idx, pipe.source_channel_order == "bgr"), pipe)
            cache[idx] = img
        if augment is not None:
            spec, _ = sample_augmentation(augment, derive(seed, epoch, idx),
                                          img.width, img.height)
            img = affine_transform(img, spec)
        arrays.append(scale_to_unit(img).values)
    return Tensor(np.stack(arrays))


def _batches(order: list[int], batch_size: int) -> list[list[int]]:
    """Fixed-size batches; a trailing singleton merges into the previous batch."""
    chunks = [order[i : i + batch_size] for i in range(0, len(order), batch_size)]
    if len(chunks) > 1 and len(chunks[-1]) < 2:
        chunks[-2].extend(chunks.pop())
    return chunks


def _ce_and_accuracy(probs: np.ndarray, labels: np.ndarray) -> tuple[float, float]:
    picked = np.clip(probs[np.arange(len(labels)), labels], CE_CLAMP, 1.0)
    loss = float(-np.mean(np.log(picked)))
    acc = float(np.mean(np.argmax(probs, axis=1) == labels)) * 100.0
    return loss, acc


def train(m: Model, data: Dataset, splits: SplitIndices, cfg: TrainConfig,
          pipe: PipelineConfig | None = None) -> tuple[Model, TrainLog]:
    """Adam fine-tuning loop per the fixed schedule; returns the mutated model
    plus the per-epoch log. Augmentation applies to training batches only.
    """
    if not splits.train:
        raise DataError("empty train split")
    if m.num_classes != data.num_classes:
        raise ShapeError(
            f"model has {m.num_classes} classes but dataset has {data.num_classes}"
        )
    if pipe is None:
        pipe = PipelineConfig(image_size=m.input_side)
    set_trainable(m, cfg.trainable_policy)
    params = m.named_params(trainable_only=True)
    adam = AdamState()
    labels_all = data.labels()
    cache: dict = {}
    rows = []
    started = time.perf_counter()
    for epoch in range(1, cfg.epochs + 1):
        order = _epoch_order(splits.train, cfg.seed, epoch)
        epoch_loss = 0.0
        epoch_correct = 0.0
        for batch_no, batch_idx in enumerate(_batches(order, cfg.batch_size)):
            xb = _batch_tensor(data, batch_idx, cache, pipe, cfg.augment, cfg.seed, epoch)
            yb = labels_all[batch_idx]
            rng = stream(cfg.seed, DOM_DROPOUT, epoch, batch_no)
            with GradTape() as tape:
                probs = forward(m, xb, "train", rng)
                loss = sparse_ce_loss(probs, yb)
            lval = loss.item()
            if not np.isfinite(lval):
                raise NumericError(f"non-finite loss at epoch {epoch}, batch {batch_no}")
            backward(loss, tape)
            adam_step(params, adam, cfg.lr)
            for _, p in params:
                p.zero_grad()
            epoch_loss += lval * len(batch_idx)
            epoch_correct += float(np.sum(np.argmax(probs.values, axis=1) == yb))
        n_train = len(order)
        _, val_act, val_probs = evaluate(m, data, splits.validation, pipe, cache=cache)
        vl, va = _ce_and_accuracy(val_probs, val_act)
        rows.append((epoch, epoch_loss / n_train, 100.0 * epoch_correct / n_train, vl, va))
    return m, TrainLog(rows, wall_seconds=time.perf_counter() - started)


def _epoch_order(train_idx: list[int], seed: int, epoch: int) -> list[int]:
    indices = sorted(train_idx)
    n = len(indices)
    u, _ = stream(seed, DOM_SHUFFLE, epoch).uniforms(max(0, n - 1))
    for i in range(n - 1, 0, -1):
        j = int(u[n - 1 - i] * (i + 1))
        indices[i], indices[j] = indices[j], indices[i]
    return indices


def evaluate(m: Model, data: Dataset, indices: list[int],
             pipe: PipelineConfig | None = None, batch_size: int = 64,
             cache: dict | None = None
             ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Infer-mode pass without augmentation; never mutates the model."""
    if not indices:
        raise DataError("evaluate needs a non-empty index list")
    if pipe is None:
        pipe = PipelineConfig(image_size=m.input_side)
    if cache is None:
        cache = {}
    labels_all = data.labels()
    probs_parts = []
    for start in range(0, len(indices), batch_size):
        chunk = list(indices[start : start + batch_size])
        xb = _batch_tensor(data, chunk, cache, pipe, None, 0, 0)
        probs_parts.append(forward(m, xb, "infer").values)
    probs = np.concatenate(probs_parts, axis=0)
    actual = labels_all[list(indices)]
    predicted = np.argmax(probs, axis=1)
    return predicted, actual, probs


# ---------------------------------------------------------------------------
# checkpoint container
#
# Byte layout (little-endian):
#   magic  b"FFCP"
#   u32    header length in bytes
#   bytes  header: canonical JSON (sorted keys, compact separators, UTF-8)
#   bytes  float32 parameter/buffer blobs, concatenated in manifest order
#
# The header carries format_version, configs, class names, per-layer specs,
# trainable flags, and the blob manifest (name + shape per array). Parameters
# are stored as float32; loading restores float64 working copies, so
# save(load(save(m))) == save(m) byte-for-byte.

CHECKPOINT_MAGIC = b"FFCP"
CHECKPOINT_VERSION = 1


def _layer_from_spec(spec: dict):
    kind = spec["kind"]
    if kind == "conv":
        k = Tensor(np.zeros((spec["out"], spec["in"], spec["kh"], spec["kw"])), requires_grad=True)
        b = Tensor(np.zeros(spec["out"]), requires_grad=True)
        return ConvLayer(k, b, spec["stride"], spec["padding"])
    if kind == "batch_norm":
        return BatchNormLayer(BatchNormState.create(spec["channels"], spec["momentum"], spec["eps"]))
    if kind == "res_block":
        c = spec["channels"]
        k = Tensor(np.zeros((c, c, 3, 3)), requires_grad=True)
        b = Tensor(np.zeros(c), requires_grad=True)
        return ResConvBlock(k, b, BatchNormState.create(c, spec["momentum"], spec["eps"]))
    if kind == "relu":
        return ReLULayer()
    if kind == "global_pool":
        return GlobalPoolLayer(spec["pool"])
    if kind == "dense":
        w = Tensor(np.zeros((spec["in"], spec["out"])), requires_grad=True)
        b = Tensor(np.zeros(spec["out"]), requires_grad=True)
        return DenseLayer(w, b)
    if kind == "dropout":
        return DropoutLayer(spec["rate"])
    if kind == "softmax":
        return SoftmaxLayer()
    raise CheckpointError(f"unknown layer kind {kind!r} in checkpoint")


def _model_arrays(m: Model) -> list[tuple[str, np.ndarray]]:
    out = []
    for i, layer in enumerate(m.layers):
        for name, p in layer.params():
            out.append((f"{i}.{name}", p.values))
        for name, buf in layer.buffers():
            out.append((f"{i}.{name}", buf))
    return out


def checkpoint_save(m: Model, path: str) -> None:
    arrays = _model_arrays(m)
    header = {
        "format_version": CHECKPOINT_VERSION,
        "backbone": _cfg_dict(m.backbone_cfg),
        "head": _cfg_dict(m.head_cfg),
        "class_names": m.class_names,
        "input_side": m.input_side,
        "head_start": m.head_start,
        "trainable": list(m.trainable),
        "layers": [layer.spec() for layer in m.layers],
        "manifest": [{"name": name, "shape": list(a.shape)} for name, a in arrays],
    }
    blob = b"".join(a.astype("<f4").tobytes() for _, a in arrays)
    head_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(head_bytes)))
        fh.write(head_bytes)
        fh.write(blob)


def _cfg_dict(cfg) -> dict | None:
    if cfg is None:
        return None
    if isinstance(cfg, BackboneConfig):
        return {"base_blocks": cfg.base_blocks, "base_channels": cfg.base_channels,
                "phi": cfg.phi, "input_side": cfg.input_side,
                "skip_connections": cfg.skip_connections}
    return {"num_classes": cfg.num_classes, "pooling": cfg.pooling,
            "dense_units": cfg.dense_units, "dropout_rate": cfg.dropout_rate}


def checkpoint_load(path: str) -> Model:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 8 or data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"not a checkpoint file: {path}")
    (hlen,) = struct.unpack("<I", data[4:8])
    if len(data) < 8 + hlen:
        raise CheckpointError("truncated checkpoint header")
    try:
        header = json.loads(data[8 : 8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unparseable checkpoint header: {exc}") from None
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint version {header.get('format_version')!r}; "
            f"this build reads version {CHECKPOINT_VERSION}"
        )
    layers = [_layer_from_spec(spec) for spec in header["layers"]]
    bb = header["backbone"]
    hd = header["head"]
    m = Model(
        layers=layers,
        trainable=[bool(f) for f in header["trainable"]],
        input_side=int(header["input_side"]),
        backbone_cfg=BackboneConfig(**bb) if bb else None,
        head_cfg=HeadConfig(**hd) if hd else None,
        class_names=header["class_names"],
        head_start=header["head_start"],
    )
    arrays = _model_arrays(m)
    manifest = header["manifest"]
    if [a[0] for a in arrays] != [e["name"] for e in manifest]:
        raise CheckpointError("manifest does not match the reconstructed layer stack")
    blob = data[8 + hlen :]
    expected = sum(int(np.prod(e["shape"])) for e in manifest) * 4
    if len(blob) != expected:
        raise CheckpointError(f"blob length {len(blob)} != manifest total {expected}")
    pos = 0
    for (name, target), entry in zip(arrays, manifest):
        shape = tuple(entry["shape"])
        count = int(np.prod(shape))
        vals = np.frombuffer(blob, dtype="<f4", count=count, offset=pos)
        pos += count * 4
        if tuple(target.shape) != shape:
            raise CheckpointError(f"shape mismatch for {name}: {target.shape} vs {shape}")
        target[...] = vals.reshape(shape).astype(np.float64)
    return m


# ---------------------------------------------------------------------------
# transfer learning


def pretrain_then_finetune(
    source: Dataset,
    target: Dataset,
    backbone_cfg: BackboneConfig,
    head_cfg: HeadConfig | None,
    pretrain_cfg: TrainConfig,
    finetune_cfg: TrainConfig,
    pipe: PipelineConfig | None = None,
    on_source_model=None,
) -> tuple[Model, tuple[TrainLog, TrainLog]]:
    """Train on the source task, re-head for the target task, fine-tune.

    Both datasets are split 80/10/10 internally with their stage's seed. The
    head_cfg fixes pooling/units/dropout; num_classes comes from each dataset.
    `on_source_model` (when given) receives the trained source-stage model
    before surgery; snapshot it there if needed, because fine-tuning mutates
    the shared trunk weights afterwards.
    """
    trunk = build_backbone(backbone_cfg, stream(pretrain_cfg.seed, DOM_INIT, 0))
    src_head = _head_for(head_cfg, source.num_classes)
    m = truncate_and_attach_head(trunk, src_head, stream(pretrain_cfg.seed, DOM_INIT, 1))
    m.class_names = list(source.class_names)
    if pipe is None:
        pipe = PipelineConfig(image_size=m.input_side)
    src_splits = stratified_split(source, (0.8, 0.1, 0.1), pretrain_cfg.seed)
    m, pretrain_log = train(m, source, src_splits, pretrain_cfg, pipe)
    if on_source_model is not None:
        on_source_model(m)

    tgt_head = _head_for(head_cfg, target.num_classes)
    m = truncate_and_attach_head(m, tgt_head, stream(finetune_cfg.seed, DOM_INIT, 2))
    m.class_names = list(target.class_names)
    tgt_splits = stratified_split(target, (0.8, 0.1, 0.1), finetune_cfg.seed)
    m, finetune_log = train(m, target, tgt_splits, finetune_cfg, pipe)
    return m, (pretrain_log, finetune_log)


def _head_for(head_cfg: HeadConfig | None, num_classes: int) -> HeadConfig:
    if head_cfg is None:
        return HeadConfig(num_classes=num_classes)
    return HeadConfig(num_classes=num_classes, pooling=head_cfg.pooling,
                      dense_units=head_cfg.dense_units, dropout_rate=head_cfg.dropout_rate)


def build_for_dataset(backbone_cfg: BackboneConfig, head_cfg: HeadConfig | None,
                      data: Dataset, seed: int) -> Model:
    """From-scratch model for a dataset: fresh backbone plus fresh head."""
    trunk = build_backbone(backbone_cfg, stream(seed, DOM_INIT, 0))
    m = truncate_and_attach_head(trunk, _head_for(head_cfg, data.num_classes),
                                 stream(seed, DOM_INIT, 1))
    m.class_names = list(data.class_names)
    return m
