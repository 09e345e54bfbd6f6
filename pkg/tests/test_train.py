import numpy as np
import pytest

from fineflow.augment import AugmentConfig
from fineflow.data import stratified_split, synth_dataset
from fineflow.errors import CheckpointError, DataError, ShapeError
from fineflow.model import BackboneConfig, HeadConfig, forward
from fineflow.tensor import Tensor
from fineflow.train import (
    TrainConfig,
    TrainLog,
    build_for_dataset,
    checkpoint_load,
    checkpoint_save,
    evaluate,
    pretrain_then_finetune,
    train,
)

BB = BackboneConfig(base_blocks=2, base_channels=4, input_side=32)


@pytest.fixture(scope="module")
def tiny_task():
    ds = synth_dataset(2, 15, side=32, noise=0.05, seed=21)
    splits = stratified_split(ds, (0.8, 0.1, 0.1), seed=21)
    return ds, splits


def tiny_cfg(**kw):
    base = dict(epochs=2, batch_size=4, lr=1e-3, seed=21,
                augment=AugmentConfig(rotation_deg=5.0, shear_deg=3.0))
    base.update(kw)
    return TrainConfig(**base)


class TestTrainLoop:
    def test_log_contract(self, tiny_task):
        ds, splits = tiny_task
        m = build_for_dataset(BB, None, ds, 21)
        m, log = train(m, ds, splits, tiny_cfg(epochs=3))
        assert [r[0] for r in log.rows] == [1, 2, 3]
        for _, tl, ta, vl, va in log.rows:
            assert np.isfinite([tl, ta, vl, va]).all()
            assert tl >= 0 and vl >= 0
            assert 0 <= ta <= 100 and 0 <= va <= 100
        assert log.wall_seconds > 0

    def test_determinism_bitwise(self, tiny_task):
        ds, splits = tiny_task
        outs = []
        for _ in range(2):
            m = build_for_dataset(BB, None, ds, 21)
            m, log = train(m, ds, splits, tiny_cfg())
            outs.append((log.rows, [p.values.copy() for _, p in m.named_params()]))
        assert outs[0][0] == outs[1][0]
        for a, b in zip(outs[0][1], outs[1][1]):
            assert np.array_equal(a, b)

    def test_head_only_freezes_backbone_bytes(self, tiny_task, tmp_path):
        ds, splits = tiny_task
        m = build_for_dataset(BB, None, ds, 21)
        n_backbone = m.head_start
        before = [p.values.copy() for _, p in m.named_params()][: 2 * n_backbone]
        backbone_names = [name for name, _ in m.named_params()
                          if int(name.split(".")[0][5:]) < n_backbone]
        m, _ = train(m, ds, splits, tiny_cfg(trainable_policy="head_only"))
        after = dict(m.named_params())
        for name, b in zip(backbone_names, before):
            assert np.array_equal(after[name].values, b), name

    def test_empty_train_split_rejected(self, tiny_task):
        ds, _ = tiny_task
        from fineflow.data import SplitIndices

        m = build_for_dataset(BB, None, ds, 21)
        with pytest.raises(DataError):
            train(m, ds, SplitIndices([], [0], [1]), tiny_cfg())

    def test_class_count_mismatch(self, tiny_task):
        ds, splits = tiny_task
        four = synth_dataset(4, 10, side=32, noise=0.0, seed=1)
        m = build_for_dataset(BB, None, four, 21)
        with pytest.raises(ShapeError):
            train(m, ds, splits, tiny_cfg())

    def test_batch_size_below_two_rejected(self):
        with pytest.raises(ShapeError):
            TrainConfig(batch_size=1)

    def test_trailing_singleton_merges(self, tiny_task):
        # 24 train samples with batch 23 leaves a singleton that must merge.
        ds, splits = tiny_task
        m = build_for_dataset(BB, None, ds, 21)
        m, log = train(m, ds, splits, tiny_cfg(epochs=1, batch_size=23))
        assert len(log.rows) == 1  # completing without a batch_norm error is the point


class TestEvaluate:
    def test_outputs_aligned(self, tiny_task):
        ds, splits = tiny_task
        m = build_for_dataset(BB, None, ds, 21)
        pred, act, probs = evaluate(m, ds, splits.test)
        assert len(pred) == len(act) == len(probs) == len(splits.test)
        assert np.array_equal(act, ds.labels()[splits.test])

    def test_bit_deterministic(self, tiny_task):
        ds, splits = tiny_task
        m = build_for_dataset(BB, None, ds, 21)
        a = evaluate(m, ds, splits.test)
        b = evaluate(m, ds, splits.test)
        for x, y in zip(a, b):
            assert np.array_equal(x, y)

    def test_does_not_mutate_model(self, tiny_task, tmp_path):
        ds, splits = tiny_task
        m = build_for_dataset(BB, None, ds, 21)
        p1 = tmp_path / "before.ckpt"
        p2 = tmp_path / "after.ckpt"
        checkpoint_save(m, str(p1))
        evaluate(m, ds, splits.validation)
        checkpoint_save(m, str(p2))
        assert p1.read_bytes() == p2.read_bytes()

    def test_empty_indices_rejected(self, tiny_task):
        ds, _ = tiny_task
        m = build_for_dataset(BB, None, ds, 21)
        with pytest.raises(DataError):
            evaluate(m, ds, [])

    def test_interpolated_training_set_is_reproduced(self):
        # No noise, no augmentation: the model memorizes two constant images.
        ds = synth_dataset(2, 10, side=32, noise=0.0, seed=5)
        splits = stratified_split(ds, (0.8, 0.1, 0.1), seed=5)
        m = build_for_dataset(BB, None, ds, 5)
        m, _ = train(m, ds, splits, TrainConfig(epochs=12, batch_size=4, lr=5e-3,
                                                seed=5, augment=None))
        pred, act, _ = evaluate(m, ds, splits.train)
        assert np.array_equal(pred, act)


class TestCheckpoints:
    def test_round_trip_forward_bit_identical(self, tiny_task, tmp_path, rng_np):
        ds, _ = tiny_task
        m = build_for_dataset(BB, None, ds, 21)
        path = tmp_path / "m.ckpt"
        checkpoint_save(m, str(path))
        m1 = checkpoint_load(str(path))
        m2 = checkpoint_load(str(path))
        batch = Tensor(rng_np.uniform(size=(2, 3, 32, 32)))
        assert np.array_equal(forward(m1, batch, "infer").values,
                              forward(m2, batch, "infer").values)
        assert m1.class_names == m.class_names

    def test_save_load_save_is_fixed_point(self, tiny_task, tmp_path):
        ds, _ = tiny_task
        m = build_for_dataset(BB, None, ds, 21)
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        checkpoint_save(m, str(p1))
        checkpoint_save(checkpoint_load(str(p1)), str(p2))
        assert p1.read_bytes() == p2.read_bytes()

    def test_float32_precision_bound(self, tiny_task, tmp_path):
        ds, _ = tiny_task
        m = build_for_dataset(BB, None, ds, 21)
        path = tmp_path / "m.ckpt"
        checkpoint_save(m, str(path))
        loaded = checkpoint_load(str(path))
        for (_, a), (_, b) in zip(m.named_params(), loaded.named_params()):
            assert np.allclose(a.values, b.values, rtol=1e-6, atol=1e-7)

    def test_truncated_file_rejected(self, tiny_task, tmp_path):
        ds, _ = tiny_task
        m = build_for_dataset(BB, None, ds, 21)
        path = tmp_path / "m.ckpt"
        checkpoint_save(m, str(path))
        blob = path.read_bytes()
        path.write_bytes(blob[:-1])
        with pytest.raises(CheckpointError):
            checkpoint_load(str(path))

    def test_version_bump_rejected_explicitly(self, tiny_task, tmp_path):
        ds, _ = tiny_task
        m = build_for_dataset(BB, None, ds, 21)
        path = tmp_path / "m.ckpt"
        checkpoint_save(m, str(path))
        blob = path.read_bytes()
        patched = blob.replace(b'"format_version":1', b'"format_version":2', 1)
        path.write_bytes(patched)
        with pytest.raises(CheckpointError, match="version"):
            checkpoint_load(str(path))

    def test_not_a_checkpoint(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"PK\x03\x04 not ours")
        with pytest.raises(CheckpointError):
            checkpoint_load(str(path))


class TestTransfer:
    def test_shapes_and_logs(self):
        source = synth_dataset(4, 10, side=32, noise=0.05, seed=3, style=0)
        target = synth_dataset(2, 10, side=32, noise=0.05, seed=3, style=1)
        cfg = TrainConfig(epochs=2, batch_size=4, lr=1e-3, seed=3,
                          augment=None)
        m, (pre_log, ft_log) = pretrain_then_finetune(source, target, BB, None, cfg, cfg)
        assert m.num_classes == 2
        assert len(pre_log.rows) == 2 and len(ft_log.rows) == 2
        assert m.class_names == target.class_names

    def test_source_model_snapshot_precedes_surgery(self, tmp_path):
        source = synth_dataset(4, 10, side=32, noise=0.0, seed=3, style=0)
        target = synth_dataset(2, 10, side=32, noise=0.0, seed=3, style=1)
        cfg = TrainConfig(epochs=1, batch_size=4, lr=1e-3, seed=3, augment=None)
        seen = {}

        def keep(sm):
            checkpoint_save(sm, str(tmp_path / "src.ckpt"))
            seen["classes"] = sm.num_classes

        pretrain_then_finetune(source, target, BB, None, cfg, cfg, on_source_model=keep)
        assert seen["classes"] == 4
        src = checkpoint_load(str(tmp_path / "src.ckpt"))
        assert src.num_classes == 4


class TestInvariants:
    def test_identity_augmentation_is_noop_through_training(self, tiny_task):
        ds, splits = tiny_task
        logs = []
        for augment in (None, AugmentConfig.identity()):
            m = build_for_dataset(BB, None, ds, 21)
            m, log = train(m, ds, splits, TrainConfig(epochs=2, batch_size=4, lr=1e-3,
                                                      seed=21, augment=augment))
            logs.append(log.rows)
        assert logs[0] == logs[1]

    def test_train_vs_infer_gap_on_converged_model(self):
        # Augmentation off, dropout 0: the only train/infer difference left is
        # batch statistics vs running statistics.
        ds = synth_dataset(2, 12, side=32, noise=0.02, seed=8)
        splits = stratified_split(ds, (0.8, 0.1, 0.1), seed=8)
        head = HeadConfig(num_classes=2, dropout_rate=0.0)
        m = build_for_dataset(BB, head, ds, 8)
        m, _ = train(m, ds, splits, TrainConfig(epochs=15, batch_size=4, lr=5e-3,
                                                seed=8, augment=None))
        from fineflow.rng import stream
        from fineflow.train import _batch_tensor
        from fineflow.model import PipelineConfig

        pipe = PipelineConfig(image_size=32)
        xb = _batch_tensor(ds, splits.train, {}, pipe, None, 0, 0)
        yb = ds.labels()[splits.train]
        infer_acc = np.mean(np.argmax(forward(m, xb, "infer").values, axis=1) == yb)
        train_acc = np.mean(
            np.argmax(forward(m, xb, "train", stream(1, 1)).values, axis=1) == yb
        )
        assert abs(train_acc - infer_acc) * 100.0 < 5.0

    def test_one_adam_step_touches_every_trainable_param(self, tiny_task):
        from fineflow.layers import AdamState, adam_step, sparse_ce_loss
        from fineflow.model import set_trainable
        from fineflow.rng import stream
        from fineflow.tensor import GradTape, backward
        from fineflow.train import _batch_tensor
        from fineflow.model import PipelineConfig

        ds, splits = tiny_task
        m = build_for_dataset(BB, None, ds, 21)
        set_trainable(m, "all")
        params = m.named_params(trainable_only=True)
        xb = _batch_tensor(ds, splits.train[:4], {}, PipelineConfig(image_size=32),
                           None, 0, 0)
        with GradTape() as tape:
            loss = sparse_ce_loss(forward(m, xb, "train", stream(2, 2)),
                                  ds.labels()[splits.train[:4]])
        backward(loss, tape)
        before = {name: p.values.copy() for name, p in params}
        adam_step(params, AdamState(), 1e-3)
        for name, p in params:
            if p.grad is not None and np.any(p.grad != 0.0):
                assert not np.array_equal(p.values, before[name]), name


class TestTrainLogCsv:
    def test_csv_format(self, tiny_task, tmp_path):
        log = TrainLog(rows=[(1, 0.5, 50.0, 0.6, 40.0), (2, 0.25, 75.0, 0.3, 80.0)])
        path = tmp_path / "log.csv"
        log.to_csv(str(path))
        text = path.read_text()
        lines = text.split("\n")
        assert lines[0] == "epoch,train_loss,train_acc,val_loss,val_acc"
        assert lines[1] == "1,0.500000,50.000000,0.600000,40.000000"
        assert "\r" not in text
        back = TrainLog.from_csv(str(path))
        assert back.rows == log.rows
