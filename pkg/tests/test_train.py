import importlib
import json

import numpy as np
import pytest

from affordground.checkpoint import Checkpoint, capture, restore
from affordground.config import tiny_config as _tiny
from affordground.metrics import HEADER, format_table
from affordground.model import AffordanceModel
from affordground.train import (TrainingDiverged, VocabularyMismatch, corruption_experiment, evaluate, train,
                                training_vocab)

train_mod = importlib.import_module("affordground.train")


def tiny_config(**kw):
    # generated instructions run to ~20 words; the gradient-check length of 8 would truncate the focus slot
    return _tiny(max_len=24, **kw)


@pytest.fixture(scope="module")
def small(tiny_splits):
    return {"train": tiny_splits["train"][:12], "val": tiny_splits["val"][:4]}


def same_params(a: Checkpoint, b: Checkpoint) -> bool:
    return a.tensors.keys() == b.tensors.keys() and all(
        a.tensors[k].tobytes() == b.tensors[k].tobytes() for k in a.tensors)


def test_zero_epochs_returns_initialization(small):
    cfg = tiny_config(epochs=0)
    result = train(cfg, small)
    init = capture(AffordanceModel(cfg, training_vocab(small["train"])))
    assert same_params(result.final, init) and result.history == []


def test_same_seed_gives_bit_identical_checkpoints(small):
    cfg = tiny_config(epochs=2, batch_size=4)
    assert train(cfg, small).final.to_bytes() == train(cfg, small).final.to_bytes()


def test_resume_matches_uninterrupted_run(small, tmp_path, monkeypatch):
    cfg = tiny_config(epochs=3, batch_size=4)
    full = train(cfg, small)
    calls = {"n": 0}
    real = train_mod.validation_aiou

    def interrupt(model, samples):
        calls["n"] += 1
        if calls["n"] == 2:
            raise KeyboardInterrupt
        return real(model, samples)

    monkeypatch.setattr(train_mod, "validation_aiou", interrupt)
    with pytest.raises(KeyboardInterrupt):
        train(cfg, small, out_dir=tmp_path)
    monkeypatch.setattr(train_mod, "validation_aiou", real)
    saved = Checkpoint.load(tmp_path / "last.ckpt")
    assert saved.epoch == 1
    resumed = train(cfg, small, resume=saved, out_dir=tmp_path)
    assert resumed.final.to_bytes() == full.final.to_bytes()
    assert [h["L_total"] for h in resumed.history] == [h["L_total"] for h in full.history[1:]]


def test_nan_loss_aborts_naming_the_batch(small):
    cfg = tiny_config(epochs=1, batch_size=4)
    ckpt = capture(AffordanceModel(cfg, training_vocab(small["train"])))
    ckpt.tensors["head.out.bias"] = np.full_like(ckpt.tensors["head.out.bias"], np.nan)
    with pytest.raises(TrainingDiverged) as exc:
        train(cfg, small, resume=ckpt)
    assert "batch 0" in str(exc.value) and "train-" in str(exc.value)


def test_loss_decreases_after_first_epoch(tiny_splits):
    eight = {"train": tiny_splits["train"][:8], "val": []}
    drops = 0
    for seed in range(42, 47):
        hist = train(tiny_config(epochs=2, batch_size=8, seed=seed), eight).history
        drops += hist[1]["L_total"] < hist[0]["L_total"]
    assert drops >= 4


def test_training_log_and_best_checkpoint(small, tmp_path):
    cfg = tiny_config(epochs=2, batch_size=4)
    result = train(cfg, small, out_dir=tmp_path, log_path=tmp_path / "log.jsonl")
    records = [json.loads(line) for line in (tmp_path / "log.jsonl").read_text().splitlines()]
    assert [r["epoch"] for r in records] == [0, 1]
    assert {"L_total", "L_mask", "L_align", "L_proto", "val_aIoU", "lr"} <= set(records[0])
    best_epoch = max(range(2), key=lambda e: records[e]["val_aIoU"]) + 1
    assert result.best.best_epoch == best_epoch
    assert Checkpoint.load(tmp_path / "best.ckpt").to_bytes() == result.best.to_bytes()
    assert records[-1]["lr"] == pytest.approx(0.0, abs=1e-18)


@pytest.fixture(scope="module")
def trained(small):
    return train(tiny_config(epochs=2, batch_size=4), small).best


def test_evaluation_is_deterministic_and_read_only(trained, tiny_splits):
    model, _ = restore(trained)
    before = {k: p.data.copy() for k, p in model.named_parameters().items()}
    rows = model.prototypes.rows.copy()
    a = evaluate(model, tiny_splits["open"], "open")
    b = evaluate(model, tiny_splits["open"], "open")
    assert format_table([a]) == format_table([b])
    assert format_table([a]).startswith(HEADER)
    assert all(np.array_equal(before[k], p.data) for k, p in model.named_parameters().items())
    assert model.prototypes.rows == rows


def test_save_load_is_metric_identical(trained, tiny_splits, tmp_path):
    trained.save(tmp_path / "b.ckpt")
    a = evaluate(trained, tiny_splits["seen"], "seen")
    b = evaluate(Checkpoint.load(tmp_path / "b.ckpt"), tiny_splits["seen"], "seen")
    assert format_table([a]) == format_table([b])
    assert np.array_equal(np.array(list(a.means.values())), np.array(list(b.means.values())), equal_nan=True)


def test_corruption_rate_zero_equals_plain_evaluation(trained, tiny_splits):
    rows = corruption_experiment(trained, tiny_splits["open"], rates=(0.0, 0.5))
    plain = evaluate(trained, tiny_splits["open"])
    assert rows[0].means == plain.means
    assert [r.split for r in rows] == ["affordance@0", "affordance@0.5"]


def test_evaluation_rejects_mismatched_samples(trained, tiny_splits):
    from dataclasses import replace

    from affordground.backbone import PointCloud
    s = tiny_splits["seen"][0]
    bad = replace(s, cloud=PointCloud(np.zeros((10, 3))))
    with pytest.raises(VocabularyMismatch):
        evaluate(trained, [bad])


def test_sequence_too_short_for_focus_slot_is_rejected(small):
    with pytest.raises(ValueError, match="max_len"):
        train(_tiny(epochs=1), small)
