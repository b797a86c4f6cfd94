"""Training loop, eval records, and pool behavior."""

import dataclasses
import math

import numpy as np
import pytest

from caqa.corpus import EmbeddingTable
from caqa.errors import ConfigError, DivergenceError
from caqa.model import forward
from caqa.training import (
    EvalRecord,
    TrainConfig,
    evaluate,
    load_records,
    loss,
    save_records,
    train_model,
    train_pool,
)
from tests.conftest import tiny_config


# -- config -------------------------------------------------------------------


def test_ensemble_size_must_fit_pool():
    with pytest.raises(ConfigError):
        TrainConfig(pool_size=5, ensemble_size=9)


@pytest.mark.parametrize("kw", [{"batch_size": 0}, {"epochs": -1}])
def test_bad_sizes_rejected(kw):
    with pytest.raises(ConfigError):
        TrainConfig(**kw)


def test_lr_defaults_per_aggregator():
    tc = TrainConfig()
    assert tc.resolve_lr("cnn") == 0.001
    assert tc.resolve_lr("rnn_lstm") == 0.0025
    assert TrainConfig(lr=0.01).resolve_lr("cnn") == 0.01


def test_pool_seeds():
    assert TrainConfig(pool_size=3, ensemble_size=2).pool_seeds() == [0, 1, 2]
    tc = TrainConfig(pool_size=2, ensemble_size=2, seeds=[7, 9])
    assert tc.pool_seeds() == [7, 9]
    with pytest.raises(ConfigError):
        TrainConfig(pool_size=3, ensemble_size=2, seeds=[1]).pool_seeds()


# -- records --------------------------------------------------------------------


def test_record_accuracy():
    rec = EvalRecord("m", "val", ["a", "b", "c", "d"], [1, 0, 1, 1])
    assert rec.accuracy == 75.0
    assert EvalRecord("m", "val", [], []).accuracy == 0.0


def test_record_round_trip(tmp_path):
    recs = [
        EvalRecord("cnn-seed0", "val", ["q1", "q2"], [1, 0], epoch=3),
        EvalRecord("rnn-seed1", "custom", ["q9"], [1]),
    ]
    path = tmp_path / "records.json"
    save_records(recs, path)
    loaded = load_records(path)
    assert [r.to_dict() for r in loaded] == [r.to_dict() for r in recs]


def test_record_rejects_inconsistent_accuracy():
    d = EvalRecord("m", "val", ["q1", "q2"], [1, 0]).to_dict()
    d["accuracy"] = 90.0
    with pytest.raises(ConfigError, match="accuracy"):
        EvalRecord.from_dict(d)


# -- loss -----------------------------------------------------------------------


def test_loss_is_gold_nll(tiny_ds, tiny_table, tiny_params):
    inst = tiny_ds.val[0]
    tr = forward(inst, tiny_ds.plot_of(inst), tiny_table, tiny_params)
    for gold in range(5):
        assert loss(tr, gold) == pytest.approx(-math.log(tr.probabilities[gold]), rel=1e-12)
    with pytest.raises(ConfigError):
        loss(tr, 5)
    with pytest.raises(ConfigError):
        loss(tr, -1)


# -- evaluate ---------------------------------------------------------------------


def test_evaluate_bits_match_forward(tiny_ds, tiny_table, tiny_params):
    rec = evaluate(tiny_params, tiny_ds, tiny_table, "val", model_id="m", epoch=0)
    assert rec.split == "val"
    assert rec.epoch == 0
    assert rec.qids == [inst.qid for inst in tiny_ds.val]
    for inst, bit in zip(tiny_ds.val, rec.bits):
        tr = forward(inst, tiny_ds.plot_of(inst), tiny_table, tiny_params)
        assert bit == int(tr.selected == inst.correct_index)


def test_evaluate_accepts_instance_list(tiny_ds, tiny_table, tiny_params):
    rec = evaluate(tiny_params, tiny_ds, tiny_table, tiny_ds.val[:2])
    assert rec.split == "custom"
    assert len(rec.bits) == 2


def test_evaluate_requires_labels(tiny_ds, tiny_table, tiny_params):
    bare = [dataclasses.replace(tiny_ds.val[0], correct_index=None)]
    with pytest.raises(ConfigError, match="gold"):
        evaluate(tiny_params, tiny_ds, tiny_table, bare)


# -- train_model -------------------------------------------------------------------


def _quick_tc(**kw):
    kw.setdefault("epochs", 1)
    kw.setdefault("batch_size", 16)
    return TrainConfig(**kw)


def test_training_is_seed_deterministic(tiny_ds, tiny_table):
    mc = tiny_config("cnn")
    a, hist_a = train_model(mc, _quick_tc(), tiny_ds, tiny_table, seed=0)
    b, hist_b = train_model(mc, _quick_tc(), tiny_ds, tiny_table, seed=0)
    c, _ = train_model(mc, _quick_tc(), tiny_ds, tiny_table, seed=1)
    for name in a.tensors:
        assert np.array_equal(a[name].value, b[name].value)
    assert hist_a[0].bits == hist_b[0].bits
    assert any(not np.array_equal(a[n].value, c[n].value) for n in a.tensors)


def test_training_reduces_loss(tiny_ds, tiny_table):
    mc = tiny_config("cnn")
    tc = _quick_tc(epochs=3)
    params, _ = train_model(mc, tc, tiny_ds, tiny_table, seed=0)
    from caqa.model import init_model

    fresh = init_model(dataclasses.replace(mc, seed=0), tiny_table)

    def mean_nll(p):
        return np.mean(
            [
                loss(forward(i, tiny_ds.plot_of(i), tiny_table, p), i.correct_index)
                for i in tiny_ds.train
            ]
        )

    assert mean_nll(params) < mean_nll(fresh)


def test_returned_params_are_best_epoch(tiny_ds, tiny_table):
    params, history = train_model(
        tiny_config("cnn"), _quick_tc(epochs=3), tiny_ds, tiny_table, seed=0
    )
    assert len(history) == 3
    best = max(h.accuracy for h in history)
    rec = evaluate(params, tiny_ds, tiny_table, "val")
    assert rec.accuracy == best


def test_empty_train_split_rejected(tiny_ds, tiny_table):
    empty = dataclasses.replace(tiny_ds, train=[])
    with pytest.raises(ConfigError, match="train"):
        train_model(tiny_config("cnn"), _quick_tc(), empty, tiny_table, seed=0)


def test_nan_embeddings_raise_divergence(tiny_ds, tiny_table):
    poisoned = {t: tiny_table.known[t].copy() for t in tiny_table.vocabulary()}
    poisoned["the"] = np.full(tiny_table.dim, np.nan)
    bad_table = EmbeddingTable(tiny_table.dim, poisoned, oov_seed=tiny_table.oov_seed)
    with pytest.raises(DivergenceError) as exc:
        train_model(tiny_config("cnn"), _quick_tc(), tiny_ds, bad_table, seed=0)
    assert exc.value.epoch == 0
    assert exc.value.batch == 0


# -- pools ---------------------------------------------------------------------------


def test_train_pool(tiny_ds, tiny_table):
    tc = _quick_tc(pool_size=2, ensemble_size=2)
    members = train_pool(tiny_config("cnn"), tc, tiny_ds, tiny_table)
    assert [m.seed for m in members] == [0, 1]
    for m in members:
        assert len(m.history) == 1
        assert m.best_record is m.history[0]
    # independent trainings: seeds produce different weights
    assert any(
        not np.array_equal(members[0].params[n].value, members[1].params[n].value)
        for n in members[0].params.tensors
    )


def test_pool_needs_an_epoch(tiny_ds, tiny_table):
    tc = _quick_tc(epochs=0, pool_size=1, ensemble_size=1)
    with pytest.raises(ConfigError, match="epochs"):
        train_pool(tiny_config("cnn"), tc, tiny_ds, tiny_table)


def test_best_record_prefers_earliest_tie():
    from caqa.training import PoolMember

    h = [
        EvalRecord("m", "val", ["a"], [1], epoch=0),
        EvalRecord("m", "val", ["a"], [1], epoch=1),
        EvalRecord("m", "val", ["a"], [0], epoch=2),
    ]
    assert PoolMember(0, None, h).best_record.epoch == 0
