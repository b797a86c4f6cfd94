"""Training loop with best-epoch selection, evaluation, and seed pools."""

import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Graph
from .corpus import Dataset, EmbeddingTable, encode_tokens
from .errors import ConfigError, DivergenceError
from .model import ModelConfig, ModelParams, build_forward, init_model
from .optim import Rng, adam_update

log = logging.getLogger(__name__)

# Table-6 learning rates differ by aggregator.
DEFAULT_LR = {"cnn": 0.001, "rnn_lstm": 0.0025}


@dataclass
class TrainConfig:
    epochs: int = 5
    batch_size: int = 30
    lr: float | None = None  # None → aggregator default
    l2: float = 0.0001
    pool_size: int = 11
    ensemble_size: int = 9
    seeds: list = field(default_factory=list)

    def __post_init__(self):
        if self.ensemble_size > self.pool_size:
            raise ConfigError(
                f"ensemble_size {self.ensemble_size} exceeds pool_size {self.pool_size}"
            )
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be >= 1 and epochs >= 0")

    def resolve_lr(self, aggregator: str) -> float:
        return DEFAULT_LR[aggregator] if self.lr is None else self.lr

    def pool_seeds(self) -> list:
        if self.seeds:
            if len(self.seeds) != self.pool_size:
                raise ConfigError(
                    f"{len(self.seeds)} seeds given for pool_size {self.pool_size}"
                )
            return list(self.seeds)
        return list(range(self.pool_size))


@dataclass
class EvalRecord:
    model_id: str
    split: str
    qids: list
    bits: list  # 1 = answered correctly
    epoch: int | None = None

    @property
    def accuracy(self) -> float:
        return 100.0 * (sum(self.bits) / len(self.bits)) if self.bits else 0.0

    def to_dict(self) -> dict:
        return {
            "model_id": self.model_id,
            "split": self.split,
            "accuracy": self.accuracy,
            "bits": list(self.bits),
            "qids": list(self.qids),
            "epoch": self.epoch,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvalRecord":
        rec = cls(d["model_id"], d["split"], list(d["qids"]), list(d["bits"]), d.get("epoch"))
        stored = d.get("accuracy")
        if stored is not None and abs(stored - rec.accuracy) > 1e-9:
            raise ConfigError(f"record {rec.model_id}: accuracy {stored} != bits mean")
        return rec


def save_records(records, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump([r.to_dict() for r in records], fh, indent=1)
        fh.write("\n")


def load_records(path) -> list:
    with open(path, encoding="utf-8") as fh:
        return [EvalRecord.from_dict(d) for d in json.load(fh)]


def loss(trace, gold: int) -> float:
    """Negative log-likelihood of the gold candidate for one trace."""
    if not 0 <= gold < len(trace.probabilities):
        raise ConfigError(f"gold index {gold} out of range")
    p = max(float(trace.probabilities[gold]), 1e-12)
    return -math.log(p)


def evaluate(params: ModelParams, ds: Dataset, table: EmbeddingTable,
             instances="val", model_id="model", epoch=None) -> EvalRecord:
    """Accuracy over a split name or an explicit instance list."""
    from .model import forward  # local import keeps module load cheap

    split = instances if isinstance(instances, str) else "custom"
    if isinstance(instances, str):
        instances = ds.split(instances)
    qids, bits = [], []
    for inst in instances:
        if inst.correct_index is None:
            raise ConfigError(f"instance {inst.qid}: cannot score without gold label")
        trace = forward(inst, ds.plot_of(inst), table, params)
        qids.append(inst.qid)
        bits.append(int(trace.selected == inst.correct_index))
    return EvalRecord(model_id, split, qids, bits, epoch)


def _clone_values(params: ModelParams) -> dict:
    return {n: t.value.copy() for n, t in params.tensors.items()}


def _restore_values(params: ModelParams, snapshot: dict):
    for n, t in params.tensors.items():
        t.value[...] = snapshot[n]


def train_model(model_config: ModelConfig, train_config: TrainConfig,
                ds: Dataset, table: EmbeddingTable, seed: int):
    """Train one model; returns (best-epoch params, per-epoch EvalRecords).

    Mini-batches are reshuffled each epoch from a seeded stream; the batch
    loss is the mean NLL over its instances; Adam with L2 on weight
    matrices. The returned parameters are from the epoch with the highest
    validation accuracy (earliest on ties). NaN/inf loss aborts.
    """
    model_config = dataclasses.replace(model_config, seed=seed)
    params = init_model(model_config, table, dtype=np.float64)
    lr = train_config.resolve_lr(model_config.aggregator)
    rng = Rng(seed)
    train = ds.train
    if not train:
        raise ConfigError("empty train split")

    encoded = {}

    def encoding(inst):
        enc = encoded.get(inst.qid)
        if enc is None:
            plot = ds.plot_of(inst)
            enc = (
                encode_tokens(inst.question, table),
                [encode_tokens(s, table) for s in plot.sentences],
                [encode_tokens(c, table) for c in inst.candidates],
            )
            encoded[inst.qid] = enc
        return enc

    history = []
    best = (None, -1.0, -1)  # snapshot, accuracy, epoch
    model_id = f"{model_config.aggregator}-seed{seed}"
    for epoch in range(train_config.epochs):
        order = np.arange(len(train))
        rng.derive("shuffle", epoch).shuffle(order)
        nbatches = math.ceil(len(train) / train_config.batch_size)
        for b in range(nbatches):
            lo = b * train_config.batch_size
            batch = [train[i] for i in order[lo : lo + train_config.batch_size]]
            g = Graph(dtype=np.float64)
            dropout_rng = (
                rng.derive("dropout", epoch, b) if model_config.dropout > 0 else None
            )
            losses = []
            for inst in batch:
                q, ps, cs = encoding(inst)
                built = build_forward(
                    g, params, q, ps, cs, trainable=True, dropout_rng=dropout_rng
                )
                losses.append(g.nll(built.probs, inst.correct_index))
            total = g.mean_scalars(losses)
            if not np.isfinite(total.value[0, 0]):
                raise DivergenceError(epoch, b)
            params.zero_grad()
            g.backward(total)
            adam_update(params.all(), lr=lr, l2_weight=train_config.l2)
        rec = evaluate(params, ds, table, "val", model_id=model_id, epoch=epoch)
        history.append(rec)
        log.info("%s epoch %d: val accuracy %.2f", model_id, epoch, rec.accuracy)
        if rec.accuracy > best[1]:
            best = (_clone_values(params), rec.accuracy, epoch)
    if best[0] is not None:
        _restore_values(params, best[0])
    return params, history


@dataclass
class PoolMember:
    seed: int
    params: ModelParams
    history: list

    @property
    def best_record(self) -> EvalRecord:
        return max(self.history, key=lambda r: (r.accuracy, -r.epoch))


def train_pool(model_config: ModelConfig, train_config: TrainConfig,
               ds: Dataset, table: EmbeddingTable) -> list:
    """Independently train one model per pool seed."""
    members = []
    for seed in train_config.pool_seeds():
        params, history = train_model(model_config, train_config, ds, table, seed)
        if not history:
            raise ConfigError("pool training requires epochs >= 1")
        members.append(PoolMember(seed, params, history))
        log.info("pool seed %d: best val %.2f", seed, members[-1].best_record.accuracy)
    return members
