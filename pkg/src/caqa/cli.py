"""Command-line interface.

Artifacts are deterministic for fixed arguments and ``--seed``: datasets,
checkpoints, evaluation records, attack outcome logs, and attention exports
are all byte-reproducible.
"""

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import attacks as atk
from . import corpus, ensemble, report, training
from .errors import CaqaError, ConfigError
from .model import (
    ModelConfig,
    forward,
    init_model,
    load_checkpoint,
    save_checkpoint,
)
from .optim import Rng

log = logging.getLogger(__name__)

_AGG = {"cnn": "cnn", "lstm": "rnn_lstm"}


def _common_flags(p):
    p.add_argument("--config", help="JSON config file (model/train/synth sections)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--data", help="dataset JSON file")
    p.add_argument("--embeddings", help="embedding text file")
    p.add_argument("--out", help="output directory", default=".")
    p.add_argument("--aggregator", choices=sorted(_AGG), default="cnn")
    p.add_argument("--precision", choices=["f32", "f64"], default="f64")


def _attack_flags(p):
    p.add_argument("--k", type=int, default=1, help="words to replace (wordwb)")
    p.add_argument("--mode", choices=list(atk.ADDANY_MODES), default="addqa")
    p.add_argument("--epochs", type=int, default=2, help="greedy sweeps (addany)")
    p.add_argument("--questions", type=int, default=200,
                   help="random questions to attack")
    p.add_argument("--rules", help="substitution rules file (lexsub)")
    p.add_argument("--split", default="val", choices=["train", "val", "test"])
    p.add_argument("--ckpt", action="append", default=[], help="model checkpoint")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="caqa",
        description="Hierarchical compare-aggregate QA over plot summaries",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def cmd(name, **kw):
        p = sub.add_parser(name, **kw)
        _common_flags(p)
        return p

    cmd("synth", help="generate a synthetic dataset + embeddings")

    p = cmd("train", help="train a single model")
    p.add_argument("--train-seed", type=int, default=None,
                   help="model init/shuffle seed (defaults to --seed)")

    p = cmd("eval", help="evaluate a checkpoint")
    p.add_argument("--ckpt", action="append", default=[], required=True)
    p.add_argument("--split", default="val", choices=["train", "val", "test"])

    cmd("pool", help="train the full seed pool")

    p = cmd("ensemble-eval", help="top-k majority vote over checkpoints")
    p.add_argument("--ckpt", action="append", default=[], required=True)
    p.add_argument("--split", default="val", choices=["train", "val", "test"])

    p = cmd("attack", help="run an adversarial evaluation")
    p.add_argument("kind", choices=["lexsub", "wordwb", "addany", "sentrm"])
    _attack_flags(p)

    p = cmd("transfer", help="replay recorded attacks against other models")
    p.add_argument("--outcomes", action="append", default=[], required=True)
    p.add_argument("--ckpt", action="append", default=[], required=True)

    p = cmd("relevance", help="evidence-sentence ranking metric")
    p.add_argument("--ckpt", action="append", default=[], required=True)
    p.add_argument("--split", default="val", choices=["train", "val", "test"])

    p = cmd("export-attention", help="write relevance/importance maps for one question")
    p.add_argument("--ckpt", action="append", default=[], required=True)
    p.add_argument("--qid", required=True)
    p.add_argument("--condition", default="selected")
    p.add_argument("--split", default="val", choices=["train", "val", "test"])

    p = cmd("mcnemar", help="significance test between two eval record files")
    p.add_argument("record_a")
    p.add_argument("record_b")
    return parser


# -- shared plumbing ---------------------------------------------------------


def _read_config(args) -> dict:
    if not args.config:
        return {}
    with open(args.config, encoding="utf-8") as fh:
        doc = json.load(fh)
    if not isinstance(doc, dict):
        raise ConfigError(f"{args.config}: expected a JSON object")
    return doc


def _infer_dim(path) -> int:
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            parts = line.split()
            if parts:
                return len(parts) - 1
    raise ConfigError(f"{path}: empty embedding file")


def _load_data(args):
    if not args.data or not args.embeddings:
        raise ConfigError("--data and --embeddings are required for this command")
    ds = corpus.load_dataset(args.data)
    table = corpus.load_embeddings(args.embeddings, _infer_dim(args.embeddings))
    return ds, table


def _model_config(args, cfg, table) -> ModelConfig:
    section = dict(cfg.get("model", {}))
    section.setdefault("aggregator", _AGG[args.aggregator])
    section.setdefault("embedding_dim", table.dim)
    section.setdefault("seed", args.seed)
    return ModelConfig.from_dict(section)


def _train_config(cfg) -> training.TrainConfig:
    return training.TrainConfig(**cfg.get("train", {}))


def _dtype(args):
    return np.float32 if args.precision == "f32" else np.float64


def _outdir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_models(paths):
    if not paths:
        raise ConfigError("at least one --ckpt is required")
    return [load_checkpoint(p) for p in paths]


def _pick_instances(ds, split, n, seed):
    instances = ds.split(split)
    if not instances:
        raise ConfigError(f"split {split!r} is empty")
    if n and n < len(instances):
        idx = sorted(Rng(seed, "questions").choice(len(instances), size=n, replace=False))
        instances = [instances[i] for i in idx]
    return instances


# -- commands ----------------------------------------------------------------


def _cmd_synth(args):
    cfg = _read_config(args)
    section = dict(cfg.get("synth", {}))
    section.setdefault("seed", args.seed)
    if "split_fractions" in section:
        section["split_fractions"] = tuple(section["split_fractions"])
    ds, table = corpus.gen_synthetic(corpus.SynthConfig(**section))
    out = _outdir(args)
    corpus.save_dataset(ds, out / "data.json")
    corpus.save_embeddings(table, out / "embeddings.txt")
    print(
        f"wrote {out / 'data.json'} ({len(ds.train)} train / {len(ds.val)} val / "
        f"{len(ds.test)} test) and {out / 'embeddings.txt'} (dim {table.dim})"
    )
    return 0


def _cmd_train(args):
    cfg = _read_config(args)
    ds, table = _load_data(args)
    mc = _model_config(args, cfg, table)
    tc = _train_config(cfg)
    seed = args.seed if args.train_seed is None else args.train_seed
    params, history = training.train_model(mc, tc, ds, table, seed)
    if args.precision == "f32":
        for t in params.all():
            t.value = t.value.astype(np.float32)
        params.dtype = np.dtype(np.float32)
    out = _outdir(args)
    model_id = f"{mc.aggregator}-seed{seed}"
    ckpt = out / f"{model_id}.ckpt"
    save_checkpoint(params, ckpt)
    training.save_records(history, out / f"{model_id}-history.json")
    for rec in history:
        print(f"epoch {rec.epoch}: val accuracy {rec.accuracy:.2f}")
    best = max(history, key=lambda r: (r.accuracy, -r.epoch)) if history else None
    if best is not None:
        print(f"kept epoch {best.epoch} ({best.accuracy:.2f}); wrote {ckpt}")
    else:
        print(f"no training epochs; wrote initialized params to {ckpt}")
    return 0


def _cmd_eval(args):
    ds, table = _load_data(args)
    out = _outdir(args)
    records = []
    for path in args.ckpt:
        params = _load_models([path])[0]
        rec = training.evaluate(params, ds, table, args.split, model_id=Path(path).stem)
        records.append(rec)
        print(f"{rec.model_id}: {args.split} accuracy {rec.accuracy:.2f} (n={len(rec.bits)})")
    training.save_records(records, out / "eval-records.json")
    return 0


def _cmd_pool(args):
    cfg = _read_config(args)
    ds, table = _load_data(args)
    mc = _model_config(args, cfg, table)
    tc = _train_config(cfg)
    members = training.train_pool(mc, tc, ds, table)
    out = _outdir(args)
    records = []
    for m in members:
        save_checkpoint(m.params, out / f"{mc.aggregator}-seed{m.seed}.ckpt")
        records.extend(m.history)
        print(f"seed {m.seed}: best val {m.best_record.accuracy:.2f}")
    training.save_records(records, out / "pool-history.json")
    return 0


def _cmd_ensemble_eval(args):
    cfg = _read_config(args)
    ds, table = _load_data(args)
    tc = _train_config(cfg)
    models = _load_models(args.ckpt)
    vals = [
        training.evaluate(params, ds, table, "val", model_id=Path(path).stem)
        for path, params in zip(args.ckpt, models)
    ]
    k = min(tc.ensemble_size, len(models))
    ranked = sorted(range(len(models)), key=lambda i: -vals[i].accuracy)[:k]
    chosen = [models[i] for i in ranked]
    best_single = vals[ranked[0]]
    rec = ensemble.ensemble_evaluate(chosen, ds, table, args.split,
                                     model_id=f"ensemble-top{k}")
    single_on_split = training.evaluate(
        chosen[0], ds, table, args.split, model_id=best_single.model_id
    )
    _, text, payload = report.make_report(
        [single_on_split, rec],
        comparisons=[(rec.model_id, single_on_split.model_id)],
    )
    print(text)
    out = _outdir(args)
    (out / "ensemble-report.json").write_text(payload + "\n", encoding="utf-8")
    training.save_records([single_on_split, rec], out / "ensemble-records.json")
    return 0


def _attack_one(args, inst, ds, table, params, common, rng):
    plot = ds.plot_of(inst)
    if args.kind == "wordwb":
        return atk.whitebox_word_attack(
            inst, plot, table, params, args.k, rng.derive("wordwb", inst.qid)
        )
    if args.kind == "addany":
        return atk.addany_attack(
            inst, plot, table, params, args.mode, common,
            rng.derive("addany", args.mode, inst.qid), epochs=args.epochs,
        )
    if args.kind == "sentrm":
        return atk.sentence_removal_attack(inst, plot, table, params)
    raise ConfigError(f"unhandled attack kind {args.kind!r}")


def _cmd_attack(args):
    ds, table = _load_data(args)
    params = _load_models(args.ckpt)[0]
    instances = _pick_instances(ds, args.split, args.questions, args.seed)
    rng = Rng(args.seed)
    if args.kind == "lexsub":
        if not args.rules:
            raise ConfigError("lexsub requires --rules")
        rules = corpus.load_rules(args.rules, table)
        outcomes, fraction = atk.lexsub_attack(instances, ds, table, params, rules)
        print(f"modified {100 * fraction:.1f}% of questions")
    else:
        common = corpus.common_words(ds)
        outcomes = [
            _attack_one(args, inst, ds, table, params, common, rng)
            for inst in instances
        ]
    pre = 100.0 * sum(o.pre_correct for o in outcomes) / len(outcomes)
    post = 100.0 * sum(o.post_correct for o in outcomes) / len(outcomes)
    suffix = {"wordwb": f"-k{args.k}", "addany": f"-{args.mode}"}.get(args.kind, "")
    out = _outdir(args)
    path = out / f"attack-{args.kind}{suffix}.jsonl"
    atk.save_outcomes(outcomes, path)
    print(f"{args.kind}{suffix}: clean {pre:.2f} -> attacked {post:.2f} "
          f"(n={len(outcomes)}); outcomes in {path}")
    return 0


def _cmd_transfer(args):
    ds, table = _load_data(args)
    models = _load_models(args.ckpt)
    matrix = {}
    for opath in args.outcomes:
        outcomes = atk.load_outcomes(opath)
        for mpath, params in zip(args.ckpt, models):
            acc, _ = atk.transfer_eval(outcomes, ds, table, params)
            matrix[f"{Path(opath).stem} -> {Path(mpath).stem}"] = round(acc, 2)
            print(f"{Path(opath).stem} vs {Path(mpath).stem}: accuracy {acc:.2f}")
    out = _outdir(args)
    (out / "transfer.json").write_text(
        json.dumps(matrix, indent=1, sort_keys=True) + "\n", encoding="utf-8"
    )
    return 0


def _cmd_relevance(args):
    ds, table = _load_data(args)
    models = _load_models(args.ckpt)
    stats = report.relevance_rank_metric(models, ds, table, args.split)
    print(
        f"evidence ranked highest: all {stats['all']:.2f}%  "
        f"correct {stats['correct']:.2f}%  incorrect {stats['incorrect']:.2f}%  "
        f"({stats['n_questions']} questions, {stats['n_models']} models)"
    )
    out = _outdir(args)
    (out / "relevance.json").write_text(
        json.dumps(stats, indent=1, sort_keys=True) + "\n", encoding="utf-8"
    )
    return 0


def _cmd_export_attention(args):
    ds, table = _load_data(args)
    params = _load_models(args.ckpt)[0]
    inst = next((i for i in ds.split(args.split) if i.qid == args.qid), None)
    if inst is None:
        raise ConfigError(f"qid {args.qid!r} not found in split {args.split!r}")
    condition = args.condition
    if condition not in ("selected", "gold"):
        condition = int(condition)
    trace = forward(inst, ds.plot_of(inst), table, params, condition=condition)
    out = _outdir(args)
    written = report.export_attention(trace, out / f"{args.qid}.json", qid=args.qid)
    print("wrote " + ", ".join(str(w) for w in written))
    return 0


def _cmd_mcnemar(args):
    rec_a = training.load_records(args.record_a)[0]
    rec_b = training.load_records(args.record_b)[0]
    if rec_a.qids != rec_b.qids:
        raise ConfigError("records cover different question sets")
    stat, p = ensemble.mcnemar(rec_a.bits, rec_b.bits)
    print(f"chi2 = {stat:.4f}, p = {p:.6f}")
    return 0


_COMMANDS = {
    "synth": _cmd_synth,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "pool": _cmd_pool,
    "ensemble-eval": _cmd_ensemble_eval,
    "attack": _cmd_attack,
    "transfer": _cmd_transfer,
    "relevance": _cmd_relevance,
    "export-attention": _cmd_export_attention,
    "mcnemar": _cmd_mcnemar,
}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (CaqaError, OSError, json.JSONDecodeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
