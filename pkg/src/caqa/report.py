"""Relevance-ranking analysis, attention export, and result tables."""

import json
from dataclasses import dataclass, field

import numpy as np

from .ensemble import mcnemar
from .errors import ReportError
from .model import forward


def relevance_rank_metric(models, ds, table, instances="val") -> dict:
    """How often an annotated evidence sentence tops the relevance ranking.

    Relevance is conditioned on each model's selected answer; a question is
    a hit when any annotated sentence attains the maximum score (ties count
    as hits). Returns percentages averaged over models, split by whether
    the model answered correctly:
    {"all", "correct", "incorrect", "n_questions", "n_models"}.
    """
    if isinstance(instances, str):
        instances = ds.split(instances)
    annotated = [i for i in instances if i.evidence_sentences]
    if not annotated:
        raise ReportError("no instances with evidence annotations")
    models = list(models)
    per_model = []
    for params in models:
        hits_all = hits_c = hits_i = n_c = n_i = 0
        for inst in annotated:
            trace = forward(inst, ds.plot_of(inst), table, params, condition="selected")
            rel = np.asarray(trace.relevance)
            top = rel.max()
            hit = any(rel[s] == top for s in inst.evidence_sentences)
            correct = (
                inst.correct_index is not None and trace.selected == inst.correct_index
            )
            hits_all += hit
            if correct:
                n_c += 1
                hits_c += hit
            else:
                n_i += 1
                hits_i += hit
        per_model.append(
            {
                "all": 100.0 * hits_all / len(annotated),
                "correct": 100.0 * hits_c / n_c if n_c else 0.0,
                "incorrect": 100.0 * hits_i / n_i if n_i else 0.0,
            }
        )
    n = len(per_model)
    return {
        "all": sum(m["all"] for m in per_model) / n,
        "correct": sum(m["correct"] for m in per_model) / n,
        "incorrect": sum(m["incorrect"] for m in per_model) / n,
        "n_questions": len(annotated),
        "n_models": n,
    }


def export_attention(trace, path, qid="", write_pgm=True):
    """Write relevance scores and per-word importances for one trace.

    ``path`` receives a JSON document; with ``write_pgm`` a grayscale
    portable graymap (one pixel row per plot sentence, one column per word
    position, min-max normalized over the question) is written next to it.
    Returns the list of written paths.
    """
    path = str(path)
    n = len(trace.relevance)
    importances = [
        [float(v) for v in trace.word_importance(i)] for i in range(n)
    ]
    doc = {
        "qid": qid,
        "selected": trace.selected,
        "condition_index": trace.condition_index,
        "relevance": [float(r) for r in trace.relevance],
        "word_importance": importances,
    }
    json_path = path if path.endswith(".json") else path + ".json"
    with open(json_path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")
    written = [json_path]
    if write_pgm:
        width = max(len(row) for row in importances)
        flat = [v for row in importances for v in row]
        lo, hi = min(flat), max(flat)
        span = (hi - lo) or 1.0
        pgm_path = json_path[: -len(".json")] + ".pgm"
        lines = [f"P2 {width} {n} 255"]
        for row in importances:
            vals = [str(int(round(255 * (v - lo) / span))) for v in row]
            vals += ["0"] * (width - len(row))
            lines.append(" ".join(vals))
        with open(pgm_path, "w", encoding="ascii") as fh:
            fh.write("\n".join(lines))
            fh.write("\n")
        written.append(pgm_path)
    return written


@dataclass
class EvalReport:
    label: str
    condition: str
    accuracy: float
    n: int
    relevance: dict | None = None
    mcnemar_vs: dict = field(default_factory=dict)  # other label → p-value

    def to_dict(self) -> dict:
        d = {
            "label": self.label,
            "condition": self.condition,
            "accuracy": round(self.accuracy, 2),
            "n": self.n,
        }
        if self.relevance is not None:
            d["relevance"] = self.relevance
        if self.mcnemar_vs:
            d["mcnemar_vs"] = self.mcnemar_vs
        return d


def make_report(records, comparisons=(), relevance_by_label=None):
    """Render EvalRecords as (EvalReport list, text table, JSON string).

    ``comparisons`` lists (label_a, label_b) pairs to annotate with McNemar
    p-values; compared records must cover identical question sets.
    """
    by_label = {}
    for rec in records:
        if rec.model_id in by_label:
            raise ReportError(f"duplicate record label {rec.model_id!r}")
        by_label[rec.model_id] = rec
    reports = {
        rec.model_id: EvalReport(
            rec.model_id,
            rec.split,
            rec.accuracy,
            len(rec.bits),
            relevance=(relevance_by_label or {}).get(rec.model_id),
        )
        for rec in records
    }
    for a, b in comparisons:
        if a not in by_label or b not in by_label:
            raise ReportError(f"comparison ({a!r}, {b!r}) references unknown record")
        ra, rb = by_label[a], by_label[b]
        if ra.qids != rb.qids:
            diff = sorted(set(ra.qids).symmetric_difference(rb.qids))
            raise ReportError(
                f"records {a!r} and {b!r} cover different questions: {diff[:10]}"
            )
        _, p = mcnemar(ra.bits, rb.bits)
        reports[a].mcnemar_vs[b] = p

    rows = [("system", "condition", "n", "accuracy", "mcnemar")]
    for rec in records:
        rep = reports[rec.model_id]
        notes = "; ".join(f"vs {o}: p={p:.4f}" for o, p in rep.mcnemar_vs.items())
        rows.append((rep.label, rep.condition, str(rep.n), f"{rep.accuracy:.2f}", notes))
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    text = "\n".join(
        "  ".join(cell.ljust(widths[i]) for i, cell in enumerate(row)).rstrip()
        for row in rows
    )
    report_list = [reports[rec.model_id] for rec in records]
    payload = json.dumps([r.to_dict() for r in report_list], indent=1, sort_keys=True)
    return report_list, text, payload
