"""Dataset/embedding ingestion, tokenization, OOV handling, and a synthetic
toy-QA generator.

The dataset file is one JSON document: ``{"movies": [{"id", "plot": [sentence
strings]}], "qa": [{"qid", "movie_id", "question", "answers": [5 strings],
"correct_index": int|null, "plot_sentences": [ints], "split": optional}]}``.
Raw strings only; tokenization happens at load. Embeddings are plain text,
one ``token v1 ... v_dim`` per line.
"""

import hashlib
import json
import logging
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, CorpusError
from .optim import Rng

log = logging.getLogger(__name__)

PUNCT = set('.,!?;:"()[]')
SPLITS = ("train", "val", "test")


def tokenize(text: str) -> list:
    """Lowercase, split on whitespace, and detach punctuation characters
    ``.,!?;:"()[]`` into standalone tokens. Apostrophes stay inside tokens."""
    out = []
    for chunk in text.lower().split():
        run = []
        for ch in chunk:
            if ch in PUNCT:
                if run:
                    out.append("".join(run))
                    run = []
                out.append(ch)
            else:
                run.append(ch)
        if run:
            out.append("".join(run))
    return out


@dataclass
class Plot:
    movie_id: str
    sentences: list  # list of token lists


@dataclass
class QAInstance:
    qid: str
    movie_id: str
    question: list
    candidates: list  # exactly 5 token lists
    correct_index: int | None
    evidence_sentences: list = field(default_factory=list)


@dataclass
class Dataset:
    movies: dict  # movie_id -> Plot
    train: list
    val: list
    test: list

    def split(self, name: str) -> list:
        if name not in SPLITS:
            raise CorpusError(f"unknown split {name!r}")
        return getattr(self, name)

    def plot_of(self, inst: QAInstance) -> Plot:
        return self.movies[inst.movie_id]


class EmbeddingTable:
    """Token → vector map with deterministic out-of-vocabulary fallback."""

    def __init__(self, dim: int, known: dict, oov_seed: int = 0):
        self.dim = int(dim)
        self.known = known
        self.oov_seed = int(oov_seed)
        self._oov_cache = {}

    def lookup(self, token: str) -> np.ndarray:
        vec = self.known.get(token)
        if vec is None:
            vec = self._oov_cache.get(token)
            if vec is None:
                vec = oov_vector(token, self)
                self._oov_cache[token] = vec
        return vec

    def vocabulary(self) -> list:
        """Known tokens in a stable (sorted) order."""
        return sorted(self.known)


def oov_vector(token: str, table: EmbeddingTable) -> np.ndarray:
    """Deterministic stand-in embedding, uniform in [-0.05, 0.05] per
    component, keyed by a stable 64-bit hash of the token."""
    h = int.from_bytes(
        hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest(), "little"
    )
    rng = Rng(table.oov_seed, h)
    return rng.uniform(-0.05, 0.05, size=table.dim)


@dataclass
class SubstitutionRule:
    pattern: list  # 1-2 tokens
    replacement: list  # 1+ tokens


# -- dataset I/O -----------------------------------------------------------


def _qa_split(entry) -> str:
    split = entry.get("split")
    if split is not None:
        if split not in SPLITS:
            raise CorpusError(f"qa {entry.get('qid')!r}: unknown split {split!r}")
        return split
    qid = entry.get("qid", "")
    for name in SPLITS:
        if qid.startswith(name + ":"):
            return name
    return "train"


def load_dataset(path) -> Dataset:
    """Parse and validate a dataset file into tokenized splits."""
    with open(path, encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as e:
            raise CorpusError(f"{path}: invalid JSON: {e}") from e
    if not isinstance(doc, dict) or "movies" not in doc or "qa" not in doc:
        raise CorpusError(f"{path}: expected object with 'movies' and 'qa'")

    movies = {}
    for m in doc["movies"]:
        mid = m.get("id")
        if not mid or not isinstance(m.get("plot"), list) or not m["plot"]:
            raise CorpusError(f"movie {mid!r}: needs an id and a non-empty plot")
        if mid in movies:
            raise CorpusError(f"movie {mid!r}: duplicate id")
        sentences = []
        for si, raw in enumerate(m["plot"]):
            toks = tokenize(raw)
            if not toks:
                raise CorpusError(f"movie {mid!r}: sentence {si} empty after tokenization")
            sentences.append(toks)
        movies[mid] = Plot(mid, sentences)

    splits = {name: [] for name in SPLITS}
    for entry in doc["qa"]:
        qid = entry.get("qid")
        if not qid:
            raise CorpusError("qa entry without qid")
        mid = entry.get("movie_id")
        if mid not in movies:
            raise CorpusError(f"qa {qid!r}: references unknown movie {mid!r}")
        answers = entry.get("answers")
        if not isinstance(answers, list) or len(answers) != 5:
            raise CorpusError(f"qa {qid!r}: expected exactly 5 answers")
        split = _qa_split(entry)
        ci = entry.get("correct_index")
        if ci is None:
            if split != "test":
                raise CorpusError(f"qa {qid!r}: {split} instance lacks correct_index")
        elif not (isinstance(ci, int) and 0 <= ci <= 4):
            raise CorpusError(f"qa {qid!r}: correct_index {ci!r} not in 0..4")
        n = len(movies[mid].sentences)
        evidence = entry.get("plot_sentences") or []
        for si in evidence:
            if not (isinstance(si, int) and 0 <= si < n):
                raise CorpusError(f"qa {qid!r}: evidence sentence {si!r} out of range")
        splits[split].append(
            QAInstance(
                qid=qid,
                movie_id=mid,
                question=tokenize(entry.get("question", "")),
                candidates=[tokenize(a) for a in answers],
                correct_index=ci,
                evidence_sentences=list(evidence),
            )
        )

    ds = Dataset(movies, splits["train"], splits["val"], splits["test"])
    log.info(
        "loaded %s: %d movies, %d train / %d val / %d test questions",
        path, len(movies), len(ds.train), len(ds.val), len(ds.test),
    )
    return ds


def save_dataset(ds: Dataset, path):
    """Serialize losslessly (tokens joined by single spaces); byte-stable."""
    doc = {
        "movies": [
            {"id": p.movie_id, "plot": [" ".join(s) for s in p.sentences]}
            for p in ds.movies.values()
        ],
        "qa": [],
    }
    for split in SPLITS:
        for inst in ds.split(split):
            doc["qa"].append(
                {
                    "qid": inst.qid,
                    "movie_id": inst.movie_id,
                    "question": " ".join(inst.question),
                    "answers": [" ".join(c) for c in inst.candidates],
                    "correct_index": inst.correct_index,
                    "plot_sentences": inst.evidence_sentences,
                    "split": split,
                }
            )
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, ensure_ascii=True, separators=(",", ":"))
        fh.write("\n")


# -- embeddings ------------------------------------------------------------


def load_embeddings(path, dim: int, oov_seed: int = 0) -> EmbeddingTable:
    known = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != dim + 1:
                raise CorpusError(
                    f"{path}:{lineno}: expected token + {dim} values, got {len(parts) - 1}"
                )
            token = parts[0]
            try:
                vec = np.array([float(v) for v in parts[1:]], dtype=np.float64)
            except ValueError as e:
                raise CorpusError(f"{path}:{lineno}: non-numeric value: {e}") from e
            if token in known:
                log.warning("%s:%d: duplicate token %r, last wins", path, lineno, token)
            known[token] = vec
    return EmbeddingTable(dim, known, oov_seed)


def save_embeddings(table: EmbeddingTable, path):
    with open(path, "w", encoding="utf-8") as fh:
        for token in table.vocabulary():
            vals = " ".join(repr(float(v)) for v in table.known[token])
            fh.write(f"{token} {vals}\n")


def encode_tokens(tokens, table: EmbeddingTable) -> np.ndarray:
    """One column per token; empty input yields a single all-zero column."""
    if not tokens:
        return np.zeros((table.dim, 1))
    return np.column_stack([table.lookup(t) for t in tokens])


def encode_instance(inst: QAInstance, plot: Plot, table: EmbeddingTable):
    """Embed question, plot sentences, and candidates as (dim, len) matrices."""
    q = encode_tokens(inst.question, table)
    ps = [encode_tokens(s, table) for s in plot.sentences]
    cs = [encode_tokens(c, table) for c in inst.candidates]
    return q, ps, cs


# -- substitution rules ----------------------------------------------------


def load_rules(path, table: EmbeddingTable) -> list:
    """Parse ``pattern -> replacement`` lines; rules whose replacement has
    out-of-vocabulary tokens are dropped with a warning."""
    rules = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "->" not in line:
                raise CorpusError(f"{path}:{lineno}: missing '->'")
            lhs, rhs = line.split("->", 1)
            pattern = tokenize(lhs)
            replacement = tokenize(rhs)
            if not 1 <= len(pattern) <= 2:
                raise CorpusError(
                    f"{path}:{lineno}: pattern must be 1-2 tokens, got {len(pattern)}"
                )
            if not replacement:
                raise CorpusError(f"{path}:{lineno}: empty replacement")
            missing = [t for t in replacement if t not in table.known]
            if missing:
                log.warning(
                    "%s:%d: dropping rule %r -> %r (replacement tokens %s not in embeddings)",
                    path, lineno, " ".join(pattern), " ".join(replacement), missing,
                )
                continue
            rules.append(SubstitutionRule(pattern, replacement))
    return rules


def common_words(ds: Dataset, limit: int = 1000) -> list:
    """The most frequent train-split plot/question tokens, punctuation
    excluded, ties broken lexicographically. Candidate texts do not count —
    answer options are choices, not running text."""
    counts = Counter()
    seen_movies = set()
    for inst in ds.train:
        counts.update(t for t in inst.question if t not in PUNCT)
        if inst.movie_id not in seen_movies:
            seen_movies.add(inst.movie_id)
            for sent in ds.movies[inst.movie_id].sentences:
                counts.update(t for t in sent if t not in PUNCT)
    ordered = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return [tok for tok, _ in ordered[:limit]]


# -- synthetic toy data ----------------------------------------------------


@dataclass
class SynthConfig:
    """Sizing for the template generator.

    Token roles are allocated from ``vocab_size``: answer values are kept
    deliberately rare (a couple of plot occurrences each) while filler words
    recur often, so frequency-ranked "common word" pools contain no answer
    values. That mirrors real corpora, where content answers sit in the long
    tail, and keeps distractor-word pools from accidentally containing
    answers.
    """

    n_movies: int = 500
    sentences_per_plot: int = 5
    vocab_size: int = 2300
    dim: int = 20
    seed: int = 0
    split_fractions: tuple = (0.8, 0.1, 0.1)
    fillers_per_sentence: int = 4
    embed_scale: float = 0.5


def _allocate_vocab(cfg: SynthConfig):
    if cfg.vocab_size < 50:
        raise ConfigError(f"vocab_size must be >= 50, got {cfg.vocab_size}")
    budget = cfg.vocab_size - 6  # function words: the in what does . ?
    n_values = max(10, int(budget * 0.40))
    n_fillers = max(10, int(budget * 0.44))
    n_entities = max(cfg.sentences_per_plot, int(budget * 0.08))
    n_verbs = max(5, int(budget * 0.04))
    n_places = max(5, budget - n_values - n_fillers - n_entities - n_verbs)
    return {
        "entities": [f"name{i}" for i in range(n_entities)],
        "verbs": [f"verb{i}" for i in range(n_verbs)],
        "values": [f"item{i}" for i in range(n_values)],
        "places": [f"place{i}" for i in range(n_places)],
        "fillers": [f"word{i}" for i in range(n_fillers)],
    }


def gen_synthetic(cfg: SynthConfig):
    """Build a template QA dataset plus matching embedding table.

    Every plot sentence states one attribute ("the <entity> <verb> the
    <value> in the <place> ..."), each question asks for one attribute, and
    the four distractor candidates mix values stated by the movie's *other*
    sentences with values from outside the plot (the in-plot count varies
    per question). The mix closes both shortcuts: with in-plot distractors
    around, "which option is mentioned anywhere" stops working, and because
    some questions have none, "which option sits in an unrelated sentence"
    cannot separate candidates either — the model has to line the question
    up with the sentence that states the queried fact. Fully determined by
    ``cfg``.
    """
    vocab = _allocate_vocab(cfg)
    root = Rng(cfg.seed)

    all_tokens = ["the", "in", "what", "does", ".", "?"]
    for role in ("entities", "verbs", "values", "places", "fillers"):
        all_tokens.extend(vocab[role])
    emb_rng = root.derive("embeddings")
    known = {
        t: emb_rng.normal(0.0, cfg.embed_scale, size=cfg.dim) for t in sorted(all_tokens)
    }
    table = EmbeddingTable(cfg.dim, known, oov_seed=cfg.seed)

    movies = {}
    by_split = {name: [] for name in SPLITS}
    n_train = int(round(cfg.n_movies * cfg.split_fractions[0]))
    n_val = int(round(cfg.n_movies * cfg.split_fractions[1]))

    values = vocab["values"]
    for mi in range(cfg.n_movies):
        mrng = root.derive("movie", mi)
        mid = f"m{mi:04d}"
        if mi < n_train:
            split = "train"
        elif mi < n_train + n_val:
            split = "val"
        else:
            split = "test"

        entities = [
            str(e)
            for e in mrng.choice(vocab["entities"], size=cfg.sentences_per_plot, replace=False)
        ]
        plot_values = [
            str(v) for v in mrng.choice(values, size=cfg.sentences_per_plot, replace=False)
        ]
        sentences = []
        facts = []
        for si in range(cfg.sentences_per_plot):
            verb = str(mrng.choice(vocab["verbs"]))
            place = str(mrng.choice(vocab["places"]))
            fillers = [
                str(f) for f in mrng.choice(vocab["fillers"], size=cfg.fillers_per_sentence)
            ]
            sent = (
                ["the", entities[si], verb, "the", plot_values[si], "in", "the", place]
                + fillers
                + ["."]
            )
            sentences.append(sent)
            facts.append((entities[si], verb, plot_values[si], si))
        movies[mid] = Plot(mid, sentences)

        plot_value_set = set(plot_values)
        outside = [v for v in values if v not in plot_value_set]
        for qi, (ent, verb, value, si) in enumerate(facts):
            qrng = mrng.derive("q", qi)
            others = [v for v in plot_values if v != value]
            n_in = int(qrng.integers(0, min(4, len(others)) + 1))
            distractors = [
                str(d) for d in qrng.choice(others, size=n_in, replace=False)
            ] + [str(d) for d in qrng.choice(outside, size=4 - n_in, replace=False)]
            gold_pos = int(qrng.integers(5))
            cands = distractors[:gold_pos] + [value] + distractors[gold_pos:]
            by_split[split].append(
                QAInstance(
                    qid=f"{split}:{mid}-q{qi}",
                    movie_id=mid,
                    question=["what", "does", "the", ent, verb, "?"],
                    candidates=[[c] for c in cands],
                    correct_index=gold_pos,
                    evidence_sentences=[si],
                )
            )

    ds = Dataset(movies, by_split["train"], by_split["val"], by_split["test"])
    return ds, table
