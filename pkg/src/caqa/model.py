"""Hierarchical compare-aggregate network over plot sentences.

Pipeline per candidate answer: project embeddings to l dimensions, attend
question/answer words over each plot sentence, compare attended vectors
against the plot-side columns (SUBMULT), aggregate each sentence to a
vector (CNN bank or LSTM, max-pooled over time), then repeat attention/
comparison/aggregation once more across sentence representations and score
with two shared dense layers. Comparison and aggregation weights are shared
within the word level and within the sentence level, never across levels;
the prediction layers are shared across all candidates.

The comparison counterpart is the plot-side column (word level: the
sentence token column; sentence level: the sentence representation), with
the attended query mixture as the second argument — H is plot-aligned, so
this is the dimensionally consistent reading, and it is isolated in
:func:`_compare` should the opposite convention ever be wanted.
"""

import hashlib
import json
import struct
from dataclasses import dataclass

import numpy as np

from .autodiff import Graph
from .corpus import EmbeddingTable, encode_tokens
from .errors import CheckpointError, ConfigError
from .optim import ParamTensor, Rng, xavier_fill

AGGREGATORS = ("cnn", "rnn_lstm")

CHECKPOINT_MAGIC = b"CAQACKPT"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    aggregator: str = "cnn"
    hidden: int = 150
    conv_channels_per_width: int = 150
    conv_widths: tuple = (1, 3, 5)
    dense_size: int = 150
    embedding_dim: int = 300
    dropout: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.aggregator not in AGGREGATORS:
            raise ConfigError(f"unknown aggregator {self.aggregator!r}")
        if self.hidden <= 0:
            raise ConfigError("hidden size must be positive")
        if any(w % 2 == 0 or w < 1 for w in self.conv_widths):
            raise ConfigError(f"conv widths must be odd, got {self.conv_widths}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")

    @property
    def rep_size(self) -> int:
        """Output width of either aggregator (3·channels for CNN, hidden for LSTM)."""
        if self.aggregator == "cnn":
            return len(self.conv_widths) * self.conv_channels_per_width
        return self.hidden

    def to_dict(self) -> dict:
        return {
            "aggregator": self.aggregator,
            "hidden": self.hidden,
            "conv_channels_per_width": self.conv_channels_per_width,
            "conv_widths": list(self.conv_widths),
            "dense_size": self.dense_size,
            "embedding_dim": self.embedding_dim,
            "dropout": self.dropout,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["conv_widths"] = tuple(d.get("conv_widths", (1, 3, 5)))
        return cls(**d)


class ModelParams:
    """Named parameter tensors plus the config that shaped them."""

    def __init__(self, config: ModelConfig, tensors: dict, dtype, embedding_fingerprint: str):
        self.config = config
        self.tensors = tensors
        self.dtype = np.dtype(dtype)
        self.embedding_fingerprint = embedding_fingerprint

    def __getitem__(self, name: str) -> ParamTensor:
        return self.tensors[name]

    def all(self) -> list:
        return list(self.tensors.values())

    def zero_grad(self):
        for p in self.tensors.values():
            p.zero_grad()


def _aggregator_tensors(prefix, in_features, config, rng, dtype):
    out = {}
    if config.aggregator == "cnn":
        c = config.conv_channels_per_width
        for w in config.conv_widths:
            out[f"{prefix}.conv{w}.w"] = ParamTensor(
                f"{prefix}.conv{w}.w",
                xavier_fill((c, w * in_features), rng.derive(f"{prefix}.conv{w}.w"), dtype=dtype),
            )
            out[f"{prefix}.conv{w}.b"] = ParamTensor(
                f"{prefix}.conv{w}.b", np.zeros((c, 1), dtype=dtype), decay=False
            )
    else:
        h = config.hidden
        # fans are per gate, not per stacked 4h matrix
        out[f"{prefix}.lstm.wx"] = ParamTensor(
            f"{prefix}.lstm.wx",
            xavier_fill((4 * h, in_features), rng.derive(f"{prefix}.lstm.wx"),
                        fan_in=in_features, fan_out=h, dtype=dtype),
        )
        out[f"{prefix}.lstm.wh"] = ParamTensor(
            f"{prefix}.lstm.wh",
            xavier_fill((4 * h, h), rng.derive(f"{prefix}.lstm.wh"),
                        fan_in=h, fan_out=h, dtype=dtype),
        )
        bias = np.zeros((4 * h, 1), dtype=dtype)
        bias[h : 2 * h] = 1.0  # open forget gates at the start of training
        out[f"{prefix}.lstm.b"] = ParamTensor(f"{prefix}.lstm.b", bias, decay=False)
    return out


def embedding_fingerprint(table: EmbeddingTable) -> str:
    """Stable digest of (dim, oov_seed, sorted known vectors)."""
    h = hashlib.blake2b(digest_size=16)
    h.update(struct.pack("<qq", table.dim, table.oov_seed))
    for token in table.vocabulary():
        h.update(token.encode("utf-8"))
        h.update(b"\0")
        h.update(np.ascontiguousarray(table.known[token], dtype=np.float64).tobytes())
    return h.hexdigest()


def init_model(config: ModelConfig, table: EmbeddingTable, dtype=np.float64) -> ModelParams:
    if table.dim != config.embedding_dim:
        raise ConfigError(
            f"embedding table dim {table.dim} != config embedding_dim {config.embedding_dim}"
        )
    rng = Rng(config.seed)
    l = config.hidden
    d = config.embedding_dim
    rep = config.rep_size
    t = {}

    def w(name, shape):
        t[name] = ParamTensor(name, xavier_fill(shape, rng.derive(name), dtype=dtype))

    def b(name, rows):
        t[name] = ParamTensor(name, np.zeros((rows, 1), dtype=dtype), decay=False)

    w("proj.wi", (l, d)); b("proj.bi", l)
    w("proj.wu", (l, d)); b("proj.bu", l)
    w("compare_word.w", (l, 2 * l)); b("compare_word.b", l)
    t.update(_aggregator_tensors("agg_word", 2 * l, config, rng, dtype))
    w("compare_sentence.w", (rep, 2 * rep)); b("compare_sentence.b", rep)
    t.update(_aggregator_tensors("agg_sentence", 2 * rep, config, rng, dtype))
    w("predict.w1", (config.dense_size, rep)); b("predict.b1", config.dense_size)
    w("predict.w2", (1, config.dense_size)); b("predict.b2", 1)
    return ModelParams(config, t, dtype, embedding_fingerprint(table))


# -- forward construction ----------------------------------------------------


@dataclass
class ForwardTrace:
    """Every intermediate a caller may inspect, as plain arrays."""

    g_q: list  # per sentence: (|Q|, m_i) question attention
    t_w_q: list  # per sentence: (l, m_i)
    g_a: list  # [candidate][sentence]: (|A_j|, m_i)
    t_w_a: list  # [candidate][sentence]: (l, m_i)
    r_p: list  # per candidate: (rep, n)
    r_q: np.ndarray  # (rep, 1)
    r_a: list  # per candidate: (rep, 1)
    t_s_q: list  # per candidate: (rep, n)
    t_s_a: list  # per candidate: (rep, n)
    confidences: np.ndarray  # (k,)
    probabilities: np.ndarray  # (k,)
    selected: int
    condition_index: int
    relevance: list  # per sentence, conditioned on condition_index

    def word_importance(self, sentence: int) -> np.ndarray:
        """Per-position importance within one sentence, conditioned the same
        way as the sentence relevance scores."""
        j = self.condition_index
        return ((self.t_w_q[sentence] + self.t_w_a[j][sentence]) / 2.0).mean(axis=0)


class _Built:
    """Node handles from one forward construction (pre-trace)."""

    __slots__ = (
        "q_proj", "a_projs", "g_q", "t_w_q", "g_a", "t_w_a", "r_p", "r_q", "r_a",
        "t_s_q", "t_s_a", "confs", "probs",
    )


def _project(g, p, xbar_node, use):
    gate = g.add_bias(g.gemm(use(p["proj.wi"]), xbar_node), use(p["proj.bi"]))
    cand = g.add_bias(g.gemm(use(p["proj.wu"]), xbar_node), use(p["proj.bu"]))
    return g.mul(g.sigmoid(gate), g.tanh(cand))


def _attend(g, x, plot):
    scores = g.gemm(g.transpose(x), plot)
    att = g.softmax_over_rows(scores)
    return att, g.gemm(x, att)


def _compare(g, plot_side, h, w_node, b_node):
    diff = g.sub(plot_side, h)
    return g.dense(
        g.concat_rows([g.mul(diff, diff), g.mul(plot_side, h)]),
        w_node,
        b_node,
        activation="relu",
    )


def _aggregate(g, p, prefix, seq, config, use):
    if config.aggregator == "cnn":
        widths = config.conv_widths
        ws = [use(p[f"{prefix}.conv{w}.w"]) for w in widths]
        bs = [use(p[f"{prefix}.conv{w}.b"]) for w in widths]
        return g.max_pool_time(g.conv1d_bank(seq, ws, bs, widths))
    hs = g.lstm(
        seq, use(p[f"{prefix}.lstm.wx"]), use(p[f"{prefix}.lstm.wh"]), use(p[f"{prefix}.lstm.b"])
    )
    return g.max_pool_time(hs)


def _self_rep(g, p, x, config, use):
    return _aggregate(g, p, "agg_word", g.concat_rows([x, x]), config, use)


def _word_level_sentence(g, p, q_proj, a_projs, p_proj, config, use):
    """One plot sentence against the question and every candidate."""
    wc, bc = use(p["compare_word.w"]), use(p["compare_word.b"])
    g_q, h_q = _attend(g, q_proj, p_proj)
    t_q = _compare(g, p_proj, h_q, wc, bc)
    g_as, t_as, r_ps = [], [], []
    for a_proj in a_projs:
        g_a, h_a = _attend(g, a_proj, p_proj)
        t_a = _compare(g, p_proj, h_a, wc, bc)
        r_p = _aggregate(g, p, "agg_word", g.concat_rows([t_q, t_a]), config, use)
        g_as.append(g_a)
        t_as.append(t_a)
        r_ps.append(r_p)
    return g_q, t_q, g_as, t_as, r_ps


def build_forward(g: Graph, params: ModelParams, q_emb, p_embs, a_embs,
                  trainable=False, dropout_rng=None) -> _Built:
    """Assemble the whole network on ``g``; returns node handles.

    ``q_emb``/``p_embs``/``a_embs`` are raw embedding matrices (dim × len).
    With ``trainable`` the parameters enter as gradient leaves, otherwise as
    constants (inference builds no backward closures).
    """
    p = params
    config = p.config
    use = (lambda t: g.param(t)) if trainable else (lambda t: g.constant(t.value))

    def proj(xbar):
        node = _project(g, p, g.constant(xbar), use)
        if dropout_rng is not None and config.dropout > 0.0:
            keep = 1.0 - config.dropout
            mask = (dropout_rng.uniform(0.0, 1.0, size=node.shape) < keep) / keep
            node = g.mul(node, g.constant(mask))
        return node

    q_proj = proj(q_emb)
    a_projs = [proj(a) for a in a_embs]
    p_projs = [proj(pe) for pe in p_embs]

    out = _Built()
    out.q_proj = q_proj
    out.a_projs = a_projs
    out.g_q, out.t_w_q = [], []
    k = len(a_embs)
    out.g_a = [[] for _ in range(k)]
    out.t_w_a = [[] for _ in range(k)]
    per_sentence_r = [[] for _ in range(k)]
    for p_proj in p_projs:
        g_q, t_q, g_as, t_as, r_ps = _word_level_sentence(
            g, p, q_proj, a_projs, p_proj, config, use
        )
        out.g_q.append(g_q)
        out.t_w_q.append(t_q)
        for j in range(k):
            out.g_a[j].append(g_as[j])
            out.t_w_a[j].append(t_as[j])
            per_sentence_r[j].append(r_ps[j])

    out.r_q = _self_rep(g, p, q_proj, config, use)
    out.r_a = [_self_rep(g, p, a_proj, config, use) for a_proj in a_projs]

    ws, bs = use(p["compare_sentence.w"]), use(p["compare_sentence.b"])
    out.r_p, out.t_s_q, out.t_s_a, confs = [], [], [], []
    for j in range(k):
        r_pj = g.concat_cols(per_sentence_r[j])
        out.r_p.append(r_pj)
        _, h_q = _attend(g, out.r_q, r_pj)
        t_s_q = _compare(g, r_pj, h_q, ws, bs)
        _, h_a = _attend(g, out.r_a[j], r_pj)
        t_s_a = _compare(g, r_pj, h_a, ws, bs)
        out.t_s_q.append(t_s_q)
        out.t_s_a.append(t_s_a)
        r_s = _aggregate(
            g, p, "agg_sentence", g.concat_rows([t_s_q, t_s_a]), config, use
        )
        hidden = g.dense(r_s, use(p["predict.w1"]), use(p["predict.b1"]), activation="tanh")
        confs.append(g.dense(hidden, use(p["predict.w2"]), use(p["predict.b2"])))
    out.confs = g.concat_rows(confs)
    out.probs = g.softmax_over_rows(out.confs)
    return out


def _relevance_from(t_s_q_val, t_s_a_val):
    return list(((t_s_q_val + t_s_a_val) / 2.0).mean(axis=0))


def trace_from_built(built: _Built, condition) -> ForwardTrace:
    """Snapshot node values into a ForwardTrace.

    ``condition`` selects the answer the relevance scores are computed
    against: "selected" (the model's argmax), "gold" requires the caller to
    pass the index directly, so it accepts an int too.
    """
    probs = built.probs.value[:, 0]
    selected = int(np.argmax(probs))  # argmax takes the lowest index on ties
    if condition == "selected":
        cond = selected
    elif isinstance(condition, (int, np.integer)):
        cond = int(condition)
    else:
        raise ConfigError(f"bad condition {condition!r}: use 'selected' or an index")
    if not 0 <= cond < probs.shape[0]:
        raise ConfigError(f"condition index {cond} out of range")
    return ForwardTrace(
        g_q=[n.value for n in built.g_q],
        t_w_q=[n.value for n in built.t_w_q],
        g_a=[[n.value for n in row] for row in built.g_a],
        t_w_a=[[n.value for n in row] for row in built.t_w_a],
        r_p=[n.value for n in built.r_p],
        r_q=built.r_q.value,
        r_a=[n.value for n in built.r_a],
        t_s_q=[n.value for n in built.t_s_q],
        t_s_a=[n.value for n in built.t_s_a],
        confidences=built.confs.value[:, 0].copy(),
        probabilities=probs.copy(),
        selected=selected,
        condition_index=cond,
        relevance=_relevance_from(built.t_s_q[cond].value, built.t_s_a[cond].value),
    )


def forward(inst, plot, table: EmbeddingTable, params: ModelParams,
            condition="selected") -> ForwardTrace:
    """Run the network on one instance and return its full trace.

    ``condition`` may be "selected", "gold" (uses ``inst.correct_index``),
    or an explicit candidate index.
    """
    if condition == "gold":
        if inst.correct_index is None:
            raise ConfigError(f"instance {inst.qid}: gold conditioning without label")
        condition = inst.correct_index
    g = Graph(dtype=params.dtype)
    q = encode_tokens(inst.question, table)
    ps = [encode_tokens(s, table) for s in plot.sentences]
    cs = [encode_tokens(c, table) for c in inst.candidates]
    built = build_forward(g, params, q, ps, cs, trainable=False)
    return trace_from_built(built, condition)


# -- incremental scoring for distractor search -------------------------------


class Scorer:
    """Re-scores one instance under appended distractor sentences.

    Word-level work for the original plot (and the question/candidate
    self-representations) is computed once; appending a sentence leaves
    those untouched, so each probe only pays for the new sentence's word
    level plus the sentence level and prediction. Numerically identical to
    the full forward pass — the same operations run on the same values.
    """

    def __init__(self, inst, plot, table: EmbeddingTable, params: ModelParams):
        self.inst = inst
        self.table = table
        self.params = params
        g = Graph(dtype=params.dtype)
        q = encode_tokens(inst.question, table)
        a_embs = [encode_tokens(c, table) for c in inst.candidates]
        ps = [encode_tokens(s, table) for s in plot.sentences]
        built = build_forward(g, params, q, ps, a_embs, trainable=False)
        self._q_proj_val = built.q_proj.value
        self._a_proj_vals = [n.value for n in built.a_projs]
        self._base_r_p = [n.value for n in built.r_p]  # (rep, n) per candidate
        self._r_q_val = built.r_q.value
        self._r_a_vals = [n.value for n in built.r_a]
        self.base_probs = built.probs.value[:, 0].copy()

    def probabilities(self, extra_sentence=None) -> np.ndarray:
        """Candidate probabilities with ``extra_sentence`` (token list)
        appended to the plot; None scores the unmodified plot."""
        if extra_sentence is None:
            return self.base_probs.copy()
        p = self.params
        config = p.config
        g = Graph(dtype=p.dtype)
        use = lambda t: g.constant(t.value)
        s_emb = encode_tokens(extra_sentence, self.table)
        s_proj = _project(g, p, g.constant(s_emb), use)
        q_proj = g.constant(self._q_proj_val)
        a_projs = [g.constant(v) for v in self._a_proj_vals]
        _, _, _, _, r_new = _word_level_sentence(
            g, p, q_proj, a_projs, s_proj, config, use
        )

        ws, bs = use(p["compare_sentence.w"]), use(p["compare_sentence.b"])
        r_q = g.constant(self._r_q_val)
        confs = []
        for j in range(len(self._a_proj_vals)):
            r_pj = g.concat_cols([g.constant(self._base_r_p[j]), r_new[j]])
            _, h_q = _attend(g, r_q, r_pj)
            t_s_q = _compare(g, r_pj, h_q, ws, bs)
            r_a = g.constant(self._r_a_vals[j])
            _, h_a = _attend(g, r_a, r_pj)
            t_s_a = _compare(g, r_pj, h_a, ws, bs)
            r_s = _aggregate(
                g, p, "agg_sentence", g.concat_rows([t_s_q, t_s_a]), config, use
            )
            hidden = g.dense(r_s, use(p["predict.w1"]), use(p["predict.b1"]), activation="tanh")
            confs.append(g.dense(hidden, use(p["predict.w2"]), use(p["predict.b2"])))
        probs = g.softmax_over_rows(g.concat_rows(confs))
        return probs.value[:, 0].copy()


# -- checkpointing ------------------------------------------------------------


def save_checkpoint(params: ModelParams, path):
    names = sorted(params.tensors)
    header = {
        "format_version": CHECKPOINT_VERSION,
        "config": params.config.to_dict(),
        "dtype": "f64" if params.dtype == np.float64 else "f32",
        "embedding_fingerprint": params.embedding_fingerprint,
        "tensors": [
            {
                "name": n,
                "shape": list(params.tensors[n].value.shape),
                "decay": params.tensors[n].decay,
            }
            for n in names
        ],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        for n in names:
            arr = params.tensors[n].value
            le = np.dtype(arr.dtype).newbyteorder("<")
            fh.write(np.ascontiguousarray(arr).astype(le, copy=False).tobytes())


def load_checkpoint(path) -> ModelParams:
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: bad magic bytes")
        head = fh.read(8)
        if len(head) != 8:
            raise CheckpointError(f"{path}: truncated header")
        version, hlen = struct.unpack("<II", head)
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: version {version}, expected {CHECKPOINT_VERSION}")
        blob = fh.read(hlen)
        if len(blob) != hlen:
            raise CheckpointError(f"{path}: truncated header JSON")
        header = json.loads(blob.decode("utf-8"))
        dtype = np.float64 if header["dtype"] == "f64" else np.float32
        config = ModelConfig.from_dict(header["config"])
        tensors = {}
        for spec in header["tensors"]:
            shape = tuple(spec["shape"])
            nbytes = int(np.prod(shape)) * np.dtype(dtype).itemsize
            raw = fh.read(nbytes)
            if len(raw) != nbytes:
                raise CheckpointError(f"{path}: truncated tensor {spec['name']!r}")
            arr = np.frombuffer(raw, dtype=np.dtype(dtype).newbyteorder("<")).astype(dtype)
            tensors[spec["name"]] = ParamTensor(
                spec["name"], arr.reshape(shape), decay=spec["decay"]
            )
        if fh.read(1):
            raise CheckpointError(f"{path}: trailing bytes after tensors")
    return ModelParams(config, tensors, dtype, header["embedding_fingerprint"])
