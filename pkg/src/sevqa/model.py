"""Codepoint tokenizer and a small decoder-only autoregressive transformer.

The model implements P(answer | question) as next-token prediction over a
single sequence ``<bos> question <sep> answer <eos>`` with the loss masked
to the positions that predict answer tokens (and <eos>). Causal
self-attention guarantees position t sees only ids at positions <= t.

Architecture: learned token + position embeddings, pre-LN blocks
(attention with Q/K/V/O projections, GELU MLP at mlp_ratio), final LN,
linear head. All weights init N(0, 0.02^2), biases 0, LN gains 1, so a
fresh model scores close to ln(vocab) on any data.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .arabic import normalize

log = logging.getLogger(__name__)

PAD, BOS, SEP, EOS, UNK = 0, 1, 2, 3, 4
_RESERVED = 5


class EmptyCorpus(ValueError):
    pass


class ContextOverflow(ValueError):
    pass


class Vocab:
    """Codepoint vocabulary; ids 0..4 are <pad>, <bos>, <sep>, <eos>, <unk>."""

    def __init__(self, chars):
        self.chars = tuple(chars)
        self._index = {ch: _RESERVED + i for i, ch in enumerate(self.chars)}

    @property
    def size(self) -> int:
        return _RESERVED + len(self.chars)

    def encode(self, text: str) -> np.ndarray:
        return np.array([self._index.get(ch, UNK) for ch in text], dtype=np.int64)

    def decode(self, ids, skip_special: bool = True) -> str:
        out = []
        for i in ids:
            i = int(i)
            if i < _RESERVED:
                if not skip_special:
                    out.append(f"<{i}>")
                continue
            out.append(self.chars[i - _RESERVED])
        return "".join(out)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.chars == other.chars


def build_vocab(records) -> Vocab:
    """Vocabulary over every codepoint of the normalized questions/answers."""
    records = list(records)
    if not records:
        raise EmptyCorpus("cannot build a vocabulary from an empty corpus")
    chars = set()
    for rec in records:
        chars.update(normalize(rec.question))
        chars.update(normalize(rec.answer))
    return Vocab(sorted(chars))


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    embed_dim: int = 64
    n_layers: int = 2
    n_heads: int = 2
    context_len: int = 128
    mlp_ratio: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.embed_dim % self.n_heads != 0:
            raise ValueError("embed_dim must be divisible by n_heads")
        if self.context_len < 8:
            raise ValueError("context_len must be >= 8")

    def as_dict(self) -> dict:
        return {
            "vocab_size": self.vocab_size,
            "embed_dim": self.embed_dim,
            "n_layers": self.n_layers,
            "n_heads": self.n_heads,
            "context_len": self.context_len,
            "mlp_ratio": self.mlp_ratio,
            "seed": self.seed,
        }


@dataclass
class LayerParams:
    ln1_gain: ad.Tensor
    ln1_bias: ad.Tensor
    wq: ad.Tensor
    wk: ad.Tensor
    wv: ad.Tensor
    wo: ad.Tensor
    ln2_gain: ad.Tensor
    ln2_bias: ad.Tensor
    w_in: ad.Tensor
    b_in: ad.Tensor
    w_out: ad.Tensor
    b_out: ad.Tensor


_LAYER_FIELDS = (
    "ln1_gain", "ln1_bias", "wq", "wk", "wv", "wo",
    "ln2_gain", "ln2_bias", "w_in", "b_in", "w_out", "b_out",
)


class Model:
    """Plain parameter container; weight layout is x @ W throughout."""

    def __init__(self, config: ModelConfig, tok_emb, pos_emb, layers, lnf_gain, lnf_bias, head):
        self.config = config
        self.tok_emb = tok_emb
        self.pos_emb = pos_emb
        self.layers = layers
        self.lnf_gain = lnf_gain
        self.lnf_bias = lnf_bias
        self.head = head

    def param_items(self) -> list[tuple[str, ad.Tensor]]:
        """Parameters in the canonical (checkpoint) order."""
        items = [("tok_emb", self.tok_emb), ("pos_emb", self.pos_emb)]
        for i, layer in enumerate(self.layers):
            for f in _LAYER_FIELDS:
                items.append((f"layer{i}.{f}", getattr(layer, f)))
        items.extend(
            [("lnf_gain", self.lnf_gain), ("lnf_bias", self.lnf_bias), ("head", self.head)]
        )
        return items

    def parameters(self) -> list[ad.Tensor]:
        return [t for _, t in self.param_items()]

    def project(self, layer: int, which: str, x: ad.Tensor) -> ad.Tensor:
        return ad.matmul(x, getattr(self.layers[layer], f"w{which}"))

    def copy(self) -> "Model":
        clone = init_model(self.config)
        for (_, src), (_, dst) in zip(self.param_items(), clone.param_items()):
            dst.data = src.data.copy()
        return clone

    def param_bytes(self) -> bytes:
        return b"".join(t.data.astype("<f8").tobytes() for t in self.parameters())


def init_model(config: ModelConfig) -> Model:
    """Seeded init: weights N(0, 0.02^2), biases 0, LN gains 1."""
    rng = np.random.default_rng(config.seed)
    d, v = config.embed_dim, config.vocab_size
    hidden = config.mlp_ratio * d

    def w(shape, name):
        return ad.Tensor(rng.normal(0.0, 0.02, shape), requires_grad=True, name=name)

    def ones(shape, name):
        return ad.Tensor(np.ones(shape), requires_grad=True, name=name)

    def zeros(shape, name):
        return ad.Tensor(np.zeros(shape), requires_grad=True, name=name)

    layers = []
    tok = w((v, d), "tok_emb")
    pos = w((config.context_len, d), "pos_emb")
    for i in range(config.n_layers):
        layers.append(
            LayerParams(
                ln1_gain=ones((d,), f"layer{i}.ln1_gain"),
                ln1_bias=zeros((d,), f"layer{i}.ln1_bias"),
                wq=w((d, d), f"layer{i}.wq"),
                wk=w((d, d), f"layer{i}.wk"),
                wv=w((d, d), f"layer{i}.wv"),
                wo=w((d, d), f"layer{i}.wo"),
                ln2_gain=ones((d,), f"layer{i}.ln2_gain"),
                ln2_bias=zeros((d,), f"layer{i}.ln2_bias"),
                w_in=w((d, hidden), f"layer{i}.w_in"),
                b_in=zeros((hidden,), f"layer{i}.b_in"),
                w_out=w((hidden, d), f"layer{i}.w_out"),
                b_out=zeros((d,), f"layer{i}.b_out"),
            )
        )
    return Model(
        config=config,
        tok_emb=tok,
        pos_emb=pos,
        layers=layers,
        lnf_gain=ones((d,), "lnf_gain"),
        lnf_bias=zeros((d,), "lnf_bias"),
        head=w((d, v), "head"),
    )


# --------------------------------------------------------------------------
# Sequence encoding
# --------------------------------------------------------------------------

@dataclass
class EncodedPair:
    """ids = <bos> q <sep> a <eos>; mask marks positions predicting a + <eos>."""

    ids: np.ndarray
    loss_mask: np.ndarray
    record_id: int = -1
    severity: object = None


def encode_pair(vocab: Vocab, question: str, answer: str, context_len: int,
                record_id: int = -1, severity=None) -> EncodedPair | None:
    """Build one training sequence; returns None (with a warning) if the
    answer cannot fit even with the question fully truncated away.

    Over-long questions are truncated from their left end (the tail nearest
    <sep> is kept); answers are never truncated.
    """
    q_ids = vocab.encode(normalize(question))
    a_ids = vocab.encode(normalize(answer))
    budget = context_len - 3 - len(a_ids)  # room left for question tokens
    if budget < 0:
        log.warning("record %s skipped: answer alone exceeds the context", record_id)
        return None
    if len(q_ids) > budget:
        q_ids = q_ids[len(q_ids) - budget :]
    ids = np.concatenate(
        [[BOS], q_ids, [SEP], a_ids, [EOS]]
    ).astype(np.int64)
    mask = np.zeros(len(ids), dtype=np.float64)
    sep_pos = 1 + len(q_ids)
    mask[sep_pos : sep_pos + len(a_ids) + 1] = 1.0
    return EncodedPair(ids=ids, loss_mask=mask, record_id=record_id, severity=severity)


def encode_text(vocab: Vocab, text: str, context_len: int) -> EncodedPair | None:
    """Unconditional-LM sequence <bos> text <eos> with every position active."""
    t_ids = vocab.encode(normalize(text))
    if len(t_ids) == 0:
        return None
    t_ids = t_ids[: context_len - 2]
    ids = np.concatenate([[BOS], t_ids, [EOS]]).astype(np.int64)
    mask = np.ones(len(ids), dtype=np.float64)
    mask[-1] = 0.0
    return EncodedPair(ids=ids, loss_mask=mask)


def encode_records(vocab: Vocab, records, context_len: int) -> list[EncodedPair]:
    pairs = []
    for rec in records:
        pair = encode_pair(vocab, rec.question, rec.answer, context_len,
                           record_id=rec.id, severity=rec.severity)
        if pair is not None:
            pairs.append(pair)
    return pairs


# --------------------------------------------------------------------------
# Forward / loss / generation
# --------------------------------------------------------------------------

def _causal_mask(t: int) -> ad.Tensor:
    return ad.Tensor(np.triu(np.full((t, t), -np.inf), k=1))


def forward_single(model, ids: np.ndarray) -> ad.Tensor:
    """Logits (T, V) for one id sequence; works for base and adapted models."""
    cfg = model.config
    t = len(ids)
    if t > cfg.context_len:
        raise ContextOverflow(f"sequence length {t} exceeds context {cfg.context_len}")
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and ids.max() >= cfg.vocab_size:
        raise ad.ShapeMismatch("token id outside vocabulary")
    nh = cfg.n_heads
    dh = cfg.embed_dim // nh

    x = ad.add(
        ad.embedding_gather(model.tok_emb, ids),
        ad.embedding_gather(model.pos_emb, np.arange(t)),
    )
    mask = _causal_mask(t)
    for i, layer in enumerate(model.layers):
        h = ad.layer_norm_rows(x, layer.ln1_gain, layer.ln1_bias)
        q = ad.transpose(ad.reshape(model.project(i, "q", h), (t, nh, dh)), (1, 0, 2))
        k = ad.transpose(ad.reshape(model.project(i, "k", h), (t, nh, dh)), (1, 0, 2))
        v = ad.transpose(ad.reshape(model.project(i, "v", h), (t, nh, dh)), (1, 0, 2))
        scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 2, 1))), 1.0 / math.sqrt(dh))
        attn = ad.softmax_rows(ad.add(scores, mask))
        ctx = ad.reshape(ad.transpose(ad.matmul(attn, v), (1, 0, 2)), (t, cfg.embed_dim))
        x = ad.add(x, model.project(i, "o", ctx))
        h2 = ad.layer_norm_rows(x, layer.ln2_gain, layer.ln2_bias)
        m1 = ad.gelu(ad.add(ad.matmul(h2, layer.w_in), layer.b_in))
        x = ad.add(x, ad.add(ad.matmul(m1, layer.w_out), layer.b_out))
    x = ad.layer_norm_rows(x, model.lnf_gain, model.lnf_bias)
    return ad.matmul(x, model.head)


def forward(model, pairs: list[EncodedPair]) -> np.ndarray:
    """Detached logits for a batch, padded with zeros to the longest sequence."""
    if not pairs:
        raise ValueError("empty batch")
    t_max = max(len(p.ids) for p in pairs)
    out = np.zeros((len(pairs), t_max, model.config.vocab_size))
    for b, pair in enumerate(pairs):
        out[b, : len(pair.ids)] = forward_single(model, pair.ids).data
    return out


def sequence_nll(logits: ad.Tensor, ids: np.ndarray, mask: np.ndarray) -> tuple[ad.Tensor, float]:
    """Masked CE for one sequence with shifted targets (t predicts t+1).

    Returns (mean-over-mask loss tensor, active position count). The final
    position carries mask 0, so its placeholder target is inert.
    """
    targets = np.concatenate([ids[1:], [0]]).astype(np.int64)
    ce = ad.cross_entropy_masked(logits, targets, mask)
    return ce, float(mask.sum())


def loss(model, pairs: list[EncodedPair]) -> ad.Tensor:
    """Mean masked NLL over all active positions across the batch."""
    if not pairs:
        raise ValueError("empty batch")
    total = None
    count = 0.0
    for pair in pairs:
        logits = forward_single(model, pair.ids)
        ce, c = sequence_nll(logits, pair.ids, pair.loss_mask)
        term = ad.scale(ce, c)
        total = term if total is None else ad.add(total, term)
        count += c
    return ad.scale(total, 1.0 / count)


def generate(
    model,
    question: str,
    vocab: Vocab,
    max_new_tokens: int = 64,
    mode: str = "greedy",
    top_k: int = 5,
    temperature: float = 1.0,
    seed: int = 0,
) -> str:
    """Decode an answer for `question`; greedy mode is fully deterministic."""
    if max_new_tokens < 1:
        raise ValueError("max_new_tokens must be >= 1")
    cfg = model.config
    q_ids = vocab.encode(normalize(question))
    if len(q_ids) > cfg.context_len - 2:
        raise ContextOverflow(
            f"question length {len(q_ids)} exceeds context {cfg.context_len} - 2"
        )
    seq = list(np.concatenate([[BOS], q_ids, [SEP]]).astype(np.int64))
    prompt_len = len(seq)
    rng = np.random.default_rng(seed) if mode == "top_k" else None
    for _ in range(max_new_tokens):
        if len(seq) >= cfg.context_len:
            break
        logits = forward_single(model, np.array(seq, dtype=np.int64)).data[-1]
        if mode == "greedy":
            nxt = int(np.argmax(logits))
        elif mode == "top_k":
            k = min(top_k, len(logits))
            order = np.lexsort((np.arange(len(logits)), -logits))[:k]
            z = logits[order] / max(temperature, 1e-8)
            z -= z.max()
            p = np.exp(z)
            p /= p.sum()
            nxt = int(order[rng.choice(k, p=p)])
        else:
            raise ValueError(f"unknown decode mode {mode!r}")
        if nxt == EOS:
            break
        seq.append(nxt)
    return vocab.decode(seq[prompt_len:])
