"""Token embeddings: pretrained word vectors stacked with contextual character-LM states.

A sentence is rendered as one character stream, ``<s> w1 ␣ w2 ␣ … wN </s>``.
The forward LM state read just after a token's last character and the backward
LM state read just before its first character (over the reversed stream) form
its contextual part; the word vector is appended after it.
"""
from __future__ import annotations

import hashlib
import io
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import container
from .lstm import LstmCell
from .numerics import (
    Parameter,
    Tensor,
    add,
    backward,
    concat,
    cross_entropy,
    dropout,
    glorot_uniform,
    linear,
    log_softmax,
    make_rng,
    scale,
    sgd_step,
    stack,
    take,
)

log = logging.getLogger(__name__)

UNK, BOS, EOS = "<unk>", "<s>", "</s>"
SPECIALS = (UNK, BOS, EOS)


class WordVectorError(ValueError):
    pass


# ---------------------------------------------------------------------------
# word vectors


@dataclass
class WordEmbeddingTable:
    vocab: dict[str, int]
    vectors: np.ndarray
    oov_policy: str = "lowercase_then_zero"
    source_digest: str | None = None

    def __post_init__(self):
        if self.oov_policy not in ("zero", "lowercase_then_zero"):
            raise ValueError(f"unknown oov_policy {self.oov_policy!r}")

    @property
    def d_word(self) -> int:
        return self.vectors.shape[1]

    def lookup(self, word: str) -> np.ndarray:
        row = self.vocab.get(word)
        if row is None and self.oov_policy == "lowercase_then_zero":
            row = self.vocab.get(word.lower())
        if row is None:
            return np.zeros(self.d_word)
        return self.vectors[row]


def load_word_vectors(stream, oov_policy: str = "lowercase_then_zero") -> WordEmbeddingTable:
    """Read the ``word v1 … vd`` text format."""
    if isinstance(stream, str):
        stream = io.StringIO(stream)
    digest = hashlib.sha256()
    vocab: dict[str, int] = {}
    rows: list[list[float]] = []
    dim = None
    for line_no, line in enumerate(stream, start=1):
        digest.update(line.encode("utf-8"))
        fields = line.rstrip("\r\n").split(" ")
        fields = [f for f in fields if f]
        if not fields:
            continue
        word, values = fields[0], fields[1:]
        if dim is None:
            if not values:
                raise WordVectorError(f"line {line_no}: no vector values")
            dim = len(values)
        if len(values) != dim:
            raise WordVectorError(f"line {line_no}: expected {dim} values, found {len(values)}")
        try:
            vec = [float(v) for v in values]
        except ValueError as exc:
            raise WordVectorError(f"line {line_no}: {exc}") from None
        if word in vocab:
            log.warning("line %d: duplicate word %r ignored", line_no, word)
            continue
        vocab[word] = len(rows)
        rows.append(vec)
    if not rows:
        raise WordVectorError("word-vector file is empty")
    return WordEmbeddingTable(vocab, np.array(rows, dtype=np.float64), oov_policy, digest.hexdigest())


# ---------------------------------------------------------------------------
# character language model


class CharLM:
    """Single-layer LSTM predicting the next character."""

    def __init__(self, chars: Iterable[str], d_char: int, d_lm: int, direction: str = "forward",
                 rng: np.random.Generator | None = None):
        if direction not in ("forward", "backward"):
            raise ValueError(f"direction must be forward or backward, got {direction!r}")
        self.direction = direction
        self.itos = list(SPECIALS) + sorted(set(chars) - set(SPECIALS))
        self.stoi = {s: i for i, s in enumerate(self.itos)}
        self.d_char = d_char
        self.d_lm = d_lm
        n = len(self.itos)
        prefix = f"{direction}_lm"
        init = (lambda shape: glorot_uniform(shape, rng)) if rng is not None else np.zeros
        self.char_embed = Parameter(init((n, d_char)), f"{prefix}.char_embed")
        self.cell = LstmCell(d_char, d_lm, name=f"{prefix}.cell", rng=rng)
        self.out_W = Parameter(init((n, d_lm)), f"{prefix}.out_W")
        self.out_b = Parameter(np.zeros(n), f"{prefix}.out_b")

    @property
    def vocab_size(self) -> int:
        return len(self.itos)

    def parameters(self) -> list[Parameter]:
        return [self.char_embed, *self.cell.parameters(), self.out_W, self.out_b]

    def set_trainable(self, flag: bool) -> None:
        for p in self.parameters():
            p.requires_grad = flag

    def encode(self, symbols: str | Sequence[str]) -> np.ndarray:
        unk = self.stoi[UNK]
        return np.array([self.stoi.get(s, unk) for s in symbols], dtype=np.int64)

    def run(self, ids: np.ndarray, state=None) -> tuple[list[Tensor], tuple[Tensor, Tensor]]:
        """Hidden state after each symbol. ``ids`` is ``(L,)`` or ``(batch, L)``."""
        batch = None if ids.ndim == 1 else ids.shape[0]
        h, c = state if state is not None else self.cell.zero_state(batch)
        hidden = []
        for t in range(ids.shape[-1]):
            x = take(self.char_embed, ids[..., t])
            h, c = self.cell.step(x, h, c)
            hidden.append(h)
        return hidden, (h, c)

    def logits(self, h: Tensor) -> Tensor:
        return linear(self.out_W, h, self.out_b)

    def arrays(self) -> dict[str, np.ndarray]:
        return {p.name: p.value for p in self.parameters()}

    def header(self) -> dict:
        return {"kind": "charlm", "direction": self.direction, "itos": self.itos,
                "d_char": self.d_char, "d_lm": self.d_lm}

    @classmethod
    def from_state(cls, header: dict, arrays: dict[str, np.ndarray]) -> "CharLM":
        lm = cls([], header["d_char"], header["d_lm"], header["direction"])
        lm.itos = list(header["itos"])
        lm.stoi = {s: i for i, s in enumerate(lm.itos)}
        n = len(lm.itos)
        lm.char_embed.value = np.zeros((n, lm.d_char))
        lm.out_W.value = np.zeros((n, lm.d_lm))
        lm.out_b.value = np.zeros(n)
        for p in lm.parameters():
            p.value = np.array(arrays[p.name], dtype=np.float64)
            p.grad = np.zeros_like(p.value)
        return lm


def lm_score(lm: CharLM, text: str | Sequence[str]) -> tuple[np.ndarray, np.ndarray]:
    """Per-position hidden states and next-symbol log-probabilities."""
    ids = lm.encode(text)
    if ids.size == 0:
        raise ValueError("lm_score needs a non-empty text")
    hidden, _ = lm.run(ids)
    H = np.stack([h.value for h in hidden])
    return H, log_softmax(lm.logits(H)).value


def perplexity(lm: CharLM, text: str | Sequence[str]) -> float:
    """Next-symbol perplexity over ``text`` (needs at least two symbols)."""
    ids = lm.encode(text)
    if ids.size < 2:
        raise ValueError("perplexity needs at least two symbols")
    _, logp = lm_score(lm, text)
    return math.exp(-float(np.mean(logp[np.arange(ids.size - 1), ids[1:]])))


def save_lm(lm: CharLM, path, metadata: dict | None = None) -> None:
    header = lm.header()
    header["metadata"] = metadata or {}
    container.save(path, header, lm.arrays(), sidecar=header)


def load_lm(path) -> CharLM:
    header, arrays = container.load(path)
    if header.get("kind") != "charlm":
        raise container.CheckpointError(f"{path} is not a character LM checkpoint")
    return CharLM.from_state(header, arrays)


# ---------------------------------------------------------------------------
# pretraining


@dataclass
class LMConfig:
    d_char: int = 16
    d_lm: int = 32
    lr: float = 1.0
    epochs: int = 10
    bptt_window: int = 32
    batch: int = 8
    grad_clip: float | None = 1.0
    seed: int = 1


def symbol_stream(raw_text: str) -> list[str]:
    """Each non-empty line becomes ``<s> chars… </s>``."""
    out: list[str] = []
    for line in raw_text.splitlines():
        if line.strip():
            out.append(BOS)
            out.extend(line)
            out.append(EOS)
    return out


def _train_lm(lm: CharLM, ids: np.ndarray, config: LMConfig) -> list[float]:
    batch = max(1, min(config.batch, (ids.size - 1) // config.bptt_window))
    length = (ids.size - 1) // batch
    inputs = np.stack([ids[b * length:(b + 1) * length] for b in range(batch)])
    targets = np.stack([ids[b * length + 1:(b + 1) * length + 1] for b in range(batch)])
    params = lm.parameters()
    history = []
    for epoch in range(config.epochs):
        state = None
        total_ce, total_n = 0.0, 0
        for start in range(0, length, config.bptt_window):
            x = inputs[:, start:start + config.bptt_window]
            y = targets[:, start:start + config.bptt_window]
            hidden, (h, c) = lm.run(x, state)
            steps = [cross_entropy(lm.logits(ht), y[:, t]) for t, ht in enumerate(hidden)]
            loss = steps[0]
            for s in steps[1:]:
                loss = add(loss, s)
            loss = scale(loss, 1.0 / len(steps))
            backward(loss)
            sgd_step(params, config.lr, config.grad_clip)
            state = (Tensor(h.value), Tensor(c.value))
            total_ce += float(loss.value) * x.size
            total_n += x.size
        history.append(math.exp(total_ce / total_n))
        log.info("%s LM epoch %d perplexity %.4f", lm.direction, epoch + 1, history[-1])
    return history


def pretrain_lm(raw_text: str, config: LMConfig = LMConfig()) -> tuple[CharLM, CharLM, dict]:
    """Train forward and backward character LMs by truncated BPTT.

    The backward model sees the reversed symbol stream. Returns both models
    and a history dict with per-epoch training perplexities.
    """
    symbols = symbol_stream(raw_text)
    if not symbols:
        raise ValueError("empty LM training corpus")
    if len(symbols) - 1 < config.bptt_window:
        raise ValueError(f"LM corpus has {len(symbols)} symbols, fewer than bptt_window + 1")
    chars = set(raw_text) - {"\n", "\r"} | {" "}
    rng = make_rng(config.seed)
    fwd = CharLM(chars, config.d_char, config.d_lm, "forward", rng)
    bwd = CharLM(chars, config.d_char, config.d_lm, "backward", rng)
    history = {
        "forward": _train_lm(fwd, fwd.encode(symbols), config),
        "backward": _train_lm(bwd, bwd.encode(symbols[::-1]), config),
        "config": asdict(config),
    }
    return fwd, bwd, history


# ---------------------------------------------------------------------------
# stacked embedding


def char_stream(words: Sequence[str]) -> tuple[list[str], list[int], list[int]]:
    """Symbol stream of a sentence plus each token's first/last character position."""
    symbols = [BOS]
    starts, ends = [], []
    for k, w in enumerate(words):
        if k:
            symbols.append(" ")
        starts.append(len(symbols))
        symbols.extend(w)
        ends.append(len(symbols) - 1)
    symbols.append(EOS)
    return symbols, starts, ends


@dataclass
class StackedEmbedding:
    word_table: WordEmbeddingTable
    fwd_lm: CharLM
    bwd_lm: CharLM
    dropout_p: float = 0.5
    dropout_scope: str = "full"  # or "contextual"
    fine_tune_lm: bool = False
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.fwd_lm.d_lm != self.bwd_lm.d_lm:
            raise ValueError("forward and backward LMs must share d_lm")
        if self.dropout_scope not in ("full", "contextual"):
            raise ValueError(f"unknown dropout_scope {self.dropout_scope!r}")
        self.set_fine_tune(self.fine_tune_lm)

    def set_fine_tune(self, flag: bool) -> None:
        self.fine_tune_lm = flag
        self.fwd_lm.set_trainable(flag)
        self.bwd_lm.set_trainable(flag)
        self._cache.clear()

    @property
    def d_lm(self) -> int:
        return self.fwd_lm.d_lm

    @property
    def total_dim(self) -> int:
        return self.word_table.d_word + 2 * self.d_lm

    def parameters(self) -> list[Parameter]:
        return self.fwd_lm.parameters() + self.bwd_lm.parameters() if self.fine_tune_lm else []


def _words(sentence) -> list[str]:
    return sentence.words if hasattr(sentence, "words") else list(sentence)


def extract_contextual(stack_: StackedEmbedding, sentence) -> list[Tensor]:
    """Per-token ``[forward state after token ; backward state before token]``."""
    symbols, starts, ends = char_stream(_words(sentence))
    fwd_hidden, _ = stack_.fwd_lm.run(stack_.fwd_lm.encode(symbols))
    bwd_hidden, _ = stack_.bwd_lm.run(stack_.bwd_lm.encode(symbols[::-1]))
    last = len(symbols) - 1
    return [concat([fwd_hidden[e + 1], bwd_hidden[last - (s - 1)]]) for s, e in zip(starts, ends)]


def embed_sentence(stack_: StackedEmbedding, sentence, training: bool = False,
                   rng: np.random.Generator | None = None) -> list[Tensor]:
    """Token vectors ``[contextual ; word]`` with dropout in training mode."""
    words = _words(sentence)
    key = tuple(words)
    base = None if stack_.fine_tune_lm else stack_._cache.get(key)
    if base is None:
        ctx = extract_contextual(stack_, words)
        base = [(c, stack_.word_table.lookup(w)) for c, w in zip(ctx, words)]
        if not stack_.fine_tune_lm:
            if len(stack_._cache) > 50_000:
                stack_._cache.clear()
            stack_._cache[key] = base
    p = stack_.dropout_p
    if stack_.dropout_scope == "contextual":
        return [concat([dropout(c, p, rng, training), w]) for c, w in base]
    return [dropout(concat([c, w]), p, rng, training) for c, w in base]


def embedding_matrix(stack_: StackedEmbedding, sentence) -> np.ndarray:
    """Eval-mode embeddings as an ``(N, total_dim)`` array."""
    return stack(embed_sentence(stack_, sentence, training=False)).value
