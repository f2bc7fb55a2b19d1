"""BiLSTM-CRF sequence tagger over stacked embeddings, with SGD training and LR annealing."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import container
from .corpus import Corpus, Sentence, TagScheme, window_long_sentences
from .crf import CrfParams, constrain_transitions, nll, viterbi
from .embeddings import CharLM, StackedEmbedding, WordEmbeddingTable, embed_sentence
from .evaluation import EvalReport, evaluate
from .lstm import LstmCell, lstm_cell_step
from .numerics import (
    ContractViolation,
    Parameter,
    Tensor,
    TrainingFault,
    add,
    backward,
    concat,
    glorot_uniform,
    linear,
    make_rng,
    scale,
    sgd_step,
    stack,
)

log = logging.getLogger(__name__)

__all__ = [
    "TaggerModel", "TrainConfig", "TrainState", "AnnealOnPatience", "lstm_cell_step", "bilstm",
    "forward_pass", "sentence_loss", "batch_loss", "fit", "predict", "save_checkpoint", "load_checkpoint",
]


@dataclass
class TrainConfig:
    initial_lr: float = 0.1
    anneal_factor: float = 0.5
    patience: int = 3
    batch_size: int = 32
    max_seq_len: int = 512
    embedding_dropout: float = 0.5
    max_epochs: int = 100
    min_lr: float = 1e-4
    seed: int = 1
    dev_metric: str = "micro_f1"  # or "loss"
    sigma_sq: float = math.inf
    grad_clip: float | None = None
    constrain_decoding: bool = True

    def __post_init__(self):
        if not 0 < self.anneal_factor < 1:
            raise ValueError("anneal_factor must lie in (0, 1)")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.batch_size < 1 or self.max_seq_len < 1:
            raise ValueError("batch_size and max_seq_len must be positive")
        if self.dev_metric not in ("micro_f1", "loss"):
            raise ValueError(f"unknown dev_metric {self.dev_metric!r}")


class TaggerModel:
    def __init__(self, stack: StackedEmbedding, scheme: TagScheme, hidden_size: int = 256,
                 rng: np.random.Generator | None = None, sigma_sq: float = math.inf):
        self.stack = stack
        self.scheme = scheme
        self.hidden_size = hidden_size
        d_in = stack.total_dim
        t = len(scheme)
        self.fwd_cell = LstmCell(d_in, hidden_size, "bilstm.fwd", rng)
        self.bwd_cell = LstmCell(d_in, hidden_size, "bilstm.bwd", rng)
        w = glorot_uniform((t, 2 * hidden_size), rng) if rng is not None else np.zeros((t, 2 * hidden_size))
        self.proj_W = Parameter(w, "proj.W")
        self.proj_b = Parameter(np.zeros(t), "proj.b")
        self.crf = CrfParams.create(t, rng, sigma_sq)
        self.constrain_decoding = True
        self.metadata: dict = {}

    @property
    def num_tags(self) -> int:
        return len(self.scheme)

    def parameters(self) -> list[Parameter]:
        """Trainable parameters; the word table and frozen LMs are excluded."""
        return (self.stack.parameters() + self.fwd_cell.parameters() + self.bwd_cell.parameters()
                + [self.proj_W, self.proj_b] + self.crf.parameters())

    def tagger_arrays(self) -> dict[str, np.ndarray]:
        ps = self.fwd_cell.parameters() + self.bwd_cell.parameters() + [self.proj_W, self.proj_b] \
            + self.crf.parameters()
        return {p.name: p.value.copy() for p in ps}

    def load_tagger_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        ps = self.fwd_cell.parameters() + self.bwd_cell.parameters() + [self.proj_W, self.proj_b] \
            + self.crf.parameters()
        for p in ps:
            p.value[...] = arrays[p.name]


@dataclass
class TrainState:
    current_lr: float = 0.1
    epoch: int = 0
    best_dev_score: float = -math.inf
    epochs_since_improvement: int = 0
    best_checkpoint_path: str | None = None
    best_epoch: int = 0
    log: list[dict] = field(default_factory=list)


class AnnealOnPatience:
    """Multiply the learning rate by ``factor`` after ``patience`` epochs without improvement."""

    def __init__(self, state: TrainState, factor: float, patience: int):
        self.state = state
        self.factor = factor
        self.patience = patience

    def step(self, score: float) -> bool:
        """Record one epoch's dev score; returns True on a strict improvement."""
        s = self.state
        if score > s.best_dev_score:
            s.best_dev_score = score
            s.epochs_since_improvement = 0
            return True
        s.epochs_since_improvement += 1
        if s.epochs_since_improvement >= self.patience:
            s.current_lr *= self.factor
            s.epochs_since_improvement = 0
        return False


# ---------------------------------------------------------------------------
# forward computation


def bilstm(model: TaggerModel, embedded: Sequence) -> list[Tensor]:
    """``concat(h_fwd_t, h_bwd_t)`` for every position."""
    if not embedded:
        raise ContractViolation("bilstm needs at least one input vector")
    h, c = model.fwd_cell.zero_state()
    fwd = []
    for x in embedded:
        h, c = model.fwd_cell.step(x, h, c)
        fwd.append(h)
    h, c = model.bwd_cell.zero_state()
    bwd = []
    for x in reversed(embedded):
        h, c = model.bwd_cell.step(x, h, c)
        bwd.append(h)
    bwd.reverse()
    return [concat([f, b]) for f, b in zip(fwd, bwd)]


def forward_pass(model: TaggerModel, sentence, training: bool = False,
                 rng: np.random.Generator | None = None, max_seq_len: int = 512) -> Tensor:
    """Emission scores of shape ``(N, num_tags)``."""
    n = len(sentence)
    if n > max_seq_len:
        raise ContractViolation(f"sentence of {n} tokens exceeds max_seq_len {max_seq_len}; window it first")
    embedded = embed_sentence(model.stack, sentence, training, rng)
    return stack([linear(model.proj_W, h, model.proj_b) for h in bilstm(model, embedded)])


def sentence_loss(model: TaggerModel, sentence: Sentence, training: bool = False,
                  rng: np.random.Generator | None = None) -> Tensor:
    em = forward_pass(model, sentence, training, rng, max_seq_len=len(sentence))
    gold = [model.scheme.index(t) for t in sentence.tags]
    return nll(em, model.crf, gold, model.parameters())


def batch_loss(model: TaggerModel, batch: Sequence[Sentence], training: bool = False,
               rng: np.random.Generator | None = None) -> Tensor:
    """Mean of per-sentence losses."""
    losses = [sentence_loss(model, s, training, rng) for s in batch]
    acc = losses[0]
    for l in losses[1:]:
        acc = add(acc, l)
    return scale(acc, 1.0 / len(losses))


def predict(model: TaggerModel, sentence) -> list[str]:
    """Viterbi decode in eval mode."""
    em = forward_pass(model, sentence, training=False, max_seq_len=max(len(sentence), 1))
    crf = constrain_transitions(model.crf, model.scheme) if model.constrain_decoding else model.crf
    path, _ = viterbi(em, crf)
    tags = model.scheme.tags
    return [tags[i] for i in path]


def evaluate_model(model: TaggerModel, sentences: Sequence[Sentence]) -> EvalReport:
    return evaluate([s.tags for s in sentences], [predict(model, s) for s in sentences])


# ---------------------------------------------------------------------------
# training


def _param_norms(model: TaggerModel) -> dict[str, float]:
    return {p.name: float(np.linalg.norm(p.value)) for p in model.parameters()}


def fit(model: TaggerModel, corpus: Corpus, config: TrainConfig = TrainConfig(),
        out_dir=None, dev_scorer: Callable[[TaggerModel, int], float] | None = None,
        on_epoch: Callable[[dict], None] | None = None) -> TrainState:
    """Train with mini-batch SGD; anneal the LR on dev-score plateaus.

    The best-scoring parameters are restored into ``model`` on return and,
    when ``out_dir`` is given, saved as ``best-model.ckpt`` there.
    ``dev_scorer(model, epoch)`` replaces the dev evaluation when given.
    """
    if not corpus.train or not corpus.dev:
        raise ValueError("fit needs non-empty train and dev splits")
    rng = make_rng(config.seed)
    model.constrain_decoding = config.constrain_decoding
    model.stack.dropout_p = config.embedding_dropout
    model.crf.sigma_sq = config.sigma_sq
    state = TrainState(current_lr=config.initial_lr)
    schedule = AnnealOnPatience(state, config.anneal_factor, config.patience)
    params = model.parameters()
    best_arrays = model.tagger_arrays()
    best_lm = None
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        state.best_checkpoint_path = str(out / "best-model.ckpt")

    model.metadata.update(train_config=config_to_dict(config), corpus_digest=corpus.digest())
    train = window_long_sentences(corpus.train, config.max_seq_len)
    while state.epoch < config.max_epochs and state.current_lr >= config.min_lr:
        state.epoch += 1
        lr = state.current_lr
        order = rng.permutation(len(train))
        epoch_loss, n_batches = 0.0, 0
        for b, start in enumerate(range(0, len(order), config.batch_size)):
            batch = [train[i] for i in order[start:start + config.batch_size]]
            loss = batch_loss(model, batch, training=True, rng=rng)
            value = float(loss.value)
            if not math.isfinite(value):
                raise TrainingFault(f"non-finite loss at epoch {state.epoch}, batch {b + 1}; "
                                    f"parameter norms {_param_norms(model)}")
            backward(loss)
            try:
                sgd_step(params, lr, config.grad_clip)
            except TrainingFault as exc:
                raise TrainingFault(f"epoch {state.epoch}, batch {b + 1}: {exc}; "
                                    f"parameter norms {_param_norms(model)}") from None
            epoch_loss += value
            n_batches += 1

        entry = {"epoch": state.epoch, "lr": lr, "train_loss": epoch_loss / n_batches}
        if dev_scorer is not None:
            score = dev_scorer(model, state.epoch)
        else:
            report = evaluate_model(model, corpus.dev)
            entry.update(dev_p=report.micro.precision, dev_r=report.micro.recall, dev_f1=report.micro.f1)
            if config.dev_metric == "loss":
                score = -float(np.mean([sentence_loss(model, s).value for s in corpus.dev]))
            else:
                score = report.micro.f1
        entry["dev_score"] = score
        if schedule.step(score):
            state.best_epoch = state.epoch
            best_arrays = model.tagger_arrays()
            if model.stack.fine_tune_lm:
                best_lm = {p.name: p.value.copy() for p in model.stack.parameters()}
            if out is not None:
                save_checkpoint(model, state.best_checkpoint_path)
        entry["epochs_since_improvement"] = state.epochs_since_improvement
        state.log.append(entry)
        log.info(format_log_line(entry))
        if on_epoch is not None:
            on_epoch(entry)

    model.load_tagger_arrays(best_arrays)
    if best_lm is not None:
        for p in model.stack.parameters():
            p.value[...] = best_lm[p.name]
        model.stack._cache.clear()
    return state


def format_log_line(entry: dict) -> str:
    line = f"epoch {entry['epoch']:3d}  lr {entry['lr']:.6g}  train_loss {entry['train_loss']:.6f}"
    if "dev_f1" in entry:
        line += (f"  dev_p {100 * entry['dev_p']:.2f}  dev_r {100 * entry['dev_r']:.2f}"
                 f"  dev_f1 {100 * entry['dev_f1']:.2f}")
    else:
        line += f"  dev_score {entry['dev_score']:.6f}"
    return line


# ---------------------------------------------------------------------------
# checkpoints


def _sigma_to_json(x: float):
    return "inf" if math.isinf(x) else x


def save_checkpoint(model: TaggerModel, path, metadata: dict | None = None) -> None:
    meta = dict(model.metadata)
    meta.update(metadata or {})
    stack_ = model.stack
    header = {
        "kind": "tagger",
        "entity_types": list(model.scheme.entity_types),
        "hidden_size": model.hidden_size,
        "sigma_sq": _sigma_to_json(model.crf.sigma_sq),
        "constrain_decoding": model.constrain_decoding,
        "word_vocab": sorted(stack_.word_table.vocab, key=stack_.word_table.vocab.get),
        "oov_policy": stack_.word_table.oov_policy,
        "word_vectors_digest": stack_.word_table.source_digest,
        "dropout_p": stack_.dropout_p,
        "dropout_scope": stack_.dropout_scope,
        "fine_tune_lm": stack_.fine_tune_lm,
        "fwd_lm": stack_.fwd_lm.header(),
        "bwd_lm": stack_.bwd_lm.header(),
        "metadata": meta,
    }
    arrays = {"word_vectors": stack_.word_table.vectors}
    arrays.update(stack_.fwd_lm.arrays())
    arrays.update(stack_.bwd_lm.arrays())
    arrays.update(model.tagger_arrays())
    sidecar = {k: header[k] for k in ("kind", "entity_types", "hidden_size", "sigma_sq",
                                       "word_vectors_digest", "dropout_p", "metadata")}
    container.save(path, header, arrays, sidecar=sidecar)


def load_checkpoint(path) -> TaggerModel:
    header, arrays = container.load(path)
    if header.get("kind") != "tagger":
        raise container.CheckpointError(f"{path} is not a tagger checkpoint")
    vocab = {w: i for i, w in enumerate(header["word_vocab"])}
    table = WordEmbeddingTable(vocab, arrays["word_vectors"], header["oov_policy"], header["word_vectors_digest"])
    fwd = CharLM.from_state(header["fwd_lm"], arrays)
    bwd = CharLM.from_state(header["bwd_lm"], arrays)
    stack_ = StackedEmbedding(table, fwd, bwd, header["dropout_p"], header["dropout_scope"], header["fine_tune_lm"])
    sigma = float(header["sigma_sq"]) if header["sigma_sq"] != "inf" else math.inf
    model = TaggerModel(stack_, TagScheme(tuple(header["entity_types"])), header["hidden_size"], sigma_sq=sigma)
    model.load_tagger_arrays(arrays)
    model.constrain_decoding = header["constrain_decoding"]
    model.metadata = header["metadata"]
    return model


def config_from_dict(d: dict) -> TrainConfig:
    names = {f.name for f in fields(TrainConfig)}
    return TrainConfig(**{k: v for k, v in d.items() if k in names})


def config_to_dict(cfg: TrainConfig) -> dict:
    d = asdict(cfg)
    d["sigma_sq"] = _sigma_to_json(cfg.sigma_sq)
    return d


def write_training_log(state: TrainState, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "training.log").write_text("".join(format_log_line(e) + "\n" for e in state.log))
    (out / "training.jsonl").write_text("".join(json.dumps(e, sort_keys=True) + "\n" for e in state.log))
