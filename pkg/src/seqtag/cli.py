"""``seqtag`` command line: corpus-stats, pretrain-lm, train, tag, evaluate.

Every command takes ``--config FILE`` (flat JSON) and generic ``--key value``
overrides that win over the file. Exit codes: 0 success, 2 input/config
error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from pathlib import Path

from . import container
from .corpus import (
    ColumnSpec,
    ConllParseError,
    Corpus,
    Sentence,
    corpus_stats,
    infer_scheme,
    load_conll_file,
    read_blocks,
    TagScheme,
    window_long_sentences,
)
from .embeddings import (
    CharLM,
    LMConfig,
    StackedEmbedding,
    WordVectorError,
    load_lm,
    load_word_vectors,
    pretrain_lm,
    save_lm,
)
from .evaluation import evaluate, report_render
from .numerics import ContractViolation, TrainingFault, make_rng
from .tagger import (
    TaggerModel,
    config_from_dict,
    config_to_dict,
    evaluate_model,
    fit,
    format_log_line,
    load_checkpoint,
    predict,
    write_training_log,
)

log = logging.getLogger("seqtag")

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3

_COLUMNS = {"token_col": 0, "tag_col": -1, "delimiter": None, "lenient": False}

DEFAULTS = {
    "corpus-stats": {"paths": [], "entity_types": None, "format": "text", "out": None, **_COLUMNS},
    "pretrain-lm": {"raw_text": None, "out": "lm", "d_char": 16, "d_lm": 32, "lr": 1.0, "epochs": 10,
                    "bptt_window": 32, "batch": 8, "grad_clip": 1.0, "seed": 1},
    "train": {"train": None, "dev": None, "test": None, "word_vectors": None, "lm_forward": None,
              "lm_backward": None, "d_char": 16, "d_lm": 32, "entity_types": None, "hidden_size": 256,
              "oov_policy": "lowercase_then_zero", "dropout_scope": "full", "fine_tune_lm": False,
              "out": "run", **_COLUMNS,
              **config_to_dict(config_from_dict({}))},
    "tag": {"model": None, "input": None, "output": None, "token_col": 0, "delimiter": None},
    "evaluate": {"gold": None, "pred": None, "gold_col": None, "pred_col": -1, "token_col": 0,
                 "delimiter": None, "strict": False, "format": "text", "out": None},
}

REQUIRED_PATHS = {
    "pretrain-lm": ["raw_text"],
    "train": ["train", "dev", "word_vectors"],
    "tag": ["model", "input"],
    "evaluate": ["gold"],
}
OPTIONAL_PATHS = {"train": ["test", "lm_forward", "lm_backward"], "evaluate": ["pred"]}


class ConfigError(ValueError):
    pass


def _parse_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def resolve_config(command: str, config_path: str | None, overrides: dict) -> dict:
    cfg = dict(DEFAULTS[command])
    layers = []
    if config_path:
        try:
            layers.append(json.loads(Path(config_path).read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {config_path}: {exc}") from None
        if not isinstance(layers[0], dict):
            raise ConfigError("config file must hold a JSON object")
    layers.append(overrides)
    for layer in layers:
        unknown = sorted(set(layer) - set(cfg))
        if unknown:
            raise ConfigError(f"unknown config keys for {command}: {', '.join(unknown)}")
        cfg.update(layer)
    for key in REQUIRED_PATHS.get(command, []):
        if not cfg.get(key):
            raise ConfigError(f"missing required path: {key}")
    for key in REQUIRED_PATHS.get(command, []) + OPTIONAL_PATHS.get(command, []):
        if cfg.get(key) and not Path(cfg[key]).exists():
            raise ConfigError(f"{key}: no such file {cfg[key]}")
    if command == "corpus-stats":
        for p in cfg["paths"]:
            if not Path(p).exists():
                raise ConfigError(f"no such file {p}")
    threads = os.environ.get("SEQTAG_THREADS")
    if threads is not None:
        if not threads.isdigit() or int(threads) < 1:
            raise ConfigError(f"SEQTAG_THREADS must be a positive integer, got {threads!r}")
        cfg["threads"] = int(threads)
    return cfg


def _json_safe(cfg: dict) -> dict:
    return {k: ("inf" if isinstance(v, float) and math.isinf(v) else v) for k, v in cfg.items()}


def _echo_config(cfg: dict, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_json_safe(cfg), indent=2, sort_keys=True) + "\n")


def _column_spec(cfg: dict) -> ColumnSpec:
    return ColumnSpec(cfg.get("token_col", 0), cfg.get("tag_col", -1), cfg.get("delimiter"))


def _scheme(cfg: dict, paths: list[str]) -> TagScheme:
    if cfg.get("entity_types"):
        types = cfg["entity_types"]
        return TagScheme(tuple(types.split(",") if isinstance(types, str) else types))
    types: set[str] = set()
    for p in paths:
        with open(p, encoding="utf-8") as fh:
            types |= set(infer_scheme(fh, _column_spec(cfg)).entity_types)
    return TagScheme(tuple(types))


# ---------------------------------------------------------------------------
# commands


def cmd_corpus_stats(cfg: dict) -> int:
    scheme = _scheme(cfg, cfg["paths"])
    results = {}
    for p in cfg["paths"]:
        sents = load_conll_file(p, scheme, _column_spec(cfg), cfg["lenient"])
        results[p] = corpus_stats(sents)
    if cfg["format"] == "json":
        print(json.dumps({p: s.as_dict() for p, s in results.items()}, indent=2))
    else:
        for p, s in results.items():
            print(f"# {p}")
            print(s.to_text(), end="")
    if cfg["out"]:
        out = Path(cfg["out"])
        _echo_config(cfg, out / "corpus-stats-config.json")
        (out / "stats.json").write_text(json.dumps({p: s.as_dict() for p, s in results.items()}, indent=2) + "\n")
        (out / "stats.txt").write_text("".join(f"# {p}\n{s.to_text()}" for p, s in results.items()))
    return EXIT_OK


def cmd_pretrain_lm(cfg: dict) -> int:
    raw = Path(cfg["raw_text"]).read_text(encoding="utf-8")
    lm_cfg = LMConfig(d_char=cfg["d_char"], d_lm=cfg["d_lm"], lr=cfg["lr"], epochs=cfg["epochs"],
                      bptt_window=cfg["bptt_window"], batch=cfg["batch"], grad_clip=cfg["grad_clip"],
                      seed=cfg["seed"])
    fwd, bwd, history = pretrain_lm(raw, lm_cfg)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    meta = {"config": history["config"], "forward_perplexity": history["forward"],
            "backward_perplexity": history["backward"]}
    save_lm(fwd, out / "lm-forward.ckpt", meta)
    save_lm(bwd, out / "lm-backward.ckpt", meta)
    lines = [f"epoch {i + 1}  forward_ppl {f:.6f}  backward_ppl {b:.6f}"
             for i, (f, b) in enumerate(zip(history["forward"], history["backward"]))]
    (out / "perplexity.log").write_text("".join(l + "\n" for l in lines))
    _echo_config(cfg, out / "config.json")
    for l in lines:
        print(l)
    return EXIT_OK


def build_model(cfg: dict, scheme: TagScheme, train: list[Sentence]) -> TaggerModel:
    with open(cfg["word_vectors"], encoding="utf-8") as fh:
        table = load_word_vectors(fh, cfg["oov_policy"])
    rng = make_rng(cfg["seed"])
    if cfg["lm_forward"] and cfg["lm_backward"]:
        fwd, bwd = load_lm(cfg["lm_forward"]), load_lm(cfg["lm_backward"])
    elif cfg["lm_forward"] or cfg["lm_backward"]:
        raise ConfigError("give both lm_forward and lm_backward, or neither")
    else:
        chars = {ch for s in train for w in s.words for ch in w} | {" "}
        fwd = CharLM(chars, cfg["d_char"], cfg["d_lm"], "forward", rng)
        bwd = CharLM(chars, cfg["d_char"], cfg["d_lm"], "backward", rng)
    stack = StackedEmbedding(table, fwd, bwd, cfg["embedding_dropout"], cfg["dropout_scope"], cfg["fine_tune_lm"])
    sigma = math.inf if cfg["sigma_sq"] in ("inf", None) else float(cfg["sigma_sq"])
    return TaggerModel(stack, scheme, cfg["hidden_size"], rng, sigma)


def cmd_train(cfg: dict) -> int:
    split_paths = [cfg[k] for k in ("train", "dev", "test") if cfg[k]]
    scheme = _scheme(cfg, split_paths)
    spec = _column_spec(cfg)
    train = load_conll_file(cfg["train"], scheme, spec, cfg["lenient"])
    dev = load_conll_file(cfg["dev"], scheme, spec, cfg["lenient"])
    test = load_conll_file(cfg["test"], scheme, spec, cfg["lenient"]) if cfg["test"] else []
    if not train or not dev:
        raise ConfigError("train and dev splits must be non-empty")
    tcfg = dict(cfg)
    if tcfg["sigma_sq"] == "inf":
        tcfg["sigma_sq"] = math.inf
    config = config_from_dict(tcfg)
    model = build_model(cfg, scheme, train)
    model.metadata["word_vectors_digest"] = model.stack.word_table.source_digest
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    _echo_config(cfg, out / "config.json")
    corpus = Corpus(train, window_long_sentences(dev, config.max_seq_len),
                    window_long_sentences(test, config.max_seq_len), scheme)
    state = fit(model, corpus, config, out_dir=out, on_epoch=lambda e: print(format_log_line(e), flush=True))
    write_training_log(state, out)
    print(f"best epoch {state.best_epoch}, checkpoint {state.best_checkpoint_path}")
    for name, split in (("train", corpus.train), ("test", corpus.test)):
        if not split:
            continue
        text, js = report_render(evaluate_model(model, split))
        (out / f"{name}_report.txt").write_text(text)
        (out / f"{name}_report.json").write_text(js + "\n")
        print(f"== {name} ==")
        print(text, end="")
    return EXIT_OK


def _predict_windowed(model: TaggerModel, words: list[str], max_len: int) -> list[str]:
    sent = Sentence.from_pairs(words, ["O"] * len(words))
    tags: list[str] = []
    for w in window_long_sentences([sent], max_len):
        tags.extend(predict(model, w))
    return tags


def cmd_tag(cfg: dict) -> int:
    model = load_checkpoint(cfg["model"])
    max_len = model.metadata.get("train_config", {}).get("max_seq_len", 512)
    spec = ColumnSpec(cfg["token_col"], -1, cfg["delimiter"])
    lines = Path(cfg["input"]).read_text(encoding="utf-8").splitlines()
    preds: dict[int, str] = {}
    for block in read_blocks(lines, spec):
        words = [fields[spec.token_col] for _, fields in block]
        for (line_no, _), tag in zip(block, _predict_windowed(model, words, max_len)):
            preds[line_no] = tag
    sep = cfg["delimiter"] or "\t"
    out_lines = [f"{line}{sep}{preds[i]}" if i in preds else line for i, line in enumerate(lines, start=1)]
    text = "".join(l + "\n" for l in out_lines)
    if cfg["output"]:
        Path(cfg["output"]).write_text(text, encoding="utf-8")
        _echo_config(cfg, Path(str(cfg["output"]) + ".config.json"))
    else:
        sys.stdout.write(text)
    return EXIT_OK


def _read_columns(path: str, cols: tuple[int, ...], delimiter):
    spec = ColumnSpec(cols[0], cols[-1], delimiter)
    blocks = read_blocks(Path(path).read_text(encoding="utf-8").splitlines(), spec)
    need = max(max(i + 1 if i >= 0 else -i for i in cols), len(set(cols)))
    for block in blocks:
        for line_no, fields in block:
            if len(fields) < need:
                raise ConllParseError(line_no, f"{path}: expected at least {need} columns")
    return blocks


def cmd_evaluate(cfg: dict) -> int:
    gold_col = cfg["gold_col"] if cfg["gold_col"] is not None else (-1 if cfg["pred"] else -2)
    pred_col = cfg["pred_col"]
    if cfg["pred"]:
        gold_blocks = _read_columns(cfg["gold"], (cfg["token_col"], gold_col), cfg["delimiter"])
        pred_blocks = _read_columns(cfg["pred"], (cfg["token_col"], pred_col), cfg["delimiter"])
    else:
        gold_blocks = _read_columns(cfg["gold"], (cfg["token_col"], gold_col, pred_col), cfg["delimiter"])
        pred_blocks = gold_blocks
    gold, pred = [], []
    for k in range(max(len(gold_blocks), len(pred_blocks))):
        if k >= len(gold_blocks) or k >= len(pred_blocks):
            line = (pred_blocks if k < len(pred_blocks) else gold_blocks)[k][0][0]
            raise ConllParseError(line, f"files diverge: sentence {k + 1} missing from one side")
        gb, pb = gold_blocks[k], pred_blocks[k]
        for (gl, gf), (pl, pf) in zip(gb, pb):
            if gf[cfg["token_col"]] != pf[cfg["token_col"]]:
                raise ConllParseError(gl, f"files diverge: token {gf[cfg['token_col']]!r} vs {pf[cfg['token_col']]!r}"
                                          f" (pred line {pl})")
        if len(gb) != len(pb):
            line = gb[min(len(gb), len(pb)) - 1][0] + 1
            raise ConllParseError(line, f"files diverge: sentence {k + 1} has {len(gb)} vs {len(pb)} tokens")
        gold.append([f[gold_col] for _, f in gb])
        pred.append([f[pred_col] for _, f in pb])
    report = evaluate(gold, pred, strict=cfg["strict"])
    text, js = report_render(report)
    print(js if cfg["format"] == "json" else text, end="" if cfg["format"] != "json" else "\n")
    if cfg["out"]:
        out = Path(cfg["out"])
        _echo_config(cfg, out / "evaluate-config.json")
        (out / "report.txt").write_text(text)
        (out / "report.json").write_text(js + "\n")
    return EXIT_OK


COMMANDS = {
    "corpus-stats": cmd_corpus_stats,
    "pretrain-lm": cmd_pretrain_lm,
    "train": cmd_train,
    "tag": cmd_tag,
    "evaluate": cmd_evaluate,
}


def _overrides(tokens: list[str]) -> tuple[dict, list[str]]:
    """Split ``--key value`` pairs from bare positional tokens.

    A bare token directly after a flag is that flag's value; a flag with no
    value means ``true``.
    """
    out, positional = {}, []
    i = 0
    while i < len(tokens):
        tok = tokens[i]
        if not tok.startswith("--"):
            positional.append(tok)
            i += 1
            continue
        key = tok[2:].replace("-", "_")
        if "=" in key:
            key, raw = key.split("=", 1)
            i += 1
        elif i + 1 < len(tokens) and not tokens[i + 1].startswith("--"):
            raw = tokens[i + 1]
            i += 2
        else:
            raw = "true"
            i += 1
        out[key] = _parse_value(raw)
    return out, positional


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="seqtag", description=__doc__.splitlines()[0], allow_abbrev=False)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        usage = f"seqtag {name} [--config FILE] [--key value ...]"
        if name == "corpus-stats":
            usage += " PATH ..."
        p = sub.add_parser(name, help=f"{name} (extra settings as --key value)", usage=usage, allow_abbrev=False)
        p.add_argument("--config", help="flat JSON config file")
        if name != "tag":
            p.add_argument("--out", help="output directory")
        if name in ("pretrain-lm", "train"):
            p.add_argument("--seed", type=int)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args, rest = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        overrides, positional = _overrides(rest)
        if positional and args.command != "corpus-stats":
            raise ConfigError(f"unexpected argument {positional[0]!r}")
        for key in ("out", "seed"):
            if getattr(args, key, None) is not None:
                overrides[key] = getattr(args, key)
        if positional:
            overrides["paths"] = positional
        cfg = resolve_config(args.command, args.config, overrides)
        return COMMANDS[args.command](cfg)
    except TrainingFault as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, ConllParseError, WordVectorError, container.CheckpointError,
            ContractViolation, ValueError, OSError, KeyError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
