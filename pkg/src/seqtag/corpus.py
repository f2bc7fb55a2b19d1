"""IOB2-tagged corpora in CoNLL column format."""
from __future__ import annotations

import hashlib
import io
import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence, TextIO

from .evaluation import extract_entities, split_tag

log = logging.getLogger(__name__)

DOCSTART = "-DOCSTART-"


class ConllParseError(ValueError):
    def __init__(self, line_no: int, msg: str):
        super().__init__(f"line {line_no}: {msg}")
        self.line_no = line_no


class SchemeError(ConllParseError):
    pass


@dataclass(frozen=True)
class Token:
    text: str
    gold_tag: str

    def __post_init__(self):
        if not self.text or any(ch.isspace() for ch in self.text):
            raise ValueError(f"token text must be non-empty without whitespace: {self.text!r}")


@dataclass(frozen=True)
class Sentence:
    tokens: tuple[Token, ...]

    def __post_init__(self):
        if not self.tokens:
            raise ValueError("a sentence needs at least one token")
        object.__setattr__(self, "tokens", tuple(self.tokens))

    @classmethod
    def from_pairs(cls, words: Sequence[str], tags: Sequence[str]) -> "Sentence":
        return cls(tuple(Token(w, t) for w, t in zip(words, tags, strict=True)))

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def words(self) -> list[str]:
        return [t.text for t in self.tokens]

    @property
    def tags(self) -> list[str]:
        return [t.gold_tag for t in self.tokens]


@dataclass(frozen=True)
class TagScheme:
    """IOB2 tag inventory: ``O`` followed by ``B-t, I-t`` for each type in sorted order."""

    entity_types: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "entity_types", tuple(sorted(set(self.entity_types))))

    @property
    def tags(self) -> list[str]:
        out = ["O"]
        for t in self.entity_types:
            out += [f"B-{t}", f"I-{t}"]
        return out

    def index(self, tag: str) -> int:
        return self._lookup()[tag]

    def _lookup(self) -> dict[str, int]:
        cache = self.__dict__.get("_cache")
        if cache is None:
            cache = {t: i for i, t in enumerate(self.tags)}
            object.__setattr__(self, "_cache", cache)
        return cache

    def __contains__(self, tag: str) -> bool:
        return tag in self._lookup()

    def __len__(self) -> int:
        return 2 * len(self.entity_types) + 1


@dataclass
class Corpus:
    train: list[Sentence]
    dev: list[Sentence]
    test: list[Sentence]
    scheme: TagScheme

    def digest(self) -> str:
        h = hashlib.sha256()
        for split in (self.train, self.dev, self.test):
            h.update(serialize_conll(split).encode("utf-8"))
            h.update(b"\x00")
        return h.hexdigest()


@dataclass
class CorpusStats:
    sentence_count: int = 0
    token_count: int = 0
    annotation_count: int = 0
    per_type: dict[str, int] = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {"sentence_count": self.sentence_count, "token_count": self.token_count,
                "annotation_count": self.annotation_count, "per_type": dict(sorted(self.per_type.items()))}

    def to_text(self) -> str:
        lines = [f"sentences\t{self.sentence_count}", f"tokens\t{self.token_count}",
                 f"annotations\t{self.annotation_count}"]
        lines += [f"annotations[{t}]\t{n}" for t, n in sorted(self.per_type.items())]
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), indent=2)


@dataclass(frozen=True)
class ColumnSpec:
    token_col: int = 0
    tag_col: int = -1
    delimiter: str | None = None  # None splits on any run of spaces/tabs


def _lines(stream: str | TextIO | Iterable[str]) -> Iterable[str]:
    if isinstance(stream, str):
        return io.StringIO(stream)
    return stream


def _split_line(line: str, spec: ColumnSpec) -> list[str]:
    return line.split(spec.delimiter) if spec.delimiter else line.split()


def read_blocks(stream, spec: ColumnSpec = ColumnSpec()) -> list[list[tuple[int, list[str]]]]:
    """Group non-blank, non-DOCSTART lines into sentences of ``(line_no, fields)``."""
    blocks, cur = [], []
    for line_no, raw in enumerate(_lines(stream), start=1):
        line = raw.rstrip("\r\n")
        if not line.strip():
            if cur:
                blocks.append(cur)
                cur = []
            continue
        if line.startswith(DOCSTART):
            continue
        cur.append((line_no, _split_line(line, spec)))
    if cur:
        blocks.append(cur)
    return blocks


def parse_conll(stream, scheme: TagScheme, column_spec: ColumnSpec = ColumnSpec(),
                lenient: bool = False) -> list[Sentence]:
    """Parse CoNLL text into sentences, checking every tag against ``scheme``.

    With ``lenient=True`` an IOB1-style chain opening with ``I-t`` is rewritten
    to start with ``B-t``; otherwise such a sentence raises :class:`SchemeError`.
    """
    need = max(max(i + 1 if i >= 0 else -i for i in (column_spec.token_col, column_spec.tag_col)), 2)
    sentences = []
    for block in read_blocks(stream, column_spec):
        words, tags = [], []
        for line_no, fields in block:
            if len(fields) < need:
                raise ConllParseError(line_no, f"expected at least {need} columns, found {len(fields)}")
            tag = fields[column_spec.tag_col]
            if tag not in scheme:
                raise SchemeError(line_no, f"unknown tag {tag!r}")
            words.append(fields[column_spec.token_col])
            tags.append(tag)
        for pos, reason in validate_tags(tags, scheme):
            if not lenient:
                raise SchemeError(block[pos][0], reason)
            prefix, etype = split_tag(tags[pos])
            log.warning("line %d: rewriting %s to B-%s", block[pos][0], tags[pos], etype)
            tags[pos] = f"B-{etype}"
        sentences.append(Sentence.from_pairs(words, tags))
    return sentences


def infer_scheme(stream, column_spec: ColumnSpec = ColumnSpec()) -> TagScheme:
    types = set()
    for block in read_blocks(stream, column_spec):
        for line_no, fields in block:
            if len(fields) < 2:
                raise ConllParseError(line_no, f"expected at least 2 columns, found {len(fields)}")
            prefix, etype = split_tag(fields[column_spec.tag_col])
            if prefix not in ("B", "I", "O"):
                raise SchemeError(line_no, f"unknown tag {fields[column_spec.tag_col]!r}")
            if etype:
                types.add(etype)
    return TagScheme(tuple(types))


def serialize_conll(sentences: Iterable[Sentence], delimiter: str = "\t") -> str:
    out = []
    for s in sentences:
        out.extend(f"{t.text}{delimiter}{t.gold_tag}" for t in s.tokens)
        out.append("")
    return "\n".join(out) + ("\n" if out else "")


def validate_tags(tags: Sequence[str], scheme: TagScheme) -> list[tuple[int, str]]:
    violations = []
    prev = "O"
    for i, tag in enumerate(tags):
        if tag not in scheme:
            violations.append((i, f"tag {tag!r} not in inventory"))
        else:
            prefix, etype = split_tag(tag)
            if prefix == "I" and prev not in (f"B-{etype}", f"I-{etype}"):
                violations.append((i, f"{tag} follows {prev}"))
        prev = tag
    return violations


def validate_scheme(sentence: Sentence, scheme: TagScheme) -> list[tuple[int, str]]:
    """IOB2 violations as ``(position, reason)``; empty when the sentence is valid."""
    return validate_tags(sentence.tags, scheme)


def window_long_sentences(sentences: Iterable[Sentence], max_seq_len: int = 512) -> list[Sentence]:
    """Split over-length sentences without cutting through an entity where possible."""
    if max_seq_len < 1:
        raise ValueError("max_seq_len must be >= 1")
    out = []
    for s in sentences:
        tokens = s.tokens
        start = 0
        while len(tokens) - start > max_seq_len:
            cut = max_seq_len
            # a cut before an I- tag would bisect a span
            while cut > 0 and tokens[start + cut].gold_tag.startswith("I-"):
                cut -= 1
            if cut == 0:
                cut = max_seq_len
                log.warning("entity longer than %d tokens split at token %d", max_seq_len, start + cut)
            out.append(Sentence(tokens[start:start + cut]))
            start += cut
        out.append(Sentence(tokens[start:]) if start else s)
    return out


def corpus_stats(split: Iterable[Sentence]) -> CorpusStats:
    stats = CorpusStats()
    per_type: Counter = Counter()
    for s in split:
        stats.sentence_count += 1
        stats.token_count += len(s)
        per_type.update(span.entity_type for span in extract_entities(s.tags))
    stats.per_type = dict(per_type)
    stats.annotation_count = sum(per_type.values())
    return stats


def load_conll_file(path, scheme: TagScheme, column_spec: ColumnSpec = ColumnSpec(),
                    lenient: bool = False) -> list[Sentence]:
    with open(path, encoding="utf-8") as fh:
        return parse_conll(fh, scheme, column_spec, lenient)
