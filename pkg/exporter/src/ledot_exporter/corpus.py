"""JSON Lines corpus: one sentence per line with span annotations.

Each line is ``{"tokens": [...], "spans": [{"start": s, "end": e,
"label": name}, ...]}`` with optional ``"split"`` (train/dev/test,
default train) and ``"task"`` (default 0).  Spans are inclusive word
indices into ``tokens``; negatives carry the label ``"NA"``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

NA_LABEL = "NA"


@dataclass
class Span:
    start: int
    end: int
    label: str


@dataclass
class Sentence:
    tokens: list[str]
    spans: list[Span]
    split: str = "train"
    task: int = 0


class CorpusError(Exception):
    pass


def read_corpus(path) -> list[Sentence]:
    sentences = []
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        raw = raw.strip()
        if not raw:
            continue
        try:
            obj = json.loads(raw)
            tokens = list(obj["tokens"])
            spans = [Span(int(s["start"]), int(s["end"]), str(s["label"]))
                     for s in obj["spans"]]
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise CorpusError(f"line {lineno}: {exc}") from exc
        if not tokens:
            raise CorpusError(f"line {lineno}: empty token list")
        sentences.append(Sentence(
            tokens=tokens, spans=spans,
            split=str(obj.get("split", "train")),
            task=int(obj.get("task", 0)),
        ))
    if not sentences:
        raise CorpusError(f"{path}: no sentences")
    return sentences


def label_inventory(sentences: list[Sentence]) -> list[str]:
    """Class names with NA first, the rest sorted for a stable ontology."""
    names = sorted({sp.label for s in sentences for sp in s.spans} - {NA_LABEL})
    return [NA_LABEL] + names
