"""Candidate-vocabulary construction from the model's token inventory."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np


class VocabError(Exception):
    pass


@dataclass
class CandidateVocab:
    tokens: list[str]
    is_verb: list[bool]
    model_ids: list[int]             # model-vocabulary id per candidate token
    embeddings: np.ndarray           # (V, D_e) float32, input-embedding rows
    anchor_of_class: dict[str, int]  # class name -> candidate index

    @property
    def size(self) -> int:
        return len(self.tokens)

    def index_of_model_id(self) -> dict[int, int]:
        return {mid: i for i, mid in enumerate(self.model_ids)}


def _single_token_id(tokenizer, word: str) -> int | None:
    """Model id of a word that survives tokenization as one known piece."""
    ids = tokenizer.convert_tokens_to_ids([word])
    if ids[0] is not None and ids[0] != tokenizer.unk_token_id:
        return int(ids[0])
    pieces = tokenizer.tokenize(word)
    if len(pieces) == 1:
        pid = tokenizer.convert_tokens_to_ids(pieces)[0]
        if pid != tokenizer.unk_token_id:
            return int(pid)
    return None


def build_candidate_vocab(
    model, tokenizer, verb_list_path=None, extra_tokens=(),
    class_names=(),
) -> CandidateVocab:
    """Verb subset plus extra tokens plus class anchors, deduplicated.

    Verbs come from a newline-delimited token file; words the model cannot
    represent as a single known token are skipped.  Class names that map
    to a single token become anchor tokens (and candidate entries).
    """
    verbs = []
    if verb_list_path is not None:
        verbs = [w.strip() for w in Path(verb_list_path).read_text(
            encoding="utf-8").splitlines() if w.strip()]

    tokens: list[str] = []
    is_verb: list[bool] = []
    model_ids: list[int] = []
    seen: dict[str, int] = {}

    def add(word: str, verb: bool) -> int | None:
        if word in seen:
            idx = seen[word]
            if verb:
                is_verb[idx] = True
            return idx
        mid = _single_token_id(tokenizer, word)
        if mid is None:
            return None
        seen[word] = len(tokens)
        tokens.append(word)
        is_verb.append(verb)
        model_ids.append(mid)
        return seen[word]

    for w in verbs:
        add(w, True)
    for w in extra_tokens:
        add(w, False)
    anchor_of_class: dict[str, int] = {}
    for name in class_names:
        if name == "NA":
            continue
        idx = add(name.lower(), False)
        if idx is not None:
            anchor_of_class[name] = idx

    if not tokens:
        raise VocabError("candidate vocabulary is empty")

    table = model.get_input_embeddings().weight.detach().cpu().numpy()
    emb = table[np.asarray(model_ids)].astype(np.float32)
    norms = np.linalg.norm(emb.astype(np.float64), axis=1)
    if np.any(norms == 0.0):
        raise VocabError("zero-norm input embedding in candidate vocabulary")
    return CandidateVocab(
        tokens=tokens, is_verb=is_verb, model_ids=model_ids,
        embeddings=emb, anchor_of_class=anchor_of_class)
