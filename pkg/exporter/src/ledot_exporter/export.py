"""Run a frozen masked-LM encoder and emit the engine dataset format."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from transformers import AutoModelForMaskedLM, AutoTokenizer

from .corpus import NA_LABEL, Sentence, label_inventory, read_corpus
from .vocab import CandidateVocab, build_candidate_vocab
from .writer import ExportedDataset, ExportedInstance, write_dataset

log = logging.getLogger(__name__)


@dataclass
class ExportJob:
    corpus_path: str
    model_id: str
    verb_list_path: str | None = None
    extra_tokens: tuple[str, ...] = ()
    out_dir: str = "."
    name: str = "export"
    batch_size: int = 8


@dataclass
class ExportReport:
    exported: int = 0
    skipped: list[str] = field(default_factory=list)
    prefix: str = ""


def _load_frozen(model_id: str):
    tokenizer = AutoTokenizer.from_pretrained(model_id)
    model = AutoModelForMaskedLM.from_pretrained(model_id)
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model, tokenizer


def _first_subtoken_positions(word_ids: list[int | None]) -> dict[int, int]:
    first: dict[int, int] = {}
    for pos, wid in enumerate(word_ids):
        if wid is not None and wid not in first:
            first[wid] = pos
    return first


def export_dataset(job: ExportJob) -> ExportReport:
    """Extract span features and LM-head logits for every annotated span.

    Deterministic by construction: single-threaded inference, sentences in
    corpus order, spans in annotation order.  Broken spans are logged and
    skipped; the run continues.
    """
    torch.set_num_threads(1)
    sentences = read_corpus(job.corpus_path)
    class_names = label_inventory(sentences)
    model, tokenizer = _load_frozen(job.model_id)
    cand = build_candidate_vocab(
        model, tokenizer, job.verb_list_path, job.extra_tokens, class_names)
    cand_ids = torch.tensor(cand.model_ids, dtype=torch.long)
    by_model_id = cand.index_of_model_id()

    report = ExportReport()
    instances: list[ExportedInstance] = []
    with torch.no_grad():
        for start in range(0, len(sentences), job.batch_size):
            chunk = sentences[start:start + job.batch_size]
            enc = tokenizer(
                [s.tokens for s in chunk], is_split_into_words=True,
                padding=True, truncation=True, return_tensors="pt")
            out = model(**enc, output_hidden_states=True)
            hidden = out.hidden_states[-1]          # (B, T, D)
            logits = out.logits[:, :, cand_ids]     # (B, T, V_cand)
            for b, sent in enumerate(chunk):
                word_ids = enc.word_ids(batch_index=b)
                first = _first_subtoken_positions(word_ids)
                sent_tok_ids = _sentence_candidate_ids(tokenizer, sent, by_model_id)
                for k, span in enumerate(sent.spans):
                    sid = f"s{start + b}_sp{k}"
                    if not (0 <= span.start <= span.end < len(sent.tokens)):
                        report.skipped.append(f"{sid}: span out of bounds")
                        continue
                    if span.start not in first or span.end not in first:
                        report.skipped.append(f"{sid}: span truncated away")
                        continue
                    ps, pe = first[span.start], first[span.end]
                    instances.append(ExportedInstance(
                        instance_id=sid,
                        label=span.label,
                        task=sent.task,
                        split=sent.split,
                        h_start=hidden[b, ps].numpy().astype(np.float32),
                        h_end=hidden[b, pe].numpy().astype(np.float32),
                        lm_logits_start=logits[b, ps].numpy().astype(np.float32),
                        lm_logits_end=logits[b, pe].numpy().astype(np.float32),
                        token_ids=np.asarray(sent_tok_ids, dtype=np.uint32),
                    ))
                    report.exported += 1

    anchors: list[int | None] = [
        None if n == NA_LABEL else cand.anchor_of_class.get(n)
        for n in class_names
    ]
    # a class belongs to the earliest task whose sentences carry it as gold
    first_task: dict[str, int] = {}
    for sent in sentences:
        for span in sent.spans:
            if span.label != NA_LABEL:
                first_task[span.label] = min(
                    first_task.get(span.label, sent.task), sent.task)
    class_tasks: list[int | None] = [
        None if n == NA_LABEL else first_task.get(n) for n in class_names
    ]
    dataset = ExportedDataset(
        tokens=cand.tokens, is_verb=cand.is_verb,
        embeddings=cand.embeddings, class_names=class_names,
        anchor_tokens=anchors, class_tasks=class_tasks, instances=instances)
    out_dir = Path(job.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    prefix = out_dir / job.name
    write_dataset(dataset, prefix)
    report.prefix = str(prefix)
    for msg in report.skipped:
        log.warning("skipped %s", msg)
    return report


def _maybe_model_id(tokenizer, word: str) -> int | None:
    pieces = tokenizer.tokenize(word)
    if len(pieces) == 1:
        tid = tokenizer.convert_tokens_to_ids(pieces)[0]
        if tid != tokenizer.unk_token_id:
            return int(tid)
    return None


def _sentence_candidate_ids(tokenizer, sent: Sentence, by_model_id) -> list[int]:
    """Candidate indices of sentence words present in the candidate set."""
    found = set()
    for word in sent.tokens:
        mid = _maybe_model_id(tokenizer, word)
        if mid is not None and mid in by_model_id:
            found.add(by_model_id[mid])
    return sorted(found)
