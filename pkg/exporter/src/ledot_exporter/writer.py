"""Serializer for the engine's two-file dataset format.

Implemented against the format contract rather than the engine's own
code, so the cross-component test genuinely exercises both sides:
``<name>.manifest.json`` (UTF-8 JSON header) plus ``<name>.tensors.bin``
(little-endian float32 sections: vocab embeddings, per-instance
h_start/h_end/lm_logits_start/lm_logits_end, then a length-prefixed
uint32 token-id index).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1


@dataclass
class ExportedInstance:
    instance_id: str
    label: str
    task: int
    split: str
    h_start: np.ndarray
    h_end: np.ndarray
    lm_logits_start: np.ndarray
    lm_logits_end: np.ndarray
    token_ids: np.ndarray


@dataclass
class ExportedDataset:
    tokens: list[str]
    is_verb: list[bool]
    embeddings: np.ndarray            # (V, D_e)
    class_names: list[str]            # NA first
    anchor_tokens: list[int | None]
    class_tasks: list[int | None] | None = None
    instances: list[ExportedInstance] = field(default_factory=list)


def write_dataset(dataset: ExportedDataset, prefix) -> None:
    prefix = Path(prefix)
    manifest_path = prefix.with_name(prefix.name + ".manifest.json")
    tensor_path = prefix.with_name(prefix.name + ".tensors.bin")

    V, D_e = dataset.embeddings.shape
    D = dataset.instances[0].h_start.shape[0] if dataset.instances else 0

    emb_bytes = np.ascontiguousarray(dataset.embeddings, dtype="<f4").tobytes()
    inst_parts = []
    tok_parts = []
    for inst in dataset.instances:
        row = np.concatenate([
            np.asarray(inst.h_start, dtype=np.float64),
            np.asarray(inst.h_end, dtype=np.float64),
            np.asarray(inst.lm_logits_start, dtype=np.float64),
            np.asarray(inst.lm_logits_end, dtype=np.float64),
        ]).astype("<f4")
        inst_parts.append(row.tobytes())
        ids = np.asarray(inst.token_ids, dtype="<u4")
        tok_parts.append(np.asarray([ids.size], dtype="<u4").tobytes() + ids.tobytes())

    inst_bytes = b"".join(inst_parts)
    off_inst = len(emb_bytes)
    off_tok = off_inst + len(inst_bytes)

    manifest = {
        "format_version": FORMAT_VERSION,
        "D": D,
        "D_e": D_e,
        "V_cand": V,
        "tokens": [
            {"text": t, "is_verb": bool(v)}
            for t, v in zip(dataset.tokens, dataset.is_verb)
        ],
        "classes": [
            {"name": n, "anchor_token": a}
            if dataset.class_tasks is None
            else {"name": n, "anchor_token": a, "task": t}
            for n, a, t in zip(
                dataset.class_names, dataset.anchor_tokens,
                dataset.class_tasks or [None] * len(dataset.class_names))
        ],
        "instance_count": len(dataset.instances),
        "instances": [
            {"id": i.instance_id, "task": i.task, "label": i.label, "split": i.split}
            for i in dataset.instances
        ],
        "tensor_file": tensor_path.name,
        "sections": {"embeddings": 0, "instances": off_inst, "token_ids": off_tok},
    }
    manifest_path.write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    with open(tensor_path, "wb") as fh:
        fh.write(emb_bytes)
        fh.write(inst_bytes)
        fh.write(b"".join(tok_parts))
