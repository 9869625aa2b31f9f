"""Feature-file format, synthetic streams, and oracle-negative relabeling.

A dataset is two files that together hold everything the engine needs:

``<name>.manifest.json``
    UTF-8 JSON header: ``format_version`` (=1), ``D``, ``D_e``, ``V_cand``,
    ``tokens`` (array of ``{text, is_verb}``), ``classes`` (array of
    ``{name, anchor_token}``; class 0 is always NA), ``instance_count``,
    ``instances`` (per-instance ``{id, task, label, split}``),
    ``tensor_file`` and ``sections`` (per-section byte offsets).

``<name>.tensors.bin``
    Little-endian IEEE-754 32-bit floats.  Sections in order: vocabulary
    embeddings (V_cand x D_e), then per instance ``h_start`` (D),
    ``h_end`` (D), ``lm_logits_start`` (V_cand), ``lm_logits_end``
    (V_cand); finally a token-id index of 32-bit little-endian unsigned
    integers, each instance's ids preceded by a length prefix.

Arrays stay float32 in memory so a write/read round trip is bit-exact;
training upcasts at the batch boundary.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError, OntologyError
from .numerics import RngState

FORMAT_VERSION = 1
NA = 0  # label id of the non-event class, by convention

SPLITS = ("train", "dev", "test")


@dataclass
class Vocabulary:
    tokens: list[str]
    is_verb: np.ndarray          # bool, (V,)
    embeddings: np.ndarray       # float32, (V, D_e)

    @property
    def size(self) -> int:
        return len(self.tokens)

    @property
    def embed_dim(self) -> int:
        return self.embeddings.shape[1]

    def validate(self) -> None:
        if len(set(self.tokens)) != len(self.tokens):
            raise FormatError("malformed-header", "duplicate tokens in vocabulary")
        if self.embeddings.shape != (self.size, self.embeddings.shape[1]):
            raise FormatError("dimension-mismatch", "embedding table shape")
        if not np.all(np.isfinite(self.embeddings)):
            raise FormatError("non-finite-payload", "vocabulary embeddings")
        norms = np.linalg.norm(self.embeddings.astype(np.float64), axis=1)
        if np.any(norms == 0.0):
            raise FormatError("zero-norm-embedding", "vocabulary embedding with zero norm")


@dataclass
class Ontology:
    class_names: list[str]                 # index 0 is NA
    anchor_tokens: list[int | None]        # per class, index into the vocabulary
    class_tasks: list[int | None] | None = None   # task introducing each class

    @property
    def num_classes(self) -> int:
        """Total classes including NA."""
        return len(self.class_names)

    def label_id(self, name: str) -> int:
        try:
            return self.class_names.index(name)
        except ValueError:
            raise OntologyError(f"unknown class name {name!r}") from None

    def validate(self, vocab_size: int) -> None:
        if not self.class_names or self.class_names[0] != "NA":
            raise FormatError("malformed-header", "class 0 must be NA")
        if len(set(self.class_names)) != len(self.class_names):
            raise FormatError("malformed-header", "duplicate class names")
        if len(self.anchor_tokens) != len(self.class_names):
            raise FormatError("malformed-header", "anchor table length mismatch")
        for a in self.anchor_tokens:
            if a is not None and not (0 <= a < vocab_size):
                raise FormatError("invalid-index", f"anchor token {a} out of range")
        if self.class_tasks is not None and len(self.class_tasks) != len(self.class_names):
            raise FormatError("malformed-header", "class-task table length mismatch")


@dataclass
class FeatureInstance:
    instance_id: str
    label_id: int                 # gold label; 0 = NA
    h_start: np.ndarray           # float32, (D,)
    h_end: np.ndarray             # float32, (D,)
    lm_logits_start: np.ndarray   # float32, (V_cand,)
    lm_logits_end: np.ndarray     # float32, (V_cand,)
    token_ids: np.ndarray         # uint32, candidate-vocabulary indices in the sentence
    task: int = 0
    split: str = "train"


@dataclass
class Dataset:
    vocab: Vocabulary
    ontology: Ontology
    instances: list[FeatureInstance]

    def validate(self) -> None:
        self.vocab.validate()
        self.ontology.validate(self.vocab.size)
        D = self.instances[0].h_start.shape[0] if self.instances else 0
        V = self.vocab.size
        for inst in self.instances:
            if inst.h_start.shape != (D,) or inst.h_end.shape != (D,):
                raise FormatError("dimension-mismatch", f"span vectors of {inst.instance_id}")
            if inst.lm_logits_start.shape != (V,) or inst.lm_logits_end.shape != (V,):
                raise FormatError("dimension-mismatch", f"logit rows of {inst.instance_id}")
            for arr in (inst.h_start, inst.h_end, inst.lm_logits_start, inst.lm_logits_end):
                if not np.all(np.isfinite(arr)):
                    raise FormatError("non-finite-payload", f"instance {inst.instance_id}")
            if not (0 <= inst.label_id < self.ontology.num_classes):
                raise FormatError("invalid-index", f"label of {inst.instance_id}")
            if inst.token_ids.size and (inst.token_ids.min() < 0 or inst.token_ids.max() >= V):
                raise FormatError("invalid-index", f"token ids of {inst.instance_id}")
            if inst.split not in SPLITS:
                raise FormatError("malformed-header", f"split of {inst.instance_id}")


# ---------------------------------------------------------------------------
# On-disk format
# ---------------------------------------------------------------------------

def _paths(path) -> tuple[Path, Path]:
    p = Path(path)
    if p.name.endswith(".manifest.json"):
        p = p.with_name(p.name[: -len(".manifest.json")])
    return p.with_name(p.name + ".manifest.json"), p.with_name(p.name + ".tensors.bin")


def write_feature_file(dataset: Dataset, path) -> None:
    """Write ``<path>.manifest.json`` and ``<path>.tensors.bin``.

    Deterministic: the same dataset always produces byte-identical files.
    """
    dataset.validate()
    manifest_path, tensor_path = _paths(path)
    vocab, onto, instances = dataset.vocab, dataset.ontology, dataset.instances
    D = instances[0].h_start.shape[0] if instances else 0
    V = vocab.size

    emb = np.ascontiguousarray(vocab.embeddings, dtype="<f4")
    blocks = [emb.tobytes()]
    for inst in instances:
        row = np.concatenate([
            inst.h_start, inst.h_end, inst.lm_logits_start, inst.lm_logits_end,
        ]).astype("<f4", copy=False)
        blocks.append(row.tobytes())
    inst_bytes = b"".join(blocks[1:])

    tok_blocks = []
    for inst in instances:
        ids = np.asarray(inst.token_ids, dtype="<u4")
        tok_blocks.append(np.asarray([ids.size], dtype="<u4").tobytes())
        tok_blocks.append(ids.tobytes())
    tok_bytes = b"".join(tok_blocks)

    off_emb = 0
    off_inst = off_emb + len(blocks[0])
    off_tok = off_inst + len(inst_bytes)

    manifest = {
        "format_version": FORMAT_VERSION,
        "D": D,
        "D_e": vocab.embed_dim,
        "V_cand": V,
        "tokens": [
            {"text": t, "is_verb": bool(v)} for t, v in zip(vocab.tokens, vocab.is_verb)
        ],
        "classes": [
            {"name": n, "anchor_token": a}
            if onto.class_tasks is None
            else {"name": n, "anchor_token": a, "task": t}
            for n, a, t in zip(
                onto.class_names, onto.anchor_tokens,
                onto.class_tasks or [None] * len(onto.class_names))
        ],
        "instance_count": len(instances),
        "instances": [
            {
                "id": inst.instance_id,
                "task": inst.task,
                "label": onto.class_names[inst.label_id],
                "split": inst.split,
            }
            for inst in instances
        ],
        "tensor_file": tensor_path.name,
        "sections": {"embeddings": off_emb, "instances": off_inst, "token_ids": off_tok},
    }
    manifest_path.write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    with open(tensor_path, "wb") as fh:
        fh.write(blocks[0])
        fh.write(inst_bytes)
        fh.write(tok_bytes)


def read_feature_file(path) -> tuple[Vocabulary, Ontology, list[FeatureInstance]]:
    """Read and fully validate a dataset written by :func:`write_feature_file`."""
    manifest_path, tensor_path_default = _paths(path)
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError("malformed-header", f"manifest is not valid JSON: {exc}") from exc

    try:
        if manifest["format_version"] != FORMAT_VERSION:
            raise FormatError(
                "malformed-header", f"unsupported format_version {manifest['format_version']}"
            )
        D = int(manifest["D"])
        D_e = int(manifest["D_e"])
        V = int(manifest["V_cand"])
        tokens = [t["text"] for t in manifest["tokens"]]
        is_verb = np.array([bool(t["is_verb"]) for t in manifest["tokens"]], dtype=bool)
        class_names = [c["name"] for c in manifest["classes"]]
        anchors = [c["anchor_token"] for c in manifest["classes"]]
        class_tasks = ([c.get("task") for c in manifest["classes"]]
                       if any("task" in c for c in manifest["classes"]) else None)
        count = int(manifest["instance_count"])
        table = manifest["instances"]
        sections = manifest["sections"]
        tensor_file = manifest["tensor_file"]
    except (KeyError, TypeError) as exc:
        raise FormatError("malformed-header", f"missing or malformed field: {exc}") from exc

    if len(tokens) != V:
        raise FormatError("dimension-mismatch", f"token table has {len(tokens)} rows, V_cand={V}")
    if len(table) != count:
        raise FormatError("dimension-mismatch", "instance table length != instance_count")

    blob = (manifest_path.parent / tensor_file).read_bytes() \
        if tensor_file != tensor_path_default.name else tensor_path_default.read_bytes()

    off_emb, off_inst, off_tok = (
        sections.get("embeddings"), sections.get("instances"), sections.get("token_ids"))
    if off_emb != 0 or off_inst is None or off_tok is None:
        raise FormatError("malformed-header", "bad sections table")
    emb_bytes = V * D_e * 4
    row_floats = 2 * D + 2 * V
    inst_bytes = count * row_floats * 4
    if off_inst - off_emb != emb_bytes:
        raise FormatError("dimension-mismatch", "embedding section size")
    if off_tok - off_inst != inst_bytes:
        raise FormatError("dimension-mismatch", "instance section size")
    if len(blob) < off_tok:
        raise FormatError("truncated-blob", "tensor blob shorter than declared sections")

    emb = np.frombuffer(blob, dtype="<f4", count=V * D_e, offset=off_emb).reshape(V, D_e)
    vocab = Vocabulary(tokens=tokens, is_verb=is_verb, embeddings=emb.copy())
    onto = Ontology(class_names=class_names, anchor_tokens=anchors,
                    class_tasks=class_tasks)

    rows = np.frombuffer(
        blob, dtype="<f4", count=count * row_floats, offset=off_inst
    ).reshape(count, row_floats)

    # token-id index: per-instance length prefix, then ids
    token_lists: list[np.ndarray] = []
    pos = off_tok
    for i in range(count):
        if pos + 4 > len(blob):
            raise FormatError("truncated-blob", f"token index of instance {i}")
        (n,) = np.frombuffer(blob, dtype="<u4", count=1, offset=pos)
        pos += 4
        if pos + 4 * int(n) > len(blob):
            raise FormatError("truncated-blob", f"token ids of instance {i}")
        ids = np.frombuffer(blob, dtype="<u4", count=int(n), offset=pos).copy()
        pos += 4 * int(n)
        token_lists.append(ids)
    if pos != len(blob):
        raise FormatError("dimension-mismatch", "trailing bytes after token index")

    name_to_id = {n: i for i, n in enumerate(class_names)}
    instances = []
    for i, entry in enumerate(table):
        try:
            label = name_to_id[entry["label"]]
        except KeyError:
            raise FormatError("invalid-index", f"label {entry.get('label')!r}") from None
        row = rows[i]
        instances.append(FeatureInstance(
            instance_id=str(entry["id"]),
            label_id=label,
            h_start=row[:D].copy(),
            h_end=row[D:2 * D].copy(),
            lm_logits_start=row[2 * D:2 * D + V].copy(),
            lm_logits_end=row[2 * D + V:].copy(),
            token_ids=token_lists[i],
            task=int(entry.get("task", 0)),
            split=str(entry.get("split", "train")),
        ))

    dataset = Dataset(vocab=vocab, ontology=onto, instances=instances)
    dataset.validate()
    return vocab, onto, instances


def load_dataset(path) -> Dataset:
    vocab, onto, instances = read_feature_file(path)
    return Dataset(vocab=vocab, ontology=onto, instances=instances)


# ---------------------------------------------------------------------------
# Task streams
# ---------------------------------------------------------------------------

# a split is a list of (instance, effective label) pairs; the instance keeps
# its gold label, the effective label reflects oracle-negative relabeling
Labeled = tuple[FeatureInstance, int]


@dataclass
class Task:
    index: int
    label_ids: frozenset[int]      # non-NA classes introduced by this task
    train: list[Labeled]
    dev: list[Labeled]
    test: list[Labeled]


@dataclass
class TaskStream:
    vocab: Vocabulary
    ontology: Ontology
    tasks: list[Task]
    oracle_applied: bool = False

    @property
    def num_tasks(self) -> int:
        return len(self.tasks)

    def labels_until(self, upto: int) -> frozenset[int]:
        """Non-NA labels of tasks 0..upto inclusive."""
        out: set[int] = set()
        for task in self.tasks[: upto + 1]:
            out |= task.label_ids
        return frozenset(out)


def build_stream(dataset: Dataset, dev_fraction: float = 0.1,
                 rng: RngState | None = None) -> TaskStream:
    """Assemble a task stream from per-instance task/split assignments.

    Label subsets come from the ontology's class-task table when present
    (a task's train data may contain other tasks' gold types, which the
    oracle-negative relabeling handles later); otherwise a label belongs
    to the task whose train split first shows it.  When a task has no dev
    instances, the last ``dev_fraction`` of its train split (after a
    seeded shuffle when ``rng`` is given) is carved out as dev.
    """
    n_tasks = max((inst.task for inst in dataset.instances), default=-1) + 1
    if dataset.ontology.class_tasks is not None:
        n_tasks = max([n_tasks] + [t + 1 for t in dataset.ontology.class_tasks
                                   if t is not None])
    buckets: list[dict[str, list[Labeled]]] = [
        {s: [] for s in SPLITS} for _ in range(n_tasks)
    ]
    for inst in dataset.instances:
        if not (0 <= inst.task < n_tasks):
            raise OntologyError(f"instance {inst.instance_id} has bad task {inst.task}")
        buckets[inst.task][inst.split].append((inst, inst.label_id))

    subsets: list[set[int]] = [set() for _ in range(n_tasks)]
    if dataset.ontology.class_tasks is not None:
        for lab, t in enumerate(dataset.ontology.class_tasks):
            if lab != NA and t is not None:
                subsets[t].add(lab)
    else:
        claimed: set[int] = set()
        for t in range(n_tasks):
            for _, lab in buckets[t]["train"]:
                if lab != NA and lab not in claimed:
                    subsets[t].add(lab)
                    claimed.add(lab)

    tasks = []
    seen: set[int] = set()
    for t in range(n_tasks):
        train, dev, test = buckets[t]["train"], buckets[t]["dev"], buckets[t]["test"]
        if not dev and train:
            order = list(range(len(train)))
            if rng is not None:
                rng.child(f"devsplit{t}").generator().shuffle(order)
            n_dev = max(1, int(round(dev_fraction * len(train))))
            dev = [train[i] for i in order[-n_dev:]]
            train = [train[i] for i in order[:-n_dev]]
        labels = frozenset(subsets[t])
        overlap = labels & seen
        if overlap:
            raise OntologyError(f"task {t} reuses labels {sorted(overlap)}")
        seen |= labels
        tasks.append(Task(index=t, label_ids=labels, train=train, dev=dev, test=test))

    for t, task in enumerate(tasks):
        for split in (task.train, task.dev, task.test):
            for inst, lab in split:
                if lab != NA and lab not in seen:
                    raise OntologyError(
                        f"label {lab} of instance {inst.instance_id} not in any task subset"
                    )
    return TaskStream(vocab=dataset.vocab, ontology=dataset.ontology, tasks=tasks)


def permute_stream(stream: TaskStream, order: list[int]) -> TaskStream:
    """Reorder tasks; must run before oracle-negative relabeling."""
    if stream.oracle_applied:
        raise ConfigError("permute before applying the oracle-negative setting")
    if sorted(order) != list(range(stream.num_tasks)):
        raise ConfigError(f"bad permutation {order}")
    tasks = [replace(stream.tasks[j], index=i) for i, j in enumerate(order)]
    return TaskStream(vocab=stream.vocab, ontology=stream.ontology, tasks=tasks)


def apply_oracle_negative(stream: TaskStream) -> TaskStream:
    """Relabel train/dev splits for the oracle-negative continual setting.

    In task t's train/dev data, instances carrying a previous task's gold
    type are dropped (keeping them as NA would contradict replay), and
    future-task gold types become NA.  Test splits keep gold labels; the
    time-dependent mapping happens in :func:`cumulative_test_pool`.
    """
    all_labels: set[int] = set()
    for task in stream.tasks:
        all_labels |= task.label_ids
    for task in stream.tasks:
        for split in (task.train, task.dev, task.test):
            for inst, lab in split:
                if lab != NA and lab not in all_labels:
                    raise OntologyError(
                        f"label {lab} of {inst.instance_id} not in any task subset"
                    )

    tasks = []
    past: set[int] = set()
    for task in stream.tasks:
        def relabel(split: list[Labeled]) -> list[Labeled]:
            out = []
            for inst, lab in split:
                if lab == NA or lab in task.label_ids:
                    out.append((inst, lab))
                elif lab in past:
                    continue  # learned type: excluded from the new task's data
                else:
                    out.append((inst, NA))  # future type
            return out

        tasks.append(Task(
            index=task.index,
            label_ids=task.label_ids,
            train=relabel(task.train),
            dev=relabel(task.dev),
            test=list(task.test),
        ))
        past |= task.label_ids
    return TaskStream(
        vocab=stream.vocab, ontology=stream.ontology, tasks=tasks, oracle_applied=True
    )


def cumulative_test_pool(stream: TaskStream, upto: int) -> list[Labeled]:
    """Evaluation pool after training task ``upto``: test splits of tasks
    0..upto with gold types from untrained tasks mapped to NA."""
    live = stream.labels_until(upto)
    pool = []
    for task in stream.tasks[: upto + 1]:
        for inst, lab in task.test:
            pool.append((inst, lab if lab in live else NA))
    return pool


def validate_oracle_negative(stream: TaskStream) -> None:
    """Raise OntologyError if any train/dev split leaks an out-of-task type."""
    for task in stream.tasks:
        for name, split in (("train", task.train), ("dev", task.dev)):
            for inst, lab in split:
                if lab != NA and lab not in task.label_ids:
                    raise OntologyError(
                        f"task {task.index} {name} split contains out-of-task "
                        f"label {lab} (instance {inst.instance_id})"
                    )


# ---------------------------------------------------------------------------
# Synthetic streams
# ---------------------------------------------------------------------------

@dataclass
class SyntheticConfig:
    """Desk-scale generator standing in for frozen-encoder features.

    ``separation`` scales class feature means apart; 0 makes every class
    distribution identical (downstream F1 collapses to chance).  LM-head
    logits give each class's anchor token a raised score (``lm_gap``) and
    its ``lm_linked`` nearest-embedding tokens half of it, so transport
    toward the right class is cheap when class embeddings sit near their
    anchors.

    ``cross_task_fraction`` plants that share of a class's train volume
    into every other task's train split, gold-labeled; under the
    oracle-negative setting those instances surface as NA until (and are
    dropped after) their own task, reproducing the future-type
    suppression real streams exhibit.
    """

    n_tasks: int = 5
    classes_per_task: int = 4
    train_per_class: int = 200
    dev_per_class: int = 50
    test_per_class: int = 100
    feature_dim: int = 32
    embed_dim: int = 32
    vocab_size: int = 300
    n_verbs: int = 120
    na_ratio: float = 3.0
    separation: float = 1.0
    feature_noise: float = 1.0
    na_spread: float = 2.0
    lm_gap: float = 8.0
    lm_linked: int = 4
    lm_noise: float = 1.0
    tokens_per_instance: int = 8
    cross_task_fraction: float = 0.15

    @property
    def n_classes(self) -> int:
        return self.n_tasks * self.classes_per_task

    def validate(self) -> None:
        if min(self.n_tasks, self.classes_per_task, self.train_per_class,
               self.test_per_class, self.feature_dim, self.embed_dim,
               self.vocab_size, self.n_verbs) < 1:
            raise ConfigError("all counts and dimensions must be >= 1")
        if self.n_verbs > self.vocab_size:
            raise ConfigError("n_verbs exceeds vocab_size")
        if self.n_classes > self.n_verbs:
            raise ConfigError(
                f"{self.n_classes} classes need anchors but only "
                f"{self.n_verbs} verb tokens exist"
            )
        if self.na_ratio < 0 or self.separation < 0 or self.lm_linked < 0:
            raise ConfigError("na_ratio, separation, lm_linked must be >= 0")
        if not (0.0 <= self.cross_task_fraction <= 1.0):
            raise ConfigError("cross_task_fraction must lie in [0, 1]")

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticConfig":
        unknown = set(d) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ConfigError(f"unknown synthetic config keys {sorted(unknown)}")
        return cls(**d)


def make_synthetic_dataset(cfg: SyntheticConfig, rng: RngState) -> Dataset:
    cfg.validate()
    g_vocab = rng.child("vocab").generator()
    g_feat = rng.child("features").generator()
    g_lm = rng.child("lm-logits").generator()
    g_tok = rng.child("tokens").generator()

    V, De, D = cfg.vocab_size, cfg.embed_dim, cfg.feature_dim
    emb = g_vocab.standard_normal((V, De))
    emb /= np.linalg.norm(emb, axis=1, keepdims=True)
    tokens = [f"tok{i:04d}" for i in range(V)]
    is_verb = np.zeros(V, dtype=bool)
    is_verb[: cfg.n_verbs] = True
    vocab = Vocabulary(tokens=tokens, is_verb=is_verb, embeddings=emb.astype(np.float32))

    # anchors picked greedily for angular spread among the verbs: distinct
    # event types carry semantically distant trigger verbs, and transport
    # toward class embeddings needs separated columns to carry signal
    verb_emb = emb[: cfg.n_verbs]
    first = int(g_vocab.integers(cfg.n_verbs))
    chosen = [first]
    worst_cos = verb_emb @ verb_emb[first]
    while len(chosen) < cfg.n_classes:
        worst_cos[chosen] = np.inf
        nxt = int(np.argmin(worst_cos))
        chosen.append(nxt)
        worst_cos = np.maximum(worst_cos, verb_emb @ verb_emb[nxt])
    class_names = ["NA"] + [
        f"evt_t{t}_c{j}"
        for t in range(cfg.n_tasks) for j in range(cfg.classes_per_task)
    ]
    anchor_tokens: list[int | None] = [None] + [int(a) for a in chosen]
    class_tasks: list[int | None] = [None] + [
        t for t in range(cfg.n_tasks) for _ in range(cfg.classes_per_task)
    ]
    onto = Ontology(class_names=class_names, anchor_tokens=anchor_tokens,
                    class_tasks=class_tasks)

    # class feature geometry and LM-logit targets
    mu_s = cfg.separation * g_feat.standard_normal((cfg.n_classes, D))
    mu_e = cfg.separation * g_feat.standard_normal((cfg.n_classes, D))
    sims = emb @ emb.T
    linked: list[np.ndarray] = []
    for c in range(cfg.n_classes):
        a = anchor_tokens[c + 1]
        order = np.argsort(-sims[a])
        near = [int(i) for i in order if i != a][: cfg.lm_linked]
        linked.append(np.array(near, dtype=int))

    def lm_row(label: int) -> np.ndarray:
        row = cfg.lm_noise * g_lm.standard_normal(V)
        if label != NA:
            c = label - 1
            row[anchor_tokens[label]] += cfg.lm_gap
            row[linked[c]] += cfg.lm_gap / 2.0
        return row

    # Zipf-like token frequencies: sentences reuse a common head of the
    # candidate vocabulary, as real text does
    tok_weights = 1.0 / (np.arange(V) + 20.0)
    tok_weights /= tok_weights.sum()

    def sample_tokens(label: int) -> np.ndarray:
        ids = g_tok.choice(V, size=cfg.tokens_per_instance, replace=False, p=tok_weights)
        if label != NA:
            ids = np.concatenate([ids, [anchor_tokens[label]]])
        return np.unique(ids).astype(np.uint32)

    def draw_features(lab: int) -> tuple[np.ndarray, np.ndarray]:
        if lab == NA:
            return (cfg.na_spread * g_feat.standard_normal(D),
                    cfg.na_spread * g_feat.standard_normal(D))
        c = lab - 1
        return (mu_s[c] + cfg.feature_noise * g_feat.standard_normal(D),
                mu_e[c] + cfg.feature_noise * g_feat.standard_normal(D))

    def emit(lab: int, iid: str, task: int, split: str) -> FeatureInstance:
        hs, he = draw_features(lab)
        return FeatureInstance(
            instance_id=iid, label_id=lab,
            h_start=hs.astype(np.float32), h_end=he.astype(np.float32),
            lm_logits_start=lm_row(lab).astype(np.float32),
            lm_logits_end=lm_row(lab).astype(np.float32),
            token_ids=sample_tokens(lab), task=task, split=split)

    per_split = {"train": cfg.train_per_class, "dev": cfg.dev_per_class,
                 "test": cfg.test_per_class}
    task_labels = [
        [1 + t * cfg.classes_per_task + j for j in range(cfg.classes_per_task)]
        for t in range(cfg.n_tasks)
    ]
    instances: list[FeatureInstance] = []
    for t in range(cfg.n_tasks):
        for split, per_class in per_split.items():
            if per_class == 0:
                continue
            wanted: list[int] = []
            for lab in task_labels[t]:
                wanted.extend([lab] * per_class)
            n_na = int(round(cfg.na_ratio * len(task_labels[t]) * per_class))
            wanted.extend([NA] * n_na)
            for k, lab in enumerate(wanted):
                instances.append(emit(lab, f"t{t}_{split}_{k:05d}", t, split))
        # triggers of other tasks' types inside this task's train data:
        # the oracle-negative setting sees them as NA (future) or drops
        # them (past)
        n_cross = int(round(cfg.cross_task_fraction * cfg.train_per_class))
        if n_cross:
            k = 0
            for other in range(cfg.n_tasks):
                if other == t:
                    continue
                for lab in task_labels[other]:
                    for _ in range(n_cross):
                        instances.append(emit(lab, f"t{t}_cross_{k:05d}", t, "train"))
                        k += 1

    dataset = Dataset(vocab=vocab, ontology=onto, instances=instances)
    dataset.validate()
    return dataset


def make_synthetic_stream(
    cfg: SyntheticConfig, rng: RngState
) -> tuple[Vocabulary, Ontology, TaskStream]:
    dataset = make_synthetic_dataset(cfg, rng)
    stream = build_stream(dataset)
    return dataset.vocab, dataset.ontology, stream
