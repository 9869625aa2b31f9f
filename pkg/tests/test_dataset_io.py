import json

import numpy as np
import pytest

from ledot.dataset_io import (
    NA,
    Dataset,
    FeatureInstance,
    Ontology,
    SyntheticConfig,
    Vocabulary,
    apply_oracle_negative,
    build_stream,
    cumulative_test_pool,
    load_dataset,
    make_synthetic_dataset,
    make_synthetic_stream,
    permute_stream,
    read_feature_file,
    validate_oracle_negative,
    write_feature_file,
)
from ledot.errors import ConfigError, FormatError, OntologyError
from ledot.numerics import RngState

SMALL = SyntheticConfig(
    n_tasks=3, classes_per_task=2, train_per_class=12, dev_per_class=4,
    test_per_class=6, feature_dim=5, embed_dim=6, vocab_size=30, n_verbs=12,
    na_ratio=1.0, separation=2.0, cross_task_fraction=0.0,
)


@pytest.fixture()
def small_dataset():
    return make_synthetic_dataset(SMALL, RngState(17).child("dataset"))


def datasets_equal(a: Dataset, b: Dataset) -> bool:
    if a.vocab.tokens != b.vocab.tokens:
        return False
    if not np.array_equal(a.vocab.is_verb, b.vocab.is_verb):
        return False
    if not np.array_equal(a.vocab.embeddings, b.vocab.embeddings):
        return False
    if a.ontology.class_names != b.ontology.class_names:
        return False
    if a.ontology.anchor_tokens != b.ontology.anchor_tokens:
        return False
    if len(a.instances) != len(b.instances):
        return False
    for x, y in zip(a.instances, b.instances):
        if (x.instance_id, x.label_id, x.task, x.split) != (
                y.instance_id, y.label_id, y.task, y.split):
            return False
        for fld in ("h_start", "h_end", "lm_logits_start", "lm_logits_end", "token_ids"):
            if not np.array_equal(getattr(x, fld), getattr(y, fld)):
                return False
    return True


class TestFeatureFile:
    def test_round_trip(self, small_dataset, tmp_path):
        write_feature_file(small_dataset, tmp_path / "ds")
        back = load_dataset(tmp_path / "ds")
        assert datasets_equal(small_dataset, back)

    def test_write_is_deterministic(self, small_dataset, tmp_path):
        for sub in ("a", "b"):
            (tmp_path / sub).mkdir()
            write_feature_file(small_dataset, tmp_path / sub / "ds")
        assert (tmp_path / "a/ds.manifest.json").read_bytes() == \
            (tmp_path / "b/ds.manifest.json").read_bytes()
        assert (tmp_path / "a/ds.tensors.bin").read_bytes() == \
            (tmp_path / "b/ds.tensors.bin").read_bytes()

    def test_empty_instance_list(self, small_dataset, tmp_path):
        empty = Dataset(vocab=small_dataset.vocab, ontology=small_dataset.ontology,
                        instances=[])
        write_feature_file(empty, tmp_path / "e")
        back = load_dataset(tmp_path / "e")
        assert back.instances == []
        assert back.vocab.tokens == empty.vocab.tokens

    def test_dimension_mismatch_rejected(self, small_dataset, tmp_path):
        write_feature_file(small_dataset, tmp_path / "ds")
        manifest = json.loads((tmp_path / "ds.manifest.json").read_text())
        manifest["V_cand"] = manifest["V_cand"] - 1
        manifest["tokens"] = manifest["tokens"][:-1]
        (tmp_path / "ds.manifest.json").write_text(json.dumps(manifest))
        with pytest.raises(FormatError) as err:
            read_feature_file(tmp_path / "ds")
        assert err.value.code == "dimension-mismatch"

    def test_malformed_header_rejected(self, small_dataset, tmp_path):
        write_feature_file(small_dataset, tmp_path / "ds")
        (tmp_path / "ds.manifest.json").write_text("{not json")
        with pytest.raises(FormatError) as err:
            read_feature_file(tmp_path / "ds")
        assert err.value.code == "malformed-header"

    def test_truncated_blob_rejected(self, small_dataset, tmp_path):
        write_feature_file(small_dataset, tmp_path / "ds")
        blob = (tmp_path / "ds.tensors.bin").read_bytes()
        (tmp_path / "ds.tensors.bin").write_bytes(blob[: len(blob) // 2])
        with pytest.raises(FormatError) as err:
            read_feature_file(tmp_path / "ds")
        assert err.value.code in ("truncated-blob", "dimension-mismatch")

    def test_non_finite_payload_rejected(self, small_dataset, tmp_path):
        write_feature_file(small_dataset, tmp_path / "ds")
        manifest = json.loads((tmp_path / "ds.manifest.json").read_text())
        blob = bytearray((tmp_path / "ds.tensors.bin").read_bytes())
        # poison one float inside the first instance's h_start
        off = manifest["sections"]["instances"]
        blob[off:off + 4] = np.array([np.nan], dtype="<f4").tobytes()
        (tmp_path / "ds.tensors.bin").write_bytes(bytes(blob))
        with pytest.raises(FormatError) as err:
            read_feature_file(tmp_path / "ds")
        assert err.value.code == "non-finite-payload"


class TestSyntheticGenerator:
    def test_counts_and_disjoint_labels(self, small_dataset):
        stream = build_stream(small_dataset)
        assert stream.num_tasks == 3
        all_labels = [lab for t in stream.tasks for lab in t.label_ids]
        assert len(all_labels) == len(set(all_labels)) == 6
        for task in stream.tasks:
            non_na = [1 for _, lab in task.train if lab != NA]
            assert len(non_na) == 2 * 12

    def test_identical_seed_identical_bytes(self, tmp_path):
        for name in ("x", "y"):
            ds = make_synthetic_dataset(SMALL, RngState(5).child("dataset"))
            write_feature_file(ds, tmp_path / name)
        assert (tmp_path / "x.tensors.bin").read_bytes() == \
            (tmp_path / "y.tensors.bin").read_bytes()

    def test_validated_instances(self, small_dataset):
        small_dataset.validate()
        got = len(small_dataset.instances)
        per_task = 2 * (12 + 4 + 6)          # class instances
        na = 2 * 12 + 2 * 4 + 2 * 6          # na_ratio 1.0
        assert got == 3 * (per_task + na)

    def test_inconsistent_config_rejected(self):
        cfg = SyntheticConfig(n_tasks=5, classes_per_task=4, n_verbs=10, vocab_size=40)
        with pytest.raises(ConfigError):
            cfg.validate()

    def test_make_synthetic_stream_surface(self):
        vocab, onto, stream = make_synthetic_stream(SMALL, RngState(2))
        assert vocab.size == 30
        assert onto.num_classes == 7
        assert stream.num_tasks == 3


class TestOracleNegative:
    def test_relabeling_rules(self, small_dataset):
        stream = build_stream(small_dataset)
        y1 = sorted(stream.tasks[0].label_ids)
        y2 = sorted(stream.tasks[1].label_ids)
        y4 = sorted(stream.tasks[2].label_ids)
        # plant: a task-1-labeled and a future-labeled instance in task 2 train
        past_inst = stream.tasks[0].train[0][0]
        future_inst = stream.tasks[2].train[0][0]
        stream.tasks[1].train.append((past_inst, y1[0]))
        stream.tasks[1].train.append((future_inst, y4[0]))
        before = [(inst.instance_id, lab) for inst, lab in stream.tasks[1].train]

        fixed = apply_oracle_negative(stream)
        after = fixed.tasks[1].train
        ids_after = [inst.instance_id for inst, _ in after]
        # previous-task instance dropped
        assert past_inst.instance_id not in ids_after
        # future-task instance relabeled NA
        got = [lab for inst, lab in after if inst.instance_id == future_inst.instance_id]
        assert got == [NA]
        # own-task instances unchanged
        own = {i for i, lab in before if lab in y2}
        assert all((inst.instance_id, lab) in before
                   for inst, lab in after if lab != NA and inst.instance_id in own)
        validate_oracle_negative(fixed)

    def test_unknown_label_rejected(self, small_dataset):
        stream = build_stream(small_dataset)
        rogue = stream.tasks[0].train[0][0]
        stream.tasks[0].train.append((rogue, 99))
        with pytest.raises((OntologyError, IndexError)):
            apply_oracle_negative(stream)

    def test_planted_violation_rejected(self, small_dataset):
        stream = apply_oracle_negative(build_stream(small_dataset))
        foreign = sorted(stream.tasks[1].label_ids)[0]
        stream.tasks[0].train.append((stream.tasks[0].train[0][0], foreign))
        with pytest.raises(OntologyError):
            validate_oracle_negative(stream)

    def test_cumulative_pool_future_labels_na(self, small_dataset):
        stream = apply_oracle_negative(build_stream(small_dataset))
        live = stream.labels_until(0)
        pool = cumulative_test_pool(stream, 0)
        assert pool, "task-1 test pool must not be empty"
        assert all(lab == NA or lab in live for _, lab in pool)
        # the same instances recover their gold labels once their task is seen
        full = cumulative_test_pool(stream, stream.num_tasks - 1)
        assert {lab for _, lab in full} > {lab for _, lab in pool}

    def test_no_out_of_task_train_labels(self, small_dataset):
        stream = apply_oracle_negative(build_stream(small_dataset))
        for task in stream.tasks:
            for _, lab in task.train:
                assert lab == NA or lab in task.label_ids

    def test_cross_task_instances_relabeled(self):
        from dataclasses import replace
        cfg = replace(SMALL, cross_task_fraction=0.25)
        dataset = make_synthetic_dataset(cfg, RngState(11).child("dataset"))
        stream = build_stream(dataset)
        # planted gold types from other tasks appear in raw train splits
        n_foreign = sum(
            1 for task in stream.tasks for _, lab in task.train
            if lab != NA and lab not in task.label_ids)
        assert n_foreign > 0
        fixed = apply_oracle_negative(stream)
        validate_oracle_negative(fixed)
        # future types became NA, past types were dropped
        past: set[int] = set()
        for task, raw in zip(fixed.tasks, stream.tasks):
            future = {lab for _, lab in raw.train
                      if lab != NA and lab not in task.label_ids and lab not in past}
            if future:
                na_ids = {inst.instance_id for inst, lab in task.train if lab == NA}
                planted = [inst.instance_id for inst, lab in raw.train if lab in future]
                assert set(planted) <= na_ids
            past |= task.label_ids

    def test_permute_stream(self, small_dataset):
        stream = build_stream(small_dataset)
        perm = permute_stream(stream, [2, 0, 1])
        assert perm.tasks[0].label_ids == stream.tasks[2].label_ids
        assert [t.index for t in perm.tasks] == [0, 1, 2]
        with pytest.raises(ConfigError):
            permute_stream(stream, [0, 1])


class TestBuildStreamDevFallback:
    def test_dev_carved_from_train(self):
        vocab = Vocabulary(
            tokens=["a", "b"], is_verb=np.array([True, False]),
            embeddings=np.ones((2, 2), dtype=np.float32))
        onto = Ontology(class_names=["NA", "evt"], anchor_tokens=[None, 0])
        instances = [
            FeatureInstance(
                instance_id=f"i{k}", label_id=1 if k % 2 else NA,
                h_start=np.ones(2, dtype=np.float32),
                h_end=np.ones(2, dtype=np.float32),
                lm_logits_start=np.zeros(2, dtype=np.float32),
                lm_logits_end=np.zeros(2, dtype=np.float32),
                token_ids=np.array([0], dtype=np.uint32),
                task=0, split="train")
            for k in range(20)
        ]
        stream = build_stream(Dataset(vocab=vocab, ontology=onto, instances=instances))
        assert len(stream.tasks[0].dev) == 2
        assert len(stream.tasks[0].train) == 18
