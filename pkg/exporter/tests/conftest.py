import json
from pathlib import Path

import pytest
import torch
from tokenizers import Tokenizer
from tokenizers.models import WordPiece
from tokenizers.normalizers import BertNormalizer
from tokenizers.pre_tokenizers import BertPreTokenizer
from tokenizers.processors import BertProcessing
from transformers import BertConfig, BertForMaskedLM, PreTrainedTokenizerFast

SPECIALS = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"]
WORDS = [
    "the", "a", "an", "army", "will", "attack", "city", "meeting", "began",
    "fire", "damaged", "ship", "sailed", "troops", "marched", "talks",
    "started", "burned", "warehouse", "into", "harbor", "old", "was", "by",
    "held", "leaders", "yesterday", "large", "transport", "conflict",
    "movement", "start", "burn", "sail", "march", "meet",
]
VERBS = ["attack", "began", "damaged", "sailed", "marched", "started",
         "burned", "held", "burn", "sail", "march", "meet", "start"]

# five-sentence fixture: four train, one test, single task, all
# single-token spans annotated (gold label or NA)
SENTENCES = [
    (["the", "army", "will", "attack", "the", "city"],
     {3: "attack"}, "train"),
    (["the", "meeting", "began", "yesterday"],
     {2: "meet"}, "train"),
    (["a", "large", "fire", "damaged", "the", "warehouse"],
     {3: "burn"}, "train"),
    (["the", "ship", "sailed", "into", "the", "harbor"],
     {2: "transport"}, "train"),
    (["troops", "marched", "into", "the", "old", "city"],
     {1: "transport"}, "test"),
]


def _fixture_lines():
    lines = []
    for tokens, gold, split in SENTENCES:
        spans = [
            {"start": i, "end": i, "label": gold.get(i, "NA")}
            for i in range(len(tokens))
        ]
        lines.append(json.dumps(
            {"tokens": tokens, "spans": spans, "split": split, "task": 0}))
    return lines


@pytest.fixture(scope="session")
def fixture_corpus(tmp_path_factory) -> Path:
    path = tmp_path_factory.mktemp("corpus") / "fixture.jsonl"
    path.write_text("\n".join(_fixture_lines()) + "\n", encoding="utf-8")
    return path


@pytest.fixture(scope="session")
def verb_list(tmp_path_factory) -> Path:
    path = tmp_path_factory.mktemp("verbs") / "verbs.txt"
    path.write_text("\n".join(VERBS) + "\n", encoding="utf-8")
    return path


@pytest.fixture(scope="session")
def tiny_model_dir(tmp_path_factory) -> Path:
    """Randomly initialized cased-BERT-shaped masked LM, saved locally."""
    out = tmp_path_factory.mktemp("model")
    vocab = {w: i for i, w in enumerate(SPECIALS + WORDS)}
    tk = Tokenizer(WordPiece(vocab, unk_token="[UNK]"))
    tk.normalizer = BertNormalizer(lowercase=True)
    tk.pre_tokenizer = BertPreTokenizer()
    tk.post_processor = BertProcessing(
        sep=("[SEP]", vocab["[SEP]"]), cls=("[CLS]", vocab["[CLS]"]))
    tokenizer = PreTrainedTokenizerFast(
        tokenizer_object=tk, unk_token="[UNK]", pad_token="[PAD]",
        cls_token="[CLS]", sep_token="[SEP]", mask_token="[MASK]")
    config = BertConfig(
        vocab_size=len(vocab), hidden_size=32, num_hidden_layers=2,
        num_attention_heads=2, intermediate_size=64,
        max_position_embeddings=64)
    torch.manual_seed(1234)
    model = BertForMaskedLM(config)
    model.save_pretrained(out)
    tokenizer.save_pretrained(out)
    return out
