"""Tokenization, vocabulary, corpus files and record ingestion.

Tokenization is deliberately plain: lowercase + whitespace split over a
closed vocabulary with an unknown-token fallback. Corpus files are
line-delimited JSON records with a version header line.
"""

import json
import math
import re
from collections import Counter
from dataclasses import dataclass, field

PAD, UNK, BOS, EOS, CLS, SEP = "<pad>", "<unk>", "<bos>", "<eos>", "<cls>", "<sep>"
RESERVED = [PAD, UNK, BOS, EOS, CLS, SEP]

CORPUS_FORMAT = "camgen-corpus"
CORPUS_VERSION = 1


class MalformedRecordError(ValueError):
    pass


def tokenize(text: str) -> list[str]:
    return text.lower().split()


@dataclass
class GenerationExample:
    """One (reference documents, target text) training/eval pair.

    `target` is a token list carrying a sentence-start marker before every
    sentence. `metadata` may hold the corpus tag, per-sentence relation
    labels and reference alignment ids.
    """

    references: list[list[str]]
    target: list[str]
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.references) < 1:
            raise MalformedRecordError("example needs at least one reference")
        if CLS not in self.target:
            raise MalformedRecordError("target carries no sentence-start marker")

    def target_sentences(self) -> list[list[str]]:
        """Split the target at sentence-start markers (marker excluded)."""
        sentences, current = [], None
        for tok in self.target:
            if tok == CLS:
                if current is not None:
                    sentences.append(current)
                current = []
            elif current is not None:
                current.append(tok)
        if current is not None:
            sentences.append(current)
        return sentences

    @staticmethod
    def from_sentences(references, sentences, metadata=None):
        target = []
        for sent in sentences:
            target.append(CLS)
            target.extend(sent)
        return GenerationExample(references, target, metadata or {})


class Vocabulary:
    """Closed token<->id bijection with reserved ids at the lowest indices."""

    def __init__(self, tokens: list[str]):
        self.itos = list(RESERVED)
        seen = set(self.itos)
        for tok in tokens:
            if tok not in seen:
                seen.add(tok)
                self.itos.append(tok)
        self.stoi = {t: i for i, t in enumerate(self.itos)}

    def __len__(self):
        return len(self.itos)

    @property
    def pad_id(self):
        return self.stoi[PAD]

    @property
    def unk_id(self):
        return self.stoi[UNK]

    @property
    def bos_id(self):
        return self.stoi[BOS]

    @property
    def eos_id(self):
        return self.stoi[EOS]

    @property
    def cls_id(self):
        return self.stoi[CLS]

    @property
    def sep_id(self):
        return self.stoi[SEP]

    def encode(self, tokens: list[str]) -> list[int]:
        unk = self.unk_id
        return [self.stoi.get(t, unk) for t in tokens]

    def decode(self, ids: list[int]) -> list[str]:
        return [self.itos[i] for i in ids]

    @classmethod
    def build(cls, examples, max_size: int | None = None):
        counts = Counter()
        for ex in examples:
            for ref in ex.references:
                counts.update(ref)
            counts.update(t for t in ex.target if t not in RESERVED)
        ordered = [t for t, _ in counts.most_common()]
        if max_size is not None:
            ordered = ordered[: max(0, max_size - len(RESERVED))]
        return cls(ordered)

    def save(self, path):
        with open(path, "w") as fh:
            json.dump({"format": "camgen-vocab", "version": 1, "tokens": self.itos},
                      fh)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            blob = json.load(fh)
        if blob.get("format") != "camgen-vocab":
            raise ValueError("not a vocabulary file")
        vocab = cls.__new__(cls)
        vocab.itos = blob["tokens"]
        vocab.stoi = {t: i for i, t in enumerate(vocab.itos)}
        return vocab


_SENTENCE_SPLIT = re.compile(r"(?<=[.!?])\s+")


def ingest(record: dict, total_budget: int = 440, max_sentences: int = 6,
           corpus_tag: str = "") -> GenerationExample:
    """Turn a raw {refs, related_work} record into a GenerationExample.

    Each reference is truncated to floor(total_budget / |D|) tokens; the
    target is split into sentences (capped at `max_sentences`) and a
    sentence-start marker is inserted before each.
    """
    refs_raw = record.get("refs") or []
    if not refs_raw:
        raise MalformedRecordError("record has no references")
    target_text = (record.get("related_work") or "").strip()
    if not target_text:
        raise MalformedRecordError("record has an empty target")
    budget = math.floor(total_budget / len(refs_raw))
    references = [tokenize(r)[:budget] for r in refs_raw]
    sentences = [tokenize(s) for s in _SENTENCE_SPLIT.split(target_text) if s.strip()]
    sentences = sentences[:max_sentences]
    meta = {"source": corpus_tag} if corpus_tag else {}
    if "meta" in record:
        meta.update(record["meta"])
    return GenerationExample.from_sentences(references, sentences, meta)


def source_tokens(example: GenerationExample) -> list[str]:
    """Concatenate references with separator tokens, wrapped in BOS/EOS."""
    out = [BOS]
    for i, ref in enumerate(example.references):
        if i:
            out.append(SEP)
        out.extend(ref)
    out.append(EOS)
    return out


def target_tokens(example: GenerationExample) -> list[str]:
    return [BOS] + list(example.target) + [EOS]


def write_corpus(examples, path):
    with open(path, "w") as fh:
        fh.write(json.dumps({"format": CORPUS_FORMAT, "version": CORPUS_VERSION}) + "\n")
        for ex in examples:
            fh.write(json.dumps({
                "refs": [" ".join(r) for r in ex.references],
                "related_work": " ".join(ex.target),
                "meta": ex.metadata,
            }) + "\n")


def read_corpus(path) -> list[GenerationExample]:
    examples = []
    with open(path) as fh:
        header = json.loads(fh.readline())
        if header.get("format") != CORPUS_FORMAT:
            raise MalformedRecordError(f"{path}: not a corpus file")
        if header.get("version") != CORPUS_VERSION:
            raise MalformedRecordError(f"{path}: unsupported corpus version")
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            refs = [r.split() for r in rec["refs"]]
            target = rec["related_work"].split()
            examples.append(GenerationExample(refs, target, rec.get("meta", {})))
    return examples
