"""Synthetic confounded corpus: sentence position vs. document relation.

Every reference document carries a cue token naming the relation it bears to
the discussion, along with two topic tokens that reappear in its target
sentence; the matching target sentence opens with the transitional token for
that relation. In the training split the relation is, with probability
`confound_strength`, a deterministic function of the sentence position, so
position alone predicts the transition; the shifted test split assigns
relations independently of position, which breaks that shortcut while
leaving the cue-to-transition mechanism intact.
"""

import random
from dataclasses import dataclass, field, asdict

from .data import CLS, GenerationExample, RESERVED

# relation name -> (cue lexicon per mix, transitional token)
RELATIONS = ["contrast", "extend", "parallel", "support", "cause", "illustrate"]
TRANSITIONS = {
    "contrast": "however",
    "extend": "later",
    "parallel": "similarly",
    "support": "indeed",
    "cause": "therefore",
    "illustrate": "example",
}
CUE_LEXICONS = {
    "default": {
        "contrast": "unlike",
        "extend": "building",
        "parallel": "akin",
        "support": "confirming",
        "cause": "driving",
        "illustrate": "instance",
    },
    "alt": {
        "contrast": "opposing",
        "extend": "advancing",
        "parallel": "mirroring",
        "support": "corroborating",
        "cause": "inducing",
        "illustrate": "exemplifying",
    },
}

TRANSITION_TOKENS = frozenset(TRANSITIONS.values())

SPEC_FORMAT = "camgen-synthspec"
SPEC_VERSION = 1


@dataclass
class SyntheticSpec:
    num_examples: int = 2000
    num_test_examples: int = 400
    num_relations: int = 4          # >= 4 so position (s slots) cannot encode relation
    num_refs: int = 3
    confound_strength: float = 0.9  # P(relation determined by sentence position) in train
    vocab_size: int = 300
    min_sentence_len: int = 3
    max_sentence_len: int = 5
    ref_len: int = 8
    lexicon: str = "default"
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.confound_strength <= 1.0:
            raise ValueError("confound_strength must lie in [0, 1]")
        if not 4 <= self.num_relations <= len(RELATIONS):
            raise ValueError(f"num_relations must lie in [4, {len(RELATIONS)}]")
        if self.lexicon not in CUE_LEXICONS:
            raise ValueError(f"unknown lexicon {self.lexicon!r}")
        if self.min_sentence_len > self.max_sentence_len:
            raise ValueError("sentence length bounds out of order")

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(f"{SPEC_FORMAT} {SPEC_VERSION}\n")
            for key, val in asdict(self).items():
                fh.write(f"{key} = {val}\n")

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            header = fh.readline().split()
            if len(header) != 2 or header[0] != SPEC_FORMAT:
                raise ValueError(f"{path}: not a synthetic-spec file")
            if int(header[1]) != SPEC_VERSION:
                raise ValueError(f"{path}: unsupported spec version")
            kwargs = {}
            for line in fh:
                if not line.strip() or line.startswith("#"):
                    continue
                key, _, val = line.partition("=")
                key, val = key.strip(), val.strip()
                anno = cls.__dataclass_fields__[key].type
                if anno is float:
                    kwargs[key] = float(val)
                elif anno is int:
                    kwargs[key] = int(val)
                else:
                    kwargs[key] = val
        return cls(**kwargs)


def _content_words(spec: SyntheticSpec) -> list[str]:
    special = len(RESERVED) + spec.num_relations * 2 + 2
    count = max(20, spec.vocab_size - special)
    return [f"w{idx:03d}" for idx in range(count)]


def _make_example(rng: random.Random, spec: SyntheticSpec, confounded: bool,
                  tag: str) -> GenerationExample:
    cues = CUE_LEXICONS[spec.lexicon]
    relations = RELATIONS[: spec.num_relations]
    words = _content_words(spec)
    refs, sentences, labels = [], [], []
    for pos in range(spec.num_refs):
        if confounded and rng.random() < spec.confound_strength:
            rel = relations[pos % len(relations)]
        else:
            rel = rng.choice(relations)
        labels.append(rel)
        topic = rng.sample(words, 2)
        filler = [rng.choice(words) for _ in range(spec.ref_len - 3)]
        ref = filler + [cues[rel]] + topic
        rng.shuffle(ref)
        refs.append(ref)
        extra = rng.randint(spec.min_sentence_len, spec.max_sentence_len) - 3
        body = topic + [rng.choice(words) for _ in range(max(0, extra))]
        sentences.append([TRANSITIONS[rel]] + body)
    meta = {"source": tag, "relations": labels,
            "alignment": list(range(spec.num_refs))}
    return GenerationExample.from_sentences(refs, sentences, meta)


def generate_synthetic(spec: SyntheticSpec):
    """Build (confounded-train, shifted-test) example lists, reproducible by seed."""
    rng = random.Random(spec.seed)
    train = [_make_example(rng, spec, True, f"synthetic-{spec.lexicon}-train")
             for _ in range(spec.num_examples)]
    test = [_make_example(rng, spec, False, f"synthetic-{spec.lexicon}-test")
            for _ in range(spec.num_test_examples)]
    return train, test


def reorder_perturb(example: GenerationExample, seed: int,
                    transitional_tokens=TRANSITION_TOKENS) -> GenerationExample:
    """Permute references (non-identity) together with their target sentences.

    Transitional tokens are stripped from the permuted target because the new
    ordering invalidates the original inter-sentence relations. With a single
    reference the example is returned unchanged, flagged with a warning.
    """
    n = len(example.references)
    if n < 2:
        out = GenerationExample(example.references, example.target,
                                dict(example.metadata))
        out.metadata["reorder_warning"] = "single reference; nothing to permute"
        return out
    rng = random.Random(seed)
    perm = list(range(n))
    while perm == list(range(n)):
        rng.shuffle(perm)
    refs = [example.references[p] for p in perm]
    sentences = example.target_sentences()
    permuted = [sentences[p] if p < len(sentences) else [] for p in perm]
    cleaned = [[t for t in sent if t not in transitional_tokens] for sent in permuted]
    meta = dict(example.metadata)
    if "relations" in meta:
        meta["relations"] = [meta["relations"][p] for p in perm]
    alignment = meta.get("alignment", list(range(n)))
    meta["alignment"] = [alignment[p] if p < len(alignment) else p for p in perm]
    meta["permutation"] = perm
    return GenerationExample.from_sentences(refs, cleaned, meta)
