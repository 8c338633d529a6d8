"""Self-contained ROUGE-1/2/L F1 over verbatim token sequences.

No stemming, no stopword removal, no sentence splitting: candidates and
references are compared token for token, with ROUGE-L computed over the
whole sequence. 0/0 is defined as 0 throughout.
"""

from collections import Counter
from dataclasses import dataclass

from .data import PAD


@dataclass
class RougeScores:
    rouge1_f: float
    rouge2_f: float
    rougeL_f: float

    def as_dict(self):
        return {"rouge1": self.rouge1_f, "rouge2": self.rouge2_f,
                "rougeL": self.rougeL_f}


def _f1(precision: float, recall: float) -> float:
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def _ngram_f1(candidate, reference, n):
    cand = [tuple(candidate[i:i + n]) for i in range(len(candidate) - n + 1)]
    ref = [tuple(reference[i:i + n]) for i in range(len(reference) - n + 1)]
    if not cand or not ref:
        return 0.0
    cand_counts, ref_counts = Counter(cand), Counter(ref)
    overlap = sum(min(cnt, ref_counts[g]) for g, cnt in cand_counts.items())
    return _f1(overlap / len(cand), overlap / len(ref))


def lcs_length(a, b) -> int:
    """Classic dynamic-programming longest common subsequence length."""
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, start=1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[-1]))
        prev = cur
    return prev[-1]


def _strip_padding(tokens, pad_token):
    start, end = 0, len(tokens)
    while start < end and tokens[start] == pad_token:
        start += 1
    while end > start and tokens[end - 1] == pad_token:
        end -= 1
    return list(tokens[start:end])


def rouge(candidate, reference, pad_token=PAD) -> RougeScores:
    """ROUGE-1/2/L F1 between two token sequences (leading/trailing pads ignored)."""
    cand = _strip_padding(candidate, pad_token)
    ref = _strip_padding(reference, pad_token)
    if not cand or not ref:
        return RougeScores(0.0, 0.0, 0.0)
    lcs = lcs_length(cand, ref)
    rouge_l = _f1(lcs / len(cand), lcs / len(ref))
    return RougeScores(_ngram_f1(cand, ref, 1), _ngram_f1(cand, ref, 2), rouge_l)


def ror(score_model: float, score_baseline: float) -> float:
    """Relative outperformance rate: (model - baseline) / baseline."""
    if score_baseline <= 0:
        raise ValueError("baseline score must be positive")
    return (score_model - score_baseline) / score_baseline
