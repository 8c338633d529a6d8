"""Experiment protocols: training runs, scoring, robustness and ablations.

Reports are emitted twice per run: a machine-readable JSON file (sorted
keys, per-example scores, aggregates, relative-outperformance table, config
hash and seed) and a plain-text summary table for humans.
"""

import hashlib
import json
import random
from dataclasses import dataclass, asdict

import torch

from .data import CLS, GenerationExample, Vocabulary, source_tokens, target_tokens
from .model import BeamConfig, CamTransformer, ModelConfig, sgd_train
from .rouge import ror, rouge
from .synthetic import TRANSITION_TOKENS, reorder_perturb

PROTOCOLS = ("standard", "reordered", "migrated")


@dataclass
class AblationSetting:
    use_pi: bool = True
    use_rmp: bool = True
    use_opt: bool = True

    def __post_init__(self):
        if self.use_opt and not (self.use_pi or self.use_rmp):
            raise ValueError("intensity gating alone is the identity setting")

    @property
    def label(self):
        parts = [name for flag, name in
                 [(self.use_pi, "PI"), (self.use_rmp, "RMP"), (self.use_opt, "OPT")]
                 if flag]
        return "+".join(parts) if parts else "baseline"


# ---------------------------------------------------------------------------
# batching and training
# ---------------------------------------------------------------------------

def encode_example(example, vocab, max_src=None, max_tgt=None):
    src = vocab.encode(source_tokens(example))
    tgt = vocab.encode(target_tokens(example))
    if max_src:
        src = src[:max_src]
    if max_tgt:
        tgt = tgt[:max_tgt]
    return src, tgt


def collate(encoded, pad_id):
    src_max = max(len(s) for s, _ in encoded)
    tgt_max = max(len(t) for _, t in encoded)
    src = torch.full((len(encoded), src_max), pad_id, dtype=torch.long)
    tgt = torch.full((len(encoded), tgt_max), pad_id, dtype=torch.long)
    for i, (s, t) in enumerate(encoded):
        src[i, : len(s)] = torch.tensor(s)
        tgt[i, : len(t)] = torch.tensor(t)
    return src, tgt


def make_batches(examples, vocab, batch_size, model_cfg, rng=None,
                 teacher_mask=False):
    order = list(range(len(examples)))
    if rng is not None:
        rng.shuffle(order)
    batches = []
    for start in range(0, len(order), batch_size):
        chunk = [examples[i] for i in order[start: start + batch_size]]
        encoded = [encode_example(ex, vocab, model_cfg.max_source_length,
                                  model_cfg.max_target_length) for ex in chunk]
        src, tgt = collate(encoded, vocab.pad_id)
        if teacher_mask:
            batches.append((src, tgt, tgt == vocab.cls_id))
        else:
            batches.append((src, tgt))
    return batches


def train_model(train_examples, vocab, model_cfg: ModelConfig, epochs=6,
                lr=1e-2, batch_size=32, seed=0, teacher_mask=False,
                log=None):
    """Seeded end-to-end training run; identical inputs give identical weights."""
    torch.manual_seed(seed)
    model = CamTransformer(model_cfg)
    rng = random.Random(seed)
    history = []
    for epoch in range(epochs):
        batches = make_batches(train_examples, vocab, batch_size, model_cfg,
                               rng=rng, teacher_mask=teacher_mask)
        history.extend(sgd_train(model, batches, lr=lr))
        if log:
            log(epoch, history[-1])
    model.eval()
    return model, history


# ---------------------------------------------------------------------------
# generation and scoring
# ---------------------------------------------------------------------------

class Seq2SeqGenerator:
    """Decoding front-end: batched greedy for beam width 1, beam search otherwise."""

    def __init__(self, model, vocab, beam: BeamConfig | None = None, batch_size=64):
        self.model = model
        self.vocab = vocab
        self.beam = beam or BeamConfig()
        self.batch_size = batch_size

    def generate(self, examples) -> list[list[str]]:
        cfg = self.model.config
        outputs = []
        encoded = [encode_example(ex, self.vocab, cfg.max_source_length)[0]
                   for ex in examples]
        if self.beam.beam_width == 1:
            for start in range(0, len(encoded), self.batch_size):
                chunk = encoded[start: start + self.batch_size]
                src = torch.full((len(chunk), max(len(c) for c in chunk)),
                                 self.vocab.pad_id, dtype=torch.long)
                for i, ids in enumerate(chunk):
                    src[i, : len(ids)] = torch.tensor(ids)
                steps = min(self.beam.max_steps, cfg.max_target_length)
                outputs.extend(self.model.greedy_decode(src, max_steps=steps))
        else:
            for ids in encoded:
                outputs.append(self.model.beam_search(torch.tensor(ids), self.beam))
        return [self.vocab.decode(ids) for ids in outputs]


def transition_accuracy(candidate, reference) -> float | None:
    """Fraction of sentence-start transitions reproduced at the right sentence.

    Returns None when the reference carries no transitional slots (e.g. after
    reorder perturbation stripped them).
    """
    def sentence_heads(tokens):
        out = []
        for i, tok in enumerate(tokens):
            if tok == CLS:
                out.append(tokens[i + 1] if i + 1 < len(tokens) else None)
        return out

    ref = sentence_heads(reference)
    slots = [(i, t) for i, t in enumerate(ref) if t in TRANSITION_TOKENS]
    if not slots:
        return None
    cand = sentence_heads(candidate)
    hits = sum(1 for i, t in slots if i < len(cand) and cand[i] == t)
    return hits / len(slots)


def score_generator(generator, examples):
    """Per-example ROUGE (+ transition accuracy) and their means."""
    hyps = generator.generate(examples)
    per_example = []
    for hyp, ex in zip(hyps, examples):
        scores = rouge(hyp, ex.target)
        acc = transition_accuracy(hyp, ex.target)
        row = scores.as_dict()
        row["transition_acc"] = acc
        per_example.append(row)
    agg = {}
    for key in ("rouge1", "rouge2", "rougeL"):
        agg[key] = sum(r[key] for r in per_example) / max(len(per_example), 1)
    accs = [r["transition_acc"] for r in per_example if r["transition_acc"] is not None]
    agg["transition_acc"] = sum(accs) / len(accs) if accs else None
    return per_example, agg


# ---------------------------------------------------------------------------
# protocols
# ---------------------------------------------------------------------------

def _vocab_coverage(examples, vocab):
    total = known = 0
    for ex in examples:
        for tok in source_tokens(ex) + list(ex.target):
            total += 1
            known += tok in vocab.stoi
    return known / max(total, 1)


def run_protocol(cam_generator, baseline_generator, examples, protocol="standard",
                 seed=0, vocab=None, coverage_floor=0.5, extra_meta=None):
    """Score two generators under one robustness protocol and tabulate ROR."""
    if protocol not in PROTOCOLS:
        raise ValueError(f"unknown protocol {protocol!r}")
    warnings = []
    eval_examples = examples
    if protocol == "reordered":
        eval_examples = [reorder_perturb(ex, seed + i) if len(ex.references) >= 2 else ex
                         for i, ex in enumerate(examples)]
    if protocol == "migrated" and vocab is not None:
        coverage = _vocab_coverage(examples, vocab)
        if coverage < coverage_floor:
            warnings.append(f"vocabulary coverage {coverage:.3f} below floor "
                            f"{coverage_floor}")

    results = {}
    for name, gen in (("cam", cam_generator), ("baseline", baseline_generator)):
        per_example, agg = score_generator(gen, eval_examples)
        results[name] = {"per_example": per_example, "aggregate": agg}

    ror_table = {}
    for key in ("rouge1", "rouge2", "rougeL", "transition_acc"):
        base = results["baseline"]["aggregate"].get(key)
        top = results["cam"]["aggregate"].get(key)
        if base is None or top is None or base <= 0:
            ror_table[key] = None
        else:
            ror_table[key] = ror(top, base)

    report = {
        "protocol": protocol,
        "seed": seed,
        "num_examples": len(eval_examples),
        "results": results,
        "ror": ror_table,
        "warnings": warnings,
    }
    if extra_meta:
        report.update(extra_meta)
    report["config_hash"] = hashlib.sha256(
        json.dumps({k: report[k] for k in ("protocol", "seed", "num_examples")},
                   sort_keys=True).encode()).hexdigest()
    return report


def run_ablation(settings, seed, train_examples, eval_examples, vocab,
                 model_kwargs=None, train_kwargs=None, beam=None, log=None):
    """Train one model per stage setting (plus the k=0 baseline) and score each."""
    model_kwargs = dict(model_kwargs or {})
    train_kwargs = dict(train_kwargs or {})
    rows = []
    variants = [("baseline", None)] + [(s.label, s) for s in settings]
    for label, setting in variants:
        kwargs = dict(model_kwargs)
        if setting is None:
            kwargs["num_cams"] = 0
        else:
            kwargs.update(use_pi=setting.use_pi, use_rmp=setting.use_rmp,
                          use_opt=setting.use_opt)
        cfg = ModelConfig.desk(vocab_size=len(vocab), **kwargs)
        model, _ = train_model(train_examples, vocab, cfg, seed=seed, **train_kwargs)
        gen = Seq2SeqGenerator(model, vocab, beam or BeamConfig(beam_width=1))
        _, agg = score_generator(gen, eval_examples)
        rows.append({"setting": label, **{k: agg[k] for k in
                                          ("rouge1", "rouge2", "rougeL",
                                           "transition_acc")}})
        if log:
            log(label, rows[-1])
    return {"seed": seed, "rows": rows}


def placement_sweep(cam_counts, seed, train_examples, eval_examples, vocab,
                    model_kwargs=None, train_kwargs=None, beam=None, log=None):
    """Train one model per intervention-block count and score each."""
    from .model import cam_placement
    model_kwargs = dict(model_kwargs or {})
    train_kwargs = dict(train_kwargs or {})
    rows = []
    for k in cam_counts:
        cfg = ModelConfig.desk(vocab_size=len(vocab), num_cams=k, **model_kwargs)
        model, _ = train_model(train_examples, vocab, cfg, seed=seed, **train_kwargs)
        gen = Seq2SeqGenerator(model, vocab, beam or BeamConfig(beam_width=1))
        _, agg = score_generator(gen, eval_examples)
        rows.append({"num_cams": k,
                     "placement": cam_placement(cfg.num_decoder_layers, k),
                     **{key: agg[key] for key in
                        ("rouge1", "rouge2", "rougeL", "transition_acc")}})
        if log:
            log(k, rows[-1])
    return {"seed": seed, "rows": rows}


# ---------------------------------------------------------------------------
# report files
# ---------------------------------------------------------------------------

def report_bytes(report: dict) -> bytes:
    return json.dumps(report, sort_keys=True, indent=2).encode()


def summary_text(report: dict) -> str:
    lines = []
    if "rows" in report:
        keys = [k for k in report["rows"][0] if k != "placement"]
        lines.append("  ".join(f"{k:>14}" for k in keys))
        for row in report["rows"]:
            cells = []
            for k in keys:
                v = row[k]
                cells.append(f"{v:>14.4f}" if isinstance(v, float) else f"{str(v):>14}")
            lines.append("  ".join(cells))
    elif "results" in report:
        lines.append(f"protocol: {report['protocol']}  examples: "
                     f"{report['num_examples']}")
        lines.append(f"{'model':>10}  {'rouge1':>8}  {'rouge2':>8}  {'rougeL':>8}  "
                     f"{'trans_acc':>9}")
        for name, res in report["results"].items():
            agg = res["aggregate"]
            acc = agg.get("transition_acc")
            acc_cell = f"{acc:9.4f}" if acc is not None else f"{'n/a':>9}"
            lines.append(f"{name:>10}  {agg['rouge1']:8.4f}  {agg['rouge2']:8.4f}  "
                         f"{agg['rougeL']:8.4f}  {acc_cell}")
        lines.append("ROR: " + json.dumps(report["ror"], sort_keys=True))
        for warning in report.get("warnings", []):
            lines.append(f"warning: {warning}")
    return "\n".join(lines) + "\n"


def write_report(report: dict, path_base: str):
    json_path = f"{path_base}.json"
    text_path = f"{path_base}.txt"
    with open(json_path, "wb") as fh:
        fh.write(report_bytes(report))
    with open(text_path, "w") as fh:
        fh.write(summary_text(report))
    return json_path, text_path
