"""Command-line entry point.

Subcommands: synth, train, generate, evaluate, ablate, sweep-placement,
perturb, visualize. Every run writes a resolved-config snapshot (flags,
defaults and seed) into its output directory so it can be reproduced
exactly. Exit codes: 0 success, 1 validation error, 2 runtime failure.
"""

import argparse
import json
import os
import sys

from . import checkpoint as ckpt
from .data import Vocabulary, read_corpus, write_corpus
from .model import BeamConfig, CamTransformer, ModelConfig
from .protocols import (AblationSetting, Seq2SeqGenerator, placement_sweep,
                        run_ablation, run_protocol, train_model, write_report)
from .synthetic import SyntheticSpec, generate_synthetic, reorder_perturb

OUT_ROOT_ENV = "CAMGEN_OUT_ROOT"


def _out_dir(args):
    out = args.out
    root = os.environ.get(OUT_ROOT_ENV)
    if root and not os.path.isabs(out):
        out = os.path.join(root, out)
    os.makedirs(out, exist_ok=True)
    return out


def _snapshot(args, out_dir):
    resolved = {k: v for k, v in vars(args).items() if k != "func"}
    with open(os.path.join(out_dir, "config_snapshot.json"), "w") as fh:
        json.dump(resolved, fh, sort_keys=True, indent=2)


def _apply_config_file(args, parser_defaults):
    """Config-file values fill in only options the user left at their default."""
    if not getattr(args, "config", None):
        return args
    with open(args.config) as fh:
        overrides = json.load(fh)
    for key, val in overrides.items():
        key = key.replace("-", "_")
        if not hasattr(args, key):
            raise ValueError(f"unknown config key {key!r}")
        if getattr(args, key) == parser_defaults.get(key):
            setattr(args, key, val)
    return args


def _model_kwargs(args):
    kwargs = {}
    if getattr(args, "preset", "desk") == "paper":
        base = ModelConfig.paper_scale(vocab_size=8)  # vocab patched later
        kwargs.update(embed_dim=base.embed_dim, num_heads=base.num_heads,
                      num_encoder_layers=base.num_encoder_layers,
                      num_decoder_layers=base.num_decoder_layers,
                      ffn_dim=base.ffn_dim, dropout=base.dropout,
                      max_source_length=base.max_source_length,
                      max_target_length=base.max_target_length)
    if getattr(args, "cams", None) is not None:
        kwargs["num_cams"] = args.cams
    return kwargs


def _load_model(path):
    model, meta = ckpt.load(path)
    model.eval()
    vocab_path = os.path.join(os.path.dirname(os.path.abspath(path)), "vocab.json")
    vocab = Vocabulary.load(vocab_path)
    return model, vocab, meta


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_synth(args):
    spec = SyntheticSpec.load(args.spec)
    if args.seed is not None:
        spec.seed = args.seed
    out = _out_dir(args)
    train, test = generate_synthetic(spec)
    write_corpus(train, os.path.join(out, "train.jsonl"))
    write_corpus(test, os.path.join(out, "test.jsonl"))
    args.resolved_spec = json.loads(json.dumps(spec.__dict__))
    _snapshot(args, out)
    print(f"wrote {len(train)} train / {len(test)} test examples to {out}")
    return 0


def cmd_train(args):
    examples = read_corpus(args.train)
    vocab = Vocabulary.build(examples, max_size=args.vocab_size)
    out = _out_dir(args)
    cfg = ModelConfig.desk(vocab_size=len(vocab), **_model_kwargs(args))
    model, history = train_model(
        examples, vocab, cfg, epochs=args.epochs, lr=args.lr,
        batch_size=args.batch_size, seed=args.seed,
        teacher_mask=args.teacher_mask,
        log=lambda e, l: print(f"epoch {e}: loss {l:.4f}"))
    vocab.save(os.path.join(out, "vocab.json"))
    ckpt.save(model, os.path.join(out, "model.ckpt"),
              step=len(history), seed=args.seed)
    with open(os.path.join(out, "loss_history.json"), "w") as fh:
        json.dump(history, fh)
    _snapshot(args, out)
    print(f"checkpoint written to {os.path.join(out, 'model.ckpt')}")
    return 0


def cmd_generate(args):
    model, vocab, _ = _load_model(args.checkpoint)
    examples = read_corpus(args.corpus)
    beam = BeamConfig(beam_width=args.beam, max_steps=args.max_steps,
                      length_norm=args.length_norm)
    gen = Seq2SeqGenerator(model, vocab, beam)
    out = _out_dir(args)
    hyps = gen.generate(examples)
    path = os.path.join(out, "generated.jsonl")
    with open(path, "w") as fh:
        fh.write(json.dumps({"format": "camgen-generated", "version": 1}) + "\n")
        for hyp in hyps:
            fh.write(json.dumps({"tokens": hyp}) + "\n")
    _snapshot(args, out)
    print(f"wrote {len(hyps)} generations to {path}")
    return 0


def cmd_evaluate(args):
    cam_model, vocab, _ = _load_model(args.cam)
    base_model, base_vocab, _ = _load_model(args.baseline)
    examples = read_corpus(args.corpus)
    beam = BeamConfig(beam_width=args.beam, max_steps=args.max_steps,
                      length_norm=args.length_norm)
    report = run_protocol(
        Seq2SeqGenerator(cam_model, vocab, beam),
        Seq2SeqGenerator(base_model, base_vocab, beam),
        examples, protocol=args.protocol, seed=args.seed, vocab=vocab)
    out = _out_dir(args)
    paths = write_report(report, os.path.join(out, f"report_{args.protocol}"))
    _snapshot(args, out)
    print(f"report written to {paths[0]}")
    return 0


def cmd_ablate(args):
    train_examples = read_corpus(args.train)
    eval_examples = read_corpus(args.eval)
    vocab = Vocabulary.build(train_examples, max_size=args.vocab_size)
    settings = [AblationSetting(True, False, False),
                AblationSetting(True, True, False),
                AblationSetting(True, True, True)]
    report = run_ablation(
        settings, args.seed, train_examples, eval_examples, vocab,
        model_kwargs=_model_kwargs(args),
        train_kwargs=dict(epochs=args.epochs, lr=args.lr,
                          batch_size=args.batch_size),
        log=lambda label, row: print(f"{label}: {row}"))
    out = _out_dir(args)
    paths = write_report(report, os.path.join(out, "ablation"))
    _snapshot(args, out)
    print(f"report written to {paths[0]}")
    return 0


def cmd_sweep_placement(args):
    train_examples = read_corpus(args.train)
    eval_examples = read_corpus(args.eval)
    vocab = Vocabulary.build(train_examples, max_size=args.vocab_size)
    counts = [int(x) for x in args.cams.split(",")]
    report = placement_sweep(
        counts, args.seed, train_examples, eval_examples, vocab,
        model_kwargs=_model_kwargs(args),
        train_kwargs=dict(epochs=args.epochs, lr=args.lr,
                          batch_size=args.batch_size),
        log=lambda k, row: print(f"k={k}: {row}"))
    out = _out_dir(args)
    paths = write_report(report, os.path.join(out, "placement_sweep"))
    _snapshot(args, out)
    print(f"report written to {paths[0]}")
    return 0


def cmd_perturb(args):
    examples = read_corpus(args.corpus)
    perturbed = [reorder_perturb(ex, args.seed + i) for i, ex in enumerate(examples)]
    out = _out_dir(args)
    path = os.path.join(out, "perturbed.jsonl")
    write_corpus(perturbed, path)
    _snapshot(args, out)
    print(f"wrote {len(perturbed)} perturbed examples to {path}")
    return 0


def cmd_visualize(args):
    from .viz import capture, render
    model, vocab, _ = _load_model(args.checkpoint)
    examples = read_corpus(args.corpus)
    if not 0 <= args.index < len(examples):
        raise ValueError("example index out of range")
    example = examples[args.index]
    beam = BeamConfig(beam_width=args.beam, max_steps=args.max_steps)
    gen = Seq2SeqGenerator(model, vocab, beam)
    generated = gen.generate([example])[0]
    if args.positions:
        positions = [int(p) for p in args.positions.split(",")]
    else:
        positions = list(range(min(len(generated) + 1, 4)))
    records = capture(model, vocab, example, generated, positions,
                      layer=args.layer, per_head=args.per_head)
    out = _out_dir(args)
    from .data import source_tokens
    image_path, data_path = render(records, os.path.join(out, "attention"),
                                   source_tokens_list=source_tokens(example))
    _snapshot(args, out)
    print(f"wrote {image_path} and {data_path}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(prog="camgen")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed_default=0):
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=seed_default)
        p.add_argument("--config", help="JSON config file; explicit flags win")

    def train_opts(p):
        p.add_argument("--preset", choices=["desk", "paper"], default="desk")
        p.add_argument("--epochs", type=int, default=6)
        p.add_argument("--lr", type=float, default=1e-2)
        p.add_argument("--batch-size", type=int, default=32)
        p.add_argument("--vocab-size", type=int, default=None)

    def beam_opts(p):
        p.add_argument("--beam", type=int, default=4)
        p.add_argument("--max-steps", type=int, default=200)
        p.add_argument("--length-norm", type=float, default=1.0)

    p = sub.add_parser("synth", help="generate a synthetic confounded corpus")
    p.add_argument("--spec", required=True)
    common(p)
    p.set_defaults(func=cmd_synth, seed=None)

    p = sub.add_parser("train", help="train a model on a corpus")
    p.add_argument("--train", required=True)
    p.add_argument("--cams", type=int, default=None)
    p.add_argument("--teacher-mask", action="store_true")
    train_opts(p)
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", help="decode a corpus with a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    beam_opts(p)
    common(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("evaluate", help="score two checkpoints under a protocol")
    p.add_argument("--cam", required=True)
    p.add_argument("--baseline", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--protocol", choices=["standard", "reordered", "migrated"],
                   default="standard")
    beam_opts(p)
    common(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="stage ablation table (baseline/PI/PI+RMP/"
                                      "PI+RMP+OPT)")
    p.add_argument("--train", required=True)
    p.add_argument("--eval", required=True)
    p.add_argument("--cams", type=int, default=None)
    train_opts(p)
    common(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sweep-placement", help="score one model per block count")
    p.add_argument("--train", required=True)
    p.add_argument("--eval", required=True)
    p.add_argument("--cams", default="1,2,4",
                   help="comma-separated block counts")
    train_opts(p)
    common(p)
    p.set_defaults(func=cmd_sweep_placement)

    p = sub.add_parser("perturb", help="reorder-perturb a corpus")
    p.add_argument("--corpus", required=True)
    common(p)
    p.set_defaults(func=cmd_perturb)

    p = sub.add_parser("visualize", help="export cross-attention heatmaps")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--positions", default="")
    p.add_argument("--layer", type=int, default=-1)
    p.add_argument("--per-head", action="store_true")
    beam_opts(p)
    common(p)
    p.set_defaults(func=cmd_visualize)

    return parser


def dispatch(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    defaults = {a.dest: a.default for g in parser._subparsers._group_actions
                for a in g.choices[args.command]._actions}
    try:
        args = _apply_config_file(args, defaults)
        return args.func(args)
    except (ValueError, FileNotFoundError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - runtime failures exit 2
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2


def main():
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
