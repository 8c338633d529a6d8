"""Decode one synthetic example and export a cross-attention heatmap.

Trains a small intervened model briefly, decodes a held-out example, then
captures the last decoder layer's cross-attention rows for the first few
generated positions and renders them (PNG + JSON) under demo_out/.
"""

import os

from camgen.data import Vocabulary, source_tokens
from camgen.model import BeamConfig, ModelConfig
from camgen.protocols import Seq2SeqGenerator, train_model
from camgen.synthetic import SyntheticSpec, generate_synthetic
from camgen.viz import capture, render

spec = SyntheticSpec(num_examples=300, num_test_examples=10,
                     vocab_size=150, seed=1)
train, test = generate_synthetic(spec)
vocab = Vocabulary.build(train, max_size=150)

cfg = ModelConfig.desk(vocab_size=len(vocab), num_cams=2)
model, _ = train_model(train, vocab, cfg, epochs=3, seed=1, teacher_mask=True)

example = test[0]
gen = Seq2SeqGenerator(model, vocab, BeamConfig(beam_width=1, max_steps=24))
generated = gen.generate([example])[0]
print("generated:", " ".join(generated) or "<empty>")

positions = list(range(min(len(generated) + 1, 4)))
records = capture(model, vocab, example, generated, positions)
os.makedirs("demo_out", exist_ok=True)
image_path, data_path = render(records, "demo_out/attention",
                               source_tokens_list=source_tokens(example))
print("wrote", image_path, "and", data_path)
for rec in records:
    top = sorted(range(len(rec.weights)), key=lambda i: -rec.weights[i])[:3]
    toks = source_tokens(example)
    print(f"position {rec.position} ({rec.token!r}) attends most to:",
          [(toks[i], f"{rec.weights[i]:.3f}") for i in top])
