"""Encoder-decoder text generation with a causal intervention block.

The decoder carries intervention blocks that break the shortcut between
sentence position and transitional wording, plus a synthetic-corpus lab to
verify the robustness benefit under distribution shift.
"""

from .cam import (CamConfig, CausalInterventionModule, EmbeddingSequence,
                  WindowAttention)
from .model import BeamConfig, CamTransformer, ModelConfig, cam_placement
from .data import GenerationExample, Vocabulary, ingest, read_corpus, write_corpus
from .synthetic import SyntheticSpec, generate_synthetic, reorder_perturb
from .rouge import RougeScores, ror, rouge
from .protocols import (AblationSetting, Seq2SeqGenerator, placement_sweep,
                        run_ablation, run_protocol, train_model)

__version__ = "0.1.0"
