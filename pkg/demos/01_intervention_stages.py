"""Walk through the three intervention stages on a toy embedding sequence.

Builds a small intervention block, marks two sentence-start rows, and prints
what each stage does to them: the mixture weights of the primitive
intervention, the (zero at init) remapping delta, and the gate coefficients
of the intensity combination. Non-start rows are restored bit-exactly.
"""

import torch

from camgen.cam import CamConfig, CausalInterventionModule

torch.manual_seed(0)

cfg = CamConfig(embed_dim=16, num_sentences=4, window_size=4, vocab_size=32)
module = CausalInterventionModule(cfg).eval()

seq_len = 9
x = torch.randn(seq_len, cfg.embed_dim)
mask = torch.zeros(seq_len, dtype=torch.bool)
mask[0] = mask[4] = True          # two sentence-start rows

with torch.no_grad():
    out, stages = module(x, teacher_mask=mask, collect_stages=True)

print("sequence length:", seq_len, "| start rows:", mask.nonzero().flatten().tolist())
print("output shape:", tuple(out.shape))

restored = torch.equal(out[~mask], x[~mask])
print("non-start rows restored exactly:", restored)

itv_delta = (stages["itv"] - x)[mask].norm(dim=-1)
print("primitive intervention moved start rows by:", [f"{d:.3f}" for d in itv_delta])

rmp_delta = (stages["rmp"] - stages["itv"]).norm()
print("remapping delta at init (zero-initialized output proj):", f"{rmp_delta:.3e}")

with torch.no_grad():
    coeffs = module.gate_coefficients(x, stages["itv"], stages["rmp"])[mask]
for row, c in zip(mask.nonzero().flatten().tolist(), coeffs):
    print(f"gate coefficients at row {row} (ori, itv, rmp):",
          [f"{v:.3f}" for v in c], "sum:", f"{float(c.sum()):.6f}")
