"""Cross-attention capture and heatmap export for generated tokens.

`capture` replays a generated sequence teacher-forced and records the
cross-attention row (head-averaged by default) of the chosen decoder layer
at requested target positions. `render` draws one color-intensity strip per
record over the source tokens, with vertical separators at document
boundaries and the top-5 tokens annotated, and writes the raw weights to a
JSON data file alongside the image.
"""

import json
from dataclasses import dataclass, field

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
import torch

from .data import SEP, source_tokens


@dataclass
class AttentionRecord:
    position: int
    token: str
    weights: list[float]                 # over source positions, sums to 1
    doc_boundaries: list[int]            # source indices of separator tokens
    layer: int
    per_head: list[list[float]] | None = None


def capture(model, vocab, example, generated_tokens, positions, layer=-1,
            per_head=False):
    """Record cross-attention rows for `positions` of a generated sequence."""
    src_ids = vocab.encode(source_tokens(example))
    gen_ids = vocab.encode(generated_tokens)
    tgt_in = torch.tensor([[vocab.bos_id] + gen_ids], dtype=torch.long)
    if positions and (min(positions) < 0 or max(positions) >= tgt_in.shape[1]):
        raise ValueError("requested position outside the generated sequence")
    src = torch.tensor([src_ids], dtype=torch.long)
    model.eval()
    with torch.no_grad():
        logits, attn_maps = model(src, tgt_in, causal_cam=True,
                                  collect_cross_attn=True)
    weights = attn_maps[layer][0]        # (heads, T, S)
    boundaries = [i for i, t in enumerate(src_ids) if t == vocab.sep_id]
    tokens_in = ["<bos>"] + list(generated_tokens)
    records = []
    for pos in positions:
        head_rows = weights[:, pos, :]   # (heads, S)
        mean_row = head_rows.mean(dim=0)
        mean_row = mean_row / mean_row.sum()
        records.append(AttentionRecord(
            position=pos,
            token=tokens_in[pos],
            weights=[float(w) for w in mean_row],
            doc_boundaries=boundaries,
            layer=layer if layer >= 0 else len(attn_maps) + layer,
            per_head=[[float(w) for w in row] for row in head_rows] if per_head
            else None,
        ))
    return records


def render(records, out_path, source_tokens_list=None, dpi=120):
    """Write the heatmap image and its JSON data file; returns both paths."""
    if not records:
        raise ValueError("no attention records to render")
    data_path = str(out_path) + ".json"
    image_path = str(out_path) + ".png"

    payload = {"format": "camgen-attention", "version": 1, "records": []}
    for rec in records:
        top5 = sorted(range(len(rec.weights)), key=lambda i: (-rec.weights[i], i))[:5]
        payload["records"].append({
            "position": rec.position,
            "token": rec.token,
            "layer": rec.layer,
            "weights": rec.weights,
            "doc_boundaries": rec.doc_boundaries,
            "top5_indices": top5,
            "per_head": rec.per_head,
        })
    with open(data_path, "w") as fh:
        json.dump(payload, fh, sort_keys=True)

    n_src = len(records[0].weights)
    fig, axes = plt.subplots(len(records), 1,
                             figsize=(max(6, n_src * 0.28), 1.6 * len(records)),
                             squeeze=False)
    for ax, rec, meta in zip(axes[:, 0], records, payload["records"]):
        row = np.array(rec.weights)[None, :]
        ax.imshow(row, aspect="auto", cmap="Blues", vmin=0.0,
                  vmax=max(rec.weights) or 1.0)
        for b in rec.doc_boundaries:
            ax.axvline(b, color="black", linewidth=1.2)
        for rank, idx in enumerate(meta["top5_indices"], start=1):
            ax.annotate(str(rank), (idx, 0), color="red", ha="center", va="center",
                        fontsize=7)
        ax.set_yticks([])
        ax.set_title(f"token {rec.token!r} @ position {rec.position} "
                     f"(layer {rec.layer})", fontsize=8)
        if source_tokens_list and n_src <= 60:
            ax.set_xticks(range(n_src))
            ax.set_xticklabels(source_tokens_list, rotation=90, fontsize=5)
        else:
            ax.set_xticks([])
    fig.tight_layout()
    fig.savefig(image_path, dpi=dpi)
    plt.close(fig)
    return image_path, data_path


def load_records(data_path):
    with open(data_path) as fh:
        payload = json.load(fh)
    if payload.get("format") != "camgen-attention":
        raise ValueError("not an attention data file")
    return payload
