"""Causal intervention block for decoder embedding sequences.

The block removes the shortcut between sentence position and transitional
wording at sentence-start tokens. It runs three stages over an embedding
sequence of shape (seq_len, embed_dim):

  1. primitive intervention: mixes order-enhanced embeddings weighted by a
     predicted distribution over sentence slots (the backdoor sum),
  2. context-aware remapping: windowed multi-head attention that renews only
     each window's center embedding,
  3. optimal intensity learning: softmax gates over the original, intervened
     and remapped streams.

Only positions whose vocabulary argmax decodes to the sentence-start token
are altered; all other positions are restored exactly.
"""

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

STAGES = ("ori", "odr", "itv", "rmp", "opm")


class ScaledLinear(nn.Linear):
    """Linear layer with a fixed output gain and 1/gain-scaled parameters.

    Function-identical to nn.Linear at initialization, but plain SGD moves the
    effective weights gain^2 times faster, which lets the small models train
    at the default learning rate without momentum or warmup.
    """

    def __init__(self, in_features, out_features, bias=True, gain=1.0):
        super().__init__(in_features, out_features, bias=bias)
        self.gain = gain
        if gain != 1.0:
            with torch.no_grad():
                self.weight /= gain
                if bias:
                    self.bias /= gain

    def forward(self, x):
        out = super().forward(x)
        return out if self.gain == 1.0 else out * self.gain


@dataclass
class CamConfig:
    embed_dim: int
    num_sentences: int = 6
    window_size: int = 4          # n_w; window covers n_w + 1 tokens
    vocab_size: int = 32
    cls_token_id: int = 4
    remap_heads: int = 2
    causal_window: bool = False   # clip remap windows to the prefix (decoding)
    gain: float = 1.0             # ScaledLinear gain for the learned submodules

    def __post_init__(self):
        if self.embed_dim <= 0 or self.num_sentences <= 0:
            raise ValueError("embed_dim and num_sentences must be positive")
        if self.window_size < 2 or self.window_size % 2 != 0:
            raise ValueError("window_size must be even and >= 2")
        if self.embed_dim % self.remap_heads != 0:
            raise ValueError("embed_dim must be divisible by remap_heads")
        if not (0 <= self.cls_token_id < self.vocab_size):
            raise ValueError("cls_token_id must be a valid vocabulary index")


@dataclass
class EmbeddingSequence:
    """Embedding matrix plus the processing stage it belongs to."""

    values: torch.Tensor
    stage: str = "ori"

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}")
        if not torch.isfinite(self.values).all():
            raise ValueError("embedding values must be finite")

    def advance(self, stage: str, values: torch.Tensor) -> "EmbeddingSequence":
        """Move to a later stage; transitions must follow ori->odr->itv->rmp->opm."""
        if STAGES.index(stage) <= STAGES.index(self.stage):
            raise ValueError(f"illegal stage transition {self.stage} -> {stage}")
        return EmbeddingSequence(values, stage)


def make_order_vector(j: int, dim: int, num_sentences: int | None = None,
                      dtype=torch.float32) -> torch.Tensor:
    """Constant vector log10(j+1) encoding the j-th sentence slot (1-based)."""
    if j < 1 or (num_sentences is not None and j > num_sentences):
        raise ValueError(f"sentence index {j} out of range")
    return torch.full((dim,), math.log10(j + 1), dtype=dtype)


def order_vectors(num_sentences: int, dim: int, dtype=torch.float32) -> torch.Tensor:
    """Stack of all s order vectors, shape (s, dim)."""
    return torch.stack(
        [make_order_vector(j, dim, num_sentences, dtype) for j in range(1, num_sentences + 1)]
    )


def order_enhance(e_ori: torch.Tensor, o_j: torch.Tensor, projection: nn.Linear) -> torch.Tensor:
    """Project concat(e_ori, o_j) back to embed_dim: the order-enhanced embedding."""
    if e_ori.shape[-1] != o_j.shape[-1]:
        raise ValueError("embedding and order vector dimensions differ")
    return projection(torch.cat([e_ori, o_j.expand_as(e_ori)], dim=-1))


def position_probabilities(prefix: torch.Tensor, head: nn.Linear) -> torch.Tensor:
    """Distribution over sentence slots from the sum of already-computed prefix rows.

    `prefix` holds rows 1..i-1 of the intervened sequence (possibly empty).
    """
    dim = head.in_features
    if prefix.numel() == 0:
        pooled = torch.zeros(dim, dtype=head.weight.dtype, device=head.weight.device)
    else:
        pooled = prefix.sum(dim=-2)
    return F.softmax(head(F.relu(pooled)), dim=-1)


def intensity_gates(e_ori: torch.Tensor, gate_weights: torch.Tensor) -> torch.Tensor:
    """Softmax-normalized gates over (ori, itv, rmp), all read from e_ori.

    gate_weights has shape (3, embed_dim); returns (..., 3) coefficients.
    """
    g = torch.sigmoid(e_ori @ gate_weights.t())
    return F.softmax(g, dim=-1)


def optimal_combine(e_ori: torch.Tensor, e_itv: torch.Tensor, e_rmp: torch.Tensor,
                    coeffs: torch.Tensor) -> torch.Tensor:
    """Convex combination of the three streams with gate coefficients (..., 3)."""
    return (coeffs[..., 0:1] * e_ori + coeffs[..., 1:2] * e_itv + coeffs[..., 2:3] * e_rmp)


def argmax_lowest(logits: torch.Tensor) -> torch.Tensor:
    """Argmax over the last dim with ties broken toward the lowest index."""
    top = logits.max(dim=-1, keepdim=True).values
    n = logits.shape[-1]
    idx = torch.arange(n, device=logits.device).expand_as(logits)
    candidates = torch.where(logits == top, idx, torch.full_like(idx, n))
    return candidates.min(dim=-1).values


def sentence_start_mask(e_ori: torch.Tensor, vocab_projection: nn.Module,
                        cls_token_id: int) -> torch.Tensor:
    """Boolean flags marking positions whose vocabulary argmax is the start token."""
    pred = argmax_lowest(vocab_projection(e_ori))
    return pred == cls_token_id


def fuse_mask(e_opm: torch.Tensor, e_ori: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Keep intervened rows where mask is set, restore original rows elsewhere."""
    return torch.where(mask.unsqueeze(-1).to(torch.bool), e_opm, e_ori)


class WindowAttention(nn.Module):
    """Multi-head attention over a sliding window that renews only the center token.

    The renewed center is `center + W_o(attention)`; W_o starts at zero so the
    block is the identity at initialization. Sequences shorter than the window
    fall back to one attention pass over all available positions.
    """

    def __init__(self, embed_dim: int, num_heads: int, window_size: int,
                 gain: float = 1.0):
        super().__init__()
        if embed_dim % num_heads != 0:
            raise ValueError("embed_dim must be divisible by num_heads")
        self.embed_dim = embed_dim
        self.num_heads = num_heads
        self.window_size = window_size
        self.head_dim = embed_dim // num_heads
        self.q_proj = ScaledLinear(embed_dim, embed_dim, gain=gain)
        self.k_proj = ScaledLinear(embed_dim, embed_dim, gain=gain)
        self.v_proj = ScaledLinear(embed_dim, embed_dim, gain=gain)
        self.out_proj = ScaledLinear(embed_dim, embed_dim, gain=gain)
        nn.init.zeros_(self.out_proj.weight)
        nn.init.zeros_(self.out_proj.bias)

    def _attend(self, queries: torch.Tensor, keys: torch.Tensor,
                key_mask: torch.Tensor | None = None) -> torch.Tensor:
        # queries: (..., Q, d), keys: (..., K, d); key_mask True = masked out
        q = self._split(self.q_proj(queries))
        k = self._split(self.k_proj(keys))
        v = self._split(self.v_proj(keys))
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        if key_mask is not None:
            # fully-masked rows belong to ineligible centers; unmask them to
            # keep softmax finite (their output is discarded downstream)
            key_mask = key_mask & ~key_mask.all(dim=-1, keepdim=True)
            scores = scores.masked_fill(
                key_mask.unsqueeze(-2).unsqueeze(-2), float("-inf"))
        ctx = F.softmax(scores, dim=-1) @ v
        return self.out_proj(self._merge(ctx))

    def _split(self, x):
        *lead, n, _ = x.shape
        return x.view(*lead, n, self.num_heads, self.head_dim).transpose(-3, -2)

    def _merge(self, x):
        x = x.transpose(-3, -2).contiguous()
        *lead, n, _, _ = x.shape
        return x.view(*lead, n, self.embed_dim)

    def forward(self, x: torch.Tensor, causal: bool = False,
                lengths: torch.Tensor | None = None) -> torch.Tensor:
        """x: (B, M, d). `lengths` gives true lengths of padded sequences."""
        bsz, seq_len, _ = x.shape
        if lengths is None:
            lengths = torch.full((bsz,), seq_len, dtype=torch.long, device=x.device)
        half = self.window_size // 2

        fallback = self._fallback(x, causal, lengths)
        if seq_len < self.window_size + 1:
            return fallback

        out = x.clone()
        if causal:
            # window [c - half, c]: past-plus-self context only
            windows = x.unfold(1, half + 1, 1).transpose(-2, -1)  # (B, C, half+1, d)
            centers = torch.arange(half, seq_len, device=x.device)
        else:
            windows = x.unfold(1, self.window_size + 1, 1).transpose(-2, -1)
            centers = torch.arange(half, seq_len - half, device=x.device)
        center_emb = x[:, centers].unsqueeze(2)                   # (B, C, 1, d)
        win_pos = centers.view(1, -1, 1) + torch.arange(
            windows.shape[2], device=x.device).view(1, 1, -1) - half
        key_mask = win_pos >= lengths.view(-1, 1, 1)              # pads excluded
        renewed = center_emb + self._attend(center_emb, windows, key_mask)
        renewed = renewed.squeeze(2)

        # a center is eligible only when its full window fits inside the true length
        if causal:
            eligible = centers.view(1, -1) < lengths.view(-1, 1)
        else:
            eligible = (centers.view(1, -1) + half) < lengths.view(-1, 1)
        out[:, centers] = torch.where(eligible.unsqueeze(-1), renewed, x[:, centers])

        # sequences whose true length is shorter than one window use the fallback
        short = lengths < self.window_size + 1
        if short.any():
            out = torch.where(short.view(-1, 1, 1), fallback, out)
        return out

    def _fallback(self, x: torch.Tensor, causal: bool, lengths: torch.Tensor) -> torch.Tensor:
        bsz, seq_len, _ = x.shape
        pos = torch.arange(seq_len, device=x.device)
        key_mask = pos.view(1, 1, -1) >= lengths.view(-1, 1, 1)
        if causal:
            key_mask = key_mask | (pos.view(1, 1, -1) > pos.view(1, -1, 1))
        key_mask = key_mask.expand(bsz, seq_len, seq_len)
        # queries attend across the whole (unpadded) sequence
        q = self._split(self.q_proj(x))
        k = self._split(self.k_proj(x))
        v = self._split(self.v_proj(x))
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        scores = scores.masked_fill(key_mask.unsqueeze(1), float("-inf"))
        ctx = F.softmax(scores, dim=-1) @ v
        return x + self.out_proj(self._merge(ctx))


class CausalInterventionModule(nn.Module):
    """The full intervention block: mask, intervene, remap, gate, restore.

    `vocab_projection` is normally the backbone's output projection (shared
    weights); a private linear layer is created when none is supplied.
    Stage toggles (`use_pi`, `use_rmp`, `use_opt`) support ablations.
    """

    def __init__(self, config: CamConfig, vocab_projection: nn.Module | None = None,
                 use_pi: bool = True, use_rmp: bool = True, use_opt: bool = True,
                 gates_read_stage_inputs: bool = False):
        super().__init__()
        if use_opt and not (use_pi or use_rmp):
            raise ValueError("intensity gating over a single stream is the identity; "
                             "enable use_pi and/or use_rmp")
        self.config = config
        self.use_pi = use_pi
        self.use_rmp = use_rmp
        self.use_opt = use_opt
        self.gates_read_stage_inputs = gates_read_stage_inputs
        d = config.embed_dim
        self.order_proj = ScaledLinear(2 * d, d, gain=config.gain)
        self.pos_head = ScaledLinear(d, config.num_sentences, gain=config.gain)
        self.remap = WindowAttention(d, config.remap_heads, config.window_size,
                                     gain=config.gain)
        self.gate_weights = nn.Parameter(torch.empty(3, d))
        nn.init.normal_(self.gate_weights, std=1.0 / (math.sqrt(d) * config.gain))
        self.vocab_proj = vocab_projection if vocab_projection is not None \
            else nn.Linear(d, config.vocab_size)
        self.register_buffer("order_table",
                             order_vectors(config.num_sentences, d), persistent=False)

    def sentence_start_mask(self, e_ori: torch.Tensor,
                            lengths: torch.Tensor | None = None) -> torch.Tensor:
        mask = sentence_start_mask(e_ori, self.vocab_proj, self.config.cls_token_id)
        if lengths is not None:
            pos = torch.arange(e_ori.shape[-2], device=e_ori.device)
            mask = mask & (pos.view(1, -1) < lengths.view(-1, 1))
        return mask

    def order_enhanced(self, e_ori: torch.Tensor) -> torch.Tensor:
        """Order-enhanced embeddings for every slot: (..., M, s, d)."""
        s = self.config.num_sentences
        table = self.order_table.to(e_ori.dtype)
        e_exp = e_ori.unsqueeze(-2).expand(*e_ori.shape[:-1], s, e_ori.shape[-1])
        o_exp = table.expand_as(e_exp)
        return self.order_proj(torch.cat([e_exp, o_exp], dim=-1))

    def primitive_intervene(self, e_ori: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        """Left-to-right backdoor mixture at masked positions; copies elsewhere."""
        if mask.shape != e_ori.shape[:-1]:
            raise ValueError("mask shape must match sequence shape")
        if not mask.any():
            return e_ori
        e_odr = self.order_enhanced(e_ori)                     # (B, M, s, d)
        seq_len = e_ori.shape[-2]
        prefix = torch.zeros_like(e_ori[..., 0, :])
        rows = []
        for t in range(seq_len):
            h = F.softmax(self.pos_head(F.relu(prefix)), dim=-1)
            mixed = (e_odr[..., t, :, :] * h.unsqueeze(-1)).sum(dim=-2)
            row = torch.where(mask[..., t].unsqueeze(-1), mixed, e_ori[..., t, :])
            rows.append(row)
            prefix = prefix + row
        return torch.stack(rows, dim=-2)

    def gate_coefficients(self, e_ori: torch.Tensor, e_itv: torch.Tensor,
                          e_rmp: torch.Tensor) -> torch.Tensor:
        weights = self.gate_weights * self.config.gain
        if not self.gates_read_stage_inputs:
            return intensity_gates(e_ori, weights)
        # experimental variant: each gate reads its own stream
        g = torch.sigmoid(torch.stack([
            e_ori @ weights[0], e_itv @ weights[1], e_rmp @ weights[2]], dim=-1))
        return F.softmax(g, dim=-1)

    def forward(self, e_ori: torch.Tensor, teacher_mask: torch.Tensor | None = None,
                lengths: torch.Tensor | None = None,
                collect_stages: bool = False):
        """Apply the intervention; output shape equals input shape.

        Accepts (M, d) or (B, M, d). `teacher_mask` substitutes ground-truth
        sentence-start flags for the predicted mask (training aid, off by
        default). `lengths` marks true lengths of padded batch rows.
        """
        squeeze = e_ori.dim() == 2
        x = e_ori.unsqueeze(0) if squeeze else e_ori
        if teacher_mask is not None and teacher_mask.dim() == 1:
            teacher_mask = teacher_mask.unsqueeze(0)
        mask = teacher_mask.to(torch.bool) if teacher_mask is not None \
            else self.sentence_start_mask(x, lengths)

        e_itv = self.primitive_intervene(x, mask) if self.use_pi else x
        e_rmp = self.remap(e_itv, causal=self.config.causal_window,
                           lengths=lengths) if self.use_rmp else e_itv
        if self.use_opt:
            coeffs = self.gate_coefficients(x, e_itv, e_rmp)
            e_opm = optimal_combine(x, e_itv, e_rmp, coeffs)
        else:
            e_opm = e_rmp
        out = fuse_mask(e_opm, x, mask)
        if squeeze:
            out = out.squeeze(0)
            mask = mask.squeeze(0)
            e_itv, e_rmp, e_opm = (t.squeeze(0) for t in (e_itv, e_rmp, e_opm))
        if collect_stages:
            stages = {"ori": e_ori, "itv": e_itv, "rmp": e_rmp, "opm": e_opm,
                      "mask": mask}
            return out, stages
        return out
