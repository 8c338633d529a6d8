"""Compact encoder-decoder transformer with intervention blocks in the decoder.

Pre-norm layers, sinusoidal positions, tied input/output embeddings. The
intervention blocks sit after selected decoder layers; the last one always
sits after the final layer, just before the output vocabulary projection,
which is the same (shared) projection the blocks use to predict
sentence-start positions.
"""

import math
from dataclasses import dataclass, field, asdict

import torch
import torch.nn as nn
import torch.nn.functional as F

from .cam import CamConfig, CausalInterventionModule, ScaledLinear


@dataclass
class ModelConfig:
    vocab_size: int
    embed_dim: int = 64
    num_encoder_layers: int = 2
    num_decoder_layers: int = 4
    num_heads: int = 4
    ffn_dim: int = 128
    num_cams: int = 2
    max_source_length: int = 128
    max_target_length: int = 64
    dropout: float = 0.0
    num_sentences: int = 6
    window_size: int = 4
    cls_token_id: int = 4
    pad_token_id: int = 0
    bos_token_id: int = 2
    eos_token_id: int = 3
    use_pi: bool = True
    use_rmp: bool = True
    use_opt: bool = True
    gradient_gain: float = 4.0  # ScaledLinear gain; effective SGD step x gain^2

    def __post_init__(self):
        if not (0 <= self.num_cams <= self.num_decoder_layers):
            raise ValueError("num_cams must lie in [0, num_decoder_layers]")
        if self.embed_dim % self.num_heads != 0:
            raise ValueError("embed_dim must be divisible by num_heads")

    @classmethod
    def desk(cls, vocab_size, **over):
        """Small CPU-friendly preset used throughout the test suite."""
        return cls(vocab_size=vocab_size, **over)

    @classmethod
    def paper_scale(cls, vocab_size, **over):
        """Full-scale preset (documentation fidelity; not exercised in CI)."""
        base = dict(embed_dim=768, num_encoder_layers=12, num_decoder_layers=12,
                    num_heads=12, ffn_dim=3072, num_cams=4, dropout=0.1,
                    max_source_length=512, max_target_length=200)
        base.update(over)
        return cls(vocab_size=vocab_size, **base)


@dataclass
class BeamConfig:
    beam_width: int = 4
    max_steps: int = 200
    length_norm: float = 1.0

    def __post_init__(self):
        if self.beam_width < 1 or self.max_steps < 1:
            raise ValueError("beam_width and max_steps must be >= 1")


def cam_placement(num_layers: int, num_cams: int) -> list[int]:
    """Decoder layer indices (1-based) after which an intervention block sits.

    Blocks are spread evenly as round(m * L / k) with the last one always at
    the final layer; duplicates collapse when k does not divide L.
    """
    if num_cams < 0 or num_cams > num_layers:
        raise ValueError(f"num_cams {num_cams} outside [0, {num_layers}]")
    if num_cams == 0:
        return []
    raw = [int(math.floor(m * num_layers / num_cams + 0.5)) for m in range(1, num_cams + 1)]
    raw[-1] = num_layers
    return sorted(set(raw))


def sinusoidal_positions(max_len: int, dim: int) -> torch.Tensor:
    pe = torch.zeros(max_len, dim)
    pos = torch.arange(max_len, dtype=torch.float).unsqueeze(1)
    div = torch.exp(torch.arange(0, dim, 2).float() * (-math.log(10000.0) / dim))
    pe[:, 0::2] = torch.sin(pos * div)
    pe[:, 1::2] = torch.cos(pos * div)
    return pe


class MultiHeadAttention(nn.Module):
    def __init__(self, dim, heads, dropout=0.0, gain=1.0):
        super().__init__()
        self.heads = heads
        self.head_dim = dim // heads
        self.q = ScaledLinear(dim, dim, gain=gain)
        self.k = ScaledLinear(dim, dim, gain=gain)
        self.v = ScaledLinear(dim, dim, gain=gain)
        self.o = ScaledLinear(dim, dim, gain=gain)
        self.drop = nn.Dropout(dropout)

    def forward(self, query, memory, attn_mask=None, need_weights=False):
        # attn_mask: broadcastable to (B, 1, Q, K), True = blocked
        bsz, qlen, dim = query.shape
        klen = memory.shape[1]
        q = self.q(query).view(bsz, qlen, self.heads, self.head_dim).transpose(1, 2)
        k = self.k(memory).view(bsz, klen, self.heads, self.head_dim).transpose(1, 2)
        v = self.v(memory).view(bsz, klen, self.heads, self.head_dim).transpose(1, 2)
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        if attn_mask is not None:
            scores = scores.masked_fill(attn_mask, float("-inf"))
        weights = F.softmax(scores, dim=-1)
        ctx = self.drop(weights) @ v
        out = self.o(ctx.transpose(1, 2).contiguous().view(bsz, qlen, dim))
        return (out, weights) if need_weights else (out, None)


class FeedForward(nn.Module):
    def __init__(self, dim, hidden, dropout=0.0, gain=1.0):
        super().__init__()
        self.net = nn.Sequential(ScaledLinear(dim, hidden, gain=gain), nn.ReLU(),
                                 nn.Dropout(dropout), ScaledLinear(hidden, dim, gain=gain))

    def forward(self, x):
        return self.net(x)


class EncoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        g = cfg.gradient_gain
        self.attn = MultiHeadAttention(cfg.embed_dim, cfg.num_heads, cfg.dropout, g)
        self.ffn = FeedForward(cfg.embed_dim, cfg.ffn_dim, cfg.dropout, g)
        self.norm1 = nn.LayerNorm(cfg.embed_dim)
        self.norm2 = nn.LayerNorm(cfg.embed_dim)
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, x, pad_mask):
        h = self.norm1(x)
        a, _ = self.attn(h, h, attn_mask=pad_mask)
        x = x + self.drop(a)
        x = x + self.drop(self.ffn(self.norm2(x)))
        return x


class DecoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        g = cfg.gradient_gain
        self.self_attn = MultiHeadAttention(cfg.embed_dim, cfg.num_heads, cfg.dropout, g)
        self.cross_attn = MultiHeadAttention(cfg.embed_dim, cfg.num_heads, cfg.dropout, g)
        self.ffn = FeedForward(cfg.embed_dim, cfg.ffn_dim, cfg.dropout, g)
        self.norm1 = nn.LayerNorm(cfg.embed_dim)
        self.norm2 = nn.LayerNorm(cfg.embed_dim)
        self.norm3 = nn.LayerNorm(cfg.embed_dim)
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, x, memory, self_mask, cross_mask, need_weights=False):
        h = self.norm1(x)
        a, _ = self.self_attn(h, h, attn_mask=self_mask)
        x = x + self.drop(a)
        c, w = self.cross_attn(self.norm2(x), memory, attn_mask=cross_mask,
                               need_weights=need_weights)
        x = x + self.drop(c)
        x = x + self.drop(self.ffn(self.norm3(x)))
        return x, w


class CamTransformer(nn.Module):
    """Encoder-decoder generator with optional intervention blocks."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        d = config.embed_dim
        self.embed = nn.Embedding(config.vocab_size, d, padding_idx=config.pad_token_id)
        max_len = max(config.max_source_length, config.max_target_length) + 8
        self.register_buffer("pos_enc", sinusoidal_positions(max_len, d))
        self.drop = nn.Dropout(config.dropout)
        self.encoder = nn.ModuleList(EncoderLayer(config)
                                     for _ in range(config.num_encoder_layers))
        self.decoder = nn.ModuleList(DecoderLayer(config)
                                     for _ in range(config.num_decoder_layers))
        self.enc_norm = nn.LayerNorm(d)
        self.dec_norm = nn.LayerNorm(d)
        self.out_proj = nn.Linear(d, config.vocab_size, bias=False)
        self.out_proj.weight = self.embed.weight  # tied; also the mask projection
        nn.init.normal_(self.embed.weight, std=d ** -0.5)
        with torch.no_grad():
            self.embed.weight[config.pad_token_id].zero_()

        self.placements = cam_placement(config.num_decoder_layers, config.num_cams)
        cam_cfg = CamConfig(embed_dim=d, num_sentences=config.num_sentences,
                            window_size=config.window_size, vocab_size=config.vocab_size,
                            cls_token_id=config.cls_token_id,
                            remap_heads=config.num_heads,
                            gain=config.gradient_gain)
        self.cams = nn.ModuleDict({
            str(p): CausalInterventionModule(cam_cfg, vocab_projection=self.out_proj,
                                             use_pi=config.use_pi,
                                             use_rmp=config.use_rmp,
                                             use_opt=config.use_opt)
            for p in self.placements})

    # ---- masks -----------------------------------------------------------
    def _pad_attn_mask(self, tokens):
        return (tokens == self.config.pad_token_id).view(tokens.shape[0], 1, 1, -1)

    def _causal_mask(self, length, device):
        return torch.triu(torch.ones(length, length, dtype=torch.bool, device=device),
                          diagonal=1).view(1, 1, length, length)

    def _check_tokens(self, tokens):
        if tokens.numel() and int(tokens.max()) >= self.config.vocab_size:
            raise ValueError("token id out of vocabulary range")

    # ---- forward ---------------------------------------------------------
    def encode(self, src):
        self._check_tokens(src)
        d = self.config.embed_dim
        x = self.embed(src) * math.sqrt(d) + self.pos_enc[: src.shape[1]]
        x = self.drop(x)
        pad_mask = self._pad_attn_mask(src)
        for layer in self.encoder:
            x = layer(x, pad_mask)
        return self.enc_norm(x), pad_mask

    def decode(self, tgt_in, memory, src_pad_mask, teacher_start_mask=None,
               causal_cam=False, collect_cross_attn=False):
        self._check_tokens(tgt_in)
        bsz, tlen = tgt_in.shape
        d = self.config.embed_dim
        x = self.embed(tgt_in) * math.sqrt(d) + self.pos_enc[:tlen]
        x = self.drop(x)
        self_mask = self._causal_mask(tlen, tgt_in.device) | self._pad_attn_mask(tgt_in)
        lengths = (tgt_in != self.config.pad_token_id).sum(dim=1)
        attn_maps = []
        for idx, layer in enumerate(self.decoder, start=1):
            x, w = layer(x, memory, self_mask, src_pad_mask,
                         need_weights=collect_cross_attn)
            if collect_cross_attn:
                attn_maps.append(w)
            cam = self.cams[str(idx)] if str(idx) in self.cams else None
            if cam is not None:
                was_causal = cam.config.causal_window
                cam.config.causal_window = causal_cam or was_causal
                x = cam(x, teacher_mask=teacher_start_mask, lengths=lengths)
                cam.config.causal_window = was_causal
        x = self.dec_norm(x)
        logits = self.out_proj(x)
        return (logits, attn_maps) if collect_cross_attn else logits

    def forward(self, src, tgt_in, **kw):
        memory, src_pad_mask = self.encode(src)
        return self.decode(tgt_in, memory, src_pad_mask, **kw)

    def forward_train(self, src, tgt, teacher_start_mask=None):
        """Teacher-forced mean token cross-entropy over non-pad target positions."""
        tgt_in, labels = tgt[:, :-1], tgt[:, 1:]
        mask_in = None
        if teacher_start_mask is not None:
            mask_in = teacher_start_mask[:, :-1]
        logits = self(src, tgt_in, teacher_start_mask=mask_in)
        return F.cross_entropy(logits.reshape(-1, self.config.vocab_size),
                               labels.reshape(-1),
                               ignore_index=self.config.pad_token_id)

    # ---- decoding --------------------------------------------------------
    @torch.no_grad()
    def greedy_decode(self, src, max_steps=200):
        """Batched greedy decoding; returns a list of token-id lists (no BOS/EOS)."""
        cfg = self.config
        memory, src_pad_mask = self.encode(src)
        bsz = src.shape[0]
        device = src.device
        tokens = torch.full((bsz, 1), cfg.bos_token_id, dtype=torch.long, device=device)
        finished = torch.zeros(bsz, dtype=torch.bool, device=device)
        for _ in range(max_steps):
            # generated ids are known, so sentence starts need no argmax lookup
            start_mask = tokens == cfg.cls_token_id
            logits = self.decode(tokens, memory, src_pad_mask,
                                 teacher_start_mask=start_mask, causal_cam=True)
            nxt = logits[:, -1].argmax(dim=-1)
            nxt = torch.where(finished, torch.full_like(nxt, cfg.pad_token_id), nxt)
            tokens = torch.cat([tokens, nxt.unsqueeze(1)], dim=1)
            finished = finished | (nxt == cfg.eos_token_id)
            if finished.all():
                break
        out = []
        for row in tokens[:, 1:].tolist():
            seq = []
            for t in row:
                if t == cfg.eos_token_id or t == cfg.pad_token_id:
                    break
                seq.append(t)
            out.append(seq)
        return out

    @torch.no_grad()
    def beam_search(self, src, beam: BeamConfig) -> list[int]:
        """Length-normalized beam search over a single source sequence."""
        cfg = self.config
        if src.dim() == 1:
            src = src.unsqueeze(0)
        memory, src_pad_mask = self.encode(src)
        device = src.device
        beams = [([cfg.bos_token_id], 0.0)]
        done = []
        for _ in range(beam.max_steps):
            candidates = []
            prefixes = torch.tensor([b[0] for b in beams], dtype=torch.long, device=device)
            mem = memory.expand(len(beams), -1, -1)
            pmask = src_pad_mask.expand(len(beams), -1, -1, -1)
            start_mask = prefixes == cfg.cls_token_id
            logits = self.decode(prefixes, mem, pmask,
                                 teacher_start_mask=start_mask, causal_cam=True)
            logprobs = F.log_softmax(logits[:, -1], dim=-1)
            for (seq, score), lp in zip(beams, logprobs):
                top = torch.topk(lp, beam.beam_width)
                for t, s in zip(top.indices.tolist(), top.values.tolist()):
                    candidates.append((seq + [t], score + s))
            candidates.sort(key=lambda c: (-c[1], c[0]))
            beams = []
            for seq, score in candidates:
                if seq[-1] == cfg.eos_token_id:
                    done.append((seq, score))
                else:
                    beams.append((seq, score))
                if len(beams) == beam.beam_width:
                    break
            if not beams:
                break
        done.extend(beams)

        def norm(item):
            seq, score = item
            n = max(len(seq) - 1, 1)
            return score / (n ** beam.length_norm)

        best = max(done, key=lambda it: (norm(it), it[0]))
        seq = best[0][1:]
        if seq and seq[-1] == cfg.eos_token_id:
            seq = seq[:-1]
        return seq


def sgd_train(model, batches, steps=None, lr=1e-2, teacher_masks=None,
              callback=None):
    """Plain SGD training over an iterable of (src, tgt) batches.

    `batches` may be a list (cycled when `steps` exceeds its length) or a
    generator. Returns the per-step loss history.
    """
    opt = torch.optim.SGD(model.parameters(), lr=lr)
    history = []
    if steps is None:
        stream = iter(batches)
    else:
        def cycle():
            i = 0
            while i < steps:
                for b in batches:
                    if i >= steps:
                        return
                    yield b
                    i += 1
        stream = cycle()
    for bi, batch in enumerate(stream):
        src, tgt = batch[0], batch[1]
        tmask = batch[2] if len(batch) > 2 else None
        model.train()
        opt.zero_grad()
        loss = model.forward_train(src, tgt, teacher_start_mask=tmask)
        loss.backward()
        opt.step()
        history.append(loss.item())
        if callback is not None:
            callback(bi, history[-1])
    return history
