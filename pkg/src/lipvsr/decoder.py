"""Hybrid CTC/attention output head.

CTC over the encoder outputs, an autoregressive transformer decoder trained with
teacher forcing, their weighted joint loss, and left-to-right beam search over
the attention decoder.
"""

from __future__ import annotations

import itertools
import math
import string
from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn

from .layers import FeedForward, MultiHeadAttention, sinusoidal_encoding
from .tensor import LayerNorm, log_softmax


class InfeasibleAlignmentError(ValueError):
    """Target cannot be aligned to the given number of frames under CTC rules."""


class Vocabulary:
    """blank, sos, eos, space, a-z, 0-9 (40 tokens); blank is index 0."""

    def __init__(self):
        self.tokens = ["<blank>", "<sos>", "<eos>", " "] + list(string.ascii_lowercase) + list(string.digits)
        self.index = {t: i for i, t in enumerate(self.tokens)}
        self.blank, self.sos, self.eos = 0, 1, 2

    def __len__(self):
        return len(self.tokens)

    def encode(self, text: str) -> list[int]:
        try:
            return [self.index[c] for c in text]
        except KeyError as exc:
            raise ValueError(f"character {exc.args[0]!r} not in vocabulary") from None

    def decode(self, ids: Sequence[int]) -> str:
        out = []
        for i in ids:
            i = int(i)
            if i == self.eos:
                break
            if i in (self.blank, self.sos):
                continue
            out.append(self.tokens[i])
        return "".join(out)


VOCAB = Vocabulary()


# --- CTC ------------------------------------------------------------------

_NEG = -1e30


def ctc_required_frames(target: Sequence[int]) -> int:
    repeats = sum(1 for a, b in zip(target, target[1:]) if a == b)
    return len(target) + repeats


def ctc_loss_batch(logits: torch.Tensor, targets: Sequence[Sequence[int]], blank: int = 0) -> torch.Tensor:
    """Per-sample -log p_CTC(y|x) for ``B×T×V`` logits; returns a length-B tensor.

    Forward recursion over the blank-interleaved target in log space.
    """
    B, T, V = logits.shape
    for b, y in enumerate(targets):
        if ctc_required_frames(y) > T:
            raise InfeasibleAlignmentError(
                f"target of length {len(y)} needs {ctc_required_frames(y)} frames, only {T} available")
    logp = log_softmax(logits, -1)
    L = max((len(y) for y in targets), default=0)
    S = 2 * L + 1
    ext = torch.full((B, S), blank, dtype=torch.long)
    for b, y in enumerate(targets):
        if len(y):
            ext[b, 1:2 * len(y):2] = torch.as_tensor(list(y), dtype=torch.long)
    skip = torch.zeros(B, S, dtype=torch.bool)
    if S > 3:
        skip[:, 3::2] = ext[:, 3::2] != ext[:, 1:-2:2]
    emit = logp.gather(2, ext.unsqueeze(1).expand(B, T, S))
    neg = torch.full((B, S), _NEG, dtype=logp.dtype)
    start = torch.zeros(B, S, dtype=torch.bool)
    start[:, 0] = True
    if S > 1:
        start[:, 1] = True
    alpha = torch.where(start, emit[:, 0], neg)
    pad1 = torch.full((B, 1), _NEG, dtype=logp.dtype)
    pad2 = torch.full((B, 2), _NEG, dtype=logp.dtype)
    for t in range(1, T):
        from_prev = torch.cat([pad1, alpha[:, :-1]], dim=1)
        from_skip = torch.where(skip, torch.cat([pad2, alpha[:, :-2]], dim=1)[:, :S], neg)
        alpha = torch.logsumexp(torch.stack([alpha, from_prev, from_skip]), dim=0) + emit[:, t]
    losses = []
    for b, y in enumerate(targets):
        last = 2 * len(y)
        ends = alpha[b, last - 1:last + 1] if len(y) else alpha[b, :1]
        losses.append(-torch.logsumexp(ends, dim=0))
    return torch.stack(losses)


def ctc_loss(logits: torch.Tensor, target: Sequence[int], blank: int = 0) -> torch.Tensor:
    """-log p_CTC(target | x) for ``T×V`` logits."""
    return ctc_loss_batch(logits.unsqueeze(0), [list(target)], blank)[0]


@lru_cache(maxsize=64)
def _collapsed_paths(T: int, V: int, blank: int) -> tuple[np.ndarray, tuple[tuple[int, ...], ...]]:
    paths = np.array(list(itertools.product(range(V), repeat=T)), dtype=np.int64).reshape(-1, T)
    collapsed = []
    for p in paths:
        out, prev = [], None
        for s in p:
            if s != prev and s != blank:
                out.append(int(s))
            prev = s
        collapsed.append(tuple(out))
    return paths, tuple(collapsed)


def ctc_brute_force(logits, target: Sequence[int], blank: int = 0, max_paths: int = 10 ** 6) -> float:
    """-log of the summed probability of every frame labelling that collapses to ``target``.

    Collapse merges repeats, then drops blanks.  Returns ``inf`` when no path does.
    """
    lg = np.asarray(logits.detach().cpu() if isinstance(logits, torch.Tensor) else logits, dtype=np.float64)
    T, V = lg.shape
    if V ** T > max_paths:
        raise ValueError(f"{V}^{T} paths exceeds the enumeration guard of {max_paths}")
    z = lg - lg.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    paths, collapsed = _collapsed_paths(T, V, blank)
    target = tuple(int(t) for t in target)
    hit = np.array([c == target for c in collapsed])
    if not hit.any():
        return math.inf
    scores = logp[np.arange(T), paths[hit]].sum(axis=1)
    m = scores.max()
    return float(-(m + np.log(np.exp(scores - m).sum())))


# --- attention decoder -----------------------------------------------------

@dataclass
class DecoderConfig:
    layers: int = 3
    model_dim: int = 256
    ff_dim: int = 1024
    heads: int = 8


class DecoderBlock(nn.Module):
    def __init__(self, cfg: DecoderConfig):
        super().__init__()
        d = cfg.model_dim
        self.self_attn = MultiHeadAttention(d, cfg.heads)
        self.norm1 = LayerNorm(d)
        self.cross_attn = MultiHeadAttention(d, cfg.heads)
        self.norm2 = LayerNorm(d)
        self.ff = FeedForward(d, cfg.ff_dim)
        self.norm3 = LayerNorm(d)

    def forward(self, x, memory, causal):
        a, _ = self.self_attn(x, mask=causal)
        x = self.norm1(x + a)
        c, cross = self.cross_attn(x, memory)
        x = self.norm2(x + c)
        return self.norm3(x + self.ff(x)), cross


def causal_mask(n: int) -> torch.Tensor:
    return torch.ones(n, n, dtype=torch.bool).tril()


class TransformerDecoder(nn.Module):
    def __init__(self, cfg: DecoderConfig, vocab_size: int):
        super().__init__()
        self.cfg = cfg
        self.embed = nn.Embedding(vocab_size, cfg.model_dim)
        self.blocks = nn.ModuleList([DecoderBlock(cfg) for _ in range(cfg.layers)])
        self.out = nn.Linear(cfg.model_dim, vocab_size)

    def forward(self, prefix: torch.Tensor, memory: torch.Tensor, return_attention: bool = False):
        """``prefix`` ``B×N`` token ids (starting with sos), ``memory`` ``B×T×d`` -> ``B×N×V`` logits."""
        N = prefix.shape[-1]
        x = self.embed(prefix) + sinusoidal_encoding(N, self.cfg.model_dim, memory.dtype)
        mask = causal_mask(N)
        maps = []
        for block in self.blocks:
            x, cross = block(x, memory, mask)
            maps.append(cross)
        logits = self.out(x)
        return (logits, maps) if return_attention else logits


def teacher_forcing(targets: Sequence[Sequence[int]], vocab: Vocabulary = VOCAB, ignore: int = -1):
    """Decoder inputs ``[sos] + y`` and outputs ``y + [eos]``, right-padded to a common length."""
    n = max(len(y) for y in targets) + 1
    dec_in = torch.full((len(targets), n), vocab.eos, dtype=torch.long)
    dec_out = torch.full((len(targets), n), ignore, dtype=torch.long)
    for b, y in enumerate(targets):
        y = list(y)
        dec_in[b, : len(y) + 1] = torch.tensor([vocab.sos] + y)
        dec_out[b, : len(y) + 1] = torch.tensor(y + [vocab.eos])
    return dec_in, dec_out


def ce_loss(logits: torch.Tensor, target: torch.Tensor, ignore: int = -1) -> torch.Tensor:
    """Mean token-level negative log-likelihood; positions equal to ``ignore`` are skipped."""
    if logits.shape[:-1] != target.shape:
        raise ValueError(f"logits {tuple(logits.shape)} do not match targets {tuple(target.shape)}")
    logp = log_softmax(logits, -1)
    keep = target != ignore
    picked = logp.gather(-1, target.clamp(min=0).unsqueeze(-1)).squeeze(-1)
    return -(picked * keep).sum() / keep.sum()


def vsr_loss(l_ctc, l_ce, lam: float = 0.1):
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"CTC weight must lie in [0, 1], got {lam}")
    return lam * l_ctc + (1 - lam) * l_ce


@torch.no_grad()
def beam_search(decoder: TransformerDecoder, memory: torch.Tensor, width: int = 10,
                max_len: int = 40, vocab: Vocabulary = VOCAB) -> tuple[list[int], float]:
    """Left-to-right beam search over the attention decoder for one ``T×d`` memory.

    Candidates are ranked by cumulative log-probability; the returned hypothesis
    is the finished one with the best log-probability divided by its length
    (eos included).  Ties go to the earlier beam, then the lower token index.
    Returns (token ids without sos/eos, cumulative log-probability).
    """
    if width < 1:
        raise ValueError("beam width must be >= 1")
    memory = memory.unsqueeze(0) if memory.dim() == 2 else memory
    banned = torch.tensor([vocab.blank, vocab.sos])
    beams: list[tuple[list[int], float]] = [([vocab.sos], 0.0)]
    finished: list[tuple[list[int], float]] = []
    for step in range(max_len):
        prefix = torch.tensor([b[0] for b in beams], dtype=torch.long)
        logits = decoder(prefix, memory.expand(len(beams), -1, -1))[:, -1]
        logp = log_softmax(logits.to(torch.float64), -1)
        logp[:, banned] = -math.inf
        base = torch.tensor([b[1] for b in beams], dtype=torch.float64)
        total = (base.unsqueeze(1) + logp).reshape(-1)
        # stable sort keeps (beam, token) order among equal scores
        order = torch.sort(-total, stable=True).indices[:width]
        V = logp.shape[1]
        new_beams = []
        for flat in order.tolist():
            score = total[flat].item()
            if score == -math.inf:
                continue
            b, tok = divmod(flat, V)
            seq = beams[b][0] + [tok]
            if tok == vocab.eos or step == max_len - 1:
                finished.append((seq, score))
            else:
                new_beams.append((seq, score))
        beams = new_beams
        if not beams:
            break
    best_seq, best_score, best_norm = None, -math.inf, -math.inf
    for seq, score in finished:
        norm = score / (len(seq) - 1)
        if norm > best_norm:
            best_seq, best_score, best_norm = seq, score, norm
    tokens = [t for t in best_seq[1:] if t != vocab.eos]
    return tokens, best_score


def greedy_decode(decoder: TransformerDecoder, memory: torch.Tensor, max_len: int = 40,
                  vocab: Vocabulary = VOCAB) -> list[int]:
    """Argmax decoding for a batch ``B×T×d``; returns per-sample token ids."""
    with torch.no_grad():
        B = memory.shape[0]
        prefix = torch.full((B, 1), vocab.sos, dtype=torch.long)
        done = torch.zeros(B, dtype=torch.bool)
        for _ in range(max_len):
            logits = decoder(prefix, memory)[:, -1].clone()
            logits[:, [vocab.blank, vocab.sos]] = -math.inf
            nxt = logits.argmax(-1)
            nxt = torch.where(done, torch.full_like(nxt, vocab.eos), nxt)
            prefix = torch.cat([prefix, nxt.unsqueeze(1)], dim=1)
            done |= nxt == vocab.eos
            if done.all():
                break
    out = []
    for row in prefix[:, 1:].tolist():
        out.append(row[: row.index(vocab.eos)] if vocab.eos in row else row)
    return out
