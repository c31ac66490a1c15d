"""Speaker identification branch (training only)."""

from __future__ import annotations

import torch
import torch.nn as nn

from .tensor import log_softmax, softmax


class SpeakerHead(nn.Module):
    """GAP over time -> BN -> ReLU -> FC gives the identity feature; a second FC classifies."""

    def __init__(self, in_dim: int, id_dim: int, num_speakers: int):
        super().__init__()
        self.bn = nn.BatchNorm1d(in_dim)
        self.fc = nn.Linear(in_dim, id_dim)
        self.classifier = nn.Linear(id_dim, num_speakers)

    def forward(self, h0: torch.Tensor):
        """``B×T×d`` front-end features -> (h_id ``B×id_dim``, class logits ``B×C``)."""
        pooled = h0.mean(dim=1)
        h_id = self.fc(torch.relu(self.bn(pooled)))
        return h_id, self.classifier(h_id)


def speaker_forward(head: SpeakerHead, h0: torch.Tensor):
    """(h_id, class probabilities) for a ``B×T×d`` batch."""
    h_id, logits = head(h0)
    return h_id, softmax(logits, axis=-1)


def speaker_loss(probs: torch.Tensor, speaker, eps: float = 0.0) -> torch.Tensor:
    """Mean of -log p_c for the true class ``c``."""
    speaker = torch.as_tensor(speaker, dtype=torch.long).reshape(-1)
    probs = probs.reshape(len(speaker), -1)
    if speaker.min() < 0 or speaker.max() >= probs.shape[-1]:
        raise ValueError(f"speaker id out of range [0, {probs.shape[-1]})")
    return -torch.log(probs.gather(1, speaker.unsqueeze(1)) + eps).mean()


def speaker_loss_from_logits(logits: torch.Tensor, speaker: torch.Tensor) -> torch.Tensor:
    """Numerically safe variant used in training."""
    if speaker.min() < 0 or speaker.max() >= logits.shape[-1]:
        raise ValueError(f"speaker id out of range [0, {logits.shape[-1]})")
    return -log_softmax(logits, -1).gather(1, speaker.unsqueeze(1)).mean()
