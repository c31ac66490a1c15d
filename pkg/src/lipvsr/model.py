"""Full lip-reading model and batch assembly."""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field, fields
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn

from .backend import Conformer, ConformerConfig
from .corpus import MAX_SENTENCE_CHARS, Sample
from .decoder import (VOCAB, DecoderConfig, TransformerDecoder, beam_search, ce_loss, ctc_loss_batch,
                      greedy_decode, teacher_forcing, vsr_loss)
from .frontend import Frontend, FrontendConfig
from .mi import ScoreNet, VariationalNet
from .speaker import SpeakerHead
from .tensor import init_uniform_

DTYPES = {"float32": torch.float32, "float64": torch.float64}


@dataclass
class ModelConfig:
    frontend: FrontendConfig = field(default_factory=FrontendConfig)
    conformer: ConformerConfig = field(default_factory=ConformerConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    num_speakers: int = 8
    id_dim: int = 128
    mi_hidden: int = 128
    dtype: str = "float32"

    def __post_init__(self):
        for name, cls in (("frontend", FrontendConfig), ("conformer", ConformerConfig),
                          ("decoder", DecoderConfig)):
            value = getattr(self, name)
            if isinstance(value, dict):
                setattr(self, name, cls(**value))
        d = self.conformer.model_dim
        if self.frontend.output_dim != d or self.decoder.model_dim != d:
            raise ValueError("front-end output, conformer and decoder widths must agree")
        if self.dtype not in DTYPES:
            raise ValueError(f"dtype must be one of {sorted(DTYPES)}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def paper(cls, num_speakers: int = 8) -> "ModelConfig":
        """Widths and depths as published (front-end 256, conformer 3x256/1024/8, decoder alike)."""
        return cls(num_speakers=num_speakers)

    @classmethod
    def desk(cls, num_speakers: int = 8) -> "ModelConfig":
        """Reduced widths and 12-pixel patches for single-core CPU training."""
        return cls(
            frontend=FrontendConfig(patch_size=12, patch_resolution=8, fps_set=(10, 12, 14, 16),
                                    tubelet_channels=(8, 16, 32), relpos_hidden=32, fusion_layers=2,
                                    fusion_heads=4, fusion_mlp_dim=64, motion_dim=32, output_dim=64,
                                    mouth_patch_size=32),
            conformer=ConformerConfig(blocks=2, model_dim=64, ff_dim=128, heads=4, depthwise_kernel=15),
            decoder=DecoderConfig(layers=2, model_dim=64, ff_dim=128, heads=4),
            num_speakers=num_speakers, id_dim=32, mi_hidden=64,
        )

    @classmethod
    def micro(cls, num_landmarks: int = 4, num_speakers: int = 2) -> "ModelConfig":
        """Tiny float64 model for finite-difference checks."""
        return cls(
            frontend=FrontendConfig(num_landmarks=num_landmarks, patch_size=8, patch_resolution=8,
                                    fps_set=(8,), tubelet_channels=(2, 3, 8), relpos_hidden=5,
                                    fusion_layers=1, fusion_heads=2, fusion_mlp_dim=6, motion_dim=3,
                                    output_dim=8, geometry_pairs=((0, 2), (1, 3))),
            conformer=ConformerConfig(blocks=1, model_dim=8, ff_dim=6, heads=2, depthwise_kernel=3),
            decoder=DecoderConfig(layers=1, model_dim=8, ff_dim=6, heads=2),
            num_speakers=num_speakers, id_dim=4, mi_hidden=5, dtype="float64",
        )


def config_from_dict(d: dict) -> ModelConfig:
    d = copy.deepcopy(d)
    return ModelConfig(**d)


class LipReader(nn.Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        d = cfg.conformer.model_dim
        self.frontend = Frontend(cfg.frontend)
        self.conformer = Conformer(cfg.conformer)
        self.ctc_head = nn.Linear(d, len(VOCAB))
        self.decoder = TransformerDecoder(cfg.decoder, len(VOCAB))
        self.speaker = SpeakerHead(d, cfg.id_dim, cfg.num_speakers)
        self.to(DTYPES[cfg.dtype])
        init_uniform_(self, torch.Generator().manual_seed(seed))

    @property
    def dtype(self):
        return DTYPES[self.cfg.dtype]

    def encode(self, batch: "Batch", return_attention: bool = False):
        """(H0, H_Lb, front-end attention maps)."""
        h0, attn = self.frontend(batch.patches, batch.tracks, batch.frame_width)
        hlb = self.conformer(h0)
        return h0, hlb, attn

    def vsr_losses(self, hlb: torch.Tensor, batch: "Batch"):
        l_ctc = ctc_loss_batch(self.ctc_head(hlb), batch.targets, VOCAB.blank).mean()
        dec_in, dec_out = teacher_forcing(batch.targets)
        l_ce = ce_loss(self.decoder(dec_in, hlb), dec_out)
        return l_ctc, l_ce

    @torch.no_grad()
    def transcribe(self, batch: "Batch", beam_width: int = 10, max_len: int = MAX_SENTENCE_CHARS + 2) -> list[str]:
        """Decode a batch; the speaker branch is not evaluated."""
        h0, _ = self.frontend(batch.patches, batch.tracks, batch.frame_width)
        hlb = self.conformer(h0)
        if beam_width == 1:
            return [VOCAB.decode(ids) for ids in greedy_decode(self.decoder, hlb, max_len)]
        return [VOCAB.decode(beam_search(self.decoder, hlb[b], beam_width, max_len)[0])
                for b in range(hlb.shape[0])]


class MIEstimators(nn.Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        d = cfg.conformer.model_dim
        self.q = VariationalNet(cfg.id_dim, d, cfg.mi_hidden)
        self.score = ScoreNet(d, d, cfg.mi_hidden)
        self.to(DTYPES[cfg.dtype])
        init_uniform_(self, torch.Generator().manual_seed(seed))


@dataclass
class Batch:
    patches: torch.Tensor      # B×T×K'×P×P
    tracks: torch.Tensor       # B×T×K×2
    frame_width: float
    targets: list[list[int]]
    speakers: torch.Tensor     # B
    transcripts: list[str]
    sample_ids: list[str]

    def __len__(self):
        return len(self.targets)


def make_batch(samples: Sequence[Sample], model: LipReader, patch_size: int | None = None,
               speaker_index: dict[int, int] | None = None) -> Batch:
    """Stack samples into model inputs.  ``speaker_index`` maps corpus speaker ids to classes."""
    speakers = [s.speaker if speaker_index is None else speaker_index.get(s.speaker, -1) for s in samples]
    clips = np.stack([s.clip for s in samples])
    tracks = np.stack([s.track for s in samples]).astype(np.float64)
    patches = model.frontend.prepare_patches(clips, tracks, patch_size)
    dt = model.dtype
    return Batch(
        patches=torch.from_numpy(np.ascontiguousarray(patches)).to(dt),
        tracks=torch.from_numpy(tracks).to(dt),
        frame_width=float(clips.shape[-1]),
        targets=[VOCAB.encode(s.transcript) for s in samples],
        speakers=torch.tensor(speakers, dtype=torch.long),
        transcripts=[s.transcript for s in samples],
        sample_ids=[s.sample_id for s in samples],
    )
