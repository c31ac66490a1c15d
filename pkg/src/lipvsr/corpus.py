"""Synthetic multi-speaker lip-reading corpus and landmark-track file I/O.

Sentences follow a GRID-like six-slot grammar.  Each character is mapped to a
target lip pose (opening, width, rounding); poses are interpolated linearly over
the clip, turned into a 20-point lip contour scaled by a speaker profile, and
rasterized into grayscale frames.  Landmark indices follow the 68-point face
convention restricted to 49..68: 49..60 outer ring, 61..68 inner ring.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

K_LANDMARKS = 20
FIRST_LANDMARK = 49
LANDMARK_LABELS = tuple(range(FIRST_LANDMARK, FIRST_LANDMARK + K_LANDMARKS))

GRAMMAR: tuple[tuple[str, ...], ...] = (
    ("bin", "lay", "place", "set"),
    ("blue", "green", "red", "white"),
    ("at", "by", "in", "with"),
    tuple(c for c in "abcdefghijklmnopqrstuvxyz"),
    ("zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine"),
    ("again", "now", "please", "soon"),
)
MAX_SENTENCE_CHARS = sum(max(len(w) for w in slot) for slot in GRAMMAR) + len(GRAMMAR) - 1

# (opening, width, rounding), each in [0, 1].  Vowels open, bilabials closed,
# rounded vowels narrow.  Frozen: changing it changes every generated corpus.
POSE_TABLE: dict[str, tuple[float, float, float]] = {
    " ": (0.05, 0.64, 0.10),
    "a": (0.95, 0.70, 0.05), "e": (0.60, 0.90, 0.00), "i": (0.40, 1.00, 0.00),
    "o": (0.75, 0.45, 0.85), "u": (0.35, 0.30, 1.00), "y": (0.40, 0.90, 0.10),
    "b": (0.00, 0.62, 0.10), "p": (0.00, 0.60, 0.05), "m": (0.00, 0.66, 0.00),
    "f": (0.12, 0.68, 0.00), "v": (0.15, 0.66, 0.05),
    "w": (0.18, 0.32, 0.95), "q": (0.25, 0.38, 0.80),
    "t": (0.30, 0.72, 0.10), "d": (0.34, 0.70, 0.15), "n": (0.28, 0.74, 0.05),
    "l": (0.42, 0.76, 0.10), "s": (0.20, 0.85, 0.00), "z": (0.22, 0.82, 0.05),
    "c": (0.32, 0.64, 0.35), "j": (0.30, 0.55, 0.55), "r": (0.36, 0.50, 0.60),
    "x": (0.26, 0.80, 0.20), "k": (0.38, 0.68, 0.20), "g": (0.44, 0.66, 0.25),
    "h": (0.50, 0.72, 0.15),
}
POSE_TABLE.update({str(d): (0.20 + 0.05 * d, 0.60, 0.30) for d in range(10)})
REST_POSE = POSE_TABLE[" "]

MOUTH_INTERIOR = 0.08
BLUR_SIGMA = 1.0


class CapacityError(ValueError):
    """The clip has too few frames for the sentence."""


class LandmarkFileError(ValueError):
    pass


@dataclass(frozen=True)
class Sentence:
    words: tuple[str, ...]

    def __post_init__(self):
        if len(self.words) != len(GRAMMAR):
            raise ValueError(f"sentence needs {len(GRAMMAR)} words, got {len(self.words)}")
        for w, slot in zip(self.words, GRAMMAR):
            if w not in slot:
                raise ValueError(f"word {w!r} not allowed in slot {slot}")

    @property
    def text(self) -> str:
        return " ".join(self.words)

    @classmethod
    def from_text(cls, text: str) -> "Sentence":
        return cls(tuple(text.split()))


def sample_sentence(rng: np.random.Generator) -> Sentence:
    return Sentence(tuple(slot[int(rng.integers(len(slot)))] for slot in GRAMMAR))


@dataclass(frozen=True)
class SpeakerProfile:
    speaker_id: int
    base_width: float          # pixels, mouth width at neutral pose
    base_height: float         # pixels, lip thickness scale
    aspect_jitter: float       # relative vertical stretch
    center_offset: tuple[float, float]  # (dx, dy) as fractions of frame width/height
    articulation_rate: float   # gain on mouth opening
    noise_level: float         # pixel noise std
    skin_tone: float
    lip_tone: float


def make_profile(corpus_seed: int, speaker_id: int, height: int = 96, width: int = 96,
                 noise_level: float | None = None) -> SpeakerProfile:
    rng = np.random.default_rng([corpus_seed, speaker_id, 7919])
    bw = width * rng.uniform(0.30, 0.42)
    bh = height * rng.uniform(0.13, 0.19)
    jitter = rng.uniform(-0.15, 0.15)
    offset = (float(rng.uniform(-0.06, 0.06)), float(rng.uniform(-0.06, 0.06)))
    rate = rng.uniform(0.8, 1.2)
    noise = rng.uniform(0.01, 0.03)
    skin = rng.uniform(0.50, 0.80)
    lip = skin - rng.uniform(0.15, 0.30)
    return SpeakerProfile(
        speaker_id=int(speaker_id), base_width=float(bw), base_height=float(bh),
        aspect_jitter=float(jitter), center_offset=offset, articulation_rate=float(rate),
        noise_level=float(noise if noise_level is None else noise_level),
        skin_tone=float(skin), lip_tone=float(lip),
    )


def pose_sequence(text: str, frames: int) -> np.ndarray:
    """Per-frame (opening, width, rounding) for ``text``; independent of the speaker."""
    n = len(text)
    if n == 0 or frames < 2 * n:
        raise CapacityError(f"{frames} frames cannot hold {n} characters (need {2 * n})")
    lead = 0.25 * (frames - 2 * n)
    span = frames - 2 * lead
    times = [-1.0] + [lead + (k + 0.5) * span / n - 0.5 for k in range(n)] + [float(frames)]
    poses = np.array([REST_POSE] + [POSE_TABLE[c] for c in text] + [REST_POSE], dtype=np.float64)
    t = np.arange(frames, dtype=np.float64)
    return np.stack([np.interp(t, times, poses[:, d]) for d in range(3)], axis=1)


_OUTER_UPPER = np.pi * (1 - np.arange(7) / 6)     # 49..55, left corner over the top
_OUTER_LOWER = -np.pi * np.arange(1, 6) / 6       # 56..60, right to left under
_INNER = np.pi * np.array([1, 0.75, 0.5, 0.25, 0, -0.25, -0.5, -0.75])  # 61..68


def place_landmarks(poses: np.ndarray, profile: SpeakerProfile, height: int, width: int) -> np.ndarray:
    """Lip contour ``T×20×2`` (x, y) in pixels for a pose sequence."""
    opening = np.clip(poses[:, 0] * profile.articulation_rate, 0.0, 1.0)
    w, r = poses[:, 1], poses[:, 2]
    cx = width / 2 + profile.center_offset[0] * width
    cy = height / 2 + profile.center_offset[1] * height
    half_w = 0.5 * profile.base_width * (0.75 + 0.35 * w) * (1 - 0.25 * r)
    hs = profile.base_height * (1 + profile.aspect_jitter)
    inner_h = 0.5 * hs * 1.2 * opening
    upper = inner_h + 0.35 * hs * (1 + 0.3 * r)
    lower = inner_h + 0.45 * hs * (1 + 0.3 * r)
    inner_w = half_w * (0.78 - 0.1 * r)

    def ring(theta, hw, up, down):
        s = np.sin(theta)[None, :]
        x = cx + hw[:, None] * np.cos(theta)[None, :]
        y = cy - np.where(s >= 0, up[:, None] * s, down[:, None] * s)
        return np.stack([x, y], axis=-1)

    outer = ring(np.concatenate([_OUTER_UPPER, _OUTER_LOWER]), half_w, upper, lower)
    inner = ring(_INNER, inner_w, inner_h, inner_h)
    pts = np.concatenate([outer, inner], axis=1)
    pts[..., 0] = np.clip(pts[..., 0], 0, width - 1)
    pts[..., 1] = np.clip(pts[..., 1], 0, height - 1)
    return pts.astype(np.float32)


def _inside(poly: np.ndarray, px: np.ndarray, py: np.ndarray) -> np.ndarray:
    """Even-odd point-in-polygon; ``poly`` is ``T×n×2``, result ``T×P``."""
    inside = np.zeros((poly.shape[0], px.size), dtype=bool)
    n = poly.shape[1]
    for a in range(n):
        x1, y1 = poly[:, a, 0:1], poly[:, a, 1:2]
        x2, y2 = poly[:, (a + 1) % n, 0:1], poly[:, (a + 1) % n, 1:2]
        crosses = (y1 > py) != (y2 > py)
        dy = np.where(y2 == y1, 1.0, y2 - y1)
        xint = x1 + (x2 - x1) * (py - y1) / dy
        inside ^= crosses & (px < xint)
    return inside


def render_frames(track: np.ndarray, height: int, width: int, profile: SpeakerProfile,
                  rng: np.random.Generator | None = None) -> np.ndarray:
    """Rasterize the two contour rings into ``T×H×W`` uint8 frames.

    Noise is drawn from ``rng`` only when the profile's noise level is positive.
    """
    track = np.asarray(track, dtype=np.float64)
    yy, xx = np.mgrid[0:height, 0:width]
    px, py = xx.reshape(1, -1).astype(np.float64), yy.reshape(1, -1).astype(np.float64)
    outer = _inside(track[:, :12], px, py)
    inner = _inside(track[:, 12:], px, py) & outer
    img = np.full(outer.shape, profile.skin_tone)
    img[outer] = profile.lip_tone
    img[inner] = MOUTH_INTERIOR
    img = img.reshape(-1, height, width)
    img = gaussian_filter(img, sigma=(0, BLUR_SIGMA, BLUR_SIGMA), mode="nearest")
    if profile.noise_level > 0:
        if rng is None:
            raise ValueError("noisy rendering needs an rng")
        img = img + profile.noise_level * rng.standard_normal(img.shape)
    return np.round(np.clip(img, 0.0, 1.0) * 255).astype(np.uint8)


@dataclass
class Sample:
    frames: np.ndarray         # T×H×W uint8
    track: np.ndarray          # T×K×2 float32, (x, y) pixels
    transcript: str
    speaker: int
    sample_id: str = ""

    @property
    def clip(self) -> np.ndarray:
        return self.frames.astype(np.float32) / 255.0

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]


def synthesize_sample(profile: SpeakerProfile, sentence: Sentence, frames: int, height: int, width: int,
                      rng: np.random.Generator, sample_id: str = "") -> Sample:
    poses = pose_sequence(sentence.text, frames)
    track = place_landmarks(poses, profile, height, width)
    clip = render_frames(track, height, width, profile, rng)
    return Sample(clip, track, sentence.text, profile.speaker_id, sample_id)


@dataclass
class CorpusConfig:
    seed: int = 0
    speakers: int = 8
    per_speaker: int = 150
    frames: int = 64
    height: int = 96
    width: int = 96
    noise_level: float | None = None   # None: per-speaker profile value

    def to_dict(self) -> dict:
        return asdict(self)


def generate_corpus(cfg: CorpusConfig) -> list[Sample]:
    samples = []
    for spk in range(cfg.speakers):
        profile = make_profile(cfg.seed, spk, cfg.height, cfg.width, cfg.noise_level)
        for idx in range(cfg.per_speaker):
            rng = np.random.default_rng([cfg.seed, spk, idx])
            sentence = sample_sentence(rng)
            samples.append(synthesize_sample(profile, sentence, cfg.frames, cfg.height, cfg.width,
                                             rng, sample_id=f"s{spk:02d}_{idx:04d}"))
    return samples


def split_dataset(samples: Sequence[Sample], mode: str, held_out_speakers: Sequence[int] = (),
                  test_per_speaker: int = 25, seed: int = 0) -> tuple[list[Sample], list[Sample]]:
    """Unseen: held-out speakers form the test set.  Overlapped: per-speaker random split."""
    speakers = sorted({s.speaker for s in samples})
    if mode == "unseen":
        held = set(held_out_speakers)
        if not held:
            raise ValueError("unseen split needs at least one held-out speaker")
        unknown = held - set(speakers)
        if unknown:
            raise ValueError(f"unknown speaker id(s) {sorted(unknown)}")
        return ([s for s in samples if s.speaker not in held], [s for s in samples if s.speaker in held])
    if mode == "overlapped":
        test_ids = set()
        for spk in speakers:
            own = [i for i, s in enumerate(samples) if s.speaker == spk]
            if test_per_speaker > len(own):
                raise ValueError(f"speaker {spk} has {len(own)} samples, {test_per_speaker} requested for test")
            perm = np.random.default_rng([seed, spk]).permutation(len(own))
            test_ids.update(own[i] for i in perm[:test_per_speaker])
        return ([s for i, s in enumerate(samples) if i not in test_ids],
                [s for i, s in enumerate(samples) if i in test_ids])
    raise ValueError(f"unknown split mode {mode!r}")


# --- landmark-track files -------------------------------------------------

LMK_MAGIC = b"LMTR"
LMK_VERSION = 1
_LMK_HEAD = struct.Struct("<4sHHIIIiI")


class LandmarkRecord(NamedTuple):
    track: np.ndarray
    transcript: str
    speaker_id: int
    height: int
    width: int


def write_landmark_file(path, track: np.ndarray, transcript: str, speaker_id: int,
                        height: int, width: int) -> None:
    track = np.asarray(track, dtype="<f4")
    T, K, _ = track.shape
    text = transcript.encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_LMK_HEAD.pack(LMK_MAGIC, LMK_VERSION, K, T, height, width, speaker_id, len(text)))
        fh.write(text)
        fh.write(np.ascontiguousarray(track).tobytes())


def load_landmark_file(path) -> LandmarkRecord:
    raw = Path(path).read_bytes()
    if len(raw) < _LMK_HEAD.size:
        raise LandmarkFileError(f"{path}: truncated header")
    magic, version, K, T, H, W, spk, tlen = _LMK_HEAD.unpack_from(raw)
    if magic != LMK_MAGIC:
        raise LandmarkFileError(f"{path}: bad magic {magic!r}")
    if version != LMK_VERSION:
        raise LandmarkFileError(f"{path}: unsupported version {version}")
    if K != K_LANDMARKS:
        raise LandmarkFileError(f"{path}: landmark count {K} (expected {K_LANDMARKS})")
    off = _LMK_HEAD.size
    try:
        transcript = raw[off:off + tlen].decode("utf-8")
    except UnicodeDecodeError as exc:
        raise LandmarkFileError(f"{path}: transcript is not UTF-8") from exc
    off += tlen
    need = T * K * 2 * 4
    if len(raw) - off != need:
        raise LandmarkFileError(f"{path}: expected {need} payload bytes, found {len(raw) - off}")
    track = np.frombuffer(raw, dtype="<f4", offset=off).reshape(T, K, 2).astype(np.float32)
    bad = np.argwhere(~np.isfinite(track))
    if bad.size:
        t, k, _ = bad[0]
        raise LandmarkFileError(f"{path}: non-finite coordinate at frame {t}, landmark {LANDMARK_LABELS[k]}")
    return LandmarkRecord(track, transcript, spk, H, W)


# --- corpus directories -----------------------------------------------------

def save_corpus(directory, samples: Sequence[Sample], splits: dict[str, str] | None = None,
                config: CorpusConfig | None = None) -> Path:
    """Write ``<id>.lmk`` + ``<id>.frames.npy`` per sample and a line-delimited manifest."""
    directory = Path(directory)
    (directory / "samples").mkdir(parents=True, exist_ok=True)
    lines = []
    for s in samples:
        rel = f"samples/{s.sample_id}"
        H, W = s.frames.shape[1:]
        write_landmark_file(directory / f"{rel}.lmk", s.track, s.transcript, s.speaker, H, W)
        np.save(directory / f"{rel}.frames.npy", s.frames, allow_pickle=False)
        split = (splits or {}).get(s.sample_id, "all")
        lines.append(json.dumps({"path": rel, "speaker": s.speaker, "split": split}, sort_keys=True))
    (directory / "manifest.jsonl").write_text("\n".join(lines) + "\n")
    if config is not None:
        (directory / "corpus.json").write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")
    return directory


def read_manifest(path) -> list[dict]:
    records = []
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        rec = json.loads(line)
        if not {"path", "speaker", "split"} <= rec.keys():
            raise ValueError(f"{path}:{n}: manifest record needs path, speaker, split")
        records.append(rec)
    return records


def load_corpus(directory) -> tuple[list[Sample], dict[str, str]]:
    directory = Path(directory)
    samples, splits = [], {}
    for rec in read_manifest(directory / "manifest.jsonl"):
        lm = load_landmark_file(directory / f"{rec['path']}.lmk")
        frames = np.load(directory / f"{rec['path']}.frames.npy", allow_pickle=False)
        sid = Path(rec["path"]).name
        samples.append(Sample(frames, lm.track, lm.transcript, lm.speaker_id, sid))
        splits[sid] = rec["split"]
    return samples, splits
