"""Word error rate, dataset evaluation and the ablation table."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Iterable, Sequence

from .corpus import Sample


@dataclass(frozen=True)
class WerBreakdown:
    S: int
    D: int
    I: int
    N: int

    @property
    def errors(self) -> int:
        return self.S + self.D + self.I

    @property
    def wer(self) -> float:
        return 100.0 * self.errors / self.N

    def __add__(self, other: "WerBreakdown") -> "WerBreakdown":
        return WerBreakdown(self.S + other.S, self.D + other.D, self.I + other.I, self.N + other.N)

    def to_dict(self) -> dict:
        return {"S": self.S, "D": self.D, "I": self.I, "N": self.N, "wer": self.wer}


# preference order when several predecessors reach the same minimal cost
_SUB, _INS, _DEL = 0, 1, 2


def edit_alignment(ref: Sequence[str], hyp: Sequence[str]) -> WerBreakdown:
    """Minimal word-level edit alignment of ``hyp`` against ``ref``.

    Among equal-cost alignments the backtrace prefers a substitution (or match),
    then an insertion, then a deletion.
    """
    ref, hyp = list(ref), list(hyp)
    if not ref:
        raise ValueError("reference must contain at least one word")
    n, m = len(ref), len(hyp)
    cost = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(1, n + 1):
        cost[i][0] = i
    for j in range(1, m + 1):
        cost[0][j] = j
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            cost[i][j] = min(cost[i - 1][j - 1] + (ref[i - 1] != hyp[j - 1]),
                             cost[i][j - 1] + 1, cost[i - 1][j] + 1)
    S = D = I = 0
    i, j = n, m
    while i > 0 or j > 0:
        options = []
        if i > 0 and j > 0:
            options.append((cost[i - 1][j - 1] + (ref[i - 1] != hyp[j - 1]), _SUB))
        if j > 0:
            options.append((cost[i][j - 1] + 1, _INS))
        if i > 0:
            options.append((cost[i - 1][j] + 1, _DEL))
        move = min(o for o in options if o[0] == cost[i][j])[1]
        if move == _SUB:
            S += ref[i - 1] != hyp[j - 1]
            i, j = i - 1, j - 1
        elif move == _INS:
            I += 1
            j -= 1
        else:
            D += 1
            i -= 1
    return WerBreakdown(S, D, I, n)


def sentence_errors(ref: str, hyp: str) -> WerBreakdown:
    return edit_alignment(ref.split(), hyp.split())


def aggregate(records: Iterable[dict]) -> dict:
    """Corpus WER (total errors over total reference words) and per-speaker breakdown."""
    total = WerBreakdown(0, 0, 0, 0)
    per_speaker: dict[int, WerBreakdown] = {}
    count = 0
    for r in records:
        b = WerBreakdown(r["S"], r["D"], r["I"], r["N"])
        total = total + b
        per_speaker[r["speaker"]] = per_speaker.get(r["speaker"], WerBreakdown(0, 0, 0, 0)) + b
        count += 1
    if count == 0:
        raise ValueError("cannot aggregate an empty set of records")
    return {
        "samples": count,
        "corpus": total.to_dict(),
        "per_speaker": {str(k): per_speaker[k].to_dict() for k in sorted(per_speaker)},
    }


def decode_records(samples: Sequence[Sample], hypotheses: Sequence[str]) -> list[dict]:
    out = []
    for s, hyp in zip(samples, hypotheses, strict=True):
        b = sentence_errors(s.transcript, hyp)
        out.append({"sample_id": s.sample_id, "speaker": s.speaker, "reference": s.transcript,
                    "hypothesis": hyp, "S": b.S, "D": b.D, "I": b.I, "N": b.N})
    return out


def transcribe_all(model, samples: Sequence[Sample], beam_width: int = 10, batch_size: int = 16) -> list[str]:
    from .model import make_batch

    was_training = model.training
    model.eval()
    hyps = []
    try:
        for start in range(0, len(samples), batch_size):
            batch = make_batch(samples[start:start + batch_size], model)
            hyps.extend(model.transcribe(batch, beam_width=beam_width))
    finally:
        model.train(was_training)
    return hyps


def evaluate(model, samples: Sequence[Sample], beam_width: int = 10, batch_size: int = 16) -> dict:
    """Decode every sample and aggregate word errors.  Returns ``{"summary", "records"}``."""
    records = decode_records(samples, transcribe_all(model, samples, beam_width, batch_size))
    summary = aggregate(records)
    summary["beam_width"] = beam_width
    return {"summary": summary, "records": records}


def write_records(path, records: Sequence[dict]) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


# --- ablations --------------------------------------------------------------

@dataclass(frozen=True)
class Variant:
    label: str
    relpos: bool = True
    motion: bool = True
    mi: bool = True
    temporal_depth: int | None = None     # None keeps the configured 3-D depth
    patch_mode: str = "landmark"


ABLATION_VARIANTS = (
    Variant("Ours"),
    Variant("w/o RelPos", relpos=False),
    Variant("w/o Motion", motion=False),
    Variant("w/o MI", mi=False),
    Variant("w/o RelPos&Motion", relpos=False, motion=False),
    Variant("w/o RelPos&MI", relpos=False, mi=False),
    Variant("w/o Motion&MI", motion=False, mi=False),
    Variant("w/o RelPos&Motion&MI", relpos=False, motion=False, mi=False),
    Variant("Replacing 3D patch with 2D patch", temporal_depth=1),
    Variant("Using mouth-centered crops", patch_mode="mouth"),
)
FULL_LABEL = "Ours"


def variant_configs(variant: Variant, model_cfg, train_cfg):
    """Model and training configs with the variant's switches applied."""
    import copy
    from dataclasses import replace

    m = copy.deepcopy(model_cfg)
    m.frontend.use_relpos = variant.relpos
    m.frontend.use_motion = variant.motion
    m.frontend.patch_mode = variant.patch_mode
    if variant.temporal_depth is not None:
        m.frontend.temporal_depth = variant.temporal_depth
    t = replace(train_cfg, relpos=variant.relpos, motion=variant.motion, mi=variant.mi)
    return m, t


def ablation_suite(model_cfg, train_cfg, train_samples, dev_samples, test_samples, out_dir,
                   variants: Sequence[Variant] = ABLATION_VARIANTS, beam_width: int = 10,
                   log=print) -> dict:
    """Train and evaluate every variant; write ``ablation.json`` and ``ablation.txt``."""
    from pathlib import Path

    from .trainer import load_model, run_training

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for i, variant in enumerate(variants):
        m_cfg, t_cfg = variant_configs(variant, model_cfg, train_cfg)
        vdir = out_dir / f"variant_{i:02d}"
        log(f"[ablate] {variant.label}: training in {vdir}")
        run_training(t_cfg, m_cfg, train_samples, dev_samples, vdir, log=log)
        model, _ = load_model(vdir / "best.ckpt")
        ev = evaluate(model, test_samples, beam_width=beam_width)
        write_records(vdir / "decode.jsonl", ev["records"])
        with open(vdir / "eval.json", "w") as fh:
            json.dump(ev["summary"], fh, indent=2, sort_keys=True)
        rows.append({
            "label": variant.label,
            "relpos": variant.relpos, "motion": variant.motion, "mi": variant.mi,
            "temporal_depth": m_cfg.frontend.temporal_depth, "patch_mode": variant.patch_mode,
            "wer": ev["summary"]["corpus"]["wer"],
            "per_speaker": {k: v["wer"] for k, v in ev["summary"]["per_speaker"].items()},
            "directory": vdir.name,
        })
        log(f"[ablate] {variant.label}: WER {rows[-1]['wer']:.2f}%")
    table = {"rows": rows}
    by_label = {r["label"]: r for r in rows}
    if FULL_LABEL in by_label and "w/o MI" in by_label:
        delta = by_label["w/o MI"]["wer"] - by_label[FULL_LABEL]["wer"]
        table["mi_delta"] = {
            "full_wer": by_label[FULL_LABEL]["wer"], "without_mi_wer": by_label["w/o MI"]["wer"],
            "delta": delta,
            "claim": "MI regularization lowers unseen-speaker WER" if delta > 0
            else "MI regularization did not lower unseen-speaker WER in this run",
        }
    with open(out_dir / "ablation.json", "w") as fh:
        json.dump(table, fh, indent=2, sort_keys=True)
    with open(out_dir / "ablation.txt", "w") as fh:
        fh.write(format_table(table))
    return table


def format_table(table: dict) -> str:
    width = max(len(r["label"]) for r in table["rows"])
    lines = [f"{'Method':<{width}}  WER(%)", "-" * (width + 8)]
    for r in table["rows"]:
        lines.append(f"{r['label']:<{width}}  {r['wer']:6.2f}")
    if "mi_delta" in table:
        d = table["mi_delta"]
        lines.append("")
        lines.append(f"w/o MI minus full model: {d['delta']:+.2f} points ({d['claim']})")
    return "\n".join(lines) + "\n"


# --- cross-speaker harness -------------------------------------------------------

@dataclass
class HarnessConfig:
    """Desk-scale unseen-speaker experiment: corpus, split and per-variant budget."""
    corpus_seed: int = 0
    speakers: int = 8
    per_speaker: int = 150
    frames: int = 64
    height: int = 48
    width: int = 48
    held_out: tuple[int, ...] = (6, 7)
    dev_per_speaker: int = 10
    total_steps: int = 900
    warmup_steps: int = 60
    batch_size: int = 16
    train_seed: int = 0
    beam_width: int = 10

    def __post_init__(self):
        self.held_out = tuple(int(s) for s in self.held_out)


def split_assignments(samples, held_out, dev_per_speaker: int, seed: int = 0) -> dict[str, str]:
    """sample id -> "train" | "dev" | "test": held-out speakers are test, dev is held-in."""
    from .corpus import split_dataset

    seen, test = split_dataset(samples, "unseen", held_out)
    train, dev = split_dataset(seen, "overlapped", test_per_speaker=dev_per_speaker, seed=seed)
    out = {s.sample_id: "train" for s in train}
    out.update({s.sample_id: "dev" for s in dev})
    out.update({s.sample_id: "test" for s in test})
    return out


def partition(samples, assignment: dict[str, str]):
    """(train, dev, test) lists in corpus order."""
    parts = {"train": [], "dev": [], "test": []}
    for s in samples:
        split = assignment.get(s.sample_id)
        if split in parts:
            parts[split].append(s)
    return parts["train"], parts["dev"], parts["test"]


def harness_data(hc: HarnessConfig):
    """(train, dev, test) for the unseen-speaker setting; dev is held-in."""
    from .corpus import CorpusConfig, generate_corpus

    samples = generate_corpus(CorpusConfig(seed=hc.corpus_seed, speakers=hc.speakers,
                                           per_speaker=hc.per_speaker, frames=hc.frames,
                                           height=hc.height, width=hc.width))
    return partition(samples, split_assignments(samples, hc.held_out, hc.dev_per_speaker, hc.corpus_seed))


def cross_speaker_harness(hc: HarnessConfig, out_dir, model_cfg=None, variants=ABLATION_VARIANTS,
                          log=print) -> dict:
    """Generate the corpus, run the ablation suite and write ``harness.json``.

    Wall-clock timings go to ``timing.json`` so every other output is a pure
    function of the configuration.
    """
    import time
    from pathlib import Path

    from .model import ModelConfig
    from .trainer import TrainConfig

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    train, dev, test = harness_data(hc)
    n_train_speakers = hc.speakers - len(hc.held_out)
    model_cfg = model_cfg or ModelConfig.desk(num_speakers=n_train_speakers)
    tc = TrainConfig(seed=hc.train_seed, total_steps=hc.total_steps, warmup_steps=hc.warmup_steps,
                     batch_size=hc.batch_size)
    t1 = time.perf_counter()
    table = ablation_suite(model_cfg, tc, train, dev, test, out_dir / "ablation", variants,
                           hc.beam_width, log)
    t2 = time.perf_counter()
    full = next((r for r in table["rows"] if r["label"] == FULL_LABEL), table["rows"][0])
    report = {
        "config": {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(hc).items()},
        "splits": {"train": len(train), "dev": len(dev), "test": len(test)},
        "full_model": {"label": full["label"], "unseen_wer": full["wer"], "per_speaker": full["per_speaker"]},
        "mi_delta": table.get("mi_delta"),
        "ablation": table["rows"],
    }
    with open(out_dir / "harness.json", "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
    with open(out_dir / "timing.json", "w") as fh:
        json.dump({"data_seconds": t1 - t0, "ablation_seconds": t2 - t1, "total_seconds": t2 - t0}, fh, indent=2)
    return report
