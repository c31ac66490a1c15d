"""Two-stage training.

Stage I trains the recognizer and the speaker branch jointly.  Stage II freezes
the speaker branch and continues training the recognizer with the max-min MI
regularizer, fitting the two estimators one step each before every model step.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn as nn

from .checkpoint import load_checkpoint, load_module_tensors, module_tensors, save_checkpoint
from .corpus import Sample
from .decoder import vsr_loss
from .evaluate import aggregate, decode_records, transcribe_all
from .mi import fit_score_net, fit_variational_net, mi_loss, pool_time
from .model import LipReader, MIEstimators, ModelConfig, config_from_dict, make_batch
from .speaker import speaker_loss_from_logits

CHECKPOINT_FORMAT = "lipvsr-train"


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    alpha1: float = 0.2
    alpha2: float = 0.2
    lam: float = 0.1
    batch_size: int = 16
    lr: float = 3e-4
    warmup_steps: int = 100
    total_steps: int = 1500
    # stage I ends when dev speaker accuracy has not improved by more than
    # ``stage1_min_gain`` for ``stage1_patience`` epochs, or at the step cap
    stage1_patience: int = 3
    stage1_min_gain: float = 0.005
    stage1_max_fraction: float = 0.4
    seed: int = 0
    relpos: bool = True
    motion: bool = True
    mi: bool = True
    mi_lr: float = 5e-3
    grad_clip: float = 5.0
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    flexible_patch: bool = True
    threads: int = 1
    checkpoint_every: int = 0          # 0: only at stage boundary, best and end

    def __post_init__(self):
        self.adam_betas = tuple(float(b) for b in self.adam_betas)
        for name in ("alpha1", "alpha2", "lam"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if not 0 <= self.warmup_steps < self.total_steps:
            raise ValueError("warmup_steps must be non-negative and smaller than total_steps")
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2")
        if not 0.0 < self.stage1_max_fraction <= 1.0:
            raise ValueError("stage1_max_fraction must lie in (0, 1]")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["adam_betas"] = list(self.adam_betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training option(s): {sorted(unknown)}")
        return cls(**d)

    @property
    def stage1_cap(self) -> int:
        return max(1, int(self.stage1_max_fraction * self.total_steps))


def lr_schedule(step: int, warmup: int, total: int, lr0: float) -> float:
    """Linear warmup from 0 to ``lr0``, then cosine decay to 0 at ``total``."""
    if not 0 <= step <= total:
        raise ValueError(f"step {step} outside [0, {total}]")
    if step < warmup:
        return lr0 * step / warmup
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * (step - warmup) / (total - warmup)))


def parameter_hash(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, p in module.named_parameters():
        h.update(name.encode())
        h.update(p.detach().cpu().numpy().tobytes())
    return h.hexdigest()


def apply_ablation(model_cfg: ModelConfig, cfg: TrainConfig) -> ModelConfig:
    model_cfg.frontend.use_relpos = cfg.relpos
    model_cfg.frontend.use_motion = cfg.motion
    return model_cfg


@dataclass
class TrainState:
    model: LipReader
    optimizer: torch.optim.Optimizer
    cfg: TrainConfig
    speaker_index: dict[int, int]
    step: int = 0
    stage: str = "I"
    estimators: MIEstimators | None = None
    q_optimizer: torch.optim.Optimizer | None = None
    f_optimizer: torch.optim.Optimizer | None = None
    frozen: tuple[str, ...] = ()
    speaker_hash: str | None = None
    history: dict = field(default_factory=lambda: {"epochs": [], "best_spk_acc": None, "stale_epochs": 0,
                                                   "best_dev_wer": None, "stage1_end": None})


def init_state(cfg: TrainConfig, model_cfg: ModelConfig, speaker_index: dict[int, int]) -> TrainState:
    model = LipReader(apply_ablation(model_cfg, cfg), seed=cfg.seed)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=cfg.adam_betas, eps=cfg.adam_eps)
    return TrainState(model, opt, cfg, dict(speaker_index))


def _set_lr(optimizer, lr):
    for g in optimizer.param_groups:
        g["lr"] = lr


def _check_finite(state: TrainState, terms: dict) -> None:
    bad = {k: v for k, v in terms.items() if not math.isfinite(v)}
    if bad:
        raise TrainingError(f"non-finite loss at step {state.step} (stage {state.stage}): {bad}; "
                            f"all terms: {terms}")


def _vsr_terms(state, batch):
    h0, hlb, _ = state.model.encode(batch)
    l_ctc, l_ce = state.model.vsr_losses(hlb, batch)
    return h0, hlb, l_ctc, l_ce, vsr_loss(l_ctc, l_ce, state.cfg.lam)


def _apply(state: TrainState, loss: torch.Tensor) -> float:
    state.optimizer.zero_grad(set_to_none=True)
    loss.backward()
    params = [p for p in state.model.parameters() if p.requires_grad]
    norm = torch.nn.utils.clip_grad_norm_(params, state.cfg.grad_clip)
    state.optimizer.step()
    return float(norm)


def stage1_step(state: TrainState, batch) -> dict:
    """One update on L_VSR + alpha1 * L_ID over all parameters."""
    if state.stage != "I":
        raise TrainingError("stage1_step called outside stage I")
    cfg = state.cfg
    lr = lr_schedule(state.step, cfg.warmup_steps, cfg.total_steps, cfg.lr)
    _set_lr(state.optimizer, lr)
    state.model.train()
    h0, hlb, l_ctc, l_ce, l_vsr = _vsr_terms(state, batch)
    _, logits = state.model.speaker(h0)
    l_id = speaker_loss_from_logits(logits, batch.speakers)
    loss = l_vsr + cfg.alpha1 * l_id
    terms = {"l_ctc": l_ctc.item(), "l_ce": l_ce.item(), "l_vsr": l_vsr.item(), "l_id": l_id.item(),
             "loss": loss.item()}
    _check_finite(state, terms)
    grad_norm = _apply(state, loss)
    acc = (logits.argmax(-1) == batch.speakers).double().mean().item()
    metrics = {"step": state.step, "stage": "I", "lr": lr, **terms, "l_minMI": None, "l_maxMI": None,
               "l_mi": None, "spk_acc": acc, "grad_norm": grad_norm}
    state.step += 1
    return metrics


def enter_stage2(state: TrainState) -> None:
    """Freeze the speaker branch and create fresh MI estimators (unless MI is ablated)."""
    model, cfg = state.model, state.cfg
    for p in model.speaker.parameters():
        p.requires_grad_(False)
    model.speaker.eval()
    state.frozen = tuple(f"speaker.{n}" for n, _ in model.speaker.named_parameters())
    state.speaker_hash = parameter_hash(model.speaker)
    state.stage = "II"
    if cfg.mi and state.estimators is None:
        state.estimators = MIEstimators(model.cfg, seed=cfg.seed + 1)
        state.q_optimizer = torch.optim.Adam(state.estimators.q.parameters(), lr=cfg.mi_lr,
                                             betas=cfg.adam_betas, eps=cfg.adam_eps)
        state.f_optimizer = torch.optim.Adam(state.estimators.score.parameters(), lr=cfg.mi_lr,
                                             betas=cfg.adam_betas, eps=cfg.adam_eps)


def stage2_step(state: TrainState, batch) -> dict:
    """Fit q and F one step each on detached features, then update on L_VSR + alpha2 * L_MI."""
    if state.stage != "II":
        raise TrainingError("stage2_step called outside stage II")
    cfg, model = state.cfg, state.model
    lr = lr_schedule(state.step, cfg.warmup_steps, cfg.total_steps, cfg.lr)
    _set_lr(state.optimizer, lr)
    model.train()
    model.speaker.eval()
    h0, hlb, l_ctc, l_ce, l_vsr = _vsr_terms(state, batch)
    terms = {"l_ctc": l_ctc.item(), "l_ce": l_ce.item(), "l_vsr": l_vsr.item(), "l_id": None}
    if cfg.mi:
        h_id, _ = model.speaker(h0)
        q, score = state.estimators.q, state.estimators.score
        fit_variational_net(q, h_id, pool_time(hlb), 1, state.q_optimizer)
        fit_score_net(score, pool_time(h0), pool_time(hlb), 1, state.f_optimizer)
        l_mi, l_min, l_max = mi_loss(h_id, h0, hlb, q, score)
        loss = l_vsr + cfg.alpha2 * l_mi
        terms.update(l_minMI=l_min.item(), l_maxMI=l_max.item(), l_mi=l_mi.item())
    else:
        loss = l_vsr
        terms.update(l_minMI=None, l_maxMI=None, l_mi=None)
    terms["loss"] = loss.item()
    _check_finite(state, {k: v for k, v in terms.items() if v is not None})
    grad_norm = _apply(state, loss)
    metrics = {"step": state.step, "stage": "II", "lr": lr, **terms, "spk_acc": None, "grad_norm": grad_norm}
    state.step += 1
    return metrics


# --- batching ----------------------------------------------------------------

def steps_per_epoch(n: int, batch_size: int) -> int:
    return max(1, n // batch_size)


def batch_indices(cfg: TrainConfig, n: int, step: int) -> np.ndarray:
    """Sample indices for ``step``; a fresh seeded permutation every epoch."""
    per = steps_per_epoch(n, cfg.batch_size)
    epoch, i = divmod(step, per)
    perm = np.random.default_rng([cfg.seed, epoch, 101]).permutation(n)
    return perm[i * cfg.batch_size:(i + 1) * cfg.batch_size]


def training_batch(state: TrainState, samples: Sequence[Sample]):
    idx = batch_indices(state.cfg, len(samples), state.step)
    rng = np.random.default_rng([state.cfg.seed, state.step, 202])
    size = state.model.frontend.sample_patch_size(rng, state.cfg.flexible_patch)
    return make_batch([samples[i] for i in idx], state.model, size, state.speaker_index)


# --- dev evaluation ------------------------------------------------------------

@torch.no_grad()
def speaker_accuracy(model: LipReader, samples: Sequence[Sample], speaker_index, batch_size: int = 16) -> float:
    was = model.training
    model.eval()
    correct = 0
    try:
        for start in range(0, len(samples), batch_size):
            batch = make_batch(samples[start:start + batch_size], model, speaker_index=speaker_index)
            h0, _ = model.frontend(batch.patches, batch.tracks, batch.frame_width)
            _, logits = model.speaker(h0)
            correct += int((logits.argmax(-1) == batch.speakers).sum())
    finally:
        model.train(was)
    return correct / len(samples)


def dev_wer(model: LipReader, samples: Sequence[Sample]) -> float:
    """Greedy-decoded corpus WER on the dev slice."""
    records = decode_records(samples, transcribe_all(model, samples, beam_width=1))
    return aggregate(records)["corpus"]["wer"]


# --- checkpoints ---------------------------------------------------------------

def _optimizer_tensors(opt: torch.optim.Optimizer | None, prefix: str) -> dict:
    out = {}
    if opt is None:
        return out
    for idx, st in opt.state_dict()["state"].items():
        for key, value in st.items():
            out[f"{prefix}{idx}.{key}"] = torch.as_tensor(value)
    return out


def _load_optimizer(opt: torch.optim.Optimizer, tensors: dict, prefix: str) -> None:
    sd = opt.state_dict()
    state: dict[int, dict] = {}
    for name, value in tensors.items():
        if not name.startswith(prefix):
            continue
        idx, key = name[len(prefix):].split(".", 1)
        dtype = torch.float32 if key == "step" else opt.param_groups[0]["params"][0].dtype
        state.setdefault(int(idx), {})[key] = value.to(dtype)
    sd["state"] = state
    opt.load_state_dict(sd)


def save_state(path, state: TrainState, model_cfg: ModelConfig) -> None:
    tensors = module_tensors(state.model, "model")
    tensors.update(_optimizer_tensors(state.optimizer, "opt."))
    if state.estimators is not None:
        tensors.update(module_tensors(state.estimators, "mi"))
        tensors.update(_optimizer_tensors(state.q_optimizer, "qopt."))
        tensors.update(_optimizer_tensors(state.f_optimizer, "fopt."))
    meta = {
        "format": CHECKPOINT_FORMAT,
        "model_config": model_cfg.to_dict(),
        "train_config": state.cfg.to_dict(),
        "speaker_index": {str(k): v for k, v in sorted(state.speaker_index.items())},
        "step": state.step,
        "stage": state.stage,
        "frozen": list(state.frozen),
        "speaker_hash": state.speaker_hash,
        "history": state.history,
        "has_estimators": state.estimators is not None,
    }
    save_checkpoint(path, tensors, meta)


def load_model(path) -> tuple[LipReader, dict]:
    """Rebuild the recognizer from a training checkpoint (for decoding and evaluation)."""
    tensors, meta = load_checkpoint(path)
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise TrainingError(f"{path}: not a training checkpoint")
    cfg = config_from_dict(meta["model_config"])
    model = LipReader(cfg)
    load_module_tensors(model, tensors, "model")
    model.eval()
    return model, meta


def load_state(path) -> tuple[TrainState, ModelConfig]:
    tensors, meta = load_checkpoint(path)
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise TrainingError(f"{path}: not a training checkpoint")
    model_cfg = config_from_dict(meta["model_config"])
    cfg = TrainConfig.from_dict(meta["train_config"])
    state = init_state(cfg, model_cfg, {int(k): v for k, v in meta["speaker_index"].items()})
    load_module_tensors(state.model, tensors, "model")
    _load_optimizer(state.optimizer, tensors, "opt.")
    state.step = meta["step"]
    state.history = meta["history"]
    if meta["stage"] == "II":
        enter_stage2(state)
        load_module_tensors(state.estimators, tensors, "mi")
        _load_optimizer(state.q_optimizer, tensors, "qopt.")
        _load_optimizer(state.f_optimizer, tensors, "fopt.")
        if parameter_hash(state.model.speaker) != meta["speaker_hash"]:
            raise TrainingError(f"{path}: speaker branch does not match its recorded hash")
    return state, model_cfg


# --- driver -----------------------------------------------------------------------

@dataclass
class TrainingResult:
    model: LipReader
    state: TrainState
    report: dict
    out_dir: Path


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(f"cannot serialize {type(o).__name__}")


def setup_torch(threads: int = 1) -> None:
    torch.set_num_threads(threads)
    torch.use_deterministic_algorithms(True)


def run_training(cfg: TrainConfig, model_cfg: ModelConfig, train_samples: Sequence[Sample],
                 dev_samples: Sequence[Sample], out_dir, resume: bool = False,
                 stop_after: int | None = None, log: Callable[[str], None] | None = None) -> TrainingResult:
    """Stage I until the speaker branch converges, stage II for the remaining budget.

    Writes ``metrics.jsonl`` (one row per step), ``stage1.ckpt``, ``best.ckpt``
    (best dev WER), ``final.ckpt`` and ``report.json`` to ``out_dir``.  With
    ``resume`` training continues from ``last.ckpt``.  ``stop_after`` ends the
    run early after that many total steps (leaving ``last.ckpt`` behind).
    """
    log = log or (lambda msg: None)
    setup_torch(cfg.threads)
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise TrainingError(f"cannot create output directory {out}: {e}") from e
    if not train_samples:
        raise TrainingError("no training samples")
    if not dev_samples:
        raise TrainingError("no dev samples")

    metrics_path = out / "metrics.jsonl"
    last_path = out / "last.ckpt"
    if resume:
        if not last_path.exists():
            raise TrainingError(f"cannot resume: {last_path} does not exist")
        state, model_cfg = load_state(last_path)
        _truncate_metrics(metrics_path, state.step)
    else:
        speakers = sorted({s.speaker for s in train_samples})
        if len(speakers) > model_cfg.num_speakers:
            raise TrainingError(f"{len(speakers)} training speakers but the speaker head has "
                                f"{model_cfg.num_speakers} classes")
        state = init_state(cfg, model_cfg, {spk: i for i, spk in enumerate(speakers)})
        metrics_path.write_text("")
    cfg = state.cfg
    per_epoch = steps_per_epoch(len(train_samples), cfg.batch_size)
    end = cfg.total_steps if stop_after is None else min(stop_after, cfg.total_steps)

    with open(metrics_path, "a") as mfh:
        while state.step < end:
            batch = training_batch(state, train_samples)
            if state.stage == "I":
                m = stage1_step(state, batch)
            else:
                m = stage2_step(state, batch)
            mfh.write(json.dumps(m, sort_keys=True, default=_json_default) + "\n")
            if state.step % per_epoch == 0 or state.step == cfg.total_steps:
                mfh.flush()
                _end_of_epoch(state, model_cfg, dev_samples, out, log)
            elif state.stage == "I" and state.step >= cfg.stage1_cap and state.step < cfg.total_steps:
                _finish_stage1(state, model_cfg, out, log)
            if cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0:
                save_state(last_path, state, model_cfg)
    save_state(last_path, state, model_cfg)
    if state.step < cfg.total_steps:
        return TrainingResult(state.model, state, {}, out)

    save_state(out / "final.ckpt", state, model_cfg)
    report = {
        "train_config": cfg.to_dict(),
        "model_config": model_cfg.to_dict(),
        "train_samples": len(train_samples),
        "dev_samples": len(dev_samples),
        "steps": state.step,
        "stage1_end": state.history["stage1_end"],
        "best_dev_wer": state.history["best_dev_wer"],
        "epochs": state.history["epochs"],
        "speaker_hash_stage2": state.speaker_hash,
        "final_parameter_hash": parameter_hash(state.model),
    }
    with open(out / "report.json", "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True, default=_json_default)
    return TrainingResult(state.model, state, report, out)


def _truncate_metrics(path: Path, step: int) -> None:
    if not path.exists():
        return
    rows = [line for line in path.read_text().splitlines() if line and json.loads(line)["step"] < step]
    path.write_text("".join(r + "\n" for r in rows))


def _end_of_epoch(state: TrainState, model_cfg, dev_samples, out: Path, log) -> None:
    cfg, hist = state.cfg, state.history
    epoch = len(hist["epochs"])
    row = {"epoch": epoch, "step": state.step, "stage": state.stage}
    if state.stage == "I":
        acc = speaker_accuracy(state.model, dev_samples, state.speaker_index)
        row["dev_spk_acc"] = acc
        best = hist["best_spk_acc"]
        if best is None or acc > best + cfg.stage1_min_gain:
            hist["best_spk_acc"] = acc
            hist["stale_epochs"] = 0
        else:
            hist["stale_epochs"] += 1
    else:
        h = parameter_hash(state.model.speaker)
        row["speaker_hash"] = h
        if h != state.speaker_hash:
            raise TrainingError(f"speaker branch changed during stage II (epoch {epoch})")
    wer = dev_wer(state.model, dev_samples)
    row["dev_wer"] = wer
    hist["epochs"].append(row)
    log(f"epoch {epoch} step {state.step} stage {state.stage} dev WER {wer:.2f}%"
        + (f" spk acc {row['dev_spk_acc']:.3f}" if "dev_spk_acc" in row else ""))
    if hist["best_dev_wer"] is None or wer < hist["best_dev_wer"]:
        hist["best_dev_wer"] = wer
        save_state(out / "best.ckpt", state, model_cfg)
    if state.stage == "I" and state.step < cfg.total_steps and (
            hist["stale_epochs"] >= cfg.stage1_patience or state.step >= cfg.stage1_cap):
        _finish_stage1(state, model_cfg, out, log)


def _finish_stage1(state: TrainState, model_cfg, out: Path, log) -> None:
    state.history["stage1_end"] = state.step
    save_state(out / "stage1.ckpt", state, model_cfg)
    enter_stage2(state)
    log(f"stage II from step {state.step}")


def overfit(cfg: TrainConfig, model_cfg: ModelConfig, samples: Sequence[Sample], max_steps: int = 2000,
            check_every: int = 100, target_wer: float = 5.0, beam_width: int = 10,
            log: Callable[[str], None] | None = None) -> dict:
    """Stage-I training on a small set until its own WER drops to ``target_wer``.

    The schedule spans ``max_steps``; training WER is measured every
    ``check_every`` steps with beam decoding.
    """
    from dataclasses import replace

    from .evaluate import evaluate

    log = log or (lambda msg: None)
    setup_torch(cfg.threads)
    cfg = replace(cfg, total_steps=max_steps, stage1_max_fraction=1.0)
    speakers = sorted({s.speaker for s in samples})
    state = init_state(cfg, model_cfg, {spk: i for i, spk in enumerate(speakers)})
    curve = []
    wer = None
    while state.step < max_steps:
        m = stage1_step(state, training_batch(state, samples))
        if state.step % check_every == 0 or state.step == max_steps:
            wer = evaluate(state.model, samples, beam_width=beam_width)["summary"]["corpus"]["wer"]
            curve.append({"step": state.step, "loss": m["loss"], "wer": wer})
            log(f"overfit step {state.step} loss {m['loss']:.4f} WER {wer:.2f}%")
            if wer <= target_wer:
                break
    return {"steps": state.step, "wer": wer, "reached": wer is not None and wer <= target_wer,
            "curve": curve, "model": state.model}
