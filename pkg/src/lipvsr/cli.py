"""Command-line entry point.

Every subcommand reads an optional JSON config (``--config``), applies
``--set section.key=value`` overrides and its own flags (flags win), writes the
resolved config to the output directory and exits 0 on success, 1 on runtime
errors and 2 on usage errors.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import sys
from dataclasses import asdict
from pathlib import Path

CONFIG_VERSION = 1


class UsageError(Exception):
    pass


def default_config() -> dict:
    from .corpus import CorpusConfig
    from .evaluate import HarnessConfig
    from .trainer import TrainConfig

    h = asdict(HarnessConfig())
    h["held_out"] = list(h["held_out"])
    return {
        "version": CONFIG_VERSION,
        "corpus": CorpusConfig(height=48, width=48).to_dict(),
        "split": {"held_out": [6, 7], "dev_per_speaker": 10},
        "model": {"preset": "desk"},
        "train": TrainConfig().to_dict(),
        "eval": {"beam_width": 10, "batch_size": 16},
        "mi_bench": {"seeds": [0, 1, 2, 3, 4], "rho": 0.9, "batch": 512, "steps": 500},
        "harness": h,
    }


def _merge(base: dict, update: dict, path: str = "") -> dict:
    for k, v in update.items():
        if isinstance(v, dict) and isinstance(base.get(k), dict):
            _merge(base[k], v, f"{path}{k}.")
        else:
            base[k] = v
    return base


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def load_config(path: str | None, overrides: list[str]) -> tuple[dict, str | None]:
    """Resolved config and the verbatim text of the config file (if any)."""
    cfg = default_config()
    raw = None
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise UsageError(f"config file not found: {path}")
        raw = p.read_text()
        try:
            user = json.loads(raw)
        except json.JSONDecodeError as e:
            raise UsageError(f"{path}: invalid JSON ({e})") from e
        if not isinstance(user, dict):
            raise UsageError(f"{path}: top level must be an object")
        version = user.pop("version", None)
        if version != CONFIG_VERSION:
            raise UsageError(f"{path}: unsupported config version {version!r} (expected {CONFIG_VERSION})")
        unknown = set(user) - set(cfg)
        if unknown:
            raise UsageError(f"{path}: unknown section(s) {sorted(unknown)}")
        _merge(cfg, user)
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep or "." not in key:
            raise UsageError(f"override must look like section.key=value, got {item!r}")
        section, *inner, leaf = key.split(".")
        if section not in cfg or not isinstance(cfg[section], dict):
            raise UsageError(f"unknown config section {section!r} in override {item!r}")
        node = cfg[section]
        for part in inner:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise UsageError(f"override {item!r} descends into a non-section value")
        node[leaf] = _parse_value(value)
    return cfg, raw


def model_config(section: dict, num_speakers: int):
    from .model import ModelConfig

    section = copy.deepcopy(section)
    preset = section.pop("preset", "desk")
    presets = {"desk": ModelConfig.desk, "paper": ModelConfig.paper, "micro": ModelConfig.micro}
    if preset not in presets:
        raise UsageError(f"unknown model preset {preset!r}; choose from {sorted(presets)}")
    base = presets[preset]().to_dict()
    _merge(base, section)
    base["num_speakers"] = num_speakers
    try:
        return ModelConfig(**base)
    except TypeError as e:
        raise UsageError(f"invalid model config: {e}") from e


def _echo(out: Path, cfg: dict, raw: str | None) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")
    if raw is not None:
        (out / "config.input.json").write_text(raw)


def _corpus_config(cfg: dict):
    from .corpus import CorpusConfig

    try:
        return CorpusConfig(**cfg["corpus"])
    except TypeError as e:
        raise UsageError(f"invalid corpus config: {e}") from e


def _load_samples(args, cfg):
    """Samples and split assignment from ``--corpus`` or generated from the config."""
    from .corpus import generate_corpus, load_corpus
    from .evaluate import split_assignments

    if args.corpus:
        samples, splits = load_corpus(args.corpus)
        if set(splits.values()) <= {"all"}:
            splits = split_assignments(samples, cfg["split"]["held_out"], cfg["split"]["dev_per_speaker"],
                                       cfg["corpus"]["seed"])
        return samples, splits
    samples = generate_corpus(_corpus_config(cfg))
    return samples, split_assignments(samples, cfg["split"]["held_out"], cfg["split"]["dev_per_speaker"],
                                      cfg["corpus"]["seed"])


def _select(samples, splits, name):
    chosen = [s for s in samples if name == "all" or splits.get(s.sample_id) == name]
    if not chosen:
        raise RuntimeError(f"no samples in split {name!r}")
    return chosen


# --- subcommands ----------------------------------------------------------------

def cmd_generate(args, cfg, out: Path) -> int:
    from .corpus import generate_corpus, save_corpus
    from .evaluate import split_assignments

    if args.seed is not None:
        cfg["corpus"]["seed"] = args.seed
    for flag, key in (("speakers", "speakers"), ("per_speaker", "per_speaker"), ("frames", "frames"),
                      ("height", "height"), ("width", "width")):
        if getattr(args, flag) is not None:
            cfg["corpus"][key] = getattr(args, flag)
    _echo(out, cfg, args.raw_config)
    ccfg = _corpus_config(cfg)
    samples = generate_corpus(ccfg)
    splits = split_assignments(samples, cfg["split"]["held_out"], cfg["split"]["dev_per_speaker"], ccfg.seed) \
        if cfg["split"]["held_out"] and set(cfg["split"]["held_out"]) < {s.speaker for s in samples} else None
    save_corpus(out, samples, splits, ccfg)
    print(f"wrote {len(samples)} samples to {out}")
    return 0


def cmd_train(args, cfg, out: Path) -> int:
    from .evaluate import evaluate, partition, write_records
    from .trainer import TrainConfig, load_model, run_training

    if args.seed is not None:
        cfg["train"]["seed"] = args.seed
    if args.steps is not None:
        cfg["train"]["total_steps"] = args.steps
    cfg["train"]["threads"] = args.threads
    _echo(out, cfg, args.raw_config)
    samples, splits = _load_samples(args, cfg)
    train, dev, test = partition(samples, splits)
    try:
        tcfg = TrainConfig.from_dict(cfg["train"])
    except (TypeError, ValueError) as e:
        raise UsageError(f"invalid train config: {e}") from e
    mcfg = model_config(cfg["model"], len({s.speaker for s in train}))
    result = run_training(tcfg, mcfg, train, dev, out, resume=args.resume, log=print)
    if result.report and test:
        model, _ = load_model(out / "best.ckpt")
        ev = evaluate(model, test, beam_width=cfg["eval"]["beam_width"], batch_size=cfg["eval"]["batch_size"])
        write_records(out / "test_decode.jsonl", ev["records"])
        (out / "test_eval.json").write_text(json.dumps(ev["summary"], indent=2, sort_keys=True) + "\n")
        print(f"test WER {ev['summary']['corpus']['wer']:.2f}%")
    return 0


def _checkpoint_and_samples(args, cfg):
    from .trainer import load_model

    if not Path(args.checkpoint).is_file():
        raise UsageError(f"checkpoint not found: {args.checkpoint}")
    model, meta = load_model(args.checkpoint)
    samples, splits = _load_samples(args, cfg)
    return model, meta, samples, splits


def cmd_decode(args, cfg, out: Path) -> int:
    from .evaluate import decode_records, transcribe_all, write_records

    beam = args.beam if args.beam is not None else cfg["eval"]["beam_width"]
    cfg["eval"]["beam_width"] = beam
    _echo(out, cfg, args.raw_config)
    model, _, samples, splits = _checkpoint_and_samples(args, cfg)
    chosen = _select(samples, splits, args.split)
    hyps = transcribe_all(model, chosen, beam, cfg["eval"]["batch_size"])
    records = decode_records(chosen, hyps)
    write_records(out / "decode.jsonl", records)
    for r in records:
        print(f"{r['sample_id']}\t{r['hypothesis']}")
    return 0


def cmd_eval(args, cfg, out: Path) -> int:
    from .evaluate import evaluate, write_records

    beam = args.beam if args.beam is not None else cfg["eval"]["beam_width"]
    cfg["eval"]["beam_width"] = beam
    _echo(out, cfg, args.raw_config)
    model, _, samples, splits = _checkpoint_and_samples(args, cfg)
    chosen = _select(samples, splits, args.split)
    ev = evaluate(model, chosen, beam_width=beam, batch_size=cfg["eval"]["batch_size"])
    write_records(out / "decode.jsonl", ev["records"])
    (out / "eval.json").write_text(json.dumps(ev["summary"], indent=2, sort_keys=True) + "\n")
    summ = ev["summary"]
    print(f"corpus WER {summ['corpus']['wer']:.2f}% over {summ['corpus']['N']} words")
    for spk, row in summ["per_speaker"].items():
        print(f"  speaker {spk}: {row['wer']:.2f}% ({row['N']} words)")
    return 0


def cmd_ablate(args, cfg, out: Path) -> int:
    from .evaluate import HarnessConfig, cross_speaker_harness, format_table

    if args.seed is not None:
        cfg["harness"]["corpus_seed"] = args.seed
        cfg["harness"]["train_seed"] = args.seed
    if args.steps is not None:
        cfg["harness"]["total_steps"] = args.steps
    _echo(out, cfg, args.raw_config)
    try:
        hc = HarnessConfig(**cfg["harness"])
    except TypeError as e:
        raise UsageError(f"invalid harness config: {e}") from e
    mcfg = model_config(cfg["model"], hc.speakers - len(hc.held_out))
    report = cross_speaker_harness(hc, out, mcfg, log=print)
    print(format_table({"rows": report["ablation"], **({"mi_delta": report["mi_delta"]}
                                                       if report["mi_delta"] else {})}))
    return 0


def cmd_mi_bench(args, cfg, out: Path) -> int:
    from .mi import gaussian_benchmark

    mb = cfg["mi_bench"]
    seeds = mb["seeds"] if args.seed is None else [args.seed]
    _echo(out, cfg, args.raw_config)
    rows = []
    with open(out / "mi_bench.jsonl", "w") as fh:
        for seed in seeds:
            row = gaussian_benchmark(int(seed), rho=mb["rho"], batch=mb["batch"], steps=mb["steps"])
            rows.append(row)
            fh.write(json.dumps(row, sort_keys=True) + "\n")
            print(f"seed {seed}: vCLUB {row['vclub']:.4f} nats (true MI {row['true_mi']:.4f}, "
                  f"limit for an exact q {row['club_limit']:.4f})")
    return 0


def cmd_dump_attention(args, cfg, out: Path) -> int:
    import torch

    from .corpus import FIRST_LANDMARK
    from .model import make_batch

    _echo(out, cfg, args.raw_config)
    model, _, samples, _ = _checkpoint_and_samples(args, cfg)
    matches = [s for s in samples if s.sample_id == args.sample] if args.sample else samples[:1]
    if not matches:
        raise RuntimeError(f"sample {args.sample!r} not found")
    sample = matches[0]
    batch = make_batch([sample], model)
    with torch.no_grad():
        _, attn = model.frontend(batch.patches, batch.tracks, batch.frame_width)
    attn = attn[0].to(torch.float64)                  # layers × heads × T × K × K
    L, Hh, T, K, _ = attn.shape
    if L == 0:
        raise RuntimeError("model has no fusion layers")
    avg = attn.mean(dim=(0, 1))
    labels = [FIRST_LANDMARK + k for k in range(K)] if model.cfg.frontend.patch_mode == "landmark" \
        else ["mouth"] * K
    with open(out / "attention_avg.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame", "query"] + labels)
        for t in range(T):
            for i in range(K):
                w.writerow([t, labels[i]] + [repr(v) for v in avg[t, i].tolist()])
    with open(out / "attention_raw.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["layer", "head", "frame", "query", "key", "weight"])
        for l in range(L):
            for h in range(Hh):
                for t in range(T):
                    for i in range(K):
                        for j in range(K):
                            w.writerow([l, h, t, labels[i], labels[j], repr(attn[l, h, t, i, j].item())])
    print(f"attention of {sample.sample_id}: {L} layers × {Hh} heads × {T} frames written to {out}")
    return 0


def cmd_selftest(args, cfg, out: Path) -> int:
    from .checks import run_selftest

    return 0 if run_selftest() else 1


COMMANDS = {
    "generate": cmd_generate, "train": cmd_train, "decode": cmd_decode, "eval": cmd_eval,
    "ablate": cmd_ablate, "mi-bench": cmd_mi_bench, "dump-attention": cmd_dump_attention,
    "selftest": cmd_selftest,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lipvsr", description="Cross-speaker lip reading toolkit.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def common(p, out_default):
        p.add_argument("--config", help="JSON config file (see README for the schema)")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="override one config entry; may repeat")
        p.add_argument("--seed", type=int, help="seed for this command")
        p.add_argument("--threads", type=int, default=1, help="torch intra-op threads (default 1)")
        p.add_argument("--out", default=out_default, help=f"output directory (default {out_default})")

    p = sub.add_parser("generate", help="synthesize a corpus")
    common(p, "corpus")
    p.add_argument("--speakers", type=int)
    p.add_argument("--per-speaker", dest="per_speaker", type=int)
    p.add_argument("--frames", type=int)
    p.add_argument("--height", type=int)
    p.add_argument("--width", type=int)

    p = sub.add_parser("train", help="two-stage training")
    common(p, "run")
    p.add_argument("--corpus", help="corpus directory from `generate` (default: generate from config)")
    p.add_argument("--steps", type=int, help="total training steps")
    p.add_argument("--resume", action="store_true", help="continue from <out>/last.ckpt")

    for name, helptext in (("decode", "transcribe samples"), ("eval", "word error rate of a checkpoint")):
        p = sub.add_parser(name, help=helptext)
        common(p, name)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--corpus")
        p.add_argument("--split", default="test", choices=["train", "dev", "test", "all"])
        p.add_argument("--beam", type=int, help="beam width (1 = greedy)")

    p = sub.add_parser("ablate", help="desk-scale unseen-speaker ablation table")
    common(p, "ablation")
    p.add_argument("--steps", type=int, help="training steps per variant")

    p = sub.add_parser("mi-bench", help="vCLUB on correlated Gaussians")
    common(p, "mi_bench")

    p = sub.add_parser("dump-attention", help="export landmark attention maps as CSV")
    common(p, "attention")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus")
    p.add_argument("--sample", help="sample id (default: first sample)")

    p = sub.add_parser("selftest", help="CTC oracle, gradient and MI identity checks")
    common(p, "selftest")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)     # exits 2 on usage errors
    try:
        cfg, raw = load_config(args.config, args.overrides)
        args.raw_config = raw
        if args.threads < 1:
            raise UsageError("--threads must be at least 1")
        import torch

        torch.set_num_threads(args.threads)
        torch.use_deterministic_algorithms(True)
        return COMMANDS[args.command](args, cfg, Path(args.out))
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"lipvsr {args.command}: usage error: {e}", file=sys.stderr)
        return 2
    except Exception as e:                       # runtime failure: categorized diagnostic
        print(f"lipvsr {args.command}: error [{type(e).__name__}]: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
