import copy
import json
import math

import numpy as np
import pytest
import torch

from conftest import tiny_model_config
from lipvsr.model import make_batch
from lipvsr.trainer import (TrainConfig, TrainingError, enter_stage2, init_state, load_model, lr_schedule,
                            parameter_hash, run_training, stage1_step, stage2_step, training_batch)


def _cfg(**kw):
    base = dict(batch_size=4, total_steps=40, warmup_steps=4, seed=0)
    base.update(kw)
    return TrainConfig(**base)


def _state(cfg=None, **kw):
    return init_state(cfg or _cfg(**kw), tiny_model_config(), {0: 0, 1: 1})


def test_lr_schedule():
    assert lr_schedule(0, 100, 1000, 3e-4) == 0.0
    assert lr_schedule(100, 100, 1000, 3e-4) == 3e-4
    assert lr_schedule(1000, 100, 1000, 3e-4) == pytest.approx(0.0, abs=1e-20)
    assert lr_schedule(50, 100, 1000, 3e-4) == pytest.approx(1.5e-4)
    assert lr_schedule(550, 100, 1000, 3e-4) == pytest.approx(1.5e-4)
    with pytest.raises(ValueError):
        lr_schedule(1001, 100, 1000, 3e-4)


def test_config_validation_and_round_trip():
    with pytest.raises(ValueError):
        TrainConfig(alpha1=1.5)
    with pytest.raises(ValueError):
        TrainConfig(warmup_steps=10, total_steps=10)
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"learning_rate": 1.0})
    cfg = TrainConfig(mi=False, seed=3)
    assert TrainConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg
    assert TrainConfig(total_steps=900).stage1_cap == 360


def _params(model):
    return {n: p.detach().clone() for n, p in model.named_parameters()}


def test_alpha1_zero_gives_pure_vsr_update(small_corpus):
    state = _state(alpha1=0.0)
    oracle = copy.deepcopy(state)
    batch = training_batch(state, small_corpus)
    stage1_step(state, batch)
    # oracle: same optimizer, loss without the speaker term at all
    model, opt = oracle.model, oracle.optimizer
    for g in opt.param_groups:
        g["lr"] = lr_schedule(0, 4, 40, 3e-4)
    model.train()
    _, hlb, _ = model.encode(batch)
    l_ctc, l_ce = model.vsr_losses(hlb, batch)
    opt.zero_grad(set_to_none=True)
    (0.1 * l_ctc + 0.9 * l_ce).backward()
    torch.nn.utils.clip_grad_norm_([p for p in model.parameters() if p.grad is not None], 5.0)
    opt.step()
    got, want = _params(state.model), _params(model)
    for n in got:
        if n.startswith("speaker."):
            continue
        assert torch.allclose(got[n], want[n], atol=1e-7, rtol=0), n


def test_stage1_metrics_and_arithmetic(small_corpus):
    state = _state()
    m = stage1_step(state, training_batch(state, small_corpus))
    assert m["step"] == 0 and m["stage"] == "I" and state.step == 1
    assert m["loss"] == pytest.approx(m["l_vsr"] + 0.2 * m["l_id"], rel=1e-6)
    assert m["l_vsr"] == pytest.approx(0.1 * m["l_ctc"] + 0.9 * m["l_ce"], rel=1e-6)
    assert m["l_minMI"] is None and 0.0 <= m["spk_acc"] <= 1.0
    with pytest.raises(TrainingError):
        stage2_step(state, training_batch(state, small_corpus))


def _stage2_pair(small_corpus, **kw):
    state = _state(**kw)
    stage1_step(state, training_batch(state, small_corpus))
    enter_stage2(state)
    return state


def test_stage2_freezes_speaker_head(small_corpus):
    state = _stage2_pair(small_corpus)
    before = parameter_hash(state.model.speaker)
    running = state.model.speaker.bn.running_mean.clone()
    for _ in range(3):
        m = stage2_step(state, training_batch(state, small_corpus))
        assert m["loss"] == pytest.approx(m["l_vsr"] + 0.2 * (m["l_minMI"] + m["l_maxMI"]), rel=1e-6)
    assert parameter_hash(state.model.speaker) == before == state.speaker_hash
    assert torch.equal(state.model.speaker.bn.running_mean, running)
    with pytest.raises(TrainingError):
        stage1_step(state, training_batch(state, small_corpus))


def test_alpha2_zero_matches_vsr_only_update(small_corpus):
    a = _stage2_pair(small_corpus, alpha2=0.0)
    b = _stage2_pair(small_corpus, mi=False)
    batch = training_batch(a, small_corpus)
    ma, mb = stage2_step(a, batch), stage2_step(b, batch)
    assert ma["l_minMI"] is not None and mb["l_minMI"] is None and mb["l_mi"] is None
    pa, pb = _params(a.model), _params(b.model)
    for n in pa:
        assert torch.allclose(pa[n], pb[n], atol=1e-7, rtol=0), n


def test_non_finite_loss_aborts(small_corpus):
    state = _state()
    with torch.no_grad():
        state.model.ctc_head.bias[0] = math.nan
    with pytest.raises(TrainingError, match="non-finite loss at step 0"):
        stage1_step(state, training_batch(state, small_corpus))


def test_steps_are_deterministic(small_corpus):
    a, b = _state(), _state()
    for _ in range(2):
        assert stage1_step(a, training_batch(a, small_corpus)) == stage1_step(b, training_batch(b, small_corpus))
    assert parameter_hash(a.model) == parameter_hash(b.model)


def _split(corpus):
    return corpus[:16], corpus[16:]


def test_resume_is_bit_exact(tmp_path, small_corpus):
    train, dev = _split(small_corpus)
    cfg = _cfg(total_steps=12, stage1_max_fraction=0.4)
    run_training(cfg, tiny_model_config(), train, dev, tmp_path / "full")
    part = run_training(cfg, tiny_model_config(), train, dev, tmp_path / "part", stop_after=7)
    assert part.report == {} and part.state.step == 7
    run_training(cfg, tiny_model_config(), train, dev, tmp_path / "part", resume=True)
    for name in ("final.ckpt", "best.ckpt", "stage1.ckpt", "report.json", "metrics.jsonl"):
        assert (tmp_path / "full" / name).read_bytes() == (tmp_path / "part" / name).read_bytes(), name
    report = json.loads((tmp_path / "full" / "report.json").read_text())
    assert report["stage1_end"] == 4 and report["steps"] == 12
    assert all(e["dev_wer"] >= 0 for e in report["epochs"])
    model, meta = load_model(tmp_path / "full" / "final.ckpt")
    assert meta["stage"] == "II" and parameter_hash(model) == report["final_parameter_hash"]


def test_resume_without_checkpoint(tmp_path, small_corpus):
    with pytest.raises(TrainingError, match="last.ckpt"):
        run_training(_cfg(), tiny_model_config(), small_corpus, small_corpus, tmp_path, resume=True)


def test_mi_off_skips_mi_terms(tmp_path, small_corpus):
    train, dev = _split(small_corpus)
    res = run_training(_cfg(total_steps=8, mi=False, stage1_max_fraction=0.5), tiny_model_config(), train, dev,
                       tmp_path)
    rows = [json.loads(l) for l in (tmp_path / "metrics.jsonl").read_text().splitlines()]
    stage2 = [r for r in rows if r["stage"] == "II"]
    assert stage2 and all(r["l_minMI"] is None and r["l_maxMI"] is None for r in stage2)
    assert res.state.estimators is None


@pytest.mark.slow
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_loss_decreases_on_overfit_set(small_corpus, seed):
    state = _state(total_steps=200, warmup_steps=20, seed=seed)
    losses = [stage1_step(state, training_batch(state, small_corpus))["loss"] for _ in range(200)]
    assert np.polyfit(np.arange(200), losses, 1)[0] < 0
    assert np.mean(losses[-20:]) < np.mean(losses[:20])


def _min_mi_slope(corpus, seed, alpha2=0.2):
    """Least-squares slope of the 20-step moving average of l_minMI over 200 stage-II steps."""
    state = _state(total_steps=300, warmup_steps=20, seed=seed, alpha2=alpha2)
    for _ in range(100):
        stage1_step(state, training_batch(state, corpus))
    enter_stage2(state)
    series = [stage2_step(state, training_batch(state, corpus))["l_minMI"] for _ in range(200)]
    smooth = np.convolve(series, np.ones(20) / 20, mode="valid")
    return np.polyfit(np.arange(len(smooth)), smooth, 1)[0]


@pytest.mark.slow
@pytest.mark.xfail(strict=True, reason="the freshly initialized variational net keeps tightening during stage II, "
                                        "so the vCLUB estimate rises even while it is being minimized")
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_min_mi_trend_is_non_increasing(small_corpus, seed):
    slope = _min_mi_slope(small_corpus, seed)
    assert slope <= 0, f"smoothed l_minMI slope {slope:.2e} per step"


@pytest.mark.slow
@pytest.mark.parametrize("seed", [0, 1])
def test_min_mi_pressure_flattens_the_estimate(small_corpus, seed):
    assert _min_mi_slope(small_corpus, seed, alpha2=0.2) < _min_mi_slope(small_corpus, seed, alpha2=0.0)


@pytest.mark.slow
def test_speaker_accuracy_after_stage1(small_corpus):
    from lipvsr.trainer import speaker_accuracy
    state = _state(total_steps=150, warmup_steps=15, seed=0)
    for _ in range(150):
        stage1_step(state, training_batch(state, small_corpus))
    assert speaker_accuracy(state.model, small_corpus, state.speaker_index) >= 0.95
