"""Numerical self-checks: CTC against enumeration, finite differences, MI identities.

Used by the ``selftest`` command and the acceptance tests.  Every check returns
a ``CheckResult``; nothing here raises on a failed comparison.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch
import torch.nn as nn

from .backend import ConformerBlock, ConformerConfig, ConvModule
from .decoder import (DecoderBlock, DecoderConfig, InfeasibleAlignmentError, ce_loss, ctc_brute_force, ctc_loss,
                      vsr_loss)
from .frontend import (AttentiveFusion, FusionBlock, MotionEncoder, RelativePositionEncoder,
                       TubeletEncoder)
from .layers import FeedForward, MultiHeadAttention
from .mi import ScoreNet, VariationalNet, jsd_estimate, mi_loss, vclub_estimate
from .speaker import SpeakerHead, speaker_loss_from_logits
from .tensor import (Conv2d, LayerNorm, conv2d, grad_check, init_uniform_, layer_norm, log_softmax,
                     module_grad_check, softmax, swish)


@dataclass
class CheckResult:
    name: str
    passed: bool
    value: float
    tolerance: float
    detail: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        extra = f" ({self.detail})" if self.detail else ""
        return f"[{status}] {self.name}: {self.value:.3e} (tol {self.tolerance:.1e}){extra}"


# --- CTC -----------------------------------------------------------------------

def ctc_oracle_grid(draws: int = 50, seed: int = 0, tol: float = 1e-9) -> CheckResult:
    """Recursion vs path enumeration for T in 1..5, V in 2..4, |y| in 0..3."""
    rng = np.random.default_rng(seed)
    worst, cases, infeasible = 0.0, 0, 0
    agree = True
    for T in range(1, 6):
        for V in range(2, 5):
            for n in range(0, 4):
                for _ in range(draws):
                    logits = torch.from_numpy(rng.normal(scale=2.0, size=(T, V)))
                    target = [int(v) for v in rng.integers(1, V, size=n)]
                    ref = ctc_brute_force(logits, target)
                    try:
                        got = ctc_loss(logits, target).item()
                    except InfeasibleAlignmentError:
                        got = math.inf
                    cases += 1
                    if math.isinf(ref) or math.isinf(got):
                        infeasible += 1
                        agree &= math.isinf(ref) and math.isinf(got)
                        continue
                    worst = max(worst, abs(got - ref))
    passed = agree and worst <= tol
    return CheckResult("ctc vs enumeration", passed, worst, tol,
                       f"{cases} cases, {infeasible} infeasible" + ("" if agree else ", infeasibility mismatch"))


# --- gradient checks -------------------------------------------------------------

def _gen(seed):
    return torch.Generator().manual_seed(seed)


def _randn(*shape, seed=0):
    return torch.randn(*shape, generator=_gen(seed), dtype=torch.float64)


def _module(m: nn.Module, seed: int = 0) -> nn.Module:
    m = m.to(torch.float64)
    init_uniform_(m, _gen(seed))
    # give normalization affine parameters non-trivial values
    with torch.no_grad():
        for sub in m.modules():
            if isinstance(sub, (nn.modules.batchnorm._BatchNorm, LayerNorm)):
                sub.weight.copy_(1.0 + 0.3 * _randn(*sub.weight.shape, seed=seed + 1))
                sub.bias.copy_(0.2 * _randn(*sub.bias.shape, seed=seed + 2))
    return m


def _weighted(y: torch.Tensor, seed: int = 99) -> torch.Tensor:
    """A generic scalar readout so every output coordinate matters."""
    return (y * _randn(*y.shape, seed=seed)).sum()


def _input_and_params(name: str, module: nn.Module, make_input: Callable[[], torch.Tensor],
                      forward: Callable | None = None, tol: float = 1e-4) -> CheckResult:
    forward = forward or (lambda m, x: m(x))
    x0 = make_input()
    e_in = grad_check(lambda x: _weighted(_out(forward(module, x))), x0)
    e_par = module_grad_check(module, lambda m: _weighted(_out(forward(m, x0))), max_coords=200)
    worst = max(e_in, e_par)
    return CheckResult(f"grad {name}", worst <= tol, worst, tol, f"input {e_in:.1e}, params {e_par:.1e}")


def _out(y):
    return y[0] if isinstance(y, tuple) else y


def layer_gradient_checks(tol: float = 1e-4) -> list[CheckResult]:
    """Finite-difference checks for every layer type, w.r.t. inputs and parameters."""
    res = []
    res.append(_input_and_params("linear", _module(nn.Linear(5, 4)), lambda: _randn(3, 5)))
    res.append(_input_and_params("conv1d", _module(nn.Conv1d(3, 4, 3, padding=1)), lambda: _randn(2, 3, 6)))
    res.append(_input_and_params("conv2d (generic)", _module(Conv2d(2, 3, 3, stride=2, padding=1)),
                                 lambda: _randn(2, 2, 5, 5)))
    res.append(_input_and_params("conv2d (single output)", _module(Conv2d(2, 3, 3, stride=2, padding=1, bias=False)),
                                 lambda: _randn(2, 2, 2, 2)))
    res.append(_input_and_params("conv3d", _module(nn.Conv3d(1, 3, (3, 3, 3), stride=(1, 2, 2),
                                                             padding=(1, 1, 1), bias=False)),
                                 lambda: _randn(2, 1, 3, 5, 5)))
    res.append(_input_and_params("batchnorm1d (train)", _module(nn.BatchNorm1d(4)), lambda: _randn(5, 4)))
    res.append(_input_and_params("batchnorm3d (train)", _module(nn.BatchNorm3d(2)), lambda: _randn(2, 2, 2, 3, 3)))
    res.append(_input_and_params("layernorm", _module(LayerNorm(6)), lambda: _randn(3, 6)))
    res.append(_input_and_params("feedforward", _module(FeedForward(6, 10)), lambda: _randn(4, 6)))
    res.append(_input_and_params("multihead attention", _module(MultiHeadAttention(6, 2)), lambda: _randn(2, 4, 6)))
    res.append(_input_and_params("conv module", _module(ConvModule(6, 3)), lambda: _randn(2, 5, 6)))
    res.append(_input_and_params("conformer block",
                                 _module(ConformerBlock(ConformerConfig(blocks=1, model_dim=6, ff_dim=8,
                                                                        heads=2, depthwise_kernel=3))),
                                 lambda: _randn(2, 5, 6)))
    res.append(_input_and_params("tubelet encoder", _module(TubeletEncoder((2, 3, 4), 3)),
                                 lambda: _randn(2, 3, 2, 8, 8)))
    res.append(_input_and_params("fusion block", _module(FusionBlock(6, 2, 8)), lambda: _randn(3, 4, 6)))
    res.append(_input_and_params("attentive fusion", _module(AttentiveFusion(6, 2, 2, 8)),
                                 lambda: _randn(2, 3, 4, 6)))
    res.append(_input_and_params("relative position encoder", _module(RelativePositionEncoder(4, 5, 6)),
                                 lambda: 40 * _randn(2, 3, 4, 2), lambda m, x: m(x, 48.0)))
    res.append(_input_and_params("motion encoder", _module(MotionEncoder(10, 3, ((0, 2), (1, 3)))),
                                 lambda: 40 * _randn(2, 4, 4, 2), lambda m, x: m(x, 48.0)))
    res.append(_input_and_params("speaker head", _module(SpeakerHead(6, 4, 3)), lambda: _randn(4, 5, 6)))
    res.append(_input_and_params("variational net", _module(VariationalNet(4, 3, 5)), lambda: _randn(4, 4),
                                 lambda m, x: torch.cat(m(x), -1)))
    res.append(_input_and_params("score net", _module(ScoreNet(3, 3, 5)), lambda: _randn(4, 6),
                                 lambda m, x: m(x[:, :3], x[:, 3:])))
    memory = _randn(2, 5, 6, seed=7)
    mask = torch.tril(torch.ones(4, 4, dtype=torch.bool))
    res.append(_input_and_params("decoder block", _module(DecoderBlock(DecoderConfig(layers=1, model_dim=6, ff_dim=8, heads=2))), lambda: _randn(2, 4, 6),
                                 lambda m, x: m(x, memory, mask)))
    # parameter-free functions
    fns = {
        "softmax": lambda x: _weighted(softmax(x, -1)),
        "log_softmax": lambda x: _weighted(log_softmax(x, -1)),
        "swish": lambda x: _weighted(swish(x)),
        "relu": lambda x: _weighted(torch.relu(x)),
        "layer_norm fn": lambda x: _weighted(layer_norm(x)),
        "max_pool3d": lambda x: _weighted(torch.nn.functional.max_pool3d(x, (1, 3, 3), (1, 2, 2), (0, 1, 1))),
        "ctc loss": lambda x: ctc_loss(x, [4, 5, 5]),
        "ce loss": lambda x: ce_loss(x.reshape(1, 5, 6), torch.tensor([[2, 3, 1, -1, 0]])),
        "vclub estimate": lambda x: vclub_estimate(x[:, :2], x[:, 2:], _module(VariationalNet(2, 4, 5), 3)),
        "jsd estimate": lambda x: jsd_estimate(x[:, :3], x[:, 3:], _module(ScoreNet(3, 3, 5), 4)),
    }
    shapes = {"max_pool3d": (1, 2, 2, 5, 5), "ctc loss": (7, 6), "ce loss": (5, 6),
              "vclub estimate": (5, 6), "jsd estimate": (5, 6)}
    for name, f in fns.items():
        err = grad_check(f, _randn(*shapes.get(name, (3, 5)), seed=11))
        res.append(CheckResult(f"grad {name}", err <= tol, err, tol))
    e = grad_check(lambda x: conv2d(x, _randn(3, 2, 3, 3, seed=5), stride=2, padding=1).pow(2).sum(),
                   _randn(2, 2, 1, 1))
    res.append(CheckResult("grad conv2d 1x1 input", e <= tol, e, tol))
    return res


def micro_model_loss(model, batch, stage: int, estimators=None, alpha: float = 0.2, lam: float = 0.1):
    """Stage-I (L_VSR + a*L_ID) or stage-II (L_VSR + a*L_MI) objective of the composed model."""
    h0, hlb, _ = model.encode(batch)
    l_ctc, l_ce = model.vsr_losses(hlb, batch)
    l_vsr = vsr_loss(l_ctc, l_ce, lam)
    h_id, logits = model.speaker(h0)
    if stage == 1:
        return l_vsr + alpha * speaker_loss_from_logits(logits, batch.speakers)
    total, _, _ = mi_loss(h_id, h0, hlb, estimators.q, estimators.score)
    return l_vsr + alpha * total


def micro_batch(frames: int = 3, landmarks: int = 4, seed: int = 0):
    """A 3-sample float64 batch for the micro model (transcripts short enough for T=3)."""
    from .decoder import VOCAB
    from .model import Batch

    g = _gen(seed)
    B, P = 3, 8
    texts = ["ab", "c", "d e"][:B] if frames >= 5 else ["ab", "c", "de"]
    return Batch(
        patches=torch.rand(B, frames, landmarks, P, P, generator=g, dtype=torch.float64),
        tracks=24 + 8 * torch.randn(B, frames, landmarks, 2, generator=g, dtype=torch.float64),
        frame_width=48.0,
        targets=[VOCAB.encode(t) for t in texts],
        speakers=torch.tensor([0, 1, 0]),
        transcripts=texts,
        sample_ids=[f"m{i}" for i in range(B)],
    )


def micro_model_checks(tol: float = 1e-4, max_coords: int = 400) -> list[CheckResult]:
    """Composed micro model (T=3, K=4) in both training stages, parameters and pixel inputs."""
    from .model import LipReader, MIEstimators, ModelConfig

    cfg = ModelConfig.micro()
    model = LipReader(cfg, seed=0)
    model.train()
    est = MIEstimators(cfg, seed=1)
    batch = micro_batch()
    out = []
    e1 = module_grad_check(model, lambda m: micro_model_loss(m, batch, 1), max_coords=max_coords)
    out.append(CheckResult("grad micro model stage I (params)", e1 <= tol, e1, tol))
    e2 = module_grad_check(model, lambda m: micro_model_loss(m, batch, 2, est), max_coords=max_coords)
    out.append(CheckResult("grad micro model stage II (params)", e2 <= tol, e2, tol))

    def f(patches):
        b = micro_batch()
        b.patches = patches
        return micro_model_loss(model, b, 1)
    e3 = grad_check(f, batch.patches, indices=range(0, batch.patches.numel(), 7))
    out.append(CheckResult("grad micro model (pixels)", e3 <= tol, e3, tol))
    return out


# --- MI identities ----------------------------------------------------------------

class _ZeroScore(ScoreNet):
    def forward(self, x, y):
        return (x.sum(-1) + y.sum(-1)) * 0.0


class _ConstantQ(VariationalNet):
    """q(y|x) that ignores x: a learned-looking but fixed mean and variance."""

    def forward(self, x):
        mu = self.mu(torch.zeros_like(x))
        logvar = self.logvar(torch.zeros_like(x)).clamp(-10.0, 10.0)
        return mu, logvar


def mi_closed_form_checks(tol: float = 1e-9) -> list[CheckResult]:
    g = _gen(0)
    xs = torch.randn(16, 4, generator=g, dtype=torch.float64)
    ys = torch.randn(16, 3, generator=g, dtype=torch.float64)
    F0 = _ZeroScore(4, 3, 8).to(torch.float64)
    jsd = jsd_estimate(xs, ys, F0).item()
    target = -2 * math.log(2)
    res = [CheckResult("jsd at zero score = -2 ln 2", abs(jsd - target) <= tol, abs(jsd - target), tol)]
    q = _module(_ConstantQ(4, 3, 8), 5)
    v = vclub_estimate(xs, ys, q).item()
    res.append(CheckResult("vclub with x-independent q = 0", v == 0.0, abs(v), 0.0))
    q2 = _module(VariationalNet(4, 3, 8), 6)
    same = ys[:1].expand(16, 3).clone()
    v2 = vclub_estimate(xs, same, q2).item()
    res.append(CheckResult("vclub with identical ys = 0", v2 == 0.0, abs(v2), 0.0))
    hid = torch.randn(6, 4, generator=g, dtype=torch.float64)
    h0 = torch.randn(6, 5, 3, generator=g, dtype=torch.float64)
    hlb = torch.randn(6, 5, 3, generator=g, dtype=torch.float64)
    total, _, _ = mi_loss(hid, h0, hlb, q, F0)
    err = abs(total.item() - 2 * math.log(2))
    res.append(CheckResult("mi loss at trivial estimators = 2 ln 2", err <= tol, err, tol))
    return res


def run_selftest(log=print) -> bool:
    torch.set_num_threads(1)
    results = [ctc_oracle_grid()] + mi_closed_form_checks() + layer_gradient_checks() + micro_model_checks()
    for r in results:
        log(r.line())
    ok = all(r.passed for r in results)
    log(f"{sum(r.passed for r in results)}/{len(results)} checks passed")
    return ok
