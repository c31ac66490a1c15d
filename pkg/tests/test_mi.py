import math

import pytest
import torch

from lipvsr.mi import (ScoreNet, VariationalNet, fit_score_net, fit_variational_net, gaussian_benchmark,
                       gaussian_club_limit, gaussian_mi, jsd_estimate, mi_loss, negative_pairs,
                       sample_correlated_gaussian, vclub_estimate)
from lipvsr.trainer import parameter_hash

LN2 = math.log(2)


class ZeroScore(torch.nn.Module):
    def __init__(self):
        super().__init__()
        self.w = torch.nn.Parameter(torch.zeros(()))

    def forward(self, x, y):
        return self.w * (x.sum(-1) + y.sum(-1))


def _q(x_dim=3, y_dim=2, seed=0):
    torch.manual_seed(seed)
    return VariationalNet(x_dim, y_dim, 16).double()


def _constant_q(y_dim=2):
    q = _q(3, y_dim)
    with torch.no_grad():
        for seq in (q.mu, q.logvar):
            seq[2].weight.zero_()
    return q


def test_jsd_zero_score():
    xs, ys = torch.randn(6, 3, dtype=torch.float64), torch.randn(6, 2, dtype=torch.float64)
    assert abs(jsd_estimate(xs, ys, ZeroScore()).item() + 2 * LN2) <= 1e-9


def test_vclub_zero_when_q_ignores_x_or_ys_identical():
    xs, ys = torch.randn(7, 3, dtype=torch.float64), torch.randn(7, 2, dtype=torch.float64)
    assert vclub_estimate(xs, ys, _constant_q()).item() == 0.0
    same = torch.randn(1, 2, dtype=torch.float64).expand(7, 2)
    assert vclub_estimate(xs, same, _q()).item() == 0.0


def test_mi_loss_composition():
    h_id = torch.randn(5, 3, dtype=torch.float64)
    h0, hlb = torch.randn(5, 4, 2, dtype=torch.float64), torch.randn(5, 4, 2, dtype=torch.float64)
    total, l_min, l_max = mi_loss(h_id, h0, hlb, _constant_q(), ZeroScore())
    assert l_min.item() == 0.0
    assert abs(total.item() - 2 * LN2) <= 1e-9
    ident = hlb[:1].expand(5, 4, 2)
    assert mi_loss(h_id, h0, ident, _q(), ScoreNet(2, 2, 8).double())[1].item() == 0.0


def test_batch_guards():
    q, F_net = _q(), ScoreNet(3, 2, 8).double()
    with pytest.raises(ValueError):
        vclub_estimate(torch.zeros(1, 3), torch.zeros(1, 2), q)
    with pytest.raises(ValueError):
        jsd_estimate(torch.zeros(1, 3), torch.zeros(1, 2), F_net)
    with pytest.raises(ValueError):
        vclub_estimate(torch.zeros(3, 3), torch.zeros(2, 2), q)


def test_negative_pairs_are_mismatched():
    ys = torch.arange(5.0).unsqueeze(1)
    assert (negative_pairs(ys) != ys).all()


def test_estimates_send_gradient_to_inputs_only():
    q, F_net = _q(3, 4), ScoreNet(4, 4, 8).double()
    h_id = torch.randn(6, 3, dtype=torch.float64, requires_grad=True)
    h0 = torch.randn(6, 5, 4, dtype=torch.float64, requires_grad=True)
    hlb = torch.randn(6, 5, 4, dtype=torch.float64, requires_grad=True)
    total, _, _ = mi_loss(h_id, h0, hlb, q, F_net)
    total.backward()
    assert all(t.grad is not None and t.grad.abs().sum() > 0 for t in (h_id, h0, hlb))
    assert all(p.grad is None for p in list(q.parameters()) + list(F_net.parameters()))


def test_fit_zero_steps_leaves_q_unchanged():
    q = _q()
    before = parameter_hash(q)
    fit_variational_net(q, torch.randn(4, 3), torch.randn(4, 2), 0, torch.optim.Adam(q.parameters()))
    assert parameter_hash(q) == before


def _fit_q(seed, steps):
    g = torch.Generator().manual_seed(seed)
    q = _q(2, 2, seed)
    opt = torch.optim.Adam(q.parameters(), lr=5e-3)
    x = torch.randn(256, 2, generator=g, dtype=torch.float64)
    y = x + 0.1 * torch.randn(256, 2, generator=g, dtype=torch.float64)
    x_test = torch.randn(256, 2, generator=g, dtype=torch.float64)
    y_test = x_test + 0.1 * torch.randn(256, 2, generator=g, dtype=torch.float64)
    curve = []
    for _ in range(6):
        fit_variational_net(q, x, y, steps, opt)
        with torch.no_grad():
            curve.append(q.log_likelihood(x_test, y_test).mean().item())
    return q, curve


def test_fit_increases_held_out_likelihood_and_is_deterministic():
    q1, curve = _fit_q(0, 50)
    assert all(b > a for a, b in zip(curve, curve[1:]))
    q2, curve2 = _fit_q(0, 50)
    assert curve == curve2 and parameter_hash(q1) == parameter_hash(q2)


def _trained_jsd(dependent, seed=0):
    """Fit F on a fresh batch every step, so it cannot memorize the pairs."""
    torch.manual_seed(seed)
    g = torch.Generator().manual_seed(seed)
    F_net = ScoreNet(2, 2, 32).double()
    opt = torch.optim.Adam(F_net.parameters(), lr=5e-3)
    for _ in range(300):
        xs = torch.randn(128, 2, generator=g, dtype=torch.float64)
        ys = xs.clone() if dependent else torch.randn(128, 2, generator=g, dtype=torch.float64)
        fit_score_net(F_net, xs, ys, 1, opt)
    return F_net


def test_jsd_separates_dependent_from_independent():
    g = torch.Generator().manual_seed(99)
    xs = torch.randn(2048, 2, generator=g, dtype=torch.float64)
    ys = torch.randn(2048, 2, generator=g, dtype=torch.float64)
    assert abs(jsd_estimate(xs, ys, _trained_jsd(False)).item() + 2 * LN2) <= 0.1
    assert jsd_estimate(xs, xs.clone(), _trained_jsd(True)).item() > -2 * LN2 + 0.5


def test_gaussian_closed_forms():
    assert gaussian_mi(0.9) == pytest.approx(0.8303656, abs=1e-6)
    assert gaussian_club_limit(0.9) == pytest.approx(0.81 / 0.19)
    x, y = sample_correlated_gaussian(20000, 0.9, torch.Generator().manual_seed(0))
    assert torch.corrcoef(torch.cat([x, y], 1).T)[0, 1].item() == pytest.approx(0.9, abs=0.01)


@pytest.mark.slow
def test_gaussian_benchmark_reaches_club_limit():
    # with q equal to the true conditional, vCLUB tends to rho^2/(1-rho^2), above the true MI
    res = gaussian_benchmark(0)
    assert res["vclub"] >= res["true_mi"] - 0.15
    assert abs(res["vclub"] - res["club_limit"]) <= 0.75
    assert gaussian_benchmark(0) == res
