"""Mutual-information estimators for the max-min regularizer.

The upper bound (vCLUB) is minimized between the speaker identity feature and
the pooled back-end output; the Jensen-Shannon lower bound is maximized between
pooled front-end and back-end features.  Estimator networks are fitted in their
own steps; the estimates used as training losses never update them.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.func import functional_call

from .tensor import swish

LOG_2PI = math.log(2 * math.pi)


class VariationalNet(nn.Module):
    """Diagonal Gaussian q(y|x) with MLP mean and log-variance."""

    def __init__(self, x_dim: int, y_dim: int, hidden: int = 128):
        super().__init__()
        self.mu = nn.Sequential(nn.Linear(x_dim, hidden), nn.ReLU(), nn.Linear(hidden, y_dim))
        self.logvar = nn.Sequential(nn.Linear(x_dim, hidden), nn.ReLU(), nn.Linear(hidden, y_dim))

    def forward(self, x):
        return self.mu(x), self.logvar(x).clamp(-10.0, 10.0)

    def log_likelihood(self, x, y):
        """log q(y_i | x_i) per row."""
        mu, logvar = self(x)
        return gaussian_log_density(y, mu, logvar)


def gaussian_log_density(y, mu, logvar):
    return (-0.5 * (y - mu) ** 2 / logvar.exp() - 0.5 * logvar - 0.5 * LOG_2PI).sum(-1)


class ScoreNet(nn.Module):
    """F(x, y): MLP on the concatenated pair -> scalar score."""

    def __init__(self, x_dim: int, y_dim: int, hidden: int = 128):
        super().__init__()
        self.fc1 = nn.Linear(x_dim + y_dim, hidden)
        self.fc2 = nn.Linear(hidden, hidden)
        self.fc3 = nn.Linear(hidden, 1)

    def forward(self, x, y):
        h = swish(self.fc1(torch.cat([x, y], dim=-1)))
        return self.fc3(swish(self.fc2(h))).squeeze(-1)


def _frozen(net: nn.Module):
    """Call ``net`` with detached parameters so gradients reach inputs only."""
    params = {k: v.detach() for k, v in net.named_parameters()}

    def call(*args):
        return functional_call(net, params, args)
    return call


def _check_batch(xs, ys):
    if xs.shape[0] != ys.shape[0]:
        raise ValueError(f"unpaired batches: {xs.shape[0]} vs {ys.shape[0]}")
    if xs.shape[0] < 2:
        raise ValueError("MI estimates need a batch of at least 2")


def vclub_estimate(xs: torch.Tensor, ys: torch.Tensor, q: VariationalNet) -> torch.Tensor:
    """mean_i log q(y_i|x_i) - mean_{i,j} log q(y_j|x_i).

    Computed as the mean of the antisymmetrized matrix
    ``(M_ii - M_ij + M_jj - M_ji) / 2`` so the cancellation is exact when ``q``
    ignores ``x``.
    """
    _check_batch(xs, ys)
    mu, logvar = _frozen(q)(xs)
    # M[i, j] = log q(y_j | x_i)
    M = gaussian_log_density(ys.unsqueeze(0), mu.unsqueeze(1), logvar.unsqueeze(1))
    D = M.diagonal().unsqueeze(1) - M
    return (D + D.T).sum() / (2 * xs.shape[0] ** 2)


def fit_variational_net(q: VariationalNet, xs: torch.Tensor, ys: torch.Tensor, steps: int,
                        optimizer: torch.optim.Optimizer) -> VariationalNet:
    """Maximize mean log q(y_i|x_i) over q's parameters for ``steps`` steps."""
    xs, ys = xs.detach(), ys.detach()
    for _ in range(steps):
        optimizer.zero_grad(set_to_none=True)
        loss = -q.log_likelihood(xs, ys).mean()
        loss.backward()
        optimizer.step()
    return q


def negative_pairs(ys: torch.Tensor) -> torch.Tensor:
    """Cyclic shift by one within the batch: every pair is mismatched."""
    return torch.roll(ys, shifts=1, dims=0)


def jsd_terms(xs, ys, score):
    pos = -F.softplus(-score(xs, ys)).mean()
    neg = F.softplus(score(xs, negative_pairs(ys))).mean()
    return pos - neg


def jsd_estimate(xs: torch.Tensor, ys: torch.Tensor, F_net: ScoreNet) -> torch.Tensor:
    """Jensen-Shannon MI lower bound; gradients reach the inputs, not the score net."""
    _check_batch(xs, ys)
    return jsd_terms(xs, ys, _frozen(F_net))


def fit_score_net(F_net: ScoreNet, xs: torch.Tensor, ys: torch.Tensor, steps: int,
                  optimizer: torch.optim.Optimizer) -> ScoreNet:
    """Maximize the JSD estimate over the score net's parameters."""
    _check_batch(xs, ys)
    xs, ys = xs.detach(), ys.detach()
    for _ in range(steps):
        optimizer.zero_grad(set_to_none=True)
        loss = -jsd_terms(xs, ys, F_net)
        loss.backward()
        optimizer.step()
    return F_net


def pool_time(h: torch.Tensor) -> torch.Tensor:
    return h.mean(dim=1)


def mi_loss(h_id: torch.Tensor, h0: torch.Tensor, hlb: torch.Tensor, q: VariationalNet,
            F_net: ScoreNet) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """(total, min-MI term, max-MI term) with temporal mean pooling of the sequences."""
    pooled_b = pool_time(hlb)
    l_min = vclub_estimate(h_id, pooled_b, q)
    l_max = -jsd_estimate(pool_time(h0), pooled_b, F_net)
    return l_min + l_max, l_min, l_max


def gaussian_mi(rho: float) -> float:
    """I(X;Y) for unit-variance jointly Gaussian scalars with correlation rho."""
    return -0.5 * math.log(1 - rho ** 2)


def gaussian_club_limit(rho: float) -> float:
    """Value of vCLUB when q equals the true conditional: rho^2 / (1 - rho^2)."""
    return rho ** 2 / (1 - rho ** 2)


def sample_correlated_gaussian(n: int, rho: float, generator: torch.Generator, dim: int = 1,
                               dtype=torch.float64):
    x = torch.randn(n, dim, generator=generator, dtype=dtype)
    e = torch.randn(n, dim, generator=generator, dtype=dtype)
    return x, rho * x + math.sqrt(1 - rho ** 2) * e


def gaussian_benchmark(seed: int, rho: float = 0.9, batch: int = 512, steps: int = 500,
                       hidden: int = 128, lr: float = 5e-3) -> dict:
    """Fit q on one correlated Gaussian batch, then estimate vCLUB on a fresh batch."""
    g = torch.Generator().manual_seed(seed)
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        q = VariationalNet(1, 1, hidden).to(torch.float64)
    opt = torch.optim.Adam(q.parameters(), lr=lr)
    for _ in range(steps):
        x, y = sample_correlated_gaussian(batch, rho, g)
        fit_variational_net(q, x, y, 1, opt)
    x, y = sample_correlated_gaussian(batch, rho, g)
    with torch.no_grad():
        est = vclub_estimate(x, y, q).item()
    return {"seed": seed, "rho": rho, "batch": batch, "steps": steps, "true_mi": gaussian_mi(rho),
            "club_limit": gaussian_club_limit(rho), "vclub": est}
