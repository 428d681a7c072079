"""Attenuated losses, total loss with L2, and GradNorm task weighting.

Continuous targets use the heteroscedastic negative log-likelihood
0.5*(exp(-v)*(y-yhat)^2 + v) with v the predicted log-variance; categorical
targets average cross-entropy over reparameterized logit draws
z_t = logits + exp(v/2)*eps_t. Log-variances are clamped to [-10, 10]
inside the losses (and again at sampling) to keep the exp terms tame.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

LOGVAR_MIN = -10.0
LOGVAR_MAX = 10.0


def clamp_logvar(lv: Tensor) -> Tensor:
    return ad.clip(lv, LOGVAR_MIN, LOGVAR_MAX)


def masked_mean(values: Tensor, mask: np.ndarray) -> Tensor:
    """Mean over positions where mask is 1; mask must select at least one."""
    m = np.asarray(mask, dtype=values.data.dtype)
    total = ad.tsum(ad.mul(values, ad.const(m)))
    denom = float(m.sum())
    if denom <= 0:
        raise ValueError("masked_mean: empty mask")
    return ad.scale(total, 1.0 / denom)


def continuous_loss(y: np.ndarray, mu: Tensor, lv: Tensor,
                    mask: np.ndarray) -> Tensor:
    """Heteroscedastic regression NLL, averaged over unmasked positions."""
    y_c = ad.const(np.asarray(y, dtype=mu.data.dtype))
    lv_c = clamp_logvar(lv)
    r = ad.sub(y_c, mu)
    sq = ad.square(r)
    att = ad.mul(ad.exp(ad.scale(lv_c, -1.0)), sq)
    return ad.scale(masked_mean(ad.add(att, lv_c), mask), 0.5)


def categorical_loss(target: np.ndarray, logits: Tensor, lv: Tensor,
                     eps: np.ndarray, mask: np.ndarray) -> Tensor:
    """MC-integrated cross-entropy over reparameterized logit draws.

    ``target`` is (N,) class indices, ``logits``/``lv`` are (N, C), ``eps``
    is (T, N, C) fixed standard-normal draws (supplied by the caller so the
    loss stays deterministic and finite-difference checkable). Averages the
    per-draw cross-entropy, i.e. the trial mean is taken outside the log.
    """
    t_mc = eps.shape[0]
    sigma = ad.exp(ad.scale(clamp_logvar(lv), 0.5))
    per_draw = []
    for t in range(t_mc):
        z = ad.add(logits, ad.mul(sigma, ad.const(np.asarray(eps[t], dtype=logits.data.dtype))))
        ce = ad.scale(ad.pick(ad.log_softmax(z, axis=1), target), -1.0)
        per_draw.append(ce)
    if t_mc == 1:
        mean_ce = per_draw[0]
    else:
        acc = per_draw[0]
        for ce in per_draw[1:]:
            acc = ad.add(acc, ce)
        mean_ce = ad.scale(acc, 1.0 / t_mc)
    return masked_mean(mean_ce, mask)


@dataclass
class LossBreakdown:
    """Per-task means plus the assembled total (all plain floats)."""

    tasks: dict[str, float]
    weighted_total: float
    l2_term: float
    total: float


def l2_penalty(tensors) -> Tensor:
    acc = None
    for t in tensors:
        s = ad.tsum(ad.square(t))
        acc = s if acc is None else ad.add(acc, s)
    return acc


def total_loss(task_losses: dict[str, Tensor], weights: dict[str, float],
               l2_lambda: float, encoder_side, decoder_side,
               include_l2: bool = True) -> tuple[Tensor, LossBreakdown]:
    """Weighted task sum plus lambda * (||theta_enc||^2 + ||theta_dec||^2).

    With decoupled weight decay (adamw) the explicit penalty is dropped to
    avoid regularizing twice; the breakdown still reports the L2 value.
    """
    total = None
    for name, loss in task_losses.items():
        term = ad.scale(loss, weights[name])
        total = term if total is None else ad.add(total, term)
    l2 = l2_penalty(list(encoder_side) + list(decoder_side))
    l2_value = float(l2.data)
    if include_l2 and l2_lambda > 0.0:
        total = ad.add(total, ad.scale(l2, l2_lambda))
    breakdown = LossBreakdown(
        tasks={n: float(v.data) for n, v in task_losses.items()},
        weighted_total=float(sum(weights[n] * float(v.data) for n, v in task_losses.items())),
        l2_term=l2_value,
        total=float(total.data),
    )
    return total, breakdown


# ---------------------------------------------------------------------------
# GradNorm


@dataclass
class TaskWeights:
    """Positive per-task weights, renormalized to sum to the task count."""

    weights: dict[str, float]
    alpha: float = 1.5
    lr: float = 0.025
    floor: float = 1e-4
    initial_losses: dict[str, float] | None = None

    @classmethod
    def uniform(cls, task_names, alpha: float = 1.5, lr: float = 0.025) -> "TaskWeights":
        return cls(weights={n: 1.0 for n in task_names}, alpha=alpha, lr=lr)

    def as_dict(self) -> dict[str, float]:
        return dict(self.weights)


def gradnorm_step(tw: TaskWeights, grad_norms: dict[str, float],
                  losses: dict[str, float]) -> TaskWeights:
    """One balancing step toward equalized, rate-adjusted gradient norms.

    grad_norms holds G_k = || grad of (w_k * L_k) w.r.t. the shared layer ||;
    targets are mean(G) * r_k^alpha with r_k the relative inverse training
    rate L_k/L_k(0) normalized by its mean. Weights step down where G_k
    overshoots the target, then renormalize to sum to the task count.
    """
    names = sorted(tw.weights)
    if tw.initial_losses is None:
        tw.initial_losses = {n: max(losses[n], 1e-12) for n in names}
    ratios = {n: losses[n] / tw.initial_losses[n] for n in names}
    mean_ratio = sum(ratios.values()) / len(names)
    if mean_ratio <= 0:
        mean_ratio = 1e-12
    g_mean = sum(grad_norms[n] for n in names) / len(names)

    new = {}
    for n in names:
        r = ratios[n] / mean_ratio
        target = g_mean * (max(r, 0.0) ** tw.alpha)
        diff = grad_norms[n] - target
        w = tw.weights[n]
        step = tw.lr * float(np.sign(diff)) * (grad_norms[n] / max(w, tw.floor))
        new[n] = max(w - step, tw.floor)
    total = sum(new.values())
    scale = len(names) / total
    tw.weights = {n: float(max(w * scale, tw.floor)) for n, w in new.items()}
    return tw
