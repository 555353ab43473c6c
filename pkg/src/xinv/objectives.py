"""Losses for the min-max game plus the SGD optimizer that applies updates.

Both losses are written as negated minibatch means so that every training mode
is a plain minimization; the adversarial sign enters either through the
gradient-reversal layer or through the explicit two-objective split.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

PROB_EPS = 1e-7


class ValidationError(ValueError):
    pass


def _binary_ce_sum(p_hat, y):
    """Graph tensor: sum over all entries of -[y log p + (1-y) log(1-p)]."""
    pc = ad.clip(p_hat, PROB_EPS, 1.0 - PROB_EPS)
    y_t = Tensor(y)
    y_neg = Tensor(1.0 - y)
    pos = ad.mul(y_t, ad.log(pc))
    neg = ad.mul(y_neg, ad.log(ad.add_scalar(ad.scale(pc, -1.0), 1.0)))
    return ad.scale(ad.sum_all(ad.add(pos, neg)), -1.0)


def bce_loss(y_hat, y):
    """Mean binary cross entropy of disease probabilities (N,1) against
    labels in {0,1}."""
    y = np.asarray(y, dtype=np.float64).reshape(y_hat.shape)
    if not np.all((y == 0.0) | (y == 1.0)):
        raise ValidationError("bce_loss: labels must be in {0, 1}")
    n = y_hat.shape[0]
    return ad.scale(_binary_ce_sum(y_hat, y), 1.0 / n)


def source_ce_loss(s_hat, y_s):
    """Mean summed-binary cross entropy of source scores (N,S) against one-hot
    source labels."""
    y_s = np.asarray(y_s, dtype=np.float64)
    if y_s.shape != s_hat.shape:
        raise ValidationError(f"source_ce_loss: shape mismatch {y_s.shape} vs {s_hat.shape}")
    if not np.all((y_s == 0.0) | (y_s == 1.0)) or not np.all(y_s.sum(axis=1) == 1.0):
        raise ValidationError("source_ce_loss: each label row must be one-hot")
    n = s_hat.shape[0]
    return ad.scale(_binary_ce_sum(s_hat, y_s), 1.0 / n)


def minmax_objectives(loss_p, loss_s, lam):
    """Return (extractor/classifier objective, discriminator objective):
    L_p - lam * L_s to minimize over (theta_e, theta_c), L_s over theta_d."""
    if lam < 0:
        raise ValidationError(f"minmax_objectives: lambda must be >= 0, got {lam}")
    return ad.add(loss_p, ad.scale(loss_s, -float(lam))), loss_s


def one_hot(indices, n_classes):
    indices = np.asarray(indices, dtype=np.intp)
    out = np.zeros((indices.size, n_classes))
    out[np.arange(indices.size), indices] = 1.0
    return out


class SGD:
    """Momentum SGD over a named parameter dict: v <- beta*v + g,
    theta <- theta - eta*v.  Zeroing gradients is the caller's job."""

    def __init__(self, params, lr, momentum=0.0):
        if lr <= 0:
            raise ValidationError(f"SGD: learning rate must be > 0, got {lr}")
        if not 0.0 <= momentum < 1.0:
            raise ValidationError(f"SGD: momentum must be in [0, 1), got {momentum}")
        self.params = dict(params)
        self.lr = float(lr)
        self.momentum = float(momentum)
        self.velocity = {k: np.zeros_like(t.data) for k, t in self.params.items()}

    def step(self):
        for name, t in self.params.items():
            if t.grad is None:
                raise ValidationError(f"sgd_step: parameter {name!r} has no gradient")
            v = self.velocity[name]
            v *= self.momentum
            v += t.grad
            t.data -= self.lr * v

    def zero_grad(self):
        for t in self.params.values():
            t.zero_grad()
