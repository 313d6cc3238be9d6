"""L-infinity adversarial attacks (FGSM, PGD, APGD, Square) at desk scale.

Attacks run against a fixed function: batchnorm statistics are frozen from
the clean batch before the first gradient step, so per-sample results do
not depend on what else sits in the batch. Every returned AdvBatch is
checked against the epsilon-ball and pixel-range invariants.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tape, Tensor

# perturbation grids used throughout the experiments (pixel scale)
FGSM_EPS_GRID = tuple(e / 255.0 for e in (0.1, 0.5, 1, 2, 3, 4, 5, 6, 7, 8))
PGD_EPS_GRID = tuple(e / 255.0 for e in (0.1, 0.5, 1, 2, 3, 4, 8))

DEFAULT_ITERS = {"fgsm": 1, "pgd": 40, "apgd": 100, "square": 5000}

ATTACK_KINDS = ("fgsm", "pgd", "apgd", "square")


class InvariantError(AssertionError):
    """An adversarial batch violated the epsilon-ball or pixel range."""


@dataclass
class AttackConfig:
    kind: str
    epsilon: float
    alpha: float = 0.01 / 0.3  # PGD step size
    iters: int = 0             # 0 = kind default
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise ValueError(f"unknown attack kind: {self.kind}")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError("epsilon must lie in [0, 1] (pixel scale)")
        if self.iters <= 0:
            self.iters = DEFAULT_ITERS[self.kind]


@dataclass
class AdvBatch:
    clean: np.ndarray
    adversarial: np.ndarray
    labels: np.ndarray
    success: np.ndarray        # per sample: adversarial misclassified
    queries: np.ndarray = field(default=None)

    def validate(self, epsilon):
        gap = np.max(np.abs(self.adversarial - self.clean))
        if gap > epsilon + 1e-9:
            raise InvariantError(f"perturbation {gap} exceeds epsilon {epsilon}")
        if self.adversarial.min() < 0.0 or self.adversarial.max() > 1.0:
            raise InvariantError("adversarial pixels left [0, 1]")
        return self


def _freeze(net, x):
    return net.collect_bn_stats(x)


def _logits(net, x, stats):
    return net.logits(x, bn_mode="frozen", frozen_stats=stats)


def _input_grad(net, x, labels, stats):
    """Gradient of the mean cross-entropy w.r.t. the input pixels."""
    with Tape() as tape:
        xt = Tensor(x, requires_grad=True)
        logits = net.forward(xt, bn_mode="frozen", frozen_stats=stats)
        loss = nn.softmax_cross_entropy(logits, labels)
        g = ad.grad(loss, [xt], tape)[0].data
    return g


def _per_sample_ce(logits, labels):
    logp = logits - np.max(logits, axis=1, keepdims=True)
    logp = logp - np.log(np.sum(np.exp(logp), axis=1, keepdims=True))
    return -logp[np.arange(len(labels)), labels]


def _project(x_adv, x, epsilon):
    return np.clip(np.clip(x_adv, x - epsilon, x + epsilon), 0.0, 1.0)


def _success(net, x_adv, labels, stats):
    preds = np.argmax(_logits(net, x_adv, stats), axis=1)
    return preds != labels


def fgsm(net, x, labels, epsilon):
    """Single gradient-sign step, clipped to the pixel range."""
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    stats = _freeze(net, x)
    if epsilon == 0.0:
        adv = x.copy()
    else:
        g = _input_grad(net, x, labels, stats)
        adv = np.clip(x + epsilon * np.sign(g), 0.0, 1.0)
    return AdvBatch(x, adv, labels,
                    _success(net, adv, labels, stats)).validate(epsilon)


def pgd(net, x, labels, config):
    """Iterated sign steps from the clean image, projected after each step."""
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    eps = config.epsilon
    stats = _freeze(net, x)
    adv = x.copy()
    if eps > 0.0:
        for _ in range(config.iters):
            g = _input_grad(net, adv, labels, stats)
            adv = _project(adv + config.alpha * np.sign(g), x, eps)
    return AdvBatch(x, adv, labels,
                    _success(net, adv, labels, stats)).validate(eps)


def _apgd_checkpoints(budget):
    ps = [0.0, 0.22]
    while ps[-1] < 1.0:
        ps.append(ps[-1] + max(ps[-1] - ps[-2] - 0.03, 0.06))
    return sorted({min(int(np.ceil(p * budget)), budget) for p in ps[1:]})


def apgd(net, x, labels, config):
    """PGD with momentum and a halving step-size schedule.

    The step size is halved at fixed checkpoints whenever fewer than 75%
    of the steps since the previous checkpoint improved the objective (or
    nothing improved at all); on halving the search restarts from the best
    iterate seen. Returns the best-loss iterate per sample.
    """
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    eps = config.epsilon
    stats = _freeze(net, x)
    n = x.shape[0]
    if eps == 0.0:
        adv = x.copy()
        return AdvBatch(x, adv, labels,
                        _success(net, adv, labels, stats)).validate(eps)

    expand = (slice(None),) + (None,) * (x.ndim - 1)
    eta = np.full(n, 2.0 * eps)
    momentum = 0.75
    cur = x.copy()
    prev = x.copy()
    loss_cur = _per_sample_ce(_logits(net, cur, stats), labels)
    best = cur.copy()
    loss_best = loss_cur.copy()
    improved_steps = np.zeros(n)
    best_at_checkpoint = loss_best.copy()
    eta_halved = np.zeros(n, dtype=bool)
    checkpoints = set(_apgd_checkpoints(config.iters))
    last_cp = 0

    for step in range(1, config.iters + 1):
        g = _input_grad(net, cur, labels, stats)
        z = _project(cur + eta[expand] * np.sign(g), x, eps)
        if step == 1:
            nxt = z
        else:
            nxt = _project(cur + momentum * (z - cur)
                           + (1.0 - momentum) * (cur - prev), x, eps)
        loss_nxt = _per_sample_ce(_logits(net, nxt, stats), labels)
        improved_steps += loss_nxt > loss_cur
        gain = loss_nxt > loss_best
        best[gain] = nxt[gain]
        loss_best = np.maximum(loss_best, loss_nxt)
        prev, cur, loss_cur = cur, nxt, loss_nxt
        if step in checkpoints:
            window = step - last_cp
            cond_stall = improved_steps < 0.75 * window
            cond_flat = (~eta_halved) & (loss_best <= best_at_checkpoint)
            halve = cond_stall | cond_flat
            eta[halve] *= 0.5
            cur[halve] = best[halve]
            loss_cur[halve] = loss_best[halve]
            eta_halved = halve
            improved_steps[:] = 0
            best_at_checkpoint = loss_best.copy()
            last_cp = step

    return AdvBatch(x, best, labels,
                    _success(net, best, labels, stats)).validate(eps)


def _square_side(p, h, w):
    side = int(round(np.sqrt(p * h * w)))
    return max(1, min(side, h, w))


# fractions of the query budget at which the square size parameter halves
_SQUARE_MILESTONES = (0.02, 0.1, 0.25, 0.5, 0.75)


def square_attack(net, x, labels, config):
    """Gradient-free random search over square patches of +-epsilon.

    Proposals are accepted only when the margin f_y - max_{k!=y} f_k
    strictly decreases, so the recorded objective is non-increasing.
    Samples misclassified on the clean input are returned untouched.
    """
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    eps = config.epsilon
    rng = np.random.default_rng(config.seed)
    n, c, h, w = x.shape
    stats = _freeze(net, x)

    def margins(batch):
        logits = _logits(net, batch, stats)
        true = logits[np.arange(len(labels)), labels]
        masked = logits.copy()
        masked[np.arange(len(labels)), labels] = -np.inf
        return true - np.max(masked, axis=1)

    adv = x.copy()
    margin = margins(adv)
    queries = np.ones(n)
    active = margin >= 0.0
    if eps == 0.0 or not active.any():
        return AdvBatch(x, adv, labels, margin < 0.0,
                        queries=queries).validate(eps)

    # stripe initialization, accepted only where it helps
    stripes = np.sign(rng.standard_normal((n, c, 1, w)))
    cand = np.clip(x + eps * np.broadcast_to(stripes, x.shape), 0.0, 1.0)
    cand_margin = margins(cand)
    queries += active
    take = active & (cand_margin < margin)
    adv[take] = cand[take]
    margin[take] = cand_margin[take]
    active = margin >= 0.0

    p = 0.8
    milestones = [int(m * config.iters) for m in _SQUARE_MILESTONES]
    for it in range(config.iters):
        if not active.any():
            break
        while milestones and it >= milestones[0]:
            p *= 0.5
            milestones.pop(0)
        side = _square_side(p, h, w)
        idx = np.flatnonzero(active)
        cand = adv.copy()
        for i in idx:
            r = rng.integers(0, h - side + 1)
            col = rng.integers(0, w - side + 1)
            signs = rng.choice((-eps, eps), size=c)
            patch = x[i, :, r:r + side, col:col + side] + signs[:, None, None]
            cand[i, :, r:r + side, col:col + side] = np.clip(patch, 0.0, 1.0)
        cand_margin = margins(cand)
        queries[idx] += 1
        better = active & (cand_margin < margin)
        adv[better] = cand[better]
        margin[better] = cand_margin[better]
        active = margin >= 0.0

    return AdvBatch(x, adv, labels, margin < 0.0,
                    queries=queries).validate(eps)


def run_attack(net, x, labels, config):
    if config.kind == "fgsm":
        return fgsm(net, x, labels, config.epsilon)
    if config.kind == "pgd":
        return pgd(net, x, labels, config)
    if config.kind == "apgd":
        return apgd(net, x, labels, config)
    return square_attack(net, x, labels, config)


def clean_accuracy(net, x, labels):
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) == 0:
        raise ValueError("empty dataset")
    stats = _freeze(net, x)
    preds = np.argmax(_logits(net, x, stats), axis=1)
    return float(np.mean(preds == labels))


def robust_accuracy(net, x, labels, config):
    """Fraction of samples still classified correctly after the attack."""
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) == 0:
        raise ValueError("empty dataset")
    result = run_attack(net, x, labels, config)
    return float(np.mean(~result.success))
