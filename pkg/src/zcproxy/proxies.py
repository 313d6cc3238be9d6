"""Zero-cost proxy scores computed on untrained instantiated networks.

All fifteen proxies are computed from at most one mini-batch; synflow and
zen ignore the data entirely. Scores are float64 and deterministic under
the configured seeds. Any NaN/Inf or undefined intermediate aborts that
proxy with a ProxyError rather than emitting a poisoned number.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tape, Tensor
from .space import MacroConfig, CaptureState, decode, instantiate

CANONICAL_PROXIES = (
    "jacov", "nwot", "epe_nas", "grad_norm", "snip", "grasp", "synflow",
    "fisher", "zen", "plain", "l2_norm", "flops", "params", "jacob_fro",
    "hessian_eig",
)

PROXY_CSV_HEADER = ("arch_index", "dataset") + CANONICAL_PROXIES


class ProxyError(RuntimeError):
    """A proxy could not be computed for this architecture/batch."""


@dataclass
class ScoreBatch:
    """One scoring mini-batch: images in [0,1], integer labels, seed."""

    inputs: np.ndarray
    labels: np.ndarray
    epsilon: float = 1.0 / 255.0
    seed: int = 0

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.ndim != 4:
            raise ad.ShapeError("batch inputs must be NCHW")
        if self.inputs.shape[0] < 2:
            raise ad.ShapeError("scoring batch needs N >= 2")
        if self.labels.shape != (self.inputs.shape[0],):
            raise ad.ShapeError("labels must be one integer per sample")
        if np.any(self.labels < 0):
            raise ad.ShapeError("labels must be non-negative")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError("epsilon must lie in [0, 1] (pixel scale)")


@dataclass
class ZcpConfig:
    """Constants for the proxy suite; none are taken from published tables."""

    kl_shift: float = 1e-5          # k added to eigenvalues / correlations
    nwot_jitter: float = 1e-6       # diagonal jitter factor (times code length)
    zen_alpha: float = 0.01
    zen_repeats: int = 8
    zen_batch: int = 16
    jacob_fro_repeats: int = 8
    jacob_fro_softmax: bool = True
    power_iters: int = 30
    power_tol: float = 1e-3
    seed: int = 0
    hessian_datasets: tuple = ("cifar10",)
    force_hessian: bool = False


def _loss_closure(net, batch):
    x = Tensor(batch.inputs)
    labels = batch.labels

    def loss_fn():
        return nn.softmax_cross_entropy(net.forward(x), labels)

    return loss_fn


def per_sample_jacobian(net, batch):
    """d(sum of logits)/d(input), one row per sample.

    The vector-valued network output is scalarized by summing logits, so a
    single backward pass over the batch yields every row.
    """
    with Tape() as tape:
        x = Tensor(batch.inputs, requires_grad=True)
        logits = net.forward(x)
        total = ad.sum_(logits)
        rows = ad.grad(total, [x], tape)[0].data
    return rows.reshape(batch.inputs.shape[0], -1)


def _correlation(rows):
    centered = rows - rows.mean(axis=1, keepdims=True)
    norms = np.sqrt(np.sum(centered ** 2, axis=1))
    if np.any(norms == 0.0):
        raise ProxyError("zero-variance jacobian row; correlation undefined")
    unit = centered / norms[:, None]
    return unit @ unit.T


def score_jacov(net, batch, k=1e-5):
    """Negative-KL score of the jacobian correlation spectrum (higher better)."""
    corr = _correlation(per_sample_jacobian(net, batch))
    eig = np.linalg.eigvalsh(corr)
    return float(-np.sum(np.log(eig + k) + 1.0 / (eig + k)))


def score_nwot(net, batch, jitter=1e-6):
    """Log-determinant of the ReLU sign-code agreement kernel."""
    capture = CaptureState()
    net.forward(Tensor(batch.inputs), capture=capture)
    if not capture.relu_outputs:
        raise ProxyError("network has no relu activations")
    n = batch.inputs.shape[0]
    codes = np.concatenate(
        [(t.data > 0).reshape(n, -1) for t in capture.relu_outputs], axis=1
    ).astype(np.float64)
    n_active = codes.shape[1]
    kernel = codes @ codes.T + (1.0 - codes) @ (1.0 - codes).T
    sign, logdet = np.linalg.slogdet(kernel)
    if sign <= 0 or not np.isfinite(logdet):
        kernel = kernel + jitter * n_active * np.eye(n)
        sign, logdet = np.linalg.slogdet(kernel)
    if sign <= 0 or not np.isfinite(logdet):
        raise ProxyError("activation kernel defective even after jitter")
    return float(logdet)


def score_epe_nas(net, batch, k=1e-5):
    """Sum over classes of |sum of log-abs jacobian correlations| (>=2 samples)."""
    rows = per_sample_jacobian(net, batch)
    score = 0.0
    usable = 0
    for cls in np.unique(batch.labels):
        members = rows[batch.labels == cls]
        if members.shape[0] < 2:
            continue
        corr = _correlation(members)
        score += abs(float(np.sum(np.log(np.abs(corr) + k))))
        usable += 1
    if usable == 0:
        raise ProxyError("every class has fewer than 2 samples")
    return score


def saliency_from_loss(loss_fn, params, mode):
    """Core pruning-style saliencies for an arbitrary scalar loss.

    `params` is a ParamSet (or anything with tensors()); modes follow the
    proxy definitions: grad_norm, snip, plain operate on first-order
    gradients, grasp contracts the Hessian with the gradient.
    """
    tensors = params.tensors()
    with Tape() as tape:
        loss = loss_fn()
        grads = ad.grad(loss, tensors, tape)
        gdata = [g.data for g in grads]
    if mode == "grad_norm":
        return float(sum(np.linalg.norm(g) for g in gdata))
    if mode == "snip":
        return float(sum(np.sum(np.abs(t.data * g))
                         for t, g in zip(tensors, gdata)))
    if mode == "plain":
        return float(sum(np.sum(t.data * g) for t, g in zip(tensors, gdata)))
    if mode == "grasp":
        gflat = np.concatenate([g.reshape(-1) for g in gdata])
        hg = ad.hvp(loss_fn, tensors, gflat)
        theta = np.concatenate([t.data.reshape(-1) for t in tensors])
        return float(-np.sum(hg * theta))
    raise ValueError(f"unknown saliency mode: {mode}")


def _score_fisher(net, batch):
    capture = CaptureState()
    with Tape() as tape:
        x = Tensor(batch.inputs)
        logits = net.forward(x, capture=capture)
        loss = nn.softmax_cross_entropy(logits, batch.labels)
        act_grads = ad.grad(loss, capture.bn_outputs, tape)
    total = 0.0
    for act, g in zip(capture.bn_outputs, act_grads):
        prod = act.data * g.data               # (N, C, H, W)
        per_channel = prod.sum(axis=(2, 3))    # sum over spatial
        total += float(np.mean(np.sum(per_channel ** 2, axis=1)))
    return total


def _score_synflow(net):
    m = net.macro
    ones = Tensor(np.ones((1, m.in_channels, m.input_resolution,
                           m.input_resolution)))
    override = {name: Tensor(np.abs(t.data), requires_grad=True)
                for name, t in net.params.items()}
    tensors = list(override.values())
    with Tape() as tape:
        logits = net.forward(ones, params=override, bn_mode="identity")
        total = ad.sum_(logits)
        grads = ad.grad(total, tensors, tape)
    return float(sum(np.sum(np.abs(t.data * g.data))
                     for t, g in zip(tensors, grads)))


def score_saliency(net, batch, mode):
    """grad_norm | snip | grasp | synflow | fisher | plain for one network.

    synflow is data independent: the batch argument is accepted for
    signature uniformity and ignored.
    """
    if mode == "synflow":
        return _score_synflow(net)
    if mode == "fisher":
        return _score_fisher(net, batch)
    return saliency_from_loss(_loss_closure(net, batch), net.params, mode)


# floor applied before log so that BN layers sitting in information-dead
# branches (batch std exactly 0) do not poison the score with -inf
_ZEN_SIGMA_FLOOR = 1e-12


def score_zen(net, seed, alpha=0.01, repeats=8, batch=16):
    """Gaussian-complexity score with re-sampled Gaussian weights and inputs.

    Perturbation response is measured at the pre-global-pool feature map
    with batchnorm bypassed; the log of each BN layer's mean batch std
    (averaged over repeats) is added back as a variance correction.
    """
    rng = np.random.default_rng(seed)
    m = net.macro
    override = {}
    for name, t in net.params.items():
        if name.endswith(".conv") or name.endswith(".weight"):
            override[name] = Tensor(rng.standard_normal(t.data.shape))
        else:
            override[name] = Tensor(t.data.copy())
    deltas = np.zeros(repeats)
    sigma_sums = None
    for r in range(repeats):
        x = rng.standard_normal((batch, m.in_channels, m.input_resolution,
                                 m.input_resolution))
        d = rng.standard_normal(x.shape)
        capture = CaptureState()
        f0 = net.features(Tensor(x), params=override, bn_mode="identity",
                          capture=capture)
        f1 = net.features(Tensor(x + alpha * d), params=override,
                          bn_mode="identity")
        deltas[r] = np.linalg.norm(f1.data - f0.data)
        sig = np.asarray(capture.bn_sigmas)
        sigma_sums = sig if sigma_sums is None else sigma_sums + sig
    mean_delta = float(np.mean(deltas))
    if mean_delta == 0.0:
        raise ProxyError("zero perturbation response (no information flow)")
    sigma_mean = np.maximum(sigma_sums / repeats, _ZEN_SIGMA_FLOOR)
    return float(np.log(mean_delta) + np.sum(np.log(sigma_mean)))


def score_jacob_fro(net, batch, epsilon, repeats=8, use_softmax=True, seed=0):
    """Mean squared output shift under uniform input noise in [-eps, eps]^D."""
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    rng = np.random.default_rng(seed)
    base = net.logits(batch.inputs)
    if use_softmax:
        base = nn.softmax(base)
    total = 0.0
    for _ in range(repeats):
        noise = rng.uniform(-epsilon, epsilon, batch.inputs.shape)
        out = net.logits(batch.inputs + noise)
        if use_softmax:
            out = nn.softmax(out)
        total += float(np.mean(np.sum((out - base) ** 2, axis=1)))
    return total / repeats


def score_hessian_eig(net, batch, iters=30, tol=1e-3, seed=0):
    """Dominant (signed) Hessian eigenvalue of the batch loss by power iteration.

    Returns (rayleigh_quotient, converged). Non-convergence within the
    iteration budget returns the last quotient with converged=False.
    """
    loss_fn = _loss_closure(net, batch)
    tensors = net.params.tensors()
    total = sum(t.size for t in tensors)
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(total)
    v /= np.linalg.norm(v)
    lam_prev = None
    lam = 0.0
    for _ in range(iters):
        hv = ad.hvp(loss_fn, tensors, v)
        lam = float(v @ hv)
        norm = np.linalg.norm(hv)
        if norm < 1e-20:
            return 0.0, True
        v = hv / norm
        if lam_prev is not None and abs(lam - lam_prev) <= tol * max(abs(lam), 1e-12):
            return lam, True
        lam_prev = lam
    return lam, False


def count_static(net):
    """flops (MAC convention), trainable parameter count, and summed L2 norm."""
    params = net.params
    l2 = sum(float(np.linalg.norm(t.data)) for t in params.tensors())
    return {
        "flops": float(net.count_macs()),
        "params": float(params.total_size()),
        "l2_norm": l2,
    }


@dataclass
class ProxyVector:
    """Scores for one architecture on one dataset, in canonical proxy order."""

    arch_index: int
    dataset_id: str
    scores: dict = field(default_factory=dict)
    notes: dict = field(default_factory=dict)

    def as_row(self):
        row = [str(self.arch_index), self.dataset_id]
        for name in CANONICAL_PROXIES:
            value = self.scores.get(name)
            row.append("" if value is None else repr(value))
        return row

    def missing(self):
        return [p for p in CANONICAL_PROXIES if self.scores.get(p) is None]


def net_seed_for(config_seed, arch_index):
    """Stable per-architecture instantiation seed."""
    return int(np.random.SeedSequence((config_seed, arch_index))
               .generate_state(1)[0])


def proxy_vector(arch_index, dataset_id, macro, batch, config=None):
    """Compute all 15 proxies for one architecture; failures become MISSING.

    hessian_eig is evaluated only for datasets listed in
    config.hessian_datasets unless force_hessian is set.
    """
    config = config or ZcpConfig()
    net = instantiate(decode(arch_index), macro,
                      seed=net_seed_for(config.seed, arch_index))
    vector = ProxyVector(arch_index, dataset_id)

    def attempt(name, fn):
        try:
            vector.scores[name] = fn()
        except (ProxyError, ad.NonFiniteError, nn.DegenerateBatchError) as err:
            vector.scores[name] = None
            vector.notes[name] = str(err)

    attempt("jacov", lambda: score_jacov(net, batch, config.kl_shift))
    attempt("nwot", lambda: score_nwot(net, batch, config.nwot_jitter))
    attempt("epe_nas", lambda: score_epe_nas(net, batch, config.kl_shift))
    for mode in ("grad_norm", "snip", "grasp", "synflow", "fisher", "plain"):
        attempt(mode, lambda m=mode: score_saliency(net, batch, m))
    attempt("zen", lambda: score_zen(net, config.seed, config.zen_alpha,
                                     config.zen_repeats, config.zen_batch))
    statics = count_static(net)
    vector.scores["l2_norm"] = statics["l2_norm"]
    vector.scores["flops"] = statics["flops"]
    vector.scores["params"] = statics["params"]
    attempt("jacob_fro", lambda: score_jacob_fro(
        net, batch, batch.epsilon, config.jacob_fro_repeats,
        config.jacob_fro_softmax, seed=config.seed))
    if dataset_id in config.hessian_datasets or config.force_hessian:
        def hess():
            value, converged = score_hessian_eig(
                net, batch, config.power_iters, config.power_tol, config.seed)
            if not converged:
                vector.notes["hessian_eig"] = "power iteration not converged"
            return value
        attempt("hessian_eig", hess)
    else:
        vector.scores["hessian_eig"] = None
        vector.notes["hessian_eig"] = (
            f"not evaluated for dataset {dataset_id!r}")
    return vector


def write_proxy_csv(path, vectors, metadata=None):
    """Proxy table CSV; MISSING scores serialize as empty fields."""
    with open(path, "w", newline="") as fh:
        fh.write("# flops_units=mac\n")
        for key, value in (metadata or {}).items():
            fh.write(f"# {key}={value}\n")
        writer = csv.writer(fh)
        writer.writerow(PROXY_CSV_HEADER)
        for vec in vectors:
            writer.writerow(vec.as_row())
