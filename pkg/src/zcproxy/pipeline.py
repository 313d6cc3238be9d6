"""End-to-end desk pipeline: instantiate, score, optionally train, attack.

Everything is driven by one JSON-serializable config dict whose hash is
embedded in each emitted file, so rerunning a manifest reproduces the
output CSVs byte for byte. Per-architecture failures are logged and the
run continues.
"""
from __future__ import annotations

import copy
import json
import os

import numpy as np

from . import attacks as atk
from . import autodiff as ad
from . import nn
from . import proxies as zcp
from . import reports
from .autodiff import Tape, Tensor
from .space import MacroConfig, decode, instantiate, read_arch_list

DEFAULT_CONFIG = {
    "dataset_id": "synthetic",
    "arch_indices": [],
    "macro": {"stem_channels": 8, "cells_per_stage": 1, "num_stages": 3,
              "input_resolution": 16, "num_classes": 4, "in_channels": 3},
    "dataset": {"kind": "synthetic", "n": 256, "seed": 7},
    "score_batch": 16,
    "epsilon": 1.0 / 255.0,
    "proxies": True,
    "force_hessian": True,
    "zcp": {},
    "train": {"enabled": False, "epochs": 5, "lr": 0.05, "batch": 32},
    "attacks": {"enabled": False, "kinds": ["fgsm", "pgd", "apgd", "square"],
                "eps_grid": {}, "iters": {}, "eval_n": 32, "seed": 0},
    "seed": 0,
}


def merge_config(overrides):
    config = copy.deepcopy(DEFAULT_CONFIG)

    def merge(dst, src):
        for key, value in src.items():
            if isinstance(value, dict) and isinstance(dst.get(key), dict):
                merge(dst[key], value)
            else:
                dst[key] = value

    merge(config, overrides or {})
    return config


def make_synthetic(n, num_classes, resolution, channels, seed):
    """Deterministic 4-ish-class toy images: smooth class template + noise."""
    if resolution % 4 != 0:
        raise ValueError("synthetic resolution must be a multiple of 4")
    rng = np.random.default_rng(seed)
    templates = rng.standard_normal((num_classes, channels, 4, 4))
    scale = resolution // 4
    up = np.kron(templates, np.ones((1, 1, scale, scale)))
    labels = (np.arange(n) % num_classes).astype(np.int64)
    noise = rng.standard_normal((n, channels, resolution, resolution))
    images = np.clip(0.5 + 0.25 * up[labels] + 0.12 * noise, 0.0, 1.0)
    return images, labels


def load_npz_dataset(path):
    """Raw-tensor dataset layout: float images (N,C,H,W) in [0,1], int labels (N,)."""
    doc = np.load(path)
    if "images" not in doc or "labels" not in doc:
        raise ValueError("dataset npz must contain 'images' and 'labels'")
    images = np.asarray(doc["images"], dtype=np.float64)
    labels = np.asarray(doc["labels"], dtype=np.int64)
    if images.ndim != 4 or labels.shape != (images.shape[0],):
        raise ValueError("dataset arrays have the wrong shape")
    if images.min() < 0.0 or images.max() > 1.0:
        raise ValueError("images must lie in [0, 1]")
    return images, labels


def save_npz_dataset(path, images, labels):
    np.savez(path, images=images, labels=labels)


def _load_dataset(config, macro):
    ds = config["dataset"]
    if ds["kind"] == "synthetic":
        return make_synthetic(ds["n"], macro.num_classes,
                              macro.input_resolution, macro.in_channels,
                              ds["seed"])
    if ds["kind"] == "npz":
        return load_npz_dataset(ds["path"])
    raise ValueError(f"unknown dataset kind {ds['kind']!r}")


def train_sgd(net, images, labels, epochs=5, lr=0.05, batch_size=32, seed=0):
    """Short plain-SGD loop so attacks act on a non-random classifier."""
    n = images.shape[0]
    rng = np.random.default_rng(seed)
    tensors = net.params.tensors()
    for _ in range(epochs):
        order = rng.permutation(n)
        for lo in range(0, n - 1, batch_size):
            idx = order[lo:lo + batch_size]
            if len(idx) < 2:
                continue
            with Tape() as tape:
                logits = net.forward(Tensor(images[idx]))
                loss = nn.softmax_cross_entropy(logits, labels[idx])
                ad.backward(tape, loss)
            for t in tensors:
                if t.grad is not None:
                    t.data = t.data - lr * t.grad
            net.params.zero_grad()
    return net


def _eps_grids(attack_cfg):
    grids = {"fgsm": list(atk.FGSM_EPS_GRID)}
    for kind in ("pgd", "apgd", "square"):
        grids[kind] = list(atk.PGD_EPS_GRID)
    for kind, grid in (attack_cfg.get("eps_grid") or {}).items():
        grids[kind] = [float(e) for e in grid]
    return grids


def _eps_label(eps):
    """Epsilon as an '<x>/255' string to match the table conventions."""
    v = eps * 255.0
    if abs(v - round(v)) < 1e-9:
        return f"{int(round(v))}/255"
    return f"{v:.10g}/255"


def run_desk_pipeline(config_overrides, out_dir, arch_indices=None,
                      log=print):
    """Run proxies (and optionally training + attacks) over architectures.

    Returns the manifest dict. Emits proxies.csv, clean.csv, robust.csv,
    manifest.json and errors.log under out_dir.
    """
    config = merge_config(config_overrides)
    if arch_indices is not None:
        config["arch_indices"] = [int(i) for i in arch_indices]
    if not config["arch_indices"]:
        raise ValueError("no architecture indices supplied")
    os.makedirs(out_dir, exist_ok=True)
    macro = MacroConfig(**config["macro"])
    images, labels = _load_dataset(config, macro)
    n = images.shape[0]
    eval_n = min(config["attacks"]["eval_n"], n // 2)
    train_x, train_y = images[: n - eval_n], labels[: n - eval_n]
    eval_x, eval_y = images[n - eval_n:], labels[n - eval_n:]

    score_n = min(config["score_batch"], len(train_x))
    batch = zcp.ScoreBatch(train_x[:score_n], train_y[:score_n],
                           epsilon=config["epsilon"], seed=config["seed"])
    zcp_cfg = zcp.ZcpConfig(seed=config["seed"],
                            force_hessian=config["force_hessian"],
                            **config["zcp"])

    vectors = []
    clean_rows = []
    robust_rows = []
    errors = []
    grids = _eps_grids(config["attacks"])
    for arch_index in config["arch_indices"]:
        try:
            if config["proxies"]:
                vectors.append(zcp.proxy_vector(
                    arch_index, config["dataset_id"], macro, batch, zcp_cfg))
            if config["attacks"]["enabled"]:
                net = instantiate(decode(arch_index), macro,
                                  seed=zcp.net_seed_for(config["seed"],
                                                        arch_index))
                if config["train"]["enabled"]:
                    train_sgd(net, train_x, train_y,
                              epochs=config["train"]["epochs"],
                              lr=config["train"]["lr"],
                              batch_size=config["train"]["batch"],
                              seed=config["seed"])
                clean_rows.append((arch_index, config["dataset_id"],
                                   atk.clean_accuracy(net, eval_x, eval_y)))
                for kind in config["attacks"]["kinds"]:
                    iters = int(config["attacks"]["iters"].get(kind, 0))
                    for eps in grids[kind]:
                        acfg = atk.AttackConfig(
                            kind=kind, epsilon=eps, iters=iters,
                            seed=config["attacks"]["seed"])
                        acc = atk.robust_accuracy(net, eval_x, eval_y, acfg)
                        robust_rows.append((arch_index, config["dataset_id"],
                                            kind, _eps_label(eps), acc))
        except Exception as err:  # per-arch failure: log and continue
            errors.append(f"arch {arch_index}: {type(err).__name__}: {err}")
            log(f"[pipeline] arch {arch_index} failed: {err}")

    outputs = []
    if vectors:
        path = os.path.join(out_dir, "proxies.csv")
        zcp.write_proxy_csv(path, vectors,
                            metadata={"config_hash": reports.config_hash(config)})
        outputs.append("proxies.csv")
    if clean_rows:
        path = os.path.join(out_dir, "clean.csv")
        with open(path, "w", newline="") as fh:
            fh.write(f"# config_hash={reports.config_hash(config)}\n")
            fh.write("arch_index,dataset,accuracy\n")
            for arch, ds, acc in clean_rows:
                fh.write(f"{arch},{ds},{acc!r}\n")
        outputs.append("clean.csv")
    if robust_rows:
        path = os.path.join(out_dir, "robust.csv")
        reports.write_robust_csv(path, robust_rows, config)
        outputs.append("robust.csv")
    if errors:
        with open(os.path.join(out_dir, "errors.log"), "w") as fh:
            fh.write("\n".join(errors) + "\n")
        outputs.append("errors.log")

    manifest = {"config": config, "config_hash": reports.config_hash(config),
                "outputs": outputs, "n_architectures": len(config["arch_indices"]),
                "n_errors": len(errors)}
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


def load_manifest(path):
    with open(path) as fh:
        return json.load(fh)


def rerun_manifest(manifest_path, out_dir, log=print):
    """Re-execute a recorded pipeline run (byte-identical CSV outputs)."""
    manifest = load_manifest(manifest_path)
    return run_desk_pipeline(manifest["config"], out_dir, log=log)


def arch_list_from_spec(spec, seed=0):
    """Resolve an architecture selection: path, explicit list, or sample spec."""
    if isinstance(spec, str):
        return read_arch_list(spec)
    if isinstance(spec, dict):
        count = int(spec["count"])
        rng = np.random.default_rng(spec.get("seed", seed))
        from .space import NUM_ARCHS
        return sorted(int(i) for i in
                      rng.choice(NUM_ARCHS, size=count, replace=False))
    return [int(i) for i in spec]
