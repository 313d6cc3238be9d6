"""NAS-Bench-201 cell space: encodings, isomorphism keys, desk-scale networks.

A cell is a 4-node DAG with 6 edges, each edge holding one of 5 operations.
Cells are stacked into a small macro network (stem, 3 stages separated by
stride-2 reductions, classifier head) that is big enough to carry the
topology signal the proxies need while staying cheap to differentiate.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor

NUM_EDGES = 6
NUM_OPS = 5
NUM_ARCHS = NUM_OPS ** NUM_EDGES  # 15625
# edge i connects EDGES[i][0] -> EDGES[i][1]; nodes 0 (input) .. 3 (output)
EDGES = ((0, 1), (0, 2), (1, 2), (0, 3), (1, 3), (2, 3))
_INCOMING = {1: ((0, 0),), 2: ((0, 1), (1, 2)), 3: ((0, 3), (1, 4), (2, 5))}


class OpId(IntEnum):
    zero = 0
    skip_connect = 1
    conv1x1 = 2
    conv3x3 = 3
    avgpool3x3 = 4


_OP_TOKEN = {OpId.conv1x1: "c1", OpId.conv3x3: "c3", OpId.avgpool3x3: "ap"}


class RangeError(ValueError):
    pass


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ArchEncoding:
    """One operation per cell edge; equivalent to an index in [0, 15624]."""

    ops: tuple

    def __post_init__(self):
        if len(self.ops) != NUM_EDGES:
            raise RangeError(f"expected {NUM_EDGES} ops, got {len(self.ops)}")
        object.__setattr__(self, "ops", tuple(OpId(o) for o in self.ops))

    @property
    def index(self):
        return encode(self)

    def __str__(self):
        return "|".join(op.name for op in self.ops)


def decode(index):
    """Base-5 little-endian digits of `index`, one per edge."""
    index = int(index)
    if not 0 <= index < NUM_ARCHS:
        raise RangeError(f"architecture index {index} outside [0, {NUM_ARCHS - 1}]")
    ops = []
    rest = index
    for _ in range(NUM_EDGES):
        ops.append(OpId(rest % NUM_OPS))
        rest //= NUM_OPS
    return ArchEncoding(tuple(ops))


def encode(arch):
    index = 0
    for op in reversed(arch.ops):
        index = index * NUM_OPS + int(op)
    return index


def canonical_form(arch):
    """Stable key identifying the cell's information flow.

    Each node is serialized bottom-up as a sorted '+'-join of its edge
    terms: a zero edge contributes the dead marker '#', which also swallows
    any op applied to a fully dead source; a skip edge inlines the source
    node's serialization (so identity paths collapse); conv and pool edges
    wrap their source as '(src)@op'. Two cells share a key exactly when
    these reduced expressions coincide; over the whole space this yields
    the established count of 6466 classes.
    """
    nodes = {0: "0"}
    for k in (1, 2, 3):
        terms = []
        for src_node, edge_idx in _INCOMING[k]:
            op = arch.ops[edge_idx]
            src = nodes[src_node]
            if op == OpId.zero or src == "#":
                terms.append("#")
            elif op == OpId.skip_connect:
                terms.append(src)
            else:
                terms.append(f"({src})@{_OP_TOKEN[op]}")
        nodes[k] = "+".join(sorted(terms))
    return nodes[3]


def canonical_classes(indices=None):
    """Group architecture indices by canonical key."""
    if indices is None:
        indices = range(NUM_ARCHS)
    classes = {}
    for i in indices:
        classes.setdefault(canonical_form(decode(i)), []).append(i)
    return classes


def read_arch_list(path):
    """Architecture list file: one integer index per line, '#' comments."""
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            try:
                out.append(int(line))
            except ValueError:
                raise RangeError(f"{path}:{lineno}: not an integer: {line!r}")
    for i in out:
        if not 0 <= i < NUM_ARCHS:
            raise RangeError(f"{path}: index {i} outside [0, {NUM_ARCHS - 1}]")
    return out


def write_canonical_csv(path, indices=None):
    if indices is None:
        indices = range(NUM_ARCHS)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "canonical_key"])
        for i in indices:
            w.writerow([i, canonical_form(decode(i))])


@dataclass(frozen=True)
class MacroConfig:
    stem_channels: int = 8
    cells_per_stage: int = 1
    num_stages: int = 3
    input_resolution: int = 16
    num_classes: int = 10
    in_channels: int = 3

    def __post_init__(self):
        for name in ("stem_channels", "cells_per_stage", "num_stages",
                     "input_resolution", "num_classes", "in_channels"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.num_stages != 3:
            raise ConfigError("macro uses exactly 3 stages")
        if self.input_resolution < 4:
            raise ConfigError("input resolution must be >= 4 for two "
                              "stride-2 reductions")


class CaptureState:
    """Collects activation traces during one forward pass."""

    def __init__(self):
        self.relu_outputs = []   # Tensors, in execution order
        self.bn_sigmas = []      # mean-over-channel batch std per BN layer
        self.bn_outputs = []     # BN output Tensors (fisher hooks)

    def record_relu(self, t):
        self.relu_outputs.append(t)

    def record_bn(self, sigma, out):
        self.bn_sigmas.append(sigma)
        self.bn_outputs.append(out)


class Network:
    """An instantiated cell architecture with deterministic parameters."""

    def __init__(self, arch, macro, seed):
        self.arch = arch
        self.macro = macro
        self.seed = int(seed)
        self.params = nn.ParamSet(seed)
        self._conv_edges = [i for i, op in enumerate(arch.ops)
                            if op in (OpId.conv1x1, OpId.conv3x3)]
        self._build()

    # -- construction ------------------------------------------------------

    def _stage_channels(self, stage):
        return self.macro.stem_channels * (2 ** stage)

    def _build(self):
        rng = np.random.default_rng(self.seed)
        m = self.macro
        nn.init_conv(self.params, "stem.conv", rng, m.stem_channels,
                     m.in_channels, 3)
        nn.init_bn(self.params, "stem.bn", rng, m.stem_channels)
        for stage in range(m.num_stages):
            ch = self._stage_channels(stage)
            for cell in range(m.cells_per_stage):
                for i in self._conv_edges:
                    k = 1 if self.arch.ops[i] == OpId.conv1x1 else 3
                    base = f"s{stage}c{cell}e{i}"
                    nn.init_conv(self.params, base + ".conv", rng, ch, ch, k)
                    nn.init_bn(self.params, base + ".bn", rng, ch)
            if stage < m.num_stages - 1:
                out_ch = self._stage_channels(stage + 1)
                nn.init_conv(self.params, f"red{stage}.conv", rng, out_ch, ch, 3)
                nn.init_bn(self.params, f"red{stage}.bn", rng, out_ch)
        final_ch = self._stage_channels(m.num_stages - 1)
        nn.init_bn(self.params, "head.bn", rng, final_ch)
        nn.init_linear(self.params, "head.fc", rng, m.num_classes, final_ch)

    # -- forward -----------------------------------------------------------

    def _bn(self, name, x, params, bn_mode, frozen_stats, collect_stats,
            capture):
        if collect_stats is not None:
            collect_stats[name] = nn.batch_stats(x.data)
        frozen = frozen_stats.get(name) if frozen_stats else None
        if bn_mode == "frozen" and frozen is None:
            raise ConfigError(f"frozen batchnorm stats missing for {name}")
        return nn.batchnorm(x, params[name + ".gamma"], params[name + ".beta"],
                            mode=bn_mode, frozen_stats=frozen, capture=capture)

    def _relu(self, x, capture):
        out = nn.relu(x)
        if capture is not None:
            capture.record_relu(out)
        return out

    def _edge(self, prefix, edge_idx, x, params, bn_mode, frozen_stats,
              collect_stats, capture):
        op = self.arch.ops[edge_idx]
        if op == OpId.skip_connect:
            return x
        if op == OpId.avgpool3x3:
            return nn.avgpool3x3(x)
        base = f"{prefix}e{edge_idx}"
        h = self._relu(x, capture)
        h = nn.conv2d(h, params[base + ".conv"], stride=1,
                      padding=0 if op == OpId.conv1x1 else 1)
        return self._bn(base + ".bn", h, params, bn_mode, frozen_stats,
                        collect_stats, capture)

    def _cell(self, prefix, x, params, bn_mode, frozen_stats, collect_stats,
              capture):
        values = [x, None, None, None]
        for node in (1, 2, 3):
            terms = []
            for src, edge_idx in _INCOMING[node]:
                if self.arch.ops[edge_idx] == OpId.zero:
                    continue
                terms.append(self._edge(prefix, edge_idx, values[src], params,
                                        bn_mode, frozen_stats, collect_stats,
                                        capture))
            if not terms:
                values[node] = Tensor(np.zeros_like(x.data))
                continue
            acc = terms[0]
            for t in terms[1:]:
                acc = ad.add(acc, t)
            values[node] = acc
        return values[3]

    def features(self, x, params=None, bn_mode="batch", frozen_stats=None,
                 collect_stats=None, capture=None):
        """Feature map just before global pooling (after head BN + ReLU)."""
        params = params or self.params
        m = self.macro
        h = nn.conv2d(x, params["stem.conv"], stride=1, padding=1)
        h = self._bn("stem.bn", h, params, bn_mode, frozen_stats,
                     collect_stats, capture)
        for stage in range(m.num_stages):
            for cell in range(m.cells_per_stage):
                h = self._cell(f"s{stage}c{cell}", h, params, bn_mode,
                               frozen_stats, collect_stats, capture)
            if stage < m.num_stages - 1:
                h = self._relu(h, capture)
                h = nn.conv2d(h, params[f"red{stage}.conv"], stride=2, padding=1)
                h = self._bn(f"red{stage}.bn", h, params, bn_mode,
                             frozen_stats, collect_stats, capture)
        h = self._bn("head.bn", h, params, bn_mode, frozen_stats,
                     collect_stats, capture)
        return self._relu(h, capture)

    def forward(self, x, params=None, bn_mode="batch", frozen_stats=None,
                collect_stats=None, capture=None):
        """Logits for an NCHW input Tensor."""
        params = params or self.params
        h = self.features(x, params, bn_mode, frozen_stats, collect_stats,
                          capture)
        h = nn.global_avg_pool(h)
        return nn.linear(h, params["head.fc.weight"], params["head.fc.bias"])

    def logits(self, x_np, bn_mode="batch", frozen_stats=None):
        """Plain-array convenience forward (no tape, no gradients)."""
        out = self.forward(Tensor(np.asarray(x_np, dtype=np.float64)),
                           bn_mode=bn_mode, frozen_stats=frozen_stats)
        return out.data

    def collect_bn_stats(self, x_np):
        """Batch statistics per BN layer on a reference batch, for frozen mode."""
        stats = {}
        self.forward(Tensor(np.asarray(x_np, dtype=np.float64)),
                     bn_mode="batch", collect_stats=stats)
        return stats

    # -- static counts -----------------------------------------------------

    def count_macs(self):
        """Multiply-accumulate count of one forward pass for a single sample."""
        m = self.macro
        res = m.input_resolution
        macs = res * res * m.stem_channels * m.in_channels * 9
        for stage in range(m.num_stages):
            ch = self._stage_channels(stage)
            for _ in range(m.cells_per_stage):
                for i in self._conv_edges:
                    k = 1 if self.arch.ops[i] == OpId.conv1x1 else 3
                    macs += res * res * ch * ch * k * k
            if stage < m.num_stages - 1:
                out_ch = self._stage_channels(stage + 1)
                out_res = (res + 2 - 3) // 2 + 1
                macs += out_res * out_res * out_ch * ch * 9
                res = out_res
        macs += m.num_classes * self._stage_channels(m.num_stages - 1)
        return macs


def instantiate(arch, macro, seed):
    """Build the runnable network for an encoding under a macro config."""
    return Network(arch, macro, seed)
