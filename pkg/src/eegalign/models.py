"""Dilated/separable EEGInception variants for sleep staging and motor imagery.

Layout (per task config):

    input alignment (optional)
    inception block 1: per branch, avg-pool(d) -> temporal conv (K, dilation d)
                       -> depthwise spatial conv over electrodes (x D)
    concat -> norm -> ELU -> dropout -> avg-pool(pool1)
    inception block 2: per branch, avg-pool(d) -> depthwise temporal conv
                       (dilation d) -> pointwise conv
    concat -> norm -> ELU -> dropout -> avg-pool(pool2)
    separable stage 1 -> norm -> ELU -> dropout [-> deep-set] [-> avg-pool]
    separable stage 2 -> norm -> ELU -> dropout
    global average pool, or avg-pool(k) + flatten [-> deep-set]
    one linear head per dataset

"norm" is per-subject statistical alignment when ``alignment == "all"`` and
batch normalisation otherwise.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .alignment import DEFAULT_EPS, DeepSetAlign, StatAlignLayer
from .rng import stream
from .tensor import (Tensor, as_tensor, avg_pool1d, concat, conv1d, depthwise_conv_channels, dropout,
                     elu, global_avg_pool, linear, no_grad, same_padding)

CHECKPOINT_MAGIC = b"NALN"
CHECKPOINT_VERSION = 1
ALIGNMENT_MODES = ("all", "input", "none")


class BuildError(ValueError):
    """The configuration cannot produce a consistent network."""


class CheckpointError(ValueError):
    """A checkpoint file is malformed or does not match its config."""


@dataclass
class ModelConfig:
    task: str
    in_channels: int
    in_samples: int
    temporal_filters_per_branch: int = 8
    spatial_depth_multiplier: int = 2
    branch_dilations: tuple[int, ...] = (1, 2, 4)
    kernel_size: int = 15
    block2_kernel: int = 5
    stage_kernel: int = 7
    pool1_kernel: int = 4
    pool2_kernel: int = 8
    block2_channels_per_branch: int | None = None
    stage_channels: tuple[int, int] | None = None
    stage_pool: int = 1
    final_pool: str | int = 8
    n_heads: int = 1
    classes_per_head: int = 4
    dropout_p: float = 0.25
    alignment: str = "input"
    deepset: bool = True
    dense: bool = False
    eps: float = DEFAULT_EPS
    bn_momentum: float = 0.1

    def validate(self) -> None:
        if self.task not in ("sleep", "motor_imagery"):
            raise BuildError(f"unknown task {self.task!r}")
        if self.temporal_filters_per_branch < 1 or self.spatial_depth_multiplier < 1:
            raise BuildError("filter counts must be >= 1")
        if self.n_heads < 1 or self.classes_per_head < 2:
            raise BuildError("need >= 1 head and >= 2 classes")
        d = list(self.branch_dilations)
        if not d or any(b <= a for a, b in zip(d, d[1:])) or d[0] < 1:
            raise BuildError(f"branch dilations must be positive and strictly increasing, got {d}")
        if self.alignment not in ALIGNMENT_MODES:
            raise BuildError(f"alignment must be one of {ALIGNMENT_MODES}")
        if not 0 <= self.dropout_p < 1:
            raise BuildError("dropout_p must lie in [0, 1)")
        if self.final_pool != "global_average" and int(self.final_pool) < 1:
            raise BuildError("final_pool must be 'global_average' or a positive kernel")

    @property
    def block1_channels(self) -> int:
        return len(self.branch_dilations) * self.temporal_filters_per_branch * self.spatial_depth_multiplier

    @property
    def block2_per_branch(self) -> int:
        if self.block2_channels_per_branch is not None:
            return self.block2_channels_per_branch
        return self.temporal_filters_per_branch

    @property
    def block2_channels(self) -> int:
        return len(self.branch_dilations) * self.block2_per_branch

    @property
    def stages(self) -> tuple[int, int]:
        if self.stage_channels is not None:
            return tuple(self.stage_channels)
        c2 = self.block2_channels
        return (max(1, c2 // 2), max(1, c2 // 4))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "ModelConfig":
        vals = dict(raw)
        vals["branch_dilations"] = tuple(vals.get("branch_dilations", (1, 2, 4)))
        if vals.get("stage_channels") is not None:
            vals["stage_channels"] = tuple(vals["stage_channels"])
        return cls(**vals)


def sleep_config(in_channels: int = 2, in_samples: int = 3000, n_classes: int = 6, **overrides) -> ModelConfig:
    """Sleep variant: 8 temporal filters, x4 spatial, wide dilations, constant
    channel count after block 1, larger second pool, global average pooling,
    statistical alignment everywhere."""
    f, dm = 8, 4
    c1 = 3 * f * dm
    cfg = dict(task="sleep", in_channels=in_channels, in_samples=in_samples,
               temporal_filters_per_branch=f, spatial_depth_multiplier=dm,
               branch_dilations=(2, 4, 8), pool2_kernel=16,
               block2_channels_per_branch=c1 // 3, stage_channels=(c1, c1),
               final_pool="global_average", n_heads=1, classes_per_head=n_classes,
               alignment="all", deepset=False)
    cfg.update(overrides)
    return ModelConfig(**cfg)


def motor_imagery_config(in_channels: int = 30, in_samples: int = 640, n_heads: int = 3,
                         n_classes: int = 4, **overrides) -> ModelConfig:
    """Motor-imagery variant: 8 temporal filters, x2 spatial, enlarged final
    pool, one head per dataset, input alignment plus deep-set alignment."""
    cfg = dict(task="motor_imagery", in_channels=in_channels, in_samples=in_samples,
               temporal_filters_per_branch=8, spatial_depth_multiplier=2,
               branch_dilations=(1, 2, 4), pool2_kernel=8, final_pool=8,
               n_heads=n_heads, classes_per_head=n_classes, alignment="input", deepset=True)
    cfg.update(overrides)
    return ModelConfig(**cfg)


def branch_receptive_field(config: ModelConfig, branch: int, block: int = 1) -> int:
    """Temporal span (in samples at the block's input rate) seen by one branch."""
    d = config.branch_dilations[branch]
    k = config.kernel_size if block == 1 else config.block2_kernel
    return (k - 1) * d + 1 + (d - 1)


class BatchNorm:
    """Per-channel batch normalisation with running statistics for eval."""

    def __init__(self, channels: int, eps: float, momentum: float):
        self.channels = channels
        self.eps = eps
        self.momentum = momentum
        self.weight = Tensor(np.ones(channels), requires_grad=True)
        self.bias = Tensor(np.zeros(channels), requires_grad=True)
        self.running_mean = Tensor(np.zeros(channels))
        self.running_var = Tensor(np.ones(channels))

    def __call__(self, x: Tensor, boundaries, training: bool) -> Tensor:
        shape = (1, -1) if x.ndim == 2 else (1, -1, 1)
        axes = (0,) if x.ndim == 2 else (0, 2)
        if training:
            mean = x.mean(axes)
            centred = x - mean.reshape(shape)
            var = (centred * centred).mean(axes)
            m = self.momentum
            self.running_mean.data = (1 - m) * self.running_mean.data + m * mean.data
            self.running_var.data = (1 - m) * self.running_var.data + m * var.data
            z = centred / (var + self.eps).sqrt().reshape(shape)
        else:
            z = (x - self.running_mean.data.reshape(shape)) / np.sqrt(self.running_var.data + self.eps).reshape(shape)
        return z * self.weight.reshape(shape) + self.bias.reshape(shape)


class SubjectNorm:
    """Statistical alignment used as a normalisation layer."""

    def __init__(self, channels: int, eps: float):
        self.layer = StatAlignLayer(channels, eps)
        self.weight, self.bias = self.layer.weight, self.layer.bias

    def __call__(self, x: Tensor, boundaries, training: bool) -> Tensor:
        return self.layer(x, boundaries)


class Model:
    """Feature extractor plus per-dataset classifier heads."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        config.validate()
        self.config = config
        self.seed = seed
        self._state: list[tuple[str, Tensor, bool]] = []
        rng = stream(seed, "init")
        c = config
        E, F, D = c.in_channels, c.temporal_filters_per_branch, c.spatial_depth_multiplier
        nb = len(c.branch_dilations)

        self.input_norm = None
        if c.alignment in ("all", "input"):
            self.input_norm = SubjectNorm(E, c.eps)
            self._register_norm("input_align", self.input_norm)

        self.b1_temporal, self.b1_spatial = [], []
        for i, d in enumerate(c.branch_dilations):
            k = c.kernel_size * d if c.dense else c.kernel_size
            self.b1_temporal.append(self._weight(f"block1.branch{i}.temporal", (F, 1, k), rng))
            self.b1_spatial.append(self._weight(f"block1.branch{i}.spatial", (F * D, 1, E, 1), rng, fan_in=E))
        c1 = c.block1_channels
        self.norm1 = self._norm("block1.norm", c1)

        c2b = c.block2_per_branch
        self.b2_depth, self.b2_point = [], []
        for i, d in enumerate(c.branch_dilations):
            if c.dense:
                self.b2_depth.append(None)
                self.b2_point.append(self._weight(f"block2.branch{i}.conv", (c2b, c1, c.block2_kernel * d), rng))
            else:
                self.b2_depth.append(self._weight(f"block2.branch{i}.depthwise", (c1, 1, c.block2_kernel), rng))
                self.b2_point.append(self._weight(f"block2.branch{i}.pointwise", (c2b, c1, 1), rng))
        c2 = nb * c2b
        self.norm2 = self._norm("block2.norm", c2)

        c3, c4 = c.stages
        self.stage_depth, self.stage_point, self.stage_norm = [], [], []
        for j, (cin, cout) in enumerate(((c2, c3), (c3, c4))):
            if c.dense:
                self.stage_depth.append(None)
                self.stage_point.append(self._weight(f"stage{j + 1}.conv", (cout, cin, c.stage_kernel), rng))
            else:
                self.stage_depth.append(self._weight(f"stage{j + 1}.depthwise", (cin, 1, c.stage_kernel), rng))
                self.stage_point.append(self._weight(f"stage{j + 1}.pointwise", (cout, cin, 1), rng))
            self.stage_norm.append(self._norm(f"stage{j + 1}.norm", cout))

        t = self._temporal_lengths()
        self.feature_dim = c4 if c.final_pool == "global_average" else c4 * t["final"]
        if self.feature_dim < 1:
            raise BuildError(f"final pooling leaves no features (length {t['final']})")

        self.deepset_stage = self.deepset_final = None
        if c.deepset:
            self.deepset_stage = DeepSetAlign(c3, rng)
            self._register_module("stage1.deepset", self.deepset_stage)
            self.deepset_final = DeepSetAlign(self.feature_dim, rng)
            self._register_module("final.deepset", self.deepset_final)

        self.heads = []
        for h in range(c.n_heads):
            w = self._weight(f"head{h}.weight", (c.classes_per_head, self.feature_dim), rng)
            b = self._add(f"head{h}.bias", Tensor(np.zeros(c.classes_per_head), requires_grad=True))
            self.heads.append((w, b))

    # -- construction helpers ----------------------------------------------

    def _add(self, name: str, t: Tensor, trainable: bool = True) -> Tensor:
        self._state.append((name, t, trainable))
        return t

    def _weight(self, name: str, shape: tuple, rng, fan_in: int | None = None) -> Tensor:
        fan_in = fan_in or int(np.prod(shape[1:]))
        bound = 1.0 / np.sqrt(fan_in)
        return self._add(name, Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True))

    def _norm(self, name: str, channels: int):
        c = self.config
        norm = SubjectNorm(channels, c.eps) if c.alignment == "all" else BatchNorm(channels, c.eps, c.bn_momentum)
        self._register_norm(name, norm)
        return norm

    def _register_norm(self, name: str, norm) -> None:
        self._add(f"{name}.weight", norm.weight)
        self._add(f"{name}.bias", norm.bias)
        if isinstance(norm, BatchNorm):
            self._add(f"{name}.running_mean", norm.running_mean, trainable=False)
            self._add(f"{name}.running_var", norm.running_var, trainable=False)

    def _register_module(self, name: str, module: DeepSetAlign) -> None:
        for pname, p in zip(("gamma_w", "gamma_b", "lambda_w", "lambda_b"), module.parameters()):
            self._add(f"{name}.{pname}", p)

    def _temporal_lengths(self) -> dict:
        c = self.config
        t = c.in_samples
        out = {"input": t}
        t = (t - c.pool1_kernel) // c.pool1_kernel + 1
        out["pool1"] = t
        t = (t - c.pool2_kernel) // c.pool2_kernel + 1
        out["pool2"] = t
        if c.stage_pool > 1:
            t = (t - c.stage_pool) // c.stage_pool + 1
        out["stage"] = t
        if c.final_pool != "global_average":
            k = int(c.final_pool)
            t = (t - k) // k + 1 if t >= k else 0
        out["final"] = t
        for key, val in out.items():
            if val < 1:
                raise BuildError(f"input of {c.in_samples} samples is too short: length {val} after {key}")
        return out

    # -- public surface -----------------------------------------------------

    def parameters(self) -> list[Tensor]:
        return [t for _, t, trainable in self._state if trainable]

    def named_state(self) -> list[tuple[str, Tensor]]:
        return [(n, t) for n, t, _ in self._state]

    def n_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def head_parameters(self, head: int) -> list[Tensor]:
        return list(self.heads[head])

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def features(self, x: Tensor, boundaries, training: bool, rng=None) -> Tensor:
        c = self.config
        p = c.dropout_p if training else 0.0

        def drop(h):
            return dropout(h, p, rng, training) if p > 0 else h

        B, E, T = x.shape
        if self.input_norm is not None:
            x = self.input_norm(x, boundaries, training)

        branches = []
        for i, d in enumerate(c.branch_dilations):
            xb = x
            if c.dense:
                k, dil = c.kernel_size * d, 1
            else:
                k, dil = c.kernel_size, d
                if d > 1:
                    xb = avg_pool1d(xb, d, 1, same_padding(d))
            h = conv1d(xb.reshape(B * E, 1, T), self.b1_temporal[i], dilation=dil, padding=same_padding(k, dil))
            h = h.reshape(B, E, c.temporal_filters_per_branch, T).transpose(0, 2, 1, 3)
            h = depthwise_conv_channels(h, self.b1_spatial[i], c.spatial_depth_multiplier)
            branches.append(h.reshape(B, -1, T))
        h = concat(branches, axis=1)
        h = drop(elu(self.norm1(h, boundaries, training)))
        h = avg_pool1d(h, c.pool1_kernel)

        branches = []
        c1 = h.shape[1]
        for i, d in enumerate(c.branch_dilations):
            if c.dense:
                k = c.block2_kernel * d
                branches.append(conv1d(h, self.b2_point[i], padding=same_padding(k)))
                continue
            hb = avg_pool1d(h, d, 1, same_padding(d)) if d > 1 else h
            hb = conv1d(hb, self.b2_depth[i], dilation=d, groups=c1, padding=same_padding(c.block2_kernel, d))
            branches.append(conv1d(hb, self.b2_point[i]))
        h = concat(branches, axis=1)
        h = drop(elu(self.norm2(h, boundaries, training)))
        h = avg_pool1d(h, c.pool2_kernel)

        for j in range(2):
            if c.dense:
                h = conv1d(h, self.stage_point[j], padding=same_padding(c.stage_kernel))
            else:
                h = conv1d(h, self.stage_depth[j], groups=h.shape[1], padding=same_padding(c.stage_kernel))
                h = conv1d(h, self.stage_point[j])
            h = drop(elu(self.stage_norm[j](h, boundaries, training)))
            if j == 0:
                if self.deepset_stage is not None:
                    h = self.deepset_stage(h, boundaries)
                if c.stage_pool > 1:
                    h = avg_pool1d(h, c.stage_pool)

        if c.final_pool == "global_average":
            h = global_avg_pool(h)
        else:
            h = avg_pool1d(h, int(c.final_pool))
            h = h.reshape(B, -1)
        if self.deepset_final is not None:
            h = self.deepset_final(h, boundaries)
        return h

    def logits(self, x, boundaries, head: int = 0, training: bool = False, rng=None) -> Tensor:
        if not 0 <= head < len(self.heads):
            raise IndexError(f"head {head} out of range for {len(self.heads)} heads")
        x = as_tensor(x)
        if x.ndim != 3 or x.shape[1:] != (self.config.in_channels, self.config.in_samples):
            raise ValueError(f"expected input [K, {self.config.in_channels}, {self.config.in_samples}], "
                             f"got {x.shape}")
        w, b = self.heads[head]
        return linear(self.features(x, boundaries, training, rng), w, b)


def build_model(config: ModelConfig, seed: int = 0) -> Model:
    return Model(config, seed)


def forward(model: Model, chunk, subject_boundaries, head: int = 0, mode: str = "eval", rng=None) -> Tensor:
    """Logits for every trial of ``chunk``; statistics stay within subject groups."""
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    if mode == "train":
        if rng is None and model.config.dropout_p > 0:
            raise ValueError("training mode needs an rng for dropout")
        return model.logits(chunk, subject_boundaries, head, training=True, rng=rng)
    with no_grad():
        return model.logits(chunk, subject_boundaries, head, training=False)


def predict_subjects(model: Model, data: np.ndarray, subject_ids, head: int = 0) -> np.ndarray:
    """Eval-mode logits with every subject's trials forwarded together."""
    out = np.zeros((len(data), model.config.classes_per_head))
    subject_ids = np.asarray(subject_ids)
    for s in dict.fromkeys(subject_ids.tolist()):
        idx = np.flatnonzero(subject_ids == s)
        out[idx] = forward(model, data[idx], [0, len(idx)], head, "eval").data
    return out


# -- checkpoints --------------------------------------------------------------

def encode_checkpoint(model: Model) -> bytes:
    cfg = json.dumps(model.config.to_dict(), sort_keys=True).encode("utf-8")
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(cfg)), cfg]
    for _, t in model.named_state():
        parts.append(struct.pack("<I", t.ndim) + struct.pack(f"<{t.ndim}I", *t.shape))
        parts.append(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    return b"".join(parts)


def decode_checkpoint(buf: bytes) -> Model:
    if buf[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError("bad magic at byte offset 0: not a model checkpoint")
    if len(buf) < 12:
        raise CheckpointError("truncated checkpoint header")
    version, n = struct.unpack_from("<II", buf, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 12
    config = ModelConfig.from_dict(json.loads(buf[pos: pos + n].decode("utf-8")))
    pos += n
    model = Model(config, seed=0)
    for name, t in model.named_state():
        try:
            (rank,) = struct.unpack_from("<I", buf, pos)
            shape = struct.unpack_from(f"<{rank}I", buf, pos + 4)
        except struct.error:
            raise CheckpointError(f"truncated checkpoint at byte offset {pos} ({name})") from None
        pos += 4 + 4 * rank
        if tuple(shape) != t.shape:
            raise CheckpointError(f"{name}: stored shape {shape} != config shape {t.shape}")
        nbytes = 8 * int(np.prod(shape))
        if pos + nbytes > len(buf):
            raise CheckpointError(f"truncated checkpoint at byte offset {pos} ({name})")
        t.data = np.frombuffer(buf, dtype="<f8", count=int(np.prod(shape)), offset=pos).reshape(shape).copy()
        pos += nbytes
    if pos != len(buf):
        raise CheckpointError(f"{len(buf) - pos} trailing bytes at byte offset {pos}")
    return model


def save_checkpoint(model: Model, path) -> None:
    Path(path).write_bytes(encode_checkpoint(model))


def load_checkpoint(path) -> Model:
    return decode_checkpoint(Path(path).read_bytes())
