"""The four-head spatio-temporal network, its joint loss, training loop,
fine-tuning, FC compression and checkpoint files."""
from __future__ import annotations

import dataclasses
import json
import logging
import math
import struct
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from . import layers as L
from .layers import Conv3DSpec, LayerParams, OptimizerConfig
from .tensor import DTYPE, ShapeError, read_blob, rng, write_blob

log = logging.getLogger(__name__)

NUM_H1 = 19
NUM_H2 = 14
HEADS = ("loc", "cls", "h1", "h2")


class ConfigError(ValueError):
    pass


class TrainingDiverged(ArithmeticError):
    def __init__(self, iteration: int, breakdown: dict):
        super().__init__(f"non-finite loss at iteration {iteration}: {breakdown}")
        self.iteration = iteration
        self.breakdown = breakdown


@dataclass(frozen=True)
class ModelConfig:
    conv_specs: tuple
    pool_positions: tuple
    fc1_dim: int
    fc2_dim: int
    num_categories: int
    include_background: bool = False
    num_h1: int = NUM_H1
    num_h2: int = NUM_H2
    lambda1: float = 0.5
    lambda2: float = 0.5
    beta: float = 0.5
    input_shape: tuple = (3, 32, 112, 112)
    pool_kernel: tuple = (2, 2, 2)
    loc_mode: str = "normalized"
    input_mode: str = "am"
    fc_rank: int | None = None

    def __post_init__(self):
        specs = tuple(s if isinstance(s, Conv3DSpec) else Conv3DSpec(**s) for s in self.conv_specs)
        object.__setattr__(self, "conv_specs", specs)
        object.__setattr__(self, "pool_positions", tuple(int(p) for p in self.pool_positions))
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "pool_kernel", tuple(int(v) for v in self.pool_kernel))
        if not specs:
            raise ConfigError("at least one conv layer is required")
        if any(p < 0 or p >= len(specs) for p in self.pool_positions):
            raise ConfigError(f"pool positions {self.pool_positions} outside conv range")
        if self.num_categories < 1:
            raise ConfigError("num_categories must be >= 1")
        if self.loc_mode not in ("normalized", "raw"):
            raise ConfigError(f"unknown loc_mode {self.loc_mode!r}")
        if self.input_mode not in ("am", "gray", "rgb"):
            raise ConfigError(f"unknown input_mode {self.input_mode!r}")

    @property
    def num_classes(self) -> int:
        return self.num_categories + (1 if self.include_background else 0)

    @property
    def background_class(self) -> int | None:
        return self.num_categories if self.include_background else None

    def to_text(self) -> str:
        d = dataclasses.asdict(self)
        d["conv_specs"] = [dataclasses.asdict(s) for s in self.conv_specs]
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        d = json.loads(text)
        d["conv_specs"] = tuple(Conv3DSpec(**s) for s in d["conv_specs"])
        return cls(**d)

    def replace(self, **kw) -> "ModelConfig":
        return dataclasses.replace(self, **kw)


def paper_profile(num_categories: int = 100, **kw) -> ModelConfig:
    """Six convs / four pools / FC 4096-4096 on 3x32x112x112 inputs."""
    chans = [(3, 64), (64, 128), (128, 256), (256, 256), (256, 256), (256, 256)]
    base = dict(conv_specs=tuple(Conv3DSpec(i, o) for i, o in chans), pool_positions=(0, 1, 3, 5),
                fc1_dim=4096, fc2_dim=4096, input_shape=(3, 32, 112, 112))
    return ModelConfig(num_categories=num_categories, **{**base, **kw})


def toy_profile(num_categories: int = 10, **kw) -> ModelConfig:
    chans = [(3, 8), (8, 16), (16, 16)]
    base = dict(conv_specs=tuple(Conv3DSpec(i, o) for i, o in chans), pool_positions=(0, 1, 2),
                fc1_dim=64, fc2_dim=64, input_shape=(3, 8, 32, 32))
    return ModelConfig(num_categories=num_categories, **{**base, **kw})


def tiny_profile(num_categories: int = 3, **kw) -> ModelConfig:
    """Two convs on 3x4x8x8; used for end-to-end gradient checks."""
    base = dict(conv_specs=(Conv3DSpec(3, 4), Conv3DSpec(4, 4)), pool_positions=(0, 1),
                fc1_dim=16, fc2_dim=12, input_shape=(3, 4, 8, 8))
    return ModelConfig(num_categories=num_categories, **{**base, **kw})


PROFILES = {"paper": paper_profile, "toy": toy_profile, "tiny": tiny_profile}


def layer_shapes(config: ModelConfig, batch: int = 1) -> list[tuple[str, tuple]]:
    """Per-layer output shapes; raises ConfigError naming the collapsing layer."""
    report = []
    c, *ext = config.input_shape
    pool_idx = 0
    for i, spec in enumerate(config.conv_specs):
        name = f"conv{i + 1}"
        if spec.in_channels != c:
            raise ConfigError(f"{name} expects {spec.in_channels} channels but receives {c}")
        try:
            ext = list(spec.output_extents(ext))
        except L.GeometryError as exc:
            raise ConfigError(f"{name}: {exc}") from None
        c = spec.out_channels
        report.append((name, (batch, c, *ext)))
        if i in config.pool_positions:
            pool_idx += 1
            try:
                ext = list(L.pool_output_extents(ext, config.pool_kernel, config.pool_kernel))
            except L.GeometryError as exc:
                raise ConfigError(f"pool{pool_idx}: {exc}") from None
            if min(ext) < 1:
                raise ConfigError(f"pool{pool_idx} collapses the volume to {tuple(ext)}")
            report.append((f"pool{pool_idx}", (batch, c, *ext)))
    report.append(("flatten", (batch, c * int(np.prod(ext)))))
    report.append(("fc1", (batch, config.fc1_dim)))
    report.append(("fc2", (batch, config.fc2_dim)))
    report.append(("loc", (batch, 2)))
    report.append(("cls", (batch, config.num_classes)))
    report.append(("h1", (batch, config.num_h1)))
    report.append(("h2", (batch, config.num_h2)))
    return report


@dataclass
class ModelOutput:
    loc: np.ndarray
    class_logits: np.ndarray
    h1_logits: np.ndarray
    h2_logits: np.ndarray

    @property
    def class_probs(self) -> np.ndarray:
        return L.softmax(self.class_logits)

    @property
    def h1_probs(self) -> np.ndarray:
        return L.sigmoid(self.h1_logits)

    @property
    def h2_probs(self) -> np.ndarray:
        return L.sigmoid(self.h2_logits)

    def __len__(self):
        return self.loc.shape[0]

    def __getitem__(self, idx) -> "ModelOutput":
        idx = np.atleast_1d(np.arange(len(self))[idx])
        return ModelOutput(self.loc[idx], self.class_logits[idx], self.h1_logits[idx], self.h2_logits[idx])


@dataclass
class Targets:
    labels: np.ndarray | None
    h1: np.ndarray | None
    h2: np.ndarray | None
    loc: np.ndarray | None

    def __getitem__(self, idx) -> "Targets":
        return Targets(self.labels[idx], self.h1[idx], self.h2[idx], self.loc[idx])


def joint_loss(outputs: ModelOutput, targets: Targets, lambda1: float = 0.5, lambda2: float = 0.5,
               beta: float = 0.5, with_grads: bool = False):
    """Weighted multi-task loss ``L_cat + l1*L_H1 + l2*L_H2 + beta*L_bbox``.

    Returns ``(total, breakdown)`` and, with ``with_grads``, a third item
    mapping each head name to the gradient w.r.t. its pre-activation output.
    The breakdown holds the already-weighted terms.
    """
    for name in ("labels", "h1", "h2", "loc"):
        if getattr(targets, name) is None:
            raise ValueError(f"targets.{name} is missing")
    l_cat, g_cls = L.softmax_cross_entropy(outputs.class_logits, targets.labels)
    p1 = outputs.h1_probs
    l_h1, g_p1 = L.multilabel_cross_entropy(p1, targets.h1)
    p2 = outputs.h2_probs
    l_h2, g_p2 = L.multilabel_cross_entropy(p2, targets.h2)
    l_box, g_loc = L.bbox_euclidean_loss(outputs.loc, targets.loc)
    breakdown = {"L_cat": l_cat, "L_H1": lambda1 * l_h1, "L_H2": lambda2 * l_h2, "L_bbox": beta * l_box}
    total = l_cat + lambda1 * l_h1 + lambda2 * l_h2 + beta * l_box
    if not with_grads:
        return total, breakdown
    grads = {
        "cls": g_cls,
        "h1": (lambda1 * g_p1 * p1 * (1.0 - p1)).astype(DTYPE),
        "h2": (lambda2 * g_p2 * p2 * (1.0 - p2)).astype(DTYPE),
        "loc": (beta * g_loc).astype(DTYPE),
    }
    return total, breakdown, grads


class DAP3DNet:
    """Conv/pool trunk -> FC1 -> FC2 with loc/class/H2 heads on FC2 and the
    H1 head on FC1. Parameters live in ``self.params`` keyed by layer name."""

    def __init__(self, config: ModelConfig, params: dict[str, LayerParams]):
        self.config = config
        self.report = layer_shapes(config)
        self.params = params
        self._fc_names = {"fc1": self._fc_keys("fc1"), "fc2": self._fc_keys("fc2")}

    def _fc_keys(self, name):
        if f"{name}.a" in self.params:
            return (f"{name}.a", f"{name}.b")
        return (name,)

    @property
    def layer_names(self) -> list[str]:
        return [n for n, _ in self.report if n != "flatten"]

    @property
    def feature_layers(self) -> list[str]:
        """Names accepted by ``forward(stop_at=...)``."""
        return [n for n in self.layer_names if n.startswith(("conv", "pool", "fc"))]

    # -- forward / backward ------------------------------------------------
    def forward(self, x: np.ndarray, cache: dict | None = None, stop_at: str | None = None):
        if stop_at is not None and stop_at not in self.feature_layers:
            raise ValueError(f"unknown layer {stop_at!r}; valid names: {', '.join(self.feature_layers)}")
        x = np.asarray(x, dtype=DTYPE)
        if x.ndim != 5 or x.shape[1:] != self.config.input_shape:
            raise ShapeError(f"expected (N, {', '.join(map(str, self.config.input_shape))}), got {x.shape}")
        h = x
        pool_idx = 0
        trunk = []
        for i, spec in enumerate(self.config.conv_specs):
            name = f"conv{i + 1}"
            ccache = {} if cache is not None else None
            z = L.conv3d_forward(h, spec, self.params[name], ccache)
            a = L.relu_forward(z)
            trunk.append(("conv", name, h, z, ccache))
            if stop_at == name:
                return a
            h = a
            if i in self.config.pool_positions:
                pool_idx += 1
                h, arg = L.maxpool3d_forward(a, self.config.pool_kernel, self.config.pool_kernel)
                trunk.append(("pool", f"pool{pool_idx}", a.shape, arg, None))
                if stop_at == f"pool{pool_idx}":
                    return h
        if cache is not None:
            cache.update(trunk=trunk, flat_shape=h.shape)
        return self.heads(h.reshape(h.shape[0], -1), cache, stop_at)

    def heads(self, features: np.ndarray, cache: dict | None = None, stop_at: str | None = None):
        """FC1, FC2 and the four heads on flattened trunk features."""
        f1_in, f1 = self._dense_forward("fc1", features)
        if stop_at == "fc1":
            return L.relu_forward(f1)
        a1 = L.relu_forward(f1)
        f2_in, f2 = self._dense_forward("fc2", a1)
        a2 = L.relu_forward(f2)
        if stop_at == "fc2":
            return a2
        out = ModelOutput(
            loc=L.fc_forward(a2, self.params["loc"]),
            class_logits=L.fc_forward(a2, self.params["cls"]),
            h1_logits=L.fc_forward(a1, self.params["h1"]),
            h2_logits=L.fc_forward(a2, self.params["h2"]),
        )
        if cache is not None:
            cache.update(f1_in=f1_in, f1=f1, a1=a1, f2_in=f2_in, f2=f2, a2=a2)
        return out

    def _dense_forward(self, name, x):
        inputs = []
        for key in self._fc_names[name]:
            inputs.append(x)
            x = L.fc_forward(x, self.params[key])
        return inputs, x

    def _dense_backward(self, name, inputs, g):
        for key, x in reversed(list(zip(self._fc_names[name], inputs))):
            g = L.fc_backward(x, self.params[key], g)
        return g

    def backward(self, cache: dict, head_grads: dict) -> None:
        """Accumulate parameter gradients given gradients at the four heads."""
        a1, a2 = cache["a1"], cache["a2"]
        g_a2 = L.fc_backward(a2, self.params["loc"], head_grads["loc"])
        g_a2 += L.fc_backward(a2, self.params["cls"], head_grads["cls"])
        g_a2 += L.fc_backward(a2, self.params["h2"], head_grads["h2"])
        g_f2 = L.relu_backward(cache["f2"], g_a2)
        g_a1 = self._dense_backward("fc2", cache["f2_in"], g_f2)
        g_a1 += L.fc_backward(a1, self.params["h1"], head_grads["h1"])
        g_f1 = L.relu_backward(cache["f1"], g_a1)
        g = self._dense_backward("fc1", cache["f1_in"], g_f1).reshape(cache["flat_shape"])
        trunk = cache["trunk"]
        for idx in range(len(trunk) - 1, -1, -1):
            kind, name, a, b, c = trunk[idx]
            if kind == "pool":
                g = L.maxpool3d_backward(a, b, g)
            else:
                spec = self.config.conv_specs[int(name[4:]) - 1]
                g = L.relu_backward(b, g)
                g = L.conv3d_backward(a, spec, self.params[name], g, c, need_input_grad=idx > 0)

    def loss_and_grads(self, x: np.ndarray, targets: Targets):
        cache = {}
        out = self.forward(x, cache)
        cfg = self.config
        total, breakdown, grads = joint_loss(out, targets, cfg.lambda1, cfg.lambda2, cfg.beta, with_grads=True)
        if math.isfinite(total):
            self.backward(cache, grads)
        return total, breakdown

    def predict(self, x: np.ndarray, batch_size: int = 64) -> ModelOutput:
        parts = [self.forward(x[i:i + batch_size]) for i in range(0, len(x), batch_size)]
        if not parts:
            z = lambda k: np.zeros((0, k), dtype=DTYPE)
            return ModelOutput(z(2), z(self.config.num_classes), z(self.config.num_h1), z(self.config.num_h2))
        return ModelOutput(*(np.concatenate([getattr(p, f) for p in parts])
                             for f in ("loc", "class_logits", "h1_logits", "h2_logits")))

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def copy(self) -> "DAP3DNet":
        return DAP3DNet(self.config, {k: v.copy() for k, v in self.params.items()})


def build(config: ModelConfig, seed: int = 0) -> DAP3DNet:
    report = layer_shapes(config)
    params = {}
    for i, spec in enumerate(config.conv_specs):
        params[f"conv{i + 1}"] = spec.init_params(seed, 1, i)
    flat = dict(report)["flatten"][1]
    params["fc1"] = L.fc_init(flat, config.fc1_dim, seed, 2, 0)
    params["fc2"] = L.fc_init(config.fc1_dim, config.fc2_dim, seed, 2, 1)
    params.update(_init_heads(config, seed))
    model = DAP3DNet(config, params)
    if config.fc_rank is not None:
        model = svd_compress_fc(model, config.fc_rank)
    return model


def _init_heads(config: ModelConfig, seed: int, only: Iterable[str] = HEADS) -> dict[str, LayerParams]:
    dims = {"loc": (config.fc2_dim, 2), "cls": (config.fc2_dim, config.num_classes),
            "h1": (config.fc1_dim, config.num_h1), "h2": (config.fc2_dim, config.num_h2)}
    return {name: L.fc_init(*dims[name], seed, 3, HEADS.index(name)) for name in only}


# -- FC compression ----------------------------------------------------------

def svd_compress_fc(model: DAP3DNet, rank: int) -> DAP3DNet:
    """Replace FC1/FC2 weights ``W`` by ``U_r (S_r V_r^T)``, two chained maps."""
    params = {k: v for k, v in model.params.items()}
    for name in ("fc1", "fc2"):
        if name not in params:
            raise ValueError(f"{name} is already factorized")
        w = params[name].weights
        if not 1 <= rank <= min(w.shape):
            raise ValueError(f"rank must be in [1, {min(w.shape)}] for {name}, got {rank}")
    for name in ("fc1", "fc2"):
        p = params.pop(name)
        u, s, vt = np.linalg.svd(p.weights.astype(np.float64), full_matrices=False)
        first = (s[:rank, None] * vt[:rank]).astype(DTYPE)
        second = u[:, :rank].astype(DTYPE)
        params[f"{name}.a"] = LayerParams(first, np.zeros(rank, dtype=DTYPE))
        params[f"{name}.b"] = LayerParams(second, p.bias.copy())
    return DAP3DNet(model.config.replace(fc_rank=rank), params)


# -- data feeding --------------------------------------------------------------

@dataclass
class ArrayDataset:
    """In-memory training set: inputs (N, C, T, H, W) and per-head targets."""
    x: np.ndarray
    labels: np.ndarray
    h1: np.ndarray
    h2: np.ndarray
    loc: np.ndarray

    def __len__(self):
        return len(self.x)

    def targets(self, idx=slice(None)) -> Targets:
        return Targets(self.labels[idx], self.h1[idx], self.h2[idx], self.loc[idx])

    def batch_indices(self, iteration: int, batch_size: int, seed: int) -> np.ndarray:
        """Indices for one step: consecutive slices of per-epoch permutations.

        Stateless in ``iteration`` so resumed runs see the same batches.
        """
        n = len(self)
        start = iteration * batch_size
        out = []
        while len(out) < batch_size:
            epoch, offset = divmod(start + len(out), n)
            perm = rng(seed, 7, epoch).permutation(n)
            out.extend(perm[offset:offset + batch_size - len(out)].tolist())
        return np.asarray(out, dtype=np.int64)


@dataclass
class TrainState:
    model: DAP3DNet
    iteration: int
    seed: int
    optimizer: OptimizerConfig
    history: list = field(default_factory=list)


LOG_COLUMNS = ("iteration", "lr", "L_cat", "L_H1", "L_H2", "L_bbox", "total")


def format_log_row(row: dict) -> str:
    return ",".join(str(row["iteration"]) if c == "iteration" else repr(float(row[c])) for c in LOG_COLUMNS)


def train(model: DAP3DNet, dataset: ArrayDataset, optimizer: OptimizerConfig, seed: int = 0,
          start_iteration: int = 0, on_step: Callable[[dict], None] | None = None,
          checkpoint_every: int | None = None,
          on_checkpoint: Callable[[TrainState], None] | None = None) -> TrainState:
    """Momentum SGD on the joint loss up to ``optimizer.max_iterations``.

    Each step's breakdown row is passed to ``on_step`` and kept in the
    returned state's history. ``on_checkpoint`` receives the live state every
    ``checkpoint_every`` iterations and at the end.
    """
    state = TrainState(model, start_iteration, seed, optimizer)
    model.zero_grad()
    for it in range(start_iteration, optimizer.max_iterations):
        lr = L.lr_schedule(optimizer, it)
        idx = dataset.batch_indices(it, optimizer.batch_size, seed)
        total, breakdown = model.loss_and_grads(dataset.x[idx], dataset.targets(idx))
        row = {"iteration": it, "lr": lr, **breakdown, "total": total}
        if not all(math.isfinite(v) for v in (total, *breakdown.values())):
            model.zero_grad()
            raise TrainingDiverged(it, breakdown)
        for p in model.params.values():
            L.sgd_momentum_step(p, optimizer, lr)
        state.iteration = it + 1
        state.history.append(row)
        if on_step is not None:
            on_step(row)
        if checkpoint_every and on_checkpoint and state.iteration % checkpoint_every == 0:
            on_checkpoint(state)
    if on_checkpoint is not None and not (checkpoint_every and state.iteration % checkpoint_every == 0
                                          and state.iteration > start_iteration):
        on_checkpoint(state)
    return state


def reset_class_head(model: DAP3DNet, new_num_categories: int, seed: int,
                     include_background: bool = True) -> DAP3DNet:
    """Warm-started copy with a freshly initialized class head of width C(+1)."""
    cfg = model.config.replace(num_categories=new_num_categories, include_background=include_background)
    params = {k: v.copy() for k, v in model.params.items()}
    for k, p in params.items():
        p.momentum_weights.fill(0.0)
        p.momentum_bias.fill(0.0)
        p.zero_grad()
    params.update(_init_heads(cfg, seed, only=("cls",)))
    return DAP3DNet(cfg, params)


def finetune(model: DAP3DNet, new_num_categories: int, dataset: ArrayDataset,
             optimizer: OptimizerConfig = L.FINETUNE, seed: int = 0, **kw) -> TrainState:
    tuned = reset_class_head(model, new_num_categories, seed)
    return train(tuned, dataset, optimizer, seed=seed, **kw)


# -- checkpoints ----------------------------------------------------------------

CKPT_MAGIC = b"APCK"
CKPT_VERSION = 1


@dataclass
class Checkpoint:
    model: DAP3DNet
    iteration: int = 0
    seed: int = 0
    optimizer: OptimizerConfig | None = None


def _write_str(fh, s: str):
    b = s.encode("utf-8")
    fh.write(struct.pack("<I", len(b)))
    fh.write(b)


def _read_str(fh) -> str:
    (n,) = struct.unpack("<I", fh.read(4))
    return fh.read(n).decode("utf-8")


def save_checkpoint(path, model: DAP3DNet, iteration: int = 0, seed: int = 0,
                    optimizer: OptimizerConfig | None = None) -> None:
    names = sorted(model.params)
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", CKPT_VERSION))
        _write_str(fh, model.config.to_text())
        fh.write(struct.pack("<I", len(names)))
        for name in names:
            _write_str(fh, name)
            write_blob(fh, model.params[name].weights)
            write_blob(fh, model.params[name].bias)
        state = {"iteration": int(iteration), "seed": int(seed),
                 "optimizer": dataclasses.asdict(optimizer) if optimizer else None}
        _write_str(fh, json.dumps(state, sort_keys=True))
        for name in names:
            write_blob(fh, model.params[name].momentum_weights)
            write_blob(fh, model.params[name].momentum_bias)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        if fh.read(4) != CKPT_MAGIC:
            raise ValueError(f"{path} is not a checkpoint file")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != CKPT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        config = ModelConfig.from_text(_read_str(fh))
        (count,) = struct.unpack("<I", fh.read(4))
        params = {}
        for _ in range(count):
            name = _read_str(fh)
            params[name] = LayerParams(read_blob(fh), read_blob(fh))
        state = json.loads(_read_str(fh))
        for name in sorted(params):
            params[name].momentum_weights[...] = read_blob(fh)
            params[name].momentum_bias[...] = read_blob(fh)
    opt = OptimizerConfig(**state["optimizer"]) if state["optimizer"] else None
    return Checkpoint(DAP3DNet(config, params), state["iteration"], state["seed"], opt)
