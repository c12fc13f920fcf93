"""Attention-based deep MIL: embedding MLP, attention pooling, bag classifier.

Gradients are derived by hand (no autograd); training is batch-size-1 Adam
with a triangular cyclic learning rate and min-validation-loss model
selection. All training math is 64-bit.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DimensionMismatch, NonFiniteGradient, SingleClassTraining
from .kernels import mil_bag_step

LOSS_EPS = 1e-7

PARAM_BLOCKS = ("W1", "b1", "W2", "b2", "V", "w", "u", "c")


@dataclass
class Bag:
    bag_id: str
    instances: np.ndarray  # (K, d) float64
    label: int  # 0 | 1
    weight: float = 1.0
    origin: tuple | None = None

    def __post_init__(self):
        self.instances = np.asarray(self.instances, dtype=np.float64)
        if self.instances.ndim != 2 or self.instances.shape[0] < 1:
            raise ValueError("instances must be a (K >= 1, d) matrix")
        if not np.all(np.isfinite(self.instances)):
            raise ValueError("instance features must be finite")
        if self.weight <= 0:
            raise ValueError("bag weight must be positive")


@dataclass
class MilDims:
    d: int
    h1: int = 512
    h2: int = 512
    L: int = 128

    def param_count(self) -> int:
        return (
            self.h1 * self.d
            + self.h1
            + self.h2 * self.h1
            + self.h2
            + self.L * self.h2
            + self.L
            + self.h2
            + 1
        )


@dataclass
class MilParams:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    V: np.ndarray
    w: np.ndarray
    u: np.ndarray
    c: np.ndarray  # shape (1,)

    def dims(self) -> MilDims:
        return MilDims(
            d=self.W1.shape[1], h1=self.W1.shape[0], h2=self.W2.shape[0], L=self.V.shape[0]
        )

    def blocks(self):
        return [(name, getattr(self, name)) for name in PARAM_BLOCKS]

    def copy(self) -> "MilParams":
        return MilParams(**{name: arr.copy() for name, arr in self.blocks()})

    @classmethod
    def zeros(cls, dims: MilDims) -> "MilParams":
        return cls(
            W1=np.zeros((dims.h1, dims.d)),
            b1=np.zeros(dims.h1),
            W2=np.zeros((dims.h2, dims.h1)),
            b2=np.zeros(dims.h2),
            V=np.zeros((dims.L, dims.h2)),
            w=np.zeros(dims.L),
            u=np.zeros(dims.h2),
            c=np.zeros(1),
        )


@dataclass
class TrainConfig:
    epochs: int = 100
    lr_min: float = 1e-5
    lr_max: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    cycle_steps: int | None = None  # default: 2 x number of training bags
    seed: int = 0
    val_fraction: float = 0.2

    def __post_init__(self):
        if not (0 < self.lr_min <= self.lr_max):
            raise ValueError("require 0 < lr_min <= lr_max")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")


@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0

    @classmethod
    def zeros_like(cls, params: MilParams) -> "AdamState":
        return cls(
            m={name: np.zeros_like(arr) for name, arr in params.blocks()},
            v={name: np.zeros_like(arr) for name, arr in params.blocks()},
        )


def init_params(dims: MilDims, seed: int) -> MilParams:
    """He-uniform for the ReLU layers, Xavier-uniform for attention/classifier.

    Driven by numpy's PCG64 generator seeded with ``seed``; biases and c zero.
    """
    rng = np.random.default_rng(seed)

    def he(shape, fan_in):
        lim = np.sqrt(6.0 / fan_in)
        return rng.uniform(-lim, lim, size=shape)

    def xavier(shape, fan_in, fan_out):
        lim = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-lim, lim, size=shape)

    return MilParams(
        W1=he((dims.h1, dims.d), dims.d),
        b1=np.zeros(dims.h1),
        W2=he((dims.h2, dims.h1), dims.h1),
        b2=np.zeros(dims.h2),
        V=xavier((dims.L, dims.h2), dims.h2, dims.L),
        w=xavier((dims.L,), dims.L, 1),
        u=xavier((dims.h2,), dims.h2, 1),
        c=np.zeros(1),
    )


def forward(bag: Bag, params: MilParams):
    """Bag probability and attention weights.

    h_k = ReLU(W2 ReLU(W1 x_k + b1) + b2); e_k = w^T tanh(V h_k);
    a = softmax(e) (max-subtracted); z = sum_k a_k h_k; p = sigmoid(u^T z + c).
    Returns (p, a, cache) where cache feeds ``backward``.
    """
    X = bag.instances
    if X.shape[1] != params.W1.shape[1]:
        raise DimensionMismatch(
            f"bag feature dim {X.shape[1]} != model dim {params.W1.shape[1]}"
        )
    Z1 = X @ params.W1.T + params.b1
    H1 = np.maximum(Z1, 0.0)
    Z2 = H1 @ params.W2.T + params.b2
    H2 = np.maximum(Z2, 0.0)
    T = np.tanh(H2 @ params.V.T)
    e = T @ params.w
    e = e - e.max()
    a = np.exp(e)
    a = a / a.sum()
    z = a @ H2
    s = float(params.u @ z + params.c[0])
    p = float(np.exp(-np.logaddexp(0.0, -s)))  # overflow-safe sigmoid
    cache = {
        "X": X, "Z1": Z1, "H1": H1, "Z2": Z2, "H2": H2,
        "T": T, "a": a, "z": z, "p": p, "params": params,
    }
    return p, a, cache


def loss_wbce(p: float, y: int, weight: float) -> float:
    """Weighted binary cross-entropy with probability clamped to [1e-7, 1-1e-7]."""
    pt = min(max(p, LOSS_EPS), 1.0 - LOSS_EPS)
    return -weight * (y * np.log(pt) + (1 - y) * np.log(1.0 - pt))


def backward(cache: dict, y: int, weight: float) -> MilParams:
    """Exact gradients of loss_wbce(forward(.)) for every parameter block."""
    params: MilParams = cache["params"]
    X, Z1, H1, Z2, H2 = cache["X"], cache["Z1"], cache["H1"], cache["Z2"], cache["H2"]
    T, a, z, p = cache["T"], cache["a"], cache["z"], cache["p"]
    K = X.shape[0]

    # d(loss)/ds; zero when the clamp is active, matching the evaluated loss
    if p <= LOSS_EPS or p >= 1.0 - LOSS_EPS:
        ds = 0.0
    else:
        ds = weight * (p - y)

    g = MilParams.zeros(params.dims())
    g.c[0] = ds
    g.u[:] = ds * z
    dz = ds * params.u
    da = H2 @ dz
    dH2 = np.outer(a, dz)
    de = a * (da - a @ da)
    g.w[:] = de @ T
    dT = np.outer(de, params.w)
    dPre = dT * (1.0 - T * T)
    g.V[:] = dPre.T @ H2
    dH2 = dH2 + dPre @ params.V
    dZ2 = dH2 * (Z2 > 0.0)
    g.W2[:] = dZ2.T @ H1
    g.b2[:] = dZ2.sum(axis=0)
    dH1 = dZ2 @ params.W2
    dZ1 = dH1 * (Z1 > 0.0)
    g.W1[:] = dZ1.T @ X
    g.b1[:] = dZ1.sum(axis=0)
    return g


def cyclic_lr(step: int, cfg: TrainConfig, cycle_steps: int | None = None) -> float:
    """Triangular wave from lr_min to lr_max and back, period cycle_steps."""
    cs = cycle_steps if cycle_steps is not None else cfg.cycle_steps
    if cs is None or cs < 2:
        raise ValueError("cycle_steps must be >= 2")
    frac = (step % cs) / cs
    return cfg.lr_min + (cfg.lr_max - cfg.lr_min) * (1.0 - abs(2.0 * frac - 1.0))


def adam_step(
    params: MilParams, grads: MilParams, state: AdamState, lr: float, cfg: TrainConfig
) -> None:
    """Standard Adam update with bias correction; mutates params and state."""
    state.step += 1
    t = state.step
    b1c = 1.0 - cfg.beta1 ** t
    b2c = 1.0 - cfg.beta2 ** t
    for name, arr in params.blocks():
        g = getattr(grads, name)
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient in block {name}")
        m = state.m[name]
        v = state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        arr -= lr * (m / b1c) / (np.sqrt(v / b2c) + cfg.adam_eps)


def _fused_step(bag: Bag, params: MilParams):
    """Run the fused kernel and repack its gradient outputs."""
    p, a, gW1, gb1, gW2, gb2, gV, gw, gu, gc = mil_bag_step(
        bag.instances,
        np.ascontiguousarray(params.W1.T),
        params.b1,
        np.ascontiguousarray(params.W2.T),
        params.b2,
        np.ascontiguousarray(params.V.T),
        params.w,
        params.u,
        params.c[0],
        float(bag.label),
        bag.weight,
    )
    g = MilParams(
        W1=gW1, b1=gb1, W2=gW2, b2=gb2, V=gV, w=gw, u=gu, c=np.array([gc])
    )
    return float(p), g


def _split_train_val(bags: list[Bag], cfg: TrainConfig, rng: np.random.Generator):
    """Stratified 80/20 bag split; every class keeps >= 1 training bag."""
    by_label: dict[int, list[int]] = {0: [], 1: []}
    for i, bag in enumerate(bags):
        by_label[int(bag.label)].append(i)
    if not by_label[0] or not by_label[1]:
        raise SingleClassTraining("training requires bags of both classes")
    train_idx: list[int] = []
    val_idx: list[int] = []
    for label in (0, 1):
        idx = np.array(by_label[label])
        rng.shuffle(idx)
        n_val = int(np.floor(len(idx) * cfg.val_fraction + 0.5))
        n_val = min(n_val, len(idx) - 1)  # keep at least one training bag
        val_idx.extend(idx[:n_val].tolist())
        train_idx.extend(idx[n_val:].tolist())
    return sorted(train_idx), sorted(val_idx)


def mean_loss(bags: list[Bag], params: MilParams) -> float:
    total = 0.0
    for bag in bags:
        p, _, _ = forward(bag, params)
        total += loss_wbce(p, bag.label, bag.weight)
    return total / max(len(bags), 1)


def train(
    bags: list[Bag],
    cfg: TrainConfig,
    dims: MilDims | None = None,
    val_bags: list[Bag] | None = None,
):
    """Train on one bag per step; return the min-validation-loss parameters.

    When ``val_bags`` is None an internal stratified 80/20 split is taken.
    The returned log has one entry per epoch: train loss, validation loss,
    and the learning rate at the epoch's last step.
    """
    if not bags:
        raise ValueError("no bags")
    rng = np.random.default_rng(cfg.seed)
    if val_bags is None:
        train_idx, val_idx = _split_train_val(bags, cfg, rng)
        train_bags = [bags[i] for i in train_idx]
        val_bags = [bags[i] for i in val_idx] or train_bags
    else:
        train_bags = list(bags)
        labels = {int(b.label) for b in train_bags}
        if labels != {0, 1}:
            raise SingleClassTraining("training requires bags of both classes")

    d = train_bags[0].instances.shape[1]
    dims = dims or MilDims(d=d)
    if dims.d != d:
        raise DimensionMismatch(f"dims.d={dims.d} but bag feature dim is {d}")
    params = init_params(dims, cfg.seed)
    state = AdamState.zeros_like(params)
    cycle_steps = cfg.cycle_steps or max(2, 2 * len(train_bags))

    best_params = params.copy()
    best_val = float("inf")
    log: list[dict] = []
    step = 0
    order = np.arange(len(train_bags))
    for epoch in range(cfg.epochs):
        rng.shuffle(order)
        epoch_loss = 0.0
        lr = cfg.lr_min
        for i in order:
            bag = train_bags[i]
            lr = cyclic_lr(step, cfg, cycle_steps)
            p, grads = _fused_step(bag, params)
            epoch_loss += loss_wbce(p, bag.label, bag.weight)
            adam_step(params, grads, state, lr, cfg)
            step += 1
        val_loss = mean_loss(val_bags, params)
        log.append(
            {
                "epoch": epoch,
                "train_loss": epoch_loss / len(train_bags),
                "val_loss": val_loss,
                "lr": lr,
            }
        )
        if val_loss < best_val:
            best_val = val_loss
            best_params = params.copy()
    return best_params, log


def bag_probability(params: MilParams, instances: np.ndarray) -> float:
    p, _, _ = forward(Bag(bag_id="_", instances=instances, label=0), params)
    return p


def instance_logits(bag: Bag, params: MilParams) -> np.ndarray:
    """Per-instance classifier logits u^T h_k + c (heat-map sign source)."""
    _, _, cache = forward(bag, params)
    return cache["H2"] @ params.u + params.c[0]


def save_checkpoint(
    params: MilParams, path: str | Path, cfg: TrainConfig | None = None, log=None
) -> None:
    dims = params.dims()
    doc = {
        "version": 1,
        "dims": {"d": dims.d, "h1": dims.h1, "h2": dims.h2, "L": dims.L},
        "params": {name: arr.tolist() for name, arr in params.blocks()},
        "train_config": (cfg.__dict__ if cfg else None),
        "log": log or [],
    }
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(doc))


def load_checkpoint(path: str | Path) -> MilParams:
    doc = json.loads(Path(path).read_text())
    if doc.get("version") != 1:
        raise ValueError(f"unsupported checkpoint version {doc.get('version')}")
    return MilParams(**{name: np.asarray(doc["params"][name], dtype=np.float64) for name in PARAM_BLOCKS})
