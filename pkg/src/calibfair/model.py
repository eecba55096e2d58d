"""ReLU multilayer perceptron with hand-written backpropagation and Adam."""
from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import losses
from .metrics import PredictionRecord

CHECKPOINT_MAGIC = "calibfair-mlp"
CHECKPOINT_VERSION = 1

LOSS_KINDS = ("cross_entropy", "focal", "group_wise_focal", "weighted_cross_entropy", "groupdro")


@dataclass(frozen=True, eq=False)
class MlpModel:
    """Layer ``l`` maps ``h -> relu(h @ weights[l].T + biases[l])``; the last layer is linear."""

    layer_dims: Tuple[int, ...]
    weights: Tuple[np.ndarray, ...]
    biases: Tuple[np.ndarray, ...]

    def __post_init__(self):
        dims = tuple(int(d) for d in self.layer_dims)
        if len(dims) < 2 or min(dims) < 1:
            raise ValueError("layer_dims needs at least two positive entries")
        if len(self.weights) != len(dims) - 1 or len(self.biases) != len(dims) - 1:
            raise ValueError("one weight matrix and bias per layer is required")
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (dims[l + 1], dims[l]) or b.shape != (dims[l + 1],):
                raise ValueError(f"layer {l} parameter shapes do not match layer_dims")
        object.__setattr__(self, "layer_dims", dims)

    def parameters(self) -> List[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    @classmethod
    def from_parameters(cls, layer_dims, params: Sequence[np.ndarray]) -> "MlpModel":
        return cls(tuple(layer_dims), tuple(params[0::2]), tuple(params[1::2]))

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(p)) for p in self.parameters())

    def __eq__(self, other):
        if not isinstance(other, MlpModel):
            return NotImplemented
        return self.layer_dims == other.layer_dims and all(
            np.array_equal(a, b) for a, b in zip(self.parameters(), other.parameters()))

    __hash__ = None


def init_mlp(layer_dims, seed: int) -> MlpModel:
    """He-normal weights, zero biases."""
    dims = tuple(int(d) for d in layer_dims)
    if len(dims) < 2 or min(dims) < 1:
        raise ValueError("layer_dims needs at least two positive entries")
    rng = np.random.default_rng(seed)
    weights = tuple(rng.standard_normal((dims[l + 1], dims[l])) * np.sqrt(2.0 / dims[l])
                    for l in range(len(dims) - 1))
    biases = tuple(np.zeros(dims[l + 1]) for l in range(len(dims) - 1))
    return MlpModel(dims, weights, biases)


def _forward_cache(model: MlpModel, features):
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.layer_dims[0]:
        raise ValueError(f"expected features of shape (B, {model.layer_dims[0]}), got {x.shape}")
    acts = [x]
    pre = []
    last = len(model.weights) - 1
    for l, (w, b) in enumerate(zip(model.weights, model.biases)):
        z = acts[-1] @ w.T + b
        pre.append(z)
        if l < last:
            acts.append(np.maximum(z, 0.0))
    return pre[-1], acts, pre


def forward(model: MlpModel, features) -> np.ndarray:
    return _forward_cache(model, features)[0]


def softmax(logits) -> np.ndarray:
    """Row-wise softmax with max subtraction; accepts a vector or a matrix."""
    z = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise ValueError("softmax input must be finite")
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass(frozen=True)
class LossSpec:
    """Training objective selector.

    ``groups``/``num_groups`` carry cluster or subgroup ids for the grouped
    kinds; ``q`` holds the (frozen) GroupDRO weights; ``gamma`` is the focal
    exponent and also the per-group loss exponent for GroupDRO (0 = cross-entropy).
    """

    kind: str
    gamma: float = 0.0
    weights: Optional[np.ndarray] = None
    groups: Optional[np.ndarray] = None
    num_groups: int = 0
    q: Optional[np.ndarray] = None
    eta: float = 0.1

    def validate(self, batch_size: int) -> None:
        if self.kind not in LOSS_KINDS:
            raise ValueError(f"unknown loss kind {self.kind!r}")
        if self.gamma < 0:
            raise ValueError("gamma must be non-negative")
        if self.kind == "weighted_cross_entropy":
            if self.weights is None or len(self.weights) != batch_size:
                raise ValueError("weighted_cross_entropy needs one weight per sample")
            if np.any(np.asarray(self.weights) < 0):
                raise ValueError("weights must be non-negative")
        if self.kind in ("group_wise_focal", "groupdro"):
            if self.groups is None or len(self.groups) != batch_size:
                raise ValueError(f"{self.kind} needs one group id per sample")
            if self.num_groups < 1:
                raise ValueError(f"{self.kind} needs num_groups >= 1")
            g = np.asarray(self.groups)
            if g.size and (g.min() < 0 or g.max() >= self.num_groups):
                raise ValueError(f"group ids must lie in [0, {self.num_groups - 1}]")
        if self.kind == "groupdro":
            q = np.asarray(self.q if self.q is not None else [], dtype=float)
            if q.shape != (self.num_groups,) or np.any(q < 0) or abs(q.sum() - 1.0) > 1e-9:
                raise ValueError("groupdro needs q on the simplex over num_groups")


def _loss_value(p_true, labels_spec: LossSpec) -> float:
    kind = labels_spec.kind
    if kind == "cross_entropy":
        return float(np.mean(losses.cross_entropy(p_true)))
    if kind == "focal":
        return float(np.mean(losses.focal(p_true, labels_spec.gamma)))
    if kind == "group_wise_focal":
        return losses.group_wise_focal(p_true, labels_spec.groups, labels_spec.num_groups, labels_spec.gamma)
    if kind == "weighted_cross_entropy":
        return losses.weighted_cross_entropy(p_true, labels_spec.weights)
    return losses.groupdro_objective(p_true, labels_spec.groups, labels_spec.q, labels_spec.gamma)


def _sample_weights(spec: LossSpec, n: int) -> np.ndarray:
    """d(total loss) / d(per-sample loss)."""
    if spec.kind in ("cross_entropy", "focal"):
        return np.full(n, 1.0 / n)
    if spec.kind == "weighted_cross_entropy":
        w = np.asarray(spec.weights, dtype=np.float64)
        total = w.sum()
        if not total > 0:
            raise ValueError("weights must not all be zero")
        return w / total
    ids = np.asarray(spec.groups, dtype=np.int64)
    counts = np.bincount(ids, minlength=spec.num_groups)
    present = int(np.count_nonzero(counts))
    if present == 0:
        raise ValueError("batch has no samples in any group")
    if spec.kind == "group_wise_focal":
        return 1.0 / (present * counts[ids])
    return np.asarray(spec.q, dtype=np.float64)[ids] / counts[ids]


def _dloss_scaled(p: np.ndarray, gamma: float) -> np.ndarray:
    """``p * d(focal)/dp`` with the probability clamp applied."""
    floor = losses.PROB_FLOOR
    pc = np.clip(p, floor, 1.0)
    one_minus = 1.0 - pc
    if gamma == 0:
        out = np.full_like(pc, -1.0)
    else:
        with np.errstate(divide="ignore", invalid="ignore"):
            first = gamma * one_minus ** (gamma - 1.0) * pc * np.log(pc)
        first = np.where(one_minus > 0, first, 0.0)
        out = first - one_minus ** gamma
    # the clamp is flat below the floor
    return np.where(p < floor, 0.0, out)


def loss_and_grad(model: MlpModel, features, labels, spec: LossSpec):
    """Batch loss and its exact gradient with respect to ``model.parameters()``."""
    y = np.asarray(labels, dtype=np.int64)
    if y.ndim != 1 or y.size == 0:
        raise ValueError("batch must be non-empty")
    spec.validate(y.size)
    logits, acts, pre = _forward_cache(model, features)
    if y.max() >= logits.shape[1] or y.min() < 0:
        raise ValueError("label out of range for model output")
    probs = softmax(logits)
    rows = np.arange(y.size)
    p_true = probs[rows, y]
    value = _loss_value(p_true, spec)

    gamma = spec.gamma if spec.kind in ("focal", "group_wise_focal", "groupdro") else 0.0
    coef = _sample_weights(spec, y.size) * _dloss_scaled(p_true, gamma)
    # dl/dz_j = p * l'(p) * (onehot_j - p_j)
    dz = -probs * coef[:, None]
    dz[rows, y] += coef

    grads = [None] * (2 * len(model.weights))
    for l in range(len(model.weights) - 1, -1, -1):
        grads[2 * l] = dz.T @ acts[l]
        grads[2 * l + 1] = dz.sum(axis=0)
        if l > 0:
            dz = (dz @ model.weights[l]) * (pre[l - 1] > 0)
    return value, grads


@dataclass
class AdamState:
    m: List[np.ndarray]
    v: List[np.ndarray]
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_model(cls, model: MlpModel, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8) -> "AdamState":
        params = model.parameters()
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params],
                   0, lr, beta1, beta2, eps)


def adam_step(model: MlpModel, grads, state: AdamState):
    """One bias-corrected Adam update; returns new model and new state."""
    params = model.parameters()
    if len(grads) != len(params) or any(g.shape != p.shape for g, p in zip(grads, params)):
        raise ValueError("gradient shapes do not match the model")
    if len(state.m) != len(params) or any(m.shape != p.shape for m, p in zip(state.m, params)):
        raise ValueError("Adam state shapes do not match the model")
    if not state.lr > 0:
        raise ValueError("learning rate must be positive")
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    new_params, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        new_params.append(p - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps))
        new_m.append(m)
        new_v.append(v)
    return (MlpModel.from_parameters(model.layer_dims, new_params),
            replace(state, m=new_m, v=new_v, t=t))


def predict_proba(model: MlpModel, features) -> np.ndarray:
    return softmax(forward(model, features))


def records_from_probs(probs: np.ndarray, labels) -> List[PredictionRecord]:
    # np.argmax returns the first maximum, i.e. the lowest class index on ties
    predicted = np.argmax(probs, axis=1)
    return [PredictionRecord(probs[i], int(predicted[i]), float(probs[i, predicted[i]]), int(labels[i]))
            for i in range(probs.shape[0])]


def predict(model: MlpModel, dataset, indices) -> List[PredictionRecord]:
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size == 0:
        return []
    if idx.min() < 0 or idx.max() >= dataset.n_samples:
        raise IndexError("sample index out of range")
    probs = predict_proba(model, dataset.features[idx])
    return records_from_probs(probs, dataset.labels[idx])


def save_checkpoint(model: MlpModel, path) -> None:
    """Text checkpoint; see README for the grammar."""
    lines = [f"{CHECKPOINT_MAGIC} v{CHECKPOINT_VERSION}",
             "layer_dims " + " ".join(str(d) for d in model.layer_dims)]
    for l, (w, b) in enumerate(zip(model.weights, model.biases)):
        lines.append(f"W{l} {w.shape[0]} {w.shape[1]}")
        lines.extend(" ".join(repr(float(x)) for x in row) for row in w)
        lines.append(f"b{l} {b.shape[0]}")
        lines.append(" ".join(repr(float(x)) for x in b))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_checkpoint(path) -> MlpModel:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    pos = 0

    def take():
        nonlocal pos
        if pos >= len(lines):
            raise ValueError(f"{path}: truncated checkpoint")
        pos += 1
        return lines[pos - 1].split()

    head = take()
    if head != [CHECKPOINT_MAGIC, f"v{CHECKPOINT_VERSION}"]:
        raise ValueError(f"{path}: not a {CHECKPOINT_MAGIC} v{CHECKPOINT_VERSION} checkpoint")
    dims_line = take()
    if not dims_line or dims_line[0] != "layer_dims":
        raise ValueError(f"{path}: expected layer_dims line")
    dims = tuple(int(d) for d in dims_line[1:])
    params = []
    for l in range(len(dims) - 1):
        tag = take()
        if tag != [f"W{l}", str(dims[l + 1]), str(dims[l])]:
            raise ValueError(f"{path}: bad weight header for layer {l}")
        params.append(np.array([[float(x) for x in take()] for _ in range(dims[l + 1])]))
        tag = take()
        if tag != [f"b{l}", str(dims[l + 1])]:
            raise ValueError(f"{path}: bad bias header for layer {l}")
        params.append(np.array([float(x) for x in take()]))
    return MlpModel.from_parameters(dims, params)
