"""Minimal feed-forward network with backpropagation and Adam.

One fixed topology serves every model in the package: a rectifier MLP trunk
with either a single linear output head or a dueling pair of heads (scalar
state value plus per-action advantages, combined by mean-centering). All
math is float64 numpy; gradients are exact and finite-difference tested.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .catalog import MISSING_SENTINEL, QUERIED_MISSING_SENTINEL

__all__ = [
    "MlpParams",
    "ForwardCache",
    "Adam",
    "init_mlp",
    "forward",
    "backward",
    "dueling_combine",
    "zeros_like",
    "clip_grad_norm",
    "save_checkpoint",
    "load_checkpoint",
    "FeatureScaler",
]

CHECKPOINT_MAGIC = b"APNN"
CHECKPOINT_VERSION = 1


@dataclass
class FeatureScaler:
    """Per-feature input conditioning with fixed sentinel encodings.

    Raw feature magnitudes span four orders (fractions of a percent up to
    hundreds), which stalls gradient descent; networks see scaled inputs
    instead. Measured values are standardized as (x - mean) / std and
    clipped to [-VALUE_CLIP, VALUE_CLIP]. The two non-value sentinels must
    NOT pass through that affine map: for a wide-range feature 1/std is
    tiny, so the raw gap between "never queried" (-1) and "queried, not
    measured" (-2) would shrink to invisibility, and either could land
    inside the feature's real value range. Instead each sentinel maps to
    its own constant outside the clipped value band, keeping all three
    input kinds linearly separated in every coordinate. The affine part is
    fitted once on training data and stored with the model, so the whole
    transform is a deterministic function of that data.
    """

    mean: np.ndarray
    std: np.ndarray

    VALUE_CLIP = 3.0
    UNQUERIED_CODE = -4.5
    ABSENT_CODE = -6.0

    @classmethod
    def fit(cls, values: np.ndarray) -> "FeatureScaler":
        """Fit mean/std per column over measured entries only.

        NaN and sentinel entries are excluded so that a mostly-missing
        feature still gets statistics describing its real values. Columns
        with nothing measured fall back to mean 0 / std 1.
        """
        values = np.asarray(values, dtype=np.float64)
        measured = (np.isfinite(values)
                    & (values != MISSING_SENTINEL)
                    & (values != QUERIED_MISSING_SENTINEL))
        count = measured.sum(axis=0)
        safe = np.where(measured, values, 0.0)
        mean = safe.sum(axis=0) / np.maximum(count, 1)
        var = np.where(measured, (values - mean) ** 2, 0.0).sum(axis=0) \
            / np.maximum(count, 1)
        std = np.sqrt(var)
        mean = np.where(count == 0, 0.0, mean)
        std = np.where((std == 0.0) | (count == 0), 1.0, std)
        return cls(mean, std)

    @classmethod
    def identity(cls, width: int) -> "FeatureScaler":
        return cls(np.zeros(width), np.ones(width))

    def apply(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        z = np.clip((x - self.mean) / self.std, -self.VALUE_CLIP,
                    self.VALUE_CLIP)
        z = np.where(x == MISSING_SENTINEL, self.UNQUERIED_CODE, z)
        return np.where(x == QUERIED_MISSING_SENTINEL, self.ABSENT_CODE, z)

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureScaler":
        return cls(np.asarray(d["mean"], dtype=np.float64),
                   np.asarray(d["std"], dtype=np.float64))


@dataclass
class MlpParams:
    """Trunk weights plus one linear head (plain) or two (dueling)."""

    trunk_weights: list[np.ndarray]
    trunk_biases: list[np.ndarray]
    head_weight: Optional[np.ndarray] = None
    head_bias: Optional[np.ndarray] = None
    value_weight: Optional[np.ndarray] = None
    value_bias: Optional[np.ndarray] = None
    adv_weight: Optional[np.ndarray] = None
    adv_bias: Optional[np.ndarray] = None

    @property
    def dueling(self) -> bool:
        return self.value_weight is not None

    @property
    def input_size(self) -> int:
        return self.trunk_weights[0].shape[0] if self.trunk_weights else \
            (self.adv_weight if self.dueling else self.head_weight).shape[0]

    @property
    def output_size(self) -> int:
        return (self.adv_weight if self.dueling else self.head_weight).shape[1]

    def arrays(self) -> list[np.ndarray]:
        """Canonical parameter order used by the optimizer and checkpoints."""
        out = []
        for w, b in zip(self.trunk_weights, self.trunk_biases):
            out.extend((w, b))
        if self.dueling:
            out.extend((self.value_weight, self.value_bias,
                        self.adv_weight, self.adv_bias))
        else:
            out.extend((self.head_weight, self.head_bias))
        return out

    def clone(self) -> "MlpParams":
        c = lambda a: None if a is None else a.copy()
        return MlpParams(
            [w.copy() for w in self.trunk_weights],
            [b.copy() for b in self.trunk_biases],
            c(self.head_weight), c(self.head_bias),
            c(self.value_weight), c(self.value_bias),
            c(self.adv_weight), c(self.adv_bias),
        )

    def copy_from(self, other: "MlpParams") -> None:
        for dst, src in zip(self.arrays(), other.arrays()):
            np.copyto(dst, src)

    def validate(self) -> None:
        size = self.input_size
        for w, b in zip(self.trunk_weights, self.trunk_biases):
            if w.shape[0] != size or b.shape != (w.shape[1],):
                raise ValueError("trunk layer shapes do not chain")
            size = w.shape[1]
        heads = ((self.value_weight, self.value_bias, 1),
                 (self.adv_weight, self.adv_bias, None)) if self.dueling \
            else ((self.head_weight, self.head_bias, None),)
        for w, b, out in heads:
            if w.shape[0] != size or b.shape != (w.shape[1],):
                raise ValueError("head shapes do not chain")
            if out is not None and w.shape[1] != out:
                raise ValueError("value head must be scalar")
        for a in self.arrays():
            if not np.all(np.isfinite(a)):
                raise ValueError("parameters contain non-finite values")


def _uniform_fan_in(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, shape)


def init_mlp(input_size: int, hidden: tuple[int, ...], output_size: int,
             dueling: bool, rng: np.random.Generator) -> MlpParams:
    """Seeded uniform fan-in initialization; draw order is fixed."""
    trunk_w, trunk_b = [], []
    size = input_size
    for width in hidden:
        trunk_w.append(_uniform_fan_in(rng, size, (size, width)))
        trunk_b.append(_uniform_fan_in(rng, size, (width,)))
        size = width
    params = MlpParams(trunk_w, trunk_b)
    if dueling:
        params.value_weight = _uniform_fan_in(rng, size, (size, 1))
        params.value_bias = _uniform_fan_in(rng, size, (1,))
        params.adv_weight = _uniform_fan_in(rng, size, (size, output_size))
        params.adv_bias = _uniform_fan_in(rng, size, (output_size,))
    else:
        params.head_weight = _uniform_fan_in(rng, size, (size, output_size))
        params.head_bias = _uniform_fan_in(rng, size, (output_size,))
    params.validate()
    return params


def dueling_combine(v, adv) -> np.ndarray:
    """Q = V + (A - mean A), broadcasting over a leading batch axis."""
    adv = np.asarray(adv, dtype=np.float64)
    if adv.shape[-1] == 0:
        raise ValueError("advantage vector must be non-empty")
    v = np.asarray(v, dtype=np.float64)
    if v.ndim == adv.ndim - 1:
        v = v[..., None]
    return v + adv - adv.mean(axis=-1, keepdims=True)


@dataclass
class ForwardCache:
    x: np.ndarray
    pre: list[np.ndarray] = field(default_factory=list)
    post: list[np.ndarray] = field(default_factory=list)
    adv: Optional[np.ndarray] = None


def forward(params: MlpParams, x: np.ndarray,
            cache: bool = False):
    """Compute Q-values for a single observation (m,) or a batch (B, m)."""
    single = x.ndim == 1
    h = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if h.shape[1] != params.input_size:
        raise ValueError(
            f"input width {h.shape[1]}, expected {params.input_size}")
    cc = ForwardCache(h) if cache else None
    for w, b in zip(params.trunk_weights, params.trunk_biases):
        pre = h @ w + b
        h = np.maximum(pre, 0.0)
        if cache:
            cc.pre.append(pre)
            cc.post.append(h)
    if params.dueling:
        v = h @ params.value_weight + params.value_bias
        adv = h @ params.adv_weight + params.adv_bias
        q = dueling_combine(v[:, 0], adv)
        if cache:
            cc.adv = adv
    else:
        q = h @ params.head_weight + params.head_bias
    if single:
        q = q[0]
    return (q, cc) if cache else q


def zeros_like(params: MlpParams) -> MlpParams:
    z = lambda a: None if a is None else np.zeros_like(a)
    return MlpParams(
        [np.zeros_like(w) for w in params.trunk_weights],
        [np.zeros_like(b) for b in params.trunk_biases],
        z(params.head_weight), z(params.head_bias),
        z(params.value_weight), z(params.value_bias),
        z(params.adv_weight), z(params.adv_bias),
    )


def clip_grad_norm(grads: MlpParams, max_norm: float) -> float:
    """Scale all gradients in place so their global L2 norm is <= max_norm.

    Returns the norm before clipping.
    """
    total = 0.0
    for g in grads.arrays():
        total += float(np.sum(g * g))
    norm = total ** 0.5
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads.arrays():
            g *= scale
    return norm


def backward(params: MlpParams, cache: ForwardCache,
             dq: np.ndarray) -> MlpParams:
    """Exact gradients of sum(loss) given dL/dQ for the cached batch."""
    dq = np.atleast_2d(np.asarray(dq, dtype=np.float64))
    grads = zeros_like(params)
    h = cache.post[-1] if cache.post else cache.x
    if params.dueling:
        dadv = dq - dq.mean(axis=1, keepdims=True)
        dv = dq.sum(axis=1, keepdims=True)
        grads.adv_weight[...] = h.T @ dadv
        grads.adv_bias[...] = dadv.sum(axis=0)
        grads.value_weight[...] = h.T @ dv
        grads.value_bias[...] = dv.sum(axis=0)
        dh = dadv @ params.adv_weight.T + dv @ params.value_weight.T
    else:
        grads.head_weight[...] = h.T @ dq
        grads.head_bias[...] = dq.sum(axis=0)
        dh = dq @ params.head_weight.T
    for i in range(len(params.trunk_weights) - 1, -1, -1):
        dpre = dh * (cache.pre[i] > 0.0)
        below = cache.post[i - 1] if i > 0 else cache.x
        grads.trunk_weights[i][...] = below.T @ dpre
        grads.trunk_biases[i][...] = dpre.sum(axis=0)
        dh = dpre @ params.trunk_weights[i].T
    return grads


class Adam:
    """Adaptive-moment optimizer over one MlpParams instance."""

    def __init__(self, params: MlpParams, learning_rate: float = 1e-4,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        self.learning_rate = learning_rate
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step_count = 0
        self.m = [np.zeros_like(a) for a in params.arrays()]
        self.v = [np.zeros_like(a) for a in params.arrays()]

    def step(self, params: MlpParams, grads: MlpParams) -> None:
        self.step_count += 1
        t = self.step_count
        lr = self.learning_rate * (np.sqrt(1.0 - self.beta2 ** t)
                                   / (1.0 - self.beta1 ** t))
        for target, grad, m, v in zip(params.arrays(), grads.arrays(),
                                      self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * grad
            v *= self.beta2
            v += (1.0 - self.beta2) * np.square(grad)
            target -= lr * m / (np.sqrt(v) + self.eps)

    def state_arrays(self) -> list[np.ndarray]:
        return [*self.m, *self.v]


def save_checkpoint(path, params: MlpParams, header_extra: Optional[dict] = None,
                    optimizer: Optional[Adam] = None) -> None:
    """Versioned binary dump: magic, JSON header, raw little-endian arrays.

    Arrays are written in `MlpParams.arrays()` order (then optimizer moment
    arrays when present), so a load followed by a save is byte-identical.
    """
    arrays = params.arrays()
    header = {
        "version": CHECKPOINT_VERSION,
        "dueling": params.dueling,
        "trunk_layers": len(params.trunk_weights),
        "shapes": [list(a.shape) for a in arrays],
        "extra": header_extra or {},
    }
    if optimizer is not None:
        header["optimizer"] = {
            "learning_rate": optimizer.learning_rate,
            "beta1": optimizer.beta1,
            "beta2": optimizer.beta2,
            "eps": optimizer.eps,
            "step_count": optimizer.step_count,
        }
        arrays = arrays + optimizer.state_arrays()
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        for a in arrays:
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[MlpParams, dict, Optional[Adam]]:
    """Returns (params, extra header dict, optimizer or None)."""
    with open(path, "rb") as fh:
        data = fh.read()
    buf = io.BytesIO(data)
    if buf.read(4) != CHECKPOINT_MAGIC:
        raise ValueError("not a network checkpoint file")
    version, hlen = struct.unpack("<II", buf.read(8))
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    header = json.loads(buf.read(hlen).decode())
    arrays = []
    for shape in header["shapes"]:
        count = int(np.prod(shape)) if shape else 1
        raw = buf.read(count * 8)
        arrays.append(np.frombuffer(raw, dtype="<f8").reshape(shape).copy())
    n_trunk = header["trunk_layers"]
    trunk_w = [arrays[2 * i] for i in range(n_trunk)]
    trunk_b = [arrays[2 * i + 1] for i in range(n_trunk)]
    rest = arrays[2 * n_trunk:]
    if header["dueling"]:
        params = MlpParams(trunk_w, trunk_b, value_weight=rest[0],
                           value_bias=rest[1], adv_weight=rest[2],
                           adv_bias=rest[3])
    else:
        params = MlpParams(trunk_w, trunk_b, head_weight=rest[0],
                           head_bias=rest[1])
    params.validate()
    optimizer = None
    if "optimizer" in header:
        o = header["optimizer"]
        optimizer = Adam(params, o["learning_rate"], o["beta1"], o["beta2"],
                         o["eps"])
        optimizer.step_count = o["step_count"]
        n = len(params.arrays())
        moments = []
        for _ in range(2 * n):
            count = buf.getbuffer().nbytes - buf.tell()
            if count <= 0:
                raise ValueError("checkpoint truncated: missing moments")
            # Moment arrays mirror parameter shapes in order m..., v...
            shape = params.arrays()[len(moments) % n].shape
            size = int(np.prod(shape)) if shape else 1
            raw = buf.read(size * 8)
            moments.append(np.frombuffer(raw, dtype="<f8").reshape(shape).copy())
        optimizer.m = moments[:n]
        optimizer.v = moments[n:]
    return params, header.get("extra", {}), optimizer
