"""Small dense-network toolkit with hand-written reverse-mode gradients.

Everything is batched along the leading axes and runs in float64. Only the pieces the
agent needs are here: dense layers, MLPs, masked softmax, Adam with linear annealing
and decoupled weight decay, and a checkpoint format.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import DataError


@dataclass
class ParamTensor:
    values: np.ndarray
    grad: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.grad is None:
            self.grad = np.zeros_like(self.values)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    def zero_grad(self) -> None:
        self.grad.fill(0.0)


ACTIVATIONS = ("tanh", "relu")
OUTPUTS = ("identity", "sigmoid", "softmax")


def sigmoid(z):
    # split by sign so exp never overflows
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def masked_softmax(logits, mask=None):
    """Softmax over the last axis restricted to ``mask``; masked entries get exactly 0."""
    logits = np.asarray(logits, dtype=np.float64)
    if mask is None:
        mask = np.ones(logits.shape, dtype=bool)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), logits.shape)
    if not np.all(mask.any(axis=-1)):
        raise ValueError("masked_softmax: every row needs at least one unmasked entry")
    z = np.where(mask, logits, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.where(mask, np.exp(z), 0.0)
    return e / e.sum(axis=-1, keepdims=True)


def masked_log_softmax(logits, mask):
    logits = np.asarray(logits, dtype=np.float64)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), logits.shape)
    z = np.where(mask, logits, -np.inf)
    m = z.max(axis=-1, keepdims=True)
    lse = m + np.log(np.where(mask, np.exp(z - m), 0.0).sum(axis=-1, keepdims=True))
    return np.where(mask, logits - lse, -np.inf)


def uniform_init(rng: np.random.Generator, n_in: int, n_out: int, gain: float) -> np.ndarray:
    # uniform with variance gain**2 / n_in, the scale an orthogonal init would give
    bound = gain * np.sqrt(3.0 / n_in)
    return rng.uniform(-bound, bound, size=(n_in, n_out))


class Dense:
    def __init__(self, n_in: int, n_out: int, rng: Optional[np.random.Generator] = None, gain: float = 1.0):
        if rng is None:
            w = np.zeros((n_in, n_out))
        else:
            w = uniform_init(rng, n_in, n_out, gain)
        self.W = ParamTensor(w)
        self.b = ParamTensor(np.zeros(n_out))
        self._x = None

    @property
    def params(self) -> list[ParamTensor]:
        return [self.W, self.b]

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.shape[-1] != self.W.shape[0]:
            raise ValueError(f"Dense expects last dim {self.W.shape[0]}, got {x.shape[-1]}")
        self._x = x
        return x @ self.W.values + self.b.values

    def backward(self, g: np.ndarray) -> np.ndarray:
        if self._x is None:
            raise RuntimeError("Dense.backward called before forward")
        n_in, n_out = self.W.shape
        self.W.grad += self._x.reshape(-1, n_in).T @ g.reshape(-1, n_out)
        self.b.grad += g.reshape(-1, n_out).sum(axis=0)
        return g @ self.W.values.T


def _act(name: str, z: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return np.tanh(z)
    if name == "relu":
        return np.maximum(z, 0.0)
    raise ValueError(f"unknown activation {name!r}")


def _act_grad(name: str, z: np.ndarray, a: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return 1.0 - a * a
    return (z > 0).astype(np.float64)


@dataclass(frozen=True)
class MLPSpec:
    widths: tuple[int, ...]
    activation: str = "tanh"
    output: str = "identity"
    hidden_gain: float = float(np.sqrt(2.0))
    output_gain: float = 1.0

    def __post_init__(self):
        if len(self.widths) < 2 or any(int(w) <= 0 for w in self.widths):
            raise ValueError("MLPSpec needs at least input and output widths, all positive")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")
        if self.output not in OUTPUTS:
            raise ValueError(f"output must be one of {OUTPUTS}")

    def to_dict(self) -> dict:
        return {
            "widths": list(self.widths),
            "activation": self.activation,
            "output": self.output,
            "hidden_gain": self.hidden_gain,
            "output_gain": self.output_gain,
        }


class MLP:
    """Dense stack; hidden layers use ``spec.activation``, the last layer ``spec.output``."""

    def __init__(self, spec: MLPSpec, rng: Optional[np.random.Generator] = None):
        self.spec = spec
        w = spec.widths
        n = len(w) - 1
        self.layers = [
            Dense(w[i], w[i + 1], rng, spec.output_gain if i == n - 1 else spec.hidden_gain) for i in range(n)
        ]
        self._cache = None
        self._out = None

    @property
    def params(self) -> list[ParamTensor]:
        return [p for layer in self.layers for p in layer.params]

    def logits(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        pre, post = [], []
        h = x
        for layer in self.layers[:-1]:
            z = layer.forward(h)
            h = _act(self.spec.activation, z)
            pre.append(z)
            post.append(h)
        out = self.layers[-1].forward(h)
        self._cache = (pre, post)
        return out

    def forward(self, x: np.ndarray, mask=None) -> np.ndarray:
        z = self.logits(x)
        if self.spec.output == "sigmoid":
            out = sigmoid(z)
        elif self.spec.output == "softmax":
            out = masked_softmax(z, mask)
        else:
            out = z
        self._out = (z, out, mask)
        return out

    def backward(self, g: np.ndarray, wrt_logits: bool = False) -> np.ndarray:
        """Accumulate parameter gradients; return the gradient w.r.t. the input.

        ``g`` is the gradient of the loss w.r.t. the network output, or w.r.t. the
        pre-activation logits when ``wrt_logits`` is set.
        """
        if self._cache is None:
            raise RuntimeError("MLP.backward called before forward")
        g = np.asarray(g, dtype=np.float64)
        if not wrt_logits and self.spec.output != "identity":
            z, out, mask = self._out
            if self.spec.output == "sigmoid":
                g = g * out * (1.0 - out)
            else:
                g = out * (g - (g * out).sum(axis=-1, keepdims=True))
        pre, post = self._cache
        g = self.layers[-1].backward(g)
        for layer, z, a in zip(reversed(self.layers[:-1]), reversed(pre), reversed(post)):
            g = layer.backward(g * _act_grad(self.spec.activation, z, a))
        return g


# --- optimisation ------------------------------------------------------------


@dataclass
class AdamConfig:
    lr: float = 2.5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    total_updates: int = 1

    def validate(self) -> None:
        if self.lr <= 0:
            raise ValueError("learning rate must be > 0")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("Adam betas must lie in (0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.total_updates <= 0:
            raise ValueError("total_updates must be positive")


@dataclass
class ParamGroup:
    params: list[ParamTensor]
    weight_decay: Optional[float] = None


class Adam:
    def __init__(self, groups: Sequence[ParamGroup] | Sequence[ParamTensor], cfg: AdamConfig):
        cfg.validate()
        groups = list(groups)
        if groups and isinstance(groups[0], ParamTensor):
            groups = [ParamGroup(list(groups))]
        self.groups = groups
        self.cfg = cfg
        self.m = [[np.zeros_like(p.values) for p in g.params] for g in groups]
        self.v = [[np.zeros_like(p.values) for p in g.params] for g in groups]
        self.t = 0

    def lr_at(self, update_index: int) -> float:
        frac = 1.0 - update_index / self.cfg.total_updates
        return self.cfg.lr * min(1.0, max(0.0, frac))

    def step(self, update_index: int) -> float:
        """One bias-corrected Adam update; returns the effective learning rate used."""
        c = self.cfg
        lr = self.lr_at(update_index)
        self.t += 1
        bc1 = 1.0 - c.beta1**self.t
        bc2 = 1.0 - c.beta2**self.t
        for gi, group in enumerate(self.groups):
            wd = c.weight_decay if group.weight_decay is None else group.weight_decay
            for pi, p in enumerate(group.params):
                m, v = self.m[gi][pi], self.v[gi][pi]
                m *= c.beta1
                m += (1.0 - c.beta1) * p.grad
                v *= c.beta2
                v += (1.0 - c.beta2) * p.grad * p.grad
                if wd:
                    p.values -= lr * wd * p.values
                p.values -= lr * (m / bc1) / (np.sqrt(v / bc2) + c.eps)
                p.zero_grad()
        return lr

    def state_dict(self) -> dict:
        return {"t": self.t, "m": self.m, "v": self.v}


def adam_step(params: Sequence[ParamTensor], cfg: AdamConfig, update_index: int, optimizer: Optional[Adam] = None) -> Adam:
    """Functional wrapper: apply one Adam step to ``params`` (creating state if needed)."""
    opt = optimizer if optimizer is not None else Adam(list(params), cfg)
    opt.step(update_index)
    return opt


def global_grad_norm(params: Iterable[ParamTensor]) -> float:
    return float(np.sqrt(sum(float((p.grad * p.grad).sum()) for p in params)))


def clip_grad_norm(params: Sequence[ParamTensor], max_norm: float) -> float:
    norm = global_grad_norm(params)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for p in params:
            p.grad *= scale
    return norm


# --- checkpoints -------------------------------------------------------------

CHECKPOINT_VERSION = "clipstop-ckpt-1"


def save_checkpoint(path: str | Path, params: dict[str, ParamTensor], meta: dict) -> None:
    arrays = {f"p:{k}": v.values for k, v in params.items()}
    meta = dict(meta, version=CHECKPOINT_VERSION, shapes={k: list(v.shape) for k, v in params.items()})
    arrays["__meta__"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    Path(path).write_bytes(buf.getvalue())


def read_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    try:
        with np.load(Path(path), allow_pickle=False) as z:
            meta = json.loads(bytes(z["__meta__"]).decode())
            arrays = {k[2:]: z[k].copy() for k in z.files if k.startswith("p:")}
    except (OSError, ValueError, KeyError) as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from None
    if meta.get("version") != CHECKPOINT_VERSION:
        raise DataError(f"checkpoint {path} has unsupported version {meta.get('version')!r}")
    return arrays, meta


def load_into(params: dict[str, ParamTensor], arrays: dict[str, np.ndarray]) -> None:
    """Copy checkpoint arrays into existing parameters, rejecting any shape mismatch."""
    missing = set(params) - set(arrays)
    extra = set(arrays) - set(params)
    if missing or extra:
        raise DataError(f"checkpoint parameters differ: missing {sorted(missing)}, unexpected {sorted(extra)}")
    for k, p in params.items():
        if arrays[k].shape != p.shape:
            raise DataError(f"checkpoint shape mismatch for {k}: {arrays[k].shape} vs {p.shape}")
        p.values[...] = arrays[k]
