"""Attention pooler, critic, actor and predictor heads, and how gradients reach them."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import DataError
from .nn import (
    MLP,
    Dense,
    MLPSpec,
    ParamGroup,
    ParamTensor,
    load_into,
    masked_log_softmax,
    masked_softmax,
    read_checkpoint,
    save_checkpoint,
)

MODES = ("full", "AB1", "AB2")
N_ACTIONS = 4
STOP = 3
ACTION_NAMES = ("A4C", "PLAX", "PSAX", "Stop")


def softmax_pool(x: np.ndarray, w: np.ndarray, valid: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Pool slots ``x`` with per-dimension softmax weights over the slot axis.

    ``x`` and ``w`` are ``(..., slots, D)``; slots with ``valid`` false get weight
    ``-inf`` and so contribute nothing. Returns ``(h_bar, beta)``.
    """
    x = np.asarray(x, dtype=np.float64)
    valid = np.asarray(valid, dtype=bool)
    if not np.all(valid.any(axis=-1)):
        raise ValueError("pooling: every bag needs at least one valid slot")
    vmask = valid[..., None]
    logits = np.where(vmask, w, -np.inf)
    m = logits.max(axis=-2, keepdims=True)
    e = np.where(vmask, np.exp(logits - m), 0.0)
    beta = e / e.sum(axis=-2, keepdims=True)
    h_bar = (beta * np.where(vmask, x, 0.0)).sum(axis=-2)
    return h_bar, beta


class AttentionPooler:
    """Per-dimension softmax attention over the clip slots of a padded bag.

    A shared dense+tanh layer maps every slot embedding ``h_t`` to a weight vector
    ``w_t``; padded slots get ``-inf``. ``beta`` is the softmax of ``w`` over slots,
    taken separately for every embedding dimension, and the pooled state is
    ``sum_t beta_t * h_t`` (element-wise).
    """

    def __init__(self, dim: int, rng: Optional[np.random.Generator] = None, gain: float = 1.0):
        self.dense = Dense(dim, dim, rng, gain)
        self._cache = None

    @property
    def params(self) -> list[ParamTensor]:
        return self.dense.params

    def forward(self, x: np.ndarray, valid: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        x = np.asarray(x, dtype=np.float64)
        valid = np.asarray(valid, dtype=bool)
        if not np.all(valid.any(axis=-1)):
            raise ValueError("attention_pool: every bag needs at least one valid slot")
        vmask = valid[..., None]
        x = np.where(vmask, x, 0.0)
        w = np.tanh(self.dense.forward(x))
        h_bar, beta = softmax_pool(x, w, valid)
        self._cache = (x, w, beta, vmask)
        return h_bar, beta

    def backward(self, g_h: np.ndarray) -> np.ndarray:
        if self._cache is None:
            raise RuntimeError("AttentionPooler.backward called before forward")
        x, w, beta, vmask = self._cache
        g_h = g_h[..., None, :]
        g_beta = g_h * x
        g_w = beta * (g_beta - (beta * g_beta).sum(axis=-2, keepdims=True))
        g_a = np.where(vmask, g_w * (1.0 - w * w), 0.0)
        g_x = beta * g_h + self.dense.backward(g_a)
        return np.where(vmask, g_x, 0.0)


class MeanPooler:
    """Masked average of the valid slots (the no-attention ablation)."""

    params: list[ParamTensor] = []

    def forward(self, x: np.ndarray, valid: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        x = np.asarray(x, dtype=np.float64)
        valid = np.asarray(valid, dtype=bool)
        if not np.all(valid.any(axis=-1)):
            raise ValueError("mean pooling: every bag needs at least one valid slot")
        vmask = valid[..., None]
        n = valid.sum(axis=-1)[..., None, None]
        beta = np.broadcast_to(np.where(vmask, 1.0 / n, 0.0), x.shape).copy()
        h_bar = (beta * np.where(vmask, x, 0.0)).sum(axis=-2)
        self._beta = beta
        return h_bar, beta

    def backward(self, g_h: np.ndarray) -> np.ndarray:
        return self._beta * g_h[..., None, :]


@dataclass
class ActionDistribution:
    probs: np.ndarray
    log_probs: np.ndarray
    mask: np.ndarray

    @property
    def entropy(self) -> np.ndarray:
        plogp = np.where(self.probs > 0, self.probs * np.where(self.mask, self.log_probs, 0.0), 0.0)
        return -plogp.sum(axis=-1)

    def log_prob(self, actions: np.ndarray) -> np.ndarray:
        actions = np.asarray(actions)
        return np.take_along_axis(self.log_probs, actions[..., None], axis=-1)[..., 0]

    def sample(self, rng: np.random.Generator) -> int:
        if self.probs.ndim != 1:
            raise ValueError("sample() draws for a single state; use per-env generators for batches")
        cdf = np.cumsum(self.probs)
        a = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
        # guard against float spill onto a trailing masked entry
        while a >= len(self.probs) or not self.mask[a]:
            a -= 1
        return a


def action_distribution(logits: np.ndarray, mask: np.ndarray) -> ActionDistribution:
    mask = np.asarray(mask, dtype=bool)
    return ActionDistribution(
        probs=masked_softmax(logits, mask), log_probs=masked_log_softmax(logits, mask), mask=mask
    )


@dataclass
class Forward:
    h_bar: np.ndarray
    beta: np.ndarray
    value: np.ndarray
    dist: ActionDistribution
    y_hat: Optional[np.ndarray]


class AgentNets:
    """The learned parts of the agent for one of the modes ``full``, ``AB1`` or ``AB2``.

    ``full`` pools embeddings with attention. ``AB2`` replaces attention with a mean.
    ``AB1`` pools 4-d clip features (score plus one-hot view) with attention and has no
    predictor head; its study score is the mean clip score.
    """

    def __init__(
        self,
        feature_dim: int,
        mode: str = "full",
        hidden: int = 128,
        activation: str = "tanh",
        rng: Optional[np.random.Generator] = None,
        policy_through_pooler: bool = False,
    ):
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        self.mode = mode
        self.feature_dim = feature_dim
        self.hidden = hidden
        self.activation = activation
        self.policy_through_pooler = policy_through_pooler
        F, H = feature_dim, hidden
        self.pooler = MeanPooler() if mode == "AB2" else AttentionPooler(F, rng)
        self.critic = MLP(MLPSpec((F, H, H, H, 1), activation, "identity"), rng)
        self.actor = MLP(MLPSpec((F, H, H, N_ACTIONS), activation, "softmax", output_gain=0.01), rng)
        self.predictor = None if mode == "AB1" else MLP(MLPSpec((F, H, H, 1), activation, "sigmoid"), rng)

    # -- parameters -------------------------------------------------------

    def named_params(self) -> dict[str, ParamTensor]:
        out = {}
        parts = [("pooler", getattr(self.pooler, "dense", None)), ("critic", self.critic), ("actor", self.actor)]
        if self.predictor is not None:
            parts.append(("predictor", self.predictor))
        for name, mod in parts:
            if mod is None:
                continue
            layers = mod.layers if isinstance(mod, MLP) else [mod]
            for i, layer in enumerate(layers):
                out[f"{name}.{i}.W"] = layer.W
                out[f"{name}.{i}.b"] = layer.b
        return out

    @property
    def params(self) -> list[ParamTensor]:
        return list(self.named_params().values())

    def param_groups(self, critic_weight_decay: float) -> list[ParamGroup]:
        """Actor and predictor undecayed; critic and pooler share the decayed group."""
        groups = [
            ParamGroup(self.actor.params, 0.0),
            ParamGroup(list(self.pooler.params) + self.critic.params, critic_weight_decay),
        ]
        if self.predictor is not None:
            groups.append(ParamGroup(self.predictor.params, 0.0))
        return groups

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    # -- forward passes ---------------------------------------------------

    def pool(self, x: np.ndarray, valid: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return self.pooler.forward(x, valid)

    def value(self, h_bar: np.ndarray) -> np.ndarray:
        return self.critic.forward(h_bar)[..., 0]

    def policy(self, h_bar: np.ndarray, mask: np.ndarray) -> ActionDistribution:
        return action_distribution(self.actor.logits(h_bar), mask)

    def predict_from_pooled(self, h_bar: np.ndarray) -> np.ndarray:
        if self.predictor is None:
            raise ValueError("AB1 agents have no predictor head")
        return self.predictor.forward(h_bar)[..., 0]

    def forward(self, x: np.ndarray, valid: np.ndarray, mask: np.ndarray) -> Forward:
        h_bar, beta = self.pool(x, valid)
        dist = self.policy(h_bar, mask)
        value = self.value(h_bar)
        y_hat = None if self.predictor is None else self.predict_from_pooled(h_bar)
        return Forward(h_bar, beta, value, dist, y_hat)

    def backward(
        self,
        g_value: Optional[np.ndarray] = None,
        g_logits: Optional[np.ndarray] = None,
        g_pred_logit: Optional[np.ndarray] = None,
    ) -> np.ndarray:
        """Route loss gradients after :meth:`forward`.

        Value and classification gradients reach the pooler; policy gradients stop at
        the actor input unless ``policy_through_pooler`` is set. Returns the gradient
        w.r.t. the pooler input.
        """
        g_h = None
        if g_value is not None:
            g_h = self.critic.backward(np.asarray(g_value)[..., None])
        if g_pred_logit is not None and self.predictor is not None:
            g = self.predictor.backward(np.asarray(g_pred_logit)[..., None], wrt_logits=True)
            g_h = g if g_h is None else g_h + g
        if g_logits is not None:
            g = self.actor.backward(g_logits, wrt_logits=True)
            if self.policy_through_pooler:
                g_h = g if g_h is None else g_h + g
        if g_h is None:
            return None
        return self.pooler.backward(g_h)

    # -- persistence ------------------------------------------------------

    def config(self) -> dict:
        return {
            "feature_dim": self.feature_dim,
            "mode": self.mode,
            "hidden": self.hidden,
            "activation": self.activation,
            "policy_through_pooler": self.policy_through_pooler,
            "specs": {
                "critic": self.critic.spec.to_dict(),
                "actor": self.actor.spec.to_dict(),
                "predictor": None if self.predictor is None else self.predictor.spec.to_dict(),
            },
        }

    def save(self, path: str | Path, extra: Optional[dict] = None, arrays: Optional[dict] = None) -> None:
        params = dict(self.named_params())
        for k, v in (arrays or {}).items():
            params[f"extra.{k}"] = ParamTensor(np.asarray(v, dtype=np.float64))
        save_checkpoint(path, params, {"nets": self.config(), **(extra or {})})

    @classmethod
    def load(cls, path: str | Path, expect_mode: Optional[str] = None) -> tuple["AgentNets", dict, dict]:
        arrays, meta = read_checkpoint(path)
        cfg = meta["nets"]
        if expect_mode is not None and cfg["mode"] != expect_mode:
            raise DataError(f"checkpoint {path} was trained in mode {cfg['mode']}, expected {expect_mode}")
        nets = cls(
            cfg["feature_dim"],
            mode=cfg["mode"],
            hidden=cfg["hidden"],
            activation=cfg["activation"],
            policy_through_pooler=cfg["policy_through_pooler"],
        )
        extras = {k[len("extra."):]: arrays.pop(k) for k in list(arrays) if k.startswith("extra.")}
        load_into(nets.named_params(), arrays)
        return nets, meta, extras


# Functional entry points mirroring the individual heads.


def attention_pool(x: np.ndarray, valid: np.ndarray, pooler=None, weights: Optional[np.ndarray] = None) -> tuple[np.ndarray, np.ndarray]:
    """Pool with a pooler's learned weights, or with explicit ``weights`` of the same shape as ``x``."""
    if weights is not None:
        return softmax_pool(x, weights, valid)
    return pooler.forward(x, valid)


def actor_forward(h_bar: np.ndarray, mask: np.ndarray, actor: MLP) -> ActionDistribution:
    return action_distribution(actor.logits(h_bar), mask)


def critic_forward(x: np.ndarray, valid: np.ndarray, nets: AgentNets) -> tuple[np.ndarray, np.ndarray]:
    """Value of a padded bag plus the pooled state shared with the other heads."""
    h_bar, _ = nets.pool(x, valid)
    return nets.value(h_bar), h_bar


def predictor_forward(h_bar: np.ndarray, predictor: MLP) -> np.ndarray:
    return predictor.forward(h_bar)[..., 0]
