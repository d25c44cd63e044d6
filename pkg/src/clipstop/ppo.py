"""PPO training: rollouts, GAE, the clipped surrogate and the joint update."""

from __future__ import annotations

import csv
import logging
import pickle
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .data import N_MAX, DatasetManifest
from .env import GaussianInit, RewardConfig, VectorEnv, encode_manifest, pad_slots, scorer_for
from .errors import DataError
from .nets import N_ACTIONS, AgentNets
from .nn import Adam, AdamConfig, clip_grad_norm

log = logging.getLogger(__name__)

BCE_CLAMP = 1e-7
LOG_COLUMNS = [
    "iteration",
    "timesteps",
    "mean_episode_reward",
    "mean_episode_length",
    "policy_loss",
    "value_loss",
    "entropy",
    "classification_loss",
    "clip_fraction",
    "lr",
]


@dataclass
class PPOConfig:
    total_timesteps: int = 500_000
    n_envs: int = 8
    rollout_length: int = 128
    epochs: int = 4
    minibatches: int = 4
    minibatch_size: int = 128
    clip_eps: float = 0.2
    gamma: float = 0.99
    gae_lambda: float = 0.95
    value_coef: float = 0.5
    entropy_coef: float = 0.01
    lr: float = 2.5e-4
    adam_eps: float = 1e-5
    critic_weight_decay: float = 1e-4
    max_grad_norm: float = 0.5
    hidden: int = 128
    activation: str = "tanh"
    norm_advantages: bool = True
    policy_through_pooler: bool = False
    drop_s0: bool = False
    sequential_clips: bool = False
    n_max: int = N_MAX

    @property
    def batch_size(self) -> int:
        return self.n_envs * self.rollout_length

    @property
    def n_iterations(self) -> int:
        return max(1, self.total_timesteps // self.batch_size)

    def validate(self) -> None:
        if self.n_envs < 1 or self.rollout_length < 1:
            raise ValueError("n_envs and rollout_length must be >= 1")
        if self.minibatches * self.minibatch_size > self.batch_size:
            raise ValueError(
                f"minibatches*minibatch_size ({self.minibatches * self.minibatch_size}) exceeds the "
                f"rollout size n_envs*rollout_length ({self.batch_size})"
            )
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must lie in (0, 1]")
        for name in ("clip_eps", "gae_lambda", "value_coef", "entropy_coef", "critic_weight_decay", "max_grad_norm"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")


# --- losses ------------------------------------------------------------------


def compute_gae(rewards, values, dones, last_value, gamma: float, lam: float):
    """Advantages and returns by the backward GAE recursion.

    Arrays are indexed by time along axis 0 (extra axes are independent streams).
    ``dones[t]`` marks that the transition at ``t`` ended its episode, so nothing is
    bootstrapped across it. ``last_value`` is V of the state after the final step.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=np.float64)
    if rewards.shape[0] == 0:
        raise ValueError("compute_gae on an empty buffer")
    T = rewards.shape[0]
    adv = np.zeros_like(rewards)
    next_value = np.asarray(last_value, dtype=np.float64)
    running = np.zeros_like(rewards[0])
    for t in range(T - 1, -1, -1):
        nonterminal = 1.0 - dones[t]
        delta = rewards[t] + gamma * next_value * nonterminal - values[t]
        running = delta + gamma * lam * nonterminal * running
        adv[t] = running
        next_value = values[t]
    return adv, adv + values


def clipped_surrogate(ratio, adv, eps: float) -> np.ndarray:
    ratio = np.asarray(ratio, dtype=np.float64)
    adv = np.asarray(adv, dtype=np.float64)
    return np.minimum(ratio * adv, np.clip(ratio, 1.0 - eps, 1.0 + eps) * adv)


def policy_loss(logp_new, logp_old, adv, eps: float):
    """Negated clipped objective; returns (loss, d loss / d logp_new, clip fraction)."""
    logp_new = np.asarray(logp_new, dtype=np.float64)
    ratio = np.exp(logp_new - np.asarray(logp_old))
    adv = np.asarray(adv, dtype=np.float64)
    unclipped = ratio * adv
    clipped = np.clip(ratio, 1.0 - eps, 1.0 + eps) * adv
    loss = -np.minimum(unclipped, clipped).mean()
    active = unclipped <= clipped
    grad = np.where(active, -adv * ratio, 0.0) / ratio.size
    clip_frac = float((np.abs(ratio - 1.0) > eps).mean())
    return float(loss), grad, clip_frac


def value_loss(values, returns):
    """Mean squared error and its gradient w.r.t. ``values``."""
    values = np.asarray(values, dtype=np.float64)
    diff = values - np.asarray(returns, dtype=np.float64)
    return float((diff * diff).mean()), 2.0 * diff / diff.size


def classification_loss(y_hat, labels):
    """Mean BCE with clamped probabilities; gradient is w.r.t. the predictor logit."""
    y_hat = np.asarray(y_hat, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    p = np.clip(y_hat, BCE_CLAMP, 1.0 - BCE_CLAMP)
    loss = -(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)).mean()
    inside = (y_hat > BCE_CLAMP) & (y_hat < 1.0 - BCE_CLAMP)
    grad = np.where(inside, y_hat - y, 0.0) / y.size
    return float(loss), grad


def entropy_grad(probs: np.ndarray, log_probs: np.ndarray, mask: np.ndarray, entropy: np.ndarray) -> np.ndarray:
    """d entropy / d logits for a masked softmax."""
    lp = np.where(mask, log_probs, 0.0)
    return np.where(mask, -probs * (lp + entropy[..., None]), 0.0)


# --- rollout storage ---------------------------------------------------------


@dataclass
class RolloutBuffer:
    T: int
    E: int
    slots: list = field(default_factory=list)
    actions: np.ndarray = None
    masks: np.ndarray = None
    log_probs: np.ndarray = None
    values: np.ndarray = None
    rewards: np.ndarray = None
    dones: np.ndarray = None
    labels: np.ndarray = None
    y_hat_terminal: np.ndarray = None
    advantages: Optional[np.ndarray] = None
    returns: Optional[np.ndarray] = None

    def __post_init__(self):
        T, E = self.T, self.E
        self.slots = [[None] * E for _ in range(T)]
        self.actions = np.zeros((T, E), dtype=np.int64)
        self.masks = np.zeros((T, E, N_ACTIONS), dtype=bool)
        self.log_probs = np.zeros((T, E))
        self.values = np.zeros((T, E))
        self.rewards = np.zeros((T, E))
        self.dones = np.zeros((T, E), dtype=bool)
        self.labels = np.zeros((T, E))
        self.y_hat_terminal = np.full((T, E), np.nan)

    def __len__(self) -> int:
        return self.T * self.E

    def finish(self, last_values: np.ndarray, gamma: float, lam: float) -> None:
        self.advantages, self.returns = compute_gae(self.rewards, self.values, self.dones, last_values, gamma, lam)

    def flat(self, name: str) -> np.ndarray:
        arr = getattr(self, name)
        return arr.reshape(self.T * self.E, *arr.shape[2:])

    def flat_slots(self) -> list:
        return [s for row in self.slots for s in row]


# --- trainer -----------------------------------------------------------------


class Trainer:
    """Holds everything needed to run (and resume) a PPO training job."""

    def __init__(
        self,
        manifest: DatasetManifest,
        cfg: PPOConfig,
        seed: int,
        mode: str = "full",
        reward: Optional[RewardConfig] = None,
    ):
        cfg.validate()
        p0, p1 = manifest.class_prior
        if p0 == 0 or p1 == 0:
            raise DataError("training needs at least one study of each class (class weights undefined)")
        self.cfg = cfg
        self.seed = int(seed)
        self.mode = mode
        base = reward or RewardConfig()
        self.reward = RewardConfig(base.lambda_cost, base.clip_cost, (p0, p1))
        self.studies = encode_manifest(manifest, mode, cfg.n_max)
        self.init = GaussianInit.fit(self.studies)
        feature_dim = self.studies[0].feats.shape[1]
        self.nets = AgentNets(
            feature_dim,
            mode=mode,
            hidden=cfg.hidden,
            activation=cfg.activation,
            rng=np.random.default_rng([self.seed, 1]),
            policy_through_pooler=cfg.policy_through_pooler,
        )
        self.optimizer = Adam(
            self.nets.param_groups(cfg.critic_weight_decay),
            AdamConfig(lr=cfg.lr, eps=cfg.adam_eps, total_updates=cfg.n_iterations),
        )
        self.venv = VectorEnv(
            self.studies,
            cfg.n_envs,
            self.init,
            self.reward,
            scorer_for(self.nets),
            seed=[self.seed, 2],
            n_max=cfg.n_max,
            sequential=cfg.sequential_clips,
            drop_s0=cfg.drop_s0,
        )
        self.batch_rng = np.random.default_rng([self.seed, 3])
        self.iteration = 0
        self.timesteps = 0
        self.log: list[dict] = []
        self._started = False

    @property
    def done(self) -> bool:
        return self.iteration >= self.cfg.n_iterations

    # -- collection ---------------------------------------------------------

    def collect(self) -> tuple[RolloutBuffer, list[dict]]:
        cfg = self.cfg
        if not self._started:
            self.venv.reset()
            self._started = True
        buf = RolloutBuffer(cfg.rollout_length, cfg.n_envs)
        finished = []
        for t in range(cfg.rollout_length):
            pairs = [ep.slots() for ep in self.venv.episodes]
            X, V = pad_slots(pairs)
            M = self.venv.masks()
            h_bar, _ = self.nets.pool(X, V)
            values = self.nets.value(h_bar)
            dist = self.nets.policy(h_bar, M)
            actions = self.venv.sample_actions(dist.probs)
            buf.slots[t] = pairs
            buf.actions[t] = actions
            buf.masks[t] = M
            buf.log_probs[t] = dist.log_prob(actions)
            buf.values[t] = values
            buf.labels[t] = [ep.study.label for ep in self.venv.episodes]
            rewards, dones, infos = self.venv.step(actions)
            buf.rewards[t] = rewards
            buf.dones[t] = dones
            for e, info in enumerate(infos):
                if "episode_return" in info:
                    buf.y_hat_terminal[t, e] = info["y_hat"]
                    finished.append(info)
        X, V = pad_slots([ep.slots() for ep in self.venv.episodes])
        h_bar, _ = self.nets.pool(X, V)
        buf.finish(self.nets.value(h_bar), cfg.gamma, cfg.gae_lambda)
        self.timesteps += len(buf)
        return buf, finished

    # -- optimisation -------------------------------------------------------

    def minibatch_loss(self, buf_flat: dict, idx: np.ndarray) -> dict:
        """Forward + backward on one minibatch; leaves gradients in the parameters."""
        cfg = self.cfg
        nets = self.nets
        X, V = pad_slots([buf_flat["slots"][i] for i in idx])
        M = buf_flat["masks"][idx]
        actions = buf_flat["actions"][idx]
        adv = buf_flat["advantages"][idx]
        if cfg.norm_advantages:
            adv = (adv - adv.mean()) / max(adv.std(), 1e-8)
        fw = nets.forward(X, V, M)
        logp_new = fw.dist.log_prob(actions)
        pl, g_logp, clip_frac = policy_loss(logp_new, buf_flat["log_probs"][idx], adv, cfg.clip_eps)
        onehot = np.eye(N_ACTIONS)[actions]
        g_logits = g_logp[:, None] * (onehot - fw.dist.probs)
        ent = fw.dist.entropy
        g_logits -= cfg.entropy_coef / len(idx) * entropy_grad(fw.dist.probs, fw.dist.log_probs, M, ent)
        vl, g_v = value_loss(fw.value, buf_flat["returns"][idx])
        g_pred = None
        cl = 0.0
        if fw.y_hat is not None:
            cl, g_pred = classification_loss(fw.y_hat, buf_flat["labels"][idx])
        nets.backward(g_value=cfg.value_coef * g_v, g_logits=g_logits, g_pred_logit=g_pred)
        total = pl - cfg.entropy_coef * float(ent.mean()) + cfg.value_coef * vl + cl
        return {
            "policy_loss": pl,
            "value_loss": vl,
            "entropy": float(ent.mean()),
            "classification_loss": cl,
            "clip_fraction": clip_frac,
            "loss": total,
        }

    def update(self, buf: RolloutBuffer) -> dict:
        cfg = self.cfg
        flat = {
            "slots": buf.flat_slots(),
            "masks": buf.flat("masks"),
            "actions": buf.flat("actions"),
            "log_probs": buf.flat("log_probs"),
            "advantages": buf.flat("advantages"),
            "returns": buf.flat("returns"),
            "labels": buf.flat("labels"),
        }
        n = len(buf)
        stats: dict[str, list] = {}
        lr = self.optimizer.lr_at(self.iteration)
        params = self.nets.params
        for _ in range(cfg.epochs):
            perm = self.batch_rng.permutation(n)
            for b in range(cfg.minibatches):
                idx = perm[b * cfg.minibatch_size : (b + 1) * cfg.minibatch_size]
                self.nets.zero_grad()
                out = self.minibatch_loss(flat, idx)
                clip_grad_norm(params, cfg.max_grad_norm)
                lr = self.optimizer.step(self.iteration)
                for k, v in out.items():
                    stats.setdefault(k, []).append(v)
        means = {k: float(np.mean(v)) for k, v in stats.items()}
        means["lr"] = lr
        return means

    def run_iteration(self) -> dict:
        buf, finished = self.collect()
        stats = self.update(buf)
        self.iteration += 1
        row = {
            "iteration": self.iteration,
            "timesteps": self.timesteps,
            "mean_episode_reward": float(np.mean([f["episode_return"] for f in finished])) if finished else float("nan"),
            "mean_episode_length": float(np.mean([f["clips"] for f in finished])) if finished else float("nan"),
            **{k: stats[k] for k in LOG_COLUMNS[4:]},
        }
        self.log.append(row)
        log.info(
            "iter %d ts %d reward %.3f len %.2f ent %.3f",
            row["iteration"], row["timesteps"], row["mean_episode_reward"], row["mean_episode_length"], row["entropy"],
        )
        return row

    def train(self, max_iterations: Optional[int] = None) -> list[dict]:
        """Run until the configured timestep budget (or ``max_iterations`` more) is reached."""
        ran = 0
        while not self.done and (max_iterations is None or ran < max_iterations):
            self.run_iteration()
            ran += 1
        return self.log

    # -- persistence --------------------------------------------------------

    def checkpoint_meta(self) -> dict:
        return {
            "mode": self.mode,
            "seed": self.seed,
            "ppo": asdict(self.cfg),
            "reward": {
                "lambda_cost": self.reward.lambda_cost,
                "clip_cost": self.reward.clip_cost,
                "class_prior": list(self.reward.class_prior),
            },
            "iteration": self.iteration,
            "timesteps": self.timesteps,
        }

    def save_checkpoint(self, path: str | Path) -> None:
        self.nets.save(path, extra=self.checkpoint_meta(), arrays={"init_mean": self.init.mean, "init_var": self.init.var})

    def save_state(self, path: str | Path) -> None:
        with Path(path).open("wb") as fh:
            pickle.dump(self, fh, protocol=pickle.HIGHEST_PROTOCOL)

    @staticmethod
    def load_state(path: str | Path) -> "Trainer":
        with Path(path).open("rb") as fh:
            obj = pickle.load(fh)
        if not isinstance(obj, Trainer):
            raise DataError(f"{path} is not a trainer state file")
        return obj


@dataclass
class TrainedAgent:
    nets: AgentNets
    init: GaussianInit
    meta: dict

    @property
    def mode(self) -> str:
        return self.nets.mode

    @classmethod
    def from_trainer(cls, tr: Trainer) -> "TrainedAgent":
        return cls(tr.nets, tr.init, tr.checkpoint_meta())

    @classmethod
    def load(cls, path: str | Path, expect_mode: Optional[str] = None) -> "TrainedAgent":
        nets, meta, extras = AgentNets.load(path, expect_mode)
        return cls(nets, GaussianInit(extras["init_mean"], extras["init_var"]), meta)


def train(
    manifest: DatasetManifest,
    cfg: PPOConfig,
    seed: int,
    mode: str = "full",
    reward: Optional[RewardConfig] = None,
) -> tuple[TrainedAgent, list[dict]]:
    tr = Trainer(manifest, cfg, seed, mode, reward)
    tr.train()
    return TrainedAgent.from_trainer(tr), tr.log


def write_log_csv(rows: list[dict], path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(float(r[k])) if isinstance(r[k], float) else r[k] for k in LOG_COLUMNS})
