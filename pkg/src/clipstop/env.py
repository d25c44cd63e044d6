"""Per-study episodes: view requests, stopping, masking and the terminal reward."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .data import N_MAX, VIEWS, DatasetManifest
from .errors import CapabilityError, DataError
from .nets import N_ACTIONS, STOP

log = logging.getLogger(__name__)

AB1_FEATURE_DIM = 1 + len(VIEWS)


@dataclass(frozen=True)
class EncodedStudy:
    """A study reduced to arrays: per-clip features, view indices and optional scores."""

    study_id: str
    label: int
    feats: np.ndarray
    views: np.ndarray
    scores: Optional[np.ndarray]

    @property
    def n_clips(self) -> int:
        return len(self.views)


def encode_manifest(manifest: DatasetManifest, mode: str = "full", n_max: int = N_MAX) -> list[EncodedStudy]:
    """Turn a manifest into the per-clip features an agent of ``mode`` observes.

    ``full``/``AB2`` use the embeddings; ``AB1`` uses ``[clip_score, one-hot view]``.
    """
    if mode == "AB1" and not manifest.has_clip_scores():
        raise CapabilityError("AB1 needs clip_score on every clip")
    out = []
    for s in manifest.studies:
        if s.n_clips > n_max:
            log.warning("study %s has %d clips; each episode keeps the first %d after shuffling", s.study_id, s.n_clips, n_max)
        views = np.array([c.view.index for c in s.clips], dtype=np.int64)
        scores = None
        if all(c.clip_score is not None for c in s.clips):
            scores = np.array([c.clip_score for c in s.clips], dtype=np.float64)
        if mode == "AB1":
            feats = np.zeros((s.n_clips, AB1_FEATURE_DIM))
            feats[:, 0] = scores
            feats[np.arange(s.n_clips), 1 + views] = 1.0
        else:
            feats = np.stack([c.embedding for c in s.clips]).astype(np.float64)
        out.append(EncodedStudy(s.study_id, s.label, feats, views, scores))
    return out


@dataclass
class GaussianInit:
    """Per-dimension Gaussian the pseudo-embedding in slot 0 is drawn from."""

    mean: np.ndarray
    var: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.var = np.asarray(self.var, dtype=np.float64)
        if self.mean.shape != self.var.shape:
            raise ValueError("GaussianInit mean and var must have the same shape")
        if np.any(self.var < 0):
            raise ValueError("GaussianInit variances must be non-negative")

    @classmethod
    def fit(cls, studies: Sequence[EncodedStudy]) -> "GaussianInit":
        X = np.concatenate([s.feats for s in studies])
        return cls(X.mean(axis=0), X.var(axis=0))

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        return self.mean + np.sqrt(self.var) * rng.standard_normal(self.mean.shape)


@dataclass
class RewardConfig:
    lambda_cost: float = 0.05
    clip_cost: float = 1.0
    class_prior: tuple[float, float] = (0.5, 0.5)

    def __post_init__(self):
        if self.lambda_cost < 0 or self.clip_cost < 0:
            raise ValueError("costs must be non-negative")
        p0, p1 = self.class_prior
        if not (p0 > 0 and p1 > 0):
            raise DataError("class-balancing weights need at least one study of each class")

    def class_weight(self, y: int) -> float:
        return 1.0 / self.class_prior[y]

    def terminal_reward(self, correct: bool, label: int, n_clips: int) -> float:
        return self.class_weight(label) * float(correct) - self.lambda_cost * self.clip_cost * n_clips


class Episode:
    """State of one study episode.

    Slot 0 holds the pseudo-embedding; slots ``1..t`` hold processed clips in order.
    """

    def __init__(
        self,
        study: EncodedStudy,
        s0: np.ndarray,
        order: np.ndarray,
        sequential: bool = False,
        drop_s0: bool = False,
    ):
        self.study = study
        self.s0 = s0
        self.sequential = sequential
        self.drop_s0 = drop_s0
        self.processed: list[int] = []
        self.remaining: list[list[int]] = [[int(i) for i in order if study.views[i] == v] for v in range(len(VIEWS))]
        self.n_available = len(order)
        self.done = False

    @property
    def t(self) -> int:
        return len(self.processed)

    def remaining_counts(self) -> np.ndarray:
        return np.array([len(r) for r in self.remaining])

    def action_mask(self) -> np.ndarray:
        mask = np.zeros(N_ACTIONS, dtype=bool)
        mask[: len(VIEWS)] = self.remaining_counts() > 0
        mask[STOP] = self.t >= min(2, self.n_available)
        return mask

    def slots(self) -> tuple[np.ndarray, np.ndarray]:
        x = np.vstack([self.s0[None, :], self.study.feats[self.processed]])
        valid = np.ones(len(x), dtype=bool)
        if self.drop_s0 and self.t > 0:
            valid[0] = False
        return x, valid

    def processed_views(self) -> list[int]:
        return [int(self.study.views[i]) for i in self.processed]


@dataclass
class StepOutcome:
    reward: float
    done: bool
    mask: np.ndarray
    info: dict = field(default_factory=dict)


Scorer = Callable[[Episode], float]


class PredictorScorer:
    """Scores an episode with the agent's predictor head on the pooled state."""

    def __init__(self, nets):
        self.nets = nets

    def __call__(self, ep: Episode) -> float:
        x, valid = ep.slots()
        h_bar, _ = self.nets.pool(x[None], valid[None])
        return float(self.nets.predict_from_pooled(h_bar)[0])


def mean_score_scorer(ep: Episode) -> float:
    if ep.study.scores is None:
        raise CapabilityError(f"study {ep.study.study_id} lacks clip scores")
    if not ep.processed:
        return 0.5
    return float(ep.study.scores[ep.processed].mean())


def scorer_for(nets) -> Scorer:
    return mean_score_scorer if nets.mode == "AB1" else PredictorScorer(nets)


def reset(
    study: EncodedStudy,
    init: GaussianInit,
    rng: np.random.Generator,
    n_max: int = N_MAX,
    sequential: bool = False,
    drop_s0: bool = False,
) -> tuple[Episode, np.ndarray]:
    if study.n_clips == 0:
        raise DataError(f"study {study.study_id} has no clips")
    s0 = init.sample(rng)
    order = rng.permutation(study.n_clips)[:n_max]
    ep = Episode(study, s0, order, sequential=sequential, drop_s0=drop_s0)
    return ep, ep.action_mask()


def step(ep: Episode, action: int, rng: np.random.Generator, scorer: Scorer, reward: RewardConfig) -> StepOutcome:
    if ep.done:
        raise RuntimeError("step() on a finished episode")
    mask = ep.action_mask()
    if not (0 <= action < N_ACTIONS) or not mask[action]:
        raise ValueError(f"action {action} is masked in the current state (mask={mask.tolist()})")
    forced = False
    if action != STOP:
        pool = ep.remaining[action]
        j = 0 if ep.sequential else int(rng.integers(len(pool)))
        ep.processed.append(pool.pop(j))
        if ep.remaining_counts().sum() > 0:
            return StepOutcome(0.0, False, ep.action_mask(), {"clip": ep.processed[-1]})
        forced = True
    ep.done = True
    y_hat = scorer(ep)
    y_pred = int(y_hat >= 0.5)
    correct = y_pred == ep.study.label
    r = reward.terminal_reward(correct, ep.study.label, ep.t)
    info = {"y_hat": y_hat, "y_pred": y_pred, "correct": correct, "forced": forced, "clips": ep.t}
    if action != STOP:
        info["clip"] = ep.processed[-1]
    return StepOutcome(r, True, np.zeros(N_ACTIONS, dtype=bool), info)


def pad_slots(pairs: Sequence[tuple[np.ndarray, np.ndarray]], n_slots: Optional[int] = None) -> tuple[np.ndarray, np.ndarray]:
    """Stack variable-length slot matrices into a zero-padded batch."""
    S = n_slots or max(len(x) for x, _ in pairs)
    F = pairs[0][0].shape[1]
    X = np.zeros((len(pairs), S, F))
    V = np.zeros((len(pairs), S), dtype=bool)
    for i, (x, v) in enumerate(pairs):
        X[i, : len(x)] = x
        V[i, : len(v)] = v
    return X, V


class VectorEnv:
    """``n_envs`` independent episode streams stepped in lock-step.

    Each environment owns a generator spawned from ``seed`` and walks the studies in
    its own freshly permuted order, re-permuting after each full pass. Finished
    episodes are reset immediately with the next study.
    """

    def __init__(
        self,
        studies: Sequence[EncodedStudy],
        n_envs: int,
        init: GaussianInit,
        reward: RewardConfig,
        scorer: Scorer,
        seed: int,
        n_max: int = N_MAX,
        sequential: bool = False,
        drop_s0: bool = False,
        trace: bool = False,
    ):
        if n_envs < 1:
            raise ValueError("n_envs must be >= 1")
        self.studies = list(studies)
        self.n_envs = n_envs
        self.init = init
        self.reward = reward
        self.scorer = scorer
        self.n_max = n_max
        self.sequential = sequential
        self.drop_s0 = drop_s0
        self.rngs = [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n_envs)]
        self._queues: list[list[int]] = [[] for _ in range(n_envs)]
        self.episodes: list[Optional[Episode]] = [None] * n_envs
        self.returns = np.zeros(n_envs)
        self.trace: Optional[list[dict]] = [] if trace else None

    def _next_study(self, i: int) -> EncodedStudy:
        if not self._queues[i]:
            self._queues[i] = self.rngs[i].permutation(len(self.studies)).tolist()[::-1]
        return self.studies[self._queues[i].pop()]

    def _reset_env(self, i: int) -> None:
        ep, _ = reset(self._next_study(i), self.init, self.rngs[i], self.n_max, self.sequential, self.drop_s0)
        self.episodes[i] = ep
        self.returns[i] = 0.0

    def reset(self) -> np.ndarray:
        for i in range(self.n_envs):
            self._reset_env(i)
        return self.masks()

    def masks(self) -> np.ndarray:
        return np.stack([ep.action_mask() for ep in self.episodes])

    def observe(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        X, V = pad_slots([ep.slots() for ep in self.episodes])
        return X, V, self.masks()

    def sample_actions(self, probs: np.ndarray) -> np.ndarray:
        actions = np.empty(self.n_envs, dtype=np.int64)
        for i, (p, rng) in enumerate(zip(probs, self.rngs)):
            cdf = np.cumsum(p)
            a = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
            while a >= len(p) or p[a] == 0.0:
                a -= 1
            actions[i] = a
        return actions

    def step(self, actions: Sequence[int]) -> tuple[np.ndarray, np.ndarray, list[dict]]:
        rewards = np.zeros(self.n_envs)
        dones = np.zeros(self.n_envs, dtype=bool)
        infos = []
        for i, a in enumerate(actions):
            ep = self.episodes[i]
            t_before = ep.t
            out = step(ep, int(a), self.rngs[i], self.scorer, self.reward)
            rewards[i] = out.reward
            dones[i] = out.done
            self.returns[i] += out.reward
            info = dict(out.info, study_id=ep.study.study_id, label=ep.study.label)
            if self.trace is not None:
                self.trace.append(
                    {
                        "env": i,
                        "study_id": ep.study.study_id,
                        "t": t_before,
                        "action": int(a),
                        "view": VIEWS[int(a)].value if a != STOP else "",
                        "y_hat": info.get("y_hat", ""),
                        "reward": out.reward,
                    }
                )
            if out.done:
                info["episode_return"] = float(self.returns[i])
                self._reset_env(i)
            infos.append(info)
        return rewards, dones, infos


def write_trace_csv(records: Sequence[dict], path: str | Path) -> None:
    cols = ["env", "study_id", "t", "action", "view", "y_hat", "reward"]
    with Path(path).open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, extrasaction="ignore")
        w.writeheader()
        w.writerows(records)
