"""Study-level metrics, the benchmark policies, and multi-seed evaluation reports."""

from __future__ import annotations

import csv
import logging
import math
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.stats import rankdata

from .data import VIEWS, DatasetManifest, StudyRecord, View
from .env import EncodedStudy, encode_manifest, reset, scorer_for, step
from .errors import CapabilityError
from .nets import STOP
from .ppo import TrainedAgent

log = logging.getLogger(__name__)

STD_THRESHOLD = 0.241
POLICIES = (
    "all_clips",
    "weighted_clips",
    "a4c_clips",
    "single_clip",
    "random_sample",
    "std",
    "ab1",
    "ab2",
    "rl",
)
POLICY_LABELS = {
    "all_clips": "All clips",
    "weighted_clips": "Weighted clips",
    "a4c_clips": "A4C clips",
    "single_clip": "Single clip",
    "random_sample": "Random sample",
    "std": "STD",
    "ab1": "Ours (AB1)",
    "ab2": "Ours (AB2)",
    "rl": "Ours",
}
RL_MODES = {"rl": "full", "ab1": "AB1", "ab2": "AB2"}
NEEDS_SCORES = {"all_clips", "weighted_clips", "a4c_clips", "single_clip", "random_sample", "std", "ab1"}


# --- metrics -----------------------------------------------------------------


@dataclass(frozen=True)
class Metrics:
    sens: float
    spec: float
    auc: float
    cost: float


def auc_score(scores, labels) -> float:
    """Probability a random positive outscores a random negative (ties count 1/2)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC is undefined without both positive and negative studies")
    ranks = rankdata(scores)
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def metrics(scores, labels, clips_used, clips_total) -> Metrics:
    """Sensitivity/specificity at 0.5, rank AUC, and clips used as % of ``clips_total``.

    ``clips_total`` may be a per-study array or a single denominator.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    pred = scores >= 0.5
    auc = auc_score(scores, labels)
    sens = float(pred[labels].mean())
    spec = float((~pred[~labels]).mean())
    cost = 100.0 * float(np.sum(clips_used)) / float(np.sum(clips_total))
    return Metrics(sens, spec, auc, cost)


# --- per-study outcomes ------------------------------------------------------


@dataclass
class StudyOutcome:
    study_id: str
    label: int
    score: float
    clips_used: int
    clips_total: int
    views: list[int] = field(default_factory=list)
    clip_scores: list[float] = field(default_factory=list)
    step_scores: list[float] = field(default_factory=list)
    skipped: bool = False

    @property
    def views_sequence(self) -> str:
        return "|".join(VIEWS[v].value for v in self.views)


def study_rng(seed: int, study_id: str, policy: str) -> np.random.Generator:
    return np.random.default_rng([int(seed), zlib.crc32(study_id.encode()), zlib.crc32(policy.encode())])


def _scores(study: StudyRecord, policy: str) -> np.ndarray:
    if any(c.clip_score is None for c in study.clips):
        raise CapabilityError(f"{policy} needs clip_score on every clip (study {study.study_id})")
    return np.array([c.clip_score for c in study.clips])


def _outcome(study: StudyRecord, idx: Sequence[int], scores: np.ndarray, value: float) -> StudyOutcome:
    idx = [int(i) for i in idx]
    sub = scores[idx]
    return StudyOutcome(
        study.study_id,
        study.label,
        float(value),
        len(idx),
        study.n_clips,
        views=[study.clips[i].view.index for i in idx],
        clip_scores=sub.tolist(),
        step_scores=(np.cumsum(sub) / np.arange(1, len(sub) + 1)).tolist(),
    )


def policy_all_clips(study: StudyRecord) -> StudyOutcome:
    s = _scores(study, "all_clips")
    return _outcome(study, range(study.n_clips), s, s.mean())


def policy_weighted_clips(study: StudyRecord, weight: str = "max") -> StudyOutcome:
    """Average of clip scores weighted by view-classifier confidence.

    ``weight="max"`` uses each clip's largest view probability; ``"true"`` uses the
    probability of the clip's labelled view.
    """
    s = _scores(study, "weighted_clips")
    if any(c.view_probs is None for c in study.clips):
        raise CapabilityError(f"weighted_clips needs view_probs on every clip (study {study.study_id})")
    if weight == "max":
        w = np.array([max(c.view_probs) for c in study.clips])
    elif weight == "true":
        w = np.array([c.view_probs[c.view.index] for c in study.clips])
    else:
        raise ValueError("weight must be 'max' or 'true'")
    return _outcome(study, range(study.n_clips), s, (w * s).sum() / w.sum())


def policy_a4c(study: StudyRecord) -> StudyOutcome:
    s = _scores(study, "a4c_clips")
    idx = [i for i, c in enumerate(study.clips) if c.view is View.A4C]
    if not idx:
        return StudyOutcome(study.study_id, study.label, float("nan"), 0, study.n_clips, skipped=True)
    return _outcome(study, idx, s, s[idx].mean())


def policy_single_clip(study: StudyRecord, rng: np.random.Generator) -> StudyOutcome:
    s = _scores(study, "single_clip")
    i = int(rng.integers(study.n_clips))
    return _outcome(study, [i], s, s[i])


def policy_random_sample(study: StudyRecord, per_view_rate: Sequence[float], rng: np.random.Generator) -> StudyOutcome:
    """Sample each view at a fixed rate (stochastic rounding); at least one clip overall."""
    s = _scores(study, "random_sample")
    chosen: list[int] = []
    for v in VIEWS:
        pool = [i for i, c in enumerate(study.clips) if c.view is v]
        want = min(1.0, max(0.0, float(per_view_rate[v.index]))) * len(pool)
        k = int(math.floor(want))
        if rng.random() < want - k:
            k += 1
        k = min(k, len(pool))
        if k:
            chosen.extend(int(i) for i in rng.choice(pool, size=k, replace=False))
    if not chosen:
        chosen = [int(rng.integers(study.n_clips))]
    return _outcome(study, chosen, s, s[chosen].mean())


def policy_std_heuristic(study: StudyRecord, rng: np.random.Generator, threshold: float = STD_THRESHOLD) -> StudyOutcome:
    """Process random clips (at least two) while their score spread exceeds ``threshold``."""
    s = _scores(study, "std")
    order = rng.permutation(study.n_clips)
    n = min(2, study.n_clips)
    while n < study.n_clips and np.std(s[order[:n]], ddof=1) > threshold:
        n += 1
    idx = order[:n]
    return _outcome(study, idx, s, s[idx].mean())


def run_agent_episode(
    study: EncodedStudy,
    agent: TrainedAgent,
    rng: np.random.Generator,
    greedy: bool = False,
    n_max: int = 200,
) -> tuple[StudyOutcome, list[int]]:
    """Roll the agent through one study; returns the outcome and the action trace."""
    nets = agent.nets
    scorer = scorer_for(nets)
    ep, mask = reset(study, agent.init, rng, n_max=n_max)
    actions: list[int] = []
    step_scores: list[float] = []
    while True:
        x, valid = ep.slots()
        h_bar, _ = nets.pool(x[None], valid[None])
        dist = nets.policy(h_bar[0], mask)
        a = int(np.argmax(dist.probs)) if greedy else dist.sample(rng)
        actions.append(a)
        out = step(ep, a, rng, scorer, _NULL_REWARD)
        if a != STOP:
            step_scores.append(out.info["y_hat"] if out.done else scorer(ep))
        if out.done:
            break
        mask = out.mask
    if out.info.get("forced"):
        actions.append(STOP)
    y_hat = out.info["y_hat"]
    scores = study.scores if study.scores is not None else np.full(study.n_clips, np.nan)
    oc = StudyOutcome(
        study.study_id,
        study.label,
        float(y_hat),
        ep.t,
        study.n_clips,
        views=ep.processed_views(),
        clip_scores=scores[ep.processed].tolist(),
        step_scores=step_scores,
    )
    return oc, actions


class _NullReward:
    # evaluation ignores rewards; avoids needing a class prior on the test set
    def terminal_reward(self, correct, label, n_clips):
        return 0.0


_NULL_REWARD = _NullReward()


def policy_rl(
    study: EncodedStudy, agent: TrainedAgent, rng: np.random.Generator, mode: Optional[str] = None, greedy: bool = False
) -> tuple[StudyOutcome, list[int]]:
    if mode is not None and agent.mode != mode:
        raise ValueError(f"agent was trained in mode {agent.mode}, asked to run as {mode}")
    return run_agent_episode(study, agent, rng, greedy=greedy)


def uncertain_subset(manifest: DatasetManifest, quantile: float = 0.25) -> list[str]:
    """Study ids in the top ``quantile`` of within-study clip-score std (ties by study_id)."""
    ranked = []
    for s in manifest.studies:
        if s.n_clips < 2:
            continue
        sc = _scores(s, "uncertain_subset")
        ranked.append((-float(np.std(sc, ddof=1)), s.study_id))
    if not ranked:
        return []
    ranked.sort()
    k = max(1, math.ceil(quantile * len(ranked) - 1e-9))
    return [sid for _, sid in ranked[:k]]


# --- multi-seed evaluation ----------------------------------------------------


@dataclass
class SeedResult:
    seed: int
    all: Metrics
    uncertain: Optional[Metrics]
    outcomes: list[StudyOutcome]
    skipped: int = 0


@dataclass
class EvalReport:
    policy: str
    results: list[SeedResult] = field(default_factory=list)

    @property
    def seeds(self) -> list[int]:
        return [r.seed for r in self.results]

    def aggregate(self, subset: str = "all") -> dict[str, tuple[float, float]]:
        out = {}
        rows = [getattr(r, subset) for r in self.results if getattr(r, subset) is not None]
        for name in ("sens", "spec", "auc", "cost"):
            vals = np.array([getattr(m, name) for m in rows], dtype=np.float64)
            if len(vals) == 0:
                out[name] = (float("nan"), float("nan"))
            else:
                out[name] = (float(np.nanmean(vals)), float(np.nanstd(vals)))
        return out


def _metrics_for(outcomes: Sequence[StudyOutcome], total_clips: int, ids: Optional[set] = None) -> Optional[Metrics]:
    chosen = [o for o in outcomes if not o.skipped and (ids is None or o.study_id in ids)]
    labels = [o.label for o in chosen]
    if len(set(labels)) < 2:
        return None
    return metrics([o.score for o in chosen], labels, [o.clips_used for o in chosen], total_clips)


def per_view_rates(outcomes: Sequence[StudyOutcome], manifest: DatasetManifest) -> np.ndarray:
    """Fraction of each view's clips (over all studies) that an agent processed."""
    used = np.zeros(len(VIEWS))
    for o in outcomes:
        for v in o.views:
            used[v] += 1
    avail = np.sum([s.view_counts() for s in manifest.studies], axis=0).astype(np.float64)
    return np.divide(used, avail, out=np.zeros_like(used), where=avail > 0)


def evaluate(
    manifest: DatasetManifest,
    policies: Sequence[str] = POLICIES,
    agents: Optional[dict[str, TrainedAgent]] = None,
    n_seeds: int = 10,
    master_seed: int = 0,
    quantile: float = 0.25,
    std_threshold: float = STD_THRESHOLD,
    weight: str = "max",
    greedy: bool = False,
    rate_source: str = "rl",
) -> dict[str, EvalReport]:
    """Evaluate ``policies`` over ``n_seeds`` seeds.

    ``agents`` maps ``rl``/``ab1``/``ab2`` to trained agents. The random-sample policy
    matches the per-view clip totals of the ``rate_source`` agent in the same seed.
    """
    agents = agents or {}
    unknown = set(policies) - set(POLICIES)
    if unknown:
        raise ValueError(f"unknown policies {sorted(unknown)}")
    for p in policies:
        if p in NEEDS_SCORES and not manifest.has_clip_scores():
            raise CapabilityError(f"policy {p} needs clip_score on every clip")
        if p == "weighted_clips" and not manifest.has_view_probs():
            raise CapabilityError("policy weighted_clips needs view_probs on every clip")
        if p in RL_MODES and p not in agents:
            raise ValueError(f"policy {p} needs a trained {RL_MODES[p]} checkpoint")
        if p in RL_MODES and agents[p].mode != RL_MODES[p]:
            raise ValueError(f"checkpoint for {p} was trained in mode {agents[p].mode}, expected {RL_MODES[p]}")
    if "random_sample" in policies and rate_source not in agents:
        raise ValueError(f"random_sample needs the {rate_source} agent to set its per-view budget")

    total = manifest.n_clips
    unc_ids = set(uncertain_subset(manifest, quantile)) if manifest.has_clip_scores() else None
    encoded = {mode: encode_manifest(manifest, mode) for mode in {a.mode for a in agents.values()}}
    seeds = [master_seed + i for i in range(n_seeds)]
    reports = {p: EvalReport(p) for p in policies}

    for seed in seeds:
        rl_cache: dict[str, list[StudyOutcome]] = {}

        def run_agent(name: str) -> list[StudyOutcome]:
            if name not in rl_cache:
                ag = agents[name]
                rl_cache[name] = [
                    policy_rl(st, ag, study_rng(seed, st.study_id, name), greedy=greedy)[0] for st in encoded[ag.mode]
                ]
            return rl_cache[name]

        for p in policies:
            if p in RL_MODES:
                outs = run_agent(p)
            elif p == "all_clips":
                outs = [policy_all_clips(s) for s in manifest.studies]
            elif p == "weighted_clips":
                outs = [policy_weighted_clips(s, weight) for s in manifest.studies]
            elif p == "a4c_clips":
                outs = [policy_a4c(s) for s in manifest.studies]
            elif p == "single_clip":
                outs = [policy_single_clip(s, study_rng(seed, s.study_id, p)) for s in manifest.studies]
            elif p == "std":
                outs = [policy_std_heuristic(s, study_rng(seed, s.study_id, p), std_threshold) for s in manifest.studies]
            else:
                rates = per_view_rates(run_agent(rate_source), manifest)
                outs = [policy_random_sample(s, rates, study_rng(seed, s.study_id, p)) for s in manifest.studies]
            skipped = sum(o.skipped for o in outs)
            if skipped:
                log.warning("%s skipped %d studies in seed %d", p, skipped, seed)
            reports[p].results.append(
                SeedResult(
                    seed,
                    _metrics_for(outs, total),
                    _metrics_for(outs, total, unc_ids) if unc_ids else None,
                    outs,
                    skipped,
                )
            )
    return reports


# --- report files ------------------------------------------------------------

SUMMARY_COLUMNS = ["policy", "seed", "sens", "spec", "auc", "cost_pct", "unc_sens", "unc_spec", "unc_auc", "unc_cost_pct", "skipped"]
TRACE_COLUMNS = ["policy", "seed", "study_id", "label", "score", "clips_used", "clips_total", "views_sequence"]


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float):
        return repr(x)
    return str(x)


def summary_rows(reports: dict[str, EvalReport]) -> list[dict]:
    rows = []
    for p, rep in reports.items():
        for r in rep.results:
            row = {"policy": p, "seed": r.seed, "skipped": r.skipped}
            for prefix, m in (("", r.all), ("unc_", r.uncertain)):
                for name, col in (("sens", "sens"), ("spec", "spec"), ("auc", "auc"), ("cost", "cost_pct")):
                    row[prefix + col] = None if m is None else getattr(m, name)
            rows.append(row)
    return rows


def write_summary_csv(reports: dict[str, EvalReport], path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SUMMARY_COLUMNS)
        for row in summary_rows(reports):
            w.writerow([_fmt(row[c]) for c in SUMMARY_COLUMNS])


def write_table_csv(reports: dict[str, EvalReport], path: str | Path) -> None:
    """Mean and seed-std per policy for the full set and the uncertain subset."""
    cols = ["policy", "subset", "sens", "sens_std", "spec", "spec_std", "auc", "auc_std", "cost_pct", "cost_pct_std", "n_seeds"]
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for p, rep in reports.items():
            for subset in ("all", "uncertain"):
                agg = rep.aggregate(subset)
                vals = []
                for k in ("sens", "spec", "auc", "cost"):
                    vals += [repr(agg[k][0]), repr(agg[k][1])]
                w.writerow([p, subset, *vals, len(rep.results)])


def write_traces_csv(reports: dict[str, EvalReport], path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRACE_COLUMNS)
        for p, rep in reports.items():
            for r in rep.results:
                for o in r.outcomes:
                    w.writerow([p, r.seed, o.study_id, o.label, _fmt(o.score), o.clips_used, o.clips_total, o.views_sequence])


def format_table(reports: dict[str, EvalReport]) -> str:
    def cell(agg, k, digits):
        m, s = agg[k]
        if math.isnan(m):
            return "  n/a"
        return f"{m:.{digits}f}±{s:.{digits}f}"

    head = f"{'policy':<16}" + "".join(f"{h:>15}" for h in ("Sens", "Spec", "AUC", "Cost%", "U-Sens", "U-Spec", "U-AUC", "U-Cost%"))
    lines = [head]
    for p, rep in reports.items():
        a, u = rep.aggregate("all"), rep.aggregate("uncertain")
        cells = [cell(a, "sens", 3), cell(a, "spec", 3), cell(a, "auc", 3), cell(a, "cost", 2)]
        cells += [cell(u, "sens", 3), cell(u, "spec", 3), cell(u, "auc", 3), cell(u, "cost", 2)]
        lines.append(f"{POLICY_LABELS.get(p, p):<16}" + "".join(f"{c:>15}" for c in cells))
    return "\n".join(lines)


# --- figure data -------------------------------------------------------------

FIG2_COLUMNS = ["policy", "label", "n_clips", "mean", "std", "count"]
FIG3_COLUMNS = ["study_id", "label", "correct", "fraction_used", "step", "view", "clip_score", "final_score"]


def _running_stats(series: dict[int, list[list[float]]], policy: str) -> list[dict]:
    rows = []
    for label in sorted(series):
        seqs = series[label]
        longest = max((len(s) for s in seqs), default=0)
        for n in range(1, longest + 1):
            vals = np.array([s[n - 1] for s in seqs if len(s) >= n])
            rows.append(
                {"policy": policy, "label": label, "n_clips": n, "mean": float(vals.mean()), "std": float(vals.std()), "count": len(vals)}
            )
    return rows


def fig2_rows(rl_outcomes: Sequence[StudyOutcome], manifest: DatasetManifest, seed: int = 0) -> list[dict]:
    """Mean/std of the running study prediction versus clips processed, per class.

    The agent's curve uses its prediction after each selected clip; the random curve
    averages clip scores in a random processing order over all clips of each study.
    """
    rl: dict[int, list[list[float]]] = {0: [], 1: []}
    for o in rl_outcomes:
        rl[o.label].append(o.step_scores)
    rnd: dict[int, list[list[float]]] = {0: [], 1: []}
    for s in manifest.studies:
        sc = _scores(s, "fig2 random")
        order = study_rng(seed, s.study_id, "fig2").permutation(s.n_clips)
        rnd[s.label].append((np.cumsum(sc[order]) / np.arange(1, s.n_clips + 1)).tolist())
    return _running_stats(rl, "rl") + _running_stats(rnd, "random")


def fig3_rows(rl_outcomes: Sequence[StudyOutcome]) -> list[dict]:
    rows = []
    for o in rl_outcomes:
        correct = int((o.score >= 0.5) == bool(o.label))
        for k, (v, cs) in enumerate(zip(o.views, o.clip_scores)):
            rows.append(
                {
                    "study_id": o.study_id,
                    "label": o.label,
                    "correct": correct,
                    "fraction_used": o.clips_used / o.clips_total,
                    "step": k + 1,
                    "view": VIEWS[v].value,
                    "clip_score": cs,
                    "final_score": o.score,
                }
            )
    return rows


def write_rows_csv(rows: Sequence[dict], columns: Sequence[str], path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(columns))
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(r[k]) for k in columns})
