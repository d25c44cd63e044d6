"""Studies, clips and views: file I/O, synthetic generation and shuffling."""

from __future__ import annotations

import enum
import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import ConfigError, DataError

log = logging.getLogger(__name__)

FORMAT_TAG = "clipstop-v1"
N_MAX = 200


class View(str, enum.Enum):
    A4C = "A4C"
    PLAX = "PLAX"
    PSAX = "PSAX"

    @property
    def index(self) -> int:
        return VIEWS.index(self)


VIEWS: tuple[View, ...] = (View.A4C, View.PLAX, View.PSAX)


@dataclass(frozen=True)
class ClipRecord:
    clip_id: str
    view: View
    embedding: np.ndarray
    clip_score: Optional[float] = None
    view_probs: Optional[tuple[float, float, float]] = None

    def __eq__(self, other):
        if not isinstance(other, ClipRecord):
            return NotImplemented
        return (
            self.clip_id == other.clip_id
            and self.view == other.view
            and np.array_equal(self.embedding, other.embedding)
            and self.clip_score == other.clip_score
            and self.view_probs == other.view_probs
        )


@dataclass(frozen=True)
class StudyRecord:
    study_id: str
    label: int
    clips: tuple[ClipRecord, ...]

    @property
    def n_clips(self) -> int:
        return len(self.clips)

    def view_counts(self) -> np.ndarray:
        counts = np.zeros(len(VIEWS), dtype=int)
        for c in self.clips:
            counts[c.view.index] += 1
        return counts


@dataclass(frozen=True)
class DatasetManifest:
    D: int
    studies: tuple[StudyRecord, ...]

    @property
    def class_prior(self) -> tuple[float, float]:
        n_pos = sum(s.label for s in self.studies)
        n = len(self.studies)
        return ((n - n_pos) / n, n_pos / n)

    @property
    def n_clips(self) -> int:
        return sum(s.n_clips for s in self.studies)

    def has_clip_scores(self) -> bool:
        return all(c.clip_score is not None for s in self.studies for c in s.clips)

    def has_view_probs(self) -> bool:
        return all(c.view_probs is not None for s in self.studies for c in s.clips)

    def embedding_matrix(self) -> np.ndarray:
        return np.stack([c.embedding for s in self.studies for c in s.clips])


def _validate_clip(clip: ClipRecord, D: int, study_id: str) -> None:
    if clip.embedding.shape != (D,):
        raise DataError(
            f"study {study_id!r}: clip {clip.clip_id!r} has embedding of length "
            f"{clip.embedding.size}, expected D={D}"
        )
    if not np.all(np.isfinite(clip.embedding)):
        raise DataError(f"study {study_id!r}: clip {clip.clip_id!r} has non-finite embedding")
    if clip.clip_score is not None and not 0.0 <= clip.clip_score <= 1.0:
        raise DataError(f"study {study_id!r}: clip {clip.clip_id!r} clip_score outside [0, 1]")
    if clip.view_probs is not None:
        vp = clip.view_probs
        if len(vp) != 3 or min(vp) < 0 or abs(sum(vp) - 1.0) > 1e-6:
            raise DataError(
                f"study {study_id!r}: clip {clip.clip_id!r} view_probs must be 3 non-negative "
                "values summing to 1"
            )


def make_manifest(D: int, studies: Iterable[StudyRecord]) -> DatasetManifest:
    """Validate and freeze a collection of studies."""
    studies = tuple(studies)
    if D <= 0:
        raise DataError(f"D must be positive, got {D}")
    if not studies:
        raise DataError("dataset contains no studies")
    seen = set()
    for s in studies:
        if s.study_id in seen:
            raise DataError(f"duplicate study_id {s.study_id!r}")
        seen.add(s.study_id)
        if s.label not in (0, 1):
            raise DataError(f"study {s.study_id!r}: label must be 0 or 1")
        if not s.clips:
            raise DataError(f"study {s.study_id!r} has no clips")
        for c in s.clips:
            _validate_clip(c, D, s.study_id)
    return DatasetManifest(D=D, studies=studies)


# --- file format -------------------------------------------------------------


def _parse_clip(obj: dict, where: str) -> ClipRecord:
    try:
        view = View(obj["view"])
    except (KeyError, ValueError):
        raise DataError(f"{where}: clip view must be one of A4C, PLAX, PSAX") from None
    try:
        emb = np.asarray(obj["embedding"], dtype=np.float64)
        clip_id = str(obj["clip_id"])
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"{where}: malformed clip ({exc})") from None
    score = obj.get("clip_score")
    probs = obj.get("view_probs")
    emb.setflags(write=False)
    return ClipRecord(
        clip_id=clip_id,
        view=view,
        embedding=emb,
        clip_score=None if score is None else float(score),
        view_probs=None if probs is None else tuple(float(p) for p in probs),
    )


def load_dataset(path: str | Path) -> DatasetManifest:
    path = Path(path)
    if not path.exists():
        raise DataError(f"dataset file not found: {path}")
    with path.open() as fh:
        lines = [ln for ln in fh.read().splitlines()]
    if not lines or not lines[0].strip():
        raise DataError(f"{path}: empty dataset file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}:1: malformed header ({exc.msg})") from None
    if not isinstance(header, dict) or header.get("format") != FORMAT_TAG:
        raise DataError(f"{path}:1: header must declare format {FORMAT_TAG!r}")
    D = header.get("D")
    if not isinstance(D, int) or D <= 0:
        raise DataError(f"{path}:1: header D must be a positive integer")

    studies = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        where = f"{path}:{lineno}"
        try:
            obj = json.loads(line)
            sid = str(obj["study_id"])
            label = obj["label"]
            raw_clips = obj["clips"]
        except json.JSONDecodeError as exc:
            raise DataError(f"{where}: malformed record ({exc.msg})") from None
        except (KeyError, TypeError) as exc:
            raise DataError(f"{where}: record missing field {exc}") from None
        if label not in (0, 1) or isinstance(label, bool):
            raise DataError(f"{where}: study {sid!r} label must be 0 or 1")
        clips = tuple(_parse_clip(c, f"{where} (study {sid!r})") for c in raw_clips)
        studies.append(StudyRecord(study_id=sid, label=int(label), clips=clips))
    if not studies:
        raise DataError(f"{path}: dataset contains no studies")
    return make_manifest(D, studies)


def _clip_to_json(c: ClipRecord) -> dict:
    out = {"clip_id": c.clip_id, "view": c.view.value, "embedding": [float(x) for x in c.embedding]}
    if c.clip_score is not None:
        out["clip_score"] = float(c.clip_score)
    if c.view_probs is not None:
        out["view_probs"] = [float(p) for p in c.view_probs]
    return out


def write_dataset(manifest: DatasetManifest, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        fh.write(json.dumps({"format": FORMAT_TAG, "D": manifest.D}) + "\n")
        for s in manifest.studies:
            rec = {"study_id": s.study_id, "label": s.label, "clips": [_clip_to_json(c) for c in s.clips]}
            fh.write(json.dumps(rec) + "\n")


# --- transformations ---------------------------------------------------------


def shuffle_dataset(manifest: DatasetManifest, seed: int) -> DatasetManifest:
    """Permute study order and the clip order inside every study."""
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(manifest.studies))
    studies = []
    for i in order:
        s = manifest.studies[i]
        perm = rng.permutation(s.n_clips)
        studies.append(replace(s, clips=tuple(s.clips[j] for j in perm)))
    return DatasetManifest(D=manifest.D, studies=tuple(studies))


def truncate_studies(manifest: DatasetManifest, n_max: int = N_MAX) -> DatasetManifest:
    """Keep the first ``n_max`` clips of each study, warning on every cut."""
    out = []
    for s in manifest.studies:
        if s.n_clips > n_max:
            log.warning("study %s has %d clips; truncating to %d", s.study_id, s.n_clips, n_max)
            s = replace(s, clips=s.clips[:n_max])
        out.append(s)
    return DatasetManifest(D=manifest.D, studies=tuple(out))


def subset(manifest: DatasetManifest, study_ids: Sequence[str]) -> DatasetManifest:
    keep = set(study_ids)
    return DatasetManifest(D=manifest.D, studies=tuple(s for s in manifest.studies if s.study_id in keep))


# --- synthetic generation ----------------------------------------------------


def _view_dict(value, name: str) -> dict[View, float]:
    if isinstance(value, dict):
        out = {View(k) if not isinstance(k, View) else k: float(v) for k, v in value.items()}
        missing = set(VIEWS) - set(out)
        if missing:
            raise ConfigError(f"{name} missing views {sorted(v.value for v in missing)}")
        return out
    return {v: float(value) for v in VIEWS}


@dataclass
class SynthConfig:
    """Parameters of the synthetic study generator.

    Each clip embedding is ``view_offset[v] + y * informativeness[v] * u + study_effect + noise[v] * eps``
    where ``u`` is a unit class direction. ``world_seed`` fixes ``u`` and the view offsets so that
    train and test sets drawn with different ``seed`` values share one generative model.
    """

    D: int
    n_studies: int = 1000
    disease_fraction: float = 0.2
    informativeness: dict = field(default_factory=lambda: {"A4C": 2.0, "PLAX": 0.0, "PSAX": 0.0})
    noise: dict = field(default_factory=lambda: {"A4C": 1.0, "PLAX": 1.0, "PSAX": 1.0})
    clips_per_view: dict = field(default_factory=lambda: {"A4C": [3, 10], "PLAX": [3, 10], "PSAX": [3, 10]})
    study_noise: float = 0.3
    view_offset_scale: float = 1.0
    score_slope: float = 2.0
    score_noise: float = 1.0
    view_prob_noise: float = 0.1
    identical_clips: bool = False
    seed: int = 0
    world_seed: int = 0
    id_prefix: str = "s"

    def validate(self) -> None:
        if self.D is None or int(self.D) <= 0:
            raise ConfigError("synth D must be a positive integer")
        if self.n_studies < 1:
            raise ConfigError("n_studies must be >= 1")
        if not 0.0 < self.disease_fraction < 1.0:
            raise ConfigError("disease_fraction must lie in (0, 1)")
        _view_dict(self.informativeness, "informativeness")
        for v, s in _view_dict(self.noise, "noise").items():
            if s <= 0:
                raise ConfigError(f"noise scale for {v.value} must be > 0")
        for v in VIEWS:
            lo, hi = self._clip_range(v)
            if lo < 0 or lo > hi:
                raise ConfigError(f"clips_per_view for {v.value} must satisfy 0 <= min <= max")
        if all(self._clip_range(v)[1] == 0 for v in VIEWS):
            raise ConfigError("clips_per_view allows no clips at all")

    def _clip_range(self, view: View) -> tuple[int, int]:
        rng = self.clips_per_view
        pair = rng[view.value] if isinstance(rng, dict) else rng
        return int(pair[0]), int(pair[1])


def _world(cfg: SynthConfig):
    rng = np.random.default_rng([int(cfg.world_seed), 0x5EED])
    u = rng.standard_normal(cfg.D)
    u /= np.linalg.norm(u)
    offsets = {}
    for v in VIEWS:
        o = rng.standard_normal(cfg.D)
        # keep view identity out of the class direction so scores stay view-neutral
        o -= (o @ u) * u
        offsets[v] = cfg.view_offset_scale * o / np.linalg.norm(o) * math.sqrt(cfg.D) / 2
    return u, offsets


def generate_synthetic(cfg: SynthConfig) -> DatasetManifest:
    """Draw a labelled multi-view dataset, deterministically from ``cfg``."""
    cfg.validate()
    info = _view_dict(cfg.informativeness, "informativeness")
    noise = _view_dict(cfg.noise, "noise")
    u, offsets = _world(cfg)
    ref = max(info.values()) or 1.0
    rng = np.random.default_rng(int(cfg.seed))
    width = len(str(cfg.n_studies - 1))

    studies = []
    for i in range(cfg.n_studies):
        y = int(rng.random() < cfg.disease_fraction)
        counts = [int(rng.integers(lo, hi + 1)) for lo, hi in (cfg._clip_range(v) for v in VIEWS)]
        if sum(counts) == 0:
            counts[int(rng.integers(len(VIEWS)))] = 1
        effect = cfg.study_noise * rng.standard_normal(cfg.D)
        clips = []
        shared = None
        for v, n in zip(VIEWS, counts):
            for j in range(n):
                if cfg.identical_clips and shared is not None:
                    emb = shared
                else:
                    emb = offsets[v] + y * info[v] * u + effect + noise[v] * rng.standard_normal(cfg.D)
                    if cfg.identical_clips:
                        shared = emb
                proj = float((emb - offsets[v]) @ u)
                logit = cfg.score_slope * (proj - ref / 2) + cfg.score_noise * rng.standard_normal()
                score = 1.0 / (1.0 + math.exp(-logit))
                delta = cfg.view_prob_noise * rng.random()
                probs = [delta / 2] * 3
                probs[v.index] = 1.0 - delta
                emb = np.array(emb, dtype=np.float64)
                emb.setflags(write=False)
                clips.append(
                    ClipRecord(
                        clip_id=f"c{len(clips)}",
                        view=v,
                        embedding=emb,
                        clip_score=score,
                        view_probs=tuple(probs),
                    )
                )
        studies.append(StudyRecord(study_id=f"{cfg.id_prefix}{i:0{width}d}", label=y, clips=tuple(clips)))
    return make_manifest(cfg.D, studies)


def dataset_stats(manifest: DatasetManifest) -> dict:
    counts = np.array([s.view_counts() for s in manifest.studies])
    n_clips = counts.sum(axis=1)
    p0, p1 = manifest.class_prior
    return {
        "D": manifest.D,
        "studies": len(manifest.studies),
        "positives": int(sum(s.label for s in manifest.studies)),
        "class_prior": [p0, p1],
        "clips": int(n_clips.sum()),
        "clips_per_study": {"min": int(n_clips.min()), "mean": float(n_clips.mean()), "max": int(n_clips.max())},
        "clips_per_view": {v.value: int(counts[:, v.index].sum()) for v in VIEWS},
        "has_clip_scores": manifest.has_clip_scores(),
        "has_view_probs": manifest.has_view_probs(),
    }
