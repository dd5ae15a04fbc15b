"""Episode schema, JSONL persistence, gaze alignment, loss masks and fold splits."""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, ContractError, ParseError, SchemaError, SerializationError


class Participant(enum.IntEnum):
    H1 = 0
    H2 = 1
    R = 2


N_PARTICIPANTS = 3
HUMANS = (Participant.H1, Participant.H2)


class Category(str, enum.Enum):
    CONSISTENCY = "C"
    LOOK_WITHOUT_SPEAK = "LWS"
    SPEAK_WITHOUT_LOOK = "SWL"

    @property
    def aligned(self) -> bool:
        return self is Category.CONSISTENCY


class Decision(enum.IntEnum):
    NONE = 0
    RESPOND_H1 = 1
    RESPOND_H2 = 2
    RESPOND_BOTH = 3


N_DECISIONS = 4


def respond_to(speaker: int) -> Decision:
    """The decision that answers ``speaker`` directly (H1 -> 1, H2 -> 2)."""
    if speaker == Participant.H1:
        return Decision.RESPOND_H1
    if speaker == Participant.H2:
        return Decision.RESPOND_H2
    raise ValueError("the robot cannot be a response target")


def categorize_alignment(gaze_target: int | None, listeners: Sequence[int]) -> Category:
    """Classify how the speaker's gaze relates to the addressees."""
    if gaze_target is None:
        return Category.SPEAK_WITHOUT_LOOK
    if listeners[gaze_target]:
        return Category.CONSISTENCY
    return Category.LOOK_WITHOUT_SPEAK


@dataclass(frozen=True)
class SceneLabel:
    speaker: int
    listeners: tuple[int, int, int]

    @property
    def robot_addressed(self) -> bool:
        return bool(self.listeners[Participant.R])

    @property
    def multi_listener(self) -> bool:
        return sum(self.listeners) > 1


@dataclass(frozen=True)
class GazeInfo:
    target: int | None
    category: Category


@dataclass(frozen=True)
class UtteranceRecord:
    index: int
    video_feat: tuple[float, ...]
    text_feat: tuple[float, ...]
    scene: SceneLabel
    gaze: GazeInfo
    response: Decision
    is_casual: bool
    start_s: float
    end_s: float

    @property
    def speaker(self) -> int:
        return self.scene.speaker

    @property
    def is_human(self) -> bool:
        return self.scene.speaker != Participant.R


@dataclass(frozen=True)
class Episode:
    episode_id: str
    d_v: int
    d_t: int
    utterances: tuple[UtteranceRecord, ...]

    def __len__(self) -> int:
        return len(self.utterances)

    @property
    def duration_s(self) -> float:
        return self.utterances[-1].end_s - self.utterances[0].start_s if self.utterances else 0.0

    def video_matrix(self) -> np.ndarray:
        return np.array([u.video_feat for u in self.utterances], dtype=np.float64).reshape(len(self), self.d_v)

    def text_matrix(self) -> np.ndarray:
        return np.array([u.text_feat for u in self.utterances], dtype=np.float64).reshape(len(self), self.d_t)


@dataclass(frozen=True)
class MaskSet:
    scene_mask: np.ndarray
    response_mask: np.ndarray


# ------------------------------------------------------------------ validation
def validate_episode(ep: Episode) -> Episode:
    """Raise ``SchemaError`` on the first violated invariant; return ``ep`` otherwise."""

    def fail(idx, reason):
        where = f"episode {ep.episode_id!r}" + ("" if idx is None else f", utterance {idx}")
        raise SchemaError(f"{where}: {reason}")

    if not isinstance(ep.episode_id, str) or not ep.episode_id:
        fail(None, "episode_id must be a non-empty string")
    if ep.d_v < 1 or ep.d_t < 1:
        fail(None, f"feature sizes must be positive (d_v={ep.d_v}, d_t={ep.d_t})")
    if not ep.utterances:
        fail(None, "episode has no utterances")
    for pos, u in enumerate(ep.utterances):
        if u.index != pos:
            fail(pos, f"index {u.index} breaks the contiguous 0..N-1 ordering")
        if len(u.video_feat) != ep.d_v or len(u.text_feat) != ep.d_t:
            fail(pos, f"feature lengths ({len(u.video_feat)}, {len(u.text_feat)}) != ({ep.d_v}, {ep.d_t})")
        if not all(math.isfinite(x) for x in u.video_feat) or not all(math.isfinite(x) for x in u.text_feat):
            fail(pos, "non-finite feature value")
        s = u.scene
        if s.speaker not in (0, 1, 2):
            fail(pos, f"speaker {s.speaker} is not a participant class")
        if len(s.listeners) != N_PARTICIPANTS or any(b not in (0, 1) for b in s.listeners):
            fail(pos, f"listeners {s.listeners} must be three 0/1 bits")
        if s.listeners[s.speaker]:
            fail(pos, "self-listener: speaker appears in its own listener set")
        if not any(s.listeners):
            fail(pos, "empty listener set")
        if u.gaze.target is not None and u.gaze.target not in (0, 1, 2):
            fail(pos, f"gaze target {u.gaze.target} is not a participant class")
        expected = categorize_alignment(u.gaze.target, s.listeners)
        if u.gaze.category is not expected:
            fail(pos, f"category {u.gaze.category.value} inconsistent with gaze/listeners (expected {expected.value})")
        if s.speaker == Participant.R and u.response is not Decision.NONE:
            fail(pos, "robot utterance must carry response None")
        if not (math.isfinite(u.start_s) and math.isfinite(u.end_s)) or u.end_s <= u.start_s:
            fail(pos, f"end_s ({u.end_s}) must exceed start_s ({u.start_s})")
    return ep


# -------------------------------------------------------------- serialization
def _utterance_to_dict(u: UtteranceRecord) -> dict:
    return {
        "index": u.index,
        "video_feat": list(u.video_feat),
        "text_feat": list(u.text_feat),
        "speaker": int(u.scene.speaker),
        "listeners": [int(b) for b in u.scene.listeners],
        "gaze_target": None if u.gaze.target is None else int(u.gaze.target),
        "category": u.gaze.category.value,
        "response": int(u.response),
        "casual": bool(u.is_casual),
        "start_s": u.start_s,
        "end_s": u.end_s,
    }


def episode_to_dict(ep: Episode) -> dict:
    return {
        "episode_id": ep.episode_id,
        "d_v": ep.d_v,
        "d_t": ep.d_t,
        "utterances": [_utterance_to_dict(u) for u in ep.utterances],
    }


def _floats(values) -> tuple[float, ...]:
    return tuple(float(v) for v in values)


def _strict_bool(value) -> bool:
    if not isinstance(value, bool):
        raise TypeError(f"expected a boolean, got {value!r}")
    return value


def episode_from_dict(obj: dict) -> Episode:
    """Build an episode from its JSON object form. Structural problems raise ``KeyError``/``TypeError``/``ValueError``."""
    utterances = []
    for raw in obj["utterances"]:
        gaze = raw["gaze_target"]
        utterances.append(
            UtteranceRecord(
                index=int(raw["index"]),
                video_feat=_floats(raw["video_feat"]),
                text_feat=_floats(raw["text_feat"]),
                scene=SceneLabel(int(raw["speaker"]), tuple(int(b) for b in raw["listeners"])),
                gaze=GazeInfo(None if gaze is None else int(gaze), Category(raw["category"])),
                response=Decision(int(raw["response"])),
                is_casual=_strict_bool(raw["casual"]),
                start_s=float(raw["start_s"]),
                end_s=float(raw["end_s"]),
            )
        )
    return Episode(str(obj["episode_id"]), int(obj["d_v"]), int(obj["d_t"]), tuple(utterances))


def dumps_episode(ep: Episode) -> str:
    try:
        return json.dumps(episode_to_dict(ep), separators=(",", ":"), allow_nan=False)
    except ValueError as exc:
        raise SerializationError(f"episode {ep.episode_id!r}: {exc}") from exc


def save_dataset(episodes: Iterable[Episode], path) -> None:
    """Write one canonical JSON object per line. Floats use shortest round-trip repr."""
    lines = [dumps_episode(ep) + "\n" for ep in episodes]
    Path(path).write_text("".join(lines), encoding="utf-8")


def load_dataset(path) -> list[Episode]:
    episodes = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                ep = episode_from_dict(obj)
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ParseError(f"{path}:{lineno}: malformed episode record ({exc})") from exc
            episodes.append(validate_episode(ep))
    return episodes


# ----------------------------------------------------------------- masks/folds
def build_masks(episode: Episode, pad_to: int | None = None) -> MaskSet:
    n = len(episode)
    pad_to = n if pad_to is None else pad_to
    if pad_to < n:
        raise ContractError(f"pad_to={pad_to} is shorter than episode length {n}")
    scene = np.zeros(pad_to, dtype=bool)
    scene[:n] = True
    response = scene.copy()
    for i, u in enumerate(episode.utterances):
        response[i] = u.speaker != Participant.R
    return MaskSet(scene, response)


def split_folds(episodes: Sequence[Episode], k: int, seed: int) -> list[tuple[list[str], list[str]]]:
    """Partition episodes into ``k`` balanced test folds.

    Ids are sorted first, so the split does not depend on input order.
    """
    if k < 2:
        raise ConfigError(f"k must be at least 2, got {k}")
    ids = sorted(ep.episode_id for ep in episodes)
    if len(set(ids)) != len(ids):
        raise ConfigError("episode ids must be unique to split folds")
    if len(ids) < k:
        raise ConfigError(f"cannot split {len(ids)} episodes into {k} folds")
    order = np.random.default_rng(seed).permutation(len(ids))
    shuffled = [ids[i] for i in order]
    folds = []
    for part in np.array_split(np.arange(len(ids)), k):
        test = [shuffled[i] for i in part]
        test_set = set(test)
        train = [i for i in shuffled if i not in test_set]
        folds.append((train, test))
    return folds


# ----------------------------------------------------------------------- stats
@dataclass
class StatsReport:
    n_episodes: int
    n_utterances: int
    speaker_counts: dict[str, int]
    category_counts: dict[str, int]
    category_fractions: dict[str, float]
    response_counts: dict[str, int]
    multi_listener_fraction: float
    casual_fraction: float
    total_duration_s: float
    utterances_per_speaker_type: dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "n_episodes": self.n_episodes,
            "n_utterances": self.n_utterances,
            "speaker_counts": self.speaker_counts,
            "utterances_per_speaker_type": self.utterances_per_speaker_type,
            "category_counts": self.category_counts,
            "category_fractions": self.category_fractions,
            "response_counts": self.response_counts,
            "multi_listener_fraction": self.multi_listener_fraction,
            "casual_fraction": self.casual_fraction,
            "total_duration_s": self.total_duration_s,
            "total_duration_min": self.total_duration_s / 60.0,
        }


def dataset_stats(episodes: Sequence[Episode]) -> StatsReport:
    """Counts and fractions over a corpus.

    The gaze-category and multi-listener fractions are taken over human
    utterances (robot replies only address who spoke to them); the casual
    fraction over all utterances.
    """
    if not episodes:
        raise ContractError("dataset_stats needs at least one episode")
    utts = [u for ep in episodes for u in ep.utterances]
    speakers = {p.name: 0 for p in Participant}
    cats = {c.value: 0 for c in Category}
    responses = {d.name: 0 for d in Decision}
    for u in utts:
        speakers[Participant(u.speaker).name] += 1
        responses[u.response.name] += 1
        if u.is_human:
            cats[u.gaze.category.value] += 1
    n_human = sum(cats.values())
    n = len(utts)
    return StatsReport(
        n_episodes=len(episodes),
        n_utterances=n,
        speaker_counts=speakers,
        utterances_per_speaker_type={"human": n_human, "robot": speakers["R"]},
        category_counts=cats,
        category_fractions={k: (v / n_human if n_human else 0.0) for k, v in cats.items()},
        response_counts=responses,
        multi_listener_fraction=(sum(u.scene.multi_listener for u in utts if u.is_human) / n_human) if n_human else 0.0,
        casual_fraction=sum(u.is_casual for u in utts) / n,
        total_duration_s=float(sum(ep.duration_s for ep in episodes)),
    )
