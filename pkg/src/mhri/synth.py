"""Synthetic two-human-plus-robot episodes with recoverable labels.

Feature layout (per utterance):

* video: ``[speaker one-hot (3) | gaze one-hot or zeros (3) | noise]``
* text:  ``[act one-hot (4) | addressee cue (3) | noise]``

Gaussian noise of width ``noise_sigma`` is added to every coordinate. The
addressee cue carries the true listener bits with probability
``p_text_cue`` and is all zeros otherwise.

The response label is a deterministic function of (listeners, act) so that a
noiseless, fully cued corpus is decodable without error:

* robot not addressed -> None
* act ``exclamation`` -> None (rhetorical remark at the robot)
* multi-listener and act ``chat`` -> RespondBoth
* otherwise -> respond to the speaker
"""

from __future__ import annotations

import enum
import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .data import (
    Category,
    Decision,
    Episode,
    GazeInfo,
    Participant,
    SceneLabel,
    UtteranceRecord,
    categorize_alignment,
    respond_to,
)
from .errors import ConfigError


class Act(enum.IntEnum):
    QUESTION = 0
    REPLY = 1
    EXCLAMATION = 2
    CHAT = 3


N_ACTS = 4
SPEAKER_BLOCK = slice(0, 3)
GAZE_BLOCK = slice(3, 6)
ACT_BLOCK = slice(0, 4)
CUE_BLOCK = slice(4, 7)

# fixed scenario knobs
P_EXCEPTION = 0.05
P_BOTH_GIVEN_MULTI = 0.5
P_ROBOT_ADDRESSED = {False: 0.75, True: 0.25}  # keyed by is_casual
P_REPEAT_SPEAKER = 0.25
SESSION_SECONDS = 180.0


@dataclass
class SynthConfig:
    n_episodes: int = 60
    utterances_per_episode: tuple[int, int] = (15, 22)
    d_v: int = 16
    d_t: int = 16
    p_consistency: float = 0.75
    p_lws: float = 0.15
    p_swl: float = 0.10
    p_multi_listener: float = 0.10
    p_casual: float = 0.167
    p_text_cue: float = 0.9
    noise_sigma: float = 0.3
    seed: int = 42

    def __post_init__(self):
        self.utterances_per_episode = tuple(int(x) for x in self.utterances_per_episode)
        self.validate()

    def validate(self) -> None:
        probs = {
            "p_consistency": self.p_consistency,
            "p_lws": self.p_lws,
            "p_swl": self.p_swl,
            "p_multi_listener": self.p_multi_listener,
            "p_casual": self.p_casual,
            "p_text_cue": self.p_text_cue,
        }
        for name, value in probs.items():
            if not 0.0 <= value <= 1.0:
                raise ConfigError(f"{name}={value} is not a probability")
        total = self.p_consistency + self.p_lws + self.p_swl
        if abs(total - 1.0) > 1e-9:
            raise ConfigError(f"category probabilities sum to {total}, expected 1")
        if self.p_lws > 1.0 - self.p_multi_listener + 1e-12:
            # a multi-listener utterance leaves no non-listener to look at
            raise ConfigError("p_lws cannot exceed 1 - p_multi_listener")
        if self.d_v < 8 or self.d_t < 8:
            raise ConfigError(f"d_v and d_t must be >= 8 (got {self.d_v}, {self.d_t})")
        lo, hi = self.utterances_per_episode
        if lo < 1 or hi < lo:
            raise ConfigError(f"bad utterances_per_episode range {self.utterances_per_episode}")
        if self.n_episodes < 0:
            raise ConfigError("n_episodes must be non-negative")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be non-negative")

    @classmethod
    def from_dict(cls, values: dict) -> "SynthConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ConfigError(f"unknown synth config keys: {sorted(unknown)}")
        return cls(**values)

    @classmethod
    def from_file(cls, path) -> "SynthConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["utterances_per_episode"] = list(self.utterances_per_episode)
        return d


@dataclass
class TurnState:
    previous_speaker: int | None = None
    pending_robot_reply: bool = False


def episode_rng(seed: int, episode_index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, episode_index]))


def emit_features(
    scene: SceneLabel,
    gaze: GazeInfo,
    act: int,
    rng: np.random.Generator,
    config: SynthConfig,
) -> tuple[np.ndarray, np.ndarray]:
    video = np.zeros(config.d_v)
    video[SPEAKER_BLOCK][scene.speaker] = 1.0
    if gaze.target is not None:
        video[GAZE_BLOCK][gaze.target] = 1.0
    text = np.zeros(config.d_t)
    text[ACT_BLOCK][act] = 1.0
    cue = rng.random() < config.p_text_cue
    if cue:
        text[CUE_BLOCK] = scene.listeners
    video += rng.normal(0.0, config.noise_sigma, config.d_v) if config.noise_sigma else 0.0
    text += rng.normal(0.0, config.noise_sigma, config.d_t) if config.noise_sigma else 0.0
    return video, text


def decide_response(scene: SceneLabel, act: int) -> Decision:
    """Ground-truth response rule (see module docstring)."""
    if scene.speaker == Participant.R or not scene.robot_addressed:
        return Decision.NONE
    if act == Act.EXCLAMATION:
        return Decision.NONE
    if scene.multi_listener and act == Act.CHAT:
        return Decision.RESPOND_BOTH
    return respond_to(scene.speaker)


def _draw_category(rng, config: SynthConfig, multi: bool) -> Category:
    # conditional mix that keeps the marginals equal to the configured ones
    pc, pl, ps, pm = config.p_consistency, config.p_lws, config.p_swl, config.p_multi_listener
    rest = pc + ps
    if multi:
        probs = (pc / rest, 0.0, ps / rest) if rest > 0 else (1.0, 0.0, 0.0)
    else:
        lws = pl / (1.0 - pm) if pm < 1.0 else 0.0
        probs = (pc * (1 - lws) / rest, lws, ps * (1 - lws) / rest) if rest > 0 else (0.0, 1.0, 0.0)
    u = rng.random()
    if u < probs[0]:
        return Category.CONSISTENCY
    if u < probs[0] + probs[1]:
        return Category.LOOK_WITHOUT_SPEAK
    return Category.SPEAK_WITHOUT_LOOK


def _gaze_target(rng, speaker: int, listeners, category: Category) -> int | None:
    if category is Category.SPEAK_WITHOUT_LOOK:
        return None
    if category is Category.CONSISTENCY:
        options = [p for p in range(3) if listeners[p]]
    else:
        options = [p for p in range(3) if not listeners[p] and p != speaker]
    return int(options[rng.integers(len(options))])


def _human_turn(rng, config: SynthConfig, state: TurnState):
    prev = state.previous_speaker
    if prev is None or prev == Participant.R:
        speaker = int(rng.integers(2))
    elif rng.random() < P_REPEAT_SPEAKER:
        speaker = prev
    else:
        speaker = 1 - prev
    other = 1 - speaker
    casual = bool(rng.random() < config.p_casual)
    multi = bool(rng.random() < config.p_multi_listener)
    listeners = [0, 0, 0]
    if multi:
        listeners[other] = listeners[Participant.R] = 1
    elif rng.random() < P_ROBOT_ADDRESSED[casual]:
        listeners[Participant.R] = 1
    else:
        listeners[other] = 1
    scene = SceneLabel(speaker, tuple(listeners))
    category = _draw_category(rng, config, multi)
    gaze = GazeInfo(_gaze_target(rng, speaker, scene.listeners, category), category)

    if scene.robot_addressed:
        if rng.random() < P_EXCEPTION:
            act = Act.EXCLAMATION
        elif multi and rng.random() < P_BOTH_GIVEN_MULTI:
            act = Act.CHAT
        elif multi:
            act = Act.QUESTION
        elif casual:
            act = Act.CHAT if rng.random() < 0.7 else Act.QUESTION
        else:
            act = Act.QUESTION
    else:
        weights = [0.1, 0.2, 0.1, 0.6] if casual else [0.2, 0.45, 0.25, 0.1]
        act = Act(int(rng.choice(N_ACTS, p=weights)))
    return scene, gaze, int(act), casual


def generate_episode(config: SynthConfig, episode_index: int, rng: np.random.Generator | None = None) -> Episode:
    if rng is None:
        rng = episode_rng(config.seed, episode_index)
    lo, hi = config.utterances_per_episode
    n = int(rng.integers(lo, hi + 1))
    slot = SESSION_SECONDS / ((lo + hi) / 2.0)
    state = TurnState()
    last_human: tuple[int, Decision] | None = None
    clock = 0.0
    utterances = []
    for i in range(n):
        if state.pending_robot_reply:
            addressee, decision = last_human
            listeners = [1, 1, 0] if decision is Decision.RESPOND_BOTH else [int(p == addressee) for p in range(3)]
            scene = SceneLabel(int(Participant.R), tuple(listeners))
            gaze = GazeInfo(addressee, categorize_alignment(addressee, listeners))
            act = int(Act.REPLY)
            casual = bool(rng.random() < config.p_casual)
            response = Decision.NONE
            state.pending_robot_reply = False
        else:
            scene, gaze, act, casual = _human_turn(rng, config, state)
            response = decide_response(scene, act)
            last_human = (scene.speaker, response)
            state.pending_robot_reply = response is not Decision.NONE
        state.previous_speaker = scene.speaker
        video, text = emit_features(scene, gaze, act, rng, config)
        length = slot * float(rng.uniform(0.5, 0.9))
        start = round(clock, 3)
        end = round(clock + length, 3)
        clock = end + slot * float(rng.uniform(0.1, 0.3))
        utterances.append(
            UtteranceRecord(
                index=i,
                video_feat=tuple(float(x) for x in video),
                text_feat=tuple(float(x) for x in text),
                scene=scene,
                gaze=gaze,
                response=response,
                is_casual=casual,
                start_s=start,
                end_s=end,
            )
        )
    return Episode(f"ep{episode_index:04d}", config.d_v, config.d_t, tuple(utterances))


def generate_dataset(config: SynthConfig) -> list[Episode]:
    """Episodes ``0..n_episodes-1``, each from its own seed derived from ``(seed, index)``."""
    config.validate()
    return [generate_episode(config, i) for i in range(config.n_episodes)]


def oracle_decode(episode: Episode) -> list[tuple[int, tuple[int, int, int], Decision]]:
    """Decode (speaker, listeners, response) from features alone by block argmax.

    Exact on noiseless, fully cued corpora; used as an upper-bound harness.
    """
    out = []
    for u in episode.utterances:
        v = np.asarray(u.video_feat)
        t = np.asarray(u.text_feat)
        speaker = int(np.argmax(v[SPEAKER_BLOCK]))
        cue = t[CUE_BLOCK]
        listeners = tuple(int(x > 0.5) for x in cue)
        if not any(listeners):
            # no cue: fall back to gaze when present, else a non-speaker guess
            gz = v[GAZE_BLOCK]
            target = int(np.argmax(gz)) if gz.max() > 0.5 else (2 if speaker != 2 else 0)
            listeners = tuple(int(p == target) for p in range(3))
        act = int(np.argmax(t[ACT_BLOCK]))
        scene = SceneLabel(speaker, listeners)
        out.append((speaker, listeners, decide_response(scene, act)))
    return out
