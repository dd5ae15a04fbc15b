"""Cross-attention fusion, causal decoder backbone, and the scene/response heads."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .data import N_DECISIONS, N_PARTICIPANTS, Episode, Participant, build_masks
from .errors import CapacityError, ConfigError, ContractError
from .optim import ParamSet
from .seeding import derive_rng

COUPLING_MODES = ("soft", "detached", "off")


@dataclass
class ModelConfig:
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    d_v: int = 16
    d_t: int = 16
    max_seq: int = 64
    dropout: float = 0.1
    seed: int = 0
    init_std: float = 0.02
    ln_eps: float = 1e-5
    coupling: str = "soft"
    xattn_window: int | None = 1

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.d_model < 2 or self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} must be >= 2 and divisible by n_heads={self.n_heads}")
        if self.n_layers < 0 or self.max_seq < 1 or self.d_v < 1 or self.d_t < 1:
            raise ConfigError("n_layers, max_seq, d_v and d_t must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout={self.dropout} must lie in [0, 1)")
        if self.xattn_window is not None and self.xattn_window < 1:
            raise ConfigError(f"xattn_window={self.xattn_window} must be None or >= 1")
        if self.coupling not in COUPLING_MODES:
            raise ConfigError(f"coupling must be one of {COUPLING_MODES}")

    @classmethod
    def from_dict(cls, values: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**values)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class HiddenSeq:
    values: Tensor  # [B, L, d_model]
    mask: np.ndarray  # [B, L] scene mask


@dataclass
class ScenePrediction:
    speaker_logits: Tensor
    speaker_dist: Tensor
    listener_logits: Tensor
    listener_probs: Tensor


@dataclass
class ResponsePrediction:
    logits: Tensor
    response_dist: Tensor


@dataclass
class ModelOutput:
    fused: Tensor
    hidden: HiddenSeq
    scene: ScenePrediction
    response: ResponsePrediction
    attention: list[np.ndarray]


@dataclass
class Batch:
    """Episodes padded to a common length ``L``."""

    episode_ids: list[str]
    lengths: list[int]
    video: np.ndarray  # [B, L, d_v]
    text: np.ndarray  # [B, L, d_t]
    scene_mask: np.ndarray  # [B, L]
    response_mask: np.ndarray  # [B, L]
    speaker: np.ndarray  # [B, L] int, 0 at padding
    listeners: np.ndarray  # [B, L, 3]
    response: np.ndarray  # [B, L] int, 0 at padding
    prev_speaker: np.ndarray  # [B, L] int, -1 when absent
    category: np.ndarray  # [B, L] object: "C"/"LWS"/"SWL" or "" at padding

    @property
    def size(self) -> int:
        return len(self.episode_ids)


def collate(episodes: Sequence[Episode], pad_to: int | None = None) -> Batch:
    if not episodes:
        raise ContractError("cannot collate an empty batch")
    length = max(len(ep) for ep in episodes)
    pad_to = length if pad_to is None else pad_to
    b = len(episodes)
    d_v, d_t = episodes[0].d_v, episodes[0].d_t
    video = np.zeros((b, pad_to, d_v))
    text = np.zeros((b, pad_to, d_t))
    scene_mask = np.zeros((b, pad_to), dtype=bool)
    response_mask = np.zeros((b, pad_to), dtype=bool)
    speaker = np.zeros((b, pad_to), dtype=np.int64)
    listeners = np.zeros((b, pad_to, N_PARTICIPANTS))
    response = np.zeros((b, pad_to), dtype=np.int64)
    prev = np.full((b, pad_to), -1, dtype=np.int64)
    category = np.full((b, pad_to), "", dtype=object)
    for i, ep in enumerate(episodes):
        if (ep.d_v, ep.d_t) != (d_v, d_t):
            raise ContractError("all episodes in a batch must share feature sizes")
        n = len(ep)
        masks = build_masks(ep, pad_to)
        scene_mask[i] = masks.scene_mask
        response_mask[i] = masks.response_mask
        video[i, :n] = ep.video_matrix()
        text[i, :n] = ep.text_matrix()
        for j, u in enumerate(ep.utterances):
            speaker[i, j] = u.speaker
            listeners[i, j] = u.scene.listeners
            response[i, j] = int(u.response)
            category[i, j] = u.gaze.category.value
            if j > 0:
                prev[i, j] = ep.utterances[j - 1].speaker
    return Batch(
        [ep.episode_id for ep in episodes], [len(ep) for ep in episodes],
        video, text, scene_mask, response_mask, speaker, listeners, response, prev, category,
    )


def attention_mask(valid: np.ndarray, window: int | None = None) -> np.ndarray:
    """Allowed (query, key) pairs: causal, valid-to-valid; padded queries see only themselves.

    ``window`` limits each query to the ``window`` most recent positions
    (itself included); ``None`` means the full history.
    """
    b, n = valid.shape
    causal = np.tril(np.ones((n, n), dtype=bool))
    if window is not None:
        causal &= ~np.tril(causal, -window)
    allowed = causal[None] & valid[:, None, :] & valid[:, :, None]
    idx = np.arange(n)
    allowed[:, idx, idx] |= ~valid
    return allowed


class MHRIModel:
    """Shared fusion + decoder backbone feeding a scene head and a response head."""

    def __init__(self, config: ModelConfig, params: ParamSet | None = None):
        self.config = config
        self.params = params if params is not None else self._init_params()

    # ------------------------------------------------------------------ init
    def _init_params(self) -> ParamSet:
        c = self.config
        rng = derive_rng(c.seed, "init")
        d = c.d_model
        ps = ParamSet()

        def linear(name, n_in, n_out, zero=False):
            w = np.zeros((n_in, n_out)) if zero else rng.normal(0.0, c.init_std, (n_in, n_out))
            ps.add(f"{name}.w", Tensor(w))
            ps.add(f"{name}.b", Tensor(np.zeros(n_out)), decay=False)

        def norm(name):
            ps.add(f"{name}.g", Tensor(np.ones(d)), decay=False)
            ps.add(f"{name}.b", Tensor(np.zeros(d)), decay=False)

        linear("fuse.text_proj", c.d_t, d)
        linear("fuse.video_proj", c.d_v, d)
        for part in ("q", "k", "v", "o"):
            linear(f"fuse.xattn.{part}", d, d)
        norm("fuse.ln")
        linear("fuse.out", 2 * d, d)
        ps.add("pos", Tensor(rng.normal(0.0, c.init_std, (c.max_seq, d))), decay=False)
        for i in range(c.n_layers):
            norm(f"block{i}.ln1")
            linear(f"block{i}.attn.qkv", d, 3 * d)
            linear(f"block{i}.attn.proj", d, d, zero=True)
            norm(f"block{i}.ln2")
            linear(f"block{i}.mlp.fc", d, 4 * d)
            linear(f"block{i}.mlp.proj", 4 * d, d, zero=True)
        norm("ln_f")
        linear("scene.speaker", d, N_PARTICIPANTS)
        linear("scene.listener", d, N_PARTICIPANTS)
        linear("response", d + 2 * N_PARTICIPANTS, N_DECISIONS)
        return ps

    # --------------------------------------------------------------- helpers
    def _linear(self, x: Tensor, name: str) -> Tensor:
        return x @ self.params[f"{name}.w"] + self.params[f"{name}.b"]

    def _norm(self, x: Tensor, name: str) -> Tensor:
        return ag.layer_norm(x, self.params[f"{name}.g"], self.params[f"{name}.b"], self.config.ln_eps)

    def _heads(self, x: Tensor) -> Tensor:
        b, n, d = x.shape
        h = self.config.n_heads
        return x.reshape(b, n, h, d // h).transpose(0, 2, 1, 3)

    def _merge(self, x: Tensor) -> Tensor:
        b, h, n, dh = x.shape
        return x.transpose(0, 2, 1, 3).reshape(b, n, h * dh)

    def _attend(self, q: Tensor, k: Tensor, v: Tensor, allowed: np.ndarray, record: list | None) -> Tensor:
        q, k, v = self._heads(q), self._heads(k), self._heads(v)
        scale = 1.0 / math.sqrt(q.shape[-1])
        scores = (q @ k.transpose(0, 1, 3, 2)) * scale
        scores = ag.masked_fill(scores, ~allowed[:, None, :, :], -np.inf)
        weights = ag.softmax(scores, axis=-1)
        if record is not None:
            record.append(weights.data)
        return self._merge(weights @ v)

    @staticmethod
    def _batched(x) -> Tensor:
        t = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))
        if t.ndim == 2:
            t = t.reshape(1, *t.shape)
        return t

    # ---------------------------------------------------------------- stages
    def fuse(self, video_seq, text_seq, valid=None, training=False, rng=None, record=None) -> Tensor:
        """Text queries attend causally over video keys/values (within ``xattn_window``); output ``[B, L, d_model]``."""
        squeeze = np.ndim(video_seq.data if isinstance(video_seq, Tensor) else video_seq) == 2
        video, text = self._batched(video_seq), self._batched(text_seq)
        if video.shape[:2] != text.shape[:2]:
            raise ContractError(f"video {video.shape} and text {text.shape} sequence lengths differ")
        if valid is None:
            valid = np.ones(video.shape[:2], dtype=bool)
        p = self.config.dropout
        tp = self._linear(text, "fuse.text_proj")
        vp = self._linear(video, "fuse.video_proj")
        att = self._attend(
            self._linear(tp, "fuse.xattn.q"),
            self._linear(vp, "fuse.xattn.k"),
            self._linear(vp, "fuse.xattn.v"),
            attention_mask(valid, self.config.xattn_window),
            record,
        )
        att = ag.dropout(self._linear(att, "fuse.xattn.o"), p, rng, training)
        mixed = self._norm(tp + att, "fuse.ln")
        out = self._linear(ag.concat([mixed, tp], axis=-1), "fuse.out")
        return out[0] if squeeze else out

    def backbone_forward(self, fused: Tensor, mask=None, training=False, rng=None, record=None) -> HiddenSeq:
        x = self._batched(fused)
        b, n, d = x.shape
        if n > self.config.max_seq:
            raise CapacityError(f"sequence length {n} exceeds max_seq={self.config.max_seq}")
        valid = np.ones((b, n), dtype=bool) if mask is None else np.asarray(mask, dtype=bool).reshape(b, n)
        p = self.config.dropout
        x = ag.dropout(x + self.params["pos"][:n], p, rng, training)
        allowed = attention_mask(valid)
        for i in range(self.config.n_layers):
            h = self._norm(x, f"block{i}.ln1")
            qkv = self._linear(h, f"block{i}.attn.qkv")
            q, k, v = qkv[..., :d], qkv[..., d:2 * d], qkv[..., 2 * d:]
            a = self._linear(self._attend(q, k, v, allowed, record), f"block{i}.attn.proj")
            x = x + ag.dropout(a, p, rng, training)
            h = self._norm(x, f"block{i}.ln2")
            m = self._linear(ag.gelu(self._linear(h, f"block{i}.mlp.fc")), f"block{i}.mlp.proj")
            x = x + ag.dropout(m, p, rng, training)
        return HiddenSeq(self._norm(x, "ln_f"), valid)

    def predict_scene(self, hidden: HiddenSeq) -> ScenePrediction:
        h = hidden.values
        speaker_logits = self._linear(h, "scene.speaker")
        listener_logits = self._linear(h, "scene.listener")
        return ScenePrediction(
            speaker_logits,
            ag.softmax(speaker_logits, axis=-1),
            listener_logits,
            ag.sigmoid(listener_logits),
        )

    def predict_response(self, hidden: HiddenSeq, scene_soft: ScenePrediction | None,
                         coupling: str | None = None) -> ResponsePrediction:
        """Response logits from ``[hidden | speaker_dist | listener_probs]``.

        ``coupling="off"`` (or ``scene_soft=None``) feeds a zero block in place
        of the scene outputs; ``"detached"`` stops gradients into the scene head.
        """
        coupling = coupling or self.config.coupling
        h = hidden.values
        if scene_soft is None or coupling == "off":
            scene_block = Tensor(np.zeros(h.shape[:-1] + (2 * N_PARTICIPANTS,)))
        else:
            if scene_soft.speaker_dist.shape[:-1] != h.shape[:-1]:
                raise ContractError(
                    f"scene prediction {scene_soft.speaker_dist.shape} misaligned with hidden {h.shape}")
            scene_block = ag.concat([scene_soft.speaker_dist, scene_soft.listener_probs], axis=-1)
            if coupling == "detached":
                scene_block = scene_block.detach()
        logits = self._linear(ag.concat([h, scene_block], axis=-1), "response")
        return ResponsePrediction(logits, ag.softmax(logits, axis=-1))

    def forward(self, video, text, valid=None, training=False, rng=None,
                coupling: str | None = None, record_attention=False) -> ModelOutput:
        video, text = self._batched(video), self._batched(text)
        if valid is None:
            valid = np.ones(video.shape[:2], dtype=bool)
        if video.shape[1] > self.config.max_seq:
            raise CapacityError(f"sequence length {video.shape[1]} exceeds max_seq={self.config.max_seq}")
        record = [] if record_attention else None
        fused = self.fuse(video, text, valid, training, rng, record)
        hidden = self.backbone_forward(fused, valid, training, rng, record)
        scene = self.predict_scene(hidden)
        response = self.predict_response(hidden, scene, coupling)
        return ModelOutput(fused, hidden, scene, response, record or [])

    def forward_batch(self, batch: Batch, training=False, rng=None, coupling=None) -> ModelOutput:
        return self.forward(batch.video, batch.text, batch.scene_mask, training, rng, coupling)

    # ------------------------------------------------------------- inference
    def decide(self, episode: Episode, coupling: str | None = None) -> list[dict]:
        """Discrete per-utterance readout (speaker, listeners, response) for one episode."""
        with ag.no_grad():
            out = self.forward(episode.video_matrix(), episode.text_matrix(), coupling=coupling)
        return readout(out, 0, len(episode))


def readout(out: ModelOutput, row: int, n: int) -> list[dict]:
    """Discrete predictions for batch row ``row``; listener set is never empty."""
    spk = out.scene.speaker_dist.data[row, :n]
    lis = out.scene.listener_probs.data[row, :n]
    resp = out.response.response_dist.data[row, :n]
    result = []
    for j in range(n):
        speaker = int(np.argmax(spk[j]))
        bits = [int(lis[j, p] > 0.5 and p != speaker) for p in range(N_PARTICIPANTS)]
        if not any(bits):
            masked = lis[j].copy()
            masked[speaker] = -np.inf
            bits[int(np.argmax(masked))] = 1
        result.append({"speaker": speaker, "listeners": bits, "response": int(np.argmax(resp[j]))})
    return result

