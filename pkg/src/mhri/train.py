"""Joint training, k-fold cross-validation and training logs."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from .autograd import Tensor
from .checkpoint import save_checkpoint
from .data import Episode, split_folds
from .errors import ConfigError, ContractError, DivergenceError
from .metrics import MetricsReport, evaluate_model, mean_reports
from .model import Batch, MHRIModel, ModelConfig, collate
from .optim import adamw_step
from .response import ResponsePriorParams, response_loss, response_prior_table
from .scene import LossTerms, ScenePriorParams, scene_loss, scene_prior_table
from .seeding import derive_rng, derive_seed

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class AblationFlags:
    multitask: bool = True
    kl_s: bool = True
    kl_r: bool = True


@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 8
    epochs: int = 30
    dropout: float = 0.1
    lambda_s: float = 0.01
    lambda_r: float = 0.01
    k_folds: int = 6
    seed: int = 0
    multitask: bool = True
    kl_s: bool = True
    kl_r: bool = True
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    weight_decay: float = 0.01
    clip_norm: float | None = None
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    max_seq: int = 64
    init_std: float = 0.02
    coupling: str = "soft"
    xattn_window: int | None = 1
    alpha_repeat: float = 0.1
    p_respond_addressed: float = 0.8
    p_none_addressed: float = 0.1
    p_none_unaddressed: float = 0.9
    beta_self_turn: float = 0.5

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        self.validate()

    def validate(self) -> None:
        if not self.lr >= 0 or not math.isfinite(self.lr):
            raise ConfigError(f"lr={self.lr} must be a finite non-negative number")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")
        if self.k_folds < 2:
            raise ConfigError("k_folds must be at least 2")
        if self.lambda_s < 0 or self.lambda_r < 0:
            raise ConfigError("lambda_s and lambda_r must be non-negative")
        # constructing the parameter objects validates their ranges
        self.scene_prior_params()
        self.response_prior_params()

    @property
    def flags(self) -> AblationFlags:
        return AblationFlags(self.multitask, self.kl_s, self.kl_r)

    def with_flags(self, flags: AblationFlags, **changes) -> "TrainConfig":
        values = self.to_dict()
        values.update(multitask=flags.multitask, kl_s=flags.kl_s, kl_r=flags.kl_r, **changes)
        return TrainConfig.from_dict(values)

    def model_config(self, d_v: int, d_t: int, seed: int) -> ModelConfig:
        return ModelConfig(
            d_model=self.d_model, n_heads=self.n_heads, n_layers=self.n_layers, d_v=d_v, d_t=d_t,
            max_seq=self.max_seq, dropout=self.dropout, seed=seed, init_std=self.init_std,
            coupling=self.coupling if self.multitask else "off", xattn_window=self.xattn_window,
        )

    def scene_prior_params(self) -> ScenePriorParams:
        return ScenePriorParams(self.alpha_repeat)

    def response_prior_params(self) -> ResponsePriorParams:
        return ResponsePriorParams(self.p_respond_addressed, self.p_none_addressed,
                                   self.p_none_unaddressed, self.beta_self_turn)

    @classmethod
    def from_dict(cls, values: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**values)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


@dataclass
class FoldResult:
    fold_index: int
    epochs: list[dict]
    metrics: MetricsReport | None
    checkpoint_path: str | None
    train_ids: list[str]
    test_ids: list[str] = field(default_factory=list)


@dataclass
class CVResult:
    folds: list[FoldResult]
    aggregate: MetricsReport

    def report(self) -> dict:
        return {
            "aggregate": self.aggregate.to_dict(),
            "folds": [
                {"fold": f.fold_index, "test_ids": f.test_ids, "metrics": f.metrics.to_dict() if f.metrics else None,
                 "final_epoch": f.epochs[-1]}
                for f in self.folds
            ],
        }


# ----------------------------------------------------------------- objective
def joint_loss(scene: LossTerms | None, response: LossTerms, flags: AblationFlags = AblationFlags()) -> Tensor:
    """``L_s + L_r``; without multitask only ``L_r``. KL terms dropped per ``flags``."""
    r = response.ce if not flags.kl_r or response.kl is None else response.total
    if not flags.multitask or scene is None:
        return r
    s = scene.ce if not flags.kl_s or scene.kl is None else scene.total
    return s + r


@dataclass
class TrainBatch:
    batch: Batch
    scene_priors: np.ndarray
    response_priors: np.ndarray


def prepare_batch(episodes: Sequence[Episode], config: TrainConfig) -> TrainBatch:
    b = collate(episodes)
    return TrainBatch(
        b,
        scene_prior_table(b.prev_speaker, config.scene_prior_params()),
        response_prior_table(b.speaker, b.listeners, b.prev_speaker, config.response_prior_params()),
    )


def batch_objective(model: MHRIModel, tb: TrainBatch, config: TrainConfig, training: bool = False,
                    rng: np.random.Generator | None = None) -> tuple[Tensor, dict]:
    """Forward one batch and return the joint loss plus logged components.

    Components excluded by the ablation flags are not computed and log as 0.
    """
    flags = config.flags
    b = tb.batch
    out = model.forward_batch(b, training=training, rng=rng)
    scene = None
    if flags.multitask:
        scene = scene_loss(out.scene, b.speaker, b.listeners, b.scene_mask, tb.scene_priors,
                           config.lambda_s, use_kl=flags.kl_s)
    response = response_loss(out.response, b.response, b.response_mask, tb.response_priors,
                             config.lambda_r, use_kl=flags.kl_r)
    total = joint_loss(scene, response, flags)
    ce_s, kl_s = scene.components() if scene is not None else (0.0, 0.0)
    ce_r, kl_r = response.components()
    parts = {"l_ce_s": ce_s, "l_kl_s": kl_s, "l_ce_r": ce_r, "l_kl_r": kl_r, "total": float(total.data)}
    return total, parts


# ------------------------------------------------------------------ training
def train_fold(
    train_episodes: Sequence[Episode],
    config: TrainConfig,
    fold_index: int = 0,
    seed: int | None = None,
    checkpoint_path=None,
    log_path=None,
    audit: Callable[[list[str]], None] | None = None,
) -> tuple[FoldResult, MHRIModel]:
    """Train a freshly initialised model on ``train_episodes``."""
    if not train_episodes:
        raise ContractError("train_fold needs at least one episode")
    seed = config.seed if seed is None else seed
    d_v, d_t = train_episodes[0].d_v, train_episodes[0].d_t
    model = MHRIModel(config.model_config(d_v, d_t, seed))
    shuffle_rng = derive_rng(seed, "shuffle")
    dropout_rng = derive_rng(seed, "dropout")
    # canonical order so the result does not depend on how episodes were passed in
    episodes = sorted(train_episodes, key=lambda ep: ep.episode_id)
    epochs = []
    log_fh = open(log_path, "a", encoding="utf-8") if log_path else None
    try:
        with threadpool_limits(limits=1):
            for epoch in range(1, config.epochs + 1):
                order = shuffle_rng.permutation(len(episodes))
                sums = dict.fromkeys(("l_ce_s", "l_kl_s", "l_ce_r", "l_kl_r", "total"), 0.0)
                n_batches = 0
                for bi, start in enumerate(range(0, len(order), config.batch_size)):
                    chunk = [episodes[i] for i in order[start:start + config.batch_size]]
                    if audit is not None:
                        audit([ep.episode_id for ep in chunk])
                    tb = prepare_batch(chunk, config)
                    loss, parts = batch_objective(model, tb, config, training=True, rng=dropout_rng)
                    if not math.isfinite(parts["total"]):
                        raise DivergenceError(f"non-finite loss at epoch {epoch}, batch {bi}")
                    model.params.zero_grad()
                    loss.backward()
                    for t in model.params.params.values():
                        # parameters outside the active objective (e.g. scene head when single-task)
                        if t.grad is None:
                            t.grad = np.zeros_like(t.data)
                    adamw_step(model.params, config.lr, config.betas, config.adam_eps,
                               config.weight_decay, config.clip_norm)
                    for k in sums:
                        sums[k] += parts[k]
                    n_batches += 1
                row = {"fold": fold_index, "epoch": epoch, **{k: v / n_batches for k, v in sums.items()}}
                epochs.append(row)
                log.debug("fold %d epoch %d total %.4f", fold_index, epoch, row["total"])
                if log_fh:
                    log_fh.write(json.dumps(row) + "\n")
    finally:
        if log_fh:
            log_fh.close()
    if checkpoint_path:
        save_checkpoint(model.params, model.config, checkpoint_path, config.to_dict(),
                        {"fold": fold_index, "train_ids": [ep.episode_id for ep in episodes]})
    result = FoldResult(fold_index, epochs, None, str(checkpoint_path) if checkpoint_path else None,
                        [ep.episode_id for ep in episodes])
    return result, model


def _run_fold(episodes, config: TrainConfig, index: int, train_ids, test_ids, out_dir) -> FoldResult:
    by_id = {ep.episode_id: ep for ep in episodes}
    test_set = set(test_ids)

    def audit(ids):
        leaked = test_set.intersection(ids)
        if leaked:
            raise ContractError(f"fold {index}: test episodes {sorted(leaked)} reached the optimizer")

    ckpt = Path(out_dir) / f"fold{index}.ckpt" if out_dir else None
    result, model = train_fold(
        [by_id[k] for k in train_ids], config, fold_index=index,
        seed=derive_seed(config.seed, "fold", index), checkpoint_path=ckpt, audit=audit,
    )
    result.test_ids = list(test_ids)
    result.metrics = evaluate_model(model, [by_id[k] for k in sorted(test_ids)])
    log.info("fold %d: held-out average accuracy %s", index, result.metrics.acc_average)
    return result


def cross_validate(episodes: Sequence[Episode], config: TrainConfig, out_dir=None,
                   workers: int | None = None) -> CVResult:
    """k-fold CV: fresh model per fold, fold-derived seeds, unweighted mean of fold metrics.

    ``workers > 1`` trains folds in separate processes; results are identical
    to the sequential run since every fold owns its seeds.
    """
    episodes = list(episodes)
    splits = split_folds(episodes, config.k_folds, config.seed)
    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    jobs = [(episodes, config, i, tr, te, out) for i, (tr, te) in enumerate(splits)]
    if workers and workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=workers) as pool:
            folds = list(pool.map(_run_fold, *zip(*jobs)))
    else:
        folds = [_run_fold(*job) for job in jobs]
    if out:
        write_log(out / "train_log.jsonl", [row for f in folds for row in f.epochs])
    return CVResult(folds, mean_reports([f.metrics for f in folds]))


def write_log(path, rows: Sequence[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row) + "\n")


def read_log(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]
