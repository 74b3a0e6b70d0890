"""Mini-batch training with Adam and checkpoint persistence."""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import container
from .encoders import (
    EncoderConfig,
    EncoderParameters,
    bind_encoder_params,
    encode_sentences,
    encode_videos,
    init_encoder_params,
)
from .gmm_block import GaussianBank
from .numerics import Parameters, Tape, backpropagate
from .objectives import (
    BatchRelevance,
    LossConfig,
    SimilarityWeights,
    clip_similarity_matrix,
    loss_components,
    sample_negatives,
    total_loss,
    video_similarity_matrix,
)
from .synthetic import Corpus

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = "gmmformer-ckpt/1"


class TrainingError(RuntimeError):
    def __init__(self, msg: str, epoch: int | None = None, batch: int | None = None):
        self.epoch = epoch
        self.batch = batch
        super().__init__(msg)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 128
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    warmup_epochs: int = 0
    grad_clip: float = 1.0
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    weights: SimilarityWeights = field(default_factory=SimilarityWeights)

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 2:
            raise ValueError("batch size must be >= 2")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")

    def lr_at(self, epoch: int, step_in_epoch: int, steps_per_epoch: int) -> float:
        """Constant rate, optionally ramped linearly over the first warmup epochs."""
        if self.warmup_epochs <= 0:
            return self.lr
        progress = (epoch + (step_in_epoch + 1) / steps_per_epoch) / self.warmup_epochs
        return self.lr * min(1.0, progress)


# ---------------------------------------------------------------------------
# config (de)serialisation


def _float_out(x: float):
    return "inf" if math.isinf(x) else x


def model_config_to_dict(cfg: EncoderConfig) -> dict:
    d = asdict(cfg)
    d["bank"] = [_float_out(v) for v in cfg.bank.variances]
    return d


def model_config_from_dict(d: dict) -> EncoderConfig:
    d = dict(d)
    d["bank"] = GaussianBank(tuple(float(v) for v in d["bank"]))
    return EncoderConfig(**d)


def train_config_to_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)


def train_config_from_dict(d: dict) -> TrainConfig:
    d = dict(d)
    d["loss"] = LossConfig(**d["loss"])
    d["weights"] = SimilarityWeights(**d["weights"])
    return TrainConfig(**d)


def fingerprint(*parts: dict) -> str:
    blob = json.dumps(parts, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


# ---------------------------------------------------------------------------


class Adam:
    def __init__(self, params: Parameters, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.t = 0

    def step(self, grads: dict[str, np.ndarray], lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for k, t in self.params.items():
            g = grads[k]
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            t.data = t.data - lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm > 0 and norm > max_norm:
        s = max_norm / norm
        for k in grads:
            grads[k] = grads[k] * s
    return norm


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    epoch: int
    model_config: EncoderConfig
    train_config: TrainConfig | None = None
    version: str = CHECKPOINT_VERSION

    @property
    def fingerprint(self) -> str:
        tc = train_config_to_dict(self.train_config) if self.train_config else {}
        return fingerprint(model_config_to_dict(self.model_config), tc)

    def encoder(self) -> EncoderParameters:
        return bind_encoder_params(self.model_config, Parameters.from_arrays(self.params))

    def save(self, path: str | Path) -> Path:
        header = {
            "version": self.version,
            "epoch": self.epoch,
            "fingerprint": self.fingerprint,
            "model_config": model_config_to_dict(self.model_config),
            "train_config": train_config_to_dict(self.train_config) if self.train_config else None,
        }
        return container.write(path, container.CHECKPOINT_MAGIC, header, self.params)

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        header, arrays = container.read(path, container.CHECKPOINT_MAGIC)
        if header.get("version") != CHECKPOINT_VERSION:
            raise container.ContainerError(f"unsupported checkpoint version {header.get('version')!r}")
        tc = header.get("train_config")
        return cls(
            params=arrays,
            epoch=header["epoch"],
            model_config=model_config_from_dict(header["model_config"]),
            train_config=train_config_from_dict(tc) if tc else None,
        )


def untrained_checkpoint(model_cfg: EncoderConfig, seed: int = 0) -> Checkpoint:
    enc = init_encoder_params(model_cfg, seed)
    return Checkpoint(enc.params.snapshot(), 0, model_cfg)


@dataclass
class StepRecord:
    epoch: int
    batch: int
    loss: float
    components: dict[str, float]
    hard_negatives: bool


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    steps: list[StepRecord]

    @property
    def epoch_losses(self) -> list[float]:
        by_epoch: dict[int, list[float]] = {}
        for s in self.steps:
            by_epoch.setdefault(s.epoch, []).append(s.loss)
        return [float(np.mean(by_epoch[e])) for e in sorted(by_epoch)]

    def trace_csv(self) -> str:
        names = ["clip_triplet", "video_triplet", "clip_nce", "video_nce", "diverse"]
        lines = ["epoch,batch,loss," + ",".join(names) + ",hard_negatives"]
        for s in self.steps:
            comps = ",".join(repr(s.components[n]) for n in names)
            lines.append(f"{s.epoch},{s.batch},{s.loss!r},{comps},{int(s.hard_negatives)}")
        return "\n".join(lines) + "\n"


def batch_step(
    enc: EncoderParameters,
    corpus: Corpus,
    query_idx: np.ndarray,
    cfg: TrainConfig,
    epoch: int,
    rng: np.random.Generator,
):
    """Forward + backward on one batch of queries; returns (loss, components, grads)."""
    queries = [corpus.queries[i] for i in query_idx]
    video_rows: dict[int, int] = {}
    positives = []
    for q in queries:
        vi = corpus.video_index[q.video_id]
        positives.append(video_rows.setdefault(vi, len(video_rows)))
    batch = BatchRelevance(positives, len(video_rows))
    with Tape() as tape:
        text = encode_sentences([q.words for q in queries], enc)
        clips, videos = encode_videos([corpus.videos[vi].frames for vi in video_rows], enc)
        clip_sims = clip_similarity_matrix(text, clips)
        video_sims = video_similarity_matrix(text, videos)
        switch = cfg.loss.hard_negative_epoch
        clip_neg = sample_negatives(batch, clip_sims.data, epoch, switch, rng)
        video_neg = sample_negatives(batch, video_sims.data, epoch, switch, rng)
        comps = loss_components(text, clip_sims, video_sims, batch, clip_neg, video_neg, cfg.loss)
        loss = total_loss(comps, cfg.loss)
    value = float(loss.data)
    if not math.isfinite(value):
        return value, comps.values(), None
    grads = backpropagate(loss, tape, wrt=enc.params.values())
    return value, comps.values(), {k: grads[t] for k, t in enc.params.items()}


def _batches(order: np.ndarray, size: int, corpus: Corpus) -> list[np.ndarray]:
    out = []
    for start in range(0, len(order), size):
        idx = order[start : start + size]
        if len({corpus.queries[i].video_id for i in idx}) >= 2:
            out.append(idx)
    return out


def train(
    corpus: Corpus,
    cfg: TrainConfig,
    model_cfg: EncoderConfig,
    init: Checkpoint | None = None,
) -> TrainResult:
    """Minimise the weighted loss sum; deterministic for a fixed ``cfg.seed``."""
    if len(corpus.videos) < 2:
        raise TrainingError("training needs at least two videos")
    if init is None:
        enc = init_encoder_params(model_cfg, cfg.seed)
    else:
        enc = init.encoder()
    opt = Adam(enc.params, cfg.beta1, cfg.beta2, cfg.adam_eps)
    rng = np.random.default_rng([cfg.seed, 1])
    steps: list[StepRecord] = []
    n_queries = len(corpus.queries)
    for epoch in range(cfg.epochs):
        batches = _batches(rng.permutation(n_queries), cfg.batch_size, corpus)
        for bi, idx in enumerate(batches):
            value, comps, grads = batch_step(enc, corpus, idx, cfg, epoch, rng)
            if grads is None:
                raise TrainingError(f"non-finite loss {value} at epoch {epoch}, batch {bi}", epoch, bi)
            clip_global_norm(grads, cfg.grad_clip)
            opt.step(grads, cfg.lr_at(epoch, bi, len(batches)))
            steps.append(StepRecord(epoch, bi, value, comps, epoch >= cfg.loss.hard_negative_epoch))
        log.info("epoch %d mean loss %.6f", epoch, np.mean([s.loss for s in steps if s.epoch == epoch]))
    ckpt = Checkpoint(enc.params.snapshot(), cfg.epochs, model_cfg, cfg)
    return TrainResult(ckpt, steps)
