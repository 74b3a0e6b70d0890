"""Flat run configuration, dataset profiles and fingerprints."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Iterable

from .encoders import EncoderConfig
from .gmm_block import GaussianBank
from .objectives import LossConfig, SimilarityWeights
from .synthetic import CorpusConfig, edges_from_cuts
from .training import TrainConfig


class ConfigError(ValueError):
    pass


# hyper-parameters per dataset (learning rate, margins, loss weights, sentence length)
PROFILES: dict[str, dict[str, Any]] = {
    "tvr": {
        "lr": 3e-4, "margin": 0.1, "div_margin": 0.15, "lambda1": 5e-2, "lambda2": 4e-2, "lambda3": 1e-3,
        "max_words": 30,
    },
    "activitynet": {
        "lr": 2.5e-4, "margin": 0.2, "div_margin": 0.2, "lambda1": 2e-2, "lambda2": 4e-2, "lambda3": 1.5e-2,
        "max_words": 64,
    },
    "charades": {
        "lr": 2.5e-4, "margin": 0.2, "div_margin": 0.15, "lambda1": 2e-2, "lambda2": 2e-2, "lambda3": 5e-3,
        "max_words": 30,
    },
    # small enough for a laptop core: same objectives, narrower model, short clips
    "desk": {"dim": 32, "d_in": 32, "d_word": 32, "frames_min": 16, "frames_max": 48, "moments_min": 2},
}


@dataclass
class RunConfig:
    profile: str | None = None
    # corpus
    n_videos: int = 200
    frames_min: int = 24
    frames_max: int = 64
    moments_min: int = 1
    moments_max: int = 4
    queries_per_moment: int = 1
    words_min: int = 3
    words_max: int = 8
    min_moment_len: int = 2
    d_in: int = 64
    d_word: int = 48
    noise: float = 0.5
    # model
    dim: int = 384
    n_heads: int = 4
    clip_len: int = 32
    max_frames: int = 128
    max_words: int = 30
    n_layers: int = 2
    variances: list = field(default_factory=lambda: [0.5, 1.0, 5.0, "inf"])
    window_mode: str = "normalized"
    variance_scale: float = 1.0
    # training
    epochs: int = 100
    batch_size: int = 128
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    warmup_epochs: int = 0
    grad_clip: float = 1.0
    seed: int = 0
    # objectives
    margin: float = 0.1
    lambda1: float = 5e-2
    lambda2: float = 4e-2
    lambda3: float = 1e-3
    div_scale: float = 32.0
    div_margin: float = 0.15
    hard_negative_epoch: int = 20
    nce_transform: str = "exp"
    alpha_v: float = 0.3
    alpha_c: float = 0.7
    # evaluation / benchmark
    mv_cuts: list = field(default_factory=lambda: [0.25, 0.5])
    bench_sizes: list = field(default_factory=lambda: [500, 1000, 1500, 2000, 2500])
    bench_trials: int = 50
    # paths
    corpus_dir: str | None = None
    checkpoint: str | None = None
    report_dir: str | None = None

    PATH_FIELDS = ("corpus_dir", "checkpoint", "report_dir")

    # -- construction -------------------------------------------------------

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    @classmethod
    def build(cls, layers: Iterable[dict[str, Any]]) -> "RunConfig":
        """Apply defaults, then each layer in order (last writer wins).

        A ``profile`` key anywhere is applied first, before any other key.
        """
        merged: dict[str, Any] = {}
        for layer in layers:
            unknown = sorted(set(layer) - set(cls.field_names()))
            if unknown:
                raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
            merged.update(layer)
        base: dict[str, Any] = {}
        profile = merged.get("profile")
        if profile is not None:
            if profile not in PROFILES:
                raise ConfigError(f"unknown profile {profile!r}; choose from {sorted(PROFILES)}")
            base.update(PROFILES[profile])
        base.update(merged)
        cfg = cls(**base)
        cfg.validate()
        return cfg

    @classmethod
    def from_file(cls, path: str | Path | None, overrides: Iterable[dict[str, Any]] = ()) -> "RunConfig":
        layers = []
        if path is not None:
            try:
                data = json.loads(Path(path).read_text())
            except (OSError, json.JSONDecodeError) as exc:
                raise ConfigError(f"cannot read config {path}: {exc}") from None
            if not isinstance(data, dict):
                raise ConfigError("config file must hold a JSON object")
            layers.append(data)
        layers.extend(overrides)
        return cls.build(layers)

    def validate(self) -> None:
        try:
            self.corpus_config()
            self.model_config()
            self.train_config()
            edges_from_cuts(self.mv_cuts)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None

    # -- views --------------------------------------------------------------

    def bank(self) -> GaussianBank:
        return GaussianBank(tuple(math.inf if str(v).lower() in ("inf", "infinity") else float(v) for v in self.variances))

    def corpus_config(self) -> CorpusConfig:
        return CorpusConfig(
            n_videos=self.n_videos,
            frames_range=(self.frames_min, self.frames_max),
            moments_range=(self.moments_min, self.moments_max),
            queries_per_moment=self.queries_per_moment,
            words_range=(self.words_min, self.words_max),
            min_moment_len=self.min_moment_len,
            d_in=self.d_in,
            d_word=self.d_word,
            noise=self.noise,
            seed=self.seed,
        )

    def model_config(self) -> EncoderConfig:
        return EncoderConfig(
            d_word=self.d_word,
            d_in=self.d_in,
            dim=self.dim,
            n_heads=self.n_heads,
            clip_len=self.clip_len,
            max_frames=self.max_frames,
            max_words=self.max_words,
            n_layers=self.n_layers,
            bank=self.bank(),
            window_mode=self.window_mode,
            variance_scale=self.variance_scale,
        )

    def loss_config(self) -> LossConfig:
        return LossConfig(
            margin=self.margin,
            lambda1=self.lambda1,
            lambda2=self.lambda2,
            lambda3=self.lambda3,
            div_scale=self.div_scale,
            div_margin=self.div_margin,
            hard_negative_epoch=self.hard_negative_epoch,
            nce_transform=self.nce_transform,
        )

    def weights(self) -> SimilarityWeights:
        return SimilarityWeights(self.alpha_v, self.alpha_c)

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            lr=self.lr,
            beta1=self.beta1,
            beta2=self.beta2,
            adam_eps=self.adam_eps,
            warmup_epochs=self.warmup_epochs,
            grad_clip=self.grad_clip,
            seed=self.seed,
            loss=self.loss_config(),
            weights=self.weights(),
        )

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    def fingerprint(self) -> str:
        """Content hash over every non-path field."""
        d = {k: v for k, v in self.to_dict().items() if k not in self.PATH_FIELDS}
        blob = json.dumps(d, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def parse_assignment(text: str) -> dict[str, Any]:
    """``key=value`` with a JSON value (bare strings allowed)."""
    if "=" not in text:
        raise ConfigError(f"--set expects key=value, got {text!r}")
    key, raw = text.split("=", 1)
    key = key.strip()
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return {key: value}
