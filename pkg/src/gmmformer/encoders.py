"""Sentence encoder and the two-branch (clip / video) video encoder.

All encoders work on padded batches: a ``(B, M, d)`` array plus a ``(B, M)``
boolean mask of real rows.  Padded rows are carried through the blocks but
never attended to and never pooled.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import numerics as nx
from .gmm_block import (
    BlockParameters,
    GaussianBank,
    block_params_from,
    gaussian_block_forward,
    gmmformer_block_forward,
    init_block_params,
    uniform_affine,
)
from .numerics import Parameters, Tensor

EMBED_INIT_STD = 0.02


@dataclass(frozen=True)
class EncoderConfig:
    d_word: int
    d_in: int
    dim: int = 384
    n_heads: int = 4
    clip_len: int = 32
    max_frames: int = 128
    max_words: int = 30
    n_layers: int = 2
    bank: GaussianBank = field(default_factory=GaussianBank)
    window_mode: str = "normalized"
    variance_scale: float = 1.0

    def __post_init__(self):
        if self.dim % self.n_heads:
            raise ValueError(f"head count {self.n_heads} does not divide dim {self.dim}")
        for name in ("d_word", "d_in", "dim", "clip_len", "max_frames", "max_words", "n_layers"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")


@dataclass
class Branch:
    fc_w: Tensor
    fc_b: Tensor
    pos: Tensor
    layers: list[list[BlockParameters]]
    pool: Tensor | None = None


@dataclass
class EncoderParameters:
    config: EncoderConfig
    params: Parameters
    text: Branch
    clip: Branch
    video: Branch


def _branch_layout(cfg: EncoderConfig):
    """(name, input dim, positional length, members per layer, layer count, pooled)."""
    k = len(cfg.bank)
    return [
        ("text", cfg.d_word, cfg.max_words, 1, 1, True),
        ("clip", cfg.d_in, cfg.clip_len, k, cfg.n_layers, False),
        ("video", cfg.d_in, cfg.max_frames, k, cfg.n_layers, True),
    ]


def init_encoder_params(cfg: EncoderConfig, seed: int = 0) -> EncoderParameters:
    rng = np.random.default_rng(seed)
    params = Parameters()
    branches = {}
    for name, fan_in, pos_len, members, n_layers, pooled in _branch_layout(cfg):
        fc_w = params.add(f"{name}.fc.w", uniform_affine(rng, fan_in, cfg.dim))
        bound = 1.0 / math.sqrt(fan_in)
        fc_b = params.add(f"{name}.fc.b", rng.uniform(-bound, bound, size=cfg.dim))
        pos = params.add(f"{name}.pos", rng.normal(0.0, EMBED_INIT_STD, size=(pos_len, cfg.dim)))
        layers = [
            [init_block_params(params, f"{name}.layer{li}.member{mi}", cfg.dim, cfg.n_heads, rng) for mi in range(members)]
            for li in range(n_layers)
        ]
        pool = params.add(f"{name}.pool", rng.normal(0.0, EMBED_INIT_STD, size=cfg.dim)) if pooled else None
        branches[name] = Branch(fc_w, fc_b, pos, layers, pool)
    return EncoderParameters(cfg, params, **branches)


def bind_encoder_params(cfg: EncoderConfig, params: Parameters) -> EncoderParameters:
    """Wrap an existing parameter registry (e.g. loaded from disk)."""
    branches = {}
    for name, _, _, members, n_layers, pooled in _branch_layout(cfg):
        layers = [
            [block_params_from(params, f"{name}.layer{li}.member{mi}", cfg.n_heads) for mi in range(members)]
            for li in range(n_layers)
        ]
        branches[name] = Branch(
            params[f"{name}.fc.w"], params[f"{name}.fc.b"], params[f"{name}.pos"], layers,
            params[f"{name}.pool"] if pooled else None,
        )
    return EncoderParameters(cfg, params, **branches)


# ---------------------------------------------------------------------------


def attention_pool(features: Tensor, w: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax(w . rows)-weighted sum of rows; ``(..., M, d) -> (..., d)``."""
    *lead, m, d = features.shape
    if m == 0:
        raise ValueError("attention_pool needs at least one row")
    logits = nx.reshape(features @ nx.reshape(w, (d, 1)), (*lead, 1, m))
    mask = None if mask is None else np.asarray(mask, dtype=bool)[..., None, :]
    weights = nx.softmax(logits, mask=mask)
    return nx.reshape(weights @ features, (*lead, d))


def _group_bounds(n: int, target: int) -> np.ndarray:
    # boundaries rounded half-to-even; group sizes then differ by at most one
    return np.rint(np.arange(target + 1) * n / target).astype(int)


def downsample_mean_pool(frames: np.ndarray, target: int) -> np.ndarray:
    """Mean-pool ``frames`` into ``target`` contiguous groups; shorter input is returned as is."""
    frames = np.asarray(frames, dtype=np.float64)
    if target < 1:
        raise ValueError(f"target length must be >= 1, got {target}")
    if frames.ndim != 2 or frames.shape[0] == 0:
        raise ValueError(f"expected a non-empty (frames, dim) matrix, got shape {frames.shape}")
    n = frames.shape[0]
    if n <= target:
        return frames
    b = _group_bounds(n, target)
    csum = np.concatenate([np.zeros((1, frames.shape[1])), np.cumsum(frames, axis=0)])
    return (csum[b[1:]] - csum[b[:-1]]) / np.diff(b)[:, None]


def clip_branch_input(frames: np.ndarray, clip_len: int) -> np.ndarray:
    """Exactly ``clip_len`` rows: mean-pooled when longer, index-repeated when shorter."""
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 2 or frames.shape[0] == 0:
        raise ValueError(f"expected a non-empty (frames, dim) matrix, got shape {frames.shape}")
    n = frames.shape[0]
    if n >= clip_len:
        return downsample_mean_pool(frames, clip_len)
    return frames[(np.arange(clip_len) * n) // clip_len]


def pad_batch(seqs: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """Stack variable-length ``(M_i, d)`` arrays into ``(B, max M, d)`` plus a row mask."""
    if not seqs:
        raise ValueError("empty batch")
    lengths = [s.shape[0] for s in seqs]
    if min(lengths) == 0:
        raise ValueError("empty sequence in batch")
    d = seqs[0].shape[1]
    out = np.zeros((len(seqs), max(lengths), d))
    mask = np.zeros((len(seqs), max(lengths)), dtype=bool)
    for i, s in enumerate(seqs):
        out[i, : s.shape[0]] = s
        mask[i, : s.shape[0]] = True
    return out, mask


def _embed(x: np.ndarray, branch: Branch) -> Tensor:
    m = x.shape[-2]
    pos = nx.take(branch.pos, np.arange(m), axis=0)
    return nx.relu(Tensor(x) @ branch.fc_w + branch.fc_b) + pos


def encode_sentences(words: Sequence[np.ndarray], enc: EncoderParameters) -> Tensor:
    """Batch of word-feature matrices -> ``(B, d)`` sentence embeddings."""
    cfg = enc.config
    trimmed = []
    for w in words:
        w = np.asarray(w, dtype=np.float64)
        if w.ndim != 2 or w.shape[0] == 0:
            raise ValueError(f"a sentence needs at least one word, got shape {w.shape}")
        trimmed.append(w[: cfg.max_words])
    x, mask = pad_batch(trimmed)
    h = _embed(x, enc.text)
    for (block,) in enc.text.layers:
        h = gaussian_block_forward(h, block, math.inf, "normalized", mask)
    return attention_pool(h, enc.text.pool, mask)


def encode_sentence(words: np.ndarray, enc: EncoderParameters) -> Tensor:
    return nx.reshape(encode_sentences([words], enc), (enc.config.dim,))


def _run_layers(h: Tensor, branch: Branch, cfg: EncoderConfig, mask) -> Tensor:
    for members in branch.layers:
        h = gmmformer_block_forward(h, members, cfg.bank, cfg.window_mode, mask, cfg.variance_scale)
    return h


def encode_videos(frames: Sequence[np.ndarray], enc: EncoderParameters) -> tuple[Tensor, Tensor]:
    """Batch of frame matrices -> clip embeddings ``(B, M_c, d)`` and video embeddings ``(B, d)``."""
    cfg = enc.config
    clips = np.stack([clip_branch_input(f, cfg.clip_len) for f in frames])
    clip_out = _run_layers(_embed(clips, enc.clip), enc.clip, cfg, None)

    x, mask = pad_batch([downsample_mean_pool(f, cfg.max_frames) for f in frames])
    ctx = _run_layers(_embed(x, enc.video), enc.video, cfg, mask)
    return clip_out, attention_pool(ctx, enc.video.pool, mask)


def encode_video(frames: np.ndarray, enc: EncoderParameters) -> tuple[Tensor, Tensor]:
    clip_out, vid = encode_videos([frames], enc)
    d = enc.config.dim
    return nx.reshape(clip_out, (enc.config.clip_len, d)), nx.reshape(vid, (d,))
