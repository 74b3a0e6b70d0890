"""Text-video similarities and the training objectives built on them."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import numerics as nx
from .numerics import Tensor

NCE_TRANSFORMS = ("exp", "raw-clamped")
RAW_CLAMP_FLOOR = 1e-6


@dataclass(frozen=True)
class SimilarityWeights:
    alpha_v: float = 0.3
    alpha_c: float = 0.7

    def __post_init__(self):
        for name in ("alpha_v", "alpha_c"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if abs(self.alpha_v + self.alpha_c - 1.0) > 1e-12:
            raise ValueError(f"alpha_v + alpha_c must be 1, got {self.alpha_v + self.alpha_c}")


@dataclass(frozen=True)
class LossConfig:
    margin: float = 0.1
    lambda1: float = 5e-2
    lambda2: float = 4e-2
    lambda3: float = 1e-3
    div_scale: float = 32.0
    div_margin: float = 0.15
    hard_negative_epoch: int = 20
    nce_transform: str = "exp"

    def __post_init__(self):
        if self.margin < 0:
            raise ValueError("margin must be >= 0")
        if self.div_scale <= 0 or self.div_margin <= 0:
            raise ValueError("diverse-loss scale and margin must be positive")
        if min(self.lambda1, self.lambda2, self.lambda3) < 0:
            raise ValueError("loss weights must be >= 0")
        if self.nce_transform not in NCE_TRANSFORMS:
            raise ValueError(f"nce_transform must be one of {NCE_TRANSFORMS}")


class BatchRelevance:
    """Which batch video each batch text belongs to.

    ``positives[i]`` is the column (batch video index) of text ``i``.
    """

    def __init__(self, positives: Sequence[int], n_videos: int | None = None):
        self.positives = np.asarray(positives, dtype=int)
        self.n_texts = len(self.positives)
        self.n_videos = int(self.positives.max()) + 1 if n_videos is None else n_videos
        if self.n_texts and (self.positives.min() < 0 or self.positives.max() >= self.n_videos):
            raise ValueError("positive index out of range")

    @property
    def relevance(self) -> np.ndarray:
        """(texts, videos) 0/1 matrix."""
        r = np.zeros((self.n_texts, self.n_videos))
        r[np.arange(self.n_texts), self.positives] = 1.0
        return r

    @property
    def same_video(self) -> np.ndarray:
        """Symmetric text-text indicator of sharing a video, diagonal excluded."""
        same = self.positives[:, None] == self.positives[None, :]
        np.fill_diagonal(same, False)
        return same

    @property
    def distinct_videos(self) -> int:
        return len(np.unique(self.positives))


# ---------------------------------------------------------------------------
# similarities


def video_similarity(q, video) -> Tensor:
    """Cosine between sentence and video embeddings (any matching leading shape)."""
    q, video = nx.as_tensor(q), nx.as_tensor(video)
    d = q.shape[-1]
    return nx.reshape(nx.cosine(nx.reshape(q, (1, d)), nx.reshape(video, (1, d))), ())


def clip_similarity(q, clips) -> Tensor:
    """Best cosine between ``q`` and any clip row."""
    q, clips = nx.as_tensor(q), nx.as_tensor(clips)
    if clips.shape[0] < 1:
        raise ValueError("need at least one clip")
    d = q.shape[-1]
    return nx.reduce_max(nx.reshape(nx.cosine(nx.reshape(q, (1, d)), clips), (clips.shape[0],)))


def video_similarity_matrix(q: Tensor, videos: Tensor) -> Tensor:
    """(texts, d) x (videos, d) -> (texts, videos) cosines."""
    return nx.cosine(q, videos)


def clip_similarity_matrix(q: Tensor, clips: Tensor) -> Tensor:
    """(texts, d) x (videos, M_c, d) -> (texts, videos) max-over-clips cosines."""
    n, d = q.shape
    v, m, _ = clips.shape
    flat = nx.cosine(q, nx.reshape(clips, (v * m, d)))
    return nx.reduce_max(nx.reshape(flat, (n, v, m)), axis=-1)


def pair_similarity(s_v, s_c, weights: SimilarityWeights):
    return weights.alpha_v * s_v + weights.alpha_c * s_c


# ---------------------------------------------------------------------------
# negatives


@dataclass(frozen=True)
class Negatives:
    texts: np.ndarray   # per pair: a text index whose video differs
    videos: np.ndarray  # per pair: a video column other than the positive


def sample_negatives(
    batch: BatchRelevance,
    similarities: np.ndarray,
    epoch: int,
    switch_epoch: int,
    rng: np.random.Generator,
) -> Negatives:
    """Random non-relevant negatives before ``switch_epoch``, hardest ones from then on."""
    if batch.distinct_videos < 2:
        raise ValueError("negative sampling needs at least two distinct videos in the batch")
    sims = np.asarray(similarities, dtype=np.float64)
    pos = batch.positives
    n = batch.n_texts
    neg_text = np.empty(n, dtype=int)
    neg_video = np.empty(n, dtype=int)
    hardest = epoch >= switch_epoch
    present = np.zeros(batch.n_videos, dtype=bool)
    present[pos] = True
    for i in range(n):
        video_ok = present.copy()
        video_ok[pos[i]] = False
        text_ok = pos != pos[i]
        vids = np.flatnonzero(video_ok)
        texts = np.flatnonzero(text_ok)
        if hardest:
            neg_video[i] = vids[np.argmax(sims[i, vids])]
            neg_text[i] = texts[np.argmax(sims[texts, pos[i]])]
        else:
            neg_video[i] = vids[rng.integers(len(vids))]
            neg_text[i] = texts[rng.integers(len(texts))]
    return Negatives(neg_text, neg_video)


# ---------------------------------------------------------------------------
# losses


def _positive_scores(sims: Tensor, batch: BatchRelevance) -> Tensor:
    u = sims.shape[1]
    flat = nx.reshape(sims, (batch.n_texts * u,))
    return nx.take(flat, np.arange(batch.n_texts) * u + batch.positives)


def triplet_loss(sims: Tensor, batch: BatchRelevance, negatives: Negatives, margin: float) -> Tensor:
    """Mean over pairs of the two hinge terms (negative text, negative video)."""
    sims = nx.as_tensor(sims)
    pos = batch.positives
    if np.any(pos[negatives.texts] == pos) or np.any(negatives.videos == pos):
        raise ValueError("a negative coincides with its positive")
    n, u = batch.n_texts, sims.shape[1]
    flat = nx.reshape(sims, (n * u,))
    s_pos = nx.take(flat, np.arange(n) * u + pos)
    s_neg_text = nx.take(flat, negatives.texts * u + pos)
    s_neg_video = nx.take(flat, np.arange(n) * u + negatives.videos)
    hinge = nx.relu(s_neg_text - s_pos + margin) + nx.relu(s_neg_video - s_pos + margin)
    return nx.mean(hinge, axis=0)


def infonce_loss(sims: Tensor, batch: BatchRelevance, transform: str = "exp") -> Tensor:
    """Contrastive loss against every non-relevant text and video in the batch."""
    sims = nx.as_tensor(sims)
    if transform == "exp":
        g = nx.exp(sims)
    elif transform == "raw-clamped":
        g = nx.maximum(sims, RAW_CLAMP_FLOOR)
    else:
        raise ValueError(f"unknown transform {transform!r}")
    rel = batch.relevance
    irrelevant = 1.0 - rel
    g_pos = _positive_scores(g, batch)
    neg_videos = nx.tsum(g * irrelevant, axis=1)
    # per video column: mass of texts not relevant to it, then gathered per pair
    neg_texts = nx.take(nx.tsum(g * irrelevant, axis=0), batch.positives)
    log_pos = nx.log(g_pos)
    terms = (log_pos - nx.log(g_pos + neg_texts)) + (log_pos - nx.log(g_pos + neg_videos))
    return -nx.mean(terms, axis=0)


def query_diverse_loss(text_emb: Tensor, batch: BatchRelevance, scale: float, margin: float) -> Tensor:
    """Softplus repulsion between texts of the same video, averaged over ordered pairs."""
    if scale <= 0 or margin <= 0:
        raise ValueError("scale and margin must be positive")
    same = batch.same_video
    count = int(same.sum())
    if count == 0:
        return Tensor(0.0)
    cos = nx.cosine(text_emb, text_emb)
    terms = nx.softplus((cos + margin) * scale) * same.astype(np.float64)
    return nx.tsum(terms) * (1.0 / count)


@dataclass
class LossComponents:
    clip_triplet: Tensor
    video_triplet: Tensor
    clip_nce: Tensor
    video_nce: Tensor
    diverse: Tensor

    def values(self) -> dict[str, float]:
        return {k: float(getattr(self, k).data) for k in ("clip_triplet", "video_triplet", "clip_nce", "video_nce", "diverse")}


def total_loss(c: LossComponents, cfg: LossConfig) -> Tensor:
    return (
        c.clip_triplet
        + c.video_triplet
        + c.clip_nce * cfg.lambda1
        + c.video_nce * cfg.lambda2
        + c.diverse * cfg.lambda3
    )


def loss_components(
    text_emb: Tensor,
    clip_sims: Tensor,
    video_sims: Tensor,
    batch: BatchRelevance,
    clip_negatives: Negatives,
    video_negatives: Negatives,
    cfg: LossConfig,
) -> LossComponents:
    return LossComponents(
        clip_triplet=triplet_loss(clip_sims, batch, clip_negatives, cfg.margin),
        video_triplet=triplet_loss(video_sims, batch, video_negatives, cfg.margin),
        clip_nce=infonce_loss(clip_sims, batch, cfg.nce_transform),
        video_nce=infonce_loss(video_sims, batch, cfg.nce_transform),
        diverse=query_diverse_loss(text_emb, batch, cfg.div_scale, cfg.div_margin),
    )
