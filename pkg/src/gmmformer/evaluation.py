"""Offline embedding, Eq.-style pair scoring, rankings and recall metrics."""

from __future__ import annotations

import csv
import io
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .encoders import EncoderParameters, encode_sentences, encode_videos
from .objectives import SimilarityWeights
from .synthetic import DEFAULT_MV_EDGES, Corpus, group_queries_by_mv, moment_to_video_ratio

RECALL_KS = (1, 5, 10, 100)
ENCODE_CHUNK = 64


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("GMMF_THREADS", "1")))
    except ValueError:
        return 1


@dataclass
class EmbeddingStore:
    """Per-video clip embeddings ``(V, M_c, d)`` and video embeddings ``(V, d)``."""

    video_ids: list[str]
    clips: np.ndarray
    videos: np.ndarray

    def __post_init__(self):
        self.clips.setflags(write=False)
        self.videos.setflags(write=False)

    @property
    def payload_bytes(self) -> int:
        return self.clips.nbytes + self.videos.nbytes


def _chunks(n: int, size: int) -> list[slice]:
    return [slice(i, min(n, i + size)) for i in range(0, n, size)]


def build_store(enc: EncoderParameters, corpus: Corpus, chunk: int = ENCODE_CHUNK) -> EmbeddingStore:
    frames = [v.frames for v in corpus.videos]
    if not frames:
        raise ValueError("empty corpus")

    def run(sl: slice):
        c, v = encode_videos(frames[sl], enc)
        return c.data, v.data

    with ThreadPoolExecutor(max_workers=worker_count()) as pool:
        parts = list(pool.map(run, _chunks(len(frames), chunk)))  # ordered merge
    return EmbeddingStore(
        [v.id for v in corpus.videos],
        np.concatenate([p[0] for p in parts]),
        np.concatenate([p[1] for p in parts]),
    )


def encode_queries(enc: EncoderParameters, corpus: Corpus, chunk: int = 256) -> np.ndarray:
    words = [q.words for q in corpus.queries]
    if not words:
        return np.zeros((0, enc.config.dim))
    return np.concatenate([encode_sentences(words[sl], enc).data for sl in _chunks(len(words), chunk)])


def _unit(a: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(a, axis=-1, keepdims=True)
    if np.any(n == 0):
        raise ValueError("zero-norm embedding")
    return a / n


def score_matrix(queries: np.ndarray, store: EmbeddingStore, weights: SimilarityWeights) -> np.ndarray:
    """(queries, videos) weighted sum of video-level and max-clip cosines."""
    q = _unit(queries)
    v, m, d = store.clips.shape
    s_clip = (q @ _unit(store.clips).reshape(v * m, d).T).reshape(len(q), v, m).max(axis=-1)
    s_video = q @ _unit(store.videos).T
    return weights.alpha_v * s_video + weights.alpha_c * s_clip


def rank_videos(scores: np.ndarray) -> np.ndarray:
    """Per-row column order: descending score, ties by ascending column (video id order)."""
    n_videos = scores.shape[1]
    cols = np.broadcast_to(np.arange(n_videos), scores.shape)
    return np.lexsort((cols, -scores), axis=-1)


def recall_at_k(
    rankings: Mapping[str, Sequence[str]], ground_truth: Mapping[str, str], k: int
) -> float:
    """Percentage of queries whose relevant video appears in the top ``k``."""
    if k < 1:
        raise ValueError("K must be >= 1")
    if not ground_truth:
        raise ValueError("no queries to score")
    hits = 0
    for qid, target in ground_truth.items():
        if qid not in rankings:
            raise KeyError(f"query {qid} missing from rankings")
        if target in list(rankings[qid])[:k]:
            hits += 1
    return 100.0 * hits / len(ground_truth)


def recalls_from_ranks(ranks: np.ndarray, ks: Sequence[int] = RECALL_KS) -> dict[str, float]:
    """``ranks`` are 1-based positions of each query's relevant video."""
    out = {f"R@{k}": 100.0 * float(np.mean(ranks <= k)) for k in ks}
    out["SumR"] = sum(out[f"R@{k}"] for k in ks)
    return out


@dataclass
class MetricReport:
    recalls: dict[str, float]
    groups: dict[str, dict[str, float]] = field(default_factory=dict)
    group_sizes: dict[str, int] = field(default_factory=dict)
    provenance: dict[str, object] = field(default_factory=dict)

    @property
    def sumr(self) -> float:
        return self.recalls["SumR"]

    def to_json(self) -> str:
        return json.dumps(
            {"recalls": self.recalls, "groups": self.groups, "group_sizes": self.group_sizes, "provenance": self.provenance},
            indent=2,
            sort_keys=True,
        ) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["group", "metric", "value"])
        for metric, value in self.recalls.items():
            w.writerow(["all", metric, repr(value)])
        for label, rec in self.groups.items():
            for metric, value in rec.items():
                w.writerow([label, metric, repr(value)])
            w.writerow([label, "n_queries", self.group_sizes[label]])
        return buf.getvalue()


def positive_ranks(scores: np.ndarray, targets: np.ndarray) -> np.ndarray:
    order = rank_videos(scores)
    return np.argmax(order == targets[:, None], axis=1) + 1


def report_from_scores(
    scores: np.ndarray,
    corpus: Corpus,
    edges: Sequence[float] = DEFAULT_MV_EDGES,
    provenance: dict | None = None,
) -> MetricReport:
    targets = np.array([corpus.video_index[q.video_id] for q in corpus.queries])
    ranks = positive_ranks(scores, targets)
    report = MetricReport(recalls_from_ranks(ranks), provenance=dict(provenance or {}))
    ratios = [moment_to_video_ratio(q, corpus) for q in corpus.queries]
    for label, idx in group_queries_by_mv(ratios, edges).items():
        report.group_sizes[label] = int(len(idx))
        if len(idx):
            report.groups[label] = recalls_from_ranks(ranks[idx])
        else:
            report.groups[label] = {f"R@{k}": 0.0 for k in RECALL_KS} | {"SumR": 0.0}
    return report


def evaluate(
    checkpoint,
    corpus: Corpus,
    weights: SimilarityWeights | None = None,
    edges: Sequence[float] = DEFAULT_MV_EDGES,
) -> MetricReport:
    """Encode every video once, score every query against all of them, report recalls."""
    if not corpus.videos or not corpus.queries:
        raise ValueError("empty corpus")
    if weights is None:
        tc = checkpoint.train_config
        weights = tc.weights if tc is not None else SimilarityWeights()
    enc = checkpoint.encoder()
    store = build_store(enc, corpus)
    scores = score_matrix(encode_queries(enc, corpus), store, weights)
    provenance = {
        "config_fingerprint": checkpoint.fingerprint,
        "seed": checkpoint.train_config.seed if checkpoint.train_config else None,
        "dataset": corpus.fingerprint(),
        "alpha_v": weights.alpha_v,
        "alpha_c": weights.alpha_c,
    }
    return report_from_scores(scores, corpus, edges, provenance)
