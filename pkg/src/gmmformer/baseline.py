"""Scanning-based explicit clip construction and the store efficiency benchmark.

The explicit baseline materialises every contiguous span of the ``M``-row
clip sequence as its own mean-pooled embedding (``M(M+1)/2`` of them); the
implicit store keeps the ``M`` rows produced by the mixture blocks.  The
benchmark times single-query scoring plus ranking against each store.
"""

from __future__ import annotations

import csv
import io
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import container
from .evaluation import EmbeddingStore, build_store, encode_queries
from .objectives import SimilarityWeights

DEFAULT_SIZES = (500, 1000, 1500, 2000, 2500)
WARMUP_TRIALS = 10
MIN_TICKS = 100


class BenchmarkError(RuntimeError):
    pass


def n_spans(m: int) -> int:
    return m * (m + 1) // 2


def span_table(m: int) -> np.ndarray:
    """(start, end) pairs, end inclusive, ordered by length then start."""
    return np.array([(s, s + ln - 1) for ln in range(1, m + 1) for s in range(m - ln + 1)], dtype=np.int64)


def sliding_window_clips(features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Mean of rows s..e for every 1 <= s <= e <= M.

    Returns ``(clips, spans)`` with ``clips`` shaped ``(M(M+1)/2, d)``.
    Works on stacked input ``(..., M, d)`` too.
    """
    features = np.asarray(features, dtype=np.float64)
    if features.ndim < 2 or features.shape[-2] == 0:
        raise ValueError(f"need a non-empty (M, d) matrix, got shape {features.shape}")
    m = features.shape[-2]
    spans = span_table(m)
    zero = np.zeros(features.shape[:-2] + (1, features.shape[-1]))
    csum = np.concatenate([zero, np.cumsum(features, axis=-2)], axis=-2)
    starts, ends = spans[:, 0], spans[:, 1] + 1
    lengths = (ends - starts).astype(np.float64)[:, None]
    clips = (csum[..., ends, :] - csum[..., starts, :]) / lengths
    return clips, spans


@dataclass
class ExplicitClipStore:
    video_ids: list[str]
    clips: np.ndarray  # (V, M(M+1)/2, d)
    spans: np.ndarray  # (M(M+1)/2, 2)

    @property
    def payload_bytes(self) -> int:
        return self.clips.nbytes


def build_explicit_store(store: EmbeddingStore) -> ExplicitClipStore:
    clips, spans = sliding_window_clips(store.clips)
    return ExplicitClipStore(list(store.video_ids), clips, spans)


def max_sim_scan(q: np.ndarray, clips: np.ndarray) -> float:
    """Best cosine between ``q`` and any stored clip row."""
    clips = np.asarray(clips, dtype=np.float64)
    if clips.ndim != 2 or clips.shape[0] == 0:
        raise ValueError("need a non-empty clip matrix")
    q = np.asarray(q, dtype=np.float64)
    norms = np.linalg.norm(clips, axis=1) * np.linalg.norm(q)
    if np.any(norms == 0):
        raise ValueError("zero-norm vector")
    return float(np.max(clips @ q / norms))


# ---------------------------------------------------------------------------
# persistence


def save_store(path: str | Path, store: EmbeddingStore | ExplicitClipStore) -> Path:
    kind = "explicit" if isinstance(store, ExplicitClipStore) else "implicit"
    arrays = {"clips": store.clips}
    if kind == "implicit":
        arrays["videos"] = store.videos
    else:
        arrays["spans"] = store.spans.astype(np.float64)
    return container.write(path, container.STORE_MAGIC, {"kind": kind, "video_ids": store.video_ids}, arrays)


def load_store(path: str | Path) -> EmbeddingStore | ExplicitClipStore:
    header, arrays = container.read(path, container.STORE_MAGIC)
    if header["kind"] == "implicit":
        return EmbeddingStore(header["video_ids"], arrays["clips"], arrays["videos"])
    return ExplicitClipStore(header["video_ids"], arrays["clips"], arrays["spans"].astype(np.int64))


# ---------------------------------------------------------------------------
# benchmark


@dataclass
class StoreMeasurement:
    store: str
    size: int
    latency_ms: float
    store_bytes: int
    clip_bytes: int
    embeddings_per_video: int


@dataclass
class BenchReport:
    implicit: list[StoreMeasurement] = field(default_factory=list)
    explicit: list[StoreMeasurement] = field(default_factory=list)
    trials: int = 0
    dim: int = 0
    clip_len: int = 0

    def rows(self) -> list[dict]:
        out = []
        for imp, exp in zip(self.implicit, self.explicit):
            out.append(
                {
                    "size": imp.size,
                    "implicit_ms": imp.latency_ms,
                    "explicit_ms": exp.latency_ms,
                    "implicit_bytes": imp.store_bytes,
                    "explicit_bytes": exp.store_bytes,
                    "clip_byte_ratio": exp.clip_bytes / imp.clip_bytes,
                    "latency_ratio": exp.latency_ms / imp.latency_ms,
                }
            )
        return out

    def to_json(self) -> str:
        payload = {
            "trials": self.trials,
            "dim": self.dim,
            "clip_len": self.clip_len,
            "implicit": [asdict(m) for m in self.implicit],
            "explicit": [asdict(m) for m in self.explicit],
            "summary": self.rows(),
        }
        return json.dumps(payload, indent=2) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        rows = self.rows()
        w = csv.DictWriter(buf, fieldnames=list(rows[0]) if rows else ["size"], lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
        return buf.getvalue()


def _unit_rows(a: np.ndarray) -> np.ndarray:
    return a / np.linalg.norm(a, axis=-1, keepdims=True)


def _time_trials(fn, queries: np.ndarray, trials: int) -> float:
    for i in range(WARMUP_TRIALS):
        fn(queries[i % len(queries)])
    res = time.get_clock_info("perf_counter").resolution
    total = 0.0
    for i in range(trials):
        q = queries[i % len(queries)]
        t0 = time.perf_counter()
        fn(q)
        total += time.perf_counter() - t0
    mean = total / trials
    if mean < MIN_TICKS * res:
        raise BenchmarkError(
            f"mean timed region {mean:.3e}s is within {MIN_TICKS} ticks of the clock resolution {res:.1e}s; "
            "raise the trial count or the database size"
        )
    return mean * 1e3


def benchmark(
    corpus,
    checkpoint,
    sizes: Sequence[int] = DEFAULT_SIZES,
    trials: int = 50,
    weights: SimilarityWeights | None = None,
) -> BenchReport:
    """Mean single-query retrieval latency and store size, implicit vs explicit.

    Both stores are built offline from the first ``max(sizes)`` videos; only
    scoring one query against ``size`` videos and ranking them is timed.
    """
    sizes = sorted(int(s) for s in sizes)
    if not sizes or sizes[0] < 1:
        raise ValueError("database sizes must be >= 1")
    if sizes[-1] > len(corpus.videos):
        raise ValueError(f"largest size {sizes[-1]} exceeds corpus of {len(corpus.videos)} videos")
    if trials < 10:
        raise ValueError("at least 10 trials are required")
    if weights is None:
        tc = checkpoint.train_config
        weights = tc.weights if tc is not None else SimilarityWeights()

    sub = corpus.subset(sizes[-1])
    enc = checkpoint.encoder()
    store = build_store(enc, sub)
    explicit = build_explicit_store(store)
    queries = encode_queries(enc, sub)
    if len(queries) == 0:
        raise ValueError("corpus has no queries to time")

    v, m, d = store.clips.shape
    e = explicit.clips.shape[1]
    imp_clips = np.ascontiguousarray(_unit_rows(store.clips).reshape(v * m, d))
    imp_videos = np.ascontiguousarray(_unit_rows(store.videos))
    exp_clips = np.ascontiguousarray(_unit_rows(explicit.clips).reshape(v * e, d))
    a_v, a_c = weights.alpha_v, weights.alpha_c

    report = BenchReport(trials=trials, dim=d, clip_len=m)
    for n in sizes:
        ids = np.arange(n)
        ic, iv, ec = imp_clips[: n * m], imp_videos[:n], exp_clips[: n * e]

        def implicit_query(q):
            q = q / np.linalg.norm(q)
            s = a_v * (iv @ q) + a_c * (ic @ q).reshape(n, m).max(axis=1)
            return np.lexsort((ids, -s))

        def explicit_query(q):
            q = q / np.linalg.norm(q)
            s = (ec @ q).reshape(n, e).max(axis=1)
            return np.lexsort((ids, -s))

        clip_b = n * m * d * 8
        report.implicit.append(
            StoreMeasurement("implicit", n, _time_trials(implicit_query, queries, trials), clip_b + n * d * 8, clip_b, m + 1)
        )
        exp_b = n * e * d * 8
        report.explicit.append(
            StoreMeasurement("explicit", n, _time_trials(explicit_query, queries, trials), exp_b, exp_b, e)
        )
    return report
