"""Synthetic untrimmed-video corpora with planted moments.

Each moment carries a latent concept vector.  Frames inside the moment are
the concept plus Gaussian noise, background frames are independent standard
normal draws, and each query is a handful of noisy affine views of its
moment's concept mapped into word space.  Moment boundaries are kept for
evaluation only.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

FILLER_VOCAB = 16
DEFAULT_MV_EDGES = (0.0, 0.25, 0.5, 1.0)


@dataclass(frozen=True)
class CorpusConfig:
    n_videos: int = 200
    frames_range: tuple[int, int] = (24, 64)
    moments_range: tuple[int, int] = (1, 4)
    queries_per_moment: int = 1
    words_range: tuple[int, int] = (3, 8)
    min_moment_len: int = 2
    d_in: int = 64
    d_word: int = 48
    noise: float = 0.5
    seed: int = 0

    def __post_init__(self):
        for name in ("frames_range", "moments_range", "words_range"):
            lo, hi = getattr(self, name)
            object.__setattr__(self, name, (int(lo), int(hi)))
            if lo < 1 or hi < lo:
                raise ValueError(f"{name} must be 1 <= lo <= hi, got {(lo, hi)}")
        for name in ("n_videos", "queries_per_moment", "min_moment_len", "d_in", "d_word"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.noise < 0:
            raise ValueError("noise must be >= 0")


@dataclass
class SyntheticMoment:
    start: int
    end: int  # exclusive
    concept: np.ndarray


@dataclass
class SyntheticVideo:
    id: str
    frames: np.ndarray
    moments: list[SyntheticMoment]

    @property
    def length(self) -> int:
        return self.frames.shape[0]


@dataclass
class SyntheticQuery:
    id: str
    video_id: str
    moment_index: int
    words: np.ndarray


@dataclass
class Corpus:
    config: CorpusConfig
    videos: list[SyntheticVideo]
    queries: list[SyntheticQuery]
    video_index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        self.video_index = {v.id: i for i, v in enumerate(self.videos)}

    @property
    def ground_truth(self) -> dict[str, tuple[str, int, int]]:
        """query id -> (video id, start, end)."""
        gt = {}
        for q in self.queries:
            m = self.videos[self.video_index[q.video_id]].moments[q.moment_index]
            gt[q.id] = (q.video_id, m.start, m.end)
        return gt

    def subset(self, n_videos: int) -> "Corpus":
        """First ``n_videos`` videos and the queries that point at them."""
        videos = self.videos[:n_videos]
        keep = {v.id for v in videos}
        return Corpus(self.config, videos, [q for q in self.queries if q.video_id in keep])

    def fingerprint(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for v in self.videos:
            h.update(v.id.encode())
            h.update(v.frames.tobytes())
        for q in self.queries:
            h.update(q.id.encode())
            h.update(q.words.tobytes())
        return h.hexdigest()[:16]


def _composition(rng: np.random.Generator, total: int, parts: int, floor: int) -> np.ndarray:
    """Random split of ``total`` into ``parts`` integers, each >= ``floor``."""
    spare = total - parts * floor
    probs = rng.dirichlet(np.ones(parts))
    return floor + rng.multinomial(spare, probs)


def _place_moments(rng, video_id: str, length: int, n_moments: int, min_len: int) -> list[tuple[int, int]]:
    if n_moments * min_len > length:
        raise ValueError(
            f"video {video_id}: cannot pack {n_moments} moments of >= {min_len} frames into {length} frames"
        )
    covered = int(rng.integers(n_moments * min_len, length + 1))
    lengths = _composition(rng, covered, n_moments, min_len)
    gaps = _composition(rng, length - covered, n_moments + 1, 0)
    spans = []
    cursor = int(gaps[0])
    for ln, gap in zip(lengths, gaps[1:]):
        spans.append((cursor, cursor + int(ln)))
        cursor += int(ln) + int(gap)
    return spans


def generate_corpus(config: CorpusConfig) -> Corpus:
    """Deterministic function of ``config`` (its seed included)."""
    rng = np.random.default_rng(config.seed)
    projection = rng.normal(size=(config.d_in, config.d_word)) / np.sqrt(config.d_in)
    fillers = 0.5 * rng.normal(size=(FILLER_VOCAB, config.d_word))

    videos, queries = [], []
    for vi in range(config.n_videos):
        vid = f"v{vi:05d}"
        length = int(rng.integers(config.frames_range[0], config.frames_range[1] + 1))
        n_moments = int(rng.integers(config.moments_range[0], config.moments_range[1] + 1))
        spans = _place_moments(rng, vid, length, n_moments, config.min_moment_len)
        frames = rng.normal(size=(length, config.d_in))
        moments = []
        for start, end in spans:
            concept = rng.normal(size=config.d_in)
            frames[start:end] = concept + config.noise * rng.normal(size=(end - start, config.d_in))
            moments.append(SyntheticMoment(start, end, concept))
        videos.append(SyntheticVideo(vid, frames, moments))

        for mi, m in enumerate(moments):
            anchor = m.concept @ projection
            for _ in range(config.queries_per_moment):
                n_words = int(rng.integers(config.words_range[0], config.words_range[1] + 1))
                gains = rng.uniform(0.5, 1.5, size=(n_words, 1))
                offsets = fillers[rng.integers(FILLER_VOCAB, size=n_words)]
                words = gains * anchor + offsets + config.noise * rng.normal(size=(n_words, config.d_word))
                queries.append(SyntheticQuery(f"q{len(queries):06d}", vid, mi, words))
    return Corpus(config, videos, queries)


# ---------------------------------------------------------------------------
# moment-to-video ratio groups


def moment_to_video_ratio(query: SyntheticQuery, corpus: Corpus) -> float:
    idx = corpus.video_index.get(query.video_id)
    if idx is None or not 0 <= query.moment_index < len(corpus.videos[idx].moments):
        raise KeyError(f"no ground truth for query {query.id}")
    video = corpus.videos[idx]
    m = video.moments[query.moment_index]
    return (m.end - m.start) / video.length


def group_label(lo: float, hi: float) -> str:
    return f"{lo:.2f}-{hi:.2f}"


def group_queries_by_mv(
    ratios: Sequence[float], edges: Sequence[float] = DEFAULT_MV_EDGES
) -> dict[str, np.ndarray]:
    """Partition query positions into half-open ratio intervals ``(lo, hi]``.

    ``edges`` must start at 0 and end at 1.  Returns label -> indices.
    """
    edges = [float(e) for e in edges]
    if len(edges) < 2 or edges[0] != 0.0 or edges[-1] != 1.0:
        raise ValueError(f"group edges must run from 0 to 1, got {edges}")
    if any(b <= a for a, b in zip(edges, edges[1:])):
        raise ValueError(f"group edges must be strictly increasing, got {edges}")
    r = np.asarray(ratios, dtype=np.float64)
    if r.size and (r.min() <= 0 or r.max() > 1):
        raise ValueError("ratios must lie in (0, 1]")
    groups = {}
    for lo, hi in zip(edges, edges[1:]):
        groups[group_label(lo, hi)] = np.flatnonzero((r > lo) & (r <= hi))
    return groups


def edges_from_cuts(cuts: Sequence[float]) -> list[float]:
    """Interior cut points (e.g. ``0.25, 0.5``) -> full edge list."""
    return [0.0, *sorted(float(c) for c in cuts), 1.0]


def oracle_scores(corpus: Corpus) -> np.ndarray:
    """(queries, videos) scores from the hidden concepts: best frame cosine.

    Uses ground truth that the model never sees; a sanity harness for the
    planted signal.
    """
    concepts = []
    for q in corpus.queries:
        v = corpus.videos[corpus.video_index[q.video_id]]
        concepts.append(v.moments[q.moment_index].concept)
    c = np.array(concepts)
    c /= np.linalg.norm(c, axis=1, keepdims=True)
    scores = np.empty((len(corpus.queries), len(corpus.videos)))
    for j, v in enumerate(corpus.videos):
        f = v.frames / np.maximum(np.linalg.norm(v.frames, axis=1, keepdims=True), 1e-300)
        scores[:, j] = (c @ f.T).max(axis=1)
    return scores


# ---------------------------------------------------------------------------
# persistence


def _write_matrix(path: Path, a: np.ndarray) -> None:
    a = np.ascontiguousarray(a, dtype="<f8")
    path.write_bytes(a.tobytes())
    path.with_suffix(".shape.json").write_text(json.dumps(list(a.shape)))


def _read_matrix(path: Path) -> np.ndarray:
    shape = json.loads(path.with_suffix(".shape.json").read_text())
    return np.frombuffer(path.read_bytes(), dtype="<f8").reshape(shape).astype(np.float64)


def save_corpus(corpus: Corpus, root: str | Path, edges: Sequence[float] = DEFAULT_MV_EDGES) -> Path:
    root = Path(root)
    (root / "videos").mkdir(parents=True, exist_ok=True)
    (root / "queries").mkdir(parents=True, exist_ok=True)
    cfg = corpus.config
    manifest = {
        "format": "gmmformer-corpus/1",
        "config": asdict(cfg),
        "seed": cfg.seed,
        "n_videos": len(corpus.videos),
        "n_queries": len(corpus.queries),
        "d_in": cfg.d_in,
        "d_word": cfg.d_word,
        "mv_edges": list(edges),
        "fingerprint": corpus.fingerprint(),
    }
    moments = {}
    for v in corpus.videos:
        _write_matrix(root / "videos" / f"{v.id}.f64", v.frames)
        _write_matrix(root / "videos" / f"{v.id}.concepts.f64", np.array([m.concept for m in v.moments]))
        moments[v.id] = [[m.start, m.end] for m in v.moments]
    gt = {}
    for q in corpus.queries:
        _write_matrix(root / "queries" / f"{q.id}.f64", q.words)
        m = moments[q.video_id][q.moment_index]
        gt[q.id] = {"video_id": q.video_id, "moment_index": q.moment_index, "start": m[0], "end": m[1]}
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    (root / "moments.json").write_text(json.dumps(moments, indent=1, sort_keys=True) + "\n")
    (root / "gt.json").write_text(json.dumps(gt, indent=1, sort_keys=True) + "\n")
    return root


def load_corpus(root: str | Path) -> Corpus:
    root = Path(root)
    manifest_path = root / "manifest.json"
    if not manifest_path.is_file():
        raise FileNotFoundError(f"no corpus manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    cfg = CorpusConfig(**manifest["config"])
    moments = json.loads((root / "moments.json").read_text())
    gt = json.loads((root / "gt.json").read_text())
    videos = []
    for vid in sorted(moments):
        frames = _read_matrix(root / "videos" / f"{vid}.f64")
        concepts = _read_matrix(root / "videos" / f"{vid}.concepts.f64")
        ms = [SyntheticMoment(s, e, c) for (s, e), c in zip(moments[vid], concepts)]
        videos.append(SyntheticVideo(vid, frames, ms))
    queries = [
        SyntheticQuery(qid, g["video_id"], g["moment_index"], _read_matrix(root / "queries" / f"{qid}.f64"))
        for qid, g in sorted(gt.items())
    ]
    return Corpus(cfg, videos, queries)
