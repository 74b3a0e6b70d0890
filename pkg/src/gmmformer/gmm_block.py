"""Gaussian-windowed attention blocks and their multi-scale mixture."""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np

from . import numerics as nx
from .numerics import Parameters, Tensor

WINDOW_MODES = ("literal", "normalized")
DEFAULT_VARIANCES = (0.5, 1.0, 5.0, math.inf)


@dataclass(frozen=True)
class GaussianWindow:
    size: int
    variance: float
    mode: str
    values: np.ndarray


@lru_cache(maxsize=512)
def _window_values(size: int, variance: float, mode: str) -> np.ndarray:
    prefactor = 1.0 / (2.0 * math.pi) if mode == "literal" else 1.0
    if math.isinf(variance):
        values = np.full((size, size), prefactor)
    else:
        offset = np.arange(size)[None, :] - np.arange(size)[:, None]
        values = prefactor * np.exp(-(offset.astype(np.float64) ** 2) / variance)
    values.setflags(write=False)
    return values


def gaussian_window_matrix(size: int, variance: float, mode: str = "normalized") -> GaussianWindow:
    """``size`` x ``size`` matrix of distance-decayed weights.

    Entry (i, j) is ``exp(-(j - i)**2 / variance)``, times ``1/(2*pi)`` in
    ``literal`` mode.  An infinite variance gives a constant matrix.
    """
    if size < 1:
        raise ValueError(f"window size must be >= 1, got {size}")
    if not variance > 0:
        raise ValueError(f"window variance must be positive, got {variance}")
    if mode not in WINDOW_MODES:
        raise ValueError(f"unknown window mode {mode!r}, expected one of {WINDOW_MODES}")
    return GaussianWindow(size, float(variance), mode, _window_values(size, float(variance), mode))


@dataclass(frozen=True)
class GaussianBank:
    """Variances of the parallel Gaussian blocks inside one mixture block."""

    variances: tuple[float, ...] = DEFAULT_VARIANCES

    def __post_init__(self):
        v = tuple(float(x) for x in self.variances)
        object.__setattr__(self, "variances", v)
        if not v:
            raise ValueError("a Gaussian bank needs at least one variance")
        if any(not x > 0 for x in v):
            raise ValueError(f"variances must be positive, got {v}")
        if any(b <= a for a, b in zip(v, v[1:])):
            raise ValueError(f"variances must be strictly increasing, got {v}")

    def __len__(self) -> int:
        return len(self.variances)

    @classmethod
    def vanilla(cls) -> "GaussianBank":
        """A single unconstrained member: plain Transformer attention."""
        return cls((math.inf,))


@dataclass
class BlockParameters:
    ln1_gain: Tensor
    ln1_bias: Tensor
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    bo: Tensor
    ln2_gain: Tensor
    ln2_bias: Tensor
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    n_heads: int

    @property
    def dim(self) -> int:
        return self.wq.shape[0]


def uniform_affine(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def init_block_params(
    params: Parameters, prefix: str, dim: int, n_heads: int, rng: np.random.Generator
) -> BlockParameters:
    """Register one Gaussian block's weights under ``prefix`` and return them."""
    if dim % n_heads:
        raise ValueError(f"head count {n_heads} does not divide model dimension {dim}")
    hidden = 4 * dim
    bound = 1.0 / math.sqrt(dim)
    p = lambda name, value: params.add(f"{prefix}.{name}", value)  # noqa: E731
    return BlockParameters(
        ln1_gain=p("ln1.gain", np.ones(dim)),
        ln1_bias=p("ln1.bias", np.zeros(dim)),
        wq=p("attn.wq", uniform_affine(rng, dim, dim)),
        wk=p("attn.wk", uniform_affine(rng, dim, dim)),
        wv=p("attn.wv", uniform_affine(rng, dim, dim)),
        wo=p("attn.wo", uniform_affine(rng, dim, dim)),
        bo=p("attn.bo", rng.uniform(-bound, bound, size=dim)),
        ln2_gain=p("ln2.gain", np.ones(dim)),
        ln2_bias=p("ln2.bias", np.zeros(dim)),
        w1=p("ffn.w1", uniform_affine(rng, dim, hidden)),
        b1=p("ffn.b1", rng.uniform(-bound, bound, size=hidden)),
        w2=p("ffn.w2", uniform_affine(rng, hidden, dim)),
        b2=p("ffn.b2", rng.uniform(-1.0 / math.sqrt(hidden), 1.0 / math.sqrt(hidden), size=dim)),
        n_heads=n_heads,
    )


def block_params_from(params: Parameters, prefix: str, n_heads: int) -> BlockParameters:
    """Rebind an already-registered block (e.g. after loading a checkpoint)."""
    g = lambda name: params[f"{prefix}.{name}"]  # noqa: E731
    return BlockParameters(
        g("ln1.gain"), g("ln1.bias"), g("attn.wq"), g("attn.wk"), g("attn.wv"),
        g("attn.wo"), g("attn.bo"), g("ln2.gain"), g("ln2.bias"),
        g("ffn.w1"), g("ffn.b1"), g("ffn.w2"), g("ffn.b2"), n_heads,
    )


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    *lead, m, d = x.shape
    x = nx.reshape(x, (*lead, m, n_heads, d // n_heads))
    nd = len(lead) + 3
    axes = list(range(nd - 3)) + [nd - 2, nd - 3, nd - 1]
    return nx.transpose(x, axes)


def _merge_heads(x: Tensor) -> Tensor:
    *lead, h, m, dk = x.shape
    nd = len(lead) + 3
    axes = list(range(nd - 3)) + [nd - 2, nd - 3, nd - 1]
    x = nx.transpose(x, axes)
    return nx.reshape(x, (*lead, m, h * dk))


def gaussian_attention(
    x: Tensor,
    params: BlockParameters,
    window: GaussianWindow | None,
    mask: np.ndarray | None = None,
) -> Tensor:
    """Multi-head attention whose logits are scaled element-wise by ``window``.

    ``x`` is ``(..., M, d)``.  ``mask`` (``(..., M)`` booleans) marks the real
    rows of padded batches; padded keys receive no attention.  ``window=None``
    skips the element-wise product entirely (plain attention).
    """
    m, d = x.shape[-2], x.shape[-1]
    if d % params.n_heads:
        raise ValueError(f"head count {params.n_heads} does not divide model dimension {d}")
    if window is not None and window.size != m:
        raise nx.ShapeError("gaussian_attention", x.shape, window.values.shape, detail="window size != sequence length")
    dk = d // params.n_heads
    # 1/sqrt(d_k) folded into the queries: same logits, a smaller array to scale
    q = _split_heads(x @ params.wq, params.n_heads) * (1.0 / math.sqrt(dk))
    k = _split_heads(x @ params.wk, params.n_heads)
    v = _split_heads(x @ params.wv, params.n_heads)
    logits = q @ nx.transpose(k)
    if window is not None:
        logits = logits * window.values
    key_mask = None if mask is None else np.asarray(mask, dtype=bool)[..., None, None, :]
    attn = nx.softmax(logits, mask=key_mask)
    return _merge_heads(attn @ v) @ params.wo + params.bo


def _affine_norm(x: Tensor, gain: Tensor, bias: Tensor) -> Tensor:
    return nx.layer_norm(x) * gain + bias


def _block(x: Tensor, params: BlockParameters, window: GaussianWindow | None, mask) -> Tensor:
    inter = gaussian_attention(_affine_norm(x, params.ln1_gain, params.ln1_bias), params, window, mask) + x
    hidden = nx.relu(_affine_norm(inter, params.ln2_gain, params.ln2_bias) @ params.w1 + params.b1)
    return hidden @ params.w2 + params.b2 + inter


def gaussian_block_forward(
    x: Tensor,
    params: BlockParameters,
    variance: float,
    mode: str = "normalized",
    mask: np.ndarray | None = None,
    variance_scale: float = 1.0,
) -> Tensor:
    """Pre-norm residual block: windowed attention, then a ReLU feed-forward."""
    window = gaussian_window_matrix(x.shape[-2], variance * variance_scale, mode)
    return _block(x, params, window, mask)


def vanilla_block_forward(x: Tensor, params: BlockParameters, mask: np.ndarray | None = None) -> Tensor:
    """The same block with no window at all."""
    return _block(x, params, None, mask)


def gmmformer_block_forward(
    x: Tensor,
    params: Sequence[BlockParameters],
    bank: GaussianBank,
    mode: str = "normalized",
    mask: np.ndarray | None = None,
    variance_scale: float = 1.0,
) -> Tensor:
    """Average of one Gaussian block per bank variance (weights not shared)."""
    if len(params) != len(bank):
        raise ValueError(f"{len(bank)} variances but {len(params)} parameter sets")
    total = None
    for p, var in zip(params, bank.variances):
        out = gaussian_block_forward(x, p, var, mode, mask, variance_scale)
        total = out if total is None else total + out
    return total * (1.0 / len(bank))
