"""Mean scaling and uniform bin quantization of real-valued series."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np


@dataclass(frozen=True)
class TokenizerConfig:
    num_bins: int = 300
    low: float = -15.0
    high: float = 15.0
    scale_epsilon: float = 1e-10

    def __post_init__(self):
        if not self.low < self.high:
            raise ValueError(f"low ({self.low}) must be below high ({self.high})")
        if self.num_bins < 2:
            raise ValueError("num_bins must be at least 2")

    @property
    def bin_width(self) -> float:
        return (self.high - self.low) / self.num_bins

    def centers(self) -> np.ndarray:
        return self.low + (np.arange(self.num_bins) + 0.5) * self.bin_width

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TokenSequence:
    tokens: np.ndarray
    scale: float


def mean_scale(context, cfg: TokenizerConfig = TokenizerConfig()) -> tuple[np.ndarray, float]:
    x = np.asarray(context, dtype=np.float64)
    if x.size == 0:
        raise ValueError("cannot scale an empty context")
    if not np.all(np.isfinite(x)):
        raise ValueError("context contains non-finite values")
    scale = float(np.mean(np.abs(x)))
    if scale < cfg.scale_epsilon:
        scale = 1.0
    return x / scale, scale


def quantize(value, cfg: TokenizerConfig = TokenizerConfig()):
    """Token index of the uniform bin containing ``value`` after clamping.

    Works elementwise on arrays. Bins are ``[edge_k, edge_k+1)`` except the
    last, which also contains ``high``.
    """
    v = np.clip(np.asarray(value, dtype=np.float64), cfg.low, cfg.high)
    idx = np.floor((v - cfg.low) / cfg.bin_width).astype(np.int64)
    idx = np.clip(idx, 0, cfg.num_bins - 1)
    return int(idx) if idx.ndim == 0 else idx


def dequantize(token, cfg: TokenizerConfig = TokenizerConfig()):
    t = np.asarray(token)
    if np.any(t < 0) or np.any(t >= cfg.num_bins):
        raise IndexError(f"token outside [0, {cfg.num_bins})")
    out = cfg.low + (t + 0.5) * cfg.bin_width
    return float(out) if out.ndim == 0 else out


def tokenize_series(context, cfg: TokenizerConfig = TokenizerConfig()) -> TokenSequence:
    scaled, scale = mean_scale(context, cfg)
    return TokenSequence(np.asarray(quantize(scaled, cfg), dtype=np.int64).reshape(scaled.shape), scale)


def detokenize(tokens, scale: float, cfg: TokenizerConfig = TokenizerConfig()) -> np.ndarray:
    return np.asarray(dequantize(np.asarray(tokens), cfg), dtype=np.float64) * scale
