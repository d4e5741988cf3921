"""Small decoder-only categorical next-token forecaster.

The model exposes the three surfaces that covariate adapters hook into:

* ``embed``          token embedding lookup (``h_emb``)
* ``forward_hidden`` causal transformer stack producing final hidden states (``h_out``)
* ``logits``         output projection ``h_out @ W_out``

Forward passes return a cache consumed by the matching backward pass. All
math is plain numpy in float64.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .metrics import DEFAULT_LEVELS, quantiles_from_samples
from .nn import (
    AdamState,
    Params,
    RngStream,
    ShapeError,
    TrainingError,
    adam_step,
    batched_cross_entropy,
    linear_init,
    softmax,
)
from .tokenizer import TokenizerConfig, detokenize, mean_scale, quantize

log = logging.getLogger(__name__)

LN_EPS = 1e-5


@dataclass(frozen=True)
class BackboneConfig:
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    context_length: int = 128
    vocab_size: int = 300
    horizon: int = 24
    mlp_ratio: int = 4

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.context_length < self.horizon:
            raise ValueError("context_length must be at least horizon")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def input_length(self) -> int:
        """Number of observed values conditioned on when forecasting ``horizon`` steps."""
        return self.context_length - self.horizon

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ForecastResult:
    sample_paths: np.ndarray
    quantile_matrix: np.ndarray
    levels: np.ndarray = field(default_factory=lambda: np.array(DEFAULT_LEVELS))


def init_backbone(cfg: BackboneConfig, rng: RngStream) -> Params:
    d, V = cfg.d_model, cfg.vocab_size
    hidden = cfg.mlp_ratio * d
    p: Params = {
        "tok_emb": rng.normal(0.0, 1.0, (V, d)),
        "pos_emb": rng.normal(0.0, 0.1, (cfg.context_length, d)),
    }
    for i in range(cfg.n_layers):
        pre = f"l{i}."
        p[pre + "ln1.g"] = np.ones(d)
        p[pre + "ln1.b"] = np.zeros(d)
        for name in ("wq", "wk", "wv", "wo"):
            p[pre + name] = linear_init(d, d, rng)
            p[pre + "b" + name[1]] = np.zeros(d)
        p[pre + "ln2.g"] = np.ones(d)
        p[pre + "ln2.b"] = np.zeros(d)
        p[pre + "w1"] = linear_init(d, hidden, rng)
        p[pre + "b1"] = np.zeros(hidden)
        p[pre + "w2"] = linear_init(hidden, d, rng)
        p[pre + "b2"] = np.zeros(d)
    p["lnf.g"] = np.ones(d)
    p["lnf.b"] = np.zeros(d)
    p["w_out"] = linear_init(d, V, rng)
    return p


def parameter_count(params: Params) -> int:
    return int(sum(a.size for a in params.values()))


# ----------------------------------------------------------------------
# Surfaces
# ----------------------------------------------------------------------


def embed(params: Params, tokens) -> np.ndarray:
    """Token plus learned absolute position embedding; positions run along the last token axis."""
    t = np.asarray(tokens)
    V = params["tok_emb"].shape[0]
    if np.any(t < 0) or np.any(t >= V):
        raise IndexError(f"token outside vocabulary of size {V}")
    T = t.shape[-1] if t.ndim else 1
    if T > params["pos_emb"].shape[0]:
        raise ValueError(f"sequence length {T} exceeds the {params['pos_emb'].shape[0]} learned positions")
    pos = params["pos_emb"][:T] if t.ndim else params["pos_emb"][0]
    return params["tok_emb"][t] + pos


def embed_backward(params: Params, tokens, d_emb: np.ndarray) -> Params:
    """``tok_emb`` and ``pos_emb`` gradients from the gradient w.r.t. ``embed`` output."""
    t = np.asarray(tokens)
    d = np.asarray(d_emb, dtype=np.float64).reshape(t.shape + (params["tok_emb"].shape[1],))
    gpos = np.zeros_like(params["pos_emb"])
    T = t.shape[-1]
    gpos[:T] = d.reshape(-1, T, d.shape[-1]).sum(axis=0)
    return {"tok_emb": scatter_embedding_grad(params["tok_emb"].shape, t, d), "pos_emb": gpos}


def logits(params: Params, h: np.ndarray) -> np.ndarray:
    h = np.asarray(h, dtype=np.float64)
    if h.shape[-1] != params["w_out"].shape[0]:
        raise ShapeError(f"hidden width {h.shape[-1]} != {params['w_out'].shape[0]}")
    return h @ params["w_out"]


def _ln_fwd(x, g, b):
    xhat = x - x.mean(axis=-1, keepdims=True)
    var = np.einsum("...i,...i->...", xhat, xhat)[..., None]
    var /= x.shape[-1]
    var += LN_EPS
    rstd = 1.0 / np.sqrt(var)
    xhat *= rstd
    return xhat * g + b, (xhat, rstd, g)


def _ln_bwd(dy, cache):
    xhat, rstd, g = cache
    gg = (dy * xhat).reshape(-1, xhat.shape[-1]).sum(axis=0)
    gb = dy.reshape(-1, dy.shape[-1]).sum(axis=0)
    dxhat = dy * g
    dx = rstd * (
        dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    return dx, gg, gb


def _outer_sum(a, b):
    """``sum_{batch,time} a^T b`` for (..., m) and (..., n) arrays."""
    return a.reshape(-1, a.shape[-1]).T @ b.reshape(-1, b.shape[-1])


def forward_hidden(
    params: Params, cfg: BackboneConfig, embedded: np.ndarray, with_cache: bool = False, last_only: bool = False
):
    """Causal transformer over ``embedded`` of shape (B, T, d_model) or (T, d_model).

    Positions are already part of ``embedded`` (see ``embed``). With ``last_only`` the final layer is
    evaluated for the last position alone and (B, d_model) is returned;
    earlier positions' outputs are identical either way.
    """
    if last_only and with_cache:
        raise ValueError("last_only forward passes carry no backward cache")
    x = np.asarray(embedded, dtype=np.float64)
    squeeze = x.ndim == 2
    if squeeze:
        x = x[None]
    B, T, d = x.shape
    if d != cfg.d_model:
        raise ShapeError(f"embedding width {d} != d_model {cfg.d_model}")
    if T > cfg.context_length:
        raise ValueError(f"sequence length {T} exceeds context_length {cfg.context_length}")
    H, dh = cfg.n_heads, cfg.head_dim
    inv = 1.0 / np.sqrt(dh)
    neg_mask = np.where(np.tril(np.ones((T, T), dtype=bool)), 0.0, -np.inf)
    caches = []
    for i in range(cfg.n_layers):
        pre = f"l{i}."
        a, ln1c = _ln_fwd(x, params[pre + "ln1.g"], params[pre + "ln1.b"])
        k = (a @ params[pre + "wk"] + params[pre + "bk"]).reshape(B, T, H, dh).transpose(0, 2, 1, 3)
        v = (a @ params[pre + "wv"] + params[pre + "bv"]).reshape(B, T, H, dh).transpose(0, 2, 1, 3)
        if last_only and i == cfg.n_layers - 1:
            x, a, mask_rows, Tq = x[:, -1:], a[:, -1:], neg_mask[-1:], 1
        else:
            mask_rows, Tq = neg_mask, T
        q = (a @ params[pre + "wq"] + params[pre + "bq"]).reshape(B, Tq, H, dh).transpose(0, 2, 1, 3)
        p = q @ k.transpose(0, 1, 3, 2)
        p *= inv
        p += mask_rows
        p -= p.max(axis=-1, keepdims=True)
        np.exp(p, out=p)
        p /= p.sum(axis=-1, keepdims=True)
        o = (p @ v).transpose(0, 2, 1, 3).reshape(B, Tq, d)
        x1 = x + o @ params[pre + "wo"] + params[pre + "bo"]
        m, ln2c = _ln_fwd(x1, params[pre + "ln2.g"], params[pre + "ln2.b"])
        u = m @ params[pre + "w1"] + params[pre + "b1"]
        r = np.maximum(0.0, u)
        x = x1 + r @ params[pre + "w2"] + params[pre + "b2"]
        if with_cache:
            caches.append((a, ln1c, q, k, v, p, o, m, ln2c, u, r))
    h, lnfc = _ln_fwd(x, params["lnf.g"], params["lnf.b"])
    if last_only:
        h = h[:, 0]
    if squeeze:
        h = h[0]
    if with_cache:
        return h, (caches, lnfc, squeeze, (B, T, d))
    return h


def backward_hidden(params: Params, cfg: BackboneConfig, dh_out: np.ndarray, cache, param_grads: bool = True):
    """Gradient of ``sum(dh_out * h_out)`` w.r.t. the embedded input and backbone parameters.

    Returns ``(d_embedded, grads)``; ``grads`` is empty when ``param_grads``
    is false. ``tok_emb`` and ``w_out`` gradients are not produced here.
    """
    caches, lnfc, squeeze, (B, T, d) = cache
    dy = np.asarray(dh_out, dtype=np.float64)
    if squeeze:
        dy = dy[None]
    H, dhd = cfg.n_heads, cfg.head_dim
    inv = 1.0 / np.sqrt(dhd)
    grads: Params = {}
    dx, gg, gb = _ln_bwd(dy, lnfc)
    if param_grads:
        grads["lnf.g"], grads["lnf.b"] = gg, gb
    for i in reversed(range(cfg.n_layers)):
        pre = f"l{i}."
        a, ln1c, q, k, v, p, o, m, ln2c, u, r = caches[i]
        # MLP branch
        if param_grads:
            grads[pre + "w2"] = _outer_sum(r, dx)
            grads[pre + "b2"] = dx.reshape(-1, d).sum(axis=0)
        du = (dx @ params[pre + "w2"].T) * (u > 0)
        if param_grads:
            grads[pre + "w1"] = _outer_sum(m, du)
            grads[pre + "b1"] = du.reshape(-1, du.shape[-1]).sum(axis=0)
        dm = du @ params[pre + "w1"].T
        dx1_ln, gg, gb = _ln_bwd(dm, ln2c)
        if param_grads:
            grads[pre + "ln2.g"], grads[pre + "ln2.b"] = gg, gb
        dx1 = dx + dx1_ln
        # attention branch
        if param_grads:
            grads[pre + "wo"] = _outer_sum(o, dx1)
            grads[pre + "bo"] = dx1.reshape(-1, d).sum(axis=0)
        do = (dx1 @ params[pre + "wo"].T).reshape(B, T, H, dhd).transpose(0, 2, 1, 3)
        dp = do @ v.transpose(0, 1, 3, 2)
        dv = p.transpose(0, 1, 3, 2) @ do
        ds = p * (dp - (dp * p).sum(axis=-1, keepdims=True)) * inv
        dq = ds @ k
        dk = ds.transpose(0, 1, 3, 2) @ q
        dq = dq.transpose(0, 2, 1, 3).reshape(B, T, d)
        dk = dk.transpose(0, 2, 1, 3).reshape(B, T, d)
        dv = dv.transpose(0, 2, 1, 3).reshape(B, T, d)
        if param_grads:
            for nm, g_ in (("q", dq), ("k", dk), ("v", dv)):
                grads[pre + "w" + nm] = _outer_sum(a, g_)
                grads[pre + "b" + nm] = g_.reshape(-1, d).sum(axis=0)
        da = dq @ params[pre + "wq"].T + dk @ params[pre + "wk"].T + dv @ params[pre + "wv"].T
        dx0_ln, gg, gb = _ln_bwd(da, ln1c)
        if param_grads:
            grads[pre + "ln1.g"], grads[pre + "ln1.b"] = gg, gb
        dx = dx1 + dx0_ln
    if squeeze:
        dx = dx[0]
    return dx, grads


def scatter_embedding_grad(shape, tokens: np.ndarray, d_emb: np.ndarray) -> np.ndarray:
    g = np.zeros(shape)
    np.add.at(g, np.asarray(tokens).reshape(-1), d_emb.reshape(-1, shape[1]))
    return g


def loss_and_grads(params: Params, cfg: BackboneConfig, inputs: np.ndarray, targets: np.ndarray) -> tuple[float, Params]:
    """Mean next-token cross-entropy over a (B, T) batch and its full gradient."""
    e = embed(params, inputs)
    h, cache = forward_hidden(params, cfg, e, with_cache=True)
    lg = logits(params, h)
    loss, dlg = batched_cross_entropy(lg, targets)
    grads: Params = {"w_out": _outer_sum(h, dlg)}
    dh = dlg @ params["w_out"].T
    de, g2 = backward_hidden(params, cfg, dh, cache)
    grads.update(g2)
    grads.update(embed_backward(params, inputs, de))
    return loss, grads


# ----------------------------------------------------------------------
# Windows and pretraining
# ----------------------------------------------------------------------


def tokenize_window(values: np.ndarray, n_context: int, tok: TokenizerConfig) -> tuple[np.ndarray, float]:
    """Tokenize ``values`` with the scale of its first ``n_context`` entries."""
    _, scale = mean_scale(values[:n_context], tok)
    return quantize(np.asarray(values) / scale, tok), scale


def sample_windows(
    series: list[np.ndarray], cfg: BackboneConfig, tok: TokenizerConfig, batch_size: int, rng: RngStream
) -> tuple[np.ndarray, np.ndarray]:
    """Random (inputs, targets) token windows of length ``context_length``."""
    W = cfg.context_length + 1
    inputs = np.empty((batch_size, cfg.context_length), dtype=np.int64)
    targets = np.empty_like(inputs)
    for b in range(batch_size):
        s = series[int(rng.integers(0, len(series)))]
        start = int(rng.integers(0, len(s) - W + 1))
        toks, _ = tokenize_window(s[start : start + W], cfg.input_length, tok)
        inputs[b] = toks[:-1]
        targets[b] = toks[1:]
    return inputs, targets


@dataclass
class PretrainSettings:
    steps: int = 1000
    batch_size: int = 16
    lr: float = 1e-3
    log_every: int = 100


def pretrain(
    corpus: list[np.ndarray],
    cfg: BackboneConfig,
    tok: TokenizerConfig,
    settings: PretrainSettings,
    rng: RngStream,
    init: Params | None = None,
) -> tuple[Params, list[tuple[int, float]]]:
    """Next-token cross-entropy training on covariate-free raw series.

    Returns the trained parameters and a ``(step, loss)`` trace.
    """
    if not corpus:
        raise ValueError("pretraining corpus is empty")
    if tok.num_bins != cfg.vocab_size:
        raise ValueError(f"tokenizer has {tok.num_bins} bins but vocab_size is {cfg.vocab_size}")
    if any(len(s) < cfg.context_length + 1 for s in corpus):
        raise ValueError("every corpus series must cover context_length + 1 values")
    params = init if init is not None else init_backbone(cfg, rng.child(0))
    batch_rng = rng.child(1)
    state = AdamState(lr=settings.lr)
    trace: list[tuple[int, float]] = []
    for step in range(1, settings.steps + 1):
        inputs, targets = sample_windows(corpus, cfg, tok, settings.batch_size, batch_rng)
        loss, grads = loss_and_grads(params, cfg, inputs, targets)
        if not np.isfinite(loss):
            raise TrainingError(f"non-finite pretraining loss at step {step}")
        params, state = adam_step(params, grads, state)
        trace.append((step, loss))
        if settings.log_every and step % settings.log_every == 0:
            log.info("pretrain step %d loss %.4f", step, loss)
    return params, trace


# ----------------------------------------------------------------------
# Sampling
# ----------------------------------------------------------------------


def autoregressive_sample(
    step_logits: Callable[[np.ndarray, int], np.ndarray],
    context_tokens: np.ndarray,
    horizon: int,
    n_samples: int,
    rng: RngStream | list[RngStream],
    greedy: bool = False,
) -> np.ndarray:
    """Sampled token paths.

    ``context_tokens`` is (T,) for one series or (S, T) for several series
    forecast together; the result is (n_samples, horizon) or
    (S, n_samples, horizon). ``step_logits(tokens, k)`` maps an (N, T) token
    batch, rows grouped by series, to next-token logits at horizon step
    ``k``. Each series draws from its own stream, so batching does not
    change any series' samples.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be at least 1")
    ctx = np.asarray(context_tokens, dtype=np.int64)
    single = ctx.ndim == 1
    if single:
        ctx = ctx[None]
    S = ctx.shape[0]
    rngs = [rng] if isinstance(rng, RngStream) else list(rng)
    if len(rngs) != S:
        raise ValueError(f"need one random stream per series ({S}), got {len(rngs)}")
    seq = np.repeat(ctx, n_samples, axis=0)
    out = np.empty((S * n_samples, horizon), dtype=np.int64)
    for k in range(horizon):
        if k == 0:
            # all samples of a series share the context; evaluate once per series
            lg = np.repeat(step_logits(ctx, k), n_samples, axis=0)
        else:
            lg = step_logits(seq, k)
        if greedy:
            nxt = lg.argmax(axis=-1)
        else:
            probs = softmax(lg)
            cdf = np.cumsum(probs, axis=-1)
            u = np.concatenate([r.uniform(0.0, 1.0, n_samples) for r in rngs])[:, None] * cdf[:, -1:]
            nxt = np.minimum((cdf < u).sum(axis=-1), lg.shape[-1] - 1)
        out[:, k] = nxt
        seq = np.concatenate([seq, nxt[:, None]], axis=1)
    out = out.reshape(S, n_samples, horizon)
    return out[0] if single else out


def sample_forecast(
    params: Params,
    cfg: BackboneConfig,
    tok: TokenizerConfig,
    context_tokens: np.ndarray,
    scale: float,
    horizon: int,
    n_samples: int,
    rng: RngStream,
    greedy: bool = False,
    levels=DEFAULT_LEVELS,
) -> ForecastResult:
    def step_logits(seq, k):
        return logits(params, forward_hidden(params, cfg, embed(params, seq), last_only=True))

    paths = autoregressive_sample(step_logits, context_tokens, horizon, n_samples, rng, greedy)
    values = detokenize(paths, scale, tok)
    return ForecastResult(values, quantiles_from_samples(values, levels), np.asarray(levels))


def forecast_series(
    params: Params,
    cfg: BackboneConfig,
    tok: TokenizerConfig,
    history: np.ndarray,
    horizon: int,
    n_samples: int,
    rng: RngStream,
    greedy: bool = False,
) -> ForecastResult:
    """Forecast ``horizon`` steps after the end of ``history``."""
    ctx = np.asarray(history, dtype=np.float64)[-(cfg.context_length - horizon) :]
    toks, scale = tokenize_window(ctx, len(ctx), tok)
    return sample_forecast(params, cfg, tok, toks, scale, horizon, n_samples, rng, greedy)
