"""Splitting, covariate standardization, adapter training with best-checkpointing, LR selection and evaluation."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import backbone as bb
from .adapters import AdapterVariant, CompositeModel, ConfigurationError, composite_forward, composite_loss_and_grads
from .metrics import DEFAULT_LEVELS, MetricReport, UndefinedMetricError, mase, quantiles_from_samples, seasonality_for_frequency, wql
from .nn import AdamState, RngStream, TrainingError, adam_step
from .synthgen import TimeSeriesRecord
from .tokenizer import TokenizerConfig, detokenize

log = logging.getLogger(__name__)

# stream ids under a training seed
_BATCH_STREAM = 11
_VAL_STREAM = 12
_TEST_STREAM = 13


@dataclass(frozen=True)
class SplitSpec:
    length: int
    context_end: int
    val: tuple[int, int]
    test: tuple[int, int]

    @property
    def context(self) -> tuple[int, int]:
        return (0, self.context_end)


@dataclass(frozen=True)
class TrainConfig:
    lr_grid: tuple[float, ...] = (1e-2, 1e-3, 1e-4)
    max_steps: int = 1500
    checkpoint_every: int = 100
    batch_size: int = 32
    seed: int = 0
    val_samples: int = 32
    eval_samples: int = 100

    def __post_init__(self):
        if self.checkpoint_every < 1 or self.max_steps % self.checkpoint_every:
            raise ValueError("max_steps must be a multiple of checkpoint_every")
        if not self.lr_grid:
            raise ValueError("lr_grid must not be empty")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lr_grid"] = list(self.lr_grid)
        return d


@dataclass
class TraceRow:
    step: int
    train_loss: float
    val_wql: float | None = None


@dataclass
class TrainResult:
    model: CompositeModel
    best_step: int
    best_val_wql: float
    trace: list[TraceRow] = field(default_factory=list)
    best_history: list[float] = field(default_factory=list)


# ----------------------------------------------------------------------
# Splits and standardization
# ----------------------------------------------------------------------


def split_series(length: int, prediction_length: int) -> SplitSpec:
    if length < 3 * prediction_length:
        raise ValueError(f"series of length {length} too short for three windows of {prediction_length}")
    ce = length - 2 * prediction_length
    return SplitSpec(length, ce, (ce, ce + prediction_length), (ce + prediction_length, length))


def split_dataset(records: list[TimeSeriesRecord], prediction_length: int) -> list[SplitSpec]:
    return [split_series(len(r.target), prediction_length) for r in records]


def standardize_covariates(
    records: list[TimeSeriesRecord], splits: list[SplitSpec]
) -> tuple[list[TimeSeriesRecord], list[np.ndarray]]:
    """Divide each covariate dimension by its mean absolute value over the training context."""
    out, factors = [], []
    for r, sp in zip(records, splits):
        ctx = r.covariates[: sp.context_end]
        f = np.mean(np.abs(ctx), axis=0)
        f = np.where(f > 0, f, 1.0)
        out.append(TimeSeriesRecord(r.series_id, r.target, r.covariates / f, dict(r.metadata)))
        factors.append(f)
    return out, factors


# ----------------------------------------------------------------------
# Batches and forecasting
# ----------------------------------------------------------------------


def sample_batch(
    records: list[TimeSeriesRecord],
    splits: list[SplitSpec],
    cfg: bb.BackboneConfig,
    tok: TokenizerConfig,
    batch_size: int,
    rng: RngStream,
):
    """Random training windows drawn from the context region only."""
    W = cfg.context_length + 1
    c = records[0].covariates.shape[1]
    inputs = np.empty((batch_size, W - 1), dtype=np.int64)
    targets = np.empty_like(inputs)
    x_past = np.empty((batch_size, W - 1, c))
    x_future = np.empty_like(x_past)
    for b in range(batch_size):
        i = int(rng.integers(0, len(records)))
        end = splits[i].context_end
        if end < W:
            raise ValueError(f"context region of {records[i].series_id} shorter than a training window")
        start = int(rng.integers(0, end - W + 1))
        toks, _ = bb.tokenize_window(records[i].target[start : start + W], cfg.input_length, tok)
        x = records[i].covariates[start : start + W]
        inputs[b], targets[b] = toks[:-1], toks[1:]
        x_past[b], x_future[b] = x[:-1], x[1:]
    return inputs, x_past, x_future, targets


def forecast_many(
    model: CompositeModel,
    tok: TokenizerConfig,
    histories: list[np.ndarray],
    covariates: list[np.ndarray],
    horizon: int,
    n_samples: int,
    rngs: list[RngStream],
    greedy: bool = False,
) -> list[bb.ForecastResult]:
    """Sample paths for the ``horizon`` values following each history.

    ``covariates[i]`` must cover ``histories[i]`` plus the horizon, since
    future covariates are known. Series whose truncated contexts share a
    length are decoded in one batch.
    """
    n_ctx = model.config.context_length - horizon
    if n_ctx < 1:
        raise ValueError("context_length leaves no room for observed values")
    ctx_tokens, scales, covs = [], [], []
    for hist, cov in zip(histories, covariates):
        hist = np.asarray(hist, dtype=np.float64)
        start = max(0, len(hist) - n_ctx)
        c = np.asarray(cov, dtype=np.float64)[start : len(hist) + horizon]
        if c.ndim == 1:
            c = c[:, None]
        if len(c) != len(hist) - start + horizon:
            raise ValueError("covariates must extend over the forecast horizon")
        toks, scale = bb.tokenize_window(hist[start:], len(hist) - start, tok)
        ctx_tokens.append(toks)
        scales.append(scale)
        covs.append(c)
    results: list[bb.ForecastResult | None] = [None] * len(histories)
    groups: dict[int, list[int]] = {}
    for i, t in enumerate(ctx_tokens):
        groups.setdefault(len(t), []).append(i)
    for idx in groups.values():
        cov = np.stack([covs[i] for i in idx])
        S = len(idx)

        def step_logits(seq, k, cov=cov, S=S):
            T = seq.shape[1]
            reps = seq.shape[0] // S
            xp = np.repeat(cov[:, :T], reps, axis=0)
            xf = np.repeat(cov[:, T], reps, axis=0)
            return composite_forward(model, seq, xp, xf, last_only=True)

        paths = bb.autoregressive_sample(
            step_logits, np.stack([ctx_tokens[i] for i in idx]), horizon, n_samples, [rngs[i] for i in idx], greedy
        )
        for j, i in enumerate(idx):
            values = detokenize(paths[j], scales[i], tok)
            results[i] = bb.ForecastResult(
                values, quantiles_from_samples(values, DEFAULT_LEVELS), np.asarray(DEFAULT_LEVELS)
            )
    return results


def forecast(
    model: CompositeModel,
    tok: TokenizerConfig,
    history: np.ndarray,
    covariates: np.ndarray,
    horizon: int,
    n_samples: int,
    rng: RngStream,
    greedy: bool = False,
) -> bb.ForecastResult:
    return forecast_many(model, tok, [history], [covariates], horizon, n_samples, [rng], greedy)[0]


def window_wql(
    model: CompositeModel,
    tok: TokenizerConfig,
    records: list[TimeSeriesRecord],
    splits: list[SplitSpec],
    window: str,
    n_samples: int,
    rng: RngStream,
) -> tuple[float, list[bb.ForecastResult]]:
    """WQL of forecasts for the ``"val"`` or ``"test"`` window of every series."""
    bounds = [getattr(sp, window) for sp in splits]
    horizons = {hi - lo for lo, hi in bounds}
    if len(horizons) != 1:
        raise ValueError("all series must share the window length")
    results = forecast_many(
        model,
        tok,
        [r.target[:lo] for r, (lo, _) in zip(records, bounds)],
        [r.covariates[:hi] for r, (_, hi) in zip(records, bounds)],
        horizons.pop(),
        n_samples,
        [rng.child(i) for i in range(len(records))],
    )
    actuals = [r.target[lo:hi] for r, (lo, hi) in zip(records, bounds)]
    return wql([res.quantile_matrix for res in results], actuals), results


# ----------------------------------------------------------------------
# Training
# ----------------------------------------------------------------------


def train_once(
    model: CompositeModel,
    records: list[TimeSeriesRecord],
    splits: list[SplitSpec],
    tok: TokenizerConfig,
    lr: float,
    cfg: TrainConfig,
    rng: RngStream | None = None,
    on_checkpoint: Callable[[int, CompositeModel, float], None] | None = None,
) -> TrainResult:
    """Adam training of the trainable parts of ``model`` with validation-WQL checkpointing.

    Validation is evaluated on the initial model and every
    ``checkpoint_every`` steps; the best model seen is returned.
    """
    if model.variant is AdapterVariant.POINT_OIB:
        raise ConfigurationError("POINT_OIB has no categorical training objective")
    rng = rng if rng is not None else RngStream(cfg.seed)
    batch_rng = rng.child(_BATCH_STREAM)
    model = model.copy()
    ad_state = AdamState(lr=lr)
    bb_state = AdamState(lr=lr)

    def validate():
        # same stream at every checkpoint so scores differ only through the parameters
        score, _ = window_wql(model, tok, records, splits, "val", cfg.val_samples, rng.child(_VAL_STREAM))
        return score

    best_wql = validate()
    best = model.copy()
    best_step = 0
    trace = [TraceRow(0, float("nan"), best_wql)]
    history = [best_wql]
    if on_checkpoint:
        on_checkpoint(0, model, best_wql)
    has_trainable = bool(model.adapter) or not model.freeze_backbone
    for step in range(1, cfg.max_steps + 1):
        inputs, xp, xf, targets = sample_batch(records, splits, model.config, tok, cfg.batch_size, batch_rng)
        loss, ad_grads, bb_grads = composite_loss_and_grads(model, inputs, xp, xf, targets)
        if not np.isfinite(loss):
            raise TrainingError(f"non-finite training loss at step {step}")
        if has_trainable and lr > 0:
            if ad_grads:
                model.adapter, ad_state = adam_step(model.adapter, ad_grads, ad_state)
            if not model.freeze_backbone and bb_grads:
                model.backbone, bb_state = adam_step(model.backbone, bb_grads, bb_state)
        row = TraceRow(step, loss)
        if step % cfg.checkpoint_every == 0:
            row.val_wql = validate()
            if not np.isfinite(row.val_wql):
                raise TrainingError(f"non-finite validation WQL at step {step}")
            if row.val_wql < best_wql:
                best_wql, best, best_step = row.val_wql, model.copy(), step
            history.append(best_wql)
            if on_checkpoint:
                on_checkpoint(step, model, row.val_wql)
            log.debug("step %d loss %.4f val_wql %.4f", step, loss, row.val_wql)
        trace.append(row)
    return TrainResult(best, best_step, best_wql, trace, history)


@dataclass
class LrSelection:
    lr: float
    result: TrainResult
    scores: dict[float, float]
    failures: dict[float, str]


def select_learning_rate(
    model_factory: Callable[[], CompositeModel],
    records: list[TimeSeriesRecord],
    splits: list[SplitSpec],
    tok: TokenizerConfig,
    cfg: TrainConfig,
    train_fn: Callable[..., TrainResult] = train_once,
) -> LrSelection:
    """Train one model per learning rate and keep the one with the lowest validation WQL.

    Candidates whose training raises ``TrainingError`` are dropped; ties go
    to the smaller learning rate.
    """
    results: dict[float, TrainResult] = {}
    failures: dict[float, str] = {}
    for lr in cfg.lr_grid:
        try:
            results[lr] = train_fn(model_factory(), records, splits, tok, lr, cfg, RngStream(cfg.seed))
        except TrainingError as exc:
            log.warning("learning rate %g failed: %s", lr, exc)
            failures[lr] = str(exc)
    if not results:
        raise TrainingError("every learning-rate candidate failed: " + "; ".join(f"{k:g}: {v}" for k, v in failures.items()))
    scores = {lr: r.best_val_wql for lr, r in results.items()}
    chosen = min(scores, key=lambda lr: (scores[lr], lr))
    return LrSelection(chosen, results[chosen], scores, failures)


# ----------------------------------------------------------------------
# Evaluation
# ----------------------------------------------------------------------


@dataclass
class Evaluation:
    report: MetricReport
    forecasts: list[bb.ForecastResult]


def evaluate_model(
    model: CompositeModel,
    records: list[TimeSeriesRecord],
    splits: list[SplitSpec],
    tok: TokenizerConfig,
    n_samples: int = 100,
    seed: int = 0,
    freq: str = "1D",
    dataset_id: str = "",
    model_id: str = "",
) -> Evaluation:
    """Forecast each test window and score WQL over all series and MASE of the median path."""
    rng = RngStream(seed).child(_TEST_STREAM)
    season = seasonality_for_frequency(freq)
    score, results = window_wql(model, tok, records, splits, "test", n_samples, rng)
    per_series = []
    median_row = list(DEFAULT_LEVELS).index(0.5)
    for r, sp, res in zip(records, splits, results):
        lo, hi = sp.test
        try:
            per_series.append(mase(res.quantile_matrix[median_row], r.target[lo:hi], r.target[:lo], season))
        except UndefinedMetricError:
            log.warning("MASE undefined for %s; excluded", r.series_id)
    mase_mean = float(np.mean(per_series)) if per_series else float("nan")
    report = MetricReport(
        dataset_id=dataset_id,
        model_id=model_id or model.variant.value,
        wql=score,
        mase=mase_mean,
        variant=model.variant.value,
        n_series_scored=len(per_series),
        seed=seed,
        per_series_mase=per_series,
    )
    return Evaluation(report, results)
