"""Experiment orchestration: benchmark generation, pretraining, per-dataset training and aggregation.

Output directory layout::

    <out>/datasets/<dataset_id>/{manifest.json, series.jsonl}
    <out>/backbone/{backbone.ckpt, pretrain_trace.csv}
    <out>/runs/<dataset_id>/<model_id>/{best.ckpt, trace.csv, report.csv}
    <out>/report/{aggregate.csv, plot_data.csv}
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import adapters as A
from . import backbone as bb
from . import io
from . import synthgen as sg
from . import training as tr
from .metrics import AggregationError, MetricReport, agg_relative_score, average_rank, read_reports, write_reports
from .nn import RngStream
from .tokenizer import TokenizerConfig

log = logging.getLogger(__name__)

BASELINE_MODEL = "backbone"

# stream ids under the global seed
_CORPUS_STREAM = 21
_PRETRAIN_STREAM = 22
_ATTACH_STREAM = 23


@dataclass
class CorpusConfig:
    series_per_family: int = 20
    length: int = 512


@dataclass
class ExperimentConfig:
    profile: str = "desk"
    variants: list[str] = field(default_factory=lambda: ["IIB_OIB", "NC", "RS", "OIB_only", "IIB_only"])
    datasets: list[str] | None = None
    backbone: dict = field(default_factory=lambda: dict(d_model=32, n_layers=1, n_heads=4, context_length=48, horizon=24))
    pretrain: dict = field(default_factory=lambda: dict(steps=2000, batch_size=32, lr=1e-3, log_every=100))
    corpus: dict = field(default_factory=lambda: asdict(CorpusConfig()))
    train: dict = field(default_factory=lambda: dict(max_steps=500, checkpoint_every=100, batch_size=16, val_samples=16, eval_samples=100))
    adapter_hidden: int = 32
    out: str = "runs"
    seed: int = 0

    def __post_init__(self):
        if self.profile not in sg.PROFILES:
            raise ValueError(f"unknown profile {self.profile!r}")
        for v in self.variants:
            if v != BASELINE_MODEL:
                A.AdapterVariant(v)  # raises ValueError on unknown names
        if self.adapter_hidden < 1:
            raise ValueError("adapter_hidden must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path: Path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return asdict(self)

    def config_hash(self) -> str:
        d = self.to_dict()
        d.pop("out")  # relocating outputs does not change results
        return io.config_hash(d)

    def provenance(self) -> dict:
        return {"config_hash": self.config_hash(), "seed": self.seed}

    @property
    def out_dir(self) -> Path:
        return Path(self.out)

    def backbone_config(self) -> bb.BackboneConfig:
        return bb.BackboneConfig(**self.backbone)

    def train_config(self) -> tr.TrainConfig:
        d = dict(self.train)
        if "lr_grid" in d:
            d["lr_grid"] = tuple(d["lr_grid"])
        return tr.TrainConfig(seed=self.seed, **d)

    def specs(self) -> list[sg.DatasetSpec]:
        specs = sg.generate_benchmark(self.seed, self.profile)
        if self.datasets is None:
            return specs
        known = {s.dataset_id: s for s in specs}
        missing = [d for d in self.datasets if d not in known]
        if missing:
            raise ValueError(f"unknown dataset ids: {missing}")
        return [known[d] for d in self.datasets]

    def spec(self, dataset_id: str) -> sg.DatasetSpec:
        for s in sg.generate_benchmark(self.seed, self.profile):
            if s.dataset_id == dataset_id:
                return s
        raise ValueError(f"unknown dataset id {dataset_id!r}")


# ----------------------------------------------------------------------
# Generation
# ----------------------------------------------------------------------


def generate(cfg: ExperimentConfig) -> list[tuple[str, str]]:
    """Write every selected dataset; returns ``(dataset_id, "written" | "verified")`` pairs.

    Existing datasets whose manifest describes the same spec are checksum
    verified and left untouched; a mismatch raises ``io.DataError``.
    """
    root = cfg.out_dir / "datasets"
    status = []
    for spec in cfg.specs():
        manifest_path, _ = io.dataset_paths(root, spec.dataset_id)
        if manifest_path.exists():
            manifest = io.verify_dataset(root, spec.dataset_id)
            if manifest["spec"] == spec.to_dict():
                status.append((spec.dataset_id, "verified"))
                continue
        records = sg.generate_dataset(spec)
        io.write_dataset(root, spec, records, {"profile": cfg.profile, "seed": cfg.seed})
        status.append((spec.dataset_id, "written"))
    return status


def load_dataset(cfg: ExperimentConfig, dataset_id: str) -> tuple[sg.DatasetSpec, list[sg.TimeSeriesRecord]]:
    return io.read_dataset(cfg.out_dir / "datasets", dataset_id)


# ----------------------------------------------------------------------
# Pretraining
# ----------------------------------------------------------------------


def pretraining_corpus(seed: int, series_per_family: int, length: int) -> list[np.ndarray]:
    """Main signals of every family with no covariate applied."""
    rng = RngStream(seed).child(_CORPUS_STREAM)
    corpus = []
    for f, kind in enumerate(sg.SignalKind):
        for i in range(series_per_family):
            corpus.append(sg.gen_main_signal(kind, length, rng.child(f * series_per_family + i)))
    return corpus


def pretrain(cfg: ExperimentConfig) -> tuple[bb.Params, list[tuple[int, float]]]:
    bcfg = cfg.backbone_config()
    corpus = pretraining_corpus(cfg.seed, **cfg.corpus)
    settings = bb.PretrainSettings(**cfg.pretrain)
    return bb.pretrain(corpus, bcfg, TokenizerConfig(), settings, RngStream(cfg.seed).child(_PRETRAIN_STREAM))


def backbone_path(cfg: ExperimentConfig) -> Path:
    return cfg.out_dir / "backbone" / "backbone.ckpt"


def run_pretrain(cfg: ExperimentConfig) -> Path:
    params, trace = pretrain(cfg)
    path = backbone_path(cfg)
    io.save_backbone(path, params, cfg.backbone_config(), TokenizerConfig(), cfg.provenance())
    with (path.parent / "pretrain_trace.csv").open("w", newline="") as fh:
        fh.write(_comment(cfg.provenance()))
        w = csv.writer(fh)
        w.writerow(["step", "train_loss"])
        w.writerows((s, repr(float(l))) for s, l in trace)
    return path


def load_backbone(cfg: ExperimentConfig) -> tuple[bb.Params, bb.BackboneConfig, TokenizerConfig]:
    params, bcfg, tok = io.load_backbone(backbone_path(cfg))
    if bcfg != cfg.backbone_config():
        raise io.DataError("backbone checkpoint was trained with a different backbone config")
    return params, bcfg, tok


def _comment(prov: dict) -> str:
    return "# " + " ".join(f"{k}={prov[k]}" for k in sorted(prov)) + "\n"


# ----------------------------------------------------------------------
# Training and evaluation of one (dataset, model) job
# ----------------------------------------------------------------------


def prepare(records: list[sg.TimeSeriesRecord], horizon: int):
    splits = tr.split_dataset(records, horizon)
    std, _ = tr.standardize_covariates(records, splits)
    return std, splits


def make_model(params: bb.Params, bcfg: bb.BackboneConfig, variant: str, hidden: int, cov_dim: int, seed: int) -> A.CompositeModel:
    v = A.AdapterVariant.NONE if variant == BASELINE_MODEL else A.AdapterVariant(variant)
    return A.attach(params, bcfg, v, A.AdapterHyper(hidden=hidden, cov_dim=cov_dim), RngStream(seed).child(_ATTACH_STREAM))


def run_dir(cfg: ExperimentConfig, dataset_id: str, model_id: str) -> Path:
    return cfg.out_dir / "runs" / dataset_id / model_id


def train_job(cfg: ExperimentConfig, dataset_id: str, variant: str) -> MetricReport:
    """Standardize, split, select the learning rate, evaluate and write all run artifacts."""
    spec, records = load_dataset(cfg, dataset_id)
    params, bcfg, tok = load_backbone(cfg)
    if spec.prediction_length != bcfg.horizon:
        raise ValueError(f"dataset horizon {spec.prediction_length} != backbone horizon {bcfg.horizon}")
    std, splits = prepare(records, bcfg.horizon)
    c = std[0].covariates.shape[1]
    tcfg = cfg.train_config()
    sel = tr.select_learning_rate(lambda: make_model(params, bcfg, variant, cfg.adapter_hidden, c, cfg.seed), std, splits, tok, tcfg)
    model = sel.result.model
    ev = tr.evaluate_model(model, std, splits, tok, tcfg.eval_samples, cfg.seed, spec.freq, dataset_id, variant)
    out = run_dir(cfg, dataset_id, variant)
    out.mkdir(parents=True, exist_ok=True)
    prov = cfg.provenance()
    extra = {**prov, "dataset_id": dataset_id, "lr": sel.lr, "best_step": sel.result.best_step, "val_scores": {repr(k): v for k, v in sel.scores.items()}}
    io.save_composite(out / "best.ckpt", model, tok, extra, include_backbone=not model.freeze_backbone)
    io.write_trace(out / "trace.csv", sel.result.trace, prov)
    write_reports(out / "report.csv", [ev.report], provenance=prov)
    return ev.report


def evaluate_job(cfg: ExperimentConfig, dataset_id: str, model_id: str = BASELINE_MODEL) -> MetricReport:
    """Score the zero-shot backbone, or re-score a trained run from its best checkpoint."""
    spec, records = load_dataset(cfg, dataset_id)
    params, bcfg, tok = load_backbone(cfg)
    std, splits = prepare(records, bcfg.horizon)
    out = run_dir(cfg, dataset_id, model_id)
    if model_id == BASELINE_MODEL:
        model = make_model(params, bcfg, BASELINE_MODEL, cfg.adapter_hidden, std[0].covariates.shape[1], cfg.seed)
    else:
        model, _ = io.load_composite(out / "best.ckpt", params)
    ev = tr.evaluate_model(model, std, splits, tok, cfg.train_config().eval_samples, cfg.seed, spec.freq, dataset_id, model_id)
    out.mkdir(parents=True, exist_ok=True)
    write_reports(out / "report.csv", [ev.report], provenance=cfg.provenance())
    return ev.report


# ----------------------------------------------------------------------
# Aggregation
# ----------------------------------------------------------------------


@dataclass
class AggregateTable:
    datasets: list[str]
    models: list[str]
    metric: str
    cells: np.ndarray  # (datasets, models), NaN where missing
    baseline: str
    agg_relative: dict[str, float]
    avg_rank: dict[str, float]

    @classmethod
    def from_reports(cls, reports: list[MetricReport], metric: str = "wql", baseline: str = BASELINE_MODEL) -> "AggregateTable":
        datasets = sorted({r.dataset_id for r in reports})
        models = sorted({r.model_id for r in reports})
        if baseline not in models:
            raise AggregationError(f"no rows for baseline model {baseline!r}")
        cells = np.full((len(datasets), len(models)), np.nan)
        for r in reports:
            cells[datasets.index(r.dataset_id), models.index(r.model_id)] = getattr(r, metric)
        b = cells[:, models.index(baseline)]
        if np.isnan(b).any():
            missing = [d for d, v in zip(datasets, b) if np.isnan(v)]
            raise AggregationError(f"baseline {baseline!r} missing on {missing}")
        agg = {m: agg_relative_score(cells[:, j], b) for j, m in enumerate(models)}
        if len(models) > 1:
            ranks = dict(zip(models, average_rank(cells).tolist()))
        else:
            ranks = {models[0]: 1.0}
        return cls(datasets, models, metric, cells, baseline, agg, ranks)

    def write(self, path: Path, provenance: dict | None = None) -> None:
        with Path(path).open("w", newline="") as fh:
            if provenance:
                fh.write(_comment(provenance))
            w = csv.writer(fh)
            w.writerow(["dataset_id", *self.models])
            for d, row in zip(self.datasets, self.cells):
                w.writerow([d, *("" if np.isnan(v) else repr(float(v)) for v in row)])
            w.writerow([f"agg_relative_score(baseline={self.baseline})", *(repr(self.agg_relative[m]) for m in self.models)])
            w.writerow(["avg_rank", *(repr(self.avg_rank[m]) for m in self.models)])


def collect_reports(out_dir: Path) -> list[MetricReport]:
    reports = []
    for p in sorted((Path(out_dir) / "runs").glob("*/*/report.csv")):
        reports.extend(read_reports(p))
    return reports


def plot_rows(reports: list[MetricReport]) -> list[tuple[str, str, str, float]]:
    """Long-format ``(model, dataset_group, metric, value)``: per-group mean of each metric."""
    acc: dict[tuple[str, str, str], list[float]] = {}
    for r in reports:
        group = "simple" if r.dataset_id.split("_")[0] in ("single", "simple") else "complex"
        for metric in ("wql", "mase"):
            v = getattr(r, metric)
            if np.isfinite(v):
                acc.setdefault((r.model_id, group, metric), []).append(v)
    return [(m, g, k, float(np.mean(v))) for (m, g, k), v in sorted(acc.items())]


def report(out_dir: Path, baseline: str = BASELINE_MODEL, provenance: dict | None = None) -> tuple[Path, Path]:
    reports = collect_reports(out_dir)
    if not reports:
        raise io.DataError(f"no run reports under {Path(out_dir) / 'runs'}")
    dest = Path(out_dir) / "report"
    dest.mkdir(parents=True, exist_ok=True)
    agg_path = dest / "aggregate.csv"
    AggregateTable.from_reports(reports, "wql", baseline).write(agg_path, provenance)
    AggregateTable.from_reports(reports, "mase", baseline).write(dest / "aggregate_mase.csv", provenance)
    plot_path = dest / "plot_data.csv"
    with plot_path.open("w", newline="") as fh:
        if provenance:
            fh.write(_comment(provenance))
        w = csv.writer(fh)
        w.writerow(["model", "dataset_group", "metric", "value"])
        w.writerows((m, g, k, repr(v)) for m, g, k, v in plot_rows(reports))
    return agg_path, plot_path
