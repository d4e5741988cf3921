"""On-disk formats: dataset manifests + JSON Lines, model checkpoints, loss traces."""

from __future__ import annotations

import base64
import csv
import hashlib
import json
from pathlib import Path

import numpy as np

from .adapters import AdapterHyper, AdapterVariant, CompositeModel
from .backbone import BackboneConfig
from .nn import Params
from .synthgen import DatasetSpec, TimeSeriesRecord, records_checksum
from .tokenizer import TokenizerConfig

CHECKPOINT_FORMAT = "covadapt-checkpoint"
CHECKPOINT_VERSION = 1


class DataError(RuntimeError):
    """Missing, malformed or corrupted files."""


def file_sha256(path: Path) -> str:
    h = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def config_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]


def _dump_json(path: Path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# ----------------------------------------------------------------------
# Datasets
# ----------------------------------------------------------------------


def dataset_paths(root: Path, dataset_id: str) -> tuple[Path, Path]:
    d = Path(root) / dataset_id
    return d / "manifest.json", d / "series.jsonl"


def write_dataset(root: Path, spec: DatasetSpec, records: list[TimeSeriesRecord], provenance: dict | None = None) -> Path:
    """Write ``series.jsonl`` and ``manifest.json`` under ``root/<dataset_id>``.

    Floats are written with ``repr`` precision so values round-trip exactly.
    """
    manifest_path, series_path = dataset_paths(root, spec.dataset_id)
    series_path.parent.mkdir(parents=True, exist_ok=True)
    with series_path.open("w") as fh:
        for r in records:
            fh.write(json.dumps(r.to_json()) + "\n")
    manifest = {
        "dataset_id": spec.dataset_id,
        "group": spec.group,
        "spec": spec.to_dict(),
        "n_series": len(records),
        "series_sha256": file_sha256(series_path),
        "records_sha256": records_checksum(records),
        "provenance": provenance or {},
    }
    _dump_json(manifest_path, manifest)
    return manifest_path


def read_manifest(root: Path, dataset_id: str) -> dict:
    manifest_path, _ = dataset_paths(root, dataset_id)
    try:
        return json.loads(manifest_path.read_text())
    except FileNotFoundError:
        raise DataError(f"missing manifest {manifest_path}") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"malformed manifest {manifest_path}: {exc}") from None


def verify_dataset(root: Path, dataset_id: str) -> dict:
    """Check the series file against its manifest checksum; returns the manifest."""
    manifest = read_manifest(root, dataset_id)
    _, series_path = dataset_paths(root, dataset_id)
    if not series_path.exists():
        raise DataError(f"missing series file {series_path}")
    actual = file_sha256(series_path)
    if actual != manifest["series_sha256"]:
        raise DataError(f"checksum mismatch for {series_path}: expected {manifest['series_sha256']}, found {actual}")
    return manifest


def read_dataset(root: Path, dataset_id: str, verify: bool = True) -> tuple[DatasetSpec, list[TimeSeriesRecord]]:
    manifest = verify_dataset(root, dataset_id) if verify else read_manifest(root, dataset_id)
    _, series_path = dataset_paths(root, dataset_id)
    meta = {"dataset_id": dataset_id}
    with series_path.open() as fh:
        records = [TimeSeriesRecord.from_json(json.loads(line), dict(meta)) for line in fh if line.strip()]
    return DatasetSpec.from_dict(manifest["spec"]), records


# ----------------------------------------------------------------------
# Checkpoints
# ----------------------------------------------------------------------


def _encode(arr: np.ndarray) -> dict:
    a = np.ascontiguousarray(arr, dtype="<f8")
    return {"shape": list(a.shape), "dtype": "<f8", "data": base64.b64encode(a.tobytes()).decode("ascii")}


def _decode(d: dict) -> np.ndarray:
    raw = base64.b64decode(d["data"])
    return np.frombuffer(raw, dtype=d["dtype"]).reshape(d["shape"]).astype(np.float64)


def encode_params(params: Params) -> dict:
    return {k: _encode(params[k]) for k in sorted(params)}


def decode_params(d: dict) -> Params:
    return {k: _decode(v) for k, v in d.items()}


def params_checksum(params: Params) -> str:
    h = hashlib.sha256()
    for k in sorted(params):
        h.update(k.encode())
        h.update(np.ascontiguousarray(params[k], dtype="<f8").tobytes())
    return h.hexdigest()


def save_backbone(path: Path, params: Params, cfg: BackboneConfig, tok: TokenizerConfig, extra: dict | None = None) -> None:
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "kind": "backbone",
        "backbone_config": cfg.to_dict(),
        "tokenizer_config": tok.to_dict(),
        "backbone": encode_params(params),
        "backbone_sha256": params_checksum(params),
        "extra": extra or {},
    }
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    _dump_json(path, doc)


def _load_doc(path: Path) -> dict:
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise DataError(f"missing checkpoint {path}") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"malformed checkpoint {path}: {exc}") from None
    if doc.get("format") != CHECKPOINT_FORMAT or doc.get("version") != CHECKPOINT_VERSION:
        raise DataError(f"{path} is not a version {CHECKPOINT_VERSION} checkpoint")
    return doc


def load_backbone(path: Path) -> tuple[Params, BackboneConfig, TokenizerConfig]:
    doc = _load_doc(path)
    params = decode_params(doc["backbone"])
    if params_checksum(params) != doc["backbone_sha256"]:
        raise DataError(f"backbone checksum mismatch in {path}")
    return params, BackboneConfig(**doc["backbone_config"]), TokenizerConfig(**doc["tokenizer_config"])


def save_composite(path: Path, model: CompositeModel, tok: TokenizerConfig, extra: dict | None = None, include_backbone: bool = True) -> None:
    """Backbone checkpoint document extended with the variant tag and adapter arrays.

    With ``include_backbone=False`` only the backbone checksum is recorded,
    which suffices for frozen models whose backbone lives elsewhere.
    """
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "kind": "composite",
        "backbone_config": model.config.to_dict(),
        "tokenizer_config": tok.to_dict(),
        "backbone_sha256": params_checksum(model.backbone),
        "variant": model.variant.value,
        "freeze_backbone": model.freeze_backbone,
        "adapter_hyper": {"hidden": model.hyper.hidden, "cov_dim": model.hyper.cov_dim},
        "adapter": encode_params(model.adapter),
        "extra": extra or {},
    }
    if include_backbone:
        doc["backbone"] = encode_params(model.backbone)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    _dump_json(path, doc)


def load_composite(path: Path, backbone: Params | None = None) -> tuple[CompositeModel, TokenizerConfig]:
    doc = _load_doc(path)
    if doc.get("kind") != "composite":
        raise DataError(f"{path} is not a composite checkpoint")
    if "backbone" in doc:
        bbp = decode_params(doc["backbone"])
    elif backbone is not None:
        bbp = backbone
    else:
        raise DataError(f"{path} stores no backbone; pass the backbone parameters")
    if params_checksum(bbp) != doc["backbone_sha256"]:
        raise DataError(f"backbone checksum mismatch for {path}")
    model = CompositeModel(
        bbp,
        BackboneConfig(**doc["backbone_config"]),
        decode_params(doc["adapter"]),
        AdapterVariant(doc["variant"]),
        bool(doc["freeze_backbone"]),
        AdapterHyper(**doc["adapter_hyper"]),
    )
    return model, TokenizerConfig(**doc["tokenizer_config"])


def write_trace(path: Path, rows, provenance: dict | None = None) -> None:
    """Loss trace CSV with columns step, train_loss, val_wql (blank between checkpoints)."""
    with Path(path).open("w", newline="") as fh:
        if provenance:
            fh.write("# " + " ".join(f"{k}={provenance[k]}" for k in sorted(provenance)) + "\n")
        w = csv.writer(fh)
        w.writerow(["step", "train_loss", "val_wql"])
        for r in rows:
            loss = "" if not np.isfinite(r.train_loss) else repr(float(r.train_loss))
            w.writerow([r.step, loss, "" if r.val_wql is None else repr(float(r.val_wql))])
