"""File formats for datasets and run manifests.

Floats are written with 17 significant digits, CSVs use LF line endings
and always carry a header row.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import platform
from pathlib import Path

import numpy as np

from . import __version__
from .core import FLOAT_FMT, DatasetCollection, spec_from_dict
from .errors import ConfigError, DataError

DATASET_CSV = "dataset.csv"
DATASET_META = "dataset.json"


def fmt(x) -> str:
    return FLOAT_FMT.format(float(x))


def jsonable(obj):
    """Recursively turn numpy values into builtins and non-finite floats into strings."""
    if isinstance(obj, dict):
        return {str(k): jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return jsonable(obj.tolist())
    if isinstance(obj, np.generic):
        obj = obj.item()
    if isinstance(obj, float) and not np.isfinite(obj):
        return str(obj)
    return obj


def canonical_json(obj) -> str:
    return json.dumps(jsonable(obj), sort_keys=True, separators=(",", ":"), allow_nan=False)


def digest(obj) -> str:
    """sha256 of the canonical JSON form."""
    return hashlib.sha256(canonical_json(obj).encode()).hexdigest()


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_text(path, text: str):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="\n", encoding="utf-8") as fh:
        fh.write(text)


def write_json(path, obj):
    write_text(path, json.dumps(jsonable(obj), sort_keys=True, indent=2, allow_nan=False) + "\n")


def load_json(path) -> dict:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from None
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}: {exc.msg}") from None
    if not isinstance(obj, dict):
        raise ConfigError(f"{path}:1: expected a JSON object")
    return obj


# --------------------------------------------------------------------------
# datasets


def dataset_to_csv(data: DatasetCollection) -> str:
    """Columns ``source,id,label,stratum,e0..,f0..``; missing label/stratum are empty."""
    n_e = 0 if data.embeddings is None else data.embeddings.shape[1]
    n_f = 0 if data.features is None else data.features.shape[1]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["source", "id", "label", "stratum"] + [f"e{j}" for j in range(n_e)] + [f"f{j}" for j in range(n_f)])
    for r in range(data.n):
        label = int(data.labels[r])
        row = [int(data.source[r]), int(data.ids[r]), "" if label < 0 else label]
        row.append("" if data.strata is None else int(data.strata[r]))
        if n_e:
            row += [fmt(v) for v in data.embeddings[r]]
        if n_f:
            row += [fmt(v) for v in data.features[r]]
        w.writerow(row)
    return buf.getvalue()


def dataset_from_csv(text: str, M: int | None = None, path="<dataset>") -> DatasetCollection:
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise DataError(f"{path}:1: empty file") from None
    if header[:4] != ["source", "id", "label", "stratum"]:
        raise DataError(f"{path}:1: header must start with source,id,label,stratum")
    e_cols = [j for j, h in enumerate(header) if h.startswith("e")]
    f_cols = [j for j, h in enumerate(header) if h.startswith("f")]
    src, ids, labels, strata, emb, feat = [], [], [], [], [], []
    for lineno, row in enumerate(reader, start=2):
        if len(row) != len(header):
            raise DataError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
        try:
            src.append(int(row[0]))
            ids.append(int(row[1]))
            labels.append(int(row[2]) if row[2] != "" else -1)
            strata.append(int(row[3]) if row[3] != "" else None)
            emb.append([float(row[j]) for j in e_cols])
            feat.append([float(row[j]) for j in f_cols])
        except ValueError as exc:
            raise DataError(f"{path}:{lineno}: {exc}") from None
    if not src:
        raise DataError(f"{path}: no rows")
    has_strata = [s is not None for s in strata]
    if any(has_strata) and not all(has_strata):
        raise DataError(f"{path}: stratum must be set on every row or on none")
    try:
        return DatasetCollection.from_arrays(
            src,
            ids,
            labels,
            strata=np.array(strata, dtype=np.int64) if all(has_strata) else None,
            embeddings=np.array(emb) if e_cols else None,
            features=np.array(feat) if f_cols else None,
            M=M,
        )
    except DataError as exc:
        raise type(exc)(f"{path}: {exc}") from None


def save_dataset(out_dir, data: DatasetCollection, meta: dict) -> list[Path]:
    out_dir = Path(out_dir)
    meta = {**meta, "K": data.K, "M": data.M, "n_k": data.n_k.tolist()}
    write_text(out_dir / DATASET_CSV, dataset_to_csv(data))
    write_json(out_dir / DATASET_META, meta)
    return [out_dir / DATASET_CSV, out_dir / DATASET_META]


def load_dataset(ds_dir) -> tuple[DatasetCollection, dict]:
    ds_dir = Path(ds_dir)
    meta = load_json(ds_dir / DATASET_META) if (ds_dir / DATASET_META).exists() else {}
    path = ds_dir / DATASET_CSV
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"{path}: {exc.strerror}") from None
    return dataset_from_csv(text, M=meta.get("M"), path=path), meta


def specs_from_meta(meta: dict):
    specs = meta.get("true_specs")
    if specs is None:
        raise ConfigError("dataset has no ground-truth biasing functions; pick another --bias mode")
    return [spec_from_dict(s) for s in specs]


# --------------------------------------------------------------------------
# manifests


def versions() -> dict:
    return {"artifact": __version__, "numpy": np.__version__, "python": platform.python_version()}


def manifest(command: str, config: dict, seed: int, inputs, outputs, out_dir, wall_time: float, args: dict) -> dict:
    """Run record; output paths are relative to ``out_dir`` and carry their sha256."""
    out_dir = Path(out_dir)
    return {
        "command": command,
        "args": args,
        "config": config,
        "config_digest": digest(config),
        "seed": seed,
        "versions": versions(),
        "inputs": {str(p): file_digest(p) for p in inputs},
        "outputs": {str(Path(p).relative_to(out_dir)): file_digest(p) for p in outputs},
        "wall_time": wall_time,
    }
