"""Run files: JSON run configs, metrics and role CSVs, and checkpoints."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import os
import zipfile
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .nn import ParamSet
from .trainer import METRIC_COLUMNS, TrainConfig, Trainer

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
OUTPUT_ENV = "ROLE_FORGE_OUTPUT_DIR"
ROLE_COLUMNS = ("episode", "t", "agent", "duty_label", "mu0", "mu1", "mu2", "s0", "s1", "s2")


# --- run config -------------------------------------------------------------------------


@dataclass
class RunConfig:
    train: TrainConfig
    run_name: str = "run"
    output_dir: str = "runs"

    @property
    def run_dir(self) -> Path:
        return Path(self.output_dir) / self.run_name

    def to_dict(self):
        return {**self.train.to_dict(), "run_name": self.run_name, "output_dir": self.output_dir}


def parse_run_config(doc: dict, overrides=None) -> RunConfig:
    """Build a RunConfig from a JSON object; unknown keys are an error."""
    if not isinstance(doc, dict):
        raise ValueError("run config must be a JSON object")
    doc = {**doc, **(overrides or {})}
    train_keys = {f.name for f in fields(TrainConfig)}
    unknown = sorted(set(doc) - train_keys - {"run_name", "output_dir"})
    if unknown:
        raise ValueError(f"unknown config keys: {', '.join(unknown)}")
    train = TrainConfig(**{k: v for k, v in doc.items() if k in train_keys})
    out = RunConfig(train, str(doc.get("run_name", "run")), str(doc.get("output_dir", "runs")))
    if os.environ.get(OUTPUT_ENV):
        out.output_dir = os.environ[OUTPUT_ENV]
    return out


def load_run_config(path, overrides=None) -> RunConfig:
    with open(path) as fh:
        return parse_run_config(json.load(fh), overrides)


def write_resolved_config(cfg: RunConfig, path) -> None:
    with open(path, "w") as fh:
        json.dump(cfg.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def config_hash(cfg: TrainConfig) -> str:
    return hashlib.sha256(json.dumps(cfg.to_dict(), sort_keys=True).encode()).hexdigest()


# --- CSV outputs ------------------------------------------------------------------------


def format_value(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.17g}"
    return str(v)


class MetricsWriter:
    """Append-only metrics CSV; the header is written once, every row is flushed."""

    def __init__(self, path):
        self.path = Path(path)
        fresh = not self.path.exists() or self.path.stat().st_size == 0
        self._fh = open(self.path, "a", newline="")
        self._writer = csv.writer(self._fh, lineterminator="\n")
        if fresh:
            self._writer.writerow(METRIC_COLUMNS)
            self._fh.flush()
        self.rows = 0

    def write(self, row: dict) -> None:
        self._writer.writerow([format_value(row[c]) for c in METRIC_COLUMNS])
        self._fh.flush()
        self.rows += 1

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_metrics(path) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != METRIC_COLUMNS:
            raise ValueError(f"{path}: unexpected metrics header {reader.fieldnames}")
        return [{k: float(v) for k, v in row.items()} for row in reader]


def write_roles(rows, path) -> int:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ROLE_COLUMNS)
        for r in rows:
            w.writerow([format_value(v) for v in r])
    return len(rows)


def read_roles(path) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != ROLE_COLUMNS:
            raise ValueError(f"{path}: unexpected roles header {reader.fieldnames}")
        out = []
        for row in reader:
            out.append({k: (v if k == "duty_label" else float(v)) for k, v in row.items()})
        return out


# --- checkpoints ------------------------------------------------------------------------


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(trainer: Trainer, path) -> None:
    """Parameters, target parameters, optimizer state and counters in one npz.

    The file is written to a temporary name and moved into place, so a crash
    never leaves a half-written checkpoint under ``path``.
    """
    header = {
        "format_version": FORMAT_VERSION,
        "config_hash": config_hash(trainer.cfg),
        "config": trainer.cfg.to_dict(),
        "env_kind": trainer.cfg.env_kind,
        "updates": trainer.updates,
        "env_steps": trainer.env_steps,
        "rounds": trainer.rounds,
        "rng": {"sample": trainer.sample_rng.bit_generator.state},
    }
    arrays = {"__header__": np.frombuffer(json.dumps(header).encode(), dtype=np.uint8)}
    for group, tensors in (("param", trainer.params), ("target", trainer.target), ("opt", trainer.opt_state)):
        for k, v in tensors.items():
            arrays[f"{group}:{k}"] = v
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        np.savez(fh, **arrays)
    os.replace(tmp, path)


@dataclass
class Checkpoint:
    header: dict
    params: ParamSet
    target: ParamSet
    opt_state: dict

    @property
    def config(self) -> TrainConfig:
        return TrainConfig(**self.header["config"])


def load_checkpoint(path, expected: TrainConfig | None = None, force=False) -> Checkpoint:
    """Read a checkpoint written by :func:`save_checkpoint`.

    Refuses files from another format version. When ``expected`` is given and
    its hash differs from the stored one, a warning is logged and loading only
    proceeds with ``force``.
    """
    try:
        with np.load(path, allow_pickle=False) as data:
            arrays = {k: data[k] for k in data.files}
    except (OSError, ValueError, EOFError, zipfile.BadZipFile) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if "__header__" not in arrays:
        raise CheckpointError(f"{path} has no header")
    try:
        header = json.loads(arrays.pop("__header__").tobytes().decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header") from exc
    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {version}, this build reads {FORMAT_VERSION}")
    if expected is not None and config_hash(expected) != header["config_hash"]:
        log.warning("checkpoint %s was written with a different config", path)
        if not force:
            raise CheckpointError(f"{path}: config hash mismatch (use --force to load anyway)")
    groups = {"param": {}, "target": {}, "opt": {}}
    for key, arr in arrays.items():
        group, _, name = key.partition(":")
        if group not in groups:
            raise CheckpointError(f"{path}: unexpected entry {key}")
        groups[group][name] = arr
    return Checkpoint(header, ParamSet(groups["param"]), ParamSet(groups["target"]), groups["opt"])


def restore_trainer(ckpt: Checkpoint, cfg: TrainConfig | None = None) -> Trainer:
    """Trainer with parameters, optimizer state, counters and sampling RNG restored.

    The replay buffer is not part of a checkpoint and starts empty.
    """
    tr = Trainer(cfg or ckpt.config)
    if set(tr.params.keys()) != set(ckpt.params.keys()):
        raise CheckpointError("checkpoint parameters do not match the model layout")
    tr.params = ckpt.params.copy()
    tr.target = ckpt.target.copy()
    tr.opt_state = {k: v.copy() for k, v in ckpt.opt_state.items()}
    tr.updates = int(ckpt.header["updates"])
    tr.env_steps = int(ckpt.header["env_steps"])
    tr.rounds = int(ckpt.header["rounds"])
    tr.sample_rng.bit_generator.state = ckpt.header["rng"]["sample"]
    return tr


def is_finite_row(row: dict) -> bool:
    return all(math.isfinite(row[c]) for c in ("l_td", "l_i", "l_d", "total"))
