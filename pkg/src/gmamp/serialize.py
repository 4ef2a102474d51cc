"""On-disk formats: configs, checkpoints, result tables, manifests, logs.

Everything is JSON or CSV.  Floats are written with Python's shortest
round-trip repr, so saving and reloading a model reproduces the exact same
doubles and identical runs produce byte-identical files.
"""

import csv
import hashlib
import json

import numpy as np

from .mixtures import GaussianMixture
from .network import UnfoldedModel
from .simulate import ExperimentConfig

CHECKPOINT_FORMAT = "gmamp-checkpoint-1"

RESULT_COLUMNS = [
    "algorithm", "prior", "N", "delta", "epsilon", "snr_db", "layer",
    "nmse_db_mean", "nmse_db_stderr", "diverged_count", "trials",
]

TRAINING_LOG_COLUMNS = ["stage", "depth", "step", "train_nmse_db", "val_nmse_db", "lr"]


def _canonical_json(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def config_hash(config):
    """Stable sha256 over the canonical JSON form of the config."""
    return hashlib.sha256(_canonical_json(config.to_dict()).encode("utf-8")).hexdigest()


def load_config(path):
    with open(path, "r", encoding="utf-8") as fh:
        raw = json.load(fh)
    if not isinstance(raw, dict):
        raise ValueError("config file must contain a JSON object")
    return ExperimentConfig.from_dict(raw)


def save_config(path, config):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(config.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def _floats(arr):
    return [float(v) for v in np.asarray(arr, dtype=float).ravel()]


def save_checkpoint(path, model, config, stages=None):
    """Write a trained model with its config and a hash binding the two."""
    payload = {
        "format": CHECKPOINT_FORMAT,
        "config": config.to_dict(),
        "config_hash": config_hash(config),
        "N": model.N,
        "m": model.m,
        "n_layers": model.n_layers,
        "B": _floats(model.B),
        "layers": [
            {
                "weights": _floats(gm.weights),
                "means": _floats(gm.means),
                "variances": _floats(gm.variances),
            }
            for gm in model.layers
        ],
        "stages": stages if stages is not None else [],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path):
    """Read a checkpoint; returns (model, config, payload)."""
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError("unrecognized checkpoint format %r" % (payload.get("format"),))
    config = ExperimentConfig.from_dict(payload["config"])
    if payload["config_hash"] != config_hash(config):
        raise ValueError("checkpoint config hash mismatch; file may be corrupted")
    N, m = int(payload["N"]), int(payload["m"])
    B = np.array(payload["B"], dtype=float).reshape(N, m)
    layers = [
        GaussianMixture(rec["weights"], rec["means"], rec["variances"])
        for rec in payload["layers"]
    ]
    model = UnfoldedModel(B, layers)
    if model.n_layers != int(payload["n_layers"]):
        raise ValueError("checkpoint layer count mismatch")
    return model, config, payload


def _fmt(value):
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_results_csv(path, rows):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(RESULT_COLUMNS)
        for row in rows:
            writer.writerow([_fmt(row[c]) for c in RESULT_COLUMNS])


def read_results_csv(path):
    with open(path, "r", encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))


def write_training_log(path, log_rows):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRAINING_LOG_COLUMNS)
        for row in log_rows:
            writer.writerow([_fmt(v) for v in row])


def write_manifest(path, entries):
    """Small deterministic JSON record describing a command's outputs."""
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(entries, fh, indent=2, sort_keys=True)
        fh.write("\n")
