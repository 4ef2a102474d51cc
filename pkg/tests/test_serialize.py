"""Unit tests for the on-disk formats."""

import json

import numpy as np
import pytest

from gmamp.mixtures import GaussianMixture
from gmamp.network import UnfoldedModel
from gmamp.serialize import (
    RESULT_COLUMNS,
    config_hash,
    load_checkpoint,
    load_config,
    read_results_csv,
    save_checkpoint,
    save_config,
    write_manifest,
    write_results_csv,
    write_training_log,
)
from gmamp.simulate import ExperimentConfig, bernoulli_gauss


def demo_config(**kw):
    base = dict(prior=bernoulli_gauss(0.1), N=50, delta=0.5, snr_db=20.0, L=2, T_max=3, seed=1)
    base.update(kw)
    return ExperimentConfig(**base)


def demo_model(rng):
    B = rng.standard_normal((8, 4))
    layers = [
        GaussianMixture([0.5, 0.5], [0.0, 1.2345678901234567], [1e-12, 0.9]),
        GaussianMixture([0.25, 0.75], [-2.0, 0.1], [0.5, 0.5]),
    ]
    return UnfoldedModel(B, layers)


class TestConfigIo:
    def test_round_trip(self, tmp_path):
        cfg = demo_config(refine_lrs=(1e-4, 1e-5))
        path = tmp_path / "config.json"
        save_config(path, cfg)
        assert load_config(path) == cfg

    def test_rejects_non_object(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("[1, 2]")
        with pytest.raises(ValueError):
            load_config(path)

    def test_hash_stable_and_key_order_free(self, tmp_path):
        cfg = demo_config()
        h = config_hash(cfg)
        assert h == config_hash(demo_config())
        assert h != config_hash(demo_config(seed=2))
        assert len(h) == 64


class TestCheckpoint:
    def test_round_trip_exact_doubles(self, tmp_path):
        rng = np.random.default_rng(0)
        model = demo_model(rng)
        cfg = demo_config()
        path = tmp_path / "ckpt.json"
        save_checkpoint(path, model, cfg, stages=[{"stage": "learn_B", "steps": 3}])
        back, back_cfg, payload = load_checkpoint(path)
        assert np.array_equal(back.B, model.B)
        for a, b in zip(back.layers, model.layers):
            assert np.array_equal(a.weights, b.weights)
            assert np.array_equal(a.means, b.means)
            assert np.array_equal(a.variances, b.variances)
        assert back_cfg == cfg
        assert payload["stages"][0]["stage"] == "learn_B"

    def test_byte_identical_rewrites(self, tmp_path):
        rng = np.random.default_rng(4)
        model = demo_model(rng)
        cfg = demo_config()
        p1, p2 = tmp_path / "a.json", tmp_path / "b.json"
        save_checkpoint(p1, model, cfg)
        save_checkpoint(p2, model, cfg)
        assert p1.read_bytes() == p2.read_bytes()

    def test_rejects_unknown_format(self, tmp_path):
        path = tmp_path / "ckpt.json"
        path.write_text(json.dumps({"format": "other"}))
        with pytest.raises(ValueError):
            load_checkpoint(path)

    def test_rejects_tampered_config(self, tmp_path):
        rng = np.random.default_rng(5)
        path = tmp_path / "ckpt.json"
        save_checkpoint(path, demo_model(rng), demo_config())
        payload = json.loads(path.read_text())
        payload["config"]["seed"] = 999
        path.write_text(json.dumps(payload))
        with pytest.raises(ValueError):
            load_checkpoint(path)


class TestTables:
    def test_results_round_trip(self, tmp_path):
        rows = [
            {
                "algorithm": "amp_gm", "prior": "bg", "N": 500, "delta": 0.5,
                "epsilon": 0.1, "snr_db": 20.0, "layer": 1,
                "nmse_db_mean": -8.123456789012345, "nmse_db_stderr": 0.0123,
                "diverged_count": 0, "trials": 100,
            }
        ]
        path = tmp_path / "results.csv"
        write_results_csv(path, rows)
        back = read_results_csv(path)
        assert list(back[0].keys()) == RESULT_COLUMNS
        assert float(back[0]["nmse_db_mean"]) == rows[0]["nmse_db_mean"]
        assert back[0]["algorithm"] == "amp_gm"

    def test_training_log(self, tmp_path):
        path = tmp_path / "log.csv"
        write_training_log(path, [("learn_B", 1, 0, float("nan"), -3.25, 0.01)])
        text = path.read_text().splitlines()
        assert text[0] == "stage,depth,step,train_nmse_db,val_nmse_db,lr"
        assert text[1].startswith("learn_B,1,0,nan,-3.25,")

    def test_manifest_deterministic(self, tmp_path):
        a, b = tmp_path / "1.json", tmp_path / "2.json"
        write_manifest(a, {"cmd": "train", "outputs": ["x.json"]})
        write_manifest(b, {"outputs": ["x.json"], "cmd": "train"})
        assert a.read_bytes() == b.read_bytes()
