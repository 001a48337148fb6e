"""
Tests for the Monte-Carlo benchmark harness.
Covers: experiment validation, presets, determinism, RMSE tables and result files.
"""
import csv
import json
import os

import numpy as np
import pytest

from array_model import make_linear_array, single_source_crb_deg
from bench_harness import (
    _draw_snapshot,
    CRB_CSV,
    MANIFEST_JSON,
    PRESETS,
    RMSE_CSV,
    TRIALS_CSV,
    ExperimentSpec,
    emit_results,
    preset,
    rmse_table,
    run_experiment,
)
from neural_net import default_layer_dims, init_model, load_model
from scenario_gen import make_rng
from sp2_inference import net_spectrum
from sp2_training import TrainConfig, train
from sparse_bpdn import SparseConfig
from spectrum_core import local_maxima
from tests.conftest import random_model


def coarse(**fields):
    """Small experiment on a 0.5° grid."""
    base = {"name": "t", "true_angles": [120.0], "snr_grid": [10.0, 30.0], "trials_per_snr": 2,
            "methods": ["bartlett"], "grid_step": 0.5, "seed": 4}
    base.update(fields)
    return ExperimentSpec(**base)


def read_rows(path):
    with open(path, newline="") as f:
        return list(csv.reader(f))


# ===========================================================================
# EXPERIMENT DEFINITIONS
# ===========================================================================

class TestExperimentSpec:
    """Tests for ExperimentSpec validation and presets"""

    def test_defaults(self):
        spec = ExperimentSpec()
        assert spec.snr_grid == [float(s) for s in range(41)]
        assert spec.trials_per_snr == 500
        assert len(spec.grid) == 9001

    def test_unknown_method_lists_valid_ones(self):
        with pytest.raises(ValueError, match="valid methods: bartlett, sparse, sp2net"):
            coarse(methods=["music"])

    def test_empty_methods(self):
        with pytest.raises(ValueError):
            coarse(methods=[])

    def test_duplicate_methods(self):
        with pytest.raises(ValueError):
            coarse(methods=["bartlett", "bartlett"])

    def test_angle_out_of_range(self):
        with pytest.raises(ValueError):
            coarse(true_angles=[180.0])

    def test_presets(self):
        assert set(PRESETS) == {"single_120", "two_100_105", "three_60_90_95", "three_63_67_72"}
        assert preset("three_63_67_72").true_angles == [63.0, 67.0, 72.0]
        assert preset("three_60_90_95").spectrum_snr_db == 30.0

    def test_preset_overrides(self):
        spec = preset("two_100_105", trials_per_snr=3, snr_grid=[20.0])
        assert spec.name == "two_100_105"
        assert spec.trials_per_snr == 3

    def test_unknown_preset(self):
        with pytest.raises(ValueError, match="available"):
            preset("four_sources")


# ===========================================================================
# RUNNING
# ===========================================================================

class TestRunExperiment:
    """Tests for run_experiment and rmse_table"""

    def test_high_snr_bartlett_is_exact(self):
        spec = ExperimentSpec(name="hi", true_angles=[120.0], snr_grid=[100.0], trials_per_snr=3,
                              methods=["bartlett"])
        result = run_experiment(spec)
        assert result.rmse_table[0].rmse_deg < 0.011

    def test_table_shape(self):
        spec = coarse(methods=["bartlett", "sparse"], snr_grid=[0.0, 20.0, 40.0])
        result = run_experiment(spec, sparse_cfg=SparseConfig(max_iterations=500))
        assert [(r.method, r.snr_db) for r in result.rmse_table] == [
            ("bartlett", 0.0), ("bartlett", 20.0), ("bartlett", 40.0),
            ("sparse", 0.0), ("sparse", 20.0), ("sparse", 40.0),
        ]
        assert all(r.trials == 2 for r in result.rmse_table)
        assert len(result.records) == 2 * 3 * 2
        assert all(isinstance(r.converged, bool) for r in result.records if r.method == "sparse")
        assert all(r.converged is None for r in result.records if r.method == "bartlett")

    def test_rmse_table_pools_trials(self):
        result = run_experiment(coarse(true_angles=[100.0, 105.0]))
        row = result.rmse_table[0]
        errors = np.concatenate([r.errors for r in result.records if r.snr_db == row.snr_db])
        assert row.rmse_deg == pytest.approx(np.sqrt(np.mean(errors ** 2)))
        assert rmse_table(result.spec, result.records) == result.rmse_table

    def test_same_seed_same_records(self):
        a = run_experiment(coarse(seed=9))
        b = run_experiment(coarse(seed=9))
        assert [r.rmse_deg for r in a.rmse_table] == [r.rmse_deg for r in b.rmse_table]
        for x, y in zip(a.records, b.records):
            assert np.array_equal(x.estimated_angles, y.estimated_angles)

    def test_worker_count_does_not_change_records(self):
        spec = coarse(trials_per_snr=4)
        serial = run_experiment(spec, workers=1)
        pooled = run_experiment(spec, workers=3)
        assert [(r.snr_db, r.trial) for r in serial.records] == [(r.snr_db, r.trial) for r in pooled.records]
        for x, y in zip(serial.records, pooled.records):
            assert np.array_equal(x.errors, y.errors)

    def test_sp2net_needs_model(self):
        with pytest.raises(ValueError, match="model"):
            run_experiment(coarse(methods=["sp2net"]))

    def test_sp2net_with_model(self):
        result = run_experiment(coarse(methods=["bartlett", "sp2net"]), model=random_model([65, 8, 1], seed=0))
        assert {r.method for r in result.records} == {"bartlett", "sp2net"}
        assert set(result.flagged_spectra) == {"bartlett", "sp2net"}
        assert result.model_dims == [65, 8, 1]

    def test_sparse_converges_on_default_grid(self):
        spec = preset("two_100_105", snr_grid=[20.0, 40.0], trials_per_snr=1, methods=["sparse"])
        result = run_experiment(spec)
        assert len(result.records) == 2
        assert all(r.converged for r in result.records)

    def test_model_width_checked(self):
        with pytest.raises(ValueError, match="4M\\+1"):
            run_experiment(coarse(methods=["sp2net"]), model=random_model([33, 8, 1], seed=0))


# ===========================================================================
# OUTPUT FILES
# ===========================================================================

class TestEmitResults:
    """Tests for emit_results"""

    def test_files_and_row_counts(self, tmp_path):
        spec = coarse(methods=["bartlett", "sparse"], snr_grid=[0.0, 20.0, 40.0])
        result = run_experiment(spec, sparse_cfg=SparseConfig(max_iterations=500))
        written = emit_results(result, str(tmp_path))
        assert written[-1].endswith(MANIFEST_JSON)
        assert len(read_rows(tmp_path / RMSE_CSV)) == 1 + 2 * 3
        assert len(read_rows(tmp_path / TRIALS_CSV)) == 1 + 2 * 3 * 2
        assert (tmp_path / CRB_CSV).exists()
        assert (tmp_path / "spectra" / "t_bartlett.txt").exists()
        assert (tmp_path / "spectra" / "t_sparse.txt").exists()

    def test_crb_uses_run_geometry(self, tmp_path):
        geom = make_linear_array([0.0, 0.5, 1.5, 2.0])
        result = run_experiment(coarse(), geom=geom)
        assert result.geometry == geom
        emit_results(result, str(tmp_path))
        rows = read_rows(tmp_path / CRB_CSV)[1:]
        assert [float(r[1]) for r in rows] == [single_source_crb_deg(geom, 120.0, snr) for snr in (10.0, 30.0)]

    def test_no_crb_for_multiple_sources(self, tmp_path):
        emit_results(run_experiment(coarse(true_angles=[100.0, 105.0])), str(tmp_path))
        assert not (tmp_path / CRB_CSV).exists()

    def test_manifest(self, tmp_path):
        emit_results(run_experiment(coarse()), str(tmp_path))
        manifest = json.loads((tmp_path / MANIFEST_JSON).read_text())
        assert manifest["seed"] == 4
        assert manifest["num_elements"] == 16
        assert manifest["sparse"] is None
        assert "numpy" in manifest["versions"]
        assert RMSE_CSV in manifest["files"]
        assert not os.path.exists(str(tmp_path / (MANIFEST_JSON + ".tmp")))

    def test_same_seed_byte_identical_csv(self, tmp_path):
        emit_results(run_experiment(coarse(seed=21)), str(tmp_path / "a"))
        emit_results(run_experiment(coarse(seed=21), workers=2), str(tmp_path / "b"))
        for name in (RMSE_CSV, TRIALS_CSV, CRB_CSV, MANIFEST_JSON):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_rmse_values_round_trip_exactly(self, tmp_path):
        result = run_experiment(coarse())
        emit_results(result, str(tmp_path))
        rows = read_rows(tmp_path / RMSE_CSV)[1:]
        assert [float(r[2]) for r in rows] == [r.rmse_deg for r in result.rmse_table]


# ===========================================================================
# TRAINED NETWORK
# ===========================================================================

# Path to an already trained default-architecture model; trained here if unset
TRAINED_MODEL_ENV = "SP2NET_TRAINED_MODEL"


class TestTrainedNetwork:
    """Fully trained network against Bartlett on two sources 5° apart at 25 dB"""

    @pytest.mark.slow
    def test_close_pair_resolved_at_25db(self, ula16, target_spec):
        workers = os.cpu_count() or 1
        path = os.getenv(TRAINED_MODEL_ENV)
        if path:
            model = load_model(path)
        else:
            initial = init_model(default_layer_dims(16), make_rng(0))
            model = train(initial, TrainConfig(), target_spec, ula16, workers=workers).model

        spec = preset("two_100_105", snr_grid=[25.0], trials_per_snr=100,
                      methods=["bartlett", "sp2net"], seed=3)
        result = run_experiment(spec, model=model, geom=ula16, workers=workers)
        rmse = {row.method: row.rmse_deg for row in result.rmse_table}
        assert rmse["sp2net"] < rmse["bartlett"]

        resolved = 0
        for trial in range(spec.trials_per_snr):
            snapshot, sigma_v = _draw_snapshot(spec, ula16, 25.0, make_rng(spec.seed, 0, trial))
            spectrum = net_spectrum(model, ula16, snapshot, sigma_v, spec.grid, workers=workers)
            maxima = spectrum.grid.angles[local_maxima(spectrum.scores)]
            if all(np.any(np.abs(maxima - doa) <= 1.0) for doa in spec.true_angles):
                resolved += 1
        assert resolved > spec.trials_per_snr // 2
