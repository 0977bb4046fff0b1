import csv
import json
import xml.etree.ElementTree as ET
from dataclasses import replace

import numpy as np
import pytest

from popmeta import cli, outputs
from popmeta.experiment import (
    ExperimentConfig,
    Problem,
    ResultRecord,
    build_cell_data,
    run_experiment,
    select_hidden,
)
from popmeta.meta import MAMLConfig
from popmeta.metrics import nmse, population_sigma


def small_config(problem=Problem.ONE, **overrides):
    base = dict(
        problem=problem,
        master_seed=101,
        n_train_structures=2,
        hidden_sizes=(8,),
        shot_counts=(2, 5),
        n_test_structures=8,
        eval_samples_per_structure=40,
        train_samples_per_structure=50,
        maml=MAMLConfig(epochs=120),
        gp_restarts=4,
    )
    base.update(overrides)
    return ExperimentConfig(**base)


@pytest.fixture(scope="module")
def small_result():
    return run_experiment(small_config())


class TestSelectHidden:
    def test_picks_minimum(self):
        assert select_hidden({10: 0.5, 20: 0.3}) == 20

    def test_tie_breaks_to_smaller(self):
        assert select_hidden({20: 0.3, 10: 0.3}) == 10

    def test_matches_linear_scan(self, rng):
        losses = {h: float(v) for h, v in
                  zip(range(10, 101, 10), rng.uniform(0.1, 1.0, 10))}
        best, best_loss = None, np.inf
        for h in sorted(losses):
            if losses[h] < best_loss:
                best, best_loss = h, losses[h]
        assert select_hidden(losses) == best

    def test_empty(self):
        with pytest.raises(ValueError):
            select_hidden({})


class TestExperimentConfig:
    def test_shot_counts_bounded(self):
        with pytest.raises(ValueError):
            small_config(shot_counts=(0, 5))
        with pytest.raises(ValueError):
            small_config(shot_counts=(5, 11))

    def test_problem_aliases(self):
        assert Problem.parse("one") is Problem.ONE
        assert Problem.parse("2") is Problem.TWO
        assert Problem.parse("frf_pca3") is Problem.THREE
        assert Problem.parse(Problem.TWO) is Problem.TWO


class TestRunExperiment:
    def test_record_layout(self, small_result):
        records = small_result.records
        assert len(records) == 4  # 2 shot counts x 2 methods
        for r in records:
            assert len(r.per_structure_nmse) == 8
            assert r.problem == "line_1hz"
        methods = {(r.method, r.shots) for r in records}
        assert methods == {("maml", 2), ("maml", 5), ("gp", 2), ("gp", 5)}

    def test_aggregates_recomputable(self, small_result):
        for r in small_result.records:
            vals = [v for v in r.per_structure_nmse if np.isfinite(v)]
            assert r.nmse_mean == pytest.approx(np.mean(vals), abs=1e-9)
            assert r.nmse_std == pytest.approx(np.std(vals), abs=1e-9)

    def test_audit_trail(self, small_result):
        assert small_result.audit["train_test_id_overlap"] == []
        assert small_result.audit["shot_eval_temperature_clashes"] == 0
        assert small_result.audit["meta_update_sees_test_tasks"] is False

    def test_selected_hidden_consistent(self, small_result):
        assert small_result.selected_hidden == select_hidden(
            small_result.validation_losses)
        assert small_result.model.params.hidden == small_result.selected_hidden

    def test_deterministic_and_parallel_invariant(self):
        cfg = small_config(n_test_structures=6, shot_counts=(3,))
        a = run_experiment(cfg)
        b = run_experiment(cfg)
        c = run_experiment(replace(cfg, workers=2))
        for x, y in ((a, b), (a, c)):
            for ra, rb in zip(x.records, y.records):
                assert ra.per_structure_nmse == rb.per_structure_nmse
                assert ra.nmse_mean == rb.nmse_mean

    def test_mean_predictor_ceiling_all_problems(self):
        # Eq-anchor: emitting the population mean must score ~100 on every problem
        for problem in Problem:
            cfg = small_config(problem=problem, n_test_structures=10,
                               eval_samples_per_structure=30)
            data = build_cell_data(cfg)
            all_targets = np.concatenate([ts.eval_y for ts in data.test_sets])
            sigma = population_sigma(all_targets)
            mean_vec = all_targets.mean(axis=0)
            per_structure = [
                nmse(np.tile(mean_vec, (ts.eval_y.shape[0], 1)), ts.eval_y, sigma)
                for ts in data.test_sets
            ]
            assert 95.0 <= np.mean(per_structure) <= 105.0

    def test_problem_three_uses_frozen_projection(self):
        cfg = small_config(problem=Problem.THREE, n_test_structures=4,
                           shot_counts=(3,))
        data = build_cell_data(cfg)
        assert data.pca_model is not None
        assert data.test_sets[0].eval_y.shape[1] == 3
        assert data.train_tasks[0][1].shape[1] == 3
        # latent targets really are the projection of the raw FRF targets
        from popmeta.pca import pca_transform
        from popmeta.population import FrequencyGrid, make_task_dataset
        from popmeta.seeding import derive_seed

        ts = data.test_sets[0]
        raw = make_task_dataset(ts.structure, cfg.eval_samples_per_structure,
                                Problem.THREE.target_kind, cfg.temperature_range,
                                FrequencyGrid.default(),
                                seed=derive_seed(cfg.master_seed, "evaldata"))
        np.testing.assert_allclose(ts.eval_y, pca_transform(data.pca_model, raw.targets))


class TestOutputs:
    def test_csv_single_record(self, tmp_path):
        rec = ResultRecord("line_1hz", "maml", 8, 20, 5, 1.25, 0.5,
                           [1.0, 1.5], 3.3)
        path = tmp_path / "results.csv"
        outputs.write_results_csv([rec], path)
        rows = open(path).read().strip().splitlines()
        assert len(rows) == 2
        assert rows[0] == ",".join(outputs.RESULTS_COLUMNS)

    def test_csv_roundtrip_full_precision(self, small_result, tmp_path):
        path = tmp_path / "results.csv"
        outputs.write_results_csv(small_result.records, path)
        loaded = outputs.read_results_csv(path)
        original = sorted(small_result.records, key=outputs._record_sort_key)
        assert len(loaded) == len(original)
        for a, b in zip(loaded, original):
            assert a.nmse_mean == b.nmse_mean  # exact, not approximate
            assert a.nmse_std == b.nmse_std
            assert (a.method, a.shots, a.hidden) == (b.method, b.shots, b.hidden)

    def test_svg_bar_geometry_matches_values(self, small_result, tmp_path):
        charts = outputs.charts_for_records(small_result.records)
        assert set(charts) == {"line_1hz_maml.svg", "line_1hz_gp.svg"}
        by_key = {(r.method, r.shots): r for r in small_result.records}
        for name, svg in charts.items():
            method = name.replace("line_1hz_", "").replace(".svg", "")
            root = ET.fromstring(svg)
            ns = {"s": "http://www.w3.org/2000/svg"}
            plot = root.find(".//s:rect[@class='plot-area']", ns)
            ymax = float(plot.attrib["data-ymax"])
            plot_h = float(plot.attrib["height"])
            bars = root.findall(".//s:rect[@class='bar']", ns)
            assert bars, name
            for bar in bars:
                if bar.attrib["data-value"] == "nan":
                    continue
                value = float(bar.attrib["data-value"])
                height = float(bar.attrib["height"])
                assert height / plot_h * ymax == pytest.approx(value, rel=1e-9)
                rec = by_key[(method, int(bar.attrib["data-shots"]))]
                assert value == pytest.approx(rec.nmse_mean, rel=1e-12)

    def test_emit_outputs_writes_everything(self, small_result, tmp_path):
        dest = tmp_path / "out"
        written = outputs.emit_outputs(
            small_result.records, dest,
            manifest_extra={"note": "test"},
            checkpoints={"cell.json": {"x": 1}},
            structure_ids=[f"te{i:03d}" for i in range(8)],
        )
        names = {p.replace(str(dest) + "/", "") for p in written}
        assert {"results.csv", "per_structure.csv", "manifest.json",
                "figures/line_1hz_maml.svg", "figures/line_1hz_gp.svg",
                "checkpoints/cell.json"} <= names
        manifest = json.load(open(dest / "manifest.json"))
        assert manifest["note"] == "test"
        rows = list(csv.DictReader(open(dest / "per_structure.csv")))
        assert len(rows) == 4 * 8
        assert rows[0]["structure_id"] == "te000"

    def test_nice_ceiling(self):
        assert outputs._nice_ceiling(0.7) == 1.0
        assert outputs._nice_ceiling(1.0) == 1.0
        assert outputs._nice_ceiling(3.0) == 5.0
        assert outputs._nice_ceiling(62.0) == 100.0
        assert outputs._nice_ceiling(float("nan")) == 1.0


class TestCLI:
    def test_int_list(self):
        assert cli.int_list("2,4,6,8") == (2, 4, 6, 8)
        assert cli.int_list("1-10") == tuple(range(1, 11))
        assert cli.int_list("1,3-5") == (1, 3, 4, 5)

    def test_seed_required_for_sweep(self, capsys):
        with pytest.raises(SystemExit):
            cli.main(["sweep", "--problem", "one", "--out", "/tmp/x"])

    def test_generate(self, tmp_path):
        rc = cli.main([
            "generate", "--problem", "one", "--out", str(tmp_path),
            "--n-structures", "3", "--samples", "4", "--seed", "5",
        ])
        assert rc == 0
        rows = list(csv.DictReader(open(tmp_path / "dataset_line_1hz.csv")))
        assert len(rows) == 12
        manifest = json.load(open(tmp_path / "dataset_manifest.json"))
        assert manifest["stiffness_interval"] == [8000.0, 12000.0]
        assert manifest["temperature_range"] == [0.0, 20.0]
        assert manifest["seed"] == 5
        assert len(manifest["grid_hz"]) == 100

    def test_config_file_roundtrip(self, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text(
            "# comment line\n"
            "problem = one\n"
            "n_structures = 2\n"
            "samples = 3\n"
            "seed = 9\n"
        )
        out = tmp_path / "data"
        rc = cli.main(["generate", "--config", str(cfg), "--out", str(out),
                       "--samples", "5"])  # explicit flag beats config value
        assert rc == 0
        rows = list(csv.DictReader(open(out / "dataset_line_1hz.csv")))
        assert len(rows) == 2 * 5

    def test_config_file_unknown_key(self, tmp_path):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("no_such_flag = 3\n")
        with pytest.raises(ValueError):
            cli.main(["generate", "--config", str(cfg), "--out", str(tmp_path),
                      "--seed", "1"])

    def test_train_then_evaluate(self, tmp_path):
        ck = tmp_path / "ck.json"
        rc = cli.main([
            "train", "--problem", "one", "--n-train", "2", "--hidden", "8",
            "--seed", "101", "--out", str(ck),
            "--epochs", "120", "--train-samples", "50",
        ])
        assert rc == 0
        payload = json.load(open(ck))
        assert payload["format"] == "popmeta-checkpoint-v1"
        assert payload["selected_hidden"] == 8

        out = tmp_path / "eval"
        rc = cli.main([
            "evaluate", "--checkpoint", str(ck), "--out", str(out),
            "--shots", "2,5", "--n-test", "8", "--gp-restarts", "4",
        ])
        assert rc == 0
        rows = list(csv.DictReader(open(out / "results.csv")))
        assert len(rows) == 4

    def test_evaluate_matches_run_experiment(self, small_result, tmp_path):
        # checkpointed model + evaluate reproduces the in-process records
        ck = tmp_path / "ck.json"
        payload = {
            "format": "popmeta-checkpoint-v1",
            "config": small_result.config.to_dict(),
            "selected_hidden": small_result.selected_hidden,
            "validation_losses": {},
            "model": small_result.model.to_dict(),
            "pca": None,
        }
        json.dump(payload, open(ck, "w"))
        out = tmp_path / "eval"
        cli.main(["evaluate", "--checkpoint", str(ck), "--out", str(out),
                  "--shots", "2,5", "--n-test", "8", "--gp-restarts", "4"])
        rows = list(csv.DictReader(open(out / "results.csv")))
        by_key = {(r["method"], int(r["shots"])): float(r["nmse_mean"]) for r in rows}
        for rec in small_result.records:
            assert by_key[(rec.method, rec.shots)] == pytest.approx(
                rec.nmse_mean, rel=1e-12)

    def test_sweep_and_plot(self, tmp_path):
        out = tmp_path / "sweep"
        rc = cli.main([
            "sweep", "--problem", "one", "--seed", "33", "--out", str(out),
            "--n-train-list", "2", "--hidden-sizes", "8", "--shots", "3",
            "--n-test", "5", "--eval-samples", "20", "--train-samples", "40",
            "--epochs", "60", "--gp-restarts", "2",
        ])
        assert rc == 0
        assert (out / "results.csv").exists()
        assert (out / "checkpoints" / "line_1hz_n2.json").exists()
        manifest = json.load(open(out / "manifest.json"))
        assert manifest["mode"] == "sweep"
        assert "2" in manifest["cells"]

        figs = tmp_path / "refigs"
        rc = cli.main(["plot", "--results", str(out / "results.csv"),
                       "--out-dir", str(figs)])
        assert rc == 0
        regenerated = (figs / "line_1hz_maml.svg").read_text()
        original = (out / "figures" / "line_1hz_maml.svg").read_text()
        assert regenerated == original
