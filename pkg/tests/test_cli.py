import json

import numpy as np
import pytest

from confgen import dataio
from confgen.cli import main

FAST_CONFIG = {
    "hidden": 10,
    "readout_hidden": 10,
    "node_state": 4,
    "edge_state": 4,
    "epochs": 3,
    "batch_size": 16,
}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Spec file, tiny dataset, and a trained checkpoint shared by CLI tests."""
    root = tmp_path_factory.mktemp("cli")
    spec = dataio.default_benchmark_spec(count=25)
    spec["molecules"] = [m for m in spec["molecules"]
                         if m["name"] in ("methanol", "ethanol", "oxirane")]
    spec_path = root / "spec.json"
    spec_path.write_text(json.dumps(spec))

    data_path = root / "data.jsonl"
    assert main(["make-data", str(spec_path), str(data_path), "--seed", "3"]) == 0

    config_path = root / "config.json"
    config_path.write_text(json.dumps(FAST_CONFIG))
    ckpt_path = root / "model.json"
    assert main(["train", str(data_path), str(ckpt_path),
                 "--config", str(config_path), "--seed", "4"]) == 0
    return root, spec_path, data_path, config_path, ckpt_path


class TestMakeData:
    def test_summary_line(self, workspace, capsys):
        root, spec_path, _, _, _ = workspace
        out = root / "again.jsonl"
        assert main(["make-data", str(spec_path), str(out), "--seed", "3"]) == 0
        captured = capsys.readouterr().out
        assert "molecules=3" in captured
        assert "records=75" in captured

    def test_missing_spec_exits_2(self, tmp_path, capsys):
        missing = tmp_path / "nope.json"
        code = main(["make-data", str(missing), str(tmp_path / "out.jsonl")])
        assert code == 2
        assert str(missing) in capsys.readouterr().err

    def test_same_seed_identical_files(self, workspace, tmp_path):
        _, spec_path, data_path, _, _ = workspace
        other = tmp_path / "other.jsonl"
        assert main(["make-data", str(spec_path), str(other), "--seed", "3"]) == 0
        assert other.read_bytes() == data_path.read_bytes()


class TestTrain:
    def test_metrics_log_has_per_epoch_elbo(self, workspace):
        root, _, _, _, ckpt_path = workspace
        metrics = root / "model.json.metrics.jsonl"
        lines = [json.loads(l) for l in metrics.read_text().splitlines()]
        assert len(lines) == FAST_CONFIG["epochs"]
        for i, entry in enumerate(lines, start=1):
            assert entry["epoch"] == i
            assert "train_elbo" in entry and "val_elbo" in entry

    def test_defaults_fill_missing_config_fields(self, workspace):
        _, _, _, _, ckpt_path = workspace
        doc = json.loads(ckpt_path.read_text())
        config = doc["extra"]["config"]
        assert config["batch_size"] == 16  # from the file
        assert config["learning_rate"] == 0.001  # default
        assert config["message_passes"] == 3  # default

    def test_resume_matches_straight_run(self, workspace, tmp_path):
        _, _, data_path, config_path, _ = workspace
        straight = tmp_path / "straight.json"
        assert main(["train", str(data_path), str(straight),
                     "--config", str(config_path), "--epochs", "4",
                     "--seed", "9"]) == 0

        half = tmp_path / "half.json"
        assert main(["train", str(data_path), str(half),
                     "--config", str(config_path), "--epochs", "2",
                     "--seed", "9"]) == 0
        resumed = tmp_path / "resumed.json"
        assert main(["train", str(data_path), str(resumed),
                     "--resume", str(half), "--epochs", "4",
                     "--seed", "9"]) == 0

        a = json.loads(straight.read_text())["params"]
        b = json.loads(resumed.read_text())["params"]
        assert a.keys() == b.keys()
        for name in a:
            assert a[name]["data"] == b[name]["data"], name


class TestGenerate:
    def test_default_n_is_50_and_report_rates(self, workspace, capsys):
        root, _, data_path, _, ckpt_path = workspace
        out = root / "gen50.jsonl"
        assert main(["generate", str(ckpt_path), str(data_path), str(out),
                     "--seed", "5"]) == 0
        report = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
        assert report["requested_per_molecule"] == 50
        assert report["n_samples"] == 150
        assert 0.0 <= report["smoothing_rate"] <= 1.0
        assert 0.0 <= report["convergence_rate"] <= 1.0
        assert (root / "gen50.jsonl.report.json").exists()

    def test_seed_reproducible_and_thread_invariant(self, workspace, tmp_path):
        _, _, data_path, _, ckpt_path = workspace
        a = tmp_path / "a.jsonl"
        b = tmp_path / "b.jsonl"
        c = tmp_path / "c.jsonl"
        for out, threads in ((a, "1"), (b, "1"), (c, "3")):
            assert main(["generate", str(ckpt_path), str(data_path), str(out),
                         "--n", "4", "--seed", "8", "--threads", threads]) == 0
        assert a.read_bytes() == b.read_bytes()
        assert a.read_bytes() == c.read_bytes()

    def test_generated_records_reuse_molecule_graphs(self, workspace, tmp_path):
        _, _, data_path, _, ckpt_path = workspace
        out = tmp_path / "gen.jsonl"
        assert main(["generate", str(ckpt_path), str(data_path), str(out),
                     "--n", "3", "--seed", "2"]) == 0
        source = {r.molecule: (r.graph, r.build_seed)
                  for r in dataio.read_dataset(data_path)}
        for r in dataio.read_dataset(out):
            graph, build_seed = source[r.molecule]
            assert r.graph == graph
            assert r.build_seed == build_seed


class TestEvaluate:
    def test_copy_of_truth_ranks_first(self, workspace, tmp_path, capsys):
        root, _, data_path, _, _ = workspace
        records = dataio.read_dataset(data_path)
        shifted = [
            dataio.DatasetRecord(
                r.molecule, r.graph, r.build_seed,
                dataio.Conformation(r.conformation.elements,
                                    r.conformation.positions * 1.08),
            )
            for r in records
        ]
        copy_path = tmp_path / "copy.jsonl"
        shift_path = tmp_path / "shifted.jsonl"
        dataio.write_dataset(copy_path, records)
        dataio.write_dataset(shift_path, shifted)

        out = tmp_path / "report"
        assert main(["evaluate", str(data_path),
                     f"copy={copy_path}", f"shifted={shift_path}",
                     "--out", str(out)]) == 0
        text = (out.with_suffix(".txt")).read_text() if False else \
            (tmp_path / "report.txt").read_text()
        for section in ("[marginal]", "[pairwise]", "[joint]"):
            assert section in text
        for line in text.splitlines():
            if line.strip().startswith("copy:"):
                assert "mean_ranking=1" in line

    def test_tsv_agrees_with_text(self, workspace, tmp_path):
        root, _, data_path, _, ckpt_path = workspace
        gen = tmp_path / "gen.jsonl"
        assert main(["generate", str(ckpt_path), str(data_path), str(gen),
                     "--n", "8", "--seed", "6"]) == 0
        out = tmp_path / "rep"
        assert main(["evaluate", str(data_path), f"model={gen}",
                     "--out", str(out)]) == 0
        rows = (tmp_path / "rep.tsv").read_text().strip().splitlines()[1:]
        marginals = [float(r.split("\t")[5]) for r in rows
                     if r.split("\t")[2] == "marginal"]
        text = (tmp_path / "rep.txt").read_text()
        printed = float(text.split("median_mmd2=")[1].split()[0])
        assert printed == pytest.approx(np.median(marginals), rel=1e-5)
        assert (tmp_path / "rep.marginals.tsv").exists()

    def test_degenerate_samples_exit_1(self, workspace, tmp_path, capsys):
        _, _, data_path, _, _ = workspace
        records = dataio.read_dataset(data_path)
        # all conformations identical: pooled rows coincide, bandwidth dies,
        # every instance is skipped, and the report has no usable methods
        frozen = [dataio.DatasetRecord(r.molecule, r.graph, r.build_seed,
                                       records[0].conformation)
                  for r in records if r.molecule == records[0].molecule]
        bad_truth = tmp_path / "frozen.jsonl"
        dataio.write_dataset(bad_truth, frozen)
        code = main(["evaluate", str(bad_truth), f"m={bad_truth}",
                     "--out", str(tmp_path / "r")])
        assert code == 1


class TestEstimate:
    def test_constant_observable_is_one(self, workspace, tmp_path, capsys):
        root, spec_path, data_path, _, ckpt_path = workspace
        gen = tmp_path / "gen.jsonl"
        assert main(["generate", str(ckpt_path), str(data_path), str(gen),
                     "--n", "6", "--seed", "1"]) == 0
        capsys.readouterr()
        assert main(["estimate", str(gen), "--energy-model", str(spec_path),
                     "--observable", "one"]) == 0
        doc = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
        assert doc["observable"] == "one"
        for entry in doc["molecules"].values():
            assert entry["value"] == 1.0
            assert entry["ess"] > 0
            assert "standard_error" in entry
            assert "min_pairwise_distance" in entry

    def test_report_written_to_file(self, workspace, tmp_path, capsys):
        _, spec_path, data_path, _, ckpt_path = workspace
        gen = tmp_path / "gen.jsonl"
        assert main(["generate", str(ckpt_path), str(data_path), str(gen),
                     "--n", "5", "--seed", "2"]) == 0
        out = tmp_path / "estimate.json"
        assert main(["estimate", str(gen), "--energy-model", str(spec_path),
                     "--observable", "rgyr", "--out", str(out)]) == 0
        doc = json.loads(out.read_text())
        assert doc["observable"] == "rgyr"
        assert set(doc["molecules"]) == {"methanol", "ethanol", "oxirane"}

    def test_missing_energy_model_exits_2(self, workspace, tmp_path):
        _, _, data_path, _, ckpt_path = workspace
        gen = tmp_path / "gen.jsonl"
        assert main(["generate", str(ckpt_path), str(data_path), str(gen),
                     "--n", "3", "--seed", "2"]) == 0
        code = main(["estimate", str(gen),
                     "--energy-model", str(tmp_path / "missing.json")])
        assert code == 2
