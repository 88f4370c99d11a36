import json
import time

import numpy as np
import pytest

from conftest import equality_case
from taskrel.classifier import SoftmaxClassifier, average_loss
from taskrel.cli import main
from taskrel.dataset import EmbeddingDataset, load_dataset, save_dataset
from taskrel.synthetic import gaussian_mixture

FAST_ALG1 = {"alg1": {"steps_per_epoch": 5, "replace": False}}


def run(argv, capsys=None):
    rc = main([str(a) for a in argv])
    out = capsys.readouterr() if capsys else None
    return rc, out


def strip_timestamp(obj):
    if isinstance(obj, dict):
        return {k: strip_timestamp(v) for k, v in obj.items() if k != "timestamp"}
    if isinstance(obj, list):
        return [strip_timestamp(v) for v in obj]
    return obj


def load_json(path):
    with open(path) as fh:
        return json.load(fh)


@pytest.fixture(scope="module")
def eq_files(tmp_path_factory):
    """Equality-case reference/target files, a fitted probe and a matching start point."""
    root = tmp_path_factory.mktemp("eq")
    ref, tgt, _, init, _ = equality_case()
    save_dataset(ref, root / "ref.embd")
    save_dataset(tgt, root / "tgt.embd")
    (root / "init.json").write_text(init.to_json())
    (root / "alg1.json").write_text(json.dumps(FAST_ALG1))
    assert run(["fit", root / "ref.embd", "--out", root / "h.json", "--epochs", 300,
                "--batch", ref.n]) == (0, None)
    return root


def estimate_args(root, out, *extra, command="estimate"):
    return [command, root / "ref.embd", root / "tgt.embd", root / "h.json", "--out", out,
            "--config", root / "alg1.json", "--epochs", 300, "--batch", 400, "--lr", 1e-2,
            "--init", root / "init.json", *extra]


class TestFit:
    def test_separable_fixture(self, tmp_path, capsys):
        r = np.random.default_rng(0)
        y = np.repeat([0, 1], 100)
        X = np.where(y == 0, -3.0, 3.0)[:, None] + 0.1 * r.normal(size=(200, 1))
        save_dataset(EmbeddingDataset(X, y, 2), tmp_path / "sep.csv")
        rc, out = run(["fit", tmp_path / "sep.csv", "--out", tmp_path / "h.json", "--tau", 100,
                       "--epochs", 300, "--batch", 50, "--lr", 0.1], capsys)
        assert rc == 0 and "accuracy=1.0000" in out.out
        assert load_json(tmp_path / "h.json")["info"]["accuracy"] == 1.0

    def test_default_tau(self, eq_files):
        prov = load_json(eq_files / "h.json")["info"]["provenance"]
        assert prov["config"]["probe"]["tau"] == 0.02 and prov["command"] == "fit"

    def test_missing_file(self, tmp_path, capsys):
        rc, out = run(["fit", tmp_path / "absent.embd", "--out", tmp_path / "h.json"], capsys)
        assert rc == 2 and "absent.embd" in out.err
        assert not (tmp_path / "h.json").exists()

    def test_divergence_exit_code(self, eq_files, tmp_path, capsys):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"probe": {"momentum": 0.0, "rho": 1e4}}))
        rc, out = run(["fit", eq_files / "ref.embd", "--out", tmp_path / "h.json", "--config", cfg,
                       "--tau", 0, "--lr", 10, "--epochs", 50, "--batch", 400], capsys)
        assert rc == 3 and "numerical failure" in out.err
        assert list(tmp_path.iterdir()) == [cfg]

    @pytest.mark.parametrize("argv", [["--tau", "-1"], ["--epochs", "0"], ["--bogus"]])
    def test_bad_flags(self, eq_files, tmp_path, argv, capsys):
        rc, _ = run(["fit", eq_files / "ref.embd", "--out", tmp_path / "h.json", *argv], capsys)
        assert rc == 2

    def test_unknown_config_key(self, eq_files, tmp_path, capsys):
        cfg = tmp_path / "c.toml"
        cfg.write_text("[probe]\nepochz = 3\n")
        rc, out = run(["fit", eq_files / "ref.embd", "--out", tmp_path / "h.json",
                       "--config", cfg], capsys)
        assert rc == 2 and "epochz" in out.err


@pytest.fixture(scope="module")
def full_report(eq_files):
    out = eq_files / "full.json"
    assert main([str(a) for a in estimate_args(eq_files, out)]) == 0
    return load_json(out)


class TestEstimate:
    def test_equality_gap(self, eq_files, full_report):
        h = SoftmaxClassifier.from_json((eq_files / "h.json").read_text())
        ref = load_dataset(eq_files / "ref.embd")
        ref_loss = average_loss(h, ref.with_features(h.stats.apply(ref.features)))
        assert abs(full_report["score"] - ref_loss) <= 0.01 * ref_loss
        assert full_report["mode"] == "supervised" and full_report["relative_metric"] is False

    def test_report_and_trace(self, eq_files, full_report):
        rep = full_report["report"]
        assert rep["task_relatedness"] == pytest.approx(
            rep["reweighted_reference_loss"] + rep["label_mismatch"] + rep["distribution_mismatch"])
        lines = (eq_files / "full.trace.csv").read_text().splitlines()
        assert lines[0] == "epoch,objective,term1,term2,term3,prior_pen,inv_pen"
        assert len(lines) == 301
        prov = full_report["provenance"]
        assert prov["config"]["alg1"]["epochs"] == 300 and len(prov["config_hash"]) == 64
        assert set(prov["inputs"]) == {"ref.embd", "tgt.embd", "h.json", "init.json"}

    def test_unsupervised(self, eq_files, tmp_path, full_report):
        out = tmp_path / "pseudo.json"
        assert main([str(a) for a in estimate_args(eq_files, out, "--unsupervised")]) == 0
        rep = load_json(out)
        assert rep["mode"] == "pseudo" and rep["target_labels"] == "pseudo"
        assert abs(rep["score"] - full_report["score"]) <= 0.1 * full_report["score"]

    def test_fast_close_to_full(self, eq_files, tmp_path, full_report):
        out = tmp_path / "fast.json"
        assert main([str(a) for a in estimate_args(eq_files, out, command="estimate-fast")]) == 0
        rep = load_json(out)
        assert rep["mode"] == "fast" and rep["relative_metric"] is True
        assert abs(rep["score"] - full_report["score"]) <= 0.25 * full_report["score"]
        assert not (tmp_path / "fast.trace.csv").exists()

    def test_target_probe_reports_gap(self, eq_files, tmp_path):
        out = tmp_path / "m.json"
        argv = estimate_args(eq_files, out, "--train-target-probe", "--probe-epochs", 100)
        argv[argv.index("--epochs") + 1] = 5
        assert main([str(a) for a in argv]) == 0
        rep = load_json(out)["report"]
        assert rep["gap"] == pytest.approx(rep["task_relatedness"] - rep["measured_transferability"])

    def test_determinism(self, eq_files, tmp_path):
        for command in ("estimate", "estimate-fast"):
            outs = []
            for k in range(2):
                out = tmp_path / f"{command}{k}.json"
                argv = estimate_args(eq_files, out, "--seed", 11, command=command)
                argv[argv.index("--epochs") + 1] = 20
                assert main([str(a) for a in argv]) == 0
                outs.append(strip_timestamp(load_json(out)))
            assert outs[0] == outs[1]
        assert (tmp_path / "estimate0.trace.csv").read_bytes() == \
            (tmp_path / "estimate1.trace.csv").read_bytes()

    def test_save_and_reload_transforms(self, eq_files, tmp_path):
        argv = estimate_args(eq_files, tmp_path / "a.json", "--save-transforms", tmp_path / "t.json")
        argv[argv.index("--epochs") + 1] = 3
        assert main([str(a) for a in argv]) == 0
        argv = estimate_args(eq_files, tmp_path / "b.json")
        argv[argv.index("--init") + 1] = tmp_path / "t.json"
        argv[argv.index("--epochs") + 1] = 3
        assert main([str(a) for a in argv]) == 0

    def test_toml_config(self, eq_files, tmp_path):
        cfg = tmp_path / "c.toml"
        cfg.write_text("[alg1]\nepochs = 4\nsteps_per_epoch = 2\nreplace = false\n")
        out = tmp_path / "r.json"
        assert main(["estimate", str(eq_files / "ref.embd"), str(eq_files / "tgt.embd"),
                     str(eq_files / "h.json"), "--out", str(out), "--config", str(cfg),
                     "--batch", "400"]) == 0
        alg1 = load_json(out)["provenance"]["config"]["alg1"]
        assert alg1["epochs"] == 4 and alg1["steps_per_epoch"] == 2

    def test_thread_env(self, eq_files, tmp_path, monkeypatch, capsys):
        base = ["estimate-fast", eq_files / "ref.embd", eq_files / "tgt.embd",
                eq_files / "h.json", "--epochs", 2, "--batch", 400]
        monkeypatch.setenv("TASKREL_THREADS", "1")
        assert run(base + ["--out", tmp_path / "a.json"], capsys)[0] == 0
        monkeypatch.setenv("TASKREL_THREADS", "many")
        rc, out = run(base + ["--out", tmp_path / "b.json"], capsys)
        assert rc == 2 and "TASKREL_THREADS" in out.err
        assert not (tmp_path / "b.json").exists()

    def test_class_count_mismatch(self, eq_files, tmp_path, capsys):
        tgt = load_dataset(eq_files / "tgt.embd")
        small = EmbeddingDataset(tgt.features, tgt.labels % 2, 2)
        save_dataset(small, tmp_path / "t2.embd")
        base = ["estimate", eq_files / "ref.embd", tmp_path / "t2.embd", eq_files / "h.json",
                "--out", tmp_path / "r.json", "--epochs", 2, "--batch", 400]
        rc, out = run(base, capsys)
        assert rc == 2 and "--match-classes" in out.err
        rc, _ = run(base + ["--match-classes"], capsys)
        assert rc == 0 and (tmp_path / "r.json").exists()

    def test_infeasible_exit_code(self, eq_files, tmp_path, capsys):
        # one learned-all epoch from random B logits usually leaves a target class unmapped
        codes = set()
        for seed in range(10):
            out = tmp_path / f"r{seed}.json"
            rc, _ = run(["estimate", eq_files / "ref.embd", eq_files / "tgt.embd",
                         eq_files / "h.json", "--out", out, "--mode", "learned-all",
                         "--epochs", 1, "--batch", 400, "--seed", seed], capsys)
            codes.add(rc)
            assert out.exists() == (rc == 0)
            assert (tmp_path / f"r{seed}.trace.csv").exists() == (rc == 0)
        assert 4 in codes

    def test_gamma_flag_routes_to_fast(self, eq_files, tmp_path):
        out = tmp_path / "g.json"
        argv = estimate_args(eq_files, out, "--ot", "gamma")
        argv[argv.index("--epochs") + 1] = 2
        assert main([str(a) for a in argv]) == 0
        assert load_json(out)["mode"] == "fast"

    @pytest.mark.slow
    def test_fast_runtime(self, tmp_path):
        ref, tgt, _, init, _ = equality_case(n=1000, d=64, K=4, seed=1)
        save_dataset(ref, tmp_path / "ref.embd")
        save_dataset(tgt, tmp_path / "tgt.embd")
        assert main(["fit", str(tmp_path / "ref.embd"), "--out", str(tmp_path / "h.json"),
                     "--epochs", "50", "--batch", "1000"]) == 0
        times = {}
        for command in ("estimate", "estimate-fast"):
            t0 = time.perf_counter()
            assert main([command, str(tmp_path / "ref.embd"), str(tmp_path / "tgt.embd"),
                         str(tmp_path / "h.json"), "--out", str(tmp_path / f"{command}.json"),
                         "--epochs", "50", "--batch", "1000"]) == 0
            times[command] = time.perf_counter() - t0
        assert times["estimate-fast"] <= 0.25 * times["estimate"]


class TestCorrelate:
    def write(self, path, rows):
        path.write_text("model_id,target_id,score,term1,term2,term3,accuracy,mode\n"
                        + "".join(f"{m},{t},{s},,,,{a},supervised\n" for m, t, s, a in rows))

    def test_summary(self, tmp_path, capsys):
        self.write(tmp_path / "r.csv", [("a", "pets", 1.0, 0.9), ("b", "pets", 2.0, 0.7),
                                        ("c", "pets", 3.0, 0.4)])
        rc, out = run(["correlate", tmp_path / "r.csv", "--out", tmp_path / "s.json"], capsys)
        assert rc == 0 and "best=a" in out.out
        s = load_json(tmp_path / "s.json")["summary"][0]
        assert s["pearson"] < -0.9 and s["ranking"] == ["a", "b", "c"]

    def test_null_correlation(self, tmp_path, capsys):
        self.write(tmp_path / "r.csv", [("a", "dtd", 1.0, 0.5), ("b", "dtd", 1.0, 0.6)])
        rc, out = run(["correlate", tmp_path / "r.csv", "--out", tmp_path / "s.json"], capsys)
        assert rc == 0 and "warning" in out.err and "pearson=null" in out.out
        assert load_json(tmp_path / "s.json")["summary"][0]["pearson"] is None

    def test_deterministic(self, tmp_path):
        self.write(tmp_path / "r.csv", [("a", "x", 1.5, 0.2), ("b", "x", 0.5, 0.8)])
        for k in range(2):
            assert main(["correlate", str(tmp_path / "r.csv"), "--out", str(tmp_path / f"{k}.json")]) == 0
        assert strip_timestamp(load_json(tmp_path / "0.json")) == \
            strip_timestamp(load_json(tmp_path / "1.json"))

    def test_bad_records(self, tmp_path, capsys):
        (tmp_path / "r.csv").write_text("model_id,target_id,score,accuracy\nm,t,1.0,7\n")
        rc, _ = run(["correlate", tmp_path / "r.csv", "--out", tmp_path / "s.json"], capsys)
        assert rc == 2 and not (tmp_path / "s.json").exists()


class TestConvert:
    def test_round_trip(self, tmp_path, rng, capsys):
        ds = gaussian_mixture(30, rng.normal(size=(3, 4)), rng=rng)
        ds = ds.with_features(ds.features.astype(np.float32))
        save_dataset(ds, tmp_path / "a.csv")
        rc, out = run(["convert", tmp_path / "a.csv", "--out", tmp_path / "a.embd"], capsys)
        assert rc == 0 and "30 x 4" in out.out
        back = load_dataset(tmp_path / "a.embd")
        assert np.array_equal(back.features, ds.features) and np.array_equal(back.labels, ds.labels)
        assert main(["convert", str(tmp_path / "a.embd"), "--out", str(tmp_path / "b.csv")]) == 0
        assert (tmp_path / "b.csv").read_text() == (tmp_path / "a.csv").read_text()
        assert main(["convert", str(tmp_path / "a.embd"), "--out", str(tmp_path / "c.embd")]) == 0
        assert (tmp_path / "c.embd").read_bytes() == (tmp_path / "a.embd").read_bytes()

    def test_missing(self, tmp_path, capsys):
        rc, out = run(["convert", tmp_path / "x.csv", "--out", tmp_path / "y.embd"], capsys)
        assert rc == 2 and "x.csv" in out.err
