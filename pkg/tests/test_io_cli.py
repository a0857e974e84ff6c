import json

import jsonschema
import numpy as np
import pytest

from vebhmm.cli import EXIT_DATA, EXIT_OK, EXIT_USAGE, run_command
from vebhmm.data import Ensemble
from vebhmm.errors import DataError
from vebhmm.io import dump_json, load_json, read_traces, read_truth, report_schema, write_traces, \
    write_truth
from vebhmm.simulate import SimScenario, sample_ensemble


def write(path, text):
    path.write_text(text, encoding="utf-8")
    return path


class TestReadTraces:
    def test_two_trace_csv(self, tmp_path):
        p = write(tmp_path / "t.csv", "trace_id,t,value\na,0,0.1\nb,0,1.5\na,1,0.2\nb,1,1.0\nb,2,2.0\n")
        ens = read_traces(p)
        assert len(ens) == 2 and ens.lengths.tolist() == [2, 3]
        np.testing.assert_array_equal(ens[1].x, [1.5, 1.0, 2.0])

    def test_unordered_rows_and_crlf(self, tmp_path):
        p = tmp_path / "t.csv"
        p.write_bytes(b"trace_id,t,value\r\na,2,3.0\r\na,0,1.0\r\na,1,2.0\r\n")
        np.testing.assert_array_equal(read_traces(p)[0].x, [1.0, 2.0, 3.0])

    def test_gap(self, tmp_path):
        p = write(tmp_path / "t.csv", "trace_id,t,value\nq,0,1\nq,1,1\nq,3,1\n")
        with pytest.raises(DataError, match=r"'q'.*index 2"):
            read_traces(p)

    def test_duplicate(self, tmp_path):
        p = write(tmp_path / "t.csv", "trace_id,t,value\nq,0,1\nq,0,2\n")
        with pytest.raises(DataError, match="duplicate"):
            read_traces(p)

    @pytest.mark.parametrize("body, line", [("a,0,x\n", 2), ("a,0,1\na,1\n", 3), ("a,0,1\na,y,2\n", 3),
                                            ("a,0,nan\n", 2)])
    def test_parse_errors_carry_line(self, tmp_path, body, line):
        p = write(tmp_path / "t.csv", "trace_id,t,value\n" + body)
        with pytest.raises(DataError, match=f"t.csv:{line}:"):
            read_traces(p)

    def test_header_required(self, tmp_path):
        with pytest.raises(DataError, match=":1:"):
            read_traces(write(tmp_path / "t.csv", "a,0,1\n"))

    def test_jsonl(self, tmp_path):
        p = write(tmp_path / "t.jsonl", '{"id": "a", "x": [1, 2.5]}\n\n{"id": "b", "x": [0]}\n')
        ens = read_traces(p)
        assert [t.id for t in ens] == ["a", "b"]
        with pytest.raises(DataError, match=":2:"):
            read_traces(write(tmp_path / "u.jsonl", '{"id": "a", "x": [1]}\n{"id": "a", "x": [1]}\n'))
        with pytest.raises(DataError, match=":1:"):
            read_traces(write(tmp_path / "v.jsonl", '{"id": "a", "x": [null]}\n'))

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError):
            read_traces(tmp_path / "none.csv")

    @pytest.mark.parametrize("fmt", ["csv", "jsonl"])
    def test_round_trip(self, tmp_path, rng, fmt):
        ens = Ensemble.from_arrays([rng.normal(size=7) * 1e-3, rng.normal(size=3) * 1e5],
                                   ids=["x1", "x 2"])
        p = tmp_path / f"e.{fmt}"
        write_traces(ens, p)
        back = read_traces(p)
        assert [t.id for t in back] == ["x1", "x 2"]
        for a, b in zip(ens, back):
            np.testing.assert_array_equal(a.x, b.x)

    def test_truth_round_trip(self, tmp_path):
        sim = sample_ensemble(SimScenario(K=2, N=3, mean_length=10, seed=1))
        write_truth(sim.truth, [t.id for t in sim.ensemble], tmp_path / "truth.jsonl")
        ids, back = read_truth(tmp_path / "truth.jsonl")
        assert ids == ["0", "1", "2"]
        for a, b in zip(sim.truth.xi0, back.xi0):
            np.testing.assert_array_equal(a, b)
        np.testing.assert_array_equal(back.theta[2]["A"], sim.truth.theta[2]["A"])


def test_dump_json_rejects_nan(tmp_path):
    with pytest.raises(ValueError):
        dump_json({"v": float("nan")}, tmp_path / "a.json")
    dump_json({"v": np.float64(1.5), "a": np.arange(2)}, tmp_path / "b.json")
    assert load_json(tmp_path / "b.json") == {"a": [0, 1], "v": 1.5}
    with pytest.raises(DataError):
        load_json(write(tmp_path / "c.json", "{"))


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    scen = {"K": 2, "N": 8, "mean_length": 60, "fixed_length": True, "sigma_rel": 0.3, "seed": 3}
    (d / "scenario.json").write_text(json.dumps(scen))
    assert run_command(["simulate", "--scenario", str(d / "scenario.json"), "--out", str(d / "sim")]) == 0
    return d


def validate(path):
    jsonschema.validate(json.loads(path.read_text()), report_schema())


class TestCli:
    def test_simulate_outputs(self, workdir):
        sim = workdir / "sim"
        assert (sim / "traces.csv").is_file() and (sim / "truth.jsonl").is_file()
        validate(sim / "simulation.json")

    def test_fit_baselines_evaluate(self, workdir):
        sim, fit = workdir / "sim", workdir / "fit"
        assert run_command(["fit", "--traces", str(sim / "traces.csv"), "-K", "2", "--out", str(fit),
                            "--restarts", "2", "--seed", "1"]) == EXIT_OK
        assert run_command(["baselines", "--traces", str(sim / "traces.csv"), "-K", "2",
                            "--out", str(fit)]) == EXIT_OK
        assert run_command(["evaluate", "--fit", str(fit), "--truth", str(sim)]) == EXIT_OK
        for name in ("report.json", "baselines.json", "errors.json"):
            validate(fit / name)
        rep = json.loads((fit / "report.json").read_text())
        assert len(rep["traces"]) == 8
        for tr in rep["traces"]:
            assert sum(map(sum, tr["pseudocounts"])) == pytest.approx(tr["T"] - 1, abs=1e-8)
        err = json.loads((fit / "errors.json").read_text())
        assert set(err["reports"]) >= {"veb", "vb_elbo", "ml_bic"}

    def test_threads_do_not_change_payload(self, workdir, monkeypatch):
        traces = str(workdir / "sim" / "traces.csv")
        outs = []
        for i, th in enumerate(("1", "4")):
            out = workdir / f"thr{i}"
            assert run_command(["fit", "--traces", traces, "-K", "2", "--out", str(out),
                                "--restarts", "2", "--threads", th]) == 0
            outs.append((out / "report.json").read_bytes())
        monkeypatch.setenv("VEBHMM_THREADS", "3")
        out = workdir / "thr_env"
        assert run_command(["fit", "--traces", traces, "-K", "2", "--out", str(out),
                            "--restarts", "2"]) == 0
        outs.append((out / "report.json").read_bytes())
        assert outs[0] == outs[1] == outs[2]

    def test_crossval(self, workdir):
        out = workdir / "cv"
        assert run_command(["crossval", "--traces", str(workdir / "sim" / "traces.csv"),
                            "--states", "1,2", "--folds", "4", "--out", str(out),
                            "--restarts", "1"]) == 0
        validate(out / "crossval.json")

    def test_sweep_grid_shape(self, tmp_path):
        sigmas = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9]
        grid = {"base": {"N": 4, "mean_length": 30, "fixed_length": True}, "K": [2],
                "sigma_rel": sigmas, "replicates": 1, "restarts": 1, "methods": ["ml_bic"]}
        (tmp_path / "grid.json").write_text(json.dumps(grid))
        assert run_command(["sweep", "--scenario-grid", str(tmp_path / "grid.json"),
                            "--out", str(tmp_path / "sw")]) == 0
        validate(tmp_path / "sw" / "sweep.json")
        rows = json.loads((tmp_path / "sw" / "sweep.json").read_text())["rows"]
        assert [(r["K"], r["sigma_rel"]) for r in rows] == [(2, s) for s in sigmas]
        lines = (tmp_path / "sw" / "sweep.tsv").read_text().splitlines()
        assert len(lines) == 1 + len(sigmas)

    def test_exit_codes(self, workdir, tmp_path, capsys):
        assert run_command(["fit", "--traces", str(tmp_path / "missing.csv"), "-K", "2",
                            "--out", str(tmp_path / "o")]) == EXIT_DATA
        err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
        assert err["error"] and err["exit_code"] == EXIT_DATA
        assert run_command(["fit", "--traces", str(workdir / "sim" / "traces.csv"),
                            "--out", str(tmp_path / "o")]) == EXIT_USAGE
        assert run_command(["frobnicate"]) == EXIT_USAGE
        bad = write(tmp_path / "bad.json", json.dumps({"K": 2, "N": 2, "mean_length": 5, "colour": 1}))
        assert run_command(["simulate", "--scenario", str(bad), "--out", str(tmp_path / "o")]) == EXIT_USAGE
