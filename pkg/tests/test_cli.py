import numpy as np
import pytest

from altkoop import cli, config as C, distributed as D, modelio, pipeline
from altkoop.errors import ProtocolError


def run(capsys, *argv):
    code = cli.main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.mark.parametrize("system,rows", [("vdp", 601), ("glycolysis", 1001)])
def test_simulate_default_rows(tmp_path, capsys, system, rows):
    code, _, _ = run(capsys, "--out", str(tmp_path), "simulate", "--system", system)
    assert code == 0
    lines = (tmp_path / "trajectory.csv").read_bytes().decode("utf-8").split("\n")
    assert lines[-1] == "" and len(lines) - 2 == rows


def test_simulate_dt_override(tmp_path, capsys):
    code, _, _ = run(capsys, "simulate", "--dt", "0.02", "--samples", "10", "--out", str(tmp_path))
    assert code == 0
    t = np.loadtxt(tmp_path / "trajectory.csv", delimiter=",", skiprows=1)[:, 0]
    assert len(t) == 11
    np.testing.assert_allclose(np.diff(t), 0.02, atol=1e-12)


def test_invalid_activation_exit_code(tmp_path, capsys):
    code, _, err = run(capsys, "train", "--activation", "relu", "--out", str(tmp_path))
    assert code == 2 and "dictionary.activation" in err


def test_usage_errors(tmp_path, capsys):
    assert run(capsys, "frobnicate")[0] == 2
    assert run(capsys, "train", "--eta", "abc")[0] == 2
    assert run(capsys, "--config", str(tmp_path / "none.cfg"), "train")[0] == 2
    bad = tmp_path / "bad.cfg"
    bad.write_text("[training]\nlearning = fast\n")
    code, _, err = run(capsys, "--config", str(bad), "train")
    assert code == 2 and "training.learning" in err


@pytest.fixture(scope="module")
def vdp_model(tmp_path_factory):
    out = tmp_path_factory.mktemp("vdp")
    assert cli.main(["--config", "vdp", "--out", str(out), "train", "--iterations", "40"]) == 0
    return out


def test_train_outputs(vdp_model):
    model = modelio.load(vdp_model / "model.json")
    assert model.training["iterations"] == 40 and model.alternate["label"] == "final"
    assert (vdp_model / "model.runtime.json").exists()
    assert len((vdp_model / "history.csv").read_text().splitlines()) == 42


def test_predict_zero_steps(vdp_model, tmp_path, capsys):
    code, _, _ = run(capsys, "--config", "vdp", "predict", "--model", str(vdp_model / "model.json"),
                     "--n", "0", "--out", str(tmp_path))
    assert code == 0
    assert len((tmp_path / "prediction.csv").read_text().splitlines()) == 2


def test_predict_default_segment(vdp_model, tmp_path, capsys):
    code, out, _ = run(capsys, "--config", "vdp", "--out", str(tmp_path), "predict",
                       "--model", str(vdp_model / "model.json"))
    assert code == 0 and "200-step relative error" in out
    assert len((tmp_path / "prediction.csv").read_text().splitlines()) == 202


def test_predict_dimension_mismatch(vdp_model, tmp_path, capsys):
    assert run(capsys, "--out", str(tmp_path), "simulate", "--system", "glycolysis",
               "--samples", "20")[0] == 0
    code, _, err = run(capsys, "--out", str(tmp_path), "predict", "--model",
                       str(vdp_model / "model.json"), "--trajectory", str(tmp_path / "trajectory.csv"))
    assert code == 2 and "dimensional" in err


def test_diminishing_schedule_flag(tmp_path, capsys):
    code, _, _ = run(capsys, "--config", "vdp", "--out", str(tmp_path), "train",
                     "--schedule", "diminishing", "--iterations", "5")
    assert code == 0
    rows = (tmp_path / "history.csv").read_text().splitlines()
    header = rows[0].split(",")
    etas = [float(r.split(",")[header.index("eta")]) for r in rows[1:]]
    np.testing.assert_allclose(etas[:5], [1 / (t + 1) for t in range(5)])


def test_divergence_exit_code(tmp_path, capsys):
    code, _, err = run(capsys, "--config", "vdp", "--out", str(tmp_path), "train",
                       "--eta", "1e6", "--iterations", "50")
    assert code == 3 and "diverged" in err


def test_protocol_error_exit_code(tmp_path, capsys, monkeypatch):
    def broken(*args, **kwargs):
        raise ProtocolError("round 0: node 1 has no Lift from node 0")
    monkeypatch.setattr(D, "run_distributed", broken)
    code, _, err = run(capsys, "--config", "vdp", "--out", str(tmp_path), "dist-train", "--q", "2",
                       "--block-widths", "2", "--iterations", "2")
    assert code == 4 and "protocol" in err


def test_dist_train_q1_matches_jacobi(tmp_path, capsys):
    code, _, _ = run(capsys, "--config", "vdp", "--out", str(tmp_path), "dist-train", "--q", "1",
                     "--iterations", "25")
    assert code == 0
    model = modelio.load(tmp_path / "model.json")
    cfg = C.recipe("vdp").replace("training", iterations=25, mode="dist-sync")
    _, data, _ = pipeline.dataset(cfg)
    nodes = D.init_nodes(pipeline.partition_for(cfg), 2, [3], "logistic", True,
                         np.random.default_rng(0))
    params, K = D.assemble_global(nodes)
    p, k = D.run_jacobi(params, K, data, (0.23, 0.23), 25)[-1]
    assert np.max(np.abs(model.params.flat() - p.flat())) <= 1e-12
    assert np.max(np.abs(model.k - k)) <= 1e-12


def test_dist_train_async(tmp_path, capsys):
    code, out, _ = run(capsys, "--config", "vdp", "--out", str(tmp_path), "dist-train", "--mode",
                       "dist-async", "--max-delay", "5", "--q", "2", "--block-widths", "2",
                       "--iterations", "30")
    assert code == 0 and "dist-async" in out
    model = modelio.load(tmp_path / "model.json")
    assert model.training["mode"] == "dist-async" and model.training["max_staleness"] <= 5
    assert model.partition == {"blocks": [[0], [1]], "widths": [2, 2]}
    rows = (tmp_path / "rounds.csv").read_text().splitlines()
    assert len(rows) == 32 and max(int(r.split(",")[4]) for r in rows[1:]) <= 5


def test_sync_with_delay_is_rejected(tmp_path, capsys):
    code, _, _ = run(capsys, "--config", "vdp", "--out", str(tmp_path), "dist-train",
                     "--mode", "dist-sync", "--max-delay", "2", "--q", "2")
    assert code == 2


def test_verify_rate(vdp_model, capsys):
    code, out, _ = run(capsys, "verify", "rate", "--history", str(vdp_model / "history.csv"),
                       "--model", str(vdp_model / "model.json"))
    assert code == 0 and "L =" in out


def test_verify_equivalence(capsys):
    code, out, _ = run(capsys, "--config", "vdp", "verify", "equivalence", "--q", "2", "--rounds", "5")
    assert code == 0 and "max relative deviation" in out


def test_verify_equivalence_glyco_partition(capsys):
    cfg_args = ["--config", "glyco", "verify", "equivalence", "--rounds", "3"]
    code, out, _ = run(capsys, *cfg_args)
    assert code == 0 and "q=7" in out and "match" in out


def test_verify_gradcheck(capsys):
    code, out, _ = run(capsys, "verify", "gradcheck", "--instances", "5")
    assert code == 0 and "5 random instances" in out


def test_global_flags_after_subcommand(tmp_path, capsys):
    code, _, _ = run(capsys, "simulate", "--samples", "5", "--out", str(tmp_path), "--seed", "3")
    assert code == 0 and (tmp_path / "trajectory.csv").exists()


def test_rerun_is_byte_identical(tmp_path, capsys):
    for name in ("a", "b"):
        assert run(capsys, "--config", "vdp", "--out", str(tmp_path / name), "train",
                   "--iterations", "30")[0] == 0
    for f in ("model.json", "history.csv"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
