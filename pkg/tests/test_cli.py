import socket
import threading
import time
from dataclasses import replace

import numpy as np
import pytest

from sinr import checkpoint
from sinr.cli import build_parser, collect_settings, load_dataset, main
from sinr.data import SyntheticSpec, read_csv
from sinr.experiments import Sweep, SweepConfig
from sinr.model import BlockSpec, ModelSpec
from sinr.trainer import TrainConfig, evaluate_accuracy

TINY_CFG = """\
image_size = 8
samples_per_class = 40
n_test = 100
blocks = 8,16
fc = 32,10
max_epochs = 4
"""


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "tiny.cfg").write_text(TINY_CFG)
    return d


def run(workdir, *argv):
    return main(["--config", str(workdir / "tiny.cfg"), *argv])


@pytest.fixture(scope="module")
def trained(workdir):
    t0 = time.perf_counter()
    assert run(workdir, "--out", str(workdir / "m"), "train", "--dropout", "0.2") == 0
    assert time.perf_counter() - t0 < 60
    assert run(workdir, "--out", str(workdir / "m"), "split", str(workdir / "m" / "model.sinr"),
               "--division", "1") == 0
    return workdir / "m"


def test_train_outputs_and_determinism(workdir, trained, capsys):
    rows = read_csv(trained / "train_report.csv")
    assert len(rows) == 4
    first = (trained / "model.sinr").read_bytes()
    capsys.readouterr()
    assert run(workdir, "--out", str(workdir / "again"), "train", "--dropout", "0.2") == 0
    assert (workdir / "again" / "model.sinr").read_bytes() == first
    assert read_csv(workdir / "again" / "train_report.csv") == rows


def test_unknown_config_key_names_the_key(workdir, capsys):
    (workdir / "bad.cfg").write_text("max_epochs = 1\nlearning_rate = 0.1\n")
    assert main(["--config", str(workdir / "bad.cfg"), "analyze", "--nt", "3"]) == 1
    assert "learning_rate" in capsys.readouterr().err


def test_settings_precedence(workdir, monkeypatch):
    parser = build_parser()
    monkeypatch.setenv("SINR_MAX_EPOCHS", "7")
    monkeypatch.setenv("SINR_LR", "0.5")
    args = parser.parse_args(["--config", str(workdir / "tiny.cfg"), "train", "--lr", "0.01"])
    s = collect_settings(args)
    assert s["max_epochs"] == "7" and s["lr"] == "0.01" and s["blocks"] == "8,16"


def test_split_files_and_invalid_point(workdir, trained, capsys):
    inp, outp = (checkpoint.load(trained / f) for f in ("input.sinr", "output.sinr"))
    assert inp.division == outp.division == 1
    assert inp.intermediate_shape == outp.intermediate_shape == (8, 4, 4)
    assert run(workdir, "--out", str(workdir / "x"), "split", str(trained / "model.sinr"), "--division", "9") == 1
    assert "division" in capsys.readouterr().err.lower()


def test_lossless_infer_matches_clean_accuracy(workdir, trained, capsys):
    capsys.readouterr()
    assert run(workdir, "--out", str(workdir / "inf"), "infer", str(trained / "input.sinr"),
               str(trained / "output.sinr")) == 0
    printed = capsys.readouterr().out
    acc = float(printed.split("accuracy=")[1].split()[0])
    model = checkpoint.load_network(trained / "model.sinr")
    args = build_parser().parse_args(["--config", str(workdir / "tiny.cfg"), "train"])
    test = load_dataset(collect_settings(args), "test")
    assert acc == evaluate_accuracy(model, test)
    rows = read_csv(workdir / "inf" / "infer.csv")
    assert len(rows) == 100 and all(r["received_fraction"] == "1.0" for r in rows)


def test_sim_and_udp_loopback_agree(workdir, trained):
    common = [str(trained / "input.sinr"), str(trained / "output.sinr"), "--p", "0.3", "--limit", "60"]
    assert run(workdir, "--seed", "5", "--out", str(workdir / "sim"), "infer", *common, "--mode", "sim") == 0
    assert run(workdir, "--seed", "5", "--out", str(workdir / "udp"), "infer", *common, "--mode", "udp") == 0
    sim, udp = read_csv(workdir / "sim" / "infer.csv"), read_csv(workdir / "udp" / "infer.csv")
    assert [r["prediction"] for r in sim] == [r["prediction"] for r in udp]
    assert [float(r["received_fraction"]) for r in sim] == [float(r["received_fraction"]) for r in udp]


def test_listen_and_connect_roles(workdir, trained):
    with socket.socket(socket.AF_INET, socket.SOCK_DGRAM) as probe:
        probe.bind(("127.0.0.1", 0))
        port = probe.getsockname()[1]
    common = [str(trained / "input.sinr"), str(trained / "output.sinr"), "--p", "0.3", "--limit", "40",
              "--mode", "udp"]
    codes = {}
    server = threading.Thread(target=lambda: codes.setdefault("server", run(
        workdir, "--seed", "5", "--out", str(workdir / "srv"), "infer", *common, "--listen", f"127.0.0.1:{port}",
        "--timeout", "10")))
    server.start()
    time.sleep(0.2)
    codes["device"] = run(workdir, "--seed", "5", "infer", *common, "--connect", f"127.0.0.1:{port}")
    server.join(timeout=20)
    assert codes == {"server": 0, "device": 0}
    assert run(workdir, "--seed", "5", "--out", str(workdir / "sim40"), "infer", *common[:-2], "--mode", "sim") == 0
    srv, sim = read_csv(workdir / "srv" / "infer.csv"), read_csv(workdir / "sim40" / "infer.csv")
    assert [r["received_fraction"] for r in srv] == [r["received_fraction"] for r in sim]


def test_analyze_outputs(workdir, capsys):
    (workdir / "curve.csv").write_text("alpha,accuracy\n0,0.1\n50,0.6\n100,0.9\n")
    assert main(["--out", str(workdir / "an"), "analyze", "--nt", "4", "--p", "0.5", "--l", "500", "--b", "9e6",
                 "--curve", str(workdir / "curve.csv")]) == 0
    rows = read_csv(workdir / "an" / "analyze.csv")
    latency = {(r["method"]) for r in rows if r["metric"] == "latency"}
    assert latency == {"sinr", "retx"}
    sinr_rows = [r for r in rows if r["method"] == "sinr" and r["metric"] == "latency"]
    assert len(sinr_rows) == 1 and float(sinr_rows[0]["cum_mass"]) == 1.0
    assert float(sinr_rows[0]["value"]) == pytest.approx(4 * 4000 / 9e6)
    acc = {float(r["value"]): float(r["mass"]) for r in rows if r["method"] == "sinr" and r["metric"] == "accuracy"}
    assert acc[0.6] == pytest.approx(0.375, abs=1e-12)


# --- experiment harness -----------------------------------------------------------------

@pytest.fixture(scope="module")
def tiny_sweep():
    cfg = SweepConfig(seeds=(0,), rates=(0.0, 0.2), fig6_rates=(0.0, 0.2), losses=(0.0, 0.5, 0.9), trials=5000,
                      n_test=100,
                      model=ModelSpec([BlockSpec(1, 8), BlockSpec(1, 16, pool=False)], (16, 10),
                                      input_shape=(3, 8, 8)),
                      data=SyntheticSpec(samples_per_class=40, size=8, noise=0.2),
                      train=TrainConfig(max_epochs=3))
    return Sweep(cfg)


def test_fig3_bundle(tiny_sweep, tmp_path):
    paths = tiny_sweep.run("fig3", tmp_path)
    assert {p.name for p in paths} == {"fig3_cdf.csv", "fig3_montecarlo.csv", "fig3_check.csv", "fig3_curve.csv"}
    rows = read_csv(tmp_path / "fig3_cdf.csv")
    latency = [r for r in rows if r["metric"] == "latency"]
    assert {r["method"] for r in latency} == {"sinr", "retx"}
    assert sum(r["method"] == "sinr" for r in latency) == 1
    for method in ("sinr", "retx"):
        for metric in ("latency", "accuracy"):
            last = [r for r in rows if r["method"] == method and r["metric"] == metric][-1]
            assert abs(float(last["cum_mass"]) - 1) < 1e-12
    checks = read_csv(tmp_path / "fig3_check.csv")
    assert all(r["inside"] == "1" for r in checks)


def test_fig4_fig5_fig6(tiny_sweep, tmp_path):
    fig4 = read_csv(tiny_sweep.run("fig4", tmp_path)[0])
    assert [float(r["rate"]) for r in fig4] == [0.0, 0.2]
    fig5 = read_csv(tiny_sweep.run("fig5", tmp_path)[0])
    assert all(float(r["degradation"]) == 0.0 for r in fig5 if float(r["p"]) == 0.0)
    assert {r["division"] for r in fig5} == {"1"}
    fig6 = read_csv(tiny_sweep.run("fig6", tmp_path)[0])
    assert {r["division"] for r in fig6} == {"1", "2"}
    assert len(fig6) == 2 * 2 * 3
    best = max(float(r["clean_accuracy"]) for r in fig4)
    for r in fig6:
        assert float(r["degradation_vs_best"]) == pytest.approx(best - float(r["accuracy"]))


def test_accuracy_curve_endpoints(tiny_sweep):
    curve = tiny_sweep.accuracy_curve(0, 0.2, 1)
    assert curve.clean == tiny_sweep.clean_accuracy(0, 0.2)
    assert curve.alphas.tolist() == list(range(0, 101, 10))


def test_unknown_figure(tiny_sweep, tmp_path):
    with pytest.raises(ValueError):
        tiny_sweep.run("fig7", tmp_path)


def test_experiment_command(workdir, tmp_path):
    assert run(workdir, "--out", str(tmp_path), "experiment", "fig4", "--seeds", "3", "--max-epochs", "1") == 0
    rows = read_csv(tmp_path / "fig4.csv")
    assert [r["seed"] for r in rows] == ["3"] * 4
    assert np.all([int(r["epochs"]) == 1 for r in rows])


def test_sweep_config_replace_keeps_defaults():
    cfg = replace(SweepConfig(), seeds=(9,))
    assert cfg.rates == (0.0, 0.1, 0.2, 0.4) and cfg.fig3_p == 0.2
