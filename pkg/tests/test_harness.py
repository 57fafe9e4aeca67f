import csv
import re
from pathlib import Path

import numpy as np
import pytest
import yaml

from metasg import oracles
from metasg.cli import main
from metasg.config import ExperimentConfig, config_sha, dump_config, load_config, parse_config
from metasg.errors import ConfigurationError, DataError, ProtocolError
from metasg.pipeline import METRIC_COLUMNS, read_matrix, run_baseline_matrix, run_pipeline
from metasg.plotting import emit_plots, save_svg, series_figure

ROOT = Path(__file__).resolve().parents[1]
CONFIGS = sorted((ROOT / "configs").glob("*.yaml"))
SMOKE = ROOT / "configs" / "smoke.yaml"


# ---------------------------------------------------------------------------
# config
# ---------------------------------------------------------------------------

def test_minimal_config_parses():
    cfg = parse_config({})
    assert cfg.seed == 0 and len(cfg.domain_types()) == 2


@pytest.mark.parametrize("path", CONFIGS, ids=lambda p: p.name)
def test_shipped_configs_round_trip(path):
    cfg = load_config(path)
    again = parse_config(yaml.safe_load(dump_config(cfg)))
    assert again == cfg and config_sha(again) == config_sha(cfg)


def test_unknown_key_is_named():
    with pytest.raises(ConfigurationError, match="fl.n_clientz"):
        parse_config({"fl": {"n_clientz": 3}})


def test_all_violations_reported():
    with pytest.raises(ConfigurationError) as exc:
        parse_config({"fl": {"n_clients": 0}, "train": {"N_D": 0}})
    assert "fl.n_clients" in str(exc.value) and "train.N_D" in str(exc.value)


def test_prior_normalises():
    cfg = parse_config({"attack_domain": [{"method": "NA", "weight": 1}, {"method": "IPM", "weight": 3}]})
    assert cfg.prior() == (0.25, 0.75)


def test_bad_attack_entry_rejected():
    with pytest.raises(ConfigurationError, match="epsilonn"):
        parse_config({"attack_domain": [{"method": "IPM", "config": {"epsilonn": 1}}]})
    with pytest.raises(ConfigurationError):
        parse_config({"attack_domain": [{"method": "NA"}, {"method": "NA"}]})


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigurationError):
        load_config(tmp_path / "nope.yaml")


def test_overrides():
    cfg = load_config(SMOKE).with_overrides(seed=7, out="/tmp/x")
    assert cfg.seed == 7 and cfg.output.dir == "/tmp/x"


# ---------------------------------------------------------------------------
# oracle suite
# ---------------------------------------------------------------------------

def test_oracle_suite_passes(tmp_path):
    path, code = oracles.oracle_suite(0, 3, tmp_path)
    assert code == 0
    rows = list(csv.reader(l for l in path.read_text().splitlines() if not l.startswith("#")))
    assert len(rows) == 1 + 3 * len(oracles.CHECKS)
    assert all(r[3] == "1" for r in rows[1:])


def test_oracle_suite_empty(tmp_path):
    path, code = oracles.oracle_suite(0, 0, tmp_path)
    assert code == 0 and "failures=0" in path.read_text()


def test_oracle_suite_catches_mutation(tmp_path, monkeypatch):
    real = oracles.dfn.trimmed_mean
    monkeypatch.setattr(oracles.dfn, "trimmed_mean", lambda u, b: real(u, b) + 1e-9)
    _, code = oracles.oracle_suite(0, 2, tmp_path)
    assert code != 0


def test_brute_references_on_known_inputs():
    assert np.allclose(oracles.brute_trimmed_mean([[0.0], [1.0], [10.0]], 0.34), [1.0])
    assert oracles.brute_krum_index([[0.0], [0.1], [0.2], [9.0]], 0) == 1


# ---------------------------------------------------------------------------
# plotting
# ---------------------------------------------------------------------------

def _segment(svg: str, name: str):
    block = svg.split(f'<g id="series-{name}">', 1)[1].split("</g>", 1)[0]
    return [tuple(map(float, p)) for p in re.findall(r"[ML] ([\d.]+) ([\d.]+)", block)]


def test_two_point_series_endpoints(tmp_path):
    fig, ax = series_figure([0, 1], [2, 3], "v")
    expect = ax.transData.transform([[0, 2], [1, 3]])
    height = fig.bbox.height
    svg = save_svg(fig, tmp_path / "v.svg").read_text()
    pts = _segment(svg, "v")
    assert len(pts) == 2
    for (x, y), (ex, ey) in zip(pts, expect):
        assert abs(x - ex) < 1e-3 and abs(y - (height - ey)) < 1e-3


def test_empty_series_axes_only(tmp_path):
    fig, _ = series_figure([], [], "v")
    svg = save_svg(fig, tmp_path / "e.svg").read_text()
    assert 'id="series-v"' not in svg and "axes_1" in svg


def _metrics(tmp_path, rows):
    p = tmp_path / "m.csv"
    with p.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRIC_COLUMNS)
        for i, v in enumerate(rows):
            w.writerow(["r", i] + [v] * (len(METRIC_COLUMNS) - 2))
    return p


def test_emit_plots_idempotent(tmp_path):
    m = _metrics(tmp_path, [0.1, 0.5, 0.4])
    a = [p.read_bytes() for p in emit_plots(m, tmp_path / "a")]
    b = [p.read_bytes() for p in emit_plots(m, tmp_path / "a")]
    assert a == b and len(a) == len(METRIC_COLUMNS) - 2


def test_emit_plots_rejects_bad_csv(tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("round,clean_acc\n0,1\n")
    with pytest.raises(DataError):
        emit_plots(bad, tmp_path / "o")
    m = _metrics(tmp_path, ["x"])
    with pytest.raises(DataError):
        emit_plots(m, tmp_path / "o")


# ---------------------------------------------------------------------------
# pipeline
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def smoke():
    return load_config(SMOKE)


def test_pipeline_artifacts_and_determinism(tmp_path, smoke):
    a = run_pipeline(smoke, out_dir=tmp_path / "a")
    b = run_pipeline(smoke, out_dir=tmp_path / "b", plots=False)
    for name in ("metrics.csv", "summary.csv", "train_log.csv", "adapt_log.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    lines = [l for l in a.metrics.read_text().splitlines() if not l.startswith("#")]
    assert len(lines) == 1 + smoke.fl.rounds
    assert a.config_sha in a.metrics.read_text().splitlines()[0]
    assert len(a.train_log.read_text().strip().splitlines()) == 2 + smoke.train.N_D
    assert {p.name for p in a.plots} >= {"clean_acc.svg", "r_D.svg"}


def test_adapt_without_checkpoint(tmp_path, smoke):
    with pytest.raises(ProtocolError):
        run_pipeline(smoke, ["adapt", "evaluate"], out_dir=tmp_path)
    art = run_pipeline(smoke, ["adapt", "evaluate"], init="random", out_dir=tmp_path, plots=False)
    assert art.metrics.exists()


def test_stage_order_checked(tmp_path, smoke):
    with pytest.raises(ConfigurationError):
        run_pipeline(smoke, ["evaluate", "pretrain"], out_dir=tmp_path)


def test_evaluate_only_is_fedavg_baseline(tmp_path, smoke):
    d = smoke.model_dump(mode="json")
    d["adapt"]["attack"] = {"method": "NA"}
    cfg = ExperimentConfig.model_validate(d)
    art = run_pipeline(cfg, ["evaluate"], out_dir=tmp_path / "e", plots=False)
    m = run_baseline_matrix(cfg, defenses=["fedavg"], attacks=[{"method": "NA"}],
                            out_dir=tmp_path / "m", plots=False)
    assert read_matrix(m)[("fedavg", "NA")]["acc"] == pytest.approx(art.summary["final_clean_acc"], abs=1e-9)


def test_matrix_stable_and_shaped(tmp_path, smoke):
    a = run_baseline_matrix(smoke, out_dir=tmp_path / "a", plots=True)
    b = run_baseline_matrix(smoke, out_dir=tmp_path / "b", workers=2, plots=False)
    assert a.read_bytes().splitlines()[1:] == b.read_bytes().splitlines()[1:]
    cells = read_matrix(a)
    assert set(cells) == {(d, x) for d in ("fedavg", "median") for x in ("NA", "IPM")}
    assert (tmp_path / "a" / "plots" / "matrix_acc.svg").exists()


# ---------------------------------------------------------------------------
# CLI
# ---------------------------------------------------------------------------

def test_cli_run_and_plot(tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["run", "--config", str(SMOKE), "--out", str(out), "--no-plots"]) == 0
    assert "final_clean_acc=" in capsys.readouterr().out
    assert main(["plot", str(out / "metrics.csv"), "--out", str(tmp_path / "p")]) == 0
    assert (tmp_path / "p" / "clean_acc.svg").exists()


def test_cli_stage_commands(tmp_path):
    out = str(tmp_path / "s")
    assert main(["pretrain", "--config", str(SMOKE), "--out", out]) == 0
    assert main(["adapt", "--config", str(SMOKE), "--out", out]) == 0
    assert main(["evaluate", "--config", str(SMOKE), "--out", out, "--no-plots", "--seed", "0"]) == 0
    assert (tmp_path / "s" / "adapted.npz").exists()


def test_cli_errors_exit_nonzero(tmp_path):
    assert main(["adapt", "--config", str(SMOKE), "--out", str(tmp_path)]) == 2
    bad = tmp_path / "bad.yaml"
    bad.write_text("fl: {n_clientz: 2}\n")
    assert main(["run", "--config", str(bad)]) == 2


def test_cli_oracle(tmp_path):
    assert main(["oracle", "--instances", "1", "--out", str(tmp_path)]) == 0
