import json

import numpy as np
import pytest

from attnlab.cli import main
from attnlab.config import ConfigError, RunConfig
from attnlab.numerics import row_softmax
from attnlab.tensorio import write_tensor


def test_defaults():
    cfg = RunConfig()
    assert cfg.seed == 0
    assert cfg.gamma == 1.35
    assert cfg.tau == 0.5
    assert cfg.total_steps == 25
    assert cfg.window == {"preset": "early"}
    assert cfg.block_gates == {"source": "first_half"}
    assert cfg.format == "csv"


def test_from_dict_round_trip():
    cfg = RunConfig.from_dict({"seed": 9, "gamma": 1.2, "window": {"preset": "late"}})
    again = RunConfig.from_dict(cfg.to_dict())
    assert again == cfg
    assert again.seed == 9
    assert json.loads(cfg.to_json())["gamma"] == 1.2


def test_unknown_keys_rejected():
    with pytest.raises(ConfigError, match="config invalid at <root>"):
        RunConfig.from_dict({"gama": 1.2})
    with pytest.raises(ConfigError, match="config invalid at window"):
        RunConfig.from_dict({"window": {"name": "early"}})
    with pytest.raises(ConfigError, match="config invalid at dims"):
        RunConfig.from_dict({"dims": {"n_audio": 2}})


def test_schema_value_constraints():
    with pytest.raises(ConfigError, match="gamma"):
        RunConfig.from_dict({"gamma": -1.0})
    with pytest.raises(ConfigError, match="tau"):
        RunConfig.from_dict({"tau": 1.5})
    with pytest.raises(ConfigError, match="mode"):
        RunConfig.from_dict({"mode": "annealed"})


def test_semantic_errors_caught_at_parse():
    with pytest.raises(ConfigError, match="not valid for arch"):
        RunConfig.from_dict({"arch": "joint", "position": "Query-image"})
    with pytest.raises(ConfigError, match="low <= high"):
        RunConfig.from_dict({"window": {"low": 0.9, "high": 0.1}})
    # factorized accepts the query-side position
    cfg = RunConfig.from_dict({"arch": "factorized", "position": "Query-image"})
    assert set(cfg.modulation().targets.query_groups) == {"image"}


def test_explicit_window_wins_over_preset():
    cfg = RunConfig.from_dict({"window": {"preset": "late", "low": 0.1, "high": 0.2}})
    w = cfg.resolved_window()
    assert (w.low, w.high) == (0.1, 0.2)
    with pytest.raises(ConfigError, match="both 'low' and 'high'"):
        RunConfig.from_dict({"window": {"low": 0.1}})


def test_gate_sources():
    assert RunConfig.from_dict({"num_blocks": 6}).resolved_gates().gates == (1, 1, 1, 0, 0, 0)
    assert RunConfig.from_dict({"block_gates": {"source": "all"}, "num_blocks": 3}).resolved_gates().gates == (1, 1, 1)
    assert RunConfig.from_dict({"block_gates": {"source": "none"}, "num_blocks": 3}).resolved_gates().gates == (0, 0, 0)
    explicit = RunConfig.from_dict({"block_gates": {"source": "explicit", "gates": [1, 0, 1]}})
    assert explicit.resolved_gates().gates == (1, 0, 1)
    fixture = RunConfig.from_dict({"block_gates": {"source": "fixture", "name": "framepack"}})
    gates = fixture.resolved_gates()
    assert gates.num_blocks == 34  # fixture overrides num_blocks
    assert sum(gates.gates) == 24
    with pytest.raises(ConfigError, match="needs 'name'"):
        RunConfig.from_dict({"block_gates": {"source": "fixture"}})
    with pytest.raises(ConfigError, match="needs 'gates'"):
        RunConfig.from_dict({"block_gates": {"source": "explicit"}})


def test_replace_revalidates():
    cfg = RunConfig().replace(gamma=2.0)
    assert cfg.gamma == 2.0
    with pytest.raises(ConfigError):
        RunConfig().replace(gamma=-2.0)


def test_from_file(tmp_path):
    path = tmp_path / "run.json"
    path.write_text('{"seed": 5, "window": {"preset": "middle"}}')
    cfg = RunConfig.from_file(path)
    assert cfg.seed == 5
    assert cfg.resolved_window().low == 0.35
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigError, match="not valid JSON"):
        RunConfig.from_file(bad)
    arr = tmp_path / "arr.json"
    arr.write_text("[1, 2]")
    with pytest.raises(ConfigError, match="JSON object"):
        RunConfig.from_file(arr)


def test_schedule_resolution():
    cfg = RunConfig.from_dict({"num_blocks": 4, "gamma": 1.5})
    sched = cfg.schedule()
    assert sched.num_blocks == 4
    assert sched.modulation.gamma == 1.5
    assert sched.window.high == 0.30


# -- CLI ----------------------------------------------------------------------


def test_verify_all_suites_pass(tmp_path, capsys):
    rc = main(["verify", "--draws", "40", "--probes", "10", "--out", str(tmp_path)])
    assert rc == 0
    out = capsys.readouterr().out
    for name in ("scale-equivalence", "entropy-slope", "curvature", "lipschitz", "deviation"):
        assert f"{name}: ok" in out
        assert (tmp_path / f"verify_{name}.csv").exists()


def test_verify_single_suite_json_format(tmp_path):
    rc = main(["verify", "curvature", "--draws", "25", "--format", "json", "--out", str(tmp_path)])
    assert rc == 0
    payload = json.loads((tmp_path / "verify_curvature.json").read_text())
    assert payload["rows"]
    assert "spectral_norm" in payload["columns"]


def test_verify_inject_bug_fails(tmp_path, capsys):
    rc = main(["verify", "lipschitz", "--draws", "20", "--inject-bug", "--out", str(tmp_path)])
    assert rc == 1
    captured = capsys.readouterr()
    assert "FAIL" in captured.out
    assert "first failure [lipschitz]" in captured.err


def test_verify_inject_bug_via_env(tmp_path, monkeypatch):
    monkeypatch.setenv("ATTNLAB_INJECT_BUG", "1")
    rc = main(["verify", "entropy-slope", "--draws", "20", "--out", str(tmp_path)])
    assert rc == 1


def test_verify_unknown_suite_usage_error(tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["verify", "bogus-suite", "--out", str(tmp_path)])
    assert exc.value.code == 2


def test_out_dir_env_fallback(tmp_path, monkeypatch):
    monkeypatch.setenv("ATTNLAB_OUT", str(tmp_path / "envout"))
    rc = main(["verify", "curvature", "--draws", "10"])
    assert rc == 0
    assert (tmp_path / "envout" / "verify_curvature.csv").exists()


def test_sweep_explicit_vector_frozen_values(tmp_path):
    rc = main(["sweep", "--z", "2,1,0", "--alpha-grid", "1,2", "--out", str(tmp_path)])
    assert rc == 0
    text = (tmp_path / "sweep.csv").read_text()
    lines = text.strip().split("\n")
    assert len(lines) == 3  # header + 2 alphas
    assert "0.83239558183993889" in text  # H at alpha=1 for z=(2,1,0), 17 sig digits
    assert "0.44105744405816344" in text  # H at alpha=2


def test_sweep_random_draws_pass(tmp_path):
    rc = main(["sweep", "--draws", "15", "--seed", "3", "--out", str(tmp_path)])
    assert rc == 0
    lines = (tmp_path / "sweep.csv").read_text().strip().split("\n")
    assert len(lines) == 1 + 15 * 8  # default grid has 8 alphas per draw


def test_sweep_byte_deterministic(tmp_path):
    d1, d2 = tmp_path / "a", tmp_path / "b"
    for d in (d1, d2):
        assert main(["sweep", "--draws", "5", "--seed", "11", "--out", str(d)]) == 0
    assert (d1 / "sweep.csv").read_bytes() == (d2 / "sweep.csv").read_bytes()


def test_sweep_bad_vector_config_error(tmp_path, capsys):
    rc = main(["sweep", "--z", "2,x,0", "--out", str(tmp_path)])
    assert rc == 2
    assert "config error" in capsys.readouterr().err
    rc = main(["sweep", "--z", "2", "--out", str(tmp_path)])
    assert rc == 2


def test_config_file_plus_flag_override(tmp_path):
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text('{"draws": 12, "seed": 1}')
    rc = main(["sweep", "--config", str(cfg_path), "--seed", "2", "--out", str(tmp_path)])
    assert rc == 0
    lines = (tmp_path / "sweep.csv").read_text().strip().split("\n")
    assert len(lines) == 1 + 12 * 8  # draws from file; seed overridden by flag


def test_config_file_invalid_exit_2(tmp_path, capsys):
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text('{"gamma": -3}')
    rc = main(["sweep", "--config", str(cfg_path), "--out", str(tmp_path)])
    assert rc == 2
    assert "config error" in capsys.readouterr().err


def test_config_file_missing_exit_3(tmp_path, capsys):
    rc = main(["sweep", "--config", str(tmp_path / "nope.json"), "--out", str(tmp_path)])
    assert rc == 3
    assert "i/o error" in capsys.readouterr().err


# -- calibrate ------------------------------------------------------------------


def test_calibrate_fixture_mode(tmp_path):
    rc = main(["calibrate", "--fixture", "framepack_f1", "--out", str(tmp_path)])
    assert rc == 0
    payload = json.loads((tmp_path / "block_table.json").read_text())
    assert payload["source"] == "fixture:framepack_f1"
    assert payload["num_blocks"] == 40
    assert len(payload["selected"]) == 24
    assert sum(payload["gates"]) == 24


def test_calibrate_fixture_bytes_deterministic(tmp_path):
    d1, d2 = tmp_path / "a", tmp_path / "b"
    for d in (d1, d2):
        assert main(["calibrate", "--fixture", "wan2.1", "--out", str(d)]) == 0
    assert (d1 / "block_table.json").read_bytes() == (d2 / "block_table.json").read_bytes()


def test_calibrate_synthetic_mode(tmp_path):
    rc = main(["calibrate", "--samples", "6", "--blocks", "5", "--seed", "2", "--out", str(tmp_path)])
    assert rc == 0
    payload = json.loads((tmp_path / "block_table.json").read_text())
    assert payload["source"] == "synthetic:seed=2"
    assert len(payload["ratios"]) == 5
    assert payload["sample_count"] == 6
    assert all(0.0 <= r <= 1.0 for r in payload["ratios"])


def _write_calibration_files(tmp_path):
    rng = np.random.default_rng(6)
    d, t, h, w = 4, 2, 6, 6
    n = t * h * w
    latent = rng.normal(0.0, 0.2, size=(1, d, t, h, w))
    direction = rng.normal(size=d)
    direction /= np.linalg.norm(direction)
    latent[0, :, :, 1:4, 1:4] += 3.0 * direction[:, None, None, None]
    truth = np.zeros((t, h, w), dtype=bool)
    truth[:, 1:4, 1:4] = True
    flat = truth.ravel().astype(np.float64)
    stack = np.empty((3, n, n))
    for l, affinity in enumerate((-1.0, 0.0, 4.0)):
        logits = rng.normal(size=(n, n)) + affinity * flat[None, :]
        stack[l] = row_softmax(logits).T  # received orientation
    lat_path = tmp_path / "latent.atnb"
    att_path = tmp_path / "attn.atnb"
    mask_path = tmp_path / "mask.atnb"
    write_tensor(lat_path, latent)
    write_tensor(att_path, stack)
    write_tensor(mask_path, truth)
    return lat_path, att_path, mask_path


def test_calibrate_from_files(tmp_path):
    lat, att, mask = _write_calibration_files(tmp_path)
    rc = main(["calibrate", "--latent", str(lat), "--attention", str(att), "--out", str(tmp_path)])
    assert rc == 0
    payload = json.loads((tmp_path / "block_table.json").read_text())
    assert payload["source"] == "files"
    assert len(payload["ratios"]) == 3
    # PCA polarity can invert the Otsu mask, but the attracted and repelled
    # blocks must land on opposite extremes either way
    assert abs(payload["ratios"][2] - payload["ratios"][0]) > 0.5
    assert payload["selected"] == [
        l for l, r in enumerate(payload["ratios"]) if r > payload["tau"]
    ]


def test_calibrate_with_supplied_mask(tmp_path):
    lat, att, mask = _write_calibration_files(tmp_path)
    rc = main([
        "calibrate", "--latent", str(lat), "--attention", str(att),
        "--mask", str(mask), "--out", str(tmp_path),
    ])
    assert rc == 0
    payload = json.loads((tmp_path / "block_table.json").read_text())
    assert payload["ratios"][2] > 0.9


def test_calibrate_latent_without_attention_exit_2(tmp_path, capsys):
    lat, _, _ = _write_calibration_files(tmp_path)
    rc = main(["calibrate", "--latent", str(lat), "--out", str(tmp_path)])
    assert rc == 2
    assert "requires --attention" in capsys.readouterr().err


def test_calibrate_malformed_tensor_exit_3(tmp_path, capsys):
    bad = tmp_path / "bad.atnb"
    bad.write_bytes(b"garbage bytes")
    rc = main(["calibrate", "--latent", str(bad), "--attention", str(bad), "--out", str(tmp_path)])
    assert rc == 3
    assert "tensor format error" in capsys.readouterr().err


# -- simulate -------------------------------------------------------------------


def test_simulate_default_schedule(tmp_path, capsys):
    rc = main(["simulate", "--steps", "10", "--blocks", "4", "--out", str(tmp_path)])
    assert rc == 0
    assert "scaled_cells=" in capsys.readouterr().out
    lines = (tmp_path / "trajectory.csv").read_text().strip().split("\n")
    assert len(lines) == 11  # header + 10 steps
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["flops"]["exact_match"] is True
    assert summary["flops"]["measured_cells"] == summary["flops"]["expected_cells"]
    assert summary["conflict"]["base_mass_image"] > summary["conflict"]["base_mass_text"]
    assert summary["active_steps"] == [1, 2, 3]  # phi(t) = (t-1)/9 <= 0.30


def test_simulate_gamma_one_zero_cells(tmp_path):
    rc = main(["simulate", "--steps", "8", "--blocks", "4", "--gamma", "1.0", "--out", str(tmp_path)])
    assert rc == 0
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["flops"]["measured_cells"] == 0
    assert summary["flops"]["model_fraction"] == 0.0


def test_simulate_preset_flag(tmp_path):
    rc = main(["simulate", "--steps", "8", "--blocks", "4", "--preset", "late", "--out", str(tmp_path)])
    assert rc == 0
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["window"] == {"low": 0.70, "high": 1.00}
    assert summary["active_steps"] == [6, 7, 8]


def test_simulate_byte_deterministic(tmp_path):
    d1, d2 = tmp_path / "a", tmp_path / "b"
    for d in (d1, d2):
        assert main(["simulate", "--steps", "6", "--blocks", "2", "--out", str(d)]) == 0
    assert (d1 / "trajectory.csv").read_bytes() == (d2 / "trajectory.csv").read_bytes()
    assert (d1 / "summary.json").read_bytes() == (d2 / "summary.json").read_bytes()
