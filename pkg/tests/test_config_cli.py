import json

import pytest

from rpf.cli import main
from rpf.config import RunConfig
from rpf.policy import ConfigError


def test_config_yaml_round_trip(tmp_path):
    cfg = RunConfig(task="homing", synthesize=True, noise=0.3, seed=4)
    cfg.save(tmp_path / "c.yaml")
    assert RunConfig.load(tmp_path / "c.yaml") == cfg
    assert RunConfig.load(tmp_path / "c.yaml").digest() == cfg.digest()


def test_config_uses_dotted_keys():
    flat = RunConfig().to_flat()
    assert {"policy.kind", "encoder.width", "gru.hidden", "seeds.train", "train.iterations"} <= set(flat)


def test_overlapping_seed_ranges_rejected():
    with pytest.raises(ConfigError, match="overlap"):
        RunConfig(val_seeds=(5000, 12000))


def test_unknown_key_and_bad_values_rejected():
    with pytest.raises(ConfigError):
        RunConfig.from_flat({"policy.knd": "rpf"})
    with pytest.raises(ConfigError):
        RunConfig(task="exploring")
    with pytest.raises(ConfigError):
        RunConfig(noise=1.5)


def test_shipped_configs_load():
    for name in ("following_rpf", "following_nvm", "homing_rpf", "homing_nvm", "smoke"):
        cfg = RunConfig.load(f"configs/{name}.yaml")
        assert cfg.policy.kind in ("rpf", "rpf_nvm")
    assert RunConfig.load("configs/homing_rpf.yaml").synthesize


def test_cli_gen_is_deterministic(tmp_path, capsys):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    assert main(["gen", "--seed", "42", "--out", str(a)]) == 0
    assert main(["gen", "--seed", "42", "--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()
    assert json.loads(a.read_text())["grid_w"] == 80


def test_cli_demo(tmp_path):
    out = tmp_path / "d.jsonl"
    assert main(["demo", "--world-seed", "3", "--seed", "1", "--set", "J=12", "--out", str(out)]) == 0
    assert len(out.read_text().splitlines()) == 13  # header plus one line per entry


def test_cli_eval_open_loop_noiseless(tmp_path, capsys):
    rc = main(["eval", "--policy", "open_loop", "--set", "noise=0", "--set", "eval.trials=20",
               "--out", str(tmp_path)])
    assert rc == 0
    assert "success_rate=1.000" in capsys.readouterr().out
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["config"]["noise"] == 0 and len(manifest["config_hash"]) == 16
    assert (tmp_path / "metrics.csv").exists()


def test_cli_render_open_loop(tmp_path):
    assert main(["render", "--policy", "open_loop", "--trial", "2", "--out", str(tmp_path)]) == 0
    assert (tmp_path / "topview_2.svg").read_text().startswith("<?xml")


def test_cli_sweep_open_loop(tmp_path):
    rc = main(["sweep", "--policy", "open_loop", "--axis", "noise", "--values", "0,0.4",
               "--set", "eval.trials=10", "--out", str(tmp_path)])
    assert rc == 0
    assert (tmp_path / "sweep_noise_open_loop.csv").exists() and (tmp_path / "sweep_noise.png").exists()


def test_cli_missing_checkpoint_is_a_clean_error(tmp_path, capsys):
    assert main(["eval", "--checkpoint", str(tmp_path / "nope")]) == 2
    assert "no checkpoint" in capsys.readouterr().err


def test_cli_bad_override_is_a_clean_error(capsys):
    assert main(["eval", "--policy", "open_loop", "--set", "seeds.val=[20000,20010]"]) == 2
    assert "overlap" in capsys.readouterr().err


def test_cli_gradcheck_passes(capsys):
    assert main(["gradcheck", "--precision", "64"]) == 0
    assert "max relative error" in capsys.readouterr().out
