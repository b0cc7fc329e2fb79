import json
import subprocess
import sys

import pytest

from soslab import __version__
from soslab.cli import EXIT_CONFIG, EXIT_OK, ConfigError, load_config, main

LIGHT = """
[model]
dimension = 2
side = 2
q = 0.1
mstar = 10

[run]
seeds = 0 1
samples_per_seed = 4
audit_samples = 20000
cube_patches = 20

[mcmc]
sweeps = 200
burn_in = 20
"""


@pytest.fixture
def light(tmp_path):
    path = tmp_path / "light.ini"
    path.write_text(LIGHT)
    return path


def test_defaults_load():
    cfg = load_config(None)
    assert cfg.q == 0.1 and cfg.mstar == 10


@pytest.mark.parametrize(
    "section,key,value",
    [("model", "q", "-0.1"), ("model", "mstar", "0"), ("disorder", "delta_d", "0.4"), ("mcmc", "sweeps", "0"), ("model", "side", "x")],
)
def test_bad_config_rejected(tmp_path, section, key, value):
    path = tmp_path / "bad.ini"
    path.write_text(f"[{section}]\n{key} = {value}\n")
    with pytest.raises(ConfigError):
        load_config(str(path))
    assert main(["verify", "--config", str(path), "--out", str(tmp_path / "o")]) == EXIT_CONFIG


def test_missing_config_file(tmp_path):
    assert main(["nu", "--config", str(tmp_path / "nope.ini")]) == EXIT_CONFIG


def test_bad_threads(light, tmp_path):
    assert main(["sample", "--config", str(light), "--threads", "0", "--out", str(tmp_path)]) == EXIT_CONFIG


def test_version_flag(capsys):
    with pytest.raises(SystemExit):
        main(["--version"])
    assert __version__ in capsys.readouterr().out


def test_outputs_embed_config(light, tmp_path):
    out = tmp_path / "o"
    assert main(["sample", "--config", str(light), "--out", str(out)]) == EXIT_OK
    text = (out / "samples_seed0.csv").read_text()
    assert any(__version__ in line for line in text.splitlines()[:3])
    rough = json.loads((out / "roughness_seed1.json").read_text())
    assert rough["config"]["q"] == 0.1 and __version__ in rough["version"]


def test_sample_deterministic_across_threads(light, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["sample", "--config", str(light), "--out", str(a)]) == EXIT_OK
    assert main(["sample", "--config", str(light), "--out", str(b), "--threads", "2"]) == EXIT_OK
    for name in ("samples_seed0.csv", "samples_seed1.csv", "roughness_seed0.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_seed_offset_changes_output(light, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    main(["nu", "--config", str(light), "--out", str(a)])
    main(["nu", "--config", str(light), "--out", str(b), "--seed-offset", "1"])
    assert (a / "nu_seed1.csv").read_bytes() == (b / "nu_seed1.csv").read_bytes()
    assert not (b / "nu_seed0.csv").exists()


def test_other_commands(light, tmp_path):
    for argv in (["contours"], ["potential", "dump"], ["disorder", "audit"]):
        assert main(argv + ["--config", str(light), "--out", str(tmp_path / argv[0])]) == EXIT_OK
        assert any((tmp_path / argv[0]).iterdir())


def test_console_entry(tmp_path):
    res = subprocess.run([sys.executable, "-m", "soslab", "--version"], capture_output=True, text=True)
    assert res.returncode == 0 and __version__ in res.stdout
