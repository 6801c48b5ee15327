import csv
import hashlib
import json
import shutil
import subprocess
import sys

import pytest

from hion import cli
from hion import config as cfgmod
from hion.errors import ConfigError

TRAIN = """
[system]
id = "linear2"
t_f = 2.0

[cost]
id = "linear_quadratic"

[model]
state_hidden = [8, 8]
costate_hidden = [8, 8]

[train]
n_epochs = 3
batch_size = 8
n_transient = 3
lr = 1e-3
seed = 0
"""


def write(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text)
    return p


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    """One tiny linear2 checkpoint shared by the run-time commands."""
    root = tmp_path_factory.mktemp("trained")
    cfg = write(root, "train.toml", TRAIN)
    assert run("train", "-c", cfg, "-o", root / "run", "-q") == 0
    return root / "run" / "checkpoint.json"


# ---------------------------------------------------------------- config parsing


def test_unknown_key_names_the_field():
    with pytest.raises(ConfigError) as exc:
        cfgmod.loads(TRAIN.replace("lr = 1e-3", "learning_rate = 1e-3"))
    assert exc.value.field == "train.learning_rate"


def test_missing_t_f_names_the_field():
    with pytest.raises(ConfigError) as exc:
        cfgmod.loads(TRAIN.replace("t_f = 2.0\n", ""))
    assert exc.value.field == "system.t_f"


def test_wrong_type_names_the_field():
    with pytest.raises(ConfigError) as exc:
        cfgmod.loads(TRAIN.replace("batch_size = 8", 'batch_size = "8"'))
    assert exc.value.field == "train.batch_size"


def test_unknown_section():
    with pytest.raises(ConfigError) as exc:
        cfgmod.loads(TRAIN + "\n[optimizer]\nname = 'adam'\n")
    assert exc.value.field == "optimizer"


def test_train_config_view():
    cfg = cfgmod.loads(TRAIN)
    tc = cfg.train_config(seed=7, threads=2)
    assert tc.seed == 7 and tc.threads == 2 and tc.n_epochs == 3
    with pytest.raises(ConfigError) as exc:
        cfgmod.loads(TRAIN.replace("batch_size = 8", "batch_size = 0")).train_config()
    assert exc.value.field == "train.batch_size"


def test_parse_sampling():
    assert cfgmod.parse_sampling("tf") == "tf"
    assert cfgmod.parse_sampling(1) == 1.0
    for bad in ("fast", True, [0.5]):
        with pytest.raises(ConfigError):
            cfgmod.parse_sampling(bad)


def test_shipped_configs_parse():
    from pathlib import Path

    for path in sorted((Path(__file__).parent.parent / "configs").glob("*.toml")):
        cfgmod.load(path)


# ---------------------------------------------------------------- exit codes


def test_missing_t_f_exits_1(tmp_path, capsys):
    cfg = write(tmp_path, "c.toml", TRAIN.replace("t_f = 2.0\n", ""))
    assert run("train", "-c", cfg, "-o", tmp_path / "out") == 1
    assert "system.t_f" in capsys.readouterr().err
    assert not (tmp_path / "out").exists()


def test_unknown_system_exits_1(tmp_path, capsys):
    cfg = write(tmp_path, "c.toml", TRAIN.replace('id = "linear2"', 'id = "pendulum"'))
    assert run("train", "-c", cfg, "-o", tmp_path / "out") == 1
    assert "pendulum" in capsys.readouterr().err


def test_cost_not_valid_for_system_exits_1(tmp_path, capsys):
    cfg = write(tmp_path, "c.toml", TRAIN.replace('id = "linear_quadratic"', 'id = "vdp_track"'))
    assert run("train", "-c", cfg, "-o", tmp_path / "out") == 1
    assert "cost.id" in capsys.readouterr().err


def test_bad_usage_exits_1(tmp_path):
    with pytest.raises(SystemExit) as exc:
        run("train", "-o", tmp_path)
    assert exc.value.code == 1
    with pytest.raises(SystemExit) as exc:
        run("fly", "-c", "x", "-o", tmp_path)
    assert exc.value.code == 1


def test_missing_config_file_exits_1(tmp_path):
    assert run("train", "-c", tmp_path / "nope.toml", "-o", tmp_path / "out") == 1


def test_training_abort_exits_2(tmp_path, capsys):
    # three consecutive rolled-back epochs end the run
    cfg = write(tmp_path, "c.toml", TRAIN.replace("lr = 1e-3", "lr = 1e300").replace("n_epochs = 3", "n_epochs = 10"))
    assert run("train", "-c", cfg, "-o", tmp_path / "out", "-q") == 2
    assert "aborted" in capsys.readouterr().err


# ---------------------------------------------------------------- train


def test_train_artifacts_and_manifest(tmp_path, capsys):
    cfg = write(tmp_path, "c.toml", TRAIN)
    out = tmp_path / "out"
    assert run("train", "-c", cfg, "-o", out, "-q") == 0
    for name in ("checkpoint.json", "train.csv", "manifest.json", "train_loss.png"):
        assert (out / name).exists(), name
    man = json.loads((out / "manifest.json").read_text())
    assert man["command"] == "train" and man["seed"] == 0
    assert man["config"]["train"]["n_epochs"] == 3
    names = set()
    for art in man["artifacts"]:
        names.add(art["path"])
        assert hashlib.sha256((out / art["path"]).read_bytes()).hexdigest() == art["sha256"]
    assert {"checkpoint.json", "train.csv", "train_loss.png"} <= names
    stdout = capsys.readouterr().out.splitlines()
    assert stdout[0] == "epoch,total,l17b,l17d,l17e,l17f"


def _losses(path):
    return [{k: v for k, v in row.items() if k != "wall_ms"} for row in csv.DictReader(path.open())]


def test_train_is_byte_identical_across_runs_and_threads(tmp_path):
    cfg = write(tmp_path, "c.toml", TRAIN.replace("seed = 0", "seed = 0\nn_shards = 2"))
    for name, threads in (("a", 1), ("b", 1), ("c", 2)):
        assert run("train", "-c", cfg, "-o", tmp_path / name, "-q", "--threads", threads, "--no-plots") == 0
    ref = (tmp_path / "a" / "checkpoint.json").read_bytes()
    for name in ("b", "c"):
        assert (tmp_path / name / "checkpoint.json").read_bytes() == ref
        # wall_ms is timing; every other column must match exactly
        assert _losses(tmp_path / name / "train.csv") == _losses(tmp_path / "a" / "train.csv")


def test_seed_flag_overrides_config(tmp_path):
    cfg = write(tmp_path, "c.toml", TRAIN)
    run("train", "-c", cfg, "-o", tmp_path / "a", "-q", "--no-plots")
    run("train", "-c", cfg, "-o", tmp_path / "b", "-q", "--no-plots", "--seed", "5")
    a = json.loads((tmp_path / "a" / "checkpoint.json").read_text())
    b = json.loads((tmp_path / "b" / "checkpoint.json").read_text())
    assert a["seed"] == 0 and b["seed"] == 5
    assert a["state_gen"]["weights"] != b["state_gen"]["weights"]
    assert json.loads((tmp_path / "b" / "manifest.json").read_text())["seed"] == 5


def test_finetune_records_parent(tmp_path, trained):
    text = f"""
[cost]
id = "linear_quadratic"

[train]
finetune_from = "{trained}"
n_epochs = 2
batch_size = 8
n_transient = 3
"""
    cfg = write(tmp_path, "f.toml", text)
    assert run("finetune", "-c", cfg, "-o", tmp_path / "ft", "-q", "--no-plots") == 0
    child = json.loads((tmp_path / "ft" / "checkpoint.json").read_text())
    parent = json.loads(trained.read_text())
    assert child["epochs_trained"] == parent["epochs_trained"] + 2
    assert len(child["metadata"]["lineage"]) == 1


def test_finetune_without_parent_exits_1(tmp_path):
    cfg = write(tmp_path, "f.toml", "[train]\nn_epochs = 1\n")
    assert run("finetune", "-c", cfg, "-o", tmp_path / "ft") == 1


# ---------------------------------------------------------------- tpbvp


def _tpbvp_cfg(tmp_path, ckpt, n_points, x_o="[0.25, -0.5]"):
    return write(tmp_path, "tp.toml", f'[checkpoint]\npath = "{ckpt}"\n\n[tpbvp]\nx_o = {x_o}\nx_r = [1.0]\nn_points = {n_points}\n')


def test_tpbvp_two_points(tmp_path, trained):
    out = tmp_path / "tp"
    assert run("tpbvp", "-c", _tpbvp_cfg(tmp_path, trained, 2), "-o", out, "-q") == 0
    rows = list(csv.DictReader((out / "tpbvp.csv").open()))
    assert [float(r["t"]) for r in rows] == [0.0, 2.0]
    assert float(rows[0]["x0"]) == 0.25 and float(rows[0]["x1"]) == -0.5
    assert (out / "tpbvp.png").exists()


def test_tpbvp_dimension_mismatch_exits_1(tmp_path, trained, capsys):
    cfg = _tpbvp_cfg(tmp_path, trained, 5, x_o="[0.25]")
    assert run("tpbvp", "-c", cfg, "-o", tmp_path / "tp") == 1
    assert "tpbvp.x_o" in capsys.readouterr().err


def test_tpbvp_missing_checkpoint_exits_1(tmp_path):
    cfg = _tpbvp_cfg(tmp_path, tmp_path / "none.json", 5)
    assert run("tpbvp", "-c", cfg, "-o", tmp_path / "tp") == 1


# ---------------------------------------------------------------- simulate / compare


SCENARIO = """
[scenario]
duration = 3.0
reference_schedule = [[0.0, 1.0], [1.5, -1.0]]
initial_state = [0.0, 0.0]
sampling_periods = ["realtime", 0.5, "tf"]
"""


def test_simulate_sweep_writes_one_file_per_period(tmp_path, trained, capsys):
    cfg = write(tmp_path, "s.toml", f'[checkpoint]\npath = "{trained}"\n' + SCENARIO)
    out = tmp_path / "sim"
    assert run("simulate", "-c", cfg, "-o", out, "-q") == 0
    for tag in ("realtime", "0.5", "tf"):
        assert (out / f"trajectory_hion_{tag}.csv").exists()
        assert (out / f"trajectory_hion_{tag}.png").exists()
    rows = list(csv.DictReader((out / "metrics.csv").open()))
    assert [r["sampling_period"] for r in rows] == ["realtime", "0.5", "tf"]
    assert {"J", "tracking"} <= set(rows[0])
    assert capsys.readouterr().out.startswith("controller,sampling_period,J,tracking\n")


def test_simulate_is_byte_identical(tmp_path, trained):
    cfg = write(tmp_path, "s.toml", f'[checkpoint]\npath = "{trained}"\n' + SCENARIO)
    run("simulate", "-c", cfg, "-o", tmp_path / "a", "-q", "--no-plots")
    run("simulate", "-c", cfg, "-o", tmp_path / "b", "-q", "--no-plots", "--threads", "3")
    for name in ("trajectory_hion_0.5.csv", "metrics.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_simulate_system_mismatch_exits_1(tmp_path, trained):
    cfg = write(tmp_path, "s.toml", f'[checkpoint]\npath = "{trained}"\n' + SCENARIO + 'system = "vanderpol"\ncost = "compare"\n')
    assert run("simulate", "-c", cfg, "-o", tmp_path / "sim") == 1


def test_simulate_slmpc(tmp_path):
    text = '[slmpc]\nsystem = "vanderpol"\ncost = "compare"\n' + SCENARIO
    cfg = write(tmp_path, "s.toml", text)
    out = tmp_path / "sim"
    assert run("simulate", "-c", cfg, "-o", out, "-q", "--no-plots") == 0
    rows = list(csv.DictReader((out / "metrics.csv").open()))
    assert len(rows) == 1 and rows[0]["controller"] == "slmpc" and rows[0]["sampling_period"] == "0.5"


def test_compare_rows_sorted_and_duplicates_identical(tmp_path, trained, capsys):
    text = (
        f'[checkpoint]\npath = "{trained}"\n\n[slmpc]\ncost = "compare"\n\n'
        '[compare]\nhion_sampling_periods = [0.5, "tf", 0.5]\n' + SCENARIO
    )
    cfg = write(tmp_path, "cmp.toml", text)
    out = tmp_path / "cmp"
    assert run("compare", "-c", cfg, "-o", out, "-q") == 0
    rows = list(csv.DictReader((out / "comparison.csv").open()))
    assert list(rows[0]) == ["controller", "sampling_period", "J", "tracking"]
    js = [float(r["J"]) for r in rows]
    assert js == sorted(js) and len(rows) == 4
    dup = [r for r in rows if r["controller"] == "hion" and r["sampling_period"] == "0.5"]
    assert len(dup) == 2 and dup[0] == dup[1]
    assert (out / "comparison.png").exists()
    stdout = capsys.readouterr().out.splitlines()
    assert len(stdout) == 5


def test_relative_checkpoint_resolves_against_config(tmp_path, trained):
    (tmp_path / "runs").mkdir()
    shutil.copy(trained, tmp_path / "runs" / "ck.json")
    (tmp_path / "cfgs").mkdir()
    cfg = _tpbvp_cfg(tmp_path / "cfgs", "../runs/ck.json", 3)
    assert run("tpbvp", "-c", cfg, "-o", tmp_path / "tp", "-q") == 0


def test_console_script(tmp_path, trained):
    cfg = _tpbvp_cfg(tmp_path, trained, 3)
    exe = shutil.which("hion")
    argv = [exe] if exe else [sys.executable, "-m", "hion.cli"]
    proc = subprocess.run(argv + ["tpbvp", "-c", str(cfg), "-o", str(tmp_path / "tp"), "-q"], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert proc.stdout.splitlines()[0] == "t_f,x0_tf,terminal_error"
