import subprocess
import sys
from pathlib import Path

import pytest

from vagram.cli import EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME, SUBCOMMANDS, main
from vagram.config import parse_config

CONFIGS = Path(__file__).resolve().parents[1] / "scripts" / "configs"
SMOKE = {
    "smoke": "smoke.ini",
    "mf-snapshots": "smoke_mf_snapshots.ini",
    "loss-study": "smoke_loss_study.ini",
    "loss-surface": "smoke_loss_surface.ini",
    "dyna-compare": "smoke_dyna_compare.ini",
}


def csv_bytes(root: Path) -> dict[str, bytes]:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*.csv"))}


@pytest.mark.parametrize("command", list(SUBCOMMANDS))
def test_subcommand_is_deterministic(command, tmp_path, capsys):
    cfg = CONFIGS / SMOKE[command]
    outs = [tmp_path / "a", tmp_path / "b"]
    for out in outs:
        assert main([command, "--config", str(cfg), "--out", str(out), "--seed", "3"]) == EXIT_OK
    a, b = csv_bytes(outs[0]), csv_bytes(outs[1])
    assert a and a == b
    # the resolved config records everything needed to rerun, including the override
    resolved = parse_config(outs[0] / "resolved_config")
    assert resolved.experiment.seed == 3 and resolved.experiment.out_dir == str(outs[0])


def test_rerun_from_resolved_config(tmp_path):
    first = tmp_path / "first"
    assert main(["smoke", "--config", str(CONFIGS / "smoke.ini"), "--out", str(first)]) == EXIT_OK
    second = tmp_path / "second"
    assert main(["smoke", "--config", str(first / "resolved_config"), "--out", str(second)]) == EXIT_OK
    assert csv_bytes(first) == csv_bytes(second)


def test_misspelled_key_is_a_config_error(tmp_path, capsys):
    bad = tmp_path / "bad.ini"
    bad.write_text("experiment = smoke\n[dyna]\nepochz = 2\n")
    assert main(["smoke", "--config", str(bad)]) == EXIT_CONFIG
    err = capsys.readouterr().err
    assert "epochz" in err and "bad.ini:3" in err


def test_wrong_subcommand_is_a_config_error(capsys):
    assert main(["loss-study", "--config", str(CONFIGS / "smoke.ini")]) == EXIT_CONFIG


def test_missing_config_file(tmp_path):
    assert main(["smoke", "--config", str(tmp_path / "nope.ini")]) == EXIT_CONFIG


def test_runtime_failure_exit_code(tmp_path, capsys):
    cfg = tmp_path / "study.ini"
    cfg.write_text(f"experiment = model_loss_study\n[study]\nsnapshot_dir = {tmp_path / 'empty'}\n")
    assert main(["loss-study", "--config", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_RUNTIME
    assert "epoch" in capsys.readouterr().err


def test_seed_must_be_u64():
    with pytest.raises(SystemExit):
        main(["smoke", "--config", "x.ini", "--seed", str(2 ** 64)])


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "vagram.cli", "smoke", "--config", str(CONFIGS / "smoke.ini"),
                           "--out", str(tmp_path)], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert (tmp_path / "metrics.csv").exists()
