import json
from pathlib import Path

import pytest

from uavirs.cli import build_parser, main
from uavirs.imitation import load_q, load_transitions


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    cfg = json.loads((Path(__file__).resolve().parents[1] / "configs" / "default.json").read_text())
    cfg["geometry"]["T"] = 2
    cfg["learning"].update(hidden=8, episode_slots=2)
    (d / "cfg.json").write_text(json.dumps(cfg))
    return d


def test_gen_train_run_sweep(workdir, capsys):
    cfg = str(workdir / "cfg.json")
    assert main(["gen-expert", "--config", cfg, "--seed", "1", "--starts", "1", "--slots", "2",
                 "--out", str(workdir / "expert.csv")]) == 0
    assert len(load_transitions(workdir / "expert.csv")) == 2

    assert main(["train", "--config", cfg, "--seed", "2", "--expert", str(workdir / "expert.csv"),
                 "--online-steps", "1", "--out", str(workdir / "model")]) == 0
    q = load_q(workdir / "model" / "q.json")
    assert q.n_actions == 8 and q.hidden == 8

    assert main(["run", "--config", cfg, "--algo", "aisle", "--model",
                 str(workdir / "model" / "q.json"), "--out", str(workdir / "runs")]) == 0
    summary = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert summary["slots"] == 2 and summary["algorithm"] == "aisle"
    assert (workdir / "runs" / "aisle_seed0.csv").exists()
    assert (workdir / "runs" / "aisle_seed0.json").exists()

    assert main(["sweep", "--config", cfg, "--axis", "start", "--values", "0,0,100;400,400,80",
                 "--algorithms", "upper", "--out", str(workdir / "sweep.csv")]) == 0
    lines = (workdir / "sweep.csv").read_text().splitlines()
    assert len(lines) == 3


def test_same_seed_same_csv(workdir):
    cfg = str(workdir / "cfg.json")
    outs = []
    for k in range(2):
        out = workdir / f"up{k}"
        assert main(["run", "--config", cfg, "--algo", "upper", "--seed", "4",
                     "--out", str(out)]) == 0
        outs.append((out / "upper_seed4.csv").read_bytes())
    assert outs[0] == outs[1]


def test_bad_inputs_exit_with_code_2(workdir, capsys):
    bad = workdir / "bad.json"
    bad.write_text('{"geometry": {}}')
    assert main(["run", "--config", str(bad), "--algo", "upper", "--out", str(workdir)]) == 2
    assert "geometry.users" in capsys.readouterr().err
    assert main(["train", "--expert", str(workdir / "missing.csv"), "--out", str(workdir)]) == 2
    with pytest.raises(SystemExit):
        main(["run", "--algo", "aisle", "--out", str(workdir)])


def test_parser_lists_subcommands():
    p = build_parser()
    for cmd in ("gen-expert", "train", "run", "sweep"):
        assert cmd in p.format_help()
