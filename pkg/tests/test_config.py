import pytest

from matchattn.config import load_config, parse_config
from matchattn.training import SEED_ENV


def test_defaults():
    d, t = parse_config("")
    assert d.task == "stereo" and d.A == 1.0 and t.lr == 5e-4 and t.weight_decay == 0.05


def test_overrides(tmp_path):
    p = tmp_path / "run.ini"
    p.write_text("[model]\ntask = flow\n[loss]\nA = 2\neps = 0.5\n[train]\nsteps = 7\nlr = 1e-3\n")
    d, t = load_config(p)
    assert (d.task, d.A, d.eps, t.steps, t.lr) == ("flow", 2.0, 0.5, 7, 1e-3)


@pytest.mark.parametrize("text", ["[extra]\na=1\n", "[model]\ndepth = 3\n", "[loss]\nbeta = 1\n", "[train]\nlrr = 1\n"])
def test_unknown_keys_rejected(text):
    with pytest.raises(ValueError):
        parse_config(text)


def test_env_seed(monkeypatch):
    monkeypatch.setenv(SEED_ENV, "11")
    assert parse_config("[train]\nseed = 2\n")[1].seed == 11
