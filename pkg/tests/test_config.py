import json

import pytest

from dinobench.backbone import PRESETS
from dinobench.config import RunConfig, build, coerce, from_dict, load_config, write_echo
from dinobench.errors import ConfigError


def test_defaults_resolve():
    cfg = load_config()
    assert cfg == RunConfig()
    sc = cfg.sweep_config(workers=3)
    assert sc.grid == (1, 5, 10, 25, 50, 100, 250, 500, 1000) and sc.workers == 3 and sc.seed == 0


def test_file_values_are_typed(tmp_path):
    p = tmp_path / "run.ini"
    p.write_text("[trainer]\nsteps = 7\nlr = 0.5\nclip_grad = none\n"
                 "[sweep]\ngrid = 1, 5\nclassifiers = knn\nfilter_250 = yes\n"
                 "[augment]\nglobal_scale = 0.6, 1.0\n[run]\nseed = 9\n")
    cfg = load_config(p)
    assert cfg.trainer.steps == 7 and cfg.trainer.lr == 0.5 and cfg.trainer.clip_grad is None
    assert cfg.sweep.grid == (1, 5) and cfg.sweep.classifiers == ("knn",) and cfg.sweep.filter_250 is True
    assert cfg.augment.global_scale == (0.6, 1.0)
    assert cfg.run.seed == 9


def test_every_offending_key_is_listed(tmp_path):
    p = tmp_path / "bad.ini"
    p.write_text("[trainer]\nsteps = many\nlearning_rate = 1\n[bogus]\nx = 1\n[sweep]\ngrid = 5, 1\n")
    with pytest.raises(ConfigError) as exc:
        load_config(p)
    msg = str(exc.value)
    for needle in ("trainer.steps", "trainer.learning_rate", "[bogus]", "grid"):
        assert needle in msg, needle


def test_overrides_beat_file_and_none_is_ignored(tmp_path):
    p = tmp_path / "run.ini"
    p.write_text("[trainer]\nsteps = 7\n[run]\nseed = 1\n")
    cfg = load_config(p, {"trainer.steps": 3, "run.seed": None})
    assert cfg.trainer.steps == 3 and cfg.run.seed == 1


def test_missing_file_and_preset(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "nope.ini")
    name = sorted(PRESETS)[0]
    cfg = build({"backbone": {"preset": name, "depth": "2"}})
    assert cfg.backbone.embed_dim == PRESETS[name].embed_dim and cfg.backbone.depth == 2
    with pytest.raises(ConfigError, match="preset"):
        build({"backbone": {"preset": "huge"}})


def test_ini_and_dict_round_trips(tmp_path):
    cfg = build({"trainer": {"steps": "11"}, "sweep": {"grid": "1, 5, 10"}, "run": {"seed": "4"}})
    path = write_echo(cfg, tmp_path)
    assert path.name == "resolved_config.ini"
    assert load_config(path) == cfg
    assert from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg


def test_coerce_scalars():
    assert coerce("true", "bool", False) is True
    assert coerce("3", "int", 0) == 3
    assert coerce("none", "float | None", None) is None
    assert coerce("1, 2", "tuple[int, ...]", ()) == (1, 2)
    with pytest.raises(ValueError):
        coerce("maybe", "bool", False)
