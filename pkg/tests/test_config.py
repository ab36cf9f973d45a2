import pytest

from moma.config import ConfigError, default_config, distill_config, dumps, load_config, parse_overrides


def test_recipe_defaults():
    d = default_config("distill")
    assert d["distill"]["mask_ratio"] == 0.9
    assert (d["distill"]["alpha"], d["distill"]["beta"]) == (0.5, 0.5)
    assert (d["optim"]["lr"], d["optim"]["weight_decay"]) == (1.5e-4, 0.05)
    assert (d["optim"]["beta1"], d["optim"]["beta2"]) == (0.9, 0.95)
    assert (d["run"]["epochs"], d["run"]["warmup_epochs"], d["run"]["batch_size"]) == (100, 20, 128)
    f = default_config("finetune")
    assert (f["optim"]["lr"], f["optim"]["beta2"], f["run"]["warmup_epochs"]) == (1.5e-3, 0.999, 5)
    assert default_config("pretrain-mae")["mae"]["mask_ratio"] == 0.75


def test_file_then_overrides(tmp_path):
    path = tmp_path / "c.toml"
    path.write_text('[distill]\nmode = "multi"\nmask_ratio = 0.75\n[run]\nseed = 4\n')
    cfg = load_config(path, ["distill.mask_ratio=0.9", "run.epochs=3", "run.warmup_epochs=1"], kind="distill")
    assert cfg["distill"]["mode"] == "multi" and cfg["distill"]["mask_ratio"] == 0.9
    assert cfg["run"]["seed"] == 4 and cfg["run"]["epochs"] == 3


def test_override_parsing():
    assert parse_overrides(["a.b=1", "a.c=0.5", "a.d=true", "a.e=hello", 'a.f=["x", "y"]']) == {
        "a": {"b": 1, "c": 0.5, "d": True, "e": "hello", "f": ["x", "y"]}}


@pytest.mark.parametrize("override", ["distill.mask_ratio=1.5", "distill.nope=1", "nosection.x=1", "run.seed=abc",
                                      "run=3", "distill.mode=sideways", "moco.augment=heavy", "run.warmup_epochs=200"])
def test_invalid_overrides(override):
    with pytest.raises(ConfigError):
        load_config(None, [override], kind="distill")


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.toml")


def test_bad_toml(tmp_path):
    (tmp_path / "x.toml").write_text("[run\n")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "x.toml")


def test_snapshot_round_trip(tmp_path):
    cfg = load_config(None, ["distill.alpha=0.25"], kind="distill")
    (tmp_path / "s.toml").write_text(dumps(cfg))
    assert load_config(tmp_path / "s.toml", kind="distill") == cfg


def test_distill_config_view():
    dc = distill_config(load_config(None, ["distill.mode=multi", "distill.beta=1.0"], kind="distill"))
    assert dc.mode == "multi" and dc.beta == 1.0


def test_ablate_sizes_checked():
    with pytest.raises(ConfigError):
        load_config(None, ['ablate.sizes=["tiny-micro"]'], kind="ablate")


KINDS = {"pretrain_moco": "pretrain-moco", "pretrain_mae": "pretrain-mae", "probe": "probe", "finetune": "finetune",
         "ablate_mask_ratio": "ablate"}


def test_shipped_configs_load():
    from pathlib import Path

    paths = sorted((Path(__file__).parent.parent / "configs").glob("*.toml"))
    assert paths
    for path in paths:
        load_config(path, kind=KINDS.get(path.stem, "distill"))
