import pytest

from unimlvg.config import RunConfig, from_mapping, load_config, parse_override
from unimlvg.errors import ValidationError


def test_defaults_validate_and_hash_is_stable():
    a, b = RunConfig(), load_config()
    a.validate()
    assert a.digest() == b.digest() and len(a.digest()) == 64
    assert a.model.hidden == 64 and a.sample.cfg_scale == 3.0 and a.sample.steps == 50


def test_overrides_change_the_hash(tmp_path):
    base = load_config()
    cfg = load_config(None, ["train.lr=0.01", "model.heads=2", "train.ratios=vp_only"])
    assert cfg.train.lr == 0.01 and cfg.model.heads == 2
    assert cfg.train.ratio_tuple() == (1.0, 0.0, 0.0, 0.0)
    assert cfg.digest() != base.digest()
    path = tmp_path / "run.yaml"
    path.write_text(cfg.to_yaml())
    assert load_config(path).digest() == cfg.digest()


@pytest.mark.parametrize(
    "raw",
    [
        {"modle": {}},
        {"model": {"width_mult": 2}},
        {"model": {"height": 50}},
        {"train": {"ratios": [0.5, 0.5, 0.5, 0.5]}},
        {"train": {"ratios": "mostly_vp"}},
        {"sample": {"k_ref": 8}},
        {"data": {"views": [0, 0]}},
        {"train": {"stage_steps": 5}},
    ],
)
def test_bad_configs(raw):
    with pytest.raises(ValidationError):
        from_mapping(raw)


@pytest.mark.parametrize("item", ["lr=1", "train.lr", "other.lr=1", "train.=3"])
def test_bad_overrides(item):
    with pytest.raises(ValidationError):
        parse_override(item)


def test_missing_or_broken_file(tmp_path):
    with pytest.raises(ValidationError):
        load_config(tmp_path / "nope.yaml")
    bad = tmp_path / "bad.yaml"
    bad.write_text("model: [1, 2\n")
    with pytest.raises(ValidationError):
        load_config(bad)
