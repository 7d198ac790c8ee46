import pytest

from geofeat.config import PipelineConfig, load_config, parse_config_text
from geofeat.errors import ConfigInvalid


def test_defaults_carry_method_constants():
    cfg = load_config()
    assert (cfg.support_k, cfg.sigma1, cfg.sigma2, cfg.prune_threshold) == (12.0, 15.0, 20.0, 0.85)
    assert (cfg.n1, cfg.n2, cfg.alpha, cfg.lam) == (64, 12, 0.4, 0.2)
    assert (cfg.lr, cfg.lr_decay, cfg.lr_decay_every, cfg.weight_decay) == (0.001, 0.9, 10000, 1e-4)
    assert cfg.loss_params().alpha == 0.4 and cfg.geo_params().prune_threshold == 0.85


def test_dump_roundtrip(tmp_path):
    cfg = load_config(overrides={"seed": "7", "lambda": "0.3", "synth.n_tracks": "50", "mutual": "false"})
    path = tmp_path / "run.cfg"
    path.write_text(cfg.dumps())
    again = load_config(str(path))
    assert again == cfg and again.synth.n_tracks == 50 and again.mutual is False


def test_unknown_key_rejected():
    with pytest.raises(ConfigInvalid) as err:
        load_config(overrides={"learning_rate": "0.1"})
    assert err.value.key == "learning_rate"
    with pytest.raises(ConfigInvalid) as err:
        load_config(overrides={"synth.bogus": "1"})
    assert err.value.key == "synth.bogus"


@pytest.mark.parametrize("key,value", [("alpha", "1.5"), ("n1", "1"), ("sigma1", "0"), ("arch", "huge"),
                                       ("prune_threshold", "2"), ("synth.n_cameras", "1"), ("steps", "-1"),
                                       ("holdout_pairs", "0-3")])
def test_out_of_domain_names_key(key, value):
    with pytest.raises(ConfigInvalid) as err:
        load_config(overrides={key: value})
    assert err.value.key.startswith(key.split(".")[0])


def test_unparsable_value():
    with pytest.raises(ConfigInvalid) as err:
        load_config(overrides={"n2": "twelve"})
    assert err.value.key == "n2"


def test_config_text_rules():
    assert parse_config_text("# comment\nseed = 3  # trailing\n\nn1=8\n") == {"seed": "3", "n1": "8"}
    with pytest.raises(ConfigInvalid):
        parse_config_text("seed = 1\nseed = 2\n")
    with pytest.raises(ConfigInvalid):
        parse_config_text("just words\n")


def test_holdout_parsing():
    cfg = PipelineConfig(holdout_pairs="3:0, 2:5")
    assert cfg.holdout() == [(0, 3), (2, 5)]


def test_micro_arch_needs_small_grid():
    with pytest.raises(ConfigInvalid) as err:
        load_config(overrides={"arch": "micro"})
    assert err.value.key == "grid_size"
    assert load_config(overrides={"arch": "micro", "grid_size": "8"}).arch == "micro"
