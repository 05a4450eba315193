import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from manifold_gan.config import RunConfig, all_keys, load_config, parse_config, serialize_config
from manifold_gan.errors import ConfigError


def test_published_defaults():
    cfg = RunConfig()
    assert cfg.loss.lambda_ == 1e-3
    assert cfg.loss.epsilon == 1e-5
    assert cfg.train.batch_size == 25
    assert (cfg.train.epochs, cfg.train.decay_start) == (1400, 1200)
    assert (cfg.optim.lr, cfg.optim.beta1) == (3e-4, 0.5)
    assert cfg.model.latent_dim == 100
    assert cfg.model.init_sigma == 0.05
    assert cfg.model.lrelu_slope == 0.2
    assert len(cfg.run.seeds) == 5


def test_mc_samples_defaults_to_batch_size():
    cfg = parse_config("train.batch_size = 50\n")
    assert cfg.mc_samples == 50
    assert parse_config("loss.mc_samples = 7\n").mc_samples == 7


def test_missing_lambda_is_defaulted_and_marked():
    cfg = parse_config("train.epochs = 10\ntrain.decay_start = 5\n")
    assert cfg.loss.lambda_ == 1e-3
    echo = serialize_config(cfg, mark_defaults=True)
    assert "loss.lambda = 0.001  # default" in echo
    assert "train.epochs = 10\n" in echo


def test_unknown_field_named():
    with pytest.raises(ConfigError) as err:
        parse_config("loss.lambda = 0.1\nloss.lamda = 0.2\n")
    assert err.value.field == "loss.lamda"


@pytest.mark.parametrize("text, field", [
    ("loss.lambda = -1", "loss.lambda"),
    ("train.batch_size = many", "train.batch_size"),
    ("run.mode = solo", "run.mode"),
    ("train.decay_start = 2000", "train.decay_start"),
    ("model.generator_bn_weight_norm = maybe", "model.generator_bn_weight_norm"),
    ("loss.epsilon = 1e-5\nloss.epsilon = 1e-4", "loss.epsilon"),
])
def test_invalid_values_name_the_field(text, field):
    with pytest.raises(ConfigError) as err:
        parse_config(text)
    assert err.value.field == field


def test_comments_and_blank_lines():
    cfg = parse_config("# header\n\nloss.lambda = 0  # ablation\n")
    assert cfg.loss.lambda_ == 0.0


def test_load_config_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "nope.cfg")


def test_replace_with_dotted_keys():
    cfg = RunConfig().replace(**{"loss.lambda": 0.0, "run.seeds": (3,)})
    assert cfg.loss.lambda_ == 0.0 and cfg.run.seeds == (3,)
    assert RunConfig().loss.lambda_ == 1e-3


def test_round_trip_defaults():
    text = serialize_config(RunConfig())
    assert serialize_config(parse_config(text)) == text
    assert len(text.splitlines()) == len(all_keys())


_values = {
    "loss.lambda": st.floats(0, 10, allow_nan=False),
    "loss.epsilon": st.floats(1e-9, 1.0),
    "train.batch_size": st.integers(1, 500),
    "model.width": st.floats(0.01, 4.0),
    "model.profile": st.sampled_from(["conv-large", "conv-small", "mlp"]),
    "run.mode": st.sampled_from(["joint", "two-stage", "baseline"]),
    "run.seeds": st.lists(st.integers(0, 10**6), min_size=1, max_size=6).map(tuple),
    "train.early_stopping": st.booleans(),
    "loss.mc_samples": st.one_of(st.none(), st.integers(1, 100)),
    "run.name": st.from_regex(r"[a-z][a-z0-9_-]{0,10}", fullmatch=True),
}


@settings(max_examples=60, deadline=None)
@given(st.fixed_dictionaries({}, optional=_values))
def test_property_round_trip(changes):
    cfg = RunConfig().replace(**changes)
    text = serialize_config(cfg)
    again = parse_config(text)
    assert again == cfg
    assert serialize_config(again) == text
