import pytest
from hypothesis import given
from hypothesis import strategies as st

from dualflow.config import ConfigError, PROFILES, load_config, parse_document, resolve


def test_empty_file_gives_full_profile_defaults(tmp_path):
    (tmp_path / "empty.cfg").write_text("")
    cfg = load_config(tmp_path / "empty.cfg")
    assert cfg.profile == "paper"
    assert cfg.train.lr == 2e-4 and cfg.train.weight_decay == 2e-5 and cfg.train.warmup_steps == 1000
    assert cfg.train.batch_size == 32 and cfg.train.epochs == 5000
    assert (cfg.model.n_blocks, cfg.model.latent_dim, cfg.model.n_heads, cfg.model.ffn_dim) == (20, 512, 8, 1024)
    assert cfg.model.conv_kernels == (7, 11, 21) and cfg.model.look_ahead == 10 and cfg.model.dropout == 0.1
    assert cfg.sample.steps == 200 and cfg.sample.schedule == "cosine"
    w = cfg.loss
    assert (w.lambda_vel, w.lambda_foot, w.lambda_BL, w.lambda_DM, w.lambda_RO, w.lambda_sync) == (30, 30, 10, 3, 0.01, 5)
    assert cfg.retrieval.k == 2 and cfg.retrieval.lambda_len == 1.0
    assert cfg.eval.sigma == 0.1 and cfg.eval.feature_dim == 32


def test_desk_profile():
    cfg = load_config(profile="desk")
    assert (cfg.model.n_blocks, cfg.model.latent_dim, cfg.model.n_heads, cfg.model.ffn_dim) == (2, 64, 4, 128)
    assert cfg.sample.steps == 50 and cfg.train.batch_size == 8


def test_precedence(tmp_path):
    (tmp_path / "c.cfg").write_text("profile = desk\ntrain.lr = 0.005\n[model]\nn_blocks = 3\n")
    cfg = load_config(tmp_path / "c.cfg", ["model.n_blocks=4"])
    assert cfg.train.lr == 0.005 and cfg.model.n_blocks == 4 and cfg.model.latent_dim == 64


def test_unknown_key_named(tmp_path):
    with pytest.raises(ConfigError, match="model.n_blokcs"):
        load_config(overrides=["model.n_blokcs=3"])
    (tmp_path / "c.cfg").write_text("nonsense.key = 1\n")
    with pytest.raises(ConfigError, match="nonsense.key"):
        load_config(tmp_path / "c.cfg")


def test_constraint_violation():
    with pytest.raises(ConfigError, match="n_heads"):
        load_config(overrides=["model.n_heads=3", "model.latent_dim=64"])


@pytest.mark.parametrize("item", ["train.batch_size=1.5", "model.dropout=abc", "model.share_branch_weights=3"])
def test_type_errors(item):
    with pytest.raises(ConfigError):
        load_config(overrides=[item])


def test_malformed_line():
    with pytest.raises(ConfigError, match=":2:"):
        parse_document("a.b = 1\nno equals here\n")


def test_unknown_profile():
    with pytest.raises(ConfigError):
        resolve({"profile": "laptop"})


def test_sample_mode_follows_model():
    assert load_config(overrides=["model.mode=reactive"]).sample.mode == "reactive"
    cfg = load_config(overrides=["model.mode=reactive", "sample.mode=interactive"])
    assert cfg.sample.mode == "interactive"


@pytest.mark.parametrize("profile", sorted(PROFILES))
def test_echo_roundtrip(tmp_path, profile):
    cfg = load_config(profile=profile, overrides=["model.conv_kernels=3,5", "data.tempo_range=100,120"])
    (tmp_path / "echo.cfg").write_text(cfg.echo())
    again = load_config(tmp_path / "echo.cfg")
    assert again == cfg
    assert again.echo() == cfg.echo()


@given(st.integers(1, 8), st.floats(1e-6, 1e-1), st.sampled_from(["uniform", "cosine"]))
def test_resolution_deterministic(blocks, lr, schedule):
    over = [f"model.n_blocks={blocks}", f"train.lr={lr!r}", f"sample.schedule={schedule}"]
    a, b = load_config(profile="desk", overrides=over), load_config(profile="desk", overrides=over)
    assert a == b and a.model.n_blocks == blocks and a.train.lr == lr
