import json

import pytest
from hypothesis import given
from hypothesis import strategies as st

from smap.config import ConfigError, RunConfig, parse_config, serialize, to_flat
from smap.tokenizer import TokenizerConfig


def test_empty_object_gives_defaults():
    cfg = parse_config("{}")
    assert cfg == RunConfig()
    assert cfg.tokenizer == TokenizerConfig()
    assert cfg.card.token_count == 8 and cfg.card.cfg_scale == 2.7


def test_zero_latents_names_k():
    with pytest.raises(ConfigError, match="K >= 1"):
        parse_config('{"latent_count": 0}')


def test_unknown_key_is_named():
    with pytest.raises(ConfigError, match="'learning_rate'"):
        parse_config('{"learning_rate": 0.1}')


def test_syntax_error_reports_line():
    with pytest.raises(ConfigError, match="line 3"):
        parse_config('{\n  "seed": 1,\n  "lr": ,\n}')


def test_type_errors():
    with pytest.raises(ConfigError, match="seed"):
        parse_config('{"seed": "one"}')
    with pytest.raises(ConfigError):
        parse_config('{"tail_drop": 1}')
    with pytest.raises(ConfigError):
        parse_config("[1, 2]")


def test_seed_range():
    parse_config(json.dumps({"seed": 2**64 - 1}))
    with pytest.raises(ConfigError):
        parse_config(json.dumps({"seed": 2**64}))
    with pytest.raises(ConfigError):
        parse_config('{"seed": -1}')


def test_mode_and_dtype_checked():
    with pytest.raises(ConfigError):
        parse_config('{"mode": "serve"}')
    with pytest.raises(ConfigError):
        parse_config('{"dtype": "float16"}')


def test_card_keys_are_prefixed_and_derived_sizes_follow_tokenizer():
    cfg = parse_config('{"card_depth": 2, "latent_count": 4, "width": 64, "latent_dim": 8}')
    assert cfg.card.depth == 2
    assert (cfg.card.token_count, cfg.card.cond_dim, cfg.card.latent_dim) == (4, 64, 8)
    with pytest.raises(ConfigError):
        parse_config('{"card_token_count": 3}')


def test_int_accepted_for_float():
    assert parse_config('{"lr": 1}').lr == 1.0


CANONICAL_EDITS = st.fixed_dictionaries(
    {},
    optional={
        "seed": st.integers(0, 2**64 - 1),
        "lr": st.floats(1e-6, 1.0),
        "latent_count": st.integers(1, 16),
        "regu": st.sampled_from(["vq", "kl", "softvq"]),
        "tail_drop": st.booleans(),
        "card_cfg_scale": st.floats(0, 10),
        "card_condition_mode": st.sampled_from(["shared", "independent", "recon_only"]),
        "out_dir": st.text(min_size=1, max_size=10),
        "mode": st.sampled_from(["generate", "gradcheck"]),
    },
)


@given(CANONICAL_EDITS)
def test_roundtrip_matches_canonical_form(doc):
    text = json.dumps(doc)
    canonical = json.dumps({**to_flat(RunConfig()), **doc}, sort_keys=True, indent=2) + "\n"
    assert serialize(parse_config(text)) == canonical
    assert serialize(parse_config(serialize(parse_config(text)))) == serialize(parse_config(text))
