import pytest
from hypothesis import given, settings, strategies as st

from cmirec.config import ConfigError, RunConfig, load_config, parse_config


def test_defaults():
    h = RunConfig().hyper
    assert (h.epsilon, h.tau, h.lambda_cl, h.lambda_orth, h.mu) == (0.1, 0.1, 0.01, 10.0, 0.5)
    assert (h.dim, h.batch_size, h.num_interests, h.max_len, h.num_negatives, h.patience) == \
        (64, 1024, 8, 100, 1, 5)


def test_aliases_comments_and_blank_lines():
    cfg = parse_config("# a comment\n\nm = 4\neps = 0.5  # trailing\nplots = false\n")
    assert cfg.hyper.num_interests == 4 and cfg.hyper.epsilon == 0.5 and cfg.plots is False


def test_override_wins(tmp_path):
    path = tmp_path / "c.txt"
    path.write_text("m = 4\nseed = 3\n")
    cfg = load_config(path, ["m=8"])
    assert cfg.hyper.num_interests == 8 and cfg.seed == 3


@pytest.mark.parametrize("text", ["nonsense", "bogus = 1", "m = four", "use_general = maybe"])
def test_bad_lines(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_invariants_checked():
    with pytest.raises(ConfigError):
        parse_config("eps = 0")
    with pytest.raises(ConfigError):
        parse_config("span_days = 2").validate()


def test_missing_file():
    with pytest.raises(ConfigError, match="nope.txt"):
        load_config("nope.txt")


def test_tab_delimiter_round_trip():
    cfg = parse_config("delimiter = \\t\n")
    assert cfg.delimiter == "\t"
    assert parse_config(cfg.to_text()) == cfg


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 16), st.floats(1e-3, 10, allow_nan=False), st.integers(0, 2 ** 31),
       st.booleans(), st.sampled_from(["combined", "multi_cosine"]))
def test_round_trip(m, eps, seed, general, mode):
    cfg = load_config(None, [f"m={m}", f"eps={eps!r}", f"seed={seed}", f"use_general={general}",
                             f"rank_mode={mode}", "output_dir=out dir"])
    assert parse_config(cfg.to_text()) == cfg
