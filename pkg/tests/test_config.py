import pytest

from deepstack.config import RunConfig, bundled_configs, load_config, parse_text
from deepstack.errors import ConfigError


def test_defaults_materialize():
    cfg = parse_text("")
    assert cfg == RunConfig()
    assert cfg.norm_strategy == "foundation" and cfg.tie_lm_head is False
    bert = parse_text("arch = bert\ntask = mlm\ndata-path = x\n")
    assert bert.norm_strategy == "upscale" and bert.tie_lm_head is True


def test_text_round_trip():
    cfg = parse_text("num-layers = 7\nlearning-rate = 3e-4\nnorm-strategy = deepnorm\n")
    again = parse_text(cfg.to_text())
    assert again == cfg
    assert cfg.to_dict()["num-layers"] == "7"


def test_unknown_key_suggests_nearest():
    with pytest.raises(ConfigError, match="num-layer.*did you mean 'num-layers'"):
        parse_text("num-layer = 4\n")


def test_grammar():
    cfg = parse_text("# comment\n\n  steps = 5   # trailing\n")
    assert cfg.steps == 5
    with pytest.raises(ConfigError, match="duplicate"):
        parse_text("steps = 5\nsteps = 6\n")
    with pytest.raises(ConfigError, match="key = value"):
        parse_text("steps 5\n")
    with pytest.raises(ConfigError):
        parse_text("Steps = 5\n")  # keys are case-sensitive


@pytest.mark.parametrize(
    "text",
    [
        "learning-rate = nan\n",
        "num-layers = 0\n",
        "hidden-size = 30\nnum-attention-heads = 4\n",
        "steps = 1.5\n",
        "optimizer = sgd\n",
        "task = mlm\ndata-path = x\n",
        "task = char-lm\n",
        "seq-length = 7\n",
        "norm-strategy = bogus\n",
        "min-learning-rate = 1\n",
    ],
)
def test_invalid_values(text):
    with pytest.raises(ConfigError):
        parse_text(text)


def test_missing_file_names_it(tmp_path):
    with pytest.raises(ConfigError, match="nowhere.cfg"):
        load_config(tmp_path / "nowhere.cfg")


def test_data_path_relative_to_config(tmp_path):
    (tmp_path / "c.txt").write_bytes(b"x" * 100)
    (tmp_path / "run.cfg").write_text("task = char-lm\ndata-path = c.txt\n")
    assert load_config(tmp_path / "run.cfg").data_path == str(tmp_path / "c.txt")


def test_bundled_configs():
    assert {"table1.cfg", "table2.cfg", "table1-desk.cfg", "table2-desk.cfg"} <= set(bundled_configs())
    t1, t2 = load_config("table1.cfg"), load_config("table2.cfg")
    assert (t1.arch, t1.num_layers, t1.hidden_size, t1.num_heads, t1.seq_length) == ("bert", 1000, 64, 2, 512)
    assert (t1.lr, t1.min_lr, t1.decay_style, t1.warmup_fraction, t1.weight_decay) == (1e-4, 1e-5, "linear", 0.01, 0.01)
    assert t1.fp16 and t1.vocab_size == 30522 and t1.tie_lm_head
    assert (t2.arch, t2.num_layers, t2.hidden_size, t2.num_heads, t2.seq_length) == ("gpt", 1000, 256, 1, 1024)
    assert (t2.lr, t2.decay_style, t2.warmup_fraction, t2.weight_decay) == (1e-5, "cosine", 0.01, 0.0)
    assert t2.fp32 and t2.vocab_size == 50257 and not t2.tie_lm_head
    assert t2.model_config().precision == "float32"
    for name in ("table1-desk.cfg", "table2-desk.cfg"):
        desk = load_config(name)
        assert desk.num_layers <= 64
        with open(desk.data_path, "rb") as fh:
            assert len(fh.read()) > 10_000
