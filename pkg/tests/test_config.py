import pytest

from nlnet.config import SCHEMA, load_config, parse_config
from nlnet.errors import ConfigError


def test_defaults_and_typed_values():
    cfg = parse_config("""
# a comment
seed: int = 7
nonlocal.policy: str = "five"   # trailing comment
train.decay_marks: list[int] = [10, 20]
train.lr: float = 0.05
nonlocal.use_bn: bool = false
""")
    assert cfg["seed"] == 7 and cfg["nonlocal.policy"] == "five"
    assert cfg["train.decay_marks"] == [10, 20] and cfg["train.lr"] == 0.05
    assert cfg["nonlocal.use_bn"] is False
    assert cfg["task.noise"] == SCHEMA["task.noise"][1]
    assert cfg.lines["train.lr"] == 6


@pytest.mark.parametrize("text,match", [
    ("bogus.key: int = 1", "unknown key"),
    ("seed = 1", "expected 'key: type = value'"),
    ("seed: float = 1.0", "seed is int"),
    ("seed: int = one", "expected int"),
    ("seed: int = 1\nseed: int = 2", "already set on line 1"),
    ("seed: tuple = 1", "unknown type"),
    ("sweep.seed: int = 1", "list\\[int\\]"),
    ("sweep.seed: list[int] = []", "at least one value"),
    ("sweep.out: list[str] = a, b", "cannot be swept"),
])
def test_grammar_errors(text, match):
    with pytest.raises(ConfigError, match=match):
        parse_config(text, "c.txt")


def test_semantic_errors_name_lines():
    with pytest.raises(ConfigError, match=r"line 2: \[nonlocal\]"):
        parse_config("seed: int = 0\nnonlocal.kind: str = cosine\n")
    with pytest.raises(ConfigError, match=r"line 1, 2: \[nonlocal\]"):
        parse_config("nonlocal.mask: str = sideways\nnonlocal.subsample: int = 2\n")
    with pytest.raises(ConfigError, match=r"\[task\]"):
        parse_config("task.classes: int = 3\n")
    with pytest.raises(ConfigError, match=r"\[network\]"):
        parse_config("nonlocal.policy: str = res9:0\n")
    with pytest.raises(ConfigError, match="train_size"):
        parse_config("task.train_size: int = 0\n")


def test_sweep_expansion():
    cfg = parse_config("sweep.nonlocal.kind: list[str] = gaussian, dot_product\n"
                       "sweep.seed: list[int] = 1, 2\nnonlocal.policy: str = one\n")
    runs = cfg.expand()
    assert [r.name for r in runs] == ["kind=gaussian_seed=1", "kind=gaussian_seed=2",
                                      "kind=dot_product_seed=1", "kind=dot_product_seed=2"]
    assert runs[3]["seed"] == 2 and runs[3]["nonlocal.kind"] == "dot_product"
    assert all(r.sweeps == {} for r in runs)


def test_sweep_values_are_validated():
    with pytest.raises(ConfigError, match="run kind=cosine"):
        parse_config("sweep.nonlocal.kind: list[str] = gaussian, cosine\nnonlocal.policy: str = one\n")


def test_explicit_placements_and_build():
    cfg = parse_config("nonlocal.policy: str = res3:1 res5:1\nnetwork.width_scale: float = 0.25\n"
                       "nonlocal.kind: str = concatenation\n")
    net = cfg.build()
    assert [b.name for b in net.nonlocal_blocks()] == ["res3.nl0", "res5.nl0"]
    ctl = parse_config("nonlocal.policy: str = five\nnonlocal.control: bool = true\n").build(allocate=False)
    assert not ctl.nonlocal_blocks()
    i3d = parse_config("network.inflation: str = 3x3x3\n").build(allocate=False)
    assert i3d.conv1.kernel == (5, 7, 7)


def test_dump_roundtrips():
    cfg = parse_config("seed: int = 3\nsweep.nonlocal.kind: list[str] = gaussian, dot_product\n")
    again = parse_config(cfg.dump())
    assert again.values == cfg.values and again.sweeps == cfg.sweeps


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="cannot read"):
        load_config(tmp_path / "nope.txt")
