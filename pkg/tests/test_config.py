import pytest

from tpf.benchmark import gen_config_text, test_spec as bench_test_spec, train_specs
from tpf.config import ConfigError, load_config, parse_config
from tpf.plot import line_plot_svg, read_svg_points, write_svg


def test_defaults_and_mandatory_seed(tmp_path):
    cfg = parse_config("[experiment]\nseed = 3\n", tmp_path)
    assert cfg.seed == 3 and cfg.drf.lam == 1.0 and cfg.ndtu.p == 0.65 and cfg.ndtu.n == 50
    assert cfg.out == tmp_path / "runs/default"
    with pytest.raises(ConfigError, match="seed"):
        parse_config("[train]\nbatch = 2\n", tmp_path)
    assert parse_config("[train]\nbatch = 2\n", tmp_path, seed=5).train.batch == 2


@pytest.mark.parametrize("text", [
    "[experiment]\nseed = x\n",
    "[experiment]\nseed = 1\n[bogus]\na = 1\n",
    "[experiment]\nseed = 1\n[train]\nfusion = concat\n",
    "[experiment]\nseed = 1\n[loss]\nmode = sideways\n",
    "[experiment]\nseed = 1\n[ndtu]\nn = 0\n",
    "[experiment]\nseed = 1\n[tracker]\ndim = 66\n",
    "[experiment]\nseed = 1\n[track]\nsize_lr = 0\n",
    "[experiment]\nseed = 1\n[gap]\nlocations = 0, 9\n",
    "[experiment]\nseed = 1\n[experts]\nexternal = a:x\n",
    "[experiment\nseed = 1\n",
])
def test_invalid_configs(tmp_path, text):
    with pytest.raises(ConfigError):
        parse_config(text, tmp_path)


def test_paths_checked_for_data_commands(tmp_path):
    text = "[experiment]\nseed = 1\n[data]\ntrain = a, b\ntest = c\n"
    cfg = parse_config(text, tmp_path)
    assert cfg.train_data == [tmp_path / "a", tmp_path / "b"]
    with pytest.raises(ConfigError, match="do not exist"):
        parse_config(text, tmp_path, command="distill")
    for d in "abc":
        (tmp_path / d).mkdir()
    parse_config(text, tmp_path, command="track")
    with pytest.raises(ConfigError):
        parse_config(text + "[train]\ninit = nope.ckpt\n", tmp_path, command="finetune")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.ini")


def test_loss_section_splits_and_gen_sections(tmp_path):
    text = "[experiment]\nseed = 1\n[loss]\nlam = 0.5\nalpha = 0.2\nw_l1 = 3\n" + gen_config_text(50)
    cfg = parse_config(text, tmp_path)
    assert cfg.drf.lam == 0.5 and cfg.drf.alpha == 0.2 and cfg.task.w_l1 == 3.0
    specs = dict(train_specs(50), test=bench_test_spec(50))
    assert cfg.gen == specs


def test_svg_points_recoverable(tmp_path):
    svg = line_plot_svg({"k=0": ([1, 2, 3], [0.5, 0.25, 0.125])}, "t", "x", "y")
    write_svg(tmp_path / "p.svg", svg)
    assert read_svg_points(tmp_path / "p.svg") == {"k=0": [(1.0, 0.5), (2.0, 0.25), (3.0, 0.125)]}
