import pytest

from bip.config import ConfigError, ExperimentConfig, load_config, parse_config, set_value

TEXT = """
# 1D deconvolution ensemble
problem.name = deconv1d
prior.kind = cauchy_gaussian   # trailing comment
prior.widths = 10, 10, 20
optimizer.adam_lr = 0.02
optimizer.lbfgs_steps = 1e3
pcn.dump = no
tails.point = 0.3, -0.2
output.image_lo = none
"""


def test_parse_and_coerce():
    cfg = parse_config(TEXT)
    assert cfg.prior.kind == "cauchy_gaussian"
    assert cfg.prior.widths == [10, 10, 20]
    assert cfg.optimizer.adam_lr == 0.02
    assert cfg.optimizer.lbfgs_steps == 1000 and isinstance(cfg.optimizer.lbfgs_steps, int)
    assert cfg.pcn.dump is False
    assert cfg.tails.point == [0.3, -0.2]
    assert cfg.output.image_lo is None


def test_text_round_trip(tmp_path):
    cfg = parse_config(TEXT)
    (tmp_path / "c.cfg").write_text(cfg.to_text())
    assert load_config(tmp_path / "c.cfg") == cfg


@pytest.mark.parametrize("line", [
    "problem.name = deblur3d",
    "prior.kind = laplace",
    "prior.depth = 3",
    "nosection = 1",
    "prior.widths = a, b",
    "pcn.dump = maybe",
    "optimizer.n_restarts = 1",
    "pcn.burn_in_fraction = 1.0",
    "just words",
])
def test_rejects_bad_lines(line):
    with pytest.raises(ConfigError):
        parse_config(line)


def test_resolved_defaults_per_problem():
    one = ExperimentConfig().resolved()
    assert one.problem.resolution == 128 and one.problem.noise_std == 0.05
    assert one.prior.widths == [50, 50, 100] and one.optimizer.adam_steps == 500
    assert one.pcn.n_samples == 200_000 and one.pcn.burn_in == 100_000
    two = parse_config("problem.name = deblur2d").resolved()
    assert two.problem.resolution == 50 and two.problem.noise_std == 0.01
    assert two.prior.widths == [80, 80, 1000] and two.optimizer.adam_steps == 200
    big = parse_config("problem.name = deblur2d")
    big.paper_scale = True
    big = big.resolved()
    assert big.problem.resolution == 100 and big.pcn.n_samples == 1_000_000
    # explicit values win and the original is left untouched
    cfg = parse_config("pcn.n_samples = 1000\npcn.burn_in = 10")
    r = cfg.resolved()
    assert r.pcn.burn_in == 10 and cfg.problem.resolution is None


def test_set_value():
    cfg = ExperimentConfig()
    set_value(cfg, "gpr.length", "2.5")
    assert cfg.gpr.length == 2.5
    with pytest.raises(ConfigError):
        set_value(cfg, "gpr.width", "1")
