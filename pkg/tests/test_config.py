import pytest

from NAAS.config import (
    BENCHMARKS,
    DESK_PROFILE,
    load_config,
    parse_config_text,
    parse_overrides,
)
from NAAS.energy import GaussianMixture, ManyWell
from NAAS.exceptions import ConfigError

MW54 = "[run]\nbenchmark = mw54\n"


def _load(text=MW54, overrides=None, environ=None):
    return load_config(text=text, overrides=overrides, environ=environ or {})


class TestPresets:
    @pytest.mark.parametrize("benchmark", [name for name in BENCHMARKS if name != "custom"])
    def test_every_preset_validates(self, benchmark):
        cfg = load_config(overrides={"run": {"benchmark": benchmark}}, environ={})
        assert cfg.run.benchmark == benchmark
        assert cfg.build_potential().dim == cfg.build_target().dim

    def test_many_well_preset(self):
        cfg = _load()
        assert cfg.energy.variant == "many-well"
        assert cfg.energy.dim == 5
        assert cfg.train.lr_v == 1e-8
        assert cfg.train.a_max is None
        assert cfg.train.e_max == 100.0
        target = cfg.build_target()
        assert isinstance(target, ManyWell)
        assert target.centers.shape == (32, 5)

    def test_grid_preset_needs_no_dimension(self):
        cfg = _load(overrides={"run": {"benchmark": "gmm-grid"}, "energy": {"dim": "none"}})
        assert cfg.energy.dim is None
        target = cfg.build_target()
        assert isinstance(target, GaussianMixture) and target.dim == 2

    def test_custom_benchmark_needs_a_variant(self):
        with pytest.raises(ConfigError) as info:
            _load("[run]\nbenchmark = custom\n")
        assert info.value.key == "energy.variant"
        cfg = _load("[run]\nbenchmark = custom\n[energy]\nvariant = funnel\ndim = 3\n")
        assert cfg.build_target().dim == 3

    def test_desk_profile(self):
        cfg = _load(MW54 + "profile = desk\n")
        for key, value in DESK_PROFILE["train"].items():
            assert getattr(cfg.train, key) == value
        assert cfg.train.lr_u == 1e-5
        assert cfg.metrics.eval_samples == DESK_PROFILE["metrics"]["eval_samples"]

    def test_presets_are_not_mutated(self):
        _load(overrides={"train": {"lr_u": "0.5"}})
        assert BENCHMARKS["mw54"]["train"]["lr_u"] == 1e-5


class TestLayers:
    """Precedence: preset, file, environment, overrides."""

    def test_file_overrides_preset(self):
        cfg = _load(MW54 + "[train]\nlr_u = 1e-3\n")
        assert cfg.train.lr_u == 1e-3

    def test_environment_then_overrides(self):
        text = MW54 + "[train]\nlr_u = 1e-3\n"
        environ = {"NAAS_TRAIN_LR_U": "1e-4", "NAAS_RUN_SEED": "9"}
        cfg = _load(text, environ=environ)
        assert cfg.train.lr_u == 1e-4
        assert cfg.seed == 9
        cfg = _load(text, overrides={"train": {"lr_u": "2e-4"}}, environ=environ)
        assert cfg.train.lr_u == 2e-4

    def test_none_values(self):
        cfg = _load(MW54 + "[train]\ne_max = none\ngrad_clip = None\n")
        assert cfg.train.e_max is None
        assert cfg.train.grad_clip is None
        assert cfg.train_config().e_max is None

    def test_hidden_widths(self):
        assert _load().hidden() is None
        cfg = _load(overrides={"net": {"hidden": "32, 16"}})
        assert cfg.hidden() == (32, 16)
        assert cfg.train_config().hidden == (32, 16)

    def test_numeric_bandwidth(self):
        cfg = _load(overrides={"metrics": {"mmd_bandwidth": "0.5"}})
        assert cfg.train_config().mmd_bandwidth == 0.5
        assert _load().train_config().mmd_bandwidth == "median"

    def test_round_trip_through_dumps(self):
        cfg = _load(
            MW54 + "profile = desk\n[net]\nhidden = 8,8\n",
            overrides={"train": {"a_max": "3.5", "mode": "naas-biased"}},
        )
        again = _load(cfg.dumps())
        assert again == cfg
        assert again.dumps() == cfg.dumps()

    def test_save(self, tmp_path):
        cfg = _load()
        cfg.save(tmp_path / "config.resolved")
        assert load_config(tmp_path / "config.resolved", environ={}) == cfg


class TestErrors:
    """Every error names where the bad value came from."""

    def test_missing_benchmark(self):
        with pytest.raises(ConfigError) as info:
            _load("[train]\nlr_u = 1e-4\n")
        assert info.value.key == "run.benchmark"
        assert "run.benchmark" in str(info.value)

    def test_invalid_value_reports_its_line(self):
        with pytest.raises(ConfigError) as info:
            _load(MW54 + "\n[train]\nlr_u = fast\n")
        assert info.value.line == 5
        assert info.value.key == "train.lr_u"
        assert str(info.value).startswith("<text>:5: ")

    def test_file_name_in_the_message(self, tmp_path):
        path = tmp_path / "bad.cfg"
        path.write_text(MW54 + "[train]\nstages = three\n")
        with pytest.raises(ConfigError) as info:
            load_config(path, environ={})
        assert str(info.value).startswith(f"{path}:4: ")

    def test_invalid_environment_value(self):
        with pytest.raises(ConfigError) as info:
            _load(environ={"NAAS_TRAIN_N_PATHS": "many"})
        assert "env:NAAS_TRAIN_N_PATHS" in str(info.value)

    def test_unknown_benchmark(self):
        with pytest.raises(ConfigError) as info:
            _load("# runs\n[run]\nbenchmark = rosenbrock\n")
        assert info.value.line == 3

    @pytest.mark.parametrize(
        "text, line",
        [
            ("[run]\nbenchmark = mw54\nbenchmark = funnel\n", 3),
            ("[runs]\nbenchmark = mw54\n", 1),
            ("[run\nbenchmark = mw54\n", 1),
            ("benchmark = mw54\n", 1),
            ("[run]\nbenchmark mw54\n", 2),
            ("[run]\nbench = mw54\n", 2),
        ],
        ids=["repeated", "section", "header", "outside", "no-equals", "key"],
    )
    def test_malformed_text(self, text, line):
        with pytest.raises(ConfigError) as info:
            parse_config_text(text)
        assert info.value.line == line

    def test_invalid_combination(self):
        with pytest.raises(ConfigError):
            _load(overrides={"train": {"mode": "flow"}})
        with pytest.raises(ConfigError):
            _load(MW54 + "profile = laptop\n")

    def test_negative_seed(self):
        with pytest.raises(ConfigError) as info:
            _load(MW54 + "seed = -1\n")
        assert info.value.key == "run.seed"
        assert _load(MW54 + "seed = 0\n").run.seed == 0

    def test_unreadable_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "missing.cfg", environ={})


class TestOverrides:
    def test_parse(self):
        layer = parse_overrides(["train.lr_u=1e-3", "net.hidden = 8,8"])
        assert layer == {"train": {"lr_u": "1e-3"}, "net": {"hidden": "8,8"}}
        assert parse_overrides(None) == {}

    @pytest.mark.parametrize("item", ["train.lr_u", "lr_u=1", "train.speed=1", "foo.bar=1"])
    def test_rejects(self, item):
        with pytest.raises(ConfigError):
            parse_overrides([item])
