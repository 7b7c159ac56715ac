import pytest

from radar_autocal.config import ConfigError, PipelineConfig


def test_parse_with_comments_and_blank_lines():
    cfg = PipelineConfig.parse("# header\n\ncluster_eps = 1.5  # tighter\nrefine_enabled = no\ncluster_min_pts=4\n")
    assert cfg.cluster_eps == 1.5 and cfg.refine_enabled is False and cfg.cluster_min_pts == 4


def test_defaults_untouched():
    cfg = PipelineConfig.parse("")
    assert cfg == PipelineConfig()
    assert cfg.dims.length == 4.7 and cfg.cluster_params.min_pts == 3


@pytest.mark.parametrize(
    "text,msg",
    [
        ("bogus = 1", "unknown"),
        ("cluster_eps = 1\ncluster_eps = 2", "duplicate"),
        ("cluster_eps", "key = value"),
        ("cluster_min_pts = 2.5", "bad int"),
        ("figures = maybe", "bad bool"),
        ("cluster_eps = -1", "positive"),
        ("hypothesis_elevation_mode = tilted", "zero"),
        ("ground_keep_fraction = 1.0", "(0, 1)"),
    ],
)
def test_parse_errors(text, msg):
    with pytest.raises(ConfigError, match=msg):
        PipelineConfig.parse(text)


def test_error_carries_line_number():
    with pytest.raises(ConfigError, match=r"x\.conf:2"):
        PipelineConfig.parse("cluster_eps = 1\nnope = 3", "x.conf")


def test_dumps_round_trip():
    cfg = PipelineConfig(cluster_eps=1.25, refine_smooth=False, verbosity="debug")
    assert PipelineConfig.parse(cfg.dumps()) == cfg


def test_overrides():
    cfg = PipelineConfig().with_overrides(["refine_iterations=5", "figures = false"])
    assert cfg.refine_iterations == 5 and cfg.figures is False
    assert cfg.refine_params.iterations == 5
    with pytest.raises(ConfigError):
        PipelineConfig().with_overrides(["refine_iterations"])
    with pytest.raises(ConfigError):
        PipelineConfig().with_overrides(["refine_iterations=0"])


def test_load(tmp_path):
    p = tmp_path / "a.conf"
    p.write_text("assoc_gate = 4\n")
    assert PipelineConfig.load(p).assoc_gate == 4.0
    with pytest.raises(ConfigError):
        PipelineConfig.load(tmp_path / "missing.conf")
