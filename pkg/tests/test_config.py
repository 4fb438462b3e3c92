import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vexpert import config
from vexpert.backbone import FTR, PER, TS
from vexpert.errors import ConfigError


@st.composite
def configs(draw):
    n_teachers = draw(st.integers(1, 3))
    kinds = tuple(draw(st.sampled_from(["local", "mixing", "global"])) for _ in range(n_teachers))
    n_experts = draw(st.integers(1, 8))
    per = draw(st.booleans())
    strategy = "per" if per else draw(st.sampled_from(["ftr", "ltr"] + [f"ts{i}" for i in range(n_teachers)]))
    floats = st.floats(1e-6, 10, allow_nan=False)
    return config.defaults().replace(**{
        "teachers.kinds": kinds,
        "teachers.dims": tuple(draw(st.integers(1, 64)) for _ in kinds),
        "loss.alpha": draw(st.sampled_from([(), tuple(1.0 / n_teachers for _ in kinds)])),
        "loss.gamma": draw(floats),
        "model.n_experts": n_experts,
        "model.top_k": draw(st.integers(1, n_experts)),
        "model.router_dropout": draw(st.floats(0, 0.9)),
        "routing.strategy": strategy,
        "routing.cta": per and draw(st.booleans()),
        "routing.k_min": draw(st.integers(1, n_experts)),
        "finetune.n_dfm": n_experts,
        "finetune.lr": draw(floats),
        "finetune.schedule": draw(st.sampled_from(["constant", "cosine"])),
        "task.relevant_teacher": draw(st.integers(0, n_teachers - 1)),
        "run.seed": draw(st.integers(0, 2**32)),
        "run.out_dir": draw(st.sampled_from(["runs", "out dir/with space", "x"])),
        "analysis.enabled": draw(st.booleans()),
    })


@settings(max_examples=60, deadline=None)
@given(configs())
def test_serialize_parse_round_trip(cfg):
    assert config.parse(config.serialize(cfg)) == cfg


def test_defaults_round_trip_and_reference_values():
    cfg = config.defaults()
    assert config.parse(config.serialize(cfg)) == cfg
    m = cfg.model_config()
    assert (m.dim, m.n_plain, m.n_moe, m.n_experts, m.top_k, m.n_teachers) == (32, 4, 3, 6, 2, 3)
    d = cfg.distill_config()
    assert d.weights(3) == (1 / 3,) * 3 and (d.beta, d.gamma, d.delta) == (0.9, 0.0005, 1.0)


def test_partial_file_keeps_defaults(tmp_path):
    path = tmp_path / "c.ini"
    path.write_text("[distill]\nsteps = 10\n\n[routing]\nstrategy = FTR\n")
    cfg = config.load(path)
    assert cfg.distill.steps == 10 and cfg.strategy() == FTR
    assert cfg.model == config.defaults().model


@pytest.mark.parametrize("text,field", [
    ("[model]\nwidth = 3\n", "model.width"),
    ("[optimizer]\nlr = 3\n", "optimizer.lr"),
    ("[distill]\nsteps = many\n", "distill.steps"),
    ("[routing]\ncta = maybe\n", "routing.cta"),
    ("[routing]\nstrategy = ts7\n", "routing.strategy"),
    ("[routing]\ncta = true\nstrategy = ftr\n", "routing.cta"),
    ("[teachers]\ndims = 4, 4\n", "teachers.dims"),
    ("[teachers]\nkinds = depth\ndims = 4\n", "teachers.kinds"),
    ("[finetune]\nschedule = linear\n", "finetune.schedule"),
    ("[task]\nrelevant_teacher = 3\n", "task.relevant_teacher"),
    ("[model]\nk = 1\n", "model.k"),
])
def test_rejections_name_the_field(text, field):
    with pytest.raises(ConfigError) as exc:
        config.parse(text)
    assert exc.value.field == field
    assert str(exc.value).startswith(field + ": ")


def test_model_contract_surfaces_as_config_error():
    with pytest.raises(ConfigError, match="divisible"):
        config.parse("[model]\nimage_size = 30\n")


def test_malformed_text():
    with pytest.raises(ConfigError, match="malformed"):
        config.parse("steps = 3\n")


def test_strategy_parsing():
    assert config.parse_strategy("TS1", 3) == TS(1)
    assert config.parse_strategy(" per ", 3) == PER
    with pytest.raises(ConfigError, match="ts0, ts1, ftr, ltr, per"):
        config.parse_strategy("ts2", 2)


def test_cta_schedule_and_horizon():
    cfg = config.defaults()
    assert cfg.cta_schedule() is None
    cfg = cfg.replace(**{"routing.cta": True, "finetune.steps": 300})
    sched = cfg.cta_schedule()
    assert (sched.n_experts, sched.k_min, sched.horizon) == (6, 2, 150)
    assert cfg.replace(**{"routing.horizon": 40}).cta_schedule(n_experts=2).horizon == 40
    assert cfg.cta_schedule(n_experts=1).k_min == 1


def test_with_seed_and_replace_are_pure():
    base = config.defaults()
    assert base.with_seed(9).run.seed == 9 and base.run.seed == 0
    assert base.replace(**{"distill.steps": "12"}).distill.steps == 12
