import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ddxnet.errors import ConfigError, InvalidArgumentError, ShapeError
from ddxnet.model import (DDxConfig, DilationMode, Head, block_forward, build, channel_plan,
                          dilation_schedule, forward, param_count, receptive_field,
                          transition_forward)
from ddxnet.ops import Mode
from ddxnet.tensor import Tensor

from modelcheck import (causality_violations, measured_receptive_field, model_gradcheck,
                        random_config)

TINY = DDxConfig(in_channels=2, num_classes=3, stages=1, blocks_per_stage=2, growth_rate=4,
                 kernel_size=3, stem_channels=8, stem_kernel=3)


def test_dilation_schedule():
    cfg = DDxConfig(in_channels=1, num_classes=2, stages=2, blocks_per_stage=3)
    assert sum(dilation_schedule(cfg), []) == [1, 2, 4, 1, 2, 4]
    fixed = DDxConfig(in_channels=1, num_classes=2, dilation_mode=DilationMode.fixed(1))
    assert all(d == 1 for d in sum(dilation_schedule(fixed), []))
    one = DDxConfig(in_channels=1, num_classes=2, stages=1, blocks_per_stage=1)
    assert dilation_schedule(one) == [[1]]


def test_config_validation():
    with pytest.raises(ConfigError):
        DDxConfig(in_channels=0, num_classes=2)
    with pytest.raises(ConfigError):
        DDxConfig(in_channels=1, num_classes=1)
    DDxConfig(in_channels=1, num_classes=1, head=Head.MULTILABEL)
    with pytest.raises(ConfigError):
        DDxConfig(in_channels=1, num_classes=2, compression=0.0)
    with pytest.raises(ConfigError):
        DDxConfig(in_channels=1, num_classes=2, compression=1.5)


def test_degenerate_compression():
    cfg = DDxConfig(in_channels=1, num_classes=2, stages=2, blocks_per_stage=1, growth_rate=1,
                    stem_channels=1, compression=0.4)
    with pytest.raises(ConfigError):
        build(cfg)


def test_config_json_round_trip():
    cfg = DDxConfig(in_channels=22, num_classes=5, dilation_mode=DilationMode.fixed(3),
                    head=Head.MULTILABEL)
    text = json.dumps(cfg.to_json())
    assert DDxConfig.from_json(json.loads(text)) == cfg
    assert set(cfg.to_json()) == {
        "in_channels", "num_classes", "head", "stages", "blocks_per_stage", "growth_rate",
        "kernel_size", "bottleneck_factor", "compression", "stem_channels", "stem_kernel",
        "dilation_mode",
    }
    bad = cfg.to_json() | {"dropout": 0.1}
    with pytest.raises(ConfigError, match="dropout"):
        DDxConfig.from_json(bad)


def test_build_deterministic_and_init():
    cfg = DDxConfig(in_channels=1, num_classes=5)
    a, b = build(cfg, seed=3), build(cfg, seed=3)
    for name in a.params:
        assert a[name].data.tobytes() == b[name].data.tobytes()
    gammas = [p.data for n, p in a.params.items() if n.endswith(".gamma")]
    assert all((g == 1).all() for g in gammas)
    assert all(not p.data.any() for n, p in a.params.items() if n.endswith(".b") or n.endswith(".beta"))
    for m, v in a.running.values():
        assert not m.any() and (v == 1).all()
    assert build(cfg, seed=4)["stem.w"].data.tobytes() != a["stem.w"].data.tobytes()


def test_he_normal_scale():
    cfg = DDxConfig(in_channels=8, num_classes=2, stem_channels=256, stem_kernel=7)
    w = build(cfg, seed=0)["stem.w"].data
    assert np.std(w) == pytest.approx(np.sqrt(2 / (8 * 7)), rel=0.03)


def test_param_count_matches_enumeration():
    rng = np.random.default_rng(0)
    for _ in range(20):
        cfg = random_config(rng)
        assert param_count(cfg) == build(cfg, seed=1).num_parameters()
        assert param_count(cfg) == build(cfg, seed=2).num_parameters()


def test_param_count_grows_with_k():
    base = DDxConfig(in_channels=1, num_classes=5, growth_rate=6)
    doubled = DDxConfig(in_channels=1, num_classes=5, growth_rate=12)
    assert param_count(doubled) > param_count(base)


def test_param_count_single_block_by_hand():
    cfg = DDxConfig(in_channels=1, num_classes=2, stages=1, blocks_per_stage=1, growth_rate=1,
                    kernel_size=1, bottleneck_factor=1, stem_channels=1, stem_kernel=1)
    # stem 1+1, bn1 2, bottleneck 1+1, bn2 2, conv 1+1, final bn 2*2, head 2*2+2
    assert param_count(cfg) == 2 + 2 + 2 + 2 + 2 + 4 + 6


@given(seed=st.integers(0, 10**6))
@settings(max_examples=25, deadline=None)
def test_channel_growth_law(seed):
    cfg = random_config(np.random.default_rng(seed))
    model = build(cfg, seed=0)
    plan = channel_plan(cfg)
    x = Tensor(np.random.default_rng(seed).standard_normal((1, cfg.in_channels, 2 ** cfg.stages)))
    trace = {}
    forward(model, x, Mode.EVAL, trace=trace)
    for s, stage in enumerate(plan):
        for l in range(cfg.blocks_per_stage):
            assert trace[f"stage{s}.block{l}"].shape[1] == stage["entry"] + (l + 1) * cfg.growth_rate
            assert stage["block_inputs"][l] == stage["entry"] + l * cfg.growth_rate
    assert model["head.w"].shape[1] == trace["final"].shape[1]


def test_block_and_transition_shapes():
    cfg = DDxConfig(in_channels=1, num_classes=5, stem_channels=64, growth_rate=12)
    model = build(cfg)
    x = Tensor(np.random.default_rng(0).standard_normal((2, 64, 512)).astype(np.float32))
    y = block_forward(model, 0, 0, x)
    assert y.shape == (2, 76, 512)
    assert model["stage0.block0.bottleneck.w"].shape[0] == 48
    with pytest.raises(ShapeError):
        block_forward(model, 0, 1, x)

    cfg = DDxConfig(in_channels=1, num_classes=5, stages=2, blocks_per_stage=1, stem_channels=64,
                    growth_rate=12, compression=0.5)
    model = build(cfg)
    out = transition_forward(model, 0, Tensor(np.zeros((1, 76, 512), np.float32)))
    assert out.shape == (1, 38, 256)
    with pytest.raises(InvalidArgumentError):
        transition_forward(model, 0, Tensor(np.zeros((1, 76, 1), np.float32)))

    keep = DDxConfig(in_channels=1, num_classes=5, stages=2, blocks_per_stage=1, compression=1.0)
    assert channel_plan(keep)[0]["transition_out"] == channel_plan(keep)[0]["exit"]


def test_forward_eeg_shape_and_determinism():
    cfg = DDxConfig(in_channels=22, num_classes=5, stages=2, blocks_per_stage=2, growth_rate=4,
                    stem_channels=8)
    model = build(cfg, seed=0)
    x = Tensor(np.random.default_rng(0).standard_normal((4, 22, 2560)).astype(np.float32))
    y1 = forward(model, x, Mode.EVAL)
    y2 = forward(model, x, Mode.EVAL)
    assert y1.shape == (4, 5)
    assert y1.data.tobytes() == y2.data.tobytes()


def test_forward_rejects_short_or_wrong_input():
    model = build(DDxConfig(in_channels=1, num_classes=2, stages=3, blocks_per_stage=1,
                            growth_rate=2, stem_channels=4))
    with pytest.raises(InvalidArgumentError, match="at least 4"):
        forward(model, Tensor(np.zeros((1, 1, 3), np.float32)))
    with pytest.raises(ShapeError):
        forward(model, Tensor(np.zeros((1, 2, 8), np.float32)))


def test_train_mode_updates_running_stats():
    model = build(TINY, seed=0)
    before = model.running["stage0.block0.bn1"][0].copy()
    forward(model, Tensor(np.random.default_rng(0).standard_normal((2, 2, 16)) + 3.0), Mode.TRAIN)
    assert not np.array_equal(model.running["stage0.block0.bn1"][0], before)


def test_receptive_field_examples():
    one_stage = DDxConfig(in_channels=1, num_classes=2, stages=1, blocks_per_stage=3,
                          kernel_size=3, stem_kernel=1)
    assert receptive_field(one_stage) == 15
    assert measured_receptive_field(one_stage)[0] == 15
    fixed = DDxConfig(in_channels=1, num_classes=2, stages=1, blocks_per_stage=1, kernel_size=3,
                      stem_kernel=1, dilation_mode=DilationMode.fixed(1))
    assert receptive_field(fixed) == 3
    assert measured_receptive_field(fixed)[0] == 3


def test_receptive_field_monotone_in_stages():
    prev = 0
    for stages in range(1, 5):
        rf = receptive_field(DDxConfig(in_channels=1, num_classes=2, stages=stages))
        assert rf >= prev
        prev = rf


@pytest.mark.parametrize("seed", range(6))
def test_receptive_field_empirical(seed):
    cfg = random_config(np.random.default_rng(100 + seed))
    span, contiguous = measured_receptive_field(cfg, seed)
    assert contiguous
    assert span == receptive_field(cfg)


@pytest.mark.parametrize("seed", range(6))
def test_eval_causality(seed):
    cfg = random_config(np.random.default_rng(200 + seed))
    assert causality_violations(cfg, seed) == []


@pytest.mark.parametrize("seed", range(2))
def test_whole_model_gradcheck(seed):
    worst, skipped = model_gradcheck(TINY, seed)
    assert worst < 1e-4
    assert skipped < 50


def test_multilabel_gradcheck():
    cfg = DDxConfig(in_channels=2, num_classes=3, head=Head.MULTILABEL, stages=2,
                    blocks_per_stage=1, growth_rate=2, kernel_size=2, stem_channels=4,
                    stem_kernel=2)
    worst, _ = model_gradcheck(cfg, 0, t=16)
    assert worst < 1e-4


def test_eval_mode_gradcheck():
    worst, _ = model_gradcheck(TINY, 7, mode=Mode.EVAL)
    assert worst < 1e-4
