import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from maskdistill.core import (
    ConfigError, ContractError, FaceImage, MarginHeadConfig, Paradigm, TrainingConfig,
    ValidationError, build_configs, dump_config, load_config, make_rng, normalize, parse_config,
)
from maskdistill.toydata import REFERENCE_LANDMARKS


def test_empty_config_gives_defaults(tmp_path):
    path = tmp_path / "empty.cfg"
    path.write_text("")
    train, head = load_config(path)
    assert train.batch_size == 512
    assert train.total_iterations == 295_000
    assert train.lr_initial == 0.1
    assert train.lr_milestones == (80_000, 140_000, 210_000)
    assert train.lr_decay_factor == 10
    assert train.momentum == 0.9
    assert train.weight_decay == 5e-4
    assert (train.lambda_base, train.lambda_high) == (100, 3000)
    assert train.lambda_switch_iteration == 227_000
    assert train.p_mask == 0.5
    assert train.paradigm is Paradigm.HG
    assert (head.scale, head.margin, head.sigma) == (64, 0.5, 0.5)
    assert head.embedding_dim == 512


def test_unordered_milestones_rejected():
    with pytest.raises(ValidationError, match="lr_milestones not ascending"):
        parse_config("lr_milestones = [140000, 80000]\n")


@pytest.mark.parametrize("paradigm", ["LG", "NO_KD"])
def test_switch_only_for_hg(paradigm):
    with pytest.raises(ValidationError, match="lambda_switch_iteration"):
        parse_config(f"paradigm = {paradigm}\nlambda_switch_iteration = 1000\n")
    train, _ = parse_config(f"paradigm = {paradigm}\n")
    assert train.lambda_switch_iteration is None


def test_hg_needs_switch():
    with pytest.raises(ValidationError):
        TrainingConfig(lambda_switch_iteration=None)


def test_parse_error_names_line():
    with pytest.raises(ConfigError, match=r":3:"):
        parse_config("seed = 1\n# comment\nnot a pair\n")
    with pytest.raises(ConfigError, match=r":1: unknown key"):
        parse_config("bogus = 3\n")
    with pytest.raises(ConfigError, match=r":2: bad value"):
        parse_config("seed = 1\nbatch_size = many\n")


def test_validation_names_field():
    with pytest.raises(ValidationError, match="p_mask"):
        parse_config("p_mask = 1.5")
    with pytest.raises(ValidationError, match="scale"):
        parse_config("scale = 0")
    with pytest.raises(ValidationError, match="num_classes"):
        MarginHeadConfig(num_classes=1)


def test_comments_and_whitespace():
    train, head = parse_config("  seed=7   # run id\n\nscale = 32.0\n")
    assert train.seed == 7 and head.scale == 32.0


config_values = st.fixed_dictionaries({}, optional={
    "batch_size": st.integers(1, 1024),
    "seed": st.integers(-2**31, 2**31),
    "p_mask": st.floats(0, 1),
    "momentum": st.floats(0, 0.99),
    "weight_decay": st.floats(0, 1),
    "lambda_base": st.floats(0, 1e4),
    "sigma": st.floats(0, 2),
    "margin": st.floats(-1, 1),
    "embedding_dim": st.integers(1, 2048),
    "num_classes": st.none() | st.integers(2, 100_000),
    "paradigm": st.sampled_from(list(Paradigm)),
})


@settings(max_examples=60, deadline=None)
@given(config_values)
def test_config_round_trip(values):
    train, head = build_configs(values)
    again = parse_config(dump_config(train, head))
    assert again == (train, head)


def test_rng_determinism_and_separation():
    a = make_rng(42, "mask").random(100)
    assert np.array_equal(a, make_rng(42, "mask").random(100))
    assert not np.array_equal(a, make_rng(42, "margin").random(100))
    assert not np.array_equal(a, make_rng(43, "mask").random(100))
    assert not np.array_equal(a, make_rng(42, "mask", 1).random(100))


def _image(**kw):
    return FaceImage(np.zeros((112, 112, 3)), REFERENCE_LANDMARKS, **kw)


def test_face_image_invariants():
    img = _image(source_id="x", identity_label=3)
    assert img.pixels.dtype == np.float32
    assert not img.pixels.flags.writeable
    with pytest.raises(ContractError):
        FaceImage(np.full((112, 112, 3), 1.5), REFERENCE_LANDMARKS)
    with pytest.raises(ContractError):
        FaceImage(np.zeros((112, 112)), REFERENCE_LANDMARKS)
    bad = REFERENCE_LANDMARKS.copy()
    bad[2, 1] = 40.0  # nose above eyes
    with pytest.raises(ContractError, match="nose"):
        FaceImage(np.zeros((112, 112, 3)), bad)
    out = REFERENCE_LANDMARKS.copy()
    out[0, 0] = 112.0
    with pytest.raises(ContractError):
        FaceImage(np.zeros((112, 112, 3)), out)


def test_normalize_unit_norm():
    x = make_rng(0, "t").normal(size=(20, 512)) * 37
    assert np.allclose(np.linalg.norm(normalize(x), axis=1), 1, atol=1e-6)
