import numpy as np
import pytest

from amfuse import tensor as T
from amfuse.errors import ConfigurationError, DimensionError, FormatError, UsageError
from amfuse.model import (CMNeXtModel, ModelConfig, count_flops, count_params,
                          flops_increment_per_modality)
from amfuse.tensor import Tensor


TINY = dict(stage_channels=(4, 8, 12, 16), stage_depths=(1, 1, 1, 1),
            sr_ratios=(1, 1, 1, 1), heads=(1, 2, 2, 4),
            decoder_embed_dim=8, num_classes=5)


def frames_for(config, h=32, w=32, seed=0):
    rng = np.random.default_rng(seed)
    return [Tensor(rng.uniform(size=(3, h, w))) for _ in config.modalities]


def test_quad_modal_desk_shape():
    cfg = ModelConfig(modalities=("rgb", "depth", "event", "lidar"),
                      num_classes=25, **{k: v for k, v in TINY.items() if k != "num_classes"})
    model = CMNeXtModel(cfg)
    logits = model.forward(frames_for(cfg, 64, 64))
    assert logits.shape == (25, 64, 64)


def test_rgb_only_has_no_fusion_structures():
    cfg = ModelConfig(modalities=("rgb",), **TINY)
    model = CMNeXtModel(cfg)
    names = set(model._mods)
    assert not any(n.startswith(("hub", "ppx", "fusion", "sec_embed")) for n in names)
    logits = model.forward(frames_for(cfg))
    assert logits.shape == (5, 32, 32)


@pytest.mark.parametrize("n_sec", [0, 1, 2, 3, 4, 8])
def test_modality_scaling_forward(n_sec):
    mods = ("rgb",) + tuple(f"m{i}" for i in range(n_sec))
    cfg = ModelConfig(modalities=mods, **TINY)
    model = CMNeXtModel(cfg)
    with T.no_grad():
        logits = model.forward(frames_for(cfg, 64, 64))
    assert logits.shape == (5, 64, 64)
    assert np.isfinite(logits.data).all()


def test_forward_frame_count_and_divisibility_errors():
    cfg = ModelConfig(modalities=("rgb", "depth"), **TINY)
    model = CMNeXtModel(cfg)
    with pytest.raises(UsageError):
        model.forward(frames_for(cfg)[:1])
    with pytest.raises(DimensionError):
        model.forward([Tensor(np.zeros((3, 30, 32))), Tensor(np.zeros((3, 30, 32)))])


def test_restoration_instrumented():
    cfg = ModelConfig(modalities=("rgb", "depth", "event"), **TINY)
    model = CMNeXtModel(cfg)
    record = {}
    with T.no_grad():
        model.forward(frames_for(cfg), record=record)
    for pre, fused, post in zip(record["pre_restore"], record["fused"], record["post_restore"]):
        for p, q in zip(pre, post):
            np.testing.assert_allclose(q, p + fused, atol=0)


def test_determinism_bit_identical():
    cfg = ModelConfig(modalities=("rgb", "depth"), **TINY)
    frames = frames_for(cfg)
    with T.no_grad():
        a = CMNeXtModel(cfg).forward(frames).data
        b = CMNeXtModel(cfg).forward(frames).data
    assert (a == b).all()


# -- parameter accounting ----------------------------------------------------


def test_param_increment_reference_channels():
    cfg = ModelConfig(stage_channels=(64, 128, 320, 512), heads=(1, 2, 5, 8),
                      modalities=("rgb", "depth", "event", "lidar"))
    out = count_params(cfg)
    assert out["per_modality_increment"] == 11268  # sum_l 11*C_l + 1


def test_param_increment_desk_channels():
    cfg = ModelConfig(stage_channels=(16, 32, 48, 64), modalities=("rgb", "depth"))
    assert count_params(cfg)["per_modality_increment"] == 11 * 160 + 4


def test_param_increment_independent_of_m():
    incs = []
    for m in (1, 2, 3):
        mods = ("rgb",) + tuple(f"m{i}" for i in range(m))
        cfg = ModelConfig(modalities=mods, **TINY)
        incs.append(count_params(cfg)["per_modality_increment"])
    assert incs[0] == incs[1] == incs[2]


def test_flop_increment_small_at_full_scale():
    cfg = ModelConfig(stage_channels=(64, 128, 320, 512), heads=(1, 2, 5, 8),
                      stage_depths=(3, 4, 6, 3),
                      modalities=("rgb", "depth", "event", "lidar"),
                      decoder_embed_dim=512)
    rgb_only = count_flops(cfg.with_modalities(("rgb",)), 1024, 1024)
    inc = flops_increment_per_modality(cfg, 1024, 1024)
    assert inc < 0.05 * rgb_only


# -- config ------------------------------------------------------------------


def test_config_validation():
    with pytest.raises(ConfigurationError):
        ModelConfig(modalities=())
    with pytest.raises(ConfigurationError):
        ModelConfig(modalities=("depth", "rgb"))
    with pytest.raises(ConfigurationError):
        ModelConfig(stage_channels=(5, 8, 12, 16), heads=(2, 2, 2, 2))


def test_config_json_round_trip():
    cfg = ModelConfig(modalities=("rgb", "depth"), **TINY)
    again = ModelConfig.from_json(cfg.to_json())
    assert again == cfg
    with pytest.raises(ConfigurationError):
        ModelConfig.from_json('{"bogus": 1}')


# -- serialization -----------------------------------------------------------


def test_serialize_round_trip_bit_exact(tmp_path):
    cfg = ModelConfig(modalities=("rgb", "depth"), **TINY)
    model = CMNeXtModel(cfg)
    frames = frames_for(cfg)
    with T.no_grad():
        before = model.forward(frames).data
    path = tmp_path / "model.nnz"
    model.save(path)
    loaded = CMNeXtModel.load(path, cfg)
    with T.no_grad():
        after = loaded.forward(frames).data
    assert (before == after).all()


def test_truncated_archive_rejected(tmp_path):
    cfg = ModelConfig(modalities=("rgb",), **TINY)
    model = CMNeXtModel(cfg)
    path = tmp_path / "model.nnz"
    model.save(path)
    data = path.read_bytes()
    path.write_bytes(data[:len(data) - 64])
    with pytest.raises(FormatError):
        CMNeXtModel.load(path, cfg)


def test_modality_count_mismatch_names_missing_record(tmp_path):
    cfg2 = ModelConfig(modalities=("rgb", "depth"), **TINY)
    cfg3 = ModelConfig(modalities=("rgb", "depth", "event"), **TINY)
    path = tmp_path / "model.nnz"
    CMNeXtModel(cfg2).save(path)
    with pytest.raises(FormatError, match=r"hub\d\.m1"):
        CMNeXtModel.load(path, cfg3)
