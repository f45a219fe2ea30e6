"""Unit tests for the network: encoders, fusion, projection, decoders, and
the checkpoint container."""

import numpy as np
import pytest

import hscmae.diffcore as dc
from hscmae.model import (CheckpointError, ModelConfig, ModelParams, config_entries,
                          config_from_entries, decode, embed_arrays, encode, forward_embed,
                          fuse, load_entries, project, save_entries)

from conftest import tiny_model_config


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(audio_widths=(4,), visual_widths=(4, 4))
    with pytest.raises(ValueError):
        ModelConfig(audio_widths=(4, 8), visual_widths=(4, 6))
    with pytest.raises(ValueError):
        ModelConfig(audio_widths=(4, 6), visual_widths=(4, 6), heads=4)
    with pytest.raises(ValueError):
        ModelConfig(audio_widths=(4, 8), visual_widths=(4, 8), heads=2, proj_dim=0)


def test_config_properties():
    cfg = tiny_model_config()
    assert cfg.d_audio == 3 and cfg.d_visual == 5 and cfg.model_dim == 4


def test_init_shapes_and_glorot_bounds():
    cfg = tiny_model_config()
    mp = ModelParams(cfg, seed=0)
    w = mp.params["enc.a.0.w"]
    assert w.value.shape == (3, 4)
    lim = np.sqrt(6.0 / (3 + 4))
    assert np.abs(w.value).max() <= lim
    assert np.all(mp.params["enc.a.0.b"].value == 0.0)
    assert np.all(mp.params["sigma.rec"].value == 0.0)
    assert not mp.params["sigma.rec"].decay
    assert np.all(mp.buffers["enc.a.0.bn.mean"] == 0.0)
    assert np.all(mp.buffers["enc.a.0.bn.var"] == 1.0)


def test_encoder_first_layer_hand_computed():
    cfg = ModelConfig(audio_widths=(3, 4), visual_widths=(5, 4), heads=2,
                      proj_dim=2, dropout=0.0)
    mp = ModelParams(cfg, seed=1)
    rng = np.random.default_rng(2)
    xa = rng.normal(size=(6, 3))
    xv = rng.normal(size=(6, 5))
    ha, _ = encode(mp, dc.const(xa), dc.const(xv), train=True)

    h = xa @ mp.params["enc.a.0.w"].value + mp.params["enc.a.0.b"].value
    mu = h.mean(axis=0, keepdims=True)
    var = h.var(axis=0, keepdims=True)
    xhat = (h - mu) / np.sqrt(var + 1e-5)
    expected = np.tanh(mp.params["enc.a.0.bn.gamma"].value * xhat
                       + mp.params["enc.a.0.bn.beta"].value)
    np.testing.assert_allclose(ha.value, expected, atol=1e-12)


def test_encoder_train_eval_modes_differ():
    cfg = tiny_model_config()
    mp = ModelParams(cfg, seed=3)
    rng = np.random.default_rng(4)
    xa, xv = rng.normal(size=(32, 3)), rng.normal(size=(32, 5))
    ha_train, _ = encode(mp, dc.const(xa), dc.const(xv), train=True)
    ha_eval, _ = encode(mp, dc.const(xa), dc.const(xv), train=False)
    assert not np.allclose(ha_train.value, ha_eval.value)


def test_encode_rejects_wrong_dims_and_tiny_train_batch():
    mp = ModelParams(tiny_model_config(), seed=0)
    with pytest.raises(dc.ShapeError):
        encode(mp, dc.const(np.zeros((4, 2))), dc.const(np.zeros((4, 5))), train=False)
    with pytest.raises(dc.ShapeError):
        encode(mp, dc.const(np.zeros((1, 3))), dc.const(np.zeros((1, 5))), train=True)


def test_fusion_reduces_to_value_output_mixer():
    # with one token per sample the attention weight is 1, so the block is
    # layernorm(h_q + (h_kv Wv) Wo)
    cfg = tiny_model_config()
    mp = ModelParams(cfg, seed=5)
    rng = np.random.default_rng(6)
    ha = dc.const(rng.normal(size=(4, 4)))
    hv = dc.const(rng.normal(size=(4, 4)))
    ua, uv = fuse(mp, ha, hv)

    def oracle(direction, hq, hkv):
        att = hkv @ mp.params[f"fuse.{direction}.wv"].value @ mp.params[f"fuse.{direction}.wo"].value
        pre = hq + att
        mu = pre.mean(axis=1, keepdims=True)
        var = pre.var(axis=1, keepdims=True)
        xhat = (pre - mu) / np.sqrt(var + 1e-5)
        return (mp.params[f"fuse.{direction}.ln.gamma"].value * xhat
                + mp.params[f"fuse.{direction}.ln.beta"].value)

    np.testing.assert_allclose(ua.value, oracle("a2v", ha.value, hv.value), atol=1e-12)
    np.testing.assert_allclose(uv.value, oracle("v2a", hv.value, ha.value), atol=1e-12)


def test_query_key_projections_receive_zero_gradient():
    mp = ModelParams(tiny_model_config(), seed=7)
    rng = np.random.default_rng(8)
    xa, xv = rng.normal(size=(5, 3)), rng.normal(size=(5, 5))
    za, zv, _, _ = forward_embed(mp, dc.const(xa), dc.const(xv), train=False)
    dc.backward(dc.sum_all(dc.add(za, zv)))
    for direction in ("a2v", "v2a"):
        assert np.all(mp.params[f"fuse.{direction}.wq"].grad == 0.0)
        assert np.all(mp.params[f"fuse.{direction}.wk"].grad == 0.0)
        assert np.any(mp.params[f"fuse.{direction}.wv"].grad != 0.0)
        assert np.any(mp.params[f"fuse.{direction}.wo"].grad != 0.0)


def test_projection_rows_unit_norm():
    mp = ModelParams(tiny_model_config(), seed=9)
    rng = np.random.default_rng(10)
    za, zv = embed_arrays(mp, rng.normal(size=(7, 3)), rng.normal(size=(7, 5)))
    assert za.shape == (7, 3) and zv.shape == (7, 3)
    np.testing.assert_allclose(np.linalg.norm(za, axis=1), np.ones(7), atol=1e-12)
    np.testing.assert_allclose(np.linalg.norm(zv, axis=1), np.ones(7), atol=1e-12)


def test_zero_projection_rows_counted():
    mp = ModelParams(tiny_model_config(), seed=11)
    for p in mp.parameters():
        if p.name.startswith("proj."):
            p.value[...] = 0.0
    before = mp.zero_row_warnings
    rng = np.random.default_rng(12)
    za, zv = embed_arrays(mp, rng.normal(size=(3, 3)), rng.normal(size=(3, 5)))
    assert mp.zero_row_warnings == before + 6
    assert np.all(za == 0.0) and np.all(zv == 0.0)


def test_decoder_maps_back_to_input_dims():
    cfg = tiny_model_config()
    mp = ModelParams(cfg, seed=13)
    rng = np.random.default_rng(14)
    ua = dc.const(rng.normal(size=(6, 4)))
    uv = dc.const(rng.normal(size=(6, 4)))
    xa_hat, xv_hat = decode(mp, ua, uv)
    assert xa_hat.shape == (6, 3)
    assert xv_hat.shape == (6, 5)
    # hand-check: linear / tanh / linear / tanh / linear
    h = ua.value
    for i in range(3):
        h = h @ mp.params[f"dec.a.{i}.w"].value + mp.params[f"dec.a.{i}.b"].value
        if i < 2:
            h = np.tanh(h)
    np.testing.assert_allclose(xa_hat.value, h, atol=1e-12)


def test_full_forward_gradient_check():
    cfg = tiny_model_config()
    mp = ModelParams(cfg, seed=15)
    rng = np.random.default_rng(16)
    xa, xv = rng.normal(size=(6, 3)), rng.normal(size=(6, 5))

    def fn():
        za, zv, ua, uv = forward_embed(mp, dc.const(xa), dc.const(xv), train=False)
        xa_hat, xv_hat = decode(mp, ua, uv)
        return dc.add(dc.sum_all(dc.mul(za, zv)),
                      dc.add(dc.mse(xa_hat, dc.const(xa)), dc.mse(xv_hat, dc.const(xv))))

    assert dc.grad_check(fn, mp.parameters(), max_coords=3) < 1e-5


def test_copy_is_deep():
    mp = ModelParams(tiny_model_config(), seed=17)
    other = mp.copy()
    other.params["enc.a.0.w"].value += 1.0
    other.buffers["enc.a.0.bn.mean"] += 1.0
    assert not np.array_equal(mp.params["enc.a.0.w"].value, other.params["enc.a.0.w"].value)
    assert not np.array_equal(mp.buffers["enc.a.0.bn.mean"], other.buffers["enc.a.0.bn.mean"])


def test_state_roundtrip_through_container(tmp_path):
    mp = ModelParams(tiny_model_config(), seed=18)
    mp.buffers["enc.a.0.bn.mean"][...] = 0.25
    path = tmp_path / "state.bin"
    entries = dict(mp.state_entries())
    entries.update(config_entries(mp.config))
    save_entries(path, entries)
    loaded = load_entries(path)
    assert config_from_entries(loaded) == mp.config
    fresh = ModelParams(config_from_entries(loaded), init=False)
    fresh.load_state_entries(loaded)
    for name, p in mp.params.items():
        np.testing.assert_array_equal(fresh.params[name].value, p.value)
    for name, b in mp.buffers.items():
        np.testing.assert_array_equal(fresh.buffers[name], b)


def test_container_rejects_bad_magic_and_truncation(tmp_path):
    path = tmp_path / "ckpt.bin"
    save_entries(path, {"m": np.ones((2, 3))})
    blob = path.read_bytes()

    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"NOTMAGIC" + blob[8:])
    with pytest.raises(CheckpointError):
        load_entries(bad)

    for cut in (10, len(blob) - 5):
        trunc = tmp_path / f"trunc{cut}.bin"
        trunc.write_bytes(blob[:cut])
        with pytest.raises(CheckpointError):
            load_entries(trunc)


def test_container_rejects_non_matrix_entries(tmp_path):
    with pytest.raises(CheckpointError):
        save_entries(tmp_path / "x.bin", {"v": np.ones(3)})
