"""Patch extraction, attention module behavior, model forward contracts,
equivariance properties, and full-volume prediction tests."""

import numpy as np
import pytest

import tensorfit as tf
import tensorfit.autodiff as ad
from tensorfit.autodiff import ShapeError
from tensorfit.training import he_initialize
from tensorfit.transformer import (
    AttentionModule,
    PatchingError,
    TARGET_SCALE,
    reassemble_patches,
)

TINY = tf.ModelConfig(L=2, d=6, d_h=4, n_h=2, n_tr=2)


def _init(model, seed=0):
    he_initialize(model.parameters(), seed)
    return model


# --- patch extraction ---------------------------------------------------------

def test_single_patch_covers_volume(rng):
    vol = tf.Volume4D(rng.random((5, 5, 5, 6)))
    patches = list(tf.extract_patches(vol, L=5))
    assert len(patches) == 1
    assert patches[0].n == 125
    assert patches[0].origin == (0, 0, 0)


def test_two_patches_along_long_axis(rng):
    vol = tf.Volume4D(rng.random((10, 5, 5, 3)))
    patches = list(tf.extract_patches(vol, L=5, stride=5))
    assert len(patches) == 2
    assert [p.origin for p in patches] == [(0, 0, 0), (5, 0, 0)]


def test_partition_round_trip(rng):
    vol = tf.Volume4D(rng.random((10, 10, 5, 4)))
    patches = list(tf.extract_patches(vol, L=5))
    out = reassemble_patches(patches, vol.dims, vol.channels, L=5)
    np.testing.assert_array_equal(out, vol.data)


def test_patching_error_when_too_small(rng):
    vol = tf.Volume4D(rng.random((2, 2, 2, 6)))
    with pytest.raises(PatchingError, match="patch"):
        list(tf.extract_patches(vol, L=5))


def test_patch_row_major_order():
    dims = (4, 4, 4)
    idx = np.arange(np.prod(dims)).reshape(dims + (1,)).astype(float)
    vol = tf.Volume4D(idx)
    p = next(tf.extract_patches(vol, L=2, stride=2))
    # row-major with z fastest: (0,0,0), (0,0,1), (0,1,0), ...
    want = [0, 1, 4, 5, 16, 17, 20, 21]
    np.testing.assert_array_equal(p.features[:, 0], want)


# --- attention module ----------------------------------------------------------

def test_uniform_attention_when_keys_and_queries_vanish(rng):
    cfg = tf.ModelConfig(L=2, d=6, d_h=4, n_h=1, n_tr=1, stabilizers=False)
    mod = AttentionModule("m", cfg)
    he_initialize(mod.parameters(), 1)
    wq, wk, wv = mod.heads[0]
    wq.value[...] = 0.0
    wk.value[...] = 0.0
    x = rng.normal(size=(8, 6))
    with ad.no_grad():
        out = mod.forward(x)
    v_mean = (x @ wv.value).mean(axis=0)
    want = np.tile(v_mean @ mod.w_out.value, (8, 1))
    np.testing.assert_allclose(out, want, atol=1e-12)


def test_single_element_sequence_attention(rng):
    cfg = tf.ModelConfig(L=1, d=6, d_h=4, n_h=1, n_tr=1, stabilizers=False)
    mod = AttentionModule("m", cfg)
    he_initialize(mod.parameters(), 2)
    x = rng.normal(size=(1, 6))
    with ad.no_grad():
        out = mod.forward(x)
    _, _, wv = mod.heads[0]
    want = (x @ wv.value) @ mod.w_out.value
    np.testing.assert_allclose(out, want, atol=1e-12)


@pytest.mark.parametrize("mode", ["softmax", "unnormalized"])
def test_module_permutation_equivariance(rng, mode):
    cfg = tf.ModelConfig(L=2, d=6, d_h=4, n_h=2, n_tr=1,
                         attention_mode=mode, stabilizers=False)
    mod = AttentionModule("m", cfg)
    he_initialize(mod.parameters(), 3)
    x = rng.normal(size=(8, 6))
    perm = rng.permutation(8)
    with ad.no_grad():
        a = mod.forward(x)[perm]
        b = mod.forward(x[perm])
    np.testing.assert_allclose(b, a, rtol=1e-11, atol=1e-13)


def test_module_exact_equivariance_with_integer_values(rng):
    # integer-valued inputs and weights with d_h a power of four make every
    # sum exactly representable, so unnormalized attention permutes bit-exactly
    cfg = tf.ModelConfig(L=2, d=6, d_h=4, n_h=1, n_tr=1,
                         attention_mode="unnormalized", stabilizers=False)
    mod = AttentionModule("m", cfg)
    for p in mod.parameters():
        p.value = rng.integers(-2, 3, size=p.value.shape).astype(float)
    x = rng.integers(-3, 4, size=(8, 6)).astype(float)
    perm = rng.permutation(8)
    with ad.no_grad():
        a = mod.forward(x)[perm]
        b = mod.forward(x[perm])
    np.testing.assert_array_equal(a, b)


# --- models --------------------------------------------------------------------

def test_model_s_output_shape(rng):
    model = _init(tf.ModelS(TINY))
    x = rng.random((TINY.n, 6))
    out = model.predict_patch(x)
    assert out.shape == (TINY.n, 6)
    batched = model.predict_patch(rng.random((3, TINY.n, 6)))
    assert batched.shape == (3, TINY.n, 6)


def test_model_s_shape_error(rng):
    model = _init(tf.ModelS(TINY))
    with pytest.raises(ShapeError):
        model.predict_patch(rng.random((TINY.n, 5)))


def test_model_s_equivariance_with_zero_positional_encoding(rng):
    cfg = tf.ModelConfig(L=2, d=8, d_h=4, n_h=2, n_tr=2, stabilizers=False)
    model = _init(tf.ModelS(cfg), seed=5)
    model.trunk.pos.value[...] = 0.0
    x = rng.random((cfg.n, 6))
    perm = rng.permutation(cfg.n)
    a = model.predict_patch(x)[perm]
    b = model.predict_patch(x[perm])
    np.testing.assert_allclose(b, a, rtol=1e-11, atol=1e-14)


def test_model_s_nonzero_positional_encoding_breaks_equivariance(rng):
    cfg = tf.ModelConfig(L=2, d=8, d_h=4, n_h=2, n_tr=2, stabilizers=False)
    model = _init(tf.ModelS(cfg), seed=5)
    model.trunk.pos.value = rng.normal(size=model.trunk.pos.value.shape)
    x = rng.random((cfg.n, 6))
    perm = rng.permutation(cfg.n)
    a = model.predict_patch(x)[perm]
    b = model.predict_patch(x[perm])
    assert np.abs(a - b).max() > 1e-6


def test_model_st_output_shape(rng):
    model = _init(tf.ModelST(TINY))
    sig = rng.random((TINY.n, 6))
    ten = rng.normal(size=(TINY.n, 6))
    with ad.no_grad():
        out = model.forward(sig, ten)
    assert out.shape == (TINY.n, 6)


def test_model_st_tensor_branch_can_be_silenced(rng):
    # zeroing the tensor-branch half of the final head makes the output a
    # function of the signals alone
    model = _init(tf.ModelST(TINY), seed=7)
    d = TINY.d
    model.head_w.value[d:, :] = 0.0
    sig = rng.random((TINY.n, 6))
    t1 = rng.normal(size=(TINY.n, 6))
    t2 = rng.normal(size=(TINY.n, 6))
    with ad.no_grad():
        a = model.forward(sig, t1)
        b = model.forward(sig, t2)
    np.testing.assert_array_equal(a, b)


def test_model_st_gradients_pass_finite_differences(rng):
    from test_diff_engine import finite_difference_check

    model = _init(tf.ModelST(TINY), seed=9)
    sig = rng.random((TINY.n, 6))
    ten = rng.normal(size=(TINY.n, 6))
    ref = rng.normal(size=(TINY.n, 6))
    err = finite_difference_check(
        lambda: ad.mse(model.forward(sig, ten), ref), model.parameters())
    assert err < 1e-4


def test_model_s_gradients_pass_finite_differences(rng):
    from test_diff_engine import finite_difference_check

    model = _init(tf.ModelS(TINY), seed=11)
    sig = rng.random((TINY.n, 6))
    ref = rng.normal(size=(TINY.n, 6))
    err = finite_difference_check(
        lambda: ad.mse(model.forward(sig), ref), model.parameters())
    assert err < 1e-4


def test_softmax_attention_rows_sum_to_one_inside_model(rng):
    cfg = tf.ModelConfig(L=2, d=8, d_h=4, n_h=1, n_tr=1)
    model = _init(tf.ModelS(cfg), seed=13)
    x = rng.random((cfg.n, 6))
    h = ad.add(ad.matmul(x, model.trunk.w_embed.value),
               model.trunk.pos.value)
    wq, wk, _ = model.trunk.modules[0].heads[0]
    scores = ad.scale(ad.matmul(ad.matmul(h, wq.value),
                                ad.matmul(h, wk.value), transpose_b=True),
                      1.0 / np.sqrt(cfg.d_h))
    rows = ad.softmax(scores)
    np.testing.assert_allclose(rows.sum(axis=-1), 1.0, atol=1e-12)


# --- normalization and volume prediction ----------------------------------------

def test_normalize_dwi_clamps_and_masks(rng):
    scheme = tf.skare6()
    data = rng.random((3, 3, 3, 7)) + 0.5
    data[0, 0, 0, :] = 0.0            # background voxel
    data[1, 1, 1, 3] = 100.0          # ratio above the clip range
    vol = tf.Volume4D(data)
    signals, mask = tf.normalize_dwi(vol, scheme)
    assert signals.channels == 6
    assert not mask[0, 0, 0] and mask[1, 1, 1]
    assert np.abs(signals.data[0, 0, 0]).max() == 0.0
    assert signals.data.max() <= 10.0
    assert signals.data[mask].min() >= 1e-6


def test_predict_volume_shape_and_mask(rng):
    model = _init(tf.ModelS(TINY))
    vol = tf.Volume4D(rng.random((4, 4, 4, 6)))
    mask = np.ones((4, 4, 4), dtype=bool)
    mask[0, 0, 0] = False
    out = tf.predict_volume(model, vol, mask=mask, stride=1)
    assert out.dims == (4, 4, 4) and out.channels == 6
    assert np.abs(out.data[0, 0, 0]).max() == 0.0


def test_predict_volume_matches_single_patch(rng):
    model = _init(tf.ModelS(TINY), seed=21)
    vol = tf.Volume4D(rng.random((2, 2, 2, 6)))
    out = tf.predict_volume(model, vol)
    want = model.predict_patch(vol.data.reshape(TINY.n, 6)) / TARGET_SCALE
    np.testing.assert_allclose(out.data.reshape(TINY.n, 6), want, rtol=1e-12)


def test_predict_volume_constant_input_constant_interior(rng):
    cfg = tf.ModelConfig(L=2, d=8, d_h=4, n_h=1, n_tr=1)
    model = _init(tf.ModelS(cfg), seed=23)
    vol = tf.Volume4D(np.full((6, 6, 6, 6), 0.4))
    out = tf.predict_volume(model, vol, stride=1)
    interior = out.data[1:-1, 1:-1, 1:-1, :]
    spread = np.abs(interior - interior[0, 0, 0]).max()
    assert spread < 1e-12


def test_predict_volume_channel_count_check(rng):
    model = _init(tf.ModelS(TINY))
    with pytest.raises(ValueError, match="channels"):
        tf.predict_volume(model, tf.Volume4D(rng.random((4, 4, 4, 3))))


def test_model_checkpoint_round_trip(tmp_path, rng):
    model = _init(tf.ModelS(TINY), seed=31)
    path = tmp_path / "s.ckpt"
    tf.save_model_s(path, model, seed=31)
    loaded = tf.load_model(path)
    assert isinstance(loaded, tf.ModelS)
    assert loaded.config == model.config
    x = rng.random((TINY.n, 6))
    np.testing.assert_array_equal(loaded.predict_patch(x), model.predict_patch(x))


def test_two_stage_checkpoint_round_trip(tmp_path, rng):
    model_s = _init(tf.ModelS(TINY), seed=41)
    model_st = _init(tf.ModelST(TINY), seed=42)
    stage = tf.TwoStage(model_s, model_st)
    path = tmp_path / "st.ckpt"
    tf.save_two_stage(path, stage, seed=42)
    loaded = tf.load_model(path)
    assert isinstance(loaded, tf.TwoStage)
    x = rng.random((TINY.n, 6))
    np.testing.assert_array_equal(loaded.predict_patch(x), stage.predict_patch(x))


def test_model_config_validation():
    with pytest.raises(ValueError):
        tf.ModelConfig(L=0)
    with pytest.raises(ValueError):
        tf.ModelConfig(attention_mode="linear")
