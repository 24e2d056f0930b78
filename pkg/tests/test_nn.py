import numpy as np
import pytest

from pourcam import nn
from pourcam.autograd import Value
from oracles import attention_reference


@pytest.fixture(scope="module")
def params():
    return nn.init_params(nn.NetConfig(d=8, d_k=8, d1=4, d2=8, d3=8))


def test_feature_strides(params):
    fs = nn.encoder_forward(np.zeros((64, 64, 3)), params)
    assert fs.F1.shape[1:3] == (16, 16)
    assert fs.F2.shape[1:3] == (8, 8)
    assert fs.F3.shape[1:3] == (4, 4)
    assert fs.F4.shape == (1, 4, 4, 8)


def test_zero_image_zero_bias_gives_zero_F4(params):
    fs = nn.encoder_forward(np.zeros((32, 48, 3)), params)
    assert np.all(fs.F4.data == 0.0)


def test_pixel_probe_stays_in_receptive_field(params):
    rng = np.random.default_rng(0)
    img = rng.random((32, 32, 3))
    base = nn.encoder_forward(img, params).F1.data[0]
    img2 = img.copy()
    img2[9, 22] += 0.5
    diff = np.abs(nn.encoder_forward(img2, params).F1.data[0] - base).sum(-1)
    changed = np.argwhere(diff > 0)
    assert changed.tolist() == [[9 // 4, 22 // 4]]


def test_forward_is_deterministic(params):
    img = np.random.default_rng(3).random((32, 32, 3))
    a = nn.encoder_forward(img, params).F4.data
    b = nn.encoder_forward(img, params).F4.data
    assert np.array_equal(a, b)


def test_indivisible_input_rejected(params):
    with pytest.raises(ValueError, match="divisible by 16"):
        nn.encoder_forward(np.zeros((40, 32, 3)), params)


def test_stage_mismatch_names_the_stage(params):
    x = Value(np.zeros((1, 8, 8, 5)))
    with pytest.raises(ValueError, match="stage2"):
        nn.patch_conv(x, params["s2.w"], params["s2.b"], 2, "stage2")


def test_attention_single_token_returns_v():
    V = np.array([[1.5, -2.0, 0.25]])
    out = nn.attention(np.array([[0.3, 0.1]]), np.array([[2.0, -1.0]]), V)
    assert np.array_equal(out, V)


def test_attention_identical_keys_give_column_mean():
    rng = np.random.default_rng(1)
    Q = rng.normal(size=(4, 3))
    K = np.tile(rng.normal(size=(1, 3)), (4, 1))
    V = rng.normal(size=(4, 2))
    out = nn.attention(Q, K, V)
    assert np.allclose(out, V.mean(0), atol=1e-12)


def test_attention_matches_dense_oracle():
    rng = np.random.default_rng(2)
    Q, K, V = rng.normal(size=(3, 2)), rng.normal(size=(3, 2)), rng.normal(size=(3, 2))
    expected = attention_reference(Q.tolist(), K.tolist(), V.tolist())
    assert np.allclose(nn.attention(Q, K, V), expected, atol=1e-12)
    assert np.allclose(nn.attention(Value(Q), Value(K), Value(V)).data, expected, atol=1e-12)


def test_attention_rejects_bad_inputs():
    with pytest.raises(FloatingPointError):
        nn.attention(np.array([[np.nan]]), np.ones((1, 1)), np.ones((1, 1)))
    with pytest.raises(ValueError):
        nn.attention(np.ones((2, 3)), np.ones((2, 2)), np.ones((2, 1)))


def test_classify_zero_head_gives_half():
    F4 = np.random.default_rng(0).random((4, 4, 8))
    logit = nn.classify(F4, (np.zeros(8), np.zeros(1)))
    assert float(logit.data) == 0.0


def test_classify_constant_map_is_pooling_identity():
    c = np.linspace(-1, 1, 8)
    w = np.arange(8.0)
    F4 = np.broadcast_to(c, (3, 5, 8))
    assert float(nn.classify(F4, (w, np.array([0.5]))).data) == pytest.approx(w @ c + 0.5, abs=1e-12)


def test_classify_matches_mean_then_dot():
    rng = np.random.default_rng(4)
    F4 = rng.normal(size=(2, 3, 3, 8))
    w, b = rng.normal(size=8), rng.normal(size=1)
    ref = [sum(F4[k, i, j] @ w for i in range(3) for j in range(3)) / 9 + b[0] for k in range(2)]
    assert np.allclose(nn.classify(F4, (w, b)).data, ref, atol=1e-12)


def test_classify_dimension_mismatch():
    with pytest.raises(ValueError, match="channels"):
        nn.classify(np.ones((2, 2, 4)), (np.ones(5), np.zeros(1)))


def test_head_weights_are_the_cam_weights(params):
    assert params["head.w"].shape == (params.config.d,)


def test_parameter_groups_cover_everything(params):
    names = {id(p) for p in params.group("backbone") + params.group("head")}
    assert len(names) == len(params.names())


def test_checkpoint_round_trip(tmp_path, params):
    path = tmp_path / "m.ckpt"
    nn.save_checkpoint(path, params, {"note": "x"})
    loaded, header = nn.load_checkpoint(path)
    assert header["extra"] == {"note": "x"}
    assert [layer["name"] for layer in header["layers"]] == params.names()
    for k, v in params.items():
        assert np.array_equal(loaded[k].data, v.data.astype(np.float32).astype(np.float64))
    assert path.read_bytes()[:8] == nn.MAGIC


def test_checkpoint_rejects_garbage(tmp_path, params):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"not a checkpoint at all")
    with pytest.raises(nn.CheckpointError, match="magic"):
        nn.load_checkpoint(bad)
    good = tmp_path / "g.ckpt"
    nn.save_checkpoint(good, params)
    trunc = tmp_path / "t.ckpt"
    trunc.write_bytes(good.read_bytes()[:-8])
    with pytest.raises((nn.CheckpointError, ValueError)):
        nn.load_checkpoint(trunc)


def test_cam_model_output_is_normalised():
    p = nn.init_params(nn.NetConfig(init_seed=3))
    cam = nn.CamModel(p)(np.random.default_rng(0).random((48, 40, 3)))
    assert cam.shape == (3, 3)
    assert cam.min() >= 0 and cam.max() <= 1
