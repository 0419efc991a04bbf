import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import central_difference, relative_error
from wisdomnet import tensor_core as tc
from wisdomnet.errors import DimensionError, VersionMismatchError, WeightFormatError
from wisdomnet.member_network import (
    ARCHITECTURE,
    MemberNetwork,
    ProbabilityPair,
    build_member,
    flatten_length,
    forward,
    load_weights,
    parameter_count,
    parameter_shapes,
    save_weights,
)


def _images(n, side, seed=0):
    return np.random.default_rng(seed).random((n, side, side, 3)).astype(np.float32)


def test_flatten_lengths():
    assert flatten_length(256) == 262144
    assert flatten_length(32) == 4096
    assert parameter_shapes(256)["dense1.weights"] == (262144, 64)


def test_parameter_count_at_full_size():
    conv = (7 * 7 * 3 * 64 + 64) + 2 * (3 * 3 * 64 * 64 + 64)
    dense = (262144 * 64 + 64) + (64 * 32 + 32) + (32 * 2 + 2)
    assert parameter_count(256) == conv + dense == 16_862_754


def test_layer_order_matches_architecture():
    names = list(parameter_shapes(32))
    assert names == ["conv1.kernels", "conv1.bias", "conv2.kernels", "conv2.bias",
                     "conv3.kernels", "conv3.bias", "dense1.weights", "dense1.bias",
                     "dense2.weights", "dense2.bias", "dense3.weights", "dense3.bias"]
    kinds = [layer[0] for layer in ARCHITECTURE]
    assert kinds == ["conv", "maxpool", "conv", "maxpool", "conv", "flatten", "dense", "dense", "dense"]


@pytest.mark.parametrize("side", [0, 6, 30, 33, -4])
def test_invalid_input_side(side):
    with pytest.raises(ValueError):
        build_member(0, side)


def test_negative_seed_rejected():
    with pytest.raises(ValueError, match="seed"):
        build_member(-1, 8)


def test_same_seed_same_parameters():
    a, b, c = build_member(5, 16), build_member(5, 16), build_member(6, 16)
    for name in a.params:
        assert a.params[name].data.tobytes() == b.params[name].data.tobytes()
    assert any(a.params[n].data.tobytes() != c.params[n].data.tobytes() for n in a.params)
    assert a.fingerprint() == c.fingerprint()


def test_he_initialisation_scale_and_zero_bias():
    net = build_member(0, 32)
    w = net.params["dense1.weights"].data
    assert abs(w.std() - np.sqrt(2.0 / 4096)) < 0.05 * np.sqrt(2.0 / 4096)
    assert all(not net.params[n].data.any() for n in net.params if n.endswith(".bias"))


def test_forward_outputs_probability_pairs():
    net = build_member(1, 16)
    for img in _images(5, 16):
        pair = forward(net, img)
        assert abs(pair.p_class0 + pair.p_class1 - 1) <= 1e-6
        assert forward(net, img) == pair


def test_zero_weight_net_is_indifferent():
    net = build_member(1, 16)
    for t in net.params.values():
        t.data[...] = 0
    pair = forward(net, np.zeros((16, 16, 3), np.float32))
    assert pair == ProbabilityPair(0.5, 0.5)


def test_forward_rejects_bad_images():
    net = build_member(1, 16)
    with pytest.raises(DimensionError):
        forward(net, np.zeros((8, 8, 3)))
    with pytest.raises(ValueError):
        forward(net, np.full((16, 16, 3), 1.5))


def test_batch_matches_single_forward():
    net = build_member(2, 16)
    imgs = _images(4, 16, seed=3)
    batched = net.forward_batch(imgs)
    for i in range(4):
        np.testing.assert_allclose(batched[i], forward(net, imgs[i]).as_array(), atol=1e-6)


def test_predict_counts_evaluations():
    net = build_member(2, 16)
    assert net.evaluations == 0
    net.predict(_images(1, 16)[0])
    net.forward_batch(_images(3, 16))
    assert net.evaluations == 1


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from(["zeros", "ones", "random"]))
def test_forward_is_total_on_unit_cube(seed, kind):
    net = build_member(seed % 1000, 8)
    rng = np.random.default_rng(seed)
    img = {"zeros": np.zeros((8, 8, 3)), "ones": np.ones((8, 8, 3)),
           "random": rng.random((8, 8, 3))}[kind]
    probs = net.forward_batch(img)
    assert np.all(np.isfinite(probs))
    assert abs(probs.sum() - 1) <= 1e-6


def test_network_backward_matches_finite_differences():
    """End-to-end gradient of the whole stack on a sample of parameter entries."""
    with tc.precision(np.float64):
        net = build_member(3, 8)
        rng = np.random.default_rng(0)
        imgs = rng.random((3, 8, 8, 3))
        y = np.eye(2)[[0, 1, 1]]
        net.zero_grad()
        probs, cache = net.forward_batch(imgs, keep_cache=True)
        net.backward(cache, y, probs)
        for name, tensor in net.params.items():
            flat = tensor.data.reshape(-1)
            picks = rng.choice(flat.size, size=min(12, flat.size), replace=False)

            def loss_at(values, picks=picks, flat=flat):
                saved = flat[picks].copy()
                flat[picks] = values
                out = tc.cross_entropy_loss(y, net.forward_batch(imgs))
                flat[picks] = saved
                return out

            numeric = central_difference(loss_at, flat[picks].copy(), 1e-5)
            analytic = tensor.grad.reshape(-1)[picks]
            assert relative_error(analytic, numeric) < 1e-4, name


def test_pair_validation():
    with pytest.raises(ValueError):
        ProbabilityPair(0.6, 0.6)
    with pytest.raises(ValueError):
        ProbabilityPair(1.5, -0.5)
    p = ProbabilityPair(0.3, 0.7)
    assert (p.p_positive, p.p_negative, p.p_non_ards, p.p_ards) == (0.3, 0.7, 0.3, 0.7)


# --- weight files -------------------------------------------------------------------

def test_weight_round_trip_bitwise(tmp_path):
    net = build_member(9, 16)
    path = save_weights(net, tmp_path / "m.wnw")
    loaded = load_weights(path)
    assert (loaded.seed, loaded.input_side) == (9, 16)
    imgs = _images(10, 16, seed=1)
    for img in imgs:
        assert forward(net, img) == forward(loaded, img)
    assert net.forward_batch(imgs).tobytes() == loaded.forward_batch(imgs).tobytes()


def test_weight_file_header(tmp_path):
    path = save_weights(build_member(2**40 + 3, 16), tmp_path / "m.wnw")
    magic, version, side, seed, count = struct.unpack_from("<4sBIqI", path.read_bytes())
    assert (magic, version, side, seed, count) == (b"WSDN", 1, 16, 2**40 + 3, 12)


@pytest.mark.parametrize("cut", [0, 3, 10, 100, -5, -1])
def test_truncated_file_raises(tmp_path, cut):
    path = save_weights(build_member(1, 8), tmp_path / "m.wnw")
    path.write_bytes(path.read_bytes()[:cut])
    with pytest.raises(WeightFormatError):
        load_weights(path)


def test_version_bump_raises(tmp_path):
    path = save_weights(build_member(1, 8), tmp_path / "m.wnw")
    buf = bytearray(path.read_bytes())
    buf[4] += 1
    path.write_bytes(bytes(buf))
    with pytest.raises(VersionMismatchError):
        load_weights(path)


def test_bad_magic_and_corruption(tmp_path):
    path = save_weights(build_member(1, 8), tmp_path / "m.wnw")
    good = path.read_bytes()
    path.write_bytes(b"XXXX" + good[4:])
    with pytest.raises(WeightFormatError, match="magic"):
        load_weights(path)
    flipped = bytearray(good)
    flipped[len(good) // 2] ^= 0xFF
    path.write_bytes(bytes(flipped))
    with pytest.raises(WeightFormatError):
        load_weights(path)
    path.write_bytes(good + b"\0")
    with pytest.raises(WeightFormatError):
        load_weights(path)
    with pytest.raises(WeightFormatError):
        load_weights(tmp_path / "missing.wnw")


def test_network_rejects_mismatched_parameters():
    net = build_member(1, 8)
    params = dict(net.params)
    params.pop("dense3.bias")
    with pytest.raises(DimensionError):
        MemberNetwork(1, 8, params)
