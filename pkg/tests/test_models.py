import io

import numpy as np
import pytest

from vflmid import diffcore as dc
from vflmid.diffcore import Rng, Tensor
from vflmid.errors import ConfigError, DimensionError, FormatError
from vflmid.models import (GlobalHead, MlpModel, VibLayer, global_predict, load_checkpoint, local_forward,
                           model_from_checkpoint, model_to_checkpoint, save_checkpoint, vib_forward)

from conftest import central_diff, rel_err


def test_param_count():
    m = MlpModel.init([10, 32, 4], Rng(0))
    assert m.n_params() == 10 * 32 + 32 + 32 * 4 + 4


def test_bad_dims_rejected():
    with pytest.raises(ConfigError):
        MlpModel.init([10], Rng(0))


def test_identity_network():
    m = MlpModel([3, 3], {"W0": Tensor(np.eye(3)), "b0": Tensor(np.zeros(3))})
    x = Rng(1).normal((4, 3))
    assert np.array_equal(local_forward(m, Tensor(x)).data, x)


def test_zero_weight_network_outputs_bias():
    m = MlpModel([3, 2], {"W0": Tensor(np.zeros((3, 2))), "b0": Tensor(np.array([1.5, -2.0]))})
    out = local_forward(m, Tensor(Rng(1).normal((5, 3)))).data
    assert np.array_equal(out, np.tile([1.5, -2.0], (5, 1)))


def test_forward_matches_loop_oracle():
    r = Rng(2)
    m = MlpModel.init([5, 7, 3], r)
    x = r.normal((4, 5))
    W0, b0, W1, b1 = (m.params[k].data for k in ("W0", "b0", "W1", "b1"))
    out = np.zeros((4, 3))
    for i in range(4):
        hid = [max(0.0, sum(x[i, k] * W0[k, j] for k in range(5)) + b0[j]) for j in range(7)]
        for j in range(3):
            out[i, j] = sum(hid[k] * W1[k, j] for k in range(7)) + b1[j]
    assert np.allclose(local_forward(m, Tensor(x)).data, out, rtol=1e-12, atol=1e-12)


def test_forward_dimension_error():
    with pytest.raises(DimensionError):
        local_forward(MlpModel.init([5, 2], Rng(0)), Tensor(np.zeros((2, 4))))


def test_glorot_bounds_and_zero_bias():
    m = MlpModel.init([20, 30], Rng(3))
    lim = np.sqrt(6 / 50)
    assert np.all(np.abs(m.params["W0"].data) <= lim)
    assert np.all(m.params["b0"].data == 0)


def test_vjp_graph_matches_backward():
    r = Rng(4)
    m = MlpModel.init([6, 5, 3], r)
    x = Tensor(r.normal((4, 6)))
    g_out = r.normal((4, 3))
    ref = dc.backward(m.forward(x), wrt=list(m.params.values()), grad_output=g_out)
    grads, g_in = m.vjp_graph(x, Tensor(g_out))
    for k, p in m.params.items():
        assert np.allclose(grads[k].data, ref[p], atol=1e-13)
    xg = Tensor(x.data, requires_grad=True)
    ref_in = dc.backward(m.forward(xg), wrt=[xg], grad_output=g_out)[xg]
    assert np.allclose(g_in.data, ref_in, atol=1e-13)


# ---------------------------------------------------------------- global head

def test_sum_head_examples():
    head = GlobalHead("sum")
    a = Tensor(np.array([[1.0, 2.0]]))
    assert global_predict(head, [a]) is a
    out = global_predict(head, [a, Tensor(np.array([[3.0, 4.0]]))])
    assert np.array_equal(out.data, [[4, 6]])
    assert head.params == {}


def test_sum_head_permutation_invariant():
    r = Rng(5)
    parts = [Tensor(r.normal((3, 4))) for _ in range(3)]
    a = global_predict(GlobalHead("sum"), parts).data
    b = global_predict(GlobalHead("sum"), parts[::-1]).data
    assert np.allclose(a, b, rtol=0, atol=1e-15)


def test_sum_head_width_mismatch():
    with pytest.raises(DimensionError):
        global_predict(GlobalHead("sum"), [Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 4)))])


def test_linear_head_identity_returns_concatenation():
    mlp = MlpModel([4, 4], {"W0": Tensor(np.eye(4)), "b0": Tensor(np.zeros(4))})
    parts = [Tensor(np.array([[1.0, 2.0]])), Tensor(np.array([[3.0, 4.0]]))]
    out = global_predict(GlobalHead("linear", mlp), parts)
    assert np.array_equal(out.data, [[1, 2, 3, 4]])


def test_trainable_head_input_width():
    head = GlobalHead.trainable(2 * 4, 4, 2, Rng(0))
    assert head.mlp.in_dim == 8 and head.mlp.out_dim == 4


# ---------------------------------------------------------------- VIB

def _prior_vib(h=3, d=2):
    enc = MlpModel([h, 2 * d, 2 * d], {"W0": Tensor(np.zeros((h, 2 * d))), "b0": Tensor(np.zeros(2 * d)),
                                       "W1": Tensor(np.zeros((2 * d, 2 * d))), "b1": Tensor(np.zeros(2 * d))})
    dec = MlpModel.init([d, 2 * d, h], Rng(0))
    return VibLayer(enc, dec, d, 1.0)


def test_vib_at_prior_has_zero_kl():
    out = vib_forward(_prior_vib(), Tensor(Rng(1).normal((5, 3))), Rng(2))
    assert out.kl.item() == 0.0


def test_vib_eval_mode_deterministic():
    vib = VibLayer.init(4, 4, 1.0, Rng(3))
    h = Tensor(Rng(4).normal((6, 4)))
    a = vib_forward(vib, h, None, train_mode=False)
    b = vib_forward(vib, h, None, train_mode=False)
    assert np.array_equal(a.z.data, b.z.data)
    assert np.array_equal(a.t.data, a.mu.data)


def test_vib_train_mode_streams_change_t_not_moments():
    vib = VibLayer.init(4, 4, 1.0, Rng(3))
    h = Tensor(Rng(4).normal((6, 4)))
    a = vib_forward(vib, h, Rng(10, "x"))
    b = vib_forward(vib, h, Rng(10, "y"))
    assert not np.array_equal(a.t.data, b.t.data)
    assert np.array_equal(a.mu.data, b.mu.data) and np.array_equal(a.log_var.data, b.log_var.data)


def test_vib_shapes_and_invariants():
    vib = VibLayer.init(5, 3, 0.0, Rng(0), bottleneck_dim=2)
    assert vib.encoder.layer_dims == [5, 4, 4] and vib.decoder.layer_dims == [2, 4, 3]
    with pytest.raises(ConfigError):
        VibLayer(vib.encoder, vib.decoder, 3, 0.0)
    with pytest.raises(ConfigError):
        VibLayer(vib.encoder, vib.decoder, 2, -1.0)


def test_vib_log_var_is_clamped():
    vib = VibLayer.init(2, 2, 1.0, Rng(0))
    vib.encoder.params["b1"] = Tensor(np.array([0.0, 0.0, 50.0, -50.0]), requires_grad=True)
    out = vib_forward(vib, Tensor(np.zeros((1, 2))), Rng(1))
    assert np.array_equal(out.log_var.data, [[10.0, -10.0]])


def test_vib_gradients_match_fd_with_frozen_noise():
    r = Rng(6)
    vib = VibLayer.init(3, 3, 0.7, r)
    h = r.normal((4, 3))
    eps = r.normal((4, 3))
    y = [0, 2, 1, 2]
    arrays = {k: p.data.copy() for k, p in vib.params.items()}

    def loss_of(v):
        o = vib_forward(v, Tensor(h), None, eps=eps)
        ce, _ = dc.softmax_cross_entropy(o.z, y)
        return ce + dc.scale(o.kl, v.lam)

    g = dc.backward(loss_of(vib), wrt=list(vib.params.values()))
    names = list(vib.params)
    tensors = list(vib.params.values())

    def rebuilt():
        enc = {k[4:]: Tensor(arrays[k]) for k in names if k.startswith("enc.")}
        dec = {k[4:]: Tensor(arrays[k]) for k in names if k.startswith("dec.")}
        v = VibLayer(MlpModel(vib.encoder.layer_dims, enc), MlpModel(vib.decoder.layer_dims, dec), 3, 0.7)
        return loss_of(v).item()

    num = central_diff(rebuilt, [arrays[k] for k in names])
    for t, n in zip(tensors, num):
        assert rel_err(g[t], n) < 1e-4


def test_lambda_zero_loss_is_ce_but_path_persists():
    vib = VibLayer.init(3, 3, 0.0, Rng(7))
    h = Tensor(Rng(8).normal((4, 3)))
    o = vib_forward(vib, h, Rng(9))
    ce, _ = dc.softmax_cross_entropy(o.z, [0, 1, 2, 0])
    total = ce + dc.scale(o.kl, vib.lam)
    assert total.item() == ce.item()
    assert not np.allclose(o.z.data, h.data)


# ---------------------------------------------------------------- checkpoints

def test_checkpoint_round_trip(tmp_path):
    m = MlpModel.init([4, 5, 2], Rng(0))
    vib = VibLayer.init(2, 2, 1.0, Rng(1))
    blob = save_checkpoint(model_to_checkpoint(m, vib), tmp_path / "m.ckpt")
    assert (tmp_path / "m.ckpt").read_bytes() == blob
    loaded = load_checkpoint(tmp_path / "m.ckpt")
    assert set(loaded) == {f"local.{k}" for k in m.params} | {f"vib.{k}" for k in vib.params}
    back = model_from_checkpoint(loaded)
    assert back.layer_dims == m.layer_dims
    for k, p in m.params.items():
        assert np.array_equal(back.params[k].data, p.data)


def test_checkpoint_layout_is_little_endian_f64():
    blob = save_checkpoint({"ab": np.array([1.0, 2.0])})
    assert blob[:8] == b"VFLCKPT1"
    assert blob[8:12] == (1).to_bytes(4, "little")
    assert blob[12:16] == (2).to_bytes(4, "little") and blob[16:18] == b"ab"
    assert blob[-16:] == np.array([1.0, 2.0], dtype="<f8").tobytes()


def test_checkpoint_to_buffer():
    buf = io.BytesIO()
    save_checkpoint({"x": np.eye(2)}, buf)
    assert np.array_equal(load_checkpoint(buf.getvalue())["x"], np.eye(2))


@pytest.mark.parametrize("mutate", [lambda b: b"XXXXXXXX" + b[8:], lambda b: b + b"\x00"])
def test_checkpoint_corruption_detected(mutate):
    blob = save_checkpoint({"x": np.eye(2)})
    with pytest.raises(FormatError):
        load_checkpoint(mutate(blob))
