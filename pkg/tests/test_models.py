import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dagaf import diffcore as dc
from dagaf import models
from dagaf.diffcore import Adam, ConfigError, Tape
from dagaf.graph import extract_adjacency
from dagaf.models import Assumption, Critic, FcmModel


def _zero_fcm(model):
    for p in model.fcm_params():
        p.value[...] = 0.0


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def fcm_oracle(model, x):
    """Per-sample, per-node loop over the first and output layers."""
    n, d = x.shape
    w = model.l0_weights() * model.structure_mask[:, None, :]
    out = np.zeros((n, d))
    for i in range(n):
        for j in range(d):
            hid = w[j] @ x[i] + model.l0_bias.value[j]
            if model.assumption is not Assumption.LINGAM:
                hid = _sigmoid(hid)
            out[i, j] = hid @ model.out_w.value[j, :, 0] + model.out_b.value[j, 0]
    return out


@pytest.mark.parametrize("assumption", ["anm", "lingam", "pnl"])
def test_fcm_forward_matches_loop_oracle(assumption):
    rng = np.random.default_rng(0)
    m = FcmModel(3, rng, latent_h=4, assumption=assumption)
    m.l0_bias.value[...] = rng.normal(size=m.l0_bias.shape)
    x = rng.normal(size=(6, 3))
    got = models.fcm_forward(m, x, Tape()).value
    assert np.allclose(got, fcm_oracle(m, x), rtol=1e-13, atol=1e-14)


def test_zero_weights_give_zero_or_noise():
    rng = np.random.default_rng(1)
    m = FcmModel(3, rng)
    _zero_fcm(m)
    x = rng.normal(size=(5, 3))
    assert not models.fcm_forward(m, x, Tape()).value.any()
    z = rng.normal(size=(5, 3, 1))
    assert np.allclose(models.fcm_forward(m, x, Tape(), z=z).value, z[:, :, 0])


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 5), st.integers(0, 2**31 - 1))
def test_own_column_never_reaches_own_output(d, seed):
    rng = np.random.default_rng(seed)
    m = FcmModel(d, rng, latent_h=3)
    x = rng.normal(size=(4, d))
    base = models.fcm_forward(m, x, Tape()).value
    for j in range(d):
        x2 = x.copy()
        x2[:, j] += 1.7
        assert np.array_equal(models.fcm_forward(m, x2, Tape()).value[:, j], base[:, j])
    assert not np.diag(extract_adjacency(m)).any()


@settings(max_examples=25, deadline=None)
@given(st.floats(0, 1), st.integers(0, 2**31 - 1))
def test_lingam_forward_is_affine(a, seed):
    rng = np.random.default_rng(seed)
    m = FcmModel(4, rng, assumption="lingam")
    x1, x2 = rng.normal(size=(2, 5, 4))
    f = lambda x: models.fcm_forward(m, x, Tape()).value  # noqa: E731
    assert np.allclose(f(a * x1 + (1 - a) * x2), a * f(x1) + (1 - a) * f(x2), atol=1e-10)


def test_structure_mask_removes_inputs():
    rng = np.random.default_rng(2)
    m = FcmModel(3, rng)
    m.structure_mask = np.zeros((3, 3))
    x = rng.normal(size=(4, 3))
    out = models.fcm_forward(m, x, Tape()).value
    assert np.allclose(out, models.fcm_forward(m, np.zeros_like(x), Tape()).value)


def test_model_validation():
    rng = np.random.default_rng(3)
    with pytest.raises(ConfigError):
        FcmModel(1, rng)
    with pytest.raises(ConfigError):
        FcmModel(3, rng, latent_h=0)
    with pytest.raises(ValueError):
        FcmModel(3, rng, assumption="gaussian")


# -- critic ------------------------------------------------------------------

def test_critic_examples():
    rng = np.random.default_rng(4)
    c = Critic(3, rng, hidden=(3, 3), dropout=0.0, slope=0.2)
    for p in c.params():
        p.value[...] = 0.0
    x = rng.normal(size=(5, 3))
    assert not models.critic_forward(c, x, Tape()).value.any()
    # identity hidden layers on non-negative inputs pass the row sum through
    c.weights[0].value[...] = np.eye(3)
    c.weights[1].value[...] = np.eye(3)
    c.weights[2].value[...] = np.ones((3, 1))
    xp = np.abs(x)
    assert np.allclose(models.critic_forward(c, xp, Tape()).value[:, 0], xp.sum(axis=1))
    c2 = Critic(3, rng)
    dup = np.repeat(rng.normal(size=(1, 3)), 4, axis=0)
    s = models.critic_forward(c2, dup, Tape()).value
    assert np.all(s == s[0])
    assert c2.dims == [3, 64, 64, 1]
    with pytest.raises(ConfigError):
        Critic(3, rng, dropout=1.0)


def test_detached_critic_gets_no_gradient():
    rng = np.random.default_rng(5)
    c = Critic(2, rng)
    tape = Tape()
    x = tape.param(dc.Param(rng.normal(size=(3, 2))))
    tape.backward(dc.vsum(models.critic_forward(c, x, tape, detach=True)))
    assert all(not p.grad.any() for p in c.params())


def test_dropout_only_with_rng():
    rng = np.random.default_rng(6)
    c = Critic(2, rng, dropout=0.5)
    x = rng.normal(size=(8, 2))
    a = models.critic_forward(c, x, Tape()).value
    b = models.critic_forward(c, x, Tape()).value
    assert np.array_equal(a, b)
    d1 = models.critic_forward(c, x, Tape(), rng=np.random.default_rng(0)).value
    assert not np.array_equal(a, d1)


# -- PNL pair ------------------------------------------------------------------

def test_pnl_pair_shapes_and_zero_net():
    rng = np.random.default_rng(7)
    m = FcmModel(3, rng, assumption="pnl")
    assert m.pnl.widths == [3, 30, 30, 30, 3]
    x = rng.normal(size=(4, 3))
    assert models.g_inverse_forward(m, x, Tape()).shape == (4, 3)
    same = np.repeat(x[:1], 3, axis=0)
    out = models.g_inverse_forward(m, same, Tape()).value
    assert np.all(out == out[0])
    for p in m.pnl.g_inv.params():
        p.value[...] = 0.0
    assert not models.g_inverse_forward(m, x, Tape()).value.any()
    with pytest.raises(ConfigError):
        models.g_inverse_forward(FcmModel(3, rng), x, Tape())


def test_pnl_nets_act_per_variable():
    rng = np.random.default_rng(8)
    m = FcmModel(3, rng, assumption="pnl")
    x = rng.normal(size=(5, 3))
    base = models.g_inverse_forward(m, x, Tape()).value
    x2 = x.copy()
    x2[:, 0] += 1.0
    moved = models.g_inverse_forward(m, x2, Tape()).value
    assert np.array_equal(moved[:, 1:], base[:, 1:])


# -- weight transfer and generation ----------------------------------------

def test_transfer_copies_and_freezes():
    rng = np.random.default_rng(9)
    src, dst = FcmModel(4, rng), FcmModel(4, rng)
    hidden_before = dst.out_w.value.copy()
    models.transfer_weights(src, dst)
    assert np.array_equal(extract_adjacency(src), extract_adjacency(dst))
    assert np.array_equal(dst.out_w.value, hidden_before)
    opt = Adam(dst.fcm_params(), lr=0.1)
    assert not any(p is q for p in opt.params for q in dst.first_layer_params())
    tape = Tape()
    out = models.fcm_forward(dst, rng.normal(size=(5, 4)), tape)
    tape.backward(dc.vsum(dc.square(out)))
    opt.step()
    assert np.array_equal(extract_adjacency(src), extract_adjacency(dst))
    with pytest.raises(ConfigError):
        models.transfer_weights(src, FcmModel(4, rng, assumption="pnl"))
    with pytest.raises(ConfigError):
        models.transfer_weights(src, FcmModel(3, rng))


def test_generate_follows_structure_order():
    rng = np.random.default_rng(10)
    m = FcmModel(3, rng)
    m.structure_mask = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0]], dtype=float)
    assert models.generation_levels(m) == [[0], [1], [2]]
    z = rng.normal(size=(6, 3, 1))
    x = models.generate(m, z, Tape()).value
    # the result is a fixed point of one more pass through the model
    again = models.fcm_forward(m, x, Tape(), z=z).value
    assert np.allclose(x, again, rtol=1e-14)


def test_generate_cyclic_structure_uses_repeated_passes():
    rng = np.random.default_rng(11)
    m = FcmModel(2, rng)
    levels = models.generation_levels(m)  # full mask on d=2 is the 2-cycle
    assert levels == [[0, 1], [0, 1]]
    assert models.generate(m, rng.normal(size=(3, 2, 1)), Tape()).shape == (3, 2)


# -- checkpoints -----------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(12)
    m = FcmModel(3, rng, assumption="pnl", z_size=2)
    m.structure_mask = np.array([[0, 1, 0], [0, 0, 0], [1, 1, 0]], dtype=float)
    c = Critic(3, rng)
    models.save_model(tmp_path / "ck", m, c, note="x")
    manifest = json.loads((tmp_path / "ck" / "manifest.json").read_text())
    names = {e["name"] for e in manifest["arrays"]}
    assert {"l0.node0", "l0.node2.bias", "hidden0.node1", "critic.0", "g.0", "g_inv.3"} <= names
    assert (tmp_path / "ck" / "weights.bin").stat().st_size % 8 == 0
    back, meta = models.model_from_checkpoint(tmp_path / "ck")
    assert meta["note"] == "x" and back.assumption is Assumption.PNL and back.z_size == 2
    assert np.array_equal(back.l0_weights(), m.l0_weights())
    assert np.array_equal(back.structure_mask, m.structure_mask)
    for name, p in m.named_params().items():
        if not name.startswith("l0.") or name == "l0.bias":
            assert np.array_equal(back.named_params()[name].value, p.value), name
    x = rng.normal(size=(4, 3))
    assert np.array_equal(models.fcm_forward(back, x, Tape(), apply_g=True).value,
                          models.fcm_forward(m, x, Tape(), apply_g=True).value)


def test_checkpoint_preserves_freeze_flags(tmp_path):
    rng = np.random.default_rng(13)
    src, dst = FcmModel(3, rng), FcmModel(3, rng)
    models.transfer_weights(src, dst)
    models.save_model(tmp_path / "ck", dst)
    back, _ = models.model_from_checkpoint(tmp_path / "ck")
    assert back.l0_pos.frozen and back.l0_bias.frozen and not back.out_w.frozen


def test_checkpoint_errors(tmp_path):
    rng = np.random.default_rng(14)
    models.save_model(tmp_path / "ck", FcmModel(3, rng))
    (tmp_path / "ck" / "manifest.json").write_text("{not json")
    with pytest.raises(ValueError, match="manifest"):
        models.model_from_checkpoint(tmp_path / "ck")
    models.save_model(tmp_path / "ck2", FcmModel(3, rng))
    data = (tmp_path / "ck2" / "weights.bin").read_bytes()
    (tmp_path / "ck2" / "weights.bin").write_bytes(data[:-16])
    with pytest.raises(ValueError, match="truncated"):
        models.model_from_checkpoint(tmp_path / "ck2")
    with pytest.raises(ValueError):
        models.model_from_checkpoint(tmp_path / "nowhere")
