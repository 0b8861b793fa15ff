import numpy as np
import pytest

from psfedpalm.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from psfedpalm.model import (AdamState, ArchitectureDescriptor, NonFiniteGradientError, ParamVector,
                             adam_step, backward, build_layer_map, forward, init_params)

from conftest import network_fd, rel_err


def test_param_count_matches_hand_count():
    arch = ArchitectureDescriptor(num_classes=50)
    conv1 = 8 * 1 * 9 + 8 + 4 * 8
    conv2 = 16 * 8 * 9 + 16 + 4 * 16
    embed = 64 * (8 * 8 * 16) + 64
    cls = 50 * 64 + 50
    assert arch.num_params() == conv1 + conv2 + embed + cls == 70194
    assert len(init_params(arch, 0)) == 70194


def test_layer_map_partitions_vector():
    arch = ArchitectureDescriptor(num_classes=7)
    spans = sorted((off, off + n) for off, n, _ in build_layer_map(arch).values())
    assert spans[0][0] == 0
    assert all(a[1] == b[0] for a, b in zip(spans, spans[1:]))
    assert spans[-1][1] == arch.num_params()


@pytest.mark.parametrize("kwargs", [dict(num_classes=1), dict(num_classes=5, embedding_dim=0),
                                    dict(num_classes=5, input_height=30)])
def test_invalid_architecture(kwargs):
    with pytest.raises(ValueError):
        ArchitectureDescriptor(**kwargs)


def test_param_vector_length_checked(small_arch):
    with pytest.raises(ValueError):
        ParamVector(small_arch, np.zeros(10))


def test_init_deterministic_and_seed_sensitive(small_arch):
    a, b, c = init_params(small_arch, 1), init_params(small_arch, 1), init_params(small_arch, 2)
    assert a.values.tobytes() == b.values.tobytes()
    assert np.any(a.values != c.values)
    assert np.all(a.get("norm1.scale") == 1) and np.all(a.get("norm2.running_var") == 1)
    assert np.all(a.get("conv1.bias") == 0) and np.all(a.get("head.cls.bias") == 0)


def test_zero_network_gives_zero_outputs(small_arch):
    x = np.random.default_rng(0).random((3, 32, 32))
    for mode in ("train", "eval"):
        out = forward(ParamVector.zeros(small_arch), x, mode)
        assert np.all(out.logits == 0)
        assert np.all(out.raw_embedding == 0)
        assert np.all(out.embedding == 0)


def test_duplicate_rows_identical_in_eval(small_params):
    img = np.random.default_rng(1).random((32, 32))
    out = forward(small_params, np.stack([img, img]), "eval")
    assert np.array_equal(out.logits[0], out.logits[1])
    assert np.array_equal(out.embedding[0], out.embedding[1])


def test_embedding_unit_norm(small_params):
    out = forward(small_params, np.random.default_rng(2).random((5, 32, 32)), "train")
    assert np.allclose(np.linalg.norm(out.embedding, axis=1), 1.0, atol=1e-9)


def test_eval_is_pure(small_params):
    before = small_params.values.copy()
    x = np.random.default_rng(3).random((4, 32, 32))
    a = forward(small_params, x, "eval")
    b = forward(small_params, x, "eval")
    assert a.logits.tobytes() == b.logits.tobytes()
    assert a.running_stats == {}
    assert small_params.values.tobytes() == before.tobytes()


def test_train_forward_reports_running_stats_without_mutating(small_params):
    before = small_params.values.copy()
    out = forward(small_params, np.random.default_rng(4).random((4, 32, 32)), "train")
    assert set(out.running_stats) == {"norm1.running_mean", "norm1.running_var",
                                      "norm2.running_mean", "norm2.running_var"}
    assert small_params.values.tobytes() == before.tobytes()


def test_shape_mismatch_rejected(small_params):
    with pytest.raises(ValueError, match="expected images"):
        forward(small_params, np.zeros((2, 28, 28)))


def test_stale_cache_rejected(small_params):
    out = forward(small_params, np.random.default_rng(5).random((2, 32, 32)), "train")
    backward(out.cache, np.ones_like(out.logits), None)
    with pytest.raises(RuntimeError):
        backward(out.cache, np.ones_like(out.logits), None)


def test_eval_cache_rejected(small_params):
    out = forward(small_params, np.random.default_rng(5).random((2, 32, 32)), "eval")
    with pytest.raises(RuntimeError):
        backward(out.cache, np.ones_like(out.logits), None)


def test_zero_upstream_gives_zero_gradient(small_params):
    out = forward(small_params, np.random.default_rng(6).random((3, 32, 32)), "train")
    g = backward(out.cache, np.zeros_like(out.logits), np.zeros_like(out.embedding))
    assert np.all(g == 0)


def test_normalization_gradient_orthogonal_to_raw(small_params):
    rng = np.random.default_rng(7)
    out = forward(small_params, rng.random((3, 32, 32)), "train")
    u = out.raw_embedding
    e = out.embedding
    g = rng.normal(size=e.shape)
    # Jacobian of u/|u| applied to g: (g - e(e.g))/|u|
    jg = (g - e * np.sum(e * g, axis=1, keepdims=True)) / np.linalg.norm(u, axis=1, keepdims=True)
    assert np.max(np.abs(np.sum(jg * u, axis=1))) < 1e-12


def _random_params(arch, seed):
    p = init_params(arch, seed)
    rng = np.random.default_rng(seed + 100)
    # move away from the identity initialization so every path is exercised
    for name in ("conv1.bias", "conv2.bias", "norm1.shift", "norm2.shift", "head.embed.bias", "head.cls.bias"):
        p.get(name)[...] = rng.normal(0, 0.1, p.get(name).shape)
    for name in ("norm1.scale", "norm2.scale"):
        p.get(name)[...] = rng.uniform(0.5, 1.5, p.get(name).shape)
    return p


@pytest.mark.parametrize("paths", ["logits", "embedding", "both"])
def test_gradient_matches_finite_differences(small_arch, paths):
    rng = np.random.default_rng(11)
    p = _random_params(small_arch, 3)
    x = rng.random((4, 32, 32))
    gl = rng.normal(size=(4, small_arch.num_classes)) if paths in ("logits", "both") else None
    ge = rng.normal(size=(4, 64)) if paths in ("embedding", "both") else None

    def loss(v):
        o = forward(ParamVector(small_arch, v), x, "train")
        total = 0.0
        if gl is not None:
            total += np.sum(o.logits * gl)
        if ge is not None:
            total += np.sum(o.embedding * ge)
        return total

    out = forward(p, x, "train")
    g = backward(out.cache, gl, ge)
    trainable = np.flatnonzero(p.trainable_mask())
    idx = rng.choice(trainable, 60, replace=False)
    # include every small layer entirely
    for name in ("norm1.scale", "norm2.shift", "conv1.weight"):
        off, n, _ = p.layer_map[name]
        idx = np.union1d(idx, np.arange(off, off + n))
    fd, used = network_fd(loss, small_arch, p.values, x, idx)
    # nearly every coordinate must be checkable at the nominal step
    assert len(fd) >= 0.95 * len(idx)
    assert sum(h == 1e-5 for h in used.values()) >= 0.5 * len(idx)
    keys = sorted(fd)
    errs = rel_err([fd[i] for i in keys], g[keys], floor=1e-6)
    assert errs.max() < 1e-4
    assert np.all(g[~p.trainable_mask()] == 0)


def test_adam_zero_gradient_keeps_params(small_params):
    state = AdamState.fresh(len(small_params))
    new_state, new_params = adam_step(state, small_params, np.zeros(len(small_params)))
    assert new_state.t == 1
    assert new_params.values.tobytes() == small_params.values.tobytes()


def test_adam_first_step_closed_form(small_arch):
    p = ParamVector.zeros(small_arch)
    g = np.zeros(len(p))
    g[0] = 2.0
    _, new = adam_step(AdamState.fresh(len(p), lr=0.01), p, g)
    # m_hat = 2, v_hat = 4 -> step = lr * 2 / (2 + eps)
    assert abs(new.values[0] - (-0.01)) < 1e-8


def _scalar_adam(theta, grads, lr=0.01, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mh = m / (1 - b1 ** t)
        vh = v / (1 - b2 ** t)
        theta = theta - lr * mh / (vh ** 0.5 + eps)
    return theta


def test_adam_two_steps_match_scalar_oracle(small_arch):
    rng = np.random.default_rng(0)
    p = init_params(small_arch, 0)
    g1, g2 = rng.normal(size=len(p)), rng.normal(size=len(p))
    state = AdamState.fresh(len(p), lr=0.01)
    state, q = adam_step(state, p, g1)
    state, q = adam_step(state, q, g2)
    assert state.t == 2
    for i in rng.choice(len(p), 25, replace=False):
        assert abs(q.values[i] - _scalar_adam(p.values[i], [g1[i], g2[i]])) < 1e-15


def test_adam_rejects_non_finite(small_params):
    g = np.zeros(len(small_params))
    g[3] = np.nan
    with pytest.raises(NonFiniteGradientError):
        adam_step(AdamState.fresh(len(g)), small_params, g)


def test_checkpoint_round_trip_bit_exact(tmp_path, small_params):
    rng = np.random.default_rng(0)
    adam = AdamState(rng.normal(size=len(small_params)), rng.random(len(small_params)), 7, 0.01)
    a = save_checkpoint(tmp_path / "a.psfp", small_params, seed=3, round=7, component="global", adam=adam)
    params, adam2, header = load_checkpoint(a)
    b = save_checkpoint(tmp_path / "b.psfp", params, seed=header["seed"], round=header["round"],
                        component=header["component"], adam=adam2)
    assert a.read_bytes() == b.read_bytes()
    assert a.read_bytes()[:5] == b"PSFP1"
    assert params.values.tobytes() == small_params.values.tobytes()
    assert adam2.t == 7 and adam2.m.tobytes() == adam.m.tobytes()


def test_checkpoint_rejects_corruption(tmp_path, small_params):
    path = save_checkpoint(tmp_path / "a.psfp", small_params, seed=0, round=0, component="global")
    data = path.read_bytes()
    (tmp_path / "bad.psfp").write_bytes(b"XXXX1" + data[5:])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "bad.psfp")
    (tmp_path / "short.psfp").write_bytes(data[:-8])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "short.psfp")
