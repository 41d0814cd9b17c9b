import math

import numpy as np
import pytest

from htnet import numerics as nx
from htnet.model import (
    ConfigError,
    ModelConfig,
    embed,
    gbi_forward,
    init_params,
    ipc_forward,
    ljc_forward,
    mixer_forward,
    model_forward,
    param_breakdown,
    param_count,
)
from htnet.numerics import Tensor
from htnet.skeleton import limb_layout, normalized_adjacency
from htnet.train import l2_loss


def gelu(x):
    return 0.5 * x * (1.0 + math.erf(x / math.sqrt(2.0)))


def T(a):
    return Tensor(np.asarray(a, dtype=np.float64))


def closed_form_count(C, M, N, r, blocks=("ljc", "ipc", "gbi"), serial=False):
    """Hand count, block by block."""
    c = C if serial else C // 3
    per_mixer = 0
    if "ljc" in blocks:
        per_mixer += 2 * c * c                                  # W1, W2
    if "ipc" in blocks:
        per_mixer += 2 * c * c + 3 * c * c                      # kernel-2 and kernel-3 convs
        per_mixer += 2 * (2 * c + c * r * c + r * c * c)        # two LN + MLP blocks
    if "gbi" in blocks:
        per_mixer += 4 * (c * c + c) + 2 * c                    # q, k, v, out (+bias), LN
    per_mixer += 2 * C + 2 * r * C * C                          # mixer LN + MLP
    return 2 * C + N * C + M * per_mixer + 3 * C


# ---------------------------------------------------------------------------
# config / params


@pytest.mark.parametrize("channels", [0, 36, 100, 250])
def test_config_rejects_channels_not_divisible_by_24(channels):
    with pytest.raises(ConfigError):
        ModelConfig(channels=channels)


def test_config_rejects_unknown_structure_and_blocks():
    with pytest.raises(ConfigError):
        ModelConfig(structure="diagonal")
    with pytest.raises(ConfigError):
        ModelConfig(blocks=("ljc", "tcn"))


def test_default_param_count_in_window():
    n = param_count(init_params(ModelConfig(), seed=0))
    assert 2.4e6 <= n <= 3.6e6
    assert n == closed_form_count(240, 3, 17, 6)


def test_gbi_only_param_count_in_baseline_window():
    n = param_count(init_params(ModelConfig(blocks=("gbi",)), seed=0))
    assert 1.76e6 <= n <= 2.64e6
    assert n == closed_form_count(240, 3, 17, 6, blocks=("gbi",))


def test_small_config_matches_hand_count():
    n = param_count(init_params(ModelConfig(channels=24, mixers=1), seed=0))
    assert n == closed_form_count(24, 1, 17, 6) == 9808


def test_zero_mixer_count_is_embed_pos_head():
    p = init_params(ModelConfig(channels=48, mixers=0), seed=0)
    assert param_count(p) == 2 * 48 + 17 * 48 + 48 * 3
    assert param_breakdown(p) == {"embed": 2 * 48 + 17 * 48, "head": 48 * 3}


def test_serial_count_matches_hand_count():
    n = param_count(init_params(ModelConfig(structure="serial"), seed=0))
    assert n == closed_form_count(240, 3, 17, 6, serial=True)


def test_init_is_deterministic_and_seed_sensitive():
    cfg = ModelConfig(channels=24, mixers=2)
    a, b, c = (init_params(cfg, seed=s) for s in (3, 3, 4))
    for k in a:
        assert a[k].data.tobytes() == b[k].data.tobytes()
    assert any(not np.array_equal(a[k].data, c[k].data) for k in a)


def test_init_conventions():
    p = init_params(ModelConfig(channels=24, mixers=1), seed=0)
    assert np.abs(p["embed.pos"].data).max() < 0.1
    assert (p["mixers.0.mlp.ln_scale"].data == 1).all()
    assert (p["mixers.0.mlp.ln_shift"].data == 0).all()
    bound = 1 / math.sqrt(2 * 8)
    assert np.abs(p["mixers.0.ipc.conv1"].data).max() <= bound


# ---------------------------------------------------------------------------
# embedding


def test_embed_examples():
    p = init_params(ModelConfig(channels=24, mixers=0), seed=0).astype(np.float64)
    zero = T(np.zeros((17, 2)))
    p["embed.pos"].data[:] = 0
    np.testing.assert_array_equal(embed(p, zero).data, 0)
    pos = np.random.default_rng(0).normal(size=(17, 24))
    p["embed.pos"].data[:] = pos
    np.testing.assert_array_equal(embed(p, zero).data, pos)
    onehot = np.zeros((17, 2))
    onehot[5, 1] = 1.0
    out = embed(p, T(onehot)).data
    np.testing.assert_allclose(out[5], p["embed.weight"].data[1] + pos[5])
    np.testing.assert_allclose(out[4], pos[4])


def test_embed_rejects_wrong_joint_count():
    p = init_params(ModelConfig(channels=24, mixers=0), seed=0)
    with pytest.raises(nx.ShapeError):
        embed(p, T(np.zeros((16, 2))))


# ---------------------------------------------------------------------------
# joint level


def test_ljc_zero_input_gives_zero(h36m):
    rng = np.random.default_rng(0)
    p = {"w1": T(rng.normal(size=(8, 8))), "w2": T(rng.normal(size=(8, 8)))}
    out = ljc_forward(p, T(np.zeros((17, 8))), normalized_adjacency(h36m))
    np.testing.assert_array_equal(out.data, 0)


def test_ljc_single_joint_identity_weights():
    x = np.array([[0.3, -1.2, 2.0]])
    p = {"w1": T(np.eye(3)), "w2": T(np.eye(3))}
    out = ljc_forward(p, T(x), np.array([[1.0]]))
    np.testing.assert_allclose(out.data, [[v + gelu(v) for v in x[0]]], rtol=1e-14)


def test_ljc_residual_branch_nonzero(h36m):
    rng = np.random.default_rng(1)
    p = {"w1": T(rng.normal(size=(8, 8))), "w2": T(rng.normal(size=(8, 8)))}
    x = rng.normal(size=(2, 17, 8))
    out = ljc_forward(p, T(x), normalized_adjacency(h36m)).data
    assert out.shape == x.shape
    assert np.abs(out - x).min() > 0


# ---------------------------------------------------------------------------
# part level


def _ipc_params(c, r, rng, zero=False):
    f = (lambda *s: np.zeros(s)) if zero else (lambda *s: rng.normal(size=s))
    p = {"conv1": f(2, c, c), "conv2": f(3, c, c)}
    for m in ("mlp1", "mlp2"):
        p[f"{m}.ln_scale"] = np.ones(c) if zero else 1 + 0.1 * rng.normal(size=c)
        p[f"{m}.ln_shift"] = f(c)
        p[f"{m}.fc1"] = f(c, r * c)
        p[f"{m}.fc2"] = f(r * c, c)
    return {k: T(v) for k, v in p.items()}


def test_ipc_zero_in_zero_out(h36m):
    p = _ipc_params(4, 2, None, zero=True)
    out = ipc_forward(p, T(np.zeros((17, 4))), T(np.zeros((17, 4))), limb_layout(h36m))
    np.testing.assert_array_equal(out.data, 0)


def test_ipc_hand_trace_single_channel(h36m):
    """C'=1, MLP hidden 1: every value below is evaluated with scalar math."""
    a0, a1 = 0.7, -0.4
    b0, b1, b2 = 0.2, 0.5, -0.9
    s1, u1, v1 = 0.3, 1.5, -0.8
    s2, u2, v2 = -0.6, 0.9, 1.1
    p = {
        "conv1": T([[[a0]], [[a1]]]), "conv2": T([[[b0]], [[b1]], [[b2]]]),
        "mlp1.ln_scale": T([2.0]), "mlp1.ln_shift": T([s1]),
        "mlp1.fc1": T([[u1]]), "mlp1.fc2": T([[v1]]),
        "mlp2.ln_scale": T([2.0]), "mlp2.ln_shift": T([s2]),
        "mlp2.fc1": T([[u2]]), "mlp2.fc2": T([[v2]]),
    }
    rng = np.random.default_rng(7)
    x, prev = rng.normal(size=(17, 1)), rng.normal(size=(17, 1))
    out = ipc_forward(p, T(x), T(prev), limb_layout(h36m)).data[:, 0]
    xt = (x + prev)[:, 0]
    expected = xt.copy()
    for j1, j2, j3 in h36m.limbs:
        # layer norm over one channel returns its shift
        f1 = gelu(a0 * xt[j2] + a1 * xt[j3])
        f1 += gelu(s1 * u1) * v1
        f2 = gelu(b0 * xt[j1] + b1 * xt[j2] + b2 * xt[j3])
        f2 += gelu(s2 * u2) * v2
        expected[j3] += f1 + f2
        expected[j2] += f2
    np.testing.assert_allclose(out, expected, rtol=1e-12, atol=1e-14)


def test_ipc_leaves_pdof_0_and_1_untouched(h36m):
    rng = np.random.default_rng(3)
    p = _ipc_params(8, 2, rng)
    x, prev = rng.normal(size=(4, 17, 8)), rng.normal(size=(4, 17, 8))
    delta = ipc_forward(p, T(x), T(prev), limb_layout(h36m)).data - (x + prev)
    pdof = np.array(h36m.pdof)
    assert (delta[:, pdof <= 1] == 0).all()
    assert (np.abs(delta[:, pdof >= 2]) > 0).all()


def test_ipc_rejects_layout_without_four_limbs(h36m):
    from dataclasses import replace
    lay = replace(limb_layout(h36m), group1=limb_layout(h36m).group1[:6])
    with pytest.raises(nx.ShapeError):
        ipc_forward(_ipc_params(2, 1, None, zero=True), T(np.zeros((17, 2))), None, lay)


# ---------------------------------------------------------------------------
# body level


def _gbi_params(c, rng):
    p = {}
    for proj in ("q", "k", "v", "out"):
        p[f"w{proj}"] = rng.normal(size=(c, c))
        p[f"b{proj}"] = rng.normal(size=c)
    p["ln_scale"] = 1 + 0.1 * rng.normal(size=c)
    p["ln_shift"] = 0.1 * rng.normal(size=c)
    return {k: T(v) for k, v in p.items()}


def test_gbi_constant_logits_average_values():
    rng = np.random.default_rng(0)
    p = _gbi_params(8, rng)
    p["wq"].data[:] = 0
    p["wk"].data[:] = 0
    x = rng.normal(size=(5, 8))
    rec = []
    gbi_forward(p, T(x), None, heads=2, record=rec)
    np.testing.assert_allclose(rec[0], 0.2, rtol=1e-15)
    # the value rows are averaged, so the branch output is the same at every joint
    p["ln_scale"].data[:] = 1
    out = gbi_forward(p, T(x), None, heads=2).data - x
    np.testing.assert_allclose(out, np.broadcast_to(out[0], out.shape), atol=1e-12)


def test_gbi_single_token_attends_to_itself():
    rng = np.random.default_rng(1)
    p = _gbi_params(8, rng)
    rec = []
    x = rng.normal(size=(1, 8))
    out = gbi_forward(p, T(x), None, heads=4, record=rec).data
    assert (rec[0] == 1.0).all()
    v = x @ p["wv"].data + p["bv"].data
    msa = v @ p["wout"].data + p["bout"].data
    ln = (msa - msa.mean()) / np.sqrt(msa.var() + 1e-5) * p["ln_scale"].data + p["ln_shift"].data
    np.testing.assert_allclose(out, x + ln, rtol=1e-12)


def test_gbi_two_tokens_scalar_oracle():
    """N=2, C'=2, h=1: softmax, value mixing and layer norm by hand."""
    rng = np.random.default_rng(2)
    p = _gbi_params(2, rng)
    x = rng.normal(size=(2, 2))
    prev = rng.normal(size=(2, 2))
    out = gbi_forward(p, T(x), T(prev), heads=1).data
    W = {k: v.data for k, v in p.items()}
    xt = x + prev
    q, k, v = (xt @ W[f"w{n}"] + W[f"b{n}"] for n in "qkv")
    expected = np.zeros((2, 2))
    for i in range(2):
        logits = [sum(q[i, c] * k[j, c] for c in range(2)) / math.sqrt(2) for j in range(2)]
        z = [math.exp(l) for l in logits]
        w = [zi / sum(z) for zi in z]
        h = [w[0] * v[0, c] + w[1] * v[1, c] for c in range(2)]
        m = [h[0] * W["wout"][0, c] + h[1] * W["wout"][1, c] + W["bout"][c] for c in range(2)]
        mu = (m[0] + m[1]) / 2
        var = ((m[0] - mu) ** 2 + (m[1] - mu) ** 2) / 2
        for c in range(2):
            ln = (m[c] - mu) / math.sqrt(var + 1e-5) * W["ln_scale"][c] + W["ln_shift"][c]
            expected[i, c] = xt[i, c] + ln
    np.testing.assert_allclose(out, expected, rtol=1e-12)


# ---------------------------------------------------------------------------
# mixer and full model


def _zero_branches(params):
    for name, t in params.items():
        if not name.startswith("mixers"):
            continue
        if name.endswith("ln_scale"):
            t.data[:] = 1
        else:
            t.data[:] = 0


def _mixer(params, x, h36m):
    return mixer_forward(params, 0, T(x), limb_layout(h36m), normalized_adjacency(h36m)).data


def test_parallel_mixer_with_zero_branches_is_identity(h36m):
    p = init_params(ModelConfig(channels=24, mixers=1, structure="parallel"), 0, np.float64)
    _zero_branches(p)
    x = np.random.default_rng(0).normal(size=(2, 17, 24))
    np.testing.assert_array_equal(_mixer(p, x, h36m), x)


def test_progressive_mixer_with_zero_branches_accumulates_slices(h36m):
    p = init_params(ModelConfig(channels=24, mixers=1), 0, np.float64)
    _zero_branches(p)
    x = np.random.default_rng(0).normal(size=(2, 17, 24))
    a, b, c = x[..., :8], x[..., 8:16], x[..., 16:]
    expected = np.concatenate([a, a + b, a + b + c], axis=-1)
    np.testing.assert_allclose(_mixer(p, x, h36m), expected, rtol=1e-15)


def test_parallel_differs_from_progressive(h36m):
    x = np.random.default_rng(1).normal(size=(17, 24))
    prog = init_params(ModelConfig(channels=24, mixers=1), 5, np.float64)
    par = init_params(ModelConfig(channels=24, mixers=1, structure="parallel"), 5, np.float64)
    out_prog, out_par = _mixer(prog, x, h36m), _mixer(par, x, h36m)
    assert out_prog.shape == out_par.shape == (17, 24)
    assert not np.allclose(out_prog, out_par)


@pytest.mark.parametrize("slice_start", [0, 8, 16])
def test_mixer_output_depends_on_every_slice(h36m, slice_start):
    p = init_params(ModelConfig(channels=24, mixers=1), 0, np.float64)
    rng = np.random.default_rng(2)
    x = rng.normal(size=(17, 24))
    y = x.copy()
    y[:, slice_start:slice_start + 8] += rng.normal(size=(17, 8))
    assert not np.allclose(_mixer(p, x, h36m), _mixer(p, y, h36m))


def test_model_forward_shape_and_purity():
    p = init_params(ModelConfig(channels=48, mixers=2), seed=0)
    x = np.random.default_rng(0).normal(size=(17, 2))
    a, b = model_forward(p, x).data, model_forward(p, x).data
    assert a.shape == (17, 3)
    assert a.tobytes() == b.tobytes()
    batch = model_forward(p, np.stack([x, x])).data
    np.testing.assert_allclose(batch[0], a, rtol=1e-6)


def test_attention_rows_sum_to_one_everywhere():
    p = init_params(ModelConfig(channels=48, mixers=3), seed=1)
    rec = []
    model_forward(p, np.random.default_rng(0).normal(size=(4, 17, 2)), record=rec)
    assert len(rec) == 3
    for attn in rec:
        assert attn.shape == (4, 8, 17, 17)
        np.testing.assert_allclose(attn.sum(axis=-1), 1.0, atol=1e-6)


@pytest.mark.parametrize("structure", ["progressive", "parallel", "serial"])
def test_structure_variants_forward_and_backward(structure):
    p = init_params(ModelConfig(channels=24, mixers=2, structure=structure), seed=0)
    rng = np.random.default_rng(0)
    loss = l2_loss(model_forward(p, rng.normal(size=(3, 17, 2))), rng.normal(size=(3, 17, 3)))
    grads = nx.grad(loss, p.tensors.values())
    assert all(np.isfinite(g).all() for g in grads)
    assert all(np.abs(g).sum() > 0 for g in grads)


@pytest.mark.parametrize("blocks", [("gbi",), ("ljc",), ("ljc", "gbi"), ("ipc", "gbi"), ("ljc", "ipc")])
def test_block_ablations_run(blocks):
    p = init_params(ModelConfig(channels=24, mixers=1, blocks=blocks), seed=0)
    assert not any(f".{b}." in k for k in p for b in {"ljc", "ipc", "gbi"} - set(blocks))
    assert model_forward(p, np.zeros((17, 2))).shape == (17, 3)
