import numpy as np
import pytest

import oracles
from covadapt import adapters as A
from covadapt import backbone as bb
from covadapt import nn
from covadapt.adapters import AdapterVariant as V
from covadapt.nn import RngStream
from oracles import TINY, TRAINABLE, closed_form, tiny_instance

ALL = [v.value for v in V]


def composite_fd(model, tokens, xp, xf, targets):
    """FD error over adapter params, plus backbone params when not frozen."""

    def loss(params):
        m = model.copy()
        m.adapter = {k: params[k] for k in model.adapter}
        m.backbone = {**model.backbone, **{k[3:]: params[k] for k in params if k.startswith("bb.")}}
        l, ga, gb = A.composite_loss_and_grads(m, tokens, xp, xf, targets)
        return l, {**ga, **{"bb." + k: g for k, g in gb.items()}}

    params = dict(model.adapter)
    if not model.freeze_backbone:
        params.update({"bb." + k: a for k, a in model.backbone.items()})
    return nn.finite_difference_check(loss, params)


# ---------------------------------------------------------------- blocks


def test_iib_zero_final_layer_is_identity():
    p = A.init_block(A.Arch.LINEAR2, "iib.", 8, 2, 8, 4, RngStream(0))
    h = RngStream(1).normal(0, 1, (3, 8))
    np.testing.assert_array_equal(A.iib_forward(h, np.ones((3, 2)), p), h)


def test_iib_hand_instance():
    # d=2, c=1, hidden=1
    p = {
        "iib.w_base": np.array([[1.0], [2.0]]),
        "iib.w_cov": np.array([[-1.0]]),
        "iib.ffn.w1": np.array([[1.0], [1.0]]),
        "iib.ffn.b1": np.array([0.5]),
        "iib.ffn.w2": np.array([[2.0, -1.0]]),
        "iib.ffn.b2": np.array([0.0, 1.0]),
    }
    # base proj = 1*1 + 1*2 = 3; cov proj = -0.5 -> relu [3, 0]; hidden = 3.5; out = [7, -2.5]
    out = A.iib_forward(np.array([1.0, 1.0]), np.array([0.5]), p)
    np.testing.assert_allclose(out, [8.0, -1.5], rtol=0, atol=1e-12)


@pytest.mark.parametrize("arch", [a for a in A.Arch if a is not A.Arch.POINT])
def test_blocks_match_scalar_oracle(arch):
    rng = RngStream(7)
    p = A.init_block(arch, "oib.", 8, 2, 7, 4, rng)
    p = {k: rng.normal(0, 1, a.shape) for k, a in p.items()}
    h = rng.normal(0, 1, (5, 8))
    x = rng.normal(0, 1, (5, 2))
    w_out = rng.normal(0, 1, (8, 7))
    got = A.oib_forward(h, x, w_out, p, arch)
    for t in range(5):
        ref = np.array(oracles.matvec(h[t].tolist(), w_out.tolist())) + oracles.block(arch, p, "oib.", h[t], x[t])
        np.testing.assert_allclose(got[t], ref, rtol=1e-12, atol=1e-12)


def test_oib_zero_final_and_valid_distribution():
    rng = RngStream(2)
    p = A.init_block(A.Arch.LINEAR2, "oib.", 8, 1, 7, 4, rng)
    h, w = rng.normal(0, 1, 8), rng.normal(0, 1, (8, 7))
    np.testing.assert_array_equal(A.oib_forward(h, [3.0], w, p), h @ w)
    p = {k: rng.normal(0, 1, a.shape) for k, a in p.items()}
    assert nn.softmax(A.oib_forward(h, [3.0], w, p)).sum() == pytest.approx(1.0, abs=1e-12)


def test_point_block_zero_and_oracle():
    rng = RngStream(3)
    p = A.init_block(A.Arch.POINT, "oib.", 8, 1, 1, 4, rng)
    h = rng.normal(0, 1, 8)
    assert A.oib_point_forward(h, [1.0], 2.5, p) == 2.5
    p = {k: rng.normal(0, 1, a.shape) for k, a in p.items()}
    ref = 2.5 + oracles.block(A.Arch.POINT, p, "oib.", h, [1.0], 2.5)[0]
    assert A.oib_point_forward(h, [1.0], 2.5, p) == pytest.approx(ref, abs=1e-12)
    with pytest.raises(ValueError):
        A.oib_point_forward(h, [1.0], np.nan, p)


def test_block_shape_errors():
    p = A.init_block(A.Arch.LINEAR2, "iib.", 8, 2, 8, 4, RngStream(0))
    with pytest.raises(nn.ShapeError):
        A.iib_forward(np.ones(8), np.ones(3), p)
    with pytest.raises(nn.ShapeError):
        A.iib_forward(np.ones(5), np.ones(2), p)
    with pytest.raises(A.ConfigurationError):
        A.iib_forward(np.ones(8), np.ones(2), {})


@pytest.mark.parametrize("arch", list(A.Arch))
def test_block_gradients(arch):
    rng = RngStream(11)
    p = A.init_block(arch, "b.", 5, 2, 3, 4, rng)
    p = {k: rng.normal(0, 1, a.shape) for k, a in p.items()}
    base, cov, pt = rng.normal(0, 1, (4, 5)), rng.normal(0, 1, (4, 2)), rng.normal(0, 1, (4, 1))
    up = rng.normal(0, 1, (4, 3))

    def loss(q):
        g, cache = A.block_forward(arch, q, "b.", q["base"], q["cov"], q["pt"] if arch is A.Arch.POINT else None)
        d_base, d_cov, d_pt, grads = A.block_backward(q, "b.", up, cache)
        grads["base"] = d_base
        grads["cov"] = d_cov if d_cov is not None else np.zeros_like(q["cov"])
        grads["pt"] = d_pt if d_pt is not None else np.zeros_like(q["pt"])
        return float(np.sum(g * up)), grads

    assert nn.finite_difference_check(loss, {**p, "base": base, "cov": cov, "pt": pt}) < 1e-6


def test_one_linear_block_diagonal_equivalence():
    rng = RngStream(5)
    d, c, h = 8, 2, 4
    two = A.init_block(A.Arch.LINEAR2, "oib.", d, c, 7, h, rng)
    two = {k: rng.normal(0, 1, a.shape) for k, a in two.items()}
    w_ol = np.zeros((d + c, 2 * h))
    w_ol[:d, :h] = two["oib.w_base"]
    w_ol[d:, h:] = two["oib.w_cov"]
    one = {"oib.w_ol": w_ol, **{k: v for k, v in two.items() if ".ffn." in k}}
    hs, x, w = rng.normal(0, 1, (3, d)), rng.normal(0, 1, (3, c)), rng.normal(0, 1, (d, 7))
    np.testing.assert_allclose(
        A.oib_forward(hs, x, w, one, A.Arch.ONE_LINEAR), A.oib_forward(hs, x, w, two, A.Arch.LINEAR2), rtol=1e-13, atol=1e-13
    )


# ---------------------------------------------------------------- patching


def test_patch_identity_and_hand_cases():
    x = np.arange(6.0).reshape(3, 2)
    np.testing.assert_array_equal(A.patch_covariates(x, 1), x)
    np.testing.assert_array_equal(A.patch_covariates([1.0, 2.0, 3.0, 4.0], 2), [[1, 2], [3, 4]])
    out = A.patch_covariates(np.arange(1.0, 6.0), 2)
    assert out.shape == (3, 2)
    np.testing.assert_array_equal(out[-1], [5.0, 0.0])


@pytest.mark.parametrize("T,c,pd", [(7, 3, 3), (8, 2, 4), (1, 1, 5)])
def test_patch_shape_oracle(T, c, pd):
    x = RngStream(0).normal(0, 1, (T, c))
    out = A.patch_covariates(x, pd)
    n = -(-T // pd)
    assert out.shape == (n, pd * c)
    for i in range(n):
        for j in range(pd):
            t = i * pd + j
            np.testing.assert_array_equal(out[i, j * c : (j + 1) * c], x[t] if t < T else np.zeros(c))


# ---------------------------------------------------------------- composite


@pytest.mark.parametrize("variant", ALL)
def test_fresh_attach_is_bit_identical_to_backbone(variant):
    model, tokens, xp, xf, _ = tiny_instance(variant, 0, randomize=False)
    base = bb.logits(model.backbone, bb.forward_hidden(model.backbone, TINY, bb.embed(model.backbone, tokens)))
    if variant == "POINT_OIB":
        centers = np.linspace(-1, 1, 7)
        z = A.point_forward(model, tokens, xf, centers)
        np.testing.assert_array_equal(z, A.expected_scaled_value(base, centers))
    else:
        np.testing.assert_array_equal(A.composite_forward(model, tokens, xp, xf), base)


@pytest.mark.parametrize("variant", [v for v in ALL if v != "POINT_OIB"])
def test_composite_matches_scalar_oracle(variant):
    model, tokens, xp, xf, _ = tiny_instance(variant, 1)
    got = A.composite_forward(model, tokens, xp, xf)
    for b in range(tokens.shape[0]):
        np.testing.assert_allclose(got[b], oracles.composite_logits(model, tokens[b], xp[b], xf[b]), rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("variant", TRAINABLE)
def test_composite_gradients(variant):
    model, tokens, xp, xf, targets = tiny_instance(variant, 2)
    assert composite_fd(model, tokens, xp, xf, targets) < 1e-5


def test_point_gradients():
    model, tokens, _, xf, _ = tiny_instance("POINT_OIB", 4)
    centers = np.linspace(-2, 2, 7)
    targets = RngStream(9).normal(0, 1, tokens.shape)

    def loss(p):
        m = model.copy()
        m.adapter = p
        l, g, _ = A.point_loss_and_grads(m, tokens, xf, targets, centers)
        return l, g

    assert nn.finite_difference_check(loss, model.adapter) < 1e-5


@pytest.mark.parametrize("variant", ["NC", "HS", "NONE", "FF_NC"])
def test_covariate_blind_variants(variant):
    model, tokens, xp, xf, _ = tiny_instance(variant, 3)
    a = A.composite_forward(model, tokens, xp, xf)
    b = A.composite_forward(model, tokens, xp * 5 + 1, xf - 3)
    np.testing.assert_array_equal(a, b)


def test_rs_zero_matrix_gives_backbone_logits():
    model, tokens, xp, xf, _ = tiny_instance("RS", 0, randomize=False)
    assert not model.adapter["rs.w_cov"].any()
    base = A.composite_forward(A.attach(model.backbone, TINY, "NONE", model.hyper, RngStream(0)), tokens, xp, xf)
    np.testing.assert_array_equal(A.composite_forward(model, tokens, xp, xf), base)


def test_oib_touches_only_aligned_step():
    model, tokens, xp, xf, _ = tiny_instance("OIB_only", 5)
    a = A.composite_forward(model, tokens, xp, xf)
    xf2 = xf.copy()
    xf2[:, 3] += 1.0
    b = A.composite_forward(model, tokens, xp, xf2)
    changed = np.any(a != b, axis=(0, 2))
    assert changed.tolist() == [t == 3 for t in range(TINY.context_length)]


def test_iib_is_causal_in_past_covariates():
    model, tokens, xp, xf, _ = tiny_instance("IIB_only", 6)
    a = A.composite_forward(model, tokens, xp, xf)
    xp2 = xp.copy()
    xp2[:, 3] += 1.0
    b = A.composite_forward(model, tokens, xp2, xf)
    np.testing.assert_array_equal(a[:, :3], b[:, :3])
    assert np.any(a[:, 3] != b[:, 3])


def test_variant_forward_is_last_step():
    model, tokens, xp, xf, _ = tiny_instance("IIB_OIB", 7)
    full = A.composite_forward(model, tokens[:1], xp[:1], xf[:1])
    step = A.variant_forward(model, tokens[0], xp[0], xf[0, -1])
    np.testing.assert_allclose(step, full[0, -1], rtol=1e-12, atol=1e-12)


def test_missing_params_is_configuration_error():
    model, tokens, xp, xf, _ = tiny_instance("IIB_OIB", 0)
    model.adapter = {k: v for k, v in model.adapter.items() if not k.startswith("oib.")}
    with pytest.raises(A.ConfigurationError):
        A.composite_forward(model, tokens, xp, xf)


def test_attach_dimension_mismatch():
    p = bb.init_backbone(TINY, RngStream(0))
    other = bb.BackboneConfig(d_model=16, n_layers=1, n_heads=2, context_length=6, vocab_size=7, horizon=2)
    with pytest.raises(nn.ShapeError):
        A.attach(p, other, "IIB_OIB", A.AdapterHyper(4, 1), RngStream(0))


def test_freeze_gives_no_backbone_grads_and_ff_forces_unfrozen():
    model, tokens, xp, xf, targets = tiny_instance("IIB_OIB", 0)
    _, ga, gb = A.composite_loss_and_grads(model, tokens, xp, xf, targets)
    assert model.freeze_backbone and gb == {} and ga
    ff = A.attach(model.backbone, TINY, "FF_IIB_OIB", model.hyper, RngStream(0), freeze=True)
    assert not ff.freeze_backbone
    _, _, gb = A.composite_loss_and_grads(ff, tokens, xp, xf, targets)
    assert set(gb) == set(model.backbone)


# ---------------------------------------------------------------- parameter counts


@pytest.mark.parametrize("variant", ALL)
def test_parameter_count_closed_form(variant):
    cfg = bb.BackboneConfig(d_model=16, n_layers=2, n_heads=2, context_length=10, vocab_size=300, horizon=4)
    p = bb.init_backbone(cfg, RngStream(0))
    n_bb = bb.parameter_count(p)
    # closed-form backbone count: embeddings, per-layer attention + MLP + norms, final norm, output
    d, L, Vs, T, m = 16, 2, 300, 10, 4 * 16
    assert n_bb == Vs * d + T * d + L * (4 * (d * d + d) + 4 * d + d * m + m + m * d + d) + 2 * d + d * Vs
    model = A.attach(p, cfg, variant, A.AdapterHyper(hidden=8, cov_dim=3), RngStream(1))
    trainable, frozen = A.parameter_count(model)
    assert trainable == closed_form(variant, 16, 3, 8, 300, n_bb)
    assert trainable + frozen == n_bb + sum(a.size for a in model.adapter.values())
