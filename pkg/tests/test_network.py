"""Tests for the two-branch network: attention, HCAM fusion, routes and the joint loss."""

import numpy as np
import pytest

from app.models.network import FusionStrategy, Route
from app.services import numerics as nx
from app.services.errors import MissingModalityError
from app.services.network import (
    CMA,
    HCAM,
    ModelConfigError,
    build_model,
    cma,
    cma_attention,
    combine_losses,
    fuse_features,
    hcam_forward,
    total_loss,
)
from app.services.numerics import ShapeMismatchError, Tape, Tensor, backward, gradient_check
from tests.conftest import tiny_model_config


def inputs(rng, n: int = 3):
    image = Tensor(rng.uniform(0.0, 1.0, size=(n, 3, 16, 16)))
    spec = Tensor(rng.uniform(0.0, 1.0, size=(n, 1, 33, 30)))
    return image, spec


# ============================================================================
# Cross-modality attention
# ============================================================================

def test_cma_with_zero_gate_is_identity(rng):
    p = CMA(8, 8, rng)
    z_q, z_kv = Tensor(rng.standard_normal((2, 4, 8))), Tensor(rng.standard_normal((2, 5, 8)))
    assert np.array_equal(cma(z_q, z_kv, p).data, z_q.data)


def test_cma_with_a_single_key_adds_its_value(rng):
    p = CMA(8, 8, rng)
    p.gamma.data[:] = 0.7
    z_q, z_kv = Tensor(rng.standard_normal((2, 4, 8))), Tensor(rng.standard_normal((2, 1, 8)))
    expected = z_q.data + 0.7 * (z_kv.data @ p.w_v.data)
    assert np.allclose(cma(z_q, z_kv, p).data, expected, atol=1e-12)


def test_attention_rows_sum_to_one(rng):
    p = CMA(8, 8, rng)
    attn = cma_attention(Tensor(rng.standard_normal((3, 4, 8))), Tensor(rng.standard_normal((3, 6, 8))), p)
    assert attn.shape == (3, 4, 6)
    assert np.allclose(attn.data.sum(axis=-1), 1.0)
    assert np.all(attn.data >= 0)


def test_cma_gradient(rng):
    p = CMA(4, 4, rng)
    p.gamma.data[:] = 0.5
    z_q = Tensor(rng.standard_normal((2, 3, 4)), requires_grad=True)
    z_kv = Tensor(rng.standard_normal((2, 5, 4)), requires_grad=True)
    w = rng.standard_normal((2, 3, 4))
    fn = lambda: nx.sum(nx.mul(cma(z_q, z_kv, p), Tensor(w)))  # noqa: E731
    assert gradient_check(fn, [z_q, z_kv, p.w_q, p.w_k, p.w_v, p.gamma]) <= 1e-6


def test_cma_rejects_mismatched_tokens(rng):
    p = CMA(8, 8, rng)
    with pytest.raises(ShapeMismatchError):
        cma(Tensor(np.zeros((2, 4, 8))), Tensor(np.zeros((2, 4, 6))), p)
    with pytest.raises(ShapeMismatchError):
        cma(Tensor(np.zeros((2, 4, 8))), Tensor(np.zeros((3, 4, 8))), p)
    with pytest.raises(ModelConfigError):
        CMA(8, 4, rng)


# ============================================================================
# HCAM fusion
# ============================================================================

def make_hcam(rng, strategy: FusionStrategy, carry: int = 0) -> HCAM:
    cfg = tiny_model_config(fusion=strategy)
    return HCAM(4, 6, carry, (2, 2), cfg, rng)


def test_fresh_ca_hcam_is_plain_concatenation(rng):
    hcam = make_hcam(rng, FusionStrategy.CA)
    f_v, f_a = Tensor(rng.standard_normal((2, 4, 8, 8))), Tensor(rng.standard_normal((2, 6, 8, 7)))
    z_v, z_a = hcam.project(f_v, f_a)
    fused = hcam_forward(f_v, f_a, None, hcam)
    assert fused.shape == (2, 16, 2, 2)
    assert np.array_equal(fused.data, np.concatenate([z_v.data, z_a.data], axis=1))


def test_wbln_with_zero_theta_is_batchnorm(rng):
    hcam = make_hcam(rng, FusionStrategy.WBLN).eval()
    hcam.theta_v.data[:] = 0.0
    hcam.theta_a.data[:] = 0.0
    z_v, z_a = Tensor(rng.standard_normal((2, 8, 2, 2))), Tensor(rng.standard_normal((2, 8, 2, 2)))
    fused = fuse_features(z_v, z_a, None, FusionStrategy.WBLN, hcam)
    expected = np.concatenate([hcam.bn_v(z_v).data, hcam.bn_a(z_a).data], axis=1)
    assert np.allclose(fused.data, expected, atol=1e-12)


def test_parameter_free_strategies(rng):
    z_v, z_a = Tensor(rng.standard_normal((2, 8, 2, 2))), Tensor(rng.standard_normal((2, 8, 2, 2)))
    avg = fuse_features(z_v, z_a, None, FusionStrategy.AVG)
    assert np.allclose(avg.data, (z_v.data + z_a.data) / 2)
    cat = fuse_features(z_v, z_a, None, FusionStrategy.CAT)
    assert cat.shape == (2, 16, 2, 2)


def test_carry_is_pooled_and_appended_last(rng):
    z_v, z_a = Tensor(rng.standard_normal((1, 8, 2, 2))), Tensor(rng.standard_normal((1, 8, 2, 2)))
    carry = Tensor(rng.standard_normal((1, 5, 4, 4)))
    fused = fuse_features(z_v, z_a, carry, FusionStrategy.CAT)
    assert fused.shape == (1, 21, 2, 2)
    assert np.allclose(fused.data[:, 16:], nx.adaptive_maxpool2d(carry, (2, 2)).data)


def test_fusion_errors(rng):
    z = Tensor(np.zeros((1, 8, 2, 2)))
    with pytest.raises(ModelConfigError):
        fuse_features(z, z, None, FusionStrategy.CA)
    with pytest.raises(ShapeMismatchError):
        fuse_features(z, Tensor(np.zeros((1, 8, 1, 1))), None, FusionStrategy.CAT)
    hcam = make_hcam(rng, FusionStrategy.CAT, carry=4)
    with pytest.raises(ShapeMismatchError):
        hcam_forward(Tensor(np.zeros((1, 4, 8, 8))), Tensor(np.zeros((1, 6, 8, 8))), None, hcam)


# ============================================================================
# Model and routes
# ============================================================================

@pytest.mark.parametrize("strategy", list(FusionStrategy))
@pytest.mark.parametrize("stages", [(3,), (2, 3), (1, 2, 3)])
def test_every_strategy_and_stage_set_runs(rng, strategy, stages):
    model = build_model(tiny_model_config(fusion=strategy, hcam_stages=stages), seed=0)
    image, spec = inputs(rng, 2)
    out = model(image, spec, Route.FUSION)
    assert set(out.logits()) == {"vision", "acoustic", "fusion"}
    assert out.logit_f.shape == (2,)
    assert set(out.features) == {f"f_c{k}" for k in stages}
    for scores in out.scores().values():
        assert np.all((scores > 0) & (scores < 1))


def test_routes_need_their_modalities(model_cfg, rng):
    model = build_model(model_cfg, seed=0)
    image, spec = inputs(rng)
    with pytest.raises(MissingModalityError) as info:
        model(image, None, Route.FUSION)
    assert info.value.modality == "acoustic"
    with pytest.raises(MissingModalityError) as info:
        model(None, spec, Route.VISION)
    assert info.value.modality == "image"
    assert set(model(None, spec, Route.ACOUSTIC).logits()) == {"acoustic"}
    with pytest.raises(ShapeMismatchError):
        model(Tensor(np.zeros((1, 3, 8, 8))), None, Route.VISION)


def test_vision_route_matches_fusion_vision_head(model_cfg, rng):
    model = build_model(model_cfg, seed=0).eval()
    image, spec = inputs(rng)
    alone = model(image, None, Route.VISION).logit_v.data
    fused = model(image, spec, Route.FUSION).logit_v.data
    assert np.array_equal(alone, fused)


def test_eval_scores_do_not_depend_on_the_batch(model_cfg, rng):
    model = build_model(model_cfg, seed=0).eval()
    image, spec = inputs(rng, 3)
    batch = model(image, spec).logit_f.data
    single = model(Tensor(image.data[1:2]), Tensor(spec.data[1:2])).logit_f.data
    assert single[0] == pytest.approx(batch[1], abs=1e-10)


def test_build_is_deterministic(model_cfg):
    a, b = build_model(model_cfg, seed=3), build_model(model_cfg, seed=3)
    c = build_model(model_cfg, seed=4)
    state_a, state_b, state_c = a.state_dict(), b.state_dict(), c.state_dict()
    assert list(state_a) == list(state_b)
    assert all(np.array_equal(state_a[k], state_b[k]) for k in state_a)
    assert any(not np.array_equal(state_a[k], state_c[k]) for k in state_a)


def test_route_parameters(model_cfg):
    model = build_model(model_cfg, seed=0)
    vision = model.route_parameters(Route.VISION)
    assert vision and all(n.startswith(("vision.", "head_v.")) for n in vision)
    acoustic = model.route_parameters(Route.ACOUSTIC)
    assert acoustic and all(n.startswith(("acoustic.", "head_a.")) for n in acoustic)
    assert len(model.route_parameters(Route.FUSION)) == len(model.parameters())


# ============================================================================
# Joint loss
# ============================================================================

def test_combine_losses_algebra():
    value = combine_losses(Tensor(0.6), Tensor(0.4), Tensor(0.2), 0.5)
    assert value.item() == pytest.approx(0.9)


def joint_grads(model, image, spec, labels, alpha):
    model.zero_grad()
    with Tape():
        loss = total_loss(model(image, spec), labels, alpha)
    backward(loss)
    return {n: p.grad.copy() for n, p in model.named_parameters()}


def test_joint_gradient_is_linear_in_alpha(model_cfg, rng):
    model = build_model(model_cfg, seed=0)
    image, spec = inputs(rng, 4)
    labels = [0, 1, 1, 0]
    g0, g1, g2 = (joint_grads(model, image, spec, labels, a) for a in (0.0, 1.0, 2.0))
    for name in g0:
        assert np.allclose(g2[name] - g1[name], g1[name] - g0[name], atol=1e-9)
    assert all(not g0[n].any() for n in g0 if n.startswith("head_v."))
    assert any(g1[n].any() for n in g1 if n.startswith("head_v."))


def test_total_loss_needs_all_heads(model_cfg, rng):
    model = build_model(model_cfg, seed=0)
    image, _ = inputs(rng)
    with pytest.raises(ShapeMismatchError):
        total_loss(model(image, None, Route.VISION), [0, 1, 0])


def test_composed_model_gradient(model_cfg, rng):
    model = build_model(model_cfg, seed=0).eval()
    hcam = model.hcams()[0]
    hcam.cma_v.gamma.data[:] = 0.3
    image, spec = inputs(rng, 2)
    params = model.parameters()
    checked = [
        params["head_f.fc.weight"],
        params["hcam1.cma_v.w_q"],
        params["hcam1.conv_v.weight"],
        params["acoustic.block1.conv0.weight"],
    ]
    fn = lambda: total_loss(model(image, spec), [0, 1], 0.5)  # noqa: E731
    assert gradient_check(fn, checked, max_coords=6) <= 1e-4
