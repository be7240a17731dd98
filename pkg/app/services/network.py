"""
Two-Branch Fusion Network Service

This module assembles the network from the numerics primitives:
1. Vision and acoustic branches (three conv blocks each, eight conv layers)
2. Cross-modality attention (CMA) with a learnable residual gate
3. HCAMs fusing the branches after each block and carrying the fused map on
4. Vision, acoustic and fusion heads (BN, average pool, FC)
5. The three inference routes and the joint loss
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from app.models.network import BranchConfig, FusionStrategy, ModelConfig, Route
from app.services import numerics as nx
from app.services.errors import InvalidInputError, MissingModalityError
from app.services.numerics import Module, ShapeMismatchError, Tensor

logger = logging.getLogger(__name__)


# ============================================================================
# Custom Exceptions
# ============================================================================

class ModelConfigError(InvalidInputError):
    """Raised when an architecture cannot be built"""
    pass


# ============================================================================
# Layers
# ============================================================================

def _param(values: np.ndarray) -> Tensor:
    return Tensor(values, requires_grad=True)


class Conv2d(Module):
    """3x3 (or k x k) convolution, He-normal initialised."""

    def __init__(self, c_in: int, c_out: int, k: int, rng: np.random.Generator, padding: int = 0):
        super().__init__()
        std = np.sqrt(2.0 / (c_in * k * k))
        self.weight = _param(rng.normal(0.0, std, size=(c_out, c_in, k, k)))
        self.bias = _param(np.zeros(c_out))
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        return nx.conv2d(x, self.weight, self.bias, stride=1, padding=self.padding)


class BatchNorm2d(Module):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.gamma = _param(np.ones(channels))
        self.beta = _param(np.zeros(channels))
        self.register_buffer("running_mean", np.zeros(channels))
        self.register_buffer("running_var", np.ones(channels))
        self.momentum = momentum
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return nx.batchnorm2d(
            x, self.gamma, self.beta, self.running_mean, self.running_var,
            training=self.training, momentum=self.momentum, eps=self.eps,
        )


class LayerNorm(Module):
    def __init__(self, channels: int, eps: float = 1e-5):
        super().__init__()
        self.gamma = _param(np.ones(channels))
        self.beta = _param(np.zeros(channels))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return nx.layernorm(x, self.gamma, self.beta, eps=self.eps)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator):
        super().__init__()
        self.weight = _param(rng.normal(0.0, np.sqrt(1.0 / d_in), size=(d_in, d_out)))
        self.bias = _param(np.zeros(d_out))

    def __call__(self, x: Tensor) -> Tensor:
        return nx.linear(x, self.weight, self.bias)


# ============================================================================
# Branch
# ============================================================================

class ConvBlock(Module):
    """n x (conv 3x3 -> BN -> ReLU), then 2x2 max pool."""

    def __init__(self, c_in: int, c_out: int, n_layers: int, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__()
        self.n_layers = n_layers
        for i in range(n_layers):
            self.add_module(f"conv{i}", Conv2d(c_in if i == 0 else c_out, c_out, 3, rng, padding=1))
            self.add_module(f"bn{i}", BatchNorm2d(c_out, cfg.bn_momentum, cfg.bn_eps))

    def __call__(self, x: Tensor) -> Tensor:
        for i in range(self.n_layers):
            x = self._children[f"conv{i}"](x)
            x = nx.relu(self._children[f"bn{i}"](x))
        return nx.maxpool2d(x, 2)


class Branch(Module):
    """Three blocks; returns every block's output."""

    def __init__(self, branch: BranchConfig, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__()
        self.input_shape = branch.input_shape
        c_in = branch.input_shape[0]
        for k, (n_layers, c_out) in enumerate(zip(branch.block_layer_counts, branch.channels), start=1):
            self.add_module(f"block{k}", ConvBlock(c_in, c_out, n_layers, cfg, rng))
            c_in = c_out

    def __call__(self, x: Tensor) -> List[Tensor]:
        if tuple(x.shape[1:]) != tuple(self.input_shape):
            raise ShapeMismatchError("branch input", x.shape, (None, *self.input_shape))
        features = []
        for k in (1, 2, 3):
            x = self._children[f"block{k}"](x)
            features.append(x)
        return features


class Head(Module):
    """BN -> global average pool -> FC(1); returns one logit per sample."""

    def __init__(self, channels: int, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__()
        self.bn = BatchNorm2d(channels, cfg.bn_momentum, cfg.bn_eps)
        self.fc = Linear(channels, 1, rng)

    def __call__(self, x: Tensor) -> Tensor:
        pooled = nx.global_avgpool(self.bn(x))
        return nx.reshape(self.fc(pooled), (x.shape[0],))


# ============================================================================
# Cross-modality attention
# ============================================================================

class CMA(Module):
    """
    z_q + gamma * softmax((z_q W_Q)(z_kv W_K)^T / sqrt(d)) (z_kv W_V).

    gamma starts at 0 so a fresh model begins from the identity.
    """

    def __init__(self, d_in: int, d: int, rng: np.random.Generator):
        super().__init__()
        if d != d_in:
            raise ModelConfigError(f"CMA residual needs d == d_in, got d={d}, d_in={d_in}")
        std = np.sqrt(1.0 / d_in)
        self.w_q = _param(rng.normal(0.0, std, size=(d_in, d)))
        self.w_k = _param(rng.normal(0.0, std, size=(d_in, d)))
        self.w_v = _param(rng.normal(0.0, std, size=(d_in, d)))
        self.gamma = _param(np.zeros(1))
        self.d = d


def cma_attention(z_q: Tensor, z_kv: Tensor, p: CMA) -> Tensor:
    """Attention weights (N, queries, keys); rows sum to 1."""
    if z_q.ndim != 3 or z_kv.ndim != 3 or z_q.shape[0] != z_kv.shape[0] or z_q.shape[2] != z_kv.shape[2]:
        raise ShapeMismatchError("cma", z_q.shape, z_kv.shape)
    if z_q.shape[2] != p.w_q.shape[0]:
        raise ShapeMismatchError("cma", z_q.shape, p.w_q.shape, detail="token width vs W_Q")
    q = nx.matmul(z_q, p.w_q)
    k = nx.matmul(z_kv, p.w_k)
    scores = nx.scale(nx.matmul(q, nx.transpose(k, (0, 2, 1))), 1.0 / np.sqrt(p.d))
    return nx.softmax(scores, axis=-1)


def cma(z_q: Tensor, z_kv: Tensor, p: CMA) -> Tensor:
    """
    Residual cross-modality attention on token sets (N, positions, d_in).

    Raises:
        ShapeMismatchError: If token widths or batch sizes differ
    """
    attn = cma_attention(z_q, z_kv, p)
    v = nx.matmul(z_kv, p.w_v)
    return nx.add(z_q, nx.mul(p.gamma, nx.matmul(attn, v)))


def to_tokens(z: Tensor) -> Tensor:
    """(N, C, H, W) -> (N, H*W, C)."""
    n, c, h, w = z.shape
    return nx.transpose(nx.reshape(z, (n, c, h * w)), (0, 2, 1))


def from_tokens(t: Tensor, h: int, w: int) -> Tensor:
    """(N, H*W, C) -> (N, C, H, W)."""
    n, _, c = t.shape
    return nx.reshape(nx.transpose(t, (0, 2, 1)), (n, c, h, w))


# ============================================================================
# HCAM
# ============================================================================

def fused_channels(strategy: FusionStrategy, d: int) -> int:
    """Channels an HCAM contributes before the carry is appended."""
    return d if strategy in (FusionStrategy.AVG, FusionStrategy.RES) else 2 * d


class HCAM(Module):
    """
    Hierarchical cross-attention module.

    Each modality goes through conv 3x3 + ReLU and an adaptive max pool to
    the stage grid (z_v, z_a); the two are fused by the configured strategy
    and concatenated with the previous carry pooled to the same grid.
    """

    def __init__(
        self,
        c_vision: int,
        c_acoustic: int,
        carry_channels: int,
        grid: Tuple[int, int],
        cfg: ModelConfig,
        rng: np.random.Generator,
    ):
        super().__init__()
        d = cfg.attention_dim
        self.grid = tuple(grid)
        self.strategy = cfg.fusion
        self.carry_channels = carry_channels
        self.conv_v = Conv2d(c_vision, d, 3, rng, padding=1)
        self.conv_a = Conv2d(c_acoustic, d, 3, rng, padding=1)
        if self.strategy == FusionStrategy.CA:
            self.cma_v = CMA(d, d, rng)
            self.cma_a = CMA(d, d, rng)
        elif self.strategy == FusionStrategy.RES:
            self.mix = Conv2d(2 * d, d, 1, rng)
        elif self.strategy == FusionStrategy.WBLN:
            self.bn_v = BatchNorm2d(d, cfg.bn_momentum, cfg.bn_eps)
            self.bn_a = BatchNorm2d(d, cfg.bn_momentum, cfg.bn_eps)
            self.ln_v = LayerNorm(d, cfg.bn_eps)
            self.ln_a = LayerNorm(d, cfg.bn_eps)
            self.theta_v = _param(np.full(1, 0.5))
            self.theta_a = _param(np.full(1, 0.5))
        self.out_channels = fused_channels(self.strategy, d) + carry_channels

    def project(self, f_v: Tensor, f_a: Tensor) -> Tuple[Tensor, Tensor]:
        z_v = nx.adaptive_maxpool2d(nx.relu(self.conv_v(f_v)), self.grid)
        z_a = nx.adaptive_maxpool2d(nx.relu(self.conv_a(f_a)), self.grid)
        return z_v, z_a


def _wbln(f: Tensor, bn: BatchNorm2d, ln: LayerNorm, theta: Tensor) -> Tensor:
    """(1 - theta) * BN(f) + theta * LN(f)."""
    return nx.add(nx.mul(nx.sub(1.0, theta), bn(f)), nx.mul(theta, ln(f)))


def pool_carry(carry: Tensor, grid: Tuple[int, int]) -> Tensor:
    if tuple(carry.shape[2:]) == tuple(grid):
        return carry
    return nx.adaptive_maxpool2d(carry, grid)


def fuse_features(
    z_v: Tensor,
    z_a: Tensor,
    f_c_prev: Optional[Tensor],
    strategy: FusionStrategy,
    params: Optional[HCAM] = None,
) -> Tensor:
    """
    Merge the two projected modalities and append the carry.

    cat: [z_v, z_a]; avg: (z_v + z_a) / 2; res: z_v + Conv1x1([z_v, z_a]);
    wbln: [WBLN(z_v), WBLN(z_a)]; ca: [CMA(v <- a), CMA(a <- v)].
    The previous carry, max-pooled to the grid of z_v, is concatenated last.

    Raises:
        ShapeMismatchError: If z_v and z_a differ in shape
        ModelConfigError: If a parametrised strategy gets no parameters
    """
    if z_v.shape != z_a.shape:
        raise ShapeMismatchError("fuse_features", z_v.shape, z_a.shape)
    if strategy in (FusionStrategy.RES, FusionStrategy.WBLN, FusionStrategy.CA) and params is None:
        raise ModelConfigError(f"Fusion strategy '{strategy.value}' needs HCAM parameters")

    if strategy == FusionStrategy.CAT:
        parts = [z_v, z_a]
    elif strategy == FusionStrategy.AVG:
        parts = [nx.scale(nx.add(z_v, z_a), 0.5)]
    elif strategy == FusionStrategy.RES:
        parts = [nx.add(z_v, params.mix(nx.concat([z_v, z_a], axis=1)))]
    elif strategy == FusionStrategy.WBLN:
        parts = [
            _wbln(z_v, params.bn_v, params.ln_v, params.theta_v),
            _wbln(z_a, params.bn_a, params.ln_a, params.theta_a),
        ]
    else:
        h, w = z_v.shape[2], z_v.shape[3]
        tok_v, tok_a = to_tokens(z_v), to_tokens(z_a)
        z_v_att = from_tokens(cma(tok_v, tok_a, params.cma_v), h, w)
        z_a_att = from_tokens(cma(tok_a, tok_v, params.cma_a), h, w)
        parts = [z_v_att, z_a_att]

    if f_c_prev is not None:
        if f_c_prev.shape[0] != z_v.shape[0]:
            raise ShapeMismatchError("fuse_features", z_v.shape, f_c_prev.shape, detail="carry batch")
        parts.append(pool_carry(f_c_prev, z_v.shape[2:]))
    return nx.concat(parts, axis=1)


def hcam_forward(f_v: Tensor, f_a: Tensor, f_c_prev: Optional[Tensor], p: HCAM) -> Tensor:
    """Project both block features, fuse them and append the carry; returns f_c."""
    if f_v.shape[0] != f_a.shape[0]:
        raise ShapeMismatchError("hcam_forward", f_v.shape, f_a.shape, detail="batch sizes")
    if (f_c_prev is None) != (p.carry_channels == 0):
        raise ShapeMismatchError(
            "hcam_forward", detail=f"carry expected with {p.carry_channels} channels"
        )
    z_v, z_a = p.project(f_v, f_a)
    return fuse_features(z_v, z_a, f_c_prev, p.strategy, p)


# ============================================================================
# Model
# ============================================================================

@dataclass
class ModelOutput:
    """Logits per head, shape (N,); heads the route did not run are None."""
    logit_v: Optional[Tensor] = None
    logit_a: Optional[Tensor] = None
    logit_f: Optional[Tensor] = None
    features: Dict[str, Tensor] = field(default_factory=dict)

    def logits(self) -> Dict[str, Tensor]:
        heads = {"vision": self.logit_v, "acoustic": self.logit_a, "fusion": self.logit_f}
        return {k: v for k, v in heads.items() if v is not None}

    def scores(self) -> Dict[str, np.ndarray]:
        """Sigmoid of every available logit."""
        return {k: nx.sigmoid(v).data for k, v in self.logits().items()}


class M3FASModel(Module):
    """Vision branch, acoustic branch, HCAMs and the three heads."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__()
        self.config = cfg
        vision, acoustic = cfg.vision_branch(), cfg.acoustic_branch()
        self.vision = Branch(vision, cfg, rng)
        self.acoustic = Branch(acoustic, cfg, rng)
        self.head_v = Head(vision.channels[-1], cfg, rng)
        self.head_a = Head(acoustic.channels[-1], cfg, rng)

        self.stages = tuple(cfg.hcam_stages)
        carry = 0
        for k in self.stages:
            hcam = HCAM(
                vision.channels[k - 1], acoustic.channels[k - 1], carry, cfg.hcam_grids[k - 1], cfg, rng
            )
            self.add_module(f"hcam{k}", hcam)
            carry = hcam.out_channels
        self.head_f = Head(carry, cfg, rng)

    def hcams(self) -> List[HCAM]:
        return [self._children[f"hcam{k}"] for k in self.stages]

    def route_parameters(self, route: Route) -> Dict[str, Tensor]:
        """Parameters a route's loss can reach."""
        if route == Route.VISION:
            prefixes = ("vision.", "head_v.")
        elif route == Route.ACOUSTIC:
            prefixes = ("acoustic.", "head_a.")
        else:
            return self.parameters()
        return {n: p for n, p in self.named_parameters() if n.startswith(prefixes)}

    def __call__(
        self,
        image: Optional[Tensor],
        spectrogram: Optional[Tensor],
        route: Route = Route.FUSION,
    ) -> ModelOutput:
        return model_forward(self, image, spectrogram, route)


def model_forward(
    model: M3FASModel,
    image: Optional[Tensor],
    spectrogram: Optional[Tensor],
    route: Route = Route.FUSION,
) -> ModelOutput:
    """
    Run the heads a route needs.

    vision: image only, vision head. acoustic: spectrogram only, acoustic
    head. fusion: both inputs, all three heads.

    Raises:
        MissingModalityError: If the route's input is absent
        ShapeMismatchError: If an input does not match the configured shape
    """
    out = ModelOutput()
    if route in (Route.VISION, Route.FUSION) and image is None:
        raise MissingModalityError(route.value, "image")
    if route in (Route.ACOUSTIC, Route.FUSION) and spectrogram is None:
        raise MissingModalityError(route.value, "acoustic")

    if route in (Route.VISION, Route.FUSION):
        f_v = model.vision(image)
        out.logit_v = model.head_v(f_v[-1])
    if route in (Route.ACOUSTIC, Route.FUSION):
        f_a = model.acoustic(spectrogram)
        out.logit_a = model.head_a(f_a[-1])
    if route == Route.FUSION:
        if image.shape[0] != spectrogram.shape[0]:
            raise ShapeMismatchError("model_forward", image.shape, spectrogram.shape, detail="batch sizes")
        carry = None
        for k, hcam in zip(model.stages, model.hcams()):
            carry = hcam_forward(f_v[k - 1], f_a[k - 1], carry, hcam)
            out.features[f"f_c{k}"] = carry
        out.logit_f = model.head_f(carry)
    return out


def build_model(cfg: ModelConfig, seed: int = 0) -> M3FASModel:
    """
    Initialise a model deterministically from seed.

    Raises:
        ModelConfigError: If the configuration cannot be assembled
    """
    model = M3FASModel(cfg, np.random.default_rng(seed))
    n_params = int(np.sum([p.size for _, p in model.named_parameters()]))
    logger.info(
        "Built model: fusion=%s, stages=%s, %d parameters", cfg.fusion.value, cfg.hcam_stages, n_params
    )
    return model


# ============================================================================
# Loss
# ============================================================================

def combine_losses(l_f: Tensor, l_v: Tensor, l_a: Tensor, alpha: float) -> Tensor:
    """L_f + alpha * (L_v + L_a)."""
    return nx.add(l_f, nx.scale(nx.add(l_v, l_a), alpha))


def loss_terms(out: ModelOutput, labels: Sequence[float]) -> Dict[str, Tensor]:
    """BCE of every head present in out."""
    return {head: nx.bce_loss(logit, labels) for head, logit in out.logits().items()}


def total_loss(out: ModelOutput, labels: Sequence[float], alpha: float = 0.5) -> Tensor:
    """
    Joint objective over the three heads.

    Raises:
        ShapeMismatchError: If a head is missing (fusion route required)
    """
    if out.logit_f is None or out.logit_v is None or out.logit_a is None:
        raise ShapeMismatchError("total_loss", detail="all three logits are required")
    terms = loss_terms(out, labels)
    return combine_losses(terms["fusion"], terms["vision"], terms["acoustic"], alpha)
