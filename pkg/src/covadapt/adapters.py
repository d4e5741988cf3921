"""Covariate injection blocks and their composition with a pretrained backbone.

Two residual adapters are provided:

* the input block adjusts each token embedding with the covariate observed at
  the same position (the past covariate for the next prediction), and
* the output block adjusts the next-token logits with the covariate of the
  step being predicted (the future covariate).

Both share one shape: project the pretrained surface and the covariate with
independent linear maps, concatenate, ReLU, then an FFN whose output is added
back to the surface. Ablations swap that pre-FFN stage (see ``Arch``).
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from enum import Enum

import numpy as np

from . import backbone as bb
from .nn import FfnParams, Params, RngStream, ShapeError, batched_cross_entropy, ffn_backward, ffn_forward, init_ffn, linear_init, softmax


class ConfigurationError(ValueError):
    """The requested variant cannot be built or run with the given parameters."""


class AdapterVariant(str, Enum):
    NONE = "NONE"  # backbone alone: zero-shot, or full fine-tuning without covariates
    IIB_OIB = "IIB_OIB"
    IIB_only = "IIB_only"
    OIB_only = "OIB_only"
    FF_IIB_OIB = "FF_IIB_OIB"
    FF_IIB = "FF_IIB"
    FF_OIB = "FF_OIB"
    NC = "NC"
    FF_NC = "FF_NC"
    RS = "RS"
    HS = "HS"
    OL = "OL"
    NL = "NL"
    NL_NR = "NL_NR"
    POINT_OIB = "POINT_OIB"

    @property
    def full_finetune(self) -> bool:
        return self.name.startswith("FF_")

    @property
    def has_iib(self) -> bool:
        return self in _IIB_VARIANTS

    @property
    def oib_kind(self) -> str | None:
        """``"ffn"`` for FFN output blocks, ``"rs"`` for the linear residual, else None."""
        if self is AdapterVariant.RS:
            return "rs"
        if self in _OIB_VARIANTS:
            return "ffn"
        return None

    @property
    def arch(self) -> "Arch":
        return _ARCH.get(self, Arch.LINEAR2)


class Arch(str, Enum):
    LINEAR2 = "linear2"  # ReLU(base W_b ⊕ cov W_c)
    NO_COV = "no_cov"  # ReLU(base W_b)
    ONE_LINEAR = "one_linear"  # ReLU((base ⊕ cov) W)
    NO_LINEAR = "no_linear"  # ReLU(base ⊕ cov)
    NO_LINEAR_NO_RELU = "no_linear_no_relu"  # base ⊕ cov
    POINT = "point"  # ReLU(base W_b ⊕ cov W_c ⊕ zhat W_p)


V = AdapterVariant
_IIB_VARIANTS = {V.IIB_OIB, V.IIB_only, V.FF_IIB_OIB, V.FF_IIB, V.NC, V.FF_NC, V.OL, V.NL, V.NL_NR}
_OIB_VARIANTS = {V.IIB_OIB, V.OIB_only, V.FF_IIB_OIB, V.FF_OIB, V.NC, V.FF_NC, V.HS, V.OL, V.NL, V.NL_NR, V.POINT_OIB}
_ARCH = {
    V.NC: Arch.NO_COV,
    V.FF_NC: Arch.NO_COV,
    V.HS: Arch.NO_COV,
    V.OL: Arch.ONE_LINEAR,
    V.NL: Arch.NO_LINEAR,
    V.NL_NR: Arch.NO_LINEAR_NO_RELU,
    V.POINT_OIB: Arch.POINT,
}
del V


@dataclass(frozen=True)
class AdapterHyper:
    hidden: int = 256
    cov_dim: int = 1


# ----------------------------------------------------------------------
# Generic injection block
# ----------------------------------------------------------------------


def _concat(*parts):
    return np.concatenate(parts, axis=-1)


def init_block(arch: Arch, prefix: str, base_dim: int, cov_dim: int, out_dim: int, hidden: int, rng: RngStream) -> Params:
    p: Params = {}
    if arch in (Arch.LINEAR2, Arch.NO_COV, Arch.POINT):
        p[prefix + "w_base"] = linear_init(base_dim, hidden, rng)
        width = hidden
        if arch is not Arch.NO_COV:
            p[prefix + "w_cov"] = linear_init(cov_dim, hidden, rng)
            width += hidden
        if arch is Arch.POINT:
            p[prefix + "w_point"] = linear_init(1, hidden, rng)
            width += hidden
    elif arch is Arch.ONE_LINEAR:
        p[prefix + "w_ol"] = linear_init(base_dim + cov_dim, 2 * hidden, rng)
        width = 2 * hidden
    else:
        width = base_dim + cov_dim
    p.update(init_ffn(width, hidden, out_dim, rng, zero_last=True).as_dict(prefix + "ffn."))
    return p


def block_forward(arch: Arch, p: Params, prefix: str, base: np.ndarray, cov: np.ndarray | None, point: np.ndarray | None = None):
    """Residual term ``g`` of an injection block plus a backward cache."""
    if arch is Arch.LINEAR2:
        pre = _concat(base @ p[prefix + "w_base"], cov @ p[prefix + "w_cov"])
    elif arch is Arch.NO_COV:
        pre = base @ p[prefix + "w_base"]
    elif arch is Arch.POINT:
        pre = _concat(base @ p[prefix + "w_base"], cov @ p[prefix + "w_cov"], point @ p[prefix + "w_point"])
    elif arch is Arch.ONE_LINEAR:
        pre = _concat(base, cov) @ p[prefix + "w_ol"]
    else:
        pre = _concat(base, cov)
    z = pre if arch is Arch.NO_LINEAR_NO_RELU else np.maximum(0.0, pre)
    ffn = FfnParams.from_dict(p, prefix + "ffn.")
    g = ffn_forward(z, ffn)
    return g, (arch, base, cov, point, pre, z)


def block_backward(p: Params, prefix: str, dg: np.ndarray, cache) -> tuple[np.ndarray, np.ndarray | None, np.ndarray | None, Params]:
    """Returns ``(d_base, d_cov, d_point, grads)`` for the block's residual term."""
    arch, base, cov, point, pre, z = cache
    ffn = FfnParams.from_dict(p, prefix + "ffn.")
    dz, gffn = ffn_backward(z, ffn, dg)
    grads = gffn.as_dict(prefix + "ffn.")
    dpre = dz if arch is Arch.NO_LINEAR_NO_RELU else dz * (pre > 0)
    d_cov = d_point = None
    if arch in (Arch.LINEAR2, Arch.NO_COV, Arch.POINT):
        h = p[prefix + "w_base"].shape[1]
        d_b = dpre[..., :h]
        grads[prefix + "w_base"] = bb._outer_sum(base, d_b)
        d_base = d_b @ p[prefix + "w_base"].T
        if arch is not Arch.NO_COV:
            d_c = dpre[..., h : 2 * h]
            grads[prefix + "w_cov"] = bb._outer_sum(cov, d_c)
            d_cov = d_c @ p[prefix + "w_cov"].T
        if arch is Arch.POINT:
            d_p = dpre[..., 2 * h :]
            grads[prefix + "w_point"] = bb._outer_sum(point, d_p)
            d_point = d_p @ p[prefix + "w_point"].T
    else:
        if arch is Arch.ONE_LINEAR:
            grads[prefix + "w_ol"] = bb._outer_sum(_concat(base, cov), dpre)
            dcat = dpre @ p[prefix + "w_ol"].T
        else:
            dcat = dpre
        n = base.shape[-1]
        d_base, d_cov = dcat[..., :n], dcat[..., n:]
    return d_base, d_cov, d_point, grads


# ----------------------------------------------------------------------
# Standalone block operations
# ----------------------------------------------------------------------


def iib_forward(h_emb, x_past, p: Params, arch: Arch = Arch.LINEAR2) -> np.ndarray:
    """Token embedding adjusted by the past covariate: ``h_emb + g(h_emb, x_past)``."""
    h_emb = np.asarray(h_emb, dtype=np.float64)
    x_past = np.asarray(x_past, dtype=np.float64)
    _check_block(p, "iib.", arch, h_emb.shape[-1], x_past.shape[-1])
    g, _ = block_forward(arch, p, "iib.", h_emb, x_past)
    if g.shape != h_emb.shape:
        raise ShapeError(f"IIB output {g.shape} does not match embedding {h_emb.shape}")
    return h_emb + g


def oib_forward(h_out, x_future, w_out, p: Params, arch: Arch = Arch.LINEAR2) -> np.ndarray:
    """Backbone logits ``h_out W_out`` adjusted by the future covariate."""
    h_out = np.asarray(h_out, dtype=np.float64)
    x_future = np.asarray(x_future, dtype=np.float64)
    _check_block(p, "oib.", arch, h_out.shape[-1], x_future.shape[-1])
    base = h_out @ w_out
    g, _ = block_forward(arch, p, "oib.", h_out, x_future)
    if g.shape != base.shape:
        raise ShapeError(f"OIB output {g.shape} does not match logits {base.shape}")
    return base + g


def oib_point_forward(h_out, x_future, z_hat, p: Params) -> np.ndarray:
    """Point forecast ``z_hat`` adjusted from the hidden state, future covariate and itself."""
    h_out = np.asarray(h_out, dtype=np.float64)
    x_future = np.asarray(x_future, dtype=np.float64)
    z = np.asarray(z_hat, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise ValueError("point forecast must be finite")
    _check_block(p, "oib.", Arch.POINT, h_out.shape[-1], x_future.shape[-1])
    g, _ = block_forward(Arch.POINT, p, "oib.", h_out, x_future, z[..., None])
    return z + g[..., 0]


def _check_block(p: Params, prefix: str, arch: Arch, base_dim: int, cov_dim: int) -> None:
    try:
        if arch in (Arch.LINEAR2, Arch.NO_COV, Arch.POINT):
            if p[prefix + "w_base"].shape[0] != base_dim:
                raise ShapeError(f"{prefix}w_base expects width {p[prefix + 'w_base'].shape[0]}, got {base_dim}")
            if arch is not Arch.NO_COV and p[prefix + "w_cov"].shape[0] != cov_dim:
                raise ShapeError(f"{prefix}w_cov expects {p[prefix + 'w_cov'].shape[0]} covariates, got {cov_dim}")
        elif arch is Arch.ONE_LINEAR:
            if p[prefix + "w_ol"].shape[0] != base_dim + cov_dim:
                raise ShapeError(f"{prefix}w_ol expects width {p[prefix + 'w_ol'].shape[0]}")
        elif p[prefix + "ffn.w1"].shape[0] != base_dim + cov_dim:
            raise ShapeError(f"{prefix}ffn expects width {p[prefix + 'ffn.w1'].shape[0]}")
    except KeyError as exc:
        raise ConfigurationError(f"missing adapter parameter {exc.args[0]}") from None


def patch_covariates(covariates, patch_dim: int) -> np.ndarray:
    """Non-overlapping patches of a (T, c) covariate matrix, flattened to (P_n, P_d*c).

    Trailing rows are zero-padded when ``T`` is not a multiple of ``patch_dim``.
    """
    x = np.asarray(covariates, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if patch_dim < 1:
        raise ValueError("patch_dim must be positive")
    T, c = x.shape
    n = -(-T // patch_dim)
    padded = np.zeros((n * patch_dim, c))
    padded[:T] = x
    return padded.reshape(n, patch_dim * c)


# ----------------------------------------------------------------------
# Composite model
# ----------------------------------------------------------------------


@dataclass
class CompositeModel:
    backbone: Params
    config: bb.BackboneConfig
    adapter: Params
    variant: AdapterVariant
    freeze_backbone: bool
    hyper: AdapterHyper

    def copy(self) -> "CompositeModel":
        return replace(
            self,
            backbone={k: v.copy() for k, v in self.backbone.items()},
            adapter={k: v.copy() for k, v in self.adapter.items()},
        )


def attach(
    backbone: Params,
    config: bb.BackboneConfig,
    variant: AdapterVariant | str,
    hyper: AdapterHyper,
    rng: RngStream,
    freeze: bool = True,
) -> CompositeModel:
    """Wrap a backbone with freshly initialised adapters for ``variant``.

    Every residual output layer starts at zero so the composite reproduces the
    backbone exactly until trained.
    """
    variant = AdapterVariant(variant)
    d, Vs, c, h = config.d_model, config.vocab_size, hyper.cov_dim, hyper.hidden
    if backbone["tok_emb"].shape != (Vs, d) or backbone["w_out"].shape != (d, Vs):
        raise ShapeError("backbone parameters do not match its configuration")
    if c < 1 or h < 1:
        raise ShapeError("cov_dim and hidden must be positive")
    p: Params = {}
    if variant.has_iib:
        p.update(init_block(variant.arch, "iib.", d, c, d, h, rng.child(1)))
    if variant.oib_kind == "ffn":
        out = 1 if variant is AdapterVariant.POINT_OIB else Vs
        p.update(init_block(variant.arch, "oib.", d, c, out, h, rng.child(2)))
    elif variant.oib_kind == "rs":
        p["rs.w_cov"] = np.zeros((c, Vs))
    freeze = freeze and not variant.full_finetune
    return CompositeModel(dict(backbone), config, p, variant, freeze, hyper)


def parameter_count(model: CompositeModel) -> tuple[int, int]:
    """``(trainable, frozen)`` parameter counts."""
    n_ad = sum(a.size for a in model.adapter.values())
    n_bb = sum(a.size for a in model.backbone.values())
    if model.freeze_backbone:
        return int(n_ad), int(n_bb)
    return int(n_ad + n_bb), 0


def _require(model: CompositeModel, names: list[str]) -> None:
    missing = [n for n in names if n not in model.adapter]
    if missing:
        raise ConfigurationError(f"variant {model.variant.value} is missing parameters {missing}")


def composite_forward(model: CompositeModel, tokens, x_past, x_future, with_cache: bool = False, last_only: bool = False):
    """Next-token logits for every position of a (B, T) token batch.

    ``x_past[..., j, :]`` is the covariate aligned with input token ``j`` and
    ``x_future[..., j, :]`` the covariate of the value predicted at ``j``.
    With ``last_only`` only the final position's logits are returned, and
    ``x_future`` may then be given for that position alone.
    """
    v = model.variant
    bbp, ad = model.backbone, model.adapter
    tokens = np.asarray(tokens)
    e = bb.embed(bbp, tokens)
    iib_cache = None
    if v.has_iib:
        xp = np.asarray(x_past, dtype=np.float64)
        if xp.shape[:-1] != tokens.shape:
            raise ShapeError(f"past covariates {xp.shape} not aligned with tokens {tokens.shape}")
        _check_block(ad, "iib.", v.arch, e.shape[-1], xp.shape[-1])
        g, iib_cache = block_forward(v.arch, ad, "iib.", e, xp)
        e_in = e + g
    else:
        e_in = e
    if with_cache:
        if last_only:
            raise ValueError("last_only forward passes carry no backward cache")
        h, hcache = bb.forward_hidden(bbp, model.config, e_in, with_cache=True)
    else:
        h, hcache = bb.forward_hidden(bbp, model.config, e_in, last_only=last_only), None
    base = h @ bbp["w_out"]
    oib_cache = None
    kind = v.oib_kind
    xf = None
    if kind is not None and v is not AdapterVariant.POINT_OIB:
        xf = np.asarray(x_future, dtype=np.float64)
        if last_only and xf.ndim == h.ndim + 1:
            xf = xf[..., -1, :]
        if xf.shape[:-1] != h.shape[:-1]:
            raise ShapeError(f"future covariates {xf.shape} not aligned with hidden states {h.shape}")
    if kind == "ffn" and v is not AdapterVariant.POINT_OIB:
        _check_block(ad, "oib.", v.arch, h.shape[-1], xf.shape[-1])
        g, oib_cache = block_forward(v.arch, ad, "oib.", h, xf)
        lg = base + g
    elif kind == "rs":
        _require(model, ["rs.w_cov"])
        lg = base + xf @ ad["rs.w_cov"]
    else:
        lg = base
    if with_cache:
        return lg, (tokens, e, iib_cache, h, hcache, oib_cache, xf)
    return lg


def composite_backward(model: CompositeModel, dlogits: np.ndarray, cache) -> tuple[Params, Params]:
    """Gradients ``(adapter_grads, backbone_grads)``; backbone grads are empty when frozen."""
    tokens, e, iib_cache, h, hcache, oib_cache, xf = cache
    v = model.variant
    bbp, ad = model.backbone, model.adapter
    frozen = model.freeze_backbone
    ad_grads: Params = {}
    bb_grads: Params = {}
    dh = dlogits @ bbp["w_out"].T
    if not frozen:
        bb_grads["w_out"] = bb._outer_sum(h, dlogits)
    if oib_cache is not None:
        d_h, _, _, g = block_backward(ad, "oib.", dlogits, oib_cache)
        ad_grads.update(g)
        dh = dh + d_h
    elif v.oib_kind == "rs":
        ad_grads["rs.w_cov"] = bb._outer_sum(xf, dlogits)
    if v.has_iib or not frozen:
        de_in, g = bb.backward_hidden(bbp, model.config, dh, hcache, param_grads=not frozen)
        bb_grads.update(g)
        de = de_in
        if iib_cache is not None:
            d_base, _, _, g = block_backward(ad, "iib.", de_in, iib_cache)
            ad_grads.update(g)
            de = de_in + d_base
        if not frozen:
            bb_grads.update(bb.embed_backward(bbp, tokens, de))
    return ad_grads, bb_grads


def composite_loss_and_grads(model: CompositeModel, tokens, x_past, x_future, targets) -> tuple[float, Params, Params]:
    """Mean next-token cross-entropy and its gradients."""
    if model.variant is AdapterVariant.POINT_OIB:
        raise ConfigurationError("POINT_OIB is trained on point targets; use point_loss_and_grads")
    lg, cache = composite_forward(model, tokens, x_past, x_future, with_cache=True)
    loss, dlg = batched_cross_entropy(lg, targets)
    ad_grads, bb_grads = composite_backward(model, dlg, cache)
    return loss, ad_grads, bb_grads


def variant_forward(model: CompositeModel, token_context, past_covs, future_cov_step) -> np.ndarray:
    """Logits for the token following ``token_context``."""
    tokens = np.asarray(token_context)[None]
    xp = np.asarray(past_covs, dtype=np.float64)
    if xp.ndim == 1:
        xp = xp[:, None]
    xf = np.asarray(future_cov_step, dtype=np.float64).reshape(1, -1)
    return composite_forward(model, tokens, xp[None], xf, last_only=True)[0]


# ----------------------------------------------------------------------
# Point-forecast output block
# ----------------------------------------------------------------------


def expected_scaled_value(logits: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """Mean of the categorical next-value distribution in scaled units."""
    return softmax(logits) @ centers


def point_forward(model: CompositeModel, tokens, x_future, centers: np.ndarray, with_cache: bool = False):
    """Adjusted point forecasts in scaled units for every position.

    The backbone's own point forecast is the mean of its categorical output;
    the output block then corrects it from the hidden state and future covariate.
    """
    if model.variant is not AdapterVariant.POINT_OIB:
        raise ConfigurationError("point forecasts need the POINT_OIB variant")
    _require(model, ["oib.w_base", "oib.w_cov", "oib.w_point"])
    tokens = np.asarray(tokens)
    h = bb.forward_hidden(model.backbone, model.config, bb.embed(model.backbone, tokens))
    z_hat = expected_scaled_value(h @ model.backbone["w_out"], centers)
    xf = np.asarray(x_future, dtype=np.float64)
    g, cache = block_forward(Arch.POINT, model.adapter, "oib.", h, xf, z_hat[..., None])
    out = z_hat + g[..., 0]
    return (out, cache) if with_cache else out


def point_loss_and_grads(model: CompositeModel, tokens, x_future, targets, centers: np.ndarray) -> tuple[float, Params, Params]:
    """Half mean squared error of adjusted point forecasts against scaled targets."""
    out, cache = point_forward(model, tokens, x_future, centers, with_cache=True)
    diff = out - np.asarray(targets, dtype=np.float64)
    n = diff.size
    loss = 0.5 * float(np.mean(diff * diff))
    dout = (diff / n)[..., None]
    _, _, _, grads = block_backward(model.adapter, "oib.", dout, cache)
    return loss, grads, {}
