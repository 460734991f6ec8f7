"""Prior-aware cumulative-hazard model.

A shared encoder maps an exam's feature vector to a small token map. The
current exam's pooled feature queries the prior exam's tokens through
multi-head cross-attention; the attended comparison feature is concatenated
with the current feature and fed to an additive hazard head

    H(t | x) = sigmoid(base(x) + sum_{tau <= t} softplus(u_tau(x)))

which is monotone in ``t`` and lies strictly inside (0, 1). Gradients are
computed by hand (reverse mode) for every parameter.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from scipy.special import expit

from .core import ConfigError, DataError, ExamRecord, LabelPair, MissingPriorError, NumericError

VARIANTS = ("baseline", "rp_plus", "prime")
ACTIVATIONS = ("tanh", "relu", "identity")
CHECKPOINT_MAGIC = "PRIORRISK-CHECKPOINT"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    feature_dim: int = 32
    d_model: int = 16
    n_heads: int = 2
    n_tokens: int = 4
    horizon: int = 5
    encoder_hidden: tuple[int, ...] = ()
    activation: str = "tanh"
    variant: str = "prime"

    def __post_init__(self):
        object.__setattr__(self, "encoder_hidden", tuple(self.encoder_hidden))
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        if self.d_model % self.n_heads:
            raise ConfigError("d_model must equal n_heads * d_head")
        for name in ("feature_dim", "d_model", "n_heads", "n_tokens", "horizon"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    @property
    def d_fused(self) -> int:
        return 2 * self.d_model

    def encoder_sizes(self) -> list[int]:
        return [self.feature_dim, *self.encoder_hidden, self.n_tokens * self.d_model]


class ModelParams:
    """Named float64 arrays plus the config that fixes their shapes."""

    def __init__(self, config: ModelConfig, arrays: dict[str, np.ndarray]):
        self.config = config
        self.arrays = {k: np.asarray(v, dtype=np.float64) for k, v in arrays.items()}
        expected = param_shapes(config)
        if list(self.arrays) != list(expected):
            raise ConfigError(f"parameter names {list(self.arrays)} do not match {list(expected)}")
        for name, shape in expected.items():
            if self.arrays[name].shape != shape:
                raise ConfigError(f"{name}: shape {self.arrays[name].shape}, expected {shape}")

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.arrays)

    def items(self):
        return self.arrays.items()

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.arrays.items()})

    def zeros_like(self) -> "ModelParams":
        return ModelParams(self.config, {k: np.zeros_like(v) for k, v in self.arrays.items()})

    def flat(self) -> np.ndarray:
        return np.concatenate([v.ravel() for v in self.arrays.values()])

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.arrays.values())

    def diagnostics(self) -> str:
        return ", ".join(
            f"{k}: max|w|={np.max(np.abs(v)):.3g}" + ("" if np.all(np.isfinite(v)) else " (non-finite)")
            for k, v in self.arrays.items()
        )

    def __eq__(self, other):
        if not isinstance(other, ModelParams):
            return NotImplemented
        return self.config == other.config and all(
            np.array_equal(self.arrays[k], other.arrays[k]) for k in self.arrays
        )

    __hash__ = None


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}
    sizes = cfg.encoder_sizes()
    for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        shapes[f"enc.{i}.W"] = (n_in, n_out)
        shapes[f"enc.{i}.b"] = (n_out,)
    H, dm, dh = cfg.n_heads, cfg.d_model, cfg.d_head
    shapes["attn.W_Q"] = (H, dm, dh)
    shapes["attn.W_K"] = (H, dm, dh)
    shapes["attn.W_V"] = (H, dm, dh)
    shapes["attn.W_O"] = (H * dh, dm)
    shapes["attn.W_P"] = (dm, dm)
    shapes["attn.b_P"] = (dm,)
    shapes["base.w"] = (cfg.d_fused,)
    shapes["base.b"] = (1,)
    shapes["time.W"] = (cfg.d_fused, cfg.horizon)
    shapes["time.b"] = (cfg.horizon,)
    return shapes


def init_params(cfg: ModelConfig, seed: int = 0) -> ModelParams:
    """Scaled-normal weights, zero biases, small hazard head."""
    rng = np.random.default_rng(seed)
    arrays = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".b") or name == "attn.b_P":
            arrays[name] = np.zeros(shape)
        elif name.startswith("attn.W_"):
            fan_in = shape[-2]
            arrays[name] = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=shape)
        elif name.startswith("enc."):
            arrays[name] = rng.normal(0.0, 1.0 / np.sqrt(shape[0]), size=shape)
        else:
            arrays[name] = rng.normal(0.0, 0.1 / np.sqrt(cfg.d_fused), size=shape)
    arrays["base.b"][:] = -2.0
    arrays["time.b"][:] = -3.0
    return ModelParams(cfg, arrays)


# ---------------------------------------------------------------------------
# elementwise pieces


def softplus(x):
    return np.logaddexp(0.0, x)


def _activate(z, kind):
    if kind == "tanh":
        return np.tanh(z)
    if kind == "relu":
        return np.maximum(z, 0.0)
    return z


def _activate_grad(z, a, kind):
    if kind == "tanh":
        return 1.0 - a * a
    if kind == "relu":
        return (z > 0).astype(np.float64)
    return np.ones_like(z)


_H_LO = np.finfo(np.float64).tiny
_H_HI = np.nextafter(1.0, 0.0)


def _open_unit(p):
    """Keep probabilities strictly inside (0, 1) where float64 sigmoid saturates."""
    return np.clip(p, _H_LO, _H_HI)


def softmax(s, axis=-1):
    e = np.exp(s - np.max(s, axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


# ---------------------------------------------------------------------------
# result types


@dataclass
class HazardPrediction:
    base: float
    increments: np.ndarray
    cumulative: np.ndarray
    logits: np.ndarray | None = field(default=None, repr=False)


@dataclass
class FusionTrace:
    x_curr: np.ndarray
    x_prior_tokens: np.ndarray
    attn_weights: np.ndarray  # (n_heads, M); empty for variants without attention
    x_cpc: np.ndarray
    x_star: np.ndarray


# ---------------------------------------------------------------------------
# batched forward / backward


def _encoder_forward(X, params):
    cfg = params.config
    n_layers = len(cfg.encoder_sizes()) - 1
    acts, pre = [X], []
    h = X
    for i in range(n_layers):
        z = h @ params[f"enc.{i}.W"] + params[f"enc.{i}.b"]
        h = _activate(z, cfg.activation)
        pre.append(z)
        acts.append(h)
    tokens = h.reshape(X.shape[0], cfg.n_tokens, cfg.d_model)
    return tokens, (acts, pre)


def _encoder_backward(dtokens, cache, params, grads):
    cfg = params.config
    acts, pre = cache
    d = dtokens.reshape(dtokens.shape[0], -1)
    for i in reversed(range(len(pre))):
        dz = d * _activate_grad(pre[i], acts[i + 1], cfg.activation)
        grads[f"enc.{i}.W"] += acts[i].T @ dz
        grads[f"enc.{i}.b"] += dz.sum(axis=0)
        d = dz @ params[f"enc.{i}.W"].T


def _attention_forward(xc, P, params):
    dh = params.config.d_head
    Q = np.einsum("bd,hde->bhe", xc, params["attn.W_Q"])
    K = np.einsum("bmd,hde->bhme", P, params["attn.W_K"])
    V = np.einsum("bmd,hde->bhme", P, params["attn.W_V"])
    S = np.einsum("bhe,bhme->bhm", Q, K) / np.sqrt(dh)
    A = softmax(S, axis=-1)
    O = np.einsum("bhm,bhme->bhe", A, V)
    concat = O.reshape(O.shape[0], -1)
    U = concat @ params["attn.W_O"]
    x_cpc = U @ params["attn.W_P"] + params["attn.b_P"]
    return x_cpc, A, (xc, P, Q, K, V, A, concat, U)


def _attention_backward(dx_cpc, cache, params, grads):
    xc, P, Q, K, V, A, concat, U = cache
    B = xc.shape[0]
    cfg = params.config
    grads["attn.W_P"] += U.T @ dx_cpc
    grads["attn.b_P"] += dx_cpc.sum(axis=0)
    dU = dx_cpc @ params["attn.W_P"].T
    grads["attn.W_O"] += concat.T @ dU
    dO = (dU @ params["attn.W_O"].T).reshape(B, cfg.n_heads, cfg.d_head)
    dA = np.einsum("bhe,bhme->bhm", dO, V)
    dV = np.einsum("bhm,bhe->bhme", A, dO)
    dS = A * (dA - np.sum(A * dA, axis=-1, keepdims=True)) / np.sqrt(cfg.d_head)
    dQ = np.einsum("bhm,bhme->bhe", dS, K)
    dK = np.einsum("bhm,bhe->bhme", dS, Q)
    grads["attn.W_Q"] += np.einsum("bd,bhe->hde", xc, dQ)
    grads["attn.W_K"] += np.einsum("bmd,bhme->hde", P, dK)
    grads["attn.W_V"] += np.einsum("bmd,bhme->hde", P, dV)
    dxc = np.einsum("bhe,hde->bd", dQ, params["attn.W_Q"])
    dP = np.einsum("bhme,hde->bmd", dK, params["attn.W_K"]) + np.einsum(
        "bhme,hde->bmd", dV, params["attn.W_V"]
    )
    return dxc, dP


def _as_batch(X, dim, name):
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[1] != dim:
        raise DataError(f"{name}: expected feature dimension {dim}, got {X.shape[1]}")
    return X


def _fuse_batch(Xc, Xp, params):
    cfg = params.config
    tok_c, enc_c = _encoder_forward(Xc, params)
    xc = tok_c.mean(axis=1)
    cache = {"enc_c": enc_c, "xc": xc}
    if cfg.variant == "baseline":
        x_cpc = xc
        A = np.zeros((xc.shape[0], cfg.n_heads, 0))
        P = np.zeros((xc.shape[0], 0, cfg.d_model))
    else:
        P, enc_p = _encoder_forward(Xp, params)
        cache["enc_p"] = enc_p
        if cfg.variant == "rp_plus":
            x_cpc = xc + P.mean(axis=1)
            A = np.zeros((xc.shape[0], cfg.n_heads, 0))
        else:
            x_cpc, A, cache["attn"] = _attention_forward(xc, P, params)
    x_star = np.concatenate([x_cpc, xc], axis=1)
    return x_star, x_cpc, xc, P, A, cache


def _fuse_backward(dx_star, cache, params, grads):
    cfg = params.config
    dm = cfg.d_model
    dx_cpc, dxc = dx_star[:, :dm], dx_star[:, dm:].copy()
    M = cfg.n_tokens
    if cfg.variant == "baseline":
        dxc += dx_cpc
    elif cfg.variant == "rp_plus":
        dxc += dx_cpc
        dP = np.repeat(dx_cpc[:, None, :] / M, M, axis=1)
        _encoder_backward(dP, cache["enc_p"], params, grads)
    else:
        dxc_attn, dP = _attention_backward(dx_cpc, cache["attn"], params, grads)
        dxc += dxc_attn
        _encoder_backward(dP, cache["enc_p"], params, grads)
    dtok_c = np.repeat(dxc[:, None, :] / M, M, axis=1)
    _encoder_backward(dtok_c, cache["enc_c"], params, grads)


def _heads_forward(x_star, params):
    raw_base = x_star @ params["base.w"] + params["base.b"][0]
    raw_inc = x_star @ params["time.W"] + params["time.b"]
    inc = softplus(raw_inc)
    logits = raw_base[:, None] + np.cumsum(inc, axis=1)
    return raw_base, raw_inc, inc, logits


def predict_batch(Xc, Xp, params):
    """Cumulative risk matrix (B, T) for stacked current/prior features."""
    cfg = params.config
    Xc = _as_batch(Xc, cfg.feature_dim, "current")
    Xp = Xc if Xp is None else _as_batch(Xp, cfg.feature_dim, "prior")
    x_star, *_ = _fuse_batch(Xc, Xp, params)
    _, _, _, logits = _heads_forward(x_star, params)
    if not np.all(np.isfinite(logits)):
        raise NumericError(f"non-finite hazard logits; {params.diagnostics()}")
    return _open_unit(expit(logits))


def loss_and_gradient(Xc, Xp, Hgt, mask, params):
    """Summed masked BCE over a stacked batch and its exact gradient."""
    # overflow is caught below as NumericError; numpy's warnings add nothing
    with np.errstate(over="ignore", invalid="ignore"):
        return _loss_and_gradient(Xc, Xp, Hgt, mask, params)


def _loss_and_gradient(Xc, Xp, Hgt, mask, params):
    cfg = params.config
    Xc = _as_batch(Xc, cfg.feature_dim, "current")
    Xp = Xc if Xp is None else _as_batch(Xp, cfg.feature_dim, "prior")
    Hgt = np.asarray(Hgt, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    x_star, _, _, _, _, cache = _fuse_batch(Xc, Xp, params)
    raw_base, raw_inc, inc, z = _heads_forward(x_star, params)
    if not np.all(np.isfinite(z)):
        raise NumericError(f"non-finite hazard logits; {params.diagnostics()}")
    per = np.where(mask > 0, softplus(z) - Hgt * z, 0.0)
    loss = float(np.sum(mask * per))

    grads = params.zeros_like()
    g = grads.arrays
    dz = mask * (expit(z) - Hgt)
    d_base = dz.sum(axis=1)
    d_inc = np.cumsum(dz[:, ::-1], axis=1)[:, ::-1]
    d_raw_inc = d_inc * expit(raw_inc)
    g["base.w"] += x_star.T @ d_base
    g["base.b"] += d_base.sum()
    g["time.W"] += x_star.T @ d_raw_inc
    g["time.b"] += d_raw_inc.sum(axis=0)
    dx_star = np.outer(d_base, params["base.w"]) + d_raw_inc @ params["time.W"].T
    _fuse_backward(dx_star, cache, params, g)
    if not grads.all_finite():
        raise NumericError(f"non-finite gradient; {grads.diagnostics()}")
    return loss, grads


# ---------------------------------------------------------------------------
# single-exam API


def encode_tokens(features, params) -> np.ndarray:
    X = _as_batch(features, params.config.feature_dim, "features")
    tokens, _ = _encoder_forward(X, params)
    return tokens[0]


def encode(features, params) -> np.ndarray:
    """Pooled d_model feature of one exam (mean over its token map)."""
    return encode_tokens(features, params).mean(axis=0)


def cross_attention(x_curr, x_prior_tokens, params):
    """Attend from the current feature over the prior tokens.

    Returns the comparison feature and the (n_heads, M) attention weights.
    """
    cfg = params.config
    x_curr = np.asarray(x_curr, dtype=np.float64)
    P = np.asarray(x_prior_tokens, dtype=np.float64)
    if P.ndim != 2 or P.shape[0] == 0:
        raise MissingPriorError("cross_attention needs at least one prior token")
    if x_curr.shape != (cfg.d_model,) or P.shape[1] != cfg.d_model:
        raise DataError(
            f"dimension mismatch: x_curr {x_curr.shape}, prior tokens {P.shape}, d_model {cfg.d_model}"
        )
    x_cpc, A, _ = _attention_forward(x_curr[None, :], P[None, :, :], params)
    return x_cpc[0], A[0]


def fuse(x_cpc, x_curr) -> np.ndarray:
    x_cpc = np.asarray(x_cpc, dtype=np.float64)
    x_curr = np.asarray(x_curr, dtype=np.float64)
    if x_cpc.shape != x_curr.shape or x_cpc.ndim != 1:
        raise DataError(f"cannot fuse vectors of shapes {x_cpc.shape} and {x_curr.shape}")
    return np.concatenate([x_cpc, x_curr])


def hazard_forward(x_star, params) -> HazardPrediction:
    cfg = params.config
    x_star = np.asarray(x_star, dtype=np.float64)
    if x_star.shape != (cfg.d_fused,):
        raise DataError(f"x_star must have length {cfg.d_fused}, got {x_star.shape}")
    raw_base, _, inc, logits = _heads_forward(x_star[None, :], params)
    if not (np.all(np.isfinite(logits)) and np.all(np.isfinite(inc))):
        raise NumericError(f"non-finite hazard output; {params.diagnostics()}")
    return HazardPrediction(
        base=float(raw_base[0]), increments=inc[0], cumulative=_open_unit(expit(logits[0])), logits=logits[0]
    )


def masked_bce_loss(pred: HazardPrediction, label: LabelPair) -> float:
    """Sum over horizons of mask(t) * BCE(h(t), H_hat(t))."""
    H = np.asarray(pred.cumulative, dtype=np.float64)
    h = np.asarray(label.h, dtype=np.float64)
    m = np.asarray(label.mask, dtype=np.float64)
    if not (H.shape == h.shape == m.shape):
        raise DataError(f"length mismatch: prediction {H.shape}, label {h.shape}")
    live = m > 0
    Hl = H[live]
    if not np.all((Hl > 0) & (Hl < 1)):
        raise NumericError("cumulative risk outside (0, 1) at an unmasked horizon")
    hl = h[live]
    terms = -hl * np.log(Hl) - (1.0 - hl) * np.log1p(-Hl)
    return float(np.sum(m[live] * terms))


def batch_loss(preds: Sequence[HazardPrediction], labels: Sequence[LabelPair]) -> float:
    return float(sum(masked_bce_loss(p, l) for p, l in zip(preds, labels)))


def forward(current: ExamRecord, prior: ExamRecord | None, params):
    """Full pipeline for one (current, prior) pair: prediction and trace."""
    cfg = params.config
    Xc = _as_batch(current.features, cfg.feature_dim, current.exam_id)
    if prior is None:
        if cfg.variant != "baseline":
            raise MissingPriorError(f"variant {cfg.variant} needs a prior for exam {current.exam_id}")
        Xp = Xc
    else:
        Xp = _as_batch(prior.features, cfg.feature_dim, prior.exam_id)
    x_star, x_cpc, xc, P, A, _ = _fuse_batch(Xc, Xp, params)
    pred = hazard_forward(x_star[0], params)
    trace = FusionTrace(x_curr=xc[0], x_prior_tokens=P[0], attn_weights=A[0], x_cpc=x_cpc[0], x_star=x_star[0])
    return pred, trace


def stack_batch(batch):
    """(current, prior, LabelPair) triples -> stacked arrays."""
    if not batch:
        raise DataError("empty batch")
    Xc = np.stack([c.features for c, _, _ in batch])
    Xp = np.stack([(p if p is not None else c).features for c, p, _ in batch])
    Hgt = np.stack([l.h for _, _, l in batch])
    mask = np.stack([l.mask for _, _, l in batch])
    return Xc, Xp, Hgt, mask


def gradient(batch, params) -> ModelParams:
    """Gradient of the summed masked BCE over ``batch`` w.r.t. every parameter."""
    _, grads = loss_and_gradient(*stack_batch(batch), params)
    return grads


# ---------------------------------------------------------------------------
# checkpoint file
#
# Text layout, one item per line:
#   PRIORRISK-CHECKPOINT <version>
#   config <json ModelConfig>
#   meta <json object>            (free-form, may be {})
#   tensor <name> <ndim> <dim_0> ... <dim_{ndim-1}>
#   <row-major values as repr floats, space separated>
#   ... repeated per tensor, in parameter order
#   end


def write_checkpoint(params: ModelParams, path, meta: dict | None = None) -> None:
    lines = [f"{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}"]
    lines.append("config " + json.dumps(asdict(params.config), sort_keys=True))
    lines.append("meta " + json.dumps(meta or {}, sort_keys=True))
    for name, arr in params.items():
        lines.append(f"tensor {name} {arr.ndim} " + " ".join(map(str, arr.shape)))
        lines.append(" ".join(repr(float(x)) for x in arr.ravel()))
    lines.append("end")
    Path(path).write_text("\n".join(lines) + "\n")


def read_checkpoint(path) -> tuple[ModelParams, dict]:
    lines = Path(path).read_text().splitlines()
    if not lines or not lines[0].startswith(CHECKPOINT_MAGIC):
        raise DataError(f"{path}: not a checkpoint file")
    version = int(lines[0].split()[1])
    if version != CHECKPOINT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    cfg_dict = json.loads(lines[1].removeprefix("config "))
    cfg = ModelConfig(**cfg_dict)
    meta = json.loads(lines[2].removeprefix("meta "))
    arrays = {}
    i = 3
    while lines[i] != "end":
        head = lines[i].split()
        if head[0] != "tensor":
            raise DataError(f"{path}:{i + 1}: expected tensor header")
        name, ndim = head[1], int(head[2])
        shape = tuple(int(s) for s in head[3 : 3 + ndim])
        values = np.array([float(v) for v in lines[i + 1].split()], dtype=np.float64)
        if values.size != int(np.prod(shape)):
            raise DataError(f"{path}: tensor {name} has {values.size} values for shape {shape}")
        arrays[name] = values.reshape(shape)
        i += 2
    return ModelParams(cfg, arrays), meta
