"""Pre-norm transformer with a hand-written reverse pass.

Everything is batched: inputs are ``(B, L, d_in)`` floats (or ``(B, L)`` token
ids) together with a ``pad_len`` vector. Parameters live in a plain dict keyed
by canonical block names (see :func:`param_shapes`).

Conventions
-----------
* Linear maps store weights as ``(out, in)`` and apply ``y = x @ W.T``.
* ``layer{l}.WQ`` stacks the per-head ``(d, D)`` projections along rows, so
  head ``h`` owns rows ``h*d:(h+1)*d``. ``WO`` maps the concatenated heads.
* Toy mode is the one-layer, single-head, bias-free, norm-free, MLP-free model:
  ``encode -> +P -> attention -> mean-pool -> classifier``. There is no
  residual connection around its attention.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.special import erf

from .numeric import SeededRng, masked_softmax

PE_VARIANTS = ("abs-sin", "alibi", "rope", "abs+alibi", "rope+alibi", "none")
LN_EPS = 1e-5
_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


@dataclass(frozen=True)
class ModelConfig:
    depth: int = 1
    width: int = 32
    heads: int = 1
    mlp_hidden: int = 64
    num_classes: int = 2
    pe_variant: str = "abs-sin"
    dropout_rate: float = 0.0
    toy_mode: bool = True
    input_kind: str = "continuous"
    input_dim: int = 2  # feature dim (continuous) or vocabulary size (token)
    # how masked continuous inputs reach the encoder; only one scheme exists so far
    mask_scheme: str = "zero+embed"

    def __post_init__(self):
        if self.width <= 0 or self.depth <= 0 or self.heads <= 0:
            raise ValueError("depth, width and heads must be positive")
        if self.width % self.heads:
            raise ValueError(f"width {self.width} not divisible by heads {self.heads}")
        if self.toy_mode and (self.depth != 1 or self.heads != 1):
            raise ValueError("toy_mode requires depth=1 and heads=1")
        if self.pe_variant not in PE_VARIANTS:
            raise ValueError(f"unknown pe_variant {self.pe_variant!r}")
        if self.uses_abs_pe and self.width % 2:
            raise ValueError("sinusoidal encodings need an even width")
        if self.uses_rope and self.head_dim % 2:
            raise ValueError("RoPE needs an even head dimension")
        if self.input_kind not in ("continuous", "token"):
            raise ValueError(f"unknown input_kind {self.input_kind!r}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")
        if self.num_classes < 2 or self.input_dim < 1:
            raise ValueError("num_classes >= 2 and input_dim >= 1 required")
        if self.mask_scheme != "zero+embed":
            raise ValueError(f"unknown mask_scheme {self.mask_scheme!r}")

    @property
    def head_dim(self) -> int:
        return self.width // self.heads

    @property
    def uses_abs_pe(self) -> bool:
        return self.pe_variant in ("abs-sin", "abs+alibi")

    @property
    def uses_alibi(self) -> bool:
        return "alibi" in self.pe_variant

    @property
    def uses_rope(self) -> bool:
        return self.pe_variant.startswith("rope")

    @property
    def has_bias(self) -> bool:
        return not self.toy_mode

    @property
    def recon_dim(self) -> int:
        return self.input_dim

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


# ------------------------------------------------------------------ registry


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Canonical block names mapped to shapes, in sorted order."""
    D = cfg.width
    shapes: dict[str, tuple[int, ...]] = {}
    if cfg.input_kind == "continuous":
        shapes["encoder.W"] = (D, cfg.input_dim)
        if cfg.has_bias:
            shapes["encoder.b"] = (D,)
    else:
        shapes["encoder.E"] = (cfg.input_dim, D)
    shapes["encoder.mask"] = (D,)
    for l in range(cfg.depth):
        for w in ("WQ", "WK", "WV", "WO"):
            shapes[f"layer{l}.{w}"] = (D, D)
        if not cfg.toy_mode:
            for ln in ("ln1", "ln2"):
                shapes[f"layer{l}.{ln}.g"] = (D,)
                shapes[f"layer{l}.{ln}.b"] = (D,)
            shapes[f"layer{l}.mlp.W1"] = (cfg.mlp_hidden, D)
            shapes[f"layer{l}.mlp.b1"] = (cfg.mlp_hidden,)
            shapes[f"layer{l}.mlp.W2"] = (D, cfg.mlp_hidden)
            shapes[f"layer{l}.mlp.b2"] = (D,)
    if not cfg.toy_mode:
        shapes["final_norm.g"] = (D,)
        shapes["final_norm.b"] = (D,)
    shapes["head.cls.W"] = (cfg.num_classes, D)
    shapes["head.spt.W"] = (cfg.recon_dim, D)
    if cfg.has_bias:
        shapes["head.cls.b"] = (cfg.num_classes,)
        shapes["head.spt.b"] = (cfg.recon_dim,)
    return {k: shapes[k] for k in sorted(shapes)}


def _fan_in(name: str, cfg: ModelConfig) -> int:
    if name == "encoder.E":
        return 1  # one-hot input
    if name in ("encoder.b", "encoder.mask"):
        return cfg.input_dim if cfg.input_kind == "continuous" else 1
    if name.endswith("mlp.b1"):
        return cfg.width
    if name.endswith("mlp.b2"):
        return cfg.mlp_hidden
    if name.startswith("head.") and name.endswith(".b"):
        return cfg.width
    return param_shapes(cfg)[name][-1]


def init_params(cfg: ModelConfig, seed: int) -> dict[str, np.ndarray]:
    """Uniform U(-1/sqrt(fan_in), 1/sqrt(fan_in)) per block; norms start at (1, 0).

    Each block draws from its own stream keyed by (seed, "init", name).
    """
    params = {}
    for name, shape in param_shapes(cfg).items():
        if ".ln" in name or name.startswith("final_norm"):
            params[name] = np.ones(shape) if name.endswith(".g") else np.zeros(shape)
            continue
        bound = 1.0 / np.sqrt(_fan_in(name, cfg))
        n = int(np.prod(shape))
        params[name] = SeededRng(seed, "init", name).uniform(n, -bound, bound).reshape(shape)
    return params


def check_params(params: dict, cfg: ModelConfig) -> None:
    shapes = param_shapes(cfg)
    if set(params) != set(shapes):
        missing = sorted(set(shapes) - set(params))
        extra = sorted(set(params) - set(shapes))
        raise ValueError(f"parameter blocks do not match config (missing {missing}, extra {extra})")
    for k, s in shapes.items():
        if params[k].shape != s:
            raise ValueError(f"block {k} has shape {params[k].shape}, expected {s}")


# ------------------------------------------------------------ positional bits


def positional_encoding(length: int, width: int) -> np.ndarray:
    if width % 2:
        raise ValueError(f"positional encoding needs an even width, got {width}")
    t = np.arange(length)[:, None]
    freq = 10000.0 ** (-np.arange(0, width, 2) / width)
    P = np.empty((length, width))
    P[:, 0::2] = np.sin(t * freq)
    P[:, 1::2] = np.cos(t * freq)
    return P


def alibi_slopes(heads: int) -> np.ndarray:
    if heads == 1:
        return np.array([1.0])
    return 2.0 ** (-8.0 * np.arange(1, heads + 1) / heads)


def alibi_bias(length: int, heads: int) -> np.ndarray:
    """(H, L, L) additive bias -m_h |i - j|."""
    dist = np.abs(np.arange(length)[:, None] - np.arange(length)[None, :])
    return -alibi_slopes(heads)[:, None, None] * dist[None]


def rope_tables(length: int, dim: int) -> tuple[np.ndarray, np.ndarray]:
    freq = 10000.0 ** (-np.arange(0, dim, 2) / dim)
    ang = np.arange(length)[:, None] * freq[None, :]
    return np.cos(ang), np.sin(ang)


def rope_apply(x: np.ndarray, cos: np.ndarray, sin: np.ndarray, inverse: bool = False) -> np.ndarray:
    """Rotate consecutive pairs of the last axis; ``inverse`` applies the transpose."""
    x0 = x[..., 0::2]
    x1 = x[..., 1::2]
    if inverse:
        sin = -sin
    out = np.empty_like(x)
    out[..., 0::2] = x0 * cos - x1 * sin
    out[..., 1::2] = x0 * sin + x1 * cos
    return out


# ------------------------------------------------------------------- helpers


def _linear(x, W, b=None):
    y = x @ W.T
    return y if b is None else y + b


def _linear_grads(dy, x, W, grads, wname, bname=None):
    dy2 = dy.reshape(-1, dy.shape[-1])
    grads[wname] += dy2.T @ x.reshape(-1, x.shape[-1])
    if bname is not None:
        grads[bname] += dy2.sum(axis=0)
    return dy @ W


def _layernorm(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + LN_EPS)
    xhat = xc * rstd
    return xhat * g + b, (xhat, rstd)


def _layernorm_back(dy, cache, g, grads, gname, bname):
    xhat, rstd = cache
    grads[gname] += (dy * xhat).reshape(-1, xhat.shape[-1]).sum(axis=0)
    grads[bname] += dy.reshape(-1, dy.shape[-1]).sum(axis=0)
    dxhat = dy * g
    return rstd * (
        dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )


def gelu(x):
    return 0.5 * x * (1.0 + erf(x / _SQRT2))


def gelu_grad(x):
    return 0.5 * (1.0 + erf(x / _SQRT2)) + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)


def _dropout_mask(rng: SeededRng, shape, rate: float):
    keep = rng.uniform(int(np.prod(shape))).reshape(shape) >= rate
    return keep / (1.0 - rate)


def _fingerprint(params):
    return tuple(float(v.sum()) for _, v in sorted(params.items()))


# ----------------------------------------------------------------- attention


def _attention(Z, params, l, cfg, valid):
    """Multi-head attention on already-normalised input Z (B, L, D)."""
    B, L, D = Z.shape
    H, d = cfg.heads, cfg.head_dim
    WQ, WK, WV, WO = (params[f"layer{l}.{w}"] for w in ("WQ", "WK", "WV", "WO"))

    def split(y):
        return y.reshape(B, L, H, d).transpose(0, 2, 1, 3)

    Q, K, V = split(Z @ WQ.T), split(Z @ WK.T), split(Z @ WV.T)
    rope = rope_tables(L, d) if cfg.uses_rope else None
    Qr = rope_apply(Q, *rope) if rope else Q
    Kr = rope_apply(K, *rope) if rope else K
    S = (Qr @ Kr.transpose(0, 1, 3, 2)) / np.sqrt(d)
    if cfg.uses_alibi:
        S = S + alibi_bias(L, H)[None]
    key_ok = valid[:, None, None, :]
    A = masked_softmax(S, key_ok)
    O = (A @ V).transpose(0, 2, 1, 3).reshape(B, L, D)
    out = O @ WO.T
    cache = dict(Z=Z, Qr=Qr, Kr=Kr, V=V, S=S, A=A, O=O, rope=rope)
    return out, cache


def _attention_back(dout, c, params, l, cfg, grads):
    B, L, D = c["Z"].shape
    H, d = cfg.heads, cfg.head_dim
    WQ, WK, WV, WO = (params[f"layer{l}.{w}"] for w in ("WQ", "WK", "WV", "WO"))
    dO = _linear_grads(dout, c["O"], WO, grads, f"layer{l}.WO")
    dO = dO.reshape(B, L, H, d).transpose(0, 2, 1, 3)
    A = c["A"]
    dA = dO @ c["V"].transpose(0, 1, 3, 2)
    dV = A.transpose(0, 1, 3, 2) @ dO
    dS = A * (dA - (dA * A).sum(axis=-1, keepdims=True))
    dS /= np.sqrt(d)
    dQr = dS @ c["Kr"]
    dKr = dS.transpose(0, 1, 3, 2) @ c["Qr"]
    if c["rope"] is not None:
        dQ = rope_apply(dQr, *c["rope"], inverse=True)
        dK = rope_apply(dKr, *c["rope"], inverse=True)
    else:
        dQ, dK = dQr, dKr

    def merge(y):
        return y.transpose(0, 2, 1, 3).reshape(B, L, D)

    Z = c["Z"]
    dZ = _linear_grads(merge(dQ), Z, WQ, grads, f"layer{l}.WQ")
    dZ += _linear_grads(merge(dK), Z, WK, grads, f"layer{l}.WK")
    dZ += _linear_grads(merge(dV), Z, WV, grads, f"layer{l}.WV")
    return dZ


# ------------------------------------------------------------------ forward


class ForwardCache:
    """Everything the reverse pass needs; produced by :func:`forward`."""

    def __init__(self, **kw):
        self.__dict__.update(kw)

    def attention_maps(self):
        """List over layers of (S, A), each (B, H, L, L)."""
        return [(lc["attn"]["S"], lc["attn"]["A"]) for lc in self.layers]


def _valid_mask(pad_len, L):
    pad_len = np.asarray(pad_len, dtype=np.int64)
    if np.any(pad_len < 1):
        raise ValueError("pad_len must be at least 1 for every sequence")
    if np.any(pad_len > L):
        raise ValueError("pad_len exceeds sequence length")
    return np.arange(L)[None, :] < pad_len[:, None]


def forward(
    params: dict,
    cfg: ModelConfig,
    x: np.ndarray,
    pad_len,
    head: str = "cls",
    mask: np.ndarray | None = None,
    mode: str = "eval",
    rng: SeededRng | None = None,
    zero_content: bool = False,
):
    """Batched forward pass.

    ``head='cls'`` returns logits (B, K); ``head='spt'`` returns per-token
    reconstructions (B, L, out). ``mask`` (B, L) marks positions whose raw
    input is hidden from the encoder. ``zero_content`` replaces the encoded
    content by zeros so that only positional signal enters the stack.
    """
    if head not in ("cls", "spt"):
        raise ValueError(f"unknown head {head!r}")
    if mode not in ("train", "eval"):
        raise ValueError(f"unknown mode {mode!r}")
    if cfg.input_kind == "continuous":
        if x.ndim != 3 or x.shape[2] != cfg.input_dim:
            raise ValueError(f"expected input of shape (B, L, {cfg.input_dim}), got {x.shape}")
    elif x.ndim != 2:
        raise ValueError(f"expected token ids of shape (B, L), got {x.shape}")
    B, L = x.shape[:2]
    valid = _valid_mask(pad_len, L)
    pad_len = np.asarray(pad_len, dtype=np.int64)
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (B, L):
            raise ValueError(f"mask shape {mask.shape} does not match input {(B, L)}")
        if np.any(mask & ~valid):
            raise ValueError("mask contains padding positions")
    drop = cfg.dropout_rate if (mode == "train" and not cfg.toy_mode) else 0.0
    if drop > 0 and rng is None:
        raise ValueError("dropout in train mode needs an rng")

    # encoder
    if cfg.input_kind == "continuous":
        xin = x.astype(np.float64, copy=True)
        if mask is not None:
            xin[mask] = 0.0
        X = _linear(xin, params["encoder.W"], params.get("encoder.b"))
    else:
        xin = np.asarray(x, dtype=np.int64)
        if np.any(xin < 0) or np.any(xin[valid] >= cfg.input_dim):
            raise ValueError("token id out of vocabulary range")
        X = params["encoder.E"][np.clip(xin, 0, cfg.input_dim - 1)]
        if mask is not None:
            X[mask] = 0.0
    if zero_content:
        X = np.zeros_like(X)
    if mask is not None:
        X = X + mask[..., None] * params["encoder.mask"]
    Z = X + positional_encoding(L, cfg.width)[None] if cfg.uses_abs_pe else X
    drop0 = _dropout_mask(rng, Z.shape, drop) if drop > 0 else None
    if drop0 is not None:
        Z = Z * drop0

    layers = []
    for l in range(cfg.depth):
        if cfg.toy_mode:
            Z, ac = _attention(Z, params, l, cfg, valid)
            layers.append(dict(attn=ac))
            continue
        Z, lc = _block(Z, params, l, cfg, valid, drop, rng)
        layers.append(lc)

    if cfg.toy_mode:
        Zf, lnf = Z, None
    else:
        Zf, lnf = _layernorm(Z, params["final_norm.g"], params["final_norm.b"])

    if head == "cls":
        h = (Zf * valid[..., None]).sum(axis=1) / pad_len[:, None]
        out = _linear(h, params["head.cls.W"], params.get("head.cls.b"))
    else:
        h = None
        out = _linear(Zf, params["head.spt.W"], params.get("head.spt.b"))

    cache = ForwardCache(
        cfg=cfg, params=params, fingerprint=_fingerprint(params), mode=mode, head=head,
        valid=valid, pad_len=pad_len, mask=mask, xin=xin, zero_content=zero_content,
        drop0=drop0, layers=layers, lnf=lnf, Zf=Zf, h=h, out_shape=out.shape,
    )
    return out, cache


def _block(Z, params, l, cfg, valid, drop, rng):
    p = f"layer{l}."
    Zt, ln1 = _layernorm(Z, params[p + "ln1.g"], params[p + "ln1.b"])
    a, ac = _attention(Zt, params, l, cfg, valid)
    dm1 = _dropout_mask(rng, a.shape, drop) if drop > 0 else None
    Z1 = Z + (a * dm1 if dm1 is not None else a)
    Zt2, ln2 = _layernorm(Z1, params[p + "ln2.g"], params[p + "ln2.b"])
    pre = _linear(Zt2, params[p + "mlp.W1"], params[p + "mlp.b1"])
    act = gelu(pre)
    m = _linear(act, params[p + "mlp.W2"], params[p + "mlp.b2"])
    dm2 = _dropout_mask(rng, m.shape, drop) if drop > 0 else None
    Z2 = Z1 + (m * dm2 if dm2 is not None else m)
    return Z2, dict(ln1=ln1, attn=ac, dm1=dm1, ln2=ln2, Zt2=Zt2, pre=pre, act=act, dm2=dm2)


def _block_back(dZ2, lc, params, l, cfg, grads):
    p = f"layer{l}."
    dm = dZ2 * lc["dm2"] if lc["dm2"] is not None else dZ2
    dact = _linear_grads(dm, lc["act"], params[p + "mlp.W2"], grads, p + "mlp.W2", p + "mlp.b2")
    dpre = dact * gelu_grad(lc["pre"])
    dZt2 = _linear_grads(dpre, lc["Zt2"], params[p + "mlp.W1"], grads, p + "mlp.W1", p + "mlp.b1")
    dZ1 = dZ2 + _layernorm_back(dZt2, lc["ln2"], params[p + "ln2.g"], grads, p + "ln2.g", p + "ln2.b")
    da = dZ1 * lc["dm1"] if lc["dm1"] is not None else dZ1
    dZt = _attention_back(da, lc["attn"], params, l, cfg, grads)
    return dZ1 + _layernorm_back(dZt, lc["ln1"], params[p + "ln1.g"], grads, p + "ln1.g", p + "ln1.b")


# ----------------------------------------------------------------- backward


def backward(cache: ForwardCache, upstream: np.ndarray, frozen=()) -> dict[str, np.ndarray]:
    """Reverse pass from d(loss)/d(output) to gradients for every block.

    Blocks named in ``frozen`` (and blocks the chosen head never touches)
    come back as zero arrays.
    """
    if cache.mode != "train":
        raise ValueError("backward needs a cache produced in train mode")
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != cache.out_shape:
        raise ValueError(f"upstream shape {upstream.shape} does not match output {cache.out_shape}")
    params, cfg = cache.params, cache.cfg
    if _fingerprint(params) != cache.fingerprint:
        raise ValueError("stale cache: parameters changed since the forward pass")

    grads = {k: np.zeros_like(v) for k, v in params.items()}
    if cache.head == "cls":
        dh = _linear_grads(upstream, cache.h, params["head.cls.W"], grads, "head.cls.W",
                           "head.cls.b" if cfg.has_bias else None)
        dZf = cache.valid[..., None] * (dh / cache.pad_len[:, None])[:, None, :]
    else:
        dZf = _linear_grads(upstream, cache.Zf, params["head.spt.W"], grads, "head.spt.W",
                            "head.spt.b" if cfg.has_bias else None)

    if cfg.toy_mode:
        dZ = dZf
    else:
        dZ = _layernorm_back(dZf, cache.lnf, params["final_norm.g"], grads, "final_norm.g", "final_norm.b")

    for l in reversed(range(cfg.depth)):
        lc = cache.layers[l]
        if cfg.toy_mode:
            dZ = _attention_back(dZ, lc["attn"], params, l, cfg, grads)
        else:
            dZ = _block_back(dZ, lc, params, l, cfg, grads)

    if cache.drop0 is not None:
        dZ = dZ * cache.drop0
    dX = dZ
    if cache.mask is not None:
        grads["encoder.mask"] += dX[cache.mask].sum(axis=0)
    if not cache.zero_content:
        if cfg.input_kind == "continuous":
            _linear_grads(dX, cache.xin, params["encoder.W"], grads, "encoder.W",
                          "encoder.b" if cfg.has_bias else None)
        else:
            keep = cache.valid.copy()
            if cache.mask is not None:
                keep &= ~cache.mask
            # pad rows receive exactly zero gradient, so they are skipped
            np.add.at(grads["encoder.E"], cache.xin[keep], dX[keep])

    for name in frozen:
        if name not in grads:
            raise KeyError(f"unknown block {name!r} in frozen set")
        grads[name] = np.zeros_like(grads[name])
    return grads


# -------------------------------------------------- single-sequence surface


def _seq_arrays(seq):
    x = np.asarray(seq.x)
    return x[None], np.array([seq.pad_len])


def attention_forward(Z, params, layer, cfg, pad_len=None):
    """One attention layer on a single (L, D) matrix; returns (output, cache slice)."""
    Z = np.asarray(Z, dtype=np.float64)
    if Z.ndim != 2 or Z.shape[1] != cfg.width:
        raise ValueError(f"expected Z of shape (L, {cfg.width}), got {Z.shape}")
    if not 0 <= layer < cfg.depth:
        raise ValueError(f"layer {layer} out of range")
    L = Z.shape[0]
    valid = _valid_mask([L if pad_len is None else pad_len], L)
    out, c = _attention(Z[None], params, layer, cfg, valid)
    return out[0], {"S": c["S"][0], "A": c["A"][0]}


def block_forward(Z, params, layer, cfg, pad_len=None, mode="eval", rng=None):
    if cfg.toy_mode:
        raise ValueError("toy_mode has no residual blocks; use attention_forward")
    Z = np.asarray(Z, dtype=np.float64)
    L = Z.shape[0]
    valid = _valid_mask([L if pad_len is None else pad_len], L)
    drop = cfg.dropout_rate if mode == "train" else 0.0
    out, lc = _block(Z[None], params, layer, cfg, valid, drop, rng)
    return out[0], lc


def forward_classify(seq, params, cfg, mode="eval", rng=None):
    if seq.pad_len < 1:
        raise ValueError("pad_len must be at least 1")
    x, pl = _seq_arrays(seq)
    logits, cache = forward(params, cfg, x, pl, head="cls", mode=mode, rng=rng)
    return logits[0], cache


def forward_reconstruct(seq, mask_positions, params, cfg, mode="eval", rng=None):
    x, pl = _seq_arrays(seq)
    L = x.shape[1]
    mask = np.zeros((1, L), dtype=bool)
    pos = np.asarray(list(mask_positions), dtype=np.int64)
    if pos.size and (pos.min() < 0 or pos.max() >= seq.pad_len):
        raise ValueError("mask contains padding positions")
    mask[0, pos] = True
    r, cache = forward(params, cfg, x, pl, head="spt", mask=mask, mode=mode, rng=rng)
    return r[0], cache


def backward_pass(cache, upstream, frozen=()):
    """Single-sequence convenience: accepts an upstream without the batch axis."""
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape == cache.out_shape[1:]:
        upstream = upstream[None]
    return backward(cache, upstream, frozen)
