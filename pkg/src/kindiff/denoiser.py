"""Transformer denoiser over segmented latent tokens.

Each latent group gets its own linear tokenizer into a shared embedding width;
a projected sinusoidal timestep token is appended and the stack is offset by a
learnable positional encoding. Blocks run pre-norm self-attention over the
noisy stream, cross-attention into the two concatenated condition streams
(which reuse shifted row windows of the same positional table, keeping the
condition slots order-sensitive), then an MLP, each with a residual
connection. The G latent-token outputs are mapped back to
group widths by per-group untokenizers; the network predicts the clean latent
directly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DimensionError
from .latent import SegmentationSpec, desk_segmentation
from .tensor import (
    Tensor,
    attention,
    concat,
    gelu,
    layer_norm,
    matmul,
    narrow,
    reshape,
    swapaxes,
)


@dataclass(frozen=True)
class DenoiserConfig:
    spec: SegmentationSpec = field(default_factory=desk_segmentation)
    embed_dim: int = 64
    n_layers: int = 4
    n_heads: int = 4
    mlp_ratio: int = 2

    def __post_init__(self):
        if self.embed_dim % max(self.n_heads, 1) != 0:
            raise ConfigError(
                f"embed_dim {self.embed_dim} not divisible by heads {self.n_heads}"
            )
        if self.n_layers < 0 or self.n_heads < 1:
            raise ConfigError("need n_layers >= 0 and n_heads >= 1")


def paper_denoiser_config() -> DenoiserConfig:
    from .latent import paper_segmentation

    return DenoiserConfig(
        spec=paper_segmentation(), embed_dim=512, n_layers=8, n_heads=8
    )


class DenoiserParams:
    """Named parameter tensors in a stable order."""

    def __init__(self, cfg: DenoiserConfig, tensors: dict[str, Tensor]):
        self.cfg = cfg
        self.tensors = tensors

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def parameter_list(self) -> list[Tensor]:
        return [self.tensors[k] for k in sorted(self.tensors)]

    def parameter_names(self) -> list[str]:
        return sorted(self.tensors)

    def as_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.tensors.items()}

    @staticmethod
    def from_arrays(cfg: DenoiserConfig, arrays: dict[str, np.ndarray]) -> "DenoiserParams":
        expected = set(_param_shapes(cfg))
        if set(arrays) != expected:
            missing = expected - set(arrays)
            extra = set(arrays) - expected
            raise ConfigError(
                f"parameter set mismatch (missing={sorted(missing)}, extra={sorted(extra)})"
            )
        return DenoiserParams(
            cfg, {k: Tensor(v, requires_grad=True) for k, v in arrays.items()}
        )


def _param_shapes(cfg: DenoiserConfig) -> dict[str, tuple[int, ...]]:
    d, G = cfg.embed_dim, cfg.spec.n_groups
    shapes: dict[str, tuple[int, ...]] = {}
    for g, w in enumerate(cfg.spec.group_dims):
        shapes[f"tok{g}_w"] = (w, d)
        shapes[f"tok{g}_b"] = (d,)
        shapes[f"untok{g}_w"] = (d, w)
        shapes[f"untok{g}_b"] = (w,)
    shapes["tproj_w"] = (d, d)
    shapes["tproj_b"] = (d,)
    shapes["pos"] = (G + 1, d)
    hidden = cfg.mlp_ratio * d
    for i in range(cfg.n_layers):
        for ln in ("ln1", "ln2", "ln3"):
            shapes[f"L{i}_{ln}_g"] = (d,)
            shapes[f"L{i}_{ln}_b"] = (d,)
        for blk in ("sa", "ca"):
            for m in ("q", "k", "v", "o"):
                shapes[f"L{i}_{blk}_w{m}"] = (d, d)
                if m != "k":
                    # a shared key offset cancels inside the softmax, so a
                    # key bias would be a dead parameter
                    shapes[f"L{i}_{blk}_b{m}"] = (d,)
        shapes[f"L{i}_mlp_w1"] = (d, hidden)
        shapes[f"L{i}_mlp_b1"] = (hidden,)
        shapes[f"L{i}_mlp_w2"] = (hidden, d)
        shapes[f"L{i}_mlp_b2"] = (d,)
    if cfg.n_layers >= 1:
        shapes["lnf_g"] = (d,)
        shapes["lnf_b"] = (d,)
    return shapes


def init_denoiser_params(
    cfg: DenoiserConfig,
    rng: np.random.Generator,
    weight_std: float = 0.02,
    zero_untokenizer: bool = True,
) -> DenoiserParams:
    """Training init: N(0, 0.02^2) weights, zero biases and positional rows,
    unit norm gains. Untokenizer weights start at zero so the untrained model
    predicts near-zero latents; pass ``zero_untokenizer=False`` for fully
    random parameters (connectivity probes, gradient checks)."""
    tensors: dict[str, Tensor] = {}
    for name, shape in _param_shapes(cfg).items():
        if name.endswith("_g") and name.startswith(("L", "lnf")):
            data = np.ones(shape)
        elif name.startswith("untok") and name.endswith("_w"):
            if zero_untokenizer:
                data = np.zeros(shape)
            else:
                data = weight_std * rng.standard_normal(shape)
        elif name.endswith("_w") or name.endswith(("_wq", "_wk", "_wv", "_wo")):
            data = weight_std * rng.standard_normal(shape)
        elif name == "pos":
            data = np.zeros(shape)
        elif name.endswith("_w1") or name.endswith("_w2"):
            data = weight_std * rng.standard_normal(shape)
        else:
            data = np.zeros(shape)
        tensors[name] = Tensor(data, requires_grad=True)
    return DenoiserParams(cfg, tensors)


def sinusoidal_embed(t: int, d: int) -> np.ndarray:
    """Interleaved sin/cos ladder with base 10000; t=0 gives [0,1,0,1,...]."""
    if d % 2 != 0:
        raise ConfigError(f"sinusoidal embedding width must be even, got {d}")
    if t < 0:
        raise ConfigError(f"timestep must be >= 0, got {t}")
    return _sinusoidal_batch(np.array([t]), d)[0]


def _sinusoidal_batch(ts: np.ndarray, d: int) -> np.ndarray:
    half = d // 2
    freqs = np.power(10000.0, -2.0 * np.arange(half) / d)
    ang = np.asarray(ts, dtype=np.float64)[:, None] * freqs[None, :]
    out = np.empty((len(ts), d))
    out[:, 0::2] = np.sin(ang)
    out[:, 1::2] = np.cos(ang)
    return out


def _as_batch_tensor(x, dim: int, what: str) -> Tensor:
    t = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))
    if t.ndim != 2 or t.shape[1] != dim:
        raise DimensionError(f"{what} shape {t.shape} != (batch, {dim})")
    return t


class _GroupStacks:
    """Per-forward stacked views of the per-group maps (uniform widths only).

    Stacking turns G tiny matmuls into one batched matmul; gradients still
    flow to the per-group parameter tensors through the concat nodes.
    """

    def __init__(self, params: DenoiserParams):
        cfg = params.cfg
        G, d = cfg.spec.n_groups, cfg.embed_dim
        w = cfg.spec.group_dims[0]
        self.width = w
        self.tok_w = concat(
            [reshape(params[f"tok{g}_w"], (1, w, d)) for g in range(G)], axis=0
        )
        self.tok_b = concat(
            [reshape(params[f"tok{g}_b"], (1, 1, d)) for g in range(G)], axis=1
        )
        self.untok_w = concat(
            [reshape(params[f"untok{g}_w"], (1, d, w)) for g in range(G)], axis=0
        )
        self.untok_b = concat(
            [reshape(params[f"untok{g}_b"], (1, 1, w)) for g in range(G)], axis=1
        )


def _group_stacks(params: DenoiserParams) -> _GroupStacks | None:
    if len(set(params.cfg.spec.group_dims)) != 1:
        return None
    return _GroupStacks(params)


def _tokenize_batch(
    params: DenoiserParams, x: Tensor, stacks: _GroupStacks | None = None
) -> Tensor:
    cfg = params.cfg
    G, d = cfg.spec.n_groups, cfg.embed_dim
    if stacks is not None:
        b = x.shape[0]
        grp = swapaxes(reshape(x, (b, G, stacks.width)), 0, 1)
        toks = swapaxes(matmul(grp, stacks.tok_w), 0, 1)
        return toks + stacks.tok_b
    offs = cfg.spec.offsets
    toks = []
    for g in range(G):
        grp = narrow(x, 1, int(offs[g]), cfg.spec.group_dims[g])
        tok = matmul(grp, params[f"tok{g}_w"]) + params[f"tok{g}_b"]
        toks.append(reshape(tok, (tok.shape[0], 1, d)))
    return concat(toks, axis=1)


def _untokenize_batch(
    params: DenoiserParams, tokens: Tensor, stacks: _GroupStacks | None = None
) -> Tensor:
    cfg = params.cfg
    G, d = cfg.spec.n_groups, cfg.embed_dim
    if stacks is not None:
        b = tokens.shape[0]
        out = matmul(swapaxes(tokens, 0, 1), stacks.untok_w)
        out = swapaxes(out, 0, 1) + stacks.untok_b
        return reshape(out, (b, G * stacks.width))
    outs = []
    for g in range(G):
        tok = reshape(narrow(tokens, 1, g, 1), (tokens.shape[0], d))
        outs.append(matmul(tok, params[f"untok{g}_w"]) + params[f"untok{g}_b"])
    return concat(outs, axis=1)


def tokenize(s: np.ndarray, params: DenoiserParams) -> np.ndarray:
    """Per-group linear maps onto a (G, embed_dim) token matrix (no positions)."""
    x = _as_batch_tensor(
        np.asarray(s, dtype=np.float64)[None, :].copy(),
        params.cfg.spec.total_dim,
        "latent",
    )
    return _tokenize_batch(params, x).data[0]


def untokenize(tokens: np.ndarray, params: DenoiserParams) -> np.ndarray:
    cfg = params.cfg
    tokens = np.asarray(tokens, dtype=np.float64)
    if tokens.shape != (cfg.spec.n_groups, cfg.embed_dim):
        raise DimensionError(
            f"token matrix shape {tokens.shape} != "
            f"({cfg.spec.n_groups}, {cfg.embed_dim})"
        )
    return _untokenize_batch(params, Tensor(tokens[None, :, :])).data[0]


def _heads(x: Tensor, n_heads: int) -> Tensor:
    b, L, d = x.shape
    return swapaxes(reshape(x, (b, L, n_heads, d // n_heads)), 1, 2)


def _unheads(x: Tensor) -> Tensor:
    b, h, L, dh = x.shape
    return reshape(swapaxes(x, 1, 2), (b, L, h * dh))


class ConditionCache:
    """Frozen condition stream for repeated inference calls.

    The condition tokens and their per-layer key/value projections do not
    depend on the noisy stream or the timestep, so a sampler can compute them
    once per batch of conditions and reuse them at every noise level. Values
    are plain arrays; using the cache under an active gradient tape is not
    supported.
    """

    def __init__(self, params: DenoiserParams, cond1, cond2):
        from .tensor import no_grad

        cfg = params.cfg
        G = cfg.spec.n_groups
        with no_grad():
            stacks = _group_stacks(params)
            pos = params["pos"]
            cond = concat(
                [
                    _tokenize_batch(params, _as_batch_tensor(cond1, cfg.spec.total_dim, "condition 1"), stacks) + narrow(pos, 0, 0, G),
                    _tokenize_batch(params, _as_batch_tensor(cond2, cfg.spec.total_dim, "condition 2"), stacks) + narrow(pos, 0, 1, G),
                ],
                axis=1,
            )
            self.keys: list[np.ndarray] = []
            self.values: list[np.ndarray] = []
            for i in range(cfg.n_layers):
                wkv = concat([params[f"L{i}_ca_wk"], params[f"L{i}_ca_wv"]], axis=1)
                kv = matmul(cond, wkv)
                d = cfg.embed_dim
                k = narrow(kv, 2, 0, d)
                v = narrow(kv, 2, d, d) + params[f"L{i}_ca_bv"]
                self.keys.append(_heads(k, cfg.n_heads).data)
                self.values.append(_heads(v, cfg.n_heads).data)


def precompute_condition_cache(
    params: DenoiserParams, cond1, cond2
) -> ConditionCache:
    return ConditionCache(params, cond1, cond2)


def _attn_block(params: DenoiserParams, i: int, blk: str, xq: Tensor, xkv: Tensor) -> Tensor:
    cfg = params.cfg
    d = cfg.embed_dim
    if xq is xkv:
        wqkv = concat(
            [params[f"L{i}_{blk}_wq"], params[f"L{i}_{blk}_wk"], params[f"L{i}_{blk}_wv"]],
            axis=1,
        )
        qkv = matmul(xq, wqkv)
        q = narrow(qkv, 2, 0, d) + params[f"L{i}_{blk}_bq"]
        k = narrow(qkv, 2, d, d)
        v = narrow(qkv, 2, 2 * d, d) + params[f"L{i}_{blk}_bv"]
    else:
        q = matmul(xq, params[f"L{i}_{blk}_wq"]) + params[f"L{i}_{blk}_bq"]
        wkv = concat([params[f"L{i}_{blk}_wk"], params[f"L{i}_{blk}_wv"]], axis=1)
        kv = matmul(xkv, wkv)
        k = narrow(kv, 2, 0, d)
        v = narrow(kv, 2, d, d) + params[f"L{i}_{blk}_bv"]
    out = _unheads(
        attention(_heads(q, cfg.n_heads), _heads(k, cfg.n_heads), _heads(v, cfg.n_heads))
    )
    return matmul(out, params[f"L{i}_{blk}_wo"]) + params[f"L{i}_{blk}_bo"]


def _cross_block_cached(
    params: DenoiserParams, i: int, xq: Tensor, keys: np.ndarray, values: np.ndarray
) -> Tensor:
    cfg = params.cfg
    q = matmul(xq, params[f"L{i}_ca_wq"]) + params[f"L{i}_ca_bq"]
    out = _unheads(attention(_heads(q, cfg.n_heads), Tensor(keys), Tensor(values)))
    return matmul(out, params[f"L{i}_ca_wo"]) + params[f"L{i}_ca_bo"]


def denoise_batch(
    params: DenoiserParams,
    x_noisy,
    ts: np.ndarray,
    cond1=None,
    cond2=None,
    cond_cache: ConditionCache | None = None,
) -> Tensor:
    """Batched clean-latent prediction; rows are independent examples.

    Pass either raw condition latents or a precomputed ``cond_cache`` (the
    cache path is for tape-free inference loops).
    """
    cfg = params.cfg
    dim, G, d = cfg.spec.total_dim, cfg.spec.n_groups, cfg.embed_dim
    x = _as_batch_tensor(x_noisy, dim, "noisy latent")
    ts = np.asarray(ts)
    if ts.shape != (x.shape[0],):
        raise DimensionError(f"timestep batch {ts.shape} != ({x.shape[0]},)")
    if np.any(ts < 0):
        raise ConfigError("timesteps must be >= 0")

    stacks = _group_stacks(params)
    pos = params["pos"]
    lat = _tokenize_batch(params, x, stacks)
    temb = Tensor(_sinusoidal_batch(ts, d))
    ttok = matmul(temb, params["tproj_w"]) + params["tproj_b"]
    h = concat([lat, reshape(ttok, (x.shape[0], 1, d))], axis=1) + pos

    if cond_cache is None:
        c1 = _as_batch_tensor(cond1, dim, "condition 1")
        c2 = _as_batch_tensor(cond2, dim, "condition 2")
        # shifted windows of the shared table keep the two condition slots
        # distinguishable under permutation-invariant attention
        cond = concat(
            [
                _tokenize_batch(params, c1, stacks) + narrow(pos, 0, 0, G),
                _tokenize_batch(params, c2, stacks) + narrow(pos, 0, 1, G),
            ],
            axis=1,
        )
    else:
        cond = None

    for i in range(cfg.n_layers):
        hn = layer_norm(h, params[f"L{i}_ln1_g"], params[f"L{i}_ln1_b"])
        h = h + _attn_block(params, i, "sa", hn, hn)
        hq = layer_norm(h, params[f"L{i}_ln2_g"], params[f"L{i}_ln2_b"])
        if cond is not None:
            h = h + _attn_block(params, i, "ca", hq, cond)
        else:
            h = h + _cross_block_cached(
                params, i, hq, cond_cache.keys[i], cond_cache.values[i]
            )
        hn = layer_norm(h, params[f"L{i}_ln3_g"], params[f"L{i}_ln3_b"])
        mid = gelu(matmul(hn, params[f"L{i}_mlp_w1"]) + params[f"L{i}_mlp_b1"])
        h = h + matmul(mid, params[f"L{i}_mlp_w2"]) + params[f"L{i}_mlp_b2"]

    if cfg.n_layers >= 1:
        h = layer_norm(h, params["lnf_g"], params["lnf_b"])
    return _untokenize_batch(params, narrow(h, 1, 0, G), stacks)


def denoise(
    s_noisy: np.ndarray,
    t: int,
    cond1: np.ndarray,
    cond2: np.ndarray,
    params: DenoiserParams,
) -> np.ndarray:
    """Single-latent denoise; see ``denoise_batch`` for the stream layout."""
    out = denoise_batch(
        params,
        np.asarray(s_noisy, dtype=np.float64)[None, :],
        np.array([t]),
        np.asarray(cond1, dtype=np.float64)[None, :],
        np.asarray(cond2, dtype=np.float64)[None, :],
    )
    return out.data[0]
