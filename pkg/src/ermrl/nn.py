"""Minimal float64 neural-network engine with hand-written gradients.

Provides dense MLPs, a post-norm transformer layer (multi-head attention and
an inner MLP, each followed by add-and-layernorm), per-row softmax heads, and
Adam. Gradients are analytic and checked against central finite differences
in the test suite. No positional encodings: responder rows form an unordered
set, so the stack is permutation-equivariant by construction.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

Array = np.ndarray


def _glorot(rng: np.random.Generator, d_in: int, d_out: int) -> Array:
    limit = np.sqrt(6.0 / (d_in + d_out))
    return rng.uniform(-limit, limit, size=(d_in, d_out))


def _activate(name: str, z: Array) -> Array:
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "linear":
        return z
    if name == "softplus":
        return np.logaddexp(0.0, z)
    raise ValueError(f"unknown activation {name}")


def _activate_grad(name: str, z: Array) -> Array:
    if name == "relu":
        return (z > 0).astype(float)
    if name == "linear":
        return np.ones_like(z)
    if name == "softplus":
        return 1.0 / (1.0 + np.exp(-z))
    raise ValueError(f"unknown activation {name}")


def softmax_rows(z: Array) -> Array:
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_rows_backward(p: Array, dp: Array) -> Array:
    inner = (dp * p).sum(axis=-1, keepdims=True)
    return p * (dp - inner)


# --- dense layers / MLP ------------------------------------------------------

@dataclass
class DenseLayer:
    w: Array
    b: Array
    activation: str = "linear"
    dropout: float = 0.0

    def arrays(self) -> list[Array]:
        return [self.w, self.b]


@dataclass
class MlpParams:
    layers: list[DenseLayer]

    def arrays(self) -> list[Array]:
        return [a for layer in self.layers for a in layer.arrays()]

    @property
    def d_in(self) -> int:
        return self.layers[0].w.shape[0]

    @property
    def d_out(self) -> int:
        return self.layers[-1].w.shape[1]


def mlp_init(sizes: list[int], rng: np.random.Generator,
             activations: list[str] | None = None,
             dropouts: list[float] | None = None) -> MlpParams:
    """sizes = [d_in, h1, ..., d_out]; default hidden relu + linear output."""
    n = len(sizes) - 1
    if activations is None:
        activations = ["relu"] * (n - 1) + ["linear"]
    if dropouts is None:
        dropouts = [0.0] * n
    layers = [DenseLayer(_glorot(rng, sizes[i], sizes[i + 1]), np.zeros(sizes[i + 1]),
                         activations[i], dropouts[i]) for i in range(n)]
    return MlpParams(layers)


def mlp_forward(p: MlpParams, x: Array, train: bool = False,
                rng: np.random.Generator | None = None) -> tuple[Array, list]:
    x = np.atleast_2d(np.asarray(x, dtype=float))
    cache = []
    h = x
    for layer in p.layers:
        pre = h @ layer.w + layer.b
        act = _activate(layer.activation, pre)
        mask = None
        if train and layer.dropout > 0.0:
            if rng is None:
                raise ValueError("dropout in training mode needs an explicit rng")
            mask = (rng.random(act.shape) >= layer.dropout) / (1.0 - layer.dropout)
            act = act * mask
        cache.append((h, pre, mask))
        h = act
    return h, cache


def mlp_backward(p: MlpParams, cache: list, dy: Array) -> tuple[Array, MlpParams]:
    dy = np.atleast_2d(np.asarray(dy, dtype=float))
    grads = MlpParams([DenseLayer(np.zeros_like(l.w), np.zeros_like(l.b),
                                  l.activation, l.dropout) for l in p.layers])
    dh = dy
    for i in reversed(range(len(p.layers))):
        layer = p.layers[i]
        h_in, pre, mask = cache[i]
        if mask is not None:
            dh = dh * mask
        dz = dh * _activate_grad(layer.activation, pre)
        grads.layers[i].w[...] = h_in.T @ dz
        grads.layers[i].b[...] = dz.sum(axis=0)
        dh = dz @ layer.w.T
    return dh, grads


# --- layer norm ---------------------------------------------------------------

_NORM_EPS = 1e-5


@dataclass
class NormParams:
    gain: Array
    bias: Array

    def arrays(self) -> list[Array]:
        return [self.gain, self.bias]


def norm_init(d: int) -> NormParams:
    return NormParams(np.ones(d), np.zeros(d))


def norm_forward(p: NormParams, x: Array) -> tuple[Array, tuple]:
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + _NORM_EPS)
    xhat = (x - mu) * inv
    return xhat * p.gain + p.bias, (xhat, inv)


def norm_backward(p: NormParams, cache: tuple, dy: Array) -> tuple[Array, NormParams]:
    xhat, inv = cache
    grads = NormParams(np.zeros_like(p.gain), np.zeros_like(p.bias))
    grads.gain[...] = (dy * xhat).sum(axis=0)
    grads.bias[...] = dy.sum(axis=0)
    dxhat = dy * p.gain
    mean_d = dxhat.mean(axis=-1, keepdims=True)
    mean_dx = (dxhat * xhat).mean(axis=-1, keepdims=True)
    dx = inv * (dxhat - mean_d - xhat * mean_dx)
    return dx, grads


# --- multi-head attention -----------------------------------------------------

@dataclass
class MhaParams:
    wq: Array
    bq: Array
    wk: Array
    bk: Array
    wv: Array
    bv: Array
    wo: Array
    bo: Array
    n_heads: int

    def arrays(self) -> list[Array]:
        return [self.wq, self.bq, self.wk, self.bk, self.wv, self.bv, self.wo, self.bo]

    @property
    def width(self) -> int:
        return self.wq.shape[0]


def mha_init(width: int, n_heads: int, rng: np.random.Generator) -> MhaParams:
    if n_heads < 1 or width % n_heads != 0:
        raise ValueError("model width must be a positive multiple of the head count")
    return MhaParams(
        _glorot(rng, width, width), np.zeros(width),
        _glorot(rng, width, width), np.zeros(width),
        _glorot(rng, width, width), np.zeros(width),
        _glorot(rng, width, width), np.zeros(width),
        n_heads,
    )


def _split_heads(x: Array, h: int) -> Array:
    n, m = x.shape
    return x.reshape(n, h, m // h).transpose(1, 0, 2)  # (h, n, d)


def _merge_heads(x: Array) -> Array:
    h, n, d = x.shape
    return x.transpose(1, 0, 2).reshape(n, h * d)


def mha_forward(p: MhaParams, x: Array) -> tuple[Array, tuple]:
    h = p.n_heads
    q = _split_heads(x @ p.wq + p.bq, h)
    k = _split_heads(x @ p.wk + p.bk, h)
    v = _split_heads(x @ p.wv + p.bv, h)
    scale = 1.0 / np.sqrt(q.shape[-1])
    scores = (q @ k.transpose(0, 2, 1)) * scale
    attn = softmax_rows(scores)
    heads = attn @ v                      # (h, n, d)
    merged = _merge_heads(heads)
    y = merged @ p.wo + p.bo
    return y, (x, q, k, v, attn, merged, scale)


def mha_backward(p: MhaParams, cache: tuple, dy: Array) -> tuple[Array, MhaParams]:
    x, q, k, v, attn, merged, scale = cache
    h = p.n_heads
    grads = MhaParams(*(np.zeros_like(a) for a in p.arrays()), n_heads=h)
    grads.wo[...] = merged.T @ dy
    grads.bo[...] = dy.sum(axis=0)
    dmerged = dy @ p.wo.T
    dheads = _split_heads(dmerged, h)
    dattn = dheads @ v.transpose(0, 2, 1)
    dv = attn.transpose(0, 2, 1) @ dheads
    dscores = softmax_rows_backward(attn, dattn)
    dq = (dscores @ k) * scale
    dk = (dscores.transpose(0, 2, 1) @ q) * scale
    dx = np.zeros_like(x)
    for name, dmat in (("q", dq), ("k", dk), ("v", dv)):
        flat = _merge_heads(dmat)
        w = getattr(p, "w" + name)
        getattr(grads, "w" + name)[...] = x.T @ flat
        getattr(grads, "b" + name)[...] = flat.sum(axis=0)
        dx += flat @ w.T
    return dx, grads


# --- transformer stack ---------------------------------------------------------

@dataclass
class TrxlLayer:
    mha: MhaParams
    norm_mha: NormParams
    mlp: MlpParams
    norm_mlp: NormParams

    def arrays(self) -> list[Array]:
        return (self.mha.arrays() + self.norm_mha.arrays()
                + self.mlp.arrays() + self.norm_mlp.arrays())


@dataclass
class TrxlParams:
    """N transformer layers between linear input/output projections, closed by
    a per-row softmax over the depot axis."""
    in_proj: DenseLayer
    layers: list[TrxlLayer]
    out_proj: DenseLayer

    def arrays(self) -> list[Array]:
        out = self.in_proj.arrays()
        for layer in self.layers:
            out += layer.arrays()
        return out + self.out_proj.arrays()

    @property
    def feat_dim(self) -> int:
        return self.in_proj.w.shape[0]

    @property
    def n_outputs(self) -> int:
        return self.out_proj.w.shape[1]


def trxl_init(feat_dim: int, n_outputs: int, rng: np.random.Generator,
              width: int | None = None, n_heads: int = 2, n_layers: int = 1,
              inner_sizes: tuple[int, ...] = (32,), inner_dropout: float = 0.0) -> TrxlParams:
    if n_layers < 1:
        raise ValueError("need at least one transformer layer")
    width = feat_dim if width is None else width
    layers = []
    for _ in range(n_layers):
        inner = mlp_init([width, *inner_sizes, width], rng,
                         dropouts=[inner_dropout] * len(inner_sizes) + [0.0])
        layers.append(TrxlLayer(mha_init(width, n_heads, rng), norm_init(width),
                                inner, norm_init(width)))
    in_proj = DenseLayer(_glorot(rng, feat_dim, width), np.zeros(width))
    out_proj = DenseLayer(_glorot(rng, width, n_outputs), np.zeros(n_outputs))
    return TrxlParams(in_proj, layers, out_proj)


def trxl_forward(p: TrxlParams, x: Array, train: bool = False,
                 rng: np.random.Generator | None = None) -> tuple[Array, dict]:
    """Rows are responders, outputs are per-row depot likelihoods summing to 1."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 2 or x.shape[0] < 1:
        raise ValueError("input must be a nonempty (responders, features) matrix")
    if x.shape[1] != p.feat_dim:
        raise ValueError(f"expected feature width {p.feat_dim}, got {x.shape[1]}")
    cache: dict = {"x": x, "layers": []}
    h = x @ p.in_proj.w + p.in_proj.b
    for layer in p.layers:
        a, mha_cache = mha_forward(layer.mha, h)
        u, n1_cache = norm_forward(layer.norm_mha, h + a)
        f, mlp_cache = mlp_forward(layer.mlp, u, train=train, rng=rng)
        y, n2_cache = norm_forward(layer.norm_mlp, u + f)
        cache["layers"].append((mha_cache, n1_cache, mlp_cache, n2_cache))
        h = y
    logits = h @ p.out_proj.w + p.out_proj.b
    probs = softmax_rows(logits)
    cache["pre_out"] = h
    cache["probs"] = probs
    return probs, cache


def trxl_backward(p: TrxlParams, cache: dict, dprobs: Array) -> tuple[Array, TrxlParams]:
    grads = TrxlParams(
        DenseLayer(np.zeros_like(p.in_proj.w), np.zeros_like(p.in_proj.b)),
        [TrxlLayer(MhaParams(*(np.zeros_like(a) for a in l.mha.arrays()), n_heads=l.mha.n_heads),
                   NormParams(np.zeros_like(l.norm_mha.gain), np.zeros_like(l.norm_mha.bias)),
                   MlpParams([DenseLayer(np.zeros_like(d.w), np.zeros_like(d.b),
                                         d.activation, d.dropout) for d in l.mlp.layers]),
                   NormParams(np.zeros_like(l.norm_mlp.gain), np.zeros_like(l.norm_mlp.bias)))
         for l in p.layers],
        DenseLayer(np.zeros_like(p.out_proj.w), np.zeros_like(p.out_proj.b)),
    )
    dlogits = softmax_rows_backward(cache["probs"], np.asarray(dprobs, dtype=float))
    grads.out_proj.w[...] = cache["pre_out"].T @ dlogits
    grads.out_proj.b[...] = dlogits.sum(axis=0)
    dh = dlogits @ p.out_proj.w.T
    for i in reversed(range(len(p.layers))):
        layer = p.layers[i]
        mha_cache, n1_cache, mlp_cache, n2_cache = cache["layers"][i]
        dsum2, gn2 = norm_backward(layer.norm_mlp, n2_cache, dh)
        grads.layers[i].norm_mlp.gain[...] = gn2.gain
        grads.layers[i].norm_mlp.bias[...] = gn2.bias
        du = dsum2.copy()
        dmlp_in, gmlp = mlp_backward(layer.mlp, mlp_cache, dsum2)
        for j, gl in enumerate(gmlp.layers):
            grads.layers[i].mlp.layers[j].w[...] = gl.w
            grads.layers[i].mlp.layers[j].b[...] = gl.b
        du += dmlp_in
        dsum1, gn1 = norm_backward(layer.norm_mha, n1_cache, du)
        grads.layers[i].norm_mha.gain[...] = gn1.gain
        grads.layers[i].norm_mha.bias[...] = gn1.bias
        dh = dsum1.copy()
        dmha_in, gmha = mha_backward(layer.mha, mha_cache, dsum1)
        for a_dst, a_src in zip(grads.layers[i].mha.arrays(), gmha.arrays()):
            a_dst[...] = a_src
        dh += dmha_in
    grads.in_proj.w[...] = cache["x"].T @ dh
    grads.in_proj.b[...] = dh.sum(axis=0)
    dx = dh @ p.in_proj.w.T
    return dx, grads


# --- optimizer ------------------------------------------------------------------

@dataclass
class AdamState:
    m: list[Array]
    v: list[Array]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_init(params) -> AdamState:
    arrays = params.arrays()
    return AdamState([np.zeros_like(a) for a in arrays],
                     [np.zeros_like(a) for a in arrays])


def adam_step(state: AdamState, params, grads, lr: float):
    """One Adam update, in place on the parameter arrays."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for i, (a, g) in enumerate(zip(params.arrays(), grads.arrays())):
        state.m[i] = b1 * state.m[i] + (1 - b1) * g
        state.v[i] = b2 * state.v[i] + (1 - b2) * g * g
        a -= lr * (state.m[i] / c1) / (np.sqrt(state.v[i] / c2) + state.eps)
    return params


def soft_update(target, online, tau: float):
    """Polyak averaging: target <- (1 - tau) * target + tau * online."""
    for t_arr, o_arr in zip(target.arrays(), online.arrays()):
        t_arr *= 1.0 - tau
        t_arr += tau * o_arr


def clone(params):
    """Deep copy of a parameter container (targets start as exact copies)."""
    import copy
    return copy.deepcopy(params)


def zeros_like_params(params):
    g = clone(params)
    for a in g.arrays():
        a[...] = 0.0
    return g


def scale_grads(grads, factor: float):
    for a in grads.arrays():
        a *= factor
    return grads


def accumulate_grads(total, grads):
    for t_arr, g_arr in zip(total.arrays(), grads.arrays()):
        t_arr += g_arr
    return total


# --- checkpoints ------------------------------------------------------------------

_CHECKPOINT_VERSION = 1


def _describe(params) -> dict:
    if isinstance(params, MlpParams):
        return {
            "kind": "mlp",
            "sizes": [params.layers[0].w.shape[0]] + [l.w.shape[1] for l in params.layers],
            "activations": [l.activation for l in params.layers],
            "dropouts": [l.dropout for l in params.layers],
        }
    if isinstance(params, TrxlParams):
        return {
            "kind": "trxl",
            "feat_dim": params.feat_dim,
            "n_outputs": params.n_outputs,
            "width": params.in_proj.w.shape[1],
            "n_heads": params.layers[0].mha.n_heads,
            "n_layers": len(params.layers),
            "inner_sizes": [l.w.shape[1] for l in params.layers[0].mlp.layers[:-1]],
            "inner_dropout": params.layers[0].mlp.layers[0].dropout,
        }
    raise TypeError(f"cannot checkpoint {type(params)}")


def _build(spec: dict):
    rng = np.random.default_rng(0)
    if spec["kind"] == "mlp":
        return mlp_init(spec["sizes"], rng, spec["activations"], spec["dropouts"])
    if spec["kind"] == "trxl":
        return trxl_init(spec["feat_dim"], spec["n_outputs"], rng, spec["width"],
                         spec["n_heads"], spec["n_layers"], tuple(spec["inner_sizes"]),
                         spec["inner_dropout"])
    raise ValueError(f"unknown checkpoint kind {spec['kind']}")


def save_checkpoint(path, named_params: dict) -> None:
    meta = {"version": _CHECKPOINT_VERSION,
            "entries": {name: _describe(p) for name, p in named_params.items()}}
    payload = {"__meta__": np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)}
    for name, p in named_params.items():
        for i, a in enumerate(p.arrays()):
            payload[f"{name}.{i}"] = a
    np.savez(path, **payload)


def load_checkpoint(path) -> dict:
    with np.load(path) as data:
        meta = json.loads(bytes(data["__meta__"]).decode())
        if meta["version"] != _CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta['version']}")
        out = {}
        for name, spec in meta["entries"].items():
            p = _build(spec)
            for i, a in enumerate(p.arrays()):
                a[...] = data[f"{name}.{i}"]
            out[name] = p
    return out
