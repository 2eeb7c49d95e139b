"""Noise-prediction networks eps_theta(x_k, k, x_hist).

Two variants share one calling convention.  Samples are flat vectors of
length ``N * d`` (node-major), histories are ``(H, N * d)``; both accept a
leading batch axis.

* ``mlp`` -- flattened sample, flattened history and a learned step embedding
  concatenated into a three-layer perceptron.
* ``spatiotemporal`` -- GRU history encoder, multi-head attention fusion with
  the current sample, graph-convolutional GRU layers over an adaptive
  adjacency, a residual block and a per-node projection.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import numerics as nx


@dataclass
class PredictorConfig:
    variant: str = "mlp"
    d: int = 1
    N: int = 1
    H: int = 16
    T: int = 1000
    hidden: int = 64
    e: int = 16
    cheb_order: int = 2
    heads: int = 2
    layers: int = 2

    def __post_init__(self):
        if self.variant not in ("mlp", "spatiotemporal"):
            raise ValueError(f"unknown predictor variant {self.variant!r}")
        if self.hidden % self.heads:
            raise ValueError(f"hidden={self.hidden} not divisible by heads={self.heads}")
        if self.cheb_order < 1 or self.e < 1 or self.layers < 1:
            raise ValueError("cheb_order, e and layers must all be >= 1")
        if min(self.d, self.N, self.H, self.T, self.hidden) < 1:
            raise ValueError("dimensions must be positive")

    @property
    def dim(self) -> int:
        return self.N * self.d

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------- graph ops

def adaptive_adjacency(node_embeddings) -> nx.Tensor:
    """Row-stochastic A = softmax_rows(relu(E E^T))."""
    E = nx.as_tensor(node_embeddings)
    return nx.softmax(nx.relu(nx.matmul(E, nx.transpose(E))), axis=-1)


def chebyshev_supports(A, order: int) -> list:
    """T_0..T_{K-1} of A_hat, where A_hat is A + I renormalised by rows.

    ``A`` must be row-stochastic, which makes every row of A + I sum to 2.
    """
    A = nx.as_tensor(A)
    n = A.shape[0]
    eye = np.eye(n)
    a_hat = nx.scale(nx.add(A, eye), 0.5)
    supports = [nx.Tensor(eye), a_hat][:order]
    while len(supports) < order:
        supports.append(nx.subtract(nx.scale(nx.matmul(a_hat, supports[-1]), 2.0), supports[-2]))
    return supports


def node_weights(node_embeddings, pool) -> nx.Tensor:
    """Per-node weights E @ pool, pool shaped (e, K, d_in, d_out) -> (N, K, d_in, d_out)."""
    E, pool = nx.as_tensor(node_embeddings), nx.as_tensor(pool)
    e, K, din, dout = pool.shape
    W = nx.matmul(E, nx.reshape(pool, (e, K * din * dout)))
    return nx.reshape(W, (E.shape[0], K, din, dout))


def chebyshev_conv(X, A, weights, bias=None) -> nx.Tensor:
    """sum_j T_j(A_hat) X W_j with node-specific W_j.

    X is (..., N, d_in); weights (N, K, d_in, d_out); bias (N, d_out).
    """
    X, weights = nx.as_tensor(X), nx.as_tensor(weights)
    N, K, din, dout = weights.shape
    if X.shape[-2:] != (N, din):
        raise nx.ShapeError(f"chebyshev_conv: X {X.shape} does not end with ({N}, {din})")
    lead = X.shape[:-2]
    out = None
    for j, Tj in enumerate(chebyshev_supports(A, K)):
        mixed = nx.reshape(nx.matmul(Tj, X), lead + (N, 1, din))
        term = nx.matmul(mixed, nx.slice_(weights, (slice(None), j)))
        out = term if out is None else nx.add(out, term)
    out = nx.reshape(out, lead + (N, dout))
    return out if bias is None else nx.add(out, bias)


# ---------------------------------------------------------------- helpers

def _one_hot(k, T: int) -> np.ndarray:
    k = np.asarray(k, dtype=np.int64).reshape(-1)
    out = np.zeros((k.size, T))
    out[np.arange(k.size), k] = 1.0
    return out


def _dense(gen, fan_in, fan_out, gain=1.0):
    return gen.normal(0.0, gain / np.sqrt(fan_in), size=(fan_in, fan_out))


def _gru_step(x, h, p, prefix):
    hidden = h.shape[-1]
    gx = nx.add(nx.matmul(x, p[prefix + ".wx"]), p[prefix + ".b"])
    gh = nx.matmul(h, p[prefix + ".wh"])
    z = nx.sigmoid(nx.add(nx.slice_(gx, (..., slice(0, hidden))), nx.slice_(gh, (..., slice(0, hidden)))))
    r = nx.sigmoid(nx.add(nx.slice_(gx, (..., slice(hidden, 2 * hidden))),
                          nx.slice_(gh, (..., slice(hidden, 2 * hidden)))))
    cand = nx.tanh(nx.add(nx.slice_(gx, (..., slice(2 * hidden, 3 * hidden))),
                          nx.matmul(nx.multiply(r, h), p[prefix + ".wc"])))
    return nx.add(h, nx.multiply(z, nx.subtract(cand, h)))


class NoisePredictor:
    """Holds parameters and evaluates eps_theta on batches."""

    def __init__(self, config: PredictorConfig, params: dict | None = None, seed: int = 0):
        self.config = config
        self.params = params if params is not None else self._init(nx.Rng(seed).child("predictor"))

    # parameters ------------------------------------------------------
    def _init(self, rng: nx.Rng) -> dict:
        c = self.config
        gen = rng.generator()
        p = {}
        if c.variant == "mlp":
            din = c.dim + c.H * c.dim + c.hidden
            p["time_emb"] = gen.normal(0.0, 1.0, size=(c.T, c.hidden))
            p["mlp.w0"] = _dense(gen, din, c.hidden)
            p["mlp.b0"] = np.zeros(c.hidden)
            p["mlp.w1"] = _dense(gen, c.hidden, c.hidden)
            p["mlp.b1"] = np.zeros(c.hidden)
            p["mlp.w2"] = _dense(gen, c.hidden, c.dim)
            p["mlp.b2"] = np.zeros(c.dim)
        else:
            h, K, e = c.hidden, c.cheb_order, c.e
            p["node_emb"] = gen.normal(0.0, 1.0, size=(c.N, e))
            p["hist.wx"] = _dense(gen, c.d, 3 * h)
            p["hist.wh"] = _dense(gen, h, 2 * h)
            # candidate recurrent weight kept separate: the reset gate scales h before it
            p["hist.wc"] = _dense(gen, h, h)
            p["hist.b"] = np.zeros(3 * h)
            p["attn.wq"] = _dense(gen, c.d, h)
            p["attn.wk"] = _dense(gen, h, h)
            p["attn.wv"] = _dense(gen, h, h)
            p["attn.wo"] = _dense(gen, h, h)
            p["time_emb"] = gen.normal(0.0, 1.0, size=(c.T, h))
            for layer in range(c.layers):
                pre = f"gcgru{layer}"
                p[pre + ".gate_pool"] = gen.normal(0.0, 1.0 / np.sqrt(2 * h * K * e), size=(e, K, 2 * h, 2 * h))
                p[pre + ".gate_bias"] = np.zeros((e, 2 * h))
                p[pre + ".cand_pool"] = gen.normal(0.0, 1.0 / np.sqrt(2 * h * K * e), size=(e, K, 2 * h, h))
                p[pre + ".cand_bias"] = np.zeros((e, h))
            p["res.w1"] = _dense(gen, h, h)
            p["res.b1"] = np.zeros(h)
            p["res.w2"] = _dense(gen, h, h, gain=0.5)
            p["res.b2"] = np.zeros(h)
            p["proj.w"] = _dense(gen, 2 * h, c.d)
            p["proj.b"] = np.zeros(c.d)
        return {name: nx.parameter(v, name=name) for name, v in p.items()}

    def parameters(self) -> dict:
        return self.params

    # evaluation ------------------------------------------------------
    def _prepare(self, x_k, k, x_hist):
        c = self.config
        x_k = nx.as_tensor(x_k)
        x_hist = nx.as_tensor(x_hist)
        single = x_k.ndim == 1
        if single:
            x_k = nx.reshape(x_k, (1, -1))
            x_hist = nx.reshape(x_hist, (1,) + x_hist.shape)
        B = x_k.shape[0]
        if x_k.shape != (B, c.dim):
            raise nx.ShapeError(f"x_k shape {x_k.shape} != (batch, {c.dim})")
        if x_hist.shape != (B, c.H, c.dim):
            raise nx.ShapeError(f"x_hist shape {x_hist.shape} != ({B}, {c.H}, {c.dim})")
        k = np.broadcast_to(np.asarray(k, dtype=np.int64), (B,))
        if np.any(k < 0) or np.any(k >= c.T):
            raise ValueError(f"diffusion step outside [0, {c.T}): {k.min()}..{k.max()}")
        return x_k, k, x_hist, single

    def __call__(self, x_k, k, x_hist, params: dict | None = None) -> nx.Tensor:
        p = self.params if params is None else params
        x_k, k, x_hist, single = self._prepare(x_k, k, x_hist)
        if self.config.variant == "mlp":
            out = self._mlp(p, x_k, k, x_hist)
        else:
            out = self._spatiotemporal(p, x_k, k, x_hist)
        return nx.reshape(out, (self.config.dim,)) if single else out

    def predict(self, x_k, k, x_hist) -> np.ndarray:
        """Gradient-free evaluation, chunked over the batch axis."""
        x_k = np.asarray(x_k, dtype=np.float64)
        x_hist = np.asarray(x_hist, dtype=np.float64)
        if x_k.ndim == 1:
            return self(x_k, k, x_hist).data.copy()
        k = np.broadcast_to(np.asarray(k), (x_k.shape[0],))
        frozen = {n: nx.Tensor(t.data) for n, t in self.params.items()}
        chunks = [self(x_k[i:i + 1024], k[i:i + 1024], x_hist[i:i + 1024], params=frozen).data
                  for i in range(0, x_k.shape[0], 1024)]
        return np.concatenate(chunks, axis=0) if chunks else np.zeros((0, self.config.dim))

    def _mlp(self, p, x_k, k, x_hist):
        c = self.config
        B = x_k.shape[0]
        emb = nx.matmul(_one_hot(k, c.T), p["time_emb"])
        h = nx.concat([x_k, nx.reshape(x_hist, (B, c.H * c.dim)), emb], axis=-1)
        h = nx.silu(nx.linear(h, p["mlp.w0"], p["mlp.b0"]))
        h = nx.silu(nx.linear(h, p["mlp.w1"], p["mlp.b1"]))
        return nx.linear(h, p["mlp.w2"], p["mlp.b2"])

    def adjacency(self, params: dict | None = None) -> nx.Tensor:
        if self.config.variant != "spatiotemporal":
            raise ValueError("adjacency is only defined for the spatiotemporal variant")
        p = self.params if params is None else params
        return adaptive_adjacency(p["node_emb"])

    def _spatiotemporal(self, p, x_k, k, x_hist):
        c = self.config
        B, N, d, h, H = x_k.shape[0], c.N, c.d, c.hidden, c.H
        nh, dh = c.heads, c.hidden // c.heads
        x = nx.reshape(x_k, (B, N, d))
        hist = nx.reshape(x_hist, (B, H, N, d))

        # history encoder: one GRU shared across nodes
        state = nx.Tensor(np.zeros((B, N, h)))
        states = []
        for t in range(H):
            state = _gru_step(nx.slice_(hist, (slice(None), t)), state, p, "hist")
            states.append(nx.reshape(state, (B, N, 1, h)))
        keys = nx.concat(states, axis=2)  # (B, N, H, h)

        # attention fusion, current sample as query
        q = nx.matmul(x, p["attn.wq"])  # (B, N, h)
        kk = nx.transpose(nx.reshape(nx.matmul(keys, p["attn.wk"]), (B, N, H, nh, dh)), (0, 1, 3, 4, 2))
        vv = nx.transpose(nx.reshape(nx.matmul(keys, p["attn.wv"]), (B, N, H, nh, dh)), (0, 1, 3, 2, 4))
        qh = nx.reshape(q, (B, N, nh, 1, dh))
        att = nx.softmax(nx.scale(nx.matmul(qh, kk), 1.0 / np.sqrt(dh)), axis=-1)  # (B,N,nh,1,H)
        ctx = nx.reshape(nx.matmul(att, vv), (B, N, h))
        fused = nx.add(q, nx.matmul(ctx, p["attn.wo"]))
        emb = nx.matmul(_one_hot(k, c.T), p["time_emb"])
        fused = nx.add(fused, nx.reshape(emb, (B, 1, h)))

        # spatiotemporal layers: graph-convolutional GRU cells
        E = p["node_emb"]
        A = adaptive_adjacency(E)
        inp = fused
        for layer in range(c.layers):
            pre = f"gcgru{layer}"
            wg = node_weights(E, p[pre + ".gate_pool"])
            wc = node_weights(E, p[pre + ".cand_pool"])
            zr = nx.sigmoid(chebyshev_conv(nx.concat([inp, state], axis=-1), A, wg,
                                           nx.matmul(E, p[pre + ".gate_bias"])))
            z = nx.slice_(zr, (..., slice(0, h)))
            r = nx.slice_(zr, (..., slice(h, 2 * h)))
            cand = nx.tanh(chebyshev_conv(nx.concat([inp, nx.multiply(r, state)], axis=-1), A, wc,
                                          nx.matmul(E, p[pre + ".cand_bias"])))
            inp = nx.add(cand, nx.multiply(z, nx.subtract(state, cand)))

        res = nx.silu(nx.linear(inp, p["res.w1"], p["res.b1"]))
        hid = nx.add(inp, nx.linear(res, p["res.w2"], p["res.b2"]))
        out = nx.linear(nx.concat([hid, fused], axis=-1), p["proj.w"], p["proj.b"])
        return nx.reshape(out, (B, N * d))

    # serialisation ---------------------------------------------------
    def to_dict(self) -> dict:
        return {"config": self.config.to_dict(), "params": nx.params_to_dict(self.params)}

    @classmethod
    def from_dict(cls, blob: dict) -> "NoisePredictor":
        return cls(PredictorConfig(**blob["config"]), params=nx.params_from_dict(blob["params"]))


def predict_noise(model: NoisePredictor, x_k, k, x_hist) -> np.ndarray:
    return model.predict(x_k, k, x_hist)
