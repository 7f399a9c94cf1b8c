"""MQENet: dynamic graph attention, self-attention pooling and JK readout.

Each of the ``num_levels`` levels runs

    X' = Conv(act(LayerNorm(X)), A) + skip(X)
    Z  = tanh(D^-1/2 (A + I) D^-1/2 X' w_att)
    keep the ceil(k N) highest-scoring nodes, gate their rows by Z
    readout = [mean(X) || max(X)] over the kept nodes

and the per-level readouts are concatenated and classified by an MLP with
batch normalization.  Graphs in a batch are stored block-diagonally; every
node-level step is local to its graph, pooling and readout run per graph.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from fractions import Fraction

import numpy as np

from . import tensor as T
from .errors import EmptyGraph, ShapeMismatch
from .tensor import Tensor

ATTENTION_SLOPE = 0.2
CONV_KINDS = ("gatv2", "gat", "gcn")


@dataclass
class ModelConfig:
    in_features: int = 6
    out_classes: int = 8
    num_levels: int = 4
    hidden: int = 12
    pooling_ratio: float = 0.3
    activation: str = "leaky_relu"
    conv_kind: str = "gatv2"
    activation_slope: float = 0.01
    bn_momentum: float = 0.1
    eps: float = 1e-5

    def __post_init__(self):
        if not (0 < self.pooling_ratio <= 1):
            raise ValueError(f"pooling_ratio must lie in (0, 1], got {self.pooling_ratio}")
        if self.num_levels < 1:
            raise ValueError("num_levels must be >= 1")
        if self.activation not in T.ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.conv_kind not in CONV_KINDS:
            raise ValueError(f"unknown conv_kind {self.conv_kind!r}")

    @property
    def jk_width(self):
        return self.num_levels * 2 * self.hidden

    @property
    def mlp_dims(self):
        jk = self.jk_width
        return (jk, jk // 2, jk // 4, self.out_classes)

    def activate(self, x):
        if self.activation == "leaky_relu":
            return T.leaky_relu(x, self.activation_slope)
        return T.ACTIVATIONS[self.activation](x)

    def to_dict(self):
        return asdict(self)


@dataclass
class ConvParams:
    w: Tensor  # (d_out, 2 * d_in), acts on [h_i || h_j]
    b: Tensor  # (d_out,) for gatv2, (2 * d_out,) for gat
    norm_gain: Tensor
    norm_bias: Tensor
    w_res: Tensor | None = None  # (d_out, d_in) when d_in != d_out

    @property
    def d_in(self):
        return self.w.shape[1] // 2

    @property
    def d_out(self):
        return self.w.shape[0]


@dataclass
class PoolParams:
    w_att: Tensor  # (n_feat, 1)


# ---------------------------------------------------------------------------
# attention scores on single pairs


def _halves(p):
    w = p.w.data
    d = p.d_in
    return w[:, :d], w[:, d:]


def gat_score_static(h_i, h_j, p):
    """``LeakyReLU(a_l . W_l h_i + a_r . W_r h_j)``; ``b`` holds ``[a_l || a_r]``."""
    h_i, h_j = np.asarray(h_i, float), np.asarray(h_j, float)
    w_l, w_r = _halves(p)
    if h_i.shape != (p.d_in,) or h_j.shape != (p.d_in,) or p.b.shape != (2 * p.d_out,):
        raise ShapeMismatch("static attention shapes do not match parameters")
    b = p.b.data
    z = b[: p.d_out] @ (w_l @ h_i) + b[p.d_out :] @ (w_r @ h_j)
    return float(z if z > 0 else ATTENTION_SLOPE * z)


def gatv2_score(h_i, h_j, p):
    """``b . LeakyReLU(W [h_i || h_j])``."""
    h_i, h_j = np.asarray(h_i, float), np.asarray(h_j, float)
    if h_i.shape != (p.d_in,) or h_j.shape != (p.d_in,) or p.b.shape != (p.d_out,):
        raise ShapeMismatch("dynamic attention shapes do not match parameters")
    z = p.w.data @ np.concatenate([h_i, h_j])
    return float(p.b.data @ np.where(z > 0, z, ATTENTION_SLOPE * z))


# ---------------------------------------------------------------------------
# graph helpers


def with_self_loops(edges, n):
    """Edge list plus (i, i) for every node, sorted by (row, col)."""
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    loops = np.repeat(np.arange(n, dtype=np.int64)[:, None], 2, axis=1)
    allp = np.concatenate([edges, loops])
    order = np.lexsort((allp[:, 1], allp[:, 0]))
    return allp[order]


def sym_norm_values(edges_sl, n):
    """``1 / sqrt(d_i d_j)`` per entry of a self-looped edge list."""
    deg = np.bincount(edges_sl[:, 0], minlength=n).astype(np.float64)
    inv = 1.0 / np.sqrt(deg)
    return inv[edges_sl[:, 0]] * inv[edges_sl[:, 1]]


# ---------------------------------------------------------------------------
# layers


def attention_weights(h, edges_sl, p, cfg):
    """Per-edge softmax-normalized attention and the value projection ``W_r h``."""
    n, d = h.shape
    dst, src = edges_sl[:, 0], edges_sl[:, 1]
    w_l = T.slice_cols(p.w, 0, d)
    w_r = T.slice_cols(p.w, d, 2 * d)
    value = h @ w_r.T
    if cfg.conv_kind == "gcn":
        return Tensor(sym_norm_values(edges_sl, n)), value
    query = h @ w_l.T
    if cfg.conv_kind == "gatv2":
        pre = T.gather_rows(query, dst) + T.gather_rows(value, src)
        act = T.leaky_relu(pre, ATTENTION_SLOPE)
        scores = T.reshape(act @ T.reshape(p.b, (-1, 1)), (-1,))
    else:
        d_out = p.d_out
        a_l = T.reshape(T.slice_cols(T.reshape(p.b, (1, -1)), 0, d_out), (-1, 1))
        a_r = T.reshape(T.slice_cols(T.reshape(p.b, (1, -1)), d_out, 2 * d_out), (-1, 1))
        q = T.reshape(query @ a_l, (-1,))
        k = T.reshape(value @ a_r, (-1,))
        scores = T.leaky_relu(T.gather_rows(q, dst) + T.gather_rows(k, src), ATTENTION_SLOPE)
    return T.softmax_segmented(scores, dst, n), value


def conv_layer(x, edges, p, cfg):
    """One convolution level with pre-normalization and a residual connection."""
    x = T.as_tensor(x)
    n, m = x.shape
    if m != p.d_in:
        raise ShapeMismatch(f"conv expects {p.d_in} input features, got {m}")
    h = cfg.activate(T.layer_norm(x, p.norm_gain, p.norm_bias, cfg.eps))
    edges_sl = with_self_loops(edges, n)
    alpha, value = attention_weights(h, edges_sl, p, cfg)
    out = T.spmm(edges_sl, alpha, value, n)
    skip = x if p.w_res is None else x @ p.w_res.T
    return out + skip


def sagpool_scores(x, edges, p):
    """Node importance ``tanh(D^-1/2 (A+I) D^-1/2 X w_att)`` as an (n,) tensor."""
    x = T.as_tensor(x)
    n = x.shape[0]
    if p.w_att.shape != (x.shape[1], 1):
        raise ShapeMismatch(f"w_att {p.w_att.shape} for {x.shape[1]} features")
    edges_sl = with_self_loops(edges, n)
    proj = x @ p.w_att
    agg = T.spmm(edges_sl, Tensor(sym_norm_values(edges_sl, n)), proj, n)
    return T.tanh(T.reshape(agg, (-1,)))


def keep_count(n, k):
    """``ceil(k n)``, evaluated on the decimal value of ``k``."""
    return max(1, math.ceil(Fraction(str(k)) * n))


def top_rank(z, k):
    """Indices of the ``ceil(k n)`` largest scores, ties to the lower index,
    returned in ascending order."""
    z = np.asarray(z.data if isinstance(z, Tensor) else z, dtype=np.float64)
    n = len(z)
    if n == 0:
        raise EmptyGraph("cannot rank an empty score vector")
    order = np.lexsort((np.arange(n), -z))
    return np.sort(order[: keep_count(n, k)])


def top_rank_batched(z, graph_ids, num_graphs, k):
    z = np.asarray(z.data if isinstance(z, Tensor) else z, dtype=np.float64)
    n = len(z)
    counts = np.bincount(graph_ids, minlength=num_graphs)
    if np.any(counts == 0):
        raise EmptyGraph("a graph in the batch has no nodes")
    order = np.lexsort((np.arange(n), -z, graph_ids))
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    rank = np.empty(n, dtype=np.int64)
    rank[order] = np.arange(n) - np.repeat(starts, counts)
    keep = np.array([keep_count(int(c), k) for c in counts])
    return np.nonzero(rank < keep[graph_ids])[0]


def induced_subgraph(edges, idx, n):
    """Edges among ``idx`` (ascending), relabelled to 0..len(idx)-1."""
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    remap = np.full(n, -1, dtype=np.int64)
    remap[idx] = np.arange(len(idx))
    r, c = remap[edges[:, 0]], remap[edges[:, 1]]
    keep = (r >= 0) & (c >= 0)
    return np.stack([r[keep], c[keep]], axis=1)


def pool_apply(x, edges, z, idx):
    """Keep rows ``idx`` gated by their scores and the induced adjacency."""
    x, z = T.as_tensor(x), T.as_tensor(z)
    idx = np.asarray(idx, dtype=np.int64)
    x_new = T.row_scale(T.gather_rows(x, idx), T.gather_rows(z, idx))
    return x_new, induced_subgraph(edges, idx, x.shape[0])


def readout(x, graph_ids=None, num_graphs=1):
    """``[mean || max]`` over the rows of each graph, shape (num_graphs, 2f)."""
    x = T.as_tensor(x)
    if x.shape[0] == 0:
        raise EmptyGraph("readout of a graph with no nodes")
    if graph_ids is None:
        graph_ids = np.zeros(x.shape[0], dtype=np.int64)
    return T.concat_cols(
        [T.segment_mean(x, graph_ids, num_graphs), T.segment_max(x, graph_ids, num_graphs)]
    )


# ---------------------------------------------------------------------------
# the model


def _glorot(rng, shape):
    fan_out, fan_in = shape[0], shape[1] if len(shape) > 1 else 1
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


@dataclass
class Level:
    conv: ConvParams
    pool: PoolParams


@dataclass
class MLPLayer:
    w: Tensor  # (d_in, d_out)
    b: Tensor
    bn_gamma: Tensor | None = None
    bn_beta: Tensor | None = None
    running_mean: np.ndarray | None = None
    running_var: np.ndarray | None = None


@dataclass
class MQENet:
    cfg: ModelConfig
    levels: list = field(default_factory=list)
    mlp: list = field(default_factory=list)
    # per-feature input standardization, fitted on training data
    input_shift: np.ndarray | None = None
    input_scale: np.ndarray | None = None

    @classmethod
    def init(cls, cfg, seed=0):
        rng = np.random.Generator(np.random.PCG64(seed))
        levels = []
        d_in = cfg.in_features
        for _ in range(cfg.num_levels):
            d_out = cfg.hidden
            b_len = 2 * d_out if cfg.conv_kind == "gat" else d_out
            conv = ConvParams(
                w=Tensor(_glorot(rng, (d_out, 2 * d_in)), True),
                b=Tensor(_glorot(rng, (b_len, 1)).ravel(), True),
                norm_gain=Tensor(np.ones(d_in), True),
                norm_bias=Tensor(np.zeros(d_in), True),
                w_res=Tensor(_glorot(rng, (d_out, d_in)), True) if d_in != d_out else None,
            )
            pool = PoolParams(Tensor(_glorot(rng, (d_out, 1)), True))
            levels.append(Level(conv, pool))
            d_in = d_out
        dims = cfg.mlp_dims
        mlp = []
        for k in range(len(dims) - 1):
            layer = MLPLayer(
                w=Tensor(_glorot(rng, (dims[k + 1], dims[k])).T.copy(), True),
                b=Tensor(np.zeros(dims[k + 1]), True),
            )
            if k < len(dims) - 2:
                layer.bn_gamma = Tensor(np.ones(dims[k + 1]), True)
                layer.bn_beta = Tensor(np.zeros(dims[k + 1]), True)
                layer.running_mean = np.zeros(dims[k + 1])
                layer.running_var = np.ones(dims[k + 1])
            mlp.append(layer)
        return cls(cfg, levels, mlp, np.zeros(cfg.in_features), np.ones(cfg.in_features))

    def parameters(self):
        """Learnable tensors keyed by a stable dotted path."""
        out = {}
        for l, level in enumerate(self.levels):
            c = level.conv
            out[f"levels.{l}.conv.w"] = c.w
            out[f"levels.{l}.conv.b"] = c.b
            out[f"levels.{l}.conv.norm_gain"] = c.norm_gain
            out[f"levels.{l}.conv.norm_bias"] = c.norm_bias
            if c.w_res is not None:
                out[f"levels.{l}.conv.w_res"] = c.w_res
            out[f"levels.{l}.pool.w_att"] = level.pool.w_att
        for k, layer in enumerate(self.mlp):
            out[f"mlp.{k}.w"] = layer.w
            out[f"mlp.{k}.b"] = layer.b
            if layer.bn_gamma is not None:
                out[f"mlp.{k}.bn_gamma"] = layer.bn_gamma
                out[f"mlp.{k}.bn_beta"] = layer.bn_beta
        return out

    def buffers(self):
        out = {"input_shift": self.input_shift, "input_scale": self.input_scale}
        for k, layer in enumerate(self.mlp):
            if layer.running_mean is not None:
                out[f"mlp.{k}.running_mean"] = layer.running_mean
                out[f"mlp.{k}.running_var"] = layer.running_var
        return out

    def set_buffer(self, name, value):
        value = np.array(value, dtype=np.float64)
        if name in ("input_shift", "input_scale"):
            setattr(self, name, value)
            return
        _, k, attr = name.split(".")
        setattr(self.mlp[int(k)], attr, value)

    def zero_grad(self):
        for p in self.parameters().values():
            p.grad = None

    # forward -------------------------------------------------------------

    def embed(self, x, edges, graph_ids, num_graphs):
        """Run the conv/pool stack and return the JK vector per graph."""
        cfg = self.cfg
        x = T.as_tensor(x)
        graph_ids = np.asarray(graph_ids, dtype=np.int64)
        x = T.mul(T.sub(x, self.input_shift), 1.0 / self.input_scale)
        reads = []
        for level in self.levels:
            x = conv_layer(x, edges, level.conv, cfg)
            z = sagpool_scores(x, edges, level.pool)
            idx = top_rank_batched(z, graph_ids, num_graphs, cfg.pooling_ratio)
            x, edges = pool_apply(x, edges, z, idx)
            graph_ids = graph_ids[idx]
            reads.append(readout(x, graph_ids, num_graphs))
        return T.concat_cols(reads)

    def head(self, h, training=False):
        cfg = self.cfg
        for layer in self.mlp:
            h = h @ layer.w + layer.b
            if layer.bn_gamma is None:
                break
            if training:
                h, mu, var = T.batch_norm(h, layer.bn_gamma, layer.bn_beta, cfg.eps)
                n = h.shape[0]
                unbiased = var * n / (n - 1) if n > 1 else var
                mom = cfg.bn_momentum
                layer.running_mean = (1 - mom) * layer.running_mean + mom * mu
                layer.running_var = (1 - mom) * layer.running_var + mom * unbiased
            else:
                h = T.batch_norm(
                    h, layer.bn_gamma, layer.bn_beta, cfg.eps,
                    running=(layer.running_mean, layer.running_var),
                )
            h = cfg.activate(h)
        return T.log_softmax(h)

    def forward_batch(self, batch, training=False):
        """Log-probabilities, one row per graph of a :class:`GraphBatch`."""
        if batch.x.shape[1] != self.cfg.in_features:
            raise ShapeMismatch(
                f"model expects {self.cfg.in_features} features, batch has {batch.x.shape[1]}"
            )
        h = self.embed(batch.x, batch.edges, batch.graph_ids, batch.num_graphs)
        return self.head(h, training)

    def __call__(self, graph, training=False):
        from .train import batch_graphs

        return self.forward_batch(batch_graphs([graph]), training)


def forward(graph, model, training=False):
    """Log-probabilities of a single graph as an (out_classes,) tensor."""
    return T.reshape(model(graph, training), (-1,))
