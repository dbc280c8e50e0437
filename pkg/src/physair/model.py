"""The physics-guided graph network: diffusion, convection, and local
modules fused per layer by dynamic softmax weights.

Layer k computes three candidate feature maps from the incoming node
features and blends them per node:

    x_D = l * relu(L_D . node_mlp(x) . W)              graph diffusion
    x_C = update(concat(m, node_mlp(x) + m))           wind-driven transport,
          with m_i the sum of edge messages into i
    x_L = norm(relu((I + A) . node_mlp(x) . W_c))      local-source response
    x'  = w_D x_D + w_C x_C + w_L x_L,  (w_D, w_C, w_L) = softmax(fusion(x_D|x_C|x_L))

The model never sees node count at construction time: every parameter acts
on the feature axis, so a network trained on N sensors runs unchanged on
the (N+1)-node inference graph that adds a dummy target node.

Node inputs are (window + 1)-vectors: the window of hourly readings plus
an observed flag that is 0 on the masked or dummy node. Batches are dense
(B, N, features) arrays; per-sample wind enters through the convection
edge features (B, E, 3).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import (Mlp, Param, Tensor, add, concat, linear_pair, make_op, matmul,
                       mul, narrow, relu, softmax)
from .errors import ShapeError, ValidationError
from .geo import Graph, GraphMatrices, build_matrices

PRESETS = {"S": (3, 128), "M": (4, 256), "L": (5, 512)}

LOCAL_NORMS = ("inverse", "direct")
AGGREGATIONS = ("sum", "mean")


@dataclass
class ModelConfig:
    """Architecture knobs. A preset fixes (n_layers, hidden_dim) exactly.

    local_norm picks which side of the local module's normalization matrix
    is applied: "inverse" divides features by the degree-like diagonal
    (the default; it actually shrinks them), "direct" multiplies by it.
    """

    preset: str | None = "S"
    n_layers: int | None = None
    hidden_dim: int | None = None
    window: int = 1
    local_norm: str = "inverse"
    aggregation: str = "sum"
    activation: str = "relu"

    def __post_init__(self):
        if self.preset is not None:
            if self.preset not in PRESETS:
                raise ValidationError(f"unknown preset {self.preset!r}, expected one of {sorted(PRESETS)}")
            layers, dim = PRESETS[self.preset]
            if self.n_layers not in (None, layers) or self.hidden_dim not in (None, dim):
                raise ValidationError(
                    f"preset {self.preset} fixes n_layers={layers}, hidden_dim={dim}; "
                    f"drop preset to use custom sizes")
            self.n_layers, self.hidden_dim = layers, dim
        if self.n_layers is None or self.hidden_dim is None:
            raise ValidationError("need a preset or explicit n_layers and hidden_dim")
        if self.n_layers < 1 or self.hidden_dim < 1:
            raise ValidationError(f"bad architecture: {self.n_layers} layers, dim {self.hidden_dim}")
        if self.window < 1:
            raise ValidationError(f"window must be >= 1 hour, got {self.window}")
        if self.local_norm not in LOCAL_NORMS:
            raise ValidationError(f"local_norm must be one of {LOCAL_NORMS}, got {self.local_norm!r}")
        if self.aggregation not in AGGREGATIONS:
            raise ValidationError(f"aggregation must be one of {AGGREGATIONS}, got {self.aggregation!r}")
        if self.activation not in Mlp.ACTIVATIONS:
            raise ValidationError(f"activation must be one of {Mlp.ACTIVATIONS}, got {self.activation!r}")

    @property
    def input_dim(self) -> int:
        """Hourly window plus the observed-flag bit."""
        return self.window + 1

    def to_dict(self) -> dict:
        return {"preset": self.preset, "n_layers": self.n_layers, "hidden_dim": self.hidden_dim,
                "window": self.window, "local_norm": self.local_norm,
                "aggregation": self.aggregation, "activation": self.activation}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**{k: d[k] for k in ("preset", "n_layers", "hidden_dim", "window",
                                        "local_norm", "aggregation", "activation") if k in d})


class GraphWiring:
    """Constant per-graph arrays in the form the model consumes.

    Holds the scaled Laplacian and self-loop adjacency as constant tensors,
    the diagonal of the local normalization (both orientations), and the
    index plans that gather node features onto edges and sum edge messages
    back onto nodes. Everything here is read-only once built.
    """

    def __init__(self, graph: Graph, matrices: GraphMatrices | None = None):
        if matrices is None:
            matrices = build_matrices(graph)
        n = graph.n_nodes
        self.graph = graph
        self.n_nodes = n
        self.n_edges = graph.n_edges
        self.src = graph.src
        self.dst = graph.dst
        self.lap_scaled = Tensor(matrices.lap_scaled)
        self.loop_adj = Tensor(np.eye(n) + matrices.a)
        m_diag = np.diag(matrices.m)
        self.norm_direct = Tensor(m_diag[:, None])
        self.norm_inverse = Tensor((1.0 / m_diag)[:, None])
        # positions of each node's edge slots, used by the gather vjps;
        # edges are grouped by destination, so each node appears n-1 times
        # on either end
        self.src_positions = np.argsort(graph.src, kind="stable").reshape(n, n - 1)
        self.dst_positions = np.arange(graph.n_edges).reshape(n, n - 1)

    def gather_src(self, x: Tensor) -> Tensor:
        """(B, N, d) -> (B, E, d): feature of each edge's source node."""
        return _gather(x, self.src, self.src_positions)

    def gather_dst(self, x: Tensor) -> Tensor:
        """(B, N, d) -> (B, E, d): feature of each edge's destination node."""
        return _gather(x, self.dst, self.dst_positions)

    def sum_incoming(self, messages: Tensor) -> Tensor:
        """(B, E, d) -> (B, N, d): sum of messages grouped by destination."""
        b, e, d = messages.shape
        n = self.n_nodes
        if e != self.n_edges:
            raise ShapeError(f"expected {self.n_edges} edge rows, got {e}")
        data = messages.data.reshape(b, n, n - 1, d).sum(axis=2)

        def vjp(g):
            spread = np.broadcast_to(g[:, :, None, :], (b, n, n - 1, d))
            return (spread.reshape(b, e, d),)

        return make_op(data, (messages,), vjp)


def _gather(x: Tensor, index: np.ndarray, positions: np.ndarray) -> Tensor:
    """Select node rows onto edges; positions maps each node to its edge slots."""
    if x.ndim != 3:
        raise ShapeError(f"gather expects (batch, nodes, features), got {x.shape}")

    def vjp(g):
        return (g[:, positions, :].sum(axis=2),)

    return make_op(x.data[:, index, :], (x,), vjp)


def _convection_messages(h: Tensor, e: Tensor, w: Tensor, b: Tensor,
                         wiring: "GraphWiring", activation: str) -> Tensor:
    """act((h[dst] + e) @ w_r + (h[src] + e) @ w_s + b), reassociated.

    w is the stacked message weight [w_r; w_s]. Multiplying h by each half
    before gathering turns the two edge-sized GEMMs into node-sized ones,
    and e only meets the summed weight once. Same math as running the
    stacked weight over concat(h[dst] + e, h[src] + e), reassociated, so
    values agree to rounding and the gradient is checked against the
    finite-difference oracle like every other fused op.
    """
    bsz, n, dim = h.shape
    n_edges = wiring.n_edges
    if w.shape != (2 * dim, dim) or b.shape != (dim,):
        raise ShapeError(f"message weight must be ({2 * dim}, {dim}) with ({dim},) bias, "
                         f"got {w.shape} and {b.shape}")
    if e.shape != (bsz, n_edges, dim):
        raise ShapeError(f"edge features {e.shape}, expected ({bsz}, {n_edges}, {dim})")

    w_recv = w.data[:dim]
    w_send = w.data[dim:]
    w_sum = w_recv + w_send
    h2 = h.data.reshape(-1, dim)
    hr = (h2 @ w_recv).reshape(bsz, n, dim)
    hs = (h2 @ w_send).reshape(bsz, n, dim)
    out = (e.data.reshape(-1, dim) @ w_sum).reshape(bsz, n_edges, dim)
    buf = np.take(hr, wiring.dst, axis=1)
    np.add(out, buf, out=out)
    np.take(hs, wiring.src, axis=1, out=buf)
    np.add(out, buf, out=out)
    np.add(out, b.data, out=out)
    if activation == "relu":
        np.maximum(out, 0.0, out=out)

    def vjp(g):
        g_pre = g * (out > 0) if activation == "relu" else g
        g2 = g_pre.reshape(-1, dim)
        # edges arrive grouped by destination, so the dst-gather adjoint is
        # a plain reshape-sum; the src side needs the position table
        g_recv = g_pre.reshape(bsz, n, n - 1, dim).sum(axis=2)
        g_send = g_pre[:, wiring.src_positions, :].sum(axis=2)
        gh = ge = gw = gb = None
        if h.requires_grad:
            gh = (g_recv.reshape(-1, dim) @ w_recv.T
                  + g_send.reshape(-1, dim) @ w_send.T).reshape(h.shape)
        if e.requires_grad:
            ge = (g2 @ w_sum.T).reshape(e.shape)
        if w.requires_grad:
            shared = e.data.reshape(-1, dim).T @ g2
            gw = np.empty_like(w.data)
            gw[:dim] = shared + h2.T @ g_recv.reshape(-1, dim)
            gw[dim:] = shared + h2.T @ g_send.reshape(-1, dim)
        if b.requires_grad:
            gb = g2.sum(axis=0)
        return gh, ge, gw, gb

    return make_op(out, (h, e, w, b), vjp)


class DiffusionModule:
    """x_D = l * act(L_D . node_mlp(x) . W): spectral smoothing over the graph.

    The learnable vector l plays the role of a per-feature diffusion rate.
    It starts at ones (neutral scaling) rather than random values.
    """

    def __init__(self, dim: int, rng: np.random.Generator, name: str, activation: str = "relu"):
        self.activation = activation
        self.node_mlp = Mlp([dim, dim], rng, name=f"{name}.node_mlp", output_activation=activation)
        bound = 1.0 / np.sqrt(dim)
        self.gcn_weight = Param(rng.uniform(-bound, bound, size=(dim, dim)), name=f"{name}.gcn_weight")
        self.scale = Param(np.ones(dim), name=f"{name}.scale")

    def __call__(self, x: Tensor, wiring: GraphWiring) -> Tensor:
        h = matmul(wiring.lap_scaled, self.node_mlp(x))
        h = matmul(h, self.gcn_weight)
        if self.activation == "relu":
            h = relu(h)
        return mul(self.scale, h)

    def params(self):
        return self.node_mlp.params() + [self.gcn_weight, self.scale]


class ConvectionModule:
    """Wind-driven message passing with residual edge features.

    Each edge carries its own feature e' (from the wind triple in the
    first layer, from the previous layer's e' afterwards). e' is added to
    both endpoint features before the message MLP, the messages into each
    node are aggregated, and the update MLP mixes the aggregate with the
    node's own feature. Returns both the node update and e' for the next
    layer.
    """

    def __init__(self, dim: int, edge_in_dim: int, rng: np.random.Generator, name: str,
                 aggregation: str = "sum", activation: str = "relu"):
        self.dim = dim
        self.aggregation = aggregation
        self.node_mlp = Mlp([dim, dim], rng, name=f"{name}.node_mlp", output_activation=activation)
        self.edge_mlp = Mlp([edge_in_dim, dim], rng, name=f"{name}.edge_mlp", output_activation=activation)
        self.message_mlp = Mlp([2 * dim, dim], rng, name=f"{name}.message_mlp", output_activation=activation)
        self.update_mlp = Mlp([2 * dim, dim], rng, name=f"{name}.update_mlp", output_activation=activation)

    def __call__(self, x: Tensor, edge_feats: Tensor, wiring: GraphWiring):
        h = self.node_mlp(x)
        e = self.edge_mlp(edge_feats)

        # message_mlp(concat(h[dst] + e, h[src] + e)) without any edge-sized
        # temporaries or concatenation; see _convection_messages
        w, b, act = self.message_mlp.layers[0]
        phi = _convection_messages(h, e, w, b, wiring, act)

        m = wiring.sum_incoming(phi)
        if self.aggregation == "mean":
            m = mul(m, Tensor(1.0 / (wiring.n_nodes - 1)))
        uw, ub, uact = self.update_mlp.layers[0]
        out = linear_pair(m, add(h, m),
                          narrow(uw, 0, self.dim, axis=0),
                          narrow(uw, self.dim, 2 * self.dim, axis=0),
                          ub, activation=uact)
        return out, e

    def params(self):
        return (self.node_mlp.params() + self.edge_mlp.params()
                + self.message_mlp.params() + self.update_mlp.params())


class LocalModule:
    """x_L = norm((I + A) . node_mlp(x) . W_c): one self-loop graph convolution.

    norm is the diagonal M (or its inverse) built from 1/dist edge
    features; which orientation applies is the model config's call.
    """

    def __init__(self, dim: int, rng: np.random.Generator, name: str,
                 local_norm: str = "inverse", activation: str = "relu"):
        self.local_norm = local_norm
        self.activation = activation
        self.node_mlp = Mlp([dim, dim], rng, name=f"{name}.node_mlp", output_activation=activation)
        bound = 1.0 / np.sqrt(dim)
        self.conv_weight = Param(rng.uniform(-bound, bound, size=(dim, dim)), name=f"{name}.conv_weight")

    def __call__(self, x: Tensor, wiring: GraphWiring) -> Tensor:
        f = matmul(matmul(wiring.loop_adj, self.node_mlp(x)), self.conv_weight)
        if self.activation == "relu":
            f = relu(f)
        norm = wiring.norm_inverse if self.local_norm == "inverse" else wiring.norm_direct
        return mul(norm, f)

    def params(self):
        return self.node_mlp.params() + [self.conv_weight]


class FusionHead:
    """Per-node softmax blending of the three module outputs."""

    def __init__(self, dim: int, rng: np.random.Generator, name: str):
        self.mlp = Mlp([3 * dim, 3], rng, name=f"{name}.mlp")

    def __call__(self, x_d: Tensor, x_c: Tensor, x_l: Tensor):
        if not (x_d.shape == x_c.shape == x_l.shape):
            raise ShapeError(f"fusion inputs differ: {x_d.shape}, {x_c.shape}, {x_l.shape}")
        weights = softmax(self.mlp(concat([x_d, x_c, x_l])))
        w_d = narrow(weights, 0, 1)
        w_c = narrow(weights, 1, 2)
        w_l = narrow(weights, 2, 3)
        blended = add(add(mul(w_d, x_d), mul(w_c, x_c)), mul(w_l, x_l))
        return blended, weights

    def params(self):
        return self.mlp.params()


class GnnLayer:
    """One stacked layer: the three physics modules plus their fusion head."""

    def __init__(self, dim: int, edge_in_dim: int, rng: np.random.Generator, name: str,
                 local_norm: str, aggregation: str, activation: str):
        self.diffusion = DiffusionModule(dim, rng, f"{name}.diffusion", activation=activation)
        self.convection = ConvectionModule(dim, edge_in_dim, rng, f"{name}.convection",
                                           aggregation=aggregation, activation=activation)
        self.local = LocalModule(dim, rng, f"{name}.local", local_norm=local_norm,
                                 activation=activation)
        self.fusion = FusionHead(dim, rng, f"{name}.fusion")

    def __call__(self, x: Tensor, edge_feats: Tensor, wiring: GraphWiring):
        x_d = self.diffusion(x, wiring)
        x_c, next_edges = self.convection(x, edge_feats, wiring)
        x_l = self.local(x, wiring)
        blended, weights = self.fusion(x_d, x_c, x_l)
        return blended, next_edges, weights

    def params(self):
        return (self.diffusion.params() + self.convection.params()
                + self.local.params() + self.fusion.params())


class PhysicsGnn:
    """Input embedding, the stacked physics layers, and the scalar head.

    Construction is a pure function of (config, seed): the parameter count
    and every initial value are reproducible. Node count is a property of
    the wiring passed to forward, never of the model.
    """

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(np.random.SeedSequence([0x9A1D, int(seed)]))
        d = config.hidden_dim
        self.input_embed = Mlp([config.input_dim, d], rng, name="input_embed")
        self.layers = []
        for k in range(config.n_layers):
            edge_in = 3 if k == 0 else d
            self.layers.append(GnnLayer(d, edge_in, rng, f"layer{k}", config.local_norm,
                                        config.aggregation, config.activation))
        self.output_head = Mlp([d, 1], rng, name="output_head")

    def forward(self, x, wiring: GraphWiring, conv_feats) -> Tensor:
        """Predict one scalar per node.

        x: (B, N, window+1) array or Tensor; conv_feats: (B, E, 3) wind
        triples, one row per edge per sample. Returns (B, N, 1).
        """
        x = x if isinstance(x, Tensor) else Tensor(x)
        edge_feats = conv_feats if isinstance(conv_feats, Tensor) else Tensor(conv_feats)
        if x.ndim != 3 or x.shape[1] != wiring.n_nodes:
            raise ShapeError(f"inputs {x.shape} do not match graph with {wiring.n_nodes} nodes")
        if x.shape[2] != self.config.input_dim:
            raise ShapeError(f"inputs have {x.shape[2]} features, model expects {self.config.input_dim}")
        if edge_feats.ndim != 3 or edge_feats.shape[1] != wiring.n_edges or edge_feats.shape[2] != 3:
            raise ShapeError(f"conv features {edge_feats.shape} do not match {wiring.n_edges} edges")

        h = self.input_embed(x)
        for layer in self.layers:
            h, edge_feats, _ = layer(h, edge_feats, wiring)
        return self.output_head(h)

    def params(self) -> list:
        out = self.input_embed.params()
        for layer in self.layers:
            out.extend(layer.params())
        out.extend(self.output_head.params())
        return out

    def param_count(self) -> int:
        return sum(p.data.size for p in self.params())
