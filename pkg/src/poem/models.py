"""Encoder, decoder and scoring heads, all built as autodiff graphs.

The encoder is a tanh MLP backbone with two MLP heads: one for the embedding
mean, one for the precision, mapped through softplus and clamped. The
ProtoNet baseline reuses the same backbone and mean head and drops the
precision head.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .autodiff import Graph, Node, evaluate
from .gaussian_poe import (
    NEGLECT,
    PRECISION_MAX,
    PRECISION_MIN,
    DiagGaussian,
    PriorSpec,
    nll_graph,
    poem_scores_graph,
)
from .seeding import rng_for

SOFTPLUS_INV_ONE = float(np.log(np.expm1(1.0)))
PRECISION_OUT_SCALE = 0.01  # final precision layer starts near-constant, so tau ~ 1 everywhere

METHODS = ("poem", "protonet")
PRECISION_MODES = ("learned", "fixed_unit")


def _dense_init(rng: np.random.Generator, fan_in: int, fan_out: int, scale: float = 1.0):
    bound = scale * np.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=(fan_in, fan_out)), np.zeros((1, fan_out))


def _mlp(g: Graph, x: Node, layers: Sequence[tuple[Node, Node]], act: str, final_act: bool = False) -> Node:
    h = x
    for k, (w, b) in enumerate(layers):
        h = h @ w + b
        if k < len(layers) - 1 or final_act:
            h = getattr(g, act)(h)
    return h


@dataclass(frozen=True)
class EncoderConfig:
    input_dim: int
    hidden: int = 256
    embed_dim: int = 64
    backbone_layers: int = 3
    head_layers: int = 3


class Encoder:
    """Parameters of the dual-head encoder, keyed by layer name."""

    def __init__(self, config: EncoderConfig, params: dict[str, np.ndarray]):
        self.config = config
        self.params = params

    @classmethod
    def init(cls, config: EncoderConfig, seed: int) -> "Encoder":
        # backbone + mean head and the precision head use separate streams, so
        # POEM and ProtoNet runs with one seed share their common weights
        shared = rng_for(seed, 1)
        prec_rng = rng_for(seed, 2)
        params: dict[str, np.ndarray] = {}
        width = config.input_dim
        for k in range(config.backbone_layers):
            params[f"backbone.{k}.w"], params[f"backbone.{k}.b"] = _dense_init(shared, width, config.hidden)
            width = config.hidden
        for head, rng in (("mean", shared), ("precision", prec_rng)):
            width = config.hidden
            for k in range(config.head_layers):
                last = k == config.head_layers - 1
                out = config.embed_dim if last else config.hidden
                scale = PRECISION_OUT_SCALE if (last and head == "precision") else 1.0
                params[f"{head}.{k}.w"], params[f"{head}.{k}.b"] = _dense_init(rng, width, out, scale)
                width = out
        params[f"precision.{config.head_layers - 1}.b"][:] = SOFTPLUS_INV_ONE
        return cls(config, params)

    def copy(self) -> "Encoder":
        return Encoder(self.config, {k: v.copy() for k, v in self.params.items()})

    def names(self, precision: bool = True) -> list[str]:
        return [k for k in self.params if precision or not k.startswith("precision.")]

    def build(self, g: Graph, x: Node, precision: bool = True, trainable: bool = True):
        """Add the encoder to ``g``. Returns (mean, precision or None, {name: param node})."""
        nodes = {}
        for name in self.names(precision):
            nodes[name] = g.param(name, self.params[name]) if trainable else g.constant(self.params[name])

        def layers(prefix, n):
            return [(nodes[f"{prefix}.{k}.w"], nodes[f"{prefix}.{k}.b"]) for k in range(n)]

        cfg = self.config
        h = _mlp(g, x, layers("backbone", cfg.backbone_layers), "tanh", final_act=True)
        mean = _mlp(g, h, layers("mean", cfg.head_layers), "tanh")
        prec = None
        if precision:
            raw = _mlp(g, h, layers("precision", cfg.head_layers), "tanh")
            prec = g.clamp(g.shift(g.softplus(raw), PRECISION_MIN), PRECISION_MIN, PRECISION_MAX)
        return mean, prec, nodes if trainable else {}

    def encode_arrays(self, features: np.ndarray, precision: bool = True):
        g = Graph()
        mean, prec, _ = self.build(g, g.constant(np.atleast_2d(features)), precision, trainable=False)
        values = evaluate(g)
        tau = values[prec] if prec is not None else np.ones_like(values[mean])
        return values[mean], tau

    def encode(self, features: np.ndarray) -> list[DiagGaussian]:
        if np.shape(features)[-1] != self.config.input_dim:
            raise ValueError(f"input width {np.shape(features)[-1]} != encoder width {self.config.input_dim}")
        mu, tau = self.encode_arrays(features)
        return [DiagGaussian(m, t) for m, t in zip(mu, tau)]


# ProtoNet and the fixed-precision closed form


def proto_scores(support_means: Sequence[np.ndarray], query_mean: np.ndarray) -> np.ndarray:
    """Negative squared Euclidean distance from the query to each class mean."""
    protos = np.stack([np.mean(np.atleast_2d(s), axis=0) for s in support_means])
    return -np.sum((protos - query_mean[None, :]) ** 2, axis=1)


def a4_log_scores(support_means: Sequence[np.ndarray], query_mean: np.ndarray) -> np.ndarray:
    """Unnormalised log p_n with every precision fixed to one.

    Per dimension: 1/2 log(V/(V+1)) - V/(2(V+1)) (mu - prototype)^2, summed
    over the D dimensions.
    """
    dim = query_mean.shape[0]
    out = []
    for s in support_means:
        s = np.atleast_2d(s)
        v = s.shape[0]
        d2 = np.sum((query_mean - s.mean(axis=0)) ** 2)
        out.append(0.5 * dim * np.log(v / (v + 1.0)) - v / (2.0 * (v + 1.0)) * d2)
    return np.array(out)


def a4_probabilities(support_means: Sequence[np.ndarray], query_mean: np.ndarray) -> np.ndarray:
    logp = a4_log_scores(support_means, query_mean)
    p = np.exp(logp - logp.max())
    return p / p.sum()


def proto_scores_graph(g: Graph, support_mean: Node, query_mean: Node, assign: np.ndarray,
                       n_queries: int, dim: int) -> Node:
    counts = assign.sum(axis=1, keepdims=True)
    protos = g.constant(assign / counts) @ support_mean
    diff = g.reshape(query_mean, (n_queries, 1, dim)) - g.reshape(protos, (1, assign.shape[0], dim))
    return g.neg(g.sum(g.square(diff), axes=2))


@dataclass
class EpisodeGraph:
    graph: Graph
    loss: Node
    scores: Node
    mean: Node
    precision: Node | None
    params: dict[str, Node]


def episode_graph(encoder: Encoder, support_x: np.ndarray, query_x: np.ndarray, assign: np.ndarray,
                  targets: np.ndarray, method: str = "poem", precision_mode: str = "learned",
                  prior: PriorSpec = NEGLECT, trainable: bool = True) -> EpisodeGraph:
    """Encode support and query rows in one batch, score, and attach the NLL."""
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}")
    if precision_mode not in PRECISION_MODES:
        raise ValueError(f"unknown precision mode {precision_mode!r}")
    n_sup, n_q = support_x.shape[0], query_x.shape[0]
    dim = encoder.config.embed_dim
    g = Graph()
    x = g.constant(np.concatenate([support_x, query_x], axis=0))
    use_prec = method == "poem" and precision_mode == "learned"
    mean, prec, params = encoder.build(g, x, precision=use_prec, trainable=trainable)
    s_mean = g.index_select(mean, np.arange(n_sup))
    q_mean = g.index_select(mean, np.arange(n_sup, n_sup + n_q))
    if method == "protonet":
        scores = proto_scores_graph(g, s_mean, q_mean, assign, n_q, dim)
    else:
        if use_prec:
            s_prec = g.index_select(prec, np.arange(n_sup))
            q_prec = g.index_select(prec, np.arange(n_sup, n_sup + n_q))
        else:
            s_prec = g.constant(np.ones((n_sup, dim)))
            q_prec = g.constant(np.ones((n_q, dim)))
        scores = poem_scores_graph(g, s_mean, s_prec, q_mean, q_prec, assign, n_q, dim, prior)
    loss = nll_graph(g, scores, targets, assign.shape[0])
    return EpisodeGraph(g, loss, scores, mean, prec, params)


# decoder


@dataclass(frozen=True)
class DecoderConfig:
    embed_dim: int
    hidden: int = 256
    layers: int = 4
    height: int = 11
    width: int = 11
    n_types: int = 4

    @property
    def output_dim(self) -> int:
        return self.height * self.width * self.n_types


class Decoder:
    def __init__(self, config: DecoderConfig, params: dict[str, np.ndarray]):
        self.config = config
        self.params = params

    @classmethod
    def init(cls, config: DecoderConfig, seed: int) -> "Decoder":
        rng = rng_for(seed, 3)
        params = {}
        width = config.embed_dim
        for k in range(config.layers):
            out = config.output_dim if k == config.layers - 1 else config.hidden
            params[f"decoder.{k}.w"], params[f"decoder.{k}.b"] = _dense_init(rng, width, out)
            width = out
        return cls(config, params)

    def build(self, g: Graph, z: Node, trainable: bool = True):
        nodes = {k: (g.param(k, v) if trainable else g.constant(v)) for k, v in self.params.items()}
        layers = [(nodes[f"decoder.{k}.w"], nodes[f"decoder.{k}.b"]) for k in range(self.config.layers)]
        return _mlp(g, z, layers, "relu"), (nodes if trainable else {})

    def decode(self, embedding: np.ndarray) -> np.ndarray:
        """Grid logits (H, W, n_types) for one embedding vector."""
        embedding = np.asarray(embedding, dtype=np.float64).reshape(1, -1)
        if embedding.shape[1] != self.config.embed_dim:
            raise ValueError(f"embedding width {embedding.shape[1]} != decoder width {self.config.embed_dim}")
        g = Graph()
        out, _ = self.build(g, g.constant(embedding), trainable=False)
        c = self.config
        return evaluate(g)[out].reshape(c.height, c.width, c.n_types)


def decoder_graph(decoder: Decoder, embeddings: np.ndarray, targets: np.ndarray, trainable: bool = True):
    """(graph, mse loss, logits, param nodes) for a batch of embeddings and one-hot grids."""
    g = Graph()
    logits, params = decoder.build(g, g.constant(np.atleast_2d(embeddings)), trainable)
    target = g.constant(np.asarray(targets, dtype=np.float64).reshape(logits_shape(decoder, embeddings)))
    loss = g.mean(g.square(logits - target))
    return g, loss, logits, params


def logits_shape(decoder: Decoder, embeddings) -> tuple[int, int]:
    return (np.atleast_2d(embeddings).shape[0], decoder.config.output_dim)


def cell_accuracy(logits: np.ndarray, onehot: np.ndarray) -> float:
    """Fraction of grid cells whose argmax type matches the target."""
    return float(np.mean(np.argmax(logits, axis=-1) == np.argmax(onehot, axis=-1)))


# checkpoints: magic, u32 header length, JSON header, little-endian float64 weights

MAGIC = b"POEMCKPT"


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()


def save_checkpoint(path: str | Path, params: dict[str, np.ndarray], embed_dim: int, config: dict) -> Path:
    path = Path(path)
    header = {"layers": [{"name": k, "shape": list(v.shape)} for k, v in params.items()],
              "embed_dim": int(embed_dim), "config_hash": config_hash(config)}
    blob = json.dumps(header).encode()
    with path.open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for v in params.values():
            fh.write(np.ascontiguousarray(v, dtype="<f8").tobytes())
    return path


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if raw[:len(MAGIC)] != MAGIC:
        raise ValueError("not a checkpoint file")
    (n,) = struct.unpack("<I", raw[len(MAGIC):len(MAGIC) + 4])
    start = len(MAGIC) + 4
    header = json.loads(raw[start:start + n])
    offset = start + n
    params = {}
    for layer in header["layers"]:
        count = int(np.prod(layer["shape"]))
        data = np.frombuffer(raw, dtype="<f8", count=count, offset=offset)
        params[layer["name"]] = data.reshape(layer["shape"]).astype(np.float64)
        offset += 8 * count
    if offset != len(raw):
        raise ValueError("checkpoint payload size does not match header")
    return params, header


def encoder_config_dict(config: EncoderConfig) -> dict:
    return asdict(config)
