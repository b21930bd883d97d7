"""Recurrent message passing over frame-derived graph vertices.

Each timestep projects the frame onto ``N`` vertices, adds the previous
vertex states, routes information with one round of multi-head
self-attention and applies a gated per-vertex update.  Attention logits can
be biased by an explicit ``N x N`` edge estimate from a template bank or from
class-token projections; without one, attention similarity alone decides
connectivity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError
from .nn import GRUCell, Linear, Module
from .tensor import Parameter, Tensor

EDGE_KINDS = ("implicit", "template_bank", "class_token")


def build_vertices(feat: Tensor, proj: Linear) -> Tensor:
    """[...,C,H,W] -> [...,H*W,D], one vertex per location in row-major order."""
    lead = feat.shape[:-3]
    C, H, W = feat.shape[-3:]
    flat = feat.reshape(lead + (C, H * W))
    axes = tuple(range(len(lead))) + (len(lead) + 1, len(lead))
    return proj(flat.transpose(axes))


def build_obj_vertices(scores: Tensor, embeddings: Tensor) -> Tensor:
    """Scale each learnable object embedding by its detection score."""
    if scores.shape[-1] != embeddings.shape[0]:
        raise DimensionError(f"object scores {scores.shape} do not match embeddings {embeddings.shape}")
    return scores.reshape(scores.shape + (1,)) * embeddings


class TemplateBank(Module):
    def __init__(self, n_vertices: int, dim: int, rng: np.random.Generator, n_templates: int = 8):
        if n_templates < 1:
            raise ConfigError(f"template count must be >= 1, got {n_templates}")
        self.templates = Parameter(rng.normal(0.0, 0.1, (n_templates, n_vertices, n_vertices)).astype(np.float32))
        self.selector = Linear(dim, n_templates, rng)

    @property
    def n_templates(self) -> int:
        return self.templates.shape[0]


def template_weights(pooled: Tensor, bank: TemplateBank) -> Tensor:
    return T.softmax(bank.selector(pooled), axis=-1)


def edges_template_bank(pooled: Tensor, bank: TemplateBank) -> Tensor:
    """Soft-fuse the templates with input-conditioned softmax weights."""
    w = template_weights(pooled, bank)
    M, N, _ = bank.templates.shape
    fused = T.matmul(w.reshape(w.shape[:-1] + (1, M)), bank.templates.reshape(M, N * N))
    return fused.reshape(pooled.shape[:-1] + (N, N))


class ClassTokens(Module):
    def __init__(self, dim: int, n_verbs: int, n_nouns: int, rng: np.random.Generator):
        self.c_verb = Parameter(rng.normal(0.0, 1.0 / math.sqrt(dim), dim).astype(np.float32))
        self.c_noun = Parameter(rng.normal(0.0, 1.0 / math.sqrt(dim), dim).astype(np.float32))
        self.verb_head = Linear(dim, n_verbs, rng)
        self.noun_head = Linear(dim, n_nouns, rng)

    def rows(self) -> Tensor:
        return T.stack([self.c_verb, self.c_noun], axis=0)


def edges_class_token(vertices: Tensor, tokens: ClassTokens) -> Tensor:
    """Outer product of per-vertex verb-token and noun-token affinities."""
    D = vertices.shape[-1]
    scale = 1.0 / math.sqrt(D)
    s_verb = T.matmul(vertices, tokens.c_verb.reshape(D, 1)) * scale      # [...,N,1]
    s_noun = T.matmul(vertices, tokens.c_noun.reshape(D, 1)) * scale
    lead = vertices.shape[:-2]
    s_noun = s_noun.transpose(tuple(range(len(lead))) + (len(lead) + 1, len(lead)))
    return s_verb * s_noun


class MessagePassing(Module):
    def __init__(self, dim: int, rng: np.random.Generator, heads: int = 4):
        if heads < 1 or dim % heads:
            raise ConfigError(f"dim {dim} must be divisible by heads {heads}")
        self.dim = dim
        self.heads = heads
        self.q = Linear(dim, dim, rng)
        self.k = Linear(dim, dim, rng)
        self.v = Linear(dim, dim, rng)
        self.out = Linear(dim, dim, rng)
        self.update = GRUCell(dim, rng)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    lead = x.shape[:-2]
    N, D = x.shape[-2:]
    x = x.reshape(lead + (N, heads, D // heads))
    n = len(lead)
    return x.transpose(tuple(range(n)) + (n + 1, n, n + 2))


def attention_weights(state: Tensor, edges: Tensor | None, p: MessagePassing) -> Tensor:
    """Per-head attention rows [...,heads,N,N]."""
    N = state.shape[-2]
    if edges is not None and tuple(edges.shape[-2:]) != (N, N):
        raise DimensionError(f"edge estimate {edges.shape} does not match {N} vertices")
    q = _split_heads(p.q(state), p.heads)
    k = _split_heads(p.k(state), p.heads)
    n = q.ndim
    logits = T.matmul(q, k.transpose(tuple(range(n - 2)) + (n - 1, n - 2)))
    logits = logits * (1.0 / math.sqrt(p.dim // p.heads))
    if edges is not None:
        bias = edges.reshape(edges.shape[:-2] + (1, N, N))
        logits = logits + bias
    return T.softmax(logits, axis=-1)


def message_pass(state: Tensor, edges: Tensor | None, p: MessagePassing) -> Tensor:
    """One attention round plus gated update; returns vertices of the same shape."""
    attn = attention_weights(state, edges, p)
    v = _split_heads(p.v(state), p.heads)
    msg = T.matmul(attn, v)                                  # [...,h,N,dh]
    n = msg.ndim
    msg = msg.transpose(tuple(range(n - 3)) + (n - 2, n - 3, n - 1)).reshape(state.shape)
    return p.update(p.out(msg), state)


def readout(state: Tensor, head) -> object:
    """Mean over vertices fed to ``head``; callable at any timestep."""
    return head(state.mean(axis=-2))


def _pad_edges(edges: Tensor, extra: int) -> Tensor:
    lead = edges.shape[:-2]
    N = edges.shape[-1]
    zeros_cols = T.Tensor(np.zeros(lead + (N, extra), dtype=edges.dtype))
    zeros_rows = T.Tensor(np.zeros(lead + (extra, N + extra), dtype=edges.dtype))
    return T.concat([T.concat([edges, zeros_cols], axis=-1), zeros_rows], axis=-2)


@dataclass
class MpnnelStep:
    vertices: Tensor
    edges: Tensor | None
    token_logits: dict | None


class MpnnelCell(Module):
    """Vertex projection, optional edge estimator and the message-passing round.

    ``in_dim`` is the feature channel count for spatial inputs or the object
    vector length when ``object_mode`` is set.
    """

    def __init__(self, in_dim: int, dim: int, n_vertices: int, rng: np.random.Generator, *,
                 heads: int = 4, edge_kind: str = "implicit", n_templates: int = 8,
                 n_verbs: int | None = None, n_nouns: int | None = None, object_mode: bool = False):
        if edge_kind not in EDGE_KINDS:
            raise ConfigError(f"unknown edge kind {edge_kind!r}; expected one of {EDGE_KINDS}")
        self.dim = dim
        self.n_vertices = n_vertices
        self.edge_kind = edge_kind
        self.object_mode = object_mode
        if object_mode:
            if n_vertices != in_dim:
                raise ConfigError("object mode needs one vertex per object score")
            self.embeddings = Parameter(rng.normal(0.0, 1.0, (in_dim, dim)).astype(np.float32))
        else:
            self.proj = Linear(in_dim, dim, rng)
        self.mp = MessagePassing(dim, rng, heads)
        if edge_kind == "template_bank":
            self.bank = TemplateBank(n_vertices, dim, rng, n_templates)
        elif edge_kind == "class_token":
            if n_verbs is None or n_nouns is None:
                raise ConfigError("class-token edges need verb and noun counts")
            self.tokens = ClassTokens(dim, n_verbs, n_nouns, rng)

    def vertices(self, x: Tensor) -> Tensor:
        return build_obj_vertices(x, self.embeddings) if self.object_mode else build_vertices(x, self.proj)

    def step(self, x: Tensor, previous: Tensor | None) -> MpnnelStep:
        frame = self.vertices(x)
        if frame.shape[-2] != self.n_vertices:
            raise DimensionError(f"frame gives {frame.shape[-2]} vertices, cell expects {self.n_vertices}")
        state = frame if previous is None else frame + previous
        edges = None
        token_logits = None
        if self.edge_kind == "template_bank":
            edges = edges_template_bank(frame.mean(axis=-2), self.bank)
        elif self.edge_kind == "class_token":
            edges = edges_class_token(state, self.tokens)

        if self.edge_kind == "class_token":
            lead = state.shape[:-2]
            rows = T.broadcast_to(self.tokens.rows(), lead + (2, self.dim))
            updated = message_pass(T.concat([state, rows], axis=-2), _pad_edges(edges, 2), self.mp)
            N = self.n_vertices
            vertices = updated[..., :N, :]
            token_logits = {
                "verb": self.tokens.verb_head(updated[..., N, :]),
                "noun": self.tokens.noun_head(updated[..., N + 1, :]),
            }
        else:
            vertices = message_pass(state, edges, self.mp)
        return MpnnelStep(vertices, edges, token_logits)
