"""Multi-head graph attention over an electrode montage.

For head ``h`` with weight ``W`` (``d_out x d_in``) and attention vector
``a`` (length ``2 * d_out``), the score of edge ``i -> j`` is::

    e_ij = a . LeakyReLU([W h_i || W h_j])

and the coefficients are the softmax of ``e_ij`` over ``N(i) + {i}``.  Each
node's head output is ``sum_j alpha_ij W h_j``; head outputs are concatenated
in head order.  ``leaky_on="score"`` instead applies the nonlinearity after
the dot product, ``LeakyReLU(a . [W h_i || W h_j])``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial.distance import cdist

from .errors import LoadError, ValidationError

LEAKY_TARGETS = ("features", "score")


@dataclass(frozen=True)
class ElectrodeGraph:
    neighbors: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        nbrs = tuple(tuple(sorted(int(j) for j in row)) for row in self.neighbors)
        n = len(nbrs)
        if n < 1:
            raise ValidationError("graph needs at least one node")
        for i, row in enumerate(nbrs):
            if len(set(row)) != len(row):
                raise ValidationError(f"node {i} lists a neighbor twice")
            for j in row:
                if not 0 <= j < n:
                    raise ValidationError(f"node {i} has out-of-range neighbor {j}")
                if j == i:
                    raise ValidationError(f"node {i} lists itself as a neighbor")
                if i not in nbrs[j]:
                    raise ValidationError(f"adjacency not symmetric: {i}->{j} without {j}->{i}")
        object.__setattr__(self, "neighbors", nbrs)

    @property
    def n_nodes(self) -> int:
        return len(self.neighbors)

    def mask(self) -> np.ndarray:
        """Boolean ``n x n`` matrix of attended pairs, self-loops included."""
        m = np.eye(self.n_nodes, dtype=bool)
        for i, row in enumerate(self.neighbors):
            m[i, list(row)] = True
        return m

    def relabel(self, perm) -> "ElectrodeGraph":
        """Graph where old node ``perm[k]`` becomes new node ``k``."""
        perm = list(perm)
        inv = {old: new for new, old in enumerate(perm)}
        return ElectrodeGraph(tuple(tuple(inv[j] for j in self.neighbors[old]) for old in perm))


@dataclass
class AttentionParams:
    W: np.ndarray  # n_heads x d_out x d_in
    a: np.ndarray  # n_heads x 2*d_out
    leaky_slope: float = 0.2
    leaky_on: str = "features"

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=np.float64)
        self.a = np.asarray(self.a, dtype=np.float64)
        if self.W.ndim != 3 or self.W.shape[0] < 1:
            raise ValidationError(f"W must be n_heads x d_out x d_in, got {self.W.shape}")
        if self.a.shape != (self.W.shape[0], 2 * self.W.shape[1]):
            raise ValidationError(
                f"a must be {self.W.shape[0]} x {2 * self.W.shape[1]}, got {self.a.shape}")
        if self.leaky_on not in LEAKY_TARGETS:
            raise ValidationError(f"leaky_on must be one of {LEAKY_TARGETS}")

    @property
    def n_heads(self) -> int:
        return self.W.shape[0]

    @property
    def d_out(self) -> int:
        return self.W.shape[1]

    @property
    def d_in(self) -> int:
        return self.W.shape[2]

    @classmethod
    def random(cls, n_heads=4, d_in=64, d_out=128, seed=0, **kw) -> "AttentionParams":
        """Glorot-uniform initialised parameters."""
        rng = np.random.default_rng(seed)
        lim_w = np.sqrt(6.0 / (d_in + d_out))
        lim_a = np.sqrt(6.0 / (2 * d_out + 1))
        W = rng.uniform(-lim_w, lim_w, size=(n_heads, d_out, d_in))
        a = rng.uniform(-lim_a, lim_a, size=(n_heads, 2 * d_out))
        return cls(W, a, **kw)

    def to_json(self) -> str:
        return json.dumps({
            "n_heads": self.n_heads, "d_in": self.d_in, "d_out": self.d_out,
            "leaky_slope": self.leaky_slope, "leaky_on": self.leaky_on,
            "W": self.W.ravel().tolist(), "a": self.a.ravel().tolist(),
        })

    @classmethod
    def from_json(cls, text: str) -> "AttentionParams":
        try:
            doc = json.loads(text)
            h, d_in, d_out = int(doc["n_heads"]), int(doc["d_in"]), int(doc["d_out"])
            W = np.asarray(doc["W"], dtype=np.float64)
            a = np.asarray(doc["a"], dtype=np.float64)
        except (KeyError, TypeError, ValueError) as exc:
            raise LoadError(f"bad attention parameter bundle: {exc}") from None
        if W.size != h * d_out * d_in or a.size != h * 2 * d_out:
            raise LoadError("attention parameter arrays do not match declared shapes")
        return cls(W.reshape(h, d_out, d_in), a.reshape(h, 2 * d_out),
                   leaky_slope=float(doc.get("leaky_slope", 0.2)),
                   leaky_on=doc.get("leaky_on", "features"))


def load_positions(path) -> np.ndarray:
    try:
        pos = np.loadtxt(Path(path), delimiter=",", comments="#", ndmin=2)
    except (OSError, ValueError) as exc:
        raise LoadError(f"{path}: {exc}") from None
    if pos.shape[1] != 3:
        raise LoadError(f"{path}: expected 3 columns, got {pos.shape[1]}")
    return pos


def build_montage_graph(positions, k: int = 8) -> ElectrodeGraph:
    """Symmetrised k-nearest-neighbour graph; distance ties go to the lower index."""
    pos = np.asarray(positions, dtype=np.float64)
    n = pos.shape[0]
    if n < 1:
        raise ValidationError("need at least one electrode")
    if not 0 <= k < n:
        raise ValidationError(f"k must satisfy 0 <= k < n_nodes={n}, got {k}")
    dist = cdist(pos, pos)
    np.fill_diagonal(dist, np.inf)
    adj = [set() for _ in range(n)]
    for i in range(n):
        order = np.lexsort((np.arange(n), dist[i]))
        for j in order[:k]:
            adj[i].add(int(j))
            adj[int(j)].add(i)
    return ElectrodeGraph(tuple(tuple(sorted(s)) for s in adj))


def _leaky(x, slope):
    return np.where(x > 0, x, slope * x)


def _rowdot(x, w):
    # x @ w.T without BLAS: each output's reduction order depends only on the
    # contracted length, never on the row's position
    return (x[:, None, :] * w[None, :, :]).sum(axis=-1)


def _sorted_sum(terms, axis):
    # sorting makes the reduction independent of node labelling
    return np.sort(terms, axis=axis).sum(axis=axis)


def _check(feat, g: ElectrodeGraph, p: AttentionParams) -> np.ndarray:
    feat = np.asarray(feat, dtype=np.float64)
    if feat.ndim != 2 or feat.shape != (g.n_nodes, p.d_in):
        raise ValidationError(
            f"features must be {g.n_nodes} x {p.d_in}, got {feat.shape}")
    if not np.isfinite(feat).all():
        raise ValidationError("node features contain non-finite values")
    return feat


def _check_head(p: AttentionParams, head: int):
    if not 0 <= head < p.n_heads:
        raise ValidationError(f"head {head} out of range for {p.n_heads} heads")


def _logits(z, mask, p: AttentionParams, head: int):
    a_src, a_dst = p.a[head, :p.d_out], p.a[head, p.d_out:]
    if p.leaky_on == "features":
        # a . LeakyReLU([z_i || z_j]) separates into a source and a target term
        s = _leaky(z, p.leaky_slope)
        e = _rowdot(s, a_src[None])[:, 0][:, None] + _rowdot(s, a_dst[None])[:, 0][None, :]
    else:
        src = _rowdot(z, a_src[None])[:, 0]
        dst = _rowdot(z, a_dst[None])[:, 0]
        e = _leaky(src[:, None] + dst[None, :], p.leaky_slope)
    return np.where(mask, e, -np.inf)


def _softmax_rows(e):
    e = e - e.max(axis=1, keepdims=True)
    w = np.exp(e)
    return w / _sorted_sum(w, axis=1)[:, None]


def attention_logits(feat, g: ElectrodeGraph, p: AttentionParams, head: int) -> np.ndarray:
    """Dense ``n x n`` score matrix; entries outside ``N(i) + {i}`` are ``-inf``."""
    feat = _check(feat, g, p)
    _check_head(p, head)
    return _logits(_rowdot(feat, p.W[head]), g.mask(), p, head)


def attention_coefficients(feat, g: ElectrodeGraph, p: AttentionParams, head: int) -> np.ndarray:
    return _softmax_rows(attention_logits(feat, g, p, head))


def ga_forward(feat, g: ElectrodeGraph, p: AttentionParams) -> np.ndarray:
    """Concatenated per-head aggregations, shape ``n_nodes x (n_heads * d_out)``."""
    feat = _check(feat, g, p)
    mask = g.mask()
    outs = []
    for h in range(p.n_heads):
        z = _rowdot(feat, p.W[h])
        alpha = _softmax_rows(_logits(z, mask, p, h))
        outs.append(_sorted_sum(alpha[:, :, None] * z[None, :, :], axis=1))
    return np.concatenate(outs, axis=1)
