"""Neighborhood encoders: GCN, GAT, and GraphSAGE layers over a subgraph.

All variants map an n x d feature matrix to n x d, so they are drop-in
interchangeable. The adjacency is symmetrized before normalization or
attention masking; edge direction is preserved upstream for edge
reconstruction. Layers carry no bias terms.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .kg import NeighborhoodSubgraph

VARIANTS = ("gcn", "gat", "sage")
ACTIVATIONS = {"relu": ad.relu, "leaky_relu": ad.leaky_relu}


@dataclass
class GraphEncoderConfig:
    variant: str = "gat"
    layers: int = 2
    dim: int = 64
    heads: int = 3
    activation: str = "relu"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; pick from {VARIANTS}")
        if self.layers < 1:
            raise ValueError("layer count must be >= 1")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.variant == "gat" and not 1 <= self.heads <= self.dim:
            raise ValueError(
                f"head count {self.heads} must lie in [1, dim={self.dim}]")

    def head_widths(self, final: bool) -> list[int]:
        """Per-head output widths. Final layers average full-width heads;
        hidden layers concatenate, so the widths must sum to dim exactly
        (the first dim % heads heads absorb the remainder)."""
        if final or self.variant != "gat":
            return [self.dim] * self.heads
        base, extra = divmod(self.dim, self.heads)
        return [base + (1 if h < extra else 0) for h in range(self.heads)]


def symmetrize(A: np.ndarray) -> np.ndarray:
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ShapeError(f"adjacency must be square, got {A.shape}")
    return np.maximum(A, A.T)


def normalize_adjacency(A: np.ndarray) -> np.ndarray:
    """D^(-1/2) (max(A, A^T) + I) D^(-1/2); isolated nodes keep their self-loop."""
    A_tilde = symmetrize(A) + np.eye(A.shape[0])
    d_inv_sqrt = 1.0 / np.sqrt(A_tilde.sum(axis=1))
    return A_tilde * d_inv_sqrt[:, None] * d_inv_sqrt[None, :]


def mean_neighbor_matrix(A: np.ndarray) -> np.ndarray:
    """Row-normalized symmetrized adjacency; a node with no neighbors gets a
    zero row so its mean-neighbor term vanishes."""
    A_sym = symmetrize(A)
    deg = A_sym.sum(axis=1)
    deg[deg == 0] = 1.0
    return A_sym / deg[:, None]


def _const_matmul(M, X: Tensor) -> Tensor:
    if sp.issparse(M):
        return ad.sparse_const_matmul(M.tocsr(), X)
    return ad.matmul(ad.constant(M), X)


def gcn_layer(X: Tensor, A_hat, W: Tensor, activation=None) -> Tensor:
    out = ad.matmul(_const_matmul(A_hat, X), W)
    return activation(out) if activation is not None else out


def sage_layer(X: Tensor, M, W: Tensor, activation=None) -> Tensor:
    out = ad.matmul(ad.concat_cols([X, _const_matmul(M, X)]), W)
    return activation(out) if activation is not None else out


def gat_head(X: Tensor, mask: np.ndarray, W: Tensor, a_src: Tensor,
             a_dst: Tensor, alpha: float = 0.2) -> tuple[Tensor, np.ndarray]:
    """One attention head: scores leaky_relu(a^T [Wx_i ++ Wx_j]) masked to
    A_sym + I neighborhoods. Returns (alpha @ XW, attention values)."""
    n = X.shape[0]
    h = ad.matmul(X, W)
    u = ad.matmul(h, a_src)
    v = ad.matmul(h, a_dst)
    ones_row = ad.constant(np.ones((1, n)))
    ones_col = ad.constant(np.ones((n, 1)))
    scores = ad.leaky_relu(
        ad.add(ad.matmul(u, ones_row), ad.matmul(ones_col, ad.transpose(v))), alpha)
    att = ad.softmax_rows(scores, mask=mask)
    return ad.matmul(att, h), att.values


class GraphEncoder:
    """Stacks config.layers rounds of the chosen variant over (X, A).

    The readout for a subgraph is the head row of the final layer plus a
    residual copy of the head's input features, which keeps the no-neighbor
    case from collapsing.
    """

    def __init__(self, config: GraphEncoderConfig, rng: np.random.Generator):
        self.config = config
        self.params: dict[str, Tensor] = {}
        self.last_attention: list[np.ndarray] = []
        d = config.dim
        for layer in range(config.layers):
            final = layer == config.layers - 1
            if config.variant == "gcn":
                self.params[f"l{layer}_w"] = ad.xavier_uniform((d, d), rng)
            elif config.variant == "sage":
                self.params[f"l{layer}_w"] = ad.xavier_uniform((2 * d, d), rng)
            else:
                widths = config.head_widths(final)
                for h, out_dim in enumerate(widths):
                    p = f"l{layer}_h{h}"
                    self.params[f"{p}_w"] = ad.xavier_uniform((d, out_dim), rng)
                    self.params[f"{p}_asrc"] = ad.xavier_uniform((out_dim, 1), rng)
                    self.params[f"{p}_adst"] = ad.xavier_uniform((out_dim, 1), rng)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def encode(self, X: Tensor, A: np.ndarray, readout: list[int]) -> Tensor:
        """Run the stack on one (possibly block-diagonal) adjacency and gather
        the given rows, adding the residual from X."""
        n = A.shape[0]
        if X.shape[0] != n:
            raise ShapeError(f"X has {X.shape[0]} rows but A is {n}x{n}")
        cfg = self.config
        activation = ACTIVATIONS[cfg.activation]
        self.last_attention = []

        if cfg.variant == "gcn":
            A_hat = normalize_adjacency(A)
            if n > 64:
                A_hat = sp.csr_matrix(A_hat)
            H = X
            for layer in range(cfg.layers):
                final = layer == cfg.layers - 1
                H = gcn_layer(H, A_hat, self.params[f"l{layer}_w"],
                              None if final else activation)
        elif cfg.variant == "sage":
            M = mean_neighbor_matrix(A)
            if n > 64:
                M = sp.csr_matrix(M)
            H = X
            for layer in range(cfg.layers):
                final = layer == cfg.layers - 1
                H = sage_layer(H, M, self.params[f"l{layer}_w"],
                               None if final else activation)
        else:
            mask = (symmetrize(A) + np.eye(n)) > 0
            H = X
            for layer in range(cfg.layers):
                final = layer == cfg.layers - 1
                outs, atts = [], []
                for h in range(cfg.heads):
                    p = f"l{layer}_h{h}"
                    out, att = gat_head(H, mask, self.params[f"{p}_w"],
                                        self.params[f"{p}_asrc"],
                                        self.params[f"{p}_adst"])
                    outs.append(out)
                    atts.append(att)
                self.last_attention.append(np.mean(atts, axis=0))
                if final:
                    H = outs[0]
                    for out in outs[1:]:
                        H = ad.add(H, out)
                    H = ad.scale(H, 1.0 / cfg.heads)
                else:
                    H = activation(ad.concat_cols(outs))

        return ad.add(ad.gather_rows(H, readout), ad.gather_rows(X, readout))

    def encode_neighborhood(self, subgraph: NeighborhoodSubgraph, X: Tensor) -> Tensor:
        """e_hr for one subgraph whose X row 0 is the head encoding."""
        if X.shape[0] != subgraph.num_nodes:
            raise ShapeError(
                f"X has {X.shape[0]} rows for a {subgraph.num_nodes}-node subgraph")
        out = self.encode(X, subgraph.A, [0])
        return ad.reshape(out, (self.config.dim,))


def combine_adjacency(A_list: list[np.ndarray]) -> tuple[np.ndarray, list[int]]:
    """Block-diagonal stack of subgraph adjacencies plus each block's row
    offset (the position of that subgraph's head in the stacked X)."""
    if not A_list:
        raise ShapeError("cannot combine zero adjacency matrices")
    sizes = [a.shape[0] for a in A_list]
    total = sum(sizes)
    combined = np.zeros((total, total))
    offsets = []
    pos = 0
    for a, size in zip(A_list, sizes):
        combined[pos:pos + size, pos:pos + size] = a
        offsets.append(pos)
        pos += size
    return combined, offsets
