"""Entity text features: tokenizer, vocabulary, and the trainable text encoder.

The head tower encodes [name, description, SEP, relation phrase]; the tail and
neighbor towers encode [name, description]. Towers share one token-embedding
table but keep separate projection (or transformer) parameters.
"""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from .autodiff import Tensor
from .kg import KnowledgeGraph

PAD, UNK, SEP = 0, 1, 2
RESERVED = (("<pad>", PAD), ("<unk>", UNK), ("<sep>", SEP))

_TOKEN_RE = re.compile(r"[a-z0-9]+")


def tokenize(text: str) -> list[str]:
    """Lowercase and split on non-alphanumeric runs."""
    return _TOKEN_RE.findall(text.lower())


@dataclass
class Tokenizer:
    token_to_id: dict[str, int]
    max_len: int = 64

    @property
    def vocab_size(self) -> int:
        return len(self.token_to_id)

    def ids(self, text: str) -> list[int]:
        return [self.token_to_id.get(tok, UNK) for tok in tokenize(text)]

    def tail_ids(self, name: str, desc: str) -> tuple[list[int], bool]:
        """Token ids for [name, desc]; flag is True when both are empty."""
        name_ids = self.ids(name)
        desc_ids = self.ids(desc)
        budget = max(0, self.max_len - len(name_ids))
        seq = name_ids + desc_ids[:budget]
        return seq, not seq

    def head_ids(self, name: str, desc: str,
                 relation_phrase: str) -> tuple[list[int], bool]:
        """Token ids for [name, desc, SEP, relation]; desc is cut first.

        The name and relation segments are never dropped, even when they alone
        exceed max_len.
        """
        name_ids = self.ids(name)
        desc_ids = self.ids(desc)
        rel_ids = self.ids(relation_phrase)
        budget = max(0, self.max_len - len(name_ids) - len(rel_ids) - 1)
        seq = name_ids + desc_ids[:budget] + [SEP] + rel_ids
        return seq, not (name_ids or desc_ids)


def build_vocab(kg: KnowledgeGraph, min_frequency: int = 1,
                max_len: int = 64) -> Tokenizer:
    """Vocabulary over all entity names, descriptions, and relation phrases.

    Tokens seen fewer than min_frequency times map to UNK. Ids are reserved
    tokens first, then the surviving tokens in lexicographic order, so the
    mapping is stable across runs and machines.
    """
    counts: Counter[str] = Counter()
    for rec in kg.entities:
        counts.update(tokenize(rec.name))
        counts.update(tokenize(rec.description))
    for label in kg.relation_labels:
        counts.update(tokenize(label))
    token_to_id = {tok: tid for tok, tid in RESERVED}
    kept = sorted(t for t, c in counts.items() if c >= min_frequency)
    for tok in kept:
        token_to_id[tok] = len(token_to_id)
    return Tokenizer(token_to_id=token_to_id, max_len=max_len)


def save_vocab(tokenizer: Tokenizer, path) -> None:
    lines = [f"{tok}\t{tid}\n" for tok, tid in sorted(tokenizer.token_to_id.items())]
    with open(path, "w", encoding="utf-8") as fh:
        fh.writelines(lines)


def load_vocab(path, max_len: int = 64) -> Tokenizer:
    token_to_id: dict[str, int] = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            tok, tid = line.split("\t")
            token_to_id[tok] = int(tid)
    return Tokenizer(token_to_id=token_to_id, max_len=max_len)


def bag_matrix(ids_list: Sequence[Sequence[int]],
               vocab_size: int) -> tuple[sp.csr_matrix, np.ndarray]:
    """Count-normalized bag rows; an empty sequence yields a zero row."""
    rows, cols, vals = [], [], []
    empty = np.zeros(len(ids_list), dtype=bool)
    for i, ids in enumerate(ids_list):
        if not ids:
            empty[i] = True
            continue
        weight = 1.0 / len(ids)
        for tid in ids:
            rows.append(i)
            cols.append(tid)
            vals.append(weight)
    mat = sp.csr_matrix((vals, (rows, cols)),
                        shape=(len(ids_list), vocab_size), dtype=np.float64)
    mat.sum_duplicates()
    return mat, empty


@dataclass
class TextEncoderConfig:
    dim: int = 64
    mode: str = "mean_pool"
    layers: int = 1
    heads: int = 2
    ff_width: int = 128

    def __post_init__(self):
        if self.mode not in ("mean_pool", "transformer_lite"):
            raise ValueError(f"unknown text encoder mode {self.mode!r}")
        if self.mode == "transformer_lite" and self.dim % self.heads != 0:
            raise ValueError(
                f"dim {self.dim} not divisible by head count {self.heads}")


class TextEncoder:
    """Turns token sequences into d-vectors; one tower per role (head/tail)."""

    def __init__(self, tokenizer: Tokenizer, config: TextEncoderConfig,
                 rng: np.random.Generator):
        self.tokenizer = tokenizer
        self.config = config
        d = config.dim
        self.params: dict[str, Tensor] = {}
        self.params["embeddings"] = ad.parameter(
            rng.normal(scale=1.0 / np.sqrt(d), size=(tokenizer.vocab_size, d)))
        if config.mode == "mean_pool":
            # identity start: the encoder begins as plain mean pooling
            self.params["head_proj"] = ad.parameter(np.eye(d))
            self.params["tail_proj"] = ad.parameter(np.eye(d))
        else:
            self.params["positions"] = ad.parameter(
                rng.normal(scale=0.02, size=(tokenizer.max_len + 2, d)))
            for tower in ("head", "tail"):
                for layer in range(config.layers):
                    p = f"{tower}_l{layer}"
                    for name in ("wq", "wk", "wv", "wo"):
                        self.params[f"{p}_{name}"] = ad.xavier_uniform((d, d), rng)
                    self.params[f"{p}_ff1"] = ad.xavier_uniform(
                        (d, config.ff_width), rng)
                    self.params[f"{p}_ff2"] = ad.xavier_uniform(
                        (config.ff_width, d), rng)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    # -- batch entry points ------------------------------------------------

    def encode_heads(self, items: Sequence[tuple[str, str, str]]) -> Tensor:
        ids, flags = [], []
        for name, desc, rel in items:
            seq, empty = self.tokenizer.head_ids(name, desc, rel)
            ids.append(seq)
            flags.append(empty)
        return self._encode(ids, np.array(flags), "head")

    def encode_tails(self, items: Sequence[tuple[str, str]]) -> Tensor:
        ids, flags = [], []
        for name, desc in items:
            seq, empty = self.tokenizer.tail_ids(name, desc)
            ids.append(seq)
            flags.append(empty)
        return self._encode(ids, np.array(flags), "tail")

    # neighbors ride the tail tower: same text, no relation segment
    encode_neighbors = encode_tails

    def encode_from_bag(self, bag: sp.csr_matrix, empty_rows: np.ndarray,
                        tower: str) -> Tensor:
        """Fast path for mean_pool mode with a precomputed bag matrix."""
        if self.config.mode != "mean_pool":
            raise ValueError("bag encoding only applies to mean_pool mode")
        pooled = ad.sparse_const_matmul(bag, self.params["embeddings"])
        out = ad.matmul(pooled, self.params[f"{tower}_proj"])
        out.empty_rows = empty_rows
        return out

    # -- single-item conveniences -------------------------------------------

    def encode_head(self, name: str, desc: str, relation_phrase: str) -> Tensor:
        batch = self.encode_heads([(name, desc, relation_phrase)])
        return self._single(batch)

    def encode_tail(self, name: str, desc: str) -> Tensor:
        batch = self.encode_tails([(name, desc)])
        return self._single(batch)

    encode_neighbor = encode_tail

    @staticmethod
    def _single(batch: Tensor) -> Tensor:
        vec = ad.reshape(batch, (batch.shape[1],))
        vec.empty = bool(batch.empty_rows[0])
        return vec

    # -- internals -----------------------------------------------------------

    def _encode(self, ids_list, empty_rows: np.ndarray, tower: str) -> Tensor:
        if self.config.mode == "mean_pool":
            bag, bag_empty = bag_matrix(ids_list, self.tokenizer.vocab_size)
            return self.encode_from_bag(bag, empty_rows | bag_empty, tower)
        rows = [self._transform_one(ids, tower) for ids in ids_list]
        out = ad.stack_rows(rows)
        out.empty_rows = empty_rows | np.array([not ids for ids in ids_list])
        return out

    def _transform_one(self, ids: Sequence[int], tower: str) -> Tensor:
        d = self.config.dim
        if not ids:
            return ad.constant(np.zeros(d))
        emb = ad.gather_rows(self.params["embeddings"], list(ids))
        pos = ad.gather_rows(self.params["positions"], list(range(len(ids))))
        x = ad.add(emb, pos)
        for layer in range(self.config.layers):
            x = self._block(x, f"{tower}_l{layer}")
        return ad.mean_rows(x)

    def _block(self, x: Tensor, prefix: str) -> Tensor:
        d = self.config.dim
        heads = self.config.heads
        head_dim = d // heads
        q = ad.matmul(x, self.params[f"{prefix}_wq"])
        k = ad.matmul(x, self.params[f"{prefix}_wk"])
        v = ad.matmul(x, self.params[f"{prefix}_wv"])
        outs = []
        for h in range(heads):
            sel = np.zeros((d, head_dim))
            sel[h * head_dim:(h + 1) * head_dim] = np.eye(head_dim)
            sel_t = ad.constant(sel)
            qh = ad.matmul(q, sel_t)
            kh = ad.matmul(k, sel_t)
            vh = ad.matmul(v, sel_t)
            scores = ad.scale(ad.matmul(qh, ad.transpose(kh)),
                              1.0 / np.sqrt(head_dim))
            outs.append(ad.matmul(ad.softmax_rows(scores), vh))
        attended = ad.matmul(ad.concat_cols(outs), self.params[f"{prefix}_wo"])
        x = ad.add(x, attended)
        ff = ad.matmul(ad.relu(ad.matmul(x, self.params[f"{prefix}_ff1"])),
                       self.params[f"{prefix}_ff2"])
        return ad.add(x, ff)
