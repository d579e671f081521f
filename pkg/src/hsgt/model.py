"""The hierarchical graph Transformer: horizontal, vertical and readout blocks."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import Iterator

import numpy as np

from hsgt.engine import (
    Parameter,
    Tensor,
    concat_cols,
    concat_rows,
    dropout,
    gather_rows,
    layer_norm,
    masked_softmax,
    pair_attention,
    relu,
    reshape,
    segment_mean,
    slice_rows,
    take_cols,
    transpose,
)
from hsgt.engine.checkpoint import load_arrays, save_arrays
from hsgt.errors import InputError
from hsgt.sampler import Batch, LevelBatch
from hsgt.store import HistoricalStore

MAX_DEGREE = 64
FFN_MULT = 2


@dataclass
class ModelConfig:
    hidden: int = 64
    heads: int = 8
    layers_per_horizontal: int = 2
    max_spd: int = 2
    depth: int = 1
    share_horizontal: bool = True
    dropout: float = 0.1
    pre_norm: bool = True
    no_vertical: bool = False
    no_structural: bool = False
    no_readout: bool = False
    no_historical: bool = False

    def __post_init__(self):
        if self.hidden < 1 or self.heads < 1 or self.hidden % self.heads:
            raise InputError(f"hidden size {self.hidden} must be a positive multiple of heads {self.heads}")
        if self.max_spd < 0 or self.depth < 0 or self.layers_per_horizontal < 0:
            raise InputError("max_spd, depth and layers_per_horizontal must be non-negative")
        if not 0.0 <= self.dropout < 1.0:
            raise InputError("dropout must lie in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> ModelConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise InputError(f"unknown model config fields: {sorted(unknown)}")
        return cls(**doc)


class Module:
    """Parameter container; submodules and parameters are found through attributes."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Parameter):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


def _uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    def __init__(self, fan_in: int, fan_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = Parameter(_uniform(rng, fan_in, (fan_in, fan_out)))
        if bias:
            self.bias = Parameter(np.zeros(fan_out))

    def __call__(self, x: Tensor) -> Tensor:
        y = x @ self.weight
        return y + self.bias if hasattr(self, "bias") else y


class LayerNorm(Module):
    def __init__(self, width: int, eps: float = 1e-5):
        self.gamma = Parameter(np.ones(width))
        self.beta = Parameter(np.zeros(width))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta, self.eps)


def dense_attention(q, k, v, rows, cols, num_heads, bias=None, train=False, rate=0.0, rng=None):
    """Reference attention through full ``[heads, nq, nk]`` logits and :func:`masked_softmax`.

    Same contract as :func:`pair_attention`; used to cross-check it.
    """
    nq, d = q.shape
    nk = k.shape[0]
    dh = d // num_heads

    def split(x, n):
        return transpose(reshape(x, (n, num_heads, dh)), (1, 0, 2))

    logits = (split(q, nq) @ transpose(split(k, nk))) * (1.0 / np.sqrt(dh))
    masked = np.ones((nq, nk), dtype=bool)
    masked[rows, cols] = False
    if bias is not None:
        flat = np.zeros(nq * nk, dtype=np.int64)
        owner = np.full(nq * nk, -1, dtype=np.int64)
        owner[np.asarray(rows) * nk + np.asarray(cols)] = np.arange(len(rows))
        live = owner >= 0
        flat[live] = owner[live]
        dense_bias = take_cols(bias, flat) * live.astype(np.float64)
        logits = logits + reshape(dense_bias, (num_heads, nq, nk))
    weights = dropout(masked_softmax(logits, np.broadcast_to(masked, (num_heads, nq, nk))), rate, rng, train)
    out = weights @ split(v, nk)
    return reshape(transpose(out, (1, 0, 2)), (nq, d))


class Attention(Module):
    """Multi-head attention over a pair list, optionally biased per SPD index."""

    def __init__(self, width: int, heads: int, rng: np.random.Generator, spd_slots: int | None = None):
        self.q = Linear(width, width, rng)
        # A key bias only shifts each query's logits by a constant, which softmax ignores.
        self.k = Linear(width, width, rng, bias=False)
        self.v = Linear(width, width, rng)
        self.out = Linear(width, width, rng)
        self.heads = heads
        if spd_slots is not None:
            # One learnable scalar per (head, SPD value); zero start = no structural prior.
            self.spd_bias = Parameter(np.zeros((heads, spd_slots)))

    def __call__(self, xq, xkv, rows, cols, codes=None, train=False, rate=0.0, rng=None, impl="pairs"):
        bias = None
        if codes is not None and hasattr(self, "spd_bias"):
            reached = codes >= 0
            bias = take_cols(self.spd_bias, np.where(reached, codes, 0)) * reached.astype(np.float64)
        attend = pair_attention if impl == "pairs" else _dense_call
        mixed = attend(self.q(xq), self.k(xkv), self.v(xkv), rows, cols, self.heads,
                       bias=bias, dropout_rate=rate, rng=rng, train=train)
        return self.out(mixed)


def _dense_call(q, k, v, rows, cols, num_heads, bias=None, dropout_rate=0.0, rng=None, train=False):
    return dense_attention(q, k, v, rows, cols, num_heads, bias=bias, train=train, rate=dropout_rate, rng=rng)


class TransformerLayer(Module):
    """Attention sublayer then ReLU feed-forward sublayer, each with a residual.

    With ``pre_norm`` the layer normalizes sublayer inputs; otherwise it
    normalizes after each residual sum. Cross-attention layers normalize keys
    with their own LayerNorm.
    """

    def __init__(self, width, heads, rng, spd_slots=None, cross=False, pre_norm=True):
        self.norm_q = LayerNorm(width)
        if cross:
            self.norm_kv = LayerNorm(width)
        self.attn = Attention(width, heads, rng, spd_slots)
        self.norm_ffn = LayerNorm(width)
        self.ffn_in = Linear(width, FFN_MULT * width, rng)
        self.ffn_out = Linear(FFN_MULT * width, width, rng)
        self.pre_norm = pre_norm

    def _ffn(self, x, train, rate, rng):
        return self.ffn_out(dropout(relu(self.ffn_in(x)), rate, rng, train))

    def __call__(self, hq, rows, cols, hkv=None, codes=None, train=False, rate=0.0, rng=None, impl="pairs"):
        cross = hasattr(self, "norm_kv")
        if self.pre_norm:
            q = self.norm_q(hq)
            kv = self.norm_kv(hkv) if cross else q
            x = hq + self.attn(q, kv, rows, cols, codes, train, rate, rng, impl)
            return x + self._ffn(self.norm_ffn(x), train, rate, rng)
        kv = hkv if cross else hq
        x = self.norm_q(hq + self.attn(hq, kv, rows, cols, codes, train, rate, rng, impl))
        return self.norm_ffn(x + self._ffn(x, train, rate, rng))


class HorizontalBlock(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        slots = None if cfg.no_structural else cfg.max_spd + 1
        self.layers = [
            TransformerLayer(cfg.hidden, cfg.heads, rng, spd_slots=slots, pre_norm=cfg.pre_norm)
            for _ in range(cfg.layers_per_horizontal)
        ]

    def __call__(self, h, rows, cols, codes, train=False, rate=0.0, rng=None, impl="pairs"):
        for layer in self.layers:
            h = layer(h, rows, cols, codes=codes, train=train, rate=rate, rng=rng, impl=impl)
        return h


class HSGT(Module):
    """Full model. Input projections are per level; the degree table serves level 0 only."""

    def __init__(self, cfg: ModelConfig, in_features: int, num_classes: int, seed: int = 0):
        self.cfg = cfg
        self.in_features = in_features
        self.num_classes = num_classes
        rng = np.random.default_rng(seed)
        d, depth = cfg.hidden, cfg.depth
        self.input = [Linear(in_features, d, rng) for _ in range(depth + 1)]
        self.degree = Parameter(np.zeros((MAX_DEGREE + 1, d)))
        self.horizontal = [HorizontalBlock(cfg, rng) for _ in range(1 if cfg.share_horizontal else depth + 1)]
        if depth and not cfg.no_vertical:
            count = 1 if cfg.share_horizontal else depth
            self.vertical = [TransformerLayer(d, cfg.heads, rng, cross=True, pre_norm=cfg.pre_norm)
                             for _ in range(count)]
        else:
            self.vertical = []
        if cfg.no_readout:
            self.readout = Linear((depth + 1) * d, d, rng)
        else:
            self.readout = TransformerLayer(d, cfg.heads, rng, cross=True, pre_norm=cfg.pre_norm)
        self.final_norm = LayerNorm(d)
        self.classifier = Linear(d, num_classes, rng)

    # -- pieces ------------------------------------------------------------

    def horizontal_block(self, level: int) -> HorizontalBlock:
        return self.horizontal[0 if self.cfg.share_horizontal else level]

    def vertical_block(self, level: int) -> TransformerLayer:
        """Block aggregating level ``level - 1`` into level ``level``."""
        return self.vertical[0 if self.cfg.share_horizontal else level - 1]

    def horizontal_parameter_count(self) -> int:
        return sum(block.num_parameters() for block in self.horizontal)

    def input_transform(self, x, level: int, degrees=None) -> Tensor:
        h = self.input[level](_tensor(x))
        if level == 0:
            if degrees is None:
                raise InputError("level 0 input transform needs node degrees")
            h = h + gather_rows(self.degree, np.minimum(np.asarray(degrees), MAX_DEGREE))
        return h

    def vertical_aggregate(self, level, query, children, parent_of_child, train=False, rng=None, impl="pairs"):
        """Embeddings of ``len(query)`` parents from their children's rows.

        ``parent_of_child[i]`` is the row of ``query`` that child row ``i``
        belongs to; every parent must own at least one child.
        """
        parent_of_child = np.asarray(parent_of_child, dtype=np.int64)
        counts = np.bincount(parent_of_child, minlength=query.shape[0])
        if np.any(counts == 0):
            raise InputError("vertical block: a parent has no children in the batch")
        if self.cfg.no_vertical:
            return segment_mean(children, parent_of_child, query.shape[0])
        order = np.argsort(parent_of_child, kind="stable")
        block = self.vertical_block(level)
        return block(query, parent_of_child[order], order, hkv=children,
                     train=train, rate=self.cfg.dropout, rng=rng, impl=impl)

    def readout_block(self, per_level: list[Tensor], train=False, rng=None, impl="pairs") -> Tensor:
        """Fuse each node's row with its ancestors' rows; ``per_level[l]`` is ``[T0, d]``."""
        t0 = per_level[0].shape[0]
        if self.cfg.no_readout:
            return self.readout(concat_cols(per_level))
        keys = concat_rows(per_level)
        levels = len(per_level)
        rows = np.repeat(np.arange(t0), levels)
        cols = (np.tile(np.arange(levels), t0) * t0) + rows
        return self.readout(per_level[0], rows, cols, hkv=keys, train=train,
                            rate=self.cfg.dropout, rng=rng, impl=impl)

    # -- full pass ---------------------------------------------------------

    def forward(
        self,
        batch: Batch,
        store: HistoricalStore | None = None,
        train: bool = False,
        rng: np.random.Generator | None = None,
        impl: str = "pairs",
    ) -> Tensor:
        """Logits ``[T0, C]`` for the batch's level-0 targets, in target order.

        Ascends the levels: horizontal block at level ``j``, then the vertical
        block builds level ``j + 1`` target rows (pushed to ``store``) while
        level ``j + 1`` neighbor rows come from ``store``. Finally each
        level-0 target attends over its ancestor chain.
        """
        cfg = self.cfg
        if batch.depth != cfg.depth:
            raise InputError(f"batch depth {batch.depth} does not match model depth {cfg.depth}")
        if store is not None and store.depth != cfg.depth and batch.depth:
            raise InputError("store depth does not match the model")
        outputs: list[Tensor] = []
        for level, lb in enumerate(batch.levels):
            x = self.input_transform(lb.features, level, lb.degrees)
            if level == 0:
                h_in = x
            else:
                h_in = self._lift(level, lb, x, outputs[-1], batch, store, train, rng, impl)
            rows, cols, codes = lb.pairs()
            block = self.horizontal_block(level)
            outputs.append(block(h_in, rows, cols, codes, train=train, rate=cfg.dropout, rng=rng, impl=impl))

        anc = batch.ancestor_positions()
        per_level = [gather_rows(out, anc[level]) for level, out in enumerate(outputs)]
        fused = self.readout_block(per_level, train=train, rng=rng, impl=impl)
        return self.classifier(self.final_norm(fused))

    def _lift(self, level, lb: LevelBatch, x, below, batch, store, train, rng, impl) -> Tensor:
        t = lb.num_targets
        t_below = batch.levels[level - 1].num_targets
        children = slice_rows(below, 0, t_below)
        query = slice_rows(x, 0, t)
        target_rows = self.vertical_aggregate(level, query, children, batch.parent_positions[level - 1],
                                              train=train, rng=rng, impl=impl)
        if store is not None and not self.cfg.no_historical:
            store.push(level, lb.targets, target_rows.data)
        if lb.size == t:
            return target_rows
        if self.cfg.no_historical or store is None:
            context = slice_rows(x, t, lb.size)
        else:
            pulled, _ = store.pull(level, lb.neighbors)
            context = Tensor(pulled)
        return concat_rows([target_rows, context])

    __call__ = forward

    # -- persistence ---------------------------------------------------------

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise InputError(f"checkpoint mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, p in params.items():
            if state[name].shape != p.shape:
                raise InputError(f"checkpoint shape mismatch for {name}: {state[name].shape} vs {p.shape}")
            p.data[...] = state[name]

    def save(self, path) -> None:
        save_arrays(path, self.state_dict())

    def load(self, path) -> None:
        self.load_state_dict(load_arrays(path))


def _tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)
