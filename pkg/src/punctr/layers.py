"""Neural building blocks: token embeddings with sinusoidal positions, a
multi-layer self-attention encoder, a projected peephole LSTM run in both
directions, and masked max pooling.

All forward functions accept either a single sequence ([T, ...]) or a padded
batch ([B, T, ...]); internally everything runs batched.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .errors import ContractError, DataError

ATTENTION_MASK_BIAS = -1e30  # drives masked-key weights to exactly zero under softmax
LAYER_NORM_EPS = 1e-6


@dataclass(frozen=True)
class EncoderConfig:
    num_layers: int = 2
    num_heads: int = 4
    d_model: int = 64
    d_ff: int = 128
    max_len: int = 64
    dropout_rate: float = 0.1
    d_k: int | None = None
    d_v: int | None = None

    def __post_init__(self):
        if self.d_model % self.num_heads != 0:
            raise ContractError(f"d_model {self.d_model} not divisible by num_heads {self.num_heads}")
        head_dim = self.d_model // self.num_heads
        if self.d_k is None:
            object.__setattr__(self, "d_k", head_dim)
        if self.d_v is None:
            object.__setattr__(self, "d_v", head_dim)
        if self.d_k != head_dim or self.d_v != head_dim:
            raise ContractError(
                f"d_k and d_v must both equal d_model/num_heads = {head_dim}, got {self.d_k}/{self.d_v}"
            )
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ContractError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        for field in ("num_layers", "num_heads", "d_model", "d_ff", "max_len"):
            if getattr(self, field) < (0 if field == "num_layers" else 1):
                raise ContractError(f"{field} must be positive")


@dataclass(frozen=True)
class LstmConfig:
    num_cells: int = 48
    projection_dim: int = 24
    cell_clip: tuple[float, float] = (-50.0, 50.0)
    init_range: tuple[float, float] = (-0.02, 0.02)

    def __post_init__(self):
        if self.projection_dim > self.num_cells:
            raise ContractError(
                f"projection_dim {self.projection_dim} exceeds num_cells {self.num_cells}"
            )
        lo, hi = self.cell_clip
        if not lo < hi:
            raise ContractError(f"cell_clip must be a proper interval, got {self.cell_clip}")
        ilo, ihi = self.init_range
        if not (ilo < 0.0 < ihi and math.isclose(-ilo, ihi)):
            raise ContractError(f"init_range must be symmetric around zero, got {self.init_range}")


def glorot(rng: np.random.Generator, shape: tuple[int, ...], name: str) -> Tensor:
    bound = math.sqrt(6.0 / (shape[0] + shape[-1]))
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, name=name)


class Linear:
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, name: str):
        self.w = glorot(rng, (d_in, d_out), f"{name}.w")
        self.b = Tensor(np.zeros(d_out), requires_grad=True, name=f"{name}.b")

    def __call__(self, tape: Tape, x: Tensor) -> Tensor:
        return ad.add(tape, ad.matmul(tape, x, self.w), self.b)

    def parameters(self) -> list[tuple[str, Tensor]]:
        return [(self.w.name, self.w), (self.b.name, self.b)]


class LayerNormAffine:
    def __init__(self, dim: int, name: str, eps: float = LAYER_NORM_EPS):
        self.eps = eps
        self.gain = Tensor(np.ones(dim), requires_grad=True, name=f"{name}.gain")
        self.bias = Tensor(np.zeros(dim), requires_grad=True, name=f"{name}.bias")

    def __call__(self, tape: Tape, x: Tensor) -> Tensor:
        return ad.add(tape, ad.mul(tape, ad.layer_norm(tape, x, self.eps), self.gain), self.bias)

    def parameters(self) -> list[tuple[str, Tensor]]:
        return [(self.gain.name, self.gain), (self.bias.name, self.bias)]


def sinusoidal_positions(max_len: int, d_model: int) -> np.ndarray:
    """Fixed sin/cos position table; even columns sine, odd columns cosine."""
    pos = np.arange(max_len, dtype=np.float64)[:, None]
    col = np.arange(d_model, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, (2.0 * (col // 2)) / d_model)
    return np.where(col % 2 == 0, np.sin(angle), np.cos(angle))


class EncoderLayer:
    """Self-attention plus feed-forward, each wrapped in residual + layer norm."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator, name: str):
        self.cfg = cfg
        d, h = cfg.d_model, cfg.num_heads
        self.wq = Linear(d, h * cfg.d_k, rng, f"{name}.attn.q")
        self.wk = Linear(d, h * cfg.d_k, rng, f"{name}.attn.k")
        self.wv = Linear(d, h * cfg.d_v, rng, f"{name}.attn.v")
        self.wo = Linear(h * cfg.d_v, d, rng, f"{name}.attn.out")
        self.attn_norm = LayerNormAffine(d, f"{name}.attn_norm")
        self.ff1 = Linear(d, cfg.d_ff, rng, f"{name}.ff.inner")
        self.ff2 = Linear(cfg.d_ff, d, rng, f"{name}.ff.outer")
        self.ff_norm = LayerNormAffine(d, f"{name}.ff_norm")

    def parameters(self) -> list[tuple[str, Tensor]]:
        out: list[tuple[str, Tensor]] = []
        for part in (self.wq, self.wk, self.wv, self.wo, self.attn_norm,
                     self.ff1, self.ff2, self.ff_norm):
            out.extend(part.parameters())
        return out


def multi_head_attention(tape: Tape, layer: EncoderLayer, x: Tensor,
                         mask: np.ndarray, weights_out: list | None = None) -> Tensor:
    """Masked scaled dot-product attention over all heads at once.

    Per-head projections are packed into [d_model, heads*d_k] matrices; head
    h occupies columns [h*d_k, (h+1)*d_k), which is equivalent to separate
    per-head projection matrices. If weights_out is given, the
    [batch, heads, T, T] attention weight tensor is appended to it.
    """
    single = x.values.ndim == 2
    if single:
        x = ad.reshape(tape, x, (1,) + x.values.shape)
        mask = np.asarray(mask, dtype=bool)[None, :]
    mask = np.asarray(mask, dtype=bool)
    cfg = layer.cfg
    batch, length, _ = x.values.shape
    if mask.shape != (batch, length):
        raise ContractError(f"attention mask shape {mask.shape} vs input {x.values.shape}")
    if not mask.any(axis=-1).all():
        raise ContractError("attention over a fully masked sequence")

    def split_heads(t: Tensor, dim: int) -> Tensor:
        t = ad.reshape(tape, t, (batch, length, cfg.num_heads, dim))
        return ad.transpose(tape, t, (0, 2, 1, 3))

    q = split_heads(layer.wq(tape, x), cfg.d_k)
    k = split_heads(layer.wk(tape, x), cfg.d_k)
    v = split_heads(layer.wv(tape, x), cfg.d_v)
    scores = ad.mul(tape, ad.matmul(tape, q, k, transpose_b=True), 1.0 / math.sqrt(cfg.d_k))
    bias = np.where(mask, 0.0, ATTENTION_MASK_BIAS)[:, None, None, :]
    weights = ad.softmax(tape, ad.add(tape, scores, Tensor(bias)), axis=-1)
    if weights_out is not None:
        weights_out.append(weights)
    context = ad.matmul(tape, weights, v)
    context = ad.transpose(tape, context, (0, 2, 1, 3))
    context = ad.reshape(tape, context, (batch, length, cfg.num_heads * cfg.d_v))
    out = layer.wo(tape, context)
    if single:
        out = ad.reshape(tape, out, out.values.shape[1:])
    return out


class EncoderStack:
    """Token embedding table, fixed positional encodings, and N identical layers."""

    def __init__(self, cfg: EncoderConfig, vocab_size: int, rng: np.random.Generator):
        self.cfg = cfg
        self.vocab_size = vocab_size
        self.embedding = glorot(rng, (vocab_size, cfg.d_model), "encoder.embed.table")
        self.positions = sinusoidal_positions(cfg.max_len, cfg.d_model)
        self.layers = [EncoderLayer(cfg, rng, f"encoder.layer{i}") for i in range(cfg.num_layers)]

    def parameters(self) -> list[tuple[str, Tensor]]:
        out = [(self.embedding.name, self.embedding)]
        for layer in self.layers:
            out.extend(layer.parameters())
        return out

    def parameter_count(self) -> int:
        return sum(t.values.size for _, t in self.parameters())


def embed(tape: Tape, stack: EncoderStack, ids: np.ndarray) -> Tensor:
    """Token embedding rows plus the matching positional encoding rows."""
    ids = np.asarray(ids, dtype=np.int64)
    length = ids.shape[-1]
    if length > stack.cfg.max_len:
        raise DataError(f"sequence length {length} exceeds max_len {stack.cfg.max_len}")
    if ids.size and (ids.min() < 0 or ids.max() >= stack.vocab_size):
        raise DataError(f"token id out of vocabulary range [0, {stack.vocab_size})")
    tokens = ad.embedding_lookup(tape, stack.embedding, ids)
    return ad.add(tape, tokens, Tensor(stack.positions[:length]))


def encoder_forward(tape: Tape, stack: EncoderStack, ids: np.ndarray,
                    mask: np.ndarray, train: bool = False) -> Tensor:
    """Run the full encoder; output keeps the input's [T, d] or [B, T, d] form."""
    ids = np.asarray(ids, dtype=np.int64)
    single = ids.ndim == 1
    if single:
        ids = ids[None, :]
        mask = np.asarray(mask, dtype=bool)[None, :]
    mask = np.asarray(mask, dtype=bool)
    rate = stack.cfg.dropout_rate
    h = embed(tape, stack, ids)
    for layer in stack.layers:
        attended = multi_head_attention(tape, layer, h, mask)
        h = layer.attn_norm(tape, ad.add(tape, h, ad.dropout(tape, attended, rate, train)))
        inner = ad.relu(tape, layer.ff1(tape, h))
        transformed = layer.ff2(tape, inner)
        h = layer.ff_norm(tape, ad.add(tape, h, ad.dropout(tape, transformed, rate, train)))
    if single:
        h = ad.reshape(tape, h, h.values.shape[1:])
    return h


class LstmDirection:
    """Peephole LSTM with a recurrent projection layer, run left to right.

    Gate pre-activations are fused into one [d_in, 4*cells] input matrix and
    one [projection, 4*cells] recurrent matrix, laid out as (input, forget,
    candidate, output). Peepholes connect the cell state to all three gates;
    the cell state is clamped to cfg.cell_clip at every step.
    """

    def __init__(self, d_in: int, cfg: LstmConfig, rng: np.random.Generator, name: str):
        self.cfg = cfg
        lo, hi = cfg.init_range
        cells, proj = cfg.num_cells, cfg.projection_dim

        def uniform(shape, suffix):
            return Tensor(rng.uniform(lo, hi, size=shape), requires_grad=True,
                          name=f"{name}.{suffix}")

        self.wx = uniform((d_in, 4 * cells), "wx")
        self.wr = uniform((proj, 4 * cells), "wr")
        self.b = uniform((4 * cells,), "b")
        self.peep_i = uniform((cells,), "peep_i")
        self.peep_f = uniform((cells,), "peep_f")
        self.peep_o = uniform((cells,), "peep_o")
        self.wp = uniform((cells, proj), "wp")

    def parameters(self) -> list[tuple[str, Tensor]]:
        return [(t.name, t) for t in (self.wx, self.wr, self.b, self.peep_i,
                                      self.peep_f, self.peep_o, self.wp)]

    def step(self, tape: Tape, x_t: Tensor, r_prev: Tensor, c_prev: Tensor):
        cells = self.cfg.num_cells
        z = ad.add(tape, ad.add(tape, ad.matmul(tape, x_t, self.wx),
                                ad.matmul(tape, r_prev, self.wr)), self.b)
        zi = ad.slice_(tape, z, (slice(None), slice(0, cells)))
        zf = ad.slice_(tape, z, (slice(None), slice(cells, 2 * cells)))
        zg = ad.slice_(tape, z, (slice(None), slice(2 * cells, 3 * cells)))
        zo = ad.slice_(tape, z, (slice(None), slice(3 * cells, 4 * cells)))
        gate_i = ad.sigmoid(tape, ad.add(tape, zi, ad.mul(tape, self.peep_i, c_prev)))
        gate_f = ad.sigmoid(tape, ad.add(tape, zf, ad.mul(tape, self.peep_f, c_prev)))
        candidate = ad.tanh(tape, zg)
        c = ad.add(tape, ad.mul(tape, gate_f, c_prev), ad.mul(tape, gate_i, candidate))
        c = ad.clip(tape, c, *self.cfg.cell_clip)
        gate_o = ad.sigmoid(tape, ad.add(tape, zo, ad.mul(tape, self.peep_o, c)))
        m = ad.mul(tape, gate_o, ad.tanh(tape, c))
        r = ad.matmul(tape, m, self.wp)
        return r, c

    def run(self, tape: Tape, x: Tensor) -> Tensor:
        batch, length, _ = x.values.shape
        r = Tensor(np.zeros((batch, self.cfg.projection_dim)))
        c = Tensor(np.zeros((batch, self.cfg.num_cells)))
        outputs = []
        for t in range(length):
            x_t = ad.slice_(tape, x, (slice(None), t))
            r, c = self.step(tape, x_t, r, c)
            outputs.append(ad.reshape(tape, r, (batch, 1, self.cfg.projection_dim)))
        return ad.concat(tape, *outputs, axis=1) if length > 1 else outputs[0]


class Blstm:
    """Forward and backward LSTM directions, concatenated per position."""

    def __init__(self, d_in: int, cfg: LstmConfig, rng: np.random.Generator, name: str):
        self.cfg = cfg
        self.fw = LstmDirection(d_in, cfg, rng, f"{name}.fw")
        self.bw = LstmDirection(d_in, cfg, rng, f"{name}.bw")

    def parameters(self) -> list[tuple[str, Tensor]]:
        return self.fw.parameters() + self.bw.parameters()

    def __call__(self, tape: Tape, x: Tensor, lengths: np.ndarray | None = None) -> Tensor:
        batch, length, _ = x.values.shape
        if lengths is None:
            lengths = np.full(batch, length, dtype=np.int64)
        # Reverse each sequence within its true length; padded tail positions
        # map to themselves, so pads stay pads and the map is an involution.
        steps = np.arange(length)[None, :]
        rev_idx = np.where(steps < lengths[:, None], lengths[:, None] - 1 - steps, steps)
        forward = self.fw.run(tape, x)
        backward_rev = self.bw.run(tape, ad.take_time(tape, x, rev_idx))
        backward = ad.take_time(tape, backward_rev, rev_idx)
        return ad.concat(tape, forward, backward, axis=-1)


def blstm_forward(tape: Tape, blstm: Blstm, x: Tensor,
                  lengths: np.ndarray | None = None) -> Tensor:
    """BLSTM over [T, d] or [B, T, d] input; output dim is 2*projection."""
    single = x.values.ndim == 2
    if single:
        x = ad.reshape(tape, x, (1,) + x.values.shape)
    out = blstm(tape, x, lengths)
    if single:
        out = ad.reshape(tape, out, out.values.shape[1:])
    return out


def max_pool_over_time(tape: Tape, x: Tensor, mask: np.ndarray) -> Tensor:
    """Columnwise max over valid positions; [T, d] -> [d] or [B, T, d] -> [B, d]."""
    return ad.max_over_time(tape, x, mask)
