"""Patch-embedding schemes and their decoding counterparts.

Three ways to map a connectivity block x of shape (|N_l|, |N_m|) to a
d-dimensional token:

* shared linear: one projection W (S_max x d) applied to the zero-padded
  row-major flattening of every block.
* specific linear: a dedicated projection W_lm per network pair.
* bilinear: per-network factor matrices U_l (|N_l| x d); the pair
  projection is the column-wise Kronecker (Khatri-Rao) product
  W_lm = U_l (.) U_m, never materialized in the fast path:
  t_k = sum_ij U_l[i,k] * x[i,j] * U_m[j,k].

Decoding mirrors each scheme at the decoder width, with independent
parameters.  No scheme uses bias terms.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .errors import DataError
from .fc import Patch, PatchLayout

INIT_STD_LINEAR = 0.02
# product of two factors should match the linear init scale
INIT_STD_FACTOR = 0.02 ** 0.5


def khatri_rao(u_l: np.ndarray, u_m: np.ndarray) -> np.ndarray:
    """Column-wise Kronecker product: row (i, j) is U_l[i, :] * U_m[j, :].

    Row index (i, j) -> i * |N_m| + j matches the row-major block
    flattening used by :func:`fcmae.fc.vec`.
    """
    u_l, u_m = np.asarray(u_l), np.asarray(u_m)
    if u_l.ndim != 2 or u_m.ndim != 2 or u_l.shape[1] != u_m.shape[1]:
        raise DataError("khatri_rao requires 2-D factors with equal column counts")
    n_l, d = u_l.shape
    n_m = u_m.shape[0]
    return (u_l[:, None, :] * u_m[None, :, :]).reshape(n_l * n_m, d)


@dataclass(frozen=True, eq=False)
class TokenSequence:
    """n_patch x d token matrix plus the layout that ordered it."""

    tokens: np.ndarray
    layout: PatchLayout

    def __post_init__(self):
        t = np.asarray(self.tokens, dtype=np.float64)
        if t.ndim != 2 or t.shape[0] != self.layout.n_patch:
            raise DataError("token row count must equal layout.n_patch")
        object.__setattr__(self, "tokens", t)


def _network_sizes(layout: PatchLayout) -> list:
    sizes = {}
    for (l, m), (nl, nm) in zip(layout.pairs, layout.shapes):
        sizes.setdefault(l, nl)
        sizes.setdefault(m, nm)
    return [sizes[l] for l in sorted(sizes)]


class SharedLinearTokenizer:
    """One projection for all pairs; blocks zero-padded to S_max after vec."""

    kind = "shared"

    def __init__(self, layout: PatchLayout, d: int, rng: np.random.Generator):
        self.layout = layout
        self.d = d
        self.s_max = max(nl * nm for nl, nm in layout.shapes)
        self.w = nn.Tensor(
            rng.normal(0.0, INIT_STD_LINEAR, (self.s_max, d)), requires_grad=True
        )

    def parameters(self):
        return [("w", self.w)]

    def forward_batch(self, pair_blocks) -> nn.Tensor:
        b = pair_blocks[0].shape[0]
        padded = np.zeros((b, self.layout.n_patch, self.s_max))
        for p, blocks in enumerate(pair_blocks):
            padded[:, p, : blocks[0].size] = blocks.reshape(b, -1)
        return nn.matmul(nn.Tensor(padded), self.w)


class SpecificLinearTokenizer:
    """A dedicated projection per network pair."""

    kind = "specific"

    def __init__(self, layout: PatchLayout, d: int, rng: np.random.Generator):
        self.layout = layout
        self.d = d
        self.projections = [
            nn.Tensor(rng.normal(0.0, INIT_STD_LINEAR, (nl * nm, d)), requires_grad=True)
            for nl, nm in layout.shapes
        ]

    def parameters(self):
        return [(f"w{p}", w) for p, w in enumerate(self.projections)]

    def forward_batch(self, pair_blocks) -> nn.Tensor:
        b = pair_blocks[0].shape[0]
        rows = []
        for p, blocks in enumerate(pair_blocks):
            t = nn.matmul(nn.Tensor(blocks.reshape(b, -1)), self.projections[p])
            rows.append(nn.reshape(t, (b, 1, self.d)))
        return nn.concat(rows, axis=1)


class BilinearTokenizer:
    """Khatri-Rao factorized projections from per-network embeddings."""

    kind = "bilinear"

    def __init__(self, layout: PatchLayout, d: int, rng: np.random.Generator):
        self.layout = layout
        self.d = d
        self.network_sizes = _network_sizes(layout)
        self.factors = [
            nn.Tensor(rng.normal(0.0, INIT_STD_FACTOR, (nl, d)), requires_grad=True)
            for nl in self.network_sizes
        ]

    def parameters(self):
        return [(f"u{l}", u) for l, u in enumerate(self.factors)]

    def forward_batch(self, pair_blocks) -> nn.Tensor:
        b = pair_blocks[0].shape[0]
        rows = []
        for (l, m), blocks in zip(self.layout.pairs, pair_blocks):
            # t_k = sum_i U_l[i,k] * (x @ U_m)[i,k], the Khatri-Rao projection
            xu = nn.matmul(nn.Tensor(blocks), self.factors[m])
            t = nn.reduce_sum(nn.mul(self.factors[l], xu), axis=1)
            rows.append(nn.reshape(t, (b, 1, self.d)))
        return nn.concat(rows, axis=1)

    def materialized_projection(self, pair) -> np.ndarray:
        l, m = pair
        return khatri_rao(self.factors[l].data, self.factors[m].data)


class SharedLinearDetokenizer:
    kind = "shared"

    def __init__(self, layout: PatchLayout, d: int, rng: np.random.Generator):
        self.layout = layout
        self.d = d
        self.s_max = max(nl * nm for nl, nm in layout.shapes)
        self.w = nn.Tensor(
            rng.normal(0.0, INIT_STD_LINEAR, (d, self.s_max)), requires_grad=True
        )

    def parameters(self):
        return [("w", self.w)]

    def decode_pair(self, p: int, z: nn.Tensor) -> nn.Tensor:
        nl, nm = self.layout.shapes[p]
        full = nn.matmul(z, self.w)
        cropped = nn.take(full, np.arange(nl * nm), axis=1)
        return nn.reshape(cropped, (z.shape[0], nl, nm))


class SpecificLinearDetokenizer:
    kind = "specific"

    def __init__(self, layout: PatchLayout, d: int, rng: np.random.Generator):
        self.layout = layout
        self.d = d
        self.projections = [
            nn.Tensor(rng.normal(0.0, INIT_STD_LINEAR, (d, nl * nm)), requires_grad=True)
            for nl, nm in layout.shapes
        ]

    def parameters(self):
        return [(f"w{p}", w) for p, w in enumerate(self.projections)]

    def decode_pair(self, p: int, z: nn.Tensor) -> nn.Tensor:
        nl, nm = self.layout.shapes[p]
        return nn.reshape(nn.matmul(z, self.projections[p]), (z.shape[0], nl, nm))


class BilinearDetokenizer:
    """Transpose map of bilinear tokenization with decoder-width factors V_l."""

    kind = "bilinear"

    def __init__(self, layout: PatchLayout, d: int, rng: np.random.Generator):
        self.layout = layout
        self.d = d
        self.network_sizes = _network_sizes(layout)
        self.factors = [
            nn.Tensor(rng.normal(0.0, INIT_STD_FACTOR, (nl, d)), requires_grad=True)
            for nl in self.network_sizes
        ]

    def parameters(self):
        return [(f"v{l}", v) for l, v in enumerate(self.factors)]

    def decode_pair(self, p: int, z: nn.Tensor) -> nn.Tensor:
        l, m = self.layout.pairs[p]
        # xhat[i,j] = sum_k V_l[i,k] * z_k * V_m[j,k]
        b = z.shape[0]
        weighted = nn.mul(self.factors[l], nn.reshape(z, (b, 1, self.d)))
        return nn.matmul(weighted, nn.transpose(self.factors[m], (1, 0)))

    def materialized_projection(self, pair) -> np.ndarray:
        l, m = pair
        return khatri_rao(self.factors[l].data, self.factors[m].data)


_TOKENIZERS = {
    "shared": SharedLinearTokenizer,
    "specific": SpecificLinearTokenizer,
    "bilinear": BilinearTokenizer,
}
_DETOKENIZERS = {
    "shared": SharedLinearDetokenizer,
    "specific": SpecificLinearDetokenizer,
    "bilinear": BilinearDetokenizer,
}

TOKENIZER_KINDS = tuple(_TOKENIZERS)


def init_tokenizer(kind: str, layout: PatchLayout, d: int, seed):
    """Construct a tokenizer with i.i.d. Gaussian parameters, deterministic per seed."""
    if d < 1:
        raise DataError(f"embedding width must be >= 1, got {d}")
    if kind not in _TOKENIZERS:
        raise DataError(f"unknown tokenizer kind: {kind!r}")
    return _TOKENIZERS[kind](layout, d, np.random.default_rng(seed))


def init_detokenizer(kind: str, layout: PatchLayout, d: int, seed):
    if d < 1:
        raise DataError(f"decoding width must be >= 1, got {d}")
    if kind not in _DETOKENIZERS:
        raise DataError(f"unknown detokenizer kind: {kind!r}")
    return _DETOKENIZERS[kind](layout, d, np.random.default_rng(seed))


def param_count(tok) -> int:
    """Exact number of learnable scalars."""
    return sum(t.data.size for _, t in tok.parameters())


def _check_patches(layout: PatchLayout, patches) -> None:
    if len(patches) != layout.n_patch:
        raise DataError("patch list does not match tokenizer layout")
    for patch, pair, shape in zip(patches, layout.pairs, layout.shapes):
        if patch.pair != pair or patch.block.shape != shape:
            raise DataError(
                f"patch {patch.pair} with shape {patch.block.shape} does not match "
                f"layout entry {pair} {shape}"
            )


def tokenize(tok, patches) -> TokenSequence:
    """Embed one subject's patches into an n_patch x d token matrix."""
    _check_patches(tok.layout, patches)
    pair_blocks = [p.block[None, :, :] for p in patches]
    out = tok.forward_batch(pair_blocks)
    return TokenSequence(tokens=out.data[0], layout=tok.layout)


def detokenize(detok, tokens: TokenSequence) -> list:
    """Decode a token matrix back to one block per layout pair."""
    if tokens.tokens.shape[1] != detok.d:
        raise DataError(
            f"token width {tokens.tokens.shape[1]} != detokenizer width {detok.d}"
        )
    if tokens.layout.pairs != detok.layout.pairs:
        raise DataError("token layout does not match detokenizer layout")
    patches = []
    for p, pair in enumerate(detok.layout.pairs):
        z = nn.Tensor(tokens.tokens[p : p + 1])
        block = detok.decode_pair(p, z).data[0]
        patches.append(Patch(pair=pair, block=block))
    return patches
