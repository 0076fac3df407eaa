"""Frozen toy encoders for both modalities, plus the patch and token front ends.

The audio side turns a spectrogram into a grid of patches (optionally thinned
by structured patchout) and runs a small frozen self-attention stack over the
patch tokens; the text side runs the same stack over WordPiece tokens and
returns the class-token output. All weights are drawn once from a seed and
never trained: learning happens entirely in the projection heads, and real
pre-trained encoders can be swapped in through embedding dumps.
"""

from __future__ import annotations

import math
import unicodedata
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources

import numpy as np

from .dsp import N_MELS, Spectrogram
from .seeding import derive_seed

MAX_CONTENT_TOKENS = 32
UNK_TOKEN = "[UNK]"
CLS_TOKEN = "[CLS]"


class EncoderError(Exception):
    pass


class InputTooShort(EncoderError):
    pass


class DropExceedsGrid(EncoderError):
    pass


class EmptyGrid(EncoderError):
    pass


@dataclass(frozen=True)
class PatchGeometry:
    """Patch extraction and patchout settings for one audio front end."""

    patch_f: int = 16
    patch_t: int = 16
    stride_f: int = 16
    stride_t: int = 16
    drop_f: int = 0
    drop_t: int = 0
    max_input_seconds: float = 10.0

    def __post_init__(self):
        if self.patch_f < 1 or self.patch_t < 1:
            raise ValueError("patch sides must be >= 1")
        if self.stride_f < 1 or self.stride_t < 1:
            raise ValueError("strides must be >= 1")
        if self.drop_f < 0 or self.drop_t < 0:
            raise ValueError("patchout counts must be >= 0")
        if self.patch_f > N_MELS:
            raise ValueError(f"patch_f {self.patch_f} exceeds {N_MELS} mel bins")


# Named presets: 16x16 patches with either non-overlapping or overlapping
# strides, patchout tuned per stride, and the positional-encoding span that
# bounds how much audio one encoder pass may see.
PRESETS: dict[str, PatchGeometry] = {
    "passt-n": PatchGeometry(stride_f=16, stride_t=16, drop_f=2, drop_t=15, max_input_seconds=10.0),
    "passt-s": PatchGeometry(stride_f=10, stride_t=10, drop_f=4, drop_t=50, max_input_seconds=10.0),
    "passt-s20": PatchGeometry(stride_f=10, stride_t=10, drop_f=4, drop_t=80, max_input_seconds=20.0),
}


@dataclass(frozen=True)
class PatchGrid:
    """Patch vectors with their (frequency-row, time-column) position tags.

    rows/cols describe the full extraction grid; after patchout the patch list
    shrinks but tags keep referring to the original grid positions.
    """

    rows: int
    cols: int
    patches: np.ndarray  # (n, patch_f * patch_t)
    tags: np.ndarray  # (n, 2) int, row-major (row, col)

    def __post_init__(self):
        patches = np.asarray(self.patches, dtype=np.float64)
        tags = np.asarray(self.tags, dtype=np.int64)
        object.__setattr__(self, "patches", patches)
        object.__setattr__(self, "tags", tags)
        if patches.ndim != 2 or tags.ndim != 2 or tags.shape[1] != 2:
            raise ValueError("patches must be (n, d), tags must be (n, 2)")
        if patches.shape[0] != tags.shape[0]:
            raise ValueError("patches and tags disagree on patch count")
        if len({(int(r), int(c)) for r, c in tags}) != tags.shape[0]:
            raise ValueError("position tags must be unique")

    def __len__(self) -> int:
        return self.patches.shape[0]


def patch_grid_shape(frames: int, g: PatchGeometry) -> tuple[int, int]:
    """Closed-form grid shape: rows x cols before any patchout."""
    if frames < g.patch_t:
        raise InputTooShort(f"{frames} frames < patch_t {g.patch_t}")
    rows = 1 + (N_MELS - g.patch_f) // g.stride_f
    cols = 1 + (frames - g.patch_t) // g.stride_t
    return rows, cols


def extract_patches(s: Spectrogram, g: PatchGeometry) -> PatchGrid:
    """Slice a spectrogram into a row-major grid of flattened patches."""
    rows, cols = patch_grid_shape(s.frames, g)
    # windows: (time positions, freq positions, patch_t, patch_f)
    windows = np.lib.stride_tricks.sliding_window_view(s.values, (g.patch_t, g.patch_f))
    windows = windows[:: g.stride_t, :: g.stride_f]
    patches = windows.transpose(1, 0, 2, 3).reshape(rows * cols, g.patch_t * g.patch_f)
    grid_r, grid_c = np.meshgrid(np.arange(rows), np.arange(cols), indexing="ij")
    tags = np.stack([grid_r.reshape(-1), grid_c.reshape(-1)], axis=1)
    return PatchGrid(rows=rows, cols=cols, patches=patches, tags=tags)


def structured_patchout(grid: PatchGrid, drop_f: int, drop_t: int, rng: np.random.Generator) -> PatchGrid:
    """Drop whole frequency rows and time columns, chosen uniformly without replacement.

    Surviving patches keep their original position tags, so the encoder still
    sees where each patch came from.
    """
    if drop_f >= grid.rows:
        raise DropExceedsGrid(f"drop_f {drop_f} >= rows {grid.rows}")
    if drop_t >= grid.cols:
        raise DropExceedsGrid(f"drop_t {drop_t} >= cols {grid.cols}")
    if drop_f == 0 and drop_t == 0:
        return grid
    dropped_rows = set(int(r) for r in rng.choice(grid.rows, size=drop_f, replace=False))
    dropped_cols = set(int(c) for c in rng.choice(grid.cols, size=drop_t, replace=False))
    keep = np.array(
        [int(r) not in dropped_rows and int(c) not in dropped_cols for r, c in grid.tags],
        dtype=bool,
    )
    return PatchGrid(rows=grid.rows, cols=grid.cols, patches=grid.patches[keep], tags=grid.tags[keep])


@dataclass(frozen=True)
class EncoderParams:
    """Seed and size of a frozen toy encoder."""

    seed: int = 0
    depth: int = 2
    width: int = 64
    heads: int = 4

    def __post_init__(self):
        if self.depth < 1 or self.width < 1 or self.heads < 1:
            raise ValueError("depth, width and heads must be >= 1")
        if self.width % self.heads != 0:
            raise ValueError(f"width {self.width} not divisible by heads {self.heads}")


@dataclass(frozen=True)
class _Block:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray


def _draw_blocks(rng: np.random.Generator, p: EncoderParams) -> tuple[_Block, ...]:
    w, hidden = p.width, 4 * p.width
    blocks = []
    for _ in range(p.depth):
        blocks.append(
            _Block(
                wq=rng.normal(0.0, w**-0.5, (w, w)),
                wk=rng.normal(0.0, w**-0.5, (w, w)),
                wv=rng.normal(0.0, w**-0.5, (w, w)),
                wo=rng.normal(0.0, w**-0.5, (w, w)),
                w1=rng.normal(0.0, w**-0.5, (hidden, w)),
                b1=rng.normal(0.0, 0.02, hidden),
                w2=rng.normal(0.0, hidden**-0.5, (w, hidden)),
                b2=rng.normal(0.0, 0.02, w),
            )
        )
    return tuple(blocks)


@lru_cache(maxsize=32)
def _audio_weights(p: EncoderParams, patch_dim: int):
    rng = np.random.default_rng(derive_seed(p.seed, "toy-audio-encoder"))
    w_in = rng.normal(0.0, patch_dim**-0.5, (p.width, patch_dim))
    b_in = rng.normal(0.0, 0.02, p.width)
    return w_in, b_in, _draw_blocks(rng, p)


@lru_cache(maxsize=32)
def _text_weights(p: EncoderParams, vocab_size: int):
    rng = np.random.default_rng(derive_seed(p.seed, "toy-text-encoder"))
    table = rng.normal(0.0, 1.0, (vocab_size, p.width))
    return table, _draw_blocks(rng, p)


def _layer_norm(x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps)


def _gelu(x: np.ndarray) -> np.ndarray:
    # tanh approximation
    return 0.5 * x * (1.0 + np.tanh(math.sqrt(2.0 / math.pi) * (x + 0.044715 * x**3)))


def _softmax(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _attention(x: np.ndarray, blk: _Block, heads: int) -> np.ndarray:
    n, w = x.shape
    hd = w // heads
    q = (x @ blk.wq.T).reshape(n, heads, hd).transpose(1, 0, 2)
    k = (x @ blk.wk.T).reshape(n, heads, hd).transpose(1, 0, 2)
    v = (x @ blk.wv.T).reshape(n, heads, hd).transpose(1, 0, 2)
    scores = q @ k.transpose(0, 2, 1) / math.sqrt(hd)
    out = _softmax(scores) @ v
    return out.transpose(1, 0, 2).reshape(n, w) @ blk.wo.T


def _encode_tokens(tokens: np.ndarray, blocks: tuple[_Block, ...], heads: int) -> np.ndarray:
    x = tokens
    for blk in blocks:
        x = x + _attention(_layer_norm(x), blk, heads)
        y = _layer_norm(x)
        x = x + _gelu(y @ blk.w1.T + blk.b1) @ blk.w2.T + blk.b2
    return _layer_norm(x)


def _sinusoid(positions: np.ndarray, dim: int) -> np.ndarray:
    pos = positions.astype(np.float64)[:, None]
    idx = np.arange(dim)[None, :]
    angle = pos / np.power(10000.0, (2.0 * (idx // 2)) / dim)
    return np.where(idx % 2 == 0, np.sin(angle), np.cos(angle))


def audio_encode(grid: PatchGrid, p: EncoderParams = EncoderParams()) -> np.ndarray:
    """Encode a patch grid to a width-dim vector with the frozen audio stack.

    Patches are linearly projected, given a sinusoidal 2-D positional code
    built from their (row, col) tags, run through the attention blocks, and
    mean-pooled. Position comes only from the tags, so reordering the patch
    list does not change the result.
    """
    if len(grid) == 0:
        raise EmptyGrid("cannot encode an empty patch grid")
    w_in, b_in, blocks = _audio_weights(p, grid.patches.shape[1])
    half = p.width // 2
    pos = np.concatenate(
        [_sinusoid(grid.tags[:, 0], half), _sinusoid(grid.tags[:, 1], p.width - half)], axis=1
    )
    tokens = grid.patches @ w_in.T + b_in + pos
    return _encode_tokens(tokens, blocks, p.heads).mean(axis=0)


def embed_long_audio(segments: list[PatchGrid], p: EncoderParams = EncoderParams()) -> np.ndarray:
    """Mean of the per-segment encodings; the long-input strategy."""
    if not segments:
        raise EmptyGrid("need at least one segment")
    return np.mean([audio_encode(g, p) for g in segments], axis=0)


def normalize_text(c: str) -> str:
    """Lowercase, strip Unicode punctuation, collapse whitespace."""
    kept = [ch for ch in c.lower() if not unicodedata.category(ch).startswith("P")]
    return " ".join("".join(kept).split())


class Vocabulary:
    """WordPiece vocabulary: one piece per line, '##' marks continuations."""

    def __init__(self, pieces: list[str]):
        if len(set(pieces)) != len(pieces):
            raise ValueError("vocabulary contains duplicate pieces")
        for required in (UNK_TOKEN, CLS_TOKEN):
            if required not in pieces:
                raise ValueError(f"vocabulary must contain {required}")
        self.pieces = list(pieces)
        self.index = {piece: i for i, piece in enumerate(pieces)}
        self.unk_id = self.index[UNK_TOKEN]
        self.cls_id = self.index[CLS_TOKEN]

    def __len__(self) -> int:
        return len(self.pieces)

    def piece(self, token_id: int) -> str:
        return self.pieces[token_id]

    @classmethod
    def from_file(cls, path) -> "Vocabulary":
        with open(path, encoding="utf-8") as fh:
            return cls([line.strip() for line in fh if line.strip()])

    @classmethod
    def default(cls) -> "Vocabulary":
        ref = resources.files("acre").joinpath("data/wordpiece_vocab.txt")
        return cls([line.strip() for line in ref.read_text(encoding="utf-8").splitlines() if line.strip()])


@dataclass(frozen=True)
class TokenSeq:
    """Class token followed by at most MAX_CONTENT_TOKENS content ids."""

    ids: tuple[int, ...]
    pieces: tuple[str, ...]  # content pieces only, aligned with ids[1:]

    def __post_init__(self):
        if not self.ids:
            raise ValueError("token sequence must contain the class token")
        if len(self.ids) - 1 != len(self.pieces):
            raise ValueError("ids and pieces disagree")
        if len(self.pieces) > MAX_CONTENT_TOKENS:
            raise ValueError(f"more than {MAX_CONTENT_TOKENS} content tokens")

    @property
    def content_length(self) -> int:
        return len(self.pieces)


def _wordpiece(word: str, vocab: Vocabulary) -> list[str] | None:
    pieces = []
    start = 0
    while start < len(word):
        end = len(word)
        match = None
        while start < end:
            candidate = word[start:end]
            if start > 0:
                candidate = "##" + candidate
            if candidate in vocab.index:
                match = candidate
                break
            end -= 1
        if match is None:
            return None
        pieces.append(match)
        start = end
    return pieces


def tokenize(c: str, vocab: Vocabulary) -> TokenSeq:
    """Greedy longest-match-first WordPiece over a normalized string.

    Words with no subword cover collapse to a single UNK; output is truncated
    to 32 content tokens and prefixed with the class token.
    """
    ids = [vocab.cls_id]
    pieces: list[str] = []
    for word in c.split():
        word_pieces = _wordpiece(word, vocab)
        if word_pieces is None:
            word_pieces = [UNK_TOKEN]
        for piece in word_pieces:
            if len(pieces) == MAX_CONTENT_TOKENS:
                return TokenSeq(tuple(ids), tuple(pieces))
            pieces.append(piece)
            ids.append(vocab.index[piece])
    return TokenSeq(tuple(ids), tuple(pieces))


def text_encode(t: TokenSeq, p: EncoderParams = EncoderParams(), vocab_size: int | None = None) -> np.ndarray:
    """Encode tokens with the frozen bidirectional stack; return the class-token output.

    vocab_size fixes the embedding table; it defaults to the shipped
    vocabulary's size, and must match the vocabulary the ids came from.
    """
    if vocab_size is None:
        vocab_size = len(Vocabulary.default())
    table, blocks = _text_weights(p, vocab_size)
    idx = np.asarray(t.ids, dtype=np.int64)
    if idx.min() < 0 or idx.max() >= vocab_size:
        raise EncoderError(f"token id outside vocabulary of size {vocab_size}")
    tokens = table[idx] + _sinusoid(np.arange(idx.size), p.width)
    return _encode_tokens(tokens, blocks, p.heads)[0]
