"""Toy ViT detection backbone with windowed attention and reference reuse.

Two forward paths share one set of weights:

* ``forward_dense`` embeds every region and runs all blocks over the full
  token grid, refreshing the per-block reference tensors and the persistent
  output buffer.
* ``forward_masked`` embeds only mask-selected regions. Global-attention
  blocks run directly on the sparse token set. Windowed blocks cannot (window
  partitioning needs the full grid), so the sparse tokens are scattered into
  the block's reference tensor, the attention sublayer runs at full width,
  and the tokens are gathered back before the per-token FFN. The scattered
  tensor becomes the block's new reference. Final tokens are scattered into
  the output buffer, leaving unselected rows untouched bit for bit.

All arithmetic is float64. Weight values are generated by casting through
float32 so the 32-bit serialization container round-trips exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.special import erf

from .masks import GridSpec, RegionMask

_WEIGHT_STD = 0.02
_LN_EPS = 1e-6


class UninitializedStateError(RuntimeError):
    """Raised when a masked frame arrives before any full frame."""


@dataclass(frozen=True)
class ModelConfig:
    """Backbone geometry.

    ``global_blocks`` holds 1-based indices of blocks using global attention;
    every other block uses windowed attention over window_side x window_side
    token windows. The reference 672px geometry uses blocks {3, 6, 9, 12} of
    12 as global; a non-windowed backbone lists every block.
    """

    embed_dim: int
    num_heads: int
    num_blocks: int
    global_blocks: frozenset
    window_side: int
    ffn_hidden: int
    grid: GridSpec
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "global_blocks", frozenset(int(b) for b in self.global_blocks))
        if self.embed_dim < 1 or self.num_heads < 1 or self.num_blocks < 1:
            raise ValueError("embed_dim, num_heads and num_blocks must be >= 1")
        if self.embed_dim % self.num_heads:
            raise ValueError("embed_dim must be divisible by num_heads")
        if self.window_side < 1 or self.ffn_hidden < 1:
            raise ValueError("window_side and ffn_hidden must be >= 1")
        bad = [b for b in self.global_blocks if not 1 <= b <= self.num_blocks]
        if bad:
            raise ValueError(f"global block indices out of range 1..{self.num_blocks}: {sorted(bad)}")
        if self.num_windowed and (
            self.grid.rows % self.window_side or self.grid.cols % self.window_side
        ):
            raise ValueError(
                f"grid {self.grid.rows}x{self.grid.cols} is not divisible by "
                f"window_side {self.window_side}"
            )

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads

    @property
    def num_tokens(self) -> int:
        return self.grid.num_tokens

    @property
    def patch_dim(self) -> int:
        return self.grid.region_size * self.grid.region_size * 3

    def is_global(self, block_index: int) -> bool:
        """block_index is 1-based."""
        return block_index in self.global_blocks

    @property
    def windowed_blocks(self) -> tuple:
        return tuple(b for b in range(1, self.num_blocks + 1) if not self.is_global(b))

    @property
    def num_windowed(self) -> int:
        return self.num_blocks - len(self.global_blocks)


def vitdet_b_config(frame_size=(672, 672), region_size=16, windowed=True, seed=0) -> ModelConfig:
    """ViT-B detection-backbone geometry: 12 blocks, dim 768, 14-token windows."""
    grid = GridSpec(frame_size[0], frame_size[1], region_size)
    num_blocks = 12
    global_blocks = {3, 6, 9, 12} if windowed else set(range(1, num_blocks + 1))
    return ModelConfig(
        embed_dim=768,
        num_heads=12,
        num_blocks=num_blocks,
        global_blocks=frozenset(global_blocks),
        window_side=14,
        ffn_hidden=3072,
        grid=grid,
        seed=seed,
    )


def toy_config(frame_size=(128, 128), region_size=16, windowed=True, seed=0) -> ModelConfig:
    """Desk-scale geometry: 8x8 grid, dim 64, 4 blocks, 4-token windows."""
    grid = GridSpec(frame_size[0], frame_size[1], region_size)
    global_blocks = {2, 4} if windowed else {1, 2, 3, 4}
    return ModelConfig(
        embed_dim=64,
        num_heads=4,
        num_blocks=4,
        global_blocks=frozenset(global_blocks),
        window_side=4,
        ffn_hidden=256,
        grid=grid,
        seed=seed,
    )


@dataclass(eq=False)
class BlockWeights:
    ln1_gamma: np.ndarray
    ln1_beta: np.ndarray
    qkv_weight: np.ndarray  # (L, 3L)
    qkv_bias: np.ndarray
    proj_weight: np.ndarray  # (L, L)
    proj_bias: np.ndarray
    ln2_gamma: np.ndarray
    ln2_beta: np.ndarray
    fc1_weight: np.ndarray  # (L, F)
    fc1_bias: np.ndarray
    fc2_weight: np.ndarray  # (F, L)
    fc2_bias: np.ndarray


@dataclass(eq=False)
class ViTBackbone:
    """Immutable weight container for one backbone instance."""

    config: ModelConfig
    patch_weight: np.ndarray  # (region^2 * 3, L)
    patch_bias: np.ndarray  # (L,)
    pos_embed: np.ndarray  # (N, L)
    blocks: list

    def __post_init__(self):
        for arr in self._all_arrays():
            arr.setflags(write=False)

    def _all_arrays(self):
        yield self.patch_weight
        yield self.patch_bias
        yield self.pos_embed
        for bw in self.blocks:
            for name in (
                "ln1_gamma", "ln1_beta", "qkv_weight", "qkv_bias", "proj_weight",
                "proj_bias", "ln2_gamma", "ln2_beta", "fc1_weight", "fc1_bias",
                "fc2_weight", "fc2_bias",
            ):
                yield getattr(bw, name)

    @classmethod
    def build(cls, config: ModelConfig) -> "ViTBackbone":
        """Deterministic seeded initialization.

        One PCG64 stream seeded with config.seed draws, in order: the patch
        projection, the positional embedding, then per block the QKV,
        output-projection, FFN-in and FFN-out weights, all N(0, 0.02).
        Biases are zero, layer-norm scales one. Draws are cast to float32
        and back so values are exactly representable in the 32-bit container.
        """
        rng = np.random.default_rng(config.seed)
        L, F, N = config.embed_dim, config.ffn_hidden, config.num_tokens

        def draw(*shape):
            w = rng.standard_normal(shape) * _WEIGHT_STD
            return w.astype(np.float32).astype(np.float64)

        patch_weight = draw(config.patch_dim, L)
        pos_embed = draw(N, L)
        blocks = []
        for _ in range(config.num_blocks):
            blocks.append(BlockWeights(
                ln1_gamma=np.ones(L), ln1_beta=np.zeros(L),
                qkv_weight=draw(L, 3 * L), qkv_bias=np.zeros(3 * L),
                proj_weight=draw(L, L), proj_bias=np.zeros(L),
                ln2_gamma=np.ones(L), ln2_beta=np.zeros(L),
                fc1_weight=draw(L, F), fc1_bias=np.zeros(F),
                fc2_weight=draw(F, L), fc2_bias=np.zeros(L),
            ))
        return cls(config, patch_weight, np.zeros(L), pos_embed, blocks)


@dataclass(frozen=True, eq=False)
class TokenSet:
    """Sparse tokens: row-major grid locations paired with embeddings."""

    locations: np.ndarray  # (n,) int64, strictly increasing
    embeddings: np.ndarray  # (n, L) float64

    def __post_init__(self):
        locs = np.asarray(self.locations, dtype=np.int64)
        emb = np.asarray(self.embeddings, dtype=np.float64)
        if locs.ndim != 1:
            raise ValueError("locations must be a 1-D index array")
        if locs.size and (locs[0] < 0 or (np.diff(locs) <= 0).any()):
            raise ValueError("locations must be non-negative and strictly increasing")
        if emb.ndim != 2 or emb.shape[0] != locs.shape[0]:
            raise ValueError(
                f"embeddings {emb.shape} do not match {locs.shape[0]} locations"
            )
        object.__setattr__(self, "locations", locs)
        object.__setattr__(self, "embeddings", emb)

    @property
    def n(self) -> int:
        return int(self.locations.shape[0])


@dataclass
class ReferenceState:
    """Feature-reuse memory for one video stream.

    Holds one cached input tensor per windowed block plus the persistent
    output buffer: (#windowed blocks + 1) buffers in total once initialized.
    Confine each instance to a single logical execution stream.
    """

    block_inputs: dict = field(default_factory=dict)  # 1-based block index -> (N, L)
    reference_output: Optional[np.ndarray] = None
    last_full_frame: Optional[int] = None

    @property
    def initialized(self) -> bool:
        return self.reference_output is not None

    @property
    def buffer_count(self) -> int:
        return len(self.block_inputs) + (1 if self.reference_output is not None else 0)


@dataclass
class OpTrace:
    """Per-frame record of executed multiply-accumulates and data movement."""

    macs: int = 0
    gathers: int = 0
    scatters: int = 0
    tokens_processed: int = 0
    config: Optional[ModelConfig] = None
    events: list = field(default_factory=list)

    def add_macs(self, label: str, count: int) -> None:
        self.macs += int(count)
        self.events.append((label, int(count)))

    def add_matmul(self, label: str, rows: int, inner: int, cols: int) -> None:
        self.add_macs(label, rows * inner * cols)

    def add_gather(self, label: str) -> None:
        self.gathers += 1
        self.events.append((f"gather:{label}", 0))

    def add_scatter(self, label: str) -> None:
        self.scatters += 1
        self.events.append((f"scatter:{label}", 0))

    @property
    def scatter_gather_ops(self) -> int:
        return self.gathers + self.scatters


# ---------------------------------------------------------------------------
# Core math
# ---------------------------------------------------------------------------

def _layer_norm(x, gamma, beta):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + _LN_EPS) * gamma + beta


def _gelu(x):
    return 0.5 * x * (1.0 + erf(x / math.sqrt(2.0)))


def _sdp_attention(q, k, v):
    """softmax(q k^T / sqrt(d)) v over the last two axes, row-max stabilized."""
    d = q.shape[-1]
    logits = q @ np.swapaxes(k, -1, -2) / math.sqrt(d)
    logits -= logits.max(axis=-1, keepdims=True)
    w = np.exp(logits)
    w /= w.sum(axis=-1, keepdims=True)
    return w @ v


def attention(q, k, v) -> np.ndarray:
    """Single-head scaled dot-product attention for (n, d) inputs."""
    q, k, v = (np.asarray(a, dtype=np.float64) for a in (q, k, v))
    if q.ndim != 2 or q.shape != k.shape or q.shape != v.shape:
        raise ValueError(
            f"attention inputs must share one (n, d) shape, got {q.shape}, {k.shape}, {v.shape}"
        )
    if q.shape[0] < 1:
        raise ValueError("attention needs at least one token")
    return _sdp_attention(q, k, v)


def _window_partition(x, config: ModelConfig):
    """(N, C) grid-ordered rows -> (num_windows, window_side^2, C)."""
    rows, cols, ws = config.grid.rows, config.grid.cols, config.window_side
    c = x.shape[-1]
    t = x.reshape(rows // ws, ws, cols // ws, ws, c)
    return t.transpose(0, 2, 1, 3, 4).reshape(-1, ws * ws, c)


def _window_merge(w, config: ModelConfig):
    rows, cols, ws = config.grid.rows, config.grid.cols, config.window_side
    c = w.shape[-1]
    t = w.reshape(rows // ws, cols // ws, ws, ws, c)
    return t.transpose(0, 2, 1, 3, 4).reshape(rows * cols, c)


def _split_heads(x, num_heads):
    """(..., n, L) -> (..., H, n, d)"""
    *lead, n, L = x.shape
    d = L // num_heads
    return x.reshape(*lead, n, num_heads, d).swapaxes(-2, -3)


def _merge_heads(x):
    """(..., H, n, d) -> (..., n, L)"""
    *lead, H, n, d = x.shape
    return x.swapaxes(-2, -3).reshape(*lead, n, H * d)


def _attention_sublayer(x, bw: BlockWeights, config: ModelConfig, windowed: bool, trace):
    n, L = x.shape
    h = _layer_norm(x, bw.ln1_gamma, bw.ln1_beta)
    qkv = h @ bw.qkv_weight + bw.qkv_bias
    if trace:
        trace.add_matmul("qkv", n, L, 3 * L)
    q, k, v = np.split(qkv, 3, axis=-1)
    if windowed:
        if n != config.num_tokens:
            raise ValueError("windowed attention requires the full token grid")
        q, k, v = (_split_heads(_window_partition(a, config), config.num_heads) for a in (q, k, v))
        a = _sdp_attention(q, k, v)  # (nw, H, wt, d)
        wt = config.window_side ** 2
        if trace:
            trace.add_macs("attn", 2 * n * wt * L)
        a = _window_merge(_merge_heads(a), config)
    else:
        q, k, v = (_split_heads(a, config.num_heads) for a in (q, k, v))
        a = _sdp_attention(q, k, v)  # (H, n, d)
        if trace:
            trace.add_macs("attn", 2 * n * n * L)
        a = _merge_heads(a)
    out = a @ bw.proj_weight + bw.proj_bias
    if trace:
        trace.add_matmul("proj", n, L, L)
    return x + out


def _ffn_sublayer(x, bw: BlockWeights, config: ModelConfig, trace):
    n, L = x.shape
    h = _layer_norm(x, bw.ln2_gamma, bw.ln2_beta)
    f = _gelu(h @ bw.fc1_weight + bw.fc1_bias)
    y = f @ bw.fc2_weight + bw.fc2_bias
    if trace:
        trace.add_matmul("fc1", n, L, config.ffn_hidden)
        trace.add_matmul("fc2", n, config.ffn_hidden, L)
    return x + y


def global_block(x, bw: BlockWeights, config: ModelConfig, trace=None):
    """Pre-norm transformer block with global attention over the given rows."""
    x = _attention_sublayer(x, bw, config, windowed=False, trace=trace)
    return _ffn_sublayer(x, bw, config, trace)


def windowed_block(x, bw: BlockWeights, config: ModelConfig, trace=None):
    """Pre-norm transformer block, attention confined to token windows."""
    x = _attention_sublayer(x, bw, config, windowed=True, trace=trace)
    return _ffn_sublayer(x, bw, config, trace)


# ---------------------------------------------------------------------------
# Token-level operations
# ---------------------------------------------------------------------------

def _extract_patches(frame, spec: GridSpec) -> np.ndarray:
    """(H, W, 3) frame -> (N, region^2*3) rows, pixel order y, x, channel.

    Integer frames are scaled by 1/255; float frames are taken as-is.
    """
    frame = np.asarray(frame)
    if frame.shape != (spec.frame_height, spec.frame_width, 3):
        raise ValueError(
            f"frame shape {frame.shape} does not match grid "
            f"({spec.frame_height}, {spec.frame_width}, 3)"
        )
    if np.issubdtype(frame.dtype, np.integer):
        frame = frame.astype(np.float64) / 255.0
    else:
        frame = frame.astype(np.float64)
    s = spec.region_size
    t = frame.reshape(spec.rows, s, spec.cols, s, 3)
    return t.transpose(0, 2, 1, 3, 4).reshape(spec.num_tokens, s * s * 3)


def patch_embed(frame, mask: Optional[RegionMask], model: ViTBackbone, trace=None) -> TokenSet:
    """Embed selected regions: linear patch projection plus positional term.

    ``mask=None`` embeds every region (the dense path).
    """
    config = model.config
    patches = _extract_patches(frame, config.grid)
    if mask is None:
        locs = np.arange(config.num_tokens, dtype=np.int64)
        selected = patches
    else:
        if mask.spec != config.grid:
            raise ValueError(f"mask spec {mask.spec} does not match model grid {config.grid}")
        locs = mask.true_locations()
        selected = patches[locs]
    x = selected @ model.patch_weight + model.patch_bias + model.pos_embed[locs]
    if trace:
        trace.add_matmul("patch_embed", len(locs), config.patch_dim, config.embed_dim)
    return TokenSet(locs, x)


def gather(tensor, locations, trace=None) -> TokenSet:
    """Select rows of an (N, L) tensor at strictly increasing locations."""
    tensor = np.asarray(tensor, dtype=np.float64)
    locs = np.asarray(locations, dtype=np.int64)
    if tensor.ndim != 2:
        raise ValueError("gather expects an (N, L) tensor")
    if locs.size and (locs[0] < 0 or locs[-1] >= tensor.shape[0]):
        raise ValueError(f"gather locations out of range 0..{tensor.shape[0] - 1}")
    tokens = TokenSet(locs, tensor[locs].copy())
    if trace:
        trace.add_gather("rows")
    return tokens


def scatter(tokens: TokenSet, base, trace=None) -> np.ndarray:
    """Write token rows into a copy of base; other rows are untouched."""
    base = np.asarray(base, dtype=np.float64)
    if base.ndim != 2:
        raise ValueError("scatter expects an (N, L) base tensor")
    if tokens.n and tokens.locations[-1] >= base.shape[0]:
        raise ValueError(f"scatter locations out of range 0..{base.shape[0] - 1}")
    if tokens.n and tokens.embeddings.shape[1] != base.shape[1]:
        raise ValueError("token width does not match base tensor width")
    out = base.copy()
    out[tokens.locations] = tokens.embeddings
    if trace:
        trace.add_scatter("rows")
    return out


def msa_block_global(tokens: TokenSet, bw: BlockWeights, config: ModelConfig, trace=None) -> TokenSet:
    """Global-attention block over exactly the provided tokens."""
    return TokenSet(tokens.locations, global_block(tokens.embeddings, bw, config, trace))


def wmsa_block_masked(tokens: TokenSet, reference, bw: BlockWeights, config: ModelConfig, trace=None):
    """Splice sparse tokens through a windowed block via its reference tensor.

    Scatters the tokens into a copy of the reference, runs the attention
    sublayer over all N tokens (window partitioning needs the full grid),
    gathers the rows back at the token locations and applies the per-token
    FFN sublayer to those rows only. Returns the output TokenSet and the
    scattered input tensor, which becomes the block's new reference.
    """
    reference = np.asarray(reference, dtype=np.float64)
    N = config.num_tokens
    if reference.shape != (N, config.embed_dim):
        raise ValueError(
            f"reference shape {reference.shape} does not match ({N}, {config.embed_dim})"
        )
    if tokens.n and tokens.locations[-1] >= N:
        raise ValueError(f"token locations out of range 0..{N - 1}")
    full = reference.copy()
    full[tokens.locations] = tokens.embeddings
    if trace:
        trace.add_scatter("windowed block input")
    y = _attention_sublayer(full, bw, config, windowed=True, trace=trace)
    g = y[tokens.locations]
    if trace:
        trace.add_gather("windowed block output")
    out = _ffn_sublayer(g, bw, config, trace)
    return TokenSet(tokens.locations, out), full


# ---------------------------------------------------------------------------
# Whole-backbone passes
# ---------------------------------------------------------------------------

def forward_dense(frame, model: ViTBackbone, state: ReferenceState, frame_index: int = 0,
                  trace: Optional[OpTrace] = None) -> np.ndarray:
    """Process every token and refresh all reference buffers."""
    config = model.config
    if trace:
        trace.config = config
        trace.tokens_processed = config.num_tokens
    tokens = patch_embed(frame, None, model, trace)
    x = tokens.embeddings
    for b in range(1, config.num_blocks + 1):
        bw = model.blocks[b - 1]
        if config.is_global(b):
            x = global_block(x, bw, config, trace)
        else:
            state.block_inputs[b] = x.copy()
            x = windowed_block(x, bw, config, trace)
    state.reference_output = x.copy()
    state.last_full_frame = frame_index
    return x


def forward_masked(frame, mask: RegionMask, model: ViTBackbone, state: ReferenceState,
                   trace: Optional[OpTrace] = None) -> np.ndarray:
    """Process only mask-selected tokens on top of the cached references.

    Returns the updated output buffer: selected rows carry this frame's
    features, every other row is bitwise identical to the previous buffer.
    """
    if not state.initialized:
        raise UninitializedStateError("masked frame before any full frame")
    config = model.config
    if trace:
        trace.config = config
    tokens = patch_embed(frame, mask, model, trace)
    if trace:
        trace.tokens_processed = tokens.n
    if tokens.n == 0:
        return state.reference_output.copy()
    if trace:
        trace.add_gather("input tokens")
    for b in range(1, config.num_blocks + 1):
        bw = model.blocks[b - 1]
        if config.is_global(b):
            tokens = msa_block_global(tokens, bw, config, trace)
        else:
            tokens, state.block_inputs[b] = wmsa_block_masked(
                tokens, state.block_inputs[b], bw, config, trace
            )
    out = state.reference_output.copy()
    out[tokens.locations] = tokens.embeddings
    if trace:
        trace.add_scatter("output buffer")
    state.reference_output = out
    return out.copy()
