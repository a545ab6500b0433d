"""Analytic MAC and buffer-memory accounting for the backbone.

Counting unit is multiply-accumulates (reported as GMACs = 1e9 MACs), for
the backbone only: patch embedding, QKV/output projections, attention
score and value products, and the FFN. Layer norms, softmax, GELU and
residual adds are excluded. Buffers are sized at 4 bytes per value
(float32); MB means 10^6 bytes.

Masked-frame convention for windowed blocks: QKV, attention and the output
projection are priced over the full N-token scattered tensor, the FFN over
the gathered tokens only. Global blocks and the patch embedding are priced
at the kept-token count. This matches what the masked forward path actually
executes, so traced MACs equal the analytic figures exactly.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

from .model import ModelConfig, OpTrace

BYTES_PER_VALUE = 4  # buffers modeled as float32
GATES_PER_BLOCK = 8  # token gates + buffers per block in delta-gated pipelines

CSV_COLUMNS = (
    "dataset", "backbone", "tokens_processed", "patch_keep_rate", "period",
    "static_keep_rate", "precision", "recall", "gmacs", "buffer_mb",
    "scatter_gather_ops",
)


@dataclass(frozen=True)
class CostReport:
    """Per-frame (or per-configuration) cost summary."""

    backbone_gmacs: float
    buffer_bytes: int
    scatter_gather_ops: int
    tokens_processed: int

    def __post_init__(self):
        if self.backbone_gmacs < 0 or self.buffer_bytes < 0 or self.scatter_gather_ops < 0:
            raise ValueError("cost figures must be non-negative")
        if self.tokens_processed < 0:
            raise ValueError("tokens_processed must be non-negative")


def _attention_macs(config: ModelConfig, n_tokens: int, is_global: bool) -> int:
    """Score + value products: 2 MACs * embed_dim per attended token pair."""
    L = config.embed_dim
    if is_global:
        return 2 * n_tokens * n_tokens * L
    window_tokens = config.window_side ** 2
    return 2 * n_tokens * window_tokens * L


def macs_dense(config: ModelConfig) -> int:
    """Exact MAC count of a full-frame pass."""
    N, L, F = config.num_tokens, config.embed_dim, config.ffn_hidden
    total = N * config.patch_dim * L  # patch embedding
    for b in range(1, config.num_blocks + 1):
        total += 3 * N * L * L  # QKV
        total += _attention_macs(config, N, config.is_global(b))
        total += N * L * L  # output projection
        total += 2 * N * L * F  # FFN
    return total


def macs_masked(config: ModelConfig, tokens_kept: int) -> int:
    """Exact MAC count of a masked pass keeping ``tokens_kept`` tokens."""
    N, L, F = config.num_tokens, config.embed_dim, config.ffn_hidden
    if not 0 < tokens_kept <= N:
        raise ValueError(f"tokens_kept must be in 1..{N}, got {tokens_kept}")
    n = tokens_kept
    total = n * config.patch_dim * L
    for b in range(1, config.num_blocks + 1):
        if config.is_global(b):
            total += 3 * n * L * L
            total += _attention_macs(config, n, True)
            total += n * L * L
            total += 2 * n * L * F
        else:
            # attention half runs on the scattered full-width tensor
            total += 3 * N * L * L
            total += _attention_macs(config, N, False)
            total += N * L * L
            total += 2 * n * L * F  # FFN on gathered tokens
    return total


def flops_dense(config: ModelConfig) -> float:
    return macs_dense(config) / 1e9


def flops_masked(config: ModelConfig, tokens_kept: int) -> float:
    return macs_masked(config, tokens_kept) / 1e9


def memory_block_reference(config: ModelConfig) -> int:
    """Bytes of feature reuse state: one tensor per windowed block + output."""
    per_buffer = config.num_tokens * config.embed_dim * BYTES_PER_VALUE
    return (config.num_windowed + 1) * per_buffer


def memory_token_gating(config: ModelConfig) -> int:
    """Bytes of per-layer gate/buffer state in delta-gated pipelines.

    Per block: 8 gate/buffer tensors of N x L, plus the cached attention
    product (N x N per head) and value product (N x L) used to update
    attention incrementally.
    """
    N, L, H = config.num_tokens, config.embed_dim, config.num_heads
    token_buffers = GATES_PER_BLOCK * N * L * BYTES_PER_VALUE
    attention_product = N * N * H * BYTES_PER_VALUE
    value_product = N * L * BYTES_PER_VALUE
    return config.num_blocks * (token_buffers + attention_product + value_product)


def masked_scatter_gather_ops(config: ModelConfig) -> int:
    """Data-movement budget of one masked frame: input gather, one
    scatter+gather pair per windowed block, one output scatter."""
    return 2 + 2 * config.num_windowed


def measure_run(trace: OpTrace) -> CostReport:
    """Summarize one traced frame; MACs come from the executed ops."""
    if trace.config is None:
        raise ValueError("trace has no model config attached (no forward pass ran)")
    return CostReport(
        backbone_gmacs=trace.macs / 1e9,
        buffer_bytes=memory_block_reference(trace.config),
        scatter_gather_ops=trace.scatter_gather_ops,
        tokens_processed=trace.tokens_processed,
    )


# ---------------------------------------------------------------------------
# Cost tables
# ---------------------------------------------------------------------------

def _backbone_label(config: ModelConfig) -> str:
    return "windowed" if config.num_windowed else "global"


def cost_table(config: ModelConfig, tokens_kept=(), dataset: str = "analytic") -> list:
    """Rows mirroring the summary-table schema: the dense row first, then one
    row per requested kept-token count."""
    N = config.num_tokens
    rows = [{
        "dataset": dataset,
        "backbone": _backbone_label(config),
        "tokens_processed": N,
        "patch_keep_rate": 1.0,
        "period": "",
        "static_keep_rate": "",
        "precision": "",
        "recall": "",
        "gmacs": flops_dense(config),
        "buffer_mb": memory_block_reference(config) / 1e6,
        "scatter_gather_ops": 0,
    }]
    for n in tokens_kept:
        rows.append({
            "dataset": dataset,
            "backbone": _backbone_label(config),
            "tokens_processed": int(n),
            "patch_keep_rate": int(n) / N,
            "period": "",
            "static_keep_rate": "",
            "precision": "",
            "recall": "",
            "gmacs": flops_masked(config, int(n)),
            "buffer_mb": memory_block_reference(config) / 1e6,
            "scatter_gather_ops": masked_scatter_gather_ops(config),
        })
    return rows


def _format_cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_cost_csv(path, rows) -> None:
    """Write rows under the stable column schema; empty cells mean N/A."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(CSV_COLUMNS)
        for row in rows:
            writer.writerow([_format_cell(row.get(col, "")) for col in CSV_COLUMNS])
