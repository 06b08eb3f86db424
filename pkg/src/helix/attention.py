"""Spatio-temporal attention over coarse voxels, with causal key/value buffering.

Each coarse voxel token carries its absolute center, the release time of its
first point and its rotation index.  A token attends the tokens of the current
and selected past rotations that lie within a metric radius; compatibilities
use the token's key both as key and as query plus a binned relative positional
encoding, per head.  Blocks keep no feed-forward or normalization stages: the
learnable state is the per-head linear layers and the positional tables.

Streaming works slice by slice: the keys, values and positions of every
processed slice stay buffered for ``max(offsets)`` rotations, so a new slice
attends a large spatio-temporal neighborhood without recomputation.  Buffered
tensors stay connected to the autodiff graph, which makes training windows
differentiate exactly through the buffer.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import (
    Linear,
    Tensor,
    add,
    concat,
    gather_rows,
    mul,
    reshape,
    scatter_add_rows,
    segment_softmax,
    slice_cols,
    tsum,
)
from .geometry import SparseCylGrid


@dataclass
class AttnConfig:
    blocks: int = 2
    heads: int = 4
    dim: int = 128
    key_dim: int = 8
    radius: float = 6.0
    offsets: tuple = (0, 5, 10)
    rho_x: float = 1.5
    rho_y: float = 1.5
    rho_z: float = 0.5
    rho_t: float = 0.52          # 5 rotations x 104 ms; kept on record for stats
    alpha: float = 2.0
    beta: int = 3
    gamma: float = 1.25
    with_queries: bool = False   # ablation: separate query projection
    without_posenc: bool = False  # ablation: drop the positional term
    slice_by_slice: bool = False  # ablation: mask restricted to the current slice

    def __post_init__(self):
        if self.dim % self.heads != 0:
            raise ValueError("dim must be divisible by heads")
        if 0 not in self.offsets:
            raise ValueError("rotation offsets must contain 0")
        self.offsets = tuple(sorted(self.offsets))

    @property
    def head_dim(self):
        return self.dim // self.heads

    @property
    def bins_spatial(self):
        return 2 * self.beta + 1

    @property
    def bins_temporal(self):
        return len(self.offsets)

    @property
    def max_offset(self):
        return max(self.offsets)


# ---------------------------------------------------------------------------
# positional-encoding bins
# ---------------------------------------------------------------------------


def _round_half_away(v):
    return np.sign(v) * np.floor(np.abs(v) + 0.5)


def spatial_bin(x, rho, alpha=2.0, beta=3, gamma=1.25):
    """Discretize a metric offset into ``2*beta + 1`` irregular bins.

    Rounded-linear inside ``|x| <= alpha*rho``; logarithmic growth outside,
    saturating at ``+-beta``.  Monotone non-decreasing in ``x``.
    """
    x = np.asarray(x, dtype=np.float64)
    ax = np.abs(x)
    lin = _round_half_away(x / rho)
    # clamp below the branch point: the log branch is only used for |x| > alpha*rho
    arg = alpha + (np.log(np.maximum(ax, alpha * rho) / (alpha * rho))
                   / np.log(alpha / gamma) * (beta - alpha))
    logpart = np.sign(x) * np.minimum(beta, _round_half_away(arg))
    out = np.where(ax <= alpha * rho, lin, logpart)
    return np.clip(out, -beta, beta).astype(np.int64)


def temporal_bin(rotation_delta, offsets):
    """Bin index of a rotation offset: its position in the sorted offset set."""
    offs = np.asarray(offsets)
    idx = np.searchsorted(offs, rotation_delta)
    idx = np.clip(idx, 0, offs.size - 1)
    if np.any(offs[idx] != rotation_delta):
        raise ValueError("rotation delta outside the configured offset set")
    return idx.astype(np.int64)


# ---------------------------------------------------------------------------
# tokens, parameters, buffer
# ---------------------------------------------------------------------------


@dataclass
class VoxelTokens:
    """Tokens of one or more slices at the coarsest grid level."""

    features: Tensor        # (n, dim)
    centers: np.ndarray     # (n, 3) absolute
    t: np.ndarray           # (n,) release time of first point
    rotation: np.ndarray    # (n,) rotation index
    slice_seq: np.ndarray   # (n,) global slice counter

    def __len__(self):
        return self.centers.shape[0]


def tokens_from_grid(grid: SparseCylGrid) -> VoxelTokens:
    n = grid.n_cells
    return VoxelTokens(grid.features, grid.centers, grid.t_first, grid.rotation,
                       np.full(n, grid.slice_seq, dtype=np.int64))


class BlockParams:
    """Per-head joint key/value projection plus positional tables for one block."""

    POS_INIT = 0.2  # keys are O(1); tables must register in compatibilities early

    def __init__(self, cfg: AttnConfig, rng, dtype=np.float64):
        K, Dh = cfg.key_dim, cfg.head_dim
        self.kv = [Linear(cfg.dim, K + Dh, rng=rng, dtype=dtype) for _ in range(cfg.heads)]
        self.query = ([Linear(cfg.dim, K, rng=rng, dtype=dtype) for _ in range(cfg.heads)]
                      if cfg.with_queries else None)
        self.pos = []
        for _ in range(cfg.heads):
            tables = {
                "X": Tensor(rng.standard_normal((cfg.bins_spatial, K)) * self.POS_INIT,
                            requires_grad=True, dtype=dtype),
                "Y": Tensor(rng.standard_normal((cfg.bins_spatial, K)) * self.POS_INIT,
                            requires_grad=True, dtype=dtype),
                "Z": Tensor(rng.standard_normal((cfg.bins_spatial, K)) * self.POS_INIT,
                            requires_grad=True, dtype=dtype),
                "T": Tensor(rng.standard_normal((cfg.bins_temporal, K)) * self.POS_INIT,
                            requires_grad=True, dtype=dtype),
            }
            self.pos.append(tables)

    def parameters(self, prefix=""):
        for h, layer in enumerate(self.kv):
            yield from layer.parameters(f"{prefix}h{h}.kv.")
        if self.query is not None:
            for h, layer in enumerate(self.query):
                yield from layer.parameters(f"{prefix}h{h}.query.")
        for h, tables in enumerate(self.pos):
            for d, tensor in tables.items():
                yield f"{prefix}h{h}.pos_{d.lower()}", tensor


class TransformerParams:
    def __init__(self, cfg: AttnConfig, rng=None, dtype=np.float64):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.cfg = cfg
        self.blocks = [BlockParams(cfg, rng, dtype) for _ in range(cfg.blocks)]

    def parameters(self, prefix="attn."):
        for w, block in enumerate(self.blocks):
            yield from block.parameters(f"{prefix}b{w}.")


@dataclass
class BufferEntry:
    """Keys/values of one processed slice, for every block and head."""

    slice_seq: int
    rotation: np.ndarray
    centers: np.ndarray
    t: np.ndarray
    keys: list     # [block][head] Tensor (n, key_dim)
    values: list   # [block][head] Tensor (n, head_dim)

    def __len__(self):
        return self.centers.shape[0]


class KVBuffer:
    """Causal ring buffer of past slices, evicted strictly by rotation age."""

    def __init__(self, cfg: AttnConfig):
        self.cfg = cfg
        self.entries: list[BufferEntry] = []

    def append(self, entry: BufferEntry):
        self.entries.append(entry)

    def evict(self, current_rotation):
        keep = self.cfg.max_offset
        self.entries = [e for e in self.entries
                        if len(e) and current_rotation - int(e.rotation.max()) <= keep]

    def clear(self):
        self.entries = []


# ---------------------------------------------------------------------------
# masking
# ---------------------------------------------------------------------------


def mask_pairs(centers_v, rotation_v, centers_u, rotation_u, cfg: AttnConfig):
    """All (v, u) attention pairs: center distance < radius, rotation offset in P.

    Returns (vi, ui) index arrays in v-major order.  Candidates are assumed
    causally valid (no future slices).
    """
    if centers_v.shape[0] == 0 or centers_u.shape[0] == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    off = rotation_v[:, None] - rotation_u[None, :]
    ok = np.isin(off, cfg.offsets)
    d2 = ((centers_v[:, None, :] - centers_u[None, :, :]) ** 2).sum(axis=2)
    ok &= d2 < cfg.radius ** 2
    vi, ui = np.nonzero(ok)
    return vi.astype(np.int64), ui.astype(np.int64)


def _pair_posenc(tables, centers_v, t_v, centers_u, t_u, rot_delta, vi, ui, cfg):
    """Positional vectors for each masked pair: sum of four binned tables."""
    dx = centers_u[ui, 0] - centers_v[vi, 0]
    dy = centers_u[ui, 1] - centers_v[vi, 1]
    dz = centers_u[ui, 2] - centers_v[vi, 2]
    bx = spatial_bin(dx, cfg.rho_x, cfg.alpha, cfg.beta, cfg.gamma) + cfg.beta
    by = spatial_bin(dy, cfg.rho_y, cfg.alpha, cfg.beta, cfg.gamma) + cfg.beta
    bz = spatial_bin(dz, cfg.rho_z, cfg.alpha, cfg.beta, cfg.gamma) + cfg.beta
    bt = temporal_bin(rot_delta, cfg.offsets)
    out = add(add(gather_rows(tables["X"], bx), gather_rows(tables["Y"], by)),
              add(gather_rows(tables["Z"], bz), gather_rows(tables["T"], bt)))
    return out


# ---------------------------------------------------------------------------
# blocks
# ---------------------------------------------------------------------------


def _project_kv(features, params: BlockParams, cfg: AttnConfig):
    """Per-head keys and values from the joint linear layer."""
    keys, values = [], []
    for h in range(cfg.heads):
        kv = params.kv[h](features)
        keys.append(slice_cols(kv, 0, cfg.key_dim))
        values.append(slice_cols(kv, cfg.key_dim, cfg.key_dim + cfg.head_dim))
    return keys, values


def block_forward(tokens: VoxelTokens, past: BufferEntry | list | None,
                  block_index: int, params: BlockParams, cfg: AttnConfig,
                  pairs=None):
    """One attention block over a slice's tokens against past plus current.

    Returns the output tokens and this slice's (keys, values) for the buffer.
    An empty mask degenerates to a pure residual pass-through.
    """
    n = len(tokens)
    cur_keys, cur_values = _project_kv(tokens.features, params, cfg)
    queries = ([params.query[h](tokens.features) for h in range(cfg.heads)]
               if cfg.with_queries else cur_keys)

    past_entries = [] if past is None else (past if isinstance(past, list) else [past])
    if cfg.slice_by_slice:
        past_entries = []

    cand_centers = np.concatenate([e.centers for e in past_entries] + [tokens.centers])
    cand_t = np.concatenate([e.t for e in past_entries] + [tokens.t])
    cand_rot = np.concatenate([e.rotation for e in past_entries] + [tokens.rotation])

    if pairs is None:
        pairs = mask_pairs(tokens.centers, tokens.rotation, cand_centers, cand_rot, cfg)
    vi, ui = pairs

    head_outputs = []
    for h in range(cfg.heads):
        cand_keys = concat([e.keys[block_index][h] for e in past_entries] + [cur_keys[h]],
                           axis=0)
        cand_values = concat([e.values[block_index][h] for e in past_entries]
                             + [cur_values[h]], axis=0)
        if vi.size == 0:
            head_outputs.append(Tensor(np.zeros((n, cfg.head_dim),
                                                dtype=tokens.features.dtype)))
            continue
        k_u = gather_rows(cand_keys, ui)
        if not cfg.without_posenc:
            k_u = add(k_u, _pair_posenc(params.pos[h], tokens.centers, tokens.t,
                                        cand_centers, cand_t,
                                        tokens.rotation[vi] - cand_rot[ui], vi, ui, cfg))
        q_v = gather_rows(queries[h], vi)
        scores = mul(tsum(mul(q_v, k_u), axis=1), 1.0 / np.sqrt(cfg.key_dim))
        attn = segment_softmax(scores, vi, n)
        weighted = mul(reshape(attn, (-1, 1)), gather_rows(cand_values, ui))
        head_outputs.append(scatter_add_rows(weighted, vi, n))

    out_features = add(tokens.features, concat(head_outputs, axis=1))
    out = VoxelTokens(out_features, tokens.centers, tokens.t, tokens.rotation,
                      tokens.slice_seq)
    return out, (cur_keys, cur_values)


def transformer_forward(grid3: SparseCylGrid, buffer: KVBuffer,
                        params: TransformerParams, cfg: AttnConfig) -> SparseCylGrid:
    """Apply all blocks to a slice's coarse map and update the causal buffer.

    The mask is geometric, so the pair set is computed once and shared by all
    blocks.  The buffer receives this slice's keys/values for every block and
    is then evicted by rotation age.
    """
    tokens = tokens_from_grid(grid3)
    if len(tokens) == 0:
        return grid3
    current_rotation = int(tokens.rotation.max())
    buffer.evict(current_rotation)
    past = list(buffer.entries)

    cand_centers = np.concatenate([e.centers for e in past] + [tokens.centers])
    cand_rot = np.concatenate([e.rotation for e in past] + [tokens.rotation])
    pairs = (mask_pairs(tokens.centers, tokens.rotation, tokens.centers, tokens.rotation,
                        cfg) if cfg.slice_by_slice else
             mask_pairs(tokens.centers, tokens.rotation, cand_centers, cand_rot, cfg))

    all_keys, all_values = [], []
    for w in range(cfg.blocks):
        tokens, (k, v) = block_forward(tokens, past, w, params.blocks[w], cfg, pairs=pairs)
        all_keys.append(k)
        all_values.append(v)

    if cfg.blocks > 0:
        buffer.append(BufferEntry(
            slice_seq=int(tokens.slice_seq[0]) if len(tokens) else grid3.slice_seq,
            rotation=tokens.rotation.copy(),
            centers=tokens.centers.copy(),
            t=tokens.t.copy(),
            keys=all_keys,
            values=all_values,
        ))
    return grid3.with_features(tokens.features)


# ---------------------------------------------------------------------------
# dense references (oracles for the sparse path)
# ---------------------------------------------------------------------------


def dense_block_reference(features, centers, t, rotation, slice_seq, block_index,
                          params: BlockParams, cfg: AttnConfig):
    """Dense attention with -inf masking over all tokens at once (numpy only).

    Tokens may span several slices; a token attends tokens of its own or
    earlier slices, under the metric/temporal mask.  Used as the independent
    oracle for the masked sparse implementation and its streaming variant.
    """
    n, D = features.shape
    K, Dh = cfg.key_dim, cfg.head_dim
    off = rotation[:, None] - rotation[None, :]
    d2 = ((centers[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    allowed = np.isin(off, cfg.offsets) & (d2 < cfg.radius ** 2)
    allowed &= slice_seq[None, :] <= slice_seq[:, None]
    if cfg.slice_by_slice:
        allowed &= slice_seq[None, :] == slice_seq[:, None]

    heads = []
    for h in range(cfg.heads):
        W = params.kv[h].weight.data
        b = params.kv[h].bias.data
        kv = features @ W + b
        k, v = kv[:, :K], kv[:, K:]
        q = (features @ params.query[h].weight.data + params.query[h].bias.data
             if cfg.with_queries else k)
        scores = q @ k.T
        if not cfg.without_posenc:
            dxyz = centers[None, :, :] - centers[:, None, :]
            bx = spatial_bin(dxyz[..., 0], cfg.rho_x, cfg.alpha, cfg.beta, cfg.gamma) + cfg.beta
            by = spatial_bin(dxyz[..., 1], cfg.rho_y, cfg.alpha, cfg.beta, cfg.gamma) + cfg.beta
            bz = spatial_bin(dxyz[..., 2], cfg.rho_z, cfg.alpha, cfg.beta, cfg.gamma) + cfg.beta
            bt = np.zeros_like(off)
            bt[allowed] = temporal_bin(off[allowed], cfg.offsets)
            pos = (params.pos[h]["X"].data[bx] + params.pos[h]["Y"].data[by]
                   + params.pos[h]["Z"].data[bz] + params.pos[h]["T"].data[bt])
            scores = scores + np.einsum("vk,vuk->vu", q, pos)
        scores = scores / np.sqrt(K)
        scores = np.where(allowed, scores, -np.inf)
        with np.errstate(invalid="ignore"):
            m = np.max(scores, axis=1, keepdims=True)
            m = np.where(np.isfinite(m), m, 0.0)
            e = np.exp(scores - m)
            e = np.where(allowed, e, 0.0)
            denom = e.sum(axis=1, keepdims=True)
            attn = np.divide(e, denom, out=np.zeros_like(e), where=denom > 0)
        heads.append(attn @ v)
    return features + np.concatenate(heads, axis=1)


def dense_transformer_reference(features, centers, t, rotation, slice_seq,
                                params: TransformerParams, cfg: AttnConfig):
    """All blocks of the batch-mode reference."""
    out = features
    for w in range(cfg.blocks):
        out = dense_block_reference(out, centers, t, rotation, slice_seq, w,
                                    params.blocks[w], cfg)
    return out


# ---------------------------------------------------------------------------
# head/bin compatibility statistics
# ---------------------------------------------------------------------------


def head_compat_stats(token_sets, params: TransformerParams, cfg: AttnConfig):
    """Mean key/positional compatibility per (block, head, dimension, bin).

    ``token_sets`` is a chronological list of VoxelTokens (e.g. a few
    rotations of slices).  Pairs are the attention mask pairs in batch mode;
    keys for block ``w`` come from that block's input, i.e. the output of
    block ``w - 1``.  Empty bins are absent from the result, not zero.
    """
    features = np.concatenate([ts.features.data for ts in token_sets])
    centers = np.concatenate([ts.centers for ts in token_sets])
    t = np.concatenate([ts.t for ts in token_sets])
    rotation = np.concatenate([ts.rotation for ts in token_sets])
    slice_seq = np.concatenate([ts.slice_seq for ts in token_sets])

    vi, ui = mask_pairs(centers, rotation, centers, rotation, cfg)
    keep = slice_seq[ui] <= slice_seq[vi]
    vi, ui = vi[keep], ui[keep]

    out = {}
    if vi.size == 0:
        return out
    bins = {
        "X": spatial_bin(centers[ui, 0] - centers[vi, 0], cfg.rho_x, cfg.alpha,
                         cfg.beta, cfg.gamma),
        "Y": spatial_bin(centers[ui, 1] - centers[vi, 1], cfg.rho_y, cfg.alpha,
                         cfg.beta, cfg.gamma),
        "Z": spatial_bin(centers[ui, 2] - centers[vi, 2], cfg.rho_z, cfg.alpha,
                         cfg.beta, cfg.gamma),
        "T": temporal_bin(rotation[vi] - rotation[ui], cfg.offsets),
    }
    block_input = features
    for w, block in enumerate(params.blocks):
        for h in range(cfg.heads):
            W = block.kv[h].weight.data
            b = block.kv[h].bias.data
            keys = (block_input @ W + b)[:, :cfg.key_dim]
            pos = (block.pos[h]["X"].data[bins["X"] + cfg.beta]
                   + block.pos[h]["Y"].data[bins["Y"] + cfg.beta]
                   + block.pos[h]["Z"].data[bins["Z"] + cfg.beta]
                   + block.pos[h]["T"].data[bins["T"]])
            compat = np.einsum("ek,ek->e", keys[vi], pos)
            for d in ("X", "Y", "Z", "T"):
                for bin_value in np.unique(bins[d]):
                    sel = bins[d] == bin_value
                    out[(w, h, d, int(bin_value))] = float(compat[sel].mean())
        block_input = dense_block_reference(block_input, centers, t, rotation,
                                            slice_seq, w, block, cfg)
    return out
