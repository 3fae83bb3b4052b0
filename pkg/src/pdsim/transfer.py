"""KVCache movement: a byte-exact pack/scatter codec and a link latency model.

The codec is real: a sender lays its per-layer key/value bytes out in one
contiguous buffer (so a whole transfer needs a single control exchange
instead of one per block), and the receiver scatters the arriving bytes back
into its fixed-size block table.  It is a plain library, independent of the
simulator, and is fuzzed as such.

The latency model contrasts the two transfer disciplines over the same link:

    block_fixed: n = ceil(size / block_size) messages
                 time = n * c + size / (bandwidth / concurrent) + penalty
    block_free:  one meta exchange
                 time = c + size / (bandwidth / concurrent) + penalty

where c is the per-message control overhead.  Concurrent transfers share
bandwidth fairly (bandwidth / concurrent).  Multi-hop conflicts are a
Bernoulli event per sub-transfer with a configurable penalty distribution;
with the same draw, block_fixed - block_free == (n - 1) * c exactly.

A request whose KVCache is sharded over several device pairs moves as
parallel sub-transfers; its effective handoff time is the maximum of them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .dists import CONSTANT_ZERO, Dist


class InsufficientBlocks(ValueError):
    """The receiver's block table cannot hold the arriving buffer."""


# ---------------------------------------------------------------------------
# contiguous sender-side layout
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ContiguousLayout:
    """Per-layer (offset, length) segments of one packed KVCache buffer.

    Segments are contiguous and non-overlapping with strictly increasing
    offsets, so either a single whole-buffer transfer or per-layer transfers
    can be cut out of the same buffer by offset and length.
    """

    offsets: tuple[int, ...]
    lengths: tuple[int, ...]

    def __post_init__(self):
        if len(self.offsets) != len(self.lengths) or not self.offsets:
            raise ValueError("layout needs matching, non-empty offsets and lengths")
        cursor = 0
        for off, length in zip(self.offsets, self.lengths):
            if off != cursor:
                raise ValueError("segments must be contiguous")
            if length < 1:
                raise ValueError("zero-length segments are not allowed")
            cursor = off + length

    @property
    def total(self) -> int:
        return self.offsets[-1] + self.lengths[-1]

    @property
    def num_layers(self) -> int:
        return len(self.offsets)

    def segment(self, layer: int) -> tuple[int, int]:
        return self.offsets[layer], self.lengths[layer]


def layout_buffer(prompt_len: int, hidden_size: int, num_layers: int,
                  bytes_per_elem: int) -> ContiguousLayout:
    """Contiguous buffer layout for one request's KVCache, one segment per layer.

    Per-layer length = bytes_per_elem * 2 (K and V) * hidden_size * prompt_len;
    derivable from the model geometry alone, so sender and receiver agree on
    offsets without exchanging a block map.
    """
    for name, v in (("prompt_len", prompt_len), ("hidden_size", hidden_size),
                    ("num_layers", num_layers), ("bytes_per_elem", bytes_per_elem)):
        if v < 1:
            raise ValueError(f"{name} must be >= 1")
    per_layer = bytes_per_elem * 2 * hidden_size * prompt_len
    offsets = tuple(i * per_layer for i in range(num_layers))
    lengths = (per_layer,) * num_layers
    return ContiguousLayout(offsets, lengths)


def pack(payload, layout: ContiguousLayout) -> bytes:
    """Assemble per-layer bytes into the contiguous send buffer, bit-exact.

    ``payload`` is either one bytes-like of exactly layout.total bytes, or a
    sequence of per-layer chunks whose lengths match the layout segments.
    """
    if isinstance(payload, (bytes, bytearray, memoryview, np.ndarray)):
        chunks = [payload]
    else:
        chunks = list(payload)
    total = sum(len(c) for c in chunks)
    if total != layout.total:
        raise ValueError(f"payload is {total} bytes, layout expects {layout.total}")
    if len(chunks) > 1:
        expected = list(layout.lengths)
        got = [len(c) for c in chunks]
        if got != expected:
            raise ValueError(f"per-layer chunk lengths {got} != layout {expected}")
    out = bytearray(layout.total)
    cursor = 0
    for chunk in chunks:
        out[cursor:cursor + len(chunk)] = bytes(chunk)
        cursor += len(chunk)
    return bytes(out)


# ---------------------------------------------------------------------------
# receiver-side discrete blocks
# ---------------------------------------------------------------------------

class BlockPool:
    """Fixed-size block storage standing in for paged receiver memory."""

    def __init__(self, num_blocks: int, block_size: int):
        if num_blocks < 1 or block_size < 1:
            raise ValueError("pool needs num_blocks >= 1 and block_size >= 1")
        self.block_size = block_size
        self.storage = np.zeros((num_blocks, block_size), dtype=np.uint8)
        self.free_blocks = list(range(num_blocks - 1, -1, -1))

    def allocate(self, count: int) -> list[int]:
        if count > len(self.free_blocks):
            raise InsufficientBlocks(
                f"need {count} blocks, {len(self.free_blocks)} free")
        return [self.free_blocks.pop() for _ in range(count)]

    def free(self, block_ids: list[int]) -> None:
        self.free_blocks.extend(reversed(block_ids))


@dataclass
class BlockTable:
    """Ordered block ids of one request's KVCache in a :class:`BlockPool`."""

    pool: BlockPool
    blocks: list[int]
    used_bytes: int = 0

    def __post_init__(self):
        if len(set(self.blocks)) != len(self.blocks):
            raise ValueError("block ids must be unique")

    @property
    def capacity(self) -> int:
        return len(self.blocks) * self.pool.block_size


def recv_scatter(buffer, table: BlockTable) -> int:
    """Scatter a received contiguous buffer into the table's blocks.

    The buffer is split into block_size chunks written to the blocks in table
    order; the final chunk may be partial.  Returns the number of blocks
    touched and records used_bytes on the table.
    """
    data = np.frombuffer(bytes(buffer), dtype=np.uint8)
    size = data.size
    if size > table.capacity:
        raise InsufficientBlocks(
            f"buffer of {size} bytes exceeds table capacity {table.capacity}")
    block_size = table.pool.block_size
    n_full, tail = divmod(size, block_size)
    storage = table.pool.storage
    for i in range(n_full):
        storage[table.blocks[i]] = data[i * block_size:(i + 1) * block_size]
    if tail:
        storage[table.blocks[n_full], :tail] = data[n_full * block_size:]
    table.used_bytes = size
    return n_full + (1 if tail else 0)


def gather(table: BlockTable) -> bytes:
    """Read used_bytes back out of the blocks in order (codec inverse, for checks)."""
    block_size = table.pool.block_size
    out = bytearray(table.used_bytes)
    cursor = 0
    for block_id in table.blocks:
        if cursor >= table.used_bytes:
            break
        take = min(block_size, table.used_bytes - cursor)
        out[cursor:cursor + take] = table.pool.storage[block_id, :take].tobytes()
        cursor += take
    return bytes(out)


# ---------------------------------------------------------------------------
# link latency model
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LinkModel:
    """Device-to-device link: bandwidth, per-message control cost c, conflicts."""

    bandwidth: float                       # bytes / second
    control_overhead: float = 0.0          # seconds per transfer message
    hop_conflict_prob: float = 0.0
    conflict_penalty: Dist = CONSTANT_ZERO  # seconds, drawn on a conflict

    def __post_init__(self):
        if self.bandwidth <= 0:
            raise ValueError("bandwidth must be > 0")
        if self.control_overhead < 0:
            raise ValueError("control_overhead must be >= 0")
        if not 0.0 <= self.hop_conflict_prob <= 1.0:
            raise ValueError("hop_conflict_prob must be in [0, 1]")


def conflict_penalty(link: LinkModel, rng: np.random.Generator | None) -> float:
    """One Bernoulli multi-hop conflict draw for one sub-transfer."""
    if rng is None or link.hop_conflict_prob == 0.0:
        return 0.0
    if rng.random() >= link.hop_conflict_prob:
        return 0.0
    return max(0.0, link.conflict_penalty.sample(rng))


def message_count(size: int, mode: str, block_size: int | None) -> int:
    if mode == "block_free":
        return 1
    if mode == "block_fixed":
        if not block_size or block_size < 1:
            raise ValueError("block_fixed mode needs a positive block_size")
        return math.ceil(size / block_size)
    raise ValueError(f"unknown transfer mode {mode!r}")


def transfer_time(size: int, mode: str, link: LinkModel, *,
                  block_size: int | None = None, concurrent: int = 1,
                  rng: np.random.Generator | None = None,
                  penalty: float | None = None) -> float:
    """Elapsed seconds for one sub-transfer of ``size`` bytes.

    ``concurrent`` is the number of transfers sharing the link, this one
    included.  Pass ``penalty`` to pin the conflict outcome (e.g. to compare
    both modes under identical conditions); otherwise it is drawn from the
    link's conflict distribution when ``rng`` is given.
    """
    if size <= 0:
        raise ValueError("size must be > 0")
    if concurrent < 1:
        raise ValueError("concurrent must be >= 1")
    n = message_count(size, mode, block_size)
    wire = size / (link.bandwidth / concurrent)
    if penalty is None:
        penalty = conflict_penalty(link, rng)
    return n * link.control_overhead + wire + penalty


def request_transfer_time(sub_sizes: list[int], mode: str, link: LinkModel, *,
                          block_size: int | None = None, concurrent: int = 1,
                          rng: np.random.Generator | None = None
                          ) -> tuple[float, list[float]]:
    """Per-request handoff time over parallel per-device-pair sub-transfers.

    Returns (effective time, per-sub-transfer times); the effective time is
    the maximum, since decode starts only once every shard has landed.
    """
    times = [transfer_time(s, mode, link, block_size=block_size,
                           concurrent=concurrent, rng=rng) for s in sub_sizes]
    return max(times), times


def utilization(size: int, elapsed: float, link: LinkModel) -> float:
    """Achieved fraction of wire bandwidth: (size / bandwidth) / elapsed, in [0, 1]."""
    if elapsed <= 0:
        raise ValueError("elapsed must be > 0")
    return min(1.0, max(0.0, (size / link.bandwidth) / elapsed))


def per_layer_completion(layout: ContiguousLayout, exec_time: float,
                         link: LinkModel, *, concurrent: int = 1,
                         rng: np.random.Generator | None = None) -> float:
    """Effective post-compute handoff time when layers ship as they finish.

    Layer i's segment becomes ready at exec_time * (i+1) / L (uniform
    layer-time assumption) and layers move one after another over the same
    device pair, each as its own block-free message.  Returns how long the
    transfer runs past the end of compute; 0 means fully overlapped except
    for the final layer's wire time.
    """
    share = link.bandwidth / concurrent
    layers = layout.num_layers
    done = 0.0
    for i in range(layers):
        ready = exec_time * (i + 1) / layers
        start = max(ready, done)
        done = start + link.control_overhead + layout.lengths[i] / share \
            + conflict_penalty(link, rng)
    return done - exec_time
