"""Microbatch formulation over a prefill backlog.

Two formulators share one input shape: an ordered list of prefill chunks
(one per request, token_count = tokens still to prefill, prefix_len =
tokens already cached).  token_count_chunking packs a fixed token budget
per microbatch in arrival order.  lookahead_formulation starts from one
batch holding everything and recursively splits it at the cost-balance
point, so microbatch execution times come out even and the pipeline
stays fed.

Chunks of the same request always land in scheduling order, and a split
boundary cuts through at most one request.
"""

from __future__ import annotations

import numpy as np

from .core import Chunk, Microbatch
from .costmodel import CostCoefficients


def token_count_chunking(items: list[Chunk], token_budget: int) -> list[Microbatch]:
    """Greedy arrival-order packing; an overflowing request is chunked."""
    if token_budget < 1:
        raise ValueError("token_budget must be >= 1")
    batches: list[list[Chunk]] = []
    cur: list[Chunk] = []
    cur_tokens = 0
    for item in items:
        left = item.token_count
        prefix = item.prefix_len
        while left > 0:
            room = token_budget - cur_tokens
            if room == 0:
                batches.append(cur)
                cur, cur_tokens = [], 0
                room = token_budget
            take = min(left, room)
            cur.append(Chunk(item.rid, take, prefix))
            prefix += take
            left -= take
            cur_tokens += take
    if cur:
        batches.append(cur)
    return [Microbatch(i, b) for i, b in enumerate(batches)]


def _token_marginals(chunks: list[Chunk], coeffs: CostCoefficients) -> np.ndarray:
    """Per-token cost increments in scheduling order.

    Token s (1-based) of a chunk with prefix p adds alpha*(p+s) + beta,
    which telescopes back to the chunk cost formula.
    """
    parts = []
    for ch in chunks:
        s = np.arange(1, ch.token_count + 1, dtype=float)
        parts.append(coeffs.alpha * (ch.prefix_len + s) + coeffs.beta)
    return np.concatenate(parts) if parts else np.zeros(0)


def split(chunks: list[Chunk],
          coeffs: CostCoefficients) -> tuple[list[Chunk], list[Chunk]]:
    """Cut a batch into two at the token boundary balancing batch cost.

    Scans every interior token boundary; attention work is conserved
    across the cut (the prefix of a trailing part grows by exactly the
    tokens moved left), so with the one-gamma batch model the balance
    point is where cumulative marginal cost crosses half the total.
    With a separate batch discount the chunk-count term shifts the
    balance and is accounted explicitly.  First minimum wins ties.
    """
    total_tokens = sum(c.token_count for c in chunks)
    if total_tokens < 2:
        raise ValueError("cannot split a batch of fewer than 2 tokens")
    w = np.cumsum(_token_marginals(chunks, coeffs))
    bounds = np.arange(1, total_tokens)
    balance = 2.0 * w[:-1] - w[-1]
    if coeffs.batch_discount is not None:
        sizes = np.array([c.token_count for c in chunks])
        ends = np.cumsum(sizes)
        starts = ends - sizes
        k_left = np.searchsorted(starts, bounds, side="left")
        k_right = len(chunks) - np.searchsorted(ends, bounds, side="right")
        balance = balance + (k_left - k_right) * (coeffs.gamma - coeffs.discount)
    cut = int(np.argmin(np.abs(balance))) + 1

    left: list[Chunk] = []
    right: list[Chunk] = []
    seen = 0
    for ch in chunks:
        if seen + ch.token_count <= cut:
            left.append(ch)
        elif seen >= cut:
            right.append(ch)
        else:
            head = cut - seen
            left.append(Chunk(ch.rid, head, ch.prefix_len))
            right.append(Chunk(ch.rid, ch.token_count - head,
                               ch.prefix_len + head))
        seen += ch.token_count
    return left, right


def lookahead_formulation(items: list[Chunk], coeffs: CostCoefficients,
                          min_batch_tokens: int = 256,
                          max_depth: int = 32) -> list[Microbatch]:
    """Recursive cost-balanced splitting of the whole backlog.

    A batch keeps splitting while it holds at least min_batch_tokens, so
    the leaves land just under the threshold with near-equal costs.
    Depth is bounded, giving O(log total_tokens) levels.
    """
    if min_batch_tokens < 1:
        raise ValueError("min_batch_tokens must be >= 1")
    if not items:
        return []
    leaves: list[list[Chunk]] = []

    def rec(chunks: list[Chunk], depth: int) -> None:
        tokens = sum(c.token_count for c in chunks)
        if tokens < 2 or tokens < min_batch_tokens or depth >= max_depth:
            leaves.append(chunks)
            return
        left, right = split(chunks, coeffs)
        rec(left, depth + 1)
        rec(right, depth + 1)

    rec(list(items), 0)
    return [Microbatch(i, leaf) for i, leaf in enumerate(leaves)]


def attach_decode(microbatches: list[Microbatch],
                  decode_chunks: list[Chunk]) -> list[Microbatch]:
    """Piggyback decode chunks round-robin across formed microbatches.

    Each decoding request advances one token per round, so it rides
    exactly one microbatch.  With no prefill work the decode chunks form
    a single microbatch of their own.
    """
    if not decode_chunks:
        return microbatches
    if not microbatches:
        return [Microbatch(0, list(decode_chunks))]
    for i, ch in enumerate(decode_chunks):
        microbatches[i % len(microbatches)].chunks.append(ch)
    return microbatches
