"""Analytic cost model for chunked execution.

A chunk of c new tokens attending over a p-token prefix costs

    alpha * (p*c + (c*c + c) / 2) + beta * c + gamma

seconds: the first term is attention work (prefix plus causal self part),
the linear term covers FFN-style per-token work, gamma is fixed per-launch
overhead.  Batching several chunks shares the fixed overhead, so exactly
one gamma survives per batch regardless of chunk count (an optional
separate batch discount can replace gamma for sensitivity runs).

Coefficients come from least squares over profiled batches; at desk scale
profiles are synthesized from a hidden ground-truth model of the same
family, which is what the validation tests fit against.
"""

from __future__ import annotations

import csv
import random
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from .core import Chunk

# One profile sample: the chunks that ran together and the measured wall
# time in seconds for the whole batch.
Sample = tuple[Sequence[Chunk], float]


@dataclass(frozen=True)
class CostCoefficients:
    alpha: float  # seconds per token-pair of attention work
    beta: float  # seconds per token of linear work
    gamma: float  # seconds of fixed per-launch overhead
    batch_discount: Optional[float] = None  # separate lambda, None -> gamma

    def __post_init__(self) -> None:
        if self.alpha < 0 or self.beta < 0 or self.gamma < 0:
            raise ValueError("cost coefficients must be >= 0")

    @property
    def discount(self) -> float:
        return self.gamma if self.batch_discount is None else self.batch_discount


def attention_units(c: int, p: int) -> float:
    """Token-pair count the alpha term multiplies."""
    return p * c + (c * c + c) / 2


def chunk_cost(chunk: Chunk, coeffs: CostCoefficients) -> float:
    c, p = chunk.token_count, chunk.prefix_len
    return coeffs.alpha * attention_units(c, p) + coeffs.beta * c + coeffs.gamma


def batch_cost(chunks: Sequence[Chunk], coeffs: CostCoefficients) -> float:
    """Cost of chunks executed as one batch.

    Sum of chunk costs minus (n-1) shared-overhead discounts; with the
    default single-gamma model exactly one gamma survives.
    """
    if not chunks:
        raise ValueError("batch_cost of an empty batch")
    total = sum(chunk_cost(ch, coeffs) for ch in chunks)
    return total - (len(chunks) - 1) * coeffs.discount


def _design_row(chunks: Sequence[Chunk]) -> tuple[float, float, float]:
    a = sum(attention_units(ch.token_count, ch.prefix_len) for ch in chunks)
    b = sum(ch.token_count for ch in chunks)
    return a, float(b), 1.0


def fit(samples: Sequence[Sample]) -> tuple[CostCoefficients, float]:
    """Least-squares fit of (alpha, beta, gamma) over profiled batches.

    Returns the coefficients and the RMS residual in seconds.  Profiles
    whose compositions cannot separate the three terms (rank < 3) raise
    "insufficient profile diversity".
    """
    if len(samples) < 3:
        raise ValueError("insufficient profile diversity: need >= 3 samples")
    m = np.array([_design_row(chunks) for chunks, _ in samples])
    y = np.array([measured for _, measured in samples])
    if np.linalg.matrix_rank(m) < 3:
        raise ValueError("insufficient profile diversity: rank-deficient profile")
    sol, _, _, _ = np.linalg.lstsq(m, y, rcond=None)
    sol = np.maximum(sol, 0.0)  # physical coefficients cannot be negative
    rms = float(np.sqrt(np.mean((m @ sol - y) ** 2)))
    return CostCoefficients(float(sol[0]), float(sol[1]), float(sol[2])), rms


def fit_token_baseline(samples: Sequence[Sample]) -> tuple[CostCoefficients, float]:
    """Token-count-only fit: alpha forced to zero.

    The baseline sees cost as linear in batch token count, which is what
    ignoring attention prefix length amounts to.
    """
    if len(samples) < 2:
        raise ValueError("insufficient profile diversity: need >= 2 samples")
    m = np.array([_design_row(chunks)[1:] for chunks, _ in samples])
    y = np.array([measured for _, measured in samples])
    if np.linalg.matrix_rank(m) < 2:
        raise ValueError("insufficient profile diversity: rank-deficient profile")
    sol, _, _, _ = np.linalg.lstsq(m, y, rcond=None)
    sol = np.maximum(sol, 0.0)
    rms = float(np.sqrt(np.mean((m @ sol - y) ** 2)))
    return CostCoefficients(0.0, float(sol[0]), float(sol[1])), rms


def synth_profile(compositions: Iterable[Sequence[Chunk]],
                  truth: CostCoefficients, noise_frac: float = 0.0,
                  seed: int = 0) -> list[Sample]:
    """Generate profile samples from a hidden ground-truth model.

    Multiplicative gaussian noise of the given fraction, seeded for
    reproducibility.
    """
    rng = random.Random(seed)
    out: list[Sample] = []
    for chunks in compositions:
        t = batch_cost(chunks, truth)
        if noise_frac > 0:
            t *= 1.0 + rng.gauss(0.0, noise_frac)
        out.append((tuple(chunks), t))
    return out


def write_profile(path: str, samples: Sequence[Sample]) -> None:
    """Profile CSV: one row per chunk, batches keyed by batch_id, the
    batch's measured time repeated on each of its rows."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["c", "p", "batch_id", "measured_us"])
        for bid, (chunks, measured) in enumerate(samples):
            for ch in chunks:
                w.writerow([ch.token_count, ch.prefix_len, bid,
                            int(round(measured * 1_000_000))])


def read_profile(path: str) -> list[Sample]:
    batches: dict[int, tuple[list[Chunk], int]] = {}
    order: list[int] = []
    with open(path, newline="") as fh:
        r = csv.DictReader(fh)
        if r.fieldnames != ["c", "p", "batch_id", "measured_us"]:
            raise ValueError(f"bad profile header: {r.fieldnames}")
        for i, row in enumerate(r, start=2):
            try:
                c = int(row["c"])
                p = int(row["p"])
                bid = int(row["batch_id"])
                us = int(row["measured_us"])
            except (TypeError, ValueError) as exc:
                raise ValueError(f"line {i}: {exc}") from exc
            if bid not in batches:
                batches[bid] = ([], us)
                order.append(bid)
            elif batches[bid][1] != us:
                raise ValueError(f"line {i}: batch {bid} measured_us mismatch")
            batches[bid][0].append(Chunk(rid=0, token_count=c, prefix_len=p))
    return [(tuple(batches[bid][0]), batches[bid][1] / 1_000_000)
            for bid in order]
