"""Reproducible simple random sampling plans over row indices.

A sampling plan is a collection of ``m_n`` sorted index sets of size
``k_n``, each drawn uniformly without replacement from ``{0, ..., N-1}``.
Subsamples are drawn with replacement at the plan level: two subsamples
may coincide.  Every subsample is driven by its own counter-derived
substream (SplitMix64 of ``master_seed XOR subsample_id`` seeding a
xoshiro256** generator), so a plan is a pure function of
``(n_total, k_n, m_n, master_seed)`` no matter how construction is
batched or parallelised.

Subset selection uses Floyd's algorithm: O(k_n) working memory and
exactly uniform over all C(N, k_n) subsets.  A numba-compiled kernel
produces bit-identical plans to the pure-Python reference and is used
whenever numba is importable.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

logger = logging.getLogger(__name__)

_U64 = 0xFFFFFFFFFFFFFFFF
_SM64_GAMMA = 0x9E3779B97F4A7C15
_SM64_MUL1 = 0xBF58476D1CE4E5B9
_SM64_MUL2 = 0x94D049BB133111EB


def splitmix64_next(state: int) -> tuple[int, int]:
    """Advance a SplitMix64 state; return ``(new_state, output)``."""
    state = (state + _SM64_GAMMA) & _U64
    z = state
    z = ((z ^ (z >> 30)) * _SM64_MUL1) & _U64
    z = ((z ^ (z >> 27)) * _SM64_MUL2) & _U64
    return state, z ^ (z >> 31)


def splitmix64_sequence(seed: int, count: int) -> list[int]:
    """First ``count`` SplitMix64 outputs for a given seed."""
    state = seed & _U64
    out = []
    for _ in range(count):
        state, value = splitmix64_next(state)
        out.append(value)
    return out


def substream_seed(master_seed: int, stream_id: int) -> int:
    """Seed for substream ``stream_id``: SplitMix64 of ``master ^ id``."""
    return splitmix64_next((master_seed ^ stream_id) & _U64)[1]


def _rotl(x: int, r: int) -> int:
    return ((x << r) | (x >> (64 - r))) & _U64


class Xoshiro256StarStar:
    """xoshiro256** generator, state seeded from SplitMix64 outputs."""

    __slots__ = ("_s0", "_s1", "_s2", "_s3")

    def __init__(self, seed: int):
        s = splitmix64_sequence(seed, 4)
        self._s0, self._s1, self._s2, self._s3 = s

    def next_u64(self) -> int:
        result = (_rotl((self._s1 * 5) & _U64, 7) * 9) & _U64
        t = (self._s1 << 17) & _U64
        self._s2 ^= self._s0
        self._s3 ^= self._s1
        self._s1 ^= self._s2
        self._s0 ^= self._s3
        self._s2 ^= t
        self._s3 = _rotl(self._s3, 45)
        return result

    def next_below(self, bound: int) -> int:
        """Exactly uniform integer in ``[0, bound)`` via rejection."""
        limit = ((1 << 64) // bound) * bound
        while True:
            r = self.next_u64()
            if r < limit:
                return r % bound


def draw_sorted_srs(n_total: int, k_n: int, stream_seed: int) -> np.ndarray:
    """Draw one sorted SRS-without-replacement index set.

    Uniform over all C(n_total, k_n) subsets, O(k_n) memory, using
    Floyd's subset-selection driven by a xoshiro256** substream.
    """
    if k_n < 1 or k_n > n_total:
        raise ValueError(f"k_n={k_n} must satisfy 1 <= k_n <= n_total={n_total}")
    rng = Xoshiro256StarStar(stream_seed)
    chosen: set[int] = set()
    for t in range(n_total - k_n, n_total):
        r = rng.next_below(t + 1)
        chosen.add(t if r in chosen else r)
    out = np.fromiter(chosen, dtype=np.int64, count=k_n)
    out.sort()
    return out


def _build_subsamples_python(n_total: int, k_n: int, m_n: int, master_seed: int) -> np.ndarray:
    out = np.empty((m_n, k_n), dtype=np.int64)
    for j in range(m_n):
        out[j] = draw_sorted_srs(n_total, k_n, substream_seed(master_seed, j))
    return out


# ---------------------------------------------------------------------------
# numba fast path: same algorithm, same streams, bit-identical output.
# Membership is an open-addressing hash table of capacity >= 2 k_n, so the
# O(k_n) memory bound is preserved.

try:
    from numba import njit as _njit

    @_njit(cache=True)
    def _build_subsamples_numba(n_total, k_n, m_n, master_seed):  # pragma: no cover
        out = np.empty((m_n, k_n), dtype=np.int64)
        cap = 1
        while cap < 2 * k_n:
            cap *= 2
        table = np.empty(cap, dtype=np.int64)
        mask_cap = np.uint64(cap - 1)
        gamma = np.uint64(0x9E3779B97F4A7C15)
        mul1 = np.uint64(0xBF58476D1CE4E5B9)
        mul2 = np.uint64(0x94D049BB133111EB)
        for j in range(m_n):
            # SplitMix64(master ^ j) gives the substream seed
            state = np.uint64(master_seed) ^ np.uint64(j)
            state = state + gamma
            z = state
            z = (z ^ (z >> np.uint64(30))) * mul1
            z = (z ^ (z >> np.uint64(27))) * mul2
            seed = z ^ (z >> np.uint64(31))
            # xoshiro256** state from four SplitMix64 outputs of the seed
            sm = seed
            s = np.empty(4, dtype=np.uint64)
            for i in range(4):
                sm = sm + gamma
                z = sm
                z = (z ^ (z >> np.uint64(30))) * mul1
                z = (z ^ (z >> np.uint64(27))) * mul2
                s[i] = z ^ (z >> np.uint64(31))
            s0, s1, s2, s3 = s[0], s[1], s[2], s[3]
            table[:] = -1
            count = 0
            for t in range(n_total - k_n, n_total):
                bound = np.uint64(t + 1)
                limit = ((np.uint64(0xFFFFFFFFFFFFFFFF) // bound)) * bound
                # limit = floor(2^64 / bound) * bound, adjusted below when
                # bound divides 2^64 exactly (then all draws are accepted)
                rem = np.uint64(0xFFFFFFFFFFFFFFFF) - limit + np.uint64(1)
                accept_all = rem >= bound
                while True:
                    result = np.uint64(9) * (
                        ((s1 * np.uint64(5)) << np.uint64(7))
                        | ((s1 * np.uint64(5)) >> np.uint64(57))
                    )
                    tt = s1 << np.uint64(17)
                    s2 ^= s0
                    s3 ^= s1
                    s1 ^= s2
                    s0 ^= s3
                    s2 ^= tt
                    s3 = (s3 << np.uint64(45)) | (s3 >> np.uint64(19))
                    if accept_all or result < limit:
                        break
                r = np.int64(result % bound)
                # hash-set membership with linear probing
                h = np.uint64(r) * gamma
                slot = np.int64((h >> np.uint64(32)) & mask_cap)
                found = False
                while table[slot] != -1:
                    if table[slot] == r:
                        found = True
                        break
                    slot = np.int64((np.uint64(slot) + np.uint64(1)) & mask_cap)
                value = np.int64(t) if found else r
                if found:
                    h = np.uint64(value) * gamma
                    slot = np.int64((h >> np.uint64(32)) & mask_cap)
                    while table[slot] != -1:
                        slot = np.int64((np.uint64(slot) + np.uint64(1)) & mask_cap)
                table[slot] = value
                out[j, count] = value
                count += 1
            out[j, :].sort()
        return out

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    _HAVE_NUMBA = False


@dataclass(frozen=True)
class HyperParams:
    """Subsample size, subsample count and the exponents that chose them."""

    k_n: int
    m_n: int
    alpha: float = 1.0
    delta_k: float = 0.0
    delta_m: float = 0.0
    algorithm: str = "alg1"
    clamped: bool = False

    def __post_init__(self):
        if self.k_n < 1:
            raise ValueError(f"k_n must be >= 1, got {self.k_n}")
        if self.m_n < 1:
            raise ValueError(f"m_n must be >= 1, got {self.m_n}")
        if self.alpha <= 0:
            raise ValueError(f"alpha must be > 0, got {self.alpha}")

    def validate(self, n_total: int) -> None:
        if self.k_n > n_total:
            raise ValueError(f"k_n={self.k_n} exceeds n_total={n_total}")


def select_hyperparams(
    n_total: int,
    algorithm: str = "alg1",
    alpha: float = 1.0,
    delta_k: float = 0.0,
    delta_m: float = 0.0,
    estimator_is_biased: bool = True,
    k_n: int | None = None,
    m_n: int | None = None,
) -> HyperParams:
    """Choose ``(k_n, m_n)`` by the exponent rules for either algorithm.

    For a biased estimator, ``alg1`` sets ``k_n = floor(N^(1/2+delta_k))``
    and ``alg2`` (bias-corrected subsample estimates) sets
    ``k_n = floor(N^(1/3+delta_k))``.  For an unbiased estimator the
    exponent rule is not required and ``k_n`` must be supplied.  Both
    algorithms set ``m_n = floor(alpha * N^(1+delta_m) / k_n)``.
    Explicit ``k_n``/``m_n`` always take precedence over the formulas.
    """
    if n_total < 2:
        raise ValueError(f"n_total must be >= 2, got {n_total}")
    if alpha <= 0:
        raise ValueError(f"alpha must be > 0, got {alpha}")
    if algorithm not in ("alg1", "alg2"):
        raise ValueError(f"algorithm must be 'alg1' or 'alg2', got {algorithm!r}")
    if delta_m < 0:
        raise ValueError(f"delta_m must be >= 0, got {delta_m}")

    if k_n is None:
        if not estimator_is_biased:
            raise ValueError(
                "k_n must be supplied explicitly when the estimator is unbiased"
            )
        if algorithm == "alg1":
            if not 0 < delta_k < 0.5:
                raise ValueError(f"alg1 requires 0 < delta_k < 1/2, got {delta_k}")
            k_n = math.floor(n_total ** (0.5 + delta_k))
        else:
            if not 0 < delta_k <= 1.0 / 6.0:
                raise ValueError(f"alg2 requires 0 < delta_k <= 1/6, got {delta_k}")
            k_n = math.floor(n_total ** (1.0 / 3.0 + delta_k))

    clamped = False
    if k_n > n_total:
        logger.warning("k_n=%d exceeds N=%d; clamping to N", k_n, n_total)
        k_n, clamped = n_total, True
    if k_n < 1:
        k_n, clamped = 1, True

    if m_n is None:
        m_n = math.floor(alpha * n_total ** (1.0 + delta_m) / k_n)
    if m_n < 1:
        raise ValueError(
            f"hyperparameter formulas give m_n={m_n}; increase alpha or delta_m"
        )
    return HyperParams(
        k_n=k_n,
        m_n=m_n,
        alpha=alpha,
        delta_k=delta_k,
        delta_m=delta_m,
        algorithm=algorithm,
        clamped=clamped,
    )


@dataclass(frozen=True)
class SamplingPlan:
    """``m_n`` sorted index sets plus the seeds that reproduce them."""

    n_total: int
    subsamples: np.ndarray  # (m_n, k_n) int64, each row strictly increasing
    master_seed: int
    stream_ids: np.ndarray  # (m_n,) int64

    @property
    def m_n(self) -> int:
        return self.subsamples.shape[0]

    @property
    def k_n(self) -> int:
        return self.subsamples.shape[1]

    def __len__(self) -> int:
        return self.m_n


def build_plan(
    n_total: int,
    hyper: HyperParams,
    master_seed: int = 0,
    use_fast: bool = True,
) -> SamplingPlan:
    """Draw the full plan; identical output for any batching or backend."""
    hyper.validate(n_total)
    k_n, m_n = hyper.k_n, hyper.m_n
    if use_fast and _HAVE_NUMBA:
        subsamples = _build_subsamples_numba(
            n_total, k_n, m_n, np.uint64(master_seed & _U64)
        )
    else:
        subsamples = _build_subsamples_python(n_total, k_n, m_n, master_seed & _U64)
    return SamplingPlan(
        n_total=n_total,
        subsamples=subsamples,
        master_seed=master_seed,
        stream_ids=np.arange(m_n, dtype=np.int64),
    )


def explicit_plan(n_total: int, subsamples) -> SamplingPlan:
    """Wrap a caller-supplied list of sorted index sets as a plan."""
    arr = np.asarray(subsamples, dtype=np.int64)
    if arr.ndim != 2:
        raise ValueError("subsamples must be a (m_n, k_n) array")
    if arr.min(initial=0) < 0 or (arr.size and arr.max() >= n_total):
        raise ValueError("subsample indices out of range")
    if np.any(np.diff(arr, axis=1) <= 0):
        raise ValueError("each subsample must be strictly increasing")
    return SamplingPlan(
        n_total=n_total,
        subsamples=arr,
        master_seed=-1,
        stream_ids=np.arange(arr.shape[0], dtype=np.int64),
    )
