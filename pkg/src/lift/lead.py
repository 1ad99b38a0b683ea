"""Lead estimation: which channels lead each target, by how many steps, and how strongly.

For every target channel ``j`` and candidate ``i`` the all-lags circular
cross-correlation of their normalized lookback windows is computed through the
FFT. The leading step is the strongest interior *peak* of ``|R|`` (lags whose
magnitude exceeds both neighbours), which keeps a lag longer than the window
from masquerading as the last admissible lag. The ``K`` strongest candidates
become the target's leading indicators.
"""

from __future__ import annotations

import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import container
from .errors import InvalidInputError, PreconditionError, StaleCacheError
from .spectral import _xcorr_unchecked

CACHE_MAGIC = b"LIFTLEAD"
CACHE_FORMAT_VERSION = 1
TIE_TOL = 1e-12


class DegenerateChannelWarning(UserWarning):
    """A channel is constant over a lookback window and cannot lead or be led."""


@dataclass(frozen=True)
class LeadEntry:
    indicator: int
    step: int
    raw_abs_corr: float
    sign: int
    valid: bool
    norm_coeff: float


@dataclass(frozen=True)
class LeadSet:
    """The ``K`` leading indicators of one target channel, strongest first."""

    target: int
    indicators: np.ndarray
    steps: np.ndarray
    signs: np.ndarray
    raw_abs_corr: np.ndarray
    valid: np.ndarray
    norm_coeffs: np.ndarray

    @property
    def entries(self) -> list[LeadEntry]:
        return [
            LeadEntry(int(i), int(s), float(a), int(g), bool(v), float(c))
            for i, s, a, g, v, c in zip(
                self.indicators, self.steps, self.raw_abs_corr, self.signs, self.valid, self.norm_coeffs
            )
        ]

    def __len__(self) -> int:
        return len(self.indicators)


@dataclass(frozen=True)
class LeadTable:
    """Array form of lead sets with shape ``(..., C, K)``; what the model consumes."""

    indicators: np.ndarray
    steps: np.ndarray
    signs: np.ndarray
    raw_abs_corr: np.ndarray
    valid: np.ndarray
    norm_coeffs: np.ndarray

    _fields = ("indicators", "steps", "signs", "raw_abs_corr", "valid", "norm_coeffs")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.indicators.shape

    @property
    def n_channels(self) -> int:
        return self.indicators.shape[-2]

    @property
    def k(self) -> int:
        return self.indicators.shape[-1]

    def __getitem__(self, idx) -> "LeadTable":
        return LeadTable(*(getattr(self, f)[idx] for f in self._fields))

    def arrays(self) -> dict[str, np.ndarray]:
        return {f: getattr(self, f) for f in self._fields}

    def sets(self) -> list[LeadSet]:
        if self.indicators.ndim != 2:
            raise InvalidInputError("sets() needs a single-window table of shape (C, K)")
        return [LeadSet(j, *(getattr(self, f)[j] for f in self._fields)) for j in range(self.n_channels)]

    @classmethod
    def from_sets(cls, sets: list[LeadSet]) -> "LeadTable":
        return cls(*(np.stack([getattr(s, f) for s in sets]) for f in cls._fields))

    @classmethod
    def stack(cls, tables: list["LeadTable"]) -> "LeadTable":
        return cls(*(np.stack([getattr(t, f) for t in tables]) for f in cls._fields))

    def equals(self, other: "LeadTable") -> bool:
        return all(np.array_equal(getattr(self, f), getattr(other, f)) for f in self._fields)


def as_table(leads) -> LeadTable:
    if isinstance(leads, LeadTable):
        return leads
    return LeadTable.from_sets(list(leads))


def peak_argmax(r):
    """Strongest interior local peak of ``|r|``.

    Returns ``(step, abs_corr, sign)`` for the lag in ``[1, L-2]`` with the
    largest ``|r|`` among lags strictly above both neighbours, or ``None``.
    Magnitudes within ``TIE_TOL`` of each other count as equal: such a pair of
    neighbours is a plateau, not a peak, and equal peaks resolve to the
    smallest lag.
    """
    r = np.asarray(r, dtype=np.float64)
    if r.ndim != 1 or r.shape[0] < 3:
        raise InvalidInputError("peak_argmax needs a 1-D array with at least 3 lags")
    a = np.abs(r)
    best = None
    for tau in range(1, len(r) - 1):
        if a[tau - 1] + TIE_TOL < a[tau] > a[tau + 1] + TIE_TOL and (best is None or a[tau] > a[best] + TIE_TOL):
            best = tau
    if best is None:
        return None
    return best, float(a[best]), 1 if r[best] >= 0 else -1


def _peaks(r: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    # vectorized peak_argmax over leading axes; returns (step, |R*|, found)
    a = np.abs(r)
    mid = a[..., 1:-1]
    is_peak = (a[..., :-2] + TIE_TOL < mid) & (mid > a[..., 2:] + TIE_TOL)
    masked = np.where(is_peak, mid, -1.0)
    top = masked.max(axis=-1, keepdims=True)
    # first lag within TIE_TOL of the maximum, so exact ties that rounding
    # split (e.g. R(tau) = R(L - tau) for self-correlation) go to the smaller lag
    step = np.argmax(is_peak & (masked >= top - TIE_TOL), axis=-1) + 1
    best = np.take_along_axis(a, step[..., None], axis=-1)[..., 0]
    return step, best, is_peak.any(axis=-1)


def normalized_coefficients(raw_abs_corr, valid) -> np.ndarray:
    """Softmax weights of the leads against a fixed self term ``exp(1)``.

    Magnitudes are clamped to ``[0, 1]`` first; invalid slots get 0 and do
    not enter the denominator.
    """
    a = np.clip(np.asarray(raw_abs_corr, dtype=np.float64), 0.0, 1.0)
    valid = np.asarray(valid, dtype=bool)
    num = np.where(valid, np.exp(a), 0.0)
    return num / (math.e + num.sum(axis=-1, keepdims=True))


def _degenerate_rows(window_norm: np.ndarray) -> np.ndarray:
    std = window_norm.std(axis=-1)
    bad = std < 0.5
    off = ~bad & ((np.abs(window_norm.mean(axis=-1)) > 1e-6) | (np.abs(std - 1.0) > 1e-3))
    if off.any():
        raise PreconditionError("estimate_leads expects z-scored rows (or constant rows from the eps floor)")
    return bad


def estimate_window(window_norm, k: int) -> LeadTable:
    """Leads of every channel in one normalized ``(C, L)`` window, as a table."""
    x = np.asarray(window_norm, dtype=np.float64)
    if x.ndim != 2:
        raise InvalidInputError("window_norm must have shape (C, L)")
    c, length = x.shape
    if c < 1 or k < 1:
        raise InvalidInputError("need C >= 1 and K >= 1")
    if length < 3:
        raise InvalidInputError("lead estimation needs L >= 3")
    bad = _degenerate_rows(x)
    if bad.any():
        warnings.warn(
            f"channels {np.flatnonzero(bad).tolist()} are constant in the window; excluded from lead estimation",
            DegenerateChannelWarning,
            stacklevel=2,
        )

    # corr[j, i, tau]: indicator i leading target j by tau steps
    corr = _xcorr_unchecked(x[:, None, :], x[None, :, :])
    step, best, found = _peaks(corr)
    signs = np.where(np.take_along_axis(corr, step[..., None], axis=-1)[..., 0] >= 0, 1, -1)
    found &= ~bad[:, None] & ~bad[None, :]

    key = np.where(found, -best, np.inf)
    order = np.argsort(key, axis=-1, kind="stable")
    if k > c:
        order = np.concatenate([order, np.repeat(order[:, :1], k - c, axis=1)], axis=1)
    order = order[:, :k]
    valid = np.take_along_axis(found, order, axis=-1)
    if k > c:
        valid[:, c:] = False

    indicators = np.where(valid, order, 0).astype(np.int64)
    steps = np.where(valid, np.take_along_axis(step, order, axis=-1), 1).astype(np.int64)
    raw = np.where(valid, np.take_along_axis(best, order, axis=-1), 0.0)
    sgn = np.where(valid, np.take_along_axis(signs, order, axis=-1), 1).astype(np.int8)
    return LeadTable(indicators, steps, sgn, raw, valid, normalized_coefficients(raw, valid))


def estimate_leads(window_norm, k: int) -> list[LeadSet]:
    """One :class:`LeadSet` per target channel of a normalized ``(C, L)`` window."""
    return estimate_window(window_norm, k).sets()


def lead_count_tables(table: LeadTable) -> tuple[np.ndarray, dict[tuple[int, int, int], int]]:
    """Occurrence counts of (target, indicator) pairs and of (target, indicator, step).

    ``table`` has shape ``(n, C, K)``; only valid slots are counted.
    """
    n, c, k = table.shape
    pair = np.zeros((c, c), dtype=np.int64)
    steps: dict[tuple[int, int, int], int] = {}
    w, j, r = np.nonzero(table.valid)
    ind = table.indicators[w, j, r]
    st = table.steps[w, j, r]
    np.add.at(pair, (j, ind), 1)
    for key in zip(j.tolist(), ind.tolist(), st.tolist()):
        steps[key] = steps.get(key, 0) + 1
    return pair, dict(sorted(steps.items()))


@dataclass(frozen=True)
class LeadCache:
    """Precomputed leads keyed by lookback window start index."""

    positions: np.ndarray
    table: LeadTable
    L: int
    K: int
    stride: int
    fingerprint: str
    start: int = 0

    @property
    def n_channels(self) -> int:
        return self.table.n_channels

    def __len__(self) -> int:
        return len(self.positions)

    def __contains__(self, t) -> bool:
        return self._index(t) is not None

    def _index(self, t):
        t = int(t)
        if t < self.start:
            return None
        i, rem = divmod(t - self.start, self.stride)
        if rem or i >= len(self.positions):
            return None
        return i

    def lookup(self, t) -> LeadTable:
        i = self._index(t)
        if i is None:
            raise KeyError(f"window start {t} is not cached")
        return self.table[i]

    def lookup_many(self, starts) -> LeadTable:
        idx = [self._index(t) for t in starts]
        if any(i is None for i in idx):
            missing = [int(t) for t, i in zip(starts, idx) if i is None][:5]
            raise KeyError(f"window starts not cached: {missing}")
        return self.table[np.asarray(idx, dtype=np.int64)]

    def leadsets(self, t) -> list[LeadSet]:
        return self.lookup(t).sets()


def precompute_leads(dataset, L: int, K: int, stride: int = 1, start: int = 0, stop: int | None = None,
                     threads: int = 1) -> LeadCache:
    """Estimate leads for every lookback window ``[s, s+L)`` inside ``[start, stop)``."""
    from .normalize import apply, fit

    values = dataset.values
    stop = values.shape[0] if stop is None else stop
    if stop - start < L:
        raise InvalidInputError(f"range of length {stop - start} is shorter than L = {L}")
    if stride < 1:
        raise InvalidInputError("stride must be >= 1")
    positions = np.arange(start, stop - L + 1, stride, dtype=np.int64)

    def one(s):
        window = values[s : s + L].T
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", DegenerateChannelWarning)
            return estimate_window(apply(window, fit(window)), K)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            tables = list(pool.map(one, positions))
    else:
        tables = [one(s) for s in positions]
    return LeadCache(positions, LeadTable.stack(tables), L, K, stride, dataset.fingerprint, start)


def _cache_header(cache: LeadCache) -> dict:
    return {
        "format_version": CACHE_FORMAT_VERSION,
        "L": cache.L,
        "K": cache.K,
        "stride": cache.stride,
        "start": cache.start,
        "dataset_fingerprint": cache.fingerprint,
        "C": cache.n_channels,
        "count": len(cache),
    }


def encode_cache(cache: LeadCache) -> bytes:
    arrays = {"positions": cache.positions.astype(np.int64)}
    arrays.update(cache.table.arrays())
    return container.encode(CACHE_MAGIC, _cache_header(cache), arrays)


def save_cache(cache: LeadCache, path) -> None:
    container.atomic_write_bytes(path, encode_cache(cache))


def load_cache(path, fingerprint: str | None = None) -> LeadCache:
    """Read a cache; if ``fingerprint`` is given it must match the cached dataset."""
    header, arrays = container.load(path, CACHE_MAGIC)
    if header.get("format_version") != CACHE_FORMAT_VERSION:
        raise StaleCacheError(f"unsupported cache format {header.get('format_version')}")
    if fingerprint is not None and header["dataset_fingerprint"] != fingerprint:
        raise StaleCacheError("lead cache was built from a different dataset")
    positions = arrays.pop("positions")
    table = LeadTable(*(arrays[f] for f in LeadTable._fields))
    return LeadCache(positions, table, header["L"], header["K"], header["stride"],
                     header["dataset_fingerprint"], header.get("start", 0))
