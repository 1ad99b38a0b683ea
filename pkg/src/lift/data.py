"""Dataset ingestion, chronological splits, windowing and a planted-lead generator."""

from __future__ import annotations

import csv
import hashlib
import io
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import ConfigError, InvalidInputError, ParseError

TIMESTAMP_COLUMNS = ("date", "timestamp")


@dataclass(frozen=True)
class Dataset:
    """A ``T x C`` panel of observations."""

    values: np.ndarray
    channel_names: tuple[str, ...]
    timestamps: tuple[str, ...] | None = None
    fingerprint: str = ""

    def __post_init__(self):
        values = np.ascontiguousarray(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise InvalidInputError("dataset values must be a T x C matrix")
        if values.shape[0] < 2:
            raise InvalidInputError("dataset needs at least two time steps")
        if not np.isfinite(values).all():
            raise InvalidInputError("dataset contains NaN or Inf")
        if len(self.channel_names) != values.shape[1]:
            raise InvalidInputError("one channel name per column is required")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "channel_names", tuple(self.channel_names))
        if not self.fingerprint:
            object.__setattr__(self, "fingerprint", fingerprint(values, self.channel_names))

    @property
    def T(self) -> int:
        return self.values.shape[0]

    @property
    def C(self) -> int:
        return self.values.shape[1]


def fingerprint(values: np.ndarray, names) -> str:
    h = hashlib.sha256()
    h.update(json.dumps(list(names)).encode("utf-8"))
    h.update(str(values.shape).encode("ascii"))
    h.update(np.ascontiguousarray(values, dtype="<f8").tobytes())
    return h.hexdigest()


def load_csv(path, delimiter: str = ",", nan_policy: str = "reject") -> Dataset:
    """Read a UTF-8 CSV with a header row.

    A first column named ``date`` or ``timestamp`` (any case) is kept as
    timestamps. ``nan_policy`` is ``"reject"`` (the default) or ``"ffill"``;
    empty cells and ``nan`` count as missing.
    """
    if nan_policy not in ("reject", "ffill"):
        raise ConfigError(f"unknown nan_policy {nan_policy!r}")
    text = Path(path).read_text(encoding="utf-8")
    reader = csv.reader(io.StringIO(text), delimiter=delimiter)
    try:
        header = next(reader)
    except StopIteration:
        raise ParseError("empty file", row=1) from None
    header = [h.strip() for h in header]
    has_ts = bool(header) and header[0].lower() in TIMESTAMP_COLUMNS
    names = header[1:] if has_ts else header
    if not names:
        raise ParseError("no data columns in header", row=1)

    rows: list[list[float]] = []
    stamps: list[str] = []
    width = len(header)
    for rownum, rec in enumerate(reader, start=2):
        if not rec or all(not cell.strip() for cell in rec):
            continue
        if len(rec) != width:
            raise ParseError(f"expected {width} fields, found {len(rec)}", row=rownum)
        cells = rec[1:] if has_ts else rec
        if has_ts:
            stamps.append(rec[0].strip())
        parsed = []
        for colnum, cell in enumerate(cells, start=2 if has_ts else 1):
            cell = cell.strip()
            if cell == "" or cell.lower() == "nan":
                value = np.nan
            else:
                try:
                    value = float(cell)
                except ValueError:
                    raise ParseError(f"non-numeric value {cell!r}", row=rownum, column=colnum) from None
                if not np.isfinite(value):
                    raise ParseError(f"non-finite value {cell!r}", row=rownum, column=colnum)
            if np.isnan(value) and nan_policy == "reject":
                raise ParseError("missing value", row=rownum, column=colnum)
            parsed.append(value)
        rows.append(parsed)

    if len(rows) < 2:
        raise ParseError("need at least two data rows")
    values = np.array(rows, dtype=np.float64)
    if nan_policy == "ffill":
        values = _forward_fill(values)
    return Dataset(values, tuple(names), tuple(stamps) if has_ts else None)


def _forward_fill(values: np.ndarray) -> np.ndarray:
    out = values.copy()
    for c in range(out.shape[1]):
        col = out[:, c]
        missing = np.isnan(col)
        if missing[0]:
            raise ParseError("cannot forward-fill a missing first value", row=2, column=c + 1)
        idx = np.where(~missing, np.arange(len(col)), 0)
        np.maximum.accumulate(idx, out=idx)
        out[:, c] = col[idx]
    return out


def save_csv(dataset: Dataset, path) -> None:
    from .container import atomic_write_text

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    if dataset.timestamps is not None:
        w.writerow(["date", *dataset.channel_names])
        for ts, row in zip(dataset.timestamps, dataset.values):
            w.writerow([ts, *(repr(float(v)) for v in row)])
    else:
        w.writerow(dataset.channel_names)
        for row in dataset.values:
            w.writerow([repr(float(v)) for v in row])
    atomic_write_text(path, buf.getvalue())


def split(dataset_or_length) -> tuple[range, range, range]:
    """Chronological 7:1:2 train/validation/test index ranges."""
    t = dataset_or_length if isinstance(dataset_or_length, int) else dataset_or_length.T
    if t < 10:
        raise InvalidInputError("need T >= 10 to split")
    n_train = int(0.7 * t)
    n_val = int(0.1 * t)
    # guard against 0.7 * t landing just below an integer in floating point
    if (n_train + 1) * 10 <= 7 * t:
        n_train += 1
    if (n_val + 1) * 10 <= t:
        n_val += 1
    return range(0, n_train), range(n_train, n_train + n_val), range(n_train + n_val, t)


def window_starts(span: range, L: int, H: int, stride: int = 1, strict_boundaries: bool = False) -> np.ndarray:
    """Lookback start indices of the windows belonging to ``span``.

    A window belongs to ``span`` when its horizon lies inside it. Unless
    ``strict_boundaries`` is set the lookback may reach back before the span
    (never before index 0).
    """
    if stride < 1:
        raise InvalidInputError("stride must be >= 1")
    first = span.start if strict_boundaries else max(0, span.start - L)
    last = span.stop - L - H
    if last < first:
        return np.zeros(0, dtype=np.int64)
    return np.arange(first, last + 1, stride, dtype=np.int64)


def windows(values, span: range, L: int, H: int, stride: int = 1,
            strict_boundaries: bool = False) -> Iterator[tuple[np.ndarray, np.ndarray, int]]:
    """Yield ``(lookback C x L, horizon C x H, start)`` in chronological order."""
    values = values.values if isinstance(values, Dataset) else np.asarray(values)
    for s in window_starts(span, L, H, stride, strict_boundaries):
        s = int(s)
        yield values[s : s + L].T, values[s + L : s + L + H].T, s


def gather_windows(values: np.ndarray, starts, L: int, H: int) -> tuple[np.ndarray, np.ndarray]:
    """Batched lookbacks ``(B, C, L)`` and horizons ``(B, C, H)``."""
    starts = np.asarray(starts, dtype=np.int64)
    idx = starts[:, None] + np.arange(L + H)[None, :]
    block = values[idx].transpose(0, 2, 1)
    return block[:, :, :L], block[:, :, L:]


@dataclass(frozen=True)
class LeadPair:
    lagged: int
    leader: int
    lag: int
    sign: int = 1
    weight: float = 1.0


@dataclass(frozen=True)
class SyntheticSpec:
    """Planted lead-lag panel.

    Channels that are not ``lagged`` in any pair are base signals: a few
    sinusoids with random periods and phases plus AR(1) noise. Each lagged
    channel is the weighted, signed sum of its delayed leaders plus white
    noise whose std is ``noise`` times the std of the clean lagged signal.
    """

    C: int
    T: int
    pairs: tuple[LeadPair, ...]
    noise: float = 0.0
    seed: int = 0
    n_sinusoids: int = 2
    sinusoid_amplitude: float = 0.5
    period_range: tuple[float, float] = (8.0, 48.0)
    ar_coef: float = 0.5
    ar_scale: float = 1.0

    def to_json(self) -> str:
        d = asdict(self)
        return json.dumps(d, indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        d = dict(d)
        d["pairs"] = tuple(LeadPair(**p) for p in d.get("pairs", ()))
        if "period_range" in d:
            d["period_range"] = tuple(d["period_range"])
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown synthetic spec keys: {sorted(unknown)}")
        return cls(**d)


def random_pairs(C: int, n_pairs: int, lag_range: tuple[int, int], rng: np.random.Generator,
                 allow_negative: bool = True) -> tuple[LeadPair, ...]:
    """Disjoint leader/lagged pairs drawn without replacement from ``C`` channels."""
    if 2 * n_pairs > C:
        raise ConfigError("need at least two channels per planted pair")
    perm = rng.permutation(C)
    pairs = []
    for p in range(n_pairs):
        lag = int(rng.integers(lag_range[0], lag_range[1] + 1))
        sign = int(rng.choice([-1, 1])) if allow_negative else 1
        pairs.append(LeadPair(int(perm[2 * p + 1]), int(perm[2 * p]), lag, sign, 1.0))
    return tuple(sorted(pairs, key=lambda q: q.lagged))


def gen_synthetic(spec: SyntheticSpec) -> tuple[Dataset, tuple[LeadPair, ...]]:
    """Generate the panel and return it with the exact planted lead map."""
    lagged = {p.lagged for p in spec.pairs}
    for p in spec.pairs:
        if p.lag < 1:
            raise ConfigError("planted lags must be >= 1")
        if p.lag >= spec.T / 4:
            raise ConfigError(f"lag {p.lag} must be below T/4 = {spec.T / 4}")
        if p.leader == p.lagged:
            raise ConfigError("a channel cannot lead itself")
        if p.leader in lagged:
            raise ConfigError(f"leader {p.leader} is itself a lagged channel")
        if not (0 <= p.leader < spec.C and 0 <= p.lagged < spec.C):
            raise ConfigError("pair channel index out of range")
        if p.sign not in (-1, 1):
            raise ConfigError("sign must be +1 or -1")

    rng = np.random.default_rng(spec.seed)
    pad = max((p.lag for p in spec.pairs), default=0)
    n = spec.T + pad
    t = np.arange(n, dtype=np.float64)
    base = np.zeros((n, spec.C))
    for c in range(spec.C):
        if c in lagged:
            continue
        sig = np.zeros(n)
        for _ in range(spec.n_sinusoids):
            period = rng.uniform(*spec.period_range)
            phase = rng.uniform(0.0, 2 * np.pi)
            sig += spec.sinusoid_amplitude * np.sin(2 * np.pi * t / period + phase)
        innov = rng.normal(scale=spec.ar_scale, size=n)
        ar = np.empty(n)
        ar[0] = innov[0] / np.sqrt(max(1e-12, 1 - spec.ar_coef ** 2))
        for i in range(1, n):
            ar[i] = spec.ar_coef * ar[i - 1] + innov[i]
        base[:, c] = sig + ar

    values = base[pad:].copy()
    for j in sorted(lagged):
        clean = np.zeros(spec.T)
        for p in spec.pairs:
            if p.lagged == j:
                clean += p.weight * p.sign * base[pad - p.lag : pad - p.lag + spec.T, p.leader]
        if spec.noise > 0:
            clean = clean + rng.normal(scale=spec.noise * clean.std(), size=spec.T)
        values[:, j] = clean
    names = tuple(f"ch{c}" for c in range(spec.C))
    return Dataset(values, names), tuple(spec.pairs)
