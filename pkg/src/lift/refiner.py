"""Lead-aware refinement of preliminary forecasts in the frequency domain.

Per target channel the refiner

1. shifts each leading indicator by its leading step so it lines up with the
   target's horizon (observed history first, the backbone's forecast of the
   indicator for the remainder) and flips negatively correlated ones;
2. estimates a soft latent state from the target's lookback;
3. turns the normalized lead coefficients into ``2K+1`` real per-frequency
   filters through a state-weighted mixture of linear heads;
4. filters the spectra of the forecast, the indicators and their differences
   to the forecast, and mixes them with a dense complex linear map.

All batched functions work on arrays shaped ``(B, C, ...)`` and accept either
numpy arrays or tape tensors for anything trainable.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, ShapeError
from .lead import LeadSet, LeadTable

PARAM_NAMES = ("p0", "state_w", "state_b", "factory_w", "factory_b",
               "mixer_re", "mixer_im", "mixer_bias_re", "mixer_bias_im")


def n_bins(h: int) -> int:
    return h // 2 + 1


@dataclass(frozen=True)
class RefinerParams:
    """Trainable refiner tensors.

    ``factory_w`` is ``(N, (2K+1)F, K)`` and ``factory_b`` is ``(N, (2K+1)F)``;
    the output rows are ordered as K indicator filters, K difference filters,
    then the forecast filter. The complex mixer is stored as real and
    imaginary ``F x 3F`` parts.
    """

    p0: object
    state_w: object
    state_b: object
    factory_w: object
    factory_b: object
    mixer_re: object
    mixer_im: object
    mixer_bias_re: object
    mixer_bias_im: object

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "RefinerParams":
        return cls(**{name: d[name] for name in PARAM_NAMES})


def init_refiner(C: int, L: int, H: int, K: int, N: int, rng: np.random.Generator,
                 factory_std: float = 0.01) -> RefinerParams:
    """Parameters for which the refiner starts as the identity on the forecast.

    The forecast filter is exactly 1 and the mixer passes the filtered
    forecast straight through; the indicator and difference filters get small
    random weights so the mixer's other blocks receive gradient from step one.
    """
    F = n_bins(H)
    fw = rng.normal(scale=factory_std, size=(N, (2 * K + 1) * F, K))
    fw[:, 2 * K * F :, :] = 0.0
    fb = np.zeros((N, (2 * K + 1) * F))
    fb[:, 2 * K * F :] = 1.0
    mixer_re = np.zeros((F, 3 * F))
    mixer_re[:, :F] = np.eye(F)
    return RefinerParams(
        p0=np.zeros((C, N)),
        state_w=np.zeros((N, L)),
        state_b=np.zeros(N),
        factory_w=fw,
        factory_b=fb,
        mixer_re=mixer_re,
        mixer_im=np.zeros((F, 3 * F)),
        mixer_bias_re=np.zeros(F),
        mixer_bias_im=np.zeros(F),
    )


def pass_through_refiner(C: int, L: int, H: int, K: int, N: int) -> RefinerParams:
    """Exact identity configuration: forecast filter 1, every other weight 0."""
    p = init_refiner(C, L, H, K, N, np.random.default_rng(0))
    return replace(p, factory_w=np.zeros_like(p.factory_w))


def check_shapes(p: RefinerParams, C: int, L: int, H: int, K: int, N: int) -> None:
    F = n_bins(H)
    expected = {
        "p0": (C, N), "state_w": (N, L), "state_b": (N,),
        "factory_w": (N, (2 * K + 1) * F, K), "factory_b": (N, (2 * K + 1) * F),
        "mixer_re": (F, 3 * F), "mixer_im": (F, 3 * F),
        "mixer_bias_re": (F,), "mixer_bias_im": (F,),
    }
    for name, shape in expected.items():
        got = tuple(ad.value(getattr(p, name)).shape)
        if got != shape:
            raise ShapeError(f"refiner.{name} has shape {got}, expected {shape}")


# ---------------------------------------------------------------------------
# batched building blocks


def build_segments(lookback_norm, preds_norm, leads: LeadTable):
    """Target-oriented segments ``(B, C, K, H)``.

    Row ``k`` of target ``j`` is indicator ``i`` read ``step`` positions
    earlier: lookback values while they exist, the indicator's forecast after
    that. Invalid slots are zero rows; negative leads are negated.
    """
    x = ad.value(lookback_norm)
    B, C, L = x.shape
    H = ad.value(preds_norm).shape[-1]
    if H > L:
        raise ConfigError(f"horizon H = {H} longer than lookback L = {L} is not supported")
    ind, step = leads.indicators, leads.steps
    if ind.shape[:2] != (B, C):
        raise ShapeError(f"lead table {ind.shape} does not match batch {(B, C)}")
    h = np.arange(H)
    step4 = step[..., None]
    observed = h < step4
    b = np.arange(B)[:, None, None, None]
    i4 = ind[..., None]
    hist = x[b, i4, np.clip(L + h - step4, 0, L - 1)]
    pred = ad.index(preds_norm, (b, i4, np.clip(h - step4, 0, H - 1)))
    scale = (leads.signs.astype(np.float64) * leads.valid)[..., None]
    return ad.mul(ad.where(observed, hist, pred), scale)


def state_probs(state_input, p: RefinerParams):
    """Softmax over ``N`` states per channel from intrinsic logits plus a linear head."""
    logits = ad.add(ad.einsum("bcl,nl->bcn", state_input, p.state_w), p.state_b)
    return ad.softmax(ad.add(logits, p.p0), axis=-1)


def filter_bank(norm_coeffs, probs, p: RefinerParams, K: int, F: int):
    """State-weighted filter mixture split into ``(r_U, r_D, r_V)``.

    Shapes: ``(B, C, K, F)``, ``(B, C, K, F)`` and ``(B, C, F)``.
    """
    heads = ad.add(ad.einsum("bck,nok->bcno", norm_coeffs, p.factory_w), p.factory_b)
    mixed = ad.einsum("bcn,bcno->bco", probs, heads)
    B, C = ad.value(probs).shape[:2]
    bank = ad.reshape(mixed, (B, C, 2 * K + 1, F))
    return bank[:, :, :K, :], bank[:, :, K : 2 * K, :], bank[:, :, 2 * K, :]


def mix(preds_norm, segments, bank, p: RefinerParams):
    """Filter and mix spectra, returning refined normalized forecasts ``(B, C, H)``."""
    r_u, r_d, r_v = bank
    H = ad.value(preds_norm).shape[-1]
    v_re, v_im = ad.rfft(preds_norm)
    u_re, u_im = ad.rfft(segments)
    d_re = ad.sub(u_re, ad.reshape(v_re, ad.value(v_re).shape[:-1] + (1, -1)))
    d_im = ad.sub(u_im, ad.reshape(v_im, ad.value(v_im).shape[:-1] + (1, -1)))

    z_re = ad.concat([ad.mul(r_v, v_re),
                      ad.sum(ad.mul(r_u, u_re), axis=-2),
                      ad.sum(ad.mul(r_d, d_re), axis=-2)], axis=-1)
    z_im = ad.concat([ad.mul(r_v, v_im),
                      ad.sum(ad.mul(r_u, u_im), axis=-2),
                      ad.sum(ad.mul(r_d, d_im), axis=-2)], axis=-1)

    out_re = ad.add(ad.sub(ad.einsum("bcg,fg->bcf", z_re, p.mixer_re),
                           ad.einsum("bcg,fg->bcf", z_im, p.mixer_im)), p.mixer_bias_re)
    out_im = ad.add(ad.add(ad.einsum("bcg,fg->bcf", z_re, p.mixer_im),
                           ad.einsum("bcg,fg->bcf", z_im, p.mixer_re)), p.mixer_bias_im)
    return ad.irfft(out_re, out_im, H)


# ---------------------------------------------------------------------------
# single-channel views


@dataclass(frozen=True)
class TargetSegment:
    rows: np.ndarray


@dataclass(frozen=True)
class FilterBank:
    u_filters: np.ndarray
    d_filters: np.ndarray
    v_filter: np.ndarray


def build_segment(j: int, lookback_norm, preds_norm, leads: LeadSet) -> TargetSegment:
    x = np.asarray(lookback_norm, dtype=np.float64)
    xh = np.asarray(preds_norm, dtype=np.float64)
    if leads.target != j:
        raise ShapeError(f"lead set belongs to target {leads.target}, not {j}")
    C, L = x.shape
    H = xh.shape[-1]
    if H > L:
        raise ConfigError(f"horizon H = {H} longer than lookback L = {L} is not supported")
    h = np.arange(H)
    rows = np.zeros((len(leads), H))
    for k, e in enumerate(leads.entries):
        if not e.valid:
            continue
        src = np.where(h < e.step, x[e.indicator, np.clip(L + h - e.step, 0, L - 1)],
                       xh[e.indicator, np.clip(h - e.step, 0, H - 1)])
        rows[k] = e.sign * src
    return TargetSegment(rows)


def estimate_state(lookback_row, j: int, p: RefinerParams) -> np.ndarray:
    row = np.asarray(lookback_row, dtype=np.float64)
    logits = ad.value(p.p0)[j] + ad.value(p.state_w) @ row + ad.value(p.state_b)
    return ad.value(ad.softmax(logits))


def make_filters(norm_coeffs, state, j: int, p: RefinerParams) -> FilterBank:
    del j  # heads are shared across channels; the channel enters through its state
    r = np.asarray(norm_coeffs, dtype=np.float64)[None, None]
    probs = np.asarray(state, dtype=np.float64)[None, None]
    K = r.shape[-1]
    F = ad.value(p.factory_b).shape[-1] // (2 * K + 1)
    r_u, r_d, r_v = filter_bank(r, probs, p, K, F)
    return FilterBank(r_u[0, 0], r_d[0, 0], r_v[0, 0])


def refine(preds_norm_row, segment: TargetSegment, bank: FilterBank, p: RefinerParams) -> np.ndarray:
    preds = np.asarray(preds_norm_row, dtype=np.float64)[None, None]
    rows = np.asarray(segment.rows, dtype=np.float64)[None, None]
    b = (bank.u_filters[None, None], bank.d_filters[None, None], bank.v_filter[None, None])
    return mix(preds, rows, b, p)[0, 0]
