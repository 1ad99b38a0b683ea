"""The full forecasting pipeline: normalize, backbone, lead-aware refinement, denormalize."""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace
from typing import Protocol

import numpy as np

from . import autodiff as ad
from . import container, normalize, refiner
from .errors import ConfigError, ShapeError
from .lead import as_table

CHECKPOINT_MAGIC = b"LIFTCKPT"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    C: int
    L: int
    H: int
    K: int = 8
    N: int = 4
    state_input: str = "normalized"
    grad_through_shift: bool = False
    per_channel_backbone: bool = False
    use_refiner: bool = True

    def __post_init__(self):
        if self.state_input not in ("normalized", "raw"):
            raise ConfigError(f"state_input must be 'normalized' or 'raw', got {self.state_input!r}")
        if min(self.C, self.L, self.H, self.K, self.N) < 1:
            raise ConfigError("C, L, H, K and N must all be positive")
        if self.L < 3:
            raise ConfigError("lookback must be at least 3 steps for lead estimation")
        if self.use_refiner and self.H < 2:
            raise ConfigError("the refiner's spectra need a horizon of at least 2 steps")
        if self.use_refiner and self.H > self.L:
            raise ConfigError(f"horizon H = {self.H} longer than lookback L = {self.L} is not supported")


class Backbone(Protocol):
    """A forecaster from normalized lookbacks ``(B, C, L)`` to normalized forecasts ``(B, C, H)``."""

    channel_independent: bool

    def init_params(self, rng: np.random.Generator) -> dict[str, np.ndarray]: ...

    def forecast(self, params: dict, lookback_norm): ...


@dataclass(frozen=True)
class LinearBackbone:
    """One linear map from lookback to horizon, shared by all channels unless ``per_channel``."""

    L: int
    H: int
    C: int = 1
    per_channel: bool = False
    channel_independent: bool = True

    def init_params(self, rng: np.random.Generator) -> dict[str, np.ndarray]:
        bound = 1.0 / np.sqrt(self.L)
        shape = (self.C, self.H, self.L) if self.per_channel else (self.H, self.L)
        return {
            "w": rng.uniform(-bound, bound, size=shape),
            "b": rng.uniform(-bound, bound, size=shape[:-1]),
        }

    def forecast(self, params: dict, lookback_norm):
        if self.per_channel:
            return ad.add(ad.einsum("bcl,chl->bch", lookback_norm, params["w"]), params["b"])
        return ad.add(ad.einsum("bcl,hl->bch", lookback_norm, params["w"]), params["b"])


def linear_forecast(lookback_norm, w, b) -> np.ndarray:
    """Apply ``w @ row + b`` to every row of a ``(C, L)`` window."""
    x = np.asarray(lookback_norm, dtype=np.float64)
    return x @ np.asarray(w).T + np.asarray(b)


@dataclass(frozen=True)
class LiftModel:
    """Backbone plus refiner with all trainable tensors in ``params``.

    Parameter names are ``backbone.<name>`` and ``refiner.<name>``.
    """

    config: ModelConfig
    params: dict
    backbone: LinearBackbone

    @classmethod
    def create(cls, config: ModelConfig, seed: int = 0) -> "LiftModel":
        rng = np.random.default_rng(seed)
        bb = LinearBackbone(config.L, config.H, config.C, config.per_channel_backbone)
        params = {f"backbone.{k}": v for k, v in bb.init_params(rng).items()}
        if config.use_refiner:
            rp = refiner.init_refiner(config.C, config.L, config.H, config.K, config.N, rng)
            params.update({f"refiner.{k}": v for k, v in rp.as_dict().items()})
        return cls(config, params, bb)

    def with_params(self, params: dict) -> "LiftModel":
        return replace(self, params=dict(params))

    def backbone_names(self) -> list[str]:
        return [k for k in self.params if k.startswith("backbone.")]

    def refiner_names(self) -> list[str]:
        return [k for k in self.params if k.startswith("refiner.")]

    def forward_parts(self, raw_lookback, leads=None, params=None, backbone_preds=None,
                      shift_preds=None, refine: bool = True) -> dict:
        """Run the pipeline and return intermediate results.

        ``backbone_preds`` replaces the backbone output (normalized) entirely,
        as with a frozen, precomputed backbone. ``shift_preds`` replaces only
        the forecasts read into the shifted indicator rows; with
        ``grad_through_shift`` off they default to a detached copy of the
        backbone output. ``refine=False`` skips the refiner.
        """
        cfg = self.config
        p = self.params if params is None else params
        raw = np.asarray(raw_lookback, dtype=np.float64)
        single = raw.ndim == 2
        if single:
            raw = raw[None]
        if raw.shape[1:] != (cfg.C, cfg.L):
            raise ShapeError(f"lookback shape {raw.shape[1:]} does not match (C, L) = {(cfg.C, cfg.L)}")

        stats = normalize.fit(raw)
        x = normalize.apply(raw, stats)
        if backbone_preds is None:
            xh = self.backbone.forecast({"w": p["backbone.w"], "b": p["backbone.b"]}, x)
        else:
            xh = np.asarray(backbone_preds, dtype=np.float64)
            if single and xh.ndim == 2:
                xh = xh[None]
        out = {"stats": stats, "lookback_norm": x, "preds_norm": xh,
               "preliminary": normalize.invert(ad.value(xh), stats)}

        if not (cfg.use_refiner and refine):
            out["refined_norm"] = xh
            out["refined"] = normalize.invert(xh, stats)
            return self._squeeze(out, single)

        if leads is None:
            raise ShapeError("the refiner needs lead estimates for this lookback")
        table = as_table(leads)
        if table.indicators.ndim == 2:
            table = table[None]
        if table.indicators.shape[:2] != (raw.shape[0], cfg.C):
            raise ShapeError(f"lead table {table.indicators.shape} does not match {(raw.shape[0], cfg.C)} windows x channels")
        if table.k != cfg.K:
            raise ShapeError(f"lead table has K = {table.k}, model expects {cfg.K}")

        rp = refiner.RefinerParams.from_dict({k[len("refiner."):]: v for k, v in p.items() if k.startswith("refiner.")})
        if shift_preds is None:
            shift_preds = xh if cfg.grad_through_shift else ad.detach(xh)
        segments = refiner.build_segments(x, shift_preds, table)
        state_in = x if cfg.state_input == "normalized" else raw
        probs = refiner.state_probs(state_in, rp)
        bank = refiner.filter_bank(table.norm_coeffs, probs, rp, cfg.K, refiner.n_bins(cfg.H))
        xt = refiner.mix(xh, segments, bank, rp)
        out.update(segments=segments, probs=probs, bank=bank, refined_norm=xt,
                   refined=normalize.invert(xt, stats))
        return self._squeeze(out, single)

    @staticmethod
    def _squeeze(out: dict, single: bool) -> dict:
        if not single:
            return out
        for key in ("preliminary", "refined"):
            if isinstance(out[key], np.ndarray):
                out[key] = out[key][0]
        return out

    def forward(self, raw_lookback, leads=None, **kw):
        """Raw-scale refined predictions, ``(C, H)`` or ``(B, C, H)``."""
        return self.forward_parts(raw_lookback, leads, **kw)["refined"]

    def backbone_forecast(self, raw_lookback) -> np.ndarray:
        """Denormalized backbone output alone."""
        raw = np.asarray(raw_lookback, dtype=np.float64)
        single = raw.ndim == 2
        raw = raw[None] if single else raw
        stats = normalize.fit(raw)
        xh = self.backbone.forecast({"w": self.params["backbone.w"], "b": self.params["backbone.b"]},
                                    normalize.apply(raw, stats))
        out = normalize.invert(xh, stats)
        return out[0] if single else out

    # -- checkpoints -------------------------------------------------------

    def encode(self) -> bytes:
        header = {"format_version": CHECKPOINT_VERSION, "backbone": "linear", "config": asdict(self.config)}
        arrays = {k: np.asarray(v, dtype="<f8") for k, v in sorted(self.params.items())}
        return container.encode(CHECKPOINT_MAGIC, header, arrays)

    def save(self, path) -> None:
        container.atomic_write_bytes(path, self.encode())

    @classmethod
    def decode(cls, data: bytes) -> "LiftModel":
        header, arrays = container.decode(data, CHECKPOINT_MAGIC)
        if header.get("format_version") != CHECKPOINT_VERSION:
            raise ConfigError(f"unsupported checkpoint version {header.get('format_version')}")
        if header.get("backbone") != "linear":
            raise ConfigError(f"unknown backbone {header.get('backbone')!r}")
        cfg = ModelConfig(**header["config"])
        bb = LinearBackbone(cfg.L, cfg.H, cfg.C, cfg.per_channel_backbone)
        return cls(cfg, dict(arrays), bb)

    @classmethod
    def load(cls, path) -> "LiftModel":
        from pathlib import Path

        return cls.decode(Path(path).read_bytes())
