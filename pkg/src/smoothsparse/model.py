"""Trainable model parameters and their on-disk container.

The container is an uncompressed ``.npz`` archive holding the raw arrays, the
derived dictionaries and a JSON header (magic string, format version, scalar
hyperparameters).  It is loaded with ``allow_pickle=False``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path

import numpy as np

from .dictionaries import DictionaryPair, RawDictionaries, parameterize_dictionaries
from .regularizers import CPR, NCPR, RegularizerParams

__all__ = [
    "MAGIC",
    "FORMAT_VERSION",
    "ModelParams",
    "ModelFormatError",
    "softplus",
    "softplus_inv",
    "init_model_params",
    "save_model",
    "load_model",
]

MAGIC = "SMOOTHSPARSE-MODEL"
FORMAT_VERSION = 1


class ModelFormatError(ValueError):
    pass


def softplus(x):
    return np.logaddexp(0.0, x)


def softplus_inv(y):
    y = np.asarray(y, dtype=float)
    if np.any(y <= 0):
        raise ValueError("softplus_inv needs positive input")
    # log(expm1(y)) computed stably for large y
    return y + np.log(-np.expm1(-y))


@dataclass(frozen=True, eq=False)
class ModelParams:
    """Everything that defines a reconstruction model.

    ``tau`` and ``beta`` are stored through softplus so that unconstrained
    gradient steps keep them positive.  ``lam`` is a deployment-time knob
    (fixed to 1 while training); ``gamma`` is the NCPR exponent.
    """

    raw: RawDictionaries
    tau_raw: np.ndarray
    beta_raw: float
    kind: str = CPR
    gamma: float = 2.0
    lam: float = 1.0
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        tau_raw = np.atleast_1d(np.asarray(self.tau_raw, dtype=float))
        if tau_raw.shape != (self.raw.p1,):
            raise ValueError(f"tau_raw must have shape ({self.raw.p1},)")
        object.__setattr__(self, "tau_raw", tau_raw)
        object.__setattr__(self, "beta_raw", float(self.beta_raw))
        object.__setattr__(self, "kind", str(self.kind).lower())
        if self.kind not in (CPR, NCPR):
            raise ValueError(f"unknown regularizer kind {self.kind!r}")

    @cached_property
    def pair(self) -> DictionaryPair:
        return parameterize_dictionaries(self.raw)

    @property
    def D(self) -> np.ndarray:
        return self.pair.D

    @property
    def Q(self) -> np.ndarray:
        return self.pair.Q

    @property
    def side(self) -> int:
        return self.pair.side

    @property
    def tau(self) -> np.ndarray:
        return softplus(self.tau_raw)

    @property
    def beta(self) -> float:
        return float(softplus(self.beta_raw))

    @property
    def reg(self) -> RegularizerParams:
        return RegularizerParams(self.kind, self.tau, gamma=self.gamma, lam=self.lam)

    def with_beta(self, beta: float) -> "ModelParams":
        return replace(self, beta_raw=float(softplus_inv(beta)))

    def with_lam(self, lam: float) -> "ModelParams":
        return replace(self, lam=float(lam))

    def with_tau_scale(self, factor: float) -> "ModelParams":
        """Multiply every ``tau`` by ``factor`` (the NCPR strength knob)."""
        return replace(self, tau_raw=softplus_inv(self.tau * factor))

    def trainable(self) -> dict[str, np.ndarray]:
        return {
            "D_raw": self.raw.D_raw,
            "Q_raw": self.raw.Q_raw,
            "tau_raw": self.tau_raw,
            "beta_raw": np.array(self.beta_raw),
        }

    def with_trainable(self, arrays: dict[str, np.ndarray]) -> "ModelParams":
        return replace(
            self,
            raw=RawDictionaries(arrays["D_raw"], arrays["Q_raw"]),
            tau_raw=arrays["tau_raw"],
            beta_raw=float(arrays["beta_raw"]),
        )


def init_model_params(
    side: int = 13,
    p1: int = 200,
    p2: int = 120,
    kind: str = CPR,
    gamma: float = 2.0,
    tau0: float = 0.05,
    beta0: float = 1.0,
    seed: int = 0,
) -> ModelParams:
    """Random Gaussian raw dictionaries with constant ``tau`` and ``beta``."""
    d = side * side
    if side % 2 == 0:
        raise ValueError("patch side must be odd")
    if not 1 <= p2 <= d:
        raise ValueError(f"p2 must lie in [1, {d}]")
    rng = np.random.default_rng(seed)
    raw = RawDictionaries(rng.standard_normal((d, p1)), rng.standard_normal((d, p2 - 1)))
    return ModelParams(
        raw=raw,
        tau_raw=np.full(p1, float(softplus_inv(tau0))),
        beta_raw=float(softplus_inv(beta0)),
        kind=kind,
        gamma=gamma,
    )


def _header(params: ModelParams, extra: dict | None) -> dict:
    return {
        "magic": MAGIC,
        "version": FORMAT_VERSION,
        "kind": params.kind,
        "gamma": params.gamma,
        "lam": params.lam,
        "beta_raw": params.beta_raw,
        "patch_side": params.side,
        "p1": params.raw.p1,
        "p2": params.raw.p2,
        "meta": params.meta,
        **({"extra": extra} if extra else {}),
    }


def model_arrays(params: ModelParams, extra: dict | None = None) -> dict[str, np.ndarray]:
    header = json.dumps(_header(params, extra), sort_keys=True)
    return {
        "header": np.array(header),
        "D_raw": params.raw.D_raw,
        "Q_raw": params.raw.Q_raw,
        "tau_raw": params.tau_raw,
        "D": params.D,
        "Q": params.Q,
        "tau": params.tau,
    }


def save_model(path: str | Path, params: ModelParams, extra: dict | None = None) -> Path:
    path = Path(path)
    with open(path, "wb") as fh:
        np.savez(fh, **model_arrays(params, extra))
    return path


def params_from_arrays(arrays) -> tuple[ModelParams, dict]:
    try:
        header = json.loads(str(arrays["header"]))
    except (KeyError, ValueError) as exc:
        raise ModelFormatError("missing or unreadable model header") from exc
    if header.get("magic") != MAGIC:
        raise ModelFormatError(f"not a model file (magic {header.get('magic')!r})")
    if header.get("version") != FORMAT_VERSION:
        raise ModelFormatError(f"unsupported model format version {header.get('version')}")
    params = ModelParams(
        raw=RawDictionaries(arrays["D_raw"], arrays["Q_raw"]),
        tau_raw=arrays["tau_raw"],
        beta_raw=header["beta_raw"],
        kind=header["kind"],
        gamma=header["gamma"],
        lam=header["lam"],
        meta=header.get("meta", {}),
    )
    return params, header


def load_model(path: str | Path) -> ModelParams:
    """Load a model; the stored derived dictionaries are checked against the raw ones."""
    with np.load(Path(path), allow_pickle=False) as z:
        params, _ = params_from_arrays(z)
        if not np.allclose(z["D"], params.D, atol=1e-10) or not np.allclose(
            z["Q"], params.Q, atol=1e-10
        ):
            raise ModelFormatError("stored dictionaries do not match their raw parameters")
    return params
