"""Bilevel training of the dictionaries, ``tau`` and ``beta`` on denoising.

Each batch: draw crops, add Gaussian noise, solve the inner problem with
``H = I``, differentiate the mean l1 loss through the fixed point, and take
one ADAM step with separate learning rates for the dictionaries and for the
regulariser weights and ``beta``.  The learning rates are multiplied by
``decay_factor`` at ``decay_points_per_epoch`` evenly spaced batches of every
epoch.

Randomness for batch ``b`` comes from ``numpy.random.default_rng([seed, b])``,
so a run resumed from a checkpoint replays exactly the batches it would have
seen.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .implicit import BackwardConfig, backward_implicit, loss_l1_grad
from .model import ModelParams, model_arrays, params_from_arrays
from .operators import Identity
from .solver import SolverConfig, Workspace, solve_inner

__all__ = [
    "TrainConfig",
    "AdamState",
    "adam_step",
    "CropDataset",
    "TrainingAborted",
    "TrainResult",
    "train",
    "lr_multiplier",
    "full_size_train_config",
    "save_checkpoint",
    "load_checkpoint",
]

log = logging.getLogger(__name__)

DICT_KEYS = ("D_raw", "Q_raw")
REG_KEYS = ("tau_raw", "beta_raw")


class TrainingAborted(RuntimeError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 16
    lr_dict: float = 2e-4
    lr_reg: float = 1e-3
    epochs: int = 2
    batches_per_epoch: int = 14900  # 238400 crops / 16
    decay_points_per_epoch: int = 10
    decay_factor: float = 0.75
    sigma: float = 25.0 / 255.0
    crop_size: int = 40
    backward: BackwardConfig = field(default_factory=BackwardConfig)
    seed: int = 0
    checkpoint_every: int = 0
    max_skip_fraction: float = 0.1

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if isinstance(d.get("backward"), dict):
            d["backward"] = BackwardConfig(**d["backward"])
        return cls(**d)

    @property
    def total_batches(self) -> int:
        return self.epochs * self.batches_per_epoch


def full_size_train_config(sigma_255: int = 25, kind: str = "cpr") -> TrainConfig:
    """Training hyperparameters used for the full-size denoising models."""
    if sigma_255 == 5:
        backward = BackwardConfig(solver="anderson", iters=75)
    else:
        backward = BackwardConfig(solver="broyden", iters=50)
    return TrainConfig(
        sigma=sigma_255 / 255.0,
        decay_factor=0.75 if kind == "cpr" else 0.9,
        backward=backward,
    )


def lr_multiplier(batch: int, cfg: TrainConfig) -> float:
    """Decay factor applied at batch index ``batch`` (0-based)."""
    steps = (batch * cfg.decay_points_per_epoch) // max(cfg.batches_per_epoch, 1)
    return cfg.decay_factor**steps


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, arrays: dict[str, np.ndarray]) -> "AdamState":
        return cls(
            m={k: np.zeros_like(np.asarray(a, dtype=float)) for k, a in arrays.items()},
            v={k: np.zeros_like(np.asarray(a, dtype=float)) for k, a in arrays.items()},
        )


def adam_step(
    arrays: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: dict[str, float] | float,
    b1: float = 0.9,
    b2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected ADAM update; ``lr`` may differ per array."""
    t = state.step + 1
    new, m_new, v_new = {}, {}, {}
    for k, a in arrays.items():
        g = np.asarray(grads[k], dtype=float)
        m_new[k] = b1 * state.m[k] + (1 - b1) * g
        v_new[k] = b2 * state.v[k] + (1 - b2) * g * g
        m_hat = m_new[k] / (1 - b1**t)
        v_hat = v_new[k] / (1 - b2**t)
        rate = lr[k] if isinstance(lr, dict) else lr
        new[k] = np.asarray(a, dtype=float) - rate * m_hat / (np.sqrt(v_hat) + eps)
    return new, AdamState(m_new, v_new, t)


class CropDataset:
    """Random square crops from a list of grayscale images in ``[0, 1]``."""

    def __init__(self, images: Sequence[np.ndarray]):
        self.images = [np.asarray(im, dtype=float) for im in images]
        if not self.images:
            raise ValueError("dataset is empty")

    def sample(self, rng: np.random.Generator, count: int, size: int) -> np.ndarray:
        out = np.empty((count, size, size))
        for i in range(count):
            im = self.images[rng.integers(len(self.images))]
            if min(im.shape) < size:
                raise ValueError(f"image of shape {im.shape} is smaller than crop {size}")
            r = rng.integers(im.shape[0] - size + 1)
            c = rng.integers(im.shape[1] - size + 1)
            out[i] = im[r : r + size, c : c + size]
        return out


@dataclass
class TrainResult:
    params: ModelParams
    history: list[dict]
    adam: AdamState
    next_batch: int


def _batch_step(params: ModelParams, crops: np.ndarray, noisy: np.ndarray,
                scfg: SolverConfig, tcfg: TrainConfig):
    H = Identity()
    keys = ("D_raw", "Q_raw", "tau_raw", "beta_raw")
    total = {k: np.zeros_like(np.asarray(v, dtype=float)) for k, v in params.trainable().items()}
    losses, skipped, adj_res = [], 0, 0.0
    solved = []
    for x_true, y in zip(crops, noisy):
        ws = Workspace(params, H, y, y.shape)
        state, _ = solve_inner(params, H, y, scfg, ws=ws)
        if not state.converged:
            skipped += 1
            continue
        solved.append((x_true, y, ws, state))
    n = len(solved)
    for x_true, y, ws, state in solved:
        losses.append(float(np.abs(state.x - x_true).sum()))
        g = backward_implicit(
            state.x, state.alpha, params, H, y,
            loss_l1_grad(state.x, x_true, n), tcfg.backward, ws=ws,
        )
        adj_res = max(adj_res, g.adjoint_residual)
        for k in keys:
            total[k] = total[k] + g.as_dict()[k]
    loss = float(np.mean(losses)) if losses else float("nan")
    return loss, total, skipped, adj_res, n


def train(
    dataset: CropDataset,
    params0: ModelParams,
    tcfg: TrainConfig,
    scfg: SolverConfig | None = None,
    checkpoint_dir: str | Path | None = None,
    resume: bool = False,
    stop_after: int | None = None,
    callback: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Run (or resume) training; see the module docstring for the protocol.

    ``stop_after`` ends the run after that many batches in this call, which
    is how an interrupted run is simulated.
    """
    scfg = scfg or SolverConfig(tol=1e-4)
    params = params0
    adam = AdamState.zeros_like(params.trainable())
    history: list[dict] = []
    start = 0
    if resume:
        if checkpoint_dir is None:
            raise ValueError("resume needs a checkpoint directory")
        params, adam, history, start = load_checkpoint(Path(checkpoint_dir) / "checkpoint.npz")
    seen = sum(h["images"] + h["skipped"] for h in history)
    skipped_total = sum(h["skipped"] for h in history)
    end = tcfg.total_batches if stop_after is None else min(tcfg.total_batches, start + stop_after)

    b = start
    for b in range(start, end):
        rng = np.random.default_rng([tcfg.seed, b])
        crops = dataset.sample(rng, tcfg.batch_size, tcfg.crop_size)
        noisy = crops + tcfg.sigma * rng.standard_normal(crops.shape)
        loss, grads, skipped, adj_res, n = _batch_step(params, crops, noisy, scfg, tcfg)
        seen += tcfg.batch_size
        skipped_total += skipped
        if (seen >= 10 * tcfg.batch_size or b == end - 1) and \
                skipped_total > tcfg.max_skip_fraction * seen:
            raise TrainingAborted(
                f"{skipped_total}/{seen} inner solves did not converge; "
                "raise max_iters or lower the tolerance"
            )
        mult = lr_multiplier(b, tcfg)
        lrs = {k: tcfg.lr_dict * mult for k in DICT_KEYS}
        lrs.update({k: tcfg.lr_reg * mult for k in REG_KEYS})
        if n:
            new, adam = adam_step(params.trainable(), grads, adam, lrs)
            params = params.with_trainable(new)
        entry = {
            "batch": b,
            "loss": loss,
            "images": n,
            "skipped": skipped,
            "lr_dict": lrs["D_raw"],
            "lr_reg": lrs["tau_raw"],
            "beta": params.beta,
            "tau_mean": float(np.mean(params.tau)),
            "adjoint_residual": adj_res,
        }
        history.append(entry)
        if callback is not None:
            callback(entry)
        log.debug("batch %d loss %.5f", b, loss)
        if checkpoint_dir is not None and tcfg.checkpoint_every and \
                (b + 1) % tcfg.checkpoint_every == 0:
            save_checkpoint(checkpoint_dir, params, adam, history, b + 1, tcfg)
    next_batch = end if end > start else start
    if checkpoint_dir is not None:
        save_checkpoint(checkpoint_dir, params, adam, history, next_batch, tcfg)
    return TrainResult(params, history, adam, next_batch)


HISTORY_FIELDS = ["batch", "loss", "images", "skipped", "lr_dict", "lr_reg",
                  "beta", "tau_mean", "adjoint_residual"]


def save_checkpoint(directory: str | Path, params: ModelParams, adam: AdamState,
                    history: list[dict], next_batch: int, tcfg: TrainConfig) -> Path:
    """Write ``checkpoint.npz``, ``history.csv`` and ``run_config.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    arrays = model_arrays(params)
    for k in adam.m:
        arrays[f"adam_m__{k}"] = adam.m[k]
        arrays[f"adam_v__{k}"] = adam.v[k]
    arrays["train_state"] = np.array(json.dumps({
        "adam_step": adam.step,
        "next_batch": next_batch,
        "history": history,
        "config": tcfg.to_dict(),
    }))
    path = directory / "checkpoint.npz"
    tmp = directory / "checkpoint.npz.tmp"
    with open(tmp, "wb") as fh:
        np.savez(fh, **arrays)
    tmp.replace(path)
    with open(directory / "history.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=HISTORY_FIELDS)
        writer.writeheader()
        for row in history:
            writer.writerow({k: row.get(k) for k in HISTORY_FIELDS})
    (directory / "run_config.json").write_text(json.dumps(tcfg.to_dict(), indent=2))
    return path


def load_checkpoint(path: str | Path):
    """Return ``(params, adam_state, history, next_batch)``."""
    with np.load(Path(path), allow_pickle=False) as z:
        params, _ = params_from_arrays(z)
        state = json.loads(str(z["train_state"]))
        keys = params.trainable().keys()
        adam = AdamState(
            m={k: np.array(z[f"adam_m__{k}"]) for k in keys},
            v={k: np.array(z[f"adam_v__{k}"]) for k in keys},
            step=int(state["adam_step"]),
        )
    return params, adam, state["history"], int(state["next_batch"])
