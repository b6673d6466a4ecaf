"""Command-line front end.

Verbs: ``train``, ``reconstruct``, ``decompose``, ``gridsearch``, ``metrics``
and ``inspect-model``.  Settings are layered: a named profile
(``paper-denoise-5``, ``paper-denoise-25`` or ``desk``), then the JSON file
given with ``--config``, then command-line flags.  Each run writes its
resolved configuration as JSON next to its outputs.

Exit codes: 0 success, 2 configuration error, 3 data error (unreadable or
inconsistent inputs), 4 aborted because a solve did not converge.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .analysis import atom_sheet, decompose, psnr, psnr_for_table, ssim
from .config import ConfigError, parse_operator, resolve, write_snapshot
from .dictionaries import validate_feasible_set
from .imageio import ImageFormatError, load_image, load_image_dir, save_image
from .implicit import BackwardConfig
from .model import ModelFormatError, init_model_params, load_model, save_model
from .operators import (
    ForwardOperator,
    Identity,
    MaskedFourier,
    generate_column_mask,
    make_sr_operator,
    simulate_measurements,
)
from .solver import SolverConfig, SolverDivergenceError, solve_inner
from .tensor import ShapeError
from .trainer import CropDataset, TrainConfig, TrainingAborted, train
from .tuning import tune_model, write_table

log = logging.getLogger("smoothsparse")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NOT_CONVERGED = 4


class DataError(RuntimeError):
    pass


# -- helpers ---------------------------------------------------------------

def _require(cfg: dict, key: str) -> object:
    if cfg.get(key) in (None, ""):
        raise ConfigError(f"{cfg['command']}: missing required setting {key!r}")
    return cfg[key]


def build_operator(spec: dict, shape: tuple[int, int]) -> ForwardOperator:
    """Operator for images of ``shape`` from a config entry."""
    kind = spec.get("kind", "identity")
    if kind == "identity":
        return Identity()
    if kind == "sr":
        return make_sr_operator(float(spec.get("sigma", 2.0)), int(spec.get("size", 16)),
                                int(spec.get("stride", 4)))
    if kind == "mri":
        acc = int(spec.get("acc", 8))
        mask = generate_column_mask(shape[0], shape[1], acc, spec.get("center_fraction"),
                                    int(spec.get("seed", 0)))
        return MaskedFourier(mask)
    raise ConfigError(f"unknown operator kind {kind!r}")


def _image_shape(spec: dict, meas_shape: tuple[int, int]) -> tuple[int, int]:
    if spec.get("kind") == "sr":
        s = int(spec.get("stride", 4))
        return meas_shape[0] * s, meas_shape[1] * s
    return tuple(meas_shape)


def _load_measurement(path: str) -> np.ndarray:
    p = Path(path)
    if p.suffix.lower() == ".npy":
        try:
            return np.load(p, allow_pickle=False)
        except (OSError, ValueError) as exc:
            raise DataError(f"cannot read measurement {p}: {exc}") from exc
    return load_image(p)


def _problem(cfg: dict):
    """Return ``(H, y, x_true or None)`` from the measurement settings."""
    op = cfg.get("operator") or {"kind": "identity"}
    gt_path = cfg.get("ground_truth")
    x_true = load_image(gt_path) if gt_path else None
    if cfg.get("measurement"):
        y = _load_measurement(cfg["measurement"])
        shape = x_true.shape if x_true is not None else _image_shape(op, y.shape)
        H = build_operator(op, shape)
    elif x_true is not None:
        H = build_operator(op, x_true.shape)
        y = simulate_measurements(H, x_true, float(cfg.get("noise_sigma", 0.0)),
                                  int(cfg.get("seed", 0)))
    else:
        raise ConfigError(f"{cfg['command']}: give a measurement or a ground truth to simulate one")
    return H, y, x_true


def _solver_cfg(cfg: dict, section: str = "reconstruct") -> SolverConfig:
    s = dict(cfg.get(section, {}))
    if cfg.get("tol") is not None:
        s["tol"] = cfg["tol"]
    return SolverConfig(tol=float(s.get("tol", 1e-5)), max_iters=int(s.get("max_iters", 20000)))


def _write_json(path: Path, data: dict) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2, sort_keys=True, default=float))
    return path


def _snapshot(cfg: dict, default: Path) -> Path:
    return write_snapshot(cfg, cfg.get("snapshot") or default)


# -- commands ---------------------------------------------------------------

def cmd_train(cfg: dict) -> int:
    data = Path(_require(cfg, "data"))
    out = Path(_require(cfg, "out"))
    tdict = dict(cfg["train"])
    if cfg.get("batches") is not None:
        tdict.update(epochs=1, batches_per_epoch=int(cfg["batches"]))
    tdict["seed"] = int(cfg.get("seed", 0))
    if isinstance(tdict.get("backward"), dict):
        tdict["backward"] = BackwardConfig(**tdict["backward"])
    tcfg = TrainConfig(**tdict)
    m = cfg["model"]
    if m["kind"] == "cpr" and tcfg.crop_size % 2:
        raise ConfigError("CPR training needs an even crop size")
    _snapshot(cfg, out / "resolved_config.json")
    try:
        images = load_image_dir(data)
    except ImageFormatError as exc:
        raise DataError(str(exc)) from exc
    params0 = init_model_params(m["side"], m["p1"], m["p2"], m["kind"], m.get("gamma", 2.0),
                                m.get("tau0", 0.05), m.get("beta0", 1.0), int(cfg.get("seed", 0)))
    scfg = SolverConfig(tol=float(cfg.get("tol") or cfg["solver"]["tol"]),
                        max_iters=int(cfg["solver"]["max_iters"]))
    seg = max(tcfg.batches_per_epoch // max(tcfg.decay_points_per_epoch, 1), 1)
    acc: list[float] = []

    def report(entry):
        acc.append(entry["loss"])
        if (entry["batch"] + 1) % seg == 0:
            print(f"batch {entry['batch'] + 1}: mean loss {np.nanmean(acc):.5f}", flush=True)
            acc.clear()

    res = train(CropDataset(images), params0, tcfg, scfg, checkpoint_dir=out,
                resume=bool(cfg.get("resume")), callback=report)
    save_model(out / "model.npz", res.params, {"profile": cfg["profile"]})
    print(f"model written to {out / 'model.npz'}")
    return EXIT_OK


def _reconstruct(cfg: dict):
    params = load_model(_require(cfg, "model"))
    H, y, x_true = _problem(cfg)
    state, _ = solve_inner(params, H, y, _solver_cfg(cfg))
    info = {"converged": bool(state.converged), "iterations": int(state.iter - 1),
            "residual": float(state.residual)}
    if x_true is not None:
        info["psnr"] = psnr_for_table(psnr(state.x, x_true))
        info["ssim"] = ssim(state.x, x_true)
        info["psnr_zero_fill"] = psnr_for_table(psnr(H.adjoint(y), x_true))
    if not state.converged:
        log.warning("solver did not converge (residual %.3e); output written anyway",
                    state.residual)
    return params, H, y, state, info


def cmd_reconstruct(cfg: dict) -> int:
    out = Path(_require(cfg, "out"))
    _snapshot(cfg, out.with_name(out.name + ".config.json"))
    _, _, _, state, info = _reconstruct(cfg)
    save_image(out, state.x)
    _write_json(out.with_name(out.name + ".json"), info)
    print(json.dumps(info, sort_keys=True))
    return EXIT_OK


def cmd_decompose(cfg: dict) -> int:
    out = Path(_require(cfg, "out"))
    _snapshot(cfg, out / "resolved_config.json")
    params, H, y, state, info = _reconstruct(cfg)
    dec = decompose(state, params, H, y, cg_tol=float(cfg.get("cg_tol", 1e-8)))
    out.mkdir(parents=True, exist_ok=True)
    for name in ("x_star", "x_smooth", "x_sparse", "cost_map"):
        np.save(out / f"{name}.npy", getattr(dec, name))
    save_image(out / "x_star.png", dec.x_star)
    save_image(out / "atoms_D.png", atom_sheet(params.D, np.argsort(params.tau)))
    save_image(out / "atoms_Q.png", atom_sheet(params.Q))
    side = {**info, **dec.meta, "cg_residual": dec.cg_residual, "damped": dec.damped,
            "split_error": dec.split_error, "beta": params.beta, "kind": params.kind}
    _write_json(out / "decomposition.json", side)
    print(json.dumps({k: side[k] for k in ("split_error", "cg_residual", "damped")}))
    return EXIT_OK


def cmd_gridsearch(cfg: dict) -> int:
    out = Path(_require(cfg, "out"))
    _snapshot(cfg, out / "resolved_config.json")
    params = load_model(_require(cfg, "model"))
    try:
        truths = load_image_dir(_require(cfg, "validation"))
    except ImageFormatError as exc:
        raise DataError(str(exc)) from exc
    op = cfg.get("operator") or {"kind": "identity"}
    sigma = float(cfg.get("noise_sigma", 0.0))
    seed = int(cfg.get("seed", 0))
    shape = truths[0].shape
    if any(t.shape != shape for t in truths):
        raise DataError("validation images must share one size")
    H = build_operator(op, shape)
    pairs = [(t, simulate_measurements(H, t, sigma, seed + i)) for i, t in enumerate(truths)]
    g = cfg.get("grid", {})
    res = tune_model(params, pairs, H, tuple(g.get("beta_range", (0.1, 10.0))),
                     tuple(g.get("second_range", (0.1, 10.0))), int(g.get("n", 5)),
                     int(g.get("refinements", 1)), _solver_cfg(cfg))
    out.mkdir(parents=True, exist_ok=True)
    write_table(res, out / "grid.csv")
    best = {res.names[0]: res.best[0], res.names[1]: res.best[1], "score": res.score}
    _write_json(out / "best.json", best)
    print(json.dumps(best))
    return EXIT_OK


def cmd_metrics(cfg: dict) -> int:
    x = load_image(_require(cfg, "image"))
    ref = load_image(_require(cfg, "ref"))
    if x.shape != ref.shape:
        raise DataError(f"shape mismatch {x.shape} vs {ref.shape}")
    peak = float(cfg.get("peak", 1.0))
    res = {"psnr": psnr_for_table(psnr(x, ref, peak, cfg.get("crop"))), "ssim": ssim(x, ref, peak)}
    default = Path(cfg["out"]).with_suffix(".config.json") if cfg.get("out") else \
        Path("metrics.config.json")
    _snapshot(cfg, default)
    if cfg.get("out"):
        _write_json(Path(cfg["out"]), res)
    print(json.dumps(res))
    return EXIT_OK


def cmd_inspect(cfg: dict) -> int:
    params = load_model(_require(cfg, "model"))
    rep = validate_feasible_set(params.pair)
    info = {
        "kind": params.kind, "patch_side": params.side, "p1": params.raw.p1,
        "p2": params.raw.p2, "beta": params.beta, "gamma": params.gamma, "lam": params.lam,
        "tau_min": float(params.tau.min()), "tau_max": float(params.tau.max()),
        "feasible": rep.passed, "orthonormality": rep.orthonormality,
        "orthogonality": rep.orthogonality, "spectral_norm_error": rep.spectral_norm_error,
    }
    if cfg.get("sheet"):
        save_image(cfg["sheet"], atom_sheet(params.D, np.argsort(params.tau)))
    default = Path(cfg["sheet"]).with_suffix(".config.json") if cfg.get("sheet") else \
        Path("inspect-model.config.json")
    _snapshot(cfg, default)
    print(json.dumps(info, indent=2, default=float))
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "reconstruct": cmd_reconstruct,
    "decompose": cmd_decompose,
    "gridsearch": cmd_gridsearch,
    "metrics": cmd_metrics,
    "inspect-model": cmd_inspect,
}


# -- argument parsing ---------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file (layered over the profile)")
    common.add_argument("--profile", help="named default profile")
    common.add_argument("--seed", type=int)
    common.add_argument("--tol", type=float, help="inner solver tolerance")
    common.add_argument("--snapshot", help="where to write the resolved config")
    common.add_argument("-v", "--verbose", action="store_true")

    recon = argparse.ArgumentParser(add_help=False)
    recon.add_argument("--model")
    recon.add_argument("--operator", type=parse_operator,
                       help="identity | sr[:sigma=2,size=16,stride=4] | mri[:acc=8,seed=0]")
    recon.add_argument("--measurement", help="measured data (.npy keeps complex values)")
    recon.add_argument("--ground-truth", dest="ground_truth")
    recon.add_argument("--noise-sigma", dest="noise_sigma", type=float)

    p = argparse.ArgumentParser(prog="smoothsparse", description=__doc__.split("\n\n")[0])
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", parents=[common], help="learn a model from an image folder")
    t.add_argument("--data")
    t.add_argument("--out")
    t.add_argument("--batches", type=int, help="total number of batches (one epoch)")
    t.add_argument("--resume", action="store_true", default=None)

    r = sub.add_parser("reconstruct", parents=[common, recon], help="solve one inverse problem")
    r.add_argument("--out", help="output image (.png or .npy)")

    d = sub.add_parser("decompose", parents=[common, recon], help="smooth/sparse split")
    d.add_argument("--out", help="output directory")
    d.add_argument("--cg-tol", dest="cg_tol", type=float)

    g = sub.add_parser("gridsearch", parents=[common, recon], help="tune beta and lam/tau")
    g.add_argument("--validation", help="folder of ground-truth images")
    g.add_argument("--out", help="output directory")
    g.add_argument("--beta-range", dest="beta_range", nargs=2, type=float)
    g.add_argument("--second-range", dest="second_range", nargs=2, type=float,
                   help="lam range (CPR) or tau multiplier range (NCPR)")
    g.add_argument("--grid", dest="grid_n", type=int)
    g.add_argument("--refinements", type=int)

    m = sub.add_parser("metrics", parents=[common], help="PSNR and SSIM of two images")
    m.add_argument("image", nargs="?")
    m.add_argument("ref", nargs="?")
    m.add_argument("--peak", type=float)
    m.add_argument("--crop", type=int)
    m.add_argument("--out", help="JSON output")

    i = sub.add_parser("inspect-model", parents=[common], help="summarise a model file")
    i.add_argument("model", nargs="?")
    i.add_argument("--sheet", help="write an atom sheet of D sorted by tau")
    return p


def _flags(ns: argparse.Namespace) -> dict:
    skip = {"config", "profile", "command", "verbose", "beta_range", "second_range",
            "grid_n", "refinements"}
    flags = {k: v for k, v in vars(ns).items() if k not in skip}
    grid = {"beta_range": getattr(ns, "beta_range", None),
            "second_range": getattr(ns, "second_range", None),
            "n": getattr(ns, "grid_n", None), "refinements": getattr(ns, "refinements", None)}
    if any(v is not None for v in grid.values()):
        flags["grid"] = grid
    return flags


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve(ns.command, ns.profile, ns.config, _flags(ns))
        return COMMANDS[ns.command](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, ImageFormatError, ModelFormatError, ShapeError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingAborted, SolverDivergenceError) as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        return EXIT_NOT_CONVERGED


if __name__ == "__main__":
    sys.exit(main())
