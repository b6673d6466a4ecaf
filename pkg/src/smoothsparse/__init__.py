"""Learned patch regularisers with a smooth/sparse split, trained by implicit differentiation.

Set ``SMOOTHSPARSE_THREADS`` before the first import to cap the BLAS/FFT
thread pools (``1`` gives the single-threaded, bitwise-reproducible mode).
"""

import os as _os

_threads = _os.environ.get("SMOOTHSPARSE_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ[_var] = _threads

from .analysis import (  # noqa: E402
    Decomposition,
    atom_sheet,
    decompose,
    patch_cost_map,
    psnr,
    recover_free_coefficients,
    sort_free_atoms_by_variance,
    ssim,
)
from .dictionaries import (  # noqa: E402
    DictionaryPair,
    RawDictionaries,
    parameterize_dictionaries,
    validate_feasible_set,
)
from .fixedpoint import anderson_solve, broyden_solve  # noqa: E402
from .implicit import BackwardConfig, backward_implicit, loss_l1  # noqa: E402
from .imageio import load_image, save_image  # noqa: E402
from .model import ModelParams, init_model_params, load_model, save_model  # noqa: E402
from .operators import (  # noqa: E402
    BlurStride,
    Identity,
    MaskedFourier,
    generate_column_mask,
    make_sr_operator,
    simulate_measurements,
)
from .phantoms import head_phantom  # noqa: E402
from .regularizers import RegularizerParams, cpr_prox, ncpr_prox  # noqa: E402
from .solver import SolverConfig, fixed_point_map, objective_value, solve_inner  # noqa: E402
from .tensor import conv2d_circular, conv2d_transpose_circular, patch_outer  # noqa: E402
from .trainer import CropDataset, TrainConfig, train  # noqa: E402
from .tuning import coarse_to_fine, tune_model  # noqa: E402

__version__ = "0.1.0"

__all__ = [
    "BackwardConfig", "BlurStride", "CropDataset", "Decomposition", "DictionaryPair",
    "Identity", "MaskedFourier", "ModelParams", "RawDictionaries", "RegularizerParams",
    "SolverConfig", "TrainConfig", "anderson_solve", "atom_sheet", "backward_implicit",
    "broyden_solve", "coarse_to_fine", "conv2d_circular", "conv2d_transpose_circular",
    "cpr_prox", "decompose", "fixed_point_map", "generate_column_mask", "head_phantom", "init_model_params",
    "load_image", "load_model", "loss_l1", "make_sr_operator", "ncpr_prox",
    "objective_value", "parameterize_dictionaries", "patch_cost_map", "patch_outer", "psnr",
    "recover_free_coefficients", "save_image", "save_model", "simulate_measurements",
    "solve_inner", "sort_free_atoms_by_variance", "ssim", "train", "tune_model",
    "validate_feasible_set",
]
