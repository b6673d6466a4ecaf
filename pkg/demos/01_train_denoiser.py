"""Train a tiny patch model on 9x9 noisy crops and denoise an unseen image.

Needs scikit-image for the sample images (``pip install -e .[test]``).
Runs in about six minutes on one core; set ``BATCHES`` lower for a quick look.
Writes ``demo_out/desk_model.npz``, which the other demos pick up.
"""

# %% setup
from pathlib import Path

import numpy as np
import skimage.data as sd
from skimage.color import rgb2gray

from smoothsparse import (
    BackwardConfig, CropDataset, Identity, SolverConfig, TrainConfig, init_model_params,
    psnr, save_image, save_model, solve_inner, ssim, train,
)

OUT = Path("demo_out")
OUT.mkdir(exist_ok=True)
BATCHES = 200
SIGMA = 25 / 255


def gray(img):
    a = rgb2gray(img[..., :3]) if img.ndim == 3 else np.asarray(img, float)
    return a / 255.0 if a.max() > 1 else a


names = ["camera", "astronaut", "coins", "moon", "page", "text", "clock", "grass", "gravel",
         "brick", "coffee", "chelsea", "rocket", "hubble_deep_field", "immunohistochemistry",
         "cell", "microaneurysms", "cat", "colorwheel", "checkerboard"]
images = [gray(getattr(sd, n)())[::2, ::2] for n in names]
print(f"{len(images)} training images, e.g. {images[0].shape}")

# %% model: 3x3 patches, 8 sparse atoms, 3 free atoms (one constant)
# NCPR because 9x9 crops are odd-sized and the convex prior groups 2x2 blocks
params0 = init_model_params(side=3, p1=8, p2=3, kind="ncpr", gamma=2.0, tau0=0.05, beta0=1.0, seed=0)

cfg = TrainConfig(batch_size=16, lr_dict=1e-2, lr_reg=1e-2, epochs=1, batches_per_epoch=BATCHES,
                  decay_factor=0.9, sigma=SIGMA, crop_size=9,
                  backward=BackwardConfig(solver="broyden", iters=50), seed=0)


def progress(entry):
    if (entry["batch"] + 1) % 20 == 0:
        print(f"batch {entry['batch'] + 1:4d}  loss {entry['loss']:.3f}  beta {entry['beta']:.3f}"
              f"  mean tau {entry['tau_mean']:.4f}")


result = train(CropDataset(images), params0, cfg, SolverConfig(tol=1e-4, max_iters=2000),
               callback=progress)
save_model(OUT / "desk_model.npz", result.params)

losses = np.array([h["loss"] for h in result.history])
blocks = losses[: len(losses) // 5 * 5].reshape(5, -1).mean(1)
print("loss per fifth of the run:", np.round(blocks, 3))

# %% denoise a crop the model never saw
clean = gray(sd.retina())[600:664, 600:664]
noisy = clean + SIGMA * np.random.default_rng(7).standard_normal(clean.shape)
for label, p in (("initial", params0), ("trained", result.params)):
    state, _ = solve_inner(p, Identity(), noisy, SolverConfig(tol=1e-5, max_iters=20000))
    print(f"{label:8s} model: {psnr(state.x, clean):.2f} dB, SSIM {ssim(state.x, clean):.3f}")
print(f"noisy input:   {psnr(noisy, clean):.2f} dB, SSIM {ssim(noisy, clean):.3f}")
save_image(OUT / "denoised.png", state.x)
save_image(OUT / "noisy.png", noisy)
