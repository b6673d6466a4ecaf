"""Check implicit gradients against finite differences on a small problem.

The fixed point is solved once, the adjoint equation gives every gradient at
the cost of a few dozen sweep linearisations, and each finite difference
needs two more full solves.  The two agree to many digits.
"""

# %% a small denoising problem
import numpy as np

from smoothsparse import (
    BackwardConfig, Identity, SolverConfig, backward_implicit, init_model_params, loss_l1,
    solve_inner,
)
from smoothsparse.implicit import loss_l1_grad

rng = np.random.default_rng(0)
x_true = 0.5 * rng.random((8, 8)) + 0.5 * np.linspace(0, 1, 8)[None]
y = x_true + 0.1 * rng.standard_normal((8, 8))
cfg = SolverConfig(tol=1e-10, max_iters=200_000)

for kind, tau0 in (("cpr", 0.02), ("ncpr", 0.05)):
    params = init_model_params(side=3, p1=4, p2=2, kind=kind, gamma=1.0, tau0=tau0, seed=5)

    def loss(p):
        return loss_l1(solve_inner(p, Identity(), y, cfg)[0].x, x_true)

    state, _ = solve_inner(params, Identity(), y, cfg)
    grads = backward_implicit(state.x, state.alpha, params, Identity(), y,
                              loss_l1_grad(state.x, x_true),
                              BackwardConfig(iters=500, memory=30, tol=1e-12))
    print(f"\n{kind}: adjoint residual {grads.adjoint_residual:.1e}")

    # %% compare a few entries of every raw array
    raw = params.trainable()
    h = 1e-4
    for name, idx in (("D_raw", (4, 1)), ("Q_raw", (2, 0)), ("tau_raw", (1,)), ("beta_raw", ())):
        plus, minus = np.array(raw[name], float), np.array(raw[name], float)
        plus[idx] += h
        minus[idx] -= h
        fd = (loss(params.with_trainable({**raw, name: plus}))
              - loss(params.with_trainable({**raw, name: minus}))) / (2 * h)
        an = float(np.asarray(grads.as_dict()[name])[idx])
        print(f"  {name:8s}{str(idx):8s} implicit {an:+.6e}  finite diff {fd:+.6e}")
