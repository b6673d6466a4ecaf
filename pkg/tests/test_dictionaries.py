import numpy as np
import pytest

from smoothsparse.dictionaries import (
    BJORCK_ITERS,
    DegenerateAtomError,
    DictionaryPair,
    OrthonormalizationError,
    RawDictionaries,
    bjorck_orthonormalize,
    parameterize_dictionaries,
    parameterize_with_vjp,
    validate_feasible_set,
)


def raw(rng, d=25, p1=6, p2=4):
    return RawDictionaries(rng.standard_normal((d, p1)), rng.standard_normal((d, p2 - 1)))


def test_feasible_output(rng):
    pair = parameterize_dictionaries(raw(rng))
    rep = validate_feasible_set(pair, 1e-8)
    assert rep.passed, rep
    assert pair.p2 == 4 and pair.side == 5
    np.testing.assert_allclose(pair.Q[:, -1], 1 / 5.0)


def test_bjorck_limit_is_polar_factor(rng):
    A = rng.standard_normal((20, 5))
    A /= np.linalg.norm(A, 2)
    U, _, Vt = np.linalg.svd(A, full_matrices=False)
    np.testing.assert_allclose(bjorck_orthonormalize(A, 40), U @ Vt, atol=1e-12)


def test_fifteen_bjorck_steps_suffice_at_full_size(rng):
    r = RawDictionaries(rng.standard_normal((169, 200)), rng.standard_normal((169, 119)))
    pair = parameterize_dictionaries(r, BJORCK_ITERS)
    assert validate_feasible_set(pair, 1e-6).passed


def test_free_atoms_have_zero_mean(rng):
    pair = parameterize_dictionaries(raw(rng))
    np.testing.assert_allclose(pair.Q[:, :-1].sum(axis=0), 0.0, atol=1e-12)


def test_column_space_preserved(rng):
    r = raw(rng)
    Qc = r.Q_raw - r.Q_raw.mean(axis=0)
    Qb = parameterize_dictionaries(r).Q[:, :-1]
    # projecting the centred raw atoms onto span(Qb) changes nothing
    np.testing.assert_allclose(Qb @ (Qb.T @ Qc), Qc, atol=1e-10)


def test_rank_deficient_q_is_rejected(rng):
    q = rng.standard_normal((25, 1))
    r = RawDictionaries(rng.standard_normal((25, 4)), np.hstack([q, q, rng.standard_normal((25, 1))]))
    with pytest.raises(OrthonormalizationError):
        parameterize_dictionaries(r)


def test_atom_in_free_span_is_degenerate(rng):
    D_raw = rng.standard_normal((9, 3))
    D_raw[:, 1] = 1.0  # the constant atom is always in Q
    with pytest.raises(DegenerateAtomError):
        parameterize_dictionaries(RawDictionaries(D_raw, rng.standard_normal((9, 1))))


def test_too_many_free_atoms(rng):
    with pytest.raises(ValueError):
        parameterize_dictionaries(RawDictionaries(rng.standard_normal((9, 2)),
                                                  rng.standard_normal((9, 9))))


def test_only_constant_atom(rng):
    pair = parameterize_dictionaries(RawDictionaries(rng.standard_normal((9, 3)), np.zeros((9, 0))))
    assert pair.Q.shape == (9, 1)
    assert validate_feasible_set(pair).passed


def test_report_detects_violation(rng):
    pair = parameterize_dictionaries(raw(rng))
    bad = DictionaryPair(D=pair.D * 1.1, Q=pair.Q)
    rep = validate_feasible_set(bad)
    assert not rep and rep.spectral_norm_error > 0.05


def test_vjp_matches_finite_differences(rng):
    r = raw(rng, d=9, p1=4, p2=3)
    pair, vjp = parameterize_with_vjp(r)
    gD = rng.standard_normal(pair.D.shape)
    gQ = rng.standard_normal(pair.Q.shape)
    gD_raw, gQ_raw = vjp(gD, gQ)

    def f(Dr, Qr):
        p = parameterize_dictionaries(RawDictionaries(Dr, Qr))
        return np.sum(gD * p.D) + np.sum(gQ[:, :-1] * p.Q[:, :-1])

    eps = 1e-6
    for M, G, which in ((r.D_raw, gD_raw, 0), (r.Q_raw, gQ_raw, 1)):
        for idx in np.ndindex(M.shape):
            P, Mm = M.copy(), M.copy()
            P[idx] += eps
            Mm[idx] -= eps
            args_p = (P, r.Q_raw) if which == 0 else (r.D_raw, P)
            args_m = (Mm, r.Q_raw) if which == 0 else (r.D_raw, Mm)
            fd = (f(*args_p) - f(*args_m)) / (2 * eps)
            assert G[idx] == pytest.approx(fd, rel=1e-5, abs=1e-8)


def test_raw_shapes_validated(rng):
    with pytest.raises(ValueError):
        RawDictionaries(rng.standard_normal((9, 2)), rng.standard_normal((8, 1)))
    with pytest.raises(ValueError):
        RawDictionaries(np.full((9, 2), np.nan), rng.standard_normal((9, 1)))
