import math

import numpy as np
import pytest

from samle.models import ParameterBox
from samle.oracles import EulerConfig, simulate_dataset
from samle.rng import StreamKey
from samle.sam import (
    DominanceError,
    LikelihoodSurface,
    XiElement,
    estimate_An,
    eval_L,
    eval_LN,
    eval_loglik,
    fd_gradient,
    fd_hessian,
    generate_bank,
    generate_xi,
)

BM_BOX = ParameterBox.from_pairs([(-1.0, 1.0)])
BM_EXACT = math.exp(-0.02) / math.sqrt(2 * math.pi)


def _gauss_loglik(v, w, t, mu):
    return float(np.sum(-((w - v - mu * t) ** 2) / (2 * t) - 0.5 * np.log(2 * np.pi * t)))


def test_bm_elements_are_empty_and_exact(bm):
    for j in range(1, 30):
        xi = generate_xi(bm, BM_BOX, (0.0, 0.3, 1.0), StreamKey(4, 1, j))
        assert xi.lam == 0 and xi.count == 0 and xi.Nmat.shape == (3, 0)
        assert eval_L(xi, [0.5], (0.0, 0.3, 1.0), bm) == pytest.approx(BM_EXACT, rel=1e-14)
    assert BM_EXACT == pytest.approx(0.391043, abs=1e-6)


def test_generate_is_deterministic_and_matches_bank(logistic, box4):
    key = StreamKey(9, 3, 17)
    a = generate_xi(logistic, box4, (700.0, 730.0, 1.0), key)
    b = generate_xi(logistic, box4, (700.0, 730.0, 1.0), key)
    assert a.E == b.E and a.Z == b.Z and np.array_equal(a.Y, b.Y) and np.array_equal(a.Nmat, b.Nmat)
    bank = generate_bank(logistic, box4, (700.0, 730.0, 1.0), 9, 20, interval_index=3)
    c = bank.element(17)
    assert c.E == a.E and np.array_equal(c.Y, a.Y) and np.array_equal(c.Nmat, a.Nmat)


def test_bank_prefix_is_nested(logistic, box4):
    big = generate_bank(logistic, box4, (700.0, 730.0, 1.0), 9, 100)
    small = generate_bank(logistic, box4, (700.0, 730.0, 1.0), 9, 10)
    for j in range(1, 11):
        a, b = big.element(j), small.element(j)
        assert a.E == b.E and a.Z == b.Z and np.array_equal(a.Y, b.Y) and np.array_equal(a.Nmat, b.Nmat)
    assert np.array_equal(big.prefix(10).draws.Y, small.draws.Y)


def test_empty_poisson_draw_gives_prefactor(logistic, theta0):
    xi = XiElement(0.8, 0.3, 2.0, np.zeros(0), np.zeros((3, 0)))
    L = eval_L(xi, theta0, (700.0, 730.0, 1.0), logistic)
    assert L == pytest.approx(math.exp(logistic.log_prefactor(700.0, 730.0, 1.0, theta0)), rel=1e-14)


def test_dominance_violation_is_caught(logistic, theta0):
    xi = XiElement(0.8, 0.3, 1e-3, np.array([0.5]), np.zeros((3, 1)))
    with pytest.raises(DominanceError):
        eval_L(xi, theta0, (700.0, 730.0, 1.0), logistic)


def test_theta_outside_box_rejected(logistic, box4):
    xi = generate_xi(logistic, box4, (700.0, 730.0, 1.0), StreamKey(1))
    with pytest.raises(ValueError):
        eval_L(xi, [0.5, 1000.0, 0.1], (700.0, 730.0, 1.0), logistic, box4)


def test_eval_LN_basic(logistic, box4, theta0):
    bank = generate_bank(logistic, box4, (700.0, 730.0, 1.0), 3, 1)
    one = eval_L(bank.element(1), theta0, (700.0, 730.0, 1.0), logistic)
    assert eval_LN(bank, theta0, logistic) == pytest.approx(one, rel=1e-14)
    bank = generate_bank(logistic, box4, (700.0, 730.0, 1.0), 3, 50)
    assert eval_LN(bank.concat(bank), theta0, logistic) == pytest.approx(eval_LN(bank, theta0, logistic), rel=1e-14)


def test_element_bounds_and_factor_range(logistic, box4):
    bank = generate_bank(logistic, box4, (700.0, 730.0, 1.0), 5, 2000)
    surf = LikelihoodSurface(logistic, box4, [bank])
    for theta in box4.grid(3):
        a = surf.acceptance_values(theta)
        assert np.all((a >= 0) & (a <= 1))
        L = surf.element_values(theta)
        assert np.all(L <= math.exp(logistic.log_prefactor(700.0, 730.0, 1.0, theta)) * (1 + 1e-12))


def test_eval_LN_variance_rate(logistic, box4, theta0):
    # many disjoint banks on the same interval: one bank per interval of the surface
    banks_n = 400
    v, w = np.full(banks_n, 700.0), np.full(banks_n, 745.0)
    logvar = []
    Ns = (10, 100, 1000)
    surf = LikelihoodSurface.build(logistic, box4, v, w, 1.0, 77, max(Ns))
    for N in Ns:
        vals = np.exp(surf.prefix(N).log_interval_averages(theta0))
        logvar.append(math.log(vals.var(ddof=1)))
    slope = np.polyfit(np.log(Ns), logvar, 1)[0]
    assert -1.1 < slope < -0.9


def test_bm_loglik_closed_form(bm):
    rng = np.random.default_rng(5)
    v = rng.normal(size=30)
    w = v + rng.normal(0.2, 0.8, 30)
    t = rng.uniform(0.5, 2.0, 30)
    surf = LikelihoodSurface.build(bm, BM_BOX, v, w, t, 1, 3)
    for mu in (-0.7, 0.0, 0.31):
        assert eval_loglik(surf, [mu]) == pytest.approx(_gauss_loglik(v, w, t, mu), abs=1e-10)
        assert surf([mu]) == surf([mu])


def test_bm_gradient_matches_score(bm):
    rng = np.random.default_rng(6)
    v = rng.normal(size=10)
    w = v + rng.normal(0.3, 1.0, 10)
    t = np.ones(10)
    surf = LikelihoodSurface.build(bm, BM_BOX, v, w, t, 1, 2)
    mu = 0.1
    score = float(np.sum((w - v - mu * t)))
    g = fd_gradient(surf, np.array([mu]), h=1e-4)
    assert abs(g[0] - score) < 1e-6
    H = fd_hessian(surf, np.array([mu]), h=1e-3)
    assert H[0, 0] == pytest.approx(-10.0, abs=1e-5)


def test_fd_on_quadratic_exact():
    A = np.array([[-2.0, 0.5, 0.1], [0.5, -1.0, 0.2], [0.1, 0.2, -3.0]])
    f = lambda th: 0.5 * th @ A @ th + th.sum()  # noqa: E731
    box = ParameterBox.from_pairs([(-1, 1)] * 3)
    th = np.array([0.1, -0.2, 0.3])
    assert np.allclose(fd_hessian(f, th, h=1e-2, box=box), A, atol=1e-9)
    assert np.allclose(fd_gradient(f, th, h=1e-2, box=box), A @ th + 1, atol=1e-9)


def test_fd_stencil_must_stay_in_box():
    box = ParameterBox.from_pairs([(0.0, 1.0)])
    with pytest.raises(ValueError):
        fd_gradient(lambda th: 0.0, np.array([0.99]), h=0.05, box=box)
    with pytest.raises(ValueError):
        fd_gradient(lambda th: 0.0, np.array([0.5]), h=-1.0, box=box)


def test_logistic_gradient_richardson(logistic, box4, theta0):
    data = simulate_dataset(logistic, theta0, 700.0, 50, 1.0, EulerConfig(8), 3)
    v, w, t = data.intervals()
    surf = LikelihoodSurface.build(logistic, box4, v, w, t, 8, 50)
    h = 4e-3 * box4.width
    g1, g2, g3 = (fd_gradient(surf, theta0, h=h / 2**k) for k in range(3))
    d1, d2 = np.abs(g1 - g2), np.abs(g2 - g3)
    floor = 1e-7 * np.abs(g3) + 1e-9
    # the second difference should shrink by about 4; allow up to the first difference itself
    assert np.all(d2 <= d1 + floor)


def test_continuity_in_theta(logistic, box4):
    bank = generate_bank(logistic, box4, (700.0, 730.0, 1.0), 21, 200)
    surf = LikelihoodSurface(logistic, box4, [bank])
    grid = box4.lower + box4.width * (0.1 + 0.8 * np.random.default_rng(2).random((60, 3)))
    maxima = []
    for h in (1e-2, 1e-3, 1e-4):
        step = h * box4.width
        maxima.append(max(np.max(np.abs(surf.element_values(th + step) - surf.element_values(th))) for th in grid))
    assert maxima[0] > maxima[1] > maxima[2]


def test_An_zero_for_bm(bm):
    surf = LikelihoodSurface.build(bm, BM_BOX, np.zeros(5), np.linspace(0.1, 0.5, 5), 1.0, 1, 20)
    A = estimate_An(surf, np.array([0.2]))
    assert np.all(np.abs(A) < 1e-20)


def test_An_symmetric_psd(logistic, box4):
    rng = np.random.default_rng(8)
    for k in range(20):
        v = rng.uniform(600, 1100, 3)
        w = v * np.exp(rng.normal(0, 0.1, 3))
        surf = LikelihoodSurface.build(logistic, box4, v, w, 1.0, k, 30)
        th = box4.lower + box4.width * (0.1 + 0.8 * rng.random(3))
        A = estimate_An(surf, th)
        assert np.array_equal(A, A.T)
        assert np.min(np.linalg.eigvalsh(A)) >= -1e-10 * max(1.0, np.abs(A).max())


@pytest.mark.slow
def test_An_grows_linearly(logistic, box4, theta0):
    ratios = []
    for rep in range(4):
        data = simulate_dataset(logistic, theta0, 1000.0, 800, 1.0, EulerConfig(8), 100 + rep)
        v, w, t = data.intervals()
        full = LikelihoodSurface.build(logistic, box4, v, w, t, 200 + rep, 100)
        half = LikelihoodSurface(logistic, box4, full.banks[:400], full.seed)
        ratios.append(np.diag(estimate_An(full, theta0)) / np.diag(estimate_An(half, theta0)))
    mean_ratio = np.mean(ratios, axis=0)
    assert np.all(np.abs(mean_ratio - 2.0) < 0.3), mean_ratio


def test_cache_roundtrip(tmp_path, logistic, box4, theta0):
    v, w = np.array([700.0, 710.0]), np.array([710.0, 690.0])
    a = LikelihoodSurface.build(logistic, box4, v, w, 1.0, 2**64 - 5, 30, cache_dir=tmp_path)
    assert len(list(tmp_path.iterdir())) == 1
    b = LikelihoodSurface.build(logistic, box4, v, w, 1.0, 2**64 - 5, 30, cache_dir=tmp_path)
    assert a(theta0) == b(theta0)
    assert b.seed == 2**64 - 5


def test_prefix_surface_matches_direct_build(logistic, box4, theta0):
    v, w = np.array([700.0, 710.0, 705.0]), np.array([710.0, 690.0, 720.0])
    big = LikelihoodSurface.build(logistic, box4, v, w, 1.0, 4, 40)
    small = LikelihoodSurface.build(logistic, box4, v, w, 1.0, 4, 10)
    assert big.prefix(10)(theta0) == small(theta0)
