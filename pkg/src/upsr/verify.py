"""Self-check suite: every sampler statistic against its closed form or brute-force oracle.

``run_checks`` returns a list of result dicts; the CLI turns them into a JSON
report. Checks are grouped (core, schedule, uncertainty, diffusion, denoiser,
analysis) so a subset can be selected.
"""

from __future__ import annotations

import math
import time

import numpy as np

from upsr import diffusion
from upsr.analysis import (
    KinkCrossed,
    bayes_grid_posterior,
    mc_moment_check,
    normal_pdf,
    psnr,
    rel_error,
    tv_distance,
)
from upsr.core import make_rng, pixel_shuffle, pixel_unshuffle
from upsr.denoiser import (
    OracleDenoiser,
    TinyNet,
    conv3x3_backward,
    conv3x3_forward,
    gradient_magnitude,
    leaky_relu_backward,
    leaky_relu_forward,
    mixed_loss,
    sobel,
)
from upsr.denoiser import GRAD_EPS
from upsr.predictor import identity_predictor
from upsr.schedule import alpha, build_schedule, eta
from upsr.uncertainty import weight_coefficient

CHECKS = []


def check(group):
    def register(fn):
        CHECKS.append((group, fn.__name__, fn))
        return fn
    return register


def _result(passed, **details):
    return {"passed": bool(passed), **details}


def random_scalar_case(rng, s=None):
    """Random ``(x0, y0, kappa, w)`` in ranges that cover flat and textured pixels."""
    return {"x0": float(rng.uniform(0, 1)), "y0": float(rng.uniform(0, 1)),
            "kappa": float(rng.uniform(0.5, 3.0)), "w": float(rng.uniform(0.2, 1.0))}


# -- core ---------------------------------------------------------------------


@check("core")
def shuffle_roundtrip(seed):
    rng = make_rng(seed, "verify:shuffle")
    ok = True
    for r in (1, 2, 4):
        img = rng.random((8 * r, 4 * r, 3)).astype(np.float32)
        ok &= np.array_equal(pixel_shuffle(pixel_unshuffle(img, r), r), img)
    return _result(ok)


@check("core")
def rng_determinism(seed):
    a = make_rng(seed, "x").standard_normal(1000)
    b = make_rng(seed, "x").standard_normal(1000)
    c = make_rng(seed, "y").standard_normal(1000)
    return _result(np.array_equal(a, b) and not np.array_equal(a, c))


# -- schedule -----------------------------------------------------------------


@check("schedule")
def schedule_invariants(seed):
    rng = make_rng(seed, "verify:schedule")
    worst = 0.0
    ok = True
    for _ in range(50):
        T = int(rng.integers(1, 16))
        e1 = float(rng.uniform(1e-4, 0.1))
        eT = float(rng.uniform(e1 * 1.5, 1.0)) if e1 * 1.5 < 1 else 1.0
        s = build_schedule(T, float(rng.uniform(0.1, 4)), e1, eT, float(rng.uniform(0.1, 3)))
        ok &= s.eta[0] == 0 and np.all(np.diff(s.eta) > 0) and s.eta[-1] == eT
        tele = abs(sum(alpha(s, t) for t in range(1, T + 1)) - eta(s, T))
        worst = max(worst, tele)
    return _result(ok and worst < 1e-12, max_telescoping_error=worst)


# -- uncertainty --------------------------------------------------------------


@check("uncertainty")
def weight_anchors(seed):
    vals = {0.0: 0.4, 0.025: 0.7, 0.05: 1.0, 0.5: 1.0}
    got = {psi: weight_coefficient(psi, 0.4, 0.05) for psi in vals}
    ok = all(abs(got[p] - v) <= 1e-9 for p, v in vals.items())
    rng = make_rng(seed, "verify:weights")
    a, b = rng.uniform(0, 0.1, (2, 10_000))
    lo, hi = np.minimum(a, b), np.maximum(a, b)
    mono = bool(np.all(weight_coefficient(lo) <= weight_coefficient(hi)))
    return _result(ok and mono, values={str(k): v for k, v in got.items()}, monotone=mono)


# -- diffusion ----------------------------------------------------------------


@check("diffusion")
def marginal_moments(seed, n_cases=5, n=1_000_000):
    rng = make_rng(seed, "verify:marginal")
    s0 = build_schedule()
    out = []
    for k in range(n_cases):
        c = random_scalar_case(rng)
        s = build_schedule(kappa=c["kappa"])
        t = int(rng.integers(1, s.T + 1))
        mean = c["x0"] + s.eta[t] * (c["y0"] - c["x0"])
        std = c["kappa"] * c["w"] * math.sqrt(s.eta[t])
        draw = make_rng(seed, f"verify:marginal:{k}")
        rep = mc_moment_check(
            lambda m: diffusion.sample_marginal(np.full(m, c["x0"]), np.full(m, c["y0"]),
                                                s, c["w"], t, draw), mean, std, n)
        out.append(rep.to_dict())
    del s0
    return _result(all(r["passed"] for r in out), cases=out)


@check("diffusion")
def forward_composition(seed, n=1_000_000):
    s = build_schedule()
    x0, y0, w = 0.3, 0.7, 0.6
    out = []
    for t_end in sorted({1, math.ceil(s.T / 2), s.T}):
        rng = make_rng(seed, f"verify:compose:{t_end}")
        x = np.full(n, x0)
        for t in range(1, t_end + 1):
            x = diffusion.forward_step(x, np.full(n, x0), np.full(n, y0), s, w, t, rng)
        target_var = s.kappa ** 2 * w ** 2 * s.eta[t_end]
        var = float(np.var(x, ddof=1))
        mean_target = x0 + s.eta[t_end] * (y0 - x0)
        se = math.sqrt(target_var / n)
        out.append({"t": t_end, "var": var, "target_var": target_var,
                    "rel_err": abs(var / target_var - 1),
                    "mean": float(x.mean()), "target_mean": mean_target,
                    "passed": abs(var / target_var - 1) < 0.01
                    and abs(float(x.mean()) - mean_target) < 4 * se})
    return _result(all(r["passed"] for r in out), cases=out)


@check("diffusion")
def reverse_moments(seed, n=1_000_000):
    s = build_schedule(T=2, kappa=2.0, eta1=0.2, etaT=0.6, p=1.0)
    rng = make_rng(seed, "verify:reverse")
    target_std = 2.0 * math.sqrt(0.2 / 0.6 * 0.4)
    rep = mc_moment_check(
        lambda m: diffusion.reverse_step(np.ones(m), np.zeros(m), s, 1.0, 2, rng),
        1 / 3, target_std, n)
    return _result(rep.passed, report=rep.to_dict())


@check("diffusion")
def reverse_vs_bayes(seed, n_cases=20):
    rng = make_rng(seed, "verify:bayes")
    worst = 0.0
    for _ in range(n_cases):
        c = random_scalar_case(rng)
        s = build_schedule(T=int(rng.integers(2, 11)), kappa=c["kappa"],
                           eta1=float(rng.uniform(0.001, 0.05)), etaT=float(rng.uniform(0.9, 1.0)),
                           p=float(rng.uniform(0.2, 2.0)))
        t = int(rng.integers(2, s.T + 1))
        # x_t drawn from its own marginal so the case is typical
        x_t = c["x0"] + s.eta[t] * (c["y0"] - c["x0"]) + \
            c["kappa"] * c["w"] * math.sqrt(s.eta[t]) * float(rng.standard_normal())
        post = bayes_grid_posterior(x_t, c["x0"], c["y0"], s, c["w"], t)
        mean, std = diffusion.reverse_params(x_t, c["x0"], s, c["w"], t)
        tv = tv_distance(post.grid, post.density, normal_pdf(post.grid, float(mean), float(std)))
        worst = max(worst, tv)
    return _result(worst < 1e-3, max_tv=worst, tolerance=1e-3)


@check("diffusion")
def final_step_determinism(seed):
    s = build_schedule()
    rng = make_rng(seed, "verify:final")
    x0_hat = rng.random((4, 4, 3)).astype(np.float32)
    outs = [diffusion.reverse_step(rng.standard_normal((4, 4, 3)).astype(np.float32), x0_hat,
                                   s, 0.7, 1, make_rng(seed + i)) for i in range(1000)]
    return _result(all(np.array_equal(o, x0_hat) for o in outs))


@check("diffusion")
def oracle_chain(seed, n_images=10):
    s = build_schedule()
    rng = make_rng(seed, "verify:oracle")
    worst = 0.0
    for _ in range(n_images):
        x0 = rng.random((32, 32, 3)).astype(np.float32)
        y0 = np.clip(x0 + 0.1 * rng.standard_normal(x0.shape), 0, 1).astype(np.float32)
        out = diffusion.run_reverse_chain(y0, identity_predictor(), OracleDenoiser(x0), s, None, rng)
        worst = max(worst, float(np.mean((out.astype(np.float64) - x0) ** 2)))
    return _result(worst < 1e-10, max_mse=worst)


# -- denoiser -----------------------------------------------------------------


FD_EPS = 1e-3


def _sampled_fd(f, arrays, analytic, rng, eps, max_coords):
    """Compare ``analytic`` gradients with central differences of ``f`` on a
    random subset of coordinates of every array. Returns the worst relative error."""
    worst = 0.0
    base_sig = f()[1]
    for arr, grad in zip(arrays, analytic):
        flat_idx = np.arange(arr.size)
        if max_coords is not None and arr.size > max_coords:
            flat_idx = rng.choice(arr.size, max_coords, replace=False)
        num, ana = [], []
        for k in flat_idx:
            i = np.unravel_index(k, arr.shape)
            old = arr[i]
            arr[i] = old + eps
            fp, sp = f()
            arr[i] = old - eps
            fm, sm = f()
            arr[i] = old
            if not (np.array_equal(sp, base_sig) and np.array_equal(sm, base_sig)):
                raise KinkCrossed(f"stencil crosses a kink at {i}")
            num.append((fp - fm) / (2 * eps))
            ana.append(grad[i])
        worst = max(worst, rel_error(np.array(ana), np.array(num)))
    return worst


def _retry(trial, rng, attempts=50):
    """Run ``trial(rng)``, redrawing inputs whenever a stencil straddles a kink."""
    for _ in range(attempts):
        try:
            return trial(rng)
        except KinkCrossed:
            continue
    raise RuntimeError("could not draw a kink-free test point")


# |grad| has a kink at zero that GRAD_EPS only rounds over a ~1e-3 scale, the same
# scale an eps=1e-3 stencil moves a Sobel response (by at most eps / 4). Draws
# with a predicted magnitude this close to zero count as straddling that kink.
ROUNDED_KINK = 0.02


def gradcheck_mixed_loss(rng, eps=FD_EPS, lam=1.0, shape=(8, 8, 1), max_coords=None):
    def trial(rng):
        pred = rng.random(shape)
        x0 = rng.random(shape)
        if lam > 0 and gradient_magnitude(pred).min() < ROUNDED_KINK:
            raise KinkCrossed("predicted gradient magnitude near zero")
        tx, ty = sobel(x0)
        target_mag = np.sqrt(tx * tx + ty * ty + GRAD_EPS)

        def f():
            gx, gy = sobel(pred)
            return mixed_loss(pred, x0, lam)[0], np.sqrt(gx * gx + gy * gy + GRAD_EPS) > target_mag

        return _sampled_fd(f, [pred], [mixed_loss(pred, x0, lam)[1]], rng, eps, max_coords)
    return _retry(trial, rng)


def gradcheck_conv(rng, eps=FD_EPS, shape=(2, 8, 8, 2), cout=3, max_coords=None):
    def trial(rng):
        x = rng.standard_normal(shape)
        w = rng.standard_normal((3, 3, shape[-1], cout))
        b = rng.standard_normal(cout)
        proj = rng.standard_normal(shape[:3] + (cout,))

        def f():
            return float((conv3x3_forward(x, w, b)[0] * proj).sum()), None

        _, cache = conv3x3_forward(x, w, b)
        dx, dw, db = conv3x3_backward(cache, proj, w)
        return _sampled_fd(f, [x, w, b], [dx, dw, db], rng, eps, max_coords)
    return _retry(trial, rng)


def gradcheck_leaky(rng, eps=FD_EPS, shape=(8, 8, 2), leak=0.2):
    def trial(rng):
        x = rng.standard_normal(shape)
        proj = rng.standard_normal(shape)

        def f():
            return float((leaky_relu_forward(x, leak)[0] * proj).sum()), x > 0

        _, cache = leaky_relu_forward(x, leak)
        return _sampled_fd(f, [x], [leaky_relu_backward(cache, proj, leak)], rng, eps, None)
    return _retry(trial, rng)


def gradcheck_network(rng, eps=FD_EPS, lam=0.0, size=8, max_coords=24):
    """Whole TinyNet (every parameter tensor and every input) chained into a loss.

    Between kinks the net is linear in any single parameter, so with the MSE
    loss (``lam=0``) central differences carry no truncation error; the
    perceptual term has its own check in :func:`gradcheck_mixed_loss`.
    """
    def trial(rng):
        m = TinyNet(1, "denoiser", 3, hidden=4, n_layers=3, dtype=np.float64).init(rng, 1.0)
        m.params["skip_gate"][...] = rng.uniform(0.2, 1.0, 3)
        m.params["time_bias"][...] = rng.normal(0, 0.1, m.params["time_bias"].shape)
        xs = [rng.random((2, size, size, 1)) for _ in range(3)]
        t = np.array([1, 3])
        target = rng.random((2, size, size, 1))

        def f():
            out, cache = m.forward_train(xs, t)
            pre = [c[1] > 0 for c in cache[0] if c[1] is not None]
            gx, gy = sobel(out)
            tx, ty = sobel(target)
            sig = np.concatenate([p.ravel() for p in pre] + [
                (np.sqrt(gx * gx + gy * gy + GRAD_EPS) > np.sqrt(tx * tx + ty * ty + GRAD_EPS)).ravel()])
            return mixed_loss(out, target, lam)[0], sig

        out, cache = m.forward_train(xs, t)
        grads, dins = m.backward(cache, mixed_loss(out, target, lam)[1])
        arrays = list(m.params.values()) + xs
        analytic = [grads[k] for k in m.params] + dins
        return _sampled_fd(f, arrays, analytic, rng, eps, max_coords)
    return _retry(trial, rng)


@check("denoiser")
def loss_gradient(seed, trials=10):
    rng = make_rng(seed, "verify:lossgrad")
    worst = max(gradcheck_mixed_loss(rng) for _ in range(trials))
    return _result(worst < 1e-4, max_rel_error=worst)


@check("denoiser")
def network_gradient(seed, trials=3):
    rng = make_rng(seed, "verify:netgrad")
    worst = max(max(gradcheck_conv(rng), gradcheck_leaky(rng), gradcheck_network(rng))
                for _ in range(trials))
    return _result(worst < 1e-4, max_rel_error=worst)


# -- analysis -----------------------------------------------------------------


@check("analysis")
def psnr_anchors(seed):
    a = np.full((4, 4, 1), 0.5)
    ok = psnr(a, a) == 99.0 and abs(psnr(a, a + 0.1) - 20.0) < 1e-9 \
        and abs(psnr(np.zeros_like(a), np.ones_like(a))) < 1e-12
    return _result(ok)


@check("analysis")
def moment_check_selftest(seed):
    rng = make_rng(seed, "verify:mcself")
    good = mc_moment_check(lambda n: rng.standard_normal(n), 0.0, 1.0, 1_000_000)
    bad = mc_moment_check(lambda n: rng.standard_normal(n), 0.5, 1.0, 1_000_000)
    return _result(good.passed and not bad.mean_ok)


GROUPS = ("core", "schedule", "uncertainty", "diffusion", "denoiser", "analysis")


def run_checks(seed: int = 0, groups=None, variance_scale: float = 1.0) -> list[dict]:
    """Run the registered checks, optionally restricted to ``groups``.

    ``variance_scale != 1`` deliberately corrupts every sampled variance; the
    statistical checks must then fail.
    """
    if groups:
        unknown = set(groups) - set(GROUPS)
        if unknown:
            raise ValueError(f"unknown check group(s): {sorted(unknown)}")
    results = []
    with diffusion.variance_fault(variance_scale):
        for group, name, fn in CHECKS:
            if groups and group not in groups:
                continue
            start = time.perf_counter()
            try:
                res = fn(seed)
            except Exception as exc:  # a crashing check is a failing check
                res = _result(False, error=f"{type(exc).__name__}: {exc}")
            res.update(name=name, group=group, seconds=round(time.perf_counter() - start, 3))
            results.append(res)
    return results
