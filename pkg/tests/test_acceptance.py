"""Acceptance gate: one test per criterion, each recording a PASS/FAIL line.

The lines are printed in the "acceptance criteria" section of the pytest
terminal summary.  Criteria 4-7 train real models on the synthetic
benchmark and take several minutes each on one core.
"""
import functools
import json
import math
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from ipmssl.cli import main
from ipmssl.config import (LAYER_NORM_VARIANTS, ArchSpec, ConstraintTarget, CriticFormulation, NormSpec,
                           parse_config, validate_config)
from ipmssl.constraints import ConstraintState, omega_fisher, omega_gp, omega_sobolev, sample_gp_interpolates
from ipmssl.critic import Critic, classifier_probs, entropy_real_critic
from ipmssl.evaluate import METRICS_FIELDS, misclassification_rate
from ipmssl.nn import (DTYPE, NORM_EPS, FeatureExtractor, Generator, LayerNorm, batch_norm, input_gradients,
                       layer_norm)
from ipmssl.training import (Batch, critic_objective, cross_entropy, generator_objective, supervised_baseline,
                             train)
from oracles import (batch_norm_loops, central_difference, cross_entropy_naive, fd_param_check,
                     layer_norm_loops, misclassification_loops, softmax_naive)

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
SEEDS = range(5)
FULL, REAL, FAKE = ConstraintTarget.FULL, ConstraintTarget.REAL, ConstraintTarget.FAKE


def t(a):
    return torch.tensor(np.asarray(a), dtype=DTYPE)


def benchmark(**changes) -> dict:
    raw = json.loads((CONFIGS / "synthetic_fisher_kp1.json").read_text())
    raw.update(changes)
    return raw


@functools.lru_cache(maxsize=None)
def _run_cached(raw_json: str) -> dict:
    cfg = parse_config(json.loads(raw_json))
    assert validate_config(cfg).ok
    res = supervised_baseline(cfg) if cfg.mode == "supervised" else train(cfg)
    return {"test_error": res.test_error, "lab_ce": res.final_lab_ce, "moments": res.final_moments}


def run(raw: dict, seed: int) -> dict:
    return _run_cached(json.dumps({**raw, "seed": seed}, sort_keys=True))


# 1. gradient correctness ---------------------------------------------------------------------------


def _scaled(module, s):
    with torch.no_grad():
        for p in module.parameters():
            p.mul_(s)
    return module


def _gradient_cases():
    rng = np.random.default_rng(0)
    cases = []
    mlp_norms = [NormSpec("none"), NormSpec("batch"), NormSpec("layer", "singleton", "channel"),
                 NormSpec("layer", "singleton", "pixel")]
    for norm in mlp_norms:
        torch.manual_seed(0)
        phi = _scaled(FeatureExtractor(ArchSpec(hidden=(6,), feature_dim=4), norm, (3,)), 20.0)
        x, r = t(rng.normal(size=(5, 3))), t(rng.normal(size=(5, 4)))
        cases.append((f"dense+{norm}", phi, lambda phi=phi, x=x, r=r: (phi(x) * r).sum()))
    for norm in [NormSpec("none"), NormSpec("batch"), *LAYER_NORM_VARIANTS]:
        torch.manual_seed(0)
        phi = _scaled(FeatureExtractor(ArchSpec(kind="conv", channels=(3,), feature_dim=4), norm, (2, 4, 4)), 10.0)
        x, r = t(rng.normal(size=(3, 2, 4, 4))), t(rng.normal(size=(3, 4)))
        cases.append((f"conv+{norm}", phi, lambda phi=phi, x=x, r=r: (phi(x) * r).sum()))
    torch.manual_seed(0)
    gen = _scaled(Generator(3, (5,), (4,), "tanh"), 10.0)
    z, r = t(rng.normal(size=(4, 3))), t(rng.normal(size=(4, 4)))
    cases.append(("generator", gen, lambda gen=gen, z=z, r=r: (gen(z) * r).sum()))

    for form in CriticFormulation:
        torch.manual_seed(1)
        critic = _scaled(Critic(ArchSpec(hidden=(6,), feature_dim=4), NormSpec(), (3,), 3, form), 20.0)
        x, r = t(rng.normal(size=(5, 3))), t(rng.normal(size=5))
        heads = [FULL] if form == CriticFormulation.PLAIN else [REAL, FAKE]
        for head in heads:
            cases.append((f"head {head.value} ({form.value})", critic,
                          lambda c=critic, x=x, r=r, h=head: (c(x).component(h) * r).sum()))

    cfg = parse_config({"ipm": "fisher", "dataset": {"n_classes": 3, "input_dim": 3},
                        "arch": {"hidden": [6], "feature_dim": 4}, "n_labeled": 9})
    torch.manual_seed(2)
    critic = _scaled(Critic(cfg.arch, cfg.norm, (3,), 3, cfg.formulation), 20.0)
    gen = _scaled(Generator(2, (5,), (3,)), 10.0)
    batch = Batch(t(rng.normal(size=(3, 3))), torch.tensor([0, 1, 2]), t(rng.normal(size=(4, 3))), None)
    fake = t(rng.normal(size=(4, 3)))
    cs = ConstraintState(ConstraintState.from_config(cfg).active, lambda_f=0.3, rho_f=0.5)
    cases.append(("objective critic", critic, lambda: critic_objective(critic, fake, batch, cfg, cs)[0]))
    zz = t(rng.normal(size=(6, 2)))
    cases.append(("objective generator", gen, lambda: generator_objective(critic, gen, zz)))
    cases.append(("objective cross-entropy", critic,
                  lambda: cross_entropy(critic(batch.x_lab).logits, batch.y_lab)))

    x0 = t(rng.normal(size=(6, 3)))
    interp = sample_gp_interpolates(x0, fake.repeat(2, 1)[:6], torch.Generator().manual_seed(0))

    def penalty(kind, target, points):
        x = points.clone().requires_grad_(kind != "fisher")
        h = critic(x).component(target)
        if kind == "fisher":
            return omega_fisher(h)
        g = input_gradients(h, x)
        return omega_sobolev((g ** 2).sum(1)) if kind == "sobolev" else omega_gp(g.norm(dim=1))

    for kind, points in (("fisher", x0), ("sobolev", x0), ("gp", interp)):
        for target in (FULL, FAKE):
            cases.append((f"penalty {kind} on {target.value}", critic,
                          lambda k=kind, tg=target, p=points: penalty(k, tg, p)))
    return cases


def test_criterion_1_gradient_correctness(report_criterion):
    start = time.perf_counter()
    worst, failures = 0.0, []
    cases = _gradient_cases()
    for name, module, fn in cases:
        try:
            worst = max(worst, fd_param_check(module, fn, n_coords=100, h=1e-5, tol=1e-4))
        except AssertionError as exc:
            failures.append(f"{name}: {exc}")
    elapsed = time.perf_counter() - start
    ok = not failures and elapsed < 60
    detail = f"{len(cases)} checks, worst rel err {worst:.2e}, {elapsed:.1f}s"
    if failures:
        detail += f"; {failures}"
    assert report_criterion(1, "finite-difference gradients", ok, detail), detail


# 2. oracle equivalence -----------------------------------------------------------------------------


def _rel(a, b):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.max(np.abs(a - b) / np.maximum(np.abs(b), 1e-300)))


def test_criterion_2_oracle_equivalence(report_criterion):
    rng = np.random.default_rng(11)
    worst = {}

    def note(key, err):
        worst[key] = max(worst.get(key, 0.0), err)

    for trial in range(10):
        n = int(rng.integers(2, 9))
        x = rng.normal(size=(n, 3, 2, 2))
        for norm in LAYER_NORM_VARIANTS:
            shape = (3, 1, 1) if norm.params == "channel" else (1, 2, 2)
            g, b = rng.normal(size=shape), rng.normal(size=shape)
            got = layer_norm(t(x), t(g), t(b), norm.stats).numpy()
            note("layer norm", _rel(got, layer_norm_loops(x.tolist(), g.tolist(), b.tolist(), norm.stats, NORM_EPS)))
        g, b = rng.normal(size=3), rng.normal(size=3)
        note("batch norm", _rel(batch_norm(t(x), t(g), t(b)).numpy(),
                                batch_norm_loops(x.tolist(), g.tolist(), b.tolist(), NORM_EPS)))
        z = rng.normal(size=(n, 5)) * 4
        y = rng.integers(0, 5, size=n)
        note("softmax", _rel(classifier_probs(t(z)).numpy(), [softmax_naive(row) for row in z.tolist()]))
        want = sum(cross_entropy_naive(row, int(c)) for row, c in zip(z.tolist(), y)) / n
        note("cross entropy", _rel(float(cross_entropy(t(z), y)), want))
        coarse = rng.integers(0, 3, size=(n, 4)).astype(float)
        note("misclassification", abs(misclassification_rate(coarse, y % 4) -
                                      misclassification_loops(coarse.tolist(), (y % 4).tolist())))

        torch.manual_seed(trial)
        critic = _scaled(Critic(ArchSpec(hidden=(5,), feature_dim=4), NormSpec("layer", "singleton", "channel"),
                                (3,), 3), 20.0)
        pts = rng.normal(size=(n, 3)).tolist()
        for target in (FULL, REAL, FAKE):
            xx = t(pts).requires_grad_(True)
            h = critic(xx).component(target)
            grads = input_gradients(h, xx).detach()

            def h_of(p, target=target):
                with torch.no_grad():
                    return float(critic(t([p])).component(target)[0])

            hs = [h_of(p) for p in pts]
            sq = [sum(v * v for v in central_difference(h_of, p)) for p in pts]
            note("omega fisher", _rel(float(omega_fisher(h.detach())), sum(v * v for v in hs) / n))
            note("omega sobolev", _rel(float(omega_sobolev((grads ** 2).sum(1))), sum(sq) / n))
            note("omega gp", _rel(float(omega_gp(grads.norm(dim=1))), sum((1 - math.sqrt(s)) ** 2 for s in sq) / n))

    tol = {"omega sobolev": 1e-6, "omega gp": 1e-6, "misclassification": 0.0}
    bad = {k: v for k, v in worst.items() if v > tol.get(k, 1e-12)}
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    assert report_criterion(2, "scalar-loop oracles", not bad, detail), bad


# 3. shift invariance -------------------------------------------------------------------------------


def test_criterion_3_shift_invariance(report_criterion):
    rng = np.random.default_rng(3)
    worst_h, min_plus_move, ok_plus = 0.0, math.inf, True
    for _ in range(1000):
        k = int(rng.integers(2, 13))
        z = t(rng.uniform(-30, 30, size=k))
        c = float(rng.choice([-1, 1]) * rng.uniform(1e-3, 1e3))
        worst_h = max(worst_h, abs(float(entropy_real_critic(z + c) - entropy_real_critic(z))))
        p0, p1 = classifier_probs(z), classifier_probs(z + c)
        move = float((p1 * (z + c)).sum() - (p0 * z).sum())
        min_plus_move = min(min_plus_move, abs(move))
        ok_plus &= abs(move) > 1e-9
    ok = worst_h <= 1e-9 and ok_plus
    detail = f"entropy form max |shift change| {worst_h:.1e}; plain real head min |change| {min_plus_move:.1e}"
    assert report_criterion(3, "shift invariance of the entropy real head", ok, detail), detail


# 4. constraint convergence -------------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_4_constraint_convergence(report_criterion):
    raw = json.loads((CONFIGS / "synthetic_k4_fisher_defaults.json").read_text())
    # 1360 unlabeled / 64 = 21 critic steps per epoch; 48 epochs give 504 generator steps
    raw["hyper"] = {**raw.get("hyper", {}), "epochs": 48}
    cfg = parse_config(raw)
    assert cfg.hyper.rho_f == 1e-7
    start = time.perf_counter()
    a = train(cfg)
    elapsed = time.perf_counter() - start
    b = train(cfg)
    rows = a.metrics[:500]
    assert len(rows) == 500
    gap = float(np.mean([abs(r.omega_f_hat - 1.0) for r in rows[-50:]]))
    bitwise = a.lambda_f_trace == b.lambda_f_trace
    ok = gap <= 0.1 and bitwise and elapsed < 300
    detail = (f"mean |omega_F - 1| over steps 451-500 = {gap:.3g} (limit 0.1), final lambda_F "
              f"{rows[-1].lambda_f:.3g}, lambda_F trace bitwise-equal across runs: {bitwise}, {elapsed:.0f}s/run")
    assert report_criterion(4, "Fisher constraint convergence at default rho_F", ok, detail), detail


# 5. K+1 beats plain, SSL beats supervised ----------------------------------------------------------


@pytest.mark.slow
def test_criterion_5_k_plus_one_beats_plain(report_criterion):
    kp1 = [run(benchmark(), s)["test_error"] for s in SEEDS]
    plain = [run(benchmark(formulation="plain"), s)["test_error"] for s in SEEDS]
    sup = [run(benchmark(mode="supervised"), s)["test_error"] for s in SEEDS]
    m_k, m_p, m_s = np.mean(kp1), np.mean(plain), np.mean(sup)
    gaps = sum(s > k for s, k in zip(sup, kp1))
    ok = m_k <= m_p and m_p <= m_s and m_k <= m_s and gaps >= 4
    detail = (f"test error K+1 {m_k:.4f}, plain {m_p:.4f}, supervised {m_s:.4f}; "
              f"K+1 beats supervised in {gaps}/5 seeds; per seed K+1 {np.round(kp1, 4).tolist()}, "
              f"plain {np.round(plain, 4).tolist()}, supervised {np.round(sup, 4).tolist()}")
    assert report_criterion(5, "K+1 <= plain <= supervised", ok, detail), detail


# 6. gradient penalty placement ---------------------------------------------------------------------


def _gp_grad_into_S(target):
    torch.manual_seed(0)
    critic = Critic(ArchSpec(hidden=(8,), feature_dim=4), NormSpec(), (2,), 3)
    rng = np.random.default_rng(0)
    x = sample_gp_interpolates(t(rng.normal(size=(6, 2))), t(rng.normal(size=(6, 2))),
                               torch.Generator().manual_seed(1)).requires_grad_(True)
    pen = omega_gp(input_gradients(critic(x).component(target), x).norm(dim=1))
    (d,) = torch.autograd.grad(pen, critic.S, allow_unused=True, materialize_grads=True)
    return d


@pytest.mark.slow
def test_criterion_6_gp_placement(report_criterion):
    full, fake = _gp_grad_into_S(FULL), _gp_grad_into_S(FAKE)
    mechanism = float(full.abs().max()) > 0 and torch.equal(fake, torch.zeros_like(fake))
    gp_f = [run(benchmark(ipm="wgan_gp", placements=[["gp", "f"]]), s) for s in SEEDS]
    gp_m = [run(benchmark(ipm="wgan_gp", placements=[["gp", "f_minus"]]), s) for s in SEEDS]
    ce_f, ce_m = [r["lab_ce"] for r in gp_f], [r["lab_ce"] for r in gp_m]
    wins = sum(a > b for a, b in zip(ce_f, ce_m))
    ok = mechanism and wins >= 4
    detail = (f"penalty grad into S: |.|max {float(full.abs().max()):.2e} on f, exactly zero on f_minus: "
              f"{mechanism}; labeled CE gp(f) {np.round(ce_f, 3).tolist()} vs gp(f_minus) "
              f"{np.round(ce_m, 3).tolist()}: gp(f) higher in {wins}/5 seeds; test error gp(f) "
              f"{np.mean([r['test_error'] for r in gp_f]):.4f}, gp(f_minus) "
              f"{np.mean([r['test_error'] for r in gp_m]):.4f}")
    assert report_criterion(6, "GP placement: mechanism and underfitting signature", ok, detail), detail


# 7. constraint on f_minus only ---------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_7_fake_only_fails(report_criterion):
    only_fake = [run(benchmark(placements=[["fisher", "f_minus"]]), s) for s in SEEDS]
    on_f = [run(benchmark(), s) for s in SEEDS]
    moments = [r["moments"]["f_plus"] for r in only_fake]
    blown = sum(m > 10.0 for m in moments)
    err_m, err_f = np.mean([r["test_error"] for r in only_fake]), np.mean([r["test_error"] for r in on_f])
    ok = blown >= 4 and err_m > err_f
    detail = (f"E[f_plus^2] under fisher(f_minus): {[f'{m:.3g}' for m in moments]} (>10 in {blown}/5); "
              f"test error fisher(f_minus) {err_m:.4f} vs fisher(f) {err_f:.4f}")
    assert report_criterion(7, "f_minus-only constraint leaves f_plus unbounded", ok, detail), detail


# 8. normalization plumbing -------------------------------------------------------------------------


def test_criterion_8_normalization_plumbing(report_criterion, tmp_path):
    x = t(np.random.default_rng(0).normal(size=(4, 3, 8, 8)))
    expected = {("singleton", "channel"): ((4, 1, 1, 1), (3, 1, 1)),
                ("singleton", "pixel"): ((4, 1, 1, 1), (1, 8, 8)),
                ("channel", "channel"): ((4, 3, 1, 1), (3, 1, 1)),
                ("channel", "pixel"): ((4, 3, 1, 1), (1, 8, 8))}
    shapes_ok = True
    for norm in LAYER_NORM_VARIANTS:
        ln = LayerNorm(3, 8, 8, norm.stats, norm.params)
        dims = (1, 2, 3) if norm.stats == "singleton" else (2, 3)
        stat, param = expected[(norm.stats, norm.params)]
        shapes_ok &= tuple(x.mean(dim=dims, keepdim=True).shape) == stat
        shapes_ok &= tuple(ln.g.shape) == param and tuple(ln.b.shape) == param and ln(x).shape == x.shape
    cfg_path = tmp_path / "bn.json"
    cfg_path.write_text(json.dumps(benchmark(norm="batch", hyper={"epochs": 5, "rho_f": 1e-2})))
    bn_runs = main(["run", "--config", str(cfg_path), "--out", str(tmp_path / "bn")]) == 0
    rejected = []
    for ipm, placements in (("sobolev", [["sobolev", "f"]]), ("wgan_gp", [["gp", "f_minus"]])):
        rep = validate_config(parse_config(benchmark(ipm=ipm, placements=placements, norm="batch")))
        rejected.append(any("BN incompatible" in e for e in rep.errors))
    ok = shapes_ok and bn_runs and all(rejected)
    detail = f"LN shapes match: {shapes_ok}; BN+Fisher run exit 0: {bn_runs}; BN+Sobolev/GP rejected: {rejected}"
    assert report_criterion(8, "normalization variants", ok, detail), detail


# 9. determinism and CLI contract -------------------------------------------------------------------


def test_criterion_9_cli_contract(report_criterion, tmp_path, capsys):
    cfg = str(CONFIGS / "synthetic_fisher_kp1.json")
    codes = [main(["run", "--config", cfg, "--out", str(tmp_path / d), "--seed", "7",
                   "--override", "hyper.epochs=3"]) for d in ("a", "b")]
    same = (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()
    zero = main(["run", "--config", cfg, "--out", str(tmp_path / "z"), "--override", "hyper.epochs=0"])
    header_only = (tmp_path / "z" / "metrics.csv").read_text() == ",".join(METRICS_FIELDS) + "\n"
    capsys.readouterr()
    bad = main(["run", "--config", cfg, "--out", str(tmp_path / "x"), "--override", "norm=batch",
                "--override", "ipm=sobolev", "--override", 'placements=[["sobolev","f"]]'])
    err = capsys.readouterr().err
    named = "BN incompatible with gradient-norm constraint" in err
    ok = codes == [0, 0] and same and zero == 0 and header_only and bad == 2 and named
    detail = (f"repeat runs exit {codes}, metrics.csv bitwise equal: {same}; epochs=0 exit {zero}, "
              f"header only: {header_only}; BN+Sobolev exit {bad}, reason named: {named}")
    assert report_criterion(9, "determinism and CLI exit codes", ok, detail), detail
