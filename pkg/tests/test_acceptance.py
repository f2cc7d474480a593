"""Acceptance gate. Each test records one PASS/FAIL verdict line.

Training criteria run at desk scale (20 epochs per outer iteration, batch
size 100) and take roughly an hour in total on one core; they are marked
``slow``. Run only this gate with ``pytest tests/test_acceptance.py``.
"""
import math
import time

import numpy as np
import pytest

from dagaf import cli, graph, losses, semgen, trainer
from dagaf import diffcore as dc
from dagaf.diffcore import Tape
from dagaf.evalsuite import quality_report
from dagaf.graph import BinaryDag
from dagaf.models import fcm_forward, g_inverse_forward
from dagaf.semgen import NoiseSpec, SemFamily
from dagaf.trainer import TrainConfig

import gradcheck
from conftest import record
from test_graph import SACHS_EDGES, SACHS_NODES, edit_distance_bfs, h_by_eigenvalues
from test_losses import kld_oracle, mmd_oracle, mse_oracle

pytestmark = pytest.mark.acceptance

DESK = dict(epochs=20, batch_size=100, run_step2=False)
SEEDS = range(5)
D, N, DEGREE = 10, 5000, 3.0
# settings for the post-nonlinear assumption on sinh-warped data

_RUNS = {}


def benchmark_run(family, assumption, seed, **over):
    key = (family, assumption, seed, tuple(sorted(over.items())))
    if key not in _RUNS:
        dag, weights, data = cli.simulate_instance(SemFamily(family), D, N, DEGREE, NoiseSpec(), seed)
        cfg = TrainConfig(assumption=assumption, seed=seed, **{**DESK, **over})
        s1, report = trainer.fit_step1(data, cfg)
        metrics = graph.shd(graph.threshold(report.adjacency, cfg.threshold_tau), dag)
        _RUNS[key] = dict(shd=metrics.shd, report=report, step1=s1, cfg=cfg, data=data,
                          weights=weights, family=family)
    return _RUNS[key]


def _summary(shds):
    return f"SHD per seed {shds}, mean {np.mean(shds):.2f}"


# -- 1: gradients ----------------------------------------------------------------

FIT_TERMS = ("adv", "mse", "nll", "kld", "mmd", "mmd_unbiased")


def _generator_terms(s1, x, tape, names):
    """The requested generator-side loss terms, sharing one forward pass."""
    m = s1.model
    out = {}
    f_out = fcm_forward(m, x, tape) if set(names) - {"acyclicity", "l1_l2"} else None
    if set(names) & set(FIT_TERMS):
        fake = m.pnl.g_net.forward(f_out, tape) if m.pnl is not None else f_out
        real = tape.const(x)
        bw = losses.median_bandwidth(x)
        fit = {
            "adv": lambda: losses.wgan_generator_loss(s1.critic, fake, tape, np.random.default_rng(0)),
            "mse": lambda: losses.mse_loss(real, fake),
            "nll": lambda: losses.nll_loss(real, fake),
            "kld": lambda: losses.kld_loss(fake),
            "mmd": lambda: losses.mmd_loss(real, fake, bw),
            "mmd_unbiased": lambda: losses.mmd_loss(real, fake, bw, unbiased=True),
        }
        out.update({n: fit[n]() for n in names if n in fit})
    if "acyclicity" in names or "l1_l2" in names:
        w0 = m.first_layer_var(tape)
        h = graph.trace_expm_minus_d(dc.vsum(dc.square(w0), axis=1))
        out["acyclicity"] = losses.lagrangian_terms(h, 0.7, 30.0)
        out["l1_l2"] = s1.penalty(tape, w0)
    if "pnl" in names:
        latent = dc.col_standardize(g_inverse_forward(m, x, tape))
        out["pnl"] = losses.pnl_loss(latent, f_out)
    return {n: out[n] for n in names}


def _term_errors(build, groups, eps=1e-6):
    """Per-term max relative error of backward against central differences.

    ``groups`` pairs parameter lists with the terms that read them; a term
    that does not read a parameter has an exactly zero difference quotient,
    so it is not re-evaluated for that parameter.
    """
    names = sorted({n for _, terms in groups for n in terms})
    params = [p for ps, _ in groups for p in ps]
    analytic = {}
    for name in names:
        for p in params:
            p.zero_grad()
        tape = Tape()
        tape.backward(build(tape, [name])[name])
        analytic[name] = [p.grad.copy() for p in params]
    numeric = {name: [np.zeros_like(p.value) for p in params] for name in names}
    k = 0
    for ps, terms in groups:
        for p in ps:
            flat = p.value.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                up = {n: float(v.value) for n, v in build(Tape(), terms).items()}
                flat[i] = orig - eps
                down = {n: float(v.value) for n, v in build(Tape(), terms).items()}
                flat[i] = orig
                for n in terms:
                    numeric[n][k].reshape(-1)[i] = (up[n] - down[n]) / (2 * eps)
            k += 1
    return {n: gradcheck.max_rel_error(analytic[n], numeric[n]) for n in names}


def test_criterion_1_gradients_match_finite_differences():
    started = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst, failures = 0.0, []
    for case in range(50):
        d, n = int(rng.choice([2, 3, 4])), int(rng.choice([4, 8]))
        assumption = "pnl" if case % 5 == 0 else "anm"
        cfg = TrainConfig(assumption=assumption, latent_h=2, critic_hidden=(4, 3), seed=case)
        s1 = trainer.Step1(d, cfg, np.random.default_rng(case))
        x = rng.normal(size=(n, d))
        m = s1.model
        first, rest = m.first_layer_params(), [p for p in m.fcm_params()
                                               if all(p is not q for q in m.first_layer_params())]
        fit = list(FIT_TERMS)
        groups = [(first, fit + ["acyclicity", "l1_l2"]), (rest, fit + ["l1_l2"])]
        if m.pnl is not None:
            groups[0][1].append("pnl")
            groups[1][1].append("pnl")
            groups += [(m.pnl.g_net.params(), fit), (m.pnl.g_inv.params(), ["pnl"])]
        errors = _term_errors(lambda t, names: _generator_terms(s1, x, t, names), groups)
        fake = fcm_forward(s1.model, x, Tape()).value
        errors["critic"] = gradcheck.check(
            lambda t: losses.wgan_gp_critic_loss(s1.critic, x, fake, 10.0,
                                                 np.random.default_rng(case), t),
            s1.critic.params())
        for name, err in errors.items():
            worst = max(worst, err)
            if not err <= 1e-4:
                failures.append(f"case {case} {name}: {err:.2e}")
    elapsed = time.perf_counter() - started
    ok = not failures and elapsed < 60
    record(1, "gradients", ok, f"worst rel err {worst:.2e}, {elapsed:.0f}s"
           + (f", failing: {failures[:3]}" if failures else ""))
    assert not failures
    assert elapsed < 60


# -- 2: oracles ------------------------------------------------------------------

def _val(var):
    return float(var.value)


def test_criterion_2_oracle_equivalence():
    started = time.perf_counter()
    rng = np.random.default_rng(7)
    worst = {k: 0.0 for k in ("mmd", "mse", "kld", "pnl", "h", "shd")}
    for _ in range(100):
        n, d = int(rng.integers(2, 7)), int(rng.integers(1, 5))
        x, y = rng.normal(size=(2, n, d))
        bw = float(rng.uniform(0.3, 3.0))
        t = Tape()
        rel = lambda got, ref: abs(got - ref) / max(1.0, abs(ref))  # noqa: E731
        worst["mmd"] = max(worst["mmd"], rel(_val(losses.mmd_loss(t.const(x), t.const(y), bw)),
                                             mmd_oracle(x, y, bw)))
        worst["mse"] = max(worst["mse"], rel(_val(losses.mse_loss(t.const(x), t.const(y))),
                                             mse_oracle(x, y)))
        worst["kld"] = max(worst["kld"], rel(_val(losses.kld_loss(t.const(y))), kld_oracle(y)))
        worst["pnl"] = max(worst["pnl"], rel(_val(losses.pnl_loss(t.const(x), t.const(y))),
                                             mse_oracle(x, y)))
        k = int(rng.integers(2, 7))
        a = rng.normal(size=(k, k)) * 0.5
        worst["h"] = max(worst["h"], rel(graph.acyclicity_h(a), h_by_eigenvalues(a)))
        g = int(rng.integers(2, 4))
        pa = {(i, j) for i in range(g) for j in range(g) if i != j and rng.random() < 0.4}
        pb = {(i, j) for i in range(g) for j in range(g) if i != j and rng.random() < 0.4}
        got = graph.shd(BinaryDag(g, pa), BinaryDag(g, pb)).shd
        worst["shd"] = max(worst["shd"], abs(got - edit_distance_bfs(pa, pb, g)))
    elapsed = time.perf_counter() - started
    ok = all(v <= 1e-12 for v in worst.values()) and elapsed < 60
    record(2, "oracles", ok, ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + f", {elapsed:.0f}s")
    assert all(v <= 1e-12 for v in worst.values()), worst
    assert elapsed < 60


# -- 3-5: structure benchmarks ---------------------------------------------------

@pytest.mark.slow
def test_criterion_3_linear_benchmark():
    started = time.perf_counter()
    shds = [benchmark_run("linear", "anm", s)["shd"] for s in SEEDS]
    elapsed = time.perf_counter() - started
    ok = np.mean(shds) <= 5
    record(3, "linear SHD <= 5", ok, f"{_summary(shds)}, {elapsed / 60:.1f} min")
    assert ok


@pytest.mark.slow
def test_criterion_4_nonlinear_benchmark():
    started = time.perf_counter()
    shds = [benchmark_run("non-linear-1", "anm", s)["shd"] for s in SEEDS]
    elapsed = time.perf_counter() - started
    ok = np.mean(shds) <= 8
    record(4, "non-linear-1 SHD <= 8", ok, f"{_summary(shds)}, {elapsed / 60:.1f} min")
    assert ok


@pytest.mark.slow
def test_criterion_5_post_nonlinear_benchmark():
    started = time.perf_counter()
    pnl = [benchmark_run("post-non-linear-1", "pnl", s)["shd"] for s in SEEDS]
    anm = [benchmark_run("post-non-linear-1", "anm", s)["shd"] for s in SEEDS]
    elapsed = time.perf_counter() - started
    ok = np.mean(pnl) <= 12 and np.mean(pnl) < np.mean(anm)
    record(5, "post-non-linear-1 PNL SHD <= 12 and < ANM", ok,
           f"PNL {_summary(pnl)}; ANM {_summary(anm)}, {elapsed / 60:.1f} min")
    assert np.mean(pnl) <= 12
    assert np.mean(pnl) < np.mean(anm)


# -- 6: constraint satisfaction --------------------------------------------------

@pytest.mark.slow
def test_criterion_6_converged_runs_are_acyclic():
    runs = [benchmark_run(fam, assumption, s)
            for fam, assumption in (("linear", "anm"), ("non-linear-1", "anm"),
                                    ("post-non-linear-1", "pnl"), ("post-non-linear-1", "anm"))
            for s in SEEDS]
    converged = [r for r in runs if r["report"].converged]
    bad = [r["report"].h for r in converged
           if not (r["report"].h <= 1e-8 and graph.acyclicity_h(r["report"].adjacency) <= 1e-8)]
    rng = np.random.default_rng(99)
    er_nonzero = 0
    for _ in range(1000):
        d = int(rng.integers(2, 30))
        _, w = graph.sample_er_dag(d, min(DEGREE, d - 1.0), rng)
        er_nonzero += graph.acyclicity_h(w) != 0.0
    ok = not bad and er_nonzero == 0 and len(runs) == 20
    record(6, "h <= 1e-8 when converged; ER h = 0", ok,
           f"{len(converged)}/{len(runs)} runs converged, max h "
           f"{max((r['report'].h for r in converged), default=float('nan')):.1e}, "
           f"{er_nonzero} ER samples with h != 0")
    assert not bad
    assert er_nonzero == 0


# -- 7: synthesis fidelity -------------------------------------------------------

STEP2_EPOCHS = 300


@pytest.mark.slow
def test_criterion_7_synthesis_fidelity():
    run = None
    tried = []
    for seed in range(15):
        cand = benchmark_run("linear", "anm", seed)
        tried.append(cand["shd"])
        if cand["shd"] == 0:
            run = cand
            break
    if run is None:
        record(7, "synthesis fidelity", False, f"no seed reached SHD 0: {tried}")
        pytest.fail(f"no Step-1 run reached SHD 0 in seeds 0-14: {tried}")
    # Step 2 is one phase, so it keeps the default phase length
    cfg = run["cfg"].replace(step2_epochs=STEP2_EPOCHS)
    s2, _ = trainer.fit_step2(run["step1"].model, run["data"], cfg,
                              np.random.default_rng(cfg.seed + 1))
    synth = trainer.synthesize(s2.model, N, np.random.default_rng(cfg.seed + 2), s2.levels)
    held_out = semgen.generate(run["weights"], "linear", NoiseSpec(), N,
                               np.random.default_rng(10_000 + cfg.seed))
    rep = quality_report(held_out.values, synth.values)
    ok = rep.corr_frobenius_diff < 0.5 and abs(rep.mmd_stat) < 0.05
    record(7, "synthesis fidelity", ok,
           f"seed {cfg.seed}, corr diff {rep.corr_frobenius_diff:.3f}, mmd {rep.mmd_stat:.4f}")
    assert rep.corr_frobenius_diff < 0.5
    assert abs(rep.mmd_stat) < 0.05


# -- 8: determinism --------------------------------------------------------------

def test_criterion_8_determinism(tmp_path):
    sim = tmp_path / "sim"
    assert cli.main(["-q", "simulate", "--family", "non-linear-1", "--d", "5", "--n", "400",
                     "--degree", "2", "--seed", "3", "--out", str(sim)]) == 0
    fast = ["--set", "epochs=3", "--set", "k_max_iter=3", "--set", "batch_size=100", "--seed", "5"]
    outputs = []
    for run in ("a", "b"):
        disc, syn = tmp_path / f"disc_{run}", tmp_path / f"syn_{run}"
        assert cli.main(["-q", "discover", "--data", str(sim / "data.csv"), "--out", str(disc),
                         *fast]) == 0
        assert cli.main(["-q", "synthesize", "--data", str(sim / "data.csv"), "--checkpoint",
                         str(disc / "checkpoint"), "--n", "300", "--out", str(syn), *fast]) == 0
        outputs.append(((disc / "adjacency.csv").read_bytes(), (syn / "synthetic.csv").read_bytes()))
    same_adj = outputs[0][0] == outputs[1][0]
    same_syn = outputs[0][1] == outputs[1][1]
    record(8, "determinism", same_adj and same_syn,
           f"adjacency identical: {same_adj}, synthetic identical: {same_syn}")
    assert same_adj and same_syn


# -- 9: full-scale specs ---------------------------------------------------------

def _write_sachs_fixture(folder):
    idx = {name: i for i, name in enumerate(SACHS_NODES)}
    dag = BinaryDag(len(SACHS_NODES), frozenset((idx[p], idx[c]) for p, c in SACHS_EDGES))
    rng = np.random.default_rng(11)
    w = dag.to_matrix() * rng.uniform(0.5, 2.0, size=(11, 11)) * rng.choice([-1, 1], size=(11, 11))
    data = semgen.generate(w, "non-linear-1", NoiseSpec(), 300, rng)
    semgen.write_csv(semgen.Dataset(data.values, SACHS_NODES), folder / "sachs.csv")
    graph.write_edge_list(dag, folder / "sachs_truth.csv")


def test_criterion_9_full_scale_specs_emit_rows(tmp_path):
    _write_sachs_fixture(tmp_path)
    tiny = "epochs = 1\nk_max_iter = 1\nbatch_size = 100\nlatent_h = 2\ncritic_hidden = 8,8\n"
    (tmp_path / "full.ini").write_text(
        f"[er50]\nfamily = linear\nd = 50\nn = 200\ndegree = 3\nseeds = 0\n{tiny}\n"
        f"[er100]\nfamily = non-linear-1\nd = 100\nn = 200\ndegree = 3\nseeds = 0\n{tiny}\n"
        f"[sachs]\ndata = sachs.csv\ntruth = sachs_truth.csv\nseeds = 0 1\n{tiny}"
    )
    out = tmp_path / "rows.csv"
    code = cli.main(["-q", "benchmark", "--spec", str(tmp_path / "full.ini"), "--out", str(out),
                     "--jobs", "1"])
    rows = [r.split(",") for r in out.read_text().splitlines()] if out.exists() else []
    header_ok = bool(rows) and rows[0] == cli.BenchmarkRow.HEADER
    body = [dict(zip(cli.BenchmarkRow.HEADER, r)) for r in rows[1:]]
    dims = [(r["name"], r["d"]) for r in body]
    clean = all(r["error"] == "" and math.isfinite(float(r["mean_shd"])) for r in body)
    ok = code == 0 and header_ok and dims == [("er50", "50"), ("er100", "100"), ("sachs", "11")] and clean
    record(9, "full-scale specs accepted", ok,
           "; ".join(f"{r['name']} d={r['d']} SHD {r['mean_shd']}" for r in body))
    assert ok
