"""The ten acceptance checks, each at its stated tolerance.

Every test prints one PASS/FAIL line; the lines are repeated in the pytest
terminal summary.
"""
import time

import numpy as np
import pytest

from milp_oracle import enumerate_milp, random_milp
from oracles import active_set_qp, random_qp
from robust_e2e import data as D, diffqp, forecaster as F, pipeline as P, qp as Q, training as T
from robust_e2e.attacks import AttackBudget, multistart_worst, pgd_input
from robust_e2e.certify import MilpStatus, certify_sample, ibp_bounds, input_box, solve_milp
from robust_e2e.cli import cmd_demo_prop1


def _rel(got, ref):
    got, ref = np.ravel(got), np.ravel(ref)
    scale = np.linalg.norm(ref)
    if scale < 1e-8:
        return float(np.linalg.norm(got - ref))
    return float(np.linalg.norm(got - ref) / scale)


# -- shared desk experiment -------------------------------------------------------

@pytest.fixture(scope="module")
def desk(loop3):
    """500-sample set; MSE pretraining, NAT, then AT-PARA and AT-INPUT from NAT."""
    ds = D.split(D.generate_synthetic(loop3, 500, seed=0), (0.8, 0.2), seed=0)
    ds = D.apply_normalization(ds, D.fit_normalization(ds))
    tr, te = ds.subset("train"), ds.subset("test")
    t0 = time.perf_counter()
    mse = T.train(T.TrainConfig(method="NAT", objective="mse", epochs=30, lr=1e-2), tr, loop3)
    nat = T.train(T.TrainConfig(method="NAT", epochs=10, lr=3e-3), tr, loop3, theta=mse.theta)
    para = T.train(T.TrainConfig(method="AT_PARA", alpha=0.5, budget=AttackBudget(0.0, 0.15, 7),
                                 epochs=10, lr=3e-3), tr, loop3, theta=nat.theta)
    inp = T.train(T.TrainConfig(method="AT_INPUT", alpha=0.5, budget=AttackBudget(0.05, 0.0, 7),
                                epochs=10, lr=3e-3), tr, loop3, theta=nat.theta)
    return {"train": tr, "test": te, "nat": nat.theta, "para": para.theta, "input": inp.theta,
            "seconds": time.perf_counter() - t0}


# -- 1 -------------------------------------------------------------------------------

def test_criterion_1_qp_oracle(acceptance_report):
    rng = np.random.default_rng(101)
    t0 = time.perf_counter()
    worst_z = worst_obj = worst_kkt = 0.0
    for _ in range(200):
        n, m = int(rng.integers(1, 5)), int(rng.integers(0, 7))
        Qm, q, A, G, b, C, H, d, p0 = random_qp(rng, n, m)
        prob = Q.AffineQp(Qm, q, A, G, b, C, H, d)
        sol = Q.solve(prob, p0)
        z, _, _, obj = active_set_qp(Qm, q, A, prob.rhs(p0)[0])
        worst_z = max(worst_z, float(np.max(np.abs(sol.z_star - z))))
        worst_obj = max(worst_obj, abs(prob.objective(sol.z_star) - obj))
        worst_kkt = max(worst_kkt, max(Q.kkt_residual(prob, p0, sol)))
    secs = time.perf_counter() - t0
    ok = worst_z <= 1e-6 and worst_obj <= 1e-6 and worst_kkt <= 1e-8 and secs < 10
    acceptance_report(1, ok, f"200 QPs: max |dz| {worst_z:.1e}, max |dobj| {worst_obj:.1e}, "
                             f"max KKT {worst_kkt:.1e}, {secs:.1f}s")
    assert ok


# -- 2 -------------------------------------------------------------------------------

def _qp_loss(parts, w, p):
    Qm = parts["Q"]
    prob = Q.AffineQp(0.5 * (Qm + Qm.T), parts["q"], parts["A"], parts["G"], parts["b"], parts["C"],
                      parts["H"], parts["d"])
    sol = Q.solve(prob, p)
    if not sol.optimal:
        raise RuntimeError("FD solve failed")
    return float(w @ sol.z_star)


def test_criterion_2_implicit_gradients(acceptance_report):
    rng = np.random.default_rng(202)
    t0 = time.perf_counter()
    h = 1e-5
    done = 0
    worst = 0.0
    worst_block = ""
    while done < 100:
        n, m = int(rng.integers(2, 5)), int(rng.integers(1, 7))
        pe = int(rng.integers(0, 2))
        Qm, q, A, G, b, C, H, d, p0 = random_qp(rng, n, m, pe, 2)
        prob = Q.AffineQp(Qm, q, A, G, b, C, H, d)
        sol = Q.solve(prob, p0)
        if (not sol.optimal or diffqp.degeneracy(prob, p0, sol)["degenerate"]
                or diffqp.complementarity_margin(prob, p0, sol) < 1e-3):
            continue
        w = rng.normal(size=n)
        g = diffqp.backward(prob, p0, sol, w)
        parts = {"Q": Qm, "q": q, "A": A, "G": G, "b": b, "C": C, "H": H, "d": d}
        blocks = {"Q": g.d_Q, "q": g.d_q, "A": g.d_A, "G": g.d_G, "b": g.d_b, "C": g.d_C, "H": g.d_H,
                  "d": g.d_d, "param": g.d_param}
        for name, got in blocks.items():
            base = p0 if name == "param" else parts[name]
            fd = np.zeros_like(base)
            for i in range(base.size):
                e = np.zeros_like(base)
                e.flat[i] = h
                if name == "param":
                    fd.flat[i] = (_qp_loss(parts, w, p0 + e) - _qp_loss(parts, w, p0 - e)) / (2 * h)
                else:
                    fd.flat[i] = (_qp_loss({**parts, name: base + e}, w, p0)
                                  - _qp_loss({**parts, name: base - e}, w, p0)) / (2 * h)
            err = _rel(got, fd)
            if err > worst:
                worst, worst_block = err, name
        done += 1
    secs = time.perf_counter() - t0
    ok = worst <= 1e-3 and secs < 60
    acceptance_report(2, ok, f"100 QPs, 9 gradient blocks: worst rel. err {worst:.1e} ({worst_block}), {secs:.1f}s")
    assert ok


# -- 3 -------------------------------------------------------------------------------

def _pipeline_degenerate(out):
    chain = out.tapes["chain"]
    for st, p, s in zip(out.tapes["stages"], chain.params, chain.solutions):
        if diffqp.degeneracy(st.qp, p, s)["degenerate"] or diffqp.complementarity_margin(st.qp, p, s) < 1e-6:
            return True
    return False


def test_criterion_3_pipeline_gradients(loop3, desk, acceptance_report):
    """Points around the trained NAT model, so forecasts are realistic and lines congest.

    Each point draws its own weight noise, sample and susceptance offset. The
    relative error is floored at 1e-6 (1 + |cost|): central differences of a
    cost of that size carry roundoff of about eps_mach |cost| / h, so smaller
    gradient entries are numerically zero.
    """
    te = desk["test"]
    rng = np.random.default_rng(303)
    phi0 = P.UnpredictableParams.nominal(loop3)
    h = 1e-6
    good = total = 0
    worst = []
    congested = 0
    for _ in range(500):
        nat = desk["nat"]
        theta = F.MlpParams([W + 0.05 * rng.normal(size=W.shape) for W in nat.weights],
                            [b + 0.05 * rng.normal(size=b.shape) for b in nat.biases], nat.terminal_relu)
        i = int(rng.integers(te.n_samples))
        x, y = te.features[i], te.loads[i]
        phi = phi0.perturbed(rng.uniform(-0.15, 0.15, loop3.n_line) * loop3.susceptance)
        out = P.infer(theta, x, y, phi, loop3)
        if _pipeline_degenerate(out):
            continue
        _, d_x, d_b = P.grads(theta, x, y, phi, loop3, out=out)
        cost = lambda xx, bb: P.infer(theta, xx, y, P.UnpredictableParams(bb, phi.nominal_b), loop3).cost  # noqa: E731
        fx = np.array([(cost(x + e, phi.b) - cost(x - e, phi.b)) / (2 * h) for e in h * np.eye(x.size)])
        fb = np.array([(cost(x, phi.b + e) - cost(x, phi.b - e)) / (2 * h) for e in h * np.eye(loop3.n_line)])
        floor = 1e-6 * (1 + abs(out.cost))
        err = max(np.linalg.norm(d_x - fx) / max(np.linalg.norm(fx), floor),
                  np.linalg.norm(d_b - fb) / max(np.linalg.norm(fb), floor))
        congested += np.linalg.norm(fb) > floor
        worst.append(err)
        good += err <= 1e-2
        total += 1
        if total == 50:
            break
    frac = good / max(total, 1)
    ok = total == 50 and frac >= 0.95
    acceptance_report(3, ok, f"{good}/{total} nondegenerate points within 1e-2 "
                             f"(max rel. err {max(worst):.1e}; {congested} with nonzero d_b)")
    assert ok


# -- 4 -------------------------------------------------------------------------------

def test_criterion_4_proposition_chain(acceptance_report, capsys):
    rng = np.random.default_rng(0)
    res = [P.demo_misformulation(P.random_toy(rng)) for _ in range(50)]
    holds = sum(r.chain_holds for r in res)
    strict = sum(r.strict for r in res)
    rc = cmd_demo_prop1(50, 0)
    capsys.readouterr()
    ok = holds == 50 and strict >= 1 and rc == 0
    acceptance_report(4, ok, f"chain holds on {holds}/50 toys, strict outer inequality on {strict}; "
                             f"demo-prop1 exit {rc}")
    assert ok


# -- 5 -------------------------------------------------------------------------------

def test_criterion_5_certification(loop3, desk, acceptance_report):
    theta = desk["nat"]
    assert theta.layer_sizes[1:3] == [8, 8]
    te = desk["test"].head(10)
    eps = 0.05
    t0 = time.perf_counter()
    worst_verify = 0.0
    below_pgd = 0
    not_opt = 0
    for i in range(te.n_samples):
        x, y = te.features[i], te.loads[i]
        pgd = multistart_worst(pgd_input, theta, x, y, None, loop3, AttackBudget(eps, 0.0, 30, 3),
                               mask=te.attack_mask)
        res = certify_sample(theta, loop3, x, y, eps, mask=te.attack_mask, time_limit=300)
        not_opt += res.status != MilpStatus.OPTIMAL
        worst_verify = max(worst_verify, abs(res.objective - res.verify_cost) / (1 + abs(res.objective)))
        below_pgd += res.objective < float(pgd.cost) - 1e-4 * (1 + abs(res.objective))
    secs = time.perf_counter() - t0
    ok = worst_verify <= 1e-4 and below_pgd == 0 and not_opt == 0 and secs < 600
    acceptance_report(5, ok, f"10 samples, eps={eps}: max |exact-verify|/(1+exact) {worst_verify:.1e}, "
                             f"{below_pgd} below PGD-30, {not_opt} not optimal, {secs:.0f}s")
    assert ok


# -- 6 -------------------------------------------------------------------------------

def test_criterion_6_milp_oracle(acceptance_report):
    rng = np.random.default_rng(606)
    worst = 0.0
    mismatched = 0
    for k in range(50):
        n_bin = 1 + k % 10
        model = random_milp(rng, n_bin, int(rng.integers(0, 4)), int(rng.integers(1, 6)))
        ref = enumerate_milp(model)
        res = solve_milp(model, gap_abs=1e-10, gap_rel=0.0)
        if ref is None:
            mismatched += res.status != MilpStatus.INFEASIBLE
            continue
        if res.status != MilpStatus.OPTIMAL:
            mismatched += 1
            continue
        worst = max(worst, abs(res.objective - ref))
    ok = mismatched == 0 and worst <= 1e-8
    acceptance_report(6, ok, f"50 MILPs (1-10 binaries): max |B&B - enumeration| {worst:.1e}, "
                             f"{mismatched} status mismatches")
    assert ok


# -- 7 -------------------------------------------------------------------------------

def test_criterion_7_ibp_soundness(desk, acceptance_report):
    rng = np.random.default_rng(707)
    nets = [desk["nat"], desk["para"]] + [F.init_mlp([desk["test"].n_features, 8, 8, 1], seed=s)
                                           for s in range(3)]
    mask = desk["test"].attack_mask
    violations = 0
    for theta in nets:
        x = desk["test"].features[int(rng.integers(desk["test"].n_samples))]
        eps = float(rng.uniform(0.01, 0.2))
        b = ibp_bounds(theta, x, eps, mask)
        lo, hi = input_box(x, eps, mask)
        X = rng.uniform(lo, hi, size=(10_000, x.size))
        X[:8] = np.where(rng.random((8, x.size)) < 0.5, lo, hi)  # a few box corners
        _, tape = F.forward(theta, X)
        for k, pre in enumerate(tape.pre):
            violations += int(np.sum(pre < b.lower[k]) + np.sum(pre > b.upper[k]))
    ok = violations == 0
    acceptance_report(7, ok, f"{len(nets)} nets x 10^4 perturbations: {violations} bound violations")
    assert ok


# -- 8 -------------------------------------------------------------------------------

def test_criterion_8_training_trend(loop3, desk, acceptance_report):
    te = desk["test"]
    tab = None
    for name in ("nat", "para", "input"):
        tab = T.evaluate(desk[name], te, loop3, input_eps=[0.05], phi_eps=[0.15], steps=7, restarts=3,
                         name=name, table=tab)
    nat_co, para_co = tab.value("nat", "CO(0.15)"), tab.value("para", "CO(0.15)")
    nat_in, inp_in = tab.value("nat", "Input(0.05)"), tab.value("input", "Input(0.05)")
    ok = para_co * 2 <= nat_co and inp_in < nat_in and desk["seconds"] < 1800
    acceptance_report(8, ok, f"CO(0.15): NAT {nat_co:.2f} -> AT-PARA {para_co:.2f} ({nat_co / para_co:.2f}x); "
                             f"Input(0.05): NAT {nat_in:.2f} -> AT-INPUT {inp_in:.2f}; "
                             f"training {desk['seconds']:.0f}s")
    print(tab.to_markdown())
    assert ok


# -- 9 -------------------------------------------------------------------------------

def test_criterion_9_random_vs_pgd(loop3, desk, acceptance_report):
    te = desk["test"]
    budgets = (0.05, 0.1, 0.15)
    tab = T.evaluate(desk["nat"], te, loop3, phi_eps=budgets, steps=7, restarts=3, name="nat")
    pairs = []
    for e in budgets:
        rnd = T.random_phi_cost(desk["nat"], te, loop3, e, seed=0)
        pairs.append((e, rnd, tab.value("nat", f"CO({e:g})")))
    ok = all(r <= p for _, r, p in pairs)
    acceptance_report(9, ok, "NAT random vs PGD-7: " + ", ".join(f"eps {e:g}: {r:.2f} <= {p:.2f}"
                                                              for e, r, p in pairs))
    assert ok


# -- 10 ------------------------------------------------------------------------------

def test_criterion_10_free_at_accounting(loop3, acceptance_report):
    ds = D.generate_synthetic(loop3, 70, seed=10)
    ds = D.apply_normalization(ds, D.fit_normalization(ds, tag=None))
    cfg = T.TrainConfig(method="AT_BOTH", budget=AttackBudget(0.05, 0.1, 4), free_at=True, epochs=9,
                        batch_size=16, lr=1e-3)
    res = T.train(cfg, ds, loop3)
    n_batches = -(-ds.n_samples // cfg.batch_size)
    expected = n_batches * cfg.effective_epochs * cfg.budget.steps
    ok = res.passes == expected and cfg.effective_epochs == 2
    acceptance_report(10, ok, f"{res.passes} logged passes = {n_batches} batches x {cfg.effective_epochs} "
                              f"epochs x {cfg.budget.steps} steps ({expected})")
    assert ok
