import json

import numpy as np
import pytest

from robust_e2e import grid as G, qp as Q, tasks


def test_bundled_cases_load():
    names = G.bundled_cases()
    for name in ("case3_loop", "case14"):
        assert name in names
        g = G.load_grid(name)
        assert g.n_line > 0 and g.n_gen > 0


def test_roundtrip(tmp_path, loop3):
    G.save_grid(loop3, tmp_path / "g.json")
    back = G.load_grid(tmp_path / "g.json")
    assert back.to_dict() == loop3.to_dict()


@pytest.mark.parametrize("edit, msg", [
    (lambda d: d["lines"].append({"from": 0, "to": 0, "susceptance": 1.0, "flow_limit": 1.0}), "self loop"),
    (lambda d: d["lines"][0].update(susceptance=-1.0), "susceptance"),
    (lambda d: d["penalties"].update(c_ls=1.0), "penalty ordering"),
    (lambda d: d.update(ref_bus=9), "ref_bus"),
    (lambda d: d.update(lines=[]), "disconnected"),
])
def test_invalid_grids(tmp_path, loop3, edit, msg):
    doc = loop3.to_dict()
    edit(doc)
    p = tmp_path / "bad.json"
    p.write_text(json.dumps(doc))
    with pytest.raises(G.GridError, match=msg):
        G.load_grid(p)


def test_missing_file():
    with pytest.raises(G.GridError):
        G.load_grid("/nonexistent/grid.json")


def _flows(grid, theta):
    A, _, _ = G.incidence(grid)
    return grid.susceptance * (A @ theta)


def test_dispatch_uncongested_uses_cheap_generator(loop3):
    sol = Q.solve(tasks.build_dispatch(loop3), [0.6])
    d = tasks.split_dispatch(loop3, sol.z_star)
    assert d.p_g.sum() == pytest.approx(0.6, abs=1e-6)
    assert d.p_g[0] == pytest.approx(0.6, abs=1e-3)


def test_dispatch_congested_respects_limits(loop3):
    sol = Q.solve(tasks.build_dispatch(loop3), [1.5])
    d = tasks.split_dispatch(loop3, sol.z_star)
    assert d.p_g.sum() + d.slack.sum() == pytest.approx(1.5, abs=1e-7)
    flows = _flows(loop3, d.theta)
    assert np.all(np.abs(flows) <= loop3.flow_limit + 1e-7)
    # the 0-2 line binds, so the expensive generator has to run
    assert abs(flows[2]) == pytest.approx(loop3.flow_limit[2], abs=1e-5)
    assert d.p_g[1] > 0.5


def test_redispatch_covers_shortfall(loop3):
    prob = tasks.build_redispatch(loop3)
    y = np.array([2.0])
    p_g = np.array([1.0, 0.5])
    sol = Q.solve(prob, tasks.redispatch_param(y, p_g))
    r = tasks.split_redispatch(loop3, sol.z_star)
    assert p_g.sum() + r.p_ls.sum() - r.p_gs.sum() == pytest.approx(2.0, abs=1e-7)
    assert r.p_ls.sum() >= 0.5 - 1e-7
    assert np.all(np.abs(_flows(loop3, r.theta)) <= loop3.flow_limit + 1e-7)
    cost = tasks.task_cost(p_g, r.p_ls, r.p_gs, loop3)
    assert cost >= loop3.gen_cost @ p_g + loop3.c_ls * 0.5 - 1e-6
