import numpy as np
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from conftest import hot
from dcplus.gridio import BranchRecord, BusKind, BusRecord, GenRecord, GridCase, dump_matpower, parse_matpower
from dcplus.indexing import StateIndexer
from dcplus.linearizer import assemble
from dcplus.topoupdate import branch_delta, lmdf, state_delta, woodbury_update

FAST = settings(max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow])
finite = st.floats(min_value=-5, max_value=5, allow_nan=False)


@st.composite
def cases(draw):
    nb = draw(st.integers(2, 6))
    kinds = [BusKind.SLACK] + [draw(st.sampled_from([BusKind.PQ, BusKind.PV])) for _ in range(nb - 1)]
    buses = []
    gens = []
    for i, kind in enumerate(kinds, start=1):
        v = draw(st.floats(0.9, 1.1))
        buses.append(BusRecord(i, kind, draw(finite), draw(finite), draw(st.floats(0, 0.1)), draw(finite) / 10,
                               v if kind != BusKind.PQ else 0.0, draw(st.sampled_from([0.0, 110.0, 220.0]))))
        if kind != BusKind.PQ:
            gens.append(GenRecord(i, draw(finite), draw(finite), v, True))
    branches = []
    for i in range(2, nb + 1):
        j = draw(st.integers(1, i - 1))
        branches.append(BranchRecord(j, i, draw(st.floats(0, 0.1)), draw(st.floats(0.01, 0.5)),
                                     draw(st.floats(0, 0.3)), draw(st.floats(0.9, 1.1)), draw(st.floats(-0.2, 0.2))))
    return GridCase("random", 100.0, tuple(buses), tuple(branches), tuple(gens))


@FAST
@given(cases())
def test_round_trip_random_cases(case):
    # start from parsed data: only values of the form MW/baseMVA can come from a file
    parsed = parse_matpower(dump_matpower(case), case.name)
    assert parse_matpower(dump_matpower(parsed), case.name) == parsed


@FAST
@given(st.integers(0, 6), st.integers(0, 6), st.data())
def test_selector_identities(n, m, data):
    if n + m == 0:
        return
    idx = StateIndexer(n, m)
    i = data.draw(st.integers(0, n + m))
    j = data.draw(st.integers(0, n + m))
    mu, nu = idx.mu(i, j), idx.nu(i, j)
    assert mu.dot(nu) == 0
    x = data.draw(st.lists(finite, min_size=idx.dim, max_size=idx.dim))
    x = np.array(x)
    assert np.isclose(mu.apply(x), mu.dense(idx.dim) @ x)
    assert np.isclose(nu.apply(x), nu.dense(idx.dim) @ x)


@FAST
@given(st.integers(0, 19), st.floats(0.5, 2.0), st.floats(0.0, 2.0), st.floats(0.9, 1.1))
def test_woodbury_matches_rebuild_for_random_modifications(k, x_scale, r_scale, tau):
    g, _, model, base = hot("case14")
    params = dict(x=g.x[k] * x_scale, r=g.r[k] * r_scale, tau=tau)
    upd = branch_delta(model, k, **params)
    rebuilt = assemble(g.with_branch(k, **params), model.ref)
    np.testing.assert_allclose(model.M + upd.delta_m(), rebuilt.M, atol=1e-10)
    handle = woodbury_update(model.inverse, upd)
    post = np.concatenate(state_delta(handle, upd, base)) + base.vector
    np.testing.assert_allclose(post, np.linalg.solve(rebuilt.M, rebuilt.rhs()), atol=1e-9)


@FAST
@given(st.floats(-3, 3), st.integers(0, 19))
def test_frame_invariance_of_lmdf(offset, monitored):
    import warnings

    g, _, model, _ = hot("case14")
    j = g.branch_index((9, 14, 1))
    if monitored == j:
        return
    shifted = assemble(g, model.ref.shifted(offset))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        a = lmdf(model, monitored, j).matrix
        b = lmdf(shifted, monitored, j).matrix
    np.testing.assert_allclose(a, b, atol=1e-10)
