import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import real, unit_rows
from oracles import brute_fronts, dominates, ood_sum
from pas.curation import (CurationReport, DedupConfig, LeakFilterConfig, OODTriple, ParetoAssignment,
                          component_size_histogram, dedup, kneedle, kneedle_index, leak_filter, ood_score,
                          ood_triple, pareto_dominates, peel_fronts, prune_through_front, prune_to_size,
                          removal_order, select_halt)
from pas.errors import DomainError, IntegrityError
from pas.gateway import OODProbRow
from pas.index import build_store


def _records_and_store(vecs, tag="copy"):
    recs = [real(f"mock://img/{i:04d}.jpg") for i in range(len(vecs))]
    return recs, build_store([r.id for r in recs], vecs, tag)


# -- configs ------------------------------------------------------------------------

@pytest.mark.parametrize("kw", [{"lambda_dup": 0.0}, {"lambda_dup": 1.0}, {"k": 0}])
def test_dedup_config_invariants(kw):
    with pytest.raises(DomainError):
        DedupConfig(**kw)


@pytest.mark.parametrize("kw", [{"threshold": 0.0}, {"threshold": 1.5}, {"k": 0}])
def test_leak_config_invariants(kw):
    with pytest.raises(DomainError):
        LeakFilterConfig(**kw)


# -- dedup ---------------------------------------------------------------------------

def test_dedup_hand_example():
    gram = np.array([[1, 0.95, 0.5], [0.95, 1, 0.7], [0.5, 0.7, 1]])
    recs, store = _records_and_store(np.linalg.cholesky(gram))
    out = dedup(recs, store, DedupConfig(0.6, 64, 0))
    assert len(out.kept) == 1 and len(out.removed) == 2
    assert len(set(out.component_map.values())) == 1


def test_dedup_no_edges_keeps_all(rng):
    recs, store = _records_and_store(np.eye(20))
    out = dedup(recs, store, DedupConfig())
    assert out.kept == recs and out.removed == []


def test_dedup_missing_ids():
    recs, store = _records_and_store(np.eye(3))
    extra = real("mock://other.jpg")
    with pytest.raises(IntegrityError, match="1 record"):
        dedup(recs + [extra], store, DedupConfig())


def test_dedup_is_deterministic_and_seed_sensitive(rng):
    base = np.linalg.qr(rng.standard_normal((64, 60)))[0].T  # orthonormal cluster centres
    vecs = np.repeat(base, 4, axis=0) + 0.01 * rng.standard_normal((240, 64))
    recs, store = _records_and_store(vecs)
    a = dedup(recs, store, DedupConfig(0.6, 64, 1))
    b = dedup(recs, store, DedupConfig(0.6, 64, 1))
    assert [r.id for r in a.kept] == [r.id for r in b.kept]
    assert len(a.kept) == 60
    picks = {tuple(r.id for r in dedup(recs, store, DedupConfig(0.6, 64, s)).kept) for s in range(5)}
    assert len(picks) > 1
    assert component_size_histogram(a.component_map) == {4: 60}


def test_dedup_representative_independent_of_input_order(rng):
    base = unit_rows(rng, 10, 8)
    vecs = np.repeat(base, 3, axis=0)
    recs, store = _records_and_store(vecs)
    a = dedup(recs, store, DedupConfig(0.6, 64, 3))
    b = dedup(recs[::-1], store, DedupConfig(0.6, 64, 3))
    assert {r.id for r in a.kept} == {r.id for r in b.kept}


# -- leak filter ------------------------------------------------------------------------

def test_leak_planted_copy_removed(rng):
    prot = unit_rows(rng, 10, 32)
    vecs = unit_rows(rng, 5, 32)
    vecs[2] = prot[4] + 0.3 * rng.standard_normal(32) / np.sqrt(32)
    recs, store = _records_and_store(vecs)
    out = leak_filter(recs, store, build_store([f"t{i}" for i in range(10)], prot), LeakFilterConfig())
    assert [r.id for r in out.removed] == [recs[2].id]


def test_leak_boundary_is_strict():
    recs, store = _records_and_store([[1.0, 0.0]])
    # protected vector at cosine exactly 0.5 is kept when the threshold is 0.5
    prot = build_store(["t"], [[0.5, np.sqrt(0.75)]])
    assert leak_filter(recs, store, prot, LeakFilterConfig(0.5)).removed == []
    assert len(leak_filter(recs, store, prot, LeakFilterConfig(0.49)).removed) == 1


def test_leak_empty_protected_is_noop(caplog):
    recs, store = _records_and_store(np.eye(3))
    out = leak_filter(recs, store, None, LeakFilterConfig())
    assert out.kept == recs
    assert "empty protected store" in caplog.text


# -- OOD scoring ------------------------------------------------------------------------

def test_ood_examples():
    assert ood_score([0.5, 0.5], [1.0, 1.0]) == 1.0
    assert ood_score([1.0, 0.0], [0.0, 0.37]) == 0.0
    assert abs(ood_score([0.7, 0.3], [0.2, 0.9]) - 0.41) <= 1e-12


@pytest.mark.parametrize("p,p_no", [
    ([0.5, 0.6], [0.1, 0.1]),
    ([1.2, -0.2], [0.1, 0.1]),
    ([0.5, 0.5], [0.1, 1.1]),
    ([0.5, 0.5], [0.1]),
])
def test_ood_invalid_rows(p, p_no):
    with pytest.raises(DomainError):
        ood_score(p, p_no)


@st.composite
def prob_rows(draw, max_len=12):
    n = draw(st.integers(1, max_len))
    w = np.array(draw(st.lists(st.floats(0.0, 1.0), min_size=n, max_size=n))) + 1e-9
    p_no = np.array(draw(st.lists(st.floats(0.0, 1.0), min_size=n, max_size=n)))
    return w / w.sum(), p_no


@settings(max_examples=300, deadline=None)
@given(prob_rows())
def test_ood_matches_summation_and_bounds(row):
    p, p_no = row
    s = ood_score(p, p_no)
    assert 0.0 <= s <= 1.0
    assert abs(s - ood_sum(p, p_no)) <= 1e-12


def test_ood_triple_examples():
    row = OODProbRow("x", np.array([0.7, 0.3]), np.array([0.2, 0.9]))
    t = ood_triple("x", row, row)
    assert t.ood_text_delta == 0.0
    assert ood_triple("x", row, row, row).ood_text_delta == 0.0
    blurred = OODProbRow("x", np.array([1.0, 0.0]), np.array([0.9, 0.0]))
    assert ood_triple("x", row, row, blurred).ood_text_delta == pytest.approx(0.49, abs=1e-12)


def test_ood_triple_names_image():
    bad = OODProbRow("x", np.array([0.7, 0.7]), np.array([0.2, 0.9]))
    with pytest.raises(DomainError, match="img42"):
        ood_triple("img42", bad, bad)


# -- dominance and fronts --------------------------------------------------------------------

def T(i, *v):
    return OODTriple(i, *v)


def test_dominance_examples():
    assert pareto_dominates(T("a", .9, .8, .7), T("b", .5, .5, .5))
    a = T("a", .3, .3, .3)
    assert not pareto_dominates(a, a)
    assert not pareto_dominates(T("a", .9, .4, .7), T("b", .5, .5, .5))


def test_peel_hand_example():
    ts = [T("P1", .9, .9, .9), T("P2", .8, .1, .1), T("P3", .1, .8, .1), T("P4", .05, .05, .05)]
    assert peel_fronts(ts).fronts == [["P1"], ["P2", "P3"], ["P4"]]


def test_peel_identical_points_single_front():
    ts = [T(f"i{n}", .5, .5, .0) for n in range(10)]
    assert peel_fronts(ts).sizes() == [10]


def test_peel_empty():
    assert peel_fronts([]).fronts == []


coords = st.sampled_from([0.0, 0.25, 0.5, 0.75, 1.0]) | st.floats(0.0, 1.0)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(coords, coords, coords), min_size=1, max_size=120))
def test_peel_structure(points):
    ts = [T(f"id{n:03d}", *p) for n, p in enumerate(points)]
    a = peel_fronts(ts)
    assert [set(f) for f in a.fronts] == brute_fronts({t.image_id: t.values() for t in ts})
    by = {t.image_id: t for t in ts}
    assert sorted(i for f in a.fronts for i in f) == sorted(by)
    for n, f in enumerate(a.fronts):
        assert f == sorted(f)
        assert not any(pareto_dominates(by[x], by[y]) for x in f for y in f)
        if n:
            assert all(any(pareto_dominates(by[x], by[y]) for x in a.fronts[n - 1]) for y in f)


@settings(max_examples=200, deadline=None)
@given(st.tuples(coords, coords, coords), st.tuples(coords, coords, coords))
def test_dominance_matches_definition(a, b):
    assert pareto_dominates(T("a", *a), T("b", *b)) == dominates(a, b)


# -- kneedle -----------------------------------------------------------------------------------

def test_kneedle_linear_has_no_knee():
    xs = np.arange(10.0)
    assert kneedle(xs, 3 * xs + 1) is None
    assert kneedle(xs, -2 * xs) is None


def test_kneedle_hand_case():
    assert kneedle([0, 1, 2, 3, 4], [0, 0.6, 0.85, 0.95, 1.0], 1.0) == 1.0


@pytest.mark.parametrize("shape", ["concave_inc", "convex_dec", "concave_dec", "convex_inc"])
def test_kneedle_piecewise_junction(shape):
    xs = np.arange(0.0, 101.0)
    j = 30
    y = np.where(xs <= j, xs / j, 1.0 + (xs - j) * 0.01)  # steep then flat
    if shape == "convex_dec":
        y = y.max() - y
    elif shape == "concave_dec":
        xs_rev = xs.max() - xs
        y = np.where(xs_rev <= j, xs_rev / j, 1.0 + (xs_rev - j) * 0.01)
        j = 100 - j
    elif shape == "convex_inc":
        xs_rev = xs.max() - xs
        y = np.where(xs_rev <= j, xs_rev / j, 1.0 + (xs_rev - j) * 0.01)
        y = y.max() - y
        j = 100 - j
    assert kneedle(xs, y) == float(j)


def test_kneedle_preconditions():
    with pytest.raises(DomainError):
        kneedle([0, 1], [0, 1])
    with pytest.raises(DomainError):
        kneedle([0, 2, 1], [0, 1, 2])
    assert kneedle([0, 1, 2], [1, 1, 1]) is None


def test_kneedle_sensitivity_can_suppress_knee():
    xs = np.arange(0.0, 11.0)
    ys = np.sqrt(xs)
    assert kneedle_index(xs, ys, 1.0) is not None
    assert kneedle_index(xs, ys, 1000.0) is None


def _assignment(sizes, values_per_front):
    """Fronts of the given sizes; every member of front i gets metric values values_per_front[i]."""
    front_of, fronts, triples = {}, [], {}
    n = 0
    for f, (size, vals) in enumerate(zip(sizes, values_per_front)):
        ids = [f"i{n + j:05d}" for j in range(size)]
        n += size
        fronts.append(ids)
        for i in ids:
            front_of[i] = f
            triples[i] = OODTriple(i, *vals)
    return ParetoAssignment(front_of, fronts), triples


def _junction_curve(xs, knee):
    """Decreasing curve with a sharp bend at x = knee."""
    top = xs[-1]
    return np.where(xs <= knee, 1.0 - 0.9 * xs / knee, 0.1 - 0.1 * (xs - knee) / (top - knee))


def test_select_halt_max_rule():
    sizes = [50] * 20
    xs = np.cumsum(sizes).astype(float)
    a = _junction_curve(xs, 100)
    b = _junction_curve(xs, 350)
    assert kneedle(xs, a) == 100 and kneedle(xs, b) == 350
    assignment, triples = _assignment(sizes, list(zip(a, a, b)))
    halt = select_halt(assignment, triples)
    assert halt.knees == {"ood_primary": 100.0, "ood_general": 100.0, "ood_text_delta": 350.0}
    assert halt.removed_through_front == 350
    assert halt.front == 6  # fronts 0..6 hold 350 images
    recs = [real(f"u{n}") for n in range(3)]
    toy = ParetoAssignment({r.id: n for n, r in enumerate(recs)}, [[r.id] for r in recs])
    assert prune_through_front(toy, recs, 1) == recs[2:]
    assert prune_through_front(toy, recs, None) == recs


def test_select_halt_rounds_down_inside_front():
    sizes = [40] * 20
    xs = np.cumsum(sizes).astype(float)
    # knee placed on a front boundary of a finer grid, then queried with coarser fronts
    y = _junction_curve(xs, 400)
    assignment, triples = _assignment(sizes, list(zip(y, y, y)))
    halt = select_halt(assignment, triples)
    assert xs[halt.front] <= 400 < xs[halt.front + 1]


def test_select_halt_linear_and_few_fronts():
    sizes = [10] * 8
    lin = np.linspace(1, 0, 8)
    assignment, triples = _assignment(sizes, list(zip(lin, lin, lin)))
    halt = select_halt(assignment, triples)
    assert halt.front is None and "no knee" in halt.warning
    assignment, triples = _assignment([5, 5], [(1, 1, 1), (0, 0, 0)])
    assert select_halt(assignment, triples).front is None


# -- prune to size -----------------------------------------------------------------------------

def _three_fronts():
    sizes = [10, 20, 70]
    assignment, triples = _assignment(sizes, [(0.9, 0.9, 0.9), (0.5, 0.5, 0.5), (0.1, 0.1, 0.1)])
    # spread ood_primary inside front 1 so the within-front order is visible
    for n, i in enumerate(assignment.fronts[1]):
        triples[i] = OODTriple(i, 0.3 + 0.01 * (n % 7), 0.5, 0.5)
    recs = [real(i) for f in assignment.fronts for i in f]
    id_of = {r.uri: r.id for r in recs}
    assignment = ParetoAssignment({id_of[i]: f for i, f in assignment.front_of.items()},
                                  [[id_of[i] for i in f] for f in assignment.fronts])
    triples = {id_of[i]: OODTriple(id_of[i], *t.values()) for i, t in triples.items()}
    return assignment, triples, recs


def test_prune_to_size_examples():
    assignment, triples, recs = _three_fronts()
    kept = prune_to_size(assignment, recs, 70, triples)
    assert {r.id for r in kept} == set(assignment.fronts[2])
    assert prune_to_size(assignment, recs, 100, triples) == recs
    kept = prune_to_size(assignment, recs, 75, triples)
    assert len(kept) == 75
    kept_ids = {r.id for r in kept}
    assert not kept_ids & set(assignment.fronts[0])
    survivors = [i for i in assignment.fronts[1] if i in kept_ids]
    dropped = [i for i in assignment.fronts[1] if i not in kept_ids]
    assert len(survivors) == 5 and len(dropped) == 15
    key = lambda i: (-triples[i].ood_primary, i)  # noqa: E731
    assert max(key(i) for i in dropped) < min(key(i) for i in survivors)


def test_prune_to_size_errors():
    assignment, triples, recs = _three_fronts()
    with pytest.raises(DomainError):
        prune_to_size(assignment, recs, 101, triples)
    with pytest.raises(DomainError):
        prune_to_size(assignment, recs, 0, triples)


def test_removal_order_is_front_major():
    assignment, triples, _ = _three_fronts()
    order = removal_order(assignment, triples)
    fronts = [assignment.front_of[i] for i in order]
    assert fronts == sorted(fronts)


# -- report --------------------------------------------------------------------------------------

def test_report_telescopes_and_round_trips():
    rep = CurationReport()
    pool = [real(f"u{i}") for i in range(10)]
    rep.record("raw", pool)
    rep.record("after_dedup", pool[:8])
    rep.record("after_leak", pool[:7])
    rep.record("after_pareto", pool[:3])
    assert rep.telescopes()
    assert rep.removed() == {"dedup": 2, "leak": 1, "pareto": 4}
    assert CurationReport.from_json(rep.to_json()).to_json() == rep.to_json()
    rep.counts["after_pareto"]["total"] = 4
    assert not rep.telescopes()
