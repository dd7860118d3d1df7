import pytest

from chorsaga import chor as C
from chorsaga import state as st
from chorsaga.state import Commit, Comp, Env, InvariantViolation, SendEv, builtin_transaction, make_store
from chorsaga.values import UNIT, Call, EvalError, Lit, Var, eval_expr


def env2(**kw):
    return Env(("p", "q"), **kw)


# -- expressions ---------------------------------------------------------------------


def test_eval_var_lit_and_call():
    store = {"x": 3}
    assert eval_expr(store, Var("x")) == 3
    assert eval_expr(store, Lit(7)) == 7
    assert eval_expr({"x": 2, "y": 5}, Call("add", (Var("x"), Var("y")))) == 2 + 5


def test_eval_unbound_is_unit_and_unknown_function_raises():
    assert eval_expr({}, Var("nope")) is UNIT
    with pytest.raises(EvalError):
        eval_expr({}, Call("frobnicate", ()))


# -- steps ------------------------------------------------------------------------------


def test_nil_has_no_steps():
    cfg = C.initial_config((), env2())
    assert C.enumerate_chor_steps(cfg) == []
    assert C.is_chor_terminated(cfg)


def test_send_moves_into_flight():
    cfg = C.initial_config((C.Send("p", Lit(1), "q", "x"),), env2())
    steps = C.enumerate_chor_steps(cfg)
    assert len(steps) == 1
    mu, nxt = steps[0]
    assert mu == SendEv("p", 1, "q")
    assert nxt.chor == (C.InFlight("p", "q", "x"),)
    assert nxt.K[("p", "q", 0)] == 1
    assert st.seq_get(nxt.S, "p", "q", st.SEND) == 1
    assert st.seq_get(nxt.S, "q", "p", st.RECEIVE) == 0


def test_receive_completes_interaction():
    cfg = C.initial_config((C.Send("p", Lit(1), "q", "x"),), env2())
    _, mid = C.enumerate_chor_steps(cfg)[0]
    (mu, end), = C.enumerate_chor_steps(mid)
    assert mu == st.RecvEv("p", 1, "q")
    assert end.chor == ()
    assert st.store_get(end.sigma, "q", "x") == 1
    assert st.seq_get(end.S, "q", "p", st.RECEIVE) == 1


def test_independent_assignments_both_enabled():
    cfg = C.initial_config((C.Assign("p", "x", Lit(1)), C.Assign("q", "y", Lit(2))), env2())
    steps = C.enumerate_chor_steps(cfg)
    assert [mu.p for mu, _ in steps] == ["p", "q"]
    # q's step is the delayed one: p's instruction stays in place
    q_next = steps[1][1]
    assert q_next.chor == (C.Assign("p", "x", Lit(1)),)
    assert st.store_get(q_next.sigma, "q", "y") == 2


def test_delay_blocked_by_same_process():
    cfg = C.initial_config((C.Assign("p", "x", Lit(1)), C.Assign("p", "y", Lit(2))), env2())
    assert len(C.enumerate_chor_steps(cfg)) == 1


def test_transaction_failure_compensates_and_deactivates():
    tx = {"a": builtin_transaction("a"), "b": builtin_transaction("b", "fail")}
    chor = (C.Trans("p", "x", "a", Lit(1)), C.Trans("p", "y", "b", Lit(2)))
    cfg = C.initial_config(chor, env2(transactions=tx))
    _, c1 = C.enumerate_chor_steps(cfg)[0]
    assert c1.T["p"] == (Commit("a", 1, 1),)
    (mu, c2), = C.enumerate_chor_steps(c1)
    assert mu == st.CompensateEv("p")
    assert c2.T["p"] == (Commit("a", 1, 1), Comp(Commit("a", 1, 1)))
    assert c2.A == {"q"}
    # q may now compensate too; its log is empty
    (mu, c3), = C.enumerate_chor_steps(c2)
    assert mu == st.CompensateEv("q") and c3.A == frozenset()
    assert C.is_chor_terminated(c3)


def test_terminated_with_empty_active_set():
    env = env2()
    cfg = C.ChorConfig((C.Assign("p", "x", Lit(1)),), env.sigma_start, st.EMPTY, st.EMPTY, st.EMPTY,
                       frozenset(), env)
    assert C.is_chor_terminated(cfg)


def test_conditional_takes_branch_by_guard():
    env = env2(sigma_start=make_store({"p": {"b": False}}))
    chor = (C.Cond("p", Var("b"), (C.Assign("p", "x", Lit(1)),), (C.Assign("p", "x", Lit(2)),)),)
    (mu, nxt), = C.enumerate_chor_steps(C.initial_config(chor, env))
    assert mu == st.Tau("p")
    assert nxt.chor == (C.Assign("p", "x", Lit(2)),)


# -- sequence rows and logs --------------------------------------------------------------------


def test_seq_rows_are_isolated():
    S = st.inc_send(st.EMPTY, "p", "q")
    S = st.inc_recv(S, "q", "p")
    S = st.inc_send(S, "q", "r")
    assert st.seq_get(S, "p", "q", st.SEND) == 1
    assert st.seq_get(S, "q", "p", st.RECEIVE) == 1
    S2 = st.restart_seq(S, "q")
    assert st.seq_get(S2, "q", "p", st.RECEIVE) == 0
    assert st.seq_get(S2, "q", "r", st.SEND) == 0
    assert st.seq_get(S2, "p", "q", st.SEND) == 1


def test_k_is_write_once():
    K = st.k_bind(st.EMPTY, "p", "q", 0, 1)
    assert st.k_bind(K, "p", "q", 0, 1) == K
    with pytest.raises(st.DeterminismViolation):
        st.k_bind(K, "p", "q", 0, 2)


def test_comp_reverses_commits():
    assert st.comp(st.EMPTY, "p") == st.EMPTY
    a, b, c = Commit("a", 1, 1), Commit("b", 2, 2), Commit("c", 3, 3)
    T = st.EMPTY.set("p", (a,))
    assert st.comp(T, "p")["p"] == (a, Comp(a))
    T = st.EMPTY.set("p", (a, b, c))
    assert st.comp(T, "p")["p"] == (a, b, c, Comp(c), Comp(b), Comp(a))


def test_comp_twice_is_an_invariant_violation():
    T = st.comp(st.EMPTY.set("p", (Commit("a", 1, 1),)), "p")
    with pytest.raises(InvariantViolation):
        st.comp(T, "p")


@pytest.mark.parametrize("log,ok", [
    ((), True),
    ((Commit("a", 1, 1),), False),  # committed but never compensated
    ((Commit("a", 1, 1), Comp(Commit("a", 1, 1))), True),
    ((Commit("a", 1, 1), Commit("b", 1, 1), Comp(Commit("a", 1, 1)), Comp(Commit("b", 1, 1))), False),
    ((Comp(Commit("a", 1, 1)),), False),
])
def test_saga_shape(log, ok):
    assert st.is_saga_shaped(log) is ok


# -- well-formedness -----------------------------------------------------------------------------


def test_wellformed_accepts_source():
    cfg = C.initial_config((C.Send("p", Lit(1), "q", "x"),), env2())
    assert C.check_chor_wellformed(cfg).ok


def test_wellformed_rejects_dangling_inflight():
    res = C.check_chor_wellformed(C.initial_config((C.InFlight("p", "q", "x"),), env2()))
    assert not res.ok
    assert any(d.startswith("(a)") for d in res.diagnostics)


def test_wellformed_rejects_self_send():
    res = C.check_chor_wellformed(C.initial_config((C.Send("p", Lit(1), "p", "x"),), env2()))
    assert not res.ok
    assert any(d.startswith("(b)") for d in res.diagnostics)
