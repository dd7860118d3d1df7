import pytest

from chorsaga import net as N
from chorsaga import state as st
from chorsaga.chor import ProtocolError
from chorsaga.state import FAIL, Commit, Comp, Env, RecvEv, RestartEv, SendEv, TransactionDef, builtin_transaction
from chorsaga.values import Lit, Var


def net(programs, **kw):
    return N.make_network(programs, Env(tuple(programs), **kw))


def test_nil_network_has_no_steps():
    cfg = net({"p": (), "q": ()})
    assert N.enumerate_net_steps(cfg) == []
    assert N.is_net_terminated(cfg)
    assert not N.is_net_deadlocked(cfg)


def test_send_then_receive():
    cfg = net({"p": (N.SendTo("q", Lit(1)),), "q": (N.RecvFrom("p", "x"),)})
    (mu, c1), = N.enumerate_net_steps(cfg)
    assert mu == SendEv("p", 1, "q")
    (mu, c2), = N.enumerate_net_steps(c1)
    assert mu == RecvEv("p", 1, "q")
    assert st.store_get(c2.sigma, "q", "x") == 1
    assert N.is_net_terminated(c2) and not N.is_net_deadlocked(c2)


def test_mutual_receive_is_deadlocked():
    cfg = net({"p": (N.RecvFrom("q", "x"),), "q": (N.RecvFrom("p", "x"),)})
    assert N.is_net_terminated(cfg)
    assert N.is_net_deadlocked(cfg)


def test_empty_active_set_is_not_deadlocked():
    cfg = net({"p": (N.RecvFrom("q", "x"),), "q": ()})
    cfg = cfg.with_(A=frozenset())
    assert N.is_net_terminated(cfg)
    assert not N.is_net_deadlocked(cfg)


def test_restart_successors_for_every_process():
    cfg = net({"p": (N.SendTo("q", Lit(1)),), "q": (N.RecvFrom("p", "x"),)})
    _, c1 = N.enumerate_net_steps(cfg)[0]
    steps = dict(N.enumerate_net_steps(c1, allow_restart=True))
    assert RestartEv("p") in steps and RestartEv("q") in steps
    r = steps[RestartEv("p")]
    assert r.program("p") == cfg.program("p")
    assert st.seq_get(r.S, "p", "q", st.SEND) == 0
    assert r.K == c1.K and r.T == c1.T and r.A == c1.A


def test_restart_on_fresh_config_is_fixpoint():
    cfg = net({"p": (N.SendTo("q", Lit(1)),), "q": (N.RecvFrom("p", "x"),)})
    assert N.restart_process(cfg, "p") == cfg


def test_restart_unknown_process():
    with pytest.raises(KeyError):
        N.restart_process(net({"p": ()}), "zz")


def test_replayed_send_rebinds_same_value():
    cfg = net({"p": (N.SendTo("q", Lit(1)),), "q": ()})
    _, c1 = N.enumerate_net_steps(cfg)[0]
    r = N.restart_process(c1, "p")
    _, c2 = N.enumerate_net_steps(r)[0]
    assert c2.K == c1.K
    assert c2 == c1


def test_commit_is_idempotent_on_replay():
    cfg = net({"p": (), "q": ()}, transactions={"t": builtin_transaction("t", "add", 1)})
    out, c1 = N.commit_transaction_net(cfg, "p", "t", 5)
    assert out == 5 + 1
    assert c1.T["p"] == (Commit("t", 5, 6),)
    out2, c2 = N.commit_transaction_net(c1, "p", "t", 5)
    assert out2 == 6 and len(c2.T["p"]) == 1


def test_commit_failure_compensates_log():
    tx = {"a": builtin_transaction("a"), "b": builtin_transaction("b", "fail")}
    cfg = net({"p": (), "q": ()}, transactions=tx)
    _, c1 = N.commit_transaction_net(cfg, "p", "a", 1)
    out, c2 = N.commit_transaction_net(c1, "p", "b", 2)
    assert out is FAIL
    assert c2.T["p"] == (Commit("a", 1, 1), Comp(Commit("a", 1, 1)))
    assert "p" not in c2.A


def test_committed_transaction_cannot_fail_on_replay():
    outcomes = iter([7, FAIL])
    tx = {"t": TransactionDef("t", lambda v: next(outcomes))}
    cfg = net({"p": (), "q": ()}, transactions=tx)
    _, c1 = N.commit_transaction_net(cfg, "p", "t", 1)
    # different input, same transaction: the failing replay is not a permitted step
    out, c2 = N.commit_transaction_net(c1, "p", "t", 2)
    assert out is FAIL and c2 is None


def test_unregistered_transaction():
    with pytest.raises(KeyError):
        N.commit_transaction_net(net({"p": ()}), "p", "nope", 1)


def test_compensation_offered_once_someone_left():
    tx = {"b": builtin_transaction("b", "fail")}
    cfg = net({"p": (N.Trans("y", "b", Lit(1)),), "q": (N.Assign("x", Lit(1)),)}, transactions=tx)
    labels = [mu for mu, _ in N.enumerate_net_steps(cfg)]
    assert st.CompensateEv("q") not in labels
    c1 = dict(N.enumerate_net_steps(cfg))[st.CompensateEv("p")]
    assert st.CompensateEv("q") in [mu for mu, _ in N.enumerate_net_steps(c1)]


def test_branch_on_unexpected_label_is_protocol_error():
    cfg = net({"p": (N.Select("q", "Z"),), "q": (N.Branch("p", (("L", ()),)),)})
    _, c1 = N.enumerate_net_steps(cfg)[0]
    with pytest.raises(ProtocolError):
        N.enumerate_net_steps(c1)


def test_branch_rejects_duplicate_labels():
    with pytest.raises(ValueError):
        N.Branch("p", (("L", ()), ("L", ())))
    with pytest.raises(ValueError):
        N.Branch("p", ())


def test_step_leaves_other_programs_untouched():
    cfg = net({"p": (N.Assign("x", Lit(1)),), "q": (N.Assign("y", Var("x")),)})
    for mu, nxt in N.enumerate_net_steps(cfg):
        other = "q" if mu.pn == "p" else "p"
        assert nxt.program(other) == cfg.program(other)
