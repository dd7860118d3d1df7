import pytest

from chorsaga import chor as C
from chorsaga import net as N
from chorsaga.dsl import parse_chor
from chorsaga.projection import (
    MergeError,
    check_projectability,
    merge,
    net_geq,
    project,
    project_all,
    prog_geq,
)
from chorsaga.sim import EXHAUSTIVE, FaultPolicy, explore_exhaustive
from chorsaga.values import Lit, Var

SEND = (C.Send("p", Lit(1), "q", "x"),)


def test_send_projects_to_each_side():
    assert project(SEND, "p") == (N.SendTo("q", Lit(1)),)
    assert project(SEND, "q") == (N.RecvFrom("p", "x"),)
    assert project(SEND, "r") == ()


def test_inflight_projects_only_to_receiver():
    chor = (C.InFlight("p", "q", "x"),)
    assert project(chor, "p") == ()
    assert project(chor, "q") == (N.RecvFrom("p", "x"),)


def test_nil_projects_to_nil():
    for r in ("p", "q", "r"):
        assert project((), r) == ()


def test_local_instructions_project_to_owner():
    chor = (C.Assign("p", "x", Lit(1)), C.Trans("q", "y", "t", Var("x")))
    assert project(chor, "p") == (N.Assign("x", Lit(1)),)
    assert project(chor, "q") == (N.Trans("y", "t", Var("x")),)


def test_declared_but_unused_process_gets_nil():
    res = project_all(SEND, processes=("p", "q", "z"))
    assert res.ok and res.programs["z"] == ()


def test_merge_identity_and_label_union():
    P = (N.SendTo("q", Lit(1)),)
    assert merge(P, P) == P
    left = (N.Branch("p", (("L", (N.RecvFrom("p", "x"),)),)),)
    right = (N.Branch("p", (("R", (N.Assign("y", Lit(2)),)),)),)
    assert merge(left, right) == (N.Branch("p", (("L", (N.RecvFrom("p", "x"),)),
                                                 ("R", (N.Assign("y", Lit(2)),)))),)


def test_merge_divergent_sends_fails():
    with pytest.raises(MergeError):
        merge((N.SendTo("q", Lit(1)),), (N.SendTo("q", Lit(2)),))


KNOWN = """
process p q
init p.b = true
if p.b {
  p -> q[L]
  p.1 -> q.x
} else {
  p -> q[R]
  q.y := 2
}
"""

UNKNOWN = """
process p q
init p.b = true
if p.b {
  p.1 -> q.x
} else {
  q.y := 2
}
"""


def test_projectability_with_selections():
    saga = parse_chor(KNOWN)
    assert check_projectability(saga.chor, saga.env.processes).ok


def test_projectability_without_selection_names_process():
    saga = parse_chor(UNKNOWN)
    res = check_projectability(saga.chor, saga.env.processes)
    assert not res.ok
    assert len(res.diagnostics) == 1 and "process q" in res.diagnostics[0]


def test_straight_line_projectable():
    assert check_projectability(SEND).ok


@pytest.mark.parametrize("guard", ["true", "false"])
def test_merged_branch_runs_to_completion(guard):
    # the merged receiver must follow either choice; exploring the projection shows it does
    saga = parse_chor(KNOWN.replace("init p.b = true", f"init p.b = {guard}"))
    rep = explore_exhaustive(saga, FaultPolicy(mode=EXHAUSTIVE))
    assert rep.ok and len(rep.terminals) == 1
    final, = rep.terminals
    assert all(final.program(r) == () for r in ("p", "q"))


def test_geq_is_branch_pruning():
    big = (N.Branch("p", (("L", ()), ("R", ()))),)
    small = (N.Branch("p", (("L", ()),)),)
    assert prog_geq(big, small)
    assert not prog_geq(small, big)
    assert prog_geq(small, small)
    assert net_geq({"q": big}, {"q": small}, ["q"])


def test_projection_is_homomorphic_on_sequencing():
    instr = C.Send("p", Lit(1), "q", "x")
    rest = (C.Assign("q", "y", Var("x")),)
    for r in ("p", "q"):
        assert project((instr,) + rest, r) == project((instr,), r) + project(rest, r)
