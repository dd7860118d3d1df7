"""Invariants checked over generated choreographies and random executions."""

import uuid

from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as hs

from chorsaga import chor as C
from chorsaga import net as N
from chorsaga.dsl import format_saga, parse_chor
from chorsaga.generator import ChorGenSpec, generate_saga
from chorsaga.projection import project
from chorsaga.runtime.wire import Frame, Kind, decode_frame, encode_frame
from chorsaga.sim import FaultPolicy, run_random
from chorsaga.state import COMPENSATE_EV, RESTART_EV
from chorsaga.trace import _view, cfg_congruent, prec, prune_all, verify_prec_chain

SETTINGS = settings(max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow])

specs = hs.builds(ChorGenSpec, n_procs=hs.integers(2, 3), depth=hs.integers(0, 8),
                  seed=hs.integers(0, 2**32 - 1))


def random_trace(spec, k, seed, exact=False):
    return run_random(generate_saga(spec), FaultPolicy(max_restarts=k, restart_rate=0.3, exact=exact), seed)


@SETTINGS
@given(specs, hs.integers(0, 2), hs.integers(0, 1000))
def test_k_write_once_and_active_set_shrinks(spec, k, seed):
    t = random_trace(spec, k, seed)
    for a, b in zip(t.configs, t.configs[1:]):
        assert all(b.K.get(key) == v for key, v in a.K.items())
        assert b.A <= a.A


@SETTINGS
@given(specs, hs.integers(0, 1000))
def test_step_enumeration_is_deterministic(spec, seed):
    t = random_trace(spec, 1, seed)
    for cfg in t.configs:
        assert N.enumerate_net_steps(cfg, True) == N.enumerate_net_steps(cfg, True)


@SETTINGS
@given(specs, hs.integers(0, 1000))
def test_restart_keeps_durable_state(spec, seed):
    t = random_trace(spec, 0, seed)
    for cfg in t.configs[:: max(1, len(t) // 4)]:
        for p in cfg.env.processes:
            r = N.restart_process(cfg, p)
            assert r.K == cfg.K and r.T == cfg.T and r.A == cfg.A


@SETTINGS
@given(specs, hs.integers(0, 1000))
def test_steps_frame_other_processes(spec, seed):
    t = random_trace(spec, 1, seed)
    for cfg in t.configs:
        for mu, nxt in N.enumerate_net_steps(cfg, True):
            if mu.kind == COMPENSATE_EV:
                continue
            for q in cfg.env.processes:
                if q != mu.pn:
                    assert nxt.program(q) == cfg.program(q)
                    assert _view(nxt, q)[1] == _view(cfg, q)[1]


@SETTINGS
@given(specs, hs.integers(0, 1000))
def test_replay_converges_or_compensates(spec, seed):
    t = random_trace(spec, 0, seed)
    for cfg in t.configs:
        for p in sorted(cfg.A):
            before = _view(cfg, p)
            cur = N.restart_process(cfg, p)
            outcome = None
            for _ in range(200):
                if _view(cur, p) == before:
                    outcome = "converged"
                    break
                mine = [(mu, c) for mu, c in N.enumerate_net_steps(cur) if mu.pn == p]
                normal = [s for s in mine if s[0].kind != COMPENSATE_EV]
                if not normal:
                    outcome = "compensated" if mine else None
                    break
                cur = normal[0][1]
            assert outcome is not None, f"replay of {p} stuck"
            if outcome == "converged":
                assert cur.K == cfg.K and cur.T == cfg.T


@SETTINGS
@given(specs, hs.integers(0, 1000))
def test_congruence_is_an_equivalence(spec, seed):
    cfgs = random_trace(spec, 2, seed).configs[:12]
    for a in cfgs:
        assert cfg_congruent(a, a)
        for b in cfgs:
            assert cfg_congruent(a, b) == cfg_congruent(b, a)
            if cfg_congruent(a, b):
                assert all(cfg_congruent(a, c) for c in cfgs if cfg_congruent(b, c))


@SETTINGS
@given(specs, hs.integers(0, 1000))
def test_prec_reflexive(spec, seed):
    t = random_trace(spec, 1, seed)
    assert prec(t, t)


@SETTINGS
@given(specs, hs.integers(1, 3), hs.integers(0, 1000))
def test_pruning_recovers(spec, k, seed):
    t = random_trace(spec, k, seed, exact=True)
    assert t.restart_count == k
    chain = prune_all(t)
    assert chain[-1].restart_count == 0
    assert verify_prec_chain(chain)
    assert cfg_congruent(chain[-1].final, t.final)
    assert chain[-1].final.T == t.final.T


@SETTINGS
@given(specs)
def test_projection_homomorphic(spec):
    chor = generate_saga(spec).chor
    for n, instr in enumerate(chor):
        if type(instr) not in (C.Send, C.Assign, C.Trans):
            break
        for r in ("p0", "p1", "p2"):
            assert project(chor[n:], r) == project((instr,), r) + project(chor[n + 1:], r)


@SETTINGS
@given(specs)
def test_dsl_round_trip(spec):
    saga = generate_saga(spec)
    back = parse_chor(format_saga(saga))
    assert back.chor == saga.chor
    assert back.env.processes == saga.env.processes
    assert dict(back.env.sigma_start) == dict(saga.env.sigma_start)


text = hs.text(max_size=40)


@SETTINGS
@given(hs.sampled_from(list(Kind)), hs.uuids(), text, text, hs.integers(0, 2**64 - 1),
       hs.binary(max_size=200), hs.lists(hs.tuples(text, text), max_size=3))
def test_frame_round_trip(kind, sid, chor_id, sender, seq, payload, tele):
    f = Frame(kind, sid, chor_id, sender, seq, payload, tuple(tele))
    assert decode_frame(encode_frame(f)) == f


def test_frame_uuid_type():
    f = Frame(Kind.ACK, uuid.uuid4(), "c", "s", 0)
    assert isinstance(decode_frame(encode_frame(f)).session_id, uuid.UUID)
