"""Canonical JSON forms of programs and network configurations.

Digests of configurations are ``sha256`` over :func:`values.canonical_json`
of :func:`encode_net_config`; two implementations that agree on this
encoding agree on digests.
"""

from __future__ import annotations

from . import net as N_
from .state import Comp, Commit, Env, FrozenMap, TransitionLabel, builtin_transaction
from .values import decode_expr, decode_value, digest, encode_expr, encode_value


def encode_program(P: tuple) -> list:
    out = []
    for i in P:
        t = type(i)
        if t is N_.SendTo:
            out.append({"op": "send", "to": i.q, "e": encode_expr(i.e)})
        elif t is N_.RecvFrom:
            out.append({"op": "recv", "from": i.p, "x": i.x})
        elif t is N_.Select:
            out.append({"op": "select", "to": i.q, "label": i.label})
        elif t is N_.Branch:
            out.append({"op": "branch", "from": i.p,
                        "branches": [[lab, encode_program(P2)] for lab, P2 in i.branches]})
        elif t is N_.Assign:
            out.append({"op": "assign", "x": i.x, "e": encode_expr(i.e)})
        elif t is N_.Cond:
            out.append({"op": "if", "e": encode_expr(i.e),
                        "then": encode_program(i.then), "else": encode_program(i.orelse)})
        elif t is N_.Trans:
            out.append({"op": "trans", "x": i.x, "t": i.t, "e": encode_expr(i.e)})
        else:
            raise TypeError(f"not a process instruction: {i!r}")
    return out


def decode_program(data: list) -> tuple:
    out = []
    for d in data:
        op = d["op"]
        if op == "send":
            out.append(N_.SendTo(d["to"], decode_expr(d["e"])))
        elif op == "recv":
            out.append(N_.RecvFrom(d["from"], d["x"]))
        elif op == "select":
            out.append(N_.Select(d["to"], d["label"]))
        elif op == "branch":
            out.append(N_.Branch(d["from"], tuple((lab, decode_program(P)) for lab, P in d["branches"])))
        elif op == "assign":
            out.append(N_.Assign(d["x"], decode_expr(d["e"])))
        elif op == "if":
            out.append(N_.Cond(decode_expr(d["e"]), decode_program(d["then"]), decode_program(d["else"])))
        elif op == "trans":
            out.append(N_.Trans(d["x"], d["t"], decode_expr(d["e"])))
        else:
            raise ValueError(f"unknown instruction {op!r}")
    return tuple(out)


def _encode_entry(e) -> dict:
    if type(e) is Commit:
        return {"commit": e.t, "in": encode_value(e.input), "out": encode_value(e.output)}
    return {"comp": _encode_entry(e.of)}


def _decode_entry(d):
    if "comp" in d:
        return Comp(_decode_entry(d["comp"]))
    return Commit(d["commit"], decode_value(d["in"]), decode_value(d["out"]))


def encode_store(sigma: FrozenMap) -> list:
    return sorted([p, x, encode_value(v)] for (p, x), v in sigma.items())


def decode_store(rows) -> FrozenMap:
    return FrozenMap({(p, x): decode_value(v) for p, x, v in rows})


def encode_net_config(cfg: N_.NetConfig) -> dict:
    return {
        "N": {p: encode_program(P) for p, P in sorted(cfg.N.items())},
        "sigma": encode_store(cfg.sigma),
        "K": sorted([p, q, i, encode_value(v)] for (p, q, i), v in cfg.K.items()),
        "S": sorted([p, q, d, n] for (p, q, d), n in cfg.S.items() if n),
        "T": {p: [_encode_entry(e) for e in log] for p, log in sorted(cfg.T.items()) if log},
        "A": sorted(cfg.A),
    }


def decode_net_config(d: dict, env: Env) -> N_.NetConfig:
    return N_.NetConfig(
        FrozenMap({p: decode_program(P) for p, P in d["N"].items()}),
        decode_store(d["sigma"]),
        FrozenMap({(p, q, i): decode_value(v) for p, q, i, v in d["K"]}),
        FrozenMap({(p, q, dr): n for p, q, dr, n in d["S"]}),
        FrozenMap({p: tuple(_decode_entry(e) for e in log) for p, log in d["T"].items()}),
        frozenset(d["A"]),
        env,
    )


def config_digest(cfg: N_.NetConfig) -> str:
    return digest(encode_net_config(cfg))


def encode_label(mu: TransitionLabel) -> dict:
    d = {"kind": mu.kind, "p": mu.p}
    if mu.q is not None:
        d["q"] = mu.q
    if mu.value is not None:
        if mu.kind in ("selsend", "selrecv"):
            d["value"] = {"label": mu.value}
        else:
            d["value"] = encode_value(mu.value)
    return d


def decode_label(d: dict) -> TransitionLabel:
    v = d.get("value")
    if v is not None:
        v = v["label"] if d["kind"] in ("selsend", "selrecv") else decode_value(v)
    return TransitionLabel(d["kind"], d["p"], d.get("q"), v)


def encode_env(env: Env) -> dict:
    tx = {}
    for name, tdef in sorted(env.transactions.items()):
        if tdef.spec is None:
            raise ValueError(f"transaction {name} has no serializable description")
        tx[name] = list(tdef.spec)
    return {
        "processes": list(env.processes),
        "sigma_start": encode_store(env.sigma_start),
        "n_start": {p: encode_program(P) for p, P in sorted((env.n_start or {}).items())},
        "transactions": tx,
    }


def decode_env(d: dict, functions=None) -> Env:
    kw = {} if functions is None else {"functions": functions}
    tx = {name: builtin_transaction(name, *spec) for name, spec in d["transactions"].items()}
    return Env(
        tuple(d["processes"]),
        transactions=tx,
        sigma_start=decode_store(d["sigma_start"]),
        n_start=FrozenMap({p: decode_program(P) for p, P in d["n_start"].items()}),
        **kw,
    )
