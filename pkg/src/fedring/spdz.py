"""SPDZ-style additive secret sharing over Z_Q, orchestrated by the leader.

Shares live on the workers; the leader holds only per-party references. The
linear layer (add/sub/neg, public scale and offset) is evaluated lazily: each
party's share is a small expression tree over object ids, collapsed to a
single remote object only when a multiplication opening, truncation or
reconstruction forces it. Linear operations therefore cross zero transport
messages, and every Beaver multiplication opens exactly two values (eps,
delta) regardless of operand size.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import protocol
from .errors import (
    ConfigError,
    InsufficientTriples,
    PartyMismatch,
    ShapeMismatch,
    TripleReused,
    TripleShapeMismatch,
)
from .fixedpoint import DEFAULT_CONFIG, FixedPointConfig, Q
from .protocol import Command
from .tensor import Dtype, Tensor
from .workers import Federation

_MASK = np.uint64(Q - 1)

# share expressions: ('ref', oid) | ('add'|'sub', a, b) | ('neg', a)
#                  | ('scale', a, c) | ('offset', a, c)   with c a ring residue


def _local_chain(t: Tensor) -> bytes:
    return protocol.serialize_chain([("local", t)])


def _fetch_tensor(fed: Federation, party: str, oid: int, delete: bool = False) -> Tensor:
    nodes = protocol.deserialize_chain(fed.worker(party).fetch(oid, delete))
    return nodes[-1][1]


@dataclass(frozen=True)
class ShareVector:
    """One secret: an ordered party list and one share expression per party."""

    parties: tuple
    exprs: tuple
    shape: tuple

    def __post_init__(self):
        if len(self.parties) != len(self.exprs):
            raise PartyMismatch("one expression per party required")

    @property
    def n_parties(self) -> int:
        return len(self.parties)

    def is_materialized(self) -> bool:
        return all(e[0] == "ref" for e in self.exprs)

    def pointers(self):
        if not self.is_materialized():
            raise ConfigError("share vector not materialized")
        return [(p, e[1]) for p, e in zip(self.parties, self.exprs)]


def _check_parties(xs: ShareVector, ys: ShareVector):
    if xs.parties != ys.parties:
        raise PartyMismatch(f"{xs.parties} vs {ys.parties}")
    if xs.shape != ys.shape:
        raise ShapeMismatch(f"{xs.shape} vs {ys.shape}")


def random_ring(rng: np.random.Generator, shape) -> np.ndarray:
    return rng.integers(0, Q, size=shape, dtype=np.uint64)


def share(x: Tensor, parties, fed: Federation, rng: np.random.Generator) -> ShareVector:
    """Leader-side split of a leader-owned Ring64 tensor."""
    parties = tuple(parties)
    if len(parties) < 2:
        raise ConfigError("need at least 2 parties")
    if x.dtype is not Dtype.RING64:
        raise ConfigError("share expects a Ring64 tensor")
    shares = [random_ring(rng, x.shape) for _ in range(len(parties) - 1)]
    total = np.zeros(x.shape, dtype=np.uint64)
    for s in shares:
        total = (total + s) & _MASK
    shares.append((x.data - total) & _MASK)
    exprs = []
    for party, s in zip(parties, shares):
        oid = fed.allocate_id()
        fed.worker(party).store(oid, _local_chain(Tensor(s, Dtype.RING64)))
        exprs.append(("ref", oid))
    return ShareVector(parties, tuple(exprs), x.shape)


def share_remote(owner: str, oid: int, parties, fed: Federation, shape) -> ShareVector:
    """Split a worker-resident Ring64 tensor without the leader seeing it:
    the owner splits locally and pushes shares to its peers; only the share
    object ids return to the leader."""
    parties = tuple(parties)
    if len(parties) < 2:
        raise ConfigError("need at least 2 parties")
    cmd = Command("make_shares", (Command.obj(oid),), {"parties": ",".join(parties)})
    rid = fed.worker(owner).execute(cmd)
    ids = _fetch_tensor(fed, owner, rid, delete=True)
    exprs = tuple(("ref", int(v)) for v in ids.data)
    return ShareVector(parties, exprs, tuple(shape))


def materialize(sv: ShareVector, fed: Federation) -> ShareVector:
    """Collapse each party's expression to a single stored object."""
    exprs = []
    for party, expr in zip(sv.parties, sv.exprs):
        exprs.append(("ref", _eval_expr(fed, party, expr)))
    return replace(sv, exprs=tuple(exprs))


def _eval_expr(fed: Federation, party: str, expr) -> int:
    op = expr[0]
    if op == "ref":
        return expr[1]
    handle = fed.worker(party)
    if op in ("add", "sub"):
        a = _eval_expr(fed, party, expr[1])
        b = _eval_expr(fed, party, expr[2])
        return handle.execute(Command(op, (Command.obj(a), Command.obj(b))))
    if op == "neg":
        a = _eval_expr(fed, party, expr[1])
        return handle.execute(Command("neg", (Command.obj(a),)))
    if op in ("scale", "offset"):
        a = _eval_expr(fed, party, expr[1])
        return handle.execute(Command(op, (Command.obj(a), ("int", int(expr[2])))))
    raise ConfigError(f"unknown share expression {op!r}")


def reconstruct(sv: ShareVector, fed: Federation, delete: bool = False) -> Tensor:
    sv = materialize(sv, fed)
    total = np.zeros(sv.shape, dtype=np.uint64)
    for party, oid in sv.pointers():
        t = _fetch_tensor(fed, party, oid, delete)
        if t.shape != sv.shape:
            raise ShapeMismatch(f"share shape {t.shape} != {sv.shape}")
        total = (total + t.data) & _MASK
    return Tensor(total, Dtype.RING64)


# -- linear layer (no communication) ----------------------------------------

def add_shared(xs: ShareVector, ys: ShareVector) -> ShareVector:
    _check_parties(xs, ys)
    exprs = tuple(("add", a, b) for a, b in zip(xs.exprs, ys.exprs))
    return replace(xs, exprs=exprs)


def sub_shared(xs: ShareVector, ys: ShareVector) -> ShareVector:
    _check_parties(xs, ys)
    exprs = tuple(("sub", a, b) for a, b in zip(xs.exprs, ys.exprs))
    return replace(xs, exprs=exprs)


def neg_shared(xs: ShareVector) -> ShareVector:
    return replace(xs, exprs=tuple(("neg", e) for e in xs.exprs))


def public_op(op: str, xs: ShareVector, c: int) -> ShareVector:
    """op='mul': scale every share by the public residue c; op='add': offset
    exactly one designated party's share (adding to all would reconstruct to
    x + n*c)."""
    c = int(c) % Q
    if op == "mul":
        exprs = tuple(("scale", e, c) for e in xs.exprs)
    elif op == "add":
        exprs = (("offset", xs.exprs[0], c),) + xs.exprs[1:]
    else:
        raise ConfigError(f"public_op supports add/mul, not {op!r}")
    return replace(xs, exprs=exprs)


# -- Beaver triples ----------------------------------------------------------

@dataclass
class BeaverTriple:
    kind: str  # elementwise | matmul
    shape: tuple  # elementwise: operand shape; matmul: (m, k, n)
    a: ShareVector
    b: ShareVector
    c: ShareVector
    consumed: bool = False


class TriplePool:
    """Dealer inventory keyed by (kind, shape); triples are take-once."""

    def __init__(self):
        self._pools: dict = {}

    def put(self, triple: BeaverTriple):
        self._pools.setdefault((triple.kind, triple.shape), []).append(triple)

    def take(self, kind: str, shape) -> BeaverTriple:
        pool = self._pools.get((kind, tuple(shape)), [])
        if not pool:
            raise InsufficientTriples(f"no {kind} triple of shape {tuple(shape)}")
        return pool.pop()

    def count(self, kind: str, shape) -> int:
        return len(self._pools.get((kind, tuple(shape)), []))


def dealer_generate(fed: Federation, dealer: str, kind: str, shape, parties, count: int):
    """Run triple preprocessing on the dealer worker; shares are pushed to
    the parties and only object ids return."""
    parties = tuple(parties)
    if count < 1:
        raise ConfigError("count must be >= 1")
    shape = tuple(int(s) for s in shape)
    if kind == "matmul" and len(shape) != 3:
        raise ConfigError("matmul triples need shape (m, k, n)")
    cmd = Command(
        "gen_triples",
        (),
        {"kind": kind, "shape": list(shape), "parties": ",".join(parties), "count": count},
    )
    rid = fed.worker(dealer).execute(cmd)
    ids = _fetch_tensor(fed, dealer, rid, delete=True).data  # [count, n, 3]
    if kind == "matmul":
        m, k, n = shape
        sh = {"a": (m, k), "b": (k, n), "c": (m, n)}
    else:
        sh = {"a": shape, "b": shape, "c": shape}
    triples = []
    for t in range(count):
        vec = {}
        for j, part in enumerate(("a", "b", "c")):
            exprs = tuple(("ref", int(ids[t, i, j])) for i in range(len(parties)))
            vec[part] = ShareVector(parties, exprs, sh[part])
        triples.append(BeaverTriple(kind, shape, vec["a"], vec["b"], vec["c"]))
    return triples


def _open(sv: ShareVector, fed: Federation) -> Tensor:
    """Open a masked value through the leader (star topology) and note the
    opening on the tap."""
    value = reconstruct(sv, fed, delete=True)
    if fed.tap is not None:
        fed.tap.note_opening()
    return value


def _broadcast(fed: Federation, parties, t: Tensor):
    """Store one public tensor on every party; returns per-party oids."""
    oids = {}
    payload = _local_chain(t)
    for party in parties:
        oid = fed.allocate_id()
        fed.worker(party).store(oid, payload)
        oids[party] = oid
    return oids


def _beaver(xs: ShareVector, ys: ShareVector, triple: BeaverTriple, fed: Federation,
            kind: str, out_shape) -> ShareVector:
    if triple.consumed:
        raise TripleReused("triple already consumed")
    if triple.kind != kind:
        raise TripleShapeMismatch(f"need {kind} triple, got {triple.kind}")
    if xs.shape != triple.a.shape or ys.shape != triple.b.shape:
        raise TripleShapeMismatch(
            f"operands {xs.shape}x{ys.shape} vs triple {triple.a.shape}x{triple.b.shape}"
        )
    if xs.parties != triple.a.parties:
        raise PartyMismatch("triple parties differ from operand parties")
    triple.consumed = True
    xs = materialize(xs, fed)
    ys = materialize(ys, fed)
    a, b, c = (materialize(v, fed) for v in (triple.a, triple.b, triple.c))
    eps = _open(sub_shared(xs, a), fed)
    delta = _open(sub_shared(ys, b), fed)
    eps_ids = _broadcast(fed, xs.parties, eps)
    delta_ids = _broadcast(fed, xs.parties, delta)
    exprs = []
    for i, party in enumerate(xs.parties):
        cmd = Command(
            "beaver_combine",
            (
                Command.obj(c.exprs[i][1]),
                Command.obj(a.exprs[i][1]),
                Command.obj(b.exprs[i][1]),
                Command.obj(eps_ids[party]),
                Command.obj(delta_ids[party]),
            ),
            {"kind": kind, "lead": int(i == 0)},
        )
        exprs.append(("ref", fed.worker(party).execute(cmd)))
    return ShareVector(xs.parties, tuple(exprs), tuple(out_shape))


def beaver_mul(xs: ShareVector, ys: ShareVector, triple: BeaverTriple,
               fed: Federation) -> ShareVector:
    if xs.shape != ys.shape:
        raise ShapeMismatch(f"{xs.shape} vs {ys.shape}")
    return _beaver(xs, ys, triple, fed, "elementwise", xs.shape)


def matmul_shared(xs: ShareVector, ys: ShareVector, triple: BeaverTriple,
                  fed: Federation) -> ShareVector:
    if len(xs.shape) != 2 or len(ys.shape) != 2 or xs.shape[1] != ys.shape[0]:
        raise ShapeMismatch(f"{xs.shape} x {ys.shape}")
    out_shape = (xs.shape[0], ys.shape[1])
    return _beaver(xs, ys, triple, fed, "matmul", out_shape)


def trunc_shared(sv: ShareVector, fed: Federation,
                 cfg: FixedPointConfig = DEFAULT_CONFIG) -> ShareVector:
    """Local truncation: party 0 shifts its share, the others shift the ring
    complement. Exact up to +-1 ulp except with probability ~2^(l+1-62) for
    l-significant-bit secrets; n>2 parties compound that error."""
    sv = materialize(sv, fed)
    exprs = []
    for role, (party, oid) in enumerate(sv.pointers()):
        cmd = Command(
            "trunc_share",
            (Command.obj(oid),),
            {"frac_bits": cfg.frac_bits, "role": role},
        )
        exprs.append(("ref", fed.worker(party).execute(cmd)))
    return replace(sv, exprs=tuple(exprs))
