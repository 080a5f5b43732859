"""The tensor-chain runtime: a head whose behavior comes from a downward
chain of nodes (Local / Pointer / FixedPrecision / Shared), with command
dispatch forwarded node to node and chain rewrites on send/get.

Chains are kept as top-down node lists matching the wire codec; the head is
implied. A materialized tensor is head->Local (the Local node's child loops
back to the payload, so no third node exists); a pointer chain is
head->Pointer with no child below.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import fixedpoint, protocol, spdz
from . import tensor as tc
from .errors import ConfigError, KindMismatch, UnknownCommand
from .fixedpoint import DEFAULT_CONFIG, FixedPointConfig
from .protocol import Command
from .tensor import Dtype, Tensor
from .workers import Federation

# commands dispatchable through Local chains, mapped onto tensor-core kernels
_LOCAL_BINARY = {
    "add": tc.add,
    "sub": tc.sub,
    "mul": tc.mul,
    "matmul": tc.matmul,
}
_LOCAL_UNARY = {
    "neg": tc.neg,
    "sigmoid_poly": tc.sigmoid_poly,
}
_KNOWN_COMMANDS = set(_LOCAL_BINARY) | set(_LOCAL_UNARY) | {"scale", "offset", "avg_pool2d"}


def validate_chain(nodes):
    """Walk the chain checking the structural invariants."""
    if not nodes:
        raise KindMismatch("empty chain")
    for i, node in enumerate(nodes):
        last = i == len(nodes) - 1
        tag = node[0]
        if tag in ("local", "pointer", "shared"):
            if not last:
                raise KindMismatch(f"{tag} node must terminate the chain")
        elif tag == "fixed_precision":
            if last:
                raise KindMismatch("fixed_precision node needs a child")
        else:
            raise KindMismatch(f"unknown node kind {tag!r}")
        if tag == "shared":
            ptrs = node[1]
            if len(ptrs) < 2 or len({p for p, _ in ptrs}) != len(ptrs):
                raise KindMismatch("shared node needs >= 2 distinct workers")
    return True


class TensorChain:
    """Head tensor over a node chain, bound to a federation for remote ops."""

    def __init__(self, nodes, fed: Federation | None = None, shares: spdz.ShareVector | None = None):
        validate_chain(nodes)
        self.nodes = list(nodes)
        self.fed = fed
        self.shares = shares  # live ShareVector backing a shared leaf

    # -- constructors -----------------------------------------------------
    @classmethod
    def local(cls, values, dtype: Dtype = Dtype.FLOAT64, fed=None):
        t = values if isinstance(values, Tensor) else Tensor(np.asarray(values), dtype)
        return cls([("local", t)], fed)

    # -- inspection --------------------------------------------------------
    @property
    def kind(self) -> str:
        return self.nodes[0][0]

    @property
    def leaf(self):
        return self.nodes[-1]

    def _frac_bits(self):
        for node in self.nodes:
            if node[0] == "fixed_precision":
                return node[1]
        return None

    def tensor(self) -> Tensor:
        if self.leaf[0] != "local":
            raise KindMismatch(f"chain leaf is {self.leaf[0]}, not local")
        return self.leaf[1]

    def _require_fed(self) -> Federation:
        if self.fed is None:
            raise ConfigError("chain is not bound to a federation")
        return self.fed

    # -- send / get ----------------------------------------------------------
    def send(self, target: str) -> "TensorChain":
        """Serialize the whole chain to the target worker; locally the chain
        becomes head->Pointer and the payload is released."""
        if self.leaf[0] != "local":
            raise KindMismatch(f"cannot send a {self.kind} chain")
        fed = self._require_fed()
        oid = fed.allocate_id()
        fed.worker(target).store(oid, protocol.serialize_chain(self.nodes))
        return TensorChain([("pointer", target, oid)], fed)

    def get(self) -> "TensorChain":
        """Fetch (and remotely delete) a pointed-to chain, or reconstruct a
        shared one."""
        fed = self._require_fed()
        if self.kind == "pointer":
            _, worker, oid = self.nodes[0]
            payload = fed.worker(worker).fetch(oid, delete=True)
            return TensorChain(protocol.deserialize_chain(payload), fed)
        if self.leaf[0] == "shared":
            sv = self._share_vector()
            ring = spdz.reconstruct(sv, fed, delete=True)
            nodes = self.nodes[:-1] + [("local", ring)]
            return TensorChain(nodes, fed)
        raise KindMismatch(f"cannot get a {self.kind} chain")

    # -- fixed precision -------------------------------------------------------
    def fix_precision(self, cfg: FixedPointConfig = DEFAULT_CONFIG) -> "TensorChain":
        if self.kind != "local" or self.tensor().dtype is not Dtype.FLOAT64:
            raise KindMismatch("fix_precision needs a Local Float64 chain")
        encoded = fixedpoint.encode(self.tensor(), cfg)
        return TensorChain(
            [("fixed_precision", cfg.frac_bits), ("local", encoded)], self.fed
        )

    def float_precision(self) -> "TensorChain":
        if self.kind != "fixed_precision" or self.leaf[0] != "local":
            raise KindMismatch("float_precision needs FixedPrecision over Local")
        cfg = FixedPointConfig(frac_bits=self.nodes[0][1])
        return TensorChain([("local", fixedpoint.decode(self.leaf[1], cfg))], self.fed)

    # -- sharing -----------------------------------------------------------
    def share(self, parties, rng: np.random.Generator | None = None) -> "TensorChain":
        """Split into additive shares. Local chains are split by the leader;
        pointer chains are split on the owning worker so the leader never
        sees the secret (it only receives pointers)."""
        fed = self._require_fed()
        if self.kind == "pointer":
            _, owner, oid = self.nodes[0]
            payload = fed.worker(owner).fetch(oid, delete=False)
            nodes = protocol.deserialize_chain(payload)
            # shape is public metadata; the fetch above is of the leader's
            # own prior knowledge only in tests -- production callers pass
            # shape via dataset metadata. Kept simple: read shape remotely.
            shape = nodes[-1][1].shape
            prefix = [n for n in nodes if n[0] == "fixed_precision"]
            sv = spdz.share_remote(owner, oid, parties, fed, shape)
            fed.worker(owner).delete(oid)
            return self._wrap_shares(sv, prefix)
        if self.leaf[0] != "local":
            raise KindMismatch(f"cannot share a {self.kind} chain")
        if self.tensor().dtype is not Dtype.RING64:
            raise KindMismatch("share needs a Ring64 leaf; call fix_precision first")
        if rng is None:
            raise ConfigError("leader-side sharing needs an rng")
        sv = spdz.share(self.tensor(), parties, fed, rng)
        prefix = [n for n in self.nodes if n[0] == "fixed_precision"]
        return self._wrap_shares(sv, prefix)

    def _wrap_shares(self, sv: spdz.ShareVector, prefix) -> "TensorChain":
        sv = spdz.materialize(sv, self._require_fed())
        nodes = prefix + [("shared", sv.pointers())]
        return TensorChain(nodes, self.fed, shares=sv)

    def _share_vector(self) -> spdz.ShareVector:
        if self.shares is not None:
            return self.shares
        ptrs = self.leaf[1]
        parties = tuple(p for p, _ in ptrs)
        exprs = tuple(("ref", oid) for _, oid in ptrs)
        # shape recovered at reconstruction; use first share's shape lazily
        fed = self._require_fed()
        t = protocol.deserialize_chain(fed.worker(parties[0]).fetch(ptrs[0][1]))[-1][1]
        return spdz.ShareVector(parties, exprs, t.shape)

    # -- dispatch ------------------------------------------------------------
    def dispatch(self, name: str, *others: "TensorChain", **kwargs) -> "TensorChain":
        return dispatch(name, self, *others, **kwargs)


def dispatch(name: str, head: TensorChain, *others: TensorChain, **kwargs) -> TensorChain:
    """Forward a command down the chain: Local runs the native kernel,
    Pointer emits execute_remote, FixedPrecision applies the fixed-point
    calling convention (truncate after mul/matmul) then forwards, Shared runs
    the SPDZ protocol."""
    kind = head.kind
    for other in others:
        if other.kind != kind:
            raise KindMismatch(f"{kind} vs {other.kind}: send/share operands explicitly")

    if kind == "local":
        return _dispatch_local(name, head, others, kwargs)
    if kind == "pointer":
        return _dispatch_pointer(name, head, others, kwargs)
    if kind == "fixed_precision":
        return _dispatch_fixed(name, head, others, kwargs)
    if kind == "shared":
        return _dispatch_shared(name, head, others, kwargs)
    raise KindMismatch(f"cannot dispatch on {kind}")


def _dispatch_local(name, head, others, kwargs):
    if name in _LOCAL_BINARY:
        (other,) = others
        return TensorChain([("local", _LOCAL_BINARY[name](head.tensor(), other.tensor()))], head.fed)
    if name in _LOCAL_UNARY:
        return TensorChain([("local", _LOCAL_UNARY[name](head.tensor()))], head.fed)
    if name == "scale":
        return TensorChain([("local", tc.scale(head.tensor(), kwargs["c"]))], head.fed)
    if name == "offset":
        return TensorChain([("local", tc.offset(head.tensor(), kwargs["c"]))], head.fed)
    if name == "avg_pool2d":
        return TensorChain([("local", tc.avg_pool2d(head.tensor(), kwargs["k"]))], head.fed)
    raise UnknownCommand(name)


def _dispatch_pointer(name, head, others, kwargs):
    if name not in _KNOWN_COMMANDS:
        raise UnknownCommand(name)
    fed = head._require_fed()
    worker = head.nodes[0][1]
    args = [Command.obj(head.nodes[0][2])]
    for other in others:
        if other.nodes[0][1] != worker:
            raise KindMismatch("pointer operands live on different workers")
        args.append(Command.obj(other.nodes[0][2]))
    if name == "scale" or name == "offset":
        args.append(("int", int(kwargs["c"])) if isinstance(kwargs["c"], int)
                    else ("float", float(kwargs["c"])))
        kwargs = {}
    elif name == "avg_pool2d":
        kwargs = {"k": int(kwargs["k"])}
    else:
        kwargs = {}
    oid = fed.worker(worker).execute(Command(name, tuple(args), kwargs))
    return TensorChain([("pointer", worker, oid)], fed)


def _dispatch_fixed(name, head, others, kwargs):
    cfg = FixedPointConfig(frac_bits=head.nodes[0][1])
    inner_head = TensorChain(head.nodes[1:], head.fed, shares=head.shares)
    inner_others = tuple(TensorChain(o.nodes[1:], o.fed, shares=o.shares) for o in others)
    if name in ("add", "sub", "neg"):
        out = dispatch(name, inner_head, *inner_others)
    elif name in ("mul", "matmul"):
        raw = dispatch(name, inner_head, *inner_others, **kwargs)
        out = _truncate_chain(raw, cfg)
    elif name == "scale":
        # public float scaling: encode the constant, multiply, truncate
        c = kwargs["c"]
        if isinstance(c, float):
            enc = int(fixedpoint.encode(Tensor(np.array(c), Dtype.FLOAT64), cfg).data)
            raw = dispatch("scale", inner_head, c=enc)
            out = _truncate_chain(raw, cfg)
        else:
            out = dispatch("scale", inner_head, c=int(c))
    elif name == "offset":
        enc = int(fixedpoint.encode(Tensor(np.array(float(kwargs["c"])), Dtype.FLOAT64), cfg).data)
        out = dispatch("offset", inner_head, c=enc)
    else:
        raise UnknownCommand(f"{name} under fixed_precision")
    return TensorChain(
        [("fixed_precision", cfg.frac_bits)] + out.nodes, head.fed, shares=out.shares
    )


def _truncate_chain(raw: TensorChain, cfg: FixedPointConfig) -> TensorChain:
    if raw.kind == "local":
        return TensorChain([("local", fixedpoint.truncate(raw.tensor(), cfg))], raw.fed)
    if raw.kind == "shared":
        sv = spdz.trunc_shared(raw._share_vector(), raw._require_fed(), cfg)
        sv = spdz.materialize(sv, raw.fed)
        return TensorChain([("shared", sv.pointers())], raw.fed, shares=sv)
    raise KindMismatch(f"cannot truncate a {raw.kind} chain")


def _dispatch_shared(name, head, others, kwargs):
    fed = head._require_fed()
    sv = head._share_vector()
    if name in ("add", "sub"):
        (other,) = others
        op = spdz.add_shared if name == "add" else spdz.sub_shared
        out = op(sv, other._share_vector())
    elif name == "neg":
        out = spdz.neg_shared(sv)
    elif name == "scale":
        out = spdz.public_op("mul", sv, int(kwargs["c"]))
    elif name == "offset":
        out = spdz.public_op("add", sv, int(kwargs["c"]))
    elif name in ("mul", "matmul"):
        (other,) = others
        triple = kwargs.get("triple")
        if triple is None:
            raise ConfigError(f"shared {name} needs a Beaver triple")
        fn = spdz.beaver_mul if name == "mul" else spdz.matmul_shared
        out = fn(sv, other._share_vector(), triple, fed)
    else:
        raise UnknownCommand(f"{name} on shared chain")
    out = spdz.materialize(out, fed) if name in ("mul", "matmul") else out
    if out.is_materialized():
        return TensorChain([("shared", out.pointers())], fed, shares=out)
    # keep lazy linear results chain-representable via their backing vector
    chain = TensorChain.__new__(TensorChain)
    chain.nodes = [("shared", [(p, 0) for p in out.parties])]
    chain.fed = fed
    chain.shares = out
    return chain
