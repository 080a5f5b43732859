import numpy as np
import pytest

from fedring.chain import TensorChain, dispatch, validate_chain
from fedring.errors import KindMismatch, ObjectNotFound, UnknownCommand
from fedring.fixedpoint import FixedPointConfig
from fedring.tensor import Dtype, Tensor
from fedring.workers import virtual_federation


@pytest.fixture
def fed():
    fed, _ = virtual_federation(["alice", "bob"], seed=0)
    return fed


class TestValidator:
    def test_valid_chains(self):
        t = Tensor(np.array([1.0]), Dtype.FLOAT64)
        assert validate_chain([("local", t)])
        assert validate_chain([("pointer", "alice", 1)])
        assert validate_chain([("fixed_precision", 16), ("local", t)])
        assert validate_chain([("shared", [("alice", 1), ("bob", 2)])])

    def test_pointer_has_no_child(self):
        t = Tensor(np.array([1.0]), Dtype.FLOAT64)
        with pytest.raises(KindMismatch):
            validate_chain([("pointer", "alice", 1), ("local", t)])

    def test_fixed_precision_needs_child(self):
        with pytest.raises(KindMismatch):
            validate_chain([("fixed_precision", 16)])

    def test_shared_needs_distinct_workers(self):
        with pytest.raises(KindMismatch):
            validate_chain([("shared", [("alice", 1), ("alice", 2)])])
        with pytest.raises(KindMismatch):
            validate_chain([("shared", [("alice", 1)])])


class TestDispatchLocal:
    def test_add(self):
        a = TensorChain.local([1.0, 2.0])
        b = TensorChain.local([3.0, 4.0])
        out = dispatch("add", a, b)
        assert out.kind == "local"
        assert np.array_equal(out.tensor().data, [4.0, 6.0])

    def test_unknown_command(self):
        with pytest.raises(UnknownCommand):
            dispatch("frobnicate", TensorChain.local([1.0]))

    def test_kind_mismatch(self, fed):
        a = TensorChain.local([1.0], fed=fed)
        b = TensorChain.local([1.0], fed=fed).send("alice")
        with pytest.raises(KindMismatch):
            dispatch("add", a, b)


class TestSendGet:
    def test_send_stores_and_rewrites(self, fed):
        x = TensorChain.local([1.0, 2.0, 3.0], fed=fed)
        p = x.send("alice")
        assert p.kind == "pointer"
        assert len(p.nodes) == 1  # head + Pointer, nothing below
        assert fed.worker("alice").core.object_count() == 1

    def test_roundtrip_bit_identical(self, fed):
        data = np.random.default_rng(0).normal(size=(3, 4))
        x = TensorChain.local(data, fed=fed)
        back = x.send("bob").get()
        assert back.kind == "local"
        assert len(back.nodes) == 1
        assert np.array_equal(back.tensor().data, data)

    def test_get_twice_not_found(self, fed):
        p = TensorChain.local([1.0], fed=fed).send("alice")
        p.get()
        with pytest.raises(ObjectNotFound):
            p.get()

    def test_send_pointer_rejected(self, fed):
        p = TensorChain.local([1.0], fed=fed).send("alice")
        with pytest.raises(KindMismatch):
            p.send("bob")


class TestPointerDispatch:
    def test_remote_add(self, fed):
        a = TensorChain.local([1.0, 2.0], fed=fed).send("alice")
        b = TensorChain.local([3.0, 4.0], fed=fed).send("alice")
        c = dispatch("add", a, b)
        assert c.kind == "pointer"
        assert np.array_equal(c.get().tensor().data, [4.0, 6.0])

    def test_cross_worker_rejected(self, fed):
        a = TensorChain.local([1.0], fed=fed).send("alice")
        b = TensorChain.local([1.0], fed=fed).send("bob")
        with pytest.raises(KindMismatch):
            dispatch("add", a, b)

    def test_transport_transparency_property(self, fed):
        """dispatch(cmd, send(x), send(y)).get() == dispatch(cmd, x, y)."""
        rng = np.random.default_rng(1)
        for cmd in ("add", "sub", "mul"):
            x = rng.normal(size=(2, 3))
            y = rng.normal(size=(2, 3))
            local = dispatch(cmd, TensorChain.local(x), TensorChain.local(y))
            remote = dispatch(
                cmd,
                TensorChain.local(x, fed=fed).send("alice"),
                TensorChain.local(y, fed=fed).send("alice"),
            ).get()
            assert np.array_equal(local.tensor().data, remote.tensor().data)
        for cmd in ("neg", "sigmoid_poly"):
            x = rng.normal(size=5)
            local = dispatch(cmd, TensorChain.local(x))
            remote = dispatch(cmd, TensorChain.local(x, fed=fed).send("bob")).get()
            assert np.array_equal(local.tensor().data, remote.tensor().data)


class TestFixedPrecision:
    def test_roundtrip_bound(self):
        xs = np.random.default_rng(2).uniform(-100, 100, size=64)
        chain = TensorChain.local(xs).fix_precision()
        back = chain.float_precision()
        assert np.max(np.abs(back.tensor().data - xs)) <= 2.0**-17

    def test_zero(self):
        chain = TensorChain.local([0.0]).fix_precision()
        assert chain.leaf[1].data[0] == 0

    def test_fig3_kind_sequence(self, fed):
        rng = np.random.default_rng(3)
        chain = TensorChain.local([[1.0, -2.0]], fed=fed).fix_precision()
        shared = chain.share(["alice", "bob"], rng)
        assert [n[0] for n in shared.nodes] == ["fixed_precision", "shared"]

    def test_fp_mul_truncates(self):
        a = TensorChain.local([1.5]).fix_precision()
        b = TensorChain.local([2.0]).fix_precision()
        out = dispatch("mul", a, b)
        assert out.kind == "fixed_precision"
        assert abs(out.float_precision().tensor().data[0] - 3.0) <= 2.0**-15

    def test_requires_local_float(self):
        with pytest.raises(KindMismatch):
            TensorChain.local(
                Tensor(np.array([1], dtype=np.uint64), Dtype.RING64)
            ).fix_precision()


class TestSharedChain:
    def test_share_get_roundtrip(self, fed):
        rng = np.random.default_rng(4)
        data = np.array([[1.5, -2.25], [0.5, 3.0]])
        chain = TensorChain.local(data, fed=fed).fix_precision()
        shared = chain.share(["alice", "bob"], rng)
        back = shared.get().float_precision()
        assert np.array_equal(back.tensor().data, data)

    def test_remote_share_leader_blind(self, fed):
        """Sharing a pointed-to tensor happens on the owning worker."""
        rng = np.random.default_rng(5)
        chain = TensorChain.local([[7.0, 8.0]], fed=fed).fix_precision().send("alice")
        shared = chain.share(["alice", "bob"])
        assert shared.leaf[0] == "shared"
        back = shared.get().float_precision()
        assert np.array_equal(back.tensor().data, [[7.0, 8.0]])

    def test_shared_add(self, fed):
        rng = np.random.default_rng(6)
        a = TensorChain.local([1.0, 2.0], fed=fed).fix_precision().share(["alice", "bob"], rng)
        b = TensorChain.local([3.0, 4.5], fed=fed).fix_precision().share(["alice", "bob"], rng)
        out = dispatch("add", a, b)
        got = out.get().float_precision().tensor().data
        assert np.array_equal(got, [4.0, 6.5])
