"""Training loops: plain local SGD, federated SGD over workers, DP federated
SGD by phases, and MPC shared inference.

Reproducibility contract (all np.random streams are derived, never global):
    split       default_rng([split_seed, 1])   (data.load_dataset)
    init        default_rng([seed, 2])
    batch order default_rng([seed, 3, epoch, worker_index])
    DP worker pick default_rng([seed, 4])
    worker-side lots and noise: the worker's own rng (seed, name)
Identical seeds therefore give bit-identical weights on virtual and socket
transports: the command sequence, and hence every rng draw, is the same.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import fixedpoint, nn, spdz, tensor as tc
from .data import FederatedDataset
from .dp import MomentLedger, PrivacySpec
from .errors import ConfigError, LotTooLarge
from .fixedpoint import DEFAULT_CONFIG, FixedPointConfig
from .nn import TASK_BINARY, TASK_REGRESSION, Model
from .protocol import Command, serialize_chain
from .tensor import Dtype, Tensor
from .workers import Federation


@dataclass
class TrainConfig:
    dataset: str = "boston"
    seed: int = 1
    lr: float = 0.01
    epochs: int = 10
    batch_size: int = 32
    hidden: int = 32
    privacy: PrivacySpec | None = None
    lot_size: int = 32
    # DP recipe (kept stable under heavy noise; see README for rationale):
    # harmonic lr decay, tail iterate averaging, hidden max-norm projection,
    # and internally standardized regression targets.
    dp_lr0: float = 0.15
    dp_lr_tau: float = 150.0
    dp_avg_frac: float = 0.7
    dp_max_norm: float = 1.0
    dp_standardize_targets: bool = True

    def dims(self, n_features: int):
        return (n_features, self.hidden, 1)


def _init_model(ds: FederatedDataset, cfg: TrainConfig,
                target_scale=(0.0, 1.0)) -> Model:
    dims = cfg.dims(ds.n_features)
    params = nn.init_params(dims, np.random.default_rng([cfg.seed, 2]))
    return Model(dims, ds.task, params, target_scale)


def evaluate(model: Model, ds: FederatedDataset) -> float:
    """Regression: MSE in raw target units. Binary: accuracy at 0.5."""
    pred = model.predict(ds.test_X)
    if model.task == TASK_REGRESSION:
        return float(np.mean((pred - ds.test_y) ** 2))
    return float(np.mean((pred > 0.5) == ds.test_y))


# ---------------------------------------------------------------------------
# plain + federated SGD

def _epoch_order(seed: int, epoch: int, worker_index: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, 3, epoch, worker_index]).permutation(n)


def train_plain(ds: FederatedDataset, cfg: TrainConfig):
    """Local SGD over all training rows; numerically the degenerate one-worker
    federation (bit-identical under the same seed)."""
    X, y = ds.train_arrays()
    model = _init_model(ds, cfg)
    trace = []
    t0 = time.monotonic()
    step = 0
    for ep in range(cfg.epochs):
        order = _epoch_order(cfg.seed, ep, 0, len(X))
        for s in range(0, len(order) // cfg.batch_size * cfg.batch_size, cfg.batch_size):
            bi = order[s : s + cfg.batch_size]
            loss, grad = nn.forward_backward(model.params, model.dims, model.task, X[bi], y[bi])
            model.params = model.params - cfg.lr * grad
            trace.append({"step": step, "loss": loss,
                          "wall_ms": (time.monotonic() - t0) * 1e3})
            step += 1
    return model, trace


def _store_partitions(fed: Federation, ds: FederatedDataset, targets=None):
    """Push each worker's partition to it once; returns per-worker object ids."""
    placed = {}
    for name, (X, y) in ds.partitions.items():
        y_out = y if targets is None else targets[name]
        x_oid, y_oid = fed.allocate_id(), fed.allocate_id()
        handle = fed.worker(name)
        handle.store(x_oid, serialize_chain([("local", Tensor(X, Dtype.FLOAT64))]))
        handle.store(y_oid, serialize_chain([("local", Tensor(y_out, Dtype.FLOAT64))]))
        placed[name] = (x_oid, y_oid, len(y))
    return placed


def _push_params(fed: Federation, name: str, params: np.ndarray) -> int:
    oid = fed.allocate_id()
    fed.worker(name).store(oid, serialize_chain([("local", Tensor(params, Dtype.FLOAT64))]))
    return oid


def train_federated(fed: Federation, ds: FederatedDataset, cfg: TrainConfig):
    """Round-robin federated SGD: the leader sends parameters, the worker
    computes the batch gradient on its own rows, the leader applies the
    update."""
    model = _init_model(ds, cfg)
    placed = _store_partitions(fed, ds)
    names = list(ds.partitions)
    trace = []
    t0 = time.monotonic()
    step = 0
    dims = list(model.dims)
    for ep in range(cfg.epochs):
        orders = {n: _epoch_order(cfg.seed, ep, i, placed[n][2]) for i, n in enumerate(names)}
        counts = {n: placed[n][2] // cfg.batch_size for n in names}
        for b in range(max(counts.values())):
            for name in names:
                if b >= counts[name]:
                    continue
                x_oid, y_oid, _ = placed[name]
                idx = orders[name][b * cfg.batch_size : (b + 1) * cfg.batch_size]
                p_oid = _push_params(fed, name, model.params)
                handle = fed.worker(name)
                r_oid = handle.execute(Command(
                    "fb_batch",
                    (Command.obj(p_oid), Command.obj(x_oid), Command.obj(y_oid)),
                    {"dims": dims, "task": model.task, "indices": [int(i) for i in idx]},
                ))
                out = _fetch_vector(fed, name, r_oid)
                handle.delete(p_oid)
                loss, grad = out[0], out[1:]
                model.params = model.params - cfg.lr * grad
                trace.append({"step": step, "loss": float(loss),
                              "wall_ms": (time.monotonic() - t0) * 1e3})
                step += 1
    return model, trace


def _fetch_vector(fed: Federation, name: str, oid: int) -> np.ndarray:
    from .protocol import deserialize_chain

    nodes = deserialize_chain(fed.worker(name).fetch(oid, delete=True))
    return np.array(nodes[-1][1].data, dtype=np.float64)


# ---------------------------------------------------------------------------
# DP federated SGD

def train_federated_dp(fed: Federation, ds: FederatedDataset, cfg: TrainConfig):
    """Phase training per the sanitized-lot protocol: each phase picks one
    worker at random, which samples a lot from its own rows, clips
    per-example gradients and adds Gaussian noise locally; only the sanitized
    sum crosses the transport. The accountant records q = L/N per phase."""
    if cfg.privacy is None:
        raise ConfigError("train_federated_dp needs a PrivacySpec")
    spec = cfg.privacy
    L = cfg.lot_size
    min_part = min(len(y) for _, y in ds.partitions.values())
    if L > min_part:
        raise LotTooLarge(f"lot {L} exceeds smallest partition {min_part}")

    target_scale = (0.0, 1.0)
    targets = None
    if ds.task == TASK_REGRESSION and cfg.dp_standardize_targets:
        # heavy noise needs targets on the unit scale; predictions are mapped
        # back to raw units at evaluation time
        _, y_all = ds.train_arrays()
        ym, ys = float(y_all.mean()), float(y_all.std())
        target_scale = (ym, ys)
        targets = {n: (y - ym) / ys for n, (_, y) in ds.partitions.items()}

    model = _init_model(ds, cfg, target_scale)
    placed = _store_partitions(fed, ds, targets)
    names = list(ds.partitions)
    pick_rng = np.random.default_rng([cfg.seed, 4])
    dims = list(model.dims)
    T = spec.steps
    avg_from = T - int(round(T * cfg.dp_avg_frac))
    acc, n_acc = None, 0
    trace = []
    t0 = time.monotonic()
    for t in range(T):
        name = names[int(pick_rng.integers(len(names)))]
        x_oid, y_oid, _ = placed[name]
        p_oid = _push_params(fed, name, model.params)
        handle = fed.worker(name)
        r_oid = handle.execute(Command(
            "dp_phase",
            (Command.obj(p_oid), Command.obj(x_oid), Command.obj(y_oid)),
            {"dims": dims, "task": model.task, "lot_size": L,
             "clip_norm": spec.clip_norm, "sigma": spec.sigma},
        ))
        out = _fetch_vector(fed, name, r_oid)
        handle.delete(p_oid)
        loss, sanitized = out[0], out[1:]
        lr = cfg.dp_lr0 / (1.0 + t / cfg.dp_lr_tau)
        model.params = model.params - lr * (sanitized / L)
        if np.isfinite(cfg.dp_max_norm):
            model.params = nn.project_hidden_max_norm(model.params, model.dims, cfg.dp_max_norm)
        if t >= avg_from and cfg.dp_avg_frac > 0.0:
            acc = model.params.copy() if acc is None else acc + model.params
            n_acc += 1
        trace.append({"step": t, "loss": float(loss),
                      "wall_ms": (time.monotonic() - t0) * 1e3})
    if n_acc:
        model.params = acc / n_acc
    if spec.sigma > 0:
        ledger = MomentLedger()
        ledger.record(L / ds.n_train, spec.sigma, count=T)
        eps = ledger.epsilon(spec.delta)
    else:
        eps = float("inf")  # noiseless runs carry no privacy guarantee
    return model, trace, eps


# ---------------------------------------------------------------------------
# MPC shared inference

def fixed_forward(model: Model, X: np.ndarray,
                  cfg: FixedPointConfig = DEFAULT_CONFIG) -> np.ndarray:
    """Plaintext fixed-point forward pass: the oracle the shared pass must
    match. Every multiplication truncates immediately, like the MPC path."""
    w1, b1, w2, b2 = nn.unflatten(model.params, model.dims)
    B = X.shape[0]

    def enc(a):
        return fixedpoint.encode(Tensor(np.asarray(a, dtype=np.float64), Dtype.FLOAT64), cfg)

    def matmul_fp(a, b):
        return fixedpoint.truncate(tc.matmul(a, b), cfg)

    def sigmoid_fp(v):
        x2 = fixedpoint.truncate(tc.mul(v, v), cfg)
        x3 = fixedpoint.truncate(tc.mul(x2, v), cfg)
        quarter = int(enc(np.array(0.25)).data)
        neg48 = int(enc(np.array(-1.0 / 48.0)).data)
        t1 = fixedpoint.truncate(tc.scale(v, quarter), cfg)
        t2 = fixedpoint.truncate(tc.scale(x3, neg48), cfg)
        half = int(enc(np.array(0.5)).data)
        return tc.offset(tc.add(t1, t2), half)

    xs = enc(X)
    z1 = tc.add(matmul_fp(xs, enc(w1)), enc(np.tile(b1, (B, 1))))
    a1 = sigmoid_fp(z1)
    z2 = tc.add(matmul_fp(a1, enc(w2)), enc(np.tile(b2, (B, 1))))
    if model.task == TASK_BINARY:
        z2 = sigmoid_fp(z2)
    return np.asarray(fixedpoint.decode(z2, cfg).data)[:, 0]


def _shared_sigmoid(sv, fed: Federation, pool: spdz.TriplePool,
                    cfg: FixedPointConfig):
    shape = sv.shape
    x2 = spdz.trunc_shared(spdz.beaver_mul(sv, sv, pool.take("elementwise", shape), fed), fed, cfg)
    x3 = spdz.trunc_shared(spdz.beaver_mul(x2, sv, pool.take("elementwise", shape), fed), fed, cfg)

    def enc_const(x):
        return int(fixedpoint.encode(Tensor(np.array(x), Dtype.FLOAT64), cfg).data)

    t1 = spdz.trunc_shared(spdz.public_op("mul", sv, enc_const(0.25)), fed, cfg)
    t2 = spdz.trunc_shared(spdz.public_op("mul", x3, enc_const(-1.0 / 48.0)), fed, cfg)
    return spdz.public_op("add", spdz.add_shared(t1, t2), enc_const(0.5))


def mpc_triple_requirements(dims, batch: int, task: str):
    """Triples one shared forward pass consumes, as (kind, shape, count)."""
    d, h, o = dims
    reqs = [
        ("matmul", (batch, d, h), 1),
        ("elementwise", (batch, h), 2),
        ("matmul", (batch, h, o), 1),
    ]
    if task == TASK_BINARY:
        reqs.append(("elementwise", (batch, o), 2))
    return reqs


def provision_triples(fed: Federation, dealer: str, parties, dims, batch: int,
                      task: str, passes: int = 1) -> spdz.TriplePool:
    pool = spdz.TriplePool()
    for kind, shape, count in mpc_triple_requirements(dims, batch, task):
        for t in spdz.dealer_generate(fed, dealer, kind, shape, parties, count * passes):
            pool.put(t)
    return pool


def mpc_forward(model: Model, X: np.ndarray, fed: Federation, parties,
                pool: spdz.TriplePool, rng: np.random.Generator,
                cfg: FixedPointConfig = DEFAULT_CONFIG) -> np.ndarray:
    """Forward pass on secret-shared weights and inputs; reconstruction plus
    decode matches fixed_forward within accumulated truncation error."""
    parties = tuple(parties)
    w1, b1, w2, b2 = nn.unflatten(model.params, model.dims)
    B = X.shape[0]

    def enc_share(a):
        t = fixedpoint.encode(Tensor(np.asarray(a, dtype=np.float64), Dtype.FLOAT64), cfg)
        return spdz.share(t, parties, fed, rng)

    xs = enc_share(X)
    z1 = spdz.add_shared(
        spdz.trunc_shared(
            spdz.matmul_shared(xs, enc_share(w1), pool.take("matmul", (B, model.dims[0], model.dims[1])), fed),
            fed, cfg),
        enc_share(np.tile(b1, (B, 1))),
    )
    a1 = _shared_sigmoid(z1, fed, pool, cfg)
    z2 = spdz.add_shared(
        spdz.trunc_shared(
            spdz.matmul_shared(a1, enc_share(w2), pool.take("matmul", (B, model.dims[1], 1)), fed),
            fed, cfg),
        enc_share(np.tile(b2, (B, 1))),
    )
    if model.task == TASK_BINARY:
        z2 = _shared_sigmoid(z2, fed, pool, cfg)
    out = spdz.reconstruct(z2, fed, delete=True)
    return np.asarray(fixedpoint.decode(out, cfg).data)[:, 0]
