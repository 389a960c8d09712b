"""Decentralized parallel SGD in plaintext and over multiparty BFV.

The plaintext trainer is the oracle.  The private trainer runs the same
iteration through the simulated network: every node encrypts its parameters
under the system key of each neighborhood it feeds, aggregates what it
receives with quantized mixing weights, has its neighbors convert the result
to its personal key, decrypts, and takes the local gradient step.
"""
from __future__ import annotations

import hashlib
import struct
import time
from collections import defaultdict
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from . import bfv, mbfv
from .bfv import Ciphertext, PublicKey, SecretKey
from .codec import EncodedChunk, EncodingOverflow, FixedPointConfig, decode, encode, quantize_weights
from .mbfv import ProtocolError
from .models import make_model, separable_task
from .netsim import MixingMatrix, Network, Topology, diff_counters, gen_topology, mixing_matrix
from .ring import DEFAULT_NOISE, NoiseParams, Poly, RingParams, make_rng

GLOBAL_KEY = -1
TIMING_PHASES = ("initialization", "encryption", "evaluation", "decryption")


@dataclass
class TrainConfig:
    users: int = 10
    connection_rate: float = 0.5
    key_scope: str = "neighborhood"
    ring: str = "fx64"
    frac_bits: int = 13
    weight_bits: int = 16
    eta: float = 0.5
    iterations: int = 50
    batch: int = 16
    seed: int = 0
    model: str = "logistic"
    n_features: int = 10
    samples_per_user: int = 100
    test_samples: int = 1000

    def __post_init__(self):
        if not self.eta >= 0:
            raise ValueError("eta must be nonnegative")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.key_scope not in ("neighborhood", "global"):
            raise ValueError(f"key_scope must be 'neighborhood' or 'global', got {self.key_scope!r}")
        if self.batch < 1:
            raise ValueError("batch must be >= 1")


@dataclass
class EncryptedVector:
    """A real vector packed across one or more ciphertexts at scale 2^scale_exponent."""

    cts: tuple
    length: int
    scale_exponent: int

    def to_bytes(self) -> bytes:
        est = max(ct.noise_estimate for ct in self.cts)
        head = struct.pack("<IIId", len(self.cts), self.length, self.scale_exponent, est)
        return head + b"".join(ct.to_bytes() for ct in self.cts)

    @classmethod
    def from_bytes(cls, data: bytes, params: RingParams) -> "EncryptedVector":
        count, length, scale, est = struct.unpack_from("<IIId", data)
        size = 21 + 2 * (12 + 8 * params.n)
        body = data[20:]
        cts = []
        for i in range(count):
            ct = Ciphertext.from_bytes(body[i * size : (i + 1) * size], params)
            cts.append(Ciphertext(ct.c0, ct.c1, est))
        return cls(tuple(cts), length, scale)


@dataclass
class NodeState:
    uid: int
    X: np.ndarray
    y: np.ndarray
    W: np.ndarray
    rng: np.random.Generator
    batch_rng: np.random.Generator
    sk: SecretKey | None = None
    pk: PublicKey | None = None
    # key id -> this node's share of that system key
    shares: dict = field(default_factory=dict)
    # key id -> combined system public key
    system_pks: dict = field(default_factory=dict)
    # neighbor id -> that neighbor's personal public key
    neighbor_pks: dict = field(default_factory=dict)
    # neighbor id -> latest encrypted parameters received from it
    received: dict = field(default_factory=dict)
    last_gradient: np.ndarray | None = None


@dataclass
class TrainingReport:
    mode: str
    config: TrainConfig
    topology: Topology
    losses: list
    accuracies: list
    final_weights: np.ndarray
    average_model: np.ndarray
    accuracy: float
    timings: dict
    network: Network | None = None
    meter_snapshots: list = field(default_factory=list)
    bootstraps: int = 0

    @property
    def meter(self):
        return None if self.network is None else self.network.meter


class TrainingAbort(RuntimeError):
    """A protocol or encoding failure inside the private trainer, tagged with its stage."""

    def __init__(self, stage: str, iteration: int, cause: Exception):
        super().__init__(f"aborted during {stage} (iteration {iteration}): {cause}")
        self.stage = stage
        self.iteration = iteration
        self.cause = cause


class PhaseTimer:
    def __init__(self):
        self.totals = defaultdict(float)

    @contextmanager
    def __call__(self, phase: str):
        start = time.perf_counter()
        try:
            yield
        finally:
            self.totals[phase] += time.perf_counter() - start

    def as_dict(self) -> dict:
        return {p: self.totals.get(p, 0.0) for p in TIMING_PHASES}


def local_gradient(model, batch, W) -> np.ndarray:
    X, y = batch
    if len(y) == 0:
        raise ValueError("empty batch")
    return model.gradient(W, X, y)


def plaintext_step(W: np.ndarray, grads: np.ndarray, E: MixingMatrix, eta: float) -> np.ndarray:
    """W_{k+1,i} = E_ii W_{k,i} + sum_j E_ij W_{k,j} - eta * grad_i, all from round-k values."""
    return E.weights @ W - eta * grads


def encrypt_vector(pk: PublicKey, values, cfg: FixedPointConfig, rng, noise: NoiseParams = DEFAULT_NOISE) -> EncryptedVector:
    chunk = encode(values, cfg)
    cts = tuple(bfv.encrypt(pk, pt, rng, noise) for pt in chunk.plaintexts)
    return EncryptedVector(cts, chunk.length, chunk.scale_exponent)


def decrypt_vector(sk: SecretKey, ev: EncryptedVector, cfg: FixedPointConfig) -> np.ndarray:
    pts = tuple(bfv.decrypt(sk, ct) for ct in ev.cts)
    return decode(EncodedChunk(pts, ev.length, ev.scale_exponent), cfg)


def encrypted_weighted_avg(own: EncryptedVector, neighbors, weights) -> EncryptedVector:
    """Sum_j w_j * ct_j over [own] + neighbors; integer weights summing to 2^ws."""
    inputs = [own, *neighbors]
    weights = [int(w) for w in weights]
    if len(weights) != len(inputs):
        raise ValueError(f"{len(weights)} weights for {len(inputs)} ciphertext vectors")
    total = sum(weights)
    if total <= 0 or total & (total - 1):
        raise ValueError("quantized weights must sum to a power of two")
    ws = total.bit_length() - 1
    if any(ev.length != own.length or ev.scale_exponent != own.scale_exponent or len(ev.cts) != len(own.cts) for ev in inputs):
        raise ValueError("encrypted vectors disagree on shape or scale")
    out = []
    for c in range(len(own.cts)):
        acc = None
        for ev, w in zip(inputs, weights):
            if w == 0:
                continue
            term = bfv.plain_scalar_mul(ev.cts[c], w)
            acc = term if acc is None else bfv.hom_add(acc, term)
        out.append(acc)
    return EncryptedVector(tuple(out), own.length, own.scale_exponent + ws)


def _c1_bytes(ev: EncryptedVector) -> bytes:
    return b"".join(ct.c1.to_bytes() for ct in ev.cts)


def _parse_polys(data: bytes, params: RingParams) -> list:
    size = 12 + 8 * params.n
    return [Poly.from_bytes(data[i : i + size], params) for i in range(0, len(data), size)]


def _parse_shares(data: bytes, params: RingParams) -> list:
    # share records are fixed size: tag(1) + party(4) + two polys
    size = 5 + 2 * (12 + 8 * params.n)
    return [mbfv.parse_share(data[i : i + size], params) for i in range(0, len(data), size)]


def _seed_bytes(*parts) -> bytes:
    return hashlib.sha256("|".join(str(p) for p in parts).encode()).digest()


class PrivateDPSGD:
    """State and protocol steps for the private trainer over one simulated network."""

    def __init__(self, nodes, topology: Topology, E: MixingMatrix, params: RingParams, cfg: FixedPointConfig,
                 key_scope: str = "neighborhood", session_seed=0, noise: NoiseParams = DEFAULT_NOISE,
                 batch: int = 16):
        if key_scope == "global" and not topology.is_complete():
            raise ValueError("key_scope='global' needs every user adjacent to every other (complete graph)")
        self.nodes = nodes
        self.topology = topology
        self.E = E
        self.params = params
        self.cfg = cfg
        self.key_scope = key_scope
        self.session_seed = session_seed
        self.noise = noise
        self.batch = batch
        self.network = Network(topology)
        self.timer = PhaseTimer()
        self.bootstraps = 0
        # protocol stage in progress, reported on aborts
        self.stage = "setup"
        self.quantized = [quantize_weights(E.row(i, topology), cfg.weight_bits) for i in range(topology.n_users)]

    # key bookkeeping

    def key_of(self, i: int) -> int:
        return GLOBAL_KEY if self.key_scope == "global" else i

    def parties(self, key_id: int) -> tuple:
        if key_id == GLOBAL_KEY:
            return tuple(range(self.topology.n_users))
        return tuple(sorted((key_id, *self.topology.neighbors(key_id))))

    def keys_held_by(self, k: int) -> list:
        if self.key_scope == "global":
            return [GLOBAL_KEY]
        return sorted((k, *self.topology.neighbors(k)))

    def crp(self, key_id: int, purpose: str, counter: int = 0):
        return mbfv.crp_from_seed(_seed_bytes(self.session_seed, purpose, key_id, counter), self.params)

    def _barrier(self):
        self.network.round_barrier()

    # setup

    def setup_keys(self):
        """Personal keypairs, system key shares and public keys, then E(W_0) to neighbors."""
        net, P, topo = self.network, self.params, self.topology
        self.stage = "setup"
        with self.timer("initialization"):
            pending_pk_shares = defaultdict(list)
            for node in self.nodes:
                node.sk = bfv.seckeygen(P, node.rng)
                node.pk = bfv.pubkeygen(node.sk, node.rng, self.noise)
                net.send(node.uid, topo.neighbors(node.uid), node.pk.to_bytes(), "setup", "personal-pk")
                for key_id in self.keys_held_by(node.uid):
                    share = mbfv.mbfv_seckeygen(node.uid, P, node.rng)
                    node.shares[key_id] = share
                    psh = mbfv.mbfv_pubkeygen_share(share, self.crp(key_id, "pk"), node.rng, self.noise)
                    if key_id == GLOBAL_KEY:
                        pending_pk_shares[key_id].append(psh)
                        net.send(node.uid, topo.neighbors(node.uid), psh.to_bytes(), "setup", "pk-share")
                    elif key_id == node.uid:
                        pending_pk_shares[key_id].append(psh)
                    else:
                        net.send(node.uid, [key_id], psh.to_bytes(), "setup", "pk-share", broadcast=False)
            self._barrier()
            for node in self.nodes:
                for msg in net.receive(node.uid, "personal-pk"):
                    node.neighbor_pks[msg.sender] = PublicKey.from_bytes(msg.payload, P)
                received = [mbfv.parse_share(m.payload, P) for m in net.receive(node.uid, "pk-share")]
                if self.key_scope == "global":
                    own = [s for s in pending_pk_shares[GLOBAL_KEY] if s.party_id == node.uid]
                    node.system_pks[GLOBAL_KEY] = mbfv.mbfv_pubkeygen_combine(
                        received + own, self.crp(GLOBAL_KEY, "pk"), self.parties(GLOBAL_KEY))
                else:
                    pk_i = mbfv.mbfv_pubkeygen_combine(
                        received + pending_pk_shares[node.uid], self.crp(node.uid, "pk"), self.parties(node.uid))
                    node.system_pks[node.uid] = pk_i
                    net.send(node.uid, topo.neighbors(node.uid), _pk_bytes(pk_i), "setup", "system-pk")
            self._barrier()
            if self.key_scope == "neighborhood":
                for node in self.nodes:
                    for msg in net.receive(node.uid, "system-pk"):
                        node.system_pks[msg.sender] = _pk_from_bytes(msg.payload, P)
        self._share_parameters("setup")

    def _share_parameters(self, phase: str):
        """Each node sends its current parameters, encrypted for each receiving neighborhood."""
        net, topo = self.network, self.topology
        for node in self.nodes:
            self._check_range(node.W)
            nbrs = topo.neighbors(node.uid)
            with self.timer("encryption"):
                if self.key_scope == "global":
                    ev = encrypt_vector(node.system_pks[GLOBAL_KEY], node.W, self.cfg, node.rng, self.noise)
                    payloads = [(nbrs, ev, True)]
                else:
                    payloads = [((j,), encrypt_vector(node.system_pks[j], node.W, self.cfg, node.rng, self.noise), False)
                                for j in nbrs]
            for to, ev, bcast in payloads:
                net.send(node.uid, to, ev.to_bytes(), phase, "params", broadcast=bcast, units=len(ev.cts))
        self._barrier()
        for node in self.nodes:
            for msg in net.receive(node.uid, "params"):
                node.received[msg.sender] = EncryptedVector.from_bytes(msg.payload, self.params)

    def _check_range(self, W):
        limit = self.cfg.max_abs_value
        if np.abs(W).max(initial=0.0) >= limit:
            raise EncodingOverflow(
                f"parameter magnitude {np.abs(W).max():.4g} >= {limit:.4g}; a weighted average would wrap mod t"
            )

    # one iteration

    def aggregate(self) -> dict:
        """Encrypted weighted averages for every node, bootstrapped when the noise hint asks."""
        topo = self.topology
        self.stage = "aggregation"
        out = {}
        for node in self.nodes:
            i = node.uid
            missing = [j for j in topo.neighbors(i) if j not in node.received]
            if missing:
                raise ProtocolError(f"aggregation: node {i} has no parameters from {missing}")
            key = node.system_pks[self.key_of(i)]
            with self.timer("encryption"):
                own = encrypt_vector(key, node.W, self.cfg, node.rng, self.noise)
            with self.timer("evaluation"):
                out[i] = encrypted_weighted_avg(own, [node.received[j] for j in topo.neighbors(i)], self.quantized[i])
        needy = [i for i, ev in out.items() if any(mbfv.needs_bootstrap(ct) for ct in ev.cts)]
        if needy:
            out.update(self.bootstrap(needy, out))
        return out

    def _helpers(self, i: int) -> tuple:
        return tuple(k for k in self.parties(self.key_of(i)) if k != i)

    def bootstrap(self, owners, aggregates) -> dict:
        net, P = self.network, self.params
        self.stage = "bootstrap"
        counter = self.bootstraps
        self.bootstraps += 1
        for i in owners:
            ev = aggregates[i]
            net.send(i, self._helpers(i), _c1_bytes(ev), "aggregation", "bootstrap-c1", units=len(ev.cts))
        self._barrier()
        for node in self.nodes:
            for msg in net.receive(node.uid, "bootstrap-c1"):
                i = msg.sender
                key_id = self.key_of(i)
                with self.timer("evaluation"):
                    shares = [
                        mbfv.mbfv_bootstrap_share(node.shares[key_id], c1,
                                                  self.crp(key_id, "alpha", _chunk_counter(counter, i, c)),
                                                  node.rng, self.noise)
                        for c, c1 in enumerate(_parse_polys(msg.payload, P))
                    ]
                net.send(node.uid, [i], b"".join(s.to_bytes() for s in shares), "aggregation", "bootstrap-share",
                         broadcast=False, units=len(shares))
        self._barrier()
        out = {}
        for i in owners:
            node = self.nodes[i]
            key_id = self.key_of(i)
            ev = aggregates[i]
            per_chunk = [[] for _ in ev.cts]
            for msg in self.network.receive(i, "bootstrap-share"):
                for c, sh in enumerate(_parse_shares(msg.payload, P)):
                    per_chunk[c].append(sh)
            cts = []
            with self.timer("evaluation"):
                for c, ct in enumerate(ev.cts):
                    alpha = self.crp(key_id, "alpha", _chunk_counter(counter, i, c))
                    own = mbfv.mbfv_bootstrap_share(node.shares[key_id], ct.c1, alpha, node.rng, self.noise)
                    cts.append(mbfv.mbfv_bootstrap_combine(ct.c0, per_chunk[c] + [own], alpha, self.parties(key_id), self.noise))
            out[i] = EncryptedVector(tuple(cts), ev.length, ev.scale_exponent)
        return out

    def convert(self, aggregates) -> dict:
        """Re-encrypt each node's aggregate under its personal key; returns ciphertexts per node."""
        net, P = self.network, self.params
        self.stage = "conversion"
        for node in self.nodes:
            ev = aggregates[node.uid]
            net.send(node.uid, self._helpers(node.uid), _c1_bytes(ev), "conversion", "convert-c1", units=len(ev.cts))
        self._barrier()
        for node in self.nodes:
            for msg in net.receive(node.uid, "convert-c1"):
                i = msg.sender
                share = node.shares[self.key_of(i)]
                with self.timer("evaluation"):
                    shares = [mbfv.mbfv_convert_share(share, c1, node.neighbor_pks[i], node.rng, self.noise)
                              for c1 in _parse_polys(msg.payload, P)]
                net.send(node.uid, [i], b"".join(s.to_bytes() for s in shares), "conversion", "convert-share",
                         broadcast=False, units=len(shares))
        self._barrier()
        out = {}
        for node in self.nodes:
            i = node.uid
            ev = aggregates[i]
            per_chunk = [[] for _ in ev.cts]
            for msg in net.receive(i, "convert-share"):
                for c, sh in enumerate(_parse_shares(msg.payload, P)):
                    per_chunk[c].append(sh)
            cts = []
            with self.timer("evaluation"):
                for c, ct in enumerate(ev.cts):
                    own = mbfv.mbfv_convert_share(node.shares[self.key_of(i)], ct.c1, node.pk, node.rng, self.noise)
                    try:
                        cts.append(mbfv.mbfv_convert_combine(ct, per_chunk[c] + [own], self.parties(self.key_of(i)), self.noise))
                    except ProtocolError as exc:
                        raise ProtocolError(f"conversion: node {i}: {exc}") from None
            out[i] = EncryptedVector(tuple(cts), ev.length, ev.scale_exponent)
        return out

    def private_step(self, model, eta: float):
        """One full iteration: gradient, aggregate, convert, decrypt, update, re-share."""
        grads = {}
        for node in self.nodes:
            batch = _draw_batch(node, self.batch)
            grads[node.uid] = local_gradient(model, batch, node.W)
            node.last_gradient = grads[node.uid]
        converted = self.convert(self.aggregate())
        self.stage = "update"
        for node in self.nodes:
            with self.timer("decryption"):
                half = decrypt_vector(node.sk, converted[node.uid], self.cfg)
            node.W = half - eta * grads[node.uid]
        self.stage = "gradient-sharing"
        self._share_parameters("gradient-sharing")


def _chunk_counter(counter: int, owner: int, chunk: int) -> str:
    return f"{counter}.{owner}.{chunk}"


def _pk_bytes(pk: PublicKey) -> bytes:
    return struct.pack("<I", pk.parties) + pk.to_bytes()


def _pk_from_bytes(data: bytes, params: RingParams) -> PublicKey:
    (parties,) = struct.unpack_from("<I", data)
    pk = PublicKey.from_bytes(data[4:], params)
    return PublicKey(pk.p0, pk.p1, parties)


def _draw_batch(node: NodeState, batch: int):
    idx = node.batch_rng.choice(len(node.y), size=min(batch, len(node.y)), replace=False)
    return node.X[idx], node.y[idx]


def build_nodes(config: TrainConfig, model, initial_weights=None):
    """Shards, per-node generators and identical starting parameters (unless given)."""
    rng_data = make_rng([config.seed, 0])
    Xtr, ytr, Xte, yte = separable_task(config.users * config.samples_per_user, config.test_samples,
                                        config.n_features, rng_data)
    W0 = model.init_params(make_rng([config.seed, 4]))
    nodes = []
    for i in range(config.users):
        sl = slice(i * config.samples_per_user, (i + 1) * config.samples_per_user)
        W = W0.copy() if initial_weights is None else np.array(initial_weights[i], dtype=np.float64)
        nodes.append(NodeState(i, Xtr[sl], ytr[sl], W, make_rng([config.seed, 3, i]), make_rng([config.seed, 1, i])))
    return nodes, (Xte, yte)


def build_topology(config: TrainConfig) -> Topology:
    return gen_topology(config.users, config.connection_rate, make_rng([config.seed, 2]))


def run_training(config: TrainConfig, mode: str = "private", topology: Topology | None = None,
                 initial_weights=None, noise: NoiseParams = DEFAULT_NOISE,
                 params: RingParams | None = None) -> TrainingReport:
    """Setup once, then K steps of plaintext or private D-PSGD."""
    if mode not in ("plaintext", "private"):
        raise ValueError(f"mode must be 'plaintext' or 'private', got {mode!r}")
    model = make_model(config.model, config.n_features)
    topo = topology if topology is not None else build_topology(config)
    if topo.n_users != config.users:
        raise ValueError("topology size does not match config.users")
    E = mixing_matrix(topo)
    nodes, (Xte, yte) = build_nodes(config, model, initial_weights)

    def record():
        avg = np.mean([n.W for n in nodes], axis=0)
        losses.append(float(np.mean([model.loss(n.W, n.X, n.y) for n in nodes])))
        accuracies.append(float(np.mean(model.predict(avg, Xte) == yte)))

    losses, accuracies = [], []
    snapshots = []
    network = None
    bootstraps = 0
    busy = 0.0
    if mode == "plaintext":
        timer = PhaseTimer()
        record()
        for _ in range(config.iterations):
            tick = time.perf_counter()
            with timer("evaluation"):
                W = np.array([n.W for n in nodes])
                grads = np.array([local_gradient(model, _draw_batch(n, config.batch), n.W) for n in nodes])
                W = plaintext_step(W, grads, E, config.eta)
            for n, w in zip(nodes, W):
                n.W = w
            busy += time.perf_counter() - tick
            record()
        timings = timer.as_dict()
    else:
        P = params if params is not None else bfv.preset(config.ring)
        cfg = FixedPointConfig(P.t, P.n, config.frac_bits, config.weight_bits)
        sim = PrivateDPSGD(nodes, topo, E, P, cfg, config.key_scope, config.seed, noise, config.batch)
        network = sim.network
        k = 0
        try:
            tick = time.perf_counter()
            sim.setup_keys()
            busy += time.perf_counter() - tick
            snapshots.append(network.meter.snapshot())
            record()
            for k in range(1, config.iterations + 1):
                tick = time.perf_counter()
                sim.private_step(model, config.eta)
                busy += time.perf_counter() - tick
                snapshots.append(network.meter.snapshot())
                record()
        except (ProtocolError, EncodingOverflow) as exc:
            raise TrainingAbort(sim.stage, k, exc) from exc
        timings = sim.timer.as_dict()
        bootstraps = sim.bootstraps
    # wall clock of setup and iterations only; loss/accuracy bookkeeping excluded
    timings["total"] = busy
    final = np.array([n.W for n in nodes])
    avg = final.mean(axis=0)
    return TrainingReport(
        mode=mode, config=config, topology=topo, losses=losses, accuracies=accuracies,
        final_weights=final, average_model=avg, accuracy=float(np.mean(model.predict(avg, Xte) == yte)),
        timings=timings, network=network, meter_snapshots=snapshots, bootstraps=bootstraps,
    )


def units_per_iteration(report: TrainingReport, iteration: int = 1) -> list:
    """Ciphertext units each user sent during one iteration (1-based)."""
    snaps = report.meter_snapshots
    return [diff_counters(snaps[iteration], snaps[iteration - 1], u).units_sent for u in range(report.topology.n_users)]
