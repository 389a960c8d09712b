"""Synchronous simulated network: topologies, mixing weights, message passing and metering.

Messages sent during a round become visible only after :meth:`Network.round_barrier`,
which delivers them in (sender, sequence) order.  The meter keeps two views of
every send: the logical one (messages, ciphertext units) and the wire one (bytes,
counted once per recipient).
"""
from __future__ import annotations

import csv
import hashlib
import io
from collections import defaultdict
from dataclasses import dataclass, field

import networkx as nx
import numpy as np

PHASES = ("setup", "gradient-sharing", "aggregation", "conversion")


class NotANeighbor(ValueError):
    pass


class Topology:
    """Undirected simple graph over users 0..N-1 (no self-loops)."""

    def __init__(self, adjacency):
        adj = np.array(adjacency, dtype=bool)
        if adj.ndim != 2 or adj.shape[0] != adj.shape[1]:
            raise ValueError("adjacency must be square")
        if not np.array_equal(adj, adj.T):
            raise ValueError("adjacency must be symmetric")
        if adj.diagonal().any():
            raise ValueError("self-loops are not allowed")
        adj.flags.writeable = False
        self.adjacency = adj
        self._neighbors = tuple(tuple(int(j) for j in np.flatnonzero(row)) for row in adj)

    @classmethod
    def from_edges(cls, n_users: int, edges) -> "Topology":
        adj = np.zeros((n_users, n_users), dtype=bool)
        for i, j in edges:
            adj[i, j] = adj[j, i] = True
        return cls(adj)

    @classmethod
    def complete(cls, n_users: int) -> "Topology":
        return cls(~np.eye(n_users, dtype=bool))

    @classmethod
    def ring(cls, n_users: int) -> "Topology":
        return cls.from_edges(n_users, [(i, (i + 1) % n_users) for i in range(n_users)])

    @classmethod
    def path(cls, n_users: int) -> "Topology":
        return cls.from_edges(n_users, [(i, i + 1) for i in range(n_users - 1)])

    @classmethod
    def regular(cls, n_users: int, degree: int) -> "Topology":
        """Circulant graph; odd degrees use the antipodal offset and need even N."""
        if degree >= n_users or (degree % 2 and n_users % 2):
            raise ValueError(f"no circulant {degree}-regular graph on {n_users} nodes")
        offsets = list(range(1, degree // 2 + 1))
        edges = [(i, (i + o) % n_users) for i in range(n_users) for o in offsets]
        if degree % 2:
            edges += [(i, i + n_users // 2) for i in range(n_users // 2)]
        return cls.from_edges(n_users, edges)

    @property
    def n_users(self) -> int:
        return self.adjacency.shape[0]

    def neighbors(self, i: int) -> tuple:
        return self._neighbors[i]

    def degree(self, i: int) -> int:
        return len(self._neighbors[i])

    def edges(self) -> list:
        return [(i, j) for i in range(self.n_users) for j in self._neighbors[i] if i < j]

    def is_complete(self) -> bool:
        return all(self.degree(i) == self.n_users - 1 for i in range(self.n_users))

    def is_connected(self) -> bool:
        return nx.is_connected(self.to_networkx())

    def to_networkx(self) -> nx.Graph:
        g = nx.Graph()
        g.add_nodes_from(range(self.n_users))
        g.add_edges_from(self.edges())
        return g

    def edge_list(self) -> str:
        return "".join(f"{i} {j}\n" for i, j in self.edges())


def gen_topology(n_users: int, connection_rate: float, rng) -> Topology:
    """Erdos-Renyi sample; a disconnected draw gets a uniform random spanning tree added."""
    if n_users < 2:
        raise ValueError("need at least two users")
    if not 0 <= connection_rate <= 1:
        raise ValueError(f"connection_rate {connection_rate} outside [0, 1]")
    upper = np.triu(rng.random((n_users, n_users)) < connection_rate, k=1)
    adj = upper | upper.T
    topo = Topology(adj)
    if topo.is_connected():
        return topo
    # uniform over labeled trees on N vertices via a random Pruefer sequence
    if n_users == 2:
        tree_edges = [(0, 1)]
    else:
        seq = [int(v) for v in rng.integers(0, n_users, size=n_users - 2)]
        tree_edges = nx.from_prufer_sequence(seq).edges()
    for i, j in tree_edges:
        adj[i, j] = adj[j, i] = True
    return Topology(adj)


class MixingMatrix:
    """Symmetric doubly stochastic weights supported on the graph plus the diagonal."""

    def __init__(self, weights, topology: Topology | None = None, atol: float = 1e-12):
        w = np.array(weights, dtype=np.float64)
        if w.ndim != 2 or w.shape[0] != w.shape[1]:
            raise ValueError("mixing matrix must be square")
        if np.any(w < 0) or np.any(w > 1):
            raise ValueError("weights must lie in [0, 1]")
        if not np.allclose(w.sum(axis=1), 1.0, atol=atol, rtol=0):
            raise ValueError("rows must sum to 1")
        if not np.allclose(w, w.T, atol=atol, rtol=0):
            raise ValueError("mixing matrix must be symmetric")
        if topology is not None:
            support = topology.adjacency | np.eye(topology.n_users, dtype=bool)
            if np.any(w[~support] != 0):
                raise ValueError("nonzero weight between non-adjacent users")
        w.flags.writeable = False
        self.weights = w

    def row(self, i: int, topology: Topology) -> np.ndarray:
        """[E_ii, E_ij for j in neighbors(i)] in neighbor order."""
        return np.array([self.weights[i, i]] + [self.weights[i, j] for j in topology.neighbors(i)])

    def second_eigenvalue(self) -> float:
        ev = np.sort(np.abs(np.linalg.eigvalsh(self.weights)))[::-1]
        return float(ev[1]) if ev.size > 1 else 0.0


def mixing_matrix(topo: Topology) -> MixingMatrix:
    """Metropolis-Hastings weights: E_ij = 1/(1 + max(deg i, deg j)) on edges."""
    n = topo.n_users
    w = np.zeros((n, n))
    deg = [topo.degree(i) for i in range(n)]
    for i in range(n):
        for j in topo.neighbors(i):
            w[i, j] = 1.0 / (1 + max(deg[i], deg[j]))
    for i in range(n):
        w[i, i] = 1.0 - w[i].sum()
    return MixingMatrix(w, topo)


@dataclass
class Counters:
    messages_sent: int = 0
    units_sent: int = 0
    bytes_sent: int = 0
    messages_received: int = 0
    bytes_received: int = 0


class Meter:
    """Per-user, per-phase traffic counters."""

    def __init__(self, n_users: int):
        self.n_users = n_users
        self._c = defaultdict(Counters)

    def record_send(self, sender: int, recipients, size: int, phase: str, broadcast: bool, units: int = 1):
        if phase not in PHASES:
            raise ValueError(f"unknown phase {phase!r}")
        c = self._c[sender, phase]
        copies = 1 if broadcast else len(recipients)
        c.messages_sent += copies
        c.units_sent += copies * units
        c.bytes_sent += size * len(recipients)
        for r in recipients:
            rc = self._c[r, phase]
            rc.messages_received += 1
            rc.bytes_received += size

    def get(self, user: int, phase: str | None = None) -> Counters:
        phases = PHASES if phase is None else (phase,)
        out = Counters()
        for ph in phases:
            c = self._c.get((user, ph))
            if c is None:
                continue
            out.messages_sent += c.messages_sent
            out.units_sent += c.units_sent
            out.bytes_sent += c.bytes_sent
            out.messages_received += c.messages_received
            out.bytes_received += c.bytes_received
        return out

    def snapshot(self) -> dict:
        return {key: Counters(**vars(c)) for key, c in self._c.items()}

    def totals(self) -> Counters:
        out = Counters()
        for u in range(self.n_users):
            c = self.get(u)
            for k, v in vars(c).items():
                setattr(out, k, getattr(out, k) + v)
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["user", "phase", "messages", "units", "bytes"])
        for u in range(self.n_users):
            for ph in PHASES:
                c = self._c.get((u, ph), Counters())
                w.writerow([u, ph, c.messages_sent, c.units_sent, c.bytes_sent])
        return buf.getvalue()


def diff_counters(after: dict, before: dict, user: int, phase: str | None = None) -> Counters:
    """Traffic a user generated between two meter snapshots."""
    out = Counters()
    for ph in PHASES if phase is None else (phase,):
        a = after.get((user, ph), Counters())
        b = before.get((user, ph), Counters())
        for k in vars(out):
            setattr(out, k, getattr(out, k) + getattr(a, k) - getattr(b, k))
    return out


@dataclass(frozen=True)
class Message:
    round: int
    seq: int
    sender: int
    recipients: tuple
    phase: str
    kind: str
    payload: bytes = field(repr=False)


class Network:
    """Synchronous message passing over a fixed topology."""

    def __init__(self, topology: Topology, keep_payloads: bool = True):
        self.topology = topology
        self.meter = Meter(topology.n_users)
        self.round = 0
        self.keep_payloads = keep_payloads
        self.transcript: list[Message] = []
        self._pending: list[Message] = []
        self._inbox = defaultdict(list)
        self._seq = defaultdict(int)
        self._digest = hashlib.sha256()

    def send(self, sender: int, recipients, payload: bytes, phase: str, kind: str = "", broadcast: bool = True, units: int = 1):
        recipients = tuple(sorted(set(recipients)))
        nbrs = set(self.topology.neighbors(sender))
        bad = [r for r in recipients if r not in nbrs]
        if bad:
            raise NotANeighbor(f"user {sender} cannot send to non-neighbors {bad}")
        if not recipients:
            return
        self.meter.record_send(sender, recipients, len(payload), phase, broadcast, units)
        targets = [recipients] if broadcast else [(r,) for r in recipients]
        for to in targets:
            seq = self._seq[sender]
            self._seq[sender] += 1
            self._pending.append(Message(self.round, seq, sender, to, phase, kind, bytes(payload)))

    def round_barrier(self):
        """Deliver everything sent this round, ordered by (sender, sequence)."""
        for msg in sorted(self._pending, key=lambda m: (m.sender, m.seq)):
            for r in msg.recipients:
                self._inbox[r].append(msg)
            self._digest.update(
                f"{msg.round}|{msg.seq}|{msg.sender}|{msg.recipients}|{msg.phase}|{msg.kind}|".encode()
            )
            self._digest.update(hashlib.sha256(msg.payload).digest())
            if self.keep_payloads:
                self.transcript.append(msg)
        self._pending = []
        self.round += 1

    def receive(self, user: int, kind: str | None = None) -> list:
        """Pop delivered messages for a user, optionally only those of one kind."""
        box = self._inbox[user]
        if kind is None:
            self._inbox[user] = []
            return box
        taken = [m for m in box if m.kind == kind]
        self._inbox[user] = [m for m in box if m.kind != kind]
        return taken

    def transcript_digest(self) -> str:
        return self._digest.hexdigest()
