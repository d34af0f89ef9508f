"""Block-partitioned Koopman learning over simulated computation nodes.

The state is split into ``q`` coordinate blocks. Node ``i`` owns the
dictionary ``psi_i`` for its block and the row block ``[K_i1 ... K_iq]`` of
the Koopman matrix. Every round each node

1. lifts its coordinates of ``x_j`` and ``x_{j+1}`` and broadcasts the lift
   ``S_j^i = psi_i(W_i x_j^i)`` (a :class:`Lift` message),
2. forms its residual block ``e_j^i`` from the received lifts and sends
   ``S'_iv = K_iv^T e_j^i`` to every peer ``v`` (a :class:`BackProp` message),
3. accumulates ``A_i`` (through ``psi_i(W_i x_{j+1}^i)``), ``B_i`` (through
   ``psi_i(W_i x_j^i)`` using the received ``S'``) and ``C_i`` (the K-row
   gradient), and
4. takes one gradient step on ``W_i`` and its K-row.

With all messages delivered in the same round this is exactly a Jacobi
gradient step on the centralized loss (:func:`centralized_jacobi_step`).
In asynchronous mode messages are delayed by a seeded number of rounds and
nodes read the latest delivered payloads instead of waiting.

Messages are emitted in envelopes covering a contiguous range of data
indices; ``batch_size=1`` gives one envelope per data index. Message counts
always refer to individual data indices.
"""

import csv
import heapq
import math
import time
from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import trainer
from .dictionary import BlockDictionary, DictionaryParams, grads_norm, init_params
from .errors import DivergenceError, ProtocolError, ShapeError, UsageError
from .objective import LiftCache
from .trainer import Schedule, learning_rate

MODES = ("sync", "async")
DELAY_DISTRIBUTIONS = ("fixed", "uniform")
ROUND_COLUMNS = ("round", "global_loss", "grad_norm_sum", "messages_sent", "max_staleness_observed")


# -- partition ---------------------------------------------------------------------


@dataclass(frozen=True)
class Partition:
    """Disjoint, covering, order-preserving coordinate blocks.

    ``widths[i]`` is the width of node ``i``'s trainable block; with state
    augmentation node ``i`` publishes ``len(blocks[i]) + widths[i]`` lifted
    coordinates.
    """

    blocks: Tuple[Tuple[int, ...], ...]
    widths: Tuple[int, ...]

    def __post_init__(self):
        blocks = tuple(tuple(int(c) for c in b) for b in self.blocks)
        widths = tuple(int(w) for w in self.widths)
        if len(blocks) < 1:
            raise UsageError("a partition needs at least one block")
        if len(widths) != len(blocks):
            raise UsageError(f"{len(blocks)} blocks but {len(widths)} widths")
        if any(w < 1 for w in widths):
            raise UsageError("block widths must be positive")
        if any(len(b) == 0 for b in blocks):
            raise UsageError("blocks must be non-empty")
        flat = [c for b in blocks for c in b]
        if sorted(flat) != list(range(len(flat))):
            raise UsageError("blocks must be disjoint and cover every state coordinate")
        if any(list(b) != sorted(b) for b in blocks):
            raise UsageError("blocks must list coordinates in increasing order")
        object.__setattr__(self, "blocks", blocks)
        object.__setattr__(self, "widths", widths)

    @property
    def q(self):
        return len(self.blocks)

    @property
    def d(self):
        return sum(len(b) for b in self.blocks)

    def lift_widths(self, augment_state=True):
        return tuple(w + (len(b) if augment_state else 0) for b, w in zip(self.blocks, self.widths))


def partition_state(d, q, widths=1, blocks=None):
    """Split ``d`` coordinates into ``q`` contiguous blocks.

    Blocks are balanced with the remainder going to the earlier blocks,
    unless explicit ``blocks`` are given. ``widths`` is one trainable width
    for every block or a sequence of ``q`` widths.
    """
    if q < 1 or d < 1:
        raise UsageError("need d >= 1 and q >= 1")
    if q > d:
        raise UsageError(f"cannot split {d} coordinates into {q} non-empty blocks")
    if np.ndim(widths) == 0:
        widths = [int(widths)] * q
    widths = list(widths)
    if len(widths) != q:
        raise UsageError(f"expected {q} block widths, got {len(widths)}")
    if blocks is None:
        base, extra = divmod(d, q)
        blocks, start = [], 0
        for i in range(q):
            size = base + (1 if i < extra else 0)
            blocks.append(tuple(range(start, start + size)))
            start += size
    elif len(blocks) != q:
        raise UsageError(f"expected {q} blocks, got {len(blocks)}")
    part = Partition(tuple(blocks), tuple(widths))
    if part.d != d:
        raise UsageError(f"blocks cover {part.d} coordinates, expected {d}")
    return part


# -- messages and transport --------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Lift:
    """Broadcast lift ``S_j^sender`` for the data indices in ``data_index``."""

    round: int
    data_index: np.ndarray
    sender: int
    payload: np.ndarray

    @property
    def count(self):
        return len(self.data_index)


@dataclass(frozen=True, eq=False)
class BackProp:
    """``S'_{sender,receiver} = K_{sender,receiver}^T e_j^sender`` per data index."""

    round: int
    data_index: np.ndarray
    sender: int
    receiver: int
    payload: np.ndarray

    @property
    def count(self):
        return len(self.data_index)


@dataclass(frozen=True)
class DelayModel:
    """Per-delivery delays in rounds, bounded by ``max_delay``.

    ``fixed`` delays every message by exactly ``max_delay``; ``uniform`` draws
    an integer in ``[0, max_delay]``. Messages emitted in round 0 are always
    delivered immediately so every node starts with a complete memory.
    """

    max_delay: int = 0
    seed: int = 0
    distribution: str = "uniform"

    def __post_init__(self):
        if self.max_delay < 0:
            raise UsageError("max_delay must be non-negative")
        if self.distribution not in DELAY_DISTRIBUTIONS:
            raise UsageError(f"delay distribution must be one of {DELAY_DISTRIBUTIONS}")


class MessageBus:
    """Seeded virtual-time transport.

    ``send`` schedules one delivery per receiver; ``deliver(now)`` hands out,
    in (delivery round, emission order), every delivery due by ``now``.
    """

    def __init__(self, delay_model: DelayModel):
        self.delay_model = delay_model
        self._rng = np.random.default_rng(delay_model.seed)
        self._queue: List = []
        self._seq = 0
        self.sent_lift = 0
        self.sent_backprop = 0

    def _delay(self, now):
        dm = self.delay_model
        if now == 0 or dm.max_delay == 0:
            return 0
        if dm.distribution == "fixed":
            delay = dm.max_delay
        else:
            delay = int(self._rng.integers(0, dm.max_delay + 1))
        if delay > dm.max_delay:
            raise ProtocolError(f"internal error: sampled delay {delay} exceeds {dm.max_delay}")
        return delay

    def send(self, msg, receivers, now):
        if isinstance(msg, Lift):
            self.sent_lift += msg.count
        else:
            self.sent_backprop += msg.count
        for r in receivers:
            heapq.heappush(self._queue, (now + self._delay(now), self._seq, r, msg))
            self._seq += 1

    def deliver(self, now):
        out = []
        while self._queue and self._queue[0][0] <= now:
            _, _, receiver, msg = heapq.heappop(self._queue)
            out.append((receiver, msg))
        return out

    @property
    def in_flight(self):
        return len(self._queue)


# -- nodes -------------------------------------------------------------------------


@dataclass
class NodeState:
    """Parameters, accumulators and message memory of one node.

    ``k_row`` is ``[K_i1 ... K_iq]`` with shape ``(lift width of i, total lift width)``.
    ``lift_memory[(sender, chunk_start)]`` and ``back_memory[(sender, chunk_start)]``
    hold the latest delivered payload with its emission round.
    """

    id: int
    block: Tuple[int, ...]
    params: DictionaryParams
    k_row: np.ndarray
    A: Optional[list] = None
    B: Optional[list] = None
    C: Optional[np.ndarray] = None
    lift_memory: Dict[Tuple[int, int], Tuple[int, np.ndarray]] = field(default_factory=dict)
    back_memory: Dict[Tuple[int, int], Tuple[int, np.ndarray]] = field(default_factory=dict)

    @property
    def width(self):
        return self.params.lift_dim

    def fresh(self):
        """Copy with zeroed accumulators and copied memories."""
        return NodeState(self.id, self.block, self.params, self.k_row.copy(),
                         self.params.zero_grads(), self.params.zero_grads(),
                         np.zeros_like(self.k_row), dict(self.lift_memory), dict(self.back_memory))

    def remember(self, msg):
        memory = self.lift_memory if isinstance(msg, Lift) else self.back_memory
        key = (msg.sender, int(msg.data_index[0]))
        held = memory.get(key)
        # keep the most recently emitted payload; late arrivals of older rounds are dropped
        if held is None or held[0] <= msg.round:
            memory[key] = (msg.round, msg.payload)


def init_nodes(partition, data_dim, layer_widths, activation="tanh", augment_state=True,
               rng=None, k_noise=None):
    """Seeded initial nodes: per-block dictionaries and the row blocks of
    ``I + U(-noise, noise)``."""
    if partition.d != data_dim:
        raise ShapeError(f"partition covers {partition.d} coordinates, data has {data_dim}")
    rng = np.random.default_rng(rng)
    parts = []
    for b, w in zip(partition.blocks, partition.widths):
        widths = list(layer_widths[:-1]) + [w] if layer_widths else [w]
        parts.append(init_params(len(b), widths, activation, augment_state, rng))
    total = sum(p.lift_dim for p in parts)
    K = trainer.init_koopman(total, rng, k_noise)
    return nodes_from_global(BlockDictionary(parts, partition.blocks), K)


def nodes_from_global(block_dict, K):
    """Split a block dictionary and full ``K`` into node states."""
    K = np.asarray(K, dtype=float)
    if K.shape != (block_dict.lift_dim, block_dict.lift_dim):
        raise ShapeError(f"K must be {block_dict.lift_dim}x{block_dict.lift_dim}, got {K.shape}")
    nodes = []
    for i, (p, b) in enumerate(zip(block_dict.parts, block_dict.blocks)):
        sl = block_dict.block_slice(i)
        nodes.append(NodeState(i, tuple(int(c) for c in b), p, K[sl].copy()))
    return nodes


def assemble_global(nodes):
    """Global view ``(BlockDictionary, K)`` of a list of nodes."""
    widths = [n.width for n in nodes]
    total = sum(widths)
    for n in nodes:
        if n.k_row.shape != (n.width, total):
            raise ShapeError(
                f"node {n.id} holds a K-row of shape {n.k_row.shape}, expected {(n.width, total)}"
            )
    bd = BlockDictionary([n.params for n in nodes], [n.block for n in nodes])
    return bd, np.vstack([n.k_row for n in nodes])


# -- rounds ------------------------------------------------------------------------


def _chunks(n, batch_size):
    size = n if batch_size is None else max(1, int(batch_size))
    return [np.arange(s, min(s + size, n)) for s in range(0, n, size)]


def _slice_cache(cache, idx):
    hidden, pre = cache
    return [h[idx] for h in hidden], [a[idx] for a in pre]


def _add(acc, grads):
    return [a + g for a, g in zip(acc, grads)]


@dataclass
class RoundStats:
    lift_messages: int = 0
    backprop_messages: int = 0
    max_staleness: int = 0
    staleness: Counter = field(default_factory=Counter)

    @property
    def messages(self):
        return self.lift_messages + self.backprop_messages


def _read(node, memory, sender, idx, now, what, stats):
    key = (sender, int(idx[0]))
    held = memory.get(key)
    if held is None:
        raise ProtocolError(
            f"round {now}: node {node.id} has no {what} message from node {sender} "
            f"for data indices {int(idx[0])}..{int(idx[-1])}"
        )
    emitted, payload = held
    age = now - emitted
    stats.staleness[age] += len(idx)
    stats.max_staleness = max(stats.max_staleness, age)
    return payload


def _round(nodes, bus, data, rates, now, batch_size=None, gradient="full"):
    """One protocol round over every node; returns the new nodes and stats."""
    eta_w, eta_k = rates
    n = data.n
    q = len(nodes)
    widths = [nd.width for nd in nodes]
    offsets = np.cumsum([0] + widths)
    chunks = _chunks(n, batch_size)
    stats = RoundStats()
    sent_before = (bus.sent_lift, bus.sent_backprop)

    # work on copies so the caller's nodes are never mutated
    nodes = [nd.fresh() for nd in nodes]

    # local lifts of x_j (X0) and x_{j+1} (X1)
    lifted = []
    for nd in nodes:
        b = list(nd.block)
        Z0, c0 = nd.params.forward(data.X0[:, b])
        Z1, c1 = nd.params.forward(data.X1[:, b])
        lifted.append((Z0, c0, Z1, c1))

    # communication stage 1: broadcast S_j^i
    for nd, (Z0, _, _, _) in zip(nodes, lifted):
        peers = [v for v in range(q) if v != nd.id]
        for idx in chunks:
            bus.send(Lift(now, idx, nd.id, Z0[idx]), peers, now)
    for receiver, msg in bus.deliver(now):
        nodes[receiver].remember(msg)

    # residuals, C accumulation, stage 2: send S'_iv
    residuals = []
    for nd, (Z0, _, Z1, _) in zip(nodes, lifted):
        E = np.empty((n, nd.width))
        for idx in chunks:
            S = np.empty((len(idx), offsets[-1]))
            for v in range(q):
                if v == nd.id:
                    S[:, offsets[v]:offsets[v + 1]] = Z0[idx]
                else:
                    S[:, offsets[v]:offsets[v + 1]] = _read(
                        nd, nd.lift_memory, v, idx, now, "Lift", stats)
            e = Z1[idx] - S @ nd.k_row.T
            E[idx] = e
            nd.C -= e.T @ S
        residuals.append(E)
        for v in range(q):
            if v == nd.id:
                continue
            K_iv = nd.k_row[:, offsets[v]:offsets[v + 1]]
            for idx in chunks:
                bus.send(BackProp(now, idx, nd.id, v, E[idx] @ K_iv), [v], now)
    for receiver, msg in bus.deliver(now):
        nodes[receiver].remember(msg)

    # computation stage: A_i and B_i
    for nd, (Z0, c0, Z1, c1), E in zip(nodes, lifted, residuals):
        b = list(nd.block)
        K_ii = nd.k_row[:, offsets[nd.id]:offsets[nd.id + 1]]
        for idx in chunks:
            back = E[idx] @ K_ii
            for k in range(q):
                if k != nd.id:
                    back = back + _read(nd, nd.back_memory, k, idx, now, "BackProp", stats)
            if gradient == "full":
                nd.A = _add(nd.A, nd.params.backprop(data.X1[idx][:, b], E[idx],
                                                     _slice_cache(c1, idx)))
            nd.B = _add(nd.B, nd.params.backprop(data.X0[idx][:, b], -back,
                                                 _slice_cache(c0, idx)))

    # update stage
    for nd in nodes:
        grads = [(a + b_) / n for a, b_ in zip(nd.A, nd.B)]
        nd.params = nd.params.apply_step(grads, eta_w)
        nd.k_row = nd.k_row - (eta_k / n) * nd.C
    stats.lift_messages = bus.sent_lift - sent_before[0]
    stats.backprop_messages = bus.sent_backprop - sent_before[1]
    return nodes, stats


def sync_round(nodes, data, rates, round_index=0, batch_size=None, gradient="full"):
    """One synchronous round: every message is delivered within the round."""
    bus = MessageBus(DelayModel(0))
    new, stats = _round(nodes, bus, data, rates, round_index, batch_size, gradient)
    return new, stats


def async_round(nodes, bus, data, rates, round_index, batch_size=None, gradient="full"):
    """One asynchronous round on a persistent ``bus``.

    Identical to :func:`sync_round` except that peer payloads come from each
    node's memory of the latest delivered messages.
    """
    return _round(nodes, bus, data, rates, round_index, batch_size, gradient)


def centralized_jacobi_step(params, K, data, rates, gradient="full"):
    """Update ``K`` and ``W`` simultaneously from gradients at ``(W, K)``."""
    eta_w, eta_k = rates
    cache = LiftCache(params, data)
    E = cache.residuals(K)
    gk = cache.grad_K(K, E)
    gw = cache.grad_W(K, E, gradient)
    return params.apply_step(gw, eta_w), np.asarray(K, dtype=float) - eta_k * gk


# -- driver ------------------------------------------------------------------------


@dataclass
class DistConfig:
    q: int = 1
    layer_widths: Sequence[int] = (3,)
    activation: str = "tanh"
    augment_state: bool = True
    mode: str = "sync"
    max_delay: int = 0
    delay_dist: str = "uniform"
    seed: int = 0
    rounds: int = 100
    tol: float = 1e-8
    schedule: Schedule = field(default_factory=lambda: Schedule.constant(0.23))
    gradient: str = "full"
    batch_size: Optional[int] = None
    blocks: Optional[Sequence[Sequence[int]]] = None
    u_k: float = 4.0

    def __post_init__(self):
        if self.mode not in MODES:
            raise UsageError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.rounds < 0:
            raise UsageError("rounds must be non-negative")
        if self.mode == "sync" and self.max_delay != 0:
            raise UsageError("max_delay requires async mode")
        DelayModel(self.max_delay, self.seed, self.delay_dist)


@dataclass
class RoundRecord:
    round: int
    global_loss: float
    grad_norm_sum: float
    messages_sent: int
    max_staleness_observed: int

    def row(self):
        return [self.round, self.global_loss, self.grad_norm_sum, self.messages_sent,
                self.max_staleness_observed]


@dataclass
class DistResult:
    params: BlockDictionary
    k: np.ndarray
    best_params: BlockDictionary
    best_k: np.ndarray
    history: List[RoundRecord]
    partition: Partition
    staleness: Counter
    wall_time: float
    converged: bool
    nodes: list
    round_stats: List[RoundStats] = field(default_factory=list)

    @property
    def rounds(self):
        return len(self.history) - 1


def _global_metrics(nodes, data, gradient):
    bd, K = assemble_global(nodes)
    cache = LiftCache(bd, data)
    E = cache.residuals(K)
    loss = 0.5 * math.fsum(np.einsum("ij,ij->i", E, E)) / data.n
    gns = grads_norm(cache.grad_K(K, E)) + grads_norm(cache.grad_W(K, E, gradient))
    return bd, K, loss, gns


def distributed_rates(config, nodes, data):
    """``(L_W, L_K)`` for the assembled model when the schedule needs them."""
    if config.schedule.kind != "auto":
        return None, None
    bd, _ = assemble_global(nodes)
    if bd.n_layers != 1 or any(p.n_layers != 1 for p in bd.parts):
        raise UsageError("auto schedule requires single-layer node dictionaries")
    from .objective import BoundConfig
    return trainer.lipschitz_constants(bd, data, BoundConfig(u_k=config.u_k), config.gradient)


def run_distributed(config, data, nodes=None, partition=None):
    """Iterate rounds until ``config.rounds`` or a global gradient-norm sum
    below ``config.tol``; returns the assembled model and per-round history."""
    if partition is None:
        widths = config.layer_widths[-1]
        partition = partition_state(data.d, config.q, widths, config.blocks)
    if nodes is None:
        nodes = init_nodes(partition, data.d, list(config.layer_widths), config.activation,
                           config.augment_state, np.random.default_rng(config.seed))
    l_w, l_k = distributed_rates(config, nodes, data)
    delay = DelayModel(config.max_delay if config.mode == "async" else 0, config.seed,
                       config.delay_dist)
    bus = MessageBus(delay)
    staleness = Counter()
    all_stats = []
    start = time.perf_counter()

    bd, K, loss, gns = _global_metrics(nodes, data, config.gradient)
    history = [RoundRecord(0, loss, gns, 0, 0)]
    best = (gns, bd, K)
    converged = gns < config.tol
    t = 0
    while not converged and t < config.rounds:
        rates = learning_rate(config.schedule, t, l_w, l_k)
        with np.errstate(over="ignore", invalid="ignore"):
            nodes, stats = _round(nodes, bus, data, rates, t, config.batch_size, config.gradient)
            bd, K, loss, gns = _global_metrics(nodes, data, config.gradient)
        staleness.update(stats.staleness)
        all_stats.append(stats)
        t += 1
        rec = RoundRecord(t, loss, gns, stats.messages, stats.max_staleness)
        history.append(rec)
        if not (math.isfinite(loss) and math.isfinite(gns)):
            raise DivergenceError(f"non-finite global loss or gradient at round {t}", t, history)
        if gns <= best[0]:
            best = (gns, bd, K)
        converged = gns < config.tol
    return DistResult(bd, K, best[1], best[2], history, partition, staleness,
                      time.perf_counter() - start, converged, nodes, all_stats)


def run_jacobi(params, K, data, rates, rounds, gradient="full"):
    """Centralized Jacobi reference: the list of ``(params, K)`` iterates."""
    out = [(params, np.asarray(K, dtype=float))]
    for _ in range(rounds):
        params, K = centralized_jacobi_step(params, K, data, rates, gradient)
        out.append((params, K))
    return out


def write_round_history_csv(history, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ROUND_COLUMNS)
        for r in history:
            w.writerow([r.round, repr(float(r.global_loss)), repr(float(r.grad_norm_sum)),
                        r.messages_sent, r.max_staleness_observed])


def equivalence_check(nodes, data, rates, rounds, batch_size=None, gradient="full"):
    """Run sync rounds next to centralized Jacobi steps from the same start.

    Returns the per-round relative deviation
    ``max(||W_dist - W_ref|| / ||W_ref||, ||K_dist - K_ref|| / ||K_ref||)``
    and the per-round :class:`RoundStats`.
    """
    params, K = assemble_global(nodes)
    deviations, stats = [], []
    for t in range(rounds):
        nodes, st = sync_round(nodes, data, rates, t, batch_size, gradient)
        params, K = centralized_jacobi_step(params, K, data, rates, gradient)
        bd, Kd = assemble_global(nodes)
        dw = np.linalg.norm(bd.flat() - params.flat()) / max(np.linalg.norm(params.flat()), 1e-300)
        dk = np.linalg.norm(Kd - K) / max(np.linalg.norm(K), 1e-300)
        deviations.append(float(max(dw, dk)))
        stats.append(st)
    return deviations, stats
