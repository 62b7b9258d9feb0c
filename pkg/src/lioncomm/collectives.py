"""Majority-vote collectives over a pluggable transport.

Four ways to obtain the aggregated update at every rank:

* ``ps_gather_broadcast`` -- parameter-server style: gather at rank 0,
  sum, broadcast (flat sends or binomial trees).
* ``direct_allreduce`` -- offset values into an unsigned integer lane and
  run a ring reduce-scatter + allgather; the exact sum comes back.
* ``compressed_allreduce_1bit`` -- signs only: all-to-all of 1-bit chunks,
  local majority per chunk, 1-bit allgather of the result.
* ``allreduce_mean_f32`` -- elementwise mean in 32-bit floats (used for
  momentum synchronization, not votes).

All collectives are synchronous rendezvous points: every rank of the
topology must call with an equal-length vector, or a timeout error names
the missing peer.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import CapacityError, CollectiveError, ConfigError
from .quant import PackedBits, SignPolicy, apply_sign, pack, unpack
from .transport import DEFAULT_TIMEOUT, InprocTransport, Transport

# Tags distinguish phases within one collective generation.
TAG_GATHER = 1
TAG_BCAST = 2
TAG_RING_RS = 3
TAG_RING_AG = 4
TAG_ALLTOALL = 5
TAG_SIGN_AG = 6
TAG_REDUCE = 7
TAG_ALLGATHER = 8

LANE_DTYPES = {8: np.uint8, 16: np.uint16, 32: np.uint32}


@dataclass
class Topology:
    """One rank's endpoint into a P-worker world."""

    world_size: int
    rank: int
    transport: Transport
    generation: int = 0
    timeout: float = DEFAULT_TIMEOUT

    def __post_init__(self):
        if not (0 <= self.rank < self.world_size):
            raise ConfigError(f"rank {self.rank} outside world {self.world_size}")

    def next_generation(self) -> int:
        self.generation += 1
        return self.generation

    def send(self, dst: int, tag: int, payload: bytes, generation: int):
        self.transport.send(self.rank, dst, generation, tag, payload)

    def recv(self, src: int, tag: int, generation: int) -> bytes:
        return self.transport.recv(self.rank, src, generation, tag, self.timeout)


@dataclass
class VoteResult:
    """Aggregate returned by a vote collective, identical at every rank."""

    values: np.ndarray
    range: tuple[float, float]
    ties: int = field(default=0)


def _to_i64(x) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(x).ravel(), dtype=np.int64)


def _i64_bytes(a: np.ndarray) -> bytes:
    return np.ascontiguousarray(a, dtype="<i8").tobytes()


def _i64_from(b: bytes) -> np.ndarray:
    return np.frombuffer(b, dtype="<i8").astype(np.int64)


def _f64_bytes(a: np.ndarray) -> bytes:
    return np.ascontiguousarray(a, dtype="<f8").tobytes()


def _f64_from(b: bytes) -> np.ndarray:
    return np.frombuffer(b, dtype="<f8").astype(np.float64)


def _tree_reduce_to_root(vec: np.ndarray, topo: Topology, gen: int,
                         encode, decode) -> np.ndarray | None:
    """Binomial-tree sum at rank 0.  Returns the sum at rank 0, None elsewhere."""
    acc = vec.copy()
    mask = 1
    while mask < topo.world_size:
        if topo.rank & mask:
            topo.send(topo.rank - mask, TAG_REDUCE, encode(acc), gen)
            return None
        partner = topo.rank + mask
        if partner < topo.world_size:
            acc = acc + decode(topo.recv(partner, TAG_REDUCE, gen))
        mask <<= 1
    return acc


def _tree_broadcast(vec: np.ndarray | None, topo: Topology, gen: int,
                    encode, decode) -> np.ndarray:
    """Binomial-tree broadcast from rank 0."""
    p = topo.world_size
    mask = 1
    while mask < p:
        mask <<= 1
    mask >>= 1
    out = vec
    while mask > 0:
        if topo.rank % (mask << 1) == 0:
            peer = topo.rank + mask
            if peer < p:
                topo.send(peer, TAG_BCAST, encode(out), gen)
        elif topo.rank % (mask << 1) == mask:
            out = decode(topo.recv(topo.rank - mask, TAG_BCAST, gen))
        mask >>= 1
    return out


def ps_gather_broadcast(c_i, topo: Topology, efficient: bool = False) -> VoteResult:
    """Sum all workers' vectors at rank 0 and hand the sum back to everyone.

    ``efficient`` switches flat sends for binomial trees; results are
    identical either way.  Accepts integer or float vectors.
    """
    arr = np.asarray(c_i).ravel()
    is_float = np.issubdtype(arr.dtype, np.floating)
    if is_float:
        vec = arr.astype(np.float64)
        encode, decode = _f64_bytes, _f64_from
    else:
        vec = _to_i64(arr)
        encode, decode = _i64_bytes, _i64_from
    gen = topo.next_generation()
    p = topo.world_size

    if efficient:
        total = _tree_reduce_to_root(vec, topo, gen, encode, decode)
        total = _tree_broadcast(total, topo, gen, encode, decode)
    else:
        if topo.rank == 0:
            total = vec.copy()
            for src in range(1, p):
                total = total + decode(topo.recv(src, TAG_GATHER, gen))
            for dst in range(1, p):
                topo.send(dst, TAG_BCAST, encode(total), gen)
        else:
            topo.send(0, TAG_GATHER, encode(vec), gen)
            total = decode(topo.recv(0, TAG_BCAST, gen))

    ties = int(np.count_nonzero(total == 0))
    bound = float(np.max(np.abs(total))) if total.size else 0.0
    return VoteResult(values=total, range=(-bound, bound), ties=ties)


def choose_lane_bits(workers: int, q_max: int, binary_signs: bool = False) -> int:
    """Smallest lane in {8, 16, 32} whose unsigned range holds the worst-case sum."""
    max_stored = 1 if binary_signs else 2 * q_max
    need = workers * max_stored
    for bits in (8, 16, 32):
        if need <= (1 << bits) - 1:
            return bits
    raise CapacityError(
        f"sum of {workers} values up to {max_stored} exceeds a 32-bit lane")


def direct_allreduce(q_i, topo: Topology, q_max: int,
                     lane_bits: int | None = None,
                     binary_signs: bool = False) -> VoteResult:
    """Exact elementwise sum across ranks via ring reduce-scatter + allgather.

    Values are offset into [0, 2*q_max] (or mapped {-1,+1} -> {0,1} when
    ``binary_signs``) and summed in an unsigned lane; the capacity check
    runs before any communication.  ``q_max`` must be the declared range
    of the quantizer, identical at every rank.
    """
    q = _to_i64(q_i)
    p = topo.world_size
    max_stored = 1 if binary_signs else 2 * q_max
    if lane_bits is None:
        lane_bits = choose_lane_bits(p, q_max, binary_signs)
    if lane_bits not in LANE_DTYPES:
        raise ConfigError(f"lane_bits must be one of {sorted(LANE_DTYPES)}")
    if p * max_stored > (1 << lane_bits) - 1:
        raise CapacityError(
            f"{p} workers x stored range [0, {max_stored}] exceeds the "
            f"{lane_bits}-bit lane")

    if binary_signs:
        if np.any(np.abs(q) != 1):
            raise ConfigError("binary_signs requires values in {-1, +1}")
        stored = (q + 1) >> 1
        offset = 0
    else:
        if np.any(np.abs(q) > q_max):
            raise ConfigError(f"values exceed declared q_max={q_max}")
        stored = q + q_max
        offset = q_max

    dtype = LANE_DTYPES[lane_bits]
    n = stored.size
    chunk = -(-n // p)  # ceil
    padded = np.zeros(chunk * p, dtype=dtype)
    padded[:n] = stored.astype(dtype)
    chunks = [padded[i * chunk:(i + 1) * chunk].copy() for i in range(p)]

    gen = topo.next_generation()
    r = topo.rank
    if p > 1:
        right = (r + 1) % p
        left = (r - 1) % p
        # Reduce-scatter: after P-1 steps rank r owns the full sum of
        # chunk (r+1) mod p.
        for step in range(p - 1):
            send_idx = (r - step) % p
            recv_idx = (r - step - 1) % p
            topo.send(right, TAG_RING_RS, chunks[send_idx].tobytes(), gen)
            incoming = np.frombuffer(topo.recv(left, TAG_RING_RS, gen), dtype=dtype)
            chunks[recv_idx] = chunks[recv_idx] + incoming  # lane wraps guarded above
        own = (r + 1) % p
        # Allgather the reduced chunks around the same ring.
        for step in range(p - 1):
            send_idx = (own - step) % p
            recv_idx = (own - step - 1) % p
            topo.send(right, TAG_RING_AG, chunks[send_idx].tobytes(), gen)
            chunks[recv_idx] = np.frombuffer(
                topo.recv(left, TAG_RING_AG, gen), dtype=dtype).copy()

    summed = np.concatenate(chunks).astype(np.int64)[:n]
    if binary_signs:
        signed = 2 * summed - p
        bound = p
    else:
        signed = summed - p * offset
        bound = p * q_max
    ties = int(np.count_nonzero(signed == 0))
    return VoteResult(values=signed, range=(-float(bound), float(bound)), ties=ties)


def compressed_allreduce_1bit(c_i, topo: Topology,
                              policy: SignPolicy) -> VoteResult:
    """Two-stage 1-bit majority vote: all-to-all, local majority, allgather.

    Each rank's real vector is reduced to signs (zeros resolved by the
    policy), split into P chunks, and the i-th chunk of every rank lands
    at rank i packed to 1 bit.  Rank i sums the P sign chunks, takes the
    majority sign (ties again resolved by the policy), and an allgather
    of the recompressed chunks gives every rank the full +-1 vote.
    """
    x = np.asarray(c_i, dtype=np.float64).ravel()
    s = apply_sign(x, policy)
    if np.any(s == 0):
        raise ConfigError(
            "1-bit path cannot carry exact zeros; use the alternating policy")
    p = topo.world_size
    n = s.size
    chunk = -(-n // p)
    padded = np.ones(chunk * p, dtype=np.int64)  # pad with +1: never a tie
    padded[:n] = s

    gen = topo.next_generation()
    r = topo.rank

    # Stage 1: pairwise-exchange all-to-all of 1-bit chunks.
    mine = [padded[j * chunk:(j + 1) * chunk] for j in range(p)]
    received = [None] * p
    received[r] = mine[r]
    for j in range(p):
        if j != r:
            topo.send(j, TAG_ALLTOALL, pack(mine[j], 1, 1).to_bytes(), gen)
    for j in range(p):
        if j != r:
            received[j] = unpack(PackedBits.from_bytes(
                topo.recv(j, TAG_ALLTOALL, gen)))

    chunk_sum = np.sum(np.stack(received), axis=0)
    local_ties = int(np.count_nonzero(chunk_sum == 0))
    voted = apply_sign(chunk_sum, policy)
    if np.any(voted == 0):
        raise ConfigError(
            "1-bit path cannot carry exact zeros; use the alternating policy")

    # Stage 2: allgather of the voted chunks plus each chunk's tie count.
    my_payload = local_ties.to_bytes(4, "little") + pack(voted, 1, 1).to_bytes()
    gathered = [None] * p
    gathered[r] = (local_ties, voted)
    for j in range(p):
        if j != r:
            topo.send(j, TAG_SIGN_AG, my_payload, gen)
    for j in range(p):
        if j != r:
            raw = topo.recv(j, TAG_SIGN_AG, gen)
            ties_j = int.from_bytes(raw[:4], "little")
            gathered[j] = (ties_j, unpack(PackedBits.from_bytes(raw[4:])))

    total_ties = sum(t for t, _ in gathered)
    full = np.concatenate([v for _, v in gathered])[:n]
    return VoteResult(values=full, range=(-1.0, 1.0), ties=total_ties)


def majority_sign(agg, policy: SignPolicy) -> np.ndarray:
    """Elementwise sign of a signed aggregate, zeros resolved by the policy."""
    values = agg.values if isinstance(agg, VoteResult) else agg
    return apply_sign(np.asarray(values), policy)


def allreduce_mean_f32(x, topo: Topology) -> np.ndarray:
    """Elementwise mean across ranks, computed and transported in float32.

    Rank 0 gathers every rank's float32 vector, averages in double
    precision, and rounds once, so the result is within half an ulp of
    the exact mean of the float32 inputs; a binomial-tree broadcast then
    hands every rank the same bits.
    """
    vec = np.asarray(x, dtype=np.float32).ravel()

    def encode(a):
        return np.ascontiguousarray(a, dtype="<f4").tobytes()

    def decode(b):
        return np.frombuffer(b, dtype="<f4").astype(np.float32)

    gen = topo.next_generation()
    if topo.rank == 0:
        acc = vec.astype(np.float64)
        for src in range(1, topo.world_size):
            acc += decode(topo.recv(src, TAG_REDUCE, gen)).astype(np.float64)
        mean = (acc / topo.world_size).astype(np.float32)
    else:
        topo.send(0, TAG_REDUCE, encode(vec), gen)
        mean = np.empty(vec.size, dtype=np.float32)
    return _tree_broadcast(mean, topo, gen, encode, decode)


def allgather_f64(x, topo: Topology) -> list[np.ndarray]:
    """Every rank returns [x_0, ..., x_{P-1}] in rank order."""
    vec = np.asarray(x, dtype=np.float64).ravel()
    gen = topo.next_generation()
    out = [None] * topo.world_size
    out[topo.rank] = vec
    payload = _f64_bytes(vec)
    for j in range(topo.world_size):
        if j != topo.rank:
            topo.send(j, TAG_ALLGATHER, payload, gen)
    for j in range(topo.world_size):
        if j != topo.rank:
            out[j] = _f64_from(topo.recv(j, TAG_ALLGATHER, gen))
    return out


def run_ranks(world_size: int, fn, transport: Transport | None = None,
              transport_factory=None, timeout: float = DEFAULT_TIMEOUT) -> list:
    """Run ``fn(topo)`` on ``world_size`` threads.

    By default all ranks share one in-process transport.  Pass
    ``transport_factory(rank) -> Transport`` for per-rank endpoints
    (e.g. sockets); those are closed when the rank finishes.  Returns the
    per-rank results in rank order; the first rank exception is re-raised.
    """
    import threading

    if transport is None and transport_factory is None:
        transport = InprocTransport(world_size)
    results = [None] * world_size
    errors: list[tuple[int, BaseException]] = []

    def runner(rank: int):
        if transport_factory is not None:
            tp = transport_factory(rank)
        else:
            tp = transport
        topo = Topology(world_size=world_size, rank=rank,
                        transport=tp, timeout=timeout)
        try:
            results[rank] = fn(topo)
        except BaseException as exc:  # surfaced to the caller below
            errors.append((rank, exc))
        finally:
            if transport_factory is not None:
                tp.close()

    threads = [threading.Thread(target=runner, args=(r,), daemon=True)
               for r in range(world_size)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if errors:
        errors.sort(key=lambda e: e[0])
        raise errors[0][1]
    return results
