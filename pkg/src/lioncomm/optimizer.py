"""Lion, signSGD-with-majority-vote, and distributed Lion with quantization.

Parameters and momentum live in a ``ParamSet``: a plain dict mapping layer
names to flat float64 vectors.  Each rank owns one ``WorkerState``;
distributed steps interact only through the collectives module, and the
parameter vector stays bit-identical across ranks because every rank
applies the same aggregated sign.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, replace
from typing import Callable, Mapping, Union

import numpy as np

from . import collectives as coll
from .collectives import Topology, VoteResult
from .errors import ConfigError
from .quant import QuantSpec, SignPolicy, apply_sign, quantize

ParamSet = dict[str, np.ndarray]

LrSchedule = Union[float, Callable[[int], float]]


def zeros_like_params(params: ParamSet) -> ParamSet:
    return {k: np.zeros_like(v) for k, v in params.items()}


def hash_params(params: ParamSet) -> str:
    """Stable digest for cross-rank consistency checks."""
    h = hashlib.sha256()
    for name in sorted(params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(params[name], dtype="<f8").tobytes())
    return h.hexdigest()


@dataclass(frozen=True)
class LionHyper:
    beta1: float = 0.9
    beta2: float = 0.99
    lr: LrSchedule = 1e-4
    weight_decay: float = 0.0

    def __post_init__(self):
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ConfigError("beta1 and beta2 must be strictly inside (0, 1)")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")

    def lr_at(self, t: int) -> float:
        eta = self.lr(t) if callable(self.lr) else float(self.lr)
        if eta <= 0:
            raise ConfigError(f"learning rate must be positive, got {eta} at t={t}")
        return eta


@dataclass
class WorkerState:
    params: ParamSet
    momentum: ParamSet
    iteration: int = 0

    @classmethod
    def initial(cls, params: ParamSet) -> "WorkerState":
        return cls(params={k: v.astype(np.float64).copy() for k, v in params.items()},
                   momentum=zeros_like_params(params), iteration=0)


@dataclass(frozen=True)
class SyncPolicy:
    """When and for which layers momentum is averaged across workers.

    period = 0 disables synchronization; layers is "all", "none", or an
    explicit collection of layer names.
    """

    period: int = 0
    layers: Union[str, frozenset] = "all"

    def __post_init__(self):
        if self.period < 0:
            raise ConfigError("period must be >= 0")
        if isinstance(self.layers, str):
            if self.layers not in ("all", "none"):
                raise ConfigError('layers must be "all", "none", or a set of names')
        else:
            object.__setattr__(self, "layers", frozenset(self.layers))

    def fires(self, t: int) -> bool:
        return self.period > 0 and t % self.period == 0

    def selects(self, layer: str) -> bool:
        if self.layers == "all":
            return True
        if self.layers == "none":
            return False
        return layer in self.layers


def _check_shapes(params: ParamSet, grad: ParamSet):
    if set(params) != set(grad):
        raise ConfigError(f"layer mismatch: {sorted(params)} vs {sorted(grad)}")
    for name in params:
        if params[name].shape != grad[name].shape:
            raise ConfigError(f"shape mismatch in layer {name!r}")


def lion_step(state: WorkerState, grad: ParamSet, h: LionHyper) -> WorkerState:
    """One single-worker Lion step.

    c = beta1*m + (1-beta1)*g;  theta -= lr*(sign(c) + wd*theta);
    m = beta2*m + (1-beta2)*g.  Exact zeros in c contribute no update.
    """
    _check_shapes(state.params, grad)
    t = state.iteration + 1
    eta = h.lr_at(t)
    new_params: ParamSet = {}
    new_mom: ParamSet = {}
    for name, theta in state.params.items():
        g = grad[name]
        m = state.momentum[name]
        c = h.beta1 * m + (1.0 - h.beta1) * g
        new_params[name] = theta - eta * (np.sign(c) + h.weight_decay * theta)
        new_mom[name] = h.beta2 * m + (1.0 - h.beta2) * g
    return WorkerState(params=new_params, momentum=new_mom, iteration=t)


VOTE_ALGOS = ("ps", "ps_efficient", "direct", "compressed1bit")


def _vote(c: np.ndarray, spec: QuantSpec | None, topo: Topology, algo: str,
          policy: SignPolicy, rng: np.random.Generator | None,
          timing: dict | None = None) -> tuple[np.ndarray, VoteResult]:
    """Quantize one layer's update and aggregate it; returns (sign, vote)."""
    t0 = time.perf_counter()
    if algo == "compressed1bit":
        vote = coll.compressed_allreduce_1bit(c, topo, policy)
        if timing is not None:
            timing["t_comm"] = timing.get("t_comm", 0.0) + time.perf_counter() - t0
        return vote.values, vote
    if spec is None:
        q = c  # identity: full-precision sum (ps path only)
        if algo == "direct":
            raise ConfigError("direct allreduce needs an integer QuantSpec")
    elif spec.bits == 1:
        q = apply_sign(c, policy)
    else:
        q = quantize(c, spec, rng=rng)
    t1 = time.perf_counter()
    if algo in ("ps", "ps_efficient"):
        vote = coll.ps_gather_broadcast(q, topo, efficient=algo == "ps_efficient")
    elif algo == "direct":
        binary = spec.bits == 1
        vote = coll.direct_allreduce(q, topo, q_max=spec.qmax if not binary else 1,
                                     binary_signs=binary)
    else:
        raise ConfigError(f"unknown vote algorithm {algo!r}")
    sign = coll.majority_sign(vote, policy)
    if timing is not None:
        t2 = time.perf_counter()
        timing["t_quant"] = timing.get("t_quant", 0.0) + (t1 - t0)
        timing["t_comm"] = timing.get("t_comm", 0.0) + (t2 - t1)
    return sign, vote


def distributed_lion_step(state: WorkerState, grad_i: ParamSet, h: LionHyper,
                          spec: QuantSpec | None, topo: Topology, algo: str,
                          mask: Mapping[str, np.ndarray] | None = None,
                          zero_mode: str = "alternating",
                          rng: np.random.Generator | None = None,
                          metrics_out: dict | None = None) -> WorkerState:
    """One distributed Lion step (majority vote over quantized updates).

    Per layer: c_i = beta1*m + (1-beta1)*g_i is quantized per ``spec``
    (None = full precision, bits=1 = sign) and aggregated via ``algo``;
    every rank applies sign(c*), with zero aggregates resolved by
    ``zero_mode`` at the parity of the new iteration.  Momentum is updated
    from the local gradient only and never communicated here.

    ``metrics_out``, when given, receives per-layer "ties", "vote_sign",
    and "c_local" entries for analysis.
    """
    _check_shapes(state.params, grad_i)
    t = state.iteration + 1
    eta = h.lr_at(t)
    policy = SignPolicy(mode=zero_mode, iteration=t)
    new_params: ParamSet = {}
    new_mom: ParamSet = {}
    for name in sorted(state.params):
        theta = state.params[name]
        g = grad_i[name]
        m = state.momentum[name]
        c = h.beta1 * m + (1.0 - h.beta1) * g
        if mask is not None and name in mask:
            c = np.where(mask[name], c, 0.0)
        update_sign, vote = _vote(c, spec, topo, algo, policy, rng,
                                   timing=metrics_out)
        new_params[name] = theta - eta * (update_sign + h.weight_decay * theta)
        new_mom[name] = h.beta2 * m + (1.0 - h.beta2) * g
        if metrics_out is not None:
            metrics_out.setdefault("ties", {})[name] = vote.ties
            metrics_out.setdefault("vote_sign", {})[name] = update_sign
            metrics_out.setdefault("c_local", {})[name] = c
    return WorkerState(params=new_params, momentum=new_mom, iteration=t)


def signsgd_majority_step(state: WorkerState, grad_i: ParamSet, h: LionHyper,
                          topo: Topology, algo: str = "ps",
                          zero_mode: str = "alternating") -> WorkerState:
    """signSGD with majority vote: theta -= lr * sign(sum_i sign(g_i)).

    No momentum state is touched.
    """
    _check_shapes(state.params, grad_i)
    t = state.iteration + 1
    eta = h.lr_at(t)
    policy = SignPolicy(mode=zero_mode, iteration=t)
    new_params: ParamSet = {}
    for name in sorted(state.params):
        g = grad_i[name]
        if algo == "compressed1bit":
            vote = coll.compressed_allreduce_1bit(g, topo, policy)
            majority = vote.values
        else:
            s = apply_sign(g, policy)
            if algo in ("ps", "ps_efficient"):
                vote = coll.ps_gather_broadcast(s, topo,
                                                efficient=algo == "ps_efficient")
            elif algo == "direct":
                vote = coll.direct_allreduce(s, topo, q_max=1, binary_signs=True)
            else:
                raise ConfigError(f"unknown vote algorithm {algo!r}")
            majority = coll.majority_sign(vote, policy)
        new_params[name] = state.params[name] - eta * majority
    return WorkerState(params=new_params, momentum=state.momentum, iteration=t)


def maybe_sync_momentum(state: WorkerState, policy: SyncPolicy,
                        topo: Topology) -> WorkerState:
    """Average momentum across workers for selected layers at firing steps.

    A no-op (no communication at all) when the policy does not fire at the
    current iteration, so every rank must agree on the iteration count.
    """
    if not policy.fires(state.iteration):
        return state
    new_mom = dict(state.momentum)
    for name in sorted(state.momentum):
        if policy.selects(name):
            mean = coll.allreduce_mean_f32(state.momentum[name], topo)
            new_mom[name] = mean.astype(np.float64)
    return replace(state, momentum=new_mom)


def momentum_divergence(state: WorkerState, topo: Topology) -> dict[str, float]:
    """Max-over-elements population std of momentum across workers, per layer."""
    out: dict[str, float] = {}
    for name in sorted(state.momentum):
        stacked = np.stack(coll.allgather_f64(state.momentum[name], topo))
        out[name] = float(stacked.std(axis=0, ddof=0).max()) if stacked.size else 0.0
    return out


def divergence_from_momenta(momenta: list[ParamSet]) -> dict[str, float]:
    """Single-process counterpart of ``momentum_divergence``."""
    out: dict[str, float] = {}
    for name in sorted(momenta[0]):
        stacked = np.stack([m[name] for m in momenta])
        out[name] = float(stacked.std(axis=0, ddof=0).max())
    return out


def save_checkpoint(path: str, state: WorkerState, h: LionHyper | None = None):
    """Write params and momentum as little-endian float32 plus a JSON sidecar."""
    blob = bytearray()
    layers = []
    for name in sorted(state.params):
        for kind, arr in (("theta", state.params[name]),
                          ("momentum", state.momentum[name])):
            data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
            layers.append({"name": name, "kind": kind,
                           "shape": list(arr.shape), "offset": len(blob),
                           "nbytes": len(data)})
            blob.extend(data)
    side = {
        "layers": layers,
        "iteration": state.iteration,
        "hyperparameters": None if h is None else {
            "beta1": h.beta1, "beta2": h.beta2,
            "lr": h.lr if not callable(h.lr) else "<schedule>",
            "weight_decay": h.weight_decay,
        },
    }
    with open(path, "wb") as f:
        f.write(bytes(blob))
    with open(path + ".json", "w") as f:
        json.dump(side, f, indent=2)


def load_checkpoint(path: str) -> tuple[WorkerState, dict]:
    with open(path + ".json") as f:
        side = json.load(f)
    with open(path, "rb") as f:
        blob = f.read()
    params: ParamSet = {}
    momentum: ParamSet = {}
    for entry in side["layers"]:
        arr = np.frombuffer(
            blob, dtype="<f4", count=entry["nbytes"] // 4,
            offset=entry["offset"]).astype(np.float64).reshape(entry["shape"])
        (params if entry["kind"] == "theta" else momentum)[entry["name"]] = arr
    state = WorkerState(params=params, momentum=momentum,
                        iteration=side["iteration"])
    return state, side
