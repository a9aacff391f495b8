"""Federated training loops: local, FedAvg, pFedMe and pFedFair.

All four share the same client objective, the fairness-regularized BCE
``L_fair = BCE + eta * smoothed_DDP``, and differ only in where the
fairness term and the proximal personalization enter.

pFedFair round, per client ``i`` holding global weights ``w``::

    g_i      = grad BCE_i(w)                                   # clean loss
    w_i      = argmin_v L_fair,i(v) + gamma/2 ||v - w||^2      # K GD steps
    g_i_fair = gamma * (w - w_i)                               # envelope grad
    w~_i     = w - alpha * (g_i + lambda * g_i_fair)

and the server averages ``w~_i`` with equal weights.
"""

from __future__ import annotations

import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .data import ClientDataset
from .fairness import FairnessPenaltyConfig, fair_loss_and_grad, kde_penalty_from_logits
from .metrics import MetricsRecord, evaluate_model
from .model import LossReport, ModelParams, bce_from_logits, bce_loss_and_grad, init_params, logits
from .numerics import Rng

log = logging.getLogger(__name__)

ALGORITHMS = ("local", "fedavg", "pfedme", "pfedfair")
DIVERGENCE_NORM = 1e6

# named random streams
STREAM_INIT = 1
STREAM_PARTICIPATION = 2


class DivergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class FairFLConfig:
    algorithm: str = "pfedfair"
    rounds: int = 50
    outer_lr: float = 0.5
    inner_steps: int = 10
    inner_lr: float = 0.05
    lam: float = 0.4
    gamma: float = 1.0
    fairness: FairnessPenaltyConfig = field(default_factory=FairnessPenaltyConfig)
    seed: int = 0
    arch: str = "linear"
    hidden: tuple[int, ...] = ()
    inner_objective: str = "fair"
    participation: float = 1.0
    workers: int = 1

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.algorithm!r}; choose from {ALGORITHMS}")
        if self.rounds < 0:
            raise ValueError("rounds must be >= 0")
        if self.inner_steps < 1:
            raise ValueError("inner_steps must be >= 1")
        if self.outer_lr <= 0 or self.inner_lr <= 0:
            raise ValueError("step sizes must be positive")
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.gamma <= 0:
            raise ValueError("gamma must be > 0")
        if self.inner_objective not in ("fair", "clean"):
            raise ValueError("inner_objective must be 'fair' or 'clean'")
        if not 0.0 < self.participation <= 1.0:
            raise ValueError("participation must lie in (0, 1]")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))

    def with_(self, **kw) -> "FairFLConfig":
        if "eta" in kw or "bandwidth_h" in kw:
            fair = FairnessPenaltyConfig(kw.pop("eta", self.fairness.eta),
                                         kw.pop("bandwidth_h", self.fairness.bandwidth_h))
            kw["fairness"] = fair
        return replace(self, **kw)


@dataclass
class FederationState:
    global_w: ModelParams
    personalized: list[ModelParams]
    client_ids: list[int]
    t: int = 0

    def model_for(self, client_id: int, algorithm: str) -> ModelParams:
        if algorithm == "fedavg":
            return self.global_w
        return self.personalized[self.client_ids.index(client_id)]


@dataclass
class RoundLog:
    round: int
    client_loss: list[float]
    client_penalty: list[float]
    update_norm: list[float]
    global_norm: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


# --------------------------------------------------------------------------
# building blocks
# --------------------------------------------------------------------------

Objective = Callable[[ModelParams], LossReport]


def client_objective(client: ClientDataset, cfg: FairFLConfig, clean: bool = False) -> Objective:
    if clean:
        return lambda p: bce_loss_and_grad(p, client)
    return lambda p: fair_loss_and_grad(p, client, cfg.fairness)


def _guard(w: np.ndarray, where: str) -> None:
    if not np.all(np.isfinite(w)):
        raise DivergenceError(f"non-finite weights at {where}")
    norm = float(np.linalg.norm(w))
    if norm > DIVERGENCE_NORM:
        raise DivergenceError(f"weight norm {norm:.3g} exceeds {DIVERGENCE_NORM:g} at {where}")


def moreau_argmin(global_w: ModelParams, client, cfg: FairFLConfig, where: str = "") -> ModelParams:
    """Approximate prox point of the client objective around ``global_w``.

    ``client`` is either a :class:`ClientDataset` (objective chosen by
    ``cfg.inner_objective``) or any callable ``params -> LossReport``.
    Runs ``cfg.inner_steps`` plain GD steps of size ``cfg.inner_lr`` from
    ``global_w`` on ``objective(v) + gamma/2 ||v - global_w||^2``.
    """
    if isinstance(client, ClientDataset):
        obj = client_objective(client, cfg, clean=cfg.inner_objective == "clean")
    else:
        obj = client
    w0 = global_w.w
    w = w0.copy()
    for k in range(cfg.inner_steps):
        grad = obj(global_w.with_weights(w)).gradient
        w = w - cfg.inner_lr * (grad + cfg.gamma * (w - w0))
        _guard(w, f"{where} inner step {k}")
    return global_w.with_weights(w)


def gd_steps(start: ModelParams, obj: Objective, steps: int, lr: float, where: str = "") -> ModelParams:
    w = start.w.copy()
    for k in range(steps):
        w = w - lr * obj(start.with_weights(w)).gradient
        _guard(w, f"{where} step {k}")
    return start.with_weights(w)


def aggregate(updates: dict[int, np.ndarray]) -> np.ndarray:
    """Equal-weight mean, summed in ascending client id order."""
    if not updates:
        raise ValueError("aggregate: no client updates")
    ids = sorted(updates)
    total = np.zeros_like(updates[ids[0]])
    for cid in ids:
        total = total + updates[cid]
    return total / len(ids)


def _client_log(params: ModelParams, client: ClientDataset, cfg: FairFLConfig) -> tuple[float, float]:
    z = logits(params, client.X)
    loss, _ = bce_from_logits(z, client.y)
    pen, _ = kde_penalty_from_logits(z, client.s, cfg.fairness.bandwidth_h)
    return loss + cfg.fairness.eta * pen, pen


def _map(fn, items, workers: int):
    if workers <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, items))


def _participants(state: FederationState, clients: Sequence[ClientDataset], cfg: FairFLConfig):
    ordered = sorted(clients, key=lambda c: c.client_id)
    if cfg.participation >= 1.0:
        return ordered
    k = max(1, math.ceil(cfg.participation * len(ordered)))
    rng = Rng(cfg.seed, (STREAM_PARTICIPATION, state.t))
    pick = np.sort(rng.permutation(len(ordered))[:k])
    return [ordered[i] for i in pick]


# --------------------------------------------------------------------------
# rounds
# --------------------------------------------------------------------------


def _finish_round(state, cfg, results, personal_updates) -> tuple[FederationState, RoundLog]:
    w = state.global_w.w
    new_w = aggregate({cid: wt for cid, wt, *_ in results})
    _guard(new_w, f"round {state.t} aggregation")
    personalized = list(state.personalized)
    for cid, params in personal_updates.items():
        personalized[state.client_ids.index(cid)] = params
    entry = RoundLog(
        round=state.t,
        client_loss=[r[2] for r in results],
        client_penalty=[r[3] for r in results],
        update_norm=[float(np.linalg.norm(r[1] - w)) for r in results],
        global_norm=float(np.linalg.norm(new_w)),
    )
    new_state = FederationState(state.global_w.with_weights(new_w), personalized,
                                list(state.client_ids), state.t + 1)
    return new_state, entry


def pfedfair_round(state: FederationState, clients: Sequence[ClientDataset], cfg: FairFLConfig):
    w = state.global_w

    def work(client):
        where = f"round {state.t} client {client.client_id}"
        g = bce_loss_and_grad(w, client).gradient
        personal = moreau_argmin(w, client, cfg, where)
        g_fair = cfg.gamma * (w.w - personal.w)
        w_tilde = w.w - cfg.outer_lr * (g + cfg.lam * g_fair)
        _guard(w_tilde, where)
        loss, pen = _client_log(personal, client, cfg)
        return client.client_id, w_tilde, loss, pen, personal

    results = _map(work, _participants(state, clients, cfg), cfg.workers)
    return _finish_round(state, cfg, results, {r[0]: r[4] for r in results})


def pfedme_round(state: FederationState, clients: Sequence[ClientDataset], cfg: FairFLConfig):
    """Moreau personalization of the whole fair objective; ``cfg.lam`` is unused."""
    w = state.global_w
    full = replace(cfg, inner_objective="fair")

    def work(client):
        where = f"round {state.t} client {client.client_id}"
        personal = moreau_argmin(w, client, full, where)
        w_tilde = w.w - cfg.outer_lr * cfg.gamma * (w.w - personal.w)
        _guard(w_tilde, where)
        loss, pen = _client_log(personal, client, cfg)
        return client.client_id, w_tilde, loss, pen, personal

    results = _map(work, _participants(state, clients, cfg), cfg.workers)
    return _finish_round(state, cfg, results, {r[0]: r[4] for r in results})


def fedavg_round(state: FederationState, clients: Sequence[ClientDataset], cfg: FairFLConfig):
    w = state.global_w

    def work(client):
        where = f"round {state.t} client {client.client_id}"
        local = gd_steps(w, client_objective(client, cfg), cfg.inner_steps, cfg.inner_lr, where)
        loss, pen = _client_log(local, client, cfg)
        return client.client_id, local.w, loss, pen

    results = _map(work, _participants(state, clients, cfg), cfg.workers)
    new_state, entry = _finish_round(state, cfg, results, {})
    new_state.personalized = [new_state.global_w] * len(new_state.client_ids)
    return new_state, entry


def local_round(state: FederationState, clients: Sequence[ClientDataset], cfg: FairFLConfig):
    """Every client advances its own model by K steps; nothing is shared."""
    def work(client):
        where = f"round {state.t} client {client.client_id}"
        start = state.model_for(client.client_id, "local")
        local = gd_steps(start, client_objective(client, cfg), cfg.inner_steps, cfg.inner_lr, where)
        loss, pen = _client_log(local, client, cfg)
        return client.client_id, local, loss, pen

    results = _map(work, sorted(clients, key=lambda c: c.client_id), cfg.workers)
    personalized = list(state.personalized)
    for cid, params, *_ in results:
        personalized[state.client_ids.index(cid)] = params
    entry = RoundLog(
        round=state.t,
        client_loss=[r[2] for r in results],
        client_penalty=[r[3] for r in results],
        update_norm=[float(np.linalg.norm(r[1].w - state.model_for(r[0], "local").w)) for r in results],
        global_norm=float(np.linalg.norm(state.global_w.w)),
    )
    return FederationState(state.global_w, personalized, list(state.client_ids), state.t + 1), entry


ROUND_FNS = {
    "local": local_round,
    "fedavg": fedavg_round,
    "pfedme": pfedme_round,
    "pfedfair": pfedfair_round,
}


def initial_state(clients: Sequence[ClientDataset], cfg: FairFLConfig,
                  init: ModelParams | None = None) -> FederationState:
    if not clients:
        raise ValueError("need at least one client")
    dims = {c.dim for c in clients}
    if len(dims) != 1:
        raise ValueError(f"clients disagree on feature dimension: {sorted(dims)}")
    ids = sorted(c.client_id for c in clients)
    if len(set(ids)) != len(ids):
        raise ValueError("client ids must be unique")
    if init is None:
        init = init_params(cfg.arch, dims.pop(), cfg.hidden, Rng(cfg.seed, STREAM_INIT))
    return FederationState(init, [init] * len(ids), ids, 0)


def train(clients: Sequence[ClientDataset], cfg: FairFLConfig, init: ModelParams | None = None,
          log_path=None) -> tuple[FederationState, list[RoundLog]]:
    """Run ``cfg.rounds`` rounds of ``cfg.algorithm`` from a seeded init."""
    for c in clients:
        c.require_both_groups()
    state = initial_state(clients, cfg, init)
    step = ROUND_FNS[cfg.algorithm]
    logs: list[RoundLog] = []
    fh = open(log_path, "w") if log_path else None
    try:
        for _ in range(cfg.rounds):
            state, entry = step(state, clients, cfg)
            logs.append(entry)
            if fh:
                fh.write(entry.to_json() + "\n")
    finally:
        if fh:
            fh.close()
    log.debug("trained %s for %d rounds", cfg.algorithm, cfg.rounds)
    return state, logs


def evaluate(state: FederationState, test_clients: Sequence[ClientDataset], cfg: FairFLConfig) -> list[MetricsRecord]:
    """Personalized models for local/pfedme/pfedfair, the global one for fedavg."""
    out = []
    for client in sorted(test_clients, key=lambda c: c.client_id):
        if len(client) == 0:
            raise ValueError(f"client {client.client_id}: empty test shard")
        out.append(evaluate_model(state.model_for(client.client_id, cfg.algorithm), client))
    return out


def default_workers() -> int:
    try:
        return max(1, int(os.environ.get("FAIRFL_THREADS", "1")))
    except ValueError:
        return 1
