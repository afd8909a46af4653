"""Federated training loop with temperature-scaled local training.

Clients train with ``ce_loss_t(logits, labels, T)``; everything else is a
standard FedAvg-style simulation. FedProx, SCAFFOLD (option II control
update) and FedBN hook into the same local loop.
"""

from __future__ import annotations

import logging
import math
import os
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import analysis
from .data import ClientPartition, Dataset, train_eval_split
from .models import Model, ModelSpec, build_model
from .nn import BATCHNORM_ROLES, ParamSet, Tape, ce_loss_t, effective_lr, sgd_step
from .rng import stream

log = logging.getLogger(__name__)

ALGORITHMS = ("fedavg", "fedprox", "scaffold", "fedbn")


@dataclass
class FLConfig:
    total_clients: int = 10
    rounds: int = 300
    participants_per_round: int = 10
    local_epochs: int = 10
    batch_size: int = 16
    learning_rate: float = 0.001
    lr_decay: float = 1e-5
    temperature: float = 1.0
    algorithm: str = "fedavg"
    fedprox_mu: float = 0.01
    seed: int = 0
    model: ModelSpec | None = None
    target_accuracy: float | None = None
    # Optional {first_round: T} steps; the latest key <= round wins.
    temperature_schedule: dict[int, float] = field(default_factory=dict)
    # Temperature for test loss/entropy; None means "same as training".
    eval_temperature: float | None = None
    # Fraction of each client's samples held out for the pre/post
    # aggregation accuracy deltas.
    eval_fraction: float = 0.2
    track_entropy: bool = True
    track_aggregation_delta: bool = True

    def validate(self) -> None:
        def need(cond, msg):
            if not cond:
                raise ValueError(msg)

        need(self.total_clients >= 1, "total_clients must be >= 1")
        need(
            1 <= self.participants_per_round <= self.total_clients,
            f"participants_per_round must be in [1, {self.total_clients}]",
        )
        need(self.rounds >= 0, "rounds must be >= 0")
        need(self.local_epochs >= 1, "local_epochs must be >= 1")
        need(self.batch_size >= 1, "batch_size must be >= 1")
        need(self.learning_rate >= 0, "learning_rate must be >= 0")
        need(self.lr_decay >= 0, "lr_decay must be >= 0")
        need(self.temperature > 0 and math.isfinite(self.temperature), "temperature must be positive")
        need(self.algorithm in ALGORITHMS, f"algorithm must be one of {ALGORITHMS}")
        need(self.fedprox_mu >= 0, "fedprox_mu must be >= 0")
        need(self.seed >= 0, "seed must be >= 0")
        need(0 <= self.eval_fraction < 1, "eval_fraction must be in [0, 1)")
        need(
            self.target_accuracy is None or 0 < self.target_accuracy <= 1,
            "target_accuracy must be in (0, 1]",
        )
        need(self.eval_temperature is None or self.eval_temperature > 0, "eval_temperature must be positive")
        for r, t in self.temperature_schedule.items():
            need(r >= 1 and t > 0, f"bad temperature_schedule entry {r}: {t}")
        if self.algorithm == "scaffold":
            need(self.learning_rate > 0, "scaffold needs learning_rate > 0 (control update divides by it)")

    def temperature_at(self, round_idx: int) -> float:
        t = self.temperature
        for start in sorted(self.temperature_schedule):
            if start <= round_idx:
                t = self.temperature_schedule[start]
        return t


@dataclass
class RoundRecord:
    round: int
    global_test_accuracy: float
    global_test_loss: float
    pre_post_acc_delta_participants: float
    pre_post_acc_delta_nonparticipants: float
    entropy_pre_agg: float
    entropy_post_agg: float
    wall_time_s: float


@dataclass
class ControlState:
    """SCAFFOLD control variates, keyed by trainable parameter name."""

    server_c: dict[str, np.ndarray]
    client_c: dict[int, dict[str, np.ndarray]]

    @classmethod
    def zeros(cls, params: ParamSet, num_clients: int) -> "ControlState":
        def z():
            return {e.name: np.zeros_like(e.tensor.data) for e in params.trainable()}

        return cls(z(), {k: z() for k in range(num_clients)})


# ---------------------------------------------------------------- clients


def sample_clients(round_idx: int, cfg: FLConfig) -> list[int]:
    """Uniform choice of ``participants_per_round`` clients, sorted by id."""
    if cfg.participants_per_round == cfg.total_clients:
        return list(range(cfg.total_clients))
    rng = stream(cfg.seed, "select", round_idx)
    picked = rng.choice(cfg.total_clients, size=cfg.participants_per_round, replace=False)
    return sorted(int(c) for c in picked)


def _local_train(model: Model, data: Dataset, cfg: FLConfig, rng, temperature: float, adjust=None):
    """Run the minibatch SGD loop in place. Returns (steps, sum of step sizes)."""
    n = len(data)
    x, y = data.features, data.labels
    steps, lr_sum = 0, 0.0
    for _ in range(cfg.local_epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            with Tape() as tape:
                logits = model.forward(x[idx], train=True)
                loss = ce_loss_t(logits, y[idx], temperature)
            tape.backward(loss)
            if adjust is not None:
                adjust(model.params)
            lr_sum += effective_lr(cfg.learning_rate, cfg.lr_decay, steps)
            sgd_step(model.params, cfg.learning_rate, cfg.lr_decay, steps)
            steps += 1
    return steps, lr_sum


def _client_rng(cfg: FLConfig, round_idx: int, client_id: int):
    return stream(cfg.seed, "shuffle", round_idx, client_id)


def client_update(
    global_model: Model,
    data: Dataset | None,
    cfg: FLConfig,
    *,
    round_idx: int = 1,
    client_id: int = 0,
    temperature: float | None = None,
) -> Model | None:
    """Plain local training on a clone of ``global_model``.

    Returns ``None`` (with a warning) when the client has no data.
    """
    if data is None or len(data) == 0:
        warnings.warn(f"client {client_id} has no data; skipping this round", RuntimeWarning, stacklevel=2)
        return None
    T = cfg.temperature_at(round_idx) if temperature is None else temperature
    local = global_model.clone()
    _local_train(local, data, cfg, _client_rng(cfg, round_idx, client_id), T)
    return local


def fedprox_penalty(params: ParamSet, center: ParamSet, mu: float) -> float:
    """(mu/2) * ||w - w_center||^2 over the trainable entries."""
    sq = sum(float(np.sum((e.tensor.data - center[e.name].data) ** 2)) for e in params.trainable())
    return 0.5 * mu * sq


def client_update_fedprox(
    global_model: Model,
    data: Dataset | None,
    cfg: FLConfig,
    *,
    round_idx: int = 1,
    client_id: int = 0,
    temperature: float | None = None,
) -> Model | None:
    """Local training with the proximal gradient ``mu * (w - w_global)`` added each step."""
    if data is None or len(data) == 0:
        warnings.warn(f"client {client_id} has no data; skipping this round", RuntimeWarning, stacklevel=2)
        return None
    T = cfg.temperature_at(round_idx) if temperature is None else temperature
    local = global_model.clone()
    anchor = {e.name: e.tensor.data for e in global_model.params.trainable()}
    mu = cfg.fedprox_mu

    def prox(params):
        for e in params.trainable():
            e.tensor.grad = e.tensor.grad + mu * (e.tensor.data - anchor[e.name])

    _local_train(local, data, cfg, _client_rng(cfg, round_idx, client_id), T, prox)
    return local


def client_update_scaffold(
    global_model: Model,
    data: Dataset | None,
    cfg: FLConfig,
    ctl: ControlState,
    client_id: int,
    *,
    round_idx: int = 1,
    temperature: float | None = None,
):
    """SCAFFOLD local training. Returns ``(model, new_client_control)``.

    Each gradient is corrected by ``c - c_i``. The new client control is
    ``c_i - c + (w_global - w_local) / sum(step sizes)``, which reduces to
    the usual ``/(S * lr)`` when there is no learning-rate decay.
    """
    if cfg.learning_rate <= 0:
        raise ValueError("scaffold needs learning_rate > 0")
    if data is None or len(data) == 0:
        warnings.warn(f"client {client_id} has no data; skipping this round", RuntimeWarning, stacklevel=2)
        return None, None
    T = cfg.temperature_at(round_idx) if temperature is None else temperature
    local = global_model.clone()
    c, ci = ctl.server_c, ctl.client_c[client_id]

    def correct(params):
        for e in params.trainable():
            e.tensor.grad = e.tensor.grad - ci[e.name] + c[e.name]

    _, lr_sum = _local_train(local, data, cfg, _client_rng(cfg, round_idx, client_id), T, correct)
    new_ci = {}
    for e in local.params.trainable():
        drift = global_model.params[e.name].data - e.tensor.data
        new_ci[e.name] = ci[e.name] - c[e.name] + drift / lr_sum
    return local, new_ci


# ---------------------------------------------------------------- server


def aggregate(models, mode: str = "fedavg", base: ParamSet | None = None) -> ParamSet:
    """Weighted elementwise mean of congruent ParamSets.

    ``models`` is a list of ``(ParamSet, weight)``; weights are normalized to
    sum to one. The mean is computed as ``w_0 + sum_k a_k (w_k - w_0)`` so
    that averaging identical inputs returns them bit-exactly. In ``fedbn``
    mode batch-norm entries are not averaged; they are copied from ``base``
    (default: the first input).
    """
    if mode not in ("fedavg", "fedbn"):
        raise ValueError(f"unknown aggregation mode {mode!r}")
    if not models:
        raise ValueError("nothing to aggregate")
    sets = [m for m, _ in models]
    weights = np.array([float(w) for _, w in models])
    if (weights < 0).any():
        raise ValueError("aggregation weights must be non-negative")
    total = weights.sum()
    if not total > 0:
        raise ValueError("aggregation weights sum to zero")
    weights = weights / total
    first = sets[0]
    for s in sets[1:]:
        if not s.congruent(first):
            raise ValueError("cannot aggregate non-congruent parameter sets")
    if base is not None and not base.congruent(first):
        raise ValueError("base parameter set is not congruent with the inputs")

    out = first.clone()
    for e in out:
        if mode == "fedbn" and e.role in BATCHNORM_ROLES:
            if base is not None:
                e.tensor.data[...] = base[e.name].data
            continue
        anchor = first[e.name].data
        acc = anchor.copy()
        for s, a in zip(sets[1:], weights[1:]):
            acc += a * (s[e.name].data - anchor)
        e.tensor.data[...] = acc
    return out


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("FLEXCHILL_THREADS", "1")))
    except ValueError:
        return 1


@dataclass
class RoundState:
    """What a round callback sees after aggregation and evaluation."""

    round: int
    temperature: float
    participants: list[int]
    dispatched: Model
    local_models: dict[int, Model]
    global_model: Model
    record: RoundRecord


def _bn_names(params: ParamSet) -> list[str]:
    return [e.name for e in params if e.role in BATCHNORM_ROLES]


def run_federated(
    cfg: FLConfig,
    ds: Dataset,
    partition: ClientPartition,
    test_ds: Dataset,
    *,
    model: Model | None = None,
    callback: Callable[[RoundState], None] | None = None,
) -> tuple[list[RoundRecord], Model]:
    """Simulate ``cfg.rounds`` rounds. Deterministic given ``cfg.seed``.

    Client updates within a round run on up to ``FLEXCHILL_THREADS``
    threads; results are always reduced in client-id order, so the thread
    count never changes the outcome.
    """
    cfg.validate()
    if partition.num_clients != cfg.total_clients:
        raise ValueError(
            f"partition has {partition.num_clients} clients, config expects {cfg.total_clients}"
        )
    partition.validate(len(ds))
    if model is None:
        if cfg.model is None:
            raise ValueError("FLConfig.model is not set")
        model = build_model(cfg.model, cfg.seed)
    global_model = model.clone()

    split_rng = stream(cfg.seed, "client-eval-split")
    train_sets, eval_sets, sizes = [], [], []
    for idx in partition.assignments:
        tr, ev = train_eval_split(idx, cfg.eval_fraction, split_rng)
        train_sets.append(ds.subset(tr))
        eval_sets.append(ds.subset(ev))
        sizes.append(len(tr))

    bn_names = _bn_names(global_model.params) if cfg.algorithm == "fedbn" else []
    init_bn = {n: global_model.params[n].data.copy() for n in bn_names}
    bn_table: dict[int, dict[str, np.ndarray]] = {}
    ctl = ControlState.zeros(global_model.params, cfg.total_clients) if cfg.algorithm == "scaffold" else None

    def personalize(base: Model, k: int) -> Model:
        if not bn_names:
            return base
        m = base.clone()
        m.params.load_arrays(bn_table.get(k, init_bn), bn_names)
        return m

    def work(k, dispatched, T, r):
        start = personalize(dispatched, k)
        if cfg.algorithm == "fedprox":
            return client_update_fedprox(start, train_sets[k], cfg, round_idx=r, client_id=k, temperature=T), None
        if cfg.algorithm == "scaffold":
            return client_update_scaffold(start, train_sets[k], cfg, ctl, k, round_idx=r, temperature=T)
        return client_update(start, train_sets[k], cfg, round_idx=r, client_id=k, temperature=T), None

    records: list[RoundRecord] = []
    n_threads = _threads()
    pool = ThreadPoolExecutor(max_workers=n_threads) if n_threads > 1 else None
    try:
        for r in range(1, cfg.rounds + 1):
            t0 = time.perf_counter()
            T = cfg.temperature_at(r)
            T_eval = cfg.eval_temperature or T
            selected = sample_clients(r, cfg)
            dispatched = global_model
            if pool is None:
                results = [work(k, dispatched, T, r) for k in selected]
            else:
                results = list(pool.map(lambda k: work(k, dispatched, T, r), selected))

            local_models = {k: m for k, (m, _) in zip(selected, results) if m is not None}
            if not local_models:
                raise RuntimeError(f"round {r}: no selected client had data")
            new_params = aggregate(
                [(local_models[k].params, sizes[k]) for k in sorted(local_models)],
                mode="fedbn" if bn_names else "fedavg",
                base=dispatched.params,
            )
            if ctl is not None:
                delta = None
                for k, (_, new_ci) in zip(selected, results):
                    if new_ci is None:
                        continue
                    diff = {n: new_ci[n] - ctl.client_c[k][n] for n in new_ci}
                    delta = diff if delta is None else {n: delta[n] + diff[n] for n in delta}
                    ctl.client_c[k] = new_ci
                if delta is not None:
                    for n in ctl.server_c:
                        ctl.server_c[n] = ctl.server_c[n] + delta[n] / cfg.total_clients
            if bn_names:
                for k in sorted(local_models):
                    bn_table[k] = {n: local_models[k].params[n].data.copy() for n in bn_names}
                # server-side copy used for test evaluation: mean of known client BN states
                states = [bn_table[k] for k in sorted(bn_table)]
                new_params.load_arrays({n: np.mean([s[n] for s in states], axis=0) for n in bn_names}, bn_names)

            new_global = Model(global_model.spec, new_params, global_model.layers)

            acc, loss = analysis.evaluate(new_global, test_ds, T_eval)
            nan = float("nan")
            ent_pre = ent_post = nan
            if cfg.track_entropy:
                ent_pre = float(
                    np.mean([analysis.output_entropy(local_models[k], test_ds, T_eval) for k in sorted(local_models)])
                )
                ent_post = analysis.output_entropy(new_global, test_ds, T_eval)
            d_part = d_nonpart = nan
            if cfg.track_aggregation_delta:
                d_part, d_nonpart = _aggregation_deltas(
                    cfg, local_models, dispatched, new_global, eval_sets, personalize
                )
            rec = RoundRecord(
                round=r,
                global_test_accuracy=acc,
                global_test_loss=loss,
                pre_post_acc_delta_participants=d_part,
                pre_post_acc_delta_nonparticipants=d_nonpart,
                entropy_pre_agg=ent_pre,
                entropy_post_agg=ent_post,
                wall_time_s=time.perf_counter() - t0,
            )
            records.append(rec)
            global_model = new_global
            log.debug("round %d T=%g acc=%.4f loss=%.4f", r, T, acc, loss)
            if callback is not None:
                callback(RoundState(r, T, selected, dispatched, local_models, new_global, rec))
    finally:
        if pool is not None:
            pool.shutdown()
    return records, global_model


def _aggregation_deltas(cfg, local_models, before, after, eval_sets, personalize):
    clients = []
    pre_models, post_models = [], []
    for k in range(cfg.total_clients):
        if eval_sets[k] is None:
            continue
        clients.append(k)
        pre_models.append(local_models[k] if k in local_models else personalize(before, k))
        post_models.append(personalize(after, k))
    if not clients:
        return float("nan"), float("nan")
    deltas = analysis.pre_post_aggregation_delta(
        clients, pre_models, post_models, [eval_sets[k] for k in clients], participants=set(local_models)
    )
    part = [d for k, d in deltas["participants"].items()]
    nonpart = [d for k, d in deltas["nonparticipants"].items()]
    return (
        float(np.mean(part)) if part else float("nan"),
        float(np.mean(nonpart)) if nonpart else float("nan"),
    )
