"""Fairness-constrained MAML training engine.

The inner loop runs gradient descent on a per-task Lagrangian (squared
error plus a multiplier on the prediction mean difference relative to a
relaxation c); the outer loop follows the meta-gradient of the query loss
with Adam. With the multiplier at zero everything collapses to vanilla
MAML, bit for bit. A pooled pretrain-and-finetune baseline and an
episode-level evaluator share the same pieces.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from . import metrics
from . import network as net
from .tasks import Batch, Episode, ScaleStats, Task, TaskSet, sample_episode


class TrainingAbortError(RuntimeError):
    """Raised when a non-finite value contaminates a run (never clipped)."""


@dataclass
class FairMamlConfig:
    """Hyperparameters of the trainer.

    ``lam`` is the fairness Lagrange multiplier (0 = vanilla MAML), ``c``
    the relaxation the prediction mean difference is pushed toward, both on
    the training (standardized) target scale. ``order`` picks exact
    second-order meta-gradients or the first-order approximation.
    """

    alpha: float = 0.01
    beta: float = 0.001
    q: int = 1
    lam: float = 1.0
    c: float = 0.1
    k_shots: int = 10
    meta_batch_size: int = 10
    iterations: int = 1000
    order: str = "second"
    constraint_mode: str = "always"
    loss_reduction: str = "mean"
    seed: int = 0
    include_protected_input: bool = True
    query_penalty: bool = False
    val_interval: int = 0

    def validate(self) -> None:
        if self.alpha <= 0 or self.beta <= 0:
            raise ValueError("alpha and beta must be > 0")
        if self.q < 1:
            raise ValueError("q must be >= 1")
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.c <= 0:
            raise ValueError("c must be > 0")
        if self.k_shots < 2:
            raise ValueError("k_shots must be >= 2")
        if self.meta_batch_size < 1 or self.iterations < 0:
            raise ValueError("meta_batch_size must be >= 1 and iterations >= 0")
        if self.order not in ("first", "second"):
            raise ValueError(f"order must be 'first' or 'second', got {self.order!r}")
        if self.constraint_mode not in ("always", "hinge"):
            raise ValueError(f"unknown constraint_mode {self.constraint_mode!r}")
        if self.loss_reduction not in ("mean", "sum"):
            raise ValueError(f"unknown loss_reduction {self.loss_reduction!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "FairMamlConfig":
        return cls(**d)


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, dim: int) -> "AdamState":
        return cls(np.zeros(dim), np.zeros(dim), 0)


def adam_update(
    flat: np.ndarray,
    grad: np.ndarray,
    state: AdamState,
    lr: float,
    b1: float = 0.9,
    b2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[np.ndarray, AdamState]:
    t = state.t + 1
    m = b1 * state.m + (1.0 - b1) * grad
    v = b2 * state.v + (1.0 - b2) * grad * grad
    m_hat = m / (1.0 - b1**t)
    v_hat = v / (1.0 - b2**t)
    return flat - lr * m_hat / (np.sqrt(v_hat) + eps), AdamState(m, v, t)


@dataclass
class TrainState:
    """Everything a run needs to continue: parameters, optimizer, rng."""

    phi: net.MLPParams
    adam: AdamState
    iteration: int
    rng: np.random.Generator


@dataclass
class IterationMetrics:
    """One row of the training metrics stream."""

    iteration: int
    train_loss: float
    train_md: float
    support_md: float
    val_loss: float | None = None
    val_md: float | None = None
    val_auc: float | None = None
    val_ir: float | None = None


# ---------------------------------------------------------------------------
# objectives


def lagrangian_graph(
    pn: net.ParamNodes,
    X: np.ndarray,
    y: np.ndarray,
    s: np.ndarray,
    lam: float,
    c: float,
    mode: str = "always",
    reduction: str = "mean",
) -> ad.Node:
    """Loss-plus-fairness objective node over one batch.

    ``always`` adds lam * (md - c) exactly; ``hinge`` adds
    lam * max(0, md - c), which stops pushing once the constraint holds.
    With ``lam == 0`` the penalty subgraph is not built at all.
    """
    pred = net.forward_graph(pn, X)
    loss = net.loss_from_predictions_graph(pred, y, reduction)
    if lam == 0.0:
        return loss
    if mode not in ("always", "hinge"):
        raise ValueError(f"unknown constraint_mode {mode!r}")
    gap = ad.sub(metrics.md_from_predictions_graph(pred, s), ad.constant(float(c)))
    if mode == "hinge":
        gap = ad.relu(gap)
    return ad.add(loss, ad.scale(gap, lam))


def lagrangian_objective(X, y, s, lam, c, mode="always", reduction="mean") -> net.Objective:
    return lambda pn: lagrangian_graph(pn, X, y, s, lam, c, mode, reduction)


def lagrangian(
    params: net.MLPParams,
    support: Batch,
    lam: float,
    c: float,
    mode: str = "always",
    reduction: str = "mean",
    include_protected_input: bool = True,
) -> float:
    """Value of the per-task constrained objective at ``params``."""
    X = support.model_inputs(include_protected_input)
    loss = net.batch_loss(params, X, support.y, reduction)
    if lam == 0.0:
        return loss
    if mode not in ("always", "hinge"):
        raise ValueError(f"unknown constraint_mode {mode!r}")
    gap = metrics.prediction_md(params, X, support.s) - c
    if mode == "hinge":
        gap = max(0.0, gap)
    return loss + lam * gap


# ---------------------------------------------------------------------------
# adaptation


def inner_adapt(
    phi: net.MLPParams,
    support: Batch,
    config: FairMamlConfig,
    record: bool | None = None,
) -> tuple[net.MLPParams, tuple[net.ParamNodes, net.ParamNodes] | None]:
    """q gradient-descent steps on the support Lagrangian from ``phi``.

    Returns the adapted parameters and, when ``record`` (default: exactly
    for second-order configs), the pair of (initial, adapted) graph nodes
    that lets the meta-gradient differentiate through the updates.
    """
    if record is None:
        record = config.order == "second"
    X = support.model_inputs(config.include_protected_input)
    y, s = support.y, support.s
    args = (config.lam, config.c, config.constraint_mode, config.loss_reduction)

    if record:
        pn0 = phi.as_nodes()
        pn = pn0
        phi_j = phi
        for step in range(config.q):
            gs = ad.backward(lagrangian_graph(pn, X, y, s, *args), pn)
            pn = net.ParamNodes(
                *(ad.sub(p, ad.scale(g, config.alpha)) for p, g in zip(pn, gs))
            )
            phi_j = pn.values()
            if not phi_j.all_finite():
                raise TrainingAbortError(
                    f"non-finite parameters after inner step {step + 1}"
                )
        return phi_j, (pn0, pn)

    cur = phi
    objective = lagrangian_objective(X, y, s, *args)
    for step in range(config.q):
        g = net.grad(objective, cur)
        cur = cur.with_flat(cur.flat() - config.alpha * g)
        if not cur.all_finite():
            raise TrainingAbortError(f"non-finite parameters after inner step {step + 1}")
    return cur, None


def meta_step(
    state: TrainState, episodes: list[Episode], config: FairMamlConfig
) -> tuple[TrainState, IterationMetrics]:
    """One outer update: adapt on each support set, follow the summed
    query-loss meta-gradient with Adam.

    Per the algorithm, only the query losses drive the meta-update; the
    fairness pressure enters through the inner Lagrangian (an optional
    ``query_penalty`` flag adds the constraint on the query side too).
    Episode gradients are accumulated in the given order, so results do
    not depend on any worker scheduling.
    """
    if not episodes:
        raise ValueError("meta_step needs a non-empty episode batch")
    meta_lam = config.lam if config.query_penalty else 0.0
    total = np.zeros(state.phi.dim)
    q_losses, q_mds, s_mds = [], [], []
    for ep in episodes:
        phi_j, tape = inner_adapt(state.phi, ep.support, config)
        Xq = ep.query.model_inputs(config.include_protected_input)
        if tape is not None:
            pn0, pn_j = tape
            meta_node = lagrangian_graph(
                pn_j, Xq, ep.query.y, ep.query.s, meta_lam, config.c,
                config.constraint_mode, config.loss_reduction,
            )
            g = np.concatenate([cot.value.ravel() for cot in ad.backward(meta_node, pn0)])
        else:
            objective = lagrangian_objective(
                Xq, ep.query.y, ep.query.s, meta_lam, config.c,
                config.constraint_mode, config.loss_reduction,
            )
            g = net.grad(objective, phi_j)
        if not np.isfinite(g).all():
            raise TrainingAbortError(f"non-finite meta-gradient on task {ep.task_id!r}")
        total += g
        q_losses.append(net.batch_loss(phi_j, Xq, ep.query.y, config.loss_reduction))
        q_mds.append(metrics.prediction_md(phi_j, Xq, ep.query.s))
        Xs = ep.support.model_inputs(config.include_protected_input)
        s_mds.append(metrics.prediction_md(phi_j, Xs, ep.support.s))
    flat, adam = adam_update(state.phi.flat(), total, state.adam, lr=config.beta)
    new_state = TrainState(state.phi.with_flat(flat), adam, state.iteration + 1, state.rng)
    row = IterationMetrics(
        iteration=state.iteration,
        train_loss=float(np.mean(q_losses)),
        train_md=float(np.mean(q_mds)),
        support_md=float(np.mean(s_mds)),
    )
    return new_state, row


# ---------------------------------------------------------------------------
# training loops


@dataclass
class TrainResult:
    phi: net.MLPParams
    history: list[IterationMetrics]
    state: TrainState
    net_config: net.NetConfig


def _net_config_for(taskset: TaskSet, config: FairMamlConfig) -> net.NetConfig:
    extra = 1 if config.include_protected_input else 0
    return net.NetConfig(input_dim=taskset.n_features + extra)


def _validation_row(phi, taskset, config, iteration) -> dict:
    rng = np.random.default_rng([config.seed, iteration, 0x5EED])
    result = evaluate(phi, taskset.val, config, stats=taskset.stats, adapt="inner", rng=rng)
    return {
        "val_loss": result.mean("loss"),
        "val_md": result.mean("md"),
        "val_auc": result.mean("auc"),
        "val_ir": result.mean("ir"),
    }


def train(taskset: TaskSet, config: FairMamlConfig, log_fn=None) -> TrainResult:
    """Meta-train on the training split; deterministic given the seed.

    Samples ``meta_batch_size`` tasks per iteration, one stratified episode
    each, and applies :func:`meta_step`. Validation metrics are recorded
    every ``val_interval`` iterations (0 disables) from a dedicated rng
    stream, so logging never perturbs the trajectory.
    """
    config.validate()
    if len(taskset.train) < config.meta_batch_size:
        raise ValueError(
            f"need >= {config.meta_batch_size} training tasks, got {len(taskset.train)}"
        )
    net_config = _net_config_for(taskset, config)
    rng = np.random.default_rng(config.seed)
    phi = net.init_params(net_config, rng)
    state = TrainState(phi, AdamState.zeros(net_config.dim), 0, rng)
    history: list[IterationMetrics] = []
    for it in range(config.iterations):
        idx = rng.choice(len(taskset.train), size=config.meta_batch_size, replace=False)
        episodes = [sample_episode(taskset.train[i], config.k_shots, rng) for i in idx]
        state, row = meta_step(state, episodes, config)
        if config.val_interval and (it + 1) % config.val_interval == 0 and taskset.val:
            for key, value in _validation_row(state.phi, taskset, config, it).items():
                setattr(row, key, value)
        history.append(row)
        if log_fn is not None:
            log_fn(row)
    return TrainResult(state.phi, history, state, net_config)


def pretrain_baseline(taskset: TaskSet, config: FairMamlConfig, log_fn=None) -> TrainResult:
    """Joint training on records pooled across all training tasks.

    No inner/outer split: plain Adam on mini-batches of the pooled data,
    optionally under the same Lagrangian (lam > 0 gives the fair variant).
    Mini-batches match the per-iteration record exposure of the meta loop.
    """
    config.validate()
    if not taskset.train:
        raise ValueError("no training tasks")
    net_config = _net_config_for(taskset, config)
    rng = np.random.default_rng(config.seed)
    phi = net.init_params(net_config, rng)
    adam = AdamState.zeros(net_config.dim)
    pool = Batch(
        np.concatenate([t.X for t in taskset.train], axis=0),
        np.concatenate([t.y for t in taskset.train]),
        np.concatenate([t.s for t in taskset.train]),
    )
    batch_size = min(3 * config.k_shots * config.meta_batch_size, len(pool))
    history: list[IterationMetrics] = []
    state = TrainState(phi, adam, 0, rng)
    for it in range(config.iterations):
        idx = rng.choice(len(pool), size=batch_size, replace=False)
        if config.lam > 0:
            for _ in range(100):
                if len(np.unique(pool.s[idx])) == 2:
                    break
                idx = rng.choice(len(pool), size=batch_size, replace=False)
            else:
                raise TrainingAbortError("could not draw a two-group mini-batch")
        batch = pool.take(idx)
        X = batch.model_inputs(config.include_protected_input)
        objective = lagrangian_objective(
            X, batch.y, batch.s, config.lam, config.c,
            config.constraint_mode, config.loss_reduction,
        )
        g = net.grad(objective, state.phi)
        if not np.isfinite(g).all():
            raise TrainingAbortError(f"non-finite gradient at iteration {it}")
        loss = net.batch_loss(state.phi, X, batch.y, config.loss_reduction)
        md = (
            metrics.prediction_md(state.phi, X, batch.s)
            if len(np.unique(batch.s)) == 2
            else 0.0
        )
        flat, adam = adam_update(state.phi.flat(), g, state.adam, lr=config.beta)
        state = TrainState(state.phi.with_flat(flat), adam, it + 1, rng)
        row = IterationMetrics(it, float(loss), float(md), float(md))
        if config.val_interval and (it + 1) % config.val_interval == 0 and taskset.val:
            for key, value in _validation_row(state.phi, taskset, config, it).items():
                setattr(row, key, value)
        history.append(row)
        if log_fn is not None:
            log_fn(row)
    return TrainResult(state.phi, history, state, net_config)


def finetune(
    phi: net.MLPParams,
    support: Batch,
    config: FairMamlConfig,
    step_sizes: tuple[float, ...] = (0.001, 0.01, 0.1),
    max_steps: int = 10,
) -> net.MLPParams:
    """Auto-tuned adaptation for the pretrained baseline.

    Tries every step size for up to ``max_steps`` descent steps on the
    support Lagrangian and returns the candidate with the lowest support
    loss among those meeting the fairness relaxation; if none does, the
    lowest Lagrangian wins. The unadapted ``phi`` is always a candidate.
    """
    X = support.model_inputs(config.include_protected_input)
    y, s = support.y, support.s
    args = (config.lam, config.c, config.constraint_mode, config.loss_reduction)

    def assess(p):
        loss = net.batch_loss(p, X, y, config.loss_reduction)
        md = metrics.prediction_md(p, X, s)
        gap = md - config.c
        if config.constraint_mode == "hinge":
            gap = max(0.0, gap)
        return loss, md, loss + config.lam * gap

    candidates = [(*assess(phi), phi)]
    objective = lagrangian_objective(X, y, s, *args)
    for alpha in step_sizes:
        cur = phi
        for _ in range(max_steps):
            cur = cur.with_flat(cur.flat() - alpha * net.grad(objective, cur))
            if not cur.all_finite():
                break
            candidates.append((*assess(cur), cur))

    feasible = [c for c in candidates if c[1] <= config.c and np.isfinite(c[0])]
    if feasible:
        return min(feasible, key=lambda c: c[0])[3]
    return min(candidates, key=lambda c: c[2])[3]


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalResult:
    """Across-task mean/std of the episode metrics on a task collection."""

    summary: dict[str, tuple[float, float]]
    n_tasks: int
    skipped_episodes: int
    skipped_ir: int

    def mean(self, name: str) -> float:
        return self.summary[name][0]

    def std(self, name: str) -> float:
        return self.summary[name][1]


def evaluate(
    phi: net.MLPParams,
    tasks: list[Task],
    config: FairMamlConfig,
    stats: ScaleStats | None = None,
    adapt: str = "inner",
    rng: np.random.Generator | None = None,
) -> EvalResult:
    """Adapt on each task's support set, score on its query set.

    ``adapt`` is "inner" (gradient steps, the MAML protocol), "finetune"
    (step-size grid, the baseline protocol) or "none". Query loss and mean
    difference are reported on the working scale and, via ``stats``, on
    the raw target scale; the impact ratio is the two-sided min(ir, 1/ir)
    on the raw scale (tasks whose unprotected mean is nonpositive are
    skipped and counted). Tasks too small for an episode are skipped too.
    """
    if not tasks:
        raise ValueError("evaluate needs at least one task")
    if adapt not in ("inner", "finetune", "none"):
        raise ValueError(f"unknown adapt mode {adapt!r}")
    rng = rng if rng is not None else np.random.default_rng([config.seed, 918273])
    per_task: dict[str, list[float]] = {
        "loss": [], "loss_raw": [], "md": [], "md_raw": [], "auc": [], "ir": []
    }
    skipped = skipped_ir = 0
    for task in tasks:
        try:
            ep = sample_episode(task, config.k_shots, rng)
        except ValueError:
            skipped += 1
            continue
        if adapt == "inner":
            adapted, _ = inner_adapt(phi, ep.support, config, record=False)
        elif adapt == "finetune":
            adapted = finetune(phi, ep.support, config)
        else:
            adapted = phi
        Xq = ep.query.model_inputs(config.include_protected_input)
        preds = net.predict(adapted, Xq)
        target_std = stats.target_std if stats is not None else 1.0
        loss = float(np.mean((preds - ep.query.y) ** 2))
        md = metrics.mean_difference(preds, ep.query.s)
        per_task["loss"].append(loss)
        per_task["loss_raw"].append(loss * target_std**2)
        per_task["md"].append(md)
        per_task["md_raw"].append(md * target_std)
        per_task["auc"].append(metrics.auc(preds, ep.query.s))
        preds_raw = stats.to_raw_y(preds) if stats is not None else preds
        try:
            per_task["ir"].append(metrics.parity_ir(preds_raw, ep.query.s))
        except ValueError:
            skipped_ir += 1
    if not per_task["loss"]:
        raise ValueError("every task was skipped during evaluation")
    summary = {
        name: (float(np.mean(vals)), float(np.std(vals))) if vals else (float("nan"), float("nan"))
        for name, vals in per_task.items()
    }
    return EvalResult(summary, len(per_task["loss"]), skipped, skipped_ir)


# ---------------------------------------------------------------------------
# checkpoints

CHECKPOINT_VERSION = 1


def save_checkpoint(
    path, state: TrainState, config: FairMamlConfig, net_config: net.NetConfig
) -> None:
    """Textual (JSON) dump of parameters, optimizer, rng and config.

    Floats serialize via repr, so the round trip is bit-exact.
    """
    payload = {
        "version": CHECKPOINT_VERSION,
        "config": asdict(config),
        "net": {"input_dim": net_config.input_dim, "hidden_sizes": list(net_config.hidden_sizes)},
        "phi": state.phi.flat().tolist(),
        "adam_m": state.adam.m.tolist(),
        "adam_v": state.adam.v.tolist(),
        "adam_t": state.adam.t,
        "iteration": state.iteration,
        "rng_state": state.rng.bit_generator.state,
    }
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(payload, fh, sort_keys=True, indent=1)
        fh.write("\n")


def load_checkpoint(path) -> tuple[TrainState, FairMamlConfig, net.NetConfig]:
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {payload.get('version')!r}")
    net_config = net.NetConfig(
        input_dim=int(payload["net"]["input_dim"]),
        hidden_sizes=tuple(payload["net"]["hidden_sizes"]),
    )
    config = FairMamlConfig.from_dict(payload["config"])
    phi = net.MLPParams.zeros(net_config).with_flat(np.asarray(payload["phi"]))
    adam = AdamState(
        np.asarray(payload["adam_m"], dtype=np.float64),
        np.asarray(payload["adam_v"], dtype=np.float64),
        int(payload["adam_t"]),
    )
    rng = np.random.default_rng()
    rng.bit_generator.state = payload["rng_state"]
    return TrainState(phi, adam, int(payload["iteration"]), rng), config, net_config
