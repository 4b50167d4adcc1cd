"""Episodic training loop: domain split, inner update, meta losses, outer updates.

Each iteration splits the source domains into meta-train and meta-test,
takes one plain gradient step on the task loss (the inner update, kept
differentiable), evaluates the meta objective at the updated parameters,
and then updates the original parameters with the combined gradient. The
metric net gets its own update from the local loss only.

Two RNG streams are kept per run: one for data (batch sampling) and one for
algorithmic choices (domain split, pair shuffling). Ablation flags never
touch the data stream, so all ablation rows of one seed see identical data.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import losses, nets
from .autodiff import Expr, GradMap
from .nets import ParamSet

log = logging.getLogger(__name__)

CONTRASTIVE = "contrastive"
TRIPLET = "triplet"


class NonFiniteLossError(RuntimeError):
    """A loss went NaN/Inf; the iteration is aborted with diagnostics."""


@dataclass
class Hyperparams:
    """Training hyperparameters with literature defaults."""

    alpha: float = 1e-5            # inner lr
    eta: float = 1e-3              # outer lr for (psi, theta)
    gamma: float = 1e-5            # metric-net lr
    beta1: float = 1.0             # global-loss weight
    beta2: float = 0.005           # local-loss weight
    tau: float = 2.0               # soft-label temperature
    xi: float = 1.0                # metric margin
    clip_threshold: float = 2.0
    decay_rate: float = 0.02
    decay_every: int = 1000
    batch_size: int = 128          # per source domain
    n_meta_train: int = 2
    n_meta_test: int = 1
    local_loss_kind: str = TRIPLET
    max_iterations: int = 1000
    episodic: bool = True
    use_global: bool = True
    use_local: bool = True
    clip_outer: bool = True
    outer_optimizer: str = "sgd"   # reserved for a later adaptive variant
    outer_task_domains: str = "meta_train"  # or "all"

    def validate(self, num_classes: int | None = None) -> None:
        if min(self.alpha, self.eta, self.gamma) <= 0:
            raise ValueError("learning rates must be positive")
        if self.beta1 < 0 or self.beta2 < 0:
            raise ValueError("meta-loss weights must be non-negative")
        if self.local_loss_kind not in (CONTRASTIVE, TRIPLET):
            raise ValueError(f"unknown local loss {self.local_loss_kind!r}")
        if num_classes is not None and self.batch_size < 2 * num_classes:
            raise ValueError("batch_size must be at least 2 * num_classes")


@dataclass
class EpisodeState:
    """Everything the optimizer carries between iterations."""

    psi: ParamSet
    theta: ParamSet
    phi: ParamSet
    hp: Hyperparams
    t: int = 0
    data_rng: np.random.Generator = field(
        default_factory=lambda: np.random.default_rng(0))
    algo_rng: np.random.Generator = field(
        default_factory=lambda: np.random.default_rng(0))


def make_state(arch: nets.Architecture, hp: Hyperparams, seed: int) -> EpisodeState:
    hp.validate(arch.num_classes)
    psi, theta, phi = nets.init_params(arch, seed)
    seqs = np.random.SeedSequence(seed).spawn(2)
    return EpisodeState(psi, theta, phi, hp,
                        data_rng=np.random.default_rng(seqs[0]),
                        algo_rng=np.random.default_rng(seqs[1]))


@dataclass
class MetricsRecord:
    iteration: int
    task_loss: float
    global_loss: float
    local_loss: float
    outer_lr: float
    inner_grad_norm: float
    outer_grad_norm: float

    FIELDS = ("iteration", "task_loss", "global_loss", "local_loss",
              "outer_lr", "inner_grad_norm", "outer_grad_norm")

    def row(self) -> list:
        return [getattr(self, f) for f in self.FIELDS]


def split_domains(domain_ids, n_tr: int, n_te: int,
                  rng: np.random.Generator) -> tuple[list, list]:
    """Uniformly random disjoint partition into meta-train and meta-test."""
    ids = list(domain_ids)
    if len(ids) < 2:
        raise ValueError("episodic training needs at least 2 source domains")
    if n_tr < 1 or n_te < 1 or n_tr + n_te != len(ids):
        raise ValueError("split sizes must be positive and cover all domains")
    perm = rng.permutation(len(ids))
    return [ids[i] for i in perm[:n_tr]], [ids[i] for i in perm[n_tr:]]


def decayed_lr(eta0: float, t: int, decay_rate: float, decay_every: int) -> float:
    """Step-wise exponential decay: eta0 * (1 - rate)^(t // every)."""
    return eta0 * (1.0 - decay_rate) ** (t // decay_every)


def _check_finite(value: float, name: str) -> float:
    if not np.isfinite(value):
        raise NonFiniteLossError(f"{name} is non-finite: {value}")
    return value


def _mean_task_loss(psi: ParamSet, theta: ParamSet, batches) -> Expr:
    terms = []
    for x, labels in batches:
        logits = nets.task_forward(theta, nets.feature_forward(psi, ad.as_expr(x)))
        terms.append(losses.task_loss(logits, labels))
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return ad.mul(ad.const(1.0 / len(terms)), total)


def _apply_inner(psi: ParamSet, theta: ParamSet, loss: Expr, alpha: float,
                 clip_threshold: float) -> tuple[ParamSet, ParamSet, float]:
    params = psi.tensors + theta.tensors
    grads = ad.grad(loss, params)
    norm = float(ad.global_norm(grads).value)
    grads = ad.clip_by_norm(grads, clip_threshold)
    n_psi = len(psi.tensors)
    psi2 = nets.sgd_step(psi, GradMap(params[:n_psi], grads.grads[:n_psi]), alpha)
    theta2 = nets.sgd_step(theta, GradMap(params[n_psi:], grads.grads[n_psi:]), alpha)
    return psi2, theta2, norm


def inner_update(psi: ParamSet, theta: ParamSet, meta_train_batches,
                 alpha: float, clip_threshold: float) -> tuple[ParamSet, ParamSet]:
    """One plain gradient-descent step on the meta-train task loss.

    The returned parameter sets stay differentiable with respect to the
    originals, which is what enables second-order meta-gradients.
    """
    loss = _mean_task_loss(psi, theta, meta_train_batches)
    _check_finite(float(loss.value), "inner task loss")
    psi2, theta2, _ = _apply_inner(psi, theta, loss, alpha, clip_threshold)
    return psi2, theta2


def _local_loss(psi2: ParamSet, phi: ParamSet, batches, hp: Hyperparams,
                rng: np.random.Generator) -> Expr:
    x = np.concatenate([b[0] for b in batches])
    labels = np.concatenate([b[1] for b in batches])
    z = nets.feature_forward(psi2, ad.as_expr(x))
    e = nets.metric_forward(phi, z)
    if hp.local_loss_kind == CONTRASTIVE:
        return losses.contrastive_loss(e, labels, hp.xi, rng)
    return losses.triplet_loss_semihard(e, labels, hp.xi)


def meta_step(state: EpisodeState, batches: dict) -> tuple[EpisodeState, MetricsRecord]:
    """One full episode. ``batches`` maps domain id -> (features, labels).

    The domain split is always drawn (even when episodic training is off) so
    the algorithmic RNG stream advances identically across ablation rows.
    """
    hp = state.hp
    ids = sorted(batches)
    d_tr, d_te = split_domains(ids, hp.n_meta_train, hp.n_meta_test,
                               state.algo_rng)
    num_classes = state.theta["w0"].shape[1]

    if hp.episodic:
        task_batches = [batches[k] for k in d_tr]
    else:
        task_batches = [batches[k] for k in ids]
    l_task = _mean_task_loss(state.psi, state.theta, task_batches)
    _check_finite(float(l_task.value), "task loss")

    inner_norm = 0.0
    if hp.episodic:
        psi2, theta2, inner_norm = _apply_inner(
            state.psi, state.theta, l_task, hp.alpha, hp.clip_threshold)
    else:
        psi2, theta2 = state.psi, state.theta

    l_global = None
    if hp.use_global and hp.beta1 > 0:
        if hp.episodic:
            l_global = losses.global_alignment_loss(
                [batches[k] for k in d_tr], [batches[k] for k in d_te],
                psi2, theta2, hp.tau, num_classes)
        else:
            # no split: align over all unordered domain pairs
            terms = []
            for i in range(len(ids)):
                for j in range(i + 1, len(ids)):
                    terms.append(losses.global_alignment_loss(
                        [batches[ids[i]]], [batches[ids[j]]],
                        psi2, theta2, hp.tau, num_classes))
            total = terms[0]
            for t in terms[1:]:
                total = ad.add(total, t)
            l_global = ad.mul(ad.const(1.0 / len(terms)), total)
        _check_finite(float(l_global.value), "global alignment loss")

    l_local = None
    if hp.use_local and hp.beta2 > 0:
        l_local = _local_loss(psi2, state.phi, [batches[k] for k in ids],
                              hp, state.algo_rng)
        _check_finite(float(l_local.value), "local clustering loss")

    outer_obj = l_task
    if l_global is not None:
        outer_obj = ad.add(outer_obj, ad.mul(ad.const(hp.beta1), l_global))
    if l_local is not None:
        outer_obj = ad.add(outer_obj, ad.mul(ad.const(hp.beta2), l_local))
    _check_finite(float(outer_obj.value), "meta objective")

    params = state.psi.tensors + state.theta.tensors
    grads = ad.grad(outer_obj, params)
    outer_norm = float(ad.global_norm(grads).value)
    if hp.clip_outer:
        grads = ad.clip_by_norm(grads, hp.clip_threshold)
    eta_t = decayed_lr(hp.eta, state.t, hp.decay_rate, hp.decay_every)

    def stepped(pset: ParamSet, offset: int) -> ParamSet:
        new = []
        for i, tensor in enumerate(pset.tensors):
            g = grads.grads[offset + i].value
            new.append(ad.leaf(tensor.value - eta_t * g))
        return pset.replace(new)

    new_psi = stepped(state.psi, 0)
    new_theta = stepped(state.theta, len(state.psi.tensors))

    new_phi = state.phi
    if l_local is not None:
        phi_grads = ad.grad(l_local, state.phi.tensors)
        new_phi = state.phi.replace(
            [ad.leaf(t.value - hp.gamma * g.value)
             for t, g in zip(state.phi.tensors, phi_grads.grads)])

    record = MetricsRecord(
        iteration=state.t,
        task_loss=float(l_task.value),
        global_loss=float(l_global.value) if l_global is not None else 0.0,
        local_loss=float(l_local.value) if l_local is not None else 0.0,
        outer_lr=eta_t,
        inner_grad_norm=inner_norm,
        outer_grad_norm=outer_norm,
    )
    new_state = replace(state, psi=new_psi, theta=new_theta, phi=new_phi,
                        t=state.t + 1)
    return new_state, record


def draw_batches(datasets: dict, batch_size: int,
                 rng: np.random.Generator) -> dict:
    """One stratified batch per domain, in sorted domain-id order."""
    from . import bench

    out = {}
    for k in sorted(datasets):
        batch = bench.sample_batch(datasets[k], batch_size, True, rng)
        out[k] = (batch.features, batch.labels)
    return out


def train(state: EpisodeState, datasets: dict, iterations: int,
          metrics_sink=None) -> EpisodeState:
    """Run ``iterations`` meta steps, emitting one MetricsRecord per step.

    ``metrics_sink`` is a callable taking MetricsRecord (or None).
    On a non-finite loss the run aborts after flushing partial metrics.
    """
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    for _ in range(iterations):
        batches = draw_batches(datasets, state.hp.batch_size, state.data_rng)
        state, record = meta_step(state, batches)
        if metrics_sink is not None:
            metrics_sink(record)
    return state
