"""Pairwise training with granularity-stacked phases.

The objective is a separated pairwise ranking loss: for every sampled
(user, positive, negative) triple, an independent -ln(sigmoid(margin))
term per selected layer and per active popularity granularity, plus L2
on the propagated embedding rows the batch touches.  Training proceeds
in phases that introduce granularities coarse-to-fine; each phase adds
the new granularity's terms while all previously activated tables keep
training, so the final-phase objective equals the joint loss over all
granularities.

Gradients are analytic: per-row contributions at the selected layers
are pulled back to the base tables by repeated multiplication with the
transposed propagation matrix (required: the matrix is asymmetric for
granularity > 0).  Propagation is full-graph and recomputed every step
from the current parameters; the loss itself is mini-batch.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import scipy.sparse as sp
from scipy.special import expit

from .data import InteractionDataset
from .graph import build_adjacency, build_normalized_adjacency, transpose, spmm
from .layers import SelectedLayers
from .model import ModelParameters, PropagationOutput, propagate, save_checkpoint

__all__ = [
    "OptimizerState",
    "PhaseSchedule",
    "TrainConfig",
    "TrainingDivergedError",
    "TripleBatch",
    "TripleSampler",
    "backward",
    "init_optimizer_state",
    "optimizer_step",
    "sample_batch",
    "separated_bpr_loss",
    "train",
]

logger = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    """Raised when the loss or a gradient stops being finite."""


class TripleBatch(NamedTuple):
    """Arrays of (user, positive item, negative item) training triples."""

    users: np.ndarray
    pos_items: np.ndarray
    neg_items: np.ndarray

    def __len__(self):
        return len(self.users)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    l2_coeff: float = 1e-4
    batch_size: int = 2048
    epochs_per_phase: int = 300
    optimizer: str = "adam"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    # regularize full propagated matrices instead of the batch rows
    full_matrix_reg: bool = False

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.l2_coeff < 0:
            raise ValueError("l2_coeff must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


@dataclass(frozen=True)
class PhaseSchedule:
    """Phase p (1-based) newly activates granularity max_granularity - p + 1.

    Earlier phases' granularities stay active: phase 1 trains only the
    coarsest granularity and the last phase trains all of them.
    """

    max_granularity: int
    epochs_per_phase: tuple[int, ...]

    def __post_init__(self):
        if len(self.epochs_per_phase) != self.num_phases:
            raise ValueError(
                f"expected {self.num_phases} per-phase epoch budgets, "
                f"got {len(self.epochs_per_phase)}"
            )
        if any(e < 0 for e in self.epochs_per_phase):
            raise ValueError("epoch budgets must be >= 0")

    @property
    def num_phases(self) -> int:
        return self.max_granularity + 1

    @staticmethod
    def uniform(max_granularity, epochs_per_phase) -> "PhaseSchedule":
        return PhaseSchedule(
            max_granularity=max_granularity,
            epochs_per_phase=(epochs_per_phase,) * (max_granularity + 1),
        )

    def new_granularity(self, phase: int) -> int:
        if not 1 <= phase <= self.num_phases:
            raise ValueError(f"phase {phase} outside [1, {self.num_phases}]")
        return self.max_granularity - phase + 1

    def active_granularities(self, phase: int) -> frozenset[int]:
        return frozenset(range(self.new_granularity(phase), self.max_granularity + 1))


class TripleSampler:
    """Uniform triple sampler over users with at least one training item.

    Positives are uniform over the user's items; negatives are uniform
    over all items with rejection resampling of interacted ones.  Users
    interacting with every item cannot yield a negative and are skipped
    (logged once).
    """

    def __init__(self, ds: InteractionDataset):
        lengths = np.array([len(items) for items in ds.train], dtype=np.int64)
        nonempty = lengths > 0
        full = lengths >= ds.num_items
        self._skipped_full = int(np.count_nonzero(nonempty & full))
        self.pool = np.flatnonzero(nonempty & ~full)
        if self.pool.size == 0:
            raise ValueError("no user has a training item and a possible negative")
        self.num_items = ds.num_items
        self.lengths = lengths
        self.offsets = np.concatenate(([0], np.cumsum(lengths)))
        self.flat_items = (
            np.concatenate(ds.train)
            if ds.num_train_interactions
            else np.empty(0, np.int64)
        )
        rows = np.repeat(np.arange(ds.num_users), lengths)
        self._members = sp.csr_matrix(
            (np.ones(len(rows), dtype=np.int8), (rows, self.flat_items)),
            shape=(ds.num_users, ds.num_items),
        )
        self._warned = False

    def _interacted(self, users, items) -> np.ndarray:
        return np.asarray(self._members[users, items]).ravel() > 0

    def sample(self, batch_size, rng) -> TripleBatch:
        if self._skipped_full and not self._warned:
            logger.warning(
                "%d user(s) interact with every item and are skipped during sampling",
                self._skipped_full,
            )
            self._warned = True
        users = self.pool[rng.integers(0, self.pool.size, size=batch_size)]
        pos = self.flat_items[self.offsets[users] + rng.integers(0, self.lengths[users])]
        neg = rng.integers(0, self.num_items, size=batch_size)
        bad = self._interacted(users, neg)
        while bad.any():
            neg[bad] = rng.integers(0, self.num_items, size=int(bad.sum()))
            bad[bad] = self._interacted(users[bad], neg[bad])
        return TripleBatch(users=users, pos_items=pos, neg_items=neg)


def sample_batch(ds: InteractionDataset, batch_size, rng) -> TripleBatch:
    """One-off convenience wrapper around :class:`TripleSampler`."""
    return TripleSampler(ds).sample(batch_size, rng)


def _check_active(out, active_granularities):
    active = sorted(set(active_granularities))
    if not active:
        raise ValueError("active_granularities must be nonempty")
    if active[0] < 0 or active[-1] >= out.num_granularities:
        raise ValueError(
            f"active granularities {active} outside [0, {out.num_granularities - 1}]"
        )
    return active


def separated_bpr_loss(
    out: PropagationOutput,
    batch: TripleBatch,
    active_granularities,
    l2_coeff,
    full_matrix_reg=False,
) -> float:
    """Batch loss: sum over triples, active granularities, and the two
    selected layers of -ln(sigmoid(pos margin)), plus the L2 term.

    The margin is <e_u, e_i> - <e_u, e_j> at one layer and granularity.
    By default L2 covers the propagated rows of the batch's users and
    items at the selected layers, scaled by 1/batch; with
    ``full_matrix_reg`` it is the squared Frobenius norm of the whole
    selected-layer matrices.
    """
    active = _check_active(out, active_granularities)
    users = batch.users
    pos_rows = out.num_users + batch.pos_items
    neg_rows = out.num_users + batch.neg_items
    total = 0.0
    reg = 0.0
    for k in active:
        for l in (out.layers.l_odd, out.layers.l_even):
            emb = out.layer(k, l)
            e_u, e_i, e_j = emb[users], emb[pos_rows], emb[neg_rows]
            margin = np.einsum("bd,bd->b", e_u, e_i) - np.einsum("bd,bd->b", e_u, e_j)
            total += float(np.logaddexp(0.0, -margin).sum())
            if full_matrix_reg:
                reg += float((emb * emb).sum())
            else:
                reg += float((e_u * e_u).sum() + (e_i * e_i).sum() + (e_j * e_j).sum())
    if not full_matrix_reg:
        reg /= len(batch)
    return total + l2_coeff * reg


def backward(
    out: PropagationOutput,
    batch: TripleBatch,
    active_granularities,
    l2_coeff,
    full_matrix_reg=False,
    transposed=None,
):
    """Analytic gradients of :func:`separated_bpr_loss` w.r.t. the base tables.

    Per selected layer, each triple adds sigmoid(-margin)-weighted
    partner rows (and the L2 term's 2*lambda rows); the per-layer
    gradients are pulled back to layer 0 with the transposed propagation
    matrix.  Returns one gradient per base table; tables of inactive
    granularities get exact zeros.
    """
    active = _check_active(out, active_granularities)
    if transposed is None:
        transposed = {k: transpose(out.matrices[k]) for k in active}
    users = batch.users
    pos_rows = out.num_users + batch.pos_items
    neg_rows = out.num_users + batch.neg_items
    depth = out.depth
    selected = (out.layers.l_odd, out.layers.l_even)
    num_tables = 1 if out.shared_base else out.num_granularities
    shape = out.layer(active[0], selected[0]).shape
    grads = [np.zeros(shape) for _ in range(num_tables)]
    for k in active:
        inject = {}
        for l in selected:
            emb = out.layer(k, l)
            e_u, e_i, e_j = emb[users], emb[pos_rows], emb[neg_rows]
            margin = np.einsum("bd,bd->b", e_u, e_i) - np.einsum("bd,bd->b", e_u, e_j)
            weight = expit(-margin)[:, None]
            grad = np.zeros(shape)
            np.add.at(grad, users, -weight * (e_i - e_j))
            np.add.at(grad, pos_rows, -weight * e_u)
            np.add.at(grad, neg_rows, weight * e_u)
            if full_matrix_reg:
                grad += (2.0 * l2_coeff) * emb
            else:
                scale = 2.0 * l2_coeff / len(batch)
                np.add.at(grad, users, scale * e_u)
                np.add.at(grad, pos_rows, scale * e_i)
                np.add.at(grad, neg_rows, scale * e_j)
            inject[l] = grad
        pulled = inject[depth] if depth in inject else np.zeros(shape)
        for l in range(depth, 0, -1):
            pulled = spmm(transposed[k], pulled)
            if l - 1 in inject:
                pulled = pulled + inject[l - 1]
        grads[0 if out.shared_base else k] += pulled
    return grads


@dataclass(eq=False)
class OptimizerState:
    step: int
    first_moment: list[np.ndarray]
    second_moment: list[np.ndarray]


def init_optimizer_state(params: ModelParameters) -> OptimizerState:
    return OptimizerState(
        step=0,
        first_moment=[np.zeros_like(t) for t in params.base_embeddings],
        second_moment=[np.zeros_like(t) for t in params.base_embeddings],
    )


def optimizer_step(params: ModelParameters, grads, state: OptimizerState, cfg: TrainConfig):
    """In-place parameter update (adaptive-moment by default, or plain SGD)."""
    for idx, grad in enumerate(grads):
        if not np.all(np.isfinite(grad)):
            bad = int(np.count_nonzero(~np.isfinite(grad)))
            raise TrainingDivergedError(
                f"non-finite gradient for table {idx} ({bad} bad entries) "
                f"at optimizer step {state.step + 1}"
            )
    state.step += 1
    if cfg.optimizer == "sgd":
        for table, grad in zip(params.base_embeddings, grads):
            table -= cfg.learning_rate * grad
        return
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    bias1 = 1.0 - b1 ** state.step
    bias2 = 1.0 - b2 ** state.step
    for table, grad, m, v in zip(
        params.base_embeddings, grads, state.first_moment, state.second_moment
    ):
        m *= b1
        m += (1.0 - b1) * grad
        v *= b2
        v += (1.0 - b2) * grad * grad
        table -= cfg.learning_rate * (m / bias1) / (np.sqrt(v / bias2) + cfg.adam_eps)


def _propagation_matrices(ds, params):
    adjacency = build_adjacency(ds)
    return [
        build_normalized_adjacency(adjacency, k, params.popularity)
        for k in range(params.popularity.num_granularities)
    ]


def train(
    ds: InteractionDataset,
    params: ModelParameters,
    schedule: PhaseSchedule,
    cfg: TrainConfig,
    layers: SelectedLayers,
    *,
    matrices=None,
    eval_ds=None,
    eval_every=0,
    eval_topk=20,
    metrics_path=None,
    checkpoint_dir=None,
):
    """Run the full multistage schedule; returns (params, epoch records).

    Each epoch runs ceil(train interactions / batch) steps.  Per epoch a
    record {phase, epoch, loss, wallclock_s} is kept (plus recall/ndcg
    against ``eval_ds`` every ``eval_every`` epochs) and appended to
    ``metrics_path`` as JSON lines.  A checkpoint is written per phase
    boundary plus a final one; on divergence the last written
    checkpoints are left in place.
    """
    from . import evaluation

    if schedule.max_granularity != params.popularity.max_granularity:
        raise ValueError("schedule and parameters disagree on max granularity")
    if matrices is None:
        matrices = _propagation_matrices(ds, params)
    transposed = {k: transpose(mat) for k, mat in enumerate(matrices)}
    sampler = TripleSampler(ds)
    rng = np.random.default_rng(cfg.seed)
    state = init_optimizer_state(params)
    steps_per_epoch = max(1, math.ceil(ds.num_train_interactions / cfg.batch_size))
    records = []
    sink = open(metrics_path, "w", encoding="ascii") if metrics_path else None
    global_epoch = 0
    try:
        for phase in range(1, schedule.num_phases + 1):
            active = schedule.active_granularities(phase)
            for _ in range(schedule.epochs_per_phase[phase - 1]):
                global_epoch += 1
                started = time.perf_counter()
                loss_sum = 0.0
                for _ in range(steps_per_epoch):
                    batch = sampler.sample(cfg.batch_size, rng)
                    out = propagate(params, matrices, layers, granularities=active)
                    loss = separated_bpr_loss(
                        out, batch, active, cfg.l2_coeff, cfg.full_matrix_reg
                    )
                    if not math.isfinite(loss):
                        raise TrainingDivergedError(
                            f"non-finite loss at phase {phase}, epoch {global_epoch}"
                        )
                    grads = backward(
                        out, batch, active, cfg.l2_coeff, cfg.full_matrix_reg, transposed
                    )
                    optimizer_step(params, grads, state, cfg)
                    loss_sum += loss
                record = {
                    "phase": phase,
                    "epoch": global_epoch,
                    "loss": loss_sum / (steps_per_epoch * cfg.batch_size),
                }
                if eval_ds is not None and eval_every and global_epoch % eval_every == 0:
                    out = propagate(params, matrices, layers, retain_chain=False)
                    report = evaluation.evaluate(params, out, eval_ds, eval_topk)
                    record[f"recall@{eval_topk}"] = report.recall
                    record[f"ndcg@{eval_topk}"] = report.ndcg
                record["wallclock_s"] = time.perf_counter() - started
                records.append(record)
                if sink:
                    sink.write(json.dumps(record) + "\n")
                    sink.flush()
            if checkpoint_dir is not None:
                save_checkpoint(
                    f"{checkpoint_dir}/checkpoint_phase{phase}.ckpt",
                    params,
                    layers,
                    phase,
                    global_epoch,
                )
        if checkpoint_dir is not None:
            save_checkpoint(
                f"{checkpoint_dir}/checkpoint_final.ckpt",
                params,
                layers,
                schedule.num_phases,
                global_epoch,
            )
    finally:
        if sink:
            sink.close()
    return params, records
