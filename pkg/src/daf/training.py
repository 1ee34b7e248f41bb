"""Losses and the alternating adversarial training loop.

One step samples a batch from each domain, updates the generators by
descending the joint loss (sequence errors minus lambda times the domain
classification loss), then re-embeds the batch without generator gradients
and updates the discriminator by ascending the same objective.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .data import DatasetSplit
from .errors import ConfigurationError, ContractError, ShapeMismatchError
from .model import (
    ModelConfig,
    WindowBatch,
    discriminate,
    discriminator_param_names,
    generator_forward,
    generator_param_names,
    build_models,
)
from .numerics import Adam, ParamStore, Tensor, backward, concat, constant, no_grad
from .seeding import rng_for

PROB_EPS = 1e-7
MAX_ITERATIONS = 100_000


@dataclass(frozen=True)
class TrainConfig:
    lam: float = 1.0
    lr: float = 1e-3
    epochs: int = 100
    batch_size: int = 64
    patience: int = 10
    eval_every: int | None = None  # None: once per epoch
    strategy: str = "full"
    adversarial: bool = True
    seed: int = 0
    max_steps: int = MAX_ITERATIONS

    def __post_init__(self):
        if self.lam < 0:
            raise ConfigurationError("lambda must be >= 0")
        if self.batch_size < 1 or self.patience < 1 or self.epochs < 1:
            raise ConfigurationError("batch_size, patience and epochs must be >= 1")
        if self.eval_every is not None and self.eval_every < 1:
            raise ConfigurationError("eval_every must be >= 1")

    @property
    def effective_lam(self) -> float:
        return self.lam if self.adversarial else 0.0


def loss_seq(
    xhat: Tensor, yhat: Tensor, x_true: np.ndarray, y_true: np.ndarray
) -> Tensor:
    """Batch mean of (reconstruction MSE over T) + (forecast MSE over tau),
    in scaled space."""
    if xhat.shape != x_true.shape or yhat.shape != y_true.shape:
        raise ShapeMismatchError(
            f"outputs {xhat.shape}/{yhat.shape} vs targets {x_true.shape}/{y_true.shape}"
        )
    n_batch, t_len = xhat.shape
    tau = yhat.shape[1]
    recon = (xhat - constant(x_true)).square().sum() * (1.0 / (n_batch * t_len))
    fut = (yhat - constant(y_true)).square().sum() * (1.0 / (n_batch * tau))
    return recon + fut


def loss_dom(h_src: Tensor, h_tgt: Tensor, store: ParamStore) -> Tensor:
    """Binary cross-entropy of the discriminator over both feature sets.

    Source vectors carry label 1, target vectors label 0; probabilities are
    clamped to [1e-7, 1-1e-7] before the logs.
    """
    if h_src.size == 0 or h_tgt.size == 0:
        raise ContractError("both feature sets must be nonempty")
    p_src = discriminate(h_src, store).clamp(PROB_EPS, 1.0 - PROB_EPS)
    p_tgt = discriminate(h_tgt, store).clamp(PROB_EPS, 1.0 - PROB_EPS)
    return -(p_src.log().mean()) - ((1.0 - p_tgt).log().mean())


def total_loss(seq_s: Tensor | None, seq_t: Tensor, dom: Tensor | None, lam: float) -> Tensor:
    """L = L_seq(source) + L_seq(target) - lambda * L_dom."""
    if lam < 0:
        raise ContractError("lambda must be >= 0")
    out = seq_t if seq_s is None else seq_s + seq_t
    if dom is not None and lam != 0.0:
        out = out - lam * dom
    return out


def _qk_features(out) -> Tensor:
    return concat([out.q, out.k], axis=2)


@dataclass
class Optimizers:
    gen: Adam
    disc: Adam | None


def make_optimizers(store: ParamStore, cfg: TrainConfig) -> Optimizers:
    gen = Adam({n: store[n] for n in generator_param_names(store)}, lr=cfg.lr)
    disc_names = discriminator_param_names(store)
    disc = Adam({n: store[n] for n in disc_names}, lr=cfg.lr) if disc_names else None
    return Optimizers(gen=gen, disc=disc)


def train_step(
    batch_s: WindowBatch | None,
    batch_t: WindowBatch,
    store: ParamStore,
    opts: Optimizers,
    model_cfg: ModelConfig,
    cfg: TrainConfig,
) -> dict[str, float]:
    """One alternating update; returns the step's loss components."""
    strategy = cfg.strategy
    adversarial = cfg.effective_lam > 0 and strategy != "attf"
    if strategy != "attf" and batch_s is None:
        raise ContractError("source batch required unless strategy is attf")

    store.zero_grad()
    need_emb = adversarial
    out_t = generator_forward(batch_t, store, model_cfg, strategy, "tgt", need_embeddings=need_emb)
    seq_t = loss_seq(out_t.xhat, out_t.yhat, batch_t.x, batch_t.y)
    seq_s = None
    dom = None
    if strategy != "attf":
        out_s = generator_forward(
            batch_s, store, model_cfg, strategy, "src", need_embeddings=need_emb
        )
        seq_s = loss_seq(out_s.xhat, out_s.yhat, batch_s.x, batch_s.y)
        if adversarial:
            dom = loss_dom(_qk_features(out_s), _qk_features(out_t), store)
    total = total_loss(seq_s, seq_t, dom, cfg.effective_lam)
    backward(total)
    opts.gen.step("descend")
    store.zero_grad()  # drop discriminator grads from the generator phase

    dom_d = None
    if adversarial:
        if opts.disc is None:
            raise ContractError("adversarial training requires a discriminator optimizer")
        with no_grad():
            emb_s = generator_forward(
                batch_s, store, model_cfg, strategy, "src", forecast_only=True
            )
            emb_t = generator_forward(
                batch_t, store, model_cfg, strategy, "tgt", forecast_only=True
            )
            hs = _qk_features(emb_s).data.copy()
            ht = _qk_features(emb_t).data.copy()
        dom_d = loss_dom(constant(hs), constant(ht), store)
        # ascend L = descend lambda * L_dom; keep the lambda factor so the
        # update is literally the ascent direction of the joint objective
        backward(dom_d * (-cfg.effective_lam))
        opts.disc.step("ascend")
        store.zero_grad()

    return {
        "seq_S": 0.0 if seq_s is None else seq_s.item(),
        "seq_T": seq_t.item(),
        "dom": dom_d.item() if dom_d is not None else (dom.item() if dom is not None else 0.0),
    }


@dataclass
class TrainResult:
    params: ParamStore
    history: list[dict]
    best_val_nd: float
    best_step: int
    steps_run: int


def fit(
    source: DatasetSplit | None,
    target: DatasetSplit,
    model_cfg: ModelConfig,
    cfg: TrainConfig,
    init_store: ParamStore | None = None,
) -> TrainResult:
    """Train until the epoch budget, the iteration cap, or early stopping.

    One epoch sweeps the target training set without replacement (source
    batches are drawn with replacement). Every `eval_every` steps the target
    validation ND is computed; the best checkpoint is kept and training stops
    after `patience` evaluations without improvement.
    """
    from .evaluation import evaluate_nd  # local import to avoid a cycle

    if not target.train or not target.validation:
        raise ConfigurationError("target train and validation splits must be nonempty")
    if cfg.strategy != "attf" and (source is None or not source.train):
        raise ConfigurationError(f"strategy {cfg.strategy!r} needs a nonempty source train split")

    store = (
        init_store
        if init_store is not None
        else build_models(model_cfg, cfg.strategy, cfg.seed)
    )
    opts = make_optimizers(store, cfg)
    shuffle = rng_for(cfg.seed, "shuffle")

    target_train = target.train
    n_target = len(target_train)
    steps_per_epoch = math.ceil(n_target / cfg.batch_size)
    eval_every = cfg.eval_every or steps_per_epoch
    max_steps = min(cfg.max_steps, MAX_ITERATIONS)

    source_train = source.train if cfg.strategy != "attf" else []

    history: list[dict] = []
    best_nd = math.inf
    best_snapshot = store.copy()
    best_step = 0
    evals_since_best = 0
    step = 0
    stop = False

    for _epoch in range(cfg.epochs):
        perm = shuffle.permutation(n_target)
        for chunk_start in range(0, n_target, cfg.batch_size):
            idx = perm[chunk_start : chunk_start + cfg.batch_size]
            batch_t = WindowBatch.from_windows([target_train[i] for i in idx])
            batch_s = None
            if cfg.strategy != "attf":
                sidx = shuffle.integers(0, len(source_train), size=cfg.batch_size)
                batch_s = WindowBatch.from_windows([source_train[i] for i in sidx])
            metrics = train_step(batch_s, batch_t, store, opts, model_cfg, cfg)
            step += 1

            if step % eval_every == 0:
                val_nd = evaluate_nd(store, model_cfg, cfg.strategy, target.validation).nd
                history.append({"step": step, **metrics, "val_nd": val_nd})
                if val_nd < best_nd:
                    best_nd = val_nd
                    best_snapshot = store.copy()
                    best_step = step
                    evals_since_best = 0
                else:
                    evals_since_best += 1
                    if evals_since_best >= cfg.patience:
                        stop = True
            if step >= max_steps:
                stop = True
            if stop:
                break
        if stop:
            break

    if math.isinf(best_nd):  # never evaluated (tiny budgets); evaluate once
        best_nd = evaluate_nd(store, model_cfg, cfg.strategy, target.validation).nd
        history.append({"step": step, "seq_S": 0.0, "seq_T": 0.0, "dom": 0.0, "val_nd": best_nd})
        best_snapshot = store.copy()
        best_step = step
    return TrainResult(
        params=best_snapshot,
        history=history,
        best_val_nd=best_nd,
        best_step=best_step,
        steps_run=step,
    )
