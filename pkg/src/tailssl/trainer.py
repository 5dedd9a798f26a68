"""End-to-end training loop with two classifier heads over a shared encoder.

The base head trains with plain supervised + confidence-gated consistency
losses and exists to shape the encoder; the auxiliary head additionally gets
adaptive per-sample weights and a memory loss over features re-sampled from
the class-rebalanced bank, and is the only head used at inference. Per step:

  1. weak-augment the labeled batch, score with both heads; plain CE for the
     base head, ratio-weighted CE for the auxiliary head;
  2. weak- and strong-augment the unlabeled batch; the base head's weak-view
     argmax and confidence provide the pseudo labels and the tau mask for the
     base consistency loss on the strong view; the auxiliary branch keeps the
     same mask but takes its pseudo labels from its own weak-view argmax and
     weights them by the reversed estimated-count ratio;
  3. every confident sample updates the label ledger and offers the configured
     feature view(s) to the memory bank;
  4. a fixed fraction of the batch is re-drawn from the bank (reversed
     sampling) and scored by the auxiliary head; this memory loss reaches only
     the auxiliary head because stored features are constants;
  5. total = L_s_base + lu*L_u_base + L_s_aux + lu*L_u_aux + lm*L_mem,
     one Adam step, one EMA update.

During warmup epochs every unlabeled term is dropped and the ledger/bank stay
untouched. Modes: "vanilla" = supervised base head only, "fixmatch" = base
head with consistency, "bmb" = the full two-head setup.

The loop owns all mutable state on a single logical thread; determinism comes
from four independent seeded streams (init, batch sampling, augmentation,
bank operations).
"""

from dataclasses import dataclass, field

import numpy as np

from .data import AugmentConfig, Dataset, strong_augment, weak_augment
from .errors import TrainingDivergedError
from .estimator import PseudoLabelLedger
from .membank import FeatureRecord, MemoryBank
from .metrics import (
    default_shot_thresholds,
    estimation_error,
    evaluate,
    shot_groups,
    with_groups,
)
from .numerics import (
    AdamState,
    EmaParams,
    LinearLayer,
    ModelParams,
    adam_step,
    ema_update,
    encoder_backward,
    encoder_forward,
    head_backward,
    head_forward,
    init_adam,
    init_ema,
    init_params,
    softmax,
    weighted_masked_ce,
    zeros_like_params,
)
from .util import round_half_up, spawn_rngs
from .weighting import batch_weights

MODES = ("vanilla", "fixmatch", "bmb")
MEMORY_CONTENTS = ("weak", "strong", "both")


@dataclass(frozen=True)
class TrainConfig:
    num_classes: int
    input_dim: int
    hidden_sizes: tuple[int, ...] = (16, 8)
    mode: str = "bmb"
    tau: float = 0.95  # confidence threshold for retaining a pseudo label
    alpha: float = 0.75  # adaptive weight exponent
    beta: float = 1.0  # memory balance exponent
    lambda_sampling: float = 0.75  # reversed-sampling exponent
    lambda_u: float = 1.0  # consistency loss weight
    lambda_m: float = 0.25  # memory loss weight
    batch_size: int = 64
    memory_capacity: int = 128
    get_fraction: float = 0.5  # fraction of the batch re-drawn from memory per step
    memory_content: str = "strong"
    warmup_epochs: int = 5
    epochs: int = 60
    iters_per_epoch: int = 100
    lr: float = 0.002
    ema_decay: float = 0.999
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    aux_stopgrad: bool = False  # stop auxiliary-head gradients before the encoder
    shot_many_min: int | None = None  # shot-group thresholds; None = tertiles of N_k
    shot_few_max: int | None = None
    seed: int = 0
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.memory_content not in MEMORY_CONTENTS:
            raise ValueError(f"memory_content must be one of {MEMORY_CONTENTS}")
        if not 0.0 < self.tau <= 1.0:
            raise ValueError("tau must lie in (0, 1]")
        if self.lambda_u < 0 or self.lambda_m < 0 or self.alpha < 0 or self.beta < 0:
            raise ValueError("loss weights and exponents must be >= 0")
        if not 0.0 <= self.get_fraction <= 1.0:
            raise ValueError("get_fraction must lie in [0, 1]")
        if self.mode == "bmb" and self.memory_capacity < 1:
            raise ValueError("bmb mode requires memory_capacity >= 1")
        if self.batch_size < 1 or self.epochs < 0 or self.iters_per_epoch < 1:
            raise ValueError("batch_size/iters_per_epoch must be >= 1, epochs >= 0")


@dataclass
class StepMetrics:
    loss_s_b: float
    loss_u_b: float
    loss_s_a: float
    loss_u_a: float
    loss_mem: float
    loss_total: float
    mask_rate: float
    enqueue_accept_rate: float


@dataclass
class RngStreams:
    batch: np.random.Generator
    augment: np.random.Generator
    bank: np.random.Generator


@dataclass
class TrainState:
    cfg: TrainConfig
    params: ModelParams
    ema: EmaParams
    adam: AdamState
    bank: MemoryBank
    ledger: PseudoLabelLedger
    labeled_class_counts: np.ndarray  # clamped >= 1, drives the labeled weights
    rngs: RngStreams
    epoch: int = 0
    step: int = 0


def init_state(cfg: TrainConfig, labeled_class_counts: np.ndarray) -> TrainState:
    init_rng, batch_rng, augment_rng, bank_rng = spawn_rngs(cfg.seed, 4)
    params = init_params(cfg.input_dim, cfg.hidden_sizes, cfg.num_classes, init_rng)
    return TrainState(
        cfg=cfg,
        params=params,
        ema=init_ema(params, cfg.ema_decay),
        adam=init_adam(params, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps),
        bank=MemoryBank(max(cfg.memory_capacity, 1), cfg.num_classes, cfg.beta),
        ledger=PseudoLabelLedger(cfg.num_classes),
        labeled_class_counts=np.maximum(np.asarray(labeled_class_counts, dtype=np.int64), 1),
        rngs=RngStreams(batch_rng, augment_rng, bank_rng),
    )


def compute_step(
    state: TrainState,
    labeled_x: np.ndarray,
    labeled_y: np.ndarray,
    unlabeled_ids: np.ndarray,
    unlabeled_x: np.ndarray,
) -> tuple[StepMetrics, ModelParams]:
    """Forward/backward for one step: returns metrics and the total-loss gradient.

    Mutates the ledger and bank (confident-sample bookkeeping) but not the
    parameters; callers apply the optimizer step.
    """
    cfg = state.cfg
    p = state.params
    b = cfg.batch_size
    if len(labeled_x) != b or len(labeled_y) != b:
        raise ValueError("labeled batch size must equal cfg.batch_size")
    use_aux = cfg.mode == "bmb"
    warm = state.epoch < cfg.warmup_epochs
    use_unsup = cfg.mode in ("fixmatch", "bmb") and not warm
    grads = zeros_like_params(p)
    ones = np.ones(b)
    full = np.ones(b, dtype=bool)

    # (1) labeled branch, weak view only
    xw = weak_augment(labeled_x, cfg.augment, state.rngs.augment)
    feats_x, cache_x = encoder_forward(p, xw)
    logits_bx = head_forward(p.base_head, feats_x)
    loss_s_b, dlog_bx = weighted_masked_ce(logits_bx, labeled_y, ones, full, b)
    g_base, dfeat_x = head_backward(p.base_head, feats_x, dlog_bx)
    _add_head(grads.base_head, g_base)
    loss_s_a = 0.0
    if use_aux:
        w_lab = batch_weights(state.labeled_class_counts, labeled_y, cfg.alpha)
        logits_ax = head_forward(p.aux_head, feats_x)
        loss_s_a, dlog_ax = weighted_masked_ce(logits_ax, labeled_y, w_lab, full, b)
        g_aux, dfeat_ax = head_backward(p.aux_head, feats_x, dlog_ax)
        _add_head(grads.aux_head, g_aux)
        if not cfg.aux_stopgrad:
            dfeat_x = dfeat_x + dfeat_ax
    _accumulate_encoder(grads, p, cache_x, dfeat_x)

    loss_u_b = loss_u_a = loss_mem = 0.0
    mask_rate = 0.0
    accept_rate = 0.0
    if use_unsup:
        if len(unlabeled_x) != b:
            raise ValueError("unlabeled batch size must equal cfg.batch_size")
        uw = weak_augment(unlabeled_x, cfg.augment, state.rngs.augment)
        us = strong_augment(unlabeled_x, cfg.augment, state.rngs.augment)

        # (2) pseudo labels and mask from the weak view (constants: no gradient
        # flows through the weak unlabeled pass)
        feats_uw, _ = encoder_forward(p, uw)
        probs_b = softmax(head_forward(p.base_head, feats_uw))
        conf = probs_b.max(axis=1)
        qhat_b = probs_b.argmax(axis=1)
        mask = conf >= cfg.tau
        mask_rate = float(mask.mean())

        feats_us, cache_us = encoder_forward(p, us)
        logits_b_us = head_forward(p.base_head, feats_us)
        loss_u_b, dlog_ub = weighted_masked_ce(logits_b_us, qhat_b, ones, mask, b)
        g_base_u, dfeat_us = head_backward(p.base_head, feats_us, dlog_ub)
        _add_head(grads.base_head, g_base_u, scale=cfg.lambda_u)
        dfeat_us = dfeat_us * cfg.lambda_u

        if use_aux:
            qhat_a = head_forward(p.aux_head, feats_uw).argmax(axis=1)
            est_pre = state.ledger.estimated_counts()
            w_unl = batch_weights(est_pre, qhat_a, cfg.alpha)
            logits_a_us = head_forward(p.aux_head, feats_us)
            loss_u_a, dlog_ua = weighted_masked_ce(logits_a_us, qhat_a, w_unl, mask, b)
            g_aux_u, dfeat_au = head_backward(p.aux_head, feats_us, dlog_ua)
            _add_head(grads.aux_head, g_aux_u, scale=cfg.lambda_u)
            if not cfg.aux_stopgrad:
                dfeat_us = dfeat_us + cfg.lambda_u * dfeat_au
        _accumulate_encoder(grads, p, cache_us, dfeat_us)

        if use_aux:
            # (3) confident samples feed the ledger and the bank (auxiliary labels,
            # since those drive reversed sampling and the unlabeled weights)
            attempts = accepted = 0
            views = {"weak": (feats_uw, "weak"), "strong": (feats_us, "strong")}
            chosen = (
                list(views.values())
                if cfg.memory_content == "both"
                else [views[cfg.memory_content]]
            )
            for j in np.flatnonzero(mask):
                state.ledger.record(int(unlabeled_ids[j]), int(qhat_a[j]))
                for feats, view_name in chosen:
                    rec = FeatureRecord(
                        feature=feats[j].copy(),
                        pseudo_label=int(qhat_a[j]),
                        confidence=float(conf[j]),
                        step=state.step,
                        source_view=view_name,
                    )
                    attempts += 1
                    accepted += int(state.bank.enqueue(rec, state.rngs.bank))
            accept_rate = accepted / attempts if attempts else 0.0

            # (4) memory loss over re-sampled features; gradients reach only the
            # auxiliary head because the stored features are constants
            n_mem = round_half_up(cfg.get_fraction * b)
            records = state.bank.get(
                state.ledger.estimated_counts(), n_mem, cfg.lambda_sampling, state.rngs.bank
            )
            if records:
                feats_m = np.stack([r.feature for r in records])
                labels_m = np.array([r.pseudo_label for r in records])
                logits_m = head_forward(p.aux_head, feats_m)
                loss_mem, dlog_m = weighted_masked_ce(
                    logits_m,
                    labels_m,
                    np.ones(len(records)),
                    np.ones(len(records), dtype=bool),
                    len(records),
                )
                g_aux_m, _ = head_backward(p.aux_head, feats_m, dlog_m)
                _add_head(grads.aux_head, g_aux_m, scale=cfg.lambda_m)

    # (5) total loss per the two-branch decomposition
    loss_total = (
        loss_s_b
        + cfg.lambda_u * loss_u_b
        + loss_s_a
        + cfg.lambda_u * loss_u_a
        + cfg.lambda_m * loss_mem
    )
    if not np.isfinite(loss_total):
        raise TrainingDivergedError(f"non-finite loss at step {state.step}", step=state.step)
    metrics = StepMetrics(
        loss_s_b=loss_s_b,
        loss_u_b=loss_u_b,
        loss_s_a=loss_s_a,
        loss_u_a=loss_u_a,
        loss_mem=loss_mem,
        loss_total=loss_total,
        mask_rate=mask_rate,
        enqueue_accept_rate=accept_rate,
    )
    return metrics, grads


def train_step(
    state: TrainState,
    labeled_x: np.ndarray,
    labeled_y: np.ndarray,
    unlabeled_ids: np.ndarray,
    unlabeled_x: np.ndarray,
) -> StepMetrics:
    """One full optimization step: losses, gradients, Adam update, EMA update."""
    metrics, grads = compute_step(state, labeled_x, labeled_y, unlabeled_ids, unlabeled_x)
    try:
        adam_step(state.params, grads, state.adam, state.cfg.lr)
    except TrainingDivergedError as exc:
        raise TrainingDivergedError(str(exc) + f" at step {state.step}", step=state.step) from None
    ema_update(state.ema, state.params)
    state.step += 1
    return metrics


def _add_head(acc: LinearLayer, g: LinearLayer, scale: float = 1.0) -> None:
    acc.w += scale * g.w
    acc.b += scale * g.b


def _accumulate_encoder(grads: ModelParams, params: ModelParams, cache, dfeatures) -> None:
    for acc, g in zip(grads.encoder_layers, encoder_backward(params, cache, dfeatures)):
        acc.w += g.w
        acc.b += g.b


def predict(state: TrainState, x: np.ndarray, use_ema: bool = True) -> np.ndarray:
    """Class indices from the inference head (auxiliary in bmb mode, base otherwise).

    Inputs are scored un-augmented; argmax ties break toward the smaller class
    index.
    """
    params = state.ema.params if use_ema else state.params
    feats, _ = encoder_forward(params, x)
    head = params.aux_head if state.cfg.mode == "bmb" else params.base_head
    return head_forward(head, feats).argmax(axis=1)


def encode(state: TrainState, x: np.ndarray, use_ema: bool = True) -> np.ndarray:
    """Encoder features for export (t-SNE-style external plotting)."""
    params = state.ema.params if use_ema else state.params
    feats, _ = encoder_forward(params, x)
    return feats


def fit(
    data: Dataset,
    cfg: TrainConfig,
    callbacks: list | None = None,
) -> tuple[TrainState, list[dict]]:
    """Run cfg.epochs x cfg.iters_per_epoch steps over the dataset's splits.

    Batches are drawn uniformly with replacement each iteration. After every
    epoch the EMA parameters are evaluated on the test split and a record with
    accuracy, per-class recall, shot-group accuracy, bank entropy, estimated
    counts, and mean mask rate is appended to the returned log.
    """
    if len(data.labeled) == 0:
        raise ValueError("labeled split must be non-empty")
    counts = data.labeled_class_counts()
    state = init_state(cfg, counts)
    if cfg.shot_many_min is not None and cfg.shot_few_max is not None:
        thresholds = (cfg.shot_many_min, cfg.shot_few_max)
    else:
        thresholds = default_shot_thresholds(counts)
    groups = shot_groups(counts, *thresholds)
    needs_unlabeled = cfg.mode in ("fixmatch", "bmb")
    if needs_unlabeled and len(data.unlabeled) == 0:
        raise ValueError(f"mode={cfg.mode} requires a non-empty unlabeled split")

    log: list[dict] = []
    n_lab, n_unl = len(data.labeled), len(data.unlabeled)
    for epoch in range(cfg.epochs):
        state.epoch = epoch
        mask_rates = []
        loss_totals = []
        accept_rates = []
        for _ in range(cfg.iters_per_epoch):
            li = state.rngs.batch.integers(0, n_lab, size=cfg.batch_size)
            if needs_unlabeled:
                ui = state.rngs.batch.integers(0, n_unl, size=cfg.batch_size)
                u_ids, u_x = data.unlabeled.ids[ui], data.unlabeled.x[ui]
            else:
                u_ids = np.zeros(0, dtype=np.int64)
                u_x = np.zeros((0, cfg.input_dim))
            m = train_step(state, data.labeled.x[li], data.labeled.y[li], u_ids, u_x)
            mask_rates.append(m.mask_rate)
            loss_totals.append(m.loss_total)
            accept_rates.append(m.enqueue_accept_rate)

        report = with_groups(
            evaluate(predict(state, data.test.x, use_ema=True), data.test.y, cfg.num_classes),
            groups,
        )
        bank_entropy = state.bank.balance_entropy() if len(state.bank) else None
        record = {
            "epoch": epoch,
            "acc": report.top1,
            "avg_class_recall": report.avg_class_recall,
            "group_acc": report.group_acc,
            "bank_entropy": bank_entropy,
            "mask_rate": float(np.mean(mask_rates)),
            "per_class_recall": report.per_class_recall.tolist(),
            "confusion": report.confusion.tolist(),
            "loss_total_mean": float(np.mean(loss_totals)),
            "enqueue_accept_rate": float(np.mean(accept_rates)),
            "bank_counts": state.bank.counts().tolist(),
            "estimated_counts": state.ledger.estimated_counts().tolist(),
        }
        if data.true_unlabeled_counts is not None and state.ledger.total() > 0:
            record["estimation_error"] = estimation_error(
                data.true_unlabeled_counts, state.ledger.estimated_counts()
            )
        log.append(record)
        for cb in callbacks or []:
            cb(state, record)
        state.epoch = epoch + 1
    return state, log
