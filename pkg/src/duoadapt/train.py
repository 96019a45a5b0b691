"""Training drivers: contrastive pretraining, the six-step interactive
schedule, the agreement reward, stopping, and a source-only baseline.

One epoch runs six sequential steps, each minimizing exactly one loss
over exactly one parameter group. The agreement reward (fraction of
target samples on which the two models predict the same class) is
measured once per epoch, right after step 1, and drives both stopping
and best-model selection.
"""
from __future__ import annotations

import csv
import io
from contextlib import contextmanager
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Tuple

import numpy as np

from .autodiff import Adam, ParameterSet, Tensor, optimizer_step
from .data import AugmentationConfig, Dataset, augment_pair
from .losses import (ContrastiveBatch, KernelSpec, cross_entropy_hard,
                     cross_entropy_soft, mmd_squared, nt_xent)
from .model import (BatchNorm, Checkpoint, DomainWiseModel, Dropout,
                    ConvExtractor, MlpExtractor, build_models,
                    classifier_logits, ensemble_predict, extract,
                    parameter_groups, rda_forward)


@dataclass
class TrainConfig:
    pretrain_epochs: int = 20
    temperature: float = 0.5
    epochs: int = 10
    iters_per_step: int = 10
    learning_rate: float = 1e-3
    batch_size: int = 64
    desired_reward: float = 0.95
    seed: int = 0
    soft_pseudo: bool = True    # soft teacher targets vs hard pseudo-labels

    def __post_init__(self):
        if min(self.pretrain_epochs, self.epochs, self.iters_per_step,
               self.batch_size) < 1:
            raise ValueError("all counts must be positive")
        if not 0.0 < self.desired_reward <= 1.0:
            raise ValueError("desired_reward must be in (0, 1]")
        if self.learning_rate <= 0 or self.temperature <= 0:
            raise ValueError("learning_rate and temperature must be positive")


@dataclass
class ModelConfig:
    extractor: str = "mlp"              # mlp | conv_stack
    feature_dim: int = 32
    mlp_hidden: Tuple[int, ...] = (64,)
    proj_dim: int = 16
    rda_hidden: Tuple[int, ...] = (32, 16, 32)
    clf_hidden: Tuple[int, ...] = (32, 16)
    dropout_p: float = 0.1


class StepId(Enum):
    S1_train_Cs = 1
    S2_align_Fs = 2
    S3_guide_Ct = 3
    S4_align_Ft = 4
    S5_source_Ct = 5
    S6_feedback_Fs = 6


# step -> (trace column, trainable group)
STEP_MAP: Dict[StepId, Tuple[str, str]] = {
    StepId.S1_train_Cs: ("L_s_s", "theta_s"),
    StepId.S2_align_Fs: ("MMD_s", "phi_s"),
    StepId.S3_guide_Ct: ("L_t_t", "theta_t"),
    StepId.S4_align_Ft: ("MMD_t", "phi_t"),
    StepId.S5_source_Ct: ("L_t_s", "theta_t"),
    StepId.S6_feedback_Fs: ("L_st_t", "phi_s"),
}

TRACE_COLUMNS = ("epoch", "V", "L_s_s", "MMD_s", "L_t_t", "MMD_t",
                 "L_t_s", "L_st_t", "checkpoint_id", "target_accuracy")


@dataclass
class TraceRow:
    epoch: int
    V: float
    losses: Dict[str, float]
    checkpoint_id: str
    target_accuracy: Optional[float] = None


@dataclass
class RewardTrace:
    rows: List[TraceRow] = field(default_factory=list)
    pretrain_loss_s: Optional[float] = None
    pretrain_loss_t: Optional[float] = None
    config_hash: str = ""

    def append(self, row: TraceRow) -> None:
        if not 0.0 <= row.V <= 1.0:
            raise ValueError(f"reward out of [0,1]: {row.V}")
        if self.rows and row.epoch <= self.rows[-1].epoch:
            raise ValueError("epochs must strictly increase")
        self.rows.append(row)

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(f"# config_hash={self.config_hash}\n")
        buf.write(f"# pretrain_loss_s={_fmt(self.pretrain_loss_s)}"
                  f" pretrain_loss_t={_fmt(self.pretrain_loss_t)}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(TRACE_COLUMNS)
        for r in self.rows:
            w.writerow([r.epoch, repr(r.V)]
                       + [repr(r.losses[c]) for c in TRACE_COLUMNS[2:8]]
                       + [r.checkpoint_id, _fmt(r.target_accuracy)])
        return buf.getvalue()

    def save(self, path) -> None:
        with open(path, "w") as f:
            f.write(self.to_csv())


def _fmt(x: Optional[float]) -> str:
    return "" if x is None else repr(float(x))


# -- mode helpers -------------------------------------------------------------

@contextmanager
def eval_mode(*models: DomainWiseModel):
    saved = []
    for model in models:
        for _, m in model.walk():
            saved.append((m, m.training))
            m.training = False
    try:
        yield
    finally:
        for m, flag in saved:
            m.training = flag


@contextmanager
def _teacher_mode(model: DomainWiseModel):
    """Deterministic guidance forward: dropout off, batch stats unpolluted."""
    saved = []
    for _, m in model.walk():
        if isinstance(m, Dropout):
            saved.append((m, "training", m.training))
            m.training = False
        elif isinstance(m, BatchNorm):
            saved.append((m, "update_stats", m.update_stats))
            m.update_stats = False
    try:
        yield
    finally:
        for m, attr, val in saved:
            setattr(m, attr, val)


# -- batch sampling -----------------------------------------------------------

class BatchSampler:
    """Fresh random minibatches per iteration, all draws from one stream."""

    def __init__(self, source: Dataset, target: Dataset, batch_size: int,
                 rng: np.random.Generator):
        if len(source) == 0 or len(target) == 0:
            raise ValueError("empty dataset")
        self.source = source
        self.target = target
        self.batch_size = batch_size
        self.rng = rng

    def source_batch(self) -> Tuple[Tensor, List[int]]:
        idx = self.rng.choice(len(self.source),
                              size=min(self.batch_size, len(self.source)),
                              replace=False)
        x = Tensor(self.source.inputs.data[idx])
        return x, [self.source.labels[i] for i in idx]

    def target_batch(self) -> Tensor:
        idx = self.rng.choice(len(self.target),
                              size=min(self.batch_size, len(self.target)),
                              replace=False)
        return Tensor(self.target.inputs.data[idx])


# -- contrastive pretraining --------------------------------------------------

def build_extractor(model_cfg: ModelConfig, in_dim: int, seed: int):
    rng = np.random.default_rng(seed)
    if model_cfg.extractor == "mlp":
        return MlpExtractor(in_dim, rng, hidden=model_cfg.mlp_hidden,
                            feature_dim=model_cfg.feature_dim,
                            proj_dim=model_cfg.proj_dim)
    if model_cfg.extractor == "conv_stack":
        return ConvExtractor(rng, feature_dim=model_cfg.feature_dim,
                             proj_dim=model_cfg.proj_dim,
                             dropout_p=model_cfg.dropout_p)
    raise ValueError(f"unknown extractor kind {model_cfg.extractor!r}")


def pretrain_contrastive(extractor, data: Dataset, cfg: TrainConfig,
                         aug: Optional[AugmentationConfig] = None,
                         rng: Optional[np.random.Generator] = None
                         ) -> List[float]:
    """Train an extractor on original/augmented pairs, then freeze it.

    Returns the per-epoch mean contrastive loss; the projection head is
    unused after this call.
    """
    if len(data) == 0:
        raise ValueError("empty pretraining dataset")
    aug = aug or AugmentationConfig()
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    params = extractor.named_parameters("G")
    opt = Adam(cfg.learning_rate)
    n = len(data)
    history: List[float] = []
    for _ in range(cfg.pretrain_epochs):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            if len(idx) < 2:
                continue
            x = Tensor(data.inputs.data[idx])
            view, _ = augment_pair(x, aug, rng)
            batch = ContrastiveBatch(originals=extractor.project(x),
                                     augmented=extractor.project(view),
                                     temperature=cfg.temperature)
            loss = nt_xent(batch)
            for t in params.values():
                t.zero_grad()
            loss.backward()
            opt.step(params)
            losses.append(loss.item())
        history.append(float(np.mean(losses)))
    extractor.freeze()
    extractor.pretrained = True
    return history


# -- interactive schedule -----------------------------------------------------

def _step_loss(step: StepId, ms: DomainWiseModel, mt: DomainWiseModel,
               sampler: BatchSampler, cfg: TrainConfig,
               kernel: KernelSpec) -> Tensor:
    if step is StepId.S1_train_Cs:
        xs, ys = sampler.source_batch()
        return cross_entropy_hard(classifier_logits(ms, xs, "source"), ys)
    if step is StepId.S2_align_Fs:
        xs, _ = sampler.source_batch()
        xt = sampler.target_batch()
        a = rda_forward(ms.rda, extract(ms, xs, "source"), "source")
        b = rda_forward(ms.rda, extract(ms, xt, "target"), "target")
        return mmd_squared(a, b, kernel)
    if step is StepId.S3_guide_Ct:
        xt = sampler.target_batch()
        with _teacher_mode(ms):
            teacher = classifier_logits(ms, xt, "target").detach()
        student = classifier_logits(mt, xt, "target")
        if cfg.soft_pseudo:
            return cross_entropy_soft(student, teacher)
        return cross_entropy_hard(student, teacher.data.argmax(axis=1))
    if step is StepId.S4_align_Ft:
        xs, _ = sampler.source_batch()
        xt = sampler.target_batch()
        a = rda_forward(mt.rda, extract(mt, xs, "source"), "source")
        b = rda_forward(mt.rda, extract(mt, xt, "target"), "target")
        return mmd_squared(a, b, kernel)
    if step is StepId.S5_source_Ct:
        xs, ys = sampler.source_batch()
        return cross_entropy_hard(classifier_logits(mt, xs, "source"), ys)
    if step is StepId.S6_feedback_Fs:
        xt = sampler.target_batch()
        with _teacher_mode(mt):
            anchor = classifier_logits(mt, xt, "target").detach()
        moving = classifier_logits(ms, xt, "target")
        return cross_entropy_soft(moving, anchor)
    raise ValueError(f"unknown step {step}")


def run_step(step: StepId, ms: DomainWiseModel, mt: DomainWiseModel,
             sampler: BatchSampler, cfg: TrainConfig, pset: ParameterSet,
             optimizers: Dict[str, Adam],
             kernel: Optional[KernelSpec] = None) -> float:
    """Run one schedule step: iters_per_step updates of one group only."""
    kernel = kernel or KernelSpec()
    _, group = STEP_MAP[step]
    losses = []
    for _ in range(cfg.iters_per_step):
        loss = _step_loss(step, ms, mt, sampler, cfg, kernel)
        pset.zero_grad()
        loss.backward()
        missing = [n for n, t in pset.subset((group,)).items() if t.grad is None]
        if missing:
            raise RuntimeError(
                f"step {step.name}: no gradient reached group {group} "
                f"(e.g. {missing[0]})")
        optimizer_step(pset, (group,), optimizers[group])
        losses.append(loss.item())
    return float(np.mean(losses))


def compute_reward(ms: DomainWiseModel, mt: DomainWiseModel, x_t: Tensor) -> float:
    """Agreement fraction of the two models' argmax predictions on targets."""
    if x_t.shape[0] == 0:
        raise ValueError("empty target set")
    with eval_mode(ms, mt):
        p_s = classifier_logits(ms, x_t, "target").data.argmax(axis=1)
        p_t = classifier_logits(mt, x_t, "target").data.argmax(axis=1)
    return float(np.mean(p_s == p_t))


def ensemble_accuracy(ms: DomainWiseModel, mt: DomainWiseModel,
                      eval_target: Dataset) -> float:
    with eval_mode(ms, mt):
        preds, _ = ensemble_predict(ms, mt, eval_target.inputs)
    return float(np.mean(preds == np.asarray(eval_target.labels)))


def run_epoch(ms: DomainWiseModel, mt: DomainWiseModel, sampler: BatchSampler,
              cfg: TrainConfig, pset: ParameterSet, optimizers: Dict[str, Adam],
              trace: RewardTrace, epoch: int,
              checkpoints: Dict[str, Checkpoint],
              kernel: Optional[KernelSpec] = None,
              eval_target: Optional[Dataset] = None) -> TraceRow:
    """One pass of S1..S6; the reward is measured right after S1."""
    ms.set_training(True)
    mt.set_training(True)
    losses: Dict[str, float] = {}
    reward = None
    for step in StepId:
        column, _ = STEP_MAP[step]
        losses[column] = run_step(step, ms, mt, sampler, cfg, pset,
                                  optimizers, kernel)
        if step is StepId.S1_train_Cs:
            reward = compute_reward(ms, mt, sampler.target.inputs)
            ms.set_training(True)
            mt.set_training(True)
    ckpt_id = f"epoch_{epoch}"
    checkpoints[ckpt_id] = Checkpoint.capture(ms, mt, epoch, reward,
                                              trace.config_hash)
    acc = None
    if eval_target is not None and eval_target.labels is not None:
        acc = ensemble_accuracy(ms, mt, eval_target)
    row = TraceRow(epoch=epoch, V=reward, losses=losses,
                   checkpoint_id=ckpt_id, target_accuracy=acc)
    trace.append(row)
    return row


def stopping_check(trace: RewardTrace, cfg: TrainConfig) -> Tuple[str, str]:
    """('stop'|'continue', best checkpoint id). Best = max V, earliest tie."""
    if not trace.rows:
        raise ValueError("empty trace")
    best = max(trace.rows, key=lambda r: (r.V, -r.epoch))
    latest = trace.rows[-1]
    done = latest.V >= cfg.desired_reward or len(trace.rows) >= cfg.epochs
    return ("stop" if done else "continue"), best.checkpoint_id


@dataclass
class TrainResult:
    ms: DomainWiseModel
    mt: DomainWiseModel
    trace: RewardTrace
    checkpoints: Dict[str, Checkpoint]
    best_checkpoint_id: str

    @property
    def best(self) -> Checkpoint:
        return self.checkpoints[self.best_checkpoint_id]


def train_interactive(source: Dataset, target: Dataset, cfg: TrainConfig,
                      model_cfg: Optional[ModelConfig] = None,
                      eval_target: Optional[Dataset] = None,
                      aug: Optional[AugmentationConfig] = None,
                      config_hash: str = "",
                      kernel: Optional[KernelSpec] = None) -> TrainResult:
    """Full pipeline: pretrain both extractors, then interactive epochs
    until the reward threshold or the epoch budget is hit. The returned
    models are restored to the best checkpoint by max reward."""
    model_cfg = model_cfg or ModelConfig()
    if source.labels is None:
        raise ValueError("source dataset must be labeled")
    n_classes = max(source.labels) + 1
    in_dim = source.inputs.shape[-1]

    # identical init for both extractors: with comparable domains their
    # feature spaces start close, which keeps the residual corrections small
    g_s = build_extractor(model_cfg, in_dim, cfg.seed)
    g_t = build_extractor(model_cfg, in_dim, cfg.seed)
    trace = RewardTrace(config_hash=config_hash)
    trace.pretrain_loss_s = pretrain_contrastive(
        g_s, source, cfg, aug, np.random.default_rng(cfg.seed + 11))[-1]
    trace.pretrain_loss_t = pretrain_contrastive(
        g_t, target, cfg, aug, np.random.default_rng(cfg.seed + 13))[-1]

    ms, mt = build_models(n_classes, g_s, g_t, seed=cfg.seed + 17,
                          rda_hidden=model_cfg.rda_hidden,
                          clf_hidden=model_cfg.clf_hidden,
                          dropout_p=model_cfg.dropout_p)
    pset = parameter_groups(ms, mt)
    optimizers = {g: Adam(cfg.learning_rate)
                  for g in ("phi_s", "phi_t", "theta_s", "theta_t")}
    sampler = BatchSampler(source, target, cfg.batch_size,
                           np.random.default_rng(cfg.seed + 19))
    checkpoints: Dict[str, Checkpoint] = {}
    best_id = ""
    for epoch in range(1, cfg.epochs + 1):
        run_epoch(ms, mt, sampler, cfg, pset, optimizers, trace, epoch,
                  checkpoints, kernel, eval_target)
        verdict, best_id = stopping_check(trace, cfg)
        if verdict == "stop":
            break
    checkpoints[best_id].restore(ms, mt)
    ms.set_training(False)
    mt.set_training(False)
    return TrainResult(ms=ms, mt=mt, trace=trace, checkpoints=checkpoints,
                       best_checkpoint_id=best_id)


# -- source-only baseline -----------------------------------------------------

@dataclass
class BaselineResult:
    extractor: object
    classifier: object
    target_accuracy: Optional[float]


def train_source_only_baseline(source: Dataset, cfg: TrainConfig,
                               model_cfg: Optional[ModelConfig] = None,
                               eval_target: Optional[Dataset] = None,
                               aug: Optional[AugmentationConfig] = None
                               ) -> BaselineResult:
    """Reference point with no adaptation: one extractor pretrained on the
    source, one classifier fit on source labels, applied to targets as-is."""
    from .model import DomainClassifier
    model_cfg = model_cfg or ModelConfig()
    if source.labels is None:
        raise ValueError("source dataset must be labeled")
    n_classes = max(source.labels) + 1
    g = build_extractor(model_cfg, source.inputs.shape[-1], cfg.seed)
    pretrain_contrastive(g, source, cfg, aug, np.random.default_rng(cfg.seed + 11))
    rng = np.random.default_rng(cfg.seed + 23)
    clf = DomainClassifier(g.feature_dim, n_classes, rng,
                           hidden=model_cfg.clf_hidden,
                           dropout_p=model_cfg.dropout_p)
    params = clf.named_parameters("C")
    opt = Adam(cfg.learning_rate)
    srng = np.random.default_rng(cfg.seed + 29)
    n = len(source)
    total_iters = cfg.epochs * 6 * cfg.iters_per_step
    for _ in range(total_iters):
        idx = srng.choice(n, size=min(cfg.batch_size, n), replace=False)
        x = Tensor(source.inputs.data[idx])
        ys = [source.labels[i] for i in idx]
        loss = cross_entropy_hard(clf(g.features(x)), ys)
        for t in params.values():
            t.zero_grad()
        loss.backward()
        opt.step(params)
    clf.set_training(False)
    acc = None
    if eval_target is not None and eval_target.labels is not None:
        preds = clf(g.features(eval_target.inputs)).data.argmax(axis=1)
        acc = float(np.mean(preds == np.asarray(eval_target.labels)))
    return BaselineResult(extractor=g, classifier=clf, target_accuracy=acc)


# -- stopping-criterion study -------------------------------------------------

def selection_study(trace: RewardTrace) -> Dict[str, float]:
    """Compare epoch selection by max reward vs min summed training loss.

    Requires per-epoch target accuracies in the trace. Regret is the gap
    from the true-best epoch's accuracy to the selected epoch's accuracy.
    """
    rows = trace.rows
    if not rows or any(r.target_accuracy is None for r in rows):
        raise ValueError("selection_study needs per-epoch target accuracies")
    by_v = max(rows, key=lambda r: (r.V, -r.epoch))
    by_loss = min(rows, key=lambda r: (sum(r.losses.values()), r.epoch))
    best = max(rows, key=lambda r: (r.target_accuracy, -r.epoch))
    return {
        "accuracy_at_argmax_V": by_v.target_accuracy,
        "accuracy_at_argmin_loss": by_loss.target_accuracy,
        "accuracy_at_true_best": best.target_accuracy,
        "regret_V_rule": best.target_accuracy - by_v.target_accuracy,
        "regret_loss_rule": best.target_accuracy - by_loss.target_accuracy,
        "epoch_argmax_V": float(by_v.epoch),
        "epoch_argmin_loss": float(by_loss.epoch),
        "epoch_true_best": float(best.epoch),
    }
