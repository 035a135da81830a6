"""Loss assembly, Adam, and the staged mask-training schedules.

Training happens in stages.  The first stage fits the backbone, the
classification head, and one filtering layer together; every later
stage freezes all of that and fits only the next layer's filter.  Four
schedules choose which layer comes next:

* ``top_down``: start at the top layer and walk toward the input.
* ``bottom_up``: start just above the first block and walk up.
* ``simultaneous``: one stage, all filters at once.
* ``last_only``: one stage, the top filter only.

After every stage the source-validation metric is recorded together
with a parameter snapshot; the stage with the best metric wins, ties
going to the deeper (more-masked) stage.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Iterable, Sequence

import numpy as np

from . import tensor as tt
from .datagen import PAD_ID, Example
from .encoder import Model
from .errors import ConfigError, InputError, RunFailure
from .heads import BinaryHead, MultiClassHead, binary_forward, distance_loss
from .masking import VARIANTS, FilterLayer
from .tensor import Tape, Tensor

logger = logging.getLogger("imo.trainer")

SCHEDULES = ("top_down", "bottom_up", "simultaneous", "last_only")
SELECTION_METRICS = ("accuracy", "macro_f1")

METRICS_COLUMNS = ("run_id", "stage", "epoch", "split", "metric_name", "value",
                   "sparsity_fraction", "wallclock_s")


@dataclass
class TrainConfig:
    alpha: float = 1.0
    beta: float = 0.1
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    warmup_fraction: float = 0.1
    epochs_per_stage: int = 3
    batch_size: int = 32
    schedule: str = "top_down"
    mask_variant: str = "long_tailed"
    seed: int = 0
    max_masked_layers: int | None = None
    train_backbone_all_stages: bool = False
    selection_metric: str = "accuracy"

    def validate(self) -> "TrainConfig":
        if self.alpha < 0:
            raise ConfigError("trainer.alpha", f"must be >= 0, got {self.alpha}")
        if self.beta < 0:
            raise ConfigError("trainer.beta", f"must be >= 0, got {self.beta}")
        if self.lr <= 0:
            raise ConfigError("trainer.lr", f"must be positive, got {self.lr}")
        b1, b2 = self.betas
        if not (0.0 <= b1 < 1.0 and 0.0 <= b2 < 1.0):
            raise ConfigError("trainer.betas", f"each must lie in [0, 1), got {self.betas}")
        if not 0.0 <= self.warmup_fraction < 1.0:
            raise ConfigError(
                "trainer.warmup_fraction", f"must lie in [0, 1), got {self.warmup_fraction}")
        if self.epochs_per_stage < 1:
            raise ConfigError(
                "trainer.epochs_per_stage", f"must be >= 1, got {self.epochs_per_stage}")
        if self.batch_size < 1:
            raise ConfigError("trainer.batch_size", f"must be >= 1, got {self.batch_size}")
        if self.schedule not in SCHEDULES:
            raise ConfigError(
                "trainer.schedule", f"unknown schedule {self.schedule!r}, expected one of {SCHEDULES}")
        if self.mask_variant not in VARIANTS:
            raise ConfigError(
                "trainer.mask_variant",
                f"unknown variant {self.mask_variant!r}, expected one of {VARIANTS}")
        if self.max_masked_layers is not None and self.max_masked_layers < 1:
            raise ConfigError(
                "trainer.max_masked_layers", f"must be >= 1, got {self.max_masked_layers}")
        if self.selection_metric not in SELECTION_METRICS:
            raise ConfigError(
                "trainer.selection_metric",
                f"unknown metric {self.selection_metric!r}, expected one of {SELECTION_METRICS}")
        return self


@dataclass
class StageRecord:
    stage: int
    layers: list[int]
    active_layer: int | None
    val_metric: float
    checkpoint: dict[str, np.ndarray]


@dataclass
class TrainResult:
    stage_records: list[StageRecord]
    selected_stage: int
    introduced: frozenset[int]
    metrics_rows: list[dict]
    model: Model


# ---- optimizer ------------------------------------------------------------

class Adam:
    """Bias-corrected Adam over named tensors.

    A step with any non-finite gradient is skipped (parameters and
    moments untouched); three skipped steps in a row abort the run.
    """

    def __init__(self, named_params: Iterable[tuple[str, Tensor]],
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.named = list(named_params)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data, dtype=np.float64) for _, p in self.named]
        self.v = [np.zeros_like(p.data, dtype=np.float64) for _, p in self.named]
        self.bad_streak = 0

    def step(self, lr_t: float) -> bool:
        """Apply one update at learning rate ``lr_t``.  Returns False when
        the step was skipped because of a non-finite gradient."""
        for name, p in self.named:
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                self.bad_streak += 1
                logger.warning("non-finite gradient in %s; skipping step (%d in a row)",
                               name, self.bad_streak)
                if self.bad_streak >= 3:
                    raise RunFailure(
                        f"aborting: 3 consecutive non-finite gradient steps (last seen in {name})")
                return False
        self.bad_streak = 0
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for i, (_, p) in enumerate(self.named):
            g = np.zeros_like(p.data) if p.grad is None else np.asarray(p.grad, dtype=np.float64)
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g
            p.data = p.data - lr_t * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps)
        return True


def lr_at(step: int, total_steps: int, lr: float, warmup_fraction: float) -> float:
    """Linear warmup to ``lr`` then linear decay toward zero."""
    warmup = int(round(warmup_fraction * total_steps))
    if step < warmup:
        return lr * (step + 1) / warmup
    remaining = total_steps - warmup
    if remaining <= 0:
        return lr
    return lr * (total_steps - step) / remaining


# ---- batching -------------------------------------------------------------

def collate(batch: Sequence[Example]) -> tuple[np.ndarray, np.ndarray | None, np.ndarray]:
    """Pad a batch to its longest sequence.  Returns (tokens, valid, labels)."""
    width = max(len(ex.tokens) for ex in batch)
    tokens = np.full((len(batch), width), PAD_ID, dtype=np.int64)
    valid = np.zeros((len(batch), width), dtype=np.float64)
    labels = np.empty(len(batch), dtype=np.int64)
    for i, ex in enumerate(batch):
        tokens[i, :len(ex.tokens)] = ex.tokens
        valid[i, :len(ex.tokens)] = 1.0
        labels[i] = ex.label
    if np.all(valid == 1.0):
        valid = None
    return tokens, valid, labels


def iter_batches(examples: Sequence[Example], batch_size: int,
                 rng: np.random.Generator | None = None):
    order = np.arange(len(examples)) if rng is None else rng.permutation(len(examples))
    for start in range(0, len(examples), batch_size):
        yield [examples[i] for i in order[start:start + batch_size]]


# ---- losses and metrics ---------------------------------------------------

def cross_entropy(probs: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-probability of the gold labels."""
    labels = np.asarray(labels, dtype=np.int64)
    if probs.ndim == 1:
        probs = tt.reshape(probs, (1, -1))
    onehot = np.zeros(probs.shape, dtype=np.float64)
    onehot[np.arange(len(labels)), labels] = 1.0
    picked = tt.reduce_sum(tt.mul(probs, Tensor(onehot)), axis=-1)
    return tt.mul(tt.reduce_sum(tt.log(picked)), Tensor(-1.0 / len(labels)))


def accuracy_score(gold: np.ndarray, pred: np.ndarray) -> float:
    gold, pred = np.asarray(gold), np.asarray(pred)
    return float(np.mean(gold == pred))


def macro_f1_score(gold: np.ndarray, pred: np.ndarray, n_labels: int) -> float:
    """Unweighted mean of per-class F1; a class absent from both gold and
    predictions contributes 0."""
    gold, pred = np.asarray(gold), np.asarray(pred)
    scores = []
    for y in range(n_labels):
        tp = int(np.sum((pred == y) & (gold == y)))
        fp = int(np.sum((pred == y) & (gold != y)))
        fn = int(np.sum((pred != y) & (gold == y)))
        denom = 2 * tp + fp + fn
        scores.append(0.0 if denom == 0 else 2 * tp / denom)
    return float(np.mean(scores))


def _active_filters(model: Model, active_layers: Sequence[int]) -> list[FilterLayer]:
    out = []
    for layer in active_layers:
        found = model.filter_at(layer)
        out.extend(found if isinstance(found, list) else [found])
    return out


def total_loss(model: Model, tokens: np.ndarray, valid: np.ndarray | None,
               labels: np.ndarray, introduced: frozenset[int],
               active_layers: Sequence[int], config: TrainConfig) -> tuple[Tensor, dict]:
    """Cross entropy plus the active layers' sparsity term, plus the
    multi-class mask-separation term when per-label masks are live."""
    out = model.forward(tokens, introduced, valid)
    ce = cross_entropy(out["probs"], labels)
    loss = ce
    parts = {"ce": ce.item(), "sparsity": 0.0, "distance": 0.0}
    if config.alpha != 0.0 and active_layers:
        sp = None
        for f in _active_filters(model, active_layers):
            term = f.sparsity_loss()
            sp = term if sp is None else tt.add(sp, term)
        parts["sparsity"] = sp.item()
        loss = tt.add(loss, tt.mul(sp, Tensor(config.alpha)))
    if (config.beta != 0.0 and isinstance(model.head, MultiClassHead)
            and model.head.filters and model.config.n_layers in introduced):
        dist = distance_loss(model.head.filters)
        parts["distance"] = dist.item()
        loss = tt.add(loss, tt.mul(dist, Tensor(config.beta)))
    return loss, parts


# ---- evaluation -----------------------------------------------------------

def predict(model: Model, examples: Sequence[Example],
            introduced: frozenset[int] = frozenset(),
            batch_size: int = 64) -> tuple[np.ndarray, np.ndarray]:
    """Argmax predictions and gold labels, in corpus order."""
    if not examples:
        raise InputError("empty dataset")
    preds, golds = [], []
    for batch in iter_batches(examples, batch_size):
        tokens, valid, labels = collate(batch)
        out = model.forward(tokens, introduced, valid)
        preds.append(np.argmax(out["probs"].data, axis=-1))
        golds.append(labels)
    return np.concatenate(preds), np.concatenate(golds)


def evaluate(model: Model, examples: Sequence[Example], metric: str = "accuracy",
             introduced: frozenset[int] = frozenset(), batch_size: int = 64) -> float:
    if metric not in SELECTION_METRICS:
        raise ConfigError("trainer.selection_metric", f"unknown metric {metric!r}")
    pred, gold = predict(model, examples, introduced, batch_size)
    if metric == "accuracy":
        return accuracy_score(gold, pred)
    return macro_f1_score(gold, pred, model.settings.n_labels)


# ---- schedules ------------------------------------------------------------

@dataclass
class StagePlan:
    active_layers: list[int]
    introduced: frozenset[int]
    train_backbone: bool
    train_head: bool


def build_stage_plans(model: Model, config: TrainConfig) -> list[StagePlan]:
    L = model.config.n_layers
    if not model.settings.use_masks:
        return [StagePlan([], frozenset(), True, True)]
    K = config.max_masked_layers if config.max_masked_layers is not None else L
    if K > L:
        raise ConfigError(
            "trainer.max_masked_layers", f"{K} exceeds the model's {L} layers")
    if config.schedule == "top_down":
        layer_order = [L - i for i in range(K)]
    elif config.schedule == "bottom_up":
        layer_order = [i + 1 for i in range(K)]
    elif config.schedule == "last_only":
        layer_order = [L]
    else:
        layer_order = None
    if config.schedule == "simultaneous":
        layers = [L - i for i in range(K)]
        return [StagePlan(layers, frozenset(layers), True, True)]
    plans = []
    introduced: set[int] = set()
    for i, layer in enumerate(layer_order):
        introduced.add(layer)
        first = i == 0
        plans.append(StagePlan(
            [layer], frozenset(introduced),
            first or config.train_backbone_all_stages,
            first or config.train_backbone_all_stages))
    return plans


def _stage_parameters(model: Model, plan: StagePlan) -> list[tuple[str, Tensor]]:
    named = []
    if plan.train_backbone:
        named.extend(model.backbone_parameters())
    if plan.train_head:
        for name, t in model.head_parameters():
            # Per-label filter parameters are handled with the active set.
            if name.rsplit(".", 1)[-1] not in ("r", "s"):
                named.append((name, t))
    for layer in plan.active_layers:
        found = model.filter_at(layer)
        for f in (found if isinstance(found, list) else [found]):
            for pname, t in f.parameters():
                named.append((f"filter{f.layer_index}.{pname}", t))
    return named


def _mean(values: list[float]) -> float:
    return float(np.mean(values)) if values else 0.0


def _active_sparsity(model: Model, plan: StagePlan) -> float | None:
    if not plan.active_layers:
        return None
    fractions = [f.sparsity_fraction() for f in _active_filters(model, plan.active_layers)]
    return _mean(fractions)


def _run_stage(model: Model, named_params: list[tuple[str, Tensor]],
               train_examples: Sequence[Example], config: TrainConfig,
               plan: StagePlan, rng: np.random.Generator,
               on_epoch=None) -> None:
    """The inner loop: epochs of shuffled minibatches under one Adam
    instance with warmup/decay."""
    opt = Adam(named_params, betas=config.betas)
    steps_per_epoch = -(-len(train_examples) // config.batch_size)
    total_steps = steps_per_epoch * config.epochs_per_stage
    step = 0
    for epoch in range(config.epochs_per_stage):
        losses, ces = [], []
        for batch in iter_batches(train_examples, config.batch_size, rng):
            tokens, valid, labels = collate(batch)
            model.zero_grad()
            with Tape() as tape:
                loss, parts = total_loss(model, tokens, valid, labels,
                                         plan.introduced, plan.active_layers, config)
            tape.backward(loss)
            opt.step(lr_at(step, total_steps, config.lr, config.warmup_fraction))
            step += 1
            losses.append(loss.item())
            ces.append(parts["ce"])
        if on_epoch is not None:
            on_epoch(epoch, _mean(losses), _mean(ces))


def select_stage(records: Sequence[StageRecord]) -> int:
    """Argmax of the validation metric; ties go to the deeper stage."""
    return max(range(len(records)), key=lambda i: (records[i].val_metric, i))


def train(model: Model, train_examples: Sequence[Example],
          val_examples: Sequence[Example], config: TrainConfig,
          run_id: str = "run0") -> TrainResult:
    """Run the configured schedule and return the best stage's model.

    The returned model holds the selected stage's parameters; every
    filter the selected stage had introduced is left frozen.
    """
    config.validate()
    if not train_examples or not val_examples:
        raise InputError("need non-empty train and validation splits")
    if model.settings.use_masks and config.alpha == 0.0:
        logger.warning("masks enabled with alpha = 0: no sparsity pressure")

    plans = build_stage_plans(model, config)
    rows: list[dict] = []
    records: list[StageRecord] = []

    for stage_idx, plan in enumerate(plans):
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, stage_idx]))
        named = _stage_parameters(model, plan)

        def log_epoch(epoch: int, mean_loss: float, mean_ce: float,
                      stage_idx=stage_idx, plan=plan):
            frac = _active_sparsity(model, plan)
            base = {"run_id": run_id, "stage": stage_idx, "epoch": epoch,
                    "sparsity_fraction": frac, "wallclock_s": None}
            rows.append({**base, "split": "train", "metric_name": "loss", "value": mean_loss})
            rows.append({**base, "split": "train", "metric_name": "ce", "value": mean_ce})

        _run_stage(model, named, train_examples, config, plan, rng, log_epoch)

        val_metric = evaluate(model, val_examples, config.selection_metric,
                              plan.introduced, config.batch_size)
        rows.append({"run_id": run_id, "stage": stage_idx, "epoch": config.epochs_per_stage - 1,
                     "split": "val", "metric_name": config.selection_metric,
                     "value": val_metric, "sparsity_fraction": _active_sparsity(model, plan),
                     "wallclock_s": None})
        records.append(StageRecord(
            stage=stage_idx, layers=sorted(plan.introduced),
            active_layer=plan.active_layers[0] if len(plan.active_layers) == 1 else None,
            val_metric=val_metric, checkpoint=model.state_arrays()))
        for layer in plan.active_layers:
            found = model.filter_at(layer)
            for f in (found if isinstance(found, list) else [found]):
                f.freeze()
        logger.info("stage %d (%s layers %s): val %s = %.4f", stage_idx, config.schedule,
                    sorted(plan.introduced), config.selection_metric, val_metric)

    selected = select_stage(records)
    best = records[selected]
    model.load_state_arrays(best.checkpoint)
    introduced = plans[selected].introduced
    for f in model.mask_filters():
        f.frozen = f.layer_index in introduced

    rows.append({"run_id": run_id, "stage": selected, "epoch": None, "split": "val",
                 "metric_name": config.selection_metric, "value": best.val_metric,
                 "sparsity_fraction": _active_sparsity(model, plans[selected]),
                 "wallclock_s": None})
    return TrainResult(stage_records=records, selected_stage=selected,
                       introduced=introduced, metrics_rows=rows, model=model)


def train_head_only(model: Model, train_examples: Sequence[Example],
                    config: TrainConfig, introduced: frozenset[int],
                    epochs: int | None = None) -> None:
    """Refit the classification head with everything else frozen."""
    config.validate()
    if epochs is not None and epochs != config.epochs_per_stage:
        config = replace(config, epochs_per_stage=epochs)
    plan = StagePlan([], introduced, False, True)
    named = _stage_parameters(model, plan)
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 7**5]))
    _run_stage(model, named, train_examples, config, plan, rng)


# ---- the two-channel mask probe -------------------------------------------

PROBE_EMBED = np.array([
    [-1.0, 0.0],
    [1.0, 0.0],
    [0.0, -1.0],
    [0.0, 1.0],
])


def train_mask_probe(examples: Sequence[Example], seed: int, alpha: float = 0.1,
                     epochs: int = 12, lr: float = 0.05,
                     batch_size: int = 64) -> dict:
    """Fit a single filter and head on the two-channel probe corpus.

    Token ids index a fixed two-dimensional code: ids 0/1 write the
    causal channel, ids 2/3 the noise channel.  Trains the filter's
    (r, s) and the head jointly on cross entropy plus the sparsity term,
    using normalized attention so gradients flow even through a fully
    closed gate.  Returns the final gate for the pruning check.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 11]))
    filt = FilterLayer(2, "long_tailed", rng, layer_index=1)
    head = BinaryHead(2, rng)
    named = [("filter1.r", filt.r), ("filter1.s", filt.s)] + head.parameters()
    opt = Adam(named)
    steps_per_epoch = -(-len(examples) // batch_size)
    total_steps = steps_per_epoch * epochs
    step = 0
    for _ in range(epochs):
        for batch in iter_batches(examples, batch_size, rng):
            tokens, _, labels = collate(batch)
            e = Tensor(PROBE_EMBED[tokens])
            for _, p in named:
                p.grad = None
            with Tape() as tape:
                masked = filt.apply(e)
                out = binary_forward(masked, filt.filtering_vector(), head,
                                     attention_softmax=True)
                loss = tt.add(cross_entropy(out["probs"], labels),
                              tt.mul(filt.sparsity_loss(), Tensor(alpha)))
            tape.backward(loss)
            opt.step(lr_at(step, total_steps, lr, 0.1))
            step += 1

    tokens, _, labels = collate(list(examples))
    e = Tensor(PROBE_EMBED[tokens])
    out = binary_forward(filt.apply(e), filt.filtering_vector(), head,
                         attention_softmax=True)
    pred = np.argmax(out["probs"].data, axis=-1)
    return {
        "q": filt.binary_mask_values(),
        "r": filt.r.data.copy(),
        "s": filt.s.data.copy(),
        "accuracy": accuracy_score(labels, pred),
    }
