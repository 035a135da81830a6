"""Post-training analysis: mask agreement, reverse-mask probes, and the
ablation / training-size grids.

Everything here consumes or produces trained models and returns plain
data (floats, dataclasses, row dicts) so the command line layer can
serialize results however it likes.  Functions that retrain part of a
model always work on a deep copy: the model handed in is never mutated,
and the reverse-mask study verifies that with a parameter checksum.
"""

from __future__ import annotations

import copy
import hashlib
import logging
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .datagen import CorpusSpec, Example, generate
from .encoder import EncoderConfig, Model, ModelSettings
from .errors import ConfigError, ShapeError
from .trainer import TrainConfig, TrainResult, evaluate, train, train_head_only

log = logging.getLogger(__name__)

# Ablation grid: architecture switches, estimator variants, schedules.
ABLATION_VARIANTS = ("full", "wo_m", "wo_a", "wo_am",
                     "ste", "str", "scalar",
                     "bottom_up", "simultaneous", "last_only")

ABLATION_COLUMNS = ("variant", "seed", "domain", "value", "sparsity_fraction")
SIZE_SWEEP_COLUMNS = ("size", "seed", "arm", "domain", "value", "sparsity_fraction")


# ---- similarity primitives -------------------------------------------------

def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine of the angle between two vectors; 0.0 if either is all zero
    (an empty mask has no direction to agree with)."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ShapeError(f"cosine needs equal lengths, got {a.shape[0]} and {b.shape[0]}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        log.warning("cosine against an all-zero vector reported as 0.0")
        return 0.0
    return float(a @ b / (na * nb))


def jaccard_similarity(q_a: np.ndarray, q_b: np.ndarray) -> float:
    """Intersection over union of two keep-sets (nonzero = kept).  Two
    empty masks agree vacuously: 1.0."""
    q_a = np.asarray(q_a, dtype=np.float64).ravel() != 0.0
    q_b = np.asarray(q_b, dtype=np.float64).ravel() != 0.0
    if q_a.shape != q_b.shape:
        raise ShapeError(f"jaccard needs equal lengths, got {q_a.shape[0]} and {q_b.shape[0]}")
    union = np.logical_or(q_a, q_b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(q_a, q_b).sum() / union)


def sign_permutation_cosine(m_a: np.ndarray, m_b: np.ndarray,
                            draws: int = 100, seed: int = 0) -> float:
    """Mean cosine of m_a against sign-scrambled copies of m_b.

    Flipping signs keeps the magnitude profile and the zero pattern of
    m_b intact, so the baseline isolates exactly the directional
    agreement the real comparison claims credit for.
    """
    m_b = np.asarray(m_b, dtype=np.float64).ravel()
    rng = np.random.default_rng(seed)
    flips = rng.choice([-1.0, 1.0], size=(draws, m_b.shape[0]))
    return float(np.mean([cosine_similarity(m_a, m_b * f) for f in flips]))


def index_permutation_jaccard(q_a: np.ndarray, q_b: np.ndarray,
                              draws: int = 100, seed: int = 0) -> float:
    """Mean Jaccard of q_a against index-shuffled copies of q_b, i.e. the
    overlap expected from the two keep-densities alone."""
    q_b = np.asarray(q_b, dtype=np.float64).ravel()
    rng = np.random.default_rng(seed)
    return float(np.mean([jaccard_similarity(q_a, rng.permutation(q_b))
                          for _ in range(draws)]))


# ---- mask agreement between trained models ---------------------------------

@dataclass
class SimilarityRow:
    layer: int
    slot: int
    cosine: float
    jaccard: float
    kept_a: float
    kept_b: float


@dataclass
class SimilarityTable:
    rows: list[SimilarityRow]

    def mean_cosine(self) -> float:
        return float(np.mean([r.cosine for r in self.rows]))

    def mean_jaccard(self) -> float:
        return float(np.mean([r.jaccard for r in self.rows]))

    def top(self) -> SimilarityRow:
        return max(self.rows, key=lambda r: r.layer)


def mask_similarity(model_a: Model, model_b: Model) -> SimilarityTable:
    """Layer-by-layer agreement between two models' masks.

    Pairs filters positionally, which requires the two models to share
    an architecture.  ``slot`` disambiguates multiple masks at the same
    layer (the per-label masks of a multi-class head).
    """
    filters_a, filters_b = model_a.mask_filters(), model_b.mask_filters()
    if not filters_a or not filters_b:
        raise ConfigError("model.use_masks", "both models need masks to compare")
    if len(filters_a) != len(filters_b):
        raise ShapeError(
            f"models carry {len(filters_a)} and {len(filters_b)} masks; cannot pair them")
    rows = []
    for slot, (fa, fb) in enumerate(zip(filters_a, filters_b)):
        if fa.width != fb.width:
            raise ShapeError(
                f"mask widths differ at slot {slot}: {fa.width} vs {fb.width}")
        q_a, q_b = fa.binary_mask_values(), fb.binary_mask_values()
        rows.append(SimilarityRow(
            layer=fa.layer_index, slot=slot,
            cosine=cosine_similarity(fa.filtering_values(), fb.filtering_values()),
            jaccard=jaccard_similarity(q_a, q_b),
            kept_a=float(q_a.mean()), kept_b=float(q_b.mean())))
    return SimilarityTable(rows)


@dataclass
class AgreementReport:
    """Top-layer mask agreement for one pair of single-domain runs."""
    seed: int
    domain_a: str
    domain_b: str
    cosine: float
    cosine_baseline: float
    jaccard: float
    jaccard_baseline: float
    kept_a: float
    kept_b: float
    table: SimilarityTable


def domain_mask_agreement(spec: CorpusSpec, domain_a: str, domain_b: str, seed: int,
                          encoder_config: EncoderConfig | None = None,
                          train_config: TrainConfig | None = None,
                          draws: int = 100) -> AgreementReport:
    """Train one masked model per domain from a shared initialization and
    measure whether their masks agree more than chance.

    Both runs start from the same encoder seed, the analog of masking a
    shared pre-trained backbone twice.  Chance is estimated by sign
    permutations (cosine) and index permutations (Jaccard) of the second
    model's top-layer mask.
    """
    spec.validate()
    for name in (domain_a, domain_b):
        if name not in spec.domains:
            raise ConfigError("corpus.domains", f"unknown domain {name!r}")
    models = []
    for name in (domain_a, domain_b):
        model, _ = train_on_domains(spec, (name,), name, seed,
                                    encoder_config=encoder_config,
                                    train_config=train_config)
        models.append(model)
    table = mask_similarity(models[0], models[1])
    fa = models[0].mask_filters()[-1]
    fb = models[1].mask_filters()[-1]
    m_a, m_b = fa.filtering_values(), fb.filtering_values()
    q_a, q_b = fa.binary_mask_values(), fb.binary_mask_values()
    top = table.top()
    return AgreementReport(
        seed=seed, domain_a=domain_a, domain_b=domain_b,
        cosine=top.cosine,
        cosine_baseline=sign_permutation_cosine(m_a, m_b, draws=draws, seed=seed),
        jaccard=top.jaccard,
        jaccard_baseline=index_permutation_jaccard(q_a, q_b, draws=draws, seed=seed),
        kept_a=top.kept_a, kept_b=top.kept_b, table=table)


# ---- reverse-mask study ----------------------------------------------------

def _parameter_digest(model: Model) -> str:
    h = hashlib.sha256()
    for name, t in sorted(model.named_parameters()):
        h.update(name.encode())
        h.update(np.ascontiguousarray(t.data).tobytes())
    return h.hexdigest()


def reverse_mask_study(model: Model, introduced: frozenset[int],
                       refit_examples: Sequence[Example],
                       eval_sets: dict[str, Sequence[Example]],
                       config: TrainConfig,
                       metric: str = "accuracy",
                       refit_epochs: int | None = None) -> dict:
    """Measure how predictive the features a trained model pruned are.

    Builds a copy whose every gate is complemented (kept features are
    dropped, dropped features come back at their learned magnitudes),
    refits only the classification head on ``refit_examples``, and
    evaluates both models on each named example set.  If the pruned
    features carried the domain-stable signal, the complement should do
    about as well; if pruning really discarded the unstable channels,
    the complement should fall behind, most sharply out of domain.
    """
    filters = model.mask_filters()
    if not filters:
        raise ConfigError("model.use_masks", "model has no masks to reverse")
    baseline = {name: evaluate(model, examples, metric, introduced)
                for name, examples in eval_sets.items()}
    digest = _parameter_digest(model)

    twin = copy.deepcopy(model)
    for f in twin.mask_filters():
        f.q_override = 1.0 - f.binary_mask_values()
    train_head_only(twin, refit_examples, config, introduced, epochs=refit_epochs)
    reversed_scores = {name: evaluate(twin, examples, metric, introduced)
                       for name, examples in eval_sets.items()}

    if _parameter_digest(model) != digest:
        raise RuntimeError("reverse-mask study mutated the input model")
    return {
        "metric": metric,
        "baseline": baseline,
        "reversed": reversed_scores,
        "delta": {name: reversed_scores[name] - baseline[name] for name in eval_sets},
        "kept_fraction": float(np.mean([1.0 - f.sparsity_fraction() for f in filters])),
        "reversed_kept_fraction": float(np.mean(
            [f.q_override.mean() for f in twin.mask_filters()])),
    }


# ---- shared experiment driver ----------------------------------------------

def variant_settings(variant: str, n_labels: int = 2) -> tuple[ModelSettings, dict]:
    """Model settings and trainer overrides for one ablation variant."""
    if variant not in ABLATION_VARIANTS:
        raise ConfigError("variant",
                          f"unknown variant {variant!r}, expected one of {ABLATION_VARIANTS}")
    settings = ModelSettings(n_labels=n_labels)
    overrides: dict = {}
    if variant == "wo_m":
        settings.use_masks = False
    elif variant == "wo_a":
        settings.use_attention = False
    elif variant == "wo_am":
        settings.use_masks = False
        settings.use_attention = False
    elif variant in ("ste", "str", "scalar"):
        settings.mask_variant = variant
        overrides["mask_variant"] = variant
    elif variant in ("bottom_up", "simultaneous", "last_only"):
        overrides["schedule"] = variant
    return settings, overrides


def train_on_domains(spec: CorpusSpec, train_domains: Sequence[str], val_domain: str,
                     seed: int,
                     encoder_config: EncoderConfig | None = None,
                     settings: ModelSettings | None = None,
                     train_config: TrainConfig | None = None,
                     run_id: str = "run0") -> tuple[Model, TrainResult]:
    """Generate the named training material and fit one model on it.

    ``seed`` drives both the parameter initialization and the batch
    order; the corpus itself is pinned by ``spec.seed``, so sweeping
    ``seed`` re-trains on identical data.
    """
    spec.validate()
    if not train_domains:
        raise ConfigError("train_domains", "need at least one training domain")
    for name in (*train_domains, val_domain):
        if name not in spec.domains:
            raise ConfigError("corpus.domains", f"unknown domain {name!r}")
    train_examples = [ex for name in train_domains
                      for ex in generate(spec, name, "train")]
    val_examples = generate(spec, val_domain, "val")
    encoder_config = replace(encoder_config or EncoderConfig(),
                             vocab_size=spec.vocab_size, seed=seed)
    train_config = replace(train_config or TrainConfig(), seed=seed)
    model = Model(encoder_config, settings or ModelSettings(n_labels=spec.n_labels))
    result = train(model, train_examples, val_examples, train_config, run_id=run_id)
    return model, result


def evaluate_domains(model: Model, introduced: frozenset[int], spec: CorpusSpec,
                     domains: Sequence[str], split: str = "test",
                     metric: str = "accuracy") -> dict[str, float]:
    return {name: evaluate(model, generate(spec, name, split), metric, introduced)
            for name in domains}


def mean_sparsity(model: Model, introduced: frozenset[int]) -> float | None:
    """Mean pruned fraction over the masks actually in use, or None for
    mask-free models."""
    fractions = [f.sparsity_fraction() for f in model.mask_filters()
                 if f.layer_index in introduced]
    if not fractions:
        return None
    return float(np.mean(fractions))


# ---- ablation and size grids -----------------------------------------------

def ablation_cell(spec: CorpusSpec, variant: str, seed: int,
                  train_domains: Sequence[str] = ("source", "source_aux"),
                  val_domain: str = "source",
                  eval_domains: Sequence[str] = ("source", "target_a", "target_b"),
                  encoder_config: EncoderConfig | None = None,
                  train_config: TrainConfig | None = None) -> list[dict]:
    """One grid cell: train a variant on one seed, score every eval
    domain.  Cells are independent, so callers may run them in any
    order or in parallel."""
    settings, overrides = variant_settings(variant, n_labels=spec.n_labels)
    config = train_config or TrainConfig()
    if overrides:
        config = replace(config, **overrides)
    model, result = train_on_domains(
        spec, train_domains, val_domain, seed,
        encoder_config=encoder_config, settings=settings, train_config=config)
    scores = evaluate_domains(model, result.introduced, spec, eval_domains)
    sparsity = mean_sparsity(model, result.introduced)
    log.info("ablation %s seed %d: %s", variant, seed,
             {k: round(v, 3) for k, v in scores.items()})
    return [{"variant": variant, "seed": seed, "domain": domain,
             "value": scores[domain], "sparsity_fraction": sparsity}
            for domain in eval_domains]


def ablation_suite(spec: CorpusSpec, seeds: Sequence[int],
                   variants: Sequence[str] = ABLATION_VARIANTS,
                   train_domains: Sequence[str] = ("source", "source_aux"),
                   val_domain: str = "source",
                   eval_domains: Sequence[str] = ("source", "target_a", "target_b"),
                   encoder_config: EncoderConfig | None = None,
                   train_config: TrainConfig | None = None) -> list[dict]:
    """Run the variant grid over shared seeds and return one row per
    (variant, seed, eval domain).  Rows follow ABLATION_COLUMNS."""
    rows = []
    for variant in variants:
        for seed in seeds:
            rows.extend(ablation_cell(
                spec, variant, seed, train_domains, val_domain, eval_domains,
                encoder_config=encoder_config, train_config=train_config))
    return rows


def _sized_spec(spec: CorpusSpec, size: int, n_domains: int) -> CorpusSpec:
    """A copy of ``spec`` whose train split yields ``size`` examples in
    total across ``n_domains`` training domains.  Streams are seeded per
    (domain, split), so the smaller corpus is a prefix of the larger."""
    if size < n_domains:
        raise ConfigError("size", f"size {size} is below one example per training domain")
    per_domain = size // n_domains
    return replace(spec, splits={**spec.splits, "train": per_domain})


def budget_epochs(size: int, batch_size: int, step_budget: int) -> int:
    """Epochs per stage that spend about ``step_budget`` optimizer steps
    on ``size`` examples.  Without this rescaling, a size sweep at fixed
    epochs conflates training-set size with optimization budget: the
    smallest corpus would also get by far the fewest steps."""
    if step_budget < 1:
        raise ConfigError("step_budget", f"must be positive, got {step_budget}")
    steps_per_epoch = -(-size // batch_size)
    return max(1, round(step_budget / steps_per_epoch))


def size_cell(spec: CorpusSpec, size: int, arm: str, seed: int,
              train_domains: Sequence[str] = ("source", "source_aux"),
              val_domain: str = "source",
              eval_domains: Sequence[str] = ("target_b",),
              encoder_config: EncoderConfig | None = None,
              train_config: TrainConfig | None = None,
              step_budget: int | None = None) -> list[dict]:
    """One cell of the size grid: one arm, one seed, one training size."""
    sized = _sized_spec(spec, int(size), len(train_domains))
    config = train_config or TrainConfig()
    if step_budget is not None:
        config = replace(config, epochs_per_stage=budget_epochs(
            int(size), config.batch_size, step_budget))
    cell = ablation_cell(sized, arm, seed, train_domains, val_domain, eval_domains,
                         encoder_config=encoder_config, train_config=config)
    return [{"size": int(size), "seed": row["seed"], "arm": row["variant"],
             "domain": row["domain"], "value": row["value"],
             "sparsity_fraction": row["sparsity_fraction"]} for row in cell]


def size_sweep(spec: CorpusSpec, sizes: Sequence[int], seeds: Sequence[int],
               arms: Sequence[str] = ("full", "wo_am"),
               train_domains: Sequence[str] = ("source", "source_aux"),
               val_domain: str = "source",
               eval_domains: Sequence[str] = ("target_b",),
               encoder_config: EncoderConfig | None = None,
               train_config: TrainConfig | None = None,
               step_budget: int | None = None) -> list[dict]:
    """Re-run the arms at several training-set sizes.

    ``size`` counts total training examples, divided evenly across the
    training domains.  With ``step_budget`` set, epochs per stage are
    rescaled per size so every cell spends about the same number of
    optimizer steps.  Rows follow SIZE_SWEEP_COLUMNS.
    """
    rows = []
    for size in sizes:
        for arm in arms:
            for seed in seeds:
                rows.extend(size_cell(
                    spec, size, arm, seed, train_domains, val_domain, eval_domains,
                    encoder_config=encoder_config, train_config=train_config,
                    step_budget=step_budget))
            log.info("size %d arm %s done", size, arm)
    return rows


def gap_by_size(rows: Sequence[dict], domain: str = "target_b",
                arm_a: str = "full", arm_b: str = "wo_am") -> dict[int, float]:
    """Mean accuracy difference (arm_a minus arm_b) per size."""
    gaps: dict[int, float] = {}
    for size in sorted({row["size"] for row in rows}):
        means = {}
        for arm in (arm_a, arm_b):
            vals = [row["value"] for row in rows
                    if row["size"] == size and row["arm"] == arm and row["domain"] == domain]
            if not vals:
                raise ConfigError("rows", f"no rows for size {size}, arm {arm!r}, domain {domain!r}")
            means[arm] = float(np.mean(vals))
        gaps[size] = means[arm_a] - means[arm_b]
    return gaps
