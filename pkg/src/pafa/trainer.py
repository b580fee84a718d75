"""
Patient-grouped batching, Adam, the training loop and the ablation suite.

One training step:
    pooled features -> forward -> CE on logits
                              -> PCSL/GPAL on projection embeddings
    total = CE + lambda_pcsl * PCSL + lambda_gpal * GPAL
    backward through both heads -> Adam (decoupled weight decay)

The variant only gates the lambda weights; every other code path is the
same, so `ce_only` and `full` with zero lambdas are bitwise identical.
"""

import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from .checkpoint import quantize, save_checkpoint
from .config import parse_int_list
from .datamodel import Manifest, SampleMeta
from .errors import DataError, NumericError, UsageError
from .evaluation import (
    MetricTriple,
    evaluate_task,
    metrics_record,
    per_patient_accuracy,
    round_percent,
    write_patient_report,
)
from .features import FeatureCache
from .losses import LossWeights, PatientGroups, loss_bundle
from .model import (
    EncoderConfig,
    ParamSet,
    backward,
    cross_entropy,
    forward_pooled,
    init_params,
    pool,
    strip_projection,
)
from .rundir import (
    METRICS_FILE,
    PATIENTS_FILE,
    PREDICTIONS_FILE,
    EpochStats,
    RunRecord,
    append_metrics,
    checkpoint_path,
    latest_metrics,
    read_config,
    write_config,
    write_epochs,
    write_summary,
)

logger = logging.getLogger("pafa.trainer")

VARIANTS = ("full", "ce_only", "no_pcsl", "no_gpal")
SAMPLER_MODES = ("pk", "shuffle")
ABLATION_FILE = "ablation.csv"
ABLATION_SUMMARY_FILE = "ablation_summary.csv"
ABLATION_COLUMNS = ["variant", "seed", "sp", "se", "score"]
LAMBDA_GRID_FILE = "lambda_grid.csv"
LAMBDA_GRID_SUMMARY_FILE = "lambda_grid_summary.csv"
LAMBDA_GRID_COLUMNS = ["lambda_pcsl", "lambda_gpal", "seed", "sp", "se", "score"]


@dataclass(frozen=True)
class SamplerConfig:
    mode: str = "pk"
    patients_per_batch: int = 8  # P
    samples_per_patient: int = 4  # K

    def __post_init__(self):
        if self.mode not in SAMPLER_MODES:
            raise UsageError(f"Unknown sampler {self.mode!r}; expected one of {SAMPLER_MODES}")
        if self.patients_per_batch < 1 or self.samples_per_patient < 1:
            raise UsageError("Sampler P and K must be >= 1")
        if self.mode == "pk" and self.patients_per_batch < 2:
            raise UsageError("pk sampler needs P >= 2 patients per batch")


@dataclass(frozen=True)
class TrainConfig:
    variant: str = "full"
    lr: float = 5e-5
    weight_decay: float = 1e-6
    epochs: int = 100
    batch_size: int = 32
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    task: str = "4class"
    hidden: Tuple[int, ...] = (256, 128)
    embed_dim: int = 128
    proj_dim: int = 128

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.variant not in VARIANTS:
            raise UsageError(f"Unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.task not in ("4class", "2class"):
            raise UsageError(f"Unknown task {self.task!r}")
        if self.epochs < 1:
            raise UsageError("epochs must be >= 1")
        if self.batch_size < 1:
            raise UsageError("batch_size must be >= 1")
        if not self.lr > 0 or self.weight_decay < 0:
            raise UsageError("lr must be > 0 and weight_decay >= 0")
        if self.seed < 0 or self.seed >= 2**64:
            raise UsageError("seed must be an unsigned 64-bit integer")
        if self.sampler.mode == "pk":
            pk = self.sampler.patients_per_batch * self.sampler.samples_per_patient
            if pk != self.batch_size:
                raise UsageError(
                    f"pk sampler needs batch_size = P x K, got {self.batch_size} != "
                    f"{self.sampler.patients_per_batch} x {self.sampler.samples_per_patient}"
                )

    @classmethod
    def desk_scale(cls, **overrides) -> "TrainConfig":
        """Defaults for synthetic runs: fewer epochs, smaller embeddings, larger step."""
        values = {"epochs": 30, "embed_dim": 64, "proj_dim": 64, "lr": 1e-3}
        values.update(overrides)
        return cls(**values)

    @property
    def n_classes(self) -> int:
        return 4 if self.task == "4class" else 2

    def effective_weights(self) -> LossWeights:
        w = self.weights
        if self.variant == "ce_only":
            return replace(w, lambda_pcsl=0.0, lambda_gpal=0.0)
        if self.variant == "no_pcsl":
            return replace(w, lambda_pcsl=0.0)
        if self.variant == "no_gpal":
            return replace(w, lambda_gpal=0.0)
        return w

    def encoder_config(self, frames: int, mels: int) -> EncoderConfig:
        return EncoderConfig(
            frames=frames, mels=mels, hidden=self.hidden, embed_dim=self.embed_dim,
            proj_dim=self.proj_dim, n_classes=self.n_classes, seed=self.seed,
        )

    def to_flat(self) -> Dict[str, Any]:
        return {
            "variant": self.variant,
            "lr": self.lr,
            "weight_decay": self.weight_decay,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "lambda_pcsl": self.weights.lambda_pcsl,
            "lambda_gpal": self.weights.lambda_gpal,
            "epsilon": self.weights.epsilon,
            "seed": self.seed,
            "sampler": self.sampler.mode,
            "sampler_p": self.sampler.patients_per_batch,
            "sampler_k": self.sampler.samples_per_patient,
            "task": self.task,
            "hidden": self.hidden,
            "embed_dim": self.embed_dim,
            "proj_dim": self.proj_dim,
        }

    @classmethod
    def from_flat(cls, values: Mapping[str, Any]) -> "TrainConfig":
        base = cls()
        get = values.get
        try:
            return cls(
                variant=str(get("variant", base.variant)),
                lr=float(get("lr", base.lr)),
                weight_decay=float(get("weight_decay", base.weight_decay)),
                epochs=int(get("epochs", base.epochs)),
                batch_size=int(get("batch_size", base.batch_size)),
                weights=LossWeights(
                    float(get("lambda_pcsl", base.weights.lambda_pcsl)),
                    float(get("lambda_gpal", base.weights.lambda_gpal)),
                    float(get("epsilon", base.weights.epsilon)),
                ),
                seed=int(get("seed", base.seed)),
                sampler=SamplerConfig(
                    str(get("sampler", base.sampler.mode)),
                    int(get("sampler_p", base.sampler.patients_per_batch)),
                    int(get("sampler_k", base.sampler.samples_per_patient)),
                ),
                task=str(get("task", base.task)),
                hidden=parse_int_list(str(get("hidden", ",".join(map(str, base.hidden))))),
                embed_dim=int(get("embed_dim", base.embed_dim)),
                proj_dim=int(get("proj_dim", base.proj_dim)),
            )
        except ValueError as e:
            raise UsageError(f"Bad training config value: {e}") from e


# =============================================================================
# BATCHING
# =============================================================================

@dataclass(frozen=True)
class Batch:
    sample_ids: Tuple[str, ...]
    groups: PatientGroups


def epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch])


def make_batches(rows: Sequence[SampleMeta], sampler: SamplerConfig, seed: int, epoch: int,
                 batch_size: Optional[int] = None) -> List[Batch]:
    """
    Batches for one epoch, deterministic per (seed, epoch).

    pk: ceil(N / (P*K)) batches, each with P distinct patients and K samples
    per patient (with replacement only for patients holding fewer than K).
    shuffle: one permutation cut into batch_size chunks; the last may be short.
    """
    if not rows:
        raise DataError("No training samples to batch")
    rng = epoch_rng(seed, epoch)

    if sampler.mode == "shuffle":
        size = batch_size or sampler.patients_per_batch * sampler.samples_per_patient
        order = rng.permutation(len(rows))
        batches = []
        for start in range(0, len(rows), size):
            chunk = [rows[i] for i in order[start:start + size]]
            batches.append(Batch(tuple(r.sample_id for r in chunk),
                                 PatientGroups.from_ids([r.patient for r in chunk])))
        return batches

    by_patient: Dict[int, List[SampleMeta]] = {}
    for row in rows:
        by_patient.setdefault(row.patient, []).append(row)
    patients = np.array(sorted(by_patient), dtype=np.int64)
    P, K = sampler.patients_per_batch, sampler.samples_per_patient
    if len(patients) < P:
        raise UsageError(
            f"pk sampler needs at least P={P} training patients, found {len(patients)}; "
            "use --sampler shuffle for small cohorts"
        )

    batches = []
    for _ in range(math.ceil(len(rows) / (P * K))):
        chosen = rng.choice(patients, size=P, replace=False)
        ids: List[str] = []
        groups: List[int] = []
        for patient in chosen:
            members = by_patient[int(patient)]
            picks = rng.choice(len(members), size=K, replace=len(members) < K)
            ids.extend(members[i].sample_id for i in picks)
            groups.extend([int(patient)] * K)
        batches.append(Batch(tuple(ids), PatientGroups.from_ids(groups)))
    return batches


# =============================================================================
# OPTIMIZER
# =============================================================================

@dataclass
class AdamState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(params: Dict[str, np.ndarray], grads: Mapping[str, np.ndarray], state: AdamState,
              lr: float, weight_decay: float, betas: Tuple[float, float] = (0.9, 0.999),
              eps: float = 1e-8) -> AdamState:
    """
    One bias-corrected Adam step, in place on `params`.

    Weight decay is decoupled: p <- p - lr * wd * p, then the Adam update.
    """
    beta1, beta2 = betas
    state.t += 1
    correction1 = 1.0 - beta1 ** state.t
    correction2 = 1.0 - beta2 ** state.t
    for name, p in params.items():
        g = grads[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        if weight_decay:
            p -= lr * weight_decay * p
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p -= lr * (m / correction1) / (np.sqrt(v / correction2) + eps)
    return state


# =============================================================================
# TRAINING
# =============================================================================

def load_pooled(cache: FeatureCache, rows: Sequence[SampleMeta]) -> Tuple[Dict[str, np.ndarray], Tuple[int, int]]:
    """Mean+std pooled vector per sample, plus the (frames, mels) fbank shape."""
    missing = cache.missing([r.sample_id for r in rows])
    if missing:
        raise DataError(f"{len(missing)} samples have no cached features (e.g. {', '.join(missing[:5])}); "
                        "run `pafa features` first")
    pooled: Dict[str, np.ndarray] = {}
    shape: Optional[Tuple[int, int]] = None
    for row in rows:
        frames = cache.read(row.sample_id).frames
        if shape is None:
            shape = frames.shape
        elif frames.shape != shape:
            raise DataError(f"{row.sample_id}: fbank shape {frames.shape} differs from {shape}")
        pooled[row.sample_id] = pool(frames[None, :, :])[0]
    if shape is None:
        raise DataError("No samples to load")
    return pooled, shape


def _labels(rows_by_id: Mapping[str, SampleMeta], ids: Sequence[str]) -> np.ndarray:
    return np.array([int(rows_by_id[s].label) for s in ids], dtype=np.intp)


def train_steps(cfg: TrainConfig, train_rows: Sequence[SampleMeta], pooled: Mapping[str, np.ndarray],
                params: ParamSet) -> Tuple[List[EpochStats], List[float]]:
    """Run every epoch in place on `params`; returns epoch means and per-step totals."""
    params.require_training()
    weights = cfg.effective_weights()
    by_id = {r.sample_id: r for r in train_rows}
    state = AdamState()
    epochs: List[EpochStats] = []
    step_totals: List[float] = []

    for epoch in range(1, cfg.epochs + 1):
        sums = np.zeros(4)
        batches = make_batches(train_rows, cfg.sampler, cfg.seed, epoch, cfg.batch_size)
        for b, batch in enumerate(batches, start=1):
            x = np.stack([pooled[s] for s in batch.sample_ids])
            out = forward_pooled(params, x)
            try:
                ce, grad_logits = cross_entropy(out.logits, _labels(by_id, batch.sample_ids))
                bundle = loss_bundle(out.proj, batch.groups, ce, weights)
            except NumericError as e:
                raise NumericError(f"Epoch {epoch}, batch {b}: {e}") from e
            if not math.isfinite(bundle.total):
                raise NumericError(f"Non-finite loss at epoch {epoch}, batch {b} (ce={bundle.ce})")
            grads = backward(params, out, grad_logits, bundle.grad_Z)
            adam_step(params.tensors, grads, state, cfg.lr, cfg.weight_decay)
            step_totals.append(bundle.total)
            sums += (bundle.ce, bundle.pcsl, bundle.gpal, bundle.total)

        means = sums / len(batches)
        stats = EpochStats(epoch, *(float(v) for v in means))
        epochs.append(stats)
        logger.info(f"epoch {epoch}/{cfg.epochs} ce={stats.ce:.6f} pcsl={stats.pcsl:.6f} "
                    f"gpal={stats.gpal:.6f} total={stats.total:.6f}")
    return epochs, step_totals


def write_predictions(path: Path, rows: Sequence[SampleMeta], preds: np.ndarray) -> None:
    frame = pd.DataFrame({
        "sample_id": [r.sample_id for r in rows],
        "patient": [r.patient for r in rows],
        "label": [int(r.label) for r in rows],
        "pred": [int(p) for p in preds],
    })
    frame.to_csv(path, index=False, lineterminator="\n")


def evaluate_rows(params: ParamSet, rows: Sequence[SampleMeta], pooled: Mapping[str, np.ndarray],
                  task: str) -> Tuple[np.ndarray, Dict[str, MetricTriple]]:
    """Predictions with the stripped model and the metrics the task reports."""
    stripped = strip_projection(params)
    preds = np.argmax(forward_pooled(stripped, np.stack([pooled[r.sample_id] for r in rows])).logits, axis=1)
    labels = np.array([int(r.label) for r in rows], dtype=np.int64)
    n_classes = params.config.n_classes
    tasks = ("4class", "2class") if task == "4class" else ("2class",)
    return preds, {t: evaluate_task(preds, labels, t, n_classes) for t in tasks}


def train(cfg: TrainConfig, manifest: Manifest, cache: FeatureCache,
          run_dir: Union[str, Path]) -> RunRecord:
    """Train one model, evaluate it on the test split and persist the run."""
    started = time.perf_counter()
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    if cfg.task == "2class":
        manifest = manifest.relabel_two_class()

    train_rows = manifest.split("train").rows
    test_rows = manifest.split("test").rows
    if not train_rows:
        raise DataError("Manifest has no training samples")

    pooled, (frames, mels) = load_pooled(cache, list(train_rows) + list(test_rows))
    params = init_params(cfg.encoder_config(frames, mels))
    n_patients = len({r.patient for r in train_rows})
    logger.info(f"training variant={cfg.variant} seed={cfg.seed} on {len(train_rows)} samples "
                f"({n_patients} patients), {params.n_params()} parameters")

    epochs, step_totals = train_steps(cfg, train_rows, pooled, params)

    (run_dir / METRICS_FILE).unlink(missing_ok=True)
    write_config(run_dir, cfg.to_flat())
    write_epochs(run_dir, epochs)
    ckpt = save_checkpoint(checkpoint_path(run_dir), params)
    # score the float32 weights that were written, not the live float64 ones
    stored = quantize(params)

    metrics: Dict[str, Any] = {}
    if test_rows:
        preds, triples = evaluate_rows(stored, test_rows, pooled, cfg.task)
        for task, triple in triples.items():
            record = metrics_record(task, triple, len(test_rows), cfg.seed)
            append_metrics(run_dir, record)
            metrics[task] = record
        write_predictions(run_dir / PREDICTIONS_FILE, test_rows, preds)
        write_patient_report(run_dir / PATIENTS_FILE, per_patient_accuracy(
            preds, [int(r.label) for r in test_rows], [r.patient for r in test_rows]))
    else:
        logger.warning("Manifest has no test split; skipping evaluation")

    record = RunRecord(
        config=cfg.to_flat(),
        epochs=epochs,
        metrics=metrics,
        checkpoint_path=str(ckpt),
        wall_clock_s=time.perf_counter() - started,
        step_totals=step_totals,
    )
    write_summary(run_dir, record)
    return record


# =============================================================================
# ABLATION
# =============================================================================

def run_name(variant: str, seed: int) -> str:
    return f"{variant}_seed{seed}"


def ablation_suite(manifest: Manifest, base_cfg: TrainConfig, seeds: Sequence[int], cache: FeatureCache,
                   out_dir: Union[str, Path], variants: Sequence[str] = VARIANTS) -> pd.DataFrame:
    """Train every variant x seed, then write ablation.csv and ablation_summary.csv."""
    if not seeds:
        raise UsageError("ablation needs at least one seed")
    if not variants:
        raise UsageError("ablation needs at least one variant")
    out_dir = Path(out_dir)
    run_dirs = []
    for variant in variants:
        for seed in seeds:
            cfg = replace(base_cfg, variant=variant, seed=int(seed))
            run_dir = out_dir / run_name(variant, int(seed))
            train(cfg, manifest, cache, run_dir)
            run_dirs.append(run_dir)
    table = collect_runs(run_dirs)
    write_ablation(out_dir, table)
    return table


def grid_run_name(lambda_pcsl: float, lambda_gpal: float, seed: int) -> str:
    return f"pcsl{lambda_pcsl:g}_gpal{lambda_gpal:g}_seed{seed}"


def _scored(record: RunRecord) -> Dict[str, Any]:
    metrics = record.metrics.get("4class") or record.metrics.get("2class")
    if metrics is None:
        raise DataError("Lambda grid runs need a test split to score")
    return metrics


def lambda_grid(manifest: Manifest, base_cfg: TrainConfig, pcsl_values: Sequence[float],
                gpal_values: Sequence[float], seeds: Sequence[int], cache: FeatureCache,
                out_dir: Union[str, Path]) -> pd.DataFrame:
    """
    Train the full objective for every (lambda_pcsl, lambda_gpal) pair x seed,
    then write lambda_grid.csv and lambda_grid_summary.csv.
    """
    if not seeds:
        raise UsageError("lambda grid needs at least one seed")
    if not pcsl_values or not gpal_values:
        raise UsageError("lambda grid needs at least one value per axis")
    if min(pcsl_values) < 0 or min(gpal_values) < 0:
        raise UsageError("lambda grid values must be non-negative")
    out_dir = Path(out_dir)
    rows = []
    for lambda_pcsl in pcsl_values:
        for lambda_gpal in gpal_values:
            weights = replace(base_cfg.weights, lambda_pcsl=float(lambda_pcsl), lambda_gpal=float(lambda_gpal))
            for seed in seeds:
                cfg = replace(base_cfg, variant="full", seed=int(seed), weights=weights)
                run_dir = out_dir / grid_run_name(weights.lambda_pcsl, weights.lambda_gpal, int(seed))
                metrics = _scored(train(cfg, manifest, cache, run_dir))
                rows.append({
                    "lambda_pcsl": weights.lambda_pcsl,
                    "lambda_gpal": weights.lambda_gpal,
                    "seed": int(seed),
                    "sp": float(metrics["sp"]),
                    "se": float(metrics["se"]),
                    "score": float(metrics["score"]),
                })
    table = pd.DataFrame(rows, columns=LAMBDA_GRID_COLUMNS)
    write_lambda_grid(out_dir, table)
    return table


def summarize_lambda_grid(table: pd.DataFrame) -> pd.DataFrame:
    """Mean and population std per lambda pair; `best` marks the highest mean score."""
    summary = _summarize(table, ["lambda_pcsl", "lambda_gpal"])
    summary["best"] = False
    if len(summary):
        summary.loc[summary["score_mean"].idxmax(), "best"] = True
    return summary


def write_lambda_grid(out_dir: Union[str, Path], table: pd.DataFrame) -> Tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    table_path = out_dir / LAMBDA_GRID_FILE
    summary_path = out_dir / LAMBDA_GRID_SUMMARY_FILE
    table.to_csv(table_path, index=False, float_format="%.6g", lineterminator="\n")
    summarize_lambda_grid(table).to_csv(summary_path, index=False, float_format="%.6g", lineterminator="\n")
    return table_path, summary_path


def collect_runs(run_dirs: Sequence[Union[str, Path]]) -> pd.DataFrame:
    """One ablation row per evaluated run directory (4class metrics, else 2class)."""
    rows = []
    for run_dir in run_dirs:
        cfg = read_config(run_dir)
        metrics = latest_metrics(run_dir, "4class") or latest_metrics(run_dir, "2class")
        if metrics is None:
            raise DataError(f"Run {run_dir} has no evaluation metrics")
        rows.append({
            "variant": cfg.get("variant", "full"),
            "seed": int(cfg.get("seed", 0)),
            "sp": float(metrics["sp"]),
            "se": float(metrics["se"]),
            "score": float(metrics["score"]),
        })
    return pd.DataFrame(rows, columns=ABLATION_COLUMNS)


def format_mean_std(mean: float, std: float) -> str:
    return f"{round_percent(mean):.2f}±{round_percent(std):.2f}"


def _summarize(table: pd.DataFrame, keys: Sequence[str]) -> pd.DataFrame:
    """Mean and population std of sp/se/score per key group, in first-appearance order."""
    records = []
    for key, part in table.groupby(list(keys), sort=False):
        record: Dict[str, Any] = dict(zip(keys, key))
        record["n_seeds"] = len(part)
        for metric in ("sp", "se", "score"):
            values = part[metric].to_numpy(dtype=np.float64)
            record[f"{metric}_mean"] = float(values.mean())
            record[f"{metric}_std"] = float(values.std())
        for metric in ("sp", "se", "score"):
            record[f"{metric}_formatted"] = format_mean_std(record[f"{metric}_mean"], record[f"{metric}_std"])
        records.append(record)
    return pd.DataFrame(records)


def summarize_ablation(table: pd.DataFrame) -> pd.DataFrame:
    """Mean and population std per variant."""
    return _summarize(table, ["variant"])


def write_ablation(out_dir: Union[str, Path], table: pd.DataFrame) -> Tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    table_path = out_dir / ABLATION_FILE
    summary_path = out_dir / ABLATION_SUMMARY_FILE
    table.to_csv(table_path, index=False, float_format="%.6f", lineterminator="\n")
    summarize_ablation(table).to_csv(summary_path, index=False, float_format="%.6f", lineterminator="\n")
    return table_path, summary_path


@dataclass(frozen=True)
class BenchmarkOutcome:
    per_seed: Tuple[Dict[str, Any], ...]
    wins: int
    mean_full: float
    mean_ce_only: float
    status: str  # PASS | SOFT_FAIL

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def directional_benefit(table: pd.DataFrame) -> BenchmarkOutcome:
    """
    Does `full` beat `ce_only`? PASS needs a higher-or-equal mean score and
    per-seed wins in at least 80% of seeds (4 of 5).
    """
    full = table[table["variant"] == "full"].set_index("seed")["score"]
    base = table[table["variant"] == "ce_only"].set_index("seed")["score"]
    seeds = sorted(set(full.index) & set(base.index))
    if not seeds:
        raise DataError("Benchmark needs full and ce_only runs on common seeds")
    per_seed = tuple(
        {"seed": int(s), "full": float(full[s]), "ce_only": float(base[s]), "win": bool(full[s] > base[s])}
        for s in seeds
    )
    wins = sum(row["win"] for row in per_seed)
    mean_full = float(np.mean([row["full"] for row in per_seed]))
    mean_base = float(np.mean([row["ce_only"] for row in per_seed]))
    passed = mean_full >= mean_base and wins >= math.ceil(0.8 * len(seeds))
    return BenchmarkOutcome(per_seed, wins, mean_full, mean_base, "PASS" if passed else "SOFT_FAIL")
