"""Training loop, evaluation, ablations and sweeps."""

from __future__ import annotations

import copy
import json
import logging
import math
import resource
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from hsgt.coarsen import Hierarchy, build_hierarchy
from hsgt.data import LabeledDataset
from hsgt.engine import AdamW, cross_entropy, default_dtype, gather_rows, no_grad
from hsgt.errors import InputError, NumericError
from hsgt.model import HSGT, ModelConfig
from hsgt.sampler import SamplerConfig, dump_batch, epoch_batches, sample_batch
from hsgt.store import HistoricalStore

log = logging.getLogger(__name__)

ABLATIONS = ("no_vertical", "no_structural", "no_historical", "no_readout", "no_sharing", "random_partition")
SWEEP_AXES = ("ratios", "p")
PRECISIONS = {"float64": np.float64, "float32": np.float32}
EVAL_SEED = 12345


@dataclass
class CoarseningConfig:
    ratios: list[float] = field(default_factory=lambda: [0.05])
    method: str = "multilevel"
    seed: int = 0


@dataclass
class OptimizerConfig:
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 1e-5


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    coarsening: CoarseningConfig = field(default_factory=CoarseningConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    epochs: int = 200
    eval_every: int = 1
    patience: int = 50
    seeds: list[int] = field(default_factory=lambda: [0])
    precision: str = "float64"
    full_batch_budget: int = 5000
    split_seed: int = 0
    reset_store_each_epoch: bool = False
    warm_start: bool = False

    def __post_init__(self):
        if self.epochs < 0:
            raise InputError("epochs must be non-negative")
        if self.eval_every < 1 or self.patience < 1:
            raise InputError("eval_every and patience must be at least 1")
        if not self.seeds:
            raise InputError("at least one seed is required")
        if self.precision not in PRECISIONS:
            raise InputError(f"precision must be one of {sorted(PRECISIONS)}")
        if self.optimizer.lr < 0 or self.optimizer.weight_decay < 0:
            raise InputError("lr and weight_decay must be non-negative")
        if any(not 0.0 < r <= 1.0 for r in self.coarsening.ratios):
            raise InputError("coarsening ratios must lie in (0, 1]")
        # The hierarchy depth is fixed by the number of ratios.
        if self.coarsening.method != "import" and self.model.depth != len(self.coarsening.ratios):
            self.model = replace(self.model, depth=len(self.coarsening.ratios))

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["optimizer"]["betas"] = list(self.optimizer.betas)
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> TrainConfig:
        doc = dict(doc)
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise InputError(f"unknown train config fields: {sorted(unknown)}")
        try:
            if "model" in doc:
                doc["model"] = ModelConfig.from_dict(doc["model"])
            if "sampler" in doc:
                doc["sampler"] = SamplerConfig(**doc["sampler"])
            if "coarsening" in doc:
                doc["coarsening"] = CoarseningConfig(**doc["coarsening"])
            if "optimizer" in doc:
                opt = dict(doc["optimizer"])
                if "betas" in opt:
                    opt["betas"] = tuple(opt["betas"])
                doc["optimizer"] = OptimizerConfig(**opt)
            return cls(**doc)
        except TypeError as exc:
            raise InputError(f"bad train config: {exc}") from exc

    @classmethod
    def load(cls, path: str | Path) -> TrainConfig:
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise InputError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise InputError(f"{path}:{exc.lineno}: invalid JSON: {exc.msg}") from exc
        return cls.from_dict(doc)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")


@dataclass
class RunMetrics:
    seed: int
    train_loss: list[float] = field(default_factory=list)
    valid_acc: list[float] = field(default_factory=list)
    epoch_seconds: list[float] = field(default_factory=list)
    mean_staleness: list[float] = field(default_factory=list)
    best_epoch: int = 0
    best_valid: float = float("nan")
    test_acc: float = float("nan")


@dataclass
class MetricsReport:
    runs: list[RunMetrics]
    parameter_count: int
    peak_rss_mb: float
    label: str = "baseline"

    @property
    def test_accuracies(self) -> list[float]:
        return [r.test_acc for r in self.runs]

    @property
    def test_mean(self) -> float:
        return float(np.mean(self.test_accuracies))

    @property
    def test_std(self) -> float:
        return float(np.std(self.test_accuracies))

    @property
    def seconds_per_epoch(self) -> float:
        times = [t for r in self.runs for t in r.epoch_seconds]
        return float(np.mean(times)) if times else 0.0

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "test_mean": self.test_mean,
            "test_std": self.test_std,
            "seconds_per_epoch": self.seconds_per_epoch,
            "parameter_count": self.parameter_count,
            "peak_rss_mb": self.peak_rss_mb,
            "runs": [_finite_json(asdict(r)) for r in self.runs],
        }

    def summary(self) -> str:
        return (f"{self.label}: test {self.test_mean:.4f} +- {self.test_std:.4f} over {len(self.runs)} seed(s), "
                f"{self.parameter_count} parameters, {self.seconds_per_epoch:.3f} s/epoch, "
                f"peak RSS {self.peak_rss_mb:.1f} MB")


def _finite_json(doc):
    """Replace non-finite floats with None so the output is strict JSON."""
    if isinstance(doc, dict):
        return {k: _finite_json(v) for k, v in doc.items()}
    if isinstance(doc, list):
        return [_finite_json(v) for v in doc]
    if isinstance(doc, float) and not math.isfinite(doc):
        return None
    return doc


def peak_rss_mb() -> float:
    # ru_maxrss is in kilobytes on Linux
    return resource.getrusage(resource.RUSAGE_SELF).ru_maxrss / 1024.0


def format_table(header: Sequence[str], rows: Sequence[Sequence]) -> str:
    """Aligned-column plain-text table."""
    cells = [[str(h) for h in header]] + [[_cell(v) for v in row] for row in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


def _cell(v) -> str:
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)


# --- one run --------------------------------------------------------------------

@dataclass
class TrainedRun:
    model: HSGT
    store: HistoricalStore
    hierarchy: Hierarchy
    sampler: SamplerConfig
    metrics: RunMetrics


def effective_sampler(cfg: TrainConfig, ds: LabeledDataset) -> SamplerConfig:
    """Sampler settings after full-batch auto-selection and the no_historical ablation."""
    sampler = cfg.sampler
    if not sampler.full_batch and cfg.full_batch_budget and ds.num_nodes <= cfg.full_batch_budget:
        sampler = replace(sampler, full_batch=True)
    if cfg.model.no_historical:
        sampler = replace(sampler, fanout_high=0)
    if sampler.max_spd != cfg.model.max_spd:
        sampler = replace(sampler, max_spd=cfg.model.max_spd)
    return sampler


def hierarchy_for(cfg: TrainConfig, ds: LabeledDataset, partitions=None) -> Hierarchy:
    c = cfg.coarsening
    return build_hierarchy(ds, c.ratios, c.method, c.seed, partitions=partitions)


def new_store(h: Hierarchy, width: int) -> HistoricalStore:
    return HistoricalStore([h.num_nodes(l) for l in range(1, h.depth + 1)], width)


def run_epoch(
    model: HSGT,
    opt: AdamW | None,
    store: HistoricalStore,
    h: Hierarchy,
    ds: LabeledDataset,
    sampler: SamplerConfig,
    rng: np.random.Generator,
    dump_dir: Path | None = None,
) -> float:
    """One pass over the top level; returns the mean loss over optimizer steps (nan if none).

    With ``dump_dir`` every sampled batch is also written there as JSON.
    """
    train_mask = ds.mask("train")
    losses = []
    for i, top in enumerate(epoch_batches(h, sampler, rng)):
        batch = sample_batch(h, top, sampler, rng)
        if dump_dir is not None:
            dump_batch(batch, Path(dump_dir) / f"batch_{i:05d}.json")
        sup = batch.supervised(train_mask)
        if sup.size == 0 or opt is None:
            # No supervision here: refresh the store only.
            with no_grad():
                model(batch, store, train=False)
            store.advance()
            continue
        logits = model(batch, store, train=True, rng=rng)
        loss = cross_entropy(gather_rows(logits, sup), ds.labels[batch.targets0[sup]])
        opt.zero_grad()
        loss.backward()
        opt.step()
        store.advance()
        losses.append(loss.item())
    return float(np.mean(losses)) if losses else float("nan")


def predict(
    model: HSGT,
    store: HistoricalStore,
    h: Hierarchy,
    sampler: SamplerConfig,
    seed: int = EVAL_SEED,
) -> np.ndarray:
    """Argmax class for every level-0 node. ``store`` is left untouched."""
    work = store.copy()
    rng = np.random.default_rng(seed)
    pred = np.full(h.num_nodes(0), -1, dtype=np.int64)
    with no_grad():
        for top in epoch_batches(h, sampler, rng):
            batch = sample_batch(h, top, sampler, rng)
            logits = model(batch, work, train=False)
            pred[batch.targets0] = np.argmax(logits.data, axis=1)
            work.advance()
    return pred


def accuracy(pred: np.ndarray, ds: LabeledDataset, split: str) -> float:
    mask = ds.mask(split) & (ds.labels >= 0)
    if not mask.any():
        raise InputError(f"split {split!r} has no labeled nodes")
    return float(np.mean(pred[mask] == ds.labels[mask]))


def evaluate(model, store, h, ds, split="test", sampler=None, seed=EVAL_SEED) -> float:
    """Accuracy on ``split`` from a deterministic full inference pass."""
    return accuracy(predict(model, store, h, sampler or SamplerConfig(), seed), ds, split)


def train_one(
    cfg: TrainConfig,
    ds: LabeledDataset,
    seed: int,
    h: Hierarchy | None = None,
    dump_dir: Path | None = None,
) -> TrainedRun:
    """Train with one seed; the returned model and store are the best-validation snapshot.

    ``dump_dir`` receives the batches of the first epoch.
    """
    h = h or hierarchy_for(cfg, ds)
    if h.depth != cfg.model.depth:
        raise InputError(f"hierarchy depth {h.depth} does not match model depth {cfg.model.depth}")
    sampler = effective_sampler(cfg, ds)
    seeds = np.random.SeedSequence(seed).spawn(2)
    model = HSGT(cfg.model, ds.num_features, ds.num_classes, seed=int(seeds[0].generate_state(1)[0]))
    rng = np.random.default_rng(seeds[1])
    store = new_store(h, cfg.model.hidden)
    o = cfg.optimizer
    opt = AdamW(model.parameters(), lr=o.lr, betas=o.betas, eps=o.eps, weight_decay=o.weight_decay)
    metrics = RunMetrics(seed=seed)

    if cfg.warm_start and h.depth:
        run_epoch(model, None, store, h, ds, sampler, rng)

    best_state, best_store = model.state_dict(), store.copy()
    if cfg.epochs == 0:
        metrics.best_valid = evaluate(model, store, h, ds, "valid", sampler)
    since_best = 0
    for epoch in range(1, cfg.epochs + 1):
        if cfg.reset_store_each_epoch:
            store.reset()
        store.reset_stats()
        start = time.perf_counter()
        try:
            loss = run_epoch(model, opt, store, h, ds, sampler, rng, dump_dir if epoch == 1 else None)
        except NumericError as exc:
            raise NumericError(f"seed {seed}, epoch {epoch}: training diverged: {exc}") from exc
        metrics.epoch_seconds.append(time.perf_counter() - start)
        metrics.train_loss.append(loss)
        metrics.mean_staleness.append(store.mean_staleness())
        if epoch % cfg.eval_every and epoch != cfg.epochs:
            continue
        valid = evaluate(model, store, h, ds, "valid", sampler)
        metrics.valid_acc.append(valid)
        log.info("seed %d epoch %d loss %.4f valid %.4f", seed, epoch, loss, valid)
        if not valid <= metrics.best_valid:
            metrics.best_valid, metrics.best_epoch = valid, epoch
            best_state, best_store = model.state_dict(), store.copy()
            since_best = 0
        else:
            since_best += cfg.eval_every
            if since_best >= cfg.patience:
                log.info("seed %d: early stop at epoch %d", seed, epoch)
                break

    model.load_state_dict(best_state)
    metrics.test_acc = evaluate(model, best_store, h, ds, "test", sampler)
    return TrainedRun(model, best_store, h, sampler, metrics)


def train(
    cfg: TrainConfig,
    ds: LabeledDataset,
    h: Hierarchy | None = None,
    label: str = "baseline",
    dump_dir: Path | None = None,
) -> tuple[TrainedRun, MetricsReport]:
    """Train once per seed. Returns the best-validation run and the aggregated report."""
    h = h or hierarchy_for(cfg, ds)
    runs = []
    with default_dtype(PRECISIONS[cfg.precision]):
        for i, seed in enumerate(cfg.seeds):
            runs.append(train_one(cfg, ds, seed, h, dump_dir if i == 0 else None))
    best = max(runs, key=lambda r: r.metrics.best_valid)
    report = MetricsReport([r.metrics for r in runs], best.model.num_parameters(), peak_rss_mb(), label)
    return best, report


# --- ablations and sweeps -----------------------------------------------------------

def variant_config(cfg: TrainConfig, variant: str) -> TrainConfig:
    """Copy of ``cfg`` with exactly one ablation switched on."""
    if variant not in ABLATIONS:
        raise InputError(f"unknown ablation {variant!r}; expected one of {ABLATIONS}")
    out = copy.deepcopy(cfg)
    if variant == "random_partition":
        out.coarsening.method = "random"
    elif variant == "no_sharing":
        out.model = replace(out.model, share_horizontal=False)
    else:
        out.model = replace(out.model, **{variant: True})
    return out


def ablate(cfg: TrainConfig, ds: LabeledDataset, variants: Sequence[str]) -> list[MetricsReport]:
    """Baseline followed by each variant, all with the same seeds."""
    configs = [("baseline", cfg)] + [(v, variant_config(cfg, v)) for v in variants]
    reports = []
    for label, vcfg in configs:
        _, report = train(vcfg, ds, label=label)
        reports.append(report)
    return reports


def sweep(cfg: TrainConfig, ds: LabeledDataset, axis: str, values: Sequence) -> list[MetricsReport]:
    """One training run per value along ``axis`` with seeds held fixed.

    For ``ratios`` each value is a list of per-level ratios; for ``p`` a float.
    """
    if axis not in SWEEP_AXES:
        raise InputError(f"unknown sweep axis {axis!r}; expected one of {SWEEP_AXES}")
    if not values:
        raise InputError("sweep needs at least one value")
    reports = []
    for value in values:
        vcfg = copy.deepcopy(cfg)
        if axis == "ratios":
            ratios = [float(r) for r in (value if isinstance(value, (list, tuple)) else [value])]
            vcfg.coarsening.ratios = ratios
            vcfg.model = replace(vcfg.model, depth=len(ratios))
            label = "{" + ",".join(f"{r:g}" for r in ratios) + "}"
        else:
            vcfg.sampler = replace(vcfg.sampler, p=float(value), p_per_level=None)
            label = f"p={float(value):g}"
        vcfg.__post_init__()
        _, report = train(vcfg, ds, label=label)
        reports.append(report)
    return reports


def report_table(reports: Sequence[MetricsReport], key: str = "variant") -> str:
    rows = [(r.label, r.test_mean, r.test_std, r.parameter_count, r.seconds_per_epoch) for r in reports]
    return format_table([key, "test_mean", "test_std", "params", "s/epoch"], rows)
