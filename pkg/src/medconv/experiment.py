"""Training, evaluation, sweeps and run comparison.

A run directory holds everything one ``train`` call produced::

    effective_config.json   config actually used, plus its hash
    train_log.csv           per-epoch loss / accuracy / per-class recall
    model.mckp              final weights (averaged iterate for schedule-free)
    logits_<split>.npz      cached eval logits, labels and train counts
    metrics_<split>.csv/md  report after logit adjustment
"""

from __future__ import annotations

import contextlib
import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .calibration import adjust_logits, assign_taus, softmax, sweep_tau
from .data import (
    AugPolicy,
    DataError,
    Manifest,
    Preprocessing,
    augment_sample,
    balanced_augment_policy,
    class_stats,
    load_split,
    oversample_indices,
    sample_rng,
)
from .losses import SOFTMAX, make_loss
from .metrics import REPORT_COLUMNS, MetricsReport, csv_to_rows, evaluate_scores, markdown_table, rows_to_csv
from .model import ConfigError, ModelConfig, build_model, forward, load_checkpoint, save_checkpoint
from .optim import make_optimizer
from .tensor import Tensor, no_grad

log = logging.getLogger(__name__)

EVAL_CHUNK = 50


class NumericError(FloatingPointError):
    """Training produced a non-finite loss."""


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: str = "ce"
    loss_variant: str = SOFTMAX
    optimizer: str = "sgd"
    lr: float = 0.05
    lr_schedule: str = "cosine"
    momentum: float = 0.9
    rho: float = 0.05
    beta: float = 0.9
    weight_decay: float = 0.0
    epochs: int = 20
    batch_size: int = 16
    seed: int = 0
    oversample: bool = False
    augment: bool = False
    balaug: bool = False
    aug_prob: float = 0.3
    windows: bool = False
    window_level: float = 300.0
    window_width: float = 1500.0
    crop_pad: int = 2
    tau1: float = 1.0
    tau2: float = 1.0
    manifest: str = ""
    out_dir: str = "runs/default"
    eval_split: str = "test"

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names - {"config_hash"}
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        d = dict(d)
        if "model" in d and isinstance(d["model"], dict):
            d["model"] = ModelConfig.from_dict(d["model"])
        d.pop("config_hash", None)
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        cfg = cls.from_dict(data)
        # relative manifest paths are relative to the config file
        if cfg.manifest and not Path(cfg.manifest).is_absolute():
            cfg.manifest = str((path.parent / cfg.manifest).resolve())
        return cfg

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        return d

    def preprocessing(self) -> Preprocessing:
        return Preprocessing(
            input_dims=tuple(self.model.input_shape[1:]),
            crop_pad=self.crop_pad,
            windows=self.windows,
            window_level=self.window_level,
            window_width=self.window_width,
        )

    def validate(self) -> None:
        self.model.validate()
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.loss not in ("ce", "balce"):
            raise ConfigError(f"loss must be 'ce' or 'balce', got {self.loss!r}")
        if self.optimizer not in ("sgd", "sam", "schedulefree"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ConfigError(f"lr_schedule must be 'constant' or 'cosine', got {self.lr_schedule!r}")
        if self.tau1 <= 0 or self.tau2 <= 0:
            raise ConfigError("tau1 and tau2 must be positive")
        if self.window_width <= 0:
            raise ConfigError("window_width must be positive")
        if not self.manifest:
            raise ConfigError("no manifest given")
        if not Path(self.manifest).exists():
            raise ConfigError(f"manifest not found: {self.manifest}")

    def run_name(self) -> str:
        """Model name followed by one ``+flag`` per switch that is on."""
        parts = [self.model.name]
        if self.windows:
            parts.append("windows")
        if self.loss == "balce":
            parts.append("balce")
        if self.balaug:
            parts.append("balaug")
        elif self.augment:
            parts.append("aug")
        if self.oversample:
            parts.append("oversample")
        if self.optimizer != "sgd":
            parts.append(self.optimizer)
        if (self.tau1, self.tau2) != (1.0, 1.0):
            parts.append("logitadj")
        return "+".join(parts)

    def config_hash(self) -> str:
        """Hash of everything that affects results (output location excluded)."""
        d = self.to_dict()
        d.pop("out_dir")
        manifest = Path(d.pop("manifest"))
        d["manifest_checksum"] = Manifest.from_csv(manifest).checksum() if manifest.exists() else str(manifest)
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class RunArtifacts:
    out_dir: Path
    checkpoint: Path
    train_log: Path
    logits: Dict[str, Path]
    metrics_csv: Path
    metrics_md: Path
    config_hash: str
    report: Optional[MetricsReport] = None


@contextlib.contextmanager
def run_lock(out_dir: Path):
    """Refuse concurrent writers to one run directory."""
    out_dir.mkdir(parents=True, exist_ok=True)
    lock = out_dir / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise ConfigError(f"run directory {out_dir} is locked by another process ({lock})") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


def predict_logits(net, xs: np.ndarray) -> np.ndarray:
    """Eval-mode logits, computed in fixed-size chunks."""
    out = []
    with no_grad():
        for start in range(0, len(xs), EVAL_CHUNK):
            out.append(forward(net, Tensor(xs[start:start + EVAL_CHUNK], dtype=net.dtype), training=False).data)
    return np.concatenate(out).astype(np.float64)


def input_norm(x_train: np.ndarray) -> Tuple[float, float]:
    """Scalar mean and std of the training volumes.

    Windowed intensities sit in a narrow band of [0, 1]; without centring,
    the stem conv output is dominated by a DC term and BN running stats lag
    the weights badly enough to flip eval-mode predictions.
    """
    mean = float(x_train.mean())
    std = float(x_train.std())
    return mean, std if std > 0 else 1.0


def standardize(xs: np.ndarray, norm: Tuple[float, float]) -> np.ndarray:
    mean, std = norm
    return ((xs - mean) / std).astype(xs.dtype, copy=False)


def lr_at(cfg: "TrainConfig", step: int, total: int) -> float:
    """Per-batch learning rate. Schedule-free ignores ``lr_schedule``."""
    if cfg.lr_schedule == "constant" or cfg.optimizer == "schedulefree" or total <= 0:
        return cfg.lr
    return 0.5 * cfg.lr * (1.0 + np.cos(np.pi * step / total))


def _recalls(preds: np.ndarray, labels: np.ndarray, c: int) -> List[float]:
    return [float((preds[labels == k] == k).mean()) if (labels == k).any() else float("nan") for k in range(c)]


def _with_eval_params(net, opt):
    """Context that swaps in the optimizer's evaluation iterate, if any."""

    @contextlib.contextmanager
    def ctx():
        eval_params = opt.eval_params()
        if eval_params is None:
            yield
            return
        saved = [p.data.copy() for p in net.parameters()]
        for p, v in zip(net.parameters(), eval_params):
            p.data[...] = v
        try:
            yield
        finally:
            for p, v in zip(net.parameters(), saved):
                p.data[...] = v

    return ctx()


def train(cfg: TrainConfig) -> RunArtifacts:
    cfg.validate()
    out_dir = Path(cfg.out_dir)
    with run_lock(out_dir):
        return _train_locked(cfg, out_dir)


def _train_locked(cfg: TrainConfig, out_dir: Path) -> RunArtifacts:
    manifest = Manifest.from_csv(cfg.manifest)
    c = manifest.num_classes
    if cfg.model.num_classes != c:
        raise ConfigError(f"model has {cfg.model.num_classes} classes but manifest has {c}")
    stats = class_stats(manifest, "train")
    try:
        loss_fn = make_loss(cfg.loss, stats.counts, cfg.loss_variant)
    except ValueError as exc:
        raise DataError(f"cannot build {cfg.loss} loss from train counts {stats.counts.tolist()}: {exc}") from exc
    config_hash = cfg.config_hash()
    effective = cfg.to_dict()
    effective["config_hash"] = config_hash
    (out_dir / "effective_config.json").write_text(json.dumps(effective, indent=2, sort_keys=True) + "\n")

    prep = cfg.preprocessing()
    x_train, y_train = load_split(manifest, "train", prep)
    norm = input_norm(x_train)
    x_train = standardize(x_train, norm)
    eval_sets = {}
    for split in ("val", cfg.eval_split):
        if split not in eval_sets and manifest.split(split):
            xs, ys = load_split(manifest, split, prep)
            eval_sets[split] = (standardize(xs, norm), ys)

    net = build_model(cfg.model, seed=cfg.seed)
    opt = make_optimizer(cfg.optimizer, net.parameters(), cfg.lr, cfg.momentum, cfg.rho, cfg.beta, cfg.weight_decay)
    policies = None
    if cfg.balaug:
        policies = balanced_augment_policy(stats, AugPolicy(prob=cfg.aug_prob))
    elif cfg.augment:
        policies = {k: AugPolicy(prob=cfg.aug_prob) for k in range(c)}

    log_rows = []
    steps_per_epoch = -(-len(oversample_indices(y_train, cfg.seed, cfg.oversample, 0, c)) // cfg.batch_size)
    total_steps, step = cfg.epochs * steps_per_epoch, 0
    for epoch in range(cfg.epochs):
        order = oversample_indices(y_train, cfg.seed, cfg.oversample, epoch, c)
        losses, correct = [], 0
        for batch, start in enumerate(range(0, len(order), cfg.batch_size)):
            opt.lr = lr_at(cfg, step, total_steps)
            step += 1
            idx = order[start:start + cfg.batch_size]
            xb = x_train[idx]
            yb = y_train[idx]
            if policies is not None:
                xb = xb.copy()
                for j in range(len(idx)):
                    rng = sample_rng(cfg.seed, epoch, start + j)
                    xb[j, 0] = augment_sample(xb[j, 0], policies[int(yb[j])], rng)
            batch_in = Tensor(xb, dtype=net.dtype)
            last = {}

            def closure():
                opt.zero_grad()
                logits = forward(net, batch_in, training=True)
                loss = loss_fn(logits, yb)
                value = loss.value
                if not np.isfinite(value):
                    raise NumericError(f"non-finite loss {value} at epoch {epoch}, batch {batch}, lr {cfg.lr}")
                loss.backward()
                last.setdefault("logits", logits.data)
                return value

            try:
                value = opt.step(closure)
            except FloatingPointError as exc:
                if isinstance(exc, NumericError):
                    raise
                raise NumericError(f"{exc} (epoch {epoch}, batch {batch}, lr {cfg.lr})") from exc
            losses.append(value * len(idx))
            correct += int((last["logits"].argmax(axis=1) == yb).sum())
        train_loss = float(np.sum(losses) / len(order))
        row = {"epoch": epoch + 1, "split": "train", "loss": train_loss, "accuracy": correct / len(order)}
        log_rows.append(row)
        if "val" in eval_sets:
            xv, yv = eval_sets["val"]
            with _with_eval_params(net, opt):
                preds = predict_logits(net, xv).argmax(axis=1)
            vrow = {"epoch": epoch + 1, "split": "val", "loss": float("nan"), "accuracy": float((preds == yv).mean())}
            vrow.update({f"recall_{k}": r for k, r in enumerate(_recalls(preds, yv, c))})
            log_rows.append(vrow)
        log.info("epoch %d loss %.4f train acc %.3f", epoch + 1, train_loss, row["accuracy"])

    eval_params = opt.eval_params()
    if eval_params is not None:
        for p, v in zip(net.parameters(), eval_params):
            p.data[...] = v

    columns = ["epoch", "split", "loss", "accuracy"] + [f"recall_{k}" for k in range(c)]
    train_log = out_dir / "train_log.csv"
    train_log.write_text(rows_to_csv(log_rows, columns))
    checkpoint = out_dir / "model.mckp"
    save_checkpoint(net, checkpoint, extra={"train_config": effective, "input_norm": list(norm)})
    ckpt_digest = file_digest(checkpoint)

    logits_paths = {}
    for split, (xs, ys) in eval_sets.items():
        path = out_dir / f"logits_{split}.npz"
        save_logits(path, predict_logits(net, xs), ys, stats.counts, ckpt_digest, split)
        logits_paths[split] = path

    if cfg.eval_split not in logits_paths:
        raise DataError(f"eval split {cfg.eval_split!r} is empty")
    cached = load_logits(logits_paths[cfg.eval_split])
    report = report_from_logits(cached["logits"], cached["labels"], stats.counts, cfg.tau1, cfg.tau2)
    meta = {"name": cfg.run_name(), "config_hash": config_hash, "split": cfg.eval_split,
            "tau1": cfg.tau1, "tau2": cfg.tau2}
    metrics_csv, metrics_md = write_report(out_dir, f"metrics_{cfg.eval_split}", meta, report)
    return RunArtifacts(out_dir, checkpoint, train_log, logits_paths, metrics_csv, metrics_md, config_hash, report)


# ---------------------------------------------------------------------------
# Logit caches and reports
# ---------------------------------------------------------------------------


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def save_logits(path, logits, labels, train_counts, checkpoint_digest: str, split: str) -> None:
    with open(path, "wb") as fh:
        np.savez(fh, logits=np.asarray(logits, dtype=np.float64), labels=np.asarray(labels, dtype=np.int64),
                 train_counts=np.asarray(train_counts, dtype=np.int64),
                 checkpoint=np.array(checkpoint_digest), split=np.array(split))


def load_logits(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise DataError(f"cached logits not found: {path}")
    with np.load(path) as z:
        out = {k: z[k] for k in z.files}
    if len(out["logits"]) != len(out["labels"]):
        raise DataError(f"{path}: {len(out['logits'])} logit rows but {len(out['labels'])} labels")
    return out


def report_from_logits(logits, labels, train_counts, tau1: float = 1.0, tau2: float = 1.0,
                       calibrate: bool = True) -> MetricsReport:
    """Adjusted-probability report; plain softmax when ``calibrate`` is off."""
    if calibrate:
        probs = adjust_logits(logits, assign_taus(train_counts, tau1, tau2))
    else:
        probs = softmax(logits)
    return evaluate_scores(probs, labels, probs.shape[1])


def write_report(out_dir: Path, stem: str, meta: dict, report: MetricsReport) -> Tuple[Path, Path]:
    row = dict(meta)
    row.update(report.flat())
    csv_path = out_dir / f"{stem}.csv"
    csv_path.write_text(rows_to_csv([row]))
    md_row = {"Model": meta.get("name", stem)}
    md_row.update({_TITLES[k]: v for k, v in report.table_row().items()})
    md_path = out_dir / f"{stem}.md"
    md_path.write_text(markdown_table([md_row], ["Model"] + [_TITLES[k] for k in REPORT_COLUMNS]))
    return csv_path, md_path


_TITLES = {"accuracy": "Accuracy", "sensitivity": "Sensitivity", "specificity": "Specificity",
           "f1": "F1 Score", "roc_auc": "ROC AUC"}


def evaluate_checkpoint(
    checkpoint,
    manifest_path,
    split: str,
    tau1: float,
    tau2: float,
    out_dir,
    calibrate: bool = True,
    config: Optional[TrainConfig] = None,
) -> Tuple[MetricsReport, bool]:
    """Evaluate a checkpoint on one split; returns (report, used_cache).

    Logits are cached next to the report and reused when the cache was
    produced by the same checkpoint file and split.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    net, header = load_checkpoint(checkpoint)
    train_cfg = header.get("extra", {}).get("train_config")
    if config is not None:
        mismatched = [k for k, v in config.model.to_dict().items() if header["config"].get(k) != v]
        if mismatched:
            raise ConfigError(f"config and checkpoint disagree on model fields: {', '.join(mismatched)}")
    if train_cfg is not None:
        base = TrainConfig.from_dict(train_cfg)
    else:
        base = config or TrainConfig(model=net.config)
    manifest = Manifest.from_csv(manifest_path)
    stats = class_stats(manifest, "train")
    digest = file_digest(checkpoint)
    cache = out_dir / f"logits_{split}.npz"
    used_cache = False
    if cache.exists():
        cached = load_logits(cache)
        used_cache = str(cached["checkpoint"]) == digest and str(cached["split"]) == split
    if not used_cache:
        xs, ys = load_split(manifest, split, base.preprocessing())
        xs = standardize(xs, tuple(header.get("extra", {}).get("input_norm", (0.0, 1.0))))
        save_logits(cache, predict_logits(net, xs), ys, stats.counts, digest, split)
        cached = load_logits(cache)
    report = report_from_logits(cached["logits"], cached["labels"], cached["train_counts"], tau1, tau2, calibrate)
    name = base.run_name() if train_cfg is not None else net.config.name
    meta = {"name": name, "config_hash": (train_cfg or {}).get("config_hash", ""), "split": split,
            "tau1": tau1 if calibrate else 1.0, "tau2": tau2 if calibrate else 1.0}
    write_report(out_dir, f"metrics_{split}", meta, report)
    return report, used_cache


def parse_grid(spec: str) -> List[float]:
    """``"1.0,0.9,0.8"`` or ``"start:stop:step"`` (inclusive, either direction)."""
    spec = spec.strip()
    if not spec:
        return []
    if ":" in spec:
        start, stop, step = (float(s) for s in spec.split(":"))
        if step == 0:
            raise ConfigError("grid step must be nonzero")
        n = int(round(abs(stop - start) / abs(step))) + 1
        direction = 1.0 if stop >= start else -1.0
        return [round(start + direction * abs(step) * i, 10) for i in range(n)]
    return [float(s) for s in spec.split(",") if s.strip()]


TABLE4_GRID = [0.25, 0.5, 0.65, 0.75, 0.85, 0.9, 0.92, 0.95, 0.96, 0.97, 0.99, 0.995, 0.999, 1.0, 1.1, 1.5, 2.0]
TABLE5_GRID = [1.0, 0.9, 0.8, 0.7, 0.6, 0.5, 0.4, 0.3, 0.2, 0.1]


def run_sweep(logits_path, mode: str, values: Sequence[float], tau1: float, out_dir) -> Tuple[Path, Path]:
    from .calibration import make_grid

    if not values:
        raise ConfigError("empty tau grid")
    cached = load_logits(logits_path)
    table = sweep_tau(cached["logits"], cached["labels"], cached["train_counts"], make_grid(mode, values, tau1), mode)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / f"sweep_{mode}.csv"
    md_path = out_dir / f"sweep_{mode}.md"
    csv_path.write_text(table.to_csv())
    md_path.write_text(table.to_markdown())
    return csv_path, md_path


def compare_runs(run_dirs: Sequence, out_dir, split: str = "test") -> Tuple[Path, Path, List[str]]:
    """Merge per-run metrics into one table; returns (csv, md, warnings)."""
    warnings: List[str] = []
    rows: List[dict] = []
    seen: Dict[str, dict] = {}
    for run in run_dirs:
        run = Path(run)
        cfg_path = run / "effective_config.json"
        metrics_path = run / f"metrics_{split}.csv"
        if not cfg_path.exists() or not metrics_path.exists():
            warnings.append(f"{run}: missing effective_config.json or metrics_{split}.csv; skipped")
            continue
        effective = json.loads(cfg_path.read_text())
        h = effective.get("config_hash", "")
        comparable = {k: v for k, v in effective.items() if k not in ("out_dir", "config_hash")}
        if h in seen:
            if seen[h] != comparable:
                raise ConfigError(f"{run}: config hash {h} collides with a different configuration")
            warnings.append(f"{run}: duplicate of an earlier run (hash {h}); skipped")
            continue
        seen[h] = comparable
        metrics = csv_to_rows(metrics_path.read_text())[0]
        row = {"name": metrics.get("name") or TrainConfig.from_dict(effective).run_name(), "config_hash": h}
        row.update({k: float(metrics[k]) for k in REPORT_COLUMNS})
        rows.append(row)
    if rows:
        base = rows[0]["accuracy"]
        for row in rows:
            row["delta_accuracy"] = row["accuracy"] - base
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    columns = ["name", "config_hash"] + REPORT_COLUMNS + ["delta_accuracy"]
    csv_path = out_dir / "comparison.csv"
    csv_path.write_text(rows_to_csv(rows, columns))
    md_rows = [{"Model": r["name"], **{_TITLES[k]: r[k] for k in REPORT_COLUMNS}, "Δ Accuracy": r["delta_accuracy"]}
               for r in rows]
    md_path = out_dir / "comparison.md"
    md_path.write_text(markdown_table(md_rows, ["Model"] + [_TITLES[k] for k in REPORT_COLUMNS] + ["Δ Accuracy"]))
    return csv_path, md_path, warnings
