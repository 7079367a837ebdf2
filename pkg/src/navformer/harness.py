"""Training, evaluation and the experiment protocols (standard, few-shot, zero-shot, ablation).

Metrics are reported in normalized (z-scored) target units unless
``denormalize`` is requested, in which case errors are scaled back to nT.
"""
import csv
import hashlib
import io
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import engine as E
from .data import (
    FlightRecord, Normalization, SyntheticSpec, generate_synthetic, ingest_csv, load_schema,
    split_and_window, subsample_fewshot,
)
from .errors import ConfigError, DataError, DivergedTraining, NonFinite, ShapeMismatch
from .features import N_TRIAD
from .model import ModelConfig, NavFormer, prepare_inputs
from .spd import GAP_THRESHOLD, perturbation_angles_batch

log = logging.getLogger(__name__)

VARIANTS = {
    "full": {},
    "no_harmonic": {"use_harmonics": False},
    "no_spd": {"use_spd": False},
    "no_film": {"use_film": False},
    "only_film": {"use_harmonics": False, "use_spd": False},
}
LOG_COLUMNS = ("epoch", "train_loss", "val_mae", "val_rmse", "seed", "wall_time")


# ---------------------------------------------------------------- config


@dataclass
class DataConfig:
    synthetic: dict = None
    csv: str = None
    schema: str = None
    sample_rate: float = 10.0
    stride: int = 1
    eval_stride: int = 1
    triad_mode: str = "shared"
    name: str = None

    def load(self):
        if (self.synthetic is None) == (self.csv is None):
            raise ConfigError("data needs exactly one of 'synthetic' or 'csv'")
        if self.synthetic is not None:
            rec = generate_synthetic(SyntheticSpec.from_mapping(self.synthetic))
        else:
            if self.schema is None:
                raise ConfigError("csv data requires a 'schema' file")
            rec = ingest_csv(self.csv, load_schema(self.schema), sample_rate=self.sample_rate)
        if self.name:
            rec.name = self.name
        return rec


@dataclass
class ExperimentConfig:
    model: dict = field(default_factory=dict)
    data: DataConfig = field(default_factory=DataConfig)
    protocol: dict = field(default_factory=lambda: {"name": "standard"})
    optimizer: E.AdamConfig = field(default_factory=E.AdamConfig)
    epochs: int = 100
    patience: int = 10
    batch_size: int = 32
    seeds: list = field(default_factory=lambda: [0, 1, 2])

    @classmethod
    def from_mapping(cls, d):
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            if "data" in d:
                d["data"] = DataConfig(**d["data"])
            if "optimizer" in d:
                d["optimizer"] = E.AdamConfig(**d["optimizer"])
        except TypeError as exc:
            raise ConfigError(f"bad data/optimizer section: {exc}") from None
        cfg = cls(**d)
        if (cfg.data.synthetic is None) == (cfg.data.csv is None):
            raise ConfigError("data needs exactly one of 'synthetic' or 'csv'")
        if cfg.epochs < 0 or cfg.batch_size < 1 or not cfg.seeds:
            raise ConfigError("epochs >= 0, batch_size >= 1 and at least one seed are required")
        name = cfg.protocol.get("name", "standard")
        if name not in ("standard", "fewshot", "zeroshot", "ablation"):
            raise ConfigError(f"unknown protocol {name!r}")
        if name == "fewshot" and "fraction" not in cfg.protocol:
            cfg.protocol["fraction"] = 0.05
        return cfg

    def to_mapping(self):
        return {
            "model": self.model, "data": asdict(self.data), "protocol": self.protocol,
            "optimizer": asdict(self.optimizer), "epochs": self.epochs,
            "patience": self.patience, "batch_size": self.batch_size, "seeds": list(self.seeds),
        }

    def config_hash(self):
        blob = json.dumps(self.to_mapping(), sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def model_config(self, record, seed=None, **overrides):
        """ModelConfig with input width and target channel taken from ``record``."""
        d = {"n_inputs": record.n_channels, "target_channel": record.target_channel,
             "sample_rate": record.sample_rate, **self.model, **overrides}
        if seed is not None:
            d["seed"] = seed
        cfg = ModelConfig.from_dict(d)
        if cfg.n_inputs != record.n_channels or cfg.target_channel != record.target_channel:
            raise ConfigError("model n_inputs/target_channel disagree with the data")
        return cfg


def load_config(path):
    with open(path) as fh:
        return ExperimentConfig.from_mapping(json.load(fh))


# ---------------------------------------------------------------- metrics


def error_metrics(pred, target):
    """MAE and RMSE over all windows and horizon steps."""
    err = np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    if err.size == 0:
        raise DataError("no predictions to score")
    mae = float(np.mean(np.abs(err)))
    rmse = float(np.sqrt(np.mean(err * err)))
    # Jensen: mean |e| <= sqrt(mean e^2); allow rounding slack only.
    assert mae <= rmse * (1 + 1e-12) + 1e-15, (mae, rmse)
    return mae, rmse


@dataclass
class MetricsReport:
    entries: list = field(default_factory=list)
    units: str = "normalized"

    def add(self, **entry):
        if entry["mae"] > entry["rmse"] * (1 + 1e-12) + 1e-15 or entry["mae"] < 0:
            raise AssertionError(f"inconsistent metrics {entry}")
        self.entries.append(entry)

    def summary(self):
        """Mean MAE/RMSE per dataset, averaged over horizons and seeds."""
        out = {}
        for e in self.entries:
            out.setdefault(e["dataset"], []).append((e["mae"], e["rmse"]))
        return {k: {"mae": float(np.mean([v[0] for v in vals])),
                    "rmse": float(np.mean([v[1] for v in vals]))} for k, vals in out.items()}


def _prepared(windows, cfg):
    key = (cfg.seq_len, cfg.use_spd, cfg.use_harmonics, cfg.frequencies, cfg.sample_rate)
    if key not in windows._cache:
        windows._cache[key] = prepare_inputs(windows.inputs, cfg)
    return windows._cache[key]


def predict(model, windows, batch_size=256):
    if windows.seq_len != model.config.seq_len or windows.pred_len != model.config.pred_len:
        raise ShapeMismatch(
            f"windows ({windows.seq_len}, {windows.pred_len}) vs model "
            f"({model.config.seq_len}, {model.config.pred_len})"
        )
    if windows.inputs.shape[2] != model.config.n_inputs:
        raise ShapeMismatch(f"windows have {windows.inputs.shape[2]} channels, model expects "
                            f"{model.config.n_inputs}")
    return model.predict(_prepared(windows, model.config), batch_size)


def evaluate(model, windows, denormalize=False):
    """``(mae, rmse)`` of the target forecasts on ``windows``."""
    pred = predict(model, windows)
    target = windows.y
    if denormalize:
        norm = windows.normalization
        pred, target = norm.denormalize_target(pred), norm.denormalize_target(target)
    return error_metrics(pred, target)


# ---------------------------------------------------------------- training


@dataclass
class TrainResult:
    model: NavFormer
    log: list
    best_epoch: int
    normalization: Normalization = None


def fit(model_cfg, train, val, optimizer=None, epochs=100, patience=10, batch_size=32,
        seed=None, init_params=None):
    """Adam on the target MSE; keeps the parameters with the lowest validation MAE."""
    seed = model_cfg.seed if seed is None else seed
    model = NavFormer(model_cfg, init_params)
    if len(train) == 0 or len(val) == 0:
        raise DataError("training and validation sets must be non-empty")
    opt = E.Adam(model.params, optimizer or E.AdamConfig())
    rng = np.random.default_rng(seed)
    train_in = _prepared(train, model_cfg)
    best_state, best_mae, best_epoch, stale = model.state_dict(), np.inf, 0, 0
    rows = []
    start = time.perf_counter()
    for epoch in range(1, epochs + 1):
        perm = rng.permutation(len(train))
        total = 0.0
        for lo in range(0, len(perm), batch_size):
            idx = perm[lo:lo + batch_size]
            opt.zero_grad()
            try:
                loss = model.loss(train_in[idx], train.future[idx])
                loss.backward()
            except NonFinite as exc:
                raise DivergedTraining(f"epoch {epoch}: {exc}") from exc
            opt.step()
            total += float(loss.data) * len(idx)
        train_loss = total / len(train)
        if not np.isfinite(train_loss):
            raise DivergedTraining(f"epoch {epoch}: training loss is {train_loss}")
        val_mae, val_rmse = evaluate(model, val)
        rows.append({"epoch": epoch, "train_loss": train_loss, "val_mae": val_mae,
                     "val_rmse": val_rmse, "seed": seed,
                     "wall_time": round(time.perf_counter() - start, 3)})
        log.debug("epoch %d loss %.5f val_mae %.5f", epoch, train_loss, val_mae)
        if val_mae < best_mae:
            best_mae, best_epoch, stale = val_mae, epoch, 0
            best_state = model.state_dict()
        else:
            stale += 1
            if patience and stale >= patience:
                break
    return TrainResult(NavFormer(model_cfg, best_state), rows, best_epoch, train.normalization)


def load_splits(config, record=None, normalization=None):
    record = record if record is not None else config.data.load()
    L = config.model.get("seq_len", ModelConfig.seq_len)
    H = config.model.get("pred_len", ModelConfig.pred_len)
    train, val, test = split_and_window(record, L, H, config.data.stride, normalization,
                                        config.data.triad_mode)
    if config.data.eval_stride != config.data.stride:
        _, val, test = split_and_window(record, L, H, config.data.eval_stride,
                                        train.normalization, config.data.triad_mode)
    return record, train, val, test


def train(config, seed=None, record=None, splits=None, variant="full", fraction=None):
    """Train one model; returns ``(TrainResult, record, (train, val, test))``."""
    seed = config.seeds[0] if seed is None else seed
    if splits is None:
        record, tr, va, te = load_splits(config, record)
    else:
        tr, va, te = splits
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}; choose from {sorted(VARIANTS)}")
    cfg = config.model_config(record, seed=seed, **VARIANTS[variant])
    fit_set = tr if fraction is None else subsample_fewshot(tr, fraction, seed)
    result = fit(cfg, fit_set, va, config.optimizer, config.epochs, config.patience,
                 config.batch_size, seed)
    return result, record, (tr, va, te)


def checkpoint_header(result, config, record, seed):
    return {
        "model_config": result.model.config.to_dict(),
        "normalization": result.normalization.to_mapping(),
        "stride": config.data.eval_stride,
        "seed": seed,
        "config_hash": config.config_hash(),
        "best_epoch": result.best_epoch,
        "source": record.name,
        "column_names": list(record.column_names),
    }


def save_model(path, result, config, record, seed):
    E.save_checkpoint(path, result.model.params, checkpoint_header(result, config, record, seed))


def load_model(path):
    params, header = E.load_checkpoint(path)
    cfg = ModelConfig.from_dict(header["model_config"])
    return NavFormer(cfg, params), header


def evaluate_checkpoint(path, record, denormalize=False):
    """Evaluate a saved model on ``record``'s test block using the checkpoint's normalization."""
    model, header = load_model(path)
    cfg = model.config
    norm = Normalization.from_mapping(header["normalization"])
    if record.n_channels != cfg.n_inputs:
        raise ShapeMismatch(f"data has {record.n_channels} channels, checkpoint expects {cfg.n_inputs}")
    _, _, test = split_and_window(record, cfg.seq_len, cfg.pred_len, header.get("stride", 1), norm)
    mae, rmse = evaluate(model, test, denormalize)
    report = MetricsReport(units="nT" if denormalize else "normalized")
    report.add(dataset=record.name, seq_len=cfg.seq_len, pred_len=cfg.pred_len,
               seed=header.get("seed"), mae=mae, rmse=rmse, n_windows=len(test))
    return report, header


# ---------------------------------------------------------------- protocols


def run_standard(config, record=None, denormalize=False):
    record, *splits = load_splits(config, record)
    report = MetricsReport(units="nT" if denormalize else "normalized")
    for seed in config.seeds:
        result, _, _ = train(config, seed, record, splits)
        mae, rmse = evaluate(result.model, splits[2], denormalize)
        report.add(dataset=record.name, seq_len=result.model.config.seq_len,
                   pred_len=result.model.config.pred_len, seed=seed, mae=mae, rmse=rmse,
                   n_windows=len(splits[2]))
    return report


def run_fewshot(config, fraction=None, record=None, denormalize=False):
    """Train on a seeded ``fraction`` of the training windows; validation/test unchanged."""
    fraction = config.protocol.get("fraction", 0.05) if fraction is None else fraction
    record, *splits = load_splits(config, record)
    report = MetricsReport(units="nT" if denormalize else "normalized")
    for seed in config.seeds:
        result, _, _ = train(config, seed, record, splits, fraction=fraction)
        mae, rmse = evaluate(result.model, splits[2], denormalize)
        report.add(dataset=record.name, seq_len=result.model.config.seq_len,
                   pred_len=result.model.config.pred_len, seed=seed, mae=mae, rmse=rmse,
                   n_windows=len(splits[2]), fraction=fraction)
    return report


def run_zeroshot(config, source, targets, denormalize=False, variant="full"):
    """Train on ``source`` and score each target's test block with no parameter updates.

    ``source`` and ``targets`` are :class:`FlightRecord` objects. Target windows
    are normalized with the source training statistics.
    """
    if not targets:
        raise ConfigError("zero-shot transfer needs at least one target flight")
    record, *splits = load_splits(config, source)
    report = MetricsReport(units="nT" if denormalize else "normalized")
    for seed in config.seeds:
        result, _, _ = train(config, seed, record, splits, variant=variant)
        cfg = result.model.config
        for target in targets:
            if target.n_channels != cfg.n_inputs or target.target_channel != cfg.target_channel:
                raise ConfigError(f"target {target.name} channel layout differs from source")
            if target is record:
                test = splits[2]
            else:
                _, _, test = split_and_window(target, cfg.seq_len, cfg.pred_len,
                                              config.data.eval_stride, result.normalization)
            mae, rmse = evaluate(result.model, test, denormalize)
            report.add(dataset=target.name, source=record.name, seq_len=cfg.seq_len,
                       pred_len=cfg.pred_len, seed=seed, mae=mae, rmse=rmse, n_windows=len(test))
    return report


def delta_percent(mae_ablated, mae_full):
    return 100.0 * (mae_ablated - mae_full) / mae_full


def run_ablation(config, variants=None, record=None, denormalize=False):
    """Train every variant on every seed; Delta% of mean test MAE relative to ``full``."""
    variants = list(variants or config.protocol.get("variants") or VARIANTS)
    if "full" not in variants:
        raise ConfigError("ablation requires the 'full' variant as reference")
    bad = [v for v in variants if v not in VARIANTS]
    if bad:
        raise ConfigError(f"unknown variants {bad}")
    record, *splits = load_splits(config, record)
    per_variant = {}
    for variant in variants:
        maes, rmses = [], []
        for seed in config.seeds:
            result, _, _ = train(config, seed, record, splits, variant=variant)
            mae, rmse = evaluate(result.model, splits[2], denormalize)
            maes.append(mae)
            rmses.append(rmse)
        per_variant[variant] = (maes, rmses)
    full_mae = float(np.mean(per_variant["full"][0]))
    rows = []
    for variant in variants:
        maes, rmses = per_variant[variant]
        rows.append({
            "dataset": record.name, "variant": variant,
            "mae": float(np.mean(maes)), "mae_std": float(np.std(maes)),
            "rmse": float(np.mean(rmses)), "rmse_std": float(np.std(rmses)),
            "delta_pct": 0.0 if variant == "full" else delta_percent(float(np.mean(maes)), full_mae),
            "seed_maes": " ".join(f"{m:.6g}" for m in maes),
        })
    return rows


# ---------------------------------------------------------------- Gram diagnostics


GRAM_COLUMNS = ("window_id", "lambda1", "lambda2", "lambda3", "gap12", "gap23", "log10_kappa",
                "theta1", "theta2", "theta3", "degenerate_flag")


def gramstats(windows, noise_scale=1e-4, seed=0, gap_threshold=GAP_THRESHOLD):
    """Per-window Gram spectrum, gaps, condition proxy and eigenvector perturbation angles.

    ``windows`` is a :class:`~navformer.data.WindowSet` or a ``(N, L, >=9)`` array.
    Returns ``(rows, summary)``; summary maps statistic -> quantiles.
    """
    inputs = getattr(windows, "inputs", windows)
    triads = np.asarray(inputs, dtype=np.float64)[..., :N_TRIAD]
    theta, degenerate, spec = perturbation_angles_batch(triads, noise_scale, seed, gap_threshold)
    lam = spec["eigenvalues"]
    log_kappa = np.log10(np.maximum(spec["kappa"], np.finfo(np.float64).tiny))
    flag = (spec["gap12"] < gap_threshold) | (spec["gap23"] < gap_threshold)
    rows = [
        {"window_id": i, "lambda1": lam[i, 0], "lambda2": lam[i, 1], "lambda3": lam[i, 2],
         "gap12": spec["gap12"][i], "gap23": spec["gap23"][i], "log10_kappa": log_kappa[i],
         "theta1": theta[i, 0], "theta2": theta[i, 1], "theta3": theta[i, 2],
         "degenerate_flag": int(flag[i])}
        for i in range(triads.shape[0])
    ]
    qs = (0.05, 0.25, 0.5, 0.75, 0.95)
    stats = {"gap12": spec["gap12"], "gap23": spec["gap23"], "log10_kappa": log_kappa,
             "theta1": theta[:, 0], "theta2": theta[:, 1], "theta3": theta[:, 2]}
    summary = {k: dict(zip(qs, np.quantile(v, qs).tolist())) for k, v in stats.items()}
    summary["degenerate_fraction"] = float(flag.mean()) if flag.size else 0.0
    return rows, summary


def format_summary(summary):
    lines = ["statistic      q05        q25        q50        q75        q95"]
    for key, qs in summary.items():
        if isinstance(qs, dict):
            lines.append(f"{key:<12}" + "".join(f" {v:10.4g}" for v in qs.values()))
    lines.append(f"degenerate fraction: {summary['degenerate_fraction']:.4f}")
    return "\n".join(lines)


# ---------------------------------------------------------------- report files


def _cell(v):
    if isinstance(v, np.generic):
        v = v.item()
    # repr keeps every digit of a float
    return repr(v) if isinstance(v, float) else v


def write_report(path, rows, columns=None, meta=None):
    """CSV with ``# key=value`` comment lines ahead of the header row."""
    columns = list(columns or (rows[0].keys() if rows else []))
    buf = io.StringIO()
    for k, v in (meta or {}).items():
        buf.write(f"# {k}={v}\n")
    writer = csv.DictWriter(buf, fieldnames=columns, extrasaction="ignore", lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: _cell(v) for k, v in row.items()})
    with open(path, "w", newline="") as fh:
        fh.write(buf.getvalue())


def read_report(path):
    """Return ``(meta, rows)`` from a file written by :func:`write_report`."""
    meta, lines = {}, []
    with open(path) as fh:
        for line in fh:
            if line.startswith("#"):
                k, _, v = line[1:].strip().partition("=")
                meta[k.strip()] = v
            else:
                lines.append(line)
    return meta, list(csv.DictReader(lines))
