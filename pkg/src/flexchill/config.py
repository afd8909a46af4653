"""Experiment files, the experiment runner, sweeps and shipped presets.

An experiment file is line-oriented ``key = value`` text with ``#``
comments and five sections::

    [federated]   FLConfig fields (hyperparameters, temperature, algorithm)
    [model]       architecture
    [data]        dataset source and client partition
    [metrics]     optional end-of-run dumps
    [output]      where results go

Omitted keys take their defaults. Unknown keys, bad types and violated
invariants are reported with the offending line number.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import analysis
from .data import (
    Dataset,
    gen_gaussian_blobs,
    load_csv,
    load_idx,
    partition_dirichlet,
    partition_iid,
    partition_shards,
)
from .fed import ALGORITHMS, FLConfig, RoundRecord, RoundState, run_federated
from .models import KINDS, ModelSpec, build_model, save_params
from .rng import stream

log = logging.getLogger(__name__)

CSV_HEADER = ("round", "acc", "loss", "delta_part", "delta_nonpart", "entropy_pre", "entropy_post", "wall_s")
SWEEPABLE = {
    "temperature": ("federated", "temperature"),
    "participants_per_round": ("federated", "participants_per_round"),
    "batch_size": ("federated", "batch_size"),
    "local_epochs": ("federated", "local_epochs"),
    "alpha": ("data", "alpha"),
    "learning_rate": ("federated", "learning_rate"),
}


class ConfigError(ValueError):
    """Invalid experiment configuration. ``lineno`` is 0 when no line applies."""

    def __init__(self, message: str, path=None, lineno: int = 0):
        self.path = path
        self.lineno = lineno
        self.message = message
        where = f"{path}:{lineno}: " if path is not None and lineno else (f"{path}: " if path is not None else "")
        super().__init__(where + message)


# ---------------------------------------------------------------- sections


@dataclass
class ModelSection:
    kind: str = "mlp"
    hidden: tuple[int, ...] = (64,)
    # empty / 0 means "take it from the data"
    input_shape: tuple[int, ...] = ()
    num_classes: int = 0

    def validate(self) -> None:
        if self.kind == "mlp" and not self.hidden:
            raise ValueError("hidden needs at least one width for kind mlp")
        if any(h < 1 for h in self.hidden):
            raise ValueError("hidden widths must be positive")
        if any(s < 1 for s in self.input_shape):
            raise ValueError("input_shape entries must be positive")
        if self.num_classes < 0:
            raise ValueError("num_classes must be >= 0")


@dataclass
class DataSection:
    source: str = "blobs"
    # blobs
    num_classes: int = 10
    per_class: int = 200
    test_per_class: int = 100
    dim: int = 20
    spread: float = 1.0
    radius: float = 1.0
    center_seed: int = 0
    # idx / csv (relative paths resolve against the config file's folder)
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""
    train_csv: str = ""
    test_csv: str = ""
    limit_train: int = 0
    limit_test: int = 0
    # partition
    partition: str = "dirichlet"
    alpha: float = 0.5
    shard_size: int = 0
    shards_per_client: int = 2

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.per_class < 1 or self.test_per_class < 1:
            raise ValueError("per_class and test_per_class must be >= 1")
        if self.dim < 1:
            raise ValueError("dim must be >= 1")
        if not self.spread >= 0:
            raise ValueError("spread must be >= 0")
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if self.shard_size < 0 or self.shards_per_client < 1:
            raise ValueError("shard_size must be >= 0 and shards_per_client >= 1")
        if self.limit_train < 0 or self.limit_test < 0:
            raise ValueError("limit_train and limit_test must be >= 0")
        if self.source == "idx":
            for key in ("train_images", "train_labels", "test_images", "test_labels"):
                if not getattr(self, key):
                    raise ValueError(f"{key} is required when source = idx")
        if self.source == "csv":
            for key in ("train_csv", "test_csv"):
                if not getattr(self, key):
                    raise ValueError(f"{key} is required when source = csv")


@dataclass
class MetricsSection:
    gradient_norms: bool = False
    gradient_bins: int = 20
    cka: bool = False
    cka_probe: int = 500
    calibration: bool = False
    calibration_bins: int = 10
    boundaries: bool = False
    checkpoint: bool = False

    def validate(self) -> None:
        if self.gradient_bins < 1 or self.calibration_bins < 1:
            raise ValueError("gradient_bins and calibration_bins must be >= 1")
        if self.cka_probe < 2:
            raise ValueError("cka_probe must be >= 2")


@dataclass
class OutputSection:
    dir: str = "runs/experiment"
    # wall-clock seconds make CSVs differ between runs, so they are opt-in
    record_wall_time: bool = False

    def validate(self) -> None:
        if not self.dir:
            raise ValueError("dir must not be empty")


# key -> value kind, per section, in file order
_SCHEMA: dict[str, dict[str, str]] = {
    "federated": {
        "total_clients": "int",
        "rounds": "int",
        "participants_per_round": "int",
        "local_epochs": "int",
        "batch_size": "int",
        "learning_rate": "float",
        "lr_decay": "float",
        "temperature": "float",
        "algorithm": "str",
        "fedprox_mu": "float",
        "seed": "int",
        "target_accuracy": "optfloat",
        "temperature_schedule": "schedule",
        "eval_temperature": "optfloat",
        "eval_fraction": "float",
        "track_entropy": "bool",
        "track_aggregation_delta": "bool",
    },
    "model": {"kind": "str", "hidden": "ints", "input_shape": "ints", "num_classes": "int"},
    "data": {f.name: "" for f in dataclasses.fields(DataSection)},
    "metrics": {f.name: "" for f in dataclasses.fields(MetricsSection)},
    "output": {"dir": "str", "record_wall_time": "bool"},
}
for _section, _cls in (("data", DataSection), ("metrics", MetricsSection)):
    for _f in dataclasses.fields(_cls):
        _SCHEMA[_section][_f.name] = {int: "int", float: "float", bool: "bool", str: "str"}[type(_f.default)]

_CHOICES = {
    ("federated", "algorithm"): ALGORITHMS,
    ("model", "kind"): KINDS,
    ("data", "source"): ("blobs", "idx", "csv"),
    ("data", "partition"): ("dirichlet", "shards", "iid"),
}


@dataclass
class ExperimentFile:
    federated: FLConfig = field(default_factory=FLConfig)
    model: ModelSection = field(default_factory=ModelSection)
    data: DataSection = field(default_factory=DataSection)
    metrics: MetricsSection = field(default_factory=MetricsSection)
    output: OutputSection = field(default_factory=OutputSection)
    # folder that relative data/output paths resolve against
    base_dir: Path = field(default_factory=Path.cwd, compare=False)
    # where each key was set, for error messages
    lines: dict = field(default_factory=dict, compare=False, repr=False)

    def section(self, name: str):
        return getattr(self, name)

    def validate(self, path=None) -> None:
        """Re-check every section; errors point at the line of the named key."""
        for name in _SCHEMA:
            try:
                self.section(name).validate()
            except ValueError as exc:
                raise ConfigError(str(exc), path, self._line_for(name, str(exc))) from None
        m = self.metrics
        if m.boundaries and self.model.kind != "logreg_2d":
            raise ConfigError("boundaries needs model kind logreg_2d", path, self.lines.get(("metrics", "boundaries"), 0))

    def _line_for(self, section: str, message: str) -> int:
        hits = [
            (message.find(key), line)
            for (sec, key), line in self.lines.items()
            if sec == section and key is not None and key in message
        ]
        return min(hits)[1] if hits else self.lines.get((section, None), 0)

    def to_dict(self) -> dict:
        """Plain ``{section: {key: value}}`` view; ``from_dict`` inverts it."""
        out = {}
        for name, keys in _SCHEMA.items():
            sec = self.section(name)
            out[name] = {}
            for key in keys:
                v = getattr(sec, key)
                if isinstance(v, tuple):
                    v = list(v)
                elif isinstance(v, dict):
                    v = {str(k): t for k, t in sorted(v.items())}
                out[name][key] = v
        return out

    @classmethod
    def from_dict(cls, d: dict, base_dir=None) -> "ExperimentFile":
        exp = cls()
        if base_dir is not None:
            exp.base_dir = Path(base_dir)
        for name, values in d.items():
            if name not in _SCHEMA:
                raise ConfigError(f"unknown section [{name}]")
            for key, v in values.items():
                if key not in _SCHEMA[name]:
                    raise ConfigError(f"unknown key {key!r} in [{name}]")
                kind = _SCHEMA[name][key]
                if kind == "ints":
                    v = tuple(int(x) for x in v)
                elif kind == "schedule":
                    v = {int(r): float(t) for r, t in v.items()}
                setattr(exp.section(name), key, v)
        exp.validate()
        return exp


# ---------------------------------------------------------------- parsing


def _strip_comment(line: str) -> str:
    for i, ch in enumerate(line):
        if ch == "#" and (i == 0 or line[i - 1].isspace()):
            return line[:i]
    return line


def _convert(kind: str, raw: str):
    if kind == "str":
        if len(raw) >= 2 and raw[0] == raw[-1] and raw[0] in "\"'":
            return raw[1:-1]
        return raw
    if kind == "int":
        if not raw.lstrip("+-").isdigit():
            raise ValueError(f"expected an integer, got {raw!r}")
        return int(raw)
    if kind == "float":
        return float(raw)
    if kind == "optfloat":
        return None if raw.lower() in ("", "none") else float(raw)
    if kind == "bool":
        low = raw.lower()
        if low in ("true", "yes", "on", "1"):
            return True
        if low in ("false", "no", "off", "0"):
            return False
        raise ValueError(f"expected true or false, got {raw!r}")
    if kind == "ints":
        parts = [p.strip() for p in raw.split(",") if p.strip()]
        return tuple(_convert("int", p) for p in parts)
    if kind == "schedule":
        out = {}
        for item in (p.strip() for p in raw.split(",")):
            if not item:
                continue
            r, sep, t = item.partition(":")
            if not sep:
                raise ValueError(f"schedule entries look like round:temperature, got {item!r}")
            out[_convert("int", r.strip())] = float(t)
        return out
    raise AssertionError(kind)


def parse_config_text(text: str, path=None, base_dir=None) -> ExperimentFile:
    exp = ExperimentFile()
    if base_dir is not None:
        exp.base_dir = Path(base_dir)
    section = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = _strip_comment(line).strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise ConfigError(f"malformed section header {line!r}", path, lineno)
            section = line[1:-1].strip()
            if section not in _SCHEMA:
                raise ConfigError(f"unknown section [{section}]", path, lineno)
            exp.lines.setdefault((section, None), lineno)
            continue
        key, sep, raw = line.partition("=")
        key, raw = key.strip(), raw.strip()
        if not sep or not key:
            raise ConfigError(f"expected 'key = value', got {line!r}", path, lineno)
        if section is None:
            raise ConfigError(f"key {key!r} appears before any [section] header", path, lineno)
        if key not in _SCHEMA[section]:
            raise ConfigError(f"unknown key {key!r} in [{section}]", path, lineno)
        if (section, key) in exp.lines:
            raise ConfigError(f"duplicate key {key!r} (first set on line {exp.lines[section, key]})", path, lineno)
        kind = _SCHEMA[section][key]
        try:
            value = _convert(kind, raw)
        except ValueError as exc:
            raise ConfigError(f"{key}: {exc}", path, lineno) from None
        choices = _CHOICES.get((section, key))
        if choices is not None and value not in choices:
            raise ConfigError(f"{key} must be one of {', '.join(choices)}; got {value!r}", path, lineno)
        setattr(exp.section(section), key, value)
        exp.lines[section, key] = lineno
    exp.validate(path)
    return exp


def parse_config(path) -> ExperimentFile:
    """Read and validate an experiment file."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config ({exc.strerror})", path) from exc
    return parse_config_text(text, path, base_dir=path.parent)


def _format_value(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        return ", ".join(str(x) for x in v)
    if isinstance(v, dict):
        return ", ".join(f"{r}:{t!r}" for r, t in sorted(v.items()))
    return str(v)


def format_config(exp: ExperimentFile) -> str:
    """Render ``exp`` as an experiment file that parses back to an equal object."""
    out = []
    for name, keys in _SCHEMA.items():
        out.append(f"[{name}]")
        sec = exp.section(name)
        for key in keys:
            out.append(f"{key} = {_format_value(getattr(sec, key))}")
        out.append("")
    return "\n".join(out)


def with_value(exp: ExperimentFile, key: str, value) -> ExperimentFile:
    """Copy of ``exp`` with one sweepable key replaced and re-validated."""
    if key not in SWEEPABLE:
        raise ConfigError(f"{key!r} is not sweepable; choose from {', '.join(SWEEPABLE)}")
    section, attr = SWEEPABLE[key]
    new = dataclasses.replace(
        exp, **{section: dataclasses.replace(exp.section(section), **{attr: value})}
    )
    new.federated.temperature_schedule = dict(exp.federated.temperature_schedule)
    new.validate()
    return new


def sweep_value(key: str, raw: str):
    """Parse one command-line sweep value with the key's type."""
    if key not in SWEEPABLE:
        raise ConfigError(f"{key!r} is not sweepable; choose from {', '.join(SWEEPABLE)}")
    section, attr = SWEEPABLE[key]
    try:
        return _convert(_SCHEMA[section][attr], raw.strip())
    except ValueError as exc:
        raise ConfigError(f"{key}: {exc}") from None


# ---------------------------------------------------------------- building


def _resolve(exp: ExperimentFile, p: str) -> Path:
    path = Path(p).expanduser()
    return path if path.is_absolute() else exp.base_dir / path


def _limit(ds: Dataset, n: int, seed: int, name: str) -> Dataset:
    if n == 0 or n >= len(ds):
        return ds
    keep = np.sort(stream(seed, name).permutation(len(ds))[:n])
    return ds.subset(keep)


def build_data(exp: ExperimentFile) -> tuple[Dataset, Dataset]:
    """Training and test sets for the experiment's seed."""
    d, seed = exp.data, exp.federated.seed
    if d.source == "blobs":
        kw = dict(dim=d.dim, spread=d.spread, seed=seed, center_seed=d.center_seed, radius=d.radius)
        train = gen_gaussian_blobs(d.num_classes, d.per_class, split="train", **kw)
        test = gen_gaussian_blobs(d.num_classes, d.test_per_class, split="test", **kw)
    elif d.source == "idx":
        train = load_idx(_resolve(exp, d.train_images), _resolve(exp, d.train_labels))
        test = load_idx(_resolve(exp, d.test_images), _resolve(exp, d.test_labels))
        classes = max(train.num_classes, test.num_classes)
        train = Dataset(train.features, train.labels, classes)
        test = Dataset(test.features, test.labels, classes)
    else:
        classes = exp.model.num_classes or d.num_classes
        train = load_csv(_resolve(exp, d.train_csv), classes)
        test = load_csv(_resolve(exp, d.test_csv), classes)
    train = _limit(train, d.limit_train, seed, "limit-train")
    test = _limit(test, d.limit_test, seed, "limit-test")
    if train.features.shape[1:] != test.features.shape[1:]:
        raise ValueError(f"train samples have shape {train.features.shape[1:]}, test {test.features.shape[1:]}")
    return train, test


def build_partition(exp: ExperimentFile, train: Dataset):
    d, cfg = exp.data, exp.federated
    if d.partition == "dirichlet":
        return partition_dirichlet(train, cfg.total_clients, d.alpha, cfg.seed)
    if d.partition == "shards":
        size = d.shard_size or len(train) // (cfg.total_clients * d.shards_per_client)
        if size < 1:
            raise ConfigError(f"not enough samples ({len(train)}) for {cfg.total_clients} clients")
        return partition_shards(train, cfg.total_clients, size, d.shards_per_client, cfg.seed)
    return partition_iid(train, cfg.total_clients, cfg.seed)


def build_model_spec(exp: ExperimentFile, train: Dataset) -> ModelSpec:
    m = exp.model
    shape = m.input_shape or tuple(train.features.shape[1:])
    classes = m.num_classes or train.num_classes
    try:
        return ModelSpec(m.kind, shape, classes, m.hidden)
    except ValueError as exc:
        raise ConfigError(str(exc), None, exp.lines.get(("model", "kind"), 0)) from None


# ---------------------------------------------------------------- running


def _fmt(v: float) -> str:
    return f"{v:.6g}"


def _csv_row(rec: RoundRecord, wall: bool) -> list[str]:
    return [
        str(rec.round),
        _fmt(rec.global_test_accuracy),
        _fmt(rec.global_test_loss),
        _fmt(rec.pre_post_acc_delta_participants),
        _fmt(rec.pre_post_acc_delta_nonparticipants),
        _fmt(rec.entropy_pre_agg),
        _fmt(rec.entropy_post_agg),
        _fmt(rec.wall_time_s if wall else 0.0),
    ]


def _boundary_rows(round_idx: int, name: str, params) -> list[list[str]]:
    W = params["linear.weight"].data
    b = params["linear.bias"].data
    rows = []
    for i in range(len(W)):
        for j in range(i + 1, len(W)):
            rows.append([str(round_idx), name, str(i), str(j), *(_fmt(w) for w in W[i] - W[j]), _fmt(b[i] - b[j])])
    return rows


@dataclass
class RunResult:
    out_dir: Path
    records: list[RoundRecord]
    summary: dict


def run_experiment(exp: ExperimentFile, out_dir=None) -> RunResult:
    """Run one experiment and write its files into ``out_dir``.

    Files: ``rounds.csv`` (one flushed row per round), ``summary.json``,
    ``config.ini`` (an echo that parses back to the same experiment), plus
    whichever [metrics] dumps are enabled.
    """
    exp.validate()
    out = Path(out_dir) if out_dir is not None else _resolve(exp, exp.output.dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg = dataclasses.replace(exp.federated)
    train, test = build_data(exp)
    partition = build_partition(exp, train)
    cfg.model = build_model_spec(exp, train)
    model = build_model(cfg.model, cfg.seed)
    (out / "config.ini").write_text(format_config(exp))

    files = ["rounds.csv", "summary.json", "config.ini"]
    last_state: list[RoundState] = []
    boundary_fh = boundary_writer = None
    if exp.metrics.boundaries:
        boundary_fh = (out / "boundaries.csv").open("w", newline="")
        boundary_writer = csv.writer(boundary_fh, lineterminator="\n")
        dims = cfg.model.input_shape[0]
        boundary_writer.writerow(["round", "model", "class_a", "class_b", *(f"w{i}" for i in range(dims)), "bias"])
        boundary_writer.writerows(_boundary_rows(0, "global", model.params))
        files.append("boundaries.csv")

    try:
        with (out / "rounds.csv").open("w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(CSV_HEADER)
            fh.flush()

            def on_round(state: RoundState):
                writer.writerow(_csv_row(state.record, exp.output.record_wall_time))
                fh.flush()
                last_state[:] = [state]
                if boundary_writer is not None:
                    for k in sorted(state.local_models):
                        boundary_writer.writerows(_boundary_rows(state.round, f"client{k}", state.local_models[k].params))
                    boundary_writer.writerows(_boundary_rows(state.round, "global", state.global_model.params))
                    boundary_fh.flush()

            records, final = run_federated(cfg, train, partition, test, model=model, callback=on_round)
    finally:
        if boundary_fh is not None:
            boundary_fh.close()

    T_final = cfg.temperature_at(max(cfg.rounds, 1))
    T_eval = cfg.eval_temperature or T_final
    acc, loss = analysis.evaluate(final, test, T_eval)
    summary = {
        "seed": cfg.seed,
        "rounds": cfg.rounds,
        "final_accuracy": acc,
        "final_loss": loss,
        "model": {"kind": cfg.model.kind, "input_shape": list(cfg.model.input_shape), "num_classes": cfg.model.num_classes},
        "num_train": len(train),
        "num_test": len(test),
        "client_sizes": partition.sizes().tolist(),
    }
    if cfg.target_accuracy is not None:
        summary["rounds_to_target"] = analysis.rounds_to_target(records, cfg.target_accuracy)

    m = exp.metrics
    if m.gradient_norms:
        ok, bad = analysis.input_gradient_norms(final, test, T_final)
        top = max([float(x.max()) for x in (ok, bad) if x.size] + [1e-12])
        edges = np.linspace(0.0, top, m.gradient_bins + 1)
        c_ok, _ = np.histogram(ok, edges)
        c_bad, _ = np.histogram(bad, edges)
        _write_csv(
            out / "gradient_norms.csv",
            ["bin_lo", "bin_hi", "correct", "incorrect"],
            [[_fmt(edges[i]), _fmt(edges[i + 1]), str(c_ok[i]), str(c_bad[i])] for i in range(m.gradient_bins)],
        )
        files.append("gradient_norms.csv")
    if m.calibration:
        rep = analysis.calibration(final, test, T_eval, m.calibration_bins)
        _write_csv(
            out / "calibration.csv",
            ["bin_lo", "bin_hi", "count", "confidence", "accuracy"],
            [
                [_fmt(rep.edges[i]), _fmt(rep.edges[i + 1]), str(rep.counts[i]), _fmt(rep.confidence[i]), _fmt(rep.accuracy[i])]
                for i in range(len(rep.counts))
            ],
        )
        summary["ece"] = rep.ece
        files.append("calibration.csv")
    if m.cka and last_state:
        state = last_state[0]
        names = ["global", *(f"client{k}" for k in sorted(state.local_models))]
        models = [state.global_model, *(state.local_models[k] for k in sorted(state.local_models))]
        probe = test.features[: m.cka_probe]
        _write_csv(out / "cka.csv", ["layer", "model_a", "model_b", "cka"], _cka_rows(models, names, probe))
        files.append("cka.csv")
    if m.checkpoint:
        save_params(final.params, out / "model.fxch")
        files.append("model.fxch")

    summary["files"] = files
    summary["config"] = exp.to_dict()
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return RunResult(out, records, summary)


def _write_csv(path: Path, header, rows) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _cka_rows(models, names, probe) -> list[list[str]]:
    blocks = range(1, models[0].num_blocks + 1)
    feats = [m.features(probe, blocks) for m in models]
    rows = []
    for layer in blocks:
        for i in range(len(models)):
            for j in range(i, len(models)):
                try:
                    v = analysis.linear_cka(feats[i][layer], feats[j][layer])
                except analysis.UndefinedSimilarityError:
                    v = math.nan
                rows.append([str(layer), names[i], names[j], _fmt(v)])
    return rows


# ---------------------------------------------------------------- sweeps


def _value_label(v) -> str:
    return _format_value(v).replace(", ", "_")


def run_grid(exp: ExperimentFile, grid, out_dir, jobs: int = 1) -> list[dict]:
    """Run every combination of ``grid = [(key, values), ...]``.

    Each run lands in ``out_dir/key=value[/key=value...]``; ``manifest.json``
    lists all runs with their final accuracy.
    """
    out_dir = Path(out_dir)
    combos = [((), exp)]
    for key, values in grid:
        values = list(values)
        if not values:
            raise ConfigError(f"sweep over {key!r} needs at least one value")
        combos = [
            (path + ((key, v),), with_value(e, key, v)) for path, e in combos for v in values
        ]

    def one(item):
        path, e = item
        sub = out_dir.joinpath(*(f"{k}={_value_label(v)}" for k, v in path))
        res = run_experiment(e, sub)
        return {
            "dir": str(sub.relative_to(out_dir)) if path else ".",
            "values": {k: v for k, v in path},
            "final_accuracy": res.summary["final_accuracy"],
            "final_loss": res.summary["final_loss"],
            "rounds_to_target": res.summary.get("rounds_to_target"),
        }

    out_dir.mkdir(parents=True, exist_ok=True)
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            runs = list(pool.map(one, combos))
    else:
        runs = [one(c) for c in combos]
    manifest = {"grid": [{"key": k, "values": list(v)} for k, v in grid], "runs": runs}
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return runs


def sweep(exp: ExperimentFile, key: str, values, out_dir, jobs: int = 1) -> list[dict]:
    """One run per value of a sweepable key, each in its own subdirectory."""
    if key not in SWEEPABLE:
        raise ConfigError(f"{key!r} is not sweepable; choose from {', '.join(SWEEPABLE)}")
    return run_grid(exp, [(key, values)], out_dir, jobs)


# ---------------------------------------------------------------- presets


IDX_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}


def synthetic_noniid(alpha: float = 0.1, temperature: float = 1.0, seed: int = 0) -> ExperimentFile:
    """10 clients on 10-class Gaussian blobs (dim 20), Dirichlet label skew, MLP 20-64-10."""
    return ExperimentFile(
        federated=FLConfig(
            total_clients=10,
            rounds=100,
            participants_per_round=10,
            local_epochs=10,
            batch_size=32,
            learning_rate=0.0005,
            temperature=temperature,
            seed=seed,
        ),
        model=ModelSection(kind="mlp", hidden=(64,)),
        data=DataSection(
            source="blobs", num_classes=10, per_class=200, test_per_class=500, dim=20, spread=2.0,
            partition="dirichlet", alpha=alpha,
        ),
        output=OutputSection(dir="runs/synthetic-noniid"),
    )


def toy2d(temperature: float = 1.0, seed: int = 0) -> ExperimentFile:
    """Three clients, 2-D three-class blobs split by label shards, multinomial logistic regression.

    Full-batch local training for 10 epochs gives 10 local updates per round.
    """
    return ExperimentFile(
        federated=FLConfig(
            total_clients=3,
            rounds=20,
            participants_per_round=3,
            local_epochs=10,
            batch_size=1000,
            learning_rate=0.1,
            lr_decay=0.0,
            temperature=temperature,
            seed=seed,
        ),
        model=ModelSection(kind="logreg_2d", hidden=()),
        data=DataSection(
            source="blobs", num_classes=3, per_class=100, test_per_class=100, dim=2, spread=0.8,
            partition="shards", shard_size=50, shards_per_client=2,
        ),
        metrics=MetricsSection(boundaries=True),
        output=OutputSection(dir="runs/toy2d"),
    )


def mnist_idx(idx_dir, temperature: float = 1.0, seed: int = 0) -> ExperimentFile:
    """MLP on user-supplied MNIST-format IDX files, label-shard partition over 10 clients."""
    idx_dir = Path(idx_dir)
    return ExperimentFile(
        federated=FLConfig(
            total_clients=10,
            rounds=50,
            participants_per_round=10,
            local_epochs=1,
            batch_size=32,
            learning_rate=0.01,
            temperature=temperature,
            seed=seed,
        ),
        model=ModelSection(kind="mlp", hidden=(200,)),
        data=DataSection(
            source="idx", partition="shards", shards_per_client=2, limit_train=6000, limit_test=2000,
            **{k: str(idx_dir / v) for k, v in IDX_FILES.items()},
        ),
        output=OutputSection(dir="runs/mnist-idx"),
    )


PRESETS = {
    "toy2d": [("temperature", [1.0, 0.5])],
    "synthetic-noniid": [("alpha", [0.1, 0.5, 1.0]), ("temperature", [0.25, 1.0, 4.0])],
    "mnist-idx": [("temperature", [1.0, 0.25])],
}


def preset(name: str, *, seed: int = 0, idx_dir=None) -> tuple[ExperimentFile, list]:
    """Base experiment and sweep grid of a shipped preset."""
    if name == "toy2d":
        exp = toy2d(seed=seed)
    elif name == "synthetic-noniid":
        exp = synthetic_noniid(seed=seed)
    elif name == "mnist-idx":
        if idx_dir is None:
            raise ConfigError(
                "preset mnist-idx needs --idx-dir pointing at " + ", ".join(IDX_FILES.values())
            )
        exp = mnist_idx(idx_dir, seed=seed)
    else:
        raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    exp.validate()
    return exp, PRESETS[name]


def run_preset(name: str, out_dir, *, seed: int = 0, idx_dir=None, jobs: int = 1) -> list[dict]:
    exp, grid = preset(name, seed=seed, idx_dir=idx_dir)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "preset.ini").write_text(format_config(exp))
    return run_grid(exp, grid, out_dir, jobs)


def default_jobs() -> int:
    return max(1, int(os.environ.get("FLEXCHILL_JOBS", "1") or 1))
