"""Experiment configuration, seeded trials and sweeps, JSON/CSV reports."""

import csv
import dataclasses
import hashlib
import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import attack, data, metrics, models
from .flsim import BatchDistribution, Dataset, DefenseSpec, apply_defense, client_step, sample_batch


class ConfigError(ValueError):
    pass


class TrialError(RuntimeError):
    pass


AXES = ("batch_size", "distribution", "layer", "prune_ratio", "noise_sigma", "estimator", "init")
CSV_COLUMNS = ("axis_value", "trial", "seed", "ins_acc", "cls_acc", "ill_conditioned")


def hash64(*parts):
    """Stable 64-bit seed from integers (blake2b of their little-endian encoding)."""
    payload = b"".join(struct.pack("<q", int(p)) for p in parts)
    return int.from_bytes(hashlib.blake2b(payload, digest_size=8).digest(), "little") >> 1


# salts for the per-trial sub-streams
_MODEL, _BATCH, _DEFENSE, _ESTIMATE, _DUMMY = range(5)
_SPLIT = 0x5EED


@dataclass
class ExperimentConfig:
    model: dict
    dataset: dict
    batch_size: int = 64
    distribution: str = "random"
    shared_layer: Optional[int] = None  # None: penultimate layer
    estimator: str = "auxiliary"
    aux_samples: int = attack.DEFAULT_AUX_SAMPLES
    holdout: int = 1000
    init: str = models.POSITIVE_UNIFORM
    defense: str = "none"
    repetitions: int = 20
    seed: int = 0
    fresh_model: bool = True

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        missing = {"model", "dataset"} - set(d)
        if missing:
            raise ConfigError(f"missing config keys: {sorted(missing)}")
        cfg = cls(**d)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as f:
            return cls.from_dict(json.load(f))

    def to_dict(self):
        return dataclasses.asdict(self)

    def model_spec(self):
        try:
            return models.ModelSpec.from_dict(self.model)
        except (KeyError, TypeError) as e:
            raise ConfigError(f"bad model spec: {e}") from e

    def layer_index(self, model):
        return model.penultimate_index if self.shared_layer is None else self.shared_layer

    def validate(self):
        spec = self.model_spec()
        shapes, bottom_start = spec.layer_shapes()
        if self.repetitions < 1:
            raise ConfigError("repetitions must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.shared_layer is not None and not bottom_start <= self.shared_layer < len(shapes) - 1:
            raise ConfigError(
                f"shared_layer {self.shared_layer} outside bottom stack {bottom_start}..{len(shapes) - 2}"
            )
        if self.estimator not in ("auxiliary", "dummy"):
            raise ConfigError(f"estimator must be 'auxiliary' or 'dummy', got {self.estimator!r}")
        if self.init not in models.INIT_SCHEMES:
            raise ConfigError(f"unknown init {self.init!r}")
        if self.aux_samples < 1 or self.holdout < 0:
            raise ConfigError("aux_samples must be >= 1 and holdout >= 0")
        BatchDistribution.parse(self.distribution)
        DefenseSpec.parse(self.defense)
        src = set(self.dataset)
        if len(src) != 1 or not src <= {"synthetic", "idx", "npz"}:
            raise ConfigError("dataset must have exactly one of 'synthetic', 'idx', 'npz'")
        return self


def with_axis(config, axis, value):
    """Copy of ``config`` with one swept field replaced."""
    if axis not in AXES:
        raise ConfigError(f"unknown sweep axis {axis!r}; choose from {', '.join(AXES)}")
    if axis == "batch_size":
        changes = {"batch_size": int(value)}
    elif axis == "distribution":
        changes = {"distribution": str(value)}
    elif axis == "layer":
        changes = {"shared_layer": int(value)}
    elif axis == "prune_ratio":
        changes = {"defense": f"prune:{float(value):g}"}
    elif axis == "noise_sigma":
        changes = {"defense": f"noise:{float(value):g}"}
    elif axis == "estimator":
        changes = {"estimator": str(value)}
    else:
        changes = {"init": str(value)}
    return dataclasses.replace(config, **changes).validate()


# --- data --------------------------------------------------------------------

def load_dataset(source):
    if "synthetic" in source:
        s = dict(source["synthetic"])
        return data.gen_synthetic_dataset(
            s["n_classes"], s["per_class_count"], s["input_shape"], s.get("separation", 3.0),
            s.get("seed", 0),
        )
    if "idx" in source:
        s = source["idx"]
        return data.load_idx_dataset(s["images"], s["labels"], n_classes=s.get("n_classes"))
    s = source["npz"]
    with np.load(s["path"] if isinstance(s, dict) else s) as f:
        return Dataset(f["inputs"], f["labels"], int(f["n_classes"]))


@dataclass
class Prepared:
    """Victim pool and auxiliary pool, split once per configuration."""

    train: Dataset
    aux: Dataset


def prepare(config):
    ds = load_dataset(config.dataset)
    if config.holdout == 0:
        return Prepared(ds, ds)
    if config.holdout >= len(ds):
        raise ConfigError(f"holdout {config.holdout} leaves no victim samples ({len(ds)} total)")
    perm = np.random.default_rng(hash64(config.seed, _SPLIT)).permutation(len(ds))
    return Prepared(ds.subset(np.sort(perm[config.holdout:])), ds.subset(np.sort(perm[:config.holdout])))


# --- reports -------------------------------------------------------------------

@dataclass
class TrialReport:
    trial: int
    seed: int
    axis_value: object
    true_counts: list
    raw: list
    counts: list
    ins_acc: float
    cls_acc: float
    ill_conditioned: bool
    replaced_zeros: int

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class SweepRow:
    axis_value: object
    trials: list
    ins_acc_mean: float = 0.0
    ins_acc_std: float = 0.0
    cls_acc_mean: float = 0.0
    cls_acc_std: float = 0.0

    def __post_init__(self):
        ins = np.array([t.ins_acc for t in self.trials])
        cls = np.array([t.cls_acc for t in self.trials])
        self.ins_acc_mean, self.ins_acc_std = float(ins.mean()), float(ins.std())
        self.cls_acc_mean, self.cls_acc_std = float(cls.mean()), float(cls.std())

    def to_dict(self):
        return {
            "axis_value": self.axis_value,
            "ins_acc_mean": self.ins_acc_mean,
            "ins_acc_std": self.ins_acc_std,
            "cls_acc_mean": self.cls_acc_mean,
            "cls_acc_std": self.cls_acc_std,
            "trials": [t.to_dict() for t in self.trials],
        }


@dataclass
class SweepReport:
    config: dict
    axis: Optional[str]
    rows: list = field(default_factory=list)

    def to_dict(self):
        return {"config": self.config, "axis": self.axis, "rows": [r.to_dict() for r in self.rows]}

    @classmethod
    def from_dict(cls, d):
        rows = [
            SweepRow(r["axis_value"], [TrialReport.from_dict(t) for t in r["trials"]])
            for r in d["rows"]
        ]
        return cls(config=d["config"], axis=d["axis"], rows=rows)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for row in self.rows:
            for t in row.trials:
                w.writerow([row.axis_value, t.trial, t.seed, repr(t.ins_acc), repr(t.cls_acc),
                            int(t.ill_conditioned)])
        return buf.getvalue()

    def write(self, out_dir, stem="report"):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"{stem}.json").write_text(self.to_json(), encoding="utf-8")
        (out / f"{stem}.csv").write_text(self.to_csv(), encoding="utf-8")
        return out / f"{stem}.json", out / f"{stem}.csv"


# --- execution -----------------------------------------------------------------

def _estimates(config, model, prepared, layer, seed):
    if config.estimator == "dummy":
        dummy = attack.make_dummy_data(prepared.train.input_shape, config.aux_samples,
                                       hash64(seed, _DUMMY))
        return attack.estimate(model, dummy, layer, config.aux_samples, source="dummy")
    aux = prepared.aux
    return attack.estimate(model, aux.inputs, layer, config.aux_samples, labels=aux.labels,
                           seed=hash64(seed, _ESTIMATE))


def run_trial(config, trial_seed, prepared=None, trial=0, axis_value=None):
    """One FL round (sample, local step, defense) followed by one attack."""
    prepared = prepared or prepare(config)
    try:
        spec = config.model_spec()
        model_seed = hash64(trial_seed, _MODEL) if config.fresh_model else hash64(config.seed, _MODEL)
        model = models.build_model(spec, config.init, seed=model_seed)
        layer = config.layer_index(model)
        x, y, true_counts = sample_batch(
            prepared.train, BatchDistribution.parse(config.distribution), config.batch_size,
            hash64(trial_seed, _BATCH),
        )
        share = client_step(model, x, y, layer)
        share = apply_defense(share, DefenseSpec.parse(config.defense), hash64(trial_seed, _DEFENSE))
        est = _estimates(config, model, prepared, layer, trial_seed)
        recovered, bridge = attack.run_attack(model, share, est)
        score = metrics.score(recovered.counts, true_counts)
    except (ValueError, IndexError) as e:
        raise TrialError(f"trial {trial} (seed {trial_seed}): {e}") from e
    return TrialReport(
        trial=trial,
        seed=trial_seed,
        axis_value=axis_value,
        true_counts=[int(c) for c in true_counts],
        raw=[float(v) for v in recovered.raw],
        counts=[int(c) for c in recovered.counts],
        ins_acc=score.ins_acc,
        cls_acc=score.cls_acc,
        ill_conditioned=bool(bridge.ill_conditioned),
        replaced_zeros=est.replaced_zeros,
    )


def _run_row(config, axis_index, axis_value, prepared):
    trials = [
        run_trial(config, hash64(config.seed, axis_index, i), prepared, trial=i, axis_value=axis_value)
        for i in range(config.repetitions)
    ]
    return SweepRow(axis_value, trials)


def run(config):
    """R trials of a single configuration."""
    report = SweepReport(config=config.to_dict(), axis=None)
    report.rows.append(_run_row(config, 0, None, prepare(config)))
    return report


def run_sweep(config, axis, values):
    if not values:
        raise ConfigError("sweep needs at least one value")
    configs = [with_axis(config, axis, v) for v in values]
    prepared = prepare(config)
    report = SweepReport(config=config.to_dict(), axis=axis)
    for j, (cfg, v) in enumerate(zip(configs, values)):
        report.rows.append(_run_row(cfg, j, v, prepared))
    return report


def parse_axis_values(axis, text):
    items = [v.strip() for v in text.split(",") if v.strip()]
    if axis in ("batch_size", "layer"):
        return [int(v) for v in items]
    if axis in ("prune_ratio", "noise_sigma"):
        return [float(v) for v in items]
    return items
