"""Experiment orchestration: config files, run directories, metrics emission.

Config files are INI text with four sections (``experiment``, ``dataset``,
``partition``, ``model``); every key is typed and unknown keys are rejected
by name.  A run writes into ``<out>/<run_id>/``:

* ``config.ini``   - byte-exact snapshot of the effective config
* ``manifest.json``- run_id, config hash, code version, status, timestamps
* ``metrics.csv``  - one row per round (stable, documented header)
* ``diagnostics.jsonl`` - per-round solver and bound reports
* ``checkpoint.bin``    - final model (little-endian, length-prefixed float64)

``run_id`` is derived from the config hash and seed only, so identical
(config, seed) runs emit byte-identical metrics apart from wall_time.
"""

import configparser
import csv
import hashlib
import io
import json
import os
import struct
from datetime import datetime, timezone

import numpy as np

from . import data as data_mod
from . import diagnostics, federation, models
from .errors import ConfigError, ContractError

CODE_VERSION = "fedagg-0.1.0"
ENV_DATA_ROOT = "FEDAGG_DATA_ROOT"

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}

METRICS_HEADER = ["run_id", "round", "algorithm", "dataset", "distribution",
                  "accuracy", "loss", "solver_sweeps", "clamp_events",
                  "drift_ok", "wall_time"]

CHECKPOINT_MAGIC = b"FGCK"
_KIND_CODES = {models.LINEAR_SOFTMAX: 0, models.MLP_1HIDDEN: 1}
_KIND_NAMES = {v: k for k, v in _KIND_CODES.items()}

# (section, key) -> (dataclass path, type); bool uses configparser truthy forms.
_SCHEMA = {
    "experiment": {
        "algorithm": str, "clients": int, "participation_ratio": float,
        "rounds": int, "local_epochs": int, "steps_per_epoch": int,
        "base_lr": float, "batch_size": int, "seed": int, "alpha": float,
        "epsilon": float, "max_sweeps": int, "fedagg_update_rule": str,
        "eta_min": float, "eta_max": float, "mu": float, "server_lr": float,
        "beta1": float, "beta2": float, "tau": float, "workers": int,
    },
    "dataset": {
        "kind": str, "root": str, "num_classes": int, "input_dim": int,
        "samples_per_class": int, "test_samples_per_class": int,
        "class_separation": float,
    },
    "partition": {
        "scheme": str, "sigma": float, "shards": int, "shard_size": int,
        "shards_per_client": int, "equal_size": bool,
    },
    "model": {"kind": str, "hidden_dim": int},
}


def parse_config(path):
    """Parse and validate an experiment config file, applying defaults."""
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise OSError(f"config file not found: {path}")
    config = federation.ExperimentConfig()
    targets = {"experiment": config, "dataset": config.dataset,
               "partition": config.partition, "model": config.model}
    for section in parser.sections():
        if section not in _SCHEMA:
            raise ConfigError(f"unknown config section [{section}]")
        for key, value in parser.items(section):
            if key not in _SCHEMA[section]:
                raise ConfigError(f"unknown config key [{section}] {key}")
            typ = _SCHEMA[section][key]
            try:
                if typ is bool:
                    parsed = parser.getboolean(section, key)
                else:
                    parsed = typ(value)
            except ValueError as err:
                raise ConfigError(f"bad value for [{section}] {key}: {value!r}") from err
            setattr(targets[section], key, parsed)
    config.validate()
    return config


def serialize_config(config):
    """Render a config back to INI text; parse(serialize(c)) == c."""
    parser = configparser.ConfigParser()
    sources = {"experiment": config, "dataset": config.dataset,
               "partition": config.partition, "model": config.model}
    for section, keys in _SCHEMA.items():
        parser[section] = {}
        for key, typ in keys.items():
            value = getattr(sources[section], key)
            if typ is float:
                parser[section][key] = repr(float(value))
            elif typ is bool:
                parser[section][key] = "true" if value else "false"
            else:
                parser[section][key] = str(value)
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def config_hash(config):
    return hashlib.sha256(serialize_config(config).encode()).hexdigest()


def dataset_root(config):
    return os.environ.get(ENV_DATA_ROOT) or config.dataset.root or "."


def load_datasets(config):
    """Materialize (train, test) datasets for a config."""
    if config.dataset.kind == "mnist":
        root = dataset_root(config)
        train = data_mod.load_idx(os.path.join(root, MNIST_FILES["train"][0]),
                                  os.path.join(root, MNIST_FILES["train"][1]))
        test = data_mod.load_idx(os.path.join(root, MNIST_FILES["test"][0]),
                                 os.path.join(root, MNIST_FILES["test"][1]))
        return train, test
    ds = config.dataset
    train = data_mod.synth_generate(ds.num_classes, ds.input_dim,
                                    ds.samples_per_class, ds.class_separation,
                                    seed=config.seed)
    test = data_mod.synth_generate(ds.num_classes, ds.input_dim,
                                   ds.test_samples_per_class, ds.class_separation,
                                   seed=config.seed + 1000003)
    return train, test


def save_checkpoint(path, spec, w):
    """Little-endian checkpoint: magic, version, ModelSpec header, f64 payload."""
    w = np.asarray(w, dtype=np.float64)
    if w.shape != (spec.param_count,):
        raise ContractError("checkpoint parameters do not match the model spec")
    header = struct.pack("<4sIIIIIQ", CHECKPOINT_MAGIC, 1, _KIND_CODES[spec.kind],
                         spec.input_dim, spec.num_classes, spec.hidden_dim,
                         spec.param_count)
    with open(path, "wb") as f:
        f.write(header)
        f.write(w.astype("<f8").tobytes())


def load_checkpoint(path):
    with open(path, "rb") as f:
        header = f.read(struct.calcsize("<4sIIIIIQ"))
        magic, version, kind, input_dim, num_classes, hidden, count = \
            struct.unpack("<4sIIIIIQ", header)
        if magic != CHECKPOINT_MAGIC or version != 1:
            raise ConfigError(f"not a model checkpoint: {path}")
        payload = f.read(8 * count)
        if len(payload) != 8 * count:
            raise OSError(f"truncated checkpoint: {path}")
    spec = models.ModelSpec(_KIND_NAMES[kind], input_dim, num_classes,
                            hidden_dim=hidden)
    w = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    if w.shape[0] != spec.param_count:
        raise ConfigError(f"checkpoint length {w.shape[0]} != spec {spec.param_count}")
    return spec, w


def _now():
    return datetime.now(timezone.utc).isoformat()


def _write_manifest(run_dir, manifest):
    with open(os.path.join(run_dir, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")


def _metrics_row(run_id, config, partition_tag, record):
    sweeps = record.solver_report.sweeps if record.solver_report else 0
    clamps = record.solver_report.clamp_events if record.solver_report else 0
    drift_ok = record.bound_report.drift_ok if record.bound_report else True
    return [run_id, record.round, config.algorithm, config.dataset.kind,
            partition_tag, f"{record.test_accuracy:.6f}",
            f"{record.global_loss:.10g}", sweeps, clamps, int(drift_ok),
            f"{record.wall_time:.3f}"]


def write_outputs(run_dir, run_id, config, partition_tag, records, spec, final_w):
    with open(os.path.join(run_dir, "metrics.csv"), "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(METRICS_HEADER)
        for record in records:
            writer.writerow(_metrics_row(run_id, config, partition_tag, record))
    with open(os.path.join(run_dir, "diagnostics.jsonl"), "w") as f:
        for record in records:
            entry = {
                "round": record.round,
                "selected_clients": record.selected_clients,
                "test_accuracy": record.test_accuracy,
                "test_loss": record.test_loss,
                "global_loss": record.global_loss,
                "solver": record.solver_report.to_dict() if record.solver_report else None,
                "bounds": record.bound_report.to_dict() if record.bound_report else None,
            }
            f.write(json.dumps(entry, sort_keys=True) + "\n")
    save_checkpoint(os.path.join(run_dir, "checkpoint.bin"), spec, final_w)


def run(config_path, out_dir, seed_override=None, workers_override=None):
    """Execute one experiment; returns (exit_code, run_dir or None)."""
    config = parse_config(config_path)
    if seed_override is not None:
        config.seed = int(seed_override)
    if workers_override is not None:
        config.workers = int(workers_override)
    digest = config_hash(config)
    run_id = f"{config.algorithm}-{config.seed}-{digest[:12]}"
    run_dir = os.path.join(out_dir, run_id)
    if os.path.exists(run_dir):
        raise FileExistsError(f"run directory already exists: {run_dir}")
    os.makedirs(run_dir)
    with open(os.path.join(run_dir, "config.ini"), "w") as f:
        f.write(serialize_config(config))
    manifest = {
        "run_id": run_id,
        "config_sha256": digest,
        "code_version": CODE_VERSION,
        "seed": config.seed,
        "start_time": _now(),
        "end_time": None,
        "status": "running",
        "algorithm": config.algorithm,
        "dataset": config.dataset.kind,
    }
    _write_manifest(run_dir, manifest)
    train, test = load_datasets(config)
    partition_tag = federation.build_partition(config, train).tag()
    manifest["distribution"] = partition_tag
    try:
        records, spec, final_w = federation.run_experiment_detailed(config, train, test)
    except Exception as err:
        manifest["status"] = f"aborted({type(err).__name__})"
        manifest["end_time"] = _now()
        _write_manifest(run_dir, manifest)
        partial = getattr(err, "records", None)
        if partial:
            spec = federation.build_model_spec(config, train)
            write_outputs(run_dir, run_id, config, partition_tag, partial, spec,
                          models.init_params(spec, config.seed))
        raise
    write_outputs(run_dir, run_id, config, partition_tag, records, spec, final_w)
    manifest["status"] = "completed"
    manifest["end_time"] = _now()
    manifest["final_accuracy"] = records[-1].test_accuracy if records else None
    _write_manifest(run_dir, manifest)
    return run_dir


def read_metrics(run_dir):
    """Metrics rows as dicts, parsed strictly by header names."""
    with open(os.path.join(run_dir, "metrics.csv"), newline="") as f:
        reader = csv.DictReader(f)
        return list(reader)


def read_manifest(run_dir):
    with open(os.path.join(run_dir, "manifest.json")) as f:
        return json.load(f)


def compare(run_dirs, out_dir):
    """Align per-round series of completed runs; returns the summary rows.

    Refuses to compare runs with mismatched dataset or distribution tags.
    """
    if not run_dirs:
        raise ConfigError("no runs to compare")
    loaded = []
    for run_dir in run_dirs:
        manifest = read_manifest(run_dir)
        if manifest.get("status") != "completed":
            raise ConfigError(f"run {manifest.get('run_id')} is not completed")
        loaded.append((manifest, read_metrics(run_dir)))
    tags = {(m["dataset"], m["distribution"]) for m, _ in loaded}
    if len(tags) > 1:
        raise ConfigError(f"runs span different dataset/distribution tags: {sorted(tags)}")
    os.makedirs(out_dir, exist_ok=True)
    labels = [f"{m['algorithm']}-{m['run_id']}" for m, _ in loaded]
    rounds = sorted({int(r["round"]) for _, rows in loaded for r in rows})
    by_round = []
    for _, rows in loaded:
        by_round.append({int(r["round"]): r for r in rows})
    with open(os.path.join(out_dir, "series.csv"), "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["round"] + [f"accuracy:{lab}" for lab in labels]
                        + [f"loss:{lab}" for lab in labels])
        for t in rounds:
            row = [t]
            row += [by_round[i].get(t, {}).get("accuracy", "") for i in range(len(loaded))]
            row += [by_round[i].get(t, {}).get("loss", "") for i in range(len(loaded))]
            writer.writerow(row)
    summary = []
    base_final = None
    for (manifest, rows), label in zip(loaded, labels):
        final = float(rows[-1]["accuracy"]) if rows else float("nan")
        if base_final is None:
            base_final = final
        summary.append({
            "run_id": manifest["run_id"], "algorithm": manifest["algorithm"],
            "final_accuracy": final, "delta_vs_first": final - base_final,
        })
    with open(os.path.join(out_dir, "summary.csv"), "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(summary[0].keys()))
        writer.writeheader()
        writer.writerows(summary)
    return summary


def inspect_partition(config_path, heatmap_path=None):
    """Partition report: sizes, label histograms, heterogeneity; heat-map file."""
    config = parse_config(config_path)
    train, _ = load_datasets(config)
    partition = federation.build_partition(config, train)
    data_mod.validate_partition(partition, train)
    hist = data_mod.label_histograms(partition, train)
    report = data_mod.heterogeneity(partition, train)
    sizes = partition.sizes()
    distinct = (hist > 0).sum(axis=1)
    lines = [
        f"partition: {partition.tag()}  clients: {partition.num_clients}  seed: {partition.seed}",
        f"client sizes: min {min(sizes)}  median {int(np.median(sizes))}  max {max(sizes)}",
        f"distinct labels per client: min {distinct.min()}  "
        f"median {int(np.median(distinct))}  max {distinct.max()}",
        f"label-marginal heterogeneity (paper calls it Wasserstein): "
        f"mean {report.mean_distance:.4f}  max {report.per_client_distance.max():.4f}",
    ]
    if heatmap_path:
        with open(heatmap_path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["client"] + [f"class_{k}" for k in range(train.num_classes)])
            for i, row in enumerate(hist):
                writer.writerow([i] + [int(v) for v in row])
        lines.append(f"heat-map counts written to {heatmap_path}")
    return "\n".join(lines), report, hist


def verify_bounds(run_dir, tol=1e-9):
    """Re-check the recorded diagnostics of a finished run offline.

    Recomputes the descent right-hand side from the stored constants,
    cross-checks clamp counts against metrics.csv and confirms every drift
    flag.  Returns (ok, list of problem strings).
    """
    problems = []
    metrics = {int(r["round"]): r for r in read_metrics(run_dir)}
    with open(os.path.join(run_dir, "diagnostics.jsonl")) as f:
        for line in f:
            entry = json.loads(line)
            t = entry["round"]
            solver = entry.get("solver")
            bounds = entry.get("bounds")
            if solver and t in metrics:
                if int(metrics[t]["clamp_events"]) != solver["clamp_events"]:
                    problems.append(f"round {t}: clamp_events mismatch")
                if int(metrics[t]["solver_sweeps"]) != solver["sweeps"]:
                    problems.append(f"round {t}: sweeps mismatch")
                if not solver["converged"]:
                    problems.append(f"round {t}: solver marked unconverged")
            if not bounds:
                continue
            est = bounds["estimates"]
            _, rhs, _ = diagnostics.descent_report(
                0.0, 0.0, bounds["grad_norm_global"],
                diagnostics.BoundEstimates(**est),
                bounds["local_epochs"], bounds["num_selected"])
            if abs(rhs - bounds["descent_rhs"]) > tol * max(1.0, abs(rhs)):
                problems.append(f"round {t}: descent RHS does not reproduce")
            if abs(bounds["descent_slack"]
                   - (bounds["descent_rhs"] - bounds["descent_lhs"])) > tol:
                problems.append(f"round {t}: slack inconsistent")
            if not bounds["drift_ok"]:
                problems.append(f"round {t}: drift bound violated")
            if not 0.0 <= bounds["raw_unit_fraction"] <= 1.0:
                problems.append(f"round {t}: unit fraction out of range")
            if bounds["objective_value"] > bounds["constant_rate_objective"] + tol:
                problems.append(f"round {t}: schedule objective above constant-rate")
    return not problems, problems
