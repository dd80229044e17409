"""Command-line interface: count, train, eval, gradcheck, bench, synth.

Settings come from an optional INI-style config file (``--config``) with
sections matching :data:`SCHEMA`, overridden by command-line flags. Every
key is a flag of the same name with ``_`` spelled ``-``.
"""

from __future__ import annotations

import argparse
import configparser
import statistics
import sys
import time
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import checkpoint, gradcheck
from .data import Dataset, SyntheticShapeSpec, load_xyz_dir, make_synthetic, save_xyz_dir
from .layers import Context
from .networks import (
    Network,
    NetworkConfig,
    classification_config,
    depth_preset,
    layer_costs,
    normal_estimation_config,
    segmentation_config,
)
from .tensor import ConfigError, backward, make_rng, no_grad, reduce_sum
from .training import TrainConfig, evaluate_voting, train

CONNECTIVITY_FLAGS = {"dense": "dense", "layer": "layer_by_layer", "concat_end": "concat_at_end"}


def _bool(text: str) -> bool:
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


# section -> key -> (parser, default, help)
SCHEMA: Dict[str, Dict[str, Tuple[Callable[[str], Any], Any, str]]] = {
    "network": {
        "task": (str, "classification", "classification | part_segmentation | normal_estimation"),
        "k": (int, 24, "growth rate"),
        "groups": (int, 2, "group number of the widened SLP"),
        "num_classes": (int, 40, "output classes (count only; train/eval take it from the data)"),
        "input_points": (int, 1024, "points per cloud (count only; train/eval take it from the data)"),
        "connectivity": (str, "dense", "dense | layer | concat_end"),
        "depth": (int, 0, "classification depth preset (6, 9, 11, 15, 19, 23); 0 keeps the standard net"),
        "net_seed": (int, 0, "parameter initialisation seed"),
    },
    "train": {
        "epochs": (int, 30, "training epochs"),
        "batch_size": (int, 16, "mini-batch size"),
        "lr": (float, 1e-3, "Adam learning rate"),
        "seed": (int, 0, "seed for shuffling, augmentation, dropout and neighbor sampling"),
        "augment": (_bool, True, "random anisotropic scaling and translation"),
    },
    "data": {
        "dataset": (str, "synthetic", "'synthetic' or a directory with a manifest"),
        "manifest": (str, "manifest.tsv", "manifest file name inside the dataset directory"),
        "points": (int, 256, "points per cloud"),
        "train_per_class": (int, 200, "synthetic training samples per class"),
        "test_per_class": (int, 80, "synthetic test samples per class"),
        "data_seed": (int, 0, "synthetic generation / resampling seed"),
    },
    "eval": {
        "checkpoint": (str, "", "checkpoint to evaluate (default: <out_dir>/model.dptk)"),
        "votes": (int, 10, "test-time voting passes"),
        "dump": (str, "", "per-sample tab-separated dump path"),
    },
    "bench": {
        "warmup": (int, 1, "untimed warm-up repetitions"),
        "reps": (int, 5, "timed repetitions"),
        "batch": (int, 8, "batch size"),
        "depths": (str, "", "comma-separated depth presets to compare (default: the configured net)"),
    },
    "gradcheck": {
        "ops": (str, "", "comma-separated case names (default: all)"),
        "tol": (float, gradcheck.DEFAULT_TOL, "maximum relative error"),
    },
    "output": {
        "out_dir": (str, "runs", "directory for checkpoints, logs and reports"),
    },
}


class CliError(Exception):
    pass


def _flat_schema() -> Dict[str, Tuple[str, Callable, Any, str]]:
    out = {}
    for section, keys in SCHEMA.items():
        for key, (parser, default, help_text) in keys.items():
            out[key] = (section, parser, default, help_text)
    return out


def load_config_file(path: str) -> Dict[str, Any]:
    """Parse an INI file against the schema; unknown sections or keys are errors."""
    cp = configparser.ConfigParser()
    if not cp.read(path):
        raise CliError(f"cannot read config file {path}")
    values: Dict[str, Any] = {}
    for section in cp.sections():
        if section not in SCHEMA:
            raise CliError(f"{path}: unknown section [{section}]")
        for key, raw in cp.items(section):
            if key not in SCHEMA[section]:
                raise CliError(f"{path}: unknown key {key!r} in [{section}]")
            parser = SCHEMA[section][key][0]
            try:
                values[key] = parser(raw)
            except ValueError as exc:
                raise CliError(f"{path}: [{section}] {key}: {exc}") from None
    return values


def resolve(args: argparse.Namespace) -> Tuple[Dict[str, Any], Dict[str, str]]:
    """Merge defaults < config file < flags; also report where each value came from."""
    flat = _flat_schema()
    values = {k: v[2] for k, v in flat.items()}
    source = {k: "default" for k in flat}
    if args.config:
        for k, v in load_config_file(args.config).items():
            values[k], source[k] = v, "config"
    for k in flat:
        v = getattr(args, k, None)
        if v is not None:
            values[k], source[k] = v, "flag"
    return values, source


def _print_settings(values: Dict[str, Any], source: Dict[str, str], sections: Sequence[str]) -> None:
    for section in sections:
        for key in SCHEMA[section]:
            print(f"# {section}.{key} = {values[key]!r} ({source[key]})")


# ---------------------------------------------------------------------------
# builders
# ---------------------------------------------------------------------------


def network_config(values: Dict[str, Any], num_classes: Optional[int] = None, input_points: Optional[int] = None) -> NetworkConfig:
    conn = values["connectivity"]
    if conn not in CONNECTIVITY_FLAGS:
        raise CliError(f"unknown connectivity {conn!r}; expected one of {sorted(CONNECTIVITY_FLAGS)}")
    k, groups = values["k"], values["groups"]
    classes = num_classes if num_classes is not None else values["num_classes"]
    points = input_points if input_points is not None else values["input_points"]
    task = values["task"]
    if task == "classification":
        if values["depth"]:
            cfg = depth_preset(values["depth"], k, groups, classes)
            cfg.input_points = points
        else:
            cfg = classification_config(k, groups, classes, input_points=points)
    elif task == "part_segmentation":
        cfg = segmentation_config(k, groups, classes)
        cfg.input_points = points
    elif task == "normal_estimation":
        cfg = normal_estimation_config(k, groups)
        cfg.input_points = points
    else:
        raise CliError(f"unknown task {task!r}")
    cfg.connectivity = CONNECTIVITY_FLAGS[conn]
    cfg.seed = values["net_seed"]
    cfg.validate()
    return cfg


def load_dataset(values: Dict[str, Any]) -> Dataset:
    task = values["task"]
    if values["dataset"] == "synthetic":
        spec = SyntheticShapeSpec(
            points_per_sample=values["points"],
            train_per_class=values["train_per_class"],
            test_per_class=values["test_per_class"],
            seed=values["data_seed"],
        )
        return make_synthetic(spec, task)
    root = Path(values["dataset"])
    if not (root / values["manifest"]).is_file():
        raise CliError(f"dataset not found: {root / values['manifest']}")
    return load_xyz_dir(root, values["manifest"], n_points=values["points"], seed=values["data_seed"], task=task)


def _network_for(values: Dict[str, Any], dataset: Dataset) -> Network:
    n = dataset.samples[0].num_points
    classes = len(dataset.class_names) if values["task"] == "classification" else values["num_classes"]
    return Network(network_config(values, classes, n))


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_count(values: Dict[str, Any], sweep: Optional[str]) -> int:
    out_dir = Path(values["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    if sweep:
        key, _, raw = sweep.partition("=")
        if key not in ("ng", "k") or not raw:
            raise CliError(f"--sweep expects ng=... or k=..., got {sweep!r}")
        lines = [f"{key}\tparams\tflops"]
        for item in raw.split(","):
            v = dict(values)
            v["groups" if key == "ng" else "k"] = int(item)
            report = layer_costs(Network(network_config(v)))
            lines.append(f"{item}\t{report.total_params}\t{report.total_flops}")
        text = "\n".join(lines)
        target = out_dir / f"sweep_{key}.tsv"
    else:
        report = layer_costs(Network(network_config(values)))
        text = report.table()
        target = out_dir / "count.tsv"
    print(text)
    target.write_text(text + "\n")
    return 0


def cmd_train(values: Dict[str, Any]) -> int:
    dataset = load_dataset(values)
    network = _network_for(values, dataset)
    out_dir = Path(values["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt = out_dir / "model.dptk"
    if values["epochs"] == 0:
        checkpoint.save(network.state_dict(), ckpt)
        print(f"# wrote {ckpt} (initialisation)")
        return 0
    cfg = TrainConfig(
        epochs=values["epochs"],
        batch_size=values["batch_size"],
        lr=values["lr"],
        seed=values["seed"],
        augment=values["augment"],
        checkpoint_path=str(ckpt),
    )
    with open(out_dir / "train_log.tsv", "w") as log_file:
        tee = _Tee(sys.stdout, log_file)
        train(network, dataset, cfg, log=tee)
    print(f"# wrote {ckpt}")
    return 0


class _Tee:
    def __init__(self, *streams):
        self.streams = streams

    def write(self, text: str) -> None:
        for s in self.streams:
            s.write(text)

    def flush(self) -> None:
        for s in self.streams:
            s.flush()


def cmd_eval(values: Dict[str, Any]) -> int:
    dataset = load_dataset(values).subset("test")
    network = _network_for(values, dataset)
    path = values["checkpoint"] or str(Path(values["out_dir"]) / "model.dptk")
    if not Path(path).is_file():
        raise CliError(f"checkpoint not found: {path}")
    network.load_state_dict(checkpoint.load(path))
    metrics, preds = evaluate_voting(network, dataset, votes=values["votes"], seed=values["seed"])
    print(metrics.summary())
    if values["dump"]:
        lines = ["id\tlabel\tpred\tmax_prob"]
        for sid, sample, p in zip(dataset.sample_ids, dataset.samples, preds):
            if p.ndim == 1:
                lines.append(f"{sid}\t{sample.label}\t{int(p.argmax())}\t{float(p.max()):.6f}")
            else:  # per-point outputs: report the object label and mean confidence
                lines.append(f"{sid}\t{sample.label}\t-\t{float(p.max(axis=0).mean()):.6f}")
        Path(values["dump"]).write_text("\n".join(lines) + "\n")
    return 0


def cmd_gradcheck(values: Dict[str, Any]) -> int:
    names = [n for n in values["ops"].split(",") if n] or None
    results = gradcheck.run(names, seed=values["seed"], tol=values["tol"])
    print(gradcheck.report(results))
    failed = [r.name for r in results if not r.passed]
    if failed:
        raise CliError(f"gradient check failed for {','.join(failed)}")
    return 0


def _time(fn: Callable[[], None], warmup: int, reps: int) -> List[float]:
    for _ in range(warmup):
        fn()
    out = []
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        out.append(time.perf_counter() - t0)
    return out


def cmd_bench(values: Dict[str, Any]) -> int:
    if values["reps"] < 1:
        raise CliError("reps must be >= 1")
    targets = []
    depths = [int(d) for d in values["depths"].split(",") if d]
    for d in depths or [values["depth"]]:
        v = dict(values, depth=d)
        targets.append((f"L={d}" if d else "standard", network_config(v)))
    print("network\tphase\tbatch\tmedian_s\tmin_s\tmax_s")
    for label, cfg in targets:
        net = Network(cfg)
        rng = make_rng(values["seed"])
        coords = rng.uniform(-1, 1, (values["batch"], 3, cfg.input_points))
        one_hot = None
        if cfg.one_hot_dim:
            one_hot = np.zeros((values["batch"], cfg.one_hot_dim))
            one_hot[:, 0] = 1.0

        def forward():
            with no_grad():
                net(coords, Context(training=False, rng=rng), one_hot)

        def forward_backward():
            out = net(coords, Context(training=True, rng=rng), one_hot)
            backward(reduce_sum(out))

        for phase, fn in (("forward", forward), ("forward_backward", forward_backward)):
            times = _time(fn, values["warmup"], values["reps"])
            print(
                f"{label}\t{phase}\t{values['batch']}\t{statistics.median(times):.6f}\t"
                f"{min(times):.6f}\t{max(times):.6f}"
            )
    return 0


def cmd_synth(values: Dict[str, Any]) -> int:
    spec = SyntheticShapeSpec(
        points_per_sample=values["points"],
        train_per_class=values["train_per_class"],
        test_per_class=values["test_per_class"],
        seed=values["data_seed"],
    )
    target = Path(values["out_dir"])
    save_xyz_dir(make_synthetic(spec), target, values["manifest"])
    print(f"# wrote {target / values['manifest']}")
    return 0


COMMANDS = {
    "count": (cmd_count, ("network", "output")),
    "train": (cmd_train, ("network", "train", "data", "output")),
    "eval": (cmd_eval, ("network", "train", "data", "eval", "output")),
    "gradcheck": (cmd_gradcheck, ("train", "gradcheck")),
    "bench": (cmd_bench, ("network", "train", "bench")),
    "synth": (cmd_synth, ("data", "output")),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="densepoint", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, sections) in COMMANDS.items():
        p = sub.add_parser(name, help=f"{name} command")
        p.add_argument("--config", help="INI-style config file")
        for section in sections:
            group = p.add_argument_group(section)
            for key, (parser_fn, default, help_text) in SCHEMA[section].items():
                kw: Dict[str, Any] = {"dest": key, "default": None, "help": f"{help_text} (default: {default!r})"}
                kw["type"] = parser_fn
                group.add_argument("--" + key.replace("_", "-"), **kw)
        if name == "count":
            p.add_argument("--sweep", help="ng=1,2,4,6,12 or k=12,24,36,48")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    fn, sections = COMMANDS[args.command]
    try:
        values, source = resolve(args)
        _print_settings(values, source, sections)
        if args.command == "count":
            return cmd_count(values, args.sweep)
        return fn(values)
    except (CliError, ConfigError, ValueError, OSError, checkpoint.CheckpointError) as exc:
        message = str(exc).replace("\n", " ")
        print(f"error: {message}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
