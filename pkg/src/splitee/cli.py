"""Command-line surface: experiment configuration, training runs, threshold
sweeps, report tables, and partition dumps.

Exit codes: 0 success; 2 configuration/format error (message names the
offending field path); 3 numeric divergence during training (message names
the round and client).
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np
import yaml

from .checkpoint import load_dataset, load_model, save_dataset, save_model
from .data import Dataset, cifar10_load, iid_partition, synth_make
from .errors import ConfigError, FormatError, NumericError, ShapeError
from .inference import default_grid, sweep, sweep_csv
from .model import BaseNetworkSpec, ClientModel, ServerModel, table_spec
from .training import STRATEGIES, TrainConfig, TrainResult, run_strategy

CONFIG_VERSION = 1

# Full-scale preset mirroring the reference experiment: 12 clients at three
# heterogeneous cuts over the 6-layer network, trained for 600 rounds at
# batch 1024.  Validated and echoed by default; executed only under --dry-run.
PAPER_SCALE = {
    "version": CONFIG_VERSION,
    "strategy": "averaging",
    "dataset": {
        "kind": "synthetic",
        "classes": 10,
        "train_per_class": 40,
        "test_per_class": 10,
        "input_shape": [3, 32, 32],
        "difficulty": 0.5,
        "seed": 0,
    },
    "model": {"depth": 6, "channel_scale": 1.0},
    "train": {
        "clients": 12,
        "end_layers": [3, 3, 3, 3, 4, 4, 4, 4, 5, 5, 5, 5],
        "rounds": 600,
        "local_epochs": 1,
        "batch_size": 1024,
        "lr_max": 1e-3,
        "lr_min": 1e-6,
        "server_lr_divisor": 12.0,
        "seed": 0,
        "eval_every": 600,
    },
}

# Micro-batch cap applied under --dry-run so one probe round of the
# full-scale configuration stays within a few GB of activation memory.
DRY_RUN_MICRO_BATCH = 64


def _field(cfg: dict, path: str, default=..., cast=None):
    """Fetch a dotted field with a field-path diagnostic on error."""
    node = cfg
    parts = path.split(".")
    for i, key in enumerate(parts):
        if not isinstance(node, dict) or key not in node:
            if default is not ...:
                return default
            raise ConfigError(f"{path}: missing required field")
        node = node[key]
    if node is None and default is not ...:
        return default
    if cast is not None:
        try:
            return cast(node)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    return node


def load_experiment(path: str) -> dict:
    try:
        with open(path) as f:
            doc = yaml.safe_load(f)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: malformed YAML: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: config must be a mapping")
    version = doc.get("version", CONFIG_VERSION)
    if version != CONFIG_VERSION:
        raise ConfigError(f"version: unsupported config version {version}")
    return doc


def build_dataset(cfg: dict) -> tuple[Dataset, Dataset]:
    kind = _field(cfg, "dataset.kind")
    if kind == "synthetic":
        classes = _field(cfg, "dataset.classes", 4, int)
        shape = tuple(_field(cfg, "dataset.input_shape", [1, 16, 16]))
        if len(shape) != 3:
            raise ConfigError("dataset.input_shape: expected [C, H, W]")
        difficulty = _field(cfg, "dataset.difficulty", 0.5, float)
        seed = _field(cfg, "dataset.seed", 0, int)
        train = synth_make(
            classes, _field(cfg, "dataset.train_per_class", 500, int),
            shape, difficulty=difficulty, seed=seed,
        )
        test = synth_make(
            classes, _field(cfg, "dataset.test_per_class", 125, int),
            shape, difficulty=difficulty, seed=seed + 1,
        )
        return train, test
    if kind == "cifar10":
        root = _field(cfg, "dataset.path")
        if not Path(root).is_dir():
            raise ConfigError(f"dataset.path: directory {root} does not exist")
        return cifar10_load(root)
    if kind == "container":
        train = load_dataset(_field(cfg, "dataset.train_path"))
        test = load_dataset(_field(cfg, "dataset.test_path"))
        return train, test
    raise ConfigError(
        f"dataset.kind: expected synthetic, cifar10, or container, got {kind!r}"
    )


def build_model_spec(cfg: dict, train_ds: Dataset) -> BaseNetworkSpec:
    return table_spec(
        depth=_field(cfg, "model.depth", 4, int),
        num_classes=train_ds.num_classes,
        input_shape=tuple(train_ds.images.shape[1:]),
        channel_scale=_field(cfg, "model.channel_scale", 0.125, float),
    )


def build_train_config(cfg: dict, workers: int | None, dry_run: bool) -> TrainConfig:
    strategy = _field(cfg, "strategy")
    if strategy not in STRATEGIES:
        raise ConfigError(f"strategy: expected one of {STRATEGIES}, got {strategy!r}")
    clients = _field(cfg, "train.clients", 3, int)
    end_layers = _field(cfg, "train.end_layers", list(range(1, clients + 1)))
    seed = _field(cfg, "train.seed", 0, int)
    if "SPLITEE_SEED" in os.environ:
        try:
            seed = int(os.environ["SPLITEE_SEED"])
        except ValueError as exc:
            raise ConfigError(f"SPLITEE_SEED: {exc}") from exc
    rounds = _field(cfg, "train.rounds", 50, int)
    batch = _field(cfg, "train.batch_size", 64, int)
    max_batches = _field(cfg, "train.max_batches", None)
    if dry_run:
        rounds = 1
        max_batches = 2
        batch = min(batch, DRY_RUN_MICRO_BATCH)
    try:
        return TrainConfig(
            strategy=strategy,
            clients=clients,
            end_layers=tuple(end_layers),
            rounds=rounds,
            local_epochs=_field(cfg, "train.local_epochs", 1, int),
            batch_size=batch,
            lr_max=_field(cfg, "train.lr_max", 1e-3, float),
            lr_min=_field(cfg, "train.lr_min", 1e-6, float),
            t_max=_field(cfg, "train.t_max", None),
            server_lr_divisor=_field(cfg, "train.server_lr_divisor", None),
            seed=seed,
            eval_every=_field(cfg, "train.eval_every", 1, int),
            workers=workers if workers is not None else _field(cfg, "train.workers", 1, int),
            augment=bool(_field(cfg, "train.augment", True)),
            max_batches=max_batches,
        )
    except ConfigError as exc:
        raise ConfigError(f"train: {exc}") from exc


def _manifest(cfg: dict, tc: TrainConfig, spec: BaseNetworkSpec) -> dict:
    return {
        "version": CONFIG_VERSION,
        "strategy": tc.strategy,
        "dataset": cfg.get("dataset", {}),
        "model_spec": spec.to_dict(),
        "train": {
            "clients": tc.clients,
            "end_layers": list(tc.end_layers),
            "rounds": tc.rounds,
            "local_epochs": tc.local_epochs,
            "batch_size": tc.batch_size,
            "lr_max": tc.lr_max,
            "lr_min": tc.lr_min,
            "t_max": tc.t_max,
            "server_lr_divisor": tc.server_lr_divisor,
            "seed": tc.seed,
            "eval_every": tc.eval_every,
            "workers": tc.workers,
            "augment": tc.augment,
            "max_batches": tc.max_batches,
        },
    }


def _write_artifacts(out: Path, res: TrainResult, spec: BaseNetworkSpec) -> None:
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "logs.jsonl", "w") as f:
        for log in res.logs:
            f.write(json.dumps(log.to_json_dict(), sort_keys=True) + "\n")
    tc = res.config
    for i, client in sorted(res.clients.items()):
        save_model(
            str(out / f"client_{i}.splitee"), client.params, spec, tc.seed,
            {"role": "client", "end_layer": client.end_layer},
        )
    if res.shared_server is not None:
        save_model(
            str(out / "server_shared.splitee"), res.shared_server.params, spec, tc.seed,
            {"role": "server", "entry_layer": res.shared_server.entry_layer},
        )
    else:
        for i, server in sorted(res.servers.items()):
            save_model(
                str(out / f"server_{i}.splitee"), server.params, spec, tc.seed,
                {"role": "server", "entry_layer": server.entry_layer},
            )
    final = _final_accuracies(res)
    summary = {
        "strategy": tc.strategy,
        "clients": tc.clients,
        "end_layers": list(tc.end_layers),
        "rounds": tc.rounds,
        "seed": tc.seed,
        "client_acc": final[0],
        "server_acc": final[1],
        "messages": res.total_messages,
        "bytes": res.total_bytes,
    }
    with open(out / "summary.json", "w") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
        f.write("\n")


def _final_accuracies(res: TrainResult) -> tuple[dict, dict]:
    """Last logged accuracy per client id, as string-keyed dicts."""
    cacc: dict[str, float] = {}
    sacc: dict[str, float] = {}
    for log in res.logs:
        for i, v in log.client_acc.items():
            cacc[str(i)] = v
        for i, v in log.server_acc.items():
            sacc[str(i)] = v
    return cacc, sacc


def cmd_train(args) -> int:
    if args.paper_scale:
        cfg = json.loads(json.dumps(PAPER_SCALE))  # deep copy
        if args.config:
            cfg.update(load_experiment(args.config))
    else:
        if not args.config:
            raise ConfigError("config: a config file is required unless --paper-scale")
        cfg = load_experiment(args.config)
    tc = build_train_config(cfg, args.workers, args.dry_run)
    train_ds, test_ds = build_dataset(cfg)
    spec = build_model_spec(cfg, train_ds)

    out = Path(args.out or _field(cfg, "output_dir", "runs/run"))
    manifest = _manifest(cfg, tc, spec)
    if args.paper_scale and not args.dry_run:
        # Validate-and-echo only: the full-scale run is documentation, not CI.
        json.dump(manifest, sys.stdout, indent=2, sort_keys=True)
        print()
        return 0
    res = run_strategy(tc, train_ds, test_ds, spec)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    _write_artifacts(out, res, spec)
    print(f"run complete: {tc.strategy}, {tc.rounds} rounds -> {out}")
    return 0


def _parse_grid(text: str | None) -> list[float]:
    if text is None:
        return default_grid()
    parts = text.split(":")
    if len(parts) != 3:
        raise ConfigError(f"--grid: expected start:end:step, got {text!r}")
    try:
        start, end, step = (float(p) for p in parts)
    except ValueError as exc:
        raise ConfigError(f"--grid: {exc}") from exc
    if step <= 0 or end < start:
        raise ConfigError("--grid: need step > 0 and end >= start")
    return default_grid(start, end, step)


def load_client(path: str) -> ClientModel:
    ps, spec, meta = load_model(path)
    if meta.get("role") != "client" or "end_layer" not in meta:
        raise FormatError(f"{path}: not a client checkpoint")
    return ClientModel(spec=spec, end_layer=int(meta["end_layer"]), params=ps)


def load_server(path: str) -> ServerModel:
    ps, spec, meta = load_model(path)
    if meta.get("role") != "server" or "entry_layer" not in meta:
        raise FormatError(f"{path}: not a server checkpoint")
    return ServerModel(spec=spec, entry_layer=int(meta["entry_layer"]), params=ps)


def cmd_sweep(args) -> int:
    client = load_client(args.client)
    server = load_server(args.server)
    if client.spec != server.spec:
        raise ConfigError("client and server checkpoints disagree on the network spec")
    ds = load_dataset(args.dataset)
    grid = _parse_grid(args.grid)
    points = sweep(client, server, ds, grid)
    csv_text = sweep_csv(points)
    if args.out:
        Path(args.out).write_text(csv_text)
        if args.json:
            payload = [
                {
                    "tau": p.tau,
                    "accuracy": p.accuracy,
                    "client_ratio": p.client_ratio,
                    "server_ratio": p.server_ratio,
                    "avg_entropy": p.avg_entropy,
                }
                for p in points
            ]
            Path(args.out).with_suffix(".json").write_text(
                json.dumps(payload, indent=2, sort_keys=True) + "\n"
            )
    else:
        sys.stdout.write(csv_text)
    return 0


_METHOD_ORDER = ("sequential", "averaging", "centralized", "distributed")


def _collect_summaries(root: Path) -> list[dict]:
    if not root.is_dir():
        raise ConfigError(f"run directory {root} does not exist")
    found = sorted(root.glob("**/summary.json"))
    if not found:
        raise ConfigError(f"no run summaries found under {root}")
    return [json.loads(p.read_text()) for p in found]


def _mean_by_layer(summary: dict, which: str) -> dict[int, float]:
    accs: dict[int, list[float]] = {}
    for idx, layer in enumerate(summary["end_layers"], start=1):
        v = summary[which].get(str(idx))
        if v is not None:
            accs.setdefault(int(layer), []).append(float(v))
    return {l: sum(v) / len(v) for l, v in accs.items()}


def render_report(summaries: list[dict]) -> tuple[str, str]:
    """Accuracy table as (aligned text, CSV); rows = method x location,
    columns = end layer; numbers are final accuracies averaged over the
    clients sharing a cut."""
    order = {m: i for i, m in enumerate(_METHOD_ORDER)}
    summaries = sorted(summaries, key=lambda s: order.get(s["strategy"], 99))
    layers = sorted({l for s in summaries for l in s["end_layers"]})
    rows = []
    csv_lines = ["method,location,end_layer,accuracy"]
    for s in summaries:
        for location, key in (("Server", "server_acc"), ("Client", "client_acc")):
            by_layer = _mean_by_layer(s, key)
            cells = []
            for l in layers:
                if l in by_layer:
                    cells.append(f"{by_layer[l] * 100:.2f}")
                    csv_lines.append(
                        f"{s['strategy']},{location},{l},{by_layer[l]:.10g}"
                    )
                else:
                    cells.append("-")
            rows.append((s["strategy"].capitalize(), location, cells))
    headers = ["Method", "Location"] + [f"l={l}" for l in layers]
    widths = [len(h) for h in headers]
    prev_method = None
    text_rows = []
    for method, location, cells in rows:
        shown = "" if method == prev_method else method
        prev_method = method
        text_rows.append([shown, location] + cells)
    for row in text_rows:
        for i, cell in enumerate(row):
            widths[i] = max(widths[i], len(cell))
    def fmt(row):
        return "  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip()
    text = "\n".join([fmt(headers)] + [fmt(r) for r in text_rows]) + "\n"
    return text, "\n".join(csv_lines) + "\n"


def cmd_report(args) -> int:
    summaries = _collect_summaries(Path(args.rundir))
    text, csv_text = render_report(summaries)
    sys.stdout.write(text)
    if args.csv:
        Path(args.csv).write_text(csv_text)
    return 0


def cmd_partition(args) -> int:
    part = iid_partition(args.size, args.clients, args.seed)
    payload = {str(i): [int(v) for v in idx] for i, idx in sorted(part.items())}
    text = json.dumps(payload, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
    else:
        print(text)
    return 0


def cmd_make_dataset(args) -> int:
    ds = synth_make(
        args.classes, args.per_class,
        tuple(args.input_shape), difficulty=args.difficulty, seed=args.seed,
    )
    save_dataset(args.out, ds)
    print(f"wrote {args.out}: {len(ds)} samples, {ds.num_classes} classes")
    return 0


def make_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="splitee",
        description="Split learning with early exits: train, sweep, report.",
    )
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="run a training strategy from a config file")
    t.add_argument("config", nargs="?", help="YAML experiment config")
    t.add_argument("--out", help="output directory (overrides config output_dir)")
    t.add_argument("--workers", type=int, help="parallel client workers")
    t.add_argument("--dry-run", action="store_true",
                   help="1 round on 2 batches with a capped micro-batch")
    t.add_argument("--paper-scale", action="store_true",
                   help="use the full-scale preset; validates and echoes the "
                        "manifest, runs only together with --dry-run")
    t.set_defaults(fn=cmd_train)

    s = sub.add_parser("sweep", help="entropy-threshold sweep over a trained pair")
    s.add_argument("--client", required=True, help="client checkpoint")
    s.add_argument("--server", required=True, help="server checkpoint")
    s.add_argument("--dataset", required=True, help="dataset container")
    s.add_argument("--grid", help="start:end:step (default 0:4:0.05)")
    s.add_argument("--out", help="CSV output path (stdout if omitted)")
    s.add_argument("--json", action="store_true", help="also write JSON next to CSV")
    s.set_defaults(fn=cmd_sweep)

    r = sub.add_parser("report", help="accuracy table from one or more runs")
    r.add_argument("rundir", help="run directory (searched recursively)")
    r.add_argument("--csv", help="also write the table as CSV")
    r.set_defaults(fn=cmd_report)

    pa = sub.add_parser("partition", help="dump an IID partition as JSON")
    pa.add_argument("--size", type=int, required=True)
    pa.add_argument("--clients", type=int, required=True)
    pa.add_argument("--seed", type=int, default=0)
    pa.add_argument("--out")
    pa.set_defaults(fn=cmd_partition)

    m = sub.add_parser("make-dataset", help="export a synthetic dataset container")
    m.add_argument("--classes", type=int, default=4)
    m.add_argument("--per-class", type=int, default=500)
    m.add_argument("--input-shape", type=int, nargs=3, default=[1, 16, 16])
    m.add_argument("--difficulty", type=float, default=0.5)
    m.add_argument("--seed", type=int, default=0)
    m.add_argument("--out", required=True)
    m.set_defaults(fn=cmd_make_dataset)
    return p


def main(argv: list[str] | None = None) -> int:
    args = make_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, FormatError, ShapeError, FileNotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric divergence: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
