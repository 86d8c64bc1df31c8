"""Single command-line entry point: data generation, training in both
regimes, distributed serve/join, evaluation grids, and report emission.

Every artifact-producing subcommand writes a JSON run manifest next to its
output; ``fedroam rerun MANIFEST`` re-executes the stored configuration and
reproduces the artifacts byte-for-byte. Randomness flows exclusively from the
resolved seed (flag > config file > FEDROAM_SEED > 0).

Exit codes: 0 success, 1 internal error, 2 bad input or missing files,
3 protocol error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from datetime import datetime, timezone
from pathlib import Path

from . import __version__, evaluation, fl, netproto, nn
from .data import (Dataset, DatasetIOError, Partition, build_partitions,
                   generate_sim2real_holdout, load_dataset, save_dataset,
                   train_val_split)
from .svgplot import render_sim2real_svg

SEED_ENV_VAR = "FEDROAM_SEED"

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_BAD_INPUT = 2
EXIT_PROTOCOL = 3

HOLDOUT_BASENAME = "Rstar"


# ---------------------------------------------------------------------------
# Config resolution: flags > config file > (FEDROAM_SEED for seed) > defaults


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _load_config_file(path: str | None) -> dict[str, str]:
    if not path:
        return {}
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"config file {p} does not exist")
    out: dict[str, str] = {}
    for raw in p.read_text(encoding="utf-8").splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"config line is not key=value: {raw!r}")
        key, _, value = line.partition("=")
        out[key.strip()] = value.strip()
    return out


_KEY_TYPES = {
    "rounds": int, "local_epochs": int, "batch_size": int, "lr": float,
    "seed": int, "uniform": _parse_bool, "total": int, "holdout": int,
    "val_fraction": float, "jobs": int, "clients": int, "port": int,
    "table": str, "regime": str, "out": str, "arch": str, "bind": str,
    "data": str, "model": str, "server": str, "id": str,
}


def _resolve(args: argparse.Namespace, keys: list[str]) -> dict:
    """Merge flag values, config-file values and defaults into one dict."""
    file_cfg = _load_config_file(getattr(args, "config", None))
    resolved: dict = {}
    for key in keys:
        flag_value = getattr(args, key)
        if flag_value is not None:
            resolved[key] = flag_value
        elif key in file_cfg:
            resolved[key] = _KEY_TYPES[key](file_cfg[key])
        elif key == "seed" and os.environ.get(SEED_ENV_VAR):
            resolved[key] = int(os.environ[SEED_ENV_VAR])
        else:
            resolved[key] = _DEFAULTS[key]
    return resolved


_DEFAULTS: dict = {
    "rounds": 20, "local_epochs": 1, "batch_size": 32, "lr": 0.01, "seed": 0,
    "uniform": False, "total": 3000, "holdout": 0, "val_fraction": 0.2,
    "jobs": 1, "clients": 1, "port": netproto.DEFAULT_PORT, "table": None,
    "regime": "both", "out": ".", "arch": None, "bind": "0.0.0.0",
    "data": None, "model": None, "server": None, "id": None,
}


def _round_config(cfg: dict) -> fl.RoundConfig:
    return fl.RoundConfig(rounds=cfg["rounds"], local_epochs=cfg["local_epochs"],
                          batch_size=cfg["batch_size"], lr=cfg["lr"],
                          seed=cfg["seed"], uniform_weighting=cfg["uniform"])


def _arch_from(cfg: dict) -> nn.ArchDescriptor:
    return nn.ArchDescriptor.from_text(cfg["arch"]) if cfg.get("arch") else nn.default_arch()


# ---------------------------------------------------------------------------
# Run manifests


def _utcnow() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _atomic_write(path: Path, data: bytes) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)


def _write_manifest(subcommand: str, cfg: dict, inputs: list[str], outputs: list[str],
                    started_at: str, manifest_path: Path) -> None:
    doc = {
        "subcommand": subcommand,
        "config": cfg,
        "seed": cfg.get("seed"),
        "inputs": sorted(inputs),
        "outputs": sorted(outputs),
        "tool_version": __version__,
        "started_at": started_at,
        "finished_at": _utcnow(),
    }
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    _atomic_write(manifest_path, (json.dumps(doc, indent=2, sort_keys=True) + "\n").encode())


def manifest_path_for(subcommand: str, out: Path) -> Path:
    if out.suffix:  # single-file artifact
        return out.with_suffix(out.suffix + ".manifest.json")
    return out / f"{subcommand}.manifest.json"


# ---------------------------------------------------------------------------
# Dataset discovery


def _split_basepaths(outdir: Path, name: str) -> tuple[Path, Path]:
    return outdir / f"{name}.train", outdir / f"{name}.val"


def load_partitions(datadir: Path, table: str | None = None) -> list[Partition]:
    """Load the three environment train/val pairs written by gen-data."""
    if table is None:
        if (datadir / "S0.train.manifest").exists():
            table = "sim"
        elif (datadir / "R0.train.manifest").exists():
            table = "real"
        else:
            raise FileNotFoundError(f"no S0/R0 train manifests under {datadir}")
    prefix = "S" if table == "sim" else "R"
    parts = []
    for i in range(3):
        train_base, val_base = _split_basepaths(datadir, f"{prefix}{i}")
        parts.append(Partition(f"{prefix}{i}", load_dataset(train_base), load_dataset(val_base)))
    return parts


# ---------------------------------------------------------------------------
# Subcommand runners (each takes a fully resolved config dict)


def run_gen_data(cfg: dict) -> None:
    started = _utcnow()
    if cfg["table"] not in ("sim", "real"):
        raise ValueError(f"--table must be sim or real, got {cfg['table']!r}")
    outdir = Path(cfg["out"])
    outdir.mkdir(parents=True, exist_ok=True)
    outputs: list[str] = []
    datasets = build_partitions(cfg["total"], cfg["table"], cfg["seed"])
    for d in datasets:
        train, val = train_val_split(d, cfg["val_fraction"], cfg["seed"])
        train_base, val_base = _split_basepaths(outdir, d.name)
        save_dataset(train, train_base)
        save_dataset(val, val_base)
        outputs += [f"{train_base}.blob", f"{train_base}.manifest",
                    f"{val_base}.blob", f"{val_base}.manifest"]
        print(f"{d.name}: {len(d)} images -> train {len(train)}, val {len(val)}")
    if cfg["holdout"]:
        holdout = generate_sim2real_holdout(cfg["holdout"], cfg["seed"])
        base = outdir / HOLDOUT_BASENAME
        save_dataset(holdout, base)
        outputs += [f"{base}.blob", f"{base}.manifest"]
        print(f"{holdout.name}: {len(holdout)} hold-out images")
    _write_manifest("gen-data", cfg, [], outputs, started,
                    manifest_path_for("gen-data", outdir))


def _loss_on(params: nn.ModelParams, dataset: Dataset) -> float:
    x, y = dataset.arrays()
    total = 0.0
    for i in range(0, x.shape[0], 256):
        loss, _ = nn.loss_and_grad_values(params.arch, params.values, x[i:i + 256], y[i:i + 256])
        total += loss * min(256, x.shape[0] - i)
    return total / x.shape[0]


def run_train(cfg: dict) -> None:
    started = _utcnow()
    paths = [p for p in str(cfg["data"]).split(",") if p]
    if not paths:
        raise ValueError("--data must list at least one dataset")
    datasets = [load_dataset(p) for p in paths]
    rc = _round_config(cfg)
    arch = _arch_from(cfg)
    if cfg["regime"] == "centralized":
        params = fl.run_centralized(datasets, rc, arch)
        merged = fl.merge_datasets(datasets)
        print(f"final loss {merged.name}: {_loss_on(params, merged):.6f}")
    elif cfg["regime"] == "federated":
        clients = [fl.ClientState(d.name, d) for d in datasets]
        params, reports = fl.run_federated(clients, rc, arch)
        for client_id, loss, count in reports[-1].client_stats:
            print(f"final loss {client_id}: {loss:.6f} ({count} samples)")
    else:
        raise ValueError(f"--regime must be centralized or federated, got {cfg['regime']!r}")
    out = Path(cfg["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    _atomic_write(out, nn.serialize_params(params))
    print(f"model written to {out}")
    _write_manifest("train", cfg, paths, [str(out)], started, manifest_path_for("train", out))


def run_serve(cfg: dict) -> None:
    started = _utcnow()
    rc = _round_config(cfg)
    arch = _arch_from(cfg)
    server = netproto.FLServer((cfg["bind"], cfg["port"]), cfg["clients"], rc, arch)
    print(f"serving on {cfg['bind']}:{server.port}, waiting for {cfg['clients']} clients",
          flush=True)
    result = server.run()
    for r, (up, down) in enumerate(zip(result.bytes_sent_per_round,
                                       result.bytes_received_per_round)):
        print(f"round {r}: sent {up} bytes, received {down} bytes "
              f"(parameter payload {result.reports[r].traffic_bytes})")
    out = Path(cfg["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    _atomic_write(out, nn.serialize_params(result.params))
    print(f"model written to {out}")
    _write_manifest("serve", cfg, [], [str(out)], started, manifest_path_for("serve", out))


def run_join(cfg: dict) -> None:
    if not cfg["server"] or not cfg["id"] or not cfg["data"]:
        raise ValueError("join needs --server, --id and --data")
    host, _, port_s = str(cfg["server"]).rpartition(":")
    if not host:
        raise ValueError(f"--server must be host:port, got {cfg['server']!r}")
    dataset = load_dataset(cfg["data"])
    report = netproto.join((host, int(port_s)), cfg["id"], dataset, _arch_from(cfg))
    print(f"{report.client_id}: {report.rounds_completed} rounds, "
          f"final loss {report.final_loss:.6f}, sent {report.bytes_sent} bytes, "
          f"received {report.bytes_received} bytes")


def run_grid(cfg: dict) -> None:
    started = _utcnow()
    datadir = Path(cfg["data"])
    parts = load_partitions(datadir, cfg["table"])
    rc = _round_config(cfg)
    arch = _arch_from(cfg)
    outdir = Path(cfg["out"])
    outdir.mkdir(parents=True, exist_ok=True)
    regimes = ([evaluation.CENTRALIZED, evaluation.FEDERATED]
               if cfg["regime"] == "both" else [cfg["regime"]])
    outputs: list[str] = []
    grids: dict[str, evaluation.GridReport] = {}
    for regime in regimes:
        grid = evaluation.run_experiment_grid(parts, rc, regime, arch, jobs=cfg["jobs"])
        grids[regime] = grid
        for metric in ("accuracy", "auc"):
            path = outdir / f"{metric}_{regime}.csv"
            _atomic_write(path, grid.to_csv(metric).encode())
            outputs.append(str(path))
    if len(grids) == 2:
        for metric in ("accuracy", "auc"):
            text = evaluation.render_metric_table(grids[evaluation.CENTRALIZED],
                                                  grids[evaluation.FEDERATED], metric)
            path = outdir / f"table_{metric}.txt"
            _atomic_write(path, text.encode())
            outputs.append(str(path))
            print(text)
    _write_manifest("grid", cfg, [str(datadir)], outputs, started,
                    manifest_path_for("grid", outdir))


def run_sim2real(cfg: dict) -> None:
    started = _utcnow()
    datadir = Path(cfg["data"])
    parts = load_partitions(datadir, "sim")
    holdout = load_dataset(datadir / HOLDOUT_BASENAME)
    rc = _round_config(cfg)
    points = evaluation.run_sim2real(parts, holdout, rc, _arch_from(cfg), jobs=cfg["jobs"])
    outdir = Path(cfg["out"])
    outdir.mkdir(parents=True, exist_ok=True)
    csv_path = outdir / "sim2real.csv"
    svg_path = outdir / "sim2real.svg"
    _atomic_write(csv_path, evaluation.sim2real_csv(points).encode())
    _atomic_write(svg_path, render_sim2real_svg(points).encode())
    for pt in points:
        print(f"{pt.regime:12s} {pt.combination:6s} accuracy {pt.accuracy:.4f}")
    _write_manifest("sim2real", cfg, [str(datadir)], [str(csv_path), str(svg_path)],
                    started, manifest_path_for("sim2real", outdir))


def run_eval(cfg: dict) -> None:
    started = _utcnow()
    if not cfg["model"] or not cfg["data"]:
        raise ValueError("eval needs --model and --data")
    params = nn.deserialize_params(Path(cfg["model"]).read_bytes())
    dataset = load_dataset(cfg["data"])
    report = evaluation.evaluate(params, dataset)
    print(f"{report.dataset_name}: accuracy {report.accuracy:.6f} auc {report.auc:.6f} "
          f"tp {report.tp} fp {report.fp} tn {report.tn} fn {report.fn}")
    if cfg["out"] and cfg["out"] != ".":
        out = Path(cfg["out"])
        body = ("dataset,accuracy,auc,tp,fp,tn,fn\n"
                f"{report.dataset_name},{report.accuracy:.6f},{report.auc:.6f},"
                f"{report.tp},{report.fp},{report.tn},{report.fn}\n")
        out.parent.mkdir(parents=True, exist_ok=True)
        _atomic_write(out, body.encode())
        _write_manifest("eval", cfg, [cfg["model"], cfg["data"]], [str(out)],
                        started, manifest_path_for("eval", out))


_RUNNERS = {
    "gen-data": run_gen_data,
    "train": run_train,
    "serve": run_serve,
    "join": run_join,
    "grid": run_grid,
    "sim2real": run_sim2real,
    "eval": run_eval,
}

_COMMAND_KEYS = {
    "gen-data": ["table", "total", "seed", "out", "holdout", "val_fraction"],
    "train": ["regime", "data", "out", "rounds", "local_epochs", "batch_size",
              "lr", "seed", "uniform", "arch"],
    "serve": ["bind", "port", "clients", "out", "rounds", "local_epochs",
              "batch_size", "lr", "seed", "uniform", "arch"],
    "join": ["server", "id", "data", "arch"],
    "grid": ["data", "table", "regime", "out", "rounds", "local_epochs",
             "batch_size", "lr", "seed", "uniform", "arch", "jobs"],
    "sim2real": ["data", "out", "rounds", "local_epochs", "batch_size", "lr",
                 "seed", "uniform", "arch", "jobs"],
    "eval": ["model", "data", "out"],
}


def run_from_manifest(manifest_path: str | Path) -> None:
    doc = json.loads(Path(manifest_path).read_text(encoding="utf-8"))
    sub = doc.get("subcommand")
    if sub not in _RUNNERS:
        raise ValueError(f"manifest names unknown subcommand {sub!r}")
    _RUNNERS[sub](doc["config"])


# ---------------------------------------------------------------------------
# Argument parsing


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--rounds", type=int)
    p.add_argument("--local-epochs", dest="local_epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--uniform", action="store_const", const=True,
                   help="fuse with uniform instead of sample-count weights")
    p.add_argument("--arch", help="architecture text (default: built-in 64x64x3 stack)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedroam", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--version", action="version", version=f"fedroam {__version__}")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("gen-data", help="generate environment datasets and splits")
    p.add_argument("--table", choices=["sim", "real"])
    p.add_argument("--total", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--holdout", type=int, help="also write a mixed hold-out of this size")
    p.add_argument("--val-fraction", dest="val_fraction", type=float)
    p.add_argument("--config")

    p = sub.add_parser("train", help="train one model from dataset files")
    p.add_argument("--regime", choices=["centralized", "federated"])
    p.add_argument("--data", help="comma-separated dataset base paths")
    p.add_argument("--out")
    _add_train_flags(p)
    p.add_argument("--config")

    p = sub.add_parser("serve", help="run the aggregation server")
    p.add_argument("--bind")
    p.add_argument("--port", type=int)
    p.add_argument("--clients", type=int)
    p.add_argument("--out")
    _add_train_flags(p)
    p.add_argument("--config")

    p = sub.add_parser("join", help="join a served run as one client")
    p.add_argument("--server", help="host:port")
    p.add_argument("--id")
    p.add_argument("--data")
    p.add_argument("--arch")
    p.add_argument("--config")

    p = sub.add_parser("grid", help="train and evaluate all combination columns")
    p.add_argument("--data", help="directory written by gen-data")
    p.add_argument("--table", choices=["sim", "real"])
    p.add_argument("--regime", choices=["both", "centralized", "federated"])
    p.add_argument("--out")
    p.add_argument("--jobs", type=int)
    _add_train_flags(p)
    p.add_argument("--config")

    p = sub.add_parser("sim2real", help="score sim-trained models on the hold-out")
    p.add_argument("--data", help="directory with sim splits plus the hold-out")
    p.add_argument("--out")
    p.add_argument("--jobs", type=int)
    _add_train_flags(p)
    p.add_argument("--config")

    p = sub.add_parser("eval", help="score one model file on one dataset")
    p.add_argument("--model")
    p.add_argument("--data")
    p.add_argument("--out")
    p.add_argument("--config")

    p = sub.add_parser("rerun", help="re-execute a run manifest bit-exactly")
    p.add_argument("manifest")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        if args.subcommand == "rerun":
            run_from_manifest(args.manifest)
        else:
            cfg = _resolve(args, _COMMAND_KEYS[args.subcommand])
            _RUNNERS[args.subcommand](cfg)
        return EXIT_OK
    except (netproto.ProtocolError, ConnectionError) as e:
        print(f"protocol error: {e}", file=sys.stderr)
        return EXIT_PROTOCOL
    except (FileNotFoundError, DatasetIOError, nn.ModelFormatError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_BAD_INPUT
    except Exception as e:  # noqa: BLE001 - last-resort boundary
        print(f"internal error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
