"""Command-line runner: partition, build-vocab, pretrain, finetune, evaluate, report."""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path
from typing import Sequence

import numpy as np

from . import federation as F
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ExperimentConfig, load_config
from .data import (ClientShard, ScenarioSpec, UrlRecord, label_histogram, load_csv, make_scenario,
                   partition_iid, stratified_split, synthesize_corpus)
from .errors import ConfigError, InputError, SplitFedError
from .metrics import METRIC_NAMES, aggregate_clients
from .model import FreezeMask, ModelConfig, client_shapes, head_shapes, init_model, server_shapes
from .tokenizer import Vocab, build_vocab

log = logging.getLogger("splitfed")

INDEX = "index.json"
MANIFEST = "manifest.json"
CHECKPOINT = "checkpoint.fswt"
ROUNDS = "rounds.jsonl"
PRETRAIN_LOG = "pretrain_log.jsonl"
SPLITS = ("pretrain", "train", "test")


def sha256(path: str | os.PathLike) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _dump(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def write_run_files(out: Path, cfg: ExperimentConfig, command: str, inputs: dict[str, Path],
                    outputs: list[str], report: str | None, started: float, **extra) -> None:
    """Resolved config, manifest, and (separately, since it varies) wall-clock timing."""
    (out / "config.txt").write_text(cfg.to_text(), encoding="utf-8")
    manifest = {
        "command": command,
        "config": cfg.as_dict(),
        "inputs": {name: {"file": Path(p).name, "sha256": sha256(p)} for name, p in sorted(inputs.items())},
        "outputs": sorted(outputs + ["config.txt", MANIFEST, "timing.json"]),
        "report": report,
        **extra,
    }
    _dump(out / MANIFEST, manifest)
    _dump(out / "timing.json", {"wall_clock_seconds": round(time.time() - started, 3)})


# ----------------------------------------------------------------- shards


def load_records(cfg: ExperimentConfig) -> list[UrlRecord]:
    src = cfg["data.source"]
    if src == "synth":
        return synthesize_corpus(cfg["data.synth.n"], cfg["data.synth.p"], cfg["seed"])
    return load_csv(src)


def cmd_partition(cfg: ExperimentConfig, out: Path) -> list[str]:
    started = time.time()
    records = load_records(cfg)
    rng = np.random.default_rng(cfg["seed"])
    pre, rest = stratified_split(records, cfg["data.pretrain_fraction"], rng)
    test, train = stratified_split(rest, cfg["data.test_fraction"], rng)
    k = cfg["fed.clients"]
    spec = ScenarioSpec(cfg["data.scenario"], cfg["data.alpha"], k, cfg["seed"])
    scenario = make_scenario(spec, train, test)
    pre_shards = partition_iid(pre, k, rng) if pre else [[] for _ in range(k)]
    # Larger pre-training shards go to clients with fewer fine-tuning records,
    # which evens out per-client totals when every split is IID.
    by_need = sorted(range(k), key=lambda i: (len(scenario.shards[i].train) + len(scenario.shards[i].test), i))
    by_size = sorted(range(k), key=lambda i: (-len(pre_shards[i]), i))
    dealt: list[list[UrlRecord]] = [[] for _ in range(k)]
    for client, shard in zip(by_need, by_size):
        dealt[client] = pre_shards[shard]
    pre_shards = dealt

    out.mkdir(parents=True, exist_ok=True)
    files, clients = [], []
    for shard, pre_k in zip(scenario.shards, pre_shards):
        name = f"client_{shard.client_id:03d}.csv"
        with open(out / name, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["url", "label", "split"])
            for split, rows in zip(SPLITS, (pre_k, shard.train, shard.test)):
                for r in rows:
                    w.writerow([r.url, r.label, split])
        files.append(name)
        clients.append({
            "client_id": shard.client_id,
            "file": name,
            "counts": {"pretrain": len(pre_k), "train": len(shard.train), "test": len(shard.test)},
            "label_histogram": {"pretrain": label_histogram(pre_k),
                                "train": label_histogram(shard.train),
                                "test": label_histogram(shard.test)},
        })
    props = None if scenario.proportions is None else scenario.proportions.tolist()
    _dump(out / INDEX, {"scenario": spec.kind.value, "alpha": spec.alpha, "seed": spec.seed,
                        "clients": clients, "dirichlet_proportions": props})
    inputs = {} if cfg["data.source"] == "synth" else {"data": Path(cfg["data.source"])}
    write_run_files(out, cfg, "partition", inputs, files + [INDEX], None, started)
    return files


def read_shards(shard_dir: Path) -> tuple[dict[int, list[UrlRecord]], dict[int, ClientShard]]:
    index_path = shard_dir / INDEX
    if not index_path.is_file():
        raise ConfigError(f"no shard index at {index_path}; run 'partition' first")
    index = json.loads(index_path.read_text(encoding="utf-8"))
    pre: dict[int, list[UrlRecord]] = {}
    shards: dict[int, ClientShard] = {}
    for entry in index["clients"]:
        cid = int(entry["client_id"])
        path = shard_dir / entry["file"]
        if not path.is_file():
            raise ConfigError(f"shard file missing: {path}")
        parts: dict[str, list[UrlRecord]] = {s: [] for s in SPLITS}
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            if next(reader, None) != ["url", "label", "split"]:
                raise InputError(f"{path}: expected header 'url,label,split'")
            for lineno, row in enumerate(reader, start=2):
                if len(row) != 3 or row[1] not in ("0", "1") or row[2] not in parts:
                    raise InputError(f"{path}: row {lineno}: malformed shard row")
                parts[row[2]].append(UrlRecord(row[0], int(row[1])))
        pre[cid] = parts["pretrain"]
        shards[cid] = ClientShard(cid, tuple(parts["train"]), tuple(parts["test"]))
    return pre, shards


def cmd_build_vocab(cfg: ExperimentConfig, shard_dir: Path, out: Path) -> Vocab:
    pre, shards = read_shards(shard_dir)
    corpus = [r.url for cid in sorted(pre) for r in pre[cid]]
    if not corpus:
        corpus = [r.url for cid in sorted(shards) for r in shards[cid].train]
    vocab = build_vocab(corpus, cfg["vocab.size"], cfg["vocab.min_count"])
    out.parent.mkdir(parents=True, exist_ok=True)
    vocab.save(out)
    return vocab


def model_config(cfg: ExperimentConfig, vocab: Vocab) -> ModelConfig:
    return ModelConfig.preset(cfg["model.preset"], vocab_size=len(vocab), max_len=cfg["model.max_len"],
                              seed=cfg["seed"])


def _load_vocab(path: Path) -> Vocab:
    if not path.is_file():
        raise ConfigError(f"vocabulary not found: {path}")
    return Vocab.load(path)


def load_state(path: Path, mcfg: ModelConfig) -> F.GlobalState:
    if not path.is_file():
        raise ConfigError(f"checkpoint not found: {path}")
    flat = load_checkpoint(path)
    expected = {**client_shapes(mcfg), **server_shapes(mcfg), **head_shapes(mcfg)}
    for name, shape in expected.items():
        if name in flat and flat[name].shape != shape:
            raise ConfigError(f"checkpoint {name} has shape {flat[name].shape}, model expects {shape}")
    return F.GlobalState.from_flat(mcfg, flat)


def check_vocab(checkpoint: Path, vocab_hash: str) -> None:
    manifest = checkpoint.parent / MANIFEST
    if not manifest.is_file():
        return
    recorded = json.loads(manifest.read_text(encoding="utf-8")).get("vocab_sha256")
    if recorded is not None and recorded != vocab_hash:
        raise ConfigError(f"vocabulary hash {vocab_hash[:12]} does not match the one "
                          f"recorded with {checkpoint} ({recorded[:12]})")


# --------------------------------------------------------------- training


def cmd_pretrain(cfg: ExperimentConfig, shard_dir: Path, vocab_path: Path | None, out: Path) -> Path:
    started = time.time()
    out.mkdir(parents=True, exist_ok=True)
    if vocab_path is None or not vocab_path.is_file():
        vocab_path = out / "vocab.txt"
        vocab = cmd_build_vocab(cfg, shard_dir, vocab_path)
    else:
        vocab = Vocab.load(vocab_path)
    pre, _ = read_shards(shard_dir)
    mcfg = model_config(cfg, vocab)
    state = F.GlobalState.from_parts(*init_model(mcfg))
    clients = {cid: F.PretrainClient(cid, recs, vocab, mcfg, cfg["seed"])
               for cid, recs in pre.items() if recs}
    if not clients and cfg["pretrain.rounds"] > 0:
        raise ConfigError("no client holds pre-training records")
    settings = F.PretrainSettings(lr=cfg["pretrain.lr"], batch_size=cfg["pretrain.batch"],
                                  local_epochs=cfg["pretrain.local_epochs"],
                                  fraction=cfg["pretrain.fraction"], max_steps=cfg["pretrain.steps"],
                                  workers=cfg["workers"])
    with open(out / PRETRAIN_LOG, "w", encoding="utf-8") as fh:
        def on_round(result: F.PretrainRoundResult) -> None:
            for line in result.log_lines():
                fh.write(line + "\n")
        if clients:
            state = F.pretrain(state, clients, cfg["pretrain.rounds"], settings, cfg["seed"],
                               cfg["transport"], cfg["transport.listen"], on_round)
    save_checkpoint(out / CHECKPOINT, state.all_weights())
    write_run_files(out, cfg, "pretrain", {"index": shard_dir / INDEX, "vocab": vocab_path},
                    [CHECKPOINT, PRETRAIN_LOG], PRETRAIN_LOG, started,
                    vocab_sha256=sha256(vocab_path))
    return out / CHECKPOINT


def finetune_settings(cfg: ExperimentConfig, mcfg: ModelConfig) -> F.FinetuneSettings:
    ala = None
    if cfg["fed.ala"]:
        ala = F.AlaConfig(lr=cfg["fed.ala.lr"], window=cfg["fed.ala.window"], tau=cfg["fed.ala.tau"],
                          fraction=cfg["fed.ala.fraction"], cap=cfg["fed.ala.cap"])
    return F.FinetuneSettings(lr=cfg["finetune.lr"], batch_size=cfg["finetune.batch"],
                              local_epochs=cfg["fed.local_epochs"], fraction=cfg["fed.fraction"],
                              ala=ala, freeze=FreezeMask.parse(cfg["freeze.layers"], mcfg),
                              workers=cfg["workers"])


def cmd_finetune(cfg: ExperimentConfig, shard_dir: Path, checkpoint: Path, vocab_path: Path,
                 out: Path) -> Path:
    started = time.time()
    vocab = _load_vocab(vocab_path)
    vocab_hash = sha256(vocab_path)
    check_vocab(checkpoint, vocab_hash)
    mcfg = model_config(cfg, vocab)
    state = load_state(checkpoint, mcfg)
    _, shards = read_shards(shard_dir)
    clients = {cid: F.FinetuneClient(s, vocab, mcfg, cfg["seed"]) for cid, s in shards.items()}
    empty = [cid for cid, c in clients.items() if c.n_k == 0]
    if empty:
        raise ConfigError(f"clients {empty} have no fine-tuning records")
    settings = finetune_settings(cfg, mcfg)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / ROUNDS, "w", encoding="utf-8") as fh:
        def on_round(result: F.FinetuneRoundResult) -> None:
            for rep in result.reports:
                fh.write(rep.to_json() + "\n")
        state = F.finetune(state, clients, cfg["fed.rounds"], settings, cfg["seed"],
                           cfg["transport"], cfg["transport.listen"], on_round)
    save_checkpoint(out / CHECKPOINT, state.all_weights())
    write_run_files(out, cfg, "finetune",
                    {"index": shard_dir / INDEX, "vocab": vocab_path, "checkpoint": checkpoint},
                    [CHECKPOINT, ROUNDS], ROUNDS, started, vocab_sha256=vocab_hash)
    return out / CHECKPOINT


def cmd_evaluate(cfg: ExperimentConfig, shard_dir: Path, checkpoint: Path,
                 vocab_path: Path) -> list[F.RoundReport]:
    vocab = _load_vocab(vocab_path)
    check_vocab(checkpoint, sha256(vocab_path))
    mcfg = model_config(cfg, vocab)
    weights = load_state(checkpoint, mcfg).finetune_weights()
    _, shards = read_shards(shard_dir)
    return [F.FinetuneClient(s, vocab, mcfg, cfg["seed"]).evaluate(weights, 0)
            for _, s in sorted(shards.items())]


# ----------------------------------------------------------------- report


def read_run(run_dir: Path) -> list[dict]:
    missing = [name for name in (ROUNDS, MANIFEST) if not (run_dir / name).is_file()]
    if missing:
        raise InputError(f"incomplete run directory {run_dir}: missing {', '.join(missing)}")
    with open(run_dir / ROUNDS, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def round_means(records: Sequence[dict]) -> dict[int, dict[str, float]]:
    by_round: dict[int, list[dict]] = {}
    for rec in records:
        by_round.setdefault(int(rec["round"]), []).append(rec)
    return {t: aggregate_clients(recs) for t, recs in sorted(by_round.items())}


def cmd_report(run_dirs: Sequence[Path], labels: Sequence[str] | None, out: Path) -> list[list[str]]:
    if labels and len(labels) != len(run_dirs):
        raise ConfigError(f"{len(labels)} labels given for {len(run_dirs)} runs")
    labels = list(labels) if labels else [p.name for p in run_dirs]
    series = [(label, round_means(read_run(d))) for label, d in zip(labels, run_dirs)]
    out.mkdir(parents=True, exist_ok=True)
    summary = [["run-label", *METRIC_NAMES]]
    with open(out / "accuracy_vs_round.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["round", "run-label", *METRIC_NAMES])
        for label, means in series:
            for t, m in means.items():
                w.writerow([t, label, *(repr(m[k]) for k in METRIC_NAMES)])
            if means:
                last = means[max(means)]
                summary.append([label, *(f"{last[k]:.4f}" for k in METRIC_NAMES)])
    with open(out / "summary.csv", "w", newline="", encoding="utf-8") as fh:
        csv.writer(fh, lineterminator="\n").writerows(summary)
    return summary


# -------------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="key=value config file")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="splitfed", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("partition", parents=[common], help="split a corpus into client shards")
    s.add_argument("--out", type=Path, required=True)

    s = sub.add_parser("build-vocab", parents=[common], help="build a URL vocabulary from shards")
    s.add_argument("--shards", type=Path, required=True)
    s.add_argument("--out", type=Path, required=True)

    s = sub.add_parser("pretrain", parents=[common], help="split MLM pre-training")
    s.add_argument("--shards", type=Path, required=True)
    s.add_argument("--vocab", type=Path, help="vocabulary file; built from the shards if absent")
    s.add_argument("--out", type=Path, required=True)

    s = sub.add_parser("finetune", parents=[common], help="federated classification fine-tuning")
    s.add_argument("--shards", type=Path, required=True)
    s.add_argument("--checkpoint", type=Path, required=True)
    s.add_argument("--vocab", type=Path, required=True)
    s.add_argument("--out", type=Path, required=True)

    s = sub.add_parser("evaluate", parents=[common], help="score a checkpoint on every client's test shard")
    s.add_argument("--shards", type=Path, required=True)
    s.add_argument("--checkpoint", type=Path, required=True)
    s.add_argument("--vocab", type=Path, required=True)
    s.add_argument("--out", type=Path, help="write JSON lines here instead of stdout")

    s = sub.add_parser("report", help="accuracy-vs-round CSV and a final-round summary")
    s.add_argument("runs", type=Path, nargs="+")
    s.add_argument("--labels", help="comma-separated series labels, one per run")
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("-v", "--verbose", action="store_true")
    return p


def run(args: argparse.Namespace) -> None:
    if args.command == "report":
        labels = args.labels.split(",") if args.labels else None
        for row in cmd_report(args.runs, labels, args.out):
            print("\t".join(row))
        return
    cfg = load_config(args.config, args.overrides)
    if args.command == "partition":
        files = cmd_partition(cfg, args.out)
        print(f"wrote {len(files)} shard files to {args.out}")
    elif args.command == "build-vocab":
        vocab = cmd_build_vocab(cfg, args.shards, args.out)
        print(f"wrote {len(vocab)} tokens to {args.out}")
    elif args.command == "pretrain":
        print(f"wrote {cmd_pretrain(cfg, args.shards, args.vocab, args.out)}")
    elif args.command == "finetune":
        print(f"wrote {cmd_finetune(cfg, args.shards, args.checkpoint, args.vocab, args.out)}")
    elif args.command == "evaluate":
        lines = [r.to_json() for r in cmd_evaluate(cfg, args.shards, args.checkpoint, args.vocab)]
        if args.out:
            args.out.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
        else:
            print("\n".join(lines))


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        run(args)
    except SplitFedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
