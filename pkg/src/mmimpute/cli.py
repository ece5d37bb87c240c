"""Command-line entry point: dataset -> train -> transmit -> evaluate -> report.

Every command writes ``manifest.json`` into its output directory. The
manifest records the resolved arguments, input and output hashes and the tool
version, and ``replay`` re-runs a command from it and checks the outputs
hash the same.

Exit codes: 0 success, 1 runtime failure (including incomplete reports),
2 usage or configuration error.
"""
import argparse
import hashlib
import json
import logging
import os
import sys

import numpy as np

from . import __version__
from .channel import ChannelModel, MaskedLatent, decode_wire, encode_wire, read_wire_log, stack, write_wire_log
from .dataset import IMAGE_SIDE, VOXEL_SIDE, build_split, read_dataset, write_dataset
from .errors import ConfigurationError, DomainError, FormatError, MMImputeError, PoisonedGradientError
from .evaluation import (DEFAULT_RATES, SPLITS, ExperimentGrid, GridResults, accuracy_two_ways,
                         correct_counts_from_frames, emit_report, erasure_masks, evaluate_cell, split_slug,
                         to_wire_precision)
from .imputation import STRATEGIES, STRATEGY_MODEL
from .model import MODEL_KINDS, LatentModel, LatentStats, TrainConfig, encode_means, train
from .tensor import read_container, write_container

log = logging.getLogger("mmimpute")

OUT_ROOT_ENV = "MMIMPUTE_OUT_ROOT"
MANIFEST = "manifest.json"
EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(MMImputeError):
    pass


# --- small helpers ---------------------------------------------------------------

def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _float_list(text):
    try:
        return [float(x) for x in str(text).split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _int_tuple(text):
    try:
        return tuple(int(x) for x in str(text).split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _name_list(text):
    return [x.strip() for x in str(text).split(",") if x.strip()]


def _kind_paths(items):
    """``["ae=a.ckpt", ...]`` -> ``{"ae": "a.ckpt"}``."""
    out = {}
    for item in items or []:
        kind, sep, path = item.partition("=")
        if not sep or kind not in MODEL_KINDS:
            raise UsageError(f"expected KIND=PATH with KIND in {MODEL_KINDS}, got {item!r}")
        out[kind] = path
    return out


def _mkdir(path):
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {path}: {exc.strerror}") from None
    if not os.access(path, os.W_OK):
        raise OSError(f"output directory {path} is not writable")


def _jsonable(value):
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, np.generic):
        return value.item()
    return value


def write_manifest(out_dir, command, args, inputs, outputs, extra=None, status="ok"):
    """Record how ``out_dir`` was produced. No timestamps, so reruns give identical bytes."""
    rec = {
        "tool": "mmimpute",
        "tool_version": __version__,
        "command": command,
        "status": status,
        "args": _jsonable({k: v for k, v in sorted(vars(args).items()) if k not in ("func", "config")}),
        "inputs": {k: {"path": p, "sha256": sha256_file(p)} for k, p in sorted(inputs.items())},
        "outputs": {os.path.relpath(p, out_dir): sha256_file(p) for p in sorted(outputs)},
    }
    if extra:
        rec.update(_jsonable(extra))
    path = os.path.join(out_dir, MANIFEST)
    with open(path, "w") as fh:
        json.dump(rec, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def read_config_file(path) -> dict:
    """``key = value`` lines; ``#`` starts a comment. Keys may use dashes or underscores."""
    out = {}
    try:
        fh = open(path)
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc.strerror}") from None
    with fh:
        for n, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise UsageError(f"{path}:{n}: expected key=value")
            out[key.strip().replace("-", "_")] = value.strip()
    return out


# --- argument parser -------------------------------------------------------------

def _common(p, default_sub):
    p.add_argument("--seed", type=int, default=0, help="seed for every random stream of this command")
    p.add_argument("--out", default=None,
                   help=f"output directory (default ${OUT_ROOT_ENV}/{default_sub}, or runs/{default_sub})")
    p.add_argument("--config", default=None, help="key=value file; command-line flags override it")


def _dataset_flags(p):
    p.add_argument("--train-per-category", type=int, default=100)
    p.add_argument("--test-per-category", type=int, default=25)
    p.add_argument("--voxel-side", type=int, default=VOXEL_SIDE)
    p.add_argument("--image-side", type=int, default=IMAGE_SIDE)


def _train_flags(p):
    d = TrainConfig()
    p.add_argument("--epochs", type=int, default=d.epochs)
    p.add_argument("--batch-size", type=int, default=d.batch_size)
    p.add_argument("--lr", type=float, default=d.lr)
    p.add_argument("--latent-dim", type=int, default=d.latent_dim)
    p.add_argument("--separation-sigma", type=float, default=d.separation_sigma)
    p.add_argument("--separation-weight", type=float, default=d.separation_weight)
    p.add_argument("--separation-margin", type=float, default=d.separation_margin)
    p.add_argument("--kl-weight", type=float, default=d.kl_weight)
    p.add_argument("--posterior-branch-prob", type=float, default=d.posterior_branch_prob)
    p.add_argument("--encoder-hidden", type=_int_tuple, default=d.encoder_hidden)
    p.add_argument("--decoder-hidden", type=_int_tuple, default=d.decoder_hidden)
    p.add_argument("--prior-hidden", type=_int_tuple, default=d.prior_hidden)


def _eval_flags(p):
    p.add_argument("--strategies", type=_name_list, default=list(STRATEGIES))
    p.add_argument("--workers", type=int, default=1, help="evaluation threads; never changes the output")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mmimpute", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"mmimpute {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("dataset", help="generate and cache the synthetic shape dataset")
    _common(p, "dataset")
    _dataset_flags(p)
    p.set_defaults(func=cmd_dataset)

    p = sub.add_parser("train", help="train an ae, vae or mmvae checkpoint")
    _common(p, "train")
    p.add_argument("--dataset", required=True, help="dataset cache written by 'dataset'")
    p.add_argument("--model", choices=MODEL_KINDS, default="mmvae")
    p.add_argument("--direction", choices=SPLITS, default=SPLITS[0],
                   help="train->test trains on the nominal train split, test->train on the test split")
    _train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("transmit", help="encode the evaluation split and pass it through a lossy channel")
    _common(p, "transmit")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--direction", choices=SPLITS, default=SPLITS[0])
    p.add_argument("--channel", choices=("bernoulli", "truncate"), default="bernoulli")
    p.add_argument("--rate", type=_float_list, default=list(DEFAULT_RATES),
                   help="missing rate(s) for the bernoulli channel, comma-separated")
    p.add_argument("--keep", type=int, default=None, help="leading elements kept by the truncate channel")
    p.add_argument("--trials", type=int, default=8, help="erasure draws per item")
    p.set_defaults(func=cmd_transmit)

    p = sub.add_parser("evaluate", help="impute, decode and score received wire logs")
    _common(p, "evaluate")
    p.add_argument("--checkpoint", action="append", required=True, metavar="KIND=PATH")
    p.add_argument("--wire", action="append", required=True, metavar="KIND=DIR",
                   help="transmit output directory holding wire logs produced with that checkpoint")
    p.add_argument("--dataset", required=True)
    _eval_flags(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="merge evaluation directories into one accuracy table")
    _common(p, "report")
    p.add_argument("evaluations", nargs="+", help="output directories of 'evaluate'")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("pipeline", help="run every stage end to end")
    _common(p, "pipeline")
    _dataset_flags(p)
    _train_flags(p)
    _eval_flags(p)
    p.add_argument("--models", type=_name_list, default=list(MODEL_KINDS))
    p.add_argument("--directions", type=_name_list, default=list(SPLITS))
    p.add_argument("--rate", type=_float_list, default=list(DEFAULT_RATES))
    p.add_argument("--trials", type=int, default=8)
    p.add_argument("--reverse-epochs", type=int, default=None,
                   help="epochs for test->train; default keeps the number of training samples seen equal")
    p.set_defaults(func=cmd_pipeline)

    p = sub.add_parser("replay", help="re-run a command from its manifest and compare output hashes")
    p.add_argument("manifest")
    p.add_argument("--out", default=None, help="where to write the rerun (default: a sibling '<dir>.replay')")
    p.set_defaults(func=cmd_replay, config=None)
    return parser


def parse_args(argv=None) -> argparse.Namespace:
    """Parse twice: once to find ``--config``, then with the file's values as defaults."""
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "config", None):
        values = read_config_file(args.config)
        sub = _subparser(parser, args.command)
        known = {a.dest: a for a in sub._actions}
        # one file may configure several commands; only keys no command knows are errors
        anywhere = {a.dest for p in _subparser(parser, None).values() for a in p._actions}
        defaults = {}
        for key, raw in values.items():
            action = known.get(key)
            if key in ("help", "config", "func") or key not in anywhere:
                raise UsageError(f"{args.config}: unknown key {key!r}")
            if action is None:
                continue
            try:
                defaults[key] = action.type(raw) if action.type else raw
            except (argparse.ArgumentTypeError, ValueError) as exc:
                raise UsageError(f"{args.config}: bad value for {key}: {exc}") from None
        sub.set_defaults(**defaults)
        args = parser.parse_args(argv)
    return args


def _subparser(parser, name):
    """The subparser called ``name``, or the name -> subparser map when ``name`` is None."""
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices if name is None else action.choices[name]
    raise KeyError(name)  # pragma: no cover


def _out_dir(args, name):
    if args.out:
        return args.out
    return os.path.join(os.environ.get(OUT_ROOT_ENV, "runs"), name)


def _train_config(args, kind, dataset, epochs=None) -> TrainConfig:
    return TrainConfig(
        latent_dim=args.latent_dim, image_side=dataset.W, voxel_side=dataset.D, num_labels=8, lr=args.lr,
        epochs=args.epochs if epochs is None else epochs, batch_size=args.batch_size,
        separation_sigma=args.separation_sigma, separation_weight=args.separation_weight,
        separation_margin=args.separation_margin, kl_weight=args.kl_weight, seed=args.seed, model_kind=kind,
        posterior_branch_prob=args.posterior_branch_prob, encoder_hidden=args.encoder_hidden,
        decoder_hidden=args.decoder_hidden, prior_hidden=args.prior_hidden)


def _splits(cache, direction):
    """(training arrays, evaluation arrays) for a split direction."""
    if direction == SPLITS[0]:
        return cache.train, cache.test
    return cache.test, cache.train


# --- commands --------------------------------------------------------------------

def cmd_dataset(args):
    for name in ("train_per_category", "test_per_category", "voxel_side", "image_side"):
        if getattr(args, name) < 1:
            raise UsageError(f"--{name.replace('_', '-')} must be >= 1")
    out = _out_dir(args, "dataset")
    _mkdir(out)
    split = build_split(args.train_per_category, args.test_per_category, args.seed)
    path = os.path.join(out, "dataset.mmds")
    digest = write_dataset(path, split, D=args.voxel_side, W=args.image_side)
    write_manifest(out, "dataset", args, {}, [path],
                   {"dataset_sha256": digest, "counts": {"train": len(split.train), "test": len(split.test)}})
    print(f"{len(split.train)} train / {len(split.test)} test items -> {path} (sha256 {digest[:16]})")
    return EXIT_OK


def _snapshot(model):
    return {
        "params": {k: v.copy() for k, v in model.params().items()},
        "m": {k: v.copy() for k, v in model.adam.first_moment.items()},
        "v": {k: v.copy() for k, v in model.adam.second_moment.items()},
        "step_count": model.adam.step_count,
        "trained_steps": model.trained_steps,
    }


def _restore(model, snap):
    for k, arr in model.params().items():
        arr[...] = snap["params"][k]
    model.adam.first_moment = {k: v.copy() for k, v in snap["m"].items()}
    model.adam.second_moment = {k: v.copy() for k, v in snap["v"].items()}
    model.adam.step_count = snap["step_count"]
    model.trained_steps = snap["trained_steps"]


def _write_loss_csv(path, history):
    cols = ("epoch", "total", "recon", "kl", "separation", "min_separation")
    with open(path, "w") as fh:
        fh.write(",".join(cols) + "\n")
        for row in history:
            cells = [str(row["epoch"])]
            for c in cols[1:]:
                v = row.get(c)
                cells.append("" if v is None else f"{v:.6f}")
            fh.write(",".join(cells) + "\n")


def cmd_train(args):
    cache = read_dataset(args.dataset)
    tr, _ = _splits(cache, args.direction)
    cfg = _train_config(args, args.model, cache)
    out = _out_dir(args, "train")
    _mkdir(out)
    model = LatentModel(cfg)
    history = []
    snap = _snapshot(model)

    def on_epoch(row):
        nonlocal snap
        if model.has_prior_bank:
            row["min_separation"] = model.prior_bank().min_separation()
        history.append(row)
        snap = _snapshot(model)
        log.info("epoch %d loss %.3f", row["epoch"], row["total"])

    ckpt = os.path.join(out, "model.ckpt")
    loss_csv = os.path.join(out, "loss.csv")
    status, code = "ok", EXIT_OK
    try:
        train(model, tr.images, tr.labels, tr.voxels, on_epoch=on_epoch)
    except PoisonedGradientError as exc:
        _restore(model, snap)
        if model.trained_steps:
            model.latent_stats = LatentStats.from_codes(encode_means(model, tr.images))
        status, code = f"failed: {exc}", EXIT_RUNTIME
        print(f"error: {exc}; kept the checkpoint from after epoch {len(history) - 1}", file=sys.stderr)
    model.save(ckpt)
    _write_loss_csv(loss_csv, history)
    extra = {"dataset_sha256": cache.sha256, "train_config": cfg.to_dict(), "checkpoint": ckpt}
    if model.has_prior_bank:
        bank = model.prior_bank()
        extra["min_separation"] = bank.min_separation()
        extra["separated"] = bank.is_separated()
    write_manifest(out, "train", args, {"dataset": args.dataset}, [ckpt, loss_csv], extra, status)
    if code == EXIT_OK:
        msg = f"trained {args.model} for {len(history)} epochs -> {ckpt}"
        if model.has_prior_bank:
            msg += f" (min modal gap {extra['min_separation']:.3f}, sigma {cfg.separation_sigma})"
        print(msg)
    return code


TRUTH = "truth.mmck"


def wire_name(channel: ChannelModel) -> str:
    return f"wire_{channel.tag}.log"


def cmd_transmit(args):
    if args.trials < 1:
        raise UsageError("--trials must be >= 1")
    if args.channel == "bernoulli":
        if args.keep is not None:
            raise UsageError("--keep applies to the truncate channel only")
        if not args.rate:
            raise UsageError("--rate needs at least one value")
        for r in args.rate:
            if not 0.0 <= r <= 1.0:
                raise UsageError(f"--rate {r} outside [0, 1]")
        channels = [ChannelModel("bernoulli", missing_rate=r, seed=args.seed) for r in args.rate]
        trials = args.trials
    else:
        if args.keep is None:
            raise UsageError("the truncate channel needs --keep")
        channels = [ChannelModel("truncate", keep_count=args.keep, seed=args.seed)]
        trials = 1
    model = LatentModel.load(args.checkpoint)
    cache = read_dataset(args.dataset)
    _, ev = _splits(cache, args.direction)
    if ev.images.shape[1] != model.config.image_side:
        raise FormatError(f"dataset image side {ev.images.shape[1]} != checkpoint image side "
                          f"{model.config.image_side}")
    out = _out_dir(args, "transmit")
    _mkdir(out)
    mu = encode_means(model, ev.images)
    wire_mu = to_wire_precision(mu)
    n, N = mu.shape
    outputs = []
    for ch in channels:
        if ch.kind == "bernoulli":
            masks = erasure_masks(n, trials, N, ch.missing_rate, args.seed).reshape(n * trials, N)
        else:
            masks = ch.masks(n, N, None)
        rows = np.repeat(wire_mu, trials, axis=0)
        frames = [encode_wire(MaskedLatent(v, m)) for v, m in zip(rows, masks)]
        path = os.path.join(out, wire_name(ch))
        write_wire_log(path, frames)
        outputs.append(path)
        print(f"{ch.tag}: {len(frames)} frames, mean present {masks.sum(1).mean():.2f}/{N} -> {path}")
    truth = os.path.join(out, TRUTH)
    meta = {"transmission": {"model_kind": model.kind, "latent_dim": N, "items": n, "trials": trials,
                             "direction": args.direction, "seed": args.seed,
                             "channels": [{"kind": c.kind, "missing_rate": c.missing_rate,
                                           "keep_count": c.keep_count, "tag": c.tag} for c in channels]}}
    write_container(truth, {"labels": ev.labels.astype(np.float64), "latents": mu}, meta)
    outputs.append(truth)
    write_manifest(out, "transmit", args, {"checkpoint": args.checkpoint, "dataset": args.dataset}, outputs,
                   {"dataset_sha256": cache.sha256})
    return EXIT_OK


def _load_transmission(wire_dir, model, name):
    arrays, meta = read_container(os.path.join(wire_dir, TRUTH))
    info = meta["transmission"]
    received = {}
    for ch in info["channels"]:
        if ch["kind"] != "bernoulli":
            continue
        frames = read_wire_log(os.path.join(wire_dir, f"wire_{ch['tag']}.log"))
        latents = [decode_wire(f) for f in frames]
        dims = {m.latent_dim for m in latents}
        for d in dims:
            if d != model.config.latent_dim:
                raise FormatError(f"{name}: wire frames carry latent length {d} but the checkpoint "
                                  f"latent dim is {model.config.latent_dim}")
        if len(latents) != info["items"] * info["trials"]:
            raise FormatError(f"{name}: {len(latents)} frames, sidecar promises "
                              f"{info['items']} items x {info['trials']} trials")
        received[ch["missing_rate"]] = stack(latents)
    return info, arrays["labels"].astype(np.int64), received


def cmd_evaluate(args):
    ckpts = _kind_paths(args.checkpoint)
    wires = _kind_paths(args.wire)
    for s in args.strategies:
        if s not in STRATEGIES:
            raise UsageError(f"unknown strategy {s!r}; choose from {STRATEGIES}")
    models = {k: LatentModel.load(p) for k, p in ckpts.items()}
    for k, m in models.items():
        if m.kind != k:
            raise ConfigurationError(f"checkpoint given as {k}= is a {m.kind} checkpoint")
    for s in args.strategies:
        need = STRATEGY_MODEL[s]
        if need not in models:
            raise ConfigurationError(f"strategy {s} needs a {need} checkpoint (--checkpoint {need}=PATH)")
        if need not in wires:
            raise ConfigurationError(f"strategy {s} needs a {need} transmission (--wire {need}=DIR)")
        if s in ("mvae-a", "mvae-s") and not models[need].has_prior_bank:  # pragma: no cover - kind check
            raise ConfigurationError(f"strategy {s} needs a checkpoint with a prior bank")
    cache = read_dataset(args.dataset)
    received, info = {}, None
    for k in sorted(set(STRATEGY_MODEL[s] for s in args.strategies)):
        info_k, labels, rx = _load_transmission(wires[k], models[k], f"{k} transmission")
        if info is not None and (info_k["direction"], info_k["trials"], info_k["seed"]) != \
                (info["direction"], info["trials"], info["seed"]):
            raise ConfigurationError("transmissions disagree on direction, trials or seed")
        info = info_k
        received[k] = rx
    _, ev = _splits(cache, info["direction"])
    if len(labels) != len(ev.labels) or not np.array_equal(labels, ev.labels):
        raise FormatError("sidecar labels do not match the dataset evaluation split")
    rates = sorted(set.intersection(*[set(rx) for rx in received.values()]) - {0.0, 1.0})
    if not rates:
        raise ConfigurationError("no common missing rate in (0, 1) across the transmissions")
    grid = ExperimentGrid(missing_rates=rates, strategies=args.strategies, split_direction=info["direction"],
                          trials_per_item=info["trials"], seed=info["seed"])
    results = GridResults(grid)
    trials = info["trials"]
    if "mmvae" in received:
        means = models["mmvae"].prior_bank().means
        for r in rates:
            values, mask = received["mmvae"][r]
            correct = correct_counts_from_frames(values, mask, labels, means, trials)
            per_item, pooled = accuracy_two_ways(correct, trials)
            assert per_item == pooled
            results.accuracy[r] = 100.0 * float(pooled)
    targets = np.repeat(ev.voxels.reshape(len(ev.labels), -1), trials, axis=0)
    cells = [(s, r) for s in grid.strategies for r in rates]

    def run(cell):
        s, r = cell
        values, mask = received[STRATEGY_MODEL[s]][r]
        return evaluate_cell(models[STRATEGY_MODEL[s]], s, values, mask, targets, grid.thresholds, r)

    from concurrent.futures import ThreadPoolExecutor
    with ThreadPoolExecutor(max_workers=max(1, args.workers)) as pool:
        for cell, res in zip(cells, pool.map(run, cells)):
            results.cells[cell] = res
    out = _out_dir(args, "evaluate")
    _mkdir(out)
    paths, complete = emit_report(grid, results, out)
    inputs = {f"checkpoint.{k}": p for k, p in ckpts.items()}
    inputs.update({f"wire.{k}": os.path.join(wires[k], TRUTH) for k in received})
    inputs["dataset"] = args.dataset
    write_manifest(out, "evaluate", args, inputs, paths,
                   {"grid": {"rates": rates, "strategies": list(grid.strategies), "trials": trials,
                             "direction": grid.split_direction, "seed": grid.seed}},
                   "ok" if complete else "incomplete")
    for r in rates:
        acc = results.accuracy.get(r)
        aucs = "  ".join(f"{s} {results.cells[(s, r)].auc:.4f}" for s in grid.strategies)
        head = f"rate {r:.2f}" + (f"  acc {acc:6.2f}%" if acc is not None else "")
        print(f"{head}  pr-auc: {aucs}")
    if not complete:
        print("warning: report is incomplete (no mmvae transmission for the accuracy table)", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_report(args):
    rows, rates = {}, None
    inputs = {}
    for k, d in enumerate(args.evaluations):
        with open(os.path.join(d, MANIFEST)) as fh:
            man = json.load(fh)
        if man.get("command") != "evaluate":
            raise UsageError(f"{d} is not an evaluate output directory")
        direction = man["grid"]["direction"]
        acc = os.path.join(d, f"acc_{split_slug(direction)}.csv")
        inputs[f"acc.{k}"] = acc
        with open(acc) as fh:
            lines = fh.read().splitlines()
        header = lines[0].split(",")[1:]
        if rates is None:
            rates = header
        elif header != rates:
            raise ConfigurationError(f"{acc}: rate columns {header} differ from {rates}")
        for line in lines[1:]:
            cells = line.split(",")
            rows[cells[0]] = cells[1:]
    out = _out_dir(args, "report")
    _mkdir(out)
    order = [s for s in SPLITS if s in rows]
    path = os.path.join(out, "acc_" + "_".join(split_slug(s) for s in order) + ".csv")
    with open(path, "w") as fh:
        fh.write(",".join(["split"] + rates) + "\n")
        for s in order:
            fh.write(",".join([s] + rows[s]) + "\n")
    write_manifest(out, "report", args, inputs, [path])
    with open(path) as fh:
        sys.stdout.write(fh.read())
    complete = len(order) == len(SPLITS) and all(c != "" for s in order for c in rows[s])
    return EXIT_OK if complete else EXIT_RUNTIME


def _sub_args(parent, **fields):
    """Namespace for a sub-command: parent's values plus overrides."""
    ns = argparse.Namespace(**{k: v for k, v in vars(parent).items() if k not in ("func", "config")})
    ns.config = None
    for k, v in fields.items():
        setattr(ns, k, v)
    return ns


def cmd_pipeline(args):
    for k in args.models:
        if k not in MODEL_KINDS:
            raise UsageError(f"unknown model kind {k!r}")
    for d in args.directions:
        if d not in SPLITS:
            raise UsageError(f"unknown direction {d!r}; choose from {SPLITS}")
    root = _out_dir(args, "pipeline")
    _mkdir(root)
    code = cmd_dataset(_sub_args(args, out=os.path.join(root, "dataset")))
    dataset = os.path.join(root, "dataset", "dataset.mmds")
    n_fwd, n_rev = args.train_per_category, args.test_per_category
    outputs, evals = [], []
    for direction in args.directions:
        slug = split_slug(direction)
        epochs = args.epochs
        if direction != SPLITS[0]:
            epochs = args.reverse_epochs or max(1, round(args.epochs * n_fwd / n_rev))
        ckpts, wires = [], []
        for kind in args.models:
            tdir = os.path.join(root, "train", slug, kind)
            rc = cmd_train(_sub_args(args, out=tdir, dataset=dataset, model=kind, direction=direction,
                                     epochs=epochs))
            if rc != EXIT_OK:
                return rc
            ckpt = os.path.join(tdir, "model.ckpt")
            wdir = os.path.join(root, "transmit", slug, kind)
            cmd_transmit(_sub_args(args, out=wdir, checkpoint=ckpt, dataset=dataset, direction=direction,
                                   channel="bernoulli", keep=None))
            ckpts.append(f"{kind}={ckpt}")
            wires.append(f"{kind}={wdir}")
            outputs.append(ckpt)
        strategies = [s for s in args.strategies if STRATEGY_MODEL[s] in args.models]
        edir = os.path.join(root, "evaluate", slug)
        code = max(code, cmd_evaluate(_sub_args(args, out=edir, checkpoint=ckpts, wire=wires, dataset=dataset,
                                                strategies=strategies)))
        evals.append(edir)
        outputs += [os.path.join(edir, f) for f in sorted(os.listdir(edir)) if f.endswith(".csv")]
    rdir = os.path.join(root, "report")
    if "mmvae" in args.models:
        code = max(code, cmd_report(_sub_args(args, out=rdir, evaluations=evals)))
        outputs += [os.path.join(rdir, f) for f in sorted(os.listdir(rdir)) if f.endswith(".csv")]
    write_manifest(root, "pipeline", args, {}, outputs)
    return code


def cmd_replay(args):
    with open(args.manifest) as fh:
        man = json.load(fh)
    src = os.path.dirname(os.path.abspath(args.manifest))
    out = args.out or src.rstrip(os.sep) + ".replay"
    parser = build_parser()
    sub = _subparser(parser, man["command"])
    ns = argparse.Namespace(**{a.dest: a.default for a in sub._actions if a.dest != "help"})
    for k, v in man["args"].items():
        setattr(ns, k, tuple(v) if k.endswith("_hidden") else v)
    ns.out, ns.config, ns.command = out, None, man["command"]
    code = sub.get_default("func")(ns)
    with open(os.path.join(out, MANIFEST)) as fh:
        again = json.load(fh)
    diffs = sorted(k for k in set(man["outputs"]) | set(again["outputs"])
                   if man["outputs"].get(k) != again["outputs"].get(k))
    if diffs:
        for k in diffs:
            print(f"differs: {k}", file=sys.stderr)
        return EXIT_RUNTIME
    print(f"replayed {man['command']} into {out}: {len(again['outputs'])} outputs byte-identical")
    return code


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # argparse: --help, --version or a bad flag
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigurationError, DomainError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (MMImputeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
