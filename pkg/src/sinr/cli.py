"""
Command-line entry point.

Settings come from three layers, later ones winning: the ``--config`` file
(``key = value`` lines), environment variables prefixed ``SINR_`` (for
example ``SINR_MAX_EPOCHS=5``), and explicit command-line flags.  Every
subcommand writes plain CSV under ``--out``.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import checkpoint
from .analytics import cdf, curve_from_points, latency_retx, latency_sinr, pmf_accuracy_retx, pmf_accuracy_sinr
from .channel import ChannelConfig, Permutation, sample_rng, transmit_batch
from .data import (Dataset, SyntheticSpec, env_overrides, load_cifar10, load_idx, make_synthetic, read_config,
                   read_csv, write_csv)
from .errors import ConfigError, SinrError
from .experiments import FIGURES, Sweep, SweepConfig
from .model import BlockSpec, ModelSpec, build_model, describe, load_pair, save_submodel, split_at
from .trainer import TrainConfig, split_train_validation, train
from .transport import SessionSetup, UdpReceiver, UdpSender, parse_endpoint, run_loopback

log = logging.getLogger("sinr")

TRAIN_KEYS = {"max_epochs", "patience", "batch_size", "lr", "dropout"}
DATA_KEYS = {"dataset", "samples_per_class", "image_size", "noise", "separation", "n_test"}
MODEL_KEYS = {"blocks", "convs", "fc", "last_pool"}
CHANNEL_KEYS = {"p", "packet_size", "throughput", "mode", "scale", "granularity", "division"}
SWEEP_KEYS = {"seeds", "rates", "losses", "trials"}
KNOWN_KEYS = TRAIN_KEYS | DATA_KEYS | MODEL_KEYS | CHANNEL_KEYS | SWEEP_KEYS | {"seed"}

DEFAULTS = {
    "dataset": "synthetic", "samples_per_class": "200", "image_size": "16", "noise": "0.3", "separation": "1.0",
    "n_test": "1000", "blocks": "16,32,64", "convs": "2", "fc": "64,10", "last_pool": "false",
    "p": "0.0", "packet_size": "500", "throughput": "9e6", "mode": "sim", "scale": "nominal",
    "granularity": "element", "seed": "0",
}


# --- settings ------------------------------------------------------------------------

def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in str(text).split(",") if v.strip())


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in str(text).split(",") if v.strip())


def _bool(text: str) -> bool:
    if str(text).lower() in ("1", "true", "yes", "on"):
        return True
    if str(text).lower() in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {text!r}")


def collect_settings(args: argparse.Namespace, environ=None) -> dict[str, str]:
    settings = dict(DEFAULTS)
    layers = []
    if args.config:
        layers.append(read_config(args.config))
    layers.append(env_overrides(environ=environ))
    flags = {k: v for k, v in vars(args).items() if k in KNOWN_KEYS and v is not None}
    layers.append({k: str(v) for k, v in flags.items()})
    for layer in layers:
        for key in layer:
            if key not in KNOWN_KEYS:
                raise ConfigError(f"unknown setting {key!r}")
        settings.update(layer)
    return settings


def train_config(settings) -> TrainConfig:
    picked = {k: settings[k] for k in TRAIN_KEYS if k in settings}
    picked["seed"] = settings["seed"]
    return TrainConfig.from_mapping(picked)


def channel_config(settings) -> ChannelConfig:
    return ChannelConfig(p=float(settings["p"]), packet_size=int(settings["packet_size"]),
                         throughput=float(settings["throughput"]), seed=int(settings["seed"]),
                         mode=settings["mode"], scale=settings["scale"])


def model_spec(settings, input_shape) -> ModelSpec:
    channels = _ints(settings["blocks"])
    convs = int(settings["convs"])
    last_pool = _bool(settings["last_pool"])
    blocks = [BlockSpec(convs, c, pool=(k < len(channels) - 1 or last_pool)) for k, c in enumerate(channels)]
    return ModelSpec(blocks, _ints(settings["fc"]), input_shape=tuple(input_shape))


def synthetic_spec(settings, seed: int) -> SyntheticSpec:
    return SyntheticSpec(samples_per_class=int(settings["samples_per_class"]), size=int(settings["image_size"]),
                         noise=float(settings["noise"]), separation=float(settings["separation"]), seed=seed)


def load_dataset(settings, part: str) -> Dataset:
    """``part`` is "train" or "test".

    ``dataset`` is ``synthetic`` (the first ``n_test`` samples are the test
    part), ``cifar10:<dir>`` or ``idx:<images>,<labels>`` (the whole file
    serves as either part).
    """
    kind, _, arg = settings["dataset"].partition(":")
    if kind == "synthetic":
        ds = make_synthetic(synthetic_spec(settings, int(settings["seed"])))
        n_test = int(settings["n_test"])
        return ds.head(n_test) if part == "test" else ds.subset(slice(n_test, len(ds)))
    if kind == "cifar10":
        train_ds, test_ds = load_cifar10(arg)
        return test_ds if part == "test" else train_ds
    if kind == "idx":
        images, _, labels = arg.partition(",")
        return load_idx(images, labels)
    raise ConfigError(f"unknown dataset {settings['dataset']!r}; use synthetic, cifar10:<dir> or idx:<img>,<lbl>")


# --- subcommands -----------------------------------------------------------------------

def cmd_train(args, settings) -> int:
    out = Path(args.out)
    data = load_dataset(settings, "train")
    update, val = split_train_validation(data, int(settings["seed"]))
    cfg = train_config(settings)
    spec = model_spec(settings, data.shape)
    if cfg.dropout is not None:
        spec = spec.with_dropout(cfg.dropout)
    model = build_model(spec, int(settings["seed"]))
    model, report = train(model, update, val, cfg)
    out.mkdir(parents=True, exist_ok=True)
    checkpoint.save_network(out / "model.sinr", model)
    report.to_csv(out / "train_report.csv")
    print(report.summary())
    print(f"final_val_loss={report.val_loss[report.best_epoch - 1]!r}")
    return 0


def cmd_split(args, settings) -> int:
    out = Path(args.out)
    model = checkpoint.load_network(args.checkpoint)
    division = int(settings.get("division", 1))
    pair = split_at(model, division)
    out.mkdir(parents=True, exist_ok=True)
    save_submodel(out / "input.sinr", pair.input_sub)
    save_submodel(out / "output.sinr", pair.output_sub)
    rows = [(b, "x".join(map(str, shape)), n, n * 4) for b, shape, n in describe(model)]
    write_csv(out / "division_points.csv", ["block", "shape", "n_elem", "bytes"], rows)
    print(f"division={division} intermediate={pair.intermediate_shape} n_elem={pair.n_elem}")
    return 0


def _infer_rows(labels, logits, fractions, latency):
    pred = logits.argmax(axis=1)
    return [(i, int(labels[i]), int(pred[i]), int(pred[i] == labels[i]), fractions[i], latency)
            for i in range(len(labels))]


def cmd_infer(args, settings) -> int:
    out = Path(args.out)
    pair = load_pair(args.input_sub, args.output_sub)
    data = load_dataset(settings, "test")
    if args.limit:
        data = data.head(args.limit)
    chan = channel_config(settings)
    n_t = chan.n_packets(pair.n_elem)
    latency = n_t * chan.slot_time
    rngs = [sample_rng(chan.seed, i) for i in range(len(data))]
    perm = Permutation.from_seed(chan.seed, pair.n_elem)

    if chan.mode == "sim":
        rx, fractions = transmit_batch(pair.intermediate(data.images), perm, chan, rngs, return_fraction=True)
    elif args.connect:
        y = pair.intermediate(data.images)
        setup = SessionSetup(int(settings["seed"]) & 0xFFFF, chan.seed, pair.n_elem, chan.p)
        with UdpSender(parse_endpoint(args.connect), chan, setup) as tx:
            tx.connect()
            for i in range(len(data)):
                tx.send(y[i], i, rngs[i] if chan.p > 0 else None)
        print(f"sent {len(data)} tensors, {n_t} datagrams each")
        return 0
    elif args.listen:
        rx = np.zeros((len(data), pair.n_elem))
        fractions = np.zeros(len(data))
        with UdpReceiver(parse_endpoint(args.listen), chan) as server:
            server.accept(timeout=args.timeout)
            if server.session.n_elem != pair.n_elem:
                raise ConfigError(f"device sends {server.session.n_elem} elements, output sub-model expects "
                                  f"{pair.n_elem}")
            for i in range(len(data)):
                _, rec = server.recv()
                rx[i], fractions[i] = rec.values, rec.received_fraction
    else:
        res = run_loopback(pair.intermediate(data.images), chan, rngs if chan.p > 0 else None)
        rx, fractions = res.values, res.received_fraction

    logits = pair.output_sub(rx)
    acc = float(np.mean(logits.argmax(axis=1) == data.labels))
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "infer.csv", ["index", "label", "prediction", "correct", "received_fraction", "latency_s"],
              _infer_rows(data.labels, logits, fractions, latency))
    print(f"accuracy={acc!r} samples={len(data)} p={chan.p} n_t={n_t} latency_s={latency!r}")
    return 0


def cmd_analyze(args, settings) -> int:
    out = Path(args.out)
    chan = channel_config(settings)
    p = chan.p
    l, b = chan.packet_size, chan.throughput
    dists = {("sinr", "latency"): latency_sinr(args.nt, l, b), ("retx", "latency"): latency_retx(args.nt, p, l, b)}
    if args.curve:
        rows = read_csv(args.curve)
        curve = curve_from_points([float(r["alpha"]) for r in rows], [float(r["accuracy"]) for r in rows])
        n_int = args.n_int or args.nt
        dists[("sinr", "accuracy")] = pmf_accuracy_sinr(args.nt, n_int, p, curve)
        dists[("retx", "accuracy")] = pmf_accuracy_retx(curve)
    out_rows = []
    for (method, metric), pmf in dists.items():
        xs, cs = cdf(pmf)
        out_rows += [(method, metric, x, m, c) for x, m, c in zip(xs, pmf.masses, cs)]
        print(f"{method} {metric}: mean={pmf.mean()!r} variance={pmf.variance()!r} atoms={len(xs)}")
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "analyze.csv", ["method", "metric", "value", "mass", "cum_mass"], out_rows)
    return 0


def sweep_config(settings) -> SweepConfig:
    size = int(settings["image_size"])
    cfg = SweepConfig(model=model_spec(settings, (3, size, size)),
                      data=synthetic_spec(settings, int(settings["seed"])),
                      train=train_config(settings), n_test=int(settings["n_test"]),
                      channel=replace(channel_config(settings), p=0.0),
                      granularity=settings["granularity"])
    if "seeds" in settings:
        cfg.seeds = _ints(settings["seeds"])
    if "rates" in settings:
        cfg.rates = _floats(settings["rates"])
    if "losses" in settings:
        cfg.losses = _floats(settings["losses"])
    if "trials" in settings:
        cfg.trials = int(settings["trials"])
    if "max_epochs" not in settings:
        cfg.train = replace(cfg.train, max_epochs=30)
    return cfg


def cmd_experiment(args, settings) -> int:
    if settings["dataset"] != "synthetic":
        raise ConfigError("experiments run on the synthetic desk-scale dataset")
    sweep = Sweep(sweep_config(settings))
    t0 = time.perf_counter()
    for path in sweep.run(args.figure, args.out):
        print(path)
    log.info("%s finished in %.1f s", args.figure, time.perf_counter() - t0)
    return 0


# --- parser ----------------------------------------------------------------------------

def _channel_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--p", type=float, help="packet loss rate")
    p.add_argument("--packet-size", dest="packet_size", type=int, help="bytes per datagram, header included")
    p.add_argument("--throughput", type=float, help="link rate in bit/s")
    p.add_argument("--mode", choices=["sim", "udp"])


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sinr", description="Split inference over a lossy link, no retransmission")
    parser.add_argument("--config", help="key = value settings file")
    parser.add_argument("--seed", type=int, help="run seed (u64)")
    parser.add_argument("--out", default="out", help="output directory")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model, write model.sinr and train_report.csv")
    t.add_argument("--dataset")
    t.add_argument("--dropout", type=float, help="dropout rate for every dropout layer")
    t.add_argument("--max-epochs", dest="max_epochs", type=int)
    t.add_argument("--patience", type=int)
    t.add_argument("--batch-size", dest="batch_size", type=int)
    t.add_argument("--lr", type=float)
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("split", help="cut a checkpoint into input.sinr and output.sinr")
    s.add_argument("checkpoint")
    s.add_argument("--division", type=int, help="conv block after which to cut (1-based)")
    s.set_defaults(func=cmd_split)

    i = sub.add_parser("infer", help="run split inference through the channel")
    i.add_argument("input_sub")
    i.add_argument("output_sub")
    i.add_argument("--dataset")
    i.add_argument("--limit", type=int, help="use only the first N test samples")
    _channel_flags(i)
    i.add_argument("--listen", help="host:port; act as the edge server")
    i.add_argument("--connect", help="host:port; act as the device")
    i.add_argument("--timeout", type=float, default=30.0, help="seconds to wait for the device")
    i.set_defaults(func=cmd_infer)

    a = sub.add_parser("analyze", help="latency and accuracy distributions")
    a.add_argument("--nt", type=int, required=True, help="packets per representation")
    a.add_argument("--n-int", dest="n_int", type=int, help="packets carrying the representation (default nt)")
    a.add_argument("--p", type=float)
    a.add_argument("--l", dest="packet_size", type=int, help="packet size in bytes")
    a.add_argument("--b", dest="throughput", type=float, help="throughput in bit/s")
    a.add_argument("--curve", help="CSV with alpha,accuracy columns")
    a.set_defaults(func=cmd_analyze)

    e = sub.add_parser("experiment", help="desk-scale figure sweeps as CSV")
    e.add_argument("figure", choices=FIGURES)
    e.add_argument("--seeds", help="comma-separated seeds")
    e.add_argument("--max-epochs", dest="max_epochs", type=int)
    e.add_argument("--trials", type=int)
    e.set_defaults(func=cmd_experiment)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        settings = collect_settings(args)
        return args.func(args, settings)
    except (SinrError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
