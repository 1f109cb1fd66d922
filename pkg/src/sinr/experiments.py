"""
Desk-scale sweeps: latency/accuracy CDFs, clean accuracy vs training dropout,
and degradation vs packet loss per dropout rate and per division point.

Every sweep writes plain CSV.  Models are trained once per (seed, rate)
and reused across figures within one :class:`Sweep`.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .analytics import (ALPHA_GRID, AccuracyCurve, cdf, latency_retx, latency_sinr, monte_carlo_check,
                        pmf_accuracy_retx, pmf_accuracy_sinr, pmf_received)
from .channel import ChannelConfig, Permutation, drop_packets, packetize, retransmit_baseline
from .data import Dataset, SyntheticSpec, make_synthetic, write_csv
from .model import BlockSpec, ModelSpec, build_model, split_at
from .nn import Network
from .trainer import TrainConfig, TrainReport, evaluate_accuracy, split_train_validation, train

log = logging.getLogger(__name__)

FIGURES = ("fig3", "fig4", "fig5", "fig6")
LOSS_GRID = tuple(round(0.1 * k, 1) for k in range(10))


def desk_model_spec(size: int = 16) -> ModelSpec:
    """Three two-conv blocks (16/32/64 channels); the last block keeps its resolution."""
    return ModelSpec([BlockSpec(2, 16), BlockSpec(2, 32), BlockSpec(2, 64, pool=False)], (64, 10),
                     input_shape=(3, size, size))


@dataclass
class SweepConfig:
    seeds: tuple[int, ...] = (0, 1, 2)
    rates: tuple[float, ...] = (0.0, 0.1, 0.2, 0.4)
    losses: tuple[float, ...] = LOSS_GRID
    fig5_division: int = 1
    fig6_rates: tuple[float, ...] = (0.0, 0.2)
    fig3_p: float = 0.2
    fig3_division: int = 1
    fig3_rate: float = 0.2
    trials: int = 100_000
    n_test: int = 1000
    granularity: str = "element"
    model: ModelSpec = field(default_factory=desk_model_spec)
    data: SyntheticSpec = field(default_factory=lambda: SyntheticSpec(samples_per_class=200, size=16, noise=0.3))
    train: TrainConfig = field(default_factory=lambda: TrainConfig(max_epochs=30))
    channel: ChannelConfig = field(default_factory=ChannelConfig)


class Sweep:
    """Holds the per-seed datasets and the trained models of one run."""

    def __init__(self, cfg: SweepConfig | None = None):
        self.cfg = cfg or SweepConfig()
        self._data: dict[int, tuple[Dataset, Dataset, Dataset]] = {}
        self._models: dict[tuple[int, float], tuple[Network, TrainReport]] = {}

    def data(self, seed: int) -> tuple[Dataset, Dataset, Dataset]:
        """(update, validation, test) for one seed."""
        if seed not in self._data:
            ds = make_synthetic(replace(self.cfg.data, seed=seed))
            test = ds.head(self.cfg.n_test)
            update, val = split_train_validation(ds.subset(slice(self.cfg.n_test, len(ds))), seed)
            self._data[seed] = (update, val, test)
        return self._data[seed]

    def model(self, seed: int, rate: float) -> tuple[Network, TrainReport]:
        key = (seed, float(rate))
        if key not in self._models:
            update, val, _ = self.data(seed)
            net = build_model(self.cfg.model.with_dropout(rate), seed)
            net, report = train(net, update, val, replace(self.cfg.train, seed=seed, dropout=None))
            log.info("seed %d rate %.2f: %s", seed, rate, report.summary())
            self._models[key] = (net, report)
        return self._models[key]

    def clean_accuracy(self, seed: int, rate: float) -> float:
        return evaluate_accuracy(self.model(seed, rate)[0], self.data(seed)[2])

    def lossy_accuracy(self, seed: int, rate: float, p: float, division: int) -> float:
        if p == 0.0:
            return self.clean_accuracy(seed, rate)
        channel = replace(self.cfg.channel, p=p, seed=seed)
        return evaluate_accuracy(self.model(seed, rate)[0], self.data(seed)[2], channel,
                                 division=division, granularity=self.cfg.granularity)

    def degradation(self, seed: int, rate: float, p: float, division: int) -> float:
        """Clean accuracy of the same model minus its accuracy at loss ``p``."""
        return self.clean_accuracy(seed, rate) - self.lossy_accuracy(seed, rate, p, division)

    def accuracy_curve(self, seed: int, rate: float, division: int) -> AccuracyCurve:
        """acc(alpha) on the alpha grid, alpha = percent of the representation kept."""
        model, test = self.model(seed, rate)[0], self.data(seed)[2]
        accs = []
        for alpha in ALPHA_GRID:
            if alpha == 0:
                pair = split_at(model, division)
                zeros = np.zeros((len(test), pair.n_elem))
                logits = pair.output_sub(zeros)
                accs.append(float(np.mean(logits.argmax(axis=1) == test.labels)))
            else:
                accs.append(self.lossy_accuracy(seed, rate, round(1 - alpha / 100, 10), division))
        return AccuracyCurve(ALPHA_GRID, np.array(accs))

    # --- figures --------------------------------------------------------------------

    def fig3(self, out: Path) -> list[Path]:
        """Analytic and Monte Carlo CDFs of accuracy and latency, with and without retransmission."""
        c, seed = self.cfg, self.cfg.seeds[0]
        model = self.model(seed, c.fig3_rate)[0]
        n_elem = split_at(model, c.fig3_division).n_elem
        chan = replace(c.channel, p=c.fig3_p, seed=seed)
        n_t = chan.n_packets(n_elem)
        curve = self.accuracy_curve(seed, c.fig3_rate, c.fig3_division)
        T = chan.slot_time

        dists = {
            ("sinr", "accuracy"): pmf_accuracy_sinr(n_t, n_t, c.fig3_p, curve),
            ("retx", "accuracy"): pmf_accuracy_retx(curve),
            ("sinr", "latency"): latency_sinr(n_t, chan.packet_size, chan.throughput),
            ("retx", "latency"): latency_retx(n_t, c.fig3_p, chan.packet_size, chan.throughput),
        }
        rows = []
        for (method, metric), pmf in dists.items():
            xs, cs = cdf(pmf)
            rows += [(method, metric, x, m, cm) for x, m, cm in zip(xs, pmf.masses, cs)]
        cdf_path = write_csv(out / "fig3_cdf.csv", ["method", "metric", "value", "mass", "cum_mass"], rows)

        # Monte Carlo through the packet-level channel
        packets = packetize(np.zeros(n_elem), Permutation.identity(n_elem), chan)
        rng = np.random.default_rng(seed)
        received = np.array([len(drop_packets(packets, c.fig3_p, rng)) for _ in range(c.trials)])
        sent = np.array([retransmit_baseline(packets, c.fig3_p, rng)[1].sum() for _ in range(c.trials)])
        samples = {
            ("sinr", "received_packets"): (received.astype(float), pmf_received(n_t, c.fig3_p)),
            ("sinr", "accuracy"): (curve(100.0 * received / n_t), dists[("sinr", "accuracy")]),
            ("retx", "accuracy"): (np.full(c.trials, curve.clean), dists[("retx", "accuracy")]),
            ("sinr", "latency"): (np.full(c.trials, n_t * T), dists[("sinr", "latency")]),
            ("retx", "latency"): (sent * T, dists[("retx", "latency")]),
        }
        mc_rows, check_rows = [], []
        for (method, metric), (values, analytic) in samples.items():
            vals, counts = np.unique(values, return_counts=True)
            freq = counts / len(values)
            mc_rows += [(method, metric, v, f, cf) for v, f, cf in zip(vals, freq, np.cumsum(freq))]
            report = monte_carlo_check(analytic, values)
            check_rows.append((method, metric, report.sup_distance, report.band, report.trials, int(report.inside)))
        mc_path = write_csv(out / "fig3_montecarlo.csv", ["method", "metric", "value", "mass", "cum_mass"], mc_rows)
        chk_path = write_csv(out / "fig3_check.csv",
                             ["method", "metric", "sup_distance", "dkw_band", "trials", "inside"], check_rows)
        curve_path = write_csv(out / "fig3_curve.csv", ["alpha", "accuracy"], zip(curve.alphas, curve.accuracy))
        return [cdf_path, mc_path, chk_path, curve_path]

    def fig4(self, out: Path) -> list[Path]:
        rows = []
        for seed in self.cfg.seeds:
            for rate in self.cfg.rates:
                _, report = self.model(seed, rate)
                rows.append((seed, rate, self.clean_accuracy(seed, rate), report.best_epoch, report.epochs,
                             report.stop_reason))
        return [write_csv(out / "fig4.csv", ["seed", "rate", "clean_accuracy", "best_epoch", "epochs", "stop"],
                          rows)]

    def _degradation_rows(self, rates, divisions):
        rows = []
        for seed in self.cfg.seeds:
            best_clean = max(self.clean_accuracy(seed, r) for r in rates)
            for rate in rates:
                clean = self.clean_accuracy(seed, rate)
                for division in divisions:
                    for p in self.cfg.losses:
                        acc = self.lossy_accuracy(seed, rate, p, division)
                        rows.append((seed, rate, division, p, acc, clean - acc, best_clean - acc))
        return rows

    def fig5(self, out: Path) -> list[Path]:
        rows = self._degradation_rows(self.cfg.rates, [self.cfg.fig5_division])
        return [write_csv(out / "fig5.csv", ["seed", "rate", "division", "p", "accuracy", "degradation",
                                              "degradation_vs_best"], rows)]

    def fig6(self, out: Path) -> list[Path]:
        divisions = range(1, self.cfg.model.n_blocks + 1)
        rows = self._degradation_rows(self.cfg.fig6_rates, divisions)
        return [write_csv(out / "fig6.csv", ["seed", "rate", "division", "p", "accuracy", "degradation",
                                              "degradation_vs_best"], rows)]

    def run(self, figure: str, out: str | Path) -> list[Path]:
        if figure not in FIGURES:
            raise ValueError(f"figure must be one of {FIGURES}, got {figure!r}")
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        return getattr(self, figure)(out)


__all__ = ["FIGURES", "LOSS_GRID", "Sweep", "SweepConfig", "desk_model_spec"]
