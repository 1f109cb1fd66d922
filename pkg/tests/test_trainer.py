import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import TINY_SPEC
from sinr.channel import ChannelConfig
from sinr.data import Dataset, read_csv
from sinr.errors import ConfigError, TrainingDivergedError
from sinr.model import build_model, split_at
from sinr.nn import Dense, Flatten, Network, ReLU
from sinr.trainer import (TrainConfig, _loss_and_accuracy, evaluate_accuracy, predict, split_train_validation,
                          train)


def _toy(n=200, seed=0, flip=False):
    """Two classes separated along the first pixel."""
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 2, n)
    images = rng.uniform(0.0, 0.4, (n, 1, 2, 2))
    images[:, 0, 0, 0] += 0.6 * labels
    if flip:
        labels = 1 - labels
    return Dataset(images, labels, 2, "toy")


def _mlp(seed=0, hidden=8):
    rng = np.random.default_rng(seed)
    return Network([Flatten(), Dense(4, hidden, rng), ReLU(), Dense(hidden, 2, rng)], [1, 1, 1, 1], (1, 2, 2))


# --- split ---------------------------------------------------------------------------

def test_split_sizes_and_determinism():
    ds = _toy(1000)
    up, val = split_train_validation(ds, seed=3)
    assert (len(up), len(val)) == (900, 100)
    up2, val2 = split_train_validation(ds, seed=3)
    assert np.array_equal(up.images, up2.images) and np.array_equal(val.labels, val2.labels)


@settings(max_examples=40, deadline=None)
@given(n=st.integers(1, 300), seed=st.integers(0, 2**32 - 1))
def test_split_is_disjoint_cover(n, seed):
    ds = Dataset(np.arange(n, dtype=float).reshape(n, 1, 1, 1) / max(n, 1), np.zeros(n, dtype=int), 1)
    up, val = split_train_validation(ds, seed)
    assert len(up) == int(np.floor(0.9 * n)) and len(up) + len(val) == n
    merged = np.sort(np.concatenate([up.images.ravel(), val.images.ravel()]))
    assert np.array_equal(merged, ds.images.ravel())


def test_split_rejects_empty():
    with pytest.raises(ConfigError):
        split_train_validation(Dataset(np.zeros((0, 1, 1, 1)), [], 1))


# --- config --------------------------------------------------------------------------

def test_config_defaults_and_validation():
    cfg = TrainConfig()
    assert (cfg.max_epochs, cfg.patience, cfg.batch_size, cfg.lr) == (150, 20, 128, 0.001)
    for bad in ({"patience": 0}, {"batch_size": 0}, {"max_epochs": 0}, {"dropout": 1.0}):
        with pytest.raises(ConfigError):
            TrainConfig(**bad)


def test_config_from_mapping():
    cfg = TrainConfig.from_mapping({"max_epochs": "3", "lr": "0.01", "dropout": "0.2"})
    assert cfg.max_epochs == 3 and cfg.lr == 0.01 and cfg.dropout == 0.2
    with pytest.raises(ConfigError, match="learning_rate"):
        TrainConfig.from_mapping({"learning_rate": "0.1"})


# --- training ------------------------------------------------------------------------

def test_separable_toy_reaches_full_accuracy():
    up, val = split_train_validation(_toy(400), seed=0)
    model, report = train(_mlp(), up, val, TrainConfig(max_epochs=50, batch_size=16, lr=0.01, seed=0))
    assert report.val_acc[report.best_epoch - 1] == 1.0
    assert evaluate_accuracy(model, val) == 1.0


def test_max_epochs_one():
    up, val = split_train_validation(_toy(), seed=0)
    _, report = train(_mlp(), up, val, TrainConfig(max_epochs=1))
    assert report.epochs == 1 and report.stop_reason == "max_epochs" and report.best_epoch == 1


def test_rising_validation_loss_stops_early_and_restores_best():
    # validation labels are the opposite of the training labels, so every
    # improvement on the update set makes the validation loss worse
    update, val = _toy(300, seed=1), _toy(60, seed=2, flip=True)
    model, report = train(_mlp(), update, val, TrainConfig(max_epochs=40, patience=3, lr=0.01, batch_size=16))
    assert report.stop_reason == "early_stop"
    assert report.epochs < 40
    rises = np.diff(report.val_loss[-4:])
    assert np.all(rises > 0)
    assert report.best_epoch == int(np.argmin(report.val_loss)) + 1
    restored, _ = _loss_and_accuracy(model, val, 512)
    assert restored == pytest.approx(report.val_loss[report.best_epoch - 1], rel=1e-12)


def test_flat_validation_loss_is_not_an_increase():
    up, val = split_train_validation(_toy(), seed=0)
    _, report = train(_mlp(), up, val, TrainConfig(max_epochs=6, patience=1, lr=0.0))
    assert report.stop_reason == "max_epochs" and report.epochs == 6
    assert len(set(report.val_loss)) == 1


def test_same_seed_same_run():
    up, val = split_train_validation(_toy(), seed=0)
    cfg = TrainConfig(max_epochs=3, seed=9, dropout=0.3)
    _, a = train(_mlp(1), up, val, cfg)
    _, b = train(_mlp(1), up, val, cfg)
    assert a.train_loss == b.train_loss and a.val_loss == b.val_loss


def test_divergence_is_reported():
    up, val = split_train_validation(_toy(), seed=0)
    model = _mlp()
    model.parameters()[0].data[0, 0] = np.nan
    with pytest.raises(TrainingDivergedError, match="epoch 1"):
        train(model, up, val, TrainConfig(max_epochs=2))


def test_report_csv_and_summary(tmp_path):
    up, val = split_train_validation(_toy(), seed=0)
    _, report = train(_mlp(), up, val, TrainConfig(max_epochs=2))
    report.to_csv(tmp_path / "r.csv")
    rows = read_csv(tmp_path / "r.csv")
    assert [r["epoch"] for r in rows] == ["1", "2"]
    assert set(rows[0]) == {"epoch", "train_loss", "val_loss", "val_acc"}
    assert "stop=max_epochs" in report.summary()


# --- evaluation ---------------------------------------------------------------------

def test_constant_model_on_single_class():
    dense = Dense(4, 3)
    dense.weight.data[...] = 0
    dense.bias.data[...] = [0, 5, 0]
    model = Network([Flatten(), dense], [1, 1], (1, 2, 2))
    ds = Dataset(np.random.default_rng(0).random((20, 1, 2, 2)), np.ones(20, dtype=int), 3)
    assert evaluate_accuracy(model, ds) == 1.0


def test_accuracy_invariant_to_test_order(tiny_trained):
    model, test, _ = tiny_trained
    perm = np.random.default_rng(0).permutation(len(test))
    assert evaluate_accuracy(model, test) == evaluate_accuracy(model, test.subset(perm))


@pytest.mark.parametrize("granularity", ["packet", "element"])
def test_lossless_channel_matches_no_channel(tiny_trained, granularity):
    model, test, _ = tiny_trained
    clean = evaluate_accuracy(model, test)
    for division in (1, 2):
        lossy = evaluate_accuracy(model, test, ChannelConfig(p=0.0, seed=3), division=division,
                                  granularity=granularity)
        assert lossy == clean


def test_near_total_loss_gives_chance(tiny_trained):
    model, test, _ = tiny_trained
    assert evaluate_accuracy(model, test) > 0.5
    acc = evaluate_accuracy(model, test, ChannelConfig(p=0.999, seed=1), division=1, granularity="element")
    assert abs(acc - 0.1) <= 0.05


def test_pair_and_full_model_agree(tiny_trained):
    model, test, _ = tiny_trained
    pair = split_at(model, 2)
    assert np.array_equal(predict(pair, test.images[:50]), predict(model, test.images[:50]))
    cfg = ChannelConfig(p=0.3, seed=5)
    assert evaluate_accuracy(pair, test, cfg) == evaluate_accuracy(model, test, cfg, division=2)


def test_evaluate_argument_errors(tiny_trained):
    model, test, _ = tiny_trained
    with pytest.raises(ConfigError):
        evaluate_accuracy(model, test, ChannelConfig(p=0.1))
    with pytest.raises(ConfigError):
        evaluate_accuracy(model, test, ChannelConfig(p=0.1), division=1, granularity="bits")


def test_tiny_fixture_report(tiny_trained):
    _, _, report = tiny_trained
    assert report.best_epoch == int(np.argmin(report.val_loss)) + 1
    assert len(report.train_loss) == len(report.val_loss) == len(report.val_acc) == report.epochs
    assert build_model(TINY_SPEC).parameter_count() > 0
