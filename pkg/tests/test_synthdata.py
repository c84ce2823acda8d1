import hashlib
import os

import numpy as np
import pytest

from m2d2.errors import ConfigError, FormatError
from m2d2.evalmetrics import auroc
from m2d2.fusionnet import NetworkConfig
from m2d2.synthdata import (
    MANIFEST,
    SPLITS,
    SynthSpec,
    apply_shift,
    generate,
    load_dataset,
    projection_distance,
    save_dataset,
    skewed_spec,
)
from m2d2.trainer import TrainConfig, predict, train

SMALL = SynthSpec(n_train=40, n_val=10, n_test=10, n_shifted=10, T=8, d=2, img_side=8, Q=2)


def digest(dataset):
    h = hashlib.sha256()
    for name in SPLITS:
        for arr in (dataset[name].x_ehr, dataset[name].x_cxr, dataset[name].y):
            h.update(arr.tobytes())
    return h.hexdigest()


def test_spec_validation():
    with pytest.raises(ConfigError, match="Q"):
        SynthSpec(Q=1)
    with pytest.raises(ConfigError, match="n_val"):
        SynthSpec(n_val=0)
    with pytest.raises(ConfigError, match="prevalence"):
        SynthSpec(Q=2, prevalence=(0.5,))
    with pytest.raises(ConfigError, match="label_signal_strength"):
        SynthSpec(label_signal_strength=-1.0)


def test_shapes_and_ranges():
    ds = generate(SMALL)
    assert set(ds) == set(SPLITS)
    for name, n in zip(SPLITS, (40, 10, 10, 10)):
        split = ds[name]
        assert split.x_ehr.shape == (n, 8, 2)
        assert split.x_cxr.shape == (n, 1, 8, 8)
        assert split.y.shape == (n, 2)
        assert split.x_cxr.min() >= 0.0 and split.x_cxr.max() <= 1.0
        assert set(np.unique(split.y)) <= {0.0, 1.0}


def test_fixed_seed_is_bitwise_reproducible():
    assert digest(generate(SMALL)) == digest(generate(SMALL))
    other = SynthSpec(**{**SMALL.__dict__, "seed": 1})
    assert digest(generate(other)) != digest(generate(SMALL))


def test_splits_are_disjoint_index_partitions():
    ds = generate(SMALL)
    rows = [r.tobytes() for name in ("train", "val", "test") for r in ds[name].x_ehr]
    assert len(rows) == len(set(rows))
    # the shifted split is a partition of the same pool before its transform
    pool = generate(SynthSpec(**{**SMALL.__dict__, "shift_amplitude": 1.0, "shift_quarter_turns": 0}))
    shifted = {r.tobytes() for r in pool["shifted"].x_ehr}
    assert not shifted & set(rows)
    np.testing.assert_array_equal(pool["train"].x_ehr, ds["train"].x_ehr)


def test_shift_transform():
    ds = generate(SMALL)
    base = generate(SynthSpec(**{**SMALL.__dict__, "shift_amplitude": 1.0, "shift_quarter_turns": 0}))["shifted"]
    shifted = apply_shift(base, SMALL)
    np.testing.assert_array_equal(shifted.x_ehr, 0.4 * base.x_ehr)
    np.testing.assert_array_equal(shifted.x_cxr[:, 0], np.rot90(base.x_cxr[:, 0], 1, axes=(1, 2)))
    np.testing.assert_array_equal(shifted.x_ehr, ds["shifted"].x_ehr)


def test_prevalence_near_half():
    ds = generate(SynthSpec(n_train=2000, n_val=1, n_test=1, n_shifted=1))
    prev = ds["train"].y.mean(axis=0)
    assert np.all(np.abs(prev - 0.5) < 0.03)


def test_skewed_prevalence():
    spec = skewed_spec(n_train=4000, n_val=1, n_test=1, n_shifted=1)
    prev = generate(spec)["train"].y.mean(axis=0)
    np.testing.assert_allclose(prev, spec.prevalence, atol=0.02)


def test_shifted_split_is_farther_than_test():
    dist = projection_distance(generate(SynthSpec()))
    assert dist["shifted"] > dist["test"]
    assert dist["shifted"] > dist["val"]


def test_labels_carried_by_both_modalities():
    ds = generate(SynthSpec(n_train=2000, n_val=1, n_test=1, n_shifted=1, seed=3))["train"]
    # a crude linear read-out per modality correlates with every label
    ts_feat = ds.x_ehr.reshape(ds.n, -1)
    img_feat = ds.x_cxr.reshape(ds.n, -1)
    for feat in (ts_feat, img_feat):
        w, *_ = np.linalg.lstsq(np.c_[feat, np.ones(ds.n)], ds.y - 0.5, rcond=None)
        fit = np.c_[feat, np.ones(ds.n)] @ w
        for k in range(ds.y.shape[1]):
            assert auroc(fit[:, k], ds.y[:, k]) > 0.6


def test_save_load_round_trip(tmp_path):
    ds = generate(SMALL)
    save_dataset(ds, tmp_path)
    assert sorted(os.listdir(tmp_path)) == sorted(list(SPLITS) + [MANIFEST])
    back = load_dataset(tmp_path)
    assert digest(back) == digest(ds)


def test_load_errors(tmp_path):
    with pytest.raises(FormatError, match="manifest"):
        load_dataset(tmp_path)
    save_dataset(generate(SMALL), tmp_path)
    with open(tmp_path / MANIFEST) as fh:
        kept = [ln for ln in fh if "val\ty" not in ln]
    (tmp_path / MANIFEST).write_text("".join(kept))
    with pytest.raises(FormatError, match="val"):
        load_dataset(tmp_path)


def test_single_training_row():
    ds = generate(SynthSpec(n_train=1, n_val=4, n_test=1, n_shifted=1, T=4, d=2, img_side=8, Q=2))
    assert ds["train"].n == 1
    net = NetworkConfig(ts_input_dim=2, ts_hidden_dim=2, ts_layers=1, img_side=8, conv_channels=(2,), num_labels=2)
    result = train(ds, net, TrainConfig(epochs=1, batch_size=4, mode="deterministic"))
    assert len(result.log) == 1


def test_zero_signal_gives_chance_auroc():
    spec = SynthSpec(n_train=512, n_val=128, n_test=2000, n_shifted=1, T=8, d=2, img_side=8, Q=2,
                     label_signal_strength=0.0)
    ds = generate(spec)
    net = NetworkConfig(ts_input_dim=2, ts_hidden_dim=4, ts_layers=1, img_side=8, conv_channels=(4,), num_labels=2)
    result = train(ds, net, TrainConfig(epochs=5, batch_size=32, learning_rate=3e-3, mode="deterministic"))
    test = ds["test"]
    probs = predict(result.best.arrays, test.x_ehr, test.x_cxr, net, 1, np.random.default_rng(0))
    for k in range(2):
        assert abs(auroc(probs[:, k], test.y[:, k]) - 0.5) < 0.05
