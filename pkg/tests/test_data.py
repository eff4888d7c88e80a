import hashlib

import numpy as np
import pytest

from fsddi.data import (GLYPH_CLASSES, DataConfig, FederatedSplit, Sample, export_dataset,
                        generate_dataset, generate_sample, iid_shards, import_dataset,
                        matching_shards, partition, partition_set)
from fsddi.errors import ConfigurationError
from fsddi.rng import stream

SMALL = DataConfig(train_size=8, val_size=4, test_size=4, height=32, width=48)
SMALL_HASH = "e80e973e88113cfe5d8a81684f167d386dd2ea6c5b3c5e835e3cd08ef1741f14"
DIRICHLET_COUNTS = [[34, 89], [10, 1], [12, 114], [17, 0], [18, 93], [1, 7], [2, 0], [1, 82],
                    [1, 1], [304, 13]]


@pytest.fixture(scope="module")
def default_ds():
    return generate_dataset(DataConfig())


def test_inverted_twin_is_exact_complement():
    a = generate_sample(stream(5, "twin"), 0, sample_id=1)
    b = generate_sample(stream(5, "twin"), 1, sample_id=1)
    assert np.max(np.abs(b.image - (1.0 - a.image))) == 0.0
    assert np.array_equal(a.mask, b.mask)


def test_sample_has_three_glyph_cells():
    cfg = DataConfig()
    rng = stream(0, "cells")
    for i in range(20):
        s = generate_sample(rng, i % 2, sample_id=i, config=cfg)
        fg = set(np.unique(s.mask)) - {0}
        assert fg <= set(GLYPH_CLASSES) and 1 <= len(fg) <= 3
        cell = cfg.width // 3
        for k in range(3):
            assert (s.mask[:, k * cell:(k + 1) * cell] > 0).any()
            # one glyph class per cell
            assert len(set(np.unique(s.mask[:, k * cell:(k + 1) * cell])) - {0}) == 1


def test_intensity_ranges():
    s = generate_sample(stream(1, "x"), 0, classes=[1, 2, 3])
    fg, bg = s.image[s.mask > 0], s.image[s.mask == 0]
    assert fg.min() >= 0.7 and fg.max() <= 1.0
    assert bg.min() >= 0.0 and bg.max() <= 0.1


def test_bad_domain_rejected():
    with pytest.raises(ConfigurationError):
        generate_sample(stream(0, "x"), 2)


def test_fixed_seed_golden_bytes():
    assert generate_dataset(SMALL).content_hash() == SMALL_HASH
    assert generate_dataset(SMALL).content_hash() == SMALL_HASH


def test_default_counts(default_ds):
    tr = default_ds.train
    assert len(tr) == 800
    assert np.bincount(tr.domains).tolist() == [400, 400]
    for s in (default_ds.val, default_ds.test):
        assert np.bincount(s.domains).tolist() == [len(s) // 2] * 2
    ids = np.concatenate([s.ids for s in default_ds.splits().values()])
    assert len(np.unique(ids)) == len(ids)


def test_class_pixel_balance(default_ds):
    counts = np.bincount(default_ds.train.masks.ravel(), minlength=5)[1:].astype(float)
    rel = np.abs(counts / counts.mean() - 1.0)
    assert rel.max() <= 0.02


def test_disjoint_seeds_no_duplicate_images():
    def hashes(seed):
        ds = generate_dataset(DataConfig(train_size=40, val_size=10, test_size=10, seed=seed,
                                         height=32, width=48))
        return {hashlib.sha256(im.tobytes()).hexdigest()
                for s in ds.splits().values() for im in s.images}
    a, b = hashes(1), hashes(2)
    assert len(a) == 60 and len(b) == 60 and not a & b


def test_paired_inversion_mean():
    ds = generate_dataset(DataConfig(train_size=20, val_size=4, test_size=4, height=32,
                                     width=48, paired=True))
    tr = ds.train
    m0 = tr.images[tr.domains == 0].mean()
    m1 = tr.images[tr.domains == 1].mean()
    assert abs(m1 - (1.0 - m0)) <= 1e-12


def test_iid_partition(default_ds):
    sp = partition(default_ds, "iid")
    assert sp.sizes().tolist() == [80] * 10
    assert sp.domain_counts.tolist() == [[40, 40]] * 10


def test_full_noniid_partition(default_ds):
    sp = partition(default_ds, "full_noniid")
    for row in sp.domain_counts:
        assert (row[0] == 0) != (row[1] == 0)
    assert sorted(sp.sizes().tolist()) == [80] * 10
    assert (sp.domain_counts[:5, 1] == 0).all() and (sp.domain_counts[5:, 0] == 0).all()
    with pytest.raises(ConfigurationError):
        partition(default_ds, "full_noniid", K=5)


def test_dirichlet_golden(default_ds):
    sp = partition(default_ds, "dirichlet", seed=0)
    assert sp.domain_counts.tolist() == DIRICHLET_COUNTS
    assert sp.sizes().sum() == 800


@pytest.mark.parametrize("scheme", ["iid", "full_noniid", "dirichlet"])
def test_partition_covers_each_sample_once(default_ds, scheme):
    sp = partition(default_ds, scheme, seed=3)
    allids = np.concatenate(sp.clients)
    assert sorted(allids.tolist()) == sorted(default_ds.train.ids.tolist())
    for k, ids in enumerate(sp.clients):
        doms = default_ds.train.domains[default_ds.train.position(ids)]
        assert np.bincount(doms, minlength=2).tolist() == sp.domain_counts[k].tolist()
    again = partition(default_ds, scheme, seed=3)
    assert all(np.array_equal(a, b) for a, b in zip(sp.clients, again.clients))


def test_partition_errors(default_ds):
    with pytest.raises(ConfigurationError):
        partition(default_ds, "random")
    with pytest.raises(ConfigurationError):
        partition(default_ds, "iid", K=401)


def test_split_json_roundtrip(default_ds):
    sp = partition(default_ds, "dirichlet")
    back = FederatedSplit.from_json(sp.to_json())
    assert back.scheme == sp.scheme
    assert all(np.array_equal(a, b) for a, b in zip(sp.clients, back.clients))
    assert np.array_equal(back.domain_counts, sp.domain_counts)


def test_matching_and_shifted_shards(default_ds):
    sp = partition(default_ds, "full_noniid")
    test = default_ds.test
    shards = matching_shards(sp, test)
    assert sorted(np.concatenate(shards).tolist()) == sorted(test.ids.tolist())
    for k, ids in enumerate(shards):
        doms = set(test.domains[test.position(ids)].tolist())
        assert doms == {0} if k < 5 else doms == {1}
    shifted = iid_shards(test, 10)
    for ids in shifted:
        assert np.bincount(test.domains[test.position(ids)]).tolist() == [20, 20]


def test_export_import_roundtrip(tmp_path):
    ds = generate_dataset(SMALL)
    export_dataset(ds, tmp_path)
    back = import_dataset(tmp_path)
    assert back.content_hash() == ds.content_hash()
    assert back.config == ds.config


def test_config_validation():
    with pytest.raises(ConfigurationError):
        DataConfig(height=30)
    with pytest.raises(ConfigurationError):
        DataConfig(train_size=0)
