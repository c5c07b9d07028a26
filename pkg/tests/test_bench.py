import csv
import io
import math

import pytest

from spirdet.bench import CSV_HEADER, BenchRecord, bench_run, records_to_csv
from spirdet.config import toy_config, variant_config
from spirdet.dbsd import layer_macs_per_site


@pytest.fixture(scope="module")
def records():
    return bench_run(toy_config(), alphas=(0.005, 0.05, 1.0), repeats=5, sample_s=0.002)


def test_schema_and_rows(records):
    assert CSV_HEADER == ("alpha", "mode", "resolution", "median_ms", "p10_ms", "p90_ms", "active_sites", "macs")
    rows = list(csv.reader(io.StringIO(records_to_csv(records))))
    assert tuple(rows[0]) == CSV_HEADER and len(rows) == 7
    assert all(r.resolution == "64x64" for r in records)


def test_percentiles_ordered(records):
    for r in records:
        assert 0 < r.p10_ms <= r.median_ms <= r.p90_ms


def test_dense_macs_independent_of_alpha(records):
    dense = {r.macs for r in records if r.mode == "dense"}
    assert len(dense) == 1


def test_sparse_macs_from_site_count(records):
    cfg = toy_config()
    hc, wc = cfg.coarse_shape
    hf, wf = cfg.fine_shape
    dense = next(r.macs for r in records if r.mode == "dense")
    per_site = dense // (hf * wf)
    for r in records:
        if r.mode == "sparse":
            k = math.ceil(round(r.alpha * hc * wc, 9))
            assert r.active_sites == 4 * k
            assert r.macs == per_site * 4 * k


def test_macs_at_half_percent_on_lr_variant():
    # ceil(0.005 * 32 * 32) = 6 coarse cells -> 24 fine sites out of 64 * 64
    from spirdet.backbone import build_model
    from spirdet.dbsd import build_active_index, dense_head_macs, sparse_head_macs, sparse_sample
    import numpy as np

    cfg = variant_config("lr")
    head = build_model(cfg).sparse_head
    idx = build_active_index(sparse_sample(np.random.default_rng(0).random((1, 1, 32, 32)), 0.005), 2)
    assert len(idx) == 24
    per_site = sum(layer_macs_per_site(l) for l in head.all_layers())
    assert sparse_head_macs(idx, head) == 24 * per_site
    assert dense_head_macs(idx.shape, head) == 64 * 64 * per_site


def test_repeats_floor():
    with pytest.raises(ValueError):
        bench_run(toy_config(), alphas=(0.05,), repeats=2)


def test_record_csv_formatting():
    text = records_to_csv([BenchRecord(0.005, "sparse", "8x8", 1.23456789, 1.0, 2.0, 4, 100)])
    assert text.splitlines()[1] == "0.005,sparse,8x8,1.23457,1,2,4,100"
