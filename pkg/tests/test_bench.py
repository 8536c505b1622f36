import csv
import io

import pytest

from ternvit import bench
from ternvit.model import ModelConfig

SMALL = ModelConfig(layers=1, heads=2, embed_dim=32, ffn_mult=4, patch_size=4, image_size=16, num_classes=3)


def parse(rows):
    buf = io.StringIO()
    bench.write_csv(rows, buf)
    lines = buf.getvalue().splitlines()
    assert lines[0].startswith(f"# ternvit-bench-csv v{bench.CSV_VERSION}; physical_cores=")
    return list(csv.DictReader(lines[1:]))


def test_ffn_shapes_default_config():
    cfg = ModelConfig()
    assert bench.ffn_shape("ffn-kn", cfg) == (197, 2048, 512)
    assert bench.ffn_shape("ffn-nk", cfg) == (197, 512, 2048)
    with pytest.raises(ValueError):
        bench.ffn_shape("full-model", cfg)


def test_gemm_rows_and_accounting():
    rows = bench.run(["ffn-kn", "ffn-nk"], SMALL, repeats=2, threads=1)
    table = parse(rows)
    assert [r["kernel"] for r in table] == list(bench.KERNELS) * 2
    assert list(table[0]) == bench.FIELDS
    for r in rows:
        assert r.ops == 2 * r.M * r.N * r.K
        assert r.gops_per_s == pytest.approx(r.ops / r.nanoseconds)
    packed = {r.workload: r for r in rows if r.kernel == "packed"}
    floats = {r.workload: r for r in rows if r.kernel == "float"}
    for wl in packed:
        assert floats[wl].weight_bytes / packed[wl].weight_bytes == 16.0
    ref = next(r for r in rows if r.kernel == "reference")
    assert ref.speedup_vs_reference == 1.0


def test_full_model_rows():
    rows = bench.run(["full-model"], SMALL, repeats=1, threads=1)
    assert [r.kernel for r in rows] == ["packed", "float"]
    assert rows[0].weight_bytes < rows[1].weight_bytes
    assert all(r.speedup_vs_reference is None for r in rows)
    assert parse(rows)[0]["speedup_vs_reference"] == ""


def test_thread_counts():
    assert bench.thread_counts(3) == [3]
    assert bench.thread_counts()[0] == 1


def test_median_ns_counts_calls():
    calls = []
    bench.median_ns(lambda: calls.append(1), repeats=5, warmup=2)
    assert len(calls) == 7


def test_model_env_is_restored(monkeypatch):
    from ternvit.kernel import THREADS_ENV
    import os

    monkeypatch.setenv(THREADS_ENV, "5")
    bench.bench_model(SMALL, repeats=1, threads=2)
    assert os.environ[THREADS_ENV] == "5"
