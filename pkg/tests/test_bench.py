import importlib.util
from pathlib import Path

from lrxvec import linalg

BENCH = Path(__file__).resolve().parents[1] / "benchmarks" / "bench_svd.py"


def load_bench():
    spec = importlib.util.spec_from_file_location("bench_svd", BENCH)
    mod = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(mod)
    return mod


def test_benchmark_runs_on_small_sizes(capsys):
    bench = load_bench()
    assert bench.parse_size("384x128") == (384, 128)
    bench.main(["--sizes", "40x12", "9x20", "--repeat", "1"])
    out = capsys.readouterr().out
    rows = [line for line in out.splitlines() if line[:1].isdigit()]
    assert len(rows) == 2 * len(linalg.available_backends())
    for line in rows:
        assert float(line.split()[3]) < 1e-12
    if "compiled" in linalg.available_backends():
        diff = float(out.split("= ")[-1].split()[0])
        assert diff < 1e-10
