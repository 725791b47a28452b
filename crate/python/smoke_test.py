"""Smoke test for the speckv extension module.

Builds the cdylib with cargo unless a path to a built library is given,
copies it next to a temp module name, and exercises the bindings.

    python3 python/smoke_test.py [path/to/libspeckv.so]
"""

import importlib.util
import json
import shutil
import subprocess
import sys
import tempfile
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent


def build() -> Path:
    subprocess.run(
        ["cargo", "build", "--release", "-p", "speckv-py", "--features", "extension-module"],
        cwd=ROOT,
        check=True,
    )
    for name in ("libspeckv.so", "libspeckv.dylib", "speckv.dll"):
        p = ROOT / "target" / "release" / name
        if p.exists():
            return p
    sys.exit("built library not found under target/release")


def load(lib: Path):
    tmp = Path(tempfile.mkdtemp())
    dest = tmp / ("speckv.pyd" if lib.suffix == ".dll" else "speckv.so")
    shutil.copy(lib, dest)
    spec = importlib.util.spec_from_file_location("speckv", dest)
    mod = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(mod)
    return mod


def main() -> None:
    lib = Path(sys.argv[1]) if len(sys.argv) > 1 else build()
    sk = load(lib)

    checks = sk.validate()
    failed = [c for c in checks if not c[4]]
    assert not failed, failed
    print(f"validate: {len(checks)} checks pass")

    cfg = sk.SimConfig.desk()
    cfg.max_tokens = 3000
    m = sk.run(cfg)
    assert m["tokens_committed"] == 3000
    assert 0.9 < m["hit_rate"] <= 1.0
    assert m["coverage"] >= m["hit_rate"]
    assert sk.report(cfg, "json") == sk.report(cfg, "json")
    assert json.loads(sk.report(cfg, "json"))["tokens_committed"] == 3000
    print(f"run: hit {m['hit_rate']:.4f}, {m['throughput_tokens_per_s']:.0f} tok/s")

    deeper = cfg.set("serving.prefetch_depth", "8")
    assert deeper.prefetch_depth == 8
    try:
        cfg.set("serving.batch_size", "0")
    except sk.ConfigError as e:
        print(f"config error surfaced: {e}")
    else:
        raise AssertionError("invalid batch size accepted")

    rows = sk.sweep_k(cfg, [1, 16])
    assert rows[0]["hit_rate"] < rows[1]["hit_rate"]
    assert rows[0]["precision"] > rows[1]["precision"]

    eng = sk.sweep_engines([1, 2, 3, 4])
    tp = [r["throughput_gbps"] for r in eng]
    assert all(abs(a - b) / b < 0.05 for a, b in zip(tp, [412, 798, 1156, 1487])), tp
    print("scale:", ", ".join(f"{t:.0f}" for t in tp))

    vals = [((i % 7) - 3) * 0.25 for i in range(4 * 64)]
    blob = sk.compress(vals, 4, 64, "int8_delta_rle")
    rows_, cols_, back = sk.decompress(blob)
    assert (rows_, cols_) == (4, 64)
    assert max(abs(a - b) for a, b in zip(vals, back)) <= 0.75 / 127 / 2 + 1e-9
    assert sk.measure_ratio(vals, 4, 64, "int8") > 1.9

    b = sk.codec_bench("int8_delta_rle", "default:6", blocks=4)
    assert abs(b["mean_ratio"] - 3.2) < 0.4, b
    print(f"codec: full pipeline {b['mean_ratio']:.3f}")

    assert abs(sk.effective_access_latency(0.947) - 367.945) < 1e-6
    assert sk.is_stable(100.0, 4.0, 4096.0, 64e9, 0.95)
    print("ok")


if __name__ == "__main__":
    main()
