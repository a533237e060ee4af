"""Smoke test for the `ewir` Python extension.

Build and install first:  cd crates/py && maturin develop --release
"""

import math
import random

import ewir


def main():
    assert [ewir.fmd(k, 54, 120.0) for k in (1, 2, 45, 54)] == [18, 20, 115, 135]
    assert abs(ewir.noise_variance_from_snr(15.0) - 0.0316228) < 1e-7

    z = [complex(random.gauss(0, 1), random.gauss(0, 1)) for _ in range(16)]
    frame = ewir.encode_frame(z, 0.5 - 0.25j)
    back, h, n = ewir.decode_frame(frame)
    assert n == len(frame) == 10 + 8 + 16 * 8 + 4
    assert h == 0.5 - 0.25j
    assert all(abs(a - b) < 1e-6 * max(1.0, abs(a)) for a, b in zip(z, back))
    assert len(ewir.encode_frame([1 + 2j])) == 22

    rx, h = ewir.transmit(z, snr_db=300.0, seed=3)
    assert max(abs(a - b) for a, b in zip(rx, z)) < 1e-9

    cfg = ewir.ExperimentConfig.from_toml("")
    macs, params = cfg.count_macs()
    print(f"default config on-device: {macs / 1e9:.4f} GMACs, {params / 1e6:.4f} M params")

    pipe = ewir.SplitPipeline(units=3, widening=6.0, num_classes=10, split=2, symbols=8, input_size=16, seed=1)
    x = [random.uniform(-1, 1) for _ in range(2 * 3 * 16 * 16)]
    sym = pipe.encode(x)
    assert len(sym) == 2 and all(len(s) == pipe.symbols for s in sym)
    for s in sym:
        power = sum(abs(c) ** 2 for c in s) / len(s)
        assert math.isclose(power, 1.0, rel_tol=1e-5)
    ideal = pipe.infer(x)
    via = pipe.decode(sym)
    assert all(abs(a - b) < 1e-5 for ra, rb in zip(ideal, via) for a, b in zip(ra, rb))
    noisy = pipe.infer(x, snr_db=10.0)
    assert len(noisy) == 2 and len(noisy[0]) == 10
    print("top-5:", ewir.SplitPipeline.top_k(ideal, 5))
    print("ok")


if __name__ == "__main__":
    main()
