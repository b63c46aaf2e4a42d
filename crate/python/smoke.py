"""Smoke test for the pylusnet extension module.

Build and run from the repository root:

    cargo build -p lusnet-python --features extension-module --release
    cp target/release/libpylusnet.so python/pylusnet.so
    python3 python/smoke.py
"""

import json
import os
import sys
import tempfile

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import pylusnet as ln

SMALL = "2xC(16x16x4) - MP(8x8x4) - F(256) - FC(2)"


def main():
    vgg = ln.parse_arch(ln.DEFAULT_ARCH)
    assert len(vgg) == 12
    assert len(vgg.layers()) == 20
    assert vgg.param_count() == 14_729_922
    assert vgg.infer_shapes()[-1] == [2]
    try:
        vgg.with_input_dims([224, 224, 1]).infer_shapes()
        raise AssertionError("224 input should conflict")
    except ValueError as e:
        assert "stage 1" in str(e), e

    spec = ln.Spec(SMALL)
    assert ln.parse_arch(spec.render()) == spec

    zero = ln.Classifier(spec, ln.Weights.zeros(spec))
    r = zero.classify_pgm(ln.encode_pgm(2, 2, bytes([0, 64, 128, 255])))
    assert r["label"] == "covid" and r["probabilities"] == {"covid": 0.5, "healthy": 0.5}, r

    w = ln.Weights.init(spec, seed=3)
    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "w.lusw")
        w.save(path)
        back = ln.Weights.load(path)
    assert back.bit_eq(w) and back.names() == w.names()
    blob = bytearray(w.to_bytes())
    blob[20] ^= 0xFF
    try:
        ln.Weights.from_bytes(bytes(blob))
        raise AssertionError("corruption should be rejected")
    except ValueError as e:
        assert "checksum" in str(e), e

    pixels = bytes((i * 7) % 256 for i in range(40 * 30))
    fast = ln.Classifier(spec, w, "fast").classify_pixels(40, 30, pixels)
    ref = ln.Classifier(spec, w, "reference").classify_pixels(40, 30, pixels)
    assert fast["label"] == ref["label"]
    assert abs(fast["probabilities"]["covid"] - ref["probabilities"]["covid"]) < 1e-6

    variants = ln.expand_10x(40, 30, pixels, 7)
    assert len(variants) == ln.EXPANSION_FACTOR and variants[0] == pixels

    grad = ln.Spec("1xC(8x8x4) - MP(4x4x4) - F(64) - FC(2)")
    err = ln.grad_check(grad, ln.Weights.init(grad, 1), [((i * 37) % 64) / 64 for i in range(64)], 1)
    assert err < 1e-5, err

    report = json.loads(ln.bench_forward(spec, w, 2))
    assert len(report["layers"]) == 5 and report["total_macs"] == spec.total_macs()

    print("pylusnet smoke test ok:", fast)


if __name__ == "__main__":
    main()
