"""Smoke test for the scnn extension module.

Build first, then run from the repository root:

    cargo build -p scnn-python --release
    python3 python/smoke_test.py

When `scnn` is not installed, the freshly built shared library under
target/ is loaded instead.
"""

import importlib.util
import math
import os
import shutil
import sys
import tempfile

import numpy as np

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def load_scnn():
    try:
        import scnn

        return scnn
    except ImportError:
        pass
    suffix = {"darwin": "libscnn.dylib", "win32": "scnn.dll"}.get(sys.platform, "libscnn.so")
    for profile in ("release", "debug"):
        built = os.path.join(ROOT, "target", profile, suffix)
        if os.path.exists(built):
            tmp = tempfile.mkdtemp()
            dest = os.path.join(tmp, "scnn.so")
            shutil.copy(built, dest)
            spec = importlib.util.spec_from_file_location("scnn", dest)
            module = importlib.util.module_from_spec(spec)
            spec.loader.exec_module(module)
            return module
    sys.exit("scnn not importable; run `cargo build -p scnn-python` first")


scnn = load_scnn()


def check_forms():
    a = scnn.CanonicalForm(3.0, [0.5, -0.2], 0.4)
    b = scnn.CanonicalForm(2.8, [0.1, 0.6], 0.3)
    assert a.dim == 2
    assert math.isclose(a.variance(), 0.25 + 0.04 + 0.16)

    s = scnn.weighted_sum([a, b], [1.0, -2.0])
    assert math.isclose(s.mean, 3.0 - 5.6)
    assert (a + b).mean == a.mean + b.mean
    assert (2.0 * a).sens == [1.0, -0.4]

    c, t = scnn.max2(a, b)
    assert 0.0 < t < 1.0
    assert math.isclose(scnn.tightness(a, b), t)

    rng = np.random.default_rng(7)
    draws = 400_000
    x = rng.standard_normal((draws, 2))
    va = a.mean + x @ np.array(a.sens) + a.noise * rng.standard_normal(draws)
    vb = b.mean + x @ np.array(b.sens) + b.noise * rng.standard_normal(draws)
    mc = np.maximum(va, vb)
    assert abs(c.mean - mc.mean()) / mc.mean() < 0.01, (c.mean, mc.mean())
    assert abs(c.variance() - mc.var()) / mc.var() < 0.03, (c.variance(), mc.var())

    top, weights = scnn.max_n([a, b, scnn.CanonicalForm.deterministic(0.0, 2)])
    assert top.mean >= c.mean - 1e-9 and len(weights) == 2

    try:
        scnn.max2(a, scnn.CanonicalForm(1.0, [1.0]))
    except ValueError:
        pass
    else:
        raise AssertionError("mismatched bases must raise")
    print("forms ok: max mean %.4f vs mc %.4f" % (c.mean, mc.mean()))


def check_pipeline():
    snip, track = scnn.generate(seed=3, n=8, size=16, channels=1)
    assert snip.n == 8 and snip.shape == (1, 16, 16)
    assert len(track) == 8 and len(snip.frame(0)) == 256

    model = scnn.extract(snip, 4, seed=3)
    assert model.m == 4 and model.n == 8
    assert model.mean_error() < 5.0, model.mean_error()
    tensor = model.canonical
    assert tensor.shape == (1, 16, 16) and tensor.m == 4
    frame0 = np.array(tensor.evaluate(model.realization(0)))
    assert np.allclose(frame0, model.reconstruct(0))

    net = scnn.Network.micro(channels=1, size=16, seed=1)
    out = net.infer(tensor)
    assert out.shape == net.output_shape
    assert min(out.noise_plane()) >= 0.0
    preds = net.predict(model)
    assert len(preds) == 8 and all(0.0 <= p[4] <= 1.0 for p in preds)
    scnn_ops, frame_ops = net.count_ops(8, 4)
    assert frame_ops > 0 and scnn_ops > 0

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "net.scnw")
        net.save(path)
        again = scnn.Network.load(path)
        assert again.infer(tensor).data() == out.data()
        try:
            scnn.Snippet.load(os.path.join(d, "missing.snip"))
        except OSError:
            pass
        else:
            raise AssertionError("missing file must raise")
    print("pipeline ok: %s, recon error %.2f%%" % (net, model.mean_error()))


if __name__ == "__main__":
    check_forms()
    check_pipeline()
    print("all smoke checks passed")
