import numpy as np
import pytest

from ceskd import nn


def numeric_grad(f, x, eps=1e-5):
    """Central finite differences of scalar ``f`` w.r.t. array ``x`` (modified in place, restored)."""
    g = np.zeros_like(x, dtype=np.float64)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        fp = f()
        x[i] = old - eps
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * eps)
    return g


def rel_error(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return np.linalg.norm(a - b) / denom


def random_model(kind, gen, seed=0):
    """A small f64 model exercising one layer family, plus a matching input batch."""
    n = int(gen.integers(2, 4))
    if kind == "dense":
        d, h, k = (int(v) for v in gen.integers(2, 6, size=3))
        specs = [nn.dense(d, h), nn.relu(), nn.dense(h, k)]
        shape = (d,)
    elif kind == "conv2d":
        c, o = int(gen.integers(1, 3)), int(gen.integers(1, 4))
        ksz, stride, pad = int(gen.integers(1, 4)), int(gen.integers(1, 3)), int(gen.integers(0, 2))
        hw = int(gen.integers(ksz + 1, 7))
        specs = [nn.conv2d(c, o, ksz, stride, pad), nn.flatten()]
        out = nn.infer_shapes(specs, (c, hw, hw))[-1][0]
        specs.append(nn.dense(out, 3))
        shape = (c, hw, hw)
    elif kind == "maxpool2d":
        c = int(gen.integers(1, 3))
        specs = [nn.conv2d(c, 2, 3, 1, 1), nn.relu(), nn.maxpool2d(2), nn.flatten()]
        out = nn.infer_shapes(specs, (c, 6, 6))[-1][0]
        specs.append(nn.dense(out, 3))
        shape = (c, 6, 6)
    else:
        raise ValueError(kind)
    model = nn.init_weights(specs, seed, shape, dtype=np.float64)
    for p in model.params:
        if "b" in p:
            p["b"][...] = gen.normal(scale=0.1, size=p["b"].shape)
    x = gen.normal(size=(n,) + shape)
    return model, x


@pytest.fixture
def gen():
    return np.random.default_rng(1234)
