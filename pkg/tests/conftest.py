import numpy as np

from gmdiff.autodiff import Graph

UNARY_OPS = ["silu", "softmax", "scale", "l2norm_rows", "mean_last", "neg"]
BINARY_OPS = ["add", "sub", "mul", "matmul"]


def rel_err(a, b, floor=1e-2):
    """Matrix-scale relative error with a floor so FD roundoff on
    near-zero gradients does not read as disagreement."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.abs(a).max(), np.abs(b).max(), floor)
    return np.abs(a - b).max() / denom


def random_micro_graph(rng):
    """Random graph of 2..6 ops over (2,3) tensors with inputs in [-2, 2]."""
    g = Graph()
    shapes = {}
    pool = []
    for _ in range(rng.integers(1, 4)):
        nid = g.input(rng.uniform(-2, 2, (2, 3)))
        shapes[nid] = (2, 3)
        pool.append(nid)
    n_ops = int(rng.integers(2, 7))
    for _ in range(n_ops):
        kind = rng.choice(UNARY_OPS + BINARY_OPS)
        a = int(rng.choice(pool))
        if kind in BINARY_OPS:
            if kind == "matmul":
                if len(shapes[a]) != 2:
                    kind = "add"
                else:
                    w = g.input(rng.uniform(-2, 2, (shapes[a][1], 2)))
                    nid = g.op("matmul", a, w)
                    shapes[nid] = g.shape(nid)
                    pool.append(nid)
                    continue
            mates = [n for n in pool if shapes[n] == shapes[a]]
            nid = g.op(kind, a, int(rng.choice(mates)))
        elif kind == "scale":
            nid = g.op("scale", a, factor=float(rng.uniform(-2, 2)))
        elif kind == "mean_last":
            nid = g.op("mean", a, axis=-1) if len(shapes[a]) >= 2 else g.op("silu", a)
        elif kind == "neg":
            nid = g.op("scale", a, factor=-1.0)
        elif kind == "softmax":
            nid = g.op("softmax", a, axis=-1)
        else:
            nid = g.op(kind, a)
        shapes[nid] = g.shape(nid)
        pool.append(nid)
    return g, pool[-1]
