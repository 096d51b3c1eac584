"""Central finite-difference gradient checking shared by the tests."""
import numpy as np

from hive3d.tensor import Tape, Tensor, _result, tensor_sum

STEP = 1e-3


def numeric_grad(f, arrays, i, step=STEP):
    """d f / d arrays[i] by central differences; f maps float64 arrays to a float."""
    a = arrays[i]
    g = np.zeros_like(a)
    it = np.nditer(a, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = a[idx]
        a[idx] = old + step
        hi = f(*arrays)
        a[idx] = old - step
        lo = f(*arrays)
        a[idx] = old
        g[idx] = (hi - lo) / (2 * step)
    return g


def analytic_grads(op, arrays, weights):
    """Gradients of sum(weights * op(*tensors)) with respect to every input."""
    ts = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    with Tape() as tape:
        loss = tensor_sum(_mul(op(*ts), weights))
    tape.backward(loss)
    return [t.grad if t.grad is not None else np.zeros_like(t.data) for t in ts]


def _mul(t, w):
    def backward_fn(g):
        return (g * w,)

    return _result(t.data * w, (t,), backward_fn)


def rel_error(a, b):
    num = np.linalg.norm(a - b)
    den = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return num / den


def check(op, arrays, rng, step=STEP):
    """Largest relative error between analytic and numeric gradients over all inputs."""
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    out = op(*[Tensor(a) for a in arrays]).data
    weights = rng.standard_normal(out.shape)

    def f(*arrs):
        return float(np.sum(op(*[Tensor(a) for a in arrs]).data * weights))

    grads = analytic_grads(op, arrays, weights)
    return max(rel_error(g, numeric_grad(f, arrays, i, step)) for i, g in enumerate(grads))


# -- random instances per operator ----------------------------------------------
# Inputs avoid non-differentiable points by more than the step: relu inputs stay
# away from 0 and maxpool windows have well-separated values.

from hive3d import tensor as T  # noqa: E402


def _away_from_zero(rng, shape, margin=0.01):
    x = rng.uniform(margin, 1.0, size=shape)
    return x * rng.choice([-1.0, 1.0], size=shape)


def inst_conv3d(rng):
    b, ci, co = rng.integers(1, 3), rng.integers(1, 3), rng.integers(1, 3)
    k = tuple(int(v) for v in rng.integers(1, 4, size=3))
    pad = tuple(int(v) for v in rng.integers(0, 2, size=3))
    stride = tuple(int(v) for v in rng.integers(1, 3, size=3))
    ext = tuple(int(max(kk, rng.integers(2, 5))) for kk in k)
    x = rng.uniform(-1, 1, size=(b, ci) + ext)
    w = rng.uniform(-1, 1, size=(co, ci) + k)
    bias = rng.uniform(-1, 1, size=co)
    return (lambda x, w, bb: T.conv3d(x, T.Kernel3D(w, bb), pad, stride)), [x, w, bias]


def inst_relu(rng):
    shape = tuple(int(v) for v in rng.integers(1, 4, size=rng.integers(1, 5)))
    return T.relu, [_away_from_zero(rng, shape)]


def inst_maxpool3d(rng):
    window = tuple(int(v) for v in rng.integers(1, 3, size=3))
    stride = tuple(int(v) for v in rng.integers(1, 3, size=3))
    ext = tuple(int(w + rng.integers(0, 3)) for w in window)
    shape = (int(rng.integers(1, 3)), int(rng.integers(1, 3))) + ext
    # distinct values 0.01 apart, far more than twice the step
    x = rng.permutation(int(np.prod(shape))).reshape(shape) * 0.01
    return (lambda x: T.maxpool3d(x, window, stride)), [x]


def inst_gap(rng):
    shape = tuple(int(v) for v in rng.integers(1, 4, size=5))
    return T.global_avg_pool3d, [rng.uniform(-1, 1, size=shape)]


def inst_dense(rng):
    b, c, k = (int(v) for v in rng.integers(1, 5, size=3))
    return T.dense, [rng.uniform(-1, 1, size=(b, c)), rng.uniform(-1, 1, size=(c, k)), rng.uniform(-1, 1, size=k)]


def inst_sigmoid(rng):
    shape = (int(rng.integers(1, 6)), 1)
    return T.sigmoid, [rng.uniform(-4, 4, size=shape)]


def inst_bce(rng):
    n = int(rng.integers(1, 8))
    y = rng.integers(0, 2, size=n)
    p = rng.uniform(0.05, 0.95, size=(n, 1))
    return (lambda p: T.bce_loss(p, y)), [p]


def inst_bce_logits(rng):
    n = int(rng.integers(1, 8))
    y = rng.integers(0, 2, size=n)
    return (lambda z: T.bce_with_logits(z, y)), [rng.uniform(-6, 6, size=(n, 1))]


INSTANCES = {
    "conv3d": inst_conv3d,
    "relu": inst_relu,
    "maxpool3d": inst_maxpool3d,
    "gap": inst_gap,
    "dense": inst_dense,
    "sigmoid": inst_sigmoid,
    "bce": inst_bce,
    "bce_with_logits": inst_bce_logits,
}
