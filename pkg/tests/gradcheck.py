"""Central finite-difference oracle shared by the tensor and acceptance tests."""
import numpy as np

from sharedsep.tensor import Tensor, backward

H = 1e-5


def projection(y: Tensor, weights: np.ndarray) -> Tensor:
    """Scalar <y, weights>, so every output element gets a distinct random weight."""
    return Tensor.from_op(np.asarray(np.sum(y.data * weights)), (y,), lambda g: (g * weights,))


def numeric_grads(f, tensors, h=H):
    grads = []
    for t in tensors:
        g = np.zeros_like(t.data)
        flat, gflat = t.data.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f().data)
            flat[i] = orig - h
            fm = float(f().data)
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * h)
        grads.append(g)
    return grads


def analytic_grads(f, tensors):
    for t in tensors:
        t.zero_grad()
    backward(f())
    return [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tensors]


def max_rel_error(f, tensors, h=H):
    """Largest per-tensor norm-wise relative error between backward and finite differences."""
    num = numeric_grads(f, tensors, h)
    ana = analytic_grads(f, tensors)
    worst = 0.0
    for a, n in zip(ana, num):
        scale = max(np.linalg.norm(a), np.linalg.norm(n), 1e-12)
        worst = max(worst, float(np.linalg.norm(a - n) / scale))
    return worst


def sampled_rel_error(f, tensors, rng, per_tensor=2, h=H):
    """Norm-wise relative error over ``per_tensor`` random coordinates drawn from every tensor.

    The sampled entries are scored as one vector: biases feeding a batch norm have an
    exactly-zero gradient, so a per-tensor ratio would divide rounding noise by rounding noise.
    """
    ana = analytic_grads(f, tensors)
    got, want = [], []
    for t, a in zip(tensors, ana):
        flat = t.data.reshape(-1)
        for i in rng.choice(flat.size, min(per_tensor, flat.size), replace=False):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f().data)
            flat[i] = orig - h
            fm = float(f().data)
            flat[i] = orig
            want.append((fp - fm) / (2 * h))
            got.append(a.reshape(-1)[i])
    got, want = np.asarray(got), np.asarray(want)
    return float(np.linalg.norm(got - want) / max(np.linalg.norm(got), np.linalg.norm(want), 1e-12))
