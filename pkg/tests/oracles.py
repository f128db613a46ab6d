"""Independent reference implementations shared by the test modules."""

import numpy as np

from repadapter.adapters import GroupwiseLinear, RepAdapter
from repadapter.nn import Linear


def conv_oracle(x, kernel, bias, stride, padding):
    c_out, c_in, K, _ = kernel.shape
    _, H, W = x.shape
    xp = np.zeros((c_in, H + 2 * padding, W + 2 * padding))
    xp[:, padding:padding + H, padding:padding + W] = x
    Ho, Wo = (H + 2 * padding - K) // stride + 1, (W + 2 * padding - K) // stride + 1
    out = np.zeros((c_out, Ho, Wo))
    for o in range(c_out):
        for i in range(Ho):
            for j in range(Wo):
                s = 0.0
                for c in range(c_in):
                    for u in range(K):
                        for v in range(K):
                            s += xp[c, i * stride + u, j * stride + v] * kernel[o, c, u, v]
                out[o, i, j] = s + (bias[o] if bias is not None else 0.0)
    return out


def block_diag_oracle(g):
    """Dense block-diagonal matrix assembled independently of ``densify``."""
    blocks = [w.value for w in g.weights]
    rows = []
    for i, b in enumerate(blocks):
        rows.append(np.hstack([b if j == i else np.zeros((b.shape[0], blocks[j].shape[1]))
                               for j in range(len(blocks))]))
    return np.vstack(rows)


def random_adapter(rng, d, c, k, s=1.0, bias=False):
    down = Linear(rng.standard_normal((d, c)), rng.standard_normal(c) if bias else None)
    up = GroupwiseLinear([rng.standard_normal((c // k, d // k)) for _ in range(k)],
                         rng.standard_normal(d) if bias else None)
    return RepAdapter(down, up, s)


def fd_gradcheck(model, store, x, y, loss_fn, h=1e-5, floor=1e-5):
    """Per-tensor relative error between analytic and central-difference gradients.

    Returns ``{name: rel_err}`` with ``rel_err = |g_a - g_fd| / max(|g_a|, |g_fd|, floor)``
    in the Frobenius norm. The floor keeps gradients that are exactly zero by
    symmetry (the key bias under softmax) from dividing difference noise by
    nothing.
    """
    store.zero_grad()
    loss, dout = loss_fn(model.forward_train(x), y)
    model.backward(dout)
    analytic = store.grads()
    errors = {}
    for name, p in store.trainable().items():
        fd = np.zeros_like(p.value)
        flat, gflat = p.value.reshape(-1), fd.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = loss_fn(model.forward(x), y)[0]
            flat[i] = orig - h
            down = loss_fn(model.forward(x), y)[0]
            flat[i] = orig
            gflat[i] = (up - down) / (2 * h)
        scale = max(np.linalg.norm(analytic[name]), np.linalg.norm(fd), floor)
        errors[name] = float(np.linalg.norm(analytic[name] - fd) / scale)
    return errors
