import numpy as np

from sinr.nn import Mode


def central_diff(f, x, h=1e-5):
    """Central finite differences of scalar ``f`` w.r.t. every entry of ``x`` (in place)."""
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        up = f()
        x[i] = old - h
        down = f()
        x[i] = old
        grad[i] = (up - down) / (2 * h)
    return grad


def rel_err(a, b):
    return np.max(np.abs(a - b) / np.maximum(1e-8, np.abs(a) + np.abs(b)))


def layer_grad_check(layer, x, rng, h=1e-5):
    """Return (max rel err for input, [max rel err per param]) for loss = sum(out * w)."""
    out = layer.forward(x, Mode.TRAIN, rng)
    w = rng.standard_normal(out.shape)

    def loss():
        return float(np.sum(layer.forward(x, Mode.TRAIN, None) * w))

    layer.forward(x, Mode.TRAIN, rng)
    dx = layer.backward(w)
    param_grads = [p.grad.copy() for p in layer.params()]
    errs = [rel_err(dx, central_diff(loss, x, h))]
    for p, g in zip(layer.params(), param_grads):
        errs.append(rel_err(g, central_diff(loss, p.data, h)))
    return errs
