"""Small shared builders for tests."""

import numpy as np

from chaosbench import autodiff as ad
from chaosbench.autodiff import Tensor
from chaosbench.autoencoders import Autoencoder


def set_linear_field(model, A, b=None, cond_weight=None):
    """Make a depth-1 field MLP compute f([x, s0]) = A x (+ C s0) + b."""
    D = A.shape[0]
    layer = model.field.layers[0] if hasattr(model, "field") else model.net.layers[0]
    W = np.zeros(layer.weight.shape)
    W[:D] = A.T
    if cond_weight is not None:
        W[D:] = cond_weight.T
    layer.weight.data = W
    layer.bias.data = np.zeros(D) if b is None else np.asarray(b, dtype=np.float64)


def zero_params(model):
    for _, p in model.named_parameters():
        p.data = np.zeros_like(p.data)


def step_np(model, z, cond=None, rstate=None):
    z = np.atleast_2d(z)
    cond = z if cond is None else np.atleast_2d(cond)
    with ad.no_grad():
        y, r = model.step(Tensor(z), Tensor(cond), rstate)
    return y.data, r


def fd_directional(loss_fn, params, n_dirs, rng, eps=1e-6):
    """Relative errors of autodiff vs central differences along random parameter directions."""
    for p in params:
        p.grad = None
    loss = loss_fn()
    loss.backward()
    grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
    errs = []
    for _ in range(n_dirs):
        dirs = [rng.standard_normal(p.shape) for p in params]
        norm = np.sqrt(sum(np.sum(d * d) for d in dirs))
        dirs = [d / norm for d in dirs]
        orig = [p.data.copy() for p in params]
        for p, o, d in zip(params, orig, dirs):
            p.data = o + eps * d
        with ad.no_grad():
            fp = float(loss_fn().data)
        for p, o, d in zip(params, orig, dirs):
            p.data = o - eps * d
        with ad.no_grad():
            fm = float(loss_fn().data)
        for p, o in zip(params, orig):
            p.data = o
        num = (fp - fm) / (2 * eps)
        ana = sum(float(np.sum(g * d)) for g, d in zip(grads, dirs))
        errs.append(abs(ana - num) / max(abs(ana), abs(num), 1e-8))
    return np.array(errs)


class IdentityAE(Autoencoder):
    kind = "identity"

    def __init__(self, n):
        super().__init__((n,), n)

    def encode_t(self, x):
        return x

    def decode_t(self, z):
        return z
