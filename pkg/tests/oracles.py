"""Independent reference implementations used by the unit and acceptance tests.

Nothing here calls into the code path it checks: the DFT is the literal
quadruple sum, the quantizer oracle enumerates every code, and the Grad-CAM
oracle derives the class-score gradient by hand for a pooled linear head.
"""
import numpy as np

from zsqbench import ops
from zsqbench.tensor import Tensor


# -- 2-D DFT ---------------------------------------------------------------------

def naive_dft2(x):
    """Unitary, centered 2-D DFT by direct summation, O(N^4)."""
    x = np.asarray(x, dtype=np.complex128)
    h, w = x.shape
    out = np.zeros((h, w), dtype=np.complex128)
    for u in range(h):
        for v in range(w):
            acc = 0j
            for a in range(h):
                for b in range(w):
                    acc += x[a, b] * np.exp(-2j * np.pi * (u * a / h + v * b / w))
            out[u, v] = acc
    out /= np.sqrt(h * w)
    # center: move frequency (0, 0) to (h//2, w//2)
    return np.roll(out, (h // 2, w // 2), axis=(0, 1))


# -- quantizer -------------------------------------------------------------------

def nearest_code_oracle(values, params):
    """Exhaustive nearest representable value; ties go to the larger code."""
    codes = np.arange(params.qmin, params.qmax + 1, dtype=np.float64)
    # representable values on the code grid, before dequantization offset
    grid = codes + params.zero_point
    target = np.asarray(values, np.float64)[:, None] / params.scale
    dist = np.abs(target - grid[None, :])
    best = dist.min(axis=1, keepdims=True)
    # among ties pick the highest code (rounding half toward +inf)
    is_best = np.isclose(dist, best, rtol=0, atol=1e-9)
    idx = len(codes) - 1 - np.argmax(is_best[:, ::-1], axis=1)
    return codes[idx].astype(np.int64)


# -- Grad-CAM -------------------------------------------------------------------

def literal_grad_cam(model, x, class_id):
    """Saliency of one sample from explicit loops over channels and positions.

    Valid for models whose head is global average pooling followed by a
    single linear layer, where d(score_c)/dA[k, h, w] = W[c, k] / (H * W).
    """
    kinds = [l.kind for l in model.layers[model.tap_index + 1:]]
    assert kinds == ["avgpool", "linear"], kinds
    lin = len(model.layers) - 1
    W = model.params[f"{lin}.weight"].data.astype(np.float64)
    tap, _ = model.features(Tensor(x[None]), "eval")
    A = tap.data[0].astype(np.float64)
    K, H, Wd = A.shape
    weights = np.zeros(K)
    for k in range(K):
        total = 0.0
        for i in range(H):
            for j in range(Wd):
                total += W[class_id, k] / (H * Wd)  # gradient at (k, i, j)
        weights[k] = total / (H * Wd)
    cam = np.zeros((H, Wd))
    for i in range(H):
        for j in range(Wd):
            s = 0.0
            for k in range(K):
                s += weights[k] * A[k, i, j]
            cam[i, j] = max(s, 0.0)
    return cam


# -- primitive gradient cases --------------------------------------------------------

def _nonzero(rng, shape, margin=0.05):
    x = rng.normal(0, 1, shape)
    return np.where(np.abs(x) < margin, margin * np.sign(x + 1e-12) * 2, x)


def primitive_cases(rng, dtype=np.float32):
    """name -> (function of one tensor returning a scalar, input array).

    Constants take the dtype of the tensor being differentiated, so the
    autodiff pass runs at ``dtype`` while the finite-difference pass (which
    feeds float64) stays in float64 throughout.
    """
    active = {"dtype": dtype}
    w_conv = rng.normal(0, 0.5, (3, 2, 3, 3))
    b_conv = rng.normal(0, 0.1, 3)
    x_conv = rng.normal(0, 1, (1, 2, 5, 5))
    w_lin, b_lin = rng.normal(0, 0.5, (4, 6)), rng.normal(0, 0.1, 4)
    x_lin = rng.normal(0, 1, (3, 6))
    gamma, beta = rng.uniform(0.5, 1.5, 3), rng.normal(0, 0.2, 3)
    rm, rv = rng.normal(0, 0.3, 3), rng.uniform(0.5, 2.0, 3)
    coef = rng.normal(0, 1, (2, 3, 4, 4))
    labels = rng.integers(0, 5, 4)
    teacher = rng.normal(0, 1, (4, 5))
    target = rng.normal(0, 1, (3, 4))
    p_ref = rng.dirichlet(np.ones(5), 3)

    def weighted(t, c):
        return ops.sum(ops.mul(t, Tensor(c, dtype=t.dtype)))

    def T(a):
        return Tensor(a, dtype=active["dtype"])

    # batchnorm running buffers are updated in place, so each call gets copies
    rm, rv = rm.astype(np.float64), rv.astype(np.float64)
    cases = {
        "conv2d_x": (lambda x: rng_fixed_coef(ops.conv2d(x, T(w_conv), T(b_conv), 1, 1)), x_conv),
        "conv2d_w": (lambda w: rng_fixed_coef(ops.conv2d(T(x_conv), w, T(b_conv), 2, 1)), w_conv),
        "conv2d_b": (lambda b: rng_fixed_coef(ops.conv2d(T(x_conv), T(w_conv), b, 1, 0)), b_conv),
        "linear_x": (lambda x: rng_fixed_coef(ops.linear(x, T(w_lin), T(b_lin))), x_lin),
        "linear_w": (lambda w: rng_fixed_coef(ops.linear(T(x_lin), w, T(b_lin))), w_lin),
        "relu": (lambda x: weighted(ops.relu(x), coef), _nonzero(rng, (2, 3, 4, 4))),
        # distinct, well-separated values keep the argmax stable under h
        "maxpool": (lambda x: weighted(ops.maxpool2d(x, 2), coef[:, :1, :2, :2]),
                    rng.permutation(32).reshape(2, 1, 4, 4) * 0.1),
        "avgpool": (lambda x: weighted(ops.avgpool2d(x, 2), coef[:, :, :2, :2]), rng.normal(0, 1, (2, 3, 4, 4))),
        "global_avgpool": (lambda x: weighted(ops.global_avgpool(x), coef[:, :, 0, 0]), rng.normal(0, 1, (2, 3, 4, 4))),
        "batchnorm_train": (lambda x: weighted(ops.batchnorm(x, T(gamma), T(beta), rm.astype(active["dtype"]), rv.astype(active["dtype"]), True)[0], coef),
                            rng.normal(0, 1, (2, 3, 4, 4))),
        "batchnorm_eval": (lambda x: weighted(ops.batchnorm(x, T(gamma), T(beta), rm.astype(active["dtype"]), rv.astype(active["dtype"]), False)[0], coef),
                           rng.normal(0, 1, (2, 3, 4, 4))),
        "batchnorm_gamma": (lambda g: weighted(ops.batchnorm(T(coef * 0.7), g, T(beta), rm.astype(active["dtype"]), rv.astype(active["dtype"]), True)[0],
                                               coef), gamma),
        "channel_stats": (lambda x: ops.add(ops.sum(ops.channel_mean(x)),
                                            ops.sum(ops.sqrt(ops.add(ops.channel_var(x), 1e-5)))),
                          rng.normal(0, 1, (2, 3, 4, 4))),
        "add_scale": (lambda x: weighted(ops.scale(ops.add(x, x), 1.5), coef), rng.normal(0, 1, (2, 3, 4, 4))),
        "mul_broadcast": (lambda x: weighted(ops.mul(x, T(coef[:1])), coef), rng.normal(0, 1, (2, 3, 4, 4))),
        "exp_log_sqrt": (lambda x: ops.sum(ops.log(ops.sqrt(ops.add(ops.exp(x), 1.0)))), rng.normal(0, 1, (3, 4))),
        "cross_entropy": (lambda z: ops.cross_entropy(z, labels), rng.normal(0, 1, (4, 5))),
        "kl_div_logits": (lambda z: ops.kl_div_logits(T(teacher), z), rng.normal(0, 1, (4, 5))),
        "kl_divergence": (lambda z: ops.kl_divergence(T(p_ref), ops.softmax(z)), rng.normal(0, 1, (3, 5))),
        "kl_divergence_p": (lambda z: ops.kl_divergence(ops.softmax(z), T(p_ref)), rng.normal(0, 1, (3, 5))),
        "log_softmax": (lambda z: weighted(ops.log_softmax(z), teacher), rng.normal(0, 1, (4, 5))),
        "mse_frobenius": (lambda a: ops.mse_frobenius(a, T(target)), rng.normal(0, 1, (3, 4))),
        "sub_div_square": (lambda x: ops.mean(ops.square(ops.div(ops.sub(x, T(coef[:1])), T(1.5 + coef ** 2)))),
                           rng.normal(0, 1, (2, 3, 4, 4))),
        "reshape_softmax": (lambda x: weighted(ops.softmax(ops.reshape(x, (4, 5))), teacher), rng.normal(0, 1, (2, 10))),
        "pick": (lambda z: ops.sum(ops.pick(z, labels)), rng.normal(0, 1, (4, 5))),
    }

    def bind(f):
        def g(t):
            active["dtype"] = t.dtype
            return f(t)
        return g

    return {k: (bind(f), np.asarray(x, dtype)) for k, (f, x) in cases.items()}


_COEF_RNG_SEED = 99


def rng_fixed_coef(t):
    """Contract a tensor with fixed pseudo-random weights to get a scalar."""
    c = np.random.default_rng(_COEF_RNG_SEED).normal(0, 1, t.shape)
    return ops.sum(ops.mul(t, Tensor(c, dtype=t.dtype)))
