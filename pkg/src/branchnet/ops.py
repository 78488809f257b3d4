"""Layer primitives: pure forward and backward functions on NCHW arrays.

Every operation takes explicit inputs and returns new arrays; nothing here
holds state. Tensors are numpy arrays laid out (batch, channel, height,
width), float32 in normal use and float64 when checking gradients.

Convolution is evaluated as im2col plus one matrix product. Patch columns
are materialized channel-major, then kernel row, then kernel column, matching
the declared accumulation order; the inner summation itself is delegated to
BLAS, so comparisons against the naive loop oracle use the relaxed 1e-5
relative tolerance rather than bit equality.
"""

from dataclasses import dataclass

import numpy as np

BN_MOMENTUM = 0.9
BN_EPS = 1e-5


@dataclass(frozen=True)
class RunningStats:
    """Batchnorm inference statistics. count == 0 means never updated."""

    mean: np.ndarray
    var: np.ndarray
    count: int = 0


@dataclass
class LayerGrad:
    """Backward-pass result: gradient w.r.t. the input plus named parameter grads."""

    input_grad: np.ndarray
    param_grads: dict


def _require(cond, msg):
    if not cond:
        raise ValueError(msg)


def _check_nchw(x, name="input"):
    _require(isinstance(x, np.ndarray) and x.ndim == 4,
             f"{name} must be a 4-d (n, c, h, w) array, got shape "
             f"{getattr(x, 'shape', None)}")


def conv_output_size(size, kernel, stride, padding):
    """Spatial output extent: floor((size + 2*padding - kernel) / stride) + 1."""
    return (size + 2 * padding - kernel) // stride + 1


def _conv_geometry(x_shape, w_shape, stride, padding):
    n, c, h, w = x_shape
    c_out, c_in, kh, kw = w_shape
    _require(kh == kw, f"kernels must be square, got {kh}x{kw}")
    _require(c == c_in,
             f"channel mismatch: input has {c} channels, kernel expects {c_in}")
    oh = conv_output_size(h, kh, stride, padding)
    ow = conv_output_size(w, kw, stride, padding)
    _require(oh > 0 and ow > 0,
             f"non-positive output size {oh}x{ow} for input {h}x{w}, "
             f"kernel {kh}, stride {stride}, padding {padding}")
    return n, c, h, w, c_out, kh, oh, ow


def _im2col(x, k, stride, padding, oh, ow):
    """Columns of shape (n, c*k*k, oh*ow); channel-major, kernel row, kernel column."""
    n, c = x.shape[:2]
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    sn, sc, sh, sw = x.strides
    windows = np.lib.stride_tricks.as_strided(
        x,
        shape=(n, c, k, k, oh, ow),
        strides=(sn, sc, sh, sw, sh * stride, sw * stride),
        writeable=False,
    )
    return np.ascontiguousarray(windows).reshape(n, c * k * k, oh * ow)


def conv2d_forward(x, weights, bias=None, stride=1, padding=0):
    """2-d convolution (cross-correlation), NCHW in, NCHW out."""
    _check_nchw(x)
    _require(weights.ndim == 4, f"weights must be 4-d, got shape {weights.shape}")
    n, c, h, w, c_out, k, oh, ow = _conv_geometry(x.shape, weights.shape, stride, padding)
    cols = _im2col(x, k, stride, padding, oh, ow)
    wmat = weights.reshape(c_out, -1)
    y = np.matmul(wmat, cols).reshape(n, c_out, oh, ow)
    if bias is not None:
        _require(bias.shape == (c_out,),
                 f"bias shape {bias.shape} does not match {c_out} output channels")
        y = y + bias[None, :, None, None]
    return y


def conv2d_backward(x, weights, bias, output_grad, stride=1, padding=0):
    """Gradients of a scalar loss through conv2d_forward."""
    _check_nchw(x)
    n, c, h, w, c_out, k, oh, ow = _conv_geometry(x.shape, weights.shape, stride, padding)
    _require(output_grad.shape == (n, c_out, oh, ow),
             f"output_grad shape {output_grad.shape} does not match forward "
             f"output ({n}, {c_out}, {oh}, {ow})")
    cols = _im2col(x, k, stride, padding, oh, ow)
    gy = output_grad.reshape(n, c_out, oh * ow)

    grads = {}
    if bias is not None:
        grads["b"] = output_grad.sum(axis=(0, 2, 3))
    grads["w"] = np.matmul(gy, cols.transpose(0, 2, 1)).sum(axis=0).reshape(weights.shape)

    gcols = np.matmul(weights.reshape(c_out, -1).T, gy)
    g6 = gcols.reshape(n, c, k, k, oh, ow)
    hp, wp = h + 2 * padding, w + 2 * padding
    gx_pad = np.zeros((n, c, hp, wp), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            gx_pad[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += g6[:, :, i, j]
    gx = gx_pad[:, :, padding:padding + h, padding:padding + w] if padding else gx_pad
    return LayerGrad(gx, grads)


def maxpool2x2(x):
    """2x2 max pooling with stride 2. Input extents must be even."""
    _check_nchw(x)
    n, c, h, w = x.shape
    _require(h % 2 == 0 and w % 2 == 0,
             f"maxpool2x2 needs even spatial extents, got {h}x{w}")
    return x.reshape(n, c, h // 2, 2, w // 2, 2).max(axis=(3, 5))


def maxpool2x2_backward(x, output_grad):
    """Routes each window's gradient to the first maximum in row-major window order."""
    _check_nchw(x)
    n, c, h, w = x.shape
    _require(h % 2 == 0 and w % 2 == 0,
             f"maxpool2x2 needs even spatial extents, got {h}x{w}")
    h2, w2 = h // 2, w // 2
    _require(output_grad.shape == (n, c, h2, w2),
             f"output_grad shape {output_grad.shape} does not match pooled "
             f"shape ({n}, {c}, {h2}, {w2})")
    # Window positions flattened row-major: (0,0), (0,1), (1,0), (1,1).
    flat = x.reshape(n, c, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h2, w2, 4)
    idx = flat.argmax(axis=-1)
    g = np.zeros_like(flat)
    np.put_along_axis(g, idx[..., None], output_grad[..., None], axis=-1)
    return g.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(x.shape)


def avgpool_global(x):
    """Global average pooling to spatial size 1x1."""
    _check_nchw(x)
    return x.mean(axis=(2, 3), keepdims=True)


def avgpool_global_backward(x, output_grad):
    n, c, h, w = x.shape
    _require(output_grad.shape == (n, c, 1, 1),
             f"output_grad shape {output_grad.shape} does not match ({n}, {c}, 1, 1)")
    return np.broadcast_to(output_grad / (h * w), x.shape).astype(x.dtype, copy=True)


def batchnorm(x, gamma, beta, running=None, mode="train", eps=BN_EPS,
              momentum=BN_MOMENTUM):
    """Per-channel batch normalization over the (n, h, w) axes.

    Train mode normalizes with biased batch statistics and returns updated
    running statistics (EMA, the first batch seeding them directly). Inference
    mode uses the running statistics and requires count > 0.
    Returns (output, RunningStats).
    """
    _check_nchw(x)
    c = x.shape[1]
    _require(gamma.shape == (c,) and beta.shape == (c,),
             f"gamma/beta shapes {gamma.shape}/{beta.shape} do not match {c} channels")
    if mode == "train":
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))  # biased
        xhat = (x - mean[None, :, None, None]) / np.sqrt(var + eps)[None, :, None, None]
        y = gamma[None, :, None, None] * xhat + beta[None, :, None, None]
        if running is None or running.count == 0:
            new = RunningStats(mean.copy(), var.copy(), 1)
        else:
            new = RunningStats(momentum * running.mean + (1 - momentum) * mean,
                               momentum * running.var + (1 - momentum) * var,
                               running.count + 1)
        return y, new
    if mode == "infer":
        _require(running is not None and running.count > 0,
                 "inference-mode batchnorm with uninitialized running statistics")
        inv = 1.0 / np.sqrt(running.var + eps)
        y = gamma[None, :, None, None] * (x - running.mean[None, :, None, None]) \
            * inv[None, :, None, None] + beta[None, :, None, None]
        return y, running
    raise ValueError(f"unknown batchnorm mode {mode!r}")


def batchnorm_backward(x, gamma, beta, output_grad, eps=BN_EPS):
    """Train-mode batchnorm gradients (batch statistics recomputed from x)."""
    _check_nchw(x)
    _require(output_grad.shape == x.shape,
             f"output_grad shape {output_grad.shape} does not match input {x.shape}")
    axes = (0, 2, 3)
    mean = x.mean(axis=axes)
    var = x.var(axis=axes)
    std = np.sqrt(var + eps)[None, :, None, None]
    xhat = (x - mean[None, :, None, None]) / std
    gy = output_grad
    dgamma = (gy * xhat).sum(axis=axes)
    dbeta = gy.sum(axis=axes)
    dxhat = gy * gamma[None, :, None, None]
    dx = (dxhat
          - dxhat.mean(axis=axes, keepdims=True)
          - xhat * (dxhat * xhat).mean(axis=axes, keepdims=True)) / std
    return LayerGrad(dx, {"gamma": dgamma, "beta": dbeta})


def relu(x):
    return np.maximum(x, 0)


def relu_backward(x, output_grad):
    """Subgradient 0 at exactly 0."""
    _require(output_grad.shape == x.shape,
             f"output_grad shape {output_grad.shape} does not match input {x.shape}")
    return output_grad * (x > 0)


def elementwise_add(a, b):
    _require(a.shape == b.shape,
             f"elementwise_add shape mismatch: {a.shape} vs {b.shape}")
    return a + b


def elementwise_add_backward(output_grad):
    return output_grad, output_grad


def fully_connected(x, weights, bias):
    """y = x W + b on inputs collapsed to (n, d)."""
    x2 = x.reshape(x.shape[0], -1)
    d, m = weights.shape
    _require(x2.shape[1] == d,
             f"fully_connected input dimension {x2.shape[1]} does not match "
             f"weight rows {d}")
    _require(bias.shape == (m,), f"bias shape {bias.shape} does not match ({m},)")
    return x2 @ weights + bias


def fully_connected_backward(x, weights, output_grad):
    x2 = x.reshape(x.shape[0], -1)
    n, m = output_grad.shape
    d = weights.shape[0]
    _require(output_grad.shape == (n, weights.shape[1]) and x2.shape == (n, d),
             f"fully_connected_backward shape mismatch: input {x.shape}, "
             f"weights {weights.shape}, output_grad {output_grad.shape}")
    gx = (output_grad @ weights.T).reshape(x.shape)
    return LayerGrad(gx, {"w": x2.T @ output_grad, "b": output_grad.sum(axis=0)})


def softmax(logits):
    """Row-wise softmax, stabilized by max subtraction."""
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _as_label_indices(labels, n, m):
    labels = np.asarray(labels)
    if labels.ndim == 1:
        _require(labels.shape[0] == n, f"expected {n} labels, got {labels.shape[0]}")
        _require(np.issubdtype(labels.dtype, np.integer),
                 "1-d labels must be integer class indices")
        _require(labels.min() >= 0 and labels.max() < m,
                 f"label out of range [0, {m}) in {labels.min()}..{labels.max()}")
        return labels
    if labels.ndim == 2:
        _require(labels.shape == (n, m),
                 f"one-hot labels shape {labels.shape} does not match ({n}, {m})")
        _require(np.all((labels == 0) | (labels == 1)) and np.all(labels.sum(axis=1) == 1),
                 "2-d labels must be one-hot rows")
        return labels.argmax(axis=1)
    raise ValueError(f"labels must be 1-d indices or 2-d one-hot, got ndim {labels.ndim}")


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy over the batch.

    Returns (loss, probabilities, logit_grad) with
    logit_grad = (probabilities - onehot) / n.
    """
    _require(logits.ndim == 2, f"logits must be (n, m), got shape {logits.shape}")
    n, m = logits.shape
    _require(m >= 2, f"softmax needs at least 2 classes, got {m}")
    idx = _as_label_indices(labels, n, m)
    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    loss = float((lse - z[np.arange(n), idx]).mean())
    probs = softmax(logits)
    grad = probs.copy()
    grad[np.arange(n), idx] -= 1.0
    grad /= n
    return loss, probs, grad


def sigmoid(logits):
    """Numerically stable element-wise logistic function."""
    e = np.exp(-np.abs(logits))
    return np.where(logits >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid_multilabel_loss(logits, labels):
    """Mean binary cross-entropy over all n*m independent sigmoid outputs.

    Returns (loss, scores, logit_grad) with logit_grad = (scores - labels) / (n*m).
    """
    _require(logits.ndim == 2, f"logits must be (n, m), got shape {logits.shape}")
    labels = np.asarray(labels)
    _require(labels.shape == logits.shape,
             f"labels shape {labels.shape} does not match logits {logits.shape}")
    _require(np.all((labels == 0) | (labels == 1)), "multilabel targets must be 0/1")
    n, m = logits.shape
    y = labels.astype(logits.dtype)
    per = np.maximum(logits, 0) - logits * y + np.log1p(np.exp(-np.abs(logits)))
    scores = sigmoid(logits)
    return float(per.mean()), scores, (scores - y) / (n * m)
