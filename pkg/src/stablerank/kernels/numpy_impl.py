"""Pure-NumPy implementations of the hot numeric kernels.

This is both the fallback path (when numba is unavailable or disabled via
``STABLERANK_KERNELS=numpy``) and the reference the jitted kernels are
checked against. All kernels preserve the input float dtype and are
deterministic: reductions use NumPy's fixed built-in reduction order.
"""

import numpy as np

NAME = "numpy"


def masked_softmax_fwd(logits: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Row softmax over permitted keys.

    logits [h, q, k], mask bool [q, k]. Masked lanes get exactly 0 weight;
    stabilization subtracts the max over permitted keys only. Callers must
    ensure every row has at least one permitted key.
    """
    shifted = np.where(mask[None, :, :], logits, -np.inf)
    m = shifted.max(axis=2, keepdims=True)
    e = np.exp(shifted - m)
    return e / e.sum(axis=2, keepdims=True)


def masked_softmax_bwd(probs: np.ndarray, dprobs: np.ndarray) -> np.ndarray:
    """dlogits = p * (dp - sum_k p*dp). Masked lanes have p == 0, so they
    receive exactly 0 gradient without consulting the mask."""
    inner = (probs * dprobs).sum(axis=2, keepdims=True)
    return probs * (dprobs - inner)


def rope_fwd(x: np.ndarray, positions: np.ndarray, inv_freq: np.ndarray) -> np.ndarray:
    """Rotate coordinate pairs (2j, 2j+1) of x [h, s, d] by positions[s] * inv_freq[j]."""
    ang = positions[:, None].astype(np.float64) * inv_freq[None, :]
    c = np.cos(ang).astype(x.dtype)
    s = np.sin(ang).astype(x.dtype)
    x0 = x[..., 0::2]
    x1 = x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = x0 * c - x1 * s
    out[..., 1::2] = x0 * s + x1 * c
    return out


def rope_bwd(dout: np.ndarray, positions: np.ndarray, inv_freq: np.ndarray) -> np.ndarray:
    """Backward of rope_fwd: rotation is orthonormal, so rotate grads by -angle."""
    ang = positions[:, None].astype(np.float64) * inv_freq[None, :]
    c = np.cos(ang).astype(dout.dtype)
    s = np.sin(ang).astype(dout.dtype)
    d0 = dout[..., 0::2]
    d1 = dout[..., 1::2]
    dx = np.empty_like(dout)
    dx[..., 0::2] = d0 * c + d1 * s
    dx[..., 1::2] = -d0 * s + d1 * c
    return dx


def rms_norm_fwd(x: np.ndarray, gain: np.ndarray, eps: float) -> tuple[np.ndarray, np.ndarray]:
    """y = x * inv_rms * gain per row of x [s, d]; returns (y, inv_rms [s])."""
    ms = (x * x).mean(axis=1) + eps
    inv_rms = ms ** -0.5
    return x * inv_rms[:, None] * gain[None, :], inv_rms


def rms_norm_bwd(
    dout: np.ndarray, x: np.ndarray, gain: np.ndarray, inv_rms: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    d = x.shape[1]
    g = dout * gain[None, :]
    xg = (x * g).sum(axis=1)
    dx = inv_rms[:, None] * g - x * (inv_rms**3 * xg / d)[:, None]
    dgain = (dout * x * inv_rms[:, None]).sum(axis=0)
    return dx, dgain


def log_softmax_fwd(x: np.ndarray) -> np.ndarray:
    """Row-wise log-softmax of x [s, v]."""
    m = x.max(axis=1, keepdims=True)
    shifted = x - m
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    return shifted - lse


def log_softmax_bwd(y: np.ndarray, dy: np.ndarray) -> np.ndarray:
    return dy - np.exp(y) * dy.sum(axis=1, keepdims=True)
