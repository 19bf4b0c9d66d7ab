"""Small fixed-architecture differentiable core: layers with explicit backward passes,
log-densities, AMSGrad, finite-difference checking and a binary checkpoint format.

Everything runs in float64. Layer functions come in ``forward`` / ``backward`` pairs;
backward functions take the upstream gradient and return gradients of the inputs.
"""
from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Mapping

import numpy as np

SELU_LAMBDA = 1.0507009873554805
SELU_ALPHA = 1.6732632423543772
LOG_2PI = math.log(2.0 * math.pi)


class NonFiniteError(FloatingPointError):
    pass


def ensure_finite(name: str, x: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"non-finite values in {name}")
    return x


# ---------------------------------------------------------------------------
# Activations


def selu(x):
    x = np.asarray(x, dtype=np.float64)
    return SELU_LAMBDA * np.where(x > 0, x, SELU_ALPHA * np.expm1(np.minimum(x, 0.0)))


def selu_grad(x):
    """Derivative of SELU at the pre-activation ``x``."""
    x = np.asarray(x, dtype=np.float64)
    return SELU_LAMBDA * np.where(x > 0, 1.0, SELU_ALPHA * np.exp(np.minimum(x, 0.0)))


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# ---------------------------------------------------------------------------
# Linear and convolution layers


def linear(x, W, b):
    return x @ W + b


def linear_backward(x, W, dout):
    """Returns (dx, dW, db) for ``x @ W + b``; leading axes of x are batch axes."""
    x2 = x.reshape(-1, x.shape[-1])
    d2 = dout.reshape(-1, dout.shape[-1])
    return dout @ W.T, x2.T @ d2, d2.sum(axis=0)


def conv1d(x, filters, bias):
    """Valid cross-correlation along the length axis.

    x: (L, C_in) or (N, L, C_in); filters: (K, C_in, C_out); bias: (C_out,).
    """
    single = x.ndim == 2
    if single:
        x = x[None]
    K = filters.shape[0]
    L = x.shape[1]
    if K > L:
        raise ValueError(f"kernel size {K} exceeds input length {L}")
    L_out = L - K + 1
    out = np.broadcast_to(bias, (x.shape[0], L_out, filters.shape[2])).copy()
    for k in range(K):
        out += x[:, k : k + L_out] @ filters[k]
    return out[0] if single else out


def conv1d_backward(x, filters, dout):
    """Returns (dx, dfilters, dbias)."""
    single = x.ndim == 2
    if single:
        x, dout = x[None], dout[None]
    K = filters.shape[0]
    L_out = dout.shape[1]
    dx = np.zeros_like(x, dtype=np.float64)
    dW = np.empty_like(filters, dtype=np.float64)
    d2 = dout.reshape(-1, dout.shape[-1])
    for k in range(K):
        dx[:, k : k + L_out] += dout @ filters[k].T
        dW[k] = x[:, k : k + L_out].reshape(-1, x.shape[-1]).T @ d2
    db = d2.sum(axis=0)
    return (dx[0] if single else dx), dW, db


def maxpool_positions(x, mask=None):
    """Per-channel maximum over the length axis (axis -2).

    ``mask`` (same leading shape as x without the channel axis) marks positions that may
    win; ties resolve to the lowest index. Returns (out, argmax).
    """
    if mask is not None:
        x = np.where(mask[..., None], x, -np.inf)
    idx = np.argmax(x, axis=-2)
    out = np.take_along_axis(x, idx[..., None, :], axis=-2)[..., 0, :]
    return out, idx


def maxpool_backward(dout, argmax, length):
    shape = dout.shape[:-1] + (length, dout.shape[-1])
    dx = np.zeros(shape)
    np.put_along_axis(dx, argmax[..., None, :], dout[..., None, :], axis=-2)
    return dx


def has_ties(x, mask=None, tol=0.0) -> bool:
    """True if any channel's maximum is attained at more than one allowed position."""
    if mask is not None:
        x = np.where(mask[..., None], x, -np.inf)
    top = np.max(x, axis=-2, keepdims=True)
    return bool(np.any(np.sum(x >= top - tol, axis=-2) > 1))


# ---------------------------------------------------------------------------
# Log-densities. Each *_grad returns partial derivatives in argument order.


def bernoulli_loglik(s, p):
    s = np.asarray(s, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    return s * np.log(p) + (1.0 - s) * np.log1p(-p)


def bernoulli_logit_loglik(s, logit):
    """Bernoulli log-likelihood parameterized by the logit (numerically stable)."""
    logit = np.asarray(logit, dtype=np.float64)
    return np.asarray(s, dtype=np.float64) * logit - np.logaddexp(0.0, logit)


def bernoulli_logit_loglik_grad(s, logit):
    return np.asarray(s, dtype=np.float64) - sigmoid(logit)


def _check_scale(scale, what="scale"):
    if np.any(np.asarray(scale) <= 0):
        raise ValueError(f"{what} must be positive")


def gaussian_loglik(y, mu, tau):
    """log Normal(y; mu, tau) with tau the standard deviation."""
    _check_scale(tau, "tau")
    z = (np.asarray(y) - mu) / tau
    return -0.5 * z * z - np.log(tau) - 0.5 * LOG_2PI


def gaussian_loglik_grad(y, mu, tau):
    _check_scale(tau, "tau")
    r = np.asarray(y, dtype=np.float64) - mu
    d_mu = r / tau**2
    d_tau = -1.0 / tau + r * r / tau**3
    return -d_mu, d_mu, d_tau


def normal_logprior(x, loc, scale):
    return gaussian_loglik(x, loc, scale)


def normal_logprior_grad(x, loc, scale):
    return gaussian_loglik_grad(x, loc, scale)[0]


def lognormal_logprior(x, loc, scale):
    _check_scale(scale)
    x = np.asarray(x, dtype=np.float64)
    if np.any(x <= 0):
        raise ValueError("lognormal support is x > 0")
    return gaussian_loglik(np.log(x), loc, scale) - np.log(x)


def lognormal_logprior_grad(x, loc, scale):
    x = np.asarray(x, dtype=np.float64)
    return (-(np.log(x) - loc) / scale**2 - 1.0) / x


# ---------------------------------------------------------------------------
# Parameters


@dataclass(frozen=True)
class Prior:
    family: str  # "normal" | "lognormal"
    loc: float
    scale: float

    def __post_init__(self):
        if self.family not in ("normal", "lognormal"):
            raise ValueError(f"unknown prior family {self.family!r}")
        _check_scale(self.scale)


class ParamStore:
    """Named float64 arrays with insertion-ordered iteration and optional priors.

    A parameter with a lognormal prior is stored on the log scale under a name
    starting with ``log_``; its prior is evaluated on the positive value.
    """

    def __init__(self, values: Mapping[str, np.ndarray] | None = None, priors: Mapping[str, Prior] | None = None):
        self._values: dict[str, np.ndarray] = {}
        self.priors: dict[str, Prior] = dict(priors or {})
        for k, v in (values or {}).items():
            self[k] = v

    def __getitem__(self, name: str) -> np.ndarray:
        return self._values[name]

    def __setitem__(self, name: str, value) -> None:
        self._values[name] = np.array(value, dtype=np.float64)

    def __contains__(self, name: str) -> bool:
        return name in self._values

    def __iter__(self) -> Iterator[str]:
        return iter(self._values)

    def __len__(self) -> int:
        return len(self._values)

    def names(self) -> list[str]:
        return list(self._values)

    def items(self):
        return self._values.items()

    def copy(self) -> "ParamStore":
        return ParamStore({k: v.copy() for k, v in self._values.items()}, self.priors)

    def size(self) -> int:
        return sum(v.size for v in self._values.values())

    def log_prior(self, names=None) -> float:
        total = 0.0
        for name in names if names is not None else self.priors:
            prior = self.priors.get(name)
            if prior is None:
                continue
            v = self._values[name]
            if prior.family == "normal":
                total += float(np.sum(normal_logprior(v, prior.loc, prior.scale)))
            else:
                total += float(np.sum(lognormal_logprior(np.exp(v), prior.loc, prior.scale)))
        return total

    def log_prior_grad(self, names=None) -> dict[str, np.ndarray]:
        """Gradient of ``log_prior`` with respect to the stored (possibly log-scale) values."""
        out = {}
        for name in names if names is not None else self.priors:
            prior = self.priors.get(name)
            if prior is None:
                continue
            v = self._values[name]
            if prior.family == "normal":
                out[name] = normal_logprior_grad(v, prior.loc, prior.scale)
            else:
                x = np.exp(v)
                out[name] = lognormal_logprior_grad(x, prior.loc, prior.scale) * x
        return out

    def equal(self, other: "ParamStore") -> bool:
        return self.names() == other.names() and all(
            np.array_equal(self[k], other[k]) for k in self._values
        )


# ---------------------------------------------------------------------------
# Optimizer


@dataclass
class AmsGradState:
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    v_hat: dict[str, np.ndarray] = field(default_factory=dict)


def amsgrad_step(params: ParamStore, grads: Mapping[str, np.ndarray], state: AmsGradState) -> None:
    """In-place AMSGrad update with bias correction and decoupled weight decay.

    Only parameters present in ``grads`` are touched.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for parameter {name!r}")
    state.t += 1
    t = state.t
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for name, g in grads.items():
        p = params[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
            state.v_hat[name] = np.zeros_like(p)
        m, v, vh = state.m[name], state.v[name], state.v_hat[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        np.maximum(vh, v, out=vh)
        update = (m / bc1) / (np.sqrt(vh / bc2) + state.eps)
        params[name] = p - state.lr * state.weight_decay * p - state.lr * update


# ---------------------------------------------------------------------------
# Finite differences


@dataclass
class FDReport:
    max_rel_error: float
    worst: tuple[str, tuple] | None
    n_checked: int
    n_ties: int
    max_abs_error: float


def finite_diff_check(
    loss_fn: Callable[[ParamStore], float],
    params: ParamStore,
    grads: Mapping[str, np.ndarray],
    h: float = 1e-5,
    kink_fn: Callable[[ParamStore], object] | None = None,
    names=None,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
    floor: float = 1e-6,
) -> FDReport:
    """Compare analytic ``grads`` with central differences of ``loss_fn``.

    ``kink_fn`` returns a signature of the non-smooth choices (e.g. max-pool argmax);
    a coordinate whose perturbations change the signature sits at a tie and is skipped.
    Relative error is |a - n| / max(|a|, |n|, floor).
    """
    work = params.copy()
    worst, worst_err, worst_abs = None, 0.0, 0.0
    n_checked = n_ties = 0
    for name in names if names is not None else grads:
        value = work[name]
        coords = list(np.ndindex(value.shape))
        if max_coords is not None and len(coords) > max_coords:
            rng = rng or np.random.default_rng(0)
            coords = [coords[i] for i in rng.choice(len(coords), max_coords, replace=False)]
        for idx in coords:
            orig = value[idx]
            value[idx] = orig + h
            f_plus = loss_fn(work)
            sig_plus = kink_fn(work) if kink_fn else None
            value[idx] = orig - h
            f_minus = loss_fn(work)
            sig_minus = kink_fn(work) if kink_fn else None
            value[idx] = orig
            if kink_fn is not None and sig_plus != sig_minus:
                n_ties += 1
                continue
            numeric = (f_plus - f_minus) / (2.0 * h)
            analytic = float(np.asarray(grads[name])[idx])
            abs_err = abs(analytic - numeric)
            err = abs_err / max(abs(analytic), abs(numeric), floor)
            n_checked += 1
            worst_abs = max(worst_abs, abs_err)
            if err > worst_err or worst is None:
                worst_err, worst = err, (name, idx)
    return FDReport(worst_err, worst, n_checked, n_ties, worst_abs)


# ---------------------------------------------------------------------------
# Checkpoints

CHECKPOINT_MAGIC = b"CAIRECKP"
CHECKPOINT_VERSION = 1


def checkpoint_bytes(params: ParamStore, metadata: Mapping | None = None) -> bytes:
    """Versioned header, JSON metadata, then (name, shape, little-endian float64 values)."""
    buf = io.BytesIO()
    meta = json.dumps(dict(metadata or {}), sort_keys=True, separators=(",", ":")).encode()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<II", CHECKPOINT_VERSION, len(meta)))
    buf.write(meta)
    buf.write(struct.pack("<I", len(params)))
    for name, value in params.items():
        encoded = name.encode()
        buf.write(struct.pack("<H", len(encoded)))
        buf.write(encoded)
        buf.write(struct.pack("<B", value.ndim))
        buf.write(struct.pack(f"<{value.ndim}Q", *value.shape))
        buf.write(np.ascontiguousarray(value, dtype="<f8").tobytes())
    return buf.getvalue()


def parse_checkpoint(data: bytes) -> tuple[ParamStore, dict]:
    if data[:8] != CHECKPOINT_MAGIC:
        raise ValueError("not a checkpoint file")
    version, meta_len = struct.unpack_from("<II", data, 8)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    pos = 16
    meta = json.loads(data[pos : pos + meta_len].decode())
    pos += meta_len
    (n,) = struct.unpack_from("<I", data, pos)
    pos += 4
    params = ParamStore()
    for _ in range(n):
        (name_len,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos : pos + name_len].decode()
        pos += name_len
        (ndim,) = struct.unpack_from("<B", data, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}Q", data, pos)
        pos += 8 * ndim
        count = int(np.prod(shape)) if ndim else 1
        params[name] = np.frombuffer(data, dtype="<f8", count=count, offset=pos).reshape(shape)
        pos += 8 * count
    if pos != len(data):
        raise ValueError("trailing bytes in checkpoint")
    return params, meta


def save_checkpoint(path: str | Path, params: ParamStore, metadata: Mapping | None = None) -> None:
    Path(path).write_bytes(checkpoint_bytes(params, metadata))


def load_checkpoint(path: str | Path) -> tuple[ParamStore, dict]:
    return parse_checkpoint(Path(path).read_bytes())
