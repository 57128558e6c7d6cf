"""Small sine-activated MLPs with hand-rolled exact differentiation.

The networks map 2D domain coordinates to heights (linear output) or a mask
probability (sigmoid output). Besides plain reverse-mode parameter
gradients, the module propagates cotangents of the network's input-Jacobian
(needed because the training loss penalizes normals derived from dOut/dUV),
which requires the mixed second-order terms handled in `vjp`.

Weights are float32 end to end; a float64 mode exists for finite-difference
verification.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .rng import STREAM_NET_INIT, make_rng

ACT_LINEAR = "linear"
ACT_SIGMOID = "sigmoid"
_ACT_CODE = {ACT_LINEAR: 0, ACT_SIGMOID: 1}
_ACT_NAME = {v: k for k, v in _ACT_CODE.items()}

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class MLPSpec:
    width: int
    output_dim: int = 1
    input_dim: int = 2
    hidden_layers: int = 5
    omega0: float = 30.0
    output_activation: str = ACT_LINEAR

    def __post_init__(self):
        if self.output_activation not in _ACT_CODE:
            raise ValueError(f"unknown activation {self.output_activation}")

    def layer_dims(self) -> list[tuple[int, int]]:
        dims = [(self.input_dim, self.width)]
        dims += [(self.width, self.width)] * (self.hidden_layers - 1)
        dims.append((self.width, self.output_dim))
        return dims

    @property
    def param_count(self) -> int:
        return sum((i + 1) * o for i, o in self.layer_dims())


@dataclass
class MLPParams:
    spec: MLPSpec
    weights: list[np.ndarray]   # (out, in) per layer
    biases: list[np.ndarray]    # (out,) per layer

    @property
    def dtype(self):
        return self.weights[0].dtype

    def astype(self, dtype) -> "MLPParams":
        return MLPParams(self.spec,
                         [w.astype(dtype) for w in self.weights],
                         [b.astype(dtype) for b in self.biases])

    def copy(self) -> "MLPParams":
        return MLPParams(self.spec, [w.copy() for w in self.weights],
                         [b.copy() for b in self.biases])

    def flat(self) -> np.ndarray:
        return np.concatenate([np.concatenate([w.ravel(), b])
                               for w, b in zip(self.weights, self.biases)])


def init_mlp(spec: MLPSpec, seed: int, dtype=np.float32) -> MLPParams:
    """Sine-preserving init: first layer U(-1/in, 1/in) (scaled by omega0 in
    the forward pass), deeper layers U(-sqrt(6/in), sqrt(6/in)); zero biases."""
    rng = make_rng(seed, STREAM_NET_INIT)
    weights, biases = [], []
    for li, (fan_in, fan_out) in enumerate(spec.layer_dims()):
        bound = 1.0 / fan_in if li == 0 else np.sqrt(6.0 / fan_in)
        w = rng.uniform(-bound, bound, size=(fan_out, fan_in))
        weights.append(w.astype(dtype))
        biases.append(np.zeros(fan_out, dtype=dtype))
    return MLPParams(spec=spec, weights=weights, biases=biases)


# ---------------------------------------------------------------------------
# Forward / reverse passes

@dataclass
class ForwardState:
    x: np.ndarray
    pre_acts: list[np.ndarray]        # a_l per sine layer
    hidden: list[np.ndarray]          # h_l = sin(a_l)
    y_lin: np.ndarray
    y: np.ndarray
    jac_hidden: Optional[list[np.ndarray]] = None   # G_l, (N, w, in_dim)
    jac_lin: Optional[np.ndarray] = None            # (N, out, in_dim)


def _bmm_left(W: np.ndarray, G: np.ndarray) -> np.ndarray:
    """Per-sample W @ G[n] for G of shape (N, in, k) via one GEMM."""
    n, i, k = G.shape
    flat = G.transpose(1, 0, 2).reshape(i, n * k)
    out = W @ flat
    return out.reshape(W.shape[0], n, k).transpose(1, 0, 2)


def _sum_outer(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """sum_n A[n] @ B[n].T for (N, i, k) and (N, j, k) -> (i, j)."""
    n, i, k = A.shape
    j = B.shape[1]
    return (A.transpose(1, 0, 2).reshape(i, n * k)
            @ B.transpose(1, 0, 2).reshape(j, n * k).T)


def forward_full(params: MLPParams, x: np.ndarray, need_jacobian: bool = False) -> ForwardState:
    spec = params.spec
    dtype = params.dtype
    x = np.ascontiguousarray(np.atleast_2d(x), dtype=dtype)
    if not np.isfinite(x).all():
        raise ValueError("non-finite network input")
    omega = dtype.type(spec.omega0)

    pre_acts, hidden, jac = [], [], []
    a = omega * (x @ params.weights[0].T) + params.biases[0]
    pre_acts.append(a)
    h = np.sin(a)
    hidden.append(h)
    if need_jacobian:
        g = np.cos(a)[:, :, None] * (omega * params.weights[0])[None, :, :]
        jac.append(g)
    for li in range(1, spec.hidden_layers):
        a = h @ params.weights[li].T + params.biases[li]
        pre_acts.append(a)
        h = np.sin(a)
        hidden.append(h)
        if need_jacobian:
            m = _bmm_left(params.weights[li], jac[-1])
            jac.append(np.cos(a)[:, :, None] * m)
    y_lin = h @ params.weights[-1].T + params.biases[-1]
    y = 1.0 / (1.0 + np.exp(-y_lin)) if spec.output_activation == ACT_SIGMOID else y_lin
    j_lin = _bmm_left(params.weights[-1], jac[-1]) if need_jacobian else None
    return ForwardState(x=x, pre_acts=pre_acts, hidden=hidden, y_lin=y_lin, y=y,
                        jac_hidden=jac if need_jacobian else None, jac_lin=j_lin)


def forward(params: MLPParams, x: np.ndarray) -> np.ndarray:
    return forward_full(params, x).y


def input_gradient(params: MLPParams, x: np.ndarray) -> np.ndarray:
    """d y / d x, shape (N, output_dim, input_dim); exact, honors the output
    activation."""
    state = forward_full(params, x, need_jacobian=True)
    j = state.jac_lin
    if params.spec.output_activation == ACT_SIGMOID:
        s = state.y * (1.0 - state.y)
        j = s[:, :, None] * j
    return j


def vjp(params: MLPParams, state: ForwardState,
        y_cot: Optional[np.ndarray] = None,
        jac_cot: Optional[np.ndarray] = None) -> list[tuple[np.ndarray, np.ndarray]]:
    """Parameter gradients for cotangents of the output and (optionally) of
    the linear-output input-Jacobian. `jac_cot` requires a linear output and
    a Jacobian-bearing forward state."""
    spec = params.spec
    dtype = params.dtype
    omega = dtype.type(spec.omega0)
    n = len(state.x)
    n_layers = len(params.weights)
    grads_w = [None] * n_layers
    grads_b = [None] * n_layers

    if jac_cot is not None:
        if spec.output_activation != ACT_LINEAR:
            raise ValueError("Jacobian cotangents require a linear output")
        if state.jac_hidden is None:
            raise ValueError("forward state lacks Jacobian intermediates")

    if y_cot is None:
        z_cot = np.zeros_like(state.y_lin)
    elif spec.output_activation == ACT_SIGMOID:
        z_cot = np.asarray(y_cot, dtype=dtype) * (state.y * (1.0 - state.y))
    else:
        z_cot = np.asarray(y_cot, dtype=dtype)

    h_last = state.hidden[-1]
    grads_w[-1] = z_cot.T @ h_last
    grads_b[-1] = z_cot.sum(axis=0)
    h_bar = z_cot @ params.weights[-1]
    g_bar = None
    if jac_cot is not None:
        jac_cot = np.asarray(jac_cot, dtype=dtype)
        g_last = state.jac_hidden[-1]
        grads_w[-1] = grads_w[-1] + _sum_outer(jac_cot, g_last)
        g_bar = _bmm_left(params.weights[-1].T.copy(), jac_cot)

    for li in range(spec.hidden_layers - 1, 0, -1):
        a = state.pre_acts[li]
        cos_a = np.cos(a)
        h_prev = state.hidden[li - 1]
        a_bar = h_bar * cos_a
        if g_bar is not None:
            m = _bmm_left(params.weights[li], state.jac_hidden[li - 1])
            a_bar = a_bar + (-np.sin(a)) * (g_bar * m).sum(axis=2)
            m_bar = g_bar * cos_a[:, :, None]
            grads_w[li] = a_bar.T @ h_prev + _sum_outer(m_bar, state.jac_hidden[li - 1])
            g_bar = _bmm_left(params.weights[li].T.copy(), m_bar)
        else:
            grads_w[li] = a_bar.T @ h_prev
        grads_b[li] = a_bar.sum(axis=0)
        h_bar = a_bar @ params.weights[li]

    a1 = state.pre_acts[0]
    cos1 = np.cos(a1)
    a_bar = h_bar * cos1
    if g_bar is not None:
        w1s = omega * params.weights[0]
        a_bar = a_bar + (-np.sin(a1)) * np.einsum("nij,ij->ni", g_bar, w1s)
        grads_w[0] = omega * (a_bar.T @ state.x) + omega * np.einsum("nij,ni->ij", g_bar, cos1)
    else:
        grads_w[0] = omega * (a_bar.T @ state.x)
    grads_b[0] = a_bar.sum(axis=0)
    return [(gw.astype(dtype, copy=False), gb.astype(dtype, copy=False))
            for gw, gb in zip(grads_w, grads_b)]


def backward(params: MLPParams, x: np.ndarray,
             output_cotangents: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    """Exact reverse-mode parameter gradients for a batch."""
    oc = np.atleast_2d(np.asarray(output_cotangents, dtype=params.dtype))
    state = forward_full(params, x)
    if oc.shape != state.y.shape:
        raise ValueError(f"cotangent shape {oc.shape} != output shape {state.y.shape}")
    return vjp(params, state, y_cot=oc)


# ---------------------------------------------------------------------------
# Optimizer

@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0

    @classmethod
    def for_params(cls, params: MLPParams) -> "AdamState":
        zeros = lambda arrs: [np.zeros_like(a) for a in arrs]
        flat = params.weights + params.biases
        return cls(m=zeros(flat), v=zeros(flat))


def adam_step(state: AdamState, params: MLPParams,
              grads: list[tuple[np.ndarray, np.ndarray]], lr: float) -> None:
    """One ADAM update, in place."""
    state.step += 1
    t = state.step
    dtype = params.dtype
    b1 = dtype.type(ADAM_BETA1)
    b2 = dtype.type(ADAM_BETA2)
    corr1 = dtype.type(1.0 - ADAM_BETA1 ** t)
    corr2 = dtype.type(1.0 - ADAM_BETA2 ** t)
    lr = dtype.type(lr)
    eps = dtype.type(ADAM_EPS)
    flat_params = params.weights + params.biases
    flat_grads = [g for g, _ in grads] + [g for _, g in grads]
    for p, g, m, v in zip(flat_params, flat_grads, state.m, state.v):
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        p -= lr * (m / corr1) / (np.sqrt(v / corr2) + eps)


def cosine_lr(i: int, total_iters: int, lr0: float) -> float:
    """Cosine annealing from lr0 at i=0 to exactly 0 at i=total_iters."""
    frac = min(max(i, 0), total_iters) / total_iters
    return lr0 * 0.5 * (1.0 + np.cos(np.pi * frac))


# ---------------------------------------------------------------------------
# Weight-block serialization (little-endian float32, layer-major, row-major
# matrices, bias after each matrix)

def spec_to_bytes(spec: MLPSpec) -> bytes:
    return struct.pack("<IIIIfB", spec.input_dim, spec.output_dim,
                       spec.hidden_layers, spec.width, spec.omega0,
                       _ACT_CODE[spec.output_activation])


SPEC_BYTES = struct.calcsize("<IIIIfB")


def spec_from_bytes(data: bytes) -> MLPSpec:
    in_d, out_d, hidden, width, omega0, act = struct.unpack("<IIIIfB", data)
    return MLPSpec(width=width, output_dim=out_d, input_dim=in_d,
                   hidden_layers=hidden, omega0=float(omega0),
                   output_activation=_ACT_NAME[act])


def params_to_bytes(params: MLPParams) -> bytes:
    chunks = []
    for w, b in zip(params.weights, params.biases):
        chunks.append(np.ascontiguousarray(w, dtype="<f4").tobytes())
        chunks.append(np.ascontiguousarray(b, dtype="<f4").tobytes())
    return b"".join(chunks)


def params_from_bytes(spec: MLPSpec, data: bytes) -> MLPParams:
    expected = 4 * spec.param_count
    if len(data) != expected:
        raise ValueError(f"weight block holds {len(data)} bytes, expected {expected}")
    weights, biases = [], []
    off = 0
    for fan_in, fan_out in spec.layer_dims():
        n = fan_in * fan_out
        w = np.frombuffer(data, dtype="<f4", count=n, offset=off).reshape(fan_out, fan_in)
        off += 4 * n
        b = np.frombuffer(data, dtype="<f4", count=fan_out, offset=off)
        off += 4 * fan_out
        weights.append(w.astype(np.float32))
        biases.append(b.astype(np.float32))
    params = MLPParams(spec=spec, weights=weights, biases=biases)
    if not all(np.isfinite(w).all() for w in weights):
        raise ValueError("non-finite weight in block")
    return params
