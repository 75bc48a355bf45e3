"""
Small dense-math toolkit: feedforward networks with hand-written backward
passes, softmax, Adam/SGD and the DAGCOMM1 parameter file format.

Every network in dagcomm is an MLP with tanh hidden layers. Inputs may be a
single vector of shape (in,) or a batch of shape (B, in); gradients of a batch
are summed over the batch axis.
"""

import struct
from dataclasses import dataclass, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from dagcomm.errors import CheckpointError, ContractError, DimensionError, NumericError

OUTPUT_ACTIVATIONS = ("identity", "tanh", "softmax")

MAGIC = b"DAGCOMM1"
FORMAT_VERSION = 1


@dataclass
class MlpParams:
    """Weights (in, out) and biases (out,) of every layer plus the output activation."""

    weights: List[np.ndarray]
    biases: List[np.ndarray]
    output: str = "identity"

    def __post_init__(self):
        if self.output not in OUTPUT_ACTIVATIONS:
            raise ContractError(f"unknown output activation '{self.output}'")
        if len(self.weights) != len(self.biases) or not self.weights:
            raise DimensionError("weights and biases must be non-empty and paired")
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise DimensionError(f"layer {k}: weight {w.shape} and bias {b.shape} do not match")
            if k > 0 and self.weights[k - 1].shape[1] != w.shape[0]:
                raise DimensionError(f"layer {k}: input width {w.shape[0]} != previous output "
                                     f"{self.weights[k - 1].shape[1]}")

    @property
    def sizes(self) -> Tuple[int, ...]:
        return (self.weights[0].shape[0],) + tuple(w.shape[1] for w in self.weights)

    @property
    def n_in(self) -> int:
        return self.weights[0].shape[0]

    @property
    def n_out(self) -> int:
        return self.weights[-1].shape[1]

    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def arrays(self) -> List[np.ndarray]:
        """Flat parameter list W0, b0, W1, b1, ..."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend([w, b])
        return out

    def with_arrays(self, arrays: Sequence[np.ndarray]) -> "MlpParams":
        return MlpParams(list(arrays[0::2]), list(arrays[1::2]), self.output)

    def layer_of(self, k: int) -> int:
        return k // 2

    def zeros_like(self) -> "MlpParams":
        return self.with_arrays([np.zeros_like(a) for a in self.arrays()])

    def copy(self) -> "MlpParams":
        return self.with_arrays([a.copy() for a in self.arrays()])


@dataclass
class MlpCache:
    """Layer inputs and outputs recorded by mlp_forward for the backward pass."""

    sizes: Tuple[int, ...]
    output: str
    inputs: List[np.ndarray]
    outputs: List[np.ndarray]
    batched: bool


@dataclass
class OptimState:
    """First/second moments per parameter array and the step counter."""

    m: List[np.ndarray]
    v: List[np.ndarray]
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    mode: str = "adam"


def init_mlp(sizes: Sequence[int], rng: np.random.Generator, output: str = "identity") -> MlpParams:
    """
    Build an MLP with uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights and biases.

    Args:
        sizes: layer widths, input first (e.g. [obs_dim, 32, n_actions])
        rng: the run's seeded generator
        output: activation of the last layer ('identity', 'tanh' or 'softmax')
    """
    if len(sizes) < 2 or any(s <= 0 for s in sizes):
        raise DimensionError(f"invalid layer sizes {list(sizes)}")
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(rng.uniform(-bound, bound, size=fan_out))
    return MlpParams(weights, biases, output)


def softmax(v: np.ndarray) -> np.ndarray:
    """Numerically stable softmax over the last axis."""
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0 or v.shape[-1] == 0:
        raise ContractError("softmax of an empty vector")
    shifted = v - v.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _activate(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "tanh":
        return np.tanh(z)
    if kind == "softmax":
        return softmax(z)
    return z


def mlp_forward(params: MlpParams, x: np.ndarray) -> Tuple[np.ndarray, MlpCache]:
    """
    Run the network on one input vector or a batch of rows.

    Returns:
        (output, cache) where cache feeds mlp_backward
    """
    x = np.asarray(x, dtype=np.float64)
    batched = x.ndim == 2
    if x.ndim not in (1, 2) or x.shape[-1] != params.n_in:
        raise DimensionError(f"input shape {x.shape} does not match network input width {params.n_in}")
    inputs, outputs = [], []
    h = x
    last = len(params.weights) - 1
    for k, (w, b) in enumerate(zip(params.weights, params.biases)):
        inputs.append(h)
        h = _activate(h @ w + b, "tanh" if k < last else params.output)
        outputs.append(h)
    if not np.all(np.isfinite(h)):
        raise NumericError("non-finite network output", layer=last)
    return h, MlpCache(params.sizes, params.output, inputs, outputs, batched)


def mlp_backward(params: MlpParams, cache: MlpCache, upstream: np.ndarray) -> Tuple[MlpParams, np.ndarray]:
    """
    Backpropagate d(loss)/d(output) through the network.

    Args:
        params: the parameters used for the forward call
        cache: cache returned by that forward call
        upstream: gradient w.r.t. the network output, same shape as the output

    Returns:
        (grads, input_grad): grads mirror params, input_grad mirrors the input
    """
    if cache.sizes != params.sizes or cache.output != params.output:
        raise ContractError(f"cache for network {cache.sizes} used with network {params.sizes}")
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != cache.outputs[-1].shape:
        raise ContractError(f"upstream shape {upstream.shape} does not match output "
                            f"{cache.outputs[-1].shape}")
    last = len(params.weights) - 1
    grad_w: List[np.ndarray] = [None] * (last + 1)
    grad_b: List[np.ndarray] = [None] * (last + 1)
    g = upstream
    for k in range(last, -1, -1):
        y = cache.outputs[k]
        kind = "tanh" if k < last else params.output
        if kind == "tanh":
            g = g * (1.0 - y * y)
        elif kind == "softmax":
            g = y * (g - np.sum(g * y, axis=-1, keepdims=True))
        x = cache.inputs[k]
        if cache.batched:
            grad_w[k] = x.T @ g
            grad_b[k] = g.sum(axis=0)
        else:
            grad_w[k] = np.outer(x, g)
            grad_b[k] = g.copy()
        g = g @ params.weights[k].T
    return MlpParams(grad_w, grad_b, params.output), g


def init_optim(params, lr: float = 1e-3, mode: str = "adam", beta1: float = 0.9,
               beta2: float = 0.999, eps: float = 1e-8) -> OptimState:
    """Fresh optimizer state for anything exposing arrays() (MlpParams, TopoLearnerParams)."""
    if lr <= 0:
        raise ContractError(f"learning rate must be positive, got {lr}")
    if mode not in ("adam", "sgd"):
        raise ContractError(f"unknown optimizer mode '{mode}'")
    arrays = params.arrays()
    return OptimState(m=[np.zeros_like(a) for a in arrays], v=[np.zeros_like(a) for a in arrays],
                      step=0, lr=lr, beta1=beta1, beta2=beta2, eps=eps, mode=mode)


def optim_step(params, grads, state: OptimState):
    """
    One descent step. Inputs are left untouched; new params and state are returned.

    Returns:
        (new_params, new_state)
    """
    p_arrays, g_arrays = params.arrays(), grads.arrays()
    if len(p_arrays) != len(g_arrays) or len(p_arrays) != len(state.m):
        raise DimensionError("params, grads and optimizer state do not mirror each other")
    for k, (p, g) in enumerate(zip(p_arrays, g_arrays)):
        if p.shape != g.shape:
            raise DimensionError(f"parameter {k}: grad shape {g.shape} != param shape {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in layer {params.layer_of(k)}", layer=params.layer_of(k))

    t = state.step + 1
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(p_arrays, g_arrays, state.m, state.v):
        if state.mode == "sgd":
            new_p.append(p - state.lr * g)
            new_m.append(m)
            new_v.append(v)
            continue
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        m_hat = m / (1.0 - state.beta1 ** t)
        v_hat = v / (1.0 - state.beta2 ** t)
        new_p.append(p - state.lr * m_hat / (np.sqrt(v_hat) + state.eps))
        new_m.append(m)
        new_v.append(v)
    return params.with_arrays(new_p), replace(state, m=new_m, v=new_v, step=t)


def grad_check(params: MlpParams, x: np.ndarray, eps: float = 1e-5,
               upstream: Optional[np.ndarray] = None,
               backward: Callable = mlp_backward) -> float:
    """
    Compare analytic gradients with central finite differences.

    The scalar checked is sum(upstream * output); upstream defaults to a fixed
    random direction so softmax outputs are not trivially constant.

    Returns:
        max over parameters of |analytic - numeric| / max(|analytic|, |numeric|, 1e-8)
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ContractError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    out, cache = mlp_forward(params, x)
    if upstream is None:
        upstream = np.random.default_rng(0).normal(size=out.shape)
    grads, _ = backward(params, cache, upstream)

    worst = 0.0
    base = params.arrays()
    for k, analytic in enumerate(grads.arrays()):
        for idx in np.ndindex(base[k].shape):
            shifted = [a.copy() for a in base]
            shifted[k][idx] += eps
            plus = float(np.sum(upstream * mlp_forward(params.with_arrays(shifted), x)[0]))
            shifted[k][idx] -= 2 * eps
            minus = float(np.sum(upstream * mlp_forward(params.with_arrays(shifted), x)[0]))
            numeric = (plus - minus) / (2 * eps)
            a = float(analytic[idx])
            worst = max(worst, abs(a - numeric) / max(abs(a), abs(numeric), 1e-8))
    return worst


def params_to_named(prefix: str, params: MlpParams) -> Dict[str, np.ndarray]:
    named = {}
    for k, (w, b) in enumerate(zip(params.weights, params.biases)):
        named[f"{prefix}/{k}/W"] = w
        named[f"{prefix}/{k}/b"] = b.reshape(1, -1)
    return named


def params_from_named(prefix: str, named: Dict[str, np.ndarray], output: str) -> MlpParams:
    weights, biases = [], []
    k = 0
    while f"{prefix}/{k}/W" in named:
        weights.append(named[f"{prefix}/{k}/W"])
        biases.append(named[f"{prefix}/{k}/b"].reshape(-1))
        k += 1
    if not weights:
        raise CheckpointError(f"checkpoint has no layers for '{prefix}'")
    try:
        return MlpParams(weights, biases, output)
    except ContractError as e:
        raise CheckpointError(f"layers of '{prefix}' do not compose: {e}") from e


def save_params(path, named: Dict[str, np.ndarray]) -> None:
    """
    Write named 2-D arrays as a DAGCOMM1 record: magic, version, record count, then
    per record a name, a (rows, cols) header and row-major little-endian float64 data.
    """
    chunks = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(named))]
    for name, array in named.items():
        array = np.atleast_2d(np.asarray(array, dtype=np.float64))
        if array.ndim != 2:
            raise DimensionError(f"'{name}' must be 2-D, got shape {array.shape}")
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<II", *array.shape))
        chunks.append(np.ascontiguousarray(array).astype("<f8").tobytes())
    with open(path, "wb") as f:
        f.write(b"".join(chunks))


def load_params(path) -> Dict[str, np.ndarray]:
    """Read a DAGCOMM1 file back into a name -> 2-D array mapping."""
    try:
        with open(path, "rb") as f:
            blob = f.read()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e

    if blob[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path} is not a DAGCOMM1 checkpoint")
    try:
        offset = len(MAGIC)
        version, count = struct.unpack_from("<II", blob, offset)
        offset += 8
        if version != FORMAT_VERSION:
            raise CheckpointError(f"{path}: unsupported format version {version}")
        named = {}
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", blob, offset)
            offset += 2
            name = blob[offset:offset + name_len].decode("utf-8")
            offset += name_len
            rows, cols = struct.unpack_from("<II", blob, offset)
            offset += 8
            nbytes = rows * cols * 8
            if offset + nbytes > len(blob):
                raise CheckpointError(f"{path}: record '{name}' is truncated")
            named[name] = np.frombuffer(blob, dtype="<f8", count=rows * cols,
                                        offset=offset).reshape(rows, cols).astype(np.float64)
            offset += nbytes
    except (struct.error, UnicodeDecodeError) as e:
        raise CheckpointError(f"{path}: corrupt checkpoint ({e})") from e
    if offset != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - offset} trailing bytes")
    for name, array in named.items():
        if not np.all(np.isfinite(array)):
            raise CheckpointError(f"{path}: record '{name}' holds non-finite values")
    return named
