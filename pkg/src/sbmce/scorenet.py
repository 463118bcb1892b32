"""Step-conditioned convolutional noise predictor with exact backprop and AdamW.

The network sees a complex channel as a real tensor with two channels
(re, im).  The step index ``k`` enters through a sinusoidal embedding and a
learned affine projection whose outputs are broadcast as extra input
channels.  With ``embed_mode="positional"`` the projection bias is a
separate vector per antenna-grid position, which gives the otherwise
shift-equivariant network a notion of absolute beam position.  With
``residual`` equal-width hidden layers add their input back.  The network predicts the noise realization ``eps``; the score is
``-eps_hat / sigma_k``.

Tensors are kept channel-last internally, ``(B, n_rx, n_tx, C)``; conv kernels
are stored as ``(out_ch, in_ch, kh, kw)``.
"""

from __future__ import annotations

import functools
import io
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import _binio
from .errors import DimensionError, FormatError, ParameterError
from .numerics import complex_to_real, real_to_complex
from .schedule import NoiseSchedule

MODEL_MAGIC = b"SBMNET"
MODEL_VERSION = 1

ACTIVATIONS = ("silu", "relu", "tanh")
PADDINGS = ("circular", "zero")
INFERENCE_CHUNK = 32
EMBED_MODES = ("broadcast", "positional")


@dataclass(frozen=True)
class ScoreNetConfig:
    n_rx: int
    n_tx: int
    K: int
    hidden: int = 32
    n_layers: int = 3
    kernel: tuple[int, int] = (3, 3)
    embed_dim: int = 32
    embed_channels: int = 4
    activation: str = "silu"
    padding: str = "circular"
    input_scaling: bool = True
    embed_mode: str = "positional"
    residual: bool = False

    def __post_init__(self):
        if self.embed_dim % 2:
            raise ParameterError(f"embed_dim must be even, got {self.embed_dim}")
        kernel = self.kernel
        if isinstance(kernel, int):
            kernel = (kernel, kernel)
        kernel = tuple(int(x) for x in kernel)
        if len(kernel) != 2 or any(x % 2 == 0 or x < 1 for x in kernel):
            raise ParameterError(f"kernel sizes must be odd, got {self.kernel}")
        object.__setattr__(self, "kernel", kernel)
        if self.n_layers < 1 or self.hidden < 1 or self.K < 1:
            raise ParameterError("n_layers, hidden and K must be >= 1")
        if self.activation not in ACTIVATIONS:
            raise ParameterError(f"unknown activation {self.activation!r}")
        if self.padding not in PADDINGS:
            raise ParameterError(f"unknown padding {self.padding!r}")
        if self.embed_mode not in EMBED_MODES:
            raise ParameterError(f"unknown embed_mode {self.embed_mode!r}")

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return (2, self.n_rx, self.n_tx)

    def layer_channels(self) -> list[tuple[int, int]]:
        chans = [2 + self.embed_channels] + [self.hidden] * (self.n_layers - 1) + [2]
        return list(zip(chans[:-1], chans[1:]))


def embed_step(k, K: int, dim: int) -> np.ndarray:
    """Sinusoidal embedding of step index ``k``.

    Components come in pairs ``(sin(k * w_i), cos(k * w_i))`` with
    ``w_i = 10000 ** (-2 i / dim)``.  ``k`` may be an int or an array of ints;
    the output has shape ``k.shape + (dim,)``.
    """
    if dim % 2:
        raise ParameterError(f"embedding dim must be even, got {dim}")
    k_arr = np.asarray(k)
    if np.any(k_arr < 1) or np.any(k_arr > K):
        raise ParameterError(f"step index out of range 1..{K}")
    freqs = 10000.0 ** (-2.0 * np.arange(dim // 2) / dim)
    arg = np.multiply.outer(k_arr.astype(float), freqs)
    out = np.empty(arg.shape[:-1] + (dim,))
    out[..., 0::2] = np.sin(arg)
    out[..., 1::2] = np.cos(arg)
    return out


def _act(name: str, z: np.ndarray) -> np.ndarray:
    if name == "silu":
        d = np.exp(-z)
        d += 1.0
        return np.divide(z, d, out=d)
    if name == "relu":
        return np.maximum(z, 0.0)
    return np.tanh(z)


def _act_grad(name: str, z: np.ndarray) -> np.ndarray:
    if name == "silu":
        s = 1.0 / (1.0 + np.exp(-z))
        return s * (1.0 + z * (1.0 - s))
    if name == "relu":
        return (z > 0).astype(z.dtype)
    return 1.0 - np.tanh(z) ** 2


@functools.lru_cache(maxsize=64)
def _patch_index(R: int, T: int, kh: int, kw: int, circular: bool) -> np.ndarray:
    """Flat source position for every (output position, kernel tap).

    Out-of-range taps under zero padding point at the extra zero row ``R*T``.
    """
    r = np.arange(R)[:, None, None, None] + np.arange(kh)[None, None, :, None] - kh // 2
    t = np.arange(T)[None, :, None, None] + np.arange(kw)[None, None, None, :] - kw // 2
    r, t = np.broadcast_arrays(r, t)
    if circular:
        idx = (r % R) * T + (t % T)
    else:
        inside = (r >= 0) & (r < R) & (t >= 0) & (t < T)
        idx = np.where(inside, r * T + t, R * T)
    idx = idx.reshape(R * T, kh * kw)
    idx.setflags(write=False)
    return idx


def _im2col(a: np.ndarray, kh: int, kw: int, circular: bool) -> np.ndarray:
    """Patch matrix ``(B*R*T, kh*kw*C)`` of a channel-last tensor.

    Column order is ``(dr, dt, c)`` so channel runs stay contiguous; kernels
    are matched with :func:`_kernel_matrix`.
    """
    B, R, T, C = a.shape
    flat = a.reshape(B, R * T, C)
    if not circular:
        flat = np.concatenate([flat, np.zeros((B, 1, C))], axis=1)
    idx = _patch_index(R, T, kh, kw, circular)
    return np.take(flat, idx, axis=1).reshape(B * R * T, kh * kw * C)


def _kernel_matrix(W: np.ndarray) -> np.ndarray:
    return W.transpose(0, 2, 3, 1).reshape(W.shape[0], -1)


def _conv(a: np.ndarray, W: np.ndarray, circular: bool) -> tuple[np.ndarray, np.ndarray]:
    """Same-size cross-correlation; returns (output, patch matrix)."""
    B, R, T, _ = a.shape
    P = _im2col(a, W.shape[2], W.shape[3], circular)
    z = P @ _kernel_matrix(W).T
    return z.reshape(B, R, T, W.shape[0]), P


def _conv_input_grad(dz: np.ndarray, W: np.ndarray, circular: bool) -> np.ndarray:
    """Adjoint of :func:`_conv` w.r.t. its input: correlate with the flipped kernel."""
    Wt = np.ascontiguousarray(W[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    return _conv(dz, Wt, circular)[0]


class ScoreModel:
    """Parameters plus forward/backward of the noise-prediction CNN.

    One parameter set serves every step ``k``; the embedding is the only
    place ``k`` enters.
    """

    def __init__(self, cfg: ScoreNetConfig, params: dict[str, np.ndarray]):
        self.cfg = cfg
        expected = param_shapes(cfg)
        if list(params) != list(expected):
            raise DimensionError(f"parameter names {list(params)} != {list(expected)}")
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise DimensionError(f"{name}: shape {params[name].shape} != {shape}")
        self.params = {k: np.asarray(v, dtype=float) for k, v in params.items()}

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return self.cfg.input_shape

    def copy(self) -> ScoreModel:
        return ScoreModel(self.cfg, {k: v.copy() for k, v in self.params.items()})

    def n_params(self) -> int:
        return sum(v.size for v in self.params.values())

    # -- core network ------------------------------------------------------

    def _skips(self, i: int) -> bool:
        """Whether hidden layer ``i`` adds its input back (width-preserving layers only)."""
        return self.cfg.residual and 0 < i < self.cfg.n_layers - 1

    def _forward(self, x: np.ndarray, k: np.ndarray, sigma: np.ndarray, keep: bool):
        """``x``: (B, 2, n_rx, n_tx) real. Returns eps_hat in the same layout."""
        cfg = self.cfg
        if x.ndim != 4 or x.shape[1:] != cfg.input_shape:
            raise DimensionError(f"expected input (B, {cfg.input_shape}), got {x.shape}")
        B = x.shape[0]
        circ = cfg.padding == "circular"
        if cfg.input_scaling:
            x = x / np.sqrt(1.0 + sigma**2)[:, None, None, None]
        emb = embed_step(k, cfg.K, cfg.embed_dim)
        proj = (emb @ self.params["embed.W"].T)[:, None, None, :] + self.params["embed.b"]
        a = np.concatenate(
            [
                np.moveaxis(x, 1, -1),
                np.broadcast_to(proj, (B, cfg.n_rx, cfg.n_tx, cfg.embed_channels)),
            ],
            axis=-1,
        )
        cache = {"emb": emb, "patches": [], "pre": []}
        n_layers = cfg.n_layers
        for i in range(n_layers):
            z, P = _conv(a, self.params[f"conv{i}.W"], circ)
            z += self.params[f"conv{i}.b"]
            if keep:
                cache["patches"].append(P)
                cache["pre"].append(z)
            if i == n_layers - 1:
                a = z
            elif self._skips(i):
                # a is never cached, so it may be updated in place
                a += _act(cfg.activation, z)
            else:
                a = _act(cfg.activation, z)
        eps = np.moveaxis(a, -1, 1)
        return eps, cache

    def _backward(self, cache: dict, d_eps: np.ndarray) -> dict[str, np.ndarray]:
        cfg = self.cfg
        circ = cfg.padding == "circular"
        grads: dict[str, np.ndarray] = {}
        da = np.moveaxis(d_eps, 1, -1)
        for i in reversed(range(cfg.n_layers)):
            W = self.params[f"conv{i}.W"]
            dz = da if i == cfg.n_layers - 1 else da * _act_grad(cfg.activation, cache["pre"][i])
            dz_flat = dz.reshape(-1, W.shape[0])
            dW = (dz_flat.T @ cache["patches"][i]).reshape(W.shape[0], *W.shape[2:], W.shape[1])
            grads[f"conv{i}.W"] = dW.transpose(0, 3, 1, 2)
            grads[f"conv{i}.b"] = dz_flat.sum(axis=0)
            # the first layer only needs the gradient of the embedding channels
            d_in = _conv_input_grad(dz, W if i else W[:, 2:], circ)
            da = da + d_in if self._skips(i) else d_in
        d_proj = da.sum(axis=(1, 2))
        grads["embed.W"] = d_proj.T @ cache["emb"]
        if cfg.embed_mode == "positional":
            grads["embed.b"] = da.sum(axis=0)
        else:
            grads["embed.b"] = d_proj.sum(axis=0)
        return {name: grads[name] for name in self.params}

    # -- public helpers ----------------------------------------------------

    def predict_noise(self, x: np.ndarray, k, sigma) -> np.ndarray:
        """Real-view noise prediction for a batch ``(B, 2, n_rx, n_tx)``."""
        x = np.asarray(x, dtype=float)
        B = x.shape[0]
        k = np.broadcast_to(np.asarray(k, dtype=int), (B,))
        sigma = np.broadcast_to(np.asarray(sigma, dtype=float), (B,))
        if B <= INFERENCE_CHUNK:
            return self._forward(x, k, sigma, keep=False)[0]
        # small chunks keep the patch matrices cache-resident
        out = np.empty_like(x)
        for i in range(0, B, INFERENCE_CHUNK):
            j = i + INFERENCE_CHUNK
            out[i:j] = self._forward(x[i:j], k[i:j], sigma[i:j], keep=False)[0]
        return out

    def score(self, h: np.ndarray, k: int, sigma: float) -> np.ndarray:
        """Score estimate for beamspace vectors ``h`` (``(n,)`` or ``(B, n)``)."""
        return forward(self, h, k, sigma)


def param_shapes(cfg: ScoreNetConfig) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {
        "embed.W": (cfg.embed_channels, cfg.embed_dim),
        "embed.b": (
            (cfg.n_rx, cfg.n_tx, cfg.embed_channels)
            if cfg.embed_mode == "positional"
            else (cfg.embed_channels,)
        ),
    }
    for i, (cin, cout) in enumerate(cfg.layer_channels()):
        shapes[f"conv{i}.W"] = (cout, cin, *cfg.kernel)
        shapes[f"conv{i}.b"] = (cout,)
    return shapes


def init_model(cfg: ScoreNetConfig, rng: np.random.Generator) -> ScoreModel:
    """Uniform fan-in initialization for weights, zero biases."""
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".b"):
            params[name] = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:]))
            bound = 1.0 / np.sqrt(fan_in)
            params[name] = rng.uniform(-bound, bound, size=shape)
    return ScoreModel(cfg, params)


def forward(model: ScoreModel, h_k: np.ndarray, k, sigma_k) -> np.ndarray:
    """Score ``-eps_hat / sigma_k`` for complex column-major vectors.

    ``h_k`` is ``(n_rx * n_tx,)`` or ``(B, n_rx * n_tx)``; ``k`` and
    ``sigma_k`` are scalars or per-sample arrays.
    """
    h_k = np.asarray(h_k, dtype=complex)
    single = h_k.ndim == 1
    hb = h_k[None] if single else h_k
    sigma = np.broadcast_to(np.asarray(sigma_k, dtype=float), (hb.shape[0],))
    if np.any(sigma <= 0):
        raise ParameterError("sigma_k must be > 0")
    cfg = model.cfg
    if hb.shape[-1] != cfg.n_rx * cfg.n_tx:
        raise DimensionError(
            f"input length {hb.shape[-1]} != model input {cfg.n_rx}x{cfg.n_tx}"
        )
    eps = model.predict_noise(complex_to_real(hb, cfg.n_rx, cfg.n_tx), k, sigma)
    s = -real_to_complex(eps) / sigma[:, None]
    return s[0] if single else s


def noise_loss_and_grad(
    model: ScoreModel, x: np.ndarray, k: np.ndarray, sigma: np.ndarray, eps: np.ndarray
) -> tuple[float, dict[str, np.ndarray]]:
    """Mean squared error between predicted and true noise (real view)."""
    pred, cache = model._forward(x, k, sigma, keep=True)
    diff = pred - eps
    loss = float(np.mean(diff**2))
    grads = model._backward(cache, 2.0 * diff / diff.size)
    return loss, grads


def noise_loss(model, x, k, sigma, eps) -> float:
    pred, _ = model._forward(x, k, sigma, keep=False)
    return float(np.mean((pred - eps) ** 2))


def score_to_real_targets(h_k, k, sigma_k, target_score, model):
    """Convert a complex score batch to real-view network inputs and noise targets."""
    cfg = model.cfg
    h_k = np.atleast_2d(np.asarray(h_k, dtype=complex))
    B = h_k.shape[0]
    k = np.broadcast_to(np.asarray(k, dtype=int), (B,))
    sigma = np.broadcast_to(np.asarray(sigma_k, dtype=float), (B,))
    eps = -sigma[:, None] * np.atleast_2d(np.asarray(target_score, dtype=complex))
    x = complex_to_real(h_k, cfg.n_rx, cfg.n_tx)
    return x, k, sigma, complex_to_real(eps, cfg.n_rx, cfg.n_tx)


def loss_and_grad(model: ScoreModel, h_k, k, sigma_k, target_score):
    """Denoising score-matching loss on a batch and its exact gradient.

    The loss is the mean over batch and real components of
    ``sigma_k**2 * (s_hat - s)**2``, which with ``s_hat = -eps_hat / sigma_k``
    and ``s = -eps / sigma_k`` is the noise-prediction MSE.

    Returns:
        ``(loss, grads)`` with ``grads`` keyed like ``model.params``.
    """
    x, k, sigma, eps = score_to_real_targets(h_k, k, sigma_k, target_score, model)
    if x.shape[0] == 0:
        raise ParameterError("empty batch")
    return noise_loss_and_grad(model, x, k, sigma, eps)


@dataclass
class OptimizerState:
    """AdamW moment accumulators and hyper-parameters."""

    lr: float = 1e-3
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_model(cls, model: ScoreModel, **kw) -> OptimizerState:
        st = cls(**kw)
        st.m = {k: np.zeros_like(p) for k, p in model.params.items()}
        st.v = {k: np.zeros_like(p) for k, p in model.params.items()}
        return st


def optimizer_step(model: ScoreModel, grads: dict[str, np.ndarray], state: OptimizerState):
    """One AdamW update, in place.

    The decay ``p <- p * (1 - lr * weight_decay)`` is applied to the parameter
    directly, not folded into the gradient.
    """
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    for name, p in model.params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise DimensionError(f"gradient for {name} has shape {g.shape}, expected {p.shape}")
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        p *= 1.0 - state.lr * state.weight_decay
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return model, state


def save_model(model: ScoreModel, sched: NoiseSchedule, path: str | Path) -> None:
    """Write a versioned checkpoint: architecture JSON, schedule block, raw parameters."""
    buf = io.BytesIO()
    _binio.write_header(buf, MODEL_MAGIC, MODEL_VERSION)
    arch = json.dumps(asdict(model.cfg), sort_keys=True).encode()
    buf.write(struct.pack("<I", len(arch)))
    buf.write(arch)
    buf.write(struct.pack("<I", sched.K))
    _binio.write_f8(
        buf,
        np.array(
            [sched.gamma, sched.sigma_min, sched.sigma_max, sched.snr_max_db, sched.snr_min_db]
        ),
    )
    _binio.write_f8(buf, sched.sigmas)
    for p in model.params.values():
        _binio.write_f8(buf, p)
    Path(path).write_bytes(buf.getvalue())


def load_model(path: str | Path) -> tuple[ScoreModel, NoiseSchedule]:
    with open(path, "rb") as f:
        _binio.check_magic(f, MODEL_MAGIC, MODEL_VERSION)
        (n,) = _binio.read_struct(f, "<I", "architecture length")
        try:
            cfg = ScoreNetConfig(**json.loads(_binio.read_exact(f, n, "architecture")))
        except (ValueError, TypeError) as exc:
            raise FormatError(f"corrupt architecture descriptor: {exc}") from exc
        (K,) = _binio.read_struct(f, "<I", "schedule length")
        gamma, smin, smax, snr_hi, snr_lo = _binio.read_f8(f, (5,), "schedule metadata")
        sigmas = _binio.read_f8(f, (K,), "schedule")
        params = {
            name: _binio.read_f8(f, shape, name) for name, shape in param_shapes(cfg).items()
        }
        _binio.expect_eof(f)
    if K != cfg.K:
        raise FormatError(f"schedule has {K} steps but the network expects {cfg.K}")
    sched = NoiseSchedule(sigmas, gamma, smin, smax, snr_hi, snr_lo)
    return ScoreModel(cfg, params), sched
