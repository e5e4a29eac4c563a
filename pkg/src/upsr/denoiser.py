"""Denoisers for the reverse chain.

``OracleDenoiser`` knows the ground truth and is used to test the sampler on
its own. ``TinyNet`` is a small fully convolutional network with hand-written
backpropagation: inputs are concatenated on channels, pixel-unshuffled,
pushed through a stack of 3x3 convolutions (a per-step bias is added after
the first one) and shuffled back. It predicts a residual on top of a base
image: ``x_t`` blended with ``g(y0)`` by a learned per-step gate for the
denoiser, ``y0`` for the predictor.
"""

from __future__ import annotations

import csv
import logging
import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from upsr.core import check_same_shape, pixel_shuffle, pixel_unshuffle
from upsr.diffusion import WeightingConfig, prepare_conditioning
from upsr.schedule import NoiseSchedule

log = logging.getLogger(__name__)


class OracleDenoiser:
    """Returns the true ``x0``, optionally with fresh Gaussian error on every call."""

    def __init__(self, x0, error_std: float = 0.0, rng: np.random.Generator | None = None):
        if error_std < 0:
            raise ValueError(f"error_std must be >= 0, got {error_std}")
        if error_std > 0 and rng is None:
            raise ValueError("a noisy oracle needs an rng")
        self.x0 = np.asarray(x0)
        self.error_std = float(error_std)
        self.rng = rng

    def denoise(self, x_t, y0, g_y0, t):
        if np.shape(x_t) != self.x0.shape:
            raise ValueError(f"shape mismatch: x_t {np.shape(x_t)} vs x0 {self.x0.shape}")
        if self.error_std == 0:
            return self.x0.copy()
        noise = self.rng.standard_normal(self.x0.shape)
        return (self.x0 + self.error_std * noise).astype(self.x0.dtype)


def oracle_denoiser(x0, error_std: float = 0.0, rng=None) -> OracleDenoiser:
    return OracleDenoiser(x0, error_std, rng)


# -- layers -------------------------------------------------------------------
# All tensors are NHWC. Each forward returns (output, cache); each backward
# takes (cache, upstream grad) and returns input grad (+ parameter grads).


def conv3x3_forward(x, weight, bias):
    """'Same' 3x3 convolution with zero padding. ``weight`` is ``(3, 3, Cin, Cout)``."""
    n, h, w, cin = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(1, 2))
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * h * w, 9 * cin)
    out = cols @ weight.reshape(9 * cin, -1) + bias
    return out.reshape(n, h, w, -1), (cols, x.shape)


def conv3x3_backward(cache, dout, weight):
    cols, (n, h, w, cin) = cache
    cout = dout.shape[-1]
    d2 = dout.reshape(-1, cout)
    dweight = (cols.T @ d2).reshape(weight.shape)
    dbias = d2.sum(axis=0)
    dcols = (d2 @ weight.reshape(9 * cin, cout).T).reshape(n, h, w, 3, 3, cin)
    dxp = np.zeros((n, h + 2, w + 2, cin), dtype=dout.dtype)
    for i in range(3):
        for j in range(3):
            dxp[:, i:i + h, j:j + w, :] += dcols[:, :, :, i, j, :]
    return dxp[:, 1:-1, 1:-1, :], dweight, dbias


def leaky_relu_forward(x, leak):
    return np.where(x > 0, x, leak * x), x


def leaky_relu_backward(cache, dout, leak):
    return np.where(cache > 0, dout, leak * dout)


# -- network ------------------------------------------------------------------

ROLES = ("denoiser", "predictor")
ACT_NONE, ACT_LEAKY = 0, 1


@dataclass
class LayerSpec:
    cin: int
    cout: int
    kernel: int = 3
    activation: int = ACT_LEAKY


class TinyNet:
    """Small residual conv net.

    As a denoiser it takes ``(x_t, y0, g(y0))`` and returns
    ``gate_t * x_t + (1 - gate_t) * g(y0) + delta`` with a learned per-step
    gate. A freshly constructed (all-zero) net has gate 1 and returns ``x_t``;
    ``init`` starts the gates at 0. After training, the noisy steps lean on
    ``g(y0)`` and the final one mostly on ``x_1``. As a predictor it takes ``(y0,)`` and returns
    ``y0 + delta``.
    """

    def __init__(self, channels: int = 3, role: str = "denoiser", T: int = 5, hidden: int = 32,
                 n_layers: int = 4, r: int = 2, leak: float = 0.2, dtype=np.float32,
                 layers: list[LayerSpec] | None = None):
        if role not in ROLES:
            raise ValueError(f"role must be one of {ROLES}, got {role!r}")
        if n_layers < 2 and layers is None:
            raise ValueError("need at least two conv layers")
        self.channels = int(channels)
        self.role = role
        self.T = int(T) if role == "denoiser" else 1
        self.n_inputs = 3 if role == "denoiser" else 1
        self.r = int(r)
        self.leak = float(leak)
        self.dtype = np.dtype(dtype)
        if layers is None:
            cin = self.n_inputs * self.channels * self.r ** 2
            cout = self.channels * self.r ** 2
            widths = [cin] + [hidden] * (n_layers - 1) + [cout]
            layers = [LayerSpec(widths[i], widths[i + 1], 3,
                                ACT_LEAKY if i < n_layers - 1 else ACT_NONE)
                      for i in range(n_layers)]
        self.layers = layers
        self._check_layers()
        self.params: dict[str, np.ndarray] = {}
        for i, spec in enumerate(self.layers):
            self.params[f"conv{i}.weight"] = np.zeros((3, 3, spec.cin, spec.cout), self.dtype)
            self.params[f"conv{i}.bias"] = np.zeros(spec.cout, self.dtype)
        self.params["time_bias"] = np.zeros((self.T, self.layers[0].cout), self.dtype)
        if self.role == "denoiser":
            # per-step skip: base = gate * x_t + (1 - gate) * g(y0); 1 here, init() resets it
            self.params["skip_gate"] = np.ones(self.T, self.dtype)

    def _check_layers(self):
        expect_in = self.n_inputs * self.channels * self.r ** 2
        if self.layers[0].cin != expect_in:
            raise ValueError(f"first layer takes {self.layers[0].cin} channels, expected {expect_in}")
        if self.layers[-1].cout != self.channels * self.r ** 2:
            raise ValueError("last layer width does not match channels * r**2")
        for a, b in zip(self.layers, self.layers[1:]):
            if a.cout != b.cin:
                raise ValueError(f"layer widths do not chain: {a.cout} -> {b.cin}")
        if any(spec.kernel != 3 for spec in self.layers):
            raise ValueError("only 3x3 kernels are supported")

    def init(self, rng: np.random.Generator, last_scale: float = 0.1,
             gate: float = 0.0) -> "TinyNet":
        """He-normal weights, zero biases; the output layer is scaled down by ``last_scale``.

        A denoiser's skip gates are set to ``gate``: 0 starts every step from
        ``g(y0)`` and lets training learn how far to trust ``x_t``.
        """
        for i, spec in enumerate(self.layers):
            std = math.sqrt(2.0 / (9 * spec.cin))
            if i == len(self.layers) - 1:
                std *= last_scale
            self.params[f"conv{i}.weight"][...] = rng.normal(0.0, std, (3, 3, spec.cin, spec.cout))
        if "skip_gate" in self.params:
            self.params["skip_gate"][...] = gate
        return self

    # parameters as one flat vector, in a fixed order
    def param_names(self) -> list[str]:
        return list(self.params)

    def get_flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params.values()])

    def set_flat(self, flat) -> None:
        flat = np.asarray(flat)
        if flat.size != self.num_params:
            raise ValueError(f"expected {self.num_params} parameters, got {flat.size}")
        i = 0
        for name, p in self.params.items():
            self.params[name] = flat[i:i + p.size].reshape(p.shape).astype(self.dtype)
            i += p.size

    @property
    def num_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def astype(self, dtype) -> "TinyNet":
        other = TinyNet(self.channels, self.role, self.T, r=self.r, leak=self.leak, dtype=dtype,
                        layers=[LayerSpec(**vars(l)) for l in self.layers])
        other.params = {k: v.astype(dtype) for k, v in self.params.items()}
        return other

    # forward / backward
    def _prepare(self, inputs, t):
        inputs = [np.asarray(x) for x in inputs]
        if len(inputs) != self.n_inputs:
            raise ValueError(f"{self.role} takes {self.n_inputs} inputs, got {len(inputs)}")
        check_same_shape(*inputs)
        single = inputs[0].ndim == 3
        if single:
            inputs = [x[None] for x in inputs]
        if inputs[0].shape[-1] != self.channels:
            raise ValueError(f"model expects {self.channels} channels, got {inputs[0].shape[-1]}")
        h, w = inputs[0].shape[1:3]
        if h % self.r or w % self.r:
            raise ValueError(f"image {h}x{w} not divisible by unshuffle factor {self.r}")
        t = np.broadcast_to(np.asarray(t, dtype=int), (inputs[0].shape[0],))
        if np.any(t < 1) or np.any(t > self.T):
            raise ValueError(f"step outside 1..{self.T}")
        return inputs, t, single

    def forward_train(self, inputs, t):
        """Batched forward that keeps what backward needs."""
        inputs, t, single = self._prepare(inputs, t)
        x = np.concatenate(inputs, axis=-1).astype(self.dtype)
        h = pixel_unshuffle(x, self.r)
        caches = []
        for i, spec in enumerate(self.layers):
            h, conv_cache = conv3x3_forward(h, self.params[f"conv{i}.weight"],
                                            self.params[f"conv{i}.bias"])
            if i == 0:
                h = h + self.params["time_bias"][t - 1][:, None, None, :]
            act_cache = None
            if spec.activation == ACT_LEAKY:
                h, act_cache = leaky_relu_forward(h, self.leak)
            caches.append((conv_cache, act_cache))
        delta = pixel_shuffle(h, self.r)
        base = inputs[0].astype(self.dtype)
        skip = None
        if self.role == "denoiser":
            skip = base - inputs[2].astype(self.dtype)
            gate = self.params["skip_gate"][t - 1][:, None, None, None]
            base = base + (gate - 1) * skip
        return base + delta, (caches, t, single, skip)

    def forward(self, inputs, t):
        out, (_, _, single, _) = self.forward_train(inputs, t)
        return out[0] if single else out

    def backward(self, cache, dout):
        """Parameter gradients (dict) and gradients w.r.t. each input."""
        caches, t, single, skip = cache
        dout = np.asarray(dout, dtype=self.dtype)
        if single:
            dout = dout[None]
        grads = {}
        dh = pixel_unshuffle(dout, self.r)
        for i in range(len(self.layers) - 1, -1, -1):
            conv_cache, act_cache = caches[i]
            if self.layers[i].activation == ACT_LEAKY:
                dh = leaky_relu_backward(act_cache, dh, self.leak)
            if i == 0:
                dtb = np.zeros_like(self.params["time_bias"])
                np.add.at(dtb, t - 1, dh.sum(axis=(1, 2)))
                grads["time_bias"] = dtb
            dh, dw, db = conv3x3_backward(conv_cache, dh, self.params[f"conv{i}.weight"])
            grads[f"conv{i}.weight"] = dw
            grads[f"conv{i}.bias"] = db
        dx = pixel_shuffle(dh, self.r)
        c = self.channels
        dinputs = [dx[..., k * c:(k + 1) * c] for k in range(self.n_inputs)]
        if skip is None:
            dinputs[0] = dinputs[0] + dout
        else:
            gate = self.params["skip_gate"][t - 1][:, None, None, None]
            dinputs[0] = dinputs[0] + gate * dout
            dinputs[2] = dinputs[2] + (1 - gate) * dout
            dgate = np.zeros_like(self.params["skip_gate"])
            np.add.at(dgate, t - 1, (skip * dout).sum(axis=(1, 2, 3)))
            grads["skip_gate"] = dgate
        if single:
            dinputs = [d[0] for d in dinputs]
        return {k: grads[k] for k in self.params}, dinputs

    def denoise(self, x_t, y0, g_y0, t):
        if self.role != "denoiser":
            raise ValueError(f"model role is {self.role!r}, not 'denoiser'")
        out = self.forward([x_t, y0, g_y0], t)
        return out.astype(np.asarray(x_t).dtype, copy=False)


def zero_model(channels: int = 3, role: str = "denoiser", T: int = 5, **kw) -> TinyNet:
    return TinyNet(channels, role, T, **kw)


def tinynet_forward(model: TinyNet, x_t, y0, g_y0, t):
    return model.denoise(x_t, y0, g_y0, t)


# -- losses -------------------------------------------------------------------


# Sobel = [1, 2, 1] smoothing across the derivative axis times [-1, 0, 1] along it,
# scaled by 1/8 so a unit ramp has unit gradient. Edge-clamped.
_SMOOTH = np.array([0.25, 0.5, 0.25])
_DIFF = np.array([-0.5, 0.0, 0.5])
_KX = np.outer(_SMOOTH, _DIFF)  # rows index H offsets -1..1, columns W offsets
_KY = np.outer(_DIFF, _SMOOTH)
_TAPS = [(a, b) for a in range(3) for b in range(3)]
GRAD_EPS = 1e-6


def _pad_edge(x):
    pad = [(0, 0)] * (x.ndim - 3) + [(1, 1), (1, 1), (0, 0)]
    return np.pad(x, pad, mode="edge")


def _pad_edge_adjoint(gp):
    gp = gp.copy()
    gp[..., 1, :, :] += gp[..., 0, :, :]
    gp[..., -2, :, :] += gp[..., -1, :, :]
    gp = gp[..., 1:-1, :, :]
    gp[..., :, 1, :] += gp[..., :, 0, :]
    gp[..., :, -2, :] += gp[..., :, -1, :]
    return gp[..., :, 1:-1, :]


def sobel(img):
    """Horizontal and vertical Sobel responses of an ``(..., H, W, C)`` array."""
    img = np.asarray(img)
    h, w = img.shape[-3:-1]
    p = _pad_edge(img)
    gx = np.zeros(img.shape, np.result_type(img.dtype, np.float32))
    gy = np.zeros_like(gx)
    for a, b in _TAPS:
        win = p[..., a:a + h, b:b + w, :]
        if _KX[a, b]:
            gx += _KX[a, b] * win
        if _KY[a, b]:
            gy += _KY[a, b] * win
    return gx, gy


def _sobel_adjoint(dgx, dgy):
    h, w = dgx.shape[-3:-1]
    gp = np.zeros(dgx.shape[:-3] + (h + 2, w + 2, dgx.shape[-1]), dgx.dtype)
    for a, b in _TAPS:
        gp[..., a:a + h, b:b + w, :] += _KX[a, b] * dgx + _KY[a, b] * dgy
    return _pad_edge_adjoint(gp)


def gradient_magnitude(img):
    gx, gy = sobel(img)
    return np.sqrt(gx * gx + gy * gy + GRAD_EPS)


def perceptual_proxy(pred, x0):
    """Mean absolute difference of Sobel gradient magnitudes, with its gradient in ``pred``."""
    pred = np.asarray(pred, dtype=np.float64)
    x0 = np.asarray(x0, dtype=np.float64)
    gx, gy = sobel(pred)
    mag = np.sqrt(gx * gx + gy * gy + GRAD_EPS)
    diff = mag - gradient_magnitude(x0)
    value = np.abs(diff).mean()
    dmag = np.sign(diff) / diff.size
    dgx, dgy = dmag * gx / mag, dmag * gy / mag
    grad = _sobel_adjoint(dgx, dgy)
    return value, grad


def mixed_loss(pred, x0, lam: float = 1.0, return_terms: bool = False):
    """``MSE(pred, x0) + lam * perceptual_proxy(pred, x0)`` and its gradient w.r.t. ``pred``.

    Accumulates in float64; the gradient has ``pred``'s dtype.
    """
    pred_arr = np.asarray(pred)
    check_same_shape(pred_arr, np.asarray(x0), names=("pred", "x0"))
    p = pred_arr.astype(np.float64)
    diff = p - np.asarray(x0, dtype=np.float64)
    mse = float(np.mean(diff * diff))
    grad = 2.0 * diff / diff.size
    per = 0.0
    if lam > 0:
        per, per_grad = perceptual_proxy(p, x0)
        grad = grad + lam * per_grad
    loss = mse + lam * per
    grad = grad.astype(pred_arr.dtype if pred_arr.dtype.kind == "f" else np.float64)
    if return_terms:
        return loss, grad, mse, float(per)
    return loss, grad


def l1_loss(pred, x0):
    p = np.asarray(pred)
    diff = p.astype(np.float64) - np.asarray(x0, dtype=np.float64)
    return float(np.abs(diff).mean()), (np.sign(diff) / diff.size).astype(p.dtype)


# -- training -----------------------------------------------------------------


class TrainingDiverged(RuntimeError):
    def __init__(self, iteration: int, last_finite_loss: float):
        super().__init__(f"loss became non-finite at iteration {iteration}; "
                         f"last finite loss {last_finite_loss:.6g}")
        self.iteration = iteration
        self.last_finite_loss = last_finite_loss


@dataclass
class TrainConfig:
    iterations: int = 5000
    batch_size: int = 8
    lr: float = 1e-3
    lam: float = 1.0
    seed: int = 0
    patch_size: int = 32
    r: int = 2
    hidden: int = 32
    n_layers: int = 4
    momentum: float = 0.0
    optimizer: str = "adam"
    lr_schedule: str = "constant"
    log_every: int = 1

    def validate(self):
        for name in ("iterations", "batch_size", "patch_size", "r", "hidden", "n_layers"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.patch_size % self.r:
            raise ValueError("patch_size must be divisible by r")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"optimizer must be 'sgd' or 'adam', got {self.optimizer!r}")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"lr_schedule must be 'constant' or 'cosine', got {self.lr_schedule!r}")


@dataclass
class TrainLog:
    rows: list = field(default_factory=list)  # (iteration, loss, mse, perceptual)

    @property
    def losses(self) -> np.ndarray:
        return np.array([r[1] for r in self.rows])

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["iteration", "loss", "mse", "perceptual"])
            for row in self.rows:
                w.writerow([row[0]] + [repr(float(v)) for v in row[1:]])


def _crop_batch(arrays, idx, patch, rng):
    """Crop the same random window from each array of each selected sample."""
    out = [[] for _ in arrays]
    for i in idx:
        h, w = arrays[0][i].shape[:2]
        ph, pw = min(patch, h), min(patch, w)
        y = int(rng.integers(0, h - ph + 1))
        x = int(rng.integers(0, w - pw + 1))
        for k, arr in enumerate(arrays):
            out[k].append(arr[i][y:y + ph, x:x + pw])
    return [np.stack(o) for o in out]


class _Optimizer:
    """Plain SGD (optionally with heavy-ball momentum) or Adam."""

    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        self.state: dict = {}
        self.steps = 0

    def rate(self) -> float:
        cfg = self.cfg
        if cfg.lr_schedule == "cosine":
            return 0.5 * cfg.lr * (1 + math.cos(math.pi * (self.steps - 1) / cfg.iterations))
        return cfg.lr

    def step(self, model: TinyNet, grads: dict) -> None:
        cfg = self.cfg
        self.steps += 1
        lr = self.rate()
        for name, g in grads.items():
            g = g.astype(np.float64)
            if cfg.optimizer == "adam":
                m, v = self.state.setdefault(name, (np.zeros_like(g), np.zeros_like(g)))
                m *= 0.9
                m += 0.1 * g
                v *= 0.999
                v += 0.001 * g * g
                mhat = m / (1 - 0.9 ** self.steps)
                vhat = v / (1 - 0.999 ** self.steps)
                update = mhat / (np.sqrt(vhat) + 1e-8)
            elif cfg.momentum:
                buf = self.state.setdefault(name, np.zeros_like(g))
                buf *= cfg.momentum
                buf += g
                update = buf
            else:
                update = g
            model.params[name] -= (lr * update).astype(model.dtype)


def _check_dataset(dataset):
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    shapes = {np.shape(x0) for x0, _ in dataset}
    if len(shapes) != 1:
        raise ValueError(f"all pairs must share one shape, got {sorted(shapes)}")
    for x0, y0 in dataset:
        check_same_shape(x0, y0, names=("x0", "y0"))


def train(dataset, predictor, s: NoiseSchedule, cfg: TrainConfig, rng: np.random.Generator,
          weighting: WeightingConfig | None = None, model: TinyNet | None = None,
          train_log: TrainLog | None = None) -> TinyNet:
    """Fit a denoiser on ``(x0, y0)`` pairs.

    Each iteration draws a batch of pairs and steps ``t ~ U{1..T}``, noises
    ``x0`` straight to ``x_t`` through the weighted marginal and takes one SGD
    step on the mixed loss of the predicted ``x0``.
    """
    _check_dataset(dataset)
    cfg.validate()
    weighting = weighting or WeightingConfig()
    x0s = [np.asarray(x0, dtype=np.float32) for x0, _ in dataset]
    y0s = [np.asarray(y0, dtype=np.float32) for _, y0 in dataset]
    channels = x0s[0].shape[2]

    # g is deterministic, so one pass over the data replaces a call per iteration
    conds = [prepare_conditioning(y0, predictor, weighting) for y0 in y0s]
    gs = [np.asarray(c[0], dtype=np.float32) for c in conds]
    ws = [c[2].broadcast() for c in conds]

    if model is None:
        model = TinyNet(channels, "denoiser", s.T, cfg.hidden, cfg.n_layers, cfg.r)
        model.init(rng)
    elif model.T != s.T or model.role != "denoiser":
        raise ValueError("model does not match the schedule / role")
    sqrt_eta = np.sqrt(s.eta)
    opt = _Optimizer(cfg)
    last = float("nan")
    for it in range(1, cfg.iterations + 1):
        idx = rng.integers(0, len(dataset), cfg.batch_size)
        x0, y0, g, w = _crop_batch([x0s, y0s, gs, ws], idx, cfg.patch_size, rng)
        t = rng.integers(1, s.T + 1, cfg.batch_size)
        e = s.eta[t][:, None, None, None]
        noise = rng.standard_normal(x0.shape).astype(np.float32)
        std = s.kappa * sqrt_eta[t][:, None, None, None] * w
        x_t = (x0 + e * (y0 - x0) + std * noise).astype(np.float32)

        pred, cache = model.forward_train([x_t, y0, g], t)
        loss, dpred, mse, per = mixed_loss(pred, x0, cfg.lam, return_terms=True)
        if not np.isfinite(loss):
            raise TrainingDiverged(it, last)
        last = loss
        grads, _ = model.backward(cache, dpred)
        opt.step(model, grads)
        if train_log is not None and (it % cfg.log_every == 0 or it == 1):
            train_log.rows.append((it, loss, mse, per))
    return model


def train_predictor(dataset, cfg: TrainConfig, rng: np.random.Generator,
                    model: TinyNet | None = None, train_log: TrainLog | None = None) -> TinyNet:
    """Fit a ``predictor``-role net mapping ``y0 -> x0`` under an L1 loss."""
    _check_dataset(dataset)
    cfg.validate()
    x0s = [np.asarray(x0, dtype=np.float32) for x0, _ in dataset]
    y0s = [np.asarray(y0, dtype=np.float32) for _, y0 in dataset]
    if model is None:
        model = TinyNet(x0s[0].shape[2], "predictor", 1, cfg.hidden, cfg.n_layers, cfg.r)
        model.init(rng)
    opt = _Optimizer(cfg)
    last = float("nan")
    for it in range(1, cfg.iterations + 1):
        idx = rng.integers(0, len(dataset), cfg.batch_size)
        x0, y0 = _crop_batch([x0s, y0s], idx, cfg.patch_size, rng)
        pred, cache = model.forward_train([y0], 1)
        loss, dpred = l1_loss(pred, x0)
        if not np.isfinite(loss):
            raise TrainingDiverged(it, last)
        last = loss
        grads, _ = model.backward(cache, dpred)
        opt.step(model, grads)
        if train_log is not None and (it % cfg.log_every == 0 or it == 1):
            train_log.rows.append((it, loss, loss, 0.0))
    return model


# -- model container ----------------------------------------------------------
#
#   "UPSR" | u32 version | u8 role | u8 reserved | u16 channels | u16 r | u16 T
#   | f64 leak | u16 n_layers | n_layers * (u16 cin, u16 cout, u8 kernel, u8 act)
#   | u32 n_params | n_params * f32 | u32 crc32 of everything before it
#
# All little-endian.

MAGIC = b"UPSR"
FORMAT_VERSION = 1


class ModelFormatError(ValueError):
    pass


class BadMagicError(ModelFormatError):
    pass


class VersionMismatchError(ModelFormatError):
    pass


class ChecksumError(ModelFormatError):
    pass


def model_to_bytes(model: TinyNet) -> bytes:
    head = MAGIC + struct.pack("<IBBHHHdH", FORMAT_VERSION, ROLES.index(model.role), 0,
                               model.channels, model.r, model.T, model.leak, len(model.layers))
    table = b"".join(struct.pack("<HHBB", l.cin, l.cout, l.kernel, l.activation)
                     for l in model.layers)
    flat = model.get_flat().astype("<f4")
    body = head + table + struct.pack("<I", flat.size) + flat.tobytes()
    return body + struct.pack("<I", zlib.crc32(body))


def model_from_bytes(data: bytes, source: str = "<bytes>") -> TinyNet:
    if data[:4] != MAGIC:
        raise BadMagicError(f"{source}: not a model file (bad magic {data[:4]!r})")
    if len(data) < 8 or struct.unpack("<I", data[-4:])[0] != zlib.crc32(data[:-4]):
        raise ChecksumError(f"{source}: checksum mismatch (file truncated or corrupted)")
    version, role, _, channels, r, T, leak, n_layers = struct.unpack_from("<IBBHHHdH", data, 4)
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"{source}: format version {version}, "
                                   f"this build reads {FORMAT_VERSION}")
    off = 4 + struct.calcsize("<IBBHHHdH")
    layers = []
    for _ in range(n_layers):
        cin, cout, k, act = struct.unpack_from("<HHBB", data, off)
        layers.append(LayerSpec(cin, cout, k, act))
        off += 6
    (n_params,) = struct.unpack_from("<I", data, off)
    off += 4
    flat = np.frombuffer(data, dtype="<f4", count=n_params, offset=off)
    if off + 4 * n_params + 4 != len(data):
        raise ModelFormatError(f"{source}: parameter block size does not match header")
    model = TinyNet(channels, ROLES[role], T, r=r, leak=leak, layers=layers)
    model.set_flat(flat.astype(np.float32))
    return model


def save_model(model: TinyNet, path) -> None:
    Path(path).write_bytes(model_to_bytes(model))


def load_model(path) -> TinyNet:
    return model_from_bytes(Path(path).read_bytes(), str(path))
