"""Patch-wise and voxel-wise regression networks written directly in numpy.

Both networks map a 3x3x3 neighbourhood of b=0-normalised DWI signals to
the six components of the matrix-log tensor at the centre voxel::

    conv(k x k x k, valid) -> ReLU -> dense(150) -> ReLU -> dense(150) -> ReLU -> linear(6)

With ``kernel_mode="patch3"`` the convolution covers the full 3x3x3 patch,
so its single output position is a dense layer over all 27 * C inputs.
With ``kernel_mode="voxel1"`` the kernel is 1x1x1 and only the centre
voxel is read.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field, fields

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import tensor_core
from .dwi_model import GradientScheme

log = logging.getLogger(__name__)

KERNEL_SIZES = {"patch3": 3, "voxel1": 1}
PARAM_ORDER = ("conv_w", "conv_b", "d1_w", "d1_b", "d2_w", "d2_b", "out_w", "out_b")
INPUT_CLAMP = (0.0, 1.5)


class NetworkError(ValueError):
    pass


@dataclass
class NetworkParams:
    conv_w: np.ndarray  # (F, C, k, k, k)
    conv_b: np.ndarray  # (F,)
    d1_w: np.ndarray  # (H1, F)
    d1_b: np.ndarray
    d2_w: np.ndarray  # (H2, H1)
    d2_b: np.ndarray
    out_w: np.ndarray  # (6, H2)
    out_b: np.ndarray
    kernel_mode: str = "patch3"

    def __post_init__(self):
        if self.kernel_mode not in KERNEL_SIZES:
            raise NetworkError(f"unknown kernel_mode {self.kernel_mode!r}")
        k = KERNEL_SIZES[self.kernel_mode]
        f, c = self.conv_w.shape[:2]
        expected = {
            "conv_w": (f, c, k, k, k),
            "conv_b": (f,),
            "d1_w": (self.d1_w.shape[0], f),
            "d1_b": (self.d1_w.shape[0],),
            "d2_w": (self.d2_w.shape[0], self.d1_w.shape[0]),
            "d2_b": (self.d2_w.shape[0],),
            "out_w": (self.out_w.shape[0], self.d2_w.shape[0]),
            "out_b": (self.out_w.shape[0],),
        }
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise NetworkError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")

    @property
    def n_channels(self) -> int:
        return self.conv_w.shape[1]

    def arrays(self):
        return [getattr(self, n) for n in PARAM_ORDER]

    def map(self, fn) -> "NetworkParams":
        return NetworkParams(*[fn(a) for a in self.arrays()], kernel_mode=self.kernel_mode)

    def astype(self, dtype) -> "NetworkParams":
        return self.map(lambda a: np.asarray(a, dtype=dtype))

    def copy(self) -> "NetworkParams":
        return self.map(np.array)

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])


def init_params(
    kernel_mode="patch3", n_channels=6, n_filters=150, hidden=150, n_out=6, seed=0, dtype=np.float64
) -> NetworkParams:
    """Glorot-uniform weights and zero biases."""
    if kernel_mode not in KERNEL_SIZES:
        raise NetworkError(f"unknown kernel_mode {kernel_mode!r}")
    k = KERNEL_SIZES[kernel_mode]
    rng = np.random.default_rng(seed)

    def glorot(shape, fan_in, fan_out):
        lim = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-lim, lim, size=shape).astype(dtype)

    vol = k**3
    return NetworkParams(
        conv_w=glorot((n_filters, n_channels, k, k, k), n_channels * vol, n_filters * vol),
        conv_b=np.zeros(n_filters, dtype),
        d1_w=glorot((hidden, n_filters), n_filters, hidden),
        d1_b=np.zeros(hidden, dtype),
        d2_w=glorot((hidden, hidden), hidden, hidden),
        d2_b=np.zeros(hidden, dtype),
        out_w=glorot((n_out, hidden), hidden, n_out),
        out_b=np.zeros(n_out, dtype),
        kernel_mode=kernel_mode,
    )


def _conv_inputs(params, x):
    # (N, C, 3, 3, 3) -> flattened receptive field matching conv_w.reshape(F, -1)
    if params.kernel_mode == "voxel1":
        return x[:, :, 1, 1, 1]
    return x.reshape(x.shape[0], -1)


def _check_input(params, x):
    x = np.asarray(x)
    single = x.ndim == 4
    if single:
        x = x[None]
    if x.ndim != 5 or x.shape[1:] != (params.n_channels, 3, 3, 3):
        raise NetworkError(f"input shape {x.shape} does not match ({params.n_channels}, 3, 3, 3)")
    return x, single


def _forward(params, x):
    a0 = _conv_inputs(params, x)
    w0 = params.conv_w.reshape(params.conv_w.shape[0], -1)
    h1 = np.maximum(a0 @ w0.T + params.conv_b, 0)
    h2 = np.maximum(h1 @ params.d1_w.T + params.d1_b, 0)
    h3 = np.maximum(h2 @ params.d2_w.T + params.d2_b, 0)
    out = h3 @ params.out_w.T + params.out_b
    return out, (a0, h1, h2, h3)


def forward(params: NetworkParams, x) -> np.ndarray:
    """Network output for one ``(C, 3, 3, 3)`` patch or a batch of them."""
    x, single = _check_input(params, x)
    out, _ = _forward(params, x.astype(params.out_w.dtype, copy=False))
    return out[0] if single else out


def loss_and_grad(params: NetworkParams, inputs, targets):
    """Mean squared error over examples and outputs, and its gradient.

    Returns
    -------
    loss : float
    grads : NetworkParams
        Same shapes as ``params``.
    """
    x, _ = _check_input(params, inputs)
    x = x.astype(params.out_w.dtype, copy=False)
    y = np.asarray(targets, dtype=params.out_w.dtype).reshape(x.shape[0], -1)
    out, (a0, h1, h2, h3) = _forward(params, x)
    diff = out - y
    loss = float(np.mean(diff * diff))

    g_out = 2.0 * diff / diff.size
    g_out_w = g_out.T @ h3
    g_out_b = g_out.sum(axis=0)
    g3 = (g_out @ params.out_w) * (h3 > 0)
    g_d2_w = g3.T @ h2
    g_d2_b = g3.sum(axis=0)
    g2 = (g3 @ params.d2_w) * (h2 > 0)
    g_d1_w = g2.T @ h1
    g_d1_b = g2.sum(axis=0)
    g1 = (g2 @ params.d1_w) * (h1 > 0)
    g_conv = g1.T @ a0
    g_conv_b = g1.sum(axis=0)

    grads = NetworkParams(
        conv_w=g_conv.reshape(params.conv_w.shape),
        conv_b=g_conv_b,
        d1_w=g_d1_w,
        d1_b=g_d1_b,
        d2_w=g_d2_w,
        d2_b=g_d2_b,
        out_w=g_out_w,
        out_b=g_out_b,
        kernel_mode=params.kernel_mode,
    )
    return loss, grads


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: NetworkParams, **kw) -> "AdamState":
        return cls([np.zeros_like(a) for a in params.arrays()], [np.zeros_like(a) for a in params.arrays()], **kw)


def adam_step(state: AdamState, params: NetworkParams, grads: NetworkParams, lr: float):
    """One bias-corrected Adam update, applied in place.

    Returns the same ``(state, params)`` objects for convenience.
    """
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for p, g, m, v in zip(params.arrays(), grads.arrays(), state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype, copy=False)
    return state, params


@dataclass
class PatchDataset:
    inputs: np.ndarray  # (N, C, 3, 3, 3)
    targets: np.ndarray | None  # (N, 6) log-tensor components
    coords: np.ndarray  # (N, 3) voxel indices
    dropped: int = 0

    def __len__(self):
        return self.inputs.shape[0]

    def subset(self, idx) -> "PatchDataset":
        t = None if self.targets is None else self.targets[idx]
        return PatchDataset(self.inputs[idx], t, self.coords[idx])


def normalised_channels(dwi, scheme: GradientScheme):
    """Diffusion-weighted volumes divided by the mean b=0 volume, clamped.

    Returns the ``(nx, ny, nz, C)`` channel stack and the b=0 reference.
    Where the reference is not positive the ratio is set to the lower clamp.
    """
    dwi = np.asarray(dwi, dtype=np.float64)
    if dwi.ndim != 4 or dwi.shape[-1] != len(scheme):
        raise NetworkError(f"volume shape {dwi.shape} does not match a {len(scheme)}-entry scheme")
    b0i = scheme.b0_indices
    if b0i.size == 0:
        raise NetworkError("scheme has no b=0 volume")
    ref = dwi[..., b0i].mean(axis=-1)
    ok = ref > 0
    ratio = dwi[..., scheme.dw_indices] / np.where(ok, ref, 1.0)[..., None]
    ratio = np.where(ok[..., None], ratio, INPUT_CLAMP[0])
    return np.clip(ratio, *INPUT_CLAMP), ref


def extract_patches(dwi, scheme: GradientScheme, mask, gt_tensors=None, drop_invalid=True) -> PatchDataset:
    """One 3x3x3 patch of normalised signals per mask voxel.

    Borders are mirror padded.  Mask voxels whose b=0 signal is not
    positive are dropped (and counted in ``dropped``) unless
    ``drop_invalid`` is False, in which case they keep the clamped input.
    If ``gt_tensors`` is given, targets are their matrix logarithms.
    """
    chans, ref = normalised_channels(dwi, scheme)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != chans.shape[:3]:
        raise NetworkError(f"mask shape {mask.shape} does not match volume {chans.shape[:3]}")
    valid = mask & (ref > 0) if drop_invalid else mask
    dropped = int(np.count_nonzero(mask & ~valid))
    if dropped:
        log.warning("dropped %d mask voxels with non-positive b=0 signal", dropped)
    coords = np.argwhere(valid)

    padded = np.pad(chans, ((1, 1), (1, 1), (1, 1), (0, 0)), mode="reflect")
    win = sliding_window_view(padded, (3, 3, 3), axis=(0, 1, 2))  # (nx, ny, nz, C, 3, 3, 3)
    inputs = np.ascontiguousarray(win[coords[:, 0], coords[:, 1], coords[:, 2]])

    targets = None
    if gt_tensors is not None:
        gt = np.asarray(gt_tensors, dtype=np.float64)
        targets = tensor_core.tensor_log(gt[coords[:, 0], coords[:, 1], coords[:, 2]])
    return PatchDataset(inputs, targets, coords, dropped)


@dataclass
class TrainingConfig:
    batch_size: int = 256
    lr0: float = 1e-3
    plateau_patience: int = 10
    lr_decay: float = 0.5
    validation_fraction: float = 0.2
    early_stop_patience: int = 20
    max_epochs: int = 500
    seed: int = 0
    n_filters: int = 150
    hidden: int = 150
    dtype: str = "float32"

    def __post_init__(self):
        if not 0 < self.validation_fraction < 1:
            raise NetworkError("validation_fraction must lie in (0, 1)")
        if self.lr0 <= 0:
            raise NetworkError("lr0 must be positive")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise NetworkError("batch_size and max_epochs must be positive")

    @classmethod
    def from_dict(cls, cfg: dict) -> "TrainingConfig":
        names = {f.name for f in fields(cls)}
        bad = set(cfg) - names
        if bad:
            raise NetworkError(f"unknown training keys: {sorted(bad)}")
        return cls(**cfg)


class PlateauSchedule:
    """Multiply the learning rate by ``decay`` after ``patience`` epochs without a new best loss."""

    def __init__(self, lr0, patience=10, decay=0.5):
        self.lr = lr0
        self.patience = patience
        self.decay = decay
        self.best = np.inf
        self.wait = 0

    def update(self, loss: float) -> float:
        if loss < self.best:
            self.best = loss
            self.wait = 0
        else:
            self.wait += 1
            if self.wait >= self.patience:
                self.lr *= self.decay
                self.wait = 0
        return self.lr


@dataclass
class History:
    epochs: list = field(default_factory=list)
    best_epoch: int = -1

    def append(self, epoch, train_loss, val_loss, lr):
        self.epochs.append((epoch, train_loss, val_loss, lr))

    def to_csv(self) -> str:
        lines = ["epoch,train_loss,val_loss,lr"]
        lines += [f"{e},{t:.9g},{v:.9g},{lr:.9g}" for e, t, v, lr in self.epochs]
        return "\n".join(lines) + "\n"


def _mean_loss(params, inputs, targets, chunk=4096):
    total = 0.0
    for s in range(0, len(inputs), chunk):
        out, _ = _forward(params, inputs[s : s + chunk])
        total += float(np.sum((out - targets[s : s + chunk]) ** 2))
    return total / targets.size


def train(config: TrainingConfig, data: PatchDataset, kernel_mode="patch3", init=None):
    """Fit a network to ``data`` with Adam, plateau decay and early stopping.

    Examples are split once into training and validation sets.  The
    learning rate decays on training-loss plateaus; training stops when the
    validation loss has not improved for ``early_stop_patience`` epochs, and
    the parameters from the best validation epoch are returned.

    Returns
    -------
    params : NetworkParams
    history : History
    """
    if data.targets is None:
        raise NetworkError("training data has no targets")
    n = len(data)
    if n < 2 * config.batch_size:
        raise NetworkError(f"need at least {2 * config.batch_size} examples, got {n}")
    dtype = np.dtype(config.dtype)
    rng = np.random.default_rng(config.seed)
    perm = rng.permutation(n)
    n_val = max(1, int(round(config.validation_fraction * n)))
    val_idx, tr_idx = np.sort(perm[:n_val]), np.sort(perm[n_val:])
    x_tr = data.inputs[tr_idx].astype(dtype)
    y_tr = data.targets[tr_idx].astype(dtype)
    x_val = data.inputs[val_idx].astype(dtype)
    y_val = data.targets[val_idx].astype(dtype)

    if init is None:
        params = init_params(
            kernel_mode,
            n_channels=data.inputs.shape[1],
            n_filters=config.n_filters,
            hidden=config.hidden,
            n_out=data.targets.shape[1],
            seed=config.seed,
            dtype=dtype,
        )
        # start the output at the mean target so early epochs fit shape, not offset
        params.out_b[:] = y_tr.mean(axis=0)
    else:
        params = init.astype(dtype).copy()
    state = AdamState.zeros_like(params)
    schedule = PlateauSchedule(config.lr0, config.plateau_patience, config.lr_decay)
    history = History()
    best_val, best_params, since_best = np.inf, params.copy(), 0
    lr = config.lr0

    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(len(tr_idx))
        total = 0.0
        for s in range(0, len(order), config.batch_size):
            b = order[s : s + config.batch_size]
            loss, grads = loss_and_grad(params, x_tr[b], y_tr[b])
            adam_step(state, params, grads, lr)
            total += loss * len(b)
        train_loss = total / len(order)
        val_loss = _mean_loss(params, x_val, y_val)
        history.append(epoch, train_loss, val_loss, lr)
        lr = schedule.update(train_loss)
        if val_loss < best_val:
            best_val, best_params, since_best = val_loss, params.copy(), 0
            history.best_epoch = epoch
        else:
            since_best += 1
            if since_best >= config.early_stop_patience:
                log.info("early stop at epoch %d (best %d)", epoch, history.best_epoch)
                break
    return best_params, history


def predict_volume(params: NetworkParams, dwi, scheme: GradientScheme, mask, chunk=8192) -> np.ndarray:
    """Tensor field predicted by the network; zero outside ``mask``.

    Outputs go through the matrix exponential, so every in-mask tensor is
    positive definite.
    """
    data = extract_patches(dwi, scheme, mask, drop_invalid=False)
    out = np.zeros(np.asarray(mask).shape + (6,))
    p64 = params.astype(np.float64)
    logs = np.concatenate(
        [forward(p64, data.inputs[s : s + chunk]) for s in range(0, len(data), chunk)] or [np.zeros((0, 6))]
    )
    c = data.coords
    out[c[:, 0], c[:, 1], c[:, 2]] = tensor_core.tensor_exp(logs)
    return out


def zero_noncentre_taps(params: NetworkParams) -> NetworkParams:
    """Copy of patch3 ``params`` with every non-centre kernel tap set to zero."""
    p = copy.deepcopy(params)
    centre = p.conv_w[:, :, 1, 1, 1].copy()
    p.conv_w[...] = 0
    p.conv_w[:, :, 1, 1, 1] = centre
    return p


def as_voxel1(params: NetworkParams) -> NetworkParams:
    """voxel1 network using the centre taps of a patch3 network."""
    p = params.copy()
    return NetworkParams(
        p.conv_w[:, :, 1:2, 1:2, 1:2].copy(), p.conv_b, p.d1_w, p.d1_b, p.d2_w, p.d2_b, p.out_w, p.out_b, "voxel1"
    )
