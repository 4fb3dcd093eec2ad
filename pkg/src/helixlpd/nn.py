"""Small 3D CNN core with hand-written forward/backward passes.

Tensors are torch tensors laid out ``(channels, depth, height, width)``; there
is no batch axis. Convolutions are 3x3x3, stride 1, zero padded to keep the
spatial shape. Thin layers (few input or output channels) are computed as one
GEMM over shifted views of the flattened padded input, which is much faster
on CPU than the generic kernel; wide layers go through ``torch`` convolution.

Gradients are computed explicitly (no autograd), so the caller decides which
activations are alive at any time. :class:`ActivationStore` is the hook that
accounts for them.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import rng

KERNEL_SIZE = 3
HIDDEN_CHANNELS = (32, 16)
DUAL_IN_CHANNELS = 2  # (A f, g)
PRIMAL_IN_CHANNELS = 1  # A* u

_CHECKPOINT_FORMAT = "helixlpd-checkpoint"
_CHECKPOINT_VERSION = 1


class ActivationStore:
    """Registry of live activation tensors with a peak-bytes counter."""

    def __init__(self):
        self._live: dict = {}
        self.live_bytes = 0
        self.peak_bytes = 0

    def put(self, key, tensors):
        if key in self._live:
            raise KeyError(f"activation {key!r} already stored")
        size = sum(t.numel() * t.element_size() for t in tensors)
        self._live[key] = (tensors, size)
        self.live_bytes += size
        self.peak_bytes = max(self.peak_bytes, self.live_bytes)
        return tensors

    def pop(self, key):
        tensors, size = self._live.pop(key)
        self.live_bytes -= size
        return tensors

    def __len__(self):
        return len(self._live)


@dataclass(frozen=True)
class _Grid:
    """Index arithmetic for 3x3x3 correlation on a flattened padded grid."""

    shape: tuple[int, int, int]

    @property
    def padded(self):
        d, h, w = self.shape
        return (d + 2, h + 2, w + 2)

    @property
    def size(self):
        d, h, w = self.padded
        return d * h * w

    @property
    def offsets(self):
        _, hp, wp = self.padded
        return [
            (a - 1) * hp * wp + (b - 1) * wp + (c - 1)
            for a in range(3) for b in range(3) for c in range(3)
        ]

    @property
    def margin(self):
        _, hp, wp = self.padded
        return hp * wp + wp + 1

    @property
    def span(self):
        return self.size - 2 * self.margin

    def pad(self, x):
        return F.pad(x, (1, 1, 1, 1, 1, 1)).reshape(x.shape[0], -1)

    def unpad(self, flat):
        """(C, span) values at padded positions [margin, size - margin) -> (C, D, H, W)."""
        c = flat.shape[0]
        full = flat.new_zeros((c, self.size))
        full[:, self.margin:self.margin + self.span] = flat
        return full.reshape(c, *self.padded)[:, 1:-1, 1:-1, 1:-1].contiguous()

    def shifted(self, xp, sign=1):
        """Stack of the 27 shifted views, shape (27 * C, span)."""
        m, n = self.margin, self.span
        return torch.cat([xp[:, m + sign * o:m + sign * o + n] for o in self.offsets], dim=0)

    def gather(self, z, channels, sign=1):
        """Sum over k of rows ``[k*channels, (k+1)*channels)`` of ``z`` shifted by offset k."""
        m, n = self.margin, self.span
        out = z.new_zeros((channels, n))
        for k, o in enumerate(self.offsets):
            out += z[k * channels:(k + 1) * channels, m + sign * o:m + sign * o + n]
        return out


def _thin_input(cin):
    return 27 * cin <= 64


def _lib_order(shape):
    """Spatial axis order putting the shortest axis last; the CPU kernels are
    an order of magnitude faster on such layouts."""
    k = min(range(3), key=lambda a: (shape[a], -a))
    return [a for a in range(3) if a != k] + [k]


def _permute(t, order, lead):
    return t.permute(*range(lead), *(lead + a for a in order))


def _inverse(order):
    return [order.index(a) for a in range(3)]


def conv3d(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor) -> torch.Tensor:
    cout, cin = weight.shape[:2]
    if x.shape[0] != cin:
        raise ValueError(f"expected {cin} input channels, got {x.shape[0]}")
    grid = _Grid(tuple(x.shape[1:]))
    if _thin_input(cin):
        wm = weight.permute(0, 2, 3, 4, 1).reshape(cout, 27 * cin)
        out = wm @ grid.shifted(grid.pad(x))
    elif cout <= 2:
        w2 = weight.permute(2, 3, 4, 0, 1).reshape(27 * cout, cin)
        out = grid.gather(w2 @ grid.pad(x), cout)
    else:
        order = _lib_order(x.shape[1:])
        out = F.conv3d(_permute(x, order, 1).contiguous()[None], _permute(weight, order, 2).contiguous(), bias, padding=1)[0]
        return _permute(out, _inverse(order), 1).contiguous()
    out += bias[:, None]
    return grid.unpad(out)


def conv3d_backward(grad_out, x, weight, need_input_grad=True):
    """Gradients ``(d input, d weight, d bias)`` of :func:`conv3d`."""
    cout, cin = weight.shape[:2]
    grid = _Grid(tuple(x.shape[1:]))
    if not (_thin_input(cin) or cout <= 2):
        order = _lib_order(x.shape[1:])
        inv = _inverse(order)
        gi, gw, gb = torch.ops.aten.convolution_backward(
            _permute(grad_out, order, 1).contiguous()[None], _permute(x, order, 1).contiguous()[None],
            _permute(weight, order, 2).contiguous(), [cout], [1, 1, 1], [1, 1, 1], [1, 1, 1],
            False, [0, 0, 0], 1, [need_input_grad, True, True],
        )
        gi = _permute(gi[0], inv, 1).contiguous() if need_input_grad else None
        return gi, _permute(gw, inv, 2).contiguous(), gb
    gb = grad_out.sum(dim=(1, 2, 3))
    gp = grid.pad(grad_out)
    m, n = grid.margin, grid.span
    gn = gp[:, m:m + n]
    xp = grid.pad(x)
    if _thin_input(cin):
        gw = (gn @ grid.shifted(xp).T).reshape(cout, 3, 3, 3, cin).permute(0, 4, 1, 2, 3)
    else:
        gw = torch.stack([gn @ xp[:, m + o:m + o + n].T for o in grid.offsets], dim=-1)
        gw = gw.reshape(cout, cin, 3, 3, 3)
    gx = None
    if need_input_grad:
        if cout <= 2 or not _thin_input(cin) and cout < cin:
            wt = weight.permute(1, 2, 3, 4, 0).reshape(cin, 27 * cout)
            gx = wt @ grid.shifted(gp, sign=-1)
        else:
            w2 = weight.permute(2, 3, 4, 1, 0).reshape(27 * cin, cout)
            gx = grid.gather(w2 @ gp, cin, sign=-1)
        gx = grid.unpad(gx)
    return gx, gw.contiguous(), gb


@dataclass
class ConvBlockParams:
    """conv -> ReLU -> conv -> ReLU -> conv with 32 and 16 hidden channels."""

    weights: list[torch.Tensor]
    biases: list[torch.Tensor]

    @property
    def in_channels(self) -> int:
        return self.weights[0].shape[1]

    def tensors(self) -> list[torch.Tensor]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    @classmethod
    def initialize(cls, in_channels, seed, stream=0, dtype=torch.float32, zero_last=True):
        """Kaiming-uniform weights, uniform(+-1/sqrt(fan_in)) biases; the last
        layer is zeroed so the block starts as the zero map."""
        chans = [in_channels, *HIDDEN_CHANNELS, 1]
        weights, biases = [], []
        for layer, (cin, cout) in enumerate(zip(chans[:-1], chans[1:])):
            fan_in = cin * KERNEL_SIZE ** 3
            n_w = cout * fan_in
            u = rng.uniform(seed, n_w + cout, stream=(stream << 4) + layer)
            w = (2 * u[:n_w] - 1) * math.sqrt(6.0 / fan_in)
            b = (2 * u[n_w:] - 1) / math.sqrt(fan_in)
            if zero_last and layer == len(chans) - 2:
                w, b = np.zeros_like(w), np.zeros_like(b)
            weights.append(torch.tensor(w.reshape(cout, cin, 3, 3, 3), dtype=dtype))
            biases.append(torch.tensor(b, dtype=dtype))
        return cls(weights, biases)

    def clone(self):
        return ConvBlockParams([w.clone() for w in self.weights], [b.clone() for b in self.biases])

    def to(self, dtype):
        return ConvBlockParams([w.to(dtype) for w in self.weights], [b.to(dtype) for b in self.biases])


def conv_block_forward(params: ConvBlockParams, x: torch.Tensor, store: ActivationStore | None = None, key=None):
    """Apply the block. With a store, the hidden activations are registered
    under ``key`` for a later :func:`conv_block_backward`."""
    w, b = params.weights, params.biases
    h1 = torch.relu_(conv3d(x, w[0], b[0]))
    h2 = torch.relu_(conv3d(h1, w[1], b[1]))
    y = conv3d(h2, w[2], b[2])
    if store is not None:
        store.put(key, (h1, h2))
    return y


def conv_block_backward(params: ConvBlockParams, x, upstream, store: ActivationStore | None = None, key=None):
    """Return ``(d input, [dW1, db1, dW2, db2, dW3, db3])``.

    Uses activations from ``store[key]`` (released afterwards) or recomputes
    them from ``x``.
    """
    w, b = params.weights, params.biases
    if store is not None and key is not None:
        h1, h2 = store.pop(key)
    else:
        h1 = torch.relu_(conv3d(x, w[0], b[0]))
        h2 = torch.relu_(conv3d(h1, w[1], b[1]))
    g2, gw3, gb3 = conv3d_backward(upstream, h2, w[2])
    g2 = g2 * (h2 > 0)
    del h2
    g1, gw2, gb2 = conv3d_backward(g2, h1, w[1])
    g1 = g1 * (h1 > 0)
    del h1, g2
    gx, gw1, gb1 = conv3d_backward(g1, x, w[0])
    return gx, [gw1, gb1, gw2, gb2, gw3, gb3]


@dataclass
class NetworkParams:
    """Per-iteration (dual, primal) block pairs plus fixed scaling constants.

    The network works in rescaled units: images in multiples of
    ``image_scale`` and the operator divided by ``op_norm``.
    """

    dual: list[ConvBlockParams]
    primal: list[ConvBlockParams]
    image_scale: float = 0.0192
    op_norm: float = 1.0
    seed: int = 0
    step: int = 0

    @property
    def iterations(self) -> int:
        return len(self.dual)

    @property
    def dtype(self):
        return self.dual[0].weights[0].dtype

    def tensors(self) -> list[torch.Tensor]:
        out = []
        for d, p in zip(self.dual, self.primal):
            out += d.tensors() + p.tensors()
        return out

    def tensor_names(self) -> list[str]:
        names = []
        for i in range(self.iterations):
            for blk in ("dual", "primal"):
                for layer in range(3):
                    names += [f"{blk}{i}.conv{layer}.weight", f"{blk}{i}.conv{layer}.bias"]
        return names

    def zero_grads(self) -> list[torch.Tensor]:
        """An empty gradient tape matching :meth:`tensors`."""
        return [torch.zeros_like(t) for t in self.tensors()]

    def clone(self) -> "NetworkParams":
        return NetworkParams(
            [d.clone() for d in self.dual], [p.clone() for p in self.primal],
            self.image_scale, self.op_norm, self.seed, self.step,
        )

    def to(self, dtype) -> "NetworkParams":
        return NetworkParams(
            [d.to(dtype) for d in self.dual], [p.to(dtype) for p in self.primal],
            self.image_scale, self.op_norm, self.seed, self.step,
        )

    @classmethod
    def initialize(cls, iterations, seed=0, image_scale=0.0192, op_norm=1.0, dtype=torch.float32, zero_last=True):
        if iterations < 1:
            raise ValueError("need at least one unrolled iteration")
        dual = [ConvBlockParams.initialize(DUAL_IN_CHANNELS, seed, 2 * i, dtype, zero_last) for i in range(iterations)]
        primal = [ConvBlockParams.initialize(PRIMAL_IN_CHANNELS, seed, 2 * i + 1, dtype, zero_last) for i in range(iterations)]
        return cls(dual, primal, image_scale, op_norm, seed)


# --- optimizer ---------------------------------------------------------------


@dataclass
class AdamConfig:
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    total_steps: int = 5000


@dataclass
class AdamState:
    m: list[torch.Tensor] = field(default_factory=list)
    v: list[torch.Tensor] = field(default_factory=list)


def cosine_lr(step: int, cfg: AdamConfig) -> float:
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * step / cfg.total_steps))


def adam_step(params: NetworkParams, grads, step: int, cfg: AdamConfig, state: AdamState) -> NetworkParams:
    """One in-place Adam update with cosine-annealed learning rate."""
    if not 0 <= step < cfg.total_steps:
        raise ValueError(f"step {step} outside [0, {cfg.total_steps})")
    tensors = params.tensors()
    if not state.m:
        state.m = [torch.zeros_like(t) for t in tensors]
        state.v = [torch.zeros_like(t) for t in tensors]
    lr = cosine_lr(step, cfg)
    t = step + 1
    c1 = 1.0 - cfg.beta1 ** t
    c2 = 1.0 - cfg.beta2 ** t
    for p, g, m, v in zip(tensors, grads, state.m, state.v):
        m.mul_(cfg.beta1).add_(g, alpha=1.0 - cfg.beta1)
        v.mul_(cfg.beta2).addcmul_(g, g, value=1.0 - cfg.beta2)
        p.sub_(lr * (m / c1) / ((v / c2).sqrt() + cfg.eps))
    params.step = step + 1
    return params


# --- checkpoints -------------------------------------------------------------


def save_checkpoint(params: NetworkParams, path, extra: dict | None = None) -> None:
    """JSON manifest at ``path`` plus little-endian float32 blob ``path.bin``."""
    path = Path(path)
    blob_path = path.with_suffix(path.suffix + ".bin")
    tensors = params.tensors()
    manifest = {
        "format": _CHECKPOINT_FORMAT,
        "version": _CHECKPOINT_VERSION,
        "architecture": {
            "kernel_size": KERNEL_SIZE,
            "hidden_channels": list(HIDDEN_CHANNELS),
            "dual_in_channels": DUAL_IN_CHANNELS,
            "primal_in_channels": PRIMAL_IN_CHANNELS,
        },
        "iterations": params.iterations,
        "image_scale": params.image_scale,
        "op_norm": params.op_norm,
        "seed": params.seed,
        "step": params.step,
        "blob": blob_path.name,
        "tensors": [{"name": n, "shape": list(t.shape)} for n, t in zip(params.tensor_names(), tensors)],
        "extra": extra or {},
    }
    flat = np.concatenate([t.detach().cpu().numpy().astype("<f4").ravel() for t in tensors])
    tmp = blob_path.with_suffix(".tmp")
    flat.tofile(tmp)
    tmp.replace(blob_path)
    tmp = path.with_suffix(".tmp")
    tmp.write_text(json.dumps(manifest, indent=1))
    tmp.replace(path)


def load_checkpoint(path, dtype=torch.float32) -> NetworkParams:
    path = Path(path)
    manifest = json.loads(path.read_text())
    if manifest.get("format") != _CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a checkpoint manifest")
    arch = manifest["architecture"]
    if arch["kernel_size"] != KERNEL_SIZE or tuple(arch["hidden_channels"]) != HIDDEN_CHANNELS:
        raise ValueError("checkpoint architecture does not match this build")
    params = NetworkParams.initialize(
        manifest["iterations"], manifest["seed"], manifest["image_scale"], manifest["op_norm"], dtype,
    )
    params.step = manifest["step"]
    flat = np.fromfile(path.parent / manifest["blob"], dtype="<f4")
    pos = 0
    for t, entry, name in zip(params.tensors(), manifest["tensors"], params.tensor_names()):
        if entry["name"] != name or list(t.shape) != entry["shape"]:
            raise ValueError(f"checkpoint tensor {entry['name']} does not match {name}")
        n = t.numel()
        t.copy_(torch.from_numpy(flat[pos:pos + n].reshape(t.shape)))
        pos += n
    if pos != flat.size:
        raise ValueError("checkpoint blob size mismatch")
    return params
