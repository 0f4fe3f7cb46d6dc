"""A small from-scratch 3D convolutional classifier with manual backprop.

Two pathways feed a per-voxel dense head: a native-resolution pathway and an
optional pathway that sees the volume subsampled by 4. All convolutions are
3x3x3 "valid" (or 1x1x1 inside bottleneck blocks), so one network can be
applied either to batches of patches or densely to a whole mirror-padded
volume. Tensors are channels-last: ``(N, D, H, W, C)``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

LOW_SCALE = 4
_CHUNK = 16384
CKPT_MAGIC = b"BTCKPT01"
P_FLOOR = 1e-12


class NetworkError(ValueError):
    pass


class StateError(RuntimeError):
    pass


# -- specs ----------------------------------------------------------------------

@dataclass
class LayerSpec:
    kind: str  # "conv", "res_a" or "res_b"
    features: int = 0
    bottleneck: int = 0

    def shrink(self) -> int:
        return {"conv": 2, "res_a": 4, "res_b": 2}[self.kind]


@dataclass
class PathwaySpec:
    layers: list[LayerSpec]

    @property
    def shrink(self) -> int:
        return sum(layer.shrink() for layer in self.layers)

    @property
    def receptive_field(self) -> int:
        return 1 + self.shrink


@dataclass
class NetworkSpec:
    native: PathwaySpec
    low: PathwaySpec | None = None
    hidden: list[int] = field(default_factory=lambda: [16])
    dropout: float = 0.5
    num_classes: int = 2
    output_region: int = 1

    def __post_init__(self):
        if isinstance(self.native, dict):
            self.native = _pathway_from_dict(self.native)
        if isinstance(self.low, dict):
            self.low = _pathway_from_dict(self.low)
        for pw in (self.native, self.low):
            if pw is None:
                continue
            if not pw.layers or pw.layers[0].kind != "conv":
                raise NetworkError("each pathway must start with a conv layer")
            for layer in pw.layers:
                if layer.kind not in ("conv", "res_a", "res_b"):
                    raise NetworkError(f"unknown layer kind {layer.kind!r}")
                if layer.kind == "res_b" and layer.bottleneck < 1:
                    raise NetworkError("res_b needs a positive bottleneck width")
        if self.output_region < 1 or self.output_region % 2 == 0:
            raise NetworkError("output_region must be a positive odd integer")
        if self.num_classes < 2:
            raise NetworkError("num_classes must be >= 2")
        if not 0.0 <= self.dropout < 1.0:
            raise NetworkError("dropout must be in [0, 1)")

    # geometry
    @property
    def native_patch(self) -> int:
        return self.output_region + self.native.shrink

    def low_index(self) -> np.ndarray:
        """Low-pathway output index feeding each native output offset."""
        half = self.output_region // 2
        d = np.arange(-half, half + 1)
        return np.floor((d + LOW_SCALE // 2) / LOW_SCALE).astype(int)

    @property
    def low_region(self) -> int:
        return 2 * int(np.abs(self.low_index()).max()) + 1

    @property
    def low_patch(self) -> int:
        return 0 if self.low is None else self.low_region + self.low.shrink

    @property
    def receptive_fields(self) -> dict:
        rf = {"native": self.native.receptive_field}
        if self.low is not None:
            rf["low"] = LOW_SCALE * (self.low.receptive_field - 1) + 1
        return rf

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        d = dict(d)
        d["native"] = _pathway_from_dict(d["native"])
        if d.get("low") is not None:
            d["low"] = _pathway_from_dict(d["low"])
        return cls(**d)


def _pathway_from_dict(d) -> PathwaySpec:
    if isinstance(d, PathwaySpec):
        return d
    return PathwaySpec([l if isinstance(l, LayerSpec) else LayerSpec(**l) for l in d["layers"]])


def conv(features: int) -> LayerSpec:
    return LayerSpec("conv", features)


def res_a() -> LayerSpec:
    return LayerSpec("res_a")


def res_b(bottleneck: int) -> LayerSpec:
    return LayerSpec("res_b", bottleneck=bottleneck)


# -- primitive ops --------------------------------------------------------------
# Internal tensors are channel-major, ``(C, N, D, H, W)``, so that im2col
# copies run along contiguous W rows.

def _im2col(x: np.ndarray) -> np.ndarray:
    c, n, d, h, w = x.shape
    win = sliding_window_view(x, (3, 3, 3), axis=(2, 3, 4))
    win = win.transpose(0, 5, 6, 7, 1, 2, 3, 4)
    return win.reshape(c * 27, n * (d - 2) * (h - 2) * (w - 2))


def _crop(x: np.ndarray, k: int) -> np.ndarray:
    if k == 0:
        return x
    return x[:, :, k:-k, k:-k, k:-k]


def _pad(x: np.ndarray, k: int) -> np.ndarray:
    return np.pad(x, ((0, 0), (0, 0), (k, k), (k, k), (k, k)))


class _Param:
    """A named slice of the flat parameter vector."""

    def __init__(self, shape, fan_in: int, fan_out: int, is_bias: bool = False):
        self.shape = tuple(shape)
        self.size = int(np.prod(shape))
        self.fan_in, self.fan_out = fan_in, fan_out
        self.is_bias = is_bias
        self.offset = 0


class _Conv:
    """3x3x3 valid convolution (``k=3``) or pointwise convolution (``k=1``)."""

    def __init__(self, cin: int, cout: int, k: int = 3, relu: bool = True):
        self.cin, self.cout, self.k, self.relu = cin, cout, k, relu
        taps = k ** 3
        self.w = _Param((cout, cin * taps), cin * taps, cout * taps)
        self.b = _Param((cout, 1), 0, 0, is_bias=True)
        self.params = [self.w, self.b]

    def forward(self, net, x, cache):
        W, b = net.view(self.w), net.view(self.b)
        c, n, d, h, w_ = x.shape
        if cache is None and self.k == 3 and n * d * h * w_ > 2 * _CHUNK:
            return self._forward_chunked(W, b, x)
        if self.k == 3:
            cols = _im2col(x)
            out_shape = (self.cout, n, d - 2, h - 2, w_ - 2)
        else:
            cols = x.reshape(c, -1)
            out_shape = (self.cout, n, d, h, w_)
        z = (W @ cols + b).reshape(out_shape)
        if self.relu:
            z = np.maximum(z, 0.0)
        if cache is not None:
            cache.append((cols, x.shape, z if self.relu else None))
        return z

    def _forward_chunked(self, W, b, x):
        # inference only: bounded im2col buffers stay cache-resident
        c, n, d, h, w_ = x.shape
        out = np.empty((self.cout, n, d - 2, h - 2, w_ - 2), dtype=x.dtype)
        step = max(1, _CHUNK // (n * h * w_))
        for d0 in range(0, d - 2, step):
            d1 = min(d - 2, d0 + step)
            z = (W @ _im2col(x[:, :, d0:d1 + 2]) + b).reshape(out[:, :, d0:d1].shape)
            out[:, :, d0:d1] = np.maximum(z, 0.0) if self.relu else z
        return out

    def backward(self, net, dz, cache, need_dx=True):
        cols, xshape, act = cache.pop()
        if act is not None:
            dz = dz * (act > 0)
        dzm = dz.reshape(self.cout, -1)
        net.gview(self.w)[...] += dzm @ cols.T
        net.gview(self.b)[...] += dzm.sum(axis=1, keepdims=True)
        if not need_dx:
            return None
        W = net.view(self.w)
        if self.k == 1:
            return (W.T @ dzm).reshape(xshape)
        c = self.cin
        wr = W.reshape(self.cout, c, 3, 3, 3)[:, :, ::-1, ::-1, ::-1]
        wr = wr.transpose(1, 0, 2, 3, 4).reshape(c, self.cout * 27)
        return (wr @ _im2col(_pad(dz, 2))).reshape(xshape)


class _ResA:
    """Standard residual block: two 3x3x3 convs plus a centre-cropped skip."""

    def __init__(self, c: int):
        self.c1 = _Conv(c, c, 3, relu=True)
        self.c2 = _Conv(c, c, 3, relu=False)
        self.params = self.c1.params + self.c2.params
        self.cout = c

    def forward(self, net, x, cache):
        z = self.c2.forward(net, self.c1.forward(net, x, cache), cache)
        return _crop(x, 2) + z

    def backward(self, net, dz, cache, need_dx=True):
        g = self.c1.backward(net, self.c2.backward(net, dz, cache), cache, need_dx)
        if not need_dx:
            return None
        g[:, :, 2:-2, 2:-2, 2:-2] += dz
        return g


class _ResB:
    """Bottleneck residual block: 1x1x1 reduce, 3x3x3, 1x1x1 expand."""

    def __init__(self, c: int, b: int):
        self.c1 = _Conv(c, b, 1, relu=True)
        self.c2 = _Conv(b, b, 3, relu=True)
        self.c3 = _Conv(b, c, 1, relu=False)
        self.params = self.c1.params + self.c2.params + self.c3.params
        self.cout = c

    def forward(self, net, x, cache):
        z = self.c1.forward(net, x, cache)
        z = self.c2.forward(net, z, cache)
        z = self.c3.forward(net, z, cache)
        return _crop(x, 1) + z

    def backward(self, net, dz, cache, need_dx=True):
        g = self.c3.backward(net, dz, cache)
        g = self.c2.backward(net, g, cache)
        g = self.c1.backward(net, g, cache, need_dx)
        if not need_dx:
            return None
        g[:, :, 1:-1, 1:-1, 1:-1] += dz
        return g


class _Pathway:
    def __init__(self, spec: PathwaySpec, cin: int = 1):
        self.layers = []
        c = cin
        for ls in spec.layers:
            if ls.kind == "conv":
                layer = _Conv(c, ls.features, 3, relu=True)
            elif ls.kind == "res_a":
                layer = _ResA(c)
            else:
                layer = _ResB(c, ls.bottleneck)
            self.layers.append(layer)
            c = layer.cout
        self.cout = c
        self.params = [p for layer in self.layers for p in layer.params]

    def forward(self, net, x, cache):
        for layer in self.layers:
            x = layer.forward(net, x, cache)
        return x

    def backward(self, net, dz, cache):
        for i, layer in reversed(list(enumerate(self.layers))):
            dz = layer.backward(net, dz, cache, need_dx=i > 0)


class _Dense:
    def __init__(self, cin: int, cout: int):
        self.cin, self.cout = cin, cout
        self.w = _Param((cout, cin), cin, cout)
        self.b = _Param((cout, 1), 0, 0, is_bias=True)
        self.params = [self.w, self.b]


# -- network ----------------------------------------------------------------------

@dataclass
class Batch:
    """Stacked patch batch. ``targets`` has shape ``(N, R, R, R)``."""

    native: np.ndarray
    low: np.ndarray | None = None
    targets: np.ndarray | None = None

    def __len__(self):
        return len(self.native)


@dataclass
class BatchSample:
    native: np.ndarray
    low: np.ndarray | None = None
    target: np.ndarray | int | None = None


def stack_samples(samples: list[BatchSample]) -> Batch:
    native = np.stack([s.native for s in samples])
    low = None if samples[0].low is None else np.stack([s.low for s in samples])
    targets = None
    if samples[0].target is not None:
        targets = np.stack([np.asarray(s.target) for s in samples])
    return Batch(native, low, targets)


class Network:
    def __init__(self, spec: NetworkSpec, dtype=np.float32):
        self.spec = spec
        self.dtype = np.dtype(dtype)
        self.native = _Pathway(spec.native)
        self.low = _Pathway(spec.low) if spec.low is not None else None
        cin = self.native.cout + (self.low.cout if self.low is not None else 0)
        widths = [cin, *spec.hidden, spec.num_classes]
        self.head = [_Dense(a, b) for a, b in zip(widths[:-1], widths[1:])]
        self.param_list = list(self.native.params)
        if self.low is not None:
            self.param_list += self.low.params
        for d in self.head:
            self.param_list += d.params
        off = 0
        for p in self.param_list:
            p.offset = off
            off += p.size
        self.weights = np.zeros(off, dtype=self.dtype)
        self.grad = np.zeros(off, dtype=self.dtype)
        self._cache = None

    # parameter access
    @property
    def num_params(self) -> int:
        return self.weights.size

    def view(self, p: _Param) -> np.ndarray:
        return self.weights[p.offset:p.offset + p.size].reshape(p.shape)

    def gview(self, p: _Param) -> np.ndarray:
        return self.grad[p.offset:p.offset + p.size].reshape(p.shape)

    def decay_mask(self) -> np.ndarray:
        """1 for parameters under L2 decay; the final classifier layer is exempt."""
        mask = np.ones(self.num_params, dtype=self.dtype)
        for p in self.head[-1].params:
            mask[p.offset:p.offset + p.size] = 0
        return mask

    def copy(self) -> "Network":
        other = Network(self.spec, self.dtype)
        other.weights[...] = self.weights
        return other

    def set_weights(self, w: np.ndarray) -> None:
        w = np.asarray(w)
        if w.shape != self.weights.shape:
            raise NetworkError(f"expected {self.weights.shape} weights, got {w.shape}")
        self.weights[...] = w

    # forward / backward
    def forward(self, batch, mode: str = "eval", rng=None) -> np.ndarray:
        """Class probabilities, shape ``(N, R, R, R, num_classes)``.

        In train mode, dropout is sampled from ``rng`` and the activations
        needed by :meth:`backward` are cached.
        """
        if isinstance(batch, list):
            batch = stack_samples(batch)
        spec = self.spec
        if mode not in ("train", "eval"):
            raise NetworkError(f"mode must be 'train' or 'eval', got {mode!r}")
        train = mode == "train"
        x = np.asarray(batch.native, dtype=self.dtype)
        P = spec.native_patch
        if x.ndim != 4 or x.shape[1:] != (P, P, P):
            raise NetworkError(f"native patches must be (N, {P}, {P}, {P}), got {x.shape}")
        cache = [] if train else None
        feats = self.native.forward(self, x[None], cache)
        if self.low is not None:
            if batch.low is None:
                raise NetworkError("network has a low-resolution pathway but batch.low is None")
            xl = np.asarray(batch.low, dtype=self.dtype)
            Pl = spec.low_patch
            if xl.shape != (len(x), Pl, Pl, Pl):
                raise NetworkError(f"low patches must be (N, {Pl}, {Pl}, {Pl}), got {xl.shape}")
            lf = self._upsample(self.low.forward(self, xl[None], cache))
            feats = np.concatenate([feats, lf], axis=0)
        probs = self._head_forward(feats, train, rng, cache)
        self._cache = cache
        return np.moveaxis(probs, 0, -1)

    def _upsample(self, lf):
        idx = self.spec.low_index() + self.spec.low_region // 2
        return lf[:, :, idx][:, :, :, idx][:, :, :, :, idx]

    def _upsample_backward(self, g):
        idx = self.spec.low_index() + self.spec.low_region // 2
        Rl = self.spec.low_region
        out = np.zeros(g.shape[:2] + (Rl, Rl, Rl), dtype=g.dtype)
        R = g.shape[2]
        for a in range(R):
            for b in range(R):
                for c in range(R):
                    out[:, :, idx[a], idx[b], idx[c]] += g[:, :, a, b, c]
        return out

    def _head_forward(self, h, train, rng, cache):
        p = self.spec.dropout
        shape = h.shape[1:]
        h = h.reshape(h.shape[0], -1)
        for i, d in enumerate(self.head):
            mask = None
            if train and p > 0:
                if rng is None:
                    raise NetworkError("train-mode dropout needs an rng")
                mask = (rng.random(h.shape) >= p).astype(self.dtype) / (1.0 - p)
                h = h * mask
            z = self.view(d.w) @ h + self.view(d.b)
            last = i == len(self.head) - 1
            if cache is not None:
                cache.append((h, mask, None if last else z))
            h = z if last else np.maximum(z, 0.0)
        return softmax(h, axis=0).reshape((-1,) + shape)

    def backward(self, targets) -> np.ndarray:
        """Gradient of the mean cross-entropy w.r.t. all weights.

        Consumes the cache left by the preceding train-mode ``forward``.
        """
        cache = self._cache
        if cache is None:
            raise StateError("backward needs a cached train-mode forward pass")
        self._cache = None
        self.grad[...] = 0
        h_last = cache[-1][0]
        d_last = self.head[-1]
        g = softmax(self.view(d_last.w) @ h_last + self.view(d_last.b), axis=0)
        targets = np.asarray(targets).reshape(-1)
        if targets.size != g.shape[1]:
            raise NetworkError(f"expected {g.shape[1]} targets, got {targets.size}")
        count = targets.size
        g[targets, np.arange(count)] -= 1.0
        g /= count
        for i in range(len(self.head) - 1, -1, -1):
            d = self.head[i]
            h, mask, z = cache.pop()
            if z is not None:
                g = g * (z > 0)
            self.gview(d.w)[...] += g @ h.T
            self.gview(d.b)[...] += g.sum(axis=1, keepdims=True)
            g = self.view(d.w).T @ g
            if mask is not None:
                g = g * mask
        R = self.spec.output_region
        g = g.reshape(g.shape[0], -1, R, R, R)
        nf = self.native.cout
        if self.low is not None:
            self.low.backward(self, self._upsample_backward(g[nf:]), cache)
            g = g[:nf]
        self.native.backward(self, g, cache)
        return self.grad.copy()

    # dense inference
    def predict_dense(self, data: np.ndarray, slab: int = 64) -> np.ndarray:
        """Per-voxel class probabilities for a whole volume, shape ``(*dims, K)``.

        Equivalent to running every voxel as the centre of its own patch
        (mirror-reflected borders, eval mode, one output voxel).
        """
        from .grid import mirror_index

        data = np.asarray(data, dtype=self.dtype)
        nx, ny, nz = data.shape
        r = self.spec.native.shrink // 2

        def padded(before, after):
            idx = [mirror_index(np.arange(-before, n + after), n) for n in data.shape]
            return data[np.ix_(*idx)]

        low_feats = None
        if self.low is not None:
            # Each phase of the stride-4 lattice is an ordinary dense pass
            # over a subsampled grid.
            rl = self.spec.low.shrink // 2
            vp = padded(LOW_SCALE * rl, LOW_SCALE * (rl + 1))
            low_feats = np.empty((self.low.cout, nx, ny, nz), dtype=self.dtype)
            S = LOW_SCALE
            for a in range(min(S, nx)):
                for b in range(min(S, ny)):
                    for c in range(min(S, nz)):
                        m = [len(range(o, n, S)) for o, n in zip((a, b, c), (nx, ny, nz))]
                        g = vp[a::S, b::S, c::S][:m[0] + 2 * rl, :m[1] + 2 * rl, :m[2] + 2 * rl]
                        f = self.low.forward(self, g[None, None], None)
                        low_feats[:, a::S, b::S, c::S] = f[:, 0]
        vp = padded(r, r)
        out = np.empty((self.spec.num_classes, nx, ny, nz), dtype=self.dtype)
        for z0 in range(0, nz, slab):
            z1 = min(nz, z0 + slab)
            f = self.native.forward(self, vp[None, None, :, :, z0:z1 + 2 * r], None)
            if low_feats is not None:
                f = np.concatenate([f, low_feats[:, None, :, :, z0:z1]], axis=0)
            out[:, :, :, z0:z1] = self._head_forward(f, False, None, None)[:, 0]
        return np.moveaxis(out, 0, -1)


def softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def cross_entropy(probs, targets) -> float:
    """Mean of ``-log p_target`` over samples and output voxels."""
    probs = np.asarray(probs)
    targets = np.asarray(targets).reshape(probs.shape[:-1])
    p = np.take_along_axis(probs, targets[..., None].astype(np.intp), axis=-1)
    return float(np.mean(-np.log(np.maximum(p, P_FLOOR))))


def count_params(spec: NetworkSpec) -> int:
    """Parameter count by direct summation over the spec's layers."""

    def conv_count(cin, cout, k):
        return cin * cout * k ** 3 + cout

    def pathway(pw: PathwaySpec):
        total, c = 0, 1
        for ls in pw.layers:
            if ls.kind == "conv":
                total += conv_count(c, ls.features, 3)
                c = ls.features
            elif ls.kind == "res_a":
                total += 2 * conv_count(c, c, 3)
            else:
                b = ls.bottleneck
                total += conv_count(c, b, 1) + conv_count(b, b, 3) + conv_count(b, c, 1)
        return total, c

    total, cin = pathway(spec.native)
    if spec.low is not None:
        t, c = pathway(spec.low)
        total += t
        cin += c
    for w in [*spec.hidden, spec.num_classes]:
        total += cin * w + w
        cin = w
    return total


def glorot_init(spec: NetworkSpec, seed: int, dtype=np.float32) -> Network:
    """Uniform Glorot weights in +-sqrt(6 / (fan_in + fan_out)); zero biases."""
    net = Network(spec, dtype)
    rng = np.random.default_rng(seed)
    for p in net.param_list:
        if p.is_bias:
            continue
        limit = np.sqrt(6.0 / (p.fan_in + p.fan_out))
        net.view(p)[...] = rng.uniform(-limit, limit, size=p.shape)
    return net


# -- checkpoints --------------------------------------------------------------------

def save_checkpoint(path, net: Network, velocity: np.ndarray | None = None, extra: dict | None = None) -> None:
    """Write ``magic | u32 len | spec JSON | u64 n | f32 weights | f32 velocity``."""
    meta = {"spec": net.spec.to_dict()}
    if extra:
        meta["extra"] = extra
    text = json.dumps(meta, sort_keys=True).encode("utf-8")
    if velocity is None:
        velocity = np.zeros(net.num_params)
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", len(text)))
        fh.write(text)
        fh.write(struct.pack("<Q", net.num_params))
        fh.write(np.asarray(net.weights, dtype="<f4").tobytes())
        fh.write(np.asarray(velocity, dtype="<f4").tobytes())


def load_checkpoint(path, dtype=np.float32):
    """Returns ``(net, velocity, extra)``."""
    raw = Path(path).read_bytes()
    if raw[:8] != CKPT_MAGIC:
        raise NetworkError(f"{path}: not a checkpoint (bad magic)")
    (n_text,) = struct.unpack_from("<I", raw, 8)
    pos = 12 + n_text
    meta = json.loads(raw[12:pos].decode("utf-8"))
    (n,) = struct.unpack_from("<Q", raw, pos)
    pos += 8
    spec = NetworkSpec.from_dict(meta["spec"])
    net = Network(spec, dtype)
    if n != net.num_params:
        raise NetworkError(f"{path}: {n} weights stored, spec needs {net.num_params}")
    w = np.frombuffer(raw, dtype="<f4", count=n, offset=pos)
    v = np.frombuffer(raw, dtype="<f4", count=n, offset=pos + 4 * n)
    net.weights[...] = w
    return net, v.astype(dtype), meta.get("extra", {})
