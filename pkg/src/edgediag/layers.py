"""Layer primitives shared by the cloud and edge networks.

Convolution, batch norm and dense layers are registered on the tape as
fused primitives with hand-derived backward rules (cheaper and easier to
audit than composing them from elementwise ops). Convolution is grouped
im2col: patches are gathered into a [groups, N*H'*W', C_g*kh*kw] matrix
and contracted with a batched float64 GEMM, which covers standard,
grouped and depthwise convolutions with a single code path.

Parameters live in a :class:`ParamStore`: an ordered, uniquely named
collection of tensors with per-entry trainable and frozen flags. The
store is the unit of serialization, sharing and freezing; layers hold
references to the same tensors.
"""

from __future__ import annotations

from typing import Iterator, Optional

import numpy as np

from .tensor import ShapeError, Tensor, custom_op, tmean

__all__ = [
    "BuildError",
    "ParamStore",
    "Conv2dLayer",
    "BatchNormLayer",
    "DenseLayer",
    "DepthwiseSeparableBlock",
    "ResidualBlock",
    "global_avg_pool",
    "he_uniform",
]


class BuildError(ValueError):
    """A layer or model was configured inconsistently at build time."""


class _Entry:
    __slots__ = ("tensor", "trainable", "frozen")

    def __init__(self, tensor: Tensor, trainable: bool):
        self.tensor = tensor
        self.trainable = trainable
        self.frozen = False


class ParamStore:
    """Ordered name -> tensor map with trainable/frozen flags.

    Iteration order is insertion order and therefore deterministic for a
    fixed build sequence. Frozen entries are skipped by the optimizer but
    still participate in forward/backward passes.
    """

    def __init__(self):
        self._entries: dict[str, _Entry] = {}

    def add(self, name: str, tensor: Tensor, trainable: bool = True) -> Tensor:
        if name in self._entries:
            raise BuildError(f"duplicate parameter name: {name}")
        tensor.requires_grad = trainable
        self._entries[name] = _Entry(tensor, trainable)
        return tensor

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name].tensor

    def __len__(self) -> int:
        return len(self._entries)

    def names(self) -> list:
        return list(self._entries)

    def items(self) -> Iterator:
        for name, e in self._entries.items():
            yield name, e.tensor

    def is_trainable(self, name: str) -> bool:
        return self._entries[name].trainable

    def is_frozen(self, name: str) -> bool:
        return self._entries[name].frozen

    def freeze_prefix(self, prefix: str) -> int:
        n = 0
        for name, e in self._entries.items():
            if name.startswith(prefix):
                e.frozen = True
                n += 1
        return n

    def optimizable(self) -> list:
        """(name, tensor) pairs the optimizer may update."""
        return [
            (name, e.tensor)
            for name, e in self._entries.items()
            if e.trainable and not e.frozen
        ]

    def element_count(self, trainable_only: bool = True) -> int:
        return sum(
            e.tensor.size
            for e in self._entries.values()
            if e.trainable or not trainable_only
        )

    def snapshot(self) -> dict:
        return {name: e.tensor.data.copy() for name, e in self._entries.items()}


def he_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


# ---------------------------------------------------------------------------
# convolution

def _conv_out_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def _patch_view(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int):
    n, c, _, _ = xp.shape
    sn, sc, sh, sw = xp.strides
    shape = (n, c, ho, wo, kh, kw)
    strides = (sn, sc, sh * stride, sw * stride, sh, sw)
    return np.lib.stride_tricks.as_strided(xp, shape, strides)


class Conv2dLayer:
    """2-D cross-correlation with optional grouping.

    weight: [out_channels, in_channels/groups, kh, kw]; bias: [out] or None.
    Output spatial size is floor((H + 2p - kh)/stride) + 1 per axis.
    """

    def __init__(
        self,
        store: ParamStore,
        name: str,
        in_channels: int,
        out_channels: int,
        kernel,
        stride: int = 1,
        padding: int = 0,
        groups: int = 1,
        bias: bool = False,
        rng: Optional[np.random.Generator] = None,
    ):
        kh, kw = (kernel, kernel) if isinstance(kernel, int) else kernel
        if in_channels % groups != 0 or out_channels % groups != 0:
            raise BuildError(
                f"{name}: channels ({in_channels}->{out_channels}) not divisible by groups={groups}"
            )
        self.name = name
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = (kh, kw)
        self.stride = stride
        self.padding = padding
        self.groups = groups
        rng = rng or np.random.default_rng(0)
        fan_in = (in_channels // groups) * kh * kw
        wshape = (out_channels, in_channels // groups, kh, kw)
        self.weight = store.add(name + ".weight", Tensor(he_uniform(rng, wshape, fan_in)))
        self.bias = (
            store.add(name + ".bias", Tensor(np.zeros(out_channels, dtype=np.float32)))
            if bias
            else None
        )

    def out_shape(self, in_shape) -> tuple:
        c, h, w = in_shape[-3:]
        kh, kw = self.kernel
        ho = _conv_out_size(h, kh, self.stride, self.padding)
        wo = _conv_out_size(w, kw, self.stride, self.padding)
        if ho < 1 or wo < 1:
            raise ShapeError(f"{self.name}: kernel {self.kernel} does not fit input {in_shape}")
        return (self.out_channels, ho, wo)

    def forward(self, x: Tensor) -> Tensor:
        n, c, h, w = x.shape
        if c != self.in_channels:
            raise ShapeError(
                f"conv2d {self.name}: expected {self.in_channels} input channels, got {c}"
            )
        kh, kw = self.kernel
        s, p, g = self.stride, self.padding, self.groups
        co, ho, wo = self.out_shape(x.shape)
        cg = c // g
        og = co // g
        kk = cg * kh * kw

        xp = x.data
        if p:
            xp = np.pad(xp, ((0, 0), (0, 0), (p, p), (p, p)))
        view = _patch_view(xp, kh, kw, s, ho, wo)
        # [G, N*ho*wo, cg*kh*kw] float64 patch matrix
        cols = (
            view.reshape(n, g, cg, ho, wo, kh, kw)
            .transpose(1, 0, 3, 4, 2, 5, 6)
            .reshape(g, n * ho * wo, kk)
            .astype(np.float64)
        )
        w2 = self.weight.data.reshape(g, og, kk).astype(np.float64)
        out_b = cols @ w2.transpose(0, 2, 1)  # [G, N*ho*wo, og]
        out = (
            out_b.reshape(g, n, ho, wo, og)
            .transpose(1, 0, 4, 2, 3)
            .reshape(n, co, ho, wo)
        )
        if self.bias is not None:
            out = out + self.bias.data.astype(np.float64).reshape(1, co, 1, 1)

        bias_t = self.bias
        in_shape = (n, c, h, w)
        pad_shape = xp.shape

        def bwd(gout):
            g_b = (
                gout.reshape(n, g, og, ho, wo)
                .transpose(1, 0, 3, 4, 2)
                .reshape(g, n * ho * wo, og)
            )
            dw = (g_b.transpose(0, 2, 1) @ cols).reshape(self.weight.data.shape)
            dcols = g_b @ w2  # [G, N*ho*wo, kk]
            dpatch = (
                dcols.reshape(g, n, ho, wo, cg, kh, kw)
                .transpose(1, 0, 4, 2, 3, 5, 6)
                .reshape(n, c, ho, wo, kh, kw)
            )
            dxp = np.zeros(pad_shape, dtype=np.float64)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + s * ho:s, j:j + s * wo:s] += dpatch[:, :, :, :, i, j]
            dx = dxp[:, :, p:p + in_shape[2], p:p + in_shape[3]] if p else dxp
            grads = [dx, dw]
            if bias_t is not None:
                grads.append(gout.sum(axis=(0, 2, 3)))
            return grads

        inputs = (x, self.weight) + ((bias_t,) if bias_t is not None else ())
        return custom_op("conv2d", inputs, out, bwd)


# ---------------------------------------------------------------------------
# batch normalization

class BatchNormLayer:
    """Per-channel batch normalization over [N, C, H, W].

    Train mode normalizes with batch statistics and updates the running
    estimates (unbiased variance, momentum blend). Eval mode is a fixed
    affine map using the running statistics. A frozen layer behaves as
    eval regardless of the training flag and never updates its stats.
    """

    def __init__(
        self,
        store: ParamStore,
        name: str,
        channels: int,
        momentum: float = 0.1,
        eps: float = 1e-5,
    ):
        self.name = name
        self.channels = channels
        self.momentum = momentum
        self.eps = eps
        self.training = True
        self.frozen = False
        self.gamma = store.add(name + ".gamma", Tensor(np.ones(channels, dtype=np.float32)))
        self.beta = store.add(name + ".beta", Tensor(np.zeros(channels, dtype=np.float32)))
        self.running_mean = store.add(
            name + ".running_mean", Tensor(np.zeros(channels, dtype=np.float32)), trainable=False
        )
        self.running_var = store.add(
            name + ".running_var", Tensor(np.ones(channels, dtype=np.float32)), trainable=False
        )

    def set_training(self, flag: bool) -> None:
        if not self.frozen:
            self.training = flag

    def freeze(self) -> None:
        self.frozen = True
        self.training = False

    def forward(self, x: Tensor) -> Tensor:
        if x.data.ndim != 4 or x.shape[1] != self.channels:
            raise ShapeError(f"batchnorm {self.name}: bad input shape {list(x.shape)}")
        x64 = x.data.astype(np.float64)
        gamma64 = self.gamma.data.astype(np.float64)
        if self.training:
            m = x.data.shape[0] * x.data.shape[2] * x.data.shape[3]
            if m < 2:
                raise ShapeError(f"batchnorm {self.name}: needs >1 value per channel in train mode")
            mean = x64.mean(axis=(0, 2, 3))
            var = x64.var(axis=(0, 2, 3))
            rm = (1 - self.momentum) * self.running_mean.data + self.momentum * mean
            rv = (1 - self.momentum) * self.running_var.data + self.momentum * var * m / (m - 1)
            self.running_mean.data[...] = rm.astype(np.float32)
            self.running_var.data[...] = rv.astype(np.float32)
        else:
            mean = self.running_mean.data.astype(np.float64)
            var = self.running_var.data.astype(np.float64)
        invstd = 1.0 / np.sqrt(var + self.eps)
        xn = (x64 - mean.reshape(1, -1, 1, 1)) * invstd.reshape(1, -1, 1, 1)
        out = xn * gamma64.reshape(1, -1, 1, 1) + self.beta.data.astype(np.float64).reshape(
            1, -1, 1, 1
        )
        train_stats = self.training

        def bwd(g):
            dgamma = np.sum(g * xn, axis=(0, 2, 3))
            dbeta = np.sum(g, axis=(0, 2, 3))
            dxn = g * gamma64.reshape(1, -1, 1, 1)
            if train_stats:
                cnt = g.shape[0] * g.shape[2] * g.shape[3]
                dx = (
                    invstd.reshape(1, -1, 1, 1)
                    * (
                        dxn
                        - dxn.mean(axis=(0, 2, 3), keepdims=True)
                        - xn * (dxn * xn).mean(axis=(0, 2, 3), keepdims=True)
                    )
                )
                del cnt
            else:
                dx = dxn * invstd.reshape(1, -1, 1, 1)
            return dx, dgamma, dbeta

        return custom_op("batchnorm", (x, self.gamma, self.beta), out, bwd)


# ---------------------------------------------------------------------------
# dense

class DenseLayer:
    """Affine map y = x W^T + b with weight [out, in]."""

    def __init__(
        self,
        store: ParamStore,
        name: str,
        in_features: int,
        out_features: int,
        bias: bool = True,
        rng: Optional[np.random.Generator] = None,
    ):
        self.name = name
        self.in_features = in_features
        self.out_features = out_features
        rng = rng or np.random.default_rng(0)
        self.weight = store.add(
            name + ".weight",
            Tensor(he_uniform(rng, (out_features, in_features), in_features)),
        )
        self.bias = (
            store.add(name + ".bias", Tensor(np.zeros(out_features, dtype=np.float32)))
            if bias
            else None
        )

    def forward(self, x: Tensor) -> Tensor:
        if x.data.ndim != 2 or x.shape[1] != self.in_features:
            raise ShapeError(
                f"dense {self.name}: expected [N, {self.in_features}], got {list(x.shape)}"
            )
        x64 = x.data.astype(np.float64)
        w64 = self.weight.data.astype(np.float64)
        out = x64 @ w64.T
        bias_t = self.bias
        if bias_t is not None:
            out = out + bias_t.data.astype(np.float64)

        def bwd(g):
            grads = [g @ w64, g.T @ x64]
            if bias_t is not None:
                grads.append(g.sum(axis=0))
            return grads

        inputs = (x, self.weight) + ((bias_t,) if bias_t is not None else ())
        return custom_op("dense", inputs, out, bwd)


# ---------------------------------------------------------------------------
# composite blocks

class DepthwiseSeparableBlock:
    """Depthwise 3x3 (per-channel) followed by pointwise 1x1, BN+ReLU after each."""

    def __init__(
        self,
        store: ParamStore,
        name: str,
        in_channels: int,
        out_channels: int,
        stride: int = 1,
        kernel: int = 3,
        rng: Optional[np.random.Generator] = None,
    ):
        self.name = name
        pad = (kernel - 1) // 2
        self.depthwise = Conv2dLayer(
            store, name + ".dw", in_channels, in_channels, kernel,
            stride=stride, padding=pad, groups=in_channels, rng=rng,
        )
        self.dw_bn = BatchNormLayer(store, name + ".dw_bn", in_channels)
        self.pointwise = Conv2dLayer(
            store, name + ".pw", in_channels, out_channels, 1, rng=rng
        )
        self.pw_bn = BatchNormLayer(store, name + ".pw_bn", out_channels)

    def forward(self, x: Tensor) -> Tensor:
        from .tensor import relu

        h = relu(self.dw_bn.forward(self.depthwise.forward(x)))
        return relu(self.pw_bn.forward(self.pointwise.forward(h)))

    def bn_layers(self):
        return [self.dw_bn, self.pw_bn]

    def out_shape(self, in_shape) -> tuple:
        return self.pointwise.out_shape(self.depthwise.out_shape(in_shape))


class ResidualBlock:
    """conv-BN-ReLU-conv-BN plus shortcut, ReLU after the join.

    The shortcut is the identity when shapes already match; otherwise a
    1x1 projection conv (with BN) is built. Passing projection="none"
    when a projection would be required is a build-time error.
    """

    def __init__(
        self,
        store: ParamStore,
        name: str,
        in_channels: int,
        out_channels: int,
        stride: int = 1,
        projection: str = "auto",
        rng: Optional[np.random.Generator] = None,
    ):
        self.name = name
        self.conv1 = Conv2dLayer(
            store, name + ".conv1", in_channels, out_channels, 3,
            stride=stride, padding=1, rng=rng,
        )
        self.bn1 = BatchNormLayer(store, name + ".bn1", out_channels)
        self.conv2 = Conv2dLayer(
            store, name + ".conv2", out_channels, out_channels, 3, padding=1, rng=rng
        )
        self.bn2 = BatchNormLayer(store, name + ".bn2", out_channels)
        needs_proj = in_channels != out_channels or stride != 1
        if needs_proj and projection == "none":
            raise BuildError(
                f"{name}: shortcut needs a projection ({in_channels}->{out_channels}, stride {stride})"
            )
        if needs_proj:
            self.proj = Conv2dLayer(
                store, name + ".proj", in_channels, out_channels, 1, stride=stride, rng=rng
            )
            self.proj_bn = BatchNormLayer(store, name + ".proj_bn", out_channels)
        else:
            self.proj = None
            self.proj_bn = None

    def forward(self, x: Tensor) -> Tensor:
        from .tensor import add, relu

        h = relu(self.bn1.forward(self.conv1.forward(x)))
        h = self.bn2.forward(self.conv2.forward(h))
        sc = x if self.proj is None else self.proj_bn.forward(self.proj.forward(x))
        return relu(add(h, sc))

    def bn_layers(self):
        bns = [self.bn1, self.bn2]
        if self.proj_bn is not None:
            bns.append(self.proj_bn)
        return bns

    def out_shape(self, in_shape) -> tuple:
        return self.conv2.out_shape(self.conv1.out_shape(in_shape))


def global_avg_pool(x: Tensor) -> Tensor:
    """[N, C, H, W] -> [N, C] spatial mean."""
    if x.data.ndim != 4:
        raise ShapeError(f"global_avg_pool expects [N,C,H,W], got {list(x.shape)}")
    return tmean(x, axis=(2, 3))
