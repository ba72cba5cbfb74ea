"""Parameter store and small neural-net building blocks."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .errors import ConfigError


class ParamStore:
    """Flat collection of named parameters, keyed by dotted path."""

    def __init__(self, seed: int = 0, dtype=np.float32):
        self.rng = np.random.default_rng(seed)
        self.dtype = np.dtype(dtype)
        self._params: dict[str, ad.Tensor] = {}

    def param(self, name: str, shape, init) -> ad.Tensor:
        if name in self._params:
            raise ConfigError(f"duplicate parameter path: {name}")
        data = self._init_array(shape, init)
        t = ad.Tensor(data, requires_grad=True)
        self._params[name] = t
        return t

    def _init_array(self, shape, init):
        shape = tuple(shape)
        if isinstance(init, np.ndarray):
            if init.shape != shape:
                raise ConfigError(f"init array shape {init.shape} != {shape}")
            return init.astype(self.dtype)
        if init == "zeros":
            return np.zeros(shape, dtype=self.dtype)
        if init == "ones":
            return np.ones(shape, dtype=self.dtype)
        if isinstance(init, tuple) and init[0] == "normal":
            return (self.rng.standard_normal(shape) * init[1]).astype(self.dtype)
        if init == "glorot":
            fan_in, fan_out = _fans(shape)
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            return self.rng.uniform(-limit, limit, size=shape).astype(self.dtype)
        if init == "he":
            fan_in, _ = _fans(shape)
            return (self.rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(self.dtype)
        raise ConfigError(f"unknown init spec: {init!r}")

    def __getitem__(self, name: str) -> ad.Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def named(self):
        return self._params.items()

    def n_params(self) -> int:
        return sum(int(t.data.size) for t in self._params.values())

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self._params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self._params) - set(state)
        extra = set(state) - set(self._params)
        if missing or extra:
            raise ConfigError(f"state dict mismatch: missing={sorted(missing)[:4]} extra={sorted(extra)[:4]}")
        for k, t in self._params.items():
            arr = np.asarray(state[k], dtype=self.dtype)
            if arr.shape != t.data.shape:
                raise ConfigError(f"param {k}: shape {arr.shape} != {t.data.shape}")
            t.data = arr.copy()


def _fans(shape):
    if len(shape) == 2:  # (din, dout)
        return shape[0], shape[1]
    if len(shape) == 4:  # (kh, kw, cin, cout)
        rf = shape[0] * shape[1]
        return rf * shape[2], rf * shape[3]
    n = int(np.prod(shape))
    return n, n


class Linear:
    def __init__(self, store: ParamStore, name: str, din: int, dout: int, bias=True, init="glorot"):
        self.w = store.param(f"{name}.w", (din, dout), init)
        self.b = store.param(f"{name}.b", (dout,), "zeros") if bias else None

    def __call__(self, x):
        y = ad.matmul(x, self.w)
        return y if self.b is None else ad.add(y, self.b)


class Conv2d:
    def __init__(
        self,
        store: ParamStore,
        name: str,
        k: int,
        cin: int,
        cout: int,
        stride=1,
        padding=None,
        pad_mode="edge",
        init="he",
        bias=True,
    ):
        self.stride = stride
        self.padding = (k - 1) // 2 if padding is None else padding
        self.pad_mode = pad_mode
        self.w = store.param(f"{name}.w", (k, k, cin, cout), init)
        self.b = store.param(f"{name}.b", (cout,), "zeros") if bias else None

    def __call__(self, x):
        return ad.conv2d(x, self.w, self.b, stride=self.stride, padding=self.padding, pad_mode=self.pad_mode)


class LayerNorm:
    def __init__(self, store: ParamStore, name: str, c: int):
        self.g = store.param(f"{name}.g", (c,), "ones")
        self.b = store.param(f"{name}.b", (c,), "zeros")

    def __call__(self, x):
        return ad.layer_norm(x, self.g, self.b)


class InstanceNorm2d:
    def __init__(self, store: ParamStore, name: str, c: int):
        self.g = store.param(f"{name}.g", (c,), "ones")
        self.b = store.param(f"{name}.b", (c,), "zeros")

    def __call__(self, x):
        return ad.instance_norm2d(x, self.g, self.b)


class FFN:
    """Two-layer MLP with GELU; output projection zero-initialized so the
    residual branch starts as the identity."""

    def __init__(self, store: ParamStore, name: str, c: int, hidden: int | None = None, zero_out=True):
        hidden = 2 * c if hidden is None else hidden
        self.fc1 = Linear(store, f"{name}.fc1", c, hidden)
        self.fc2 = Linear(store, f"{name}.fc2", hidden, c, init="zeros" if zero_out else "glorot")

    def __call__(self, x):
        return self.fc2(ad.gelu(self.fc1(x)))


class MLP3:
    """Three-layer ReLU MLP used by the output decoders."""

    def __init__(self, store: ParamStore, name: str, din: int, hidden: int, dout: int, out_scale=0.01):
        self.fc1 = Linear(store, f"{name}.fc1", din, hidden, init="he")
        self.fc2 = Linear(store, f"{name}.fc2", hidden, hidden, init="he")
        self.fc3 = Linear(store, f"{name}.fc3", hidden, dout, init=("normal", out_scale))

    def __call__(self, x):
        return self.fc3(ad.relu(self.fc2(ad.relu(self.fc1(x)))))
