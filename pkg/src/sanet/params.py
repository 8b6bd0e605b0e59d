"""Named trainable tensors, the Adam update, and checkpoint serialization.

Checkpoint layout (little-endian binary):
    magic    9 bytes  b"SANETCKPT"
    version  u32      currently 1
    count    u32      number of tensors
    per tensor:
        name_len u32, name (UTF-8), rank u32, extents rank*u32,
        data prod(extents) * f32

Optimizer state rides along as tensors under the reserved ``opt/`` prefix
(first and second moments, step counter); model metadata under ``meta/``.
"""

from __future__ import annotations

import struct

import numpy as np

from .autodiff import NumericError, Tensor

CHECKPOINT_MAGIC = b"SANETCKPT"
CHECKPOINT_VERSION = 1


class ParamStore:
    """Ordered name -> Tensor map with attached Adam moment buffers."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self.adam_m: dict[str, np.ndarray] = {}
        self.adam_v: dict[str, np.ndarray] = {}
        self.step = 0

    def add(self, name: str, value) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = Tensor(value, requires_grad=True, name=name)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self):
        return list(self._params)

    def tensors(self):
        return list(self._params.values())

    def items(self):
        return self._params.items()

    def count(self) -> int:
        """Total number of trainable scalars."""
        return sum(t.value.size for t in self._params.values())

    def count_by_prefix(self, depth=1) -> dict[str, int]:
        """Scalar counts grouped by the first ``depth`` name components."""
        out: dict[str, int] = {}
        for name, t in self._params.items():
            key = "/".join(name.split("/")[:depth])
            out[key] = out.get(key, 0) + t.value.size
        return out

    def zero_grads(self) -> None:
        for t in self._params.values():
            t.grad = None

    def gradients(self) -> dict[str, np.ndarray]:
        """Current gradients; missing ones are zeros (non-participating)."""
        out = {}
        for name, t in self._params.items():
            out[name] = t.grad if t.grad is not None else np.zeros_like(t.value)
        return out


def adam_step(store: ParamStore, grads: dict[str, np.ndarray], lr: float,
              beta1=0.9, beta2=0.999, eps=1e-8) -> None:
    """Standard Adam update, applied in place over the whole store.

    Aborts without touching any parameter if a gradient is non-finite,
    naming the offending tensor.
    """
    for name in store.names():
        g = grads.get(name)
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name!r}")
        if g.shape != store[name].value.shape:
            raise NumericError(f"gradient shape mismatch for {name!r}: "
                               f"{g.shape} vs {store[name].value.shape}")
    store.step += 1
    t = store.step
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for name, p in store.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.value)
        m = store.adam_m.get(name)
        if m is None:
            m = np.zeros_like(p.value)
            store.adam_m[name] = m
            store.adam_v[name] = np.zeros_like(p.value)
        v = store.adam_v[name]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * (g * g)
        mhat = m / bc1
        vhat = v / bc2
        p.value -= (lr * mhat / (np.sqrt(vhat) + eps)).astype(p.value.dtype,
                                                              copy=False)


# ---------------------------------------------------------------------------
# checkpoint file I/O
# ---------------------------------------------------------------------------

def save_tensors(path, tensors: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(tensors)))
        for name, arr in tensors.items():
            arr = np.ascontiguousarray(arr, dtype=np.float32)
            nb = name.encode("utf-8")
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", arr.ndim))
            for ext in arr.shape:
                f.write(struct.pack("<I", ext))
            f.write(arr.astype("<f4", copy=False).tobytes())


def load_tensors(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        magic = f.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file (bad magic)")
        version, count = struct.unpack("<II", f.read(8))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        out = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<I", f.read(4))
            name = f.read(nlen).decode("utf-8")
            (rank,) = struct.unpack("<I", f.read(4))
            shape = struct.unpack(f"<{rank}I", f.read(4 * rank)) if rank else ()
            n = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(f.read(4 * n), dtype="<f4").reshape(shape)
            out[name] = data.copy()
        return out


def save_checkpoint(path, store: ParamStore, meta: dict[str, float] | None = None,
                    include_optimizer=True) -> None:
    tensors: dict[str, np.ndarray] = {}
    for name, t in store.items():
        tensors[name] = t.value
    if include_optimizer:
        for name in store.names():
            if name in store.adam_m:
                tensors[f"opt/adam_m/{name}"] = store.adam_m[name]
                tensors[f"opt/adam_v/{name}"] = store.adam_v[name]
        tensors["opt/step"] = np.array([store.step], dtype=np.float32)
    for key, val in (meta or {}).items():
        tensors[f"meta/{key}"] = np.asarray(val, dtype=np.float32)
    save_tensors(path, tensors)


def load_into_store(path, store: ParamStore) -> dict[str, np.ndarray]:
    """Load a checkpoint into an already-built store.

    The store defines the expected tensor set; any expected tensor missing
    from the file is an error listing the missing names. Returns the
    ``meta/`` tensors.
    """
    loaded = load_tensors(path)
    missing = [n for n in store.names() if n not in loaded]
    if missing:
        raise ValueError(f"{path}: checkpoint is missing tensors: "
                         + ", ".join(sorted(missing)))
    for name, t in store.items():
        arr = loaded[name]
        if arr.shape != t.value.shape:
            raise ValueError(f"{path}: shape mismatch for {name!r}: "
                             f"{arr.shape} vs {t.value.shape}")
        t.value = arr.astype(t.value.dtype)
    for name in store.names():
        mk, vk = f"opt/adam_m/{name}", f"opt/adam_v/{name}"
        if mk in loaded:
            store.adam_m[name] = loaded[mk].astype(store[name].value.dtype)
            store.adam_v[name] = loaded[vk].astype(store[name].value.dtype)
    if "opt/step" in loaded:
        store.step = int(loaded["opt/step"][0])
    return {k[len("meta/"):]: v for k, v in loaded.items()
            if k.startswith("meta/")}
