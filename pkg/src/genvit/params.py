"""Named parameter store with freeze flags and the checkpoint archive format.

Archive layout: a text header followed by a raw little-endian float32 payload.

    genvit-archive v1
    config <n-lines>
    key=value
    ...
    tensors <n-tensors>
    name<TAB>f32<TAB>dim,dim,...<TAB>byte-offset<TAB>trainable|frozen
    ...
    payload <n-bytes>
    <binary>

Tensor lines are sorted by name so the bytes of a checkpoint are a pure
function of its contents.
"""

from __future__ import annotations

import hashlib
from typing import Callable, Iterator

import numpy as np

from .autodiff import Tensor
from .errors import ConfigurationError, InputError

MAGIC = "genvit-archive v1"


def seed_from(*parts) -> int:
    """Stable 63-bit seed derived from string parts (not Python hash())."""
    h = hashlib.sha256(":".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(h[:8], "little") >> 1


class ParameterStore:
    """Named tensors with per-tensor freeze flags.

    Creation is seeded per name, so the same (init_seed, names) always yields
    bit-identical parameters regardless of registration order.
    """

    def __init__(self, init_seed: int = 0, dtype=np.float32):
        self.init_seed = init_seed
        self.dtype = np.dtype(dtype)
        self._tensors: dict[str, Tensor] = {}
        self._frozen: set[str] = set()
        self.config: dict[str, str] = {}

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def names(self) -> list[str]:
        return sorted(self._tensors)

    def get(self, name: str) -> Tensor:
        return self._tensors[name]

    def param(self, name: str, shape: tuple, init: Callable[[np.random.Generator], np.ndarray] | None = None) -> Tensor:
        """Return the named tensor, creating it (seeded by name) if absent."""
        if name in self._tensors:
            t = self._tensors[name]
            if t.data.shape != tuple(shape):
                raise InputError(f"parameter {name}: stored shape {t.data.shape} != requested {tuple(shape)}")
            return t
        rng = np.random.default_rng(seed_from(self.init_seed, name))
        data = init(rng) if init is not None else rng.normal(0.0, 0.02, size=shape)
        arr = np.asarray(data, dtype=self.dtype).reshape(shape)
        t = Tensor(arr, requires_grad=True)
        self._tensors[name] = t
        return t

    def set_array(self, name: str, arr: np.ndarray, frozen: bool = False):
        t = Tensor(np.asarray(arr, dtype=self.dtype), requires_grad=not frozen)
        self._tensors[name] = t
        if frozen:
            self._frozen.add(name)
        return t

    # -- freezing ------------------------------------------------------------

    def freeze(self, prefix: str):
        for name, t in self._tensors.items():
            if name.startswith(prefix):
                self._frozen.add(name)
                t.requires_grad = False

    def unfreeze(self, prefix: str):
        for name, t in self._tensors.items():
            if name.startswith(prefix):
                self._frozen.discard(name)
                t.requires_grad = True

    def is_frozen(self, name: str) -> bool:
        return name in self._frozen

    def trainable(self) -> Iterator[tuple[str, Tensor]]:
        for name in self.names():
            if name not in self._frozen:
                yield name, self._tensors[name]

    def zero_grads(self):
        for t in self._tensors.values():
            t.grad = None

    # -- conversion ------------------------------------------------------------

    def astype(self, dtype) -> "ParameterStore":
        """Copy of the store in another dtype (float64 for gradient checks)."""
        out = ParameterStore(self.init_seed, dtype=dtype)
        out.config = dict(self.config)
        for name in self.names():
            out.set_array(name, self._tensors[name].data.astype(dtype), frozen=name in self._frozen)
        return out

    def clone(self) -> "ParameterStore":
        return self.astype(self.dtype)

    # -- archive io ------------------------------------------------------------

    def save(self, path):
        names = self.names()
        payload = bytearray()
        lines = []
        for name in names:
            arr = np.ascontiguousarray(self._tensors[name].data, dtype="<f4")
            shape = ",".join(str(d) for d in arr.shape)
            flag = "frozen" if name in self._frozen else "trainable"
            lines.append(f"{name}\tf32\t{shape}\t{len(payload)}\t{flag}")
            payload += arr.tobytes()
        header = [MAGIC, f"config {len(self.config)}"]
        header += [f"{k}={self.config[k]}" for k in sorted(self.config)]
        header.append(f"tensors {len(lines)}")
        header += lines
        header.append(f"payload {len(payload)}")
        with open(path, "wb") as f:
            f.write(("\n".join(header) + "\n").encode())
            f.write(bytes(payload))

    @classmethod
    def load(cls, path, dtype=np.float32) -> "ParameterStore":
        with open(path, "rb") as f:
            blob = f.read()
        head_end = 0
        lines = []
        # header is newline-delimited text up to and including the payload line
        while True:
            nl = blob.index(b"\n", head_end)
            line = blob[head_end:nl].decode()
            lines.append(line)
            head_end = nl + 1
            if line.startswith("payload "):
                break
        if lines[0] != MAGIC:
            raise ConfigurationError(f"{path}: not a checkpoint archive")
        store = cls(dtype=dtype)
        i = 1
        n_cfg = int(lines[i].split()[1])
        i += 1
        for _ in range(n_cfg):
            k, v = lines[i].split("=", 1)
            store.config[k] = v
            i += 1
        n_tensors = int(lines[i].split()[1])
        i += 1
        payload = blob[head_end:]
        for _ in range(n_tensors):
            name, dt, shape_s, off_s, flag = lines[i].split("\t")
            i += 1
            if dt != "f32":
                raise ConfigurationError(f"{path}: unsupported dtype {dt}")
            shape = tuple(int(d) for d in shape_s.split(",")) if shape_s else ()
            count = int(np.prod(shape)) if shape else 1
            off = int(off_s)
            arr = np.frombuffer(payload, dtype="<f4", count=count, offset=off).reshape(shape)
            store.set_array(name, arr.astype(dtype), frozen=flag == "frozen")
        return store

    def tensor_bytes(self, prefix: str = "") -> bytes:
        """Raw f32 bytes of all tensors under prefix; for bit-identity checks."""
        out = bytearray()
        for name in self.names():
            if name.startswith(prefix):
                out += np.ascontiguousarray(self._tensors[name].data, dtype="<f4").tobytes()
        return bytes(out)
