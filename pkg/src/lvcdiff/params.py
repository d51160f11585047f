"""Named parameter collections."""
from __future__ import annotations

import zlib

import numpy as np

from .autograd import Parameter


class ParamStore(dict):
    """Ordered ``name -> Parameter`` mapping."""

    def add(self, name, value):
        if name in self:
            raise KeyError(f"duplicate parameter {name!r}")
        self[name] = Parameter(value, name)
        return self[name]

    def zero_grad(self):
        for p in self.values():
            p.zero_grad()

    def num_parameters(self):
        return int(sum(p.data.size for p in self.values()))

    def state(self):
        return {name: p.data.copy() for name, p in self.items()}

    def load_state(self, arrays):
        for name, p in self.items():
            if name not in arrays:
                raise KeyError(f"missing tensor {name!r}")
            value = np.asarray(arrays[name], dtype=np.float64)
            if value.shape != p.data.shape:
                raise ValueError(f"tensor {name!r}: expected shape {p.data.shape}, got {value.shape}")
            p.data[...] = value

    def checksum(self):
        crc = 0
        for name, p in self.items():
            crc = zlib.crc32(name.encode(), crc)
            crc = zlib.crc32(np.ascontiguousarray(p.data).tobytes(), crc)
        return crc


def uniform_init(rng, shape, fan_in):
    bound = np.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)
