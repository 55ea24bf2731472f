"""Append-only kernel value cache.

Keys a resolvent kernel evaluation by (omega re, omega im, side, z, M,
epsilon-schedule hash); values are complex.  Floats are serialised with
float.hex() so a re-read is bit-identical.
"""

from __future__ import annotations

import hashlib

from .errors import InvalidInputError


def _eps_hash(epsilons) -> str:
    h = hashlib.sha256()
    for e in epsilons:
        h.update(float(e).hex().encode())
    return h.hexdigest()[:16]


def make_key(at, z, quad) -> tuple:
    return (
        float(at.omega.real).hex(),
        float(at.omega.imag).hex(),
        at.side,
        int(z[0]),
        int(z[1]),
        int(z[2]),
        int(quad.grid_points),
        _eps_hash(quad.epsilons),
    )


class KernelCache:
    """In-memory table of kernel values, optionally backed by a file.

    The file is append-only: entries are never rewritten, and cache
    invalidation is by key equality only.
    """

    def __init__(self, path=None):
        self._table = {}
        self._path = path
        self._fh = None
        if path is not None:
            try:
                with open(path) as fh:
                    for line in fh:
                        parts = line.rstrip("\n").split("\t")
                        if len(parts) != 10:
                            raise InvalidInputError(f"corrupt cache line: {line!r}")
                        key = (
                            parts[0],
                            parts[1],
                            parts[2],
                            int(parts[3]),
                            int(parts[4]),
                            int(parts[5]),
                            int(parts[6]),
                            parts[7],
                        )
                        self._table[key] = complex(
                            float.fromhex(parts[8]), float.fromhex(parts[9])
                        )
            except FileNotFoundError:
                pass
            self._fh = open(path, "a")

    def __len__(self):
        return len(self._table)

    def lookup(self, at, z, quad):
        return self._table.get(make_key(at, z, quad))

    def store(self, at, z, quad, value: complex):
        key = make_key(at, z, quad)
        if key in self._table:
            return
        self._table[key] = complex(value)
        if self._fh is not None:
            fields = [str(f) for f in key[:3]] + [str(f) for f in key[3:8]]
            fields += [float(value.real).hex(), float(value.imag).hex()]
            self._fh.write("\t".join(fields) + "\n")
            self._fh.flush()

    def close(self):
        if self._fh is not None:
            self._fh.close()
            self._fh = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
