"""Lossy transmission of latent vectors and their wire format.

Frame layout (all little-endian)::

    magic   2 bytes  b"LZ"
    version 1 byte   1
    N       uint16   latent length
    mask    ceil(N/8) bytes, bit i of byte i//8 (LSB first) set when element i is present
    values  float32 x popcount(mask), present elements in index order

A wire log is a sequence of frames, each preceded by its byte length as uint32.
"""
import struct
from dataclasses import dataclass

import numpy as np

from .errors import DomainError, FormatError, ShapeError, TruncatedFrameError

WIRE_MAGIC = b"LZ"
WIRE_VERSION = 1
_HEADER = struct.Struct("<2sBH")


@dataclass(eq=False)
class MaskedLatent:
    values: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        self.values = np.array(self.values, dtype=np.float64).reshape(-1)
        self.mask = np.array(self.mask, dtype=bool).reshape(-1)
        if self.values.shape != self.mask.shape:
            raise ShapeError(f"values {self.values.shape} and mask {self.mask.shape} differ")
        if not np.all(np.isfinite(self.values[self.mask])):
            raise DomainError("present elements must be finite")
        self.values[~self.mask] = 0.0

    @property
    def latent_dim(self) -> int:
        return self.values.shape[0]

    @property
    def present_count(self) -> int:
        return int(self.mask.sum())

    def rounded(self) -> "MaskedLatent":
        """Same latent with present values rounded to float32, as on the wire."""
        return MaskedLatent(self.values.astype(np.float32).astype(np.float64), self.mask)

    def __eq__(self, other):
        if not isinstance(other, MaskedLatent):
            return NotImplemented
        return bool(np.array_equal(self.mask, other.mask) and np.array_equal(self.values, other.values))

    def __repr__(self):
        shown = ", ".join(f"{v:g}" if m else "None" for v, m in zip(self.values, self.mask))
        return f"MaskedLatent([{shown}])"


@dataclass(frozen=True)
class ChannelModel:
    kind: str
    missing_rate: float = None
    keep_count: int = None
    seed: int = 0

    def __post_init__(self):
        if self.kind == "bernoulli":
            if self.missing_rate is None or self.keep_count is not None:
                raise DomainError("bernoulli channel takes missing_rate only")
            if not 0.0 <= self.missing_rate <= 1.0:
                raise DomainError(f"missing rate {self.missing_rate} outside [0, 1]")
        elif self.kind == "truncate":
            if self.keep_count is None or self.missing_rate is not None:
                raise DomainError("truncate channel takes keep_count only")
            if self.keep_count < 0:
                raise DomainError("keep_count must be >= 0")
        else:
            raise DomainError(f"unknown channel kind {self.kind!r}")

    @property
    def tag(self) -> str:
        return f"p{self.missing_rate:.2f}" if self.kind == "bernoulli" else f"k{self.keep_count:02d}"

    def masks(self, n: int, latent_dim: int, gen: np.random.Generator) -> np.ndarray:
        if self.kind == "bernoulli":
            return bernoulli_masks(gen, (n, latent_dim), self.missing_rate)
        if self.keep_count > latent_dim:
            raise DomainError(f"keep {self.keep_count} exceeds latent length {latent_dim}")
        m = np.zeros((n, latent_dim), dtype=bool)
        m[:, :self.keep_count] = True
        return m


def _generator(rng):
    return rng.gen if hasattr(rng, "gen") else rng


def bernoulli_masks(gen, shape, rate: float) -> np.ndarray:
    """Presence masks: each element survives independently with probability 1 - rate."""
    if not 0.0 <= rate <= 1.0:
        raise DomainError(f"missing rate {rate} outside [0, 1]")
    return _generator(gen).uniform(size=shape) >= rate


def erase_bernoulli(z, rate: float, rng) -> MaskedLatent:
    z = np.asarray(z, dtype=np.float64)
    return MaskedLatent(z, bernoulli_masks(rng, z.shape, rate))


def truncate_prefix(z, keep: int) -> MaskedLatent:
    z = np.asarray(z, dtype=np.float64)
    if not 0 <= keep <= z.shape[0]:
        raise DomainError(f"keep {keep} outside [0, {z.shape[0]}]")
    mask = np.zeros(z.shape[0], dtype=bool)
    mask[:keep] = True
    return MaskedLatent(z, mask)


def frame_size(latent_dim: int, present: int) -> int:
    return _HEADER.size + (latent_dim + 7) // 8 + 4 * present


def encode_wire(m: MaskedLatent) -> bytes:
    N = m.latent_dim
    if N > 0xFFFF:
        raise DomainError(f"latent length {N} does not fit the 16-bit length field")
    mask_bytes = np.packbits(m.mask, bitorder="little").tobytes()
    payload = m.values[m.mask].astype("<f4").tobytes()
    return _HEADER.pack(WIRE_MAGIC, WIRE_VERSION, N) + mask_bytes + payload


def decode_wire(buf: bytes) -> MaskedLatent:
    if len(buf) < _HEADER.size:
        raise TruncatedFrameError(f"frame of {len(buf)} bytes is shorter than the header")
    magic, version, N = _HEADER.unpack_from(buf, 0)
    if magic != WIRE_MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != WIRE_VERSION:
        raise FormatError(f"unsupported wire version {version}")
    nmask = (N + 7) // 8
    if len(buf) < _HEADER.size + nmask:
        raise TruncatedFrameError("frame ends inside the mask")
    raw = np.frombuffer(buf, dtype=np.uint8, count=nmask, offset=_HEADER.size)
    bits = np.unpackbits(raw, bitorder="little")
    if bits[N:].any():
        raise FormatError("padding bits beyond the latent length are set")
    mask = bits[:N].astype(bool)
    expected = frame_size(N, int(mask.sum()))
    if len(buf) < expected:
        raise TruncatedFrameError(f"frame has {len(buf)} bytes, mask requires {expected}")
    if len(buf) > expected:
        raise FormatError(f"frame has {len(buf) - expected} trailing bytes")
    values = np.zeros(N)
    values[mask] = np.frombuffer(buf, dtype="<f4", count=int(mask.sum()), offset=_HEADER.size + nmask)
    return MaskedLatent(values, mask)


def write_wire_log(path, frames) -> None:
    with open(path, "wb") as fh:
        for frame in frames:
            fh.write(struct.pack("<I", len(frame)))
            fh.write(frame)


def read_wire_log(path) -> list:
    with open(path, "rb") as fh:
        buf = fh.read()
    frames, pos = [], 0
    while pos < len(buf):
        if pos + 4 > len(buf):
            raise TruncatedFrameError(f"{path}: dangling length prefix at byte {pos}")
        (n,) = struct.unpack_from("<I", buf, pos)
        if pos + 4 + n > len(buf):
            raise TruncatedFrameError(f"{path}: frame at byte {pos} runs past end of log")
        frames.append(buf[pos + 4:pos + 4 + n])
        pos += 4 + n
    return frames


def stack(latents) -> tuple:
    """(values, mask) arrays of shape (B, N) from a list of MaskedLatent."""
    return (np.stack([m.values for m in latents]), np.stack([m.mask for m in latents]))
