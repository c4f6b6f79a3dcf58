"""Procedural unlabeled-sample source for calibration and distillation.

Samples come from a fixed set of identity prototypes in a latent space:
each draw picks an identity uniformly, perturbs its prototype with
Gaussian noise, and pushes the latent through a fixed random linear map
followed by tanh. The tanh keeps inputs in (-1, 1), which keeps first-layer
activation ranges bounded and calibration well-posed. Labels exist only on
the teacher-pretraining path; the distillation path never sees them.

The stream interface (batches of row vectors) is the integration boundary:
any other generator producing batches of the same width can be swapped in.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .errors import DomainError, FormatError
from .tensor_core import Tensor, matmul

BATCH_MAGIC = b"QFDB"
BATCH_VERSION = 1
_FLAG_LABELS = 0x0001


def derive_seed(master: int, label: str) -> int:
    """Stable named sub-seed so components draw from isolated streams."""
    return zlib.crc32(f"{master}:{label}".encode("utf-8")) & 0x7FFFFFFF


@dataclass(frozen=True)
class IdentitySpace:
    """Fixed identity prototypes plus the latent-to-input mixing map."""

    n_identities: int
    latent_dim: int
    input_dim: int
    noise_sigma: float
    seed: int
    prototypes: np.ndarray  # [n_identities, latent_dim], unit-norm rows
    mixing: np.ndarray      # [latent_dim, input_dim]

    def __post_init__(self):
        for name in ("prototypes", "mixing"):
            arr = getattr(self, name)
            arr = np.ascontiguousarray(arr, dtype=np.float32)
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)


@dataclass(frozen=True)
class Batch:
    """One batch of inputs; labels are present only on the pretraining path."""

    inputs: Tensor
    labels: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.inputs.rank != 2:
            raise DomainError(f"batch inputs must be rank 2, got {self.inputs.shape}")
        if self.labels is not None:
            object.__setattr__(self, "labels", tuple(int(l) for l in self.labels))
            if len(self.labels) != self.inputs.shape[0]:
                raise DomainError(
                    f"{len(self.labels)} labels for batch of {self.inputs.shape[0]}")

    @property
    def size(self) -> int:
        return self.inputs.shape[0]


def make_identity_space(n_identities: int, latent_dim: int, input_dim: int,
                        noise_sigma: float, seed: int) -> IdentitySpace:
    """Deterministically construct an identity space from a seed.

    Prototypes are standard-normal rows normalized to unit length; the
    mixing map is a standard-normal matrix (drawn after the prototypes,
    so the stream layout is part of the determinism contract).
    """
    if n_identities < 2:
        raise DomainError(f"need at least 2 identities, got {n_identities}")
    if latent_dim < 2 or input_dim < 2:
        raise DomainError(f"dims must be >= 2, got latent={latent_dim} input={input_dim}")
    if noise_sigma < 0:
        raise DomainError(f"noise_sigma must be non-negative, got {noise_sigma}")
    rng = np.random.default_rng(seed)
    protos = rng.standard_normal((n_identities, latent_dim))
    protos /= np.linalg.norm(protos, axis=1, keepdims=True)
    mixing = rng.standard_normal((latent_dim, input_dim))
    return IdentitySpace(n_identities=n_identities, latent_dim=latent_dim,
                         input_dim=input_dim, noise_sigma=float(noise_sigma),
                         seed=int(seed), prototypes=protos.astype(np.float32),
                         mixing=mixing.astype(np.float32))


def render_latents(space: IdentitySpace, latents: np.ndarray) -> Tensor:
    """Map latent rows through the fixed mixing matrix and tanh."""
    mixed = matmul(Tensor(latents.astype(np.float32)), Tensor._wrap(space.mixing.copy()))
    return Tensor._wrap(np.tanh(mixed.data))


def _draw(space: IdentitySpace, m: int, rng: np.random.Generator) -> tuple[Tensor, np.ndarray]:
    ids = rng.integers(0, space.n_identities, size=m)
    noise = rng.standard_normal((m, space.latent_dim)) * space.noise_sigma
    latents = space.prototypes[ids].astype(np.float64) + noise
    return render_latents(space, latents), ids


def sample_unlabeled(space: IdentitySpace, m: int, seed: int) -> Batch:
    """Batch of m inputs with identity labels discarded."""
    if m < 1:
        raise DomainError(f"batch size must be >= 1, got {m}")
    inputs, _ = _draw(space, m, np.random.default_rng(seed))
    return Batch(inputs=inputs, labels=None)


def sample_labeled(space: IdentitySpace, m: int, seed: int) -> Batch:
    """Like sample_unlabeled with the same seed, but labels retained."""
    if m < 1:
        raise DomainError(f"batch size must be >= 1, got {m}")
    inputs, ids = _draw(space, m, np.random.default_rng(seed))
    return Batch(inputs=inputs, labels=tuple(int(i) for i in ids))


def sample_for_identities(space: IdentitySpace, ids, seed: int) -> Tensor:
    """One input per requested identity index, with independent noise."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size == 0:
        raise DomainError("no identities requested")
    if ids.min() < 0 or ids.max() >= space.n_identities:
        raise DomainError(f"identity index out of range [0, {space.n_identities})")
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal((ids.size, space.latent_dim)) * space.noise_sigma
    latents = space.prototypes[ids].astype(np.float64) + noise
    return render_latents(space, latents)


def batch_stream(space: IdentitySpace, batch_size: int, seed: int,
                 labeled: bool = False) -> Iterator[Batch]:
    """Endless deterministic stream of batches.

    Batch i is a pure function of (space, seed, i), so a producer thread
    may run ahead of the consumer without affecting results.
    """
    i = 0
    while True:
        batch_seed = derive_seed(seed, f"batch-{i}")
        yield (sample_labeled if labeled else sample_unlabeled)(space, batch_size, batch_seed)
        i += 1


# -- raw batch file format ----------------------------------------------------
#
# magic "QFDB", version u16, flags u16 (bit0 = labels present), M u32,
# input_dim u32, then M*input_dim little-endian float32, then (if flagged)
# M little-endian u32 labels.

_HEADER = struct.Struct("<4sHHII")


def save_batch(batch: Batch, path) -> None:
    """Write a batch in the raw QFDB format."""
    m, dim = batch.inputs.shape
    flags = _FLAG_LABELS if batch.labels is not None else 0
    blob = bytearray(_HEADER.pack(BATCH_MAGIC, BATCH_VERSION, flags, m, dim))
    blob += batch.inputs.data.astype("<f4").tobytes()
    if batch.labels is not None:
        blob += np.asarray(batch.labels, dtype="<u4").tobytes()
    with open(path, "wb") as fh:
        fh.write(blob)


def load_tensor_file(path) -> Batch:
    """Read a raw QFDB batch file; labels are restored when flagged."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _HEADER.size:
        raise FormatError("file shorter than header", field="header", offset=len(blob))
    magic, version, flags, m, dim = _HEADER.unpack_from(blob, 0)
    if magic != BATCH_MAGIC:
        raise FormatError(f"bad magic {magic!r}", field="magic", offset=0)
    if version != BATCH_VERSION:
        raise FormatError(f"unsupported version {version}", field="version", offset=4)
    if m == 0:
        raise DomainError("batch file contains no samples")
    offset = _HEADER.size
    n_floats = m * dim
    need = n_floats * 4
    if len(blob) < offset + need:
        raise FormatError("truncated input payload", field="inputs", offset=len(blob))
    inputs = np.frombuffer(blob, dtype="<f4", count=n_floats, offset=offset).reshape(m, dim)
    offset += need
    labels = None
    if flags & _FLAG_LABELS:
        if len(blob) < offset + m * 4:
            raise FormatError("truncated label payload", field="labels", offset=len(blob))
        labels = tuple(int(v) for v in np.frombuffer(blob, dtype="<u4", count=m, offset=offset))
        offset += m * 4
    if len(blob) != offset:
        raise FormatError(f"{len(blob) - offset} trailing bytes", field="trailer", offset=offset)
    return Batch(inputs=Tensor(inputs), labels=labels)
