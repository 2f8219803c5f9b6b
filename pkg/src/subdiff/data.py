"""Synthetic mixture data, CIFAR-10 ingestion, metrics and binary file formats.

Matrix files (``SDMX``) and checkpoints (``SDIF``) are little-endian;
integers are unsigned, reals are IEEE float64.
"""

from __future__ import annotations

import io
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from subdiff.scorenet import GmmSpec, ScoreNet
from subdiff.sde import VEProcess
from subdiff.subspace import DownsamplingChain, ExplicitChain, ImageShape, SubspaceChain


class FormatError(ValueError):
    """Malformed, truncated or unsupported file."""


# ---------------------------------------------------------------- synthetic data


@dataclass(frozen=True)
class SyntheticSpec:
    dim: int = 30
    components: int = 100
    component_sd: float = 0.05
    train_size: int = 64000
    targets: tuple[tuple[int, float], ...] = ((6, 0.50), (11, 0.75))
    seed: int = 0

    def __post_init__(self):
        counts = [c for c, _ in self.targets]
        fracs = [f for _, f in self.targets]
        if len(self.targets) != 2:
            raise ValueError("exactly two explained-variance targets are supported")
        if not (0 < counts[0] < counts[1] < self.dim):
            raise ValueError("target PC counts must increase and stay below dim")
        if not (0 < fracs[0] < fracs[1] < 1):
            raise ValueError("target fractions must increase inside (0, 1)")


def explained_variance(points) -> np.ndarray:
    """Cumulative explained-variance ratio of the principal components of ``points``."""
    c = points - points.mean(axis=0)
    w = np.linalg.eigvalsh(c.T @ c)[::-1]
    return np.cumsum(w) / w.sum()


def _rescale_centers(centers, spec: SyntheticSpec):
    # Gains on PC groups [0, n6) and [n6, n11); the remaining axes stay fixed.
    # The group sums must satisfy a^2 S1 = p6 Tot, b^2 S2 = (p11 - p6) Tot,
    # S3 = (1 - p11) Tot, which has the closed-form solution below.
    (n6, p6), (n11, p11) = spec.targets
    mean = centers.mean(axis=0)
    c = centers - mean
    w, v = np.linalg.eigh(c.T @ c / len(c))
    order = np.argsort(-w, kind="stable")
    w, v = w[order], v[:, order]
    s1, s2, s3 = w[:n6].sum(), w[n6:n11].sum(), w[n11:].sum()
    if min(s1, s2, s3) <= 0:
        raise ValueError("degenerate center cloud")
    total = s3 / (1 - p11)
    gains = np.ones(spec.dim)
    gains[:n6] = np.sqrt(p6 * total / s1)
    gains[n6:n11] = np.sqrt((p11 - p6) * total / s2)
    new_w = w * gains**2
    if np.any(np.diff(new_w) > 1e-12 * new_w[0]):
        raise ValueError("rescaling reorders principal axes; targets unattainable with this draw")
    return (c @ v) * gains @ v.T + mean


def make_synthetic(spec: SyntheticSpec, rng=None):
    """Mixture of isotropic Gaussians with prescribed center PCA spectrum.

    Returns ``(gmm, train, labels)``.
    """
    rng = np.random.default_rng(spec.seed) if rng is None else rng
    centers = _rescale_centers(rng.standard_normal((spec.components, spec.dim)), spec)
    gmm = GmmSpec(
        np.full(spec.components, 1.0 / spec.components),
        centers,
        np.full(spec.components, spec.component_sd),
    )
    labels = rng.integers(0, spec.components, size=spec.train_size)
    train = centers[labels] + spec.component_sd * rng.standard_normal((spec.train_size, spec.dim))
    return gmm, train, labels


# ---------------------------------------------------------------------- CIFAR-10

CIFAR_RECORD = 3073
CIFAR_TRAIN = [f"data_batch_{i}.bin" for i in range(1, 6)]
CIFAR_TEST = ["test_batch.bin"]
CIFAR_SHAPE = ImageShape(32, 32, 3)


def read_cifar_batch(path):
    """Parse one binary batch: returns ``(images in [0, 1], labels)``."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read CIFAR-10 batch {path}: {exc}") from exc
    if len(raw) == 0 or len(raw) % CIFAR_RECORD:
        raise OSError(f"{path}: size {len(raw)} is not a multiple of {CIFAR_RECORD}")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    return rec[:, 1:].astype(np.float64) / 255.0, rec[:, 0].astype(np.int64)


def load_cifar10(directory, train_only=False):
    """Load the binary CIFAR-10 distribution. Pixel layout: R, G, B planes, row-major."""
    directory = Path(directory)
    names = CIFAR_TRAIN if train_only else CIFAR_TRAIN + CIFAR_TEST
    for name in names:
        if not (directory / name).is_file():
            raise FileNotFoundError(f"missing CIFAR-10 file {directory / name}")
    train = [read_cifar_batch(directory / n) for n in CIFAR_TRAIN]
    out = {
        "train": np.concatenate([b[0] for b in train]),
        "train_labels": np.concatenate([b[1] for b in train]),
    }
    if not train_only:
        out["test"], out["test_labels"] = read_cifar_batch(directory / CIFAR_TEST[0])
    return out


# ----------------------------------------------------------------------- metrics


def nn_distance(samples, train, block: int = 512) -> float:
    """Mean over ``samples`` of the Euclidean distance to the nearest ``train`` row."""
    return float(np.mean(nn_distances(samples, train, block)))


def nn_distances(samples, train, block: int = 512) -> np.ndarray:
    samples = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    train = np.atleast_2d(np.asarray(train, dtype=np.float64))
    if samples.shape[0] == 0 or train.shape[0] == 0:
        raise ValueError("nn_distance needs non-empty inputs")
    if samples.shape[1] != train.shape[1]:
        raise ValueError("samples and train differ in dimension")
    tr_sq = np.sum(train * train, axis=1)
    out = np.empty(samples.shape[0])
    for s in range(0, samples.shape[0], block):
        x = samples[s:s + block]
        d2 = tr_sq[None, :] - 2.0 * x @ train.T
        # candidates from the expanded form, exact distance recomputed on the winner
        best = np.argmin(d2, axis=1)
        diff = x - train[best]
        out[s:s + block] = np.sqrt(np.sum(diff * diff, axis=1))
    return out


# ------------------------------------------------------------------ atomic writes


def atomic_write_bytes(path, payload: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# -------------------------------------------------------------------- matrix file

MATRIX_MAGIC = b"SDMX"
MATRIX_VERSION = 1
_MATRIX_HEADER = struct.Struct("<4sIQQ")


def encode_matrix(a) -> bytes:
    a = np.asarray(a, dtype="<f8")
    if a.ndim == 1:
        a = a[None, :]
    if a.ndim != 2:
        raise ValueError("matrix must be 1-D or 2-D")
    return _MATRIX_HEADER.pack(MATRIX_MAGIC, MATRIX_VERSION, *a.shape) + np.ascontiguousarray(a).tobytes()


def decode_matrix(raw: bytes) -> np.ndarray:
    if len(raw) < _MATRIX_HEADER.size:
        raise FormatError("matrix file truncated in header")
    magic, version, rows, cols = _MATRIX_HEADER.unpack_from(raw)
    if magic != MATRIX_MAGIC:
        raise FormatError(f"bad matrix magic {magic!r}")
    if version != MATRIX_VERSION:
        raise FormatError(f"unsupported matrix version {version}")
    expect = _MATRIX_HEADER.size + rows * cols * 8
    if len(raw) != expect:
        raise FormatError(f"matrix payload has {len(raw)} bytes, expected {expect}")
    return np.frombuffer(raw, dtype="<f8", offset=_MATRIX_HEADER.size).reshape(rows, cols).astype(np.float64)


def save_matrix(path, a):
    atomic_write_bytes(path, encode_matrix(a))


def load_matrix(path) -> np.ndarray:
    return decode_matrix(Path(path).read_bytes())


# --------------------------------------------------------------------- checkpoint

CKPT_MAGIC = b"SDIF"
CKPT_VERSION = 1


@dataclass(eq=False)
class Checkpoint:
    """Process, optional chain and schedule data, score networks and free-form metadata.

    ``energies`` are orthogonal data energies; their meaning (per level, or
    relative to the full space) is recorded in ``meta``.
    """

    process: VEProcess
    models: list[ScoreNet] = field(default_factory=list)
    chain: SubspaceChain | None = None
    times: tuple[float, ...] = ()
    energies: tuple[float, ...] = ()
    meta: dict = field(default_factory=dict)


class _Reader:
    def __init__(self, raw, what):
        self.raw, self.pos, self.what = raw, 0, what

    def take(self, n):
        if self.pos + n > len(self.raw):
            raise FormatError(f"{self.what}: truncated")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        s = struct.Struct("<" + fmt)
        vals = s.unpack(self.take(s.size))
        return vals if len(vals) > 1 else vals[0]

    def reals(self, count):
        return np.frombuffer(self.take(8 * count), dtype="<f8").astype(np.float64)

    def done(self):
        if self.pos != len(self.raw):
            raise FormatError(f"{self.what}: {len(self.raw) - self.pos} trailing bytes")


def _reals(a) -> bytes:
    return np.ascontiguousarray(np.asarray(a, dtype="<f8")).tobytes()


def _enc_process(p: VEProcess):
    return struct.pack("<4d", p.sigma_min, p.sigma_max, p.T, p.eps)


def _enc_chain(chain: SubspaceChain):
    if isinstance(chain, DownsamplingChain):
        s = chain.shape
        return struct.pack("<I4I", 1, s.height, s.width, s.channels, chain.levels)
    if isinstance(chain, ExplicitChain):
        out = [struct.pack("<IQI", 0, chain.ambient_dim, chain.K)]
        for k in range(1, chain.K + 1):
            u = chain.basis(k)
            out.append(struct.pack("<Q", u.shape[1]) + _reals(u))
        return b"".join(out)
    raise TypeError(f"cannot serialise chain type {type(chain).__name__}")


def _dec_chain(r: _Reader):
    kind = r.unpack("I")
    if kind == 1:
        h, w, c, levels = r.unpack("4I")
        return DownsamplingChain(ImageShape(h, w, c), levels)
    if kind == 0:
        d, K = r.unpack("QI")
        bases = []
        for _ in range(K):
            n = r.unpack("Q")
            bases.append(r.reals(d * n).reshape(d, n))
        return ExplicitChain(bases, ambient_dim=d)
    raise FormatError(f"unknown chain kind {kind}")


def _enc_models(models):
    out = [struct.pack("<I", len(models))]
    for m in models:
        out.append(struct.pack("<II", m.input_dim, len(m.hidden)))
        out.append(struct.pack(f"<{len(m.hidden)}I", *m.hidden))
        for i, (fi, fo) in enumerate(m.layer_shapes()):
            out.append(struct.pack("<QQ", fi, fo))
            out.append(_reals(m.params[2 * i]) + _reals(m.params[2 * i + 1]))
    return b"".join(out)


def _dec_models(r: _Reader, process):
    models = []
    for _ in range(r.unpack("I")):
        dim, nh = r.unpack("II")
        hidden = struct.unpack(f"<{nh}I", r.take(4 * nh))
        params = []
        widths = (dim + 1,) + tuple(hidden) + (dim,)
        for fi, fo in zip(widths[:-1], widths[1:]):
            rows, cols = r.unpack("QQ")
            if (rows, cols) != (fi, fo):
                raise FormatError("layer shape does not match architecture")
            params.append(r.reals(rows * cols).reshape(rows, cols))
            params.append(r.reals(cols))
        models.append(ScoreNet(dim, process, hidden, params=params))
    return models


def encode_checkpoint(ck: Checkpoint) -> bytes:
    sections = [(b"PROC", _enc_process(ck.process))]
    if ck.chain is not None:
        sections.append((b"CHAN", _enc_chain(ck.chain)))
    sched = struct.pack("<I", len(ck.times)) + _reals(ck.times)
    sched += struct.pack("<I", len(ck.energies)) + _reals(ck.energies)
    sections.append((b"SCHD", sched))
    sections.append((b"MODL", _enc_models(ck.models)))
    sections.append((b"META", json.dumps(ck.meta, sort_keys=True).encode()))
    buf = io.BytesIO()
    buf.write(struct.pack("<4sII", CKPT_MAGIC, CKPT_VERSION, len(sections)))
    for tag, payload in sections:
        buf.write(struct.pack("<4sQ", tag, len(payload)))
        buf.write(payload)
    return buf.getvalue()


def decode_checkpoint(raw: bytes) -> Checkpoint:
    r = _Reader(raw, "checkpoint")
    if len(raw) < 4 or raw[:4] != CKPT_MAGIC:
        raise FormatError(f"bad checkpoint magic {raw[:4]!r}")
    _, version, nsec = r.unpack("4sII")
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    sections = {}
    for _ in range(nsec):
        tag, length = r.unpack("4sQ")
        sections[tag] = r.take(length)
    r.done()
    if b"PROC" not in sections:
        raise FormatError("checkpoint lacks a process section")
    pr = _Reader(sections[b"PROC"], "process section")
    smin, smax, T, eps = pr.unpack("4d")
    pr.done()
    process = VEProcess(smin, smax, T, eps)
    chain = None
    if b"CHAN" in sections:
        cr = _Reader(sections[b"CHAN"], "chain section")
        chain = _dec_chain(cr)
        cr.done()
    sr = _Reader(sections.get(b"SCHD", struct.pack("<II", 0, 0)), "schedule section")
    times = tuple(sr.reals(sr.unpack("I")).tolist())
    energies = tuple(sr.reals(sr.unpack("I")).tolist())
    sr.done()
    mr = _Reader(sections.get(b"MODL", struct.pack("<I", 0)), "model section")
    models = _dec_models(mr, process)
    mr.done()
    try:
        meta = json.loads(sections.get(b"META", b"{}").decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"bad metadata: {exc}") from exc
    return Checkpoint(process, models, chain, times, energies, meta)


def save_checkpoint(path, ck: Checkpoint):
    atomic_write_bytes(path, encode_checkpoint(ck))


def load_checkpoint(path) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes())


def gmm_to_matrix(gmm: GmmSpec) -> np.ndarray:
    """Mixture parameters as rows ``[weight, sd, mean...]``."""
    return np.column_stack([gmm.weights, gmm.sds, gmm.means])


def gmm_from_matrix(a) -> GmmSpec:
    a = np.asarray(a)
    return GmmSpec(a[:, 0], a[:, 2:], a[:, 1])
