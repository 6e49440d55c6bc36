"""Matrix product states with log-domain contraction.

Site tensors use the index order ``(s, a_left, a_right)``: physical index
first, then the left and right virtual bonds. All tensors are real.

Every contraction that runs along the chain renormalizes its boundary
object after each site and accumulates the logarithm of the discarded
scale, so amplitudes and overlaps never under- or overflow however long
the chain is.
"""

from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass, field
from typing import BinaryIO, Sequence, Union

import numpy as np

from .errors import FormatError, NumericError, ParameterError

ISOMETRY_TOL = 1e-10
UNIT_NORM_TOL = 1e-12
SUPERPOSITION_MAX_STATES = 4096
# relative cut for singular values treated as exact zeros
_RANK_TOL = 1e-12
_MAGIC = b"GTN1"


@dataclass(frozen=True)
class LogAmplitude:
    """A real number stored as ``sign * exp(log_mag)``."""

    sign: int
    log_mag: float

    def __post_init__(self):
        if self.sign not in (-1, 0, 1):
            raise ParameterError(f"sign must be -1, 0 or +1, got {self.sign}")
        if (self.sign == 0) != (self.log_mag == -math.inf):
            raise ParameterError("sign == 0 if and only if log_mag == -inf")

    @classmethod
    def zero(cls) -> LogAmplitude:
        return cls(0, -math.inf)

    @classmethod
    def from_value(cls, value: float) -> LogAmplitude:
        if value == 0:
            return cls.zero()
        return cls(1 if value > 0 else -1, math.log(abs(value)))

    def __mul__(self, other: LogAmplitude) -> LogAmplitude:
        sign = self.sign * other.sign
        if sign == 0:
            return LogAmplitude.zero()
        return LogAmplitude(sign, self.log_mag + other.log_mag)

    @property
    def value(self) -> float:
        if self.sign == 0:
            return 0.0
        return self.sign * math.exp(self.log_mag)


@dataclass(frozen=True, eq=False)
class ProductState:
    """M unit-norm site vectors, shape ``(M, d)``."""

    site_vectors: np.ndarray

    def __post_init__(self):
        v = np.array(self.site_vectors, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] < 1 or v.shape[1] < 2:
            raise ParameterError(f"site_vectors must have shape (M, d>=2), got {v.shape}")
        norms = np.linalg.norm(v, axis=1)
        if not np.all(np.abs(norms - 1.0) <= UNIT_NORM_TOL):
            worst = int(np.argmax(np.abs(norms - 1.0)))
            raise ParameterError(f"site vector {worst} has norm {norms[worst]!r}, expected 1")
        v.setflags(write=False)
        object.__setattr__(self, "site_vectors", v)

    @property
    def M(self) -> int:
        return self.site_vectors.shape[0]

    @property
    def d(self) -> int:
        return self.site_vectors.shape[1]

    def as_mps(self) -> Mps:
        return Mps([v.reshape(-1, 1, 1) for v in self.site_vectors])


States = Union[np.ndarray, ProductState, Sequence[ProductState]]


def stack_states(states: States) -> np.ndarray:
    """Return product states as one ``(N, M, d)`` float array.

    Accepts a single ProductState, a sequence of them, or an array that is
    already stacked (in which case unit norms are the caller's business).
    """
    if isinstance(states, ProductState):
        return states.site_vectors[None]
    if isinstance(states, np.ndarray):
        if states.ndim == 2:
            states = states[None]
        if states.ndim != 3:
            raise ParameterError(f"stacked states must be (N, M, d), got {states.shape}")
        return np.asarray(states, dtype=np.float64)
    states = list(states)
    if not states:
        return np.zeros((0, 0, 0))
    shapes = {s.site_vectors.shape for s in states}
    if len(shapes) != 1:
        raise ParameterError(f"product states disagree in shape: {sorted(shapes)}")
    return np.stack([s.site_vectors for s in states])


@dataclass(frozen=True, eq=False)
class Mps:
    """Open-boundary matrix product state.

    Attributes:
        sites: rank-3 tensors of shape ``(d, chi_left, chi_right)``. Stored as
            read-only copies; the object is immutable.
        canonical_center: index of the orthogonality center, or None when the
            gauge is unknown. With center ``c`` every site left of ``c`` is a
            left isometry and every site right of it a right isometry.
    """

    sites: tuple
    canonical_center: int | None = field(default=None)

    def __post_init__(self):
        sites = []
        for m, a in enumerate(self.sites):
            t = np.array(a, dtype=np.float64)
            if t.ndim != 3:
                raise ParameterError(f"site {m} has rank {t.ndim}, expected 3")
            t.setflags(write=False)
            sites.append(t)
        if len(sites) < 1:
            raise ParameterError("an Mps needs at least one site")
        d = sites[0].shape[0]
        if sites[0].shape[1] != 1 or sites[-1].shape[2] != 1:
            raise ParameterError("boundary bonds must have dimension 1")
        for m, t in enumerate(sites):
            if t.shape[0] != d:
                raise ParameterError(f"site {m} has physical dim {t.shape[0]}, expected {d}")
            if m and sites[m - 1].shape[2] != t.shape[1]:
                raise ParameterError(
                    f"bond {m} mismatch: {sites[m - 1].shape[2]} vs {t.shape[1]}"
                )
            if not np.all(np.isfinite(t)):
                raise NumericError(f"site {m} has non-finite entries")
        c = self.canonical_center
        if c is not None and not 0 <= c < len(sites):
            raise ParameterError(f"canonical_center {c} out of range")
        object.__setattr__(self, "sites", tuple(sites))

    @property
    def M(self) -> int:
        return len(self.sites)

    @property
    def d(self) -> int:
        return self.sites[0].shape[0]

    @property
    def bond_dims(self) -> list[int]:
        return [1] + [t.shape[2] for t in self.sites]

    @property
    def max_bond(self) -> int:
        return max(self.bond_dims)

    @property
    def n_params(self) -> int:
        return sum(t.size for t in self.sites)

    def digest(self) -> bytes:
        h = hashlib.blake2b(digest_size=16)
        for t in self.sites:
            h.update(str(t.shape).encode())
            h.update(t.tobytes())
        return h.digest()

    def to_bytes(self) -> bytes:
        header = _MAGIC + struct.pack("<II", self.M, self.d)
        header += struct.pack(f"<{self.M + 1}I", *self.bond_dims)
        payload = b"".join(np.ascontiguousarray(t, dtype="<f8").tobytes() for t in self.sites)
        return header + payload

    @classmethod
    def from_bytes(cls, data: bytes) -> Mps:
        if len(data) < 12 or data[:4] != _MAGIC:
            raise FormatError("bad magic, expected b'GTN1'", offset=0)
        M, d = struct.unpack_from("<II", data, 4)
        off = 12
        need = off + 4 * (M + 1)
        if M < 1 or len(data) < need:
            raise FormatError(f"truncated bond header for M={M}", offset=off)
        bonds = struct.unpack_from(f"<{M + 1}I", data, off)
        off = need
        sites = []
        for m in range(M):
            shape = (d, bonds[m], bonds[m + 1])
            n = int(np.prod(shape))
            if len(data) < off + 8 * n:
                raise FormatError(f"truncated payload at site {m}", offset=off)
            sites.append(np.frombuffer(data, dtype="<f8", count=n, offset=off).reshape(shape))
            off += 8 * n
        if off != len(data):
            raise FormatError(f"{len(data) - off} trailing bytes", offset=off)
        mps = cls(sites)
        if is_canonical(mps, mps.M - 1):
            mps = cls(mps.sites, canonical_center=mps.M - 1)
        return mps

    def save(self, f: BinaryIO | str) -> None:
        if isinstance(f, str):
            with open(f, "wb") as fh:
                fh.write(self.to_bytes())
        else:
            f.write(self.to_bytes())

    @classmethod
    def load(cls, f: BinaryIO | str) -> Mps:
        if isinstance(f, str):
            with open(f, "rb") as fh:
                return cls.from_bytes(fh.read())
        return cls.from_bytes(f.read())


def capped_bond_dims(M: int, d: int, chi: int) -> list[int]:
    """Bond dimensions ``min(chi, d**m, d**(M-m))`` for cuts ``m = 0..M``."""
    dims = []
    for m in range(M + 1):
        # compare exponents first so huge M never builds huge integers
        e = min(m, M - m)
        dims.append(chi if e * math.log(d) >= math.log(chi) else min(chi, d**e))
    return dims


def is_canonical(mps: Mps, center: int, tol: float = ISOMETRY_TOL) -> bool:
    """Check the isometry conditions around ``center`` and unit norm of the center."""
    for m, t in enumerate(mps.sites):
        d, l, r = t.shape
        if m < center:
            mat = t.reshape(d * l, r)
            if not np.allclose(mat.T @ mat, np.eye(r), rtol=0, atol=tol):
                return False
        elif m > center:
            mat = t.transpose(1, 0, 2).reshape(l, d * r)
            if not np.allclose(mat @ mat.T, np.eye(l), rtol=0, atol=tol):
                return False
    return abs(np.linalg.norm(mps.sites[center]) - 1.0) <= tol


def _left_qr(t: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Split ``t`` into a left isometry and a carry matrix, with positive R diagonal."""
    d, l, r = t.shape
    q, rr = np.linalg.qr(t.reshape(d * l, r))
    signs = np.where(np.diag(rr) < 0, -1.0, 1.0)
    q = q * signs
    rr = rr * signs[:, None]
    return q.reshape(d, l, q.shape[1]), rr


def _right_qr(t: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Split ``t`` into a carry matrix and a right isometry (an LQ decomposition)."""
    d, l, r = t.shape
    q, rr = np.linalg.qr(t.transpose(1, 0, 2).reshape(l, d * r).T)
    signs = np.where(np.diag(rr) < 0, -1.0, 1.0)
    q = q * signs
    rr = rr * signs[:, None]
    k = q.shape[1]
    return rr.T, q.T.reshape(k, d, r).transpose(1, 0, 2)


def canonicalize(mps: Mps) -> Mps:
    """Left-canonical form with the orthogonality center on the last site.

    The result represents ``mps / ||mps||`` exactly (same sign). Interior
    bonds never grow; they shrink only where ``d * chi_left < chi_right``.
    """
    out = []
    carry = np.ones((1, 1))
    last = mps.M - 1
    for m, t in enumerate(mps.sites):
        t = np.tensordot(carry, t, axes=([1], [1])).transpose(1, 0, 2)
        if m == last:
            nrm = np.linalg.norm(t)
            if nrm == 0 or not np.isfinite(nrm):
                raise NumericError(f"state norm is {nrm}; cannot normalize")
            out.append(t / nrm)
            break
        q, carry = _left_qr(t)
        scale = np.linalg.norm(carry)
        if scale == 0 or not np.isfinite(scale):
            raise NumericError(f"state vanishes at site {m}")
        carry = carry / scale
        out.append(q)
    return Mps(out, canonical_center=last)


def right_canonicalize(mps: Mps) -> Mps:
    """Mirror of :func:`canonicalize`: center on site 0, right isometries elsewhere."""
    out = []
    carry = np.ones((1, 1))
    for m in range(mps.M - 1, -1, -1):
        t = np.tensordot(mps.sites[m], carry, axes=([2], [0]))
        if m == 0:
            nrm = np.linalg.norm(t)
            if nrm == 0 or not np.isfinite(nrm):
                raise NumericError(f"state norm is {nrm}; cannot normalize")
            out.append(t / nrm)
            break
        carry, q = _right_qr(t)
        scale = np.linalg.norm(carry)
        if scale == 0 or not np.isfinite(scale):
            raise NumericError(f"state vanishes at site {m}")
        carry = carry / scale
        out.append(q)
    return Mps(out[::-1], canonical_center=0)


def random_mps(M: int, d: int = 2, chi: int = 2, seed: int = 0) -> Mps:
    """Normalized random state: i.i.d. standard normal entries, then canonicalized."""
    if M < 2 or d < 2 or chi < 1:
        raise ParameterError(f"need M >= 2, d >= 2, chi >= 1; got M={M}, d={d}, chi={chi}")
    rng = np.random.default_rng(seed)
    dims = capped_bond_dims(M, d, chi)
    sites = [rng.standard_normal((d, dims[m], dims[m + 1])) for m in range(M)]
    return canonicalize(Mps(sites))


def _ordered_pair(psi: Mps, phi: Mps) -> tuple[Mps, Mps]:
    # fixed argument order makes log_overlap exactly symmetric in floating point
    return (psi, phi) if psi.digest() <= phi.digest() else (phi, psi)


def log_overlap(psi: Mps, phi: Mps) -> LogAmplitude:
    """``<psi|phi>`` by left-to-right boundary contraction with per-site renormalization."""
    if psi.M != phi.M or psi.d != phi.d:
        raise ParameterError(
            f"shape mismatch: (M={psi.M}, d={psi.d}) vs (M={phi.M}, d={phi.d})"
        )
    psi, phi = _ordered_pair(psi, phi)
    v = np.ones((1, 1))
    log_mag = 0.0
    for a, b in zip(psi.sites, phi.sites):
        # v[c, e] = sum_{s, x, y} v[x, y] a[s, x, c] b[s, y, e]
        w = np.tensordot(v, a, axes=([0], [1]))  # (y, s, c)
        v = np.tensordot(w, b, axes=([1, 0], [0, 1]))  # (c, e)
        z = np.linalg.norm(v)
        if z == 0:
            return LogAmplitude.zero()
        log_mag += math.log(z)
        v = v / z
    return LogAmplitude(1 if v[0, 0] > 0 else -1, log_mag)


def log_norm(psi: Mps) -> float:
    """Natural log of ``||psi||``."""
    return 0.5 * log_overlap(psi, psi).log_mag


def log_amplitudes(psi: Mps, states: States) -> tuple[np.ndarray, np.ndarray]:
    """Batched ``<x_n|psi>`` as ``(signs, log_mags)`` arrays of length N."""
    x = stack_states(states)
    n = x.shape[0]
    if n == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0)
    if x.shape[1] != psi.M or x.shape[2] != psi.d:
        raise ParameterError(
            f"product states are (M={x.shape[1]}, d={x.shape[2]}), "
            f"Mps is (M={psi.M}, d={psi.d})"
        )
    v = np.ones((n, 1))
    log_mag = np.zeros(n)
    for m, a in enumerate(psi.sites):
        d, l, r = a.shape
        # one GEMM over the left bond, then the physical index per sample
        w = (v @ a.transpose(1, 0, 2).reshape(l, d * r)).reshape(n, d, r)
        v = np.einsum("nd,ndr->nr", x[:, m, :], w)
        z = np.linalg.norm(v, axis=1)
        alive = z > 0
        log_mag[alive] += np.log(z[alive])
        log_mag[~alive] = -np.inf
        v[alive] /= z[alive, None]
    signs = np.sign(v[:, 0]).astype(np.int64)
    log_mag[signs == 0] = -np.inf
    return signs, log_mag


def log_amplitude(psi: Mps, x: ProductState) -> LogAmplitude:
    """``<x|psi>`` for a single product state."""
    signs, logs = log_amplitudes(psi, x)
    return LogAmplitude(int(signs[0]), float(logs[0]))


def _basis_indices(x: np.ndarray) -> np.ndarray | None:
    """Return per-site basis indices if every site vector is exactly a unit basis vector."""
    ones = x == 1.0
    if np.all(ones | (x == 0.0)) and np.all(ones.sum(axis=2) == 1):
        return np.argmax(x, axis=2)
    return None


def _basis_superposition(idx: np.ndarray, d: int) -> Mps:
    """Exact mixed-canonical superposition of computational basis strings.

    Bonds left of the center enumerate distinct prefixes, bonds right of it
    distinct suffixes, so every non-center tensor is a 0/1 isometry and all
    arithmetic stays exact: strings outside the set get amplitude exactly 0.
    """
    n, M = idx.shape
    c = M // 2
    prefix = [np.zeros(n, dtype=np.int64)]
    for m in range(c):
        _, ids = np.unique(prefix[-1] * d + idx[:, m], return_inverse=True)
        prefix.append(ids.reshape(-1))
    suffix = {M: np.zeros(n, dtype=np.int64)}
    for m in range(M - 1, c, -1):
        _, ids = np.unique(suffix[m + 1] * d + idx[:, m], return_inverse=True)
        suffix[m] = ids.reshape(-1)

    sites = []
    for m in range(c):
        t = np.zeros((d, prefix[m].max() + 1, prefix[m + 1].max() + 1))
        t[idx[:, m], prefix[m], prefix[m + 1]] = 1.0
        sites.append(t)
    center = np.zeros((d, prefix[c].max() + 1, suffix[c + 1].max() + 1))
    np.add.at(center, (idx[:, c], prefix[c], suffix[c + 1]), 1.0)
    sites.append(center / np.linalg.norm(center))
    for m in range(c + 1, M):
        t = np.zeros((d, suffix[m].max() + 1, suffix[m + 1].max() + 1))
        t[idx[:, m], suffix[m], suffix[m + 1]] = 1.0
        sites.append(t)
    return Mps(sites, canonical_center=c)


def _compressed_superposition(x: np.ndarray) -> Mps:
    n, M, d = x.shape
    # left-to-right QR over the implicit rank-N form, built one site at a time
    sites = []
    carry = np.ones((1, n))
    for m in range(M):
        if m == M - 1:
            t = np.einsum("an,ns->sa", carry, x[:, m, :])[:, :, None]
            sites.append(t)
            break
        t = carry[None, :, :] * x[:, m, :].T[:, None, :]
        q, carry = _left_qr(t)
        scale = np.linalg.norm(carry)
        if scale == 0:
            raise NumericError("superposition vanishes")
        carry /= scale
        sites.append(q)
    if np.linalg.norm(sites[-1]) == 0:
        raise NumericError("superposition of the given states is the zero vector")
    # right-to-left SVD drops numerically-zero Schmidt values
    caps = capped_bond_dims(M, d, n)
    for m in range(M - 1, 0, -1):
        t = sites[m]
        _, l, r = t.shape
        u, s, vt = np.linalg.svd(t.transpose(1, 0, 2).reshape(l, d * r), full_matrices=False)
        keep = max(1, min(int(np.sum(s > _RANK_TOL * s[0])), caps[m]))
        sites[m] = vt[:keep].reshape(keep, d, r).transpose(1, 0, 2)
        us = u[:, :keep] * s[:keep]
        sites[m - 1] = np.tensordot(sites[m - 1], us / np.linalg.norm(us), axes=([2], [0]))
    return canonicalize(Mps(sites))


def superposition_mps(states: States) -> Mps:
    """Normalized ``sum_n |x_n>`` as an Mps with bond dims at most ``min(N, d^m, d^(M-m))``.

    Normalization divides by the true norm of the sum. Inputs made only of
    computational basis vectors take an exact construction whose center is
    the middle site; anything else is compressed by SVD and returned with
    the center on the last site.
    """
    x = stack_states(states)
    n = x.shape[0]
    if n == 0:
        raise ParameterError("superposition_mps needs at least one state")
    if n > SUPERPOSITION_MAX_STATES:
        raise ParameterError(f"at most {SUPERPOSITION_MAX_STATES} states, got {n}")
    if x.shape[1] < 1:
        raise ParameterError("states have no sites")
    idx = _basis_indices(x)
    if idx is not None:
        return _basis_superposition(idx, x.shape[2])
    return _compressed_superposition(x)


def _transfer_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ka, kb = a.shape[1], b.shape[1]
    return np.einsum("sab,scd->acbd", a, b).reshape(ka * kb, ka * kb)


def transfer_dominant_eig(
    a: np.ndarray,
    b: np.ndarray,
    *,
    method: str = "auto",
    tol: float = 1e-10,
    max_iter: int = 10_000,
) -> float:
    """Modulus of the dominant eigenvalue of ``T[(a a'), (b b')] = sum_s A[s,a,b] B[s,a',b']``.

    ``method="auto"`` uses a dense eigensolver when both bond dimensions are
    at most 8 and power iteration otherwise.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 3 or b.ndim != 3:
        raise ParameterError("transfer tensors must be rank 3")
    if a.shape[0] != b.shape[0]:
        raise ParameterError(f"physical dims differ: {a.shape[0]} vs {b.shape[0]}")
    if a.shape[1] != a.shape[2] or b.shape[1] != b.shape[2]:
        raise ParameterError(f"bond dims must be square, got {a.shape} and {b.shape}")
    if method == "auto":
        method = "dense" if max(a.shape[1], b.shape[1]) <= 8 else "power"
    if method == "dense":
        return float(np.max(np.abs(np.linalg.eigvals(_transfer_matrix(a, b)))))
    if method != "power":
        raise ParameterError(f"unknown method {method!r}")

    rng = np.random.default_rng(0)
    v = np.eye(a.shape[1], b.shape[1]) + 0.1 * rng.standard_normal((a.shape[1], b.shape[1]))
    v /= np.linalg.norm(v)
    lam = 0.0
    gap = math.inf
    for _ in range(max_iter):
        # left action v -> sum_s A_s^T v B_s; same spectrum as T
        w = np.einsum("sab,ac,scd->bd", a, v, b)
        new = float(np.linalg.norm(w))
        if new == 0:
            return 0.0
        v = w / new
        gap = abs(new - lam)
        lam = new
        if gap <= tol * max(lam, 1.0):
            return lam
    raise NumericError(
        f"power iteration did not converge in {max_iter} iterations (last gap {gap:.3e})",
        gap=gap,
    )


def log_sum_probability(psi: Mps, site_gram: np.ndarray) -> float:
    """Natural log of ``<psi| G (x) G (x) ... (x) G |psi>``."""
    g = np.asarray(site_gram, dtype=np.float64)
    if g.shape != (psi.d, psi.d):
        raise ParameterError(f"site_gram must be {psi.d}x{psi.d}, got {g.shape}")
    scale = max(float(np.max(np.abs(g))), 1e-300)
    if not np.allclose(g, g.T, rtol=0, atol=1e-12 * scale):
        raise ParameterError("site_gram is not symmetric")
    if np.min(np.linalg.eigvalsh(g)) < -1e-12 * scale:
        raise ParameterError("site_gram is not positive semidefinite")
    v = np.ones((1, 1))
    log_val = 0.0
    for a in psi.sites:
        ga = np.tensordot(g, a, axes=([1], [0]))  # (s, a', b')
        w = np.tensordot(v, a, axes=([0], [1]))  # (a', s, b)
        v = np.tensordot(w, ga, axes=([1, 0], [0, 1]))  # (b, b')
        z = np.linalg.norm(v)
        if z == 0:
            return -math.inf
        log_val += math.log(z)
        v = v / z
    if v[0, 0] <= 0:
        return -math.inf
    return log_val


def sum_probability(psi: Mps, site_gram: np.ndarray) -> float:
    """Total Born weight over a full sample grid whose per-site Gram matrix is ``site_gram``.

    With ``site_gram = I`` this is ``<psi|psi>``. Overflows to ``inf`` only
    when the true value exceeds double range; use :func:`log_sum_probability`
    in that regime.
    """
    lv = log_sum_probability(psi, site_gram)
    return math.exp(lv) if lv < 709.0 else math.inf
