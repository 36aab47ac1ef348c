"""Statevector-level primitives behind the quantum attention variants.

Pauli-string observables, amplitude encoding of classical vectors, the
layered rotation+CNOT ansatz (built through the autodiff tape so
rotation angles are trainable), expectation values, and the cache of
evolved observables that makes post-training inference a single
quadratic form per observable.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from functools import lru_cache
from types import MappingProxyType
from typing import Mapping

import numpy as np

from .errors import CacheMissError, ConfigError, ContractError, DegenerateTokenError
from .tensor import Tensor, cos, kron, matmul, no_grad, select_entry, sin

_PAULI_1Q = {
    "I": np.eye(2, dtype=np.complex128),
    "X": np.array([[0, 1], [1, 0]], dtype=np.complex128),
    "Y": np.array([[0, -1j], [1j, 0]], dtype=np.complex128),
    "Z": np.array([[1, 0], [0, -1]], dtype=np.complex128),
}


@dataclass(frozen=True)
class PauliString:
    """Word over {I, X, Y, Z}; qubit 0 is the leftmost letter."""

    word: str

    def __post_init__(self):
        if not self.word or any(ch not in _PAULI_1Q for ch in self.word):
            raise ConfigError(f"invalid Pauli word {self.word!r}")

    @property
    def n(self) -> int:
        return len(self.word)

    @property
    def y_parity(self) -> int:
        return self.word.count("Y") % 2

    @property
    def is_identity(self) -> bool:
        return set(self.word) == {"I"}

    def __str__(self):
        return self.word


def pauli_matrix(p: PauliString | str) -> np.ndarray:
    """Dense 2^n x 2^n realization (Kronecker product, qubit 0 leftmost)."""
    word = p.word if isinstance(p, PauliString) else PauliString(p).word
    out = _PAULI_1Q[word[0]]
    for ch in word[1:]:
        out = np.kron(out, _PAULI_1Q[ch])
    return out


def select_observables(n: int, count: int, mode: str) -> list[PauliString]:
    """First ``count`` Pauli strings in lexicographic order (I<X<Y<Z).

    The identity word is always excluded (its expectation is constant).
    Mode "real_congruence" additionally drops words with an odd number
    of Y letters: their matrices are purely imaginary, so quadratic
    forms over real vectors vanish identically.  Mode "unitary" keeps
    every non-identity word.
    """
    if mode not in ("real_congruence", "unitary"):
        raise ConfigError(f"unknown observable mode {mode!r}")
    pool: list[PauliString] = []
    for digits in np.ndindex(*(4,) * n):
        p = PauliString("".join("IXYZ"[d] for d in digits))
        if p.is_identity:
            continue
        if mode == "real_congruence" and p.y_parity == 1:
            continue
        pool.append(p)
        if len(pool) == count:
            return pool
    raise ConfigError(f"requested {count} observables but only {len(pool)} exist for n={n}, mode={mode}")


def amplitude_encode(x: np.ndarray, n: int, eps: float = 1e-12) -> np.ndarray:
    """L2-normalize ``x`` and zero-pad it into a 2^n statevector."""
    x = np.asarray(x, dtype=np.float64)
    dim = 2**n
    if x.size > dim:
        raise ConfigError(f"vector of length {x.size} does not fit in {n} qubits")
    norm = np.linalg.norm(x)
    if norm < eps:
        raise DegenerateTokenError("cannot amplitude-encode a zero vector")
    state = np.zeros(dim, dtype=np.complex128)
    state[: x.size] = x / norm
    return state


# ---------------------------------------------------------------------------
# hardware-efficient ansatz
# ---------------------------------------------------------------------------


@dataclass
class AnsatzParams:
    """Rotation angles of shape [layers p][qubits n][3 axes], radians."""

    theta: np.ndarray

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=np.float64)
        if self.theta.ndim != 3 or self.theta.shape[2] != 3:
            raise ConfigError(f"ansatz angles must have shape [p][n][3], got {self.theta.shape}")

    @property
    def p(self) -> int:
        return self.theta.shape[0]

    @property
    def n(self) -> int:
        return self.theta.shape[1]

    @classmethod
    def random(cls, rng: np.random.Generator, n: int, p: int) -> "AnsatzParams":
        return cls(rng.uniform(-np.pi, np.pi, size=(p, n, 3)))


@lru_cache(maxsize=None)
def cnot_chain(n: int) -> np.ndarray:
    """Entangler of one ansatz layer: CNOT(q -> q+1) for q = 0..n-2."""
    dim = 2**n
    out = np.eye(dim)
    for q in range(n - 1):
        gate = np.eye(dim)
        for basis in range(dim):
            if (basis >> (n - 1 - q)) & 1:  # control qubit set (qubit 0 = MSB)
                flipped = basis ^ (1 << (n - 2 - q))
                gate[basis, basis] = 0.0
                gate[basis, flipped] = 1.0
        out = gate @ out
    return out


_I2 = np.eye(2)
_X_RE = np.array([[0.0, 1.0], [1.0, 0.0]])
_Y_IM_AS_RE = np.array([[0.0, -1.0], [1.0, 0.0]])  # -i*sin * Y is real
_Z_RE = np.array([[1.0, 0.0], [0.0, -1.0]])

# (re, im) tensor pair; None means an exactly-zero component
_CTensor = tuple[Tensor | None, Tensor | None]


def _cmatmul(a: _CTensor, b: _CTensor) -> _CTensor:
    are, aim = a
    bre, bim = b
    re = im = None
    if are is not None and bre is not None:
        re = matmul(are, bre)
    if aim is not None and bim is not None:
        t = matmul(aim, bim) * -1.0
        re = t if re is None else re + t
    if are is not None and bim is not None:
        im = matmul(are, bim)
    if aim is not None and bre is not None:
        t = matmul(aim, bre)
        im = t if im is None else im + t
    return re, im


def _ckron(a: _CTensor, b: _CTensor) -> _CTensor:
    are, aim = a
    bre, bim = b
    re = im = None
    if are is not None and bre is not None:
        re = kron(are, bre)
    if aim is not None and bim is not None:
        t = kron(aim, bim) * -1.0
        re = t if re is None else re + t
    if are is not None and bim is not None:
        im = kron(are, bim)
    if aim is not None and bre is not None:
        t = kron(aim, bre)
        im = t if im is None else im + t
    return re, im


def _rotation_gate(axis: int, half_angle: Tensor) -> _CTensor:
    """exp(-i theta/2 P) for P in (X, Y, Z) as a (re, im) 2x2 pair."""
    c = cos(half_angle)
    s = sin(half_angle)
    if axis == 0:  # X: cos*I - i sin*X
        return c * Tensor(_I2), s * Tensor(-_X_RE)
    if axis == 1:  # Y: real matrix
        return c * Tensor(_I2) + s * Tensor(_Y_IM_AS_RE), None
    return c * Tensor(_I2), s * Tensor(-_Z_RE)  # Z


def hea_unitary_tensors(theta: Tensor, n: int, p: int) -> tuple[Tensor, Tensor]:
    """Build the ansatz unitary on the autodiff tape.

    One layer applies RX, RY, RZ on every qubit (in that order) and then
    the CNOT chain; layers compose left to right in application order.
    Returns the real and imaginary parts as tensors of shape [2^n, 2^n].
    """
    if theta.shape != (p, n, 3):
        raise ConfigError(f"theta must have shape ({p}, {n}, 3), got {theta.shape}")
    chain = Tensor(cnot_chain(n))
    total: _CTensor | None = None
    for layer in range(p):
        rot: _CTensor | None = None
        for q in range(n):
            gate: _CTensor | None = None
            for axis in range(3):
                half = select_entry(theta, (layer, q, axis)) * 0.5
                r = _rotation_gate(axis, half)
                gate = r if gate is None else _cmatmul(r, gate)
            rot = gate if rot is None else _ckron(rot, gate)
        layer_u = _cmatmul((chain, None), rot)
        total = layer_u if total is None else _cmatmul(layer_u, total)
    re, im = total
    dim = 2**n
    if re is None:
        re = Tensor(np.zeros((dim, dim)))
    if im is None:
        im = Tensor(np.zeros((dim, dim)))
    return re, im


def hea_unitary(params: AnsatzParams) -> np.ndarray:
    """Ansatz unitary as a plain complex matrix (no gradient tracking)."""
    with no_grad():
        re, im = hea_unitary_tensors(Tensor(params.theta), params.n, params.p)
    return re.data + 1j * im.data


# ---------------------------------------------------------------------------
# expectation values
# ---------------------------------------------------------------------------


def expectation(state: np.ndarray, obs: np.ndarray) -> float:
    """<psi|O|psi> for a unit statevector and a Hermitian observable."""
    state = np.asarray(state, dtype=np.complex128)
    obs = np.asarray(obs, dtype=np.complex128)
    if not np.allclose(obs, obs.conj().T, atol=1e-10):
        raise ContractError("observable is not Hermitian")
    norm = np.linalg.norm(state)
    if abs(norm - 1.0) > 1e-9:
        raise ContractError(f"state is not normalized (|psi| = {norm})")
    return float(np.real(np.vdot(state, obs @ state)))


def congruence_expectation(x, w: Tensor, obs: PauliString | str) -> Tensor:
    """<x| W^T P W |x> as a differentiable scalar.

    Requires an even-Y observable: odd-Y Pauli matrices are purely
    imaginary, which makes the quadratic form over real vectors vanish
    identically, so requesting one is a configuration mistake.
    """
    p = obs if isinstance(obs, PauliString) else PauliString(obs)
    if p.y_parity == 1:
        raise ConfigError(f"observable {p.word} has odd Y-parity; its congruence expectation is always 0")
    x = x if isinstance(x, Tensor) else Tensor(x)
    m = Tensor(np.real(pauli_matrix(p)))
    y = matmul(x.reshape(1, -1), w.T)
    return matmul(matmul(y, m), y.T).reshape(())


# ---------------------------------------------------------------------------
# evolved-observable cache
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class HeadObservables:
    """Evolved observables of one (layer, head): value plus optional q/k.

    Arrays have shape [instances, n_obs, d, d]; instances is 1 when the
    head shares one map across tokens and equals the context length for
    the per-position variant.
    """

    value: np.ndarray
    query: np.ndarray | None = None
    key: np.ndarray | None = None


def _freeze(a: np.ndarray | None) -> np.ndarray | None:
    if a is None:
        return None
    a = np.ascontiguousarray(a, dtype=np.complex128)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class ObservableCache:
    """Immutable map (layer, head) -> evolved observables."""

    kind: str  # "ansatz" (P' = U^dag P U) or "congruence" (P' = W^T Re(P) W)
    n: int
    p: int
    variant: str
    built_from: str
    observables: tuple[str, ...]
    evolved: Mapping[tuple[int, int], HeadObservables]

    def entry(self, layer: int, head: int) -> HeadObservables:
        try:
            return self.evolved[(layer, head)]
        except KeyError:
            raise CacheMissError(f"no cache entry for layer {layer}, head {head}") from None

    def check_hash(self, current: str) -> None:
        if current != self.built_from:
            raise CacheMissError("cache is stale: parameters changed since it was built")


def evolve_unitary(u: np.ndarray, p: PauliString | str) -> np.ndarray:
    return u.conj().T @ pauli_matrix(p) @ u


def evolve_congruence(w: np.ndarray, p: PauliString | str) -> np.ndarray:
    return w.T @ np.real(pauli_matrix(p)) @ w


def build_cache(
    kind: str,
    per_head_maps: Mapping[tuple[int, int], np.ndarray],
    observables: list[PauliString],
    *,
    variant: str = "",
    p: int = 0,
    built_from: str = "",
) -> ObservableCache:
    """Evolve every observable through each head's fixed map.

    ``per_head_maps`` holds the trained unitary (kind "ansatz") or the
    real value map (kind "congruence") per (layer, head).
    """
    if kind not in ("ansatz", "congruence"):
        raise ConfigError(f"unknown cache kind {kind!r}")
    evolve = evolve_unitary if kind == "ansatz" else evolve_congruence
    dim = 2 ** observables[0].n if observables else 0
    entries: dict[tuple[int, int], HeadObservables] = {}
    for key, mat in per_head_maps.items():
        mat = np.asarray(mat)
        if mat.shape != (dim, dim):
            raise ConfigError(f"map for {key} has shape {mat.shape}, observables need {(dim, dim)}")
        stack = np.stack([evolve(mat, obs) for obs in observables])[None]
        assert np.allclose(stack, np.conj(np.swapaxes(stack, -1, -2)), atol=1e-12)
        entries[key] = HeadObservables(value=_freeze(stack))
    n = observables[0].n if observables else 0
    return ObservableCache(
        kind=kind,
        n=n,
        p=p,
        variant=variant,
        built_from=built_from,
        observables=tuple(o.word for o in observables),
        evolved=MappingProxyType(entries),
    )


def cached_expectation(
    x: np.ndarray,
    cache: ObservableCache,
    layer: int,
    head: int,
    k: int,
    *,
    params_hash: str | None = None,
) -> float:
    """<x|P'|x> from the cache: one matrix-vector and one dot product."""
    if params_hash is not None:
        cache.check_hash(params_hash)
    entry = cache.entry(layer, head)
    mat = entry.value[0, k]
    x = np.asarray(x, dtype=np.complex128)
    return float(np.real(np.vdot(x, mat @ x)))


def batched_quadratic_forms(x: np.ndarray, mats: np.ndarray) -> np.ndarray:
    """Real quadratic forms x_b^T Re(M_k) x_b for row-stacked real x."""
    return np.einsum("...i,kij,...j->...k", x, np.real(mats), x, optimize=True)


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

_MAGIC = b"QOC1"


def params_hash(blob: bytes) -> str:
    return hashlib.sha256(blob).hexdigest()


def save_cache(cache: ObservableCache, path) -> None:
    """Write the documented binary format: magic, JSON header, matrix blob."""
    entries = []
    blobs = []
    for (layer, head) in sorted(cache.evolved):
        ho = cache.evolved[(layer, head)]
        for role, arr in (("value", ho.value), ("query", ho.query), ("key", ho.key)):
            if arr is None:
                continue
            inst, count, dim, _ = arr.shape
            entries.append({"layer": layer, "head": head, "role": role,
                            "instances": inst, "per_instance": count, "dim": dim})
            blobs.append(np.ascontiguousarray(arr, dtype="<c16").tobytes())
    header = json.dumps({
        "kind": cache.kind,
        "n": cache.n,
        "p": cache.p,
        "variant": cache.variant,
        "parameter_hash": cache.built_from,
        "observables": list(cache.observables),
        "entries": entries,
    }).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_cache(path) -> ObservableCache:
    with open(path, "rb") as fh:
        if fh.read(4) != _MAGIC:
            raise ConfigError(f"{path} is not an observable cache file")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        parts: dict[tuple[int, int], dict[str, np.ndarray]] = {}
        for ent in header["entries"]:
            shape = (ent["instances"], ent["per_instance"], ent["dim"], ent["dim"])
            nbytes = int(np.prod(shape)) * 16
            arr = np.frombuffer(fh.read(nbytes), dtype="<c16").reshape(shape)
            parts.setdefault((ent["layer"], ent["head"]), {})[ent["role"]] = arr
    evolved = {
        key: HeadObservables(
            value=_freeze(roles["value"]),
            query=_freeze(roles.get("query")),
            key=_freeze(roles.get("key")),
        )
        for key, roles in parts.items()
    }
    return ObservableCache(
        kind=header["kind"],
        n=header["n"],
        p=header["p"],
        variant=header["variant"],
        built_from=header["parameter_hash"],
        observables=tuple(header["observables"]),
        evolved=MappingProxyType(evolved),
    )
