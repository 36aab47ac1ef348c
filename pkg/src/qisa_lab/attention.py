"""Six causal self-attention mechanisms behind one forward interface.

* csa      - scaled dot-product attention with a classical value layer
* qisa     - value layer replaced by quadratic-form features
             <x|W^T P W|x> of Pauli observables over a trainable map W
* qisa_a   - like qisa, but the map is a parameterized circuit acting
             on the amplitude-encoded token
* qsann    - per-position circuits produce scalar queries/keys (first-
             qubit Z) and observable-vector values; Gaussian-kernel
             attention; no output projection
* qsann_v1 - qsann with one circuit triple shared across positions
* qsann_v2 - qsann_v1 with vector-valued queries/keys built from
             observable expectations

Every forward accepts [l, m] or batched [B, l, m] input and an additive
causal mask, and is differentiable through the tape engine.  When an
evolved-observable cache is supplied the circuit/map application is
skipped and value (and q/k) features come from single quadratic forms.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .qsim import (
    ObservableCache,
    PauliString,
    batched_quadratic_forms,
    hea_unitary_tensors,
    pauli_matrix,
    select_observables,
)
from .tensor import (
    Tensor,
    concat,
    matmul,
    normalize_rows,
    reshape,
    softmax_rows,
    swap_last,
    take_index,
)

VARIANTS = ("csa", "qisa", "qisa_a", "qsann", "qsann_v1", "qsann_v2")

_ALIASES = {
    "csa": "csa",
    "qisa": "qisa",
    "qisa_a": "qisa_a",
    "qisa-a": "qisa_a",
    "qisaa": "qisa_a",
    "qsann": "qsann",
    "qsann_v1": "qsann_v1",
    "qsannv1": "qsann_v1",
    "qsann_v2": "qsann_v2",
    "qsannv2": "qsann_v2",
}


def canonical_variant(name: str) -> str:
    key = name.strip().lower().replace(" ", "")
    if key not in _ALIASES:
        raise ConfigError(f"unknown attention variant {name!r}; choose one of {VARIANTS}")
    return _ALIASES[key]


@dataclass
class AttentionSpec:
    """Shape-level description of one attention mechanism."""

    variant: str
    m: int
    H: int
    l: int
    p: int = 1
    v2_kernel: str = "dot"  # "dot" or "gaussian" for qsann_v2
    obs_mode: str | None = None  # override the per-variant observable set

    def __post_init__(self):
        self.variant = canonical_variant(self.variant)
        if self.m < 1 or self.H < 1 or self.l < 1 or self.p < 1:
            raise ConfigError("m, H, l, p must all be positive")
        if self.m % self.H != 0:
            raise ConfigError(f"embedding size {self.m} is not divisible by {self.H} heads")
        if self.variant != "csa" and (self.m & (self.m - 1)) != 0:
            raise ConfigError(f"quantum variants need a power-of-two embedding size, got {self.m}")
        if self.v2_kernel not in ("dot", "gaussian"):
            raise ConfigError(f"v2_kernel must be 'dot' or 'gaussian', got {self.v2_kernel!r}")
        if self.variant == "qsann" and self.H > 1:
            warnings.warn("the per-position variant is normally compared with a single head", stacklevel=2)

    @property
    def h(self) -> int:
        return self.m // self.H

    @property
    def n_qubits(self) -> int:
        return max(1, math.ceil(math.log2(self.m)))

    @property
    def uses_wo(self) -> bool:
        return self.variant in ("csa", "qisa", "qisa_a")

    @property
    def value_obs_mode(self) -> str:
        if self.obs_mode is not None:
            return self.obs_mode
        return "real_congruence" if self.variant == "qisa" else "unitary"

    def value_observables(self) -> list[PauliString]:
        return select_observables(self.n_qubits, self.h, self.value_obs_mode)

    def qk_observables(self) -> list[PauliString]:
        return select_observables(self.n_qubits, self.m, "unitary")


def causal_mask(l: int) -> np.ndarray:
    """Additive mask: 0 on and below the diagonal, -inf above."""
    if l < 1:
        raise ConfigError("mask length must be positive")
    mask = np.zeros((l, l))
    mask[np.triu_indices(l, k=1)] = -np.inf
    return mask


def count_params(spec: AttentionSpec) -> int:
    """Trainable scalars per head (output projection excluded)."""
    m, h, p, l = spec.m, spec.h, spec.p, spec.l
    n3 = 3 * spec.n_qubits  # rotation angles per ansatz layer
    if spec.variant == "csa":
        return 3 * m * h
    if spec.variant == "qisa":
        return 2 * m * h + m * m
    if spec.variant == "qisa_a":
        return 2 * m * h + n3 * p
    if spec.variant == "qsann":
        return 3 * n3 * p * l
    return 3 * n3 * p  # qsann_v1, qsann_v2


def output_projection_params(spec: AttentionSpec) -> int:
    return spec.m * spec.m if spec.uses_wo else 0


def total_attention_params(spec: AttentionSpec) -> int:
    return count_params(spec) * spec.H + output_projection_params(spec)


# ---------------------------------------------------------------------------
# weights
# ---------------------------------------------------------------------------


def _normal(rng, shape):
    return Tensor(rng.normal(0.0, 0.02, shape), requires_grad=True)


def _angles(rng, spec):
    return Tensor(rng.uniform(-np.pi, np.pi, size=(spec.p, spec.n_qubits, 3)), requires_grad=True)


def _obs_tensor_pairs(observables):
    """Constant (Re(P)^T, Im(P)^T) tensors; the imaginary part may be None."""
    pairs = []
    for obs in observables:
        mat = pauli_matrix(obs)
        re_t = Tensor(np.ascontiguousarray(mat.real.T))
        im = mat.imag
        im_t = Tensor(np.ascontiguousarray(im.T)) if np.any(im) else None
        pairs.append((re_t, im_t))
    return pairs


class AttentionWeights:
    """Base: holds an AttentionSpec and enumerates trainable tensors by name."""

    spec: AttentionSpec

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        raise NotImplementedError

    def param_count(self) -> int:
        return sum(t.size for _, t in self.named_parameters())


class CSAWeights(AttentionWeights):
    def __init__(self, spec: AttentionSpec, rng: np.random.Generator):
        self.spec = spec
        m, h = spec.m, spec.h
        self.wq = [_normal(rng, (m, h)) for _ in range(spec.H)]
        self.wk = [_normal(rng, (m, h)) for _ in range(spec.H)]
        self.wv = [_normal(rng, (m, h)) for _ in range(spec.H)]
        self.wo = _normal(rng, (m, m))

    def named_parameters(self):
        out = []
        for j in range(self.spec.H):
            out += [(f"head{j}.wq", self.wq[j]), (f"head{j}.wk", self.wk[j]), (f"head{j}.wv", self.wv[j])]
        out.append(("wo", self.wo))
        return out


class QISAWeights(AttentionWeights):
    def __init__(self, spec: AttentionSpec, rng: np.random.Generator):
        self.spec = spec
        m, h = spec.m, spec.h
        self.wq = [_normal(rng, (m, h)) for _ in range(spec.H)]
        self.wk = [_normal(rng, (m, h)) for _ in range(spec.H)]
        # std 1/sqrt(m) keeps |W x| ~ 1 for unit tokens, so the quadratic-form
        # features start in the same [-1, 1] range the unitary variants produce
        self.wv_tilde = [Tensor(rng.normal(0.0, m**-0.5, (m, m)), requires_grad=True)
                         for _ in range(spec.H)]
        self.wo = _normal(rng, (m, m))
        self.value_obs = spec.value_observables()
        self._value_re = [Tensor(np.real(pauli_matrix(o))) for o in self.value_obs]

    def named_parameters(self):
        out = []
        for j in range(self.spec.H):
            out += [(f"head{j}.wq", self.wq[j]), (f"head{j}.wk", self.wk[j]),
                    (f"head{j}.wv_tilde", self.wv_tilde[j])]
        out.append(("wo", self.wo))
        return out


class QISAAWeights(AttentionWeights):
    def __init__(self, spec: AttentionSpec, rng: np.random.Generator):
        self.spec = spec
        m, h = spec.m, spec.h
        self.wq = [_normal(rng, (m, h)) for _ in range(spec.H)]
        self.wk = [_normal(rng, (m, h)) for _ in range(spec.H)]
        self.theta = [_angles(rng, spec) for _ in range(spec.H)]
        self.wo = _normal(rng, (m, m))
        self.value_obs = spec.value_observables()
        self._value_pairs = _obs_tensor_pairs(self.value_obs)

    def named_parameters(self):
        out = []
        for j in range(self.spec.H):
            out += [(f"head{j}.wq", self.wq[j]), (f"head{j}.wk", self.wk[j]),
                    (f"head{j}.theta", self.theta[j])]
        out.append(("wo", self.wo))
        return out


class QSANNWeights(AttentionWeights):
    """Original per-position form: one circuit triple per token slot."""

    def __init__(self, spec: AttentionSpec, rng: np.random.Generator):
        self.spec = spec
        self.theta_q = [[_angles(rng, spec) for _ in range(spec.l)] for _ in range(spec.H)]
        self.theta_k = [[_angles(rng, spec) for _ in range(spec.l)] for _ in range(spec.H)]
        self.theta_v = [[_angles(rng, spec) for _ in range(spec.l)] for _ in range(spec.H)]
        self.value_obs = spec.value_observables()
        self._value_pairs = _obs_tensor_pairs(self.value_obs)
        self.scalar_obs = PauliString("Z" + "I" * (spec.n_qubits - 1))
        self._scalar_pair = _obs_tensor_pairs([self.scalar_obs])

    def named_parameters(self):
        out = []
        for j in range(self.spec.H):
            for i in range(self.spec.l):
                out += [(f"head{j}.pos{i}.theta_q", self.theta_q[j][i]),
                        (f"head{j}.pos{i}.theta_k", self.theta_k[j][i]),
                        (f"head{j}.pos{i}.theta_v", self.theta_v[j][i])]
        return out


class QSANNSharedWeights(AttentionWeights):
    """Shared circuit triple per head (qsann_v1 and qsann_v2)."""

    def __init__(self, spec: AttentionSpec, rng: np.random.Generator):
        self.spec = spec
        self.theta_q = [_angles(rng, spec) for _ in range(spec.H)]
        self.theta_k = [_angles(rng, spec) for _ in range(spec.H)]
        self.theta_v = [_angles(rng, spec) for _ in range(spec.H)]
        self.value_obs = spec.value_observables()
        self._value_pairs = _obs_tensor_pairs(self.value_obs)
        if spec.variant == "qsann_v2":
            self.qk_obs = spec.qk_observables()
            self._qk_pairs = _obs_tensor_pairs(self.qk_obs)
        else:
            self.scalar_obs = PauliString("Z" + "I" * (spec.n_qubits - 1))
            self._scalar_pair = _obs_tensor_pairs([self.scalar_obs])

    def named_parameters(self):
        out = []
        for j in range(self.spec.H):
            out += [(f"head{j}.theta_q", self.theta_q[j]),
                    (f"head{j}.theta_k", self.theta_k[j]),
                    (f"head{j}.theta_v", self.theta_v[j])]
        return out


def build_attention_weights(spec: AttentionSpec, rng: np.random.Generator) -> AttentionWeights:
    cls = {
        "csa": CSAWeights,
        "qisa": QISAWeights,
        "qisa_a": QISAAWeights,
        "qsann": QSANNWeights,
        "qsann_v1": QSANNSharedWeights,
        "qsann_v2": QSANNSharedWeights,
    }[spec.variant]
    return cls(spec, rng)


# ---------------------------------------------------------------------------
# forward helpers
# ---------------------------------------------------------------------------


def _ensure_3d(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 2:
        return reshape(x, (1,) + x.shape), True
    if x.ndim == 3:
        return x, False
    raise ShapeError(f"attention input must be [l, m] or [B, l, m], got {x.shape}")


def _evolved_states(xn: Tensor, theta: Tensor, spec: AttentionSpec) -> tuple[Tensor, Tensor]:
    """Apply the ansatz to row-encoded tokens: rows of xn become U|x>."""
    u_re, u_im = hea_unitary_tensors(theta, spec.n_qubits, spec.p)
    return matmul(xn, u_re.T), matmul(xn, u_im.T)


def _complex_expectations(s_re: Tensor, s_im: Tensor, pairs) -> Tensor:
    """Re(<s|P|s>) for each observable pair, stacked along the last axis."""
    feats = []
    for re_t, im_t in pairs:
        t_re = matmul(s_re, re_t)
        t_im = matmul(s_im, re_t)
        if im_t is not None:
            t_re = t_re - matmul(s_im, im_t)
            t_im = t_im + matmul(s_re, im_t)
        val = (s_re * t_re).sum(axis=-1, keepdims=True) + (s_im * t_im).sum(axis=-1, keepdims=True)
        feats.append(val)
    return concat(feats, axis=-1)


def _dot_attention(q: Tensor, k: Tensor, scale: float, mask: np.ndarray) -> Tensor:
    scores = matmul(q, swap_last(k)) * scale
    return softmax_rows(scores + Tensor(mask))


def gaussian_attention(q: Tensor, k: Tensor, mask: np.ndarray) -> Tensor:
    """Kernel attention A_ij = exp(-(q_i - k_j)^2), normalized over j <= i.

    The additive mask zeroes the upper triangle before normalization, so
    each row is a distribution over the causal prefix.
    """
    if q.shape != k.shape:
        raise ShapeError("query and key score vectors must have the same shape")
    l = q.shape[-1]
    qe = reshape(q, q.shape + (1,))
    ke = reshape(k, k.shape[:-1] + (1, l))
    diff = qe - ke
    return softmax_rows((diff * diff) * -1.0 + Tensor(mask))


def _vector_gaussian_attention(q: Tensor, k: Tensor, mask: np.ndarray) -> Tensor:
    """Gaussian kernel on squared distances between q/k feature vectors."""
    l, m = q.shape[-2], q.shape[-1]
    qe = reshape(q, q.shape[:-2] + (l, 1, m))
    ke = reshape(k, k.shape[:-2] + (1, l, m))
    diff = qe - ke
    sq = (diff * diff).sum(axis=-1)
    return softmax_rows(sq * -1.0 + Tensor(mask))


# ---------------------------------------------------------------------------
# variant forwards
# ---------------------------------------------------------------------------


def csa_forward(x: Tensor, w: CSAWeights, mask: np.ndarray) -> Tensor:
    x3, squeeze = _ensure_3d(x)
    scale = 1.0 / math.sqrt(w.spec.h)
    heads = []
    for j in range(w.spec.H):
        q = matmul(x3, w.wq[j])
        k = matmul(x3, w.wk[j])
        v = matmul(x3, w.wv[j])
        heads.append(matmul(_dot_attention(q, k, scale, mask), v))
    out = matmul(concat(heads, axis=-1), w.wo)
    return reshape(out, out.shape[1:]) if squeeze else out


def _congruence_features(xn: Tensor, wv_tilde: Tensor, value_re_mats: list[Tensor]) -> Tensor:
    y = matmul(xn, wv_tilde.T)
    feats = []
    for mat in value_re_mats:
        t = matmul(y, mat)  # Re(P) is symmetric, so this is (P y)^T row-wise
        feats.append((t * y).sum(axis=-1, keepdims=True))
    return concat(feats, axis=-1)


def qisa_value(x: Tensor, wv_tilde: Tensor, value_re_mats: list[Tensor]) -> Tensor:
    """Quadratic-form value features of L2-normalized tokens.

    Row i holds <x_i|W^T P_k W|x_i> for each observable's real matrix.
    """
    return _congruence_features(normalize_rows(x, zero_fallback=True), wv_tilde, value_re_mats)


def qisa_forward(x: Tensor, w: QISAWeights, mask: np.ndarray,
                 cache: ObservableCache | None = None, layer: int = 0) -> Tensor:
    x3, squeeze = _ensure_3d(x)
    scale = 1.0 / math.sqrt(w.spec.h)
    xn = normalize_rows(x3, zero_fallback=True)
    heads = []
    for j in range(w.spec.H):
        q = matmul(x3, w.wq[j])
        k = matmul(x3, w.wk[j])
        if cache is not None:
            v = Tensor(batched_quadratic_forms(xn.data, cache.entry(layer, j).value[0]))
        else:
            v = _congruence_features(xn, w.wv_tilde[j], w._value_re)
        heads.append(matmul(_dot_attention(q, k, scale, mask), v))
    out = matmul(concat(heads, axis=-1), w.wo)
    return reshape(out, out.shape[1:]) if squeeze else out


def qisa_a_forward(x: Tensor, w: QISAAWeights, mask: np.ndarray,
                   cache: ObservableCache | None = None, layer: int = 0) -> Tensor:
    x3, squeeze = _ensure_3d(x)
    scale = 1.0 / math.sqrt(w.spec.h)
    xn = normalize_rows(x3, zero_fallback=True)
    heads = []
    for j in range(w.spec.H):
        q = matmul(x3, w.wq[j])
        k = matmul(x3, w.wk[j])
        if cache is not None:
            v = Tensor(batched_quadratic_forms(xn.data, cache.entry(layer, j).value[0]))
        else:
            s_re, s_im = _evolved_states(xn, w.theta[j], w.spec)
            v = _complex_expectations(s_re, s_im, w._value_pairs)
        heads.append(matmul(_dot_attention(q, k, scale, mask), v))
    out = matmul(concat(heads, axis=-1), w.wo)
    return reshape(out, out.shape[1:]) if squeeze else out


def qsann_forward(x: Tensor, w: QSANNWeights, mask: np.ndarray,
                  cache: ObservableCache | None = None, layer: int = 0) -> Tensor:
    x3, squeeze = _ensure_3d(x)
    spec = w.spec
    l = x3.shape[1]
    if l > spec.l:
        raise ShapeError(f"sequence length {l} exceeds the {spec.l} per-position circuits")
    xn = normalize_rows(x3, zero_fallback=True)
    heads = []
    for j in range(spec.H):
        if cache is not None:
            entry = cache.entry(layer, j)
            qs = np.einsum("bli,lij,blj->bl", xn.data, np.real(entry.query[:l, 0]), xn.data, optimize=True)
            ks = np.einsum("bli,lij,blj->bl", xn.data, np.real(entry.key[:l, 0]), xn.data, optimize=True)
            vals = np.einsum("bli,lkij,blj->blk", xn.data, np.real(entry.value[:l]), xn.data, optimize=True)
            q, k, v = Tensor(qs), Tensor(ks), Tensor(vals)
        else:
            q_cols, k_cols, v_rows = [], [], []
            for i in range(l):
                xi = take_index(xn, i, axis=1)
                sq = _evolved_states(xi, w.theta_q[j][i], spec)
                sk = _evolved_states(xi, w.theta_k[j][i], spec)
                sv = _evolved_states(xi, w.theta_v[j][i], spec)
                q_cols.append(_complex_expectations(*sq, w._scalar_pair))
                k_cols.append(_complex_expectations(*sk, w._scalar_pair))
                vi = _complex_expectations(*sv, w._value_pairs)
                v_rows.append(reshape(vi, (vi.shape[0], 1, vi.shape[1])))
            q = concat(q_cols, axis=-1)
            k = concat(k_cols, axis=-1)
            v = concat(v_rows, axis=1)
        heads.append(matmul(gaussian_attention(q, k, mask), v))
    out = concat(heads, axis=-1)
    return reshape(out, out.shape[1:]) if squeeze else out


def qsann_v1_forward(x: Tensor, w: QSANNSharedWeights, mask: np.ndarray,
                     cache: ObservableCache | None = None, layer: int = 0) -> Tensor:
    x3, squeeze = _ensure_3d(x)
    spec = w.spec
    xn = normalize_rows(x3, zero_fallback=True)
    heads = []
    for j in range(spec.H):
        if cache is not None:
            entry = cache.entry(layer, j)
            q = Tensor(batched_quadratic_forms(xn.data, entry.query[0])[..., 0])
            k = Tensor(batched_quadratic_forms(xn.data, entry.key[0])[..., 0])
            v = Tensor(batched_quadratic_forms(xn.data, entry.value[0]))
        else:
            sq = _evolved_states(xn, w.theta_q[j], spec)
            sk = _evolved_states(xn, w.theta_k[j], spec)
            sv = _evolved_states(xn, w.theta_v[j], spec)
            q = reshape(_complex_expectations(*sq, w._scalar_pair), xn.shape[:-1])
            k = reshape(_complex_expectations(*sk, w._scalar_pair), xn.shape[:-1])
            v = _complex_expectations(*sv, w._value_pairs)
        heads.append(matmul(gaussian_attention(q, k, mask), v))
    out = concat(heads, axis=-1)
    return reshape(out, out.shape[1:]) if squeeze else out


def qsann_v2_forward(x: Tensor, w: QSANNSharedWeights, mask: np.ndarray,
                     cache: ObservableCache | None = None, layer: int = 0) -> Tensor:
    x3, squeeze = _ensure_3d(x)
    spec = w.spec
    xn = normalize_rows(x3, zero_fallback=True)
    scale = 1.0 / math.sqrt(spec.m)
    heads = []
    for j in range(spec.H):
        if cache is not None:
            entry = cache.entry(layer, j)
            q = Tensor(batched_quadratic_forms(xn.data, entry.query[0]))
            k = Tensor(batched_quadratic_forms(xn.data, entry.key[0]))
            v = Tensor(batched_quadratic_forms(xn.data, entry.value[0]))
        else:
            sq = _evolved_states(xn, w.theta_q[j], spec)
            sk = _evolved_states(xn, w.theta_k[j], spec)
            sv = _evolved_states(xn, w.theta_v[j], spec)
            q = _complex_expectations(*sq, w._qk_pairs)
            k = _complex_expectations(*sk, w._qk_pairs)
            v = _complex_expectations(*sv, w._value_pairs)
        if spec.v2_kernel == "dot":
            attn = _dot_attention(q, k, scale, mask)
        else:
            attn = _vector_gaussian_attention(q, k, mask)
        heads.append(matmul(attn, v))
    out = concat(heads, axis=-1)
    return reshape(out, out.shape[1:]) if squeeze else out


_FORWARDS = {
    "csa": csa_forward,
    "qisa": qisa_forward,
    "qisa_a": qisa_a_forward,
    "qsann": qsann_forward,
    "qsann_v1": qsann_v1_forward,
    "qsann_v2": qsann_v2_forward,
}


def attention_forward(x: Tensor, w: AttentionWeights, mask: np.ndarray,
                      cache: ObservableCache | None = None, layer: int = 0) -> Tensor:
    """Dispatch to the forward of the weights' variant."""
    fn = _FORWARDS[w.spec.variant]
    if w.spec.variant == "csa":
        return fn(x, w, mask)
    return fn(x, w, mask, cache=cache, layer=layer)
