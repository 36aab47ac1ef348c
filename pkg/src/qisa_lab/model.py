"""GPT-1-style autoregressive transformer with pluggable attention.

Pre-LN residual blocks (x + Attn(LN(x)), x + MLP(LN(x))), learned token
and position embeddings, a final LN, and an untied language-model head.
The attention inside every block is one of the six variants from
:mod:`qisa_lab.attention`; everything else is shared.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from types import MappingProxyType

import numpy as np

from . import qsim
from .attention import (
    AttentionSpec,
    AttentionWeights,
    QISAAWeights,
    QISAWeights,
    QSANNSharedWeights,
    QSANNWeights,
    attention_forward,
    build_attention_weights,
    causal_mask,
    total_attention_params,
)
from .errors import CheckpointError, ConfigError, ContextOverflowError
from .qsim import HeadObservables, ObservableCache, hea_unitary_tensors
from .tensor import Tensor, dropout, gather_rows, gelu, layer_norm, matmul, no_grad, reshape

CHECKPOINT_FORMAT = 1


@dataclass
class ModelConfig:
    """Everything needed to rebuild a model (weights aside)."""

    vocab_size: int
    m: int = 16
    H: int = 1
    n_layers: int = 6
    l: int = 16
    variant: str = "csa"
    p: int = 1
    seed: int = 0
    dropout: float = 0.0
    v2_kernel: str = "dot"

    def __post_init__(self):
        for name in ("vocab_size", "m", "H", "n_layers", "l", "p"):
            val = getattr(self, name)
            if not isinstance(val, int) or val < 1:
                raise ConfigError(f"model.{name} must be a positive integer, got {val!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"model.dropout must be in [0, 1), got {self.dropout}")
        # attention-level constraints (divisibility, power of two, kernel)
        self.variant = AttentionSpec(self.variant, m=self.m, H=self.H, l=self.l,
                                     p=self.p, v2_kernel=self.v2_kernel).variant

    def attention_spec(self) -> AttentionSpec:
        return AttentionSpec(self.variant, m=self.m, H=self.H, l=self.l,
                             p=self.p, v2_kernel=self.v2_kernel)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        if "variant" not in d:
            raise ConfigError("config is missing the required field 'model.variant'")
        if "vocab_size" not in d:
            raise ConfigError("config is missing the required field 'model.vocab_size'")
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown model config fields: {sorted(unknown)}")
        return cls(**d)


class Block:
    """One transformer block: pre-LN attention and pre-LN MLP, residual."""

    def __init__(self, spec: AttentionSpec, rng: np.random.Generator):
        m = spec.m
        self.ln1_gain = Tensor(np.ones(m), requires_grad=True)
        self.ln1_bias = Tensor(np.zeros(m), requires_grad=True)
        self.attn = build_attention_weights(spec, rng)
        self.ln2_gain = Tensor(np.ones(m), requires_grad=True)
        self.ln2_bias = Tensor(np.zeros(m), requires_grad=True)
        hidden = 4 * m
        self.mlp_w1 = Tensor(rng.normal(0.0, 0.02, (m, hidden)), requires_grad=True)
        self.mlp_b1 = Tensor(np.zeros(hidden), requires_grad=True)
        self.mlp_w2 = Tensor(rng.normal(0.0, 0.02, (hidden, m)), requires_grad=True)
        self.mlp_b2 = Tensor(np.zeros(m), requires_grad=True)

    def forward(self, x: Tensor, mask: np.ndarray, cache: ObservableCache | None, layer: int) -> Tensor:
        a = attention_forward(layer_norm(x, self.ln1_gain, self.ln1_bias), self.attn, mask,
                              cache=cache, layer=layer)
        x = x + a
        h = gelu(matmul(layer_norm(x, self.ln2_gain, self.ln2_bias), self.mlp_w1) + self.mlp_b1)
        return x + (matmul(h, self.mlp_w2) + self.mlp_b2)

    def named_parameters(self, prefix: str):
        out = [(f"{prefix}.ln1.gain", self.ln1_gain), (f"{prefix}.ln1.bias", self.ln1_bias)]
        out += [(f"{prefix}.attn.{n}", t) for n, t in self.attn.named_parameters()]
        out += [(f"{prefix}.ln2.gain", self.ln2_gain), (f"{prefix}.ln2.bias", self.ln2_bias),
                (f"{prefix}.mlp.w1", self.mlp_w1), (f"{prefix}.mlp.b1", self.mlp_b1),
                (f"{prefix}.mlp.w2", self.mlp_w2), (f"{prefix}.mlp.b2", self.mlp_b2)]
        return out


class LanguageModel:
    def __init__(self, config: ModelConfig):
        self.config = config
        rng = np.random.default_rng(config.seed)
        m = config.m
        self.tok_emb = Tensor(rng.normal(0.0, 0.02, (config.vocab_size, m)), requires_grad=True)
        self.pos_emb = Tensor(rng.normal(0.0, 0.02, (config.l, m)), requires_grad=True)
        spec = config.attention_spec()
        self.blocks = [Block(spec, rng) for _ in range(config.n_layers)]
        self.lnf_gain = Tensor(np.ones(m), requires_grad=True)
        self.lnf_bias = Tensor(np.zeros(m), requires_grad=True)
        self.lm_head = Tensor(rng.normal(0.0, 0.02, (m, config.vocab_size)), requires_grad=True)
        self._dropout_rng = np.random.default_rng(config.seed + 1)

    # -- forward ------------------------------------------------------------

    def forward(self, ids, cache: ObservableCache | None = None, training: bool = False) -> Tensor:
        """Next-token logits for ids of shape [T] or [B, T]."""
        ids = np.asarray(ids)
        squeeze = ids.ndim == 1
        if squeeze:
            ids = ids[None]
        if ids.ndim != 2:
            raise ConfigError(f"token ids must be 1-d or 2-d, got shape {ids.shape}")
        b, t = ids.shape
        if t > self.config.l:
            raise ContextOverflowError(f"sequence length {t} exceeds context size {self.config.l}")
        if t < 1:
            raise ConfigError("empty token sequence")
        if ids.min() < 0 or ids.max() >= self.config.vocab_size:
            raise IndexError(f"token id outside [0, {self.config.vocab_size})")
        if cache is not None:
            cache.check_hash(self.parameter_hash())

        m = self.config.m
        tok = reshape(gather_rows(self.tok_emb, ids.reshape(-1)), (b, t, m))
        pos = gather_rows(self.pos_emb, np.arange(t))
        x = tok + pos
        if training and self.config.dropout > 0:
            x = dropout(x, self.config.dropout, self._dropout_rng)
        mask = causal_mask(t)
        for layer, block in enumerate(self.blocks):
            x = block.forward(x, mask, cache, layer)
        x = layer_norm(x, self.lnf_gain, self.lnf_bias)
        logits = matmul(x, self.lm_head)
        return reshape(logits, (t, self.config.vocab_size)) if squeeze else logits

    # -- parameter bookkeeping ------------------------------------------------

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = [("tok_emb", self.tok_emb), ("pos_emb", self.pos_emb)]
        for i, block in enumerate(self.blocks):
            out += block.named_parameters(f"block{i}")
        out += [("ln_f.gain", self.lnf_gain), ("ln_f.bias", self.lnf_bias), ("lm_head", self.lm_head)]
        return out

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def zero_grad(self) -> None:
        for t in self.parameters():
            t.zero_grad()

    def total_param_count(self) -> int:
        return sum(t.size for t in self.parameters())

    def attention_param_count_per_layer(self) -> int:
        count = self.blocks[0].attn.param_count()
        assert count == total_attention_params(self.config.attention_spec())
        return count

    def parameter_blob(self) -> bytes:
        return b"".join(np.ascontiguousarray(t.data, dtype="<f8").tobytes()
                        for _, t in self.named_parameters())

    def parameter_hash(self) -> str:
        return qsim.params_hash(self.parameter_blob())

    # -- checkpointing --------------------------------------------------------

    def save(self, path, vocab_chars: list[str] | None = None, extra: dict | None = None) -> None:
        """Write ``<path>.json`` (manifest) and ``<path>.bin`` (parameters)."""
        path = str(path)
        blob = self.parameter_blob()
        manifest = {
            "format": CHECKPOINT_FORMAT,
            "config": asdict(self.config),
            "parameters": [{"name": n, "shape": list(t.shape)} for n, t in self.named_parameters()],
            "parameter_hash": qsim.params_hash(blob),
            "vocab": vocab_chars,
        }
        if extra:
            manifest["extra"] = extra
        with open(path + ".json", "w", encoding="utf-8") as fh:
            json.dump(manifest, fh, indent=1)
        with open(path + ".bin", "wb") as fh:
            fh.write(blob)

    @classmethod
    def load(cls, path) -> tuple["LanguageModel", list[str] | None]:
        path = str(path)
        try:
            with open(path + ".json", "r", encoding="utf-8") as fh:
                manifest = json.load(fh)
        except FileNotFoundError as exc:
            raise CheckpointError(f"checkpoint manifest {path}.json not found") from exc
        if manifest.get("format") != CHECKPOINT_FORMAT:
            raise CheckpointError(f"unsupported checkpoint format {manifest.get('format')}")
        model = cls(ModelConfig(**manifest["config"]))
        expected = [(n, tuple(t.shape)) for n, t in model.named_parameters()]
        listed = [(e["name"], tuple(e["shape"])) for e in manifest["parameters"]]
        if expected != listed:
            raise CheckpointError("checkpoint parameter layout does not match this configuration")
        with open(path + ".bin", "rb") as fh:
            blob = fh.read()
        if qsim.params_hash(blob) != manifest["parameter_hash"]:
            raise CheckpointError("checkpoint blob does not match its recorded hash")
        offset = 0
        for _, t in model.named_parameters():
            nbytes = t.size * 8
            t.data = np.frombuffer(blob[offset:offset + nbytes], dtype="<f8").reshape(t.shape).copy()
            offset += nbytes
        if offset != len(blob):
            raise CheckpointError("checkpoint blob has trailing bytes")
        return model, manifest.get("vocab")

    # -- evolved-observable cache ---------------------------------------------

    def build_observable_cache(self) -> ObservableCache:
        """Freeze the current value (and q/k) maps into evolved observables."""
        spec = self.config.attention_spec()
        if spec.variant == "csa":
            raise ConfigError("the classical variant has no observables to cache")
        entries: dict[tuple[int, int], HeadObservables] = {}
        for layer, block in enumerate(self.blocks):
            for head in range(spec.H):
                entries[(layer, head)] = _evolve_head(block.attn, head)
        kind = "congruence" if spec.variant == "qisa" else "ansatz"
        return ObservableCache(
            kind=kind,
            n=spec.n_qubits,
            p=spec.p,
            variant=spec.variant,
            built_from=self.parameter_hash(),
            observables=tuple(o.word for o in self.blocks[0].attn.value_obs),
            evolved=MappingProxyType(entries),
        )


def _unitary_of(theta: Tensor, spec: AttentionSpec) -> np.ndarray:
    with no_grad():
        re, im = hea_unitary_tensors(theta, spec.n_qubits, spec.p)
    return re.data + 1j * im.data


def _evolve_head(attn: AttentionWeights, head: int) -> HeadObservables:
    spec = attn.spec
    if isinstance(attn, QISAWeights):
        w = attn.wv_tilde[head].data
        stack = np.stack([qsim.evolve_congruence(w, o) for o in attn.value_obs])[None]
        return HeadObservables(value=_frozen(stack))
    if isinstance(attn, QISAAWeights):
        u = _unitary_of(attn.theta[head], spec)
        stack = np.stack([qsim.evolve_unitary(u, o) for o in attn.value_obs])[None]
        return HeadObservables(value=_frozen(stack))
    if isinstance(attn, QSANNWeights):
        scalar = [attn.scalar_obs]
        q_stack = np.stack([
            np.stack([qsim.evolve_unitary(_unitary_of(attn.theta_q[head][i], spec), o) for o in scalar])
            for i in range(spec.l)
        ])
        k_stack = np.stack([
            np.stack([qsim.evolve_unitary(_unitary_of(attn.theta_k[head][i], spec), o) for o in scalar])
            for i in range(spec.l)
        ])
        v_stack = np.stack([
            np.stack([qsim.evolve_unitary(_unitary_of(attn.theta_v[head][i], spec), o) for o in attn.value_obs])
            for i in range(spec.l)
        ])
        return HeadObservables(value=_frozen(v_stack), query=_frozen(q_stack), key=_frozen(k_stack))
    if isinstance(attn, QSANNSharedWeights):
        qk_obs = attn.qk_obs if spec.variant == "qsann_v2" else [attn.scalar_obs]
        uq = _unitary_of(attn.theta_q[head], spec)
        uk = _unitary_of(attn.theta_k[head], spec)
        uv = _unitary_of(attn.theta_v[head], spec)
        return HeadObservables(
            value=_frozen(np.stack([qsim.evolve_unitary(uv, o) for o in attn.value_obs])[None]),
            query=_frozen(np.stack([qsim.evolve_unitary(uq, o) for o in qk_obs])[None]),
            key=_frozen(np.stack([qsim.evolve_unitary(uk, o) for o in qk_obs])[None]),
        )
    raise ConfigError(f"no cache recipe for {type(attn).__name__}")


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.complex128)
    a.flags.writeable = False
    return a


def model_forward(tokens, model: LanguageModel) -> Tensor:
    """Logits for a single token sequence (length at most the context)."""
    return model.forward(tokens)


def total_param_count(model: LanguageModel) -> int:
    return model.total_param_count()
