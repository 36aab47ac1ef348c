"""Character-level language modeling lab with swappable self-attention.

Six attention mechanisms behind one interface: classical scaled
dot-product (csa), quantum-inspired congruence values (qisa), an
ansatz-based variant (qisa_a), and three measurement-based networks
(qsann, qsann_v1, qsann_v2), all trained with the same tape-based
autodiff engine and servable through an evolved-observable cache.
"""

__version__ = "0.1.0"

from .attention import AttentionSpec, VARIANTS, causal_mask, count_params  # noqa: E402,F401
from .data import Vocab, build_vocab, load_corpus, split_dataset  # noqa: E402,F401
from .metrics import cer, levenshtein, wer  # noqa: E402,F401
from .model import LanguageModel, ModelConfig  # noqa: E402,F401
from .tensor import Tensor, no_grad  # noqa: E402,F401
from .training import Adam, TrainConfig, evaluate_ce, evaluate_cer_wer, generate, train  # noqa: E402,F401
