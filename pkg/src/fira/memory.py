"""Memory estimates for weights and optimizer state.

Estimates follow the usual accounting for half-precision training:
every stored value costs 2 bytes, and totals cover weights plus
optimizer state only (no activations or gradients).  Per-matrix state
element counts, with m <= n after orienting each matrix:

    full Adam        2mn
    galore           mr + 2nr        (projector + two low-rank moments)
    fira             mr + 2nr + 1    (plus the previous residual norm)
    lora             2mr + 2nr       (moments for both factors)

LoRA also changes the weight count: the frozen base stays resident and
the two factors add mr + nr on top.

The projected methods and LoRA treat every linear-layer matrix,
including the output head, as projected/adapted; the embedding table
and all 1-D parameters always carry full Adam state.  These are also
the matrices a projector can act on in practice: the embedding is a
lookup table rather than a matmul weight.
"""

from dataclasses import dataclass

BYTES_PER_VALUE = 2
GB = 1_000_000_000

ESTIMATE_METHODS = ("full", "fira", "galore", "lora")


@dataclass(frozen=True)
class ArchSpec:
    """Transformer shape in the LLaMA style: per layer, four square
    attention projections, a three-matrix gated MLP, and two norm
    vectors; tied nothing; rotary positions (no learned position
    table)."""

    hidden: int
    intermediate: int
    heads: int
    layers: int
    vocab: int = 32000
    max_seq: int = 256

    def __post_init__(self):
        for name in ("hidden", "intermediate", "heads", "layers", "vocab",
                     "max_seq"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")


BUILTIN_ARCHS = {
    "llama-60m": ArchSpec(hidden=512, intermediate=1376, heads=8, layers=8),
    "llama-130m": ArchSpec(hidden=768, intermediate=2048, heads=12, layers=12),
    "llama-350m": ArchSpec(hidden=1024, intermediate=2736, heads=16, layers=24),
    "llama-1b": ArchSpec(hidden=2048, intermediate=5461, heads=24, layers=32),
    "llama-7b": ArchSpec(hidden=4096, intermediate=11008, heads=32, layers=32),
}


@dataclass(frozen=True)
class ParamInventory:
    """Every trainable shape of an architecture.

    matrices lists (rows, cols) for the embedding (index 0), then per
    layer Q, K, V, O, gate, up, down, then the output head.
    vector_elements totals the 1-D parameters (norm scales).
    """

    matrices: tuple
    vector_elements: int
    embedding_index: int = 0

    def total_params(self) -> int:
        return sum(m * n for m, n in self.matrices) + self.vector_elements


def weight_matrix_shapes(arch: ArchSpec) -> ParamInventory:
    """Enumerate the weight shapes of a LLaMA-style decoder."""
    matrices = [(arch.vocab, arch.hidden)]
    for _ in range(arch.layers):
        matrices += [(arch.hidden, arch.hidden)] * 4      # Q K V O
        matrices += [(arch.hidden, arch.intermediate)] * 2  # gate, up
        matrices += [(arch.intermediate, arch.hidden)]      # down
    matrices.append((arch.hidden, arch.vocab))            # output head
    # two norm vectors per layer plus the final norm
    vector_elements = (2 * arch.layers + 1) * arch.hidden
    return ParamInventory(tuple(matrices), vector_elements)


def state_elements(method: str, m: int, n: int, r: int | None) -> int:
    """Optimizer state element count for one m x n matrix."""
    if method not in ESTIMATE_METHODS:
        raise ValueError(f"unknown method {method!r}")
    if method == "full":
        return 2 * m * n
    if r is None:
        raise ValueError(f"method {method!r} needs a rank")
    small, large = sorted((m, n))
    if not 1 <= r <= small:
        raise ValueError(
            f"rank must satisfy 1 <= r <= {small} for a {m}x{n} matrix, "
            f"got {r}"
        )
    if method == "galore":
        return small * r + 2 * large * r
    if method == "fira":
        return small * r + 2 * large * r + 1
    return 2 * small * r + 2 * large * r  # lora


def weight_elements(method: str, m: int, n: int, r: int | None) -> int:
    """Stored weight element count for one m x n matrix."""
    if method not in ESTIMATE_METHODS:
        raise ValueError(f"unknown method {method!r}")
    if method == "lora":
        if r is None:
            raise ValueError("method 'lora' needs a rank")
        return m * n + m * r + n * r
    return m * n


@dataclass(frozen=True)
class MemoryEstimate:
    method: str
    rank: int | None
    weight_bytes: int
    optimizer_state_bytes: int

    @property
    def total_bytes(self) -> int:
        return self.weight_bytes + self.optimizer_state_bytes

    @property
    def total_gb(self) -> float:
        return self.total_bytes / GB


def estimate(arch: ArchSpec, method: str, rank: int | None = None) -> MemoryEstimate:
    """Bytes for weights and optimizer state of a whole architecture."""
    if method not in ESTIMATE_METHODS:
        raise ValueError(f"unknown method {method!r}")
    if method != "full" and rank is None:
        raise ValueError(f"method {method!r} needs a rank")
    inv = weight_matrix_shapes(arch)
    weight_elems = 0
    state_elems = 0
    for idx, (m, n) in enumerate(inv.matrices):
        if idx == inv.embedding_index:
            weight_elems += weight_elements("full", m, n, None)
            state_elems += state_elements("full", m, n, None)
        else:
            weight_elems += weight_elements(method, m, n, rank)
            state_elems += state_elements(method, m, n, rank)
    weight_elems += inv.vector_elements
    state_elems += 2 * inv.vector_elements
    return MemoryEstimate(
        method=method,
        rank=None if method == "full" else rank,
        weight_bytes=BYTES_PER_VALUE * weight_elems,
        optimizer_state_bytes=BYTES_PER_VALUE * state_elems,
    )
