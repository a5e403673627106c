"""Desk-scale models, synthetic tasks and the training harness.

Everything here is sized for laptop experiments: dense numpy MLPs a few
layers deep, full-batch gradients, and explicit training loops that
record per-matrix statistics every step.  The harness is the test bed
for the optimizers: it can inject gradient spikes on schedule to
exercise the norm-growth limiter and emits traces from which scaling
factor rankings are computed.
"""

import enum
import math
from dataclasses import dataclass, field, replace

import numpy as np

from fira import linalg, optimizers, projector


class Activation(enum.Enum):
    TANH = "tanh"
    RELU = "relu"
    IDENTITY = "identity"


class Loss(enum.Enum):
    MSE = "mse"
    SOFTMAX_CE = "softmax-ce"


# Named sub-streams so every consumer of a run seed draws independent,
# reproducible randomness (stream index is the second Philox key word).
_STREAM_WEIGHTS = 0
_STREAM_DATA = 1
_STREAM_TEACHER = 2


def rng_stream(seed: int, stream: int) -> np.random.Generator:
    """Counter-based generator for (seed, stream), platform independent."""
    if seed < 0 or stream < 0:
        raise ValueError("seed and stream must be non-negative")
    key = np.array([seed, stream], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


@dataclass
class MlpModel:
    """Fully connected network; weights[i] has shape (fan_in, fan_out)."""

    weights: list
    biases: list
    activation: Activation
    loss: Loss


def init_mlp(dims, activation: Activation, loss: Loss,
             rng: np.random.Generator) -> MlpModel:
    """Gaussian init with std 1/sqrt(fan_in); zero biases."""
    dims = list(dims)
    if len(dims) < 2 or any(d < 1 for d in dims):
        raise ValueError(f"need at least two positive layer sizes, got {dims}")
    weights = []
    biases = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        weights.append(rng.normal(0.0, 1.0 / math.sqrt(fan_in), (fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return MlpModel(weights, biases, activation, loss)


def _activate(z: np.ndarray, activation: Activation) -> np.ndarray:
    if activation is Activation.TANH:
        return np.tanh(z)
    if activation is Activation.RELU:
        return np.maximum(z, 0.0)
    return z


def _activate_grad(z: np.ndarray, h: np.ndarray, activation: Activation) -> np.ndarray:
    if activation is Activation.TANH:
        return 1.0 - h * h
    if activation is Activation.RELU:
        return (z > 0.0).astype(np.float64)
    return np.ones_like(z)


def forward(model: MlpModel, x: np.ndarray) -> np.ndarray:
    """Predictions (MSE) or logits (softmax cross-entropy).

    Hidden layers apply the activation; the output layer is linear.
    """
    h = x
    last = len(model.weights) - 1
    for idx, (w, b) in enumerate(zip(model.weights, model.biases)):
        z = h @ w + b
        h = z if idx == last else _activate(z, model.activation)
    return h


def _softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def loss_value(model: MlpModel, x: np.ndarray, y: np.ndarray) -> float:
    """Training loss at the current weights.

    MSE is the squared error summed over outputs and averaged over the
    batch.  Cross-entropy targets are rows of class weights (one-hot
    for hard labels) and average over the batch as well.
    """
    pred = forward(model, x)
    if pred.shape != y.shape:
        raise ValueError(f"target shape {y.shape} does not match {pred.shape}")
    batch = x.shape[0]
    if model.loss is Loss.MSE:
        diff = pred - y
        return float((diff * diff).sum() / batch)
    shifted = pred - pred.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    return float(-(y * log_probs).sum() / batch)


def backward(model: MlpModel, x: np.ndarray, y: np.ndarray):
    """Loss and its gradients in one pass.

    Returns (loss, weight_grads, bias_grads) with gradients in the same
    order and shapes as the model parameters.
    """
    if x.shape[0] != y.shape[0]:
        raise ValueError("inputs and targets disagree on batch size")
    batch = x.shape[0]
    last = len(model.weights) - 1
    hs = [x]
    zs = []
    h = x
    for idx, (w, b) in enumerate(zip(model.weights, model.biases)):
        z = h @ w + b
        zs.append(z)
        h = z if idx == last else _activate(z, model.activation)
        hs.append(h)
    pred = hs[-1]
    if pred.shape != y.shape:
        raise ValueError(f"target shape {y.shape} does not match {pred.shape}")

    if model.loss is Loss.MSE:
        diff = pred - y
        loss = float((diff * diff).sum() / batch)
        dz = 2.0 * diff / batch
    else:
        shifted = pred - pred.max(axis=1, keepdims=True)
        log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        loss = float(-(y * log_probs).sum() / batch)
        dz = (_softmax(pred) - y) / batch

    grad_ws = [None] * len(model.weights)
    grad_bs = [None] * len(model.biases)
    for idx in range(last, -1, -1):
        grad_ws[idx] = hs[idx].T @ dz
        grad_bs[idx] = dz.sum(axis=0)
        if idx > 0:
            dh = dz @ model.weights[idx].T
            dz = dh * _activate_grad(zs[idx - 1], hs[idx], model.activation)
    return loss, grad_ws, grad_bs


def finite_diff_grad(model: MlpModel, x: np.ndarray, y: np.ndarray,
                     h: float = 1e-6):
    """Central-difference gradients of the loss for every parameter.

    Slow by construction; this is the oracle the analytic backward pass
    is checked against.
    """
    grad_ws = []
    grad_bs = []
    for w in model.weights:
        g = np.zeros_like(w)
        it = np.nditer(w, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = w[idx]
            w[idx] = orig + h
            up = loss_value(model, x, y)
            w[idx] = orig - h
            down = loss_value(model, x, y)
            w[idx] = orig
            g[idx] = (up - down) / (2.0 * h)
        grad_ws.append(g)
    for b in model.biases:
        g = np.zeros_like(b)
        for i in range(b.shape[0]):
            orig = b[i]
            b[i] = orig + h
            up = loss_value(model, x, y)
            b[i] = orig - h
            down = loss_value(model, x, y)
            b[i] = orig
            g[i] = (up - down) / (2.0 * h)
        grad_bs.append(g)
    return grad_ws, grad_bs


# ---------------------------------------------------------------------------
# LoRA adapter.


@dataclass(frozen=True)
class LoraAdapter:
    """Frozen base plus trainable rank-r factors: W_eff = W0 + up @ down."""

    frozen_base: np.ndarray
    down: np.ndarray  # (r, n)
    up: np.ndarray    # (m, r)
    rank: int


def lora_init(w0: np.ndarray, r: int, rng: np.random.Generator) -> LoraAdapter:
    """Standard init: random down factor, zero up factor, so the
    effective weight starts exactly at the base."""
    w0 = linalg.as_matrix(w0, "w0")
    m, n = w0.shape
    if not 1 <= r <= min(m, n):
        raise ValueError(f"rank must satisfy 1 <= r <= min{w0.shape}, got {r}")
    down = rng.normal(0.0, 1.0 / math.sqrt(r), (r, n))
    up = np.zeros((m, r))
    return LoraAdapter(frozen_base=w0, down=down, up=up, rank=r)


def lora_effective(adapter: LoraAdapter) -> np.ndarray:
    """Effective weight W0 + up @ down."""
    return adapter.frozen_base + adapter.up @ adapter.down


def lora_step(
    adapter: LoraAdapter,
    g_eff: np.ndarray,
    moments_down: optimizers.AdamMoments | None,
    moments_up: optimizers.AdamMoments | None,
    hp: optimizers.Hyperparams,
):
    """Adam update of both factors from the effective-weight gradient.

    Chain rule from W_eff = W0 + up @ down gives d/d(down) = up^T G and
    d/d(up) = G down^T; both factors step from the same gradient point.
    Returns (adapter, moments_down, moments_up).
    """
    g_eff = linalg.as_matrix(g_eff, "g_eff")
    if g_eff.shape != adapter.frozen_base.shape:
        raise ValueError(
            f"gradient shape {g_eff.shape} does not match adapter "
            f"{adapter.frozen_base.shape}"
        )
    g_down = adapter.up.T @ g_eff
    g_up = g_eff @ adapter.down.T
    if moments_down is None:
        moments_down = optimizers.AdamMoments.zeros(g_down.shape)
    if moments_up is None:
        moments_up = optimizers.AdamMoments.zeros(g_up.shape)
    n_down, moments_down = optimizers.adam_correct(g_down, moments_down, hp)
    n_up, moments_up = optimizers.adam_correct(g_up, moments_up, hp)
    new = replace(
        adapter,
        down=adapter.down - hp.learning_rate * n_down,
        up=adapter.up - hp.learning_rate * n_up,
    )
    return new, moments_down, moments_up


# ---------------------------------------------------------------------------
# Synthetic tasks.


class TaskKind(enum.Enum):
    MATRIX_FACTORIZATION = "matrix-factorization"
    REGRESSION_MLP = "regression-mlp"
    SPIKE_INJECTED = "spike-injected"


@dataclass(frozen=True)
class TaskSpec:
    """Declarative description of a synthetic task.

    size drives matrix factorization (two size x size factors fitting a
    random square target through identity inputs).  The regression
    fields describe a teacher-student fit; spike-injected reuses them
    and multiplies the raw gradient of the first weight matrix by
    spike_amplification at each step listed in spike_steps.
    """

    kind: TaskKind = TaskKind.MATRIX_FACTORIZATION
    size: int = 16
    batch: int = 32
    in_dim: int = 16
    out_dim: int = 8
    hidden: tuple = (32,)
    activation: Activation = Activation.TANH
    loss: Loss = Loss.MSE
    noise: float = 0.1
    spike_steps: tuple = (250, 500, 750)
    spike_amplification: float = 100.0

    def __post_init__(self):
        if self.size < 2:
            raise ValueError(f"size must be >= 2, got {self.size}")
        if self.batch < 1 or self.in_dim < 1 or self.out_dim < 1:
            raise ValueError("batch, in_dim and out_dim must be >= 1")
        if any(h < 1 for h in self.hidden):
            raise ValueError(f"hidden sizes must be >= 1, got {self.hidden}")
        if self.noise < 0:
            raise ValueError(f"noise must be >= 0, got {self.noise}")
        if self.spike_amplification <= 0:
            raise ValueError("spike_amplification must be > 0")
        if any(s < 0 for s in self.spike_steps):
            raise ValueError("spike steps must be non-negative")


@dataclass
class SyntheticTask:
    """A realized task: data plus a freshly initialized model."""

    kind: TaskKind
    inputs: np.ndarray
    targets: np.ndarray
    model: MlpModel
    spike_steps: frozenset = frozenset()
    spike_amplification: float = 1.0
    spike_matrix: int = 0


def build_task(spec: TaskSpec, seed: int) -> SyntheticTask:
    """Materialize a task deterministically from (spec, seed)."""
    weights_rng = rng_stream(seed, _STREAM_WEIGHTS)
    data_rng = rng_stream(seed, _STREAM_DATA)

    if spec.kind is TaskKind.MATRIX_FACTORIZATION:
        d = spec.size
        inputs = np.eye(d)
        targets = data_rng.standard_normal((d, d))
        model = init_mlp([d, d, d], Activation.IDENTITY, Loss.MSE, weights_rng)
        return SyntheticTask(spec.kind, inputs, targets, model)

    teacher_rng = rng_stream(seed, _STREAM_TEACHER)
    dims = [spec.in_dim, *spec.hidden, spec.out_dim]
    inputs = data_rng.standard_normal((spec.batch, spec.in_dim))
    teacher = init_mlp(dims, spec.activation, spec.loss, teacher_rng)
    raw = forward(teacher, inputs)
    if spec.noise > 0:
        raw = raw + spec.noise * data_rng.standard_normal(raw.shape)
    if spec.loss is Loss.SOFTMAX_CE:
        targets = np.zeros_like(raw)
        targets[np.arange(raw.shape[0]), raw.argmax(axis=1)] = 1.0
    else:
        targets = raw
    model = init_mlp(dims, spec.activation, spec.loss, weights_rng)
    if spec.kind is TaskKind.SPIKE_INJECTED:
        return SyntheticTask(
            spec.kind, inputs, targets, model,
            spike_steps=frozenset(spec.spike_steps),
            spike_amplification=spec.spike_amplification,
        )
    return SyntheticTask(spec.kind, inputs, targets, model)


# ---------------------------------------------------------------------------
# Per-parameter steppers.
#
# A stepper owns the optimizer state of one parameter and turns the
# pure step functions into something the training loop can drive
# uniformly.  Each step also reports the trace statistics recorded in
# metrics files: raw gradient norm, applied residual norm, and the
# average scaling factor phi (1.0 where the notion does not apply).

METHODS = (
    "sgd",
    "adam",
    "lora",
    "galore",
    "galore-add",
    "fira",
    "fira-w.o.-scaling",
    "fira-matrix",
    "fira-w.o.-limiter",
    "fira-gradient-clipping",
)

_FIRA_VARIANTS = {
    "fira": (optimizers.ScalingMode.COLUMN, optimizers.SmoothingMode.LIMITER),
    "fira-w.o.-scaling": (optimizers.ScalingMode.NONE, optimizers.SmoothingMode.LIMITER),
    "fira-matrix": (optimizers.ScalingMode.MATRIX, optimizers.SmoothingMode.LIMITER),
    "fira-w.o.-limiter": (optimizers.ScalingMode.COLUMN, optimizers.SmoothingMode.NONE),
    "fira-gradient-clipping": (optimizers.ScalingMode.COLUMN, optimizers.SmoothingMode.CLIP),
}

PROJECTED_METHODS = ("galore", "galore-add") + tuple(_FIRA_VARIANTS)


@dataclass(frozen=True)
class StepDiag:
    grad_norm: float
    resid_norm: float
    phi: float


class MatrixStepper:
    """Optimizer state of one 2-D weight matrix."""

    def __init__(self, method: str, hp: optimizers.Hyperparams,
                 init_weight: np.ndarray | None = None, seed: int = 0,
                 index: int = 0):
        if method not in METHODS:
            raise ValueError(f"unknown method {method!r}")
        if method in PROJECTED_METHODS or method == "lora":
            if hp.rank is None:
                raise ValueError(f"method {method!r} needs hp.rank")
        self.method = method
        self.hp = hp
        self.moments = None
        self.proj = None
        self.fira_state = None
        self.adapter = None
        self.moments_up = None
        if method in _FIRA_VARIANTS:
            scaling, smoothing = _FIRA_VARIANTS[method]
            self.fira_state = optimizers.FiraState(
                scaling=scaling, smoothing=smoothing
            )
        if method == "lora":
            if init_weight is None:
                raise ValueError("lora needs the initial weight")
            # dedicated stream per matrix so adapters differ across layers
            rng = rng_stream(seed, 16 + index)
            self.adapter = lora_init(init_weight, hp.rank, rng)

    def step(self, w: np.ndarray, g: np.ndarray, step_idx: int,
             lr_scale: float = 1.0) -> tuple[np.ndarray, StepDiag]:
        hp = self.hp
        if lr_scale != 1.0:
            hp = replace(hp, learning_rate=hp.learning_rate * lr_scale)
        grad_norm = linalg.frobenius_norm(g)

        if self.method == "sgd":
            return optimizers.sgd_step(w, g, hp), StepDiag(grad_norm, 0.0, 1.0)

        if self.method == "adam":
            if self.moments is None:
                self.moments = optimizers.AdamMoments.zeros(g.shape)
            new_w, self.moments = optimizers.adam_step(w, g, self.moments, hp)
            n_corr = optimizers.corrected_direction(self.moments, hp)
            phi = optimizers.scaling_factor_matrix(n_corr, g, hp.epsilon)
            return new_w, StepDiag(grad_norm, 0.0, phi)

        if self.method == "lora":
            self.adapter, self.moments, self.moments_up = lora_step(
                self.adapter, g, self.moments, self.moments_up, hp
            )
            return lora_effective(self.adapter), StepDiag(grad_norm, 0.0, 1.0)

        if self.method in ("galore", "galore-add"):
            fn = (optimizers.galore_step if self.method == "galore"
                  else optimizers.galore_add_step)
            new_w, self.moments, self.proj = fn(
                w, g, self.proj, self.moments, hp, step_idx
            )
            r_mat = projector.project(self.proj, g)
            s = projector.residual(self.proj, g, r_mat)
            n_corr = optimizers.corrected_direction(self.moments, hp)
            phi = optimizers.scaling_factor_matrix(n_corr, r_mat, hp.epsilon)
            return new_w, StepDiag(grad_norm, linalg.frobenius_norm(s), phi)

        new_w, self.fira_state, self.proj = optimizers.fira_step(
            w, g, self.proj, self.fira_state, hp, step_idx
        )
        self.moments = self.fira_state.moments
        phi = self._fira_phi(g, hp)
        return new_w, StepDiag(
            grad_norm, self.fira_state.prev_residual_norm, phi
        )

    def _fira_phi(self, g: np.ndarray, hp: optimizers.Hyperparams) -> float:
        """Average scaling factor applied at the step just taken."""
        scaling = self.fira_state.scaling
        if scaling is optimizers.ScalingMode.NONE:
            return 1.0
        r_mat = projector.project(self.proj, g)
        n_corr = optimizers.corrected_direction(self.fira_state.moments, hp)
        if scaling is optimizers.ScalingMode.MATRIX:
            return optimizers.scaling_factor_matrix(n_corr, r_mat, hp.epsilon)
        if self.proj.orientation is projector.Orientation.LEFT:
            k = optimizers.scaling_factor_columns(n_corr, r_mat, hp.epsilon)
        else:
            k = optimizers.scaling_factor_columns(n_corr.T, r_mat.T, hp.epsilon)
        return float(k.mean())

    # -- checkpointing ------------------------------------------------

    def state_entries(self, prefix: str) -> dict:
        """Flatten the stepper state for the text checkpoint format."""
        entries = {f"{prefix}.method": self.method}
        if self.moments is not None:
            entries.update(_moment_entries(f"{prefix}.moments", self.moments))
        if self.moments_up is not None:
            entries.update(_moment_entries(f"{prefix}.moments_up", self.moments_up))
        if self.proj is not None:
            p = self.proj
            entries[f"{prefix}.proj.basis"] = p.basis
            entries[f"{prefix}.proj.rank"] = p.rank
            entries[f"{prefix}.proj.switch_period"] = p.switch_period
            entries[f"{prefix}.proj.last_refresh_step"] = p.last_refresh_step
            entries[f"{prefix}.proj.orientation"] = p.orientation.value
            entries[f"{prefix}.proj.rows"] = p.weight_shape[0]
            entries[f"{prefix}.proj.cols"] = p.weight_shape[1]
        if self.fira_state is not None:
            entries[f"{prefix}.prev_residual_norm"] = (
                self.fira_state.prev_residual_norm
            )
        if self.adapter is not None:
            entries[f"{prefix}.lora.base"] = self.adapter.frozen_base
            entries[f"{prefix}.lora.down"] = self.adapter.down
            entries[f"{prefix}.lora.up"] = self.adapter.up
        return entries

    def load_entries(self, prefix: str, entries: dict) -> None:
        """Restore state captured by state_entries."""
        stored = entries.get(f"{prefix}.method")
        if stored != self.method:
            raise ValueError(
                f"checkpoint method {stored!r} does not match {self.method!r}"
            )
        if f"{prefix}.moments.m" in entries:
            self.moments = _moments_from(f"{prefix}.moments", entries)
        if f"{prefix}.moments_up.m" in entries:
            self.moments_up = _moments_from(f"{prefix}.moments_up", entries)
        if f"{prefix}.proj.basis" in entries:
            self.proj = projector.GradProjector(
                basis=entries[f"{prefix}.proj.basis"],
                rank=entries[f"{prefix}.proj.rank"],
                switch_period=entries[f"{prefix}.proj.switch_period"],
                last_refresh_step=entries[f"{prefix}.proj.last_refresh_step"],
                orientation=projector.Orientation(
                    entries[f"{prefix}.proj.orientation"]
                ),
                weight_shape=(
                    entries[f"{prefix}.proj.rows"],
                    entries[f"{prefix}.proj.cols"],
                ),
            )
        if self.fira_state is not None:
            self.fira_state = replace(
                self.fira_state,
                moments=self.moments,
                prev_residual_norm=entries.get(f"{prefix}.prev_residual_norm"),
            )
        if self.adapter is not None:
            self.adapter = LoraAdapter(
                frozen_base=entries[f"{prefix}.lora.base"],
                down=entries[f"{prefix}.lora.down"],
                up=entries[f"{prefix}.lora.up"],
                rank=self.hp.rank,
            )

def _moment_entries(prefix: str, moments: optimizers.AdamMoments) -> dict:
    return {
        f"{prefix}.m": moments.m_first,
        f"{prefix}.v": moments.v_second,
        f"{prefix}.t": moments.step_count,
    }


def _moments_from(prefix: str, entries: dict) -> optimizers.AdamMoments:
    return optimizers.AdamMoments(
        m_first=entries[f"{prefix}.m"],
        v_second=entries[f"{prefix}.v"],
        step_count=entries[f"{prefix}.t"],
    )


class BiasStepper:
    """1-D parameters bypass projection: SGD under sgd, Adam otherwise."""

    def __init__(self, method: str, hp: optimizers.Hyperparams):
        self.use_sgd = method == "sgd"
        self.hp = hp
        self.moments = None

    def step(self, b: np.ndarray, g: np.ndarray, lr_scale: float = 1.0) -> np.ndarray:
        hp = self.hp
        if lr_scale != 1.0:
            hp = replace(hp, learning_rate=hp.learning_rate * lr_scale)
        row_w = b[None, :]
        row_g = g[None, :]
        if self.use_sgd:
            return optimizers.sgd_step(row_w, row_g, hp)[0]
        if self.moments is None:
            self.moments = optimizers.AdamMoments.zeros(row_g.shape)
        new_b, self.moments = optimizers.adam_step(row_w, row_g, self.moments, hp)
        return new_b[0]

    def state_entries(self, prefix: str) -> dict:
        if self.moments is None:
            return {}
        return _moment_entries(f"{prefix}.moments", self.moments)

    def load_entries(self, prefix: str, entries: dict) -> None:
        if f"{prefix}.moments.m" in entries:
            self.moments = _moments_from(f"{prefix}.moments", entries)


# ---------------------------------------------------------------------------
# Training loop and records.


@dataclass(frozen=True)
class StepStats:
    step: int
    loss: float
    grad_norms: tuple
    resid_norms: tuple
    phis: tuple


@dataclass
class TrainRecord:
    """Loss curve plus per-matrix statistics of one run.

    Rows hold the loss evaluated before each update together with that
    step's gradient statistics; initial_loss equals the first row's
    loss (or the only evaluation for zero-step runs).  diverged_at
    records the step at which a non-finite loss or gradient stopped the
    run; no row is appended for that step.
    """

    matrix_names: tuple
    initial_loss: float
    steps: list = field(default_factory=list)
    diverged_at: int | None = None

    def losses(self) -> list:
        """Every recorded loss; the first row repeats initial_loss."""
        if self.steps:
            return [row.loss for row in self.steps]
        return [self.initial_loss]

    def final_loss(self) -> float:
        return self.steps[-1].loss if self.steps else self.initial_loss


def record_to_csv(record: TrainRecord, f) -> None:
    """Write the metrics table: step, loss, then grad_norm, resid_norm
    and phi columns for each weight matrix.  Floats use repr so the
    file round-trips bit-exactly."""
    if isinstance(f, str):
        with open(f, "w", encoding="ascii", newline="\n") as fh:
            record_to_csv(record, fh)
            return
    cols = ["step", "loss"]
    for name in record.matrix_names:
        cols += [f"{name}_grad_norm", f"{name}_resid_norm", f"{name}_phi"]
    f.write(",".join(cols) + "\n")
    for row in record.steps:
        parts = [str(row.step), repr(float(row.loss))]
        for g, s, p in zip(row.grad_norms, row.resid_norms, row.phis):
            parts += [repr(float(g)), repr(float(s)), repr(float(p))]
        f.write(",".join(parts) + "\n")


def record_from_csv(f) -> TrainRecord:
    """Read a metrics table back.  initial_loss is taken from the first
    row (nan for an empty table) and diverged_at is not represented."""
    if isinstance(f, str):
        with open(f, "r", encoding="ascii") as fh:
            return record_from_csv(fh)
    header = f.readline().strip().split(",")
    if header[:2] != ["step", "loss"] or (len(header) - 2) % 3 != 0:
        raise ValueError("not a metrics table")
    names = []
    for i in range(2, len(header), 3):
        if not header[i].endswith("_grad_norm"):
            raise ValueError(f"unexpected metrics column {header[i]!r}")
        names.append(header[i][: -len("_grad_norm")])
    rows = []
    for line in f:
        line = line.strip()
        if not line:
            continue
        parts = line.split(",")
        if len(parts) != len(header):
            raise ValueError("metrics row has wrong column count")
        vals = [float(x) for x in parts[1:]]
        triples = vals[1:]
        rows.append(StepStats(
            step=int(parts[0]),
            loss=vals[0],
            grad_norms=tuple(triples[0::3]),
            resid_norms=tuple(triples[1::3]),
            phis=tuple(triples[2::3]),
        ))
    initial = rows[0].loss if rows else float("nan")
    return TrainRecord(tuple(names), initial, rows)


@dataclass(frozen=True)
class RunConfig:
    """Everything needed to reproduce one training run."""

    task: TaskSpec = TaskSpec()
    method: str = "fira"
    hp: optimizers.Hyperparams = optimizers.Hyperparams(rank=4)
    steps: int = 1000
    seed: int = 0
    warmup_fraction: float = 0.1

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if self.steps < 0:
            raise ValueError(f"steps must be >= 0, got {self.steps}")
        if self.seed < 0:
            raise ValueError(f"seed must be >= 0, got {self.seed}")
        if not 0 <= self.warmup_fraction <= 1:
            raise ValueError(
                f"warmup_fraction must be in [0, 1], got {self.warmup_fraction}"
            )


def make_steppers(config: RunConfig, model: MlpModel):
    """Per-parameter steppers for a model under the given config."""
    matrix_steppers = [
        MatrixStepper(config.method, config.hp, init_weight=w,
                      seed=config.seed, index=i)
        for i, w in enumerate(model.weights)
    ]
    bias_steppers = [BiasStepper(config.method, config.hp) for _ in model.biases]
    return matrix_steppers, bias_steppers


def train(config: RunConfig) -> TrainRecord:
    """Run a full training loop and return its record.

    The loop is full batch and sequential; with a fixed config the
    record is identical across runs and platforms.  Learning rate warm
    up is linear over the first warmup_fraction of steps, constant
    afterwards.
    """
    task = build_task(config.task, config.seed)
    model = task.model
    names = tuple(f"w{i}" for i in range(len(model.weights)))
    matrix_steppers, bias_steppers = make_steppers(config, model)
    warmup_steps = math.floor(config.warmup_fraction * config.steps)

    record = TrainRecord(names, math.nan)
    for step_idx in range(config.steps):
        loss, grad_ws, grad_bs = backward(model, task.inputs, task.targets)
        if step_idx == 0:
            record.initial_loss = loss
        finite = math.isfinite(loss) and all(
            np.isfinite(g).all() for g in grad_ws + grad_bs
        )
        if not finite:
            record.diverged_at = step_idx
            break
        if task.spike_steps and step_idx in task.spike_steps:
            grad_ws[task.spike_matrix] = (
                grad_ws[task.spike_matrix] * task.spike_amplification
            )
        lr_scale = (
            min(1.0, (step_idx + 1) / warmup_steps) if warmup_steps else 1.0
        )
        grad_norms = []
        resid_norms = []
        phis = []
        for i, stepper in enumerate(matrix_steppers):
            model.weights[i], diag = stepper.step(
                model.weights[i], grad_ws[i], step_idx, lr_scale
            )
            grad_norms.append(diag.grad_norm)
            resid_norms.append(diag.resid_norm)
            phis.append(diag.phi)
        for i, stepper in enumerate(bias_steppers):
            model.biases[i] = stepper.step(model.biases[i], grad_bs[i], lr_scale)
        record.steps.append(StepStats(
            step=step_idx,
            loss=loss,
            grad_norms=tuple(grad_norms),
            resid_norms=tuple(resid_norms),
            phis=tuple(phis),
        ))
    if config.steps == 0:
        record.initial_loss = loss_value(model, task.inputs, task.targets)
    return record


def run_summary(record: TrainRecord) -> dict:
    """Summary statistics for summary.json.

    spike_count counts steps whose loss exceeds twice the previously
    recorded loss.
    """
    losses = record.losses()
    spike_count = sum(
        1 for prev, cur in zip(losses, losses[1:]) if cur > 2.0 * prev
    )
    return {
        "final_loss": record.final_loss(),
        "initial_loss": record.initial_loss,
        "min_loss": min(losses),
        "steps": len(record.steps),
        "spike_count": spike_count,
        "diverged_at": record.diverged_at,
    }
