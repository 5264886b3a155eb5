"""Training transformers from scratch on QC / MFE and sweeping m_thr(d)."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from typing import Callable, Iterable, Sequence

import numpy as np

from countlab.backprop import NonFiniteLoss, loss_and_grads_params
from countlab.nn import TransformerConfig, TransformerModel, forward_many

log = logging.getLogger(__name__)

TASKS = ("QC", "MFE")


@dataclass(frozen=True)
class TaskSpec:
    task: str
    vocab_size: int
    expected_count: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.vocab_size < 2:
            raise ValueError("vocab_size must be at least 2")
        if self.expected_count < 1:
            raise ValueError("expected_count must be positive")

    @property
    def context_len(self) -> int:
        return self.expected_count * self.vocab_size


@dataclass(frozen=True)
class TrainConfig:
    layers: int = 2
    heads: int = 4
    model_dim: int = 32
    batch_size: int = 16
    step_size: float = 1e-4
    steps: int = 20000
    eval_examples: int = 1600
    seed: int = 0
    mlp_ratio: int = 4
    use_layer_norm: bool = True
    dtype: str = "float32"
    # "constant", or "linear": warm up over ``warmup`` steps, then decay linearly to 0
    schedule: str = "constant"
    warmup: int = 0

    def __post_init__(self):
        for name in ("layers", "heads", "model_dim", "batch_size", "eval_examples", "mlp_ratio"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.steps < 0:
            raise ValueError("steps must be non-negative")
        if self.step_size <= 0:
            raise ValueError("step_size must be positive")
        if self.model_dim % self.heads:
            raise ValueError("model_dim must be divisible by heads")
        if self.schedule not in ("constant", "linear"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.warmup < 0:
            raise ValueError("warmup must be non-negative")

    def step_size_at(self, step: int) -> float:
        if self.schedule == "constant":
            return self.step_size
        scale = min(1.0, (step + 1) / self.warmup) if self.warmup else 1.0
        return self.step_size * scale * (1.0 - step / self.steps)


# --------------------------------------------------------------------------
# data


def labels_for(task: str, tokens: np.ndarray) -> np.ndarray:
    tokens = np.atleast_2d(tokens)
    if task == "QC":
        return np.count_nonzero(tokens == tokens[:, -1:], axis=1)
    if task == "MFE":
        m = int(tokens.max())
        offsets = (np.arange(len(tokens)) * (m + 1))[:, None]
        counts = np.bincount((tokens + offsets).ravel(), minlength=len(tokens) * (m + 1))
        return counts.reshape(len(tokens), m + 1).max(axis=1)
    raise ValueError(f"unknown task {task!r}")


def sample_batch(spec: TaskSpec, rng: np.random.Generator, size: int) -> tuple[np.ndarray, np.ndarray]:
    tokens = rng.integers(1, spec.vocab_size + 1, size=(size, spec.context_len))
    return tokens, labels_for(spec.task, tokens)


def sample_task(spec: TaskSpec, rng: np.random.Generator) -> tuple[np.ndarray, int]:
    """One i.i.d. uniform sequence of length c*m and its label."""
    tokens, labels = sample_batch(spec, rng, 1)
    return tokens[0], int(labels[0])


# --------------------------------------------------------------------------
# model init


def model_config(spec: TaskSpec, cfg: TrainConfig) -> TransformerConfig:
    return TransformerConfig(
        n_layers=cfg.layers,
        n_heads=cfg.heads,
        head_dim=cfg.model_dim // cfg.heads,
        model_dim=cfg.model_dim,
        vocab_size=spec.vocab_size,
        context_len=spec.context_len,
        use_layer_norm=cfg.use_layer_norm,
        use_positional=True,
    )


def mean_label(spec: TaskSpec, samples: int = 4000) -> float:
    if spec.task == "QC":
        return 1.0 + (spec.context_len - 1) / spec.vocab_size
    rng = np.random.default_rng([spec.seed, 7919])
    return float(sample_batch(spec, rng, samples)[1].mean())


def init_params(spec: TaskSpec, cfg: TrainConfig, rng: np.random.Generator) -> dict:
    """Normal(0, 1/D) weights, unit layer-norm gains, readout bias at the mean label."""
    tcfg = model_config(spec, cfg)
    D, h, d = tcfg.model_dim, tcfg.n_heads, tcfg.head_dim
    H = cfg.mlp_ratio * D
    std = 1.0 / math.sqrt(D)

    def normal(*shape):
        return rng.normal(0.0, std, size=shape)

    p = {"tok_emb": normal(spec.vocab_size, D), "pos_emb": normal(spec.context_len, D)}
    for i in range(cfg.layers):
        p[f"l{i}.wq"] = normal(h, D, d)
        p[f"l{i}.wk"] = normal(h, D, d)
        p[f"l{i}.wv"] = normal(h, D, d)
        p[f"l{i}.mlp.0.w"] = normal(D, H)
        p[f"l{i}.mlp.0.b"] = np.zeros(H)
        p[f"l{i}.mlp.1.w"] = normal(H, D)
        p[f"l{i}.mlp.1.b"] = np.zeros(D)
        if cfg.use_layer_norm:
            for ln in ("ln1", "ln2"):
                p[f"l{i}.{ln}.g"] = np.ones(D)
                p[f"l{i}.{ln}.b"] = np.zeros(D)
    if cfg.use_layer_norm:
        p["lnf.g"] = np.ones(D)
        p["lnf.b"] = np.zeros(D)
    p["readout.w"] = normal(D)
    p["readout.b"] = np.array(mean_label(spec))
    return p


def init_model(spec: TaskSpec, cfg: TrainConfig) -> TransformerModel:
    rng = np.random.default_rng([cfg.seed, 0])
    return TransformerModel(model_config(spec, cfg), init_params(spec, cfg, rng))


# --------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    params: dict
    m: dict
    v: dict
    t: int = 0

    @classmethod
    def fresh(cls, params: dict) -> "AdamState":
        return cls(
            params=dict(params),
            m={k: np.zeros_like(v) for k, v in params.items()},
            v={k: np.zeros_like(v) for k, v in params.items()},
        )


def adam_step(state: AdamState, grads: dict, step_size: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    """Bias-corrected Adam update; returns a new state and leaves ``state`` intact."""
    if grads.keys() != state.params.keys():
        raise ValueError(f"gradient keys differ from parameters: {set(grads) ^ set(state.params)}")
    t = state.t + 1
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    params, ms, vs = {}, {}, {}
    for k, p in state.params.items():
        g = grads[k]
        if g.shape != p.shape:
            raise ValueError(f"gradient for {k} has shape {g.shape}, parameter has {p.shape}")
        m = beta1 * state.m[k] + (1.0 - beta1) * g
        v = beta2 * state.v[k] + (1.0 - beta2) * (g * g)
        update = step_size * (m / c1) / (np.sqrt(v / c2) + eps)
        params[k] = (p - update).astype(p.dtype, copy=False)
        ms[k] = m.astype(p.dtype, copy=False)
        vs[k] = v.astype(p.dtype, copy=False)
    return AdamState(params, ms, vs, t)


# --------------------------------------------------------------------------
# training and evaluation


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, cause: Exception | None = None):
        super().__init__(f"training diverged at step {step}" + (f": {cause}" if cause else ""))
        self.step = step


def train(spec: TaskSpec, cfg: TrainConfig,
          progress: Callable[[int, float], None] | None = None) -> tuple[TransformerModel, list[float]]:
    """Adam on fresh batches every step; reproducible from ``cfg.seed``."""
    model = init_model(spec, cfg)
    tcfg = model.config
    dtype = np.dtype(cfg.dtype)
    state = AdamState.fresh({k: v.astype(dtype) for k, v in model.params.items()})
    data_rng = np.random.default_rng([cfg.seed, 1])
    losses: list[float] = []
    for step in range(cfg.steps):
        tokens, labels = sample_batch(spec, data_rng, cfg.batch_size)
        try:
            loss, grads = loss_and_grads_params(tcfg, state.params, tokens, labels, batch_seed=step)
        except NonFiniteLoss as exc:
            raise TrainingDiverged(step, exc) from exc
        state = adam_step(state, grads, cfg.step_size_at(step))
        losses.append(loss)
        if progress is not None:
            progress(step, loss)
    if cfg.steps == 0:
        return model, losses
    return TransformerModel(tcfg, state.params), losses


def round_half_away(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def evaluate(model: TransformerModel, spec: TaskSpec, n_examples: int = 1600,
             rng: np.random.Generator | None = None, batch: int = 64) -> float:
    """Fraction of fresh examples whose rounded prediction equals the label."""
    if n_examples <= 0:
        raise ValueError("n_examples must be positive")
    rng = np.random.default_rng([spec.seed, 2]) if rng is None else rng
    tokens, labels = sample_batch(spec, rng, n_examples)
    pred = forward_many(model, tokens, chunk=batch)
    return float(np.mean(round_half_away(pred) == labels))


# --------------------------------------------------------------------------
# m_thr sweep


@dataclass(frozen=True)
class SweepCell:
    task: str
    d: int
    m: int
    n: int
    steps: int
    seed: int
    accuracy: float | None
    error: str | None = None


@dataclass(frozen=True)
class SweepResult:
    cells: tuple[SweepCell, ...]
    thresholds: tuple[tuple[int, int | None], ...]
    threshold: float = 0.8

    @property
    def grid(self) -> list[tuple[int, int, float | None]]:
        return [(c.d, c.m, c.accuracy) for c in self.cells]

    def m_thr(self, d: int) -> int | None:
        return dict(self.thresholds)[d]


def first_below(ms: Sequence[int], accuracies: Sequence[float | None], threshold: float) -> int | None:
    """Smallest m whose accuracy is below ``threshold``; failed cells count as below."""
    for m, acc in zip(ms, accuracies):
        if acc is None or acc < threshold:
            return m
    return None


def thr_key(m_thr: int | None) -> float:
    return math.inf if m_thr is None else float(m_thr)


def cell_seed(master: int, index: int) -> int:
    return int(np.random.SeedSequence([master, index]).generate_state(1)[0])


def _run_cell(args) -> SweepCell:
    task, d, m, cfg, expected_count, seed = args
    spec = TaskSpec(task, m, expected_count, seed=seed)
    cfg = replace(cfg, model_dim=d, seed=seed)
    try:
        model, _ = train(spec, cfg)
        acc = evaluate(model, spec, cfg.eval_examples)
        return SweepCell(task, d, m, spec.context_len, cfg.steps, seed, acc)
    except TrainingDiverged as exc:
        log.warning("cell d=%d m=%d failed: %s", d, m, exc)
        return SweepCell(task, d, m, spec.context_len, cfg.steps, seed, None, str(exc))


def sweep_mthr(task: str, d_values: Iterable[int], m_grid: dict[int, Sequence[int]] | Sequence[int],
               cfg: TrainConfig, threshold: float = 0.8, expected_count: int = 10, seed: int = 0,
               jobs: int = 1, stop_after_fail: bool = False,
               progress: Callable[[SweepCell], None] | None = None) -> SweepResult:
    """Train one model per (d, m) and report the first m where accuracy drops.

    ``m_grid`` is one ascending list shared by every d, or a dict giving each
    d its own list. With ``stop_after_fail`` the remaining larger m for a d
    are skipped once its threshold is known. Cell seeds depend only on the
    master seed and the cell's position in the full grid.
    """
    d_values = list(d_values)
    grids = {d: list(m_grid[d] if isinstance(m_grid, dict) else m_grid) for d in d_values}
    for d, ms in grids.items():
        if ms != sorted(ms):
            raise ValueError(f"m grid for d={d} must be ascending")
    jobs_list = []
    index = 0
    for d in d_values:
        for m in grids[d]:
            jobs_list.append((task, d, m, cfg, expected_count, cell_seed(seed, index)))
            index += 1

    cells: list[SweepCell] = []
    if stop_after_fail or jobs <= 1:
        for d in d_values:
            for job in (j for j in jobs_list if j[1] == d):
                cell = _run_cell(job)
                cells.append(cell)
                if progress is not None:
                    progress(cell)
                if stop_after_fail and (cell.accuracy is None or cell.accuracy < threshold):
                    break
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for cell in pool.map(_run_cell, jobs_list):
                cells.append(cell)
                if progress is not None:
                    progress(cell)

    thresholds = []
    for d in d_values:
        mine = [c for c in cells if c.d == d]
        thresholds.append((d, first_below([c.m for c in mine], [c.accuracy for c in mine], threshold)))
    return SweepResult(tuple(cells), tuple(thresholds), threshold)
