"""Staged training: warm-up, cycles of A1 (joint SGD) / A2 (projection) / A3 (h1 fine-tuning), then B (h2)."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import Checkpoint
from .data import MARGIN_TYPES, Sample, augment
from .errors import ConfigError, DataError, NumericError, StageOrderError
from .losses import Batch, LossConfig, cross_entropy_margin, total_objective
from .network import (N_TYPES, ModelConfig, ModelState, build_graph, first_addon_layer, forward, h1_initial,
                      init_model, margin_logits_t, run_layers)

TRACE_HEADER = "cycle,stage,epoch,loss_total,ce,cluster,sep,fine"


@dataclass
class TrainSchedule:
    warmup_epochs: int = 10
    a1_epochs_per_cycle: int = 10
    a3_steps_per_cycle: int = 200
    max_cycles: int = 5
    convergence_tol: float = 1e-3
    lr_joint: float = 1e-3
    lr_h1: float = 1e-2
    lr_b: float = 1e-2
    optimizer: str = "adam"         # "sgd" or "adam"; used by the A1 / warm-up updates
    batch_size: int = 20
    seed: int = 7
    fine_mode: str = "batch"        # "batch": every image of a batch is in D'; "dataset": D' fixed once
    fine_per_batch: int = 3
    b_steps: int = 3000
    weight_clip: float = 100.0
    augment: bool = False

    def __post_init__(self):
        if self.warmup_epochs < 0 or self.a1_epochs_per_cycle < 0 or self.a3_steps_per_cycle < 0:
            raise ConfigError("epoch and step counts must be >= 0")
        if self.max_cycles < 1:
            raise ConfigError("max_cycles must be >= 1")
        if min(self.lr_joint, self.lr_h1, self.lr_b) <= 0:
            raise ConfigError("learning rates must be > 0")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"optimizer must be 'sgd' or 'adam', got {self.optimizer!r}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.fine_mode not in ("batch", "dataset"):
            raise ConfigError(f"fine_mode must be 'batch' or 'dataset', got {self.fine_mode!r}")
        if not 0 <= self.fine_per_batch <= self.batch_size:
            raise ConfigError("fine_per_batch must lie in [0, batch_size]")
        if self.weight_clip <= 0:
            raise ConfigError("weight_clip must be > 0")


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    schedule: TrainSchedule = field(default_factory=TrainSchedule)

    def to_dict(self) -> dict:
        return {"model": self.model.to_dict(), "loss": asdict(self.loss), "schedule": asdict(self.schedule)}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(ModelConfig.from_dict(d["model"]), LossConfig(**d["loss"]), TrainSchedule(**d["schedule"]))


@dataclass
class TrainData:
    """Training split as stacked arrays, ordered by sample id."""
    samples: list[Sample]
    images: np.ndarray        # [N,1,H,W]
    labels: np.ndarray        # margin indices
    malignancy: np.ndarray
    masks: np.ndarray         # relevance masks, 0 = relevant
    has_fine: np.ndarray
    ids: tuple[str, ...]

    @classmethod
    def from_samples(cls, samples: Sequence[Sample]) -> "TrainData":
        if not samples:
            raise DataError("empty training set")
        samples = sorted(samples, key=lambda s: s.id)
        return cls(list(samples),
                   np.stack([s.image for s in samples])[:, None].astype(np.float64),
                   np.array([s.margin_index for s in samples], dtype=np.int64),
                   np.array([s.malignancy_label for s in samples], dtype=np.int64),
                   np.stack([s.relevance_mask for s in samples]).astype(np.float64),
                   np.array([s.fine_mask is not None for s in samples]),
                   tuple(s.id for s in samples))

    def __len__(self) -> int:
        return len(self.labels)

    def batch(self, idx: np.ndarray, in_fine: np.ndarray | None = None) -> Batch:
        in_fine = np.ones(len(idx), dtype=bool) if in_fine is None else in_fine
        return Batch(self.images[idx], self.labels[idx], self.masks[idx], in_fine, tuple(self.ids[i] for i in idx))


def _as_data(data) -> TrainData:
    return data if isinstance(data, TrainData) else TrainData.from_samples(list(data))


def _check_stage_a(state: ModelState, op: str) -> None:
    if state.stage_b_done:
        raise StageOrderError(f"{op}: Stage A is closed once Stage B has run on this model")


# batching ----------------------------------------------------------------------

def epoch_batches(data: TrainData, schedule: TrainSchedule, rng: np.random.Generator,
                  fine_subset: np.ndarray | None = None) -> list[tuple[np.ndarray, np.ndarray]]:
    """Index batches for one epoch with their D' membership flags.

    Batch mode: every batch mixes ``fine_per_batch`` finely annotated images
    (cycled through) with lesion-only images; all of them count as D'.
    Dataset mode: plain shuffled batches with a fixed D'.
    """
    n = len(data)
    if schedule.fine_mode == "dataset":
        perm = rng.permutation(n)
        member = np.zeros(n, dtype=bool) if fine_subset is None else fine_subset
        return [(b, member[b]) for b in np.array_split(perm, max(1, math.ceil(n / schedule.batch_size)))]
    fine = np.flatnonzero(data.has_fine)
    coarse = rng.permutation(np.flatnonzero(~data.has_fine))
    n_fine = min(schedule.fine_per_batch, len(fine))
    per = schedule.batch_size - n_fine if len(coarse) else 0
    n_batches = math.ceil(len(coarse) / per) if per > 0 else math.ceil(len(fine) / max(n_fine, 1))
    stream = rng.permutation(fine)
    out, pos = [], 0
    for b in range(n_batches):
        take = []
        for _ in range(n_fine):
            if pos == len(stream):
                stream, pos = rng.permutation(fine), 0
            take.append(stream[pos])
            pos += 1
        idx = np.concatenate([np.array(take, dtype=np.int64), coarse[b * per:(b + 1) * per]]) if per else \
            np.array(take, dtype=np.int64)
        out.append((idx, np.ones(len(idx), dtype=bool)))
    return out


def choose_fine_subset(data: TrainData, schedule: TrainSchedule, rng: np.random.Generator) -> np.ndarray:
    """Fixed D' for dataset mode: up to ``fine_per_batch`` fine images plus the rest of a batch of lesion-only ones."""
    fine = rng.permutation(np.flatnonzero(data.has_fine))[:schedule.fine_per_batch]
    coarse = rng.permutation(np.flatnonzero(~data.has_fine))[:schedule.batch_size - len(fine)]
    member = np.zeros(len(data), dtype=bool)
    member[np.concatenate([fine, coarse]).astype(np.int64)] = True
    return member


def _augmented(data: TrainData, idx: np.ndarray, rng: np.random.Generator) -> Batch:
    samples = [augment(data.samples[i], rng) for i in idx]
    return Batch(np.stack([s.image for s in samples])[:, None], data.labels[idx],
                 np.stack([s.relevance_mask for s in samples]), np.ones(len(idx), dtype=bool),
                 tuple(data.ids[i] for i in idx))


def base_features(state: ModelState, images: np.ndarray, chunk: int = 64) -> np.ndarray:
    """Output of the frozen base layers (input to the first 1x1 add-on layer)."""
    stop = first_addon_layer(state.config)
    t = state.tensors()
    with ad.no_grad():
        return np.concatenate([run_layers(state.config, Tensor(images[s:s + chunk]), t, 0, stop).data
                               for s in range(0, len(images), chunk)])


# Stage A1 ------------------------------------------------------------------------

def _diagnostic(batch: Batch, terms, state: ModelState) -> dict:
    return {"batch_ids": list(batch.ids), "loss_terms": [repr(v) for v in terms],
            "param_norms": {k: float(np.linalg.norm(v)) for k, v in sorted(state.params.items())},
            "nonfinite_params": [k for k, v in sorted(state.params.items()) if not np.isfinite(v).all()]}


class Optimizer:
    """Plain SGD or Adam over named parameter arrays, updated in place.

    Adam keeps per-parameter moments and step counts in ``state`` so that a
    checkpoint can carry them.
    """

    def __init__(self, kind: str = "sgd", lr: float = 1e-2, betas=(0.9, 0.999), eps: float = 1e-8,
                 state: dict[str, np.ndarray] | None = None):
        self.kind, self.lr, self.betas, self.eps = kind, lr, betas, eps
        self.state = state if state is not None else {}

    def step(self, params: dict[str, np.ndarray], name: str, grad: np.ndarray) -> None:
        if self.kind == "sgd":
            params[name] -= self.lr * grad
            return
        b1, b2 = self.betas
        m = self.state.setdefault(f"adam.m.{name}", np.zeros_like(grad))
        v = self.state.setdefault(f"adam.v.{name}", np.zeros_like(grad))
        t = self.state.setdefault(f"adam.t.{name}", np.zeros(1))
        t += 1.0
        m *= b1
        m += (1.0 - b1) * grad
        v *= b2
        v += (1.0 - b2) * grad * grad
        mhat = m / (1.0 - b1 ** t[0])
        vhat = v / (1.0 - b2 ** t[0])
        params[name] -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


def sgd_step(state: ModelState, batch: Batch, loss_cfg: LossConfig, opt, warmup: bool = False,
             cached: np.ndarray | None = None) -> tuple[float, ...]:
    """One optimizer step on the full objective; returns (total, ce, cluster, sep, fine).

    ``opt`` is an :class:`Optimizer` or a plain SGD learning rate.
    """
    if not isinstance(opt, Optimizer):
        opt = Optimizer("sgd", float(opt))
    trainable = (state.conv_param_names(addon=True) if warmup else state.conv_param_names()) + ["prototypes"]
    t = state.tensors(trainable)
    if cached is not None:
        graph = build_graph(state, None, t, features=Tensor(cached), start=first_addon_layer(state.config))
    else:
        graph = build_graph(state, Tensor(batch.images), t)
    _, hf, wf = state.config.feature_shape()
    types = state.proto_types[graph.active]
    terms = total_objective(graph, batch, types, loss_cfg, state.k, (hf, wf))
    row = terms.row()
    if not all(math.isfinite(v) for v in row):
        raise _numeric(batch, row, state)
    ad.backward(terms.total)
    for name in trainable:
        g = t[name].grad
        if g is None:
            continue
        if not np.isfinite(g).all():
            raise _numeric(batch, row, state, f"non-finite gradient for {name}")
        opt.step(state.params, name, g)
    return row


def _numeric(batch: Batch, row, state: ModelState, msg: str | None = None) -> NumericError:
    err = NumericError(msg or f"non-finite loss {row} on batch {list(batch.ids[:5])}...")
    err.diagnostic = _diagnostic(batch, row, state)
    return err


def stage_a1(state: ModelState, data, loss_cfg: LossConfig, schedule: TrainSchedule,
             rng: np.random.Generator, warmup: bool = False, epochs: int = 1,
             fine_subset: np.ndarray | None = None, cache: np.ndarray | None = None,
             opt: Optimizer | None = None) -> list[tuple[float, ...]]:
    """Joint SGD on the extractor and prototypes (add-on layers and prototypes only during warm-up).

    Mutates ``state``; returns the per-epoch mean of (total, ce, cluster, sep, fine).
    """
    _check_stage_a(state, "stage_a1")
    data = _as_data(data)
    if warmup and cache is None and not schedule.augment:
        cache = base_features(state, data.images)
    opt = opt or Optimizer(schedule.optimizer, schedule.lr_joint)
    rows = []
    for _ in range(epochs):
        acc = []
        for idx, member in epoch_batches(data, schedule, rng, fine_subset):
            if schedule.augment:
                batch = _augmented(data, idx, rng)
                batch.in_fine_subset = member
                feats = None
            else:
                batch = data.batch(idx, member)
                feats = cache[idx] if warmup else None
            acc.append(sgd_step(state, batch, loss_cfg, opt, warmup, feats))
        rows.append(tuple(float(v) for v in np.mean(np.array(acc), axis=0)))
    return rows


def mean_objective(state: ModelState, data, loss_cfg: LossConfig, batch_size: int = 85) -> float:
    """Objective averaged over fixed consecutive batches, every image counted in D'."""
    data = _as_data(data)
    _, hf, wf = state.config.feature_shape()
    t = state.tensors()
    vals = []
    with ad.no_grad():
        for s in range(0, len(data), batch_size):
            idx = np.arange(s, min(s + batch_size, len(data)))
            graph = build_graph(state, Tensor(data.images[idx]), t)
            terms = total_objective(graph, data.batch(idx), state.proto_types[graph.active], loss_cfg,
                                    state.k, (hf, wf))
            vals.append(terms.total.item())
    return float(np.mean(vals))


FD_STEPS = (1e-4, 3e-5, 1e-5, 3e-6, 1e-6, 3e-7, 1e-7)


def gradcheck_point(config: ModelConfig, seed: int = 0) -> ModelState:
    """A freshly initialized model with small random biases.

    Zero biases put ReLU inputs of dead regions exactly on the kink, where no
    finite difference can agree with any one-sided derivative.
    """
    rng = np.random.default_rng(seed)
    state = init_model(config, rng)
    for name in state.conv_param_names():
        if name.endswith(".bias"):
            state.params[name] = rng.uniform(-0.1, 0.1, state.params[name].shape)
    return state


def gradcheck_batch(data: TrainData) -> Batch:
    """Two images of different types, the first finely annotated when possible; both count as D'."""
    fine = np.flatnonzero(data.has_fine)
    first = int(fine[0]) if len(fine) else 0
    other = np.flatnonzero(data.labels != data.labels[first])
    if not len(other):
        raise DataError("gradient check needs two margin types")
    return data.batch(np.array([first, int(other[0])]))


def gradcheck_setup(seed: int = 0, image_size: int = 32) -> tuple[ModelState, Batch]:
    """Small model plus a two-image batch from a freshly generated dataset, for the gradient check."""
    from .data import GenConfig, generate
    from .network import conv_layers
    cfg = ModelConfig(image_size=(image_size, image_size), layers=conv_layers((4, 4, 8, 8, 8)),
                      prototypes_per_type=2, pool_fraction=0.125)
    ds = generate(GenConfig(n_per_type=4, image_size=(image_size, image_size), context_margin_px=2,
                            fine_fraction=0.5, seed=seed))
    return gradcheck_point(cfg, seed), gradcheck_batch(TrainData.from_samples(ds.split("train")))


def objective_grad_check(state: ModelState, batch: Batch, loss_cfg: LossConfig, epsilon=FD_STEPS,
                         tolerance: float = 1e-4, max_per_param: int | None = None,
                         rng: np.random.Generator | None = None, scale_floor: float = 1e-5) -> ad.GradCheckReport:
    """Finite-difference check of the full training objective w.r.t. every parameter group it touches."""
    names = state.conv_param_names() + ["prototypes", "h1"]
    params = {k: Tensor(state.params[k]) for k in names}
    _, hf, wf = state.config.feature_shape()
    x = Tensor(batch.images)

    def loss_fn():
        t = state.tensors()
        t.update(params)
        graph = build_graph(state, x, t)
        return total_objective(graph, batch, state.proto_types[graph.active], loss_cfg, state.k, (hf, wf)).total

    return ad.grad_check(loss_fn, params, epsilon=epsilon, tolerance=tolerance, max_per_param=max_per_param,
                         rng=rng, scale_floor=scale_floor)


# Stage A2 ------------------------------------------------------------------------

def stage_a2_project(state: ModelState, data, chunk: int = 64) -> ModelState:
    """Replace every active prototype by its nearest same-type training patch.

    Ties go to the lowest sample id, then the lowest row-major patch index.
    """
    _check_stage_a(state, "stage_a2_project")
    data = _as_data(data)
    feats = np.concatenate([forward_features(state, data.images[s:s + chunk])
                            for s in range(0, len(data), chunk)])
    n, c, h, w = feats.shape
    z = feats.reshape(n, c, h * w).transpose(0, 2, 1)
    protos = state.params["prototypes"]
    for t in range(N_TYPES):
        js = [j for j in state.active_indices if state.proto_types[j] == t]
        if not js:
            continue
        rows = np.flatnonzero(data.labels == t)         # ascending, so ascending sample id
        if len(rows) == 0:
            raise DataError(f"cannot project {MARGIN_TYPES[t]} prototypes: no training samples of that type")
        zt = Tensor(z[rows])
        with ad.no_grad():
            d = ad.squared_distances(zt, Tensor(protos[js])).data    # [n_t, m_t, L]
        for col, j in enumerate(js):
            flat = int(np.argmin(d[:, col, :].reshape(-1)))           # first minimum in (sample, patch) order
            i, l = divmod(flat, h * w)
            protos[j] = z[rows[i], l].copy()
            state.proto_sources[j] = (data.ids[rows[i]], l // w, l % w)
    return state


def forward_features(state: ModelState, images: np.ndarray) -> np.ndarray:
    with ad.no_grad():
        return run_layers(state.config, Tensor(images), state.tensors()).data


# Stage A3 ------------------------------------------------------------------------

def training_scores(state: ModelState, data, batch_size: int = 64) -> np.ndarray:
    return forward(state, _as_data(data).images, batch_size).scores


def _ce_of(scores: np.ndarray, h1: np.ndarray, labels: np.ndarray) -> float:
    with ad.no_grad():
        return cross_entropy_margin(margin_logits_t(Tensor(scores), Tensor(h1)), labels).item()


def margin_ce(state: ModelState, data) -> float:
    """Margin cross-entropy of the current model on ``data``."""
    data = _as_data(data)
    return _ce_of(training_scores(state, data), state.params["h1"][:, state.active_indices], data.labels)


def stage_a3(state: ModelState, data, schedule: TrainSchedule, first_entry: bool = False,
             scores: np.ndarray | None = None) -> list[float]:
    """Full-batch gradient descent on h1 with backtracking; CE never increases.

    Returns the cross-entropy after each accepted step (first element: the start value).
    """
    _check_stage_a(state, "stage_a3")
    data = _as_data(data)
    if first_entry:
        state.params["h1"] = h1_initial(state.proto_types)
    act = state.active_indices
    s = training_scores(state, data) if scores is None else scores
    y = np.eye(N_TYPES)[data.labels]
    h = state.params["h1"][:, act].copy()
    loss = _ce_of(s, h, data.labels)
    trace, lr = [loss], schedule.lr_h1
    for _ in range(schedule.a3_steps_per_cycle):
        logits = s @ h.T
        p = np.exp(logits - logits.max(axis=1, keepdims=True))
        p /= p.sum(axis=1, keepdims=True)
        g = (p - y).T @ s / len(s)
        gg = float(np.sum(g * g))
        if gg == 0.0:
            break
        for _ in range(40):
            cand = h - lr * g
            new = _ce_of(s, cand, data.labels)
            if new < loss and new <= loss - 1e-4 * lr * gg:
                break
            lr *= 0.5
        else:
            break
        h, loss = cand, new
        trace.append(loss)
        lr *= 1.5
    state.params["h1"][:, act] = h
    return trace


# Stage B -------------------------------------------------------------------------

def _softplus(z):
    return np.logaddexp(0.0, z)


def _b_loss(w, b, rho, x, y) -> float:
    z = (x @ w - b) / math.exp(rho)
    return float(np.mean(_softplus(z) - y * z))


def stage_b(state: ModelState, data, schedule: TrainSchedule | None = None,
            logits: np.ndarray | None = None) -> list[float]:
    """Fit h2 (weights, shift, scale) by logistic regression on the margin logits.

    The weights are kept summing to zero. Trained margin logits carry a large
    common-mode component, and without the constraint the three weights are
    only identified up to a direction that flips their signs. Weights are
    shrunk into [-C, C] (a uniform rescale keeps the zero sum); the scale is
    parametrized as exp(rho). Closes Stage A on this state. Returns the
    logistic-loss trace.
    """
    schedule = schedule or TrainSchedule()
    data = _as_data(data)
    y = data.malignancy.astype(np.float64)
    if len(np.unique(y)) < 2:
        raise DataError("stage_b: malignancy labels are all one class; the fit is degenerate")
    x = forward(state, data.images).margin_logits if logits is None else np.asarray(logits, dtype=np.float64)
    # descend in units of the logits' spread; w below is the weight per unit of x / spread
    spread = float(np.std(x)) or 1.0
    x = x / spread
    c = schedule.weight_clip * spread
    w, b, rho = np.zeros(N_TYPES), 0.0, 0.0
    loss = _b_loss(w, b, rho, x, y)
    trace, lr = [loss], schedule.lr_b
    for _ in range(schedule.b_steps):
        tau = math.exp(rho)
        z = (x @ w - b) / tau
        r = (ad._sigmoid(z) - y) / len(y)
        gw, gb, grho = x.T @ r / tau, -r.sum() / tau, -float(r @ z)
        gw = gw - gw.mean()
        gg = float(gw @ gw + gb * gb + grho * grho)
        if gg < 1e-30:
            break
        for _ in range(40):
            w2 = w - lr * gw
            big = float(np.abs(w2).max())
            if big > c:
                w2 = w2 * (c / big)
            b2, rho2 = b - lr * gb, float(np.clip(rho - lr * grho, -20.0, 20.0))
            new = _b_loss(w2, b2, rho2, x, y)
            if new <= loss - 1e-4 * lr * gg or (new < loss and lr < 1e-12):
                break
            lr *= 0.5
        else:
            break
        if not new < loss:
            break
        w, b, rho, loss = w2, b2, rho2, new
        trace.append(loss)
        lr *= 1.5
    state.params["h2.weight"] = w / spread
    state.params["h2.shift"] = np.array([b])
    state.params["h2.scale"] = np.array([math.exp(rho)])
    state.stage_b_done = True
    return trace


# full schedule -----------------------------------------------------------------

def initial_progress() -> dict:
    return {"phase": "warmup", "cycle": 0, "epoch": 0, "cycle_losses": [], "prev_cycle_mean": None,
            "a3_entered": False, "converged": False, "fine_subset": None}


def _nan_row(*vals) -> list:
    return list(vals) + [float("nan")] * (8 - len(vals))


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    done: bool

    @property
    def state(self) -> ModelState:
        return self.checkpoint.state

    @property
    def history(self) -> list:
        return self.checkpoint.history


def train(config: TrainConfig, samples, resume: Checkpoint | None = None,
          stop_after: int | None = None, log=None) -> TrainResult:
    """Run (or continue) the full schedule.

    ``stop_after`` limits the number of schedule units (epochs, cycle closes,
    Stage B) executed in this call; the returned checkpoint resumes exactly.
    """
    data = _as_data(samples)
    sch = config.schedule
    if resume is None:
        rng = np.random.default_rng(sch.seed)
        state = init_model(config.model, rng)
        progress, history = initial_progress(), []
        if sch.fine_mode == "dataset":
            progress["fine_subset"] = np.flatnonzero(choose_fine_subset(data, sch, rng)).tolist()
    else:
        state = resume.state.copy()
        progress, history = dict(resume.progress), [list(r) for r in resume.history]
        progress["cycle_losses"] = list(progress["cycle_losses"])
        rng = np.random.default_rng()
        rng.bit_generator.state = resume.rng_state
    opt = Optimizer(sch.optimizer, sch.lr_joint,
                    state={k: v.copy() for k, v in resume.opt_state.items()} if resume is not None else None)
    fine_subset = None
    if progress["fine_subset"] is not None:
        fine_subset = np.zeros(len(data), dtype=bool)
        fine_subset[progress["fine_subset"]] = True
    cache = None
    units = 0

    def emit(row):
        history.append(row)
        if log:
            log(row)

    while progress["phase"] != "done":
        if stop_after is not None and units >= stop_after:
            break
        units += 1
        ph = progress["phase"]
        if ph == "warmup":
            if progress["epoch"] < sch.warmup_epochs:
                if cache is None and not sch.augment:
                    cache = base_features(state, data.images)
                (row,) = stage_a1(state, data, config.loss, sch, rng, warmup=True, fine_subset=fine_subset,
                                  cache=cache, opt=opt)
                emit([0, "warmup", progress["epoch"], *row])
                progress["epoch"] += 1
                continue
            progress.update(phase="cycle", epoch=0)
            units -= 1
            continue
        if ph == "cycle":
            if progress["epoch"] < sch.a1_epochs_per_cycle:
                (row,) = stage_a1(state, data, config.loss, sch, rng, fine_subset=fine_subset, opt=opt)
                emit([progress["cycle"], "A1", progress["epoch"], *row])
                progress["cycle_losses"].append(row[0])
                progress["epoch"] += 1
                continue
            stage_a2_project(state, data)
            emit(_nan_row(progress["cycle"], "A2", 0, mean_objective(state, data, config.loss)))
            ce = stage_a3(state, data, sch, first_entry=not progress["a3_entered"])
            progress["a3_entered"] = True
            emit(_nan_row(progress["cycle"], "A3", len(ce) - 1, ce[-1], ce[-1]))
            mean = float(np.mean(progress["cycle_losses"])) if progress["cycle_losses"] else None
            prev = progress["prev_cycle_mean"]
            if mean is not None and prev is not None and abs(mean - prev) / max(abs(prev), 1e-12) < sch.convergence_tol:
                progress["converged"] = True
            progress.update(cycle=progress["cycle"] + 1, epoch=0, cycle_losses=[], prev_cycle_mean=mean)
            if progress["converged"] or progress["cycle"] >= sch.max_cycles:
                progress["phase"] = "b"
            continue
        if ph == "b":
            trace = stage_b(state, data, sch)
            emit(_nan_row(progress["cycle"], "B", len(trace) - 1, trace[-1]))
            progress["phase"] = "done"
    ckpt = Checkpoint(state, progress, rng.bit_generator.state, history, {"train_config": config.to_dict()},
                      opt.state)
    return TrainResult(ckpt, progress["phase"] == "done")


def format_trace(history) -> str:
    lines = [TRACE_HEADER]
    for row in history:
        cyc, stage, ep, *vals = row
        lines.append(",".join([str(cyc), stage, str(ep)] + [repr(float(v)) for v in vals]))
    return "\n".join(lines) + "\n"


# pruning -----------------------------------------------------------------------

@dataclass
class PruneReport:
    removed: list[tuple[int, str, str]]        # (prototype index, type, reason)
    before: dict[str, int]
    after: dict[str, int]

    def lines(self) -> list[str]:
        out = ["index,type,reason"] + [f"{j},{t},{r}" for j, t, r in self.removed]
        out.append("type,before,after")
        out += [f"{t},{self.before[t]},{self.after[t]}" for t in MARGIN_TYPES]
        return out


def _type_counts(state: ModelState) -> dict[str, int]:
    return {t: int(np.sum(state.proto_active & (state.proto_types == i))) for i, t in enumerate(MARGIN_TYPES)}


def prune(state: ModelState, criteria=("duplicate_source", "wrong_sign")) -> tuple[ModelState, PruneReport]:
    """Deactivate duplicate-source and wrong-sign prototypes on a copy of ``state``.

    A duplicate's h1 column is folded into its surviving twin (they share the
    same vector, hence the same score), so the margin logits keep their value.
    """
    unknown = set(criteria) - {"duplicate_source", "wrong_sign"}
    if unknown:
        raise ConfigError(f"unknown pruning criteria {sorted(unknown)}")
    new = state.copy()
    act = new.active_indices
    if any(new.proto_sources[j] is None for j in act):
        raise ConfigError("prune needs projected prototypes (run Stage A2 first)")
    h1 = new.params["h1"]
    removed = []
    if "duplicate_source" in criteria:
        seen: dict[tuple, int] = {}
        for j in act:
            key = (int(new.proto_types[j]), tuple(new.proto_sources[j]))
            if key in seen:
                h1[:, seen[key]] += h1[:, j]
                new.proto_active[j] = False
                removed.append((int(j), MARGIN_TYPES[new.proto_types[j]], "duplicate_source"))
            else:
                seen[key] = j
    if "wrong_sign" in criteria:
        for j in new.active_indices:
            t = new.proto_types[j]
            others = np.delete(h1[:, j], t)
            if not h1[t, j] > others.max():
                new.proto_active[j] = False
                removed.append((int(j), MARGIN_TYPES[t], "wrong_sign"))
    after = _type_counts(new)
    empty = [t for t, n in after.items() if n == 0]
    if empty:
        raise ConfigError(f"pruning rejected: it would leave no prototypes for {', '.join(empty)}")
    return new, PruneReport(sorted(removed), _type_counts(state), after)
