"""Stage 2: unsupervised STDP classifier with lateral inhibition.

An input layer of Poisson spike sources drives ``n_neurons`` excitatory
adaptive-threshold units. Each excitatory unit has a paired inhibitory unit
that, when it fires, inhibits every excitatory unit except its partner.
Learning is a trace-based pair rule on the input weights; labels are assigned
after training and inference weights each neuron's vote by its class
specialization.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import kernels
from .kernels import (P_D_POST, P_D_PRE, P_D_THETA, P_ETA_POST, P_ETA_PRE, P_EXC, P_INH,
                      P_LEAK, P_ONE_SPIKE, P_THETA_BASE, P_THETA_INH, P_THETA_PLUS)

log = logging.getLogger(__name__)

F32 = np.float32
ABSTAIN = -1
UNASSIGNED = -1

EXC_RANGE = (20.0, 50.0)
INH_RANGE = (150.0, 250.0)
THETA_PLUS_RANGE = (0.001, 0.02)


class DegenerateClassifierError(RuntimeError):
    pass


@dataclass
class Stage2Config:
    n_neurons: int = 500
    exc: float = 35.0
    inh: float = 200.0
    theta_plus: float = 0.0105
    batch_size: int = 32
    epochs: int = 10
    patience: int = 3
    eta_pre: float = 1e-5
    eta_post: float = 1e-3
    t_c: int = 300
    w_max: float = 1.0
    w_init_max: float = 0.3
    w_norm: float | None = 0.005  # per-input share: target incoming-weight sum = w_norm * n_features
    tau_pre: float = 20.0
    tau_post: float = 20.0
    tau_theta: float = 1e5
    theta_exc: float = 4.0
    theta_inh: float = 20.0
    leak_tau: float | None = None
    one_spike: bool = True  # at most one excitatory spike per step (largest overshoot wins)
    rate_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        for name in ("n_neurons", "batch_size", "t_c", "patience"):
            if getattr(self, name) <= 0:
                raise ValueError(f"Stage2Config.{name} must be positive")
        if self.epochs < 0:
            raise ValueError("Stage2Config.epochs must be >= 0")
        if self.theta_plus < 0 or self.w_max <= 0 or self.theta_exc <= 0 or self.theta_inh <= 0:
            raise ValueError("Stage2Config: theta_plus >= 0, w_max > 0 and positive thresholds required")
        if self.leak_tau is not None and self.leak_tau <= 0:
            raise ValueError("Stage2Config.leak_tau must be positive or None")

    def packed(self) -> np.ndarray:
        p = np.zeros(12, F32)
        p[P_THETA_BASE] = self.theta_exc
        p[P_THETA_INH] = self.theta_inh
        p[P_EXC] = self.exc
        p[P_INH] = self.inh
        p[P_D_PRE] = math.exp(-1.0 / self.tau_pre)
        p[P_D_POST] = math.exp(-1.0 / self.tau_post)
        p[P_D_THETA] = math.exp(-1.0 / self.tau_theta)
        p[P_THETA_PLUS] = self.theta_plus
        p[P_ETA_PRE] = self.eta_pre
        p[P_ETA_POST] = self.eta_post
        p[P_LEAK] = math.exp(-1.0 / self.leak_tau) if self.leak_tau else 1.0
        p[P_ONE_SPIKE] = 1.0 if self.one_spike else 0.0
        return p


@dataclass
class ClassifierState:
    cfg: Stage2Config
    w: np.ndarray                      # [n_features, n_neurons] in [0, w_max]
    theta_adapt: np.ndarray            # [n_neurons] adaptive threshold component, >= 0
    n_classes: int = 0
    labels: np.ndarray | None = None   # [n_neurons], UNASSIGNED for silent neurons
    specialization: np.ndarray | None = None
    class_counts: np.ndarray | None = None  # [n_neurons, n_classes]
    # membrane and trace variables of the current presentation
    v_exc: np.ndarray = field(default=None, repr=False)
    v_inh: np.ndarray = field(default=None, repr=False)
    x_pre: np.ndarray = field(default=None, repr=False)
    x_post: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.w = np.ascontiguousarray(self.w, F32)
        self.theta_adapt = np.ascontiguousarray(self.theta_adapt, F32)
        if self.v_exc is None:
            self.reset_presentation()

    @classmethod
    def init(cls, n_features: int, cfg: Stage2Config, rng=None):
        rng = rng if rng is not None else np.random.default_rng(cfg.seed)
        w = rng.uniform(0.0, cfg.w_init_max, size=(n_features, cfg.n_neurons)).astype(F32)
        state = cls(cfg, w, np.zeros(cfg.n_neurons, F32))
        if cfg.w_norm:
            state.normalize()
        return state

    @property
    def n_features(self):
        return self.w.shape[0]

    @property
    def n_neurons(self):
        return self.w.shape[1]

    @property
    def inhibition_mask(self) -> np.ndarray:
        """W_{R->R}: each inhibitory unit reaches every excitatory unit except its partner."""
        m = np.ones((self.n_neurons, self.n_neurons), F32)
        np.fill_diagonal(m, 0)
        m.flags.writeable = False
        return m

    @property
    def theta_exc(self) -> np.ndarray:
        return (F32(self.cfg.theta_exc) + self.theta_adapt).astype(F32)

    def reset_presentation(self):
        n = self.n_neurons
        self.v_exc = np.zeros(n, F32)
        self.v_inh = np.zeros(n, F32)
        self.x_pre = np.zeros(self.n_features, F32)
        self.x_post = np.zeros(n, F32)

    def normalize(self):
        """Rescale each neuron's incoming weights to sum to ``w_norm * n_features``, then clip."""
        if not self.cfg.w_norm:
            return
        target = F32(self.cfg.w_norm * self.n_features)
        sums = self.w.sum(axis=0, dtype=F32)
        scale = np.where(sums > 0, target / np.where(sums > 0, sums, 1), F32(1)).astype(F32)
        self.w *= scale[None, :]
        np.clip(self.w, 0, F32(self.cfg.w_max), out=self.w)

    def copy(self):
        def cp(a):
            return None if a is None else a.copy()
        return ClassifierState(self.cfg, self.w.copy(), self.theta_adapt.copy(), self.n_classes,
                               cp(self.labels), cp(self.specialization), cp(self.class_counts),
                               cp(self.v_exc), cp(self.v_inh), cp(self.x_pre), cp(self.x_post))


# ---------------------------------------------------------------------------
# encoding

def poisson_encode(rates, t_c: int, rng, scale: float = 1.0) -> np.ndarray:
    """Bernoulli spike train ``[t_c, n]`` (uint8) with per-step probability ``clip(rate * scale, 0, 1)``."""
    rates = np.asarray(rates, np.float64)
    if np.any(rates < 0) or not np.all(np.isfinite(rates)):
        raise ValueError("poisson_encode: rates must be finite and non-negative")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    p = np.clip(rates * scale, 0.0, 1.0)
    return (rng.random((int(t_c),) + p.shape) < p).astype(np.uint8)


# ---------------------------------------------------------------------------
# single-timestep API

def classifier_step(state: ClassifierState, s_in):
    """Advance membranes by one step; returns ``(s_exc, s_inh)`` as bool arrays."""
    cfg = state.cfg
    s_in = np.asarray(s_in)
    if cfg.leak_tau:
        state.v_exc *= F32(math.exp(-1.0 / cfg.leak_tau))
    active = np.flatnonzero(s_in)
    if active.size:
        state.v_exc += state.w[active].sum(axis=0)
    thr = F32(cfg.theta_exc) + state.theta_adapt
    s_exc = state.v_exc >= thr
    if cfg.one_spike and s_exc.sum() > 1:
        winner = np.where(s_exc, state.v_exc - thr, -np.inf).argmax()
        s_exc = np.zeros_like(s_exc)
        s_exc[winner] = True
    state.v_inh += s_exc.astype(F32) * F32(cfg.exc)
    s_inh = state.v_inh >= F32(cfg.theta_inh)
    state.v_exc -= F32(cfg.inh) * (s_inh.astype(F32) @ state.inhibition_mask)
    state.v_exc[s_exc] = 0
    state.v_inh[s_inh] = 0
    np.maximum(state.v_exc, 0, out=state.v_exc)
    return s_exc, s_inh


def stdp_update(state: ClassifierState, s_in, s_exc, out=None):
    """Update traces and apply the pair rule for this step.

    Post spikes potentiate by ``eta_post * x_pre``; pre spikes depress by
    ``eta_pre * x_post``. The delta is added to ``out`` when given, otherwise
    applied to ``state.w`` and clipped to ``[0, w_max]``. Returns the delta.
    """
    cfg = state.cfg
    s_in = np.asarray(s_in).astype(F32)
    s_exc = np.asarray(s_exc).astype(F32)
    state.x_pre *= F32(math.exp(-1.0 / cfg.tau_pre))
    state.x_pre += s_in
    state.x_post *= F32(math.exp(-1.0 / cfg.tau_post))
    state.x_post += s_exc
    delta = F32(cfg.eta_post) * np.outer(state.x_pre, s_exc) - F32(cfg.eta_pre) * np.outer(s_in, state.x_post)
    delta = delta.astype(F32)
    if out is not None:
        out += delta
    else:
        state.w += delta
        np.clip(state.w, 0, F32(cfg.w_max), out=state.w)
    return delta


def adapt_thresholds(state: ClassifierState, s_exc):
    """Decay the adaptive component by ``exp(-1/tau_theta)`` and add ``theta_plus`` where spiking."""
    cfg = state.cfg
    state.theta_adapt *= F32(math.exp(-1.0 / cfg.tau_theta))
    state.theta_adapt += np.asarray(s_exc).astype(F32) * F32(cfg.theta_plus)
    return state.theta_exc


# ---------------------------------------------------------------------------
# whole presentations (fused kernel)

def present(state: ClassifierState, spikes_in, learn=False, adapt=False, theta_adapt=None):
    """Run one presentation from a fresh membrane state.

    Returns ``(counts, n_inh_spikes, dw)``; ``dw`` is the accumulated STDP delta
    (``None`` unless ``learn``). Weights are not modified. Adaptive thresholds
    are updated in ``theta_adapt`` (default: ``state.theta_adapt``) when ``adapt``.
    """
    spikes_in = np.ascontiguousarray(spikes_in, np.uint8)
    if spikes_in.ndim != 2 or spikes_in.shape[1] != state.n_features:
        raise ValueError(f"spike train must be [T, {state.n_features}], got {spikes_in.shape}")
    th = state.theta_adapt if theta_adapt is None else theta_adapt
    dw = np.zeros_like(state.w) if learn else np.zeros((1, 1), F32)
    counts = np.zeros(state.n_neurons, np.int64)
    n_inh = kernels.present(spikes_in, state.w, th, dw, counts, state.cfg.packed(), bool(learn), bool(adapt))
    return counts, int(n_inh), (dw if learn else None)


def sample_rng(seed, *keys):
    return np.random.default_rng([int(seed)] + [int(k) for k in keys])


_PHASE_TRAIN, _PHASE_LABEL, _PHASE_EVAL = 0, 1, 2


def run_counts(state: ClassifierState, features, t_c=None, seed=None, phase=_PHASE_EVAL, epoch=0):
    """Spike counts ``[N, n_neurons]`` and input/inhibitory spike totals with frozen thresholds."""
    cfg = state.cfg
    t_c = cfg.t_c if t_c is None else int(t_c)
    seed = cfg.seed if seed is None else seed
    features = np.asarray(features)
    counts = np.zeros((len(features), state.n_neurons), np.int64)
    n_in = np.zeros(len(features), np.int64)
    n_inh = np.zeros(len(features), np.int64)
    for k, r in enumerate(features):
        train = poisson_encode(r, t_c, sample_rng(seed, phase, epoch, k), cfg.rate_scale)
        counts[k], n_inh[k], _ = present(state, train)
        n_in[k] = int(train.sum())
    return counts, n_in, n_inh


def assign_labels(state: ClassifierState, counts, labels, n_classes: int):
    """Label each neuron by the class that drives it most; record its specialization."""
    counts = np.asarray(counts)
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise ValueError("assign_labels needs a non-empty labelled set")
    onehot = np.zeros((len(labels), n_classes), np.int64)
    onehot[np.arange(len(labels)), labels] = 1
    per_class = counts.T @ onehot                      # [n_neurons, n_classes]
    total = per_class.sum(axis=1)
    best = per_class.argmax(axis=1)
    state.n_classes = n_classes
    state.class_counts = per_class
    state.labels = np.where(total > 0, best, UNASSIGNED).astype(np.int64)
    spec = np.zeros(state.n_neurons, F32)
    live = total > 0
    spec[live] = per_class[live, best[live]] / total[live]
    state.specialization = spec
    return state.labels, state.specialization


def class_scores(state: ClassifierState, counts) -> np.ndarray:
    """Per-class score: sum over labelled neurons of ``count * specialization``."""
    if state.labels is None:
        raise RuntimeError("assign_labels must run before prediction")
    counts = np.atleast_2d(np.asarray(counts, np.float64))
    weights = np.zeros((state.n_neurons, state.n_classes), np.float64)
    live = state.labels != UNASSIGNED
    weights[np.flatnonzero(live), state.labels[live]] = state.specialization[live]
    return counts @ weights


def predict(state: ClassifierState, counts):
    """Class with the highest weighted vote; ties go to the lowest index, all-zero scores abstain."""
    scores = class_scores(state, counts)
    pred = scores.argmax(axis=1)
    pred[scores.max(axis=1) <= 0] = ABSTAIN
    return pred if np.ndim(counts) == 2 else int(pred[0])


def accuracy(pred, labels):
    pred, labels = np.asarray(pred), np.asarray(labels)
    if len(labels) == 0:
        return 0.0, 0
    return float((pred == labels).mean()), int((pred == ABSTAIN).sum())


# ---------------------------------------------------------------------------
# training

def apply_batch(state: ClassifierState, dws, thetas, theta0):
    """Fold per-sample results of one minibatch into the state.

    Weight deltas are reduced by elementwise maximum and applied once.
    Threshold increments are combined as if the samples had been shown in
    sequence; with one sample this is exactly the online update.
    """
    dw = dws[0] if len(dws) == 1 else np.maximum.reduce(dws)
    state.w += dw
    np.clip(state.w, 0, F32(state.cfg.w_max), out=state.w)
    state.normalize()
    if len(thetas) == 1:
        state.theta_adapt[:] = thetas[0]
        return
    decay = math.exp(-state.cfg.t_c / state.cfg.tau_theta)
    b = len(thetas)
    new = theta0.astype(np.float64) * decay ** b
    for k, th in enumerate(thetas):
        inc = th.astype(np.float64) - theta0.astype(np.float64) * decay
        new += inc * decay ** (b - 1 - k)
    state.theta_adapt[:] = np.maximum(new, 0).astype(F32)


def train_epoch(state: ClassifierState, features, epoch: int, order):
    cfg = state.cfg
    total_spikes = 0
    for start in range(0, len(order), cfg.batch_size):
        idx = order[start:start + cfg.batch_size]
        theta0 = state.theta_adapt.copy()
        dws, thetas = [], []
        for k in idx:
            train = poisson_encode(features[k], cfg.t_c, sample_rng(cfg.seed, _PHASE_TRAIN, epoch, k),
                                   cfg.rate_scale)
            th = theta0.copy()
            counts, _, dw = present(state, train, learn=True, adapt=True, theta_adapt=th)
            total_spikes += int(counts.sum())
            dws.append(dw)
            thetas.append(th)
        apply_batch(state, dws, thetas, theta0)
    return total_spikes


@dataclass
class Stage2Result:
    state: ClassifierState
    best_val_acc: float
    best_epoch: int
    log: list = field(default_factory=list)

    def log_csv(self) -> str:
        rows = ["epoch,train_spikes,val_acc,val_abstain"]
        rows += [f"{r['epoch']},{r['train_spikes']},{r['val_acc']:.6f},{r['val_abstain']}" for r in self.log]
        return "\n".join(rows) + "\n"


def train_stage2(state: ClassifierState, train_feats, train_labels, val_feats, val_labels,
                 n_classes: int) -> Stage2Result:
    """Unsupervised training with per-epoch label assignment and early stopping on validation accuracy."""
    cfg = state.cfg
    train_feats = np.asarray(train_feats, F32)
    val_feats = np.asarray(val_feats, F32)
    train_labels, val_labels = np.asarray(train_labels), np.asarray(val_labels)
    if len(train_feats) == 0 or len(val_feats) == 0:
        raise ValueError("train_stage2 needs non-empty training and validation sets")
    state = state.copy()
    rng = np.random.default_rng([cfg.seed, 17])
    best, best_acc, best_epoch = None, -1.0, -1
    history = []
    for epoch in range(cfg.epochs):
        spikes = train_epoch(state, train_feats, epoch, rng.permutation(len(train_feats)))
        counts, _, _ = run_counts(state, train_feats, phase=_PHASE_LABEL, epoch=epoch)
        if epoch == 0 and counts.sum() == 0:
            raise DegenerateClassifierError(
                "classifier stayed silent after the first epoch; lower theta_exc or raise rate_scale")
        assign_labels(state, counts, train_labels, n_classes)
        val_counts, _, _ = run_counts(state, val_feats, phase=_PHASE_EVAL, epoch=epoch)
        val_acc, abstain = accuracy(predict(state, val_counts), val_labels)
        history.append({"epoch": epoch, "train_spikes": spikes, "val_acc": val_acc, "val_abstain": abstain})
        log.info("stage2 epoch %d spikes=%d val_acc=%.3f abstain=%d", epoch, spikes, val_acc, abstain)
        if val_acc > best_acc:
            best, best_acc, best_epoch = state.copy(), val_acc, epoch
        elif epoch - best_epoch >= cfg.patience:
            break
    if best is None:
        best = state
    return Stage2Result(best, best_acc, best_epoch, history)


def train_fixed(state: ClassifierState, feats, labels, n_classes: int, epochs: int) -> ClassifierState:
    """Train for a fixed number of epochs without a validation set, then label on ``feats``.

    Used for the final refit on train+val once hyperparameters are chosen.
    """
    feats = np.asarray(feats, F32)
    labels = np.asarray(labels)
    if len(feats) == 0:
        raise ValueError("train_fixed needs a non-empty dataset")
    state = state.copy()
    rng = np.random.default_rng([state.cfg.seed, 17])
    for epoch in range(epochs):
        train_epoch(state, feats, epoch, rng.permutation(len(feats)))
    counts, _, _ = run_counts(state, feats, phase=_PHASE_LABEL, epoch=max(epochs - 1, 0))
    if counts.sum() == 0:
        raise DegenerateClassifierError("classifier is silent on the training set")
    assign_labels(state, counts, labels, n_classes)
    return state


def evaluate(state: ClassifierState, feats, labels, t_c=None, seed=None):
    """Accuracy, abstentions, predictions and the raw count matrix on a labelled set."""
    counts, n_in, n_inh = run_counts(state, feats, t_c=t_c, seed=seed)
    pred = predict(state, counts)
    acc, abstain = accuracy(pred, labels)
    return {"accuracy": acc, "abstain": abstain, "pred": pred, "counts": counts,
            "input_spikes": n_in, "inh_spikes": n_inh}


def config_dict(cfg: Stage2Config) -> dict:
    return asdict(cfg)


def with_overrides(cfg: Stage2Config, **kw) -> Stage2Config:
    return replace(cfg, **kw)
