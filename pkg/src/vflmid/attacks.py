"""Label inference, backdoor, and feature reconstruction attacks.

Each attack is a pure inference routine plus an :class:`AttackHook`
subclass that collects what the attacking party observes during training
into an :class:`AttackTrace`. Ground-truth scoring happens in
:mod:`vflmid.analysis`, never inside the attack.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize

from . import diffcore as dc
from .diffcore import Rng, Tensor
from .errors import AttackInapplicable, ConfigError, ReconstructionDiverged
from .models import (MlpModel, VibLayer, load_checkpoint, model_from_checkpoint, model_to_checkpoint,
                     save_checkpoint, vib_forward)
from .protocol import AttackHook, GradientMessage, GradientView, SAMPLE_LEVEL, VflSystem

log = logging.getLogger(__name__)

ATTACK_KINDS = ("none", "dli", "ds", "bli", "pmc", "amc", "backdoor", "noisy", "missing", "cafe")


@dataclass
class AttackConfig:
    kind: str = "none"
    attacker: int = 1
    # batch-level inversion
    bli_hidden: int = 64
    aux_rounds: int = 400
    bli_epochs: int = 200
    bli_lr: float = 0.1
    # model completion
    aux_per_class: int = 1
    finetune_epochs: int = 200
    finetune_lr: float = 0.05
    amc_gamma: float = 10.0
    # gradient-replacement backdoor
    trigger_fraction: float = 0.01
    target: int = -1            # -1: drawn at random
    gamma: float = 1.0
    trigger_size: int = 3
    trigger_value: float = 2.0
    # non-targeted
    noisy_fraction: float = 0.01
    noise_std: float = 2.0
    missing_fraction: float = 0.25
    # reconstruction
    iters: int = 2000
    opt_lr: float = 0.05
    optimizer: str = "lbfgs"    # "lbfgs" | "adam"
    cafe_batch: int = 8
    dump_images: bool = False

    def validate(self):
        if self.kind not in ATTACK_KINDS:
            raise ConfigError(f"unknown attack {self.kind!r}; expected one of {ATTACK_KINDS}")
        for name in ("trigger_fraction", "noisy_fraction", "missing_fraction"):
            v = getattr(self, name)
            if not 0 <= v <= 1:
                raise ConfigError(f"{name} must lie in [0, 1], got {v}")
        return self


@dataclass
class AttackTrace:
    """Everything the attacker legitimately saw: received gradients, snapshots, its own choices."""

    views: list[GradientView] = field(default_factory=list)
    snapshots: dict[str, bytes] = field(default_factory=dict)
    poisoned: dict[str, np.ndarray] = field(default_factory=dict)
    scratch: dict = field(default_factory=dict)
    epoch: int = 0


# ---------------------------------------------------------------- direct label inference

def dli_infer(row) -> tuple[int, bool]:
    """Class of the single negative entry; ``(argmin, False)`` when the sign structure is gone."""
    g = np.asarray(row, dtype=np.float64).reshape(-1)
    neg = np.flatnonzero(g < 0)
    if neg.size == 1:
        return int(neg[0]), True
    return int(np.argmin(g)), False


class DliHook(AttackHook):
    def __init__(self, attacker: int = 1):
        self.attacker_id = attacker
        self.trace = AttackTrace()
        self.records: list[tuple[int, np.ndarray, np.ndarray, np.ndarray]] = []

    def observe(self, view: GradientView):
        if view.per_sample is None:
            raise AttackInapplicable("direct label inference needs sample-level gradients")
        out = [dli_infer(r) for r in view.per_sample]
        self.records.append((self.trace.epoch, view.indices.copy(),
                             np.array([c for c, _ in out]), np.array([ok for _, ok in out])))

    def end_epoch(self, epoch, system):
        self.trace.epoch = epoch + 1

    def predictions(self, last_epoch_only: bool = True):
        recs = self.records
        if last_epoch_only and recs:
            last = recs[-1][0]
            recs = [r for r in recs if r[0] == last]
        if not recs:
            return np.empty(0, int), np.empty(0, int), np.empty(0, bool)
        return (np.concatenate([r[1] for r in recs]), np.concatenate([r[2] for r in recs]),
                np.concatenate([r[3] for r in recs]))


# ---------------------------------------------------------------- direction scoring

def ds_infer(grads, ref) -> tuple[np.ndarray, np.ndarray]:
    """Binary labels by cosine sign against a known positive sample's gradient.

    Returns ``(labels, zero_norm_flags)``; zero-norm rows are labelled negative.
    """
    g = np.atleast_2d(np.asarray(grads, dtype=np.float64))
    r = np.asarray(ref, dtype=np.float64).reshape(-1)
    rn = np.linalg.norm(r)
    if rn == 0:
        raise AttackInapplicable("reference gradient has zero norm")
    norms = np.linalg.norm(g, axis=1)
    zero = norms == 0
    cos = (g @ r) / (np.where(zero, 1.0, norms) * rn)
    labels = ((cos > 0) & ~zero).astype(np.int64)
    return labels, zero


class DsHook(AttackHook):
    def __init__(self, known_positive: int, attacker: int = 1):
        self.attacker_id = attacker
        self.known_positive = int(known_positive)
        self.trace = AttackTrace()
        self.records = []
        self._ref = None

    def observe(self, view: GradientView):
        if view.per_sample is None:
            raise AttackInapplicable("direction scoring needs sample-level gradients")
        hit = np.flatnonzero(view.indices == self.known_positive)
        if hit.size:
            self._ref = view.per_sample[hit[0]].copy()
        if self._ref is None or not np.any(self._ref):
            return
        labels, _ = ds_infer(view.per_sample, self._ref)
        self.records.append((self.trace.epoch, view.indices.copy(), labels))

    def end_epoch(self, epoch, system):
        self.trace.epoch = epoch + 1

    def predictions(self, last_epoch_only: bool = True):
        recs = self.records
        if last_epoch_only and recs:
            recs = [r for r in recs if r[0] == recs[-1][0]]
        if not recs:
            return np.empty(0, int), np.empty(0, int)
        return np.concatenate([r[1] for r in recs]), np.concatenate([r[2] for r in recs])


# ---------------------------------------------------------------- batch-level label inference

@dataclass
class InversionModel:
    net: MlpModel
    num_classes: int
    mean: np.ndarray
    std: np.ndarray

    def mass(self, batch_grad) -> np.ndarray:
        x = (_direction(batch_grad) - self.mean) / self.std
        return dc.softmax(self.net.forward(Tensor(x)).data)


def _direction(g) -> np.ndarray:
    """Rows scaled to unit norm; the label mix lives in the direction, not the magnitude."""
    g = np.atleast_2d(np.asarray(g, dtype=np.float64))
    n = np.linalg.norm(g, axis=1, keepdims=True)
    return g / np.where(n > 0, n, 1.0)


def new_inversion_model(in_dim: int, num_classes: int, hidden: int, rng: Rng) -> InversionModel:
    net = MlpModel.init([in_dim, hidden, hidden, num_classes], rng)
    return InversionModel(net, num_classes, np.zeros(in_dim), np.ones(in_dim))


def last_layer_grad(param_grads: dict[str, np.ndarray]) -> np.ndarray:
    n = len(param_grads) // 2 - 1
    return np.concatenate([param_grads[f"W{n}"].reshape(-1), param_grads[f"b{n}"].reshape(-1)])


def simulate_aux_traces(model: MlpModel, aux_x: np.ndarray, aux_y: np.ndarray, num_classes: int,
                        rounds: int, batch_size: int, rng: Rng):
    """Attacker-side rounds on its own labelled data, treating its output as the logits."""
    traces = []
    n = len(aux_y)
    params = list(model.params.values())
    names = list(model.params)
    for r in range(rounds):
        # every other batch skews the label mix so the inversion sees a range of proportions
        if r % 2:
            w = rng.uniform(0.0, 1.0, num_classes) ** 3 + 1e-3
            p = w[aux_y] / w[aux_y].sum()
        else:
            p = None
        idx = rng._gen.choice(n, size=batch_size, replace=True, p=p)
        loss, _ = dc.softmax_cross_entropy(model.forward(Tensor(aux_x[idx])), aux_y[idx])
        grads = dc.backward(loss, wrt=params)
        g = last_layer_grad({k: grads[t] for k, t in zip(names, params)})
        traces.append((g, np.bincount(aux_y[idx], minlength=num_classes)))
    return traces


def bli_fit(aux_traces, num_classes: int, hidden: int = 64, epochs: int = 200, lr: float = 0.1,
            rng: Rng | None = None) -> InversionModel:
    """Fit the inversion net on ``(batch_gradient, label_counts)`` pairs."""
    if len(aux_traces) < 10:
        raise ConfigError(f"batch-level inversion needs at least 10 aux traces, got {len(aux_traces)}")
    rng = rng or Rng(0)
    X = _direction(np.stack([np.asarray(g, dtype=np.float64).reshape(-1) for g, _ in aux_traces]))
    counts = np.stack([np.asarray(c, dtype=np.float64) for _, c in aux_traces])
    T = counts / counts.sum(axis=1, keepdims=True)
    mean, std = X.mean(axis=0), X.std(axis=0)
    std = np.where(std > 0, std, 1.0)
    model = new_inversion_model(X.shape[1], num_classes, hidden, rng.child("init"))
    model.mean, model.std = mean, std
    Xs = (X - mean) / std
    bs = min(64, len(X))
    order_rng = rng.child("order")
    for _ in range(epochs):
        perm = order_rng.permutation(len(X))
        for s in range(0, len(X), bs):
            idx = perm[s:s + bs]
            loss = dc.soft_cross_entropy(model.net.forward(Tensor(Xs[idx])), T[idx])
            grads = dc.backward(loss, wrt=list(model.net.params.values()))
            model.net.step(grads, lr, 5.0)
    return model


def bli_infer(model: InversionModel, batch_grad, batch_size: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-class count estimates and a per-slot label guess for one batch.

    Slots are filled class by class in decreasing order of estimated mass.
    """
    mass = model.mass(batch_grad)[0]
    raw = mass * batch_size
    counts = np.floor(raw).astype(int)
    rest = batch_size - counts.sum()
    if rest > 0:
        counts[np.argsort(-(raw - counts), kind="stable")[:rest]] += 1
    order = np.argsort(-mass, kind="stable")
    guesses = np.concatenate([np.full(counts[c], c) for c in order]).astype(np.int64)
    return counts, guesses


class BliHook(AttackHook):
    """Records only batch-aggregated parameter gradients of the attacker's last layer."""

    def __init__(self, attacker: int = 1):
        self.attacker_id = attacker
        self.trace = AttackTrace()
        self.records = []

    def observe(self, view: GradientView):
        self.records.append((self.trace.epoch, view.indices.copy(), last_layer_grad(view.param_grads)))

    def end_epoch(self, epoch, system):
        self.trace.epoch = epoch + 1

    def after_training(self, system: VflSystem):
        self.trace.snapshots["local"] = save_checkpoint(model_to_checkpoint(system.party(self.attacker_id).local_model))


# ---------------------------------------------------------------- model completion

@dataclass
class CompletedModel:
    body: MlpModel
    head: MlpModel

    def forward(self, x: Tensor) -> Tensor:
        return self.head.forward(self.body.forward(x))


def mc_attack(snapshot: MlpModel, aux_x: np.ndarray, aux_y: np.ndarray, num_classes: int,
              finetune_epochs: int = 200, lr: float = 0.05, rng: Rng | None = None) -> CompletedModel:
    """Attach a linear classifier to the stolen bottom model and fine-tune both on the aux set."""
    aux_y = np.asarray(aux_y, dtype=np.int64)
    if len(aux_y) == 0:
        raise ConfigError("model completion needs a nonempty auxiliary set")
    if len(np.unique(aux_y)) < num_classes:
        log.warning("auxiliary set covers %d of %d classes", len(np.unique(aux_y)), num_classes)
    rng = rng or Rng(0)
    clf = CompletedModel(snapshot.copy(), MlpModel.init([snapshot.out_dim, num_classes], rng.child("head")))
    x = Tensor(np.asarray(aux_x, dtype=np.float64))
    for _ in range(finetune_epochs):
        loss, _ = dc.softmax_cross_entropy(clf.forward(x), aux_y)
        grads = dc.backward(loss, wrt=list(clf.body.params.values()) + list(clf.head.params.values()))
        clf.body.step(grads, lr, 5.0)
        clf.head.step(grads, lr, 5.0)
    return clf


def mc_infer(clf: CompletedModel, x: np.ndarray) -> np.ndarray:
    return clf.forward(Tensor(np.asarray(x, dtype=np.float64))).data.argmax(axis=1)


class McHook(AttackHook):
    """Passive completion snapshots the trained bottom model; the active variant also boosts its lr."""

    def __init__(self, attacker: int = 1, active: bool = False, gamma: float = 10.0):
        self.attacker_id = attacker
        self.active = active
        self.gamma = gamma
        self.trace = AttackTrace()

    def lr_scale(self, party_id):
        return self.gamma if (self.active and party_id == self.attacker_id) else 1.0

    def after_training(self, system: VflSystem):
        self.trace.snapshots["local"] = save_checkpoint(model_to_checkpoint(system.party(self.attacker_id).local_model))

    def snapshot(self) -> MlpModel:
        return model_from_checkpoint(load_checkpoint(self.trace.snapshots["local"]))


# ---------------------------------------------------------------- backdoors

def make_trigger(width: int, size: int = 3, value: float = 1.0) -> np.ndarray:
    delta = np.zeros(width)
    delta[width - size:] = value
    return delta


def poison_trigger(x_rows: np.ndarray, trigger: np.ndarray) -> np.ndarray:
    return np.asarray(x_rows, dtype=np.float64) + trigger


class BackdoorHook(AttackHook):
    """Gradient-replacement backdoor.

    Triggered samples carry an additive patch on the attacker's features; their
    received gradient rows are overwritten with ``gamma`` times the latest row
    received for a known clean sample of the target class.
    """

    def __init__(self, triggered: np.ndarray, known_target_index: int, trigger: np.ndarray,
                 gamma: float = 1.0, attacker: int = 1):
        self.attacker_id = attacker
        self.triggered = np.asarray(triggered, dtype=np.int64)
        self._is_trig = set(int(i) for i in self.triggered)
        self.known = int(known_target_index)
        self.trigger = trigger
        self.gamma = float(gamma)
        self.trace = AttackTrace(poisoned={"triggered": self.triggered})
        self.ref_row = None
        self.replaced = 0

    def poison(self, party_id, indices, x):
        if party_id != self.attacker_id or not self._is_trig:
            return x
        mask = np.fromiter((int(i) in self._is_trig for i in indices), bool, len(indices))
        if not mask.any():
            return x
        x = x.copy()
        x[mask] = poison_trigger(x[mask], self.trigger)
        return x

    def intercept(self, party_id, msg: GradientMessage):
        rows = msg.per_sample
        hit = np.flatnonzero(msg.indices == self.known)
        if hit.size:
            self.ref_row = rows[hit[0]].copy()
        if self.ref_row is None or not self._is_trig:
            return rows
        mask = np.fromiter((int(i) in self._is_trig for i in msg.indices), bool, len(msg.indices))
        if not mask.any():
            return rows
        rows = rows.copy()
        rows[mask] = self.gamma * self.ref_row
        self.replaced += int(mask.sum())
        return rows


def noisy_sample_poison(x_rows: np.ndarray, fraction: float, noise_param: float, rng: Rng
                        ) -> tuple[np.ndarray, np.ndarray]:
    """Add N(0, noise_param^2) noise to a random ``fraction`` of rows; returns ``(rows, selected)``."""
    x = np.array(x_rows, dtype=np.float64)
    n = x.shape[0]
    k = int(round(fraction * n))
    sel = np.sort(rng.choice(n, k)) if k else np.empty(0, np.int64)
    if k:
        x[sel] = x[sel] + rng.normal((k, x.shape[1]), noise_param)
    return x, sel


def missing_hook(outputs: np.ndarray, fraction: float, rng: Rng) -> tuple[np.ndarray, np.ndarray]:
    """Zero a random ``fraction`` of output rows; returns ``(outputs, selected)``."""
    h = np.array(outputs, dtype=np.float64)
    n = h.shape[0]
    k = int(round(fraction * n))
    sel = np.sort(rng.choice(n, k)) if k else np.empty(0, np.int64)
    h[sel] = 0.0
    return h, sel


class NoisyHook(AttackHook):
    """A fixed subset of the attacker's training rows carries fixed additive Gaussian noise."""

    def __init__(self, n_train: int, width: int, fraction: float, noise_std: float, rng: Rng, attacker: int = 1):
        self.attacker_id = attacker
        k = int(round(fraction * n_train))
        self.selected = np.sort(rng.choice(n_train, k)) if k else np.empty(0, np.int64)
        self.noise = {int(i): row for i, row in zip(self.selected, rng.normal((k, width), noise_std))}
        self.trace = AttackTrace(poisoned={"noisy": self.selected})

    def poison(self, party_id, indices, x):
        if party_id != self.attacker_id or not self.noise:
            return x
        out = None
        for j, i in enumerate(indices):
            row = self.noise.get(int(i))
            if row is not None:
                if out is None:
                    out = x.copy()
                out[j] = out[j] + row
        return x if out is None else out


class MissingHook(AttackHook):
    """Outputs of a fixed subset of samples never reach the active party (zeros arrive instead)."""

    def __init__(self, n_train: int, fraction: float, rng: Rng, attacker: int = 1):
        self.attacker_id = attacker
        k = int(round(fraction * n_train))
        self.selected = np.sort(rng.choice(n_train, k)) if k else np.empty(0, np.int64)
        self._mask = np.zeros(n_train, bool)
        self._mask[self.selected] = True
        self.trace = AttackTrace(poisoned={"missing": self.selected})

    def tamper_output(self, party_id, indices, h):
        if party_id != self.attacker_id:
            return h
        m = self._mask[indices]
        if m.any():
            h = h.copy()
            h[m] = 0.0
        return h


# ---------------------------------------------------------------- feature reconstruction

@dataclass
class CafeObservation:
    """One round seen by a white-box active attacker for a fixed batch."""

    param_grads: dict[str, np.ndarray]   # the victim's local-model gradients
    message: np.ndarray                   # what the victim sent (H, or Z under passive MID)
    upstream: np.ndarray                  # gradient rows returned for that message


class _Observer(AttackHook):
    def __init__(self, victim: int):
        self.attacker_id = victim
        self.view = None

    def observe(self, view):
        self.view = view


def cafe_observe(system: VflSystem, batch: np.ndarray, cfg, rng: Rng, victim: int = 1) -> CafeObservation:
    """Run one non-updating round on ``batch`` and capture what the attacker gets to see."""
    from .protocol import _round
    obs = _Observer(victim)
    res = _round(system, batch, cfg, rng, obs, None, step=-1, epoch=-1, apply=False)
    msg = res.gradients[victim - 1]
    return CafeObservation({k: v.copy() for k, v in obs.view.param_grads.items()},
                           res.outputs[victim - 1].outputs.copy(), msg.per_sample.copy())


def _attacker_view(model: MlpModel, vib: VibLayer | None, x: Tensor, g: Tensor):
    """Message and local-model parameter gradients the attacker predicts for candidate inputs."""
    h = model.forward(x)
    if vib is None:
        grads, _ = model.vjp_graph(x, g)
        return h, grads
    vo = vib_forward(vib, h, None, train_mode=False)
    d = vib.bottleneck_dim
    _, g_t = vib.decoder.vjp_graph(vo.mu, g)
    g_enc = dc.concat_columns([g_t, Tensor(np.zeros(g_t.shape))])
    _, g_h = vib.encoder.vjp_graph(h, g_enc)
    grads, _ = model.vjp_graph(x, g_h)
    return vo.z, grads


def cafe_objective(model: MlpModel, vib: VibLayer | None, x: Tensor, obs: CafeObservation) -> Tensor:
    """Output mismatch plus parameter-gradient mismatch, each relative to its observed squared norm.

    The relative scaling keeps the gradient terms from vanishing next to the
    output term once training has driven the upstream gradients small.
    """
    msg, grads = _attacker_view(model, vib, x, Tensor(obs.upstream))
    pairs = [(msg, obs.message)] + [(g, obs.param_grads[name]) for name, g in grads.items()]
    total = None
    for pred, seen in pairs:
        w = 1.0 / max(float(np.sum(seen * seen)), 1e-30)
        t = dc.scale(dc.sum_squares(pred - Tensor(seen)), w)
        total = t if total is None else total + t
    return total


def _cafe_value_and_grad(model, vib, obs, shape):
    def f(flat):
        xt = Tensor(flat.reshape(shape), requires_grad=True)
        loss = cafe_objective(model, vib, xt, obs)
        val = loss.item()
        if not np.isfinite(val):
            raise ReconstructionDiverged(f"reconstruction objective became {val}")
        return val, dc.backward(loss, wrt=[xt])[xt].reshape(-1)
    return f


def cafe_reconstruct(model: MlpModel, vib: VibLayer | None, obs: CafeObservation, iters: int = 2000,
                     opt_lr: float = 0.05, rng: Rng | None = None, init: np.ndarray | None = None,
                     optimizer: str = "lbfgs") -> np.ndarray:
    """Recover the victim's batch by matching its gradients and transmitted outputs.

    Starts from N(0, 0.1^2) unless ``init`` is given and runs at most
    ``iters`` steps of L-BFGS (``optimizer="lbfgs"``) or Adam with step
    ``opt_lr`` (``"adam"``). The result is clamped to [0, 1].
    """
    B = obs.message.shape[0]
    shape = (B, model.in_dim)
    x = np.array(init, dtype=np.float64) if init is not None else (rng or Rng(0)).normal(shape, 0.1)
    f = _cafe_value_and_grad(model, vib, obs, shape)
    if optimizer == "lbfgs":
        res = optimize.minimize(f, x.reshape(-1), jac=True, method="L-BFGS-B",
                                options={"maxiter": iters, "maxfun": 2 * iters, "ftol": 0.0, "gtol": 1e-14})
        if not np.all(np.isfinite(res.x)):
            raise ReconstructionDiverged("reconstruction produced non-finite inputs")
        x = res.x.reshape(shape)
    elif optimizer == "adam":
        m = np.zeros(x.size)
        v = np.zeros(x.size)
        b1, b2, eps = 0.9, 0.999, 1e-12
        flat = x.reshape(-1)
        for t in range(1, iters + 1):
            val, g = f(flat)
            if val == 0.0:
                break
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            flat = flat - opt_lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
        x = flat.reshape(shape)
    else:
        raise ConfigError(f"unknown optimizer {optimizer!r}; expected 'lbfgs' or 'adam'")
    return np.clip(x, 0.0, 1.0)
