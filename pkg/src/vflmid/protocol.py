"""In-process VFL training: parties, explicit messages, and the training rounds.

Parties exchange :class:`LocalOutputMsg` and :class:`GradientMessage`
objects. Defenses transform outgoing gradient rows at the active party;
attacks plug in through an :class:`AttackHook`.
"""
from __future__ import annotations

import math
import sys
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import diffcore as dc
from .data import SplitDataset
from .defenses import DefenseConfig, GradientDefense, mid_total_loss
from .diffcore import Rng, Tensor
from .errors import ConfigError, TrainingDiverged
from .models import GlobalHead, MlpModel, VibLayer, global_predict, vib_forward


class Role(Enum):
    ACTIVE = "active"
    PASSIVE = "passive"


SAMPLE_LEVEL = "sample"
BATCH_LEVEL = "batch"


class LabelStore:
    """Holds the labels and logs every read with the reader's role and call site."""

    def __init__(self, labels: np.ndarray):
        self._labels = np.asarray(labels, dtype=np.int64)
        self.access_log: list[tuple[str, int, str]] = []

    def __len__(self):
        return len(self._labels)

    def read(self, indices, reader: "PartyState") -> np.ndarray:
        f = sys._getframe(1)
        self.access_log.append((reader.role.value, reader.id, f"{f.f_code.co_name}"))
        if reader.role is not Role.ACTIVE:
            raise PermissionError(f"party {reader.id} ({reader.role.value}) may not read labels")
        return self._labels[indices]


@dataclass
class PartyState:
    id: int
    role: Role
    local_model: MlpModel
    feature_slice: tuple[int, int]
    features: np.ndarray
    lr: float = 0.1
    lr_vib: float = 0.1
    vibs: dict[int, VibLayer] = field(default_factory=dict)  # keyed by the protected party id
    labels: LabelStore | None = None

    def __post_init__(self):
        if (self.labels is not None) != (self.role is Role.ACTIVE):
            raise ConfigError("labels must be held by the active party and only by it")


@dataclass
class LocalOutputMsg:
    party_id: int
    indices: np.ndarray
    outputs: np.ndarray

    def __post_init__(self):
        if self.outputs.shape[0] != len(self.indices):
            raise ConfigError(f"message has {self.outputs.shape[0]} rows for {len(self.indices)} samples")


@dataclass
class GradientMessage:
    party_id: int
    indices: np.ndarray
    per_sample: np.ndarray
    visibility: str = SAMPLE_LEVEL


@dataclass
class GradientView:
    """What an observing party may record about one round.

    ``per_sample`` is None under batch-level visibility.
    """

    party_id: int
    round: int
    indices: np.ndarray
    per_sample: np.ndarray | None
    param_grads: dict[str, np.ndarray]
    received: np.ndarray


class AttackHook:
    """No-op hook; attacks override the positions they need."""

    attacker_id: int = 1

    def poison(self, party_id: int, indices: np.ndarray, x: np.ndarray) -> np.ndarray:
        return x

    def tamper_output(self, party_id: int, indices: np.ndarray, h: np.ndarray) -> np.ndarray:
        return h

    def intercept(self, party_id: int, msg: GradientMessage) -> np.ndarray:
        return msg.per_sample

    def observe(self, view: GradientView):
        pass

    def lr_scale(self, party_id: int) -> float:
        return 1.0

    def end_epoch(self, epoch: int, system: "VflSystem"):
        pass

    def after_training(self, system: "VflSystem"):
        pass


@dataclass
class ModelConfig:
    hidden: list[int] = field(default_factory=lambda: [32])
    out_width: int = 0           # 0: number of classes
    head: str = "sum"            # "sum" | "linear"
    head_layers: int = 1
    head_hidden: int = 0


@dataclass
class TrainConfig:
    epochs: int = 60
    batch_size: int = 64
    lr_local: float = 0.1
    lr_head: float = 0.1
    lr_vib: float = 0.1
    max_grad_norm: float = 5.0   # per-module update clipping; 0 disables
    visibility: str = SAMPLE_LEVEL
    defense: DefenseConfig = field(default_factory=DefenseConfig)
    model: ModelConfig = field(default_factory=ModelConfig)

    @property
    def mid_placement(self) -> str | None:
        return self.defense.placement if self.defense.kind == "mid" else None

    def validate(self, n: int | None = None):
        if self.batch_size <= 0 or (n is not None and self.batch_size > n):
            raise ConfigError(f"batch size {self.batch_size} invalid for {n} samples")
        if min(self.lr_local, self.lr_head, self.lr_vib) <= 0:
            raise ConfigError("learning rates must be positive")
        if self.visibility not in (SAMPLE_LEVEL, BATCH_LEVEL):
            raise ConfigError(f"unknown visibility {self.visibility!r}")
        self.defense.validate()
        return self


@dataclass
class VflSystem:
    parties: list[PartyState]
    head: GlobalHead
    num_classes: int

    @property
    def active(self) -> PartyState:
        return self.parties[-1]

    @property
    def passive(self) -> list[PartyState]:
        return self.parties[:-1]

    def party(self, pid: int) -> PartyState:
        return self.parties[pid - 1]


@dataclass
class RoundResult:
    loss: float
    ce: float
    kl: dict[int, float]
    outputs: list[LocalOutputMsg]
    gradients: list[GradientMessage]
    applied: dict[int, np.ndarray] = field(default_factory=dict)


def sample_batch(n: int, batch_size: int, rng: Rng) -> np.ndarray:
    if batch_size > n:
        raise ConfigError(f"batch size {batch_size} exceeds dataset size {n}")
    return np.sort(rng.choice(n, batch_size))


def build_system(dataset: SplitDataset, cfg: TrainConfig, rng: Rng) -> VflSystem:
    """Initialise every party's model (and the VIB layers, if MID is on) from named streams."""
    C = dataset.num_classes
    K = dataset.n_parties
    mc = cfg.model
    out_w = mc.out_width or C
    if mc.head == "sum" and out_w != C:
        raise ConfigError(f"sum head needs local outputs of width {C}, got {out_w}")
    parties = []
    for k in range(1, K + 1):
        x = dataset.x_train[k - 1]
        model = MlpModel.init([x.shape[1], *mc.hidden, out_w], rng.child(f"init/party/{k}"))
        role = Role.ACTIVE if k == K else Role.PASSIVE
        labels = LabelStore(dataset.y_train) if role is Role.ACTIVE else None
        parties.append(PartyState(k, role, model, dataset.slices[k - 1], x, cfg.lr_local, cfg.lr_vib,
                                  labels=labels))
    d = cfg.defense
    if d.kind == "mid":
        for k in d.protected:
            if not 1 <= k < K:
                raise ConfigError(f"MID can only protect passive parties 1..{K - 1}, got {k}")
            vib = VibLayer.init(out_w, out_w, d.lam, rng.child(f"init/vib/{k}"), d.bottleneck_dim or None)
            owner = parties[-1] if d.placement == "active" else parties[k - 1]
            owner.vibs[k] = vib
    if mc.head == "sum":
        head = GlobalHead("sum")
    else:
        head = GlobalHead.trainable(out_w * K, C, mc.head_layers, rng.child("init/head"), mc.head_hidden or None)
    return VflSystem(parties, head, C)


def _finite_or_raise(loss: float, epoch: int, batch: int):
    if not math.isfinite(loss):
        raise TrainingDiverged(epoch, batch, loss)


def _active_params(system: VflSystem) -> list[Tensor]:
    act = system.active
    ps = list(act.local_model.params.values()) + list(system.head.params.values())
    for vib in act.vibs.values():
        ps += list(vib.params.values())
    return ps


def _apply_active_updates(system: VflSystem, grads, lr_head: float, max_norm: float):
    act = system.active
    act.local_model.step(grads, act.lr, max_norm)
    system.head.step(grads, lr_head, max_norm)
    for vib in act.vibs.values():
        vib.step(grads, act.lr_vib, max_norm)


def _passive_update(p: PartyState, out: Tensor, rows: np.ndarray, extra: Tensor | None,
                    lr: float, max_norm: float) -> dict[Tensor, np.ndarray]:
    params = list(p.local_model.params.values())
    for vib in p.vibs.values():
        params += list(vib.params.values())
    if extra is None:
        grads = dc.backward(out, wrt=params, grad_output=rows)
    else:
        surrogate = dc.sum(dc.mul_const(out, rows)) + extra
        grads = dc.backward(surrogate, wrt=params)
    p.local_model.step(grads, lr, max_norm)
    for vib in p.vibs.values():
        vib.step(grads, p.lr_vib, max_norm)
    return grads


def _round(system: VflSystem, batch: np.ndarray, cfg: TrainConfig, rng: Rng, hook: AttackHook | None,
           defense: GradientDefense | None, step: int, epoch: int, apply: bool = True) -> RoundResult:
    hook = hook or AttackHook()
    act = system.active
    passive_mid = cfg.mid_placement == "passive"

    # passive parties: forward and send
    sent: dict[int, Tensor] = {}
    kl_local: dict[int, Tensor] = {}
    outputs: list[LocalOutputMsg] = []
    for p in system.passive:
        x = hook.poison(p.id, batch, p.features[batch])
        h = p.local_model.forward(Tensor(x))
        out = h
        if passive_mid and p.id in p.vibs:
            vo = vib_forward(p.vibs[p.id], h, rng.child(f"vib/{p.id}"), train_mode=True)
            out = vo.z
            kl_local[p.id] = vo.kl
        sent[p.id] = out
        payload = hook.tamper_output(p.id, batch, out.data.copy())
        outputs.append(LocalOutputMsg(p.id, batch, payload))

    # active party: assemble loss, update, reply
    recv = {m.party_id: Tensor(m.outputs, requires_grad=True) for m in outputs}
    parts, kls = [], []
    kl_vals: dict[int, float] = {}
    for m in outputs:
        k = m.party_id
        if k in act.vibs:
            vo = vib_forward(act.vibs[k], recv[k], rng.child(f"vib/{k}"), train_mode=True)
            parts.append(vo.z)
            kls.append((act.vibs[k].lam, vo.kl))
            kl_vals[k] = vo.kl.item()
        else:
            parts.append(recv[k])
    x_act = hook.poison(act.id, batch, act.features[batch])
    parts.append(act.local_model.forward(Tensor(x_act)))
    logits = global_predict(system.head, parts)
    y = act.labels.read(batch, act)
    ce, _ = dc.softmax_cross_entropy(logits, y)
    loss = mid_total_loss(ce, kls)
    _finite_or_raise(loss.item(), epoch, step)
    a_params = _active_params(system)
    grads = dc.backward(loss, wrt=a_params + list(recv.values()))
    if apply:
        _apply_active_updates(system, grads, cfg.lr_head, cfg.max_grad_norm)

    replies = []
    for m in outputs:
        rows = grads[recv[m.party_id]]
        if defense is not None and defense.active:
            rows = defense(rows, rng.child(f"defense/{m.party_id}"))
        replies.append(GradientMessage(m.party_id, batch, rows, cfg.visibility))

    # passive parties: chain rule + SGD
    applied = {}
    for p, msg in zip(system.passive, replies):
        rows = msg.per_sample
        if p.id == hook.attacker_id and msg.visibility == SAMPLE_LEVEL:
            rows = hook.intercept(p.id, msg)
        applied[p.id] = rows
        extra = None
        if p.id in kl_local:
            kl = kl_local[p.id]
            extra = dc.scale(kl, p.vibs[p.id].lam)
            kl_vals[p.id] = kl.item()
        lr = p.lr * hook.lr_scale(p.id)
        names = {id(t): n for n, t in p.local_model.params.items()}
        if apply:
            pg = _passive_update(p, sent[p.id], rows, extra, lr, cfg.max_grad_norm)
        else:
            params = list(p.local_model.params.values())
            if extra is None:
                pg = dc.backward(sent[p.id], wrt=params, grad_output=rows)
            else:
                pg = dc.backward(dc.sum(dc.mul_const(sent[p.id], rows)) + extra, wrt=params)
        if p.id == hook.attacker_id:
            param_grads = {names[id(t)]: g for t, g in pg.items() if id(t) in names}
            hook.observe(GradientView(
                p.id, step, batch,
                rows.copy() if msg.visibility == SAMPLE_LEVEL else None,
                param_grads, outputs[p.id - 1].outputs))

    return RoundResult(loss.item(), ce.item(), kl_vals, outputs, replies, applied)


def train_round_active_mid(system, batch, cfg, rng, hook=None, defense=None, step=0, epoch=0, apply=True):
    """One iteration of the active-side protocol; plain VFL when no VIB is configured."""
    if cfg.mid_placement == "passive":
        raise ConfigError("active-side round called with MID placed at the passive party")
    return _round(system, batch, cfg, rng, hook, defense, step, epoch, apply)


def train_round_passive_mid(system, batch, cfg, rng, hook=None, defense=None, step=0, epoch=0, apply=True):
    """One iteration with each protected passive party running its own VIB."""
    if cfg.mid_placement != "passive":
        raise ConfigError("passive-side round requires MID placed at the passive party")
    return _round(system, batch, cfg, rng, hook, defense, step, epoch, apply)


train_round_plain = train_round_active_mid


# ---------------------------------------------------------------- evaluation

def forward_eval(system: VflSystem, features: list[np.ndarray], zero_outputs: dict[int, np.ndarray] | None = None
                 ) -> np.ndarray:
    """Logits on held-out features with every VIB in deterministic (mean) mode.

    ``zero_outputs`` maps a passive party id to a boolean row mask whose
    transmitted outputs are replaced by zeros before reaching the active party.
    """
    parts = []
    for p in system.passive:
        h = p.local_model.forward(Tensor(features[p.id - 1]))
        if p.id in p.vibs:
            h = vib_forward(p.vibs[p.id], h, None, train_mode=False).z
        data = h.data.copy()
        if zero_outputs and p.id in zero_outputs:
            data[zero_outputs[p.id]] = 0.0
        recv = Tensor(data)
        if p.id in system.active.vibs:
            recv = vib_forward(system.active.vibs[p.id], recv, None, train_mode=False).z
        parts.append(recv)
    parts.append(system.active.local_model.forward(Tensor(features[-1])))
    return global_predict(system.head, parts).data


def accuracy(system: VflSystem, features, labels, **kw) -> float:
    pred = forward_eval(system, features, **kw).argmax(axis=1)
    return float(np.mean(pred == np.asarray(labels)))


@dataclass
class EpochMetrics:
    epoch: int
    loss: float
    test_acc: float
    kl: float


@dataclass
class TrainedSystem:
    system: VflSystem
    log: list[EpochMetrics]

    @property
    def final_test_acc(self) -> float | None:
        return self.log[-1].test_acc if self.log else None


def run_training(dataset: SplitDataset, cfg: TrainConfig, hook: AttackHook | None, rng: Rng,
                 system: VflSystem | None = None) -> TrainedSystem:
    """Train for ``cfg.epochs`` epochs of ``ceil(n / batch_size)`` independently sampled batches."""
    cfg.validate(dataset.n_train)
    hook = hook or AttackHook()
    system = system or build_system(dataset, cfg, rng)
    defense = GradientDefense(cfg.defense)
    round_fn = train_round_passive_mid if cfg.mid_placement == "passive" else train_round_active_mid
    n = dataset.n_train
    per_epoch = math.ceil(n / cfg.batch_size)
    batch_rng = rng.child("batches")
    log = []
    step = 0
    for epoch in range(cfg.epochs):
        losses, kls = [], []
        for b in range(per_epoch):
            batch = sample_batch(n, cfg.batch_size, batch_rng)
            res = round_fn(system, batch, cfg, rng.child(f"round/{step}"), hook, defense, step, epoch)
            _finite_or_raise(res.loss, epoch, b)
            losses.append(res.loss)
            kls.append(sum(res.kl.values()))
            step += 1
        defense.end_epoch()
        hook.end_epoch(epoch, system)
        log.append(EpochMetrics(epoch, float(np.mean(losses)),
                                accuracy(system, dataset.x_test, dataset.y_test), float(np.mean(kls))))
    hook.after_training(system)
    return TrainedSystem(system, log)
