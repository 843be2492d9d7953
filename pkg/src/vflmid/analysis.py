"""Attack metrics and information-theoretic quantities (all MI in nats)."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import stats

from . import kernels
from .errors import DomainError

PSNR_CAP = 99.0


# ---------------------------------------------------------------- mutual information

def joint_counts(a, b, na: int | None = None, nb: int | None = None) -> np.ndarray:
    """Contingency table of two equal-length nonnegative integer sequences."""
    a = np.asarray(a, dtype=np.int64)
    b = np.asarray(b, dtype=np.int64)
    if a.shape != b.shape:
        raise DomainError(f"length mismatch: {a.shape} vs {b.shape}")
    if a.size == 0:
        raise DomainError("empty sequences")
    if a.min() < 0 or b.min() < 0:
        raise DomainError("values must be nonnegative integers")
    na = int(a.max()) + 1 if na is None else na
    nb = int(b.max()) + 1 if nb is None else nb
    return kernels.joint_counts(a, b, na, nb)


def _check_table(table) -> np.ndarray:
    t = np.asarray(table, dtype=np.float64)
    if t.ndim != 2:
        raise DomainError(f"joint table must be 2-D, got shape {t.shape}")
    if np.any(t < 0):
        raise DomainError("joint table has negative counts")
    if not t.sum() > 0:
        raise DomainError("joint table is empty")
    return t


def plugin_mi(table) -> float:
    """Plug-in mutual information of a joint count table."""
    t = _check_table(table)
    p = t / t.sum()
    pa = p.sum(axis=1, keepdims=True)
    pb = p.sum(axis=0, keepdims=True)
    nz = p > 0
    mi = float(np.sum(p[nz] * np.log(p[nz] / (pa @ pb)[nz])))
    return max(mi, 0.0)


def entropy(counts) -> float:
    c = np.asarray(counts, dtype=np.float64).reshape(-1)
    if np.any(c < 0) or not c.sum() > 0:
        raise DomainError("entropy needs nonnegative counts with a positive total")
    p = c[c > 0] / c.sum()
    return float(-np.sum(p * np.log(p)))


def vib_mi_upper_bound(mu, log_var) -> float:
    """Mean KL of N(mu, exp(log_var)) to N(0, I), i.e. the bound the MID term penalises."""
    mu = np.asarray(mu, dtype=np.float64)
    lv = np.asarray(log_var, dtype=np.float64)
    if mu.shape != lv.shape or mu.ndim != 2:
        raise DomainError(f"mu {mu.shape} and log_var {lv.shape} must be equal 2-D shapes")
    return float(0.5 * np.sum(mu * mu + np.exp(lv) - 1.0 - lv) / mu.shape[0])


def lemma1_gap(clean_preds, poisoned_preds, labels) -> float:
    """``|I(Y; clean) - I(Y; poisoned)|`` with predicted classes standing in for T."""
    clean_preds = np.asarray(clean_preds)
    poisoned_preds = np.asarray(poisoned_preds)
    labels = np.asarray(labels)
    if not (len(clean_preds) == len(poisoned_preds) == len(labels)):
        raise DomainError(f"length mismatch: {len(clean_preds)}, {len(poisoned_preds)}, {len(labels)}")
    n = int(max(labels.max(), clean_preds.max(), poisoned_preds.max())) + 1
    return abs(plugin_mi(joint_counts(labels, clean_preds, n, n))
               - plugin_mi(joint_counts(labels, poisoned_preds, n, n)))


# ---------------------------------------------------------------- bound evaluator

@dataclass
class BoundInputs:
    i_ht: float
    i_hptp: float
    card_t: int
    min_p: float
    min_p_prime: float
    m_count: float = 1.0

    def validate(self):
        if not (self.min_p > 0 and self.min_p_prime > 0):
            raise DomainError(f"min_p and min_p_prime must be > 0, got {self.min_p}, {self.min_p_prime}")
        if self.min_p > 1 or self.min_p_prime > 1:
            raise DomainError("min_p and min_p_prime must be <= 1")
        if self.i_ht < 0 or self.i_hptp < 0:
            raise DomainError("mutual informations must be >= 0")
        if self.card_t < 1 or self.m_count < 1:
            raise DomainError("card_t and m_count must be >= 1")
        return self


@dataclass
class BoundTerms:
    t1: float
    t2: float
    t3: float
    t4: float
    b0: float

    @property
    def total(self) -> float:
        return self.t1 + self.t2 + self.t3 + self.t4 + self.b0


def bound_constants(min_p: float) -> tuple[float, float]:
    """``(B_lin, B_quad)`` = ``(B * ln(1/B), B)`` with ``B = 4 sqrt(2 ln 2) / min_p``."""
    b = 4.0 * math.sqrt(2.0 * math.log(2.0)) / min_p
    return b * math.log(1.0 / b), b


def theorem1_terms(b: BoundInputs) -> BoundTerms:
    b.validate()
    b1, b2 = bound_constants(b.min_p)
    b3, b4 = bound_constants(b.min_p_prime)
    T = float(b.card_t)
    return BoundTerms(
        b1 * T ** 0.5 * b.i_ht ** 0.5,
        b2 * T ** 0.75 * b.i_ht ** 0.25,
        b3 * T ** 0.5 * b.i_hptp ** 0.5,
        b4 * T ** 0.75 * b.i_hptp ** 0.25,
        math.log(b.m_count),
    )


def theorem1_rhs(b: BoundInputs) -> float:
    return theorem1_terms(b).total


# ---------------------------------------------------------------- attack metrics

def psnr(a, b, max_val: float = 1.0) -> float:
    """PSNR in dB; ``inf`` when the images agree exactly."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DomainError(f"image shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(max_val * max_val / mse)


def psnr_capped(value: float | None) -> float | None:
    if value is None:
        return None
    return min(value, PSNR_CAP)


def label_accuracy(pred, truth) -> float | None:
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise DomainError(f"length mismatch: {pred.shape} vs {truth.shape}")
    return float(np.mean(pred == truth)) if pred.size else None


def multiset_accuracy(est_counts, true_labels, num_classes: int) -> float:
    """Fraction of batch slots whose class is matched by the estimated label multiset."""
    true = np.bincount(np.asarray(true_labels, dtype=np.int64), minlength=num_classes)
    est = np.asarray(est_counts)
    return float(np.minimum(est, true).sum() / max(true.sum(), 1))


def backdoor_accuracy(preds_triggered, labels, target: int) -> float | None:
    """Share of triggered non-target samples predicted as ``target``; None with no such samples."""
    labels = np.asarray(labels)
    keep = labels != target
    if not keep.any():
        return None
    return float(np.mean(np.asarray(preds_triggered)[keep] == target))


def spearman(x, y) -> float:
    return float(stats.spearmanr(x, y).statistic)


@dataclass
class MetricsRecord:
    main_acc: float | None
    attack_metric: float | None
    psnr: float | None = None


def attack_metrics(kind: str, main_acc: float | None, **art) -> MetricsRecord:
    """Success metric per attack family from the artifacts gathered by the harness."""
    if kind in ("dli", "ds", "pmc", "amc"):
        m = label_accuracy(art["pred"], art["truth"])
    elif kind == "bli":
        accs = [multiset_accuracy(c, t, art["num_classes"]) for c, t in zip(art["counts"], art["truths"])]
        m = float(np.mean(accs)) if accs else None
    elif kind == "backdoor":
        m = backdoor_accuracy(art["pred"], art["truth"], art["target"])
    elif kind in ("noisy", "missing"):
        m = art["clean_acc"] - art["attacked_acc"]
    elif kind == "cafe":
        p = psnr(art["recon"], art["target"])
        return MetricsRecord(main_acc, psnr_capped(p), psnr_capped(p))
    elif kind == "none":
        m = None
    else:
        raise DomainError(f"unknown attack kind {kind!r}")
    return MetricsRecord(main_acc, m)
