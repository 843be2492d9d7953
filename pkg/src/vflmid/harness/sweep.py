"""Single runs and (sweep value x seed) grids, with deterministic CSV output."""
from __future__ import annotations

import csv
import io
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .. import analysis
from ..attacks import (BackdoorHook, BliHook, DliHook, DsHook, McHook, MissingHook, NoisyHook, bli_fit, bli_infer,
                       cafe_observe, cafe_reconstruct, make_trigger, mc_attack, mc_infer, simulate_aux_traces)
from ..data import SplitDataset, gen_images, gen_synthetic, load_mnist_idx
from ..diffcore import Rng
from ..errors import ConfigError, ReconstructionDiverged, TrainingDiverged
from ..protocol import BATCH_LEVEL, AttackHook, accuracy, forward_eval, run_training, sample_batch
from .config import ExperimentConfig, with_override

log = logging.getLogger(__name__)

CSV_HEADER = ["run_id", "seed", "sweep_param", "sweep_value", "defense", "attack", "main_acc",
              "attack_metric", "psnr", "epochs", "wall_ms"]


@dataclass
class ResultRow:
    run_id: str
    seed: int
    sweep_param: str
    sweep_value: object
    defense: str
    attack: str
    main_acc: float | None
    attack_metric: float | None
    psnr: float | None
    epochs: int
    wall_ms: int
    error: str = ""


def build_dataset(cfg: ExperimentConfig, rng: Rng) -> SplitDataset:
    d = cfg.dataset.validate()
    if d.kind == "synthetic":
        return gen_synthetic(d.n, d.classes, d.dim, d.spread, rng, parties=d.parties)
    if d.kind == "images":
        return gen_images(d.n, d.classes, d.side, d.spread, rng)
    return load_mnist_idx(d.images_path, d.labels_path, d.subset or None, d.parties, rng)


def _aux_indices(y: np.ndarray, per_class: int, rng: Rng) -> np.ndarray:
    out = []
    for c in np.unique(y):
        idx = np.flatnonzero(y == c)
        out.append(idx[rng.choice(len(idx), min(per_class, len(idx)))])
    return np.sort(np.concatenate(out))


def _defense_name(cfg: ExperimentConfig) -> str:
    d = cfg.train.defense
    return f"mid_{d.placement}" if d.kind == "mid" else d.kind


@dataclass
class Outcome:
    main_acc: float | None
    record: analysis.MetricsRecord
    images: tuple[np.ndarray, np.ndarray] | None = None   # (targets, reconstructions) for cafe


def run_experiment(cfg: ExperimentConfig, seed: int) -> Outcome:
    """Train one system under the configured defense and attack; score the attack."""
    cfg.validate()
    a = cfg.attack
    rng = Rng(seed)
    ds = build_dataset(cfg, rng.child("data"))
    atk_rng = rng.child("attack")
    train_cfg = cfg.train
    kind = a.kind
    hook: AttackHook | None = None
    art: dict = {}

    if kind in ("dli", "ds") and train_cfg.visibility == BATCH_LEVEL:
        raise ConfigError(f"{kind} needs sample-level visibility")
    if kind == "dli":
        hook = DliHook(a.attacker)
    elif kind == "ds":
        if ds.num_classes != 2:
            raise ConfigError("direction scoring needs a binary task")
        pos = np.flatnonzero(ds.y_train == 1)
        hook = DsHook(int(pos[atk_rng.integers(0, len(pos))]), a.attacker)
    elif kind == "bli":
        if train_cfg.visibility != BATCH_LEVEL:
            raise ConfigError("batch-level inversion is evaluated under batch-level visibility")
        hook = BliHook(a.attacker)
    elif kind in ("pmc", "amc"):
        hook = McHook(a.attacker, active=kind == "amc", gamma=a.amc_gamma)
    elif kind == "backdoor":
        target = a.target if a.target >= 0 else int(atk_rng.integers(0, ds.num_classes))
        if not 0 <= target < ds.num_classes:
            raise ConfigError(f"backdoor target {target} is not a class")
        k = int(round(a.trigger_fraction * ds.n_train))
        trig = np.sort(atk_rng.child("triggered").choice(ds.n_train, k)) if k else np.empty(0, np.int64)
        cand = np.setdiff1d(np.flatnonzero(ds.y_train == target), trig)
        known = int(cand[atk_rng.child("known").integers(0, len(cand))])
        trigger = make_trigger(ds.widths()[a.attacker - 1], a.trigger_size, a.trigger_value)
        hook = BackdoorHook(trig, known, trigger, a.gamma, a.attacker)
        art["target"] = target
    elif kind == "noisy":
        hook = NoisyHook(ds.n_train, ds.widths()[a.attacker - 1], a.noisy_fraction, a.noise_std,
                         atk_rng.child("noisy"), a.attacker)
    elif kind == "missing":
        hook = MissingHook(ds.n_train, a.missing_fraction, atk_rng.child("missing"), a.attacker)

    trained = run_training(ds, train_cfg, hook, rng.child("train"))
    system = trained.system
    main_acc = trained.final_test_acc
    p = a.attacker - 1

    if kind == "dli":
        idx, pred, _ = hook.predictions()
        art.update(pred=pred, truth=ds.y_train[idx])
    elif kind == "ds":
        idx, pred = hook.predictions()
        art.update(pred=pred, truth=ds.y_train[idx])
    elif kind == "bli":
        snap = hook.trace.snapshots["local"]
        from ..models import load_checkpoint, model_from_checkpoint
        model = model_from_checkpoint(load_checkpoint(snap))
        aux = _aux_indices(ds.y_train, a.aux_per_class, atk_rng.child("aux"))
        traces = simulate_aux_traces(model, ds.x_train[p][aux], ds.y_train[aux], ds.num_classes,
                                     a.aux_rounds, train_cfg.batch_size, atk_rng.child("sim"))
        inv = bli_fit(traces, ds.num_classes, a.bli_hidden, a.bli_epochs, a.bli_lr, atk_rng.child("fit"))
        last = hook.records[-1][0]
        counts, truths = [], []
        for ep, idx, g in hook.records:
            if ep == last:
                counts.append(bli_infer(inv, g, len(idx))[0])
                truths.append(ds.y_train[idx])
        art.update(counts=counts, truths=truths, num_classes=ds.num_classes)
    elif kind in ("pmc", "amc"):
        aux = _aux_indices(ds.y_train, a.aux_per_class, atk_rng.child("aux"))
        clf = mc_attack(hook.snapshot(), ds.x_train[p][aux], ds.y_train[aux], ds.num_classes,
                        a.finetune_epochs, a.finetune_lr, atk_rng.child("finetune"))
        art.update(pred=mc_infer(clf, ds.x_test[p]), truth=ds.y_test)
    elif kind == "backdoor":
        feats = list(ds.x_test)
        feats[p] = feats[p] + hook.trigger
        art.update(pred=forward_eval(system, feats).argmax(axis=1), truth=ds.y_test)
    elif kind == "noisy":
        feats = list(ds.x_test)
        feats[p] = feats[p] + atk_rng.child("test_noise").normal(feats[p].shape, a.noise_std)
        art.update(clean_acc=main_acc, attacked_acc=accuracy(system, feats, ds.y_test))
    elif kind == "missing":
        mask = np.ones(len(ds.y_test), bool)
        art.update(clean_acc=main_acc,
                   attacked_acc=accuracy(system, ds.x_test, ds.y_test, zero_outputs={a.attacker: mask}))
    elif kind == "cafe":
        batch = sample_batch(ds.n_train, a.cafe_batch, atk_rng.child("batch"))
        obs = cafe_observe(system, batch, train_cfg, atk_rng.child("probe"), victim=a.attacker)
        victim = system.party(a.attacker)
        recon = cafe_reconstruct(victim.local_model, victim.vibs.get(a.attacker), obs, a.iters, a.opt_lr,
                                 atk_rng.child("init"), optimizer=a.optimizer)
        target = ds.x_train[p][batch]
        rec = analysis.attack_metrics("cafe", main_acc, recon=recon, target=target)
        return Outcome(main_acc, rec, (target, recon))
    return Outcome(main_acc, analysis.attack_metrics(kind, main_acc, **art))


def run_single(cfg: ExperimentConfig, seed: int, sweep_value=None, out_dir: Path | None = None) -> ResultRow:
    run_cfg = cfg if sweep_value is None else with_override(cfg, cfg.sweep.param, sweep_value)
    run_id = f"{cfg.sweep.param or 'base'}={sweep_value!r}/seed={seed}" if cfg.sweep.param else f"seed={seed}"
    t0 = time.perf_counter()
    error = ""
    main = metric = ps = None
    try:
        out = run_experiment(run_cfg, seed)
        main, metric, ps = out.main_acc, out.record.attack_metric, out.record.psnr
        if out.images is not None and out_dir is not None and run_cfg.attack.dump_images:
            dump_reconstructions(out_dir / _safe(run_id), out.images, run_cfg.dataset.side)
    except (TrainingDiverged, ReconstructionDiverged) as e:
        error = f"{type(e).__name__}: {e}"
        log.warning("run %s diverged: %s", run_id, e)
    wall = int(round((time.perf_counter() - t0) * 1000))
    return ResultRow(run_id, seed, cfg.sweep.param, sweep_value, _defense_name(run_cfg), run_cfg.attack.kind,
                     main, metric, ps, run_cfg.train.epochs, wall, error)


def _safe(s: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "-_." else "_" for ch in s)


def _grid(cfg: ExperimentConfig):
    values = cfg.sweep.values if cfg.sweep.param else [None]
    return [(v, s) for v in values for s in cfg.seeds]


def _run_point(args):
    cfg, seed, value, out_dir = args
    return run_single(cfg, seed, value, out_dir)


def run_sweep(cfg: ExperimentConfig, threads: int = 1, out_dir=None) -> list[ResultRow]:
    """Every (sweep value, seed) pair, in that order, whatever the worker count."""
    cfg.validate()
    out_dir = Path(out_dir) if out_dir is not None else None
    jobs = [(cfg, s, v, out_dir) for v, s in _grid(cfg)]
    if threads <= 1 or len(jobs) <= 1:
        rows = [_run_point(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(_run_point, jobs))
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "results.csv").write_text(rows_to_csv(rows), encoding="utf-8")
    return rows


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return repr(v)
    if isinstance(v, (np.floating,)):
        return repr(float(v))
    return str(v)


def rows_to_csv(rows: list[ResultRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in rows:
        attack = r.attack if not r.error else f"{r.attack}!{r.error.split(':')[0]}"
        w.writerow([r.run_id, r.seed, r.sweep_param, _fmt(r.sweep_value), r.defense, attack, _fmt(r.main_acc),
                    _fmt(r.attack_metric), _fmt(r.psnr), r.epochs, r.wall_ms])
    return buf.getvalue()


def mask_wall_ms(csv_text: str) -> str:
    """The CSV with the ``wall_ms`` column blanked, for determinism comparisons."""
    col = CSV_HEADER.index("wall_ms")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    for i, row in enumerate(csv.reader(io.StringIO(csv_text))):
        if i > 0:
            row[col] = ""
        w.writerow(row)
    return buf.getvalue()


# ---------------------------------------------------------------- image dumps

def write_pgm(path, img: np.ndarray):
    """Binary P5 graymap from values in [0, 1]."""
    a = np.clip(np.round(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    h, w = a.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + a.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ValueError(f"not a P5 graymap: {parts[0]!r}")
    w, h, mx = int(parts[1]), int(parts[2]), int(parts[3])
    data = np.frombuffer(parts[4][: w * h], dtype=np.uint8).reshape(h, w)
    return data.astype(np.float64) / mx


def dump_reconstructions(dirpath: Path, images, side: int):
    targets, recons = images
    dirpath.mkdir(parents=True, exist_ok=True)
    lines = ["index,psnr"]
    for i, (t, r) in enumerate(zip(targets, recons)):
        write_pgm(dirpath / f"target_{i}.pgm", t.reshape(side, -1))
        write_pgm(dirpath / f"recon_{i}.pgm", r.reshape(side, -1))
        lines.append(f"{i},{_fmt(analysis.psnr_capped(analysis.psnr(r, t)))}")
    (dirpath / "psnr.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
