"""Command-line entry point: ``vflmid {run,sweep,attack-eval,bound,selftest}``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .. import analysis
from ..diffcore import Rng
from ..errors import ConfigError, VflError
from ..models import load_checkpoint, model_from_checkpoint, model_to_checkpoint, save_checkpoint
from .config import SCHEMA_DOC, ExperimentConfig, load_config

log = logging.getLogger("vflmid")


def _num(v: float) -> str:
    return np.format_float_positional(float(v), trim="-")


def _load(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg.seeds = [args.seed]
    if args.out:
        cfg.out = args.out
    return cfg.validate()


def _emit(rows, out_dir: Path | None):
    from .sweep import rows_to_csv
    text = rows_to_csv(rows)
    sys.stdout.write(text)
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "results.csv").write_text(text, encoding="utf-8")


def cmd_run(args) -> int:
    from .sweep import build_dataset, run_single
    cfg = _load(args)
    cfg.sweep.param, cfg.sweep.values = "", []
    out_dir = Path(cfg.out)
    rows = [run_single(cfg, s, None, out_dir) for s in cfg.seeds]
    if args.save_checkpoint:
        # retrain deterministically without the attack to export the passive models
        from ..protocol import run_training
        for s in cfg.seeds:
            rng = Rng(s)
            ds = build_dataset(cfg, rng.child("data"))
            trained = run_training(ds, cfg.train, None, rng.child("train"))
            for p in trained.system.passive:
                out_dir.mkdir(parents=True, exist_ok=True)
                save_checkpoint(model_to_checkpoint(p.local_model), out_dir / f"seed{s}_party{p.id}.ckpt")
    _emit(rows, out_dir)
    return 1 if any(r.error for r in rows) else 0


def cmd_sweep(args) -> int:
    from .sweep import run_sweep
    cfg = _load(args)
    rows = run_sweep(cfg, threads=args.threads, out_dir=None)
    _emit(rows, Path(cfg.out))
    return 0


def cmd_attack_eval(args) -> int:
    """Model completion against a saved passive checkpoint."""
    from .sweep import CSV_HEADER, _aux_indices, build_dataset
    from ..attacks import mc_attack, mc_infer
    cfg = _load(args)
    a = cfg.attack
    if a.kind not in ("pmc", "amc"):
        raise ConfigError(f"attack-eval supports model completion only; {a.kind!r} needs a live training run")
    model = model_from_checkpoint(load_checkpoint(args.checkpoint))
    seed = cfg.seeds[0]
    rng = Rng(seed)
    ds = build_dataset(cfg, rng.child("data"))
    atk = rng.child("attack")
    p = a.attacker - 1
    aux = _aux_indices(ds.y_train, a.aux_per_class, atk.child("aux"))
    clf = mc_attack(model, ds.x_train[p][aux], ds.y_train[aux], ds.num_classes, a.finetune_epochs,
                    a.finetune_lr, atk.child("finetune"))
    acc = analysis.label_accuracy(mc_infer(clf, ds.x_test[p]), ds.y_test)
    print(",".join(CSV_HEADER))
    print(f"eval/seed={seed},{seed},,,checkpoint,{a.kind},,{acc!r},,0,0")
    return 0


def cmd_bound(args) -> int:
    b = analysis.BoundInputs(args.i_ht, args.i_hptp, args.card_t, args.min_p, args.min_p_prime, args.m_count)
    terms = analysis.theorem1_terms(b)
    print(_num(terms.total))
    if args.terms:
        for name in ("t1", "t2", "t3", "t4", "b0"):
            print(f"{name} {_num(getattr(terms, name))}")
    return 0


def cmd_selftest(args) -> int:
    from .selftest import run_selftest
    return 0 if run_selftest(verbose=True) else 1


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="vflmid", description="Vertical federated learning defense simulator.")
    ap.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, threads=False):
        p.add_argument("--config", help="config file (dotted 'key = json' lines)")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int, help="override the seed list with a single seed")
        p.add_argument("--format", choices=["csv"], default="csv")
        if threads:
            p.add_argument("--threads", type=int, default=1, help="worker processes across sweep points")

    p = sub.add_parser("run", help="one experiment per seed", epilog="config keys and defaults:\n" + SCHEMA_DOC,
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    common(p)
    p.add_argument("--save-checkpoint", action="store_true", help="also export passive local models")
    p.set_defaults(fn=cmd_run)
    p = sub.add_parser("sweep", help="grid over sweep.values x seeds")
    common(p, threads=True)
    p.set_defaults(fn=cmd_sweep)
    p = sub.add_parser("attack-eval", help="model completion against a saved checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(fn=cmd_attack_eval)
    p = sub.add_parser("bound", help="evaluate the information bound from its inputs")
    p.add_argument("--i-ht", type=float, default=0.0)
    p.add_argument("--i-hptp", type=float, default=0.0)
    p.add_argument("--card-t", type=int, default=1)
    p.add_argument("--min-p", type=float, default=1.0)
    p.add_argument("--min-p-prime", type=float, default=1.0)
    p.add_argument("--m-count", type=float, default=1.0)
    p.add_argument("--terms", action="store_true", help="also print the five components")
    p.set_defaults(fn=cmd_bound)
    p = sub.add_parser("selftest", help="fast invariant checks")
    p.set_defaults(fn=cmd_selftest)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except (VflError, OSError) as e:
        print(f"vflmid: error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
