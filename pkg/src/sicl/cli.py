"""Command-line entry point: ``sicl <subcommand> [--config F] [--set key=value ...] [--out DIR]``.

Config files are JSON objects with the same keys as :class:`RunConfig`
(``world`` and ``augmentation`` are nested objects).  ``--set`` takes dotted
keys (``--set world.num_subjects=6``) and JSON-parsed values; it wins over the
file, and ``--seed`` wins over both.  Every subcommand writes the resolved
configuration to ``<out>/config.json``, which can be fed back via ``--config``
to reproduce the run.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import harness, model, synthgen, verify
from .errors import SiclError
from .harness import RunConfig
from .synthgen import Modality

log = logging.getLogger("sicl")


def _set_dotted(d: dict, key: str, value) -> None:
    parts = key.split(".")
    for p in parts[:-1]:
        if not isinstance(d.get(p), dict):
            raise SiclError(f"--set {key}: {p!r} is not a nested section")
        d = d[p]
    if parts[-1] not in d:
        raise SiclError(f"--set {key}: unknown key {parts[-1]!r}")
    d[parts[-1]] = value


def _merge(base: dict, upd: dict) -> dict:
    for k, v in upd.items():
        if isinstance(v, dict) and isinstance(base.get(k), dict):
            _merge(base[k], v)
        else:
            base[k] = v
    return base


def _parse_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def resolve_config(config_path=None, overrides=(), seed=None) -> RunConfig:
    d = RunConfig().to_dict()
    if config_path:
        path = Path(config_path)
        if not path.exists():
            raise SiclError(f"config file not found: {path}")
        try:
            _merge(d, json.loads(path.read_text()))
        except json.JSONDecodeError as exc:
            raise SiclError(f"{path}: invalid JSON ({exc})") from exc
    for item in overrides:
        if "=" not in item:
            raise SiclError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        _set_dotted(d, key.strip(), _parse_value(raw))
    if seed is not None:
        d["seed"] = seed
    try:
        cfg = RunConfig.from_dict(d)
    except TypeError as exc:
        raise SiclError(f"invalid configuration: {exc}") from exc
    cfg.validate()
    return cfg


def _write_json(path: Path, obj) -> Path:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return path


def _load_windows(args, cfg):
    if args.data:
        return synthgen.load_dataset(args.data)
    return synthgen.generate(cfg.world)


def _load_encoders(path):
    return model.tensors_to_encoders(model.load_checkpoint(path))


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gen(args, cfg, out: Path) -> int:
    windows = synthgen.generate(cfg.world)
    path = synthgen.save_dataset(out / "dataset.sicl", windows, cfg.world,
                                 {"train": cfg.train_subjects, "test": cfg.test_subjects})
    print(f"wrote {len(windows)} windows to {path}")
    return 0


def cmd_pretrain(args, cfg, out: Path) -> int:
    res = harness.pretrain(cfg, _load_windows(args, cfg))
    ckpt = model.save_checkpoint(out / "checkpoint.ckpt", model.encoders_to_tensors(res.encoders))
    harness.write_curve_csv(out / "loss_curve.csv", res.loss_curve)
    print(f"final loss {res.loss_curve[-1]:.4f}; checkpoint {ckpt}")
    return 0


def cmd_linear_eval(args, cfg, out: Path) -> int:
    if not args.checkpoint:
        raise SiclError("linear-eval needs --checkpoint")
    encoders = _load_encoders(args.checkpoint)
    report = harness.linear_eval(encoders, cfg, _load_windows(args, cfg))
    _write_json(out / "report.json", report.to_dict())
    print(f"mean class accuracy {report.mean_class_accuracy:.4f}")
    return 0


def cmd_finetune(args, cfg, out: Path) -> int:
    encoders = _load_encoders(args.checkpoint) if args.checkpoint else None
    report = harness.finetune(encoders, cfg, _load_windows(args, cfg))
    _write_json(out / "report.json", report.to_dict())
    print(f"mean class accuracy {report.mean_class_accuracy:.4f} ({report.tag})")
    return 0


def cmd_analyze(args, cfg, out: Path) -> int:
    if not args.checkpoint:
        raise SiclError("analyze needs --checkpoint")
    encoders = _load_encoders(args.checkpoint)
    modality = Modality.INERTIAL.value
    windows = synthgen.by_modality(_load_windows(args, cfg), Modality.INERTIAL)
    train, test = synthgen.split(windows, cfg.train_subjects, cfg.test_subjects)
    chosen = {"train": train, "test": test, "all": train + test}[args.split]
    stats = harness.analyze_similarities(encoders[modality], chosen, cfg.seed, cfg.max_pairs)
    _write_json(out / "sim_stats.json", stats.__dict__)
    harness.write_histogram_csv(out / "histogram.csv", stats)
    print(f"mean_all {stats.mean_all:.4f} mean_intra_subject {stats.mean_intra_subject:.4f} gap {stats.gap:.4f}")
    return 0


def cmd_matrix(args, cfg, out: Path) -> int:
    names = tuple(s.strip() for s in args.losses.split(",") if s.strip())
    seeds = tuple(int(s) for s in args.seeds.split(","))
    for name in names:
        RunConfig.from_dict({**cfg.to_dict(), "loss": name}).validate()
    cells = harness.run_matrix(harness.matrix_configs(cfg, names, seeds), jobs=args.jobs)
    path = harness.write_matrix_csv(out / "matrix.csv", cells)
    _write_json(out / "reports.json", [
        {"loss": c.loss, "seed": c.seed, "error": c.error,
         "report": c.report.to_dict() if c.report else None} for c in cells])
    failed = [c for c in cells if c.error]
    print(f"wrote {len(cells)} rows to {path}" + (f"; {len(failed)} cells failed" if failed else ""))
    return 1 if failed else 0


def cmd_verify(args, cfg, out: Path) -> int:
    results = verify.run_all(quick=args.quick)
    for r in results:
        print(r.line())
    _write_json(out / "verify.json", [r.__dict__ for r in results])
    ok = all(r.passed for r in results)
    print("all checks passed" if ok else "SOME CHECKS FAILED")
    return 0 if ok else 1


COMMANDS = {
    "gen": cmd_gen,
    "pretrain": cmd_pretrain,
    "linear-eval": cmd_linear_eval,
    "finetune": cmd_finetune,
    "analyze": cmd_analyze,
    "matrix": cmd_matrix,
    "verify": cmd_verify,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--out", default="out", help="output directory (created if absent)")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key; dotted keys reach nested sections")
    common.add_argument("--seed", type=int, help="run seed (overrides config)")
    common.add_argument("--jobs", type=int, default=1, help="parallel cells for matrix")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="sicl", description="Subject-invariant contrastive learning toolkit")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen", parents=[common], help="generate the synthetic dataset")
    helps = {"pretrain": "contrastive pretraining on train subjects",
             "linear-eval": "frozen-encoder linear probe on held-out subjects",
             "finetune": "end-to-end supervised training and held-out evaluation",
             "analyze": "cosine-similarity statistics and histogram"}
    for name, text in helps.items():
        sp = sub.add_parser(name, parents=[common], help=text)
        sp.add_argument("--data", help="dataset container (default: generate from the config world)")
        if name != "pretrain":
            sp.add_argument("--checkpoint", help="encoder checkpoint" +
                            (" (omit to start from random weights)" if name == "finetune" else ""))
        if name == "analyze":
            sp.add_argument("--split", choices=("train", "test", "all"), default="test")
    mp = sub.add_parser("matrix", parents=[common], help="losses x seeds comparison table")
    mp.add_argument("--losses", default="nce,sicl")
    mp.add_argument("--seeds", default="0,1,2")
    vp = sub.add_parser("verify", parents=[common], help="oracle, gradient and reduction checks")
    vp.add_argument("--quick", action="store_true", help="fewer batches and seeds")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args.config, args.overrides, args.seed)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _write_json(out / "config.json", cfg.to_dict())
        return COMMANDS[args.command](args, cfg, out)
    except (SiclError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
