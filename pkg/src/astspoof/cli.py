"""``astspoof`` command line: augment, featurize, train, eval, score.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
Machine-readable results go to stdout; logs go to stderr.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import sys
from dataclasses import asdict, fields
from pathlib import Path

from . import model as M
from .audio_io import (AudioError, ManifestError, SampleRecord, assign_splits,
                       read_manifest, write_manifest, write_wav)
from .augment import PolicyError, augment, clip_rng, load_policy_file, policy_for_label
from .evaluation import EERUndefinedError, evaluate
from .features import FeatureError, RunningStats, save_features
from .pipeline import featurize, load_clip
from .train import NumericError, TrainConfig, fit

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

log = logging.getLogger("astspoof")

CONFIG_ENV = "ASTSPOOF_CONFIG"
EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


@contextlib.contextmanager
def output_lock(out_dir: Path):
    out_dir.mkdir(parents=True, exist_ok=True)
    lock = out_dir / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise DataError(f"output directory {out_dir} is locked by another run ({lock})") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield out_dir
    finally:
        lock.unlink(missing_ok=True)


def _require(path, what):
    if path is None:
        raise UsageError(f"--{what} is required")
    p = Path(path)
    if not p.exists():
        raise DataError(f"{what} not found: {p}")
    return p


def load_config(path) -> dict:
    if path is None:
        path = os.environ.get(CONFIG_ENV) or None
    if path is None:
        return {}
    p = _require(path, "config")
    try:
        return tomllib.loads(p.read_text(encoding="utf-8"))
    except tomllib.TOMLDecodeError as exc:
        raise UsageError(f"bad config file {p}: {exc}") from None


def _manifest(path):
    p = _require(path, "manifest")
    return read_manifest(p), p.parent


def _out(args, cfg) -> Path:
    value = args.out or cfg.get("out")
    if not value:
        raise UsageError("--out is required")
    return Path(value)


def _seed(args, cfg):
    return args.seed if args.seed is not None else int(cfg.get("seed", 0))


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_augment(args, cfg):
    records, root = _manifest(args.manifest or cfg.get("manifest"))
    policy_path = args.policy or cfg.get("policy")
    policies = load_policy_file(_require(policy_path, "policy") if policy_path else None)
    out = _out(args, cfg)
    seed = _seed(args, cfg)
    failures = []
    written = []
    with output_lock(out):
        for r in records:
            try:
                clip = load_clip(r, root)
                aug = augment(clip, policy_for_label(policies, r.label), clip_rng(seed, r.path))
            except (AudioError, OSError, FeatureError) as exc:
                failures.append(f"{r.path}: {exc}")
                continue
            rel = Path("audio") / Path(r.path).with_suffix(".wav").as_posix().lstrip("/")
            (out / rel).parent.mkdir(parents=True, exist_ok=True)
            write_wav(out / rel, aug)
            written.append(SampleRecord(rel.as_posix(), r.label, r.technology, r.split))
        write_manifest(out / "manifest.tsv", written)
    for f in failures:
        log.error(f)
    print(json.dumps({"written": len(written), "failed": len(failures),
                      "manifest": str(out / "manifest.tsv")}))
    return EXIT_DATA if failures else EXIT_OK


def cmd_featurize(args, cfg):
    records, root = _manifest(args.manifest or cfg.get("manifest"))
    out = _out(args, cfg)
    stats = RunningStats()
    with output_lock(out):
        for r in records:
            spec = featurize(load_clip(r, root))
            if r.split == "train":
                stats.update(spec)
            dest = out / "features" / (Path(r.path).as_posix().lstrip("/") + ".feat")
            dest.parent.mkdir(parents=True, exist_ok=True)
            save_features(dest, spec)
        summary = {"clips": len(records), "train_mean": stats.mean, "train_std": stats.std}
        (out / "stats.json").write_text(json.dumps(summary, sort_keys=True) + "\n")
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def _train_config(args, cfg) -> TrainConfig:
    values = dict(cfg.get("train", {}))
    overrides = {"max_steps": args.max_steps, "validate_every": args.validate_every,
                 "learning_rate": args.lr, "train_batch": args.batch,
                 "early_stop_patience": args.patience}
    values.update({k: v for k, v in overrides.items() if v is not None})
    if args.no_augment:
        values["augment"] = False
    values["seed"] = _seed(args, cfg)
    if "validate_every" in values and "max_steps" in values:
        values["validate_every"] = min(values["validate_every"], values["max_steps"])
    elif "max_steps" in values and values["max_steps"] < TrainConfig.validate_every:
        values["validate_every"] = values["max_steps"]
    try:
        return TrainConfig.from_mapping(values)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from None


def _model_config(args, cfg) -> M.ModelConfig:
    values = dict(cfg.get("model", {}))
    known = {f.name for f in fields(M.ModelConfig)}
    if set(values) - known:
        raise UsageError(f"unknown model config keys: {sorted(set(values) - known)}")
    try:
        return M.ModelConfig.full(**values) if args.full_model else M.ModelConfig(**values)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from None


def cmd_train(args, cfg):
    records, root = _manifest(args.manifest or cfg.get("manifest"))
    out = _out(args, cfg)
    tcfg = _train_config(args, cfg)
    mcfg = _model_config(args, cfg)
    policy_path = args.policy or cfg.get("policy")
    policies = load_policy_file(_require(policy_path, "policy") if policy_path else None)
    train = [r for r in records if r.split == "train"]
    val = [r for r in records if r.split == "validation"]
    if not val:
        frac = args.val_fraction if args.val_fraction is not None else 0.1
        train = assign_splits(train, tcfg.seed, validation=frac)
        val = [r for r in train if r.split == "validation"]
        train = [r for r in train if r.split == "train"]
        log.info("no validation rows; carved %d of %d training rows", len(val), len(val) + len(train))
    if not train:
        raise DataError("manifest has no training rows")
    with output_lock(out):
        (out / "run_config.json").write_text(json.dumps(
            {"train": asdict(tcfg), "model": asdict(mcfg)}, indent=2, sort_keys=True) + "\n")
        res = fit(train, val, mcfg, tcfg, root=root, out_dir=out, policies=policies)
    print(json.dumps({"checkpoint": str(out / "best.ckpt"), "best_step": res.best_step,
                      "best_val_eer": res.best_eer, "log": str(out / "train_log.jsonl")}))
    return EXIT_OK


def cmd_eval(args, cfg):
    records, root = _manifest(args.manifest or cfg.get("manifest"))
    ckpt = _require(args.checkpoint or cfg.get("checkpoint"), "checkpoint")
    records = [r for r in records if r.split == "test"] or records
    if not records:
        raise DataError("manifest has no records to evaluate")
    unseen = args.unseen.split(",") if args.unseen else cfg.get("unseen")
    report = evaluate(records, ckpt, root=root, unseen=unseen)
    if args.out:
        with output_lock(Path(args.out)) as out:
            (out / "report.json").write_text(report.to_json() + "\n")
            (out / "det.csv").write_text(report.det_csv())
    for line in report.table().splitlines():
        log.info(line)
    print(report.to_json())
    return EXIT_OK


def cmd_score(args, cfg):
    wav = _require(args.wav, "wav")
    ckpt = _require(args.checkpoint or cfg.get("checkpoint"), "checkpoint")
    params, mcfg, stats, meta = M.load_checkpoint(ckpt)
    record = SampleRecord(str(wav.resolve()), "bonafide", "human", "test")
    clip = load_clip(record, ".")
    logits = M.forward(featurize(clip, stats), params, mcfg)
    thr = float(meta.extra.get("threshold_at_eer", 0.0))
    verdict = "spoof" if logits.score >= thr else "bonafide"
    print(json.dumps({"score": logits.score, "threshold": thr, "verdict": verdict}))
    return EXIT_OK


COMMANDS = {"augment": cmd_augment, "featurize": cmd_featurize, "train": cmd_train,
            "eval": cmd_eval, "score": cmd_score}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="astspoof", description="Synthetic speech detection toolkit")
    p.add_argument("--config", help=f"TOML run config (default: ${CONFIG_ENV})")
    p.add_argument("--seed", type=int, help="master seed (default 0)")
    p.add_argument("-v", "--verbose", action="store_true")
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    common.add_argument("--config", default=argparse.SUPPRESS)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    a = sub.add_parser("augment", parents=[common], help="write label-dependent augmented copies of a corpus")
    a.add_argument("--manifest")
    a.add_argument("--policy", help="TOML augmentation policy (default: built-in)")
    a.add_argument("--out")

    f = sub.add_parser("featurize", parents=[common], help="write log-mel feature cache files")
    f.add_argument("--manifest")
    f.add_argument("--out")

    t = sub.add_parser("train", parents=[common], help="fine-tune and keep the best-EER checkpoint")
    t.add_argument("--manifest")
    t.add_argument("--out")
    t.add_argument("--policy")
    t.add_argument("--max-steps", type=int)
    t.add_argument("--validate-every", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch", type=int)
    t.add_argument("--patience", type=int)
    t.add_argument("--val-fraction", type=float)
    t.add_argument("--no-augment", action="store_true")
    t.add_argument("--full-model", action="store_true",
                   help="768-dim, 12-layer, 12-head encoder instead of the toy size")

    e = sub.add_parser("eval", parents=[common], help="EER report with per-technology breakdown")
    e.add_argument("--manifest")
    e.add_argument("--checkpoint")
    e.add_argument("--out")
    e.add_argument("--unseen", help="comma-separated technologies to average as unseen")

    s = sub.add_parser("score", parents=[common], help="score one WAV file")
    s.add_argument("--wav")
    s.add_argument("--checkpoint")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(stream=sys.stderr, level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", force=True)
    try:
        cfg = load_config(args.config)
        return COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        log.error("%s", exc)
        return EXIT_USAGE
    except (DataError, ManifestError, AudioError, PolicyError, FeatureError,
            EERUndefinedError, M.CheckpointError, M.ModelError, OSError) as exc:
        log.error("%s", exc)
        return EXIT_DATA
    except NumericError as exc:
        log.error("%s", exc)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
