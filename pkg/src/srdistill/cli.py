"""Config-driven command line: synth, train, eval, analyze, gradcheck.

One JSON config document carries a section per subcommand; unknown keys are
rejected up front. Every run owns its output directory exclusively through a
lock file, and identical config + seed reproduce identical primary artifacts.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import degradation, evalkit, gradcheck, trainer
from .errors import ConfigError, DataError, SRDistillError
from .features import FeatureExtractor
from .imaging import read_png
from .models import load_checkpoint

_TOP_KEYS = {"version", "seed", "synth", "train", "eval", "analyze"}

_PIPELINES = {
    "bicubic": degradation.simple_config,
    "second_order": degradation.broad_config,
    "pseudo_real": degradation.pseudo_real_config,
}


def load_config(path: str | Path) -> dict:
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError("config root must be a JSON object")
    unknown = set(doc) - _TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown top-level config keys: {sorted(unknown)}")
    if doc.get("version", 1) != 1:
        raise ConfigError(f"unsupported config version {doc.get('version')}")
    return doc


def _section(doc: dict, name: str) -> dict:
    if name not in doc:
        raise ConfigError(f"config has no {name!r} section")
    if not isinstance(doc[name], dict):
        raise ConfigError(f"config section {name!r} must be an object")
    return doc[name]


@contextlib.contextmanager
def run_dir_lock(out_dir: Path):
    out_dir.mkdir(parents=True, exist_ok=True)
    lock = out_dir / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise DataError(f"{out_dir} is locked by another process (stale? remove {lock})")
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


def _cmd_synth(args, doc: dict, seed: int) -> int:
    sec = dict(_section(doc, "synth"))
    unknown = set(sec) - {"hr_dir", "pipeline", "scale", "rounds"}
    if unknown:
        raise ConfigError(f"unknown keys in synth section: {sorted(unknown)}")
    name = sec.get("pipeline", "bicubic")
    if name not in _PIPELINES:
        raise ConfigError(f"pipeline must be one of {sorted(_PIPELINES)}, got {name!r}")
    kwargs = {"scale": int(sec.get("scale", 4))}
    if name == "second_order" and "rounds" in sec:
        kwargs["rounds"] = int(sec["rounds"])
    cfg = _PIPELINES[name](**kwargs)
    out = Path(args.out)
    with run_dir_lock(out):
        manifest = degradation.synthesize_dataset(sec["hr_dir"], cfg, out, seed)
    print(f"wrote {len(manifest.entries)} LR images and manifest to {out}")
    return 0


def _cmd_train(args, doc: dict, seed: int) -> int:
    sec = dict(_section(doc, "train"))
    sec["seed"] = seed
    if args.mode:
        sec["mode"] = args.mode
    if args.iters is not None:
        sec["total_iters"] = args.iters
        if sec.get("halve_at", 25000) >= args.iters:
            sec["halve_at"] = max(args.iters // 2, 0)
        sec.setdefault("checkpoint_every", max(args.iters, 1))
    cfg = trainer.TrainConfig.from_json(sec)
    out = Path(args.out)
    with run_dir_lock(out):
        artifacts = trainer.fit(cfg, out, progress=True)
    print(f"run complete: {artifacts.final_checkpoint}")
    return 0


def _cmd_eval(args, doc: dict, seed: int) -> int:
    sec = dict(_section(doc, "eval"))
    unknown = set(sec) - {"checkpoint", "manifest", "color_correction", "external_metrics_csv"}
    if unknown:
        raise ConfigError(f"unknown keys in eval section: {sorted(unknown)}")
    for key in ("checkpoint", "manifest"):
        if key not in sec:
            raise ConfigError(f"eval section needs {key!r}")
    out = Path(args.out)
    with run_dir_lock(out):
        report = evalkit.evaluate(
            sec["checkpoint"], sec["manifest"], bool(sec.get("color_correction", True))
        )
        if sec.get("external_metrics_csv"):
            report = evalkit.merge_external_metrics(report, sec["external_metrics_csv"])
        path = out / "eval_report.json"
        path.write_text(json.dumps(report.to_json(), indent=2, sort_keys=True))
    print(f"psnr_y={report.psnr_y:.4f} ssim_y={report.ssim_y:.4f} -> {path}")
    return 0


def _predictions(ckpt_path: str, lr_images, cc: bool):
    model = load_checkpoint(ckpt_path).pair.specialist
    model.eval()
    preds = []
    for lr in lr_images:
        sr = evalkit.upscale_image(model, lr)
        preds.append(evalkit.color_correct(sr, lr) if cc else sr)
    return preds


def _cmd_analyze(args, doc: dict, seed: int) -> int:
    sec = dict(_section(doc, "analyze"))
    allowed = {
        "before_checkpoint", "after_checkpoint", "labeled_manifest",
        "unlabeled_lr_dir", "tap", "max_images", "color_correction",
    }
    unknown = set(sec) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in analyze section: {sorted(unknown)}")
    for key in ("before_checkpoint", "after_checkpoint", "labeled_manifest", "unlabeled_lr_dir"):
        if key not in sec:
            raise ConfigError(f"analyze section needs {key!r}")
    limit = int(sec.get("max_images", 16))
    cc = bool(sec.get("color_correction", False))
    manifest = degradation.Manifest.load(sec["labeled_manifest"])
    labeled_lr = [read_png(e["lr_path"]) for e in manifest.entries[:limit]]
    unl_paths = sorted(Path(sec["unlabeled_lr_dir"]).glob("*.png"))[:limit]
    if not unl_paths:
        raise DataError(f"no PNG images in {sec['unlabeled_lr_dir']}")
    unlabeled_lr = [read_png(p) for p in unl_paths]
    ex = FeatureExtractor.toy(seed=seed)
    tap = sec.get("tap")

    out = Path(args.out)
    with run_dir_lock(out):
        results = {}
        for label, ckpt in (("before", sec["before_checkpoint"]), ("after", sec["after_checkpoint"])):
            gap = evalkit.domain_gap_analysis(
                _predictions(ckpt, labeled_lr, cc), _predictions(ckpt, unlabeled_lr, cc), ex, tap
            )
            results[label] = gap
        doc_out = {
            "kl_before": results["before"]["kl"],
            "kl_after": results["after"]["kl"],
            "kl_delta": results["after"]["kl"] - results["before"]["kl"],
        }
        (out / "analysis.json").write_text(json.dumps(doc_out, indent=2, sort_keys=True))
        _maybe_plot(results, out)
    print(
        f"kl_before={doc_out['kl_before']:.4f} kl_after={doc_out['kl_after']:.4f} "
        f"delta={doc_out['kl_delta']:+.4f}"
    )
    return 0


def _maybe_plot(results: dict, out: Path) -> None:
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        return
    fig, axes = plt.subplots(1, 2, figsize=(9, 4))
    for ax, (label, gap) in zip(axes, results.items()):
        ax.scatter(*np.asarray(gap["labeled_xy"]).T, s=12, label="labeled preds")
        ax.scatter(*np.asarray(gap["unlabeled_xy"]).T, s=12, label="unlabeled preds")
        ax.set_title(f"{label}: KL={gap['kl']:.3f} (PCA projection, substitute view)")
        ax.legend()
    fig.tight_layout()
    fig.savefig(out / "projection.png", dpi=120)
    plt.close(fig)


def _cmd_gradcheck(args, doc: dict, seed: int) -> int:
    out = Path(args.out)
    with run_dir_lock(out):
        results = gradcheck.run_gradcheck(seed=seed)
        table = gradcheck.format_table(results)
        (out / "gradcheck.txt").write_text(table + "\n")
        (out / "gradcheck.json").write_text(
            json.dumps(
                [
                    {
                        "name": r.name, "probed": r.probed, "passed": r.passed,
                        "max_rel_err": r.max_rel_err, "ok": r.ok,
                    }
                    for r in results
                ],
                indent=2,
            )
        )
    print(table)
    return 0 if all(r.ok for r in results) else 1


_COMMANDS = {
    "synth": _cmd_synth,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "analyze": _cmd_analyze,
    "gradcheck": _cmd_gradcheck,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="srdistill",
        description="Degradation synthesis, distance-distillation training, and evaluation "
        "for real-world super-resolution.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    specs = {
        "synth": "degrade an HR image folder into an LR dataset with a manifest",
        "train": "run one training schedule from the config's train section",
        "eval": "score a checkpoint against a manifest (PSNR/SSIM on luma)",
        "analyze": "compare feature-distribution gaps of two checkpoints",
        "gradcheck": "verify analytic loss gradients against finite differences",
    }
    for name, help_text in specs.items():
        p = sub.add_parser(name, help=help_text)
        if name != "gradcheck":
            p.add_argument("--config", required=True, help="path to the JSON config document")
        else:
            p.add_argument("--config", default=None, help="optional JSON config document")
        p.add_argument("--out", required=True, help="output directory owned by this run")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        if name == "train":
            p.add_argument("--mode", default=None, help="override train.mode")
            p.add_argument("--iters", type=int, default=None, help="override train.total_iters")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        doc = load_config(args.config) if args.config else {"version": 1}
        seed = args.seed if args.seed is not None else int(doc.get("seed", 0))
        return _COMMANDS[args.command](args, doc, seed)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except SRDistillError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
