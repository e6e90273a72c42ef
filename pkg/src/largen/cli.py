"""Command-line entry point.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import evalbench
from .checkpoint import CheckpointError, load_checkpoint
from .codec import CodecError
from .config import ModelConfig
from .data_engine import AnnotatorError, DataEngineError, OracleSuite, ReplaySuite, build_dataset
from .denoiser import DenoiserError
from .imageio import load_image, load_mask, png_bytes
from .sampler import GuidanceConfig, InpaintRequest, inpaint
from .trainer import NumericError, TrainConfig, train_stage1, train_stage2

log = logging.getLogger("largen")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class UsageError(Exception):
    pass


def _field_names(cls) -> set[str]:
    return {f.name for f in fields(cls)}


CONFIG_KEYS = {"train": _field_names(TrainConfig), "model": _field_names(ModelConfig),
               "guidance": _field_names(GuidanceConfig)}


def load_run_config(path: str | None) -> dict:
    """Flat JSON; every key must belong to one of the train/model/guidance configs."""
    if not path:
        return {}
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise UsageError("config file must hold a flat JSON object")
    unknown = sorted(set(data) - set().union(*CONFIG_KEYS.values()))
    if unknown:
        raise UsageError(f"unknown config keys: {unknown}")
    return data


def resolve(defaults: dict, file_values: dict, flags: dict, keys: set[str]) -> dict:
    """Built-in defaults < config file < explicit flags, restricted to ``keys``."""
    out = {k: v for k, v in defaults.items() if k in keys}
    out.update({k: v for k, v in file_values.items() if k in keys})
    out.update({k: v for k, v in flags.items() if k in keys and v is not None})
    return out


def _write_json(path: Path, payload: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def parse_annotators(spec: str):
    if spec == "oracle":
        return OracleSuite()
    if spec.startswith("replay:") and len(spec) > len("replay:"):
        return ReplaySuite(spec[len("replay:"):])
    raise UsageError(f"--annotators must be 'oracle' or 'replay:<dir>', got {spec!r}")


# commands

def cmd_build_data(args) -> int:
    manifest = build_dataset(args.num, args.seed, parse_annotators(args.annotators), args.out,
                             image_size=args.image_size)
    print(json.dumps({"count": manifest["count"], "filter_stats": manifest["filter_stats"]}, sort_keys=True))
    return EXIT_OK


def cmd_train(args) -> int:
    file_values = load_run_config(args.config)
    flags = {"stage": args.stage, "data_root": args.data, "steps": args.steps, "lr": args.lr,
             "batch_size": args.batch_size, "seed": args.seed, "beta_train": args.beta_train,
             "max_samples": args.max_samples}
    tcfg_dict = resolve({}, file_values, flags, CONFIG_KEYS["train"])
    if not tcfg_dict.get("data_root"):
        raise UsageError("--data is required")
    try:
        tcfg = TrainConfig.from_dict(tcfg_dict)
        mcfg = ModelConfig.from_dict(resolve(ModelConfig().to_dict(), file_values, {}, CONFIG_KEYS["model"]))
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc
    log.info("resolved train config: %s", json.dumps(tcfg.to_dict(), sort_keys=True))

    every = max(1, tcfg.steps // 20)

    def progress(step, loss):
        if step % every == 0 or step == tcfg.steps:
            print(f"step {step}/{tcfg.steps} loss {loss:.4f}", file=sys.stderr)

    if tcfg.stage == 1:
        if args.init_from:
            raise UsageError("--init-from is only used by stage 2")
        result = train_stage1(tcfg, mcfg, args.ckpt_out, resume_from=args.resume_from, progress=progress)
    else:
        if not args.init_from:
            raise UsageError("stage 2 requires a stage-1 checkpoint: pass --init-from")
        result = train_stage2(tcfg, args.init_from, args.ckpt_out, resume_from=args.resume_from,
                              progress=progress)
    s = result.smoothed
    print(json.dumps({"ckpt": args.ckpt_out, "stage": tcfg.stage, "steps": len(result.losses),
                      "initial_smoothed_loss": s[0] if s else None,
                      "final_smoothed_loss": s[-1] if s else None}, sort_keys=True))
    return EXIT_OK


def _guidance(args, file_values: dict, **overrides) -> GuidanceConfig:
    flags = {"w": args.cfg_scale, "beta": getattr(args, "beta", None), "steps": args.steps, "seed": args.seed,
             **overrides}
    try:
        return GuidanceConfig(**resolve(GuidanceConfig().to_dict(), file_values, flags, CONFIG_KEYS["guidance"]))
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc


class LatentDump:
    def __init__(self, root: str):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.index = []

    def __call__(self, i: int, t: int, z) -> None:
        name = f"step_{i:04d}.npy"
        np.save(self.root / name, z[0].detach().cpu().numpy().astype("<f4"))
        self.index.append({"step": i, "t": int(t), "file": name})

    def close(self) -> None:
        _write_json(self.root / "index.json", {"steps": self.index})


def cmd_sample(args) -> int:
    file_values = load_run_config(args.config)
    gcfg = _guidance(args, file_values, blend=False if args.no_blend else None,
                     composite=False if args.no_composite else None, refine=False if args.no_refine else None)
    model, _ = load_checkpoint(args.ckpt)
    try:
        scene, mask = load_image(args.scene), load_mask(args.mask)
        subject = load_image(args.subject) if args.subject else None
    except OSError as exc:
        raise CodecError(f"cannot read input image: {exc}") from exc
    if mask.shape != scene.shape[:-1]:
        raise CodecError(f"mask {tuple(mask.shape)} does not match scene {tuple(scene.shape[:-1])}")
    if subject is None and not args.prompt:
        log.warning("neither --subject nor --prompt given; running an unconditional fill")
    dump = LatentDump(args.dump_latents) if args.dump_latents else None
    image, window = inpaint(InpaintRequest(scene, mask, subject, args.prompt), gcfg, model,
                            margin=args.margin, trace=dump)
    if dump is not None:
        dump.close()
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_bytes(png_bytes(image))
    _write_json(out.with_suffix(".json"), {
        "guidance": gcfg.to_dict(), "ckpt": str(args.ckpt), "prompt": args.prompt,
        "subject": args.subject, "window": window.to_json(), "margin": args.margin,
    })
    print(str(out))
    return EXIT_OK


def _bench(path: str) -> evalbench.Benchmark:
    root = Path(path)
    return evalbench.build_benchmark(root / "scenes", root / "subjects", root / "prompts.txt")


def _write_tables(out: str, rows, summary, key: str, config: dict) -> None:
    d = Path(out)
    d.mkdir(parents=True, exist_ok=True)
    evalbench.write_results_csv(d / "results.csv", rows)
    evalbench.write_summary_csv(d / "summary.csv", summary, key)
    _write_json(d / "config.json", config)


def cmd_build_bench(args) -> int:
    paths = evalbench.make_toy_benchmark(args.data, args.out, args.scenes, args.subjects,
                                         evalbench.PROMPTS_NON_LIVE[:args.prompts])
    print(json.dumps(paths, sort_keys=True))
    return EXIT_OK


def cmd_eval(args) -> int:
    gcfg = _guidance(args, load_run_config(args.config), refine=False if args.no_refine else None)
    bench = _bench(args.bench)
    model, _ = load_checkpoint(args.ckpt)
    rows = evalbench.evaluate(bench, model, gcfg, variant=args.variant, use_subject=not args.no_subject)
    summary = [{"beta": s["key"], **{k: v for k, v in s.items() if k != "key"}}
               for s in evalbench.summarize(rows, lambda r: r.beta)]
    _write_tables(args.out, rows, summary, "beta", {"guidance": gcfg.to_dict(), "ckpt": str(args.ckpt)})
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def cmd_sweep_beta(args) -> int:
    try:
        betas = evalbench.parse_betas(args.betas)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    gcfg = _guidance(args, load_run_config(args.config), refine=False if args.no_refine else None)
    bench = _bench(args.bench)
    model, _ = load_checkpoint(args.ckpt)
    rows, summary = evalbench.sweep_beta(bench, model, betas, gcfg)
    _write_tables(args.out, rows, summary, "beta",
                  {"guidance": gcfg.to_dict(), "betas": betas, "ckpt": str(args.ckpt)})
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def cmd_ablate(args) -> int:
    gcfg = _guidance(args, load_run_config(args.config))
    variants = {name: path for name, path in zip(evalbench.ABLATION_VARIANTS,
                                                  (args.baseline, args.locate, args.assign, args.refine))
                if path}
    bench = _bench(args.bench)
    rows, summary = evalbench.ablation_table(bench, variants, gcfg)
    _write_tables(args.out, rows, summary, "variant",
                  {"guidance": gcfg.to_dict(), "variants": {k: str(v) for k, v in variants.items()}})
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


# parser

def _guidance_flags(p: argparse.ArgumentParser, beta: bool = True) -> None:
    if beta:
        p.add_argument("--beta", type=float, default=None, help="image-branch weight (default: 0.3)")
    p.add_argument("--cfg-scale", type=float, default=None, help="classifier-free guidance scale (default: 7.5)")
    p.add_argument("--steps", type=int, default=None, help="sampler steps (default: 50)")
    p.add_argument("--seed", type=int, default=None, help="noise seed (default: 0)")
    p.add_argument("--config", help="flat JSON config; flags override it")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="largen", description="Subject-guided inpainting toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-data", help="build a quadruplet dataset from synthetic scenes")
    p.add_argument("--out", required=True)
    p.add_argument("--num", type=int, required=True, help="number of scenes")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--annotators", default="oracle", help="oracle or replay:<dir> (default: oracle)")
    p.add_argument("--image-size", type=int, default=64)
    p.set_defaults(func=cmd_build_data)

    p = sub.add_parser("train", help="run training stage 1 or 2")
    p.add_argument("--stage", type=int, choices=(1, 2), required=True)
    p.add_argument("--data", help="dataset directory")
    p.add_argument("--config", help="flat JSON config; flags override it")
    p.add_argument("--ckpt-out", required=True)
    p.add_argument("--init-from", help="stage-1 checkpoint (required for stage 2)")
    p.add_argument("--resume-from", help="checkpoint of an interrupted run to continue")
    p.add_argument("--steps", type=int, help="optimizer steps (default: 2000 stage 1, 1000 stage 2)")
    p.add_argument("--lr", type=float, help="learning rate (default: 1e-4)")
    p.add_argument("--batch-size", type=int, help="batch size (default: 8)")
    p.add_argument("--seed", type=int, help="training seed (default: 0)")
    p.add_argument("--beta-train", type=float, help="training beta (default: 1.0 stage 1, 0.3 stage 2)")
    p.add_argument("--max-samples", type=int, help="use the first N quadruplets (default: 64)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="inpaint one scene")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("--subject")
    p.add_argument("--prompt")
    _guidance_flags(p)
    p.add_argument("--margin", type=float, default=0.5, help="zoom-window margin (default: 0.5)")
    p.add_argument("--out", required=True, help="output PNG")
    p.add_argument("--no-blend", action="store_true")
    p.add_argument("--no-composite", action="store_true")
    p.add_argument("--no-refine", action="store_true")
    p.add_argument("--dump-latents", metavar="DIR", help="write one .npy per step plus index.json")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("build-bench", help="assemble a toy benchmark from a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--scenes", type=int, default=4)
    p.add_argument("--subjects", type=int, default=3)
    p.add_argument("--prompts", type=int, default=5, choices=range(1, 11), metavar="{1..10}")
    p.set_defaults(func=cmd_build_bench)

    p = sub.add_parser("eval", help="score a checkpoint on a benchmark")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--bench", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--variant", default="main")
    p.add_argument("--no-subject", action="store_true", help="text-only guidance")
    p.add_argument("--no-refine", action="store_true")
    _guidance_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep-beta", help="evaluate over a range of beta values")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--bench", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--betas", default="0.1:1.0:0.1", help="lo:hi:step or comma list (default: 0.1:1.0:0.1)")
    p.add_argument("--no-refine", action="store_true")
    _guidance_flags(p, beta=False)
    p.set_defaults(func=cmd_sweep_beta)

    p = sub.add_parser("ablate", help="component ablation table")
    p.add_argument("--bench", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--baseline", help="checkpoint trained on global captions without subject tokens")
    p.add_argument("--locate", help="checkpoint trained on regional captions")
    p.add_argument("--assign", help="checkpoint trained with subject tokens")
    p.add_argument("--refine", help="stage-2 checkpoint")
    _guidance_flags(p)
    p.set_defaults(func=cmd_ablate)
    return parser


DATA_ERRORS = (DataEngineError, AnnotatorError, evalbench.BenchmarkError, CheckpointError, CodecError,
               DenoiserError, OSError)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except DATA_ERRORS as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
