"""Command-line front end.

Subcommands: synth, train, eval, infer, gradcheck, rf, inspect-ckpt.
Exit codes: 0 success, 1 runtime error, 2 usage error, 3 verification failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2
EXIT_VERIFICATION = 3


def _load_run_config(args, default_factory=None):
    from .config import RunConfig, from_dict, load_config
    if getattr(args, "config", None):
        cfg = load_config(args.config)
    elif default_factory is not None:
        cfg = default_factory()
    else:
        cfg = RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg = from_dict({**_cfg_dict(cfg), "seed": args.seed})
    if getattr(args, "precision", None):
        cfg = from_dict({**_cfg_dict(cfg), "precision": args.precision})
    return cfg


def _cfg_dict(cfg):
    return dataclasses.asdict(cfg)


def cmd_synth(args) -> int:
    from .config import desk_config
    from .synth import SynthSpec, synth_generate
    cfg = _load_run_config(args, desk_config)
    spec = cfg.data.synth or SynthSpec()
    if args.seed is not None:
        spec = dataclasses.replace(spec, seed=args.seed)
    if args.num_images is not None:
        spec = dataclasses.replace(spec, num_images=args.num_images)
    anns = synth_generate(spec, args.out)
    visible = sum(a.num_visible for a in anns)
    print(f"wrote {len(anns)} images to {args.out} ({visible} visible joints)")
    if visible == 0:
        print("warning: dataset flagged untrainable (occlusion produced no visible joints)")
    return EXIT_OK


def cmd_train(args) -> int:
    from .config import desk_config
    from .train import train
    cfg = _load_run_config(args, desk_config)
    result = train(cfg, args.out, max_steps=args.max_steps)
    print(f"finished {result.steps} steps; eval mean OKS {result.final_eval_oks:.4f}")
    print(f"final checkpoint: {result.final_ckpt}.json")
    print(f"metrics log: {result.metrics_path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .synth import load_dataset
    from .train import build_model_from_checkpoint, evaluate_split
    from .autodiff import DTYPES
    model, cfg = build_model_from_checkpoint(args.ckpt)
    images, anns, _ = load_dataset(args.data)
    result = evaluate_split(model, images, anns, DTYPES[cfg.precision], with_ap=True)
    for key in ("mean_oks", "mean_oks_occluded", "ap", "ap50", "ap75", "ar"):
        if key in result:
            print(f"{key} = {result[key]:.4f}")
    if args.out:
        Path(args.out).write_text(json.dumps(result, indent=1))
        print(f"wrote {args.out}")
    return EXIT_OK


def cmd_infer(args) -> int:
    from .autodiff import DTYPES, Tensor, no_grad
    from .head import decode_keypoints
    from .synth import image_to_array, read_ppm, write_ppm
    from .train import build_model_from_checkpoint
    model, cfg = build_model_from_checkpoint(args.ckpt)
    img = image_to_array(read_ppm(args.image))
    if (img.shape[1], img.shape[2]) != tuple(cfg.data.input_hw):
        raise ValueError(f"image is {img.shape[1]}x{img.shape[2]}, checkpoint expects "
                         f"{cfg.data.input_hw[0]}x{cfg.data.input_hw[1]}")
    dtype = DTYPES[cfg.precision]
    with no_grad():
        maps = model.forward(Tensor(img[None].astype(dtype), _check=False))
    decoded = decode_keypoints(maps.data[0])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    pred = {"image": str(args.image),
            "keypoints": [round(float(v), 4) for v in decoded.reshape(-1)]}
    (out / "keypoints.json").write_text(json.dumps(pred, indent=1))
    for j in range(maps.data.shape[1]):
        m = maps.data[0, j]
        lo, hi = float(m.min()), float(m.max())
        scaled = np.zeros_like(m) if hi == lo else (m - lo) / (hi - lo)
        gray = np.clip(np.rint(scaled * 255.0), 0, 255).astype(np.uint8)
        write_ppm(out / f"heatmap_{j:02d}.ppm", np.repeat(gray[:, :, None], 3, axis=2))
    print(f"wrote keypoints.json and {maps.data.shape[1]} heatmaps to {out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradchecks import run_scope
    results = run_scope(args.scope)
    worst = 0.0
    failed = False
    for r in results:
        status = "ok" if r.passed else "FAIL"
        print(f"{status:4} {r.component:<40} err={r.error:.3e}  thr={r.threshold:.0e}")
        worst = max(worst, r.error)
        failed |= not r.passed
    print(f"worst relative error: {worst:.3e} over {len(results)} checks")
    return EXIT_VERIFICATION if failed else EXIT_OK


def cmd_rf(args) -> int:
    from .attention import receptive_field
    print(receptive_field(args.window, args.dilation))
    if args.schedule:
        from .config import desk_config
        from .waterfall import block_receptive_fields
        cfg = _load_run_config(args) if args.config else None
        wf_cfg = cfg.model.waterfall if cfg else __default_waterfall()
        dilated, local = block_receptive_fields(wf_cfg)
        print(f"dilated attention layers:     {dilated}")
        print(f"non-dilated attention layers: {local}")
    return EXIT_OK


def __default_waterfall():
    from .waterfall import WaterfallConfig
    return WaterfallConfig()


def cmd_inspect_ckpt(args) -> int:
    from .checkpoint import describe_checkpoint
    print(describe_checkpoint(args.ckpt))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="waterfallpose",
                                description="Waterfall-attention pose estimation harness")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth", help="generate a synthetic stick-figure dataset")
    sp.add_argument("--config", type=Path)
    sp.add_argument("--out", type=Path, required=True)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--num-images", type=int)
    sp.set_defaults(fn=cmd_synth)

    tp = sub.add_parser("train", help="train a model")
    tp.add_argument("--config", type=Path)
    tp.add_argument("--out", type=Path, required=True)
    tp.add_argument("--seed", type=int)
    tp.add_argument("--precision", choices=("f32", "f64"))
    tp.add_argument("--max-steps", type=int)
    tp.set_defaults(fn=cmd_train)

    ep = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    ep.add_argument("--ckpt", type=Path, required=True)
    ep.add_argument("--data", type=Path, required=True)
    ep.add_argument("--out", type=Path)
    ep.set_defaults(fn=cmd_eval)

    ip = sub.add_parser("infer", help="run a checkpoint on one image")
    ip.add_argument("--ckpt", type=Path, required=True)
    ip.add_argument("--image", type=Path, required=True)
    ip.add_argument("--out", type=Path, required=True)
    ip.set_defaults(fn=cmd_infer)

    gp = sub.add_parser("gradcheck", help="finite-difference verification suites")
    gp.add_argument("--scope", choices=("primitive", "attention", "wtb", "wtm", "full"),
                    required=True)
    gp.set_defaults(fn=cmd_gradcheck)

    rp = sub.add_parser("rf", help="receptive-field extent of one attention hop")
    rp.add_argument("--window", type=int, required=True)
    rp.add_argument("--dilation", type=int, required=True)
    rp.add_argument("--schedule", action="store_true",
                    help="also print the per-block receptive fields")
    rp.add_argument("--config", type=Path)
    rp.set_defaults(fn=cmd_rf)

    cp = sub.add_parser("inspect-ckpt", help="print a checkpoint manifest")
    cp.add_argument("--ckpt", type=Path, required=True)
    cp.set_defaults(fn=cmd_inspect_ckpt)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
