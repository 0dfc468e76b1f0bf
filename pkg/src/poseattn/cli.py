"""Command-line entry point: synth | train | transfer | eval | grid | gradcheck."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from poseattn.config import load_config
from poseattn.losses import ConfigError
from poseattn.posecodec import KeypointFormatError, default_sigma, keypoints_to_heatmap, load_keypoints
from poseattn.synth import load_manifest, load_png, save_png

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class CliError(Exception):
    def __init__(self, domain: str, detail: str, code: int = EXIT_RUNTIME):
        super().__init__(detail)
        self.domain, self.detail, self.code = domain, detail, code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error:usage:{message}", file=sys.stderr)
        sys.exit(EXIT_USAGE)


def _canvas(text: str) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HxW, got {text!r}") from None
    return h, w


# --------------------------------------------------------------------------- commands


def cmd_synth(args) -> int:
    from poseattn.synth import build_dataset

    try:
        m = build_dataset(args.ids, args.poses_per_id, args.seed, args.out, canvas=args.canvas,
                          num_train_ids=args.train_ids)
    except OSError as e:
        raise CliError("io", str(e)) from e
    except ValueError as e:
        raise CliError("config", str(e), EXIT_USAGE) from e
    print(Path(args.out) / "manifest.json")
    return EXIT_OK if m.records else EXIT_RUNTIME


def cmd_train(args) -> int:
    from poseattn.trainer import NonFiniteLossError, train

    try:
        cfg = load_config(args.config)
        overrides = {}
        if args.steps is not None:
            if args.steps < 1:
                raise ConfigError("steps must be >= 1")
            overrides["max_steps"] = args.steps
        if args.seed is not None:
            overrides["seed"] = args.seed
        if overrides:
            cfg = cfg.replace(**overrides)
    except FileNotFoundError as e:
        raise CliError("config", str(e), EXIT_USAGE) from e
    except ConfigError as e:
        raise CliError("config", str(e), EXIT_USAGE) from e
    manifest = _manifest(args.manifest)
    try:
        result = train(manifest, cfg, args.out)
    except NonFiniteLossError as e:
        raise CliError("train", str(e)) from e
    for path in result.checkpoints:
        print(path)
    return EXIT_OK


def _manifest(path):
    try:
        m = load_manifest(path)
        m.validate()
        return m
    except FileNotFoundError as e:
        raise CliError("io", str(e)) from e
    except ValueError as e:
        raise CliError("data", str(e)) from e


def _checkpoint(path):
    from poseattn.trainer import load_checkpoint

    try:
        return load_checkpoint(path)
    except FileNotFoundError as e:
        raise CliError("checkpoint", str(e)) from e
    except Exception as e:  # corrupt or foreign file
        raise CliError("checkpoint", f"cannot load {path}: {e}") from e


def _heatmap(path, canvas, sigma):
    try:
        kps = load_keypoints(path, canvas)
    except FileNotFoundError as e:
        raise CliError("io", str(e)) from e
    except (KeypointFormatError, ValueError) as e:
        raise CliError("format", f"{path}: {e}") from e
    return torch.from_numpy(keypoints_to_heatmap(kps, canvas, sigma))[None]


def cmd_transfer(args) -> int:
    from poseattn.trainer import generate

    ckpt = _checkpoint(args.ckpt)
    try:
        img = load_png(args.image)
    except (OSError, ValueError) as e:
        raise CliError("io", f"{args.image}: {e}") from e
    canvas = img.shape[1:]
    sigma = ckpt.cfg.sigma or default_sigma(canvas)
    cond_pose = args.cond_pose or Path(args.image).with_suffix(".json")
    hm_c = _heatmap(cond_pose, canvas, sigma)
    hm_t = _heatmap(args.pose, canvas, sigma)
    out = generate(ckpt.nets, torch.from_numpy(img)[None], hm_c, hm_t)[0].numpy()
    save_png(out, args.out)
    print(args.out)
    return EXIT_OK


@torch.no_grad()
def embed_images(nets, images: torch.Tensor, batch: int = 64) -> np.ndarray:
    nets.eval()
    parts = [nets.reid(images[i:i + batch])[1] for i in range(0, len(images), batch)]
    return torch.cat(parts).numpy()


def evaluate_checkpoint(nets, manifest):
    from poseattn.reid import evaluate
    from poseattn.trainer import load_split

    query = load_split(manifest, "query")
    gallery = load_split(manifest, "gallery")
    if query is None:
        raise CliError("data", "empty query split")
    if gallery is None:
        raise CliError("data", "empty gallery split")
    (q_rec, q_img, _, _), (g_rec, g_img, _, _) = query, gallery
    return evaluate(embed_images(nets, q_img), [r.identity_id for r in q_rec], [r.camera_id for r in q_rec],
                    embed_images(nets, g_img), [r.identity_id for r in g_rec], [r.camera_id for r in g_rec])


def cmd_eval(args) -> int:
    ckpt = _checkpoint(args.ckpt)
    metrics = evaluate_checkpoint(ckpt.nets, _manifest(args.manifest))
    report = Path(args.report) if args.report else Path(args.ckpt).with_name(Path(args.ckpt).name + ".eval.json")
    report.write_text(json.dumps(metrics.to_dict(), indent=2) + "\n")
    print(metrics.table())
    print(report)
    return EXIT_OK


def cmd_grid(args) -> int:
    from poseattn.trainer import load_train_data, make_batch, sample_grid

    ckpt = _checkpoint(args.ckpt)
    data = load_train_data(_manifest(args.manifest), ckpt.cfg)
    batch = make_batch(data, np.arange(min(args.rows, len(data.pairs))))
    print(sample_grid(ckpt.nets, batch, Path(args.out)))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from poseattn.gradcheck import COMPONENTS, TOLERANCE, grad_check

    names = list(COMPONENTS) if args.component == "all" else [args.component]
    if args.component != "all" and args.component not in COMPONENTS:
        raise CliError("param", f"unknown component {args.component!r}", EXIT_USAGE)
    if not args.eps > 0:
        raise CliError("param", "eps must be > 0", EXIT_USAGE)
    ok = True
    for name in names:
        err = grad_check(name, args.eps, args.seed)
        passed = err < TOLERANCE
        ok &= passed
        print(f"{name} max_rel_error={err:.3e} {'ok' if passed else 'FAIL'}")
    return EXIT_OK if ok else EXIT_RUNTIME


# --------------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="poseattn", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="render a synthetic dataset")
    s.add_argument("--ids", type=int, required=True)
    s.add_argument("--poses-per-id", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--canvas", type=_canvas, default=(128, 64), help="HxW, default 128x64")
    s.add_argument("--train-ids", type=int, default=None, help="identities in the train split (default: half)")
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train from a config file or preset (desk, paper)")
    t.add_argument("--config", required=True)
    t.add_argument("--manifest", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--steps", type=int, default=None, help="stop after this many steps")
    t.add_argument("--seed", type=int, default=None)
    t.set_defaults(func=cmd_train)

    x = sub.add_parser("transfer", help="re-pose one image")
    x.add_argument("--ckpt", required=True)
    x.add_argument("--image", required=True)
    x.add_argument("--pose", required=True, help="target keypoint JSON")
    x.add_argument("--cond-pose", default=None, help="condition keypoint JSON (default: image path with .json)")
    x.add_argument("--out", required=True)
    x.set_defaults(func=cmd_transfer)

    e = sub.add_parser("eval", help="rank-k / mAP over the query and gallery splits")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--manifest", required=True)
    e.add_argument("--report", default=None, help="JSON output path")
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("grid", help="write a sample grid from a checkpoint")
    g.add_argument("--ckpt", required=True)
    g.add_argument("--manifest", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--rows", type=int, default=8)
    g.set_defaults(func=cmd_grid)

    c = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    c.add_argument("--component", required=True, help="component name or 'all'")
    c.add_argument("--eps", type=float, default=1e-5)
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    torch.set_num_threads(1)
    try:
        return args.func(args)
    except CliError as e:
        print(f"error:{e.domain}:{e.detail}", file=sys.stderr)
        return e.code


if __name__ == "__main__":
    sys.exit(main())
