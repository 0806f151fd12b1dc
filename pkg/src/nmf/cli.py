"""Command-line entry points: train, render, relight, eval, make-synthetic."""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="nmf",
        description="Hybrid volume/microfacet scene reconstruction and rendering",
    )
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, needs_ckpt=False):
        sp.add_argument("--config", help="TOML configuration file")
        sp.add_argument(
            "--set",
            dest="overrides",
            action="append",
            default=[],
            metavar="SECTION.KEY=VALUE",
            help="override a config value (repeatable)",
        )
        sp.add_argument("--out", required=True, help="output directory")
        if needs_ckpt:
            sp.add_argument("--checkpoint", required=True, help="scene checkpoint")

    common(sub.add_parser("train", help="optimize a scene from posed images"))
    common(sub.add_parser("render", help="render the test split"), needs_ckpt=True)
    rl = sub.add_parser("relight", help="render under a replacement environment")
    common(rl, needs_ckpt=True)
    rl.add_argument("--env", required=True, help="replacement environment (.pfm)")
    common(sub.add_parser("eval", help="metrics against the test split"), needs_ckpt=True)
    common(sub.add_parser("make-synthetic", help="generate the synthetic sphere dataset"))
    return p


def _setup_threads() -> None:
    import torch

    n = os.environ.get("NMF_THREADS")
    if n is not None:
        torch.set_num_threads(int(n))


def _load(args):
    from .config import load_config

    return load_config(args.config, args.overrides)


def _save_image(path: str, arr: np.ndarray) -> None:
    from PIL import Image

    Image.fromarray((np.clip(arr, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)).save(path)


def _render_split(model, cfg, out_dir: str, env_override=None):
    import torch

    from .dataset import load_scene
    from .render import render_image

    data = load_scene(cfg.data.root, cfg.data.test_split)
    if env_override is not None:
        model.env = env_override
    os.makedirs(out_dir, exist_ok=True)
    results = []
    with torch.no_grad():
        for i, cam in enumerate(data.cameras):
            img, aux = render_image(model, cam, cfg.render, return_aux=True)
            _save_image(os.path.join(out_dir, f"r_{i}.png"), img.numpy())
            _save_image(
                os.path.join(out_dir, f"r_{i}_normal.png"),
                aux["normal"].numpy() * 0.5 + 0.5,
            )
            results.append((img, aux))
    return data, results


def _cmd_train(args) -> None:
    from .config import dump_config, scene_kwargs
    from .dataset import load_scene
    from .model import SceneModel
    from .optim import train

    cfg = _load(args)
    if not cfg.data.root:
        raise ValueError("train requires data.root in the config")
    data = load_scene(cfg.data.root, cfg.data.train_split)
    model = SceneModel.create(**scene_kwargs(cfg.scene))
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "config.toml"), "w") as fh:
        fh.write(dump_config(cfg))
    train(model, data, cfg.train, cfg.render, out_dir=args.out)
    print(f"trained scene written to {os.path.join(args.out, 'checkpoint.nmf')}")


def _cmd_render(args) -> None:
    from .checkpoint import load_checkpoint

    cfg = _load(args)
    model = load_checkpoint(args.checkpoint)
    _render_split(model, cfg, args.out)
    print(f"renders written to {args.out}")


def _cmd_relight(args) -> None:
    from .checkpoint import load_checkpoint
    from .envmap import env_from_image, read_pfm

    cfg = _load(args)
    model = load_checkpoint(args.checkpoint)
    env = env_from_image(read_pfm(args.env))
    _render_split(model, cfg, args.out, env_override=env)
    print(f"relit renders written to {args.out}")


def _cmd_eval(args) -> None:
    from .checkpoint import load_checkpoint
    from .metrics import mae_normals, psnr, ssim

    cfg = _load(args)
    model = load_checkpoint(args.checkpoint)
    data, results = _render_split(model, cfg, args.out)
    rows = []
    for i, (img, aux) in enumerate(results):
        row = {
            "view": i,
            "psnr": psnr(img, data.images[i]),
            "ssim": ssim(img, data.images[i]),
        }
        if data.gt_normals is not None and data.opacity is not None:
            row["mae_normals_deg"] = mae_normals(
                aux["normal"], data.gt_normals[i], data.opacity[i]
            )
        rows.append(row)
    summary = {
        k: float(np.mean([r[k] for r in rows])) for k in rows[0] if k != "view"
    }
    report = {"per_view": rows, "mean": summary}
    with open(os.path.join(args.out, "metrics.json"), "w") as fh:
        json.dump(report, fh, indent=1)
    print(json.dumps(summary))


def _cmd_make_synthetic(args) -> None:
    from .synth import make_synthetic

    cfg = _load(args)
    make_synthetic(
        args.out,
        image_size=cfg.synthetic.image_size,
        n_train=cfg.synthetic.n_train,
        n_test=cfg.synthetic.n_test,
        seed=cfg.synthetic.seed,
    )
    print(f"synthetic dataset written to {args.out}")


_COMMANDS = {
    "train": _cmd_train,
    "render": _cmd_render,
    "relight": _cmd_relight,
    "eval": _cmd_eval,
    "make-synthetic": _cmd_make_synthetic,
}


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    _setup_threads()
    try:
        _COMMANDS[args.command](args)
    except (ValueError, FileNotFoundError, FloatingPointError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
