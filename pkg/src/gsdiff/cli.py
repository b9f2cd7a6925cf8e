"""Command-line entry point: ``gsdiff <command> [options]``.

Exit codes: 0 on success, 1 for bad usage or a violated contract, 2 for I/O failures.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .camera import CameraPose, ViewConstraints
from .denoiser import DenoiserConfig
from .data import DataConfig, gen_object, gen_scene, load_dataset, write_dataset
from .diffusion import NoiseSchedule, SamplerConfig, sample
from .errors import ContractError, NonFiniteLossError
from .gaussians import export_ply, import_ply
from .imageio import read_png, write_png
from .raster import RenderConfig, render
from .trainer import TrainConfig, Trainer, evaluate, evaluation_viewset, load_model, save_model

log = logging.getLogger("gsdiff")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _build(cls, d: dict | None, **extra):
    try:
        return cls(**(d or {}), **extra)
    except TypeError as exc:
        raise ContractError(f"bad {cls.__name__} settings: {exc}") from exc


def _constraints(d: dict | None) -> ViewConstraints:
    return _build(ViewConstraints, d)


def _read_json(path):
    with open(path) as f:
        try:
            return json.load(f)
        except json.JSONDecodeError as exc:
            raise ContractError(f"{path}: invalid JSON ({exc})") from exc


def _write_json(path, obj) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _load_poses(path) -> list[CameraPose]:
    rec = _read_json(path)
    recs = rec if isinstance(rec, list) else rec.get("poses")
    if not isinstance(recs, list):
        raise ContractError(f"{path}: expected a list of cameras")
    return [CameraPose.from_json(r) for r in recs]


def cmd_gen_data(args) -> int:
    cfg = DataConfig(width=args.size, height=args.size)
    assets = [gen_object(args.seed + i, cfg) for i in range(args.objects)]
    assets += [gen_scene(args.seed + i, cfg) for i in range(args.scenes)]
    man = write_dataset(args.out, assets, cfg)
    print(f"wrote {len(man.assets)} assets to {Path(args.out) / 'manifest.json'}")
    return 0


def cmd_train(args) -> int:
    conf = _read_json(args.config) if args.config else {}
    train = dict(conf.get("train", {}))
    if args.seed is not None:
        train["seed"] = args.seed
    if args.iters is not None:
        train["total_iters"] = args.iters
    assets = load_dataset(args.data)
    kwargs = {"constraints": _constraints(conf.get("constraints"))}
    out = Path(args.out)
    if args.resume:
        trainer = Trainer.resume(args.resume, assets, **kwargs)
    else:
        render_conf = {"tile_size": 8, **conf.get("render", {})}
        trainer = Trainer(assets, _build(TrainConfig, train), _build(DenoiserConfig, conf.get("denoiser")),
                          _build(RenderConfig, render_conf), **kwargs)
    history = trainer.run(checkpoint_dir=out / "checkpoints", log_every=args.log_every)
    save_model(trainer.model, out / "model.bin", {"config_hash": trainer.config_hash()})
    with open(out / "loss.csv", "a") as f:
        for r in history:
            f.write(f"{r.iteration},{r.loss!r},{r.lr!r},{'+'.join(r.tags)},{int(r.skipped)}\n")
    print(f"trained to iteration {trainer.iteration}; model at {out / 'model.bin'}")
    return 0


def cmd_sample(args) -> int:
    model = load_model(args.model)
    cond = read_png(args.cond)
    cond_pose = CameraPose.load(args.cond_pose)
    poses = _load_poses(args.poses)
    res = sample(cond, cond_pose, poses, model, NoiseSchedule.cosine(),
                 SamplerConfig(num_steps=args.steps, eta=args.eta, seed=args.seed or 0), tag=args.tag)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    export_ply(res.cloud, out / "cloud.ply")
    for k, img in enumerate(res.views):
        write_png(out / f"view_{k:02d}.png", img)
    print(f"{len(res.cloud)} Gaussians after {res.denoiser_calls} denoiser calls; written to {out}")
    return 0


def cmd_render(args) -> int:
    out = render(import_ply(args.cloud), CameraPose.load(args.pose), RenderConfig(tile_size=args.tile))
    write_png(args.out, out.image)
    return 0


def cmd_eval(args) -> int:
    model = load_model(args.model)
    assets = load_dataset(args.data)
    conf = _read_json(args.config) if args.config else {}
    rep = evaluate(model, assets, NoiseSchedule.cosine(),
                   SamplerConfig(num_steps=args.steps, eta=args.eta, seed=args.seed or 0),
                   constraints=_constraints(conf.get("constraints")), seed=args.seed or 0)
    text = json.dumps(rep, indent=2, sort_keys=True)
    if args.out:
        _write_json(args.out, rep)
    print(text)
    return 0


def cmd_export_ply(args) -> int:
    model = load_model(args.model)
    assets = {a.asset_id: a for a in load_dataset(args.data)}
    if args.asset not in assets:
        raise ContractError(f"asset {args.asset!r} not in dataset; have {sorted(assets)}")
    asset = assets[args.asset]
    vs = evaluation_viewset(asset, model.cfg, ViewConstraints(), args.seed or 0, 0)
    res = sample(vs.condition.image, vs.condition.pose, [v.pose for v in vs.noisy], model,
                 NoiseSchedule.cosine(), SamplerConfig(num_steps=args.steps, seed=args.seed or 0), tag=asset.tag)
    export_ply(res.cloud, args.out)
    print(f"wrote {len(res.cloud)} Gaussians to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="gsdiff", description="Gaussian diffusion toolkit")
    p.add_argument("--seed", type=int, default=None, help="global seed (default 0)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset")
    g.add_argument("--objects", type=int, default=4)
    g.add_argument("--scenes", type=int, default=4)
    g.add_argument("--size", type=int, default=32, help="image width and height")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a denoiser on a dataset")
    t.add_argument("--data", required=True, help="dataset manifest.json")
    t.add_argument("--config", help="JSON with optional train/denoiser/render/constraints sections")
    t.add_argument("--out", required=True)
    t.add_argument("--iters", type=int, help="override total iterations")
    t.add_argument("--resume", help="trainer checkpoint to continue from")
    t.add_argument("--log-every", type=int, default=100)
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", help="generate Gaussians from one posed image")
    s.add_argument("--model", required=True)
    s.add_argument("--cond", required=True, help="condition image (PNG)")
    s.add_argument("--cond-pose", required=True, help="condition camera (JSON)")
    s.add_argument("--poses", required=True, help="JSON list of noisy-view cameras")
    s.add_argument("--tag", choices=("object", "scene"), default="object")
    s.add_argument("--steps", type=int, default=50)
    s.add_argument("--eta", type=float, default=0.0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sample)

    r = sub.add_parser("render", help="render a PLY cloud from a camera")
    r.add_argument("--cloud", required=True)
    r.add_argument("--pose", required=True)
    r.add_argument("--tile", type=int, default=16)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_render)

    e = sub.add_parser("eval", help="PSNR/SSIM report on held-out assets")
    e.add_argument("--model", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--config", help="JSON with an optional constraints section")
    e.add_argument("--steps", type=int, default=50)
    e.add_argument("--eta", type=float, default=0.0)
    e.add_argument("--out", help="also write the report here")
    e.set_defaults(func=cmd_eval)

    x = sub.add_parser("export-ply", help="sample one dataset asset and write the cloud as PLY")
    x.add_argument("--model", required=True)
    x.add_argument("--data", required=True)
    x.add_argument("--asset", required=True)
    x.add_argument("--steps", type=int, default=50)
    x.add_argument("--out", required=True)
    x.set_defaults(func=cmd_export_ply)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if args.seed is not None and args.seed < 0:
        print("gsdiff: error: --seed must be non-negative", file=sys.stderr)
        return 1
    if args.command == "gen-data" and args.seed is None:
        args.seed = 0
    try:
        return args.func(args)
    except (ContractError, NonFiniteLossError) as exc:
        print(f"gsdiff: error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"gsdiff: I/O error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
