"""``geofeat`` command line: data generation, training, export and evaluation.

Exit status is 0 on success, 1 on a validation error and 2 on a runtime error.
Every run prints its resolved configuration to stderr; feeding that text back
through ``--config`` reproduces the run.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from . import io, net, pipeline
from .config import PipelineConfig, load_config
from .errors import GeoFeatError, UnknownCommand, ValidationError
from .evaluation import DescriptorSet, calibrate_ratio, compact_dim, dequantize, quantize
from .geosim import all_pair_reports, format_report_line

COMMANDS = ("gen-data", "similarity-report", "build-batches", "train", "export-descriptors",
            "eval-pairs", "calibrate-ratio", "compact-dim", "quantize", "loss-check")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ValidationError(message)


# flag dest -> config key, for flags that are plain config overrides
_FLAG_KEYS = {
    "seed": "seed", "threads": "threads", "steps": "steps", "n1": "n1", "n2": "n2", "alpha": "alpha",
    "lam": "lambda", "lr": "lr", "arch": "arch", "scene": "scene", "checkpoint": "checkpoint",
    "descriptors": "descriptors", "target": "target_precision",
}


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int)
    p.add_argument("--deterministic", dest="deterministic", action="store_true", default=None)
    p.add_argument("--no-deterministic", dest="deterministic", action="store_false")
    p.add_argument("--out", help="output file or directory (reports default to stdout)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="geofeat", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("gen-data", help="generate the synthetic scene (GEOREC + GDIM sidecars)")
    _common(p)

    p = sub.add_parser("similarity-report", help="per image pair: shared tracks and image similarity")
    _common(p)
    p.add_argument("--scene")

    p = sub.add_parser("build-batches", help="write one epoch of training match sets as GDPK + manifest")
    _common(p)
    p.add_argument("--scene")
    p.add_argument("--epoch", type=int, default=0)
    p.add_argument("--n1", type=int)

    p = sub.add_parser("train", help="train the descriptor network and write a GDNW checkpoint")
    _common(p)
    p.add_argument("--data", dest="scene")
    p.add_argument("--steps", type=int)
    p.add_argument("--n1", type=int)
    p.add_argument("--n2", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--lr", type=float)
    p.add_argument("--arch", choices=sorted(net.ARCHS))
    p.add_argument("--log", help="write the per-step loss table here")

    p = sub.add_parser("export-descriptors", help="describe every image's keypoints into GDSC files")
    _common(p)
    p.add_argument("--scene")
    p.add_argument("--checkpoint")
    p.add_argument("--quantize", action="store_true", help="store u8 descriptors")

    p = sub.add_parser("eval-pairs", help="matching metrics on the held-out pairs")
    _common(p)
    p.add_argument("--scene")
    p.add_argument("--descriptors")
    p.add_argument("--pairs", help="comma separated i:j list (default: holdout_pairs)")

    p = sub.add_parser("calibrate-ratio", help="largest ratio threshold reaching a target precision")
    _common(p)
    p.add_argument("--scene")
    p.add_argument("--descriptors")
    p.add_argument("--target", type=float)

    p = sub.add_parser("compact-dim", help="principal components carrying a variance fraction")
    _common(p)
    p.add_argument("--descriptors")
    p.add_argument("-t", type=float, dest="t")

    p = sub.add_parser("quantize", help="convert a float GDSC file to u8")
    _common(p)
    p.add_argument("--in", dest="input", required=True)

    p = sub.add_parser("loss-check", help="finite-difference check of the loss and network gradients")
    _common(p)
    p.add_argument("--sets", type=int, default=50)
    return parser


def resolve_config(args) -> PipelineConfig:
    overrides: Dict[str, str] = {}
    for item in args.set:
        if "=" not in item:
            raise ValidationError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    for dest, key in _FLAG_KEYS.items():
        val = getattr(args, dest, None)
        if val is not None:
            overrides[key] = str(val)
    if getattr(args, "t", None) is not None:
        overrides["compact_t"] = str(args.t)
    if args.deterministic is not None:
        overrides["deterministic"] = str(args.deterministic)
    return load_config(args.config, overrides)


def _emit(text: str, out: Optional[str]) -> None:
    if out:
        io._write_bytes(out, text.encode("utf-8"))
    else:
        sys.stdout.write(text)


def _load_scene(cfg: PipelineConfig, images: bool = True):
    return io.read_scene(cfg.scene, load_images=images)


def _descriptor_files(cfg: PipelineConfig) -> Dict[int, Path]:
    d = Path(cfg.descriptors)
    files = {}
    for f in sorted(d.glob("cam*.gdsc")):
        try:
            files[int(f.stem[3:])] = f
        except ValueError:
            continue
    if not files:
        raise ValidationError(f"no cam<id>.gdsc files under {d}")
    return files


def _load_descriptors(cfg: PipelineConfig, scene, cam: int, files, keep):
    if cam not in files:
        raise ValidationError(f"no descriptor file for camera {cam}")
    ds = io.read_gdsc(files[cam], image_id=cam)
    if ds.quantized:
        # quantised files are matched in the float domain they came from (entries are in [-1, 1])
        ds = DescriptorSet(cam, ds.keypoints, ds.vectors)
    tracks = pipeline.keypoint_tracks(scene, cam, ds.keypoints)
    return pipeline.restrict(ds, tracks, keep)


# --- subcommands ------------------------------------------------------------

def cmd_gen_data(cfg: PipelineConfig, args) -> None:
    from .synth import generate_synthetic_scene
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    scene, _ = generate_synthetic_scene(cfg.synth, cfg.seed)
    io.write_scene(out / Path(cfg.scene).name, scene)


def cmd_similarity_report(cfg: PipelineConfig, args) -> None:
    scene = _load_scene(cfg, images=False)
    geo = cfg.geo_params()
    lines = ["cam_i\tcam_j\tshared\ts_image\tkept"]
    for rep in all_pair_reports(scene, geo):
        kept = int(not rep.s_image > geo.prune_threshold)
        lines.append("\t".join(format_report_line(rep).split()) + f"\t{kept}")
    _emit("\n".join(lines) + "\n", args.out)


def cmd_build_batches(cfg: PipelineConfig, args) -> None:
    scene = _load_scene(cfg)
    stream = pipeline.make_stream(scene, cfg.updated({"batching": "match_set"}))
    ids, sps, pix, manifest = [], [], [], []
    per_pair: Dict = {}
    sets = stream.epoch(args.epoch)
    for set_id, (pair, _) in enumerate(stream.chunks(args.epoch)):
        c = per_pair.get(pair, 0)
        per_pair[pair] = c + 1
        ms = sets[set_id]
        ids.append(np.full(ms.n1, set_id, np.uint32))
        sps.append(ms.s_patch.astype(np.float32))
        pix.append(np.stack([ms.patches_a, ms.patches_b], axis=1).astype(np.float32))
        manifest.append((set_id, pair[0], pair[1], args.epoch, c))
    g = stream.bank.g_size
    ds = io.PatchDataset(g, np.concatenate(ids) if ids else np.zeros(0, np.uint32),
                         np.concatenate(sps) if sps else np.zeros(0, np.float32),
                         np.concatenate(pix) if pix else np.zeros((0, 2, g, g), np.float32))
    out = Path(args.out or "batches")
    out.mkdir(parents=True, exist_ok=True)
    io.write_gdpk(out / f"epoch{args.epoch}.gdpk", ds)
    io._write_bytes(out / f"epoch{args.epoch}.manifest", io.encode_manifest(manifest).encode("utf-8"))


def cmd_train(cfg: PipelineConfig, args) -> None:
    scene = _load_scene(cfg)
    lines = ["step\tloss"]
    stream = pipeline.make_stream(scene, cfg) if cfg.steps > 0 else None
    result = pipeline.train_model(scene, cfg, stream,
                                  progress=lambda s, l: lines.append(f"{s}\t{l:.9g}"))
    io.write_gdnw(args.out or cfg.checkpoint, result.params)
    if args.log:
        io._write_bytes(args.log, ("\n".join(lines) + "\n").encode("utf-8"))


def cmd_export(cfg: PipelineConfig, args) -> None:
    scene = _load_scene(cfg)
    params = io.read_gdnw(cfg.checkpoint)
    out = Path(args.out or cfg.descriptors)
    out.mkdir(parents=True, exist_ok=True)
    for cam in scene.cameras:
        if cam.id not in scene.images or not scene.observations_in(cam.id):
            continue
        ds, _ = pipeline.describe_image(params, scene, cam.id, None, cfg.support_k)
        if args.quantize:
            ds = DescriptorSet(cam.id, ds.keypoints, quantize(ds.vectors))
        io.write_gdsc(out / f"cam{cam.id}.gdsc", ds)


def _eval_pairs(cfg: PipelineConfig, args):
    scene = _load_scene(cfg, images=False)
    files = _descriptor_files(cfg)
    _, keep = pipeline.track_split(scene, cfg.split_tracks)
    pairs = cfg.updated({"holdout_pairs": args.pairs}).holdout() if getattr(args, "pairs", None) \
        else pipeline.holdout_pairs(scene, cfg)
    if not pairs:
        raise ValidationError("no evaluation pairs")
    loaded = {}
    for cam in sorted({c for p in pairs for c in p}):
        loaded[cam] = _load_descriptors(cfg, scene, cam, files, keep)
    return scene, pairs, loaded


def cmd_eval_pairs(cfg: PipelineConfig, args) -> None:
    scene, pairs, loaded = _eval_pairs(cfg, args)
    evals = [pipeline.evaluate_descriptor_pair(scene, loaded[i][0], loaded[j][0], loaded[i][1], cfg)
             for i, j in pairs]
    _emit(pipeline.format_report(evals), args.out)


def cmd_calibrate(cfg: PipelineConfig, args) -> None:
    scene, pairs, loaded = _eval_pairs(cfg, args)
    cands = np.concatenate([pipeline.pair_candidates(scene, loaded[i][0], loaded[j][0], loaded[i][1], cfg)
                            for i, j in pairs])
    cal = calibrate_ratio(cands, cfg.target_precision, cfg.ratio_grid_step)
    _emit("ratio\tprecision\tkept\tqualified\n"
          f"{cal.ratio:.6g}\t{cal.precision:.6f}\t{cal.n_kept}\t{int(cal.qualified)}\n", args.out)


def cmd_compact_dim(cfg: PipelineConfig, args) -> None:
    rows = []
    for path in _descriptor_files(cfg).values():
        v = io.read_gdsc(path).vectors
        rows.append(dequantize(v) if v.dtype == np.uint8 else v)
    x = np.concatenate(rows).astype(np.float64)
    k = compact_dim(x, cfg.compact_t)
    _emit(f"t\tdim\tcount\tcompact_dim\n{cfg.compact_t:g}\t{x.shape[1]}\t{x.shape[0]}\t{k}\n", args.out)


def cmd_quantize(cfg: PipelineConfig, args) -> None:
    ds = io.read_gdsc(args.input)
    if ds.quantized:
        raise ValidationError(f"{args.input} is already quantised")
    q = quantize(ds.vectors)
    err = float(np.abs(dequantize(q).astype(np.float64) - ds.vectors).max()) if len(ds) else 0.0
    if not args.out:
        raise ValidationError("quantize needs --out")
    io.write_gdsc(args.out, DescriptorSet(ds.image_id, ds.keypoints, q))
    sys.stdout.write(f"count\tdim\tmax_abs_error\n{len(ds)}\t{ds.vectors.shape[1]}\t{err:.6g}\n")


def cmd_loss_check(cfg: PipelineConfig, args) -> None:
    from .gradcheck import check_losses, check_micro_net
    loss_err = check_losses(n_sets=args.sets, seed=cfg.seed, params=cfg.loss_params())
    net_err = check_micro_net(seed=cfg.seed, params=cfg.loss_params())
    ok = max(loss_err.values()) < 1e-4 and net_err < 1e-3
    lines = ["check\tmax_rel_error"] + [f"{k}\t{v:.3e}" for k, v in loss_err.items()]
    lines.append(f"micro_net\t{net_err:.3e}")
    _emit("\n".join(lines) + "\n", args.out)
    if not ok:
        raise GeoFeatError("gradient check exceeded tolerance")


HANDLERS = {
    "gen-data": cmd_gen_data, "similarity-report": cmd_similarity_report, "build-batches": cmd_build_batches,
    "train": cmd_train, "export-descriptors": cmd_export, "eval-pairs": cmd_eval_pairs,
    "calibrate-ratio": cmd_calibrate, "compact-dim": cmd_compact_dim, "quantize": cmd_quantize,
    "loss-check": cmd_loss_check,
}


def run_command(argv: Sequence[str]) -> int:
    """Run one subcommand; returns the process exit status."""
    argv = list(argv)
    try:
        if not argv or argv[0].startswith("-") and argv[0] not in ("-h", "--help"):
            raise UnknownCommand(f"expected a subcommand: {', '.join(COMMANDS)}")
        if argv[0] not in COMMANDS and argv[0] not in ("-h", "--help"):
            raise UnknownCommand(f"unknown command {argv[0]!r}; expected one of {', '.join(COMMANDS)}")
        args = build_parser().parse_args(argv)
        cfg = resolve_config(args)
        sys.stderr.write(f"# geofeat {args.command} resolved config\n{cfg.dumps()}")
        with threadpool_limits(limits=1 if cfg.deterministic else cfg.threads):
            HANDLERS[args.command](cfg, args)
        return 0
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except ValidationError as exc:
        sys.stderr.write(f"geofeat: error: {exc}\n")
        return 1
    except (GeoFeatError, OSError, KeyError) as exc:
        sys.stderr.write(f"geofeat: runtime error: {exc}\n")
        return 2


def main(argv: Optional[List[str]] = None) -> None:
    sys.exit(run_command(sys.argv[1:] if argv is None else argv))


if __name__ == "__main__":
    main()
