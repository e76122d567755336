"""Command-line driver: ``cloudremoval {synth,sample,train,infer,eval}``.

Every subcommand loads the YAML config, applies flag overrides, validates
the whole config, writes ``resolved_config.yaml`` next to its outputs and
only then touches data.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import cloudsim, embed
from .config import RESOLVED_NAME, ConfigError, PipelineConfig, load_config
from .raster_io import BandImage, RasterError, extract_tiles, load_image, read_manifest, save_image

logger = logging.getLogger("cloudremoval")

EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_CONFIG = 2
EXIT_PATH = 3
EXIT_DATA = 4
EXIT_TRAINING = 5


def _scene_pairs(cfg: PipelineConfig):
    """Yield (scene_id, rgb, nir, valid_mask) from the config or synthetic scenes."""
    if cfg.paths.scenes:
        for entry in cfg.paths.scenes:
            rgb = load_image(entry.rgb)
            if entry.nir is None:
                if rgb.bands != 4:
                    raise RasterError(f"scene {entry.id}: no NIR file and the raster is not 4-band RGBN")
                rgb, nir = rgb.select([0, 1, 2]), rgb.select([3])
            else:
                nir = load_image(entry.nir)
            mask = None
            if entry.valid_mask:
                mask = load_image(entry.valid_mask).data[:, :, 0] > 0
            yield entry.id, rgb, nir, mask
    else:
        for i in range(cfg.paths.synthetic_scenes):
            seed = cfg.cloudsim.seed + i
            rgb, nir = cloudsim.synthetic_scene(seed, cfg.paths.synthetic_scene_size)
            yield f"synthetic-{seed}", rgb, nir, None


def cmd_synth(cfg: PipelineConfig, args) -> int:
    root = cfg.paths.resolve("dataset_root")
    root.mkdir(parents=True, exist_ok=True)
    cfg.dump(root / RESOLVED_NAME)
    if args.dry_run:
        return EXIT_OK
    side, stride = cfg.raster.tile_side, cfg.raster.stride
    pairs, ids, first_rgb = [], [], None
    for scene_id, rgb, nir, mask in _scene_pairs(cfg):
        if (rgb.height, rgb.width) != (nir.height, nir.width):
            raise RasterError(f"scene {scene_id}: RGB and NIR differ in size")
        first_rgb = first_rgb if first_rgb is not None else rgb
        for t_rgb, t_nir in zip(extract_tiles(rgb, side, stride, scene_id, mask),
                                extract_tiles(nir, side, stride, scene_id, mask)):
            pairs.append((t_rgb, t_nir))
            ids.append(f"{scene_id}-r{t_rgb.origin[0]:05d}-c{t_rgb.origin[1]:05d}")
    sim = cfg.cloudsim
    if sim.group_count is not None and len(pairs) > sim.group_count:
        keep = np.sort(np.random.default_rng(sim.seed).choice(len(pairs), sim.group_count, replace=False))
        pairs, ids = [pairs[i] for i in keep], [ids[i] for i in keep]
    if sim.reference_stats is None:
        ref_img = load_image(sim.reference_scene) if sim.reference_scene else first_rgb
        if ref_img is not None:
            stats = cloudsim.channel_stats(ref_img.data[:, :, :3], tuple(sim.clip_percentiles))
            sim.reference_stats = stats.tolist()
    manifest = cloudsim.build_dataset(pairs, sim, root, ids)
    print(f"wrote {len(pairs)} groups -> {manifest}")
    return EXIT_OK


def cmd_sample(cfg: PipelineConfig, args) -> int:
    ecfg = cfg.embed
    selection_path = cfg.paths.resolve("selection")
    out_dir = selection_path.parent
    if ecfg.extractor == "alexnet" and (ecfg.weights is None or not Path(ecfg.weights).is_file()):
        raise FileNotFoundError(f"alexnet weights file not found: {ecfg.weights}")
    root = cfg.paths.resolve("dataset_root")
    _, records = read_manifest(root)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg.dump(out_dir / RESOLVED_NAME)
    if args.dry_run:
        return EXIT_OK
    if ecfg.sample_count > len(records):
        raise ConfigError(f"sample_count {ecfg.sample_count} exceeds the {len(records)} available groups")
    if len(records) and not 1 < ecfg.tsne.perplexity < len(records):
        raise ConfigError(f"perplexity {ecfg.tsne.perplexity} must lie in (1, {len(records)})")
    extractor = embed.make_extractor(ecfg.extractor, ecfg.weights)
    vectors = [embed.extract_features(rec.group_id, load_image(root / rec.paths["target_rgb"]), extractor)
               for rec in records]
    embed.write_feature_cache(out_dir / "features.f32", vectors, extractor.name)
    if not vectors:
        hist = embed.GridHistogram(ecfg.grid_size, (0.0, 0.0, 0.0, 0.0),
                                   [[[] for _ in range(ecfg.grid_size)] for _ in range(ecfg.grid_size)])
        embed.write_selection(selection_path, [], hist, {"sample_count": ecfg.sample_count})
        return EXIT_OK
    X = np.stack([v.values for v in vectors]).astype(np.float64)
    P = embed.pairwise_affinities(X, ecfg.tsne.perplexity)
    result = embed.tsne_embed(P, ecfg.tsne)
    points = [embed.EmbeddingPoint(v.tile_id, tuple(map(float, y))) for v, y in zip(vectors, result.embedding)]
    hist = embed.grid_histogram(points, ecfg.grid_size)
    selected = embed.uniform_sample(hist, ecfg.sample_count, ecfg.seed)
    embed.write_selection(selection_path, selected, hist,
                          {"sample_count": ecfg.sample_count, "seed": ecfg.seed, "extractor": extractor.name})
    embed.render_heatmap(hist, out_dir / "heatmap.png")
    (out_dir / "embedding.json").write_text(json.dumps(
        {"points": [{"tile_id": p.tile_id, "y": list(p.y)} for p in points], "kl": result.kl_history}))
    print(f"selected {len(selected)} of {len(records)} groups -> {selection_path}")
    return EXIT_OK


def _training_ids(cfg: PipelineConfig) -> list[str] | None:
    selection = cfg.paths.resolve("selection")
    if cfg.embed.restrict_training and selection.is_file():
        return embed.read_selection(selection)
    return None


def cmd_train(cfg: PipelineConfig, args) -> int:
    from .mcgan import GroupDataset, train

    root = cfg.paths.resolve("dataset_root")
    ckpt_dir = cfg.paths.resolve("checkpoints")
    if not args.dry_run:
        read_manifest(root)  # explicit path error before any output
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    cfg.dump(ckpt_dir / RESOLVED_NAME)
    if args.dry_run:
        return EXIT_OK
    tcfg = cfg.train
    dataset = GroupDataset(root, tcfg.input_mode, tcfg.output_channels == 4, ids=_training_ids(cfg))
    result = train(dataset, tcfg, ckpt_dir, resume=args.resume)
    print(f"trained to epoch {result.state.epoch}; {len(result.checkpoints)} checkpoint(s) in {ckpt_dir}")
    return EXIT_OK


def _latest_checkpoint(cfg: PipelineConfig, explicit: str | None) -> Path:
    if explicit:
        return Path(explicit)
    found = sorted(cfg.paths.resolve("checkpoints").glob("epoch_*.ckpt"))
    if not found:
        raise FileNotFoundError("no checkpoint given and none found in the checkpoint directory")
    return found[-1]


def cmd_infer(cfg: PipelineConfig, args) -> int:
    from .evalsuite import render_panel
    from .mcgan import load_checkpoint, predict

    out_dir = Path(args.out) / "infer" if args.out else Path(cfg.paths.out) / "infer"
    ckpt_path = _latest_checkpoint(cfg, args.checkpoint)
    if not args.input and not (args.rgb or args.nir):
        raise ConfigError("infer needs --input GROUP_DIR or --rgb/--nir images")
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg.dump(out_dir / RESOLVED_NAME)
    if args.dry_run:
        return EXIT_OK
    ckpt = load_checkpoint(ckpt_path)
    truth = None
    if args.input:
        group = Path(args.input)
        rgb, nir = load_image(group / "cloudy_rgb.png"), load_image(group / "nir.png")
        if (group / "target_rgb.png").is_file():
            truth = load_image(group / "target_rgb.png")
        name = group.name
    else:
        rgb = load_image(args.rgb) if args.rgb else None
        nir = load_image(args.nir) if args.nir else None
        name = Path(args.rgb or args.nir).stem
    pred = predict(ckpt, cloudy_rgb=rgb, nir=nir)
    save_image(pred.rgb, out_dir / f"{name}_cloudfree.png")
    if pred.mask is not None:
        save_image(pred.mask, out_dir / f"{name}_mask.png")
    nir2rgb = predict(load_checkpoint(args.nir2rgb), nir=nir).rgb if args.nir2rgb else None
    if rgb is not None and nir is not None and pred.mask is not None and (truth is not None or nir2rgb is not None):
        render_panel(out_dir / f"{name}_panel.png", rgb, nir, pred.rgb, pred.mask, truth, nir2rgb)
    print(f"wrote predictions for {name} -> {out_dir}")
    return EXIT_OK


def cmd_eval(cfg: PipelineConfig, args) -> int:
    from .evalsuite import evaluate_dataset, summarize, write_report
    from .mcgan import load_checkpoint, predict

    reports = cfg.paths.resolve("reports")
    root = cfg.paths.resolve("dataset_root")
    _, records = read_manifest(root)
    ckpt_path = _latest_checkpoint(cfg, args.checkpoint)
    reports.mkdir(parents=True, exist_ok=True)
    cfg.dump(reports / RESOLVED_NAME)
    if args.dry_run:
        return EXIT_OK
    if not records:
        logger.warning("dataset is empty; writing an empty report")
        write_report(reports / "report.jsonl", [])
        return EXIT_OK
    if args.ids:
        wanted = set(args.ids.split(","))
        records = [r for r in records if r.group_id in wanted]
    ckpt = load_checkpoint(ckpt_path)

    def predictor(imgs: dict[str, BandImage]):
        pred = predict(ckpt, cloudy_rgb=imgs["cloudy_rgb"], nir=imgs["nir"])
        return pred.rgb, pred.mask_alpha

    results = evaluate_dataset(root, records, predictor, reports / "panels")
    write_report(reports / "report.jsonl", results)
    print(json.dumps(summarize(results)))
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "sample": cmd_sample, "train": cmd_train, "infer": cmd_infer, "eval": cmd_eval}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML pipeline config")
    common.add_argument("--seed", type=int, help="override every seed in the config")
    common.add_argument("--out", help="base output directory (paths.out)")
    common.add_argument("--dry-run", action="store_true", help="validate and echo the config only")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="cloudremoval", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[common], help="synthesize cloudy/clean training groups")
    p = sub.add_parser("sample", parents=[common], help="t-SNE grid-uniform sample selection")
    p.add_argument("--k", type=int, help="number of groups to select")
    p = sub.add_parser("train", parents=[common], help="train the conditional GAN")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--resume", help="checkpoint to resume from")
    p = sub.add_parser("infer", parents=[common], help="remove clouds from tiles")
    p.add_argument("--checkpoint")
    p.add_argument("--input", help="group directory with cloudy_rgb.png and nir.png")
    p.add_argument("--rgb")
    p.add_argument("--nir")
    p.add_argument("--nir2rgb", help="NIR-only baseline checkpoint for the real-cloud panel")
    p = sub.add_parser("eval", parents=[common], help="score a checkpoint on a dataset")
    p.add_argument("--checkpoint")
    p.add_argument("--ids", help="comma-separated group ids")
    return parser


def resolve_config(args) -> PipelineConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.set_seed(args.seed)
    if args.out:
        cfg.paths.out = args.out
    if getattr(args, "k", None) is not None:
        cfg.embed.sample_count = args.k
    if getattr(args, "epochs", None) is not None:
        cfg.train.epochs = args.epochs
    if getattr(args, "batch_size", None) is not None:
        cfg.train.batch_size = args.batch_size
    cfg.validate()
    # echo explicit per-channel L1 weights rather than null
    cfg.train.channel_weights = cfg.train.resolved_channel_weights()
    return cfg


def main(argv: list[str] | None = None) -> int:
    from .mcgan import BandMismatch, DatasetError, TrainingDiverged

    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        logger.error("config error: %s", exc)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        logger.error("path error: %s", exc)
        return EXIT_PATH
    except (RasterError, DatasetError, BandMismatch) as exc:
        logger.error("data error: %s", exc)
        return EXIT_DATA
    except TrainingDiverged as exc:
        logger.error("training diverged: %s", exc)
        return EXIT_TRAINING
    except ValueError as exc:
        logger.error("invalid input: %s", exc)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
