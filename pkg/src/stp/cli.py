"""Command-line entry points: ``stp {pretrain,probe,bc,attention,synth-data}``.

Every command writes into the run directory given by ``out``::

    config.echo   resolved configuration, one key=value per line
    losses.csv    step,total,spatial,temporal,lr  (pretrain)
    ckpt.stpc     model + optimizer archive       (pretrain)
    report.txt    command summary
"""

from __future__ import annotations

import argparse
import csv
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .attention import attention_heatmap, overlay
from .checkpoint import CheckpointError, checkpoint_meta, load_checkpoint, save_checkpoint
from .config import ENV_PREFIX, ConfigError, RunConfig, resolve
from .data import Manifest, PixelStats, SpriteParams, channel_stats, export_clip, ingest_frames, \
    read_image, synth_dataset, synth_motion_pairs, write_image
from .downstream import EnvConfig, FrozenEncoderAgent, MLPPolicy, PolicyConfig, ToyEnv, \
    bc_train, collect_demos, load_demos, motion_probe, rollout_eval, save_demos
from .model import STPModel
from .training import AdamW, TrainingDiverged, pretrain

CSV_HEADER = ["step", "total", "spatial", "temporal", "lr"]
EXIT_CODES = {"config": 2, "checkpoint": 3, "data": 4, "diverged": 5, "io": 6, "invalid": 7}


class DataError(ValueError):
    pass


def _run_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.echo").write_text(cfg.echo())
    return out


def _clips(cfg: RunConfig):
    if cfg.data == "synthetic":
        clips = synth_dataset(cfg.data_seed, cfg.n_clips)
    else:
        src = Path(cfg.data)
        if not src.is_dir():
            raise DataError(f"data source {src} is not a directory")
        try:
            clips = ingest_frames(src)
        except ValueError as exc:
            raise DataError(str(exc)) from exc
    if not clips:
        raise DataError(f"data source {cfg.data!r} contains no clips")
    return clips


def _load_model(cfg: RunConfig) -> tuple[STPModel, PixelStats | None]:
    """Model weights plus the pixel statistics the encoder was trained with."""
    if not cfg.checkpoint:
        raise ConfigError("this command needs checkpoint=<path>")
    model = STPModel(cfg.model_config(), seed=cfg.seed)
    load_checkpoint(cfg.checkpoint, model, digest=cfg.digest(), force=cfg.force)
    meta = checkpoint_meta(cfg.checkpoint)
    stats = None
    if "pixel_mean" in meta:
        stats = PixelStats(tuple(meta["pixel_mean"].tolist()), tuple(meta["pixel_std"].tolist()))
    return model, stats


def _write_report(out: Path, lines: list[str]) -> None:
    text = "\n".join(lines) + "\n"
    (out / "report.txt").write_text(text)
    sys.stdout.write(text)


def cmd_pretrain(cfg: RunConfig) -> int:
    out = _run_dir(cfg)
    clips = _clips(cfg)
    stats = channel_stats(clips)
    tcfg = cfg.train_config()
    model = STPModel(cfg.model_config(), seed=cfg.seed)
    opt = AdamW(model.named_parameters(), tcfg)
    start = 0
    if cfg.checkpoint:
        start = load_checkpoint(cfg.checkpoint, model, opt, digest=cfg.digest(), force=cfg.force)
    mode = "a" if start and (out / "losses.csv").exists() else "w"
    with open(out / "losses.csv", mode, newline="") as fh:
        writer = csv.writer(fh)
        if mode == "w":
            writer.writerow(CSV_HEADER)

        def log(rec):
            writer.writerow([rec.step, repr(rec.total), repr(rec.spatial), repr(rec.temporal),
                             repr(rec.lr)])

        records = pretrain(model, clips, tcfg, opt, start_step=start, stats=stats, on_step=log)
    save_checkpoint(out / "ckpt.stpc", model, opt, step=tcfg.total_steps, digest=cfg.digest(),
                    meta={"pixel_mean": np.array(stats.mean), "pixel_std": np.array(stats.std)})
    last = records[-1] if records else None
    _write_report(out, [
        f"steps={tcfg.total_steps}",
        f"resumed_from={start}",
        f"final_total={last.total if last else float('nan')}",
        f"digest={cfg.digest():016x}",
        f"pixel_mean={','.join(map(str, stats.mean))}",
        f"pixel_std={','.join(map(str, stats.std))}",
    ])
    return 0


def cmd_probe(cfg: RunConfig) -> int:
    out = _run_dir(cfg)
    model, stats = _load_model(cfg)
    pairs, labels = synth_motion_pairs(np.random.default_rng([cfg.probe_seed, 99]), cfg.probe_pairs)
    baseline = STPModel(cfg.model_config(), seed=cfg.seed).encoder
    acc = motion_probe(model.encoder, pairs, labels, stats, seed=cfg.probe_seed)
    acc0 = motion_probe(baseline, pairs, labels, stats, seed=cfg.probe_seed)
    _write_report(out, [f"probe_accuracy_pretrained={acc:.4f}",
                        f"probe_accuracy_random_init={acc0:.4f}",
                        f"pairs={len(labels)}"])
    return 0


def cmd_bc(cfg: RunConfig) -> int:
    out = _run_dir(cfg)
    model, stats = _load_model(cfg)
    env_cfg = EnvConfig(image_size=model.cfg.encoder.image_size,
                        channels=model.cfg.encoder.channels)
    if cfg.demos:
        try:
            demos = load_demos(cfg.demos)
        except (OSError, CheckpointError) as exc:
            raise DataError(f"cannot read demos {cfg.demos}: {exc}") from exc
    else:
        demos = collect_demos(cfg.n_demos, seed=cfg.seed, cfg=env_cfg)
        save_demos(out / "demos.stpc", demos)
    if not demos:
        raise DataError("demo set is empty")
    pcfg = PolicyConfig(feature_dim=model.cfg.encoder.dim, history=cfg.history, lr=cfg.bc_lr,
                        epochs=cfg.bc_epochs, seed=cfg.seed)
    policy = MLPPolicy(pcfg)
    losses = bc_train(policy, demos, model.encoder, stats)
    env = ToyEnv(env_cfg)
    agent = FrozenEncoderAgent(model.encoder, policy, stats)
    lines = [f"demos={len(demos)}", f"final_bc_loss={losses[-1]:.6f}"]
    rates = []
    for base in cfg.seeds():
        rate = rollout_eval(agent, env, cfg.episodes, base)
        rates.append(rate)
        lines.append(f"success_rate[base_seed={base}]={rate:.4f}")
    lines.append(f"success_rate_mean={float(np.mean(rates)):.4f}")
    _write_report(out, lines)
    return 0


def cmd_attention(cfg: RunConfig) -> int:
    out = _run_dir(cfg)
    if not cfg.image:
        raise ConfigError("attention needs image=<path>")
    model, stats = _load_model(cfg)
    try:
        image = read_image(Path(cfg.image))
    except OSError as exc:
        raise DataError(f"cannot read image {cfg.image}: {exc}") from exc
    channels = model.cfg.encoder.channels
    try:
        heat = attention_heatmap(model.encoder, image[:channels], stats)
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    write_image(out / "attention.png", overlay(image, heat.upsampled))
    write_image(out / "attention_map.png", heat.upsampled[None])
    gh, gw = heat.grid.shape
    _write_report(out, [f"grid={gh}x{gw}", "overlay=attention.png", "map=attention_map.png"])
    return 0


def cmd_synth_data(cfg: RunConfig) -> int:
    out = _run_dir(cfg)
    manifest = Manifest(cfg.data_seed, cfg.n_clips, SpriteParams())
    manifest.write(out / "manifest.txt")
    for i, clip in enumerate(manifest.clips()):
        export_clip(clip, out / "clips" / f"clip_{i:05d}")
    _write_report(out, [f"clips={cfg.n_clips}", f"frames_dir={out / 'clips'}"])
    return 0


COMMANDS = {
    "pretrain": cmd_pretrain,
    "probe": cmd_probe,
    "bc": cmd_bc,
    "attention": cmd_attention,
    "synth-data": cmd_synth_data,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stp", description="Masked current/future frame pre-training toolkit.",
        epilog=f"Any key may also be set with an environment variable {ENV_PREFIX}<KEY>.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="key=value configuration file")
        for f in fields(RunConfig):
            p.add_argument(f"--{f.name.replace('_', '-')}", dest=f.name, default=None,
                           metavar=f.name.upper())
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    flags = {k: v for k, v in vars(args).items() if k not in ("command", "config") and v is not None}
    try:
        cfg = resolve(args.config, flags)
        with threadpool_limits(cfg.threads):
            return COMMANDS[args.command](cfg)
    except ConfigError as exc:
        category, msg = "config", exc
    except CheckpointError as exc:
        category, msg = "checkpoint", exc
    except DataError as exc:
        category, msg = "data", exc
    except TrainingDiverged as exc:
        category, msg = "diverged", exc
    except OSError as exc:
        category, msg = "io", exc
    except ValueError as exc:
        category, msg = "invalid", exc
    print(f"error: {category}: {str(msg).splitlines()[0] if str(msg) else type(msg).__name__}",
          file=sys.stderr)
    return EXIT_CODES[category]


if __name__ == "__main__":
    sys.exit(main())
