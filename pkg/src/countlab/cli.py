"""Command-line entry point.

Subcommands: gen-digits, gen-peds, train, eval, probe, viz.
Global flags: --config, --seed, --out, --threads, --task.
Exit codes: 0 success, 1 usage/config error, 2 data error,
3 numerical divergence, 4 io error.

Numpy is imported lazily so --threads can cap the BLAS worker count before
any thread pool exists; --threads 1 is the byte-reproducibility reference.
"""

import argparse
import json
import os
import sys
from pathlib import Path


def _set_threads(argv):
    threads = "1"
    for i, arg in enumerate(argv):
        if arg == "--threads" and i + 1 < len(argv):
            threads = argv[i + 1]
        elif arg.startswith("--threads="):
            threads = arg.split("=", 1)[1]
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, threads)


def build_parser():
    parser = argparse.ArgumentParser(prog="countlab")
    parser.add_argument("--config", help="JSON config file (strict schema)")
    parser.add_argument("--seed", type=int, help="master seed override")
    parser.add_argument("--out", help="output directory override")
    parser.add_argument("--threads", type=int, default=1,
                        help="worker cap; 1 is the reproducibility reference")
    parser.add_argument("--task", choices=["digits", "pedestrians"])
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-digits", help="generate collage + single-digit shards")
    g.add_argument("--mnist-dir", help="directory with an IDX image/label pair "
                                       "(synthesized from sklearn digits if omitted)")

    p = sub.add_parser("gen-peds", help="generate pedestrian scene shards")
    p.add_argument("--frames-dir", help="directory of PGM frames (procedural "
                                        "sprites if omitted)")
    p.add_argument("--roi", help="ROI mask PGM")

    t = sub.add_parser("train", help="train a counting network")
    t.add_argument("--data-dir", required=True,
                   help="directory holding train.cnts / test.cnts")
    t.add_argument("--resume", help="checkpoint to resume from")

    e = sub.add_parser("eval", help="evaluate a checkpoint on a shard")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True, help="shard file")

    pr = sub.add_parser("probe", help="Table-style SVM probes over activations")
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("--data-dir", required=True,
                    help="directory holding singles_train.cnts / singles_test.cnts")

    v = sub.add_parser("viz", help="hypercolumn localization overlays")
    v.add_argument("--checkpoint", required=True)
    v.add_argument("--data", required=True, help="collage/scene shard for the bags")
    return parser


def _load_config(args):
    from .config import parse_config
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["paths.out"] = args.out
    if args.task is not None:
        overrides["task"] = args.task
    if args.threads is not None:
        overrides["threads"] = args.threads
    return parse_config(args.config, overrides)


def _require(path, what):
    from .errors import ConfigError
    if path is None or not Path(path).exists():
        raise ConfigError(f"missing {what}: {path!r}")
    return Path(path)


def _outdir(cfg):
    out = Path(cfg.paths.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_gen_digits(args, cfg):
    from . import data_digits as dd
    from .shards import write_shard
    out = _outdir(cfg)
    mnist_dir = args.mnist_dir or cfg.paths.mnist_dir
    if mnist_dir is None:
        mnist_dir = out / "mnist"
        dd.make_digit_idx(mnist_dir, seed=cfg.seed)
        print(f"gen-digits: synthesized digit bank under {mnist_dir}")
    mnist_dir = Path(mnist_dir)
    mnist = dd.load_mnist(_require(mnist_dir / "train-images-idx3-ubyte", "IDX images"),
                          _require(mnist_dir / "train-labels-idx1-ubyte", "IDX labels"))
    ccfg = dd.CollageConfig(max_digits=cfg.gen.max_digits,
                            min_center_dist=cfg.gen.min_center_dist)
    jobs = [("train.cnts", cfg.seed, cfg.gen.n_train),
            ("test.cnts", cfg.seed + 1, cfg.gen.n_test)]
    for name, seed, n in jobs:
        shard = dd.generate_collage_set(seed, ccfg, mnist, n)
        write_shard(shard, out / name)
        print(f"gen-digits: wrote {n} collages to {out / name}")
    singles = [("singles_train.cnts", cfg.seed + 2, cfg.gen.n_singles_train),
               ("singles_test.cnts", cfg.seed + 3, cfg.gen.n_singles_test)]
    for name, seed, n in singles:
        shard = dd.generate_single_digit_set(seed, mnist, n)
        write_shard(shard, out / name)
        print(f"gen-digits: wrote {n} single digits to {out / name}")
    return 0


def cmd_gen_peds(args, cfg):
    from . import data_peds as dp
    from .shards import write_shard
    out = _outdir(cfg)
    frames_dir = args.frames_dir or cfg.paths.frames_dir
    scfg = dp.PedSceneConfig(max_count=cfg.gen.max_count, feather=cfg.gen.feather,
                             scene_h=cfg.gen.scene_h, scene_w=cfg.gen.scene_w)
    if frames_dir is not None:
        frames = dp.load_frame_dir(_require(frames_dir, "frames directory"))
        bg = dp.median_background(frames, cfg.gen.background_sigma)
        sprites = dp.extract_sprites(frames, bg, cfg.gen.subtract_threshold,
                                     cfg.gen.morph_radius)
        scfg.scene_h, scfg.scene_w = bg.background.shape
        print(f"gen-peds: extracted {len(sprites)} sprites from {len(frames)} frames")
    else:
        sprites = dp.procedural_sprites(cfg.seed, cfg.gen.n_sprites)
        bg = dp.flat_background(scfg.scene_h, scfg.scene_w)
        print(f"gen-peds: procedural library of {len(sprites)} sprites")
    roi = args.roi or cfg.paths.roi
    if roi is not None:
        scfg.roi_mask = dp.load_roi(_require(roi, "ROI mask"))
    for name, seed, n in [("train.cnts", cfg.seed, cfg.gen.n_train),
                          ("test.cnts", cfg.seed + 1, cfg.gen.n_test)]:
        shard = dp.generate_scene_set(seed, scfg, sprites, bg, n)
        write_shard(shard, out / name)
        print(f"gen-peds: wrote {n} scenes to {out / name}")
    return 0


def _arch_for(cfg, shard):
    from . import model
    _, c, h, w = shard.images.shape
    if cfg.task == "digits":
        spec = model.digits_arch()
    else:
        spec = model.pedestrians_arch(h, w)
    spec.input_shape = (c, h, w)
    return spec


def cmd_train(args, cfg):
    from . import model, nn
    from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
    from .shards import read_shard
    out = _outdir(cfg)
    data_dir = _require(args.data_dir, "data directory")
    train_set = read_shard(_require(data_dir / "train.cnts", "training shard"))
    test_path = data_dir / "test.cnts"
    eval_set = read_shard(test_path) if test_path.exists() else None
    tcfg = model.TrainConfig(
        iterations=cfg.train.iterations, batch_size=cfg.train.batch_size,
        lr=cfg.train.lr, lr_halving_steps=cfg.train.lr_halving_steps,
        momentum=cfg.train.momentum, weight_decay=cfg.train.weight_decay,
        seed=cfg.seed, eval_interval=cfg.train.eval_interval,
        eval_subset=cfg.train.eval_subset)
    state = model.TrainState()
    if args.resume:
        ck = load_checkpoint(_require(args.resume, "resume checkpoint"))
        net = ck.net
        state.velocity = ck.velocity
        state.iteration = ck.iteration
    else:
        spec = _arch_for(cfg, train_set)
        net = model.build_net(spec, cfg.seed, use_lrn=cfg.train.use_lrn)
    state = model.train(net, train_set, tcfg, eval_set, state,
                        log=lambda msg: print(f"train: {msg}"))
    ckpt = Checkpoint(net, state.velocity, state.iteration,
                      {"master_seed": cfg.seed, "iteration": state.iteration})
    save_checkpoint(ckpt, out / "checkpoint.cntc")
    model.export_history(state, out / "history.csv")
    print(f"train: {state.iteration} iterations, checkpoint + history under {out}")
    return 0


def cmd_eval(args, cfg):
    from . import model
    from .checkpoint import load_checkpoint
    from .shards import read_shard
    out = _outdir(cfg)
    net = load_checkpoint(_require(args.checkpoint, "checkpoint")).net
    dataset = read_shard(_require(args.data, "shard"))
    metrics = model.evaluate(net, dataset)
    model.export_spread(metrics, out / "spread.csv")
    with open(out / "metrics.json", "w") as f:
        json.dump({"accuracy": metrics.accuracy, "mae": metrics.mae,
                   "mse": metrics.mse}, f, indent=2, sort_keys=True)
    print(f"eval: accuracy {metrics.accuracy:.4f}  mae {metrics.mae:.3f}  "
          f"mse {metrics.mse:.3f} over {len(dataset)} samples")
    return 0


def cmd_probe(args, cfg):
    import numpy as np

    from . import probes
    from .checkpoint import load_checkpoint
    from .shards import read_shard
    out = _outdir(cfg)
    net = load_checkpoint(_require(args.checkpoint, "checkpoint")).net
    data_dir = Path(args.data_dir)
    tr = read_shard(_require(data_dir / "singles_train.cnts", "singles train shard"))
    te = read_shard(_require(data_dir / "singles_test.cnts", "singles test shard"))
    pcfg = probes.ProbeConfig(tuple(cfg.probe.c_grid), tuple(cfg.probe.gamma_grid),
                              cfg.probe.folds, cfg.probe.kernel)
    ntr = min(cfg.probe.n_train, len(tr))
    nte = min(cfg.probe.n_test, len(te))
    results = probes.probe_report(
        net, tr.images_f32(np.arange(ntr)), tr.labels[:ntr].astype(np.int64),
        te.images_f32(np.arange(nte)), te.labels[:nte].astype(np.int64),
        cfg=pcfg, seed=cfg.seed, max_dims=cfg.probe.max_dims,
        log=lambda msg: print(f"probe: {msg}"))
    probes.write_probe_table(results, out / "probe_table.csv")
    for r in results:
        if r.task == "digits" and r.tap == "fc1" and r.confusion is not None:
            np.savetxt(out / "confusion_fc1.csv", r.confusion, fmt="%d", delimiter=",")
            frac = probes.superclass_confusion_fraction(r.confusion)
            if frac is not None:
                print(f"probe: superclass confusion fraction at fc1: {frac:.3f}")
    print(f"probe: table written to {out / 'probe_table.csv'}")
    return 0


def cmd_viz(args, cfg):
    import numpy as np

    from . import viz
    from .checkpoint import load_checkpoint
    from .shards import read_shard
    out = _outdir(cfg)
    net = load_checkpoint(_require(args.checkpoint, "checkpoint")).net
    data = read_shard(_require(args.data, "shard"))
    labels = data.labels.astype(np.int64)
    pos_idx = np.flatnonzero(labels >= 1)[:cfg.viz.n_positive]
    neg_idx = np.flatnonzero(labels == 0)[:cfg.viz.n_negative]
    if len(pos_idx) == 0 or len(neg_idx) == 0:
        from .errors import DataError
        raise DataError("viz needs both positive and negative bag images")
    taps = list(cfg.viz.taps)
    stages = []
    prev = None
    for tap in taps:
        pos_fields = [viz.hypercolumns(net, data.images_f32([i])[0], [tap])
                      for i in pos_idx]
        neg_fields = [viz.hypercolumns(net, data.images_f32([i])[0], [tap])
                      for i in neg_idx]
        if prev is None:
            stage = viz.run_stage(tap, pos_fields, neg_fields, cfg.viz.k,
                                  cfg.viz.lam, cfg.seed,
                                  pixels_per_image=cfg.viz.pixels_per_image)
        else:
            stage = viz.refine_layer(prev, tap, pos_fields, neg_fields, cfg.viz.k,
                                     cfg.viz.lam, cfg.seed,
                                     pixels_per_image=cfg.viz.pixels_per_image)
        stages.append(stage)
        prev = stage
        print(f"viz: stage {tap}: {len(stage.selected)} selected words, "
              f"{stage.positive_pixel_fraction():.3f} positive pixel fraction")
    viz.write_stage_report(stages, out / "viz_report.csv")
    final = stages[-1]
    for n, i in enumerate(pos_idx[:cfg.viz.n_overlays]):
        img = data.images_f32([i])[0][0]
        viz.render_overlay(img, final.masks[n].astype(np.float64),
                           out / f"overlay_{int(i):05d}.ppm")
        viz.write_mask(final.masks[n], out / f"mask_{int(i):05d}.pgm")
    print(f"viz: report and overlays under {out}")
    return 0


_COMMANDS = {
    "gen-digits": cmd_gen_digits,
    "gen-peds": cmd_gen_peds,
    "train": cmd_train,
    "eval": cmd_eval,
    "probe": cmd_probe,
    "viz": cmd_viz,
}


def run(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    _set_threads(argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    cfg = _load_config(args)
    return _COMMANDS[args.command](args, cfg)


def main(argv=None):
    from .errors import (ConfigError, DataError, DivergenceError, FormatError)
    try:
        return run(argv)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (DataError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
