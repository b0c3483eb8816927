"""Command-line entry point: ``nightadapt {discover,train,eval,attributes,plot-features}``."""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from nightadapt import io
from nightadapt.errors import ConfigError, DataFormatError, EmptyTrackError

log = logging.getLogger("nightadapt")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_RUNTIME = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _config(path) -> io.RunConfig:
    return io.load_run_config(path) if path else io.parse_run_config({})


# -- discover -------------------------------------------------------------------

def cmd_discover(args) -> int:
    from nightadapt.discovery import crop_search, crop_template, discover_track
    from nightadapt.imaging import save_image

    cfg = _config(args.config).discovery
    layout = io.DatasetLayout(args.data, split="train_unlabeled")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name in layout.sequence_names():
        seq = io.load_sequence(layout, name)
        frames = [seq.frame(i) for i in range(len(seq))]
        try:
            result = discover_track(frames, cfg)
        except EmptyTrackError:
            log.warning("%s: no salient object found, skipped", name)
            continue
        io.write_track_csv(out / f"{name}.csv", result.track)
        for i, box in enumerate(result.track.boxes):
            if box is None:
                continue
            save_image(out / name / f"{i:06d}_z.png", crop_template(frames[i], box, cfg))
            save_image(out / name / f"{i:06d}_x.png", crop_search(frames[i], box, cfg)[0])
        log.info("%s: %d/%d frames tracked, objective %.4f", name, len(result.track.present()),
                 len(seq), result.objective)
    return EXIT_OK


# -- train ----------------------------------------------------------------------

def cmd_train(args) -> int:
    from nightadapt.experiment import discovered_targets, random_targets
    from nightadapt.model import SiameseNet, build_discriminator
    from nightadapt.training import PairSampler, Trainer, seed_everything

    started = io.now_iso()
    run = _config(args.config)
    model_cfg = run.model
    train_cfg = replace(run.train, seed=run.seed)
    if args.seed is not None:
        train_cfg = replace(train_cfg, seed=args.seed)
    if args.no_da:
        train_cfg = replace(train_cfg, use_da=False)
    if args.no_bridge:
        model_cfg = replace(model_cfg, use_bridge=False)
    if args.epochs is not None:
        train_cfg = replace(train_cfg, epochs=args.epochs)

    out = Path(args.out)
    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)

    source = io.load_dataset(io.DatasetLayout(args.source, split="test_labeled"))
    target_seqs = io.load_dataset(io.DatasetLayout(args.target, split="train_unlabeled"))
    if args.random_crop:
        targets = random_targets(target_seqs)
    else:
        targets = discovered_targets(target_seqs, run.discovery)

    rng = seed_everything(train_cfg.seed)
    net = SiameseNet(model_cfg)
    if args.init:
        kind, init_net, _, _ = io.load_checkpoint(args.init)
        if kind != "network":
            raise DataFormatError("--init needs a network checkpoint")
        incompatible = net.load_state_dict(init_net.state_dict(), strict=False)
        if incompatible.unexpected_keys:
            log.info("ignoring %d initial parameters absent from this model", len(incompatible.unexpected_keys))
    disc = build_discriminator(model_cfg) if train_cfg.use_da else None
    trainer = Trainer(net, disc, train_cfg)
    sampler = PairSampler(source, targets, run.discovery, train_cfg, rng)

    def checkpoint(epoch):
        io.save_checkpoint(ckpt_dir / f"epoch_{epoch:03d}.pt", net, model_cfg, disc)

    trainer.fit(sampler, log_path=out / "losses.csv", on_epoch_end=checkpoint)
    final = ckpt_dir / f"epoch_{train_cfg.epochs:03d}.pt"
    config_snapshot = run.to_dict()
    config_snapshot["model"] = model_cfg.to_dict()
    config_snapshot["train"] = train_cfg.to_dict()
    config_snapshot["flags"] = {"no_da": args.no_da, "random_crop": args.random_crop,
                                "no_bridge": args.no_bridge, "init": str(args.init) if args.init else None}
    io.write_manifest(out, config_snapshot, train_cfg.seed,
                      {"losses": "losses.csv", "checkpoints": "checkpoints", "final": str(final.relative_to(out))},
                      started)
    return EXIT_OK


# -- eval -----------------------------------------------------------------------

def _tracker_factory(checkpoint, crop):
    from nightadapt.evaluation import OracleTracker, SiameseTracker

    kind, net, _, archive = io.load_checkpoint(checkpoint)
    if kind == "oracle":
        return "oracle", lambda seq: OracleTracker(seq.ground_truth)
    name = archive.get("extra", {}).get("name") or Path(checkpoint).stem
    crop = replace(crop, template_size=net.config.template_size, search_size=net.config.search_size)
    return name, lambda seq: SiameseTracker(net, crop)


def cmd_eval(args) -> int:
    from nightadapt import evaluation as ev

    run = _config(args.config)
    sequences = io.load_dataset(io.DatasetLayout(args.data, split="test_labeled"))
    subset = "all"
    if args.subset == "long-term":
        sequences = ev.longterm_subset(sequences)
        subset = "long-term"
    attr_sets = {}
    for seq in sequences:
        computed = ev.label_attributes(seq, args.iv_threshold).labels
        attr_sets[seq.name] = set(seq.attributes) | set(computed)
    if args.attribute:
        sequences = [s for s in sequences if args.attribute in attr_sets[s.name]]
        subset = args.attribute if subset == "all" else f"{subset}+{args.attribute}"
    if not sequences:
        raise DataFormatError("no sequences left to evaluate")

    name, factory = _tracker_factory(args.checkpoint, run.discovery)
    out = Path(args.out)
    results = []
    for seq in sequences:
        res = ev.run_ope(seq, factory(seq), name)
        io.write_result_csv(out / "results" / name / f"{seq.name}.csv", res.boxes)
        results.append(res)

    rows = []
    overall = ev.score(results, sequences)
    rows.append([name, subset, overall.precision, overall.norm_precision, overall.success])
    for tag in sorted(set().union(*(attr_sets[s.name] for s in sequences))):
        idx = [i for i, s in enumerate(sequences) if tag in attr_sets[s.name]]
        sc = ev.score([results[i] for i in idx], [sequences[i] for i in idx])
        rows.append([name, f"{subset}/{tag}" if subset == "all" else tag, sc.precision, sc.norm_precision, sc.success])
    io.write_csv(out / "report.csv", ["tracker", "subset", "precision", "norm_precision", "success"],
                 [[r[0], r[1], *(repr(float(v)) for v in r[2:])] for r in rows])

    pred = np.concatenate([r.boxes for r in results])
    gt = np.concatenate([s.gt_array() for s in sequences])
    curves = []
    for metric, thresholds, values in (
        ("precision", ev.PRECISION_CURVE_THRESHOLDS, ev.precision_curve(pred, gt)),
        ("norm_precision", ev.NORM_PRECISION_CURVE_THRESHOLDS, ev.normalized_precision_curve(pred, gt)),
        ("success", ev.SUCCESS_THRESHOLDS, ev.success_curve(pred, gt)),
    ):
        curves += [[name, metric, f"{t:g}", repr(float(v))] for t, v in zip(thresholds, values)]
    io.write_csv(out / "curves.csv", ["tracker", "metric", "threshold", "value"], curves)
    print(f"{name} [{subset}] precision={overall.precision:.3f} "
          f"norm_precision={overall.norm_precision:.3f} success={overall.success:.3f}")
    return EXIT_OK


# -- attributes -----------------------------------------------------------------

def cmd_attributes(args) -> int:
    from nightadapt.evaluation import label_attributes

    sequences = io.load_dataset(io.DatasetLayout(args.data, split="test_labeled"))
    rows = []
    for seq in sequences:
        rep = label_attributes(seq, args.iv_threshold)
        labels = sorted(set(rep.labels) | set(seq.attributes))
        rows.append([seq.name, len(seq), repr(rep.ambient_intensity), repr(rep.max_difference),
                     args.iv_threshold, ";".join(labels)])
    io.write_csv(args.out, ["sequence", "frames", "ambient_intensity", "max_difference", "iv_threshold", "labels"], rows)
    return EXIT_OK


# -- plot-features ----------------------------------------------------------------

def _anchor_box(seq, crop):
    from nightadapt.boxes import BoundingBox
    from nightadapt.discovery import discover_track

    if seq.ground_truth is not None:
        return seq.ground_truth[0]
    frames = [seq.frame(i) for i in range(min(len(seq), 30))]
    try:
        track = discover_track(frames, crop).track
        return track.boxes[track.present()[0]]
    except (EmptyTrackError, IndexError):
        h, w = seq.frame(0).shape[:2]
        return BoundingBox(w / 4, h / 4, w / 2, h / 2)


@torch.no_grad()
def cmd_plot_features(args) -> int:
    from nightadapt.discovery import crop_search
    from nightadapt.evaluation import project_features_2d

    kind, net, _, _ = io.load_checkpoint(args.checkpoint)
    if kind != "network":
        raise DataFormatError("plot-features needs a network checkpoint")
    net.eval()
    crop = replace(_config(args.config).discovery, template_size=net.config.template_size,
                   search_size=net.config.search_size)
    patches, tags, names = [], [], []
    for domain, root in (("day", args.data_day), ("night", args.data_night)):
        layout = io.DatasetLayout(root, split="train_unlabeled")
        for name in layout.sequence_names()[: args.max_sequences]:
            seq = io.load_sequence(layout, name)
            patch, _ = crop_search(seq.frame(0), _anchor_box(seq, crop), crop)
            patches.append(patch)
            tags.append(domain)
            names.append(name)
    x = torch.from_numpy(np.stack(patches).astype(np.float32)).permute(0, 3, 1, 2)
    backbone = net.features(x)
    stages = [("backbone", backbone)]
    if net.bridge is not None:
        stages.append(("bridged", net.bridged(backbone)))
    rows = []
    for stage, feats in stages:
        points, _ = project_features_2d(list(feats.numpy()), tags)
        rows += [[stage, t, n, repr(float(p[0])), repr(float(p[1]))] for t, n, p in zip(tags, names, points)]
    io.write_csv(args.out, ["stage", "domain", "sequence", "x", "y"], rows)
    return EXIT_OK


# -- entry point ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="nightadapt", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser, required=True)

    d = sub.add_parser("discover", help="discover object tracks in unlabeled videos and crop patches")
    d.add_argument("--data", required=True)
    d.add_argument("--out", required=True)
    d.add_argument("--config")
    d.set_defaults(func=cmd_discover)

    t = sub.add_parser("train", help="adversarial day-to-night training")
    t.add_argument("--source", required=True, help="labeled daytime dataset root")
    t.add_argument("--target", required=True, help="unlabeled nighttime dataset root")
    t.add_argument("--config")
    t.add_argument("--out", required=True, help="run directory")
    t.add_argument("--init", help="checkpoint to start from")
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--no-da", action="store_true", help="source-only training, no discriminator")
    t.add_argument("--random-crop", action="store_true", help="random target crops instead of object discovery")
    t.add_argument("--no-bridge", action="store_true", help="drop the bridging layer")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="one-pass evaluation")
    e.add_argument("--data", required=True)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--config")
    e.add_argument("--subset", choices=["all", "long-term"], default="all")
    e.add_argument("--attribute")
    e.add_argument("--iv-threshold", type=float, default=30.0)
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("attributes", help="illumination attributes of a labeled dataset")
    a.add_argument("--data", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--iv-threshold", type=float, default=30.0)
    a.set_defaults(func=cmd_attributes)

    f = sub.add_parser("plot-features", help="2-D projection of day/night features")
    f.add_argument("--checkpoint", required=True)
    f.add_argument("--data-day", required=True)
    f.add_argument("--data-night", required=True)
    f.add_argument("--out", required=True)
    f.add_argument("--config")
    f.add_argument("--max-sequences", type=int, default=200)
    f.set_defaults(func=cmd_plot_features)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        key = f" [{exc.key}]" if exc.key else ""
        print(f"config error{key}: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (DataFormatError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:
        log.debug("runtime failure", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
