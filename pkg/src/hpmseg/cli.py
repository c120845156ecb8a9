"""``hpmseg`` command-line entry point.

Subcommands: gen-data, pretrain, finetune, evaluate, reconstruct, ablate.
Any ``--section.key value`` flag overrides the config file.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys

from . import dataset as ds
from .config import ConfigError, RunConfig, set_key
from .metrics import render_table

log = logging.getLogger("hpmseg")


def _parser():
    p = argparse.ArgumentParser(prog="hpmseg", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, data=True):
        sp.add_argument("--config", help="YAML config file")
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--seed", type=int, help="seed for data, pretraining and fine-tuning")
        sp.add_argument("--force", action="store_true", help="allow a non-empty output dir")
        if data:
            sp.add_argument("--data-dir", required=True, help="dataset directory")

    common(sub.add_parser("gen-data", help="write synthetic phantom dataset"), data=False)

    sp = sub.add_parser("pretrain", help="hard-patch-mining pretraining")
    common(sp)
    sp.add_argument("--resume", help="checkpoint to resume from")
    sp.add_argument("--dry-run", action="store_true", help="run 2 steps and exit")

    sp = sub.add_parser("finetune", help="fine-tune the segmentation network")
    common(sp)
    sp.add_argument("--checkpoint", help="pretraining checkpoint")
    sp.add_argument("--from-scratch", action="store_true", help="random encoder init")
    sp.add_argument("--dry-run", action="store_true", help="run 2 steps and exit")

    sp = sub.add_parser("evaluate", help="evaluate a segmentation checkpoint on the test split")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--split", default="test")

    sp = sub.add_parser("reconstruct", help="write original/masked/reconstructed slices")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--case", help="case id (default: first test case)")

    common(sub.add_parser("ablate", help="three-arm ablation table"))
    return p


def _overrides(extra):
    out = []
    it = iter(extra)
    for tok in it:
        if not tok.startswith("--") or "." not in tok:
            raise ConfigError(f"unrecognized argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, val = key.split("=", 1)
        else:
            try:
                val = next(it)
            except StopIteration:
                raise ConfigError(f"missing value for {tok}") from None
        out.append((key, val))
    return out


def resolve_config(args, extra):
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.data.seed = cfg.pretrain.seed = cfg.finetune.seed = args.seed
    for key, val in _overrides(extra):
        set_key(cfg, key, val)
    return cfg.validate()


def _prepare_out(path, force=False, resume=False):
    if os.path.isdir(path) and os.listdir(path) and not (force or resume):
        raise FileExistsError(f"{path} exists and is not empty (use --force)")
    os.makedirs(path, exist_ok=True)


def _echo(cfg, out, name="config.yaml"):
    cfg.dump(os.path.join(out, name))
    seeds = {"data": cfg.data.seed, "pretrain": cfg.pretrain.seed, "finetune": cfg.finetune.seed}
    with open(os.path.join(out, "seeds.json"), "w") as fh:
        json.dump(seeds, fh, indent=2)


def cmd_gen_data(cfg, args):
    index = ds.generate_dataset(args.out, cfg.data, force=args.force)
    _echo(cfg, args.out, "gen_config.yaml")
    counts = {k: len(v) for k, v in index["split"].items()}
    print(f"wrote {len(index['cases'])} cases to {args.out}: {counts}")
    return 0


def _pretrain_volumes(args, cfg):
    vols = []
    for split in cfg.pretrain.splits:
        vols += [d for d, _ in ds.load_split(args.data_dir, split, cfg.data, with_labels=False)]
    if not vols:
        raise ValueError(f"no pretraining volumes in splits {cfg.pretrain.splits}")
    ds.check_divisible([(v, None) for v in vols], cfg.data.crop, cfg.model.patch_size)
    return vols


def cmd_pretrain(cfg, args):
    from .trainer import Pretrainer

    volumes = _pretrain_volumes(args, cfg)
    _prepare_out(args.out, args.force, bool(args.resume))
    _echo(cfg, args.out)
    trainer = Pretrainer.load(args.resume, cfg) if args.resume else Pretrainer(cfg)
    trainer.fit(
        volumes,
        log_path=os.path.join(args.out, "metrics.jsonl"),
        ckpt_dir=args.out,
        max_steps=2 if args.dry_run else None,
    )
    if args.dry_run:
        trainer.save(os.path.join(args.out, "last.ckpt"))
    print(f"pretraining finished at epoch {trainer.epoch}; checkpoints in {args.out}")
    return 0


def _report(net, args, cfg, split, out, label):
    from .trainer import evaluate

    index = ds.load_index(args.data_dir)
    classes, names = ds.report_classes(index)
    cases = ds.load_split(args.data_dir, split, cfg.data)
    if not cases:
        raise ValueError(f"split {split!r} is empty")
    spacing = ds.case_spacing(args.data_dir, index["split"][split][0])
    report = evaluate(net, cases, classes or range(1, net.num_classes), names, spacing)
    report.to_json(os.path.join(out, "report.json"))
    table = render_table({label: report})
    with open(os.path.join(out, "report.txt"), "w") as fh:
        fh.write(table + "\n")
    print(table)
    return report


def _label(from_scratch):
    return "UNETR" if from_scratch else "UNETR+HPM"


def cmd_finetune(cfg, args):
    from .trainer import build_segmentation_net, finetune, load_encoder_state, save_segmentation

    if not args.checkpoint and not args.from_scratch:
        raise ValueError("finetune needs --checkpoint or --from-scratch")
    state = None
    if args.checkpoint:
        if not os.path.exists(args.checkpoint):
            raise FileNotFoundError(args.checkpoint)
        state, manifest = load_encoder_state(args.checkpoint)
        # encoder geometry comes from the checkpoint; the conv decoder width stays ours
        feature_size = cfg.model.feature_size
        cfg.model = RunConfig.from_dict({"model": manifest["config"]["model"]}).model
        cfg.model.feature_size = feature_size
        cfg.data.crop = manifest["config"]["data"]["crop"]
    index = ds.load_index(args.data_dir)
    K = len(index["class_names"])
    train = ds.load_split(args.data_dir, "train", cfg.data)
    val = ds.load_split(args.data_dir, "val", cfg.data)
    ds.check_divisible(train, cfg.data.crop, cfg.model.patch_size)
    _prepare_out(args.out, args.force)
    _echo(cfg, args.out)
    classes, _ = ds.report_classes(index)
    net = build_segmentation_net(cfg, K, state)
    net, _ = finetune(net, train, cfg, val=val or None, classes=classes,
                      log_path=os.path.join(args.out, "metrics.jsonl"),
                      max_steps=2 if args.dry_run else None)
    save_segmentation(os.path.join(args.out, "seg.ckpt"), net, cfg,
                      {"pretrained": args.checkpoint, "from_scratch": bool(args.from_scratch)})
    _report(net, args, cfg, "test", args.out, _label(not args.checkpoint))
    return 0


def cmd_evaluate(cfg, args):
    from .trainer import load_segmentation

    net, saved, manifest = load_segmentation(args.checkpoint)
    saved.data.clip_lo, saved.data.clip_hi = cfg.data.clip_lo, cfg.data.clip_hi
    _prepare_out(args.out, args.force)
    _echo(saved, args.out)
    _report(net, args, saved, args.split, args.out, _label(manifest.get("from_scratch", False)))
    return 0


def cmd_reconstruct(cfg, args):
    from .masking import MaskSchedule, alpha_at
    from .trainer import Pretrainer
    from .viz import reconstruct_volume, write_slice_strips
    from .volume_io import preprocess, read_volume

    trainer = Pretrainer.load(args.checkpoint)
    tcfg = trainer.cfg
    index = ds.load_index(args.data_dir)
    case = args.case or cfg.eval.case or (index["split"]["test"] or index["cases"])[0]
    v = preprocess(read_volume(os.path.join(args.data_dir, case)), cfg.data.clip_lo, cfg.data.clip_hi)
    crop = tcfg.data.crop
    data = v.data[:crop, :crop, :crop]
    sched = MaskSchedule(tcfg.mask.alpha0, tcfg.mask.alphaT, tcfg.pretrain.epochs, cfg.mask.ratio)
    alpha = alpha_at(sched, sched.total_epochs) if tcfg.mask.guided else 0.0
    masked, recon, vmask, mask = reconstruct_volume(
        trainer.pair.student, data, cfg.mask.ratio, alpha, tcfg.pretrain.seed,
        teacher=trainer.pair.teacher,
    )
    _prepare_out(args.out, args.force)
    _echo(cfg, args.out)
    paths = write_slice_strips(args.out, data, masked, recon, cfg.eval.slices)
    stats = {
        "case": case,
        "mask_ratio": cfg.mask.ratio,
        "alpha": alpha,
        "N": mask.N,
        "masked": mask.num_masked,
        "guided": mask.guided_count,
        "slice_masked_fraction": {
            str(z): float(vmask[:, :, z].mean()) for z in cfg.eval.slices
        },
        "images": [os.path.basename(p) for p in paths],
    }
    with open(os.path.join(args.out, "reconstruction.json"), "w") as fh:
        json.dump(stats, fh, indent=2)
    print(f"wrote {len(paths)} slice images to {args.out}")
    return 0


def cmd_ablate(cfg, args):
    from .trainer import ablate

    index = ds.load_index(args.data_dir)
    K = len(index["class_names"])
    volumes = _pretrain_volumes(args, cfg)
    train = ds.load_split(args.data_dir, "train", cfg.data)
    val = ds.load_split(args.data_dir, "val", cfg.data)
    test = ds.load_split(args.data_dir, "test", cfg.data)
    if not test:
        raise ValueError("ablation needs a non-empty test split")
    _prepare_out(args.out, args.force)
    _echo(cfg, args.out)
    classes, names = ds.report_classes(index)
    spacing = ds.case_spacing(args.data_dir, index["split"]["test"][0])
    result = ablate(volumes, train, test, cfg, K, classes, names, spacing, val=val or None)
    payload = {
        "seed": result.seed,
        "rows": [
            {"components": label, "dsc": rep.averages["dsc"], "hd95": rep.averages["hd95"],
             "report": rep.to_dict()}
            for label, rep in result.rows.items()
        ],
        "pretrain_history": result.pretrain_history,
        "finetune_history": result.finetune_history,
    }
    with open(os.path.join(args.out, "ablation.json"), "w") as fh:
        json.dump(payload, fh, indent=2)
    table = format_ablation(result.table())
    with open(os.path.join(args.out, "ablation.txt"), "w") as fh:
        fh.write(table + "\n")
    print(table)
    return 0


def format_ablation(rows):
    w = max(len("components"), *(len(r[0]) for r in rows))
    lines = [f"{'components'.ljust(w)}  DSC    HD95", "-" * (w + 14)]
    for label, d, h in rows:
        h = "undefined" if math.isnan(h) else f"{h:.2f}"
        lines.append(f"{label.ljust(w)}  {d:.3f}  {h}")
    return "\n".join(lines)


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "evaluate": cmd_evaluate,
    "reconstruct": cmd_reconstruct,
    "ablate": cmd_ablate,
}


def main(argv=None):
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args, extra = _parser().parse_known_args(argv)
    try:
        cfg = resolve_config(args, extra)
        return COMMANDS[args.command](cfg, args)
    except (ConfigError, ValueError, FileExistsError, FileNotFoundError) as exc:
        print(f"hpmseg {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
