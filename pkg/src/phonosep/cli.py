"""Command-line entry point: ``phonosep <subcommand> [flags]``.

Exit status: 0 success, 1 usage error, 2 runtime failure.

The optional ``--config`` file is JSON. Its top-level keys mirror the flags
(``seed``, ``jobs``, ``out``, ``mixture``, ``annotations``, ``model``,
``baseline``, ``variant``, ``mask_override``); flags given on the command
line win. Sections ``unet``, ``train``, ``synth`` and ``split`` hold the
corresponding settings objects. Any other key is an error.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import dsp
from .errors import ConfigError

logger = logging.getLogger("phonosep")

FLAG_KEYS = ("seed", "jobs", "out", "mixture", "annotations", "model", "baseline", "variant", "mask_override")
SECTIONS = ("unet", "train", "synth", "split")


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> Parser:
    common = Parser(add_help=False)
    g = common.add_argument_group("common")
    g.add_argument("--config", metavar="PATH", help="JSON settings file (flags override it)")
    g.add_argument("--seed", type=int, metavar="INT", help="random seed (default 0)")
    g.add_argument("--jobs", type=int, metavar="INT", help="worker processes for per-song work (default 1)")
    g.add_argument("--out", metavar="DIR", help="output directory")
    g.add_argument("--mixture", metavar="PATH", help="mixture WAV file")
    g.add_argument("--annotations", metavar="PATH", help="word annotation JSON file")
    g.add_argument("--model", metavar="PATH", help="model checkpoint")
    g.add_argument("--baseline", metavar="PATH", help="baseline report.jsonl or checkpoint for paired tests")
    g.add_argument("--variant", metavar="NAME", help="model variant, e.g. unet, W_si, W_co, S_s, S_a*")
    g.add_argument("--mask-override", type=float, metavar="FLOAT", help="use a constant mask in [0, 1]")

    parser = Parser(prog="phonosep", description="Phoneme-conditioned singing-voice separation.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True
    p = sub.add_parser("synth-data", parents=[common], help="generate the synthetic corpus")
    p = sub.add_parser("build-sources", parents=[common], help="merge multitrack stems into vocals/accompaniment")
    p.add_argument("profiles", help="voice-probability file ('track_id probability' per line)")
    p.add_argument("tracks", nargs="+", help="track WAV files; the file stem is the track id")
    p = sub.add_parser("split", parents=[common], help="split a manifest by agreement score")
    p.add_argument("manifest")
    p = sub.add_parser("train", parents=[common], help="train a model (resume with --model)")
    p.add_argument("manifests", nargs="+", help="manifests whose records carry train/val split tags")
    sub.add_parser("separate", parents=[common], help="separate one mixture")
    p = sub.add_parser("evaluate", parents=[common], help="BSS and silence metrics over a manifest")
    p.add_argument("manifest")
    p.add_argument("estimates", nargs="?", help="directory with <song_id>/{vocals,accompaniment}.wav; "
                                                "omitted: separate with --model or --mask-override")
    sub.add_parser("count-params", parents=[common], help="parameter table for all variants")
    sub.add_parser("grad-check", parents=[common], help="finite-difference gradient checks")
    return parser


def load_config(path: Optional[str]) -> dict:
    if path is None:
        return {}
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"config {path} must hold a JSON object")
    unknown = set(doc) - set(FLAG_KEYS) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    for s in SECTIONS:
        if s in doc and not isinstance(doc[s], dict):
            raise ConfigError(f"config section {s!r} must be an object")
    return doc


def resolve(args, doc: dict) -> dict:
    opts = {k: doc.get(k) for k in FLAG_KEYS}
    for k in FLAG_KEYS:
        v = getattr(args, k, None)
        if v is not None:
            opts[k] = v
    opts["seed"] = 0 if opts["seed"] is None else int(opts["seed"])
    opts["jobs"] = 1 if opts["jobs"] is None else int(opts["jobs"])
    if opts["jobs"] < 1:
        raise UsageError("--jobs must be >= 1")
    return opts


def _section(doc, name, cls, **overrides):
    fields = dict(doc.get(name, {}))
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(fields) - known
    if unknown:
        raise ConfigError(f"unknown keys in config section {name!r}: {sorted(unknown)}")
    fields.update({k: v for k, v in overrides.items() if v is not None})
    if name == "synth" and "pad_gain" in fields:
        fields["pad_gain"] = tuple(fields["pad_gain"])
    return cls(**fields)


def _require(opts, *keys):
    missing = [k for k in keys if opts.get(k) is None]
    if missing:
        raise UsageError("missing required flag(s): " + ", ".join("--" + k.replace("_", "-") for k in missing))


# -- subcommands -------------------------------------------------------------------
def cmd_synth_data(args, opts, doc):
    from .dataset import SynthConfig, synth_generate

    _require(opts, "out")
    cfg = _section(doc, "synth", SynthConfig, seed=opts["seed"])
    records = synth_generate(cfg, opts["out"], jobs=opts["jobs"])
    counts = {s: sum(r.split == s for r in records) for s in ("train", "val", "test")}
    print(f"wrote {len(records)} songs to {opts['out']} ({counts})")


def cmd_build_sources(args, opts, doc):
    from .dataset import build_sources, read_profiles

    _require(opts, "out")
    tracks = {}
    rate = None
    for path in args.tracks:
        clip = dsp.read_wav(path, resample_to=None)
        if rate is not None and clip.sample_rate != rate:
            raise ValueError(f"{path}: sample rate {clip.sample_rate} differs from {rate}")
        rate = clip.sample_rate
        tracks[Path(path).stem] = clip.samples
    vocals, accomp, mixture = build_sources(tracks, read_profiles(args.profiles))
    out = Path(opts["out"])
    out.mkdir(parents=True, exist_ok=True)
    for name, x in (("vocals", vocals), ("accompaniment", accomp), ("mixture", mixture)):
        dsp.write_wav(out / f"{name}.wav", dsp.AudioClip(x, rate))
    print(f"wrote vocals/accompaniment/mixture to {out}")


def cmd_split(args, opts, doc):
    from .dataset import SplitConfig, read_manifest, split_by_agreement, write_manifest

    _require(opts, "out")
    parts, counts = split_by_agreement(read_manifest(args.manifest), _section(doc, "split", SplitConfig))
    out = Path(opts["out"])
    out.mkdir(parents=True, exist_ok=True)
    for name, recs in parts.items():
        write_manifest(out / f"{name}.jsonl", recs)
    print(" ".join(f"{k}={v}" for k, v in counts.items()))


def _load_split(paths: List[str]):
    from .dataset import load_song, read_manifest

    train, val = [], []
    for p in paths:
        for r in read_manifest(p):
            if r.split == "train":
                train.append(load_song(r))
            elif r.split == "val":
                val.append(load_song(r))
    if not train:
        raise ValueError("no records tagged 'train' in the given manifests")
    return train, val


def cmd_train(args, opts, doc):
    from .training import PatchDataset, TrainConfig, Trainer
    from .unet import SeparationModel, UNetConfig

    _require(opts, "out")
    train_songs, val_songs = _load_split(args.manifests)
    if opts["model"]:
        from .unet import load_model

        model, _, _ = load_model(opts["model"])
        n, m = model.config.n_frames, model.config.n_bins
        trainer = Trainer.resume(opts["model"], PatchDataset(train_songs, n, m),
                                 PatchDataset(val_songs, n, m) if val_songs else None, opts["out"])
    else:
        ucfg = _section(doc, "unet", UNetConfig, seed=opts["seed"])
        if opts["variant"]:
            ucfg = ucfg.with_variant(opts["variant"])
        tcfg = _section(doc, "train", TrainConfig, seed=opts["seed"])
        n, m = ucfg.n_frames, ucfg.n_bins
        trainer = Trainer(SeparationModel(ucfg), PatchDataset(train_songs, n, m),
                          PatchDataset(val_songs, n, m) if val_songs else None, tcfg, opts["out"])

    def log(rec):
        print(f"epoch {rec['epoch']}: train {rec['train_loss']:.6f} val {rec['val_loss']:.6f} lr {rec['lr']:.3g}",
              flush=True)

    trainer.fit(log=log)
    print(f"run directory: {opts['out']}")


def _separate_one(model, mixture_path, annotations_path, mask_override):
    from .phonemes import load_annotations
    from .unet import separate

    mix = dsp.read_wav(mixture_path)
    ann = load_annotations(annotations_path) if annotations_path else None
    return mix, separate(mix, ann, model, mask_override)


def cmd_separate(args, opts, doc):
    from .unet import load_model

    _require(opts, "mixture", "out")
    if opts["mask_override"] is None:
        _require(opts, "model")
    model = None
    if opts["mask_override"] is None:
        model, _, _ = load_model(opts["model"])
        model.eval()
    _, (voc, acc) = _separate_one(model, opts["mixture"], opts["annotations"], opts["mask_override"])
    out = Path(opts["out"])
    out.mkdir(parents=True, exist_ok=True)
    dsp.write_wav(out / "vocals.wav", voc)
    dsp.write_wav(out / "accompaniment.wav", acc)
    print(f"wrote {out / 'vocals.wav'} and {out / 'accompaniment.wav'}")


def _eval_task(task):
    from .evaluation import evaluate_track
    from .unet import load_model

    record, estimates_dir, model_path, mask_override = task
    refs = np.stack([dsp.read_wav(record.vocals).samples, dsp.read_wav(record.accompaniment).samples])
    if estimates_dir is not None:
        d = Path(estimates_dir) / record.song_id
        ests = [dsp.read_wav(d / "vocals.wav").samples, dsp.read_wav(d / "accompaniment.wav").samples]
    else:
        model = None
        if mask_override is None:
            model, _, _ = load_model(model_path)
            model.eval()
        _, (voc, acc) = _separate_one(model, record.mixture, record.annotations or None, mask_override)
        ests = [voc.samples, acc.samples]
    n = refs.shape[1]
    ests = np.stack([np.pad(e[:n], (0, max(0, n - len(e)))) for e in ests])
    return evaluate_track(record.song_id, refs, ests)


def _run_eval(records, estimates, model_path, mask_override, jobs):
    from .evaluation import build_report

    tasks = [(r, estimates, model_path, mask_override) for r in records]
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as pool:
            tracks = list(pool.map(_eval_task, tasks))
    else:
        tracks = [_eval_task(t) for t in tasks]
    return build_report(tracks)


def cmd_evaluate(args, opts, doc):
    from .dataset import read_manifest
    from .evaluation import format_table, read_report, write_report

    _require(opts, "out")
    if args.estimates is None and opts["model"] is None and opts["mask_override"] is None:
        raise UsageError("evaluate needs an estimates directory, --model or --mask-override")
    records = read_manifest(args.manifest)
    report = _run_eval(records, args.estimates, opts["model"], opts["mask_override"], opts["jobs"])
    if opts["baseline"]:
        base = opts["baseline"]
        with open(base, "rb") as fh:
            is_ckpt = fh.read(8) == b"PHSPCKPT"
        baseline = _run_eval(records, None, base, None, opts["jobs"]) if is_ckpt else read_report(base)
        report.compare(baseline)
    txt, jl = write_report(report, opts["out"])
    sys.stdout.write(format_table(report))
    print(f"wrote {txt} and {jl}")


def cmd_count_params(args, opts, doc):
    from .conditioning import MODEL_VARIANTS
    from .unet import SeparationModel, UNetConfig, load_model

    if opts["model"]:
        model, _, _ = load_model(opts["model"])
        for k, v in model.count_parameters().items():
            print(f"{k:<10}{v:>12,d}")
        return
    ucfg = _section(doc, "unet", UNetConfig)
    names = [opts["variant"]] if opts["variant"] else list(MODEL_VARIANTS)
    for name in names:
        if name not in MODEL_VARIANTS:
            raise UsageError(f"unknown variant {name!r}; choose from {', '.join(MODEL_VARIANTS)}")
    base = SeparationModel(ucfg.with_variant("unet"), init="zeros").num_parameters()
    print(f"{'variant':<8}{'conditioning':<14}{'variant/insertion':<22}{'total':>12}{'increment':>12}")
    for name in names:
        cond, var, ins = MODEL_VARIANTS[name]
        counts = SeparationModel(ucfg.with_variant(name), init="zeros").count_parameters()
        detail = f"{var}/{ins}" if cond == "strong" else "-"
        inc = counts["total"] - base
        print(f"{name:<8}{cond:<14}{detail:<22}{counts['total']:>12,d}{inc:>+12,d}")


def cmd_grad_check(args, opts, doc):
    from .gradsuite import check_model, check_ops

    variants = [opts["variant"]] if opts["variant"] else ["unet", "W_si", "W_co", "S_a", "S_s*"]
    reports = check_ops(opts["seed"])
    for v in variants:
        for training in (True, False):
            reports.append(check_model(v, opts["seed"], training=training))
    for r in reports:
        print(r)
    failed = [r.name for r in reports if not r.passed]
    if failed:
        raise RuntimeError(f"gradient check failed for: {', '.join(failed)}")


COMMANDS = {
    "synth-data": cmd_synth_data,
    "build-sources": cmd_build_sources,
    "split": cmd_split,
    "train": cmd_train,
    "separate": cmd_separate,
    "evaluate": cmd_evaluate,
    "count-params": cmd_count_params,
    "grad-check": cmd_grad_check,
}


def main(argv: Optional[List[str]] = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        doc = load_config(args.config)
        opts = resolve(args, doc)
        COMMANDS[args.command](args, opts, doc)
    except (UsageError, ConfigError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except Exception as exc:  # noqa: BLE001 - every other failure is a runtime error
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
