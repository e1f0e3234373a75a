"""Command-line entry point: ``codistill <subcommand> ...``.

Exit codes: 0 success, 1 runtime failure, 2 configuration or usage error.
"""

from __future__ import annotations

import argparse
import logging
import shutil
import sys
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from .config import Key, describe, read_flat, resolve, write_flat
from .corpus import SyntheticCorpusConfig, synth_corpus
from .errors import CheckpointError, CodistillError, ConfigError, ManifestError
from .metrics import QualityReport, joint_counts, quality_report
from .pipeline import (
    MODES,
    TRAIN_KEYS,
    AblationRow,
    Example,
    TrainConfig,
    Trainer,
    ablation_matrix,
    layer_features,
    load_network,
    probe_network,
)
from .quantizer import assign_codes, kmeans_fit, save_codebook
from .storage import Manifest, read_manifest, write_corpus, write_ints, write_manifest

log = logging.getLogger("codistill")

_PYTYPES = {"int": int, "float": float, "bool": bool, "str": str}

CORPUS_KEYS = [
    Key(f.name, _PYTYPES[f.type], f.default)
    for f in fields(SyntheticCorpusConfig)
    if f.type in _PYTYPES
]

QUANTIZE_KEYS = [
    Key("K", int, 16, "codebook size"),
    Key("layer", str, "mfcc", "mfcc or model:IDX (IDX 0 = embeddings, 1..N = blocks)"),
    Key("checkpoint", str, "", "network checkpoint for model:IDX features"),
    Key("max_iters", int, 100, "k-means iteration cap"),
    Key("tol", float, 1e-6, "relative inertia tolerance"),
    Key("stride", int, 1, "fit on every stride-th frame"),
    Key("seed", int, 0, "k-means++ seed"),
]

PROBE_KEYS = [
    Key("seed", int, 0, "split and probe seed"),
    Key("layer", str, "final", "final or a layer index"),
    Key("test_frac", float, 0.2, "held-out fraction of utterances"),
    Key("steps", int, 300, "full-batch Adam steps"),
    Key("lr", float, 0.05, "probe learning rate"),
]


def train_keys(mode: str) -> list[Key]:
    base = TrainConfig.for_mode(mode)
    keys = [replace(k, default=getattr(base, k.name)) for k in TRAIN_KEYS]
    keys.append(Key("num_codes", int, 0, "code vocabulary size (0 = largest code in the manifest + 1)"))
    return keys


# --- helpers -----------------------------------------------------------------


def _overrides(pairs) -> dict[str, str]:
    out = {}
    for pair in pairs or ():
        if "=" not in pair:
            raise ConfigError(f"--set expects key=value, got {pair!r}")
        k, v = pair.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _resolve(schema, args, extra: dict | None = None) -> dict:
    file_values = read_flat(args.config) if args.config else None
    overrides = _overrides(args.set)
    for k, v in (extra or {}).items():
        if v is not None:
            overrides[k] = str(v)
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    return resolve(schema, file_values, overrides)


def _prepare_dir(path: Path, force: bool) -> Path:
    if path.exists() and (not path.is_dir() or any(path.iterdir())):
        if not force:
            raise ConfigError(f"{path} already exists; pass --force to overwrite", key="out")
        shutil.rmtree(path) if path.is_dir() else path.unlink()
    path.mkdir(parents=True, exist_ok=True)
    return path


def _prepare_file(path: Path, force: bool) -> Path:
    if path.exists() and not force:
        raise ConfigError(f"{path} already exists; pass --force to overwrite", key="out")
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def load_examples(manifest: Manifest, codes: bool = True) -> list[Example]:
    out = []
    for row in manifest:
        c = manifest.load_codes(row) if codes and row.codes_path else None
        out.append(Example(row.utt_id, manifest.load_frames(row), c, manifest.load_phones(row)))
    return out


def _parse_layer(spec: str):
    if spec == "mfcc":
        return None
    if spec.startswith("model:"):
        try:
            return int(spec.split(":", 1)[1])
        except ValueError:
            pass
    raise ConfigError(f"layer must be mfcc or model:IDX, got {spec!r}", key="layer")


# --- subcommands ---------------------------------------------------------------


def cmd_gen_corpus(args) -> int:
    values = _resolve(CORPUS_KEYS, args)
    cfg = SyntheticCorpusConfig(**values)
    cfg.validate()
    out = _prepare_dir(Path(args.out), args.force)
    manifest = write_corpus(out, synth_corpus(cfg))
    write_flat(out / "config.snapshot", values)
    print(f"wrote {len(manifest)} utterances to {out / 'manifest.tsv'}")
    return 0


def cmd_quantize(args) -> int:
    values = _resolve(QUANTIZE_KEYS, args, {"K": args.K, "layer": args.layer, "checkpoint": args.checkpoint})
    layer = _parse_layer(values["layer"])
    manifest = read_manifest(args.manifest)
    if layer is not None and not values["checkpoint"]:
        raise CheckpointError(f"layer {values['layer']} needs --checkpoint")
    net = load_network(values["checkpoint"]) if layer is not None else None
    out = _prepare_dir(Path(args.out), args.force)
    examples = load_examples(manifest, codes=net is not None and net.config.frontend == "code")
    if net is None:
        feats = {ex.utt_id: ex.frames for ex in examples}
    else:
        feats = {ex.utt_id: layer_features(net, ex, layer) for ex in examples}
    codebook = kmeans_fit(
        np.concatenate(list(feats.values())),
        values["K"],
        max_iters=values["max_iters"],
        tol=values["tol"],
        seed=values["seed"],
        stride=values["stride"],
        source=values["layer"],
    )
    save_codebook(out / "codebook.tnsr", codebook)
    (out / "codes").mkdir()
    paths = {}
    for utt, f in feats.items():
        path = out / "codes" / f"{utt}.txt"
        write_ints(path, assign_codes(codebook, f).codes)
        paths[utt] = str(path.resolve())
    write_manifest(out / "manifest.tsv", manifest.with_codes(paths))
    write_flat(out / "config.snapshot", values)
    print(f"K={codebook.K} codebook and codes for {len(paths)} utterances in {out}")
    return 0


def cmd_train(args) -> int:
    values = _resolve(train_keys(args.mode), args, {"teacher_checkpoint": args.teacher})
    num_codes = values.pop("num_codes")
    cfg = TrainConfig(**values)
    cfg.validate()
    manifest = read_manifest(args.manifest)
    teacher = None
    if cfg.objective == "cobert" and cfg.code_branch:
        if not cfg.teacher_checkpoint:
            raise CheckpointError("cobert mode needs a teacher checkpoint (--teacher)")
        teacher = load_network(cfg.teacher_checkpoint)
    needs_codes = cfg.objective != "cobert" or (teacher is not None and teacher.config.frontend == "code")
    if needs_codes and not manifest.has_codes():
        raise ManifestError(f"{args.manifest}: mode {args.mode} needs codes_path for every row")
    examples = load_examples(manifest, codes=needs_codes)
    if not num_codes:
        if teacher is not None:
            num_codes = int(teacher.meta.get("num_codes", 0))
        if not num_codes and needs_codes:
            num_codes = 1 + max(int(ex.codes.max()) for ex in examples)
        num_codes = num_codes or 1
    out = Path(args.out)
    if args.resume is None:
        _prepare_dir(out, args.force)
    trainer = Trainer(cfg, examples, num_codes, teacher=teacher, out_dir=out)
    trainer.run(resume_from=args.resume)
    print(f"trained {args.mode} for {cfg.total_updates} updates; run directory {out}")
    return 0


def _quality(args) -> list[str]:
    rows = []
    for path in args.inputs:
        manifest = read_manifest(path)
        codes, phones, ids = [], [], []
        for row in manifest:
            codes.append(manifest.load_codes(row))
            phones.append(manifest.load_phones(row))
            ids.append(row.utt_id)
        counts = joint_counts(codes, phones, utt_ids=ids)
        name = Path(path).parent.name or str(path)
        report = quality_report(counts, model=name, feature="codes", K=counts.counts.shape[1])
        rows.append(report.tsv_row())
    return ["\t".join(QualityReport.HEADER)] + rows


def _probe(args) -> list[str]:
    if not args.manifest:
        raise ConfigError("--what probe needs --manifest", key="manifest")
    values = _resolve(PROBE_KEYS, args)
    layer = values["layer"] if values["layer"] == "final" else int(values["layer"])
    manifest = read_manifest(args.manifest)
    rows = ["checkpoint\tlayer\tprobe_accuracy"]
    for ckpt in args.inputs:
        net = load_network(ckpt)
        examples = load_examples(manifest, codes=net.config.frontend == "code")
        res = probe_network(
            net, examples, seed=values["seed"], layer=layer,
            test_frac=values["test_frac"], steps=values["steps"], lr=values["lr"],
        )
        rows.append(f"{ckpt}\t{values['layer']}\t{res.accuracy:.4f}")
    return rows


def _ablation(args) -> list[str]:
    if not args.manifest:
        raise ConfigError("--what ablation needs --manifest", key="manifest")
    schema = [k for k in train_keys("cobert") if k.name not in ("num_codes", "self_distill")]
    values = _resolve(schema, args)
    cfg = TrainConfig(**values)
    cfg.validate()
    teachers = {}
    for item in args.inputs:
        name, _, path = item.rpartition("=")
        teachers[name or Path(path).name] = load_network(path)
    manifest = read_manifest(args.manifest)
    needs_codes = any(t.config.frontend == "code" for t in teachers.values())
    examples = load_examples(manifest, codes=needs_codes)
    rows = ablation_matrix(examples, teachers, cfg, probe_seed=cfg.seed)
    return ["\t".join(AblationRow.HEADER)] + [r.tsv_row() for r in rows]


def cmd_eval(args) -> int:
    out = _prepare_file(Path(args.out), args.force)
    lines = {"quality": _quality, "probe": _probe, "ablation": _ablation}[args.what](args)
    out.write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    return 0


# --- parser ------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="codistill", description="Code-teacher distillation for speech encoders.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="flat key=value config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key (repeatable)")
        sp.add_argument("--seed", type=int, help="overrides the seed key")
        sp.add_argument("--out", required=True)
        sp.add_argument("--force", action="store_true", help="overwrite an existing --out")

    fmt = argparse.RawDescriptionHelpFormatter
    sp = sub.add_parser("gen-corpus", help="synthesize a phone-aligned corpus",
                        epilog="config keys:\n" + describe(CORPUS_KEYS), formatter_class=fmt)
    common(sp)
    sp.set_defaults(func=cmd_gen_corpus)

    sp = sub.add_parser("quantize", help="k-means codes from MFCC or model-layer features",
                        epilog="config keys:\n" + describe(QUANTIZE_KEYS), formatter_class=fmt)
    common(sp)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--K", type=int)
    sp.add_argument("--layer", help="mfcc or model:IDX")
    sp.add_argument("--checkpoint", help="network checkpoint for model:IDX")
    sp.set_defaults(func=cmd_quantize)

    sp = sub.add_parser("train", help="train a code teacher, the speech MLM model, or a distilled student",
                        epilog="config keys (defaults shown for cobert mode):\n" + describe(train_keys("cobert")),
                        formatter_class=fmt)
    common(sp)
    sp.add_argument("--mode", required=True, choices=sorted(MODES))
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--teacher", help="frozen teacher checkpoint (cobert mode)")
    sp.add_argument("--resume", help="checkpoint to resume from (run directory or step directory)")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="quality, probe or ablation report as TSV")
    common(sp)
    sp.add_argument("--what", required=True, choices=("quality", "probe", "ablation"))
    sp.add_argument("--inputs", nargs="+", required=True,
                    help="quality: manifests with codes; probe: checkpoints; ablation: [name=]teacher checkpoints")
    sp.add_argument("--manifest", help="corpus manifest (probe, ablation)")
    sp.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"codistill: config error: {exc}", file=sys.stderr)
        return 2
    except (CodistillError, OSError) as exc:
        print(f"codistill: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
