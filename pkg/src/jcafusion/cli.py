"""Command-line entry point: ``jca <command> [options]``.

Commands: ``gen-data``, ``train``, ``eval``, ``ablate``, ``mask-audio`` and
``dump-attention``.  Each reads an optional JSON config (``--config``), applies
command-line overrides, and writes the fully resolved config next to its
outputs as ``config.json``.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .dataio import (
    ArraySplit, Dataset, MaskSpec, SyntheticSpec, gen_synthetic, mask_modality, read_manifest,
    window_sequence, write_dataset,
)
from .errors import AlignmentError, CheckpointError, ConfigError, JcaError, SequenceLookupError
from .fusion import VARIANTS, FusionModel, ModelDims, write_attention_csv
from .objective import TARGETS, ccc, ccc_per_target
from .optim import TrainConfig, train_loop, write_metrics_csv
from .postprocess import default_grids, grid_search_postproc, save_chains

log = logging.getLogger("jcafusion")

ABLATION_ROWS = (("audio", "audio only"), ("visual", "visual only"), ("concat", "feature concatenation"),
                 ("ca", "cross-attention"), ("jca", "joint cross-attention"))
DEFAULT_FRACTIONS = (0.0, 0.1, 0.25, 0.5, 1.0)

DEFAULTS = {
    "seed": 0,
    "threads": 1,
    "model": {"variant": "jca", "combiner": "single", "k": 32, "h_head": 128,
              "sub_len": None, "combiner_dim": None},
    "train": asdict(TrainConfig()),
    "data": asdict(SyntheticSpec()),
    "eval": {"fractions": list(DEFAULT_FRACTIONS), "mask_fill": "zeros"},
}


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def resolve_config(args) -> dict:
    cfg = json.loads(json.dumps(DEFAULTS))
    if getattr(args, "config", None):
        cfg = _merge(cfg, json.loads(Path(args.config).read_text()))
    if getattr(args, "seed", None) is not None:
        cfg["seed"] = args.seed
    if getattr(args, "threads", None) is not None:
        cfg["threads"] = args.threads
    if getattr(args, "variant", None):
        cfg["model"]["variant"] = args.variant
    if getattr(args, "fractions", None):
        cfg["eval"]["fractions"] = [float(f) for f in args.fractions.split(",")]
    cfg["train"]["seed"] = cfg["seed"]
    if cfg["threads"] < 1:
        raise ConfigError("--threads must be at least 1")
    for key in ("manifest", "checkpoint", "sequence_id"):
        if getattr(args, key, None) is not None:
            cfg[key] = str(getattr(args, key))
    return cfg


def _write_config(out: Path, cfg: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")


def _train_config(cfg: dict) -> TrainConfig:
    known = {f.name for f in fields(TrainConfig)}
    unknown = set(cfg["train"]) - known
    if unknown:
        raise ConfigError(f"unknown train options {sorted(unknown)}")
    return TrainConfig(**cfg["train"])


# --- data plumbing -------------------------------------------------------------

def load_windows(manifest, sub_len: int | None):
    records = read_manifest(manifest)
    if not records:
        raise ConfigError(f"{manifest}: manifest lists no sequences")
    if sub_len is None:
        return records
    out = []
    for r in records:
        out.extend(window_sequence(r, sub_len))
    return out


def _data_shape(records) -> dict:
    shapes = {(r.L, tuple(f.dim for f in r.audio), tuple(f.dim for f in r.visual)) for r in records}
    if len(shapes) != 1:
        raise AlignmentError(f"sequences disagree on (L, audio dims, visual dims): {sorted(shapes)}")
    L, da, dv = shapes.pop()
    return {"L": L, "audio": list(da), "visual": list(dv)}


def model_dims_for(cfg: dict, shape: dict) -> tuple[ModelDims, dict]:
    m = cfg["model"]
    combiner = m["combiner"]
    L = shape["L"]
    if combiner == "stack":
        if len(shape["audio"]) != len(shape["visual"]):
            raise AlignmentError("stack combiner needs the same number of audio and visual backbones")
        if len(set(shape["audio"])) != 1 or len(set(shape["visual"])) != 1:
            raise AlignmentError("stack combiner needs equal widths across backbones of a modality")
        L *= len(shape["audio"])
        d_a, d_v = shape["audio"][0], shape["visual"][0]
    elif combiner == "concat_fc":
        d_a = m.get("combiner_dim") or shape["audio"][0]
        d_v = m.get("combiner_dim") or shape["visual"][0]
    else:
        d_a, d_v = shape["audio"][0], shape["visual"][0]
    for key, val in (("L", L), ("d_a", d_a), ("d_v", d_v)):
        want = m.get(key)
        if want is not None and want != val:
            raise AlignmentError(f"config asks for {key}={want} but the data gives {val}")
    return ModelDims(L, d_a, d_v, m["k"], m["h_head"]), {"audio": shape["audio"], "visual": shape["visual"]}


def _check_model_fits(model: FusionModel, records) -> None:
    shape = _data_shape(records)
    L = shape["L"] * (model.n_backbones if model.combiner == "stack" else 1)
    if model.combiner == "concat_fc":
        ok = model.backbone_dims == {"audio": shape["audio"], "visual": shape["visual"]}
    else:
        ok = shape["audio"][0] == model.dims.d_a and shape["visual"][0] == model.dims.d_v
    if model.variant in ("jca", "ca"):
        ok = ok and L == model.dims.L
    if not ok:
        raise CheckpointError(f"checkpoint dims {asdict(model.dims)} do not fit data {shape}")


def _split_records(records, split):
    return [r for r in records if r.split == split]


def _eval_split(records):
    test = _split_records(records, "test")
    return ("test", test) if test else ("val", _split_records(records, "val"))


def _mean(scores: dict) -> float:
    return 0.5 * (scores["valence"] + scores["arousal"])


# --- commands ------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    cfg = resolve_config(args)
    if args.seed is not None:
        cfg["data"]["seed"] = args.seed
    unknown = set(cfg["data"]) - {f.name for f in fields(SyntheticSpec)}
    if unknown:
        raise ConfigError(f"unknown data options {sorted(unknown)}")
    spec = SyntheticSpec(**cfg["data"])
    records, _ = gen_synthetic(spec)
    out = Path(args.out)
    manifest = write_dataset(records, out)
    _write_config(out, cfg)
    counts = {s: sum(r.split == s for r in records) for s in ("train", "val", "test")}
    print(f"wrote {len(records)} sequences (L={spec.L}, d_a={spec.d_a}, d_v={spec.d_v}) to {manifest}; "
          f"train/val/test = {counts['train']}/{counts['val']}/{counts['test']}")
    return 0


def train_model(cfg: dict, records, variant: str | None = None):
    variant = variant or cfg["model"]["variant"]
    dims, backbone_dims = model_dims_for(cfg, _data_shape(records))
    model = FusionModel.create(variant, dims, seed=cfg["seed"], combiner=cfg["model"]["combiner"],
                               backbone_dims=backbone_dims)
    result = train_loop(model, Dataset.from_records(records), _train_config(cfg))
    return model, result


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    if "manifest" not in cfg:
        raise ConfigError("train needs --manifest")
    records = load_windows(cfg["manifest"], cfg["model"]["sub_len"])
    model, result = train_model(cfg, records)
    out = Path(args.out)
    _write_config(out, cfg)
    save_checkpoint(out / "checkpoint.jck", model)
    write_metrics_csv(out / "metrics.csv", result.log)
    print(f"{model.variant}: best epoch {result.best_epoch}/{len(result.log)}, "
          f"val mean CCC {result.best_val_ccc:.4f}")
    return 0


def evaluate_records(model: FusionModel, records) -> tuple[np.ndarray, np.ndarray, dict]:
    split = ArraySplit.from_records(records)
    pred = model.predict(split.audio, split.visual)
    return pred, split.labels, ccc_per_target(pred, split.labels)


def eval_report(model: FusionModel, records, postproc: bool, out: Path | None = None) -> dict:
    _check_model_fits(model, records)
    name, test = _eval_split(records)
    if not test:
        raise ConfigError("no test or validation sequences to evaluate")
    pred, gt, raw = evaluate_records(model, test)
    report = {t: {"raw": raw[t], "postproc": None} for t in TARGETS}
    report["split"] = name
    if postproc:
        val = _split_records(records, "val")
        if not val:
            raise ConfigError("--postproc needs validation sequences to fit the chain on")
        vpred, vgt, vraw = evaluate_records(model, val)
        L = vpred.shape[-2]
        windows, shifts = default_grids(test[0].labels.clips_per_second, L)
        chains, validation = {}, {}
        for j, t in enumerate(TARGETS):
            chain = grid_search_postproc(vpred[..., j].ravel(), vgt[..., j].ravel(), windows, shifts,
                                         segments=[L] * len(val))
            chains[t] = chain
            vp, vg = chain.apply(vpred[..., j].ravel(), vgt[..., j].ravel(), [L] * len(val))
            validation[t] = {"raw": vraw[t], "postproc": ccc(vp, vg).rho_c}
            tp, tg = chain.apply(pred[..., j].ravel(), gt[..., j].ravel(), [pred.shape[-2]] * len(test))
            report[t]["postproc"] = ccc(tp, tg).rho_c
        report["validation"] = validation
        if out is not None:
            save_chains(out / "postproc_chain.json", chains)
    return report


def cmd_eval(args) -> int:
    cfg = resolve_config(args)
    model = load_checkpoint(args.checkpoint)
    records = load_windows(args.manifest, cfg["model"]["sub_len"])
    out = Path(args.out) if args.out else None
    if out:
        _write_config(out, cfg)
    report = eval_report(model, records, args.postproc, out)
    text = json.dumps(report, indent=2, sort_keys=True)
    if out:
        (out / "eval.json").write_text(text + "\n")
    print(text)
    return 0


def run_ablation(cfg: dict, records) -> list[dict]:
    rows = []
    for variant, label in ABLATION_ROWS:
        model, result = train_model(cfg, records, variant)
        best = result.log[result.best_epoch - 1]
        rows.append({"model": variant, "description": label,
                     "valence": best.val_ccc_valence, "arousal": best.val_ccc_arousal})
        log.info("%s: valence %.4f arousal %.4f", variant, best.val_ccc_valence, best.val_ccc_arousal)
    return rows


def cmd_ablate(args) -> int:
    cfg = resolve_config(args)
    records = load_windows(args.manifest, cfg["model"]["sub_len"])
    rows = run_ablation(cfg, records)
    out = Path(args.out)
    _write_config(out, cfg)
    with open(out / "ablation.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model", "description", "valence", "arousal"])
        for r in rows:
            w.writerow([r["model"], r["description"], repr(r["valence"]), repr(r["arousal"])])
    for r in rows:
        print(f"{r['description']:<24} {r['valence']:.4f} {r['arousal']:.4f}")
    return 0


def missing_audio_curve(model: FusionModel, records, fractions, fill: str = "zeros", seed: int = 0) -> list[dict]:
    """CCC of ``model`` on the evaluation split with a growing share of audio clips masked."""
    _check_model_fits(model, records)
    _, ev = _eval_split(records)
    rows = []
    for f in fractions:
        masked = [mask_modality(r, "audio", MaskSpec(f, fill, seed + i)) for i, r in enumerate(ev)]
        _, _, scores = evaluate_records(model, masked)
        rows.append({"fraction": f, "valence": scores["valence"], "arousal": scores["arousal"],
                     "mean": _mean(scores)})
    return rows


def cmd_mask_audio(args) -> int:
    cfg = resolve_config(args)
    fractions = cfg["eval"]["fractions"]
    if any(not 0.0 <= f <= 1.0 for f in fractions):
        raise ConfigError(f"fractions must lie in [0, 1], got {fractions}")
    model = load_checkpoint(args.checkpoint)
    records = load_windows(args.manifest, cfg["model"]["sub_len"])
    rows = missing_audio_curve(model, records, fractions, cfg["eval"]["mask_fill"], cfg["seed"])
    out = Path(args.out)
    _write_config(out, cfg)
    with open(out / "mask_audio.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["fraction", "valence", "arousal", "mean"])
        for r in rows:
            w.writerow([repr(r["fraction"]), repr(r["valence"]), repr(r["arousal"]), repr(r["mean"])])
    for r in rows:
        print(f"{r['fraction']:.2f} {r['valence']:.4f} {r['arousal']:.4f}")
    return 0


def cmd_dump_attention(args) -> int:
    cfg = resolve_config(args)
    model = load_checkpoint(args.checkpoint)
    if model.variant not in ("jca", "ca"):
        raise ConfigError(f"variant {model.variant!r} has no attention to dump")
    records = read_manifest(args.manifest)
    match = [r for r in records if r.id == args.sequence_id]
    if not match:
        raise SequenceLookupError(f"sequence {args.sequence_id!r} is not in {args.manifest}")
    sub_len = cfg["model"]["sub_len"]
    windows = window_sequence(match[0], sub_len) if sub_len else match
    _check_model_fits(model, windows)
    split = ArraySplit.from_records(windows)
    pred, att = model.forward(split.audio, split.visual)
    out = Path(args.out)
    _write_config(out, cfg)
    path = out / f"attention_{args.sequence_id}.csv"
    write_attention_csv(path, att, pred.value, split.labels)
    print(f"wrote {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="jca", description="Audio-visual fusion for valence/arousal regression.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_required=True):
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--threads", type=int, help="worker threads (computation is vectorised; default 1)")
        sp.add_argument("--out", required=out_required, help="output directory")

    sp = sub.add_parser("gen-data", help="write a synthetic dataset and manifest")
    common(sp)
    sp.set_defaults(fn=cmd_gen_data)

    sp = sub.add_parser("train", help="train one fusion variant")
    common(sp)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--variant", choices=VARIANTS)
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a checkpoint")
    common(sp, out_required=False)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--postproc", action="store_true", help="fit post-processing on val, apply to test")
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("ablate", help="train audio/visual/concat/ca/jca and tabulate validation CCC")
    common(sp)
    sp.add_argument("--manifest", required=True)
    sp.set_defaults(fn=cmd_ablate)

    sp = sub.add_parser("mask-audio", help="CCC under a growing share of missing audio")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--fractions", help="comma-separated masking fractions")
    sp.set_defaults(fn=cmd_mask_audio)

    sp = sub.add_parser("dump-attention", help="per-clip attention scores for one sequence")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--sequence-id", required=True)
    sp.set_defaults(fn=cmd_dump_attention)
    return p


def _setup_logging() -> None:
    level = {"quiet": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}.get(
        os.environ.get("JCA_LOG", "info").lower(), logging.INFO)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except JcaError as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return 2
    except OSError as exc:
        log.error("I/O error: %s", exc)
        return 3


if __name__ == "__main__":
    sys.exit(main())
