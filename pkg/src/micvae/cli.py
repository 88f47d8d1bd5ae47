"""``micvae`` command line: synth-data, train, eval, diagnose, dump-latents.

Every command writes a JSON manifest next to its outputs. Exit codes:
0 ok, 2 usage, 3 data/checkpoint problems, 4 numeric divergence.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import os
import sys
import time
from pathlib import Path
from typing import Sequence

from . import __version__
from .corpus import (ConfigError, TextPair, Vocab, build_vocab, encode_pairs, gen_monolingual,
                     gen_multimodal_task, read_bitext, read_mono, write_bitext, write_mono)
from .diagnostics import append_metrics_csv, collapse_metrics, dump_latents, eval_nll
from .model import CheckpointError, load_checkpoint
from .training import MODES, DivergenceError, TrainConfig, evaluate_bleu, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4

logger = logging.getLogger("micvae")


class DataError(Exception):
    """Bad or missing input files; maps to exit code 3."""


class UsageError(Exception):
    """Flag combinations argparse cannot express; maps to exit code 2."""


# -- helpers -----------------------------------------------------------------------
def file_digest(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()[:16]


def effective_seed(flag: int | None, default: int = 0) -> int:
    env = os.environ.get("MICVAE_SEED")
    if env is not None and env.strip():
        try:
            return int(env)
        except ValueError:
            raise UsageError(f"MICVAE_SEED must be an integer, got {env!r}") from None
    return default if flag is None else flag


def prepare_out_dir(out: Path, force: bool) -> Path:
    out = Path(out)
    if out.exists() and not out.is_dir():
        raise UsageError(f"{out} exists and is not a directory")
    if out.is_dir() and any(out.iterdir()) and not force:
        raise UsageError(f"output directory {out} is not empty (use --force to overwrite)")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _finite(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: _finite(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_finite(v) for v in obj]
    return obj


def to_json(obj, **kw) -> str:
    """Strict JSON: NaN and infinities become null."""
    return json.dumps(_finite(json.loads(json.dumps(obj, default=float))), allow_nan=False, **kw)


def write_manifest(path: Path, command: str, argv: Sequence[str], config: dict, seed: int,
                   inputs: dict[str, Path | None], outputs: dict[str, Path], t0: float, **extra) -> None:
    doc = {
        "command": command,
        "version": __version__,
        "argv": list(argv),
        "config": config,
        "seed": seed,
        "inputs": {k: {"path": str(v), "sha256": file_digest(v)} for k, v in inputs.items() if v is not None},
        "outputs": {k: str(v) for k, v in outputs.items()},
        "wall_clock_s": round(time.time() - t0, 3),
    }
    doc.update(extra)
    Path(path).write_text(to_json(doc, indent=2) + "\n")


def _existing(path: Path | None, what: str) -> Path | None:
    if path is None:
        return None
    path = Path(path)
    if not path.exists():
        raise DataError(f"{what} not found: {path}")
    return path


def resolve_data(data: Path) -> tuple[Path, Path | None]:
    """A bitext file, or a synth-data directory holding train.tsv and valid.tsv."""
    data = _existing(data, "data")
    if data.is_dir():
        train_path, valid_path = data / "train.tsv", data / "valid.tsv"
        if not train_path.exists():
            raise DataError(f"{data} has no train.tsv")
        return train_path, valid_path if valid_path.exists() else None
    return data, None


def load_bitext(path: Path) -> list[TextPair]:
    try:
        pairs = read_bitext(path)
    except (OSError, UnicodeDecodeError, ValueError) as exc:
        raise DataError(str(exc)) from exc
    if not pairs:
        raise DataError(f"{path} holds no sentence pairs")
    bad = [i for i, p in enumerate(pairs, 1) if not p.src or not p.tgt]
    if bad:
        raise DataError(f"{path}: empty side in pair {bad[0]}")
    return pairs


def load_sentences(path: Path) -> list[list[str]]:
    """Source sides of a bitext, or the lines of a monolingual file."""
    path = _existing(path, "data")
    try:
        with open(path, encoding="utf-8") as fh:
            lines = [ln.rstrip("\n") for ln in fh if ln.strip() and not ln.startswith("#")]
    except (OSError, UnicodeDecodeError) as exc:
        raise DataError(str(exc)) from exc
    sents = [ln.split("\t")[0].split() for ln in lines]
    if not sents:
        raise DataError(f"{path} holds no sentences")
    return sents


def check_vocab(vocab: Vocab, sentences: Sequence[Sequence[str]], path: Path) -> None:
    oov = sorted({t for s in sentences for t in s if t not in vocab.index})
    if oov:
        raise DataError(f"vocab mismatch: {path} has {len(oov)} token types unknown to the checkpoint "
                        f"(e.g. {oov[:5]})")


def load_model(ckpt: Path):
    ckpt = _existing(ckpt, "checkpoint")
    try:
        return load_checkpoint(ckpt)
    except CheckpointError as exc:
        raise DataError(str(exc)) from exc


def checkpoint_pairs(ckpt_vocab: Vocab, data: Path):
    path, _ = resolve_data(data)
    pairs = load_bitext(path)
    check_vocab(ckpt_vocab, [p.src for p in pairs] + [p.tgt for p in pairs], path)
    return path, encode_pairs(pairs, ckpt_vocab)


# -- commands -----------------------------------------------------------------------
def cmd_synth_data(args, argv) -> int:
    t0 = time.time()
    if args.pairs <= 0:
        raise UsageError("--pairs must be positive")
    if args.modes <= 0:
        raise UsageError("--modes must be positive")
    seed = effective_seed(args.seed)
    out = prepare_out_dir(args.out, args.force)
    n_valid = args.valid if args.valid is not None else max(1, min(256, args.pairs // 10))
    n_mono = args.mono if args.mono is not None else args.pairs
    tag = f"seed={seed} modes={args.modes}"
    paths = {"train": out / "train.tsv", "valid": out / "valid.tsv", "mono": out / "mono.txt"}
    write_bitext(paths["train"], gen_multimodal_task(args.pairs, args.modes, seed=seed),
                 header=f"{tag} split=train pairs={args.pairs} columns=src,tgt,mode")
    write_bitext(paths["valid"], gen_multimodal_task(n_valid, args.modes, seed=seed + 1_000_003),
                 header=f"{tag} split=valid pairs={n_valid} columns=src,tgt,mode")
    write_mono(paths["mono"], gen_monolingual(n_mono, seed=seed + 2_000_003),
               header=f"{tag} split=mono sentences={n_mono}")
    config = {"modes": args.modes, "pairs": args.pairs, "valid": n_valid, "mono": n_mono}
    write_manifest(out / "manifest.json", "synth-data", argv, config, seed, {}, paths, t0)
    print(json.dumps({k: str(v) for k, v in paths.items()}))
    return EXIT_OK


TRAIN_FLAGS = ("steps", "warmup_steps", "lr", "max_tokens", "word_dropout", "anneal", "anneal_steps",
               "eval_every", "weight_decay")


def train_config(args) -> TrainConfig:
    """defaults < --config file < flags."""
    merged: dict = {}
    if args.config is not None:
        path = _existing(args.config, "config")
        try:
            merged = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise DataError(f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(merged, dict):
            raise DataError(f"config {path} must hold a JSON object")
    merged["mode"] = args.mode
    for name in TRAIN_FLAGS:
        value = getattr(args, name)
        if value is not None:
            merged[name] = value
    if args.mono is not None:
        merged.setdefault("self_training", True)
    merged["seed"] = effective_seed(args.seed, merged.get("seed", 0))
    try:
        return TrainConfig.from_dict(merged)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad training config: {exc}") from exc


def cmd_train(args, argv) -> int:
    t0 = time.time()
    cfg = train_config(args)
    train_path, valid_path = resolve_data(args.data)
    valid_path = _existing(args.valid, "validation data") if args.valid is not None else valid_path
    mono_path = _existing(args.mono, "monolingual data")
    out = prepare_out_dir(args.out, args.force)
    text = load_bitext(train_path)
    valid_text = load_bitext(valid_path) if valid_path is not None else None
    mono_text = read_mono(mono_path) if mono_path is not None else []
    if mono_path is not None and not mono_text:
        raise DataError(f"{mono_path} holds no sentences")
    if cfg.self_training and not mono_text:
        raise UsageError("self_training needs --mono")
    vocab = build_vocab([p.src for p in text] + [p.tgt for p in text] + mono_text)
    bitext = encode_pairs(text, vocab)
    valid = encode_pairs(valid_text, vocab) if valid_text else None
    mono = [vocab.encode(s) for s in mono_text]
    try:
        tr = train(bitext, vocab, cfg, out, mono=mono, valid=valid)
    except DivergenceError as exc:
        write_manifest(out / "manifest.json", "train", argv, cfg.to_dict(), cfg.seed,
                       {"data": train_path, "valid": valid_path, "mono": mono_path}, {}, t0,
                       status="diverged", error=str(exc))
        raise
    final = tr.history[-1].row() if tr.history else {}
    write_manifest(out / "manifest.json", "train", argv, cfg.to_dict(), cfg.seed,
                   {"data": train_path, "valid": valid_path, "mono": mono_path},
                   {"checkpoint": out / "checkpoint.json", "metrics": out / "metrics.csv",
                    "losses": out / "losses.csv"}, t0,
                   status="ok", config_hash=cfg.digest(), final_metrics=final,
                   skipped_nan_steps=tr.skipped_nan, skipped_long_pairs=tr.skipped_long)
    print(to_json({"checkpoint": str(out / "checkpoint.json"), **final}))
    return EXIT_OK


def cmd_eval(args, argv) -> int:
    t0 = time.time()
    if args.beam < 0:
        raise UsageError("--beam must be >= 0")
    seed = effective_seed(args.seed)
    model, vocab, _, _ = load_model(args.ckpt)
    data_path, pairs = checkpoint_pairs(vocab, args.data)
    out = Path(args.out) if args.out is not None else Path(args.ckpt).parent / "eval"
    out.mkdir(parents=True, exist_ok=True)
    bleu, hyps = evaluate_bleu(model, vocab, pairs, seed=seed, beam=args.beam)
    nll = eval_nll(model, pairs)
    hyp_path = out / "hypotheses.txt"
    hyp_path.write_text("".join(" ".join(h) + "\n" for h in hyps))
    result = {"bleu": bleu, "nll_per_token": nll, "sentences": len(pairs), "beam": args.beam}
    write_manifest(out / "manifest.json", "eval", argv, {"beam": args.beam}, seed,
                   {"ckpt": Path(args.ckpt), "data": data_path}, {"hypotheses": hyp_path}, t0, result=result)
    print(to_json(result))
    return EXIT_OK


def cmd_diagnose(args, argv) -> int:
    t0 = time.time()
    model, vocab, extra, _ = load_model(args.ckpt)
    data_path, pairs = checkpoint_pairs(vocab, args.data)
    metrics, residual = collapse_metrics(model, pairs, step=int(extra.get("step", 0)))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    append_metrics_csv(out, metrics)
    result = {**metrics.row(), "decomposition_residual": residual,
              "mi_conditioning": "mi_zx feeds the source encoding to the posterior network; "
                                 "mi_zy feeds the target encoding"}
    write_manifest(out.with_name(out.name + ".manifest.json"), "diagnose", argv, {}, 0,
                   {"ckpt": Path(args.ckpt), "data": data_path}, {"metrics": out}, t0, result=result)
    print(to_json(result))
    return EXIT_OK


def cmd_dump_latents(args, argv) -> int:
    t0 = time.time()
    model, vocab, _, _ = load_model(args.ckpt)
    if model.cfg.latent != "categorical":
        raise UsageError("dump-latents needs a categorical-latent checkpoint")
    corpora = []
    for path in (args.data_a, args.data_b):
        sents = load_sentences(path)
        check_vocab(vocab, sents, path)
        corpora.append(encode_pairs([TextPair(s, s) for s in sents], vocab))
    labels = (args.label_a or Path(args.data_a).stem, args.label_b or Path(args.data_b).stem)
    if labels[0] == labels[1]:
        labels = (labels[0] + "_a", labels[1] + "_b")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    rows = dump_latents(model, corpora[0], corpora[1], out, labels)
    write_manifest(out.with_name(out.name + ".manifest.json"), "dump-latents", argv,
                   {"labels": list(labels)}, 0,
                   {"ckpt": Path(args.ckpt), "data_a": Path(args.data_a), "data_b": Path(args.data_b)},
                   {"latents": out}, t0, rows=rows)
    print(json.dumps({"rows": rows, "out": str(out)}))
    return EXIT_OK


# -- parser ---------------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="micvae", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"micvae {__version__}")
    p.add_argument("--log-level", default="INFO", choices=("DEBUG", "INFO", "WARNING", "ERROR"))
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    s = sub.add_parser("synth-data", help="write a synthetic multi-mode bitext with splits")
    s.add_argument("--modes", type=int, default=2)
    s.add_argument("--pairs", type=int, required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--valid", type=int, help="held-out pairs (default: pairs/10, at most 256)")
    s.add_argument("--mono", type=int, help="monolingual sentences (default: --pairs)")
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--force", action="store_true")
    s.set_defaults(func=cmd_synth_data)

    t = sub.add_parser("train", help="train one model variant")
    t.add_argument("--mode", required=True, choices=MODES, help="one of: " + ", ".join(MODES))
    t.add_argument("--data", type=Path, required=True, help="bitext file or synth-data directory")
    t.add_argument("--valid", type=Path)
    t.add_argument("--mono", type=Path, help="monolingual source text; turns on self-training")
    t.add_argument("--config", type=Path, help="JSON object of training settings")
    t.add_argument("--out", type=Path, required=True)
    t.add_argument("--force", action="store_true")
    t.add_argument("--seed", type=int)
    t.add_argument("--steps", type=int)
    t.add_argument("--warmup-steps", dest="warmup_steps", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--weight-decay", dest="weight_decay", type=float)
    t.add_argument("--max-tokens", dest="max_tokens", type=int)
    t.add_argument("--word-dropout", dest="word_dropout", type=float)
    t.add_argument("--anneal", choices=("linear", "none"))
    t.add_argument("--anneal-steps", dest="anneal_steps", type=int)
    t.add_argument("--eval-every", dest="eval_every", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="BLEU and NLL/token of a checkpoint")
    e.add_argument("--ckpt", type=Path, required=True)
    e.add_argument("--data", type=Path, required=True)
    e.add_argument("--beam", type=int, default=0, help="beam width; 0 decodes greedily")
    e.add_argument("--seed", type=int)
    e.add_argument("--out", type=Path, help="directory for hypotheses.txt (default: <ckpt dir>/eval)")
    e.set_defaults(func=cmd_eval)

    d = sub.add_parser("diagnose", help="collapse metrics and the KL decomposition residual")
    d.add_argument("--ckpt", type=Path, required=True)
    d.add_argument("--data", type=Path, required=True)
    d.add_argument("--out", type=Path, required=True, help="CSV file the metrics row is appended to")
    d.set_defaults(func=cmd_diagnose)

    x = sub.add_parser("dump-latents", help="per-sentence posteriors for two corpora")
    x.add_argument("--ckpt", type=Path, required=True)
    x.add_argument("--data-a", dest="data_a", type=Path, required=True)
    x.add_argument("--data-b", dest="data_b", type=Path, required=True)
    x.add_argument("--label-a", dest="label_a")
    x.add_argument("--label-b", dest="label_b")
    x.add_argument("--out", type=Path, required=True)
    x.set_defaults(func=cmd_dump_latents)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=getattr(logging, args.log_level), format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args, argv)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"micvae: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, ConfigError) as exc:
        print(f"micvae: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as exc:
        print(f"micvae: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
