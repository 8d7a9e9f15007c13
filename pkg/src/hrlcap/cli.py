"""Command-line interface: ``python -m hrlcap <command> ...``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from .agent import HRLCaptioner, decode, load_model, save_model
from .attention import write_attention_csv
from .config import Config, load_config
from .data import (CaptionDataset, SynthTaskSpec, Vocabulary, build_vocab, gen_synth, load_manifest,
                   write_csv)
from .errors import HrlcapError, InputError, LoadError
from .metrics import score_corpus, tokenize

log = logging.getLogger("hrlcap")

SCORE_HEADER = ["video_id", "cider_d", "bleu1", "bleu2", "bleu3", "bleu4", "rouge_l"]


# ------------------------------------------------------------------ helpers


def _config(args, **overrides) -> Config:
    extra = dict(overrides)
    if args.seed is not None:
        extra["seed"] = args.seed
    return load_config(args.config, extra)


def _vocab(data: Path) -> Vocabulary:
    path = data / "vocab.json"
    if path.exists():
        return Vocabulary.load(path)
    train = load_manifest(data / "train.jsonl", check_files=False)
    return build_vocab([r for refs in train.references().values() for r in refs])


def _split(data: Path, split: str, vocab: Vocabulary, cfg: Config) -> CaptionDataset:
    path = data / f"{split}.jsonl"
    if not path.exists():
        raise LoadError(f"no manifest {path}")
    return CaptionDataset(load_manifest(path), vocab, cfg.model.max_frames, cfg.model.max_len)


def _model_vocab(meta: dict, data: Path) -> Vocabulary:
    return Vocabulary(meta["itos"]) if meta.get("itos") else _vocab(data)


def _require_out(args) -> Path:
    if args.out is None:
        raise InputError(f"{args.command} needs --out")
    return Path(args.out)


# ------------------------------------------------------------------ commands


def cmd_synth(args) -> int:
    out = _require_out(args)
    spec = SynthTaskSpec(n_activities=args.activities, noise=args.noise, feat_dim=args.feat_dim,
                         sizes={"train": args.train, "val": args.val, "test": args.test},
                         seed=0 if args.seed is None else args.seed)
    manifests = gen_synth(spec, out)
    vocab = Vocabulary.load(out / "vocab.json")
    print(f"wrote {sum(len(m.records) for m in manifests.values())} videos to {out} "
          f"(vocabulary {len(vocab)})")
    return 0


def cmd_train_critic(args) -> int:
    from .training import train_critic

    cfg = _config(args)
    data = Path(args.data)
    vocab = _vocab(data)
    train = _split(data, "train", vocab, cfg)
    val = _split(data, "val", vocab, cfg) if (data / "val.jsonl").exists() else None
    if args.init:
        model, _ = load_model(args.init)
    else:
        model = HRLCaptioner(cfg.model, len(vocab), seed=cfg.train.seed)
    t0 = time.perf_counter()
    stats = train_critic(model, train, cfg.train, val)
    out = _require_out(args)
    save_model(out, model, vocab.itos, {"critic": stats})
    acc = stats.get("val_accuracy", stats["train_accuracy"])
    print(f"critic boundary accuracy {acc:.4f} ({time.perf_counter() - t0:.1f}s) -> {out}")
    return 0


def _train(args, rl: bool) -> int:
    from .training import Trainer

    overrides = {} if rl else {"rl_epochs": 0}
    if rl and args.warm_start:
        overrides["xe_epochs"] = 0
    cfg = _config(args, **overrides)
    data = Path(args.data)
    vocab = _vocab(data)
    train, val = _split(data, "train", vocab, cfg), _split(data, "val", vocab, cfg)
    model, _ = load_model(args.init)
    if rl and args.warm_start:
        warm, _ = load_model(args.warm_start)
        model.params.load({k: v.data for k, v in warm.params.items() if not k.startswith("critic.")},
                          strict=False)
    if len(vocab) != model.vocab_size:
        raise InputError(f"vocabulary has {len(vocab)} entries, model expects {model.vocab_size}")
    out = _require_out(args)
    trainer = Trainer(model, train, val, cfg.train, out)
    if (out / "last.ckpt").exists() and not args.restart:
        trainer.restore(out / "last.ckpt")
        log.info("resuming at epoch %d", trainer.epoch)
    history = trainer.fit()
    best = max(history, key=lambda s: s.cider) if history else None
    if best is not None:
        print(f"best validation CIDEr-D {best.cider:.4f} at epoch {best.epoch} ({best.phase}) -> {out}")
    return 0


def cmd_train_xe(args) -> int:
    return _train(args, rl=False)


def cmd_train_hrl(args) -> int:
    return _train(args, rl=True)


def _decode_mode(args) -> tuple[str, int]:
    if args.beam is not None:
        if args.beam < 1:
            raise InputError("--beam needs a width >= 1")
        return "beam", args.beam
    return ("sample", 1) if args.sample else ("greedy", 1)


def cmd_decode(args) -> int:
    model, meta = load_model(args.model)
    cfg = _config(args)
    data = Path(args.data)
    ds = _split(data, args.split, _model_vocab(meta, data), cfg)
    mode, k = _decode_mode(args)
    seed = cfg.train.seed
    lines = []
    for s in range(0, len(ds), 50):
        idx = list(range(s, min(len(ds), s + 50)))
        b = ds.batch(idx, with_captions=False)
        res = decode(model, b.features, b.lengths, mode=mode, beam=k, seed=seed + s,
                     max_len=args.max_len, top5=args.top5)
        for vid, r in zip(b.video_ids, res):
            rec = {"video_id": vid, "tokens": ds.vocab.decode(r.tokens),
                   "segments": [list(x) for x in r.segments], "log_prob": r.log_prob}
            if args.top5:
                rec["top5"] = [[[ds.vocab.itos[i], p] for i, p in step] for step in r.top5]
            lines.append(json.dumps(rec))
    text = "\n".join(lines) + ("\n" if lines else "")
    if args.out:
        Path(args.out).write_text(text)
        print(f"decoded {len(lines)} videos ({mode}{'' if mode != 'beam' else f' k={k}'}) -> {args.out}")
    else:
        sys.stdout.write(text)
    return 0


def _read_candidates(path) -> dict[str, list[str]]:
    out = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                toks = rec["tokens"]
                out[rec["video_id"]] = tokenize(toks) if isinstance(toks, str) else [str(t) for t in toks]
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise LoadError(f"{path}:{lineno}: bad candidate record ({exc})") from None
    return out


def cmd_score(args) -> int:
    cands = _read_candidates(args.candidates)
    refs = load_manifest(args.references, check_files=False).references()
    scores = score_corpus(cands, refs)
    rows = [[v, p["cider"], p["bleu1"], p["bleu2"], p["bleu3"], p["bleu4"], p["rouge"]]
            for v, p in scores.per_video.items()]
    rows.append(["corpus", scores.cider, *scores.bleu, scores.rouge])
    if args.out:
        write_csv(args.out, SCORE_HEADER, rows)
    print(f"CIDEr-D {scores.cider:.4f} BLEU@4 {scores.bleu4:.4f} ROUGE-L {scores.rouge:.4f} "
          f"({len(refs)} videos)")
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_suite

    t0 = time.perf_counter()
    errors = run_suite(seed=0 if args.seed is None else args.seed)
    worst = max(errors.values())
    if args.verbose:
        for name, e in errors.items():
            print(f"{name:16s} {e:.3e}")
    ok = worst < 1e-4
    print(f"max relative error {worst:.3e} over {len(errors)} cases "
          f"({time.perf_counter() - t0:.1f}s): {'ok' if ok else 'FAILED'}")
    return 0 if ok else 1


def cmd_dump_attn(args) -> int:
    model, meta = load_model(args.model)
    cfg = _config(args)
    data = Path(args.data)
    ds = _split(data, args.split, _model_vocab(meta, data), cfg)
    lookup = {v: i for i, v in enumerate(ds.ids)}
    if args.video not in lookup:
        raise InputError(f"no video {args.video!r} in split {args.split}")
    f = ds.features(lookup[args.video])
    (res,) = decode(model, f[None], mode="greedy")
    out = _require_out(args)
    write_attention_csv(out, res.attention)
    print(f"{args.video}: {' '.join(ds.vocab.decode(res.tokens))} -> {out}")
    return 0


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--out", help="output file or directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="hrlcap", description="Hierarchical RL video captioning.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="generate the synthetic multi-activity task")
    s.add_argument("--activities", type=int, default=16)
    s.add_argument("--noise", type=float, default=0.3)
    s.add_argument("--feat-dim", type=int, default=16)
    s.add_argument("--train", type=int, default=2000)
    s.add_argument("--val", type=int, default=200)
    s.add_argument("--test", type=int, default=200)
    s.set_defaults(fn=cmd_synth)

    s = sub.add_parser("train-critic", parents=[common], help="fit the segment-boundary critic")
    s.add_argument("--data", required=True, help="dataset directory (train.jsonl, val.jsonl, vocab.json)")
    s.add_argument("--init", help="start from this model checkpoint")
    s.set_defaults(fn=cmd_train_critic)

    for name, fn, desc in (("train-xe", cmd_train_xe, "cross-entropy training"),
                           ("train-hrl", cmd_train_hrl, "cross-entropy warm start then HRL phases")):
        s = sub.add_parser(name, parents=[common], help=desc)
        s.add_argument("--data", required=True)
        s.add_argument("--init", required=True, help="model checkpoint with a trained critic")
        s.add_argument("--restart", action="store_true", help="ignore an existing last.ckpt")
        if name == "train-hrl":
            s.add_argument("--warm-start", help="skip the XE phase and start from this model")
        s.set_defaults(fn=fn)

    s = sub.add_parser("decode", parents=[common], help="caption a split to JSON lines")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--split", default="test")
    g = s.add_mutually_exclusive_group()
    g.add_argument("--greedy", action="store_true")
    g.add_argument("--sample", action="store_true")
    g.add_argument("--beam", type=int, metavar="K")
    s.add_argument("--max-len", type=int)
    s.add_argument("--top5", action="store_true")
    s.set_defaults(fn=cmd_decode)

    s = sub.add_parser("score", parents=[common], help="CIDEr-D / BLEU / ROUGE-L of decoded captions")
    s.add_argument("--candidates", required=True, help="JSON lines from decode")
    s.add_argument("--references", required=True, help="manifest holding the references")
    s.set_defaults(fn=cmd_score)

    s = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    s.set_defaults(fn=cmd_gradcheck)

    s = sub.add_parser("dump-attn", parents=[common], help="attention weights of one greedy decode")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--split", default="test")
    s.add_argument("--video", required=True)
    s.set_defaults(fn=cmd_dump_attn)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except (HrlcapError, OSError, ValueError, IndexError, FloatingPointError) as exc:
        msg = " ".join(str(exc).split()) or type(exc).__name__
        print(f"hrlcap {args.command}: error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
