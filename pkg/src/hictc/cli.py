"""Command-line surface: synth, vocab, train, eval, sweep, align.

Every command is deterministic given its inputs and seed. Validation
problems (bad config keys, illegal grids, missing inputs) exit with code 2
and a message naming the offending field; successful runs exit 0.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from collections import Counter
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import ctc
from . import data as datamod
from . import multitask as mt
from . import numeric as nm
from . import tokenizer as tok
from . import train as trainmod
from .encoder import encoder_forward


class CliError(ValueError):
    """User-facing validation failure; rendered as `error: ...`, exit 2."""


def _synth_spec(doc: dict, seed_flag: int | None) -> datamod.SyntheticSpec:
    known = {f.name: f for f in dataclasses.fields(datamod.SyntheticSpec)}
    kwargs = {}
    for key, value in doc.items():
        if key not in known:
            raise CliError(f"synth spec: unknown key {key!r}")
        if isinstance(value, list):
            value = tuple(value)
        kwargs[key] = value
    if seed_flag is not None:
        kwargs["seed"] = seed_flag
    try:
        return datamod.SyntheticSpec(**kwargs)
    except (TypeError, ValueError) as err:
        raise CliError(f"synth spec: {err}") from None


def _out_dir(path_str: str) -> Path:
    out = Path(path_str)
    if not out.parent.exists():
        raise CliError(f"out directory parent does not exist: {out.parent}")
    out.mkdir(exist_ok=True)
    return out


def cmd_synth(args) -> int:
    doc = {}
    if args.spec:
        with open(args.spec, encoding="utf-8") as fh:
            doc = json.load(fh)
    spec = _synth_spec(doc, args.seed)
    out = _out_dir(args.out)
    generated = datamod.gen_synthetic(spec)
    for split, utts in (("train", generated.train), ("dev", generated.dev),
                        ("test", generated.test)):
        datamod.write_features(out / f"{split}.feats", utts)
        datamod.write_transcripts(out / f"{split}.tsv", utts)
    tok.save_lexicon(out / "lexicon.tsv", generated.lexicon_entries)
    with open(out / "synth.json", "w", encoding="utf-8") as fh:
        json.dump(dataclasses.asdict(spec), fh, sort_keys=True, indent=2)
        fh.write("\n")
    print(f"wrote {len(generated.train)}/{len(generated.dev)}/{len(generated.test)} "
          f"utterances to {out}")
    return 0


def cmd_vocab(args) -> int:
    transcripts = datamod.read_transcripts(args.transcripts)
    corpus = Counter(w for words in transcripts.values() for w in words)
    if not corpus:
        raise CliError(f"no words found in {args.transcripts}")
    vocab = tok.learn_bpe(corpus, target_size=args.size)
    tok.save_vocab(args.out, vocab)
    print(f"wrote {vocab.size}-piece vocabulary ({len(vocab.merges)} merges) to {args.out}")
    return 0


def _load_plan(args, overrides: dict) -> cfgmod.RunPlan:
    merged = cfgmod.load_config(args.config)
    if getattr(args, "seed", None) is not None:
        merged["seed"] = args.seed
    if getattr(args, "out", None) is not None:
        merged["out_dir"] = args.out
    for path, value in overrides.items():
        if value is None:
            continue
        node = merged
        *heads, leaf = path.split(".")
        for key in heads:
            node = node[key]
        node[leaf] = value
    return cfgmod.build_plan(cfgmod.validate_config(merged))


def _require(value, field: str):
    if value is None:
        raise CliError(f"{field}: required")
    return value


def _load_prepared(plan: cfgmod.RunPlan):
    d = plan.data
    train_utts = datamod.load_utterances(
        _require(d["train_features"], "data.train_features"),
        _require(d["train_transcripts"], "data.train_transcripts"),
    )
    dev_utts = datamod.load_utterances(
        _require(d["dev_features"], "data.dev_features"),
        _require(d["dev_transcripts"], "data.dev_transcripts"),
    )
    vocab = tok.load_vocab(_require(plan.vocab_path, "vocab_path"))
    lexicon = tok.load_lexicon(_require(plan.lexicon_path, "lexicon_path"))
    return datamod.prepare(
        train_utts, dev_utts, vocab, lexicon,
        seed=plan.seed, cap=d["cap"], fraction=d["fraction"],
        batch_sizes=tuple(d["batch_sizes"]),
    )


def _train_overrides(args) -> dict:
    return {
        "multitask.regime": args.regime,
        "multitask.lambda": getattr(args, "lam", None),
        "multitask.aux_layer": args.aux_layer,
        "data.fraction": args.fraction,
    }


def cmd_train(args) -> int:
    plan = _load_plan(args, _train_overrides(args))
    prepared = _load_prepared(plan)
    out = _out_dir(plan.out_dir)
    result = mt.run_regime(
        prepared, plan.encoder, plan.spec, plan.adam, plan.schedule, plan.seed,
        metrics_path=out / "metrics.jsonl",
        timing_path=out / "timing.jsonl",
        checkpoint_path=out / "checkpoint.bin",
        pretrain_metrics_path=out / "pretrain_metrics.jsonl",
    )
    if result.pretrain_ckpt is not None:
        mt.save_pretrain_checkpoint(out / "pretrain.bin", result.pretrain_ckpt)
    summary = {
        "status": result.result.status,
        "select_by": result.result.select_by,
        "best_score": result.result.best_score
        if np.isfinite(result.result.best_score) else None,
        "best_update": result.result.best_update,
        "updates_run": result.result.updates_run,
        "skipped_train": len(prepared.skipped_train),
        "oov_skipped": len(prepared.oov_skipped),
        "out_dir": str(out),
    }
    with open(out / "result.json", "w", encoding="utf-8") as fh:
        json.dump(summary, fh, sort_keys=True, indent=2)
        fh.write("\n")
    print(json.dumps(summary, sort_keys=True))
    return 0


def _model_from_config(plan: cfgmod.RunPlan, checkpoint: str) -> tuple[mt.MultitaskModel, tok.Lexicon]:
    vocab = tok.load_vocab(_require(plan.vocab_path, "vocab_path"))
    lexicon = tok.load_lexicon(_require(plan.lexicon_path, "lexicon_path"))
    model = mt.build_model(plan.encoder, plan.spec, vocab.size, lexicon.num_phones,
                           seed=plan.seed, vocab=vocab)
    try:
        trainmod.load_checkpoint(checkpoint, model)
    except (KeyError, ValueError) as err:
        raise CliError(f"checkpoint {checkpoint}: {err}") from None
    return model, lexicon


def _load_eval_utts(args, plan: cfgmod.RunPlan, lexicon: tok.Lexicon, vocab):
    feats = args.features or plan.data["dev_features"]
    trans = args.transcripts or plan.data["dev_transcripts"]
    utts = datamod.load_utterances(
        _require(feats, "data.dev_features (or --features)"),
        _require(trans, "data.dev_transcripts (or --transcripts)"),
    )
    utts = datamod.normalize_per_speaker(utts)
    return datamod.attach_labels(utts, vocab, lexicon)


def cmd_eval(args) -> int:
    plan = _load_plan(args, {})
    model, lexicon = _model_from_config(plan, args.checkpoint)
    utts = _load_eval_utts(args, plan, lexicon, model.vocab)
    report = {
        "utterances": len(utts),
        "wer": trainmod.evaluate(model, utts, "word"),
        "per": trainmod.evaluate(model, utts, "phone") if model.eval_phone_metrics else None,
        "checkpoint": args.checkpoint,
    }
    print(json.dumps(report, sort_keys=True))
    return 0


_AXES = ("lambda", "layer", "fraction", "regime")


def _parse_grid(axis: str, grid: str, num_layers: int) -> list:
    raw = [cell.strip() for cell in grid.split(",") if cell.strip()]
    if not raw:
        raise CliError("sweep grid: empty")
    if axis == "lambda":
        values = [float(v) for v in raw]
        for v in values:
            if not 0.0 <= v <= 1.0:
                raise CliError(f"sweep grid: lambda {v} outside [0, 1]")
        return values
    if axis == "layer":
        values = [int(v) for v in raw]
        for v in values:
            if not 1 <= v <= num_layers:
                raise CliError(f"sweep grid: layer {v} outside 1..{num_layers}")
        return values
    if axis == "fraction":
        values = [float(v) for v in raw]
        for v in values:
            if not 0.0 < v <= 1.0:
                raise CliError(f"sweep grid: fraction {v} outside (0, 1]")
        return values
    values = [str(v) for v in raw]
    for v in values:
        if v not in mt.REGIMES:
            raise CliError(f"sweep grid: unknown regime {v!r}")
    return values


_AXIS_KEY = {
    "lambda": "multitask.lambda",
    "layer": "multitask.aux_layer",
    "fraction": "data.fraction",
    "regime": "multitask.regime",
}


def _cell_plan(merged: dict, axis: str, value) -> cfgmod.RunPlan:
    doc = json.loads(json.dumps(merged))
    node = doc
    *heads, leaf = _AXIS_KEY[axis].split(".")
    for key in heads:
        node = node[key]
    node[leaf] = value
    # single-loss regimes require lambda 1; force it so a regime sweep with a
    # multitask-flavoured base config does not die on the baseline cell
    if axis == "regime" and value in ("baseline", "pretrain"):
        doc["multitask"]["lambda"] = 1.0
    return cfgmod.build_plan(cfgmod.validate_config(doc))


def _best_row(result: trainmod.TrainResult) -> dict:
    rows = [r for r in result.metrics if r.get("update_count") == result.best_update]
    return rows[-1] if rows else {}


def cmd_sweep(args) -> int:
    merged = cfgmod.load_config(args.config)
    if args.seed is not None:
        merged["seed"] = args.seed
    base_plan = cfgmod.build_plan(merged)
    grid = _parse_grid(args.axis, args.grid, base_plan.encoder.num_layers)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [merged["seed"]]

    plans = []
    for value in grid:
        for seed in seeds:
            plan = _cell_plan(merged, args.axis, value)
            plans.append((value, seed, dataclasses.replace(plan, seed=seed)))

    lines = ["axis\tvalue\tseed\tregime\tlambda\taux_layer\tfraction\tstatus\tdev_wer\tdev_per"]
    for value, seed, plan in plans:
        row = {
            "regime": plan.spec.regime, "lambda": plan.spec.lam,
            "aux_layer": plan.spec.aux_layer, "fraction": plan.data["fraction"],
        }
        try:
            prepared = _load_prepared(plan)
            res = mt.run_regime(prepared, plan.encoder, plan.spec, plan.adam,
                                plan.schedule, plan.seed)
            status = res.result.status
            if status == "did_not_converge":
                wer = per = "X"
            else:
                best = _best_row(res.result)
                wer = best.get("dev_wer")
                per = best.get("dev_per")
        except CliError:
            raise
        except Exception as err:  # a broken cell must not sink the sweep
            status, wer, per = f"error: {err}", "X", "X"
        cells = [args.axis, value, seed, row["regime"], row["lambda"],
                 row["aux_layer"], row["fraction"], status,
                 "-" if wer is None else wer, "-" if per is None else per]
        lines.append("\t".join(str(c) for c in cells))

    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
        print(f"wrote {len(lines) - 1} sweep rows to {args.out}")
    else:
        sys.stdout.write(text)
    return 0


def _even_word_spans(words, frames: int) -> list[str]:
    cells = ["_"] * frames
    if not words:
        return cells
    spans = np.array_split(np.arange(frames), len(words))
    for word, span in zip(words, spans):
        for idx in span:
            cells[int(idx)] = word
    return cells


def cmd_align(args) -> int:
    plan = _load_plan(args, {})
    model, lexicon = _model_from_config(plan, args.checkpoint)
    utts = _load_eval_utts(args, plan, lexicon, model.vocab)
    if args.limit:
        utts = utts[: args.limit]
    if not model.has_phone_head:
        print("warning: checkpoint has no phone head; emitting subword rows only",
              file=sys.stderr)

    id_to_phone = lexicon.id_to_phone
    lines = []
    for u in utts:
        with nm.no_grad():
            taps = encoder_forward([u.features], model.cfg, model.layers, mode="eval")
            sub_logits = mt.apply_head(taps.tap(len(model.layers)), model.subword_head)
            ph_logits = (
                mt.apply_head(taps.tap(model.aux_layer), model.phone_head)
                if model.has_phone_head else None
            )
        frames = int(taps.lengths[0])
        sub_path = ctc.greedy_path(sub_logits.data[:frames, 0, :])
        sub_cells = ["_" if i == ctc.BLANK else model.vocab.id_to_piece[int(i)]
                     for i in sub_path]
        lines.append("\t".join([u.uid, "subword"] + sub_cells))
        if ph_logits is not None:
            ph_path = ctc.greedy_path(ph_logits.data[:frames, 0, :])
            ph_cells = ["_" if i == ctc.BLANK else id_to_phone[int(i)] for i in ph_path]
            lines.append("\t".join([u.uid, "phone"] + ph_cells))
        lines.append("\t".join([u.uid, "truth"] + _even_word_spans(list(u.transcript), frames)))

    text = "\n".join(lines) + "\n"
    Path(args.out).write_text(text, encoding="utf-8")
    print(f"wrote alignments for {len(utts)} utterances to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hictc",
        description="Hierarchical multitask CTC recognizer: data, training, analysis.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate the seeded synthetic dataset")
    p.add_argument("--spec", help="JSON file of generator knobs")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("vocab", help="learn a wordpiece vocabulary from transcripts")
    p.add_argument("--transcripts", required=True)
    p.add_argument("--size", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_vocab)

    p = sub.add_parser("train", help="train under the configured regime")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None, help="override out_dir")
    p.add_argument("--regime", choices=mt.REGIMES, default=None)
    p.add_argument("--lam", type=float, default=None, dest="lam",
                   help="subword loss weight override")
    p.add_argument("--aux-layer", type=int, default=None)
    p.add_argument("--fraction", type=float, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--features", default=None)
    p.add_argument("--transcripts", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="grid of runs along one axis, TSV out")
    p.add_argument("--config", required=True)
    p.add_argument("--axis", choices=_AXES, required=True)
    p.add_argument("--grid", required=True, help="comma-separated cell values")
    p.add_argument("--seeds", default=None, help="comma-separated seeds, one run per cell-seed")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None, help="TSV path (stdout if omitted)")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("align", help="per-frame argmax alignment table")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--features", default=None)
    p.add_argument("--transcripts", default=None)
    p.add_argument("--limit", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_align)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except tok.OovError as err:
        print(f"error: {err.args[0]}", file=sys.stderr)
        return 2
    except (ValueError, FileNotFoundError) as err:
        # every domain validation error in the package subclasses ValueError
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
