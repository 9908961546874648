"""Command-line entry point.

Exit codes: 0 ok, 1 usage or malformed input, 2 verification failure, 3 I/O.
"""
from __future__ import annotations

import argparse
import contextlib
import json
import sys
from dataclasses import replace
from pathlib import Path

from . import datapipe
from .bench import run_bench
from .engine import EngineMode, StreamingEngine, read_events, synthetic_stream
from .errors import ConfigError, ContractViolation, ValidationError
from .oracle import check_stream
from .presets import PRESETS, model_preset
from .streamcache import StreamConfig
from .tinymodel import ModelConfig, init_model
from .training import DEFAULT_VOCAB, build_training_sample

EXIT_OK, EXIT_USAGE, EXIT_VERIFY, EXIT_IO = 0, 1, 2, 3
VERIFY_RTOL = 1e-5


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _budget(text: str) -> int | None:
    if text.lower() in ("inf", "none", "unbounded"):
        return None
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError("budgets must be >= 0")
    return value


def _stream_flags(p: argparse.ArgumentParser, preset: str):
    g = p.add_argument_group("stream config")
    g.add_argument("--preset", choices=sorted(PRESETS), default=preset)
    g.add_argument("--t-sink", type=_budget, help="sink text tokens ('inf' = unbounded)")
    g.add_argument("--t-window", type=_budget, help="recent text tokens ('inf' = unbounded)")
    g.add_argument("--v-window-s", type=_budget, help="seconds of recent vision ('inf' = unbounded)")
    g.add_argument("--fps", type=int)
    g.add_argument("--vision-tps", type=int, help="vision tokens per second")
    g.add_argument("--text-tps", type=int, help="max text tokens per second")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--rope-3d", action="store_true", help="use (t, h, w) rotary indices")
    g.add_argument("--layers", type=int)


def _resolve(args) -> tuple[StreamConfig, ModelConfig]:
    base = PRESETS[args.preset]
    overrides = {}
    for flag, name in (("t_sink", "t_sink"), ("t_window", "t_window"), ("v_window_s", "v_window_seconds"),
                       ("fps", "fps"), ("vision_tps", "vision_tokens_per_second"),
                       ("text_tps", "text_budget_per_second")):
        value = getattr(args, flag)
        if value is not None:
            overrides[name] = value
    config = replace(base, **overrides)
    mcfg = model_preset(args.preset)
    mcfg = replace(mcfg, seed=args.seed, rope_3d=args.rope_3d or mcfg.rope_3d)
    if args.layers:
        mcfg = replace(mcfg, num_layers=args.layers)
    mcfg.validate()
    return config, mcfg


@contextlib.contextmanager
def _output(path: str | None):
    if path is None or path == "-":
        yield sys.stdout
    else:
        with open(path, "w", encoding="utf-8") as fp:
            yield fp


def _load_timeline(path: str):
    text = Path(path).read_text(encoding="utf-8")
    sentences, duration = datapipe.load_transcript(text)
    return datapipe.apply_decisions(sentences), duration


def _write_jsonl(fp, rows):
    for row in rows:
        fp.write(json.dumps(row, sort_keys=True) + "\n")


# -- subcommands -------------------------------------------------------------------


def cmd_stream(args) -> int:
    config, mcfg = _resolve(args)
    mode = EngineMode.parse(args.mode, config)
    engine = StreamingEngine(init_model(mcfg), config, mode, keep_logits=False)
    with open(args.events, encoding="utf-8") as src, _output(args.out) as out:
        for res in engine.run(read_events(src)):
            out.write(json.dumps(res.to_json()) + "\n")
    return EXIT_OK


def cmd_bench(args) -> int:
    config, mcfg = _resolve(args)
    modes = [EngineMode.parse(m, config) for m in args.modes.split(",") if m]
    report = run_bench(modes, args.seconds, config, mcfg, seed=args.seed, reps=args.reps,
                       warmup=args.warmup, context_ceiling=args.context_ceiling, parallel=args.parallel)
    prefix = Path(args.out)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    prefix.with_suffix(".json").write_text(report.to_json() + "\n", encoding="utf-8")
    with open(prefix.with_suffix(".csv"), "w", encoding="utf-8", newline="") as fp:
        report.write_csv(fp)
    for label, s in report.summary.items():
        print(f"{label:16s} growth={s.get('growth_ratio', float('nan')):.3f} "
              f"max_context={s['max_context']} exceeded_at={s['exceeded_at']}")
    return EXIT_OK


def cmd_verify(args) -> int:
    config, mcfg = _resolve(args)
    model = init_model(mcfg)
    failed = 0
    for i in range(args.streams):
        seed = args.seed * 1000 + i
        events = synthetic_stream(args.seconds, config, seed=seed, vocab_size=mcfg.vocab_size,
                                  narration_density=0.5)
        check = check_stream(model, config, events)
        ok = check.ok(VERIFY_RTOL)
        failed += not ok
        print(f"stream {i} seed={seed}: {'PASS' if ok else 'FAIL'} max_rel_err={check.max_rel_err:.2e} "
              f"greedy_checked={check.greedy_checked} mismatches={check.greedy_mismatches} "
              f"retained_mismatches={check.retained_mismatches} position_violations={check.position_violations}")
        for msg in check.failures[:5]:
            print(f"  {msg}")
    print(f"verify: {args.streams - failed}/{args.streams} streams passed")
    return EXIT_VERIFY if failed else EXIT_OK


def cmd_chunk(args) -> int:
    timeline, duration = _load_timeline(args.transcript)
    chunks = datapipe.chunk_transcript(timeline, args.w, args.o, args.min_words, args.duration or duration)
    with _output(args.out) as out:
        _write_jsonl(out, (c.to_dict() for c in chunks))
    return EXIT_OK


def cmd_anneal(args) -> int:
    timeline, _ = _load_timeline(args.transcript)
    clips = datapipe.select_annealing_clips(timeline)
    with _output(args.out) as out:
        _write_jsonl(out, (c.to_dict() for c in clips))
    return EXIT_OK


def cmd_evalseg(args) -> int:
    timeline, duration = _load_timeline(args.transcript)
    length = args.game_length or duration or datapipe.timeline_duration(timeline)
    segs = datapipe.extract_eval_segments(timeline, length, args.segment, args.min_words)
    with _output(args.out) as out:
        _write_jsonl(out, (s.to_dict() for s in segs))
    return EXIT_OK


def cmd_mksample(args) -> int:
    config, _ = _resolve(args)
    timeline, duration = _load_timeline(args.transcript)
    chunk = datapipe.ChunkSpec(args.start, args.start + args.w, args.w, args.o)
    sample = build_training_sample(timeline, chunk, config, vocab_size=args.vocab, duration=duration)
    with _output(args.out) as out:
        out.write(json.dumps(sample.to_dict()) + "\n")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="streamkv", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("stream", help="run the engine over a JSON-lines event file")
    p.add_argument("events")
    p.add_argument("--mode", default="reuse")
    p.add_argument("--out")
    _stream_flags(p, "default")
    p.set_defaults(func=cmd_stream)

    p = sub.add_parser("bench", help="latency/memory sweep; writes OUT.json and OUT.csv")
    p.add_argument("--modes", default="reuse,full,nooverlap:100")
    p.add_argument("--seconds", type=int, default=600)
    p.add_argument("--reps", type=int, default=5)
    p.add_argument("--warmup", type=int)
    p.add_argument("--context-ceiling", type=int)
    p.add_argument("--parallel", action="store_true", help="run modes concurrently (timings unreliable)")
    p.add_argument("--out", default="bench_report")
    _stream_flags(p, "desk")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("verify", help="streaming vs dense-recompute oracle")
    p.add_argument("--seconds", type=int, default=60)
    p.add_argument("--streams", type=int, default=8)
    _stream_flags(p, "toy")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("chunk", help="overlapped SFT chunks from a transcript")
    p.add_argument("transcript")
    p.add_argument("--w", type=int, default=datapipe.SFT_WINDOW)
    p.add_argument("--o", type=int, default=datapipe.SFT_OVERLAP)
    p.add_argument("--min-words", type=int)
    p.add_argument("--duration", type=float)
    p.add_argument("--out")
    p.set_defaults(func=cmd_chunk)

    p = sub.add_parser("anneal", help="annealing clip selection")
    p.add_argument("transcript")
    p.add_argument("--out")
    p.set_defaults(func=cmd_anneal)

    p = sub.add_parser("evalseg", help="fixed-length evaluation segments")
    p.add_argument("transcript")
    p.add_argument("--game-length", type=float)
    p.add_argument("--segment", type=int, default=datapipe.EVAL_SEGMENT)
    p.add_argument("--min-words", type=int, default=datapipe.EVAL_MIN_WORDS)
    p.add_argument("--out")
    p.set_defaults(func=cmd_evalseg)

    p = sub.add_parser("mksample", help="assemble one training sample")
    p.add_argument("transcript")
    p.add_argument("--start", type=int, default=0, help="chunk start second")
    p.add_argument("--w", type=int, default=datapipe.SFT_WINDOW)
    p.add_argument("--o", type=int, default=datapipe.SFT_OVERLAP)
    p.add_argument("--vocab", type=int, default=DEFAULT_VOCAB)
    p.add_argument("--out")
    _stream_flags(p, "default")
    p.set_defaults(func=cmd_mksample)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, ValidationError, ContractViolation) as exc:
        print(f"streamkv: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"streamkv: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
