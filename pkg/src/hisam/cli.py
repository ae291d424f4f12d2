"""Command-line entry point.

Exit codes: 0 success, 1 invalid configuration or input, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import sys
from pathlib import Path

from .config import ConfigError, PipelineConfig, dumps, load_config, test_profile, validate_config
from .ingest import DEFAULT_ACTIONS, IngestError, load_action_vocab, load_interactions
from .tensorio import FormatError

log = logging.getLogger("hisam")


class UsageError(ValueError):
    pass


def _config(args) -> PipelineConfig:
    if getattr(args, "config", None):
        cfg = load_config(args.config)
    elif getattr(args, "profile", "default") == "test":
        cfg = test_profile()
    else:
        cfg = PipelineConfig()
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    problems = validate_config(cfg)
    if problems:
        raise ConfigError("invalid config:\n  " + "\n  ".join(problems))
    return cfg


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _data(args):
    from .pipeline import DataPaths

    return DataPaths(Path(getattr(args, "embeddings", "") or ""), Path(args.interactions),
                     Path(args.actions) if args.actions else None)


def cmd_config(args) -> int:
    cfg = test_profile() if args.profile == "test" else PipelineConfig()
    sys.stdout.write(dumps(cfg))
    return 0


def cmd_validate(args) -> int:
    cfg = load_config(args.config)
    problems = validate_config(cfg)
    for p in problems:
        print(p)
    if problems:
        return 1
    print("ok")
    return 0


def cmd_synth(args) -> int:
    from .pipeline import stage_synth

    paths = stage_synth(_config(args), _out(args))
    print(f"{paths.embeddings}\n{paths.interactions}\n{paths.actions}")
    return 0


def cmd_align(args) -> int:
    from .pipeline import stage_align

    print(stage_align(_config(args), Path(args.embeddings), _out(args)))
    return 0


def cmd_tokenize(args) -> int:
    from .pipeline import stage_tokenize

    stack, codes = stage_tokenize(_config(args), Path(args.embeddings), Path(args.heads), _out(args))
    print(f"{stack}\n{codes}")
    return 0


def _train(args, mode: str) -> int:
    from .pipeline import stage_train

    ckpt, curve = stage_train(_config(args), mode, _data(args), Path(args.codebooks), Path(args.codes), _out(args),
                              Path(args.init) if args.init else None)
    print(f"{ckpt}\n{curve}")
    return 0


def cmd_pretrain(args) -> int:
    return _train(args, "pt")


def cmd_sft(args) -> int:
    return _train(args, "sft")


def cmd_eval(args) -> int:
    from .pipeline import stage_eval

    path, metrics = stage_eval(_config(args), _data(args), Path(args.codebooks), Path(args.codes),
                               Path(args.model) if args.model else None, _out(args))
    for k, v in metrics.items():
        print(f"{k},{v!r}")
    return 0


def cmd_score(args) -> int:
    from .dmrq import read_codes
    from .hmat import load_model
    from .seqstream import build_stream, hashed_profile, truncate
    from .serve import prefill, rank_candidates

    model, vocab = load_model(args.model)
    if vocab is None:
        raise UsageError(f"{args.model} carries no vocabulary; use a checkpoint written by pretrain/sft")
    codes = read_codes(args.codes, vocab.n_layers - 1)
    actions = load_action_vocab(args.actions) if args.actions else list(DEFAULT_ACTIONS)
    logs = load_interactions(args.history, actions, set(codes))
    if len(logs) != 1:
        raise UsageError(f"history file must hold exactly one user, found {len(logs)}")
    user = logs[0]
    history = [(codes[e.item_id], e.action_id) for e in user.events]
    stream = truncate(build_stream(hashed_profile(user.user_id, vocab), history, vocab), args.max_items)
    candidates = [ln.strip() for ln in Path(args.candidates).read_text().splitlines() if ln.strip()]
    missing = [c for c in candidates if c not in codes]
    if missing:
        raise UsageError(f"candidates without codes: {missing[:5]}")
    cache = prefill(model, stream)
    scores = rank_candidates(model, cache, [codes[c] for c in candidates], vocab, args.max_candidates)
    for item, s in sorted(zip(candidates, scores), key=lambda x: (-x[1], x[0])):
        print(f"{item}\t{s:.6f}")
    return 0


def _parse_workloads(text: str) -> list[tuple[int, int, int]]:
    out = []
    for part in text.split(","):
        try:
            K, L, C = (int(x) for x in part.split(":"))
        except ValueError as e:
            raise UsageError(f"workload {part!r} is not K:L_i:candidates") from e
        if K < 0 or L < 1 or C < 1:
            raise UsageError(f"workload {part!r} out of range")
        out.append((K, L, C))
    return out


def cmd_bench(args) -> int:
    from .hmat import load_model
    from .seqstream import Vocab
    from .serve import BenchRow, bench_model, bench_serving

    workloads = _parse_workloads(args.workloads)
    if args.model:
        model, vocab = load_model(args.model)
        if vocab is None:
            raise UsageError(f"{args.model} carries no vocabulary")
    else:
        vocab = Vocab(max(L for _, L, _ in workloads), 64)
        model = bench_model(vocab)
    rows = bench_serving(model, vocab, workloads, repeats=args.repeats)
    fh = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        w = csv.writer(fh, lineterminator="\n")
        names = [f.name for f in dataclasses.fields(BenchRow)]
        w.writerow(names)
        for r in rows:
            w.writerow([getattr(r, n) for n in names])
    finally:
        if args.out:
            fh.close()
    return 0


def cmd_run(args) -> int:
    from .pipeline import run_pipeline

    manifest = run_pipeline(_config(args), args.out)
    for a in manifest.artifacts:
        print(f"{a.stage}\t{a.path}\t{a.sha256}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hisam", description="Multimodal semantic-ID tokenizer and anchor-masked ranker.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out=True):
        sp.add_argument("--config", help="JSON config (defaults when omitted)")
        sp.add_argument("--profile", choices=["default", "test"], default="default",
                        help="built-in settings when --config is omitted")
        sp.add_argument("--seed", type=int, help="override the root seed")
        if out:
            sp.add_argument("--out", required=True, help="output directory")

    def seq_inputs(sp):
        sp.add_argument("--interactions", required=True)
        sp.add_argument("--actions", help="action vocabulary file (default: skip, click)")
        sp.add_argument("--codebooks", required=True)
        sp.add_argument("--codes", required=True)

    sp = sub.add_parser("config", help="print a config")
    sp.add_argument("--profile", choices=["default", "test"], default="default")
    sp.set_defaults(fn=cmd_config)

    sp = sub.add_parser("validate", help="check a config file")
    sp.add_argument("--config", required=True)
    sp.set_defaults(fn=cmd_validate)

    sp = sub.add_parser("synth", help="write a planted-rule synthetic dataset")
    common(sp)
    sp.set_defaults(fn=cmd_synth)

    sp = sub.add_parser("align", help="train modality projection heads")
    common(sp)
    sp.add_argument("--embeddings", required=True)
    sp.set_defaults(fn=cmd_align)

    sp = sub.add_parser("tokenize", help="train codebooks and write item codes")
    common(sp)
    sp.add_argument("--embeddings", required=True)
    sp.add_argument("--heads", required=True)
    sp.set_defaults(fn=cmd_tokenize)

    for name, fn, help_ in (("pretrain", cmd_pretrain, "next-token pre-training"),
                            ("sft", cmd_sft, "action fine-tuning")):
        sp = sub.add_parser(name, help=help_)
        common(sp)
        seq_inputs(sp)
        sp.add_argument("--init", help="start from this checkpoint")
        sp.set_defaults(fn=fn)

    sp = sub.add_parser("eval", help="AUC / GAUC on held-out events")
    common(sp)
    seq_inputs(sp)
    sp.add_argument("--model", help="checkpoint (untrained model when omitted)")
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("score", help="rank candidates for one user's history")
    sp.add_argument("--model", required=True)
    sp.add_argument("--codes", required=True)
    sp.add_argument("--history", required=True, help="interactions file holding a single user")
    sp.add_argument("--candidates", required=True, help="one item id per line")
    sp.add_argument("--actions")
    sp.add_argument("--max-items", type=int, default=36)
    sp.add_argument("--max-candidates", type=int, default=64)
    sp.set_defaults(fn=cmd_score)

    sp = sub.add_parser("bench", help="attention cost and latency report")
    sp.add_argument("--workloads", default="10:6:16,50:6:16,100:6:16")
    sp.add_argument("--model")
    sp.add_argument("--repeats", type=int, default=5)
    sp.add_argument("--out", help="CSV path (stdout when omitted)")
    sp.set_defaults(fn=cmd_bench)

    sp = sub.add_parser("run", help="full pipeline with a manifest")
    common(sp)
    sp.set_defaults(fn=cmd_run)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except (ConfigError, UsageError, IngestError, FormatError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001 - reported as a runtime failure
        log.debug("failure", exc_info=True)
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
