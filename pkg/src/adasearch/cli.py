"""Command line entry point: ``adasearch <command> ...``.

Exit codes: 0 success, 2 configuration error, 3 attack-program parse error,
4 runtime error, 5 budget error (artifacts are still written).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np
import yaml

from . import io as aio
from .dsl import DSLError, format_program, parse
from .metrics import evaluate
from .models import Detector, accuracy, make_defended, make_fixture_dataset, train_fixture
from .search import SearchConfig, config_from_dict, greedy_sequence_search

log = logging.getLogger("adasearch")

EXIT_CONFIG, EXIT_PARSE, EXIT_RUNTIME, EXIT_BUDGET = 2, 3, 4, 5


class ConfigError(Exception):
    pass


class BudgetError(Exception):
    pass


def _load_config(path) -> dict:
    if path is None:
        return {}
    try:
        data = yaml.safe_load(Path(path).read_text())
    except (OSError, yaml.YAMLError) as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"config {path} must be a mapping")
    return data


def _dumps(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True, allow_nan=False, default=_default) + "\n"


def _default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(f"cannot serialise {type(o).__name__}")


def _sha(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _read_program(path):
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read program {path}: {e}") from None
    return parse(text)


def _need(path, what):
    if path is None or not Path(path).exists():
        raise ConfigError(f"{what} file {path!r} does not exist")
    return path


# --------------------------------------------------------------------------
# commands


def cmd_train_fixture(args) -> int:
    cfg = {"kind": "bars", "n": 400, "arch": "mlp", "epochs": 30, "seed": 0, **_load_config(args.config)}
    for k in ("kind", "n", "arch", "epochs", "seed"):
        if getattr(args, k) is not None:
            cfg[k] = getattr(args, k)
    data = make_fixture_dataset(cfg["kind"], int(cfg["n"]), int(cfg["seed"]))
    model = train_fixture(data, cfg["arch"], int(cfg["epochs"]), int(cfg["seed"]))
    aio.save_model(model, args.out)
    if args.data_out:
        aio.save_dataset(data, args.data_out)
    print(f"trained {cfg['arch']} on {data.name}: train accuracy {accuracy(model, data):.4f} -> {args.out}")
    return 0


def cmd_make_data(args) -> int:
    data = make_fixture_dataset(args.kind, args.n, args.seed)
    aio.save_dataset(data, args.out)
    print(f"wrote {data.name} ({len(data)} samples) -> {args.out}")
    return 0


def _parse_defense(text: str) -> dict:
    # "quantize:levels=8" / "reverse-sigmoid:beta=0.7,gamma=0.3"
    kind, _, rest = text.partition(":")
    out: dict = {"type": kind}
    for item in filter(None, rest.split(",")):
        k, eq, v = item.partition("=")
        if not eq:
            raise ConfigError(f"bad defense parameter {item!r}")
        out[k] = yaml.safe_load(v)
    return out


def cmd_defend(args) -> int:
    cfg = _load_config(args.config)
    defenses = list(cfg.get("defenses", [])) + [_parse_defense(d) for d in args.defense or []]
    det = args.detector if args.detector is not None else cfg.get("detector")
    if isinstance(det, dict):
        det = Detector(float(det["threshold"]), det.get("kind", "confidence-threshold"))
    model = aio.load_model(_need(args.model, "model"))
    try:
        out = make_defended(model, defenses, det)
    except (ValueError, TypeError) as e:
        raise ConfigError(str(e)) from None
    aio.save_model(out, args.out)
    print(f"defended model ({len(defenses)} defenses, detector={det}) -> {args.out}")
    return 0


_FLAG_MAP = {"eps": "eps", "seed": "seed", "budget_sec": "budget_sec", "trials": "k", "init_samples": "n",
             "seq_len": "m", "lam": "lam", "clock": "clock"}


def _search_config(args) -> SearchConfig:
    file_cfg = _load_config(args.config)
    base = SearchConfig.desk_scale() if args.desk_scale else SearchConfig()
    over = {dst: getattr(args, src) for src, dst in _FLAG_MAP.items() if getattr(args, src) is not None}
    try:
        cfg = config_from_dict({**file_cfg, **over}, base)
        # re-run validation after replace()
        return SearchConfig(**{f.name: getattr(cfg, f.name) for f in fields(cfg)})
    except (ValueError, TypeError, DSLError) as e:
        raise ConfigError(f"invalid search config: {e}") from None


def cmd_search(args) -> int:
    cfg = _search_config(args)
    model = aio.load_model(_need(args.model, "model"))
    data = aio.load_dataset(_need(args.data, "dataset"))
    out = Path(args.out_dir)
    res = greedy_sequence_search(model, data, cfg, log=log.info)
    program_text = format_program(res.program) if res.program else ""
    report = {"command": "search", "model": {"path": str(args.model), "sha256": _sha(args.model)},
              "data": {"path": str(args.data), "sha256": _sha(args.data)}, **res.report}
    report["program"] = program_text
    aio.atomic_write(out / "report.json", _dumps(report))
    aio.atomic_write(out / "report.txt", _search_text(report))
    aio.atomic_write(out / "program.txt", program_text + "\n" if program_text else "")
    aio.save_model(res.surrogate, out / "surrogate.bin")
    aio.atomic_write(out / "timing.json", _dumps(res.timing))
    print(program_text or "(no attack found)")
    winners = [r["winner"]["score"] for r in report["rounds"]]
    if not res.program or any(w == "-inf" for w in winners):
        raise BudgetError("every trial of some round exceeded the per-sample budget")
    return 0


def _search_text(report: dict) -> str:
    lines = ["attack search report", ""]
    tr = report.get("transform") or {}
    lines.append(f"transformation policy: {json.dumps(tr.get('policy'), sort_keys=True)}")
    lines.append(f"default-attack score: native {tr.get('native_score')} -> surrogate {tr.get('final_score')}")
    for r in report["rounds"]:
        lines += ["", f"round {r['round']}: {r['n_remaining']} samples remaining, "
                  f"halving survivors {r['sha']['survivors']} on sizes {r['sha']['sample_sizes']}"]
        lines.append(f"  {'#':>3} {'score':>9} {'timeout':>7}  program")
        for t in r["trials"]:
            s = t["score"] if isinstance(t["score"], str) else f"{t['score']:.4f}"
            lines.append(f"  {t['index']:>3} {s:>9} {str(t['timed_out']):>7}  {t['program']}")
        lines.append(f"  winner: {r['winner']['program']}")
    if report.get("early_stop"):
        lines.append("\nstopped early: every sample was broken")
    lines += ["", "program:", report["program"] or "(empty)"]
    return "\n".join(lines) + "\n"


def _run_eval(args):
    model = aio.load_model(_need(args.model, "model"))
    data = aio.load_dataset(_need(args.data, "dataset"))
    if args.ids:
        src = Path(args.ids[1:]).read_text() if args.ids.startswith("@") else args.ids
        wanted = [int(t) for t in src.replace(",", " ").split()]
        pos = {int(s): i for i, s in enumerate(data.ids)}
        missing = [w for w in wanted if w not in pos]
        if missing:
            raise ConfigError(f"sample ids not in dataset: {missing[:5]}")
        data = data.subset([pos[w] for w in wanted])
    program = _read_program(_need(args.program, "program"))
    sur = aio.load_model(args.surrogate) if args.surrogate else None
    if args.eps is None or args.eps < 0:
        raise ConfigError("--eps must be given and non-negative")
    rep = evaluate(model, program, data, args.eps, args.draws, surrogate=sur, seed=args.seed,
                   budget=args.budget_sec, clock=args.clock or "wall", jobs=args.jobs)
    rep.config.update(model_sha256=_sha(args.model), data_sha256=_sha(args.data), lam=args.lam)
    return rep


def cmd_attack(args) -> int:
    rep = _run_eval(args)
    out = Path(args.out_dir)
    d = rep.to_dict()
    d["summary"]["score"] = rep.score(args.lam)
    aio.atomic_write(out / "eval_report.json", _dumps(d))
    aio.atomic_write(out / "eval_report.txt", rep.to_text())
    aio.atomic_write(out / "records.csv", rep.to_csv())
    aio.atomic_write(out / "eval_timing.json", _dumps({"wall_seconds": rep.wall_seconds}))
    s = rep.summary()
    print(f"Rerr {s['rerr']:.4f}  robust accuracy {s['robust_accuracy']:.4f}  ASR {s['asr']}")
    return 0


def cmd_evaluate(args) -> int:
    rep = _run_eval(args)
    s = rep.summary()
    s["program"] = rep.program
    if args.out:
        aio.atomic_write(args.out, _dumps(s))
    print(f"Rerr {s['rerr']:.4f}\nrobust accuracy {s['robust_accuracy']:.4f}")
    return 0


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="adasearch", description="adaptive attack search on small classifiers")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train-fixture", help="train a fixture classifier")
    t.add_argument("--config")
    t.add_argument("--kind", choices=["bars", "blobs"])
    t.add_argument("--n", type=int)
    t.add_argument("--arch", choices=["mlp", "cnn"])
    t.add_argument("--epochs", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--out", required=True)
    t.add_argument("--data-out")
    t.set_defaults(func=cmd_train_fixture)

    d = sub.add_parser("make-data", help="write a fixture dataset")
    d.add_argument("--kind", choices=["bars", "blobs"], default="bars")
    d.add_argument("--n", type=int, default=200)
    d.add_argument("--seed", type=int, default=1)
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_make_data)

    f = sub.add_parser("defend", help="wrap a model with defenses and a detector")
    f.add_argument("--model", required=True)
    f.add_argument("--config", help="YAML/JSON with a `defenses:` list and optional `detector:`")
    f.add_argument("--defense", action="append", help="e.g. quantize:levels=8 (repeatable)")
    f.add_argument("--detector", type=float, help="confidence threshold")
    f.add_argument("--out", required=True)
    f.set_defaults(func=cmd_defend)

    s = sub.add_parser("search", help="search an attack program")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--config")
    s.add_argument("--out-dir", required=True)
    s.add_argument("--desk-scale", action="store_true", help="m=2, k=16, n=50")
    _common(s)
    s.add_argument("--trials", type=int)
    s.add_argument("--init-samples", type=int)
    s.add_argument("--seq-len", type=int)
    s.set_defaults(func=cmd_search)

    for name, fn, helptext in (("attack", cmd_attack, "run a program and write reports"),
                               ("evaluate", cmd_evaluate, "print Rerr / robust accuracy of a program")):
        a = sub.add_parser(name, help=helptext)
        a.add_argument("--model", required=True)
        a.add_argument("--data", required=True)
        a.add_argument("--program", required=True)
        a.add_argument("--surrogate")
        a.add_argument("--ids", help="comma-separated sample ids or @file")
        a.add_argument("--draws", type=int)
        a.add_argument("--jobs", type=int, default=1)
        _common(a)
        if name == "attack":
            a.add_argument("--out-dir", required=True)
        else:
            a.add_argument("--out")
        a.set_defaults(func=fn)
    return p


def _common(p):
    p.add_argument("--eps", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--budget-sec", type=float)
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--clock", choices=["wall", "queries"])


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if args.command in ("attack", "evaluate"):
        args.seed = 0 if args.seed is None else args.seed
        args.lam = 0.01 if args.lam is None else args.lam
    try:
        return args.func(args)
    except DSLError as e:
        print(f"parse error: {e}", file=sys.stderr)
        return EXIT_PARSE
    except (ConfigError, aio.FormatError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except BudgetError as e:
        print(f"budget error: {e}", file=sys.stderr)
        return EXIT_BUDGET
    except Exception as e:  # noqa: BLE001 - categorised exit
        log.debug("runtime failure", exc_info=True)
        print(f"runtime error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
