"""Command-line front end for the experiment pipeline and the service.

Verbs: ingest, train, index, attend, recommend, evaluate, report, serve.
Every verb takes ``--config`` (flat key = value file); individual keys can
be overridden with repeated ``--set key=value``. Exit codes: 0 success,
2 configuration error, 3 data error, 4 numeric failure.

``recommend`` can also act as a thin client against a running service via
``--server URL`` instead of computing locally.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

from .errors import ConfigError, DataError, NumericError

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


def _force_single_thread() -> None:
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS", "VECLIB_MAXIMUM_THREADS"):
        os.environ[var] = "1"


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="blendrec", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--verbose", action="store_true", help="log at INFO level")
    sub = parser.add_subparsers(dest="verb", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", required=True, help="path to the flat key=value run config")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override one config key (repeatable)")
        p.add_argument("--single-thread", action="store_true",
                       help="pin numeric libraries to one thread for bit-stable output")
        p.add_argument("--verbose", action="store_true", help="log at INFO level")

    for verb in ("ingest", "train", "index", "attend", "evaluate", "report"):
        common(sub.add_parser(verb))

    rec = sub.add_parser("recommend")
    common(rec)
    rec.add_argument("--users", default=None,
                     help="comma-separated raw user ids (default: all users)")
    rec.add_argument("--model", default=None, help="scorer tag, e.g. AD or GD")
    rec.add_argument("--output", default=None, help="output path for the batch file")
    rec.add_argument("--server", default=None,
                     help="recommend through a running service at this base URL")
    rec.add_argument("--topn", type=int, default=None, help="list length (service mode)")

    srv = sub.add_parser("serve")
    common(srv)
    srv.add_argument("--host", default="127.0.0.1")
    srv.add_argument("--port", type=int, default=8000)
    return parser


def _load_config(args):
    from . import pipeline

    cfg = pipeline.load_config(args.config)
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, _, value = item.partition("=")
        overrides[key.strip()] = value.strip()
    if overrides:
        text = "\n".join(f"{k} = {v}" for k, v in overrides.items())
        base = {f: getattr(cfg, f) for f in cfg.__dataclass_fields__}
        patch = pipeline.parse_config_text(text)
        for key in overrides:
            base[key] = getattr(patch, key)
        cfg = pipeline.RunConfig(**base)
    if args.single_thread:
        base = {f: getattr(cfg, f) for f in cfg.__dataclass_fields__}
        base["single_thread"] = True
        cfg = pipeline.RunConfig(**base)
    return cfg


def _recommend_via_server(args, cfg) -> int:
    import httpx

    users = args.users.split(",") if args.users else None
    if users is None:
        raise ConfigError("--server mode needs an explicit --users list")
    base = args.server.rstrip("/")
    lines = []
    with httpx.Client(timeout=60) as client:
        for user in users:
            payload = {"user": user, "n": args.topn or max(cfg.topn_sweep)}
            if args.model:
                payload["model"] = args.model
            resp = client.post(f"{base}/recommend", json=payload)
            if resp.status_code != 200:
                raise DataError(f"service error for user {user}: {resp.status_code} {resp.text}")
            body = resp.json()
            for entry in body["items"]:
                lines.append(f"{body['user']}\t{entry['rank']}\t{entry['item']}\t{entry['score']:.6f}")
    text = "\n".join(lines) + ("\n" if lines else "")
    if args.output:
        with open(args.output, "w", encoding="utf-8") as out:
            out.write(text)
    else:
        sys.stdout.write(text)
    return 0


def run_verb(args) -> int:
    from . import pipeline

    cfg = _load_config(args)
    if cfg.single_thread:
        _force_single_thread()

    if args.verb == "ingest":
        run = pipeline.cmd_ingest(cfg)
        print(f"ingested dataset into {run.dir}")
    elif args.verb == "train":
        run = pipeline.cmd_train(cfg)
        print(f"trained artifacts in {run.dir}")
    elif args.verb == "index":
        run = pipeline.cmd_index(cfg)
        print(f"index ready in {run.dir}")
    elif args.verb == "attend":
        run = pipeline.cmd_attend(cfg)
        print(f"attention models ready in {run.dir}")
    elif args.verb == "recommend":
        if args.server:
            return _recommend_via_server(args, cfg)
        users = args.users.split(",") if args.users else None
        path = pipeline.cmd_recommend(cfg, users, output=args.output, tag=args.model)
        print(f"recommendations written to {path}")
    elif args.verb == "evaluate":
        written = pipeline.cmd_evaluate(cfg)
        for name, path in written.items():
            print(f"{name}: {path}")
    elif args.verb == "report":
        sys.stdout.write(pipeline.cmd_report(cfg))
    elif args.verb == "serve":
        import uvicorn

        from .service.app import create_app

        app = create_app(cfg.out_dir)
        uvicorn.run(app, host=args.host, port=args.port, log_level="info")
    return 0


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "single_thread", False):
        _force_single_thread()
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return run_verb(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
