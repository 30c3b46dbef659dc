"""Command-line client for the pipeline service.

Every subcommand builds a request and sends it over HTTP: against a live
server when ``--server`` is given, otherwise against the application mounted
in-process, which needs no network and keeps runs bit-reproducible. Heavy
imports happen after ``--threads`` pins the native thread pools, which is
what makes ``--threads 1`` a reproducibility guarantee.

Exit codes: 0 ok, 2 config error, 3 data/format error, 4 numerical error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERICS = 4

_KIND_TO_EXIT = {"config": EXIT_CONFIG, "data": EXIT_DATA, "numerics": EXIT_NUMERICS}


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--seed", type=int, default=0, help="RNG seed (u64)")
    parser.add_argument("--threads", type=int, default=1,
                        help="native thread pool size; 1 guarantees bit-reproducibility")
    parser.add_argument("--server", default=None,
                        help="base URL of a running service; default runs in-process")
    parser.add_argument("--config", default=None, help="structured-text config file")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="jsmkit",
        description="Saliency-guided debugging of 3D classifiers: data, registration, training, ablation",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic multimodal dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--subjects-per-class", default="40",
                   help="one count or four comma-separated counts")
    p.add_argument("--test-fraction", type=float, default=0.25)
    p.add_argument("--dims", type=int, default=16)
    p.add_argument("--no-confounder", action="store_true")
    p.add_argument("--decorrelated-train", action="store_true",
                   help="stamp random-class markers on the train split too")
    _add_common(p)

    p = sub.add_parser("register", help="register a moving volume to a fixed volume")
    p.add_argument("--moving", required=True)
    p.add_argument("--fixed", required=True)
    p.add_argument("--out", required=True, help="output displacement field file")
    p.add_argument("--cost-log", default=None)
    p.add_argument("--alpha", type=float, default=0.1)
    p.add_argument("--bins", type=int, default=32)
    p.add_argument("--levels", type=int, default=3)
    p.add_argument("--max-iters", type=int, default=100)
    p.add_argument("--step", type=float, default=1.0)
    p.add_argument("--smooth-sigma", type=float, default=1.0)
    p.add_argument("--tol", type=float, default=1e-6)
    _add_common(p)

    p = sub.add_parser("jsm", help="turn a displacement field into a saliency map")
    p.add_argument("--field", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--flat-tol", type=float, default=0.02)
    p.add_argument("--summary", default=None, help="write class-count summary here")
    _add_common(p)

    p = sub.add_parser("train", help="train classifier(s) on a dataset directory")
    p.add_argument("--data", required=True)
    p.add_argument("--mode", choices=("early", "late"), default="early")
    p.add_argument("--out", required=True)
    p.add_argument("--lambda", dest="lam", type=float, default=1.0)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--learning-rate", type=float, default=0.01)
    p.add_argument("--no-oversample", action="store_true")
    _add_common(p)

    p = sub.add_parser("eval", help="evaluate saved models on a dataset split")
    p.add_argument("--data", required=True)
    p.add_argument("--models", required=True, help="directory holding model checkpoints")
    p.add_argument("--mode", choices=("early", "late"), default="early")
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--out", default=None)
    _add_common(p)

    p = sub.add_parser("ablate", help="train and compare penalty-on vs penalty-off arms")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--modes", default="early,late")
    p.add_argument("--lambda", dest="lam", type=float, default=1.0)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--learning-rate", type=float, default=0.01)
    p.add_argument("--sweep-lambdas", default=None,
                   help="comma-separated penalty weights to sweep and log")
    _add_common(p)

    p = sub.add_parser("explain", help="export gradient overlays for one subject")
    p.add_argument("--data", required=True)
    p.add_argument("--models", required=True)
    p.add_argument("--mode", choices=("early", "late"), default="early")
    p.add_argument("--subject", required=True)
    p.add_argument("--out", required=True)
    _add_common(p)

    p = sub.add_parser("serve", help="run the HTTP service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.add_argument("--threads", type=int, default=0)
    return parser


def _pin_threads(n: int) -> None:
    if n and n > 0:
        for var in (
            "OMP_NUM_THREADS",
            "OPENBLAS_NUM_THREADS",
            "MKL_NUM_THREADS",
            "NUMEXPR_NUM_THREADS",
        ):
            os.environ[var] = str(n)


def _client(server: str | None):
    if server:
        import httpx

        return httpx.Client(base_url=server, timeout=None)
    import warnings

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DeprecationWarning)
        from starlette.testclient import TestClient

    from .service import create_app

    return TestClient(create_app())


def _post(client, path: str, payload: dict) -> int:
    response = client.post(path, json=payload)
    try:
        body = response.json()
    except ValueError:
        print(response.text, file=sys.stderr)
        return EXIT_DATA
    if response.status_code == 200:
        print(json.dumps(body, indent=2))
        return EXIT_OK
    if isinstance(body, dict) and "error" in body:
        err = body["error"]
        print(f"error ({err.get('kind')}): {err.get('message')}", file=sys.stderr)
        return _KIND_TO_EXIT.get(err.get("kind"), EXIT_DATA)
    # pydantic request validation
    print(json.dumps(body, indent=2), file=sys.stderr)
    return EXIT_CONFIG


def _counts(raw: str):
    parts = [int(v) for v in raw.split(",")]
    return parts[0] if len(parts) == 1 else parts


def _train_options(args) -> dict:
    options = {
        "lambda": args.lam,
        "epochs": args.epochs,
        "learning_rate": args.learning_rate,
    }
    if args.config:
        from .training import load_train_config

        cfg, _ = load_train_config(args.config)
        options = {
            "lambda": cfg.lam,
            "feature_weight": cfg.feature_weight,
            "debug_weight": cfg.debug_weight,
            "flat_tol": cfg.flat_tol,
            "epochs": cfg.epochs,
            "batch_size": cfg.batch_size,
            "learning_rate": cfg.learning_rate,
            "activation": cfg.activation,
            "beta": cfg.beta,
            "channels": list(cfg.channels),
        }
    return options


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    _pin_threads(getattr(args, "threads", 1))

    if args.command == "serve":
        import uvicorn

        from .service import create_app

        uvicorn.run(create_app(), host=args.host, port=args.port)
        return EXIT_OK

    client = _client(args.server)
    if args.command == "gen-data":
        payload = {
            "out_dir": args.out,
            "seed": args.seed,
            "subjects_per_class": _counts(args.subjects_per_class),
            "test_fraction": args.test_fraction,
            "confounder": not args.no_confounder,
            "phantom": {
                "dims": args.dims,
                "confound_train": not args.decorrelated_train,
            },
        }
        return _post(client, "/gen-data", payload)

    if args.command == "register":
        payload = {
            "moving": args.moving,
            "fixed": args.fixed,
            "out_field": args.out,
            "cost_log": args.cost_log,
            "options": {
                "alpha": args.alpha,
                "bins": args.bins,
                "levels": args.levels,
                "step": args.step,
                "max_iters": args.max_iters,
                "smooth_sigma": args.smooth_sigma,
                "tol": args.tol,
            },
        }
        return _post(client, "/register", payload)

    if args.command == "jsm":
        payload = {
            "field": args.field,
            "out": args.out,
            "flat_tol": args.flat_tol,
            "summary": args.summary,
        }
        return _post(client, "/jsm", payload)

    if args.command == "train":
        payload = {
            "dataset_dir": args.data,
            "mode": args.mode,
            "out_dir": args.out,
            "seed": args.seed,
            "options": _train_options(args),
            "oversample": not args.no_oversample,
        }
        return _post(client, "/train", payload)

    if args.command == "eval":
        payload = {
            "dataset_dir": args.data,
            "model_dir": args.models,
            "mode": args.mode,
            "split": args.split,
            "out_dir": args.out,
        }
        return _post(client, "/eval", payload)

    if args.command == "ablate":
        payload = {
            "dataset_dir": args.data,
            "out_dir": args.out,
            "modes": args.modes.split(","),
            "seed": args.seed,
            "options": _train_options(args),
        }
        if args.sweep_lambdas:
            payload["sweep_lambdas"] = [float(v) for v in args.sweep_lambdas.split(",")]
        return _post(client, "/ablate", payload)

    if args.command == "explain":
        payload = {
            "dataset_dir": args.data,
            "model_dir": args.models,
            "mode": args.mode,
            "subject_id": args.subject,
            "out_dir": args.out,
        }
        return _post(client, "/explain", payload)

    raise AssertionError(f"unhandled command {args.command}")


if __name__ == "__main__":
    sys.exit(main())
