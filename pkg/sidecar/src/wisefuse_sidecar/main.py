"""Command-line launcher."""

import argparse
import sys

import uvicorn

from .app import SidecarConfig, create_app


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="wisefuse-sidecar")
    parser.add_argument("--model-id", default="echo")
    parser.add_argument("--dim", type=int, default=32)
    parser.add_argument("--seed", type=int, default=0,
                        help="echo-mode stream seed")
    parser.add_argument("--batch-max", type=int, default=64)
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument("--port", type=int, default=8077)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    config = SidecarConfig(model_id=args.model_id, dim=args.dim, seed=args.seed,
                           batch_max=args.batch_max, port=args.port)
    try:
        app = create_app(config)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return 0


if __name__ == "__main__":
    sys.exit(main())
