"""Command-line entry point: `vizarel serve --data-dir <path>`."""
from __future__ import annotations

import argparse
import logging
import sys

from .server import DEFAULT_HTTP_PORT, DEFAULT_PORT, VizarelServer


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vizarel",
                                     description="RL telemetry server")
    sub = parser.add_subparsers(dest="command", required=True)
    serve = sub.add_parser("serve", help="run the ingestion + query server")
    serve.add_argument("--data-dir", required=True,
                       help="session directory (created on first INIT)")
    serve.add_argument("--host", default="127.0.0.1")
    serve.add_argument("--port", type=int, default=None,
                       help=f"binary ingestion port (default {DEFAULT_PORT}, "
                            "env VIZAREL_PORT)")
    serve.add_argument("--http-port", type=int, default=None,
                       help=f"HTTP query port (default {DEFAULT_HTTP_PORT}, "
                            "env VIZAREL_HTTP_PORT)")
    serve.add_argument("--ui", default=None, metavar="DIR",
                       help="serve dashboard assets from this directory")
    serve.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    if args.command == "serve":
        server = VizarelServer(args.data_dir, host=args.host, port=args.port,
                               http_port=args.http_port, ui_dir=args.ui)
        server.serve_forever()
        return 0
    return 2


if __name__ == "__main__":
    sys.exit(main())
