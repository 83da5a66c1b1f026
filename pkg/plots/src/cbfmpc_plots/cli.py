"""Command-line entry: render figures from a job config file."""

from __future__ import annotations

import argparse
import json
import sys
from typing import List, Optional

from .jobs import PlotSchemaError, load_job
from .render import render


def main(argv: Optional[List[str]] = None) -> int:
    parser = argparse.ArgumentParser(
        prog="cbfmpc-plots",
        description="Render feasibility maps and barrier-evolution figures "
                    "from cbfmpc CSV artifacts.")
    sub = parser.add_subparsers(dest="command")
    p_render = sub.add_parser("render", help="render one plot job")
    p_render.add_argument("job", help="YAML job config")
    p_render.add_argument("--out", default=None, help="override the output path")
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code not in (0, None) else 0
    if args.command != "render":
        parser.print_help()
        return 2
    try:
        job = load_job(args.job)
        if args.out:
            job.output = type(job.output)(args.out)
        path = render(job)
    except PlotSchemaError as exc:
        print(json.dumps({"error": "schema", "message": str(exc)}), file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(json.dumps({"error": "input", "message": str(exc)}), file=sys.stderr)
        return 2
    print(path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
