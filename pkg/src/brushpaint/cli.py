"""Command-line client.

Every subcommand builds a request model and either runs it in-process or
posts it to a running service (``--server``). Exit codes: 0 success,
1 usage/config, 2 data, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from pydantic import BaseModel

from . import __version__, ops
from .config import load_config, parse_override
from .errors import BrushpaintError, DataError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _abs(p: str | None) -> str | None:
    return None if p is None else str(Path(p).resolve())


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="brushpaint", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("--config", help="JSON run config")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config value, e.g. losses.eta=0")
    p.add_argument("--server", help="service URL; default runs in-process")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("pretrain", help="stage 0: train the UNet alone")
    s.add_argument("--workdir", required=True)
    s.add_argument("--steps", type=int)
    s.add_argument("--resume")

    s = sub.add_parser("train", help="stage 1: freeze the UNet, train brush branch and style extractor")
    s.add_argument("--base", required=True, help="stage-0 checkpoint")
    s.add_argument("--workdir", required=True)
    s.add_argument("--steps", type=int)
    s.add_argument("--annotations", help="JSONL dataset; annotated on the fly when omitted")
    s.add_argument("--resume")
    s.add_argument("--eta", type=float, help="structure-loss weight (0 disables the edge task)")

    s = sub.add_parser("sample", help="inpaint one synthetic scene and write PNGs")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--scene-seed", type=int, required=True)
    s.add_argument("--mask", choices=("object", "random", "empty"), default="object")
    s.add_argument("--object-index", type=int, default=0)
    s.add_argument("--prompt")
    s.add_argument("--out-dir", required=True)

    s = sub.add_parser("annotate", help="build the mask/caption dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--min-confidence", type=float)
    s.add_argument("--min-aesthetic", type=float)
    s.add_argument("--min-resolution", type=int)
    s.add_argument("--no-perturb", action="store_true", help="exact segmenter detections")
    s.add_argument("--backend-url", help="segment/caption through this service")
    s.add_argument("--stop-after", type=int, help=argparse.SUPPRESS)

    s = sub.add_parser("eval", help="score a checkpoint on the eval corpus")
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--checkpoint")
    g.add_argument("--identity", action="store_true", help="oracle model returning the original latent")
    g.add_argument("--untrained", action="store_true", help="freshly initialised model")
    s.add_argument("--label")
    s.add_argument("--out", required=True)
    s.add_argument("--compare", help="earlier report to pair against")
    s.add_argument("--png-dir")

    s = sub.add_parser("serve", help="run the HTTP service")
    s.add_argument("--host", default="127.0.0.1")
    s.add_argument("--port", type=int, default=8000)
    return p


def effective_config(args) -> dict:
    cfg = load_config(args.config)
    overrides = dict(parse_override(o) for o in args.set)
    if args.command == "train" and args.eta is not None:
        overrides["losses.eta"] = args.eta
    if args.command == "annotate":
        for flag, key in (("min_confidence", "annotate.min_confidence"), ("min_aesthetic", "annotate.min_aesthetic"), ("min_resolution", "annotate.min_resolution")):
            if getattr(args, flag) is not None:
                overrides[key] = getattr(args, flag)
        if args.no_perturb:
            overrides["annotate.perturb"] = False
    if overrides:
        cfg = cfg.with_overrides(overrides)
    return json.loads(cfg.to_json())


def make_request(args, config: dict) -> tuple[str, BaseModel]:
    c = args.command
    if c == "pretrain":
        return "/pretrain", ops.PretrainRequest(config=config, workdir=_abs(args.workdir), steps=args.steps, resume=_abs(args.resume))
    if c == "train":
        return "/train", ops.TrainRequest(
            config=config,
            base=_abs(args.base),
            workdir=_abs(args.workdir),
            steps=args.steps,
            annotations=_abs(args.annotations),
            resume=_abs(args.resume),
        )
    if c == "sample":
        return "/sample", ops.SampleRequest(
            config=config,
            checkpoint=_abs(args.checkpoint),
            scene_seed=args.scene_seed,
            mask=args.mask,
            object_index=args.object_index,
            prompt=args.prompt,
            out_dir=_abs(args.out_dir),
        )
    if c == "annotate":
        return "/annotate", ops.AnnotateRequest(config=config, out=_abs(args.out), backend_url=args.backend_url, stop_after=args.stop_after)
    model = "identity" if args.identity else "untrained" if args.untrained else "checkpoint"
    return "/eval", ops.EvalRequest(
        config=config,
        checkpoint=_abs(args.checkpoint),
        model=model,
        label=args.label,
        out=_abs(args.out),
        compare=_abs(args.compare),
        png_dir=_abs(args.png_dir),
    )


HANDLERS = {
    "/pretrain": ops.pretrain,
    "/train": ops.train,
    "/sample": ops.sample_one,
    "/annotate": ops.annotate,
    "/eval": ops.run_eval,
}


class RemoteError(Exception):
    def __init__(self, message: str, exit_code: int):
        super().__init__(message)
        self.exit_code = exit_code


def call_remote(server: str, path: str, req: BaseModel) -> dict:
    import httpx

    try:
        resp = httpx.post(server.rstrip("/") + path, json=req.model_dump(), timeout=None)
    except httpx.HTTPError as exc:
        raise RemoteError(f"cannot reach {server}: {exc}", EXIT_USAGE) from exc
    body = resp.json()
    if resp.status_code != 200:
        raise RemoteError(body.get("detail", resp.text) if isinstance(body, dict) else resp.text, body.get("exit_code", EXIT_USAGE))
    return body


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # usage errors and --help
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "serve":
            import uvicorn

            uvicorn.run("brushpaint.service:app", host=args.host, port=args.port)
            return EXIT_OK
        config = effective_config(args)
        path, req = make_request(args, config)
        if args.server:
            body = call_remote(args.server, path, req)
        else:
            body = HANDLERS[path](req).model_dump()
    except (BrushpaintError, RemoteError) as exc:
        print(f"brushpaint: {type(exc).__name__}: {exc}", file=sys.stderr)
        diag = getattr(exc, "diagnostics", None)
        if diag:
            print(json.dumps(diag, sort_keys=True), file=sys.stderr)
        return exc.exit_code
    print(json.dumps(body, indent=2, sort_keys=True))
    if path == "/annotate" and body.get("partial"):
        print("brushpaint: annotation finished with skipped images", file=sys.stderr)
        return DataError.exit_code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
