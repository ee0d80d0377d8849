"""The seeded reference run: stage 0, annotation, two stage-1 runs, evaluation.

Every step is skipped when its artifact already exists, so an interrupted
run resumes and a finished one is only read back.
"""

from __future__ import annotations

import json
import logging
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt_io
from . import ops, training
from .config import RunConfig, load_config

log = logging.getLogger(__name__)

REFERENCE_CONFIG = Path(__file__).resolve().parents[2] / "configs" / "reference.json"


def reference_config(path: str | Path | None = None) -> RunConfig:
    path = Path(path) if path else REFERENCE_CONFIG
    return load_config(path) if path.exists() else RunConfig()


def paths(root: str | Path) -> dict[str, Path]:
    root = Path(root)
    return {
        "root": root,
        "stage0": root / "stage0",
        "base": root / "stage0" / "base.ckpt",
        "annotations": root / "annotations.jsonl",
        "multitask": root / "stage1_eta0.1",
        "ablation": root / "stage1_eta0",
        "reports": root / "reports",
    }


def _eval(cfg: RunConfig, out: Path, label: str, **kw) -> dict:
    if not out.exists():
        ops.run_eval(ops.EvalRequest(config=json.loads(cfg.to_json()), out=str(out), label=label, **kw))
    return json.loads(out.read_text())


def run_reference(root: str | Path, cfg: RunConfig | None = None) -> dict:
    cfg = cfg or reference_config()
    p = paths(root)
    p["root"].mkdir(parents=True, exist_ok=True)
    (p["root"] / "config.json").write_text(cfg.to_json() + "\n")
    if not p["base"].exists():
        log.info("stage 0: pretraining the UNet")
        training.pretrain(cfg, p["stage0"])
    if not p["annotations"].exists():
        ops.annotate(ops.AnnotateRequest(config=json.loads(cfg.to_json()), out=str(p["annotations"])))
    runs = {"multitask": cfg, "ablation": cfg.with_overrides({"losses.eta": 0.0})}
    for name, rc in runs.items():
        if not (p[name] / "full.ckpt").exists():
            log.info("stage 1 (%s): eta=%s", name, rc.losses.eta)
            training.train(rc, p["base"], p[name], annotations=p["annotations"])
    rep = p["reports"]
    rep.mkdir(parents=True, exist_ok=True)
    reports = {
        "identity": _eval(cfg, rep / "identity.json", "identity", model="identity"),
        "untrained": _eval(cfg, rep / "untrained.json", "untrained", model="untrained"),
        "stage0": _eval(cfg, rep / "stage0.json", "stage0", checkpoint=str(p["base"])),
        "ablation": _eval(runs["ablation"], rep / "ablation.json", "eta=0", checkpoint=str(p["ablation"] / "full.ckpt")),
        "multitask": _eval(
            cfg,
            rep / "multitask.json",
            "eta=0.1",
            checkpoint=str(p["multitask"] / "full.ckpt"),
            compare=str(rep / "ablation.json"),
        ),
    }
    summary = summarize(p, reports)
    (rep / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary


def read_log(path: Path) -> list[dict]:
    return [json.loads(line) for line in path.read_text().splitlines() if line]


def summarize(p: dict[str, Path], reports: dict[str, dict]) -> dict:
    pre = read_log(p["stage0"] / "pretrain_log.jsonl")
    out: dict = {"pretrain": _progress([r["noise"] for r in pre], pre)}
    for name in ("multitask", "ablation"):
        rows = read_log(p[name] / "train_log.jsonl")
        out[name] = _progress([r["total"] for r in rows], rows)
        out[name]["final_components"] = {k: rows[-1][k] for k in ("noise", "style", "structure", "total")}
    out["reports"] = {k: {"aggregate": v["aggregate"], "held_out_structure_loss": v["held_out_structure_loss"]} for k, v in reports.items()}
    out["checkpoints"] = {
        "base": ckpt_io.file_sha256(p["base"]),
        "multitask": ckpt_io.file_sha256(p["multitask"] / "full.ckpt"),
        "ablation": ckpt_io.file_sha256(p["ablation"] / "full.ckpt"),
    }
    return out


def _progress(values: list[float], rows: list[dict]) -> dict:
    ma = training.moving_average(values, 50)
    return {
        "steps": len(values),
        "first": values[0],
        "ma50_at_step50": float(ma[0]),
        "ma50_final": float(ma[-1]),
        "reduction": float(1.0 - ma[-1] / ma[0]),
        "seconds": rows[-1]["seconds"],
        "min": float(np.min(values)),
    }


if __name__ == "__main__":
    import sys

    logging.basicConfig(level=logging.INFO)
    root = sys.argv[1] if len(sys.argv) > 1 else "runs/reference"
    print(json.dumps(run_reference(root), indent=2, sort_keys=True))
