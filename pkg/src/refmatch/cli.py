"""Command-line interface.

Exit codes: 0 success, 1 bad input or usage, 2 internal error. Failures are
reported on stderr as one line of JSON.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .errors import FormatError, TrainingError, ValidationError
from .fusion import load_adapter, save_adapter
from .geometry import BBox
from .ot import MatchConfig, Prototype, match_with_refinement
from .pipeline import PipelineConfig, run_pipeline
from .report import FORMATS, RunManifest, load_report, manifest_path, write_report
from .retrieval import load_bank, retrieve, save_bank
from .scenes import ImageStore, Scene, bank_from_scenes, load_index, load_scene_set, read_pgm, write_scene_set
from .synth import SceneConfig, extract_features, generate_scene_pair
from .training import DESK_TRAIN_CONFIG, TrainConfig, level_curriculum, train_adapter

log = logging.getLogger("refmatch")


class UsageError(ValidationError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _read_json(path):
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"input file not found: {path}")
    text = path.read_text(encoding="utf-8")
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"invalid JSON: {exc.msg}", offset=len(text[: exc.pos].encode("utf-8")), path=path) from exc


def _write_text(path, text):
    if str(path) == "-":
        sys.stdout.write(text)
        return
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


def _check_schema(cfg: dict, path):
    version = cfg.get("schema_version", 1)
    if version != 1:
        raise FormatError(f"unsupported schema_version {version!r}", path=path)


def _workers():
    raw = os.environ.get("REFMATCH_THREADS")
    if raw is None:
        return os.cpu_count() or 1
    try:
        n = int(raw)
    except ValueError:
        raise ValidationError(f"REFMATCH_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise ValidationError("REFMATCH_THREADS must be at least 1")
    return n


# -- commands ------------------------------------------------------------------

def cmd_gen(args):
    cfg_dict = _read_json(args.config) if args.config else {}
    _check_schema(cfg_dict, args.config)
    base = SceneConfig.from_dict(cfg_dict)
    if args.seed is not None:
        base.seed = args.seed
    if args.count < 1:
        raise ValidationError("--count must be at least 1")
    seeds = [base.seed + i for i in range(args.count)]
    scenes = []
    for s in seeds:
        cfg = SceneConfig.from_dict(dict(base.to_dict(), seed=s))
        scenes.append(Scene.from_pair(generate_scene_pair(cfg)))
    index = write_scene_set(scenes, args.out, base, seeds)
    return {"config": base.to_dict(), "seed": base.seed, "inputs": [args.config] if args.config else [],
            "outputs": [str(index)], "manifest": Path(args.out) / "manifest.json"}


def cmd_bank(args):
    scenes = load_scene_set(args.scenes)
    bank = bank_from_scenes(scenes, args.dim)
    out = Path(args.out)
    rel = os.path.relpath(Path(args.scenes).resolve(), out.parent.resolve())
    for t in bank.templates:
        t.image_ref = Path(rel, t.image_ref).as_posix()
    out.parent.mkdir(parents=True, exist_ok=True)
    save_bank(bank, out)
    return {"config": {"dim": args.dim}, "inputs": [args.scenes], "outputs": [str(out)]}


def cmd_retrieve(args):
    bank = load_bank(args.bank)
    image = read_pgm(args.image)
    hits = retrieve(bank, extract_features(image, bank.dim), k=args.k)
    text = json.dumps({"query": str(args.image), "results": [{"id": t.id, "similarity": s} for t, s in hits]},
                      indent=2) + "\n"
    _write_text(args.out, text)
    return {"config": {"k": args.k}, "inputs": [args.bank, args.image], "outputs": [args.out]}


def _box(value, what):
    try:
        return BBox(*[float(v) for v in value])
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"bad box in {what}: {value!r} ({exc})") from exc


def cmd_match(args):
    data = _read_json(args.input)
    if not isinstance(data, dict) or "preds" not in data or "prototypes" not in data:
        raise FormatError("match input needs 'preds' and 'prototypes'", path=args.input)
    preds = [_box(p, "preds") for p in data["preds"]]
    prototypes, labels = [], []
    for i, p in enumerate(data["prototypes"]):
        if isinstance(p, dict):
            box = _box(p["bbox"], "prototypes") if p.get("bbox") is not None else None
            feat = np.asarray(p["feature"], dtype=float) if p.get("feature") is not None else None
            label = str(p.get("label", i))
        else:
            box, feat, label = _box(p, "prototypes"), None, str(i)
        prototypes.append(Prototype(box, feat, label))
        labels.append(label)
    feats = data.get("pred_features")
    if feats is not None:
        feats = [None if f is None else np.asarray(f, dtype=float) for f in feats]
    w_sp, w_sem = data.get("weights", [1.0, 0.0])
    cfg = MatchConfig(reg=args.reg, tol=args.tol, tau_conf=args.tau_conf, w_spatial=w_sp, w_semantic=w_sem,
                      tau_cost_percentile=None if args.no_cost_gate else 90.0)
    assignment = match_with_refinement(preds, prototypes, cfg, pred_features=feats)
    _write_text(args.out, json.dumps(assignment.to_dict(labels), indent=2) + "\n")
    return {"config": {"reg": args.reg, "tol": args.tol, "tau_conf": args.tau_conf,
                       "cost_gate": not args.no_cost_gate}, "inputs": [args.input], "outputs": [args.out]}


def cmd_eval(args):
    cfg_dict = _read_json(args.config) if args.config else {}
    _check_schema(cfg_dict, args.config)
    cfg_dict = {k: v for k, v in cfg_dict.items() if k != "schema_version"}
    cfg_dict.update(mode=args.mode)
    if args.no_ot:
        cfg_dict["use_ot"] = False
    if args.detector:
        cfg_dict["detector"] = args.detector
    if args.no_mirror_test:
        cfg_dict["mirror_test"] = False
    if args.paired:
        cfg_dict["retrieval"] = "paired"
    if args.giou_mode:
        cfg_dict["giou_mode"] = args.giou_mode
    try:
        cfg = PipelineConfig(**cfg_dict)
    except TypeError as exc:
        raise ValidationError(f"bad pipeline config: {exc}") from exc

    scenes = load_scene_set(args.scenes)
    index = load_index(args.scenes)
    bank = load_bank(args.bank) if args.bank else None
    if bank is None and cfg.retrieval == "bank":
        raise ValidationError("--bank is required unless --paired is given")
    adapter = load_adapter(args.adapter) if args.adapter else None
    images = ImageStore(Path(args.bank).parent if args.bank else None,
                        {s.reference.id: s.reference_image for s in scenes})
    report, outcomes = run_pipeline(scenes, bank, cfg, adapter, images, workers=min(_workers(), len(scenes)))
    _write_text(args.out, report.to_json())
    outputs = [args.out]
    if args.rewards:
        lines = "".join(json.dumps(r, sort_keys=True) + "\n" for o in outcomes for r in o.rewards)
        _write_text(args.rewards, lines)
        outputs.append(args.rewards)
    if args.debug:
        d = Path(args.debug)
        d.mkdir(parents=True, exist_ok=True)
        for o in outcomes:
            (d / f"{o.scene_id}.json").write_text(json.dumps(o.artifacts, indent=2, sort_keys=True) + "\n",
                                                  encoding="utf-8")
        outputs.append(str(d))
    print(f"{len(scenes)} scenes, {report.n_samples} samples, accuracy {report.accuracy}", file=sys.stderr)
    inputs = [args.scenes] + [p for p in (args.bank, args.adapter, args.config) if p]
    return {"config": {"pipeline": cfg.to_dict(), "scenes": index.get("config")}, "inputs": inputs,
            "outputs": outputs, "seed": cfg.order_seed}


def cmd_train(args):
    data = _read_json(args.config) if args.config else {}
    _check_schema(data, args.config)
    data = dict(data)
    cur = data.pop("curriculum", {})
    # keys absent from the file fall back to the frozen desk-scale budget
    cfg = TrainConfig.from_dict(dict(DESK_TRAIN_CONFIG.to_dict(), **data))
    scene_cfg = SceneConfig.from_dict(cur.get("scene", {"position_noise": 0.0, "scale_noise": 0.0}))
    dataset, seeds = level_curriculum(int(cur.get("n_instances", 20)), scene_cfg, int(cur.get("first_seed", 0)))
    mlp, trace = train_adapter(dataset, cfg)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    save_adapter(mlp, args.out)
    outputs = [args.out]
    if args.trace:
        _write_text(args.trace, trace.to_csv())
        outputs.append(args.trace)
    resolved = dict(cfg.to_dict(), curriculum={"n_instances": len(dataset), "first_seed": int(cur.get("first_seed", 0)),
                                               "scene": scene_cfg.to_dict(), "scene_seeds": seeds})
    return {"config": resolved, "seed": cfg.seed, "inputs": [args.config] if args.config else [], "outputs": outputs}


def _noise_of(report_path):
    mp = manifest_path(report_path)
    if mp.exists():
        scenes = RunManifest.read(mp).config.get("scenes") or {}
        if "position_noise" in scenes:
            return float(scenes["position_noise"])
    return None


def cmd_report(args):
    reports = [load_report(p) for p in args.inputs]
    text = write_report(reports[0], args.format)
    if len(reports) > 1 and args.format != "json":
        text = "".join(write_report(r, args.format) for r in reports)
    _write_text(args.out, text)
    outputs = [args.out]
    if args.svg:
        from .plotting import accuracy_vs_noise
        points = []
        for i, (p, r) in enumerate(zip(args.inputs, reports)):
            sigma = _noise_of(p)
            points.append((i if sigma is None else sigma, r.accuracy or 0.0, "accuracy"))
        accuracy_vs_noise(points, args.svg)
        outputs.append(args.svg)
    if args.bars:
        from .plotting import per_label_bars
        per_label_bars(reports[0], args.bars, args.metric)
        outputs.append(args.bars)
    return {"config": {"format": args.format, "metric": args.metric}, "inputs": list(args.inputs), "outputs": outputs}


# -- wiring --------------------------------------------------------------------

def build_parser():
    p = _Parser(prog="refmatch", description="Reference-guided labeling, matching and segmentation toolkit.")
    p.add_argument("--version", action="version", version=f"refmatch {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    g = sub.add_parser("gen", help="generate synthetic reference/target scene pairs")
    g.add_argument("--config", help="scene config JSON")
    g.add_argument("--count", type=int, default=10)
    g.add_argument("--seed", type=int)
    g.add_argument("--out", required=True, help="output directory")
    g.set_defaults(func=cmd_gen)

    b = sub.add_parser("bank", help="build a reference bank from a scene directory")
    b.add_argument("--scenes", required=True)
    b.add_argument("--dim", type=int, default=64)
    b.add_argument("--out", required=True)
    b.set_defaults(func=cmd_bank)

    r = sub.add_parser("retrieve", help="top-k templates for a target image")
    r.add_argument("--bank", required=True)
    r.add_argument("--image", required=True, help="PGM image")
    r.add_argument("--k", type=int, default=1)
    r.add_argument("--out", default="-")
    r.set_defaults(func=cmd_retrieve)

    m = sub.add_parser("match", help="assign boxes to label prototypes by optimal transport")
    m.add_argument("--input", required=True)
    m.add_argument("--reg", type=float, default=0.05)
    m.add_argument("--tol", type=float, default=1e-6)
    m.add_argument("--tau-conf", type=float, default=0.5)
    m.add_argument("--no-cost-gate", action="store_true")
    m.add_argument("--out", default="-")
    m.set_defaults(func=cmd_match)

    e = sub.add_parser("eval", help="run the pipeline over a scene directory")
    e.add_argument("--mode", choices=("vqa", "bbox", "seg"), required=True)
    e.add_argument("--scenes", required=True)
    e.add_argument("--bank")
    e.add_argument("--adapter", help="adapter parameters JSON (seg mode)")
    e.add_argument("--config", help="pipeline config JSON")
    e.add_argument("--detector", choices=("gt", "components"))
    e.add_argument("--no-ot", action="store_true", help="independent nearest-prototype assignment")
    e.add_argument("--no-mirror-test", action="store_true")
    e.add_argument("--paired", action="store_true", help="use each scene's own reference instead of retrieval")
    e.add_argument("--giou-mode", choices=("per_sample", "pooled"))
    e.add_argument("--rewards", nargs="?", const="-", help="per-sample reward JSON lines (default stdout)")
    e.add_argument("--debug", help="directory for per-scene intermediate artifacts")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    t = sub.add_parser("train-adapter", help="train the seg adapter on the synthetic level curriculum")
    t.add_argument("--config", help="train config JSON")
    t.add_argument("--out", required=True)
    t.add_argument("--trace", help="trace CSV (step,loss,dice,lr)")
    t.set_defaults(func=cmd_train)

    rp = sub.add_parser("report", help="render stored reports")
    rp.add_argument("--in", dest="inputs", action="append", required=True)
    rp.add_argument("--format", choices=FORMATS, default="table")
    rp.add_argument("--out", default="-")
    rp.add_argument("--svg", help="accuracy-vs-noise figure over all --in reports")
    rp.add_argument("--bars", help="per-label bar figure of the first report")
    rp.add_argument("--metric", default="accuracy", choices=("dice", "giou", "iou", "ap", "accuracy"))
    rp.set_defaults(func=cmd_report)
    return p


def _fail(code, exc):
    payload = {"error": type(exc).__name__, "message": str(exc)}
    path = getattr(exc, "path", None) or getattr(exc, "filename", None)
    if path is not None:
        payload["path"] = str(path)
    if getattr(exc, "offset", None) is not None:
        payload["offset"] = exc.offset
    if getattr(exc, "step", None) is not None:
        payload["step"] = exc.step
    print(json.dumps(payload), file=sys.stderr)
    return code


def run_command(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        return _fail(1, exc)
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if not getattr(args, "func", None):
        parser.print_usage(sys.stderr)
        return _fail(1, UsageError("a subcommand is required"))
    start = time.perf_counter()
    try:
        info = args.func(args)
    except (ValidationError, FileNotFoundError, NotADirectoryError, TrainingError) as exc:
        return _fail(1, exc)
    except Exception as exc:  # anything else is a bug
        log.debug("internal error", exc_info=True)
        return _fail(2, exc)
    outputs = [o for o in info.get("outputs", []) if o and o != "-"]
    if outputs:
        target = info.get("manifest") or manifest_path(outputs[0])
        RunManifest(
            command=args.command,
            config=info.get("config", {}),
            seed=int(info.get("seed", 0)),
            inputs=[str(i) for i in info.get("inputs", [])],
            outputs=[str(o) for o in outputs],
            duration_s=round(time.perf_counter() - start, 6),
        ).write(target)
    return 0


def main():
    sys.exit(run_command())


if __name__ == "__main__":
    main()
