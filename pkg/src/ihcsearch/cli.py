"""``ihcsearch`` command-line entry point.

Every subcommand runs one pipeline stage, reads its inputs from the dataset
and work directories, writes its artifacts into the work directory and
appends a line to ``<work>/runs.jsonl``. Exit codes: 0 success, 2 config
error, 3 missing input, 4 embedding backend failure, 5 internal error.
"""

from __future__ import annotations

import argparse
import json
import logging
import platform
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
import PIL
import scipy
from PIL import Image

from . import __version__
from .align import load_transform, register_slides, save_transform, warp_array
from .anfis import AnfisModel, filter_slide
from .attention import (
    DEFAULT_COLORS,
    CbiLayer,
    CompositeBiomarkerImage,
    attention_mask,
    build_cbi,
    read_patches,
    write_patches,
)
from .config import PipelineConfig
from .embed import BuiltinBackend, WsiSignature, embed_patches
from .errors import ConfigError, IhcSearchError, MissingInputError
from .evaluation import EvalReport, compare_runs, leave_one_patient_out
from .index import SignatureIndex, build_index, knn_query, load_index, save_index
from .pipeline import BIOMARKER_TARGETS, MODES, random_patches, targeted_patches, train_models
from .raster import load_slide, read_gray_png, write_gray_png
from .synth import generate_dataset

log = logging.getLogger("ihcsearch")

BIOMARKERS = tuple(BIOMARKER_TARGETS)


# ---------------------------------------------------------------------------
# workspace helpers
# ---------------------------------------------------------------------------


class Workspace:
    def __init__(self, cfg: PipelineConfig):
        self.cfg = cfg
        self.dataset = cfg.dataset_dir
        self.work = cfg.work_dir

    def case_ids(self, selected=None) -> list[str]:
        if not self.dataset.is_dir():
            raise MissingInputError(f"dataset directory not found: {self.dataset}")
        ids = sorted(p.name[len("case_"):] for p in self.dataset.glob("case_*") if p.is_dir())
        if selected:
            missing = sorted(set(selected) - set(ids))
            if missing:
                raise MissingInputError(f"cases not in dataset: {missing}")
            ids = [i for i in ids if i in set(selected)]
        if not ids:
            raise MissingInputError(f"no cases under {self.dataset}")
        return ids

    def slide(self, case: str, stain: str):
        return load_slide(self.dataset / f"case_{case}" / stain / "manifest.json")

    def case_dir(self, case: str) -> Path:
        d = self.work / "cases" / case
        d.mkdir(parents=True, exist_ok=True)
        return d

    def model_path(self, biomarker: str) -> Path:
        return self.work / "models" / f"{biomarker}.json"

    def model(self, biomarker: str) -> AnfisModel:
        path = self.model_path(biomarker)
        if not path.is_file():
            raise MissingInputError(f"no model at {path}; run train-anfis first")
        return AnfisModel.load(path)

    @staticmethod
    def require(path: Path, hint: str) -> Path:
        if not path.is_file():
            raise MissingInputError(f"missing {path}; run {hint} first")
        return path


def _per_case(cfg: PipelineConfig, cases, fn) -> list:
    """Apply ``fn`` to every case; output order never depends on threads."""
    if cfg.threads <= 1 or len(cases) <= 1:
        return [fn(c) for c in cases]
    with ThreadPoolExecutor(cfg.threads) as pool:
        return list(pool.map(fn, cases))


def _biomarkers(arg) -> tuple[str, ...]:
    if arg in (None, "all"):
        return BIOMARKERS
    if arg not in BIOMARKERS:
        raise ConfigError(f"unknown biomarker {arg!r}; expected one of {BIOMARKERS} or 'all'")
    return (arg,)


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------


def stage_synth(ws: Workspace, args) -> dict:
    out = Path(args.out) if args.out else ws.dataset
    path = generate_dataset(ws.cfg.synth_config(), out, ws.cfg.threads)
    n = ws.cfg.synth_config().n_patients
    return {"dataset": str(out), "index": str(path), "cases": n, "slides": 3 * n}


def stage_train(ws: Workspace, args) -> dict:
    biomarkers = _biomarkers(args.biomarker)
    models = train_models(ws.cfg.params(), biomarkers)
    (ws.work / "models").mkdir(parents=True, exist_ok=True)
    out = {}
    for b, model in models.items():
        model.save(ws.model_path(b))
        out[b] = {"path": str(ws.model_path(b)), "final_rmse": model.training["rmse_curve"][-1]}
    return {"models": out}


def stage_align(ws: Workspace, args) -> dict:
    params = ws.cfg.params()

    def one(case):
        he = ws.slide(case, "HE")
        res = {}
        for b in _biomarkers(args.biomarker):
            t, score = register_slides(he, ws.slide(case, b), params.thumb_magnification, params.grid)
            save_transform(t, score, ws.case_dir(case) / f"align_{b}.json")
            res[b] = t.to_dict(score)
        return case, res

    return {"transforms": dict(_per_case(ws.cfg, ws.case_ids(args.case), one))}


def stage_filter(ws: Workspace, args) -> dict:
    """Relevance rasters in each biomarker slide's own frame at patch magnification."""
    params = ws.cfg.params()

    biomarkers = _biomarkers(args.biomarker)
    models = {b: ws.model(b) for b in biomarkers}

    def one(case):
        res = {}
        for b in biomarkers:
            gray = filter_slide(models[b], ws.slide(case, b), params.patch_magnification)
            write_gray_png(gray, ws.case_dir(case) / f"filtered_{b}.png")
            res[b] = float((gray > 0).mean())
        return case, res

    return {"positive_fraction": dict(_per_case(ws.cfg, ws.case_ids(args.case), one))}


def _aligned_filtered(ws: Workspace, case: str, params) -> dict:
    he = ws.slide(case, "HE")
    shape = he.size_at(params.patch_magnification)[::-1]
    d = ws.case_dir(case)
    out = {}
    for b in BIOMARKERS:
        gray = read_gray_png(ws.require(d / f"filtered_{b}.png", "filter"))
        t, _ = load_transform(ws.require(d / f"align_{b}.json", "align"))
        ihc = ws.slide(case, b)
        local = t.inverse().scaled(params.patch_magnification / ihc.base_magnification)
        out[b] = warp_array(gray, local, fill=0, output_shape=shape, order=0)
    return out


def stage_cbi(ws: Workspace, args) -> dict:
    params = ws.cfg.params()

    def one(case):
        cbi = build_cbi(_aligned_filtered(ws, case, params), params.morph, theta_mask=params.theta_mask)
        d = ws.case_dir(case)
        for layer in cbi.layers:
            write_gray_png(layer.relevance, d / f"cbi_{layer.biomarker}.png")
        Image.fromarray(cbi.render()).save(d / "cbi.png")
        return case, {layer.biomarker: float(layer.present.mean()) for layer in cbi.layers}

    return {"layer_fraction": dict(_per_case(ws.cfg, ws.case_ids(args.case), one))}


def stage_mask(ws: Workspace, args) -> dict:
    params = ws.cfg.params()

    def one(case):
        d = ws.case_dir(case)
        layers = tuple(
            CbiLayer(b, read_gray_png(ws.require(d / f"cbi_{b}.png", "cbi")), DEFAULT_COLORS[b])
            for b in BIOMARKERS
        )
        mask = attention_mask(CompositeBiomarkerImage(layers), params.mask_mode)
        write_gray_png(mask, d / "mask.png")
        return case, float(mask.mean())

    return {"mask_fraction": dict(_per_case(ws.cfg, ws.case_ids(args.case), one))}


def stage_patch(ws: Workspace, args) -> dict:
    params = ws.cfg.params()
    mode = args.mode

    def one(case):
        he = ws.slide(case, "HE")
        d = ws.case_dir(case)
        fallback = False
        if mode == "targeted":
            mask = read_gray_png(ws.require(d / "mask.png", "mask")) > 0
            patches, fallback = targeted_patches(mask, he, params)
        else:
            patches = random_patches(he, params)
        write_patches(patches, d / f"patches_{mode}.jsonl")
        return case, {"patches": len(patches), "fallback": fallback}

    return {"mode": mode, "cases": dict(_per_case(ws.cfg, ws.case_ids(args.case), one))}


def stage_embed(ws: Workspace, args) -> dict:
    backend = ws.cfg.backend()
    mode = args.mode

    def one(case):
        he = ws.slide(case, "HE")
        d = ws.case_dir(case)
        patches = read_patches(ws.require(d / f"patches_{mode}.jsonl", "patch"))
        out = d / f"signature_{mode}.ihcx"
        if not patches:
            out.unlink(missing_ok=True)
            return case, 0
        emb = embed_patches(he, patches, backend)
        m = he.manifest
        sig = WsiSignature.from_embeddings(m.slide_id, m.patient_id, m.label, emb)
        save_index(SignatureIndex([sig]), out)
        return case, len(patches)

    # an external backend handles one batch at a time
    cfg = ws.cfg if isinstance(backend, BuiltinBackend) else PipelineConfig({**ws.cfg.data, "threads": 1})
    return {"mode": mode, "vectors": dict(_per_case(cfg, ws.case_ids(args.case), one))}


def stage_index(ws: Workspace, args) -> dict:
    mode = args.mode
    signatures, skipped = [], []
    for case in ws.case_ids(args.case):
        path = ws.work / "cases" / case / f"signature_{mode}.ihcx"
        if not path.is_file():
            skipped.append(case)
            continue
        signatures.extend(load_index(path).entries)
    if skipped:
        log.warning("no %s signature for %s", mode, ", ".join(skipped))
    index = build_index(signatures)
    path = ws.cfg.index_path(mode)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_index(index, path)
    return {"index": str(path), "slides": len(index), "vectors": index.n_vectors, "skipped": skipped}


def stage_query(ws: Workspace, args) -> dict:
    path = Path(args.index) if args.index else ws.cfg.index_path(args.mode)
    if not path.is_file():
        raise MissingInputError(f"index not found: {path}")
    index = load_index(path)
    if len(index) == 0:
        raise MissingInputError(f"index {path} is empty")
    if args.signature:
        q = load_index(args.signature).entries[0]
    else:
        try:
            q = index.get(args.slide)
        except KeyError:
            raise MissingInputError(f"slide {args.slide!r} is not in {path}") from None
    exclude = q.patient_id if args.exclude_patient else None
    result = knn_query(index, q, args.k, exclude, ws.cfg.data["eval"]["ranking"])
    return result.to_dict()


def stage_evaluate(ws: Workspace, args) -> dict:
    path = Path(args.index) if args.index else ws.cfg.index_path(args.mode)
    if not path.is_file():
        raise MissingInputError(f"index not found: {path}")
    report = leave_one_patient_out(load_index(path), ws.cfg.eval_config(args.mode))
    ws.work.mkdir(parents=True, exist_ok=True)
    report.save(ws.work / f"report_{args.mode}.json")
    (ws.work / f"report_{args.mode}.txt").write_text(report.table(), encoding="utf-8")
    return {"report": str(ws.work / f"report_{args.mode}.json"), "accuracy": report.to_dict()["accuracy"],
            "_text": report.table()}


def stage_compare(ws: Workspace, args) -> dict:
    paths = [
        Path(p) if p else ws.work / f"report_{mode}.json"
        for p, mode in ((args.targeted, "targeted"), (args.normal, "normal"))
    ]
    for p in paths:
        if not p.is_file():
            raise MissingInputError(f"report not found: {p}")
    comp = compare_runs(EvalReport.load(paths[0]), EvalReport.load(paths[1]))
    ws.work.mkdir(parents=True, exist_ok=True)
    (ws.work / "comparison.json").write_text(json.dumps(comp.to_dict(), indent=2, sort_keys=True), encoding="utf-8")
    (ws.work / "comparison.txt").write_text(comp.table(), encoding="utf-8")
    return {**comp.to_dict(), "_text": comp.table()}


def stage_run(ws: Workspace, args) -> dict:
    """Every stage in order, both modes, then the comparison."""
    ns = argparse.Namespace(case=args.case, biomarker="all", out=None, index=None)
    if not ws.dataset.is_dir():
        stage_synth(ws, ns)
    stage_train(ws, ns)
    for stage in (stage_align, stage_filter, stage_cbi, stage_mask):
        stage(ws, ns)
    reports = {}
    for mode in MODES:
        ns.mode = mode
        stage_patch(ws, ns)
        stage_embed(ws, ns)
        stage_index(ws, ns)
        reports[mode] = stage_evaluate(ws, ns)["accuracy"]
    ns.targeted = ns.normal = None
    comp = stage_compare(ws, ns)
    return {"accuracy": reports, "outcome": comp["outcome"], "_text": comp["_text"]}


STAGES = {
    "synth": stage_synth,
    "train-anfis": stage_train,
    "align": stage_align,
    "filter": stage_filter,
    "cbi": stage_cbi,
    "mask": stage_mask,
    "patch": stage_patch,
    "embed": stage_embed,
    "index": stage_index,
    "query": stage_query,
    "evaluate": stage_evaluate,
    "compare": stage_compare,
    "run": stage_run,
}


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML config file")
    common.add_argument("--threads", type=int, help="worker cap (results never depend on it)")
    common.add_argument("--seed", type=int, help="top-level seed")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config value (repeatable)")
    common.add_argument("--dataset", help="dataset directory (paths.dataset)")
    common.add_argument("--work", help="work directory (paths.work)")
    common.add_argument("--json", action="store_true", help="machine-readable output")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="ihcsearch", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text, case=True, biomarker=False, mode=False):
        p = sub.add_parser(name, parents=[common], help=help_text)
        if case:
            p.add_argument("--case", action="append", help="restrict to patient id (repeatable)")
        if biomarker:
            p.add_argument("--biomarker", default="all", help="CD30, PAX5 or all")
        if mode:
            p.add_argument("--mode", choices=MODES, default="targeted")
        return p

    add("synth", "generate the synthetic dataset", case=False).add_argument("--out", help="output directory")
    add("train-anfis", "train the per-biomarker fuzzy filters", case=False, biomarker=True)
    add("align", "register biomarker slides to H&E", biomarker=True)
    add("filter", "fuzzy-filter biomarker slides", biomarker=True)
    add("cbi", "build composite biomarker images")
    add("mask", "derive attention masks")
    add("patch", "select H&E patches", mode=True)
    add("embed", "embed selected patches", mode=True)
    add("index", "build the slide index", mode=True)
    q = add("query", "k-NN search for one slide", case=False, mode=True)
    target = q.add_mutually_exclusive_group(required=True)
    target.add_argument("--slide", help="indexed slide id to use as the query")
    target.add_argument("--signature", help="single-entry signature file to use as the query")
    q.add_argument("--index", help="index file (default: work/index_<mode>.ihcx)")
    q.add_argument("-k", "--k", type=int, default=5)
    q.add_argument("--exclude-patient", action="store_true", help="drop the query's own patient")
    e = add("evaluate", "leave-one-patient-out evaluation", case=False, mode=True)
    e.add_argument("--index", help="index file (default: work/index_<mode>.ihcx)")
    c = add("compare", "compare targeted and normal reports", case=False)
    c.add_argument("targeted", nargs="?", help="targeted report (default: work/report_targeted.json)")
    c.add_argument("normal", nargs="?", help="normal report (default: work/report_normal.json)")
    add("run", "all stages end to end")
    return parser


def _versions() -> dict:
    return {
        "ihcsearch": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "pillow": PIL.__version__,
    }


def _load_config(args) -> PipelineConfig:
    overrides = list(args.overrides)
    paths = {}
    if args.dataset:
        paths["dataset"] = args.dataset
    if args.work:
        paths["work"] = args.work
    if paths:
        overrides.append({"paths": paths})
    return PipelineConfig.load(args.config, overrides, seed=args.seed, threads=args.threads)


def _log_run(cfg: PipelineConfig, argv, command: str, code: int, started: float) -> None:
    try:
        cfg.work_dir.mkdir(parents=True, exist_ok=True)
        entry = {
            "command": command,
            "argv": list(argv),
            "config_hash": cfg.hash,
            "seed": cfg.seed,
            "threads": cfg.threads,
            "versions": _versions(),
            "exit_code": code,
            "started": started,
            "seconds": round(time.time() - started, 3),
        }
        with open(cfg.work_dir / "runs.jsonl", "a", encoding="utf-8") as fh:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")
    except OSError as exc:
        log.warning("could not write run log: %s", exc)


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    started = time.time()
    cfg = None
    try:
        cfg = _load_config(args)
        result = STAGES[args.command](Workspace(cfg), args)
        code = 0
    except IhcSearchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        code, result = exc.exit_code, None
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        code, result = MissingInputError.exit_code, None
    except Exception as exc:  # noqa: BLE001 - mapped to the internal-error code
        log.exception("internal error")
        print(f"internal error: {exc!r}", file=sys.stderr)
        code, result = IhcSearchError.exit_code, None
    if cfg is not None:
        _log_run(cfg, argv, args.command, code, started)
    if result is not None:
        text = result.pop("_text", None)
        payload = {"command": args.command, "config_hash": cfg.hash, **result}
        if args.json:
            print(json.dumps(payload, indent=2, sort_keys=True, default=str))
        else:
            print(text if text else json.dumps(result, indent=2, sort_keys=True, default=str))
    return code


if __name__ == "__main__":
    sys.exit(main())
