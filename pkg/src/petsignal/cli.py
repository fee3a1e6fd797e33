"""Command-line pipeline: detect, heatmap, dataset, fit, report.

Every stage writes into ``--out`` and records the digest of the run
configuration plus the digests of the files it produced, so ``report`` can
assemble a manifest and spot missing or altered intermediates.

Exit statuses: 0 success (a non-converged fit still counts), 2 usage or
configuration error, 3 data error, 4 I/O error.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import warnings
from dataclasses import dataclass, field
from datetime import datetime, timezone
from importlib import resources
from pathlib import Path
from typing import Any

import jsonschema
import pandas as pd

from . import __version__
from .conflicts import (
    DEFAULT_THRESHOLDS,
    build_heatmap,
    center_point_conflicts,
    comparison_table,
    heatmap_extent,
    min_pets,
    read_conflicts,
    run_detection,
    center_square_tracks,
    threshold_counts,
    write_conflicts,
    write_heatmap,
    write_min_pets,
)
from .errors import ConfigError, PetSignalError
from .features import BUNDLES, FeatureConfig, assemble_observations, write_bundle
from .rplogit import ModelSpec, fit
from .signals import parse_signal_plan
from .trajectory import SCHEMAS, SchemaConfig, load_tracks, resample_tracks

log = logging.getLogger("petsignal")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_IO = 0, 2, 3, 4
MANIFEST_VERSION = 1
STAGE_FILES = {
    "detect": "detect_summary.json",
    "heatmap": "heatmap_summary.json",
    "dataset": "datasets/dataset_meta.json",
    "fit": "fits/fit_summary.json",
}


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def _dump(obj, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


@dataclass
class RunConfig:
    trajectories: Path | None = None
    schema: SchemaConfig = field(default_factory=SchemaConfig)
    schema_name: Any = "canonical"
    signal_plan: Path | None = None
    rate: float = 3.0
    pet_max: float = 5.0
    method: str = "bbox"
    epsilon: float = 0.5
    cell_size: float = 10.0
    heatmap_threshold: float = 5.0
    features: dict | None = None
    models: dict = field(default_factory=dict)  # bundle (or "default") -> model dict
    seed: int = 0
    compare_reference: bool = False

    @classmethod
    def load(cls, path: str | None, seed: int | None = None) -> "RunConfig":
        if path is None:
            cfg = cls()
        else:
            p = Path(path)
            if not p.exists():
                raise ConfigError(f"config file not found: {p}")
            try:
                raw = json.loads(p.read_text())
            except json.JSONDecodeError as exc:
                raise ConfigError(f"config {p} is not valid JSON: {exc}") from exc
            cfg = cls.from_dict(raw, base=p.parent)
        if seed is not None:
            cfg.seed = seed
        return cfg

    @classmethod
    def from_dict(cls, raw: dict, base: Path = Path(".")) -> "RunConfig":
        known = {
            "trajectories", "schema", "signal_plan", "rate", "pet_max", "method", "epsilon",
            "heatmap", "features", "model", "models", "seed", "compare_reference",
        }
        extra = set(raw) - known
        if extra:
            raise ConfigError(f"unknown config keys: {sorted(extra)}")

        def path_of(key):
            v = raw.get(key)
            return None if v is None else (base / v).resolve()

        schema_raw = raw.get("schema", "canonical")
        if isinstance(schema_raw, str):
            if schema_raw not in SCHEMAS:
                raise ConfigError(f"unknown schema {schema_raw!r}; choose from {sorted(SCHEMAS)} or give a mapping")
            schema = SCHEMAS[schema_raw]
        elif isinstance(schema_raw, dict):
            try:
                schema = SchemaConfig.from_dict(schema_raw)
            except TypeError as exc:
                raise ConfigError(f"bad schema mapping: {exc}") from exc
        else:
            raise ConfigError("schema must be a name or a mapping")

        models: dict = {}
        if "model" in raw:
            models["default"] = cls._model_source(raw["model"], base)
        for name, src in (raw.get("models") or {}).items():
            if name not in BUNDLES and name != "default":
                raise ConfigError(f"models: unknown bundle {name!r}; expected one of {list(BUNDLES)}")
            models[name] = cls._model_source(src, base)

        method = raw.get("method", "bbox")
        if method not in ("bbox", "center"):
            raise ConfigError(f"method must be 'bbox' or 'center', got {method!r}")
        heat = raw.get("heatmap", {})
        try:
            cfg = cls(
                trajectories=path_of("trajectories"),
                schema=schema,
                schema_name=schema_raw,
                signal_plan=path_of("signal_plan"),
                rate=float(raw.get("rate", 3.0)),
                pet_max=float(raw.get("pet_max", 5.0)),
                method=method,
                epsilon=float(raw.get("epsilon", 0.5)),
                cell_size=float(heat.get("cell_size", 10.0)),
                heatmap_threshold=float(heat.get("threshold", raw.get("pet_max", 5.0))),
                features=raw.get("features"),
                models=models,
                seed=int(raw.get("seed", 0)),
                compare_reference=bool(raw.get("compare_reference", False)),
            )
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad config value: {exc}") from exc
        if not (cfg.rate > 0 and cfg.pet_max > 0 and cfg.epsilon > 0 and cfg.cell_size > 0):
            raise ConfigError("rate, pet_max, epsilon and heatmap.cell_size must be positive")
        return cfg

    @staticmethod
    def _model_source(src, base: Path) -> dict:
        if isinstance(src, dict):
            return src
        p = (base / src).resolve()
        if not p.exists():
            raise ConfigError(f"model file not found: {p}")
        try:
            return json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"model file {p} is not valid JSON: {exc}") from exc

    def to_dict(self) -> dict:
        """Reproducibility-relevant settings; thread count and output dir are excluded."""
        return {
            "trajectories": None if self.trajectories is None else self.trajectories.name,
            "schema": self.schema_name,
            "signal_plan": None if self.signal_plan is None else self.signal_plan.name,
            "rate": self.rate,
            "pet_max": self.pet_max,
            "method": self.method,
            "epsilon": self.epsilon,
            "heatmap": {"cell_size": self.cell_size, "threshold": self.heatmap_threshold},
            "features": self.features,
            "models": self.models,
            "seed": self.seed,
        }

    @property
    def digest(self) -> str:
        return hashlib.sha256(_canonical(self.to_dict()).encode()).hexdigest()

    def model_for(self, bundle: str, seed_override: int | None) -> ModelSpec | None:
        raw = self.models.get(bundle, self.models.get("default"))
        if raw is None:
            return None
        raw = dict(raw)
        if seed_override is not None or "seed" not in raw:
            raw["seed"] = self.seed if seed_override is None else seed_override
        return model_spec_from(raw)


def model_spec_from(raw: dict) -> ModelSpec:
    try:
        return ModelSpec.from_dict(raw)
    except TypeError as exc:
        raise ConfigError(f"bad model specification: {exc}") from exc


def _require(value, what: str):
    if value is None:
        raise ConfigError(f"{what} is required (set it in --config)")
    return value


def _input_digests(cfg: RunConfig) -> dict:
    out = {}
    for key in ("trajectories", "signal_plan"):
        p = getattr(cfg, key)
        if p is not None:
            if not p.exists():
                raise FileNotFoundError(f"{key} file not found: {p}")
            out[key] = sha256_file(p)
    return out


def _load(cfg: RunConfig):
    path = _require(cfg.trajectories, "trajectories")
    tracks, report = load_tracks(path, cfg.schema)
    return resample_tracks(tracks, cfg.rate), report


def _file_digests(out: Path, names) -> dict:
    return {n: sha256_file(out / n) for n in names}


# --- stages ---------------------------------------------------------------------------------------


def cmd_detect(cfg: RunConfig, out: Path, threads: int) -> int:
    tracks, ingest = _load(cfg)
    if cfg.method == "center":
        tracks = center_square_tracks(tracks, cfg.epsilon)
    result = run_detection(tracks, cfg.pet_max, threads=threads)
    mins = min_pets(result.records)
    out.mkdir(parents=True, exist_ok=True)
    write_conflicts(result.records, out / "conflicts.csv")
    write_min_pets(mins, out / "min_pets.csv")
    pet_counts = threshold_counts(result.records, DEFAULT_THRESHOLDS)
    min_counts = threshold_counts(mins, DEFAULT_THRESHOLDS)
    summary = {
        "stage": "detect",
        "config_digest": cfg.digest,
        "method": cfg.method,
        "rate": cfg.rate,
        "pet_max": cfg.pet_max,
        "vehicles": len(tracks),
        "ingest": ingest.to_dict(),
        "records": len(result.records),
        "pairs_with_conflict": len(mins),
        "candidate_pairs": result.candidate_pairs,
        "overlap_events": result.overlap_events,
        "thresholds": list(DEFAULT_THRESHOLDS),
        "pet_counts": pet_counts,
        "minpet_counts": min_counts,
        "outputs": _file_digests(out, ["conflicts.csv", "min_pets.csv"]),
    }
    _dump(summary, out / STAGE_FILES["detect"])
    print(f"{'threshold':>10} {'pet':>9} {'minpet':>8}")
    for t, p, m in zip(DEFAULT_THRESHOLDS, pet_counts, min_counts):
        print(f"{'<' + format(t, 'g') + 's':>10} {p:>9} {m:>8}")
    if cfg.compare_reference:
        print(comparison_table(pet_counts, min_counts))
    return EXIT_OK


def cmd_heatmap(cfg: RunConfig, out: Path, threads: int) -> int:
    tracks, _ = _load(cfg)
    bbox = min_pets(run_detection(tracks, cfg.pet_max, threads=threads).records)
    center = min_pets(center_point_conflicts(tracks, cfg.pet_max, cfg.epsilon, threads=threads))
    origin, shape = heatmap_extent(tracks, cfg.cell_size)
    out.mkdir(parents=True, exist_ok=True)
    header = {"config_digest": cfg.digest}
    grids = {}
    for name, recs in (("bbox", bbox), ("center", center)):
        grid = build_heatmap(recs, origin, cfg.cell_size, cfg.heatmap_threshold, shape)
        write_heatmap(grid, out / f"heatmap_{name}.txt", {**header, "method": name})
        grids[name] = grid
    b_counts = threshold_counts(bbox, DEFAULT_THRESHOLDS)
    c_counts = threshold_counts(center, DEFAULT_THRESHOLDS)
    ordered = all(b >= c for b, c in zip(b_counts, c_counts))
    summary = {
        "stage": "heatmap",
        "config_digest": cfg.digest,
        "epsilon": cfg.epsilon,
        "cell_size": cfg.cell_size,
        "threshold": cfg.heatmap_threshold,
        "thresholds": list(DEFAULT_THRESHOLDS),
        "bbox_minpet_counts": b_counts,
        "center_minpet_counts": c_counts,
        "bbox_cells_total": grids["bbox"].total,
        "center_cells_total": grids["center"].total,
        "bbox_ge_center": ordered,
        "outputs": _file_digests(out, ["heatmap_bbox.txt", "heatmap_center.txt"]),
    }
    _dump(summary, out / STAGE_FILES["heatmap"])
    for t, b, c in zip(DEFAULT_THRESHOLDS, b_counts, c_counts):
        print(f"<{t:g}s bbox={b} center={c} diff={b - c}")
    if not ordered:
        print("error: center-point counts exceed bounding-box counts", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


def cmd_dataset(cfg: RunConfig, out: Path, threads: int, conflicts: str | None = None) -> int:
    feats = FeatureConfig.from_dict(_require(cfg.features, "features"))
    plan = parse_signal_plan(_require(cfg.signal_plan, "signal_plan"))
    conflicts_path = Path(conflicts) if conflicts else out / "conflicts.csv"
    if not conflicts_path.exists():
        raise FileNotFoundError(f"{conflicts_path} not found; run 'detect' first")
    records = read_conflicts(conflicts_path)
    tracks, _ = _load(cfg)
    bundle = assemble_observations(records, plan, tracks, feats)
    dest = out / "datasets"
    names = [f"{b}.csv" for b in BUNDLES]
    write_bundle(bundle, dest, feats)  # first pass so the CSV digests can go into the metadata
    meta_extra = {
        "stage": "dataset",
        "config_digest": cfg.digest,
        "inputs": {conflicts_path.name: sha256_file(conflicts_path)},
        "outputs": _file_digests(dest, names),
    }
    meta = write_bundle(bundle, dest, feats, meta_extra)
    for b in BUNDLES:
        print(f"{b}: {meta['counts'][b]} observations")
    return EXIT_OK


def _fit_one(df: pd.DataFrame, spec: ModelSpec, threads: int, digest: str, title: str):
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        res = fit(df, spec, threads=threads)
    payload = res.to_dict()
    payload["config_digest"] = digest
    payload["warnings"] = sorted({str(w.message) for w in caught})
    text = res.format_table(title) + f"config digest: {digest}\n"
    return res, payload, text


def cmd_fit(cfg: RunConfig, out: Path, threads: int, data: str | None, model: str | None, seed: int | None) -> int:
    if data is not None:
        raw = RunConfig._model_source(model, Path(".")) if model else cfg.models.get("default")
        raw = dict(_require(raw, "--model"))
        if seed is not None or "seed" not in raw:
            raw["seed"] = cfg.seed if seed is None else seed
        spec = model_spec_from(raw)
        df = pd.read_csv(data, float_precision="round_trip")
        digest = hashlib.sha256(_canonical(spec.to_dict()).encode()).hexdigest()
        stem = Path(data).stem
        _, payload, text = _fit_one(df, spec, threads, digest, stem)
        out.mkdir(parents=True, exist_ok=True)
        _dump(payload, out / f"{stem}_fit.json")
        (out / f"{stem}_fit.txt").write_text(text)
        print(text, end="")
        return EXIT_OK

    src = out / "datasets"
    if not (src / "dataset_meta.json").exists():
        raise FileNotFoundError(f"{src} has no datasets; run 'dataset' first or pass --data")
    dest = out / "fits"
    dest.mkdir(parents=True, exist_ok=True)
    summary: dict = {"stage": "fit", "config_digest": cfg.digest, "bundles": {}, "outputs": {}}
    for b in BUNDLES:
        spec = cfg.model_for(b, seed)
        if spec is None:
            raise ConfigError(f"no model for bundle {b!r}; set 'model' or 'models' in the config")
        df = pd.read_csv(src / f"{b}.csv", float_precision="round_trip")
        status: dict
        if len(df) == 0 or df[spec.response].nunique() < 2:
            status = {"status": "skipped", "reason": "fewer than two observed response levels", "n": int(len(df))}
            _dump({**status, "config_digest": cfg.digest}, dest / f"{b}.json")
            summary["outputs"][f"{b}.json"] = sha256_file(dest / f"{b}.json")
        else:
            res, payload, text = _fit_one(df, spec, threads, cfg.digest, f"{b} dataset")
            _dump(payload, dest / f"{b}.json")
            (dest / f"{b}.txt").write_text(text)
            status = {"status": "fitted", "converged": res.converged, "n": res.n_observations}
            summary["outputs"][f"{b}.json"] = sha256_file(dest / f"{b}.json")
            summary["outputs"][f"{b}.txt"] = sha256_file(dest / f"{b}.txt")
            print(text)
        summary["bundles"][b] = status
        log.info("bundle %s: %s", b, status["status"])
    _dump(summary, dest / "fit_summary.json")
    return EXIT_OK


def manifest_schema() -> dict:
    return json.loads(resources.files("petsignal").joinpath("manifest.schema.json").read_text())


def build_manifest(cfg: RunConfig, out: Path) -> tuple[dict, int]:
    stages: dict = {}
    missing: list[str] = []
    tampered: list[str] = []
    for stage, rel in STAGE_FILES.items():
        p = out / rel
        if not p.exists():
            missing.append(stage)
            continue
        summary = json.loads(p.read_text())
        base = p.parent
        checks = {}
        for name, recorded in sorted(summary.get("outputs", {}).items()):
            f = base / name
            actual = sha256_file(f) if f.exists() else None
            checks[name] = {"recorded": recorded, "actual": actual, "ok": actual == recorded}
            if actual != recorded:
                tampered.append(f"{stage}:{name}")
        if summary.get("config_digest") != cfg.digest:
            tampered.append(f"{stage}:config_digest")
        stages[stage] = {"summary": summary, "integrity": checks}
    fits = {}
    if "fit" in stages:
        for b in BUNDLES:
            f = out / "fits" / f"{b}.json"
            fits[b] = json.loads(f.read_text()) if f.exists() else {"status": "absent"}
    manifest = {
        "manifest_version": MANIFEST_VERSION,
        "package_version": __version__,
        "created": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        "config": cfg.to_dict(),
        "config_digest": cfg.digest,
        "inputs": _input_digests(cfg),
        "stages": stages,
        "fits": fits,
        "missing_stages": missing,
        "digest_mismatches": tampered,
        "complete": not missing and not tampered,
    }
    jsonschema.validate(manifest, manifest_schema())
    code = EXIT_OK if manifest["complete"] else (EXIT_DATA if tampered else EXIT_IO)
    return manifest, code


def cmd_report(cfg: RunConfig, out: Path) -> int:
    manifest, code = build_manifest(cfg, out)
    _dump(manifest, out / "manifest.json")
    for s in manifest["missing_stages"]:
        print(f"missing stage: {s}", file=sys.stderr)
    for t in manifest["digest_mismatches"]:
        print(f"digest mismatch: {t}", file=sys.stderr)
    print(f"manifest written to {out / 'manifest.json'} (complete={manifest['complete']})")
    return code


# --- entry point ------------------------------------------------------------------------------------


def _common_flags(parser: argparse.ArgumentParser, suppress: bool) -> None:
    # flags are accepted before or after the subcommand; the subcommand copy must not reset them
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    parser.add_argument("--config", default=d(None), help="run configuration JSON")
    parser.add_argument("--seed", type=int, default=d(None), help="override the configured seed")
    parser.add_argument("--threads", type=int, default=d(1), help="worker threads (results do not depend on it)")
    parser.add_argument("--out", default=d("out"), help="output directory (default: out)")
    parser.add_argument("-v", "--verbose", action="store_true", default=d(False))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="petsignal", description=__doc__.splitlines()[0])
    _common_flags(parser, suppress=False)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "detect": "PET conflicts and threshold summary",
        "heatmap": "bbox and center-point minPET grids",
        "dataset": "join conflicts with signal countdowns",
        "fit": "ordered logit fits",
        "report": "assemble the run manifest",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text)
        _common_flags(p, suppress=True)
        if name in ("detect", "heatmap", "dataset"):
            p.add_argument("--trajectories", help="trajectory CSV (overrides the config)")
        if name == "dataset":
            p.add_argument("--plan", help="signal plan JSON (overrides the config)")
            p.add_argument("--conflicts", help="conflict table (default: OUT/conflicts.csv)")
        if name == "fit":
            p.add_argument("--data", help="fit a single observation CSV instead of the five bundles")
            p.add_argument("--model", help="model JSON for --data")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.threads < 1:
        parser.error("--threads must be at least 1")
    out = Path(args.out)
    try:
        cfg = RunConfig.load(args.config, args.seed)
        if getattr(args, "trajectories", None):
            cfg.trajectories = Path(args.trajectories).resolve()
        if getattr(args, "plan", None):
            cfg.signal_plan = Path(args.plan).resolve()
        if args.command == "detect":
            return cmd_detect(cfg, out, args.threads)
        if args.command == "heatmap":
            return cmd_heatmap(cfg, out, args.threads)
        if args.command == "dataset":
            return cmd_dataset(cfg, out, args.threads, getattr(args, "conflicts", None))
        if args.command == "fit":
            return cmd_fit(cfg, out, args.threads, getattr(args, "data", None), getattr(args, "model", None), args.seed)
        return cmd_report(cfg, out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FileNotFoundError, PermissionError, IsADirectoryError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (PetSignalError, ValueError, KeyError, pd.errors.ParserError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
