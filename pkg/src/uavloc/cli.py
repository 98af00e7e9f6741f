"""Batch front end: scene generation, flight rendering, gallery building,
localization runs, prior-noise sweeps, and metric reports.

One TOML or JSON config file drives everything; a handful of flags override
the config (flags win). Every command is deterministic given the config and
seed: reruns are byte-identical, with wall-clock timings confined to a
separate timings file.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .matching import MatcherConfig
from .metrics import (
    DEFAULT_A_THRESHOLDS,
    DEFAULT_ALPHA,
    DEFAULT_K_VALUES,
    DEFAULT_LAMBDA,
    DEFAULT_SDM_DECAY,
    compute_report,
)
from .pose import RansacParams
from .prior import NoiseSpec, inject_noise, principal_gsd
from .refmap import RefMap25D, build_gallery, load_refmap, save_refmap
from .retrieval import EmbeddingScorer, EmbeddingTable, MiScorer, NccScorer
from .simulator import (
    FlightSpec,
    OracleMatcher,
    SceneSpec,
    TerrainSpec,
    TextureSpec,
    UavFrame,
    generate_flight,
    generate_scene,
    load_dataset,
    synthetic_embeddings,
)
from .strategies import (
    BuiltinMatcher,
    ImportedMatcher,
    LocalizationRecord,
    StrategyConfig,
    run_strategy,
)
from . import records_io


class ConfigError(ValueError):
    """The run configuration is invalid."""


@dataclass
class RunConfig:
    """Everything a run needs, resolved and validated."""

    out: str = "out"
    seed: int = 0
    workers: int = 1
    scene: dict | None = None
    map_files: dict | None = None        # {ortho, dsm, sidecar, label}
    dataset: str | None = None
    gallery: dict = field(default_factory=dict)     # {footprint_m, overlap}
    strategy: dict = field(default_factory=dict)    # {kind, n}
    scorer: dict = field(default_factory=lambda: {"kind": "ncc"})
    matcher: dict = field(default_factory=lambda: {"kind": "builtin"})
    ransac: dict = field(default_factory=dict)
    flight: dict = field(default_factory=dict)
    embeddings: dict = field(default_factory=dict)  # synthetic emission knobs
    noise_grid: list = field(default_factory=list)  # list of NoiseSpec dicts
    metrics: dict = field(default_factory=dict)

    @classmethod
    def load(cls, path, overrides: dict | None = None) -> "RunConfig":
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if path.suffix.lower() == ".toml":
            try:
                import tomllib  # py311+
            except ModuleNotFoundError:
                import tomli as tomllib
            try:
                data = tomllib.loads(text)
            except tomllib.TOMLDecodeError as exc:
                raise ConfigError(f"bad TOML in {path}: {exc}") from exc
        else:
            try:
                data = json.loads(text)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"bad JSON in {path}: {exc}") from exc
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(**data)
        for key, value in (overrides or {}).items():
            if value is None:
                continue
            if key in ("out", "seed", "workers"):
                setattr(cfg, key, value)
            elif key == "strategy":
                cfg.strategy["kind"] = value
            elif key == "top_n":
                cfg.strategy["n"] = value
            elif key == "scorer":
                cfg.scorer["kind"] = value
            elif key == "matcher":
                cfg.matcher["kind"] = value
            elif key == "pdm_lambda":
                cfg.metrics["pdm_lambda"] = value
            elif key == "pdm_alpha":
                cfg.metrics["pdm_alpha"] = value
            elif key == "sdm_s":
                cfg.metrics["sdm_decay"] = value
        return cfg

    def validate_for_run(self):
        if (self.scene is None) == (self.map_files is None):
            raise ConfigError("exactly one of 'scene' and 'map_files' must be set")
        if self.map_files is not None:
            for key in ("ortho", "dsm", "sidecar"):
                if key not in self.map_files:
                    raise ConfigError(f"map_files.{key} missing")
                if not Path(self.map_files[key]).exists():
                    raise ConfigError(f"map file {self.map_files[key]} does not exist")
        if self.dataset is None:
            raise ConfigError("dataset directory not set")
        if not (Path(self.dataset) / "manifest.json").exists():
            raise ConfigError(f"no manifest.json under {self.dataset}")
        if self.scorer.get("kind") == "embedding":
            emb = self.scorer.get("path")
            if not emb or not Path(emb).exists():
                raise ConfigError("scorer.kind=embedding requires scorer.path to exist")
        if self.matcher.get("kind") == "imported":
            idx = self.matcher.get("index")
            if not idx or not Path(idx).exists():
                raise ConfigError("matcher.kind=imported requires matcher.index to exist")


def _scene_spec(cfg: RunConfig) -> SceneSpec:
    d = dict(cfg.scene or {})
    terrain = TerrainSpec(**d.pop("terrain", {}))
    texture = TextureSpec(**d.pop("texture", {}))
    return SceneSpec(terrain=terrain, texture=texture, **d)


def _load_map(cfg: RunConfig) -> RefMap25D:
    if cfg.scene is not None:
        return generate_scene(_scene_spec(cfg))
    mf = cfg.map_files
    return load_refmap(mf["ortho"], mf["dsm"], mf["sidecar"],
                       label=mf.get("label", "aerial"))


def _flight_spec(cfg: RunConfig) -> FlightSpec:
    d = dict(cfg.flight)
    intr = d.pop("intrinsics", None)
    kwargs = {}
    if intr is not None:
        from .geo import CameraIntrinsics
        kwargs["intrinsics"] = CameraIntrinsics(**intr)
    for key in ("frame_count", "seed"):
        if key in d:
            kwargs[key] = int(d.pop(key))
    for key in ("altitude_range", "pitch_range", "yaw_range"):
        if key in d:
            kwargs[key] = tuple(d.pop(key))
    if d:
        raise ConfigError(f"unknown flight keys: {sorted(d)}")
    return FlightSpec(**kwargs)


def _gallery_footprint(cfg: RunConfig, frames: list[UavFrame]) -> float:
    fp = cfg.gallery.get("footprint_m")
    if fp:
        return float(fp)
    # default: the median ground footprint implied by the clean priors
    widths = [principal_gsd(f.prior, f.intrinsics) * f.intrinsics.width
              for f in frames]
    return float(np.median(widths))


def _build_gallery(cfg: RunConfig, rmap: RefMap25D, frames: list[UavFrame]):
    footprint = _gallery_footprint(cfg, frames)
    overlap = float(cfg.gallery.get("overlap", 0.5))
    return build_gallery(rmap, footprint, overlap), footprint, overlap


def _build_scorer(cfg: RunConfig):
    kind = cfg.scorer.get("kind", "ncc")
    if kind == "ncc":
        return NccScorer()
    if kind == "mi":
        return MiScorer(bins=int(cfg.scorer.get("bins", 32)))
    if kind == "embedding":
        return EmbeddingScorer(table=EmbeddingTable.load_jsonl(cfg.scorer["path"]))
    raise ConfigError(f"unknown scorer kind {kind!r}")


def _build_matcher(cfg: RunConfig, rmap: RefMap25D):
    kind = cfg.matcher.get("kind", "builtin")
    if kind == "builtin":
        fields = {k: v for k, v in cfg.matcher.items() if k != "kind"}
        return BuiltinMatcher(cfg=MatcherConfig(**fields))
    if kind == "oracle":
        return OracleMatcher(
            rmap,
            rays=int(cfg.matcher.get("rays", 250)),
            noise_px=float(cfg.matcher.get("noise_px", 0.0)),
            outlier_fraction=float(cfg.matcher.get("outlier_fraction", 0.0)),
            seed=int(cfg.matcher.get("seed", cfg.seed)),
        )
    if kind == "imported":
        return ImportedMatcher(index_path=cfg.matcher["index"],
                               space=cfg.matcher.get("space", "original"))
    raise ConfigError(f"unknown matcher kind {kind!r}")


def _strategy_config(cfg: RunConfig, rmap: RefMap25D) -> StrategyConfig:
    ransac = RansacParams(
        reproj_threshold=float(cfg.ransac.get("reproj_threshold", 3.0)),
        max_iterations=int(cfg.ransac.get("max_iterations", 2000)),
        confidence=float(cfg.ransac.get("confidence", 0.999)),
        min_inliers=int(cfg.ransac.get("min_inliers", 6)),
    )
    return StrategyConfig(
        kind=cfg.strategy.get("kind", "topn_rerank"),
        n=int(cfg.strategy.get("n", 5)),
        scorer=_build_scorer(cfg),
        matcher=_build_matcher(cfg, rmap),
        ransac=ransac,
        seed=cfg.seed,
        max_warp_dim=int(cfg.strategy.get("max_warp_dim", 3000)),
        direct_max_dim=int(cfg.strategy.get("direct_max_dim", 4096)),
    )


# ---------------------------------------------------------------------------
# frame execution (worker-pool friendly)

_CTX: dict = {}


def _run_one(args) -> LocalizationRecord:
    frame_idx, noise = args
    frame: UavFrame = _CTX["frames"][frame_idx]
    if noise is not None:
        spec = NoiseSpec(**noise)
        frame = frame.with_prior(inject_noise(frame.prior, spec, frame.index))
        label = spec.label()
    else:
        label = ""
    record = run_strategy(frame, _CTX.get("gallery"), _CTX["rmap"], _CTX["scfg"])
    record.noise_level = label
    return record


def _run_frames(cfg: RunConfig, frames, gallery, rmap, scfg,
                noise: dict | None) -> list[LocalizationRecord]:
    _CTX.clear()
    _CTX.update({"frames": frames, "gallery": gallery, "rmap": rmap, "scfg": scfg})
    jobs = [(i, noise) for i in range(len(frames))]
    if cfg.workers <= 1:
        results = [_run_one(job) for job in jobs]
    else:
        import multiprocessing as mp
        from concurrent.futures import ProcessPoolExecutor

        try:
            ctx = mp.get_context("fork")
        except ValueError:
            results = [_run_one(job) for job in jobs]
        else:
            with ProcessPoolExecutor(max_workers=cfg.workers, mp_context=ctx) as pool:
                results = list(pool.map(_run_one, jobs, chunksize=1))
    # stable output order regardless of scheduling
    results.sort(key=lambda r: r.frame_id)
    return results


# ---------------------------------------------------------------------------
# commands


def cmd_gen_scene(cfg: RunConfig) -> int:
    if cfg.scene is None:
        raise ConfigError("gen-scene needs a 'scene' section")
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    rmap = generate_scene(_scene_spec(cfg))
    save_refmap(rmap, out / "ortho.png", out / "dsm.f32", out / "sidecar.json")
    print(f"scene written to {out} "
          f"({rmap.ortho.geot.cols}x{rmap.ortho.geot.rows} px at {rmap.gsd} m/px)")
    return 0


def cmd_render_flight(cfg: RunConfig) -> int:
    rmap = _load_map(cfg)
    out = Path(cfg.dataset or (Path(cfg.out) / "dataset"))
    frames = generate_flight(rmap, _flight_spec(cfg), out)
    print(f"rendered {len(frames)} frames to {out}")
    return 0


def cmd_build_gallery(cfg: RunConfig) -> int:
    rmap = _load_map(cfg)
    frames = load_dataset(cfg.dataset)
    gallery, footprint, overlap = _build_gallery(cfg, rmap, frames)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    doc = {
        "footprint_m": footprint,
        "overlap": overlap,
        "tile_count": len(gallery),
        "tiles": [
            {"id": t.id, "col0": t.col0, "row0": t.row0, "size_px": t.width_px,
             "center_e": t.center.easting, "center_n": t.center.northing}
            for t in gallery
        ],
    }
    (out / "gallery.json").write_text(json.dumps(doc, indent=2, sort_keys=True))
    if cfg.embeddings:
        table = synthetic_embeddings(
            gallery, frames,
            dim=int(cfg.embeddings.get("dim", 64)),
            length_scale=cfg.embeddings.get("length_scale"),
            query_position_noise_m=float(cfg.embeddings.get("query_position_noise_m", 0.0)),
            seed=int(cfg.embeddings.get("seed", cfg.seed)),
        )
        table.save_jsonl(out / "embeddings.jsonl")
        print(f"gallery ({len(gallery)} tiles) + synthetic embeddings written to {out}")
    else:
        print(f"gallery ({len(gallery)} tiles) written to {out}")
    return 0


def _localize_records(cfg: RunConfig, noise: dict | None = None):
    cfg.validate_for_run()
    rmap = _load_map(cfg)
    frames = load_dataset(cfg.dataset)
    scfg = _strategy_config(cfg, rmap)
    gallery = None
    if scfg.kind != "direct":
        gallery, _, _ = _build_gallery(cfg, rmap, frames)
    return _run_frames(cfg, frames, gallery, rmap, scfg, noise)


def _metric_kwargs(cfg: RunConfig) -> dict:
    m = cfg.metrics
    return {
        "thresholds": tuple(m.get("thresholds", DEFAULT_A_THRESHOLDS)),
        "k_values": tuple(m.get("k_values", DEFAULT_K_VALUES)),
        "pdm_lambda": float(m.get("pdm_lambda", DEFAULT_LAMBDA)),
        "pdm_alpha": float(m.get("pdm_alpha", DEFAULT_ALPHA)),
        "sdm_decay": float(m.get("sdm_decay", DEFAULT_SDM_DECAY)),
    }


def cmd_localize(cfg: RunConfig) -> int:
    records = _localize_records(cfg)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    records_io.write_records_csv(records, out / "records.csv")
    records_io.write_timings_csv(records, out / "timings.csv")
    report = compute_report(records, **_metric_kwargs(cfg))
    (out / "summary.json").write_text(
        json.dumps(report.to_json_dict(), indent=2, sort_keys=True))
    print(f"{len(records)} records -> {out}")
    return 0


def cmd_sweep(cfg: RunConfig) -> int:
    if not cfg.noise_grid:
        raise ConfigError("sweep needs a non-empty 'noise_grid'")
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    all_records = []
    summaries = {}
    for cell in cfg.noise_grid:
        cell_records = _localize_records(cfg, noise=dict(cell))
        all_records.extend(cell_records)
        label = cell_records[0].noise_level if cell_records else str(cell)
        summaries[label] = compute_report(
            cell_records, **_metric_kwargs(cfg)).to_json_dict()
    records_io.write_records_csv(all_records, out / "records.csv")
    records_io.write_timings_csv(all_records, out / "timings.csv")
    (out / "summary.json").write_text(json.dumps(summaries, indent=2, sort_keys=True))
    print(f"{len(all_records)} records over {len(cfg.noise_grid)} noise cells -> {out}")
    return 0


def cmd_report(cfg: RunConfig, records_path) -> int:
    records = records_io.read_records_csv(records_path)
    if not records:
        raise ConfigError(f"no records in {records_path}")
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    report = compute_report(records, **_metric_kwargs(cfg))
    (out / "summary.json").write_text(
        json.dumps(report.to_json_dict(), indent=2, sort_keys=True))
    records_io.write_metric_tables_csv(report, out / "metrics.csv")
    records_io.write_pitch_chart_svg(report, out / "accuracy_by_pitch.svg")
    records_io.write_noise_chart_svg(report, out / "accuracy_by_noise.svg")
    print(f"report -> {out}")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="uavloc",
        description="UAV absolute visual localization against 2.5D reference maps",
    )
    parser.add_argument("--config", required=True, help="TOML or JSON run config")
    parser.add_argument("--out", help="output directory (overrides config)")
    parser.add_argument("--seed", type=int, help="global seed (overrides config)")
    parser.add_argument("--workers", type=int, help="worker processes")
    parser.add_argument("--strategy", choices=["direct", "top1", "topn_rerank", "most_inliers"])
    parser.add_argument("--scorer", choices=["ncc", "mi", "embedding"])
    parser.add_argument("--matcher", choices=["builtin", "oracle", "imported"])
    parser.add_argument("--top-n", type=int, dest="top_n")
    parser.add_argument("--lambda", type=float, dest="pdm_lambda")
    parser.add_argument("--alpha", type=float, dest="pdm_alpha")
    parser.add_argument("--sdm-s", type=float, dest="sdm_s")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-scene")
    sub.add_parser("render-flight")
    sub.add_parser("build-gallery")
    sub.add_parser("localize")
    sub.add_parser("sweep")
    p_report = sub.add_parser("report")
    p_report.add_argument("records", help="records.csv from localize/sweep")

    args = parser.parse_args(argv)
    overrides = {
        "out": args.out, "seed": args.seed, "workers": args.workers,
        "strategy": args.strategy, "scorer": args.scorer, "matcher": args.matcher,
        "top_n": args.top_n, "pdm_lambda": args.pdm_lambda,
        "pdm_alpha": args.pdm_alpha, "sdm_s": args.sdm_s,
    }
    try:
        cfg = RunConfig.load(args.config, overrides)
        if args.command == "gen-scene":
            return cmd_gen_scene(cfg)
        if args.command == "render-flight":
            return cmd_render_flight(cfg)
        if args.command == "build-gallery":
            return cmd_build_gallery(cfg)
        if args.command == "localize":
            return cmd_localize(cfg)
        if args.command == "sweep":
            return cmd_sweep(cfg)
        return cmd_report(cfg, args.records)
    except (ConfigError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
