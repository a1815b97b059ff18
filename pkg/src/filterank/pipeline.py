"""End-to-end pipeline: generate, attribute, fit schema, train, baselines, evaluate.

Each stage records a hash of its inputs (config section plus input file
contents) and of its outputs in ``stages.json``.  A stage is skipped when
its input hash is unchanged and its outputs still hash to the recorded
values.  Once any stage runs, every later stage runs too.
"""

from __future__ import annotations

import hashlib
import json
import logging
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Callable

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

import numpy as np

from . import core
from .attribution import AttributionConfig, attribute, read_examples, split_dataset, write_examples
from .baselines import FcrTable, NecessityTable, build_journeys, compute_fcr, necessity_scores
from .evaluation import (
    compare_predictors,
    engagement_only_policy,
    model_scorer,
    ranking_policy,
    simulated_ab,
    table_scorer,
)
from .features import FeatureSchema, fit_schema
from .model import ModelConfig, load, model_version, save, train
from .ranking import RankingConfig
from .synthgen import SimConfig, conversion_ordered_presentation, generate_to_dir, generate_world, read_world

logger = logging.getLogger(__name__)

STATE_FILE = "stages.json"


class PipelineError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage


@dataclass(frozen=True)
class WorldSettings:
    k: int = 32
    num_segments: int = 5
    num_locations: int = 8
    presentation_bias_strength: float = 0.0
    segment_strength: float = 1.0
    location_strength: float = 1.0
    # "conversion_ordered" shows the least-converting filters first
    presentation: str = "default"

    def __post_init__(self) -> None:
        if self.presentation not in ("default", "conversion_ordered"):
            raise ValueError("world.presentation must be 'default' or 'conversion_ordered'")


@dataclass(frozen=True)
class SimSettings:
    num_users: int = 20_000
    searches_per_user_mean: float = 3.0
    sim_days: int = 28
    cancellation_rate: float = 0.05

    def __post_init__(self) -> None:
        SimConfig(num_users=self.num_users, searches_per_user_mean=self.searches_per_user_mean,
                  sim_days=self.sim_days, cancellation_rate=self.cancellation_rate)


@dataclass(frozen=True)
class BaselineSettings:
    fcr_window_days: int = 7
    min_support: int = 20

    def __post_init__(self) -> None:
        if self.fcr_window_days < 1 or self.min_support < 1:
            raise ValueError("baselines settings must be positive")


@dataclass(frozen=True)
class EvalSettings:
    train_frac: float = 0.8
    ab_users: int = 20_000

    def __post_init__(self) -> None:
        if not 0 < self.train_frac < 1:
            raise ValueError("eval.train_frac must be in (0, 1)")


@dataclass(frozen=True)
class PipelineConfig:
    out_dir: str = "artifacts"
    seed: int = 0
    world: WorldSettings = WorldSettings()
    sim: SimSettings = SimSettings()
    attribution: AttributionConfig = AttributionConfig()
    model: ModelConfig = field(default_factory=lambda: ModelConfig(epochs=6, weight_decay=0.1))
    baselines: BaselineSettings = BaselineSettings()
    ranking: RankingConfig = RankingConfig()
    eval: EvalSettings = EvalSettings()

    def section(self, name: str) -> dict:
        value = getattr(self, name)
        return _plain(value)

    def to_json(self) -> dict:
        return {f.name: _plain(getattr(self, f.name)) for f in fields(self)}


SECTIONS = {
    "world": WorldSettings,
    "sim": SimSettings,
    "attribution": AttributionConfig,
    "model": ModelConfig,
    "baselines": BaselineSettings,
    "ranking": RankingConfig,
    "eval": EvalSettings,
}


def _plain(value: Any) -> Any:
    if hasattr(value, "__dataclass_fields__"):
        return {f.name: _plain(getattr(value, f.name)) for f in fields(value)}
    if isinstance(value, tuple):
        return [_plain(v) for v in value]
    return value


def _build(cls, values: dict, base):
    known = {f.name for f in fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ValueError(f"unknown keys for {cls.__name__}: {sorted(unknown)}")
    conv = {k: tuple(v) if isinstance(v, list) else v for k, v in values.items()}
    return replace(base, **conv)


def config_from_dict(d: dict, base: PipelineConfig | None = None) -> PipelineConfig:
    """Merge a nested dict onto ``base``; every section validates on construction."""
    cfg = base or PipelineConfig()
    top = {k: v for k, v in d.items() if k not in SECTIONS}
    unknown = set(top) - {"out_dir", "seed"}
    if unknown:
        raise ValueError(f"unknown top-level keys: {sorted(unknown)}")
    updates: dict[str, Any] = dict(top)
    for name, cls in SECTIONS.items():
        if name in d:
            updates[name] = _build(cls, d[name], getattr(cfg, name))
    return replace(cfg, **updates)


def load_config(path: str | Path | None, overrides: dict | None = None) -> PipelineConfig:
    cfg = PipelineConfig()
    if path is not None:
        with open(path, "rb") as fh:
            cfg = config_from_dict(tomllib.load(fh), cfg)
    if overrides:
        cfg = config_from_dict(overrides, cfg)
    return cfg


def parse_override(text: str) -> dict:
    """``section.key=value`` to a nested dict; the value is parsed as TOML."""
    key, sep, raw = text.partition("=")
    if not sep:
        raise ValueError(f"override must be key=value, got {text!r}")
    try:
        value = tomllib.loads(f"v = {raw}")["v"]
    except tomllib.TOMLDecodeError:
        value = raw
    out: dict = {}
    node = out
    parts = key.strip().split(".")
    for p in parts[:-1]:
        node = node.setdefault(p, {})
    node[parts[-1]] = value
    return out


def file_hash(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _json_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()


@dataclass(frozen=True)
class Stage:
    name: str
    config_sections: tuple[str, ...]
    inputs: tuple[str, ...]
    outputs: tuple[str, ...]
    run: Callable[[PipelineConfig, Path], None]


def generate_data(cfg: PipelineConfig, data_dir: Path) -> dict[str, Path]:
    w = cfg.world
    world = generate_world(w.k, w.num_segments, cfg.seed, num_locations=w.num_locations,
                           presentation_bias_strength=w.presentation_bias_strength,
                           segment_strength=w.segment_strength, location_strength=w.location_strength)
    order = conversion_ordered_presentation(world) if w.presentation == "conversion_ordered" else None
    sim = SimConfig(num_users=cfg.sim.num_users, searches_per_user_mean=cfg.sim.searches_per_user_mean,
                    seed=cfg.seed, presentation_order=order, cancellation_rate=cfg.sim.cancellation_rate,
                    sim_days=cfg.sim.sim_days)
    return generate_to_dir(data_dir, world, sim)


def attribute_files(searches_path: Path, bookings_path: Path, cfg: AttributionConfig):
    """Read both logs (skipping malformed lines) and attribute.  Returns examples and read reports."""
    searches, rs = core.read_searches(searches_path)
    bookings, rb = core.read_bookings(bookings_path)
    for name, rep in (("searches", rs), ("bookings", rb)):
        if rep.rejected:
            logger.warning("%s: rejected %d malformed lines (first: %s)", name, rep.rejected, rep.rejected_lines[:5])
    return attribute(searches, bookings, cfg), rs, rb


def train_files(train_path: Path, eval_path: Path | None, schema_path: Path, config: ModelConfig,
                out_dir: Path) -> None:
    tr = read_examples(train_path)
    ev = read_examples(eval_path) if eval_path is not None else []
    schema = FeatureSchema.load(schema_path)
    params, history = train(tr, ev, config, schema=schema)
    save(params, schema, out_dir)
    (out_dir / "history.json").write_text(json.dumps(history.to_json(), indent=1), encoding="utf-8")


def _stage_gen(cfg: PipelineConfig, out: Path) -> None:
    generate_data(cfg, out / "data")


def _stage_attribute(cfg: PipelineConfig, out: Path) -> None:
    examples, _, _ = attribute_files(out / "data/searches.jsonl", out / "data/bookings.jsonl", cfg.attribution)
    tr, ev = split_dataset(examples, cfg.eval.train_frac, cfg.seed)
    write_examples(out / "examples/train.jsonl", tr)
    write_examples(out / "examples/eval.jsonl", ev)


def _stage_fit(cfg: PipelineConfig, out: Path) -> None:
    tr = read_examples(out / "examples/train.jsonl")
    (out / "features").mkdir(parents=True, exist_ok=True)
    fit_schema(tr, cfg.world.k).save(out / "features/schema.json")


def _stage_train(cfg: PipelineConfig, out: Path) -> None:
    train_files(out / "examples/train.jsonl", out / "examples/eval.jsonl", out / "features/schema.json",
                replace(cfg.model, seed=cfg.seed), out / "model")


def _stage_baselines(cfg: PipelineConfig, out: Path) -> None:
    tr = read_examples(out / "examples/train.jsonl")
    bookings, _ = core.read_bookings(out / "data/bookings.jsonl")
    world = read_world(out / "data/world.json")
    (out / "baselines").mkdir(parents=True, exist_ok=True)
    compute_fcr(tr, cfg.baselines.fcr_window_days, cfg.baselines.min_support, k=cfg.world.k).save(
        out / "baselines/fcr.json")
    users = {e.user_id for e in tr}
    journeys = build_journeys(tr, [b for b in bookings if b.user_id in users])
    prevalence = float(np.mean([e.booking_label for e in tr]))
    necessity_scores(journeys, world.listing_attrs, prevalence).save(out / "baselines/necessity.json")


def _stage_eval(cfg: PipelineConfig, out: Path) -> None:
    ev = read_examples(out / "examples/eval.jsonl")
    params = load(out / "model")
    world = read_world(out / "data/world.json")
    comp = compare_predictors(ev, {
        "necessity": table_scorer(NecessityTable.load(out / "baselines/necessity.json")),
        "fcr": table_scorer(FcrTable.load(out / "baselines/fcr.json")),
        "ml": model_scorer(params),
    })
    ab = simulated_ab(world, engagement_only_policy(params, cfg.ranking), ranking_policy(params, cfg.ranking),
                      cfg.eval.ab_users, cfg.seed)
    history = json.loads((out / "model/history.json").read_text(encoding="utf-8"))
    report = {
        "config_sha256": _json_hash(cfg.to_json() | {"out_dir": None}),
        "seed": cfg.seed,
        "model_version": model_version(out / "model"),
        "eval_examples": len(ev),
        "comparison": comp.to_json(),
        "training": history,
        "ab_ranking_vs_engagement_only": ab.to_json(),
    }
    (out / "reports").mkdir(parents=True, exist_ok=True)
    (out / "reports/report.json").write_text(json.dumps(report, indent=1, sort_keys=True), encoding="utf-8")
    (out / "reports/report.txt").write_text(format_comparison(comp.to_json()), encoding="utf-8")


def format_comparison(comp: dict) -> str:
    lines = [f"{'predictor':<12}{'PR-AUC':>10}{'vs ' + comp['relative_to']:>16}"]
    for name, v in comp["pr_auc_booking"].items():
        lines.append(f"{name:<12}{v:>10.5f}{comp['relative_gain'][name]:>+15.1%}")
    lines.append(f"{'prevalence':<12}{comp['prevalence']:>10.5f}")
    return "\n".join(lines) + "\n"


STAGES = (
    Stage("gen", ("world", "sim"), (),
          ("data/catalog.json", "data/world.json", "data/searches.jsonl", "data/bookings.jsonl"), _stage_gen),
    Stage("attribute", ("attribution", "eval"), ("data/searches.jsonl", "data/bookings.jsonl"),
          ("examples/train.jsonl", "examples/eval.jsonl"), _stage_attribute),
    Stage("fit", ("world",), ("examples/train.jsonl",), ("features/schema.json",), _stage_fit),
    Stage("train", ("model",), ("examples/train.jsonl", "examples/eval.jsonl", "features/schema.json"),
          ("model/model.bin", "model/schema.json", "model/history.json"), _stage_train),
    Stage("baselines", ("baselines", "world"), ("examples/train.jsonl", "data/bookings.jsonl", "data/world.json"),
          ("baselines/fcr.json", "baselines/necessity.json"), _stage_baselines),
    Stage("eval", ("ranking", "eval"),
          ("examples/eval.jsonl", "model/model.bin", "model/schema.json", "model/history.json",
           "baselines/fcr.json", "baselines/necessity.json", "data/world.json"),
          ("reports/report.json", "reports/report.txt"), _stage_eval),
)


@dataclass
class PipelineResult:
    out_dir: Path
    ran: list[str]
    skipped: list[str]

    @property
    def report_path(self) -> Path:
        return self.out_dir / "reports/report.json"


def _input_hash(stage: Stage, cfg: PipelineConfig, out: Path) -> str:
    payload = {
        "seed": cfg.seed,
        "config": {s: cfg.section(s) for s in stage.config_sections},
        "files": {p: file_hash(out / p) for p in stage.inputs},
    }
    return _json_hash(payload)


def run_pipeline(cfg: PipelineConfig, out_dir: str | Path | None = None, force: bool = False) -> PipelineResult:
    out = Path(out_dir or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    state_path = out / STATE_FILE
    try:
        state = json.loads(state_path.read_text(encoding="utf-8")) if state_path.exists() else {}
    except json.JSONDecodeError:
        state = {}
    ran: list[str] = []
    skipped: list[str] = []
    dirty = force
    for stage in STAGES:
        try:
            in_hash = _input_hash(stage, cfg, out)
            prev = state.get(stage.name)
            fresh = (
                not dirty
                and prev is not None
                and prev.get("inputs") == in_hash
                and all((out / p).exists() and file_hash(out / p) == prev["outputs"].get(p) for p in stage.outputs)
            )
            if fresh:
                skipped.append(stage.name)
                logger.info("stage %s: up to date", stage.name)
                continue
            logger.info("stage %s: running", stage.name)
            for p in stage.outputs:
                (out / p).parent.mkdir(parents=True, exist_ok=True)
            stage.run(cfg, out)
            state[stage.name] = {"inputs": in_hash, "outputs": {p: file_hash(out / p) for p in stage.outputs}}
            state_path.write_text(json.dumps(state, indent=1, sort_keys=True), encoding="utf-8")
        except Exception as exc:  # noqa: BLE001 - re-raised with the stage name
            raise PipelineError(stage.name, exc) from exc
        ran.append(stage.name)
        dirty = True
    return PipelineResult(out, ran, skipped)
