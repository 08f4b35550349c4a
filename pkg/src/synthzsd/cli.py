"""Command-line entry point.

Every command reads a flat ``key = value`` configuration file (a TOML
subset), applies ``--seed``/``--out``/``--mode`` overrides and exchanges
artifacts with the other commands through files under the output directory::

    synthzsd pipeline --config run.toml --out runs/a
    synthzsd evaluate --out runs/a --mode zsd

Exit codes: 0 success, 1 other failure, 2 configuration error or missing
prerequisite, 3 numeric divergence (last good checkpoint is kept).
"""

import argparse
import dataclasses
import logging
import os
import sys
from dataclasses import dataclass, field

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .datakit import (
    POLICIES,
    ToyWorldSpec,
    gen_detection_scenes,
    gen_feature_set,
    gen_toy_world,
    read_features,
    read_scenes,
    read_semantics,
    write_features,
    write_scenes,
    write_semantics,
)
from .datakit import atomic_write_text
from .detector import MODES, detect, detect_baseline, read_detections, write_detections
from .errors import ConfigError, ContractError, DivergenceError, ZSDError
from .gradcheck import run_gradient_suite
from .losses import LossWeights
from .metrics import build_report, scene_ground_truths
from .models import BACKGROUND_ID, load_model, save_model
from .numerics import RandomStream
from .trainer import (
    TrainConfig,
    synthesize_features,
    train_gan,
    train_seen_classifier,
    train_semantic_classifier,
    update_classifier,
    write_training_log,
)

log = logging.getLogger("synthzsd")

COMMANDS = ("gen-data", "train-gan", "synthesize", "train-classifier", "detect", "evaluate",
            "grad-check", "pipeline")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_DIVERGED = 0, 1, 2, 3

_WEIGHT_KEYS = ("alpha1", "alpha2", "alpha3", "alpha4", "gp_lambda", "warmup_epochs")
_TRAIN_KEYS = ("lr", "beta1", "beta2", "n_critic", "batch_size", "gan_epochs", "hidden",
               "features_per_unseen_class", "classifier_epochs", "classifier_lr",
               "seen_classifier_epochs", "semantic_epochs", "penalty_mix", "update_mode")
_WORLD_KEYS = tuple(f.name for f in dataclasses.fields(ToyWorldSpec))
_PATH_KEYS = ("semantics", "features", "scenes", "synthetic", "checkpoints", "reports")

# stream keys for the data generators, disjoint from the training streams
_WORLD_STREAM, _FEATURE_STREAM, _SCENE_STREAM = 100, 101, 102


@dataclass(frozen=True)
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    world: ToyWorldSpec = field(default_factory=ToyWorldSpec)
    seed: int = 0
    mode: str = "gzsd"
    policy: str = "distinct"
    top_k: int = 100
    nms_threshold: float = 0.5
    score_threshold: float = 0.05
    iou_threshold: float = 0.5
    recall_k: int = 100
    ap_method: str = "all"
    baseline: bool = False
    overwrite: bool = True
    grad_points: int = 100
    out: str = "run"
    paths: dict = field(default_factory=dict)

    def path(self, key):
        default = {
            "semantics": "semantics.txt",
            "features": "features.txt",
            "scenes": "scenes.json",
            "synthetic": "synthetic.txt",
            "checkpoints": "checkpoints",
            "reports": "reports",
        }[key]
        return self.paths.get(key) or os.path.join(self.out, default)

    def checkpoint(self, name):
        return os.path.join(self.path("checkpoints"), f"{name}.model")

    def report(self, name):
        return os.path.join(self.path("reports"), name)


_RUN_TYPES = {f.name: f.type for f in dataclasses.fields(RunConfig) if f.name not in ("train", "world", "paths")}
_CHOICES = {
    "mode": MODES,
    "policy": tuple(POLICIES),
    "ap_method": ("all", "11point"),
    "penalty_mix": ("uniform", "normal"),
    "update_mode": ("frozen-seen", "joint"),
}


def _field_types(cls):
    return {f.name: f.type for f in dataclasses.fields(cls)}


_ALL = {**_field_types(LossWeights), **_field_types(TrainConfig), **_field_types(ToyWorldSpec)}
_TYPES = {k: _ALL[k] for k in _WEIGHT_KEYS + _TRAIN_KEYS + _WORLD_KEYS}
_TYPES.update(_RUN_TYPES)
_TYPES.update({k: str for k in _PATH_KEYS})


def _check_value(key, value):
    kind = _TYPES[key]
    kind = {"int": int, "float": float, "str": str, "bool": bool}.get(kind, kind)
    if kind is bool:
        ok = isinstance(value, bool)
    elif kind is int:
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif kind is float:
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    else:
        ok = isinstance(value, str)
    if not ok:
        raise ConfigError(key, f"expected {kind.__name__}, got {type(value).__name__} {value!r}")
    if kind in (int, float) and value < 0:
        raise ConfigError(key, f"must be non-negative, got {value!r}")
    if key in _CHOICES and value not in _CHOICES[key]:
        raise ConfigError(key, f"must be one of {', '.join(_CHOICES[key])}, got {value!r}")
    return value


def config_from_dict(raw, seed=None, out=None, mode=None):
    """Typed configuration from flat key/value pairs; absent keys keep their defaults."""
    values = {}
    for key, value in raw.items():
        if key not in _TYPES:
            raise ConfigError(key, "unknown configuration key")
        values[key] = _check_value(key, value)
    if seed is not None:
        values["seed"] = _check_value("seed", seed)
    if out is not None:
        values["out"] = str(out)
    if mode is not None:
        values["mode"] = _check_value("mode", mode)

    def build(cls, keys, **extra):
        kw = {k: values[k] for k in keys if k in values}
        try:
            return cls(**kw, **extra)
        except ContractError as e:
            bad = next(iter(kw), cls.__name__)
            raise ConfigError(bad, str(e)) from None

    run_seed = values.get("seed", 0)
    weights = build(LossWeights, _WEIGHT_KEYS)
    train = build(TrainConfig, _TRAIN_KEYS, weights=weights, seed=run_seed)
    policy = values.get("policy", "distinct")
    fg, bg = POLICIES[policy]
    world_kw = {"fg_min": fg, "bg_max": bg}
    world_kw.update({k: values[k] for k in _WORLD_KEYS if k in values})
    try:
        world = ToyWorldSpec(**world_kw)
    except ContractError as e:
        raise ConfigError(next((k for k in _WORLD_KEYS if k in values), "policy"), str(e)) from None
    run_kw = {k: values[k] for k in _RUN_TYPES if k in values}
    paths = {k: values[k] for k in _PATH_KEYS if k in values}
    return RunConfig(train=train, world=world, paths=paths, **run_kw)


def parse_config(path=None, seed=None, out=None, mode=None):
    raw = {}
    if path is not None:
        try:
            with open(path, "rb") as fh:
                raw = tomllib.load(fh)
        except OSError as e:
            raise ConfigError("--config", f"cannot read {path}: {e.strerror}") from None
        except tomllib.TOMLDecodeError as e:
            raise ConfigError("--config", f"{path}: {e}") from None
    for key, value in raw.items():
        if isinstance(value, dict):
            raise ConfigError(key, "tables are not supported; use flat key = value lines")
    return config_from_dict(raw, seed, out, mode)


# ---------------------------------------------------------------------------
# commands


class MissingPrerequisite(ZSDError):
    pass


def _require(*paths):
    for p in paths:
        if not os.path.exists(p):
            raise MissingPrerequisite(f"missing prerequisite {p}; run the earlier command first")


def _save(model, path, cfg):
    if not cfg.overwrite and os.path.exists(path):
        raise FileExistsError(f"refusing to overwrite {path}")
    save_model(model, path)


def cmd_gen_data(cfg):
    root = RandomStream(cfg.seed)
    world = gen_toy_world(cfg.world, root.spawn(_WORLD_STREAM))
    features = gen_feature_set(world, cfg.world, root.spawn(_FEATURE_STREAM))
    # evaluation scenes always use the distinct thresholds so policies compare on equal terms
    scene_spec = dataclasses.replace(cfg.world, fg_min=POLICIES["distinct"][0], bg_max=POLICIES["distinct"][1])
    scenes = gen_detection_scenes(world, scene_spec, root.spawn(_SCENE_STREAM))
    write_semantics(world.semantics, cfg.path("semantics"), cfg.overwrite)
    write_features(features, cfg.path("features"), cfg.overwrite)
    write_scenes(scenes, cfg.path("scenes"), cfg.overwrite)
    log.info("wrote %d feature records and %d scenes", len(features), len(scenes))


def cmd_train_gan(cfg):
    _require(cfg.path("semantics"), cfg.path("features"))
    semantics = read_semantics(cfg.path("semantics"))
    features = read_features(cfg.path("features"))
    st = cfg.train.streams()
    head_seen, acc = train_seen_classifier(features, semantics, cfg.train, st["seen_cls"])
    log.info("seen classifier accuracy %.4f", acc)
    sc, acc = train_semantic_classifier(features.where(labels=semantics.seen_ids, source="real"),
                                        semantics, cfg.train, st["sem_cls"])
    log.info("semantic classifier accuracy %.4f", acc)
    _save(head_seen, cfg.checkpoint("head_seen"), cfg)
    _save(sc, cfg.checkpoint("semantic"), cfg)
    try:
        g, c, reports = train_gan(features, semantics, head_seen, sc, cfg.train, st["gan"])
    except DivergenceError as e:
        if e.last_good is not None:
            g, c = e.last_good
            _save(g, cfg.checkpoint("generator"), cfg)
            _save(c, cfg.checkpoint("critic"), cfg)
        raise
    _save(g, cfg.checkpoint("generator"), cfg)
    _save(c, cfg.checkpoint("critic"), cfg)
    write_training_log(reports, cfg.report("train_log.tsv"), cfg.overwrite)


def cmd_synthesize(cfg):
    _require(cfg.path("semantics"), cfg.checkpoint("generator"))
    semantics = read_semantics(cfg.path("semantics"))
    g = load_model(cfg.checkpoint("generator"))
    synth = synthesize_features(g, semantics, cfg.train.features_per_unseen_class, cfg.train.streams()["synth"])
    write_features(synth, cfg.path("synthetic"), cfg.overwrite)
    log.info("synthesized %d unseen features", len(synth))


def cmd_train_classifier(cfg):
    _require(cfg.path("semantics"), cfg.path("features"), cfg.path("synthetic"), cfg.checkpoint("head_seen"))
    semantics = read_semantics(cfg.path("semantics"))
    features = read_features(cfg.path("features"))
    synth = read_features(cfg.path("synthetic"))
    head_seen = load_model(cfg.checkpoint("head_seen"))
    real = features.where(labels=(BACKGROUND_ID,) + semantics.seen_ids, source="real")
    head = update_classifier(head_seen, synth, real, cfg.train, stream=cfg.train.streams()["update"])
    _save(head, cfg.checkpoint("head"), cfg)


def _suffix(cfg):
    return f"{cfg.mode}-baseline" if cfg.baseline else cfg.mode


def cmd_detect(cfg):
    head_name = "head_seen" if cfg.baseline else "head"
    _require(cfg.path("scenes"), cfg.checkpoint(head_name), cfg.path("semantics"))
    scenes = read_scenes(cfg.path("scenes"))
    head = load_model(cfg.checkpoint(head_name))
    kw = dict(top_k=cfg.top_k, nms_thr=cfg.nms_threshold, score_thr=cfg.score_threshold)
    if cfg.baseline:
        semantics = read_semantics(cfg.path("semantics"))
        dets = [d for sc in scenes for d in detect_baseline(sc, head, semantics, cfg.mode, **kw)]
    else:
        dets = [d for sc in scenes for d in detect(sc, head, cfg.mode, **kw)]
    write_detections(dets, cfg.report(f"detections-{_suffix(cfg)}.tsv"), cfg.overwrite)
    log.info("%d detections over %d scenes", len(dets), len(scenes))


def cmd_evaluate(cfg):
    dets_path = cfg.report(f"detections-{_suffix(cfg)}.tsv")
    _require(cfg.path("scenes"), cfg.path("semantics"), dets_path)
    semantics = read_semantics(cfg.path("semantics"))
    gts = scene_ground_truths(read_scenes(cfg.path("scenes")))
    report = build_report(read_detections(dets_path), gts, semantics, cfg.mode, cfg.recall_k,
                          cfg.iou_threshold, cfg.ap_method)
    atomic_write_text(cfg.report(f"report-{_suffix(cfg)}.json"), report.to_json(), cfg.overwrite)
    log.info("%s mAP %.4f recall@%d %.4f", cfg.mode, report.map, cfg.recall_k, report.recall_at_k)
    return report


def cmd_grad_check(cfg):
    results = run_gradient_suite(points=cfg.grad_points, seed=cfg.seed)
    lines = ["check\tpoints\tworst_rel_error\tok"]
    for r in results:
        lines.append(f"{r.name}\t{r.points}\t{r.worst:.3e}\t{'yes' if r.ok else 'no'}")
        log.info("%-20s %4d points  worst %.3e  %s", r.name, r.points, r.worst, "ok" if r.ok else "FAIL")
    atomic_write_text(cfg.report("gradcheck.tsv"), "\n".join(lines) + "\n", cfg.overwrite)
    return EXIT_OK if all(r.ok for r in results) else EXIT_FAIL


def cmd_pipeline(cfg):
    for step in (cmd_gen_data, cmd_train_gan, cmd_synthesize, cmd_train_classifier, cmd_detect, cmd_evaluate):
        log.info("-- %s", step.__name__[4:].replace("_", "-"))
        step(cfg)


HANDLERS = {
    "gen-data": cmd_gen_data,
    "train-gan": cmd_train_gan,
    "synthesize": cmd_synthesize,
    "train-classifier": cmd_train_classifier,
    "detect": cmd_detect,
    "evaluate": cmd_evaluate,
    "grad-check": cmd_grad_check,
    "pipeline": cmd_pipeline,
}


def run_command(name, cfg):
    """Run one command; returns the process exit status."""
    try:
        status = HANDLERS[name](cfg)
    except (MissingPrerequisite, ConfigError) as e:
        log.error("%s", e)
        return EXIT_CONFIG
    except DivergenceError as e:
        log.error("diverged: %s (last good checkpoint kept)", e)
        return EXIT_DIVERGED
    except (ZSDError, OSError) as e:
        log.error("%s", e)
        return EXIT_FAIL
    return status if isinstance(status, int) else EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="synthzsd", description="Generative zero-shot detection on a toy world.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="flat key = value configuration file")
    p.add_argument("--seed", type=int, help="overrides the configured seed")
    p.add_argument("--out", help="output directory (default: run)")
    p.add_argument("--mode", choices=MODES, help="evaluation setting")
    p.add_argument("--baseline", action="store_true", help="detect/evaluate with the projection baseline")
    p.add_argument("--no-clobber", action="store_true", help="fail instead of overwriting outputs")
    p.add_argument("-q", "--quiet", action="store_true")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = parse_config(args.config, args.seed, args.out, args.mode)
    except ConfigError as e:
        log.error("%s", e)
        return EXIT_CONFIG
    if args.baseline:
        cfg = dataclasses.replace(cfg, baseline=True)
    if args.no_clobber:
        cfg = dataclasses.replace(cfg, overwrite=False)
    return run_command(args.command, cfg)


if __name__ == "__main__":
    sys.exit(main())
