"""Command-line driver: simulate, prepare, train, evaluate, predict.

Every command reads one JSON run config (``--config``); flags override it.
Outputs are written to a temp file and renamed, and only after all compute
has finished, so a failed run leaves no partial files behind.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import tempfile
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__
from .baselines import (HawkesFit, LogisticModels, fit_logistic, hawkes_predict_next,
                        predict_logistic, select_beta)
from .data import (EventLog, Normalization, SampleSet, Taxonomy, WindowConfig, build_samples,
                   parse_event_log, parse_profiles, query_sample, split_entities,
                   write_event_log, write_profiles)
from .metrics import evaluate
from .model import (CHECKPOINT_FORMAT, FORMAT_VERSION, ModelConfig, PredictedEvent,
                    load_checkpoint, predict_batched, save_checkpoint)
from .ppsim import EventSequence, SyntheticSpec, make_synthetic_dataset
from .trainer import TrainConfig, compute_class_weights, train

log = logging.getLogger("twinpp")

VARIANTS = {"intensity-rnn": "both", "time-series-rnn": "ts", "event-rnn": "event"}
HEADS = ("flat", "hierarchical")
BASELINES = ("none", "hawkes", "logistic")
SPLITS = ("train", "val", "test")


class ConfigError(ValueError):
    pass


@dataclass
class ModelOptions:
    """The size/shape part of ModelConfig; class counts come from the data."""
    hidden_dim: int = 32
    embed_dim: int = 16
    sigma2: float = 10.0
    peephole: str = "diagonal"
    event_feature_dim: int | None = None
    dt_transform: str = "log1p"


@dataclass
class SplitOptions:
    test_fraction: float = 0.3
    val_fraction: float = 0.2       # of the non-test entities
    horizon: float | None = None    # observation end; default = last timestamp


@dataclass
class HawkesOptions:
    l1_weight: float = 0.0
    betas: list = field(default_factory=lambda: [0.5, 1.0, 2.0])
    max_iters: int = 2000
    n_rollouts: int = 100


@dataclass
class LogisticOptions:
    l2_weight: float = 1e-3
    max_iter: int = 500


@dataclass
class RunConfig:
    seed: int = 0
    variant: str | None = None      # default intensity-rnn unless a baseline is chosen
    head: str = "hierarchical"
    baseline: str = "none"
    window: WindowConfig = field(default_factory=WindowConfig)
    model: ModelOptions = field(default_factory=ModelOptions)
    train: TrainConfig = field(default_factory=TrainConfig)
    simulate: SyntheticSpec = field(default_factory=SyntheticSpec)
    split: SplitOptions = field(default_factory=SplitOptions)
    hawkes: HawkesOptions = field(default_factory=HawkesOptions)
    logistic: LogisticOptions = field(default_factory=LogisticOptions)
    paths: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        nested = {f.name: f.type for f in fields(cls)}
        kinds = {"window": WindowConfig, "model": ModelOptions, "train": TrainConfig,
                 "simulate": SyntheticSpec, "split": SplitOptions, "hawkes": HawkesOptions,
                 "logistic": LogisticOptions}
        unknown = set(d) - set(nested)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kw = {}
        for k, v in d.items():
            if k in kinds:
                if not isinstance(v, dict):
                    raise ConfigError(f"config section {k!r} must be an object")
                allowed = {f.name for f in fields(kinds[k])}
                bad = set(v) - allowed
                if bad:
                    raise ConfigError(f"unknown keys in {k!r}: {sorted(bad)}")
                try:
                    kw[k] = kinds[k](**v)
                except (TypeError, ValueError) as exc:
                    raise ConfigError(f"bad {k!r} section: {exc}") from None
            else:
                kw[k] = v
        return cls(**kw)

    def to_dict(self) -> dict:
        return asdict(self)

    def resolve(self) -> "RunConfig":
        """Check the variant/baseline choice and fill in the default variant."""
        if self.baseline not in BASELINES:
            raise ConfigError(f"baseline must be one of {BASELINES}")
        if self.baseline != "none":
            if self.variant is not None:
                raise ConfigError("variant and baseline are mutually exclusive; choose one")
        else:
            self.variant = self.variant or "intensity-rnn"
            if self.variant not in VARIANTS:
                raise ConfigError(f"variant must be one of {sorted(VARIANTS)}")
        if self.head not in HEADS:
            raise ConfigError(f"head must be one of {HEADS}")
        return self

    def model_config(self, taxonomy: Taxonomy, ts_feature_dim: int) -> ModelConfig:
        flat = self.head == "flat"
        return ModelConfig(
            k_main=len(taxonomy.main_types), k_sub=len(taxonomy.sub_types),
            ts_feature_dim=ts_feature_dim, head_mode=self.head,
            streams=VARIANTS[self.variant], loss_mode="sub" if flat else "joint",
            sub_parent=list(taxonomy.parent), **asdict(self.model))


# ---------------------------------------------------------------- file helpers


def atomic_write(path: Path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def commit(outdir: Path, files: dict[str, str]) -> None:
    for name, text in files.items():
        atomic_write(Path(outdir) / name, text)
    log.info("wrote %s to %s", ", ".join(sorted(files)), outdir)


def _need(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"{what} not found: {p}")
    return p


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=1) + "\n"


def _read_split(data_dir: Path, split: str) -> SampleSet:
    return SampleSet.loads(_need(data_dir / f"{split}.jsonl", f"{split} samples").read_text())


def _read_events(path: Path, taxonomy: Taxonomy | None = None) -> EventLog:
    with open(_need(path, "event log"), encoding="utf-8") as fh:
        return parse_event_log(fh, taxonomy)


def _infer_taxonomy(events: EventLog) -> Taxonomy:
    mapping: dict[str, set] = {}
    for r in events.records:
        mapping.setdefault(r.main_type, set()).add(r.sub_type)
    return Taxonomy.from_mapping({m: sorted(mapping[m]) for m in sorted(mapping)})


# ---------------------------------------------------------------- commands


def cmd_simulate(cfg: RunConfig, out: Path) -> dict[str, str]:
    ds = make_synthetic_dataset(cfg.simulate, cfg.seed)
    return {
        "events.jsonl": write_event_log(ds.events),
        "profiles.csv": write_profiles(ds.profiles),
        "manifest.json": _dump(ds.manifest),
        "taxonomy.json": ds.taxonomy.dumps() + "\n",
    }


def cmd_prepare(cfg: RunConfig, events_path: Path, profiles_path: Path,
                taxonomy_path: Path | None) -> dict[str, str]:
    taxonomy = Taxonomy.loads(taxonomy_path.read_text()) if taxonomy_path else None
    events = _read_events(events_path, taxonomy)
    if not events.records:
        raise ValueError("event log is empty")
    taxonomy = taxonomy or _infer_taxonomy(events)
    with open(profiles_path, encoding="utf-8") as fh:
        profiles = parse_profiles(fh)

    ids = sorted({r.entity_id for r in events.records})
    rest, test_ids = split_entities(ids, cfg.split.test_fraction, cfg.seed)
    train_ids, val_ids = split_entities(rest, cfg.split.val_fraction, cfg.seed + 1)
    if not train_ids or not val_ids:
        raise ValueError("split left the training or validation set without entities")
    norm = Normalization.fit(profiles[e] for e in train_ids if e in profiles)

    files = {}
    for name, group in zip(SPLITS, (train_ids, val_ids, test_ids)):
        keep = set(group)
        ss = build_samples([r for r in events.records if r.entity_id in keep], profiles,
                           cfg.window, taxonomy, norm)
        log.info("%s: %d entities, %d samples", name, len(group), len(ss))
        files[f"{name}.jsonl"] = ss.dumps()
    horizon = cfg.split.horizon
    if horizon is None:
        horizon = max(r.timestamp for r in events.records)
    files["splits.json"] = _dump({"version": 1, "seed": cfg.seed, "horizon": horizon,
                                  "train": train_ids, "val": val_ids, "test": test_ids})
    files["events.jsonl"] = write_event_log(events.records)
    files["taxonomy.json"] = taxonomy.dumps() + "\n"
    return files


def _sequences(events: EventLog, taxonomy: Taxonomy, ids, horizon: float) -> list[EventSequence]:
    grouped = events.by_entity()
    out = []
    for e in ids:
        recs = grouped.get(e, [])
        times = np.array([r.timestamp for r in recs])
        marks = np.array([taxonomy.sub_id(r.sub_type) for r in recs], dtype=np.int64)
        out.append(EventSequence(times, max(horizon, float(times.max()) if times.size else 0.0),
                                 marks))
    return out


def _checkpoint_doc(kind: str, cfg: RunConfig, header: dict, body: dict) -> str:
    doc = {"format": CHECKPOINT_FORMAT, "version": FORMAT_VERSION, "kind": kind,
           "vocab": header["taxonomy"], "data": header, "run": cfg.to_dict()}
    doc.update(body)
    return json.dumps(doc, sort_keys=True)


def cmd_train(cfg: RunConfig, data_dir: Path) -> dict[str, str]:
    tr, va = _read_split(data_dir, "train"), _read_split(data_dir, "val")
    header = tr.header()
    taxonomy = tr.taxonomy
    if cfg.baseline == "logistic":
        models = fit_logistic(tr.samples, len(taxonomy.sub_types), cfg.logistic.l2_weight,
                              taxonomy.parent, cfg.logistic.max_iter)
        return {"checkpoint.json": _checkpoint_doc("logistic", cfg, header,
                                                   {"model": models.to_dict()})}
    if cfg.baseline == "hawkes":
        splits = json.loads(_need(data_dir / "splits.json", "splits file").read_text())
        events = _read_events(data_dir / "events.jsonl", taxonomy)
        seqs = {k: _sequences(events, taxonomy, splits[k], splits["horizon"])
                for k in ("train", "val")}
        fit = select_beta(seqs["train"], seqs["val"], len(taxonomy.sub_types),
                          cfg.hawkes.l1_weight, tuple(cfg.hawkes.betas), cfg.hawkes.max_iters)
        return {"checkpoint.json": _checkpoint_doc("hawkes", cfg, header,
                                                   {"model": fit.to_dict()})}

    mcfg = cfg.model_config(taxonomy, tr.ts_feature_dim)
    tcfg = TrainConfig(**{**asdict(cfg.train), "rng_seed": cfg.seed})
    names = {"main": taxonomy.main_types, "sub": taxonomy.sub_types}
    weights = (compute_class_weights(tr.samples, mcfg, names) if tcfg.class_weighting else None)
    if weights is None:
        tcfg.class_weighting = False
    params, curve = train(tr.samples, va.samples, mcfg, tcfg, weights)
    extra = {"data": header, "run": cfg.to_dict(), "variant": cfg.variant, "head": cfg.head,
             "best_epoch": curve.best_epoch}
    return {"checkpoint.json": save_checkpoint(params, mcfg, header["taxonomy"], extra),
            "loss_curve.csv": curve.to_csv()}


def replay_checkpoint(header: dict, rows) -> str:
    """Checkpoint that answers from a fixed table of (entity, anchor, sub id, gap) rows.

    Useful for scoring externally produced predictions with ``evaluate``.
    """
    doc = {"format": CHECKPOINT_FORMAT, "version": FORMAT_VERSION, "kind": "replay",
           "vocab": header["taxonomy"], "data": header,
           "predictions": [[e, float(a), int(k), float(g)] for e, a, k, g in rows]}
    return json.dumps(doc, sort_keys=True)


@dataclass
class Predictor:
    """Uniform prediction interface over the checkpoint kinds."""
    kind: str
    doc: dict
    header: dict
    params: object = None
    model_cfg: ModelConfig | None = None
    model: object = None

    @classmethod
    def load(cls, path: Path) -> "Predictor":
        text = _need(path, "checkpoint").read_text()
        doc = json.loads(text)
        if doc.get("format") != CHECKPOINT_FORMAT or doc.get("version") != FORMAT_VERSION:
            raise ValueError(f"{path} is not a supported checkpoint")
        kind = doc.get("kind")
        if kind == "rnn":
            params, mcfg, _ = load_checkpoint(text)
            return cls(kind, doc, doc["data"], params, mcfg)
        if kind == "logistic":
            return cls(kind, doc, doc["data"], model=LogisticModels.from_dict(doc["model"]))
        if kind == "hawkes":
            return cls(kind, doc, doc["data"], model=HawkesFit.from_dict(doc["model"]))
        if kind == "replay":
            table = {(e, float(a)): (int(k), float(g)) for e, a, k, g in doc["predictions"]}
            return cls(kind, doc, doc["data"], model=table)
        raise ValueError(f"unknown checkpoint kind {kind!r}")

    @property
    def taxonomy(self) -> Taxonomy:
        return Taxonomy.from_mapping(self.header["taxonomy"])

    @property
    def seed(self) -> int:
        return int(self.doc.get("run", {}).get("seed", 0))

    def predict(self, samples, histories=None) -> list[PredictedEvent]:
        """``histories`` (entity -> EventSequence) is needed for the Hawkes kind."""
        if self.kind == "rnn":
            return predict_batched(self.params, samples, self.model_cfg)
        if self.kind == "logistic":
            return predict_logistic(self.model, samples)
        parent = self.taxonomy.parent
        if self.kind == "replay":
            out = []
            for s in samples:
                try:
                    sub, gap = self.model[(s.entity_id, s.anchor)]
                except KeyError:
                    raise ValueError(f"replay has no prediction for {s.entity_id!r} "
                                     f"at {s.anchor}") from None
                out.append(PredictedEvent(parent[sub], sub, gap))
            return out
        n_roll = int(self.doc["run"]["hawkes"]["n_rollouts"])
        out = []
        for i, s in enumerate(samples):
            seq = histories[s.entity_id]
            keep = seq.times <= s.anchor
            hist = EventSequence(seq.times[keep], s.anchor, seq.marks[keep])
            rng = np.random.default_rng([self.seed, i])
            sub, gap = hawkes_predict_next(self.model.params, hist, s.anchor, n_roll, rng)
            out.append(PredictedEvent(parent[sub], sub, max(gap, 0.0)))
        return out


def cmd_evaluate(ckpt: Path, data_dir: Path, split: str) -> dict[str, str]:
    pred = Predictor.load(ckpt)
    ss = _read_split(data_dir, split)
    if ss.taxonomy.to_pairs() != pred.header["taxonomy"]:
        raise ValueError("checkpoint and data use different taxonomies")
    if not ss.samples:
        raise ValueError(f"no {split} samples to evaluate")
    histories = None
    if pred.kind == "hawkes":
        events = _read_events(data_dir / "events.jsonl", ss.taxonomy)
        ids = ss.entity_ids()
        histories = dict(zip(ids, _sequences(events, ss.taxonomy, ids, 0.0)))
    preds = pred.predict(ss.samples, histories)
    tax = ss.taxonomy
    report = evaluate(tax.main_types, tax.sub_types,
                      [p.main_type for p in preds], [s.target_main for s in ss.samples],
                      [p.sub_type for p in preds], [s.target_sub for s in ss.samples],
                      [p.gap_days for p in preds], [s.target_gap for s in ss.samples])
    rows = ["entity_id,anchor,true_main,pred_main,true_sub,pred_sub,true_gap,pred_gap"]
    for s, p in zip(ss.samples, preds):
        rows.append(",".join([s.entity_id, repr(s.anchor), tax.main_types[s.target_main],
                              tax.main_types[p.main_type], tax.sub_types[s.target_sub],
                              tax.sub_types[p.sub_type], repr(s.target_gap),
                              repr(float(p.gap_days))]))
    doc = report.to_dict()
    doc["kind"] = pred.kind
    doc["split"] = split
    return {
        "report.json": _dump(doc),
        "report_main.csv": report.main.to_csv(),
        "report_sub.csv": report.sub.to_csv(),
        "confusion_main.csv": report.main.confusion.to_csv(),
        "confusion_sub.csv": report.sub.confusion.to_csv(),
        "predictions.csv": "\n".join(rows) + "\n",
    }


def cmd_predict(ckpt: Path, events_path: Path, profiles_path: Path | None, entity: str,
                at_time: float) -> dict:
    pred = Predictor.load(ckpt)
    tax = pred.taxonomy
    events = _read_events(events_path, tax)
    recs = events.by_entity().get(entity, [])
    wc = WindowConfig(**pred.header["window"])
    if pred.kind == "hawkes":
        static = np.zeros(0)
    else:
        if profiles_path is None:
            raise ConfigError("--profiles is required for this checkpoint")
        with open(_need(profiles_path, "profiles"), encoding="utf-8") as fh:
            profiles = parse_profiles(fh)
        if entity not in profiles:
            raise ValueError(f"entity {entity!r} has no profile")
        static = Normalization(**pred.header["norm"]).apply(profiles[entity])
    sample = query_sample(entity, recs, static, wc, tax, at_time)
    histories = None
    if pred.kind == "hawkes":
        histories = dict(zip([entity], _sequences(events, tax, [entity], 0.0)))
    p = pred.predict([sample], histories)[0]
    return {"entity_id": entity, "query_time": at_time, "anchor": sample.anchor,
            "main_type": tax.main_types[p.main_type], "sub_type": tax.sub_types[p.sub_type],
            "gap_days": float(p.gap_days), "predicted_time": sample.anchor + float(p.gap_days),
            "kind": pred.kind}


# ---------------------------------------------------------------- argument parsing


def _load_config(args) -> RunConfig:
    doc = {}
    if args.config:
        try:
            doc = json.loads(_need(args.config, "config file").read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from None
    cfg = RunConfig.from_dict(doc)
    if args.seed is not None:
        cfg.seed = args.seed
    for flag, section, key in _OVERRIDES:
        value = getattr(args, flag, None)
        if value is None:
            continue
        if section is None:
            setattr(cfg, key, value)
        else:
            setattr(getattr(cfg, section), key, value)
    # re-run dataclass validation after overrides
    cfg.train = TrainConfig(**asdict(cfg.train))
    cfg.window = WindowConfig(**asdict(cfg.window))
    return cfg


_OVERRIDES = [
    ("variant", None, "variant"), ("head", None, "head"), ("baseline", None, "baseline"),
    ("epochs", "train", "max_epochs"), ("lr", "train", "learning_rate"),
    ("batch_size", "train", "batch_size"), ("patience", "train", "patience"),
    ("hidden_dim", "model", "hidden_dim"), ("embed_dim", "model", "embed_dim"),
    ("entities", "simulate", "n_entities"), ("horizon", "simulate", "horizon"),
    ("generator", "simulate", "generator"), ("test_fraction", "split", "test_fraction"),
    ("val_fraction", "split", "val_fraction"),
]


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON run config; flags override it")
    common.add_argument("--seed", type=int)
    common.add_argument("--threads", type=int,
                        default=int(os.environ["TWINPP_THREADS"]) if os.environ.get("TWINPP_THREADS") else None,
                        help="BLAS threads (default $TWINPP_THREADS); 1 is bit-reproducible")
    common.add_argument("-v", "--verbose", action="store_true")

    ap = argparse.ArgumentParser(prog="twinpp", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version",
                    version=f"twinpp {__version__} (checkpoint format {FORMAT_VERSION})")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common], help="write a synthetic corpus")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--entities", type=int)
    p.add_argument("--horizon", type=float)
    p.add_argument("--generator", choices=["poisson", "hawkes"])

    p = sub.add_parser("prepare", parents=[common], help="build windowed samples and splits")
    p.add_argument("--events", type=Path, required=True)
    p.add_argument("--profiles", type=Path, required=True)
    p.add_argument("--taxonomy", type=Path)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--test-fraction", type=float)
    p.add_argument("--val-fraction", type=float)

    p = sub.add_parser("train", parents=[common], help="train a model variant or baseline")
    p.add_argument("--data", type=Path, required=True, help="directory written by prepare")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--variant", choices=sorted(VARIANTS))
    p.add_argument("--head", choices=HEADS)
    p.add_argument("--baseline", choices=BASELINES)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--hidden-dim", type=int)
    p.add_argument("--embed-dim", type=int)

    p = sub.add_parser("evaluate", parents=[common], help="score a checkpoint")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--split", choices=SPLITS, default="test")
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("predict", parents=[common], help="predict one entity's next event")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--events", type=Path, required=True)
    p.add_argument("--profiles", type=Path)
    p.add_argument("--entity", required=True)
    p.add_argument("--at", type=float, required=True, help="query time in days")
    return ap


def run(args) -> int:
    cfg = _load_config(args)
    cmd = args.command
    if cmd == "simulate":
        commit(args.out, cmd_simulate(cfg, args.out))
    elif cmd == "prepare":
        _need(args.events, "event log")
        _need(args.profiles, "profiles")
        if args.taxonomy:
            _need(args.taxonomy, "taxonomy")
        commit(args.out, cmd_prepare(cfg, args.events, args.profiles, args.taxonomy))
    elif cmd == "train":
        cfg.resolve()
        for split in ("train", "val"):
            _need(args.data / f"{split}.jsonl", f"{split} samples")
        files = cmd_train(cfg, args.data)
        files["run_config.json"] = _dump(cfg.to_dict())
        commit(args.out, files)
    elif cmd == "evaluate":
        _need(args.checkpoint, "checkpoint")
        _need(args.data / f"{args.split}.jsonl", f"{args.split} samples")
        commit(args.out, cmd_evaluate(args.checkpoint, args.data, args.split))
    elif cmd == "predict":
        _need(args.checkpoint, "checkpoint")
        _need(args.events, "event log")
        out = cmd_predict(args.checkpoint, args.events, args.profiles, args.entity, args.at)
        sys.stdout.write(json.dumps(out, sort_keys=True) + "\n")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.threads is not None:
            if args.threads < 1:
                raise ConfigError("--threads must be >= 1")
            from threadpoolctl import threadpool_limits
            with threadpool_limits(limits=args.threads):
                return run(args)
        return run(args)
    except (ConfigError, ValueError, OSError) as exc:
        print(f"twinpp {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
