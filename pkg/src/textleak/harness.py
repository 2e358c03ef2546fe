"""Experiment runner: configs, dataset ingestion, seeded grids and JSONL records.

Config files are flat ``key = value`` lines with dotted section names::

    model.hidden_dim = 16
    fed.defense = prune
    fed.prune_ratio = 0.9
    attack.profile = desk
    attack.cont.steps = 400
    experiment.batch_sizes = 1, 2, 4

Records are written one JSON object per line, each carrying
``schema_version``.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import traceback
from collections import Counter
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np

from .attack import ATTACKS, AttackConfig, AttackerKnowledge
from .continuous import ContOptConfig
from .discrete import DiscOptConfig
from .fedsim import Defense, FedConfig, client_step, run_rounds
from .metrics import mcc, rouge
from .model import EncoderClassifier, ModelConfig, SpecialTokens, TokenBatch
from .recovery import AttackerAdaptation, DistanceSpec
from .rng import substream, torch_generator

SCHEMA_VERSION = 1
OUTPUT_ENV = "TEXTLEAK_OUTPUT_DIR"
SPECIAL_STRINGS = {"[PAD]": "pad", "[UNK]": "unk", "[CLS]": "cls", "[SEP]": "sep"}


class DatasetError(ValueError):
    def __init__(self, message, lineno=None):
        super().__init__(f"line {lineno}: {message}" if lineno else message)
        self.lineno = lineno


def bundled(name: str) -> str:
    return str(resources.files("textleak") / "data" / name)


# -- dataset ----------------------------------------------------------------

@dataclass
class LoadReport:
    lines: int = 0
    unknown: Counter = field(default_factory=Counter)

    @property
    def unknown_count(self) -> int:
        return sum(self.unknown.values())


def special_from_vocab(vocab: list[str]) -> SpecialTokens:
    ids = {}
    for tok, name in SPECIAL_STRINGS.items():
        if tok not in vocab:
            raise DatasetError(f"vocabulary lacks {tok}")
        ids[name] = vocab.index(tok)
    return SpecialTokens(**ids)


def load_dataset(path, vocab: list[str], max_words: int | None = None):
    """Parse ``label<TAB>space separated words`` lines into single-row batches.

    Unknown words map to UNK and are tallied in the returned report.
    Returns ``(samples, report)``.
    """
    index = {t: i for i, t in enumerate(vocab)}
    special = special_from_vocab(vocab)
    samples, report = [], LoadReport()
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            label, sep, text = line.partition("\t")
            if not sep:
                raise DatasetError("expected '<label>\\t<tokens>'", lineno)
            try:
                y = int(label)
            except ValueError:
                raise DatasetError(f"label {label!r} is not an integer", lineno) from None
            words = text.split()
            if not words:
                raise DatasetError("empty token list", lineno)
            if max_words is not None:
                words = words[:max_words]
            ids = []
            for w in words:
                if w in index:
                    ids.append(index[w])
                else:
                    ids.append(special.unk)
                    report.unknown[w] += 1
            samples.append(TokenBatch.from_rows([ids], [y], special))
            report.lines += 1
    return samples, report


def make_batch(samples: list[TokenBatch], special: SpecialTokens) -> TokenBatch:
    """Stack single-row samples, padding to the longest one."""
    rows = [s.token_ids[0, 1:s.lengths[0] - 1].tolist() for s in samples]
    labels = [int(s.labels[0]) for s in samples]
    return TokenBatch.from_rows(rows, labels, special)


def select_samples(samples, k: int, seed: int, num_words: int | None = None):
    """Seeded selection of ``k`` samples (optionally of one exact word count)."""
    pool = [s for s in samples if num_words is None or s.lengths[0] - 2 == num_words]
    if len(pool) < k:
        raise DatasetError(f"only {len(pool)} eligible samples, {k} requested")
    idx = substream(seed, "data").choice(len(pool), size=k, replace=False)
    return [pool[i] for i in idx]


# -- configuration ------------------------------------------------------------

@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    fed: FedConfig = field(default_factory=FedConfig)
    attack: AttackConfig = field(default_factory=AttackConfig.desk)
    methods: tuple[str, ...] = ("grab",)
    dataset: str | None = None
    vocab: str | None = None
    num_words: int | None = 4
    pool_size: int = 64
    data_seed: int = 0
    model_seed: int = 0
    pretrain_rounds: int = 0
    batch_sizes: tuple[int, ...] = (1,)
    num_seeds: int = 3
    output: str = "results.jsonl"

    def __post_init__(self):
        if not self.batch_sizes or min(self.batch_sizes) < 1:
            raise ValueError("batch sizes must be >= 1")
        if self.num_seeds < 1:
            raise ValueError("num_seeds must be >= 1")
        unknown = set(self.methods) - set(ATTACKS)
        if unknown:
            raise ValueError(f"unknown attack methods {sorted(unknown)}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def config_hash(self) -> str:
        d = self.to_dict()
        d.pop("output")
        blob = json.dumps(d, sort_keys=True, default=str)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def dataset_path(self) -> str:
        return self.dataset or bundled("toy_corpus.tsv")

    def vocab_path(self) -> str:
        return self.vocab or bundled("toy_vocab.txt")

    def output_path(self) -> Path:
        out = Path(self.output)
        base = os.environ.get(OUTPUT_ENV)
        if base and not out.is_absolute():
            out = Path(base) / out
        return out


def parse_value(text: str):
    t = text.strip()
    low = t.lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    if low in ("none", "null", ""):
        return None
    if "," in t:
        return tuple(parse_value(p) for p in t.split(",") if p.strip())
    for conv in (int, float):
        try:
            return conv(t)
        except ValueError:
            pass
    return t


def parse_config_text(text: str) -> dict:
    flat = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValueError(f"config line {lineno}: expected 'key = value'")
        flat[key.strip()] = parse_value(value)
    return flat


def _pop_section(flat: dict, prefix: str) -> dict:
    out = {}
    for k in [k for k in flat if k.startswith(prefix + ".")]:
        out[k[len(prefix) + 1:]] = flat.pop(k)
    return out


def _as_tuple(v):
    return v if isinstance(v, tuple) else (v,)


def _check_keys(cls, kw: dict, section: str):
    unknown = set(kw) - {f.name for f in dataclasses.fields(cls)}
    if unknown:
        raise KeyError(f"unknown {section} keys: {sorted(unknown)}")


def _make(cls, kw: dict, section: str):
    _check_keys(cls, kw, section)
    return cls(**kw)


def _update(obj, kw: dict, section: str):
    _check_keys(type(obj), kw, section)
    return replace(obj, **kw)


def build_config(flat: dict) -> ExperimentConfig:
    """ExperimentConfig from flat dotted keys; unknown keys raise ``KeyError``."""
    flat = dict(flat)
    model_kw = _pop_section(flat, "model")
    model_seed = model_kw.pop("seed", 0)
    model = _make(ModelConfig, model_kw, "model")

    fed_kw = _pop_section(flat, "fed")
    pretrain = fed_kw.pop("pretrain_rounds", 0)
    kind = fed_kw.pop("defense", "none") or "none"
    defense = Defense(kind, **{k: fed_kw.pop(k) for k in ("noise_std", "clip", "prune_ratio")
                               if k in fed_kw})
    fed = _make(FedConfig, dict(fed_kw, defense=defense), "fed")

    cont_kw = _pop_section(flat, "attack.cont")
    disc_kw = _pop_section(flat, "attack.disc")
    dist_kw = _pop_section(flat, "attack.distance")
    adapt_kw = _pop_section(flat, "attack.adaptation")
    attack_kw = _pop_section(flat, "attack")
    profile = attack_kw.pop("profile", "desk")
    methods = _as_tuple(attack_kw.pop("methods", "grab"))
    if profile not in ("desk", "full", "tuned"):
        raise ValueError(f"unknown attack profile {profile!r}")
    attack = getattr(AttackConfig, profile)()
    attack = _update(attack, dict(attack_kw,
                                  cont=_update(attack.cont, cont_kw, "attack.cont"),
                                  disc=_update(attack.disc, disc_kw, "attack.disc"),
                                  distance=_update(attack.distance, dist_kw, "attack.distance"),
                                  adaptation=_update(attack.adaptation, adapt_kw,
                                                     "attack.adaptation")), "attack")

    data_kw = _pop_section(flat, "data")
    exp_kw = _pop_section(flat, "experiment")
    if flat:
        raise KeyError(f"unknown config keys: {sorted(flat)}")
    kw = dict(model=model, fed=fed, attack=attack, methods=methods, model_seed=model_seed,
              pretrain_rounds=pretrain)
    for k in ("path", "vocab", "num_words", "pool_size", "seed"):
        if k in data_kw:
            kw[{"path": "dataset", "seed": "data_seed"}.get(k, k)] = data_kw.pop(k)
    if data_kw:
        raise KeyError(f"unknown data keys: {sorted(data_kw)}")
    if "batch_sizes" in exp_kw:
        exp_kw["batch_sizes"] = _as_tuple(exp_kw["batch_sizes"])
    kw.update(exp_kw)
    return _make(ExperimentConfig, kw, "experiment")


def load_config(path) -> ExperimentConfig:
    return build_config(parse_config_text(Path(path).read_text()))


# -- running -------------------------------------------------------------------

def prepare_model(cfg: ExperimentConfig, samples=None) -> EncoderClassifier:
    """Model at the attacked round (after optional FedSGD pretraining rounds)."""
    model = EncoderClassifier(cfg.model, seed=cfg.model_seed)
    if cfg.pretrain_rounds:
        vocab_samples = samples or load_dataset(cfg.dataset_path(), load_vocab_list(cfg))[0]
        train_model(model, vocab_samples, replace(cfg.fed, rounds=cfg.pretrain_rounds,
                                                 defense=Defense()), batch_size=8,
                    seed=cfg.model_seed)
    return model


def load_vocab_list(cfg: ExperimentConfig) -> list[str]:
    from .checkpoint import load_vocab
    return load_vocab(cfg.vocab_path())


def train_model(model, samples, fed: FedConfig, batch_size: int = 8, seed: int = 0, log=None):
    """FedSGD training; each round draws ``num_clients`` batches from ``samples``."""
    special = model.config.special
    rng = substream(seed, "train")

    def batches(t):
        out = []
        for _ in range(fed.num_clients):
            idx = rng.choice(len(samples), size=batch_size, replace=False)
            out.append(make_batch([samples[i] for i in idx], special))
        return out

    return run_rounds(model, batches, fed, seed=seed, log=log)


def predict(model, samples) -> np.ndarray:
    import torch
    preds = []
    with torch.no_grad():
        for s in samples:
            preds.append(int(model(model.embed(s.token_ids)).argmax(-1)[0]))
    return np.array(preds)


def utility_mcc(model, samples) -> float:
    return mcc(predict(model, samples), [int(s.labels[0]) for s in samples])


def victim_batch(pool, batch_size: int, seed: int, special) -> TokenBatch:
    idx = substream(seed, f"batch/{batch_size}").choice(len(pool), size=batch_size, replace=False)
    return make_batch([pool[i] for i in idx], special)


def run_single(model, cfg: ExperimentConfig, pool, batch_size: int, seed: int, method: str):
    """One victim round plus one attack; returns ``(record, result)``."""
    special = cfg.model.special
    batch = victim_batch(pool, batch_size, seed, special)
    g, _ = client_step(batch, model, cfg.fed.defense, torch_generator(seed, "client-dropout"),
                       torch_generator(seed, "client-noise"))
    attack_cfg = replace(cfg.attack, seed=seed)
    knowledge = AttackerKnowledge.from_batch(batch, attack_cfg.known_labels,
                                             attack_cfg.known_lengths)
    result = ATTACKS[method](model, g, attack_cfg, knowledge)
    result.score(batch, (special.pad, special.cls, special.sep))
    record = {
        "schema_version": SCHEMA_VERSION, "type": "run", "config_hash": cfg.config_hash(),
        "batch_size": batch_size, "seed": seed, "method": method,
        "reference": batch.token_ids.tolist(), "labels": batch.labels.tolist(),
        "result": result.to_record(), "wall_time": result.wall_time,
    }
    return record, result


def aggregate(records: list[dict]) -> list[dict]:
    """Mean/std of R-1/R-2/R-L per (method, batch size) over successful runs."""
    groups: dict[tuple, list] = {}
    for r in records:
        if r.get("type") == "run" and r.get("result"):
            groups.setdefault((r["method"], r["batch_size"]), []).append(r["result"]["rouge"])
    out = []
    for (method, b), scores in sorted(groups.items()):
        arr = np.array([[s["r1"], s["r2"], s["rl"]] for s in scores])
        mean, std = arr.mean(axis=0), arr.std(axis=0)
        out.append({"schema_version": SCHEMA_VERSION, "type": "aggregate", "method": method,
                    "batch_size": b, "runs": len(scores),
                    "mean": dict(zip(("r1", "r2", "rl"), mean.tolist())),
                    "std": dict(zip(("r1", "r2", "rl"), std.tolist()))})
    return out


def trend_checks(aggregates: list[dict]) -> list[dict]:
    """Is mean R-1 non-increasing in batch size, within one pooled std?"""
    out = []
    by_method: dict[str, list] = {}
    for a in aggregates:
        by_method.setdefault(a["method"], []).append(a)
    for method, rows in by_method.items():
        rows = sorted(rows, key=lambda a: a["batch_size"])
        for lo, hi in zip(rows, rows[1:]):
            tol = float(np.sqrt((lo["std"]["r1"] ** 2 + hi["std"]["r1"] ** 2) / 2))
            out.append({"schema_version": SCHEMA_VERSION, "type": "trend", "method": method,
                        "from": lo["batch_size"], "to": hi["batch_size"],
                        "delta_r1": hi["mean"]["r1"] - lo["mean"]["r1"], "tolerance": tol,
                        "ok": hi["mean"]["r1"] <= lo["mean"]["r1"] + tol})
    return out


@dataclass
class ExperimentRecord:
    config_hash: str
    runs: list[dict]
    aggregates: list[dict]
    trends: list[dict]

    def lines(self) -> list[str]:
        return [json.dumps(r, sort_keys=True) for r in self.runs + self.aggregates + self.trends]


def run_experiment(cfg: ExperimentConfig, write: bool = True, seeds=None,
                   progress=None) -> ExperimentRecord:
    vocab = load_vocab_list(cfg)
    samples, _ = load_dataset(cfg.dataset_path(), vocab)
    pool = select_samples(samples, cfg.pool_size, cfg.data_seed, cfg.num_words)
    model = prepare_model(cfg, samples)
    runs = []
    writer = None
    if write:
        path = cfg.output_path()
        path.parent.mkdir(parents=True, exist_ok=True)
        writer = open(path, "w")
    try:
        for b in cfg.batch_sizes:
            for seed in (seeds if seeds is not None else range(cfg.num_seeds)):
                for method in cfg.methods:
                    try:
                        record, _ = run_single(model, cfg, pool, b, seed, method)
                    except Exception as exc:  # recorded, grid continues
                        record = {"schema_version": SCHEMA_VERSION, "type": "run",
                                  "config_hash": cfg.config_hash(), "batch_size": b,
                                  "seed": seed, "method": method, "result": None,
                                  "error": f"{type(exc).__name__}: {exc}",
                                  "traceback": traceback.format_exc(limit=3)}
                    runs.append(record)
                    if writer:
                        writer.write(json.dumps(record, sort_keys=True) + "\n")
                        writer.flush()
                    if progress:
                        progress(record)
        aggs = aggregate(runs)
        trends = trend_checks(aggs)
        if writer:
            for r in aggs + trends:
                writer.write(json.dumps(r, sort_keys=True) + "\n")
    finally:
        if writer:
            writer.close()
    return ExperimentRecord(cfg.config_hash(), runs, aggs, trends)


def read_records(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def rescore(records: list[dict], special_ids=(0, 2, 3)) -> list[dict]:
    """Recompute ROUGE for stored runs from their reference and recovered ids."""
    out = []
    for r in records:
        if r.get("type") != "run":
            continue
        r = json.loads(json.dumps(r))
        if r.get("result"):
            r["result"]["rouge"] = rouge(r["reference"], r["result"]["token_ids"],
                                         special_ids).as_dict()
        out.append(r)
    return out
