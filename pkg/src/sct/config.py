"""Run-config files: one JSON document holding model, optimizer, run, data and output settings.

Unknown keys are rejected so typos fail loudly. Relative paths resolve
against the config file's directory (bundled configs resolve against the
working directory).
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field, fields
from importlib import resources
from pathlib import Path
from typing import List

from sct.data import DataConfig
from sct.errors import ConfigError, RankError, ShapeError
from sct.model import ModelConfig
from sct.optim import GROUPS, OptimConfig, default_group_configs
from sct.trainer import RunConfig

BUNDLED = ("toy.config", "smollm135m-shapes.config", "llama70b.config")
SECTIONS = ("model", "optim", "run", "data", "sweep", "outputs")
RUN_KEYS = ("steps", "batch_size", "seed", "record_timing")
OUTPUT_KEYS = ("dir", "metrics", "checkpoint", "ortho", "figures")
OPTIM_KEYS = tuple(f.name for f in fields(OptimConfig))


@dataclass
class Outputs:
    dir: str = "out"
    metrics: str = "metrics.csv"
    checkpoint: str = "checkpoint"
    ortho: str = "ortho.csv"
    figures: bool = True


@dataclass
class CliConfig:
    run: RunConfig
    ranks: List[int] = field(default_factory=lambda: [4, 8, 16])
    outputs: Outputs = field(default_factory=Outputs)
    base_dir: Path = field(default_factory=Path.cwd)
    source: str = "<dict>"

    @property
    def model(self):
        return self.run.model

    @property
    def out_dir(self):
        p = Path(self.outputs.dir)
        return p if p.is_absolute() else self.base_dir / p


def _check_keys(section, data, allowed):
    if not isinstance(data, dict):
        raise ConfigError(f"{section}: expected an object, got {type(data).__name__}")
    unknown = sorted(set(data) - set(allowed))
    if unknown:
        raise ConfigError(f"{section}: unknown key(s) {', '.join(unknown)}; allowed: {', '.join(allowed)}")


def _build(section, cls, data):
    try:
        return cls(**data)
    except TypeError as exc:
        raise ConfigError(f"{section}: {exc}") from exc
    except (RankError, ShapeError) as exc:
        raise ConfigError(f"{section}: {exc}") from exc


def parse_config(doc, base_dir=None, source="<dict>") -> CliConfig:
    doc = copy.deepcopy(doc)
    _check_keys("config", doc, SECTIONS)
    model_doc = doc.get("model", {})
    _check_keys("model", model_doc, [f.name for f in fields(ModelConfig)])
    model = _build("model", ModelConfig, model_doc)

    optim_doc = dict(doc.get("optim", {}))
    _check_keys("optim", optim_doc, GROUPS + ("schedule",))
    schedule = optim_doc.pop("schedule", "constant")
    groups = default_group_configs()
    for name, gdoc in optim_doc.items():
        _check_keys(f"optim.{name}", gdoc, OPTIM_KEYS)
        merged = {**groups[name].__dict__, **gdoc}
        groups[name] = _build(f"optim.{name}", OptimConfig, merged)

    run_doc = doc.get("run", {})
    _check_keys("run", run_doc, RUN_KEYS)
    data_doc = doc.get("data", {})
    _check_keys("data", data_doc, [f.name for f in fields(DataConfig)])
    data = _build("data", DataConfig, data_doc)

    out_doc = doc.get("outputs", {})
    _check_keys("outputs", out_doc, OUTPUT_KEYS)
    outputs = _build("outputs", Outputs, out_doc)

    sweep_doc = doc.get("sweep", {})
    _check_keys("sweep", sweep_doc, ("ranks",))
    ranks = sweep_doc.get("ranks", [4, 8, 16])
    if not isinstance(ranks, list) or not all(isinstance(k, int) and not isinstance(k, bool) and k >= 1 for k in ranks):
        raise ConfigError(f"sweep.ranks must be a list of positive integers, got {ranks!r}")

    base = Path(base_dir) if base_dir is not None else Path.cwd()
    out_dir = Path(outputs.dir) if Path(outputs.dir).is_absolute() else base / outputs.dir
    run = _build(
        "run",
        RunConfig,
        dict(
            model=model,
            optim=groups,
            schedule=schedule,
            data=data,
            metrics_path=str(out_dir / outputs.metrics),
            checkpoint_path=str(out_dir / outputs.checkpoint),
            ortho_path=str(out_dir / outputs.ortho),
            base_dir=str(base),
            **run_doc,
        ),
    )
    if schedule not in ("constant", "linear"):
        raise ConfigError(f"optim.schedule must be 'constant' or 'linear', got {schedule!r}")
    return CliConfig(run=run, ranks=ranks, outputs=outputs, base_dir=base, source=source)


def load_document(path):
    """Read a config file (or a bundled config name) and return (doc, base_dir, source)."""
    p = Path(path)
    if p.exists():
        text = p.read_text(encoding="utf-8")
        base, source = p.resolve().parent, str(p)
    elif p.name in BUNDLED and str(p) == p.name:
        text = resources.files("sct").joinpath(f"resources/configs/{p.name}").read_text(encoding="utf-8")
        base, source = Path.cwd(), f"bundled:{p.name}"
    else:
        raise ConfigError(f"config file not found: {path}")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{source}: line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    return doc, base, source


def _coerce(raw):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def apply_overrides(doc, overrides):
    """Apply ``section.key=value`` overrides; values parse as JSON, else as strings."""
    doc = copy.deepcopy(doc)
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        dotted, raw = item.split("=", 1)
        parts = dotted.split(".")
        if len(parts) < 2:
            raise ConfigError(f"override {item!r} must name a section and key")
        node = doc
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {item!r}: {part} is not a section")
        node[parts[-1]] = _coerce(raw)
    return doc


def load_config(path, overrides=None) -> CliConfig:
    doc, base, source = load_document(path)
    doc = apply_overrides(doc, overrides)
    try:
        return parse_config(doc, base_dir=base, source=source)
    except ConfigError as exc:
        raise ConfigError(f"{source}: {exc}") from exc
