"""Run configuration: one YAML file, with every key overridable from the
command line via dotted ``--set`` paths."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import yaml

from .data import FilePattern
from .errors import ConfigError
from .panel import CellType, MarkerLevels, PanelConfig
from .parallel import thread_count

_TOP_LEVEL_KEYS = {
    "inputs",
    "output",
    "pattern",
    "panel",
    "model",
    "method",
    "seeds",
    "split",
    "simulate",
    "evaluate",
    "impute",
    "histogram",
    "threads",
    "missing_token",
}

METHODS = ("nn", "cluster-nn")


@dataclass
class SimulateConfig:
    kind: str = "panel"
    n: int = 25000
    weights: tuple[float, ...] | None = None


@dataclass
class RunConfig:
    """Resolved run configuration; ``raw`` is the exact dictionary echoed
    into every output directory."""

    pattern: FilePattern
    panel: PanelConfig
    n_components: int
    latent_dim: int
    tol: float = 1e-6
    max_iter: int = 500
    method: str = "cluster-nn"
    seed_split: int = 0
    seed_init: int = 0
    seed_simulate: int = 0
    split_sizes: tuple[int, int, int] | None = None
    eval_repeats: int = 10
    eval_max_points: int = 5000
    file1: str | None = None
    file2: str | None = None
    truth: str | None = None
    output: str | None = None
    simulate: SimulateConfig = field(default_factory=SimulateConfig)
    threads: int = 1
    standardize_common: bool = False
    use_index: bool | None = None
    histogram_bins: int = 64
    histogram_smoothing: int = 3
    missing_token: str = ""
    raw: dict = field(default_factory=dict, repr=False)


def _require(section: dict, key: str, where: str) -> Any:
    if key not in section:
        raise ConfigError(f"config section {where!r} is missing required key {key!r}")
    return section[key]


def _as_mapping(value: Any, where: str) -> dict:
    if value is None:
        return {}
    if not isinstance(value, dict):
        raise ConfigError(f"config section {where!r} must be a mapping")
    return value


def _parse_pattern(section: Any) -> FilePattern:
    section = _as_mapping(section, "pattern")
    common = _require(section, "common", "pattern")
    return FilePattern(
        tuple(common),
        tuple(section.get("specific1", ())),
        tuple(section.get("specific2", ())),
    )


def _parse_levels(section: Any) -> dict[str, MarkerLevels]:
    section = _as_mapping(section, "panel.levels")
    levels = {}
    for marker, pair in section.items():
        if not isinstance(pair, (list, tuple)) or len(pair) != 2:
            raise ConfigError(f"panel.levels.{marker} must be a [negative, positive] pair")
        levels[str(marker)] = MarkerLevels(float(pair[0]), float(pair[1]))
    return levels


def _parse_panel(section: Any) -> PanelConfig:
    section = _as_mapping(section, "panel")
    markers = tuple(str(m) for m in _require(section, "markers", "panel"))
    raw_types = _require(section, "cell_types", "panel")
    if not isinstance(raw_types, list):
        raise ConfigError("panel.cell_types must be a list of {name, signs} entries")
    cell_types = []
    for entry in raw_types:
        entry = _as_mapping(entry, "panel.cell_types[]")
        name = str(_require(entry, "name", "panel.cell_types[]"))
        signs = {str(m): str(s) for m, s in _as_mapping(entry.get("signs"), f"panel.cell_types.{name}.signs").items()}
        cell_types.append(CellType(name, signs))
    return PanelConfig(markers, tuple(cell_types), _parse_levels(section.get("levels")))


def _parse_override(raw: dict, assignment: str) -> None:
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} must look like key.path=value")
    dotted, text = assignment.split("=", 1)
    keys = [k for k in dotted.strip().split(".") if k]
    if not keys:
        raise ConfigError(f"override {assignment!r} has an empty key path")
    try:
        value = yaml.safe_load(text)
    except yaml.YAMLError:
        value = text
    node = raw
    for key in keys[:-1]:
        child = node.get(key)
        if not isinstance(child, dict):
            child = {}
            node[key] = child
        node = child
    node[keys[-1]] = value


def load_config(path: str | Path, overrides: Sequence[str] = ()) -> RunConfig:
    """Load a YAML run configuration and apply ``--set`` overrides."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from exc
    raw = _as_mapping(raw, "config")
    raw = copy.deepcopy(raw)
    for assignment in overrides:
        _parse_override(raw, assignment)

    unknown = set(raw) - _TOP_LEVEL_KEYS
    if unknown:
        raise ConfigError(
            f"{path}: unknown config key(s) {sorted(unknown)}; accepted keys are {sorted(_TOP_LEVEL_KEYS)}"
        )

    pattern = _parse_pattern(_require(raw, "pattern", "config"))
    panel = _parse_panel(_require(raw, "panel", "config"))
    if set(panel.markers) != set(pattern.all_columns()):
        raise ConfigError("panel markers and pattern columns must contain the same names")

    model = _as_mapping(raw.get("model"), "model")
    n_components = int(model.get("k", panel.n_types))
    latent_dim = int(_require(model, "q", "model"))
    d = len(panel.markers)
    if not 1 <= latent_dim < d:
        raise ConfigError(f"model.q must satisfy 1 <= q < d={d}, got {latent_dim}")
    if n_components < 1:
        raise ConfigError(f"model.k must be >= 1, got {n_components}")

    seeds = raw.get("seeds")
    if isinstance(seeds, int):
        seeds = {"split": seeds, "init": seeds, "simulate": seeds}
    seeds = _as_mapping(seeds, "seeds")

    split = raw.get("split")
    split_sizes = None
    if split is not None:
        split = _as_mapping(split, "split")
        split_sizes = (
            int(_require(split, "n1", "split")),
            int(_require(split, "n2", "split")),
            int(_require(split, "n_eval", "split")),
        )

    sim = _as_mapping(raw.get("simulate"), "simulate")
    kind = str(sim.get("kind", "panel"))
    if kind not in ("panel", "toy"):
        raise ConfigError(f"simulate.kind must be 'panel' or 'toy', got {kind!r}")
    weights = sim.get("weights")
    simulate = SimulateConfig(
        kind=kind,
        n=int(sim.get("n", 25000)),
        weights=None if weights is None else tuple(float(w) for w in weights),
    )

    evaluate = _as_mapping(raw.get("evaluate"), "evaluate")
    impute_sec = _as_mapping(raw.get("impute"), "impute")
    histogram = _as_mapping(raw.get("histogram"), "histogram")
    inputs = _as_mapping(raw.get("inputs"), "inputs")

    method = str(raw.get("method", "cluster-nn"))
    if method not in METHODS:
        raise ConfigError(f"method must be one of {list(METHODS)}, got {method!r}")

    use_index = impute_sec.get("use_index")
    if use_index is not None:
        use_index = bool(use_index)

    return RunConfig(
        pattern=pattern,
        panel=panel,
        n_components=n_components,
        latent_dim=latent_dim,
        tol=float(model.get("tol", 1e-6)),
        max_iter=int(model.get("max_iter", 500)),
        method=method,
        seed_split=int(seeds.get("split", 0)),
        seed_init=int(seeds.get("init", 0)),
        seed_simulate=int(seeds.get("simulate", 0)),
        split_sizes=split_sizes,
        eval_repeats=int(evaluate.get("repeats", 10)),
        eval_max_points=int(evaluate.get("max_points", 5000)),
        file1=inputs.get("file1"),
        file2=inputs.get("file2"),
        truth=inputs.get("truth"),
        output=raw.get("output"),
        simulate=simulate,
        threads=thread_count(raw.get("threads")),
        standardize_common=bool(impute_sec.get("standardize_common", False)),
        use_index=use_index,
        histogram_bins=int(histogram.get("bins", 64)),
        histogram_smoothing=int(histogram.get("smoothing", 3)),
        missing_token=str(raw.get("missing_token", "")),
        raw=raw,
    )


def echo_config(cfg: RunConfig, out_dir: str | Path) -> Path:
    """Write the exact resolved configuration into an output directory."""
    out = Path(out_dir) / "config_used.yaml"
    out.write_text(yaml.safe_dump(cfg.raw, sort_keys=False))
    return out
