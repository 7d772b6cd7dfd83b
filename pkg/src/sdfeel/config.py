"""Experiment configuration: a flat, line-oriented key=value format.

Keys carry a section prefix (``latency.rate_client_server_bps=5000000``);
``#`` starts a comment. Every key is validated against the schema below, all
defaults are resolved at parse time, and the resolved configuration can be
echoed back as canonical lines for provenance. An invalid file never yields a
partially-usable config.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

from .errors import ConfigurationError

MODES = ("async", "sync", "both")
TOPOLOGY_KINDS = ("ring", "explicit")
PARTITIONS = ("default", "dirichlet", "balanced")
INTRA_BASES = ("current", "broadcast")


@dataclass(frozen=True)
class ExperimentConfig:
    """Fully resolved and validated experiment settings."""

    # run
    mode: str
    seed: int
    output_dir: str | None
    # topology
    topology_kind: str
    num_clusters: int
    adjacency_text: str | None
    # clients
    clients_per_cluster: int
    heterogeneity: float
    speeds: tuple[float, ...] | None
    beta: float
    # clusters
    deadlines: tuple[float, ...]
    # latency
    rate_client_server_bps: float
    rate_server_server_bps: float
    flops_per_epoch: float
    jitter: float
    # task
    task_kind: str
    feature_dim: int
    num_classes: int
    regularization: float
    # train
    eta: float
    batch_size: int
    intra_base: str
    # dataset
    num_samples: int
    alpha: float
    noise: float
    partition: str
    test_fraction: float
    # psi
    psi_kind: str
    psi_constant: float
    # stop
    max_sim_time_s: float | None
    max_global_iters: int | None
    target_loss: float | None
    # consensus
    consensus_max_rounds: int
    consensus_tol: float

    @property
    def num_clients(self) -> int:
        return self.num_clusters * self.clients_per_cluster

    @property
    def model_dim(self) -> int:
        if self.task_kind == "quadratic":
            return self.feature_dim
        return self.num_classes * (self.feature_dim + 1)

    @property
    def model_bits(self) -> float:
        return 32.0 * self.model_dim

    def client_speeds(self) -> tuple[float, ...]:
        """Explicit speeds, or geometric interpolation from 1 to H across clients."""
        if self.speeds is not None:
            return self.speeds
        count = self.num_clients
        if count == 1 or self.heterogeneity == 1.0:
            return tuple(1.0 for _ in range(count))
        return tuple(self.heterogeneity ** (i / (count - 1)) for i in range(count))

    def deadline_list(self) -> tuple[float, ...]:
        if len(self.deadlines) == 1:
            return tuple(self.deadlines[0] for _ in range(self.num_clusters))
        return self.deadlines

    def partition_rule(self) -> str:
        if self.partition != "default":
            return self.partition
        return "dirichlet" if self.task_kind == "logistic" else "balanced"


def _parse_float(key: str, raw: str) -> float:
    try:
        return float(raw)
    except ValueError as exc:
        raise ConfigurationError(f"{key}: expected a number, got {raw!r}") from exc


def _parse_int(key: str, raw: str) -> int:
    try:
        return int(raw)
    except ValueError as exc:
        raise ConfigurationError(f"{key}: expected an integer, got {raw!r}") from exc


def _parse_float_list(key: str, raw: str) -> tuple[float, ...]:
    return tuple(_parse_float(key, tok) for tok in raw.split(",") if tok.strip())


# key -> (parser, default); REQUIRED means the key must appear in the file
_REQUIRED = object()
_SCHEMA: dict[str, tuple] = {
    "run.mode": (str, "async"),
    "run.seed": (_parse_int, 0),
    "run.output_dir": (str, None),
    "topology.kind": (str, "ring"),
    "topology.num_clusters": (_parse_int, _REQUIRED),
    "topology.adjacency_file": (str, None),
    "clients.per_cluster": (_parse_int, _REQUIRED),
    "clients.heterogeneity": (_parse_float, 1.0),
    "clients.speeds": (_parse_float_list, None),
    "clients.beta": (_parse_float, 1.0),
    "clusters.deadline_s": (_parse_float_list, _REQUIRED),
    "latency.rate_client_server_bps": (_parse_float, 5e6),
    "latency.rate_server_server_bps": (_parse_float, 1e7),
    "latency.flops_per_epoch": (_parse_float, 1e9),
    "latency.jitter": (_parse_float, 0.0),
    "task.kind": (str, _REQUIRED),
    "task.feature_dim": (_parse_int, _REQUIRED),
    "task.num_classes": (_parse_int, 2),
    "task.regularization": (_parse_float, 0.0),
    "train.eta": (_parse_float, _REQUIRED),
    "train.batch_size": (_parse_int, _REQUIRED),
    "train.intra_base": (str, "current"),
    "dataset.num_samples": (_parse_int, _REQUIRED),
    "dataset.alpha": (_parse_float, 0.5),
    "dataset.noise": (_parse_float, 0.0),
    "dataset.partition": (str, "default"),
    "dataset.test_fraction": (_parse_float, 0.0),
    "psi.kind": (str, "reciprocal"),
    "psi.constant": (_parse_float, 0.5),
    "stop.max_sim_time_s": (_parse_float, None),
    "stop.max_global_iters": (_parse_int, None),
    "stop.target_loss": (_parse_float, None),
    "consensus.max_rounds": (_parse_int, 200),
    "consensus.tol": (_parse_float, 1e-9),
}


def _check(condition: bool, message: str) -> None:
    if not condition:
        raise ConfigurationError(message)


def config_from_mapping(values: dict[str, str], base_dir: Path | None = None) -> ExperimentConfig:
    """Validate raw key/value strings and resolve them into an ExperimentConfig."""
    unknown = sorted(set(values) - set(_SCHEMA))
    if unknown:
        raise ConfigurationError(f"unknown config key(s): {', '.join(unknown)}")
    parsed: dict[str, object] = {}
    for key, (parser, default) in _SCHEMA.items():
        if key in values:
            parsed[key] = parser(key, values[key]) if parser is not str else values[key].strip()
        elif default is _REQUIRED:
            raise ConfigurationError(f"missing required config key: {key}")
        else:
            parsed[key] = default

    _check(parsed["run.mode"] in MODES, f"run.mode must be one of {MODES}")
    _check(parsed["topology.kind"] in TOPOLOGY_KINDS,
           f"topology.kind must be one of {TOPOLOGY_KINDS}")
    _check(parsed["topology.num_clusters"] >= 1, "topology.num_clusters must be >= 1")
    _check(parsed["clients.per_cluster"] >= 1, "clients.per_cluster must be >= 1")
    _check(parsed["clients.heterogeneity"] >= 1.0, "clients.heterogeneity must be >= 1")
    _check(parsed["clients.beta"] > 0, "clients.beta must be > 0")
    _check(parsed["task.kind"] in ("quadratic", "logistic"),
           "task.kind must be quadratic or logistic")
    _check(parsed["task.feature_dim"] >= 1, "task.feature_dim must be >= 1")
    _check(parsed["task.num_classes"] >= 2, "task.num_classes must be >= 2")
    _check(parsed["task.regularization"] >= 0, "task.regularization must be >= 0")
    _check(parsed["train.eta"] > 0, "train.eta must be > 0")
    _check(parsed["train.batch_size"] >= 0,
           "train.batch_size must be >= 0 (0 selects the full shard)")
    _check(parsed["train.intra_base"] in INTRA_BASES,
           f"train.intra_base must be one of {INTRA_BASES}")
    _check(parsed["dataset.num_samples"] >= 1, "dataset.num_samples must be >= 1")
    _check(parsed["dataset.alpha"] > 0, "dataset.alpha must be > 0")
    _check(parsed["dataset.noise"] >= 0, "dataset.noise must be >= 0")
    _check(parsed["dataset.partition"] in PARTITIONS,
           f"dataset.partition must be one of {PARTITIONS}")
    _check(0.0 <= parsed["dataset.test_fraction"] < 1.0,
           "dataset.test_fraction must lie in [0, 1)")
    _check(parsed["psi.kind"] in ("reciprocal", "constant"),
           "psi.kind must be reciprocal or constant")
    _check(parsed["psi.constant"] > 0, "psi.constant must be > 0")
    _check(0.0 <= parsed["latency.jitter"] < 1.0, "latency.jitter must lie in [0, 1)")
    for key in ("latency.rate_client_server_bps", "latency.rate_server_server_bps",
                "latency.flops_per_epoch"):
        _check(parsed[key] > 0, f"{key} must be > 0")
    _check(parsed["consensus.max_rounds"] >= 1, "consensus.max_rounds must be >= 1")
    _check(parsed["consensus.tol"] > 0, "consensus.tol must be > 0")
    if parsed["stop.max_sim_time_s"] is not None:
        _check(parsed["stop.max_sim_time_s"] > 0, "stop.max_sim_time_s must be > 0")
    if parsed["stop.max_global_iters"] is not None:
        _check(parsed["stop.max_global_iters"] >= 0, "stop.max_global_iters must be >= 0")
    _check(any(parsed[k] is not None for k in
               ("stop.max_sim_time_s", "stop.max_global_iters", "stop.target_loss")),
           "at least one stop.* criterion is required")

    num_clusters = parsed["topology.num_clusters"]
    deadlines = parsed["clusters.deadline_s"]
    _check(len(deadlines) in (1, num_clusters),
           "clusters.deadline_s must give one value or one per cluster")
    _check(all(d > 0 for d in deadlines), "clusters.deadline_s entries must be > 0")

    adjacency_text = None
    if parsed["topology.kind"] == "explicit":
        _check(parsed["topology.adjacency_file"] is not None,
               "topology.adjacency_file is required when topology.kind=explicit")
        adj_path = Path(parsed["topology.adjacency_file"])
        if base_dir is not None and not adj_path.is_absolute():
            adj_path = base_dir / adj_path
        try:
            adjacency_text = adj_path.read_text()
        except OSError as exc:
            raise ConfigurationError(f"topology.adjacency_file: cannot read {adj_path}: {exc}")
        from .topology import parse_adjacency  # validate now, fail at parse time
        topo = parse_adjacency(adjacency_text)
        _check(topo.num_clusters == num_clusters,
               f"adjacency lists {topo.num_clusters} servers, config says {num_clusters}")
    else:
        _check(parsed["topology.adjacency_file"] is None,
               "topology.adjacency_file only applies when topology.kind=explicit")

    speeds = parsed["clients.speeds"]
    num_clients = num_clusters * parsed["clients.per_cluster"]
    if speeds is not None:
        _check(len(speeds) == num_clients,
               f"clients.speeds must list {num_clients} values")
        _check(all(s > 0 for s in speeds), "clients.speeds entries must be > 0")
    if parsed["task.kind"] == "logistic":
        _check(parsed["task.feature_dim"] >= parsed["task.num_classes"],
               "logistic task needs task.feature_dim >= task.num_classes")

    return ExperimentConfig(
        mode=parsed["run.mode"], seed=parsed["run.seed"], output_dir=parsed["run.output_dir"],
        topology_kind=parsed["topology.kind"], num_clusters=num_clusters,
        adjacency_text=adjacency_text,
        clients_per_cluster=parsed["clients.per_cluster"],
        heterogeneity=parsed["clients.heterogeneity"], speeds=speeds,
        beta=parsed["clients.beta"], deadlines=deadlines,
        rate_client_server_bps=parsed["latency.rate_client_server_bps"],
        rate_server_server_bps=parsed["latency.rate_server_server_bps"],
        flops_per_epoch=parsed["latency.flops_per_epoch"], jitter=parsed["latency.jitter"],
        task_kind=parsed["task.kind"], feature_dim=parsed["task.feature_dim"],
        num_classes=parsed["task.num_classes"], regularization=parsed["task.regularization"],
        eta=parsed["train.eta"], batch_size=parsed["train.batch_size"],
        intra_base=parsed["train.intra_base"],
        num_samples=parsed["dataset.num_samples"], alpha=parsed["dataset.alpha"],
        noise=parsed["dataset.noise"], partition=parsed["dataset.partition"],
        test_fraction=parsed["dataset.test_fraction"],
        psi_kind=parsed["psi.kind"], psi_constant=parsed["psi.constant"],
        max_sim_time_s=parsed["stop.max_sim_time_s"],
        max_global_iters=parsed["stop.max_global_iters"],
        target_loss=parsed["stop.target_loss"],
        consensus_max_rounds=parsed["consensus.max_rounds"],
        consensus_tol=parsed["consensus.tol"],
    )


def parse_config(path: str | Path) -> ExperimentConfig:
    """Parse and fully validate a key=value config file."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigurationError(f"cannot read config file {path}: {exc}") from exc
    values: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if key in values:
            raise ConfigurationError(f"{path}:{lineno}: duplicate key {key}")
        values[key] = value.strip()
    return config_from_mapping(values, base_dir=path.parent)


def override(config: ExperimentConfig, mode: str | None = None,
             seed: int | None = None, output_dir: str | None = None) -> ExperimentConfig:
    """Apply command-line overrides on top of a parsed config."""
    changes = {}
    if mode is not None:
        if mode not in MODES:
            raise ConfigurationError(f"mode must be one of {MODES}")
        changes["mode"] = mode
    if seed is not None:
        changes["seed"] = seed
    if output_dir is not None:
        changes["output_dir"] = output_dir
    return replace(config, **changes) if changes else config


def echo_lines(config: ExperimentConfig) -> list[str]:
    """Canonical resolved key=value lines, for provenance echoes."""

    def fmt(value) -> str:
        if isinstance(value, float):
            return repr(value)
        return str(value)

    lines = [
        f"run.mode={config.mode}",
        f"run.seed={config.seed}",
        f"topology.kind={config.topology_kind}",
        f"topology.num_clusters={config.num_clusters}",
        f"clients.per_cluster={config.clients_per_cluster}",
        f"clients.heterogeneity={fmt(config.heterogeneity)}",
        f"clients.beta={fmt(config.beta)}",
        "clusters.deadline_s=" + ",".join(fmt(d) for d in config.deadlines),
        f"latency.rate_client_server_bps={fmt(config.rate_client_server_bps)}",
        f"latency.rate_server_server_bps={fmt(config.rate_server_server_bps)}",
        f"latency.flops_per_epoch={fmt(config.flops_per_epoch)}",
        f"latency.jitter={fmt(config.jitter)}",
        f"task.kind={config.task_kind}",
        f"task.feature_dim={config.feature_dim}",
        f"task.num_classes={config.num_classes}",
        f"task.regularization={fmt(config.regularization)}",
        f"train.eta={fmt(config.eta)}",
        f"train.batch_size={config.batch_size}",
        f"train.intra_base={config.intra_base}",
        f"dataset.num_samples={config.num_samples}",
        f"dataset.alpha={fmt(config.alpha)}",
        f"dataset.noise={fmt(config.noise)}",
        f"dataset.partition={config.partition_rule()}",
        f"dataset.test_fraction={fmt(config.test_fraction)}",
        f"psi.kind={config.psi_kind}",
        f"psi.constant={fmt(config.psi_constant)}",
        f"consensus.max_rounds={config.consensus_max_rounds}",
        f"consensus.tol={fmt(config.consensus_tol)}",
    ]
    if config.speeds is not None:
        lines.append("clients.speeds=" + ",".join(fmt(s) for s in config.speeds))
    if config.max_sim_time_s is not None:
        lines.append(f"stop.max_sim_time_s={fmt(config.max_sim_time_s)}")
    if config.max_global_iters is not None:
        lines.append(f"stop.max_global_iters={config.max_global_iters}")
    if config.target_loss is not None:
        lines.append(f"stop.target_loss={fmt(config.target_loss)}")
    return sorted(lines)
