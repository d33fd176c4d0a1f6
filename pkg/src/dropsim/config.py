"""Cluster configuration: a flat INI-style text file.

Scientific notation is accepted for byte counts (hbm_bytes = 24e9), and
every field has a desk-scale default so minimal configs stay short.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field

from .core import ModelSpec
from .costmodel import CostCoefficients

POLICIES = ("kunserve", "recompute", "swap", "migrate")
FORMULATIONS = ("auto", "lookahead", "token_count")
LENGTH_DISTS = ("fixed", "uniform", "lognormal")

# dataset presets: (input_mean, output_mean) token counts
TRACE_PRESETS = {
    "burstgpt": (642, 262),
    "sharegpt": (1660, 373),
    "longbench": (5900, 499),
}


class ConfigError(ValueError):
    def __init__(self, fieldname: str, message: str):
        super().__init__(f"{fieldname}: {message}")
        self.fieldname = fieldname


@dataclass
class ClusterConfig:
    instances: int = 4
    hbm_bytes: int = 24_000_000_000
    nic_bandwidth: int = 25_000_000_000
    host_bandwidth: int = 32_000_000_000
    link_base_latency_us: int = 50
    map_latency_us: int = 5000
    initial_group_size: int = 1


@dataclass
class PolicyConfig:
    kind: str = "kunserve"
    formulation: str = "auto"
    token_budget: int = 2048
    min_batch_tokens: int = 256
    restore_threshold: float = 0.5
    monitor_tick_us: int = 100_000
    slo_scales: tuple[float, ...] = (1.25, 2.0, 4.0, 6.0, 8.0, 10.0)
    autoscale_occupancy: float = 0.9
    autoscale_window_s: float = 10.0
    swap_headroom_tokens: int = 0


@dataclass
class TraceConfig:
    source: str = "synth"  # synth | file
    path: str = ""
    seed: int = 7
    duration_s: float = 60.0
    base_rps: float = 4.0
    burst_rps: float = 12.0
    burst_start_s: float = 20.0
    burst_end_s: float = 40.0
    length_dist: str = "lognormal"
    input_mean: int = 600
    output_mean: int = 60
    sigma: float = 0.6
    preset: str = ""  # optional dataset preset overriding the means
    rescale_factor: float = 1.0


@dataclass
class ReportConfig:
    window_s: float = 1.0
    figures: bool = True
    drain_s: float = 120.0


@dataclass
class SimConfig:
    model: ModelSpec = field(default_factory=lambda: ModelSpec(
        num_layers=8, bytes_per_layer=2_000_000_000, kv_bytes_per_token=200_000))
    cost: CostCoefficients = field(default_factory=lambda: CostCoefficients(
        alpha=6.6e-9, beta=2.8e-6, gamma=9.6e-3))
    cluster: ClusterConfig = field(default_factory=ClusterConfig)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    trace: TraceConfig = field(default_factory=TraceConfig)
    report: ReportConfig = field(default_factory=ReportConfig)


def _as_int(raw: str, fieldname: str) -> int:
    try:
        return int(float(raw))
    except ValueError as exc:
        raise ConfigError(fieldname, f"not a number: {raw!r}") from exc


def _as_float(raw: str, fieldname: str) -> float:
    try:
        return float(raw)
    except ValueError as exc:
        raise ConfigError(fieldname, f"not a number: {raw!r}") from exc


def _as_bool(raw: str, fieldname: str) -> bool:
    low = raw.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(fieldname, f"not a boolean: {raw!r}")


def validate(cfg: SimConfig) -> None:
    if cfg.policy.kind not in POLICIES:
        raise ConfigError("policy.kind",
                          f"unknown policy {cfg.policy.kind!r}, "
                          f"expected one of {', '.join(POLICIES)}")
    if cfg.policy.formulation not in FORMULATIONS:
        raise ConfigError("policy.formulation",
                          f"unknown formulation {cfg.policy.formulation!r}")
    if cfg.trace.source not in ("synth", "file"):
        raise ConfigError("trace.source", f"unknown source {cfg.trace.source!r}")
    if cfg.trace.source == "file" and not cfg.trace.path:
        raise ConfigError("trace.path", "required when trace.source = file")
    if cfg.trace.length_dist not in LENGTH_DISTS:
        raise ConfigError("trace.length_dist",
                          f"unknown distribution {cfg.trace.length_dist!r}")
    if cfg.trace.preset and cfg.trace.preset not in TRACE_PRESETS:
        raise ConfigError("trace.preset",
                          f"unknown preset {cfg.trace.preset!r}, "
                          f"expected one of {', '.join(sorted(TRACE_PRESETS))}")
    if not 0.0 < cfg.policy.restore_threshold <= 1.0:
        raise ConfigError("policy.restore_threshold", "must be in (0, 1]")
    if cfg.cluster.instances < 1:
        raise ConfigError("cluster.instances", "must be >= 1")
    if cfg.cluster.initial_group_size < 1 or (
            cfg.cluster.instances % cfg.cluster.initial_group_size):
        raise ConfigError("cluster.initial_group_size",
                          "must divide cluster.instances")
    if cfg.model.param_bytes >= cfg.cluster.hbm_bytes:
        raise ConfigError("cluster.hbm_bytes",
                          "must exceed one parameter copy")


def load_config(path: str) -> SimConfig:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    read = parser.read(path)
    if not read:
        raise ConfigError("config", f"cannot read {path}")
    cfg = SimConfig()

    def take(section: str, key: str, conv, current):
        if parser.has_option(section, key):
            return conv(parser.get(section, key), f"{section}.{key}")
        return current

    m = cfg.model
    cfg.model = ModelSpec(
        num_layers=take("model", "num_layers", _as_int, m.num_layers),
        bytes_per_layer=take("model", "bytes_per_layer", _as_int, m.bytes_per_layer),
        kv_bytes_per_token=take("model", "kv_bytes_per_token", _as_int,
                                m.kv_bytes_per_token),
        hidden_bytes_per_token=take("model", "hidden_bytes_per_token", _as_int,
                                    m.hidden_bytes_per_token))
    c = cfg.cost
    discount = c.batch_discount
    if parser.has_option("model", "batch_discount"):
        discount = _as_float(parser.get("model", "batch_discount"),
                             "model.batch_discount")
    cfg.cost = CostCoefficients(
        alpha=take("model", "alpha", _as_float, c.alpha),
        beta=take("model", "beta", _as_float, c.beta),
        gamma=take("model", "gamma", _as_float, c.gamma),
        batch_discount=discount)

    cl = cfg.cluster
    cl.instances = take("cluster", "instances", _as_int, cl.instances)
    cl.hbm_bytes = take("cluster", "hbm_bytes", _as_int, cl.hbm_bytes)
    cl.nic_bandwidth = take("cluster", "nic_bandwidth", _as_int, cl.nic_bandwidth)
    cl.host_bandwidth = take("cluster", "host_bandwidth", _as_int, cl.host_bandwidth)
    cl.link_base_latency_us = take("cluster", "link_base_latency_us", _as_int,
                                   cl.link_base_latency_us)
    cl.map_latency_us = take("cluster", "map_latency_us", _as_int, cl.map_latency_us)
    cl.initial_group_size = take("cluster", "initial_group_size", _as_int,
                                 cl.initial_group_size)

    p = cfg.policy
    p.kind = take("policy", "kind", lambda r, f: r.strip(), p.kind)
    p.formulation = take("policy", "formulation", lambda r, f: r.strip(),
                         p.formulation)
    p.token_budget = take("policy", "token_budget", _as_int, p.token_budget)
    p.min_batch_tokens = take("policy", "min_batch_tokens", _as_int,
                              p.min_batch_tokens)
    p.restore_threshold = take("policy", "restore_threshold", _as_float,
                               p.restore_threshold)
    p.monitor_tick_us = take("policy", "monitor_tick_us", _as_int,
                             p.monitor_tick_us)
    if parser.has_option("policy", "slo_scales"):
        raw = parser.get("policy", "slo_scales")
        p.slo_scales = tuple(
            _as_float(x.strip(), "policy.slo_scales")
            for x in raw.split(",") if x.strip())
    p.autoscale_occupancy = take("policy", "autoscale_occupancy", _as_float,
                                 p.autoscale_occupancy)
    p.autoscale_window_s = take("policy", "autoscale_window_s", _as_float,
                                p.autoscale_window_s)

    t = cfg.trace
    t.source = take("trace", "source", lambda r, f: r.strip(), t.source)
    t.path = take("trace", "path", lambda r, f: r.strip(), t.path)
    t.seed = take("trace", "seed", _as_int, t.seed)
    t.duration_s = take("trace", "duration_s", _as_float, t.duration_s)
    t.base_rps = take("trace", "base_rps", _as_float, t.base_rps)
    t.burst_rps = take("trace", "burst_rps", _as_float, t.burst_rps)
    t.burst_start_s = take("trace", "burst_start_s", _as_float, t.burst_start_s)
    t.burst_end_s = take("trace", "burst_end_s", _as_float, t.burst_end_s)
    t.length_dist = take("trace", "length_dist", lambda r, f: r.strip(),
                         t.length_dist)
    t.input_mean = take("trace", "input_mean", _as_int, t.input_mean)
    t.output_mean = take("trace", "output_mean", _as_int, t.output_mean)
    t.sigma = take("trace", "sigma", _as_float, t.sigma)
    t.preset = take("trace", "preset", lambda r, f: r.strip(), t.preset)
    t.rescale_factor = take("trace", "rescale_factor", _as_float, t.rescale_factor)
    if t.preset:
        if t.preset not in TRACE_PRESETS:
            raise ConfigError("trace.preset", f"unknown preset {t.preset!r}")
        t.input_mean, t.output_mean = TRACE_PRESETS[t.preset]

    r = cfg.report
    r.window_s = take("report", "window_s", _as_float, r.window_s)
    r.figures = take("report", "figures", _as_bool, r.figures)
    r.drain_s = take("report", "drain_s", _as_float, r.drain_s)

    validate(cfg)
    return cfg
