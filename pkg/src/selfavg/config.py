"""Experiment configuration: parsing, validation and serialization."""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .core import RateFunction
from .disciplines import DisciplineSpec
from .processes import OverloadWarning, ServiceLawSpec, utilization_diagnostic

CHECK_NAMES = ("exit_rate", "idle", "busy_density", "kernel", "kernel_direct", "convolution",
               "expectation_v", "counting", "causality", "violation", "memoryless_probe")
RATE_KINDS = ("constant", "sinusoidal", "step", "table")


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line else message)


@dataclass(frozen=True)
class GridSpec:
    rate_step: float = 0.05    # node spacing of the rate samples
    bin_width: float = 0.05    # exit-rate bins
    kernel_step: float = 0.05  # kernel x-grid (and start-epoch grid)
    x_max: float = 40.0


@dataclass(frozen=True)
class RateProfile:
    kind: str
    params: dict

    def build(self, lo: float, hi: float, step: float) -> RateFunction:
        p = self.params
        if self.kind == "constant":
            return RateFunction.constant(p["value"], lo, hi, step)
        if self.kind == "sinusoidal":
            return RateFunction.sinusoidal(p["base"], p["amplitude"], lo, hi, step,
                                           p.get("frequency", 1.0), p.get("phase", 0.0))
        if self.kind == "step":
            return RateFunction.step_profile(p["before"], p["after"], p["at"], lo, hi, step)
        rate = RateFunction(p["t0"], p["step"], np.asarray(p["values"], dtype=float))
        a, b = rate.window
        if lo < a - 1e-12 or hi > b + 1e-12:
            raise ValueError(f"rate table covers [{a}, {b}] but [{lo}, {hi}] is needed")
        return rate

    def to_dict(self) -> dict:
        return {"kind": self.kind, **self.params}


@dataclass(frozen=True)
class ExperimentConfig:
    master_seed: int
    replicas: int
    window: tuple[float, float]
    rate_profile: RateProfile
    service: ServiceLawSpec = field(default_factory=ServiceLawSpec)
    discipline: DisciplineSpec = field(default_factory=DisciplineSpec)
    grid: GridSpec = field(default_factory=GridSpec)
    burn_in: float | None = None      # None: 50 / (1 - utilization)
    margin: float = 10.0              # rate defined this far past the window end
    arrival_method: str = "thinning"
    arrival_envelope: str = "segment"
    idle_convention: str = "left"
    checks: dict = field(default_factory=dict)
    output_dir: str = "out"
    name: str = "experiment"
    rate_override: RateFunction | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        lo, hi = self.window
        if not hi > lo:
            raise ValueError("window must have t_hi > t_lo")
        if self.replicas < 1:
            raise ValueError("replica count must be >= 1")
        if self.burn_in is not None and self.burn_in < 0:
            raise ValueError("burn-in must be >= 0")
        if self.margin < 0:
            raise ValueError("margin must be >= 0")
        for name in ("rate_step", "bin_width", "kernel_step", "x_max"):
            if not getattr(self.grid, name) > 0:
                raise ValueError(f"grid step {name} must be > 0")
        for name in self.checks:
            if name not in CHECK_NAMES:
                raise ValueError(f"unknown check {name!r}")
        if self.idle_convention not in ("left", "right"):
            raise ValueError("idle_convention must be 'left' or 'right'")
        if self.arrival_method not in ("thinning", "inversion"):
            raise ValueError("arrival method must be thinning or inversion")
        if self.arrival_envelope not in ("segment", "global"):
            raise ValueError("arrival envelope must be segment or global")
        object.__setattr__(self, "_cache", {})

    # derived quantities -----------------------------------------------------------
    @property
    def utilization(self) -> float:
        lo, hi = self.window
        probe = self.rate_profile.build(lo, hi, self.grid.rate_step)
        return probe.window_average(lo, hi) * self.service.analytic_mean()

    @property
    def overloaded(self) -> bool:
        return self.utilization >= 1.0

    @property
    def effective_burn_in(self) -> float:
        if self.burn_in is not None:
            return float(self.burn_in)
        ell = self.utilization
        if ell >= 1:
            warnings.warn(f"utilization {ell:.3g} >= 1: default burn-in set to 0",
                          OverloadWarning, stacklevel=2)
            return 0.0
        return 50.0 / (1.0 - ell)

    @property
    def sim_window(self) -> tuple[float, float]:
        lo, hi = self.window
        # whole rate steps before t_lo, so t_lo (and any profile feature on
        # the t_lo + k * step lattice) is a grid node
        step = self.grid.rate_step
        n = math.ceil(self.effective_burn_in / step - 1e-9)
        return (lo - n * step, hi + self.margin)

    def rate(self) -> RateFunction:
        if self.rate_override is not None:
            return self.rate_override
        if "rate" not in self._cache:
            a, b = self.sim_window
            step = self.grid.rate_step
            # extend to a whole number of grid steps
            n = math.ceil((b - a) / step - 1e-9)
            self._cache["rate"] = self.rate_profile.build(a, a + n * step, step)
        return self._cache["rate"]

    def with_rate(self, rate: RateFunction) -> "ExperimentConfig":
        return replace(self, rate_override=rate)

    def load_report(self, warn: bool = False):
        lo, hi = self.window
        return utilization_diagnostic(self.rate(), self.service, lo, hi, warn=warn)

    def check_params(self, name: str) -> dict:
        return dict(self.checks.get(name) or {})

    # serialization --------------------------------------------------------------
    def to_dict(self) -> dict:
        g = self.grid
        return {
            "name": self.name,
            "master_seed": self.master_seed,
            "replicas": self.replicas,
            "window": list(self.window),
            "burn_in": self.burn_in,
            "margin": self.margin,
            "grid": {"rate_step": g.rate_step, "bin_width": g.bin_width,
                     "kernel_step": g.kernel_step, "x_max": g.x_max},
            "rate": self.rate_profile.to_dict(),
            "service": self.service.to_dict(),
            "discipline": self.discipline.to_dict(),
            "arrivals": {"method": self.arrival_method, "envelope": self.arrival_envelope},
            "idle_convention": self.idle_convention,
            "checks": {k: dict(v or {}) for k, v in self.checks.items()},
            "output_dir": self.output_dir,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


# --- parsing --------------------------------------------------------------------------

def _line_of(text: str | None, path: tuple) -> int | None:
    """Line of the last key in ``path``, found by scanning for each key in turn."""
    if not text:
        return None
    pos = 0
    found = None
    for key in path:
        if isinstance(key, int):
            continue
        i = text.find(f'"{key}"', pos)
        if i < 0:
            break
        pos = found = i
    return None if found is None else text.count("\n", 0, found) + 1


class _Reader:
    def __init__(self, text: str | None):
        self.text = text

    def fail(self, path: tuple, msg: str):
        where = ".".join(str(p) for p in path) or "<root>"
        raise ConfigError(f"{where}: {msg}", _line_of(self.text, path))

    def get(self, d: dict, path: tuple, kind, default=..., check=None):
        key = path[-1]
        if key not in d:
            if default is ...:
                self.fail(path, "missing required field")
            return default
        v = d[key]
        if v is None and default is None:
            return None
        if kind is float:
            ok = isinstance(v, (int, float)) and not isinstance(v, bool) and math.isfinite(v)
        elif kind is int:
            ok = isinstance(v, int) and not isinstance(v, bool)
        else:
            ok = isinstance(v, kind)
        if not ok:
            self.fail(path, f"expected {getattr(kind, '__name__', kind)}, got {v!r}")
        if check is not None and not check(v):
            self.fail(path, f"invalid value {v!r}")
        return float(v) if kind is float else v


_KNOWN = {"name", "master_seed", "replicas", "window", "burn_in", "margin", "grid", "rate",
          "service", "discipline", "arrivals", "idle_convention", "checks", "output_dir"}


def parse_config(data: dict, text: str | None = None) -> ExperimentConfig:
    r = _Reader(text)
    if not isinstance(data, dict):
        r.fail((), "top level must be an object")
    for k in data:
        if k not in _KNOWN:
            r.fail((k,), "unknown field")
    seed = r.get(data, ("master_seed",), int, check=lambda v: 0 <= v < 2**64)
    n = r.get(data, ("replicas",), int, check=lambda v: v >= 1)
    win = r.get(data, ("window",), list, check=lambda v: len(v) == 2)
    for i, v in enumerate(win):
        if not isinstance(v, (int, float)) or isinstance(v, bool):
            r.fail(("window",), "window entries must be numbers")
    if not win[1] > win[0]:
        r.fail(("window",), "need t_hi > t_lo")
    burn = r.get(data, ("burn_in",), float, None, check=lambda v: v >= 0)
    margin = r.get(data, ("margin",), float, 10.0, check=lambda v: v >= 0)

    g = r.get(data, ("grid",), dict, {})
    grid = GridSpec(*(r.get(g, ("grid", k), float, getattr(GridSpec, k), check=lambda v: v > 0)
                      for k in ("rate_step", "bin_width", "kernel_step", "x_max")))

    rp = r.get(data, ("rate",), dict)
    kind = r.get(rp, ("rate", "kind"), str, check=lambda v: v in RATE_KINDS)
    pos = lambda v: v > 0  # noqa: E731
    if kind == "constant":
        params = {"value": r.get(rp, ("rate", "value"), float, check=pos)}
    elif kind == "sinusoidal":
        params = {k: r.get(rp, ("rate", k), float) for k in ("base", "amplitude")}
        params["frequency"] = r.get(rp, ("rate", "frequency"), float, 1.0)
        params["phase"] = r.get(rp, ("rate", "phase"), float, 0.0)
        if not params["base"] > abs(params["amplitude"]):
            r.fail(("rate", "amplitude"), "rate must stay positive: need base > |amplitude|")
    elif kind == "step":
        params = {"before": r.get(rp, ("rate", "before"), float, check=pos),
                  "after": r.get(rp, ("rate", "after"), float, check=pos),
                  "at": r.get(rp, ("rate", "at"), float)}
    else:
        params = {"t0": r.get(rp, ("rate", "t0"), float),
                  "step": r.get(rp, ("rate", "step"), float, check=pos),
                  "values": r.get(rp, ("rate", "values"), list, check=lambda v: len(v) >= 2)}
        if not all(isinstance(v, (int, float)) and v > 0 for v in params["values"]):
            r.fail(("rate", "values"), "table samples must be positive numbers")
    for k in rp:
        if k != "kind" and k not in params:
            r.fail(("rate", k), f"unknown field for {kind} profile")
    profile = RateProfile(kind, params)

    sp = r.get(data, ("service",), dict, {"kind": "iid_exponential"})
    try:
        service = ServiceLawSpec(r.get(sp, ("service", "kind"), str),
                                 dict(r.get(sp, ("service", "params"), dict, {})),
                                 r.get(sp, ("service", "mean"), float, 1.0))
    except (ValueError, KeyError, TypeError) as exc:
        r.fail(("service",), str(exc))

    dp = r.get(data, ("discipline",), dict, {"kind": "fifo"})
    try:
        dkw = {k: v for k, v in dp.items()}
        discipline = DisciplineSpec(**dkw)
    except (ValueError, TypeError) as exc:
        r.fail(("discipline",), str(exc))

    ap = r.get(data, ("arrivals",), dict, {})
    method = r.get(ap, ("arrivals", "method"), str, "thinning",
                   check=lambda v: v in ("thinning", "inversion"))
    envelope = r.get(ap, ("arrivals", "envelope"), str, "segment",
                     check=lambda v: v in ("segment", "global"))
    conv = r.get(data, ("idle_convention",), str, "left", check=lambda v: v in ("left", "right"))

    checks = r.get(data, ("checks",), dict, {})
    for name, params in checks.items():
        if name not in CHECK_NAMES:
            r.fail(("checks", name), f"unknown check; choose from {', '.join(CHECK_NAMES)}")
        if params is not None and not isinstance(params, dict):
            r.fail(("checks", name), "check parameters must be an object")

    cfg = ExperimentConfig(
        master_seed=seed, replicas=n, window=(float(win[0]), float(win[1])),
        rate_profile=profile, service=service, discipline=discipline, grid=grid,
        burn_in=burn, margin=margin, arrival_method=method, arrival_envelope=envelope,
        idle_convention=conv, checks={k: dict(v or {}) for k, v in checks.items()},
        output_dir=r.get(data, ("output_dir",), str, "out"),
        name=r.get(data, ("name",), str, "experiment"))
    try:
        cfg.rate()
    except ValueError as exc:
        r.fail(("rate",), str(exc))
    return cfg


def loads(text: str) -> ExperimentConfig:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed JSON: {exc.msg}", exc.lineno) from None
    return parse_config(data, text)


def load(path) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        return loads(fh.read())
