"""Run configuration: line-oriented ``key = value`` text with ``#`` comments."""
from __future__ import annotations

from dataclasses import dataclass, fields, replace

import numpy as np


class ConfigError(ValueError):
    """Invalid configuration; ``key`` names the offending entry."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


REQUIRED = ("outer_radius", "body_radius", "dt", "t_final")


@dataclass(frozen=True)
class RunConfig:
    outer_radius: float
    body_radius: float
    dt: float
    t_final: float
    body_center: tuple = (0.0, 0.0)
    rho_s: float = 2.0
    alpha: float = 1.0
    l0: tuple = (0.0, 0.0)
    r0: float = 0.0
    fluid_ic: str = "zero"
    nr: int = 8
    ntheta: int = 32
    picard_tol: float = 1e-10
    picard_max: int = 50
    ode_substeps: int = 4
    delta_safe: float | None = None
    csv: str = "run.csv"
    dump_stride: int = 0

    def __post_init__(self):
        self.validate()

    # derived ------------------------------------------------------------------
    @property
    def gap(self) -> float:
        return self.outer_radius - (float(np.hypot(*self.body_center)) + self.body_radius)

    @property
    def delta_safe_value(self) -> float:
        return self.delta_safe if self.delta_safe is not None else 0.5 * self.gap

    @property
    def fluid_ic_kind(self) -> str:
        return "stream" if self.fluid_ic.startswith("stream:") else self.fluid_ic

    def stream_callable(self):
        """Velocity ``perp-grad psi`` of a stream-function initial condition, or ``None``."""
        if not self.fluid_ic.startswith("stream:"):
            return None
        return stream_velocity(self.fluid_ic[len("stream:"):])

    def validate(self):
        for k in ("outer_radius", "body_radius"):
            if not getattr(self, k) > 0:
                raise ConfigError(k, "must be positive")
        if self.body_radius >= self.outer_radius:
            raise ConfigError("body_radius", "must be smaller than outer_radius")
        if not self.dt > 0:
            raise ConfigError("dt", "must be positive")
        if not self.t_final >= 0:
            raise ConfigError("t_final", "must be nonnegative")
        if not self.rho_s > 0:
            raise ConfigError("rho_s", "must be positive")
        if not self.alpha >= 0:
            raise ConfigError("alpha", "must be nonnegative")
        if self.nr < 4:
            raise ConfigError("nr", "resolution must be at least 4")
        if self.ntheta < 4:
            raise ConfigError("ntheta", "resolution must be at least 4")
        if not self.picard_tol > 0:
            raise ConfigError("picard_tol", "must be positive")
        if self.picard_max < 1:
            raise ConfigError("picard_max", "must be at least 1")
        if self.ode_substeps < 1:
            raise ConfigError("ode_substeps", "must be at least 1")
        if self.dump_stride < 0:
            raise ConfigError("dump_stride", "must be nonnegative")
        if self.delta_safe is not None and not self.delta_safe > 0:
            raise ConfigError("delta_safe", "must be positive")
        if self.gap <= 0:
            raise ConfigError("body_center", "body does not fit inside the container")
        if self.gap < 2.0 * self.delta_safe_value * (1 - 1e-12):
            raise ConfigError("delta_safe", f"body-wall distance {self.gap:.6g} is below 2*delta_safe")
        if self.fluid_ic_kind not in ("zero", "rigid-extension", "stream"):
            raise ConfigError("fluid_ic", f"unknown selector {self.fluid_ic!r}")
        if self.fluid_ic_kind == "stream":
            try:
                self.stream_callable()
            except Exception as exc:
                raise ConfigError("fluid_ic", f"cannot parse stream function: {exc}") from exc

    # text form ----------------------------------------------------------------
    def serialize(self) -> str:
        out = []
        for f in fields(self):
            v = getattr(self, f.name)
            if v is None:
                continue
            if isinstance(v, tuple):
                s = ", ".join(_fmt(x) for x in v)
            elif isinstance(v, float):
                s = _fmt(v)
            else:
                s = str(v)
            out.append(f"{f.name} = {s}")
        return "\n".join(out) + "\n"

    def with_(self, **kw) -> "RunConfig":
        return replace(self, **kw)


def _fmt(x: float) -> str:
    return repr(float(x))


_KINDS = {f.name: f for f in fields(RunConfig)}
_VECTORS = {"body_center", "l0"}
_INTS = {"nr", "ntheta", "picard_max", "ode_substeps", "dump_stride"}
_STRS = {"fluid_ic", "csv"}


def _convert(key: str, raw: str):
    try:
        if key in _VECTORS:
            parts = [p for p in raw.replace("(", " ").replace(")", " ").replace(",", " ").split()]
            if len(parts) != 2:
                raise ValueError("expected two numbers")
            return tuple(float(p) for p in parts)
        if key in _INTS:
            return int(raw)
        if key in _STRS:
            return raw
        return float(raw)
    except ValueError as exc:
        raise ConfigError(key, f"bad value {raw!r} ({exc})") from exc


def parse_config(text: str) -> RunConfig:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        s = line.split("#", 1)[0].strip()
        if not s:
            continue
        if "=" not in s:
            raise ConfigError(f"line {lineno}", f"expected 'key = value', got {s!r}")
        k, v = (t.strip() for t in s.split("=", 1))
        if k not in _KINDS:
            raise ConfigError(k, "unknown key")
        values[k] = _convert(k, v)
    for k in REQUIRED:
        if k not in values:
            raise ConfigError(k, "missing required key")
    return RunConfig(**values)


def load_config(path) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


def stream_velocity(expr: str):
    """Velocity ``(-d psi/dy, d psi/dx)`` of a stream function given as an expression in ``x`` and ``y``."""
    import sympy

    x, y = sympy.symbols("x y")
    psi = sympy.sympify(expr, locals={"x": x, "y": y})
    extra = psi.free_symbols - {x, y}
    if extra:
        raise ValueError(f"unknown symbols {sorted(map(str, extra))}")
    u = sympy.lambdify((x, y), -sympy.diff(psi, y), "numpy")
    v = sympy.lambdify((x, y), sympy.diff(psi, x), "numpy")

    def vel(p):
        p = np.asarray(p, dtype=float)
        a = np.broadcast_to(u(p[..., 0], p[..., 1]), p.shape[:-1])
        b = np.broadcast_to(v(p[..., 0], p[..., 1]), p.shape[:-1])
        return np.stack([a, b], axis=-1)

    return vel
