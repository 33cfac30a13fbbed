"""Run configuration: flat key=value text tied to the module config types.

A config file is plain text, one ``section.key = value`` per line, with
``#`` starting a comment (full line or trailing). Values are parsed by the
declared type of the target field: ints, floats, booleans (true/false),
and comma-separated integer tuples. Unknown keys are rejected so typos
fail loudly instead of silently using a default.

Seeds are centralized: the single ``run.seed`` value seeds every module
(phantom generation, training, inference). Cross-module fields that must
agree are validated with messages naming both offending keys.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

from .denoiser import DenoiserConfig
from .errors import ConfigError
from .ofg import OFGConfig
from .phantom import PhantomSpec
from .trainer import TrainConfig

DEFAULT_T = 100


def _parse_bool(raw: str, key: str) -> bool:
    low = raw.lower()
    if low in ("true", "false"):
        return low == "true"
    raise ConfigError(f"{key}: expected true or false, got {raw!r}")


def _parse_int(raw: str, key: str) -> int:
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"{key}: expected an integer, got {raw!r}") from None


def _parse_float(raw: str, key: str) -> float:
    try:
        return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: expected a number, got {raw!r}") from None


def _parse_int_tuple(raw: str, key: str) -> tuple[int, ...]:
    try:
        return tuple(int(part.strip()) for part in raw.split(",") if part.strip())
    except ValueError:
        raise ConfigError(f"{key}: expected comma-separated integers, got {raw!r}") from None


# key -> (target section, field name, parser); sections are built with these
# fields plus the central seed where the dataclass takes one.
_SCHEMA = {
    "run.seed": ("run", "seed", _parse_int),
    "schedule.T": ("schedule", "T", _parse_int),
    "schedule.beta_start": ("schedule", "beta_start", _parse_float),
    "schedule.beta_end": ("schedule", "beta_end", _parse_float),
    "denoiser.base_width": ("denoiser", "base_width", _parse_int),
    "denoiser.depth": ("denoiser", "depth", _parse_int),
    "denoiser.d_model": ("denoiser", "d_model", _parse_int),
    "denoiser.d_pos": ("denoiser", "d_pos", _parse_int),
    "denoiser.c_f": ("denoiser", "c_f", _parse_int),
    "denoiser.d_text": ("denoiser", "d_text", _parse_int),
    "denoiser.n_classes": ("denoiser", "n_classes", _parse_int),
    "train.epochs": ("train", "epochs", _parse_int),
    "train.batch_size": ("train", "batch_size", _parse_int),
    "train.lr_init": ("train", "lr_init", _parse_float),
    "train.lr_min": ("train", "lr_min", _parse_float),
    "train.warmup_steps": ("train", "warmup_steps", _parse_int),
    "train.weight_decay": ("train", "weight_decay", _parse_float),
    "train.skip_set": ("train", "skip_set", _parse_int_tuple),
    "train.dropout_p": ("train", "dropout_p", _parse_float),
    "train.guidance_p": ("train", "guidance_p", _parse_float),
    "train.checkpoint_every": ("train", "checkpoint_every", _parse_int),
    "ofg.ddim_steps": ("ofg", "ddim_steps", _parse_int),
    "ofg.gamma": ("ofg", "gamma", _parse_float),
    "ofg.blur_sigma": ("ofg", "blur_sigma", _parse_float),
    "ofg.markovian_baseline": ("ofg", "markovian_baseline", _parse_bool),
    "ofg.guide_next_from_first": ("ofg", "guide_next_from_first", _parse_bool),
    "phantom.h": ("phantom", "h", _parse_int),
    "phantom.w": ("phantom", "w", _parse_int),
    "phantom.depth_range": ("phantom", "depth_range", _parse_int_tuple),
    "phantom.n_classes": ("phantom", "n_classes", _parse_int),
    "phantom.noise_level": ("phantom", "noise_level", _parse_float),
    # redundant declarations; must agree with the denoiser's values
    "pairing.d_pos": ("pairing", "d_pos", _parse_int),
    "pairing.d_text": ("pairing", "d_text", _parse_int),
}


def parse_config_text(text: str) -> dict[str, object]:
    """Parse key=value lines into a {key: typed value} mapping."""
    out: dict[str, object] = {}
    for lineno, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {raw_line.strip()!r}")
        key, _, raw_val = line.partition("=")
        key = key.strip()
        raw_val = raw_val.strip()
        if key not in _SCHEMA:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = _SCHEMA[key][2](raw_val, key)
    return out


@dataclass(frozen=True)
class RunConfig:
    """Everything one run needs: module configs plus the master seed."""

    seed: int = 0
    t_steps: int = DEFAULT_T
    beta_start: float | None = None
    beta_end: float | None = None
    denoiser: DenoiserConfig = dataclasses.field(default_factory=DenoiserConfig)
    train: TrainConfig = dataclasses.field(default_factory=TrainConfig)
    ofg: OFGConfig = dataclasses.field(default_factory=OFGConfig)
    phantom: PhantomSpec = dataclasses.field(default_factory=PhantomSpec)

    def __post_init__(self):
        if self.seed < 0:
            raise ConfigError(f"run.seed must be >= 0, got {self.seed}")
        if self.t_steps < 1:
            raise ConfigError(f"schedule.T must be >= 1, got {self.t_steps}")
        if (self.beta_start is None) != (self.beta_end is None):
            raise ConfigError(
                "schedule.beta_start and schedule.beta_end must be set together"
            )
        if self.beta_start is not None:
            if not (0.0 < self.beta_start <= self.beta_end < 1.0):
                raise ConfigError(
                    f"schedule betas must satisfy 0 < beta_start <= beta_end < 1, "
                    f"got {self.beta_start} and {self.beta_end}"
                )
        if self.phantom.n_classes != self.denoiser.n_classes:
            raise ConfigError(
                f"phantom.n_classes={self.phantom.n_classes} conflicts with "
                f"denoiser.n_classes={self.denoiser.n_classes}"
            )
        if self.ofg.ddim_steps > self.t_steps:
            raise ConfigError(
                f"ofg.ddim_steps={self.ofg.ddim_steps} exceeds schedule.T={self.t_steps}"
            )

    def with_seed(self, seed: int) -> "RunConfig":
        """Same configuration reseeded everywhere from one master value."""
        return dataclasses.replace(
            self,
            seed=seed,
            train=dataclasses.replace(self.train, seed=seed),
            ofg=dataclasses.replace(self.ofg, seed=seed),
            phantom=dataclasses.replace(self.phantom, seed=seed),
        )


def _build_section(cls, mapping: dict[str, object], section: str, extra: dict) -> object:
    kwargs = dict(extra)
    for key, (sec, field_name, _) in _SCHEMA.items():
        if sec == section and key in mapping:
            value = mapping[key]
            if field_name in ("depth_range",):
                value = tuple(value)
            kwargs[field_name] = value
    return cls(**kwargs)


def config_from_mapping(mapping: dict[str, object]) -> RunConfig:
    """Typed mapping -> RunConfig, with the master seed fanned out."""
    unknown = set(mapping) - set(_SCHEMA)
    if unknown:
        raise ConfigError(f"unknown keys: {sorted(unknown)}")
    seed = int(mapping.get("run.seed", 0))
    denoiser = _build_section(DenoiserConfig, mapping, "denoiser", {})
    for key, field_name in (("pairing.d_pos", "d_pos"), ("pairing.d_text", "d_text")):
        if key in mapping and mapping[key] != getattr(denoiser, field_name):
            raise ConfigError(
                f"{key}={mapping[key]} conflicts with denoiser.{field_name}="
                f"{getattr(denoiser, field_name)}"
            )
    depth_range = mapping.get("phantom.depth_range")
    if depth_range is not None and len(depth_range) != 2:
        raise ConfigError(f"phantom.depth_range: expected two integers, got {depth_range}")
    return RunConfig(
        seed=seed,
        t_steps=int(mapping.get("schedule.T", DEFAULT_T)),
        beta_start=mapping.get("schedule.beta_start"),
        beta_end=mapping.get("schedule.beta_end"),
        denoiser=denoiser,
        train=_build_section(TrainConfig, mapping, "train", {"seed": seed}),
        ofg=_build_section(OFGConfig, mapping, "ofg", {"seed": seed}),
        phantom=_build_section(PhantomSpec, mapping, "phantom", {"seed": seed}),
    )


def schedule_for(cfg: RunConfig):
    """The run's noise schedule: custom endpoints if set, else the default."""
    from .schedule import make_default_schedule, make_linear_schedule

    if cfg.beta_start is not None:
        return make_linear_schedule(cfg.t_steps, cfg.beta_start, cfg.beta_end)
    return make_default_schedule(cfg.t_steps)


def load_config(path) -> RunConfig:
    """Read and validate a config file; missing file is a config error."""
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"{p}: cannot read config ({exc})") from None
    return config_from_mapping(parse_config_text(text))


def config_snapshot(cfg: RunConfig) -> str:
    """Render the effective configuration back as parseable key=value text."""
    d, t, o, p = cfg.denoiser, cfg.train, cfg.ofg, cfg.phantom
    values = {
        "run.seed": cfg.seed,
        "schedule.T": cfg.t_steps,
        **(
            {"schedule.beta_start": cfg.beta_start, "schedule.beta_end": cfg.beta_end}
            if cfg.beta_start is not None
            else {}
        ),
        "denoiser.base_width": d.base_width,
        "denoiser.depth": d.depth,
        "denoiser.d_model": d.d_model,
        "denoiser.d_pos": d.d_pos,
        "denoiser.c_f": d.c_f,
        "denoiser.d_text": d.d_text,
        "denoiser.n_classes": d.n_classes,
        "train.epochs": t.epochs,
        "train.batch_size": t.batch_size,
        "train.lr_init": t.lr_init,
        "train.lr_min": t.lr_min,
        "train.warmup_steps": t.warmup_steps,
        "train.weight_decay": t.weight_decay,
        "train.skip_set": ",".join(str(k) for k in t.skip_set),
        "train.dropout_p": t.dropout_p,
        "train.guidance_p": t.guidance_p,
        "train.checkpoint_every": t.checkpoint_every,
        "ofg.ddim_steps": o.ddim_steps,
        "ofg.gamma": o.gamma,
        "ofg.blur_sigma": o.blur_sigma,
        "ofg.markovian_baseline": str(o.markovian_baseline).lower(),
        "ofg.guide_next_from_first": str(o.guide_next_from_first).lower(),
        "phantom.h": p.h,
        "phantom.w": p.w,
        "phantom.depth_range": f"{p.depth_range[0]},{p.depth_range[1]}",
        "phantom.n_classes": p.n_classes,
        "phantom.noise_level": p.noise_level,
    }
    lines = ["# effective configuration"]
    lines += [f"{key} = {value}" for key, value in values.items()]
    return "\n".join(lines) + "\n"
