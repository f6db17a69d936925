"""Run configuration: one flat record read from a ``key = value`` file, overridable by flags."""
from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, fields
from pathlib import Path

from makeupdiff.curation import PipelineConfig
from makeupdiff.diffusion import ModelConfig
from makeupdiff.mga import GuidanceWeights
from makeupdiff.training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # run
    seed: int = 0
    out_dir: str = "runs/default"
    # data
    n_identities: int = 16
    n_styles: int = 8
    resolution: int = 64
    manifest: str = ""
    test_manifest: str = ""
    # model
    feature_dim: int = 128
    embed_dim: int = 64
    width: int = 64
    heads: int = 4
    T: int = 200
    beta_start: float = 5e-4
    beta_end: float = 0.1
    # training (G1, and G2 unless overridden)
    learning_rate: float = 1e-4
    lr_schedule: str = "constant"
    batch_size: int = 16
    steps: int = 1000
    g2_steps: int = -1
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda_embed: float = 0.0
    embed_temperature: float = 0.1
    recon_steps: int = 3
    region_prompt_prob: float = 0.3
    grad_clip: float = 1.0
    # guidance and sampling
    lambda_text: float = 1.0
    lambda_makeup: float = 1.0
    lambda_id: float = 1.0
    ddim_steps: int = 50
    # curation
    tau: float = 0.7
    pool_a_size: int = 8
    pool_b_size: int = 8
    refs_per_test_pair: int = 2
    # inference inputs
    checkpoint: str = ""
    compare_checkpoint: str = ""
    init_checkpoint: str = ""
    source: str = ""
    reference: str = ""
    prompt: str = "full makeup"

    # ------------------------------------------------------------ derived configs

    def model_config(self) -> ModelConfig:
        return ModelConfig(self.resolution, self.feature_dim, self.embed_dim, self.width, self.heads, self.T,
                           self.beta_start, self.beta_end)

    def train_config(self, g2: bool = False) -> TrainConfig:
        steps = self.g2_steps if g2 and self.g2_steps >= 0 else self.steps
        return TrainConfig(learning_rate=self.learning_rate, batch_size=self.batch_size, steps=steps, T=self.T,
                           ddim_steps=self.ddim_steps, lambda1=self.lambda1, lambda2=self.lambda2,
                           seed=self.seed + (1 if g2 else 0), recon_steps=self.recon_steps,
                           region_prompt_prob=self.region_prompt_prob, grad_clip=self.grad_clip,
                           lr_schedule=self.lr_schedule, lambda_embed=self.lambda_embed,
                           embed_temperature=self.embed_temperature)

    def guidance(self) -> GuidanceWeights:
        return GuidanceWeights(self.lambda_text, self.lambda_makeup, self.lambda_id)

    def pipeline_config(self) -> PipelineConfig:
        return PipelineConfig(tau=self.tau, pool_A_size=self.pool_a_size, pool_B_size=self.pool_b_size,
                              g1_train=self.train_config(), g2_train=self.train_config(g2=True), seed=self.seed,
                              ddim_steps=self.ddim_steps, refs_per_test_pair=self.refs_per_test_pair,
                              guidance=self.guidance(), model=self.model_config())

    def validate(self) -> RunConfig:
        """Build every derived config so a bad value fails before any work starts."""
        try:
            self.pipeline_config()
        except (ValueError, TypeError) as e:
            raise ConfigError(str(e)) from e
        if self.n_identities < 2 or self.n_styles < 1:
            raise ConfigError("need n_identities >= 2 and n_styles >= 1")
        if self.ddim_steps > self.T:
            raise ConfigError(f"ddim_steps {self.ddim_steps} exceeds T {self.T}")
        if not self.out_dir:
            raise ConfigError("out_dir is empty")
        return self

    def with_overrides(self, **values) -> RunConfig:
        known = {f.name for f in fields(self)}
        bad = sorted(set(values) - known)
        if bad:
            raise ConfigError(f"unknown config keys: {', '.join(bad)}")
        return dataclasses.replace(self, **{k: _coerce(k, v, self) for k, v in values.items()})


def _coerce(key: str, value, cfg: RunConfig):
    kind = type(getattr(cfg, key))
    if isinstance(value, kind) and not (kind is float and isinstance(value, bool)):
        return value
    text = str(value).strip()
    try:
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {kind.__name__}") from None
    return text


def parse_config(text: str, origin: str = "<config>") -> dict[str, str]:
    values: dict[str, str] = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{n}: expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if not key:
            raise ConfigError(f"{origin}:{n}: empty key")
        if key in values:
            raise ConfigError(f"{origin}:{n}: {key} set twice")
        # surrounding quotes are optional for strings
        if len(value) >= 2 and value[0] == value[-1] and value[0] in "'\"":
            value = value[1:-1]
        values[key] = value
    return values


def load_config(path: str | os.PathLike | None = None, **overrides) -> RunConfig:
    """Defaults, then the file (if any), then non-None overrides; validated."""
    cfg = RunConfig()
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        cfg = cfg.with_overrides(**parse_config(path.read_text(), str(path)))
    cfg = cfg.with_overrides(**{k: v for k, v in overrides.items() if v is not None})
    return cfg.validate()
