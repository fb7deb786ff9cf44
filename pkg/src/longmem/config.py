"""Engine configuration: one declarative file, every tunable under a named key.

Example (YAML or JSON)::

    capacity_chars: 6000
    retrieval_k: 9
    nsb: {theta1: 6, theta2: 5, theta3: 5}
    pcb: {snapshot_interval_rounds: 10, contradiction_threshold: 0.8, schema_file: keys.yaml}
    forgetting: {alpha: 0.1, beta: 0.9, gamma: 1.0, epsilon: 1.0e-6, k: 9, policy: competition_inhibition}
    remote: {base_url: http://localhost:8000/v1, model_name: qwen2.5-7b-instruct}

Secrets never live in the file: the remote API key is read from the environment
variable named by ``remote.api_key_env_var``.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .backends import EndpointConfig
from .core import Speaker
from .errors import ConfigError
from .forgetting import ForgettingConfig
from .nsb import NsbConfig
from .pcb import PcbConfig, PersonaKeySchema, load_schema
from .templates import templates_digest


@dataclass
class EngineConfig:
    nsb: NsbConfig = field(default_factory=NsbConfig)
    pcb: PcbConfig = field(default_factory=PcbConfig)
    forgetting: ForgettingConfig = field(default_factory=ForgettingConfig)
    retrieval_k: int = 9
    capacity_chars: int | None = None
    first_speaker: Speaker | None = None
    max_calls_per_round: int | None = None
    remote: EndpointConfig | None = None

    def __post_init__(self):
        if self.retrieval_k < 1:
            raise ConfigError("retrieval_k must be at least 1")
        if self.capacity_chars is not None and self.capacity_chars <= 0:
            raise ConfigError("capacity_chars must be positive")
        if self.max_calls_per_round is not None and self.max_calls_per_round < 1:
            raise ConfigError("max_calls_per_round must be positive")
        if self.first_speaker is not None:
            self.first_speaker = Speaker(self.first_speaker)

    def to_dict(self) -> dict:
        return {
            "nsb": dataclasses.asdict(self.nsb),
            "pcb": {
                "snapshot_interval_rounds": self.pcb.snapshot_interval_rounds,
                "contradiction_threshold": self.pcb.contradiction_threshold,
                "snapshot_max_length": self.pcb.snapshot_max_length,
                "schema": [s.to_record() for s in self.pcb.schema],
            },
            "forgetting": {**dataclasses.asdict(self.forgetting), "policy": self.forgetting.policy.value},
            "retrieval_k": self.retrieval_k,
            "capacity_chars": self.capacity_chars,
            "first_speaker": self.first_speaker.value if self.first_speaker else None,
            "max_calls_per_round": self.max_calls_per_round,
            "remote": dataclasses.asdict(self.remote) if self.remote else None,
        }

    @classmethod
    def from_dict(cls, data: dict | None, base_dir: Path | None = None) -> "EngineConfig":
        data = dict(data or {})
        try:
            nsb = NsbConfig(**data.pop("nsb", None) or {})
            pcb_raw = dict(data.pop("pcb", None) or {})
            schema_file = pcb_raw.pop("schema_file", None)
            if schema_file is not None:
                path = Path(schema_file)
                if base_dir is not None and not path.is_absolute():
                    path = base_dir / path
                pcb_raw["schema"] = load_schema(path)
            elif "schema" in pcb_raw:
                pcb_raw["schema"] = [PersonaKeySchema(**s) for s in pcb_raw["schema"]]
            pcb = PcbConfig(**pcb_raw)
            forgetting = ForgettingConfig(**data.pop("forgetting", None) or {})
            remote_raw = data.pop("remote", None)
            remote = EndpointConfig(**remote_raw) if remote_raw else None
            return cls(nsb=nsb, pcb=pcb, forgetting=forgetting, remote=remote, **data)
        except TypeError as exc:
            raise ConfigError(f"unknown or missing config key: {exc}") from exc

    def config_hash(self) -> str:
        payload = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256((payload + templates_digest()).encode("utf-8")).hexdigest()

    def replace(self, **changes) -> "EngineConfig":
        return EngineConfig.from_dict({**self.to_dict(), **changes})


def load_config(path: str | Path | None) -> EngineConfig:
    if path is None:
        return EngineConfig()
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8"))
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if data is not None and not isinstance(data, dict):
        raise ConfigError(f"config {path} must be a mapping")
    return EngineConfig.from_dict(data, base_dir=path.parent)
