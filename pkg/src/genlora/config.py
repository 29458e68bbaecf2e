"""JSON configuration schemas and the training configuration object."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import jsonschema

from .errors import SchemaError

_POS_INT = {"type": "integer", "minimum": 1}
_NONNEG_INT = {"type": "integer", "minimum": 0}

ADAPTER_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "kind": {"enum": ["genlora", "lora"]},
        "rank": _POS_INT,
        "groups": _POS_INT,
        "centers": {"type": "integer", "minimum": 2},
        "grid": {"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2},
        "epsilon": {"type": "number", "exclusiveMinimum": 0},
        "alpha": {"type": ["number", "null"]},
        "scale": {"type": "number"},
        "dropout": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
    },
}

TRAIN_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "task": {"enum": ["teacher-student", "tiny-classification"]},
        "dim_out": _POS_INT,
        "dim_in": _POS_INT,
        "layers": _POS_INT,
        "teacher": {"enum": ["genlora", "gaussian"]},
        "teacher_rank": _NONNEG_INT,
        "teacher_groups": _POS_INT,
        "teacher_scale": {"type": "number", "minimum": 0},
        "n_samples": _POS_INT,
        "adapter": ADAPTER_SCHEMA,
        "lr": {"type": "number", "exclusiveMinimum": 0},
        "warmup_steps": _NONNEG_INT,
        "total_steps": _NONNEG_INT,
        "batch_size": _POS_INT,
        "seed": _NONNEG_INT,
        "betas": {"type": "array", "items": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                  "minItems": 2, "maxItems": 2},
        "adam_eps": {"type": "number", "exclusiveMinimum": 0},
        "weight_decay": {"type": "number", "minimum": 0},
        "disable_norm": {"type": "boolean"},
        "force_single_group": {"type": "boolean"},
        "freeze": {"type": "array", "uniqueItems": True,
                   "items": {"enum": ["z_a", "z_b", "theta_a", "theta_b", "a", "b"]}},
        "log_every": _POS_INT,
        "tau": {"type": "number", "exclusiveMinimum": 0},
    },
}

MODEL_SPEC_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["matrices"],
    "properties": {
        "name": {"type": "string"},
        "source": {"type": "string"},
        "matrices": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "additionalProperties": False,
                "required": ["name", "out_dim", "in_dim"],
                "properties": {
                    "name": {"type": "string"},
                    "out_dim": _POS_INT,
                    "in_dim": _POS_INT,
                    "repeat": _POS_INT,
                },
            },
        },
    },
}


def _validate(doc, schema, what: str):
    try:
        jsonschema.validate(doc, schema)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise SchemaError(f"invalid {what} at {where}: {exc.message}") from None


def validate_model_spec(doc: dict) -> None:
    _validate(doc, MODEL_SPEC_SCHEMA, "model spec")


@dataclass
class AdapterConfig:
    kind: str = "genlora"
    rank: int = 8
    groups: int = 4
    centers: int = 15
    grid: tuple[float, float] = (-3.0, 3.0)
    epsilon: float = 1e-5
    alpha: float | None = None
    scale: float = 1.0
    dropout: float = 0.0


@dataclass
class TrainConfig:
    task: str = "teacher-student"
    dim_out: int = 64
    dim_in: int = 64
    layers: int = 1
    teacher: str = "genlora"
    teacher_rank: int = 4
    teacher_groups: int = 4
    teacher_scale: float = 1.0
    n_samples: int = 256
    adapter: AdapterConfig = field(default_factory=AdapterConfig)
    lr: float = 3e-2
    warmup_steps: int = 50
    total_steps: int = 500
    batch_size: int = 64
    seed: int = 0
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    disable_norm: bool = False
    force_single_group: bool = False
    freeze: tuple[str, ...] = ()
    log_every: int = 50
    tau: float = 0.005

    def __post_init__(self):
        if self.warmup_steps > self.total_steps:
            raise SchemaError(f"warmup_steps ({self.warmup_steps}) exceeds total_steps ({self.total_steps})")
        if self.layers > 1 and self.dim_in != self.dim_out:
            raise SchemaError("stacked layers need dim_in == dim_out")
        lora_only, gen_only = {"a", "b"}, {"z_a", "z_b", "theta_a", "theta_b"}
        allowed = lora_only if self.adapter.kind == "lora" else gen_only
        if set(self.freeze) - allowed:
            raise SchemaError(f"freeze flags {sorted(set(self.freeze) - allowed)} do not apply to {self.adapter.kind}")

    @property
    def effective_groups(self) -> int:
        return 1 if self.force_single_group else self.adapter.groups

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        _validate(doc, TRAIN_SCHEMA, "train config")
        doc = dict(doc)
        adapter = dict(doc.pop("adapter", {}))
        if "grid" in adapter:
            adapter["grid"] = tuple(float(v) for v in adapter["grid"])
            if not adapter["grid"][0] < adapter["grid"][1]:
                raise SchemaError("adapter grid needs lo < hi")
        for key in ("betas", "freeze"):
            if key in doc:
                doc[key] = tuple(doc[key])
        return cls(adapter=AdapterConfig(**adapter), **doc)

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["adapter"]["grid"] = list(self.adapter.grid)
        doc["betas"] = list(self.betas)
        doc["freeze"] = list(self.freeze)
        return doc
