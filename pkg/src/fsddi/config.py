"""Experiment configuration: nested JSON sections mapped onto dataclasses.

Every section is optional; missing keys take their defaults and unknown
keys are rejected with the offending key path in the message.
"""
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

from .data import DataConfig
from .ddi import GmmFitConfig
from .errors import ConfigurationError
from .fed import RoundConfig
from .nn import SegNetConfig
from .scfl import ClassifierTrainConfig, PipelineConfig

METHODS = ("fedavg", "scaffold", "fedavg_plus", "cfl", "scfl", "prior_scfl")
SCHEMES = ("iid", "full_noniid", "dirichlet")

# learning rates explored for the segmentation model at full scale
FULL_SCALE_LR_GRID = (0.032, 0.1, 0.32)


@dataclass
class SplitConfig:
    scheme: str = "full_noniid"
    clients: int = 10
    dirichlet_alpha: float = 0.25

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ConfigurationError(f"split.scheme must be one of {SCHEMES}, got {self.scheme!r}")
        if self.clients < 1:
            raise ConfigurationError("split.clients must be >= 1")
        if self.dirichlet_alpha <= 0:
            raise ConfigurationError("split.dirichlet_alpha must be > 0")


@dataclass
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    split: SplitConfig = field(default_factory=SplitConfig)
    model: SegNetConfig = field(default_factory=SegNetConfig)
    rounds: RoundConfig = field(default_factory=RoundConfig)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    method: str = "scfl"
    seed: int = 0
    threads: int = 1
    out: str = ""

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigurationError(f"method must be one of {METHODS}, got {self.method!r}")
        if (self.model.height, self.model.width) != (self.data.height, self.data.width):
            raise ConfigurationError("model.height/width must equal data.height/width")
        if self.rounds.rounds != self.pipeline.total_rounds:
            raise ConfigurationError("rounds.rounds and pipeline.total_rounds must agree")
        if self.threads < 1:
            raise ConfigurationError("threads must be >= 1")
        # one root seed drives every stream, data generation included
        if self.data.seed != self.seed:
            self.data = dataclasses.replace(self.data, seed=self.seed)

    def to_dict(self):
        return _to_jsonable(dataclasses.asdict(self))

    def hash(self, exclude=("out", "threads")):
        d = self.to_dict()
        for k in exclude:
            d.pop(k, None)
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()


_SECTIONS = {"data": DataConfig, "split": SplitConfig, "model": SegNetConfig,
             "rounds": RoundConfig, "pipeline": PipelineConfig}
_NESTED = {(PipelineConfig, "gmm"): GmmFitConfig,
           (PipelineConfig, "classifier"): ClassifierTrainConfig}
_TUPLES = {"channels", "domains", "exclude_classes"}


def _to_jsonable(obj):
    if isinstance(obj, dict):
        return {k: _to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_to_jsonable(v) for v in obj]
    return obj


def _build(cls, obj, path):
    if not isinstance(obj, dict):
        raise ConfigurationError(f"{path or 'config'} must be an object")
    names = {f.name for f in dataclasses.fields(cls)}
    for key in obj:
        if key not in names:
            raise ConfigurationError(f"unknown key {key!r} at {path or 'top level'}")
    kwargs = {}
    for key, val in obj.items():
        sub = _NESTED.get((cls, key))
        if sub is not None:
            val = _build(sub, val, f"{path}.{key}")
        elif key in _TUPLES and isinstance(val, list):
            val = tuple(val)
        kwargs[key] = val
    try:
        return cls(**kwargs)
    except ConfigurationError as exc:
        raise ConfigurationError(f"{path}: {exc}") from None
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"{path}: {exc}") from None


def config_from_dict(obj):
    """Resolve a (possibly empty) JSON object into a full :class:`ExperimentConfig`."""
    if not isinstance(obj, dict):
        raise ConfigurationError("config must be a JSON object")
    top = {f.name for f in dataclasses.fields(ExperimentConfig)}
    for key in obj:
        if key not in top:
            raise ConfigurationError(f"unknown key {key!r} at top level")
    obj = dict(obj)
    data = _build(DataConfig, obj.pop("data", {}), "data")
    model_obj = dict(obj.pop("model", {}))
    # the network input follows the data unless given explicitly
    model_obj.setdefault("height", data.height)
    model_obj.setdefault("width", data.width)
    model = _build(SegNetConfig, model_obj, "model")
    pipe_obj = dict(obj.pop("pipeline", {}))
    rounds_obj = dict(obj.pop("rounds", {}))
    if "rounds" in rounds_obj and "total_rounds" not in pipe_obj:
        pipe_obj["total_rounds"] = rounds_obj["rounds"]
    elif "total_rounds" in pipe_obj and "rounds" not in rounds_obj:
        rounds_obj["rounds"] = pipe_obj["total_rounds"]
    rounds = _build(RoundConfig, rounds_obj, "rounds")
    pipeline = _build(PipelineConfig, pipe_obj, "pipeline")
    split = _build(SplitConfig, obj.pop("split", {}), "split")
    try:
        return ExperimentConfig(data=data, split=split, model=model, rounds=rounds,
                                pipeline=pipeline, **obj)
    except TypeError as exc:
        raise ConfigurationError(str(exc)) from None


def parse_config(path):
    try:
        with open(path) as fh:
            obj = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}: invalid JSON ({exc})") from None
    return config_from_dict(obj)


def full_scale(lr=0.32):
    """Full-size budget: 3200/1280/1280 samples, 700 rounds, split at 30."""
    if lr not in FULL_SCALE_LR_GRID:
        raise ConfigurationError(f"lr must be one of {FULL_SCALE_LR_GRID}")
    return config_from_dict({
        "data": {"train_size": 3200, "val_size": 1280, "test_size": 1280},
        "rounds": {"rounds": 700, "lr": lr},
        "pipeline": {"split_round": 30, "fedavg_plus_epochs": 100},
    })
