"""JSON checkpoints for trained controllers."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch

from .controller import Mlp, TmanoController
from .errors import ConfigError
from .jets import DTYPE
from .systems import CostSpec, StateDistribution, make_system

FORMAT_VERSION = 1


def _mlp_to_dict(mlp: Mlp) -> dict:
    return {
        "dims": mlp.layer_dims,
        "weights": [w.detach().tolist() for w in mlp.weights],
        "biases": [b.detach().tolist() for b in mlp.biases],
    }


def _mlp_from_dict(d: dict) -> Mlp:
    weights = [torch.tensor(w, dtype=DTYPE) for w in d["weights"]]
    biases = [torch.tensor(b, dtype=DTYPE) for b in d["biases"]]
    mlp = Mlp(weights, biases)
    if mlp.layer_dims != list(d["dims"]):
        raise ConfigError(f"layer dims {d['dims']} do not match stored weights", "dims")
    return mlp


@dataclass
class Checkpoint:
    system: str
    cost_id: str
    kappa: float
    t_f: float
    ode_order: int
    state_gen: dict
    costate_gen: dict
    seed: int
    epochs_trained: int
    distribution: dict = field(default_factory=lambda: asdict(StateDistribution()))
    metadata: dict = field(default_factory=dict)
    format_version: int = FORMAT_VERSION

    @classmethod
    def from_controller(cls, controller: TmanoController, seed: int, epochs_trained: int, metadata=None) -> "Checkpoint":
        return cls(
            system=controller.spec.name,
            cost_id=controller.cost.cost_id,
            kappa=float(controller.cost.kappa),
            t_f=float(controller.spec.t_f),
            ode_order=controller.spec.ode_order,
            state_gen=_mlp_to_dict(controller.state_gen),
            costate_gen=_mlp_to_dict(controller.costate_gen),
            seed=int(seed),
            epochs_trained=int(epochs_trained),
            distribution=asdict(controller.system.distribution),
            metadata=dict(metadata or {}),
        )

    def to_controller(self) -> TmanoController:
        system = make_system(self.system, t_f=self.t_f, distribution=StateDistribution(**self.distribution))
        if system.spec.ode_order != self.ode_order:
            raise ConfigError(f"checkpoint ODE order {self.ode_order} does not match {self.system}", "ode_order")
        cost = CostSpec(self.cost_id, self.kappa)
        return TmanoController(system, cost, _mlp_from_dict(self.state_gen), _mlp_from_dict(self.costate_gen))

    # serialisation --------------------------------------------------------

    def to_json(self) -> str:
        # float repr is the shortest string that round-trips exactly
        return json.dumps(asdict(self), sort_keys=True, indent=1, allow_nan=False) + "\n"

    def content_hash(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json())
        return path

    @classmethod
    def from_json(cls, text: str) -> "Checkpoint":
        data = json.loads(text)
        version = data.get("format_version")
        if version != FORMAT_VERSION:
            raise ConfigError(f"unsupported checkpoint format_version {version!r}", "format_version")
        missing = [k for k in ("system", "cost_id", "kappa", "t_f", "ode_order", "state_gen", "costate_gen") if k not in data]
        if missing:
            raise ConfigError(f"checkpoint is missing {', '.join(missing)}", missing[0])
        return cls(**data)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls.from_json(Path(path).read_text())
