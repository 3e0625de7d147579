"""Built-in federate library and the registry the master instantiates from."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Callable, Mapping

from cosim.errors import ScenarioError
from cosim.federate import CSFederate, Kind, MECapsule, MEFederate, ModelDescription
from cosim.models import delay, frt, grid, qv, sources, wtg


@dataclass(frozen=True)
class ModelEntry:
    name: str
    factory: Callable[..., CSFederate | MEFederate]
    description: ModelDescription
    internal_step: float = 1e-3


MODELS: dict[str, ModelEntry] = {
    e.name: e
    for e in (
        ModelEntry("grid", grid.GridFederate, grid.DESCRIPTION),
        ModelEntry("wtg", wtg.WTGModel, wtg.DESCRIPTION, internal_step=1e-3),
        ModelEntry("frt_fsm", frt.FRTController, frt.DESCRIPTION),
        ModelEntry("qv_controller", qv.QVController, qv.DESCRIPTION),
        ModelEntry("comm_delay", delay.CommDelay, delay.DESCRIPTION),
        ModelEntry("event_schedule", sources.EventSchedule, sources.EVENT_DESCRIPTION),
        ModelEntry("equivalent", sources.Equivalent, sources.equivalent_description()),
        ModelEntry("polynomial", sources.Polynomial, sources.POLY_DESCRIPTION),
        ModelEntry("gain", sources.Gain, sources.GAIN_DESCRIPTION),
        ModelEntry("affine", sources.Affine, sources.SUM_DESCRIPTION),
        ModelEntry("linear2", sources.Linear2, sources.LINEAR2_DESCRIPTION, internal_step=1e-3),
        ModelEntry("decay", sources.Decay, sources.DECAY_DESCRIPTION, internal_step=1e-3),
    )
}


def model_entry(name: str) -> ModelEntry:
    try:
        return MODELS[name]
    except KeyError:
        raise ScenarioError(f"unknown model {name!r}; known: {sorted(MODELS)}") from None


def description(name: str, params: Mapping[str, Any] | None = None) -> ModelDescription:
    """Model description; equivalents derive theirs from their parameters."""
    if name == "equivalent":
        p = params or {}
        return sources.equivalent_description(p.get("outputs", ""), p.get("inputs", ""))
    return model_entry(name).description


def create(
    name: str,
    params: Mapping[str, Any] | None = None,
    integrator: str = "rk4",
    internal_step: float | None = None,
    step_size: float | None = None,
) -> CSFederate:
    """Instantiate a model as a steppable federate (ME models come capsuled)."""
    entry = model_entry(name)
    if name == "equivalent":
        p = params or {}
        return sources.Equivalent(p.get("outputs", ""), p.get("inputs", ""))
    fed = entry.factory()
    if entry.description.kind is Kind.ME:
        return MECapsule(fed, integrator, internal_step or entry.internal_step, step_size)
    return fed


__all__ = ["MODELS", "ModelEntry", "create", "description", "model_entry"]
