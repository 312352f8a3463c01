"""System-level reporting: parameter accounting, provenance summaries, graph
exports, and replica-variance statistics.

All functions are pure over a SystemState snapshot and deterministic: sorted
iteration orders, no timestamps, float64 statistics.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .store import SystemState, reachable_layers


@dataclass(frozen=True)
class TaskParams:
    activated_params: int
    activated_fraction: float
    added_params: int


@dataclass
class ParamReport:
    total_params: int
    per_task: dict[str, TaskParams]
    iteration_index: int

    def to_dict(self) -> dict:
        return {
            "total_params": self.total_params,
            "iteration_index": self.iteration_index,
            "per_task": {
                t: {"activated_params": p.activated_params,
                    "activated_fraction": p.activated_fraction,
                    "added_params": p.added_params}
                for t, p in sorted(self.per_task.items())
            },
        }


def param_report(state: SystemState) -> ParamReport:
    """Activated (on-path) and added (created-and-still-reachable) parameters per task."""
    total = sum(state.store.get(lid).param_count() for lid in state.store.ids())
    reach = reachable_layers(state)
    per_task: dict[str, TaskParams] = {}
    for task_name, model in sorted(state.retained_models.items()):
        activated = sum(state.store.get(lid).param_count() for lid in set(model.path))
        added = sum(state.store.get(lid).param_count() for lid in state.store.ids()
                    if lid in reach and state.store.get(lid).creator_task == task_name)
        fraction = activated / total if total else 0.0
        per_task[task_name] = TaskParams(activated_params=activated,
                                         activated_fraction=fraction, added_params=added)
    return ParamReport(total_params=total, per_task=per_task,
                       iteration_index=state.generation_counter)


_PALETTE = ("#e6194b", "#3cb44b", "#4363d8", "#f58231", "#911eb4", "#46f0f0",
            "#f032e6", "#bcf60c", "#fabebe", "#008080", "#9a6324", "#800000")


def graph_document(state: SystemState) -> dict:
    """Graph of the multitask system: layer nodes plus per-task input nodes,
    edges following each retained model's path. Node colors key on the task
    that last updated the layer's parameters.
    """
    tasks = sorted(state.retained_models)
    nodes = []
    seen: set[str] = set()
    for task_name in tasks:
        for lid in state.retained_models[task_name].path:
            if lid in seen:
                continue
            seen.add(lid)
            rec = state.store.get(lid)
            nodes.append({"id": lid, "kind": rec.kind.value,
                          "creator_task": rec.creator_task,
                          "last_trained_by": rec.last_trained_by(),
                          "params": rec.param_count()})
    nodes.sort(key=lambda n: n["id"])
    edges = []
    for task_name in tasks:
        path = state.retained_models[task_name].path
        edges.append({"from": f"input:{task_name}", "to": path[0], "task": task_name})
        for a, b in zip(path, path[1:]):
            edges.append({"from": a, "to": b, "task": task_name})
    return {"nodes": nodes, "edges": edges, "tasks": tasks}


def export_graph(state: SystemState, fmt: str = "dot") -> str:
    doc = graph_document(state)
    if fmt == "json":
        from .util import canonical_json
        return canonical_json(doc)
    if fmt != "dot":
        raise ConfigError(f"unknown graph format {fmt!r}; expected dot or json")
    color = {t: _PALETTE[i % len(_PALETTE)] for i, t in enumerate(doc["tasks"])}
    lines = ["digraph multitask {", "  rankdir=BT;", '  node [style=filled, fontname="Helvetica"];']
    for t in doc["tasks"]:
        lines.append(f'  "input:{t}" [shape=triangle, fillcolor="{color[t]}", label="{t}"];')
    for n in doc["nodes"]:
        shape = "box" if n["kind"] == "head" else "ellipse"
        c = color.get(n["last_trained_by"], "#cccccc")
        label = f'{n["kind"]}\\n{n["id"][:8]}'
        lines.append(f'  "{n["id"]}" [shape={shape}, fillcolor="{c}", label="{label}"];')
    for e in doc["edges"]:
        lines.append(f'  "{e["from"]}" -> "{e["to"]}" [color="{color[e["task"]]}"];')
    lines.append("}")
    return "\n".join(lines) + "\n"


def _log_fit(xs: list[float], ys: list[float]) -> dict | None:
    """Closed-form least squares of log(y) on log(x); points with non-positive
    coordinates cannot be mapped to log space and are dropped."""
    pts = [(math.log(x), math.log(y)) for x, y in zip(xs, ys) if x > 0 and y > 0]
    if len(pts) < 2:
        return None
    lx = np.array([p[0] for p in pts], np.float64)
    ly = np.array([p[1] for p in pts], np.float64)
    vx = float(((lx - lx.mean()) ** 2).mean())
    if vx == 0.0:
        return None
    cov = float(((lx - lx.mean()) * (ly - ly.mean())).mean())
    slope = cov / vx
    intercept = float(ly.mean()) - slope * float(lx.mean())
    vy = float(((ly - ly.mean()) ** 2).mean())
    corr = cov / math.sqrt(vx * vy) if vy > 0 else None
    return {"slope": slope, "intercept": intercept, "correlation": corr, "points": len(pts)}


def variance_summary(replica_accuracies: dict[str, list[float]],
                     samples_per_class: dict[str, int] | None = None) -> dict:
    """Mean and population std of per-task accuracy across replicas, plus
    log-space least-squares fits of std against error rate and samples/class.
    """
    per_task = {}
    for task_name, accs in sorted(replica_accuracies.items()):
        arr = np.asarray(accs, np.float64)
        entry = {"replicas": len(accs), "mean": float(arr.mean())}
        entry["std"] = float(arr.std()) if len(accs) >= 2 else None
        per_task[task_name] = entry
    fits = {}
    tasks_with_std = [t for t, e in per_task.items() if e["std"] is not None]
    stds = [per_task[t]["std"] for t in tasks_with_std]
    errors = [1.0 - per_task[t]["mean"] for t in tasks_with_std]
    fits["error_rate"] = _log_fit(errors, stds)
    if samples_per_class:
        spc = [float(samples_per_class.get(t, 0)) for t in tasks_with_std]
        fits["samples_per_class"] = _log_fit(spc, stds)
    return {"per_task": per_task, "fits": fits}


def params_csv(report: ParamReport) -> str:
    lines = ["task,activated_params,activated_fraction,added_params,total_params"]
    for t, p in sorted(report.per_task.items()):
        lines.append(f"{t},{p.activated_params},{p.activated_fraction!r},{p.added_params},{report.total_params}")
    return "\n".join(lines) + "\n"
