"""Line-based ``key=value`` instance files.

Example::

    # 8-location linear pipeline
    topology=linear
    L=8
    levels=5
    chain0=1,0,0,0,0
    chain1=0,0.9,0.1,0,0
    chain2=0,0,0.9,0.1,0
    chain3=0,0,0,0.9,0.1
    chain4=0,0,0,0,1
    costs=0,0.1,1,10,100
    alpha=0.99
    seed=7

Chain rows may be omitted entirely (``p_worsen`` then selects the default
upper-bidiagonal chain). ``rows``/``cols`` replace ``L`` for grids.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .model import InstanceError, PipelineModel, Topology, default_chain, default_costs

KNOWN_KEYS = {"topology", "L", "rows", "cols", "levels", "p_worsen", "costs", "alpha",
              "threshold", "sense_radius", "seed"}
TOPOLOGIES = ("linear", "grid", "two_robot_linear")


def parse_instance(text: str, source: str = "<instance>") -> PipelineModel:
    fields: dict[str, tuple[int, str]] = {}
    chain_rows: dict[int, tuple[int, list[float]]] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InstanceError(f"{source}:{lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key.startswith("chain"):
            suffix = key[5:].lstrip("._")
            if not suffix.isdigit():
                raise InstanceError(f"{source}:{lineno}: bad chain key {key!r}")
            chain_rows[int(suffix)] = (lineno, _floats(value, source, lineno, key))
            continue
        if key not in KNOWN_KEYS:
            raise InstanceError(f"{source}:{lineno}: unknown key {key!r}")
        fields[key] = (lineno, value)

    def get(key, conv, default=None):
        if key not in fields:
            if default is None:
                raise InstanceError(f"{source}: missing required key {key!r}")
            return default
        lineno, value = fields[key]
        try:
            return conv(value)
        except ValueError:
            raise InstanceError(f"{source}:{lineno}: cannot parse {key}={value!r}") from None

    topology = get("topology", str, "linear")
    if topology not in TOPOLOGIES:
        raise InstanceError(f"{source}: topology must be one of {TOPOLOGIES}, got {topology!r}")
    levels = get("levels", int, 5)

    if chain_rows:
        missing = sorted(set(range(levels)) - set(chain_rows))
        if missing:
            raise InstanceError(f"{source}: chain row {missing[0]} missing")
        chain = np.zeros((levels, levels))
        for k in range(levels):
            lineno, row = chain_rows[k]
            if len(row) != levels:
                raise InstanceError(f"{source}:{lineno}: chain row {k} has {len(row)} entries, expected {levels}")
            if abs(sum(row) - 1.0) > 1e-12:
                raise InstanceError(f"{source}:{lineno}: chain row {k} sums to {sum(row)!r}, expected 1")
            chain[k] = row
    else:
        chain = default_chain(levels, get("p_worsen", float, 0.1))

    if "costs" in fields:
        lineno, value = fields["costs"]
        costs = np.array(_floats(value, source, lineno, "costs"))
    else:
        costs = default_costs(levels)

    if topology == "grid":
        topo = Topology.grid(get("rows", int), get("cols", int))
    else:
        topo = Topology.linear(get("L", int), n_robots=2 if topology == "two_robot_linear" else 1)

    return PipelineModel(
        topo, chain, costs,
        discount=get("alpha", float, 0.99),
        damaged_threshold=get("threshold", float, 0.5),
        sense_radius=get("sense_radius", int, 0),
        seed=get("seed", int, 0),
    )


def load_instance(path) -> PipelineModel:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise InstanceError(f"cannot read instance file {path}: {exc}") from None
    return parse_instance(text, source=str(path))


def format_instance(model: PipelineModel) -> str:
    topo = model.topology
    lines = [f"topology={topo.kind}"]
    if topo.kind == "grid":
        lines += [f"rows={topo.rows}", f"cols={topo.cols}"]
    else:
        lines.append(f"L={topo.n_locations}")
    lines.append(f"levels={model.levels}")
    for k, row in enumerate(model.chain):
        lines.append(f"chain{k}=" + ",".join(repr(float(x)) for x in row))
    lines.append("costs=" + ",".join(repr(float(x)) for x in model.costs))
    lines += [f"alpha={model.discount!r}", f"threshold={model.damaged_threshold!r}",
              f"sense_radius={model.sense_radius}", f"seed={model.seed}"]
    return "\n".join(lines) + "\n"


def _floats(value: str, source: str, lineno: int, key: str) -> list[float]:
    try:
        return [float(x) for x in value.split(",")]
    except ValueError:
        raise InstanceError(f"{source}:{lineno}: {key} must be a comma-separated list of numbers") from None
