"""Text, JSON and CSV renderings of cost reports and comparison tables."""
from __future__ import annotations

import csv
import io
import json
from importlib import resources
from typing import Sequence

import jsonschema

from .accounting import COMPONENTS, TrainingSchedule, count_params, flop_breakdown, layer_flops, phase_flops
from .model import ModelConfig

COST_FIELDS = ("config", "component", "params", "forward_flops", "training_flops")


def millions(n: float) -> str:
    return f"{n / 1e6:.1f}M"


def sci(n: float) -> str:
    return f"{n:.2e}"


def text_table(header: Sequence[str], rows: Sequence[Sequence], align: str | None = None) -> str:
    """Plain fixed-width table; first column left-aligned, the rest right-aligned."""
    cells = [[str(c) for c in header]] + [[str(c) for c in row] for row in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    align = align or "l" + "r" * (len(header) - 1)

    def fmt(row):
        return "  ".join(c.ljust(w) if a == "l" else c.rjust(w) for c, w, a in zip(row, widths, align)).rstrip()

    rule = "-" * (sum(widths) + 2 * (len(widths) - 1))
    return "\n".join([fmt(cells[0]), rule] + [fmt(r) for r in cells[1:]]) + "\n"


# ---------------------------------------------------------------------------
# cost reports


def cost_rows(named: Sequence[tuple[str, ModelConfig, TrainingSchedule]], sequence_length: int = 128) -> list[dict]:
    """One row per (config, component) plus a ``total`` row per config."""
    rows = []
    for name, cfg, schedule in named:
        params = count_params(cfg, name).params
        fwd = flop_breakdown(cfg, min(sequence_length, cfg.max_positions))
        per_phase = [{k: 3 * v * p.global_batch_size * p.steps
                      for k, v in flop_breakdown(cfg, p.sequence_length).items()} for p in schedule.phases]
        train = {k: sum(ph[k] for ph in per_phase) for k in COMPONENTS}
        for comp in COMPONENTS:
            rows.append({"config": name, "component": comp, "params": params[comp],
                         "forward_flops": fwd[comp], "training_flops": train[comp]})
        rows.append({"config": name, "component": "total", "params": sum(params.values()),
                     "forward_flops": sum(fwd.values()), "training_flops": sum(train.values())})
    return rows


def rows_csv(rows: Sequence[dict], fields: Sequence[str] = COST_FIELDS) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(fields), lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: row.get(k) for k in fields})
    return buf.getvalue()


def parse_cost_csv(text: str) -> list[dict]:
    """Inverse of :func:`rows_csv` for cost rows; empty cells become ``None``."""
    out = []
    for row in csv.DictReader(io.StringIO(text)):
        parsed = {"config": row["config"], "component": row["component"]}
        for key in ("params", "forward_flops", "training_flops"):
            value = row.get(key)
            parsed[key] = int(value) if value not in (None, "") else None
        out.append(parsed)
    return out


def params_table(named: Sequence[tuple[str, ModelConfig, TrainingSchedule]]) -> str:
    reports = [count_params(cfg, name) for name, cfg, _ in named]
    header = ["component"] + [r.name for r in reports]
    rows = [[c] + [f"{r.params[c]:,}" for r in reports] for c in COMPONENTS
            if any(r.params[c] for r in reports)]
    rows.append(["total"] + [f"{r.total_params:,} ({millions(r.total_params)})" for r in reports])
    return text_table(header, rows)


def flops_table(named: Sequence[tuple[str, ModelConfig, TrainingSchedule]], sequence_length: int = 128) -> str:
    header = ["", *(name for name, _, _ in named)]
    rows = []
    totals = []
    n_phases = max(len(s.phases) for _, _, s in named)
    for i in range(n_phases):
        cells = [f"phase {i + 1}"]
        for _, cfg, schedule in named:
            if i < len(schedule.phases):
                p = schedule.phases[i]
                cells.append(f"{sci(phase_flops(cfg, schedule)[i])} (L={p.sequence_length}, "
                             f"{p.steps:,} steps x {p.global_batch_size})")
            else:
                cells.append("-")
        rows.append(cells)
    for _, cfg, schedule in named:
        totals.append(sum(phase_flops(cfg, schedule)))
    rows.append(["training total", *(sci(t) for t in totals)])
    rows.append([f"forward/seq (L={sequence_length})",
                 *(sci(sum(flop_breakdown(cfg, sequence_length).values())) for _, cfg, _ in named)])
    text = text_table(header, rows)
    if len(named) == 2:
        (_, a, sa), (_, b, sb) = named
        per_layer = layer_flops(b, sequence_length) / layer_flops(a, sequence_length)
        text += f"per-layer forward FLOPs, {named[1][0]} / {named[0][0]} (L={sequence_length}): {per_layer:.3f}\n"
        text += f"end-to-end training FLOPs, {named[1][0]} / {named[0][0]}: {totals[1] / totals[0]:.3f}\n"
    return text


def flops_json(named: Sequence[tuple[str, ModelConfig, TrainingSchedule]], sequence_length: int = 128) -> dict:
    out = {"configs": []}
    for name, cfg, schedule in named:
        per_phase = phase_flops(cfg, schedule)
        out["configs"].append({
            "name": name,
            "phases": [{**vars(p), "training_flops": f} for p, f in zip(schedule.phases, per_phase)],
            "training_flops": sum(per_phase),
            "forward_flops_per_sequence": sum(flop_breakdown(cfg, sequence_length).values()),
            "layer_forward_flops": layer_flops(cfg, sequence_length),
        })
    if len(named) == 2:
        a, b = out["configs"]
        out["per_layer_ratio"] = b["layer_forward_flops"] / a["layer_forward_flops"]
        out["training_ratio"] = b["training_flops"] / a["training_flops"]
    return out


def dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=False) + "\n"


def cost_schema() -> dict:
    return json.loads((resources.files("groupbert_kit") / "schemas" / "cost_report.schema.json").read_text())


def check_cost_csv(text: str) -> list[dict]:
    """Parse a cost CSV and validate it against the bundled schema; raises ``jsonschema.ValidationError``.

    Also checks that each config's ``total`` row equals the sum of its components.
    """
    rows = parse_cost_csv(text)
    jsonschema.validate(rows, cost_schema())
    by_config: dict[str, dict] = {}
    for row in rows:
        by_config.setdefault(row["config"], {})[row["component"]] = row
    for name, comps in by_config.items():
        total = comps.get("total")
        if total is None:
            raise jsonschema.ValidationError(f"{name}: no total row")
        for key in ("params", "forward_flops", "training_flops"):
            parts = [r[key] for c, r in comps.items() if c != "total" and r[key] is not None]
            if total[key] is not None and sum(parts) != total[key]:
                raise jsonschema.ValidationError(f"{name}: {key} components sum to {sum(parts)}, total says {total[key]}")
    return rows
