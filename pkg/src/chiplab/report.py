"""Evaluation reports and their CSV/JSON serializations.

Floats are canonicalized to 6 significant digits when a report is built, so
serialization is lossless and a JSON round-trip compares equal. Wall-clock
timings are carried in memory for logging but never serialized: report files
must be byte-identical across reruns of the same config and seed.
"""

import json
from dataclasses import dataclass, field

from .errors import ContractViolation, FormatError
from .pruning import prune_ratio

CSV_HEADER = "layer,accuracy,prune_ratio"


def round6(x: float) -> float:
    """Round to 6 significant digits (the on-disk float precision)."""
    return float(f"{float(x):.6g}")


def fmt(x: float) -> str:
    return f"{float(x):.6g}"


@dataclass
class EvalReport:
    n_layers: int
    layer_accuracies: list
    selected_layer: int
    strategy: str
    prune_ratio: float
    pruned_accuracy: float
    timings: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if len(self.layer_accuracies) != self.n_layers:
            raise ContractViolation("per-layer table length disagrees with n_layers")
        if not 0 <= self.selected_layer < self.n_layers:
            raise ContractViolation("selected layer out of range")
        self.layer_accuracies = [round6(a) for a in self.layer_accuracies]
        self.prune_ratio = round6(self.prune_ratio)
        self.pruned_accuracy = round6(self.pruned_accuracy)
        if self.prune_ratio != round6(prune_ratio(self.n_layers, self.selected_layer)):
            raise ContractViolation("prune ratio disagrees with the selected layer")
        if self.pruned_accuracy != self.layer_accuracies[self.selected_layer]:
            raise ContractViolation(
                "pruned-model accuracy disagrees with the per-layer table entry")


def make_report(layer_accuracies, selected_layer, strategy, pruned_accuracy,
                timings=None) -> EvalReport:
    n = len(layer_accuracies)
    return EvalReport(
        n_layers=n,
        layer_accuracies=list(layer_accuracies),
        selected_layer=selected_layer,
        strategy=strategy,
        prune_ratio=prune_ratio(n, selected_layer),
        pruned_accuracy=pruned_accuracy,
        timings=dict(timings or {}),
    )


def report_to_json(report: EvalReport) -> str:
    doc = {
        "n_layers": report.n_layers,
        "strategy": report.strategy,
        "selected_layer": report.selected_layer,
        "prune_ratio": report.prune_ratio,
        "pruned_accuracy": report.pruned_accuracy,
        "layers": [
            {"layer": i, "accuracy": acc, "prune_ratio": round6(prune_ratio(report.n_layers, i))}
            for i, acc in enumerate(report.layer_accuracies)
        ],
    }
    return json.dumps(doc, indent=2) + "\n"


def report_to_csv(report: EvalReport) -> str:
    lines = [CSV_HEADER]
    for i, acc in enumerate(report.layer_accuracies):
        lines.append(f"{i},{fmt(acc)},{fmt(prune_ratio(report.n_layers, i))}")
    return "\n".join(lines) + "\n"


def emit_report(report: EvalReport, fmt_name: str, path) -> None:
    if fmt_name == "json":
        text = report_to_json(report)
    elif fmt_name == "csv":
        text = report_to_csv(report)
    else:
        raise ContractViolation(f"unknown report format {fmt_name!r}")
    with open(path, "w", newline="\n") as fh:
        fh.write(text)


def read_report(path) -> EvalReport:
    """Parse a JSON report back into an EvalReport (CSV carries only the table)."""
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as err:
            raise FormatError("header", f"not valid JSON: {err}", path) from err
    try:
        return EvalReport(
            n_layers=doc["n_layers"],
            layer_accuracies=[row["accuracy"] for row in doc["layers"]],
            selected_layer=doc["selected_layer"],
            strategy=doc["strategy"],
            prune_ratio=doc["prune_ratio"],
            pruned_accuracy=doc["pruned_accuracy"],
        )
    except (KeyError, TypeError) as err:
        raise FormatError("header", f"missing report field: {err}", path) from err
