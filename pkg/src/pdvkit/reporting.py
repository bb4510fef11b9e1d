"""Check records with their verdict rules, plus deterministic serialization.

A verdict is always recomputable from the record alone: ``evaluate`` looks at
``estimate``, ``stderr``, ``n``, ``reference`` and the named ``rule`` only.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Any, Optional

import numpy as np

PASS, FAIL, INCONCLUSIVE = "pass", "fail", "inconclusive"
Z = 3.0  # standard errors


def _zero_hits(m):
    if m.estimate == 0:
        return PASS
    return INCONCLUSIVE if m.estimate <= Z / math.sqrt(m.n) else FAIL


def _two_sided(m):
    if m.max_halfwidth is not None and Z * m.stderr > m.max_halfwidth:
        return INCONCLUSIVE
    return PASS if abs(m.estimate - m.reference) <= Z * m.stderr else FAIL


RULES = {
    # estimate + 3 SE must stay below the reference bound
    "upper_bound": lambda m: PASS if m.estimate + Z * m.stderr <= m.reference else FAIL,
    "two_sided": _two_sided,
    "zero_hits": _zero_hits,
    # significantly positive: 3 SE above zero and above 3/sqrt(n)
    "positive": lambda m: PASS
    if m.estimate - Z * m.stderr > 0 and m.estimate > Z / math.sqrt(m.n)
    else FAIL,
    "at_most": lambda m: PASS if m.estimate <= m.reference else FAIL,
    "below": lambda m: PASS if m.estimate < m.reference else FAIL,
    "at_least": lambda m: PASS if m.estimate >= m.reference else FAIL,
    "equal": lambda m: PASS if m.estimate == m.reference else FAIL,
    "interval": lambda m: PASS if m.reference[0] <= m.estimate <= m.reference[1] else FAIL,
    "info": lambda m: PASS,
}


@dataclass
class Measurement:
    name: str
    estimate: Any
    rule: str
    reference: Any = None
    stderr: float = 0.0
    n: int = 0
    max_halfwidth: Optional[float] = None
    note: str = ""
    verdict: str = ""

    def __post_init__(self):
        if not self.verdict:
            self.verdict = evaluate(self)

    def to_dict(self) -> dict:
        d = {
            "name": self.name,
            "estimate": self.estimate,
            "stderr": self.stderr,
            "n": self.n,
            "reference": self.reference,
            "rule": self.rule,
            "verdict": self.verdict,
        }
        if self.max_halfwidth is not None:
            d["max_halfwidth"] = self.max_halfwidth
        if self.note:
            d["note"] = self.note
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Measurement":
        keys = ("name", "estimate", "rule", "reference", "stderr", "n", "max_halfwidth", "note")
        return cls(**{k: d[k] for k in keys if k in d}, verdict=d.get("verdict", ""))


def evaluate(m: Measurement) -> str:
    if m.estimate is None or (isinstance(m.estimate, float) and math.isnan(m.estimate)):
        return INCONCLUSIVE if m.rule != "info" else PASS
    return RULES[m.rule](m)


def combine(verdicts) -> str:
    verdicts = list(verdicts)
    if FAIL in verdicts:
        return FAIL
    if INCONCLUSIVE in verdicts:
        return INCONCLUSIVE
    return PASS


@dataclass
class CheckReport:
    """Outcome of one verification check.

    The headline measurement supplies ``estimate``/``stderr``/``n``/``reference``;
    the verdict combines all measurements (any fail -> fail, else any
    inconclusive -> inconclusive).
    """

    name: str
    measurements: list
    headline: str
    notes: list = field(default_factory=list)
    details: dict = field(default_factory=dict)

    def measurement(self, name: str) -> Measurement:
        return next(m for m in self.measurements if m.name == name)

    @property
    def verdict(self) -> str:
        return combine(m.verdict for m in self.measurements)

    @property
    def passed(self) -> bool:
        return self.verdict == PASS

    def to_dict(self) -> dict:
        h = self.measurement(self.headline)
        d = {
            "name": self.name,
            "estimate": h.estimate,
            "stderr": h.stderr,
            "n": h.n,
            "reference": h.reference,
            "verdict": self.verdict,
            "measurements": [m.to_dict() for m in self.measurements],
        }
        if self.notes:
            d["notes"] = list(self.notes)
        if self.details:
            d["details"] = self.details
        return d


def reevaluate(check: dict) -> str:
    """Recompute a serialized check's verdict from its measurements."""
    return combine(evaluate(Measurement.from_dict(m)) for m in check["measurements"])


def format_float(x: float) -> str:
    if math.isnan(x):
        return "NaN"
    if math.isinf(x):
        return "Infinity" if x > 0 else "-Infinity"
    text = format(x, ".17g")
    # keep integral values typed as floats (and -0.0 signed) after parsing
    if not any(c in text for c in ".en"):
        text += ".0"
    return text


def dumps(obj, indent: int = 2) -> str:
    """JSON with every float written to 17 significant digits.

    Non-finite floats use the ``NaN``/``Infinity`` tokens that :func:`json.loads`
    accepts.
    """
    out = io.StringIO()
    _write(obj, out, indent, 0)
    out.write("\n")
    return out.getvalue()


def _write(obj, out, indent, level):
    pad = " " * (indent * (level + 1))
    end = " " * (indent * level)
    if isinstance(obj, bool) or obj is None or isinstance(obj, str):
        out.write(json.dumps(obj))
    elif isinstance(obj, np.bool_):
        out.write(json.dumps(bool(obj)))
    elif isinstance(obj, (int, np.integer)):
        out.write(str(int(obj)))
    elif isinstance(obj, (float, np.floating)):
        out.write(format_float(float(obj)))
    elif isinstance(obj, dict):
        if not obj:
            out.write("{}")
            return
        out.write("{\n")
        for i, (k, v) in enumerate(obj.items()):
            out.write(f"{pad}{json.dumps(str(k))}: ")
            _write(v, out, indent, level + 1)
            out.write(",\n" if i < len(obj) - 1 else "\n")
        out.write(end + "}")
    elif isinstance(obj, (list, tuple)):
        if not obj:
            out.write("[]")
            return
        if all(isinstance(v, (int, float, str, bool)) or v is None for v in obj):
            out.write("[")
            for i, v in enumerate(obj):
                _write(v, out, indent, level + 1)
                if i < len(obj) - 1:
                    out.write(", ")
            out.write("]")
            return
        out.write("[\n")
        for i, v in enumerate(obj):
            out.write(pad)
            _write(v, out, indent, level + 1)
            out.write(",\n" if i < len(obj) - 1 else "\n")
        out.write(end + "]")
    else:
        raise TypeError(f"cannot serialize {type(obj).__name__}")


TRAJECTORY_HEADER = ["t", "r1_0", "r1_1", "r2_0", "r2_1", "sigma", "y", "x"]


def trajectory_csv(times, r1, r2, sigma, y, x) -> str:
    """CSV text for one path; 2-factor paths leave ``r1_1``/``r2_1`` empty, paths without ``Y`` leave it empty."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRAJECTORY_HEADER)
    k = r1.shape[1]
    for i, t in enumerate(times):
        row = [format_float(t)]
        row += [format_float(r1[i, 0]), format_float(r1[i, 1]) if k > 1 else ""]
        row += [format_float(r2[i, 0]), format_float(r2[i, 1]) if k > 1 else ""]
        row += [format_float(sigma[i]), "" if y is None else format_float(y[i])]
        row.append(format_float(x[i]))
        w.writerow(row)
    return buf.getvalue()
