"""Per-step loss and gradient-norm records, and their CSV form."""

import csv
from dataclasses import dataclass, fields
from typing import Optional

from .exceptions import ContractError

CURVE_FIELDS = ("step", "kl", "ce", "ctc", "cos", "grad_kl", "grad_ce", "grad_ctc", "grad_cos",
                "total")


@dataclass
class CurveRecord:
    step: int
    total: float
    kl: Optional[float] = None
    ce: Optional[float] = None
    ctc: Optional[float] = None
    cos: Optional[float] = None
    grad_kl: Optional[float] = None
    grad_ce: Optional[float] = None
    grad_ctc: Optional[float] = None
    grad_cos: Optional[float] = None


def _fmt(v):
    return "" if v is None else repr(float(v)) if not isinstance(v, int) else str(v)


def export_curves(records, path):
    """Write records as CSV with header ``step,kl,ce,ctc,cos,grad_*,total``.

    Unused terms are empty fields.  Floats use ``repr`` so the text is a pure
    function of the records and parses back exactly.
    """
    if not records:
        raise ContractError("export_curves: no records")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CURVE_FIELDS)
        for r in records:
            w.writerow([_fmt(getattr(r, k)) for k in CURVE_FIELDS])


def load_curves(path):
    out = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CURVE_FIELDS:
            raise ContractError(f"{path}: unexpected header {reader.fieldnames}")
        for row in reader:
            kw = {f.name: (None if row[f.name] == "" else float(row[f.name]))
                  for f in fields(CurveRecord) if f.name != "step"}
            out.append(CurveRecord(step=int(row["step"]), **kw))
    return out
