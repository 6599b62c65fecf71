import csv
import io
import json
import math
import os
import tempfile
from typing import Any, Dict, List, Optional

from pydantic import BaseModel, Field

from app.projective.core.errors import ReportIOError
from app.projective.core.utilities import VerificationConfig

REPORT_SCHEMA_VERSION = "2"
CSV_HEADER = ["suite", "check", "residual", "tolerance", "passed", "runtime_ms"]


# --------------------------- Modelli ---------------------------

class CheckRecord(BaseModel):
    """
    Esito di una singola verifica.

    Attributes:
        name (str): Nome della verifica (es. "degree.sphere").
        residual (float): Residuo misurato.
        tolerance (float): Soglia di accettazione.
        passed (bool): Esito.
        runtime_ms (float): Durata, registrata solo con --timings.
    """
    name: str = Field(..., description="Nome della verifica")
    residual: float = Field(..., description="Residuo misurato")
    tolerance: float = Field(..., description="Soglia di accettazione")
    passed: bool = Field(..., description="Esito della verifica")
    runtime_ms: Optional[float] = Field(None, description="Durata in millisecondi (solo con --timings)")


class ConfigEcho(VerificationConfig):
    """
    Eco completa della configurazione attiva più il modello richiesto.

    Ogni campo di VerificationConfig compare nel report: `to_config()` ricostruisce la
    configurazione che, con la stessa suite e lo stesso modello, riproduce il report.
    """
    model: str = Field("default", description="Modello di superficie")

    @classmethod
    def from_config(cls, config: VerificationConfig, model: Optional[str] = None) -> "ConfigEcho":
        return cls(model=model or "default", **config.model_dump())

    def to_config(self) -> VerificationConfig:
        return VerificationConfig(**self.model_dump(exclude={"model"}))


class SuiteReport(BaseModel):
    """Report di una suite: record per verifica ed eco della configurazione."""
    suite: str = Field(..., description="Nome della suite")
    schema_version: str = Field(REPORT_SCHEMA_VERSION, description="Versione dello schema")
    config: ConfigEcho = Field(..., description="Eco della configurazione")
    records: List[CheckRecord] = Field(default_factory=list, description="Esiti delle verifiche")

    @property
    def passed(self) -> bool:
        return all(record.passed for record in self.records)

    def failures(self) -> List[CheckRecord]:
        return [record for record in self.records if not record.passed]


# --------------------------- Serializzazione ---------------------------

def _float_token(value: float) -> str:
    if math.isnan(value):
        return '"nan"'
    if math.isinf(value):
        return '"inf"' if value > 0 else '"-inf"'
    return format(value, ".17g")


def _encode(value: Any, indent: int = 0) -> str:
    # JSON con ordine dei campi stabile e float a 17 cifre significative.
    pad = "  " * (indent + 1)
    close = "  " * indent
    if isinstance(value, bool) or value is None:
        return json.dumps(value)
    if isinstance(value, float):
        return _float_token(value)
    if isinstance(value, int):
        return str(value)
    if isinstance(value, str):
        return json.dumps(value, ensure_ascii=False)
    if isinstance(value, dict):
        if not value:
            return "{}"
        items = [f"{pad}{json.dumps(key)}: {_encode(item, indent + 1)}" for key, item in value.items()]
        return "{\n" + ",\n".join(items) + "\n" + close + "}"
    if isinstance(value, (list, tuple)):
        if not value:
            return "[]"
        items = [pad + _encode(item, indent + 1) for item in value]
        return "[\n" + ",\n".join(items) + "\n" + close + "]"
    raise TypeError(f"Tipo non serializzabile: {type(value).__name__}")


def report_to_json(report: SuiteReport, include_timings: bool = False) -> str:
    data = report.model_dump()
    data["passed"] = report.passed
    for record in data["records"]:
        if not include_timings:
            record.pop("runtime_ms", None)
    return _encode(data) + "\n"


def report_to_csv(report: SuiteReport, include_timings: bool = False) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for record in report.records:
        runtime = "" if (record.runtime_ms is None or not include_timings) else format(record.runtime_ms, ".17g")
        writer.writerow([report.suite, record.name, format(record.residual, ".17g"),
                         format(record.tolerance, ".17g"), "true" if record.passed else "false", runtime])
    return buffer.getvalue()


def parse_report(text: str) -> SuiteReport:
    try:
        data: Dict[str, Any] = json.loads(text)
        data.pop("passed", None)
        return SuiteReport.model_validate(data)
    except (ValueError, AttributeError) as e:
        raise ReportIOError("Errore nella lettura del report: " + str(e))


def write_atomic(path: str, content: str) -> None:
    """
    Scrittura atomica: file temporaneo nella stessa directory, poi os.replace.

    Raises:
        ReportIOError: per qualunque errore di I/O.
    """
    directory = os.path.dirname(os.path.abspath(path))
    try:
        fd, tmp_path = tempfile.mkstemp(prefix=".tmp-", dir=directory)
        try:
            with os.fdopen(fd, "w", encoding="utf-8", newline="") as f:
                f.write(content)
            os.replace(tmp_path, path)
        except BaseException:
            if os.path.exists(tmp_path):
                os.remove(tmp_path)
            raise
    except OSError as e:
        raise ReportIOError("Errore nella scrittura del report: " + str(e))


def emit_report(report: SuiteReport, path: str, fmt: str = "json", include_timings: bool = False) -> None:
    """
    Scrive il report in JSON o CSV.

    Args:
        report (SuiteReport): Report da scrivere.
        path (str): Percorso di destinazione.
        fmt (str): "json" oppure "csv".
        include_timings (bool): Include runtime_ms (rende il file non deterministico).
    """
    if fmt == "json":
        content = report_to_json(report, include_timings)
    elif fmt == "csv":
        content = report_to_csv(report, include_timings)
    else:
        raise ValueError(f"Formato non supportato: {fmt}")
    write_atomic(path, content)


def load_report(path: str) -> SuiteReport:
    try:
        with open(path, "r", encoding="utf-8") as f:
            return parse_report(f.read())
    except OSError as e:
        raise ReportIOError("Errore nella lettura del report: " + str(e))
