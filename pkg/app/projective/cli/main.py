# main.py

import logging
import sys
from typing import List, Optional

import click
from colorama import Fore, Style
from pydantic import ValidationError

from app.projective.cli.reports import emit_report, load_report, report_to_csv, report_to_json, write_atomic
from app.projective.cli.suites import SUITE_NAMES, emit_geodesics, run_suite
from app.projective.core.errors import GeometryError, UsageError
from app.projective.core.fields import ChartPoint
from app.projective.core.geodesics import InitialCondition
from app.projective.core.models import MODEL_REGISTRY, get_model
from app.projective.core.utilities import VerificationConfig, active_config, load_projective_config, make_rng

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"

HELP = (
    "Verifica numerica di strutture proiettive e connessioni conformi su carte 2D.\n\n"
    "Comandi:\n\n"
    "- verify SUITE: esegue una suite (structure, projective, beltrami, degree, uniqueness, "
    "jets, all) e scrive un report JSON o CSV.\n\n"
    "- geodesics: integra geodetiche di una metrica e le esporta in CSV, un blocco per geodetica.\n\n"
    "- report: converte un report JSON esistente in CSV o lo riemette in JSON.\n\n"
    "Codici di uscita: 0 tutte le verifiche passano, 1 almeno una verifica fallisce, "
    "2 errore d'uso, 3 errore di I/O."
)


def _fail(error: GeometryError):
    click.echo(f"{Fore.RED}Errore:{Style.RESET_ALL} {error.detail}", err=True)
    sys.exit(error.exit_code)


def _with_overrides(config: VerificationConfig, **overrides) -> VerificationConfig:
    """Applica le opzioni della riga di comando rivalidando l'intera configurazione."""
    values = {key: value for key, value in overrides.items() if value is not None}
    try:
        return VerificationConfig.model_validate({**config.model_dump(), **values})
    except ValidationError as e:
        raise UsageError("Errore nella configurazione: " + str(e))


@click.group(help=HELP)
@click.option("--verbose", is_flag=True, help="Log di livello DEBUG.")
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None,
              help="File JSON di configurazione (default: config.json del pacchetto).")
@click.pass_context
def cli(ctx: click.Context, verbose: bool, config_path: Optional[str]):
    logging.basicConfig(level=logging.DEBUG if verbose else logging.WARNING, format=LOG_FORMAT)
    ctx.ensure_object(dict)
    try:
        ctx.obj["config"] = load_projective_config(config_path)
    except ValueError as e:
        _fail(UsageError("Errore nella configurazione: " + str(e)))


# --------------------------- verify ---------------------------

@cli.command(help="Esegue una suite di verifica.")
@click.argument("suite", type=click.Choice(list(SUITE_NAMES) + ["all"]))
@click.option("--model", type=click.Choice(sorted(MODEL_REGISTRY)), default=None, help="Modello di superficie.")
@click.option("--h", type=float, default=None, help="Passo delle differenze centrali.")
@click.option("--grid", type=int, default=None, help="Lato della griglia di campionamento.")
@click.option("--seed", type=int, default=None, help="Seed PCG64.")
@click.option("--tol", type=float, default=None, help="Tolleranza di equivalenza proiettiva.")
@click.option("--out", type=click.Path(dir_okay=False), default=None, help="File del report (default: stdout).")
@click.option("--format", "fmt", type=click.Choice(["json", "csv"]), default="json", help="Formato del report.")
@click.option("--timings", is_flag=True, help="Registra runtime_ms (report non deterministico).")
@click.pass_context
def verify(ctx, suite, model, h, grid, seed, tol, out, fmt, timings):
    try:
        config = _with_overrides(ctx.obj["config"], h=h, grid=grid, seed=seed, tol=tol)
        report = run_suite(suite, config, model, timings)
        if out:
            emit_report(report, out, fmt, timings)
        else:
            click.echo(report_to_json(report, timings) if fmt == "json" else report_to_csv(report, timings), nl=False)
    except GeometryError as e:
        _fail(e)

    for record in report.records:
        label = f"{Fore.GREEN}PASS{Style.RESET_ALL}" if record.passed else f"{Fore.RED}FAIL{Style.RESET_ALL}"
        click.echo(f"{label} {record.name}: {record.residual:.3e} (soglia {record.tolerance:.1e})", err=True)
    failures = report.failures()
    click.echo(f"{len(report.records) - len(failures)}/{len(report.records)} verifiche superate", err=True)
    sys.exit(1 if failures else 0)


# --------------------------- geodesics ---------------------------

def _parse_ic(text: str, chart_id: str) -> InitialCondition:
    try:
        u, v, du, dv = (float(item) for item in text.split(","))
    except ValueError:
        raise UsageError(f"Condizione iniziale non valida {text!r}: attesi quattro valori u,v,du,dv")
    return InitialCondition(point=ChartPoint(u=u, v=v, chart_id=chart_id), direction=(du, dv))


@cli.command(help="Integra geodetiche ed esporta un CSV (geodesic, chart_id, u, v, x, y, z).")
@click.option("--model", type=click.Choice(sorted(MODEL_REGISTRY)), default="sphere", help="Modello di superficie.")
@click.option("--metric", "metric_spec", default="round",
              help='Metrica: "round", "beltrami:d1,d2,d3", "euclidean", "g1", "g2".')
@click.option("--ic", "ic_texts", multiple=True, help="Condizione iniziale u,v,du,dv (ripetibile).")
@click.option("--chart", default=None, help="Carta delle condizioni iniziali (default: prima carta del modello).")
@click.option("--random", "random_count", type=int, default=0, help="Numero di condizioni iniziali casuali.")
@click.option("--seed", type=int, default=None, help="Seed PCG64 per --random.")
@click.option("--steps", type=int, default=None, help="Passi RK4.")
@click.option("--dt", type=float, default=None, help="Passo RK4.")
@click.option("--h", type=float, default=None, help="Passo delle differenze centrali.")
@click.option("--out", type=click.Path(dir_okay=False), required=True, help="File CSV di destinazione.")
@click.pass_context
def geodesics(ctx, model, metric_spec, ic_texts, chart, random_count, seed, steps, dt, h, out):
    try:
        config = _with_overrides(ctx.obj["config"], seed=seed, steps=steps, dt=dt, h=h)
        surface = get_model(model)
        chart_id = chart or surface.default_chart
        ics: List[InitialCondition] = [_parse_ic(text, chart_id) for text in ic_texts]
        if random_count > 0:
            ics.extend(surface.random_initial_conditions(make_rng(config.seed), random_count))
        with active_config(config):
            count = emit_geodesics(model, metric_spec, ics, out, config.steps, config.dt, config.h)
    except GeometryError as e:
        _fail(e)
    click.echo(f"{Fore.GREEN}{count}{Style.RESET_ALL} geodetiche scritte in {out}", err=True)


# --------------------------- report ---------------------------

@cli.command(help="Converte un report JSON in CSV o lo riemette in JSON.")
@click.argument("source", type=click.Path(dir_okay=False))
@click.option("--format", "fmt", type=click.Choice(["json", "csv"]), default="csv", help="Formato di uscita.")
@click.option("--out", type=click.Path(dir_okay=False), default=None, help="File di destinazione (default: stdout).")
def report(source, fmt, out):
    try:
        loaded = load_report(source)
        text = report_to_json(loaded) if fmt == "json" else report_to_csv(loaded)
        if out:
            write_atomic(out, text)
        else:
            click.echo(text, nl=False)
    except GeometryError as e:
        _fail(e)
    sys.exit(0 if loaded.passed else 1)


if __name__ == "__main__":
    cli()
