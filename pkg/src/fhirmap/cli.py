"""Command-line entry point: run individual pipeline stages or the whole thing.

Subcommands: ingest | retrieve | cluster | map | eval | pipeline.  Exit codes:
0 ok, 2 configuration error, 3 provider error, 4 validation-fatal (no
parseable mapping).  Without ``--config`` the bundled fixtures for the chosen
scenario are used, so ``fhirmap pipeline --scenario baseline --out /tmp/run``
works out of the box with the mock provider.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .gateway import GatewayConfigError, ProviderError
from .ingest import CorpusError, DatasetError, bundled_fixture
from .lexical import EmbeddingError
from .metrics import EvaluationError
from .pipeline import (
    ConfigError,
    PipelineConfig,
    StageError,
    ValidationFatal,
    run_pipeline,
    stage_cluster,
    stage_eval,
    stage_ingest,
    stage_map,
    stage_retrieve,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_PROVIDER = 3
EXIT_VALIDATION = 4

_CONFIG_ERRORS = (ConfigError, GatewayConfigError, DatasetError, CorpusError, EvaluationError)
_PROVIDER_ERRORS = (ProviderError, EmbeddingError)
_VALIDATION_ERRORS = (ValidationFatal,)


def _add_common_flags(parser: argparse.ArgumentParser):
    parser.add_argument("--config", type=Path, help="pipeline config JSON file")
    parser.add_argument("--scenario", choices=("baseline", "realworld"))
    parser.add_argument("--strategy", help="prompt strategy name")
    parser.add_argument("--temperature", type=float)
    parser.add_argument("--top-p", type=float, dest="top_p")
    parser.add_argument("--runs", type=int)
    parser.add_argument("--seed", type=int)
    parser.add_argument("--provider", choices=("mock", "http"), help="provider kind override")
    parser.add_argument("--top-k", type=int, dest="top_k")
    parser.add_argument("--parallel-runs", type=int, dest="parallel_runs")
    parser.add_argument("--out", help="output directory for artifacts")


def build_config(args: argparse.Namespace) -> PipelineConfig:
    raw: dict = {}
    if args.config:
        if not args.config.exists():
            raise ConfigError(f"config file not found: {args.config}")
        try:
            raw = json.loads(args.config.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc.msg}") from exc
    scenario = args.scenario or raw.get("scenario")
    if not scenario:
        raise ConfigError("--scenario (or a config file with one) is required")
    raw["scenario"] = scenario
    raw.setdefault("dataset", str(bundled_fixture(f"{scenario}_dataset.json")))
    raw.setdefault("corpus", str(bundled_fixture("fhir_corpus")))
    raw.setdefault("gold", str(bundled_fixture(f"{scenario}_gold.json")))
    for flag in ("strategy", "temperature", "top_p", "runs", "seed", "top_k",
                 "parallel_runs", "out"):
        value = getattr(args, flag)
        if value is not None:
            raw[flag] = value
    raw.setdefault("out", "out")
    if args.provider:
        raw.setdefault("provider", {})["kind"] = args.provider
    return PipelineConfig.from_dict(raw)


STAGES = {
    "ingest": stage_ingest,
    "cluster": stage_cluster,
    "retrieve": stage_retrieve,
    "map": stage_map,
    "eval": stage_eval,
    "pipeline": run_pipeline,
}


def _summarize(command: str, result, config: PipelineConfig):
    if command == "pipeline":
        print(f"pipeline complete; artifacts in {config.out}")
        if "eval" in result:
            for record in result["eval"]["records"]:
                print(
                    f"  {record.run_id}: resource={record.resource_accuracy:.3f} "
                    f"hit@1={record.hit_at_1:.3f} hit@3={record.hit_at_3:.3f}"
                )
    elif command == "eval":
        print(f"report written: {result['report_json']}")
        print(Path(result["report_txt"]).read_text(encoding="utf-8"))
    else:
        print(f"{command} complete; artifacts in {config.out}")


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="fhirmap",
        description="Map tabular clinical schemas to HL7 FHIR resources and element paths.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in STAGES:
        _add_common_flags(sub.add_parser(name, help=f"run the {name} stage"))
    args = parser.parse_args(argv)

    try:
        config = build_config(args)
        result = STAGES[args.command](config)
        _summarize(args.command, result, config)
        return EXIT_OK
    except StageError as exc:
        cause = exc.cause
        print(f"error: {exc}", file=sys.stderr)
        if isinstance(cause, _VALIDATION_ERRORS):
            return EXIT_VALIDATION
        if isinstance(cause, _PROVIDER_ERRORS):
            return EXIT_PROVIDER
        return EXIT_CONFIG
    except _VALIDATION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except _PROVIDER_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PROVIDER
    except _CONFIG_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
