#!/usr/bin/env python3
"""
Deep Researcher - sequential plan, search and reflect research agent
"""

import difflib
import json
import logging
import sys
import tempfile
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

import click
from rich.console import Console
from rich.logging import RichHandler
from rich.markup import escape
from rich.panel import Panel
from rich.table import Table

from src import context_store
from src.config import (
    AppConfig,
    RunManifest,
    apply_overrides,
    candidate_schedule,
    load_config,
    load_environment,
    require_credential,
)
from src.context_store import ContextStore
from src.errors import ConfigError, DeepResearcherError, PersistenceError
from src.llm_gateway import ChatProvider, GeminiCliProvider, HttpChatProvider, LLMGateway, ScriptedProvider
from src.models import GlobalResearchContext, TerminationReason
from src.orchestrator import Dependencies, EventLog, Orchestrator, RunResult, save_run_record
from src.planner import Planner
from src.prompts import PromptLibrary
from src.report_writer import ReportWriter
from src.run_log import RunLog
from src.search_client import FixtureBackend, SearchBackend, SearchClient, TavilyBackend
from src.searcher import Searcher

console = Console()
logger = logging.getLogger(__name__)

PROVIDERS = ("live", "gemini-cli", "fixtures", "scripted")
EXIT_OK, EXIT_CONFIG, EXIT_ABORTED = 0, 1, 2


def setup_logging(debug: bool = False, quiet: bool = False):
    level = logging.DEBUG if debug else logging.WARNING if quiet else logging.INFO
    logging.basicConfig(
        level=level,
        format="%(message)s",
        datefmt="[%X]",
        handlers=[RichHandler(console=Console(stderr=True), show_path=debug, rich_tracebacks=debug)],
        force=True,
    )
    # httpx logs every request at INFO
    logging.getLogger("httpx").setLevel(logging.WARNING)


def ensure_writable(out_dir: Path):
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        with tempfile.NamedTemporaryFile(dir=out_dir, prefix=".probe-"):
            pass
    except OSError as e:
        raise ConfigError(f"output directory {out_dir} is not writable: {e}")


def build_provider(manifest: RunManifest) -> ChatProvider:
    llm = manifest.config.llm
    if manifest.provider == "scripted":
        if not manifest.script:
            raise ConfigError("--script is required with --provider scripted")
        try:
            return ScriptedProvider.from_file(manifest.script)
        except (OSError, ValueError, KeyError) as e:
            raise ConfigError(f"cannot load script {manifest.script}: {e}")
    if manifest.provider == "gemini-cli":
        provider = GeminiCliProvider(llm.gemini_command, model=llm.model, timeout=llm.timeout_seconds)
        if not provider.check_available():
            raise ConfigError(f"Gemini CLI '{llm.gemini_command}' is not available")
        return provider
    return HttpChatProvider(
        base_url=llm.base_url,
        model=llm.model,
        api_key=require_credential(llm.api_key_env),
        supports_top_k=llm.supports_top_k,
        timeout=llm.timeout_seconds,
    )


def build_search_backend(manifest: RunManifest) -> SearchBackend:
    search = manifest.config.search
    if manifest.provider in ("fixtures", "scripted"):
        if not manifest.fixtures_dir:
            raise ConfigError(f"--fixtures-dir is required with --provider {manifest.provider}")
        return FixtureBackend(manifest.fixtures_dir)
    return TavilyBackend(
        api_key=require_credential(search.api_key_env),
        endpoint=search.endpoint,
        search_depth=search.search_depth,
        timeout=search.timeout_seconds,
        attempts=search.transport_attempts,
        backoff_multiplier=search.backoff_multiplier,
    )


def build_orchestrator(manifest: RunManifest) -> Tuple[Orchestrator, LLMGateway, SearchClient]:
    """Wire every agent from a manifest; credentials and templates are checked here, before any call"""
    config = manifest.config
    prompts = PromptLibrary(config.prompts_dir)
    prompts.validate()

    # resolve both credentials before opening any client
    provider = build_provider(manifest)
    try:
        search_client = SearchClient(build_search_backend(manifest))
    except DeepResearcherError:
        provider.close()
        raise

    llm = config.llm
    gateway = LLMGateway(
        provider,
        run_log=RunLog(manifest.run_log_path),
        transport_attempts=llm.transport_attempts,
        backoff_multiplier=llm.backoff_multiplier,
        max_repair_attempts=llm.max_repair_attempts,
    )
    orch_cfg = config.orchestrator
    deps = Dependencies(
        planner=Planner(gateway, prompts, orch_cfg.context_budget, max_output_tokens=llm.max_output_tokens),
        searcher=Searcher(
            gateway, search_client, prompts, orch_cfg.context_budget,
            excerpt_char_cap=config.excerpt_char_cap,
            parallel_candidates=config.parallel_candidates,
            max_output_tokens=llm.max_output_tokens,
        ),
        report_writer=ReportWriter(gateway, prompts, max_output_tokens=llm.report_max_output_tokens),
        store=ContextStore(manifest.context_path),
        event_log=EventLog(manifest.events_path),
    )
    return Orchestrator(orch_cfg, deps), gateway, search_client


def skip_consumed_script(provider: ScriptedProvider, manifest: RunManifest):
    """A resumed scripted run continues after the replies the earlier session consumed"""
    previous = RunLog.load(manifest.run_log_path).records
    skipped = provider.fast_forward(r["tag"] for r in previous for _ in range(max(r.get("attempts", 1), 1)))
    logger.info(f"Skipped {skipped} script entries consumed before the resume")


def write_outputs(result: RunResult, manifest: RunManifest):
    save_run_record(result.record, manifest.out_dir)
    if result.report is not None:
        Path(manifest.report_path).write_text(result.report.render_markdown(), encoding="utf-8")


def show_result(result: RunResult, manifest: RunManifest) -> int:
    record = result.record
    table = Table(title="Research Run")
    table.add_column("Field", style="cyan")
    table.add_column("Value", style="green")
    table.add_row("Run id", record.run_id)
    table.add_row("Iterations", str(record.iterations_completed))
    if record.skipped_iterations:
        table.add_row("Skipped iterations", str(record.skipped_iterations))
    table.add_row("Termination", record.termination_reason.value)
    table.add_row("Final progress", f"{record.final_progress:g}%")
    table.add_row("Trajectories", str(len(result.context.trajectories)))
    table.add_row("Context", str(manifest.context_path))
    if result.report is not None:
        table.add_row("Report", str(manifest.report_path))
    console.print(table)

    if record.termination_reason == TerminationReason.ABORTED_ERROR:
        console.print(f"[bold red]Run aborted: {escape(str(record.error))}[/bold red]")
        return EXIT_ABORTED
    if result.report is None:
        console.print(f"[bold red]No report was produced: {escape(str(record.error))}[/bold red]")
        return EXIT_ABORTED
    if result.report.partial_flag:
        console.print("[yellow]Report is partial: the iteration cap was reached below the threshold[/yellow]")
    console.print("[bold green]✅ Report written[/bold green]")
    return EXIT_OK


def fail(error: Exception, code: int = EXIT_CONFIG):
    console.print(f"[bold red]Error: {escape(str(error))}[/bold red]")
    sys.exit(code)


@click.group()
@click.option('--debug', is_flag=True, help='Enable debug logging')
@click.option('--quiet', is_flag=True, help='Only log warnings and errors')
def cli(debug: bool, quiet: bool):
    """Deep Researcher - sequential plan, search and reflect research agent"""
    setup_logging(debug=debug, quiet=quiet)
    load_environment()


@cli.command()
@click.option('--topic', required=True, help='Research topic')
@click.option('--config', 'config_path', type=click.Path(dir_okay=False), help='JSON config file')
@click.option('--provider', type=click.Choice(PROVIDERS), default='live', show_default=True)
@click.option('--out-dir', type=click.Path(file_okay=False), default='runs', show_default=True)
@click.option('--max-iterations', type=int, help='Cap on research iterations')
@click.option('--threshold', type=float, help='Progress percentage that ends the loop')
@click.option('--candidates', type=int, help='Number of crossover candidates')
@click.option('--fixtures-dir', type=click.Path(file_okay=False), help='Recorded search results')
@click.option('--script', 'script_path', type=click.Path(dir_okay=False), help='LLM script for --provider scripted')
@click.option('--prompts-dir', type=click.Path(file_okay=False), help='Directory of prompt template overrides')
@click.option('--run-id', help='Run identifier (default: random)')
def run(topic: str, config_path: Optional[str], provider: str, out_dir: str, max_iterations: Optional[int],
        threshold: Optional[float], candidates: Optional[int], fixtures_dir: Optional[str],
        script_path: Optional[str], prompts_dir: Optional[str], run_id: Optional[str]):
    """Research a topic end to end and write the report."""
    try:
        config = load_config(config_path)
        crossover = None
        if candidates is not None:
            crossover = candidate_schedule(candidates, config.orchestrator.crossover_cfg.merge_decoding)
        overrides: Dict[str, Any] = {
            "orchestrator.max_iterations": max_iterations,
            "orchestrator.progress_threshold": threshold,
            "orchestrator.crossover_cfg": crossover,
            "prompts_dir": str(Path(prompts_dir).resolve()) if prompts_dir else None,
        }
        config = apply_overrides(config, overrides)
        if not topic.strip():
            raise ConfigError("--topic must not be empty")

        run_dir = Path(out_dir)
        ensure_writable(run_dir)
        manifest = RunManifest.create(
            topic=topic,
            provider=provider,
            config=config,
            out_dir=run_dir,
            script=script_path,
            fixtures_dir=fixtures_dir,
            run_id=run_id,
        )
        orchestrator, gateway, search_client = build_orchestrator(manifest)
        manifest.save()
    except DeepResearcherError as e:
        fail(e)

    console.print(f"[bold green]🔎 Researching:[/bold green] {escape(topic)}")
    try:
        result = orchestrator.run(topic, run_id=manifest.run_id)
        write_outputs(result, manifest)
    except DeepResearcherError as e:
        fail(e, EXIT_ABORTED)
    finally:
        gateway.close()
        search_client.close()
    sys.exit(show_result(result, manifest))


@cli.command()
@click.argument('context_path', type=click.Path(dir_okay=False))
def resume(context_path: str):
    """Continue an interrupted run from its context file."""
    try:
        ctx = context_store.load(context_path)
        manifest = RunManifest.load(Path(context_path).parent)
        orchestrator, gateway, search_client = build_orchestrator(manifest)
        state = orchestrator.resume(ctx)
        if isinstance(gateway.provider, ScriptedProvider):
            skip_consumed_script(gateway.provider, manifest)
    except DeepResearcherError as e:
        fail(e)

    console.print(f"[bold green]🔁 Resuming run {ctx.run_id}[/bold green]")
    try:
        result = orchestrator.drive(state)
        write_outputs(result, manifest)
    except DeepResearcherError as e:
        fail(e, EXIT_ABORTED)
    finally:
        gateway.close()
        search_client.close()
    sys.exit(show_result(result, manifest))


def plan_diff(before: str, after: str) -> str:
    lines = difflib.unified_diff(before.splitlines(), after.splitlines(), lineterm="", n=0)
    return "\n".join(line for line in lines if not line.startswith(("---", "+++", "@@")))


def _clip(text: str, width: int = 100) -> str:
    text = " ".join(text.split())
    return escape(text if len(text) <= width else text[:width - 1] + "…")


def show_context(ctx: GlobalResearchContext):
    checkpoint = ctx.checkpoint
    console.print(Panel(
        f"[bold]{escape(ctx.topic)}[/bold]\n"
        f"Run {ctx.run_id} · next stage {checkpoint.next_stage.value} · "
        f"{checkpoint.iterations_completed} iterations · {len(ctx.trajectories)} trajectories"
        + (f" · {checkpoint.termination_reason.value}" if checkpoint.termination_reason else ""),
        title="📚 Research Context",
    ))

    for previous, current in zip(ctx.plan_versions, ctx.plan_versions[1:]):
        diff = plan_diff(previous.plan.render(), current.plan.render())
        console.print(Panel(escape(diff) or "(no textual change)",
                            title=f"Plan diff v{previous.plan.version} → v{current.plan.version}",
                            subtitle=_clip(current.reason, 80)))
    if ctx.plan_versions:
        latest = ctx.plan_versions[-1].plan
        console.print(Panel(escape(latest.render()), title=f"Plan v{latest.version}"))

    if ctx.trajectories:
        table = Table(title="Trajectories")
        table.add_column("#", style="dim")
        table.add_column("Query", style="cyan")
        table.add_column("Answer", style="green")
        table.add_column("Sources", justify="right")
        table.add_column("Flags", style="yellow")
        for t in ctx.trajectories:
            flags = []
            if t.low_confidence:
                flags.append("low confidence")
            if t.synthesized_answer and t.synthesized_answer.merge_fallback:
                flags.append("merge fallback")
            table.add_row(str(t.seq_no), escape(t.query.text),
                          _clip(t.synthesized_answer.text if t.synthesized_answer else ""),
                          str(len(t.artifacts)), ", ".join(flags))
        console.print(table)

    if ctx.progress_history:
        table = Table(title="Progress")
        table.add_column("Iteration", style="dim")
        table.add_column("Percent", style="green", justify="right")
        table.add_column("Rationale")
        for index, assessment in enumerate(ctx.progress_history, start=1):
            table.add_row(str(index), f"{assessment.percent:g}%", _clip(assessment.rationale, 80))
        console.print(table)


def show_calls(run_log: RunLog):
    stats = run_log.get_stats()
    if not stats["total_calls"]:
        console.print("[yellow]No LLM calls recorded for this run[/yellow]")
        return
    console.print(f"Total LLM calls: [green]{stats['total_calls']}[/green] · "
                  f"repairs: {stats['repair_calls']} · latency: {stats['total_elapsed_ms'] / 1000:.1f}s")
    table = Table(title="Calls by Tag")
    table.add_column("Tag", style="cyan")
    table.add_column("Calls", style="green", justify="right")
    for tag, count in stats["calls_by_tag"].items():
        table.add_row(tag, str(count))
    console.print(table)
    if stats["dropped_params"]:
        dropped = ", ".join(f"{p} ({n})" for p, n in stats["dropped_params"].items())
        console.print(f"[yellow]Unsupported, dropped: {dropped}[/yellow]")


@cli.command()
@click.argument('context_path', type=click.Path(dir_okay=False))
@click.option('--calls', is_flag=True, help='Also show LLM call statistics')
def inspect(context_path: str, calls: bool):
    """Summarize a stored research context."""
    try:
        ctx = context_store.load(context_path)
    except PersistenceError as e:
        fail(e)
    show_context(ctx)
    if calls:
        run_dir = Path(context_path).parent
        try:
            log_path = RunManifest.load(run_dir).run_log_path
        except ConfigError:
            log_path = run_dir / "calls.jsonl"
        show_calls(RunLog.load(log_path))


@cli.command(name="config")
@click.option('--config', 'config_path', type=click.Path(dir_okay=False), help='JSON config file')
@click.option('--write', 'write_path', type=click.Path(dir_okay=False), help='Write the default config here')
def show_config(config_path: Optional[str], write_path: Optional[str]):
    """Print the effective configuration, or write a default config file."""
    if write_path:
        path = Path(write_path)
        if path.exists():
            fail(ConfigError(f"{path} already exists"))
        path.write_text(json.dumps(AppConfig().model_dump(mode="json"), indent=2) + "\n", encoding="utf-8")
        console.print(f"[green]Default config written to {path}[/green]")
        return
    try:
        config = load_config(config_path)
    except ConfigError as e:
        fail(e)
    console.print_json(json.dumps(config.model_dump(mode="json")))


def main():
    """Entry point for the CLI"""
    try:
        cli.main(standalone_mode=False)
    except click.exceptions.Abort:
        console.print("\n[bold red]Interrupted[/bold red]")
        sys.exit(EXIT_ABORTED)
    except click.ClickException as e:
        # usage errors share the config exit code
        e.show()
        sys.exit(EXIT_CONFIG)


if __name__ == "__main__":
    main()
