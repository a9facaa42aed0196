import hashlib
import sys
from functools import wraps
from pathlib import Path

import click
import pandas as pd
from pydantic import ValidationError

from apis.schemas.config import RunConfig, load_config
from domain.models import AttestationPolicy, TamperKind, TamperSpec, Verdict
from infraestructure.key_material import KeyMaterialError, KeyMaterialManager
from infraestructure.logging_setup import get_logger, setup_file_logger
from model.shapes import REFERENCE_SHAPES, reference_shape
from model.transformer import init_model
from numkit.counting import InvalidCountError
from numkit.rng import SeededRng
from pipeline.attacks.forgery import forgery_attack
from pipeline.attacks.partial import evasion_convergence, partial_tamper
from pipeline.attacks.replacement import replacement_attack
from pipeline.attacks.tamper import ArchitectureMismatchError
from pipeline.attest.analysis import (
    Deployment,
    breakdown_rows,
    evasion_probability,
    interval_sweep,
    nominal_round,
    pipeline_comparison,
    sample_sweep,
    security_table,
)
from pipeline.attest.session_pipeline import run_session
from pipeline.watermark.embed_pipeline import WatermarkEmbeddingPipeline, histogram_rows, make_trigger_set
from pipeline.watermark.errors import EmbeddingError
from pipeline.watermark.fidelity import fidelity_report, run_ablation
from repo.bundle_repo import BundleFormatError, BundleRepo
from repo.key_store_repo import KeyStoreAuthenticationError, KeyStoreFormatError, KeyStoreRepo
from repo.report_repo import ReportRepo

logger = get_logger(__name__)

EXIT_PASS = 0
EXIT_USAGE = 1
EXIT_ABORT = 2
EXIT_AUTH = 3
EXIT_EMBEDDING = 4

HISTORY_FILE = "history.jsonl"
# one file per row schema, so appended runs never mix columns
SECURITY_CSV = "security.csv"
PRESET_SECURITY_CSV = "security_presets.csv"
EVASION_CSV = "evasion.csv"
CONVERGENCE_CSV = "evasion_convergence.csv"


def model_id_for(seed: int) -> bytes:
    return hashlib.sha256(f"attest-toy-model:{seed}".encode("ascii")).digest()[:16]


def int_list(raw: str) -> list[int]:
    try:
        return [int(value) for value in raw.split(",") if value.strip()]
    except ValueError:
        raise click.BadParameter(f"expected comma-separated integers, got '{raw}'") from None


def override(config: RunConfig, section: str, **values) -> RunConfig:
    """Re-validated copy of `config` with the non-None flag values set on `section`."""
    values = {name: value for name, value in values.items() if value is not None}
    if not values:
        return config
    raw = config.model_dump()
    raw[section].update(values)
    return RunConfig.model_validate(raw)


def exit_codes(command):
    """Map domain failures to the CLI's exit codes."""

    @wraps(command)
    def wrapper(*args, **kwargs):
        ctx = click.get_current_context()
        try:
            code = command(*args, **kwargs)
        except KeyStoreAuthenticationError as e:
            logger.error("Key store authentication failed: %s", e)
            ctx.exit(EXIT_AUTH)
        except EmbeddingError as e:
            logger.error(str(e))
            ctx.exit(EXIT_EMBEDDING)
        except (
            ValidationError,
            InvalidCountError,
            KeyMaterialError,
            KeyStoreFormatError,
            BundleFormatError,
            ArchitectureMismatchError,
            ValueError,
            OSError,
        ) as e:
            logger.error("%s: %s", type(e).__name__, e)
            ctx.exit(EXIT_USAGE)
        if code:
            ctx.exit(code)
        return code

    return wrapper


class AttestGroup(click.Group):
    def invoke(self, ctx):
        try:
            return super().invoke(ctx)
        except click.UsageError as e:
            e.exit_code = EXIT_USAGE
            raise


class CliContext:
    def __init__(self, config: RunConfig, out_dir: Path, jobs: int):
        self.config = config
        self.out_dir = out_dir
        self.jobs = jobs
        self.reports = ReportRepo()

    @property
    def bundle_path(self) -> Path:
        return self.out_dir / self.config.paths.bundle

    @property
    def key_store_path(self) -> Path:
        return self.out_dir / self.config.paths.key_store

    def history(self, command: str, summary: dict) -> None:
        self.reports.append_history(self.out_dir / HISTORY_FILE, command, summary)


pass_cli = click.make_pass_decorator(CliContext)


@click.group(cls=AttestGroup)
@click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None, help="YAML run configuration.")
@click.option("--out", "out_dir", type=click.Path(file_okay=False), default=None, help="Output directory.")
@click.option("--jobs", type=click.IntRange(min=1), default=1, help="Worker cap for embedding and attacks.")
@click.pass_context
def cli(ctx, config_path, out_dir, jobs):
    """Watermark a toy transformer and attest it in a simulated secure world."""
    try:
        config = load_config(config_path)
    except (OSError, ValidationError, ValueError) as e:
        raise click.UsageError(f"cannot load config: {e}") from e
    out_dir = Path(out_dir or config.paths.out_dir)
    setup_file_logger(out_dir / config.paths.log)
    ctx.obj = CliContext(config, out_dir, jobs)


@cli.command()
@click.option("--out", "key_path", type=click.Path(dir_okay=False), required=True, help="Key file to create.")
@exit_codes
def keygen(key_path):
    """Write a fresh 256-bit key-store key, hex encoded."""
    path = KeyMaterialManager.generate(key_path)
    click.echo(f"Key written to {path}")
    return EXIT_PASS


@cli.command()
@click.option("--bits", type=click.Choice(["4", "8"]), default=None)
@click.option("--seed", type=int, default=None, help="Watermark seed.")
@click.option("--signature-bits", type=int, default=None, help="Total signature budget |B|.")
@click.option("--stages", type=click.Choice(["two_stage", "pre_only", "post_only"]), default=None)
@click.option("--key-file", type=click.Path(dir_okay=False), default=None)
@pass_cli
@exit_codes
def embed(app: CliContext, bits, seed, signature_bits, stages, key_file):
    """Watermark a toy model, then write the bundle and its sealed key store."""
    config = override(
        app.config,
        "watermark",
        bits=int(bits) if bits else None,
        signature_bits=signature_bits,
        stages=stages,
    )
    config = override(config, "seeds", watermark=seed)
    key = KeyMaterialManager(key_file).key
    wm = config.watermark
    shape = config.model.to_shape()

    model = init_model(shape, SeededRng(config.seeds.model))
    trigger = make_trigger_set(config.seeds.trigger, wm.trigger_count, wm.trigger_length, shape.vocab)
    result = WatermarkEmbeddingPipeline(wm, seed=config.seeds.watermark, jobs=app.jobs).run(model, trigger)

    bundles = BundleRepo()
    key_stores = KeyStoreRepo(key)
    try:
        manifest = bundles.save(result.model, app.bundle_path, model_id_for(config.seeds.model))
        key_stores.save(result.key_store(manifest.identity_sha256), app.key_store_path)
    except Exception:
        bundles.remove(app.bundle_path)
        key_stores.remove(app.key_store_path)
        raise

    rows = [report.row() for report in result.reports]
    click.echo(pd.DataFrame(rows).to_string(index=False))
    if result.signature.total_bits == 0:
        click.echo("Signature budget is 0 bits: nothing embedded")
    else:
        click.echo(pd.DataFrame(histogram_rows(result)).to_string(index=False))

    holdout = make_trigger_set(config.seeds.holdout, wm.holdout_count, wm.trigger_length, shape.vocab)
    fidelity = fidelity_report(model, result.model, holdout.tokens)
    click.echo(
        f"Fidelity: quantization {fidelity.quantization_deviation:.4g}, watermark {fidelity.watermark_deviation:.4g}"
    )

    app.reports.append_csv_rows(app.out_dir / "embedding.csv", rows)
    app.history(
        "embed",
        {
            "bundle": str(app.bundle_path),
            "identity_sha256": manifest.identity_sha256,
            "signature_bits": result.signature.total_bits,
            "min_wer": min((r.wer_final for r in result.reports), default=100.0),
        },
    )
    return EXIT_PASS


def session_policy(config: RunConfig, interval, samples, mode, workers) -> tuple[RunConfig, AttestationPolicy]:
    config = override(config, "policy", interval=interval, samples=samples, mode=mode, workers=workers)
    return config, config.attestation_policy()


@cli.command()
@click.option("--bundle", type=click.Path(dir_okay=False), default=None)
@click.option("--keys", type=click.Path(dir_okay=False), default=None)
@click.option("--key-file", type=click.Path(dir_okay=False), default=None)
@click.option("--f", "interval", type=int, default=None, help="Attestation interval in tokens.")
@click.option("--k", "samples", type=int, default=None, help="Blocks sampled per round.")
@click.option("--tokens", type=int, default=None)
@click.option("--mode", type=click.Choice(["sequential", "overlapped"]), default=None)
@click.option("--workers", type=int, default=None)
@click.option("--seed", type=int, default=None, help="Sampling seed.")
@click.option("--tamper", "tamper_t", type=int, default=None, help="Replace t blocks before attesting.")
@click.option("--single-round", is_flag=True, default=False)
@click.option("--report", "report_path", type=click.Path(dir_okay=False), default=None)
@pass_cli
@exit_codes
def attest(app: CliContext, bundle, keys, key_file, interval, samples, tokens, mode, workers, seed, tamper_t,
           single_round, report_path):
    """Run an attestation session; exit 0 on pass, 2 on abort."""
    config, policy = session_policy(app.config, interval, samples, mode, workers)
    seed = seed if seed is not None else config.seeds.attest
    tokens = tokens if tokens is not None else config.policy.tokens
    tamper = TamperSpec(kind=TamperKind.REPLACE_BLOCKS, count=tamper_t, seed=seed) if tamper_t else None

    report = run_session(
        Path(bundle or app.bundle_path),
        Path(keys or app.key_store_path),
        KeyMaterialManager(key_file).key,
        policy,
        config.cost_model.to_domain(),
        tokens,
        tamper=tamper,
        rng=SeededRng(seed),
        single_round=single_round,
    )
    path = app.reports.write_report(report, report_path or app.out_dir / "report.json")
    click.echo(
        f"Verdict: {report.verdict.value} after {len(report.rounds)} rounds, "
        f"overhead {report.overhead_pct:.2f}%, report {path}"
    )
    app.history("attest", {"verdict": report.verdict.value, "report_sha256": report.report_hash})
    return EXIT_PASS if report.verdict is Verdict.PASS else EXIT_ABORT


@cli.command()
@click.option("--L", "blocks", type=int, default=None, help="Blocks in the model.")
@click.option("--k", "samples", type=int, default=None)
@click.option("--t", "tampered", type=int, default=1, show_default=True)
@click.option("--f", "interval", type=int, default=None)
@click.option("--m", "tokens", type=int, default=None, help="Tokens in one conversation.")
@click.option("--sessions", type=int, default=1, show_default=True)
@click.option("--preset", type=click.Choice(sorted(REFERENCE_SHAPES)), default=None)
@click.option("--all-presets", is_flag=True, default=False)
@pass_cli
@exit_codes
def analyze(app: CliContext, blocks, samples, tampered, interval, tokens, sessions, preset, all_presets):
    """Analytic evasion probability of t tampered blocks."""
    config = app.config
    interval = interval if interval is not None else config.policy.interval
    tokens = tokens if tokens is not None else config.policy.tokens
    if interval < 1:
        raise InvalidCountError(f"interval must be >= 1, got {interval}")
    if sessions < 1:
        raise InvalidCountError(f"sessions must be >= 1, got {sessions}")

    if all_presets:
        rows = security_table(interval, tokens, tampered)
        for row in rows:
            row["sessions"] = sessions
            row["evasion_sessions"] = row["evasion"] ** sessions
        click.echo(pd.DataFrame(rows).to_string(index=False))
        app.reports.append_csv_rows(app.out_dir / PRESET_SECURITY_CSV, rows)
        return EXIT_PASS

    if preset:
        shape = reference_shape(preset)
        blocks, samples = shape.blocks, shape.attest_samples
    blocks = blocks if blocks is not None else config.model.blocks
    samples = samples if samples is not None else config.policy.samples
    rounds = tokens // interval

    single = evasion_probability(blocks, samples, tampered, 1)
    evasion = evasion_probability(blocks, samples, tampered, rounds) ** sessions
    click.echo(f"L={blocks} k={samples} t={tampered} rounds={rounds} sessions={sessions}")
    click.echo(f"single-round miss: {single:.4e}")
    click.echo(f"evasion probability: {evasion:.4e}")
    app.reports.append_csv_rows(
        app.out_dir / SECURITY_CSV,
        [{"L": blocks, "k": samples, "t": tampered, "rounds": rounds, "sessions": sessions, "evasion": evasion}],
    )
    return EXIT_PASS


@cli.command()
@click.option("--f-sweep", "intervals", default="50,100,200,500", show_default=True)
@click.option("--k-sweep", "sample_counts", default="1,2,4,6", show_default=True)
@click.option("--tokens", type=int, default=None)
@click.option("--preset", type=click.Choice(sorted(REFERENCE_SHAPES)), default=None)
@click.option("--mode", type=click.Choice(["sequential", "overlapped"]), default=None)
@pass_cli
@exit_codes
def simulate(app: CliContext, intervals, sample_counts, tokens, preset, mode):
    """Overhead sweeps, stage breakdown and pipeline on/off comparison from the cost model."""
    config = app.config
    shape = None
    if preset:
        reference = reference_shape(preset)
        shape = reference.toy(heads=config.model.heads, vocab=config.model.vocab)
        config = override(config, "model", blocks=shape.blocks, hidden=shape.hidden, ffn=shape.ffn)
        config = override(config, "policy", samples=reference.attest_samples)
    config, policy = session_policy(config, None, None, mode, None)
    tokens = tokens if tokens is not None else config.policy.tokens
    cost_model = config.cost_model.to_domain()
    deployment = Deployment.from_config(config, shape)

    sweep = interval_sweep(deployment, policy, cost_model, tokens, int_list(intervals))
    sweep += sample_sweep(
        deployment, policy, cost_model, tokens, [k for k in int_list(sample_counts) if k <= policy.blocks]
    )
    schedule = nominal_round(deployment, policy, cost_model)
    breakdown = breakdown_rows(schedule)
    comparison = pipeline_comparison(
        policy, cost_model, deployment.nominal_costs(policy.samples, cost_model), tokens
    ).row()

    click.echo(pd.DataFrame(sweep).to_string(index=False))
    click.echo(pd.DataFrame(breakdown).to_string(index=False))
    click.echo(pd.DataFrame([comparison]).to_string(index=False))

    app.reports.append_csv_rows(app.out_dir / "sweep.csv", sweep)
    app.reports.append_csv_rows(app.out_dir / "breakdown.csv", breakdown)
    app.reports.append_csv_rows(app.out_dir / "pipeline.csv", [comparison])
    app.reports.write_json(
        {"blocks": policy.blocks, "samples": policy.samples, "sweep": sweep, "breakdown": breakdown,
         "pipeline": comparison},
        app.out_dir / "simulation.json",
    )
    return EXIT_PASS


@cli.command()
@click.option(
    "--kind", type=click.Choice(["replacement", "forgery", "partial", "convergence"]), default="replacement"
)
@click.option("--bundle", type=click.Path(dir_okay=False), default=None)
@click.option("--keys", type=click.Path(dir_okay=False), default=None)
@click.option("--key-file", type=click.Path(dir_okay=False), default=None)
@click.option("--tamper", "tamper_t", type=int, default=2, show_default=True)
@click.option("--sessions", type=int, default=20000, show_default=True)
@click.option("--f", "interval", type=int, default=None)
@click.option("--k", "samples", type=int, default=None)
@click.option("--tokens", type=int, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--proxy-steps", type=int, default=3, show_default=True)
@pass_cli
@exit_codes
def attack(app: CliContext, kind, bundle, keys, key_file, tamper_t, sessions, interval, samples, tokens, seed,
           proxy_steps):
    """Run an adversary against the deployment and write its report."""
    config, policy = session_policy(app.config, interval, samples, None, None)
    seed = seed if seed is not None else config.seeds.attest
    tokens = tokens if tokens is not None else config.policy.tokens
    rng = SeededRng(seed)
    bundle_path = Path(bundle or app.bundle_path)
    key_store_path = Path(keys or app.key_store_path)
    key = KeyMaterialManager(key_file).key
    cost_model = config.cost_model.to_domain()
    spec = TamperSpec(kind=TamperKind.REPLACE_BLOCKS, count=tamper_t, seed=seed)

    if kind == "convergence":
        rows = evasion_convergence(bundle_path, key_store_path, key, spec, policy, tokens, rng, jobs=app.jobs)
        click.echo(pd.DataFrame(rows).to_string(index=False))
        app.reports.append_csv_rows(app.out_dir / CONVERGENCE_CSV, rows)
        return EXIT_PASS

    if kind == "replacement":
        report = replacement_attack(
            bundle_path, key_store_path, key, policy, cost_model, tokens, rng, proxy_steps=proxy_steps,
            config=config.watermark,
        )
    elif kind == "forgery":
        report = forgery_attack(
            bundle_path, key_store_path, key, policy, cost_model, tokens, rng, config=config.watermark, jobs=app.jobs
        )
    else:
        result = partial_tamper(
            bundle_path, key_store_path, key, spec, policy, cost_model, tokens, rng, sessions=sessions, jobs=app.jobs
        )
        report = result.report
        app.reports.append_csv_rows(app.out_dir / EVASION_CSV, [result.row()])

    path = app.reports.write_report(report, app.out_dir / f"attack-{kind}.json")
    click.echo(f"{kind} attack: {report.attack}")
    click.echo(f"Report written to {path}")
    app.history(f"attack:{kind}", {"verdict": report.verdict.value, "report_sha256": report.report_hash})
    return EXIT_PASS


@cli.command()
@click.option("--bits", type=click.Choice(["4", "8"]), default=None)
@pass_cli
@exit_codes
def ablate(app: CliContext, bits):
    """Embed the same signature with each stage mode and compare WER and fidelity."""
    config = override(app.config, "watermark", bits=int(bits) if bits else None)
    wm = config.watermark
    shape = config.model.to_shape()
    model = init_model(shape, SeededRng(config.seeds.model))
    trigger = make_trigger_set(config.seeds.trigger, wm.trigger_count, wm.trigger_length, shape.vocab)
    holdout = make_trigger_set(config.seeds.holdout, wm.holdout_count, wm.trigger_length, shape.vocab)
    rows = [
        row.row()
        for row in run_ablation(model, trigger, holdout.tokens, wm, seed=config.seeds.watermark, jobs=app.jobs)
    ]
    click.echo(pd.DataFrame(rows).to_string(index=False))
    app.reports.append_csv_rows(app.out_dir / "ablation.csv", rows)
    return EXIT_PASS


def main(args: list[str] | None = None) -> int:
    try:
        code = cli.main(args=args, prog_name="attest", standalone_mode=False)
    except click.ClickException as e:
        e.show()
        return EXIT_USAGE
    except click.Abort:
        return EXIT_USAGE
    return code if isinstance(code, int) else EXIT_PASS


if __name__ == "__main__":
    sys.exit(main())
