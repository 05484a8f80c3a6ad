use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use flipaudit_core::audit_loop::{apply_patch, verify, LedgerEntry, LoopLedger, PatchRecord};
use flipaudit_core::interventions::{generate_noise_controls, load_swap_pools, SynonymTable};
use flipaudit_core::jsonl::SCHEMA_VERSION;
use flipaudit_core::report::{cmd_report, load_run, verify_run};
use flipaudit_core::rubric::{enumerate_rubric, load_rubrics, save_rubrics, DEFAULT_ENUMERATION_CAP};
use flipaudit_core::run::{
    cmd_run, diagnose_records, read_manifest, read_records, rubric_map, select_pairs, validate_flips, write_json_file,
    RunConfig, RunMode, RunStatus, DIAGNOSIS_FILE,
};
use flipaudit_core::shipped;
use flipaudit_core::validator::{
    CachingProvider, EntailmentProvider, HttpEntailmentProvider, KeywordOverlapStub, RecordedProvider,
};
use flipaudit_core::vignette::{generate_corpus, load_corpus, load_template_specs, save_controls, save_corpus};
use flipaudit_core::{BiasType, Domain, Error};

const EXIT_PARTIAL: u8 = 2;
const EXIT_FAILED: u8 = 1;
const EXIT_USAGE: u8 = 64;

#[derive(Parser)]
#[command(name = "flipaudit", version, about = "Paired-intervention consistency audits for decision models")]
struct Cli {
    /// Log level filter (error, warn, info, debug, trace).
    #[arg(long, global = true, default_value = "info")]
    log: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a vignette pair corpus from templates and swap pools.
    Generate(GenerateArgs),
    /// Generate near-identical control pairs for the noise baseline.
    Controls(ControlsArgs),
    /// Execute the run described by a config file.
    Run(ConfigArgs),
    /// Execute a win-rate run (targeted swaps against random controls).
    Winrate(ConfigArgs),
    /// Execute a structured extract-then-score run.
    Structured(ConfigArgs),
    /// Diagnose, patch and re-verify leaking extraction fields.
    #[command(subcommand)]
    Loop(LoopCommand),
    /// Classify the flips of a free-form run as spurious or reasoned.
    ValidateFlips(ValidateArgs),
    /// Build tables from one or more run directories.
    Report(ReportArgs),
    /// Print every feature combination of a rubric with its decision.
    EnumerateRubric(EnumerateArgs),
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    out: PathBuf,
    /// Template file; the bundled templates are used when absent.
    #[arg(long)]
    templates: Option<PathBuf>,
    /// Swap-pool file; the bundled pools are used when absent.
    #[arg(long)]
    swap_pools: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    domains: Vec<Domain>,
    #[arg(long, value_delimiter = ',')]
    bias_types: Vec<BiasType>,
    #[arg(long, default_value_t = 10)]
    n_per_area: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ControlsArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_delimiter = ',')]
    domains: Vec<Domain>,
    /// Control pairs per domain.
    #[arg(long, default_value_t = 30)]
    per_domain: usize,
    /// Synonym file; the bundled table is used when absent.
    #[arg(long)]
    synonyms: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML run configuration.
    config: PathBuf,
}

#[derive(Subcommand)]
enum LoopCommand {
    /// Localize the extraction fields behind structured flips of a run.
    Diagnose {
        /// A structured or loop run directory.
        run: PathBuf,
        #[arg(long)]
        rubrics: Option<PathBuf>,
    },
    /// Append a patch to one domain's extraction prompt.
    Patch(PatchArgs),
    /// Re-run the same pairs under the patched rubric and compare.
    Verify(VerifyArgs),
}

#[derive(Args)]
struct PatchArgs {
    #[arg(long)]
    domain: Domain,
    /// Rubric file to patch; the shipped set is used when absent.
    #[arg(long)]
    rubrics: Option<PathBuf>,
    /// Where the patched rubric set is written.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_delimiter = ',', required = true)]
    fields: Vec<String>,
    /// Hand-written patch text.
    #[arg(long, conflicts_with_all = ["markers", "evidence"])]
    text: Option<String>,
    /// Bias markers for a templated patch.
    #[arg(long, value_delimiter = ',')]
    markers: Vec<String>,
    /// Evidence phrase for a templated patch.
    #[arg(long)]
    evidence: Option<String>,
    #[arg(long)]
    ledger: PathBuf,
}

#[derive(Args)]
struct VerifyArgs {
    /// Run config supplying corpus, endpoints and sample size.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    domain: Domain,
    #[arg(long)]
    before: Option<PathBuf>,
    #[arg(long)]
    after: PathBuf,
    /// Free-form flip rate for the cumulative reduction, as a fraction.
    #[arg(long)]
    free_form_rate: Option<f64>,
    #[arg(long, default_value_t = 1)]
    iteration: u32,
    #[arg(long)]
    ledger: PathBuf,
}

#[derive(Args)]
struct ValidateArgs {
    /// A free-form run directory.
    run: PathBuf,
    /// Entailment service base URL.
    #[arg(long, conflicts_with = "recorded")]
    entailment_url: Option<String>,
    /// JSONL of recorded verdicts.
    #[arg(long)]
    recorded: Option<PathBuf>,
    /// Model tier assignments, e.g. `model-a=frontier`.
    #[arg(long, value_delimiter = ',')]
    tiers: Vec<String>,
    #[arg(long, default_value_t = 4)]
    parallelism: usize,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(required = true)]
    runs: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Recompute every stored cell from the records and report differences.
    #[arg(long)]
    verify_report: bool,
}

#[derive(Args)]
struct EnumerateArgs {
    #[arg(long)]
    domain: Domain,
    #[arg(long)]
    rubrics: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_ENUMERATION_CAP)]
    cap: usize,
}

/// A failure that should exit with the usage code.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if e.use_stderr() => {
            let _ = e.print();
            return ExitCode::from(EXIT_USAGE);
        }
        Err(e) => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
    };
    env_logger::Builder::new().parse_filters(&cli.log).init();
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<Usage>().is_some() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::from(EXIT_FAILED)
            }
        }
    }
}

fn dispatch(command: Command) -> Result<ExitCode> {
    match command {
        Command::Generate(a) => generate(a),
        Command::Controls(a) => controls(a),
        Command::Run(a) => run(&a.config, None),
        Command::Winrate(a) => run(&a.config, Some(RunMode::Winrate)),
        Command::Structured(a) => run(&a.config, Some(RunMode::Structured)),
        Command::Loop(LoopCommand::Diagnose { run, rubrics }) => loop_diagnose(&run, rubrics.as_deref()),
        Command::Loop(LoopCommand::Patch(a)) => loop_patch(a),
        Command::Loop(LoopCommand::Verify(a)) => loop_verify(a),
        Command::ValidateFlips(a) => validate(a),
        Command::Report(a) => report(a),
        Command::EnumerateRubric(a) => enumerate(a),
    }
}

fn or_all<T: Copy>(given: Vec<T>, all: &[T]) -> Vec<T> {
    if given.is_empty() {
        all.to_vec()
    } else {
        given
    }
}

fn generate(a: GenerateArgs) -> Result<ExitCode> {
    let specs = match &a.templates {
        Some(p) => load_template_specs(p)?,
        None => shipped::templates()?,
    };
    let pools = match &a.swap_pools {
        Some(p) => load_swap_pools(p)?,
        None => shipped::swap_pools()?,
    };
    let domains = or_all(a.domains, &Domain::ALL);
    let biases = or_all(a.bias_types, &BiasType::ALL);
    let pairs = generate_corpus(&specs, &pools, &domains, &biases, a.n_per_area, a.seed)?;
    save_corpus(&a.out, &pairs)?;
    println!("wrote {} pairs to {}", pairs.len(), a.out.display());
    Ok(ExitCode::SUCCESS)
}

fn controls(a: ControlsArgs) -> Result<ExitCode> {
    let corpus = load_corpus(&a.corpus, SCHEMA_VERSION)?;
    let synonyms = match &a.synonyms {
        Some(p) => SynonymTable::load(p)?,
        None => shipped::synonyms()?,
    };
    let domains = or_all(a.domains, &Domain::ALL);
    let pairs = generate_noise_controls(&corpus, &domains, a.per_domain, &synonyms, a.seed)?;
    save_controls(&a.out, &pairs)?;
    println!("wrote {} control pairs to {}", pairs.len(), a.out.display());
    Ok(ExitCode::SUCCESS)
}

fn load_config(path: &Path, mode: Option<RunMode>) -> Result<RunConfig> {
    let mut config = RunConfig::load(path).map_err(|e| Usage(e.to_string()))?;
    if let Some(m) = mode {
        config.mode = m;
    }
    config.validate().map_err(|e| Usage(format!("{}: {e}", path.display())))?;
    Ok(config)
}

fn run(path: &Path, mode: Option<RunMode>) -> Result<ExitCode> {
    let config = load_config(path, mode)?;
    let outcome = cmd_run(&config)?;
    let m = &outcome.manifest;
    println!("{}", outcome.dir.display());
    println!(
        "{} prompts issued, {} failed pairs, status {}",
        m.prompts_issued,
        m.failures,
        match m.status {
            RunStatus::Clean => "clean",
            RunStatus::Partial => "partial",
        }
    );
    for c in m.cells.iter().filter(|c| c.shortfall > 0) {
        println!(
            "shortfall {}/{}: {} of {} requested pairs",
            c.domain, c.bias_type, c.available, c.requested
        );
    }
    Ok(match m.status {
        RunStatus::Clean => ExitCode::SUCCESS,
        RunStatus::Partial => ExitCode::from(EXIT_PARTIAL),
    })
}

fn loop_diagnose(dir: &Path, rubrics: Option<&Path>) -> Result<ExitCode> {
    let manifest = read_manifest(dir)?;
    if !matches!(manifest.mode, RunMode::Structured | RunMode::Loop) {
        bail!(Usage(format!("{} is a {} run, not a structured one", dir.display(), manifest.mode)));
    }
    let rubrics = rubric_map(rubrics.or(manifest.config.rubrics.as_deref()))?;
    let entries = diagnose_records(&read_records(dir)?, &rubrics)?;
    for e in &entries {
        println!("{} {} ({}): {} flips", e.model, e.domain, e.schema_id, e.diagnosis.diagnoses.len());
        for leak in &e.diagnosis.leak_table {
            println!("  {:<24} differing in {:>4} flips, decisive in {:>4}", leak.field, leak.flips, leak.decisive);
        }
    }
    write_json_file(&dir.join(DIAGNOSIS_FILE), &entries)?;
    Ok(ExitCode::SUCCESS)
}

fn load_rubric_list(path: Option<&Path>) -> Result<Vec<flipaudit_core::rubric::RubricSpec>> {
    Ok(match path {
        Some(p) => load_rubrics(p)?,
        None => flipaudit_core::rubric::shipped_rubrics()?,
    })
}

fn loop_patch(a: PatchArgs) -> Result<ExitCode> {
    let mut list = load_rubric_list(a.rubrics.as_deref())?;
    let idx = list
        .iter()
        .position(|r| r.domain == a.domain)
        .with_context(|| format!("no rubric for {}", a.domain))?;
    let patch = match (&a.text, &a.evidence) {
        (Some(text), _) => PatchRecord::human(&list[idx], &a.fields, text),
        (None, Some(evidence)) => PatchRecord::templated(&list[idx], &a.fields, &a.markers, evidence),
        (None, None) => bail!(Usage("either --text or --evidence is required".into())),
    };
    list[idx] = apply_patch(&list[idx], &patch)?;
    save_rubrics(&a.out, &list)?;
    LoopLedger::new(&a.ledger).append(&LedgerEntry::Patch(patch.clone()))?;
    println!(
        "{} prompt version {} -> {}: {}",
        patch.schema_id, patch.prompt_version_from, patch.prompt_version_to, patch.patch_text
    );
    Ok(ExitCode::SUCCESS)
}

fn loop_verify(a: VerifyArgs) -> Result<ExitCode> {
    let config = load_config(&a.config, Some(RunMode::Loop))?;
    let before = rubric_map(a.before.as_deref().or(config.rubrics.as_deref()))?;
    let after = rubric_map(Some(&a.after))?;
    let (rb, ra) = match (before.get(&a.domain), after.get(&a.domain)) {
        (Some(b), Some(r)) => (b, r),
        _ => bail!("both rubric sets need a rubric for {}", a.domain),
    };
    let corpus = load_corpus(&config.corpus, SCHEMA_VERSION)?;
    let (pairs, _) = select_pairs(&corpus, &[a.domain], &config.bias_types, config.n_per_area);
    let ledger = LoopLedger::new(&a.ledger);
    for model in config.build_models()? {
        let v = verify(&pairs, model.as_ref(), rb, ra, a.free_form_rate, a.iteration, config.parallelism)?;
        println!("{}: {}", model.name(), v.report.summary());
        ledger.append(&LedgerEntry::Report(v.report))?;
    }
    ledger.audit()?;
    Ok(ExitCode::SUCCESS)
}

fn parse_tiers(items: &[String]) -> Result<BTreeMap<String, String>> {
    items
        .iter()
        .map(|s| match s.split_once('=') {
            Some((m, t)) if !m.is_empty() && !t.is_empty() => Ok((m.to_owned(), t.to_owned())),
            _ => bail!(Usage(format!("tier `{s}` is not of the form model=tier"))),
        })
        .collect()
}

fn validate(a: ValidateArgs) -> Result<ExitCode> {
    let manifest = read_manifest(&a.run)?;
    if !matches!(manifest.mode, RunMode::Freeform | RunMode::Validate) {
        bail!(Usage(format!("{} is a {} run, not a free-form one", a.run.display(), manifest.mode)));
    }
    let mut tiers = manifest.config.model_tiers.clone();
    tiers.extend(parse_tiers(&a.tiers)?);
    let provider: Box<dyn EntailmentProvider> = match (&a.entailment_url, &a.recorded) {
        (Some(url), _) => Box::new(CachingProvider::new(HttpEntailmentProvider::new(url, Duration::from_secs(60)))),
        (None, Some(path)) => Box::new(RecordedProvider::load(path)?),
        (None, None) => {
            log::warn!("no entailment provider given, using the keyword-overlap stub");
            Box::new(KeywordOverlapStub)
        }
    };
    let records = read_records(&a.run)?;
    let summary = validate_flips(&records, &tiers, provider.as_ref(), a.parallelism, &a.run)?;
    print!("{}", summary.render());
    Ok(ExitCode::SUCCESS)
}

fn report(a: ReportArgs) -> Result<ExitCode> {
    let report = cmd_report(&a.runs, &a.out)?;
    print!("{}", report.render_text());
    if a.verify_report {
        let mut diffs = Vec::new();
        for dir in &a.runs {
            diffs.extend(verify_run(&load_run(dir)?)?);
        }
        if !diffs.is_empty() {
            for d in &diffs {
                eprintln!("{d}");
            }
            bail!("{} stored statistics differ from their recomputation", diffs.len());
        }
        println!("verify-report: every stored statistic matches its recomputation");
    }
    Ok(ExitCode::SUCCESS)
}

fn enumerate(a: EnumerateArgs) -> Result<ExitCode> {
    let rubric = load_rubric_list(a.rubrics.as_deref())?
        .into_iter()
        .find(|r| r.domain == a.domain)
        .ok_or_else(|| Error::Rubric(format!("no rubric for {}", a.domain)))?;
    let table = enumerate_rubric(&rubric, a.cap)?;
    let csv = table.to_csv()?;
    match &a.out {
        Some(p) => fs::write(p, &csv).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{csv}"),
    }
    for option in rubric.options() {
        eprintln!("{option}: {}", table.count(&option));
    }
    Ok(ExitCode::SUCCESS)
}
