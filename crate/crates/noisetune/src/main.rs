//! Command-line surface: train, profile-snr, verify, generate, diagnose,
//! stats. Exit codes: 0 success, 1 usage, 2 runtime error, 3 verification
//! failure.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use noisetune::analysis;
use noisetune::config::RunConfig;
use noisetune::dataset::{self, DatasetRecord, EncodedSample};
use noisetune::model::{generate, PassOptions};
use noisetune::snr::{SnrMode, SnrReport};
use noisetune::trainer::{Checkpoint, Trainer};
use noisetune::verifier;
use noisetune::{Error, Result, Rng};

#[derive(Parser)]
#[command(
    name = "noisetune",
    version,
    about = "Adaptive noise-injection fine-tuning on a byte-level toy transformer"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fine-tune on the configured dataset with SNR-targeted noise.
    Train(TrainArgs),
    /// Measure per-layer SNR and report which layers would be selected.
    ProfileSnr(ProfileSnrArgs),
    /// Run the statistical verification suite.
    Verify(VerifyArgs),
    /// Sample a completion for a prompt.
    Generate(GenerateArgs),
    /// Per-layer activation metrics on a probe batch.
    Diagnose(DiagnoseArgs),
    /// Distribution-shift tests between two metrics files.
    Stats(StatsArgs),
}

#[derive(Args)]
struct Common {
    /// TOML run config; built-in defaults apply when omitted.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override the config's seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Run directory for the config echo, metrics, and checkpoints.
    #[arg(long, value_name = "DIR", default_value = "run")]
    out: PathBuf,
    /// Override noise.sigma_base.
    #[arg(long, value_name = "SIGMA")]
    sigma_base: Option<f64>,
    /// Override train.k_layers.
    #[arg(long, value_name = "K")]
    k_layers: Option<usize>,
    /// Override train.snr_mode (highest|lowest).
    #[arg(long, value_parser = parse_snr_mode)]
    snr_mode: Option<SnrMode>,
    /// Override train.max_steps.
    #[arg(long, value_name = "N")]
    steps: Option<usize>,
    /// Resume from a checkpoint written by an earlier run.
    #[arg(long, value_name = "PATH")]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct ProfileSnrArgs {
    #[command(flatten)]
    common: Common,
    /// Base scales to profile (comma separated); config value when omitted.
    #[arg(long, value_name = "LIST", value_delimiter = ',')]
    sigma_base: Vec<f64>,
    /// Override train.k_layers.
    #[arg(long, value_name = "K")]
    k_layers: Option<usize>,
    /// Override train.snr_mode (highest|lowest).
    #[arg(long, value_parser = parse_snr_mode)]
    snr_mode: Option<SnrMode>,
    /// Directory to write snr.csv into.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    #[command(flatten)]
    common: Common,
    /// Directory to write verify.csv into.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GenerateArgs {
    #[command(flatten)]
    common: Common,
    /// Checkpoint with trained weights; fresh initialization when omitted.
    #[arg(long, value_name = "PATH")]
    checkpoint: Option<PathBuf>,
    /// User prompt (wrapped in the chat template before encoding).
    #[arg(long)]
    prompt: String,
    /// Override generation.max_new_tokens.
    #[arg(long, value_name = "N")]
    max_new_tokens: Option<usize>,
}

#[derive(Args)]
struct DiagnoseArgs {
    #[command(flatten)]
    common: Common,
    /// Checkpoint with trained weights; fresh initialization when omitted.
    #[arg(long, value_name = "PATH")]
    checkpoint: Option<PathBuf>,
    /// Number of samples in the probe batch.
    #[arg(long, value_name = "N", default_value_t = 4)]
    batch_size: usize,
    /// Directory to write diagnose.csv into.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct StatsArgs {
    /// Baseline metrics CSV.
    a: PathBuf,
    /// Comparison metrics CSV.
    b: PathBuf,
    /// Significance level for the step-down adjustment.
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    /// Only test these columns (comma separated); all shared numeric
    /// columns when omitted.
    #[arg(long, value_name = "LIST", value_delimiter = ',')]
    columns: Vec<String>,
}

fn parse_snr_mode(s: &str) -> std::result::Result<SnrMode, String> {
    match s.to_ascii_lowercase().as_str() {
        "highest" => Ok(SnrMode::Highest),
        "lowest" => Ok(SnrMode::Lowest),
        other => Err(format!("unknown SNR mode {other:?} (expected highest or lowest)")),
    }
}

fn main() {
    std::process::exit(run());
}

fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Parse(_) | Error::Config(_) => 1,
                _ => 2,
            }
        }
    }
}

fn dispatch(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Train(args) => cmd_train(args),
        Command::ProfileSnr(args) => cmd_profile_snr(args),
        Command::Verify(args) => cmd_verify(args),
        Command::Generate(args) => cmd_generate(args),
        Command::Diagnose(args) => cmd_diagnose(args),
        Command::Stats(args) => cmd_stats(args),
    }
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut config = match &common.config {
        Some(path) => {
            if !path.is_file() {
                return Err(Error::Parse(format!(
                    "{}: no such config file",
                    path.display()
                )));
            }
            RunConfig::load(path)?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    Ok(config)
}

/// Training records plus held-out records. A user dataset is all training
/// data; the bundled copy task comes with its fixed train/test split.
fn load_records(config: &RunConfig) -> Result<(Vec<DatasetRecord>, Vec<DatasetRecord>)> {
    match &config.data {
        Some(path) => Ok((dataset::load_dataset(Path::new(path))?, Vec::new())),
        None => Ok(dataset::toy_copy_dataset()),
    }
}

fn build_trainer(config: &RunConfig) -> Result<Trainer> {
    Trainer::new(
        config.model.clone(),
        config.noise.clone(),
        config.loss.clone(),
        config.train.clone(),
        config.seed,
    )
}

/// Exclusive claim on a run directory, released on drop. A leftover
/// `.lock` from a killed process must be removed by hand.
struct RunDirLock {
    path: PathBuf,
}

impl RunDirLock {
    fn acquire(dir: &Path) -> Result<RunDirLock> {
        fs::create_dir_all(dir)?;
        let path = dir.join(".lock");
        match fs::File::options().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(RunDirLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Config(format!(
                "{}: run directory is locked by another writer (remove {} if stale)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(Error::Io(e)),
        }
    }
}

impl Drop for RunDirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Replace-atomic text write: temp file in the same directory, then rename.
fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, contents)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn join_layers(layers: &std::collections::BTreeSet<usize>) -> String {
    layers
        .iter()
        .map(|l| l.to_string())
        .collect::<Vec<_>>()
        .join("|")
}

fn cmd_train(args: TrainArgs) -> Result<i32> {
    let mut config = load_config(&args.common)?;
    if let Some(s) = args.sigma_base {
        config.noise.sigma_base = s;
    }
    if let Some(k) = args.k_layers {
        config.train.k_layers = k;
    }
    if let Some(m) = args.snr_mode {
        config.train.snr_mode = m;
    }
    if let Some(n) = args.steps {
        config.train.max_steps = n;
    }
    config.validate()?;

    let _lock = RunDirLock::acquire(&args.out)?;
    let echo = config.to_toml()?;
    write_atomic(&args.out.join("config.toml"), &echo)?;

    let (train_records, test_records) = load_records(&config)?;
    let samples: Vec<EncodedSample> = train_records.iter().map(dataset::encode).collect();

    let mut trainer = build_trainer(&config)?;
    trainer.config_echo = echo;
    if let Some(ck_path) = &args.resume {
        let ck = Checkpoint::load(ck_path)?;
        trainer.load_checkpoint(&ck)?;
        println!("resumed from {} at step {}", ck_path.display(), trainer.step);
    }

    let summary = trainer.train(&samples, Some(&args.out))?;
    if !trainer.selected_layers.is_empty() {
        println!("selected layers: {}", join_layers(&trainer.selected_layers));
    }
    match summary.history.last() {
        Some(last) => println!(
            "finished at step {}: l_final {:.6}, l_ce {:.6}",
            summary.final_step, last.l_final, last.l_ce
        ),
        None => println!("nothing to do: already at step {}", summary.final_step),
    }
    if !test_records.is_empty() {
        let acc = trainer
            .evaluate_exact_match(&test_records, config.generation.max_new_tokens)?;
        println!(
            "exact match on {} held-out records: {:.4}",
            test_records.len(),
            acc
        );
    }
    println!("run directory: {}", args.out.display());
    Ok(0)
}

fn snr_table(report: &SnrReport, selected: &std::collections::BTreeSet<usize>) -> String {
    use std::fmt::Write as _;
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:>5}  {:>13}  {:>13}  {:>13}  selected",
        "layer", "signal", "noise", "snr"
    );
    for row in &report.rows {
        let _ = writeln!(
            out,
            "{:>5}  {:>13.6e}  {:>13.6e}  {:>13.6e}  {}",
            row.layer,
            row.signal,
            row.noise,
            row.snr,
            if selected.contains(&row.layer) { "*" } else { "" }
        );
    }
    out
}

fn cmd_profile_snr(args: ProfileSnrArgs) -> Result<i32> {
    let mut config = load_config(&args.common)?;
    if let Some(k) = args.k_layers {
        config.train.k_layers = k;
    }
    if let Some(m) = args.snr_mode {
        config.train.snr_mode = m;
    }
    config.validate()?;

    let scales = if args.sigma_base.is_empty() {
        vec![config.noise.sigma_base]
    } else {
        args.sigma_base.clone()
    };
    if let Some(&bad) = scales.iter().find(|&&s| !(s > 0.0)) {
        return Err(Error::Config(format!(
            "profile-snr needs sigma_base > 0, got {bad}"
        )));
    }

    let (train_records, _) = load_records(&config)?;
    let samples: Vec<EncodedSample> = train_records.iter().map(dataset::encode).collect();

    let mut csv = String::from("sigma_base,layer,signal,noise,snr,selected\n");
    for sigma in scales {
        let mut scaled = config.clone();
        scaled.noise.sigma_base = sigma;
        scaled.validate()?;
        let mut trainer = build_trainer(&scaled)?;
        let report = trainer.profile(&samples)?;
        println!("sigma_base = {sigma} ({:?} SNR first)", scaled.train.snr_mode);
        print!("{}", snr_table(&report, &trainer.selected_layers));
        println!("selected layers: {}", join_layers(&trainer.selected_layers));
        for row in &report.rows {
            use std::fmt::Write as _;
            let _ = writeln!(
                csv,
                "{sigma},{},{:e},{:e},{:e},{}",
                row.layer,
                row.signal,
                row.noise,
                row.snr,
                trainer.selected_layers.contains(&row.layer)
            );
        }
    }
    if let Some(out) = &args.out {
        let _lock = RunDirLock::acquire(out)?;
        write_atomic(&out.join("snr.csv"), &csv)?;
        println!("wrote {}", out.join("snr.csv").display());
    }
    Ok(0)
}

fn cmd_verify(args: VerifyArgs) -> Result<i32> {
    let config = load_config(&args.common)?;
    let report = verifier::run_all(config.seed)?;
    print!("{}", report.table());
    if let Some(out) = &args.out {
        let _lock = RunDirLock::acquire(out)?;
        write_atomic(&out.join("verify.csv"), &report.to_csv())?;
        println!("wrote {}", out.join("verify.csv").display());
    }
    Ok(if report.all_pass() { 0 } else { 3 })
}

fn cmd_generate(args: GenerateArgs) -> Result<i32> {
    let config = load_config(&args.common)?;
    let mut trainer = build_trainer(&config)?;
    if let Some(ck_path) = &args.checkpoint {
        let ck = Checkpoint::load(ck_path)?;
        trainer.load_checkpoint(&ck)?;
    }
    let mut gen_config = config.generation.clone();
    if let Some(n) = args.max_new_tokens {
        gen_config.max_new_tokens = n;
    }
    gen_config.validate()?;

    let prompt_ids: Vec<usize> = dataset::format_prompt(&args.prompt)
        .bytes()
        .map(usize::from)
        .collect();
    if let Some(&id) = prompt_ids.iter().find(|&&id| id >= config.model.vocab_size) {
        return Err(Error::Config(format!(
            "prompt byte {id} is outside the model vocabulary ({})",
            config.model.vocab_size
        )));
    }

    // Same stream family the trainer uses when scoring held-out records.
    let mut rng = Rng::new(config.seed).substream(&[4, 0]);
    let new_ids = generate(&trainer.model, &prompt_ids, &gen_config, &mut rng)?;
    println!("{}", dataset::decode(&new_ids));
    Ok(0)
}

fn cmd_diagnose(args: DiagnoseArgs) -> Result<i32> {
    let config = load_config(&args.common)?;
    let mut trainer = build_trainer(&config)?;
    if let Some(ck_path) = &args.checkpoint {
        let ck = Checkpoint::load(ck_path)?;
        trainer.load_checkpoint(&ck)?;
    }
    let (train_records, _) = load_records(&config)?;
    if args.batch_size == 0 {
        return Err(Error::Config("diagnose needs batch_size >= 1".into()));
    }
    let n = args.batch_size.min(train_records.len());
    let samples: Vec<EncodedSample> = train_records[..n].iter().map(dataset::encode).collect();
    let chosen: Vec<usize> = (0..n).collect();
    let batch = dataset::collate(&samples, &chosen)?;

    let mut opts = PassOptions {
        noise: None,
        dropout_rng: None,
        retain_attention: true,
    };
    let trace = trainer.model.forward(&batch.tokens, &mut opts)?;
    let rows = analysis::layer_metrics(&trainer.model, &trace)?;
    print!("{}", analysis::metrics_table(&rows));

    if let Some(out) = &args.out {
        use std::fmt::Write as _;
        let mut csv = String::from(
            "layer,sparsity,variance,mean_token_norm,effective_rank,logit_entropy,attention_entropy\n",
        );
        for r in &rows {
            let att = r
                .attention_entropy
                .map(|a| format!("{a:e}"))
                .unwrap_or_default();
            let _ = writeln!(
                csv,
                "{},{:e},{:e},{:e},{},{:e},{att}",
                r.layer, r.sparsity, r.variance, r.mean_token_norm, r.effective_rank, r.logit_entropy
            );
        }
        let _lock = RunDirLock::acquire(out)?;
        write_atomic(&out.join("diagnose.csv"), &csv)?;
        println!("wrote {}", out.join("diagnose.csv").display());
    }
    Ok(0)
}

/// Header names plus per-column values for every column whose entries all
/// parse as finite numbers.
fn numeric_columns(path: &Path) -> Result<Vec<(String, Vec<f64>)>> {
    if !path.is_file() {
        return Err(Error::Parse(format!("{}: no such file", path.display())));
    }
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header: Vec<String> = lines
        .next()
        .ok_or_else(|| Error::Parse(format!("{}: empty file", path.display())))?
        .split(',')
        .map(|s| s.trim().to_string())
        .collect();
    let mut columns: Vec<(String, Vec<f64>, bool)> = header
        .into_iter()
        .map(|name| (name, Vec::new(), true))
        .collect();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != columns.len() {
            return Err(Error::Parse(format!(
                "{}:{}: expected {} fields, found {}",
                path.display(),
                i + 2,
                columns.len(),
                fields.len()
            )));
        }
        for (field, column) in fields.iter().zip(&mut columns) {
            match field.trim().parse::<f64>() {
                Ok(v) if v.is_finite() => column.1.push(v),
                _ => column.2 = false,
            }
        }
    }
    Ok(columns
        .into_iter()
        .filter(|(_, values, numeric)| *numeric && !values.is_empty())
        .map(|(name, values, _)| (name, values))
        .collect())
}

fn cmd_stats(args: StatsArgs) -> Result<i32> {
    let a = numeric_columns(&args.a)?;
    let b = numeric_columns(&args.b)?;

    let wanted = |name: &str| args.columns.is_empty() || args.columns.iter().any(|c| c == name);
    let mut tested: Vec<(String, analysis::EppsSingleton)> = Vec::new();
    let mut skipped: Vec<(String, String)> = Vec::new();
    for (name, values_a) in &a {
        if !wanted(name) {
            continue;
        }
        let Some((_, values_b)) = b.iter().find(|(n, _)| n == name) else {
            continue;
        };
        match analysis::epps_singleton(values_a, values_b) {
            Ok(es) => tested.push((name.clone(), es)),
            Err(e) => skipped.push((name.clone(), e.to_string())),
        }
    }
    if tested.is_empty() {
        let detail = skipped
            .first()
            .map(|(name, reason)| format!(" ({name}: {reason})"))
            .unwrap_or_default();
        return Err(Error::Degenerate(format!(
            "stats: no shared numeric column was testable{detail}"
        )));
    }

    let p_values: Vec<f64> = tested.iter().map(|(_, es)| es.p_value).collect();
    let holm = analysis::holm_adjust(&p_values, args.alpha)?;

    let name_w = tested
        .iter()
        .map(|(n, _)| n.len())
        .chain(["column".len()])
        .max()
        .unwrap_or(6);
    println!(
        "{:name_w$}  {:>12}  {:>4}  {:>12}  {:>12}  significant",
        "column", "statistic", "df", "p_value", "p_adjusted"
    );
    for (i, (name, es)) in tested.iter().enumerate() {
        println!(
            "{:name_w$}  {:>12.6}  {:>4}  {:>12.6e}  {:>12.6e}  {}",
            name, es.statistic, es.df, es.p_value, holm.adjusted[i], holm.significant[i]
        );
    }
    for (name, reason) in &skipped {
        println!("skipped {name}: {reason}");
    }
    Ok(0)
}
