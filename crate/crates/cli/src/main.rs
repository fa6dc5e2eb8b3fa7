//! `segfair` command-line front end.
//!
//! Exit codes: 0 on success, 1 for data errors, 2 for usage errors. Failures
//! print one JSON object to stderr.

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use segfair::calibration::{basket_profile, calibrate_row, partition_keys, LayerSelection, MassMode};
use segfair::corpus::{generate_synthetic_corpus, LengthBand};
use segfair::encoder::{AttentionBias, EncoderConfig};
use segfair::metrics::read_records_csv;
use segfair::pipeline::{fit_records, run_audit, write_ols_csv, AuditManifest};
use segfair::report::{format_ols_table, render_attention_svg, write_run_report, ChartStyle, SignificanceLevels};
use segfair::Encoder;

#[derive(Debug, Parser)]
#[command(name = "segfair", version, about = "Positional and language bias audits for text embeddings")]
struct Cli {
    /// Seed for every random choice; for `audit` it overrides the manifest seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads for embedding; for `audit` it overrides the manifest.
    #[arg(long, global = true)]
    workers: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic multilingual corpus as JSONL.
    GenCorpus {
        /// Comma-separated language tags.
        #[arg(long, default_value = "en,zh,de,it,ko,hi", value_delimiter = ',')]
        languages: Vec<String>,
        /// Segments per language.
        #[arg(long, default_value_t = 40)]
        per_lang: usize,
        #[arg(long, default_value_t = 20)]
        min_tokens: usize,
        #[arg(long, default_value_t = 40)]
        max_tokens: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run an audit manifest end to end.
    Audit {
        #[arg(long)]
        manifest: PathBuf,
        /// Output directory; defaults to the manifest's `output_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Plot the `<s>` attention profile of one document.
    AttentionProfile {
        /// Text file, segments separated by blank lines.
        #[arg(long)]
        doc: PathBuf,
        /// Language tag of every segment.
        #[arg(long, default_value = "en")]
        language: String,
        #[arg(long, default_value_t = 128)]
        basket_size: usize,
        /// `last6`, `all` or an inclusive range like `7..12`.
        #[arg(long, default_value = "last6")]
        layers: String,
        /// Strength of the front-loaded attention prior; 0 disables it.
        #[arg(long, default_value_t = 0.0)]
        bias_strength: f64,
        #[arg(long)]
        out_svg: PathBuf,
    },
    /// Calibrate one attention row and print it.
    CalibrateDemo {
        /// Comma-separated probabilities, `<s>` first.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        row: Vec<f64>,
        #[arg(long)]
        basket_size: usize,
        /// `uniform` or `proportional`.
        #[arg(long, default_value = "uniform")]
        mode: String,
    },
    /// Fit position OLS on a records CSV.
    FitOls {
        #[arg(long)]
        records: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render charts and tables for a finished audit directory.
    Report {
        #[arg(long)]
        run_dir: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

enum Failure {
    Usage(String),
    Data(segfair::Error),
}

impl From<segfair::Error> for Failure {
    fn from(e: segfair::Error) -> Self {
        Failure::Data(e)
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Data(e.into())
    }
}

fn require_file(path: &Path, what: &str) -> Result<(), Failure> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Failure::Usage(format!("{what} `{}` not found", path.display())))
    }
}

fn require_dir(path: &Path, what: &str) -> Result<(), Failure> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(Failure::Usage(format!("{what} `{}` not found", path.display())))
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let seed = cli.seed;
    let stdout = io::stdout();
    let mut out = stdout.lock();
    match cli.command {
        Command::GenCorpus {
            languages,
            per_lang,
            min_tokens,
            max_tokens,
            out: path,
        } => {
            let band = LengthBand::new(min_tokens, max_tokens)?;
            let corpus = generate_synthetic_corpus(seed.unwrap_or(0), &languages, per_lang, band)?;
            let mut w = BufWriter::new(File::create(&path)?);
            corpus.write_jsonl(&mut w)?;
            w.flush()?;
            writeln!(out, "wrote {} segments to {}", corpus.len(), path.display())?;
        }
        Command::Audit { manifest, out: dir } => {
            require_file(&manifest, "manifest")?;
            let mut m = AuditManifest::load(&manifest)?;
            if let Some(s) = seed {
                m.seed = s;
            }
            if let Some(w) = cli.workers {
                m.workers = w;
            }
            let dir = dir
                .or_else(|| m.output_dir.clone())
                .ok_or_else(|| Failure::Usage("no --out and no output_dir in manifest".into()))?;
            let summary = run_audit(&m, &dir)?;
            writeln!(
                out,
                "{}",
                json!({
                    "output_dir": dir,
                    "records": summary.records().count(),
                    "ols_rows": summary.ols.len(),
                    "forward_passes": summary.forward_passes,
                    "failures": summary.results.iter().map(|r| r.failures.len()).sum::<usize>(),
                })
            )?;
        }
        Command::AttentionProfile {
            doc,
            language,
            basket_size,
            layers,
            bias_strength,
            out_svg,
        } => {
            require_file(&doc, "document")?;
            let selection: LayerSelection = layers.parse().map_err(|e: segfair::Error| Failure::Usage(e.to_string()))?;
            let text = fs::read_to_string(&doc)?;
            let segments: Vec<String> = text
                .split("\n\n")
                .map(|s| s.split_whitespace().collect::<Vec<_>>().join(" "))
                .filter(|s| !s.is_empty())
                .collect();
            let mut config = EncoderConfig {
                languages: vec![language.clone()],
                init_seed: seed.unwrap_or(0),
                ..EncoderConfig::default()
            };
            if bias_strength != 0.0 {
                config.attention_bias = AttentionBias::FrontLoaded { strength: bias_strength };
            }
            let encoder = Encoder::new(config)?;
            let parts: Vec<(&str, &str)> = segments.iter().map(|s| (s.as_str(), language.as_str())).collect();
            let tokens = encoder.tokenize_parts(&parts)?;
            let encoded = encoder.encode(&tokens, None)?;
            let partition = partition_keys(tokens.len(), basket_size)?;
            let layer_list = selection.resolve(encoder.config().layer_count)?;
            let profile = basket_profile(&encoded.attention_rows, &partition, &layer_list)?;
            let style = ChartStyle {
                title: format!("<s> attention, basket size {basket_size}"),
                y_label: "attention mass".into(),
                ..ChartStyle::default()
            };
            fs::write(&out_svg, render_attention_svg(&profile, &style)?)?;
            writeln!(
                out,
                "{}",
                json!({
                    "tokens": tokens.len(),
                    "start": profile.start_mass,
                    "end": profile.end_mass,
                    "baskets": profile.basket_masses,
                    "layers": profile.layers,
                })
            )?;
        }
        Command::CalibrateDemo { row, basket_size, mode } => {
            let mode: MassMode = mode.parse().map_err(|e: segfair::Error| Failure::Usage(e.to_string()))?;
            if row.is_empty() {
                return Err(Failure::Usage("--row is empty".into()));
            }
            let partition = partition_keys(row.len(), basket_size)?;
            let calibrated = calibrate_row(&row, &partition, mode)?;
            let cells: Vec<String> = calibrated.iter().map(|v| format!("{v:.6}")).collect();
            writeln!(out, "{}", cells.join(","))?;
        }
        Command::FitOls { records, out: path } => {
            require_file(&records, "records file")?;
            let recs = read_records_csv(File::open(&records)?)?;
            let (rows, errors) = fit_records(&recs);
            for e in &errors {
                log::warn!("{e}");
            }
            if rows.is_empty() {
                return Err(segfair::Error::EmptyInput(format!("no fits: {}", errors.join("; "))).into());
            }
            write_ols_csv(File::create(&path)?, &rows)?;
            write!(out, "{}", format_ols_table(&rows, &SignificanceLevels::default())?)?;
        }
        Command::Report { run_dir, out_dir } => {
            require_dir(&run_dir, "run directory")?;
            for path in write_run_report(&run_dir, &out_dir)? {
                writeln!(out, "{}", path.display())?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprintln!("{}", json!({ "error": "usage", "message": e.to_string().trim() }));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(message)) => {
            eprintln!("{}", json!({ "error": "usage", "message": message }));
            ExitCode::from(2)
        }
        Err(Failure::Data(e)) => {
            eprintln!("{}", json!({ "error": e.kind(), "message": e.to_string() }));
            ExitCode::from(1)
        }
    }
}
