//! The `ccnet` command line.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use ccnet_core::data::{merge_captions, tokenize};
use ccnet_core::eval::Scoring;
use ccnet_core::gradcheck::{grad_check, GradCheckConfig};
use ccnet_core::retrieval::combined_probability;
use ccnet_core::synth::generate;
use ccnet_core::Ccnet;
use clap::{Parser, Subcommand, ValueEnum};

use crate::checkpoint::load_checkpoint;
use crate::config::{load_run_config, load_synthetic_spec};
use crate::dataset::{write_dataset, DataDir};
use crate::error::{Error, Result};
use crate::evaluate::{evaluate, write_report};
use crate::run::{loss_log_path, train_run};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "ccnet", about = "Compositional image-text retrieval with cycled composition networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ScoringArg {
    Ccnet,
    Composition,
    Correction,
}

impl From<ScoringArg> for Scoring {
    fn from(s: ScoringArg) -> Self {
        match s {
            ScoringArg::Ccnet => Scoring::Ccnet,
            ScoringArg::Composition => Scoring::Composition,
            ScoringArg::Correction => Scoring::Correction,
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic attribute dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// TOML synthetic spec.
        #[arg(long)]
        spec: PathBuf,
        /// Overrides the spec's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train both pathways jointly.
    Train {
        /// TOML training config.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Final checkpoint; epoch checkpoints and the loss log go beside it.
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint carrying optimizer state.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Recall@K of one model or a geometric ensemble.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        split: String,
        #[arg(long, value_delimiter = ',', default_value = "10,50")]
        recall: Vec<usize>,
        /// Further checkpoints pooled with `--ckpt`.
        #[arg(long, num_args = 1..)]
        ensemble: Vec<PathBuf>,
        #[arg(long, value_enum, default_value = "ccnet")]
        scoring: ScoringArg,
        /// Report path prefix; defaults to `<ckpt stem>.<split>.recall`.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Rank a gallery for one reference image and caption.
    Retrieve {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long = "ref")]
        reference: String,
        /// One or two captions.
        #[arg(long, num_args = 1, required = true)]
        caption: Vec<String>,
        #[arg(long, default_value_t = 10)]
        topk: usize,
    },
    /// Finite-difference check of every parameter gradient of a micro model.
    Gradcheck {
        #[arg(long, default_value_t = GradCheckConfig::default().seed)]
        seed: u64,
    },
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_RUNTIME
        }
    }
}

fn default_report_prefix(ckpt: &Path, split: &str) -> PathBuf {
    let stem = ckpt.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    ckpt.with_file_name(format!("{stem}.{split}.recall"))
}

fn load_model(path: &Path) -> Result<Ccnet> {
    Ok(Ccnet::new(load_checkpoint(path)?.params)?)
}

fn execute(cmd: Command) -> Result<()> {
    let mut stdout = std::io::stdout().lock();
    match cmd {
        Command::Synth { out, spec, seed } => {
            let mut spec = load_synthetic_spec(&spec)?;
            if let Some(s) = seed {
                spec.seed = s;
            }
            let data = generate(&spec)?;
            write_dataset(&out, &data)?;
            let _ = writeln!(
                stdout,
                "wrote {} images and {} splits to {}",
                data.store.len(),
                data.splits.len(),
                out.display()
            );
        }
        Command::Train { config, data, out, resume } => {
            let cfg = load_run_config(&config)?;
            let data = DataDir::load(&data)?;
            let resume = resume.map(|p| load_checkpoint(&p)).transpose()?;
            let outcome = train_run(&cfg, &data, &out, resume)?;
            if let Some(last) = outcome.logs.last() {
                let _ = writeln!(stdout, "epoch {} step {} loss {:.6}", last.epoch + 1, last.step, last.loss);
            }
            if let Some((epoch, r)) = outcome.best {
                let _ = writeln!(stdout, "best overall recall {r:.4} at epoch {epoch}");
            }
            let _ = writeln!(
                stdout,
                "wrote {} and {}",
                out.display(),
                loss_log_path(&out).display()
            );
        }
        Command::Eval {
            ckpt,
            data,
            split,
            recall,
            ensemble,
            scoring,
            report,
        } => {
            if recall.is_empty() || recall.contains(&0) {
                return Err(Error::Config("recall cutoffs must be positive".into()));
            }
            let data = DataDir::load(&data)?;
            let mut models = vec![load_model(&ckpt)?];
            for p in &ensemble {
                models.push(load_model(p)?);
            }
            let refs: Vec<&Ccnet> = models.iter().collect();
            let s = data.split(&split)?;
            let r = evaluate(&refs, &data, &s, &recall, scoring.into())?;
            let prefix = report.unwrap_or_else(|| default_report_prefix(&ckpt, &split));
            write_report(&prefix, &r)?;
            let _ = write!(stdout, "{}", r.to_text());
        }
        Command::Retrieve {
            ckpt,
            data,
            reference,
            caption,
            topk,
        } => {
            let data = DataDir::load(&data)?;
            let model = load_model(&ckpt)?;
            let captions: Vec<Vec<String>> = caption.iter().map(|c| tokenize(c)).collect();
            let tokens = merge_captions(&captions)?;
            let words = data.words.lookup(&tokens)?;
            let ref_pos = data.store.position(&reference)?;
            let ids = data.store.ids();
            let mut gallery: Vec<usize> = match data.category_of(&reference) {
                Some(cat) => data
                    .catalog
                    .iter()
                    .flatten()
                    .filter(|(_, c)| c.as_str() == cat)
                    .map(|(id, _)| data.store.position(id))
                    .collect::<ccnet_core::Result<_>>()?,
                None => (0..data.store.len()).collect(),
            };
            gallery.sort_by(|&a, &b| ids[a].cmp(&ids[b]));
            let raws: Vec<_> = gallery.iter().map(|&p| &data.pooled.raws[p]).collect();
            let embedded = model.embed_images(&raws)?;
            let reference = model.embed_images(&[&data.pooled.raws[ref_pos]])?;
            let scores = model.score_query(&reference, &words, &embedded)?;
            let ranked = combined_probability(&scores.composition, &scores.correction)?;
            for (rank, &g) in ranked.order.iter().take(topk).enumerate() {
                let _ = writeln!(stdout, "{}\t{}\t{:.6}", rank + 1, ids[gallery[g]], ranked.probabilities[g]);
            }
        }
        Command::Gradcheck { seed } => {
            let cfg = GradCheckConfig {
                seed,
                ..GradCheckConfig::default()
            };
            let groups = grad_check(&cfg)?;
            let worst = groups.iter().map(|g| g.relative).fold(0.0, f64::max);
            let _ = writeln!(
                stdout,
                "{} parameter groups, max relative error {worst:.3e} (tolerance {:.0e})",
                groups.len(),
                cfg.tolerance
            );
        }
    }
    Ok(())
}
