use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use reverb_doa::eval::Method;
use reverb_doa::room_sim::Preset;
use reverb_doa_lab::{Lab, LabConfig, LabError, Precision};

#[derive(Parser)]
#[command(name = "reverb-doa-lab", version, about = "Reverberant two-microphone DOA experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    flags: Flags,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the preset's recordings.
    Simulate,
    /// Extract RTF features for the training, unlabeled and validation sets.
    Features,
    /// Train VAE-SSL and/or the supervised CNN.
    Train,
    /// Grid-search alpha over 10..100 on validation accuracy.
    AlphaSearch,
    /// Score stored checkpoints and SRP-PHAT.
    Evaluate,
    /// Run the whole pipeline and print the results tables.
    Report,
}

#[derive(Args)]
struct Flags {
    /// JSON file with any of the flag values; flags win.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    preset: Option<Preset>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Labeled windows (multiple of the DOA count; 0 = all balanced).
    #[arg(long = "J", global = true)]
    j: Option<usize>,
    #[arg(long, global = true)]
    alpha: Option<f64>,
    #[arg(long, global = true)]
    method: Option<Method>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Allow training and evaluation on the full-scale presets (hours of compute).
    #[arg(long, global = true)]
    full: bool,
    #[arg(long, global = true)]
    epochs: Option<usize>,
    #[arg(long, global = true, value_parser = parse_precision)]
    precision: Option<Precision>,
}

fn parse_precision(s: &str) -> Result<Precision, String> {
    match s {
        "f32" => Ok(Precision::F32),
        "f64" => Ok(Precision::F64),
        _ => Err(format!("expected f32 or f64, got {s}")),
    }
}

impl Flags {
    fn config(&self) -> Result<LabConfig, LabError> {
        let mut c = match &self.config {
            Some(p) => LabConfig::from_file(p)?,
            None => LabConfig::default(),
        };
        macro_rules! take {
            ($($f:ident),*) => { $( if let Some(v) = self.$f.clone() { c.$f = v.into(); } )* };
        }
        take!(preset, seed, alpha, out);
        c.j = self.j.or(c.j);
        c.method = self.method.or(c.method);
        c.jobs = self.jobs.or(c.jobs);
        c.epochs = self.epochs.or(c.epochs);
        c.precision = self.precision.or(c.precision);
        c.full |= self.full;
        Ok(c)
    }
}

fn run(cli: Cli) -> Result<(), LabError> {
    let settings = cli.flags.config()?.resolve()?;
    if let Some(n) = settings.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| LabError::Config(format!("thread pool: {e}")))?;
    }
    let name = match cli.command {
        Command::Simulate => "simulate",
        Command::Features => "features",
        Command::Train => "train",
        Command::AlphaSearch => "alpha-search",
        Command::Evaluate => "evaluate",
        Command::Report => "report",
    };
    if !matches!(cli.command, Command::Simulate | Command::Features) {
        settings.check_training_scale()?;
    }
    let mut lab = Lab::new(settings, name);
    match cli.command {
        Command::Simulate => {
            let id = lab.train_id();
            let n = lab.simulate(id)?;
            println!("{}: {n} recordings", id.stem());
        }
        Command::Features => {
            let (train, pool, val) = lab.all_features()?;
            for set in [&train, &pool, &val] {
                println!(
                    "{}: {} frames, {} windows (stride {})",
                    set.meta.source, set.meta.frame_count, set.meta.sample_count, set.meta.stride
                );
            }
        }
        Command::Train => {
            for m in lab.learned_methods() {
                let tr = lab.train(m)?;
                println!(
                    "{m}: J = {}, best epoch {}, validation accuracy {:.2}%",
                    tr.j, tr.report.best_epoch, tr.report.best_val_acc
                );
            }
        }
        Command::AlphaSearch => {
            let (table, best) = lab.alpha_search()?;
            for (a, acc) in table {
                println!("alpha {a:>5}: {acc:.2}%");
            }
            println!("best alpha {best}");
        }
        Command::Evaluate => {
            let models: Vec<_> = lab.learned_methods().into_iter().map(|m| lab.load_trained(m)).collect::<Result<_, _>>()?;
            let methods = lab.scored_methods();
            let results = lab.evaluate(&models, &methods)?;
            lab.write_tables(&results)?;
            for r in results {
                println!("{} on {}: MAE {:.2} deg, accuracy {:.2}%", r.method, r.preset, r.mae_degrees, r.accuracy_percent);
            }
        }
        Command::Report => {
            let models: Vec<_> = lab.learned_methods().into_iter().map(|m| lab.train(m)).collect::<Result<_, _>>()?;
            let methods = lab.scored_methods();
            let results = lab.evaluate(&models, &methods)?;
            for text in lab.write_tables(&results)? {
                println!("{text}");
            }
        }
    }
    let manifest = lab.finish()?;
    eprintln!("manifest: {}", manifest.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
