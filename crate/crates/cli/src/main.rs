use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use jointnlu::config::RunConfig;
use jointnlu::corpus::{build_vocabs, load_split, synthetic, DatasetSplit, SplitName, Vocabs, PAD_LABEL};
use jointnlu::model::JointModel;
use jointnlu::training::{
    check_model_gradients, evaluate, initial_params, load_checkpoint, metrics_csv, predict_tokens, save_checkpoint,
    train, TrainConfig, TrainOutcome,
};
use jointnlu::Error;

mod ablate;

/// Largest relative error `gradcheck` accepts.
const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Parser)]
#[command(name = "jointnlu", version, about = "Joint intent detection and slot filling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes best.ckpt, final.ckpt, metrics.csv and config.txt into OUT.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint on a split and write the report CSV.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: SplitName,
        #[arg(long)]
        report: PathBuf,
    },
    /// Label one whitespace-tokenized utterance per input line.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Compare analytic and finite-difference gradients of the full model.
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
    },
    /// Train and evaluate every cell of a configuration grid.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a synthetic three-intent corpus in the dataset layout.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 400)]
        train: usize,
        #[arg(long, default_value_t = 100)]
        valid: usize,
        #[arg(long, default_value_t = 100)]
        test: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// A failure reported as `error[CODE]: message`.
pub struct Failure {
    code: &'static str,
    msg: String,
}

impl Failure {
    pub fn new(code: &'static str, msg: impl Into<String>) -> Self {
        Failure { code, msg: msg.into() }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::new(e.code(), e.to_string())
    }
}

type CmdResult = Result<(), Failure>;

fn write_file(path: &Path, text: &str) -> Result<(), Error> {
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn create_dir(path: &Path) -> Result<(), Error> {
    fs::create_dir_all(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

pub const TRAIN_OUTPUTS: [&str; 4] = ["best.ckpt", "final.ckpt", "metrics.csv", "config.txt"];

pub struct TrainedRun {
    pub model: JointModel,
    pub vocabs: Vocabs,
    pub outcome: TrainOutcome,
}

/// Train one configuration on `data` and write the artifacts into `out`.
pub fn run_training(data: &Path, cfg: &RunConfig, out: &Path) -> Result<TrainedRun, Error> {
    let train_raw = load_split(data, SplitName::Train)?;
    let valid_raw = load_split(data, SplitName::Valid)?;
    let vocabs = build_vocabs(&train_raw)?;
    let model = JointModel::new(cfg.model_config(&vocabs))?;
    let split = DatasetSplit::encode(SplitName::Train, &train_raw, &vocabs, cfg.max_seq_len)?;
    let params = initial_params(&model, cfg, &vocabs)?;
    log::info!(
        "{} training / {} validation utterances, {} parameters",
        train_raw.len(),
        valid_raw.len(),
        params.num_scalars()
    );
    let outcome = train(
        &model,
        params,
        &split,
        &valid_raw,
        &vocabs,
        &TrainConfig::from_run(cfg),
        |_| {},
    )?;
    create_dir(out)?;
    save_checkpoint(&out.join("best.ckpt"), cfg, &vocabs, &outcome.best_params)?;
    save_checkpoint(&out.join("final.ckpt"), cfg, &vocabs, &outcome.final_params)?;
    write_file(&out.join("metrics.csv"), &metrics_csv(&outcome.log))?;
    write_file(&out.join("config.txt"), &cfg.to_text())?;
    log::info!("best validation epoch {}", outcome.best_epoch);
    Ok(TrainedRun { model, vocabs, outcome })
}

/// Remove what a failed run left behind: the whole directory if the run
/// created it, otherwise only the files it writes.
pub fn clean_outputs(out: &Path, existed: bool) {
    if !existed {
        let _ = fs::remove_dir_all(out);
        return;
    }
    for f in TRAIN_OUTPUTS {
        let _ = fs::remove_file(out.join(f));
    }
}

fn cmd_train(data: &Path, config: &Path, out: &Path, seed: Option<u64>) -> CmdResult {
    let mut cfg = RunConfig::load(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let existed = out.exists();
    match run_training(data, &cfg, out) {
        Ok(run) => {
            print!("{}", metrics_csv(&run.outcome.log));
            Ok(())
        }
        Err(e) => {
            clean_outputs(out, existed);
            Err(e.into())
        }
    }
}

fn cmd_eval(model: &Path, data: &Path, split: SplitName, report: &Path) -> CmdResult {
    let ckpt = load_checkpoint(model)?;
    let net = ckpt.model()?;
    let utterances = load_split(data, split)?;
    let r = evaluate(&net, &ckpt.params, &ckpt.vocabs, &utterances, ckpt.config.strict_spans)?;
    write_file(report, &r.to_csv())?;
    println!("intent_acc {:.4}", r.intent_acc);
    println!("slot_f1 {:.4}", r.slot_f1);
    println!("semantic_acc {:.4}", r.semantic_acc);
    Ok(())
}

fn cmd_predict(model: &Path, input: &Path, output: &Path) -> CmdResult {
    let ckpt = load_checkpoint(model)?;
    let net = ckpt.model()?;
    let text = fs::read_to_string(input).map_err(|e| Error::Io {
        path: input.to_path_buf(),
        source: e,
    })?;
    let mut out = String::new();
    for (i, line) in text.lines().enumerate() {
        let tokens: Vec<&str> = line.split_whitespace().collect();
        let p = predict_tokens(&net, &ckpt.params, &ckpt.vocabs, &tokens, i).map_err(|e| match e {
            Error::TooLong { len, max, .. } => Error::Data {
                file: input.display().to_string(),
                line: Some(i + 1),
                msg: format!("{len} tokens, at most {max} fit"),
            },
            other => other,
        })?;
        // Padding predicted on a word position means no slot.
        let tags: Vec<&str> = p
            .tags
            .iter()
            .map(|t| if t == PAD_LABEL { "O" } else { t.as_str() })
            .collect();
        out.push_str(&p.intent);
        out.push('\t');
        out.push_str(&tags.join(" "));
        out.push('\n');
    }
    write_file(output, &out)?;
    Ok(())
}

fn cmd_gradcheck(config: &Path, eps: f64) -> CmdResult {
    let cfg = RunConfig::load(config)?;
    let report = check_model_gradients(&cfg.gradcheck_model_config(), eps, cfg.seed)?;
    println!("group\tcoords\tmax_rel_err\tmax_abs_grad");
    for g in &report.groups {
        println!(
            "{}\t{}\t{:.3e}\t{:.3e}",
            g.name, g.coords_checked, g.max_rel_err, g.max_abs_analytic
        );
    }
    let bad: Vec<&str> = report
        .groups
        .iter()
        .filter(|g| !(g.max_rel_err < GRADCHECK_TOLERANCE))
        .map(|g| g.name.as_str())
        .collect();
    if !bad.is_empty() {
        return Err(Failure::new(
            "E_GRADCHECK",
            format!("relative error >= {GRADCHECK_TOLERANCE:e} in {}", bad.join(", ")),
        ));
    }
    println!("max relative error {:.3e}", report.max_rel_err());
    Ok(())
}

fn cmd_synth(out: &Path, train: usize, valid: usize, test: usize, seed: u64) -> CmdResult {
    synthetic::dataset(train, valid, test, seed).write(out)?;
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train {
            data,
            config,
            out,
            seed,
        } => cmd_train(data, config, out, *seed),
        Command::Eval {
            model,
            data,
            split,
            report,
        } => cmd_eval(model, data, *split, report),
        Command::Predict { model, input, output } => cmd_predict(model, input, output),
        Command::Gradcheck { config, eps } => cmd_gradcheck(config, *eps),
        Command::Ablate { data, grid, out } => ablate::cmd_ablate(data, grid, out),
        Command::Synth {
            out,
            train,
            valid,
            test,
            seed,
        } => cmd_synth(out, *train, *valid, *test, *seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error[{}]: {}", f.code, f.msg.replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
