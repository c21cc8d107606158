use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use joint_parse_cli::{cmd_eval, cmd_oracle_check, cmd_parse, cmd_train, exit_code, write_eval_json, EvalInputs};
use log::error;

#[derive(Parser)]
#[command(name = "joint-parse", version, about = "Joint constituency and dependency parser")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Joint,
    Const,
    Dep,
}

#[derive(Clone, Copy, ValueEnum)]
enum CompositionArg {
    Sum,
    Concat,
}

#[derive(Clone, Copy, ValueEnum)]
enum CharEncoderArg {
    LstmStyle,
    CnnStyle,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        /// Encoder layers shared by both decoders.
        #[arg(long)]
        shared_layers: Option<usize>,
        #[arg(long, value_enum)]
        composition: Option<CompositionArg>,
        #[arg(long, value_enum)]
        char_encoder: Option<CharEncoderArg>,
        /// Feed POS tag embeddings to the encoder.
        #[arg(long, num_args = 0..=1, default_missing_value = "true")]
        use_pos: Option<bool>,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        /// Reduce batch gradients in a fixed order.
        #[arg(long, num_args = 0..=1, default_missing_value = "true")]
        deterministic: Option<bool>,
        #[arg(long)]
        output_dir: Option<PathBuf>,
        /// Any config key, as key=value. Repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Parse raw tokenized text with a trained model.
    Parse {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Bracketed tree output.
        #[arg(long)]
        trees: PathBuf,
        /// CoNLL output.
        #[arg(long)]
        conll: PathBuf,
        #[arg(long, default_value_t = 1)]
        threads: usize,
    },
    /// Score predictions against gold trees.
    Eval {
        #[arg(long)]
        gold_trees: Option<PathBuf>,
        #[arg(long)]
        pred_trees: Option<PathBuf>,
        #[arg(long)]
        gold_conll: Option<PathBuf>,
        #[arg(long)]
        pred_conll: Option<PathBuf>,
        /// Punctuation and deletion profile: en or zh.
        #[arg(long, default_value = "en")]
        profile: String,
        /// Also write the metrics as JSON.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Compare the decoders and gradients against brute-force oracles.
    OracleCheck {
        #[arg(long, default_value_t = 200)]
        seeds: u64,
        #[arg(long, default_value_t = 6)]
        max_n: usize,
        #[arg(long, default_value_t = 20)]
        grad_seeds: u64,
    },
}

fn train_overrides(cmd: &Command) -> Result<Vec<(String, String)>, String> {
    let Command::Train {
        mode,
        shared_layers,
        composition,
        char_encoder,
        use_pos,
        lambda,
        seed,
        deterministic,
        output_dir,
        set,
        ..
    } = cmd
    else {
        return Ok(Vec::new());
    };
    let mut out = Vec::new();
    for kv in set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| format!("--set expects KEY=VALUE, got {kv:?}"))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    let mut push = |k: &str, v: String| out.push((k.to_string(), v));
    if let Some(m) = mode {
        let v = match m {
            ModeArg::Joint => "joint",
            ModeArg::Const => "const",
            ModeArg::Dep => "dep",
        };
        push("mode", format!("\"{v}\""));
    }
    if let Some(k) = shared_layers {
        push("shared_layers", k.to_string());
    }
    if let Some(c) = composition {
        let v = match c {
            CompositionArg::Sum => "sum",
            CompositionArg::Concat => "concat",
        };
        push("composition", format!("\"{v}\""));
    }
    if let Some(c) = char_encoder {
        let v = match c {
            CharEncoderArg::LstmStyle => "lstm",
            CharEncoderArg::CnnStyle => "cnn",
        };
        push("char_encoder", format!("\"{v}\""));
    }
    if let Some(b) = use_pos {
        push("use_pos", b.to_string());
    }
    if let Some(l) = lambda {
        push("lambda", format!("{l:?}"));
    }
    if let Some(s) = seed {
        push("seed", s.to_string());
    }
    if let Some(d) = deterministic {
        push("deterministic", d.to_string());
    }
    if let Some(dir) = output_dir {
        push("output_dir", dir.to_string_lossy().into_owned());
    }
    Ok(out)
}

fn run(cli: Cli) -> Result<(), (i32, String)> {
    let fail = |e: joint_parse::Error| (exit_code(&e), e.to_string());
    match &cli.command {
        Command::Train { config, .. } => {
            let overrides = train_overrides(&cli.command).map_err(|m| (2, m))?;
            let manifest = cmd_train(config, &overrides).map_err(fail)?;
            eprintln!("checkpoint written to {}", manifest.checkpoint);
        }
        Command::Parse {
            checkpoint,
            input,
            trees,
            conll,
            threads,
        } => {
            cmd_parse(checkpoint, input, trees, conll, *threads).map_err(fail)?;
        }
        Command::Eval {
            gold_trees,
            pred_trees,
            gold_conll,
            pred_conll,
            profile,
            output,
        } => {
            let inputs = EvalInputs {
                gold_trees: gold_trees.clone(),
                pred_trees: pred_trees.clone(),
                gold_conll: gold_conll.clone(),
                pred_conll: pred_conll.clone(),
            };
            let record = cmd_eval(&inputs, profile).map_err(fail)?;
            print!("{}", record.report());
            if let Some(path) = output {
                write_eval_json(&record, path).map_err(fail)?;
            }
        }
        Command::OracleCheck { seeds, max_n, grad_seeds } => {
            let suites = cmd_oracle_check(*seeds, *max_n, *grad_seeds).map_err(fail)?;
            let mut ok = true;
            for s in &suites {
                println!("{} {} ({} cases)", if s.passed() { "PASS" } else { "FAIL" }, s.name, s.cases);
                for f in &s.failures {
                    println!("  {f}");
                }
                ok &= s.passed();
            }
            if !ok {
                return Err((1, "oracle check failed".into()));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err((code, message)) => {
            error!("{message}");
            ExitCode::from(code as u8)
        }
    }
}
