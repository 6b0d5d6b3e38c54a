use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use pst_core::classifier::{default_layers, pretrain_classifier};
use pst_core::cost::{network_cost, receptive_field_csv};
use pst_core::eval::Frame;
use pst_core::experiment::{
    evaluate, generate_sample, infer, run_experiment, train_subnetwork, ExperimentConfig, Sample,
};
use pst_core::io::{read_jsonl, read_pgm, write_atomic, write_jsonl};
use pst_core::labeling::{iou_label, pst_label, LabeledProposals, ProposalSet, Thresholds};
use pst_core::report::{emit_report, Report, CURVES_HEADER};
use pst_core::seeds::stage_seed;
use pst_core::synth::Scene;
use pst_core::{BoundingBox, Error, Network, Result, ScoredBox, TrainConfig};

mod scenes;

#[derive(Parser, Debug)]
#[command(name = "pst", version, about = "Pedestrian-sensitive proposal labeling on synthetic scenes")]
struct Cli {
    /// Master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// JSON document with experiment configuration fields.
    #[arg(long, global = true, value_name = "JSON")]
    config: Option<PathBuf>,
    /// Output file or directory, depending on the command.
    #[arg(long, global = true, value_name = "PATH")]
    out: Option<PathBuf>,
    /// Only report warnings and errors.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate scenes with ground truth and simulated proposals.
    Synth {
        /// Number of scenes; defaults to `scenes_per_seed`.
        #[arg(long)]
        count: Option<usize>,
    },
    /// Pre-train the pedestrian classifier on a directory of scenes.
    TrainClassifier(ScenesArg),
    /// Label the proposals of one image.
    Label(LabelArgs),
    /// Train a subnetwork on labeled proposals of a directory of scenes.
    TrainSubnet(SubnetArgs),
    /// Detect and evaluate a trained subnetwork on a directory of scenes.
    Eval(EvalArgs),
    /// Run the baseline vs. pedestrian-sensitive experiment over all seeds.
    Experiment,
    /// Per-layer cost table of the classifier as CSV.
    Cost,
    /// Per-layer receptive fields of the classifier as CSV.
    Rf,
}

#[derive(Args, Debug)]
struct ScenesArg {
    /// Directory written by `synth`.
    #[arg(long)]
    scenes: PathBuf,
}

#[derive(Args, Debug)]
struct LabelArgs {
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    proposals: PathBuf,
    #[arg(long)]
    gts: PathBuf,
    /// Pre-trained classifier.
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    eps_iou: Option<f64>,
    #[arg(long)]
    eps: Option<f64>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ArmArg {
    Baseline,
    Pst,
}

#[derive(Args, Debug)]
struct SubnetArgs {
    #[arg(long)]
    scenes: PathBuf,
    /// Pre-trained classifier; required for the pst arm.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "pst")]
    arm: ArmArg,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    scenes: PathBuf,
    /// Trained subnetwork.
    #[arg(long)]
    model: PathBuf,
    /// Name written to the arm column of curves.csv.
    #[arg(long, default_value = "eval")]
    name: String,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 2 } else { 3 })
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    let cfg = match path {
        None => ExperimentConfig::default(),
        Some(p) => {
            let text =
                std::fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
    };
    cfg.validate()?;
    Ok(cfg)
}

fn required_out(out: Option<PathBuf>, what: &str) -> Result<PathBuf> {
    out.ok_or_else(|| Error::Config(format!("--out <PATH> is required ({what})")))
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_config(cli.config.as_deref())?;
    let seed = cli.seed.unwrap_or(0);
    match cli.command {
        Command::Synth { count } => {
            let dir = required_out(cli.out, "output directory")?;
            let n = count.unwrap_or(cfg.scenes_per_seed);
            for i in 0..n {
                let s = generate_sample(&cfg, seed, i)?;
                scenes::write_sample(&dir, i, &s)?;
            }
            log::info!("wrote {n} scenes to {}", dir.display());
        }
        Command::TrainClassifier(args) => {
            let out = required_out(cli.out, "model file")?;
            let samples = scenes::read_dir(&args.scenes)?;
            let scenes: Vec<Scene> = samples.into_iter().map(|s| s.scene).collect();
            let tcfg = TrainConfig {
                seed: stage_seed(seed ^ cfg.classifier_train.seed, "classifier"),
                ..cfg.classifier_train.clone()
            };
            let net = pretrain_classifier(&scenes, &cfg.classifier, &tcfg)?;
            net.save(&out)?;
            log::info!("classifier saved to {}", out.display());
        }
        Command::Label(args) => {
            let out = required_out(cli.out, "label file")?;
            let th = Thresholds::new(
                args.eps_iou.unwrap_or(cfg.thresholds.eps_iou),
                args.eps.unwrap_or(cfg.thresholds.eps),
            )?;
            let image = read_pgm(&args.image)?;
            let props = ProposalSet::new(read_jsonl::<BoundingBox>(&args.proposals)?);
            let gts: Vec<BoundingBox> = read_jsonl(&args.gts)?;
            let net = Network::load(&args.model)?;
            let labels = pst_label(&image, &props, &gts, &net, &th)?;
            write_jsonl(&out, &labels.records())?;
            log::info!(
                "{} positives, {} negatives kept, {} omitted",
                labels.positives.len(),
                labels.refined_negatives.len(),
                labels.omitted.len()
            );
        }
        Command::TrainSubnet(args) => {
            let out = required_out(cli.out, "model file")?;
            let samples = scenes::read_dir(&args.scenes)?;
            let labels = label_samples(&samples, args.arm, args.model.as_deref(), &cfg.thresholds)?;
            let tcfg = TrainConfig {
                seed: stage_seed(seed ^ cfg.subnet_train.seed, "subnet"),
                ..cfg.subnet_train.clone()
            };
            let outcome = train_subnetwork(&samples, &labels, &cfg.classifier, &tcfg, cfg.minibatch, cfg.pos_fraction)?;
            outcome.net.save(&out)?;
            log::info!("subnetwork saved to {}", out.display());
        }
        Command::Eval(args) => {
            let dir = required_out(cli.out, "output directory")?;
            let samples = scenes::read_dir(&args.scenes)?;
            let net = Network::load(&args.model)?;
            let frames = samples
                .iter()
                .enumerate()
                .map(|(k, s)| {
                    let dets = infer(&s.scene, &s.proposals, &net, cfg.nms_thresh, k)?;
                    Ok(Frame {
                        detections: dets
                            .iter()
                            .map(|d| ScoredBox::new(d.bbox, d.confidence))
                            .collect::<Result<_>>()?,
                        gts: s.scene.gts.clone(),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let (curve, counts) = evaluate(&frames, &cfg)?;
            let mut csv = format!("{CURVES_HEADER}\n");
            for p in &curve.points {
                csv += &format!("{},{},{},{}\n", args.name, p.threshold, p.fppi, p.mr);
            }
            let summary = serde_json::json!({
                "frames": frames.len(),
                "lamr": curve.lamr,
                "tp": counts.tp,
                "fp": counts.fp,
                "fn": counts.fn_,
            });
            std::fs::create_dir_all(&dir).map_err(|e| Error::Config(format!("{}: {e}", dir.display())))?;
            write_atomic(&dir.join("curves.csv"), csv.as_bytes())?;
            write_atomic(&dir.join("eval.json"), format!("{summary:#}\n").as_bytes())?;
            println!("{summary}");
        }
        Command::Experiment => {
            if let Some(s) = cli.seed {
                cfg.seeds = vec![s];
            }
            if cli.out.is_some() {
                cfg.out_dir = cli.out;
            }
            let report = run_experiment(&cfg)?;
            print_summary(&report)?;
            if let Some(dir) = &cfg.out_dir {
                emit_report(&report, dir)?;
            }
        }
        Command::Cost => {
            let table = network_cost(&default_layers(&cfg.classifier), cfg.classifier.input_shape())?;
            emit_text(cli.out.as_deref(), &table.to_csv())?;
        }
        Command::Rf => emit_text(cli.out.as_deref(), &receptive_field_csv(&default_layers(&cfg.classifier)))?,
    }
    Ok(())
}

/// Prints to stdout, and also writes the text to `out` when given.
fn emit_text(out: Option<&Path>, text: &str) -> Result<()> {
    print!("{text}");
    match out {
        Some(p) => write_atomic(p, text.as_bytes()),
        None => Ok(()),
    }
}

fn label_samples(samples: &[Sample], arm: ArmArg, model: Option<&Path>, th: &Thresholds) -> Result<Vec<LabeledProposals>> {
    match arm {
        ArmArg::Baseline => samples
            .iter()
            .map(|s| iou_label(&s.proposals, &s.scene.gts, th.eps_iou))
            .collect(),
        ArmArg::Pst => {
            let path = model.ok_or_else(|| Error::Config("--model is required for the pst arm".into()))?;
            let net = Network::load(path)?;
            samples
                .iter()
                .map(|s| pst_label(&s.scene.image, &s.proposals, &s.scene.gts, &net, th))
                .collect()
        }
    }
}

fn print_summary(report: &Report) -> Result<()> {
    for s in report.summary()? {
        log::info!(
            "{:<8} lamr {:.4} ± {:.4} over {} seeds (pooled {:.4}); misleading removed {:.3}, clean removed {:.3}",
            s.arm.name(),
            s.lamr.mean,
            s.lamr.std,
            s.seeds,
            s.pooled_lamr,
            s.misleading_removed_frac.mean,
            s.clean_removed_frac.mean,
        );
    }
    println!("{}", serde_json::to_string(&report.summary()?)?);
    Ok(())
}
