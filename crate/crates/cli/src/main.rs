use std::fs;
use std::path::{Path, PathBuf};

use advseg::adaptation::{
    adapt, clean_subset, fine_tune, AdaptConfig, AdaptState, DomainScan, FineTuneConfig, RestoredScan,
};
use advseg::attack::{contaminate_dataset, AttackConfig};
use advseg::autodiff::SegModel;
use advseg::cloud::io::{list_scans, ScanEntry};
use advseg::cloud::{synth_scene, LabeledCloud, SceneSpec};
use advseg::decoder::DecoderModel;
use advseg::eval::{
    distribution_shift_report, evaluate, iou_per_class, label_stats, miou_excluding, pretrain, run_experiment,
    train_scene_decoder, tune_lambda,
};
use advseg::rng;
use advseg::train::Objective;
use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

mod settings;

use settings::{Config, Settings};

#[derive(Parser, Debug)]
#[command(version, about = "Source-corruption attacks and robust adaptation for point-cloud segmentation")]
struct Cli {
    /// Key-value config file with [section] headers.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override any setting, e.g. `--set adapt.steps=50`. Repeatable.
    #[arg(long = "set", global = true, value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,
    /// Seed of every random stream; a list or range for `run`.
    #[arg(long, global = true)]
    seed: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write seeded synthetic scans in the sequences/velodyne layout.
    Synth(SynthArgs),
    /// Train a segmentation model on a labeled dataset.
    Pretrain(PretrainArgs),
    /// Write a contaminated copy of a dataset and its manifest.
    Attack(AttackArgs),
    /// Train the restoration decoder on clean patches.
    TrainDecoder(TrainDecoderArgs),
    /// Teacher-student adaptation from a source to a target dataset.
    Adapt(AdaptArgs),
    /// Fine-tune the last layers on a small clean subset.
    Finetune(FinetuneArgs),
    /// Bayesian search of the loss blend weight.
    TuneLambda(TuneLambdaArgs),
    /// Per-class IoU and mIoU of a model on a labeled dataset.
    Eval(EvalArgs),
    /// Class-distribution shift between two datasets.
    Report(ReportArgs),
    /// Full ablation grid over all configured seeds.
    Run(RunArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    /// `source` or `target` scene family.
    #[arg(long)]
    domain: Option<String>,
    #[arg(long)]
    scans: Option<usize>,
    #[arg(long)]
    points: Option<usize>,
}

#[derive(Args, Debug)]
struct PretrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    /// Use the blended key-point/SoftDice objective.
    #[arg(long)]
    rlt: bool,
    #[arg(long)]
    lambda: Option<f64>,
}

#[derive(Args, Debug)]
struct AttackArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    selection_perc: Option<f64>,
    #[arg(long)]
    flip_fraction: Option<f64>,
}

#[derive(Args, Debug)]
struct TrainDecoderArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    kl_weight: Option<f64>,
}

#[derive(Args, Debug)]
struct AdaptArgs {
    #[arg(long)]
    source: PathBuf,
    #[arg(long)]
    target: PathBuf,
    #[arg(long)]
    model: PathBuf,
    /// Enables the decoder branch: restored source points plus neighborhood refinement.
    #[arg(long)]
    decoder: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    steps: Option<usize>,
    /// Train with the blended objective.
    #[arg(long)]
    rlt: bool,
    /// Per-step losses as CSV.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct FinetuneArgs {
    /// Clean labeled source dataset.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    clean_frac: Option<f64>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    rlt: bool,
}

#[derive(Args, Debug)]
struct TuneLambdaArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    budget: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Trace CSV; printed to stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    model: PathBuf,
    /// Per-class IoU CSV.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    ignore_class: Option<usize>,
}

#[derive(Args, Debug)]
struct ReportArgs {
    #[arg(long)]
    before: PathBuf,
    #[arg(long)]
    after: PathBuf,
    #[arg(long)]
    num_classes: Option<usize>,
    /// Report CSV; printed to stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct RunArgs {
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated row keys (clean, baseline, a..g) or `all`.
    #[arg(long)]
    rows: Option<String>,
    #[arg(long)]
    scenario: Option<String>,
}

fn settings(cli: &Cli) -> Result<Settings> {
    let mut s = match &cli.config {
        Some(p) => Settings::load(p)?,
        None => Settings::default(),
    };
    for o in &cli.overrides {
        s.push_assignment(o)?;
    }
    s.push_opt("experiment.seeds", cli.seed.as_deref());
    let path = |p: &Path| p.display().to_string();
    match &cli.command {
        Command::Synth(a) => {
            s.push_opt("synth.domain", a.domain.as_deref());
            s.push_opt("synth.scans", a.scans);
            s.push_opt("data.points_per_scan", a.points);
        }
        Command::Pretrain(a) => {
            s.push_opt("pretrain.epochs", a.epochs);
            s.push_opt("rlt.lambda", a.lambda);
            if a.rlt {
                s.push("pretrain.rlt", true);
            }
        }
        Command::Attack(a) => {
            s.push_opt("attack.epsilon", a.epsilon);
            s.push_opt("attack.steps", a.steps);
            s.push_opt("attack.selection_perc", a.selection_perc);
            s.push_opt("attack.flip_fraction", a.flip_fraction);
        }
        Command::TrainDecoder(a) => {
            s.push_opt("decoder.epochs", a.epochs);
            s.push_opt("decoder.kl_weight", a.kl_weight);
        }
        Command::Adapt(a) => {
            s.push_opt("adapt.steps", a.steps);
            if a.rlt {
                s.push("pretrain.rlt", true);
            }
        }
        Command::Finetune(a) => {
            s.push_opt("experiment.clean_fraction", a.clean_frac);
            s.push_opt("finetune.patience", a.patience);
            if a.rlt {
                s.push("pretrain.rlt", true);
            }
        }
        Command::TuneLambda(a) => {
            s.push_opt("lambda.budget", a.budget);
            s.push_opt("lambda.epochs", a.epochs);
        }
        Command::Eval(a) => s.push_opt("experiment.ignore_class", a.ignore_class),
        Command::Report(a) => s.push_opt("experiment.num_classes", a.num_classes),
        Command::Run(a) => {
            s.push_opt("experiment.output", a.out.as_deref().map(path));
            s.push_opt("experiment.rows", a.rows.as_deref());
            s.push_opt("experiment.scenario", a.scenario.as_deref());
        }
    }
    Ok(s)
}

fn load_dataset(root: &Path) -> Result<Vec<LabeledCloud>> {
    let entries = list_scans(root)?;
    if entries.is_empty() {
        bail!("no scans under {}", root.display());
    }
    entries
        .iter()
        .map(|e| e.load().with_context(|| format!("loading {}", e.bin.display())))
        .collect()
}

fn objective(cfg: &Config) -> Objective {
    if cfg.pretrain_rlt {
        Objective::Rlt(cfg.experiment.rlt)
    } else {
        Objective::CrossEntropy
    }
}

fn write_or_print(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => {
            if let Some(parent) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(parent)?;
            }
            fs::write(p, text).with_context(|| format!("writing {}", p.display()))
        }
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn synth(cfg: &Config, a: &SynthArgs) -> Result<()> {
    let seed = cfg.seed();
    let points = match cfg.experiment.data {
        advseg::eval::DataSource::Synthetic { points_per_scan, .. } => points_per_scan,
        advseg::eval::DataSource::Directories { .. } => bail!("synth needs synthetic data settings"),
    };
    let spec: fn(usize, u64) -> SceneSpec = if cfg.synth_domain == "target" {
        SceneSpec::target
    } else {
        SceneSpec::source
    };
    for i in 0..cfg.synth_scans {
        let s = rng::substream_seed(seed, &format!("{}/{i}", cfg.synth_domain));
        let cloud = synth_scene(&spec(points, s))?;
        ScanEntry::new(&a.out, "00", &format!("{i:06}")).save(&cloud)?;
    }
    println!("wrote {} {} scans to {}", cfg.synth_scans, cfg.synth_domain, a.out.display());
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let cfg = settings(&cli)?.config()?;
    let e = &cfg.experiment;
    let seed = cfg.seed();
    match &cli.command {
        Command::Synth(a) => synth(&cfg, a)?,
        Command::Pretrain(a) => {
            let scans = load_dataset(&a.data)?;
            let model = pretrain(&scans, e.num_classes, &e.pretrain, objective(&cfg), seed)?;
            model.save(&a.out)?;
            println!("saved {}", a.out.display());
        }
        Command::Attack(a) => {
            let model = SegModel::load(&a.model)?;
            let attack = AttackConfig { seed, ..e.attack };
            let manifest = contaminate_dataset(&a.input, &a.out, &model, &attack)?;
            let skipped = manifest.rows.iter().filter(|r| r.skipped.is_some()).count();
            println!(
                "contaminated {} scans ({} skipped), {} labels flipped",
                manifest.rows.len() - skipped,
                skipped,
                manifest.total_flips()
            );
        }
        Command::TrainDecoder(a) => {
            let scans = load_dataset(&a.data)?;
            let model = train_scene_decoder(&scans, e, seed)?;
            model.save(&a.out)?;
            println!("saved {}", a.out.display());
        }
        Command::Adapt(a) => {
            let model = SegModel::load(&a.model)?;
            let obj = objective(&cfg);
            let k = e.adapt.hnpu.k;
            let to_domain = |scans: Vec<LabeledCloud>| -> Result<Vec<DomainScan>> {
                scans
                    .iter()
                    .map(|c| DomainScan::new(&model, c, &obj, k).map_err(Into::into))
                    .collect()
            };
            let source_clouds = load_dataset(&a.source)?;
            let restored = match &a.decoder {
                Some(p) => {
                    let dec = DecoderModel::load(p)?;
                    source_clouds
                        .iter()
                        .map(|c| {
                            let pts = dec.restore_scene(c, e.patch_points)?;
                            Ok(Some(RestoredScan::new(&model, pts, &obj)?))
                        })
                        .collect::<Result<Vec<_>>>()?
                }
                None => Vec::new(),
            };
            let sources = to_domain(source_clouds)?;
            let targets = to_domain(load_dataset(&a.target)?)?;
            let adapt_cfg = AdaptConfig {
                objective: obj,
                use_hnpu: a.decoder.is_some() && e.adapt.use_hnpu,
                hnpu_on_source: a.decoder.is_some() && e.adapt.hnpu_on_source,
                seed: rng::substream_seed(seed, "adapt"),
                ..e.adapt
            };
            let mut state = AdaptState::new(&model, adapt_cfg.ema_decay, adapt_cfg.mix_ratio, adapt_cfg.hnpu)?;
            let report = adapt(&mut state, &sources, &targets, &restored, &adapt_cfg)?;
            state.teacher.save(&a.out)?;
            if let Some(t) = &a.trace {
                let mut csv = String::from("step,loss_s2t,loss_t2s\n");
                for (i, l) in report.losses.iter().enumerate() {
                    csv.push_str(&format!("{i},{},{}\n", l[0], l[1]));
                }
                write_or_print(Some(t), &csv)?;
            }
            println!(
                "adapted for {} steps, mean valid pseudo-label fraction {:.3}; saved {}",
                report.losses.len(),
                report.valid_fraction,
                a.out.display()
            );
        }
        Command::Finetune(a) => {
            let model = SegModel::load(&a.model)?;
            let obj = objective(&cfg);
            let scans = load_dataset(&a.data)?;
            let subset = clean_subset(
                &model,
                &scans,
                e.clean_fraction,
                e.val_fraction,
                &obj,
                rng::substream_seed(seed, "clean-subset"),
            )?;
            let ft = FineTuneConfig {
                objective: obj,
                seed: rng::substream_seed(seed, "fine-tune"),
                ..e.fine_tune
            };
            let report = fine_tune(&model, &subset, &ft)?;
            report.model.save(&a.out)?;
            println!(
                "best validation mIoU {:.4} after epoch {}; saved {}",
                report.val_miou.get(report.best_epoch.wrapping_sub(1)).copied().unwrap_or(f64::NAN),
                report.best_epoch,
                a.out.display()
            );
        }
        Command::TuneLambda(a) => {
            let scans = load_dataset(&a.data)?;
            let r = tune_lambda(&scans, e.num_classes, &e.pretrain, &e.rlt, e.lambda_epochs, e.lambda_budget, seed)?;
            write_or_print(a.out.as_deref(), &r.to_csv())?;
            eprintln!("best lambda {:.4} (validation mIoU {:.4})", r.best_lambda, r.best_value);
        }
        Command::Eval(a) => {
            let model = SegModel::load(&a.model)?;
            let cm = evaluate(&model, &load_dataset(&a.data)?)?;
            let ious = iou_per_class(&cm);
            let mut csv = String::from("class,iou\n");
            for (c, v) in ious.iter().enumerate() {
                csv.push_str(&format!("{c},{}\n", v.map_or("nan".into(), |x| x.to_string())));
            }
            write_or_print(a.out.as_deref(), &csv)?;
            match miou_excluding(&cm, e.ignore_class) {
                Some(m) => println!("mIoU {:.2}", 100.0 * m),
                None => println!("mIoU undefined: no class present"),
            }
        }
        Command::Report(a) => {
            let before = label_stats(&load_dataset(&a.before)?, e.num_classes)?;
            let after = label_stats(&load_dataset(&a.after)?, e.num_classes)?;
            let report = distribution_shift_report(&before, &after)?;
            write_or_print(a.out.as_deref(), &report.to_csv())?;
        }
        Command::Run(_) => {
            let result = run_experiment(e)?;
            println!("{}", result.summary());
            if let Some(dir) = &e.output_dir {
                result.write(dir)?;
                println!("results written to {}", dir.display());
            }
        }
    }
    Ok(())
}
