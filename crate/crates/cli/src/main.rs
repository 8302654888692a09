use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use bda::backbone::UNet;
use bda::config::{self, Stage, TrainConfig};
use bda::gradcheck;
use bda::infer;
use bda::io::checkpoint::Checkpoint;
use bda::io::dataset::{DatasetManifest, Split};
use bda::io::pnm;
use bda::io::synth::{synth_generate, SynthConfig};
use bda::metrics::MetricsReport;
use bda::sample::LabelMap;
use bda::train::{self, holdout_split};
use bda::Error;

mod report;

const METRICS_FILE: &str = "metrics.json";

#[derive(Parser)]
#[command(name = "bda", version, about = "Two-stage building damage assessment")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic train and test splits under OUT/train and OUT/test.
    Synth(SynthArgs),
    /// Train the stage-1 building segmenter on pre-disaster images.
    TrainSeg(TrainArgs),
    /// Train the stage-2 damage classifier on pre/post pairs.
    TrainDamage(TrainArgs),
    /// Write predicted class maps and building masks for every pair.
    Predict(EvalArgs),
    /// Score both stages on a split and write metrics.json.
    Evaluate(EvalArgs),
    /// Compare analytic gradients with finite differences.
    Gradcheck(GradcheckArgs),
    /// Turn metrics.json and loss curves in OUT into CSV tables and an SVG plot.
    Report(ReportArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 200)]
    train_count: usize,
    #[arg(long, default_value_t = 50)]
    test_count: usize,
    #[arg(long, default_value_t = 64)]
    extent: usize,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset root holding manifest.tsv.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for the checkpoint and loss curve.
    #[arg(long)]
    out: PathBuf,
    /// Settings file with one `key = value` per line.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Stage-1 checkpoint used to initialize stage 2.
    #[arg(long)]
    stage1_checkpoint: Option<PathBuf>,
    /// on|off
    #[arg(long)]
    mff: Option<String>,
    /// Comma-separated subset of dconv1,dconv2,dconv3, or none.
    #[arg(long)]
    cda: Option<String>,
    /// on|off
    #[arg(long)]
    cutmix: Option<String>,
    #[arg(long)]
    difficult_classes: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Stage-2 checkpoint; defaults to OUT/stage2.bdack.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Defaults to OUT/stage1.bdack.
    #[arg(long)]
    stage1_checkpoint: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// First seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 10)]
    seeds: u64,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    out: PathBuf,
}

/// Anything that ends the process with a non-zero status.
enum Failure {
    Usage(String),
    Pipeline(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Pipeline(e)
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::TrainSeg(a) => train_stage(Stage::One, a),
        Command::TrainDamage(a) => train_stage(Stage::Two, a),
        Command::Predict(a) => predict(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Gradcheck(a) => run_gradcheck(a),
        Command::Report(a) => report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Pipeline(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn synth(a: SynthArgs) -> Outcome {
    for (split, count) in [(Split::Train, a.train_count), (Split::Test, a.test_count)] {
        let cfg = SynthConfig {
            num_samples: count,
            extent: a.extent,
            seed: a.seed,
            ..Default::default()
        };
        let root = a.out.join(split.to_string());
        let m = synth_generate(&cfg, &root, split)?;
        println!("{}: {} pairs", root.display(), m.len());
    }
    Ok(())
}

fn build_config(stage: Stage, a: &TrainArgs) -> Result<TrainConfig, Failure> {
    let mut cfg = TrainConfig::desk(stage);
    if let Some(path) = &a.config {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::Usage(format!("cannot read config {}: {e}", path.display())))?;
        cfg.apply_text(&text)?;
        if cfg.stage != stage {
            return Err(
                Error::Config(format!("config file sets stage {}", cfg.stage.number())).into(),
            );
        }
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(v) = &a.mff {
        cfg.mff = config::parse_switch(v)?;
    }
    if let Some(v) = &a.cda {
        cfg.cda_levels = config::parse_cda_levels(v)?;
    }
    if let Some(v) = &a.cutmix {
        cfg.cutmix = config::parse_switch(v)?;
    }
    if let Some(v) = &a.difficult_classes {
        cfg.difficult_classes = config::parse_classes(v)?;
    }
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_model(path: &Path) -> Result<UNet, Failure> {
    Ok(Checkpoint::load(path)?.to_model()?)
}

fn train_stage(stage: Stage, a: TrainArgs) -> Outcome {
    let cfg = build_config(stage, &a)?;
    if stage == Stage::One && a.stage1_checkpoint.is_some() {
        return Err(Failure::Usage(
            "--stage1-checkpoint only applies to train-damage".into(),
        ));
    }
    let manifest = DatasetManifest::load(&a.data)?;
    if manifest.is_empty() {
        return Err(Error::Data(format!("{}: manifest has no records", a.data.display())).into());
    }
    let (fit, held) = holdout_split(manifest.len(), cfg.val_fraction);
    std::fs::create_dir_all(&a.out)
        .map_err(|e| Failure::Usage(format!("{}: {e}", a.out.display())))?;
    log::info!(
        "stage {}: {} training pairs, {} held out, config {}",
        stage.number(),
        fit.len(),
        held.len(),
        cfg.hash()
    );

    let outcome = match stage {
        Stage::One => {
            // post images are never opened for stage 1
            let all = manifest.load_all_seg()?;
            let pick = |ix: &[usize]| ix.iter().map(|&i| all[i].clone()).collect::<Vec<_>>();
            train::train_stage1(&pick(&fit), &pick(&held), &cfg, Some(&a.out))?
        }
        Stage::Two => {
            let stage1 = a.stage1_checkpoint.as_deref().map(load_model).transpose()?;
            let all = manifest.load_all()?;
            let pick = |ix: &[usize]| ix.iter().map(|&i| all[i].clone()).collect::<Vec<_>>();
            train::train_stage2(
                &pick(&fit),
                &pick(&held),
                &cfg,
                stage1.as_ref(),
                Some(&a.out),
            )?
        }
    };
    if let (Some(last), Some(path)) = (outcome.history.last(), &outcome.checkpoint) {
        println!(
            "stage {} done: {} epochs, final train loss {:.5}, checkpoint {}",
            stage.number(),
            last.epoch,
            last.train_loss,
            path.display()
        );
    }
    Ok(())
}

fn eval_models(a: &EvalArgs) -> Result<(DatasetManifest, UNet, UNet), Failure> {
    let s1 = a
        .stage1_checkpoint
        .clone()
        .unwrap_or_else(|| train::checkpoint_path(&a.out, Stage::One));
    let s2 = a
        .checkpoint
        .clone()
        .unwrap_or_else(|| train::checkpoint_path(&a.out, Stage::Two));
    let manifest = DatasetManifest::load(&a.data)?;
    Ok((manifest, load_model(&s1)?, load_model(&s2)?))
}

fn predict(a: EvalArgs) -> Outcome {
    let (manifest, s1, s2) = eval_models(&a)?;
    let dir = a.out.join("predictions");
    for i in 0..manifest.len() {
        let sample = manifest.load_sample(i)?;
        let out = infer::predict(&s1, &s2, &sample)?;
        let mask = LabelMap::new(
            sample.height(),
            sample.width(),
            out.p_b.iter().map(|&b| b as u8).collect(),
        )?;
        pnm::write_label(&dir.join(format!("{}_damage.pgm", sample.id)), &out.p_final)?;
        pnm::write_label(&dir.join(format!("{}_building.pgm", sample.id)), &mask)?;
    }
    println!("{} predictions in {}", manifest.len(), dir.display());
    Ok(())
}

fn evaluate(a: EvalArgs) -> Outcome {
    let (manifest, s1, s2) = eval_models(&a)?;
    let eval = infer::evaluate(&manifest, &s1, &s2)?;
    let r = eval.report();
    let json = serde_json::to_string_pretty(&r).expect("report serializes");
    std::fs::create_dir_all(&a.out)
        .map_err(|e| Failure::Usage(format!("{}: {e}", a.out.display())))?;
    bda::io::write_atomic(&a.out.join(METRICS_FILE), json.as_bytes())?;
    println!(
        "{} images: f1_b {:.4}, f1_d {:.4}, f1_s {:.4}, masked violations {}",
        eval.images, r.f1_b, r.f1_d, r.f1_s, eval.masked_violations
    );
    Ok(())
}

fn run_gradcheck(a: GradcheckArgs) -> Outcome {
    let results = gradcheck::suite(a.seed..a.seed + a.seeds)?;
    let failed: Vec<_> = results.iter().filter(|r| !r.passed()).collect();
    for r in &failed {
        println!(
            "FAIL {} seed {}: max relative error {:.3e}",
            r.name, r.seed, r.max_rel_error
        );
    }
    let worst = results.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    println!(
        "{} checks, {} failed, worst relative error {worst:.3e} (tolerance {:.0e})",
        results.len(),
        failed.len(),
        gradcheck::TOLERANCE
    );
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Numerical(format!("{} gradient checks failed", failed.len())).into())
    }
}

fn report(a: ReportArgs) -> Outcome {
    let read = |p: &Path| {
        std::fs::read_to_string(p).map_err(|e| Error::Data(format!("{}: {e}", p.display())))
    };
    let metrics: MetricsReport = serde_json::from_str(&read(&a.out.join(METRICS_FILE))?)
        .map_err(|e| Error::Data(format!("{METRICS_FILE}: {e}")))?;
    let mut curves = Vec::new();
    for stage in [Stage::One, Stage::Two] {
        let p = train::loss_csv_path(&a.out, stage);
        if p.exists() {
            curves.push(report::parse_loss_csv(stage.number(), &read(&p)?).map_err(Error::Data)?);
        }
    }
    let write =
        |name: &str, text: String| bda::io::write_atomic(&a.out.join(name), text.as_bytes());
    write("confusion.csv", report::confusion_csv(&metrics.confusion))?;
    write("loss_curves.csv", report::curves_csv(&curves))?;
    write("loss_curves.svg", report::curves_svg(&curves))?;
    println!(
        "{}",
        serde_json::to_string_pretty(&metrics).expect("report serializes")
    );
    Ok(())
}
