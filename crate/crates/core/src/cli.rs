//! Command-line front end. Results go to files and stdout, diagnostics to
//! stderr; the exit code is 0 on success and 1 on any failure.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::bench::{self, BenchConfig, Operator};
use crate::check::{self, Target};
use crate::data::{self, parse_predictions, save_split, split_items, LabeledImage, TilePolicy};
use crate::error::{Error, Result};
use crate::metrics::{map50, BBox, Detection, GroundTruth, Scene};
use crate::model::{config_pairs, GraphSpec, Model, Scale, Variant};
use crate::train::{self, ablation_csv, gen_synth_with, history_csv, SynthConfig, TrainConfig, TrainOutput};

#[derive(Debug, Parser)]
#[command(
    name = "fabme",
    version,
    about = "Fabric defect detector: data prep, training, evaluation and checks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Cut large images into fixed-size annotated tiles and split by source.
    Tile(TileArgs),
    /// Generate a synthetic fabric-defect dataset.
    Synth(SynthArgs),
    /// Train a variant, or the ablation ladder with --ablation.
    Train(TrainArgs),
    /// Score a checkpoint, or a directory of prediction files, by mAP@0.5.
    Eval(EvalArgs),
    /// Time ss2d against quadratic attention over a token sweep.
    Bench(BenchArgs),
    /// Finite-difference gradient check of one operator or block.
    Gradcheck(GradcheckArgs),
    /// Count the parameters of a variant.
    Params(ParamsArgs),
}

#[derive(Debug, Args)]
struct TileArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 640)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 200)]
    n: usize,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Image side in pixels.
    #[arg(long, default_value_t = 64)]
    size: usize,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Overrides the config `variant` (default fabme).
    #[arg(long)]
    variant: Option<String>,
    /// Dataset root holding `train/` and `val/`.
    #[arg(long)]
    data: PathBuf,
    /// `key = value` file with graph and training keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "runs/train")]
    out: PathBuf,
    /// Scale preset used when the config names none.
    #[arg(long, default_value = "nano-test")]
    scale: String,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Train baseline, +EMCA and +C2F-VMamba(C2F3) and write ablation.csv.
    #[arg(long)]
    ablation: bool,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Checkpoint written by `train`; its `.graph` sidecar must sit beside it.
    #[arg(long, required_unless_present = "predictions", conflicts_with = "predictions")]
    model: Option<PathBuf>,
    /// Split directory with images and ground-truth labels.
    #[arg(long)]
    data: PathBuf,
    /// Directory of `<id>.txt` prediction files (label lines plus a confidence).
    #[arg(long)]
    predictions: Option<PathBuf>,
    /// Class count when scoring prediction files (default: largest id seen).
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long, default_value = "eval.csv")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct BenchArgs {
    /// `ss2d`, `attention` or `all`.
    #[arg(long, default_value = "all")]
    op: String,
    /// Comma-separated token counts, each a perfect square.
    #[arg(long, value_delimiter = ',', default_values_t = bench::DEFAULT_SWEEP)]
    sweep: Vec<usize>,
    #[arg(long, default_value_t = 16)]
    d_model: usize,
    #[arg(long, default_value_t = 16)]
    d_state: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "bench.csv")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    /// conv2d, conv1d, pools, activations, group_norm, ss2d, vss, emca or c2f_vmamba.
    #[arg(long)]
    block: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "gradcheck.csv")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ParamsArgs {
    /// baseline, fabme, emca-only or c2f1..c2f4.
    #[arg(long)]
    variant: String,
    #[arg(long, default_value = "s")]
    scale: String,
    #[arg(long, default_value_t = 20)]
    classes: usize,
    #[arg(long, default_value = "params.csv")]
    out: PathBuf,
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::Tile(a) => tile(a),
        Command::Synth(a) => synth(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval(a),
        Command::Bench(a) => bench_cmd(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Params(a) => params(a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn write_result(path: &Path, body: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, body)?;
    eprintln!("wrote {}", path.display());
    Ok(())
}

fn tile(a: TileArgs) -> Result<()> {
    let policy = TilePolicy {
        tile: a.size,
        ..TilePolicy::default()
    };
    let s = data::tile_dataset(&a.input, &a.out, &policy, a.seed)?;
    eprintln!("wrote {}", a.out.join("stats.csv").display());
    println!(
        "{} sources -> {} train / {} val tiles, {} annotations",
        s.sources, s.train_tiles, s.val_tiles, s.annotations
    );
    Ok(())
}

fn synth(a: SynthArgs) -> Result<()> {
    let cfg = SynthConfig {
        size: a.size,
        ..SynthConfig::default()
    };
    let items = gen_synth_with(&cfg, a.n, a.classes, a.seed)?;
    let (tr, va) = split_items(items, (4, 1), a.seed);
    save_split(&a.out.join("train"), &tr)?;
    save_split(&a.out.join("val"), &va)?;
    let mut csv = String::from("id,split,n_annotations\n");
    for (split, items) in [("train", &tr), ("val", &va)] {
        for i in items.iter() {
            let _ = writeln!(csv, "{},{split},{}", i.id, i.annotations.len());
        }
    }
    write_result(&a.out.join("synth.csv"), &csv)?;
    println!(
        "{} train / {} val scenes with {} classes",
        tr.len(),
        va.len(),
        a.classes
    );
    Ok(())
}

/// Graph spec and training config from an optional file, with the class
/// count taken from the data unless the file sets it.
fn load_configs(a: &TrainArgs, items: &[LabeledImage]) -> Result<(GraphSpec, TrainConfig)> {
    let text = match &a.config {
        Some(p) => std::fs::read_to_string(p).map_err(|e| Error::Invalid(format!("{}: {e}", p.display())))?,
        None => String::new(),
    };
    let keys: Vec<String> = config_pairs(&text)?.into_iter().map(|(_, k, _)| k).collect();
    let has = |k: &str| keys.iter().any(|x| x == k);
    let mut header = String::new();
    if !has("scale") {
        a.scale.parse::<Scale>()?;
        let _ = writeln!(header, "scale = {}", a.scale);
    }
    let mut spec = GraphSpec::parse(&format!("{header}{text}"))?;
    let mut cfg = TrainConfig::parse(&text)?;
    match &a.variant {
        Some(v) => (spec.emca_enabled, spec.vmamba_position) = v.parse::<Variant>()?.toggles(),
        None if !has("variant") => (spec.emca_enabled, spec.vmamba_position) = Variant::FabMe.toggles(),
        None => {}
    }
    if !has("num_classes") {
        spec.num_classes = items
            .iter()
            .flat_map(|i| &i.annotations)
            .map(|a| a.class_id)
            .max()
            .unwrap_or(1);
    }
    if let Some(seed) = a.seed {
        cfg.seed = seed;
        spec.seed = seed;
    }
    spec.validate()?;
    Ok((spec, cfg))
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let train_set = data::load_split(&a.data.join("train"))?;
    let val_set = data::load_split(&a.data.join("val"))?;
    let (spec, cfg) = load_configs(&a, &train_set)?;
    for item in train_set.iter().chain(&val_set) {
        if item.image.width != spec.input_size || item.image.height != spec.input_size {
            return Err(Error::Invalid(format!(
                "image `{}` is {}x{}, the graph expects {s}x{s}",
                item.id,
                item.image.width,
                item.image.height,
                s = spec.input_size
            )));
        }
    }
    let log = |variant: Option<Variant>, r: &train::EpochRecord| {
        let tag = variant.map(|v| format!("[{v}] ")).unwrap_or_default();
        eprintln!(
            "{tag}epoch {:>3}  lr {:.5}  loss {:.4}  val mAP@0.5 {:.2}%",
            r.epoch,
            r.lr,
            r.train_loss,
            r.val_map50 * 100.0
        );
    };
    if a.ablation {
        let rows = train::run_ablation(
            &spec,
            &train::ABLATION_LADDER,
            &train_set,
            &val_set,
            &cfg,
            Some(&a.out),
            |v, r| log(Some(v), r),
        )?;
        let csv = ablation_csv(&rows);
        write_result(&a.out.join("ablation.csv"), &csv)?;
        print!("{csv}");
        return Ok(());
    }
    let mut model = Model::build(spec)?;
    let out = TrainOutput { dir: a.out.clone() };
    let outcome = train::train(&mut model, &train_set, &val_set, &cfg, Some(&out), |r| log(None, r))?;
    write_result(&out.history(), &history_csv(&outcome.history))?;
    println!(
        "best val mAP@0.5 = {:.2}% at epoch {} ({:?}); checkpoint {}",
        outcome.best_map50 * 100.0,
        outcome.best_epoch,
        outcome.stop,
        out.best_checkpoint().display()
    );
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let items = data::load_split(&a.data)?;
    let report = match (&a.model, &a.predictions) {
        (Some(ckpt), _) => {
            if !ckpt.is_file() {
                return Err(Error::Invalid(format!("checkpoint {} not found", ckpt.display())));
            }
            let model = train::load_model(ckpt)?;
            train::evaluate(&model, &items, &TrainConfig::default().decode)?
        }
        (None, Some(dir)) => {
            let scenes = prediction_scenes(dir, &items)?;
            let nc = a.classes.unwrap_or_else(|| {
                let ids = scenes.iter().flat_map(|s| {
                    s.ground_truth
                        .iter()
                        .map(|g| g.class_id)
                        .chain(s.detections.iter().map(|d| d.class_id))
                });
                ids.max().unwrap_or(1)
            });
            map50(&scenes, nc)?
        }
        (None, None) => return Err(Error::Invalid("pass --model or --predictions".into())),
    };
    write_result(&a.out, &report.to_csv())?;
    println!("{}", report.summary());
    Ok(())
}

fn pixel_box(a: &data::Annotation, img: &data::Image) -> Result<BBox> {
    let [x1, y1, x2, y2] = a.to_pixels(img.width, img.height);
    BBox::new(x1, y1, x2, y2)
}

/// Pairs each image with `<dir>/<id>.txt`; a missing file means no detections.
fn prediction_scenes(dir: &Path, items: &[LabeledImage]) -> Result<Vec<Scene>> {
    if !dir.is_dir() {
        return Err(Error::Invalid(format!("{} is not a directory", dir.display())));
    }
    items
        .iter()
        .map(|item| {
            let path = dir.join(format!("{}.txt", item.id));
            let preds = if path.is_file() {
                parse_predictions(&std::fs::read_to_string(&path)?, &path.display().to_string())?
            } else {
                Vec::new()
            };
            let detections = preds
                .iter()
                .map(|p| {
                    Ok(Detection {
                        class_id: p.annotation.class_id,
                        bbox: pixel_box(&p.annotation, &item.image)?,
                        confidence: p.confidence,
                    })
                })
                .collect::<Result<_>>()?;
            let ground_truth = item
                .annotations
                .iter()
                .map(|a| {
                    Ok(GroundTruth {
                        class_id: a.class_id,
                        bbox: pixel_box(a, &item.image)?,
                    })
                })
                .collect::<Result<_>>()?;
            Ok(Scene {
                detections,
                ground_truth,
            })
        })
        .collect()
}

fn bench_cmd(a: BenchArgs) -> Result<()> {
    let ops: Vec<Operator> = if a.op == "all" {
        Operator::ALL.to_vec()
    } else {
        vec![a.op.parse()?]
    };
    let cfg = BenchConfig {
        sweep: a.sweep,
        d_model: a.d_model,
        d_state: a.d_state,
        seed: a.seed,
        ..BenchConfig::default()
    };
    let mut rows = Vec::new();
    for op in ops {
        let r = bench::run(op, &cfg)?;
        let ratios: Vec<String> = bench::growth_ratios(&r, op).iter().map(|x| format!("{x:.2}")).collect();
        println!("{}: time ratio per sweep step [{}]", op.name(), ratios.join(", "));
        rows.extend(r);
    }
    write_result(&a.out, &bench::bench_csv(&rows))
}

fn gradcheck(a: GradcheckArgs) -> Result<()> {
    let target: Target = a.block.parse()?;
    let results = check::run(target, a.seed)?;
    let mut csv = String::from("check,max_rel_err,tol,passed\n");
    for r in &results {
        let _ = writeln!(
            csv,
            "{},{:e},{:e},{}",
            r.label, r.report.max_rel_err, r.report.tol, r.report.passed
        );
    }
    write_result(&a.out, &csv)?;
    let (worst, passed) = check::summarize(&results);
    if passed {
        println!("PASS max_rel_err={worst:.3e}");
        Ok(())
    } else {
        println!("FAIL max_rel_err={worst:.3e}");
        Err(Error::Invalid(format!("{} gradient check failed", target.name())))
    }
}

fn params(a: ParamsArgs) -> Result<()> {
    let variant: Variant = a.variant.parse()?;
    let mut spec = GraphSpec::preset(a.scale.parse()?, variant);
    spec.num_classes = a.classes;
    let model = Model::build(spec)?;
    let count = model.count_params();
    write_result(
        &a.out,
        &format!("variant,scale,params\n{variant},{},{count}\n", a.scale),
    )?;
    println!("{variant}: {count} parameters ({:.2}M)", count as f64 / 1e6);
    Ok(())
}
