//! The five pipeline commands and their argument surfaces.

use std::io::Write as _;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use npdk_core::anchors::{
    coverage_stats, generate_pyramid, parse_box_list, BoxSize, PyramidConfig,
};
use npdk_core::data::{
    fnv1a64, load_checkpoint, load_manifest, styles_for_count, synthesize, Image, Model, Split,
    SynthConfig,
};
use npdk_core::detection::Detection;
use npdk_core::eval::{
    average_precision, classification_accuracy, per_group_report, pr_curve_csv, pr_curve_svg,
    report_csv,
};

use crate::config::{resolve, FileConfig};
use crate::error::{usage, CliError};
use crate::train::{
    train_classifier, train_detector, ClassifierTrainConfig, DetectorTrainConfig, OptimizerChoice,
};

#[derive(Parser, Debug)]
#[command(name = "npdk", version, about = "Number-plate detection pipeline", disable_help_subcommand = true)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a deterministic synthetic plate-scene dataset
    Synth(SynthArgs),
    /// Train the classifier or the detector on a manifest
    Train(TrainArgs),
    /// Evaluate a checkpoint on a manifest's test split
    Eval(EvalArgs),
    /// Emit the anchor pyramid and its coverage of a box population
    Anchors(AnchorsArgs),
    /// Run detection on images and write a detections CSV
    Predict(PredictArgs),
}

#[derive(Args, Debug, Default)]
pub struct CommonArgs {
    /// key = value experiment file; flags override its values
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// master seed for all stochastic behavior
    #[arg(long)]
    pub seed: Option<u64>,
    /// output directory
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// worker threads (0 = all cores)
    #[arg(long)]
    pub threads: Option<usize>,
    /// suppress progress lines
    #[arg(long, short)]
    pub quiet: bool,
}

#[derive(Args, Debug, Default)]
pub struct SynthArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// number of scenes to render
    #[arg(long)]
    pub scenes: Option<usize>,
    /// square scene size in pixels
    #[arg(long)]
    pub image_size: Option<usize>,
    /// number of class styles
    #[arg(long)]
    pub classes: Option<usize>,
}

#[derive(Args, Debug, Default)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// manifest to train on
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// classifier | detector
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
}

#[derive(Args, Debug, Default)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// operating score threshold
    #[arg(long)]
    pub conf_threshold: Option<f64>,
    #[arg(long)]
    pub nms_threshold: Option<f64>,
}

#[derive(Args, Debug, Default)]
pub struct AnchorsArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// manifest whose annotated boxes form the population
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// explicit size list, e.g. 12x34,56x78 (height x width)
    #[arg(long)]
    pub sizes: Option<String>,
}

#[derive(Args, Debug, Default)]
pub struct PredictArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub conf_threshold: Option<f64>,
    #[arg(long)]
    pub nms_threshold: Option<f64>,
    /// images to run detection on
    pub images: Vec<PathBuf>,
}

/// Builds the global rayon pool once; later calls with the same intent are
/// harmless.
fn init_threads(threads: Option<usize>) {
    if let Some(n) = threads {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth(args) => run_synth(args),
        Command::Train(args) => run_train(args),
        Command::Eval(args) => run_eval(args),
        Command::Anchors(args) => run_anchors(args),
        Command::Predict(args) => run_predict(args),
    }
}

fn out_dir(common: &CommonArgs) -> Result<PathBuf, CliError> {
    common
        .out
        .clone()
        .ok_or_else(|| usage("--out DIR is required"))
}

pub fn run_synth(args: SynthArgs) -> Result<(), CliError> {
    init_threads(args.common.threads);
    let file = FileConfig::load(args.common.config.as_deref())?;
    let out = out_dir(&args.common)?;
    let class_count = resolve(args.classes, file.get("classes")?, 6usize);
    if class_count == 0 {
        return Err(usage("classes must be at least 1"));
    }
    let cfg = SynthConfig {
        seed: resolve(args.common.seed, file.get("seed")?, 0),
        num_scenes: resolve(args.scenes, file.get("scenes")?, 100),
        image_size: resolve(args.image_size, file.get("image_size")?, 768),
        classes: styles_for_count(class_count),
        size_range: (
            resolve(None, file.get("size_min")?, 10.0),
            resolve(None, file.get("size_max")?, 670.0),
        ),
        plates_per_scene: (
            resolve(None, file.get("plates_min")?, 1),
            resolve(None, file.get("plates_max")?, 2),
        ),
        train_fraction: resolve(None, file.get("train_fraction")?, 0.75),
    };
    let (dataset, skipped) = synthesize(&cfg, &out)?;
    let manifest_path = out.join("manifest.jsonl");
    let bytes = std::fs::read(&manifest_path)?;
    println!("scenes {}", dataset.samples.len());
    if skipped > 0 {
        eprintln!("warning: skipped {skipped} plates that could not be placed");
    }
    println!("manifest {:016x}", fnv1a64(&bytes));
    Ok(())
}

pub fn run_train(args: TrainArgs) -> Result<(), CliError> {
    init_threads(args.common.threads);
    let file = FileConfig::load(args.common.config.as_deref())?;
    let out = out_dir(&args.common)?;
    let data = args
        .data
        .clone()
        .or_else(|| file.get_str("data").map(PathBuf::from))
        .ok_or_else(|| usage("--data MANIFEST is required"))?;
    let dataset = load_manifest(&data)?;
    let mode = resolve(
        args.mode.clone(),
        file.get_str("mode").map(str::to_string),
        "classifier".to_string(),
    );
    match mode.as_str() {
        "classifier" => {
            let defaults = ClassifierTrainConfig::default();
            let widths = match file.get_str("widths") {
                Some("table2") => None,
                Some(_) => Some(
                    file.get_usize_list("widths")?
                        .expect("widths key present"),
                ),
                None => defaults.widths.clone(),
            };
            let cfg = ClassifierTrainConfig {
                seed: resolve(args.common.seed, file.get("seed")?, defaults.seed),
                input_size: resolve(None, file.get("input_size")?, defaults.input_size),
                widths,
                epochs: resolve(args.epochs, file.get("epochs")?, defaults.epochs),
                batch: resolve(args.batch, file.get("batch")?, defaults.batch),
                lr: resolve(args.lr, file.get("lr")?, defaults.lr),
                lr_drop_factor: resolve(None, file.get("lr_drop_factor")?, defaults.lr_drop_factor),
                lr_drop_period: resolve(None, file.get("lr_drop_period")?, defaults.lr_drop_period),
                momentum: resolve(None, file.get("momentum")?, defaults.momentum),
                stop_at_accuracy: file.get("stop_at_accuracy")?,
                finetune_epochs: resolve(None, file.get("finetune_epochs")?, 0),
                finetune_start_lr: resolve(None, file.get("finetune_lr")?, 1e-5),
                quiet: args.common.quiet,
            };
            let outcome = train_classifier(&dataset, &cfg, &out)?;
            println!("best accuracy {:.4}", outcome.best_metric);
            println!("checkpoint {}", outcome.checkpoint.display());
        }
        "detector" => {
            let defaults = DetectorTrainConfig::default();
            let anchor_bases = match file.get_str("anchor_bases") {
                Some(text) => parse_box_list(text).map_err(|e| usage(e.to_string()))?,
                None => defaults.anchor_bases.clone(),
            };
            let optimizer = match file.get_str("optimizer").unwrap_or("sgdm") {
                "sgdm" => OptimizerChoice::Sgdm,
                "adam" => OptimizerChoice::Adam,
                other => return Err(usage(format!("unknown optimizer {other:?}"))),
            };
            let cfg = DetectorTrainConfig {
                seed: resolve(args.common.seed, file.get("seed")?, defaults.seed),
                input_size: resolve(None, file.get("input_size")?, defaults.input_size),
                stage_widths: file
                    .get_usize_list("stage_widths")?
                    .unwrap_or(defaults.stage_widths.clone()),
                blocks: file.get_usize_list("blocks")?.unwrap_or(defaults.blocks.clone()),
                downsample: resolve(None, file.get("downsample")?, defaults.downsample),
                anchor_bases,
                anchor_levels: resolve(None, file.get("anchor_levels")?, defaults.anchor_levels),
                anchor_scale: resolve(None, file.get("anchor_scale")?, defaults.anchor_scale),
                epochs: resolve(args.epochs, file.get("epochs")?, defaults.epochs),
                batch: resolve(args.batch, file.get("batch")?, defaults.batch),
                lr: resolve(args.lr, file.get("lr")?, defaults.lr),
                optimizer,
                momentum: resolve(None, file.get("momentum")?, defaults.momentum),
                max_iters: file.get("iters")?,
                loss: npdk_core::detection::YoloLossConfig {
                    lambda_coord: resolve(None, file.get("lambda_coord")?, 5.0),
                    lambda_noobj: resolve(None, file.get("lambda_noobj")?, 0.5),
                    lambda_obj: resolve(None, file.get("lambda_obj")?, 1.0),
                    lambda_class: resolve(None, file.get("lambda_class")?, 1.0),
                },
                conf_threshold: resolve(None, file.get("conf_threshold")?, defaults.conf_threshold),
                nms_threshold: resolve(None, file.get("nms_threshold")?, defaults.nms_threshold),
                iou_threshold: resolve(None, file.get("iou_threshold")?, defaults.iou_threshold),
                eval_on_train: file.get_str("eval_split") == Some("train"),
                stop_at_ap: file.get("stop_at_ap")?,
                quiet: args.common.quiet,
            };
            let outcome = train_detector(&dataset, &cfg, &out)?;
            println!("best ap {:.4}", outcome.best_metric);
            println!("checkpoint {}", outcome.checkpoint.display());
        }
        other => return Err(usage(format!("unknown mode {other:?}; use classifier or detector"))),
    }
    Ok(())
}

pub fn run_eval(args: EvalArgs) -> Result<(), CliError> {
    init_threads(args.common.threads);
    let file = FileConfig::load(args.common.config.as_deref())?;
    let out = out_dir(&args.common)?;
    let checkpoint = args
        .checkpoint
        .clone()
        .or_else(|| file.get_str("checkpoint").map(PathBuf::from))
        .ok_or_else(|| usage("--checkpoint FILE is required"))?;
    let data = args
        .data
        .clone()
        .or_else(|| file.get_str("data").map(PathBuf::from))
        .ok_or_else(|| usage("--data MANIFEST is required"))?;
    let conf = resolve(args.conf_threshold, file.get("conf_threshold")?, 0.5);
    let nms_thr = resolve(args.nms_threshold, file.get("nms_threshold")?, 0.45);
    let iou_thr = resolve(None, file.get("iou_threshold")?, 0.5);

    std::fs::create_dir_all(&out)?;
    let model = load_checkpoint(&checkpoint)?;
    let dataset = load_manifest(&data)?;
    let test: Vec<_> = dataset.split(Split::Test).collect();
    let samples: Vec<_> = if test.is_empty() {
        dataset.samples.iter().collect()
    } else {
        test
    };
    if samples.is_empty() {
        return Err(usage("manifest has no samples to evaluate"));
    }

    match model {
        Model::Detector(detector) => {
            let total_gts: usize = samples.iter().map(|s| s.boxes.len()).sum();
            if total_gts == 0 {
                return Err(usage(
                    "AP undefined: the evaluated manifest has zero ground-truth boxes",
                ));
            }
            let mut grouped: Vec<(String, Vec<Detection>, Vec<npdk_core::detection::GroundTruthBox>)> =
                Vec::with_capacity(samples.len());
            for s in &samples {
                let image = Image::read_ppm(&s.image_ref)?;
                // sweep from a low threshold; the operating point filters later
                let dets = detector
                    .detect(&image, 0.05, nms_thr)
                    .map_err(|e| usage(e.to_string()))?;
                let gts: Vec<npdk_core::detection::GroundTruthBox> = s
                    .boxes
                    .iter()
                    .map(|b| npdk_core::detection::GroundTruthBox {
                        cx: b.x as f64 + b.w as f64 / 2.0,
                        cy: b.y as f64 + b.h as f64 / 2.0,
                        w: b.w as f64,
                        h: b.h as f64,
                        class_id: 0,
                    })
                    .collect();
                grouped.push((s.class_label.clone(), dets, gts));
            }
            let scenes: Vec<_> = grouped
                .iter()
                .map(|(_, d, g)| (d.clone(), g.clone()))
                .collect();
            let (_, points) =
                average_precision(&scenes, iou_thr).map_err(|e| usage(e.to_string()))?;
            // per-group report at the operating threshold
            let operating: Vec<_> = grouped
                .iter()
                .map(|(label, dets, gts)| {
                    let kept: Vec<Detection> = dets
                        .iter()
                        .filter(|d| d.score >= conf)
                        .cloned()
                        .collect();
                    (label.clone(), kept, gts.clone())
                })
                .collect();
            let mut report =
                per_group_report(&operating, iou_thr).map_err(|e| usage(e.to_string()))?;
            // AP comes from the full sweep, not the thresholded set
            let (ap, _) = average_precision(&scenes, iou_thr).map_err(|e| usage(e.to_string()))?;
            report.ap = ap;
            std::fs::write(out.join("pr_curve.csv"), pr_curve_csv(&points))?;
            std::fs::write(out.join("pr_curve.svg"), pr_curve_svg(&points))?;
            std::fs::write(out.join("report.csv"), report_csv(&report))?;
            println!("AP {:.4}", report.ap);
            println!("precision {:.4}", report.precision);
            println!("recall {:.4}", report.recall);
        }
        Model::Classifier(m) => {
            let mut predicted = Vec::with_capacity(samples.len());
            let mut truth = Vec::with_capacity(samples.len());
            let input_size = m.network.spec.input_shape.1;
            for s in &samples {
                let image = Image::read_ppm(&s.image_ref)?;
                let pixels = crate::train::classifier_input(&image, s, input_size)?;
                let mut batch = npdk_core::Tensor::zeros(&[1, 3, input_size, input_size]);
                batch.data_mut().copy_from_slice(&pixels);
                let probs = m
                    .network
                    .forward_infer(&batch)
                    .map_err(|e| usage(e.to_string()))?;
                let pred = probs
                    .data()
                    .iter()
                    .enumerate()
                    .fold((0usize, f64::NEG_INFINITY), |acc, (i, &p)| {
                        if p > acc.1 {
                            (i, p)
                        } else {
                            acc
                        }
                    })
                    .0;
                predicted.push(pred);
                let label = m
                    .class_names
                    .iter()
                    .position(|c| *c == s.class_label)
                    .ok_or_else(|| {
                        usage(format!(
                            "sample class {:?} unknown to the checkpoint",
                            s.class_label
                        ))
                    })?;
                truth.push(label);
            }
            let accuracy =
                classification_accuracy(&predicted, &truth).map_err(|e| usage(e.to_string()))?;
            let mut csv = String::from("group,accuracy,samples\n");
            csv.push_str(&format!("all,{:.6},{}\n", accuracy, predicted.len()));
            std::fs::write(out.join("report.csv"), csv)?;
            println!("accuracy {:.4}", accuracy);
        }
    }
    Ok(())
}

pub fn run_anchors(args: AnchorsArgs) -> Result<(), CliError> {
    init_threads(args.common.threads);
    let file = FileConfig::load(args.common.config.as_deref())?;
    let out = out_dir(&args.common)?;
    std::fs::create_dir_all(&out)?;

    let defaults = PyramidConfig::default();
    let bases = match file.get_str("anchor_bases") {
        Some(text) => parse_box_list(text).map_err(|e| usage(e.to_string()))?,
        None => defaults.base_sizes,
    };
    let cfg = PyramidConfig {
        base_sizes: bases,
        num_levels: resolve(None, file.get("anchor_levels")?, defaults.num_levels),
        scale: resolve(None, file.get("anchor_scale")?, defaults.scale),
    };
    let set = generate_pyramid(&cfg).map_err(|e| usage(e.to_string()))?;
    let mut anchors_csv = String::from("index,height,width\n");
    for (i, a) in set.anchors().iter().enumerate() {
        anchors_csv.push_str(&format!("{},{:.6},{:.6}\n", i, a.h, a.w));
    }
    std::fs::write(out.join("anchors.csv"), anchors_csv)?;
    println!("anchors {}", set.len());

    let boxes: Option<Vec<BoxSize>> = if let Some(sizes) = &args.sizes {
        Some(parse_box_list(sizes).map_err(|e| usage(e.to_string()))?)
    } else if let Some(data) = args
        .data
        .clone()
        .or_else(|| file.get_str("data").map(PathBuf::from))
    {
        let dataset = load_manifest(&data)?;
        Some(
            dataset
                .samples
                .iter()
                .flat_map(|s| {
                    s.boxes
                        .iter()
                        .map(|b| BoxSize::new(b.h as f64, b.w as f64))
                })
                .collect(),
        )
    } else {
        None
    };

    if let Some(boxes) = boxes {
        if boxes.is_empty() {
            return Err(usage("box population is empty"));
        }
        let report = coverage_stats(&boxes, &set).map_err(|e| usage(e.to_string()))?;
        std::fs::write(out.join("coverage.csv"), report.to_csv(&boxes))?;
        println!(
            "coverage min {:.4} mean {:.4}",
            report.min_best_iou, report.mean_best_iou
        );
    }
    Ok(())
}

pub fn run_predict(args: PredictArgs) -> Result<(), CliError> {
    init_threads(args.common.threads);
    let file = FileConfig::load(args.common.config.as_deref())?;
    let out = out_dir(&args.common)?;
    std::fs::create_dir_all(&out)?;
    let checkpoint = args
        .checkpoint
        .clone()
        .or_else(|| file.get_str("checkpoint").map(PathBuf::from))
        .ok_or_else(|| usage("--checkpoint FILE is required"))?;
    let conf = resolve(args.conf_threshold, file.get("conf_threshold")?, 0.5);
    let nms_thr = resolve(args.nms_threshold, file.get("nms_threshold")?, 0.45);

    let model = load_checkpoint(&checkpoint)?;
    let Model::Detector(detector) = model else {
        return Err(usage("predict needs a detector checkpoint"));
    };

    let csv_path = out.join("detections.csv");
    let mut csv = std::fs::File::create(&csv_path)?;
    writeln!(csv, "image,cx,cy,w,h,score,class_id")?;
    let mut failures = 0usize;
    for path in &args.images {
        match Image::read_ppm(path) {
            Ok(image) => {
                let dets = detector
                    .detect(&image, conf, nms_thr)
                    .map_err(|e| usage(e.to_string()))?;
                for d in &dets {
                    writeln!(
                        csv,
                        "{},{:.6},{:.6},{:.6},{:.6},{:.6},{}",
                        path.display(),
                        d.cx,
                        d.cy,
                        d.w,
                        d.h,
                        d.score,
                        d.class_id
                    )?;
                }
                if !args.common.quiet {
                    println!("{}: {} detections", path.display(), dets.len());
                }
            }
            Err(e) => {
                eprintln!("{}: {e}", path.display());
                failures += 1;
            }
        }
    }
    if failures > 0 {
        return Err(CliError::Io(format!(
            "{failures} of {} images could not be read",
            args.images.len()
        )));
    }
    Ok(())
}
