//! Training loops for the plate classifier and the anchor-based detector:
//! SGDM main phase with the halve-every-two-epochs schedule, optional ADAM
//! fine-tuning with batch doubling, per-epoch CSV logging, best-checkpoint
//! saving.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use npdk_core::anchors::{generate_pyramid, AnchorSet, BoxSize, PyramidConfig};
use npdk_core::arch::{
    build_backbone, build_classifier, build_compact_classifier, BackboneConfig, Network,
};
use npdk_core::data::{
    letterbox, save_checkpoint, ClassifierModel, Dataset, Image, Model, Split,
};
use npdk_core::detection::{
    decode_predictions, encode_targets, nms, yolo_loss, Detector, GroundTruthBox, TargetGrid,
    YoloLossConfig,
};
use npdk_core::eval::average_precision;
use npdk_core::nn::softmax_cross_entropy;
use npdk_core::optim::{
    finetune_batch_size, schedule_lr, FinetuneSchedule, Optimizer, Phase, TrainSchedule,
};
use npdk_core::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{usage, CliError};

pub struct TrainOutcome {
    pub best_metric: f64,
    pub epochs_run: usize,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
}

#[derive(Debug, Clone)]
pub struct ClassifierTrainConfig {
    pub seed: u64,
    pub input_size: usize,
    /// Conv widths of the compact stack; None selects the full 224px stack.
    pub widths: Option<Vec<usize>>,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub lr_drop_factor: f64,
    pub lr_drop_period: usize,
    pub momentum: f64,
    /// Stop the main phase early once test accuracy reaches this value.
    pub stop_at_accuracy: Option<f64>,
    pub finetune_epochs: usize,
    pub finetune_start_lr: f64,
    pub quiet: bool,
}

impl Default for ClassifierTrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            input_size: 64,
            widths: Some(vec![4, 8, 8, 16, 16, 32]),
            epochs: 10,
            batch: 120,
            lr: 2.5e-2,
            lr_drop_factor: 0.5,
            lr_drop_period: 2,
            momentum: 0.9,
            stop_at_accuracy: None,
            finetune_epochs: 0,
            finetune_start_lr: 1e-5,
            quiet: false,
        }
    }
}

struct ClassifierSample {
    pixels: Vec<f64>,
    label: usize,
}

/// Crop to the first annotated box with a 10% margin (the classification
/// pipeline sees detected plates), letterbox to the network input.
pub fn classifier_input(image: &Image, sample: &npdk_core::data::SampleAnnotation, input_size: usize) -> Result<Vec<f64>, CliError> {
    let cropped = match sample.boxes.first() {
        Some(b) => {
            let mx = (b.w as f64 * 0.1).ceil() as i64;
            let my = (b.h as f64 * 0.1).ceil() as i64;
            image.crop(b.x - mx, b.y - my, b.w + 2 * mx, b.h + 2 * my)
        }
        None => image.clone(),
    };
    let (boxed, _) = letterbox(&cropped, input_size)?;
    Ok(boxed.to_tensor().into_data())
}

fn load_classifier_samples(
    dataset: &Dataset,
    input_size: usize,
) -> Result<(Vec<ClassifierSample>, Vec<ClassifierSample>), CliError> {
    let mut train = Vec::new();
    let mut test = Vec::new();
    for sample in &dataset.samples {
        let image = Image::read_ppm(&sample.image_ref)?;
        let label = dataset
            .class_index(&sample.class_label)
            .ok_or_else(|| usage(format!("class {:?} not in manifest classes", sample.class_label)))?;
        let entry = ClassifierSample {
            pixels: classifier_input(&image, sample, input_size)?,
            label,
        };
        match sample.split {
            Split::Train => train.push(entry),
            Split::Test => test.push(entry),
        }
    }
    Ok((train, test))
}

fn batch_tensor(samples: &[ClassifierSample], indices: &[usize], input_size: usize) -> (Tensor, Vec<usize>) {
    let per = 3 * input_size * input_size;
    let mut batch = Tensor::zeros(&[indices.len(), 3, input_size, input_size]);
    let mut labels = Vec::with_capacity(indices.len());
    for (row, &idx) in indices.iter().enumerate() {
        batch.data_mut()[row * per..(row + 1) * per].copy_from_slice(&samples[idx].pixels);
        labels.push(samples[idx].label);
    }
    (batch, labels)
}

fn classifier_accuracy(net: &Network, samples: &[ClassifierSample], input_size: usize) -> Result<f64, CliError> {
    if samples.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for chunk in (0..samples.len()).collect::<Vec<_>>().chunks(64) {
        let (batch, labels) = batch_tensor(samples, chunk, input_size);
        let probs = net
            .forward_infer(&batch)
            .map_err(|e| usage(e.to_string()))?;
        let classes = probs.shape()[1];
        for (row, &label) in labels.iter().enumerate() {
            let row_data = &probs.data()[row * classes..(row + 1) * classes];
            let pred = row_data
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
            if pred == label {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / samples.len() as f64)
}

/// SGDM main phase followed by an optional ADAM fine-tune, saving the best
/// checkpoint by test accuracy and logging one CSV row per epoch.
pub fn train_classifier(
    dataset: &Dataset,
    cfg: &ClassifierTrainConfig,
    out_dir: &Path,
) -> Result<TrainOutcome, CliError> {
    if cfg.epochs == 0 {
        return Err(usage("epochs must be at least 1"));
    }
    if cfg.batch == 0 {
        return Err(usage("batch size must be at least 1"));
    }
    if dataset.classes.len() < 2 {
        return Err(usage("classifier training needs at least 2 classes"));
    }
    std::fs::create_dir_all(out_dir)?;

    let spec = match &cfg.widths {
        Some(w) => build_compact_classifier(cfg.input_size, dataset.classes.len(), w),
        None => {
            if cfg.input_size != 224 {
                return Err(usage("the full classifier stack requires input_size = 224"));
            }
            build_classifier(dataset.classes.len())
        }
    }
    .map_err(|e| usage(e.to_string()))?;

    let (train, test) = load_classifier_samples(dataset, cfg.input_size)?;
    if train.is_empty() {
        return Err(usage("training split is empty"));
    }
    let eval_set: &[ClassifierSample] = if test.is_empty() { &train } else { &test };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut net = Network::initialize(spec, &mut rng).map_err(|e| usage(e.to_string()))?;
    let schedule = TrainSchedule {
        epochs: cfg.epochs,
        initial_lr: cfg.lr,
        lr_drop_factor: cfg.lr_drop_factor,
        lr_drop_period_epochs: cfg.lr_drop_period,
        minibatch_size: cfg.batch,
        shuffle_each_epoch: true,
        finetune: Some(FinetuneSchedule {
            start_lr: cfg.finetune_start_lr,
            ..Default::default()
        }),
    };
    schedule.validate().map_err(|e| usage(e.to_string()))?;

    let log_path = out_dir.join("train_log.csv");
    let mut log = std::fs::File::create(&log_path)?;
    writeln!(log, "epoch,phase,lr,batch_size,train_loss,test_metric")?;

    let checkpoint_path = out_dir.join("model.npdk");
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut best_metric = f64::NEG_INFINITY;
    let mut best_net: Option<Network> = None;
    let mut epochs_run = 0usize;

    let run_epoch = |net: &mut Network,
                     opt: &mut Optimizer,
                     lr: f64,
                     batch_size: usize,
                     shuffle_rng: &mut ChaCha8Rng|
     -> Result<f64, CliError> {
        opt.set_lr(lr);
        let mut order: Vec<usize> = (0..train.len()).collect();
        if schedule.shuffle_each_epoch {
            order.shuffle(shuffle_rng);
        }
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for chunk in order.chunks(batch_size) {
            let (batch, labels) = batch_tensor(&train, chunk, cfg.input_size);
            let (logits, cache) = net.forward_train(&batch).map_err(|e| usage(e.to_string()))?;
            let (loss, grad) =
                softmax_cross_entropy(&logits, &labels).map_err(|e| usage(e.to_string()))?;
            if !loss.is_finite() {
                return Err(CliError::Numeric(format!(
                    "loss became non-finite ({loss}) after {seen} samples this epoch"
                )));
            }
            loss_sum += loss * chunk.len() as f64;
            seen += chunk.len();
            let (_, grads) = net.backward(&cache, &grad).map_err(|e| usage(e.to_string()))?;
            let flat = grads.flat();
            let mut params = net.parameters_mut();
            opt.step(&mut params, &flat).map_err(|e| usage(e.to_string()))?;
        }
        Ok(loss_sum / seen as f64)
    };

    // main phase: SGDM with the periodic LR drop
    let mut opt = Optimizer::sgdm(cfg.lr, cfg.momentum);
    for epoch in 0..cfg.epochs {
        let lr = schedule_lr(&schedule, epoch, Phase::Main);
        let train_loss = run_epoch(&mut net, &mut opt, lr, cfg.batch, &mut shuffle_rng)?;
        let metric = classifier_accuracy(&net, eval_set, cfg.input_size)?;
        writeln!(
            log,
            "{},main,{},{},{:.6},{:.6}",
            epoch, lr, cfg.batch, train_loss, metric
        )?;
        if !cfg.quiet {
            println!("epoch {epoch} main lr {lr} loss {train_loss:.6} accuracy {metric:.4}");
        }
        epochs_run += 1;
        if metric > best_metric {
            best_metric = metric;
            best_net = Some(net.clone());
        }
        if cfg.stop_at_accuracy.is_some_and(|t| metric >= t) {
            break;
        }
    }

    // fine-tune phase: ADAM, batch doubling and LR halving every period,
    // continuing only while the test metric improves
    if cfg.finetune_epochs > 0 {
        let period = schedule
            .finetune
            .as_ref()
            .map(|f| f.lr_halving_period_epochs)
            .unwrap_or(10);
        let mut opt = Optimizer::adam(cfg.finetune_start_lr);
        let mut metric_at_last_boundary = best_metric;
        for epoch in 0..cfg.finetune_epochs {
            if epoch > 0 && epoch % period == 0 {
                if best_metric <= metric_at_last_boundary {
                    break;
                }
                metric_at_last_boundary = best_metric;
            }
            let lr = schedule_lr(&schedule, epoch, Phase::Finetune);
            let batch = finetune_batch_size(&schedule, cfg.batch, epoch).min(train.len().max(1));
            let train_loss = run_epoch(&mut net, &mut opt, lr, batch, &mut shuffle_rng)?;
            let metric = classifier_accuracy(&net, eval_set, cfg.input_size)?;
            writeln!(
                log,
                "{},finetune,{},{},{:.6},{:.6}",
                epoch, lr, batch, train_loss, metric
            )?;
            if !cfg.quiet {
                println!("epoch {epoch} finetune lr {lr} loss {train_loss:.6} accuracy {metric:.4}");
            }
            epochs_run += 1;
            if metric > best_metric {
                best_metric = metric;
                best_net = Some(net.clone());
            }
        }
    }

    let model = Model::Classifier(ClassifierModel {
        network: best_net.unwrap_or(net),
        class_names: dataset.classes.clone(),
    });
    save_checkpoint(&model, &checkpoint_path)?;
    Ok(TrainOutcome {
        best_metric,
        epochs_run,
        checkpoint: checkpoint_path,
        log: log_path,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerChoice {
    Sgdm,
    Adam,
}

#[derive(Debug, Clone)]
pub struct DetectorTrainConfig {
    pub seed: u64,
    pub input_size: usize,
    pub stage_widths: Vec<usize>,
    pub blocks: Vec<usize>,
    pub downsample: usize,
    pub anchor_bases: Vec<BoxSize>,
    pub anchor_levels: usize,
    pub anchor_scale: f64,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub optimizer: OptimizerChoice,
    pub momentum: f64,
    /// Optional cap on optimizer steps across all epochs.
    pub max_iters: Option<usize>,
    pub loss: YoloLossConfig,
    pub conf_threshold: f64,
    pub nms_threshold: f64,
    pub iou_threshold: f64,
    /// Split used for the per-epoch metric.
    pub eval_on_train: bool,
    pub stop_at_ap: Option<f64>,
    pub quiet: bool,
}

impl Default for DetectorTrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            input_size: 224,
            stage_widths: vec![16, 32, 64, 128],
            blocks: vec![1, 1, 1, 1],
            downsample: 16,
            anchor_bases: PyramidConfig::default().base_sizes,
            anchor_levels: 15,
            anchor_scale: 1.3,
            epochs: 10,
            batch: 6,
            lr: 1e-5,
            optimizer: OptimizerChoice::Sgdm,
            momentum: 0.9,
            max_iters: None,
            loss: YoloLossConfig::default(),
            conf_threshold: 0.5,
            nms_threshold: 0.45,
            iou_threshold: 0.5,
            eval_on_train: false,
            stop_at_ap: None,
            quiet: false,
        }
    }
}

struct DetectorSample {
    pixels: Vec<f64>,
    target: TargetGrid,
    /// Ground truths in network (letterboxed) coordinates.
    gts: Vec<GroundTruthBox>,
}

fn load_detector_samples(
    dataset: &Dataset,
    input_size: usize,
    grid: usize,
    anchors: &AnchorSet,
) -> Result<(Vec<DetectorSample>, Vec<DetectorSample>), CliError> {
    let mut train = Vec::new();
    let mut test = Vec::new();
    for sample in &dataset.samples {
        let image = Image::read_ppm(&sample.image_ref)?;
        let (boxed, tf) = letterbox(&image, input_size)?;
        let gts: Vec<GroundTruthBox> = sample
            .boxes
            .iter()
            .map(|b| {
                let rect = npdk_core::anchors::Rect::new(
                    b.x as f64,
                    b.y as f64,
                    b.w as f64,
                    b.h as f64,
                );
                let net_rect = tf.rect_to_network(&rect);
                GroundTruthBox {
                    cx: net_rect.x + net_rect.w / 2.0,
                    cy: net_rect.y + net_rect.h / 2.0,
                    w: net_rect.w,
                    h: net_rect.h,
                    class_id: 0,
                }
            })
            .collect();
        let target = encode_targets(&gts, grid, anchors, input_size, 1)
            .map_err(|e| usage(e.to_string()))?;
        let entry = DetectorSample {
            pixels: boxed.to_tensor().into_data(),
            target,
            gts,
        };
        match sample.split {
            Split::Train => train.push(entry),
            Split::Test => test.push(entry),
        }
    }
    Ok((train, test))
}

fn detector_ap(
    detector: &Detector,
    samples: &[DetectorSample],
    cfg: &DetectorTrainConfig,
) -> Result<f64, CliError> {
    if samples.is_empty() || samples.iter().all(|s| s.gts.is_empty()) {
        return Ok(0.0);
    }
    let per = 3 * detector.input_size * detector.input_size;
    let mut scenes = Vec::with_capacity(samples.len());
    for s in samples {
        let mut batch = Tensor::zeros(&[1, 3, detector.input_size, detector.input_size]);
        batch.data_mut()[..per].copy_from_slice(&s.pixels);
        let raw_batch = detector
            .forward_infer(&batch)
            .map_err(|e| usage(e.to_string()))?;
        let raw = Detector::sample_raw(&raw_batch, 0).map_err(|e| usage(e.to_string()))?;
        // sweep from a low threshold so the PR curve covers the recall range
        let dets = decode_predictions(
            &raw,
            &detector.anchors,
            detector.head_spec.num_classes,
            detector.input_size,
            0.05,
        )
        .map_err(|e| usage(e.to_string()))?;
        let kept = nms(&dets, cfg.nms_threshold);
        scenes.push((kept, s.gts.clone()));
    }
    match average_precision(&scenes, cfg.iou_threshold) {
        Ok((ap, _)) => Ok(ap),
        Err(_) => Ok(0.0),
    }
}

/// Minibatch detector training with the composite squared-error loss,
/// logging per-epoch AP and saving the best checkpoint.
pub fn train_detector(
    dataset: &Dataset,
    cfg: &DetectorTrainConfig,
    out_dir: &Path,
) -> Result<TrainOutcome, CliError> {
    if cfg.epochs == 0 {
        return Err(usage("epochs must be at least 1"));
    }
    if cfg.batch == 0 {
        return Err(usage("batch size must be at least 1"));
    }
    std::fs::create_dir_all(out_dir)?;

    let backbone_cfg = BackboneConfig {
        stage_channel_widths: cfg.stage_widths.clone(),
        blocks_per_stage: cfg.blocks.clone(),
        downsample_factor: cfg.downsample,
        input_size: cfg.input_size,
    };
    let grid = backbone_cfg.grid_size().map_err(|e| usage(e.to_string()))?;
    let spec = build_backbone(&backbone_cfg).map_err(|e| usage(e.to_string()))?;
    let anchors = generate_pyramid(&PyramidConfig {
        base_sizes: cfg.anchor_bases.clone(),
        num_levels: cfg.anchor_levels,
        scale: cfg.anchor_scale,
    })
    .map_err(|e| usage(e.to_string()))?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let backbone = Network::initialize(spec, &mut rng).map_err(|e| usage(e.to_string()))?;
    let (head_spec, _) =
        npdk_core::arch::build_detection_head(1, anchors.len(), grid).map_err(|e| usage(e.to_string()))?;
    let mut detector = Detector::new(backbone, head_spec, anchors, vec!["plate".into()], &mut rng)
        .map_err(|e| usage(e.to_string()))?;

    let (train, test) = load_detector_samples(dataset, cfg.input_size, grid, &detector.anchors)?;
    if train.is_empty() {
        return Err(usage("training split is empty"));
    }

    let log_path = out_dir.join("train_log.csv");
    let mut log = std::fs::File::create(&log_path)?;
    writeln!(log, "epoch,phase,lr,batch_size,train_loss,test_metric")?;
    let checkpoint_path = out_dir.join("model.npdk");

    let mut opt = match cfg.optimizer {
        OptimizerChoice::Sgdm => Optimizer::sgdm(cfg.lr, cfg.momentum),
        OptimizerChoice::Adam => Optimizer::adam(cfg.lr),
    };
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let per = 3 * cfg.input_size * cfg.input_size;
    let filters = detector.head_spec.filters;
    let mut best_metric = f64::NEG_INFINITY;
    let mut best_state: Option<Vec<Tensor>> = None;
    let mut iters = 0usize;
    let mut epochs_run = 0usize;

    'training: for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for chunk in order.chunks(cfg.batch) {
            if cfg.max_iters.is_some_and(|cap| iters >= cap) {
                break 'training;
            }
            let mut batch = Tensor::zeros(&[chunk.len(), 3, cfg.input_size, cfg.input_size]);
            for (row, &idx) in chunk.iter().enumerate() {
                batch.data_mut()[row * per..(row + 1) * per].copy_from_slice(&train[idx].pixels);
            }
            let (raw_batch, cache) = detector
                .forward_train(&batch)
                .map_err(|e| usage(e.to_string()))?;
            let mut batch_loss = 0.0;
            let mut grad_batch = Tensor::zeros(raw_batch.shape());
            let raw_per = filters * grid * grid;
            for (row, &idx) in chunk.iter().enumerate() {
                let raw = Detector::sample_raw(&raw_batch, row).map_err(|e| usage(e.to_string()))?;
                let (loss, grad) =
                    yolo_loss(&raw, &train[idx].target, &cfg.loss).map_err(|e| usage(e.to_string()))?;
                batch_loss += loss;
                grad_batch.data_mut()[row * raw_per..(row + 1) * raw_per]
                    .copy_from_slice(grad.data());
            }
            let scale = 1.0 / chunk.len() as f64;
            batch_loss *= scale;
            grad_batch.scale(scale);
            if !batch_loss.is_finite() {
                return Err(CliError::Numeric(format!(
                    "detection loss became non-finite ({batch_loss}) at iteration {iters}"
                )));
            }
            let grads = detector
                .backward(&cache, &grad_batch)
                .map_err(|e| usage(e.to_string()))?;
            let flat = grads.flat();
            let mut params = detector.parameters_mut();
            opt.step(&mut params, &flat).map_err(|e| usage(e.to_string()))?;
            iters += 1;
            loss_sum += batch_loss * chunk.len() as f64;
            seen += chunk.len();
        }
        epochs_run += 1;
        let train_loss = if seen > 0 { loss_sum / seen as f64 } else { 0.0 };
        let eval_set = if cfg.eval_on_train || test.is_empty() { &train } else { &test };
        let metric = detector_ap(&detector, eval_set, cfg)?;
        writeln!(
            log,
            "{},main,{},{},{:.6},{:.6}",
            epoch, cfg.lr, cfg.batch, train_loss, metric
        )?;
        if !cfg.quiet {
            println!("epoch {epoch} loss {train_loss:.6} ap {metric:.4} ({iters} iters)");
        }
        if metric > best_metric {
            best_metric = metric;
            best_state = Some(detector.state_tensors().into_iter().cloned().collect());
        }
        if cfg.stop_at_ap.is_some_and(|t| metric >= t) {
            break;
        }
    }

    if let Some(state) = best_state {
        for (dst, src) in detector.state_tensors_mut().into_iter().zip(state.iter()) {
            *dst = src.clone();
        }
    }
    save_checkpoint(&Model::Detector(detector), &checkpoint_path)?;
    Ok(TrainOutcome {
        best_metric,
        epochs_run,
        checkpoint: checkpoint_path,
        log: log_path,
    })
}
