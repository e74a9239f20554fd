use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::Path;

use irnet_core::data::{
    load_pgm, load_sample, read_manifest, save_pgm, synthesize_dataset, upsample4x, write_dataset, AnnotatedImage,
    SceneSpec,
};
use irnet_core::detnet::{kmeans_anchors, load_checkpoint, save_checkpoint, Model, ModelConfig};
use irnet_core::gradcheck::default_suite;
use irnet_core::nn::Module;
use irnet_core::pipeline::{evaluate, predict, EpochLog, TrainConfig, Trainer};
use irnet_core::postprocess::{fps_benchmark, Detection};

use crate::render::{line_chart, overlay};
use crate::{BenchArgs, CliError, DetectArgs, EvalArgs, GradcheckArgs, ModelArgs, SynthArgs, TrainArgs, Upsample};

type Result<T> = std::result::Result<T, CliError>;

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| io_err(path, e))
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| io_err(path, e))
}

fn parse_classes(s: &str) -> Result<Vec<String>> {
    let v: Vec<String> = s.split(',').map(|c| c.trim().to_string()).filter(|c| !c.is_empty()).collect();
    if v.is_empty() {
        return Err(CliError::Usage("--classes needs at least one name".into()));
    }
    Ok(v)
}

fn check_unit(name: &str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{name} {v} must lie in [0, 1]")))
    }
}

/// Original samples of a manifest and the copies fed to the network.
struct Loaded {
    original: Vec<AnnotatedImage>,
    input: Vec<AnnotatedImage>,
}

fn load_items(manifest: &Path, classes: &[String], upsample: Upsample) -> Result<Loaded> {
    let names: Vec<&str> = classes.iter().map(String::as_str).collect();
    let entries = read_manifest(manifest)?;
    let original = entries.iter().map(|e| load_sample(e, &names)).collect::<irnet_core::Result<Vec<_>>>()?;
    let input = match upsample.method() {
        None => original.clone(),
        Some(m) => original.iter().map(|a| upsample4x(a, m)).collect(),
    };
    Ok(Loaded { original, input })
}

fn read_config(path: &Path) -> Result<ModelConfig> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    Ok(ModelConfig::from_text(&text)?)
}

fn check_scales(args: &ModelArgs) -> Result<()> {
    match args.scales {
        Some(s) if s != 2 => {
            Err(CliError::Usage(format!("--scales {s}: the detector has exactly two scales (strides 8 and 16)")))
        }
        _ => Ok(()),
    }
}

/// Config from file and flags. Without a config file the class count follows
/// `num_classes` and anchors are scaled with the upsampling factor.
fn build_config(args: &ModelArgs, num_classes: usize, upsample: Upsample) -> Result<ModelConfig> {
    let mut cfg = match &args.config {
        Some(p) => read_config(p)?,
        None => {
            let c = ModelConfig { num_classes, ..ModelConfig::default() };
            if upsample.method().is_some() {
                c.with_anchor_scale(4.0)
            } else {
                c
            }
        }
    };
    check_scales(args)?;
    if let Some(b) = args.dyhead_blocks {
        cfg.dyhead_blocks = b;
    }
    if let Some(w) = args.width {
        cfg.width = w;
    }
    if let Some(d) = args.depth {
        cfg.depth = d;
    }
    cfg.validate()?;
    if cfg.num_classes != num_classes {
        return Err(CliError::Usage(format!(
            "config has {} classes, --classes names {num_classes}",
            cfg.num_classes
        )));
    }
    Ok(cfg)
}

fn detections_tsv(names: &[String], dets: &[Vec<Detection>], scales: &[f64], conf: f64, classes: &[String]) -> String {
    let mut s = String::from("image\tclass\tscore\tx1\ty1\tx2\ty2\n");
    for ((name, d), &k) in names.iter().zip(dets).zip(scales) {
        for d in d.iter().filter(|d| d.score >= conf) {
            let b = d.bbox.scale(1.0 / k);
            let class = classes.get(d.class_id).map_or("?", String::as_str);
            s.push_str(&format!(
                "{name}\t{class}\t{:.6}\t{:.3}\t{:.3}\t{:.3}\t{:.3}\n",
                d.score, b.x1, b.y1, b.x2, b.y2
            ));
        }
    }
    s
}

fn write_overlays(dir: &Path, originals: &[AnnotatedImage], dets: &[Vec<Detection>], conf: f64) -> Result<()> {
    create_dir(dir)?;
    for (i, (a, d)) in originals.iter().zip(dets).enumerate() {
        let boxes: Vec<_> = d.iter().filter(|d| d.score >= conf).map(|d| d.bbox).collect();
        let path = dir.join(format!("{i:05}.pgm"));
        save_pgm(&overlay(&a.image, &boxes, 1.0), 255, &path)?;
    }
    Ok(())
}

pub fn synth(a: SynthArgs) -> Result<()> {
    let spec = SceneSpec {
        width: a.image_width,
        height: a.image_height,
        targets: (a.min_targets, a.max_targets),
        size_range: (a.min_size, a.max_size),
        size_mode: a.mode_size,
        seed: a.seed,
        ..SceneSpec::default()
    };
    spec.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let mut items = synthesize_dataset(&spec, a.count)?;
    if let Some(m) = a.upsample.method() {
        items = items.iter().map(|x| upsample4x(x, m)).collect();
    }
    let manifest = write_dataset(&a.out, &items, &["target"])?;
    let boxes: usize = items.iter().map(|x| x.boxes.len()).sum();
    println!("scenes={} boxes={boxes} manifest={}", items.len(), manifest.display());
    Ok(())
}

/// Key=value pairs of one log line.
fn record_value(line: &str, key: &str) -> Option<f64> {
    line.split_whitespace().find_map(|kv| kv.strip_prefix(key)?.strip_prefix('=')?.parse().ok())
}

fn write_charts(out: &Path, log: &Path) -> Result<()> {
    let text = fs::read_to_string(log).map_err(|e| io_err(log, e))?;
    let series = |key: &str| -> Vec<(f64, f64)> {
        text.lines()
            .filter_map(|l| Some((record_value(l, "epoch")?, record_value(l, key)?)))
            .collect()
    };
    write_file(&out.join("loss.ppm"), line_chart(&[series("loss"), series("box"), series("obj")], 480, 240))?;
    write_file(&out.join("map.ppm"), line_chart(&[series("train_map50"), series("val_map50")], 480, 240))?;
    Ok(())
}

pub fn train(a: TrainArgs) -> Result<()> {
    if a.batch == 0 || a.epochs == 0 {
        return Err(CliError::Usage("--batch and --epochs must be positive".into()));
    }
    if !(a.lr.is_finite() && a.lr > 0.0) {
        return Err(CliError::Usage(format!("--lr {} must be positive", a.lr)));
    }
    check_unit("--nms-iou", a.nms_iou)?;
    check_scales(&a.model)?;
    let classes = parse_classes(&a.classes)?;
    let train = load_items(&a.manifest, &classes, a.upsample)?.input;
    if train.is_empty() {
        return Err(CliError::Data(format!("{} lists no samples", a.manifest.display())));
    }
    let val = match &a.val {
        Some(p) => load_items(p, &classes, a.upsample)?.input,
        None => Vec::new(),
    };
    let tc = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch,
        lr: a.lr,
        seed: a.seed,
        augment: a.augment,
        nms_iou: a.nms_iou,
        eval_every: a.eval_every,
    };
    let mut trainer = match &a.resume {
        Some(path) => {
            let ck = load_checkpoint::<f32>(path)?;
            if let Some(p) = &a.model.config {
                if read_config(p)? != ck.model.config {
                    return Err(CliError::Data(format!("{} does not match the checkpoint config", p.display())));
                }
            }
            if ck.model.config.num_classes != classes.len() {
                return Err(CliError::Data(format!(
                    "checkpoint has {} classes, --classes names {}",
                    ck.model.config.num_classes,
                    classes.len()
                )));
            }
            let mut t = Trainer::new(ck.model, tc);
            if let Some(opt) = ck.optimizer {
                t.optimizer = opt;
                t.optimizer.config.lr = a.lr;
            }
            t.epoch = ck.step as usize;
            t
        }
        None => {
            let mut cfg = build_config(&a.model, classes.len(), a.upsample)?;
            if a.kmeans_anchors {
                let sizes: Vec<(f64, f64)> =
                    train.iter().flat_map(|x| x.boxes.iter().map(|b| (b.bbox.width(), b.bbox.height()))).collect();
                cfg.anchors = kmeans_anchors(&sizes, a.seed)?;
            }
            Trainer::new(Model::new(&cfg, a.seed)?, tc)
        }
    };
    create_dir(&a.out)?;
    write_file(&a.out.join("model.cfg"), trainer.model.config.to_text())?;
    let log_path = a.out.join("train.log");
    let mut log = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| io_err(&log_path, e))?;
    let best_path = a.out.join("best.ckpt");
    let last_path = a.out.join("last.ckpt");
    let best_meta = a.out.join("best.txt");
    let mut best: Option<f64> = fs::read_to_string(&best_meta).ok().and_then(|t| record_value(&t, "score"));
    println!(
        "params={} start_epoch={} epochs={} batch={} lr={}",
        trainer.model.param_count(),
        trainer.epoch,
        a.epochs,
        a.batch,
        a.lr
    );
    println!("{:>6} {:>8} {:>10} {:>10} {:>10} {:>10} {:>9} {:>9}", "epoch", "step", "loss", "box", "obj", "cls", "train_ap", "val_ap");
    let has_val = !val.is_empty();
    let result = trainer.fit(&train, &val, |t, l: &EpochLog| {
        let io = |e: std::io::Error| irnet_core::Error::Io { path: log_path.clone(), source: e };
        writeln!(log, "{}", l.to_record()).map_err(io)?;
        let pct = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{:.2}", 100.0 * v));
        println!(
            "{:>6} {:>8} {:>10.5} {:>10.5} {:>10.5} {:>10.5} {:>9} {:>9}",
            l.epoch,
            l.step,
            l.loss,
            l.box_loss,
            l.obj_loss,
            l.cls_loss,
            pct(l.train_map50),
            pct(l.val_map50)
        );
        save_checkpoint(&t.model, Some(&t.optimizer), l.epoch as u64, &last_path)?;
        // higher is better: mAP when evaluated, otherwise negative loss
        let score = if t.config.eval_every == 0 {
            Some(-l.loss)
        } else if has_val {
            l.val_map50
        } else {
            l.train_map50
        };
        if let Some(s) = score {
            if best.is_none_or(|b| s > b) {
                best = Some(s);
                save_checkpoint(&t.model, Some(&t.optimizer), l.epoch as u64, &best_path)?;
                std::fs::write(&best_meta, format!("epoch={} score={s}\n", l.epoch)).map_err(io)?;
            }
        }
        Ok(())
    });
    if let Err(e) = result {
        let kept = if last_path.exists() { format!("; last good checkpoint kept at {}", last_path.display()) } else { String::new() };
        let mut err = CliError::from(e);
        match &mut err {
            CliError::Usage(m) | CliError::Data(m) | CliError::Numeric(m) => m.push_str(&kept),
        }
        return Err(err);
    }
    if !last_path.exists() {
        save_checkpoint(&trainer.model, Some(&trainer.optimizer), trainer.epoch as u64, &last_path)?;
    }
    write_charts(&a.out, &log_path)?;
    let (res, _) = evaluate(&trainer.model, &train, irnet_core::postprocess::CONF_THRESHOLD, a.nms_iou, a.batch)?;
    let map = res.map50.map_or("absent".to_string(), |v| format!("{v:.6}"));
    write_file(&a.out.join("final_metrics.txt"), res.to_records())?;
    println!("final_train_map50={map}");
    Ok(())
}

pub fn eval(a: EvalArgs) -> Result<()> {
    check_unit("--conf", a.conf)?;
    check_unit("--nms-iou", a.nms_iou)?;
    let classes = parse_classes(&a.classes)?;
    let model = load_checkpoint::<f32>(&a.checkpoint)?.model;
    if let Some(p) = &a.config {
        let want = read_config(p)?;
        if want != model.config {
            return Err(CliError::Data(format!(
                "{} does not match the config stored in {}",
                p.display(),
                a.checkpoint.display()
            )));
        }
    }
    if model.config.num_classes != classes.len() {
        return Err(CliError::Data(format!(
            "checkpoint has {} classes, --classes names {}",
            model.config.num_classes,
            classes.len()
        )));
    }
    let loaded = load_items(&a.manifest, &classes, a.upsample)?;
    create_dir(&a.out)?;
    if loaded.input.is_empty() {
        eprintln!("irnet: warning: {} lists no samples; writing an empty report", a.manifest.display());
    }
    let (res, dets) = evaluate(&model, &loaded.input, a.conf, a.nms_iou, a.batch.max(1))?;
    write_file(&a.out.join("metrics.txt"), res.to_records())?;
    let names: Vec<String> = loaded.original.iter().map(|x| x.source.clone()).collect();
    let scales: Vec<f64> = loaded.input.iter().zip(&loaded.original).map(|(i, o)| i.width() as f64 / o.width() as f64).collect();
    write_file(&a.out.join("detections.tsv"), detections_tsv(&names, &dets, &scales, a.conf, &classes))?;
    let rescaled: Vec<Vec<Detection>> = dets
        .iter()
        .zip(&scales)
        .map(|(d, &k)| d.iter().map(|d| Detection { bbox: d.bbox.scale(1.0 / k), ..*d }).collect())
        .collect();
    write_overlays(&a.out.join("overlays"), &loaded.original, &rescaled, a.conf)?;
    print!("{}", res.to_table());
    Ok(())
}

pub fn gradcheck(a: GradcheckArgs) -> Result<()> {
    let cases = default_suite(a.seed)?;
    let mut report = format!("{:<16} {:<28} {:>10} {}\n", "op", "shape", "max_rel", "result");
    for c in &cases {
        report.push_str(&c.row());
        report.push('\n');
    }
    let failed: Vec<&str> = cases.iter().filter(|c| !c.report.passed()).map(|c| c.op.as_str()).collect();
    report.push_str(&format!("cases={} failed={}\n", cases.len(), failed.len()));
    print!("{report}");
    if let Some(p) = &a.out {
        write_file(p, &report)?;
    }
    if failed.is_empty() {
        Ok(())
    } else {
        for c in cases.iter().filter(|c| !c.report.passed()) {
            eprint!("{}", c.report.table());
        }
        Err(CliError::Numeric(format!("gradient check failed for {}", failed.join(", "))))
    }
}

pub fn bench(a: BenchArgs) -> Result<()> {
    if a.iterations < 30 {
        return Err(CliError::Usage(format!("--iterations {} is below the minimum of 30", a.iterations)));
    }
    let model = match &a.checkpoint {
        Some(p) => load_checkpoint::<f32>(p)?.model,
        None => {
            let cfg = build_config(&a.model, 1, Upsample::None)?;
            Model::<f32>::new(&cfg, a.seed)?
        }
    };
    let r = fps_benchmark(&model, a.size, a.size, a.iterations, a.warmup)?;
    let report = format!(
        "params={}\ninput={}x{}\niterations={}\nwarmup={}\nmedian_fps={:.3}\nmean_fps={:.3}\ntotal_seconds={:.6}\n",
        model.param_count(),
        a.size,
        a.size,
        r.iterations,
        r.warmup,
        r.median_fps,
        r.mean_fps,
        r.total_seconds
    );
    print!("{report}");
    if let Some(p) = &a.out {
        write_file(p, &report)?;
    }
    Ok(())
}

pub fn detect(a: DetectArgs) -> Result<()> {
    check_unit("--conf", a.conf)?;
    check_unit("--nms-iou", a.nms_iou)?;
    let model = load_checkpoint::<f32>(&a.checkpoint)?.model;
    let originals = a
        .images
        .iter()
        .map(|p| Ok(AnnotatedImage::new(load_pgm(p)?, Vec::new(), p.display().to_string(), 1)?))
        .collect::<Result<Vec<_>>>()?;
    let inputs: Vec<AnnotatedImage> = match a.upsample.method() {
        None => originals.clone(),
        Some(m) => originals.iter().map(|x| upsample4x(x, m)).collect(),
    };
    let dets = predict(&model, &inputs, a.conf, a.nms_iou, 1)?;
    create_dir(&a.out)?;
    let scales: Vec<f64> = inputs.iter().zip(&originals).map(|(i, o)| i.width() as f64 / o.width() as f64).collect();
    let names: Vec<String> = a.images.iter().map(|p| p.display().to_string()).collect();
    let classes: Vec<String> = (0..model.config.num_classes).map(|c| format!("class{c}")).collect();
    write_file(&a.out.join("detections.tsv"), detections_tsv(&names, &dets, &scales, a.conf, &classes))?;
    let dir = a.out.join("overlays");
    create_dir(&dir)?;
    for ((o, d), (p, &k)) in originals.iter().zip(&dets).zip(a.images.iter().zip(&scales)) {
        let boxes: Vec<_> = d.iter().map(|d| d.bbox.scale(1.0 / k)).collect();
        let stem = p.file_stem().map_or_else(|| "image".into(), |s| s.to_string_lossy().into_owned());
        save_pgm(&overlay(&o.image, &boxes, 1.0), 255, dir.join(format!("{stem}.pgm")))?;
    }
    let n: usize = dets.iter().map(Vec::len).sum();
    println!("images={} detections={n} out={}", originals.len(), a.out.display());
    Ok(())
}
