use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use plainmatte::backbone::AttentionMode;
use plainmatte::config::NeckKind;
use plainmatte::cost::{model_flops, DecoderKind};
use plainmatte::data::io::{load_gray, load_input, save_gray_png};
use plainmatte::data::synth::write_synthetic_dataset;
use plainmatte::data::{generate_trimap, ingest_dataset, MattingSample};
use plainmatte::inference::{infer, InferenceRequest};
use plainmatte::metrics::{aggregate, evaluate, MetricsReport, RegionMode};
use plainmatte::model::Model;
use plainmatte::plane::{seeded_rng, snap_trimap_value, Plane, TRIMAP_SNAP_TOL};
use plainmatte::trainer::Trainer;
use plainmatte_service::{AppState, ServiceConfig};
use serde_json::json;

use crate::settings::{FileConfig, Settings};
use crate::{CliError, Cli, Command, DatasetArgs, DecoderArg, EvalArgs, FlopsArgs, InferArgs, ModelArgs, Output, RegionArg, ServeArgs, StrategyArg, TrainArgs};

pub fn run(cli: &Cli, out: &mut Output) -> Result<(), CliError> {
    match &cli.command {
        Command::Train(a) => train(a, cli.seed, out),
        Command::Eval(a) => eval(a, out),
        Command::Infer(a) => infer_cmd(a, cli.seed, out),
        Command::Flops(a) => flops(a, out),
        Command::DatasetBuild(a) => dataset_build(a, cli.seed.unwrap_or(0), out),
        Command::Serve(a) => serve(a, cli.seed, out),
    }
}

fn settings(m: &ModelArgs, default_preset: &str) -> Result<Settings, CliError> {
    let file = m.config.as_deref().map(FileConfig::read).transpose()?;
    Settings::resolve(file.as_ref(), m.preset.as_deref(), default_preset)
}

fn load_or_init(checkpoint: Option<&Path>, s: &Settings, seed: Option<u64>, out: &mut Output) -> Result<Model<f32>, CliError> {
    match checkpoint {
        Some(dir) => Ok(Model::<f32>::load(dir)?.0),
        None => {
            out.human("warning: no --checkpoint given; using randomly initialised weights");
            Ok(Model::init(s.model.clone(), seed.unwrap_or(s.train.run.seed))?)
        }
    }
}

fn load_samples(root: &Path, bg_per_fg: Option<usize>) -> Result<Vec<MattingSample>, CliError> {
    let mut ds = ingest_dataset(root)?;
    if let Some(b) = bg_per_fg {
        ds = ds.with_bg_per_fg(b);
    }
    Ok(ds.iter().collect::<plainmatte::error::Result<Vec<_>>>()?)
}

fn train(a: &TrainArgs, seed: Option<u64>, out: &mut Output) -> Result<(), CliError> {
    let s = settings(&a.model, "tiny")?;
    let mut options = s.train.clone();
    if let Some(v) = seed {
        options.run.seed = v;
    }
    if let Some(v) = a.epochs {
        options.run.epochs = v;
    }
    if let Some(v) = a.batch_size {
        options.run.batch_size = v;
    }
    if let Some(v) = a.lr {
        options.run.base_lr = v;
    }
    if a.steps_per_epoch.is_some() {
        options.steps_per_epoch = a.steps_per_epoch;
    }
    let data = load_samples(&a.data, a.bg_per_fg)?;
    if data.is_empty() {
        return Err(CliError::Runtime(format!("no training samples under {}", a.data.display())));
    }
    let mut trainer = if a.resume {
        let mut t = Trainer::load(&a.out)?;
        if let Some(v) = a.epochs {
            t.options.run.epochs = v;
        }
        t
    } else {
        Trainer::new(Model::init(s.model.clone(), options.run.seed)?, options)?
    };
    std::fs::create_dir_all(&a.out)?;
    let mut log = OpenOptions::new().create(true).append(true).open(a.out.join("log.jsonl"))?;
    let mut last = None;
    while trainer.epoch_of(trainer.step_count(), data.len()) < trainer.options.run.epochs {
        let entry = trainer.run_epoch(&data)?;
        trainer.save(&a.out)?;
        let line = json!({ "event": "epoch", "epoch": entry.epoch, "step": entry.step, "lr": entry.lr, "loss": entry.loss, "seconds": entry.seconds });
        writeln!(log, "{line}")?;
        if out.json {
            out.emit_json(&line);
        } else {
            let _ = writeln!(
                out.stdout,
                "epoch {:>4}  step {:>6}  lr {:.3e}  loss {:.5}  ({:.1}s)",
                entry.epoch, entry.step, entry.lr, entry.loss.total, entry.seconds
            );
        }
        last = Some(entry);
    }
    let summary = json!({
        "event": "done",
        "epochs": trainer.options.run.epochs,
        "steps": trainer.step_count(),
        "samples": data.len(),
        "final_loss": last.as_ref().map(|e| e.loss.total),
        "checkpoint": a.out,
    });
    out.result(&summary, format!("saved checkpoint to {} after {} steps", a.out.display(), trainer.step_count()));
    Ok(())
}

fn load_trimap(path: &Path) -> Result<Plane<f32>, CliError> {
    let t = load_gray(path)?;
    let mut data = Vec::with_capacity(t.data().len());
    for (i, &v) in t.data().iter().enumerate() {
        let s = snap_trimap_value(v as f64, TRIMAP_SNAP_TOL)
            .ok_or_else(|| CliError::Runtime(format!("{}: pixel {i} has gray level {v:.4}, not a trimap value", path.display())))?;
        data.push(s as f32);
    }
    Ok(Plane::new(1, t.height(), t.width(), data)?)
}

fn eval_pairs(a: &EvalArgs) -> Result<Vec<(String, PathBuf, PathBuf, PathBuf)>, CliError> {
    if !a.pred.is_dir() {
        let name = a.pred.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        return Ok(vec![(name, a.pred.clone(), a.gt.clone(), a.trimap.clone())]);
    }
    let mut names: Vec<String> = std::fs::read_dir(&a.pred)?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_file())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    Ok(names.into_iter().map(|n| (n.clone(), a.pred.join(&n), a.gt.join(&n), a.trimap.join(&n))).collect())
}

fn eval(a: &EvalArgs, out: &mut Output) -> Result<(), CliError> {
    let mode = match a.region {
        RegionArg::Unknown => RegionMode::UnknownOnly,
        RegionArg::Whole => RegionMode::WholeImage,
    };
    let mut rows = Vec::new();
    let mut reports: Vec<MetricsReport> = Vec::new();
    for (name, pred, gt, trimap) in eval_pairs(a)? {
        let r = evaluate(&load_gray(&pred)?, &load_gray(&gt)?, &load_trimap(&trimap)?, mode)?;
        rows.push(json!({ "name": name, "sad": r.sad, "mse": r.mse, "grad": r.grad, "conn": r.conn, "pixels": r.pixels }));
        reports.push(r);
    }
    let mean = aggregate(&reports).ok_or_else(|| CliError::Runtime("nothing to evaluate".into()))?;
    let report = json!({ "region_mode": mode, "images": rows, "mean": { "sad": mean.sad, "mse": mean.mse, "grad": mean.grad, "conn": mean.conn } });
    let mut text = format!("{:<24} {:>10} {:>10} {:>10} {:>10}\n", "image", "SAD", "MSE", "Grad", "Conn");
    for (row, r) in rows.iter().zip(&reports) {
        text += &format!("{:<24} {:>10.4} {:>10.4} {:>10.4} {:>10.4}\n", row["name"].as_str().unwrap_or(""), r.sad, r.mse, r.grad, r.conn);
    }
    text += &format!("{:<24} {:>10.4} {:>10.4} {:>10.4} {:>10.4}", "mean", mean.sad, mean.mse, mean.grad, mean.conn);
    out.result(&report, text);
    Ok(())
}

fn infer_cmd(a: &InferArgs, seed: Option<u64>, out: &mut Output) -> Result<(), CliError> {
    let s = settings(&a.model, "tiny")?;
    let model = load_or_init(a.checkpoint.as_deref(), &s, seed, out)?;
    let input = load_input(&a.image, &a.trimap)?;
    let strategy = if a.grid_sample { AttentionMode::GridSample } else { AttentionMode::Normal };
    let start = Instant::now();
    let alpha = infer(&model, &InferenceRequest { input, strategy })?;
    let seconds = start.elapsed().as_secs_f64();
    save_gray_png(&a.out, &alpha)?;
    let (h, w) = alpha.dims();
    let v = json!({ "out": a.out, "height": h, "width": w, "strategy": strategy, "seconds": seconds });
    out.result(&v, format!("wrote {}x{} alpha to {} ({:.2}s)", h, w, a.out.display(), seconds));
    Ok(())
}

fn flops(a: &FlopsArgs, out: &mut Output) -> Result<(), CliError> {
    let mut s = settings(&a.model, "vits")?;
    let cfg = &mut s.model;
    if let Some(g) = a.globals {
        cfg.backbone.global_blocks = Some(g);
    }
    if let Some(n) = &a.neck {
        cfg.backbone.neck_kind = n.parse::<NeckKind>().map_err(|e| CliError::Usage(e.to_string()))?;
    }
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let mode = match a.strategy {
        StrategyArg::Normal => AttentionMode::Normal,
        StrategyArg::Grid => AttentionMode::GridSample,
    };
    let decoder = match a.decoder {
        DecoderArg::Dcm => DecoderKind::DetailCapture,
        DecoderArg::Sfp => DecoderKind::SimpleFeaturePyramid,
    };
    let res = (a.res.height, a.res.width);
    let report = model_flops(cfg, decoder, res, mode)?;
    let mut all = cfg.clone();
    all.backbone.global_blocks = Some(all.backbone.depth());
    let reference = model_flops(&all, decoder, res, mode)?;
    let ratio = report.flops as f64 / reference.flops as f64;
    let globals = cfg.backbone.num_global();

    let v = json!({
        "preset": s.preset,
        "resolution": [res.0, res.1],
        "strategy": mode,
        "decoder": decoder,
        "neck": cfg.backbone.neck_kind,
        "globals": globals,
        "depth": cfg.backbone.depth(),
        "flops": report.flops,
        "macs": report.macs,
        "params": report.params,
        "ratio_vs_all_global": ratio,
        "all_global_flops": reference.flops,
        "peak_attention_activation_bytes": report.peak_attention_activation_bytes,
        "peak_memory_bytes": report.peak_memory_bytes(),
        "entries": report.entries,
    });
    let mut text = format!("{:<28} {:>12} {:>12} {:>10}\n", "stage", "GFLOPs", "GMACs", "params");
    for e in &report.entries {
        text += &format!("{:<28} {:>12.3} {:>12.3} {:>10}\n", e.name, e.flops as f64 * 1e-9, e.macs as f64 * 1e-9, e.params);
    }
    text += &format!(
        "{:<28} {:>12.3} {:>12.3} {:>10}\n\n",
        "total",
        report.flops as f64 * 1e-9,
        report.macs as f64 * 1e-9,
        report.params
    );
    text += &format!(
        "{}x{} {:?} {:?}: {globals}/{} global blocks, {:.3}x the all-global FLOPs, peak memory {:.2} GB",
        res.0,
        res.1,
        mode,
        decoder,
        cfg.backbone.depth(),
        ratio,
        report.peak_memory_bytes() as f64 / 1e9
    );
    out.result(&v, text);
    Ok(())
}

fn dataset_build(a: &DatasetArgs, seed: u64, out: &mut Output) -> Result<(), CliError> {
    if a.count == 0 || a.backgrounds == 0 {
        return Err(CliError::Usage("--count and --backgrounds must be at least 1".into()));
    }
    if a.kernel_min == 0 || a.kernel_min > a.kernel_max {
        return Err(CliError::Usage("need 1 <= --kernel-min <= --kernel-max".into()));
    }
    let (h, w) = (a.size.height, a.size.width);
    write_synthetic_dataset(&a.out, a.count, a.backgrounds, h, w, seed)?;
    let trimap_seed = seed.wrapping_add(1);
    let mut rng = seeded_rng(trimap_seed);
    let tri_dir = a.out.join("trimap");
    std::fs::create_dir_all(&tri_dir)?;
    let mut names: Vec<PathBuf> = std::fs::read_dir(a.out.join("alpha"))?.filter_map(|e| e.ok().map(|e| e.path())).collect();
    names.sort();
    for p in &names {
        let alpha = load_gray(p)?;
        let t = generate_trimap(&alpha, a.kernel_min, a.kernel_max, &mut rng);
        save_gray_png(&tri_dir.join(p.file_name().expect("file entries have names")), &t)?;
    }
    let sidecar = json!({
        "generator": "synthetic",
        "seed": seed,
        "foregrounds": a.count,
        "backgrounds": a.backgrounds,
        "height": h,
        "width": w,
        "trimap": { "seed": trimap_seed, "kernel_min": a.kernel_min, "kernel_max": a.kernel_max },
    });
    std::fs::write(a.out.join("dataset.json"), serde_json::to_string_pretty(&sidecar).expect("json"))?;
    out.result(&sidecar, format!("wrote {} foregrounds, {} backgrounds and trimaps to {}", a.count, a.backgrounds, a.out.display()));
    Ok(())
}

fn serve(a: &ServeArgs, seed: Option<u64>, out: &mut Output) -> Result<(), CliError> {
    let s = settings(&a.model, "tiny")?;
    let model = load_or_init(a.checkpoint.as_deref(), &s, seed, out)?;
    let defaults = ServiceConfig::default();
    let section = &s.service;
    let config = ServiceConfig {
        max_pixels: a.max_pixels.or(section.max_pixels).unwrap_or(defaults.max_pixels),
        max_sessions: a.max_sessions.or(section.max_sessions).unwrap_or(defaults.max_sessions),
        ttl: a.ttl_secs.or(section.ttl_secs).map(Duration::from_secs).unwrap_or(defaults.ttl),
        allowed_origin: a.origin.clone().or(section.allowed_origin.clone()),
        ..defaults
    };
    let addr_text = a.addr.clone().or(section.addr.clone()).unwrap_or_else(|| "127.0.0.1:8080".into());
    let addr = addr_text.parse().map_err(|e| CliError::Usage(format!("bad --addr `{addr_text}`: {e}")))?;
    let _ = tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .with_writer(std::io::stderr)
        .try_init();
    if out.json {
        out.emit_json(&json!({ "event": "listening", "addr": addr_text }));
        let _ = out.stdout.flush();
    } else {
        out.human(format!("serving on http://{addr_text}"));
    }
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(plainmatte_service::serve(addr, AppState::new(model, config)))?;
    Ok(())
}
