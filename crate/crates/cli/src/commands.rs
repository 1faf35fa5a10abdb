use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use guided_cascade::ablation::{full_grid, run_ablation, trends};
use guided_cascade::codec::{psnr, Codec};
use guided_cascade::config::RunConfig;
use guided_cascade::dataset::{make_synthetic_dataset, DatasetSpec, INDEX_FILE};
use guided_cascade::image_io::stack;
use guided_cascade::model::{report_params, Model, T_EXTRACT};
use guided_cascade::pipeline::{GenerationFlags, GenerationRequest, Pipeline};
use guided_cascade::trainer::{train_codec, LatentCache, Phase, Trainer};
use guided_cascade::{Error, Result};
use serde_json::{json, Value};

use crate::Command;

/// Config overrides implied by dedicated command-line flags.
pub fn flag_overrides(cmd: &Command) -> Vec<(String, String)> {
    let mut o = Vec::new();
    let mut put = |k: &str, v: Option<String>| {
        if let Some(v) = v {
            o.push((k.to_string(), v));
        }
    };
    let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
    match cmd {
        Command::MakeDataset { out } => put("data.root", path(out)),
        Command::TrainCodec { data, steps, .. } => {
            put("data.root", path(data));
            put("codec.steps", steps.map(|s| s.to_string()));
        }
        Command::Train {
            phase,
            steps,
            lr,
            batch_size,
            data,
            ..
        } => {
            put("trainer.phase", phase.clone());
            put("trainer.steps", steps.map(|s| s.to_string()));
            put("trainer.lr", lr.map(|s| s.to_string()));
            put("trainer.batch_size", batch_size.map(|s| s.to_string()));
            put("data.root", path(data));
        }
        Command::Sample { cfg, steps, .. } => {
            put("sampler.cfg", cfg.map(|s| s.to_string()));
            put("sampler.steps", steps.map(|s| s.to_string()));
        }
        Command::Ablate { data, steps, .. } => {
            put("data.root", path(data));
            put("ablation.steps", steps.map(|s| s.to_string()));
        }
        Command::EvalCodec { data, .. } => put("data.root", path(data)),
        Command::ReportParams { .. } => {}
    }
    o
}

pub fn dispatch(cmd: &Command, config: &RunConfig) -> Result<()> {
    match cmd {
        Command::MakeDataset { .. } => make_dataset(config),
        Command::TrainCodec { out, .. } => cmd_train_codec(config, out),
        Command::Train {
            make_data, codec, base, out, log, ..
        } => cmd_train(config, *make_data, codec, base.as_deref(), out, log.as_deref()),
        Command::Sample {
            model,
            codec,
            sizes,
            label,
            t_extract,
            no_guidance,
            no_san,
            out,
            ..
        } => cmd_sample(config, model, codec, sizes, *label, *t_extract, *no_guidance, *no_san, out),
        Command::ReportParams { checkpoint, preset } => cmd_report_params(config, checkpoint.as_deref(), preset.as_deref()),
        Command::Ablate { base, codec, out, .. } => cmd_ablate(config, base, codec, out),
        Command::EvalCodec { codec, identical, .. } => cmd_eval_codec(config, codec, *identical),
    }
}

fn make_dataset(config: &RunConfig) -> Result<()> {
    let ds = make_synthetic_dataset(&config.synthetic(), &config.data_root)?;
    println!("wrote {} images to {}", ds.len(), config.data_root.display());
    Ok(())
}

fn open_dataset(config: &RunConfig) -> Result<DatasetSpec> {
    DatasetSpec::open(&config.data_root, config.data_classes)
}

fn meta(config: &RunConfig, extra: Value) -> BTreeMap<String, Value> {
    let mut m = BTreeMap::new();
    m.insert("run_config".into(), Value::String(config.render()));
    if let Value::Object(o) = extra {
        m.extend(o);
    }
    m
}

fn cmd_train_codec(config: &RunConfig, out: &Path) -> Result<()> {
    let ds = open_dataset(config)?;
    let train_n = ds.len().saturating_sub(config.codec_holdout);
    if train_n == 0 {
        return Err(Error::Config(format!("codec.holdout {} leaves no training images", config.codec_holdout)));
    }
    let images = (0..train_n).map(|i| ds.load(i)).collect::<Result<Vec<_>>>()?;
    let mut codec = Codec::new(&config.codec(), config.seed)?;
    let losses = train_codec(&mut codec, &images, &config.codec_train(), |s, l| {
        if s % 100 == 0 {
            log::info!("codec step {s} loss {l:.6}");
        }
    })?;
    let last = losses.last().copied().unwrap_or(f64::NAN);
    codec.save(out, &meta(config, json!({ "final_loss": last, "train_images": train_n })))?;
    println!("codec: {} steps, final loss {last:.6}, latent scale {:.4}, wrote {}", losses.len(), codec.latent_scale(), out.display());
    Ok(())
}

fn cmd_train(config: &RunConfig, make_data: bool, codec: &Path, base: Option<&Path>, out: &Path, log_path: Option<&Path>) -> Result<()> {
    let tc = config.train()?;
    let mut model = match (tc.phase, base) {
        (Phase::Base, _) => Model::new(&config.model()?, config.seed)?,
        (Phase::Adapter, Some(b)) => Model::load(b)?.0,
        (Phase::Adapter, None) => return Err(Error::Config("the adapter phase needs a base-phase checkpoint (--base)".into())),
    };
    if make_data && !config.data_root.join(INDEX_FILE).exists() {
        make_dataset(config)?;
    }
    let ds = open_dataset(config)?;
    let (codec, _) = Codec::load(codec)?;
    let base_hw = model.net.base_hw();
    let buckets = match tc.phase {
        Phase::Base => vec![base_hw.0],
        Phase::Adapter => tc.resolution_buckets.clone(),
    };
    log::info!("encoding {} images", ds.len());
    let cache = LatentCache::build(&ds, &codec, base_hw, &buckets)?;
    let log_path = log_path.map(Path::to_path_buf).unwrap_or_else(|| {
        let mut s = out.as_os_str().to_owned();
        s.push(".log.jsonl");
        PathBuf::from(s)
    });
    let file = File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut log = BufWriter::new(file);
    let mut trainer = Trainer::new(tc.clone(), config.schedule()?)?;
    let summary = trainer.run(&mut model, &cache, |r| {
        let line = serde_json::to_string(r).map_err(|e| Error::Internal(e.to_string()))?;
        writeln!(log, "{line}").map_err(|e| Error::io(&log_path, e))?;
        if r.step % 100 == 0 {
            log::info!("step {} loss {:.5}", r.step, r.loss);
        }
        Ok(())
    })?;
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    model.save(
        out,
        &meta(
            config,
            json!({
                "phase": tc.phase.to_string(),
                "steps": tc.steps,
                "skipped": summary.skipped,
                "first_batch_hash": summary.first_batch_hash,
            }),
        ),
    )?;
    println!(
        "{} phase: {} steps in {:.1}s, loss first-100 {:.5} last-100 {:.5}, {} skipped, wrote {} and {}",
        tc.phase,
        tc.steps,
        summary.seconds,
        summary.window_mean(100, false),
        summary.window_mean(100, true),
        summary.skipped,
        out.display(),
        log_path.display()
    );
    Ok(())
}

fn parse_size(s: &str) -> Result<(usize, usize)> {
    let bad = || Error::Config(format!("size {s:?} is not HxW"));
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(bad)?;
    Ok((h.trim().parse().map_err(|_| bad())?, w.trim().parse().map_err(|_| bad())?))
}

#[allow(clippy::too_many_arguments)]
fn cmd_sample(
    config: &RunConfig,
    model: &Path,
    codec: &Path,
    sizes: &[String],
    label: usize,
    t_extract: Option<f64>,
    no_guidance: bool,
    no_san: bool,
    out: &Path,
) -> Result<()> {
    let sizes = sizes.iter().map(|s| parse_size(s)).collect::<Result<Vec<_>>>()?;
    let (model, _) = Model::load(model)?;
    let (codec, _) = Codec::load(codec)?;
    let pipeline = Pipeline::new(&model, &codec, config.schedule()?)?;
    let sampler = config.sampler()?;
    let mut flags = GenerationFlags::for_model(&model);
    flags.guidance = !no_guidance;
    flags.san &= !no_san;
    flags.t_extract = t_extract.unwrap_or(T_EXTRACT);
    let requests: Vec<GenerationRequest> = sizes
        .iter()
        .map(|&hw| GenerationRequest {
            label,
            target_image_hw: hw,
            seed: config.seed,
            sampler: sampler.clone(),
            flags,
        })
        .collect();
    for r in &requests {
        pipeline.target_latent_hw(r)?;
    }
    for r in &requests {
        let (h, w) = r.target_image_hw;
        let path = out.join(format!("label{label}_seed{}_{h}x{w}.png", r.seed));
        let o = pipeline.end_to_end(r, &path)?;
        let t = &o.timings;
        println!(
            "{}: lr {:.3}s, extract {:.3}s, hr {:.3}s, decode {:.3}s, write {:.3}s",
            o.image.display(),
            t.lr_sampling,
            t.extraction,
            t.hr_sampling,
            t.decode,
            t.write
        );
    }
    Ok(())
}

fn cmd_report_params(config: &RunConfig, checkpoint: Option<&Path>, preset: Option<&str>) -> Result<()> {
    let model = match checkpoint {
        Some(p) => Model::load(p)?.0,
        None => {
            let cfg = match preset {
                Some(name) => guided_cascade::model::ModelConfig::preset(name)?,
                None => config.model()?,
            };
            Model::new(&cfg, config.seed)?
        }
    };
    let r = report_params(&model.params);
    println!("frozen     {}", r.frozen);
    println!("trainable  {}", r.trainable);
    println!("total      {}", r.frozen + r.trainable);
    println!("fraction   {:.6}", r.fraction);
    println!();
    println!("{:<40} {:<8} {:>10}", "module", "group", "params");
    for (name, (n, g)) in &r.modules {
        let g = if *g == guided_cascade::params::Group::Base { "frozen" } else { "trainable" };
        println!("{name:<40} {g:<8} {n:>10}");
    }
    Ok(())
}

fn cmd_ablate(config: &RunConfig, base: &Path, codec: &Path, out: &Path) -> Result<()> {
    let (base, _) = Model::load(base)?;
    let (codec, _) = Codec::load(codec)?;
    let ds = open_dataset(config)?;
    let ac = config.ablation()?;
    let cache = LatentCache::build(&ds, &codec, base.net.base_hw(), &ac.train.resolution_buckets)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = File::create(out).map_err(|e| Error::io(out, e))?;
    let mut report = BufWriter::new(file);
    let grid = full_grid(&config.ablation_widths);
    println!("{:<36} {:>10} {:>11} {:>11} {:>8}", "variant", "trainable", "first-loss", "last-loss", "seconds");
    let records = run_ablation(&base, &cache, &grid, &ac, &config.schedule()?, |r| {
        let line = serde_json::to_string(r).map_err(|e| Error::Internal(e.to_string()))?;
        writeln!(report, "{line}").map_err(|e| Error::io(out, e))?;
        report.flush().map_err(|e| Error::io(out, e))?;
        let f = |v: Option<f64>| v.map_or("failed".to_string(), |v| format!("{v:.5}"));
        println!(
            "{:<36} {:>10} {:>11} {:>11} {:>8.1}",
            r.variant,
            r.trainable_params,
            f(r.first_window_loss),
            f(r.last_window_loss),
            r.seconds
        );
        Ok(())
    })?;
    for (axis, best) in trends(&records) {
        println!("lowest final loss by {axis}: {best}");
    }
    let failed = records.iter().filter(|r| !r.ok).count();
    println!("{} variants, {failed} failed, report {}", records.len(), out.display());
    Ok(())
}

fn cmd_eval_codec(config: &RunConfig, codec: &Path, identical: bool) -> Result<()> {
    let (codec, _) = Codec::load(codec)?;
    let ds = open_dataset(config)?;
    let start = ds.len().saturating_sub(config.codec_holdout.max(1));
    let mut values = Vec::new();
    for i in start..ds.len() {
        let x = stack(&[ds.load(i)?])?;
        let y = if identical { x.clone() } else { codec.decode(&codec.encode(&x)?)? };
        let p = psnr(&y, &x)?;
        println!("{}\t{p:.3}", ds.entries[i].0);
        values.push(p);
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    println!("held-out images {}, mean PSNR {mean:.3} dB, min PSNR {min:.3} dB", values.len());
    Ok(())
}
