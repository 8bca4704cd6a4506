use std::fmt::Write as _;
use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use serde::Serialize;
use serde_json::json;

use iwm_core::augment::AugPreset;
use iwm_core::checkpoint::load_checkpoint;
use iwm_core::config::KvConfig;
use iwm_core::data::{self, Dataset, DatasetRef, SynthSpec, SynthTask};
use iwm_core::eval::{self, Distance};
use iwm_core::pretrain::{config_from_bundle, mean_pool, run_pretraining, Model, PretrainConfig};
use iwm_core::probes::{self, FinetuneConfig, PredictionTaskConfig, ProbeAug, ProbeConfig, ProbeKind, TaskSpec};
use iwm_core::rng::sample_key;
use iwm_core::ImageTensor;

use crate::settings::Settings;
use crate::{Common, FinetuneArgs, GridArgs, PlotArgs, SelftestArgs, WithCheckpoint};

/// Version of every JSON and CSV schema written here.
pub const SCHEMA_VERSION: u32 = 1;

fn overrides(c: &Common, seed_keys: &[&str]) -> Vec<String> {
    let mut v = c.set.clone();
    if let Some(s) = c.seed {
        for k in seed_keys {
            v.push(format!("{k}={s}"));
        }
    }
    v
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_jsonl<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut f = File::create(path).with_context(|| format!("writing {}", path.display()))?;
    for r in rows {
        writeln!(f, "{}", serde_json::to_string(&r)?)?;
    }
    Ok(())
}

pub fn load_model(dir: &Path) -> Result<(Model, PretrainConfig)> {
    let b = load_checkpoint(dir).with_context(|| format!("loading checkpoint {}", dir.display()))?;
    Ok((Model::from_bundle(&b)?, config_from_bundle(&b)?))
}

/// Settings layered over the checkpoint's own config, plus the config
/// they resolve to.
fn checkpoint_settings(a: &WithCheckpoint) -> Result<(Model, Settings, PretrainConfig)> {
    let (model, base) = load_model(&a.checkpoint)?;
    let s = Settings::new(base.to_kv(), a.common.config.as_deref(), &overrides(&a.common, &["seed"]))?;
    let cfg = PretrainConfig::from_kv(s.kv())?;
    Ok((model, s, cfg))
}

/// Validation images first, then training images, resized for the encoder.
fn eval_images(ds: &Dataset, n: usize, size: usize) -> Vec<ImageTensor> {
    ds.val
        .iter()
        .chain(&ds.train)
        .take(n)
        .map(|&i| data::resize(&ds.images[i], size))
        .collect()
}

fn resized(mut ds: Dataset, size: usize) -> Dataset {
    for img in &mut ds.images {
        *img = data::resize(img, size);
    }
    ds
}

fn eval_preset(s: &Settings, cfg: &PretrainConfig) -> Result<AugPreset> {
    let name = s.str("eval.preset", &cfg.preset.name);
    // The training preset keeps any per-key overrides.
    if name == cfg.preset.name {
        Ok(cfg.preset.clone())
    } else {
        Ok(AugPreset::named(&name)?)
    }
}

fn parse_distance(s: &str) -> Result<Distance> {
    match s {
        "pooled" => Ok(Distance::Pooled),
        "per-token" => Ok(Distance::PerToken),
        _ => bail!("unknown distance `{s}` (pooled, per-token)"),
    }
}

pub fn pretrain(c: &Common) -> Result<()> {
    let s = Settings::new(KvConfig::new(), c.config.as_deref(), &overrides(c, &["train.seed"]))?;
    let cfg = PretrainConfig::from_kv(s.kv())?;
    let out = run_pretraining(&cfg, Some(&c.out))?;
    let last = out.metrics.last().map_or(f64::NAN, |m| m.loss);
    let summary = json!({
        "schema_version": SCHEMA_VERSION,
        "steps": out.state.step,
        "final_loss": last,
        "embed_std": out.final_embed_std,
        "predictor": cfg.predictor.name(),
        "conditioning": cfg.predictor.conditioning.name(),
        "preset": cfg.preset.name,
    });
    write_json(&c.out.join("summary.json"), &summary)?;
    println!(
        "pretrain: {} steps, final loss {last:.4}, embed std {:.4}",
        out.state.step, out.final_embed_std
    );
    Ok(())
}

pub fn eval_mrr(a: &WithCheckpoint) -> Result<()> {
    let (model, s, cfg) = checkpoint_settings(a)?;
    let n = s.usize("eval.images", 16)?;
    let bank = s.usize("eval.bank", 256)?;
    let dist = parse_distance(&s.str("eval.distance", "pooled"))?;
    let preset = eval_preset(&s, &cfg)?;
    let seed = s.u64("seed", 0)?;
    let ds = data::load(&cfg.data)?;
    let images = eval_images(&ds, n, model.encoder_cfg.image_size);
    let r = eval::mrr(&model, &images, bank, &preset, seed, dist)?;
    let out = &a.common.out;
    s.write_snapshot(out)?;
    write_json(
        &out.join("mrr.json"),
        &json!({
            "schema_version": SCHEMA_VERSION,
            "mrr": r.mrr,
            "images": r.images,
            "bank_size": r.bank_size,
            "chance": harmonic(bank) / bank as f64,
            "preset": preset.name,
            "predictor": model.predictor_cfg.name(),
            "conditioning": model.predictor_cfg.conditioning.name(),
        }),
    )?;
    let mut csv = String::from("image,entry,rank\n");
    for (i, ranks) in r.ranks.iter().enumerate() {
        for (t, rank) in ranks.iter().enumerate() {
            let _ = writeln!(csv, "{i},{t},{rank}");
        }
    }
    write_text(&out.join("ranks.csv"), &csv)?;
    println!("mrr {:.4} over {} images, bank {}", r.mrr, r.images, r.bank_size);
    Ok(())
}

fn harmonic(n: usize) -> f64 {
    (1..=n).map(|k| 1.0 / k as f64).sum()
}

fn parse_cell(spec: &str) -> Result<(String, String)> {
    let (p, q) = spec
        .split_once(':')
        .with_context(|| format!("cell `{spec}` is not PRESET:PREDICTOR"))?;
    Ok((p.to_string(), q.to_string()))
}

pub fn eval_grid(a: &GridArgs) -> Result<()> {
    let mut runs = Vec::new();
    let mut base = None;
    for r in &a.runs {
        let (cell, dir) = r.split_once('=').with_context(|| format!("run `{r}` is not CELL=DIR"))?;
        let (preset, pred) = parse_cell(cell)?;
        let (model, cfg) = load_model(Path::new(dir))?;
        base.get_or_insert(cfg);
        runs.push((preset, pred, Some(model)));
    }
    for c in &a.absent {
        let (preset, pred) = parse_cell(c)?;
        runs.push((preset, pred, None));
    }
    let base = base.context("eval-grid needs at least one --run")?;
    let s = Settings::new(base.to_kv(), a.common.config.as_deref(), &overrides(&a.common, &["seed"]))?;
    let cfg = PretrainConfig::from_kv(s.kv())?;
    let n = s.usize("eval.images", 16)?;
    let bank = s.usize("eval.bank", 256)?;
    let seed = s.u64("seed", 0)?;
    let ds = data::load(&cfg.data)?;
    let images = eval_images(&ds, n, cfg.encoder.image_size);
    let report = eval::equivariance_grid(&runs, &images, bank, seed)?;
    let out = &a.common.out;
    s.write_snapshot(out)?;
    write_text(&out.join("grid.csv"), &report.to_csv())?;
    write_json(&out.join("grid.json"), &json!({"schema_version": SCHEMA_VERSION, "report": report}))?;
    print!("{}", report.to_csv());
    Ok(())
}

pub fn retrieve(a: &WithCheckpoint) -> Result<()> {
    let (model, s, cfg) = checkpoint_settings(a)?;
    let n = s.usize("retrieve.images", 4)?;
    let bank = s.usize("retrieve.bank", 16)?;
    let preset = eval_preset(&s, &cfg)?;
    let seed = s.u64("seed", 0)?;
    let ds = data::load(&cfg.data)?;
    let images = eval_images(&ds, n, model.encoder_cfg.image_size);
    let strength = eval::bank_jitter(&preset);
    let out = &a.common.out;
    s.write_snapshot(out)?;
    let mut csv = String::from("image,truth,nearest,rank\n");
    for (i, img) in images.iter().enumerate() {
        let b = eval::build_bank(img, bank, &strength, &model.teacher, &model.encoder_cfg, sample_key(seed, 0xBA4C, i as u64), false)?;
        let truth = (sample_key(seed, 0x7E57, i as u64) % bank as u64) as usize;
        let ctx = eval::encode_one(&model.student, &model.encoder_cfg, img)?;
        let pred = eval::predict_full(&model, &ctx, &b.entries[truth].action)?;
        let pooled: Vec<Vec<f32>> = b.entries.iter().map(|e| e.pooled.clone()).collect();
        let d = eval::pooled_distances(&mean_pool(&pred), &pooled);
        let nearest = eval::retrieve_nn(&d, 1)[0];
        let _ = writeln!(csv, "{i},{truth},{nearest},{}", eval::rank_of(&d, truth));
        data::write_png(img, &out.join(format!("{i:03}-source.png")))?;
        data::write_png(&b.entries[nearest].image, &out.join(format!("{i:03}-predicted-nn.png")))?;
        data::write_png(&b.entries[truth].image, &out.join(format!("{i:03}-truth.png")))?;
    }
    write_text(&out.join("retrieval.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

fn probe_config(s: &Settings, kind: ProbeKind) -> Result<ProbeConfig> {
    let d = ProbeConfig::default();
    Ok(ProbeConfig {
        kind,
        epochs: s.usize("probe.epochs", d.epochs)?,
        batch_size: s.usize("probe.batch_size", d.batch_size)?,
        lr: s.f64("probe.lr", d.lr)?,
        warmup_epochs: s.f64("probe.warmup_epochs", d.warmup_epochs)?,
        weight_decay: s.f64("probe.weight_decay", d.weight_decay)?,
        aug: ProbeAug::parse(&s.str("probe.aug", d.aug.name()))?,
        heads: s.usize("probe.heads", d.heads)?,
        use_teacher: encoder_choice(s, "probe.encoder")?,
        seed: s.u64("seed", d.seed)?,
    })
}

fn encoder_choice(s: &Settings, key: &str) -> Result<bool> {
    match s.str(key, "teacher").as_str() {
        "teacher" => Ok(true),
        "student" => Ok(false),
        other => bail!("`{key}` must be teacher or student, got `{other}`"),
    }
}

pub fn probe(a: &WithCheckpoint, kind: ProbeKind) -> Result<()> {
    let (model, s, cfg) = checkpoint_settings(a)?;
    let pc = probe_config(&s, kind)?;
    let ds = resized(data::load(&cfg.data)?, model.encoder_cfg.image_size);
    let r = probes::run_probe(&model, &ds, &pc)?;
    let out = &a.common.out;
    s.write_snapshot(out)?;
    write_json(
        &out.join(format!("probe-{}.json", kind.name())),
        &json!({"schema_version": SCHEMA_VERSION, "report": r}),
    )?;
    write_jsonl(
        &out.join("metrics.jsonl"),
        r.epoch_losses.iter().enumerate().map(|(e, l)| json!({"epoch": e, "loss": l})),
    )?;
    println!("{} probe accuracy {:.4} ({} val samples)", kind.name(), r.accuracy, r.val_size);
    Ok(())
}

fn finetune_config(s: &Settings) -> Result<FinetuneConfig> {
    let d = FinetuneConfig::default();
    Ok(FinetuneConfig {
        epochs: s.usize("finetune.epochs", d.epochs)?,
        iterations: s.opt_usize("finetune.iterations")?,
        batch_size: s.usize("finetune.batch_size", d.batch_size)?,
        lr: s.f64("finetune.lr", d.lr)?,
        warmup_frac: s.f64("finetune.warmup_frac", d.warmup_frac)?,
        weight_decay: s.f64("finetune.weight_decay", d.weight_decay)?,
        aug: ProbeAug::parse(&s.str("finetune.aug", d.aug.name()))?,
        heads: s.usize("finetune.heads", d.heads)?,
        seed: s.u64("seed", d.seed)?,
    })
}

fn task_config(s: &Settings) -> Result<PredictionTaskConfig> {
    let d = PredictionTaskConfig::default();
    Ok(PredictionTaskConfig {
        use_teacher: encoder_choice(s, "task.encoder")?,
        null_latents: s.bool("task.null_latents", d.null_latents)?,
        single_token: s.bool("task.single_token", d.single_token)?,
        pretrained_predictor: s.bool("task.pretrained", d.pretrained_predictor)?,
        lr_divisor: s.f64("task.lr_divisor", d.lr_divisor)?,
    })
}

pub fn finetune_predictor(a: &FinetuneArgs) -> Result<()> {
    let (model, s, cfg) = checkpoint_settings(&a.inner)?;
    let fc = finetune_config(&s)?;
    let ds = resized(data::load(&cfg.data)?, model.encoder_cfg.image_size);
    let out = &a.inner.common.out;
    if a.ablation {
        let rows = probes::prediction_task_ablation(&model, &ds, &fc)?;
        s.write_snapshot(out)?;
        let csv = probes::ablation_csv(&rows);
        write_text(&out.join("ablation.csv"), &csv)?;
        write_json(&out.join("ablation.json"), &json!({"schema_version": SCHEMA_VERSION, "rows": rows}))?;
        print!("{csv}");
        return Ok(());
    }
    let tc = task_config(&s)?;
    let r = probes::predictor_finetune(&model, &ds, &tc, &fc)?;
    s.write_snapshot(out)?;
    write_json(&out.join("finetune.json"), &json!({"schema_version": SCHEMA_VERSION, "report": r}))?;
    write_jsonl(
        &out.join("metrics.jsonl"),
        r.losses.iter().enumerate().map(|(i, l)| json!({"iteration": i, "loss": l})),
    )?;
    println!(
        "predictor finetune accuracy {:.4} ({} iterations, {} predictor tokens)",
        r.accuracy(),
        r.iterations,
        r.seq_len
    );
    Ok(())
}

/// Tasks from `multitask.tasks = a,b` with per-task `multitask.<id>.*`
/// dataset keys. Synthetic tasks default to the checkpoint's data spec
/// with a per-task seed.
fn multitask_specs(s: &Settings, cfg: &PretrainConfig) -> Result<Vec<TaskSpec>> {
    let base = match &cfg.data {
        DatasetRef::Synthetic(spec) => *spec,
        DatasetRef::Folder { size, seed, .. } => SynthSpec::new(4, 64, *size, *seed),
    };
    let ids = s.str("multitask.tasks", "shape,quadrant");
    let mut out = Vec::new();
    for (k, id) in ids.split(',').map(str::trim).filter(|t| !t.is_empty()).enumerate() {
        let key = |name: &str| format!("multitask.{id}.{name}");
        let size = s.usize(&key("size"), base.size)?;
        let seed = s.u64(&key("seed"), base.seed + 1 + k as u64)?;
        let dref = match s.kv().get(&key("root")) {
            Some(root) => DatasetRef::Folder {
                root: PathBuf::from(root),
                size,
                seed,
            },
            None => {
                let default_task = if id == "quadrant" { "quadrant" } else { "shape" };
                let task = match s.str(&key("task"), default_task).as_str() {
                    "shape" => SynthTask::Shape,
                    "quadrant" => SynthTask::Quadrant,
                    t => bail!("unknown synthetic task `{t}`"),
                };
                DatasetRef::Synthetic(SynthSpec {
                    classes: s.usize(&key("classes"), base.classes)?,
                    per_class: s.usize(&key("per_class"), base.per_class)?,
                    size,
                    seed,
                    task,
                })
            }
        };
        let mut t = TaskSpec::new(id, resized(data::load(&dref)?, cfg.encoder.image_size));
        t.weight = s.f64(&key("weight"), 1.0)?;
        out.push(t);
    }
    ensure!(!out.is_empty(), "multitask.tasks lists no tasks");
    Ok(out)
}

pub fn finetune_multitask(a: &WithCheckpoint) -> Result<()> {
    let (model, s, cfg) = checkpoint_settings(a)?;
    let fc = finetune_config(&s)?;
    let tc = task_config(&s)?;
    let tasks = multitask_specs(&s, &cfg)?;
    let baselines = s.bool("multitask.baselines", true)?;
    let r = probes::multitask_finetune(&model, &tasks, &tc, &fc, baselines)?;
    let out = &a.common.out;
    s.write_snapshot(out)?;
    write_json(&out.join("multitask.json"), &json!({"schema_version": SCHEMA_VERSION, "report": r}))?;
    write_jsonl(
        &out.join("metrics.jsonl"),
        r.multitask.losses.iter().enumerate().map(|(i, l)| json!({"iteration": i, "loss": l})),
    )?;
    if baselines {
        let csv = r.to_csv();
        write_text(&out.join("multitask.csv"), &csv)?;
        print!("{csv}");
    } else {
        println!("multitask mean accuracy {:.4}", r.mean_multitask());
    }
    Ok(())
}

pub fn marginalize(a: &WithCheckpoint) -> Result<()> {
    let (model, s, cfg) = checkpoint_settings(a)?;
    let n = s.usize("eval.images", 100)?;
    let bank = s.usize("marginal.bank", 16)?;
    let actions = s.usize("marginal.actions", 64)?;
    let preset = eval_preset(&s, &cfg)?;
    let seed = s.u64("seed", 0)?;
    let ds = data::load(&cfg.data)?;
    let images = eval_images(&ds, n, model.encoder_cfg.image_size);
    let trials = eval::marginal_retrieval(&model, &images, bank, actions, &preset, seed)?;
    let hits = trials.iter().filter(|t| t.nearest == 0).count();
    let frac = hits as f64 / trials.len().max(1) as f64;
    let out = &a.common.out;
    s.write_snapshot(out)?;
    let mut csv = String::from("image,nearest,top\n");
    for t in &trials {
        let top: Vec<String> = t.top.iter().map(|v| v.to_string()).collect();
        let _ = writeln!(csv, "{},{},{}", t.image, t.nearest, top.join(" "));
    }
    write_text(&out.join("marginal.csv"), &csv)?;
    write_json(
        &out.join("marginal.json"),
        &json!({"schema_version": SCHEMA_VERSION, "trials": trials.len(), "clean_nearest": hits, "fraction": frac, "actions": actions, "bank_size": bank}),
    )?;
    println!("clean image nearest in {hits}/{} trials ({frac:.3})", trials.len());
    Ok(())
}

pub fn simmatrix(a: &WithCheckpoint) -> Result<()> {
    let (model, s, cfg) = checkpoint_settings(a)?;
    let n = s.usize("sim.images", 4)?;
    let views = s.usize("sim.views", 8)?;
    let encoder = if encoder_choice(&s, "sim.encoder")? { &model.teacher } else { &model.student };
    let preset = eval_preset(&s, &cfg)?;
    let seed = s.u64("seed", 0)?;
    let ds = data::load(&cfg.data)?;
    let images = eval_images(&ds, n, model.encoder_cfg.image_size);
    let m = eval::similarity_matrix(encoder, &model.encoder_cfg, &images, views, &preset, seed)?;
    let out = &a.common.out;
    s.write_snapshot(out)?;
    write_text(&out.join("simmatrix.csv"), &eval::matrix_csv(&m))?;
    println!("{}x{} similarity matrix written", m.len(), m.len());
    Ok(())
}

pub fn selftest(a: &SelftestArgs) -> Result<()> {
    let reports = iwm_tensor::gradcheck::run_suite(0..a.seeds)?;
    let mut csv = String::from("op,seed,max_rel_error\n");
    let mut worst: Vec<(iwm_tensor::OpKind, f64)> = Vec::new();
    for r in &reports {
        let _ = writeln!(csv, "{},{},{:e}", r.kind.name(), r.seed, r.max_rel_error);
        match worst.iter_mut().find(|(k, _)| *k == r.kind) {
            Some((_, e)) => *e = e.max(r.max_rel_error),
            None => worst.push((r.kind, r.max_rel_error)),
        }
    }
    if let Some(dir) = &a.out {
        std::fs::create_dir_all(dir)?;
        write_text(&dir.join("gradcheck.csv"), &csv)?;
    }
    let mut failed = Vec::new();
    for (k, e) in &worst {
        let ok = *e < a.tolerance;
        println!("{:<14} max rel error {e:.3e} {}", k.name(), if ok { "ok" } else { "FAIL" });
        if !ok {
            failed.push(k.name());
        }
    }
    ensure!(failed.is_empty(), "gradient check failed for {}", failed.join(", "));
    Ok(())
}

fn read_json(path: &Path) -> Option<serde_json::Value> {
    serde_json::from_str(&std::fs::read_to_string(path).ok()?).ok()
}

/// Appends the rows of `csv` to `acc` with a leading `run` column; the
/// header is taken from the first file.
fn collate(acc: &mut String, run: &str, csv: &str) {
    let mut lines = csv.lines();
    let header = lines.next().unwrap_or("");
    if acc.is_empty() {
        let _ = writeln!(acc, "run,{header}");
    }
    for l in lines {
        let _ = writeln!(acc, "{run},{l}");
    }
}

pub fn plot_data(a: &PlotArgs) -> Result<()> {
    std::fs::create_dir_all(&a.out)?;
    let mut scatter = String::from("run,predictor,conditioning,mrr,linear,attentive,finetune\n");
    let (mut grids, mut ablations) = (String::new(), String::new());
    let num = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.4}"));
    for dir in &a.runs {
        let run = dir.file_name().map_or_else(|| dir.display().to_string(), |n| n.to_string_lossy().into_owned());
        let mrr = read_json(&dir.join("mrr.json"));
        let acc = |file: &str| read_json(&dir.join(file)).and_then(|v| v["report"]["accuracy"].as_f64());
        let finetune = read_json(&dir.join("finetune.json")).and_then(|v| {
            let tasks = v["report"]["tasks"].as_array()?.clone();
            let accs: Vec<f64> = tasks.iter().filter_map(|t| t["accuracy"].as_f64()).collect();
            (!accs.is_empty()).then(|| accs.iter().sum::<f64>() / accs.len() as f64)
        });
        let field = |k: &str| mrr.as_ref().and_then(|m| m[k].as_str().map(str::to_string)).unwrap_or_default();
        let _ = writeln!(
            scatter,
            "{run},{},{},{},{},{},{}",
            field("predictor"),
            field("conditioning"),
            num(mrr.as_ref().and_then(|m| m["mrr"].as_f64())),
            num(acc("probe-linear.json")),
            num(acc("probe-attentive.json")),
            num(finetune)
        );
        if let Ok(g) = std::fs::read_to_string(dir.join("grid.csv")) {
            collate(&mut grids, &run, &g);
        }
        if let Ok(t) = std::fs::read_to_string(dir.join("ablation.csv")) {
            collate(&mut ablations, &run, &t);
        }
    }
    write_text(&a.out.join("mrr_vs_probe.csv"), &scatter)?;
    if !grids.is_empty() {
        write_text(&a.out.join("equivariance_grid.csv"), &grids)?;
    }
    if !ablations.is_empty() {
        write_text(&a.out.join("prediction_task_ablation.csv"), &ablations)?;
    }
    print!("{scatter}");
    Ok(())
}
