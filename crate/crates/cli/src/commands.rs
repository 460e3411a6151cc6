use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::Serialize;

use vidistill_core::checkpoint::{load_teacher, read_meta};
use vidistill_core::dataset::{
    generate_synthetic, load_full_clip, load_manifest, ClipRecord, Manifest, SyntheticDataset,
    SyntheticSpec,
};
use vidistill_core::metrics::EvalReport;
use vidistill_core::probe::{
    extract_features, fit_linear_probe, PredictionDump, ProbeConfig, PREDICTIONS_SCHEMA_VERSION,
};
use vidistill_core::provenance::{config_hash, Provenance};
use vidistill_core::trainer::{
    pretrain as run_pretrain, resume_pretrain, PretrainConfig, FINAL_CHECKPOINT,
};
use vidistill_core::views::{eval_view, sample_views_from_disk, View};
use vidistill_core::viz::{
    extract_attention, render_overlay, save_frame_png, top_k_locations, AttentionMap, Location,
};
use vidistill_core::Error;

pub const CLASSIFIER_FILE: &str = "classifier.json";
pub const PREDICTIONS_FILE: &str = "predictions.json";
pub const REPORT_FILE: &str = "report.json";

/// 1 for bad input (configs, manifests, arguments), 2 for runtime failures.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<Error>()) {
        Some(e) if e.is_validation() => 1,
        _ => 2,
    }
}

fn read_json<T: DeserializeOwned>(path: &Path) -> vidistill_core::Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        what: path.display().to_string(),
        message: e.to_string(),
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let json = serde_json::to_string_pretty(value)?;
    std::fs::write(path, json).with_context(|| format!("writing {}", path.display()))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn find_record<'a>(manifest: &'a Manifest, clip: Option<&str>) -> Result<&'a ClipRecord> {
    match clip {
        Some(id) => manifest
            .find(id)
            .ok_or_else(|| Error::Validation(format!("clip '{id}' is not in the manifest")).into()),
        None => manifest
            .records
            .first()
            .ok_or_else(|| Error::Validation("manifest has no records".into()).into()),
    }
}

pub fn synth(out: &Path, config: Option<&Path>, seed: Option<u64>) -> Result<()> {
    let mut spec: SyntheticSpec = match config {
        Some(p) => read_json(p)?,
        None => SyntheticSpec::default(),
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    generate_synthetic(&spec, out)?;
    Provenance::new("synth", config_hash(&spec), spec.seed).write(out)?;
    println!("{}", SyntheticDataset::train_manifest_path(out).display());
    println!("{}", SyntheticDataset::test_manifest_path(out).display());
    Ok(())
}

pub fn pretrain(
    config: &Path,
    manifest: &Path,
    out: Option<&Path>,
    resume: Option<&Path>,
    dump_schedules: Option<&Path>,
) -> Result<()> {
    let cfg: PretrainConfig = read_json(config)?;
    cfg.validate()?;
    let manifest = load_manifest(manifest)?;
    let hash = config_hash(&cfg);
    if let Some(csv) = dump_schedules {
        let schedule = cfg.resolved_schedule(manifest.records.len());
        let dir = csv
            .parent()
            .filter(|d| !d.as_os_str().is_empty())
            .unwrap_or(Path::new("."));
        create_dir(dir)?;
        std::fs::write(csv, schedule.to_csv()?)
            .with_context(|| format!("writing {}", csv.display()))?;
        Provenance::new("pretrain --dump-schedules", hash, cfg.seed).write(dir)?;
        return Ok(());
    }
    let out = out.expect("clap requires --out without --dump-schedules");
    create_dir(out)?;
    write_json(&out.join("config.json"), &cfg)?;
    Provenance::new("pretrain", hash, cfg.seed).write(out)?;
    let outcome = match resume {
        Some(ck) => resume_pretrain(&manifest, cfg, ck, Some(out))?,
        None => run_pretrain(&manifest, cfg, Some(out))?,
    };
    if let Some(last) = outcome.log.last() {
        log::info!(
            "finished at step {} with total loss {:.4}",
            last.step + 1,
            last.total
        );
    }
    println!("{}", out.join(FINAL_CHECKPOINT).display());
    Ok(())
}

#[derive(Serialize)]
struct ProbeRun<'a> {
    probe: &'a ProbeConfig,
    checkpoint_config_hash: &'a str,
}

pub fn probe(
    checkpoint: &Path,
    train_manifest: &Path,
    manifest: Option<&Path>,
    config: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let cfg: ProbeConfig = match config {
        Some(p) => read_json(p)?,
        None => ProbeConfig::default(),
    };
    cfg.validate()?;
    let meta = read_meta(checkpoint)?;
    let backbone = load_teacher(checkpoint)?;
    let train = load_manifest(train_manifest)?;
    let target = match manifest {
        Some(p) => load_manifest(p)?,
        None => train.clone(),
    };
    if target.label_names != train.label_names || target.multi_label != train.multi_label {
        return Err(Error::Validation(
            "train and prediction manifests declare different label spaces".into(),
        )
        .into());
    }
    let hash = config_hash(&ProbeRun {
        probe: &cfg,
        checkpoint_config_hash: &meta.config_hash,
    });
    create_dir(out)?;
    Provenance::new("probe", hash.clone(), cfg.seed).write(out)?;

    log::info!("extracting {} training features", train.records.len());
    let features = extract_features(&train, &backbone, &cfg)?;
    let labels: Vec<BTreeSet<usize>> = train.records.iter().map(|r| r.labels.clone()).collect();
    let classifier = fit_linear_probe(
        &features,
        &labels,
        train.num_classes(),
        train.multi_label,
        &cfg,
    )?;
    classifier.save(&out.join(CLASSIFIER_FILE))?;

    log::info!("predicting {} clips", target.records.len());
    let features = extract_features(&target, &backbone, &cfg)?;
    let mut predictions = BTreeMap::new();
    for (record, f) in target.records.iter().zip(&features) {
        predictions.insert(record.clip_id.clone(), classifier.predict(f)?);
    }
    let dump = PredictionDump {
        schema_version: PREDICTIONS_SCHEMA_VERSION,
        config_hash: hash,
        multi_label: target.multi_label,
        predictions,
    };
    dump.write(&out.join(PREDICTIONS_FILE))?;
    println!("{}", out.join(PREDICTIONS_FILE).display());
    Ok(())
}

#[derive(Serialize)]
struct EvalOutput<'a> {
    config_hash: &'a str,
    #[serde(flatten)]
    report: &'a EvalReport,
}

pub fn eval(predictions: &Path, manifest: &Path, micro: bool, out: Option<&Path>) -> Result<()> {
    let dump = PredictionDump::load(predictions)?;
    let manifest = load_manifest(manifest)?;
    if dump.multi_label != manifest.multi_label {
        return Err(Error::Validation(
            "prediction dump and manifest disagree on multi-label mode".into(),
        )
        .into());
    }
    let known: BTreeSet<&str> = manifest
        .records
        .iter()
        .map(|r| r.clip_id.as_str())
        .collect();
    if let Some(extra) = dump
        .predictions
        .keys()
        .find(|k| !known.contains(k.as_str()))
    {
        return Err(
            Error::Validation(format!("predicted clip '{extra}' is not in the manifest")).into(),
        );
    }
    let mut pred_sets = Vec::with_capacity(manifest.records.len());
    for r in &manifest.records {
        let p = dump
            .predictions
            .get(&r.clip_id)
            .ok_or_else(|| Error::Validation(format!("no prediction for clip '{}'", r.clip_id)))?;
        pred_sets.push(p.labels.clone());
    }
    let gt_sets: Vec<BTreeSet<usize>> = manifest.records.iter().map(|r| r.labels.clone()).collect();
    let report = if manifest.multi_label {
        EvalReport::multi_label(&pred_sets, &gt_sets, &manifest.label_names, micro)?
    } else {
        let first = |s: &BTreeSet<usize>| -> Result<usize> {
            Ok(*s
                .first()
                .ok_or_else(|| Error::Validation("single-label prediction is empty".into()))?)
        };
        let preds: Vec<usize> = pred_sets.iter().map(first).collect::<Result<_>>()?;
        let gts: Vec<usize> = manifest.records.iter().map(|r| r.primary_label()).collect();
        EvalReport::single_label(
            &preds,
            &gts,
            &manifest.label_names,
            manifest.merge_map.as_ref(),
        )?
    };
    print!("{}", report.to_table());
    if let Some(dir) = out {
        create_dir(dir)?;
        let output = EvalOutput {
            config_hash: &dump.config_hash,
            report: &report,
        };
        write_json(&dir.join(REPORT_FILE), &output)?;
        Provenance::new("eval", dump.config_hash.clone(), 0).write(dir)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct ViewRecord<'a> {
    name: String,
    kind: vidistill_core::views::ViewKind,
    size: (usize, usize),
    frame_indices: &'a [usize],
    crop_rect: vidistill_core::frames::Rect,
    applied: vidistill_core::views::AppliedAugment,
}

pub fn dump_views(
    config: &Path,
    manifest: &Path,
    clip: Option<&str>,
    seed: u64,
    out: &Path,
) -> Result<()> {
    let cfg: PretrainConfig = read_json(config)?;
    cfg.validate()?;
    let manifest = load_manifest(manifest)?;
    let record = find_record(&manifest, clip)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let batch = sample_views_from_disk(record, &cfg.views, &cfg.augment, &mut rng)?;
    create_dir(out)?;
    let groups: [(&str, &[View]); 3] = [
        ("global", &batch.globals),
        ("local_temporal", &batch.local_temporals),
        ("local_spatial", &batch.local_spatials),
    ];
    let mut records = Vec::new();
    for (prefix, views) in groups {
        for (i, v) in views.iter().enumerate() {
            let name = format!("{prefix}_{i:02}");
            for f in 0..v.frames.frames {
                save_frame_png(&v.frames, f, &out.join(format!("{name}_f{f:02}.png")))?;
            }
            records.push(ViewRecord {
                name,
                kind: v.kind,
                size: (v.frames.width, v.frames.height),
                frame_indices: &v.frame_indices,
                crop_rect: v.crop_rect,
                applied: v.applied,
            });
        }
    }
    write_json(&out.join("views.json"), &records)?;
    Provenance::new("viz dump-views", config_hash(&cfg), seed).write(out)?;
    Ok(())
}

pub struct AttentionRequest {
    pub checkpoint: PathBuf,
    pub manifest: PathBuf,
    pub clip: Option<String>,
    pub frames: usize,
    pub size: (usize, usize),
    pub k: usize,
    pub head: Option<usize>,
    pub out: PathBuf,
}

#[derive(Serialize)]
struct AttentionOutput<'a> {
    config_hash: &'a str,
    clip_id: &'a str,
    attention: &'a AttentionMap,
    locations: &'a [Location],
}

pub fn attention(req: &AttentionRequest) -> Result<()> {
    if req.frames == 0 || req.size.0 == 0 || req.size.1 == 0 {
        return Err(Error::Validation("--frames and --size must be positive".into()).into());
    }
    let meta = read_meta(&req.checkpoint)?;
    let backbone = load_teacher(&req.checkpoint)?;
    let manifest = load_manifest(&req.manifest)?;
    let record = find_record(&manifest, req.clip.as_deref())?;
    let clip = load_full_clip(record)?;
    let view = eval_view(record, &clip, req.frames, req.size);
    let map = extract_attention(&backbone, &view)?;
    let locations = top_k_locations(&map, req.k, req.head)?;
    create_dir(&req.out)?;
    let radius = map.marker_radius();
    for (t, &src) in map.frame_indices.iter().enumerate() {
        let points: Vec<(f64, f64)> = locations
            .iter()
            .filter(|l| l.frame == t)
            .map(|l| (l.x, l.y))
            .collect();
        let path = req.out.join(format!("attention_f{t:02}_src{src:04}.png"));
        render_overlay(&clip, src, &points, radius, &path)?;
    }
    let output = AttentionOutput {
        config_hash: &meta.config_hash,
        clip_id: &record.clip_id,
        attention: &map,
        locations: &locations,
    };
    write_json(&req.out.join("attention.json"), &output)?;
    Provenance::new("viz attention", meta.config_hash.clone(), meta.seed).write(&req.out)?;
    Ok(())
}
