//! Command execution: each command reads its upstream artifacts, writes its
//! outputs and leaves a run record next to them.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::dataset::synthetic::synthetic_cohort;
use crate::dataset::{
    discover_volumes, load_volume, prepare_dataset, read_cache, read_image_f32, records_from_volume, save_volume, write_cache,
    SliceClass, SliceRecord, CACHE_MANIFEST,
};
use crate::diffusion::{load_checkpoint, save_checkpoint, CheckpointMeta, Stage};
use crate::error::{Error, Result};
use crate::fsutil::{read_json, sha256_file, write_atomic, write_json};
use crate::inference::{reconstruct, write_reconstruction, Provenance, ReconstructionRequest};
use crate::metrics::{evaluate, DetectorKind, EvalReport, GeneratedSlice};
use crate::training::{train_stage1, train_stage2, StepLog};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    SynthData,
    Preprocess,
    TrainSd,
    TrainControlnet,
    Infer,
    Evaluate,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::SynthData => "synth-data",
            Command::Preprocess => "preprocess",
            Command::TrainSd => "train-sd",
            Command::TrainControlnet => "train-controlnet",
            Command::Infer => "infer",
            Command::Evaluate => "evaluate",
        }
    }
}

/// Inference mask selection.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub enum MaskArg {
    /// The dataset's dilated tumor mask.
    #[default]
    Auto,
    /// Grayscale PNG; nonzero pixels are inpainted.
    Path(PathBuf),
}

#[derive(Clone, Debug, Default)]
pub struct InferArgs {
    pub checkpoint: Option<PathBuf>,
    /// Cache sidecar (`slices/<id>.json`) or a NIfTI volume; defaults to the
    /// test split of the slice cache.
    pub input: Option<PathBuf>,
    pub mask: MaskArg,
    pub steps: Option<usize>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, Default)]
pub struct EvalArgs {
    pub generated: Option<PathBuf>,
    pub reference: Option<PathBuf>,
    pub detector: Option<DetectorKind>,
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub force: bool,
    pub infer: InferArgs,
    pub eval: EvalArgs,
}

/// Written as `run_<command>.json` in the command's artifact directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub command: Command,
    pub tool_version: String,
    pub config_hash: String,
    pub config: RunConfig,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub wall_time_s: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Outcome {
    Completed(Box<RunRecord>),
    /// Outputs already present and `force` unset.
    Skipped(PathBuf),
}

fn record_name(cmd: Command) -> String {
    format!("run_{}.json", cmd.name())
}

fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

/// Content hashes of every regular file under `root`, keyed by relative
/// path. Run records are left out.
pub fn hash_tree(root: &Path) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    if root.is_file() {
        out.insert(root.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(), sha256_file(root)?);
        return Ok(out);
    }
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
            let path = entry.map_err(|e| Error::io(&dir, e))?.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).expect("under root").to_string_lossy().replace('\\', "/");
                if !(rel.starts_with("run_") && rel.ends_with(".json")) {
                    out.insert(rel, sha256_file(&path)?);
                }
            }
        }
    }
    Ok(out)
}

fn prefixed(prefix: &str, map: BTreeMap<String, String>) -> BTreeMap<String, String> {
    map.into_iter().map(|(k, v)| (format!("{prefix}/{k}"), v)).collect()
}

pub fn stage1_path(cfg: &RunConfig) -> PathBuf {
    cfg.paths.checkpoint_dir.join("stage1.safetensors")
}

pub fn stage2_path(cfg: &RunConfig) -> PathBuf {
    cfg.paths.checkpoint_dir.join("stage2.safetensors")
}

/// Runs one command.
pub fn run(command: Command, cfg: &RunConfig, opts: &RunOptions) -> Result<Outcome> {
    let start = Instant::now();
    let (dir, inputs, outputs) = match execute(command, cfg, opts)? {
        Ok(a) => a,
        Err(existing) => {
            info!("{} exists; skipping {} (use --force to rerun)", existing.display(), command.name());
            return Ok(Outcome::Skipped(existing));
        }
    };
    let record = RunRecord {
        command,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        config_hash: cfg.hash(),
        config: cfg.clone(),
        inputs,
        outputs,
        wall_time_s: start.elapsed().as_secs_f64(),
    };
    write_json(&dir.join(record_name(command)), &record)?;
    Ok(Outcome::Completed(Box::new(record)))
}

type Artifacts = (PathBuf, BTreeMap<String, String>, BTreeMap<String, String>);

/// `Ok(Err(path))` when outputs already exist and `force` is unset.
fn execute(command: Command, cfg: &RunConfig, opts: &RunOptions) -> Result<std::result::Result<Artifacts, PathBuf>> {
    let artifacts = match command {
        Command::SynthData => {
            let dir = &cfg.paths.data_root;
            if !opts.force && dir.join(record_name(command)).is_file() {
                return Ok(Err(dir.clone()));
            }
            create_dir(dir)?;
            for v in synthetic_cohort(cfg.synth.subjects, &cfg.synth.phantom, cfg.seed)? {
                save_volume(dir, &v)?;
            }
            (dir.clone(), BTreeMap::new(), hash_tree(dir)?)
        }
        Command::Preprocess => {
            let dir = &cfg.paths.cache_dir;
            if !opts.force && dir.join(CACHE_MANIFEST).is_file() {
                return Ok(Err(dir.clone()));
            }
            let found = discover_volumes(&cfg.paths.data_root)?;
            if found.is_empty() {
                return Err(Error::MissingArtifact(format!("no volumes under {}", cfg.paths.data_root.display())));
            }
            let volumes = found.iter().map(|p| load_volume(p)).collect::<Result<Vec<_>>>()?;
            let data = prepare_dataset(&volumes, &cfg.preprocess, cfg.seed)?;
            if dir.exists() {
                fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            create_dir(dir)?;
            write_cache(dir, &data, &cfg.preprocess)?;
            (dir.clone(), prefixed("data", hash_tree(&cfg.paths.data_root)?), hash_tree(dir)?)
        }
        Command::TrainSd => {
            let ckpt = stage1_path(cfg);
            if !opts.force && ckpt.is_file() {
                return Ok(Err(ckpt));
            }
            let (data, _) = read_cache(&cfg.paths.cache_dir)?;
            let train: Vec<SliceRecord> = data.train().cloned().collect();
            let dir = &cfg.paths.checkpoint_dir;
            create_dir(dir)?;
            let mut log = JsonLines::create(&dir.join("stage1_log.jsonl"))?;
            let (bundle, summary) = train_stage1(&train, &cfg.model, &cfg.stage1, &mut |s| log.push(s))?;
            log.finish()?;
            let meta = CheckpointMeta::new(Stage::Stage1, &bundle, &cfg.hash(), None, summary.steps as u64);
            save_checkpoint(&ckpt, &bundle, &meta)?;
            info!("stage-1 training finished: {} steps, final loss {:.5}", summary.steps, summary.final_loss);
            let outputs = BTreeMap::from([
                ("stage1.safetensors".to_string(), sha256_file(&ckpt)?),
                ("stage1_log.jsonl".to_string(), sha256_file(&dir.join("stage1_log.jsonl"))?),
            ]);
            (dir.clone(), prefixed("cache", hash_tree(&cfg.paths.cache_dir)?), outputs)
        }
        Command::TrainControlnet => {
            let ckpt = stage2_path(cfg);
            if !opts.force && ckpt.is_file() {
                return Ok(Err(ckpt));
            }
            let parent = stage1_path(cfg);
            let (bundle, _, parent_hash) = load_checkpoint(&parent, Some(Stage::Stage1))?;
            let (data, _) = read_cache(&cfg.paths.cache_dir)?;
            let train: Vec<SliceRecord> = data.train().cloned().collect();
            if let Some(r) = train.iter().find(|r| r.edges.dim() != r.image.dim()) {
                return Err(Error::MissingArtifact(format!("edge map for {}", r.id())));
            }
            let dir = &cfg.paths.checkpoint_dir;
            let mut log = JsonLines::create(&dir.join("stage2_log.jsonl"))?;
            let (bundle, summary) = train_stage2(&train, bundle, &cfg.stage2, &mut |s| log.push(s))?;
            log.finish()?;
            let meta = CheckpointMeta::new(Stage::Stage2, &bundle, &cfg.hash(), Some(parent_hash.clone()), summary.steps as u64);
            save_checkpoint(&ckpt, &bundle, &meta)?;
            info!("stage-2 training finished: {} steps, final loss {:.5}", summary.steps, summary.final_loss);
            let mut inputs = prefixed("cache", hash_tree(&cfg.paths.cache_dir)?);
            inputs.insert("stage1.safetensors".into(), parent_hash);
            let outputs = BTreeMap::from([
                ("stage2.safetensors".to_string(), sha256_file(&ckpt)?),
                ("stage2_log.jsonl".to_string(), sha256_file(&dir.join("stage2_log.jsonl"))?),
            ]);
            (dir.clone(), inputs, outputs)
        }
        Command::Infer => return run_infer(cfg, opts),
        Command::Evaluate => return run_evaluate(cfg, opts),
    };
    Ok(Ok(artifacts))
}

/// Reads a grayscale PNG (8 or 16 bit) as a binary mask.
pub fn read_mask_png(path: &Path) -> Result<Array2<bool>> {
    let file = fs::File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::io(path, e),
    })?;
    let mut reader = png::Decoder::new(std::io::BufReader::new(file)).read_info().map_err(|e| Error::format(path, e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::format(path, e.to_string()))?;
    if info.color_type != png::ColorType::Grayscale {
        return Err(Error::format(path, "mask must be grayscale"));
    }
    let (h, w) = (info.height as usize, info.width as usize);
    let vals: Vec<bool> = match info.bit_depth {
        png::BitDepth::Eight => buf[..h * w].iter().map(|&b| b != 0).collect(),
        png::BitDepth::Sixteen => buf[..2 * h * w].chunks_exact(2).map(|c| c[0] != 0 || c[1] != 0).collect(),
        other => return Err(Error::format(path, format!("unsupported bit depth {other:?}"))),
    };
    Ok(Array2::from_shape_vec((h, w), vals).expect("frame size"))
}

fn infer_inputs(cfg: &RunConfig, args: &InferArgs) -> Result<(Vec<SliceRecord>, BTreeMap<String, String>)> {
    match &args.input {
        Some(p) if p.extension().is_some_and(|e| e == "json") => {
            let dir = p.parent().unwrap_or(Path::new("."));
            let name = p.file_name().expect("file path").to_string_lossy().into_owned();
            Ok((vec![crate::dataset::read_record(dir, &name)?], hash_tree(p)?))
        }
        Some(p) => {
            let (records, _) = records_from_volume(&load_volume(p)?, &cfg.preprocess)?;
            let tumorous = records.into_iter().filter(|r| r.slice_class == SliceClass::Tumorous || args.mask != MaskArg::Auto).collect();
            Ok((tumorous, prefixed("input", hash_tree(p)?)))
        }
        None => {
            let (data, _) = read_cache(&cfg.paths.cache_dir)?;
            let mut picked: Vec<SliceRecord> = data.test().filter(|r| r.slice_class == SliceClass::Tumorous).cloned().collect();
            if cfg.inference.limit > 0 {
                picked.truncate(cfg.inference.limit);
            }
            Ok((picked, prefixed("cache", hash_tree(&cfg.paths.cache_dir)?)))
        }
    }
}

fn run_infer(cfg: &RunConfig, opts: &RunOptions) -> Result<std::result::Result<Artifacts, PathBuf>> {
    let args = &opts.infer;
    let dir = args.out.clone().unwrap_or_else(|| cfg.paths.output_dir.clone());
    if !opts.force && dir.join(record_name(Command::Infer)).is_file() {
        return Ok(Err(dir));
    }
    let ckpt = args.checkpoint.clone().unwrap_or_else(|| stage2_path(cfg));
    let (bundle, _, hash) = load_checkpoint(&ckpt, Some(Stage::Stage2))?;
    let (records, mut inputs) = infer_inputs(cfg, args)?;
    if records.is_empty() {
        return Err(Error::Empty("no slices selected for reconstruction".into()));
    }
    let mask_override = match &args.mask {
        MaskArg::Auto => None,
        MaskArg::Path(p) => {
            inputs.insert("mask".into(), sha256_file(p)?);
            Some(read_mask_png(p)?)
        }
    };
    inputs.insert("checkpoint".into(), hash.clone());
    create_dir(&dir)?;
    let steps = args.steps.unwrap_or(cfg.inference.steps);
    let seed = args.seed.unwrap_or(cfg.inference.seed);
    for r in &records {
        let req = ReconstructionRequest { slice: r, steps, seed, mask_override: mask_override.clone() };
        let rec = reconstruct(&bundle, &hash, &cfg.preprocess.canny, &req)?;
        write_reconstruction(&dir, r, &rec)?;
        info!("reconstructed {} ({} masked pixels)", rec.provenance.slice_id, rec.provenance.mask_pixels);
    }
    Ok(Ok((dir.clone(), inputs, hash_tree(&dir)?)))
}

/// Reconstructions in `dir` as `(provenance, image, mask)`.
pub fn read_reconstructions(dir: &Path) -> Result<Vec<(Provenance, Array2<f32>, Array2<bool>)>> {
    if !dir.is_dir() {
        return Err(Error::MissingArtifact(format!("reconstruction directory {}", dir.display())));
    }
    let mut jsons: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension().is_some_and(|e| e == "json") && !p.file_name().is_some_and(|n| n.to_string_lossy().starts_with("run_"))
        })
        .collect();
    jsons.sort();
    let mut out = Vec::with_capacity(jsons.len());
    for j in jsons {
        let prov: Provenance = read_json(&j)?;
        let mask = read_mask_png(&dir.join(format!("{}_mask.png", prov.slice_id)))?;
        let (h, w) = mask.dim();
        let image = read_image_f32(&dir.join(format!("{}.f32", prov.slice_id)), h, w)?;
        out.push((prov, image, mask));
    }
    Ok(out)
}

fn run_evaluate(cfg: &RunConfig, opts: &RunOptions) -> Result<std::result::Result<Artifacts, PathBuf>> {
    let args = &opts.eval;
    let report_path = args.out.clone().unwrap_or_else(|| cfg.paths.eval_dir.join("report.json"));
    let dir = report_path.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
    if !opts.force && report_path.is_file() {
        return Ok(Err(report_path));
    }
    let gen_dir = args.generated.clone().unwrap_or_else(|| cfg.paths.output_dir.clone());
    let ref_dir = args.reference.clone().unwrap_or_else(|| cfg.paths.cache_dir.clone());
    let generated = read_reconstructions(&gen_dir)?;
    let (data, _) = read_cache(&ref_dir)?;
    let mut reference: Vec<&SliceRecord> = data.test().filter(|r| r.slice_class == SliceClass::NonTumorous).collect();
    if reference.len() < 2 {
        warn!("fewer than 2 healthy test slices; using healthy slices from both splits as the reference set");
        reference = data.records.iter().filter(|r| r.slice_class == SliceClass::NonTumorous).collect();
    }
    if reference.len() < 2 {
        return Err(Error::MissingArtifact(format!(
            "healthy reference slices in {} (found {}, need at least 2)",
            ref_dir.display(),
            reference.len()
        )));
    }
    let slices: Vec<GeneratedSlice<'_>> =
        generated.iter().map(|(p, img, m)| GeneratedSlice { id: p.slice_id.clone(), image: img.view(), mask: m.view() }).collect();
    let refs: Vec<_> = reference.iter().map(|r| r.image.view()).collect();
    let detector = args.detector.clone().unwrap_or_else(|| cfg.evaluate.detector.clone());
    let report: EvalReport = evaluate(&slices, &refs, &cfg.evaluate.extractor, &detector, &cfg.hash())?;
    create_dir(&dir)?;
    write_json(&report_path, &report)?;
    let mut outputs = hash_tree(&report_path)?;
    if cfg.evaluate.write_csv {
        let csv = report_path.with_extension("csv");
        write_atomic(&csv, report.to_csv().as_bytes())?;
        outputs.extend(hash_tree(&csv)?);
    }
    info!("fid {:.4}, ssim {:.4}, fp rate {:.4}", report.fid, report.ssim_mean, report.fp_rate);
    let mut inputs = prefixed("generated", hash_tree(&gen_dir)?);
    inputs.extend(prefixed("reference", BTreeMap::from([(CACHE_MANIFEST.to_string(), sha256_file(&ref_dir.join(CACHE_MANIFEST))?)])));
    Ok(Ok((dir, inputs, outputs)))
}

/// Training log sink: one JSON object per line, mirrored to the logger.
struct JsonLines {
    path: PathBuf,
    buf: Vec<u8>,
}

impl JsonLines {
    fn create(path: &Path) -> Result<Self> {
        Ok(Self { path: path.to_path_buf(), buf: Vec::new() })
    }

    fn push(&mut self, s: &StepLog) {
        let line = serde_json::to_string(s).expect("log line serializes");
        info!(target: "train", "{line}");
        writeln!(self.buf, "{line}").expect("in-memory write");
    }

    fn finish(self) -> Result<()> {
        write_atomic(&self.path, &self.buf)
    }
}
