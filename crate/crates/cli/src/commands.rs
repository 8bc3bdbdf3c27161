//! Pipeline stages. Each command reads and writes files under the
//! configured data and work directories and returns a small summary.

use std::path::{Path, PathBuf};

use serde::Serialize;
use vpr_core::analysis::{
    comparison_csv, comparison_markdown, count_params, estimate_flops, reference_comparison, ComparisonRow,
};
use vpr_core::model::StudentModel;
use vpr_core::retrieval::{
    evaluate, ground_truths, synth_dataset_gen, DescriptorIndex, PcaModel, PlaceRecord, RecallReport, Split,
};
use vpr_core::training::{distill_stage, finetune_stage, LossCurve, TeacherOracle};
use vpr_core::{Error, ParamStore, Result};
use vpr_tensor::{DType, Tensor};

use crate::config::{seed_offset, RunConfig};
use crate::formats::{
    load_into, read_checkpoint, read_json, read_manifest, read_tensor, store_entries, write_bytes, write_checkpoint,
    write_json, write_manifest, write_tensor,
};

pub const MANIFEST: &str = "manifest.jsonl";
pub const DISTILL_CKPT: &str = "distill.ckpt";
pub const FINETUNE_CKPT: &str = "finetune.ckpt";
pub const DESCRIPTOR_DIR: &str = "descriptors";
pub const REDUCED_DIR: &str = "descriptors_pca";
pub const PCA_FILE: &str = "pca.json";
pub const INDEX_FILE: &str = "index.ckpt";
pub const RECALL_JSON: &str = "recall.json";
pub const RECALL_CSV: &str = "recall.csv";

fn manifest_path(cfg: &RunConfig) -> PathBuf {
    cfg.data_dir.join(MANIFEST)
}

fn descriptor_file(dir: &Path, id: u64) -> PathBuf {
    dir.join(format!("{id:06}.dtns"))
}

/// Directory holding the descriptors that are searched: reduced when a
/// PCA dimension is configured.
fn search_dir(cfg: &RunConfig) -> PathBuf {
    cfg.work_dir.join(if cfg.pca_dim.is_some() {
        REDUCED_DIR
    } else {
        DESCRIPTOR_DIR
    })
}

fn check_finite(t: &Tensor, what: &str) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("non-finite values in {what}")))
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GenDataSummary {
    pub images: usize,
    pub places: usize,
    pub manifest: PathBuf,
}

/// Synthesize the dataset: one tensor file per image plus the manifest.
pub fn gen_data(cfg: &RunConfig) -> Result<GenDataSummary> {
    let ds = synth_dataset_gen(&cfg.synth())?;
    let per_image: usize = ds.images.shape()[1..].iter().product();
    for (i, r) in ds.records.iter().enumerate() {
        let img = Tensor::new(
            &ds.images.shape()[1..],
            ds.images.data()[i * per_image..(i + 1) * per_image].to_vec(),
            DType::F32,
        )?;
        write_tensor(&cfg.data_dir.join(&r.tensor), &img)?;
    }
    let manifest = manifest_path(cfg);
    write_manifest(&manifest, &ds.records)?;
    log::info!("wrote {} images to {}", ds.records.len(), cfg.data_dir.display());
    Ok(GenDataSummary {
        images: ds.records.len(),
        places: cfg.data.num_places,
        manifest,
    })
}

/// Records of one split in manifest order with their images stacked.
pub fn load_split(cfg: &RunConfig, split: Split) -> Result<(Vec<PlaceRecord>, Tensor)> {
    let records: Vec<PlaceRecord> = read_manifest(&manifest_path(cfg))?
        .into_iter()
        .filter(|r| r.split == split)
        .collect();
    let b = &cfg.model.backbone;
    let expected = [3, b.image_size, b.image_size];
    let mut data = Vec::with_capacity(records.len() * expected.iter().product::<usize>());
    for r in &records {
        let path = cfg.data_dir.join(&r.tensor);
        let t = read_tensor(&path)?;
        if t.shape() != expected {
            return Err(Error::format(
                &path,
                "extents",
                format!("image shape {:?}, model expects {:?}", t.shape(), expected),
            ));
        }
        data.extend_from_slice(t.data());
    }
    let images = Tensor::new(&[records.len(), 3, b.image_size, b.image_size], data, cfg.dtype())?;
    Ok((records, images))
}

pub fn build_student(cfg: &RunConfig) -> Result<(StudentModel, ParamStore)> {
    let student = StudentModel::new(cfg.model.clone())?;
    let store = student.init_params(cfg.derived_seed(seed_offset::INIT), cfg.dtype())?;
    Ok((student, store))
}

pub fn load_student(cfg: &RunConfig, checkpoint: &Path) -> Result<(StudentModel, ParamStore)> {
    let (student, mut store) = build_student(cfg)?;
    load_into(&mut store, read_checkpoint(checkpoint)?, checkpoint)?;
    Ok((student, store))
}

fn save_store(path: &Path, store: &ParamStore) -> Result<()> {
    for p in store.iter() {
        check_finite(&p.value, &format!("parameter `{}`", p.name))?;
    }
    write_checkpoint(path, &store_entries(store))
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainSummary {
    pub steps: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub checkpoint: PathBuf,
}

fn train_summary(curve: &LossCurve, checkpoint: PathBuf) -> Result<TrainSummary> {
    match (curve.initial(), curve.last()) {
        (Some(initial_loss), Some(final_loss)) => Ok(TrainSummary {
            steps: curve.losses.len(),
            initial_loss,
            final_loss,
            checkpoint,
        }),
        _ => Err(Error::Data("training ran no steps".into())),
    }
}

fn teacher(cfg: &RunConfig, n_train: usize) -> Result<TeacherOracle> {
    match &cfg.teacher_tokens {
        None => TeacherOracle::toy(&cfg.model, cfg.derived_seed(seed_offset::TEACHER), cfg.dtype()),
        Some(path) => {
            let tokens = read_tensor(path)?;
            let b = &cfg.model.backbone;
            let expected = [n_train, b.num_tokens(), cfg.model.aggregator.dim];
            if tokens.shape() != expected {
                return Err(Error::format(
                    path,
                    "extents",
                    format!("teacher tokens {:?}, expected {:?}", tokens.shape(), expected),
                ));
            }
            Ok(TeacherOracle::Precomputed {
                tokens: tokens.to_dtype(cfg.dtype()),
                descriptors: None,
            })
        }
    }
}

/// Feature distillation from the teacher into a freshly initialized student.
pub fn train_distill(cfg: &RunConfig) -> Result<TrainSummary> {
    let (_, images) = load_split(cfg, Split::Train)?;
    let (student, mut store) = build_student(cfg)?;
    let teacher = teacher(cfg, images.shape()[0])?;
    let curve = distill_stage(&student, &mut store, &teacher, &images, &cfg.distill_stage())?;
    write_bytes(&cfg.work_dir.join("distill_loss.csv"), curve.to_csv().as_bytes())?;
    let path = cfg.work_dir.join(DISTILL_CKPT);
    save_store(&path, &store)?;
    train_summary(&curve, path)
}

/// Metric fine-tuning starting from the distilled checkpoint.
pub fn train_finetune(cfg: &RunConfig) -> Result<TrainSummary> {
    let (records, images) = load_split(cfg, Split::Train)?;
    let labels: Vec<u64> = records.iter().map(|r| r.place_id).collect();
    let (student, mut store) = load_student(cfg, &cfg.work_dir.join(DISTILL_CKPT))?;
    let curve = finetune_stage(&student, &mut store, &images, &labels, &cfg.finetune_stage())?;
    write_bytes(&cfg.work_dir.join("finetune_loss.csv"), curve.to_csv().as_bytes())?;
    let path = cfg.work_dir.join(FINETUNE_CKPT);
    save_store(&path, &store)?;
    train_summary(&curve, path)
}

#[derive(Debug, Clone, Serialize)]
pub struct ExtractSummary {
    pub descriptors: usize,
    pub dim: usize,
    pub dir: PathBuf,
}

/// Descriptors for `images`, computed `batch` images at a time. With the
/// cross-image encoder on, images only interact within their batch.
pub fn describe_batched(student: &StudentModel, store: &ParamStore, images: &Tensor, batch: usize) -> Result<Tensor> {
    let n = images.shape()[0];
    let d = student.cfg.descriptor_dim();
    let mut out = Vec::with_capacity(n * d);
    let idx: Vec<usize> = (0..n).collect();
    for chunk in idx.chunks(batch.max(1)) {
        let x = vpr_core::training::select_rows(images, chunk)?;
        out.extend_from_slice(student.describe(store, x)?.data());
    }
    Ok(Tensor::new(&[n, d], out, images.dtype())?)
}

/// One descriptor file per database and query image.
pub fn extract(cfg: &RunConfig) -> Result<ExtractSummary> {
    let ckpt = cfg
        .checkpoint
        .clone()
        .unwrap_or_else(|| cfg.work_dir.join(FINETUNE_CKPT));
    let (student, store) = load_student(cfg, &ckpt)?;
    let dir = cfg.work_dir.join(DESCRIPTOR_DIR);
    let mut count = 0;
    for split in [Split::Database, Split::Query] {
        let (records, images) = load_split(cfg, split)?;
        if records.is_empty() {
            continue;
        }
        let desc = describe_batched(&student, &store, &images, cfg.eval_batch)?;
        check_finite(&desc, "descriptors")?;
        for (r, row) in records.iter().zip(desc.rows()) {
            write_tensor(
                &descriptor_file(&dir, r.id),
                &Tensor::new(&[row.len()], row.to_vec(), desc.dtype())?,
            )?;
            count += 1;
        }
    }
    Ok(ExtractSummary {
        descriptors: count,
        dim: cfg.model.descriptor_dim(),
        dir,
    })
}

/// Stacked descriptors of one split read from `dir`.
fn load_descriptors(cfg: &RunConfig, dir: &Path, split: Split) -> Result<(Vec<u64>, usize, Vec<f64>)> {
    let records = read_manifest(&manifest_path(cfg))?;
    let mut ids = Vec::new();
    let mut dim = None;
    let mut data = Vec::new();
    for r in records.iter().filter(|r| r.split == split) {
        let path = descriptor_file(dir, r.id);
        let t = read_tensor(&path)?;
        if t.ndim() != 1 || dim.is_some_and(|d| d != t.len()) {
            return Err(Error::format(
                &path,
                "extents",
                format!("descriptor shape {:?} differs from {:?}", t.shape(), dim.map(|d| [d])),
            ));
        }
        dim = Some(t.len());
        ids.push(r.id);
        data.extend_from_slice(t.data());
    }
    let dim = dim.ok_or_else(|| Error::Data(format!("no {split:?} descriptors in {}", dir.display())))?;
    Ok((ids, dim, data))
}

#[derive(Debug, Clone, Serialize)]
pub struct PcaSummary {
    pub in_dim: usize,
    pub out_dim: usize,
    pub fitted_on: usize,
}

/// Fit the reduction on database descriptors.
pub fn pca_fit(cfg: &RunConfig) -> Result<PcaSummary> {
    let out_dim = cfg.pca_dim.ok_or_else(|| Error::Config("pca_dim is not set".into()))?;
    let (ids, dim, data) = load_descriptors(cfg, &cfg.work_dir.join(DESCRIPTOR_DIR), Split::Database)?;
    let model = PcaModel::fit(&data, ids.len(), dim, out_dim, cfg.pca_whiten)?;
    write_json(&cfg.work_dir.join(PCA_FILE), &model)?;
    Ok(PcaSummary {
        in_dim: dim,
        out_dim,
        fitted_on: ids.len(),
    })
}

/// Reduce every database and query descriptor with the fitted model.
pub fn pca_apply(cfg: &RunConfig) -> Result<ExtractSummary> {
    let pca_path = cfg.work_dir.join(PCA_FILE);
    let model: PcaModel = read_json(&pca_path)?;
    let src = cfg.work_dir.join(DESCRIPTOR_DIR);
    let dst = cfg.work_dir.join(REDUCED_DIR);
    let mut count = 0;
    for split in [Split::Database, Split::Query] {
        let (ids, dim, data) = load_descriptors(cfg, &src, split)?;
        if dim != model.in_dim {
            return Err(Error::format(
                &pca_path,
                "in_dim",
                format!("model expects {} dims, descriptors have {dim}", model.in_dim),
            ));
        }
        let reduced = model.apply_rows(&data)?;
        for (id, row) in ids.iter().zip(reduced.chunks(model.out_dim)) {
            write_tensor(
                &descriptor_file(&dst, *id),
                &Tensor::new(&[row.len()], row.to_vec(), DType::F64)?,
            )?;
            count += 1;
        }
    }
    Ok(ExtractSummary {
        descriptors: count,
        dim: model.out_dim,
        dir: dst,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct IndexSummary {
    pub entries: usize,
    pub dim: usize,
    pub path: PathBuf,
}

/// Store the database descriptors as a checkpoint with `ids` and
/// `descriptors` entries.
pub fn index_build(cfg: &RunConfig) -> Result<IndexSummary> {
    let (ids, dim, data) = load_descriptors(cfg, &search_dir(cfg), Split::Database)?;
    if let Some(bad) = ids.iter().find(|&&i| i > MAX_EXACT_ID) {
        return Err(Error::Data(format!(
            "place id {bad} cannot be stored exactly in the index"
        )));
    }
    let index = DescriptorIndex::build(ids.clone(), dim, data)?;
    let n = index.len();
    let id_tensor = Tensor::new(&[n], ids.iter().map(|&i| i as f64).collect(), DType::F64)?;
    let desc = Tensor::new(&[n, dim], index.data().to_vec(), DType::F64)?;
    let path = cfg.work_dir.join(INDEX_FILE);
    write_checkpoint(&path, &[("ids".into(), id_tensor), ("descriptors".into(), desc)])?;
    Ok(IndexSummary { entries: n, dim, path })
}

/// Ids are stored as f64, exact up to 2^53.
const MAX_EXACT_ID: u64 = 1 << 53;

pub fn load_index(path: &Path) -> Result<DescriptorIndex> {
    let mut entries = read_checkpoint(path)?;
    let mut take = |name: &str| {
        entries
            .iter()
            .position(|(n, _)| n == name)
            .map(|i| entries.swap_remove(i).1)
            .ok_or_else(|| Error::format(path, name, "entry missing from index"))
    };
    let ids = take("ids")?;
    let desc = take("descriptors")?;
    if desc.ndim() != 2 || ids.ndim() != 1 || desc.shape()[0] != ids.len() {
        return Err(Error::format(
            path,
            "descriptors",
            format!("shape {:?} does not match {} ids", desc.shape(), ids.len()),
        ));
    }
    if let Some(bad) = ids
        .data()
        .iter()
        .find(|&&v| !(v >= 0.0 && v <= MAX_EXACT_ID as f64 && v.fract() == 0.0))
    {
        return Err(Error::format(path, "ids", format!("{bad} is not an exact place id")));
    }
    let ids = ids.data().iter().map(|&v| v as u64).collect();
    DescriptorIndex::build(ids, desc.shape()[1], desc.into_data())
}

/// Search every query against the index and score Recall@N.
pub fn eval(cfg: &RunConfig) -> Result<RecallReport> {
    let index = load_index(&cfg.work_dir.join(INDEX_FILE))?;
    let (ids, dim, data) = load_descriptors(cfg, &search_dir(cfg), Split::Query)?;
    if dim != index.dim() {
        return Err(Error::Dimension(format!(
            "query descriptors have {dim} dims, index has {}",
            index.dim()
        )));
    }
    let queries: Vec<(u64, Vec<f64>)> = ids.into_iter().zip(data.chunks(dim).map(<[f64]>::to_vec)).collect();
    let records = read_manifest(&manifest_path(cfg))?;
    let gt = ground_truths().create(&cfg.ground_truth.mode, &cfg.ground_truth)?;
    let report = evaluate(&index, &queries, &records, gt.as_ref(), &cfg.recall_ns)?;
    write_json(&cfg.work_dir.join(RECALL_JSON), &report)?;
    write_bytes(&cfg.work_dir.join(RECALL_CSV), report.to_csv().as_bytes())?;
    Ok(report)
}

#[derive(Debug, Clone, Serialize)]
pub struct AnalysisReport {
    pub rows: Vec<ComparisonRow>,
    pub params_total: u64,
    pub gflops_no_encoder: f64,
    pub gflops_with_encoder: f64,
}

/// Parameter and FLOPs comparison table for the configured model.
pub fn analyze(cfg: &RunConfig) -> Result<AnalysisReport> {
    cfg.model.validate()?;
    let rows = reference_comparison(&cfg.model);
    write_bytes(&cfg.work_dir.join("analysis.md"), comparison_markdown(&rows).as_bytes())?;
    write_bytes(&cfg.work_dir.join("analysis.csv"), comparison_csv(&rows).as_bytes())?;
    let report = AnalysisReport {
        rows,
        params_total: count_params(&cfg.model).total(),
        gflops_no_encoder: estimate_flops(&cfg.model, false, 1).total() as f64 / 1e9,
        gflops_with_encoder: estimate_flops(&cfg.model, true, 1).total() as f64 / 1e9,
    };
    write_json(&cfg.work_dir.join("analysis.json"), &report)?;
    Ok(report)
}

#[derive(Debug, Clone, Serialize)]
pub struct PipelineSummary {
    pub data: GenDataSummary,
    pub distill: TrainSummary,
    pub finetune: TrainSummary,
    pub recall: RecallReport,
}

/// gen-data → train-distill → train-finetune → extract → [pca] → index-build → eval.
pub fn run_pipeline(cfg: &RunConfig) -> Result<PipelineSummary> {
    let data = gen_data(cfg)?;
    let distill = train_distill(cfg)?;
    let finetune = train_finetune(cfg)?;
    extract(cfg)?;
    if cfg.pca_dim.is_some() {
        pca_fit(cfg)?;
        pca_apply(cfg)?;
    }
    index_build(cfg)?;
    let recall = eval(cfg)?;
    Ok(PipelineSummary {
        data,
        distill,
        finetune,
        recall,
    })
}
