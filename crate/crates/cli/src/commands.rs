//! Subcommand implementations.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use clap::Args;
use mitodet::dataset::{self, PatchRecord};
use mitodet::infer::{predict, Scorer, ScorerMode};
use mitodet::metrics::{self, MatchStrategy, Report};
use mitodet::postprocess::{self, Candidate};
use mitodet::{augment, io, stain, AnnotationSet, Detection, Error, ImageRgb, StainMatrix};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::PipelineConfig;
use crate::overlay::draw_detections;
use crate::CliError;

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "tif", "tiff"];
/// Outputs of earlier runs that may share a directory with the inputs.
const DERIVED_SUFFIXES: [&str; 2] = ["_mask", "_overlay"];

/// Image files of `dir` as `(id, path)` sorted by id; the id is the file stem.
pub fn list_images(dir: &Path) -> Result<Vec<(String, PathBuf)>, CliError> {
    let entries = std::fs::read_dir(dir).map_err(|e| io_error(dir, e))?;
    let mut out = BTreeMap::new();
    for entry in entries {
        let path = entry.map_err(|e| io_error(dir, e))?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if !path.is_file() || !ext.is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.as_str())) {
            continue;
        }
        let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else {
            continue;
        };
        if DERIVED_SUFFIXES.iter().any(|s| stem.ends_with(s)) {
            continue;
        }
        if out.insert(stem.to_string(), path.clone()).is_some() {
            return Err(Error::DuplicateImageId(stem.to_string()).into());
        }
    }
    Ok(out.into_iter().collect())
}

/// `dir/<id>.png`, `.tif` or `.tiff`.
pub fn find_image(dir: &Path, id: &str) -> Result<PathBuf, CliError> {
    IMAGE_EXTENSIONS
        .iter()
        .map(|e| dir.join(format!("{id}.{e}")))
        .find(|p| p.is_file())
        .ok_or_else(|| {
            Error::NotFound {
                path: dir.join(format!("{id}.png")),
            }
            .into()
        })
}

fn io_error(path: &Path, source: std::io::Error) -> CliError {
    if source.kind() == std::io::ErrorKind::NotFound {
        Error::NotFound { path: path.to_path_buf() }.into()
    } else {
        Error::Io {
            path: path.to_path_buf(),
            source,
        }
        .into()
    }
}

fn write_output(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| io_error(parent, e))?;
    }
    io::write_atomic(path, bytes)?;
    Ok(())
}

fn annotations_by_id(path: &Path) -> Result<HashMap<String, AnnotationSet>, CliError> {
    Ok(io::load_annotations(path)?
        .into_iter()
        .map(|a| (a.image_id().to_string(), a))
        .collect())
}

#[derive(Debug, Clone, Args)]
pub struct MaskgenArgs {
    /// Annotation JSON
    #[arg(long)]
    pub annotations: PathBuf,
    /// Directory holding `<image_id>.png|.tif`
    #[arg(long)]
    pub images: PathBuf,
    /// Output directory for `<image_id>_mask.png`
    #[arg(short, long)]
    pub out: PathBuf,
    /// Disk radius in pixels (default from config, 17)
    #[arg(long)]
    pub radius: Option<f64>,
}

pub fn maskgen(args: &MaskgenArgs, cfg: &PipelineConfig) -> Result<Vec<PathBuf>, CliError> {
    let radius = args.radius.unwrap_or(cfg.disk_radius);
    if !(radius >= 1.0 && radius.is_finite()) {
        return Err(CliError::Usage(format!("--radius must be at least 1, got {radius}")));
    }
    let sets = io::load_annotations(&args.annotations)?;
    let mut written = Vec::with_capacity(sets.len());
    for ann in &sets {
        let image = io::load_image(&find_image(&args.images, ann.image_id())?)?;
        let mask = dataset::disk_mask(ann, image.width(), image.height(), radius)?;
        let path = args.out.join(format!("{}_mask.png", ann.image_id()));
        write_output(&path, &io::encode_png_mask(&mask))?;
        log::info!("{}: {} mask pixels", ann.image_id(), mask.count_ones());
        written.push(path);
    }
    Ok(written)
}

#[derive(Debug, Clone, Args)]
pub struct SampleArgs {
    /// Annotation JSON
    #[arg(long)]
    pub annotations: PathBuf,
    /// Image directory (grid mode needs the image sizes)
    #[arg(long)]
    pub images: Option<PathBuf>,
    /// Output patch CSV
    #[arg(short, long)]
    pub out: PathBuf,
    /// Classifier patches centred on annotated points instead of a grid
    #[arg(long)]
    pub points: bool,
    /// Draw one balanced epoch from the harvested records
    #[arg(long)]
    pub epoch: bool,
    /// Negatives per positive in an epoch
    #[arg(long, default_value_t = 1.0)]
    pub ratio: f64,
}

pub fn sample(args: &SampleArgs, cfg: &PipelineConfig) -> Result<Vec<PatchRecord>, CliError> {
    if !(args.ratio >= 0.0 && args.ratio.is_finite()) {
        return Err(CliError::Usage(format!("--ratio must be non-negative, got {}", args.ratio)));
    }
    let sets = io::load_annotations(&args.annotations)?;
    let mut records = Vec::new();
    for ann in &sets {
        if args.points {
            records.extend(dataset::harvest_point_patches(ann, cfg.patch));
        } else {
            let dir = args
                .images
                .as_deref()
                .ok_or_else(|| CliError::Usage("grid sampling needs --images".into()))?;
            let image = io::load_image(&find_image(dir, ann.image_id())?)?;
            records.extend(dataset::harvest_patches(
                ann,
                image.width(),
                image.height(),
                cfg.harvest_size,
                cfg.harvest_stride,
                cfg.harvest_margin,
            )?);
        }
    }
    if args.epoch {
        let epoch = dataset::epoch_sample(&records, args.ratio, &mut ChaCha8Rng::seed_from_u64(cfg.seed));
        if epoch.no_positives {
            log::warn!("no positive patches; the epoch is empty");
        }
        records = epoch.records;
    }
    write_output(&args.out, dataset::patches_to_csv(&records).as_bytes())?;
    Ok(records)
}

#[derive(Debug, Clone, Args)]
pub struct FoldsArgs {
    /// Annotation JSON; every image id is assigned a fold
    #[arg(long)]
    pub annotations: PathBuf,
    #[arg(short, default_value_t = 3)]
    pub k: usize,
    /// Output JSON (default: stdout)
    #[arg(short, long)]
    pub out: Option<PathBuf>,
}

pub fn folds(args: &FoldsArgs, cfg: &PipelineConfig) -> Result<String, CliError> {
    let ids: Vec<String> = io::load_annotations(&args.annotations)?
        .iter()
        .map(|a| a.image_id().to_string())
        .collect();
    let folds = dataset::make_folds(&ids, args.k, cfg.seed)?;
    let json = serde_json::to_string_pretty(&folds).expect("folds serialize") + "\n";
    match &args.out {
        Some(p) => write_output(p, json.as_bytes())?,
        None => print!("{json}"),
    }
    Ok(json)
}

#[derive(Debug, Clone, Args)]
pub struct DetectArgs {
    /// Directory of PNG/TIFF images
    pub images: PathBuf,
    /// Output detection CSV
    #[arg(short, long)]
    pub out: PathBuf,
    /// Directory for `<image_id>_overlay.png` marker images
    #[arg(long)]
    pub overlay: Option<PathBuf>,
    /// Ground truth, required by oracle scorers
    #[arg(long)]
    pub annotations: Option<PathBuf>,
    /// Enable test-time augmentation
    #[arg(long)]
    pub tta: bool,
    /// Overrides the configured segmentation threshold
    #[arg(long)]
    pub threshold: Option<f32>,
}

#[derive(Debug, Clone, Default)]
pub struct DetectSummary {
    pub images: usize,
    pub detections: Vec<(String, Detection)>,
    pub failed: Vec<(PathBuf, String)>,
}

enum ImageFailure {
    Unreadable(String),
    Fatal(CliError),
}

impl From<CliError> for ImageFailure {
    fn from(e: CliError) -> Self {
        ImageFailure::Fatal(e)
    }
}

impl From<Error> for ImageFailure {
    fn from(e: Error) -> Self {
        ImageFailure::Fatal(e.into())
    }
}

fn build_scorers(
    specs: &[crate::config::ScorerSpec],
    mode: ScorerMode,
    gt: Option<&AnnotationSet>,
) -> Result<Vec<Box<dyn Scorer>>, CliError> {
    specs.iter().map(|s| s.build(mode, gt)).collect()
}

/// Ground truth for an image when oracles are in play; unannotated images
/// get an empty set.
fn oracle_truth(cfg: &PipelineConfig, gt: &Option<HashMap<String, AnnotationSet>>, id: &str, mpp: f64) -> Option<AnnotationSet> {
    let gt = gt.as_ref()?;
    Some(gt.get(id).cloned().unwrap_or_else(|| {
        if cfg.uses_oracle() {
            log::warn!("{id}: no annotations; oracle scorers see no figures");
        }
        AnnotationSet::new(id, mpp, Vec::new()).expect("empty set is valid")
    }))
}

fn detect_one(
    id: &str,
    path: &Path,
    cfg: &PipelineConfig,
    gt: &Option<HashMap<String, AnnotationSet>>,
    overlay_dir: Option<&Path>,
) -> Result<Vec<Detection>, ImageFailure> {
    let image = io::load_image(path).map_err(|e| ImageFailure::Unreadable(e.to_string()))?;
    let truth = oracle_truth(cfg, gt, id, image.mpp());
    let segmenters = build_scorers(&cfg.segmenter, ScorerMode::Segmentation, truth.as_ref())?;
    let refs: Vec<&dyn Scorer> = segmenters.iter().map(|s| s.as_ref()).collect();
    let map = predict(&image, &refs, cfg.tta, cfg.tile, cfg.overlap)?;
    let candidates = postprocess::extract_candidates(&map, &cfg.extract_params())?;
    let dets = if cfg.classifier.is_empty() {
        postprocess::candidates_to_detections(&candidates)
    } else {
        let classifiers = build_scorers(&cfg.classifier, ScorerMode::Classification, truth.as_ref())?;
        let refs: Vec<&dyn Scorer> = classifiers.iter().map(|s| s.as_ref()).collect();
        postprocess::refine(&image, &candidates, &refs, &cfg.refine_params())?
    };
    log::info!("{id}: {} candidates, {} detections", candidates.len(), dets.len());
    if let Some(dir) = overlay_dir {
        let png = io::encode_png_rgb(&draw_detections(&image, &dets));
        write_output(&dir.join(format!("{id}_overlay.png")), &png)?;
    }
    Ok(dets)
}

pub fn detect(args: &DetectArgs, cfg: &PipelineConfig) -> Result<DetectSummary, CliError> {
    let mut cfg = cfg.clone();
    cfg.tta |= args.tta;
    if let Some(t) = args.threshold {
        cfg.threshold = t;
    }
    cfg.validate()?;
    let gt = match &args.annotations {
        Some(p) => Some(annotations_by_id(p)?),
        None if cfg.uses_oracle() => return Err(CliError::Usage("oracle scorers need --annotations".into())),
        None => None,
    };
    let images = list_images(&args.images)?;
    if images.is_empty() {
        log::warn!("no PNG or TIFF images in {}", args.images.display());
    }
    let results: Vec<_> = images
        .par_iter()
        .map(|(id, path)| detect_one(id, path, &cfg, &gt, args.overlay.as_deref()))
        .collect();

    let mut summary = DetectSummary {
        images: images.len(),
        ..Default::default()
    };
    for ((id, path), result) in images.iter().zip(results) {
        match result {
            Ok(dets) => summary.detections.extend(dets.into_iter().map(|d| (id.clone(), d))),
            Err(ImageFailure::Unreadable(msg)) => summary.failed.push((path.clone(), msg)),
            Err(ImageFailure::Fatal(e)) => return Err(e),
        }
    }
    write_output(&args.out, io::detections_to_csv(&summary.detections).as_bytes())?;
    report_failures(&summary.failed, images.len())?;
    Ok(summary)
}

fn report_failures(failed: &[(PathBuf, String)], total: usize) -> Result<(), CliError> {
    for (path, msg) in failed {
        log::error!("skipped {}: {msg}", path.display());
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Partial {
            failed: failed.len(),
            total,
        })
    }
}

#[derive(Debug, Clone, Args)]
pub struct RefineArgs {
    /// Candidate CSV (`image_id,x,y,score`)
    #[arg(long)]
    pub candidates: PathBuf,
    /// Directory of the images the candidates came from
    #[arg(long)]
    pub images: PathBuf,
    /// Output detection CSV
    #[arg(short, long)]
    pub out: PathBuf,
    /// Ground truth, required by oracle classifiers
    #[arg(long)]
    pub annotations: Option<PathBuf>,
    /// Flip test-time augmentation of the patches
    #[arg(long)]
    pub tta: bool,
}

pub fn refine(args: &RefineArgs, cfg: &PipelineConfig) -> Result<Vec<(String, Detection)>, CliError> {
    if cfg.classifier.is_empty() {
        return Err(CliError::Usage("refine needs at least one [[classifier]] in the config".into()));
    }
    let mut cfg = cfg.clone();
    cfg.tta |= args.tta;
    let gt = match &args.annotations {
        Some(p) => Some(annotations_by_id(p)?),
        None if cfg.classifier.iter().any(|s| s.kind == crate::config::ScorerKind::Oracle) => {
            return Err(CliError::Usage("oracle classifiers need --annotations".into()))
        }
        None => None,
    };
    let text = std::fs::read_to_string(&args.candidates).map_err(|e| io_error(&args.candidates, e))?;
    let mut by_image: BTreeMap<String, Vec<Candidate>> = BTreeMap::new();
    for (id, d) in io::parse_detections_csv(&text)? {
        by_image.entry(id).or_default().push(Candidate {
            x: d.x(),
            y: d.y(),
            area: 1,
            seg_score: d.score(),
        });
    }
    let groups: Vec<_> = by_image.into_iter().collect();
    let results: Vec<Result<Vec<Detection>, ImageFailure>> = groups
        .par_iter()
        .map(|(id, cands)| {
            let path = find_image(&args.images, id).map_err(|e| ImageFailure::Unreadable(e.to_string()))?;
            let image = io::load_image(&path).map_err(|e| ImageFailure::Unreadable(e.to_string()))?;
            let truth = oracle_truth(&cfg, &gt, id, image.mpp());
            let classifiers = build_scorers(&cfg.classifier, ScorerMode::Classification, truth.as_ref())?;
            let refs: Vec<&dyn Scorer> = classifiers.iter().map(|s| s.as_ref()).collect();
            Ok(postprocess::refine(&image, cands, &refs, &cfg.refine_params())?)
        })
        .collect();
    let mut rows = Vec::new();
    let mut failed = Vec::new();
    for ((id, _), result) in groups.iter().zip(results) {
        match result {
            Ok(dets) => rows.extend(dets.into_iter().map(|d| (id.clone(), d))),
            Err(ImageFailure::Unreadable(msg)) => failed.push((args.images.join(id), msg)),
            Err(ImageFailure::Fatal(e)) => return Err(e),
        }
    }
    write_output(&args.out, io::detections_to_csv(&rows).as_bytes())?;
    report_failures(&failed, groups.len())?;
    Ok(rows)
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    /// Detection CSV
    #[arg(long, required_unless_present = "counts")]
    pub detections: Option<PathBuf>,
    /// Annotation JSON (mitotic points are the ground truth)
    #[arg(long, required_unless_present = "counts")]
    pub annotations: Option<PathBuf>,
    /// Matching radius in pixels (default from config, 30)
    #[arg(long, conflicts_with = "radius_um")]
    pub radius_px: Option<f64>,
    /// Matching radius in micrometres, converted with the annotations' mpp
    #[arg(long)]
    pub radius_um: Option<f64>,
    /// Greedy by-score matching instead of optimal assignment
    #[arg(long)]
    pub greedy: bool,
    /// Score raw counts `tp,fp,fn` instead of files
    #[arg(long, conflicts_with_all = ["detections", "annotations"])]
    pub counts: Option<String>,
    /// Write the report as JSON
    #[arg(short, long)]
    pub out: Option<PathBuf>,
}

fn parse_counts(text: &str) -> Result<(usize, usize, usize), CliError> {
    let bad = || CliError::Usage(format!("--counts expects tp,fp,fn, got {text:?}"));
    let parts: Vec<usize> = text
        .split(',')
        .map(|p| p.trim().parse().map_err(|_| bad()))
        .collect::<Result<_, _>>()?;
    match parts[..] {
        [tp, fp, fn_] => Ok((tp, fp, fn_)),
        _ => Err(bad()),
    }
}

pub fn eval(args: &EvalArgs, cfg: &PipelineConfig) -> Result<Report, CliError> {
    let mut radius = args.radius_px.unwrap_or(cfg.match_radius_px);
    let report = if let Some(c) = &args.counts {
        let (tp, fp, fn_) = parse_counts(c)?;
        let (precision, recall, f1) = metrics::prf(tp, fp, fn_);
        println!("precision {precision:.4}  recall {recall:.4}  f1 {f1:.4}");
        Report {
            precision,
            recall,
            f1,
            tp,
            fp,
            fn_,
            radius_px: radius,
            per_image: Vec::new(),
        }
    } else {
        let (dpath, apath) = match (&args.detections, &args.annotations) {
            (Some(d), Some(a)) => (d, a),
            _ => return Err(CliError::Usage("eval needs --detections and --annotations, or --counts".into())),
        };
        let sets = io::load_annotations(apath)?;
        if let Some(um) = args.radius_um {
            let mut mpps = sets.iter().map(|s| s.mpp());
            let mpp = mpps.next().unwrap_or(mitodet::types::DEFAULT_MPP);
            if mpps.any(|m| m != mpp) {
                return Err(CliError::Usage("--radius-um needs every image at the same mpp; use --radius-px".into()));
            }
            radius = um / mpp;
        }
        if !(radius > 0.0 && radius.is_finite()) {
            return Err(CliError::Usage(format!("matching radius must be positive, got {radius}")));
        }
        let text = std::fs::read_to_string(dpath).map_err(|e| io_error(dpath, e))?;
        let mut dets: BTreeMap<String, Vec<Detection>> = BTreeMap::new();
        for (id, d) in io::parse_detections_csv(&text)? {
            dets.entry(id).or_default().push(d);
        }
        let dets: Vec<_> = dets.into_iter().collect();
        let gts: Vec<(String, Vec<(f64, f64)>)> = sets
            .iter()
            .map(|s| (s.image_id().to_string(), s.mitotic().map(|p| (p.x, p.y)).collect()))
            .collect();
        let strategy = if args.greedy { MatchStrategy::Greedy } else { MatchStrategy::Optimal };
        let report = metrics::evaluate_run(&dets, &gts, radius, strategy)?;
        print!("{}", report.table());
        report
    };
    if let Some(p) = &args.out {
        write_output(p, report.to_json().as_bytes())?;
    }
    Ok(report)
}

#[derive(Debug, Clone, Args)]
pub struct NormalizeArgs {
    pub image: PathBuf,
    #[arg(short, long)]
    pub out: PathBuf,
    /// Target stain matrix JSON (default: the reference H&E basis)
    #[arg(long)]
    pub target: Option<PathBuf>,
    /// Also write the stain matrix estimated from the input
    #[arg(long)]
    pub save_matrix: Option<PathBuf>,
}

pub fn normalize(args: &NormalizeArgs, _cfg: &PipelineConfig) -> Result<(), CliError> {
    let target = match &args.target {
        Some(p) => StainMatrix::from_json(&std::fs::read_to_string(p).map_err(|e| io_error(p, e))?)?,
        None => StainMatrix::reference(),
    };
    let image = io::load_image(&args.image)?;
    if let Some(p) = &args.save_matrix {
        write_output(p, stain::estimate_stain_matrix(&image)?.to_json().as_bytes())?;
    }
    let out = stain::normalize_stain(&image, &target)?;
    write_output(&args.out, &io::encode_png_rgb(&out))
}

#[derive(Debug, Clone, Args)]
pub struct AugmentArgs {
    pub image: PathBuf,
    #[arg(short, long)]
    pub out: PathBuf,
    /// Mask transformed alongside the image
    #[arg(long, requires = "mask_out")]
    pub mask: Option<PathBuf>,
    #[arg(long, requires = "mask")]
    pub mask_out: Option<PathBuf>,
}

pub fn augment(args: &AugmentArgs, cfg: &PipelineConfig) -> Result<(), CliError> {
    let spec = cfg.augment_spec()?;
    let image: ImageRgb = io::load_image(&args.image)?;
    let mask = args.mask.as_deref().map(io::load_mask).transpose()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (out, out_mask) = augment::apply(&image, mask.as_ref(), &spec, &mut rng)?;
    write_output(&args.out, &io::encode_png_rgb(&out))?;
    if let (Some(p), Some(m)) = (&args.mask_out, out_mask) {
        write_output(p, &io::encode_png_mask(&m))?;
    }
    Ok(())
}
