use std::path::{Path, PathBuf};

use mitodet::synth::planted_image;
use mitodet::{io, AnnotationSet, ImageRgb, PointAnnotation};
use mitodet_cli::commands::*;
use mitodet_cli::config::{ScorerKind, ScorerSpec};
use mitodet_cli::{CliError, PipelineConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn write_annotations(path: &Path, sets: &[AnnotationSet]) {
    io::save_annotations(path, sets).unwrap();
}

/// Planted synthetic images plus their annotation file.
fn planted_set(dir: &Path, n: usize, size: usize, seed: u64) -> (PathBuf, PathBuf, Vec<AnnotationSet>) {
    let images = dir.join("images");
    std::fs::create_dir_all(&images).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sets: Vec<AnnotationSet> = (0..n)
        .map(|i| {
            let p = planted_image(&format!("img{i:02}"), size, size, 4 + i % 3, 2, &mut rng);
            io::save_png(&images.join(format!("img{i:02}.png")), &p.image).unwrap();
            p.annotations
        })
        .collect();
    let ann = dir.join("ann.json");
    write_annotations(&ann, &sets);
    (images, ann, sets)
}

fn oracle_config() -> PipelineConfig {
    PipelineConfig {
        segmenter: vec![ScorerSpec::of(ScorerKind::Oracle)],
        classifier: vec![ScorerSpec::of(ScorerKind::Oracle)],
        ..Default::default()
    }
}

#[test]
fn maskgen_draws_disk_unions() {
    let dir = tempfile::tempdir().unwrap();
    let images = dir.path().join("img");
    std::fs::create_dir_all(&images).unwrap();
    io::save_png(&images.join("a.png"), &ImageRgb::filled(120, 90, [200; 3])).unwrap();
    io::save_png(&images.join("b.png"), &ImageRgb::filled(40, 40, [200; 3])).unwrap();
    let pts = [(30.0, 40.0), (50.0, 45.0)];
    let sets = vec![
        AnnotationSet::new(
            "a",
            0.25,
            pts.iter()
                .map(|&(x, y)| PointAnnotation::mitotic(x, y))
                .chain([PointAnnotation::imposter(100.0, 20.0)])
                .collect(),
        )
        .unwrap(),
        AnnotationSet::new("b", 0.25, vec![]).unwrap(),
    ];
    let ann = dir.path().join("ann.json");
    write_annotations(&ann, &sets);
    let args = MaskgenArgs {
        annotations: ann.clone(),
        images: images.clone(),
        out: dir.path().join("masks"),
        radius: None,
    };
    let written = maskgen(&args, &PipelineConfig::default()).unwrap();
    assert_eq!(written.len(), 2);
    let a = io::load_mask(&written[0]).unwrap();
    let brute = (0..90)
        .flat_map(|y| (0..120).map(move |x| (x as f64, y as f64)))
        .filter(|&(x, y)| pts.iter().any(|p| (x - p.0).powi(2) + (y - p.1).powi(2) <= 289.0))
        .count();
    assert_eq!(a.count_ones(), brute);
    assert!(written[0].ends_with("a_mask.png"));
    assert_eq!(io::load_mask(&written[1]).unwrap().count_ones(), 0);

    let zero = MaskgenArgs { radius: Some(0.0), ..args.clone() };
    assert!(matches!(maskgen(&zero, &PipelineConfig::default()), Err(CliError::Usage(_))));

    std::fs::remove_file(images.join("b.png")).unwrap();
    let err = maskgen(&args, &PipelineConfig::default()).unwrap_err();
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn detect_with_oracles_finds_planted_points() {
    let dir = tempfile::tempdir().unwrap();
    let (images, ann, sets) = planted_set(dir.path(), 3, 640, 21);
    let out = dir.path().join("out/dets.csv");
    let args = DetectArgs {
        images: images.clone(),
        out: out.clone(),
        overlay: Some(dir.path().join("overlay")),
        annotations: Some(ann.clone()),
        tta: false,
        threshold: None,
    };
    let summary = detect(&args, &oracle_config()).unwrap();
    assert_eq!(summary.images, 3);
    let rows = io::parse_detections_csv(&std::fs::read_to_string(&out).unwrap()).unwrap();
    let total: usize = sets.iter().map(|s| s.mitotic().count()).sum();
    assert_eq!(rows.len(), total);
    for (id, d) in &rows {
        let set = sets.iter().find(|s| s.image_id() == id).unwrap();
        let near = set.mitotic().map(|p| (p.x - d.x()).hypot(p.y - d.y())).fold(f64::INFINITY, f64::min);
        assert!(near <= 1.0);
    }
    assert!(dir.path().join("overlay/img01_overlay.png").is_file());

    let eval_args = EvalArgs {
        detections: Some(out),
        annotations: Some(ann),
        radius_px: None,
        radius_um: None,
        greedy: false,
        counts: None,
        out: Some(dir.path().join("report.json")),
    };
    let report = eval(&eval_args, &PipelineConfig::default()).unwrap();
    assert_eq!(report.f1, 1.0);
    let json: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(json["fn"], 0);
}

#[test]
fn detect_edge_cases() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty");
    std::fs::create_dir_all(&empty).unwrap();
    let out = dir.path().join("d.csv");
    let args = DetectArgs {
        images: empty.clone(),
        out: out.clone(),
        overlay: None,
        annotations: None,
        tta: false,
        threshold: None,
    };
    let s = detect(&args, &PipelineConfig::default()).unwrap();
    assert_eq!(s.images, 0);
    assert_eq!(std::fs::read_to_string(&out).unwrap(), "image_id,x,y,score\n");

    // oracle without ground truth is a usage error
    assert_eq!(detect(&args, &oracle_config()).unwrap_err().exit_code(), 1);

    // an unreadable file is skipped and reported; the rest is still written
    let imgs = dir.path().join("imgs");
    std::fs::create_dir_all(&imgs).unwrap();
    io::save_png(&imgs.join("good.png"), &ImageRgb::filled(64, 64, [255; 3])).unwrap();
    std::fs::write(imgs.join("bad.png"), b"not a png").unwrap();
    let partial = DetectArgs { images: imgs.clone(), ..args.clone() };
    let err = detect(&partial, &PipelineConfig::default()).unwrap_err();
    assert!(matches!(err, CliError::Partial { failed: 1, total: 2 }));
    assert_eq!(err.exit_code(), 2);
    assert!(out.is_file());

    // a failing external scorer aborts with the protocol exit code
    std::fs::remove_file(imgs.join("bad.png")).unwrap();
    let cfg = PipelineConfig {
        segmenter: vec![ScorerSpec {
            command: Some("exit 3;".into()),
            ..ScorerSpec::of(ScorerKind::External)
        }],
        ..Default::default()
    };
    let err = detect(&partial, &cfg).unwrap_err();
    assert_eq!(err.exit_code(), 3, "{err}");
    assert!(err.to_string().contains("status 3"));
}

#[test]
fn external_segmenter_protocol_round_trip() {
    // a shell scorer that answers every tile with an all-0.25 map by
    // copying a prepared PMAP file
    let dir = tempfile::tempdir().unwrap();
    let tile = 64;
    let pmap = dir.path().join("quarter.pmap");
    io::write_pmap(&pmap, &mitodet::ProbMap::filled(tile, tile, 0.25)).unwrap();
    let cmd = format!(
        "f() {{ for p in \"$1\"/t*.png; do cp {} \"${{p%.png}}.pmap\"; done; }}; f",
        pmap.display()
    );
    let imgs = dir.path().join("imgs");
    std::fs::create_dir_all(&imgs).unwrap();
    io::save_png(&imgs.join("x.png"), &ImageRgb::filled(100, 70, [255; 3])).unwrap();
    let cfg = PipelineConfig {
        tile,
        overlap: 8,
        threshold: 0.2,
        open_radius: 0,
        min_area: 1,
        segmenter: vec![ScorerSpec {
            command: Some(cmd),
            ..ScorerSpec::of(ScorerKind::External)
        }],
        ..Default::default()
    };
    let args = DetectArgs {
        images: imgs,
        out: dir.path().join("d.csv"),
        overlay: None,
        annotations: None,
        tta: false,
        threshold: None,
    };
    let s = detect(&args, &cfg).unwrap();
    // the whole image is one component centred in the frame
    assert_eq!(s.detections.len(), 1);
    let d = s.detections[0].1;
    assert_eq!((d.x(), d.y(), d.score()), (49.5, 34.5, 0.25));
}

#[test]
fn refine_command_filters_candidates() {
    let dir = tempfile::tempdir().unwrap();
    let (images, ann, sets) = planted_set(dir.path(), 1, 300, 5);
    let gt = sets[0].mitotic().next().unwrap();
    let cands = vec![
        ("img00".to_string(), mitodet::Detection::new(gt.x + 2.0, gt.y, 0.8).unwrap()),
        ("img00".to_string(), mitodet::Detection::new(5.0, 5.0, 0.9).unwrap()),
    ];
    let cpath = dir.path().join("cands.csv");
    std::fs::write(&cpath, io::detections_to_csv(&cands)).unwrap();
    let args = RefineArgs {
        candidates: cpath,
        images,
        out: dir.path().join("refined.csv"),
        annotations: Some(ann),
        tta: true,
    };
    assert!(matches!(refine(&args, &PipelineConfig::default()), Err(CliError::Usage(_))));
    let rows = refine(&args, &oracle_config()).unwrap();
    assert_eq!(rows.len(), 1);
    assert!((rows[0].1.x() - gt.x - 2.0).abs() < 1e-3);
}

#[test]
fn eval_modes() {
    let dir = tempfile::tempdir().unwrap();
    let args = EvalArgs {
        detections: None,
        annotations: None,
        radius_px: None,
        radius_um: None,
        greedy: false,
        counts: Some("8314,2063,1686".into()),
        out: None,
    };
    let r = eval(&args, &PipelineConfig::default()).unwrap();
    assert!((r.f1 - 0.8160).abs() < 5e-4);
    let bad = EvalArgs { counts: Some("1,2".into()), ..args.clone() };
    assert!(matches!(eval(&bad, &PipelineConfig::default()), Err(CliError::Usage(_))));

    // image "b" has no predictions: its points count as misses
    let sets = vec![
        AnnotationSet::new("a", 0.25, vec![PointAnnotation::mitotic(10.0, 10.0)]).unwrap(),
        AnnotationSet::new("b", 0.25, vec![PointAnnotation::mitotic(10.0, 10.0), PointAnnotation::mitotic(90.0, 90.0)]).unwrap(),
    ];
    let ann = dir.path().join("a.json");
    write_annotations(&ann, &sets);
    let csv = dir.path().join("d.csv");
    std::fs::write(&csv, "image_id,x,y,score\na,12.0,10.0,0.9\n").unwrap();
    let files = EvalArgs {
        detections: Some(csv.clone()),
        annotations: Some(ann.clone()),
        counts: None,
        ..args.clone()
    };
    let r = eval(&files, &PipelineConfig::default()).unwrap();
    assert_eq!((r.tp, r.fp, r.fn_), (1, 0, 2));

    // 0.25 µm radius at 0.25 mpp is one pixel: the 2-px offset misses
    let tight = EvalArgs { radius_um: Some(0.25), ..files.clone() };
    let r = eval(&tight, &PipelineConfig::default()).unwrap();
    assert_eq!((r.tp, r.fp, r.fn_), (0, 1, 3));

    std::fs::write(&csv, "image_id,x,y,score\na,12.0,10.0,0.9\na,oops,1,1\n").unwrap();
    let err = eval(&files, &PipelineConfig::default()).unwrap_err();
    assert!(err.to_string().contains("line 3"), "{err}");
}

#[test]
fn folds_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let sets: Vec<_> = (0..6).map(|i| AnnotationSet::new(format!("id{i}"), 0.25, vec![]).unwrap()).collect();
    let ann = dir.path().join("a.json");
    write_annotations(&ann, &sets);
    let cfg = PipelineConfig { seed: 1, ..Default::default() };
    let run = |name: &str| {
        let out = dir.path().join(name);
        folds(&FoldsArgs { annotations: ann.clone(), k: 3, out: Some(out.clone()) }, &cfg).unwrap();
        std::fs::read(out).unwrap()
    };
    assert_eq!(run("f1.json"), run("f2.json"));
    let parsed: mitodet::dataset::FoldAssignment = serde_json::from_slice(&run("f3.json")).unwrap();
    assert_eq!(parsed.fold_sizes(), [2, 2, 2]);
    let too_many = FoldsArgs { annotations: ann, k: 7, out: None };
    assert_eq!(folds(&too_many, &cfg).unwrap_err().exit_code(), 2);
}

#[test]
fn sample_matches_harvest_geometry() {
    let dir = tempfile::tempdir().unwrap();
    let images = dir.path().join("img");
    std::fs::create_dir_all(&images).unwrap();
    io::save_png(&images.join("wide.png"), &ImageRgb::filled(768, 512, [220; 3])).unwrap();
    let ann = dir.path().join("a.json");
    write_annotations(
        &ann,
        &[AnnotationSet::new("wide", 0.25, vec![PointAnnotation::mitotic(700.0, 256.0)]).unwrap()],
    );
    let out = dir.path().join("p.csv");
    let args = SampleArgs {
        annotations: ann.clone(),
        images: Some(images),
        out: out.clone(),
        points: false,
        epoch: false,
        ratio: 1.0,
    };
    sample(&args, &PipelineConfig::default()).unwrap();
    assert_eq!(
        std::fs::read_to_string(&out).unwrap(),
        "image_id,x0,y0,size,polarity\nwide,0,0,512,negative\nwide,256,0,512,positive\n"
    );
    let epoch = SampleArgs { epoch: true, ..args.clone() };
    let recs = sample(&epoch, &PipelineConfig::default()).unwrap();
    assert_eq!(recs.len(), 2);
    let no_images = SampleArgs { images: None, ..args };
    assert!(matches!(sample(&no_images, &PipelineConfig::default()), Err(CliError::Usage(_))));
}

#[test]
fn augment_identity_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let p = planted_image("x", 96, 80, 1, 0, &mut rng);
    let src = dir.path().join("x.png");
    io::save_png(&src, &p.image).unwrap();
    let mask = dir.path().join("m.png");
    let m = mitodet::dataset::disk_mask(&p.annotations, 96, 80, 17.0).unwrap();
    io::write_atomic(&mask, &io::encode_png_mask(&m)).unwrap();

    let zero = PipelineConfig::parse("[[augment]]\nkind = \"rotate_free\"\np = 0.0\n[[augment]]\nkind = \"stain\"\np = 0.0\n").unwrap();
    let args = AugmentArgs {
        image: src.clone(),
        out: dir.path().join("o.png"),
        mask: Some(mask.clone()),
        mask_out: Some(dir.path().join("om.png")),
    };
    augment(&args, &zero).unwrap();
    assert_eq!(std::fs::read(&args.out).unwrap(), std::fs::read(&src).unwrap());
    assert_eq!(std::fs::read(dir.path().join("om.png")).unwrap(), std::fs::read(&mask).unwrap());

    let cfg = PipelineConfig { seed: 4, ..Default::default() };
    let run = |name: &str| {
        let a = AugmentArgs { out: dir.path().join(name), ..args.clone() };
        augment(&a, &cfg).unwrap();
        std::fs::read(&a.out).unwrap()
    };
    assert_eq!(run("r1.png"), run("r2.png"));
}

#[test]
fn normalize_writes_reference_stained_image() {
    let dir = tempfile::tempdir().unwrap();
    let other = mitodet::StainMatrix::new([0.55, 0.78, 0.30], [0.15, 0.95, 0.25]).unwrap();
    let img = mitodet::synth::tissue_image(&other, 200, 200, &mut ChaCha8Rng::seed_from_u64(2));
    let src = dir.path().join("s.png");
    io::save_png(&src, &img).unwrap();
    let args = NormalizeArgs {
        image: src,
        out: dir.path().join("n.png"),
        target: None,
        save_matrix: Some(dir.path().join("m.json")),
    };
    normalize(&args, &PipelineConfig::default()).unwrap();
    let out = io::load_image(&args.out).unwrap();
    let est = mitodet::stain::estimate_stain_matrix(&out).unwrap();
    let reference = mitodet::StainMatrix::reference();
    assert!(mitodet::stain::angle_deg(&est.hematoxylin(), &reference.hematoxylin()) < 5.0);
    let saved = mitodet::StainMatrix::from_json(&std::fs::read_to_string(dir.path().join("m.json")).unwrap()).unwrap();
    assert!(mitodet::stain::angle_deg(&saved.hematoxylin(), &other.hematoxylin()) < 5.0);

    let blank = dir.path().join("blank.png");
    io::save_png(&blank, &ImageRgb::filled(50, 50, [255; 3])).unwrap();
    let err = normalize(&NormalizeArgs { image: blank, save_matrix: None, ..args }, &PipelineConfig::default()).unwrap_err();
    assert!(err.to_string().contains("insufficient tissue"));
}
