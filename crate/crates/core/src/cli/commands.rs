use std::collections::HashMap;
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde_json::{json, Value};

use super::report::{head_fingerprint, EvalReport};
use super::selfcheck::{run_selfcheck, Fault};
use super::{
    usage, CliError, EvalEquivArgs, EvalPoseArgs, EvalSemcorrArgs, EvalTrackArgs, GenSynthArgs, GlobalOpts, HeadArg,
    SelfcheckArgs, TrainArgs,
};
use crate::convhead::{head_forward, train, HeadParams, LossKind, TrainConfig};
use crate::error::Error;
use crate::eval::{apply_head, evaluate_equivariance, EquivConfig, Search};
use crate::featstore::{load_feature_map, FeatureMap};
use crate::geometry::{write_atomic, ObjectViews, OcclusionTolerance, Pixel, ViewRecord};
use crate::manifest::{DatasetManifest, LoadOptions};
use crate::matching::CandidateGrid;
use crate::metrics::{pose_accuracy_from_errors, Track};
use crate::pose::{build_database, evaluate_pose_task, PoseTaskConfig, RansacConfig};
use crate::semcorr::{evaluate_semcorr, load_pairs};
use crate::synth::{generate, semcorr_fixture, tracking_fixture, write_dataset, write_semcorr_fixture, write_tracking_fixture, SceneKind, SynthConfig};
use crate::tracking::{apply_occ_threshold, calibrate_occ_threshold, evaluate_tracking, track, TrackConfig, TrackQuery};

type CmdResult = Result<(), CliError>;

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, Error> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    serde_json::from_str(&text).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })
}

/// The head named on the command line. `zero-init-residual` is the identity
/// head at initialization.
fn resolve_head(arg: &HeadArg, channels: usize) -> Result<Option<HeadParams>, CliError> {
    match arg.head.as_deref() {
        None => Ok(None),
        Some("zero-init-residual") => Ok(Some(HeadParams::zero_init(channels, 1)?)),
        Some(path) => {
            let h = HeadParams::load(path)?;
            if let Some(c) = h.in_channels() {
                if c != channels {
                    return Err(Error::config(format!("head expects {c} channels, features have {channels}")).into());
                }
            }
            Ok(Some(h))
        }
    }
}

fn first_channels(objects: &[ObjectViews]) -> usize {
    objects
        .iter()
        .flat_map(|o| &o.views)
        .find_map(|v| v.features.as_ref().map(|f| f.channels))
        .unwrap_or(0)
}

fn truncate_views(objects: &mut [ObjectViews], max_views: Option<usize>) {
    if let Some(n) = max_views {
        for o in objects.iter_mut() {
            o.views.truncate(n);
        }
    }
}

pub(super) fn gen_synth(a: &GenSynthArgs, g: &GlobalOpts) -> CmdResult {
    let scenes = a
        .scene
        .split(',')
        .map(|s| s.trim().parse::<SceneKind>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| usage(e.to_string()))?;
    let cfg = SynthConfig {
        scenes,
        n_views: a.views,
        width: a.width,
        height: a.height,
        hfov_deg: a.hfov,
        features: !a.no_features,
        patch: a.patch,
        n_freqs: a.freqs,
        freq_scale: a.freq_scale,
        noise: a.noise,
        seed: g.seed,
        ..SynthConfig::default()
    };
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    if a.semcorr_pairs > 0 && a.no_features {
        return Err(usage("--semcorr-pairs needs features"));
    }
    let objects = generate(&cfg)?;
    let manifest = write_dataset(&objects, &a.out)?;
    info!("wrote {}", manifest.display());
    if a.track_frames > 0 {
        let fx = tracking_fixture(&cfg, a.track_frames, a.track_step, a.track_queries)?;
        write_tracking_fixture(&fx, &a.out.join("track"))?;
    }
    if a.semcorr_pairs > 0 {
        let (pairs, feats) = semcorr_fixture(&objects[0], a.semcorr_pairs, a.semcorr_kpts, g.seed)?;
        write_semcorr_fixture(&pairs, &feats, &a.out.join("semcorr"))?;
    }
    let config = json!({
        "scenes": cfg.scenes.iter().map(|s| s.name()).collect::<Vec<_>>(),
        "views": cfg.n_views, "width": cfg.width, "height": cfg.height, "hfov": cfg.hfov_deg,
        "features": cfg.features, "patch": cfg.patch, "freqs": cfg.n_freqs, "freq_scale": cfg.freq_scale,
        "noise": cfg.noise, "seed": cfg.seed, "track_frames": a.track_frames, "track_step": a.track_step,
        "track_queries": a.track_queries, "semcorr_pairs": a.semcorr_pairs, "semcorr_kpts": a.semcorr_kpts,
    });
    let mut r = EvalReport::new("gen-synth", &config);
    r.details = Some(json!({
        "objects": objects.len(),
        "views": objects.iter().map(|o| o.views.len()).sum::<usize>(),
        "valid_depth_pixels": objects.iter().flat_map(|o| &o.views)
            .map(|v| v.depth.as_ref().map_or(0, |d| d.valid_count())).sum::<usize>(),
    }));
    r.emit(g.report.as_deref())?;
    Ok(())
}

pub(super) fn eval_equivariance(a: &EvalEquivArgs, g: &GlobalOpts) -> CmdResult {
    if a.gt_stride == 0 || a.candidate_stride == 0 {
        return Err(usage("strides must be at least 1"));
    }
    let m = DatasetManifest::load(&a.manifest)?;
    let mut objects = m.objects(LoadOptions::ALL)?;
    truncate_views(&mut objects, a.max_views);
    let head = resolve_head(&a.head, first_channels(&objects))?;
    if let Some(h) = &head {
        apply_head(&mut objects, h)?;
    }
    let cfg = EquivConfig {
        gt_stride: a.gt_stride,
        candidate_stride: a.candidate_stride,
        foreground_only: !a.full_frame,
        occ: OcclusionTolerance::default(),
        search: if a.exhaustive {
            Search::Exhaustive
        } else {
            Search::CoarseToFine { radius: 1 }
        },
    };
    let rep = evaluate_equivariance(&objects, &cfg)?;
    let other = evaluate_equivariance(
        &objects,
        &EquivConfig {
            foreground_only: a.full_frame,
            ..cfg.clone()
        },
    )?;
    let (fg, full) = if a.full_frame { (&other, &rep) } else { (&rep, &other) };
    // The search strategy is exact either way, so it is not part of the hash.
    let config = json!({
        "gt_stride": a.gt_stride, "candidate_stride": a.candidate_stride,
        "full_frame": a.full_frame, "max_views": a.max_views,
        "head": head_fingerprint(head.as_ref()), "seed": g.seed,
    });
    let mut r = EvalReport::new("eval-equivariance", &config);
    r.ape = Some(rep.ape_percent);
    r.pcdp = Some(rep.pcdp.clone());
    r.pair_count = Some(rep.pair_count);
    r.details = Some(json!({
        "foreground": { "ape": fg.ape_percent, "pcdp": fg.pcdp },
        "full_frame": { "ape": full.ape_percent, "pcdp": full.pcdp },
    }));
    r.emit(g.report.as_deref())?;
    Ok(())
}

pub(super) fn train_head(a: &TrainArgs, g: &GlobalOpts) -> CmdResult {
    let loss: LossKind = a.loss.parse().map_err(|e: Error| usage(e.to_string()))?;
    let cfg = TrainConfig {
        iterations: a.iterations,
        pixels_per_pair: a.pixels_per_pair,
        seed: g.seed,
        loss,
        tau: a.tau,
        temp: a.temp,
        lr: a.lr,
        weight_decay: a.weight_decay,
        gt_stride: a.gt_stride,
        occ: OcclusionTolerance::default(),
        positive_radius: a.positive_radius,
        negative_exclusion_px: a.negative_exclusion,
        include_self_term: a.include_self_term,
        ..TrainConfig::default()
    };
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    let m = DatasetManifest::load(&a.manifest)?;
    let mut objects = m.objects(LoadOptions::ALL)?;
    truncate_views(&mut objects, a.max_views);
    let channels = first_channels(&objects);
    let init = match &a.init {
        Some(p) => HeadParams::load(p)?,
        None => HeadParams::zero_init(channels, a.layers).map_err(|e| usage(e.to_string()))?,
    };
    let init_print = head_fingerprint(Some(&init));
    let out = train(&objects, &cfg, init)?;
    out.params.save(&a.out)?;
    let csv_path = a.loss_csv.clone().unwrap_or_else(|| {
        let mut p = a.out.clone().into_os_string();
        p.push(".loss.csv");
        PathBuf::from(p)
    });
    write_atomic(&csv_path, out.loss_csv().as_bytes())?;
    let config = json!({
        "iterations": a.iterations, "pixels_per_pair": a.pixels_per_pair, "loss": a.loss,
        "tau": a.tau, "temp": a.temp, "lr": a.lr, "weight_decay": a.weight_decay,
        "gt_stride": a.gt_stride, "positive_radius": a.positive_radius,
        "negative_exclusion": a.negative_exclusion, "include_self_term": a.include_self_term,
        "layers": a.layers, "max_views": a.max_views, "init": init_print, "seed": g.seed,
    });
    let mut r = EvalReport::new("train-head", &config);
    r.details = Some(json!({
        "first_loss": out.losses.first(),
        "final_loss": out.losses.last(),
        "checkpoint": head_fingerprint(Some(&out.params)),
    }));
    r.emit(g.report.as_deref())?;
    Ok(())
}

fn split_ids(s: &Option<String>) -> Option<Vec<String>> {
    s.as_ref().map(|s| s.split(',').map(|t| t.trim().to_string()).filter(|t| !t.is_empty()).collect())
}

fn pick_views(views: &[ViewRecord], ids: &Option<Vec<String>>, parity: usize) -> Vec<ViewRecord> {
    match ids {
        Some(ids) => views.iter().filter(|v| ids.contains(&v.id)).cloned().collect(),
        None => views.iter().enumerate().filter(|(i, _)| i % 2 == parity).map(|(_, v)| v.clone()).collect(),
    }
}

pub(super) fn eval_pose(a: &EvalPoseArgs, g: &GlobalOpts) -> CmdResult {
    if a.stride == 0 || a.ransac_iters == 0 || !(a.threshold > 0.0) {
        return Err(usage("stride, RANSAC iterations and threshold must be positive"));
    }
    let m = DatasetManifest::load(&a.manifest)?;
    let units = m.manifest.units()?;
    let mut objects = m.objects(LoadOptions::ALL)?;
    let head = resolve_head(&a.head, first_channels(&objects))?;
    if let Some(h) = &head {
        apply_head(&mut objects, h)?;
    }
    let cfg = PoseTaskConfig {
        stride: a.stride,
        score_floor: a.score_floor,
        ransac: RansacConfig {
            iterations: a.ransac_iters,
            inlier_threshold: a.threshold,
            seed: g.seed,
            refine: !a.no_refine,
            ..RansacConfig::default()
        },
        working_resolution: m.manifest.working_resolution,
    };
    let ref_ids = split_ids(&a.ref_views);
    let query_ids = split_ids(&a.query_views);
    let mut errors = Vec::new();
    let mut frames = Vec::new();
    for o in &objects {
        let refs = pick_views(&o.views, &ref_ids, 0);
        let queries = pick_views(&o.views, &query_ids, 1);
        if refs.is_empty() || queries.is_empty() {
            warn!("object {}: no reference or query views; skipped", o.id);
            continue;
        }
        let db = build_database(&refs, a.stride)?;
        let (_, per) = evaluate_pose_task(&queries, &db, &cfg, units)?;
        for f in per {
            errors.push(f.errors);
            frames.push(json!({
                "object": o.id,
                "view": f.view,
                "inliers": f.estimate.as_ref().map(|e| e.inlier_count),
                "cm": f.errors.map(|e| e.0),
                "deg": f.errors.map(|e| e.1),
            }));
        }
    }
    let rep = pose_accuracy_from_errors(&errors);
    let config = json!({
        "ref_views": ref_ids, "query_views": query_ids, "ransac_iters": a.ransac_iters,
        "threshold": a.threshold, "stride": a.stride, "score_floor": a.score_floor,
        "refine": !a.no_refine, "working_resolution": m.manifest.working_resolution,
        "head": head_fingerprint(head.as_ref()), "seed": g.seed,
    });
    let mut r = EvalReport::new("eval-pose", &config);
    r.pose_acc = Some(rep.acc);
    r.details = Some(json!({ "n_frames": rep.n_frames, "frames": frames }));
    r.emit(g.report.as_deref())?;
    Ok(())
}

fn load_frames(dir: &Path) -> Result<Vec<FeatureMap>, Error> {
    let rd = std::fs::read_dir(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    let mut paths: Vec<PathBuf> = rd
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "ftb"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::config(format!("no .ftb frames in {}", dir.display())));
    }
    paths.iter().map(load_feature_map).collect()
}

fn parse_gt_tracks(raw: Vec<Vec<[f64; 3]>>) -> Vec<Track> {
    raw.into_iter()
        .map(|t| Track {
            positions: t.iter().map(|p| Pixel::new(p[0], p[1])).collect(),
            visible: t.iter().map(|p| p[2] != 0.0).collect(),
        })
        .collect()
}

pub(super) fn eval_track(a: &EvalTrackArgs, g: &GlobalOpts) -> CmdResult {
    if a.refine_radius == 0 || !(a.temperature > 0.0) {
        return Err(usage("refine radius and temperature must be positive"));
    }
    let mut frames = load_frames(&a.frames)?;
    let queries: Vec<TrackQuery> = read_json(&a.queries)?;
    let gt = parse_gt_tracks(read_json(&a.gt)?);
    if gt.len() != queries.len() {
        return Err(Error::config(format!("{} queries but {} ground-truth tracks", queries.len(), gt.len())).into());
    }
    let head = resolve_head(&a.head, frames[0].channels)?;
    if let Some(h) = head.as_ref().filter(|h| !h.is_identity()) {
        for f in frames.iter_mut() {
            *f = head_forward(f, h)?;
        }
    }
    let cfg = TrackConfig {
        refine_radius: a.refine_radius,
        temperature: a.temperature,
        occ_threshold: a.occ_threshold,
        search_window: a.search_window,
    };
    let mut pred = track(&frames, &queries, &cfg)?;
    let mut threshold = a.occ_threshold;
    if a.calibrate {
        let candidates: Vec<f64> = (0..=100).map(|i| -1.0 + 0.02 * i as f64).collect();
        threshold = calibrate_occ_threshold(&pred, &gt, &candidates)?.0;
        apply_occ_threshold(&mut pred, threshold);
    }
    let rep = evaluate_tracking(&pred, &gt, frames[0].img_w, frames[0].img_h)?;
    let config = json!({
        "refine_radius": a.refine_radius, "temperature": a.temperature,
        "occ_threshold": a.occ_threshold, "search_window": a.search_window,
        "calibrate": a.calibrate, "head": head_fingerprint(head.as_ref()), "seed": g.seed,
    });
    let mut r = EvalReport::new("eval-track", &config);
    r.tracking = Some(rep);
    r.details = Some(json!({ "occ_threshold_used": threshold, "points": queries.len(), "frames": frames.len() }));
    r.emit(g.report.as_deref())?;
    Ok(())
}

pub(super) fn eval_semcorr(a: &EvalSemcorrArgs, g: &GlobalOpts) -> CmdResult {
    if a.candidate_stride == 0 {
        return Err(usage("candidate stride must be at least 1"));
    }
    let pairs = load_pairs(&a.pairs)?;
    let mut ids: Vec<&String> = pairs.iter().flat_map(|p| [&p.src, &p.dst]).collect();
    ids.sort();
    ids.dedup();
    let mut feats: HashMap<String, FeatureMap> = HashMap::new();
    for id in ids {
        let path = a.features.join(format!("{id}.ftb"));
        match load_feature_map(&path) {
            Ok(f) => {
                feats.insert(id.clone(), f);
            }
            Err(e @ Error::Io { .. }) => warn!("{e}; pairs using {id} are excluded"),
            Err(e) => return Err(e.into()),
        }
    }
    let channels = feats.values().next().map_or(0, |f| f.channels);
    let head = resolve_head(&a.head, channels)?;
    if let Some(h) = head.as_ref().filter(|h| !h.is_identity()) {
        for f in feats.values_mut() {
            *f = head_forward(f, h)?;
        }
    }
    let rep = evaluate_semcorr(&pairs, &feats, &CandidateGrid::full(a.candidate_stride))?;
    let config = json!({
        "candidate_stride": a.candidate_stride, "head": head_fingerprint(head.as_ref()), "seed": g.seed,
    });
    let mut r = EvalReport::new("eval-semcorr", &config);
    r.pck = Some(rep.pck.clone());
    r.pair_count = Some(rep.pairs);
    r.details = Some(json!({
        "pck_image": rep.pck_image, "pck_macro": rep.pck_macro, "pck_image_macro": rep.pck_image_macro,
        "keypoints": rep.keypoints, "skipped_keypoints": rep.skipped_keypoints,
        "excluded_pairs": rep.excluded_pairs,
    }));
    r.emit(g.report.as_deref())?;
    Ok(())
}

pub(super) fn selfcheck(a: &SelfcheckArgs, g: &GlobalOpts) -> CmdResult {
    let fault = match a.inject_fault.as_deref() {
        None => None,
        Some(s) => Some(s.parse::<Fault>().map_err(usage)?),
    };
    let results = run_selfcheck(g.seed, fault);
    let width = results.iter().map(|r| r.name.len()).max().unwrap_or(0);
    for r in &results {
        eprintln!(
            "{:<width$}  {}  {:>7.3}s  {}",
            r.name,
            if r.passed { "PASS" } else { "FAIL" },
            r.seconds,
            r.detail
        );
    }
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    let mut r = EvalReport::new("selfcheck", &json!({ "seed": g.seed, "fault": a.inject_fault }));
    r.details = Some(Value::Array(
        results
            .iter()
            .map(|c| json!({ "check": c.name, "passed": c.passed, "detail": c.detail }))
            .collect(),
    ));
    r.emit(g.report.as_deref())?;
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Check(format!("failed checks: {}", failed.join(", "))))
    }
}
