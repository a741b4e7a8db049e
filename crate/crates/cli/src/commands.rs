use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use consac::data::{generate_homography_scene, generate_line_scene, load_scene, save_scene, scene_seed};
use consac::eval::{
    auc_recall, scene_f1, scene_me, scene_vp_errors, summarize, Summary, LINE_MATCH_THRESHOLD, VP_MATCH_THRESHOLD_DEG,
};
use consac::refine::RefineConfig;
use consac::sampler::SamplerConfig;
use consac::training::{train_from, TrainConfig, TrainOptions};
use consac::{ModelKind, Network, Scene};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{set, ExperimentConfig};
use crate::pipeline::{fit_scene, Method};
use crate::report::FitResult;
use crate::{svg, CliError, EvalArgs, FitArgs, Metric, SweepArgs, SynthArgs, TrainArgs};

type CmdResult = Result<(), CliError>;

fn data_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}

fn write_file(path: &Path, contents: &str) -> CmdResult {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| data_err(parent, e))?;
    }
    std::fs::write(path, contents).map_err(|e| data_err(path, e))
}

fn create_dir(path: &Path) -> CmdResult {
    std::fs::create_dir_all(path).map_err(|e| data_err(path, e))
}

/// `*.json` files of a directory in name order, or the path itself.
fn json_files(path: &Path) -> Result<Vec<PathBuf>, CliError> {
    if !path.is_dir() {
        if !path.exists() {
            return Err(data_err(path, "no such file or directory"));
        }
        return Ok(vec![path.to_path_buf()]);
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(path)
        .map_err(|e| data_err(path, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    files.sort();
    Ok(files)
}

fn file_name(path: &Path) -> String {
    path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

fn load_scenes(path: &Path) -> Result<Vec<(String, Scene)>, CliError> {
    let files = json_files(path)?;
    files
        .par_iter()
        .map(|f| match load_scene(f) {
            Ok(scene) => Ok((file_name(f), scene)),
            Err(e @ consac::ConsacError::Io { .. }) => Err(e.into()),
            Err(e) => Err(data_err(f, e)),
        })
        .collect()
}

fn parse_kind(flag: Option<&str>, cfg: &ExperimentConfig, default: ModelKind) -> Result<ModelKind, CliError> {
    match flag.or(cfg.kind.as_deref()) {
        Some(s) => s.parse().map_err(|e: consac::ConsacError| CliError::Usage(e.to_string())),
        None => Ok(default),
    }
}

fn required(flag: Option<&PathBuf>, file: Option<&PathBuf>, name: &str) -> Result<PathBuf, CliError> {
    flag.or(file)
        .cloned()
        .ok_or_else(|| CliError::Usage(format!("--{name} is required")))
}

fn load_network(path: &Path) -> Result<Network, CliError> {
    Ok(Network::load(path)?)
}

pub fn synth(args: &SynthArgs, out: &mut dyn Write) -> CmdResult {
    let cfg = ExperimentConfig::load(args.config.as_deref())?;
    let kind = parse_kind(args.kind.as_deref(), &cfg, ModelKind::Line)?;
    let dir = required(args.out.as_ref(), cfg.output.as_ref(), "out")?;
    let seed = args.seed.or(cfg.seed).unwrap_or(0);
    let lines = cfg.synth.lines.unwrap_or_default();
    let planes = cfg.synth.homography.unwrap_or_default();
    let generate = |i: usize| -> consac::Result<Scene> {
        let s = scene_seed(seed, i);
        match kind {
            ModelKind::Line => generate_line_scene(&lines, s),
            ModelKind::Homography => generate_homography_scene(&planes, s),
            ModelKind::VanishingPoint => unreachable!("rejected above"),
        }
    };
    if kind == ModelKind::VanishingPoint {
        return Err(CliError::Usage("no synthetic generator for vanishing points".into()));
    }
    let scenes = (0..args.count)
        .into_par_iter()
        .map(generate)
        .collect::<consac::Result<Vec<_>>>()?;
    create_dir(&dir)?;
    for (i, scene) in scenes.iter().enumerate() {
        save_scene(scene, &dir.join(format!("scene_{i:05}.json")))?;
    }
    let _ = writeln!(out, "wrote {} {} scenes to {}", scenes.len(), kind.name(), dir.display());
    Ok(())
}

pub fn train(args: &TrainArgs, out: &mut dyn Write) -> CmdResult {
    let cfg = ExperimentConfig::load(args.config.as_deref())?;
    let kind = parse_kind(args.kind.as_deref(), &cfg, ModelKind::Line)?;
    let data = required(args.data.as_ref(), cfg.input.as_ref(), "data")?;
    let weights_out = required(args.out.as_ref(), cfg.output.as_ref(), "out")?;
    let mut tc = cfg.apply_train(TrainConfig::for_kind(kind));
    set(&mut tc.loss, args.loss);
    set(&mut tc.epochs, args.epochs);
    set(&mut tc.learning_rate, args.lr);
    set(&mut tc.batch_size, args.batch_size);
    set(&mut tc.samples, args.samples);
    set(&mut tc.instances, args.instances);
    set(&mut tc.single_samples, args.single_samples);
    set(&mut tc.multi_samples, args.multi_samples);
    set(&mut tc.tau, args.tau);
    set(&mut tc.kappa, args.kappa);
    set(&mut tc.channels, args.channels);
    set(&mut tc.blocks, args.blocks);
    set(&mut tc.seed, args.seed);
    tc.validate().map_err(|e| CliError::Usage(e.to_string()))?;

    let scenes: Vec<Scene> = load_scenes(&data)?.into_iter().map(|(_, s)| s).collect();
    if scenes.is_empty() {
        return Err(data_err(&data, "no scene files"));
    }
    if let Some(bad) = scenes.iter().position(|s| s.kind != kind) {
        return Err(CliError::Data(format!(
            "scene {bad} in {} is not a {} scene",
            data.display(),
            kind.name()
        )));
    }
    let network = match &args.init {
        Some(p) => load_network(p)?,
        None => Network::new(tc.architecture(), tc.seed)?,
    };
    let options = TrainOptions {
        checkpoint_dir: args.checkpoints.clone(),
        groups: None,
    };
    let outcome = train_from(network, &scenes, &tc, &options)?;
    outcome.network.save(&weights_out)?;
    if let Some(log) = &args.log {
        write_file(log, &outcome.log_jsonl())?;
    }
    for (e, m) in outcome.epoch_means().iter().enumerate() {
        let _ = writeln!(out, "epoch {e} mean loss {m:.6}");
    }
    let _ = writeln!(out, "wrote {}", weights_out.display());
    Ok(())
}

pub fn fit(args: &FitArgs, out: &mut dyn Write) -> CmdResult {
    let cfg = ExperimentConfig::load(args.config.as_deref())?;
    let scene_path = required(args.scene.as_ref(), cfg.input.as_ref(), "scene")?;
    let out_path = required(args.out.as_ref(), cfg.output.as_ref(), "out")?;
    let weights_path = args.weights.as_ref().or(cfg.weights.as_ref());
    if args.method.needs_network() && weights_path.is_none() {
        return Err(CliError::Usage(format!("--method {} needs --weights", args.method.name())));
    }
    let network = weights_path.map(|p| load_network(p)).transpose()?;
    let is_dir = scene_path.is_dir();
    let scenes = load_scenes(&scene_path)?;
    let seed = args.seed.or(cfg.seed).unwrap_or(0);
    let configs = |kind: ModelKind| -> Result<(SamplerConfig, RefineConfig), CliError> {
        let mut s = cfg.apply_sampler(SamplerConfig::for_kind(kind));
        set(&mut s.instances, args.sampler.instances);
        set(&mut s.single_samples, args.sampler.single_samples);
        set(&mut s.multi_samples, args.sampler.multi_samples);
        set(&mut s.tau, args.sampler.tau);
        s.seed = seed;
        s.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        let mut r = cfg.apply_refine(RefineConfig::for_kind(kind));
        set(&mut r.em_iterations, args.refine.em_iterations);
        set(&mut r.refit_iterations, args.refine.refit_iterations);
        set(&mut r.theta, args.refine.theta);
        set(&mut r.min_increment, args.refine.min_increment);
        r.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok((s, r))
    };
    let hash = network.as_ref().map(Network::hash);
    let fitted = scenes
        .par_iter()
        .map(|(name, scene)| {
            let (s, r) = configs(scene.kind)?;
            let fit = fit_scene(scene, args.method, network.as_ref(), &s, &r).map_err(|e| CliError::Data(format!("{name}: {e}")))?;
            let result = FitResult::new(name.clone(), scene.kind, args.method, s, r, hash.clone(), &fit);
            let figure = args
                .svg
                .as_ref()
                .map(|_| svg::render(&scene.observations, scene.kind, &fit.models, &fit.assignments, fit.steps()));
            Ok((result, figure))
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    if is_dir {
        create_dir(&out_path)?;
    }
    for (result, figure) in &fitted {
        let target = if is_dir { out_path.join(&result.scene) } else { out_path.clone() };
        write_file(&target, &result.to_json())?;
        if let (Some(svg_path), Some(figure)) = (&args.svg, figure) {
            let target = if is_dir {
                svg_path.join(Path::new(&result.scene).with_extension("svg"))
            } else {
                svg_path.clone()
            };
            write_file(&target, figure)?;
        }
        let _ = writeln!(
            out,
            "{}: {} instances, score {:.4}",
            result.scene,
            result.cutoff,
            result.score
        );
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct SceneValue {
    scene: String,
    value: f64,
}

#[derive(Debug, Serialize)]
struct RunReport {
    pred: String,
    value: f64,
    per_scene: Summary,
    scenes: Vec<SceneValue>,
}

#[derive(Debug, Serialize)]
struct EvalReport {
    metric: &'static str,
    threshold: Option<f64>,
    runs: Vec<RunReport>,
    summary: Summary,
}

fn metric_name(m: Metric) -> &'static str {
    match m {
        Metric::F1 => "f1",
        Metric::Me => "me",
        Metric::Auc => "auc",
    }
}

fn f1_threshold(kind: ModelKind, flag: Option<f64>) -> Result<f64, CliError> {
    match (flag, kind) {
        (Some(t), _) => Ok(t),
        (None, ModelKind::Line) => Ok(LINE_MATCH_THRESHOLD),
        (None, ModelKind::VanishingPoint) => Ok(VP_MATCH_THRESHOLD_DEG),
        (None, ModelKind::Homography) => Err(CliError::Usage("homography F1 needs --threshold".into())),
    }
}

pub fn eval(args: &EvalArgs, out: &mut dyn Write) -> CmdResult {
    let gt: BTreeMap<String, Scene> = load_scenes(&args.gt)?.into_iter().collect();
    let mut runs = Vec::with_capacity(args.pred.len());
    let mut threshold = None;
    for pred in &args.pred {
        let files = json_files(pred)?;
        if files.is_empty() {
            return Err(data_err(pred, "no result files"));
        }
        let results = files.iter().map(|f| FitResult::load(f)).collect::<Result<Vec<_>, _>>()?;
        let mut values = Vec::with_capacity(results.len());
        let mut vp_errors = Vec::new();
        for r in &results {
            let scene = gt
                .get(&r.scene)
                .ok_or_else(|| CliError::Data(format!("no ground truth for {} in {}", r.scene, args.gt.display())))?;
            if scene.kind != r.kind {
                return Err(CliError::Data(format!("{}: result and scene kinds differ", r.scene)));
            }
            let models = r.models()?;
            let value = match args.metric {
                Metric::F1 => {
                    let t = f1_threshold(r.kind, args.threshold)?;
                    threshold = Some(t);
                    scene_f1(scene, &models, t)?
                }
                Metric::Me => scene_me(scene, &models, args.theta.unwrap_or(r.refine.theta))?,
                Metric::Auc => {
                    let errors = scene_vp_errors(scene, &models)?;
                    let cutoff = args.threshold.unwrap_or(10.0);
                    threshold = Some(cutoff);
                    let v = 100.0 * auc_recall(&errors, cutoff);
                    vp_errors.extend(errors);
                    v
                }
            };
            values.push(SceneValue {
                scene: r.scene.clone(),
                value,
            });
        }
        let per_scene = summarize(&values.iter().map(|v| v.value).collect::<Vec<_>>());
        let value = match args.metric {
            Metric::Auc => 100.0 * auc_recall(&vp_errors, threshold.unwrap_or(10.0)),
            _ => per_scene.mean,
        };
        runs.push(RunReport {
            pred: pred.display().to_string(),
            value,
            per_scene,
            scenes: values,
        });
    }
    let summary = summarize(&runs.iter().map(|r| r.value).collect::<Vec<_>>());
    let name = metric_name(args.metric);
    let _ = writeln!(out, "{:<8} {:<6} {:>8} {:>12} {:>12}", "metric", "run", "scenes", "mean", "std");
    for (i, r) in runs.iter().enumerate() {
        let _ = writeln!(
            out,
            "{:<8} {:<6} {:>8} {:>12.6} {:>12.6}",
            name, i, r.per_scene.count, r.value, r.per_scene.std
        );
    }
    let _ = writeln!(
        out,
        "{:<8} {:<6} {:>8} {:>12.6} {:>12.6}",
        name, "all", summary.count, summary.mean, summary.std
    );
    if let Some(path) = &args.out {
        let report = EvalReport {
            metric: name,
            threshold,
            runs,
            summary,
        };
        write_file(path, &(serde_json::to_string_pretty(&report).expect("report serializes") + "\n"))?;
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct GridCell {
    method: Method,
    s: usize,
    p: usize,
    mean_f1: f64,
    std_f1: f64,
    scenes: usize,
}

pub fn sweep(args: &SweepArgs, out: &mut dyn Write) -> CmdResult {
    let cfg = ExperimentConfig::load(args.config.as_deref())?;
    let weights_path = args.weights.as_ref().or(cfg.weights.as_ref());
    let methods = if args.methods.is_empty() {
        if weights_path.is_some() {
            vec![Method::Consac, Method::SeqRansac]
        } else {
            vec![Method::SeqRansac]
        }
    } else {
        args.methods.clone()
    };
    if methods.iter().any(|m| m.needs_network()) && weights_path.is_none() {
        return Err(CliError::Usage("learned methods need --weights".into()));
    }
    if args.s_values.contains(&0) || args.p_values.contains(&0) {
        return Err(CliError::Usage("S and P values must be positive".into()));
    }
    let network = weights_path.map(|p| load_network(p)).transpose()?;
    let scenes = load_scenes(&args.scenes)?;
    if scenes.is_empty() {
        return Err(data_err(&args.scenes, "no scene files"));
    }
    let seed = args.seed.or(cfg.seed).unwrap_or(0);
    let mut cells = Vec::new();
    for &method in &methods {
        for &p in &args.p_values {
            for &s in &args.s_values {
                let values = scenes
                    .par_iter()
                    .map(|(name, scene)| {
                        let mut sc = cfg.apply_sampler(SamplerConfig::for_kind(scene.kind));
                        set(&mut sc.instances, args.instances);
                        sc.single_samples = s;
                        sc.multi_samples = p;
                        sc.seed = seed;
                        let rc = cfg.apply_refine(RefineConfig::for_kind(scene.kind));
                        let fit = fit_scene(scene, method, network.as_ref(), &sc, &rc)
                            .map_err(|e| CliError::Data(format!("{name}: {e}")))?;
                        Ok(scene_f1(scene, &fit.models, f1_threshold(scene.kind, args.threshold)?)?)
                    })
                    .collect::<Result<Vec<f64>, CliError>>()?;
                let summary = summarize(&values);
                let _ = writeln!(
                    out,
                    "{:<22} S={:<4} P={:<4} F1 {:.4} ± {:.4}",
                    method.name(),
                    s,
                    p,
                    summary.mean,
                    summary.std
                );
                cells.push(GridCell {
                    method,
                    s,
                    p,
                    mean_f1: summary.mean,
                    std_f1: summary.std,
                    scenes: summary.count,
                });
            }
        }
    }
    if let Some(path) = &args.out {
        let text: String = cells
            .iter()
            .map(|c| serde_json::to_string(c).expect("cell serializes") + "\n")
            .collect();
        write_file(path, &text)?;
    }
    Ok(())
}
