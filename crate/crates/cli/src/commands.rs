use std::fs;
use std::path::Path;

use semfield_core::checkpoint::Checkpoint;
use semfield_core::dataset::{read_json, save_gray_png, write_json};
use semfield_core::experiments::{self, ExperimentConfig};
use semfield_core::fusion::ProbabilityMap;
use semfield_core::labelops::{depth_metrics, psnr, reports_to_csv, segmentation_metrics, MetricsReport};
use semfield_core::meshing::{density_grid, marching_cubes, palette, semantic_texture, write_ply};
use semfield_core::train::{train as train_field, write_loss_csv, CheckpointHook, TrainingData};
use semfield_core::{Dataset, Error, Frame, Image, LabelMap, Result, Split, SupervisionMask};

use crate::config;
use crate::{FrameSet, MethodFilter};

/// Samples per texturing ray.
const TEXTURE_SAMPLES: usize = 16;

pub fn prepare_out(out: &Path, overwrite: bool) -> Result<()> {
    if out.exists() {
        let non_empty = fs::read_dir(out).map_err(|e| Error::Io { path: out.into(), source: e })?.next().is_some();
        if non_empty {
            if !overwrite {
                return Err(Error::Config(format!(
                    "output directory {} is not empty; pass --overwrite to replace it",
                    out.display()
                )));
            }
            fs::remove_dir_all(out).map_err(|e| Error::Io { path: out.into(), source: e })?;
        }
    }
    fs::create_dir_all(out).map_err(|e| Error::Io { path: out.into(), source: e })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io { path: path.into(), source: e })
}

fn save_config(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    write_text(&out.join("config.toml"), &config::to_toml(cfg)?)
}

fn load_split(data: &Path, num_frames: usize) -> Result<Split> {
    let path = data.join("split.json");
    if path.exists() {
        let s: Split = read_json(&path)?;
        if s.train.iter().chain(&s.test).any(|&f| f >= num_frames) {
            return Err(Error::Load { path, reason: format!("frame index beyond the {num_frames} frames") });
        }
        Ok(s)
    } else {
        Ok(Split { train: (0..num_frames).collect(), test: Vec::new() })
    }
}

fn report(out: &Path, rows: &[MetricsReport]) -> Result<()> {
    experiments::write_reports(out, rows)?;
    print!("{}", reports_to_csv(rows));
    Ok(())
}

pub fn gen(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let p = experiments::prepare(cfg)?;
    p.clean.save(out)?;
    write_json(&out.join("split.json"), &p.split)?;
    save_config(cfg, out)?;
    println!(
        "{} frames ({} train, {} test), {} classes -> {}",
        p.clean.frames.len(),
        p.split.train.len(),
        p.split.test.len(),
        p.clean.num_classes(),
        out.display()
    );
    Ok(())
}

pub fn degrade(cfg: &ExperimentConfig, data: &Path, out: &Path) -> Result<()> {
    let clean = Dataset::load(data)?;
    let split = load_split(data, clean.frames.len())?;
    let d = experiments::degrade(&clean, &split, &cfg.degradation, cfg.seed)?;
    d.dataset.save(out)?;
    write_json(&out.join("split.json"), &split)?;
    write_json(&out.join("mask.json"), &d.mask)?;
    if let Some(probs) = &d.cnn_probs {
        let dir = out.join("probs");
        fs::create_dir_all(&dir).map_err(|e| Error::Io { path: dir.clone(), source: e })?;
        for &f in &split.train {
            probs[f].save(&dir.join(format!("{f:05}.bin")))?;
        }
    }
    save_config(cfg, out)?;
    println!("{} of {} training frames labelled -> {}", d.mask.indices().len(), split.train.len(), out.display());
    Ok(())
}

pub fn train(cfg: &ExperimentConfig, data: &Path, out: &Path, every: Option<usize>) -> Result<()> {
    let ds = Dataset::load(data)?;
    let split = load_split(data, ds.frames.len())?;
    let mask_path = data.join("mask.json");
    let mask: SupervisionMask = if mask_path.exists() {
        read_json(&mask_path)?
    } else {
        SupervisionMask::from_indices(ds.frames.len(), &split.train)?
    };
    let tc = cfg.train_config();
    let training = TrainingData::new(&ds, split.train.clone(), mask);
    let mut save = |step: usize, params: &semfield_core::FieldParams<f32>| {
        Checkpoint { params: params.clone(), render: tc.render, step }.save(&out.join(format!("checkpoint_{step:06}.bin")))
    };
    let hook = every.map(|every| CheckpointHook { every, save: &mut save });
    let outcome = train_field(&training, cfg.field, &tc, hook)?;
    Checkpoint { params: outcome.params, render: tc.render, step: tc.iterations }.save(&out.join("checkpoint.bin"))?;
    write_loss_csv(&out.join("loss.csv"), &outcome.trace)?;
    save_config(cfg, out)?;
    if let Some(last) = outcome.trace.last() {
        println!(
            "iteration {}: photometric {:.5} semantic {:.5} total {:.5}",
            last.iteration, last.photometric, last.semantic, last.total
        );
    }
    Ok(())
}

pub fn render(checkpoint: &Path, data: &Path, set: FrameSet, out: &Path) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let ds = Dataset::load(data)?;
    if ck.params.config.num_classes != ds.num_classes() {
        return Err(Error::Config(format!(
            "checkpoint has {} classes but the dataset {}",
            ck.params.config.num_classes,
            ds.num_classes()
        )));
    }
    let split = load_split(data, ds.frames.len())?;
    let frames: Vec<usize> = match set {
        FrameSet::Train => split.train,
        FrameSet::Test => split.test,
        FrameSet::All => (0..ds.frames.len()).collect(),
    };
    if frames.is_empty() {
        return Err(Error::Config("no frames selected to render".into()));
    }
    let renders = experiments::render_frames(&ck.params, &ds, &frames, &ck.render)?;
    for sub in ["label_vis", "entropy", "probs"] {
        let d = out.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::Io { path: d, source: e })?;
    }
    let max_entropy = (ds.num_classes() as f64).ln().max(f64::MIN_POSITIVE);
    let mut rendered = Vec::with_capacity(frames.len());
    for (i, (r, &f)) in renders.iter().zip(&frames).enumerate() {
        let vis = Image {
            width: r.labels.width,
            height: r.labels.height,
            data: r.labels.data.iter().map(|&l| palette(l)).collect(),
        };
        semfield_core::dataset::save_rgb_png(&out.join(format!("label_vis/{i:05}.png")), &vis)?;
        let ent: LabelMap = Image {
            width: r.entropy.width,
            height: r.entropy.height,
            data: r.entropy.data.iter().map(|&e| (e / max_entropy * 255.0).clamp(0.0, 255.0).round() as u8).collect(),
        };
        save_gray_png(&out.join(format!("entropy/{i:05}.png")), &ent)?;
        ProbabilityMap::from_render(r).save(&out.join(format!("probs/{i:05}.bin")))?;
        rendered.push(Frame {
            rgb: r.rgb_u8(),
            labels: r.labels.clone(),
            instances: None,
            depth: Some(Image {
                width: r.depth.width,
                height: r.depth.height,
                data: r.depth.data.iter().map(|&d| d as f32).collect(),
            }),
            pose: ds.frames[f].pose,
        });
    }
    Dataset { camera: ds.camera, class_names: ds.class_names.clone(), frames: rendered }.save(out)?;
    write_json(&out.join("source_frames.json"), &frames)?;
    println!("rendered {} frames -> {}", frames.len(), out.display());
    Ok(())
}

/// Scores every frame of `pred` against the reference frame it was
/// rendered from (`source_frames.json`), or the same index when absent.
pub fn eval(rendered: &Path, reference: &Path, out: &Path) -> Result<()> {
    let pred = Dataset::load(rendered)?;
    let gt = Dataset::load(reference)?;
    let map_path = rendered.join("source_frames.json");
    let sources: Vec<usize> = if map_path.exists() { read_json(&map_path)? } else { (0..pred.frames.len()).collect() };
    if sources.len() != pred.frames.len() || sources.iter().any(|&f| f >= gt.frames.len()) {
        return Err(Error::Load { path: map_path, reason: "frame mapping does not fit the datasets".into() });
    }
    if pred.num_classes() != gt.num_classes() || (pred.camera.width, pred.camera.height) != (gt.camera.width, gt.camera.height) {
        return Err(Error::Config("rendered and reference datasets differ in classes or image size".into()));
    }
    let pl: Vec<LabelMap> = pred.frames.iter().map(|f| f.labels.clone()).collect();
    let gl: Vec<LabelMap> = sources.iter().map(|&f| gt.frames[f].labels.clone()).collect();
    let mut row = MetricsReport::new("eval", segmentation_metrics(&pl, &gl, gt.num_classes())?);
    let to_unit = |img: &semfield_core::RgbImage| -> Vec<f64> {
        img.data.iter().flat_map(|p| p.map(|v| v as f64 / 255.0)).collect()
    };
    let mut total = 0.0;
    for (p, &f) in pred.frames.iter().zip(&sources) {
        total += psnr(&to_unit(&p.rgb), &to_unit(&gt.frames[f].rgb))?;
    }
    row.psnr = Some(total / pred.frames.len().max(1) as f64);
    let has_depth = pred.frames.iter().all(|f| f.depth.is_some()) && sources.iter().all(|&f| gt.frames[f].depth.is_some());
    if has_depth {
        let pd: Vec<f64> = pred.frames.iter().flat_map(|f| f.depth.as_ref().unwrap().data.iter().map(|&v| v as f64)).collect();
        let gd: Vec<f64> =
            sources.iter().flat_map(|&f| gt.frames[f].depth.as_ref().unwrap().data.iter().map(|&v| v as f64)).collect();
        row.depth = Some(depth_metrics(&pd, &gd)?);
    }
    report(out, &[row])
}

pub fn fuse(data: &Path, reference: &Path, checkpoint: Option<&Path>, method: MethodFilter, out: &Path) -> Result<()> {
    let clean = Dataset::load(reference)?;
    let split = load_split(data, clean.frames.len())?;
    let c = clean.num_classes();
    let (w, h) = (clean.camera.width, clean.camera.height);
    let mut probs = Vec::with_capacity(clean.frames.len());
    for f in 0..clean.frames.len() {
        let path = data.join(format!("probs/{f:05}.bin"));
        if path.exists() {
            let p = ProbabilityMap::load(&path)?;
            if (p.width, p.height, p.num_classes) != (w, h, c) {
                return Err(Error::Load { path, reason: "probability map does not match the reference".into() });
            }
            probs.push(p);
        } else if split.train.contains(&f) {
            return Err(Error::Config(format!(
                "{} has no probability map for training frame {f}; degrade with kind = \"fusion_sim\"",
                data.display()
            )));
        } else {
            probs.push(ProbabilityMap { width: w, height: h, num_classes: c, data: vec![1.0 / c as f32; w as usize * h as usize * c] });
        }
    }
    let renders = match checkpoint {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            Some(experiments::render_frames(&ck.params, &clean, &split.train, &ck.render)?)
        }
        None => None,
    };
    let mut rows = experiments::fusion_reports(&clean, &split.train, &probs, renders.as_deref())?;
    let skip = match method {
        MethodFilter::Bayesian => Some("average_"),
        MethodFilter::Average => Some("bayesian_"),
        MethodFilter::All => None,
    };
    if let Some(prefix) = skip {
        rows.retain(|r| !r.name.starts_with(prefix));
    }
    report(out, &rows)
}

pub fn mesh(cfg: &ExperimentConfig, checkpoint: &Path, resolution: usize, iso: f64, out: &Path) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let grid = density_grid(&ck.params, cfg.scene.bounds, resolution)?;
    let mesh = marching_cubes(&grid, iso);
    let s = grid.spacing();
    let voxel = s.x.min(s.y).min(s.z);
    let textured = semantic_texture(&ck.params, &mesh, voxel, TEXTURE_SAMPLES)?;
    write_ply(&out.join("mesh.ply"), &textured)?;
    println!("{} vertices, {} triangles -> {}", mesh.vertices.len(), mesh.triangles.len(), out.join("mesh.ply").display());
    Ok(())
}

pub fn run_all(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let r = experiments::run(cfg)?;
    let tc = cfg.train_config();
    Checkpoint { params: r.trained.params, render: tc.render, step: tc.iterations }.save(&out.join("checkpoint.bin"))?;
    write_loss_csv(&out.join("loss.csv"), &r.trained.trace)?;
    save_config(cfg, out)?;
    report(out, &r.reports)
}
