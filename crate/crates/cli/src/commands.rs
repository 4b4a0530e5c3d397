use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context, Result};
use cwssnet::checkpoint::{load_checkpoint, save_checkpoint};
use cwssnet::data::{
    default_palette, nearest_prototype_accuracy, read_cube, synth_scene, write_cube, write_labels, write_ppm, HsiCube,
    LabelMap,
};
use cwssnet::metrics::{ConfusionMatrix, Metrics};
use cwssnet::network::Model;
use cwssnet::pipeline;
use cwssnet::train::{evaluate_patches, trace_csv, EpochRecord};
use serde_json::json;

use crate::config::RunConfig;
use crate::{Console, Failure};

/// Writes `body` preceded by a `# config: ...` comment line.
pub(crate) fn write_csv(path: &Path, echo: &serde_json::Value, body: &str) -> Result<()> {
    let text = format!("# config: {echo}\n{body}");
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub(crate) fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn create_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

/// The configured cube, or the synthetic scene for the run seed.
pub fn load_scene(cfg: &RunConfig) -> Result<HsiCube> {
    match &cfg.cube {
        Some(path) => read_cube(path)
            .with_context(|| format!("reading cube {}", path.display()))
            .context(Failure::Data),
        None => Ok(synth_scene(cfg.seed, &cfg.synth).context(Failure::Config)?.cube),
    }
}

#[derive(Clone, Debug)]
pub struct SynthReport {
    pub cube: PathBuf,
    /// Share of pixels whose nearest noise-free prototype is their own class.
    pub separability: f64,
}

pub fn cmd_synth(cfg: &RunConfig, console: &Console) -> Result<SynthReport> {
    let scene = synth_scene(cfg.seed, &cfg.synth).context(Failure::Config)?;
    let separability = nearest_prototype_accuracy(&scene.cube, &scene.prototypes);
    create_out(&cfg.out)?;
    let echo = cfg.echo();
    let cube = cfg.out.join("scene.cube");
    write_cube(&cube, &scene.cube, Some(&echo))?;
    if let Some(labels) = &scene.cube.labels {
        let palette = default_palette(scene.cube.classes);
        let f = fs::File::create(cfg.out.join("ground_truth.ppm"))?;
        write_ppm(BufWriter::new(f), labels, &palette)?;
    }
    write_json(
        &cfg.out.join("synth.json"),
        &json!({ "config": echo, "separability": separability }),
    )?;
    console.line(format!(
        "wrote {} ({}x{}x{}, {} classes); nearest-prototype separability {:.4}",
        cube.display(),
        scene.cube.rows(),
        scene.cube.cols(),
        scene.cube.bands(),
        scene.cube.classes,
        separability
    ));
    Ok(SynthReport { cube, separability })
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub checkpoint: PathBuf,
    pub trace: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_miou: f64,
    pub val_metrics: Metrics,
}

pub fn cmd_train(cfg: &RunConfig, console: &Console) -> Result<TrainReport> {
    let cube = load_scene(cfg)?;
    let exp = cfg.experiment();
    let epochs = exp.train.epochs;
    let (prep, outcome) = pipeline::run(&cube, &exp, |r| {
        console.line(format!(
            "epoch {:>3}/{epochs}  loss {:.5}  val mIoU {:.4}",
            r.epoch, r.loss, r.val_miou
        ))
    })
    .context("training")?;
    create_out(&cfg.out)?;
    let echo = cfg.echo();
    let checkpoint = cfg.out.join("checkpoint");
    save_checkpoint(
        &checkpoint,
        &outcome.best,
        Some(&prep.pca),
        echo.clone(),
        outcome.best_epoch,
        outcome.best_miou,
    )?;
    write_csv(&cfg.out.join("trace.csv"), &echo, &trace_csv(&outcome.trace))?;
    let val_metrics = evaluate_patches(&outcome.best, &prep.patches, &prep.val, exp.train.batch_size)?.compute();
    write_csv(&cfg.out.join("val_metrics.csv"), &echo, &val_metrics.to_csv())?;
    write_json(
        &cfg.out.join("train.json"),
        &json!({
            "config": echo,
            "best_epoch": outcome.best_epoch,
            "best_val_miou": outcome.best_miou,
            "train_patches": prep.train,
            "val_patches": prep.val,
            "val_metrics": val_metrics,
        }),
    )?;
    console.line(format!(
        "best val mIoU {:.4} at epoch {}; checkpoint in {}",
        outcome.best_miou,
        outcome.best_epoch,
        checkpoint.display()
    ));
    Ok(TrainReport {
        checkpoint,
        trace: outcome.trace,
        best_epoch: outcome.best_epoch,
        best_miou: outcome.best_miou,
        val_metrics,
    })
}

struct Loaded {
    model: Model,
    pca: cwssnet::data::PcaModel,
    trained: RunConfig,
    cube: HsiCube,
}

/// Loads the checkpoint and the scene to run it on. Without an explicit cube
/// the synthetic scene the checkpoint was trained on is regenerated.
fn load_for_inference(cfg: &RunConfig) -> Result<Loaded> {
    let dir = cfg
        .checkpoint
        .as_ref()
        .ok_or_else(|| anyhow!("no checkpoint given (use --checkpoint DIR)"))
        .context(Failure::Config)?;
    let (model, pca, manifest) = load_checkpoint(dir)
        .with_context(|| format!("loading checkpoint {}", dir.display()))
        .context(Failure::Data)?;
    let pca = pca
        .ok_or_else(|| anyhow!("checkpoint {} has no PCA model", dir.display()))
        .context(Failure::Data)?;
    let trained: RunConfig = serde_json::from_value(manifest.config)
        .context("checkpoint configuration echo")
        .context(Failure::Data)?;
    let cube = match &cfg.cube {
        Some(_) => load_scene(cfg)?,
        None => load_scene(&trained)?,
    };
    if cube.bands() != pca.in_bands() {
        return Err(anyhow!(
            "cube has {} bands, checkpoint expects {}",
            cube.bands(),
            pca.in_bands()
        ))
        .context(Failure::Data);
    }
    Ok(Loaded {
        model,
        pca,
        trained,
        cube,
    })
}

fn predict(l: &Loaded) -> Result<LabelMap> {
    let reduced = l.pca.apply(&l.cube.data).context("pca")?;
    let d = &l.trained.data;
    let map = l
        .model
        .predict_scene(&reduced, d.patch_size, d.stride, l.trained.train.batch_size)
        .context("prediction")?;
    Ok(map)
}

fn inference_echo(cfg: &RunConfig, l: &Loaded) -> serde_json::Value {
    json!({ "run": cfg.echo(), "trained": l.trained.echo() })
}

/// Scores the full scene against its label plane.
pub fn cmd_eval(cfg: &RunConfig, console: &Console) -> Result<Metrics> {
    let l = load_for_inference(cfg)?;
    let gt = l
        .cube
        .labels
        .as_ref()
        .ok_or_else(|| anyhow!("cube has no label plane to evaluate against"))
        .context(Failure::Data)?;
    let pred = predict(&l)?;
    let mut cm = ConfusionMatrix::new(l.model.net.cfg.classes);
    cm.accumulate(&pred, gt).context(Failure::Data)?;
    let metrics = cm.compute();
    create_out(&cfg.out)?;
    let echo = inference_echo(cfg, &l);
    write_csv(&cfg.out.join("metrics.csv"), &echo, &metrics.to_csv())?;
    write_json(
        &cfg.out.join("metrics.json"),
        &json!({ "config": echo, "confusion": cm, "metrics": metrics }),
    )?;
    console.line(format!(
        "mIoU {:.4}  mF1 {:.4}  mAcc {:.4}",
        metrics.miou, metrics.mf1, metrics.macc
    ));
    Ok(metrics)
}

#[derive(Clone, Debug)]
pub struct PredictReport {
    pub ppm: PathBuf,
    pub labels: PathBuf,
    pub map: LabelMap,
}

pub fn cmd_predict(cfg: &RunConfig, console: &Console) -> Result<PredictReport> {
    let l = load_for_inference(cfg)?;
    let map = predict(&l)?;
    create_out(&cfg.out)?;
    let echo = inference_echo(cfg, &l);
    let classes = l.model.net.cfg.classes;
    let ppm = cfg.out.join("prediction.ppm");
    write_ppm(
        BufWriter::new(fs::File::create(&ppm)?),
        &map,
        &default_palette(classes),
    )?;
    let labels = cfg.out.join("prediction.labels");
    write_labels(&labels, &map, classes, Some(&echo))?;
    write_json(&cfg.out.join("prediction.json"), &json!({ "config": echo }))?;
    console.line(format!("wrote {} and {}", ppm.display(), labels.display()));
    Ok(PredictReport { ppm, labels, map })
}
