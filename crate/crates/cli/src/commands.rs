use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use msst_core::data::{generate_synthetic, load_dataset, prepare, save_dataset, split_holdout, Sample, SyntheticSpec};
use msst_core::ensemble::{check_stream_set, ensemble as fuse, NamedScores, StreamScoreFile};
use msst_core::gradsuite;
use msst_core::modality::{Modality, ModalityConfig};
use msst_core::network::{ModelConfig, MsstModel};
use msst_core::params::ParameterStore;
use msst_core::train::{evaluate, train as fit, Evaluation, TrainConfig};
use msst_core::GraphSpec;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::manifest::{write_json, Manifest};
use crate::{EnsembleArgs, EvalArgs, GradcheckArgs, SynthArgs, TraceArgs, TrainArgs, Usage, EXIT_GRADCHECK};

fn default_val_fraction() -> f64 {
    0.2
}

/// The `--config` file of `train`: model and training fields side by side.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(flatten)]
    pub model: ModelConfig,
    #[serde(flatten)]
    pub train: TrainConfig,
    /// Share of each class held out for validation when `--val` is absent.
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
}

/// Everything `eval` and `trace` need to rebuild a trained model.
#[derive(Clone, Debug, Serialize, Deserialize)]
struct RunFile {
    model: ModelConfig,
    train: TrainConfig,
    val_fraction: f64,
    graph: serde_json::Value,
    modality: Modality,
    stream: ModalityConfig,
    tag: String,
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn read_config(path: &Path) -> Result<RunConfig> {
    let value: serde_json::Value = read_json(path)?;
    let known = serde_json::to_value(RunConfig {
        val_fraction: default_val_fraction(),
        ..RunConfig::default()
    })?;
    let (Some(obj), Some(known)) = (value.as_object(), known.as_object()) else {
        bail!("{}: config must be a JSON object", path.display());
    };
    if let Some(k) = obj.keys().find(|k| !known.contains_key(*k)) {
        bail!("{}: unknown config field {k:?}", path.display());
    }
    serde_json::from_value(value).with_context(|| format!("parsing {}", path.display()))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn graph_of(run: &RunFile) -> Result<GraphSpec> {
    Ok(GraphSpec::from_json(&run.graph.to_string())?)
}

pub fn synth(a: SynthArgs) -> Result<i32> {
    let mut spec = match &a.config {
        Some(p) => read_json::<SyntheticSpec>(p)?,
        None => SyntheticSpec {
            num_classes: 4,
            samples_per_class: 50,
            joints: 0,
            channels: 3,
            min_frames: 64,
            max_frames: 64,
            noise: 0.1,
            seed: 0,
        },
    };
    if let Some(g) = &a.graph {
        spec.joints = GraphSpec::resolve(g)?.num_joints();
    }
    if spec.joints == 0 {
        return Err(Usage("synth needs --graph or a config with joints".into()).into());
    }
    spec.num_classes = a.classes.unwrap_or(spec.num_classes);
    spec.samples_per_class = a.per_class.unwrap_or(spec.samples_per_class);
    spec.min_frames = a.min_frames.unwrap_or(spec.min_frames);
    spec.max_frames = a.max_frames.unwrap_or(spec.max_frames);
    spec.noise = a.noise.unwrap_or(spec.noise);
    spec.seed = a.seed.unwrap_or(spec.seed);
    let samples = generate_synthetic(&spec)?;
    create_dir(&a.out)?;
    save_dataset(&samples, &a.out.join("data.jsonl"))?;
    let mut m = Manifest::new("synth", Some(spec.seed), serde_json::to_value(&spec)?);
    if let Some(p) = &a.config {
        m = m.input("config", p)?;
    }
    m.write(&a.out)?;
    println!("{}", json!({ "samples": samples.len(), "classes": spec.num_classes, "joints": spec.joints }));
    Ok(0)
}

fn max_label(samples: &[Sample]) -> Option<usize> {
    samples.iter().map(|s| s.sequence.label()).max()
}

pub fn train(a: TrainArgs) -> Result<i32> {
    let modality: Modality = a.modality.into();
    if a.k.is_some() && matches!(modality, Modality::Joint | Modality::JointMotion) {
        return Err(Usage("--k applies only to bone and bone-motion".into()).into());
    }
    let mut cfg = match &a.config {
        Some(p) => read_config(p)?,
        None => RunConfig {
            val_fraction: default_val_fraction(),
            ..RunConfig::default()
        },
    };
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    let seed = cfg.train.seed;
    let graph = GraphSpec::resolve(&a.graph)?;
    let stream = ModalityConfig::from_modality(modality, a.k, &graph)?;
    let samples = load_dataset(&a.data)?;
    let (train_samples, val_samples) = match &a.val {
        Some(p) => (samples, load_dataset(p)?),
        None => split_holdout(&samples, cfg.val_fraction, seed)?,
    };
    let first = train_samples.first().context("training data is empty")?;
    if cfg.model.num_classes == 0 {
        cfg.model.num_classes = max_label(&train_samples).max(max_label(&val_samples)).unwrap_or(0) + 1;
    }
    cfg.model.joints = graph.num_joints();
    if cfg.model.in_channels == 0 {
        cfg.model.in_channels = first.sequence.channels();
    }
    cfg.model.validate()?;

    let frames = cfg.model.frames;
    let train_set = prepare(&train_samples, &stream, &graph, frames)?;
    let val_set = prepare(&val_samples, &stream, &graph, frames)?;
    let val = (!val_set.is_empty()).then_some(&val_set);

    create_dir(&a.out)?;
    let mut model = MsstModel::new(cfg.model.clone(), &graph, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let metrics_path = a.out.join("metrics.jsonl");
    let mut log = BufWriter::new(File::create(&metrics_path).with_context(|| format!("creating {}", metrics_path.display()))?);
    let report = fit(&mut model, &train_set, val, &cfg.train, &mut log)?;
    log.flush()?;

    model.params().save(&a.out.join("model.ckpt"))?;
    report.best.save(&a.out.join("best.ckpt"))?;
    let saved = MsstModel::from_parts(cfg.model.clone(), model.params().rounded_to_f32());
    let scored = if val.is_some() { &val_set } else { &train_set };
    let ev = evaluate(&saved, scored)?;
    score_file(&stream.tag(), scored, &ev).save(&a.out.join("scores.json"))?;
    if a.val.is_none() && !val_samples.is_empty() {
        save_dataset(&val_samples, &a.out.join("val.jsonl"))?;
    }
    if a.trace_attn {
        let x = scored.inputs.first().context("no sample to trace")?;
        write_maps(&saved, x, &a.out)?;
    }

    let run = RunFile {
        model: cfg.model.clone(),
        train: cfg.train.clone(),
        val_fraction: cfg.val_fraction,
        graph: serde_json::from_str(&graph.to_json())?,
        modality,
        stream,
        tag: stream.tag(),
    };
    write_json(&a.out.join("run.json"), &run)?;
    let mut m = Manifest::new("train", Some(seed), serde_json::to_value(&run)?).input("data", &a.data)?;
    if let Some(p) = &a.val {
        m = m.input("val", p)?;
    }
    m.write(&a.out)?;

    let last = report.metrics.last().context("no epochs ran")?;
    println!(
        "{}",
        json!({
            "tag": run.tag,
            "epochs": last.epoch + 1,
            "train_loss": last.train_loss,
            "train_acc": last.train_acc,
            "val_acc": last.val_acc,
            "best_epoch": report.best_epoch,
        })
    );
    Ok(0)
}

fn score_file(tag: &str, set: &msst_core::data::PreparedSet, ev: &Evaluation) -> StreamScoreFile {
    StreamScoreFile {
        tag: tag.into(),
        ids: set.ids.clone(),
        classes: ev.scores.first().map_or(0, Vec::len),
        scores: ev.scores.clone(),
        labels: Some(set.labels.clone()),
    }
}

fn write_maps(model: &MsstModel, x: &msst_core::Tensor, out: &Path) -> Result<usize> {
    let mut unused = ChaCha8Rng::seed_from_u64(0);
    let (_, trace) = model.forward(x, false, &mut unused, true)?;
    let maps = trace.maps.unwrap_or_default();
    std::fs::write(out.join("attention.json"), maps.to_json())?;
    Ok(maps.maps.len())
}

fn load_run(checkpoint: &Path, run: &Option<PathBuf>) -> Result<(RunFile, PathBuf, MsstModel)> {
    let run_path = match run {
        Some(p) => p.clone(),
        None => checkpoint.parent().unwrap_or(Path::new(".")).join("run.json"),
    };
    let run: RunFile = read_json(&run_path)?;
    let params = ParameterStore::load(checkpoint)?;
    let model = MsstModel::from_parts(run.model.clone(), params);
    Ok((run, run_path, model))
}

pub fn eval(a: EvalArgs) -> Result<i32> {
    let (run, run_path, model) = load_run(&a.checkpoint, &a.run)?;
    let graph = graph_of(&run)?;
    let samples = load_dataset(&a.data)?;
    let set = prepare(&samples, &run.stream, &graph, run.model.frames)?;
    let ev = evaluate(&model, &set)?;
    let summary = json!({ "tag": run.tag, "samples": set.len(), "accuracy": ev.accuracy });
    if let Some(out) = &a.out {
        create_dir(out)?;
        score_file(&run.tag, &set, &ev).save(&out.join("scores.json"))?;
        write_json(&out.join("eval.json"), &summary)?;
        Manifest::new("eval", None, serde_json::to_value(&run)?)
            .input("checkpoint", &a.checkpoint)?
            .input("run", &run_path)?
            .input("data", &a.data)?
            .write(out)?;
    }
    println!("{summary}");
    Ok(0)
}

pub fn ensemble(a: EnsembleArgs) -> Result<i32> {
    let mut streams = Vec::with_capacity(a.scores.len());
    for p in &a.scores {
        streams.push(NamedScores {
            source: p.display().to_string(),
            file: StreamScoreFile::load(p)?,
        });
    }
    let r = fuse(&streams)?;
    if let Some(n) = a.streams {
        check_stream_set(&r.tags, n)?;
    }
    let summary = json!({ "tags": r.tags, "samples": r.predictions.len(), "accuracy": r.accuracy });
    if let Some(out) = &a.out {
        create_dir(out)?;
        write_json(
            &out.join("ensemble.json"),
            &json!({ "tags": r.tags, "accuracy": r.accuracy, "predictions": r.predictions, "scores": r.fused }),
        )?;
        let mut m = Manifest::new("ensemble", None, json!({ "streams": a.streams }));
        for (i, p) in a.scores.iter().enumerate() {
            m = m.input(&format!("scores{i}"), p)?;
        }
        m.write(out)?;
    }
    println!("{summary}");
    Ok(0)
}

pub fn gradcheck(a: GradcheckArgs) -> Result<i32> {
    if a.stride == 0 {
        return Err(Usage("--stride must be positive".into()).into());
    }
    let entries = gradsuite::run_all(a.stride)?;
    for e in &entries {
        println!(
            "{} {:<32} max rel err {:.3e} over {} coordinates (tol {:.0e})",
            if e.passed() { "ok  " } else { "FAIL" },
            e.name,
            e.max_rel_error,
            e.coordinates,
            e.tolerance
        );
    }
    if let Some(out) = &a.out {
        create_dir(out)?;
        write_json(&out.join("gradcheck.json"), &entries)?;
        Manifest::new("gradcheck", None, json!({ "stride": a.stride })).write(out)?;
    }
    let failed = entries.iter().filter(|e| !e.passed()).count();
    if failed > 0 {
        eprintln!("{failed} of {} gradient checks failed", entries.len());
        return Ok(EXIT_GRADCHECK);
    }
    Ok(0)
}

pub fn trace(a: TraceArgs) -> Result<i32> {
    let (run, run_path, model) = load_run(&a.checkpoint, &a.run)?;
    let graph = graph_of(&run)?;
    let samples = load_dataset(&a.data)?;
    let Some(sample) = samples.get(a.index) else {
        return Err(Usage(format!("--index {} but the dataset has {} samples", a.index, samples.len())).into());
    };
    let set = prepare(std::slice::from_ref(sample), &run.stream, &graph, run.model.frames)?;
    create_dir(&a.out)?;
    let n = write_maps(&model, &set.inputs[0], &a.out)?;
    Manifest::new("trace", None, json!({ "run": run, "index": a.index }))
        .input("checkpoint", &a.checkpoint)?
        .input("run", &run_path)?
        .input("data", &a.data)?
        .write(&a.out)?;
    println!("{}", json!({ "id": sample.id, "maps": n }));
    Ok(0)
}
