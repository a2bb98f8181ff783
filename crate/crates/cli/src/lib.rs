//! The `dermfeat` command line: synthetic data generation, training,
//! prediction, AUROC evaluation, and gradient checking.
//!
//! Every subcommand resolves its configuration as flags over an optional JSON
//! file over built-in defaults, and prints the result as JSON before doing any
//! work. Passing that JSON back through `--config` reproduces the run.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use dermfeat::data::{self, DatasetManifest, Split, SynthSpec, MANIFEST_FILE};
use dermfeat::metrics::{evaluate, EvalImage, RocResult};
use dermfeat::model::{load_model, load_params, save_params, EncoderConfig};
use dermfeat::selfcheck::{run_suite, SuiteConfig};
use dermfeat::superpixel::mask_to_scores;
use dermfeat::train::{predict, train_with_progress, EpochRecord, TrainConfig};
use dermfeat::{Class, SuperpixelScores};

pub const WEIGHTS_FILE: &str = "weights.bin";
pub const TRAIN_REPORT_FILE: &str = "train_report.json";
pub const PREDICTIONS_DIR: &str = "predictions";
pub const EVAL_REPORT_FILE: &str = "eval_report.json";
pub const GRADCHECK_REPORT_FILE: &str = "gradcheck_report.json";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad flags, config files, or missing inputs. Exit code 2.
    #[error("{0}")]
    Usage(String),
    /// Anything that fails once work has started. Exit code 1.
    #[error(transparent)]
    Runtime(#[from] dermfeat::Error),
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) | CliError::Failed(_) => 1,
        }
    }
}

type CliResult<T> = Result<T, CliError>;

fn usage(e: impl std::fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

#[derive(Debug, Parser)]
#[command(name = "dermfeat", version, about = "Dermoscopic feature detection pipeline")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic dataset with exact superpixel labels.
    GenData(GenDataArgs),
    /// Train the network on a dataset manifest.
    Train(TrainArgs),
    /// Score every superpixel of a dataset with trained weights.
    Predict(PredictArgs),
    /// Compute per-class and macro AUROC of predictions against labels.
    Eval(EvalArgs),
    /// Compare analytic gradients with finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Clone, Args)]
pub struct Shared {
    /// JSON config file; flags take precedence over its values.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, value_name = "DIR", default_value = ".")]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Force serial execution. Everything already runs serially, so this only
    /// documents intent.
    #[arg(long)]
    pub deterministic: bool,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[command(flatten)]
    pub shared: Shared,
    #[arg(long)]
    pub count: Option<usize>,
    /// Image side in pixels.
    #[arg(long)]
    pub size: Option<usize>,
    /// Grid superpixel side in pixels.
    #[arg(long)]
    pub cell: Option<usize>,
    #[arg(long, value_parser = ["train", "val", "test"])]
    pub split: Option<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub shared: Shared,
    /// Training manifest.
    #[arg(long, value_name = "PATH")]
    pub data: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    /// Training image side; defaults to the manifest's.
    #[arg(long)]
    pub size: Option<usize>,
    /// Encoder channels per block, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub channels: Option<Vec<usize>>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[command(flatten)]
    pub shared: Shared,
    #[arg(long, value_name = "PATH")]
    pub data: PathBuf,
    #[arg(long, value_name = "PATH")]
    pub weights: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub shared: Shared,
    #[arg(long, value_name = "PATH")]
    pub data: PathBuf,
    /// Directory of per-image prediction files.
    #[arg(long, value_name = "DIR")]
    pub predictions: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[command(flatten)]
    pub shared: Shared,
    #[arg(long)]
    pub tolerance: Option<f64>,
    /// Instances of each check kind.
    #[arg(long)]
    pub instances: Option<usize>,
    #[arg(long)]
    pub step: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenDataConfig {
    pub count: usize,
    pub split: Split,
    pub synth: SynthSpec,
    /// Only used to check that `synth.image_size` suits the network.
    pub encoder: EncoderConfig,
}

impl Default for GenDataConfig {
    fn default() -> Self {
        GenDataConfig {
            count: 200,
            split: Split::Train,
            synth: SynthSpec::default(),
            encoder: EncoderConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictConfig {
    /// When set, the weights must match this encoder exactly.
    pub encoder: Option<EncoderConfig>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {}

/// One prediction file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionFile {
    pub image: String,
    pub scores: SuperpixelScores,
}

#[derive(Debug, Serialize)]
struct TrainReportFile<'a> {
    config: &'a TrainConfig,
    samples: usize,
    epochs: &'a [EpochRecord],
}

#[derive(Debug, Serialize)]
struct EvalReportFile<'a> {
    images: usize,
    #[serde(flatten)]
    result: &'a RocResult,
}

/// Reads `path` as a JSON object, or starts from an empty one.
fn config_object(path: Option<&Path>) -> CliResult<Map<String, Value>> {
    let Some(path) = path else {
        return Ok(Map::new());
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
    match serde_json::from_str(&text) {
        Ok(Value::Object(map)) => Ok(map),
        Ok(_) => Err(usage(format!("config {} is not a JSON object", path.display()))),
        Err(e) => Err(usage(format!("config {}: {e}", path.display()))),
    }
}

/// Sets `value` at a dotted key, creating intermediate objects.
fn set_path(map: &mut Map<String, Value>, key: &str, value: Value) -> CliResult<()> {
    match key.split_once('.') {
        None => {
            map.insert(key.to_string(), value);
            Ok(())
        }
        Some((head, rest)) => {
            let slot = map
                .entry(head.to_string())
                .or_insert_with(|| Value::Object(Map::new()));
            match slot {
                Value::Object(inner) => set_path(inner, rest, value),
                _ => Err(usage(format!("config field {head} must be an object"))),
            }
        }
    }
}

fn has_path(map: &Map<String, Value>, key: &str) -> bool {
    match key.split_once('.') {
        None => map.contains_key(key),
        Some((head, rest)) => matches!(map.get(head), Some(Value::Object(m)) if has_path(m, rest)),
    }
}

/// Resolves flags over file over defaults.
fn resolve<T: DeserializeOwned>(
    mut base: Map<String, Value>,
    overrides: Vec<(&str, Option<Value>)>,
) -> CliResult<T> {
    for (key, value) in overrides {
        if let Some(v) = value {
            set_path(&mut base, key, v)?;
        }
    }
    serde_json::from_value(Value::Object(base)).map_err(|e| usage(format!("invalid config: {e}")))
}

fn echo_config<T: Serialize>(command: &str, cfg: &T) {
    let text = serde_json::to_string_pretty(cfg).expect("config serializes");
    println!("{command}: effective config\n{text}");
}

fn create_dir(path: &Path) -> CliResult<()> {
    std::fs::create_dir_all(path)
        .map_err(|e| CliError::Failed(format!("cannot create {}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    write_text(path, serde_json::to_string_pretty(value).expect("report serializes"))
}

fn write_text(path: &Path, mut text: String) -> CliResult<()> {
    text.push('\n');
    std::fs::write(path, text).map_err(|e| CliError::Failed(format!("cannot write {}: {e}", path.display())))
}

/// Reads a manifest up front so a missing or malformed one is a usage error.
fn read_manifest(path: &Path) -> CliResult<DatasetManifest> {
    if !path.is_file() {
        return Err(usage(format!("manifest {} does not exist", path.display())));
    }
    DatasetManifest::read(path).map_err(usage)
}

pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Predict(a) => predict_cmd(a),
        Command::Eval(a) => eval(a),
        Command::Gradcheck(a) => gradcheck(a),
    }
}

fn gen_data(a: GenDataArgs) -> CliResult<()> {
    let cfg: GenDataConfig = resolve(
        config_object(a.shared.config.as_deref())?,
        vec![
            ("count", a.count.map(Value::from)),
            ("split", a.split.map(Value::from)),
            ("synth.image_size", a.size.map(Value::from)),
            ("synth.cell", a.cell.map(Value::from)),
            ("synth.seed", a.shared.seed.map(Value::from)),
        ],
    )?;
    echo_config("gen-data", &cfg);
    if cfg.count == 0 {
        return Err(usage("count must be at least 1"));
    }
    cfg.synth.validate().map_err(usage)?;
    cfg.encoder.validate().map_err(usage)?;
    let n = cfg.synth.image_size;
    cfg.encoder.check_input_size(n, n).map_err(usage)?;

    let out = &a.shared.out;
    create_dir(out)?;
    let manifest = data::generate(&cfg.synth, cfg.split, cfg.count, out)?;
    let dataset = data::load(&out.join(MANIFEST_FILE))?;

    let mut superpixels = 0;
    let mut positives = [0usize; 4];
    let mut images_with = [0usize; 4];
    for s in &dataset.samples {
        superpixels += s.labels.len();
        for c in 0..4 {
            let k = s.labels.rows().iter().filter(|r| r[c] == 1).count();
            positives[c] += k;
            images_with[c] += usize::from(k > 0);
        }
    }
    println!(
        "wrote {} samples ({} superpixels) to {}",
        manifest.samples.len(),
        superpixels,
        out.join(MANIFEST_FILE).display()
    );
    println!("{:<18} {:>10} {:>8}", "class", "positives", "images");
    for class in Class::ALL {
        let c = class.index();
        println!("{:<18} {:>10} {:>8}", class.name(), positives[c], images_with[c]);
    }
    Ok(())
}

fn train(a: TrainArgs) -> CliResult<()> {
    let manifest = read_manifest(&a.data)?;
    let mut base = config_object(a.shared.config.as_deref())?;
    if a.size.is_none() && !has_path(&base, "image_size") {
        base.insert("image_size".into(), Value::from(manifest.image_size));
    }
    let cfg: TrainConfig = resolve(
        base,
        vec![
            ("epochs", a.epochs.map(Value::from)),
            ("batch_size", a.batch.map(Value::from)),
            ("learning_rate", a.lr.map(Value::from)),
            ("momentum", a.momentum.map(Value::from)),
            ("image_size", a.size.map(Value::from)),
            ("seed", a.shared.seed.map(Value::from)),
            ("encoder.channels", a.channels.map(|c| json!(c))),
        ],
    )?;
    echo_config("train", &cfg);
    cfg.validate().map_err(usage)?;

    let dataset = data::load(&a.data)?;
    if dataset.samples.is_empty() {
        return Err(usage(format!("manifest {} lists no samples", a.data.display())));
    }
    let samples = dataset
        .samples
        .iter()
        .map(|s| s.to_train_sample())
        .collect::<Result<Vec<_>, _>>()?;

    println!("{:>5} {:>8} {:>12} {:>9}", "epoch", "batches", "mean loss", "seconds");
    let (params, report) = train_with_progress(&samples, &cfg, |r| {
        println!(
            "{:>5} {:>8} {:>12.6} {:>9.2}",
            r.epoch, r.batches, r.mean_batch_loss, r.wall_seconds
        );
    })?;

    let out = &a.shared.out;
    create_dir(out)?;
    save_params(&params, &cfg.encoder, &out.join(WEIGHTS_FILE))?;
    write_json(
        &out.join(TRAIN_REPORT_FILE),
        &TrainReportFile {
            config: &cfg,
            samples: samples.len(),
            epochs: &report.epochs,
        },
    )?;
    println!("wrote {} and {}", out.join(WEIGHTS_FILE).display(), out.join(TRAIN_REPORT_FILE).display());
    Ok(())
}

fn predict_cmd(a: PredictArgs) -> CliResult<()> {
    let manifest = read_manifest(&a.data)?;
    let cfg: PredictConfig = resolve(config_object(a.shared.config.as_deref())?, vec![])?;
    echo_config("predict", &cfg);
    if !a.weights.is_file() {
        return Err(usage(format!("weights {} do not exist", a.weights.display())));
    }
    let (encoder, params) = match &cfg.encoder {
        Some(enc) => (enc.clone(), load_params(&a.weights, enc)?),
        None => load_model(&a.weights)?,
    };

    let dataset = data::load(&a.data)?;
    let dir = a.shared.out.join(PREDICTIONS_DIR);
    create_dir(&dir)?;
    for (sample, entry) in dataset.samples.iter().zip(&manifest.samples) {
        let mask = predict(&params, &encoder, &sample.image)
            .map_err(|e| CliError::Failed(format!("sample {}: {e}", sample.name)))?;
        let scores = mask_to_scores(&sample.map, &mask)?;
        let file = PredictionFile {
            image: entry.image.clone(),
            scores,
        };
        let text = serde_json::to_string(&file).expect("prediction serializes");
        write_text(&dir.join(format!("{}.json", sample.name)), text)?;
    }
    println!("wrote {} prediction files to {}", dataset.samples.len(), dir.display());
    Ok(())
}

fn read_prediction(path: &Path) -> CliResult<PredictionFile> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Failed(format!("missing prediction {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Failed(format!("prediction {}: {e}", path.display())))
}

fn eval(a: EvalArgs) -> CliResult<()> {
    read_manifest(&a.data)?;
    let cfg: EvalConfig = resolve(config_object(a.shared.config.as_deref())?, vec![])?;
    echo_config("eval", &cfg);
    if !a.predictions.is_dir() {
        return Err(usage(format!("predictions directory {} does not exist", a.predictions.display())));
    }
    let dataset = data::load(&a.data)?;

    let expected: BTreeSet<String> = dataset.samples.iter().map(|s| format!("{}.json", s.name)).collect();
    let listing = std::fs::read_dir(&a.predictions)
        .map_err(|e| CliError::Failed(format!("cannot list {}: {e}", a.predictions.display())))?;
    let mut extra = Vec::new();
    for entry in listing {
        let name = entry
            .map_err(|e| CliError::Failed(format!("cannot list {}: {e}", a.predictions.display())))?
            .file_name()
            .to_string_lossy()
            .into_owned();
        if name.ends_with(".json") && !expected.contains(&name) {
            extra.push(name);
        }
    }
    if !extra.is_empty() {
        extra.sort();
        return Err(CliError::Failed(format!(
            "predictions without a matching sample: {}",
            extra.join(", ")
        )));
    }

    let predictions = dataset
        .samples
        .iter()
        .map(|s| read_prediction(&a.predictions.join(format!("{}.json", s.name))))
        .collect::<CliResult<Vec<_>>>()?;
    let images: Vec<EvalImage> = dataset
        .samples
        .iter()
        .zip(&predictions)
        .map(|(s, p)| EvalImage {
            name: &s.name,
            scores: &p.scores,
            labels: &s.labels,
        })
        .collect();
    let result = evaluate(&images)?;

    create_dir(&a.shared.out)?;
    let path = a.shared.out.join(EVAL_REPORT_FILE);
    write_json(
        &path,
        &EvalReportFile {
            images: images.len(),
            result: &result,
        },
    )?;
    print!("{}", roc_table(&result));
    println!("wrote {}", path.display());
    Ok(())
}

fn fmt_auroc(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |a| format!("{a:.4}"))
}

/// Per-class table with undefined values shown as `n/a`.
pub fn roc_table(result: &RocResult) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:<18} {:>8} {:>10} {:>10}", "class", "auroc", "positives", "negatives");
    for c in &result.classes {
        let _ = writeln!(
            s,
            "{:<18} {:>8} {:>10} {:>10}",
            c.class,
            fmt_auroc(c.auroc),
            c.positives,
            c.negatives
        );
    }
    let _ = writeln!(s, "{:<18} {:>8}", "macro average", fmt_auroc(result.macro_average));
    s
}

fn gradcheck(a: GradcheckArgs) -> CliResult<()> {
    let cfg: SuiteConfig = resolve(
        config_object(a.shared.config.as_deref())?,
        vec![
            ("tolerance", a.tolerance.map(Value::from)),
            ("instances", a.instances.map(Value::from)),
            ("step", a.step.map(Value::from)),
            ("seed", a.shared.seed.map(Value::from)),
        ],
    )?;
    echo_config("gradcheck", &cfg);
    cfg.validate().map_err(usage)?;
    let report = run_suite(&cfg)?;

    create_dir(&a.shared.out)?;
    let path = a.shared.out.join(GRADCHECK_REPORT_FILE);
    write_json(&path, &report)?;

    let failures = report.failures().count();
    println!("{} checks, {} failed, tolerance {:e}", report.cases.len(), failures, cfg.tolerance);
    if let Some(w) = report.worst() {
        println!(
            "worst: {:?} instance {} at {} rel error {:.3e} (analytic {:.6e}, numeric {:.6e})",
            w.check, w.instance, w.worst_at, w.max_rel_error, w.analytic, w.numeric
        );
    }
    println!("wrote {}", path.display());
    if report.passed {
        Ok(())
    } else {
        Err(CliError::Failed(format!("{failures} gradient checks exceeded tolerance {:e}", cfg.tolerance)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dotted_overrides_nest_and_replace() {
        let mut base = Map::new();
        base.insert("encoder".into(), json!({"input_channels": 1}));
        set_path(&mut base, "encoder.channels", json!([4, 4])).unwrap();
        set_path(&mut base, "epochs", json!(3)).unwrap();
        assert_eq!(Value::Object(base.clone()), json!({"encoder": {"input_channels": 1, "channels": [4, 4]}, "epochs": 3}));
        assert!(has_path(&base, "encoder.channels"));
        assert!(!has_path(&base, "encoder.missing"));
        base.insert("x".into(), json!(1));
        assert!(set_path(&mut base, "x.y", json!(2)).is_err());
    }

    #[test]
    fn flags_beat_file_beat_defaults() {
        let mut file = Map::new();
        file.insert("epochs".into(), json!(9));
        file.insert("batch_size".into(), json!(4));
        let cfg: TrainConfig = resolve(file, vec![("epochs", Some(json!(2))), ("seed", None)]).unwrap();
        assert_eq!(cfg.epochs, 2);
        assert_eq!(cfg.batch_size, 4);
        assert_eq!(cfg.momentum, TrainConfig::default().momentum);
    }

    #[test]
    fn unknown_config_keys_are_usage_errors() {
        let mut file = Map::new();
        file.insert("epochz".into(), json!(1));
        let err = resolve::<TrainConfig>(file, vec![]).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("epochz"), "{err}");
    }

    #[test]
    fn table_marks_undefined_classes() {
        let result = RocResult {
            classes: vec![dermfeat::metrics::ClassRoc {
                class: "streaks".into(),
                auroc: None,
                positives: 0,
                negatives: 5,
            }],
            macro_average: None,
        };
        let t = roc_table(&result);
        assert!(t.contains("streaks") && t.contains("n/a"), "{t}");
    }
}
