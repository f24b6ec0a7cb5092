//! The `wsed` command line.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::aggregation::{aggregate, AggregationMethod, FrameProbMatrix};
use crate::decoding::{
    decode_events_with, predict_tags, DecodeOptions, EventList, ThresholdSet, DEFAULT_MU,
    DEFAULT_TAU_HIGH, DEFAULT_TAU_LOW,
};
use crate::error::{Error, Result};
use crate::gradsuite::{gradient_suite, BLOCKS};
use crate::io::{self, ClassRegistry, ClipTable, EventTable, FrameTable, Manifest, ThresholdFile};
use crate::metrics::{
    mean_average_precision, segment_stats, tag_stats, ClipDurations, EvaluationReport,
};
use crate::threshopt::{
    optimize_thresholds, ClipPrediction, Metric, Mode, ObjectiveSpec, Task, ValidationSet,
};
use crate::training::{
    clip_map, frame_map, frame_prior_baseline, predict_dataset, synth_dataset, train_toy,
    ModelConfig, ModelKind, Regime, SyntheticDatasetSpec, TrainConfig,
};

#[derive(Debug, Parser)]
#[command(
    name = "wsed",
    version,
    about = "Weakly-supervised sound event detection toolkit",
    propagate_version = true
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthesize a weakly labelled dataset, train a toy model and write
    /// its held-out predictions.
    TrainToy(TrainToyArgs),
    /// Collapse frame probabilities into clip probabilities.
    Aggregate(AggregateArgs),
    /// Tag clips and decode events with double thresholding.
    Decode(DecodeArgs),
    /// Segment-based SED report, with optional tagging and mAP sections.
    Evaluate(EvaluateArgs),
    /// Tune per-class thresholds on a validation set.
    OptimizeThresholds(OptimizeArgs),
    /// Run the finite-difference gradient suite over every block.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct ThresholdArgs {
    /// Per-class threshold file; overrides --mu, --tau-high and --tau-low.
    #[arg(long, value_name = "PATH")]
    pub thresholds: Option<PathBuf>,
    /// Clip-level tagging threshold for every class.
    #[arg(long, default_value_t = DEFAULT_MU)]
    pub mu: f64,
    /// Frame threshold that starts an event.
    #[arg(long, default_value_t = DEFAULT_TAU_HIGH)]
    pub tau_high: f64,
    /// Frame threshold an event extends over.
    #[arg(long, default_value_t = DEFAULT_TAU_LOW)]
    pub tau_low: f64,
}

impl ThresholdArgs {
    fn resolve(&self, registry: &ClassRegistry) -> Result<ThresholdSet> {
        match &self.thresholds {
            Some(p) => {
                io::parse_thresholds(&io::read_text(p)?, &p.display().to_string())?.to_set(registry)
            }
            None => ThresholdSet::uniform(registry.len(), self.mu, self.tau_high, self.tau_low),
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainToyArgs {
    /// Directory for the model, logs and held-out predictions (created if missing).
    #[arg(long, value_name = "DIR")]
    pub out_dir: PathBuf,
    /// Number of sound classes.
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    /// Clips whose primary class is each class.
    #[arg(long, default_value_t = 50)]
    pub clips_per_class: usize,
    /// Frames per clip.
    #[arg(long, default_value_t = 80)]
    pub frames: usize,
    /// Feature bins reserved for each class.
    #[arg(long, default_value_t = 2)]
    pub bins_per_class: usize,
    /// Seconds per frame.
    #[arg(long, default_value_t = 0.125)]
    pub frame_duration: f64,
    /// Shortest synthetic event in frames.
    #[arg(long, default_value_t = 8)]
    pub min_event_frames: usize,
    /// Longest synthetic event in frames (at most --frames).
    #[arg(long, default_value_t = 32)]
    pub max_event_frames: usize,
    /// Standard deviation of the feature noise.
    #[arg(long, default_value_t = 0.3)]
    pub noise: f64,
    /// Seed for data, initialization and sampling.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Every n-th clip goes to the held-out split.
    #[arg(long, default_value_t = 5)]
    pub holdout_every: usize,
    /// cnn-transformer, cnn-glu, inception-v1, inception-v2 or inception-v3.
    #[arg(long, default_value = "cnn-transformer")]
    pub model: ModelKind,
    /// Clip aggregation: max, avg or attention.
    #[arg(long, default_value = "attention")]
    pub aggregation: AggregationMethod,
    /// Passes over the training split.
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    /// Clips per mini-batch.
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    /// Initial Adam step size.
    #[arg(long, default_value_t = 1e-3)]
    pub learning_rate: f64,
    /// Learning-rate factor applied after a plateau.
    #[arg(long, default_value_t = 0.9)]
    pub lr_decay: f64,
    /// Epochs without improvement before decaying the learning rate.
    #[arg(long, default_value_t = 5)]
    pub patience: usize,
    /// Mix pairs of examples with a Beta(alpha, alpha) weight (off by default).
    #[arg(long)]
    pub mixup_alpha: Option<f64>,
    /// Draw batches with the class-balanced sampler.
    #[arg(long)]
    pub balanced: bool,
    /// Train segment-wise on windows of this many frames (clip-wise by default).
    #[arg(long)]
    pub segment_frames: Option<usize>,
}

#[derive(Debug, Args)]
pub struct AggregateArgs {
    /// Frame probability table.
    #[arg(long, value_name = "PATH")]
    pub frames: PathBuf,
    /// max, avg or attention.
    #[arg(long, default_value = "max")]
    pub method: AggregationMethod,
    /// Positive per-frame weights in frame-table layout (attention only).
    #[arg(long, value_name = "PATH")]
    pub weights: Option<PathBuf>,
    /// Output clip probability table.
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DecodeArgs {
    /// Frame probability table.
    #[arg(long, value_name = "PATH")]
    pub frames: PathBuf,
    /// Clip probability table.
    #[arg(long, value_name = "PATH")]
    pub clips: PathBuf,
    #[command(flatten)]
    pub thresholds: ThresholdArgs,
    /// Seconds per frame.
    #[arg(long, default_value_t = 1.0)]
    pub frame_duration: f64,
    /// Join events of one class separated by less than this many seconds.
    #[arg(long, default_value_t = 0.0)]
    pub fill_gap: f64,
    /// Drop events shorter than this many seconds.
    #[arg(long, default_value_t = 0.0)]
    pub min_duration: f64,
    /// Output event table.
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
    /// Output weak-label table of predicted tags (printed to stdout when absent).
    #[arg(long, value_name = "PATH")]
    pub tags_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Reference event table.
    #[arg(long = "ref", value_name = "PATH")]
    pub reference: PathBuf,
    /// Predicted event table.
    #[arg(long, value_name = "PATH")]
    pub pred: PathBuf,
    /// Segment length in seconds.
    #[arg(long, default_value_t = 1.0)]
    pub segment: f64,
    /// Manifest giving the class order and every clip's duration.
    #[arg(long, value_name = "PATH")]
    pub manifest: Option<PathBuf>,
    /// Duration of every clip named in the event tables, without a manifest.
    #[arg(long, default_value_t = 10.0)]
    pub clip_duration: f64,
    /// Reference weak labels; enables the tagging and mAP sections.
    #[arg(long, value_name = "PATH")]
    pub ref_tags: Option<PathBuf>,
    /// Predicted weak labels for the tagging section.
    #[arg(long, value_name = "PATH")]
    pub pred_tags: Option<PathBuf>,
    /// Clip probabilities for mAP.
    #[arg(long, value_name = "PATH")]
    pub clip_probs: Option<PathBuf>,
    /// Also write the report as JSON.
    #[arg(long, value_name = "PATH")]
    pub json_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct OptimizeArgs {
    /// Frame probability table of the validation clips.
    #[arg(long, value_name = "PATH")]
    pub frames: PathBuf,
    /// Clip probability table of the validation clips.
    #[arg(long, value_name = "PATH")]
    pub clips: PathBuf,
    /// Reference events of the validation clips.
    #[arg(long, value_name = "PATH")]
    pub ref_events: PathBuf,
    /// Reference weak labels (derived from the events when absent).
    #[arg(long, value_name = "PATH")]
    pub ref_tags: Option<PathBuf>,
    /// Manifest giving clip durations (frames times frame duration when absent).
    #[arg(long, value_name = "PATH")]
    pub manifest: Option<PathBuf>,
    /// Seconds per frame.
    #[arg(long, default_value_t = 1.0)]
    pub frame_duration: f64,
    /// f1 or er.
    #[arg(long, default_value = "f1")]
    pub metric: Metric,
    /// at (clip tagging) or sed (segment-based detection).
    #[arg(long, default_value = "sed")]
    pub task: Task,
    /// Segment length in seconds for the sed task.
    #[arg(long, default_value_t = 1.0)]
    pub segment: f64,
    /// Forward-difference step.
    #[arg(long, default_value_t = crate::threshopt::DEFAULT_DELTA)]
    pub delta: f64,
    /// Adam iterations per pass.
    #[arg(long, default_value_t = crate::threshopt::DEFAULT_ITERATIONS)]
    pub iterations: usize,
    /// Adam step size.
    #[arg(long, default_value_t = crate::threshopt::DEFAULT_LEARNING_RATE)]
    pub learning_rate: f64,
    /// joint, or two-pass (mu on tagging first, then the frame thresholds).
    #[arg(long, default_value = "joint")]
    pub mode: Mode,
    /// Starting thresholds.
    #[command(flatten)]
    pub init: ThresholdArgs,
    /// Output threshold file.
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
    /// Optional per-iteration trace table.
    #[arg(long, value_name = "PATH")]
    pub trace: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Random instances per block.
    #[arg(long, default_value_t = crate::gradsuite::DEFAULT_INSTANCES)]
    pub instances: usize,
    /// Seed for the random instances.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Central-difference step.
    #[arg(long, default_value_t = crate::gradsuite::DEFAULT_DELTA)]
    pub delta: f64,
    /// Largest accepted relative error.
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    /// Restrict to these blocks (repeatable; all by default).
    #[arg(long = "block", value_name = "NAME")]
    pub blocks: Vec<String>,
    /// Also write the per-block results as JSON.
    #[arg(long, value_name = "PATH")]
    pub json_out: Option<PathBuf>,
}

/// Parses `argv` (program name first), runs the subcommand and returns
/// the process exit code: 0 on success, 1 for usage, parse and validation
/// errors, 2 for numeric and optimization failures.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    print!("{e}");
                    0
                }
                ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => {
                    eprint!("{e}");
                    1
                }
                _ => {
                    eprint!("{}", e.render());
                    1
                }
            };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    if e.is_numeric() {
        2
    } else {
        1
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::TrainToy(a) => cmd_train_toy(&a),
        Command::Aggregate(a) => cmd_aggregate(&a),
        Command::Decode(a) => cmd_decode(&a),
        Command::Evaluate(a) => cmd_evaluate(&a),
        Command::OptimizeThresholds(a) => cmd_optimize(&a),
        Command::Gradcheck(a) => cmd_gradcheck(&a),
    }
}

fn name(p: &Path) -> String {
    p.display().to_string()
}

fn read_frames(p: &Path) -> Result<FrameTable> {
    io::parse_frame_table(&io::read_text(p)?, &name(p))
}

fn read_clip_probs(p: &Path) -> Result<ClipTable> {
    io::parse_clip_probs(&io::read_text(p)?, &name(p))
}

fn read_weak_labels(p: &Path) -> Result<ClipTable> {
    io::parse_weak_labels(&io::read_text(p)?, &name(p))
}

fn read_events(p: &Path) -> Result<EventTable> {
    io::parse_events(&io::read_text(p)?, &name(p))
}

fn read_manifest(p: &Path) -> Result<Manifest> {
    Manifest::parse(&io::read_text(p)?, &name(p))
}

fn check_same_classes(expected: &[String], got: &[String], what: &str) -> Result<()> {
    if expected != got {
        return Err(Error::Validation(format!(
            "{what} has classes [{}], expected [{}]",
            got.join(","),
            expected.join(",")
        )));
    }
    Ok(())
}

fn cmd_train_toy(a: &TrainToyArgs) -> Result<()> {
    let data_spec = SyntheticDatasetSpec {
        classes: a.classes,
        clips_per_class: a.clips_per_class,
        frames: a.frames,
        bins_per_class: a.bins_per_class,
        frame_duration: a.frame_duration,
        seed: a.seed,
        min_event_frames: a.min_event_frames,
        max_event_frames: a.max_event_frames,
        noise: a.noise,
        ..SyntheticDatasetSpec::default()
    };
    let data = synth_dataset(&data_spec)?;
    let (train, held_out) = data.split(a.holdout_every)?;
    let model = ModelConfig::new(a.model, a.classes, data_spec.bins(), a.aggregation);
    let mut config = TrainConfig::new(model);
    config.regime = match a.segment_frames {
        Some(frames) => Regime::SegmentWise { frames },
        None => Regime::ClipWise,
    };
    config.epochs = a.epochs;
    config.batch_size = a.batch_size;
    config.learning_rate = a.learning_rate;
    config.seed = a.seed;
    config.mixup_alpha = a.mixup_alpha;
    config.balanced = a.balanced;
    config.lr_decay = a.lr_decay;
    config.patience = a.patience;

    let outcome = train_toy(&train, Some(&held_out), &config)?;
    let preds = predict_dataset(&outcome.model, &held_out, config.regime)?;
    let clip_ap = clip_map(&outcome.model, &held_out, config.regime)?;
    let frame_ap = frame_map(&outcome.model, &held_out, config.regime)?;
    let baseline = frame_prior_baseline(&held_out);

    let classes = &data.class_names;
    let registry = ClassRegistry::new(classes.clone())?;
    let ids: Vec<String> = held_out.clips.iter().map(|c| c.id.clone()).collect();
    let frames: Vec<(String, FrameProbMatrix)> = ids
        .iter()
        .cloned()
        .zip(preds.iter().map(|p| p.frames.clone()))
        .collect();
    let clips: Vec<_> = ids
        .iter()
        .cloned()
        .zip(preds.iter().map(|p| p.clip.clone()))
        .collect();
    let tags: Vec<(String, Vec<bool>)> = held_out
        .clips
        .iter()
        .map(|c| (c.id.clone(), c.tags.clone()))
        .collect();
    let manifest = Manifest::new(
        registry.clone(),
        held_out
            .clips
            .iter()
            .map(|c| io::ManifestClip {
                id: c.id.clone(),
                duration: c.duration(held_out.frame_duration),
                features: format!("features/{}.csv", c.id),
                tags: c.tags.clone(),
            })
            .collect(),
    )?;

    // render everything before the first write
    let mut files: Vec<(PathBuf, String)> = vec![
        ("model.json".into(), io::render_model(&outcome.model)?),
        ("steps.csv".into(), io::render_step_log(&outcome.steps)),
        ("epochs.csv".into(), io::render_epoch_log(&outcome.history)),
        (
            "frames.csv".into(),
            io::render_frame_table(&FrameTable::from_probs(classes, &frames))?,
        ),
        (
            "clips.csv".into(),
            io::render_clip_probs(&ClipTable::from_probs(classes, &clips))?,
        ),
        (
            "labels.csv".into(),
            io::render_weak_labels(&ClipTable::from_tags(classes, &tags))?,
        ),
        (
            "events.csv".into(),
            io::render_events(&EventTable::from_events(&held_out.events()?, &registry)?)?,
        ),
        ("manifest.txt".into(), manifest.render()?),
    ];
    for c in &held_out.clips {
        files.push((
            PathBuf::from("features").join(format!("{}.csv", c.id)),
            io::render_features(&c.features)?,
        ));
    }
    std::fs::create_dir_all(a.out_dir.join("features"))?;
    for (rel, text) in &files {
        io::write_atomic(&a.out_dir.join(rel), text)?;
    }

    let last = outcome.history.last().map(|e| e.loss).unwrap_or(f64::NAN);
    println!("train clips: {}", train.len());
    println!("held-out clips: {}", held_out.len());
    println!("epochs: {}", a.epochs);
    println!("initial loss: {:.6}", outcome.history[0].loss);
    println!("final loss: {last:.6}");
    println!("clip mAP: {:.4}", clip_ap.map);
    println!("frame mAP: {:.4}", frame_ap.map);
    println!("frame prior baseline: {baseline:.4}");
    Ok(())
}

fn cmd_aggregate(a: &AggregateArgs) -> Result<()> {
    let table = read_frames(&a.frames)?;
    let frames = table.to_probs(1.0)?;
    let weights = match (&a.weights, a.method) {
        (Some(p), _) => {
            let w = read_frames(p)?;
            check_same_classes(&table.classes, &w.classes, &name(p))?;
            Some(w.to_weights()?)
        }
        (None, AggregationMethod::Attention) => {
            return Err(Error::Argument("--method attention needs --weights".into()))
        }
        (None, _) => None,
    };
    let mut rows = Vec::with_capacity(frames.len());
    for (id, m) in &frames {
        let w = match &weights {
            Some(ws) => Some(
                ws.iter()
                    .find(|(c, _)| c == id)
                    .map(|(_, w)| w)
                    .ok_or_else(|| Error::Validation(format!("no weights for clip '{id}'")))?,
            ),
            None => None,
        };
        let clip =
            aggregate(m, a.method, w).map_err(|e| promote_dimension(e, &format!("clip '{id}'")))?;
        rows.push((id.clone(), clip));
    }
    io::write_atomic(
        &a.out,
        &io::render_clip_probs(&ClipTable::from_probs(&table.classes, &rows))?,
    )
}

/// Shape mismatches between input files are validation failures of the
/// inputs, not internal errors.
fn promote_dimension(e: Error, context: &str) -> Error {
    match e {
        Error::Dimension(m) => Error::Validation(format!("{context}: {m}")),
        other => other,
    }
}

fn cmd_decode(a: &DecodeArgs) -> Result<()> {
    let table = read_frames(&a.frames)?;
    let clips = read_clip_probs(&a.clips)?;
    check_same_classes(&table.classes, &clips.classes, &name(&a.clips))?;
    let registry = ClassRegistry::new(table.classes.clone())?;
    let thresholds = a.thresholds.resolve(&registry)?;
    let options = DecodeOptions {
        fill_gap: a.fill_gap,
        min_duration: a.min_duration,
    };
    if !(options.fill_gap >= 0.0 && options.min_duration >= 0.0) {
        return Err(Error::Argument(
            "--fill-gap and --min-duration must be non-negative".into(),
        ));
    }
    let clip_probs = clips.to_probs()?;
    let mut lists = Vec::new();
    let mut tags = Vec::new();
    for (id, frames) in table.to_probs(a.frame_duration)? {
        let clip = clip_probs
            .iter()
            .find(|(c, _)| *c == id)
            .map(|(_, p)| p)
            .ok_or_else(|| Error::Validation(format!("no clip probabilities for '{id}'")))?;
        tags.push((id.clone(), predict_tags(clip, &thresholds)?));
        lists.push(decode_events_with(
            &id,
            &frames,
            clip,
            &thresholds,
            &options,
        )?);
    }
    let events = EventList::merged(lists)?;
    let events_text = io::render_events(&EventTable::from_events(&events, &registry)?)?;
    let tags_text = io::render_weak_labels(&ClipTable::from_tags(&table.classes, &tags))?;
    io::write_atomic(&a.out, &events_text)?;
    match &a.tags_out {
        Some(p) => io::write_atomic(p, &tags_text)?,
        None => print!("{tags_text}"),
    }
    eprintln!("decoded {} events from {} clips", events.len(), tags.len());
    Ok(())
}

/// Class order: manifest, then reference tags, then event tables in
/// order of first appearance.
fn evaluation_registry(
    manifest: Option<&Manifest>,
    ref_tags: Option<&ClipTable>,
    tables: &[&EventTable],
) -> Result<ClassRegistry> {
    if let Some(m) = manifest {
        return Ok(m.classes.clone());
    }
    if let Some(t) = ref_tags {
        return ClassRegistry::new(t.classes.clone());
    }
    let mut names: Vec<String> = Vec::new();
    for t in tables {
        for n in t.class_names() {
            if !names.contains(&n) {
                names.push(n);
            }
        }
    }
    if names.is_empty() {
        return Err(Error::Validation(
            "no classes: both event tables are empty and no manifest was given".into(),
        ));
    }
    ClassRegistry::new(names)
}

fn tag_matrix(table: &ClipTable, ids: &[String], what: &str) -> Result<Vec<Vec<f64>>> {
    ids.iter()
        .map(|id| {
            table
                .get(id)
                .map(<[f64]>::to_vec)
                .ok_or_else(|| Error::Validation(format!("{what} has no row for clip '{id}'")))
        })
        .collect()
}

fn cmd_evaluate(a: &EvaluateArgs) -> Result<()> {
    if !(a.segment > 0.0 && a.segment.is_finite()) {
        return Err(Error::Argument(format!(
            "--segment must be positive, got {}",
            a.segment
        )));
    }
    let manifest = a.manifest.as_deref().map(read_manifest).transpose()?;
    let ref_tags = a.ref_tags.as_deref().map(read_weak_labels).transpose()?;
    let ref_table = read_events(&a.reference)?;
    let pred_table = read_events(&a.pred)?;
    let registry = evaluation_registry(
        manifest.as_ref(),
        ref_tags.as_ref(),
        &[&ref_table, &pred_table],
    )?;
    let names = registry.names().to_vec();
    let reference = ref_table.to_event_list(&registry)?;
    let predicted = pred_table.to_event_list(&registry)?;

    let mut durations = ClipDurations::new();
    match &manifest {
        Some(m) => {
            for c in &m.clips {
                durations.insert(c.id.clone(), c.duration);
            }
        }
        None => {
            if !(a.clip_duration > 0.0 && a.clip_duration.is_finite()) {
                return Err(Error::Argument(format!(
                    "--clip-duration must be positive, got {}",
                    a.clip_duration
                )));
            }
            for e in reference.events().iter().chain(predicted.events()) {
                durations.insert(e.clip_id.clone(), a.clip_duration);
            }
        }
    }
    let stats = segment_stats(
        &reference,
        &predicted,
        a.segment,
        &durations,
        registry.len(),
    )?;
    let mut reports = vec![EvaluationReport::from_stats(
        "sed",
        Some(a.segment),
        &names,
        &stats,
        None,
    )];

    if let Some(rt) = &ref_tags {
        check_same_classes(
            &names,
            &rt.classes,
            &name(a.ref_tags.as_deref().unwrap_or(Path::new(""))),
        )?;
        let ids: Vec<String> = rt.rows.iter().map(|(id, _)| id.clone()).collect();
        let truth: Vec<Vec<bool>> = rt.to_tags().into_iter().map(|(_, t)| t).collect();
        let map = match &a.clip_probs {
            Some(p) => {
                let probs = read_clip_probs(p)?;
                check_same_classes(&names, &probs.classes, &name(p))?;
                let scores = tag_matrix(&probs, &ids, &name(p))?;
                Some(mean_average_precision(&scores, &truth)?)
            }
            None => None,
        };
        let stats = match &a.pred_tags {
            Some(p) => {
                let pt = read_weak_labels(p)?;
                check_same_classes(&names, &pt.classes, &name(p))?;
                let pred: Vec<Vec<bool>> = tag_matrix(&pt, &ids, &name(p))?
                    .into_iter()
                    .map(|r| r.into_iter().map(|v| v == 1.0).collect())
                    .collect();
                Some(tag_stats(&truth, &pred)?)
            }
            None => None,
        };
        match (stats, map) {
            (Some(s), m) => reports.push(EvaluationReport::from_stats(
                "at",
                None,
                &names,
                &s,
                m.as_ref(),
            )),
            (None, Some(m)) => {
                let mut text = String::from("task: at\n");
                for (n, ap) in names.iter().zip(&m.per_class) {
                    let v = ap.map_or_else(|| "-".to_string(), |v| format!("{v:.3}"));
                    let _ = writeln!(text, "{n}: ap={v}");
                }
                let _ = writeln!(text, "mAP={:.3}", m.map);
                print!("{text}");
            }
            (None, None) => {
                return Err(Error::Argument(
                    "--ref-tags needs --pred-tags or --clip-probs".into(),
                ))
            }
        }
    } else if a.pred_tags.is_some() || a.clip_probs.is_some() {
        return Err(Error::Argument(
            "--pred-tags and --clip-probs need --ref-tags".into(),
        ));
    }

    if let Some(p) = &a.json_out {
        let json = serde_json::to_string_pretty(&reports)
            .map_err(|e| Error::Validation(format!("cannot serialize report: {e}")))?;
        io::write_atomic(p, &format!("{json}\n"))?;
    }
    for r in &reports {
        print!("{}", r.render_text());
    }
    Ok(())
}

fn cmd_optimize(a: &OptimizeArgs) -> Result<()> {
    let spec = ObjectiveSpec {
        metric: a.metric,
        task: a.task,
        segment: a.segment,
        delta: a.delta,
        iterations: a.iterations,
        learning_rate: a.learning_rate,
        mode: a.mode,
    };
    spec.validate()?;
    let table = read_frames(&a.frames)?;
    let clips = read_clip_probs(&a.clips)?;
    check_same_classes(&table.classes, &clips.classes, &name(&a.clips))?;
    let registry = ClassRegistry::new(table.classes.clone())?;
    let init = a.init.resolve(&registry)?;
    let manifest = a.manifest.as_deref().map(read_manifest).transpose()?;
    if let Some(m) = &manifest {
        check_same_classes(
            registry.names(),
            m.classes.names(),
            &name(a.manifest.as_deref().unwrap_or(Path::new(""))),
        )?;
    }
    let events = read_events(&a.ref_events)?.to_event_list(&registry)?;
    let ref_tags = a.ref_tags.as_deref().map(read_weak_labels).transpose()?;
    if let (Some(t), Some(p)) = (&ref_tags, &a.ref_tags) {
        check_same_classes(registry.names(), &t.classes, &name(p))?;
    }
    let clip_probs = clips.to_probs()?;

    let mut preds = Vec::new();
    let mut tags = Vec::new();
    for (id, frames) in table.to_probs(a.frame_duration)? {
        let clip = clip_probs
            .iter()
            .find(|(c, _)| *c == id)
            .map(|(_, p)| p.clone())
            .ok_or_else(|| Error::Validation(format!("no clip probabilities for '{id}'")))?;
        let duration = match &manifest {
            Some(m) => m
                .clips
                .iter()
                .find(|c| c.id == id)
                .map(|c| c.duration)
                .ok_or_else(|| Error::Validation(format!("clip '{id}' is not in the manifest")))?,
            None => frames.duration(),
        };
        let truth = match &ref_tags {
            Some(t) => t
                .get(&id)
                .ok_or_else(|| Error::Validation(format!("no reference tags for '{id}'")))?
                .iter()
                .map(|&v| v == 1.0)
                .collect(),
            None => {
                let mut t = vec![false; registry.len()];
                for e in events.for_clip(&id) {
                    t[e.class] = true;
                }
                t
            }
        };
        tags.push(truth);
        preds.push(ClipPrediction {
            id,
            frames,
            clip,
            duration,
        });
    }
    if let Some(e) = events
        .events()
        .iter()
        .find(|e| !preds.iter().any(|p| p.id == e.clip_id))
    {
        return Err(Error::Validation(format!(
            "reference event for clip '{}' without predictions",
            e.clip_id
        )));
    }
    let data = ValidationSet::new(preds, tags, events)
        .map_err(|e| promote_dimension(e, "validation set"))?;
    let result = optimize_thresholds(&spec, &data, &init)?;

    let file = ThresholdFile::from_set(&result.thresholds, &registry)?;
    let thresholds_text = io::render_thresholds(&file)?;
    let trace_text = io::render_trace(&result.trace, registry.names());
    io::write_atomic(&a.out, &thresholds_text)?;
    if let Some(p) = &a.trace {
        io::write_atomic(p, &trace_text)?;
    }
    println!(
        "initial objective: {}",
        io::fmt_f64(result.initial_objective)
    );
    println!("final objective: {}", io::fmt_f64(result.objective));
    println!("iterations: {}", result.trace.len());
    Ok(())
}

fn cmd_gradcheck(a: &GradcheckArgs) -> Result<()> {
    let reports = gradient_suite(&a.blocks, a.instances, a.seed, a.delta)?;
    let width = BLOCKS.iter().map(|b| b.len()).max().unwrap_or(5);
    let mut failed = Vec::new();
    for r in &reports {
        let ok = r.max_relative_error < a.tolerance;
        println!(
            "{:<width$}  {:>3} instances  max rel err {:.3e}  {}",
            r.block,
            r.instances,
            r.max_relative_error,
            if ok { "ok" } else { "FAIL" }
        );
        if !ok {
            failed.push(r.block.clone());
        }
    }
    if let Some(p) = &a.json_out {
        let json = serde_json::to_string_pretty(&reports)
            .map_err(|e| Error::Validation(format!("cannot serialize report: {e}")))?;
        io::write_atomic(p, &format!("{json}\n"))?;
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Numeric(format!(
            "gradient check above {:e} for {}",
            a.tolerance,
            failed.join(", ")
        )))
    }
}
