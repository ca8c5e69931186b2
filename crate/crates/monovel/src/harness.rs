//! Training loop, configuration, checkpointing, evaluation, ablations, and
//! plot emission.
//!
//! The run configuration is a single JSON document covering the optimizer,
//! the loss weights, the encoder dimensions, and a set of ablation switches
//! that select which streams, fusion path, and loss terms are active. Every
//! run is reproducible from its seed: weight init, data shuffling, and all
//! numeric kernels are deterministic, so two trainings with the same config
//! produce the same loss trajectory and the same checkpoint.
//!
//! Artifacts: a line-delimited JSON training log (one record per epoch), a
//! JSON checkpoint that round-trips weights bit-exactly, evaluation reports
//! (JSON + aligned text table), a per-vehicle prediction CSV, ablation
//! tables, and deterministic PNG plots with a manifest.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, Write as _};
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::IxDyn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fusion::{FusionError, FusionInputs, MsafConfig, MsafFusion, Shortcut};
use crate::geometry::{GeometryError, VehicleState};
use crate::head::{DecodedNodes, HeadError, PredictionHead};
use crate::losses::{
    total_loss_node, HVariant, LossError, LossWeights, TotalLossNodes, TotalLossOptions,
};
use crate::metrics::{evaluate as metrics_evaluate, EvalReport, MetricsError};
use crate::params::{Adam, Binder, ParamError, ParamStore};
use crate::scenegen::{
    export_dataset, generate_dataset, load_dataset, DatasetError, FramePairSample, SceneConfig,
    SceneError,
};
use crate::streams::{ContextEncoder, MotionEncoder, SpatialEncoder, StreamError};
use crate::tape::{NodeId, Tape};

pub const TRAIN_LOG_FILE: &str = "train_log.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const PLOT_MANIFEST_FILE: &str = "plot_manifest.json";

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("i/o error on {}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("JSON error on {}: {source}", path.display())]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("loss became non-finite ({value}) at epoch {epoch}, batch {batch}; diagnostics were appended to the training log")]
    NonFiniteLoss { epoch: usize, batch: usize, value: f64 },
    #[error("log {} holds no epoch records", path.display())]
    EmptyLog { path: PathBuf },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Stream(#[from] StreamError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Head(#[from] HeadError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Params(#[from] ParamError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io { path: path.to_path_buf(), source }
}

fn json_err(path: &Path) -> impl FnOnce(serde_json::Error) -> HarnessError + '_ {
    move |source| HarnessError::Json { path: path.to_path_buf(), source }
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Which parts of the model and objective are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationSwitches {
    pub use_motion: bool,
    pub use_spatial: bool,
    pub use_context: bool,
    pub use_msaf: bool,
    pub loss_variant: HVariant,
    pub use_smooth: bool,
    pub use_glc: bool,
    pub shortcut: Shortcut,
}

impl Default for AblationSwitches {
    fn default() -> Self {
        AblationSwitches {
            use_motion: true,
            use_spatial: true,
            use_context: true,
            use_msaf: true,
            loss_variant: HVariant::Charbonnier,
            use_smooth: true,
            use_glc: true,
            shortcut: Shortcut::Spatial,
        }
    }
}

/// One training run, fully specified.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    /// Dataset directory; a CLI `--data` argument takes precedence.
    pub dataset: Option<PathBuf>,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Desk-scale default; 100 matches the full-dataset schedule.
    pub epochs: usize,
    /// Epochs during which the flow network sees the ground-truth flow as
    /// its hint channels; afterwards the hint is zeros.
    pub teacher_forced_epochs: usize,
    pub loss_weights: LossWeights,
    /// Divide the relative-constraint loss by the ordered-pair count.
    pub glc_normalize: bool,
    /// Save the element-wise mean of the weights from the last this-many
    /// epochs instead of the final weights (0 keeps the final weights).
    /// Averaging the tail of the trajectory damps step-to-step optimizer
    /// noise without changing the training updates themselves.
    pub average_tail_epochs: usize,
    pub encoder: crate::streams::EncoderConfig,
    pub d_q: usize,
    pub d_v: usize,
    pub scaled_attention: bool,
    pub ablation: AblationSwitches,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            dataset: None,
            learning_rate: 1e-4,
            batch_size: 4,
            epochs: 30,
            teacher_forced_epochs: 5,
            loss_weights: LossWeights::default(),
            glc_normalize: true,
            average_tail_epochs: 0,
            encoder: crate::streams::EncoderConfig::default(),
            d_q: 64,
            d_v: 64,
            scaled_attention: false,
            ablation: AblationSwitches::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.batch_size < 1 {
            return Err(HarnessError::Config("batch_size must be ≥ 1".into()));
        }
        if self.epochs < 1 {
            return Err(HarnessError::Config("epochs must be ≥ 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(HarnessError::Config("learning_rate must be positive".into()));
        }
        self.loss_weights.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        self.encoder.validate().map_err(HarnessError::Config)?;
        let ab = &self.ablation;
        if !(ab.use_motion || ab.use_spatial || ab.use_context) {
            return Err(HarnessError::Config("at least one feature stream must be enabled".into()));
        }
        if ab.use_msaf && !(ab.use_motion && ab.use_spatial && ab.use_context) {
            return Err(HarnessError::Config(
                "attention fusion requires all three streams to be enabled".into(),
            ));
        }
        if self.d_q == 0 || self.d_v == 0 {
            return Err(HarnessError::Config("attention widths must be positive".into()));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<RunConfig, HarnessError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let config: RunConfig = serde_json::from_str(&text).map_err(json_err(path))?;
        config.validate()?;
        Ok(config)
    }
}

/// Dataset-generation request: scene parameters plus the clip count. Clip
/// `i` is generated with `scene.seed + i`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DatagenConfig {
    pub scene: SceneConfig,
    pub clips: usize,
}

impl Default for DatagenConfig {
    fn default() -> Self {
        DatagenConfig { scene: SceneConfig::default(), clips: 50 }
    }
}

impl DatagenConfig {
    pub fn load(path: &Path) -> Result<DatagenConfig, HarnessError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(json_err(path))
    }
}

/// Generate `config.clips` scenes and export them under `out`.
pub fn datagen(config: &DatagenConfig, out: &Path) -> Result<usize, HarnessError> {
    let samples = generate_dataset(&config.scene, config.clips)?;
    export_dataset(&samples, out)?;
    Ok(samples.len())
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

/// A parameter store plus the configuration that shaped it.
#[derive(Debug, Clone)]
pub struct Model {
    pub store: ParamStore,
    pub config: RunConfig,
}

/// Per-sample forward products.
pub struct SampleForward {
    /// One decoded (velocity, position) node pair per vehicle.
    pub decoded: Vec<DecodedNodes>,
    /// Raw three-output head nodes, aligned with `decoded`.
    pub raw: Vec<NodeId>,
    /// Dense flow prediction, present when the motion stream is active.
    pub flow: Option<NodeId>,
}

/// Batch objective graph.
pub struct BatchGraph {
    /// Mean of the per-sample totals.
    pub loss: NodeId,
    pub per_sample: Vec<TotalLossNodes>,
}

impl Model {
    pub fn msaf_config(config: &RunConfig) -> MsafConfig {
        MsafConfig {
            d_q: config.d_q,
            d_v: config.d_v,
            shortcut: config.ablation.shortcut,
            scaled_attention: config.scaled_attention,
        }
    }

    /// Width of the head input under the configured switches.
    pub fn head_input_dim(config: &RunConfig) -> usize {
        let enc = &config.encoder;
        if config.ablation.use_msaf {
            return MsafFusion::fused_dim(&Self::msaf_config(config), enc);
        }
        let mut dim = 0;
        if config.ablation.use_spatial {
            dim += enc.spatial_dim();
        }
        if config.ablation.use_motion {
            dim += enc.motion_channels;
        }
        if config.ablation.use_context {
            dim += enc.context_channels;
        }
        dim
    }

    /// Validate the config and register fresh weights from its seed.
    pub fn new(config: &RunConfig) -> Result<Model, HarnessError> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let enc = &config.encoder;
        if config.ablation.use_motion {
            MotionEncoder::register(enc, &mut store, &mut rng);
        }
        if config.ablation.use_context {
            ContextEncoder::register(enc, &mut store, &mut rng);
        }
        if config.ablation.use_spatial {
            SpatialEncoder::register(enc, &mut store, &mut rng);
        }
        if config.ablation.use_msaf {
            MsafFusion::register(&Self::msaf_config(config), enc, &mut store, &mut rng)?;
        }
        PredictionHead::register(&mut store, &mut rng, Self::head_input_dim(config));
        Ok(Model { store, config: config.clone() })
    }

    /// Rebuild a model around checkpointed weights.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Model, HarnessError> {
        ckpt.config.validate()?;
        Ok(Model { store: ckpt.weights.clone(), config: ckpt.config.clone() })
    }

    /// Run the active streams and head over every vehicle of one sample.
    /// `teacher_flow` feeds the ground-truth flow (when the sample has one)
    /// into the flow network's hint channels.
    pub fn forward_sample(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        sample: &FramePairSample,
        teacher_flow: bool,
    ) -> Result<SampleForward, HarnessError> {
        let ab = &self.config.ablation;
        let enc = &self.config.encoder;
        let size = sample.image_size();
        let hint = if teacher_flow { sample.flow_gt.as_ref() } else { None };
        let motion_frame = if ab.use_motion {
            Some(MotionEncoder::encode_frame(
                tape,
                binder,
                &self.store,
                &sample.image_prev,
                &sample.image_curr,
                hint,
            )?)
        } else {
            None
        };
        let context_frame = if ab.use_context {
            Some(ContextEncoder::encode_frame(tape, binder, &self.store, enc, &sample.image_curr)?)
        } else {
            None
        };
        let mut decoded = Vec::with_capacity(sample.boxes.len());
        let mut raw_nodes = Vec::with_capacity(sample.boxes.len());
        for bbox in &sample.boxes {
            // The world lift of the box uses the geometric reference depth:
            // it is available at inference time from the box alone.
            let f_sp = if ab.use_spatial {
                let z_hat = PredictionHead::reference_depth(bbox, &sample.intrinsics)?;
                Some(SpatialEncoder::spatial_encode(
                    tape,
                    binder,
                    &self.store,
                    bbox,
                    &sample.intrinsics,
                    size,
                    z_hat,
                )?)
            } else {
                None
            };
            let motion_feats = match &motion_frame {
                Some(frame) => Some(MotionEncoder::pool_box(
                    tape,
                    binder,
                    &self.store,
                    enc,
                    frame,
                    bbox,
                    size,
                )?),
                None => None,
            };
            let context_feats = match &context_frame {
                Some(frame) => Some(ContextEncoder::pool_box(
                    tape,
                    binder,
                    &self.store,
                    enc,
                    frame,
                    bbox,
                    size,
                )?),
                None => None,
            };
            let fused = if ab.use_msaf {
                let m = motion_feats.as_ref().expect("validated: attention requires motion");
                let c = context_feats.as_ref().expect("validated: attention requires context");
                let inputs = FusionInputs {
                    context_tokens: c.tokens,
                    motion_tokens: m.tokens,
                    f_sp: f_sp.expect("validated: attention requires the spatial stream"),
                    f_m: m.f_m,
                    f_c: c.f_c,
                };
                MsafFusion::fuse(tape, binder, &self.store, &Self::msaf_config(&self.config), &inputs)?
                    .fused
            } else {
                let mut parts = Vec::new();
                if let Some(sp) = f_sp {
                    parts.push(sp);
                }
                if let Some(m) = &motion_feats {
                    parts.push(m.f_m);
                }
                if let Some(c) = &context_feats {
                    parts.push(c.f_c);
                }
                if parts.len() == 1 {
                    parts[0]
                } else {
                    tape.concat(&parts, 0)
                }
            };
            let raw = PredictionHead::predict(tape, binder, &self.store, fused);
            decoded.push(PredictionHead::decode(tape, raw, bbox, &sample.intrinsics)?);
            raw_nodes.push(raw);
        }
        Ok(SampleForward {
            decoded,
            raw: raw_nodes,
            flow: motion_frame.map(|f| f.flow_pred),
        })
    }

    /// Loss-term switches implied by the ablation config. Flow smoothness
    /// needs a flow prediction, so it is tied to the motion stream.
    pub fn loss_options(&self) -> TotalLossOptions {
        let ab = &self.config.ablation;
        TotalLossOptions {
            variant: ab.loss_variant,
            use_smooth: ab.use_smooth && ab.use_motion,
            use_glc: ab.use_glc,
            glc_normalize: self.config.glc_normalize,
        }
    }

    /// Build the motion-pretraining objective: mean over samples of the
    /// dense flow-matching loss against each sample's reference flow. Only
    /// the motion stream is touched, so these epochs are cheap and anchor
    /// the flow head to real motion before the joint objective takes over.
    pub fn pretrain_graph(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        samples: &[&FramePairSample],
    ) -> Result<NodeId, HarnessError> {
        assert!(!samples.is_empty(), "pretrain_graph: empty batch");
        if !self.config.ablation.use_motion {
            return Err(HarnessError::Config(
                "flow pretraining requires the motion stream".into(),
            ));
        }
        let mut terms = Vec::with_capacity(samples.len());
        for sample in samples {
            let flow_gt = sample.flow_gt.as_ref().ok_or_else(|| {
                HarnessError::Config(
                    "flow pretraining requires reference flow on every sample".into(),
                )
            })?;
            let frame = MotionEncoder::encode_frame(
                tape,
                binder,
                &self.store,
                &sample.image_prev,
                &sample.image_curr,
                None,
            )?;
            terms.push(flow_matching_loss_node(
                tape,
                frame.flow_pred,
                flow_gt,
                self.config.loss_weights.epsilon,
            ));
        }
        let mut sum = terms[0];
        for t in &terms[1..] {
            sum = tape.add(sum, *t);
        }
        Ok(tape.scale(sum, 1.0 / samples.len() as f64))
    }

    /// Build the batch objective: mean over samples of the per-frame total.
    pub fn batch_graph(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        samples: &[&FramePairSample],
        teacher_flow: bool,
    ) -> Result<BatchGraph, HarnessError> {
        assert!(!samples.is_empty(), "batch_graph: empty batch");
        let opts = self.loss_options();
        let mut totals = Vec::with_capacity(samples.len());
        let mut per_sample = Vec::with_capacity(samples.len());
        for sample in samples {
            let fwd = self.forward_sample(tape, binder, sample, teacher_flow)?;
            // Without a motion stream there is no flow node; smoothness is
            // off in that case, so the placeholder is never touched.
            let flow = match fwd.flow {
                Some(f) => f,
                None => tape.constant_scalar(0.0),
            };
            let nodes = total_loss_node(
                tape,
                &fwd.decoded,
                &sample.states,
                flow,
                &sample.image_curr,
                &self.config.loss_weights,
                &opts,
            )?;
            totals.push(nodes.total);
            per_sample.push(nodes);
        }
        let mut sum = totals[0];
        for t in &totals[1..] {
            sum = tape.add(sum, *t);
        }
        let loss = tape.scale(sum, 1.0 / samples.len() as f64);
        Ok(BatchGraph { loss, per_sample })
    }
}

// ---------------------------------------------------------------------------
// Checkpointing
// ---------------------------------------------------------------------------

/// Serializable position of the data-shuffle RNG.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> RngState {
        RngState { seed: rng.get_seed(), word_pos: rng.get_word_pos() }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// Lowest epoch-mean loss seen during training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BestRecord {
    pub epoch: usize,
    pub loss: f64,
}

/// Complete, exactly-restorable training artifact.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: RunConfig,
    /// Number of completed epochs.
    pub epoch: usize,
    pub weights: ParamStore,
    /// Data-shuffle RNG position after the last completed epoch.
    pub rng: RngState,
    pub best: BestRecord,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<(), HarnessError> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(io_err(path))?;
        }
        let json = serde_json::to_string_pretty(self).map_err(json_err(path))?;
        fs::write(path, json).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Checkpoint, HarnessError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(json_err(path))
    }
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

/// One line of the training log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean batch loss over the epoch.
    pub loss: f64,
    /// Per-sample means of the unweighted loss terms.
    pub regression: f64,
    pub smoothness: f64,
    pub glc: f64,
    pub teacher_forced: bool,
    pub batches: usize,
    pub wall_ms: u64,
}

/// Run mini-batch Adam over the dataset in `data_dir`, writing the epoch
/// log and final checkpoint into `out_dir`.
pub fn train(config: &RunConfig, data_dir: &Path, out_dir: &Path) -> Result<Checkpoint, HarnessError> {
    config.validate()?;
    let samples = load_dataset(data_dir)?;
    if samples.is_empty() {
        return Err(HarnessError::Config(format!("dataset {} is empty", data_dir.display())));
    }
    let mut model = Model::new(config)?;
    let mut adam = Adam::new(config.learning_rate, &model.store);
    // Decorrelate the shuffle stream from the weight-init stream.
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x9e37_79b9_7f4a_7c15);
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let log_path = out_dir.join(TRAIN_LOG_FILE);
    let mut log = fs::File::create(&log_path).map_err(io_err(&log_path))?;
    let mut best = BestRecord { epoch: 0, loss: f64::INFINITY };
    let tail = config.average_tail_epochs.min(config.epochs);
    let mut tail_sum: Vec<f64> = Vec::new();
    let mut tail_count = 0usize;
    for epoch in 0..config.epochs {
        let started = Instant::now();
        let teacher = epoch < config.teacher_forced_epochs;
        let mut order: Vec<usize> = (0..samples.len()).collect();
        for i in (1..order.len()).rev() {
            let j = shuffle_rng.gen_range(0..=i);
            order.swap(i, j);
        }
        let mut loss_sum = 0.0;
        let mut reg_sum = 0.0;
        let mut smooth_sum = 0.0;
        let mut glc_sum = 0.0;
        let mut sample_count = 0usize;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let refs: Vec<&FramePairSample> = chunk.iter().map(|&i| &samples[i]).collect();
            let mut tape = Tape::new();
            let mut binder = Binder::new(&model.store, true);
            let graph = model.batch_graph(&mut tape, &mut binder, &refs, teacher)?;
            let loss_val = tape.scalar(graph.loss);
            if !loss_val.is_finite() {
                for (k, nodes) in graph.per_sample.iter().enumerate() {
                    let bd = nodes.breakdown(&tape);
                    let record = serde_json::json!({
                        "event": "abort",
                        "epoch": epoch,
                        "batch": batches,
                        "sample": chunk[k],
                        "breakdown": bd,
                    });
                    writeln!(log, "{record}").map_err(io_err(&log_path))?;
                }
                return Err(HarnessError::NonFiniteLoss { epoch, batch: batches, value: loss_val });
            }
            for nodes in &graph.per_sample {
                let bd = nodes.breakdown(&tape);
                reg_sum += bd.regression;
                smooth_sum += bd.smoothness;
                glc_sum += bd.glc;
                sample_count += 1;
            }
            let grads = tape.backward(graph.loss);
            let grad_list = binder.collect_grads(&grads);
            adam.step(&mut model.store, &grad_list);
            loss_sum += loss_val;
            batches += 1;
        }
        let record = EpochLog {
            epoch,
            loss: loss_sum / batches as f64,
            regression: reg_sum / sample_count as f64,
            smoothness: smooth_sum / sample_count as f64,
            glc: glc_sum / sample_count as f64,
            teacher_forced: teacher,
            batches,
            wall_ms: started.elapsed().as_millis() as u64,
        };
        if record.loss < best.loss {
            best = BestRecord { epoch, loss: record.loss };
        }
        let line = serde_json::to_string(&record).map_err(json_err(&log_path))?;
        writeln!(log, "{line}").map_err(io_err(&log_path))?;
        if tail > 0 && epoch + tail >= config.epochs {
            let flat = model.store.flat();
            if tail_sum.is_empty() {
                tail_sum = flat;
            } else {
                for (acc, w) in tail_sum.iter_mut().zip(&flat) {
                    *acc += w;
                }
            }
            tail_count += 1;
        }
    }
    if tail_count > 0 {
        let inv = 1.0 / tail_count as f64;
        for acc in &mut tail_sum {
            *acc *= inv;
        }
        model.store.set_flat(&tail_sum)?;
    }
    let checkpoint = Checkpoint {
        config: config.clone(),
        epoch: config.epochs,
        weights: model.store,
        rng: RngState::capture(&shuffle_rng),
        best,
    };
    checkpoint.save(&out_dir.join(CHECKPOINT_FILE))?;
    Ok(checkpoint)
}

/// Parse the epoch records of a training log, skipping event records.
pub fn read_train_log(path: &Path) -> Result<Vec<EpochLog>, HarnessError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut records = Vec::new();
    for line in std::io::BufReader::new(file).lines() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        if let Ok(rec) = serde_json::from_str::<EpochLog>(&line) {
            records.push(rec);
        }
    }
    if records.is_empty() {
        return Err(HarnessError::EmptyLog { path: path.to_path_buf() });
    }
    Ok(records)
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

/// One evaluated vehicle, for the per-vehicle CSV.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct PredictionRow {
    pub clip: usize,
    pub vehicle: usize,
    pub pred: VehicleState,
    pub target: VehicleState,
}

/// Run inference over a dataset and score it.
pub fn evaluate_model(
    model: &Model,
    samples: &[FramePairSample],
) -> Result<(EvalReport, Vec<PredictionRow>), HarnessError> {
    let mut predictions = Vec::new();
    let mut targets = Vec::new();
    let mut rows = Vec::new();
    for (clip, sample) in samples.iter().enumerate() {
        let mut tape = Tape::new();
        let mut binder = Binder::new(&model.store, false);
        let fwd = model.forward_sample(&mut tape, &mut binder, sample, false)?;
        for (vehicle, raw) in fwd.raw.iter().enumerate() {
            let value = tape.value(*raw);
            let raw3 = [value[IxDyn(&[0])], value[IxDyn(&[1])], value[IxDyn(&[2])]];
            let state =
                PredictionHead::decode_state(&raw3, &sample.boxes[vehicle], &sample.intrinsics)?;
            rows.push(PredictionRow { clip, vehicle, pred: state, target: sample.states[vehicle] });
            predictions.push(state);
            targets.push(sample.states[vehicle]);
        }
    }
    let report = metrics_evaluate(&predictions, &targets)?;
    Ok((report, rows))
}

/// Load a dataset and evaluate a checkpoint on it.
pub fn evaluate_checkpoint(
    ckpt: &Checkpoint,
    data_dir: &Path,
) -> Result<(EvalReport, Vec<PredictionRow>), HarnessError> {
    let model = Model::from_checkpoint(ckpt)?;
    let samples = load_dataset(data_dir)?;
    evaluate_model(&model, &samples)
}

/// Write the per-vehicle prediction CSV.
pub fn write_prediction_csv(rows: &[PredictionRow], path: &Path) -> Result<(), HarnessError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(path))?;
    }
    let mut out = String::from(
        "clip,vehicle,pred_vx,pred_vz,pred_px,pred_pz,pred_dist,gt_vx,gt_vz,gt_px,gt_pz,gt_dist\n",
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            r.clip,
            r.vehicle,
            r.pred.velocity.x,
            r.pred.velocity.z,
            r.pred.position.x,
            r.pred.position.z,
            r.pred.distance,
            r.target.velocity.x,
            r.target.velocity.z,
            r.target.position.x,
            r.target.position.z,
            r.target.distance,
        );
    }
    fs::write(path, out).map_err(io_err(path))
}

/// Baseline scores used to judge the trained model: a predictor that says
/// "not moving" for every vehicle, and one that reports the geometric
/// reference position with no learned residual.
pub fn baseline_report(samples: &[FramePairSample]) -> Result<EvalReport, HarnessError> {
    let mut predictions = Vec::new();
    let mut targets = Vec::new();
    for sample in samples {
        for (bbox, state) in sample.boxes.iter().zip(&sample.states) {
            let raw = [0.0, 0.0, 0.0];
            let pred = PredictionHead::decode_state(&raw, bbox, &sample.intrinsics)?;
            predictions.push(pred);
            targets.push(*state);
        }
    }
    Ok(metrics_evaluate(&predictions, &targets)?)
}

// ---------------------------------------------------------------------------
// Ablations
// ---------------------------------------------------------------------------

/// Switch names accepted as ablation axes.
pub const ABLATION_AXES: [&str; 8] = [
    "use_motion",
    "use_spatial",
    "use_context",
    "use_msaf",
    "loss_variant",
    "use_smooth",
    "use_glc",
    "shortcut",
];

fn apply_axis(config: &mut RunConfig, axis: &str, index: usize) {
    let ab = &mut config.ablation;
    match axis {
        "use_motion" => ab.use_motion = index == 0,
        "use_spatial" => ab.use_spatial = index == 0,
        "use_context" => ab.use_context = index == 0,
        "use_msaf" => ab.use_msaf = index == 0,
        "use_smooth" => ab.use_smooth = index == 0,
        "use_glc" => ab.use_glc = index == 0,
        "loss_variant" => {
            ab.loss_variant = [HVariant::L1, HVariant::SmoothL1, HVariant::Charbonnier][index]
        }
        "shortcut" => ab.shortcut = [Shortcut::Spatial, Shortcut::Context][index],
        other => unreachable!("unchecked axis {other}"),
    }
}

fn axis_cardinality(axis: &str) -> usize {
    match axis {
        "loss_variant" => 3,
        _ => 2,
    }
}

fn axis_value_name(axis: &str, index: usize) -> String {
    match axis {
        "loss_variant" => ["l1", "smooth_l1", "charbonnier"][index].to_string(),
        "shortcut" => ["spatial", "context"][index].to_string(),
        _ => ["true", "false"][index].to_string(),
    }
}

/// Expand an axes request into named run configs. `axes` is either a preset
/// (`table5`, `table6`) or a comma-separated list of switch names, expanded
/// as a cartesian product over each switch's values.
pub fn ablation_plan(
    base: &RunConfig,
    axes: &str,
) -> Result<Vec<(String, RunConfig)>, HarnessError> {
    let axes = axes.trim();
    match axes {
        "table5" => {
            let streams = [
                ("M", (true, false, false, false)),
                ("M+SP", (true, true, false, false)),
                ("M+SP+C", (true, true, true, false)),
                ("M+SP+C+MSAF", (true, true, true, true)),
            ];
            Ok(streams
                .iter()
                .map(|(name, (m, sp, c, msaf))| {
                    let mut cfg = base.clone();
                    cfg.ablation.use_motion = *m;
                    cfg.ablation.use_spatial = *sp;
                    cfg.ablation.use_context = *c;
                    cfg.ablation.use_msaf = *msaf;
                    (name.to_string(), cfg)
                })
                .collect())
        }
        "table6" => {
            let rows = [
                ("reg(l1)", HVariant::L1, false, false),
                ("reg(smooth_l1)", HVariant::SmoothL1, false, false),
                ("reg(charbonnier)", HVariant::Charbonnier, false, false),
                ("reg(charbonnier)+smooth", HVariant::Charbonnier, true, false),
                ("reg(charbonnier)+smooth+rel", HVariant::Charbonnier, true, true),
            ];
            Ok(rows
                .iter()
                .map(|(name, variant, smooth, glc)| {
                    let mut cfg = base.clone();
                    cfg.ablation.loss_variant = *variant;
                    cfg.ablation.use_smooth = *smooth;
                    cfg.ablation.use_glc = *glc;
                    (name.to_string(), cfg)
                })
                .collect())
        }
        _ => {
            let names: Vec<&str> =
                axes.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
            if names.is_empty() {
                return Err(HarnessError::Config("no ablation axes requested".into()));
            }
            for name in &names {
                if !ABLATION_AXES.contains(name) {
                    return Err(HarnessError::Config(format!(
                        "unknown ablation axis '{name}' (expected one of {})",
                        ABLATION_AXES.join(", ")
                    )));
                }
            }
            let mut plan: Vec<(String, RunConfig)> = vec![(String::new(), base.clone())];
            for axis in &names {
                let mut next = Vec::new();
                for (name, cfg) in &plan {
                    for idx in 0..axis_cardinality(axis) {
                        let mut cfg = cfg.clone();
                        apply_axis(&mut cfg, axis, idx);
                        let label = format!("{axis}={}", axis_value_name(axis, idx));
                        let name = if name.is_empty() {
                            label
                        } else {
                            format!("{name}; {label}")
                        };
                        next.push((name, cfg));
                    }
                }
                plan = next;
            }
            Ok(plan)
        }
    }
}

/// Dotted JSON paths where two configs differ.
pub fn config_diff(a: &RunConfig, b: &RunConfig) -> Vec<String> {
    fn walk(prefix: &str, a: &serde_json::Value, b: &serde_json::Value, out: &mut Vec<String>) {
        match (a, b) {
            (serde_json::Value::Object(ma), serde_json::Value::Object(mb)) => {
                for (key, va) in ma {
                    let path = if prefix.is_empty() {
                        key.clone()
                    } else {
                        format!("{prefix}.{key}")
                    };
                    match mb.get(key) {
                        Some(vb) => walk(&path, va, vb, out),
                        None => out.push(path),
                    }
                }
            }
            _ => {
                if a != b {
                    out.push(prefix.to_string());
                }
            }
        }
    }
    let va = serde_json::to_value(a).expect("config serializes");
    let vb = serde_json::to_value(b).expect("config serializes");
    let mut out = Vec::new();
    walk("", &va, &vb, &mut out);
    out
}

/// Outcome of one ablation run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRun {
    pub name: String,
    /// Config fields changed relative to the base config.
    pub diff: Vec<String>,
    pub report: Option<EvalReport>,
    pub final_train_loss: Option<f64>,
    pub error: Option<String>,
}

/// All runs of one ablation sweep.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationTable {
    pub axes: String,
    pub runs: Vec<AblationRun>,
}

impl AblationTable {
    /// Aligned text table, one row per run. Failed runs carry their error.
    pub fn to_table(&self) -> String {
        let headers =
            ["run", "status", "near", "medium", "far", "avg", "pos_mse", "abs_rel", "rmse"];
        let fmt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
        let mut rows: Vec<[String; 9]> = Vec::new();
        for run in &self.runs {
            let (status, r) = match (&run.report, &run.error) {
                (Some(r), _) => ("ok".to_string(), Some(r)),
                (None, Some(e)) => (format!("failed: {e}"), None),
                (None, None) => ("failed".to_string(), None),
            };
            rows.push([
                run.name.clone(),
                status,
                fmt(r.and_then(|r| r.mse_velocity.near)),
                fmt(r.and_then(|r| r.mse_velocity.medium)),
                fmt(r.and_then(|r| r.mse_velocity.far)),
                fmt(r.map(|r| r.mse_velocity.avg)),
                fmt(r.map(|r| r.mse_position)),
                fmt(r.map(|r| r.abs_rel)),
                fmt(r.map(|r| r.rmse)),
            ]);
        }
        let mut widths: Vec<usize> = headers.iter().map(|h| h.len()).collect();
        for row in &rows {
            for (i, cell) in row.iter().enumerate() {
                widths[i] = widths[i].max(cell.len());
            }
        }
        let mut out = String::new();
        let mut emit = |cells: &[String]| {
            let mut line = String::new();
            for (i, cell) in cells.iter().enumerate() {
                let _ = write!(line, "{:<width$}", cell, width = widths[i] + 2);
            }
            while line.ends_with(' ') {
                line.pop();
            }
            out.push_str(&line);
            out.push('\n');
        };
        emit(&headers.map(String::from));
        for row in &rows {
            emit(row.as_slice());
        }
        out
    }
}

/// Train and evaluate one run per planned config; failures are recorded in
/// the table without aborting the sweep. Artifacts land under `out_dir`.
pub fn ablate(
    base: &RunConfig,
    axes: &str,
    train_dir: &Path,
    eval_dir: &Path,
    out_dir: &Path,
) -> Result<AblationTable, HarnessError> {
    let plan = ablation_plan(base, axes)?;
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let mut runs = Vec::new();
    for (index, (name, config)) in plan.iter().enumerate() {
        let run_dir = out_dir.join(format!("run_{index:02}"));
        let outcome = (|| -> Result<(EvalReport, f64), HarnessError> {
            let ckpt = train(config, train_dir, &run_dir)?;
            let (report, _) = evaluate_checkpoint(&ckpt, eval_dir)?;
            Ok((report, ckpt.best.loss))
        })();
        let diff = config_diff(base, config);
        runs.push(match outcome {
            Ok((report, loss)) => AblationRun {
                name: name.clone(),
                diff,
                report: Some(report),
                final_train_loss: Some(loss),
                error: None,
            },
            Err(err) => AblationRun {
                name: name.clone(),
                diff,
                report: None,
                final_train_loss: None,
                error: Some(err.to_string()),
            },
        });
    }
    let table = AblationTable { axes: axes.trim().to_string(), runs };
    let json_path = out_dir.join("ablation.json");
    let json = serde_json::to_string_pretty(&table).map_err(json_err(&json_path))?;
    fs::write(&json_path, json).map_err(io_err(&json_path))?;
    let txt_path = out_dir.join("ablation.txt");
    fs::write(&txt_path, table.to_table()).map_err(io_err(&txt_path))?;
    Ok(table)
}

// ---------------------------------------------------------------------------
// Plotting
// ---------------------------------------------------------------------------

type Canvas = image::RgbImage;
type Color = image::Rgb<u8>;

const PLOT_W: u32 = 640;
const PLOT_H: u32 = 480;
const SCATTER_SIZE: u32 = 480;
const MARGIN: u32 = 48;
const AXIS_COLOR: Color = image::Rgb([60, 60, 60]);
const GRID_COLOR: Color = image::Rgb([210, 210, 210]);
const SERIES_COLORS: [Color; 4] = [
    image::Rgb([31, 119, 180]),
    image::Rgb([255, 127, 14]),
    image::Rgb([44, 160, 44]),
    image::Rgb([214, 39, 40]),
];

/// Data-to-pixel mapping for one plot panel.
#[derive(Debug, Clone, Copy)]
pub struct PlotArea {
    pub width: u32,
    pub height: u32,
    pub margin: u32,
    pub min_x: f64,
    pub max_x: f64,
    pub min_y: f64,
    pub max_y: f64,
}

impl PlotArea {
    pub fn new(width: u32, height: u32, x: (f64, f64), y: (f64, f64)) -> PlotArea {
        let pad = |lo: f64, hi: f64| -> (f64, f64) {
            if hi > lo {
                (lo, hi)
            } else {
                (lo - 0.5, lo + 0.5)
            }
        };
        let (min_x, max_x) = pad(x.0, x.1);
        let (min_y, max_y) = pad(y.0, y.1);
        PlotArea { width, height, margin: MARGIN, min_x, max_x, min_y, max_y }
    }

    /// Map a data point to pixel coordinates (y axis points up).
    pub fn map(&self, x: f64, y: f64) -> (i64, i64) {
        let inner_w = (self.width - 2 * self.margin) as f64;
        let inner_h = (self.height - 2 * self.margin) as f64;
        let tx = (x - self.min_x) / (self.max_x - self.min_x);
        let ty = (y - self.min_y) / (self.max_y - self.min_y);
        let px = self.margin as i64 + (tx * inner_w).round() as i64;
        let py = (self.height - self.margin) as i64 - (ty * inner_h).round() as i64;
        (px, py)
    }
}

fn blank(width: u32, height: u32) -> Canvas {
    Canvas::from_pixel(width, height, image::Rgb([255, 255, 255]))
}

fn put(img: &mut Canvas, x: i64, y: i64, color: Color) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, color);
    }
}

fn draw_line(img: &mut Canvas, mut x0: i64, mut y0: i64, x1: i64, y1: i64, color: Color) {
    let dx = (x1 - x0).abs();
    let dy = -(y1 - y0).abs();
    let sx = if x0 < x1 { 1 } else { -1 };
    let sy = if y0 < y1 { 1 } else { -1 };
    let mut err = dx + dy;
    loop {
        put(img, x0, y0, color);
        if x0 == x1 && y0 == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x0 += sx;
        }
        if e2 <= dx {
            err += dx;
            y0 += sy;
        }
    }
}

fn draw_disc(img: &mut Canvas, cx: i64, cy: i64, r: i64, color: Color) {
    for dy in -r..=r {
        for dx in -r..=r {
            if dx * dx + dy * dy <= r * r {
                put(img, cx + dx, cy + dy, color);
            }
        }
    }
}

fn draw_frame(img: &mut Canvas, area: &PlotArea) {
    let m = area.margin as i64;
    let w = area.width as i64;
    let h = area.height as i64;
    draw_line(img, m, h - m, w - m, h - m, AXIS_COLOR);
    draw_line(img, m, m, m, h - m, AXIS_COLOR);
    // Quarter grid lines.
    for k in 1..4 {
        let gx = m + k * (w - 2 * m) / 4;
        let gy = m + k * (h - 2 * m) / 4;
        draw_line(img, gx, m, gx, h - m, GRID_COLOR);
        draw_line(img, m, gy, w - m, gy, GRID_COLOR);
    }
    // Redraw axes over the grid.
    draw_line(img, m, h - m, w - m, h - m, AXIS_COLOR);
    draw_line(img, m, m, m, h - m, AXIS_COLOR);
}

fn save_png(img: &Canvas, path: &Path) -> Result<(), HarnessError> {
    img.save(path).map_err(|e| HarnessError::Io {
        path: path.to_path_buf(),
        source: std::io::Error::other(e.to_string()),
    })
}

/// Render training-loss curves (total plus unweighted terms) from a log.
pub fn plot_log(log_path: &Path, out_dir: &Path) -> Result<Vec<PathBuf>, HarnessError> {
    let records = read_train_log(log_path)?;
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let series: [(&str, Vec<f64>); 4] = [
        ("loss", records.iter().map(|r| r.loss).collect()),
        ("regression", records.iter().map(|r| r.regression).collect()),
        ("smoothness", records.iter().map(|r| r.smoothness).collect()),
        ("glc", records.iter().map(|r| r.glc).collect()),
    ];
    let max_y = series
        .iter()
        .flat_map(|(_, v)| v.iter())
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max)
        .max(1e-12);
    let min_y = 0.0;
    let max_x = (records.len() - 1).max(1) as f64;
    let area = PlotArea::new(PLOT_W, PLOT_H, (0.0, max_x), (min_y, max_y));
    let mut img = blank(PLOT_W, PLOT_H);
    draw_frame(&mut img, &area);
    for (si, (_, values)) in series.iter().enumerate() {
        let color = SERIES_COLORS[si % SERIES_COLORS.len()];
        for pair in values.windows(2).enumerate() {
            let (i, w) = pair;
            let (x0, y0) = area.map(i as f64, w[0]);
            let (x1, y1) = area.map((i + 1) as f64, w[1]);
            draw_line(&mut img, x0, y0, x1, y1, color);
        }
        if values.len() == 1 {
            let (x, y) = area.map(0.0, values[0]);
            draw_disc(&mut img, x, y, 2, color);
        }
    }
    let path = out_dir.join("loss_curve.png");
    save_png(&img, &path)?;
    Ok(vec![path])
}

fn parse_csv_rows(path: &Path) -> Result<Vec<Vec<f64>>, HarnessError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 || line.trim().is_empty() {
            continue;
        }
        let fields: Result<Vec<f64>, _> = line.split(',').map(str::parse::<f64>).collect();
        match fields {
            Ok(f) => rows.push(f),
            Err(e) => {
                return Err(HarnessError::Config(format!(
                    "bad CSV line {} in {}: {e}",
                    i + 1,
                    path.display()
                )))
            }
        }
    }
    Ok(rows)
}

fn scatter_plot(pairs: &[(f64, f64)], path: &Path) -> Result<(), HarnessError> {
    let lo = pairs.iter().flat_map(|(a, b)| [*a, *b]).fold(f64::INFINITY, f64::min);
    let hi = pairs.iter().flat_map(|(a, b)| [*a, *b]).fold(f64::NEG_INFINITY, f64::max);
    let area = PlotArea::new(SCATTER_SIZE, SCATTER_SIZE, (lo, hi), (lo, hi));
    let mut img = blank(SCATTER_SIZE, SCATTER_SIZE);
    draw_frame(&mut img, &area);
    // Identity line: perfect predictions fall on it.
    let (x0, y0) = area.map(area.min_x, area.min_y);
    let (x1, y1) = area.map(area.max_x, area.max_y);
    draw_line(&mut img, x0, y0, x1, y1, GRID_COLOR);
    for (gt, pred) in pairs {
        let (px, py) = area.map(*gt, *pred);
        draw_disc(&mut img, px, py, 2, SERIES_COLORS[0]);
    }
    save_png(&img, path)
}

/// Render a bucket-MSE bar chart from a report, plus predicted-vs-target
/// scatters when the report's sibling CSV (same stem, `.csv`) exists.
pub fn plot_report(report_path: &Path, out_dir: &Path) -> Result<Vec<PathBuf>, HarnessError> {
    let text = fs::read_to_string(report_path).map_err(io_err(report_path))?;
    let report: EvalReport = serde_json::from_str(&text).map_err(json_err(report_path))?;
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let mut files = Vec::new();

    let bars = [
        report.mse_velocity.near,
        report.mse_velocity.medium,
        report.mse_velocity.far,
        Some(report.mse_velocity.avg),
    ];
    let max_y = bars.iter().flatten().cloned().fold(f64::NEG_INFINITY, f64::max).max(1e-12);
    let area = PlotArea::new(PLOT_W, PLOT_H, (0.0, 4.0), (0.0, max_y));
    let mut img = blank(PLOT_W, PLOT_H);
    draw_frame(&mut img, &area);
    for (i, bar) in bars.iter().enumerate() {
        if let Some(v) = bar {
            let (x0, y0) = area.map(i as f64 + 0.2, 0.0);
            let (x1, y1) = area.map(i as f64 + 0.8, *v);
            for x in x0.min(x1)..=x0.max(x1) {
                draw_line(&mut img, x, y1, x, y0, SERIES_COLORS[i % SERIES_COLORS.len()]);
            }
        }
    }
    let bars_path = out_dir.join("bucket_mse.png");
    save_png(&img, &bars_path)?;
    files.push(bars_path);

    let csv = report_path.with_extension("csv");
    if csv.exists() {
        let rows = parse_csv_rows(&csv)?;
        // Columns: clip, vehicle, pred vx/vz/px/pz/dist, gt vx/vz/px/pz/dist.
        let velocity: Vec<(f64, f64)> = rows
            .iter()
            .flat_map(|r| [(r[7], r[2]), (r[8], r[3])])
            .collect();
        let position: Vec<(f64, f64)> = rows
            .iter()
            .flat_map(|r| [(r[9], r[4]), (r[10], r[5])])
            .collect();
        if !velocity.is_empty() {
            let vp = out_dir.join("scatter_velocity.png");
            scatter_plot(&velocity, &vp)?;
            files.push(vp);
            let pp = out_dir.join("scatter_position.png");
            scatter_plot(&position, &pp)?;
            files.push(pp);
        }
    }
    Ok(files)
}

/// Manifest of emitted plot files.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlotManifest {
    pub source: PathBuf,
    pub files: Vec<PathBuf>,
}

/// Plot from a report or a log (exactly one), then write the manifest.
pub fn plot(
    report: Option<&Path>,
    log: Option<&Path>,
    out_dir: &Path,
) -> Result<PlotManifest, HarnessError> {
    let (source, files) = match (report, log) {
        (Some(r), None) => (r.to_path_buf(), plot_report(r, out_dir)?),
        (None, Some(l)) => (l.to_path_buf(), plot_log(l, out_dir)?),
        _ => {
            return Err(HarnessError::Config(
                "pass exactly one of --report or --log".into(),
            ))
        }
    };
    let manifest = PlotManifest { source, files };
    let path = out_dir.join(PLOT_MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest).map_err(json_err(&path))?;
    fs::write(&path, json).map_err(io_err(&path))?;
    Ok(manifest)
}
