//! The model family: multi-scale convolutional-Transformer variants, the
//! vanilla-Transformer and stacked-LSTM baselines, and a registry that maps
//! variant names to wired architectures.

pub mod attention;
pub mod checkpoint;
pub mod conv;
pub mod gradcheck;
pub mod layers;
pub mod lstm;
pub mod store;

use ndarray::{s, Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use attention::{Encoder, EncoderLayerCache};
use conv::{ConvCache, MultiScaleConv};
use layers::{relu_backward, relu_forward, Linear, PositionalEncoding};
use lstm::{LstmCache, LstmStack};
use store::ParamStore;

pub const EEG_POWER_DIM: usize = 6;
pub const HRV_TIME_DIM: usize = 6;
pub const HRV_FREQ_DIM: usize = 5;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("unknown variant: {0}")]
    UnknownVariant(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("sequence length {got} exceeds positional-encoding maximum {max}")]
    SequenceTooLong { got: usize, max: usize },
    #[error("segment length {t} shorter than kernel {k}")]
    SegmentTooShort { t: usize, k: usize },
    #[error("model has no input streams")]
    EmptyStreams,
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),
}

/// Architecture registry, in report order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelVariant {
    VanillaRaw,
    VanillaFeat,
    VanillaMixed,
    LstmMixed,
    SingleScale,
    MsShcShs,
    MsScShs,
    MsScSs,
}

impl ModelVariant {
    pub fn all() -> [ModelVariant; 8] {
        [
            ModelVariant::VanillaRaw,
            ModelVariant::VanillaFeat,
            ModelVariant::VanillaMixed,
            ModelVariant::LstmMixed,
            ModelVariant::SingleScale,
            ModelVariant::MsShcShs,
            ModelVariant::MsScShs,
            ModelVariant::MsScSs,
        ]
    }

    /// Report-table name.
    pub fn display_name(&self) -> &'static str {
        match self {
            ModelVariant::VanillaRaw => "Vanilla Transformer (only raw)",
            ModelVariant::VanillaFeat => "Vanilla Transformer (only features)",
            ModelVariant::VanillaMixed => "Vanilla Transformer (mixed)",
            ModelVariant::LstmMixed => "Stacked LSTM (mixed)",
            ModelVariant::SingleScale => "CogPSGFormer single-scale (mixed)",
            ModelVariant::MsShcShs => "CogPSGFormer MS-SHC-SHS (mixed)",
            ModelVariant::MsScShs => "CogPSGFormer MS-SC-SHS (mixed)",
            ModelVariant::MsScSs => "CogPSGFormer MS-SC-SS (mixed)",
        }
    }

    pub fn cli_name(&self) -> &'static str {
        match self {
            ModelVariant::VanillaRaw => "vanilla-raw",
            ModelVariant::VanillaFeat => "vanilla-feat",
            ModelVariant::VanillaMixed => "vanilla-mixed",
            ModelVariant::LstmMixed => "lstm-mixed",
            ModelVariant::SingleScale => "single-scale",
            ModelVariant::MsShcShs => "ms-shc-shs",
            ModelVariant::MsScShs => "ms-sc-shs",
            ModelVariant::MsScSs => "ms-sc-ss",
        }
    }

    pub fn from_cli_name(name: &str) -> Result<ModelVariant, ModelError> {
        ModelVariant::all()
            .into_iter()
            .find(|v| v.cli_name() == name)
            .ok_or_else(|| ModelError::UnknownVariant(name.to_string()))
    }

    pub fn uses_raw(&self) -> bool {
        !matches!(self, ModelVariant::VanillaFeat)
    }

    pub fn uses_features(&self) -> bool {
        !matches!(self, ModelVariant::VanillaRaw)
    }
}

/// Transformer settings for one stream family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StreamConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    pub dropout: f64,
}

impl Default for StreamConfig {
    fn default() -> Self {
        StreamConfig { d_model: 64, n_layers: 3, n_heads: 4, d_ffn: 92, dropout: 0.05 }
    }
}

/// Full architecture description. Defaults are the selected reference
/// values: raw streams 64-dim with 3 layers, feature streams 8-dim with 4
/// layers, 4 heads everywhere, FFN widths 92/8, dropout 0.05, classifier
/// width 92, kernel sizes 3 and 7.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub variant: ModelVariant,
    pub raw: StreamConfig,
    pub feat: StreamConfig,
    pub kernel_sizes: Vec<usize>,
    /// Kernel used by the single-scale variant.
    pub single_scale_kernel: usize,
    pub classifier_dim: usize,
    pub lstm_hidden: usize,
    pub lstm_layers: usize,
    pub max_seq_len: usize,
    /// Samples per raw EEG segment (sets the vanilla embedding width).
    pub eeg_segment_len: usize,
    /// Samples per raw ECG segment.
    pub ecg_segment_len: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            variant: ModelVariant::MsScShs,
            raw: StreamConfig::default(),
            feat: StreamConfig { d_model: 8, n_layers: 4, n_heads: 4, d_ffn: 8, dropout: 0.05 },
            kernel_sizes: vec![3, 7],
            single_scale_kernel: 7,
            classifier_dim: 92,
            lstm_hidden: 64,
            lstm_layers: 2,
            max_seq_len: 1200,
            eeg_segment_len: 2100,
            ecg_segment_len: 8400,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        for (name, sc) in [("raw", &self.raw), ("feat", &self.feat)] {
            if sc.d_model % sc.n_heads != 0 {
                return Err(ModelError::DimMismatch(format!(
                    "{name}: d_model {} not divisible by {} heads",
                    sc.d_model, sc.n_heads
                )));
            }
            if !(0.0..1.0).contains(&sc.dropout) {
                return Err(ModelError::DimMismatch(format!("{name}: dropout out of [0,1)")));
            }
        }
        let multi_scale = matches!(
            self.variant,
            ModelVariant::MsShcShs | ModelVariant::MsScShs | ModelVariant::MsScSs
        );
        if multi_scale && self.raw.d_model % self.kernel_sizes.len() != 0 {
            return Err(ModelError::DimMismatch(format!(
                "raw d_model {} not divisible by {} scales",
                self.raw.d_model,
                self.kernel_sizes.len()
            )));
        }
        if self.variant == ModelVariant::MsShcShs && self.ecg_segment_len % self.eeg_segment_len != 0 {
            return Err(ModelError::DimMismatch(
                "merged path needs ECG segment length divisible by EEG segment length".into(),
            ));
        }
        Ok(())
    }
}

/// Which batch tensor feeds a stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamInput {
    EegRaw,
    EcgRaw,
    /// EEG and ECG re-segmented onto a common grid and concatenated along
    /// the segment axis.
    MergedRaw,
    EegPower,
    HrvTime,
    HrvFreq,
}

enum StreamKind {
    Conv { conv: MultiScaleConv, pe: PositionalEncoding, enc: Encoder },
    Vanilla { embed: Linear, pe: PositionalEncoding, enc: Encoder },
    Lstm { embed: Linear, lstm: LstmStack },
}

struct Stream {
    name: String,
    input: StreamInput,
    kind: StreamKind,
    d_out: usize,
}

/// A wired architecture with its parameter store.
pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    streams: Vec<Stream>,
    clf1: Linear,
    clf2: Linear,
}

/// Per-subject input tensors, batched on the leading axis.
#[derive(Debug, Clone)]
pub struct BatchInputs {
    pub eeg_raw: Array3<f64>,
    pub ecg_raw: Array3<f64>,
    pub eeg_power: Array3<f64>,
    pub hrv_time: Array3<f64>,
    pub hrv_freq: Array3<f64>,
}

impl BatchInputs {
    pub fn batch_size(&self) -> usize {
        self.eeg_raw.dim().0
    }
}

pub struct ForwardOutput {
    pub probs: Vec<f64>,
    pub logits: Vec<f64>,
}

struct StreamTrace {
    enc_caches: Vec<EncoderLayerCache>,
    conv_cache: Option<ConvCache>,
    lstm_cache: Option<LstmCache>,
    /// Merged conv input, rebuilt tensors being batch-derived otherwise.
    merged_input: Option<Array3<f64>>,
    seq_len: usize,
}

/// Backward bookkeeping from one training forward pass.
pub struct Trace {
    streams: Vec<StreamTrace>,
    fused: Array2<f64>,
    clf_pre: Array2<f64>,
    clf_hidden: Array2<f64>,
}

/// Builds the architecture for a config; parameter initialization is a pure
/// function of `cfg.seed` and the wiring order.
pub fn build_architecture(cfg: &ModelConfig) -> Result<Model, ModelError> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let mut streams: Vec<Stream> = Vec::new();

    let raw = &cfg.raw;
    let feat = &cfg.feat;

    let conv_stream = |store: &mut ParamStore,
                           rng: &mut ChaCha12Rng,
                           name: &str,
                           input: StreamInput,
                           kernels: &[usize],
                           shared: bool|
     -> Stream {
        let d_conv = raw.d_model / kernels.len();
        let conv = MultiScaleConv::new(store, rng, &format!("{name}.conv"), d_conv, kernels, shared, raw.dropout);
        let pe = PositionalEncoding::new(cfg.max_seq_len, raw.d_model);
        let enc = Encoder::new(
            store,
            rng,
            &format!("{name}.enc"),
            raw.d_model,
            raw.n_heads,
            raw.d_ffn,
            raw.n_layers,
            raw.dropout,
        );
        Stream { name: name.into(), input, kind: StreamKind::Conv { conv, pe, enc }, d_out: raw.d_model }
    };

    let vanilla_stream = |store: &mut ParamStore,
                          rng: &mut ChaCha12Rng,
                          name: &str,
                          input: StreamInput,
                          d_in: usize,
                          sc: &StreamConfig|
     -> Stream {
        let embed = Linear::new(store, rng, &format!("{name}.embed"), d_in, sc.d_model);
        let pe = PositionalEncoding::new(cfg.max_seq_len, sc.d_model);
        let enc = Encoder::new(
            store,
            rng,
            &format!("{name}.enc"),
            sc.d_model,
            sc.n_heads,
            sc.d_ffn,
            sc.n_layers,
            sc.dropout,
        );
        Stream { name: name.into(), input, kind: StreamKind::Vanilla { embed, pe, enc }, d_out: sc.d_model }
    };

    let lstm_stream = |store: &mut ParamStore,
                       rng: &mut ChaCha12Rng,
                       name: &str,
                       input: StreamInput,
                       d_in: usize,
                       d_embed: usize|
     -> Stream {
        let embed = Linear::new(store, rng, &format!("{name}.embed"), d_in, d_embed);
        let lstm = LstmStack::new(store, rng, &format!("{name}.lstm"), d_embed, cfg.lstm_hidden, cfg.lstm_layers);
        Stream { name: name.into(), input, kind: StreamKind::Lstm { embed, lstm }, d_out: cfg.lstm_hidden }
    };

    match cfg.variant {
        ModelVariant::VanillaRaw => {
            streams.push(vanilla_stream(&mut store, &mut rng, "eeg", StreamInput::EegRaw, cfg.eeg_segment_len, raw));
            streams.push(vanilla_stream(&mut store, &mut rng, "ecg", StreamInput::EcgRaw, cfg.ecg_segment_len, raw));
        }
        ModelVariant::VanillaFeat => {
            streams.push(vanilla_stream(&mut store, &mut rng, "power", StreamInput::EegPower, EEG_POWER_DIM, feat));
            streams.push(vanilla_stream(&mut store, &mut rng, "hrv_time", StreamInput::HrvTime, HRV_TIME_DIM, feat));
            streams.push(vanilla_stream(&mut store, &mut rng, "hrv_freq", StreamInput::HrvFreq, HRV_FREQ_DIM, feat));
        }
        ModelVariant::VanillaMixed => {
            streams.push(vanilla_stream(&mut store, &mut rng, "eeg", StreamInput::EegRaw, cfg.eeg_segment_len, raw));
            streams.push(vanilla_stream(&mut store, &mut rng, "ecg", StreamInput::EcgRaw, cfg.ecg_segment_len, raw));
            streams.push(vanilla_stream(&mut store, &mut rng, "power", StreamInput::EegPower, EEG_POWER_DIM, feat));
            streams.push(vanilla_stream(&mut store, &mut rng, "hrv_time", StreamInput::HrvTime, HRV_TIME_DIM, feat));
            streams.push(vanilla_stream(&mut store, &mut rng, "hrv_freq", StreamInput::HrvFreq, HRV_FREQ_DIM, feat));
        }
        ModelVariant::LstmMixed => {
            streams.push(lstm_stream(&mut store, &mut rng, "eeg", StreamInput::EegRaw, cfg.eeg_segment_len, raw.d_model));
            streams.push(lstm_stream(&mut store, &mut rng, "ecg", StreamInput::EcgRaw, cfg.ecg_segment_len, raw.d_model));
            streams.push(lstm_stream(&mut store, &mut rng, "power", StreamInput::EegPower, EEG_POWER_DIM, feat.d_model));
            streams.push(lstm_stream(&mut store, &mut rng, "hrv_time", StreamInput::HrvTime, HRV_TIME_DIM, feat.d_model));
            streams.push(lstm_stream(&mut store, &mut rng, "hrv_freq", StreamInput::HrvFreq, HRV_FREQ_DIM, feat.d_model));
        }
        ModelVariant::SingleScale => {
            let kernel = [cfg.single_scale_kernel];
            streams.push(conv_stream(&mut store, &mut rng, "eeg", StreamInput::EegRaw, &kernel, true));
            streams.push(conv_stream(&mut store, &mut rng, "ecg", StreamInput::EcgRaw, &kernel, true));
            push_feature_streams(&mut streams, &mut store, &mut rng, feat, cfg, vanilla_stream);
        }
        ModelVariant::MsShcShs => {
            streams.push(conv_stream(&mut store, &mut rng, "merged", StreamInput::MergedRaw, &cfg.kernel_sizes, true));
            push_feature_streams(&mut streams, &mut store, &mut rng, feat, cfg, vanilla_stream);
        }
        ModelVariant::MsScShs => {
            streams.push(conv_stream(&mut store, &mut rng, "eeg", StreamInput::EegRaw, &cfg.kernel_sizes, true));
            streams.push(conv_stream(&mut store, &mut rng, "ecg", StreamInput::EcgRaw, &cfg.kernel_sizes, true));
            push_feature_streams(&mut streams, &mut store, &mut rng, feat, cfg, vanilla_stream);
        }
        ModelVariant::MsScSs => {
            streams.push(conv_stream(&mut store, &mut rng, "eeg", StreamInput::EegRaw, &cfg.kernel_sizes, false));
            streams.push(conv_stream(&mut store, &mut rng, "ecg", StreamInput::EcgRaw, &cfg.kernel_sizes, false));
            push_feature_streams(&mut streams, &mut store, &mut rng, feat, cfg, vanilla_stream);
        }
    }
    if streams.is_empty() {
        return Err(ModelError::EmptyStreams);
    }

    let d_total: usize = streams.iter().map(|s| s.d_out).sum();
    let clf1 = Linear::new(&mut store, &mut rng, "clf1", d_total, cfg.classifier_dim);
    let clf2 = Linear::new(&mut store, &mut rng, "clf2", cfg.classifier_dim, 1);

    Ok(Model { cfg: cfg.clone(), store, streams, clf1, clf2 })
}

fn push_feature_streams(
    streams: &mut Vec<Stream>,
    store: &mut ParamStore,
    rng: &mut ChaCha12Rng,
    feat: &StreamConfig,
    _cfg: &ModelConfig,
    make: impl Fn(&mut ParamStore, &mut ChaCha12Rng, &str, StreamInput, usize, &StreamConfig) -> Stream,
) {
    streams.push(make(store, rng, "power", StreamInput::EegPower, EEG_POWER_DIM, feat));
    streams.push(make(store, rng, "hrv_time", StreamInput::HrvTime, HRV_TIME_DIM, feat));
    streams.push(make(store, rng, "hrv_freq", StreamInput::HrvFreq, HRV_FREQ_DIM, feat));
}

impl Model {
    pub fn n_parameters(&self) -> usize {
        self.store.n_trainable()
    }

    /// Total fused representation width (sum of stream dimensions).
    pub fn fused_dim(&self) -> usize {
        self.streams.iter().map(|s| s.d_out).sum()
    }

    fn merged_input(&self, batch: &BatchInputs) -> Result<Array3<f64>, ModelError> {
        let (b, s_eeg, t_eeg) = batch.eeg_raw.dim();
        let (b2, s_ecg, t_ecg) = batch.ecg_raw.dim();
        if b != b2 {
            return Err(ModelError::ShapeMismatch("EEG/ECG batch sizes differ".into()));
        }
        if t_ecg % t_eeg != 0 {
            return Err(ModelError::ShapeMismatch(format!(
                "ECG segment length {t_ecg} not a multiple of EEG segment length {t_eeg}"
            )));
        }
        let chunks = t_ecg / t_eeg;
        let s_total = s_eeg + s_ecg * chunks;
        let mut merged = Array3::zeros((b, s_total, t_eeg));
        merged
            .slice_mut(s![.., ..s_eeg, ..])
            .assign(&batch.eeg_raw);
        let reshaped = batch
            .ecg_raw
            .to_shape((b, s_ecg * chunks, t_eeg))
            .map_err(|e| ModelError::ShapeMismatch(e.to_string()))?;
        merged.slice_mut(s![.., s_eeg.., ..]).assign(&reshaped);
        Ok(merged)
    }

    fn stream_input<'a>(
        &self,
        batch: &'a BatchInputs,
        input: StreamInput,
    ) -> Result<ndarray::CowArray<'a, f64, ndarray::Ix3>, ModelError> {
        Ok(match input {
            StreamInput::EegRaw => batch.eeg_raw.view().into(),
            StreamInput::EcgRaw => batch.ecg_raw.view().into(),
            StreamInput::MergedRaw => self.merged_input(batch)?.into(),
            StreamInput::EegPower => batch.eeg_power.view().into(),
            StreamInput::HrvTime => batch.hrv_time.view().into(),
            StreamInput::HrvFreq => batch.hrv_freq.view().into(),
        })
    }

    /// Forward pass. `train` selects batch statistics, dropout (when a
    /// generator is supplied) and running-moment updates; eval mode is
    /// deterministic. Returns probabilities in (0,1), one per subject, and
    /// a backward trace when `keep_trace` is set.
    pub fn forward(
        &mut self,
        batch: &BatchInputs,
        train: bool,
        mut rng: Option<&mut ChaCha12Rng>,
        keep_trace: bool,
    ) -> Result<(ForwardOutput, Option<Trace>), ModelError> {
        let b = batch.batch_size();
        self.validate_batch(batch)?;

        let mut fused = Array2::zeros((b, self.fused_dim()));
        let mut col = 0usize;
        let mut stream_traces = Vec::with_capacity(self.streams.len());

        for stream in &self.streams {
            let input = self.stream_input(batch, stream.input)?;
            let (last, trace) = match &stream.kind {
                StreamKind::Conv { conv, pe, enc } => {
                    let input_owned: Array3<f64>;
                    let merged_keep: Option<Array3<f64>>;
                    if stream.input == StreamInput::MergedRaw {
                        input_owned = input.into_owned();
                        merged_keep = keep_trace.then(|| input_owned.clone());
                    } else {
                        input_owned = input.into_owned();
                        merged_keep = None;
                    }
                    let (embedded, conv_cache) =
                        conv.forward(&mut self.store, &input_owned, train, rng.as_deref_mut(), keep_trace)?;
                    let mut h = embedded;
                    pe.apply(&mut h)?;
                    let (h, enc_caches) = enc.forward(&self.store, h, rng.as_deref_mut(), keep_trace);
                    let seq_len = h.dim().1;
                    let last = h.slice(s![.., seq_len - 1, ..]).to_owned();
                    (
                        last,
                        StreamTrace { enc_caches, conv_cache, lstm_cache: None, merged_input: merged_keep, seq_len },
                    )
                }
                StreamKind::Vanilla { embed, pe, enc } => {
                    let (bb, ss, ff) = input.dim();
                    if ff != embed.d_in {
                        return Err(ModelError::ShapeMismatch(format!(
                            "stream {}: expected feature width {}, got {ff}",
                            stream.name, embed.d_in
                        )));
                    }
                    let flat = input.to_shape((bb * ss, ff)).unwrap().to_owned();
                    let emb = embed.forward2(&self.store, &flat);
                    let mut h = emb.into_shape_with_order((bb, ss, embed.d_out)).unwrap();
                    pe.apply(&mut h)?;
                    let (h, enc_caches) = enc.forward(&self.store, h, rng.as_deref_mut(), keep_trace);
                    let last = h.slice(s![.., ss - 1, ..]).to_owned();
                    (
                        last,
                        StreamTrace { enc_caches, conv_cache: None, lstm_cache: None, merged_input: None, seq_len: ss },
                    )
                }
                StreamKind::Lstm { embed, lstm } => {
                    let (bb, ss, ff) = input.dim();
                    if ff != embed.d_in {
                        return Err(ModelError::ShapeMismatch(format!(
                            "stream {}: expected feature width {}, got {ff}",
                            stream.name, embed.d_in
                        )));
                    }
                    let flat = input.to_shape((bb * ss, ff)).unwrap().to_owned();
                    let emb = embed.forward2(&self.store, &flat);
                    let h = emb.into_shape_with_order((bb, ss, embed.d_out)).unwrap();
                    let (last, lstm_cache) = lstm.forward(&self.store, &h, keep_trace);
                    (
                        last,
                        StreamTrace { enc_caches: Vec::new(), conv_cache: None, lstm_cache, merged_input: None, seq_len: ss },
                    )
                }
            };
            fused.slice_mut(s![.., col..col + stream.d_out]).assign(&last);
            col += stream.d_out;
            stream_traces.push(trace);
        }

        let clf_pre = self.clf1.forward2(&self.store, &fused);
        let mut hidden = clf_pre.clone();
        relu_forward(&mut hidden);
        let logits_mat = self.clf2.forward2(&self.store, &hidden);
        let logits: Vec<f64> = logits_mat.column(0).to_vec();
        let probs: Vec<f64> = logits.iter().map(|z| sigmoid(*z)).collect();

        let trace = keep_trace.then_some(Trace {
            streams: stream_traces,
            fused,
            clf_pre,
            clf_hidden: hidden,
        });
        Ok((ForwardOutput { probs, logits }, trace))
    }

    /// Convenience eval-mode forward.
    pub fn predict(&mut self, batch: &BatchInputs) -> Result<Vec<f64>, ModelError> {
        Ok(self.forward(batch, false, None, false)?.0.probs)
    }

    /// Backward pass from per-subject logit gradients; accumulates into the
    /// store's gradient buffers.
    pub fn backward(&mut self, batch: &BatchInputs, trace: &Trace, dlogits: &[f64]) -> Result<(), ModelError> {
        let b = trace.fused.nrows();
        assert_eq!(dlogits.len(), b);

        let dlogits_mat = Array2::from_shape_fn((b, 1), |(i, _)| dlogits[i]);
        let mut dhidden = self.clf2.backward2(&mut self.store, &trace.clf_hidden, &dlogits_mat);
        relu_backward(&trace.clf_pre, &mut dhidden);
        let dfused = self.clf1.backward2(&mut self.store, &trace.fused, &dhidden);

        let mut col = 0usize;
        for (stream, strace) in self.streams.iter().zip(&trace.streams) {
            let dlast = dfused.slice(s![.., col..col + stream.d_out]).to_owned();
            col += stream.d_out;
            let s_len = strace.seq_len;

            match &stream.kind {
                StreamKind::Conv { conv, enc, .. } => {
                    let mut dh = Array3::zeros((b, s_len, stream.d_out));
                    dh.slice_mut(s![.., s_len - 1, ..]).assign(&dlast);
                    let dembed = enc.backward(&mut self.store, &strace.enc_caches, dh);
                    // Positional encoding backward is the identity.
                    let input_store;
                    let x: &Array3<f64> = match stream.input {
                        StreamInput::MergedRaw => strace.merged_input.as_ref().expect("merged input cached"),
                        other => {
                            input_store = self.stream_input(batch, other)?.into_owned();
                            &input_store
                        }
                    };
                    conv.backward(&mut self.store, x, strace.conv_cache.as_ref().unwrap(), &dembed);
                }
                StreamKind::Vanilla { embed, enc, .. } => {
                    let mut dh = Array3::zeros((b, s_len, stream.d_out));
                    dh.slice_mut(s![.., s_len - 1, ..]).assign(&dlast);
                    let dembed = enc.backward(&mut self.store, &strace.enc_caches, dh);
                    let input = self.stream_input(batch, stream.input)?;
                    let (bb, ss, ff) = input.dim();
                    let flat = input.to_shape((bb * ss, ff)).unwrap().to_owned();
                    let dflat = dembed.to_shape((bb * ss, embed.d_out)).unwrap().to_owned();
                    embed.backward2(&mut self.store, &flat, &dflat);
                }
                StreamKind::Lstm { embed, lstm } => {
                    let demb = lstm.backward(&mut self.store, strace.lstm_cache.as_ref().unwrap(), &dlast);
                    let input = self.stream_input(batch, stream.input)?;
                    let (bb, ss, ff) = input.dim();
                    let flat = input.to_shape((bb * ss, ff)).unwrap().to_owned();
                    let dflat = demb.to_shape((bb * ss, embed.d_out)).unwrap().to_owned();
                    embed.backward2(&mut self.store, &flat, &dflat);
                }
            }
        }
        Ok(())
    }

    fn validate_batch(&self, batch: &BatchInputs) -> Result<(), ModelError> {
        let b = batch.batch_size();
        let dims = [
            ("ecg_raw", batch.ecg_raw.dim().0),
            ("eeg_power", batch.eeg_power.dim().0),
            ("hrv_time", batch.hrv_time.dim().0),
            ("hrv_freq", batch.hrv_freq.dim().0),
        ];
        for (name, got) in dims {
            if got != b {
                return Err(ModelError::ShapeMismatch(format!(
                    "{name} batch size {got} != eeg_raw batch size {b}"
                )));
            }
        }
        Ok(())
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Mean binary cross-entropy from logits; returns the loss and per-subject
/// logit gradients.
pub fn bce_with_logits(logits: &[f64], labels: &[f64]) -> (f64, Vec<f64>) {
    assert_eq!(logits.len(), labels.len());
    let n = logits.len() as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(logits.len());
    for (&z, &y) in logits.iter().zip(labels) {
        loss += z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
        grad.push((sigmoid(z) - y) / n);
    }
    (loss / n, grad)
}
