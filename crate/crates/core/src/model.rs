//! The shape estimation network: relation maps go through a small conv
//! stack, are embedded and concatenated with the structure feature, a single
//! LSTM layer runs over the τ past frames, and a fully connected head maps
//! the last hidden state to the 3M marker coordinates.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{
    fit_normalizer, frame_features, structure_len, FeatureError, FeatureWindow, FrameFeatures,
    Normalizer,
};
use crate::geometry::{ColonFrame, ScopeFrame};
use crate::neural::{
    adam_update, conv2d_backward, conv2d_forward, dense_backward, dense_forward, dropout,
    dropout_backward, lstm_backward, lstm_forward, mse_loss, relu, relu_backward, AdamConfig,
    AdamState, Conv2dCache, DropoutMask, LstmCache, LstmParams, NeuralError, Tensor,
};
use crate::recording::InsertionRecording;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid architecture: {0}")]
    Architecture(String),
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("window has {found} frames, model expects {expected}")]
    WindowLength { expected: usize, found: usize },
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SenArchitecture {
    pub sensors: usize,
    pub markers: usize,
    /// τ, the number of past frames fed to the LSTM.
    pub window: usize,
    /// Output channels of each 3×3 conv layer.
    pub conv_channels: Vec<usize>,
    pub embed_size: usize,
    pub hidden_size: usize,
    pub head_sizes: Vec<usize>,
    pub dropout: f64,
    pub use_relative_features: bool,
}

impl Default for SenArchitecture {
    fn default() -> Self {
        Self {
            sensors: 6,
            markers: 12,
            window: 20,
            conv_channels: vec![8, 16],
            embed_size: 64,
            hidden_size: 128,
            head_sizes: vec![64],
            dropout: 0.5,
            use_relative_features: true,
        }
    }
}

impl SenArchitecture {
    pub fn validate(&self) -> Result<(), ModelError> {
        let sizes = [
            ("sensors", self.sensors),
            ("markers", self.markers),
            ("window", self.window),
            ("embed_size", self.embed_size),
            ("hidden_size", self.hidden_size),
        ];
        for (name, v) in sizes {
            if v == 0 {
                return Err(ModelError::Architecture(format!("{name} must be positive")));
            }
        }
        if self.sensors < 2 {
            return Err(ModelError::Architecture("sensors must be ≥ 2".into()));
        }
        if self.conv_channels.iter().chain(&self.head_sizes).any(|&c| c == 0) {
            return Err(ModelError::Architecture("layer sizes must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::Architecture(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    pub fn structure_len(&self) -> usize {
        structure_len(self.sensors)
    }

    pub fn image_len(&self) -> usize {
        2 * self.sensors * self.sensors
    }

    pub fn lstm_input_len(&self) -> usize {
        self.structure_len() + if self.use_relative_features { self.embed_size } else { 0 }
    }

    pub fn output_len(&self) -> usize {
        3 * self.markers
    }

    /// Parameter names and shapes in storage order.
    pub fn param_specs(&self) -> Vec<(String, Vec<usize>)> {
        let mut specs = Vec::new();
        let nn = self.sensors * self.sensors;
        if self.use_relative_features {
            let mut c_in = 2;
            for (i, &c) in self.conv_channels.iter().enumerate() {
                specs.push((format!("conv{i}.weight"), vec![c, c_in, 3, 3]));
                specs.push((format!("conv{i}.bias"), vec![c]));
                c_in = c;
            }
            specs.push(("embed.weight".into(), vec![self.embed_size, c_in * nn]));
            specs.push(("embed.bias".into(), vec![self.embed_size]));
        }
        let h4 = 4 * self.hidden_size;
        specs.push(("lstm.w_input".into(), vec![h4, self.lstm_input_len()]));
        specs.push(("lstm.w_hidden".into(), vec![h4, self.hidden_size]));
        specs.push(("lstm.bias".into(), vec![h4]));
        let mut prev = self.hidden_size;
        for (i, &s) in self.head_sizes.iter().enumerate() {
            specs.push((format!("head{i}.weight"), vec![s, prev]));
            specs.push((format!("head{i}.bias"), vec![s]));
            prev = s;
        }
        specs.push(("out.weight".into(), vec![self.output_len(), prev]));
        specs.push(("out.bias".into(), vec![self.output_len()]));
        specs
    }
}

/// Named parameter tensors in the order given by
/// [`SenArchitecture::param_specs`].
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl LayerParams {
    pub fn new(named: Vec<(String, Tensor)>) -> Self {
        let (names, tensors) = named.into_iter().unzip();
        Self { names, tensors }
    }

    pub fn zeros(arch: &SenArchitecture) -> Self {
        Self::new(arch.param_specs().into_iter().map(|(n, s)| (n, Tensor::zeros(&s))).collect())
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Flattened copy of every value, in storage order.
    pub fn flatten(&self) -> Vec<f64> {
        self.tensors.iter().flat_map(|t| t.values().iter().copied()).collect()
    }

    pub fn assign_flat(&mut self, values: &[f64]) {
        let mut off = 0;
        for t in &mut self.tensors {
            let n = t.len();
            t.values_mut().copy_from_slice(&values[off..off + n]);
            off += n;
        }
    }

    /// Checks names and shapes against the architecture.
    pub fn check(&self, arch: &SenArchitecture) -> Result<(), ModelError> {
        let specs = arch.param_specs();
        if specs.len() != self.tensors.len() {
            return Err(ModelError::Architecture(format!(
                "expected {} parameter tensors, found {}",
                specs.len(),
                self.tensors.len()
            )));
        }
        for ((name, shape), (have, t)) in specs.iter().zip(self.iter()) {
            if name != have || shape.as_slice() != t.shape() {
                return Err(ModelError::Architecture(format!(
                    "tensor {have} {:?} does not match expected {name} {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }
}

/// Tensor indices of each layer.
#[derive(Debug, Clone)]
struct Layout {
    conv: Vec<(usize, usize)>,
    embed: Option<(usize, usize)>,
    lstm: (usize, usize, usize),
    head: Vec<(usize, usize)>,
    out: (usize, usize),
}

impl Layout {
    fn new(arch: &SenArchitecture) -> Self {
        let mut i = 0;
        let mut pair = || {
            let p = (i, i + 1);
            i += 2;
            p
        };
        let (conv, embed) = if arch.use_relative_features {
            let conv = arch.conv_channels.iter().map(|_| pair()).collect();
            (conv, Some(pair()))
        } else {
            (Vec::new(), None)
        };
        let (a, b) = pair();
        let lstm = (a, b, b + 1);
        let mut i = b + 2;
        let mut pair = || {
            let p = (i, i + 1);
            i += 2;
            p
        };
        let head = arch.head_sizes.iter().map(|_| pair()).collect();
        let out = pair();
        Self { conv, embed, lstm, head, out }
    }
}

/// Glorot-uniform weights, zero biases, forget-gate bias 1.
pub fn init_params(arch: &SenArchitecture, seed: u64) -> LayerParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = arch.hidden_size;
    let named = arch
        .param_specs()
        .into_iter()
        .map(|(name, shape)| {
            let mut t = Tensor::zeros(&shape);
            if name.ends_with("bias") {
                if name == "lstm.bias" {
                    t.values_mut()[h..2 * h].iter_mut().for_each(|v| *v = 1.0);
                }
            } else {
                let receptive: usize = shape[2..].iter().product();
                let fan_in = shape[1] * receptive;
                let fan_out = shape[0] * receptive;
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                for v in t.values_mut() {
                    *v = rng.random_range(-limit..=limit);
                }
            }
            (name, t)
        })
        .collect();
    LayerParams::new(named)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub epochs: usize,
    pub final_loss: f64,
    pub seed: u64,
}

/// Fixed affine on the last layer, `y = mean + std ⊙ z`, fitted on the
/// training targets. The network output stays in normalized coordinates but
/// the last layer works at unit scale, where deformations of a few
/// millimetres are not lost under the marker layout.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputScaling {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Coordinates that never vary in training (fixed markers, no noise) keep
/// this spread so the affine stays invertible.
pub const MIN_OUTPUT_STD: f64 = 1e-6;

impl OutputScaling {
    pub fn identity(len: usize) -> Self {
        Self { mean: vec![0.0; len], std: vec![1.0; len] }
    }

    /// Per-coordinate mean and standard deviation of row-major targets.
    pub fn fit(targets: &[f64], len: usize) -> Self {
        let rows = targets.len() / len;
        if rows == 0 {
            return Self::identity(len);
        }
        let mut mean = vec![0.0; len];
        for row in targets.chunks_exact(len) {
            mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= rows as f64);
        let mut var = vec![0.0; len];
        for row in targets.chunks_exact(len) {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var.iter().map(|s| (s / rows as f64).sqrt().max(MIN_OUTPUT_STD)).collect();
        Self { mean, std }
    }

    pub fn validate(&self, len: usize) -> Result<(), ModelError> {
        if self.mean.len() != len || self.std.len() != len {
            return Err(ModelError::Data(format!(
                "output scaling has {}/{} entries, architecture outputs {len}",
                self.mean.len(),
                self.std.len()
            )));
        }
        if self.mean.iter().chain(&self.std).any(|v| !v.is_finite()) || self.std.iter().any(|&s| s <= 0.0) {
            return Err(ModelError::Data("output scaling must be finite with positive spreads".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SenModel {
    pub architecture: SenArchitecture,
    pub params: LayerParams,
    pub normalizer: Normalizer,
    pub output_scaling: OutputScaling,
    pub meta: TrainingMeta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub shuffle: bool,
    /// Learning rate reached at the last epoch by cosine annealing; `None`
    /// keeps the rate constant.
    pub final_learning_rate: Option<f64>,
    /// Consecutive windows kept together when shuffling. Overlapping windows
    /// in one batch share their convolution work; 1 shuffles single samples.
    pub window_run: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 50,
            epochs: 480,
            learning_rate: 1e-3,
            seed: 0,
            shuffle: true,
            final_learning_rate: None,
            window_run: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(ModelError::Config("batch_size and epochs must be ≥ 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(ModelError::Config("learning_rate must be positive".into()));
        }
        if self.window_run == 0 {
            return Err(ModelError::Config("window_run must be ≥ 1".into()));
        }
        if let Some(f) = self.final_learning_rate {
            if !(f > 0.0 && f <= self.learning_rate) {
                return Err(ModelError::Config("final_learning_rate must be in (0, learning_rate]".into()));
            }
        }
        Ok(())
    }

    /// Learning rate used during `epoch` (0-based).
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        match self.final_learning_rate {
            Some(f) if self.epochs > 1 => {
                let x = epoch as f64 / (self.epochs - 1) as f64;
                f + (self.learning_rate - f) * 0.5 * (1.0 + (std::f64::consts::PI * x).cos())
            }
            _ => self.learning_rate,
        }
    }
}

/// A batch of windows, time-major: row `t·batch + b` is step `t` of `b`.
#[derive(Debug, Clone, PartialEq)]
pub struct SenBatch {
    pub batch: usize,
    pub tau: usize,
    /// Distinct relation images (P then D, 2×N×N each). Windows that share a
    /// frame share its image, so the convolution branch runs once per frame.
    pub images: Vec<f64>,
    /// For each of the τ·B rows, the index of its image in `images`.
    pub image_index: Vec<usize>,
    /// τ·B rows of structure features.
    pub structure: Vec<f64>,
}

impl SenBatch {
    pub fn from_windows(windows: &[&FeatureWindow]) -> Result<Self, ModelError> {
        let first = windows.first().ok_or_else(|| ModelError::Data("empty batch".into()))?;
        let tau = first.tau();
        if let Some(w) = windows.iter().find(|w| w.tau() != tau) {
            return Err(ModelError::WindowLength { expected: tau, found: w.tau() });
        }
        let mut images = Vec::new();
        let mut structure = Vec::new();
        for t in 0..tau {
            for w in windows {
                let f = &w.frames[t];
                f.relation.write_image(&mut images);
                f.structure.write_into(&mut structure);
            }
        }
        let image_index = (0..tau * windows.len()).collect();
        Ok(Self { batch: windows.len(), tau, images, image_index, structure })
    }

    /// Number of distinct relation images.
    pub fn image_count(&self, arch: &SenArchitecture) -> usize {
        self.images.len() / arch.image_len().max(1)
    }
}

/// Per-frame packed features of a recording.
struct PackedRecording {
    images: Vec<f64>,
    structure: Vec<f64>,
    targets: Vec<f64>,
    frames: usize,
}

fn pack_features(features: &[FrameFeatures]) -> (Vec<f64>, Vec<f64>) {
    let mut images = Vec::new();
    let mut structure = Vec::new();
    for f in features {
        f.relation.write_image(&mut images);
        f.structure.write_into(&mut structure);
    }
    (images, structure)
}

fn pack_recording(rec: &InsertionRecording, norm: &Normalizer) -> PackedRecording {
    let feats: Vec<FrameFeatures> = rec.scope_frames().map(|f| frame_features(f, norm)).collect();
    let (images, structure) = pack_features(&feats);
    let targets = rec.colon_frames().flat_map(|c| norm.normalize_markers(&c.markers)).collect();
    PackedRecording { images, structure, targets, frames: rec.len() }
}

/// Gathers the windows ending just before frame `tc` (0-based) of recording
/// `src` for every pick, storing each distinct relation image once.
fn gather_batch(arch: &SenArchitecture, sources: &[&PackedRecording], picks: &[(usize, usize)]) -> SenBatch {
    let (il, sl, tau) = (arch.image_len(), arch.structure_len(), arch.window);
    let mut img = Vec::new();
    let mut index = Vec::with_capacity(tau * picks.len());
    let mut seen: HashMap<(usize, usize), usize> = HashMap::new();
    let mut st = Vec::with_capacity(tau * picks.len() * sl);
    for t in 0..tau {
        for &(src, tc) in picks {
            let f = tc - tau + t;
            let p = sources[src];
            if arch.use_relative_features {
                let next = seen.len();
                let k = *seen.entry((src, f)).or_insert_with(|| {
                    img.extend_from_slice(&p.images[f * il..][..il]);
                    next
                });
                index.push(k);
            }
            st.extend_from_slice(&p.structure[f * sl..][..sl]);
        }
    }
    SenBatch { batch: picks.len(), tau, images: img, image_index: index, structure: st }
}

struct ForwardCache {
    conv: Vec<(Conv2dCache, Vec<f64>)>,
    embed_in: Vec<f64>,
    embed_out: Vec<f64>,
    lstm: LstmCache,
    /// (layer input, post-ReLU activation, dropout mask)
    head: Vec<(Vec<f64>, Vec<f64>, DropoutMask)>,
    out_in: Vec<f64>,
}

impl SenModel {
    /// A model with freshly initialized parameters.
    pub fn new(architecture: SenArchitecture, normalizer: Normalizer, seed: u64) -> Result<Self, ModelError> {
        architecture.validate()?;
        let params = init_params(&architecture, seed);
        let output_scaling = OutputScaling::identity(architecture.output_len());
        Ok(Self { architecture, params, normalizer, output_scaling, meta: TrainingMeta { seed, ..TrainingMeta::default() } })
    }

    fn check_batch(&self, b: &SenBatch) -> Result<(), ModelError> {
        let a = &self.architecture;
        self.output_scaling.validate(a.output_len())?;
        if b.tau != a.window {
            return Err(ModelError::WindowLength { expected: a.window, found: b.tau });
        }
        let rows = b.tau * b.batch;
        if b.structure.len() != rows * a.structure_len() {
            return Err(ModelError::Data(format!(
                "structure block has {} values, expected {rows}×{}",
                b.structure.len(),
                a.structure_len()
            )));
        }
        if a.use_relative_features {
            let il = a.image_len();
            if b.images.len() % il != 0 {
                return Err(ModelError::Data(format!(
                    "relation block has {} values, not a multiple of {il}",
                    b.images.len()
                )));
            }
            let count = b.images.len() / il;
            if b.image_index.len() != rows || b.image_index.iter().any(|&k| k >= count) {
                return Err(ModelError::Data(format!(
                    "relation index must map {rows} rows into {count} images"
                )));
            }
        }
        Ok(())
    }

    fn forward_cached<R: Rng + ?Sized>(
        &self,
        b: &SenBatch,
        training: bool,
        rng: &mut R,
    ) -> Result<(Vec<f64>, ForwardCache), ModelError> {
        self.check_batch(b)?;
        let a = &self.architecture;
        let p = self.params.tensors();
        let lay = Layout::new(a);
        let rows = b.tau * b.batch;
        let n = a.sensors;

        let mut conv = Vec::new();
        let (mut embed_in, mut embed_out) = (Vec::new(), Vec::new());
        let lstm_in = if let Some((we, be)) = lay.embed {
            let count = b.image_count(a);
            let mut x = b.images.clone();
            for &(wk, bk) in &lay.conv {
                let (mut y, cache) = conv2d_forward(&x, count, n, n, &p[wk], &p[bk])?;
                relu(&mut y);
                conv.push((cache, y.clone()));
                x = y;
            }
            let mut e = dense_forward(&x, count, &p[we], &p[be])?;
            relu(&mut e);
            embed_in = x;
            let (el, sl) = (a.embed_size, a.structure_len());
            let mut cat = Vec::with_capacity(rows * (el + sl));
            for (r, &k) in b.image_index.iter().enumerate() {
                cat.extend_from_slice(&e[k * el..][..el]);
                cat.extend_from_slice(&b.structure[r * sl..][..sl]);
            }
            embed_out = e;
            cat
        } else {
            b.structure.clone()
        };

        let (wi, wh, bl) = lay.lstm;
        let lp = LstmParams { w_input: &p[wi], w_hidden: &p[wh], bias: &p[bl] };
        let (mut act, lstm) = lstm_forward(&lstm_in, b.tau, b.batch, lp)?;

        let mut head = Vec::new();
        for &(w, bias) in &lay.head {
            let mut z = dense_forward(&act, b.batch, &p[w], &p[bias])?;
            relu(&mut z);
            let post = z.clone();
            let mask = dropout(&mut z, a.dropout, rng, training)?;
            head.push((std::mem::replace(&mut act, z), post, mask));
        }
        let mut out = dense_forward(&act, b.batch, &p[lay.out.0], &p[lay.out.1])?;
        let s = &self.output_scaling;
        for row in out.chunks_exact_mut(s.mean.len()) {
            for ((v, m), sd) in row.iter_mut().zip(&s.mean).zip(&s.std) {
                *v = m + sd * *v;
            }
        }
        Ok((out, ForwardCache { conv, embed_in, embed_out, lstm, head, out_in: act }))
    }

    fn backward(
        &self,
        b: &SenBatch,
        cache: &ForwardCache,
        grad_out: &[f64],
    ) -> Result<Vec<Tensor>, ModelError> {
        let a = &self.architecture;
        let p = self.params.tensors();
        let lay = Layout::new(a);
        let mut grads: Vec<Tensor> = p.iter().map(Tensor::zeros_like).collect();

        // Split borrows of the gradient list per layer.
        fn two(g: &mut [Tensor], i: usize, j: usize) -> (&mut Tensor, &mut Tensor) {
            debug_assert!(i + 1 == j);
            let (l, r) = g.split_at_mut(j);
            (&mut l[i], &mut r[0])
        }

        let (ow, ob) = lay.out;
        let (gw, gb) = two(&mut grads, ow, ob);
        let std = &self.output_scaling.std;
        let scaled: Vec<f64> = grad_out.iter().zip(std.iter().cycle()).map(|(g, s)| g * s).collect();
        let mut g = dense_backward(&cache.out_in, &scaled, b.batch, &p[ow], gw, gb)?;
        for (&(w, bias), (input, post, mask)) in lay.head.iter().zip(&cache.head).rev() {
            dropout_backward(mask, &mut g);
            relu_backward(post, &mut g);
            let (gw, gb) = two(&mut grads, w, bias);
            g = dense_backward(input, &g, b.batch, &p[w], gw, gb)?;
        }

        let (wi, wh, bl) = lay.lstm;
        let lp = LstmParams { w_input: &p[wi], w_hidden: &p[wh], bias: &p[bl] };
        let (gl, gr) = grads.split_at_mut(wh);
        let (gwh, gbl) = gr.split_at_mut(1);
        let g_in = lstm_backward(&cache.lstm, &g, lp, &mut gl[wi], &mut gwh[0], &mut gbl[0])?;

        if let Some((we, be)) = lay.embed {
            let (el, sl) = (a.embed_size, a.structure_len());
            let count = b.image_count(a);
            let mut ge = vec![0.0; count * el];
            for (r, &k) in b.image_index.iter().enumerate() {
                for (acc, v) in ge[k * el..][..el].iter_mut().zip(&g_in[r * (el + sl)..][..el]) {
                    *acc += v;
                }
            }
            relu_backward(&cache.embed_out, &mut ge);
            let (gw, gb) = two(&mut grads, we, be);
            let mut gx = dense_backward(&cache.embed_in, &ge, count, &p[we], gw, gb)?;
            for (&(wk, bk), (cc, y)) in lay.conv.iter().zip(&cache.conv).rev() {
                relu_backward(y, &mut gx);
                let (gw, gb) = two(&mut grads, wk, bk);
                gx = conv2d_backward(cc, &gx, &p[wk], gw, gb)?;
            }
        }
        Ok(grads)
    }

    /// Normalized outputs (B×3M) for a batch.
    pub fn forward_batch<R: Rng + ?Sized>(&self, b: &SenBatch, training: bool, rng: &mut R) -> Result<Vec<f64>, ModelError> {
        Ok(self.forward_cached(b, training, rng)?.0)
    }

    /// Normalized 3M-vector for one window.
    pub fn forward<R: Rng + ?Sized>(&self, window: &FeatureWindow, training: bool, rng: &mut R) -> Result<Vec<f64>, ModelError> {
        if window.tau() != self.architecture.window {
            return Err(ModelError::WindowLength { expected: self.architecture.window, found: window.tau() });
        }
        if let Some(f) = window.frames.first() {
            if f.relation.n != self.architecture.sensors {
                return Err(ModelError::Data(format!(
                    "window has {} sensors, model expects {}",
                    f.relation.n, self.architecture.sensors
                )));
            }
        }
        self.forward_batch(&SenBatch::from_windows(&[window])?, training, rng)
    }

    /// MSE loss over the batch and its gradient for every parameter tensor.
    pub fn loss_and_gradient<R: Rng + ?Sized>(
        &self,
        b: &SenBatch,
        targets: &[f64],
        training: bool,
        rng: &mut R,
    ) -> Result<(f64, Vec<Tensor>), ModelError> {
        let (out, cache) = self.forward_cached(b, training, rng)?;
        let (loss, g) = mse_loss(&out, targets)?;
        Ok((loss, self.backward(b, &cache, &g)?))
    }

    /// Colon shape at the frame following `frames` (τ registered scope frames).
    pub fn estimate(&self, frames: &[ScopeFrame]) -> Result<ColonFrame, ModelError> {
        let window = crate::features::build_window(frames, self.architecture.window, &self.normalizer)
            .map_err(|e| match e {
                FeatureError::WindowLength { expected, found } => ModelError::WindowLength { expected, found },
                other => other.into(),
            })?;
        let out = self.forward(&window, false, &mut NoRng)?;
        Ok(ColonFrame::new(self.normalizer.denormalize_markers(&out), window.target_index))
    }

    /// Estimates for frames τ+1..T of a recording.
    pub fn estimate_recording(&self, rec: &InsertionRecording) -> Result<Vec<ColonFrame>, ModelError> {
        let tau = self.architecture.window;
        if rec.len() <= tau {
            return Err(ModelError::Data(format!(
                "recording has {} frames; at least {} are needed to estimate one",
                rec.len(),
                tau + 1
            )));
        }
        if rec.sensor_count() != self.architecture.sensors {
            return Err(ModelError::Data(format!(
                "recording has {} sensors, model expects {}",
                rec.sensor_count(),
                self.architecture.sensors
            )));
        }
        let packed = pack_recording(rec, &self.normalizer);
        let targets: Vec<(usize, usize)> = (tau..rec.len()).map(|tc| (0, tc)).collect();
        let mut out = Vec::with_capacity(targets.len());
        for chunk in targets.chunks(64) {
            let b = gather_batch(&self.architecture, &[&packed], chunk);
            let y = self.forward_batch(&b, false, &mut NoRng)?;
            for (row, &(_, tc)) in y.chunks_exact(self.architecture.output_len()).zip(chunk) {
                out.push(ColonFrame::new(self.normalizer.denormalize_markers(row), tc + 1));
            }
        }
        Ok(out)
    }
}

/// Inference-mode RNG stand-in; never consulted because dropout is off.
struct NoRng;

impl rand::RngCore for NoRng {
    fn next_u32(&mut self) -> u32 {
        unreachable!("dropout is disabled at inference")
    }
    fn next_u64(&mut self) -> u64 {
        unreachable!("dropout is disabled at inference")
    }
    fn fill_bytes(&mut self, _: &mut [u8]) {
        unreachable!("dropout is disabled at inference")
    }
}

/// Trains a model on every (window → next frame) sample of the recordings.
/// Returns the model and the mean training loss of each epoch.
pub fn train(
    recordings: &[InsertionRecording],
    arch: &SenArchitecture,
    cfg: &TrainConfig,
) -> Result<(SenModel, Vec<f64>), ModelError> {
    train_with_progress(recordings, arch, cfg, |_, _| {})
}

pub fn train_with_progress<F: FnMut(usize, f64)>(
    recordings: &[InsertionRecording],
    arch: &SenArchitecture,
    cfg: &TrainConfig,
    mut progress: F,
) -> Result<(SenModel, Vec<f64>), ModelError> {
    arch.validate()?;
    cfg.validate()?;
    if recordings.is_empty() {
        return Err(ModelError::Data("no training recordings".into()));
    }
    for (i, r) in recordings.iter().enumerate() {
        if r.len() <= arch.window {
            return Err(ModelError::Data(format!(
                "recording {i} has {} frames; training needs more than τ = {}",
                r.len(),
                arch.window
            )));
        }
        if r.sensor_count() != arch.sensors || r.marker_count() != arch.markers {
            return Err(ModelError::Data(format!(
                "recording {i} has {} sensors / {} markers, architecture expects {} / {}",
                r.sensor_count(),
                r.marker_count(),
                arch.sensors,
                arch.markers
            )));
        }
    }
    let normalizer = fit_normalizer(recordings)?;
    let mut model = SenModel::new(arch.clone(), normalizer, cfg.seed)?;
    let packed: Vec<PackedRecording> = recordings.iter().map(|r| pack_recording(r, &normalizer)).collect();
    let sources: Vec<&PackedRecording> = packed.iter().collect();
    let samples: Vec<(usize, usize)> = packed
        .iter()
        .enumerate()
        .flat_map(|(ri, p)| (arch.window..p.frames).map(move |t| (ri, t)))
        .collect();
    let out_len = arch.output_len();
    let all_targets: Vec<f64> =
        samples.iter().flat_map(|&(ri, t)| packed[ri].targets[t * out_len..][..out_len].iter().copied()).collect();
    model.output_scaling = OutputScaling::fit(&all_targets, out_len);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut adam = AdamConfig { learning_rate: cfg.learning_rate, ..AdamConfig::default() };
    let mut state = AdamState::new(model.params.tensors());
    // Runs of consecutive windows from one recording; the runs are shuffled.
    let mut runs: Vec<Vec<usize>> = Vec::new();
    for (i, &(ri, _)) in samples.iter().enumerate() {
        match runs.last_mut() {
            Some(r) if r.len() < cfg.window_run && samples[r[0]].0 == ri => r.push(i),
            _ => runs.push(vec![i]),
        }
    }
    let mut run_order: Vec<usize> = (0..runs.len()).collect();
    let mut order: Vec<usize> = Vec::with_capacity(samples.len());
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        adam.learning_rate = cfg.learning_rate_at(epoch);
        if cfg.shuffle {
            shuffle(&mut run_order, &mut rng);
        }
        order.clear();
        order.extend(run_order.iter().flat_map(|&r| runs[r].iter().copied()));
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let picks: Vec<(usize, usize)> = chunk.iter().map(|&s| samples[s]).collect();
            let mut targets = Vec::with_capacity(chunk.len() * out_len);
            for &(ri, tc) in &picks {
                targets.extend_from_slice(&packed[ri].targets[tc * out_len..][..out_len]);
            }
            let b = gather_batch(arch, &sources, &picks);
            let (loss, grads) = model.loss_and_gradient(&b, &targets, true, &mut rng)?;
            total += loss * chunk.len() as f64;
            let mut params: Vec<&mut Tensor> = model.params.tensors_mut().iter_mut().collect();
            adam_update(&mut params, &grads, &mut state, &adam)?;
        }
        let mean = total / samples.len() as f64;
        if !mean.is_finite() {
            return Err(ModelError::Data(format!("training diverged at epoch {}", epoch + 1)));
        }
        history.push(mean);
        progress(epoch + 1, mean);
    }
    model.meta = TrainingMeta { epochs: cfg.epochs, final_loss: *history.last().unwrap_or(&f64::NAN), seed: cfg.seed };
    Ok((model, history))
}

/// Fisher–Yates with the crate's seeded generator.
fn shuffle<R: Rng>(v: &mut [usize], rng: &mut R) {
    for i in (1..v.len()).rev() {
        let j = rng.random_range(0..=i);
        v.swap(i, j);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Direction3, Point3};
    use crate::neural::grad_check;
    use crate::recording::FramePair;

    fn tiny_arch(rel: bool) -> SenArchitecture {
        SenArchitecture {
            sensors: 3,
            markers: 2,
            window: 2,
            conv_channels: vec![2],
            embed_size: 3,
            hidden_size: 4,
            head_sizes: vec![5],
            dropout: 0.5,
            use_relative_features: rel,
        }
    }

    fn frame(t: usize, n: usize) -> ScopeFrame {
        let pts = (0..n)
            .map(|i| Point3::new(10.0 * i as f64 + t as f64, (t as f64 * 0.3 + i as f64).sin() * 5.0, i as f64 * 2.0))
            .collect();
        let dirs = (0..n)
            .map(|i| Direction3::from_vector(Point3::new(1.0, (t + i) as f64 * 0.1, 0.2)).unwrap())
            .collect();
        ScopeFrame::new(pts, dirs, t).unwrap()
    }

    fn recording(frames: usize, n: usize, m: usize) -> InsertionRecording {
        InsertionRecording::new(
            (1..=frames)
                .map(|t| FramePair {
                    scope: frame(t, n),
                    colon: ColonFrame::new(
                        (0..m).map(|j| Point3::new(j as f64 * 20.0, t as f64 * 0.5, (t as f64 * 0.2).cos() * 3.0)).collect(),
                        t,
                    ),
                })
                .collect(),
        )
        .unwrap()
    }

    fn norm() -> Normalizer {
        Normalizer::new(Point3::new(10.0, 0.0, 1.0), 1.0 / 40.0, 1.0 / 30.0).unwrap()
    }

    #[test]
    fn init_is_seeded() {
        let a = SenArchitecture::default();
        assert_eq!(init_params(&a, 3), init_params(&a, 3));
        assert_ne!(init_params(&a, 3), init_params(&a, 4));
        let p = init_params(&a, 3);
        let forget = &p.get("lstm.bias").unwrap().values()[128..256];
        assert!(forget.iter().all(|&v| v == 1.0));
        assert!(p.get("out.bias").unwrap().values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn init_weights_centered() {
        let p = init_params(&SenArchitecture::default(), 11);
        for (name, t) in p.iter().filter(|(_, t)| t.len() >= 10_000) {
            let n = t.len() as f64;
            let mean = t.values().iter().sum::<f64>() / n;
            let var = t.values().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            assert!(mean.abs() < 3.0 * (var / n).sqrt(), "{name}: mean {mean}");
        }
    }

    #[test]
    fn zero_parameters_give_zero_output() {
        let arch = tiny_arch(true);
        let mut model = SenModel::new(arch.clone(), norm(), 1).unwrap();
        model.params = LayerParams::zeros(&arch);
        let frames: Vec<ScopeFrame> = (1..=2).map(|t| frame(t, 3)).collect();
        let w = crate::features::build_window(&frames, 2, &model.normalizer).unwrap();
        let y = model.forward(&w, false, &mut NoRng).unwrap();
        assert_eq!(y, vec![0.0; 6]);
    }

    #[test]
    fn inference_is_deterministic_and_rng_free() {
        let model = SenModel::new(tiny_arch(true), norm(), 5).unwrap();
        let frames: Vec<ScopeFrame> = (4..=5).map(|t| frame(t, 3)).collect();
        let w = crate::features::build_window(&frames, 2, &model.normalizer).unwrap();
        let mut r1 = ChaCha8Rng::seed_from_u64(1);
        let mut r2 = ChaCha8Rng::seed_from_u64(2);
        assert_eq!(model.forward(&w, false, &mut r1).unwrap(), model.forward(&w, false, &mut r2).unwrap());
        let est = model.estimate(&frames).unwrap();
        assert_eq!(est.frame_index, 6);
        assert_eq!(est, model.estimate(&frames).unwrap());
        assert!(matches!(model.estimate(&frames[..1]), Err(ModelError::WindowLength { .. })));
    }

    /// Runs each layer operation by hand on one window.
    #[test]
    fn forward_matches_layer_composition() {
        let arch = tiny_arch(true);
        let model = SenModel::new(arch.clone(), norm(), 9).unwrap();
        let frames: Vec<ScopeFrame> = (2..=3).map(|t| frame(t, 3)).collect();
        let w = crate::features::build_window(&frames, 2, &model.normalizer).unwrap();
        let p = &model.params;
        let t = |n: &str| p.get(n).unwrap();
        let mut seq = Vec::new();
        for f in &w.frames {
            let mut img = Vec::new();
            f.relation.write_image(&mut img);
            let (mut c, _) = conv2d_forward(&img, 1, 3, 3, t("conv0.weight"), t("conv0.bias")).unwrap();
            relu(&mut c);
            let mut e = dense_forward(&c, 1, t("embed.weight"), t("embed.bias")).unwrap();
            relu(&mut e);
            e.extend(f.structure.to_vec());
            seq.push(e);
        }
        let h = crate::neural::lstm_sequence(
            &seq,
            LstmParams { w_input: t("lstm.w_input"), w_hidden: t("lstm.w_hidden"), bias: t("lstm.bias") },
        )
        .unwrap();
        let mut z = dense_forward(&h, 1, t("head0.weight"), t("head0.bias")).unwrap();
        relu(&mut z);
        let want = dense_forward(&z, 1, t("out.weight"), t("out.bias")).unwrap();
        let got = model.forward(&w, false, &mut NoRng).unwrap();
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn without_relative_features_ignores_relation_maps() {
        let model = SenModel::new(tiny_arch(false), norm(), 2).unwrap();
        let frames: Vec<ScopeFrame> = (2..=3).map(|t| frame(t, 3)).collect();
        let w = crate::features::build_window(&frames, 2, &model.normalizer).unwrap();
        let mut perturbed = w.clone();
        for f in &mut perturbed.frames {
            f.relation.positional.iter_mut().for_each(|v| *v += 3.7);
            f.relation.directional.iter_mut().for_each(|v| *v = -*v);
        }
        assert_eq!(model.forward(&w, false, &mut NoRng).unwrap(), model.forward(&perturbed, false, &mut NoRng).unwrap());
        assert!(model.params.get("embed.weight").is_none());
    }

    #[test]
    fn end_to_end_gradient_check() {
        for rel in [true, false] {
            let arch = tiny_arch(rel);
            let mut model = SenModel::new(arch.clone(), norm(), 21).unwrap();
            model.output_scaling = OutputScaling {
                mean: (0..6).map(|i| 0.1 * i as f64 - 0.2).collect(),
                std: (0..6).map(|i| 0.5 + 0.3 * i as f64).collect(),
            };
            let rec = recording(6, 3, 2);
            let packed = pack_recording(&rec, &model.normalizer);
            let b = gather_batch(&arch, &[&packed], &[(0, 2), (0, 4), (0, 5)]);
            if rel {
                assert_eq!(b.image_count(&arch), 5);
            }
            let targets: Vec<f64> = [2, 4, 5].iter().flat_map(|&t| packed.targets[t * 6..][..6].to_vec()).collect();
            let (_, grads) = model.loss_and_gradient(&b, &targets, false, &mut NoRng).unwrap();
            let analytic: Vec<f64> = grads.iter().flat_map(|g| g.values().to_vec()).collect();
            let mut probe = model.clone();
            let r = grad_check(
                |v| {
                    probe.params.assign_flat(v);
                    probe.loss_and_gradient(&b, &targets, false, &mut NoRng).unwrap().0
                },
                &model.params.flatten(),
                &analytic,
                1e-5,
                1e-4,
            );
            assert!(r.passed, "rel={rel}: {r:?}");
        }
    }

    #[test]
    fn training_is_reproducible_and_descends() {
        let arch = SenArchitecture { dropout: 0.0, ..tiny_arch(true) };
        let recs = vec![recording(12, 3, 2), recording(10, 3, 2)];
        let cfg = TrainConfig { batch_size: 4, epochs: 30, learning_rate: 1e-2, seed: 8, ..TrainConfig::default() };
        let (m1, h1) = train(&recs, &arch, &cfg).unwrap();
        let (m2, h2) = train(&recs, &arch, &cfg).unwrap();
        assert_eq!(h1, h2);
        assert_eq!(m1, m2);
        assert_eq!(h1.len(), 30);
        assert!(h1.last().unwrap() < h1.first().unwrap());
    }

    #[test]
    fn output_scaling_fit_matches_hand_statistics() {
        let rows = [[1.0, 5.0, 2.0], [3.0, 5.0, 4.0], [5.0, 5.0, 9.0]];
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let s = OutputScaling::fit(&flat, 3);
        assert_eq!(s.mean, vec![3.0, 5.0, 5.0]);
        assert!((s.std[0] - (8.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(s.std[1], MIN_OUTPUT_STD);
        assert!((s.std[2] - (26.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert!(s.validate(3).is_ok());
        assert!(s.validate(4).is_err());
        assert_eq!(OutputScaling::fit(&[], 3), OutputScaling::identity(3));
    }

    #[test]
    fn training_fits_output_scaling() {
        let arch = SenArchitecture { dropout: 0.0, ..tiny_arch(false) };
        let recs = vec![recording(12, 3, 2)];
        let cfg = TrainConfig { epochs: 1, learning_rate: 1e-12, ..TrainConfig::default() };
        let (m, _) = train(&recs, &arch, &cfg).unwrap();
        assert!(m.output_scaling.std.iter().all(|&s| s >= MIN_OUTPUT_STD));
        assert_ne!(m.output_scaling, OutputScaling::identity(6));
    }

    #[test]
    fn training_rejects_short_recordings() {
        let arch = tiny_arch(true);
        let err = train(&[recording(2, 3, 2)], &arch, &TrainConfig::default()).unwrap_err();
        assert!(matches!(err, ModelError::Data(_)));
    }

    #[test]
    fn estimate_denormalization_round_trip() {
        let model = SenModel::new(tiny_arch(true), norm(), 4).unwrap();
        let frames: Vec<ScopeFrame> = (1..=2).map(|t| frame(t, 3)).collect();
        let w = crate::features::build_window(&frames, 2, &model.normalizer).unwrap();
        let raw = model.forward(&w, false, &mut NoRng).unwrap();
        let est = model.estimate(&frames).unwrap();
        for (a, b) in model.normalizer.normalize_markers(&est.markers).iter().zip(&raw) {
            assert!((a - b).abs() < 1e-9);
        }
    }
}
