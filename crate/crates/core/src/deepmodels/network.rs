use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ArchConfig, Architecture, DeepError, EmbeddingTable, ModelSpec, RatioInput};
use crate::textprep::TokenSequence;

/// Token ids plus the scalar ratio input, ready for the network.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedExample {
    pub tokens: Vec<usize>,
    pub ratio: Option<f64>,
    pub label: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub(crate) struct Slot {
    off: usize,
    len: usize,
}

impl Slot {
    fn of(self, p: &[f64]) -> &[f64] {
        &p[self.off..self.off + self.len]
    }

    fn of_mut(self, p: &mut [f64]) -> &mut [f64] {
        &mut p[self.off..self.off + self.len]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct LstmLayer {
    input: usize,
    hidden: usize,
    w: Slot,
    u: Slot,
    b: Slot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ConvBank {
    width: usize,
    filters: usize,
    w: Slot,
    b: Slot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
enum Encoder {
    Lstm(Vec<LstmLayer>),
    Cnn(Vec<ConvBank>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Head {
    input: usize,
    hidden: Option<(usize, Slot, Slot)>,
    w: Slot,
    b: Slot,
}

/// A trainable classifier: embedding matrix, sequence encoder and dense head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub(crate) spec_name: String,
    pub(crate) architecture: Architecture,
    pub(crate) ratio: RatioInput,
    pub(crate) arch: ArchConfig,
    pub(crate) table: EmbeddingTable,
    /// Embedding rows (fine-tuned copy of the table).
    pub(crate) emb: Vec<f64>,
    /// Every other parameter.
    pub(crate) dense: Vec<f64>,
    encoder: Encoder,
    head: Head,
    dropout: f64,
}

/// Parameter gradient: dense part plus touched embedding rows.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Gradient {
    pub dense: Vec<f64>,
    pub emb: BTreeMap<usize, Vec<f64>>,
}

impl Gradient {
    pub fn zeros(dense: usize) -> Self {
        Self {
            dense: vec![0.0; dense],
            emb: BTreeMap::new(),
        }
    }

    pub fn add(&mut self, other: &Gradient) {
        for (a, b) in self.dense.iter_mut().zip(&other.dense) {
            *a += b;
        }
        for (row, g) in &other.emb {
            match self.emb.get_mut(row) {
                Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
                None => {
                    self.emb.insert(*row, g.clone());
                }
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.dense.iter_mut().for_each(|g| *g *= s);
        self.emb.values_mut().flatten().for_each(|g| *g *= s);
    }

    pub fn norm(&self) -> f64 {
        let d: f64 = self.dense.iter().map(|g| g * g).sum();
        let e: f64 = self.emb.values().flatten().map(|g| g * g).sum();
        (d + e).sqrt()
    }
}

struct Allocator {
    next: usize,
}

impl Allocator {
    fn take(&mut self, len: usize) -> Slot {
        let s = Slot { off: self.next, len };
        self.next += len;
        s
    }
}

/// Builds a freshly initialised network for `spec` over `table`.
pub fn build_model(
    spec: &ModelSpec,
    table: &EmbeddingTable,
    arch: &ArchConfig,
    seed: u64,
) -> Result<Network, DeepError> {
    arch.validate()?;
    let dim = table.dim();
    let mut alloc = Allocator { next: 0 };
    let mut init: Vec<(Slot, f64)> = Vec::new();
    let mut forget_bias: Vec<(Slot, usize)> = Vec::new();
    let (encoder, pooled, dropout) = match spec.architecture {
        Architecture::LstmBase | Architecture::LstmAdvanced => {
            let layers = if spec.architecture == Architecture::LstmBase {
                1
            } else {
                arch.lstm_advanced_layers
            };
            let h = arch.lstm_hidden;
            let mut v = Vec::with_capacity(layers);
            for l in 0..layers {
                let input = if l == 0 { dim } else { h };
                let layer = LstmLayer {
                    input,
                    hidden: h,
                    w: alloc.take(4 * h * input),
                    u: alloc.take(4 * h * h),
                    b: alloc.take(4 * h),
                };
                init.push((layer.w, (6.0 / (input + h) as f64).sqrt()));
                init.push((layer.u, (6.0 / (2 * h) as f64).sqrt()));
                forget_bias.push((layer.b, h));
                v.push(layer);
            }
            let dropout = if spec.architecture == Architecture::LstmAdvanced {
                arch.dropout
            } else {
                0.0
            };
            (Encoder::Lstm(v), h, dropout)
        }
        Architecture::Cnn1 | Architecture::Cnn2 => {
            let (widths, filters) = if spec.architecture == Architecture::Cnn1 {
                (&arch.cnn1_widths, arch.cnn1_filters)
            } else {
                (&arch.cnn2_widths, arch.cnn2_filters)
            };
            let banks: Vec<ConvBank> = widths
                .iter()
                .map(|&width| {
                    let bank = ConvBank {
                        width,
                        filters,
                        w: alloc.take(filters * width * dim),
                        b: alloc.take(filters),
                    };
                    init.push((bank.w, (6.0 / (width * dim + filters) as f64).sqrt()));
                    bank
                })
                .collect();
            (Encoder::Cnn(banks), widths.len() * filters, arch.dropout)
        }
    };
    let input = pooled + usize::from(spec.needs_ratio());
    let hidden = (spec.architecture == Architecture::Cnn2).then(|| {
        let d = arch.cnn2_dense;
        let w = alloc.take(d * input);
        init.push((w, (6.0 / (input + d) as f64).sqrt()));
        (d, w, alloc.take(d))
    });
    let out_in = hidden.map_or(input, |(d, _, _)| d);
    let w = alloc.take(out_in);
    init.push((w, (6.0 / (out_in + 1) as f64).sqrt()));
    let head = Head {
        input,
        hidden,
        w,
        b: alloc.take(1),
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dense = vec![0.0; alloc.next];
    for (slot, limit) in init {
        for p in slot.of_mut(&mut dense) {
            *p = rng.gen_range(-limit..limit);
        }
    }
    for (b, h) in forget_bias {
        b.of_mut(&mut dense)[h..2 * h].iter_mut().for_each(|x| *x = 1.0);
    }
    Ok(Network {
        spec_name: spec.name.to_string(),
        architecture: spec.architecture,
        ratio: spec.ratio,
        arch: arch.clone(),
        emb: table.raw().to_vec(),
        table: table.clone(),
        dense,
        encoder,
        head,
        dropout,
    })
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Binary cross-entropy on a logit, numerically stable.
pub(crate) fn bce_with_logits(z: f64, y: f64) -> f64 {
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}

/// `y += M x` for a row-major `rows × x.len()` matrix.
fn matvec_add(m: &[f64], x: &[f64], y: &mut [f64]) {
    let cols = x.len();
    for (r, yr) in y.iter_mut().enumerate() {
        let row = &m[r * cols..(r + 1) * cols];
        *yr += row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
}

/// `x += Mᵀ y`.
fn matvec_t_add(m: &[f64], y: &[f64], x: &mut [f64]) {
    let cols = x.len();
    for (r, &yr) in y.iter().enumerate() {
        if yr == 0.0 {
            continue;
        }
        let row = &m[r * cols..(r + 1) * cols];
        x.iter_mut().zip(row).for_each(|(a, b)| *a += yr * b);
    }
}

/// `G += y xᵀ`.
fn outer_add(g: &mut [f64], y: &[f64], x: &[f64]) {
    let cols = x.len();
    for (r, &yr) in y.iter().enumerate() {
        if yr == 0.0 {
            continue;
        }
        let row = &mut g[r * cols..(r + 1) * cols];
        row.iter_mut().zip(x).for_each(|(a, b)| *a += yr * b);
    }
}

struct LstmCache {
    xs: Vec<Vec<f64>>,
    /// Gate activations i, f, g, o per step (4H each).
    gates: Vec<Vec<f64>>,
    cs: Vec<Vec<f64>>,
    tanh_cs: Vec<Vec<f64>>,
    hs: Vec<Vec<f64>>,
}

struct ConvCache {
    /// Per filter: winning position and pre-activation value.
    best: Vec<(usize, f64)>,
}

enum EncCache {
    Lstm {
        layers: Vec<LstmCache>,
        /// Inverted-dropout masks applied to each layer's output before the next layer.
        masks: Vec<Option<Vec<Vec<f64>>>>,
    },
    Cnn {
        x: Vec<Vec<f64>>,
        banks: Vec<ConvCache>,
    },
}

pub(crate) struct Forward {
    pub logit: f64,
    enc: EncCache,
    pooled_mask: Option<Vec<f64>>,
    head_in: Vec<f64>,
    hidden_pre: Vec<f64>,
    hidden: Vec<f64>,
}

fn dropout_mask(rng: &mut ChaCha8Rng, len: usize, p: f64) -> Vec<f64> {
    let keep = 1.0 / (1.0 - p);
    (0..len)
        .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
        .collect()
}

impl Network {
    pub fn spec_name(&self) -> &str {
        &self.spec_name
    }

    pub fn spec(&self) -> Result<ModelSpec, DeepError> {
        ModelSpec::from_name(&self.spec_name)
    }

    pub fn architecture(&self) -> Architecture {
        self.architecture
    }

    pub fn needs_ratio(&self) -> bool {
        self.ratio != RatioInput::None
    }

    pub fn embedding_table(&self) -> &EmbeddingTable {
        &self.table
    }

    pub fn parameter_count(&self) -> usize {
        self.emb.len() + self.dense.len()
    }

    pub(crate) fn dim(&self) -> usize {
        self.table.dim()
    }

    /// Maps a composed token sequence to ids. The ratio must be present
    /// exactly when the model consumes one.
    pub fn encode(&self, seq: &TokenSequence, ratio: Option<f64>, label: u8) -> Result<EncodedExample, DeepError> {
        if seq.is_empty() {
            return Err(DeepError::Input("empty token sequence".into()));
        }
        match (self.needs_ratio(), ratio) {
            (true, None) => return Err(DeepError::Input(format!("{} requires an online ratio", self.spec_name))),
            (false, Some(_)) => {
                return Err(DeepError::Input(format!(
                    "{} does not take an online ratio",
                    self.spec_name
                )))
            }
            (true, Some(r)) if !(0.0..=1.0).contains(&r) => {
                return Err(DeepError::Input(format!("ratio {r} outside [0, 1]")))
            }
            _ => {}
        }
        Ok(EncodedExample {
            tokens: seq.iter().map(|t| self.table.lookup(t)).collect(),
            ratio,
            label,
        })
    }

    fn check(&self, ex: &EncodedExample) -> Result<(), DeepError> {
        if ex.tokens.is_empty() {
            return Err(DeepError::Input("empty token sequence".into()));
        }
        if ex.ratio.is_some() != self.needs_ratio() {
            return Err(DeepError::Input(format!(
                "ratio presence does not match {}",
                self.spec_name
            )));
        }
        if let Some(&bad) = ex.tokens.iter().find(|&&t| t >= self.table.rows()) {
            return Err(DeepError::Input(format!("token id {bad} out of range")));
        }
        Ok(())
    }

    fn emb_row(&self, id: usize) -> &[f64] {
        let d = self.dim();
        &self.emb[id * d..(id + 1) * d]
    }

    /// Forward pass. Dropout is applied only when `rng` is given.
    pub(crate) fn forward(&self, ex: &EncodedExample, mut rng: Option<&mut ChaCha8Rng>) -> Forward {
        let p = &self.dense;
        let xs: Vec<Vec<f64>> = ex.tokens.iter().map(|&t| self.emb_row(t).to_vec()).collect();
        let use_dropout = self.dropout > 0.0 && rng.is_some();
        let (enc, mut pooled) = match &self.encoder {
            Encoder::Lstm(layers) => {
                let mut caches = Vec::with_capacity(layers.len());
                let mut masks = Vec::with_capacity(layers.len());
                let mut input = xs;
                for (l, layer) in layers.iter().enumerate() {
                    let cache = lstm_forward(layer, p, input);
                    let last = l + 1 == layers.len();
                    let mask = (!last && use_dropout).then(|| {
                        let r = rng.as_deref_mut().expect("rng present");
                        cache
                            .hs
                            .iter()
                            .map(|_| dropout_mask(r, layer.hidden, self.dropout))
                            .collect::<Vec<_>>()
                    });
                    input = match &mask {
                        Some(m) => cache
                            .hs
                            .iter()
                            .zip(m)
                            .map(|(h, m)| h.iter().zip(m).map(|(a, b)| a * b).collect())
                            .collect(),
                        None => cache.hs.clone(),
                    };
                    caches.push(cache);
                    masks.push(mask);
                }
                let pooled = caches
                    .last()
                    .expect("at least one layer")
                    .hs
                    .last()
                    .expect("non-empty")
                    .clone();
                (EncCache::Lstm { layers: caches, masks }, pooled)
            }
            Encoder::Cnn(banks) => {
                let mut pooled = Vec::new();
                let mut caches = Vec::with_capacity(banks.len());
                for bank in banks {
                    let c = conv_forward(bank, p, &xs, self.dim());
                    pooled.extend(c.best.iter().map(|&(_, s)| s.max(0.0)));
                    caches.push(c);
                }
                (EncCache::Cnn { x: xs, banks: caches }, pooled)
            }
        };
        let pooled_mask = use_dropout.then(|| {
            let r = rng.expect("rng present");
            dropout_mask(r, pooled.len(), self.dropout)
        });
        if let Some(m) = &pooled_mask {
            pooled.iter_mut().zip(m).for_each(|(a, b)| *a *= b);
        }
        let mut head_in = pooled;
        if let Some(r) = ex.ratio {
            head_in.push(r);
        }
        debug_assert_eq!(head_in.len(), self.head.input);
        let (hidden_pre, hidden) = match self.head.hidden {
            Some((d, w, b)) => {
                let mut pre = b.of(p).to_vec();
                matvec_add(w.of(p), &head_in, &mut pre);
                debug_assert_eq!(pre.len(), d);
                let act = pre.iter().map(|v| v.max(0.0)).collect();
                (pre, act)
            }
            None => (Vec::new(), Vec::new()),
        };
        let last = if self.head.hidden.is_some() { &hidden } else { &head_in };
        let logit = self.head.b.of(p)[0] + self.head.w.of(p).iter().zip(last).map(|(a, b)| a * b).sum::<f64>();
        Forward {
            logit,
            enc,
            pooled_mask,
            head_in,
            hidden_pre,
            hidden,
        }
    }

    /// Accumulates `dlogit · ∂logit/∂θ` into `grad`.
    pub(crate) fn backward(
        &self,
        ex: &EncodedExample,
        fw: &Forward,
        dlogit: f64,
        grad: &mut Gradient,
        embeddings: bool,
    ) {
        let p = &self.dense;
        let g = &mut grad.dense;
        self.head.b.of_mut(g)[0] += dlogit;
        let mut d_head_in = vec![0.0; fw.head_in.len()];
        match self.head.hidden {
            Some((_, w, b)) => {
                let mut d_hidden: Vec<f64> = self.head.w.of(p).iter().map(|v| v * dlogit).collect();
                self.head
                    .w
                    .of_mut(g)
                    .iter_mut()
                    .zip(&fw.hidden)
                    .for_each(|(a, h)| *a += dlogit * h);
                d_hidden.iter_mut().zip(&fw.hidden_pre).for_each(|(d, pre)| {
                    if *pre <= 0.0 {
                        *d = 0.0
                    }
                });
                b.of_mut(g).iter_mut().zip(&d_hidden).for_each(|(a, d)| *a += d);
                outer_add(w.of_mut(g), &d_hidden, &fw.head_in);
                matvec_t_add(w.of(p), &d_hidden, &mut d_head_in);
            }
            None => {
                self.head
                    .w
                    .of_mut(g)
                    .iter_mut()
                    .zip(&fw.head_in)
                    .for_each(|(a, h)| *a += dlogit * h);
                d_head_in
                    .iter_mut()
                    .zip(self.head.w.of(p))
                    .for_each(|(d, w)| *d = dlogit * w);
            }
        }
        if ex.ratio.is_some() {
            d_head_in.pop();
        }
        let mut d_pooled = d_head_in;
        if let Some(m) = &fw.pooled_mask {
            d_pooled.iter_mut().zip(m).for_each(|(a, b)| *a *= b);
        }

        let dim = self.dim();
        let dxs: Vec<Vec<f64>> = match (&self.encoder, &fw.enc) {
            (Encoder::Lstm(layers), EncCache::Lstm { layers: caches, masks }) => {
                let t_len = caches[0].hs.len();
                let mut dh_out = vec![vec![0.0; layers.last().expect("layer").hidden]; t_len];
                dh_out[t_len - 1] = d_pooled;
                for l in (0..layers.len()).rev() {
                    let mut dx = lstm_backward(&layers[l], p, g, &caches[l], &dh_out);
                    if l > 0 {
                        if let Some(m) = &masks[l - 1] {
                            for (d, m) in dx.iter_mut().zip(m) {
                                d.iter_mut().zip(m).for_each(|(a, b)| *a *= b);
                            }
                        }
                    }
                    dh_out = dx;
                }
                dh_out
            }
            (Encoder::Cnn(banks), EncCache::Cnn { x, banks: caches }) => {
                let mut dx = vec![vec![0.0; dim]; x.len()];
                let mut off = 0;
                for (bank, cache) in banks.iter().zip(caches) {
                    conv_backward(bank, p, g, cache, x, &d_pooled[off..off + bank.filters], &mut dx, dim);
                    off += bank.filters;
                }
                dx
            }
            _ => unreachable!("cache kind matches encoder"),
        };
        if embeddings {
            for (&tok, dx) in ex.tokens.iter().zip(dxs) {
                match grad.emb.get_mut(&tok) {
                    Some(acc) => acc.iter_mut().zip(&dx).for_each(|(a, b)| *a += b),
                    None => {
                        grad.emb.insert(tok, dx);
                    }
                }
            }
        }
    }

    /// Loss and gradient of one example; dropout when `rng` is given.
    pub(crate) fn example_grad(
        &self,
        ex: &EncodedExample,
        rng: Option<&mut ChaCha8Rng>,
        grad: &mut Gradient,
        embeddings: bool,
    ) -> f64 {
        let fw = self.forward(ex, rng);
        let y = f64::from(ex.label);
        self.backward(ex, &fw, sigmoid(fw.logit) - y, grad, embeddings);
        bce_with_logits(fw.logit, y)
    }

    pub fn logit(&self, ex: &EncodedExample) -> Result<f64, DeepError> {
        self.check(ex)?;
        Ok(self.forward(ex, None).logit)
    }

    /// Probability of the remove class.
    pub fn predict_proba(&self, ex: &EncodedExample) -> Result<f64, DeepError> {
        self.logit(ex).map(sigmoid)
    }

    pub fn predict_batch(&self, examples: &[EncodedExample]) -> Result<Vec<f64>, DeepError> {
        crate::par::map(examples, |ex| self.predict_proba(ex))
            .into_iter()
            .collect()
    }

    pub(crate) fn validate_examples(&self, examples: &[EncodedExample]) -> Result<(), DeepError> {
        examples.iter().try_for_each(|ex| self.check(ex))
    }

    /// Mean loss over `examples` in evaluation mode.
    pub fn mean_loss(&self, examples: &[EncodedExample]) -> Result<f64, DeepError> {
        if examples.is_empty() {
            return Err(DeepError::Input("no examples".into()));
        }
        let losses = crate::par::map(examples, |ex| {
            self.logit(ex).map(|z| bce_with_logits(z, f64::from(ex.label)))
        });
        let mut sum = 0.0;
        for l in losses {
            sum += l?;
        }
        Ok(sum / examples.len() as f64)
    }

    /// Flat view of every parameter (embeddings first).
    pub fn flat_params(&self) -> Vec<f64> {
        let mut v = self.emb.clone();
        v.extend_from_slice(&self.dense);
        v
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<(), DeepError> {
        if flat.len() != self.parameter_count() {
            return Err(DeepError::Input(format!(
                "expected {} parameters, got {}",
                self.parameter_count(),
                flat.len()
            )));
        }
        let (e, d) = flat.split_at(self.emb.len());
        self.emb.copy_from_slice(e);
        self.dense.copy_from_slice(d);
        Ok(())
    }

    /// Analytic gradient of the mean evaluation-mode loss over `examples`,
    /// laid out like [`Network::flat_params`].
    pub fn loss_gradient(&self, examples: &[EncodedExample]) -> Result<Vec<f64>, DeepError> {
        self.validate_examples(examples)?;
        let mut grad = Gradient::zeros(self.dense.len());
        for ex in examples {
            self.example_grad(ex, None, &mut grad, true);
        }
        grad.scale(1.0 / examples.len() as f64);
        let dim = self.dim();
        let mut flat = vec![0.0; self.parameter_count()];
        for (row, g) in &grad.emb {
            flat[row * dim..(row + 1) * dim].copy_from_slice(g);
        }
        flat[self.emb.len()..].copy_from_slice(&grad.dense);
        Ok(flat)
    }
}

fn lstm_forward(layer: &LstmLayer, p: &[f64], xs: Vec<Vec<f64>>) -> LstmCache {
    let h = layer.hidden;
    let (w, u, b) = (layer.w.of(p), layer.u.of(p), layer.b.of(p));
    let t_len = xs.len();
    let mut cache = LstmCache {
        xs: Vec::new(),
        gates: Vec::with_capacity(t_len),
        cs: Vec::with_capacity(t_len),
        tanh_cs: Vec::with_capacity(t_len),
        hs: Vec::with_capacity(t_len),
    };
    let mut h_prev = vec![0.0; h];
    let mut c_prev = vec![0.0; h];
    for x in &xs {
        let mut z = b.to_vec();
        matvec_add(w, x, &mut z);
        matvec_add(u, &h_prev, &mut z);
        for k in 0..h {
            z[k] = sigmoid(z[k]);
            z[h + k] = sigmoid(z[h + k]);
            z[2 * h + k] = z[2 * h + k].tanh();
            z[3 * h + k] = sigmoid(z[3 * h + k]);
        }
        let c: Vec<f64> = (0..h).map(|k| z[h + k] * c_prev[k] + z[k] * z[2 * h + k]).collect();
        let tc: Vec<f64> = c.iter().map(|v| v.tanh()).collect();
        let hn: Vec<f64> = (0..h).map(|k| z[3 * h + k] * tc[k]).collect();
        cache.gates.push(z);
        cache.cs.push(c.clone());
        cache.tanh_cs.push(tc);
        cache.hs.push(hn.clone());
        h_prev = hn;
        c_prev = c;
    }
    cache.xs = xs;
    cache
}

/// Backpropagation through time; returns gradients w.r.t. the layer inputs.
fn lstm_backward(layer: &LstmLayer, p: &[f64], g: &mut [f64], cache: &LstmCache, dh_out: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let h = layer.hidden;
    let t_len = cache.hs.len();
    let (w, u) = (layer.w.of(p), layer.u.of(p));
    let mut dw = vec![0.0; layer.w.len];
    let mut du = vec![0.0; layer.u.len];
    let mut db = vec![0.0; layer.b.len];
    let mut dxs = vec![vec![0.0; layer.input]; t_len];
    let mut dh_next = vec![0.0; h];
    let mut dc_next = vec![0.0; h];
    let zero = vec![0.0; h];
    for t in (0..t_len).rev() {
        let gates = &cache.gates[t];
        let tc = &cache.tanh_cs[t];
        let c_prev = if t > 0 { &cache.cs[t - 1] } else { &zero };
        let h_prev = if t > 0 { &cache.hs[t - 1] } else { &zero };
        let mut dz = vec![0.0; 4 * h];
        for k in 0..h {
            let (i, f, gg, o) = (gates[k], gates[h + k], gates[2 * h + k], gates[3 * h + k]);
            let dh = dh_out[t][k] + dh_next[k];
            let d_o = dh * tc[k];
            let dc = dh * o * (1.0 - tc[k] * tc[k]) + dc_next[k];
            dz[k] = dc * gg * i * (1.0 - i);
            dz[h + k] = dc * c_prev[k] * f * (1.0 - f);
            dz[2 * h + k] = dc * i * (1.0 - gg * gg);
            dz[3 * h + k] = d_o * o * (1.0 - o);
            dc_next[k] = dc * f;
        }
        outer_add(&mut dw, &dz, &cache.xs[t]);
        outer_add(&mut du, &dz, h_prev);
        db.iter_mut().zip(&dz).for_each(|(a, b)| *a += b);
        matvec_t_add(w, &dz, &mut dxs[t]);
        dh_next.iter_mut().for_each(|v| *v = 0.0);
        matvec_t_add(u, &dz, &mut dh_next);
    }
    add_into(layer.w.of_mut(g), &dw);
    add_into(layer.u.of_mut(g), &du);
    add_into(layer.b.of_mut(g), &db);
    dxs
}

fn add_into(a: &mut [f64], b: &[f64]) {
    a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
}

/// Row `pos` of the input, or zeros past the end (short inputs are padded to the filter width).
fn padded_row<'a>(x: &'a [Vec<f64>], pos: usize, zero: &'a [f64]) -> &'a [f64] {
    x.get(pos).map_or(zero, |r| r.as_slice())
}

fn conv_forward(bank: &ConvBank, p: &[f64], x: &[Vec<f64>], dim: usize) -> ConvCache {
    let w = bank.w.of(p);
    let b = bank.b.of(p);
    let zero = vec![0.0; dim];
    let positions = x.len().max(bank.width) - bank.width + 1;
    let span = bank.width * dim;
    let best = (0..bank.filters)
        .map(|f| {
            let wf = &w[f * span..(f + 1) * span];
            let mut best = (0, f64::NEG_INFINITY);
            for pos in 0..positions {
                let mut s = b[f];
                for k in 0..bank.width {
                    let row = padded_row(x, pos + k, &zero);
                    s += wf[k * dim..(k + 1) * dim]
                        .iter()
                        .zip(row)
                        .map(|(a, b)| a * b)
                        .sum::<f64>();
                }
                if s > best.1 {
                    best = (pos, s);
                }
            }
            best
        })
        .collect();
    ConvCache { best }
}

#[allow(clippy::too_many_arguments)]
fn conv_backward(
    bank: &ConvBank,
    p: &[f64],
    g: &mut [f64],
    cache: &ConvCache,
    x: &[Vec<f64>],
    d_pooled: &[f64],
    dx: &mut [Vec<f64>],
    dim: usize,
) {
    let w = bank.w.of(p);
    let span = bank.width * dim;
    let zero = vec![0.0; dim];
    for (f, (&(pos, s), &d)) in cache.best.iter().zip(d_pooled).enumerate() {
        if s <= 0.0 || d == 0.0 {
            continue;
        }
        bank.b.of_mut(g)[f] += d;
        let gw = &mut bank.w.of_mut(g)[f * span..(f + 1) * span];
        let wf = &w[f * span..(f + 1) * span];
        for k in 0..bank.width {
            let row = padded_row(x, pos + k, &zero);
            gw[k * dim..(k + 1) * dim]
                .iter_mut()
                .zip(row)
                .for_each(|(a, b)| *a += d * b);
            if let Some(drow) = dx.get_mut(pos + k) {
                drow.iter_mut()
                    .zip(&wf[k * dim..(k + 1) * dim])
                    .for_each(|(a, b)| *a += d * b);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::deepmodels::MODEL_SPECS;

    fn tiny_table() -> EmbeddingTable {
        let rows = ["gut", "schlecht", "idiot", "danke", "artikel"]
            .iter()
            .enumerate()
            .map(|(i, t)| {
                (
                    t.to_string(),
                    (0..4).map(|j| ((i * 4 + j) as f64 * 0.37).sin()).collect(),
                )
            })
            .collect();
        EmbeddingTable::from_vectors(4, rows, 11).unwrap()
    }

    fn tiny_arch() -> ArchConfig {
        ArchConfig {
            lstm_hidden: 3,
            lstm_advanced_layers: 2,
            dropout: 0.2,
            cnn1_widths: vec![2, 3],
            cnn1_filters: 3,
            cnn2_widths: vec![2],
            cnn2_filters: 4,
            cnn2_dense: 3,
        }
    }

    #[test]
    fn logits_are_finite_for_every_spec() {
        let table = tiny_table();
        for spec in &MODEL_SPECS {
            let net = build_model(spec, &table, &tiny_arch(), 3).unwrap();
            let ex = EncodedExample {
                tokens: vec![table.lookup("KOMMENTAR"), table.lookup("idiot")],
                ratio: spec.needs_ratio().then_some(0.4),
                label: 1,
            };
            let p = net.predict_proba(&ex).unwrap();
            assert!(p > 0.0 && p < 1.0, "{}", spec.name);
        }
    }

    #[test]
    fn ratio_presence_is_enforced() {
        let table = tiny_table();
        let base = build_model(&MODEL_SPECS[0], &table, &tiny_arch(), 1).unwrap();
        let adv = build_model(&MODEL_SPECS[4], &table, &tiny_arch(), 1).unwrap();
        let seq = TokenSequence {
            tokens: vec!["KOMMENTAR".into(), "gut".into()],
        };
        assert!(base.encode(&seq, Some(0.5), 0).is_err());
        assert!(adv.encode(&seq, None, 0).is_err());
        assert!(adv.encode(&seq, Some(1.5), 0).is_err());
        let ex = adv.encode(&seq, Some(0.5), 0).unwrap();
        assert_eq!(ex.tokens, [table.lookup("KOMMENTAR"), table.lookup("gut")]);
    }

    #[test]
    fn same_seed_same_weights() {
        let table = tiny_table();
        let a = build_model(&MODEL_SPECS[5], &table, &tiny_arch(), 9).unwrap();
        let b = build_model(&MODEL_SPECS[5], &table, &tiny_arch(), 9).unwrap();
        let c = build_model(&MODEL_SPECS[5], &table, &tiny_arch(), 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.dense, c.dense);
    }

    #[test]
    fn short_input_is_padded_for_wide_filters() {
        let table = tiny_table();
        let net = build_model(&MODEL_SPECS[6], &table, &tiny_arch(), 2).unwrap();
        let ex = EncodedExample {
            tokens: vec![table.lookup("KOMMENTAR")],
            ratio: Some(0.1),
            label: 0,
        };
        assert!(net.predict_proba(&ex).unwrap().is_finite());
    }

    #[test]
    fn bce_matches_naive_formula() {
        for &(z, y) in &[(0.3, 1.0), (-2.0, 0.0), (5.0, 0.0), (-0.7, 1.0)] {
            let p = sigmoid(z);
            let naive = -(y * p.ln() + (1.0 - y) * (1.0 - p).ln());
            assert!((bce_with_logits(z, y) - naive).abs() < 1e-12);
        }
    }
}
