//! Projection heads and the tri-modal contrastive objective.
//!
//! Each modality has a head `x -> L2(BN(W2 relu(W1 x + b1) + b2))`. The
//! training objective sums InfoNCE over both directions of the three modality
//! pairs. Gradients are written out by hand and checked against finite
//! differences in the test suite.

use std::collections::BTreeMap;
use std::io::{Cursor, Read};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{AtlasError, FormatError, Result};
use crate::rng::substream;

/// Smallest accepted temperature. Anything below risks overflow in the
/// similarity logits.
pub const MIN_TEMPERATURE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadShape {
    pub d_in: usize,
    pub d_hidden: usize,
    pub d_out: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionHead {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
    pub momentum: f64,
    pub eps: f64,
}

/// Gradients of one head, shaped like its trainable parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadGrads {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running statistics are updated by `project_train`.
    Train,
    Eval,
}

/// Intermediate values kept for the backward pass.
#[derive(Debug, Clone)]
pub struct Cache {
    x: Array2<f64>,
    a1: Array2<f64>,
    h: Array2<f64>,
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
    y_norm: Array1<f64>,
    z: Array2<f64>,
    batch_mean: Array1<f64>,
    batch_var: Array1<f64>,
    mode: Mode,
}

impl Cache {
    pub fn output(&self) -> &Array2<f64> {
        &self.z
    }
}

fn uniform(rows: usize, cols: usize, bound: f64, rng: &mut impl Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-bound..bound))
}

impl ProjectionHead {
    /// Fan-in scaled uniform weights, zero biases, identity batch norm.
    pub fn init(shape: HeadShape, rng: &mut impl Rng) -> Self {
        let HeadShape { d_in, d_hidden, d_out } = shape;
        let w1 = uniform(d_in, d_hidden, 1.0 / (d_in as f64).sqrt(), rng);
        let w2 = uniform(d_hidden, d_out, 1.0 / (d_hidden as f64).sqrt(), rng);
        ProjectionHead {
            w1,
            b1: Array1::zeros(d_hidden),
            w2,
            b2: Array1::zeros(d_out),
            gamma: Array1::ones(d_out),
            beta: Array1::zeros(d_out),
            running_mean: Array1::zeros(d_out),
            running_var: Array1::ones(d_out),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn shape(&self) -> HeadShape {
        HeadShape {
            d_in: self.w1.nrows(),
            d_hidden: self.w1.ncols(),
            d_out: self.w2.ncols(),
        }
    }

    pub fn forward(&self, x: ArrayView2<f64>, mode: Mode) -> Result<Cache> {
        if x.ncols() != self.w1.nrows() {
            return Err(AtlasError::Argument(format!(
                "input has {} features, head expects {}",
                x.ncols(),
                self.w1.nrows()
            )));
        }
        let b = x.nrows();
        if mode == Mode::Train && b < 2 {
            return Err(AtlasError::Degenerate(
                "batch norm needs at least two rows in training mode".into(),
            ));
        }
        let a1 = x.dot(&self.w1) + &self.b1;
        let h = a1.mapv(|v| v.max(0.0));
        let a2 = h.dot(&self.w2) + &self.b2;
        let (batch_mean, batch_var) = if b > 0 {
            let mean = a2.mean_axis(Axis(0)).expect("non-empty batch");
            let var = (&a2 - &mean).mapv(|v| v * v).mean_axis(Axis(0)).expect("non-empty batch");
            (mean, var)
        } else {
            (Array1::zeros(a2.ncols()), Array1::zeros(a2.ncols()))
        };
        let (mean, var) = match mode {
            Mode::Train => (&batch_mean, &batch_var),
            Mode::Eval => (&self.running_mean, &self.running_var),
        };
        let inv_std = var.mapv(|v| 1.0 / (v + self.eps).sqrt());
        let xhat = (&a2 - mean) * &inv_std;
        let y = &xhat * &self.gamma + &self.beta;
        let y_norm = y.map_axis(Axis(1), |r| r.dot(&r).sqrt());
        let mut z = y;
        for (mut row, n) in z.axis_iter_mut(Axis(0)).zip(y_norm.iter()) {
            if *n > 0.0 {
                row /= *n;
            }
        }
        Ok(Cache {
            x: x.to_owned(),
            a1,
            h,
            xhat,
            inv_std,
            y_norm,
            z,
            batch_mean,
            batch_var,
            mode,
        })
    }

    /// Unit-norm projections; training mode also updates running statistics.
    pub fn project_train(&mut self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        let cache = self.forward(x, Mode::Train)?;
        self.update_running(&cache);
        Ok(cache.z)
    }

    pub fn project_eval(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        Ok(self.forward(x, Mode::Eval)?.z)
    }

    pub fn update_running(&mut self, cache: &Cache) {
        let b = cache.x.nrows() as f64;
        let m = self.momentum;
        let unbiased = &cache.batch_var * (b / (b - 1.0));
        self.running_mean = &self.running_mean * (1.0 - m) + &cache.batch_mean * m;
        self.running_var = &self.running_var * (1.0 - m) + unbiased * m;
    }

    /// Backpropagates `dz` (gradient w.r.t. the unit-norm outputs).
    pub fn backward(&self, cache: &Cache, dz: &Array2<f64>) -> HeadGrads {
        let b = cache.x.nrows() as f64;
        // z = y / |y|
        let mut dy = dz.clone();
        for ((mut row, zr), n) in dy.axis_iter_mut(Axis(0)).zip(cache.z.axis_iter(Axis(0))).zip(&cache.y_norm) {
            let proj = row.dot(&zr);
            if *n > 0.0 {
                Zip::from(&mut row).and(&zr).for_each(|g, z| *g = (*g - z * proj) / n);
            }
        }
        let dgamma = (&dy * &cache.xhat).sum_axis(Axis(0));
        let dbeta = dy.sum_axis(Axis(0));
        let dxhat = &dy * &self.gamma;
        let da2 = match cache.mode {
            Mode::Train => {
                let sum = dxhat.sum_axis(Axis(0));
                let sum_x = (&dxhat * &cache.xhat).sum_axis(Axis(0));
                ((&dxhat * b) - &sum - &cache.xhat * &sum_x) * &cache.inv_std / b
            }
            Mode::Eval => &dxhat * &cache.inv_std,
        };
        let dw2 = cache.h.t().dot(&da2);
        let db2 = da2.sum_axis(Axis(0));
        let mut da1 = da2.dot(&self.w2.t());
        Zip::from(&mut da1).and(&cache.a1).for_each(|g, a| {
            if *a <= 0.0 {
                *g = 0.0;
            }
        });
        let dw1 = cache.x.t().dot(&da1);
        let db1 = da1.sum_axis(Axis(0));
        HeadGrads {
            w1: dw1,
            b1: db1,
            w2: dw2,
            b2: db2,
            gamma: dgamma,
            beta: dbeta,
        }
    }

    /// Trainable tensors as flat views, in a fixed order.
    pub fn params_mut(&mut self) -> [(&'static str, &mut [f64]); 6] {
        [
            ("w1", self.w1.as_slice_mut().expect("standard layout")),
            ("b1", self.b1.as_slice_mut().expect("standard layout")),
            ("w2", self.w2.as_slice_mut().expect("standard layout")),
            ("b2", self.b2.as_slice_mut().expect("standard layout")),
            ("gamma", self.gamma.as_slice_mut().expect("standard layout")),
            ("beta", self.beta.as_slice_mut().expect("standard layout")),
        ]
    }
}

impl HeadGrads {
    pub fn tensors(&self) -> [(&'static str, &[f64]); 6] {
        [
            ("w1", self.w1.as_slice().expect("standard layout")),
            ("b1", self.b1.as_slice().expect("standard layout")),
            ("w2", self.w2.as_slice().expect("standard layout")),
            ("b2", self.b2.as_slice().expect("standard layout")),
            ("gamma", self.gamma.as_slice().expect("standard layout")),
            ("beta", self.beta.as_slice().expect("standard layout")),
        ]
    }
}

fn check_temperature(tau: f64) -> Result<()> {
    if !(tau.is_finite() && tau >= MIN_TEMPERATURE) {
        return Err(AtlasError::Argument(format!(
            "temperature must be at least {MIN_TEMPERATURE}, got {tau}"
        )));
    }
    Ok(())
}

/// Row-wise softmax cross-entropy against the diagonal of `logits`, with the
/// gradient `(softmax - I) / B`.
fn diagonal_ce(logits: &Array2<f64>) -> (f64, Array2<f64>) {
    let b = logits.nrows();
    let mut grad = Array2::<f64>::zeros(logits.dim());
    let mut loss = 0.0;
    for i in 0..b {
        let row = logits.row(i);
        let max = row.fold(f64::NEG_INFINITY, |m, v| m.max(*v));
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        loss += lse - logits[[i, i]];
        for j in 0..b {
            grad[[i, j]] = (logits[[i, j]] - lse).exp() / b as f64;
        }
        grad[[i, i]] -= 1.0 / b as f64;
    }
    (loss / b as f64, grad)
}

/// `L(a -> b)`: each row of `za` must pick its own row of `zb`.
pub fn info_nce(za: ArrayView2<f64>, zb: ArrayView2<f64>, tau: f64) -> Result<f64> {
    check_temperature(tau)?;
    if za.dim() != zb.dim() {
        return Err(AtlasError::Argument("batch shapes differ".into()));
    }
    if za.nrows() == 0 {
        return Ok(0.0);
    }
    let logits = za.dot(&zb.t()) / tau;
    Ok(diagonal_ce(&logits).0)
}

/// Both directions of one pair, with gradients for each side.
fn pair_loss(za: &Array2<f64>, zb: &Array2<f64>, tau: f64) -> (f64, Array2<f64>, Array2<f64>) {
    let logits = za.dot(&zb.t()) / tau;
    let (l_ab, g_ab) = diagonal_ce(&logits);
    let (l_ba, g_ba) = diagonal_ce(&logits.t().to_owned());
    // dS for the a->b logits, with the b->a term folded back in.
    let ds = (g_ab + g_ba.t()) / tau;
    let dza = ds.dot(zb);
    let dzb = ds.t().dot(za);
    (l_ab + l_ba, dza, dzb)
}

/// Sum of the six directional InfoNCE terms.
pub fn total_loss(zhe: ArrayView2<f64>, zmif: ArrayView2<f64>, ztxt: ArrayView2<f64>, tau: f64) -> Result<f64> {
    check_temperature(tau)?;
    if zhe.dim() != zmif.dim() || zhe.dim() != ztxt.dim() {
        return Err(AtlasError::Argument("modality batches differ in shape".into()));
    }
    let mut total = 0.0;
    for (a, b) in [(zhe, zmif), (zmif, ztxt), (zhe, ztxt)] {
        total += info_nce(a, b, tau)? + info_nce(b, a, tau)?;
    }
    Ok(total)
}

/// One head per modality, in H&E, mIF, text order.
#[derive(Debug, Clone, PartialEq)]
pub struct TriHeads {
    pub heads: [ProjectionHead; 3],
}

/// Paired features for one batch, rows aligned across modalities.
#[derive(Debug, Clone, Copy)]
pub struct Batch<'a> {
    pub he: ArrayView2<'a, f64>,
    pub mif: ArrayView2<'a, f64>,
    pub txt: ArrayView2<'a, f64>,
}

impl Batch<'_> {
    fn parts(&self) -> [ArrayView2<'_, f64>; 3] {
        [self.he, self.mif, self.txt]
    }
}

impl TriHeads {
    pub fn init(shapes: [HeadShape; 3], seed: u64) -> Self {
        let mut rng = substream(seed, "align_init");
        TriHeads {
            heads: shapes.map(|s| ProjectionHead::init(s, &mut rng)),
        }
    }

    /// Loss and gradients of the six-term objective, in training mode.
    /// Running statistics are left untouched.
    pub fn loss_and_grads(&self, batch: Batch<'_>, tau: f64) -> Result<(f64, [HeadGrads; 3], [Cache; 3])> {
        check_temperature(tau)?;
        let parts = batch.parts();
        let n = parts[0].nrows();
        if parts.iter().any(|p| p.nrows() != n) {
            return Err(AtlasError::Argument("modality batches differ in size".into()));
        }
        let caches = [
            self.heads[0].forward(parts[0], Mode::Train)?,
            self.heads[1].forward(parts[1], Mode::Train)?,
            self.heads[2].forward(parts[2], Mode::Train)?,
        ];
        let mut dz: [Array2<f64>; 3] = std::array::from_fn(|m| Array2::zeros(caches[m].z.dim()));
        let mut loss = 0.0;
        for (a, b) in [(0, 1), (1, 2), (0, 2)] {
            let (l, da, db) = pair_loss(&caches[a].z, &caches[b].z, tau);
            loss += l;
            dz[a] += &da;
            dz[b] += &db;
        }
        let grads = std::array::from_fn(|m| self.heads[m].backward(&caches[m], &dz[m]));
        Ok((loss, grads, caches))
    }

    pub fn loss(&self, batch: Batch<'_>, tau: f64) -> Result<f64> {
        let parts = batch.parts();
        let z: Vec<Array2<f64>> = (0..3)
            .map(|m| Ok(self.heads[m].forward(parts[m], Mode::Train)?.z))
            .collect::<Result<_>>()?;
        total_loss(z[0].view(), z[1].view(), z[2].view(), tau)
    }

    pub fn project_eval(&self, batch: Batch<'_>) -> Result<[Array2<f64>; 3]> {
        let parts = batch.parts();
        Ok([
            self.heads[0].project_eval(parts[0])?,
            self.heads[1].project_eval(parts[1])?,
            self.heads[2].project_eval(parts[2])?,
        ])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Projection,
    HeEncoder,
    TextEncoder,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearningRates {
    pub projection: f64,
    /// Encoder groups are declared for completeness; encoders stay frozen.
    pub he_encoder: f64,
    pub text_encoder: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        LearningRates {
            projection: 1e-4,
            he_encoder: 1e-5,
            text_encoder: 2e-5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AlignConfig {
    pub temperature: f64,
    pub batch_size: usize,
    pub lr: LearningRates,
    pub warmup_steps: usize,
    pub epochs: usize,
    /// Stops early once this many optimizer steps have run.
    pub max_steps: Option<usize>,
    pub weight_decay: f64,
    pub d_hidden: usize,
    pub d_out: usize,
    pub seed: u64,
}

impl Default for AlignConfig {
    fn default() -> Self {
        AlignConfig {
            temperature: 0.07,
            batch_size: 128,
            lr: LearningRates::default(),
            warmup_steps: 5000,
            epochs: 25,
            max_steps: None,
            weight_decay: 0.01,
            d_hidden: 1024,
            d_out: 512,
            seed: 0,
        }
    }
}

impl AlignConfig {
    pub fn peak_lr(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Projection => self.lr.projection,
            ParamGroup::HeEncoder => self.lr.he_encoder,
            ParamGroup::TextEncoder => self.lr.text_encoder,
        }
    }

    pub fn steps_per_epoch(&self, n: usize) -> usize {
        n / self.batch_size.max(1)
    }

    pub fn total_steps(&self, n: usize) -> usize {
        let full = self.epochs * self.steps_per_epoch(n);
        self.max_steps.map_or(full, |m| m.min(full))
    }
}

/// Linear warmup to the group's peak, then cosine decay to 0 at `total`.
pub fn lr_at(step: usize, total: usize, cfg: &AlignConfig, group: ParamGroup) -> f64 {
    let peak = cfg.peak_lr(group);
    let warm = cfg.warmup_steps;
    if step < warm {
        return peak * step as f64 / warm as f64;
    }
    if total <= warm {
        return peak;
    }
    let progress = ((step - warm) as f64 / (total - warm) as f64).min(1.0);
    peak * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// AdamW moments for one head.
#[derive(Debug, Clone)]
struct Moments {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

/// Optimizer state for all three heads.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub step: usize,
    pub lr: f64,
    moments: Vec<Moments>,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

impl TrainState {
    pub fn new(heads: &TriHeads) -> Self {
        let moments = heads
            .heads
            .iter()
            .map(|h| {
                let mut h = h.clone();
                let sizes: Vec<usize> = h.params_mut().iter().map(|(_, p)| p.len()).collect();
                Moments {
                    m: sizes.iter().map(|n| vec![0.0; *n]).collect(),
                    v: sizes.iter().map(|n| vec![0.0; *n]).collect(),
                }
            })
            .collect();
        TrainState {
            step: 0,
            lr: 0.0,
            moments,
        }
    }

    /// One AdamW update. Weight decay is decoupled and applies to weight
    /// matrices only.
    pub fn apply(&mut self, heads: &mut TriHeads, grads: &[HeadGrads; 3], lr: f64, weight_decay: f64) {
        self.step += 1;
        self.lr = lr;
        let t = self.step as i32;
        let c1 = 1.0 - ADAM_BETA1.powi(t);
        let c2 = 1.0 - ADAM_BETA2.powi(t);
        for ((head, g), mom) in heads.heads.iter_mut().zip(grads).zip(&mut self.moments) {
            for (k, ((name, p), (_, gk))) in head.params_mut().into_iter().zip(g.tensors()).enumerate() {
                let decay = if name.starts_with('w') { weight_decay } else { 0.0 };
                let (m, v) = (&mut mom.m[k], &mut mom.v[k]);
                for i in 0..p.len() {
                    m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * gk[i];
                    v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * gk[i] * gk[i];
                    let update = (m[i] / c1) / ((v[i] / c2).sqrt() + ADAM_EPS);
                    p[i] -= lr * (update + decay * p[i]);
                }
            }
        }
    }
}

/// Full training set: one row per patch in each modality, rows aligned.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub he: Array2<f64>,
    pub mif: Array2<f64>,
    pub txt: Array2<f64>,
}

impl TrainData {
    pub fn len(&self) -> usize {
        self.he.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn shapes(&self, cfg: &AlignConfig) -> [HeadShape; 3] {
        [&self.he, &self.mif, &self.txt].map(|m| HeadShape {
            d_in: m.ncols(),
            d_hidden: cfg.d_hidden,
            d_out: cfg.d_out,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub initial: TriHeads,
    pub heads: TriHeads,
    pub trace: Vec<TraceRow>,
}

/// Trains the three heads. Each epoch reshuffles with a seeded stream and
/// drops the final incomplete batch.
pub fn train(data: &TrainData, cfg: &AlignConfig) -> Result<TrainOutput> {
    let n = data.len();
    if data.mif.nrows() != n || data.txt.nrows() != n {
        return Err(AtlasError::Argument("modalities have different row counts".into()));
    }
    if cfg.batch_size < 2 {
        return Err(AtlasError::Config("batch_size must be at least 2".into()));
    }
    if n < cfg.batch_size {
        return Err(AtlasError::Config(format!(
            "{n} paired items is fewer than batch_size {}; use a smaller batch",
            cfg.batch_size
        )));
    }
    check_temperature(cfg.temperature)?;
    let initial = TriHeads::init(data.shapes(cfg), cfg.seed);
    let mut heads = initial.clone();
    let mut state = TrainState::new(&heads);
    let total = cfg.total_steps(n);
    let mut shuffle_rng = substream(cfg.seed, "align_shuffle");
    let mut order: Vec<usize> = (0..n).collect();
    let mut trace = Vec::with_capacity(total);
    let b = cfg.batch_size;
    'epochs: for _ in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        for chunk in order.chunks_exact(b) {
            if state.step >= total {
                break 'epochs;
            }
            let he = data.he.select(Axis(0), chunk);
            let mif = data.mif.select(Axis(0), chunk);
            let txt = data.txt.select(Axis(0), chunk);
            let batch = Batch {
                he: he.view(),
                mif: mif.view(),
                txt: txt.view(),
            };
            let (loss, grads, caches) = heads.loss_and_grads(batch, cfg.temperature)?;
            for (h, c) in heads.heads.iter_mut().zip(&caches) {
                h.update_running(c);
            }
            let lr = lr_at(state.step, total, cfg, ParamGroup::Projection);
            trace.push(TraceRow {
                step: state.step,
                loss,
                lr,
            });
            state.apply(&mut heads, &grads, lr, cfg.weight_decay);
        }
    }
    Ok(TrainOutput { initial, heads, trace })
}

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"HKCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Named f64 tensors (rank 1 or 2), little-endian.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub tensors: BTreeMap<String, Array2<f64>>,
}

fn take<'a>(cur: &mut Cursor<&'a [u8]>, n: usize) -> Result<&'a [u8], FormatError> {
    let pos = cur.position() as usize;
    let buf = *cur.get_ref();
    let available = buf.len().saturating_sub(pos);
    if available < n {
        return Err(FormatError::Truncated { needed: n, available });
    }
    cur.set_position((pos + n) as u64);
    Ok(&buf[pos..pos + n])
}

fn read_u32(cur: &mut Cursor<&[u8]>) -> Result<u32, FormatError> {
    Ok(u32::from_le_bytes(take(cur, 4)?.try_into().expect("4 bytes")))
}

fn read_u64(cur: &mut Cursor<&[u8]>) -> Result<u64, FormatError> {
    Ok(u64::from_le_bytes(take(cur, 8)?.try_into().expect("8 bytes")))
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.nrows() as u64).to_le_bytes());
            out.extend_from_slice(&(t.ncols() as u64).to_le_bytes());
            for v in t.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, FormatError> {
        let mut cur = Cursor::new(bytes);
        let mut magic = [0u8; 4];
        magic.copy_from_slice(take(&mut cur, 4)?);
        if magic != CHECKPOINT_MAGIC {
            return Err(FormatError::BadMagic {
                expected: CHECKPOINT_MAGIC,
                found: magic,
            });
        }
        let version = read_u32(&mut cur)?;
        if version != CHECKPOINT_VERSION {
            return Err(FormatError::UnsupportedVersion(version));
        }
        let count = read_u32(&mut cur)?;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let len = read_u32(&mut cur)? as usize;
            let name = std::str::from_utf8(take(&mut cur, len)?)
                .map_err(|_| FormatError::InvalidId)?
                .to_string();
            let rows = read_u64(&mut cur)? as usize;
            let cols = read_u64(&mut cur)? as usize;
            let n = rows
                .checked_mul(cols)
                .and_then(|n| n.checked_mul(8))
                .ok_or_else(|| FormatError::ShapeMismatch(format!("{rows}x{cols} overflows")))?;
            let raw = take(&mut cur, n)?;
            let data: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t = Array2::from_shape_vec((rows, cols), data)
                .map_err(|e| FormatError::ShapeMismatch(e.to_string()))?;
            tensors.insert(name, t);
        }
        let mut rest = Vec::new();
        cur.read_to_end(&mut rest).expect("in-memory read");
        if !rest.is_empty() {
            return Err(FormatError::ShapeMismatch(format!("{} trailing bytes", rest.len())));
        }
        Ok(Checkpoint { tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.encode()).map_err(|e| AtlasError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| AtlasError::io(path, e))?;
        Ok(Checkpoint::decode(&bytes)?)
    }
}

const HEAD_PREFIXES: [&str; 3] = ["he", "mif", "txt"];

fn row(v: &Array1<f64>) -> Array2<f64> {
    v.clone().insert_axis(Axis(0))
}

impl TriHeads {
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut tensors = BTreeMap::new();
        for (prefix, h) in HEAD_PREFIXES.iter().zip(&self.heads) {
            let mut put = |name: &str, t: Array2<f64>| {
                tensors.insert(format!("{prefix}.{name}"), t);
            };
            put("w1", h.w1.clone());
            put("b1", row(&h.b1));
            put("w2", h.w2.clone());
            put("b2", row(&h.b2));
            put("gamma", row(&h.gamma));
            put("beta", row(&h.beta));
            put("running_mean", row(&h.running_mean));
            put("running_var", row(&h.running_var));
            put("bn", Array2::from_shape_vec((1, 2), vec![h.momentum, h.eps]).expect("1x2"));
        }
        Checkpoint { tensors }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let get = |key: String| -> Result<Array2<f64>> {
            ck.tensors
                .get(&key)
                .cloned()
                .ok_or_else(|| AtlasError::Integrity(format!("checkpoint lacks tensor {key}")))
        };
        let vec = |key: String| -> Result<Array1<f64>> { Ok(get(key)?.row(0).to_owned()) };
        let mut heads = Vec::with_capacity(3);
        for prefix in HEAD_PREFIXES {
            let bn = get(format!("{prefix}.bn"))?;
            let h = ProjectionHead {
                w1: get(format!("{prefix}.w1"))?,
                b1: vec(format!("{prefix}.b1"))?,
                w2: get(format!("{prefix}.w2"))?,
                b2: vec(format!("{prefix}.b2"))?,
                gamma: vec(format!("{prefix}.gamma"))?,
                beta: vec(format!("{prefix}.beta"))?,
                running_mean: vec(format!("{prefix}.running_mean"))?,
                running_var: vec(format!("{prefix}.running_var"))?,
                momentum: bn[[0, 0]],
                eps: bn[[0, 1]],
            };
            let s = h.shape();
            let consistent = h.b1.len() == s.d_hidden
                && h.w2.nrows() == s.d_hidden
                && [&h.b2, &h.gamma, &h.beta, &h.running_mean, &h.running_var]
                    .iter()
                    .all(|v| v.len() == s.d_out);
            if !consistent {
                return Err(AtlasError::Integrity(format!("head {prefix} has inconsistent shapes")));
            }
            heads.push(h);
        }
        let heads: [ProjectionHead; 3] = heads.try_into().expect("three heads");
        Ok(TriHeads { heads })
    }
}

/// Central finite-difference check of `loss_and_grads`. Returns the largest
/// entrywise error `|a - n| / max(|a|, |n|, floor)` over every parameter.
pub fn gradient_check(heads: &TriHeads, batch: Batch<'_>, tau: f64, h: f64, floor: f64) -> Result<f64> {
    let (_, grads, _) = heads.loss_and_grads(batch, tau)?;
    let mut worst = 0.0f64;
    for m in 0..3 {
        let tensors = grads[m].tensors();
        for (k, (_, g)) in tensors.iter().enumerate() {
            for i in 0..g.len() {
                let mut plus = heads.clone();
                plus.heads[m].params_mut()[k].1[i] += h;
                let mut minus = heads.clone();
                minus.heads[m].params_mut()[k].1[i] -= h;
                let numeric = (plus.loss(batch, tau)? - minus.loss(batch, tau)?) / (2.0 * h);
                let a = g[i];
                let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
                worst = worst.max(err);
            }
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::StandardNormal;

    fn gaussian(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut rng = crate::rng::seeded(seed);
        Array2::from_shape_simple_fn((rows, cols), || rng.sample(StandardNormal))
    }

    fn row_norms_are_one(z: &Array2<f64>) -> bool {
        z.rows().into_iter().all(|r| (r.dot(&r).sqrt() - 1.0).abs() < 1e-6)
    }

    #[test]
    fn identity_head_in_eval_mode() {
        let shape = HeadShape { d_in: 3, d_hidden: 3, d_out: 3 };
        let mut h = ProjectionHead::init(shape, &mut crate::rng::seeded(0));
        h.w1 = Array2::eye(3);
        h.w2 = Array2::eye(3);
        h.eps = 0.0;
        let x = ndarray::array![[3.0, 4.0, 0.0], [0.0, 2.0, 0.0]];
        let z = h.project_eval(x.view()).unwrap();
        assert!((z[[0, 0]] - 0.6).abs() < 1e-12 && (z[[0, 1]] - 0.8).abs() < 1e-12);
        assert!((z[[1, 1]] - 1.0).abs() < 1e-12);
    }

    /// Loop-by-loop forward pass in training mode.
    fn naive_forward(h: &ProjectionHead, x: &Array2<f64>) -> Array2<f64> {
        let (b, din) = x.dim();
        let dh = h.w1.ncols();
        let dout = h.w2.ncols();
        let mut hid = vec![vec![0.0; dh]; b];
        for i in 0..b {
            for j in 0..dh {
                let mut s = h.b1[j];
                for k in 0..din {
                    s += x[[i, k]] * h.w1[[k, j]];
                }
                hid[i][j] = if s > 0.0 { s } else { 0.0 };
            }
        }
        let mut a2 = vec![vec![0.0; dout]; b];
        for i in 0..b {
            for j in 0..dout {
                let mut s = h.b2[j];
                for k in 0..dh {
                    s += hid[i][k] * h.w2[[k, j]];
                }
                a2[i][j] = s;
            }
        }
        let mut out = Array2::zeros((b, dout));
        for j in 0..dout {
            let mean: f64 = (0..b).map(|i| a2[i][j]).sum::<f64>() / b as f64;
            let var: f64 = (0..b).map(|i| (a2[i][j] - mean).powi(2)).sum::<f64>() / b as f64;
            for i in 0..b {
                out[[i, j]] = h.gamma[j] * (a2[i][j] - mean) / (var + h.eps).sqrt() + h.beta[j];
            }
        }
        for i in 0..b {
            let n: f64 = (0..dout).map(|j| out[[i, j]] * out[[i, j]]).sum::<f64>().sqrt();
            for j in 0..dout {
                out[[i, j]] /= n;
            }
        }
        out
    }

    #[test]
    fn forward_matches_naive_loops() {
        let shape = HeadShape { d_in: 5, d_hidden: 7, d_out: 4 };
        let mut h = ProjectionHead::init(shape, &mut crate::rng::seeded(3));
        h.b1 = Array1::from_iter((0..7).map(|i| 0.1 * i as f64 - 0.3));
        h.gamma = Array1::from_iter((0..4).map(|i| 0.5 + 0.25 * i as f64));
        h.beta = Array1::from_iter((0..4).map(|i| 0.1 * i as f64));
        let x = gaussian(6, 5, 4);
        let z = h.forward(x.view(), Mode::Train).unwrap().z;
        let naive = naive_forward(&h, &x);
        assert!((&z - &naive).iter().all(|d| d.abs() < 1e-12));
        assert!(row_norms_are_one(&z));
    }

    #[test]
    fn single_row_training_batch_is_rejected() {
        let shape = HeadShape { d_in: 2, d_hidden: 2, d_out: 2 };
        let mut h = ProjectionHead::init(shape, &mut crate::rng::seeded(0));
        assert!(matches!(h.project_train(gaussian(1, 2, 0).view()), Err(AtlasError::Degenerate(_))));
        assert!(h.project_eval(gaussian(1, 2, 0).view()).is_ok());
    }

    #[test]
    fn running_stats_use_unbiased_variance() {
        let shape = HeadShape { d_in: 2, d_hidden: 3, d_out: 2 };
        let mut h = ProjectionHead::init(shape, &mut crate::rng::seeded(5));
        let x = gaussian(4, 2, 6);
        let c = h.forward(x.view(), Mode::Train).unwrap();
        h.update_running(&c);
        let want = 0.9 + 0.1 * c.batch_var[0] * 4.0 / 3.0;
        assert!((h.running_var[0] - want).abs() < 1e-15);
    }

    #[test]
    fn info_nce_special_values() {
        let one = ndarray::array![[1.0, 0.0]];
        assert_eq!(info_nce(one.view(), one.view(), 0.07).unwrap(), 0.0);
        let same = Array2::from_shape_fn((5, 2), |(_, j)| if j == 0 { 1.0 } else { 0.0 });
        assert!((info_nce(same.view(), same.view(), 0.07).unwrap() - 5f64.ln()).abs() < 1e-12);
        assert!((total_loss(same.view(), same.view(), same.view(), 0.07).unwrap() - 6.0 * 5f64.ln()).abs() < 1e-12);
        assert!(info_nce(same.view(), same.view(), 0.0).is_err());
        assert!(info_nce(same.view(), same.view(), 1e-12).is_err());
    }

    #[test]
    fn info_nce_two_by_two_closed_form() {
        // Similarities: diagonal 0.8 and 0.6, off-diagonal 0.2 and -0.1.
        let a = ndarray::array![[1.0, 0.0], [0.0, 1.0]];
        let b = ndarray::array![[0.8, -0.1], [0.2, 0.6]];
        let tau = 0.5;
        let l0 = -((0.8f64 / tau).exp() / ((0.8f64 / tau).exp() + (0.2f64 / tau).exp())).ln();
        let l1 = -((0.6f64 / tau).exp() / ((0.6f64 / tau).exp() + (-0.1f64 / tau).exp())).ln();
        assert!((info_nce(a.view(), b.view(), tau).unwrap() - (l0 + l1) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn total_loss_symmetries() {
        let mut z: Vec<Array2<f64>> = (0..3).map(|s| gaussian(6, 4, s)).collect();
        z.iter_mut().for_each(crate::linalg::normalize_rows_f64);
        let t = total_loss(z[0].view(), z[1].view(), z[2].view(), 0.1).unwrap();
        let swapped = total_loss(z[2].view(), z[1].view(), z[0].view(), 0.1).unwrap();
        assert!((t - swapped).abs() < 1e-12);
        let mut terms = 0.0;
        for (a, b) in [(0, 1), (1, 0), (1, 2), (2, 1), (0, 2), (2, 0)] {
            terms += info_nce(z[a].view(), z[b].view(), 0.1).unwrap();
        }
        assert!((t - terms).abs() < 1e-12);
        let perm = [3usize, 0, 5, 1, 4, 2];
        let p: Vec<Array2<f64>> = z.iter().map(|m| m.select(Axis(0), &perm)).collect();
        assert!((total_loss(p[0].view(), p[1].view(), p[2].view(), 0.1).unwrap() - t).abs() < 1e-12);
    }

    #[test]
    fn schedule_endpoints() {
        let cfg = AlignConfig::default();
        assert_eq!(lr_at(0, 20_000, &cfg, ParamGroup::Projection), 0.0);
        assert!((lr_at(5000, 20_000, &cfg, ParamGroup::Projection) - 1e-4).abs() < 1e-18);
        assert!(lr_at(20_000, 20_000, &cfg, ParamGroup::Projection).abs() < 1e-12);
        assert!((lr_at(5000, 20_000, &cfg, ParamGroup::TextEncoder) - 2e-5).abs() < 1e-18);
    }

    fn tiny_data(n: usize, seed: u64) -> TrainData {
        TrainData {
            he: gaussian(n, 5, seed),
            mif: gaussian(n, 4, seed + 1),
            txt: gaussian(n, 6, seed + 2),
        }
    }

    fn tiny_cfg() -> AlignConfig {
        AlignConfig {
            batch_size: 8,
            d_hidden: 6,
            d_out: 4,
            epochs: 3,
            warmup_steps: 2,
            temperature: 0.2,
            lr: LearningRates {
                projection: 1e-2,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let cfg = AlignConfig {
            lr: LearningRates {
                projection: 0.0,
                ..Default::default()
            },
            ..tiny_cfg()
        };
        let out = train(&tiny_data(30, 1), &cfg).unwrap();
        for (a, b) in out.initial.heads.iter().zip(&out.heads.heads) {
            assert_eq!((&a.w1, &a.b1, &a.w2, &a.b2, &a.gamma, &a.beta), (&b.w1, &b.b1, &b.w2, &b.b2, &b.gamma, &b.beta));
        }
        // 30 rows, batch 8: three full batches per epoch.
        assert_eq!(out.trace.len(), 9);
    }

    #[test]
    fn training_is_deterministic_and_checkpoint_roundtrips() {
        let data = tiny_data(40, 2);
        let a = train(&data, &tiny_cfg()).unwrap();
        let b = train(&data, &tiny_cfg()).unwrap();
        let ck = a.heads.to_checkpoint().encode();
        assert_eq!(ck, b.heads.to_checkpoint().encode());
        let back = TriHeads::from_checkpoint(&Checkpoint::decode(&ck).unwrap()).unwrap();
        assert_eq!(back, a.heads);
        assert!(matches!(Checkpoint::decode(&ck[..ck.len() - 3]), Err(FormatError::Truncated { .. })));
    }

    #[test]
    fn too_few_items_is_a_config_error() {
        assert!(matches!(train(&tiny_data(5, 0), &tiny_cfg()), Err(AtlasError::Config(_))));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let shapes = [
            HeadShape { d_in: 4, d_hidden: 5, d_out: 3 },
            HeadShape { d_in: 3, d_hidden: 4, d_out: 3 },
            HeadShape { d_in: 5, d_hidden: 3, d_out: 3 },
        ];
        let mut heads = TriHeads::init(shapes, 11);
        for h in heads.heads.iter_mut() {
            h.b1.mapv_inplace(|_| 0.05);
            h.gamma.mapv_inplace(|_| 1.3);
            h.beta.mapv_inplace(|_| -0.2);
        }
        let (he, mif, txt) = (gaussian(5, 4, 1), gaussian(5, 3, 2), gaussian(5, 5, 3));
        let batch = Batch { he: he.view(), mif: mif.view(), txt: txt.view() };
        let err = gradient_check(&heads, batch, 0.3, 1e-5, 1e-5).unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
