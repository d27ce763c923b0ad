//! The policy network.
//!
//! Input tokens are `[START, a_1, ..., a_{k-1}]` where START is token 0 and
//! index `i` is token `i + 1`. Each block is post-norm:
//! `LN(x + attn(x))` followed by `LN(y + ffn(y))`, with a tanh-GELU FFN.
//! Only the readout row is carried through the last block. The readout is
//! the newest token when positional encoding is on and the START token when
//! it is off; the latter makes the policy a function of the prefix *set*.
//!
//! All parameters live in one flat buffer; [`Layout`] names the tensors and
//! fixes their order for initialization, checkpoints and optimizers.

use std::sync::Arc;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis, Zip};
use polarseq_core::digest::short_digest;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const START_TOKEN: usize = 0;
/// Added to the logits of already chosen indices.
pub const MASK_PENALTY: f64 = -1e9;
const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn default_d() -> usize {
    64
}
fn default_layers() -> usize {
    2
}
fn default_heads() -> usize {
    4
}
fn default_ff() -> usize {
    256
}
fn default_pe() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyConfig {
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(default = "default_d")]
    pub d: usize,
    #[serde(default = "default_layers")]
    pub layers: usize,
    #[serde(default = "default_heads")]
    pub heads: usize,
    #[serde(default = "default_ff")]
    pub ff_hidden: usize,
    #[serde(default = "default_pe")]
    pub use_positional_encoding: bool,
    #[serde(default)]
    pub seed: u64,
}

impl PolicyConfig {
    pub fn new(n: usize) -> Self {
        Self {
            n,
            d: default_d(),
            layers: default_layers(),
            heads: default_heads(),
            ff_hidden: default_ff(),
            use_positional_encoding: default_pe(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.n == 0 {
            return bad("N must be positive");
        }
        if self.d == 0 || self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return bad("d must be a positive multiple of heads");
        }
        if self.layers == 0 || self.ff_hidden == 0 {
            return bad("layers and ff_hidden must be positive");
        }
        Ok(())
    }

    pub fn d_k(&self) -> usize {
        self.d / self.heads
    }

    /// Architecture digest; excludes the init seed.
    pub fn digest(&self) -> String {
        short_digest(&self.canonical())
    }

    pub fn canonical(&self) -> String {
        format!(
            "policy-v1;N={};d={};layers={};heads={};ff={};pe={};readout={}",
            self.n,
            self.d,
            self.layers,
            self.heads,
            self.ff_hidden,
            self.use_positional_encoding as u8,
            if self.use_positional_encoding {
                "last"
            } else {
                "start"
            }
        )
    }
}

/// Sinusoidal position code: `sin` on even dims, `cos` on odd dims.
pub fn positional_encoding(pos: usize, d: usize) -> Vec<f64> {
    (0..d)
        .map(|j| {
            let i2 = (j - j % 2) as f64;
            let angle = pos as f64 / 10000f64.powf(i2 / d as f64);
            if j % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Slot {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Slot {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone)]
struct LayerSlots {
    wq: Slot,
    wk: Slot,
    wv: Slot,
    wo: Slot,
    bo: Slot,
    ln1_g: Slot,
    ln1_b: Slot,
    w1: Slot,
    b1: Slot,
    w2: Slot,
    b2: Slot,
    ln2_g: Slot,
    ln2_b: Slot,
}

/// Names, shapes and offsets of every tensor in declared order.
///
/// Attention projections are stored head-concatenated: head `h` owns
/// columns `h·d_k .. (h+1)·d_k` of `wq`, `wk` and `wv`, and rows of the
/// same range in `wo`.
#[derive(Debug, Clone)]
pub struct Layout {
    embed: Slot,
    layers: Vec<LayerSlots>,
    w_out: Slot,
    b_out: Slot,
    tensors: Vec<(String, Slot)>,
    len: usize,
}

impl Layout {
    pub fn new(cfg: &PolicyConfig) -> Self {
        let mut tensors = Vec::new();
        let mut len = 0;
        let mut add = |name: String, rows: usize, cols: usize| {
            let slot = Slot {
                offset: len,
                rows,
                cols,
            };
            len += rows * cols;
            tensors.push((name, slot));
            slot
        };
        let (d, ff) = (cfg.d, cfg.ff_hidden);
        let embed = add("embed".into(), cfg.n + 1, d);
        let layers = (0..cfg.layers)
            .map(|l| LayerSlots {
                wq: add(format!("layer{l}.wq"), d, d),
                wk: add(format!("layer{l}.wk"), d, d),
                wv: add(format!("layer{l}.wv"), d, d),
                wo: add(format!("layer{l}.wo"), d, d),
                bo: add(format!("layer{l}.bo"), 1, d),
                ln1_g: add(format!("layer{l}.ln1_gamma"), 1, d),
                ln1_b: add(format!("layer{l}.ln1_beta"), 1, d),
                w1: add(format!("layer{l}.ff_w1"), d, ff),
                b1: add(format!("layer{l}.ff_b1"), 1, ff),
                w2: add(format!("layer{l}.ff_w2"), ff, d),
                b2: add(format!("layer{l}.ff_b2"), 1, d),
                ln2_g: add(format!("layer{l}.ln2_gamma"), 1, d),
                ln2_b: add(format!("layer{l}.ln2_beta"), 1, d),
            })
            .collect();
        let w_out = add("head_w".into(), d, cfg.n);
        let b_out = add("head_b".into(), 1, cfg.n);
        Self {
            embed,
            layers,
            w_out,
            b_out,
            tensors,
            len,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn tensors(&self) -> &[(String, Slot)] {
        &self.tensors
    }

    /// Tensor owning flat position `i`.
    pub fn name_of(&self, i: usize) -> &str {
        self.tensors
            .iter()
            .find(|(_, s)| s.range().contains(&i))
            .map(|(n, _)| n.as_str())
            .unwrap_or("?")
    }
}

fn mat(data: &[f64], s: Slot) -> ArrayView2<'_, f64> {
    ArrayView2::from_shape((s.rows, s.cols), &data[s.range()]).expect("slot shape")
}

fn vector(data: &[f64], s: Slot) -> ArrayView1<'_, f64> {
    ArrayView1::from(&data[s.range()])
}

fn mat_mut(data: &mut [f64], s: Slot) -> ArrayViewMut2<'_, f64> {
    ArrayViewMut2::from_shape((s.rows, s.cols), &mut data[s.range()]).expect("slot shape")
}

fn vector_mut(data: &mut [f64], s: Slot) -> ArrayViewMut1<'_, f64> {
    ArrayViewMut1::from(&mut data[s.range()])
}

#[derive(Debug, Clone)]
pub struct PolicyParams {
    cfg: PolicyConfig,
    layout: Arc<Layout>,
    data: Vec<f64>,
}

/// Gradient buffer with the same layout as the parameters.
#[derive(Debug, Clone)]
pub struct Gradient {
    layout: Arc<Layout>,
    pub data: Vec<f64>,
}

impl Gradient {
    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|g| g * g).sum::<f64>().sqrt()
    }

    /// Rescales to at most `max_norm`; returns the norm before clipping.
    pub fn clip_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.norm();
        if norm > max_norm && norm > 0.0 {
            let s = max_norm / norm;
            self.data.iter_mut().for_each(|g| *g *= s);
        }
        norm
    }

    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        self.layout
            .tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, s)| &self.data[s.range()])
    }
}

/// Policy output for one state.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    /// Head logits with [`MASK_PENALTY`] added on chosen indices.
    pub logits: Vec<f64>,
    pub mask: Vec<bool>,
    /// `log π(i|s)`; `-inf` on masked entries.
    pub log_probs: Vec<f64>,
}

impl StepOutput {
    pub fn probs(&self) -> Vec<f64> {
        self.log_probs.iter().map(|l| l.exp()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActionMode {
    Sample,
    Greedy,
}

/// Masked log-softmax; masked entries come out as `-inf` exactly.
pub fn masked_log_softmax(logits: &[f64], mask: &[bool]) -> Result<Vec<f64>> {
    let max = logits
        .iter()
        .zip(mask)
        .filter(|(_, &m)| !m)
        .map(|(&l, _)| l)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::InvalidState("every action is masked".into()));
    }
    let sum: f64 = logits
        .iter()
        .zip(mask)
        .filter(|(_, &m)| !m)
        .map(|(&l, _)| (l - max).exp())
        .sum();
    let lse = max + sum.ln();
    Ok(logits
        .iter()
        .zip(mask)
        .map(|(&l, &m)| if m { f64::NEG_INFINITY } else { l - lse })
        .collect())
}

/// Picks an action; returns it with its log-probability.
///
/// `mask[i]` marks index `i` as unavailable. Greedy ties go to the lowest
/// index.
pub fn sample_action<R: Rng + ?Sized>(
    logits: &[f64],
    mask: &[bool],
    mode: ActionMode,
    rng: &mut R,
) -> Result<(usize, f64)> {
    if logits.len() != mask.len() {
        return Err(Error::InvalidArgument(
            "logits and mask differ in length".into(),
        ));
    }
    let logp = masked_log_softmax(logits, mask)?;
    let open = || (0..logits.len()).filter(|&i| !mask[i]);
    let action = match mode {
        ActionMode::Greedy => open()
            .fold(None, |best: Option<usize>, i| match best {
                Some(b) if logits[b] >= logits[i] => Some(b),
                _ => Some(i),
            })
            .expect("checked non-empty"),
        ActionMode::Sample => {
            let u: f64 = rng.random();
            let mut cum = 0.0;
            let mut pick = None;
            for i in open() {
                cum += logp[i].exp();
                pick = Some(i);
                if u < cum {
                    break;
                }
            }
            pick.expect("checked non-empty")
        }
    };
    Ok((action, logp[action]))
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn softmax_rows(a: &mut Array2<f64>) {
    for mut row in a.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

struct LnCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

fn layer_norm(
    z: &Array2<f64>,
    gamma: ArrayView1<f64>,
    beta: ArrayView1<f64>,
) -> (Array2<f64>, LnCache) {
    let d = z.ncols() as f64;
    let mut xhat = z.clone();
    let mut inv_std = Array1::zeros(z.nrows());
    for (mut row, is) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
        let mean = row.sum() / d;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|v| v * v).sum::<f64>() / d;
        *is = 1.0 / (var + LN_EPS).sqrt();
        let s = *is;
        row.mapv_inplace(|v| v * s);
    }
    let out = &xhat * &gamma + beta;
    (out, LnCache { xhat, inv_std })
}

/// Returns `dz`, accumulating into `dgamma` and `dbeta`.
fn layer_norm_backward(
    dout: &Array2<f64>,
    cache: &LnCache,
    gamma: ArrayView1<f64>,
    mut dgamma: ArrayViewMut1<f64>,
    mut dbeta: ArrayViewMut1<f64>,
) -> Array2<f64> {
    dgamma += &(dout * &cache.xhat).sum_axis(Axis(0));
    dbeta += &dout.sum_axis(Axis(0));
    let dxhat = dout * &gamma;
    let d = dout.ncols() as f64;
    let mut dz = Array2::zeros(dout.raw_dim());
    for r in 0..dout.nrows() {
        let g = dxhat.row(r);
        let xh = cache.xhat.row(r);
        let sum_g = g.sum();
        let sum_gx = g.dot(&xh);
        let is = cache.inv_std[r];
        Zip::from(dz.row_mut(r))
            .and(&g)
            .and(&xh)
            .for_each(|o, &gi, &xi| *o = is / d * (d * gi - sum_g - xi * sum_gx));
    }
    dz
}

struct LayerCache {
    rows: Vec<usize>,
    x: Array2<f64>,
    xq: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    attn: Vec<Array2<f64>>,
    hcat: Array2<f64>,
    ln1: LnCache,
    y: Array2<f64>,
    pre: Array2<f64>,
    act: Array2<f64>,
    ln2: LnCache,
}

/// Activations of one forward pass, kept for backpropagation.
pub struct ForwardCache {
    tokens: Vec<usize>,
    layers: Vec<LayerCache>,
    readout: Array1<f64>,
    out: StepOutput,
}

impl PolicyParams {
    /// Fresh parameters: Glorot-uniform matrices, N(0, 0.02) embeddings,
    /// unit layer-norm gains, zero biases.
    pub fn init(cfg: PolicyConfig) -> Result<Self> {
        cfg.validate()?;
        let layout = Layout::new(&cfg);
        let mut data = vec![0.0; layout.len];
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let normal = Normal::new(0.0, 0.02).expect("valid normal");
        for (name, slot) in &layout.tensors {
            let chunk = &mut data[slot.range()];
            let leaf = name.rsplit('.').next().unwrap_or(name);
            if name == "embed" {
                chunk.iter_mut().for_each(|v| *v = normal.sample(&mut rng));
            } else if leaf.ends_with("_gamma") {
                chunk.fill(1.0);
            } else if slot.rows > 1 {
                let a = (6.0 / (slot.rows + slot.cols) as f64).sqrt();
                let u = Uniform::new_inclusive(-a, a).expect("valid range");
                chunk.iter_mut().for_each(|v| *v = u.sample(&mut rng));
            }
        }
        Ok(Self {
            cfg,
            layout: Arc::new(layout),
            data,
        })
    }

    pub fn from_data(cfg: PolicyConfig, data: Vec<f64>) -> Result<Self> {
        cfg.validate()?;
        let layout = Layout::new(&cfg);
        if data.len() != layout.len {
            return Err(Error::InvalidArgument(format!(
                "expected {} parameters, got {}",
                layout.len,
                data.len()
            )));
        }
        Ok(Self {
            cfg,
            layout: Arc::new(layout),
            data,
        })
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.cfg
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn zero_gradient(&self) -> Gradient {
        Gradient {
            layout: self.layout.clone(),
            data: vec![0.0; self.layout.len],
        }
    }

    /// Name of the first tensor holding a non-finite entry.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.data
            .iter()
            .position(|v| !v.is_finite())
            .map(|i| self.layout.name_of(i))
    }

    fn check_prefix(&self, prefix: &[usize]) -> Result<Vec<bool>> {
        let mut mask = vec![false; self.cfg.n];
        for &a in prefix {
            if a >= self.cfg.n {
                return Err(Error::InvalidArgument(format!("index {a} out of range")));
            }
            if std::mem::replace(&mut mask[a], true) {
                return Err(Error::InvalidArgument(format!(
                    "index {a} repeated in prefix"
                )));
            }
        }
        if prefix.len() >= self.cfg.n {
            return Err(Error::InvalidState(
                "prefix already holds every index".into(),
            ));
        }
        Ok(mask)
    }

    fn tokens(&self, prefix: &[usize]) -> Vec<usize> {
        let mut tokens: Vec<usize> = std::iter::once(START_TOKEN)
            .chain(prefix.iter().map(|&a| a + 1))
            .collect();
        if !self.cfg.use_positional_encoding {
            // Mathematically order-free already; sorting pins the float
            // summation order so permuted prefixes agree bit for bit.
            tokens[1..].sort_unstable();
        }
        tokens
    }

    fn layer_forward(
        &self,
        ls: &LayerSlots,
        x: Array2<f64>,
        rows: Vec<usize>,
    ) -> (Array2<f64>, LayerCache) {
        let p = &self.data;
        let dk = self.cfg.d_k();
        let scale = 1.0 / (dk as f64).sqrt();
        let xq = x.select(Axis(0), &rows);
        let q = xq.dot(&mat(p, ls.wq));
        let k = x.dot(&mat(p, ls.wk));
        let v = x.dot(&mat(p, ls.wv));
        let mut hcat = Array2::zeros((rows.len(), self.cfg.d));
        let mut attn = Vec::with_capacity(self.cfg.heads);
        for h in 0..self.cfg.heads {
            let cols = s![.., h * dk..(h + 1) * dk];
            let mut a = q.slice(cols).dot(&k.slice(cols).t()) * scale;
            softmax_rows(&mut a);
            hcat.slice_mut(cols).assign(&a.dot(&v.slice(cols)));
            attn.push(a);
        }
        let z1 = &xq + &(hcat.dot(&mat(p, ls.wo)) + vector(p, ls.bo));
        let (y, ln1) = layer_norm(&z1, vector(p, ls.ln1_g), vector(p, ls.ln1_b));
        let pre = y.dot(&mat(p, ls.w1)) + vector(p, ls.b1);
        let act = pre.mapv(gelu);
        let z2 = &y + &(act.dot(&mat(p, ls.w2)) + vector(p, ls.b2));
        let (out, ln2) = layer_norm(&z2, vector(p, ls.ln2_g), vector(p, ls.ln2_b));
        let cache = LayerCache {
            rows,
            x,
            xq,
            q,
            k,
            v,
            attn,
            hcat,
            ln1,
            y,
            pre,
            act,
            ln2,
        };
        (out, cache)
    }

    /// Returns the gradient with respect to the layer input (all rows).
    fn layer_backward(
        &self,
        ls: &LayerSlots,
        c: &LayerCache,
        dout: &Array2<f64>,
        g: &mut [f64],
    ) -> Array2<f64> {
        let p = &self.data;
        let dk = self.cfg.d_k();
        let scale = 1.0 / (dk as f64).sqrt();

        let dz2 = {
            let (dg, db) = split_two(g, ls.ln2_g, ls.ln2_b);
            layer_norm_backward(dout, &c.ln2, vector(p, ls.ln2_g), dg, db)
        };
        mat_mut(g, ls.w2).scaled_add(1.0, &c.act.t().dot(&dz2));
        vector_mut(g, ls.b2).scaled_add(1.0, &dz2.sum_axis(Axis(0)));
        let mut dpre = dz2.dot(&mat(p, ls.w2).t());
        Zip::from(&mut dpre)
            .and(&c.pre)
            .for_each(|d, &x| *d *= gelu_grad(x));
        mat_mut(g, ls.w1).scaled_add(1.0, &c.y.t().dot(&dpre));
        vector_mut(g, ls.b1).scaled_add(1.0, &dpre.sum_axis(Axis(0)));
        let dy = dz2 + dpre.dot(&mat(p, ls.w1).t());

        let dz1 = {
            let (dg, db) = split_two(g, ls.ln1_g, ls.ln1_b);
            layer_norm_backward(&dy, &c.ln1, vector(p, ls.ln1_g), dg, db)
        };
        mat_mut(g, ls.wo).scaled_add(1.0, &c.hcat.t().dot(&dz1));
        vector_mut(g, ls.bo).scaled_add(1.0, &dz1.sum_axis(Axis(0)));
        let dhcat = dz1.dot(&mat(p, ls.wo).t());

        let mut dq = Array2::zeros(c.q.raw_dim());
        let mut dkm = Array2::zeros(c.k.raw_dim());
        let mut dv = Array2::zeros(c.v.raw_dim());
        for (h, a) in c.attn.iter().enumerate() {
            let cols = s![.., h * dk..(h + 1) * dk];
            let dh = dhcat.slice(cols);
            let da = dh.dot(&c.v.slice(cols).t());
            dv.slice_mut(cols).assign(&a.t().dot(&dh));
            let mut ds = a * &da;
            for (mut row, arow) in ds.rows_mut().into_iter().zip(a.rows()) {
                let s = row.sum();
                Zip::from(&mut row)
                    .and(&arow)
                    .for_each(|x, &ai| *x -= ai * s);
            }
            ds *= scale;
            dq.slice_mut(cols).assign(&ds.dot(&c.k.slice(cols)));
            dkm.slice_mut(cols).assign(&ds.t().dot(&c.q.slice(cols)));
        }
        mat_mut(g, ls.wq).scaled_add(1.0, &c.xq.t().dot(&dq));
        mat_mut(g, ls.wk).scaled_add(1.0, &c.x.t().dot(&dkm));
        mat_mut(g, ls.wv).scaled_add(1.0, &c.x.t().dot(&dv));

        let mut dx = dkm.dot(&mat(p, ls.wk).t()) + dv.dot(&mat(p, ls.wv).t());
        let dxq = dz1 + dq.dot(&mat(p, ls.wq).t());
        for (i, &r) in c.rows.iter().enumerate() {
            let mut row = dx.row_mut(r);
            row += &dxq.row(i);
        }
        dx
    }

    /// Distribution over the next index given the chosen `prefix`.
    pub fn forward(&self, prefix: &[usize]) -> Result<StepOutput> {
        Ok(self.forward_cached(prefix)?.out)
    }

    pub fn forward_cached(&self, prefix: &[usize]) -> Result<ForwardCache> {
        let mask = self.check_prefix(prefix)?;
        let cfg = &self.cfg;
        let p = &self.data;
        let tokens = self.tokens(prefix);
        let t = tokens.len();
        let embed = mat(p, self.layout.embed);
        let mut x = Array2::zeros((t, cfg.d));
        for (j, &tok) in tokens.iter().enumerate() {
            let mut row = x.row_mut(j);
            row.assign(&embed.row(tok));
            if cfg.use_positional_encoding {
                row += &Array1::from(positional_encoding(j, cfg.d));
            }
        }
        let readout_row = if cfg.use_positional_encoding {
            t - 1
        } else {
            0
        };
        let mut layers = Vec::with_capacity(cfg.layers);
        for (l, ls) in self.layout.layers.iter().enumerate() {
            let rows = if l + 1 == cfg.layers {
                vec![readout_row]
            } else {
                (0..t).collect()
            };
            let (out, cache) = self.layer_forward(ls, x, rows);
            layers.push(cache);
            x = out;
        }
        let readout = x.row(0).to_owned();
        let mut logits = readout.dot(&mat(p, self.layout.w_out)) + vector(p, self.layout.b_out);
        for (l, &m) in logits.iter_mut().zip(&mask) {
            if m {
                *l += MASK_PENALTY;
            }
        }
        let logits = logits.to_vec();
        let log_probs = masked_log_softmax(&logits, &mask)?;
        Ok(ForwardCache {
            tokens,
            layers,
            readout,
            out: StepOutput {
                logits,
                mask,
                log_probs,
            },
        })
    }

    /// Adds `∂(coeff · log π(action))/∂Φ` to `grad`.
    pub fn accumulate_log_prob_grad(
        &self,
        cache: &ForwardCache,
        action: usize,
        coeff: f64,
        grad: &mut Gradient,
    ) {
        let out = &cache.out;
        let dlogits: Array1<f64> = (0..self.cfg.n)
            .map(|i| {
                if out.mask[i] {
                    0.0
                } else {
                    let onehot = if i == action { 1.0 } else { 0.0 };
                    coeff * (onehot - out.log_probs[i].exp())
                }
            })
            .collect();
        let g = &mut grad.data;
        let p = &self.data;
        {
            let readout = cache.readout.view().insert_axis(Axis(1));
            let dl = dlogits.view().insert_axis(Axis(0));
            mat_mut(g, self.layout.w_out).scaled_add(1.0, &readout.dot(&dl));
        }
        vector_mut(g, self.layout.b_out).scaled_add(1.0, &dlogits);
        let dh = mat(p, self.layout.w_out).dot(&dlogits);
        let mut dx = dh.insert_axis(Axis(0));
        for (ls, lc) in self.layout.layers.iter().zip(&cache.layers).rev() {
            dx = self.layer_backward(ls, lc, &dx, g);
        }
        let mut dembed = mat_mut(g, self.layout.embed);
        for (j, &tok) in cache.tokens.iter().enumerate() {
            let mut row = dembed.row_mut(tok);
            row += &dx.row(j);
        }
    }

    /// `-(1/B) Σ_e Σ_t w_{e,t} log π(a_{e,t} | a_{e,<t})` by teacher forcing.
    pub fn loss(&self, batch: &[WeightedEpisode]) -> Result<f64> {
        self.loss_impl(batch, None)
    }

    /// Loss and its exact gradient.
    pub fn backward(&self, batch: &[WeightedEpisode]) -> Result<(f64, Gradient)> {
        let mut grad = self.zero_gradient();
        let loss = self.loss_impl(batch, Some(&mut grad))?;
        Ok((loss, grad))
    }

    fn loss_impl(&self, batch: &[WeightedEpisode], mut grad: Option<&mut Gradient>) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let inv_b = 1.0 / batch.len() as f64;
        let mut loss = 0.0;
        for (e, ep) in batch.iter().enumerate() {
            if ep.actions.len() != ep.weights.len() {
                return Err(Error::InvalidArgument(format!(
                    "episode {e}: actions and weights differ in length"
                )));
            }
            for (t, (&a, &w)) in ep.actions.iter().zip(ep.weights).enumerate() {
                if !w.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "advantage at episode {e} step {t}"
                    )));
                }
                if w == 0.0 && grad.is_none() {
                    continue;
                }
                let cache = self.forward_cached(&ep.actions[..t])?;
                let lp = cache.out.log_probs[a];
                if !lp.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "log-prob at episode {e} step {t}"
                    )));
                }
                loss -= inv_b * w * lp;
                if let Some(g) = grad.as_deref_mut() {
                    if w != 0.0 {
                        self.accumulate_log_prob_grad(&cache, a, -inv_b * w, g);
                    }
                }
            }
        }
        if !loss.is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        Ok(loss)
    }

    /// Greedy or sampled rollout of `len` steps.
    pub fn rollout<R: Rng + ?Sized>(
        &self,
        len: usize,
        mode: ActionMode,
        rng: &mut R,
    ) -> Result<(Vec<usize>, Vec<f64>)> {
        if len > self.cfg.n {
            return Err(Error::InvalidArgument(format!(
                "episode length {len} exceeds N={}",
                self.cfg.n
            )));
        }
        let mut actions = Vec::with_capacity(len);
        let mut log_probs = Vec::with_capacity(len);
        for _ in 0..len {
            let out = self.forward(&actions)?;
            let (a, lp) = sample_action(&out.logits, &out.mask, mode, rng)?;
            actions.push(a);
            log_probs.push(lp);
        }
        Ok((actions, log_probs))
    }
}

fn split_two(g: &mut [f64], a: Slot, b: Slot) -> (ArrayViewMut1<'_, f64>, ArrayViewMut1<'_, f64>) {
    debug_assert!(a.offset + a.len() <= b.offset);
    let (lo, hi) = g.split_at_mut(b.offset);
    (
        ArrayViewMut1::from(&mut lo[a.range()]),
        ArrayViewMut1::from(&mut hi[..b.len()]),
    )
}

/// One episode's actions with per-step loss weights (the advantages).
#[derive(Debug, Clone, Copy)]
pub struct WeightedEpisode<'a> {
    pub actions: &'a [usize],
    pub weights: &'a [f64],
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small(pe: bool) -> PolicyParams {
        PolicyParams::init(PolicyConfig {
            n: 8,
            d: 8,
            layers: 2,
            heads: 2,
            ff_hidden: 16,
            use_positional_encoding: pe,
            seed: 3,
        })
        .unwrap()
    }

    #[test]
    fn positional_encoding_values() {
        let pe0 = positional_encoding(0, 16);
        for (j, v) in pe0.iter().enumerate() {
            assert_eq!(*v, if j % 2 == 0 { 0.0 } else { 1.0 });
        }
        let pe = positional_encoding(3, 4);
        assert!((pe[0] - 3f64.sin()).abs() < 1e-15);
        assert!((pe[3] - (3.0 / 100.0f64).cos()).abs() < 1e-15);
        for pos in 0..200 {
            assert!(positional_encoding(pos, 64).iter().all(|v| v.abs() <= 1.0));
        }
    }

    #[test]
    fn layout_counts() {
        let cfg = PolicyConfig::new(64);
        let layout = Layout::new(&cfg);
        let per_layer = 4 * 64 * 64 + 64 + 4 * 64 + 64 * 256 + 256 + 256 * 64 + 64;
        assert_eq!(layout.len(), 65 * 64 + 2 * per_layer + 64 * 64 + 64);
        assert_eq!(layout.tensors()[0].0, "embed");
        assert_eq!(layout.name_of(layout.len() - 1), "head_b");
    }

    #[test]
    fn single_token_attends_to_itself() {
        let params = small(true);
        let ls = &params.layout.layers[0];
        let x = Array2::from_shape_fn((1, 8), |(_, j)| j as f64 * 0.1);
        let (_, cache) = params.layer_forward(ls, x, vec![0]);
        for a in &cache.attn {
            assert_eq!(a[[0, 0]], 1.0);
        }
        let expect = cache.v.dot(&mat(&params.data, ls.wo));
        let got = cache.hcat.dot(&mat(&params.data, ls.wo));
        assert_eq!(got, expect);
    }

    #[test]
    fn attention_rows_normalized() {
        let params = small(true);
        let cache = params.forward_cached(&[3, 1, 6, 0]).unwrap();
        for lc in &cache.layers {
            for a in &lc.attn {
                for row in a.rows() {
                    assert!((row.sum() - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn duplicate_tokens_give_identical_rows() {
        let params = small(false);
        let ls = &params.layout.layers[0];
        let embed = mat(&params.data, params.layout.embed);
        let mut x = Array2::zeros((3, 8));
        x.row_mut(0).assign(&embed.row(0));
        x.row_mut(1).assign(&embed.row(4));
        x.row_mut(2).assign(&embed.row(4));
        let (out, _) = params.layer_forward(ls, x, vec![0, 1, 2]);
        assert_eq!(out.row(1), out.row(2));
    }

    #[test]
    fn masking_contract() {
        let params = small(true);
        let out = params.forward(&[]).unwrap();
        assert!((out.probs().iter().sum::<f64>() - 1.0).abs() < 1e-9);
        let out = params.forward(&[2, 5, 7]).unwrap();
        let p = out.probs();
        for i in [2, 5, 7] {
            assert_eq!(p[i], 0.0);
        }
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(params.forward(&[2, 2]).is_err());
        assert!(params.forward(&[8]).is_err());
    }

    #[test]
    fn sample_action_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (a, lp) =
            sample_action(&[1.0, 3.0, 2.0], &[false; 3], ActionMode::Greedy, &mut rng).unwrap();
        assert_eq!(a, 1);
        assert!(lp < 0.0);
        let (a, lp) = sample_action(
            &[1.0, 1.0, 1.0],
            &[false, false, true],
            ActionMode::Greedy,
            &mut rng,
        )
        .unwrap();
        assert_eq!(a, 0);
        assert!((lp - 0.5f64.ln()).abs() < 1e-15);
        let (a, lp) = sample_action(
            &[0.3, 9.0, -2.0],
            &[true, false, true],
            ActionMode::Sample,
            &mut rng,
        )
        .unwrap();
        assert_eq!((a, lp), (1, 0.0));
        assert!(sample_action(&[0.0; 2], &[true; 2], ActionMode::Sample, &mut rng).is_err());
    }

    #[test]
    fn uniform_sampling_frequencies() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mask = [false, true, false, false];
        let mut counts = [0usize; 4];
        let draws = 30_000;
        for _ in 0..draws {
            let (a, lp) = sample_action(&[0.5; 4], &mask, ActionMode::Sample, &mut rng).unwrap();
            assert!((lp - (1.0f64 / 3.0).ln()).abs() < 1e-12);
            counts[a] += 1;
        }
        assert_eq!(counts[1], 0);
        for c in [counts[0], counts[2], counts[3]] {
            let f = c as f64 / draws as f64;
            assert!((f - 1.0 / 3.0).abs() < 0.015, "{counts:?}");
        }
    }

    #[test]
    fn zero_weights_give_zero_gradient() {
        let params = small(true);
        let actions = [1usize, 4, 0];
        let weights = [0.0; 3];
        let (loss, grad) = params
            .backward(&[WeightedEpisode {
                actions: &actions,
                weights: &weights,
            }])
            .unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.data.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn unused_embeddings_get_no_gradient() {
        let params = small(true);
        let actions = [1usize, 4];
        let weights = [1.0, -0.5];
        let (_, grad) = params
            .backward(&[WeightedEpisode {
                actions: &actions,
                weights: &weights,
            }])
            .unwrap();
        let embed = grad.tensor("embed").unwrap();
        // Tokens present in some teacher-forced input: START and index 1.
        for tok in 0..9 {
            let row = &embed[tok * 8..(tok + 1) * 8];
            let used = tok == 0 || tok == 2;
            assert_eq!(row.iter().any(|&g| g != 0.0), used, "token {tok}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]

        #[test]
        fn pe_off_is_permutation_invariant(perm in Just((0..8usize).collect::<Vec<_>>()).prop_shuffle(), k in 1usize..7) {
            let params = small(false);
            let prefix: Vec<usize> = perm[..k].to_vec();
            let mut sorted = prefix.clone();
            sorted.sort_unstable();
            prop_assert_eq!(params.forward(&prefix).unwrap(), params.forward(&sorted).unwrap());
        }

        #[test]
        fn forward_is_deterministic(perm in Just((0..8usize).collect::<Vec<_>>()).prop_shuffle(), k in 0usize..7) {
            let params = small(true);
            let prefix = &perm[..k];
            prop_assert_eq!(params.forward(prefix).unwrap(), params.clone().forward(prefix).unwrap());
        }
    }

    #[test]
    fn pe_on_is_order_sensitive() {
        let params = small(true);
        let a = params.forward(&[1, 2, 3]).unwrap();
        let b = params.forward(&[3, 2, 1]).unwrap();
        assert_ne!(a.logits, b.logits);
    }

    #[test]
    fn rollout_is_permutation() {
        let params = small(true);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for mode in [ActionMode::Sample, ActionMode::Greedy] {
            let (mut acts, lps) = params.rollout(8, mode, &mut rng).unwrap();
            assert!(lps.iter().all(|l| l.is_finite() && *l <= 0.0));
            assert_eq!(*lps.last().unwrap(), 0.0);
            acts.sort_unstable();
            assert_eq!(acts, (0..8).collect::<Vec<_>>());
        }
    }
}
