//! Successive-cancellation decoding in the LLR domain.
//!
//! All decoders walk the same binary tree: a node of size `2m` with input
//! LLRs `(λ_0..λ_{2m})` first decodes its left child from
//! `f(λ_j, λ_{j+m})`, then its right child from `g(λ_j, λ_{j+m}, a_j)`
//! where `a` is the left child's re-encoded output, and returns `[a ⊕ b, b]`.
//!
//! The list decoder keeps up to `L` paths with the LLR-based path metric
//! `PM += ln(1 + e^{-(1-2û)λ})` (exact) or its hard approximation
//! `PM += |λ|` on disagreement (min-sum). Frozen leaves contribute too, so
//! with no pruning the exact metric ranks complete paths by likelihood.

use serde::{Deserialize, Serialize};

use crate::code::CodeConfig;
use crate::error::invalid;
use crate::{Bit, Result};

/// Saturation applied to channel LLRs and to every f/g output.
pub const LLR_CLIP: f64 = 40.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Metric {
    #[default]
    Exact,
    MinSum,
}

impl Metric {
    pub fn id(&self) -> &'static str {
        match self {
            Metric::Exact => "exact",
            Metric::MinSum => "min-sum",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub list_size: usize,
    pub metric: Metric,
    pub crc_aided: bool,
}

impl DecoderConfig {
    pub fn sc() -> Self {
        Self {
            list_size: 1,
            metric: Metric::Exact,
            crc_aided: false,
        }
    }

    pub fn ca_scl(list_size: usize) -> Self {
        Self {
            list_size,
            metric: Metric::Exact,
            crc_aided: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.list_size == 0 {
            return Err(invalid("list size must be at least 1"));
        }
        Ok(())
    }

    /// Stable textual form used for digests.
    pub fn canonical(&self) -> String {
        format!(
            "L={};metric={};crc_aided={};clip={}",
            self.list_size,
            self.metric.id(),
            self.crc_aided,
            LLR_CLIP
        )
    }
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self::ca_scl(8)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeResult {
    pub u_hat: Vec<Bit>,
    /// Decoded information bits with the CRC stripped.
    pub payload: Vec<Bit>,
    pub crc_pass: bool,
    pub path_metric: f64,
}

impl DecodeResult {
    fn from_path(u_hat: Vec<Bit>, path_metric: f64, code: &CodeConfig) -> Self {
        let info = code.extract_info(&u_hat);
        let crc_pass = code.crc().check(&info);
        let payload = info[..code.payload_len()].to_vec();
        Self {
            u_hat,
            payload,
            crc_pass,
            path_metric,
        }
    }
}

#[inline]
fn clip(x: f64) -> f64 {
    x.clamp(-LLR_CLIP, LLR_CLIP)
}

/// `ln(1 + e^{-x})` for `x ≥ 0`.
#[inline]
fn softplus_neg(x: f64) -> f64 {
    (-x).exp().ln_1p()
}

/// Check-node update.
#[inline]
pub fn f_combine(a: f64, b: f64, metric: Metric) -> f64 {
    let (ma, mb) = (a.abs(), b.abs());
    let sign = a.signum() * b.signum();
    let mag = match metric {
        Metric::MinSum => ma.min(mb),
        // 2·atanh(tanh(a/2)·tanh(b/2)) in its overflow-free Jacobian form.
        Metric::Exact => {
            if ma == f64::INFINITY || mb == f64::INFINITY {
                ma.min(mb)
            } else {
                (ma.min(mb) + softplus_neg(ma + mb) - softplus_neg((ma - mb).abs())).max(0.0)
            }
        }
    };
    clip(sign * mag)
}

/// Variable-node update given the left decision `u`.
#[inline]
pub fn g_combine(a: f64, b: f64, u: Bit) -> f64 {
    clip(if u == 0 { b + a } else { b - a })
}

/// Path-metric penalty of deciding `bit` on a leaf with LLR `llr`.
#[inline]
pub fn path_metric_increment(llr: f64, bit: Bit, metric: Metric) -> f64 {
    let disagrees = (bit == 0) != (llr >= 0.0) && llr != 0.0;
    let hard = if disagrees { llr.abs() } else { 0.0 };
    match metric {
        Metric::MinSum => hard,
        Metric::Exact => hard + softplus_neg(llr.abs()),
    }
}

fn check_llrs(llrs: &[f64], code: &CodeConfig) -> Result<Vec<f64>> {
    if llrs.len() != code.n() {
        return Err(invalid(format!(
            "{} LLRs for a length-{} code",
            llrs.len(),
            code.n()
        )));
    }
    Ok(llrs.iter().map(|&l| clip(l)).collect())
}

/// Plain SC decoding. Frozen leaves decode as 0, information leaves take the
/// LLR sign with ties going to 0.
pub fn sc_decode(llrs: &[f64], code: &CodeConfig, metric: Metric) -> Result<DecodeResult> {
    let llrs = check_llrs(llrs, code)?;
    let mut u_hat = vec![0; code.n()];
    let mut pm = 0.0;
    sc_node(&llrs, 0, code, metric, None, &mut u_hat, &mut pm);
    Ok(DecodeResult::from_path(u_hat, pm, code))
}

/// SC run where every decision is replaced by the true bit; returns the LLR
/// seen at each leaf. Used for genie-aided construction.
pub fn genie_leaf_llrs(llrs: &[f64], truth: &[Bit], metric: Metric) -> Vec<f64> {
    let n = llrs.len();
    let code = CodeConfig::new(n, 0..n, Default::default()).expect("power-of-two length");
    let clipped: Vec<f64> = llrs.iter().map(|&l| clip(l)).collect();
    let mut leaves = vec![0.0; n];
    let mut pm = 0.0;
    let mut u = vec![0; n];
    sc_node(
        &clipped,
        0,
        &code,
        metric,
        Some((truth, &mut leaves)),
        &mut u,
        &mut pm,
    );
    leaves
}

fn sc_node(
    llr: &[f64],
    offset: usize,
    code: &CodeConfig,
    metric: Metric,
    mut genie: Option<(&[Bit], &mut Vec<f64>)>,
    u_hat: &mut [Bit],
    pm: &mut f64,
) -> Vec<Bit> {
    if llr.len() == 1 {
        let bit = match genie.as_mut() {
            Some((truth, leaves)) => {
                leaves[offset] = llr[0];
                truth[offset]
            }
            None if code.is_frozen(offset) => 0,
            None => (llr[0] < 0.0) as Bit,
        };
        *pm += path_metric_increment(llr[0], bit, metric);
        u_hat[offset] = bit;
        return vec![bit];
    }
    let half = llr.len() / 2;
    let left_llr: Vec<f64> = (0..half)
        .map(|j| f_combine(llr[j], llr[j + half], metric))
        .collect();
    let a = sc_node(
        &left_llr,
        offset,
        code,
        metric,
        genie.as_mut().map(|(t, l)| (*t, &mut **l)),
        u_hat,
        pm,
    );
    let right_llr: Vec<f64> = (0..half)
        .map(|j| g_combine(llr[j], llr[j + half], a[j]))
        .collect();
    let b = sc_node(&right_llr, offset + half, code, metric, genie, u_hat, pm);
    let mut out = Vec::with_capacity(2 * half);
    out.extend(a.iter().zip(&b).map(|(x, y)| x ^ y));
    out.extend_from_slice(&b);
    out
}

/// One list path. Level `ℓ` of the tree occupies `[2^ℓ, 2^{ℓ+1})` in each
/// buffer; level `n` of `alpha` holds the channel LLRs.
#[derive(Clone)]
struct Path {
    alpha: Vec<f64>,
    left: Vec<Bit>,
    out: Vec<Bit>,
    u: Vec<Bit>,
    pm: f64,
}

struct ListState<'a> {
    code: &'a CodeConfig,
    metric: Metric,
    list_size: usize,
    paths: Vec<Path>,
}

impl ListState<'_> {
    fn node(&mut self, level: u32, offset: usize) {
        if level == 0 {
            self.leaf(offset);
            return;
        }
        let half = 1usize << (level - 1);
        let base = 2 * half;
        let metric = self.metric;
        for p in &mut self.paths {
            for j in 0..half {
                p.alpha[half + j] = f_combine(p.alpha[base + j], p.alpha[base + half + j], metric);
            }
        }
        self.node(level - 1, offset);
        for p in &mut self.paths {
            for j in 0..half {
                let a = p.out[half + j];
                p.left[half + j] = a;
                p.alpha[half + j] = g_combine(p.alpha[base + j], p.alpha[base + half + j], a);
            }
        }
        self.node(level - 1, offset + half);
        for p in &mut self.paths {
            for j in 0..half {
                let b = p.out[half + j];
                p.out[base + j] = p.left[half + j] ^ b;
                p.out[base + half + j] = b;
            }
        }
    }

    fn leaf(&mut self, i: usize) {
        let metric = self.metric;
        if self.code.is_frozen(i) {
            for p in &mut self.paths {
                p.pm += path_metric_increment(p.alpha[1], 0, metric);
                p.u[i] = 0;
                p.out[1] = 0;
            }
            return;
        }
        // Candidate c = 2·path + bit; ties resolve toward the lower candidate.
        let mut candidates: Vec<(f64, usize)> = self
            .paths
            .iter()
            .enumerate()
            .flat_map(|(idx, p)| {
                let llr = p.alpha[1];
                [0u8, 1].map(|bit| {
                    (
                        p.pm + path_metric_increment(llr, bit, metric),
                        2 * idx + bit as usize,
                    )
                })
            })
            .collect();
        candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        candidates.truncate(self.list_size);
        let mut keep = vec![[false; 2]; self.paths.len()];
        let mut metric_of = vec![[0.0; 2]; self.paths.len()];
        for &(pm, c) in &candidates {
            keep[c / 2][c % 2] = true;
            metric_of[c / 2][c % 2] = pm;
        }
        let old = std::mem::take(&mut self.paths);
        for (idx, mut path) in old.into_iter().enumerate() {
            match keep[idx] {
                [true, true] => {
                    let mut zero = path.clone();
                    set_leaf(&mut zero, i, 0, metric_of[idx][0]);
                    self.paths.push(zero);
                    set_leaf(&mut path, i, 1, metric_of[idx][1]);
                    self.paths.push(path);
                }
                [true, false] => {
                    set_leaf(&mut path, i, 0, metric_of[idx][0]);
                    self.paths.push(path);
                }
                [false, true] => {
                    set_leaf(&mut path, i, 1, metric_of[idx][1]);
                    self.paths.push(path);
                }
                [false, false] => {}
            }
        }
    }
}

fn set_leaf(p: &mut Path, i: usize, bit: Bit, pm: f64) {
    p.u[i] = bit;
    p.out[1] = bit;
    p.pm = pm;
}

/// SCL decoding; returns every surviving path sorted by ascending metric
/// (ties by path index).
pub fn scl_decode(
    llrs: &[f64],
    code: &CodeConfig,
    dec: &DecoderConfig,
) -> Result<Vec<DecodeResult>> {
    dec.validate()?;
    let llrs = check_llrs(llrs, code)?;
    let n = code.n();
    let mut alpha = vec![0.0; 2 * n];
    alpha[n..].copy_from_slice(&llrs);
    let root = Path {
        alpha,
        left: vec![0; 2 * n],
        out: vec![0; 2 * n],
        u: vec![0; n],
        pm: 0.0,
    };
    let mut state = ListState {
        code,
        metric: dec.metric,
        list_size: dec.list_size,
        paths: vec![root],
    };
    state.node(n.trailing_zeros(), 0);
    let mut paths = state.paths;
    // Stable: equal metrics keep path order.
    paths.sort_by(|a, b| a.pm.total_cmp(&b.pm));
    Ok(paths
        .into_iter()
        .map(|p| DecodeResult::from_path(p.u, p.pm, code))
        .collect())
}

/// CA-SCL: best path whose information bits pass the CRC, falling back to
/// the best path overall (with `crc_pass = false`).
pub fn ca_scl_decode(llrs: &[f64], code: &CodeConfig, dec: &DecoderConfig) -> Result<DecodeResult> {
    let mut list = scl_decode(llrs, code, dec)?;
    let pick = list.iter().position(|r| r.crc_pass).unwrap_or(0);
    Ok(list.swap_remove(pick))
}

/// Dispatches to SC, SCL or CA-SCL according to the configuration.
pub fn decode(llrs: &[f64], code: &CodeConfig, dec: &DecoderConfig) -> Result<DecodeResult> {
    dec.validate()?;
    if dec.list_size == 1 {
        return sc_decode(llrs, code, dec.metric);
    }
    if dec.crc_aided {
        ca_scl_decode(llrs, code, dec)
    } else {
        Ok(scl_decode(llrs, code, dec)?.swap_remove(0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{
        bpsk_modulate, frame_rng, llr_demodulate, transmit, ChannelKind, ChannelModel,
    };
    use crate::code::{info_set_from_sequence, CrcConfig};
    use rand::Rng;

    fn exact_f_reference(a: f64, b: f64) -> f64 {
        2.0 * ((a / 2.0).tanh() * (b / 2.0).tanh()).atanh()
    }

    #[test]
    fn f_examples() {
        assert_eq!(f_combine(f64::INFINITY, 1.7, Metric::Exact), 1.7);
        assert_eq!(f_combine(f64::INFINITY, -1.7, Metric::Exact), -1.7);
        assert_eq!(f_combine(3.0, 0.0, Metric::Exact), 0.0);
        assert_eq!(f_combine(2.0, -3.0, Metric::MinSum), -2.0);
        assert_eq!(f_combine(100.0, 200.0, Metric::Exact), LLR_CLIP);
        for &(a, b) in &[
            (0.3, 1.2),
            (-2.0, 0.7),
            (5.0, -5.0),
            (-0.01, -8.0),
            (12.0, 9.0),
        ] {
            let got = f_combine(a, b, Metric::Exact);
            assert!(
                (got - exact_f_reference(a, b)).abs() < 1e-10,
                "f({a},{b}) = {got}"
            );
        }
    }

    #[test]
    fn g_examples() {
        assert_eq!(g_combine(1.5, 2.0, 0), 3.5);
        assert_eq!(g_combine(1.5, 2.0, 1), 0.5);
        assert_eq!(g_combine(0.0, 2.0, 1), 2.0);
        assert_eq!(g_combine(30.0, 30.0, 0), LLR_CLIP);
    }

    #[test]
    fn metric_increment() {
        assert_eq!(path_metric_increment(2.0, 1, Metric::MinSum), 2.0);
        assert_eq!(path_metric_increment(2.0, 0, Metric::MinSum), 0.0);
        let exact = path_metric_increment(-1.0, 0, Metric::Exact);
        assert!((exact - (1.0f64 + 1.0f64.exp()).ln()).abs() < 1e-12);
    }

    fn noisy_frame(code: &CodeConfig, seed: u64, frame: u64, sigma2: f64) -> (Vec<Bit>, Vec<f64>) {
        let mut rng = frame_rng(seed, frame);
        let msg: Vec<Bit> = (0..code.payload_len())
            .map(|_| rng.random_range(0..2))
            .collect();
        let x = code.encode(&msg).unwrap();
        let model = ChannelModel::new(ChannelKind::Awgn, sigma2).unwrap();
        let rx = transmit(&bpsk_modulate(&x), &model, &mut rng);
        (msg, llr_demodulate(&rx, sigma2))
    }

    #[test]
    fn noiseless_recovery() {
        let seq: Vec<usize> = (0..16).rev().collect();
        let code = info_set_from_sequence(&seq, 9, CrcConfig::CRC4).unwrap();
        let msg = vec![1, 0, 1, 1, 0];
        let x = code.encode(&msg).unwrap();
        let llrs: Vec<f64> = bpsk_modulate(&x).iter().map(|s| s * LLR_CLIP).collect();
        let sc = sc_decode(&llrs, &code, Metric::Exact).unwrap();
        assert_eq!(sc.payload, msg);
        assert_eq!(sc.u_hat, code.source_word(&msg).unwrap());
        let ca = ca_scl_decode(&llrs, &code, &DecoderConfig::ca_scl(8)).unwrap();
        assert!(ca.crc_pass);
        assert_eq!(ca.payload, msg);
    }

    #[test]
    fn all_frozen_decodes_zero() {
        let code = CodeConfig::new(8, 0..8, CrcConfig::NONE).unwrap();
        let llrs = [-3.0, 1.0, -0.5, 2.0, -1.0, -1.0, 4.0, 0.1];
        assert_eq!(
            sc_decode(&llrs, &code, Metric::Exact).unwrap().u_hat,
            vec![0; 8]
        );
        let list = scl_decode(&llrs, &code, &DecoderConfig::ca_scl(4)).unwrap();
        assert_eq!(list.len(), 1);
        assert_eq!(list[0].u_hat, vec![0; 8]);
    }

    #[test]
    fn sc_matches_map_on_small_code() {
        // N=4, F={0,1}: four codewords; MAP over u_2 u_3 by enumeration.
        let code = CodeConfig::new(4, [0, 1], CrcConfig::NONE).unwrap();
        let llrs = [2.0, 2.0, -2.0, -2.0];
        let mut best = (f64::NEG_INFINITY, vec![]);
        for m in 0..4u8 {
            let msg = vec![m >> 1 & 1, m & 1];
            let x = code.encode(&msg).unwrap();
            let corr: f64 = x
                .iter()
                .zip(&llrs)
                .map(|(&b, &l)| if b == 0 { l / 2.0 } else { -l / 2.0 })
                .sum();
            if corr > best.0 {
                best = (corr, msg);
            }
        }
        let sc = sc_decode(&llrs, &code, Metric::Exact).unwrap();
        assert_eq!(sc.payload, best.1);
    }

    #[test]
    fn wrong_llr_length() {
        let code = CodeConfig::new(8, [0, 1], CrcConfig::NONE).unwrap();
        assert!(sc_decode(&[0.0; 4], &code, Metric::Exact).is_err());
        assert!(scl_decode(&[0.0; 4], &code, &DecoderConfig::ca_scl(2)).is_err());
        let bad = DecoderConfig {
            list_size: 0,
            ..DecoderConfig::sc()
        };
        assert!(decode(&[0.0; 8], &code, &bad).is_err());
    }

    #[test]
    fn scl_one_equals_sc() {
        let seq: Vec<usize> = crate::construction::nr_sequence(32).unwrap().order;
        let code = info_set_from_sequence(&seq, 16, CrcConfig::NONE).unwrap();
        let dec = DecoderConfig {
            list_size: 1,
            metric: Metric::Exact,
            crc_aided: false,
        };
        for frame in 0..300 {
            let (_, llrs) = noisy_frame(&code, 3, frame, 0.6);
            let sc = sc_decode(&llrs, &code, Metric::Exact).unwrap();
            let scl = scl_decode(&llrs, &code, &dec).unwrap();
            assert_eq!(scl.len(), 1);
            assert_eq!(scl[0].u_hat, sc.u_hat);
            assert_eq!(scl[0].path_metric, sc.path_metric);
        }
    }

    #[test]
    fn list_sorted_and_frozen_zero() {
        let seq: Vec<usize> = crate::construction::nr_sequence(32).unwrap().order;
        let code = info_set_from_sequence(&seq, 20, CrcConfig::CRC4).unwrap();
        let dec = DecoderConfig::ca_scl(8);
        for frame in 0..100 {
            let (_, llrs) = noisy_frame(&code, 4, frame, 0.8);
            let list = scl_decode(&llrs, &code, &dec).unwrap();
            assert_eq!(list.len(), 8);
            for w in list.windows(2) {
                assert!(w[0].path_metric <= w[1].path_metric);
            }
            for r in &list {
                for i in code.frozen_set() {
                    assert_eq!(r.u_hat[i], 0);
                }
            }
            let mut seen: Vec<&Vec<Bit>> = list.iter().map(|r| &r.u_hat).collect();
            seen.sort();
            seen.dedup();
            assert_eq!(seen.len(), list.len());
        }
    }

    #[test]
    fn ca_scl_fallback_when_no_path_passes() {
        // Strongly negative LLRs on an all-ones-ish pattern rarely satisfy
        // the CRC; pick a frame where none of the list passes.
        let seq: Vec<usize> = crate::construction::nr_sequence(16).unwrap().order;
        let code = info_set_from_sequence(&seq, 10, CrcConfig::CRC4).unwrap();
        let dec = DecoderConfig::ca_scl(2);
        let mut found = false;
        for frame in 0..2000 {
            let (_, llrs) = noisy_frame(&code, 9, frame, 4.0);
            let list = scl_decode(&llrs, &code, &dec).unwrap();
            if list.iter().all(|r| !r.crc_pass) {
                let ca = ca_scl_decode(&llrs, &code, &dec).unwrap();
                assert!(!ca.crc_pass);
                assert_eq!(ca.u_hat, list[0].u_hat);
                found = true;
                break;
            }
        }
        assert!(found);
    }

    #[test]
    fn genie_llrs_match_sc_on_zero_codeword() {
        // With the all-zero codeword and no decision errors, genie and plain SC
        // see identical leaf LLRs; check through the path metric.
        let llrs = [3.0, 2.5, 4.0, 1.5, 2.0, 3.5, 2.2, 5.0];
        let leaves = genie_leaf_llrs(&llrs, &[0; 8], Metric::Exact);
        let code = CodeConfig::new(8, [], CrcConfig::NONE).unwrap();
        let sc = sc_decode(&llrs, &code, Metric::Exact).unwrap();
        assert_eq!(sc.u_hat, vec![0; 8]);
        let pm: f64 = leaves
            .iter()
            .map(|&l| path_metric_increment(l, 0, Metric::Exact))
            .sum();
        assert!((pm - sc.path_metric).abs() < 1e-12);
    }
}
