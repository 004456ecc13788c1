//! The invariant suite behind `latte verify`.

use std::collections::BTreeMap;

use latte::latte::{
    latte_bidirectional, latte_causal_bruteforce, latte_causal_scan, latte_causal_scan_unshifted, latte_step,
    LatteParams, LatteState,
};
use latte::linear::{linear_attention_direct, linear_attention_recurrent, undirected_attention_probs, FeatureMap};
use latte::macchiato::{macchiato_forward, ConvParams, FeatureMode, MacchiatoParams, RglruParams};
use latte::numerics::{softmax, singular_values};
use latte::{
    attention::{sliding_window_attention, softmax_attention},
    AttentionParams, Axis, DType, LatteError, MaskMode, Result, Scalar, SequenceBatch, Tensor,
};
use latte_model::{gradcheck_config, gradient_check, MixerKind};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Bound {
    AtMost,
    AtLeast,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub measured: f64,
    pub tolerance: f64,
    pub bound: Bound,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        match self.bound {
            Bound::AtMost => self.measured <= self.tolerance,
            Bound::AtLeast => self.measured >= self.tolerance,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct VerifyOptions {
    pub seed: u64,
    pub tolerance_overrides: BTreeMap<String, f64>,
    /// Swap the stabilized scan for the unshifted recursion in the
    /// large-logit check.
    pub break_stabilization: bool,
    /// Skip the finite-difference gradient checks.
    pub skip_gradients: bool,
}

struct Suite<'a> {
    opts: &'a VerifyOptions,
    out: Vec<CheckResult>,
}

impl Suite<'_> {
    fn push(&mut self, name: &str, measured: Result<f64>, tolerance: f64, bound: Bound) {
        let tolerance = self.opts.tolerance_overrides.get(name).copied().unwrap_or(tolerance);
        // an error counts as the worst possible measurement
        let measured = measured.unwrap_or(match bound {
            Bound::AtMost => f64::INFINITY,
            Bound::AtLeast => f64::NEG_INFINITY,
        });
        let measured = if measured.is_nan() { f64::INFINITY } else { measured };
        self.out.push(CheckResult {
            name: name.to_string(),
            measured,
            tolerance,
            bound,
        });
    }

    fn at_most(&mut self, name: &str, measured: Result<f64>, tolerance: f64) {
        self.push(name, measured, tolerance, Bound::AtMost);
    }

    fn at_least(&mut self, name: &str, measured: Result<f64>, tolerance: f64) {
        self.push(name, measured, tolerance, Bound::AtLeast);
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn batch<T: Scalar>(b: usize, t: usize, d: usize, std: f64, seed: u64) -> Result<SequenceBatch<T>> {
    SequenceBatch::new(Tensor::randn(&[b, t, d], std, &mut rng(seed)))
}

fn latte_params(d: usize, l: usize, h: usize, seed: u64) -> Result<LatteParams<f64>> {
    LatteParams::random(d, l, d, h, 1.0 / (d as f64).sqrt(), &mut rng(seed))
}

fn diff<T: Scalar>(a: &SequenceBatch<T>, b: &SequenceBatch<T>) -> f64 {
    a.values().max_abs_diff(b.values()).as_f64()
}

fn exact_diff<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    if a.shape() == b.shape() && a.data() == b.data() {
        0.0
    } else {
        a.max_abs_diff(b).as_f64().max(f64::MIN_POSITIVE)
    }
}

/// Row-sum tolerance for the precision under test.
fn row_tol<T: Scalar>() -> f64 {
    match T::DTYPE {
        DType::F32 => 1e-6,
        DType::F64 => 1e-10,
    }
}

fn softmax_rows<T: Scalar>(seed: u64) -> Result<f64> {
    let logits = Tensor::<T>::randn(&[16, 33], 10.0, &mut rng(seed));
    let p = softmax(&logits, Axis(1))?;
    let worst = p
        .data()
        .chunks(33)
        .map(|r| (r.iter().map(|x| x.as_f64()).sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max);
    Ok(worst)
}

fn attention_rows<T: Scalar>(window: Option<usize>, seed: u64) -> Result<f64> {
    let x = batch::<T>(2, 24, 16, 1.0, seed)?;
    let p = AttentionParams::<T>::random(16, 16, 4, 0.25, &mut rng(seed + 1))?;
    let (_, m) = match window {
        Some(w) => sliding_window_attention(&x, &p, w, true)?,
        None => softmax_attention(&x, &p, MaskMode::Causal)?,
    };
    Ok(m.max_row_deviation())
}

fn linear_setup<T: Scalar>(t: usize, l: usize, seed: u64) -> Result<(SequenceBatch<T>, AttentionParams<T>, FeatureMap<T>)> {
    let mut r = rng(seed);
    let x = SequenceBatch::new(Tensor::randn(&[1, t, 8], 1.0, &mut r))?;
    let p = AttentionParams::random(8, 8, 2, 0.4, &mut r)?;
    let fm = FeatureMap::new(Tensor::randn(&[4, l], 0.5, &mut r))?;
    Ok((x, p, fm))
}

fn linear_rows<T: Scalar>(seed: u64) -> Result<f64> {
    let (x, p, fm) = linear_setup::<T>(32, 4, seed)?;
    Ok(undirected_attention_probs(&x, &p, &fm)?.max_row_deviation())
}

fn linear_recurrent_vs_direct<T: Scalar>(seed: u64) -> Result<f64> {
    let (x, p, fm) = linear_setup::<T>(32, 4, seed)?;
    let (direct, _) = linear_attention_direct(&x, &p, &fm)?;
    let rec = linear_attention_recurrent(&x, &p, &fm)?;
    Ok(diff(&direct, &rec))
}

fn undirected_equivalence<T: Scalar>(seed: u64) -> Result<f64> {
    let mut worst = 0.0f64;
    for i in 0..100 {
        let (x, p, fm) = linear_setup::<T>(32, 4, seed.wrapping_mul(1000).wrapping_add(i))?;
        let (_, direct) = linear_attention_direct(&x, &p, &fm)?;
        let undirected = undirected_attention_probs(&x, &p, &fm)?;
        worst = worst.max(direct.probs.max_abs_diff(&undirected.probs).as_f64());
    }
    Ok(worst)
}

fn latte_oracle_rows<T: Scalar>(seed: u64) -> Result<f64> {
    let p = latte_params(16, 8, 2, seed)?.cast::<T>();
    let x = batch::<T>(2, 32, 16, 1.0, seed + 1)?;
    let (_, trace) = latte_causal_bruteforce(&x, &p)?;
    Ok(trace.probs.max_row_deviation())
}

fn scan_vs_oracle<T: Scalar>(seed: u64) -> Result<f64> {
    let p = latte_params(32, 16, 2, seed)?;
    let x = batch::<f64>(2, 64, 32, 1.0, seed + 1)?;
    let (want, _) = latte_causal_bruteforce(&x, &p)?;
    let xt = SequenceBatch::new(x.values().cast::<T>())?;
    let got = latte_causal_scan(&xt, &p.cast::<T>(), 32)?;
    Ok(got.values().cast::<f64>().max_abs_diff(want.values()))
}

fn streaming_vs_scan<T: Scalar>(seed: u64) -> Result<f64> {
    let p = latte_params(32, 16, 2, seed)?.cast::<T>();
    let x = batch::<T>(2, 64, 32, 1.0, seed + 1)?;
    let scan = latte_causal_scan(&x, &p, 32)?;
    let mut state = LatteState::new(2, &p);
    let d_v = p.d_v();
    let mut streamed = Vec::with_capacity(2 * 64 * d_v);
    let mut steps = Vec::with_capacity(64);
    for t in 0..64 {
        let (next, y) = latte_step(state, &x.step(t), &p)?;
        state = next;
        steps.push(y);
    }
    for b in 0..2 {
        for y in &steps {
            streamed.extend_from_slice(&y.data()[b * d_v..(b + 1) * d_v]);
        }
    }
    Ok(exact_diff(scan.values(), &Tensor::new(vec![2, 64, d_v], streamed)?))
}

fn unroll_invariance<T: Scalar>(seed: u64) -> Result<f64> {
    let p = latte_params(16, 8, 2, seed)?.cast::<T>();
    let x = batch::<T>(2, 45, 16, 1.0, seed + 1)?;
    let a = latte_causal_scan(&x, &p, 1)?;
    let b = latte_causal_scan(&x, &p, 32)?;
    Ok(exact_diff(a.values(), b.values()))
}

fn scan_causality<T: Scalar>(seed: u64) -> Result<f64> {
    let p = latte_params(16, 8, 2, seed)?.cast::<T>();
    let x = batch::<T>(1, 40, 16, 1.0, seed + 1)?;
    let base = latte_causal_scan(&x, &p, 8)?;
    let mut worst = 0.0f64;
    for t in [0, 17, 39] {
        let mut v = x.values().clone();
        for e in &mut v.data_mut()[t * 16..(t + 1) * 16] {
            *e += T::of(3.0);
        }
        let out = latte_causal_scan(&SequenceBatch::new(v)?, &p, 8)?;
        let before = t * p.d_v();
        worst = worst.max(exact_diff(
            &Tensor::new(vec![before], base.values().data()[..before].to_vec())?,
            &Tensor::new(vec![before], out.values().data()[..before].to_vec())?,
        ));
    }
    Ok(worst)
}

fn rank_ratio<T: Scalar>(seed: u64) -> Result<f64> {
    let p = latte_params(8, 4, 1, seed)?.cast::<T>();
    let x = batch::<T>(1, 32, 8, 1.0, seed + 1)?;
    let (_, trace) = latte_bidirectional(&x, &p, true)?;
    let trace = trace.ok_or_else(|| LatteError::InvalidArgument("no trace".into()))?;
    let sv = singular_values(&trace.probs.head(0, 0))?;
    Ok(sv[4] / sv[0])
}

fn macchiato_params<T: Scalar>(d: usize, l: usize, h: usize, w: usize, seed: u64) -> Result<MacchiatoParams<T>> {
    MacchiatoParams::random(d, l, h, w, 1.0 / (d as f64).sqrt(), &mut rng(seed))
}

/// Channel 0 fixed to one so a gate column with weight only there yields a
/// constant local-slot logit.
fn with_bias_channel<T: Scalar>(x: SequenceBatch<T>) -> Result<SequenceBatch<T>> {
    let d = x.width();
    let mut v = x.into_values();
    for (i, e) in v.data_mut().iter_mut().enumerate() {
        if i % d == 0 {
            *e = T::one();
        }
    }
    SequenceBatch::new(v)
}

fn constant_gate<T: Scalar>(d: usize, h: usize, logit: f64) -> Tensor<T> {
    Tensor::from_fn(&[d, h], |i| if i < h { T::of(logit) } else { T::zero() })
}

fn shared_value_swa<T: Scalar>(p: &MacchiatoParams<T>) -> AttentionParams<T> {
    let mut s = p.swa.clone();
    s.w_v = p.latte.w_v.clone();
    s
}

fn macchiato_rows<T: Scalar>(seed: u64) -> Result<f64> {
    let x = batch::<T>(1, 48, 8, 1.0, seed)?;
    let mut p = macchiato_params::<T>(8, 8, 2, 8, seed + 1)?;
    p.feature_mode = FeatureMode::Conv(ConvParams::random(3, 8, true, 0.5, &mut rng(seed + 2))?);
    let (_, trace) = macchiato_forward(&x, &p, true)?;
    let trace = trace.ok_or_else(|| LatteError::InvalidArgument("no trace".into()))?;
    Ok(trace.max_row_deviation())
}

fn no_latents_vs_swa<T: Scalar>(seed: u64) -> Result<f64> {
    let mut p = macchiato_params::<T>(8, 4, 2, 5, seed)?;
    p.latte.w_q = Tensor::zeros(&[8, 0]);
    p.latte.w_k = Tensor::zeros(&[8, 0]);
    let x = batch::<T>(2, 20, 8, 1.0, seed + 1)?;
    let (mix, _) = macchiato_forward(&x, &p, false)?;
    let (swa, _) = sliding_window_attention(&x, &shared_value_swa(&p), 5, true)?;
    Ok(exact_diff(mix.values(), swa.values()))
}

fn saturated_gate_vs_attention<T: Scalar>(seed: u64) -> Result<f64> {
    let x = with_bias_channel(batch::<T>(1, 10, 6, 1.0, seed)?)?;
    let mut p = macchiato_params::<T>(6, 4, 2, 10, seed + 1)?;
    p.use_rope_in_swa = false;
    p.gate_row_0 = constant_gate(6, 2, 1e4);
    let (mix, _) = macchiato_forward(&x, &p, false)?;
    let (att, _) = softmax_attention(&x, &shared_value_swa(&p), MaskMode::Causal)?;
    Ok(diff(&mix, &att))
}

/// Scan output on inputs whose key logits exceed 50; reports the number
/// of non-finite outputs.
fn large_logit_scan(seed: u64, unshifted: bool) -> Result<f64> {
    let p = latte_params(16, 8, 2, seed)?.cast::<f32>();
    let x = batch::<f32>(1, 64, 16, 50.0, seed + 1)?;
    let out = if unshifted {
        latte_causal_scan_unshifted(&x, &p)?
    } else {
        latte_causal_scan(&x, &p, 32)?
    };
    Ok(out.values().data().iter().filter(|v| !v.is_finite()).count() as f64)
}

fn largest_key_logit(seed: u64) -> Result<f64> {
    let p = latte_params(16, 8, 2, seed)?.cast::<f32>();
    let x = batch::<f32>(1, 64, 16, 50.0, seed + 1)?;
    let k = latte::numerics::matmul(&x.values().clone().reshape(&[64, 16])?, &p.w_k)?;
    Ok(k.max_abs().as_f64())
}

fn unshifted_overflows(seed: u64) -> Result<f64> {
    let p = latte_params(16, 8, 2, seed)?.cast::<f32>();
    let x = batch::<f32>(1, 64, 16, 50.0, seed + 1)?;
    Ok(match latte_causal_scan_unshifted(&x, &p) {
        Err(LatteError::NonFinite(_)) => 1.0,
        Ok(out) if !out.values().all_finite() => 1.0,
        _ => 0.0,
    })
}

fn permute_prefix<T: Scalar>(x: &SequenceBatch<T>, seed: u64) -> Result<SequenceBatch<T>> {
    let (t, d) = (x.seq_len(), x.width());
    let mut perm: Vec<usize> = (0..t - 1).collect();
    perm.shuffle(&mut rng(seed));
    perm.push(t - 1);
    let v = x.values().data();
    SequenceBatch::new(Tensor::from_fn(&[1, t, d], |i| v[perm[i / d] * d + i % d]))
}

fn last_row_change<T: Scalar>(a: &SequenceBatch<T>, b: &SequenceBatch<T>) -> f64 {
    let w = a.width();
    let n = a.values().len();
    a.values().data()[n - w..]
        .iter()
        .zip(&b.values().data()[n - w..])
        .map(|(x, y)| (x.as_f64() - y.as_f64()).abs())
        .fold(0.0, f64::max)
}

fn latte_prefix_permutation(seed: u64) -> Result<f64> {
    let mut worst = 0.0f64;
    for i in 0..100 {
        let s = seed.wrapping_mul(7919).wrapping_add(i * 3);
        let p = latte_params(8, 8, 2, s)?;
        let x = batch::<f64>(1, 12, 8, 1.0, s + 1)?;
        let xp = permute_prefix(&x, s + 2)?;
        let a = latte_causal_scan(&x, &p, 4)?;
        let b = latte_causal_scan(&xp, &p, 4)?;
        worst = worst.max(last_row_change(&a, &b));
    }
    Ok(worst)
}

/// Instances out of 100 where permuting the prefix moves the last output
/// by more than 1e-3, with the local branch gated off.
fn feature_prefix_sensitivity(seed: u64, recurrent: bool) -> Result<f64> {
    let mut broken = 0;
    for i in 0..100 {
        let s = seed.wrapping_mul(7919).wrapping_add(i * 5);
        let x = with_bias_channel(batch::<f64>(1, 12, 8, 1.0, s)?)?;
        let mut p = macchiato_params::<f64>(8, 8, 2, 2, s + 1)?;
        p.gate_row_0 = constant_gate(8, 2, -1e4);
        p.feature_mode = if recurrent {
            FeatureMode::Rglru(RglruParams::random(8, 1.0, &mut rng(s + 3))?)
        } else {
            FeatureMode::Conv(ConvParams::random(3, 8, true, 1.0, &mut rng(s + 3))?)
        };
        let xp = permute_prefix(&x, s + 2)?;
        let (a, _) = macchiato_forward(&x, &p, false)?;
        let (b, _) = macchiato_forward(&xp, &p, false)?;
        if last_row_change(&a, &b) > 1e-3 {
            broken += 1;
        }
    }
    Ok(broken as f64)
}

fn precision_checks<T: Scalar>(s: &mut Suite<'_>) {
    let seed = s.opts.seed;
    let f64_run = T::DTYPE == DType::F64;
    let row = row_tol::<T>();
    s.at_most("softmax_rows_sum_to_one", softmax_rows::<T>(seed), row);
    s.at_most("attention_rows_sum_to_one", attention_rows::<T>(None, seed + 10), row);
    s.at_most("swa_rows_sum_to_one", attention_rows::<T>(Some(5), seed + 10), row);
    s.at_most("linear_undirected_rows_sum_to_one", linear_rows::<T>(seed + 20), row);
    s.at_most("latte_oracle_rows_sum_to_one", latte_oracle_rows::<T>(seed + 30), row);
    s.at_most("macchiato_trace_rows_sum_to_one", macchiato_rows::<T>(seed + 40), row);
    s.at_most(
        "linear_recurrent_matches_direct",
        linear_recurrent_vs_direct::<T>(seed + 50),
        if f64_run { 1e-10 } else { 1e-4 },
    );
    s.at_most(
        "undirected_equals_linear_weights",
        undirected_equivalence::<T>(seed + 60),
        if f64_run { 1e-10 } else { 1e-5 },
    );
    s.at_most(
        "latte_scan_matches_oracle",
        scan_vs_oracle::<T>(seed + 70),
        if f64_run { 1e-9 } else { 1e-4 },
    );
    s.at_most("latte_streaming_bitwise_equal", streaming_vs_scan::<T>(seed + 80), 0.0);
    s.at_most("latte_unroll_bitwise_equal", unroll_invariance::<T>(seed + 90), 0.0);
    s.at_most("latte_scan_causal", scan_causality::<T>(seed + 100), 0.0);
    s.at_most(
        "bidirectional_rank_bound",
        rank_ratio::<T>(seed + 110),
        if f64_run { 1e-6 } else { 1e-5 },
    );
    s.at_most("macchiato_no_latents_is_swa", no_latents_vs_swa::<T>(seed + 120), 0.0);
    s.at_most(
        "macchiato_saturated_gate_is_attention",
        saturated_gate_vs_attention::<T>(seed + 130),
        if f64_run { 1e-6 } else { 1e-5 },
    );
}

const PRECISION_CHECKS: [&str; 15] = [
    "softmax_rows_sum_to_one",
    "attention_rows_sum_to_one",
    "swa_rows_sum_to_one",
    "linear_undirected_rows_sum_to_one",
    "latte_oracle_rows_sum_to_one",
    "macchiato_trace_rows_sum_to_one",
    "linear_recurrent_matches_direct",
    "undirected_equals_linear_weights",
    "latte_scan_matches_oracle",
    "latte_streaming_bitwise_equal",
    "latte_unroll_bitwise_equal",
    "latte_scan_causal",
    "bidirectional_rank_bound",
    "macchiato_no_latents_is_swa",
    "macchiato_saturated_gate_is_attention",
];

const FIXED_CHECKS: [&str; 6] = [
    "large_key_logits_reach_50",
    "stabilized_scan_finite",
    "unshifted_overflow_demonstrated",
    "latte_prefix_permutation_invariant",
    "conv_breaks_prefix_permutation",
    "rglru_breaks_prefix_permutation",
];

/// Every check name, in run order.
pub fn check_names() -> Vec<String> {
    PRECISION_CHECKS
        .iter()
        .chain(&FIXED_CHECKS)
        .map(|s| s.to_string())
        .chain(MixerKind::ALL.iter().map(|k| format!("gradcheck_{k}")))
        .collect()
}

/// Runs every check; `precision` selects the element type of the
/// precision-dependent ones. Gradient and overflow checks always use their
/// own fixed precisions (f64 and f32).
pub fn run_checks(precision: DType, opts: &VerifyOptions) -> Vec<CheckResult> {
    let mut s = Suite { opts, out: Vec::new() };
    match precision {
        DType::F32 => precision_checks::<f32>(&mut s),
        DType::F64 => precision_checks::<f64>(&mut s),
    }
    let seed = opts.seed;
    s.at_least("large_key_logits_reach_50", largest_key_logit(seed + 140), 50.0);
    s.at_most(
        "stabilized_scan_finite",
        large_logit_scan(seed + 140, opts.break_stabilization),
        0.0,
    );
    s.at_least("unshifted_overflow_demonstrated", unshifted_overflows(seed + 140), 1.0);
    s.at_most("latte_prefix_permutation_invariant", latte_prefix_permutation(seed + 150), 1e-6);
    s.at_least("conv_breaks_prefix_permutation", feature_prefix_sensitivity(seed + 160, false), 95.0);
    s.at_least("rglru_breaks_prefix_permutation", feature_prefix_sensitivity(seed + 170, true), 95.0);
    if !opts.skip_gradients {
        for kind in MixerKind::ALL {
            let worst = gradient_check(&gradcheck_config(kind), seed + 180, 1e-6)
                .map(|errs| errs.iter().map(|e| e.1).fold(0.0, f64::max));
            s.at_most(&format!("gradcheck_{kind}"), worst, 1e-5);
        }
    }
    s.out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick() -> VerifyOptions {
        VerifyOptions {
            skip_gradients: true,
            ..Default::default()
        }
    }

    #[test]
    fn all_pass_in_both_precisions() {
        for precision in [DType::F32, DType::F64] {
            for c in run_checks(precision, &quick()) {
                assert!(c.passed(), "{precision} {c:?}");
            }
        }
    }

    #[test]
    fn names_match_run_order() {
        let ran: Vec<String> = run_checks(DType::F32, &quick()).into_iter().map(|c| c.name).collect();
        assert_eq!(ran, check_names()[..ran.len()]);
        assert_eq!(check_names().len(), ran.len() + MixerKind::ALL.len());
    }

    #[test]
    fn broken_stabilization_fails_only_its_check() {
        let opts = VerifyOptions {
            break_stabilization: true,
            ..quick()
        };
        let failed: Vec<String> = run_checks(DType::F64, &opts)
            .into_iter()
            .filter(|c| !c.passed())
            .map(|c| c.name)
            .collect();
        assert_eq!(failed, ["stabilized_scan_finite"]);
    }

    #[test]
    fn overrides_apply_by_name() {
        let mut opts = quick();
        opts.tolerance_overrides.insert("latte_scan_matches_oracle".into(), -1.0);
        let c = run_checks(DType::F64, &opts)
            .into_iter()
            .find(|c| c.name == "latte_scan_matches_oracle")
            .unwrap();
        assert_eq!(c.tolerance, -1.0);
        assert!(!c.passed());
    }
}
