//! Budgeted differentiable branch search.
//!
//! Every branch carries a learnable scalar alpha. Each iteration draws
//! logistic noise zeta per branch, scores R = alpha + zeta, keeps the
//! global top-C branches (protected main branches always stay), forwards
//! only the kept branches with a hard gate, and sends the straight-through
//! gradient <dL/dx, O> * z(1-z)/lambda back to alpha. Keep probability is
//! sigma((alpha + zeta)/lambda): larger alpha means a branch survives more
//! often, and under a plain threshold the keep rate equals sigma(alpha)
//! exactly (logistic CDF identity).

use crate::autodiff::{Mode, Tape};
use crate::blocks::{ArchDesc, GateSignal, RepNet};
use crate::error::{Error, Result};
use crate::optim::{Adam, Sgd};
use crate::params::{ParamId, ParamKind};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SearchConfig {
    /// Global branch budget C, counting protected branches.
    pub budget: usize,
    pub alpha_lr: f64,
    pub alpha_betas: (f64, f64),
    /// Gate temperature, fixed during search.
    pub lambda: f64,
    pub seed: u64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            budget: usize::MAX,
            alpha_lr: 1e-4,
            alpha_betas: (0.5, 0.999),
            lambda: 1.0,
            seed: 0,
        }
    }
}

/// One searchable branch: its position, its alpha parameter, and whether it
/// is exempt from pruning.
#[derive(Debug, Clone)]
pub struct BranchEntry {
    pub block: usize,
    pub branch: usize,
    pub alpha: ParamId,
    pub protected: bool,
}

/// Per-branch search state for a whole supernet.
#[derive(Debug)]
pub struct ArchState {
    pub entries: Vec<BranchEntry>,
    pub lambda: f64,
    /// Noise, soft importance and hard gate of the current iteration.
    pub last_noise: Vec<f64>,
    pub last_z_soft: Vec<f64>,
    pub last_z_hard: Vec<bool>,
}

impl ArchState {
    /// Register one alpha scalar per branch (initialized to zero) in the
    /// net's parameter store.
    pub fn attach<S: Scalar>(net: &mut RepNet<S>, lambda: f64) -> Self {
        let mut entries = Vec::new();
        for (bi, block) in net.blocks.iter().enumerate() {
            for (ji, _) in block.branches.iter().enumerate() {
                let alpha = net.store.add(
                    format!("block{bi}.branch{ji}.alpha"),
                    ParamKind::Alpha,
                    Tensor::zeros([1, 1, 1, 1]),
                );
                entries.push(BranchEntry {
                    block: bi,
                    branch: ji,
                    alpha,
                    protected: ji == block.protected,
                });
            }
        }
        let n = entries.len();
        ArchState {
            entries,
            lambda,
            last_noise: vec![0.0; n],
            last_z_soft: vec![0.0; n],
            last_z_hard: vec![false; n],
        }
    }

    pub fn total(&self) -> usize {
        self.entries.len()
    }

    pub fn protected_count(&self) -> usize {
        self.entries.iter().filter(|e| e.protected).count()
    }

    pub fn alphas<S: Scalar>(&self, net: &RepNet<S>) -> Vec<f64> {
        self.entries
            .iter()
            .map(|e| net.store.value(e.alpha).data()[0].to_f64())
            .collect()
    }

    /// Per-block alpha vectors, for the architecture description.
    pub fn alphas_by_block<S: Scalar>(&self, net: &RepNet<S>) -> Vec<Vec<f64>> {
        let mut out: Vec<Vec<f64>> = net
            .blocks
            .iter()
            .map(|b| vec![0.0; b.branches.len()])
            .collect();
        for e in &self.entries {
            out[e.block][e.branch] = net.store.value(e.alpha).data()[0].to_f64();
        }
        out
    }
}

/// zeta = log(u) - log(1 - u), u ~ Uniform(0,1) clamped away from 0 and 1.
pub fn sample_logistic_noise(rng: &mut impl Rng) -> f64 {
    let u: f64 = rng.gen::<f64>().clamp(1e-12, 1.0 - 1e-12);
    u.ln() - (1.0 - u).ln()
}

/// Soft importance Z = sigma((alpha + zeta) / lambda), monotone in alpha.
pub fn compute_importance(alpha: f64, zeta: f64, lambda: f64) -> f64 {
    sigmoid((alpha + zeta) / lambda)
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Hard gates: protected branches are always kept; the remaining budget
/// goes to the globally highest scores. Ties break toward lower (block,
/// branch) indices. The returned vector has exactly min(C, total) ones.
pub fn rank_and_select(
    scores: &[f64],
    protected: &[bool],
    budget: usize,
) -> Result<Vec<bool>> {
    assert_eq!(scores.len(), protected.len());
    let n_protected = protected.iter().filter(|&&p| p).count();
    if budget < n_protected {
        return Err(Error::Config(format!(
            "budget {budget} is below the {n_protected} protected branches"
        )));
    }
    let mut gates: Vec<bool> = protected.to_vec();
    let slots = (budget - n_protected).min(scores.len() - n_protected);
    let mut candidates: Vec<usize> = (0..scores.len()).filter(|&i| !protected[i]).collect();
    candidates.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    for &i in candidates.iter().take(slots) {
        gates[i] = true;
    }
    Ok(gates)
}

/// Metrics returned by one search iteration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepMetrics {
    pub loss: f64,
    pub top1: f64,
    pub active_branches: usize,
    pub mean_alpha: f64,
    pub min_alpha: f64,
    pub max_alpha: f64,
}

/// One iteration: sample noise, discretize under the budget, forward the
/// kept branches with hard gates, backprop to weights and alphas, step both
/// optimizers.
#[allow(clippy::too_many_arguments)]
pub fn search_step<S: Scalar>(
    net: &mut RepNet<S>,
    arch: &mut ArchState,
    config: &SearchConfig,
    sgd: &mut Sgd<S>,
    adam: &mut Adam<S>,
    images: Tensor<S>,
    labels: &[usize],
    rng: &mut impl Rng,
) -> Result<StepMetrics> {
    let alphas = arch.alphas(net);
    let mut scores = Vec::with_capacity(arch.total());
    for (i, &a) in alphas.iter().enumerate() {
        let zeta = sample_logistic_noise(rng);
        arch.last_noise[i] = zeta;
        arch.last_z_soft[i] = compute_importance(a, zeta, arch.lambda);
        scores.push(a + zeta);
    }
    let protected: Vec<bool> = arch.entries.iter().map(|e| e.protected).collect();
    let hard = rank_and_select(&scores, &protected, config.budget)?;
    arch.last_z_hard.copy_from_slice(&hard);

    let mut tape = Tape::new();
    // Alpha leaves first, then gates referencing them.
    let mut gates: Vec<Vec<GateSignal<S>>> = net
        .blocks
        .iter()
        .map(|b| vec![GateSignal::off(); b.branches.len()])
        .collect();
    for (i, entry) in arch.entries.iter().enumerate() {
        if hard[i] {
            let alpha_var = tape.param(&net.store, entry.alpha);
            gates[entry.block][entry.branch] = GateSignal {
                mult: S::ONE,
                alpha: Some(alpha_var),
                z_soft: S::from_f64(arch.last_z_soft[i]),
                lambda: S::from_f64(arch.lambda),
            };
        }
    }

    let logits = net.forward(&mut tape, images, &gates, Mode::Train)?;
    let loss = tape.softmax_cross_entropy(logits, labels)?;
    let loss_value = tape.value(loss).data()[0].to_f64();
    let top1 = top1_accuracy(tape.value(logits), labels);

    tape.backward(loss)?;
    net.store.zero_grads();
    tape.apply_param_grads(&mut net.store);
    sgd.step(&mut net.store);
    adam.step(&mut net.store);

    let active = hard.iter().filter(|&&h| h).count();
    let post_alphas = arch.alphas(net);
    let mean = post_alphas.iter().sum::<f64>() / post_alphas.len() as f64;
    let min = post_alphas.iter().copied().fold(f64::INFINITY, f64::min);
    let max = post_alphas.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(StepMetrics {
        loss: loss_value,
        top1,
        active_branches: active,
        mean_alpha: mean,
        min_alpha: min,
        max_alpha: max,
    })
}

pub fn top1_accuracy<S: Scalar>(logits: &Tensor<S>, labels: &[usize]) -> f64 {
    let [n, classes, _, _] = logits.shape();
    let mut correct = 0usize;
    for bi in 0..n {
        let row = &logits.data()[bi * classes..(bi + 1) * classes];
        let mut best = 0usize;
        for j in 1..classes {
            if row[j] > row[best] {
                best = j;
            }
        }
        if best == labels[bi] {
            correct += 1;
        }
    }
    correct as f64 / n.max(1) as f64
}

/// Noise-free final selection: rank by alpha alone, keep protected plus the
/// top of the rest. No retraining follows; the architecture ships as-is.
pub fn finalize_architecture<S: Scalar>(
    net: &RepNet<S>,
    arch: &ArchState,
    budget: usize,
) -> Result<(Vec<Vec<bool>>, ArchDesc)> {
    let alphas = arch.alphas(net);
    let protected: Vec<bool> = arch.entries.iter().map(|e| e.protected).collect();
    let hard = rank_and_select(&alphas, &protected, budget)?;
    let mut gates: Vec<Vec<bool>> = net
        .blocks
        .iter()
        .map(|b| vec![false; b.branches.len()])
        .collect();
    for (i, entry) in arch.entries.iter().enumerate() {
        gates[entry.block][entry.branch] = hard[i];
    }
    let desc = ArchDesc::from_net(net, &gates, Some(&arch.alphas_by_block(net)));
    Ok((gates, desc))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::BranchKind;
    use crate::oracle;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn logistic_noise_symmetric_at_half() {
        // u = 0.5 -> zeta = 0 by symmetry of log(u) - log(1-u).
        assert_eq!(0.5f64.ln() - 0.5f64.ln(), 0.0);
        // empirical CDF at 0 is 1/2.
        let mut r = rng(0);
        let n = 100_000;
        let below = (0..n)
            .filter(|_| sample_logistic_noise(&mut r) < 0.0)
            .count();
        let frac = below as f64 / n as f64;
        assert!((frac - 0.5).abs() <= 0.01, "CDF(0) = {frac}");
    }

    #[test]
    fn logistic_noise_variance_matches_analytic() {
        let mut r = rng(1);
        let n = 100_000;
        let samples: Vec<f64> = (0..n).map(|_| sample_logistic_noise(&mut r)).collect();
        let mean = samples.iter().sum::<f64>() / n as f64;
        let var = samples.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / n as f64;
        let analytic = std::f64::consts::PI.powi(2) / 3.0;
        assert!((var - analytic).abs() <= 0.1, "var {var} vs {analytic}");
    }

    #[test]
    fn importance_midpoint_and_temperature_limit() {
        assert_eq!(compute_importance(0.0, 0.0, 1.0), 0.5);
        // R = 0.3 with lambda -> 0+ drives Z to 1.
        assert!(compute_importance(0.3, 0.0, 1e-9) > 1.0 - 1e-12);
        assert!(compute_importance(-0.3, 0.0, 1e-9) < 1e-12);
        // monotone in alpha
        assert!(compute_importance(1.0, 0.2, 1.0) > compute_importance(0.5, 0.2, 1.0));
    }

    #[test]
    fn hard_threshold_keep_rate_equals_sigma_alpha() {
        // Keep iff alpha + zeta > 0; over many draws the rate is
        // sigma(alpha), the logistic CDF identity.
        let mut r = rng(2);
        let n = 100_000;
        for &alpha in &[-2.0, -1.0, 0.0, 1.0, 2.0] {
            let kept = (0..n)
                .filter(|_| alpha + sample_logistic_noise(&mut r) > 0.0)
                .count();
            let rate = kept as f64 / n as f64;
            let expect = sigmoid(alpha);
            assert!(
                (rate - expect).abs() <= 0.01,
                "alpha {alpha}: rate {rate} vs sigma {expect}"
            );
        }
    }

    #[test]
    fn rank_select_keeps_all_when_budget_covers() {
        let scores = [0.3, -0.1, 0.9];
        let protected = [false, true, false];
        let gates = rank_and_select(&scores, &protected, 3).unwrap();
        assert_eq!(gates, vec![true, true, true]);
        // budget above total is fine too
        let gates = rank_and_select(&scores, &protected, 10).unwrap();
        assert_eq!(gates.iter().filter(|&&g| g).count(), 3);
    }

    #[test]
    fn rank_select_order_statistics() {
        let scores = [0.9, 0.5, -0.2, -0.7];
        let protected = [false; 4];
        let gates = rank_and_select(&scores, &protected, 2).unwrap();
        assert_eq!(gates, vec![true, true, false, false]);
    }

    #[test]
    fn rank_select_protected_always_on_and_budget_error() {
        let scores = [-5.0, 3.0, 2.0];
        let protected = [true, false, false];
        let gates = rank_and_select(&scores, &protected, 1).unwrap();
        assert_eq!(gates, vec![true, false, false]);
        assert!(rank_and_select(&scores, &protected, 0).is_err());
    }

    #[test]
    fn rank_select_tie_break_prefers_lower_index() {
        let scores = [0.5, 0.5, 0.5, 0.5];
        let protected = [false; 4];
        let gates = rank_and_select(&scores, &protected, 2).unwrap();
        assert_eq!(gates, vec![true, true, false, false]);
    }

    #[test]
    fn budget_count_property_over_random_draws() {
        let mut r = rng(3);
        for _ in 0..1000 {
            let n = 3 + (r.gen::<u32>() % 20) as usize;
            let scores: Vec<f64> = (0..n).map(|_| r.gen::<f64>() * 4.0 - 2.0).collect();
            let mut protected = vec![false; n];
            let n_protected = 1 + (r.gen::<u32>() as usize % (n / 2).max(1));
            for p in protected.iter_mut().take(n_protected) {
                *p = true;
            }
            let budget = n_protected + (r.gen::<u32>() as usize % (n + 3));
            let gates = rank_and_select(&scores, &protected, budget).unwrap();
            assert_eq!(
                gates.iter().filter(|&&g| g).count(),
                budget.min(n),
                "sum of gates must be min(C, total)"
            );
            for (g, p) in gates.iter().zip(&protected) {
                assert!(!p || *g, "protected branch pruned");
            }
        }
    }

    #[test]
    fn monotone_alpha_never_drops_a_kept_branch() {
        let mut r = rng(4);
        for _ in 0..200 {
            let n = 8;
            let mut scores: Vec<f64> = (0..n).map(|_| r.gen::<f64>() * 2.0 - 1.0).collect();
            let protected = vec![false; n];
            let budget = 3;
            let gates = rank_and_select(&scores, &protected, budget).unwrap();
            let target = r.gen::<u32>() as usize % n;
            if !gates[target] {
                continue;
            }
            scores[target] += 0.5 + r.gen::<f64>();
            let gates2 = rank_and_select(&scores, &protected, budget).unwrap();
            assert!(gates2[target], "raising alpha evicted a kept branch");
        }
    }

    #[test]
    fn gate_alpha_gradient_scalar_case() {
        // <upstream, O> = 6, z_soft = 0.5, lambda = 1 -> d alpha = 6 * 0.25.
        let mut tape = Tape::<f64>::new();
        let o = tape.input(Tensor::new([1, 1, 1, 3], vec![1.0, 2.0, 3.0]).unwrap());
        let alpha = tape.input(Tensor::scalar(0.0));
        let gated = tape.gate(o, 1.0, Some(alpha), 0.5, 1.0);
        // loss = sum(gated) via scale-by-one then CE is overkill; drive
        // backward with an explicit summing head: upstream of all ones.
        let s = tape.input(Tensor::scalar(1.0));
        let y = tape.scale(gated, s).unwrap();
        // backward needs a scalar: sum via global_avg_pool * numel trick.
        let pooled = tape.global_avg_pool(y); // mean = (1+2+3)/3 = 2
        tape.backward(pooled).unwrap();
        // d pooled / d gated = 1/3 each, so <upstream, O> = (1+2+3)/3 = 2;
        // d alpha = 2 * 0.25 = 0.5
        let got = tape.grad(alpha).unwrap()[0];
        assert!((got - 0.5).abs() < 1e-12, "{got}");
    }

    #[test]
    fn gate_zero_upstream_gives_zero_alpha_grad() {
        let mut tape = Tape::<f64>::new();
        let o = tape.input(Tensor::new([1, 1, 1, 2], vec![5.0, -3.0]).unwrap());
        let alpha = tape.input(Tensor::scalar(0.2));
        let gated = tape.gate(o, 1.0, Some(alpha), 0.6, 1.0);
        let relu_neg = tape.relu(gated); // keep graph alive
        let zero = tape.input(Tensor::scalar(0.0));
        let y = tape.scale(relu_neg, zero).unwrap();
        let pooled = tape.global_avg_pool(y);
        tape.backward(pooled).unwrap();
        let got = tape.grad(alpha).unwrap()[0];
        assert_eq!(got, 0.0);
    }

    #[test]
    fn soft_mode_alpha_gradient_matches_finite_differences() {
        // Forward with the soft multiplier makes the relaxed objective an
        // ordinary function of alpha; Eq-style analytic gradient must match
        // central differences.
        let mut r = rng(5);
        let o_t = Tensor::<f64>::randn([1, 2, 3, 3], 1.0, &mut r);
        let w_t = Tensor::<f64>::randn([3, 2, 1, 1], 0.7, &mut r);
        let (zeta, lambda) = (0.37, 1.0);

        let build = |alpha: f64| -> (Tape<f64>, crate::autodiff::Var, crate::autodiff::Var) {
            let z_soft = compute_importance(alpha, zeta, lambda);
            let mut tape = Tape::new();
            let o = tape.input(o_t.clone());
            let a = tape.input(Tensor::scalar(alpha));
            let gated = tape.gate(o, z_soft, Some(a), z_soft, lambda);
            let pooled = tape.global_avg_pool(gated);
            let w = tape.input(w_t.clone());
            let b = tape.input(Tensor::zeros([1, 3, 1, 1]));
            let logits = tape.linear(pooled, w, b).unwrap();
            let loss = tape.softmax_cross_entropy(logits, &[1]).unwrap();
            (tape, loss, a)
        };
        let (mut tape, loss, a) = build(0.3);
        tape.backward(loss).unwrap();
        let analytic = tape.grad(a).unwrap()[0];
        let mut loss_at = |p: &[Vec<f64>]| {
            let (t, l, _) = build(p[0][0]);
            t.value(l).data()[0]
        };
        let report =
            oracle::check_grads_fd(&mut loss_at, &[vec![0.3]], &[vec![analytic]], 1, 1e-5);
        report.assert_below(1e-5);
    }

    #[test]
    fn finalize_tie_break_and_strict_order() {
        let mut r = rng(6);
        let mut net =
            RepNet::<f32>::build(&mut r, 3, &[(4, 1), (4, 1)], 3, 3, &BranchKind::ALL).unwrap();
        let arch = ArchState::attach(&mut net, 1.0);
        let total = arch.total();
        let protected = arch.protected_count();
        assert_eq!(total, 13); // 6 (c_in != c_out drops skip) + 7
        assert_eq!(protected, 2);

        // All alphas equal -> ties resolve to lowest indices.
        let (gates, _) = finalize_architecture(&net, &arch, protected + 2).unwrap();
        let flat: Vec<bool> = gates.concat();
        let kept: Vec<usize> = flat
            .iter()
            .enumerate()
            .filter(|(_, &g)| g)
            .map(|(i, _)| i)
            .collect();
        let protected_idx: Vec<usize> = arch
            .entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.protected)
            .map(|(i, _)| i)
            .collect();
        let extras: Vec<usize> = kept
            .iter()
            .copied()
            .filter(|i| !protected_idx.contains(i))
            .collect();
        let lowest_free: Vec<usize> = (0..total)
            .filter(|i| !protected_idx.contains(i))
            .take(2)
            .collect();
        assert_eq!(extras, lowest_free);

        // Strictly ordered alphas -> top-C prefix of the sorted order.
        for (i, e) in arch.entries.iter().enumerate() {
            net.store.value_mut(e.alpha).data_mut()[0] = -(i as f32) * 0.1;
        }
        let (gates2, desc) = finalize_architecture(&net, &arch, protected + 3).unwrap();
        let flat2: Vec<bool> = gates2.concat();
        let nonprot_kept: Vec<usize> = flat2
            .iter()
            .enumerate()
            .filter(|(i, &g)| g && !protected_idx.contains(i))
            .map(|(i, _)| i)
            .collect();
        // alphas descend with index, so the first three non-protected win.
        assert_eq!(nonprot_kept, lowest_free.iter().copied().chain(
            (0..total).filter(|i| !protected_idx.contains(i)).nth(2)
        ).collect::<Vec<_>>());
        assert!(desc.blocks.iter().all(|b| b.alpha.is_some()));
    }

    #[test]
    fn keep_frequency_is_monotone_in_alpha() {
        // 20-branch synthetic state, 1e4 draws: Spearman correlation
        // between alpha and budgeted keep frequency above 0.95.
        let mut r = rng(7);
        let n = 20;
        let alphas: Vec<f64> = (0..n).map(|_| r.gen::<f64>() * 4.0 - 2.0).collect();
        let protected = vec![false; n];
        let mut keeps = vec![0.0f64; n];
        let draws = 10_000;
        for _ in 0..draws {
            let scores: Vec<f64> = alphas
                .iter()
                .map(|&a| a + sample_logistic_noise(&mut r))
                .collect();
            let gates = rank_and_select(&scores, &protected, 8).unwrap();
            for (k, g) in keeps.iter_mut().zip(&gates) {
                if *g {
                    *k += 1.0;
                }
            }
        }
        for k in keeps.iter_mut() {
            *k /= draws as f64;
        }
        let rho = oracle::spearman(&alphas, &keeps);
        assert!(rho > 0.95, "Spearman {rho}");
    }

    #[test]
    fn straight_through_sign_agrees_with_soft_relaxation() {
        // With lambda = 1, the implemented alpha gradient (hard forward,
        // soft backward) must have the same sign as the gradient of the
        // fully soft objective in at least 95% of random trials.
        let mut r = rng(8);
        let mut agree = 0;
        let trials = 200;
        for _ in 0..trials {
            let o_t = Tensor::<f64>::randn([1, 2, 2, 2], 1.0, &mut r);
            let w_t = Tensor::<f64>::randn([2, 2, 1, 1], 1.0, &mut r);
            let alpha = r.gen::<f64>() * 2.0 - 1.0;
            let zeta = sample_logistic_noise(&mut r);
            let z_soft = compute_importance(alpha, zeta, 1.0);
            let label = 0usize;

            let grad_with_mult = |mult: f64| -> f64 {
                let mut tape = Tape::new();
                let o = tape.input(o_t.clone());
                let a = tape.input(Tensor::scalar(alpha));
                let gated = tape.gate(o, mult, Some(a), z_soft, 1.0);
                let pooled = tape.global_avg_pool(gated);
                let w = tape.input(w_t.clone());
                let b = tape.input(Tensor::zeros([1, 2, 1, 1]));
                let logits = tape.linear(pooled, w, b).unwrap();
                let loss = tape.softmax_cross_entropy(logits, &[label]).unwrap();
                tape.backward(loss).unwrap();
                tape.grad(a).unwrap()[0]
            };
            let hard = grad_with_mult(1.0);
            let soft = grad_with_mult(z_soft);
            if hard == 0.0 && soft == 0.0 || hard.signum() == soft.signum() {
                agree += 1;
            }
        }
        assert!(
            agree as f64 / trials as f64 >= 0.95,
            "sign agreement {agree}/{trials}"
        );
    }
}
