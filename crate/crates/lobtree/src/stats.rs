//! Monte Carlo estimators for the branching-walk quantities that drive the
//! book's excursion behavior, with their closed-form targets.
//!
//! Every estimator works on a half-open replica range so the harness can
//! split work into fixed blocks and merge the per-block accumulators in
//! index order: results are then independent of the thread schedule. Trees
//! are keyed per replica and sampled through the splitmix streams, so no
//! state is shared between replicas.

use std::ops::Range;

use crate::measures::JumpDistribution;
use crate::rng::{mix64, NodeDraws};
use crate::tree::{
    b_height_reaches_keyed, b_stats_keyed, contour_hits, contour_visits, explore,
    generation_sizes_keyed, height_reaches_keyed, label_count_keyed, progeny_reaches_keyed,
    psi_b_reaches_keyed, ColoredTree,
};
use crate::verify::{Freq, Moments};

/// Separates the holding-time stream from the tree-shape stream of a key.
const DURATION_SALT: u64 = 0x7f4a_7c15_9e37_79b9;

/// Root key for one replica of one experiment. mix64 is bijective, so keys
/// are collision-free across replicas of an experiment; the experiment id in
/// the high byte separates experiments under the same master seed.
pub fn tree_key(master_seed: u64, experiment_id: u8, replica: u64) -> u64 {
    mix64(mix64(master_seed ^ ((experiment_id as u64) << 56)) ^ replica)
}

#[inline]
fn exp_draw(d: &mut NodeDraws, rate: f64) -> f64 {
    // u uniform in (0,1), offset keeps it strictly inside
    let u = ((d.next_u64() >> 11) as f64 + 0.5) * (1.0 / 9_007_199_254_740_992.0);
    -u.ln() / rate
}

/// A point estimate with its standard error and bookkeeping counts.
#[derive(Debug, Clone, Copy)]
pub struct Estimate {
    pub value: f64,
    pub se: f64,
    pub n: u64,
    /// Replicas dropped (budget/cap overflows), tallied, never silently lost.
    pub excluded: u64,
}

/// Closed-form targets. Each formula is stated with its one-line derivation;
/// the reference displacement law (+1 w.p. 0.7, -1 w.p. 0.3) gives the
/// familiar constants 3/7, 4/7, 0.2286, 1/0.7.
pub mod target {
    use crate::measures::JumpDistribution;

    /// P(height >= u) for the critical geometric(1/2) tree, root at depth 1.
    /// Iterating the offspring generating function g(s) = 1/(2-s) gives the
    /// survival probability 1/u at depth u exactly.
    pub fn height_tail(u: u32) -> f64 {
        1.0 / u as f64
    }

    /// Limit of sqrt(u) * P(|T| >= u): the total progeny has the Catalan law
    /// P(|T| = k) = Cat(k-1) 2^{-(2k-1)} with tail k^{-3/2}/(2 sqrt(pi));
    /// summing yields u^{-1/2}/sqrt(pi).
    pub const PROGENY_TAIL_CONST: f64 = 0.564_189_583_547_756_3;

    /// Exact P(|T| >= u) from the Catalan pmf, via the stable ratio
    /// recursion p_{k+1} = p_k (2k-1)/(2(k+1)).
    pub fn progeny_tail_exact(u: u64) -> f64 {
        let mut p = 0.5f64; // P(|T| = 1)
        let mut tail = 1.0f64;
        for k in 1..u {
            tail -= p;
            let kf = k as f64;
            p *= (2.0 * kf - 1.0) / (2.0 * (kf + 1.0));
        }
        tail.max(0.0)
    }

    /// E|K(T_1)| = 1 - E(J)/P(J=1): each killed node is a failed upward
    /// ladder step of the skip-free label walk; the ladder-height identity
    /// turns the mean into this ratio. Reference law: 3/7.
    pub fn mean_killed(j: &JumpDistribution) -> f64 {
        1.0 - j.mean() / j.p_one()
    }

    /// P(the label walk never goes negative) = E(J)/P(J=1) for skip-free
    /// upward walks with positive drift (ladder identity). Reference: 4/7.
    pub fn min_walk_positive(j: &JumpDistribution) -> f64 {
        j.mean() / j.p_one()
    }

    /// Limit of u * P(height(B(T_1)) >= u): the barrier tree survives to
    /// depth u with the same 1/u decay as the free tree, thinned by the
    /// walk-positivity constant. Reference: 4/7.
    pub fn barrier_height_tail_limit(j: &JumpDistribution) -> f64 {
        j.mean() / j.p_one()
    }

    /// Limit of u * P(psi*(B(T_1)) >= u) = E(J)^2/P(J=1): reaching label u
    /// costs a factor E(J) on top of the depth tail. Reference: 0.16/0.7.
    pub fn psi_tail_limit(j: &JumpDistribution) -> f64 {
        j.mean() * j.mean() / j.p_one()
    }

    /// Limit of (1/y) E #{v in B(T_1): label(v) <= y} = 1/P(J=1): one
    /// upward ladder step per level, each costing 1/P(J=1) tries.
    pub fn label_count_limit(j: &JumpDistribution) -> f64 {
        1.0 / j.p_one()
    }

    /// E(#visits of the contour walk to m | walk from 1 hits u before 0):
    /// gambler's-ruin visit counts for the fair walk, combined over the
    /// before/after-first-hit segments.
    pub fn contour_visits_conditional(m: u32, u: u32) -> f64 {
        let (m, u) = (m as f64, u as f64);
        2.0 + (2.0 * m * (u - m) - u) / u + 2.0 * m - 1.0
    }

    /// Var(Z_1 + ... + Z_n) for the critical geometric tree:
    /// Var(Z_m) = 2m and Cov(Z_i, Z_j) = 2 min(i,j) (generation sizes are a
    /// martingale), which sums to n(n+1) + 2(n-1)n(n+1)/3.
    pub fn var_gen_sum(n: u32) -> f64 {
        let n = n as f64;
        n * (n + 1.0) + 2.0 * (n - 1.0) * n * (n + 1.0) / 3.0
    }

    /// Var(Z_m) = E[(Z_m - 1)^2] = 2m.
    pub fn var_gen(m: u32) -> f64 {
        2.0 * m as f64
    }

    /// min_theta E e^{-theta J}: per-step decay rate of P(S_k < 0), used to
    /// bound the truncation error of the finite-cutoff walk-positivity
    /// estimate. Ternary search on the convex moment generating function.
    pub fn chernoff_rho(j: &JumpDistribution) -> f64 {
        let mgf = |theta: f64| -> f64 {
            j.support()
                .iter()
                .zip(j.probs())
                .map(|(&v, &p)| p * (-theta * v as f64).exp())
                .sum()
        };
        let (mut lo, mut hi) = (0.0f64, 60.0f64);
        for _ in 0..200 {
            let m1 = lo + (hi - lo) / 3.0;
            let m2 = hi - (hi - lo) / 3.0;
            if mgf(m1) < mgf(m2) {
                hi = m2;
            } else {
                lo = m1;
            }
        }
        mgf((lo + hi) / 2.0)
    }
}

/// Outcome of the step-count identity check.
#[derive(Debug, Clone, Copy, Default)]
pub struct TauIdentity {
    pub completed: u64,
    pub capped: u64,
    /// Explorations whose step count differed from 2|B| - |K| - 1.
    pub violations: u64,
}

impl TauIdentity {
    pub fn merge(&mut self, o: &TauIdentity) {
        self.completed += o.completed;
        self.capped += o.capped;
        self.violations += o.violations;
    }
}

/// Run the full colored exploration per tree and compare the transition
/// count against 2|B| - |K| - 1. Trees over either cap are tallied and
/// skipped.
pub fn tau_identity_block(
    jumps: &JumpDistribution,
    master_seed: u64,
    experiment_id: u8,
    range: Range<u64>,
    step_cap: u64,
    node_cap: u32,
) -> TauIdentity {
    let mut out = TauIdentity::default();
    for r in range {
        let key = tree_key(master_seed, experiment_id, r);
        let mut tree = ColoredTree::new_lazy(1, key, node_cap);
        match explore(&mut tree, jumps, false, Some(step_cap)) {
            Ok(trace) => {
                out.completed += 1;
                if trace.tau != 2 * trace.b_size - trace.k_size - 1 {
                    out.violations += 1;
                }
            }
            Err(_) => out.capped += 1,
        }
    }
    out
}

/// Killed-set sizes |K(T_1)|; overflowed trees excluded from the mean.
pub fn killed_mean_block(
    jumps: &JumpDistribution,
    master_seed: u64,
    experiment_id: u8,
    range: Range<u64>,
    node_budget: u64,
) -> (Moments, u64) {
    let mut m = Moments::default();
    let mut excluded = 0u64;
    for r in range {
        let key = tree_key(master_seed, experiment_id, r);
        let s = b_stats_keyed(1, jumps, key, node_budget, None);
        if s.node_overflow {
            excluded += 1;
        } else {
            m.push(s.k_size as f64);
        }
    }
    (m, excluded)
}

/// Frequency of trees reaching depth u.
pub fn height_tail_block(
    jumps: &JumpDistribution,
    master_seed: u64,
    experiment_id: u8,
    range: Range<u64>,
    u: u32,
) -> Freq {
    let mut f = Freq::default();
    for r in range {
        let key = tree_key(master_seed, experiment_id, r);
        f.push(height_reaches_keyed(jumps, key, u));
    }
    f
}

/// Frequency of trees with at least u nodes.
pub fn progeny_tail_block(
    jumps: &JumpDistribution,
    master_seed: u64,
    experiment_id: u8,
    range: Range<u64>,
    u: u64,
) -> Freq {
    let mut f = Freq::default();
    for r in range {
        let key = tree_key(master_seed, experiment_id, r);
        f.push(progeny_reaches_keyed(jumps, key, u));
    }
    f
}

/// Frequency of barrier trees reaching depth u; overflowed walks excluded.
pub fn b_height_tail_block(
    jumps: &JumpDistribution,
    master_seed: u64,
    experiment_id: u8,
    range: Range<u64>,
    u: u32,
    node_budget: u64,
) -> (Freq, u64) {
    let mut f = Freq::default();
    let mut excluded = 0u64;
    for r in range {
        let key = tree_key(master_seed, experiment_id, r);
        let (hit, overflow) = b_height_reaches_keyed(1, jumps, key, u, node_budget);
        if overflow {
            excluded += 1;
        } else {
            f.push(hit);
        }
    }
    (f, excluded)
}

/// Frequency of barrier trees containing a label >= u; overflows excluded.
pub fn psi_tail_block(
    jumps: &JumpDistribution,
    master_seed: u64,
    experiment_id: u8,
    range: Range<u64>,
    u: i64,
    node_budget: u64,
) -> (Freq, u64) {
    let mut f = Freq::default();
    let mut excluded = 0u64;
    for r in range {
        let key = tree_key(master_seed, experiment_id, r);
        let (hit, overflow) = psi_b_reaches_keyed(1, jumps, key, u, node_budget);
        if overflow {
            excluded += 1;
        } else {
            f.push(hit);
        }
    }
    (f, excluded)
}

/// Per-tree counts of barrier-tree labels <= y (killed nodes included),
/// truncated at `depth_horizon` generations.
pub fn label_count_block(
    jumps: &JumpDistribution,
    master_seed: u64,
    experiment_id: u8,
    range: Range<u64>,
    y: i64,
    depth_horizon: u32,
) -> Moments {
    let mut m = Moments::default();
    for r in range {
        let key = tree_key(master_seed, experiment_id, r);
        m.push(label_count_keyed(1, jumps, key, y, depth_horizon) as f64);
    }
    m
}

/// Frequency of displacement walks staying nonnegative for `cutoff` steps.
/// A walk is certified early once it is too high for the remaining steps to
/// pull it below 0 (exact, since the largest downward step is bounded).
pub fn min_walk_block(
    jumps: &JumpDistribution,
    master_seed: u64,
    experiment_id: u8,
    range: Range<u64>,
    cutoff: u32,
) -> Freq {
    let mut f = Freq::default();
    let md = jumps.max_down();
    for r in range {
        let key = tree_key(master_seed, experiment_id, r);
        let mut d = NodeDraws::new(key);
        let mut s = 0i64;
        let mut ok = true;
        for k in 0..cutoff {
            if s >= md * (cutoff - k) as i64 {
                break;
            }
            s += jumps.sample_u64(d.next_u64());
            if s < 0 {
                ok = false;
                break;
            }
        }
        f.push(ok);
    }
    f
}

/// Exploration statistics of fresh trees, as samples aligned with the
/// book-excursion observables: step count tau, max label, killed count, and
/// the elapsed time of tau exponential holding steps at rate 2*lambda.
#[derive(Debug, Clone, Default)]
pub struct CouplingSamples {
    pub taus: Vec<f64>,
    pub max_labels: Vec<f64>,
    pub kills: Vec<f64>,
    pub durations: Vec<f64>,
    /// Trees rejected because tau exceeded the cap (the book side aborts its
    /// excursions at the matching jump cap, so both sides keep the same
    /// conditional law).
    pub rejected: u64,
    pub overflow: u64,
}

impl CouplingSamples {
    pub fn merge(&mut self, mut o: CouplingSamples) {
        self.taus.append(&mut o.taus);
        self.max_labels.append(&mut o.max_labels);
        self.kills.append(&mut o.kills);
        self.durations.append(&mut o.durations);
        self.rejected += o.rejected;
        self.overflow += o.overflow;
    }
}

pub fn coupling_tree_block(
    jumps: &JumpDistribution,
    lambda: f64,
    master_seed: u64,
    experiment_id: u8,
    range: Range<u64>,
    tau_cap: u64,
    node_budget: u64,
) -> CouplingSamples {
    let mut out = CouplingSamples::default();
    for r in range {
        let key = tree_key(master_seed, experiment_id, r);
        let s = b_stats_keyed(1, jumps, key, node_budget, Some(tau_cap));
        if s.node_overflow {
            out.overflow += 1;
            continue;
        }
        if s.tau_at_cap {
            out.rejected += 1;
            continue;
        }
        let mut d = NodeDraws::new(key ^ DURATION_SALT);
        let duration: f64 = (0..s.tau).map(|_| exp_draw(&mut d, 2.0 * lambda)).sum();
        out.taus.push(s.tau as f64);
        out.max_labels.push(s.psi_star as f64);
        out.kills.push(s.k_size as f64);
        out.durations.push(duration);
    }
    out
}

/// Mean/variance accumulator carrying third and fourth powers, for standard
/// errors of variance estimates.
#[derive(Debug, Clone, Copy, Default)]
pub struct Moments4 {
    pub n: u64,
    pub s1: f64,
    pub s2: f64,
    pub s3: f64,
    pub s4: f64,
}

impl Moments4 {
    pub fn push(&mut self, x: f64) {
        self.n += 1;
        self.s1 += x;
        self.s2 += x * x;
        self.s3 += x * x * x;
        self.s4 += x * x * x * x;
    }

    pub fn merge(&mut self, o: &Moments4) {
        self.n += o.n;
        self.s1 += o.s1;
        self.s2 += o.s2;
        self.s3 += o.s3;
        self.s4 += o.s4;
    }

    pub fn mean(&self) -> f64 {
        self.s1 / self.n as f64
    }

    /// Unbiased sample variance.
    pub fn var(&self) -> f64 {
        let n = self.n as f64;
        ((self.s2 - self.s1 * self.s1 / n) / (n - 1.0)).max(0.0)
    }

    /// Standard error of the sample variance, from the central fourth
    /// moment: Var(s^2) ~ (m4 - m2^2 (n-3)/(n-1)) / n.
    pub fn var_se(&self) -> f64 {
        let n = self.n as f64;
        let mu = self.mean();
        let m2 = (self.s2 / n - mu * mu).max(0.0);
        let m4 = (self.s4 / n - 4.0 * mu * self.s3 / n + 6.0 * mu * mu * self.s2 / n
            - 3.0 * mu * mu * mu * mu)
            .max(0.0);
        ((m4 - m2 * m2 * (n - 3.0) / (n - 1.0)).max(0.0) / n).sqrt()
    }
}

/// Accumulated moments of Z_1 + ... + Z_n for each requested n.
#[derive(Debug, Clone)]
pub struct GenVarAcc {
    pub n_list: Vec<u32>,
    pub moments: Vec<Moments4>,
    pub excluded: u64,
}

impl GenVarAcc {
    pub fn new(n_list: &[u32]) -> Self {
        GenVarAcc {
            n_list: n_list.to_vec(),
            moments: vec![Moments4::default(); n_list.len()],
            excluded: 0,
        }
    }

    pub fn merge(&mut self, o: &GenVarAcc) {
        for (a, b) in self.moments.iter_mut().zip(&o.moments) {
            a.merge(b);
        }
        self.excluded += o.excluded;
    }
}

pub fn gen_var_block(
    jumps: &JumpDistribution,
    master_seed: u64,
    experiment_id: u8,
    range: Range<u64>,
    n_list: &[u32],
    width_budget: usize,
) -> GenVarAcc {
    let mut acc = GenVarAcc::new(n_list);
    let m_max = *n_list.iter().max().expect("nonempty n_list");
    for r in range {
        let key = tree_key(master_seed, experiment_id, r);
        let (sizes, capped) = generation_sizes_keyed(jumps, key, m_max, width_budget);
        if capped {
            acc.excluded += 1;
            continue;
        }
        let mut prefix = 0u64;
        let mut next = 0usize;
        for (i, &z) in sizes.iter().enumerate() {
            prefix += z;
            while next < n_list.len() && n_list[next] as usize == i + 1 {
                acc.moments[next].push(prefix as f64);
                next += 1;
            }
        }
    }
    acc
}

/// Visits of the tree contour walk to level m, conditioned on the walk
/// reaching u before absorption, for each requested (m, u) pair on the same
/// walks. Returns (per-pair conditional moments, attempts, capped trees).
pub fn contour_conditional_block(
    jumps: &JumpDistribution,
    master_seed: u64,
    experiment_id: u8,
    range: Range<u64>,
    pairs: &[(i64, i64)],
    node_cap: u32,
) -> (Vec<Moments>, u64, u64) {
    let mut mom = vec![Moments::default(); pairs.len()];
    let mut attempts = 0u64;
    let mut capped = 0u64;
    for r in range {
        attempts += 1;
        let key = tree_key(master_seed, experiment_id, r);
        let mut tree = ColoredTree::new_lazy(1, key, node_cap);
        match tree.contour(jumps) {
            Err(_) => capped += 1,
            Ok(walk) => {
                for (acc, &(m, u)) in mom.iter_mut().zip(pairs) {
                    if contour_hits(&walk, u) {
                        acc.push(contour_visits(&walk, m) as f64);
                    }
                }
            }
        }
    }
    (mom, attempts, capped)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn jumps() -> JumpDistribution {
        JumpDistribution::reference()
    }

    #[test]
    fn exact_targets_reference_values() {
        let j = jumps();
        assert!((target::mean_killed(&j) - 3.0 / 7.0).abs() < 1e-12);
        assert!((target::min_walk_positive(&j) - 4.0 / 7.0).abs() < 1e-12);
        assert!((target::psi_tail_limit(&j) - 0.16 / 0.7).abs() < 1e-12);
        assert!((target::label_count_limit(&j) - 1.0 / 0.7).abs() < 1e-12);
        assert!((target::contour_visits_conditional(1, 2) - 3.0).abs() < 1e-12);
        assert!((target::contour_visits_conditional(2, 4) - 6.0).abs() < 1e-12);
        assert_eq!(target::var_gen_sum(1), 2.0);
        assert_eq!(target::var_gen_sum(2), 10.0);
        assert_eq!(target::var_gen_sum(5), 110.0);
        // Catalan pmf cross-checks of the progeny tail
        assert!((target::progeny_tail_exact(2) - 0.5).abs() < 1e-12);
        assert!((10.0 * target::progeny_tail_exact(100) - 0.566316).abs() < 1e-5);
        assert!((20.0 * target::progeny_tail_exact(400) - 0.564719).abs() < 1e-5);
        // two-point Chernoff rate has the closed form 2 sqrt(p(1-p))
        assert!((target::chernoff_rho(&j) - 2.0 * (0.3f64 * 0.7).sqrt()).abs() < 1e-9);
    }

    #[test]
    fn tau_identity_holds_on_small_sample() {
        let t = tau_identity_block(&jumps(), 99, 1, 0..2000, 10_000, 1 << 20);
        assert_eq!(t.violations, 0);
        assert!(t.completed >= 1950, "completed {}", t.completed);
    }

    #[test]
    fn height_tail_matches_exact_law() {
        let f = height_tail_block(&jumps(), 99, 2, 0..20_000, 2);
        assert!((f.p() - 0.5).abs() < 0.02);
        let f5 = height_tail_block(&jumps(), 99, 2, 0..20_000, 5);
        assert!((f5.p() - 0.2).abs() < 0.02);
    }

    #[test]
    fn early_certification_is_exact() {
        // replay the same keys without the certification shortcut
        let j = jumps();
        let cutoff = 30u32;
        let shortcut = min_walk_block(&j, 1234, 3, 0..20_000, cutoff);
        let mut reference = Freq::default();
        for r in 0..20_000 {
            let key = tree_key(1234, 3, r);
            let mut d = NodeDraws::new(key);
            let mut s = 0i64;
            let mut ok = true;
            for _ in 0..cutoff {
                s += j.sample_u64(d.next_u64());
                if s < 0 {
                    ok = false;
                    break;
                }
            }
            reference.push(ok);
        }
        assert_eq!(shortcut.hits, reference.hits);
        assert_eq!(shortcut.n, reference.n);
    }

    #[test]
    fn killed_mean_near_target() {
        let (m, excluded) = killed_mean_block(&jumps(), 5, 4, 0..30_000, 1 << 20);
        // heavy progeny tail: a handful of trees outgrow the budget
        assert!(excluded < 100, "excluded {excluded}");
        let t = target::mean_killed(&jumps());
        assert!((m.mean() - t).abs() < 4.0 * m.se(), "mean {} vs {}", m.mean(), t);
    }

    #[test]
    fn contour_conditional_near_formula() {
        let (moms, attempts, capped) =
            contour_conditional_block(&jumps(), 7, 5, 0..40_000, &[(1, 2), (2, 4)], 1 << 20);
        assert_eq!(attempts, 40_000);
        assert!(capped < 200, "capped {capped}");
        let m = &moms[0];
        assert!(m.n > 15_000, "conditioning too rare: {}", m.n);
        assert!((m.mean() - 3.0).abs() < 4.0 * m.se().max(0.03));
        let m2 = &moms[1];
        assert!(m2.n > 5_000);
        assert!((m2.mean() - 6.0).abs() < 4.0 * m2.se().max(0.06));
    }

    #[test]
    fn gen_var_matches_recursion() {
        let acc = gen_var_block(&jumps(), 11, 6, 0..60_000, &[1, 2], 1 << 20);
        assert_eq!(acc.excluded, 0);
        for (i, &n) in acc.n_list.iter().enumerate() {
            let v = acc.moments[i].var();
            let t = target::var_gen_sum(n);
            let se = acc.moments[i].var_se();
            assert!((v - t).abs() < 4.0 * se, "n={n}: var {v} vs {t} (se {se})");
        }
    }

    #[test]
    fn coupling_samples_are_coherent() {
        let s = coupling_tree_block(&jumps(), 1.0, 13, 7, 0..5_000, 100_000, 1 << 22);
        assert!(s.rejected <= 50);
        assert_eq!(s.overflow, 0);
        assert_eq!(s.taus.len(), s.durations.len());
        assert!(s.taus.iter().all(|&t| t >= 1.0));
        assert!(s.max_labels.iter().all(|&l| l >= 1.0));
        assert!(s.durations.iter().all(|&d| d > 0.0));
        // smallest tree: tau = 1, no kills, max label 1
        assert!(s.taus.iter().any(|&t| t == 1.0));
    }
}
