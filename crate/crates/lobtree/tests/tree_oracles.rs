//! Cross-checks of the tree samplers against independently computed
//! oracles: closed-form tail values, a second implementation of the
//! barrier walk, and the exponential-sum duration bounds. Everything here
//! is deterministic for a fixed master seed.

use lobtree::measures::JumpDistribution;
use lobtree::stats::{self, target, tree_key};
use lobtree::tree::{
    b_stats_keyed, explore, generation_sizes_keyed, height_reaches_keyed, progeny_reaches_keyed,
    ColoredTree,
};
use lobtree::verify::{Freq, Moments};

const SEED: u64 = 0x5eed_0123_4567_89ab;

fn jumps() -> JumpDistribution {
    JumpDistribution::reference()
}

/// Catalan numbers computed directly (u128 exact up to n = 30), giving an
/// enumeration-based P(|T| = k) = Cat(k-1) / 2^(2k-1) to check the ratio
/// recursion behind `target::progeny_tail_exact`.
fn catalan(n: u32) -> u128 {
    let mut c: u128 = 1;
    for i in 0..n as u128 {
        c = c * 2 * (2 * i + 1) / (i + 2);
    }
    c
}

#[test]
fn progeny_tail_recursion_matches_direct_catalan_enumeration() {
    for u in 2u64..=20 {
        let mut tail = 1.0f64;
        for k in 1..u {
            let p = catalan(k as u32 - 1) as f64 / 2f64.powi(2 * k as i32 - 1);
            tail -= p;
        }
        let got = target::progeny_tail_exact(u);
        assert!(
            (got - tail).abs() < 1e-12,
            "u = {u}: recursion gave {got}, enumeration gave {tail}"
        );
    }
    // And the sqrt(u)-scaled values approach the limiting constant from above.
    let s100 = 100f64.sqrt() * target::progeny_tail_exact(100);
    let s400 = 400f64.sqrt() * target::progeny_tail_exact(400);
    assert!(s100 > s400 && s400 > target::PROGENY_TAIL_CONST);
    assert!(s100 - target::PROGENY_TAIL_CONST < 0.005);
}

#[test]
fn sampled_height_and_progeny_tails_match_exact_values() {
    let j = jumps();
    let reps = 150_000u64;
    // P(h >= 2) = 1/2 exactly: the root has at least one child.
    let mut h = Freq::default();
    // P(|T| >= 4) exactly from the Catalan pmf.
    let mut t4 = Freq::default();
    for r in 0..reps {
        let key = tree_key(SEED, 61, r);
        h.push(height_reaches_keyed(&j, key, 2));
        t4.push(progeny_reaches_keyed(&j, key, 4));
    }
    let dev_h = (h.p() - target::height_tail(2)).abs();
    assert!(
        dev_h <= 4.0 * h.se(),
        "P(h >= 2) = {} vs 0.5 (dev {dev_h}, se {})",
        h.p(),
        h.se()
    );
    let p4 = target::progeny_tail_exact(4);
    let dev_t = (t4.p() - p4).abs();
    assert!(
        dev_t <= 4.0 * t4.se(),
        "P(|T| >= 4) = {} vs {p4} (dev {dev_t}, se {})",
        t4.p(),
        t4.se()
    );
}

/// The streaming barrier walk (`b_stats_keyed`) and the arena
/// exploration (`ColoredTree` + `explore`) are written independently but
/// must agree node for node on the same keyed tree.
#[test]
fn streaming_barrier_walk_agrees_with_arena_exploration() {
    let j = jumps();
    let mut compared = 0u32;
    let mut skipped = 0u32;
    for r in 0..3_000u64 {
        let key = tree_key(SEED, 62, r);
        let s = b_stats_keyed(1, &j, key, 200_000, None);
        if s.node_overflow {
            skipped += 1;
            continue;
        }
        let mut tree = ColoredTree::new_lazy(1, key, 400_000);
        let trace = explore(&mut tree, &j, false, None).expect("within step budget");
        assert_eq!(s.b_size, trace.b_size, "replica {r}: |B| mismatch");
        assert_eq!(s.k_size, trace.k_size, "replica {r}: |K| mismatch");
        assert_eq!(s.tau, trace.tau, "replica {r}: tau mismatch");
        assert_eq!(s.psi_star, trace.psi_star_b, "replica {r}: psi* mismatch");
        assert_eq!(s.height, trace.height_b, "replica {r}: height mismatch");
        compared += 1;
    }
    assert!(compared >= 2_900, "only {compared} trees compared ({skipped} skipped)");
}

#[test]
fn exploration_step_count_identity_holds_without_exception() {
    let j = jumps();
    let out = stats::tau_identity_block(&j, SEED, 63, 0..200_000, 4_000, 8_192);
    assert_eq!(out.violations, 0, "step-count identity violated");
    assert_eq!(out.completed + out.capped, 200_000);
    // The cap tail is the progeny tail ~ 0.57/sqrt(2000) of replicas (~2.6k).
    assert!(out.capped < 3_500, "{} capped explorations", out.capped);
}

#[test]
fn generation_sizes_match_martingale_and_variance_recursion() {
    let j = jumps();
    let reps = 200_000u64;
    let m_max = 3u32;
    let mut gens: Vec<Moments> = vec![Moments::default(); m_max as usize];
    let mut sq: Vec<Moments> = vec![Moments::default(); m_max as usize];
    for r in 0..reps {
        let key = tree_key(SEED, 64, r);
        let (sizes, overflow) = generation_sizes_keyed(&j, key, m_max, 1 << 20);
        assert!(!overflow);
        for m in 0..m_max as usize {
            let z = sizes[m] as f64;
            gens[m].push(z);
            sq[m].push((z - 1.0) * (z - 1.0));
        }
    }
    for m in 0..m_max as usize {
        // E Z_m = 1 (criticality) and E (Z_m - 1)^2 = 2m.
        let dev_mean = (gens[m].mean() - 1.0).abs();
        assert!(
            dev_mean <= 4.0 * gens[m].se(),
            "E Z_{} = {} (dev {dev_mean})",
            m + 1,
            gens[m].mean()
        );
        let want = target::var_gen(m as u32 + 1);
        let dev_var = (sq[m].mean() - want).abs();
        assert!(
            dev_var <= 4.0 * sq[m].se(),
            "E (Z_{} - 1)^2 = {} vs {want} (dev {dev_var}, se {})",
            m + 1,
            sq[m].mean(),
            sq[m].se()
        );
    }
}

/// Excursion durations are sums of tau i.i.d. Exp(2 lambda) epochs, so they
/// are sandwiched by the step-count tails with exponential corrections:
///
///   P(tau >= 4 lambda y) - exp(-mu_lo y)
///     <= P(S(tau) >= y) <=
///   P(tau >= lambda y) + exp(-mu_hi y)
///
/// with mu_hi = (1 - ln 2) lambda and mu_lo = (2 ln 2 - 1) lambda. The large
/// deviations are one-sided gamma bounds, valid for every y > 0.
#[test]
fn excursion_duration_tails_sit_inside_the_exponential_sandwich() {
    let j = jumps();
    let lambda = 1.0f64;
    let reps = 20_000u64;
    let samples = stats::coupling_tree_block(&j, lambda, SEED, 65, 0..reps, 500_000, 250_000);
    let kept = samples.durations.len() as f64;
    assert!(kept >= 0.99 * reps as f64, "too many rejected/overflowed trees");
    let mu_hi = (1.0 - std::f64::consts::LN_2) * lambda;
    let mu_lo = (2.0 * std::f64::consts::LN_2 - 1.0) * lambda;
    for y in [4.0f64, 20.0] {
        let p_dur = samples.durations.iter().filter(|&&d| d >= y).count() as f64 / kept;
        let p_tau_hi = samples.taus.iter().filter(|&&t| t >= lambda * y).count() as f64 / kept;
        let p_tau_lo =
            samples.taus.iter().filter(|&&t| t >= 4.0 * lambda * y).count() as f64 / kept;
        let upper = p_tau_hi + (-mu_hi * y).exp();
        let lower = p_tau_lo - (-mu_lo * y).exp();
        // 5 SE of slack for the Monte Carlo error in each estimate.
        let slack = 5.0 * (p_dur * (1.0 - p_dur) / kept).sqrt().max(1e-4);
        assert!(
            p_dur <= upper + slack,
            "y = {y}: P(S >= y) = {p_dur} above upper bound {upper}"
        );
        assert!(
            p_dur >= lower - slack,
            "y = {y}: P(S >= y) = {p_dur} below lower bound {lower}"
        );
    }
}

/// Truncation control for the walk-positivity estimate: the per-step decay
/// rate of P(min over k steps >= 0, walk still near zero) is bounded by the
/// Chernoff rho, so cutoff 1000 leaves no measurable truncation bias.
#[test]
fn chernoff_rate_bounds_the_minimum_walk_truncation() {
    let j = jumps();
    let rho = target::chernoff_rho(&j);
    assert!((rho - 2.0 * (0.3f64 * 0.7).sqrt()).abs() < 1e-9);
    // Estimates at two cutoffs differ by far less than their own noise.
    let mut short = Freq::default();
    let mut long = Freq::default();
    for (cutoff, freq) in [(200u32, &mut short), (1_000, &mut long)] {
        let block = stats::min_walk_block(&j, SEED, 66, 0..100_000, cutoff);
        freq.merge(&block);
    }
    let gap = (short.p() - long.p()).abs();
    assert!(
        gap <= 3.0 * short.se().hypot(long.se()),
        "cutoff 200 vs 1000: {} vs {} (gap {gap})",
        short.p(),
        long.p()
    );
    let exact = target::min_walk_positive(&j);
    assert!((long.p() - exact).abs() <= 4.0 * long.se());
}
