//! Point measures on the nonnegative integer grid.
//!
//! An [`OrderBook`] is a finite point measure on {0,1,2,...}: `counts[level]`
//! copies of an order at each level. The price is the highest occupied level
//! (0 for the empty book, by convention). All mutation goes through
//! [`OrderBook::add_order`] and [`OrderBook::remove_at_price`], which is
//! exactly the event alphabet of the simulator; under those two operations a
//! book that starts empty keeps its support a contiguous interval reaching
//! down to level 0 or 1, and [`OrderBook::interval_full`] checks that.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MeasureError {
    #[error("cannot remove from an empty book")]
    EmptyBook,
    #[error("invalid jump distribution: {0}")]
    BadJumpDistribution(String),
    #[error("cannot parse measure: {0}")]
    Parse(String),
}

/// Finite point measure on the nonnegative integers.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct OrderBook {
    counts: BTreeMap<i64, u64>,
    mass: u64,
    /// Highest occupied level; 0 when empty.
    price: i64,
}

impl OrderBook {
    /// The empty book.
    pub fn new() -> Self {
        OrderBook::default()
    }

    /// Book with the given (level, count) atoms. Zero counts are dropped.
    pub fn from_atoms<I: IntoIterator<Item = (i64, u64)>>(atoms: I) -> Result<Self, MeasureError> {
        let mut book = OrderBook::new();
        for (level, count) in atoms {
            if level < 0 {
                return Err(MeasureError::Parse(format!("negative level {level}")));
            }
            if count == 0 {
                continue;
            }
            *book.counts.entry(level).or_insert(0) += count;
            book.mass += count;
            book.price = book.price.max(level);
        }
        Ok(book)
    }

    /// Highest occupied level; 0 for the empty book.
    #[inline]
    pub fn price(&self) -> i64 {
        self.price
    }

    /// Total number of orders.
    #[inline]
    pub fn mass(&self) -> u64 {
        self.mass
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.mass == 0
    }

    /// Multiplicity at one level.
    #[inline]
    pub fn at(&self, level: i64) -> u64 {
        self.counts.get(&level).copied().unwrap_or(0)
    }

    /// Number of occupied levels.
    #[inline]
    pub fn support_len(&self) -> usize {
        self.counts.len()
    }

    /// Occupied levels with multiplicities, ascending.
    pub fn atoms(&self) -> impl Iterator<Item = (i64, u64)> + '_ {
        self.counts.iter().map(|(&l, &c)| (l, c))
    }

    /// Number of orders at levels in `[0, level]`.
    pub fn mass_upto(&self, level: i64) -> u64 {
        self.counts.range(..=level).map(|(_, &c)| c).sum()
    }

    /// Number of orders at levels in `[level, infinity)`.
    pub fn mass_from(&self, level: i64) -> u64 {
        self.counts.range(level..).map(|(_, &c)| c).sum()
    }

    /// Add one order at `max(price + jump, 0)`; returns the level it landed on.
    pub fn add_order(&mut self, jump: i64) -> i64 {
        let level = (self.price + jump).max(0);
        *self.counts.entry(level).or_insert(0) += 1;
        self.mass += 1;
        if level > self.price {
            self.price = level;
        }
        level
    }

    /// Remove one order at the price; returns the level it was removed from.
    ///
    /// The new price is the next occupied level below (0 if the book empties).
    pub fn remove_at_price(&mut self) -> Result<i64, MeasureError> {
        if self.mass == 0 {
            return Err(MeasureError::EmptyBook);
        }
        let removed = self.price;
        let c = self
            .counts
            .get_mut(&removed)
            .expect("price level must be occupied");
        *c -= 1;
        if *c == 0 {
            self.counts.remove(&removed);
            self.price = self.counts.keys().next_back().copied().unwrap_or(0);
        }
        self.mass -= 1;
        Ok(removed)
    }

    /// Add one order at an exact level (level must be nonnegative).
    pub fn add_at(&mut self, level: i64) {
        assert!(level >= 0, "levels are nonnegative");
        *self.counts.entry(level).or_insert(0) += 1;
        self.mass += 1;
        if level > self.price {
            self.price = level;
        }
    }

    /// Remove one order at an exact level.
    pub fn remove_one(&mut self, level: i64) -> Result<(), MeasureError> {
        let Some(c) = self.counts.get_mut(&level) else {
            return Err(MeasureError::EmptyBook);
        };
        *c -= 1;
        if *c == 0 {
            self.counts.remove(&level);
            if level == self.price {
                self.price = self.counts.keys().next_back().copied().unwrap_or(0);
            }
        }
        self.mass -= 1;
        Ok(())
    }

    /// True when the book is empty or its support is a contiguous interval
    /// `[m, price]` with `m <= 1`.
    ///
    /// This is what the add/remove alphabet preserves from an empty start:
    /// upward displacements are at most +1, so no gap can open at the top,
    /// and the bottom can only be level 1 (an opening add with displacement
    /// +1) or level 0. In particular every level of `1..=price` is occupied,
    /// which gives `price <= mass` on any reachable nonempty book.
    #[inline]
    pub fn interval_full(&self) -> bool {
        match self.counts.first_key_value() {
            None => true,
            Some((&lo, _)) => lo <= 1 && self.counts.len() as i64 == self.price - lo + 1,
        }
    }

    /// The measure seen above level `a`: level `l >= a` contributes an atom at
    /// `l - a`; everything below `a` is dropped.
    pub fn shift_above(&self, a: i64) -> OrderBook {
        let mut out = OrderBook::new();
        for (&l, &c) in self.counts.range(a..) {
            out.counts.insert(l - a, c);
            out.mass += c;
        }
        out.price = out.counts.keys().next_back().copied().unwrap_or(0);
        out
    }

    /// Lazy diffusively rescaled view (mass and space shrunk by `n`).
    pub fn scale(&self, n: u32) -> ScaledMeasure<'_> {
        assert!(n >= 1, "scale index must be >= 1");
        ScaledMeasure { book: self, n }
    }
}

impl fmt::Display for OrderBook {
    /// `level:count` pairs, ascending, comma separated; empty book prints `-`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_empty() {
            return write!(f, "-");
        }
        let mut first = true;
        for (l, c) in self.atoms() {
            if !first {
                write!(f, ",")?;
            }
            write!(f, "{l}:{c}")?;
            first = false;
        }
        Ok(())
    }
}

impl FromStr for OrderBook {
    type Err = MeasureError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if s.is_empty() || s == "-" {
            return Ok(OrderBook::new());
        }
        let mut atoms = Vec::new();
        for part in s.split(',') {
            let (l, c) = part
                .split_once(':')
                .ok_or_else(|| MeasureError::Parse(format!("expected level:count, got {part:?}")))?;
            let level: i64 = l
                .trim()
                .parse()
                .map_err(|e| MeasureError::Parse(format!("level {l:?}: {e}")))?;
            let count: u64 = c
                .trim()
                .parse()
                .map_err(|e| MeasureError::Parse(format!("count {c:?}: {e}")))?;
            atoms.push((level, count));
        }
        OrderBook::from_atoms(atoms)
    }
}

/// View of a book under diffusive rescaling: an order at level `l` becomes
/// mass `1/n` at position `l/n`. Nothing is copied; evaluations walk the
/// underlying map.
#[derive(Debug, Clone, Copy)]
pub struct ScaledMeasure<'a> {
    book: &'a OrderBook,
    n: u32,
}

/// Tolerance used to snap `n * y` to the integer grid, so that e.g.
/// `0.1 * 200` evaluates at level 20 despite f64 rounding.
const GRID_EPS: f64 = 1e-9;

impl<'a> ScaledMeasure<'a> {
    #[inline]
    pub fn n(&self) -> u32 {
        self.n
    }

    /// Rescaled price.
    pub fn price(&self) -> f64 {
        self.book.price() as f64 / self.n as f64
    }

    /// Rescaled total mass.
    pub fn mass(&self) -> f64 {
        self.book.mass() as f64 / self.n as f64
    }

    /// Mass of `[y, infinity)` under the rescaled measure.
    pub fn mass_from(&self, y: f64) -> f64 {
        let level = (self.n as f64 * y - GRID_EPS).ceil() as i64;
        self.book.mass_from(level) as f64 / self.n as f64
    }

    /// Mass of `[0, y]` under the rescaled measure.
    pub fn mass_upto(&self, y: f64) -> f64 {
        let level = (self.n as f64 * y + GRID_EPS).floor() as i64;
        self.book.mass_upto(level) as f64 / self.n as f64
    }
}

/// Distribution of the displacement of a newly added order relative to the
/// price. Integer support `{-j*, ..., 0, 1}` with `P(J = 1) > 0` and
/// `E(J) > 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct JumpDistribution {
    jumps: Vec<i64>,
    probs: Vec<f64>,
    /// Cumulative thresholds scaled to u64 for exact integer sampling.
    thresholds: Vec<u64>,
    mean: f64,
    p_one: f64,
}

/// Probabilities must sum to 1 within this tolerance.
pub const PMF_SUM_TOL: f64 = 1e-12;

impl JumpDistribution {
    /// Build from (jump, probability) pairs (any order, zero entries dropped).
    pub fn new(pairs: &[(i64, f64)]) -> Result<Self, MeasureError> {
        let bad = |m: String| MeasureError::BadJumpDistribution(m);
        let mut entries: Vec<(i64, f64)> = Vec::new();
        for &(j, p) in pairs {
            if !(p.is_finite() && p >= 0.0) {
                return Err(bad(format!("probability of jump {j} is {p}")));
            }
            if p == 0.0 {
                continue;
            }
            if j > 1 {
                return Err(bad(format!("jump {j} > 1 not allowed")));
            }
            if entries.iter().any(|&(k, _)| k == j) {
                return Err(bad(format!("duplicate jump {j}")));
            }
            entries.push((j, p));
        }
        entries.sort_by_key(|&(j, _)| j);
        let total: f64 = entries.iter().map(|&(_, p)| p).sum();
        if (total - 1.0).abs() > PMF_SUM_TOL {
            return Err(bad(format!("probabilities sum to {total}, not 1")));
        }
        let p_one = entries
            .iter()
            .find(|&&(j, _)| j == 1)
            .map(|&(_, p)| p)
            .unwrap_or(0.0);
        if p_one <= 0.0 {
            return Err(bad("P(J = 1) must be positive".into()));
        }
        let mean: f64 = entries.iter().map(|&(j, p)| j as f64 * p).sum();
        if mean <= 0.0 {
            return Err(bad(format!("E(J) = {mean} must be positive")));
        }
        let mut thresholds = Vec::with_capacity(entries.len());
        let mut acc = 0.0f64;
        for &(_, p) in &entries {
            acc += p;
            let t = (acc.min(1.0) * (u64::MAX as f64)) as u64;
            thresholds.push(t);
        }
        *thresholds.last_mut().unwrap() = u64::MAX;
        Ok(JumpDistribution {
            jumps: entries.iter().map(|&(j, _)| j).collect(),
            probs: entries.iter().map(|&(_, p)| p).collect(),
            thresholds,
            mean,
            p_one,
        })
    }

    /// The reference two-point distribution P(J=-1)=0.3, P(J=1)=0.7.
    pub fn reference() -> Self {
        JumpDistribution::new(&[(-1, 0.3), (1, 0.7)]).unwrap()
    }

    #[inline]
    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// P(J = 1).
    #[inline]
    pub fn p_one(&self) -> f64 {
        self.p_one
    }

    /// P(J <= 0).
    #[inline]
    pub fn p_nonpositive(&self) -> f64 {
        1.0 - self.p_one
    }

    /// Largest magnitude of a downward jump (`j*`).
    pub fn max_down(&self) -> i64 {
        -self.jumps[0].min(0)
    }

    pub fn support(&self) -> &[i64] {
        &self.jumps
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// E(exp(-2 kappa J)); used for exponential truncation bounds.
    pub fn mgf_neg2(&self, kappa: f64) -> f64 {
        self.jumps
            .iter()
            .zip(&self.probs)
            .map(|(&j, &p)| p * (-2.0 * kappa * j as f64).exp())
            .sum()
    }

    /// Sample from one uniform 64-bit word (exact integer thresholds).
    #[inline]
    pub fn sample_u64(&self, u: u64) -> i64 {
        for (i, &t) in self.thresholds.iter().enumerate() {
            if u <= t {
                return self.jumps[i];
            }
        }
        *self.jumps.last().unwrap()
    }

    /// Sample using an RNG.
    #[inline]
    pub fn sample<R: rand::RngCore>(&self, rng: &mut R) -> i64 {
        self.sample_u64(rng.next_u64())
    }
}

impl fmt::Display for JumpDistribution {
    /// `jump:probability` pairs, ascending, comma separated.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut first = true;
        for (j, p) in self.jumps.iter().zip(&self.probs) {
            if !first {
                write!(f, ",")?;
            }
            write!(f, "{j}:{p}")?;
            first = false;
        }
        Ok(())
    }
}

impl FromStr for JumpDistribution {
    type Err = MeasureError;

    /// Parse `-1:0.3,1:0.7`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut pairs = Vec::new();
        for part in s.split(',') {
            let (j, p) = part.split_once(':').ok_or_else(|| {
                MeasureError::BadJumpDistribution(format!("expected jump:prob, got {part:?}"))
            })?;
            let jump: i64 = j.trim().parse().map_err(|e| {
                MeasureError::BadJumpDistribution(format!("jump {j:?}: {e}"))
            })?;
            let prob: f64 = p.trim().parse().map_err(|e| {
                MeasureError::BadJumpDistribution(format!("probability {p:?}: {e}"))
            })?;
            pairs.push((jump, prob));
        }
        JumpDistribution::new(&pairs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_book_conventions() {
        let mut z = OrderBook::new();
        assert_eq!(z.price(), 0);
        assert_eq!(z.mass(), 0);
        assert!(z.interval_full());
        assert_eq!(z.remove_at_price(), Err(MeasureError::EmptyBook));
    }

    #[test]
    fn add_clamps_at_zero() {
        let mut book = OrderBook::new();
        assert_eq!(book.add_order(-3), 0);
        assert_eq!(book.price(), 0);
        assert_eq!(book.add_order(1), 1);
        assert_eq!(book.price(), 1);
        assert_eq!(book.add_order(-5), 0);
        assert_eq!(book.at(0), 2);
        assert_eq!(book.mass(), 3);
        assert!(book.interval_full());
    }

    #[test]
    fn remove_steps_price_down() {
        let mut book = OrderBook::from_atoms([(0, 2), (1, 1), (2, 1)]).unwrap();
        assert_eq!(book.remove_at_price().unwrap(), 2);
        assert_eq!(book.price(), 1);
        assert_eq!(book.remove_at_price().unwrap(), 1);
        assert_eq!(book.price(), 0);
        assert_eq!(book.remove_at_price().unwrap(), 0);
        assert_eq!(book.remove_at_price().unwrap(), 0);
        assert!(book.is_empty());
        assert_eq!(book.price(), 0);
    }

    #[test]
    fn display_round_trip() {
        let book = OrderBook::from_atoms([(0, 2), (3, 1)]).unwrap();
        assert_eq!(book.to_string(), "0:2,3:1");
        assert_eq!("0:2,3:1".parse::<OrderBook>().unwrap(), book);
        assert_eq!("-".parse::<OrderBook>().unwrap(), OrderBook::new());
    }

    #[test]
    fn shift_above_drops_below_and_recenters() {
        let book = OrderBook::from_atoms([(0, 2), (2, 1), (5, 3)]).unwrap();
        let shifted = book.shift_above(2);
        assert_eq!(shifted, OrderBook::from_atoms([(0, 1), (3, 3)]).unwrap());
        assert_eq!(shifted.price(), 3);
    }

    #[test]
    fn scaled_views_evaluate_on_the_grid() {
        let book = OrderBook::from_atoms([(0, 1), (10, 2), (20, 1)]).unwrap();
        let nu = book.scale(100);
        assert_eq!(nu.price(), 0.2);
        assert_eq!(nu.mass(), 0.04);
        assert_eq!(nu.mass_from(0.1), 0.03);
        // 0.1 * 200 must hit level 20 exactly despite f64 rounding.
        let fine = book.scale(200);
        assert_eq!(fine.mass_upto(0.1), 4.0 / 200.0);
        assert_eq!(fine.mass_from(0.05), 3.0 / 200.0);
    }

    #[test]
    fn jump_distribution_validation() {
        assert!(JumpDistribution::new(&[(0, 1.0)]).is_err()); // no +1 jump
        assert!(JumpDistribution::new(&[(1, 0.5), (-1, 0.5)]).is_err()); // E(J)=0
        assert!(JumpDistribution::new(&[(2, 1.0)]).is_err()); // jump > 1
        assert!(JumpDistribution::new(&[(1, 0.7), (-1, 0.300001)]).is_err()); // sum != 1
        let j = JumpDistribution::reference();
        assert!((j.mean() - 0.4).abs() < 1e-15);
        assert!((j.p_one() - 0.7).abs() < 1e-15);
        assert_eq!(j.max_down(), 1);
    }

    #[test]
    fn jump_parse_round_trip() {
        let j: JumpDistribution = "-2:0.1,0:0.2,1:0.7".parse().unwrap();
        assert_eq!(j.support(), &[-2, 0, 1]);
        assert!((j.mean() - 0.5).abs() < 1e-12);
        assert_eq!(j.to_string(), "-2:0.1,0:0.2,1:0.7");
    }

    #[test]
    fn jump_sampling_hits_thresholds() {
        let j = JumpDistribution::reference();
        assert_eq!(j.sample_u64(0), -1);
        assert_eq!(j.sample_u64(u64::MAX), 1);
        // Threshold at 0.3: just below maps to -1, just above maps to 1.
        let t = (0.3f64 * u64::MAX as f64) as u64;
        assert_eq!(j.sample_u64(t - 1000), -1);
        assert_eq!(j.sample_u64(t.saturating_add(1000)), 1);
    }
}
