//! Event-driven simulation of the order-book chain.
//!
//! Dynamics: at rate lambda an order arrives at `max(price + J, 0)`; at rate
//! lambda, while the book is nonempty, the order at the price is removed.
//! The embedded construction samples one exponential holding time per jump:
//! Exp(2 lambda) plus a fair add/remove coin when nonempty, Exp(lambda) and a
//! forced add when empty.
//!
//! Occupation accumulators (time at price 0, time empty, time at or below
//! registered levels) integrate exact holding times; nothing is discretized
//! on a grid. The rescaled observables at index `n` read the path at time
//! `n^2 t` and divide space, mass, and the accumulators by `n`.

use rand::Rng;
use rand_distr::{Distribution, Exp};
use thiserror::Error;

use crate::measures::{JumpDistribution, OrderBook};

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("lambda must be positive and finite, got {0}")]
    BadLambda(f64),
    #[error("path horizon {horizon} too short for requested time {requested}")]
    HorizonTooShort { horizon: f64, requested: f64 },
    #[error("price never at 0 on this path")]
    EmptyZeroSet,
}

/// Model parameters: event rate and jump distribution.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub lambda: f64,
    pub jumps: JumpDistribution,
}

impl ModelParams {
    pub fn new(lambda: f64, jumps: JumpDistribution) -> Result<Self, SimError> {
        if !(lambda.is_finite() && lambda > 0.0) {
            return Err(SimError::BadLambda(lambda));
        }
        Ok(ModelParams { lambda, jumps })
    }

    /// lambda = 1 with the reference two-point jump distribution.
    pub fn reference() -> Self {
        ModelParams { lambda: 1.0, jumps: JumpDistribution::reference() }
    }

    /// Diffusive scale of the mass process: alpha = sqrt(2 lambda).
    pub fn alpha(&self) -> f64 {
        (2.0 * self.lambda).sqrt()
    }

    /// Upper exponential rate for excursion durations: (1 - ln 2) lambda.
    pub fn mu_upper(&self) -> f64 {
        (1.0 - std::f64::consts::LN_2) * self.lambda
    }

    /// Lower exponential rate for excursion durations: (2 ln 2 - 1) lambda.
    pub fn mu_lower(&self) -> f64 {
        (2.0 * std::f64::consts::LN_2 - 1.0) * self.lambda
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventKind {
    Add { level: i64 },
    Remove { level: i64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Event {
    pub time: f64,
    pub kind: EventKind,
    pub price_after: i64,
    pub mass_after: u64,
}

/// Stepwise simulator with exact occupation accounting.
pub struct Simulator<R: Rng> {
    params: ModelParams,
    rng: R,
    book: OrderBook,
    time: f64,
    ell: f64,
    time_mass_zero: f64,
    occ_levels: Vec<i64>,
    occ: Vec<f64>,
    exp_full: Exp<f64>,
    exp_empty: Exp<f64>,
    /// Remainder of a holding time cut by an advance_to boundary. Kept so a
    /// run with intermediate marks replays the same event sequence as one
    /// without; valid because the rate cannot change without an event.
    pending: Option<f64>,
}

impl<R: Rng> Simulator<R> {
    /// `occ_levels`: thresholds for which time with price <= level is
    /// accumulated (used by the epsilon-occupation functionals).
    pub fn new(params: &ModelParams, initial: OrderBook, occ_levels: &[i64], rng: R) -> Self {
        Simulator {
            exp_full: Exp::new(2.0 * params.lambda).expect("validated rate"),
            exp_empty: Exp::new(params.lambda).expect("validated rate"),
            params: params.clone(),
            rng,
            book: initial,
            time: 0.0,
            ell: 0.0,
            time_mass_zero: 0.0,
            occ_levels: occ_levels.to_vec(),
            occ: vec![0.0; occ_levels.len()],
            pending: None,
        }
    }

    #[inline]
    pub fn book(&self) -> &OrderBook {
        &self.book
    }

    #[inline]
    pub fn time(&self) -> f64 {
        self.time
    }

    /// Time with price = 0 so far.
    #[inline]
    pub fn ell(&self) -> f64 {
        self.ell
    }

    /// Time with mass = 0 so far.
    #[inline]
    pub fn time_mass_zero(&self) -> f64 {
        self.time_mass_zero
    }

    /// Accumulated time with price <= the registered level.
    pub fn occ_le(&self, level: i64) -> f64 {
        let i = self
            .occ_levels
            .iter()
            .position(|&l| l == level)
            .expect("level must be registered at construction");
        self.occ[i]
    }

    /// Replace the book (used by collectors that restart after a cap). Any
    /// partially elapsed holding time is dropped since the rate may change.
    pub fn reset_book(&mut self, book: OrderBook) {
        self.book = book;
        self.pending = None;
    }

    #[inline]
    fn accrue(&mut self, dt: f64) {
        if self.book.price() == 0 {
            self.ell += dt;
        }
        if self.book.is_empty() {
            self.time_mass_zero += dt;
        }
        let p = self.book.price();
        for (i, &l) in self.occ_levels.iter().enumerate() {
            if p <= l {
                self.occ[i] += dt;
            }
        }
    }

    #[inline]
    fn apply_next(&mut self) -> Event {
        let kind = if self.book.is_empty() || self.rng.gen_bool(0.5) {
            let j = self.params.jumps.sample(&mut self.rng);
            EventKind::Add { level: self.book.add_order(j) }
        } else {
            let level = self.book.remove_at_price().expect("nonempty book");
            EventKind::Remove { level }
        };
        debug_assert!(
            self.book.interval_full(),
            "support must stay a contiguous interval reaching level 0 or 1"
        );
        debug_assert!(self.book.price() <= self.book.mass() as i64);
        debug_assert!(self.time_mass_zero <= self.ell + 1e-9);
        Event {
            time: self.time,
            kind,
            price_after: self.book.price(),
            mass_after: self.book.mass(),
        }
    }

    /// Advance by one jump unconditionally.
    pub fn step(&mut self) -> Event {
        let dt = self.holding();
        self.accrue(dt);
        self.time += dt;
        self.apply_next()
    }

    /// Advance by one jump if it lands at or before `t`; otherwise move the
    /// clock to `t` (accruing occupation) and bank the remaining holding
    /// time, so the jump sequence matches a run without the stop.
    pub fn step_before(&mut self, t: f64) -> Option<Event> {
        let dt = self.holding();
        if self.time + dt > t {
            self.pending = Some(self.time + dt - t);
            self.accrue(t - self.time);
            self.time = t;
            return None;
        }
        self.accrue(dt);
        self.time += dt;
        Some(self.apply_next())
    }

    /// Run the clock to exactly `t`.
    pub fn advance_to(&mut self, t: f64) {
        while self.step_before(t).is_some() {}
    }

    #[inline]
    fn holding(&mut self) -> f64 {
        if let Some(r) = self.pending.take() {
            return r;
        }
        if self.book.is_empty() {
            self.exp_empty.sample(&mut self.rng)
        } else {
            self.exp_full.sample(&mut self.rng)
        }
    }
}

/// A simulated trajectory with its event log and exact accumulators.
#[derive(Debug, Clone)]
pub struct PathRecord {
    pub initial: OrderBook,
    pub final_book: OrderBook,
    pub events: Vec<Event>,
    /// Time with price = 0 over [0, horizon].
    pub ell: f64,
    /// Time with mass = 0 over [0, horizon].
    pub time_mass_zero: f64,
    pub horizon: f64,
}

/// Simulate the chain from `initial` over `[0, horizon]`, keeping the full
/// event log.
pub fn simulate<R: Rng>(
    params: &ModelParams,
    initial: OrderBook,
    horizon: f64,
    rng: R,
) -> PathRecord {
    let mut sim = Simulator::new(params, initial.clone(), &[], rng);
    let mut events = Vec::new();
    while let Some(ev) = sim.step_before(horizon) {
        events.push(ev);
    }
    PathRecord {
        initial,
        final_book: sim.book().clone(),
        events,
        ell: sim.ell(),
        time_mass_zero: sim.time_mass_zero(),
        horizon,
    }
}

/// Observables of a path read at one time point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathObs {
    pub price: i64,
    pub mass: u64,
    pub ell: f64,
    pub time_mass_zero: f64,
}

/// Rescaled observables at index n and rescaled time t.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RescaledObs {
    pub price: f64,
    pub mass: f64,
    /// Local time of the rescaled price at 0: ell(n^2 t) / n.
    pub l_price: f64,
    /// Local time of the rescaled mass at 0: time_mass_zero(n^2 t) / n.
    pub l_mass: f64,
    /// Raw time at price 0 up to n^2 t.
    pub ell: f64,
}

impl PathRecord {
    /// Price at time `s` (right-continuous).
    pub fn price_at(&self, s: f64) -> i64 {
        let i = self.events.partition_point(|e| e.time <= s);
        if i == 0 {
            self.initial.price()
        } else {
            self.events[i - 1].price_after
        }
    }

    /// Mass at time `s` (right-continuous).
    pub fn mass_at(&self, s: f64) -> u64 {
        let i = self.events.partition_point(|e| e.time <= s);
        if i == 0 {
            self.initial.mass()
        } else {
            self.events[i - 1].mass_after
        }
    }

    /// Replay events up to time `s` and return the book.
    pub fn book_at(&self, s: f64) -> OrderBook {
        let mut book = self.initial.clone();
        for e in &self.events {
            if e.time > s {
                break;
            }
            match e.kind {
                EventKind::Add { level } => book.add_at(level),
                EventKind::Remove { level } => {
                    book.remove_one(level).expect("replay must stay consistent")
                }
            }
        }
        book
    }

    /// Price, mass, and occupation accumulators at time `s <= horizon`.
    pub fn observables_at(&self, s: f64) -> Result<PathObs, SimError> {
        if s > self.horizon + 1e-12 {
            return Err(SimError::HorizonTooShort { horizon: self.horizon, requested: s });
        }
        let mut price = self.initial.price();
        let mut mass = self.initial.mass();
        let mut t = 0.0;
        let mut ell = 0.0;
        let mut tmz = 0.0;
        for e in &self.events {
            let seg = e.time.min(s) - t;
            if price == 0 {
                ell += seg;
            }
            if mass == 0 {
                tmz += seg;
            }
            if e.time > s {
                return Ok(PathObs { price, mass, ell, time_mass_zero: tmz });
            }
            t = e.time;
            price = e.price_after;
            mass = e.mass_after;
        }
        let seg = s - t;
        if price == 0 {
            ell += seg;
        }
        if mass == 0 {
            tmz += seg;
        }
        Ok(PathObs { price, mass, ell, time_mass_zero: tmz })
    }

    /// Exact time in [0, s] with price <= level.
    pub fn occupation_le(&self, s: f64, level: i64) -> f64 {
        let mut price = self.initial.price();
        let mut t = 0.0;
        let mut acc = 0.0;
        for e in &self.events {
            let seg = e.time.min(s) - t;
            if price <= level {
                acc += seg;
            }
            if e.time > s {
                return acc;
            }
            t = e.time;
            price = e.price_after;
        }
        if price <= level {
            acc += s - t;
        }
        acc
    }

    /// Check that replaying the events from the initial book reproduces every
    /// cached (price_after, mass_after) pair and the final book.
    pub fn verify_replay(&self) -> bool {
        let mut book = self.initial.clone();
        let mut last = 0.0;
        for e in &self.events {
            if e.time <= last {
                return false; // times must be strictly increasing
            }
            last = e.time;
            match e.kind {
                EventKind::Add { level } => book.add_at(level),
                EventKind::Remove { level } => {
                    if book.remove_one(level).is_err() {
                        return false;
                    }
                }
            }
            if book.price() != e.price_after || book.mass() != e.mass_after {
                return false;
            }
            if !book.interval_full() || book.price() > book.mass() as i64 {
                return false;
            }
        }
        book == self.final_book
    }
}

/// Rescaled observables: price/n and mass/n at time n^2 t, with the local
/// times ell(n^2 t)/n and time_mass_zero(n^2 t)/n.
pub fn rescaled_observables(path: &PathRecord, n: u32, t: f64) -> Result<RescaledObs, SimError> {
    let s = (n as f64) * (n as f64) * t;
    let obs = path.observables_at(s)?;
    let nf = n as f64;
    Ok(RescaledObs {
        price: obs.price as f64 / nf,
        mass: obs.mass as f64 / nf,
        l_price: obs.ell / nf,
        l_mass: obs.time_mass_zero / nf,
        ell: obs.ell,
    })
}

/// (1/eps) times the rescaled time in [0, t] with scaled price <= eps:
/// (1/(eps n^2)) Leb{s <= n^2 t : price(s) <= floor(eps n)}.
pub fn epsilon_occupation(path: &PathRecord, n: u32, t: f64, eps: f64) -> f64 {
    let nf = n as f64;
    let level = (eps * nf + 1e-9).floor() as i64;
    let raw = path.occupation_le(nf * nf * t, level);
    raw / (eps * nf * nf)
}

// ---------------------------------------------------------------------------
// Excursions
// ---------------------------------------------------------------------------

/// One excursion of the price strictly above level `a`.
#[derive(Debug, Clone)]
pub struct ExcursionRecord {
    pub a: i64,
    /// Time of the jump that took the price above `a`.
    pub g: f64,
    /// Time of the jump that brought it back to `a` or below.
    pub d: f64,
    /// Number of jumps in the closed window [g, d].
    pub jump_count: u64,
    /// Max price during the excursion, minus `a`.
    pub height: i64,
    /// Orders added at levels <= a during [g, d].
    pub deposited_below: u64,
    /// False when the excursion was still open at the horizon.
    pub complete: bool,
    /// Book after every jump of [g, d], when requested.
    pub embedded: Option<Vec<(f64, OrderBook)>>,
}

/// Maximal intervals with price > a, in path order. During each excursion the
/// book below level `a - max_down + 1` is frozen; this is asserted while
/// replaying. The final record is flagged incomplete when still open at the
/// horizon.
pub fn extract_excursions(
    path: &PathRecord,
    a: i64,
    jumps: &JumpDistribution,
    with_embedded: bool,
) -> Vec<ExcursionRecord> {
    let mut out = Vec::new();
    let mut book = path.initial.clone();
    let frozen_below = a - jumps.max_down() + 1; // levels < frozen_below never change
    let mut cur: Option<ExcursionRecord> = None;
    let mut frozen_mass = 0u64;
    for e in &path.events {
        match e.kind {
            EventKind::Add { level } => book.add_at(level),
            EventKind::Remove { level } => {
                book.remove_one(level).expect("replay must stay consistent")
            }
        }
        match cur.as_mut() {
            None => {
                if e.price_after > a {
                    debug_assert!(matches!(e.kind, EventKind::Add { .. }));
                    let embedded = with_embedded.then(|| vec![(e.time, book.clone())]);
                    frozen_mass = if frozen_below > 0 { book.mass_upto(frozen_below - 1) } else { 0 };
                    cur = Some(ExcursionRecord {
                        a,
                        g: e.time,
                        d: e.time,
                        jump_count: 1,
                        height: e.price_after - a,
                        deposited_below: 0,
                        complete: false,
                        embedded,
                    });
                }
            }
            Some(exc) => {
                exc.jump_count += 1;
                exc.height = exc.height.max(e.price_after - a);
                if let EventKind::Add { level } = e.kind {
                    if level <= a {
                        exc.deposited_below += 1;
                    }
                }
                if let Some(path_books) = exc.embedded.as_mut() {
                    path_books.push((e.time, book.clone()));
                }
                if frozen_below > 0 {
                    debug_assert_eq!(
                        book.mass_upto(frozen_below - 1),
                        frozen_mass,
                        "book strictly below level {frozen_below} must be frozen during the excursion"
                    );
                }
                if e.price_after <= a {
                    exc.d = e.time;
                    exc.complete = true;
                    out.push(cur.take().unwrap());
                }
            }
        }
    }
    if let Some(mut exc) = cur.take() {
        exc.d = path.horizon;
        exc.complete = false;
        out.push(exc);
    }
    out
}

/// Summary of one completed excursion (streaming collection).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExcursionSummary {
    pub jump_count: u64,
    pub height: i64,
    pub deposited_below: u64,
    pub duration: f64,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct CollectReport {
    pub collected: u64,
    /// Excursions discarded because they exceeded the jump cap; the book is
    /// reset to empty after each, so kept excursions are i.i.d. draws from
    /// the law conditioned on jump_count <= cap.
    pub aborted_over_cap: u64,
    pub sim_time: f64,
}

/// Collect `target` completed excursions above `a`, starting from the empty
/// book, without storing events. Excursions whose jump count exceeds
/// `jump_cap` are aborted and the book reset.
pub fn collect_excursion_summaries<R: Rng>(
    params: &ModelParams,
    a: i64,
    target: usize,
    jump_cap: u64,
    rng: R,
) -> (Vec<ExcursionSummary>, CollectReport) {
    let mut sim = Simulator::new(params, OrderBook::new(), &[], rng);
    let mut out = Vec::with_capacity(target);
    let mut report = CollectReport::default();
    let mut cur: Option<(f64, u64, i64, u64)> = None; // (g, jumps, max_price, deposits)
    while out.len() < target {
        let ev = sim.step();
        match cur.as_mut() {
            None => {
                if ev.price_after > a {
                    cur = Some((ev.time, 1, ev.price_after, 0));
                }
            }
            Some((g, jumps, max_price, deposits)) => {
                *jumps += 1;
                *max_price = (*max_price).max(ev.price_after);
                if let EventKind::Add { level } = ev.kind {
                    if level <= a {
                        *deposits += 1;
                    }
                }
                if ev.price_after <= a {
                    out.push(ExcursionSummary {
                        jump_count: *jumps,
                        height: *max_price - a,
                        deposited_below: *deposits,
                        duration: ev.time - *g,
                    });
                    report.collected += 1;
                    cur = None;
                } else if *jumps > jump_cap {
                    report.aborted_over_cap += 1;
                    sim.reset_book(OrderBook::new());
                    cur = None;
                }
            }
        }
    }
    report.sim_time = sim.time();
    (out, report)
}

// ---------------------------------------------------------------------------
// Queue at the bottom, shift/stop, hitting times
// ---------------------------------------------------------------------------

/// The mass process watched only while the price is at 0, on the clock of
/// the accumulated price-zero time.
#[derive(Debug, Clone)]
pub struct QueueView {
    /// time_mass_zero / ell.
    pub idle_fraction: f64,
    /// Piecewise-constant (zero-clock time, mass) samples, one per change.
    pub path: Vec<(f64, u64)>,
}

/// Time-change the mass by the inverse of the price-zero clock.
pub fn queue_q(path: &PathRecord) -> Result<QueueView, SimError> {
    if path.ell <= 0.0 {
        return Err(SimError::EmptyZeroSet);
    }
    let mut q_path = Vec::new();
    let mut clock = 0.0;
    let mut t = 0.0;
    let mut price = path.initial.price();
    let mut mass = path.initial.mass();
    if price == 0 {
        q_path.push((0.0, mass));
    }
    for e in &path.events {
        if price == 0 {
            clock += e.time - t;
        }
        t = e.time;
        let was_zero = price == 0;
        price = e.price_after;
        mass = e.mass_after;
        if price == 0 {
            if !was_zero || q_path.is_empty() {
                q_path.push((clock, mass));
            } else if q_path.last().map(|&(_, m)| m) != Some(mass) {
                q_path.push((clock, mass));
            }
        }
    }
    Ok(QueueView { idle_fraction: path.time_mass_zero / path.ell, path: q_path })
}

/// The path restarted at `t`: initial book = state at `t`, later events
/// shifted to start at 0.
pub fn path_shift(path: &PathRecord, t: f64) -> PathRecord {
    let initial = path.book_at(t);
    let events: Vec<Event> = path
        .events
        .iter()
        .filter(|e| e.time > t)
        .map(|e| Event { time: e.time - t, ..*e })
        .collect();
    let full = path.observables_at(path.horizon).expect("horizon is in range");
    let at_t = path.observables_at(t).expect("t must be within the horizon");
    PathRecord {
        initial,
        final_book: path.final_book.clone(),
        events,
        ell: full.ell - at_t.ell,
        time_mass_zero: full.time_mass_zero - at_t.time_mass_zero,
        horizon: path.horizon - t,
    }
}

/// The path frozen after `t`: events beyond `t` dropped, the state at `t`
/// held constant up to the original horizon (accumulators include the frozen
/// stretch).
pub fn path_stop(path: &PathRecord, t: f64) -> PathRecord {
    let events: Vec<Event> = path.events.iter().filter(|e| e.time <= t).copied().collect();
    let final_book = path.book_at(t);
    let at_t = path.observables_at(t).expect("t must be within the horizon");
    let tail = path.horizon - t;
    PathRecord {
        initial: path.initial.clone(),
        ell: at_t.ell + if final_book.price() == 0 { tail } else { 0.0 },
        time_mass_zero: at_t.time_mass_zero + if final_book.is_empty() { tail } else { 0.0 },
        final_book,
        events,
        horizon: path.horizon,
    }
}

/// First time >= t with price 0 (right-continuous scan).
pub fn first_zero_at_or_after(path: &PathRecord, t: f64) -> Option<f64> {
    if path.price_at(t) == 0 {
        return Some(t);
    }
    path.events
        .iter()
        .find(|e| e.time > t && e.price_after == 0)
        .map(|e| e.time)
}

/// Last time <= t at which the price-zero set ends or t itself if inside it:
/// sup{s <= t : price(s) = 0}, with the convention that the supremum over a
/// right-open zero stretch is the jump time that left 0.
pub fn last_zero_at_or_before(path: &PathRecord, t: f64) -> Option<f64> {
    if path.price_at(t) == 0 {
        return Some(t);
    }
    let mut prev_price = path.initial.price();
    let mut best = if prev_price == 0 { Some(0.0) } else { None };
    for e in &path.events {
        if e.time > t {
            break;
        }
        if prev_price == 0 && e.price_after != 0 {
            best = Some(e.time); // stretch [start, e.time) ended here
        }
        if e.price_after == 0 {
            best = Some(e.time);
        }
        prev_price = e.price_after;
    }
    best
}

/// First time the price reaches level b or above.
pub fn first_hit_at_or_above(path: &PathRecord, b: i64) -> Option<f64> {
    if path.initial.price() >= b {
        return Some(0.0);
    }
    path.events.iter().find(|e| e.price_after >= b).map(|e| e.time)
}

/// First time >= t with price <= level.
pub fn first_le_at_or_after(path: &PathRecord, t: f64, level: i64) -> Option<f64> {
    if path.price_at(t) <= level {
        return Some(t);
    }
    path.events
        .iter()
        .find(|e| e.time > t && e.price_after <= level)
        .map(|e| e.time)
}

// ---------------------------------------------------------------------------
// Thin runner for replicated experiments
// ---------------------------------------------------------------------------

/// Snapshot of all accumulators at one mark time.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkSample {
    pub time: f64,
    pub price: i64,
    pub mass: u64,
    pub ell: f64,
    pub time_mass_zero: f64,
    /// Time with price <= level, by registered occupation level.
    pub occ_le: Vec<f64>,
    /// Orders at levels <= level right now, by registered count level.
    pub count_le: Vec<u64>,
}

/// Run to each mark time (ascending) and snapshot; no event log is kept.
pub fn run_marks<R: Rng>(
    params: &ModelParams,
    initial: OrderBook,
    mark_times: &[f64],
    occ_levels: &[i64],
    count_levels: &[i64],
    rng: R,
) -> Vec<MarkSample> {
    let mut sim = Simulator::new(params, initial, occ_levels, rng);
    let mut out = Vec::with_capacity(mark_times.len());
    for &t in mark_times {
        assert!(t >= sim.time(), "mark times must be ascending");
        sim.advance_to(t);
        out.push(MarkSample {
            time: t,
            price: sim.book().price(),
            mass: sim.book().mass(),
            ell: sim.ell(),
            time_mass_zero: sim.time_mass_zero(),
            occ_le: occ_levels.iter().map(|&l| sim.occ_le(l)).collect(),
            count_le: count_levels
                .iter()
                .map(|&l| sim.book().mass_upto(l))
                .collect(),
        });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::replica_rng;

    fn reference() -> ModelParams {
        ModelParams::reference()
    }

    #[test]
    fn zero_horizon_is_empty() {
        let path = simulate(&reference(), OrderBook::new(), 0.0, replica_rng(1, 1, 0, 0));
        assert!(path.events.is_empty());
        assert_eq!(path.ell, 0.0);
        assert_eq!(path.time_mass_zero, 0.0);
        assert!(path.verify_replay());
    }

    #[test]
    fn event_rate_matches_total_jump_rate() {
        // From a tall initial book the chain is essentially never empty, so
        // events arrive at rate 2 lambda.
        let initial = OrderBook::from_atoms((0..200).map(|l| (l, 5))).unwrap();
        let horizon = 10_000.0;
        let path = simulate(&reference(), initial, horizon, replica_rng(1, 1, 1, 0));
        let rate = path.events.len() as f64 / horizon;
        assert!((rate - 2.0).abs() < 0.1, "rate {rate} should be near 2");
        assert!(path.verify_replay());
    }

    #[test]
    fn replay_and_accumulators_are_consistent() {
        let path = simulate(&reference(), OrderBook::new(), 2_000.0, replica_rng(1, 1, 2, 0));
        assert!(path.verify_replay());
        assert!(path.time_mass_zero <= path.ell + 1e-9);
        assert!(path.ell <= path.horizon);
        let end = path.observables_at(path.horizon).unwrap();
        assert!((end.ell - path.ell).abs() < 1e-9);
        assert!((end.time_mass_zero - path.time_mass_zero).abs() < 1e-9);
        assert_eq!(end.price, path.final_book.price());
        assert_eq!(end.mass, path.final_book.mass());
    }

    #[test]
    fn degenerate_up_jump_is_a_birth_death_chain() {
        // J == 1: every add lands strictly above 0, so price 0 iff empty and
        // the mass is a reflected critical birth-death chain.
        let jumps = JumpDistribution::new(&[(1, 1.0)]).unwrap();
        let params = ModelParams::new(1.0, jumps).unwrap();
        let path = simulate(&params, OrderBook::new(), 1_000.0, replica_rng(1, 1, 3, 0));
        let mut mass = 0i64;
        for e in &path.events {
            let m = e.mass_after as i64;
            assert_eq!((m - mass).abs(), 1);
            mass = m;
            assert_eq!(e.price_after == 0, e.mass_after == 0);
        }
        assert!((path.ell - path.time_mass_zero).abs() < 1e-9);
        let q = queue_q(&path).unwrap();
        assert!((q.idle_fraction - 1.0).abs() < 1e-9);
        assert!(q.path.iter().all(|&(_, m)| m == 0));
    }

    #[test]
    fn hand_built_excursion_has_closed_jump_window() {
        // 0 -> 1 -> 0: one excursion above 0 with both boundary jumps counted.
        let events = vec![
            Event { time: 0.5, kind: EventKind::Add { level: 1 }, price_after: 1, mass_after: 1 },
            Event { time: 1.25, kind: EventKind::Remove { level: 1 }, price_after: 0, mass_after: 0 },
        ];
        let path = PathRecord {
            initial: OrderBook::new(),
            final_book: OrderBook::new(),
            events,
            ell: 1.25,
            time_mass_zero: 1.25,
            horizon: 2.0,
        };
        assert!(path.verify_replay());
        let jumps = JumpDistribution::reference();
        let excs = extract_excursions(&path, 0, &jumps, true);
        assert_eq!(excs.len(), 1);
        let e = &excs[0];
        assert_eq!((e.g, e.d), (0.5, 1.25));
        assert_eq!(e.jump_count, 2);
        assert_eq!(e.height, 1);
        assert_eq!(e.deposited_below, 0);
        assert!(e.complete);
        let emb = e.embedded.as_ref().unwrap();
        assert_eq!(emb.len(), 2);
        assert_eq!(emb[0].1.to_string(), "1:1");
        assert_eq!(emb[1].1.to_string(), "-");
        // No excursion above any level at or beyond the max price.
        assert!(extract_excursions(&path, 1, &jumps, false).is_empty());
    }

    #[test]
    fn excursions_partition_the_above_a_time() {
        let params = reference();
        let path = simulate(&params, OrderBook::new(), 3_000.0, replica_rng(1, 1, 4, 0));
        for a in [0i64, 2] {
            let excs = extract_excursions(&path, a, &params.jumps, false);
            for e in &excs {
                assert!(e.g < e.d || !e.complete);
                assert!(e.height >= 1);
                // price above a strictly inside, at or below a at the edges
                assert!(path.price_at(e.g) > a);
                if e.complete {
                    assert!(path.price_at(e.d) <= a);
                    assert!(e.jump_count >= 2);
                }
            }
            // complete excursions do not overlap and are ordered
            for w in excs.windows(2) {
                assert!(w[0].d <= w[1].g);
            }
        }
    }

    #[test]
    fn streaming_collector_matches_event_extraction() {
        let params = reference();
        let (summaries, report) =
            collect_excursion_summaries(&params, 0, 200, 100_000, replica_rng(1, 1, 5, 0));
        assert_eq!(summaries.len(), 200);
        assert_eq!(report.collected, 200);
        assert_eq!(report.aborted_over_cap, 0);
        // Replay the same stream through the event-logged path and compare.
        let horizon = report.sim_time + 1.0;
        let path = simulate(&params, OrderBook::new(), horizon, replica_rng(1, 1, 5, 0));
        let excs = extract_excursions(&path, 0, &params.jumps, false);
        for (s, e) in summaries.iter().zip(excs.iter().filter(|e| e.complete)) {
            assert_eq!(s.jump_count, e.jump_count);
            assert_eq!(s.height, e.height);
            assert_eq!(s.deposited_below, e.deposited_below);
            assert!((s.duration - (e.d - e.g)).abs() < 1e-9);
        }
    }

    #[test]
    fn rescaled_observables_identity_at_n_1() {
        let params = reference();
        let path = simulate(&params, OrderBook::new(), 50.0, replica_rng(1, 1, 6, 0));
        let obs = rescaled_observables(&path, 1, 50.0).unwrap();
        assert_eq!(obs.price, path.final_book.price() as f64);
        assert_eq!(obs.mass, path.final_book.mass() as f64);
        assert!((obs.l_price - path.ell).abs() < 1e-9);
        assert!(rescaled_observables(&path, 2, 50.0).is_err());
    }

    #[test]
    fn epsilon_occupation_saturates_at_t_over_eps() {
        let params = reference();
        let path = simulate(&params, OrderBook::new(), 100.0, replica_rng(1, 1, 7, 0));
        let n = 10u32;
        let t = 1.0;
        let max_scaled =
            path.events.iter().map(|e| e.price_after).max().unwrap_or(0) as f64 / n as f64;
        let eps = max_scaled + 0.1;
        let occ = epsilon_occupation(&path, n, t, eps);
        assert!((occ - t / eps).abs() < 1e-9);
    }

    #[test]
    fn queue_view_runs_on_the_zero_clock() {
        let params = reference();
        let path = simulate(&params, OrderBook::new(), 2_000.0, replica_rng(1, 1, 8, 0));
        let q = queue_q(&path).unwrap();
        assert!(q.idle_fraction > 0.0 && q.idle_fraction < 1.0);
        // clock values nondecreasing and bounded by ell
        for w in q.path.windows(2) {
            assert!(w[0].0 <= w[1].0);
        }
        assert!(q.path.last().unwrap().0 <= path.ell + 1e-9);
    }

    #[test]
    fn shift_and_stop_conventions() {
        let params = reference();
        let path = simulate(&params, OrderBook::new(), 100.0, replica_rng(1, 1, 9, 0));
        let shifted0 = path_shift(&path, 0.0);
        assert_eq!(shifted0.events.len(), path.events.len());
        assert_eq!(shifted0.initial, path.initial);
        let t = 40.0;
        let stopped = path_stop(&path, t);
        assert!(stopped.events.iter().all(|e| e.time <= t));
        assert_eq!(stopped.final_book, path.book_at(t));
        // stop then shift at the same t: constant path at the t-state
        let frozen = path_shift(&stopped, t);
        assert!(frozen.events.is_empty());
        assert_eq!(frozen.initial, path.book_at(t));
        // first zero after t on the shifted path lines up with the original
        let shifted = path_shift(&path, t);
        if let Some(d) = first_zero_at_or_after(&path, t) {
            let ds = first_zero_at_or_after(&shifted, 0.0).unwrap();
            assert!((d - t - ds).abs() < 1e-9);
        }
    }

    #[test]
    fn hitting_time_scans() {
        let params = reference();
        let path = simulate(&params, OrderBook::new(), 500.0, replica_rng(1, 1, 10, 0));
        let b = 3;
        if let Some(tb) = first_hit_at_or_above(&path, b) {
            assert!(path.price_at(tb) >= b);
            assert!(path.price_at(tb - 1e-9) < b || tb == 0.0);
        }
        let t = 100.0;
        if let Some(d) = first_zero_at_or_after(&path, t) {
            assert!(d >= t);
            assert_eq!(path.price_at(d), 0);
        }
        if let Some(g) = last_zero_at_or_before(&path, t) {
            assert!(g <= t);
        }
        if let Some(d) = first_le_at_or_after(&path, t, 1) {
            assert!(path.price_at(d) <= 1);
        }
    }

    #[test]
    fn marks_match_full_record() {
        let params = reference();
        let marks = [25.0, 50.0, 100.0];
        let samples = run_marks(
            &params,
            OrderBook::new(),
            &marks,
            &[0, 2],
            &[1, 3],
            replica_rng(1, 1, 11, 0),
        );
        let path = simulate(&params, OrderBook::new(), 100.0, replica_rng(1, 1, 11, 0));
        for s in &samples {
            let obs = path.observables_at(s.time).unwrap();
            assert_eq!(s.price, obs.price);
            assert_eq!(s.mass, obs.mass);
            assert!((s.ell - obs.ell).abs() < 1e-9);
            assert!((s.time_mass_zero - obs.time_mass_zero).abs() < 1e-9);
            assert!((s.occ_le[0] - path.occupation_le(s.time, 0)).abs() < 1e-9);
            assert!((s.occ_le[1] - path.occupation_le(s.time, 2)).abs() < 1e-9);
            let book = path.book_at(s.time);
            assert_eq!(s.count_le[0], book.mass_upto(1));
            assert_eq!(s.count_le[1], book.mass_upto(3));
        }
    }

    #[test]
    fn model_params_validation() {
        assert!(ModelParams::new(0.0, JumpDistribution::reference()).is_err());
        assert!(ModelParams::new(f64::NAN, JumpDistribution::reference()).is_err());
        let p = ModelParams::reference();
        assert!((p.alpha() * p.alpha() - 2.0).abs() < 1e-12);
        assert!(p.mu_upper() > 0.0 && p.mu_lower() > 0.0);
        assert!((p.mu_upper() - (1.0 - std::f64::consts::LN_2)).abs() < 1e-12);
    }
}
