//! Training-batch samplers.
//!
//! [`sts_sample`] draws a stratified batch: `round(bs * alpha)` positives
//! from the newly received data and the remainder from the historical part
//! of the reservoir. Inside each stratum the k-th oldest interaction has
//! probability proportional to `lambda^(k-1)`, so every interaction is
//! `lambda` times as likely as its predecessor. All draws are with
//! replacement.
//!
//! The baselines NDO, RR and SW sample uniformly from new data only, from
//! new data plus reservoir, and from a sliding window of recent data.

use std::ops::Range;

use rand::Rng;

use crate::config::ExperimentConfig;
use crate::domain::{Interaction, ItemId, Reservoir, SeenIndex, UserId};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Normalized probability of the `k`-th (1 = oldest, `n` = newest)
/// interaction under decay ratio `lambda`.
///
/// Uses the closed form `lambda^(k-1) (lambda-1) / (lambda^n - 1)`,
/// rescaled by `lambda^-n` so large `n` does not overflow. `lambda == 1`
/// is the uniform limit `1/n`.
pub fn decay_probability<T: Scalar>(lambda: T, n: usize, k: usize) -> Result<T> {
    if !(lambda >= T::one()) || !lambda.is_finite() {
        return Err(Error::invalid("lambda", "lambda ≥ 1"));
    }
    if n == 0 || k == 0 || k > n {
        return Err(Error::OutOfRange {
            what: "decay index",
            index: k,
            len: n,
        });
    }
    let n_t = T::from_usize(n).expect("n fits scalar");
    if lambda == T::one() {
        return Ok(T::one() / n_t);
    }
    let ln = lambda.ln();
    let k_t = T::from_usize(k).expect("k fits scalar");
    let numer = (lambda - T::one()) * ((k_t - T::one() - n_t) * ln).exp();
    let denom = -(-n_t * ln).exp_m1();
    Ok(numer / denom)
}

/// Inverse-CDF sampler over `n` positions with geometric decay.
#[derive(Debug, Clone)]
pub struct DecayDistribution {
    lambda: f64,
    /// Unnormalized cumulative weights, weight of the newest = 1.
    cumulative: Vec<f64>,
}

impl DecayDistribution {
    pub fn new(lambda: f64, n: usize) -> Result<Self> {
        if !(lambda >= 1.0) || !lambda.is_finite() {
            return Err(Error::invalid("lambda", "lambda ≥ 1"));
        }
        if n == 0 {
            return Err(Error::Empty("decay distribution over zero items".into()));
        }
        let ln = lambda.ln();
        let mut acc = 0.0;
        let cumulative = (1..=n)
            .map(|k| {
                acc += ((k as f64 - n as f64) * ln).exp();
                acc
            })
            .collect();
        Ok(DecayDistribution { lambda, cumulative })
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn len(&self) -> usize {
        self.cumulative.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cumulative.is_empty()
    }

    /// Probability of 1-based position `k`, read from the table.
    pub fn probability(&self, k: usize) -> f64 {
        let total = *self.cumulative.last().expect("non-empty table");
        let lo = if k >= 2 { self.cumulative[k - 2] } else { 0.0 };
        (self.cumulative[k - 1] - lo) / total
    }

    /// Draws a 0-based position (0 = oldest).
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let total = *self.cumulative.last().expect("non-empty table");
        let u = rng.random::<f64>() * total;
        self.cumulative
            .partition_point(|&c| c <= u)
            .min(self.cumulative.len() - 1)
    }

    fn matches(&self, lambda: f64, n: usize) -> bool {
        self.lambda == lambda && self.cumulative.len() == n
    }
}

/// Which source a sampled positive came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    New,
    Reservoir,
}

/// Positives for one model's training step; a multiset.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SampleBatch {
    pub positives: Vec<Interaction>,
    pub provenance: Vec<Provenance>,
}

impl SampleBatch {
    fn with_capacity(n: usize) -> Self {
        SampleBatch {
            positives: Vec::with_capacity(n),
            provenance: Vec::with_capacity(n),
        }
    }

    fn push(&mut self, x: Interaction, p: Provenance) {
        self.positives.push(x);
        self.provenance.push(p);
    }

    pub fn len(&self) -> usize {
        self.positives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positives.is_empty()
    }

    pub fn count(&self, p: Provenance) -> usize {
        self.provenance.iter().filter(|&&q| q == p).count()
    }
}

/// A contiguous, oldest-first range of reservoir entries.
#[derive(Debug, Clone, Copy)]
pub struct History<'a> {
    reservoir: &'a Reservoir,
    range: (usize, usize),
}

impl<'a> History<'a> {
    pub fn all(reservoir: &'a Reservoir) -> Self {
        History {
            reservoir,
            range: (0, reservoir.len()),
        }
    }

    /// Entries strictly older than `seq`.
    pub fn before(reservoir: &'a Reservoir, seq: u64) -> Self {
        History {
            reservoir,
            range: (0, reservoir.count_before(seq)),
        }
    }

    /// The newest `w` entries.
    pub fn latest(reservoir: &'a Reservoir, w: usize) -> Self {
        let len = reservoir.len();
        History {
            reservoir,
            range: (len.saturating_sub(w), len),
        }
    }

    pub fn range(reservoir: &'a Reservoir, r: Range<usize>) -> Self {
        let end = r.end.min(reservoir.len());
        History {
            reservoir,
            range: (r.start.min(end), end),
        }
    }

    pub fn len(&self) -> usize {
        self.range.1 - self.range.0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, i: usize) -> Interaction {
        assert!(i < self.len(), "history index {i} out of range {}", self.len());
        *self
            .reservoir
            .get(self.range.0 + i)
            .expect("history range inside reservoir")
    }

    pub fn iter(&self) -> impl Iterator<Item = Interaction> + '_ {
        (0..self.len()).map(|i| self.get(i))
    }
}

/// Size of the new-data stratum: `round(bs * alpha)`, halves rounded up.
pub fn new_stratum_size(bs: usize, alpha: f64) -> usize {
    ((bs as f64 * alpha) + 0.5).floor().min(bs as f64) as usize
}

/// Precomputed decay tables for one iteration's STS draws. Build once and
/// share across the per-model samplers.
#[derive(Debug, Clone)]
pub struct StsPlan {
    pub batch_size: usize,
    pub new_count: usize,
    new_table: Option<DecayDistribution>,
    history_table: Option<DecayDistribution>,
}

impl StsPlan {
    pub fn new(
        batch_size: usize,
        alpha: f64,
        lambda_new: f64,
        new_len: usize,
        lambda_res: f64,
        history_len: usize,
    ) -> Result<Self> {
        Self::rebuild(None, batch_size, alpha, lambda_new, new_len, lambda_res, history_len)
    }

    /// Like [`StsPlan::new`] but reuses tables from `previous` when the
    /// `(lambda, n)` pair is unchanged.
    pub fn rebuild(
        previous: Option<StsPlan>,
        batch_size: usize,
        alpha: f64,
        lambda_new: f64,
        new_len: usize,
        lambda_res: f64,
        history_len: usize,
    ) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::invalid("alpha", "alpha ∈ [0,1]"));
        }
        if batch_size == 0 {
            return Err(Error::invalid("batch_size", "must be a positive integer"));
        }
        if new_len == 0 && history_len == 0 {
            return Err(Error::Empty(
                "both new data and reservoir are empty".to_string(),
            ));
        }
        let mut new_count = new_stratum_size(batch_size, alpha);
        if new_len == 0 && new_count > 0 {
            log::warn!("no new data for a new-data share of {new_count}; sampling the reservoir only");
            new_count = 0;
        } else if history_len == 0 && new_count < batch_size {
            log::debug!("reservoir history empty; sampling new data only");
            new_count = batch_size;
        }
        let (prev_new, prev_hist) = match previous {
            Some(p) => (p.new_table, p.history_table),
            None => (None, None),
        };
        let table = |prev: Option<DecayDistribution>, lambda: f64, n: usize, needed: bool| -> Result<Option<DecayDistribution>> {
            if !needed {
                return Ok(None);
            }
            match prev {
                Some(t) if t.matches(lambda, n) => Ok(Some(t)),
                _ => DecayDistribution::new(lambda, n).map(Some),
            }
        };
        Ok(StsPlan {
            batch_size,
            new_count,
            new_table: table(prev_new, lambda_new, new_len, new_count > 0)?,
            history_table: table(prev_hist, lambda_res, history_len, new_count < batch_size)?,
        })
    }

    /// Draws one stratified batch. `new_data` and `history` must have the
    /// lengths the plan was built for.
    pub fn sample<R: Rng + ?Sized>(
        &self,
        new_data: &[Interaction],
        history: History<'_>,
        rng: &mut R,
    ) -> SampleBatch {
        let mut batch = SampleBatch::with_capacity(self.batch_size);
        if let Some(t) = &self.new_table {
            debug_assert_eq!(t.len(), new_data.len());
            for _ in 0..self.new_count {
                batch.push(new_data[t.sample(rng)], Provenance::New);
            }
        }
        if let Some(t) = &self.history_table {
            debug_assert_eq!(t.len(), history.len());
            for _ in self.new_count..self.batch_size {
                batch.push(history.get(t.sample(rng)), Provenance::Reservoir);
            }
        }
        batch
    }
}

/// Stratified time-aware sample of `cfg.batch_size` positives.
pub fn sts_sample<R: Rng + ?Sized>(
    new_data: &[Interaction],
    history: History<'_>,
    cfg: &ExperimentConfig,
    rng: &mut R,
) -> Result<SampleBatch> {
    let plan = StsPlan::new(
        cfg.batch_size,
        cfg.alpha,
        cfg.lambda_new,
        new_data.len(),
        cfg.lambda_res,
        history.len(),
    )?;
    Ok(plan.sample(new_data, history, rng))
}

/// Uniform with-replacement draws from the new data only.
pub fn ndo_sample<R: Rng + ?Sized>(
    new_data: &[Interaction],
    batch_size: usize,
    rng: &mut R,
) -> Result<SampleBatch> {
    if new_data.is_empty() {
        return Err(Error::Empty("NDO sampler needs new data".to_string()));
    }
    let mut batch = SampleBatch::with_capacity(batch_size);
    for _ in 0..batch_size {
        batch.push(new_data[rng.random_range(0..new_data.len())], Provenance::New);
    }
    Ok(batch)
}

/// Uniform with-replacement draws from new data and reservoir pooled.
pub fn rr_sample<R: Rng + ?Sized>(
    new_data: &[Interaction],
    history: History<'_>,
    batch_size: usize,
    rng: &mut R,
) -> Result<SampleBatch> {
    let total = new_data.len() + history.len();
    if total == 0 {
        return Err(Error::Empty(
            "both new data and reservoir are empty".to_string(),
        ));
    }
    let mut batch = SampleBatch::with_capacity(batch_size);
    for _ in 0..batch_size {
        let i = rng.random_range(0..total);
        if i < new_data.len() {
            batch.push(new_data[i], Provenance::New);
        } else {
            batch.push(history.get(i - new_data.len()), Provenance::Reservoir);
        }
    }
    Ok(batch)
}

/// Uniform with-replacement draws from a window of the most recent
/// interactions. `new_from` is the first `seq` of the current new data, used
/// only to tag provenance.
pub fn sw_sample<R: Rng + ?Sized>(
    window: History<'_>,
    new_from: u64,
    batch_size: usize,
    rng: &mut R,
) -> Result<SampleBatch> {
    if window.is_empty() {
        return Err(Error::Empty("sliding window is empty".to_string()));
    }
    let mut batch = SampleBatch::with_capacity(batch_size);
    for _ in 0..batch_size {
        let x = window.get(rng.random_range(0..window.len()));
        let p = if x.seq >= new_from {
            Provenance::New
        } else {
            Provenance::Reservoir
        };
        batch.push(x, p);
    }
    Ok(batch)
}

/// A labeled training example for binary cross-entropy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Example {
    pub user: UserId,
    pub item: ItemId,
    pub label: bool,
}

impl Example {
    pub fn label_value<T: Scalar>(&self) -> T {
        if self.label {
            T::one()
        } else {
            T::zero()
        }
    }
}

/// Positives followed (per positive) by up to `ratio` rejection-sampled
/// items the user has never interacted with.
///
/// Each positive gets a budget of `100 * ratio` draws; a near-saturated
/// user may therefore receive fewer negatives, which is logged.
pub fn negative_sample<R: Rng + ?Sized>(
    positives: &[Interaction],
    seen: &SeenIndex,
    num_items: usize,
    ratio: usize,
    rng: &mut R,
) -> Vec<Example> {
    let mut out = Vec::with_capacity(positives.len() * (ratio + 1));
    for x in positives {
        out.push(Example {
            user: x.user,
            item: x.item,
            label: true,
        });
        if ratio == 0 || num_items == 0 {
            continue;
        }
        if seen.count_for(x.user) >= num_items {
            log::warn!("user {} has interacted with every item; no negatives", x.user);
            continue;
        }
        let budget = 100 * ratio;
        let mut emitted = 0;
        let mut attempts = 0;
        while emitted < ratio && attempts < budget {
            attempts += 1;
            let v = rng.random_range(0..num_items) as ItemId;
            if !seen.contains(x.user, v) {
                out.push(Example {
                    user: x.user,
                    item: v,
                    label: false,
                });
                emitted += 1;
            }
        }
        if emitted < ratio {
            log::warn!(
                "user {}: only {emitted} of {ratio} negatives after {budget} attempts",
                x.user
            );
        }
    }
    out
}
