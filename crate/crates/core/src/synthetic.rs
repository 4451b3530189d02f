//! Seeded synthetic implicit-feedback streams with concept drift.
//!
//! Items carry latent factors, a popularity bias and a release time. Each
//! user mixes a stable long-term taste with a short-term taste that drifts
//! a little every time they act, and everyone is nudged by a slowly moving
//! global trend. At each event an active user picks one unseen, released
//! item from a softmax over affinity + popularity + freshness.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, LogNormal, StandardNormal};

use crate::domain::Interaction;
use crate::error::{Error, Result};
use crate::ingest::{Dataset, MIN_USER_INTERACTIONS};
use crate::rng::{substream, Purpose};

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub num_users: usize,
    pub num_items: usize,
    pub num_interactions: usize,
    pub latent_dim: usize,
    /// Inverse temperature on the user-item affinity.
    pub affinity: f64,
    /// Weight of the short-term (drifting) taste relative to the long-term one.
    pub short_term_weight: f64,
    /// Per-event persistence of the short-term taste, in `[0, 1)`.
    pub drift_persistence: f64,
    pub trend_weight: f64,
    /// Fraction of items available from the start; the rest are released
    /// uniformly over the stream.
    pub initial_items: f64,
    pub freshness_weight: f64,
    /// Scale (in events) over which an item's freshness bonus decays.
    pub freshness_span: f64,
    pub popularity_sigma: f64,
    /// Log-normal sigma of per-user activity.
    pub activity_sigma: f64,
    pub seed: u64,
}

impl SyntheticConfig {
    /// About the size of MovieLens-100K.
    pub fn movielens_100k_scale(seed: u64) -> Self {
        SyntheticConfig {
            num_users: 943,
            num_items: 1682,
            num_interactions: 100_000,
            latent_dim: 8,
            affinity: 2.0,
            short_term_weight: 0.8,
            drift_persistence: 0.97,
            trend_weight: 0.5,
            initial_items: 0.4,
            freshness_weight: 1.5,
            freshness_span: 8_000.0,
            popularity_sigma: 1.0,
            activity_sigma: 0.6,
            seed,
        }
    }

    /// A small stream with the same structure.
    pub fn small(num_users: usize, num_items: usize, num_interactions: usize, seed: u64) -> Self {
        SyntheticConfig {
            num_users,
            num_items,
            num_interactions,
            freshness_span: (num_interactions as f64 / 12.0).max(1.0),
            ..Self::movielens_100k_scale(seed)
        }
    }

    fn validate(&self) -> Result<()> {
        if self.num_users == 0 || self.num_items == 0 || self.latent_dim == 0 {
            return Err(Error::invalid("synthetic", "sizes must be positive"));
        }
        if self.num_interactions > self.num_users * self.num_items / 2 {
            return Err(Error::invalid(
                "num_interactions",
                "at most half of all user-item pairs",
            ));
        }
        if !(0.0..1.0).contains(&self.drift_persistence) {
            return Err(Error::invalid("drift_persistence", "must lie in [0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.initial_items) || self.initial_items == 0.0 {
            return Err(Error::invalid("initial_items", "must lie in (0, 1]"));
        }
        Ok(())
    }
}

fn gaussian_vec<R: Rng + ?Sized>(rng: &mut R, d: usize, scale: f64) -> Vec<f64> {
    (0..d)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            scale * z
        })
        .collect::<Vec<f64>>()
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

/// Generates a time-ordered stream; ids are dense and `seq == timestamp`
/// order. Users that end up with too few interactions for the ingest filter
/// are topped up so the result survives preprocessing unchanged.
pub fn generate(cfg: &SyntheticConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = substream(cfg.seed, Purpose::Synthetic, 0, 0);
    let (nu, ni, d) = (cfg.num_users, cfg.num_items, cfg.latent_dim);
    let inv_sqrt_d = 1.0 / (d as f64).sqrt();

    let items: Vec<Vec<f64>> = (0..ni).map(|_| gaussian_vec(&mut rng, d, 1.0)).collect();
    let popularity = LogNormal::new(0.0, cfg.popularity_sigma).map_err(|e| Error::invalid("popularity_sigma", e.to_string()))?;
    let pop: Vec<f64> = (0..ni).map(|_| popularity.sample(&mut rng).ln()).collect();
    let n_initial = ((ni as f64 * cfg.initial_items).ceil() as usize).clamp(1, ni);
    let total = cfg.num_interactions as f64;
    let release: Vec<f64> = (0..ni)
        .map(|v| {
            if v < n_initial {
                0.0
            } else {
                rng.random_range(0.0..0.9 * total)
            }
        })
        .collect();

    let long_term: Vec<Vec<f64>> = (0..nu)
        .map(|_| {
            let mut a = gaussian_vec(&mut rng, d, 1.0);
            normalize(&mut a);
            a
        })
        .collect();
    let mut short_term: Vec<Vec<f64>> = (0..nu).map(|_| gaussian_vec(&mut rng, d, inv_sqrt_d)).collect();
    let activity = LogNormal::new(0.0, cfg.activity_sigma).map_err(|e| Error::invalid("activity_sigma", e.to_string()))?;
    let weights: Vec<f64> = (0..nu).map(|_| activity.sample(&mut rng)).collect();
    let cumulative: Vec<f64> = weights
        .iter()
        .scan(0.0, |acc, w| {
            *acc += w;
            Some(*acc)
        })
        .collect();
    let weight_total = *cumulative.last().expect("at least one user");

    // The global trend moves between random anchors.
    let n_anchors = 6;
    let anchors: Vec<Vec<f64>> = (0..n_anchors)
        .map(|_| {
            let mut a = gaussian_vec(&mut rng, d, 1.0);
            normalize(&mut a);
            a
        })
        .collect();
    let trend_at = |t: f64| -> Vec<f64> {
        let pos = (t / total).clamp(0.0, 1.0) * (n_anchors - 1) as f64;
        let i = (pos.floor() as usize).min(n_anchors - 2);
        let f = pos - i as f64;
        (0..d)
            .map(|j| (1.0 - f) * anchors[i][j] + f * anchors[i + 1][j])
            .collect()
    };

    let mut seen = vec![false; nu * ni];
    let mut counts = vec![0usize; nu];
    let mut pairs: Vec<(u32, u32)> = Vec::with_capacity(cfg.num_interactions);
    let mut logits = vec![0.0f64; ni];
    let innovation = (1.0 - cfg.drift_persistence * cfg.drift_persistence).sqrt() * inv_sqrt_d;
    let min_count = MIN_USER_INTERACTIONS + 1;
    let reserve = nu * min_count;

    let mut pick_item = |pref: &[f64], t: f64, rng: &mut crate::rng::StreamRng, seen: &[bool]| -> Option<u32> {
        let mut max = f64::NEG_INFINITY;
        for v in 0..ni {
            logits[v] = if release[v] > t || seen[v] {
                f64::NEG_INFINITY
            } else {
                let aff: f64 = items[v].iter().zip(pref).map(|(a, b)| a * b).sum::<f64>() * inv_sqrt_d;
                let fresh = (-(t - release[v]) / cfg.freshness_span).exp();
                cfg.affinity * aff + pop[v] + cfg.freshness_weight * fresh
            };
            max = max.max(logits[v]);
        }
        if max == f64::NEG_INFINITY {
            return None;
        }
        let mut acc = 0.0;
        for l in logits.iter_mut() {
            acc += (*l - max).exp();
            *l = acc;
        }
        let x = rng.random_range(0.0..acc);
        Some(logits.partition_point(|&c| c <= x).min(ni - 1) as u32)
    };

    let mut t = 0usize;
    let mut attempts = 0usize;
    while pairs.len() < cfg.num_interactions {
        attempts += 1;
        if attempts > 20 * cfg.num_interactions {
            return Err(Error::invalid("synthetic", "could not place enough interactions"));
        }
        let remaining = cfg.num_interactions - pairs.len();
        let deficit: usize = counts.iter().map(|&c| min_count.saturating_sub(c)).sum();
        let u = if deficit >= remaining && deficit > 0 {
            counts.iter().position(|&c| c < min_count).expect("deficit implies a short user")
        } else {
            let x = rng.random_range(0.0..weight_total);
            cumulative.partition_point(|&c| c <= x).min(nu - 1)
        };
        let trend = trend_at(t as f64);
        let pref: Vec<f64> = (0..d)
            .map(|j| long_term[u][j] + cfg.short_term_weight * short_term[u][j] + cfg.trend_weight * trend[j])
            .collect();
        let Some(v) = pick_item(&pref, t as f64, &mut rng, &seen[u * ni..(u + 1) * ni]) else {
            continue;
        };
        seen[u * ni + v as usize] = true;
        counts[u] += 1;
        pairs.push((u as u32, v));
        t += 1;
        for j in 0..d {
            let e: f64 = StandardNormal.sample(&mut rng);
            short_term[u][j] = cfg.drift_persistence * short_term[u][j] + innovation * e;
        }
    }
    if reserve > cfg.num_interactions {
        log::warn!("too few interactions to give every user {min_count}");
    }

    // Dense remap by first appearance, matching what ingest produces.
    let mut user_map = vec![u32::MAX; nu];
    let mut item_map = vec![u32::MAX; ni];
    let (mut next_u, mut next_i) = (0u32, 0u32);
    let mut interactions = Vec::with_capacity(pairs.len());
    for (seq, &(u, v)) in pairs.iter().enumerate() {
        if user_map[u as usize] == u32::MAX {
            user_map[u as usize] = next_u;
            next_u += 1;
        }
        if item_map[v as usize] == u32::MAX {
            item_map[v as usize] = next_i;
            next_i += 1;
        }
        interactions.push(Interaction::new(
            user_map[u as usize],
            item_map[v as usize],
            seq as i64,
            seq as u64,
        ));
    }
    Dataset::from_dense(interactions, next_u as usize, next_i as usize)
}

/// Writes `user::item::rating::timestamp` lines readable by the ingest
/// parser.
pub fn write_ratings(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for x in &ds.interactions {
        writeln!(w, "{}::{}::5::{}", x.user + 1, x.item + 1, 1_000_000_000 + x.timestamp)
            .map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
