//! Prequential (test-then-train) evaluation of a model ensemble over a
//! time-ordered stream.
//!
//! Each iteration receives the next `n_r` interactions, ranks every one of
//! them against sampled negatives with all models, fuses the scores, stores
//! the per-model accuracies, and only then hands the data to the samplers
//! for `n_p` worth of training per model.

use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{ExperimentConfig, FuserKind, SamplerKind};
use crate::domain::{Interaction, ItemId, Reservoir, SeenIndex, StreamSchedule};
use crate::ensemble::{
    fuse, fusion_weights, AccuracyMemory, AccuracyRecord, ConfidenceIndex, FusionWeights,
};
use crate::error::{Error, Result};
use crate::models::{AdamState, Model, ModelDims};
use crate::rng::{substream, Purpose};
use crate::sampling::{
    ndo_sample, negative_sample, rr_sample, sw_sample, History, SampleBatch, StsPlan,
};
use crate::scalar::Scalar;

/// Target item plus sampled negatives; the target is always `candidates[0]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RankingTask {
    pub target: Interaction,
    pub candidates: Vec<ItemId>,
}

impl RankingTask {
    /// Draws `negatives` distinct items the user has not interacted with.
    ///
    /// When the user's unseen pool is smaller than `negatives`, the whole
    /// pool is used and the task has fewer candidates.
    pub fn sample<R: Rng + ?Sized>(
        target: Interaction,
        seen: &SeenIndex,
        num_items: usize,
        negatives: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if target.item as usize >= num_items {
            return Err(Error::OutOfRange {
                what: "item",
                index: target.item as usize,
                len: num_items,
            });
        }
        let excluded = |v: ItemId| v == target.item || seen.contains(target.user, v);
        let seen_count = seen.count_for(target.user);
        let target_seen = seen.contains(target.user, target.item) as usize;
        let pool = num_items - seen_count - (1 - target_seen);
        let mut candidates = Vec::with_capacity(negatives + 1);
        candidates.push(target.item);
        if pool <= negatives {
            log::warn!(
                "user {} has only {pool} unseen items for {negatives} evaluation negatives",
                target.user
            );
            candidates.extend((0..num_items as ItemId).filter(|&v| !excluded(v)));
            return Ok(RankingTask { target, candidates });
        }
        if 2 * pool >= num_items {
            let mut chosen = std::collections::HashSet::with_capacity(negatives);
            while candidates.len() <= negatives {
                let v = rng.random_range(0..num_items) as ItemId;
                if !excluded(v) && chosen.insert(v) {
                    candidates.push(v);
                }
            }
        } else {
            let mut unseen: Vec<ItemId> = (0..num_items as ItemId).filter(|&v| !excluded(v)).collect();
            for i in 0..negatives {
                let j = rng.random_range(i..unseen.len());
                unseen.swap(i, j);
            }
            candidates.extend_from_slice(&unseen[..negatives]);
        }
        Ok(RankingTask { target, candidates })
    }
}

/// 1-based rank of `scores[target]`; ties count against the target.
pub fn rank_target<T: PartialOrd>(scores: &[T], target: usize) -> usize {
    let t = &scores[target];
    1 + scores
        .iter()
        .enumerate()
        .filter(|&(i, s)| i != target && !(s < t))
        .count()
}

pub fn hr_at_k(rank: usize, k: usize) -> f64 {
    if rank >= 1 && rank <= k {
        1.0
    } else {
        0.0
    }
}

pub fn ndcg_at_k(rank: usize, k: usize) -> f64 {
    if rank >= 1 && rank <= k {
        1.0 / ((rank + 1) as f64).log2()
    } else {
        0.0
    }
}

/// Hit and NDCG sums over a set of ranked tasks.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct MetricSums {
    pub count: usize,
    pub hits: usize,
    pub ndcg: f64,
}

impl MetricSums {
    pub fn add_rank(&mut self, rank: usize, k: usize) {
        self.count += 1;
        self.hits += hr_at_k(rank, k) as usize;
        self.ndcg += ndcg_at_k(rank, k);
    }

    pub fn merge(&mut self, other: &MetricSums) {
        self.count += other.count;
        self.hits += other.hits;
        self.ndcg += other.ndcg;
    }

    pub fn hr(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.hits as f64 / self.count as f64
        }
    }

    pub fn ndcg(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.ndcg / self.count as f64
        }
    }
}

/// One prequential iteration.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRecord {
    pub iteration: usize,
    /// Interactions evaluated so far, this iteration included.
    pub n_seen: usize,
    pub fused: MetricSums,
    pub cumulative: MetricSums,
    pub models: Vec<MetricSums>,
    pub wall_ms_test: f64,
    pub wall_ms_train: f64,
}

impl MetricsRecord {
    /// Equality of everything except wall-clock columns.
    pub fn same_metrics(&self, other: &MetricsRecord) -> bool {
        self.iteration == other.iteration
            && self.n_seen == other.n_seen
            && self.fused == other.fused
            && self.cumulative == other.cumulative
            && self.models == other.models
    }
}

/// Means over all evaluated interactions.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub iterations: usize,
    pub n_test: usize,
    pub hr: f64,
    pub ndcg: f64,
    pub hr_models: Vec<f64>,
    pub ndcg_models: Vec<f64>,
}

pub fn aggregate(records: &[MetricsRecord]) -> Result<Summary> {
    let first = records
        .first()
        .ok_or_else(|| Error::Empty("no metrics records to aggregate".to_string()))?;
    let mut fused = MetricSums::default();
    let mut models = vec![MetricSums::default(); first.models.len()];
    for r in records {
        fused.merge(&r.fused);
        if r.models.len() != models.len() {
            return Err(Error::LengthMismatch {
                left: r.models.len(),
                right: models.len(),
            });
        }
        for (m, s) in models.iter_mut().zip(&r.models) {
            m.merge(s);
        }
    }
    Ok(Summary {
        iterations: records.len(),
        n_test: fused.count,
        hr: fused.hr(),
        ndcg: fused.ndcg(),
        hr_models: models.iter().map(MetricSums::hr).collect(),
        ndcg_models: models.iter().map(MetricSums::ndcg).collect(),
    })
}

/// Per-iteration training diagnostics.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct TrainStats {
    pub mean_loss: f64,
    pub steps: usize,
}

/// Sizes of the minibatches that make up one iteration's `n_p` volume.
pub fn minibatch_sizes(n_p: usize, batch_size: usize) -> Vec<usize> {
    let full = n_p / batch_size;
    let mut sizes = vec![batch_size; full];
    if n_p % batch_size != 0 {
        sizes.push(n_p % batch_size);
    }
    sizes
}

/// Read-only inputs to the per-model samplers for one iteration.
struct SamplingContext<'a> {
    cfg: &'a ExperimentConfig,
    new_data: &'a [Interaction],
    reservoir: &'a Reservoir,
    /// Stratified plans keyed by minibatch size.
    plans: Vec<(usize, StsPlan)>,
}

impl<'a> SamplingContext<'a> {
    fn new(
        cfg: &'a ExperimentConfig,
        new_data: &'a [Interaction],
        reservoir: &'a Reservoir,
        sizes: &[usize],
    ) -> Result<Self> {
        let mut plans: Vec<(usize, StsPlan)> = Vec::new();
        if cfg.sampler_kind == SamplerKind::Sts {
            let hist = Self::history_of(new_data, reservoir).len();
            for &bs in sizes {
                if plans.iter().all(|(s, _)| *s != bs) {
                    let previous = plans.last().map(|(_, p)| p.clone());
                    let plan = StsPlan::rebuild(
                        previous,
                        bs,
                        cfg.alpha,
                        cfg.lambda_new,
                        new_data.len(),
                        cfg.lambda_res,
                        hist,
                    )?;
                    plans.push((bs, plan));
                }
            }
        }
        Ok(SamplingContext {
            cfg,
            new_data,
            reservoir,
            plans,
        })
    }

    /// The reservoir strictly before the new data (the new data itself is
    /// already inserted).
    fn history_of(new_data: &[Interaction], reservoir: &'a Reservoir) -> History<'a> {
        match new_data.first() {
            Some(x) => History::before(reservoir, x.seq),
            None => History::all(reservoir),
        }
    }

    fn draw<R: Rng + ?Sized>(&self, bs: usize, rng: &mut R) -> Result<SampleBatch> {
        let history = Self::history_of(self.new_data, self.reservoir);
        match self.cfg.sampler_kind {
            SamplerKind::Sts => {
                let plan = &self
                    .plans
                    .iter()
                    .find(|(s, _)| *s == bs)
                    .expect("plan built for every minibatch size")
                    .1;
                Ok(plan.sample(self.new_data, history, rng))
            }
            SamplerKind::Ndo => ndo_sample(self.new_data, bs, rng),
            SamplerKind::Rr => rr_sample(self.new_data, history, bs, rng),
            SamplerKind::Sw => {
                let from = self.new_data.first().map_or(u64::MAX, |x| x.seq);
                sw_sample(History::latest(self.reservoir, self.cfg.window()), from, bs, rng)
            }
        }
    }
}

/// One model's share of an iteration's training: sample, add negatives,
/// step. Shared by the ensemble and the monolithic runner.
#[allow(clippy::too_many_arguments)]
fn train_one<T: Scalar>(
    model: &mut Model<T>,
    adam: &mut AdamState<T>,
    ctx: &SamplingContext<'_>,
    seen: &SeenIndex,
    sizes: &[usize],
    frontier: u64,
    model_index: usize,
    iteration: u64,
) -> Result<TrainStats> {
    let mut rng = substream(ctx.cfg.rng_seed, Purpose::Train, model_index as u64, iteration);
    let num_items = model.dims().num_items;
    let mut stats = TrainStats::default();
    for &bs in sizes {
        let batch = ctx.draw(bs, &mut rng)?;
        if let Some(x) = batch.positives.iter().find(|x| x.seq >= frontier) {
            return Err(Error::Leakage {
                seq: x.seq,
                frontier,
            });
        }
        let examples = negative_sample(&batch.positives, seen, num_items, ctx.cfg.negative_ratio, &mut rng);
        let step = model.train_step(adam, &examples)?;
        stats.mean_loss += step.loss.as_f64();
        stats.steps += 1;
    }
    if stats.steps > 0 {
        stats.mean_loss /= stats.steps as f64;
    }
    Ok(stats)
}

/// Everything one model computes on a test batch.
struct ModelTestOutput<T> {
    scores: Vec<Vec<T>>,
    /// Per-candidate confidence; `None` before the memory holds anything.
    confidences: Option<Vec<Vec<T>>>,
    sums: MetricSums,
    records: Vec<AccuracyRecord<T>>,
}

fn test_one<T: Scalar>(
    model: &Model<T>,
    memory: &AccuracyMemory<T>,
    tasks: &[RankingTask],
    cfg: &ExperimentConfig,
    with_confidence: bool,
) -> Result<ModelTestOutput<T>> {
    let mut out = ModelTestOutput {
        scores: Vec::with_capacity(tasks.len()),
        confidences: (with_confidence && !memory.is_empty()).then(|| Vec::with_capacity(tasks.len())),
        sums: MetricSums::default(),
        records: Vec::with_capacity(tasks.len()),
    };
    let mut index = match out.confidences {
        Some(_) => Some(ConfidenceIndex::new(memory, model.dims().embedding_dim, cfg.memory_top_e)?),
        None => None,
    };
    for task in tasks {
        let u = task.target.user;
        let scores = model.score_items(u, &task.candidates)?;
        let rank = rank_target(&scores, 0);
        out.sums.add_rank(rank, cfg.top_k);
        out.records.push(AccuracyRecord {
            user: u,
            item: task.target.item,
            acc: T::lit(ndcg_at_k(rank, cfg.top_k)),
            embedding: model.embedding_of(u, task.target.item)?,
        });
        if let (Some(conf), Some(index)) = (out.confidences.as_mut(), index.as_mut()) {
            index.set_user(model.user_embedding(u))?;
            let c = task
                .candidates
                .iter()
                .map(|&v| index.confidence(v, model.item_embedding(v)))
                .collect::<Result<Vec<T>>>()?;
            conf.push(c);
        }
        out.scores.push(scores);
    }
    Ok(out)
}

fn elapsed_ms(start: Instant, enabled: bool) -> f64 {
    if enabled {
        start.elapsed().as_secs_f64() * 1e3
    } else {
        0.0
    }
}

fn build_tasks(
    batch: &[Interaction],
    seen: &SeenIndex,
    num_items: usize,
    cfg: &ExperimentConfig,
    iteration: u64,
) -> Result<Vec<RankingTask>> {
    let mut rng = substream(cfg.rng_seed, Purpose::Evaluate, iteration, 0);
    batch
        .iter()
        .map(|&x| RankingTask::sample(x, seen, num_items, cfg.eval_negatives, &mut rng))
        .collect()
}

fn thread_pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::invalid("workers", e.to_string()))
}

/// The ensemble together with its stream state.
pub struct System<T> {
    cfg: ExperimentConfig,
    schedule: StreamSchedule,
    models: Vec<Model<T>>,
    adams: Vec<AdamState<T>>,
    memories: Vec<AccuracyMemory<T>>,
    reservoir: Reservoir,
    seen: SeenIndex,
    /// Global iteration counter across both phases; keys the rng streams.
    iteration: u64,
    /// Sequence number of the first interaction not yet handed to training.
    frontier: u64,
    evaluated: MetricSums,
    prequential_iterations: usize,
    pool: rayon::ThreadPool,
}

impl<T: Scalar> System<T> {
    pub fn new(cfg: &ExperimentConfig, num_users: usize, num_items: usize) -> Result<Self> {
        cfg.validate()?;
        let dims = ModelDims::from_config(cfg, num_users, num_items);
        let mut models = Vec::with_capacity(cfg.num_models);
        for k in 0..cfg.num_models {
            let mut rng = substream(cfg.rng_seed, Purpose::Init, k as u64, 0);
            models.push(Model::init(cfg.model_kind, dims.clone(), &mut rng)?);
        }
        let adams = models
            .iter()
            .map(|m| m.new_adam(cfg.learning_rate, cfg.l2_weight))
            .collect();
        let memories = models
            .iter()
            .map(|_| AccuracyMemory::new(2 * cfg.embedding_dim))
            .collect();
        Ok(System {
            schedule: StreamSchedule::new(cfg.n_p, cfg.n_r)?,
            cfg: cfg.clone(),
            models,
            adams,
            memories,
            reservoir: Reservoir::new(cfg.reservoir_capacity)?,
            seen: SeenIndex::with_users(num_users),
            iteration: 0,
            frontier: 0,
            evaluated: MetricSums::default(),
            prequential_iterations: 0,
            pool: thread_pool(cfg.workers)?,
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn models(&self) -> &[Model<T>] {
        &self.models
    }

    pub fn memories(&self) -> &[AccuracyMemory<T>] {
        &self.memories
    }

    pub fn reservoir(&self) -> &Reservoir {
        &self.reservoir
    }

    pub fn seen(&self) -> &SeenIndex {
        &self.seen
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    fn num_items(&self) -> usize {
        self.models[0].dims().num_items
    }

    /// Adds new data to the reservoir and seen index, then trains every
    /// model on its own batches.
    fn absorb_and_train(&mut self, new_data: &[Interaction]) -> Result<Vec<TrainStats>> {
        self.reservoir.extend(new_data)?;
        self.seen.record_all(new_data);
        if let Some(last) = new_data.last() {
            self.frontier = self.frontier.max(last.seq + 1);
        }
        let sizes = minibatch_sizes(self.schedule.n_p, self.cfg.batch_size);
        let ctx = SamplingContext::new(&self.cfg, new_data, &self.reservoir, &sizes)?;
        let (seen, frontier, iteration) = (&self.seen, self.frontier, self.iteration);
        let models = &mut self.models;
        let adams = &mut self.adams;
        let stats = self.pool.install(|| {
            models
                .par_iter_mut()
                .zip(adams.par_iter_mut())
                .enumerate()
                .map(|(k, (m, a))| train_one(m, a, &ctx, seen, &sizes, frontier, k, iteration))
                .collect::<Result<Vec<_>>>()
        })?;
        self.iteration += 1;
        Ok(stats)
    }

    /// Consumes the training split in arrival order without evaluating.
    pub fn run_training_phase(&mut self, stream: &[Interaction]) -> Result<Vec<TrainStats>> {
        let mut last = Vec::new();
        let chunks = self.schedule.batches(stream);
        let n = chunks.len();
        for (i, chunk) in chunks.enumerate() {
            last = self.absorb_and_train(chunk)?;
            if (i + 1) % 100 == 0 || i + 1 == n {
                let loss = last.iter().map(|s| s.mean_loss).sum::<f64>() / last.len() as f64;
                log::info!("training phase {}/{n}: mean loss {loss:.4}", i + 1);
            }
        }
        Ok(last)
    }

    /// Fused scores for every task, given each model's test output.
    fn fuse_tasks(&self, outputs: &[ModelTestOutput<T>], tasks: &[RankingTask]) -> Result<MetricSums> {
        let o = outputs.len();
        let mut sums = MetricSums::default();
        let uniform = FusionWeights::uniform(o);
        let global = match self.cfg.fuser_kind {
            FuserKind::AdaW => self
                .memories
                .iter()
                .map(|m| m.mean_accuracy())
                .collect::<Option<Vec<T>>>()
                .map(|acc| fusion_weights(&acc)),
            _ => None,
        };
        let ael = self.cfg.fuser_kind == FuserKind::Ael && outputs.iter().all(|x| x.confidences.is_some());
        let mut preds = vec![T::zero(); o];
        let mut conf = vec![T::zero(); o];
        for (t, task) in tasks.iter().enumerate() {
            let mut fused = Vec::with_capacity(task.candidates.len());
            for c in 0..task.candidates.len() {
                for k in 0..o {
                    preds[k] = outputs[k].scores[t][c];
                }
                let y = if ael {
                    for k in 0..o {
                        conf[k] = outputs[k].confidences.as_ref().expect("checked")[t][c];
                    }
                    fuse(&preds, &fusion_weights(&conf))?
                } else {
                    fuse(&preds, global.as_ref().unwrap_or(&uniform))?
                };
                fused.push(y);
            }
            sums.add_rank(rank_target(&fused, 0), self.cfg.top_k);
        }
        Ok(sums)
    }

    /// One prequential iteration over `batch`.
    pub fn step_prequential(&mut self, batch: &[Interaction]) -> Result<MetricsRecord> {
        if let Some(x) = batch.iter().find(|x| x.seq < self.frontier) {
            return Err(Error::Leakage {
                seq: x.seq,
                frontier: self.frontier,
            });
        }
        let test_start = Instant::now();
        let tasks = build_tasks(batch, &self.seen, self.num_items(), &self.cfg, self.iteration)?;
        let with_conf = self.cfg.fuser_kind == FuserKind::Ael;
        let (models, memories, cfg) = (&self.models, &self.memories, &self.cfg);
        let outputs = self.pool.install(|| {
            models
                .par_iter()
                .zip(memories.par_iter())
                .map(|(m, mem)| test_one(m, mem, &tasks, cfg, with_conf))
                .collect::<Result<Vec<_>>>()
        })?;
        let fused = self.fuse_tasks(&outputs, &tasks)?;
        let wall_ms_test = elapsed_ms(test_start, self.cfg.timings);

        let mut model_sums = Vec::with_capacity(outputs.len());
        for (mem, out) in self.memories.iter_mut().zip(outputs) {
            if !out.records.is_empty() {
                mem.record_accuracies(&out.records)?;
            }
            model_sums.push(out.sums);
        }

        let train_start = Instant::now();
        self.absorb_and_train(batch)?;
        let wall_ms_train = elapsed_ms(train_start, self.cfg.timings);

        self.evaluated.merge(&fused);
        let record = MetricsRecord {
            iteration: self.prequential_iterations,
            n_seen: self.evaluated.count,
            fused,
            cumulative: self.evaluated,
            models: model_sums,
            wall_ms_test,
            wall_ms_train,
        };
        self.prequential_iterations += 1;
        Ok(record)
    }

    /// Test-then-train over the whole test split. Each finished record is
    /// passed to `sink` before the next iteration starts, so a failure
    /// keeps everything emitted so far.
    pub fn run_prequential_phase_with<F>(&mut self, stream: &[Interaction], mut sink: F) -> Result<()>
    where
        F: FnMut(&MetricsRecord) -> Result<()>,
    {
        let n = self.schedule.iterations(stream.len());
        for batch in self.schedule.batches(stream) {
            let r = self.step_prequential(batch)?;
            if (r.iteration + 1) % 10 == 0 || r.iteration + 1 == n {
                log::info!(
                    "iteration {}/{n}: HR@{k} {:.4} NDCG@{k} {:.4} (cumulative)",
                    r.iteration + 1,
                    r.cumulative.hr(),
                    r.cumulative.ndcg(),
                    k = self.cfg.top_k
                );
            }
            sink(&r)?;
        }
        Ok(())
    }

    pub fn run_prequential_phase(&mut self, stream: &[Interaction]) -> Result<Vec<MetricsRecord>> {
        let mut out = Vec::new();
        self.run_prequential_phase_with(stream, |r| {
            out.push(r.clone());
            Ok(())
        })?;
        Ok(out)
    }
}

/// A single model run through the same stream without any ensemble
/// machinery. Used as the reference the one-member ensemble must match.
pub fn run_monolithic<T: Scalar>(
    cfg: &ExperimentConfig,
    num_users: usize,
    num_items: usize,
    train: &[Interaction],
    test: &[Interaction],
) -> Result<Vec<MetricsRecord>> {
    cfg.validate()?;
    let dims = ModelDims::from_config(cfg, num_users, num_items);
    let mut model = Model::<T>::init(cfg.model_kind, dims, &mut substream(cfg.rng_seed, Purpose::Init, 0, 0))?;
    let mut adam = model.new_adam(cfg.learning_rate, cfg.l2_weight);
    let mut reservoir = Reservoir::new(cfg.reservoir_capacity)?;
    let mut seen = SeenIndex::with_users(num_users);
    let schedule = StreamSchedule::new(cfg.n_p, cfg.n_r)?;
    let sizes = minibatch_sizes(cfg.n_p, cfg.batch_size);
    let mut iteration = 0u64;
    let mut frontier = 0u64;
    let mut total = MetricSums::default();
    let mut records = Vec::new();

    let mut learn = |batch: &[Interaction],
                     model: &mut Model<T>,
                     adam: &mut AdamState<T>,
                     reservoir: &mut Reservoir,
                     seen: &mut SeenIndex,
                     iteration: &mut u64|
     -> Result<()> {
        reservoir.extend(batch)?;
        seen.record_all(batch);
        frontier = batch.last().map_or(frontier, |x| x.seq + 1);
        let ctx = SamplingContext::new(cfg, batch, reservoir, &sizes)?;
        train_one(model, adam, &ctx, seen, &sizes, frontier, 0, *iteration)?;
        *iteration += 1;
        Ok(())
    };

    for batch in schedule.batches(train) {
        learn(batch, &mut model, &mut adam, &mut reservoir, &mut seen, &mut iteration)?;
    }
    for (i, batch) in schedule.batches(test).enumerate() {
        let tasks = build_tasks(batch, &seen, num_items, cfg, iteration)?;
        let mut sums = MetricSums::default();
        for task in &tasks {
            let scores = model.score_items(task.target.user, &task.candidates)?;
            sums.add_rank(rank_target(&scores, 0), cfg.top_k);
        }
        learn(batch, &mut model, &mut adam, &mut reservoir, &mut seen, &mut iteration)?;
        total.merge(&sums);
        records.push(MetricsRecord {
            iteration: i,
            n_seen: total.count,
            fused: sums,
            cumulative: total,
            models: vec![sums],
            wall_ms_test: 0.0,
            wall_ms_train: 0.0,
        });
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelKind;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn stream(n: usize, users: u32, items: u32, seed: u64) -> Vec<Interaction> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut seen = std::collections::HashSet::new();
        let mut out = Vec::new();
        while out.len() < n {
            let u = rng.random_range(0..users);
            let v = rng.random_range(0..items);
            if seen.insert((u, v)) {
                let s = out.len() as u64;
                out.push(Interaction::new(u, v, s as i64, s));
            }
        }
        out
    }

    fn small_cfg() -> ExperimentConfig {
        ExperimentConfig {
            num_models: 2,
            model_kind: ModelKind::Gmf,
            embedding_dim: 4,
            mlp_layer_widths: vec![8, 4],
            batch_size: 32,
            n_p: 32,
            n_r: 32,
            reservoir_capacity: 200,
            eval_negatives: 20,
            learning_rate: 0.01,
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn rank_examples() {
        let scores = [0.9, 0.1, 0.5, 0.3];
        assert_eq!(rank_target(&scores, 0), 1);
        assert_eq!(rank_target(&scores, 1), 4);
        let scores = [0.5, 0.9, 0.8, 0.7, 0.1];
        assert_eq!(rank_target(&scores, 0), 4);
        // ties count against the target
        assert_eq!(rank_target(&[0.5, 0.5, 0.5], 0), 3);
        let lowest: Vec<f64> = (0..100).map(|i| i as f64).collect();
        assert_eq!(rank_target(&lowest, 0), 100);
    }

    #[test]
    fn metric_examples() {
        assert_eq!(hr_at_k(1, 10), 1.0);
        assert_eq!(ndcg_at_k(1, 10), 1.0);
        assert_eq!(hr_at_k(11, 10), 0.0);
        assert_eq!(ndcg_at_k(11, 10), 0.0);
        assert!((ndcg_at_k(2, 10) - 0.630_929_753_571_457_4).abs() < 1e-12);
        assert_eq!(hr_at_k(10, 10), 1.0);
    }

    #[test]
    fn task_candidates_are_unseen_and_distinct() {
        let mut seen = SeenIndex::with_users(2);
        for v in 0..150 {
            seen.record(0, v);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let target = Interaction::new(0, 170, 0, 0);
        for _ in 0..50 {
            let task = RankingTask::sample(target, &seen, 400, 99, &mut rng).unwrap();
            assert_eq!(task.candidates.len(), 100);
            assert_eq!(task.candidates[0], 170);
            let set: std::collections::HashSet<_> = task.candidates.iter().collect();
            assert_eq!(set.len(), 100);
            assert!(task.candidates[1..].iter().all(|&v| !seen.contains(0, v)));
        }
        // dense path: most items seen
        let task = RankingTask::sample(Interaction::new(0, 170, 0, 0), &seen, 260, 99, &mut rng).unwrap();
        assert_eq!(task.candidates.len(), 100);
        assert!(task.candidates[1..].iter().all(|&v| v >= 150 && v != 170));
        // pool smaller than requested
        let task = RankingTask::sample(Interaction::new(0, 170, 0, 0), &seen, 180, 99, &mut rng).unwrap();
        assert_eq!(task.candidates.len(), 30);
    }

    #[test]
    fn aggregate_examples() {
        assert!(aggregate(&[]).is_err());
        let mk = |hits, n, ndcg| MetricsRecord {
            iteration: 0,
            n_seen: n,
            fused: MetricSums { count: n, hits, ndcg },
            cumulative: MetricSums::default(),
            models: vec![MetricSums { count: n, hits, ndcg }],
            wall_ms_test: 0.0,
            wall_ms_train: 0.0,
        };
        let one = aggregate(&[mk(3, 4, 2.0)]).unwrap();
        assert_eq!((one.hr, one.ndcg), (0.75, 0.5));
        let perfect = aggregate(&[mk(5, 5, 5.0)]).unwrap();
        assert_eq!((perfect.hr, perfect.ndcg), (1.0, 1.0));
        let both = aggregate(&[mk(3, 4, 2.0), mk(1, 4, 1.0)]).unwrap();
        assert_eq!(both.hr, (0.75 + 0.25) / 2.0);
        assert_eq!(both.n_test, 8);
    }

    #[test]
    fn minibatch_split() {
        assert_eq!(minibatch_sizes(256, 256), vec![256]);
        assert_eq!(minibatch_sizes(600, 256), vec![256, 256, 88]);
        assert_eq!(minibatch_sizes(100, 256), vec![100]);
    }

    #[test]
    fn training_phase_fills_reservoir_and_seen() {
        let cfg = small_cfg();
        let s = stream(500, 20, 60, 1);
        let mut sys = System::<f64>::new(&cfg, 20, 60).unwrap();
        sys.run_training_phase(&s).unwrap();
        assert_eq!(sys.reservoir().len(), 200);
        assert_eq!(sys.reservoir().to_vec(), s[300..].to_vec());
        assert_eq!(sys.seen().len(), 500);
        assert!(s.iter().all(|x| sys.seen().contains(x.user, x.item)));
        assert_eq!(sys.iteration(), 500u64.div_ceil(32));
        assert!(sys.memories().iter().all(|m| m.is_empty()));
    }

    #[test]
    fn training_is_deterministic_across_worker_counts() {
        let s = stream(400, 20, 60, 2);
        let mut a = System::<f64>::new(&small_cfg(), 20, 60).unwrap();
        let mut b = System::<f64>::new(
            &ExperimentConfig {
                workers: 3,
                ..small_cfg()
            },
            20,
            60,
        )
        .unwrap();
        a.run_training_phase(&s).unwrap();
        b.run_training_phase(&s).unwrap();
        assert_eq!(a.models(), b.models());
    }

    #[test]
    fn prequential_iterations_and_conservation() {
        let s = stream(900, 30, 80, 3);
        for n_r in [16, 32, 100] {
            let cfg = ExperimentConfig { n_r, ..small_cfg() };
            let mut sys = System::<f64>::new(&cfg, 30, 80).unwrap();
            sys.run_training_phase(&s[..500]).unwrap();
            let recs = sys.run_prequential_phase(&s[500..]).unwrap();
            assert_eq!(recs.len(), 400usize.div_ceil(n_r));
            let sum = aggregate(&recs).unwrap();
            assert_eq!(sum.n_test, 400);
            assert_eq!(recs.last().unwrap().cumulative.count, 400);
            assert!(sys.memories().iter().all(|m| m.len() == recs.last().unwrap().fused.count));
            for r in &recs {
                assert!(r.fused.ndcg <= r.fused.hits as f64 + 1e-12);
                assert!(r.models.iter().all(|m| m.hr() <= 1.0 && m.ndcg() <= m.hr() + 1e-12));
            }
            let mean_hr = recs.iter().map(|r| r.fused.hits).sum::<usize>() as f64 / 400.0;
            assert_eq!(mean_hr, sum.hr);
        }
    }

    #[test]
    fn rejects_already_trained_data() {
        let s = stream(300, 20, 60, 4);
        let mut sys = System::<f64>::new(&small_cfg(), 20, 60).unwrap();
        sys.run_training_phase(&s).unwrap();
        assert!(matches!(sys.step_prequential(&s[250..]), Err(Error::Leakage { .. })));
    }

    #[test]
    fn every_fuser_and_sampler_runs() {
        let s = stream(700, 25, 70, 5);
        for sampler in [SamplerKind::Sts, SamplerKind::Ndo, SamplerKind::Rr, SamplerKind::Sw] {
            for fuser in [FuserKind::Ael, FuserKind::Avg, FuserKind::AdaW] {
                let cfg = ExperimentConfig {
                    sampler_kind: sampler,
                    fuser_kind: fuser,
                    n_r: 16,
                    ..small_cfg()
                };
                let mut sys = System::<f64>::new(&cfg, 25, 70).unwrap();
                sys.run_training_phase(&s[..500]).unwrap();
                let recs = sys.run_prequential_phase(&s[500..]).unwrap();
                assert_eq!(aggregate(&recs).unwrap().n_test, 200);
            }
        }
    }

    #[test]
    fn single_member_average_matches_monolithic() {
        let s = stream(1200, 40, 90, 6);
        for kind in [ModelKind::Gmf, ModelKind::NeuMf] {
            let cfg = ExperimentConfig {
                num_models: 1,
                fuser_kind: FuserKind::Avg,
                model_kind: kind,
                timings: false,
                ..small_cfg()
            };
            let mut sys = System::<f64>::new(&cfg, 40, 90).unwrap();
            sys.run_training_phase(&s[..800]).unwrap();
            let ens = sys.run_prequential_phase(&s[800..]).unwrap();
            let mono = run_monolithic::<f64>(&cfg, 40, 90, &s[..800], &s[800..]).unwrap();
            assert_eq!(ens, mono);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn rank_is_one_plus_not_lower(scores in proptest::collection::vec(0u8..20, 1..50), t in 0usize..50) {
            let t = t % scores.len();
            let r = rank_target(&scores, t);
            let brute = 1 + scores.iter().enumerate().filter(|&(i, &s)| i != t && s >= scores[t]).count();
            prop_assert_eq!(r, brute);
            prop_assert!(ndcg_at_k(r, 10) <= hr_at_k(r, 10));
        }

        #[test]
        fn conservation_for_any_speed(n_r in 1usize..120, seed in 0u64..1000) {
            let s = stream(260, 15, 60, seed);
            let cfg = ExperimentConfig { n_r, num_models: 1, ..small_cfg() };
            let mut sys = System::<f64>::new(&cfg, 15, 60).unwrap();
            sys.run_training_phase(&s[..200]).unwrap();
            let recs = sys.run_prequential_phase(&s[200..]).unwrap();
            prop_assert_eq!(aggregate(&recs).unwrap().n_test, 60);
        }
    }
}
