//! Embedding-based individual recommenders: GMF, MLP and NeuMF.
//!
//! All three score a user-item pair with a sigmoid output and train on
//! binary cross-entropy with Adam. NeuMF concatenates a GMF branch
//! (elementwise product of its own embeddings) with the last hidden layer
//! of an MLP tower (over a second, separate pair of embeddings) before its
//! output layer.
//!
//! Parameter groups are always enumerated in declaration order: GMF user
//! and item tables, MLP user and item tables, then each hidden layer's
//! weight and bias, then the output weight and bias. Absent groups are
//! skipped. Checkpoints and gradient vectors use the same order.

mod adam;
mod checkpoint;
mod layers;

use std::collections::HashMap;

use rand::Rng;

pub use adam::{AdamState, BETA1, BETA2, EPSILON};
pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use layers::{Dense, Embedding};

use crate::config::{ExperimentConfig, ModelKind};
use crate::domain::{ItemId, UserId};
use crate::error::{Error, Result};
use crate::sampling::Example;
use crate::scalar::{dot, sigmoid, Scalar};

/// Standard deviation of the embedding initializer (variance 0.25).
pub const EMBEDDING_INIT_STD: f64 = 0.5;
/// Predictions are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` inside the loss.
pub const PROB_CLAMP: f64 = 1e-7;
/// Gradients are rescaled to this global L2 norm when it is exceeded.
pub const GRAD_CLIP_NORM: f64 = 5.0;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelDims {
    pub num_users: usize,
    pub num_items: usize,
    pub embedding_dim: usize,
    /// MLP tower widths, starting with the input width `2 * embedding_dim`.
    pub mlp_layer_widths: Vec<usize>,
}

impl ModelDims {
    pub fn from_config(cfg: &ExperimentConfig, num_users: usize, num_items: usize) -> Self {
        ModelDims {
            num_users,
            num_items,
            embedding_dim: cfg.embedding_dim,
            mlp_layer_widths: cfg.mlp_layer_widths.clone(),
        }
    }

    fn validate(&self, kind: ModelKind) -> Result<()> {
        for (name, v) in [
            ("num_users", self.num_users),
            ("num_items", self.num_items),
            ("embedding_dim", self.embedding_dim),
        ] {
            if v == 0 {
                return Err(Error::invalid(name, "must be positive"));
            }
        }
        if kind != ModelKind::Gmf {
            let w = &self.mlp_layer_widths;
            if w.len() < 2 || w.contains(&0) {
                return Err(Error::invalid(
                    "mlp_layer_widths",
                    "needs at least two positive widths",
                ));
            }
            if w[0] != 2 * self.embedding_dim {
                return Err(Error::invalid(
                    "mlp_layer_widths",
                    format!("first width must equal 2 * embedding_dim = {}", 2 * self.embedding_dim),
                ));
            }
        }
        Ok(())
    }
}

const GMF_USER: usize = 0;
const GMF_ITEM: usize = 1;

/// One individual recommender.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    kind: ModelKind,
    dims: ModelDims,
    /// Present embedding tables in declaration order.
    tables: Vec<Embedding<T>>,
    /// Index of the MLP user table in `tables` (item table follows).
    mlp_tables: Option<usize>,
    hidden: Vec<Dense<T>>,
    output: Dense<T>,
}

/// Row-sparse gradient of one embedding table.
#[derive(Debug, Clone, Default)]
pub struct SparseRows<T> {
    dim: usize,
    index: HashMap<usize, usize>,
    rows: Vec<usize>,
    values: Vec<T>,
}

impl<T: Scalar> SparseRows<T> {
    fn new(dim: usize) -> Self {
        SparseRows {
            dim,
            index: HashMap::new(),
            rows: Vec::new(),
            values: Vec::new(),
        }
    }

    fn row_mut(&mut self, row: usize) -> &mut [T] {
        let slot = match self.index.get(&row) {
            Some(&s) => s,
            None => {
                let s = self.rows.len();
                self.index.insert(row, s);
                self.rows.push(row);
                self.values.extend(std::iter::repeat_n(T::zero(), self.dim));
                s
            }
        };
        &mut self.values[slot * self.dim..(slot + 1) * self.dim]
    }

    /// Touched rows, in first-touch order.
    pub fn rows(&self) -> &[usize] {
        &self.rows
    }

    pub fn row(&self, slot: usize) -> &[T] {
        &self.values[slot * self.dim..(slot + 1) * self.dim]
    }
}

/// Gradient of the mean batch loss (plus L2) for every parameter group.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    pub embeddings: Vec<SparseRows<T>>,
    pub dense: Vec<Vec<T>>,
    /// Mean loss of the batch at the current parameters.
    pub loss: T,
}

impl<T: Scalar> Gradients<T> {
    pub fn norm(&self) -> T {
        let sq = self
            .embeddings
            .iter()
            .flat_map(|e| e.values.iter())
            .chain(self.dense.iter().flatten())
            .fold(T::zero(), |acc, &g| acc + g * g);
        sq.sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.loss.is_finite()
            && self
                .embeddings
                .iter()
                .flat_map(|e| e.values.iter())
                .chain(self.dense.iter().flatten())
                .all(|g| g.is_finite())
    }

    /// Expands to one dense vector per parameter group (model order).
    pub fn to_dense(&self, model: &Model<T>) -> Vec<Vec<T>> {
        let mut out: Vec<Vec<T>> = model
            .tables
            .iter()
            .zip(&self.embeddings)
            .map(|(table, sparse)| {
                let mut full = vec![T::zero(); table.rows() * table.dim()];
                for (slot, &row) in sparse.rows.iter().enumerate() {
                    full[row * table.dim()..(row + 1) * table.dim()].copy_from_slice(sparse.row(slot));
                }
                full
            })
            .collect();
        out.extend(self.dense.iter().cloned());
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats<T> {
    /// Mean loss (BCE plus L2 penalty) before the update.
    pub loss: T,
    /// Global gradient norm before clipping.
    pub grad_norm: T,
}

/// Intermediate activations of one forward pass.
#[derive(Debug, Clone)]
struct Scratch<T> {
    /// Activations: input `[p; q]` of the MLP, then each hidden output.
    acts: Vec<Vec<T>>,
    /// Pre-activations of the hidden layers.
    pre: Vec<Vec<T>>,
    feature: Vec<T>,
    dfeature: Vec<T>,
    dacts: Vec<Vec<T>>,
}

impl<T: Scalar> Scratch<T> {
    fn new(model: &Model<T>) -> Self {
        let mut acts = Vec::new();
        let mut pre = Vec::new();
        if model.mlp_tables.is_some() {
            acts.push(vec![T::zero(); model.dims.mlp_layer_widths[0]]);
            for layer in &model.hidden {
                acts.push(vec![T::zero(); layer.fan_out()]);
                pre.push(vec![T::zero(); layer.fan_out()]);
            }
        }
        let width = model.output.fan_in();
        Scratch {
            dacts: acts.clone(),
            acts,
            pre,
            feature: vec![T::zero(); width],
            dfeature: vec![T::zero(); width],
        }
    }
}

impl<T: Scalar> Model<T> {
    /// Creates a model with embeddings ~ N(0, 0.25), Glorot-uniform hidden
    /// layers, a LeCun-normal output layer and zero biases.
    pub fn init<R: Rng + ?Sized>(kind: ModelKind, dims: ModelDims, rng: &mut R) -> Result<Self> {
        Self::build(kind, dims, Some(rng))
    }

    /// Same structure as [`Model::init`] with every parameter zero.
    pub fn zeros(kind: ModelKind, dims: ModelDims) -> Result<Self> {
        Self::build::<rand_chacha::ChaCha8Rng>(kind, dims, None)
    }

    fn build<R: Rng + ?Sized>(kind: ModelKind, dims: ModelDims, mut rng: Option<&mut R>) -> Result<Self> {
        dims.validate(kind)?;
        let d = dims.embedding_dim;
        let mut table = |rows: usize| match rng.as_deref_mut() {
            Some(r) => Embedding::gaussian(rows, d, EMBEDDING_INIT_STD, r),
            None => Embedding::zeros(rows, d),
        };
        let mut tables = Vec::new();
        if kind != ModelKind::Mlp {
            tables.push(table(dims.num_users));
            tables.push(table(dims.num_items));
        }
        let mlp_tables = if kind != ModelKind::Gmf {
            tables.push(table(dims.num_users));
            tables.push(table(dims.num_items));
            Some(tables.len() - 2)
        } else {
            None
        };
        let mut hidden = Vec::new();
        let mut out_width = 0;
        if kind != ModelKind::Mlp {
            out_width += d;
        }
        if kind != ModelKind::Gmf {
            for w in dims.mlp_layer_widths.windows(2) {
                hidden.push(match rng.as_deref_mut() {
                    Some(r) => Dense::glorot_uniform(w[0], w[1], r),
                    None => Dense::zeros(w[0], w[1]),
                });
            }
            out_width += *dims.mlp_layer_widths.last().expect("validated widths");
        }
        let output = match rng.as_deref_mut() {
            Some(r) => Dense::lecun_normal(out_width, 1, r),
            None => Dense::zeros(out_width, 1),
        };
        Ok(Model {
            kind,
            dims,
            tables,
            mlp_tables,
            hidden,
            output,
        })
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn dims(&self) -> &ModelDims {
        &self.dims
    }

    pub fn hidden_layers(&self) -> &[Dense<T>] {
        &self.hidden
    }

    pub fn output_layer(&self) -> &Dense<T> {
        &self.output
    }

    pub fn output_layer_mut(&mut self) -> &mut Dense<T> {
        &mut self.output
    }

    pub fn tables(&self) -> &[Embedding<T>] {
        &self.tables
    }

    pub fn new_adam(&self, learning_rate: f64, l2_weight: f64) -> AdamState<T> {
        let sizes: Vec<usize> = self.param_groups().iter().map(|(_, p)| p.len()).collect();
        AdamState::new(learning_rate, l2_weight, &sizes)
    }

    /// Embedding tables used for similarity: GMF branch when present.
    fn similarity_tables(&self) -> (usize, usize) {
        if self.kind == ModelKind::Mlp {
            let m = self.mlp_tables.expect("MLP has tables");
            (m, m + 1)
        } else {
            (GMF_USER, GMF_ITEM)
        }
    }

    fn check_ids(&self, u: UserId, v: ItemId) -> Result<()> {
        if u as usize >= self.dims.num_users {
            return Err(Error::OutOfRange {
                what: "user",
                index: u as usize,
                len: self.dims.num_users,
            });
        }
        if v as usize >= self.dims.num_items {
            return Err(Error::OutOfRange {
                what: "item",
                index: v as usize,
                len: self.dims.num_items,
            });
        }
        Ok(())
    }

    pub fn user_embedding(&self, u: UserId) -> &[T] {
        self.tables[self.similarity_tables().0].row(u as usize)
    }

    pub fn item_embedding(&self, v: ItemId) -> &[T] {
        self.tables[self.similarity_tables().1].row(v as usize)
    }

    /// `[p_u; q_v]`, from the GMF tables for GMF and NeuMF.
    pub fn embedding_of(&self, u: UserId, v: ItemId) -> Result<Vec<T>> {
        self.check_ids(u, v)?;
        let mut out = Vec::with_capacity(2 * self.dims.embedding_dim);
        out.extend_from_slice(self.user_embedding(u));
        out.extend_from_slice(self.item_embedding(v));
        Ok(out)
    }

    /// Fills `scratch` and returns the output logit.
    fn forward(&self, u: usize, v: usize, s: &mut Scratch<T>) -> T {
        let d = self.dims.embedding_dim;
        let mut offset = 0;
        if self.kind != ModelKind::Mlp {
            let p = self.tables[GMF_USER].row(u);
            let q = self.tables[GMF_ITEM].row(v);
            for i in 0..d {
                s.feature[i] = p[i] * q[i];
            }
            offset = d;
        }
        if let Some(m) = self.mlp_tables {
            s.acts[0][..d].copy_from_slice(self.tables[m].row(u));
            s.acts[0][d..].copy_from_slice(self.tables[m + 1].row(v));
            for (l, layer) in self.hidden.iter().enumerate() {
                let (before, after) = s.acts.split_at_mut(l + 1);
                layer.forward_into(&before[l], &mut s.pre[l]);
                for (a, &z) in after[0].iter_mut().zip(&s.pre[l]) {
                    *a = if z > T::zero() { z } else { T::zero() };
                }
            }
            let last = s.acts.last().expect("input activation");
            s.feature[offset..].copy_from_slice(last);
        }
        dot(&self.output.weight, &s.feature) + self.output.bias[0]
    }

    /// Accumulates gradients of one example given `dlogit`.
    fn backward(&self, u: usize, v: usize, s: &mut Scratch<T>, dlogit: T, g: &mut Gradients<T>) {
        let d = self.dims.embedding_dim;
        let n_hidden = self.hidden.len();
        let out_w = 2 * n_hidden;
        for (gw, &f) in g.dense[out_w].iter_mut().zip(&s.feature) {
            *gw = *gw + dlogit * f;
        }
        g.dense[out_w + 1][0] = g.dense[out_w + 1][0] + dlogit;
        for (df, &w) in s.dfeature.iter_mut().zip(&self.output.weight) {
            *df = dlogit * w;
        }

        let mut offset = 0;
        if self.kind != ModelKind::Mlp {
            let p = self.tables[GMF_USER].row(u);
            let q = self.tables[GMF_ITEM].row(v);
            let gp = g.embeddings[GMF_USER].row_mut(u);
            for i in 0..d {
                gp[i] = gp[i] + s.dfeature[i] * q[i];
            }
            let gq = g.embeddings[GMF_ITEM].row_mut(v);
            for i in 0..d {
                gq[i] = gq[i] + s.dfeature[i] * p[i];
            }
            offset = d;
        }
        if let Some(m) = self.mlp_tables {
            let top = s.dacts.len() - 1;
            s.dacts[top].copy_from_slice(&s.dfeature[offset..]);
            for l in (0..n_hidden).rev() {
                let layer = &self.hidden[l];
                // dz = dh ⊙ relu'(z), stored in place of dacts[l + 1]
                for (dh, &z) in s.dacts[l + 1].iter_mut().zip(&s.pre[l]) {
                    if z <= T::zero() {
                        *dh = T::zero();
                    }
                }
                let (lower, upper) = s.dacts.split_at_mut(l + 1);
                let dz = &upper[0];
                let x = &s.acts[l];
                let gw = &mut g.dense[2 * l];
                for (o, &dzo) in dz.iter().enumerate() {
                    if dzo == T::zero() {
                        continue;
                    }
                    let row = &mut gw[o * layer.fan_in()..(o + 1) * layer.fan_in()];
                    for (gwi, &xi) in row.iter_mut().zip(x) {
                        *gwi = *gwi + dzo * xi;
                    }
                }
                let gb = &mut g.dense[2 * l + 1];
                for (gbo, &dzo) in gb.iter_mut().zip(dz.iter()) {
                    *gbo = *gbo + dzo;
                }
                let dx = &mut lower[l];
                dx.iter_mut().for_each(|e| *e = T::zero());
                for (o, &dzo) in dz.iter().enumerate() {
                    if dzo == T::zero() {
                        continue;
                    }
                    let row = &layer.weight[o * layer.fan_in()..(o + 1) * layer.fan_in()];
                    for (dxi, &w) in dx.iter_mut().zip(row) {
                        *dxi = *dxi + dzo * w;
                    }
                }
            }
            let gp = g.embeddings[m].row_mut(u);
            for i in 0..d {
                gp[i] = gp[i] + s.dacts[0][i];
            }
            let gq = g.embeddings[m + 1].row_mut(v);
            for i in 0..d {
                gq[i] = gq[i] + s.dacts[0][d + i];
            }
        }
    }

    /// Probability of an interaction between `u` and `v`.
    pub fn predict(&self, u: UserId, v: ItemId) -> Result<T> {
        self.check_ids(u, v)?;
        let mut s = Scratch::new(self);
        Ok(sigmoid(self.forward(u as usize, v as usize, &mut s)))
    }

    /// Scores every item in `items` for user `u`.
    pub fn score_items(&self, u: UserId, items: &[ItemId]) -> Result<Vec<T>> {
        let mut s = Scratch::new(self);
        items
            .iter()
            .map(|&v| {
                self.check_ids(u, v)?;
                Ok(sigmoid(self.forward(u as usize, v as usize, &mut s)))
            })
            .collect()
    }

    fn touched_rows(&self, batch: &[Example]) -> Vec<Vec<usize>> {
        let mut touched: Vec<Vec<usize>> = vec![Vec::new(); self.tables.len()];
        let mut seen: Vec<std::collections::HashSet<usize>> = vec![Default::default(); self.tables.len()];
        for e in batch {
            for (t, id) in self.table_ids(e.user as usize, e.item as usize) {
                if seen[t].insert(id) {
                    touched[t].push(id);
                }
            }
        }
        touched
    }

    fn table_ids(&self, u: usize, v: usize) -> impl Iterator<Item = (usize, usize)> {
        (0..self.tables.len()).map(move |t| (t, if t % 2 == 0 { u } else { v }))
    }

    /// `(l2 / 2) * ||theta||^2` over dense parameters and the embedding rows
    /// the batch touches.
    fn l2_penalty(&self, touched: &[Vec<usize>], l2: T) -> T {
        if l2 == T::zero() {
            return T::zero();
        }
        let mut sq = T::zero();
        for (table, rows) in self.tables.iter().zip(touched) {
            for &r in rows {
                sq = sq + dot(table.row(r), table.row(r));
            }
        }
        for layer in self.hidden.iter().chain(std::iter::once(&self.output)) {
            sq = sq + dot(&layer.weight, &layer.weight) + dot(&layer.bias, &layer.bias);
        }
        l2 * sq / T::lit(2.0)
    }

    /// Mean binary cross-entropy of `batch` plus the L2 penalty.
    pub fn loss(&self, batch: &[Example], l2: T) -> Result<T> {
        if batch.is_empty() {
            return Err(Error::Empty("training batch".to_string()));
        }
        let mut s = Scratch::new(self);
        let mut total = T::zero();
        for e in batch {
            self.check_ids(e.user, e.item)?;
            let y_hat = sigmoid(self.forward(e.user as usize, e.item as usize, &mut s));
            total = total + bce_loss(e.label_value(), y_hat);
        }
        let n = T::from_usize(batch.len()).expect("batch size fits");
        Ok(total / n + self.l2_penalty(&self.touched_rows(batch), l2))
    }

    /// Gradient of [`Model::loss`] (before clipping).
    pub fn gradients(&self, batch: &[Example], l2: T) -> Result<Gradients<T>> {
        if batch.is_empty() {
            return Err(Error::Empty("training batch".to_string()));
        }
        let mut g = Gradients {
            embeddings: self.tables.iter().map(|t| SparseRows::new(t.dim())).collect(),
            dense: self
                .hidden
                .iter()
                .chain(std::iter::once(&self.output))
                .flat_map(|l| [vec![T::zero(); l.weight.len()], vec![T::zero(); l.bias.len()]])
                .collect(),
            loss: T::zero(),
        };
        let n = T::from_usize(batch.len()).expect("batch size fits");
        let mut s = Scratch::new(self);
        let mut total = T::zero();
        for e in batch {
            self.check_ids(e.user, e.item)?;
            let (u, v) = (e.user as usize, e.item as usize);
            let logit = self.forward(u, v, &mut s);
            let y_hat = sigmoid(logit);
            let y = e.label_value();
            total = total + bce_loss(y, y_hat);
            self.backward(u, v, &mut s, (y_hat - y) / n, &mut g);
        }
        let touched = self.touched_rows(batch);
        g.loss = total / n + self.l2_penalty(&touched, l2);
        if l2 != T::zero() {
            for (t, rows) in touched.iter().enumerate() {
                for &r in rows {
                    let theta = self.tables[t].row(r);
                    let gr = g.embeddings[t].row_mut(r);
                    for (gi, &th) in gr.iter_mut().zip(theta) {
                        *gi = *gi + l2 * th;
                    }
                }
            }
            for (i, layer) in self.hidden.iter().chain(std::iter::once(&self.output)).enumerate() {
                for (gi, &th) in g.dense[2 * i].iter_mut().zip(&layer.weight) {
                    *gi = *gi + l2 * th;
                }
                for (gi, &th) in g.dense[2 * i + 1].iter_mut().zip(&layer.bias) {
                    *gi = *gi + l2 * th;
                }
            }
        }
        Ok(g)
    }

    /// Applies precomputed gradients with Adam, clipping to
    /// [`GRAD_CLIP_NORM`]. Only touched embedding rows move.
    pub fn apply_gradients(&mut self, adam: &mut AdamState<T>, g: &Gradients<T>) -> Result<T> {
        if !g.is_finite() {
            return Err(Error::NonFiniteGradient {
                norms: self.norm_report(),
            });
        }
        let norm = g.norm();
        let clip = T::lit(GRAD_CLIP_NORM);
        let scale = if norm > clip { clip / norm } else { T::one() };
        let corrections = adam.begin_step();
        let n_tables = self.tables.len();
        for (t, sparse) in g.embeddings.iter().enumerate() {
            let dim = self.tables[t].dim();
            for (slot, &row) in sparse.rows.iter().enumerate() {
                adam.update_slice(t, row * dim, self.tables[t].row_mut(row), sparse.row(slot), corrections, scale);
            }
        }
        let layers = self.hidden.iter_mut().chain(std::iter::once(&mut self.output));
        for (i, layer) in layers.enumerate() {
            let group = n_tables + 2 * i;
            adam.update_slice(group, 0, &mut layer.weight, &g.dense[2 * i], corrections, scale);
            adam.update_slice(group + 1, 0, &mut layer.bias, &g.dense[2 * i + 1], corrections, scale);
        }
        Ok(norm)
    }

    /// One Adam step on the mean batch loss. Returns the loss before the
    /// step.
    pub fn train_step(&mut self, adam: &mut AdamState<T>, batch: &[Example]) -> Result<StepStats<T>> {
        let g = self.gradients(batch, adam.l2_weight)?;
        let grad_norm = self.apply_gradients(adam, &g)?;
        Ok(StepStats {
            loss: g.loss,
            grad_norm,
        })
    }

    /// Named parameter groups in declaration order.
    pub fn param_groups(&self) -> Vec<(String, &[T])> {
        let mut out: Vec<(String, &[T])> = Vec::new();
        for (t, table) in self.tables.iter().enumerate() {
            out.push((self.table_name(t), table.values()));
        }
        for (l, layer) in self.hidden.iter().enumerate() {
            out.push((format!("hidden{l}.weight"), &layer.weight));
            out.push((format!("hidden{l}.bias"), &layer.bias));
        }
        out.push(("output.weight".into(), &self.output.weight));
        out.push(("output.bias".into(), &self.output.bias));
        out
    }

    pub fn param_groups_mut(&mut self) -> Vec<&mut [T]> {
        let mut out: Vec<&mut [T]> = self.tables.iter_mut().map(|t| t.data.as_mut_slice()).collect();
        for layer in self.hidden.iter_mut().chain(std::iter::once(&mut self.output)) {
            out.push(&mut layer.weight);
            out.push(&mut layer.bias);
        }
        out
    }

    fn table_name(&self, t: usize) -> String {
        let branch = match (self.kind, self.mlp_tables) {
            (ModelKind::Gmf, _) => "gmf",
            (_, Some(m)) if t >= m => "mlp",
            _ => "gmf",
        };
        let side = if t % 2 == 0 { "user" } else { "item" };
        format!("{branch}.{side}_embedding")
    }

    fn norm_report(&self) -> String {
        self.param_groups()
            .iter()
            .map(|(name, p)| format!("{name}={:.4e}", dot(p, p).sqrt().as_f64()))
            .collect::<Vec<_>>()
            .join(", ")
    }

    pub fn num_params(&self) -> usize {
        self.param_groups().iter().map(|(_, p)| p.len()).sum()
    }
}

/// Binary cross-entropy with the prediction clamped away from 0 and 1.
pub fn bce_loss<T: Scalar>(y: T, y_hat: T) -> T {
    let eps = T::lit(PROB_CLAMP);
    let p = y_hat.max(eps).min(T::one() - eps);
    -(y * p.ln() + (T::one() - y) * (T::one() - p).ln())
}
