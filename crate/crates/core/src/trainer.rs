//! k-fold training with Adam, class-weighted cross-entropy and early
//! stopping on `shybrid_l`, plus pixel-level evaluation.
//!
//! A mini-batch is processed one tile at a time through a [`SampleMap`] and
//! the per-tile gradients are summed in tile order, so results do not depend
//! on how many threads the map uses.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::{
    kfold_split, materialize_batch, train_val, DayRole, DayStore, Grouping, Labels, TileSet, TileSpec, FIRE, NO_FIRE,
    TILE, WATER,
};
use crate::error::{Error, Result};
use crate::exec::SampleMap;
use crate::metrics::{confusion, ConfusionCounts, EsMetric, Scores};
use crate::tensor::{adam_step, weighted_ce_loss_normalized, AdamConfig, AdamState, Tensor};
use crate::unet::{predict_mask, UNetConfig, UNetParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FireBuffer {
    #[default]
    Off,
    /// Dilate training labels only.
    Train,
    /// Dilate training and validation labels.
    TrainVal,
}

impl FireBuffer {
    pub fn name(self) -> &'static str {
        match self {
            Self::Off => "off",
            Self::Train => "train",
            Self::TrainVal => "train+val",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "off" => Some(Self::Off),
            "train" => Some(Self::Train),
            "train+val" => Some(Self::TrainVal),
            _ => None,
        }
    }

    fn train_labels(self) -> Labels {
        match self {
            Self::Off => Labels::Original,
            _ => Labels::Buffered,
        }
    }

    fn val_labels(self) -> Labels {
        match self {
            Self::TrainVal => Labels::Buffered,
            _ => Labels::Original,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f32,
    pub max_epochs: usize,
    /// Epochs without strict improvement before stopping.
    pub patience: usize,
    pub folds: usize,
    pub grouping: Grouping,
    pub es_metric: EsMetric,
    /// No-fire tiles sampled per fire tile.
    pub tr: f64,
    pub fire_buffer: FireBuffer,
    pub buffer_radius: usize,
    pub init_features: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Fire-probability threshold for predictions.
    pub threshold: f64,
    /// Fixed `[w0, w1]`; inverse pixel frequencies of the training fold
    /// when `None`.
    pub class_weights: Option<[f32; 2]>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            max_epochs: 45,
            patience: 10,
            folds: 3,
            grouping: Grouping::ByTile,
            es_metric: EsMetric::Sh2,
            tr: 4.0,
            fire_buffer: FireBuffer::Off,
            buffer_radius: 1,
            init_features: 8,
            batch_size: 2,
            seed: 0,
            threshold: 0.5,
            class_weights: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: alloc::string::String| Err(Error::Config(m));
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be positive".into());
        }
        if self.patience == 0 || self.patience >= self.max_epochs {
            return bad(format!(
                "patience must lie in 1..max_epochs, got {} with max_epochs {}",
                self.patience, self.max_epochs
            ));
        }
        if self.folds < 2 {
            return bad(format!("folds must be at least 2, got {}", self.folds));
        }
        if !(self.tr.is_finite() && self.tr >= 0.0) {
            return bad(format!("tr must be a non-negative number, got {}", self.tr));
        }
        if self.init_features == 0 || self.batch_size == 0 {
            return bad("init_features and batch_size must be positive".into());
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return bad(format!("threshold must lie in (0, 1), got {}", self.threshold));
        }
        if let Some(w) = self.class_weights {
            if w.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
                return bad(format!("class weights must be positive, got {w:?}"));
            }
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }
}

/// Inverse pixel frequencies `w_c = N / (2 · N_c)` over non-water labels.
pub fn compute_class_weights<'a>(masks: impl IntoIterator<Item = &'a [u8]>) -> Result<[f32; 2]> {
    let mut n = [0u64; 2];
    for m in masks {
        for &l in m {
            match l {
                NO_FIRE => n[0] += 1,
                FIRE => n[1] += 1,
                _ => {}
            }
        }
    }
    if let Some(class) = n.iter().position(|&c| c == 0) {
        return Err(Error::ClassAbsent { class: class as u8 });
    }
    let total = (n[0] + n[1]) as f64;
    Ok([
        (total / (2.0 * n[0] as f64)) as f32,
        (total / (2.0 * n[1] as f64)) as f32,
    ])
}

/// Validation scores of one epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub counts: ConfusionCounts,
    pub scores: Scores,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub epoch: usize,
    pub params: UNetParams,
    pub counts: ConfusionCounts,
    pub scores: Scores,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FoldResult {
    pub fold: usize,
    pub best: Checkpoint,
    pub trace: Vec<EpochRecord>,
    pub class_weights: [f32; 2],
}

impl FoldResult {
    /// Last epoch that ran.
    pub fn stopped_after(&self) -> usize {
        self.trace.last().map_or(0, |r| r.epoch)
    }
}

/// The "not improved for `patience` epochs" rule. Improvement is a strict
/// increase; ties keep the earlier epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<(usize, f64)>,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            stale: 0,
        }
    }

    /// Feeds epoch `epoch`'s score; returns `(improved, stop)`.
    pub fn update(&mut self, epoch: usize, score: f64) -> (bool, bool) {
        let improved = self.best.is_none_or(|(_, b)| score > b);
        if improved {
            self.best = Some((epoch, score));
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        (improved, self.stale >= self.patience)
    }

    pub fn best(&self) -> Option<(usize, f64)> {
        self.best
    }
}

/// One epoch of training followed by validation.
pub trait EpochRunner {
    fn run_epoch(&mut self, epoch: usize) -> Result<EpochRecord>;
    fn snapshot(&self) -> UNetParams;
}

/// Runs epochs `1..=max_epochs` until early stopping fires and returns the
/// checkpoint of the best epoch together with the trace.
pub fn fit_with_early_stopping(
    runner: &mut impl EpochRunner,
    max_epochs: usize,
    patience: usize,
    metric: EsMetric,
) -> Result<(Checkpoint, Vec<EpochRecord>)> {
    let mut rule = EarlyStopping::new(patience);
    let mut trace = Vec::new();
    let mut best: Option<Checkpoint> = None;
    for epoch in 1..=max_epochs {
        let rec = runner.run_epoch(epoch)?;
        trace.push(rec);
        let (improved, stop) = rule.update(epoch, metric.of(&rec.scores));
        if improved {
            best = Some(Checkpoint {
                epoch,
                params: runner.snapshot(),
                counts: rec.counts,
                scores: rec.scores,
            });
        }
        if stop {
            break;
        }
    }
    let best = best.ok_or(Error::Config("max_epochs must be positive".into()))?;
    Ok((best, trace))
}

/// Labels of one tile, water past the raster edge.
fn tile_labels(spec: &TileSpec, store: &DayStore, labels: Labels) -> Result<Vec<u8>> {
    let mask = store.mask(&spec.day_id, labels)?;
    let mut out = vec![WATER; TILE * TILE];
    for r in 0..TILE {
        for c in 0..TILE {
            out[r * TILE + c] = mask.get(spec.row_off + r, spec.col_off + c);
        }
    }
    Ok(out)
}

/// Pixel confusion of `params` over `tiles`, pooled in tile order.
pub fn evaluate_tiles(
    params: &UNetParams,
    tiles: &[TileSpec],
    store: &DayStore,
    labels: Labels,
    threshold: f64,
    exec: &impl SampleMap,
) -> Result<ConfusionCounts> {
    let per_tile = exec.map(tiles.len(), |i| -> Result<ConfusionCounts> {
        let (x, truth) = materialize_batch(&tiles[i..i + 1], store, labels)?;
        let pred = predict_mask(&params.infer(&x)?, threshold)?;
        confusion(&pred, &truth)
    });
    per_tile.into_iter().sum::<Result<ConfusionCounts>>()
}

struct UNetRunner<'a, E> {
    params: UNetParams,
    adam: AdamState,
    adam_cfg: AdamConfig,
    train: &'a [TileSpec],
    val: &'a [TileSpec],
    store: &'a DayStore,
    cfg: &'a TrainConfig,
    fold: usize,
    weights: [f32; 2],
    exec: &'a E,
}

impl<E: SampleMap> UNetRunner<'_, E> {
    fn step(&mut self, batch: &[TileSpec]) -> Result<f64> {
        let labels = self.cfg.fire_buffer.train_labels();
        let (params, store, weights) = (&self.params, self.store, self.weights);
        let masks = batch
            .iter()
            .map(|s| tile_labels(s, store, labels))
            .collect::<Result<Vec<_>>>()?;
        let counted: usize = masks.iter().flatten().filter(|&&l| l != WATER).count();
        if counted == 0 {
            return Ok(0.0);
        }
        let per_sample = self.exec.map(batch.len(), |j| -> Result<(f64, Vec<Tensor>)> {
            let (x, _) = materialize_batch(&batch[j..j + 1], store, labels)?;
            let (logits, cache) = params.forward(&x, true)?;
            let loss = weighted_ce_loss_normalized(&logits, &masks[j], weights, counted)?;
            let grads = params.backward(&cache.expect("training forward keeps a cache"), &loss.grad)?;
            Ok((loss.loss, grads))
        });
        let mut total: Option<Vec<Tensor>> = None;
        let mut loss = 0.0;
        for r in per_sample {
            let (l, g) = r?;
            loss += l;
            match &mut total {
                None => total = Some(g),
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| a.add_assign(b)),
            }
        }
        let grads = total.expect("batch is non-empty");
        adam_step(self.params.tensors_mut(), &grads, &mut self.adam, &self.adam_cfg)?;
        Ok(loss)
    }
}

impl<E: SampleMap> EpochRunner for UNetRunner<'_, E> {
    fn run_epoch(&mut self, epoch: usize) -> Result<EpochRecord> {
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(((self.fold as u64) << 32) | epoch as u64);
        order.shuffle(&mut rng);
        let mut loss = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(self.cfg.batch_size) {
            let batch: Vec<TileSpec> = chunk.iter().map(|&i| self.train[i].clone()).collect();
            loss += self.step(&batch)?;
            batches += 1;
        }
        let counts = evaluate_tiles(
            &self.params,
            self.val,
            self.store,
            self.cfg.fire_buffer.val_labels(),
            self.cfg.threshold,
            self.exec,
        )?;
        let sens = counts
            .sensitivity()
            .ok_or(Error::UndefinedSensitivity { fold: self.fold })?;
        let spec = counts
            .specificity()
            .ok_or_else(|| Error::Config(format!("validation fold {} has no no-fire pixels", self.fold)))?;
        Ok(EpochRecord {
            epoch,
            train_loss: loss / batches.max(1) as f64,
            counts,
            scores: Scores::new(sens, spec),
        })
    }

    fn snapshot(&self) -> UNetParams {
        self.params.clone()
    }
}

/// Trains one fold from a fresh initialisation and keeps the best epoch.
///
/// When the config asks for a fire buffer, the store must already hold the
/// buffered masks of the training days ([`DayStore::buffer_days`]).
pub fn train_fold(
    fold: usize,
    train: &[TileSpec],
    val: &[TileSpec],
    store: &DayStore,
    cfg: &TrainConfig,
    exec: &impl SampleMap,
) -> Result<FoldResult> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Empty("train_fold"));
    }
    for s in train.iter().chain(val) {
        if store.role(&s.day_id)? == DayRole::Holdout {
            return Err(Error::HoldoutViolation { op: "train_fold" });
        }
    }
    let val_masks = val
        .iter()
        .map(|s| tile_labels(s, store, cfg.fire_buffer.val_labels()))
        .collect::<Result<Vec<_>>>()?;
    if !val_masks.iter().flatten().any(|&l| l == FIRE) {
        return Err(Error::UndefinedSensitivity { fold });
    }
    let weights = match cfg.class_weights {
        Some(w) => w,
        None => {
            let masks = train
                .iter()
                .map(|s| tile_labels(s, store, cfg.fire_buffer.train_labels()))
                .collect::<Result<Vec<_>>>()?;
            compute_class_weights(masks.iter().map(Vec::as_slice))?
        }
    };
    let in_channels = store.channels().ok_or(Error::Empty("train_fold store"))?;
    let net = UNetConfig::new(in_channels, cfg.init_features).with_seed(cfg.seed.wrapping_add(fold as u64));
    let params = UNetParams::init(net)?;
    let mut runner = UNetRunner {
        adam: AdamState::new(params.tensors()),
        params,
        adam_cfg: cfg.adam(),
        train,
        val,
        store,
        cfg,
        fold,
        weights,
        exec,
    };
    let (best, trace) = fit_with_early_stopping(&mut runner, cfg.max_epochs, cfg.patience, cfg.es_metric)?;
    Ok(FoldResult {
        fold,
        best,
        trace,
        class_weights: weights,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvResult {
    pub folds: Vec<FoldResult>,
    /// Arithmetic mean of the per-fold best-checkpoint scores.
    pub mean: Scores,
}

impl CvResult {
    /// The fold checkpoint with the highest `metric`, earliest fold on ties.
    pub fn best_checkpoint(&self, metric: EsMetric) -> &Checkpoint {
        let scores: Vec<f64> = self.folds.iter().map(|f| metric.of(&f.best.scores)).collect();
        let i = crate::metrics::select_best(&scores).unwrap_or(0);
        &self.folds[i].best
    }
}

/// Splits a sampled tile set into `cfg.folds` folds and trains each one with
/// the others as training data.
pub fn cross_validate(set: &TileSet, store: &DayStore, cfg: &TrainConfig, exec: &impl SampleMap) -> Result<CvResult> {
    cfg.validate()?;
    let folds = kfold_split(set, cfg.folds, cfg.seed, cfg.grouping)?;
    let mut results = Vec::with_capacity(folds.len());
    for i in 0..folds.len() {
        let (train, val) = train_val(&folds, i);
        results.push(train_fold(i, &train, &val, store, cfg, exec)?);
    }
    let scores: Vec<Scores> = results.iter().map(|f| f.best.scores).collect();
    Ok(CvResult {
        mean: Scores::mean(&scores).expect("at least two folds"),
        folds: results,
    })
}

/// Pooled pixel confusion over every land tile of every holdout day, on the
/// original labels.
pub fn evaluate_holdout(
    params: &UNetParams,
    store: &DayStore,
    threshold: f64,
    exec: &impl SampleMap,
) -> Result<ConfusionCounts> {
    let set = TileSet::holdout(store.days(DayRole::Holdout));
    if set.is_empty() {
        return Err(Error::Empty("evaluate_holdout"));
    }
    evaluate_tiles(params, &set.tiles, store, Labels::Original, threshold, exec)
}

/// Full-raster `H×W` prediction of one day, stitched from its tiles.
pub fn predict_day(
    params: &UNetParams,
    store: &DayStore,
    day_id: &str,
    threshold: f64,
    exec: &impl SampleMap,
) -> Result<Vec<u8>> {
    let day = store.get(day_id)?;
    let (h, w) = (day.height(), day.width());
    let tiles = crate::dataset::extract_tiles(day);
    let preds = exec.map(tiles.len(), |i| -> Result<Vec<u8>> {
        let (x, _) = materialize_batch(&tiles[i..i + 1], store, Labels::Original)?;
        predict_mask(&params.infer(&x)?, threshold)
    });
    let mut out = vec![0u8; h * w];
    for (t, p) in tiles.iter().zip(preds) {
        let p = p?;
        for r in 0..TILE.min(h - t.row_off) {
            for c in 0..TILE.min(w - t.col_off) {
                out[(t.row_off + r) * w + t.col_off + c] = p[r * TILE + c];
            }
        }
    }
    Ok(out)
}

/// Holdout confusion computed on stitched full-day rasters.
pub fn evaluate_holdout_stitched(
    params: &UNetParams,
    store: &DayStore,
    threshold: f64,
    exec: &impl SampleMap,
) -> Result<ConfusionCounts> {
    let mut total = ConfusionCounts::default();
    for day in store.days(DayRole::Holdout) {
        let pred = predict_day(params, store, day.day_id(), threshold, exec)?;
        total += confusion(&pred, day.mask().labels())?;
    }
    Ok(total)
}
