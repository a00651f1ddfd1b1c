//! Per-day rasters to training tiles.
//!
//! A raw [`GridDay`] is min-max scaled ([`fit_scaling`], [`apply_scaling`]),
//! its categorical channels are one-hot expanded ([`encode_day`]), and it is
//! cut into non-overlapping 32×32 tiles ([`extract_tiles`]). Train-validation
//! tiles are subsampled ([`sample_tileset`]), fire labels may be dilated
//! ([`apply_fire_buffer`]) and the result is split into folds
//! ([`kfold_split`]). Holdout tiles skip sampling and augmentation; the
//! [`Provenance`] and [`DayRole`] tags enforce that.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use crate::unet::TILE;

pub const NO_FIRE: u8 = 0;
pub const FIRE: u8 = 1;
/// Water or otherwise invalid; ignored by the loss and the metrics.
pub const WATER: u8 = crate::tensor::IGNORE;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ChannelKind {
    Numeric,
    /// Raw values are category indices `0..categories.len()`.
    Categorical {
        categories: Vec<String>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Channel {
    pub name: String,
    pub kind: ChannelKind,
}

impl Channel {
    pub fn numeric(name: &str) -> Self {
        Self {
            name: name.into(),
            kind: ChannelKind::Numeric,
        }
    }

    pub fn categorical(name: &str, categories: &[&str]) -> Self {
        Self {
            name: name.into(),
            kind: ChannelKind::Categorical {
                categories: categories.iter().map(|c| c.to_string()).collect(),
            },
        }
    }

    /// Number of model input channels this raw channel expands to.
    pub fn width(&self) -> usize {
        match &self.kind {
            ChannelKind::Numeric => 1,
            ChannelKind::Categorical { categories } => categories.len(),
        }
    }
}

/// Ordered description of the raw channels of every day.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureSchema {
    channels: Vec<Channel>,
}

impl FeatureSchema {
    pub fn new(channels: Vec<Channel>) -> Result<Self> {
        if channels.is_empty() {
            return Err(Error::Empty("FeatureSchema"));
        }
        let mut seen = BTreeSet::new();
        for c in &channels {
            if !seen.insert(c.name.as_str()) {
                return Err(Error::Config(format!("duplicate channel name `{}`", c.name)));
            }
            if c.width() == 0 {
                return Err(Error::Config(format!(
                    "categorical channel `{}` has no categories",
                    c.name
                )));
            }
        }
        Ok(Self { channels })
    }

    pub fn channels(&self) -> &[Channel] {
        &self.channels
    }

    pub fn raw_channels(&self) -> usize {
        self.channels.len()
    }

    /// Channel count after one-hot expansion; the network's `in_channels`.
    pub fn encoded_channels(&self) -> usize {
        self.channels.iter().map(Channel::width).sum()
    }

    /// Names of the encoded channels, categories as `name=category`.
    pub fn encoded_names(&self) -> Vec<String> {
        let mut out = Vec::with_capacity(self.encoded_channels());
        for c in &self.channels {
            match &c.kind {
                ChannelKind::Numeric => out.push(c.name.clone()),
                ChannelKind::Categorical { categories } => {
                    out.extend(categories.iter().map(|k| format!("{}={k}", c.name)))
                }
            }
        }
        out
    }
}

/// Per-pixel labels: [`NO_FIRE`], [`FIRE`] or [`WATER`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    h: usize,
    w: usize,
    labels: Vec<u8>,
}

impl Mask {
    pub fn new(h: usize, w: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != h * w {
            return Err(Error::Dimension {
                op: "Mask::new",
                axis: "pixels",
                expected: h * w,
                actual: labels.len(),
            });
        }
        if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l > WATER) {
            return Err(Error::InvalidLabel { index, label });
        }
        Ok(Self { h, w, labels })
    }

    pub fn filled(h: usize, w: usize, label: u8) -> Self {
        assert!(label <= WATER);
        Self {
            h,
            w,
            labels: vec![label; h * w],
        }
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    /// Label at `(r, c)`; outside the raster reads as water.
    pub fn get(&self, r: usize, c: usize) -> u8 {
        if r < self.h && c < self.w {
            self.labels[r * self.w + c]
        } else {
            WATER
        }
    }

    pub fn count(&self, label: u8) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }
}

/// One day's feature stack `[C, H, W]` and its label mask.
#[derive(Debug, Clone, PartialEq)]
pub struct GridDay {
    day_id: String,
    features: Tensor,
    mask: Mask,
}

impl GridDay {
    pub fn new(day_id: impl Into<String>, features: Tensor, mask: Mask) -> Result<Self> {
        let &[_, h, w] = features.shape() else {
            return Err(Error::Shape {
                op: "GridDay::new",
                shape: features.shape().to_vec(),
                reason: "features must be [C, H, W]",
            });
        };
        if (h, w) != (mask.h, mask.w) {
            let axis = if h != mask.h { "H" } else { "W" };
            return Err(Error::Dimension {
                op: "GridDay::new",
                axis,
                expected: if h != mask.h { h } else { w },
                actual: if h != mask.h { mask.h } else { mask.w },
            });
        }
        Ok(Self {
            day_id: day_id.into(),
            features,
            mask,
        })
    }

    pub fn day_id(&self) -> &str {
        &self.day_id
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn mask(&self) -> &Mask {
        &self.mask
    }

    pub fn channels(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.mask.h
    }

    pub fn width(&self) -> usize {
        self.mask.w
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let plane = self.height() * self.width();
        &self.features.data()[c * plane..(c + 1) * plane]
    }

    pub fn into_parts(self) -> (String, Tensor, Mask) {
        (self.day_id, self.features, self.mask)
    }
}

/// Observed range of one numeric channel.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelRange {
    pub channel: usize,
    pub name: String,
    pub min: f32,
    pub max: f32,
}

impl ChannelRange {
    pub fn is_constant(&self) -> bool {
        self.min == self.max
    }
}

/// Min-max parameters of every numeric channel, in schema order.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalingParams {
    pub ranges: Vec<ChannelRange>,
}

impl ScalingParams {
    /// Names of channels that never varied on the fitting set.
    pub fn constant_channels(&self) -> Vec<&str> {
        self.ranges
            .iter()
            .filter(|r| r.is_constant())
            .map(|r| r.name.as_str())
            .collect()
    }
}

fn check_channels(op: &'static str, day: &GridDay, expected: usize) -> Result<()> {
    if day.channels() != expected {
        return Err(Error::Dimension {
            op,
            axis: "channels",
            expected,
            actual: day.channels(),
        });
    }
    Ok(())
}

/// Per-channel min and max over the non-water pixels of the fitting days.
///
/// Must only ever see train-validation days.
pub fn fit_scaling(days: &[GridDay], schema: &FeatureSchema) -> Result<ScalingParams> {
    if days.is_empty() {
        return Err(Error::Empty("fit_scaling"));
    }
    for d in days {
        check_channels("fit_scaling", d, schema.raw_channels())?;
    }
    let mut ranges = Vec::new();
    for (c, ch) in schema.channels().iter().enumerate() {
        if ch.kind != ChannelKind::Numeric {
            continue;
        }
        let mut lo = f32::INFINITY;
        let mut hi = f32::NEG_INFINITY;
        for d in days {
            for (&v, &l) in d.channel(c).iter().zip(d.mask.labels()) {
                if l != WATER {
                    lo = lo.min(v);
                    hi = hi.max(v);
                }
            }
        }
        if lo > hi {
            return Err(Error::Empty("fit_scaling (no land pixels)"));
        }
        ranges.push(ChannelRange {
            channel: c,
            name: ch.name.clone(),
            min: lo,
            max: hi,
        });
    }
    Ok(ScalingParams { ranges })
}

/// Maps `x` to `(x - min) / (max - min)` clamped to `[0, 1]`; constant
/// channels map to 0.
pub fn scale_value(x: f32, r: &ChannelRange) -> f32 {
    if r.is_constant() {
        return 0.0;
    }
    let t = (x as f64 - r.min as f64) / (r.max as f64 - r.min as f64);
    t.clamp(0.0, 1.0) as f32
}

/// Applies `params` to the numeric channels of a raw day.
pub fn apply_scaling(day: &GridDay, params: &ScalingParams) -> Result<GridDay> {
    let c = day.channels();
    let plane = day.height() * day.width();
    let mut data = day.features.data().to_vec();
    for r in &params.ranges {
        if r.channel >= c {
            return Err(Error::Dimension {
                op: "apply_scaling",
                axis: "channels",
                expected: r.channel + 1,
                actual: c,
            });
        }
        for v in &mut data[r.channel * plane..(r.channel + 1) * plane] {
            *v = scale_value(*v, r);
        }
    }
    GridDay::new(
        day.day_id.clone(),
        Tensor::new(day.features.shape(), data)?,
        day.mask.clone(),
    )
}

/// Expands category indices into `categories` indicator planes.
///
/// Values that are not an integer in `0..categories` give an all-zero row;
/// the second return value counts them.
pub fn one_hot_encode(values: &[f32], categories: usize) -> (Vec<f32>, usize) {
    let n = values.len();
    let mut out = vec![0.0f32; categories * n];
    let mut unknown = 0;
    for (i, &v) in values.iter().enumerate() {
        let k = v as usize;
        if v >= 0.0 && v == k as f32 && k < categories {
            out[k * n + i] = 1.0;
        } else {
            unknown += 1;
        }
    }
    (out, unknown)
}

/// One-hot expands the categorical channels of a (scaled) raw day.
///
/// Returns the encoded day with [`FeatureSchema::encoded_channels`] planes
/// and the number of pixels carrying an unknown category.
pub fn encode_day(day: &GridDay, schema: &FeatureSchema) -> Result<(GridDay, usize)> {
    check_channels("encode_day", day, schema.raw_channels())?;
    let (h, w) = (day.height(), day.width());
    let mut data = Vec::with_capacity(schema.encoded_channels() * h * w);
    let mut unknown = 0;
    for (c, ch) in schema.channels().iter().enumerate() {
        match &ch.kind {
            ChannelKind::Numeric => data.extend_from_slice(day.channel(c)),
            ChannelKind::Categorical { categories } => {
                let (planes, u) = one_hot_encode(day.channel(c), categories.len());
                data.extend(planes);
                unknown += u;
            }
        }
    }
    let features = Tensor::new(&[schema.encoded_channels(), h, w], data)?;
    Ok((GridDay::new(day.day_id.clone(), features, day.mask.clone())?, unknown))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TileClass {
    /// At least one fire pixel.
    Fire,
    /// Some land, no fire.
    NoFire,
    /// Water only.
    Water,
}

impl TileClass {
    pub fn name(self) -> &'static str {
        match self {
            Self::Fire => "fire",
            Self::NoFire => "no-fire",
            Self::Water => "water",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "fire" => Some(Self::Fire),
            "no-fire" => Some(Self::NoFire),
            "water" => Some(Self::Water),
            _ => None,
        }
    }
}

/// A 32×32 window of one day.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TileSpec {
    pub day_id: String,
    pub row_off: usize,
    pub col_off: usize,
    pub class: TileClass,
}

/// Classifies the tile at `(r0, c0)`; pixels past the raster edge are water.
pub fn classify_tile(mask: &Mask, r0: usize, c0: usize) -> TileClass {
    let mut land = false;
    for r in r0..r0 + TILE {
        for c in c0..c0 + TILE {
            match mask.get(r, c) {
                FIRE => return TileClass::Fire,
                NO_FIRE => land = true,
                _ => {}
            }
        }
    }
    if land {
        TileClass::NoFire
    } else {
        TileClass::Water
    }
}

/// Non-overlapping 32×32 cover of a mask, padding right and bottom with
/// water. Tiles are listed row-major.
pub fn extract_mask_tiles(day_id: &str, mask: &Mask) -> Vec<TileSpec> {
    let (rows, cols) = (mask.h.div_ceil(TILE), mask.w.div_ceil(TILE));
    let mut out = Vec::with_capacity(rows * cols);
    for tr in 0..rows {
        for tc in 0..cols {
            let (r0, c0) = (tr * TILE, tc * TILE);
            out.push(TileSpec {
                day_id: day_id.into(),
                row_off: r0,
                col_off: c0,
                class: classify_tile(mask, r0, c0),
            });
        }
    }
    out
}

pub fn extract_tiles(day: &GridDay) -> Vec<TileSpec> {
    extract_mask_tiles(&day.day_id, &day.mask)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Provenance {
    /// Every tile of some train-validation days, before sampling.
    Extracted,
    Sampled,
    /// Every land tile of the holdout days; never sampled or augmented.
    Holdout,
}

impl Provenance {
    pub fn name(self) -> &'static str {
        match self {
            Self::Extracted => "extracted",
            Self::Sampled => "sampled",
            Self::Holdout => "holdout",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "extracted" => Some(Self::Extracted),
            "sampled" => Some(Self::Sampled),
            "holdout" => Some(Self::Holdout),
            _ => None,
        }
    }
}

/// Parameters and outcome of a sampling pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sampling {
    pub tr: f64,
    pub seed: u64,
    /// `round(tr · fire tiles)`.
    pub requested: usize,
    /// No-fire tiles that were available.
    pub available: usize,
}

impl Sampling {
    /// True when fewer no-fire tiles existed than the ratio asked for.
    pub fn short(&self) -> bool {
        self.available < self.requested
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TileSet {
    pub tiles: Vec<TileSpec>,
    pub provenance: Provenance,
    pub sampling: Option<Sampling>,
}

impl TileSet {
    pub fn extracted(tiles: Vec<TileSpec>) -> Self {
        Self {
            tiles,
            provenance: Provenance::Extracted,
            sampling: None,
        }
    }

    /// Every land tile of the given holdout days.
    pub fn holdout<'a>(days: impl IntoIterator<Item = &'a GridDay>) -> Self {
        let tiles = days
            .into_iter()
            .flat_map(extract_tiles)
            .filter(|t| t.class != TileClass::Water)
            .collect();
        Self {
            tiles,
            provenance: Provenance::Holdout,
            sampling: None,
        }
    }

    pub fn count(&self, class: TileClass) -> usize {
        self.tiles.iter().filter(|t| t.class == class).count()
    }

    pub fn day_ids(&self) -> BTreeSet<&str> {
        self.tiles.iter().map(|t| t.day_id.as_str()).collect()
    }

    pub fn len(&self) -> usize {
        self.tiles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tiles.is_empty()
    }
}

/// Code paths that must never see holdout data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Stage {
    Sampling,
    FireBuffer,
}

/// Receives every day a guarded stage touches.
pub trait Observer {
    fn observe(&mut self, stage: Stage, day_id: &str);
}

impl Observer for () {
    fn observe(&mut self, _: Stage, _: &str) {}
}

/// Records which days passed through each guarded stage.
#[derive(Debug, Default, Clone, PartialEq, Eq)]
pub struct Audit {
    pub visits: BTreeMap<Stage, BTreeSet<String>>,
}

impl Audit {
    pub fn days(&self, stage: Stage) -> impl Iterator<Item = &str> {
        self.visits.get(&stage).into_iter().flatten().map(String::as_str)
    }

    /// Days from `holdout` seen by any guarded stage.
    pub fn leaks<'a>(&'a self, holdout: &'a BTreeSet<&str>) -> Vec<(Stage, &'a str)> {
        self.visits
            .iter()
            .flat_map(|(s, days)| days.iter().map(move |d| (*s, d.as_str())))
            .filter(|(_, d)| holdout.contains(d))
            .collect()
    }
}

impl Observer for Audit {
    fn observe(&mut self, stage: Stage, day_id: &str) {
        let days = self.visits.entry(stage).or_default();
        if !days.contains(day_id) {
            days.insert(day_id.into());
        }
    }
}

/// Keeps all fire tiles, drops water tiles and draws `round(tr · fire)`
/// no-fire tiles uniformly without replacement (all of them if fewer exist;
/// see [`Sampling::short`]). Kept tiles stay in their original order.
pub fn sample_tileset(set: &TileSet, tr: f64, seed: u64) -> Result<TileSet> {
    sample_tileset_observed(set, tr, seed, &mut ())
}

pub fn sample_tileset_observed(set: &TileSet, tr: f64, seed: u64, observer: &mut dyn Observer) -> Result<TileSet> {
    if set.provenance == Provenance::Holdout {
        return Err(Error::HoldoutViolation { op: "sample_tileset" });
    }
    if !(tr.is_finite() && tr >= 0.0) {
        return Err(Error::Config(format!(
            "tile ratio must be a non-negative number, got {tr}"
        )));
    }
    for t in &set.tiles {
        observer.observe(Stage::Sampling, &t.day_id);
    }
    let fire = set.count(TileClass::Fire);
    if fire == 0 {
        return Err(Error::NoFireTiles);
    }
    let no_fire: Vec<usize> = (0..set.tiles.len())
        .filter(|&i| set.tiles[i].class == TileClass::NoFire)
        .collect();
    let requested = libm::round(tr * fire as f64) as usize;
    let take = requested.min(no_fire.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = vec![false; set.tiles.len()];
    for j in rand::seq::index::sample(&mut rng, no_fire.len(), take) {
        keep[no_fire[j]] = true;
    }
    let tiles = set
        .tiles
        .iter()
        .zip(&keep)
        .filter(|(t, &k)| t.class == TileClass::Fire || k)
        .map(|(t, _)| t.clone())
        .collect();
    Ok(TileSet {
        tiles,
        provenance: Provenance::Sampled,
        sampling: Some(Sampling {
            tr,
            seed,
            requested,
            available: no_fire.len(),
        }),
    })
}

/// Relabels every non-water pixel within Chebyshev distance `radius` of a
/// fire pixel of `mask` as fire. Takes the original (unbuffered) mask.
pub fn apply_fire_buffer(mask: &Mask, radius: usize) -> Mask {
    let mut out = mask.clone();
    if radius == 0 {
        return out;
    }
    for r in 0..mask.h {
        for c in 0..mask.w {
            if mask.labels[r * mask.w + c] != FIRE {
                continue;
            }
            for rr in r.saturating_sub(radius)..(r + radius + 1).min(mask.h) {
                for cc in c.saturating_sub(radius)..(c + radius + 1).min(mask.w) {
                    let l = &mut out.labels[rr * mask.w + cc];
                    if *l == NO_FIRE {
                        *l = FIRE;
                    }
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Grouping {
    #[default]
    ByTile,
    /// All tiles of one day share a fold.
    ByDay,
}

impl Grouping {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "tile" | "by-tile" => Some(Self::ByTile),
            "day" | "by-day" => Some(Self::ByDay),
            _ => None,
        }
    }
}

/// Splits a tile set into `k` disjoint folds.
///
/// Groups (tiles, or days) containing a fire tile are shuffled and dealt
/// round-robin first, then the remaining groups continue the deal, so every
/// fold gets a fire group and fold sizes differ by at most one group.
pub fn kfold_split(set: &TileSet, k: usize, seed: u64, grouping: Grouping) -> Result<Vec<Vec<TileSpec>>> {
    if set.provenance == Provenance::Holdout {
        return Err(Error::HoldoutViolation { op: "kfold_split" });
    }
    if k < 2 {
        return Err(Error::Config(format!("k-fold split needs k >= 2, got {k}")));
    }
    let groups: Vec<Vec<&TileSpec>> = match grouping {
        Grouping::ByTile => set.tiles.iter().map(|t| vec![t]).collect(),
        Grouping::ByDay => {
            let mut by_day: BTreeMap<&str, Vec<&TileSpec>> = BTreeMap::new();
            for t in &set.tiles {
                by_day.entry(&t.day_id).or_default().push(t);
            }
            by_day.into_values().collect()
        }
    };
    let (mut fire, mut rest): (Vec<_>, Vec<_>) = groups
        .into_iter()
        .partition(|g| g.iter().any(|t| t.class == TileClass::Fire));
    if fire.len() < k {
        return Err(Error::TooFewFireGroups {
            fire_groups: fire.len(),
            k,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    fire.shuffle(&mut rng);
    rest.shuffle(&mut rng);
    let mut folds = vec![Vec::new(); k];
    for (i, g) in fire.into_iter().chain(rest).enumerate() {
        folds[i % k].extend(g.into_iter().cloned());
    }
    Ok(folds)
}

/// Fold `i` as validation, the others (in fold order) as training.
pub fn train_val(folds: &[Vec<TileSpec>], i: usize) -> (Vec<TileSpec>, Vec<TileSpec>) {
    let train = folds
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != i)
        .flat_map(|(_, f)| f.iter().cloned())
        .collect();
    (train, folds[i].clone())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DayRole {
    TrainVal,
    Holdout,
}

#[derive(Debug, Clone)]
struct StoredDay {
    day: GridDay,
    role: DayRole,
    buffered: Option<Mask>,
}

/// Which labels a batch carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Labels {
    Original,
    /// The fire-buffered masks produced by [`DayStore::buffer_days`].
    Buffered,
}

/// Encoded days by id, each tagged train-validation or holdout.
#[derive(Debug, Clone, Default)]
pub struct DayStore {
    days: BTreeMap<String, StoredDay>,
    channels: Option<usize>,
    radius: Option<usize>,
}

impl DayStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, day: GridDay, role: DayRole) -> Result<()> {
        if let Some(c) = self.channels {
            check_channels("DayStore::insert", &day, c)?;
        }
        if self.days.contains_key(day.day_id()) {
            return Err(Error::Config(format!("duplicate day `{}`", day.day_id())));
        }
        self.channels = Some(day.channels());
        self.days.insert(
            day.day_id.clone(),
            StoredDay {
                day,
                role,
                buffered: None,
            },
        );
        Ok(())
    }

    fn entry(&self, id: &str) -> Result<&StoredDay> {
        self.days.get(id).ok_or_else(|| Error::UnknownDay(id.into()))
    }

    pub fn get(&self, id: &str) -> Result<&GridDay> {
        Ok(&self.entry(id)?.day)
    }

    pub fn role(&self, id: &str) -> Result<DayRole> {
        Ok(self.entry(id)?.role)
    }

    pub fn channels(&self) -> Option<usize> {
        self.channels
    }

    pub fn len(&self) -> usize {
        self.days.len()
    }

    pub fn is_empty(&self) -> bool {
        self.days.is_empty()
    }

    /// Days with the given role, in id order.
    pub fn days(&self, role: DayRole) -> impl Iterator<Item = &GridDay> {
        self.days.values().filter(move |d| d.role == role).map(|d| &d.day)
    }

    /// Stores the fire-buffered mask of each listed day; holdout days are
    /// refused before anything is changed.
    pub fn buffer_days<'a>(
        &mut self,
        ids: impl IntoIterator<Item = &'a str>,
        radius: usize,
        observer: &mut dyn Observer,
    ) -> Result<()> {
        let ids: BTreeSet<&str> = ids.into_iter().collect();
        for id in &ids {
            if self.entry(id)?.role == DayRole::Holdout {
                return Err(Error::HoldoutViolation {
                    op: "apply_fire_buffer",
                });
            }
        }
        for id in ids {
            observer.observe(Stage::FireBuffer, id);
            let d = self.days.get_mut(id).expect("checked above");
            d.buffered = Some(apply_fire_buffer(&d.day.mask, radius));
        }
        self.radius = Some(radius);
        Ok(())
    }

    pub fn buffer_radius(&self) -> Option<usize> {
        self.radius
    }

    pub fn mask(&self, id: &str, labels: Labels) -> Result<&Mask> {
        let d = self.entry(id)?;
        match labels {
            Labels::Original => Ok(&d.day.mask),
            Labels::Buffered => d
                .buffered
                .as_ref()
                .ok_or_else(|| Error::Config(format!("day `{id}` has no buffered mask"))),
        }
    }
}

/// Slices the tiles into `[N, C, 32, 32]` features and `N·32·32` labels.
/// Pixels past the raster edge read as zero features and water.
pub fn materialize_batch(specs: &[TileSpec], store: &DayStore, labels: Labels) -> Result<(Tensor, Vec<u8>)> {
    if specs.is_empty() {
        return Err(Error::Empty("materialize_batch"));
    }
    let c = store.channels().ok_or(Error::Empty("materialize_batch store"))?;
    let area = TILE * TILE;
    let mut feats = vec![0.0f32; specs.len() * c * area];
    let mut masks = vec![WATER; specs.len() * area];
    for (n, s) in specs.iter().enumerate() {
        let day = store.get(&s.day_id)?;
        let mask = store.mask(&s.day_id, labels)?;
        let (h, w) = (day.height(), day.width());
        if s.row_off >= h || s.col_off >= w {
            return Err(Error::Config(format!(
                "tile ({}, {}) lies outside day `{}` of size {h}x{w}",
                s.row_off, s.col_off, s.day_id
            )));
        }
        let rows = TILE.min(h - s.row_off);
        let cols = TILE.min(w - s.col_off);
        for r in 0..rows {
            let src = (s.row_off + r) * w + s.col_off;
            let dst = n * area + r * TILE;
            masks[dst..dst + cols].copy_from_slice(&mask.labels[src..src + cols]);
            for ch in 0..c {
                let plane = day.channel(ch);
                let dst = (n * c + ch) * area + r * TILE;
                feats[dst..dst + cols].copy_from_slice(&plane[src..src + cols]);
            }
        }
    }
    Ok((Tensor::new(&[specs.len(), c, TILE, TILE], feats)?, masks))
}
