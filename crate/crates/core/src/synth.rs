//! Synthetic daily rasters with a planted, spatially clustered fire rule.
//!
//! Numeric channels are box-blurred white noise: static layers (terrain,
//! burn history) are shared by every day, dynamic layers (weather) mix a
//! static component with a fresh daily field and a daily offset. Land cover
//! is a quantised static field and water is the lowest `water_fraction` of
//! another static field.
//!
//! Fire seeds fall on land with probability `amplitude · σ(k (z − c))`, where
//! `z = T − 0.8 H + 0.7 F + 0.4 T F` over the standardised temperature,
//! humidity and fire-history fields. Land pixels at Chebyshev distance 1 or
//! 2 from a seed then catch fire with probability 0.5 or 0.2. The amplitude
//! is searched until the dataset fire rate is within 20% of the target.
//! Every draw comes from a per-day random stream, so the uniforms are fixed
//! while the amplitude changes and the achieved rate is monotone in it.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::dataset::{Channel, FeatureSchema, GridDay, Mask, FIRE, NO_FIRE, WATER};
use crate::error::{Error, Result};
use crate::metrics::{confusion, ConfusionCounts, Scores};
use crate::tensor::Tensor;

/// Rule coefficients on `T`, `H`, `F` and `T·F`.
pub const RULE_COEFFICIENTS: [f64; 4] = [1.0, -0.8, 0.7, 0.4];
const STEEPNESS: f64 = 4.0;
/// Quantile of land `z` at which the seed probability is half the amplitude.
const CENTER_QUANTILE: f64 = 0.97;
const BLUR_RADIUS: usize = 3;
const DAILY_OFFSET_SD: f64 = 0.3;
const NEIGHBOUR_P: [f64; 2] = [0.5, 0.2];
const MAX_CALIBRATION_ROUNDS: usize = 40;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    /// Total days; the last `holdout_days` form the holdout period.
    pub days: usize,
    pub holdout_days: usize,
    /// At least 3: temperature, humidity and fire history drive the rule.
    pub numeric_channels: usize,
    /// Land-cover categories.
    pub categories: usize,
    pub target_fire_rate: f64,
    pub water_fraction: f64,
    /// Label fire exactly where `z ≥ c` (no randomness, no clustering).
    pub noiseless: bool,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            height: 128,
            width: 128,
            days: 40,
            holdout_days: 10,
            numeric_channels: 6,
            categories: 4,
            target_fire_rate: 1e-3,
            water_fraction: 0.15,
            noiseless: false,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.height < 64 || self.width < 64 {
            return bad(format!(
                "raster must be at least 64x64, got {}x{}",
                self.height, self.width
            ));
        }
        if !(self.target_fire_rate > 0.0 && self.target_fire_rate <= 0.05) {
            return bad(format!(
                "target_fire_rate must lie in (0, 0.05], got {}",
                self.target_fire_rate
            ));
        }
        if !(0.0..0.9).contains(&self.water_fraction) {
            return bad(format!(
                "water_fraction must lie in [0, 0.9), got {}",
                self.water_fraction
            ));
        }
        if self.days == 0 || self.holdout_days >= self.days {
            return bad(format!(
                "need at least one train-validation day: days {}, holdout_days {}",
                self.days, self.holdout_days
            ));
        }
        if self.numeric_channels < 3 || self.categories == 0 {
            return bad("need at least 3 numeric channels and 1 land-cover category".into());
        }
        Ok(())
    }

    pub fn is_holdout(&self, day: usize) -> bool {
        day >= self.days - self.holdout_days
    }
}

/// Names, raw units and temporal behaviour of the numeric channels.
const NUMERIC: [(&str, f64, f64, bool); 6] = [
    ("temperature", 28.0, 5.0, true),
    ("humidity", 40.0, 12.0, true),
    ("fire_history", 0.2, 0.1, false),
    ("elevation", 500.0, 300.0, false),
    ("wind", 4.0, 2.0, true),
    ("ndvi", 0.5, 0.15, true),
];

fn numeric_channel(i: usize) -> (String, f64, f64, bool) {
    match NUMERIC.get(i) {
        Some(&(n, m, s, d)) => (n.into(), m, s, d),
        None => (format!("aux{}", i - NUMERIC.len() + 1), 0.0, 1.0, i.is_multiple_of(2)),
    }
}

/// The planted rule, in terms of raw feature values.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantedRule {
    /// Raw channel indices of temperature, humidity and fire history.
    pub channels: [usize; 3],
    /// Raw-unit mean and standard deviation used to standardise each of them.
    pub standardise: [(f64, f64); 3],
    pub coefficients: [f64; 4],
    pub center: f64,
    pub steepness: f64,
    pub amplitude: f64,
    pub noiseless: bool,
}

impl PlantedRule {
    pub fn z(&self, raw: [f32; 3]) -> f64 {
        let [t, h, f] = core::array::from_fn(|i| {
            let (m, s) = self.standardise[i];
            (raw[i] as f64 - m) / s
        });
        let [a, b, c, d] = self.coefficients;
        a * t + b * h + c * f + d * t * f
    }

    /// `σ(k (z − c))`; the seed probability divided by the amplitude.
    pub fn probability(&self, z: f64) -> f64 {
        1.0 / (1.0 + libm::exp(-self.steepness * (z - self.center)))
    }

    /// Rule score of every pixel of a raw day.
    pub fn score_day(&self, day: &GridDay) -> Vec<f64> {
        let planes = self.channels.map(|c| day.channel(c));
        (0..planes[0].len())
            .map(|p| self.z([planes[0][p], planes[1][p], planes[2][p]]))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub schema: FeatureSchema,
    /// Raw (unscaled, unencoded) days in date order.
    pub days: Vec<GridDay>,
    pub holdout: Vec<bool>,
    pub rule: PlantedRule,
    pub achieved_fire_rate: f64,
    pub calibration_rounds: usize,
}

impl SynthDataset {
    pub fn train_val_days(&self) -> impl Iterator<Item = &GridDay> {
        self.days.iter().zip(&self.holdout).filter(|(_, &h)| !h).map(|(d, _)| d)
    }

    pub fn holdout_days(&self) -> impl Iterator<Item = &GridDay> {
        self.days.iter().zip(&self.holdout).filter(|(_, &h)| h).map(|(d, _)| d)
    }
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Sliding-window mean along one axis, window clipped at the edges.
fn box_pass(src: &[f64], dst: &mut [f64], len: usize, count: usize, step: usize, stride: usize, r: usize) {
    for line in 0..count {
        let at = |i: usize| src[line * stride + i * step];
        let mut acc: f64 = (0..=r.min(len - 1)).map(at).sum();
        for i in 0..len {
            let lo = i.saturating_sub(r);
            let hi = (i + r).min(len - 1);
            dst[line * stride + i * step] = acc / (hi - lo + 1) as f64;
            if i + r + 1 < len {
                acc += at(i + r + 1);
            }
            if i >= r {
                acc -= at(i - r);
            }
        }
    }
}

/// Standardised, twice box-blurred white noise.
fn smooth_field(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Vec<f64> {
    let mut a: Vec<f64> = (0..h * w).map(|_| StandardNormal.sample(rng)).collect();
    let mut b = vec![0.0; h * w];
    for _ in 0..2 {
        box_pass(&a, &mut b, w, h, 1, w, BLUR_RADIUS);
        box_pass(&b, &mut a, h, w, w, 1, BLUR_RADIUS);
    }
    let n = a.len() as f64;
    let mean = a.iter().sum::<f64>() / n;
    let sd = libm::sqrt(a.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n);
    a.iter().map(|v| (v - mean) / sd).collect()
}

/// Value at quantile `q` (nearest rank) of `values`.
fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let i = libm::round(q * (v.len() - 1) as f64) as usize;
    v[i.min(v.len() - 1)]
}

struct DayDraws {
    seed_u: Vec<f64>,
    spread_u: Vec<f64>,
}

/// Fire labels for one day given the seed probabilities.
fn label_day(land: &[bool], p_seed: &[f64], draws: &DayDraws, h: usize, w: usize) -> Vec<u8> {
    let mut dist = vec![u8::MAX; h * w];
    for i in 0..h * w {
        if land[i] && draws.seed_u[i] < p_seed[i] {
            dist[i] = 0;
        }
    }
    // Chebyshev distance to the nearest seed, up to 2
    let seeds: Vec<usize> = (0..h * w).filter(|&i| dist[i] == 0).collect();
    for &s in &seeds {
        let (r, c) = (s / w, s % w);
        for rr in r.saturating_sub(2)..(r + 3).min(h) {
            for cc in c.saturating_sub(2)..(c + 3).min(w) {
                let d = r.abs_diff(rr).max(c.abs_diff(cc)) as u8;
                let q = rr * w + cc;
                dist[q] = dist[q].min(d);
            }
        }
    }
    (0..h * w)
        .map(|i| match (land[i], dist[i]) {
            (false, _) => WATER,
            (true, 0) => FIRE,
            (true, d @ 1..=2) if draws.spread_u[i] < NEIGHBOUR_P[d as usize - 1] => FIRE,
            _ => NO_FIRE,
        })
        .collect()
}

/// Builds the dataset described by `cfg`; identical configs give bitwise
/// identical datasets.
pub fn generate_dataset(cfg: &SynthConfig) -> Result<SynthDataset> {
    cfg.validate()?;
    let (h, w, nd) = (cfg.height, cfg.width, cfg.days);
    let plane = h * w;
    let mut channels: Vec<Channel> = (0..cfg.numeric_channels)
        .map(|i| Channel::numeric(&numeric_channel(i).0))
        .collect();
    let cats: Vec<String> = (0..cfg.categories).map(|k| format!("class{k}")).collect();
    let cat_refs: Vec<&str> = cats.iter().map(String::as_str).collect();
    channels.push(Channel::categorical("land_cover", &cat_refs));
    let schema = FeatureSchema::new(channels)?;

    let mut srng = stream(cfg.seed, 0);
    let statics: Vec<Vec<f64>> = (0..cfg.numeric_channels)
        .map(|_| smooth_field(&mut srng, h, w))
        .collect();
    let water_field = smooth_field(&mut srng, h, w);
    let cover_field = smooth_field(&mut srng, h, w);
    let water_cut = quantile(&water_field, cfg.water_fraction);
    let land: Vec<bool> = water_field
        .iter()
        .map(|&v| cfg.water_fraction == 0.0 || v > water_cut)
        .collect();
    let cover_cuts: Vec<f64> = (1..cfg.categories)
        .map(|k| quantile(&cover_field, k as f64 / cfg.categories as f64))
        .collect();
    let cover: Vec<f32> = cover_field
        .iter()
        .map(|&v| cover_cuts.iter().filter(|&&c| v > c).count() as f32)
        .collect();

    // standardised fields per day and channel, then raw features
    let mut fields = Vec::with_capacity(nd);
    let mut draws = Vec::with_capacity(nd);
    for d in 0..nd {
        let mut rng = stream(cfg.seed, d as u64 + 1);
        let per_day: Vec<Vec<f64>> = (0..cfg.numeric_channels)
            .map(|c| {
                let daily = smooth_field(&mut rng, h, w);
                let offset: f64 = StandardNormal.sample(&mut rng);
                if numeric_channel(c).3 {
                    (0..plane)
                        .map(|i| 0.6 * statics[c][i] + 0.8 * daily[i] + DAILY_OFFSET_SD * offset)
                        .collect()
                } else {
                    statics[c].clone()
                }
            })
            .collect();
        draws.push(DayDraws {
            seed_u: (0..plane).map(|_| rng.random::<f64>()).collect(),
            spread_u: (0..plane).map(|_| rng.random::<f64>()).collect(),
        });
        fields.push(per_day);
    }

    let mut rule = PlantedRule {
        channels: [0, 1, 2],
        standardise: core::array::from_fn(|i| {
            let (_, m, s, _) = numeric_channel(i);
            (m, s)
        }),
        coefficients: RULE_COEFFICIENTS,
        center: 0.0,
        steepness: STEEPNESS,
        amplitude: 1.0,
        noiseless: cfg.noiseless,
    };
    let raw_of = |c: usize, v: f64| {
        let (_, m, s, _) = numeric_channel(c);
        (m + s * v) as f32
    };
    let z: Vec<Vec<f64>> = fields
        .iter()
        .map(|f| {
            (0..plane)
                .map(|i| rule.z([raw_of(0, f[0][i]), raw_of(1, f[1][i]), raw_of(2, f[2][i])]))
                .collect()
        })
        .collect();
    let land_z: Vec<f64> = z
        .iter()
        .flat_map(|zd| zd.iter().zip(&land).filter(|(_, &l)| l).map(|(&v, _)| v))
        .collect();
    if land_z.is_empty() {
        return Err(Error::Config("synthetic raster has no land".into()));
    }
    let land_total = land_z.len() as f64;
    let target = cfg.target_fire_rate;

    let (masks, achieved, rounds) = if cfg.noiseless {
        rule.center = quantile(&land_z, 1.0 - target);
        let masks: Vec<Vec<u8>> = z
            .iter()
            .map(|zd| {
                (0..plane)
                    .map(|i| match (land[i], zd[i] >= rule.center) {
                        (false, _) => WATER,
                        (true, true) => FIRE,
                        (true, false) => NO_FIRE,
                    })
                    .collect()
            })
            .collect();
        let fires = masks.iter().flatten().filter(|&&l| l == FIRE).count();
        (masks, fires as f64 / land_total, 1)
    } else {
        rule.center = quantile(&land_z, CENTER_QUANTILE);
        let probs: Vec<Vec<f64>> = z
            .iter()
            .map(|zd| zd.iter().map(|&v| rule.probability(v)).collect())
            .collect();
        let run = |amp: f64| -> (Vec<Vec<u8>>, f64) {
            let masks: Vec<Vec<u8>> = (0..nd)
                .map(|d| {
                    let p: Vec<f64> = probs[d].iter().map(|q| (amp * q).min(1.0)).collect();
                    label_day(&land, &p, &draws[d], h, w)
                })
                .collect();
            let fires = masks.iter().flatten().filter(|&&l| l == FIRE).count();
            (masks, fires as f64 / land_total)
        };
        // bisection on log-amplitude; the rate is monotone in the amplitude
        let (mut lo, mut hi) = (1e-7f64, 1.0f64);
        let mut amp = libm::sqrt(lo * hi);
        let mut rounds = 0;
        let mut result = None;
        let mut last = 0.0;
        while rounds < MAX_CALIBRATION_ROUNDS {
            rounds += 1;
            let (masks, rate) = run(amp);
            last = rate;
            if (rate - target).abs() <= 0.2 * target {
                result = Some(masks);
                break;
            }
            if rate < target {
                lo = amp;
            } else {
                hi = amp;
            }
            amp = libm::sqrt(lo * hi);
        }
        let masks = result.ok_or(Error::Calibration { achieved: last, target })?;
        rule.amplitude = amp;
        (masks, last, rounds)
    };

    let mut days = Vec::with_capacity(nd);
    for (d, (f, labels)) in fields.iter().zip(masks).enumerate() {
        let mut data = Vec::with_capacity((cfg.numeric_channels + 1) * plane);
        for (c, field) in f.iter().enumerate() {
            data.extend(field.iter().map(|&v| raw_of(c, v)));
        }
        data.extend_from_slice(&cover);
        let features = Tensor::new(&[cfg.numeric_channels + 1, h, w], data)?;
        days.push(GridDay::new(format!("d{d:03}"), features, Mask::new(h, w, labels)?)?);
    }
    Ok(SynthDataset {
        schema,
        holdout: (0..nd).map(|d| cfg.is_holdout(d)).collect(),
        days,
        rule,
        achieved_fire_rate: achieved,
        calibration_rounds: rounds,
    })
}

/// Default threshold grid for [`bayes_reference`].
pub const BAYES_TAUS: [f64; 15] = [
    0.001, 0.002, 0.005, 0.01, 0.02, 0.05, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9,
];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BayesPoint {
    pub tau: f64,
    pub counts: ConfusionCounts,
    pub scores: Option<Scores>,
}

/// The planted rule used as a predictor: fire iff `σ(k (z − c)) ≥ τ`,
/// scored against the days' labels for every `τ`.
pub fn bayes_reference<'a>(
    days: impl IntoIterator<Item = &'a GridDay>,
    rule: &PlantedRule,
    taus: &[f64],
) -> Result<Vec<BayesPoint>> {
    let mut counts = vec![ConfusionCounts::default(); taus.len()];
    for day in days {
        let p: Vec<f64> = rule.score_day(day).into_iter().map(|z| rule.probability(z)).collect();
        for (t, c) in taus.iter().zip(&mut counts) {
            let pred: Vec<u8> = p.iter().map(|&q| u8::from(q >= *t)).collect();
            *c += confusion(&pred, day.mask().labels())?;
        }
    }
    Ok(taus
        .iter()
        .zip(counts)
        .map(|(&tau, counts)| BayesPoint {
            tau,
            counts,
            scores: counts.scores(),
        })
        .collect())
}

/// Highest `sh2` over the reference curve.
pub fn best_sh2(points: &[BayesPoint]) -> Option<BayesPoint> {
    points.iter().filter(|p| p.scores.is_some()).copied().reduce(|a, b| {
        if b.scores.unwrap().sh2 > a.scores.unwrap().sh2 {
            b
        } else {
            a
        }
    })
}
