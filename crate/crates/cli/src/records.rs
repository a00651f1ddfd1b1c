//! Text records: tile manifests, metric CSVs and JSON sidecars.
//!
//! Every metric appears twice: rounded to 4 decimals and, in the matching
//! `*_full` column, as the shortest string that parses back to the same
//! `f64`. Undefined values are written as `nan`.

use anyhow::{anyhow, bail, Context};
use serde::{Deserialize, Serialize};

use fireseg::dataset::{
    Channel, ChannelKind, ChannelRange, FeatureSchema, Provenance, ScalingParams, TileClass, TileSet, TileSpec,
};
use fireseg::metrics::{ConfusionCounts, Scores};
use fireseg::trainer::{EpochRecord, FoldResult, TrainConfig};

pub const MANIFEST_HEADER: &str = "day_id,row_off,col_off,tile_class,provenance";

pub fn fmt4(v: Option<f64>) -> String {
    match v {
        Some(x) if x.is_finite() => format!("{x:.4}"),
        _ => "nan".into(),
    }
}

pub fn full(v: Option<f64>) -> String {
    match v {
        Some(x) if x.is_finite() => format!("{x}"),
        _ => "nan".into(),
    }
}

/// A header and rows of already formatted cells.
#[derive(Debug, Clone, Default)]
pub struct Csv {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Csv {
    pub fn new(header: &[&str]) -> Self {
        Self {
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn render(&self) -> String {
        let mut s = self.header.join(",");
        s.push('\n');
        for r in &self.rows {
            s.push_str(&r.join(","));
            s.push('\n');
        }
        s
    }

    /// Parses a comma-separated table without quoting.
    pub fn parse(text: &str) -> anyhow::Result<Self> {
        let mut lines = text.lines();
        let header: Vec<String> = lines
            .next()
            .ok_or_else(|| anyhow!("empty CSV"))?
            .split(',')
            .map(str::to_owned)
            .collect();
        let mut rows = Vec::new();
        for (i, l) in lines.enumerate() {
            if l.is_empty() {
                continue;
            }
            let row: Vec<String> = l.split(',').map(str::to_owned).collect();
            if row.len() != header.len() {
                bail!("line {}: {} fields, header has {}", i + 2, row.len(), header.len());
            }
            rows.push(row);
        }
        Ok(Self { header, rows })
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }
}

pub fn write_manifest(set: &TileSet) -> anyhow::Result<String> {
    let mut out = String::from(MANIFEST_HEADER);
    out.push('\n');
    for t in &set.tiles {
        if t.day_id.contains([',', '\n', '\r']) {
            bail!("day id `{}` cannot be written to a manifest", t.day_id);
        }
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            t.day_id,
            t.row_off,
            t.col_off,
            t.class.name(),
            set.provenance.name()
        ));
    }
    Ok(out)
}

/// Reads a manifest; every row must carry the same provenance. An empty
/// manifest reads as `empty_as`.
pub fn read_manifest(text: &str, empty_as: Provenance) -> anyhow::Result<TileSet> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == MANIFEST_HEADER => {}
        other => bail!("manifest header must be `{MANIFEST_HEADER}`, got {other:?}"),
    }
    let mut tiles = Vec::new();
    let mut provenance = None;
    for (i, l) in lines.enumerate() {
        let line = i + 2;
        if l.is_empty() {
            continue;
        }
        let f: Vec<&str> = l.split(',').collect();
        let [day, row, col, class, prov] = f[..] else {
            bail!("manifest line {line}: expected 5 fields, got {}", f.len());
        };
        let p = Provenance::parse(prov).ok_or_else(|| anyhow!("manifest line {line}: unknown provenance `{prov}`"))?;
        if provenance.is_some_and(|q| q != p) {
            bail!("manifest line {line}: mixed provenance");
        }
        provenance = Some(p);
        tiles.push(TileSpec {
            day_id: day.into(),
            row_off: row.parse().with_context(|| format!("manifest line {line}: row_off"))?,
            col_off: col.parse().with_context(|| format!("manifest line {line}: col_off"))?,
            class: TileClass::parse(class).ok_or_else(|| anyhow!("manifest line {line}: unknown class `{class}`"))?,
        });
    }
    Ok(TileSet {
        tiles,
        provenance: provenance.unwrap_or(empty_as),
        sampling: None,
    })
}

fn counts_cells(c: &ConfusionCounts) -> Vec<String> {
    [c.true_pos, c.false_neg, c.true_neg, c.false_pos]
        .iter()
        .map(u64::to_string)
        .collect()
}

fn score_cells(s: &Scores) -> Vec<String> {
    let v = [s.sens, s.spec, s.sh1, s.sh2].map(Some);
    v.iter().map(|x| fmt4(*x)).chain(v.iter().map(|x| full(*x))).collect()
}

const SCORE_COLS: [&str; 8] = [
    "sens",
    "spec",
    "sh1",
    "sh2",
    "sens_full",
    "spec_full",
    "sh1_full",
    "sh2_full",
];

fn with_scores(lead: &[&str]) -> Vec<String> {
    lead.iter().chain(&SCORE_COLS).map(|s| s.to_string()).collect()
}

/// Validation summary: one row per fold plus the mean, per configuration.
pub fn validation_csv() -> Csv {
    Csv {
        header: with_scores(&["tr", "fb", "if", "es", "row"]),
        rows: Vec::new(),
    }
}

pub fn push_validation(csv: &mut Csv, cfg: &TrainConfig, folds: &[FoldResult], mean: &Scores) {
    let lead = |row: String| {
        vec![
            format!("{}", cfg.tr),
            cfg.fire_buffer.name().to_string(),
            cfg.init_features.to_string(),
            cfg.es_metric.name().to_string(),
            row,
        ]
    };
    for f in folds {
        let mut r = lead(format!("fold{}", f.fold));
        r.extend(score_cells(&f.best.scores));
        csv.push(r);
    }
    let mut r = lead("mean".into());
    r.extend(score_cells(mean));
    csv.push(r);
}

/// Per-epoch trace of one fold.
pub fn trace_csv(trace: &[EpochRecord]) -> Csv {
    let mut csv = Csv {
        header: with_scores(&["epoch", "train_loss", "tp", "fn", "tn", "fp"]),
        rows: Vec::new(),
    };
    for r in trace {
        let mut row = vec![r.epoch.to_string(), full(Some(r.train_loss))];
        row.extend(counts_cells(&r.counts));
        row.extend(score_cells(&r.scores));
        csv.push(row);
    }
    csv
}

/// Stored validation metrics of a checkpoint.
pub fn checkpoint_sidecar(fold: usize, f: &FoldResult) -> Csv {
    let mut csv = Csv {
        header: with_scores(&["fold", "epoch", "tp", "fn", "tn", "fp"]),
        rows: Vec::new(),
    };
    let mut row = vec![fold.to_string(), f.best.epoch.to_string()];
    row.extend(counts_cells(&f.best.counts));
    row.extend(score_cells(&f.best.scores));
    csv.push(row);
    csv
}

/// Holdout summary: one row, sensitivity and specificity per period.
pub fn holdout_csv(model: &str, periods: &[(String, ConfusionCounts)]) -> anyhow::Result<Csv> {
    let mut header = vec!["model".to_string()];
    let mut row = vec![model.to_string()];
    for (p, c) in periods {
        if p.contains([',', '\n']) || model.contains([',', '\n']) {
            bail!("names written to CSV cannot contain commas");
        }
        header.extend([format!("{p}_sens"), format!("{p}_spec")]);
        row.extend([fmt4(c.sensitivity()), fmt4(c.specificity())]);
    }
    for (p, c) in periods {
        header.extend([format!("{p}_sens_full"), format!("{p}_spec_full")]);
        row.extend([full(c.sensitivity()), full(c.specificity())]);
    }
    for (p, c) in periods {
        header.extend(["tp", "fn", "tn", "fp"].map(|k| format!("{p}_{k}")));
        row.extend(counts_cells(c));
    }
    Ok(Csv {
        header,
        rows: vec![row],
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelFile {
    pub name: String,
    /// `numeric` or `categorical`.
    pub kind: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub categories: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemaFile {
    pub channels: Vec<ChannelFile>,
}

impl SchemaFile {
    pub fn from_schema(s: &FeatureSchema) -> Self {
        Self {
            channels: s
                .channels()
                .iter()
                .map(|c| match &c.kind {
                    ChannelKind::Numeric => ChannelFile {
                        name: c.name.clone(),
                        kind: "numeric".into(),
                        categories: Vec::new(),
                    },
                    ChannelKind::Categorical { categories } => ChannelFile {
                        name: c.name.clone(),
                        kind: "categorical".into(),
                        categories: categories.clone(),
                    },
                })
                .collect(),
        }
    }

    pub fn to_schema(&self) -> anyhow::Result<FeatureSchema> {
        let channels = self
            .channels
            .iter()
            .map(|c| match c.kind.as_str() {
                "numeric" => Ok(Channel::numeric(&c.name)),
                "categorical" => Ok(Channel {
                    name: c.name.clone(),
                    kind: ChannelKind::Categorical {
                        categories: c.categories.clone(),
                    },
                }),
                k => Err(anyhow!("channel `{}`: unknown kind `{k}`", c.name)),
            })
            .collect::<anyhow::Result<Vec<_>>>()?;
        Ok(FeatureSchema::new(channels)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RangeFile {
    pub channel: usize,
    pub name: String,
    pub min: f32,
    pub max: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingFile {
    pub ranges: Vec<RangeFile>,
}

impl ScalingFile {
    pub fn from_params(p: &ScalingParams) -> Self {
        Self {
            ranges: p
                .ranges
                .iter()
                .map(|r| RangeFile {
                    channel: r.channel,
                    name: r.name.clone(),
                    min: r.min,
                    max: r.max,
                })
                .collect(),
        }
    }

    pub fn to_params(&self) -> ScalingParams {
        ScalingParams {
            ranges: self
                .ranges
                .iter()
                .map(|r| ChannelRange {
                    channel: r.channel,
                    name: r.name.clone(),
                    min: r.min,
                    max: r.max,
                })
                .collect(),
        }
    }
}

pub fn to_json<T: Serialize>(v: &T) -> anyhow::Result<Vec<u8>> {
    let mut s = serde_json::to_vec_pretty(v)?;
    s.push(b'\n');
    Ok(s)
}
