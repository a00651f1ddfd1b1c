//! The five pipeline stages. Each reads its inputs from disk, writes its
//! outputs with write-then-rename, and returns a summary for the caller.
//!
//! Directory layout shared by the stages:
//!
//! ```text
//! <dataset>/schema.json  days.csv  days/<id>.fsk  masks/<id>.msk  [rule.json]
//! <prepared>/ the same, with scaled one-hot stacks, plus scaling.json,
//!             tiles_trainval.csv, tiles_holdout.csv, tiles_sampled.csv
//! <run>/validation.csv  model.unc  model.unc.metrics.csv  selection.json
//!       audit.json  <config>/fold<i>.unc ...
//! ```

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, ensure, Context, Result};
use serde::Serialize;

use fireseg::dataset::{
    apply_scaling, encode_day, extract_tiles, fit_scaling, materialize_batch, sample_tileset, sample_tileset_observed,
    Audit, DayRole, DayStore, FeatureSchema, GridDay, Labels, Provenance, Stage, TileClass, TileSet, TileSpec, TILE,
    WATER,
};
use fireseg::metrics::ConfusionCounts;
use fireseg::synth::generate_dataset;
use fireseg::trainer::{cross_validate, evaluate_tiles, predict_day, FireBuffer, TrainConfig};
use fireseg::unet::{predict_mask, UNetParams};
use fireseg::Tensor;

use crate::config::PipelineConfig;
use crate::exec::Exec;
use crate::formats::{
    encode_checkpoint, encode_fsk, encode_msk, read_checkpoint, read_file, read_fsk, read_msk, write_atomic,
    FeatureStack,
};
use crate::records::{
    checkpoint_sidecar, holdout_csv, push_validation, read_manifest, to_json, trace_csv, validation_csv,
    write_manifest, ScalingFile, SchemaFile,
};
use crate::render::render_pair;

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    write_atomic(path, bytes).with_context(|| format!("cannot write {}", path.display()))
}

fn read_text(path: &Path) -> Result<String> {
    String::from_utf8(read_file(path)?).map_err(|_| anyhow!("{} is not UTF-8", path.display()))
}

fn require_dir(path: &Path, what: &str) -> Result<()> {
    ensure!(path.is_dir(), "{what} directory {} does not exist", path.display());
    Ok(())
}

fn role_name(r: DayRole) -> &'static str {
    match r {
        DayRole::TrainVal => "trainval",
        DayRole::Holdout => "holdout",
    }
}

fn write_day_list(dir: &Path, days: &[(String, DayRole)]) -> Result<()> {
    let mut s = String::from("day_id,role\n");
    for (id, r) in days {
        s.push_str(&format!("{id},{}\n", role_name(*r)));
    }
    write(&dir.join("days.csv"), s.as_bytes())
}

fn read_day_list(dir: &Path) -> Result<Vec<(String, DayRole)>> {
    let path = dir.join("days.csv");
    let text = read_text(&path)?;
    let mut lines = text.lines();
    ensure!(lines.next() == Some("day_id,role"), "{}: bad header", path.display());
    let mut out = Vec::new();
    for (i, l) in lines.enumerate().filter(|(_, l)| !l.is_empty()) {
        let (id, role) = l
            .split_once(',')
            .ok_or_else(|| anyhow!("{} line {}: expected `day_id,role`", path.display(), i + 2))?;
        let role = match role {
            "trainval" => DayRole::TrainVal,
            "holdout" => DayRole::Holdout,
            r => bail!("{} line {}: unknown role `{r}`", path.display(), i + 2),
        };
        ensure!(
            !id.is_empty() && !id.contains(['/', '\\']) && id != "." && id != "..",
            "{} line {}: invalid day id `{id}`",
            path.display(),
            i + 2
        );
        out.push((id.to_owned(), role));
    }
    ensure!(!out.is_empty(), "{} lists no days", path.display());
    Ok(out)
}

fn write_day(dir: &Path, day: &GridDay, names: Vec<String>) -> Result<()> {
    let stack = FeatureStack {
        names,
        data: day.features().clone(),
    };
    write(
        &dir.join("days").join(format!("{}.fsk", day.day_id())),
        &encode_fsk(&stack)?,
    )?;
    write(
        &dir.join("masks").join(format!("{}.msk", day.day_id())),
        &encode_msk(day.mask())?,
    )
}

fn read_day(dir: &Path, id: &str, names: &[String]) -> Result<GridDay> {
    let stack = read_fsk(&dir.join("days").join(format!("{id}.fsk")))?;
    ensure!(
        stack.names == names,
        "day `{id}`: channels {:?} do not match the schema {:?}",
        stack.names,
        names
    );
    let mask = read_msk(&dir.join("masks").join(format!("{id}.msk")))?;
    GridDay::new(id, stack.data, mask).with_context(|| format!("day `{id}`"))
}

fn read_schema(dir: &Path) -> Result<FeatureSchema> {
    let path = dir.join("schema.json");
    let f: SchemaFile = serde_json::from_slice(&read_file(&path)?).with_context(|| format!("{}", path.display()))?;
    f.to_schema().with_context(|| format!("{}", path.display()))
}

fn raw_names(schema: &FeatureSchema) -> Vec<String> {
    schema.channels().iter().map(|c| c.name.clone()).collect()
}

#[derive(Debug, Clone, Serialize)]
struct RuleFile {
    channels: Vec<String>,
    standardise: [(f64, f64); 3],
    coefficients: [f64; 4],
    center: f64,
    steepness: f64,
    amplitude: f64,
    noiseless: bool,
    achieved_fire_rate: f64,
    calibration_rounds: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerateSummary {
    pub days: usize,
    pub holdout_days: usize,
    pub achieved_fire_rate: f64,
}

/// Synthesises a dataset. The planted rule goes to `rule.json`, outside the
/// schema the model sees.
pub fn generate(cfg: &PipelineConfig, out: &Path) -> Result<GenerateSummary> {
    let synth = cfg.synth_config()?;
    let ds = generate_dataset(&synth)?;
    let names = raw_names(&ds.schema);
    let mut list = Vec::new();
    for (day, &h) in ds.days.iter().zip(&ds.holdout) {
        write_day(out, day, names.clone())?;
        list.push((
            day.day_id().to_owned(),
            if h { DayRole::Holdout } else { DayRole::TrainVal },
        ));
    }
    write_day_list(out, &list)?;
    write(
        &out.join("schema.json"),
        &to_json(&SchemaFile::from_schema(&ds.schema))?,
    )?;
    let r = &ds.rule;
    let rule = RuleFile {
        channels: r.channels.iter().map(|&c| names[c].clone()).collect(),
        standardise: r.standardise,
        coefficients: r.coefficients,
        center: r.center,
        steepness: r.steepness,
        amplitude: r.amplitude,
        noiseless: r.noiseless,
        achieved_fire_rate: ds.achieved_fire_rate,
        calibration_rounds: ds.calibration_rounds,
    };
    write(&out.join("rule.json"), &to_json(&rule)?)?;
    Ok(GenerateSummary {
        days: ds.days.len(),
        holdout_days: ds.holdout.iter().filter(|&&h| h).count(),
        achieved_fire_rate: ds.achieved_fire_rate,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct ClassCounts {
    pub fire: usize,
    pub no_fire: usize,
    pub water: usize,
}

impl ClassCounts {
    fn of(set: &TileSet) -> Self {
        Self {
            fire: set.count(TileClass::Fire),
            no_fire: set.count(TileClass::NoFire),
            water: set.count(TileClass::Water),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct PrepareSummary {
    pub unknown_categories: usize,
    pub constant_channels: Vec<String>,
    pub trainval_tiles: ClassCounts,
    pub holdout_tiles: ClassCounts,
    pub sampled_tiles: ClassCounts,
    pub sampling_tr: f64,
    pub sampling_seed: u64,
    pub sampling_requested: usize,
    pub sampling_available: usize,
    pub sampling_short: bool,
}

/// Fits min-max scaling on the train-validation days only, scales and
/// one-hot encodes every day, and writes the tile manifests. Holdout days
/// are tiled but never sampled.
pub fn prepare(cfg: &PipelineConfig, data: &Path, out: &Path) -> Result<PrepareSummary> {
    require_dir(data, "dataset")?;
    let schema = read_schema(data)?;
    let names = raw_names(&schema);
    let list = read_day_list(data)?;
    let mut trainval = Vec::new();
    let mut holdout = Vec::new();
    for (id, role) in &list {
        let day = read_day(data, id, &names)?;
        match role {
            DayRole::TrainVal => trainval.push(day),
            DayRole::Holdout => holdout.push(day),
        }
    }
    ensure!(!trainval.is_empty(), "no train-validation days");
    let scaling = fit_scaling(&trainval, &schema)?;
    let encoded_names = schema.encoded_names();
    let mut unknown = 0;
    let mut encode = |day: &GridDay| -> Result<GridDay> {
        let (enc, u) = encode_day(&apply_scaling(day, &scaling)?, &schema)?;
        unknown += u;
        write_day(out, &enc, encoded_names.clone())?;
        Ok(enc)
    };
    let tv_enc = trainval.iter().map(&mut encode).collect::<Result<Vec<_>>>()?;
    let ho_enc = holdout.iter().map(&mut encode).collect::<Result<Vec<_>>>()?;

    let tv_set = TileSet::extracted(tv_enc.iter().flat_map(extract_tiles).collect());
    let ho_set = TileSet::holdout(&ho_enc);
    let tr = cfg.tr[0];
    let sampled = sample_tileset(&tv_set, tr, cfg.seed)?;
    let s = sampled.sampling.expect("sampled sets record their sampling");

    write(&out.join("schema.json"), &to_json(&SchemaFile::from_schema(&schema))?)?;
    write(
        &out.join("scaling.json"),
        &to_json(&ScalingFile::from_params(&scaling))?,
    )?;
    write_day_list(out, &list)?;
    write(&out.join("tiles_trainval.csv"), write_manifest(&tv_set)?.as_bytes())?;
    write(&out.join("tiles_holdout.csv"), write_manifest(&ho_set)?.as_bytes())?;
    write(&out.join("tiles_sampled.csv"), write_manifest(&sampled)?.as_bytes())?;
    let summary = PrepareSummary {
        unknown_categories: unknown,
        constant_channels: scaling.constant_channels().into_iter().map(String::from).collect(),
        trainval_tiles: ClassCounts::of(&tv_set),
        holdout_tiles: ClassCounts::of(&ho_set),
        sampled_tiles: ClassCounts::of(&sampled),
        sampling_tr: s.tr,
        sampling_seed: s.seed,
        sampling_requested: s.requested,
        sampling_available: s.available,
        sampling_short: s.short(),
    };
    write(&out.join("prepare.json"), &to_json(&summary)?)?;
    Ok(summary)
}

/// A prepared directory loaded into memory.
pub struct Prepared {
    pub store: DayStore,
    pub trainval: TileSet,
    pub holdout: TileSet,
}

pub fn load_prepared(dir: &Path) -> Result<Prepared> {
    require_dir(dir, "prepared")?;
    let names = read_schema(dir)?.encoded_names();
    let mut store = DayStore::new();
    for (id, role) in read_day_list(dir)? {
        store.insert(read_day(dir, &id, &names)?, role)?;
    }
    let manifest = |name: &str, p: Provenance| -> Result<TileSet> {
        let path = dir.join(name);
        let set = read_manifest(&read_text(&path)?, p).with_context(|| format!("{}", path.display()))?;
        ensure!(
            set.provenance == p,
            "{}: provenance `{}`, expected `{}`",
            path.display(),
            set.provenance.name(),
            p.name()
        );
        for t in &set.tiles {
            let role = store.role(&t.day_id).with_context(|| format!("{}", path.display()))?;
            let want = if p == Provenance::Holdout {
                DayRole::Holdout
            } else {
                DayRole::TrainVal
            };
            ensure!(
                role == want,
                "{}: day `{}` has the wrong role",
                path.display(),
                t.day_id
            );
        }
        Ok(set)
    };
    Ok(Prepared {
        trainval: manifest("tiles_trainval.csv", Provenance::Extracted)?,
        holdout: manifest("tiles_holdout.csv", Provenance::Holdout)?,
        store,
    })
}

/// Directory name of one grid configuration.
pub fn config_label(cfg: &TrainConfig) -> String {
    format!(
        "tr{}_fb-{}_if{}_{}",
        cfg.tr,
        cfg.fire_buffer.name(),
        cfg.init_features,
        cfg.es_metric.name()
    )
}

#[derive(Debug, Clone, Serialize)]
pub struct Selection {
    pub config: String,
    pub tr: f64,
    pub fire_buffer: String,
    pub init_features: usize,
    pub es_metric: String,
    pub mean_score: f64,
    pub fold: usize,
    pub epoch: usize,
    pub fold_score: f64,
}

#[derive(Debug, Clone, Serialize)]
struct AuditFile {
    sampling: Vec<String>,
    fire_buffer: Vec<String>,
    holdout_days: Vec<String>,
    leaks: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub selection: Selection,
    pub validation_rows: usize,
    pub audit: Audit,
}

/// Cross-validates every grid configuration and keeps the best fold
/// checkpoint of the configuration with the highest mean early-stopping
/// score as `model.unc`.
pub fn train(cfg: &PipelineConfig, data: &Path, out: &Path, exec: &Exec) -> Result<TrainSummary> {
    let grid = cfg.train_grid()?;
    let Prepared { store, trainval, .. } = load_prepared(data)?;
    let mut audit = Audit::default();
    let mut buffered: Option<DayStore> = None;
    let mut csv = validation_csv();
    let mut best: Option<(f64, Selection, UNetParams, crate::records::Csv)> = None;

    for tc in &grid {
        let sampled = sample_tileset_observed(&trainval, tc.tr, tc.seed, &mut audit)?;
        let day_store = if tc.fire_buffer == FireBuffer::Off {
            &store
        } else {
            if buffered.is_none() {
                let mut b = store.clone();
                let ids: BTreeSet<&str> = trainval.day_ids();
                b.buffer_days(ids, tc.buffer_radius, &mut audit)?;
                buffered = Some(b);
            }
            buffered.as_ref().expect("just set")
        };
        let label = config_label(tc);
        let dir = out.join(&label);
        let cv = cross_validate(&sampled, day_store, tc, exec).with_context(|| format!("config {label}"))?;
        write(&dir.join("tiles_sampled.csv"), write_manifest(&sampled)?.as_bytes())?;
        for f in &cv.folds {
            let ckpt = dir.join(format!("fold{}.unc", f.fold));
            write(&ckpt, &encode_checkpoint(&f.best.params)?)?;
            write(&sidecar(&ckpt), checkpoint_sidecar(f.fold, f).render().as_bytes())?;
            write(
                &dir.join(format!("trace_fold{}.csv", f.fold)),
                trace_csv(&f.trace).render().as_bytes(),
            )?;
        }
        push_validation(&mut csv, tc, &cv.folds, &cv.mean);

        let mean_score = tc.es_metric.of(&cv.mean);
        if best.as_ref().is_none_or(|(s, ..)| mean_score > *s) {
            let scores: Vec<f64> = cv.folds.iter().map(|f| tc.es_metric.of(&f.best.scores)).collect();
            let i = fireseg::metrics::select_best(&scores).ok_or_else(|| anyhow!("non-finite fold score"))?;
            let f = &cv.folds[i];
            let selection = Selection {
                config: label.clone(),
                tr: tc.tr,
                fire_buffer: tc.fire_buffer.name().into(),
                init_features: tc.init_features,
                es_metric: tc.es_metric.name().into(),
                mean_score,
                fold: f.fold,
                epoch: f.best.epoch,
                fold_score: scores[i],
            };
            best = Some((
                mean_score,
                selection,
                f.best.params.clone(),
                checkpoint_sidecar(f.fold, f),
            ));
        }
    }

    let holdout_ids: BTreeSet<&str> = store.days(DayRole::Holdout).map(GridDay::day_id).collect();
    let leaks = audit.leaks(&holdout_ids);
    let audit_file = AuditFile {
        sampling: audit.days(Stage::Sampling).map(String::from).collect(),
        fire_buffer: audit.days(Stage::FireBuffer).map(String::from).collect(),
        holdout_days: holdout_ids.iter().map(|s| s.to_string()).collect(),
        leaks: leaks.iter().map(|(s, d)| format!("{s:?}:{d}")).collect(),
    };
    write(&out.join("audit.json"), &to_json(&audit_file)?)?;
    ensure!(
        leaks.is_empty(),
        "holdout days reached guarded stages: {:?}",
        audit_file.leaks
    );

    let (_, selection, params, side) = best.ok_or_else(|| anyhow!("empty configuration grid"))?;
    let model = out.join("model.unc");
    write(&model, &encode_checkpoint(&params)?)?;
    write(&sidecar(&model), side.render().as_bytes())?;
    write(&out.join("selection.json"), &to_json(&selection)?)?;
    write(&out.join("validation.csv"), csv.render().as_bytes())?;
    Ok(TrainSummary {
        selection,
        validation_rows: csv.rows.len(),
        audit,
    })
}

/// `<checkpoint>.metrics.csv`.
pub fn sidecar(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".metrics.csv");
    PathBuf::from(s)
}

/// Holdout period of a day: the part of its id before the first `-`, or
/// `holdout` for ids without one (so `2019-07-14` belongs to `2019`).
pub fn period_of(day_id: &str) -> &str {
    match day_id.split_once('-') {
        Some((p, _)) if !p.is_empty() => p,
        _ => "holdout",
    }
}

fn load_model(path: &Path, store: &DayStore) -> Result<UNetParams> {
    let params = read_checkpoint(path)?;
    let c = store.channels().unwrap_or(0);
    ensure!(
        params.config().in_channels == c,
        "checkpoint expects {} input channels, data has {c}",
        params.config().in_channels
    );
    Ok(params)
}

/// Pixel-wise holdout metrics per period, on the original labels of every
/// land tile listed in the holdout manifest.
pub fn evaluate(
    cfg: &PipelineConfig,
    checkpoint: &Path,
    data: &Path,
    out: &Path,
    exec: &Exec,
) -> Result<Vec<(String, ConfusionCounts)>> {
    let prepared = load_prepared(data)?;
    ensure!(!prepared.holdout.is_empty(), "holdout manifest is empty");
    let params = load_model(checkpoint, &prepared.store)?;
    let mut periods: Vec<(String, Vec<TileSpec>)> = Vec::new();
    for t in &prepared.holdout.tiles {
        let p = period_of(&t.day_id);
        match periods.iter_mut().find(|(q, _)| q == p) {
            Some((_, v)) => v.push(t.clone()),
            None => periods.push((p.to_owned(), vec![t.clone()])),
        }
    }
    let mut rows = Vec::new();
    for (p, tiles) in periods {
        let c = evaluate_tiles(
            &params,
            &tiles,
            &prepared.store,
            Labels::Original,
            cfg.train.threshold,
            exec,
        )?;
        rows.push((p, c));
    }
    let model = checkpoint
        .file_stem()
        .map_or_else(|| "model".into(), |s| s.to_string_lossy().into_owned());
    write(
        &out.join("holdout.csv"),
        holdout_csv(&model, &rows)?.render().as_bytes(),
    )?;
    Ok(rows)
}

/// A tile named on the command line as `day:row_off:col_off`.
pub fn parse_tile_id(s: &str) -> Result<(String, usize, usize)> {
    let mut it = s.rsplitn(3, ':');
    let (Some(c), Some(r), Some(d)) = (it.next(), it.next(), it.next()) else {
        bail!("tile id `{s}` must look like day:row_off:col_off");
    };
    Ok((
        d.to_owned(),
        r.parse().with_context(|| format!("tile id `{s}`"))?,
        c.parse().with_context(|| format!("tile id `{s}`"))?,
    ))
}

#[derive(Debug, Clone, Default)]
pub struct PredictRequest {
    pub days: Vec<String>,
    pub tiles: Vec<String>,
    pub render: bool,
    pub scale: usize,
}

/// Writes `<id>.msk` predictions, water copied from the truth (and `<id>.ppm` panels with `render`) for
/// whole days and single tiles. With neither requested, predicts every
/// holdout day.
pub fn predict(
    cfg: &PipelineConfig,
    checkpoint: &Path,
    data: &Path,
    req: &PredictRequest,
    out: &Path,
    exec: &Exec,
) -> Result<Vec<PathBuf>> {
    let Prepared { store, .. } = load_prepared(data)?;
    let params = load_model(checkpoint, &store)?;
    let threshold = cfg.train.threshold;
    let mut days = req.days.clone();
    if days.is_empty() && req.tiles.is_empty() {
        days = store.days(DayRole::Holdout).map(|d| d.day_id().to_owned()).collect();
    }
    let mut written = Vec::new();
    let mut emit = |name: String, h: usize, w: usize, truth: &[u8], mut pred: Vec<u8>| -> Result<()> {
        for (p, &l) in pred.iter_mut().zip(truth) {
            if l == WATER {
                *p = WATER;
            }
        }
        let p = out.join(format!("{name}.msk"));
        write(&p, &encode_msk(&fireseg::dataset::Mask::new(h, w, pred.clone())?)?)?;
        written.push(p);
        if req.render {
            let p = out.join(format!("{name}.ppm"));
            write(&p, &render_pair(h, w, truth, &pred, req.scale.max(1))?)?;
            written.push(p);
        }
        Ok(())
    };
    for id in &days {
        let day = store.get(id)?;
        let pred = predict_day(&params, &store, id, threshold, exec)?;
        emit(id.clone(), day.height(), day.width(), day.mask().labels(), pred)?;
    }
    for t in &req.tiles {
        let (day_id, r, c) = parse_tile_id(t)?;
        let day = store.get(&day_id)?;
        ensure!(
            r < day.height() && c < day.width(),
            "tile `{t}` starts outside the {}x{} raster",
            day.height(),
            day.width()
        );
        let spec = TileSpec {
            day_id: day_id.clone(),
            row_off: r,
            col_off: c,
            class: TileClass::NoFire,
        };
        let (x, truth): (Tensor, Vec<u8>) = materialize_batch(&[spec], &store, Labels::Original)?;
        let pred = predict_mask(&params.infer(&x)?, threshold)?;
        emit(format!("{day_id}_r{r}_c{c}"), TILE, TILE, &truth, pred)?;
    }
    Ok(written)
}
