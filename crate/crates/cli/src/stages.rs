use crate::config::PipelineConfig;
use crate::error::{CliError, CliResult};
use crate::manifest;
use rarefy::nn::{config_hash, Checkpoint};
use rarefy::patchset::{build_dataset, read_samples_csv, split, write_samples_csv, DataSplit};
use rarefy::pipeline::{reference_map, validate_period, PeriodValidation};
use rarefy::rarefynet::{refine_map, RarefyModel};
use rarefy::raster::ascii::{read_parcels, read_raster, write_parcels, write_raster};
use rarefy::raster::{compute_ndvi, RasterGrid};
use rarefy::stats::{anova_text, write_anova_csv, write_groups_csv};
use rarefy::synth::{bands_from_ndvi, generate};
use rarefy::train::{hyper_search, lr_range_test, suggest_eta, train, TrainReport};
use rarefy::vigor::{classify_map, fit_raster, ClassMap};
use serde::Serialize;
use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

/// NIR reflectance used when splitting synthetic NDVI into bands.
const SYNTH_NIR: f64 = 0.5;

pub struct Stage<'a> {
    pub cfg: &'a PipelineConfig,
    /// Periods selected for per-period stages.
    pub periods: Vec<String>,
    /// Period the dataset and model come from.
    pub train_period: String,
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text)?;
    Ok(())
}

fn save_raster(raster: &RasterGrid, path: &Path) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    write_raster(raster, path)?;
    Ok(())
}

fn load_raster(path: &Path) -> CliResult<RasterGrid> {
    read_raster(path).map_err(|e| with_path(e, path))
}

fn with_path(e: rarefy::Error, path: &Path) -> CliError {
    match e {
        rarefy::Error::Io(io) => {
            CliError::Core(rarefy::Error::Io(std::io::Error::new(io.kind(), format!("{}: {io}", path.display()))))
        }
        other => CliError::Core(other),
    }
}

fn to_toml<T: Serialize>(value: &T) -> CliResult<String> {
    toml::to_string(value).map_err(|e| CliError::Config(e.to_string()))
}

impl Stage<'_> {
    pub fn uav_ndvi(&self, p: &str) -> PathBuf {
        self.cfg.out(&format!("ndvi/uav_ndvi_{p}.asc"))
    }

    pub fn reference(&self, p: &str) -> PathBuf {
        self.cfg.out(&format!("reference/reference_{p}.asc"))
    }

    pub fn refined(&self, p: &str) -> PathBuf {
        self.cfg.out(&format!("refined/refined_{p}.asc"))
    }

    pub fn classes(&self, kind: &str, p: &str) -> PathBuf {
        self.cfg.out(&format!("classes/{kind}_classes_{p}.asc"))
    }

    fn sat(&self, p: &str) -> PathBuf {
        self.cfg.expand(&self.cfg.paths.sat, p)
    }

    fn parcels(&self) -> PathBuf {
        self.cfg.expand(&self.cfg.paths.parcels, &self.train_period)
    }

    fn checkpoint(&self) -> PathBuf {
        self.cfg.out("model/checkpoint.json")
    }

    fn load_split(&self) -> CliResult<DataSplit> {
        let read = |name: &str| -> CliResult<_> {
            let path = self.cfg.out(name);
            let file = File::open(&path).map_err(|e| with_path(e.into(), &path))?;
            Ok(read_samples_csv(file)?)
        };
        Ok(DataSplit { train: read("dataset/train.csv")?, test: read("dataset/test.csv")?, seed: self.cfg.seed })
    }

    /// Synthetic field: satellite NDVI, UAV bands and NDVI, parcels, truth
    /// classes and a manifest naming each file by period and role.
    pub fn synth_gen(&self) -> CliResult<()> {
        #[derive(Serialize)]
        struct Entry {
            period: String,
            role: &'static str,
            dataset: String,
            path: String,
        }
        let spec = &self.cfg.field;
        let dir = self.cfg.out("synth");
        let mut entries = Vec::new();
        for p in &self.periods {
            let period = generate(spec, self.cfg.period_index(p)?)?;
            let (red, nir) = bands_from_ndvi(&period.uav, SYNTH_NIR);
            for (role, dataset, name, raster) in [
                ("sat_ndvi", format!("X_raw^{p}"), format!("sat_ndvi_{p}.asc"), &period.sat),
                ("uav_ndvi", format!("Y_UAV^{p}"), format!("uav_ndvi_{p}.asc"), &period.uav),
                ("uav_red", format!("Y_UAV^{p}"), format!("uav_red_{p}.asc"), &red),
                ("uav_nir", format!("Y_UAV^{p}"), format!("uav_nir_{p}.asc"), &nir),
            ] {
                save_raster(raster, &dir.join(&name))?;
                entries.push(Entry { period: p.clone(), role, dataset, path: name });
            }
        }
        fs::create_dir_all(&dir)?;
        write_parcels(&spec.parcel_mask()?, dir.join("parcels.asc"))?;
        save_raster(&spec.truth_classes()?.to_raster()?, &dir.join("truth.asc"))?;
        let text = serde_json::to_string_pretty(&serde_json::json!({
            "field_seed": spec.seed,
            "parcels": "parcels.asc",
            "truth": "truth.asc",
            "files": entries,
        }))
        .map_err(rarefy::Error::from)?;
        write_text(&dir.join("manifest.json"), &(text + "\n"))?;
        write_text(&dir.join("field.toml"), &to_toml(spec)?)
    }

    pub fn ndvi(&self) -> CliResult<()> {
        for p in &self.periods {
            let red = load_raster(&self.cfg.expand(&self.cfg.paths.red, p))?;
            let nir = load_raster(&self.cfg.expand(&self.cfg.paths.nir, p))?;
            save_raster(&compute_ndvi(&red, &nir)?, &self.uav_ndvi(p))?;
        }
        Ok(())
    }

    /// Canopy-only reference on the satellite grid.
    pub fn downsample(&self) -> CliResult<()> {
        for p in &self.periods {
            let uav = load_raster(&self.uav_ndvi(p))?;
            let sat = load_raster(&self.sat(p))?;
            save_raster(&reference_map(&uav, sat.geometry(), self.cfg.canopy_threshold)?, &self.reference(p))?;
        }
        Ok(())
    }

    /// Split and augmented training samples of the training period.
    pub fn extract(&self) -> CliResult<()> {
        let p = &self.train_period;
        let sat = load_raster(&self.sat(p))?;
        let reference = load_raster(&self.reference(p))?;
        let parcels = read_parcels(self.parcels()).map_err(|e| with_path(e, &self.parcels()))?;
        let samples = build_dataset(&sat, &reference, Some(&parcels))?;
        let mut data = split(&samples, self.cfg.test_fraction, self.cfg.seed)?;
        data.augment_train(&self.cfg.augment_steps)?;
        write_samples_csv(&data.train, create(&self.cfg.out("dataset/train.csv"))?)?;
        write_samples_csv(&data.test, create(&self.cfg.out("dataset/test.csv"))?)?;
        Ok(())
    }

    pub fn train(&self) -> CliResult<TrainReport> {
        let data = self.load_split()?;
        let mut model = RarefyModel::build(self.cfg.model.clone(), self.cfg.seed)?;
        let report = train(&mut model, &data, &self.cfg.train)?;
        fs::create_dir_all(self.cfg.out("model"))?;
        model.save(self.checkpoint())?;
        report.write_csv(create(&self.cfg.out("model/train_report.csv"))?)?;
        write_text(&self.cfg.out("model/train_config.toml"), &to_toml(&self.cfg.train)?)?;
        Ok(report)
    }

    pub fn lr_find(&self) -> CliResult<()> {
        let data = self.load_split()?;
        let model = RarefyModel::build(self.cfg.model.clone(), self.cfg.seed)?;
        let lr = &self.cfg.lr_find;
        let curve = lr_range_test(&model, &data.train, lr.eta_min, lr.eta_max, lr.steps, &self.cfg.train)?;
        let mut w = csv::Writer::from_writer(create(&self.cfg.out("lr/lr_curve.csv"))?);
        w.write_record(["step", "eta", "loss", "smoothed"]).map_err(rarefy::Error::from)?;
        for (i, pt) in curve.iter().enumerate() {
            w.write_record([i.to_string(), pt.eta.to_string(), pt.loss.to_string(), pt.smoothed.to_string()])
                .map_err(rarefy::Error::from)?;
        }
        w.flush()?;
        let suggestion = suggest_eta(&curve).map_or_else(|| "none".to_string(), |e| e.to_string());
        write_text(&self.cfg.out("lr/suggestion.txt"), &format!("suggested_eta {suggestion}\n"))
    }

    pub fn hyper_search(&self) -> CliResult<()> {
        let data = self.load_split()?;
        let s = &self.cfg.search;
        let outcome = hyper_search(&self.cfg.model, &data, &s.space, s.budget, &s.refine, &self.cfg.train, self.cfg.seed)?;
        outcome.write_leaderboard_csv(create(&self.cfg.out("search/leaderboard.csv"))?)?;
        write_text(&self.cfg.out("search/best_train.toml"), &to_toml(&outcome.best)?)
    }

    /// Loads the checkpoint after checking it was trained with the
    /// configured network.
    fn load_model(&self) -> CliResult<RarefyModel> {
        let path = self.checkpoint();
        let ck = Checkpoint::load(&path).map_err(|e| with_path(e, &path))?;
        let expected = config_hash(&self.cfg.model)?;
        if ck.config_hash != expected {
            return Err(rarefy::Error::ChecksumMismatch { expected, found: ck.config_hash }.into());
        }
        Ok(RarefyModel::from_checkpoint(&ck)?)
    }

    pub fn refine(&self) -> CliResult<()> {
        let model = self.load_model()?;
        for p in &self.periods {
            let sat = load_raster(&self.sat(p))?;
            save_raster(&refine_map(&model, &sat)?, &self.refined(p))?;
        }
        Ok(())
    }

    /// Vigor classes of the reference and, when present, the refined map.
    pub fn cluster(&self) -> CliResult<()> {
        for p in &self.periods {
            let mut inputs = vec![("reference", self.reference(p))];
            if self.refined(p).exists() {
                inputs.push(("refined", self.refined(p)));
            }
            for (kind, path) in inputs {
                let raster = load_raster(&path)?;
                let fit = fit_raster(&raster, &self.cfg.kmeans)?;
                let classes = classify_map(&raster, Some(&fit), &self.cfg.kmeans)?;
                save_raster(&classes.to_raster()?, &self.classes(kind, p))?;
                write_text(&self.cfg.out(&format!("classes/{kind}_centroids_{p}.txt")), &fit.report_text())?;
            }
        }
        Ok(())
    }

    /// Per-parcel ANOVA of raw, refined and reference maps under the
    /// reference classes, plus agreement with the reference.
    pub fn validate(&self) -> CliResult<Vec<PeriodValidation>> {
        let parcels = read_parcels(self.parcels()).map_err(|e| with_path(e, &self.parcels()))?;
        let mut out = Vec::new();
        for p in &self.periods {
            let reference = load_raster(&self.reference(p))?;
            let raw = load_raster(&self.sat(p))?;
            let refined = if self.refined(p).exists() { Some(load_raster(&self.refined(p))?) } else { None };
            let classes = ClassMap::from_raster(&load_raster(&self.classes("reference", p))?)?;
            let v = validate_period(p, &reference, &raw, refined.as_ref(), &parcels, &classes)?;
            let mut buf = Vec::new();
            for (i, dg) in v.groups.iter().enumerate() {
                let mut part = Vec::new();
                write_groups_csv(&dg.dataset, &dg.groups, &mut part)?;
                let start = if i == 0 { 0 } else { part.iter().position(|&b| b == b'\n').map_or(part.len(), |n| n + 1) };
                buf.extend_from_slice(&part[start..]);
            }
            write_text(&self.cfg.out(&format!("validate/groups_{p}.csv")), &String::from_utf8_lossy(&buf))?;
            out.push(v);
        }
        let mut text = String::new();
        let mut rows = Vec::new();
        for v in &out {
            let _ = writeln!(text, "Period {}\n", v.period);
            text.push_str(&anova_text(&v.rows));
            text.push('\n');
            rows.extend(v.rows.iter().cloned());
        }
        write_text(&self.cfg.out("validate/anova.txt"), &text)?;
        write_anova_csv(&rows, create(&self.cfg.out("validate/anova.csv"))?)?;
        let mut w = csv::Writer::from_writer(create(&self.cfg.out("validate/agreement.csv"))?);
        w.write_record(["period", "dataset", "rmse", "pearson"]).map_err(rarefy::Error::from)?;
        for v in &out {
            for a in &v.agreement {
                let r = a.pearson.map(|r| r.to_string()).unwrap_or_default();
                w.write_record([v.period.as_str(), a.dataset.as_str(), &a.rmse.to_string(), &r])
                    .map_err(rarefy::Error::from)?;
            }
        }
        w.flush()?;
        Ok(out)
    }

    /// Plain-text run summary, then a content hash of every artifact.
    pub fn report(&self) -> CliResult<()> {
        let mut s = String::new();
        let _ = writeln!(s, "seed {}", self.cfg.seed);
        let _ = writeln!(s, "model_parameters {}", self.cfg.model.param_count()?);
        let _ = writeln!(s, "model_config_hash {}", config_hash(&self.cfg.model)?);
        if let Ok(text) = fs::read_to_string(self.cfg.out("model/train_report.csv")) {
            let rows: Vec<&str> = text.lines().skip(1).collect();
            let _ = writeln!(s, "epochs {}", rows.len());
            if let Some(last) = rows.last() {
                let cols: Vec<&str> = last.split(',').collect();
                let _ = writeln!(s, "final_train_loss {}", cols.get(1).unwrap_or(&""));
                let _ = writeln!(s, "final_test_loss {}", cols.get(2).unwrap_or(&""));
            }
        }
        if let Ok(text) = fs::read_to_string(self.cfg.out("validate/agreement.csv")) {
            let _ = writeln!(s, "\nperiod dataset rmse pearson");
            for line in text.lines().skip(1) {
                let _ = writeln!(s, "{}", line.replace(',', " "));
            }
        }
        if let Ok(text) = fs::read_to_string(self.cfg.out("validate/anova.csv")) {
            let _ = writeln!(s, "\ndataset parcel p_value");
            for line in text.lines().skip(1) {
                let cols: Vec<&str> = line.split(',').collect();
                if cols.len() == 8 && (cols[2] == "Classes" || cols[2].is_empty()) {
                    let p = if cols[7].is_empty() { "n/a" } else { cols[7] };
                    let _ = writeln!(s, "{} {} {}", cols[0], cols[1], p);
                }
            }
        }
        write_text(&self.cfg.out("report/summary.txt"), &s)?;
        manifest::write(&self.cfg.out_dir)
    }
}
