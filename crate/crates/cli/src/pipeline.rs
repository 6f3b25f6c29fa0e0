use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use reverb_doa::eval::{self, EvalResult, Method};
use reverb_doa::features::{
    extract_features, load_features, max_balanced, save_features, stream_spectra, FeatureSet, InputSample,
    NormStats, StftConfig,
};
use reverb_doa::room_sim::{generate_room_dataset, load_signals, save_signals, signal_paths, MicSignals, Preset, RoomConfig};
use reverb_doa::srp::{estimate_doa_srp, SteeringTable};
use reverb_doa::vae::{
    predict_indices, save_checkpoint, load_checkpoint, train_supervised_cnn, train_vae_ssl, CheckpointManifest,
    LossReport, ModelParams, NetConfig, TrainConfig,
};
use serde::{Deserialize, Serialize};

use crate::config::{Precision, Settings};
use crate::LabError;

/// Candidate alpha values searched by `alpha-search`.
pub const ALPHA_GRID: [f64; 10] = [10.0, 20.0, 30.0, 40.0, 50.0, 60.0, 70.0, 80.0, 90.0, 100.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub stage: String,
    pub seconds: f64,
}

/// What a command did: inputs, every file written, and how long it took.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_digest: String,
    pub settings: Settings,
    pub seeds: Vec<u64>,
    pub presets: Vec<String>,
    pub artifacts: Vec<PathBuf>,
    pub frame_counts: Vec<(String, usize)>,
    pub timings: Vec<Timing>,
}

/// One simulated dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DatasetId {
    pub preset: Preset,
    pub seed: u64,
}

impl DatasetId {
    pub fn stem(&self) -> String {
        format!("{}_{}", self.preset, self.seed)
    }
}

/// A trained model together with what is needed to score it.
#[derive(Debug, Clone)]
pub struct Trained {
    pub method: Method,
    pub params: ModelParams<f64>,
    pub report: LossReport,
    pub labeled: Vec<usize>,
    pub j: usize,
}

/// Windows scored for one room configuration.
#[derive(Debug, Clone)]
pub struct EvalSet {
    pub preset: String,
    pub dataset: DatasetId,
    pub samples: Vec<InputSample>,
}

pub struct Lab {
    pub settings: Settings,
    pub manifest: RunManifest,
    stft: StftConfig,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> LabError + '_ {
    move |source| LabError::Io { path: path.to_path_buf(), source }
}

/// Highest validation accuracy; ties keep the smaller alpha.
pub fn pick_alpha(table: &[(f64, f64)]) -> Option<f64> {
    let mut best: Option<(f64, f64)> = None;
    for &(a, acc) in table {
        match best {
            Some((ba, bacc)) if acc < bacc || (acc == bacc && a >= ba) => {}
            _ => best = Some((a, acc)),
        }
    }
    best.map(|b| b.0)
}

impl Lab {
    pub fn new(settings: Settings, command: &str) -> Self {
        let manifest = RunManifest {
            command: command.to_string(),
            config_digest: settings.digest(),
            settings: settings.clone(),
            seeds: vec![],
            presets: vec![],
            artifacts: vec![],
            frame_counts: vec![],
            timings: vec![],
        };
        Lab { settings, manifest, stft: StftConfig::default() }
    }

    fn timed<T>(&mut self, stage: &str, f: impl FnOnce(&mut Self) -> Result<T, LabError>) -> Result<T, LabError> {
        let t0 = Instant::now();
        let out = f(self)?;
        self.manifest.timings.push(Timing { stage: stage.to_string(), seconds: t0.elapsed().as_secs_f64() });
        Ok(out)
    }

    fn record(&mut self, path: PathBuf) {
        if !self.manifest.artifacts.contains(&path) {
            self.manifest.artifacts.push(path);
        }
    }

    fn note_frames(&mut self, stem: String, frames: usize) {
        if !self.manifest.frame_counts.iter().any(|(s, _)| *s == stem) {
            self.manifest.frame_counts.push((stem, frames));
        }
    }

    fn note_dataset(&mut self, id: DatasetId) {
        if !self.manifest.seeds.contains(&id.seed) {
            self.manifest.seeds.push(id.seed);
        }
        let name = id.preset.to_string();
        if !self.manifest.presets.contains(&name) {
            self.manifest.presets.push(name);
        }
    }

    fn dir(&self, sub: &str) -> PathBuf {
        self.settings.out.join(sub)
    }

    fn room(&self, preset: Preset) -> RoomConfig {
        RoomConfig::preset(preset)
    }

    pub fn classes(&self) -> usize {
        self.room(self.settings.preset).grid.len()
    }

    pub fn grid(&self) -> Vec<f64> {
        self.room(self.settings.preset).grid.angles().to_vec()
    }

    pub fn train_id(&self) -> DatasetId {
        DatasetId { preset: self.settings.preset, seed: self.settings.seed }
    }

    pub fn val_id(&self) -> DatasetId {
        match self.settings.preset {
            Preset::Desk => DatasetId { preset: Preset::Desk, seed: self.settings.seed + 1 },
            _ => DatasetId { preset: Preset::Validation, seed: self.settings.seed },
        }
    }

    /// A realization never touched by training or model selection.
    pub fn holdout_id(&self) -> DatasetId {
        DatasetId { preset: Preset::Desk, seed: self.settings.seed + 2 }
    }

    fn net(&self) -> Result<NetConfig, LabError> {
        let w = self.settings.window;
        if w % 4 != 0 {
            return Err(LabError::Config(format!("window of {w} frames is not a multiple of 4")));
        }
        Ok(NetConfig { rows: w, cols: self.stft.bins(), ..NetConfig::standard(self.classes()) })
    }

    /// Write the dataset's signal files. Always regenerates.
    pub fn simulate(&mut self, id: DatasetId) -> Result<usize, LabError> {
        let room = self.room(id.preset);
        let sig = generate_room_dataset(&room, id.seed)?;
        let (a, b) = save_signals(&self.dir("signals"), id.preset.name(), id.seed, &room, &sig)?;
        self.record(a);
        self.record(b);
        self.note_dataset(id);
        Ok(sig.spans.len())
    }

    /// Signals as stored on disk, simulating them first if needed.
    pub fn signals(&mut self, id: DatasetId) -> Result<MicSignals, LabError> {
        let (path, _) = signal_paths(&self.dir("signals"), id.preset.name(), id.seed);
        if !path.exists() {
            self.simulate(id)?;
        }
        self.note_dataset(id);
        Ok(load_signals(&path)?.1)
    }

    /// Sets normalized with their own statistics get a distinct name, since
    /// the same realization can also serve as another run's validation set.
    fn feature_stem(&self, id: DatasetId, stride: usize, fitted: bool) -> String {
        let tag = if fitted { "_fit" } else { "" };
        format!("{}_w{}s{}{tag}", id.stem(), self.settings.window, stride)
    }

    /// Windowed, normalized features. `stats: None` fits the normalization
    /// to this dataset. Files are reused when their sidecar matches.
    pub fn features(&mut self, id: DatasetId, stride: usize, stats: Option<NormStats>) -> Result<FeatureSet, LabError> {
        let dir = self.dir("features");
        let stem = self.feature_stem(id, stride, stats.is_none());
        let json = dir.join(format!("{stem}.json"));
        if json.exists() {
            let set = load_features(&json)?;
            let m = &set.meta;
            if m.p == self.settings.window && m.stride == stride && (stats.is_none() || m.norm == stats) {
                self.record(json.with_extension("feat"));
                self.record(json);
                self.note_dataset(id);
                self.note_frames(stem, m.frame_count);
                return Ok(set);
            }
        }
        let sig = self.signals(id)?;
        let grid = self.room(id.preset).grid.angles().to_vec();
        let set = extract_features(&sig, &grid, self.stft, self.settings.window, stride, stats, &id.stem())?;
        let (a, b) = save_features(&dir, &stem, &set)?;
        self.note_frames(stem, set.meta.frame_count);
        self.record(a.clone());
        self.record(b);
        // reload so every consumer sees the stored precision
        Ok(load_features(&a)?)
    }

    pub fn train_features(&mut self) -> Result<FeatureSet, LabError> {
        let stride = self.settings.stride;
        self.features(self.train_id(), stride, None)
    }

    fn norm(&mut self) -> Result<NormStats, LabError> {
        self.train_features()?
            .meta
            .norm
            .ok_or_else(|| LabError::Numerical("training features have no normalization".into()))
    }

    /// Training set, unlabeled pool and validation set, all normalized with
    /// the training statistics.
    pub fn all_features(&mut self) -> Result<(FeatureSet, FeatureSet, FeatureSet), LabError> {
        let train = self.train_features()?;
        let stats = self.norm()?;
        let pool = self.features(self.train_id(), self.settings.unlabeled_stride, Some(stats))?;
        let val = self.features(self.val_id(), self.settings.stride, Some(stats))?;
        Ok((train, pool, val))
    }

    /// Resolved label budget: `None` is one per DOA, `0` the balanced maximum.
    pub fn label_budget(&mut self) -> Result<usize, LabError> {
        let t = self.classes();
        match self.settings.j {
            None => Ok(t),
            Some(0) => {
                let train = self.train_features()?;
                Ok(t * max_balanced(&train.samples, t))
            }
            Some(j) if j % t == 0 => Ok(j),
            Some(j) => Err(LabError::Config(format!("J = {j} is not a multiple of {t} directions"))),
        }
    }

    fn train_config(&self, j: usize, alpha: f64) -> TrainConfig {
        let s = &self.settings;
        TrainConfig {
            labeled_count: j,
            alpha,
            lr: s.lr,
            batch: s.batch,
            epochs: s.epochs,
            seed: s.seed,
            mc_samples: s.mc_samples,
            chunk_rows: 64,
        }
    }

    /// Train without writing a checkpoint.
    pub fn fit(&mut self, method: Method, alpha: f64) -> Result<Trained, LabError> {
        let j = self.label_budget()?;
        let (train, pool, val) = self.all_features()?;
        let t = self.classes();
        let labeled = reverb_doa::features::select_balanced(&train.samples, t, j / t, self.settings.seed)?;
        let lab: Vec<InputSample> = labeled.iter().map(|&i| train.samples[i].clone()).collect();
        let vals: Vec<InputSample> = val.samples.into_iter().filter(|s| s.label.is_some()).collect();
        let net = self.net()?;
        let cfg = self.train_config(j, alpha);
        let prec = self.settings.precision;
        let stage = format!("train {method}");
        let (params, report) = self.timed(&stage, |_| {
            let out = match (method, prec) {
                (Method::VaeSsl, Precision::F32) => {
                    train_vae_ssl::<f32>(net, &lab, &pool.samples, &vals, &cfg).map(|(p, r)| (p.cast(), r))
                }
                (Method::VaeSsl, Precision::F64) => train_vae_ssl::<f64>(net, &lab, &pool.samples, &vals, &cfg),
                (Method::Cnn, Precision::F32) => {
                    train_supervised_cnn::<f32>(net, &lab, &vals, &cfg).map(|(p, r)| (p.cast(), r))
                }
                (Method::Cnn, Precision::F64) => train_supervised_cnn::<f64>(net, &lab, &vals, &cfg),
                (Method::SrpPhat, _) => return Err(LabError::Config("SRP-PHAT has nothing to train".into())),
            };
            Ok(out?)
        })?;
        if !params.is_finite() {
            return Err(LabError::Numerical(format!("{method} parameters diverged")));
        }
        Ok(Trained { method, params, report, labeled, j })
    }

    fn checkpoint_stem(&self, method: Method, j: usize) -> String {
        format!("{method}_{}_J{j}_s{}", self.settings.preset, self.settings.seed)
    }

    /// Train and write the checkpoint plus the per-epoch loss CSV.
    pub fn train(&mut self, method: Method) -> Result<Trained, LabError> {
        let alpha = self.settings.alpha;
        let tr = self.fit(method, alpha)?;
        let mut m = CheckpointManifest::describe(method.name(), &tr.params.net);
        m.epoch = tr.report.best_epoch;
        m.val_acc = tr.report.best_val_acc;
        m.norm = Some(self.norm()?);
        m.alpha = alpha;
        m.labeled_count = tr.j;
        m.seed = self.settings.seed;
        m.grid = self.grid();
        let stem = self.checkpoint_stem(method, tr.j);
        let (a, b) = save_checkpoint(&self.dir("checkpoints"), &stem, &tr.params, &m)?;
        self.record(a);
        self.record(b);
        let loss = self.settings.out.join(format!("loss_{method}_{}_{}.csv", self.settings.preset, tr.j));
        fs::write(&loss, tr.report.to_csv()).map_err(io_err(&loss))?;
        self.record(loss);
        Ok(tr)
    }

    /// Load a checkpoint written by [`Lab::train`] for the current settings.
    pub fn load_trained(&mut self, method: Method) -> Result<Trained, LabError> {
        let j = self.label_budget()?;
        let path = self.dir("checkpoints").join(format!("{}.json", self.checkpoint_stem(method, j)));
        if !path.exists() {
            return Err(LabError::Io {
                path,
                source: std::io::Error::new(std::io::ErrorKind::NotFound, "no checkpoint; run `train` first"),
            });
        }
        let (params, m) = load_checkpoint(&path)?;
        if m.norm != Some(self.norm()?) {
            return Err(LabError::Format { path, msg: "checkpoint normalization differs from the features".into() });
        }
        let train = self.train_features()?;
        let t = self.classes();
        let labeled = reverb_doa::features::select_balanced(&train.samples, t, j / t, m.seed)?;
        let report = LossReport { method: m.method.clone(), epochs: vec![], best_epoch: m.epoch, best_val_acc: m.val_acc };
        Ok(Trained { method, params, report, labeled, j })
    }

    /// Alpha grid search on validation accuracy. Returns the table and the
    /// chosen alpha.
    pub fn alpha_search(&mut self) -> Result<(Vec<(f64, f64)>, f64), LabError> {
        let mut table = vec![];
        for a in ALPHA_GRID {
            let tr = self.fit(Method::VaeSsl, a)?;
            table.push((a, tr.report.best_val_acc));
        }
        let best = pick_alpha(&table).expect("grid is not empty");
        let j = self.label_budget()?;
        let path = self.settings.out.join(format!("alpha_search_{}_{j}.csv", self.settings.preset));
        let mut text = String::from("alpha,val_acc\n");
        for (a, acc) in &table {
            text.push_str(&format!("{a},{acc}\n"));
        }
        text.push_str(&format!("best,{best}\n"));
        fs::create_dir_all(&self.settings.out).map_err(io_err(&self.settings.out))?;
        fs::write(&path, text).map_err(io_err(&path))?;
        self.record(path);
        Ok((table, best))
    }

    /// Windows scored for each room configuration. On the training room these
    /// are the single-DOA windows whose labels were not used; when every
    /// label was used, a held-out realization takes their place.
    pub fn eval_sets(&mut self, labeled: &[usize]) -> Result<Vec<EvalSet>, LabError> {
        let train = self.train_features()?;
        let stats = self.norm()?;
        let unused: Vec<InputSample> = train
            .samples
            .iter()
            .enumerate()
            .filter(|(i, s)| s.label.is_some() && !labeled.contains(i))
            .map(|(_, s)| s.clone())
            .collect();
        let mut sets = vec![];
        let train_id = self.train_id();
        if !unused.is_empty() {
            sets.push(EvalSet { preset: train_id.preset.to_string(), dataset: train_id, samples: unused });
        }
        let others: Vec<DatasetId> = match self.settings.preset {
            Preset::Desk if sets.is_empty() => vec![self.holdout_id()],
            Preset::Desk => vec![],
            _ => [Preset::Validation, Preset::Test1, Preset::Test2]
                .into_iter()
                .map(|preset| DatasetId { preset, seed: self.settings.seed })
                .collect(),
        };
        for id in others {
            let set = self.features(id, self.settings.stride, Some(stats))?;
            let samples = set.samples.into_iter().filter(|s| s.label.is_some()).collect();
            sets.push(EvalSet { preset: id.preset.to_string(), dataset: id, samples });
        }
        Ok(sets)
    }

    /// Grid-index estimates for one set.
    pub fn estimate(&mut self, method: Method, model: Option<&Trained>, set: &EvalSet) -> Result<Vec<usize>, LabError> {
        match (method, model) {
            (Method::SrpPhat, _) => {
                let room = self.room(set.dataset.preset);
                let sig = self.signals(set.dataset)?;
                let spectra = stream_spectra(&sig, self.stft)?;
                let table = SteeringTable::new(room.spacing(), room.c, room.fs, self.stft.nfft, room.grid.clone())?;
                let w = self.settings.window;
                set.samples
                    .iter()
                    .map(|s| {
                        let r = s.start_frame..s.start_frame + w;
                        Ok(estimate_doa_srp(&spectra.d1[r.clone()], &spectra.d2[r], &table)?)
                    })
                    .collect()
            }
            (_, Some(m)) => {
                let xs: Vec<&[f64]> = set.samples.iter().map(|s| s.phase.as_slice()).collect();
                Ok(predict_indices(&m.params, &xs)?)
            }
            (_, None) => Err(LabError::Config(format!("{method} needs a trained model"))),
        }
    }

    /// Score every method on every evaluation set, writing histogram CSVs.
    /// Results tables are left to [`Lab::write_tables`].
    pub fn evaluate(&mut self, models: &[Trained], methods: &[Method]) -> Result<Vec<EvalResult>, LabError> {
        let labeled = models.first().map(|m| m.labeled.clone()).unwrap_or_default();
        let j = match models.first() {
            Some(m) => m.j,
            None => self.label_budget()?,
        };
        let sets = self.timed("features for evaluation", |lab| {
            let t = lab.classes();
            let default_labeled = if labeled.is_empty() {
                let train = lab.train_features()?;
                reverb_doa::features::select_balanced(&train.samples, t, j / t, lab.settings.seed)?
            } else {
                labeled
            };
            lab.eval_sets(&default_labeled)
        })?;
        let mut results = vec![];
        for set in &sets {
            let grid = self.room(set.dataset.preset).grid;
            let truths: Vec<usize> = set.samples.iter().map(|s| s.label.expect("single-DOA windows only")).collect();
            for &method in methods {
                let model = models.iter().find(|m| m.method == method);
                let est = self.timed(&format!("evaluate {method} on {}", set.preset), |lab| lab.estimate(method, model, set))?;
                let jj = method.uses_labels().then_some(j);
                let r = eval::evaluate_indices(method, &set.preset, jj, &est, &truths, &grid)?;
                let hist = eval::normalize_rows(&r.histogram);
                let path = self.settings.out.join(eval::histogram_file_name(method, &set.preset, jj));
                fs::write(&path, eval::histogram_csv(&hist, &grid)).map_err(io_err(&path))?;
                self.record(path);
                results.push(r);
            }
        }
        Ok(results)
    }

    /// `results_<preset>.csv` and an aligned-text twin per evaluated preset.
    pub fn write_tables(&mut self, results: &[EvalResult]) -> Result<Vec<String>, LabError> {
        let mut presets: Vec<String> = results.iter().map(|r| r.preset.clone()).collect();
        presets.dedup();
        let mut texts = vec![];
        for p in presets {
            let rows: Vec<EvalResult> = results.iter().filter(|r| r.preset == p).cloned().collect();
            let table = eval::emit_results_table(&rows);
            let csv = self.settings.out.join(format!("results_{p}.csv"));
            fs::write(&csv, table.to_csv()).map_err(io_err(&csv))?;
            let txt = self.settings.out.join(format!("results_{p}.txt"));
            fs::write(&txt, table.to_text()).map_err(io_err(&txt))?;
            self.record(csv);
            self.record(txt);
            texts.push(table.to_text());
        }
        Ok(texts)
    }

    pub fn learned_methods(&self) -> Vec<Method> {
        match self.settings.method {
            Some(Method::SrpPhat) => vec![],
            Some(m) => vec![m],
            None => vec![Method::VaeSsl, Method::Cnn],
        }
    }

    pub fn scored_methods(&self) -> Vec<Method> {
        match self.settings.method {
            Some(m) => vec![m],
            None => Method::ALL.to_vec(),
        }
    }

    /// Write `manifest_<command>.json` into the output directory.
    pub fn finish(&mut self) -> Result<PathBuf, LabError> {
        self.manifest.artifacts.sort();
        let path = self.settings.out.join(format!("manifest_{}.json", self.manifest.command));
        fs::create_dir_all(&self.settings.out).map_err(io_err(&self.settings.out))?;
        let text = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        fs::write(&path, text).map_err(io_err(&path))?;
        Ok(path)
    }
}
