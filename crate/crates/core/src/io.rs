//! On-disk formats: scene and prediction JSON, dataset manifests and the
//! JSON-lines training log.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::decode::ScenePrediction;
use crate::error::{Error, Result};
use crate::geometry::{synth_scene, MapScene};
use crate::train::LogEntry;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const FORMAT_VERSION: u32 = 1;

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Json {
        path: path.into(),
        source: e,
    })?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Json {
        path: path.into(),
        source: e,
    })
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub seed: u64,
    /// Scene file names relative to the manifest, in seed order.
    pub train: Vec<String>,
    pub val: Vec<String>,
}

/// Number of validation scenes for a dataset of `count`: a tenth, at least one
/// once there are two scenes.
pub fn val_count(count: usize) -> usize {
    if count < 2 {
        0
    } else {
        (count / 10).max(1)
    }
}

pub fn scene_seed(base: u64, k: u64) -> u64 {
    base.wrapping_mul(1_000_003).wrapping_add(k)
}

pub fn generate_scenes(cfg: &RunConfig, count: usize) -> Result<Vec<MapScene>> {
    (0..count as u64)
        .map(|k| synth_scene(scene_seed(cfg.seed, k), &cfg.generator, &cfg.bev))
        .collect()
}

/// Writes `count` scenes and a manifest with the last tenth held out.
pub fn write_dataset(cfg: &RunConfig, count: usize, dir: &Path) -> Result<Manifest> {
    create_dir(dir)?;
    let scenes = generate_scenes(cfg, count)?;
    let n_val = val_count(count);
    let mut names = Vec::with_capacity(count);
    for s in &scenes {
        let name = format!("{}.json", s.id);
        write_json(&dir.join(&name), s)?;
        names.push(name);
    }
    let val = names.split_off(count - n_val);
    let manifest = Manifest {
        version: FORMAT_VERSION,
        seed: cfg.seed,
        train: names,
        val,
    };
    write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

pub struct Dataset {
    pub manifest: Manifest,
    pub train: Vec<MapScene>,
    pub val: Vec<MapScene>,
}

impl Dataset {
    pub fn all(&self) -> impl Iterator<Item = &MapScene> {
        self.train.iter().chain(&self.val)
    }
}

pub fn load_scene(path: &Path, cfg: &RunConfig) -> Result<MapScene> {
    let scene: MapScene = read_json(path)?;
    scene
        .validate(&cfg.bev)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    Ok(scene)
}

pub fn load_dataset(dir: &Path, cfg: &RunConfig) -> Result<Dataset> {
    let mpath = dir.join(MANIFEST_FILE);
    if !mpath.exists() {
        return Err(Error::Data(format!("no dataset manifest at {}", mpath.display())));
    }
    let manifest: Manifest = read_json(&mpath)?;
    if manifest.version != FORMAT_VERSION {
        return Err(Error::Data(format!("manifest version {} unsupported", manifest.version)));
    }
    let load = |names: &[String]| names.iter().map(|n| load_scene(&dir.join(n), cfg)).collect::<Result<Vec<_>>>();
    Ok(Dataset {
        train: load(&manifest.train)?,
        val: load(&manifest.val)?,
        manifest,
    })
}

/// Scenes from a dataset directory, or a single scene file.
pub fn load_scenes(path: &Path, cfg: &RunConfig) -> Result<Vec<MapScene>> {
    if path.is_dir() {
        Ok(load_dataset(path, cfg)?.all().cloned().collect())
    } else {
        Ok(vec![load_scene(path, cfg)?])
    }
}

pub fn prediction_file(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}.pred.json"))
}

pub fn write_predictions(dir: &Path, preds: &[ScenePrediction]) -> Result<Vec<PathBuf>> {
    create_dir(dir)?;
    preds
        .iter()
        .map(|p| {
            let path = prediction_file(dir, &p.id);
            write_json(&path, p)?;
            Ok(path)
        })
        .collect()
}

pub fn load_prediction(path: &Path) -> Result<ScenePrediction> {
    let p: ScenePrediction = read_json(path)?;
    p.validate()?;
    Ok(p)
}

/// Every `*.pred.json` in `dir`, sorted by file name.
pub fn load_predictions(dir: &Path) -> Result<Vec<ScenePrediction>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.to_string_lossy().ends_with(".pred.json"))
        .collect();
    paths.sort();
    paths.iter().map(|p| load_prediction(p)).collect()
}

/// Appends one JSON object per line.
pub struct LogWriter {
    path: PathBuf,
    file: fs::File,
}

impl LogWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(LogWriter {
            path: path.into(),
            file,
        })
    }

    pub fn write(&mut self, entry: &LogEntry) -> Result<()> {
        let line = serde_json::to_string(entry).map_err(|e| Error::Json {
            path: self.path.clone(),
            source: e,
        })?;
        writeln!(self.file, "{line}").map_err(|e| Error::io(&self.path, e))
    }
}

pub fn read_log(path: &Path) -> Result<Vec<LogEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l).map_err(|e| Error::Json {
                path: path.into(),
                source: e,
            })
        })
        .collect()
}
