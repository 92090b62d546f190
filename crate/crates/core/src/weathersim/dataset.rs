use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::degrade::{apply_haze, apply_rain_blend, apply_snow_blend, gen_rain_mask, gen_snow_mask, BlendMode, ResidueMask};
use super::scene::{render_scene, SceneConfig, SceneSpec, CLASS_NAMES, NUM_CLASSES};
use crate::error::{CoreError, Result};
use crate::image::{DepthMap, ImageF};
use crate::priors::{estimate_prior, AtmosphericLight, EstimatorConfig, PriorKind, PriorMap};
use crate::sample::{BBox, DetectionSample};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Weather {
    #[default]
    Haze,
    Rain,
    Snow,
}

impl Weather {
    pub fn prior_kind(self) -> PriorKind {
        match self {
            Weather::Haze => PriorKind::Haze,
            Weather::Rain => PriorKind::Rain,
            Weather::Snow => PriorKind::Snow,
        }
    }

    /// The prior of an undegraded image: full transmission or no residue.
    pub fn ideal_value(self) -> f32 {
        match self {
            Weather::Haze => 1.0,
            Weather::Rain | Weather::Snow => 0.0,
        }
    }
}

impl std::str::FromStr for Weather {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "haze" => Ok(Weather::Haze),
            "rain" => Ok(Weather::Rain),
            "snow" => Ok(Weather::Snow),
            _ => Err(CoreError::InvalidArgument(format!("unknown weather '{s}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    TrainSource,
    TrainTarget,
    ValTarget,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::TrainSource, Split::TrainTarget, Split::ValTarget];

    pub fn name(self) -> &'static str {
        match self {
            Split::TrainSource => "train_source",
            Split::TrainTarget => "train_target",
            Split::ValTarget => "val_target",
        }
    }

    pub fn domain(self) -> Domain {
        match self {
            Split::TrainSource => Domain::Source,
            _ => Domain::Target,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub weather: Weather,
    pub n_source: usize,
    pub n_target: usize,
    pub n_val: usize,
    #[serde(flatten)]
    pub scene: SceneConfig,
    pub beta_min: f32,
    pub beta_max: f32,
    pub airlight_min: f32,
    pub airlight_max: f32,
    pub noise_levels: Vec<f32>,
    pub angle_min: f32,
    pub angle_max: f32,
    pub streak_min: usize,
    pub streak_max: usize,
    pub flake_radius_min: usize,
    pub flake_radius_max: usize,
    pub intensity_min: f32,
    pub intensity_max: f32,
    pub blend: BlendMode,
    #[serde(flatten)]
    pub estimator: EstimatorConfig,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            weather: Weather::Haze,
            n_source: 500,
            n_target: 500,
            n_val: 200,
            scene: SceneConfig::default(),
            beta_min: 0.3,
            beta_max: 0.6,
            airlight_min: 0.8,
            airlight_max: 0.95,
            noise_levels: vec![0.2, 0.3, 0.4],
            angle_min: 70.0,
            angle_max: 110.0,
            streak_min: 8,
            streak_max: 20,
            flake_radius_min: 1,
            flake_radius_max: 3,
            intensity_min: 0.5,
            intensity_max: 0.9,
            blend: BlendMode::Additive,
            estimator: EstimatorConfig::default(),
        }
    }
}

impl SynthConfig {
    pub fn count(&self, split: Split) -> usize {
        match split {
            Split::TrainSource => self.n_source,
            Split::TrainTarget => self.n_target,
            Split::ValTarget => self.n_val,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        let bad = |m: &str| Err(CoreError::InvalidArgument(m.to_string()));
        if self.n_source == 0 || self.n_target == 0 || self.n_val == 0 {
            return bad("every split needs at least one sample");
        }
        if !(self.beta_min >= 0.0 && self.beta_min <= self.beta_max) {
            return bad("beta range is invalid");
        }
        if !(self.airlight_min > 0.0 && self.airlight_min <= self.airlight_max && self.airlight_max <= 1.0) {
            return bad("airlight range must lie in (0, 1]");
        }
        if self.noise_levels.is_empty() || self.noise_levels.iter().any(|&s| !(s > 0.0 && s <= 1.0)) {
            return bad("noise levels must be non-empty and within (0, 1]");
        }
        if !(self.angle_min >= 70.0 && self.angle_min <= self.angle_max && self.angle_max <= 110.0) {
            return bad("rain angles must lie within [70, 110] degrees");
        }
        if self.streak_min == 0 || self.streak_min > self.streak_max {
            return bad("streak length range is invalid");
        }
        if self.flake_radius_min > self.flake_radius_max {
            return bad("flake radius range is invalid");
        }
        if !(self.intensity_min > 0.0 && self.intensity_min <= self.intensity_max && self.intensity_max <= 1.0) {
            return bad("intensity range must lie in (0, 1]");
        }
        Ok(())
    }
}

/// Degradation parameters drawn for one target sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum WeatherParams {
    Haze {
        beta: f32,
        airlight: [f32; 3],
    },
    Rain {
        noise_level: f32,
        angle: f32,
        length: usize,
        intensity: f32,
    },
    Snow {
        noise_level: f32,
        radius: usize,
        intensity: f32,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: usize,
    pub seed: u64,
    pub image: String,
    pub labels: String,
    pub gt_prior: String,
    pub est_prior: String,
    pub depth: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mask: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub weather: Option<WeatherParams>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub name: String,
    pub domain: Domain,
    pub count: usize,
    /// Labels exist for evaluation but must not reach training.
    pub labels_eval_only: bool,
    pub records: Vec<SampleRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub seed: u64,
    pub weather: Weather,
    pub width: usize,
    pub height: usize,
    pub num_classes: usize,
    pub class_names: Vec<String>,
    pub config: SynthConfig,
    pub splits: Vec<SplitManifest>,
    #[serde(skip)]
    pub root: PathBuf,
}

/// One synthesized sample held in memory.
#[derive(Clone, Debug)]
pub struct GeneratedSample {
    pub sample: DetectionSample,
    pub seed: u64,
    pub depth: DepthMap,
    pub mask: Option<ResidueMask>,
    pub weather: Option<WeatherParams>,
}

pub fn sample_seed(master: u64, split: Split, index: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(((split as u64) << 32) | index as u64);
    rng.next_u64()
}

fn uniform(rng: &mut ChaCha8Rng, lo: f32, hi: f32) -> f32 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

/// Renders and, for target splits, degrades sample `index` of `split`.
pub fn generate_sample(config: &SynthConfig, split: Split, index: usize, master_seed: u64) -> Result<GeneratedSample> {
    let seed = sample_seed(master_seed, split, index);
    let scene = render_scene(&SceneSpec::random(&config.scene, seed)?);
    let (h, w) = (scene.image.height(), scene.image.width());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let kind = config.weather.prior_kind();
    let (image, gt, mask, weather) = match split.domain() {
        Domain::Source => {
            let gt = PriorMap::constant(h, w, config.weather.ideal_value(), kind)?;
            (scene.image.clone(), gt, None, None)
        }
        Domain::Target => match config.weather {
            Weather::Haze => {
                let beta = uniform(&mut rng, config.beta_min, config.beta_max);
                let a = uniform(&mut rng, config.airlight_min, config.airlight_max);
                let (img, t) = apply_haze(&scene.image, &scene.depth, beta, AtmosphericLight::gray(a)?)?;
                (img, t, None, Some(WeatherParams::Haze { beta, airlight: [a; 3] }))
            }
            Weather::Rain => {
                let noise_level = config.noise_levels[rng.random_range(0..config.noise_levels.len())];
                let angle = uniform(&mut rng, config.angle_min, config.angle_max);
                let length = rng.random_range(config.streak_min..=config.streak_max);
                let intensity = uniform(&mut rng, config.intensity_min, config.intensity_max);
                let mask = gen_rain_mask(h, w, noise_level, angle, length, rng.next_u64())?;
                let (img, r) = apply_rain_blend(&scene.image, &mask, intensity, config.blend)?;
                let params = WeatherParams::Rain {
                    noise_level,
                    angle,
                    length,
                    intensity,
                };
                (img, r, Some(mask), Some(params))
            }
            Weather::Snow => {
                let noise_level = config.noise_levels[rng.random_range(0..config.noise_levels.len())];
                let radius = rng.random_range(config.flake_radius_min..=config.flake_radius_max);
                let intensity = uniform(&mut rng, config.intensity_min, config.intensity_max);
                let mask = gen_snow_mask(h, w, noise_level, radius, rng.next_u64())?;
                let (img, r) = apply_snow_blend(&scene.image, &mask, intensity, config.blend)?;
                let params = WeatherParams::Snow {
                    noise_level,
                    radius,
                    intensity,
                };
                (img, r, Some(mask), Some(params))
            }
        },
    };
    // Estimate from what a loader will see after the PNG round trip.
    let image = image.quantized();
    let est = estimate_prior(&image, kind, &config.estimator)?;
    let sample = DetectionSample {
        image,
        boxes: scene.boxes,
        labels: scene.labels,
        depth: Some(scene.depth.clone()),
        gt_prior: Some(gt),
        est_prior: Some(est),
    };
    Ok(GeneratedSample {
        sample,
        seed,
        depth: scene.depth,
        mask,
        weather,
    })
}

#[derive(Serialize, Deserialize)]
struct LabelLine {
    class: usize,
    bbox: [f32; 4],
}

pub fn write_labels(path: &Path, boxes: &[BBox], labels: &[usize]) -> Result<()> {
    let mut text = String::new();
    for (b, &c) in boxes.iter().zip(labels) {
        let line = LabelLine {
            class: c,
            bbox: b.to_array(),
        };
        text.push_str(&serde_json::to_string(&line).expect("plain struct"));
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| CoreError::io(path, e))
}

pub fn read_labels(path: &Path) -> Result<(Vec<BBox>, Vec<usize>)> {
    let text = fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
    let mut boxes = Vec::new();
    let mut labels = Vec::new();
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let l: LabelLine = serde_json::from_str(line)
            .map_err(|e| CoreError::Format(format!("{}:{}: {e}", path.display(), n + 1)))?;
        if l.class >= NUM_CLASSES {
            return Err(CoreError::Format(format!("{}:{}: class {} out of range", path.display(), n + 1, l.class)));
        }
        let [a, b, c, d] = l.bbox;
        boxes.push(BBox::new(a, b, c, d));
        labels.push(l.class);
    }
    Ok((boxes, labels))
}

fn write_sample(root: &Path, split: Split, g: &GeneratedSample, id: usize) -> Result<SampleRecord> {
    let stem = format!("{id:06}");
    let rel = |dir: &str, ext: &str| format!("{}/{dir}/{stem}.{ext}", split.name());
    let rec = SampleRecord {
        id,
        seed: g.seed,
        image: rel("images", "png"),
        labels: rel("labels", "jsonl"),
        gt_prior: rel("priors_gt", "pri"),
        est_prior: rel("priors_est", "pri"),
        depth: rel("depth", "dep"),
        mask: g.mask.as_ref().map(|_| rel("masks", "pri")),
        weather: g.weather.clone(),
    };
    let s = &g.sample;
    s.image.save_png(&root.join(&rec.image))?;
    write_labels(&root.join(&rec.labels), &s.boxes, &s.labels)?;
    s.gt_prior.as_ref().expect("synthetic").save(&root.join(&rec.gt_prior))?;
    s.est_prior.as_ref().expect("synthetic").save(&root.join(&rec.est_prior))?;
    let dep = root.join(&rec.depth);
    fs::write(&dep, g.depth.to_bytes()).map_err(|e| CoreError::io(&dep, e))?;
    if let (Some(m), Some(path)) = (&g.mask, &rec.mask) {
        let kind = g.sample.gt_prior.as_ref().expect("synthetic").kind();
        PriorMap::new(m.height(), m.width(), 1, m.values().to_vec(), kind, 0)?.save(&root.join(path))?;
    }
    Ok(rec)
}

/// Writes all three splits and `manifest.json` under `out`. On failure the
/// files written so far are removed.
pub fn synthesize_dataset(config: &SynthConfig, out: &Path, seed: u64) -> Result<DatasetManifest> {
    config.validate()?;
    let created_root = !out.exists();
    fs::create_dir_all(out).map_err(|e| CoreError::io(out, e))?;
    let result = synthesize_into(config, out, seed);
    if result.is_err() {
        for split in Split::ALL {
            let _ = fs::remove_dir_all(out.join(split.name()));
        }
        let _ = fs::remove_file(out.join(MANIFEST_FILE));
        if created_root {
            let _ = fs::remove_dir_all(out);
        }
    }
    result
}

fn synthesize_into(config: &SynthConfig, out: &Path, seed: u64) -> Result<DatasetManifest> {
    let mut splits = Vec::new();
    for split in Split::ALL {
        for dir in ["images", "labels", "priors_gt", "priors_est", "depth", "masks"] {
            let p = out.join(split.name()).join(dir);
            fs::create_dir_all(&p).map_err(|e| CoreError::io(&p, e))?;
        }
        let mut records = Vec::with_capacity(config.count(split));
        for i in 0..config.count(split) {
            let g = generate_sample(config, split, i, seed)?;
            records.push(write_sample(out, split, &g, i)?);
        }
        splits.push(SplitManifest {
            name: split.name().to_string(),
            domain: split.domain(),
            count: records.len(),
            labels_eval_only: split.domain() == Domain::Target,
            records,
        });
    }
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        seed,
        weather: config.weather,
        width: config.scene.width,
        height: config.scene.height,
        num_classes: NUM_CLASSES,
        class_names: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
        config: config.clone(),
        splits,
        root: out.to_path_buf(),
    };
    let path = out.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text + "\n").map_err(|e| CoreError::io(&path, e))?;
    Ok(manifest)
}

impl DatasetManifest {
    /// Reads `manifest.json` from a dataset directory (or the file itself).
    pub fn load(path: &Path) -> Result<Self> {
        let file = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
        let text = fs::read_to_string(&file).map_err(|e| CoreError::io(&file, e))?;
        let mut m: DatasetManifest =
            serde_json::from_str(&text).map_err(|e| CoreError::Format(format!("{}: {e}", file.display())))?;
        m.root = file.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(m)
    }

    pub fn split(&self, split: Split) -> Result<&SplitManifest> {
        self.splits
            .iter()
            .find(|s| s.name == split.name())
            .ok_or_else(|| CoreError::Format(format!("manifest has no split {}", split.name())))
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn load_image(&self, rec: &SampleRecord) -> Result<ImageF> {
        ImageF::load_png(&self.path(&rec.image))
    }

    pub fn load_depth(&self, rec: &SampleRecord) -> Result<DepthMap> {
        let p = self.path(&rec.depth);
        DepthMap::from_bytes(&fs::read(&p).map_err(|e| CoreError::io(&p, e))?)
    }

    pub fn load_sample(&self, split: Split, index: usize) -> Result<DetectionSample> {
        let rec = self
            .split(split)?
            .records
            .get(index)
            .ok_or_else(|| CoreError::InvalidArgument(format!("{} has no sample {index}", split.name())))?;
        let (boxes, labels) = read_labels(&self.path(&rec.labels))?;
        Ok(DetectionSample {
            image: self.load_image(rec)?,
            boxes,
            labels,
            depth: Some(self.load_depth(rec)?),
            gt_prior: Some(PriorMap::load(&self.path(&rec.gt_prior))?),
            est_prior: Some(PriorMap::load(&self.path(&rec.est_prior))?),
        })
    }

    /// Checks counts and that every referenced file exists and parses.
    pub fn validate(&self) -> Result<()> {
        for s in &self.splits {
            if s.count != s.records.len() {
                return Err(CoreError::Format(format!(
                    "{} declares {} samples but lists {}",
                    s.name,
                    s.count,
                    s.records.len()
                )));
            }
            for rec in &s.records {
                self.load_image(rec)?;
                read_labels(&self.path(&rec.labels))?;
                PriorMap::load(&self.path(&rec.gt_prior))?;
                PriorMap::load(&self.path(&rec.est_prior))?;
                self.load_depth(rec)?;
                if let Some(m) = &rec.mask {
                    PriorMap::load(&self.path(m))?;
                }
            }
        }
        Ok(())
    }
}
