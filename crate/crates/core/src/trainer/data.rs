use std::sync::atomic::{AtomicUsize, Ordering};

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use wxadapt_autograd::{BnMode, Graph, Tensor};

use crate::error::{CoreError, Result};
use crate::models::{stack_chw, Ctx, Detector, ModelConfig};
use crate::priors::{downscale_prior, PriorMap, PriorSource};
use crate::sample::BBox;
use crate::weathersim::{read_labels, DatasetManifest, Split, Weather};

use super::config::{SourcePrior, TrainConfig};

/// Levels at which prior heads may attach.
pub const PRIOR_LEVELS: [u8; 2] = [4, 5];
const STEM_BATCH: usize = 16;

/// One training or validation image, ready for the network.
#[derive(Clone, Debug)]
pub struct Item {
    /// Normalized CHW pixels; dropped once block-2 features are cached.
    pub image: Option<Vec<f32>>,
    pub boxes: Vec<BBox>,
    pub labels: Vec<usize>,
    /// Prior maps downscaled to levels 4 and 5.
    pub priors: Option<[PriorMap; 2]>,
    pub f2: Option<Vec<f32>>,
}

impl Item {
    pub fn prior(&self, level: u8) -> Option<&PriorMap> {
        let i = PRIOR_LEVELS.iter().position(|&l| l == level)?;
        self.priors.as_ref().map(|p| &p[i])
    }
}

/// Block-2 weights are a pure function of these, so cached features stay
/// valid across runs that share them.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StemKey {
    pub seed: u64,
    pub widths: [usize; 2],
}

impl StemKey {
    pub fn of(cfg: &ModelConfig) -> Self {
        StemKey {
            seed: cfg.stem_seed,
            widths: [cfg.widths[0], cfg.widths[1]],
        }
    }
}

/// In-memory training set. Target training samples are loaded only when
/// requested and every batch drawn from them is counted.
#[derive(Debug)]
pub struct TrainData {
    pub weather: Weather,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub class_names: Vec<String>,
    pub source: Vec<Item>,
    target: Option<Vec<Item>>,
    pub val: Vec<Item>,
    stem: Option<StemKey>,
    target_draws: AtomicUsize,
}

/// Pixel normalization applied before the network.
pub const PIXEL_MEAN: f32 = 0.5;
pub const PIXEL_STD: f32 = 0.25;

pub fn normalized_chw(img: &crate::image::ImageF) -> Vec<f32> {
    img.to_chw().into_iter().map(|v| (v - PIXEL_MEAN) / PIXEL_STD).collect()
}

fn load_split(
    m: &DatasetManifest,
    split: Split,
    prior: Option<PriorSource>,
    keep_labels: bool,
) -> Result<Vec<Item>> {
    let recs = &m.split(split)?.records;
    let mut out = Vec::with_capacity(recs.len());
    for rec in recs {
        let image = m.load_image(rec)?;
        if image.height() != m.height || image.width() != m.width {
            return Err(CoreError::Dims(format!(
                "{} is {}x{}, manifest says {}x{}",
                rec.image,
                image.height(),
                image.width(),
                m.height,
                m.width
            )));
        }
        let (boxes, labels) = if keep_labels {
            read_labels(&m.path(&rec.labels))?
        } else {
            (Vec::new(), Vec::new())
        };
        let priors = match prior {
            None => None,
            Some(src) => {
                let rel = match src {
                    PriorSource::Gt => &rec.gt_prior,
                    PriorSource::Estimated => &rec.est_prior,
                };
                let full = PriorMap::load(&m.path(rel))?;
                Some([downscale_prior(&full, 4)?, downscale_prior(&full, 5)?])
            }
        };
        out.push(Item {
            image: Some(normalized_chw(&image)),
            boxes,
            labels,
            priors,
            f2: None,
        });
    }
    Ok(out)
}

impl TrainData {
    /// Loads the source training split, the validation split and, when
    /// `with_target` is set, the unlabeled target training split.
    pub fn load(manifest: &DatasetManifest, cfg: &TrainConfig, with_target: bool) -> Result<Self> {
        let src_prior = match cfg.source_prior {
            SourcePrior::Estimated => PriorSource::Estimated,
            SourcePrior::Ideal => PriorSource::Gt,
        };
        let source = load_split(manifest, Split::TrainSource, Some(src_prior), true)?;
        let target = if with_target {
            Some(load_split(manifest, Split::TrainTarget, Some(cfg.target_prior), false)?)
        } else {
            None
        };
        let val = load_split(manifest, Split::ValTarget, None, true)?;
        if source.is_empty() {
            return Err(CoreError::InvalidArgument("source training split is empty".into()));
        }
        Ok(TrainData {
            weather: manifest.weather,
            height: manifest.height,
            width: manifest.width,
            num_classes: manifest.num_classes,
            class_names: manifest.class_names.clone(),
            source,
            target,
            val,
            stem: None,
            target_draws: AtomicUsize::new(0),
        })
    }

    /// Assembles a data set from items already in memory.
    pub fn from_items(
        weather: Weather,
        (height, width): (usize, usize),
        class_names: Vec<String>,
        source: Vec<Item>,
        target: Option<Vec<Item>>,
        val: Vec<Item>,
    ) -> Self {
        TrainData {
            weather,
            height,
            width,
            num_classes: class_names.len(),
            class_names,
            source,
            target,
            val,
            stem: None,
            target_draws: AtomicUsize::new(0),
        }
    }

    pub fn has_target(&self) -> bool {
        self.target.is_some()
    }

    /// Number of target training items handed out so far.
    pub fn target_draws(&self) -> usize {
        self.target_draws.load(Ordering::Relaxed)
    }

    pub fn target_len(&self) -> usize {
        self.target.as_ref().map_or(0, Vec::len)
    }

    pub fn target_items(&self, idx: &[usize]) -> Result<Vec<&Item>> {
        let t = self
            .target
            .as_ref()
            .ok_or_else(|| CoreError::InvalidArgument("target split was not loaded".into()))?;
        self.target_draws.fetch_add(idx.len(), Ordering::Relaxed);
        Ok(idx.iter().map(|&i| &t[i]).collect())
    }

    pub fn stem_key(&self) -> Option<StemKey> {
        self.stem
    }

    /// Runs the frozen blocks c1-c2 once over every image and keeps the result.
    pub fn cache_stem(&mut self, model: &ModelConfig) -> Result<()> {
        let key = StemKey::of(model);
        if self.stem == Some(key) {
            return Ok(());
        }
        let mut det = Detector::<f32>::new(model.clone(), 0)?;
        let (h, w) = (self.height, self.width);
        let mut sets: Vec<&mut Vec<Item>> = vec![&mut self.source, &mut self.val];
        if let Some(t) = self.target.as_mut() {
            sets.push(t);
        }
        for items in sets {
            for chunk in items.chunks_mut(STEM_BATCH) {
                let imgs = chunk
                    .iter()
                    .map(|it| {
                        it.image
                            .as_deref()
                            .ok_or_else(|| CoreError::InvalidArgument("image dropped before caching".into()))
                    })
                    .collect::<Result<Vec<_>>>()?;
                let x = stack_chw::<f32>(&imgs, 3, h, w);
                let mut g = Graph::new();
                let mut ctx = Ctx::new(&mut g, &mut det.store, BnMode::Eval);
                let x = ctx.g.constant(x);
                let f2 = det.net.stem(&mut ctx, x)?;
                let per = g.value(f2).numel() / chunk.len();
                for (it, vals) in chunk.iter_mut().zip(g.value(f2).data().chunks(per)) {
                    it.f2 = Some(vals.to_vec());
                    it.image = None;
                }
            }
        }
        self.stem = Some(key);
        Ok(())
    }

    /// Shape of one cached block-2 feature map.
    pub fn f2_dims(&self, model: &ModelConfig) -> (usize, usize, usize) {
        (model.widths[1], self.height / 4, self.width / 4)
    }
}

/// Stacks either cached block-2 features or raw images for a batch.
pub enum BatchInput {
    F2(Tensor<f32>),
    Image(Tensor<f32>),
}

pub fn batch_input(items: &[&Item], model: &ModelConfig, data: &TrainData, use_cache: bool) -> Result<BatchInput> {
    if use_cache {
        let (c, h, w) = data.f2_dims(model);
        let v = items
            .iter()
            .map(|it| it.f2.as_deref().ok_or_else(|| CoreError::InvalidArgument("no cached features".into())))
            .collect::<Result<Vec<_>>>()?;
        Ok(BatchInput::F2(stack_chw(&v, c, h, w)))
    } else {
        let v = items
            .iter()
            .map(|it| it.image.as_deref().ok_or_else(|| CoreError::InvalidArgument("image not kept".into())))
            .collect::<Result<Vec<_>>>()?;
        Ok(BatchInput::Image(stack_chw(&v, 3, data.height, data.width)))
    }
}

/// Stacks one prior level for a batch, replicated over `channels`.
pub fn batch_prior(items: &[&Item], level: u8, channels: usize) -> Result<Tensor<f32>> {
    let mut data = Vec::new();
    let mut dims = (0, 0);
    for it in items {
        let p = it
            .prior(level)
            .ok_or_else(|| CoreError::InvalidArgument(format!("item has no level-{level} prior")))?;
        dims = (p.height(), p.width());
        let plane = p.to_chw();
        let plane = &plane[..p.height() * p.width()];
        for _ in 0..channels {
            data.extend_from_slice(plane);
        }
    }
    Ok(Tensor::new(vec![items.len(), channels, dims.0, dims.1], data)?)
}

/// Draws batches by walking shuffled epochs.
#[derive(Clone, Debug)]
pub struct Sampler {
    order: Vec<usize>,
    pos: usize,
}

impl Sampler {
    pub fn new(len: usize) -> Self {
        Sampler {
            order: (0..len).collect(),
            pos: len,
        }
    }

    pub fn next(&mut self, rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(n);
        while out.len() < n && !self.order.is_empty() {
            if self.pos == self.order.len() {
                self.order.shuffle(rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}
