use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use wxadapt_autograd::{NodeId, Scalar, Tensor};

use super::boxes::AnchorGrid;
use super::layers::{Conv, ConvBnRelu, Init};
use super::params::{Ctx, ParamStore};
use crate::error::{CoreError, Result};

/// Levels where prior heads, recovery blocks and discriminators may attach.
pub const ADAPT_LEVELS: [u8; 2] = [4, 5];
/// Prior objectness probability used to initialise the head bias.
pub const OBJECTNESS_PRIOR: f64 = 0.01;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub widths: [usize; 5],
    pub head_width: usize,
    pub pen_width: usize,
    pub pen_out_channels: usize,
    pub disc_width: usize,
    pub num_classes: usize,
    pub anchor_sizes: Vec<f32>,
    pub pen_levels: Vec<u8>,
    pub rfrb_levels: Vec<u8>,
    pub disc_levels: Vec<u8>,
    pub grl_coeff: f32,
    /// Prior heads read the corrected target features rather than the raw ones.
    pub pen_on_corrected: bool,
    /// Keep blocks c1 and c2 at their initial values.
    pub freeze_early: bool,
    /// Seed of blocks c1 and c2, shared across runs like a fixed backbone.
    pub stem_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            widths: [8, 16, 32, 32, 32],
            head_width: 32,
            pen_width: 16,
            pen_out_channels: 1,
            disc_width: 16,
            num_classes: 3,
            anchor_sizes: vec![16.0, 32.0, 64.0],
            pen_levels: vec![4, 5],
            rfrb_levels: vec![4, 5],
            disc_levels: vec![],
            grl_coeff: 1.0,
            pen_on_corrected: true,
            freeze_early: true,
            stem_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        for (what, levels) in [
            ("pen", &self.pen_levels),
            ("rfrb", &self.rfrb_levels),
            ("disc", &self.disc_levels),
        ] {
            if let Some(l) = levels.iter().find(|l| !ADAPT_LEVELS.contains(l)) {
                return Err(CoreError::InvalidArgument(format!("{what} level {l} not in {{4, 5}}")));
            }
        }
        if !(self.grl_coeff >= 0.0 && self.grl_coeff.is_finite()) {
            return Err(CoreError::InvalidArgument(format!("grl_coeff {} must be >= 0", self.grl_coeff)));
        }
        if self.widths.contains(&0) || self.pen_out_channels == 0 || self.num_classes == 0 {
            return Err(CoreError::InvalidArgument("widths, classes and channels must be positive".into()));
        }
        if self.anchor_sizes.is_empty() {
            return Err(CoreError::InvalidArgument("need at least one anchor size".into()));
        }
        Ok(())
    }

    pub fn anchors_per_cell(&self) -> usize {
        self.anchor_sizes.len()
    }

    /// Channels per anchor: objectness, class logits, four deltas.
    pub fn per_anchor(&self) -> usize {
        5 + self.num_classes
    }
}

/// `[conv3×3 → ReLU] ×2 → maxpool 2×2`.
#[derive(Clone, Debug)]
pub struct Block {
    pub a: Conv,
    pub b: Conv,
}

/// GRL → conv1×1 → 2× conv3×3 (all BN + ReLU) → conv3×3 → Tanh.
#[derive(Clone, Debug)]
pub struct Pen {
    pub level: u8,
    pub layers: [ConvBnRelu; 3],
    pub out: Conv,
}

/// maxpool 2×2 → conv3×3 ReLU → conv3×3 ReLU → conv3×3 (zero init).
#[derive(Clone, Debug)]
pub struct Rfrb {
    pub level: u8,
    pub a: Conv,
    pub b: Conv,
    pub c: Conv,
}

/// GRL → conv3×3 ReLU → conv1×1 to one logit per location.
#[derive(Clone, Debug)]
pub struct Discriminator {
    pub level: u8,
    pub a: Conv,
    pub b: Conv,
}

#[derive(Clone, Debug)]
pub struct Head {
    pub tower: Conv,
    pub out: Conv,
}

/// Feature maps of one pipeline; `f4`/`f5` are the raw block outputs and
/// `f4_hat`/`f5_hat` the (possibly) corrected ones.
#[derive(Clone, Debug)]
pub struct Features {
    pub f2: NodeId,
    pub f3: NodeId,
    pub f4: NodeId,
    pub f5: NodeId,
    pub f4_hat: NodeId,
    pub f5_hat: NodeId,
    pub residuals: Vec<(u8, NodeId)>,
}

impl Features {
    pub fn corrected(&self, level: u8) -> NodeId {
        if level == 4 {
            self.f4_hat
        } else {
            self.f5_hat
        }
    }

    pub fn raw(&self, level: u8) -> NodeId {
        if level == 4 {
            self.f4
        } else {
            self.f5
        }
    }
}

/// Layer layout; holds parameter handles only, so it can be borrowed while
/// the store is bound to a tape.
#[derive(Clone, Debug)]
pub struct Net {
    pub config: ModelConfig,
    pub blocks: Vec<Block>,
    pub pens: Vec<Pen>,
    pub rfrbs: Vec<Rfrb>,
    pub discs: Vec<Discriminator>,
    pub head: Head,
}

#[derive(Clone, Debug)]
pub struct Detector<T: Scalar> {
    pub net: Net,
    pub store: ParamStore<T>,
}

impl<T: Scalar> Detector<T> {
    /// Builds all parameters in a fixed declaration order from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut stem_rng = ChaCha8Rng::seed_from_u64(config.stem_seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::default();
        let w = config.widths;
        let mut blocks = Vec::new();
        let mut cin = 3;
        for (i, &cout) in w.iter().enumerate() {
            let name = format!("extractor.c{}", i + 1);
            let rng = if i < 2 { &mut stem_rng } else { &mut rng };
            blocks.push(Block {
                a: Conv::new(&mut store, &format!("{name}.a"), cin, cout, 3, true, Init::He, rng),
                b: Conv::new(&mut store, &format!("{name}.b"), cout, cout, 3, true, Init::He, rng),
            });
            cin = cout;
        }
        let mut rfrbs = Vec::new();
        for &l in sorted(&config.rfrb_levels).iter() {
            let (mid, out) = (w[l as usize - 2], w[l as usize - 1]);
            let name = format!("rfrb{l}");
            rfrbs.push(Rfrb {
                level: l,
                a: Conv::new(&mut store, &format!("{name}.a"), mid, mid, 3, true, Init::He, &mut rng),
                b: Conv::new(&mut store, &format!("{name}.b"), mid, out, 3, true, Init::He, &mut rng),
                c: Conv::new(&mut store, &format!("{name}.c"), out, out, 3, true, Init::Zero, &mut rng),
            });
        }
        let mut pens = Vec::new();
        for &l in sorted(&config.pen_levels).iter() {
            let (cin, pw) = (w[l as usize - 1], config.pen_width);
            let name = format!("pen{l}");
            pens.push(Pen {
                level: l,
                layers: [
                    ConvBnRelu::new(&mut store, &format!("{name}.l1"), cin, pw, 1, &mut rng),
                    ConvBnRelu::new(&mut store, &format!("{name}.l2"), pw, pw, 3, &mut rng),
                    ConvBnRelu::new(&mut store, &format!("{name}.l3"), pw, pw, 3, &mut rng),
                ],
                out: Conv::new(
                    &mut store,
                    &format!("{name}.out"),
                    pw,
                    config.pen_out_channels,
                    3,
                    true,
                    Init::Lecun,
                    &mut rng,
                ),
            });
        }
        let mut discs = Vec::new();
        for &l in sorted(&config.disc_levels).iter() {
            let cin = w[l as usize - 1];
            let name = format!("disc{l}");
            discs.push(Discriminator {
                level: l,
                a: Conv::new(&mut store, &format!("{name}.a"), cin, config.disc_width, 3, true, Init::He, &mut rng),
                b: Conv::new(&mut store, &format!("{name}.b"), config.disc_width, 1, 1, true, Init::Lecun, &mut rng),
            });
        }
        let head = Head {
            tower: Conv::new(&mut store, "head.tower", w[4], config.head_width, 3, true, Init::He, &mut rng),
            out: Conv::new(
                &mut store,
                "head.out",
                config.head_width,
                config.anchors_per_cell() * config.per_anchor(),
                1,
                true,
                Init::Lecun,
                &mut rng,
            ),
        };
        // Small initial outputs and a low objectness prior.
        let out_w = store.get_mut(head.out.weight);
        *out_w = out_w.map(|v| v * T::of(0.1));
        let bias = store.get_mut(head.out.bias.expect("head has bias"));
        let obj = T::of(-((1.0 - OBJECTNESS_PRIOR) / OBJECTNESS_PRIOR).ln());
        for a in 0..config.anchors_per_cell() {
            bias.data_mut()[a * config.per_anchor()] = obj;
        }
        let mut det = Detector {
            net: Net {
                config,
                blocks,
                pens,
                rfrbs,
                discs,
                head,
            },
            store,
        };
        det.apply_freeze();
        Ok(det)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.net.config
    }

    pub fn apply_freeze(&mut self) {
        for b in ["extractor.c1.", "extractor.c2."] {
            self.store.set_frozen_prefix(b, self.net.config.freeze_early);
        }
    }

    /// Square root of the sum of squares of every parameter.
    pub fn param_norm(&self) -> f64 {
        self.store
            .ids()
            .map(|id| self.store.get(id).data().iter().map(|v| v.as_f64().powi(2)).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn cast<U: Scalar>(&self) -> Detector<U> {
        let mut store = ParamStore::default();
        for id in self.store.ids() {
            let nid = store.add(self.store.name(id), self.store.get(id).cast());
            store.set_frozen(nid, self.store.is_frozen(id));
        }
        for (name, st) in self.store.bn_names().iter().zip(self.store.bn_states()) {
            let b = store.add_bn(name.clone(), st.running_mean.len());
            let dst = &mut store.bn_states_mut()[b.0];
            dst.running_mean = st.running_mean.iter().map(|v| U::of(v.as_f64())).collect();
            dst.running_var = st.running_var.iter().map(|v| U::of(v.as_f64())).collect();
        }
        Detector {
            net: self.net.clone(),
            store,
        }
    }
}

impl Net {

    pub fn block<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, level: usize, x: NodeId) -> Result<NodeId> {
        let b = &self.blocks[level - 1];
        let y = b.a.forward(ctx, x)?;
        let y = ctx.g.relu(y)?;
        let y = b.b.forward(ctx, y)?;
        let y = ctx.g.relu(y)?;
        Ok(ctx.g.max_pool2d(y, 2, 2)?)
    }

    /// Blocks c1 and c2.
    pub fn stem<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: NodeId) -> Result<NodeId> {
        let (_, _, h, w) = ctx.g.value(x).dims4()?;
        if h % 32 != 0 || w % 32 != 0 {
            return Err(CoreError::Dims(format!("input {h}x{w} is not divisible by 32")));
        }
        let y = self.block(ctx, 1, x)?;
        self.block(ctx, 2, y)
    }

    pub fn rfrb(&self, level: u8) -> Option<&Rfrb> {
        self.rfrbs.iter().find(|r| r.level == level)
    }

    pub fn pen(&self, level: u8) -> Option<&Pen> {
        self.pens.iter().find(|p| p.level == level)
    }

    pub fn disc(&self, level: u8) -> Option<&Discriminator> {
        self.discs.iter().find(|d| d.level == level)
    }

    fn rfrb_forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, r: &Rfrb, x: NodeId) -> Result<NodeId> {
        let y = ctx.g.max_pool2d(x, 2, 2)?;
        let y = r.a.forward(ctx, y)?;
        let y = ctx.g.relu(y)?;
        let y = r.b.forward(ctx, y)?;
        let y = ctx.g.relu(y)?;
        r.c.forward(ctx, y)
    }

    /// Blocks c3 to c5 from block-2 features. The target pipeline adds the
    /// recovery residuals; the source pipeline never touches them.
    pub fn forward_from_f2<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, f2: NodeId, target: bool) -> Result<Features> {
        let f3 = self.block(ctx, 3, f2)?;
        let f4 = self.block(ctx, 4, f3)?;
        let mut residuals = Vec::new();
        let mut f4_hat = f4;
        if target {
            if let Some(r) = self.rfrb(4) {
                let d = self.rfrb_forward(ctx, r, f3)?;
                residuals.push((4, d));
                f4_hat = ctx.g.add(f4, d)?;
            }
        }
        let f5 = self.block(ctx, 5, f4_hat)?;
        let mut f5_hat = f5;
        if target {
            if let Some(r) = self.rfrb(5) {
                let d = self.rfrb_forward(ctx, r, f4_hat)?;
                residuals.push((5, d));
                f5_hat = ctx.g.add(f5, d)?;
            }
        }
        Ok(Features {
            f2,
            f3,
            f4,
            f5,
            f4_hat,
            f5_hat,
            residuals,
        })
    }

    pub fn forward_source<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: NodeId) -> Result<Features> {
        let f2 = self.stem(ctx, x)?;
        self.forward_from_f2(ctx, f2, false)
    }

    pub fn forward_target<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: NodeId) -> Result<Features> {
        let f2 = self.stem(ctx, x)?;
        self.forward_from_f2(ctx, f2, true)
    }

    /// Predicted prior in `[0, 1]`, reached through gradient reversal.
    pub fn pen_forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, level: u8, feat: NodeId) -> Result<NodeId> {
        let pen = self
            .pen(level)
            .ok_or_else(|| CoreError::InvalidArgument(format!("no prior head attached at level {level}")))?;
        let mut y = ctx.g.grad_reverse(feat, T::of(self.config.grl_coeff as f64))?;
        for layer in &pen.layers {
            y = layer.forward(ctx, y)?;
        }
        let y = pen.out.forward(ctx, y)?;
        let y = ctx.g.tanh(y)?;
        Ok(ctx.g.affine(y, T::of(0.5), T::of(0.5))?)
    }

    /// Per-location domain logits, reached through gradient reversal.
    pub fn disc_forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, level: u8, feat: NodeId) -> Result<NodeId> {
        let d = self
            .disc(level)
            .ok_or_else(|| CoreError::InvalidArgument(format!("no discriminator attached at level {level}")))?;
        let y = ctx.g.grad_reverse(feat, T::of(self.config.grl_coeff as f64))?;
        let y = d.a.forward(ctx, y)?;
        let y = ctx.g.relu(y)?;
        d.b.forward(ctx, y)
    }

    /// Dense predictions, `N × A·(5+C) × gh × gw`.
    pub fn detect_forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, f5: NodeId) -> Result<NodeId> {
        let y = self.head.tower.forward(ctx, f5)?;
        let y = ctx.g.relu(y)?;
        self.head.out.forward(ctx, y)
    }

    pub fn anchor_grid(&self, height: usize, width: usize) -> AnchorGrid {
        AnchorGrid::new(height / 32, width / 32, 32.0, self.config.anchor_sizes.clone())
    }
}

fn sorted(levels: &[u8]) -> Vec<u8> {
    let mut v = levels.to_vec();
    v.sort_unstable();
    v.dedup();
    v
}

/// Stacks CHW images into an `N×C×H×W` tensor.
pub fn stack_chw<T: Scalar>(items: &[&[f32]], c: usize, h: usize, w: usize) -> Tensor<T> {
    let data = items
        .iter()
        .flat_map(|s| s.iter().map(|&v| T::of(v as f64)))
        .collect();
    Tensor::new(vec![items.len(), c, h, w], data).expect("items match the stated shape")
}

/// Closed-form parameter counts of the attachable heads.
pub fn pen_param_count(cin: usize, width: usize, out: usize) -> usize {
    let bn = 2 * width;
    cin * width + bn + 2 * (width * width * 9 + bn) + width * out * 9 + out
}

pub fn rfrb_param_count(mid: usize, out: usize) -> usize {
    (mid * mid * 9 + mid) + (mid * out * 9 + out) + (out * out * 9 + out)
}
