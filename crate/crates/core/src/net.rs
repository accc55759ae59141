//! Three-scale dense-convolution segmentation network with a Tim block
//! after every encoder stage. The same code serves 2-d and 3-d inputs;
//! only the convolution rank changes.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::freq::{BandKind, DEFAULT_S_HIGH, DEFAULT_S_LOW};
use crate::numcore::{Bound, Graph, ParamId, ParamStore, Tensor, Var};
use crate::posenc::PosMode;
use crate::ssm::DEFAULT_STATE;
use crate::tim::{TimBlock, TimConfig, DEFAULT_POOL_DIM};
use crate::{Error, Result};

pub const SCALES: usize = 3;
const DICE_SMOOTH: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct NetConfig {
    /// 2 or 3.
    pub spatial_rank: usize,
    pub input_size: Vec<usize>,
    pub in_channels: usize,
    /// Output channels of the three encoder stages.
    pub channels: [usize; SCALES],
    /// Convolutions per dense block.
    pub depth: usize,
    pub growth: usize,
    pub classes: usize,
    pub state: usize,
    pub pool_dim: usize,
    pub s_low: f64,
    pub s_high: f64,
    /// Without Tim blocks the network is the plain convolutional backbone.
    pub use_tim: bool,
    pub use_freq: bool,
    pub use_gate: bool,
    pub use_residual: bool,
    pub pos_mode: PosMode,
    pub dice_weight: f64,
    pub ce_weight: f64,
}

impl NetConfig {
    pub fn new(spatial_rank: usize, input_size: &[usize]) -> Self {
        Self {
            spatial_rank,
            input_size: input_size.to_vec(),
            in_channels: 1,
            channels: [16, 32, 64],
            depth: 2,
            growth: 8,
            classes: 2,
            state: DEFAULT_STATE,
            pool_dim: DEFAULT_POOL_DIM,
            s_low: DEFAULT_S_LOW,
            s_high: DEFAULT_S_HIGH,
            use_tim: true,
            use_freq: true,
            use_gate: true,
            use_residual: true,
            pos_mode: PosMode::Shared,
            dice_weight: 1.0,
            ce_weight: 1.0,
        }
    }

    /// Narrow widths for fast checks and desk-scale training.
    pub fn tiny(spatial_rank: usize, input_size: &[usize]) -> Self {
        Self {
            channels: [4, 8, 8],
            growth: 4,
            state: 4,
            pool_dim: 16,
            ..Self::new(spatial_rank, input_size)
        }
    }

    /// Turns every Tim component off.
    pub fn conv_only(mut self) -> Self {
        self.use_tim = false;
        self.use_freq = false;
        self.use_gate = false;
        self.use_residual = false;
        self.pos_mode = PosMode::None;
        self
    }

    /// Spatial extent after `scale + 1` halvings.
    pub fn scale_size(&self, scale: usize) -> Vec<usize> {
        self.input_size.iter().map(|s| s >> (scale + 1)).collect()
    }

    pub fn scale_len(&self, scale: usize) -> usize {
        self.scale_size(scale).iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |reason: &str| Err(Error::invalid("net_config", reason));
        if !(2..=3).contains(&self.spatial_rank) || self.input_size.len() != self.spatial_rank {
            return bad("spatial rank must be 2 or 3 and match the input size");
        }
        if self.input_size.iter().any(|s| *s == 0 || s % (1 << SCALES) != 0) {
            return bad("every input extent must be a positive multiple of 8");
        }
        if self.in_channels == 0 || self.depth == 0 || self.growth == 0 || self.classes < 2 {
            return bad("channels, depth and growth must be positive with at least 2 classes");
        }
        if self.channels.contains(&0) {
            return bad("stage widths must be positive");
        }
        if !(self.dice_weight >= 0.0 && self.ce_weight >= 0.0) {
            return bad("loss weights must be non-negative");
        }
        if self.use_tim {
            for s in 0..SCALES {
                self.tim_config(s).validate()?;
            }
        }
        Ok(())
    }

    pub fn tim_config(&self, scale: usize) -> TimConfig {
        TimConfig {
            state: self.state,
            band: BandKind::for_scale(scale),
            s_low: self.s_low,
            s_high: self.s_high,
            pool_dim: self.pool_dim,
            use_freq: self.use_freq,
            use_gate: self.use_gate,
            use_residual: self.use_residual,
            pos_mode: self.pos_mode,
            ..TimConfig::new(self.channels[scale], self.scale_len(scale))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Conv {
    w: ParamId,
    b: ParamId,
}

impl Conv {
    fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        rank: usize,
        rng: &mut R,
    ) -> Self {
        let mut shape = vec![cout, cin];
        shape.extend(core::iter::repeat_n(kernel, rank));
        let fan_in = (cin * kernel.pow(rank as u32)) as f64;
        let w = Tensor::randn(&shape, libm::sqrt(2.0 / fan_in), rng);
        Self {
            w: store.add(&format!("{name}.w"), w),
            b: store.add(&format!("{name}.b"), Tensor::zeros(&[cout])),
        }
    }

    fn apply(&self, g: &mut Graph, p: &Bound, x: Var, stride: usize, pad: usize) -> Result<Var> {
        let rank = g.shape(x).len() - 2;
        let y = g.conv(x, p.var(self.w), &vec![stride; rank], &vec![pad; rank])?;
        let cout = g.shape(y)[1];
        let mut bshape = vec![cout];
        bshape.extend(core::iter::repeat_n(1, rank));
        let b = g.reshape(p.var(self.b), &bshape)?;
        g.add(y, b)
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Stage {
    dense: Vec<Conv>,
    down: Conv,
    tim: Option<TimBlock>,
}

/// Graph outputs of one forward pass.
#[derive(Clone, Debug)]
pub struct NetOutput {
    pub logits: Var,
    /// Per-scale gate proportions `(B, k)` when the gate is enabled.
    pub gates: Vec<Option<Var>>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: NetConfig,
    pub params: ParamStore,
    stages: Vec<Stage>,
    head: Conv,
}

impl Model {
    pub fn build<R: Rng + ?Sized>(cfg: NetConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let rank = cfg.spatial_rank;
        let mut store = ParamStore::new();
        let mut stages = Vec::with_capacity(SCALES);
        let mut cin = cfg.in_channels;
        let mut head_in = 0;
        for s in 0..SCALES {
            let mut dense = Vec::with_capacity(cfg.depth);
            for d in 0..cfg.depth {
                let name = format!("stage{s}.dense{d}");
                dense.push(Conv::new(&mut store, &name, cin + d * cfg.growth, cfg.growth, 3, rank, rng));
            }
            let dense_out = cin + cfg.depth * cfg.growth;
            if s == 0 {
                head_in += dense_out;
            }
            let cout = cfg.channels[s];
            let down = Conv::new(&mut store, &format!("stage{s}.down"), dense_out, cout, 3, rank, rng);
            let tim = if cfg.use_tim {
                Some(TimBlock::new(&mut store, &format!("stage{s}.tim"), cfg.tim_config(s), rng)?)
            } else {
                None
            };
            stages.push(Stage { dense, down, tim });
            head_in += cout;
            cin = cout;
        }
        let head = Conv::new(&mut store, "head", head_in, cfg.classes, 1, rank, rng);
        Ok(Self {
            cfg,
            params: store,
            stages,
            head,
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.numel()
    }

    /// Scalars held in positional tables, per scale.
    pub fn pe_param_counts(&self) -> Vec<usize> {
        self.stages
            .iter()
            .map(|s| match &s.tim {
                Some(t) => t.pe_tables().iter().map(|id| self.params.get(*id).len()).sum(),
                None => 0,
            })
            .collect()
    }

    /// Number of distinct positional tables per scale.
    pub fn pe_table_counts(&self) -> Vec<usize> {
        self.stages
            .iter()
            .map(|s| s.tim.as_ref().map_or(0, |t| t.pe_tables().len()))
            .collect()
    }

    pub fn tim_blocks(&self) -> Vec<&TimBlock> {
        self.stages.iter().filter_map(|s| s.tim.as_ref()).collect()
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let mut want = vec![shape.first().copied().unwrap_or(0), self.cfg.in_channels];
        want.extend(&self.cfg.input_size);
        if shape.len() != want.len() || shape[1..] != want[1..] || shape[0] == 0 {
            return Err(Error::ShapeMismatch {
                op: "net_forward",
                expected: want,
                got: shape.to_vec(),
            });
        }
        Ok(())
    }

    /// Logits `(B, classes, *input_size)` for images `(B, in_channels, *input_size)`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, image: Var) -> Result<NetOutput> {
        self.check_input(g.shape(image))?;
        let rank = self.cfg.spatial_rank;
        let mut x = image;
        let mut skips = Vec::with_capacity(SCALES + 1);
        let mut gates = Vec::with_capacity(SCALES);
        for (s, stage) in self.stages.iter().enumerate() {
            for conv in &stage.dense {
                let y = conv.apply(g, p, x, 1, 1)?;
                let y = g.silu(y)?;
                x = g.concat(&[x, y], 1)?;
            }
            if s == 0 {
                skips.push(x);
            }
            let y = stage.down.apply(g, p, x, 2, 1)?;
            x = g.silu(y)?;
            if let Some(tim) = &stage.tim {
                let o = tim.forward(g, p, x)?;
                x = o.out;
                gates.push(o.gate);
            } else {
                gates.push(None);
            }
            let up = g.upsample_nearest(x, &vec![1 << (s + 1); rank])?;
            skips.push(up);
        }
        let cat = g.concat(&skips, 1)?;
        let logits = self.head.apply(g, p, cat, 1, 0)?;
        Ok(NetOutput { logits, gates })
    }

    /// Inference on concrete images.
    pub fn predict(&self, images: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let x = g.constant(images.clone());
        let o = self.forward(&mut g, &p, x)?;
        Ok(g.value(o.logits).clone())
    }

    /// Logits plus the per-scale gate proportions.
    pub fn predict_with_gates(&self, images: &Tensor) -> Result<(Tensor, Vec<Option<Tensor>>)> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let x = g.constant(images.clone());
        let o = self.forward(&mut g, &p, x)?;
        let gates = o.gates.iter().map(|v| v.map(|v| g.value(v).clone())).collect();
        Ok((g.value(o.logits).clone(), gates))
    }
}

/// Loss terms as graph nodes.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub dice: Var,
    pub ce: Var,
}

/// One-hot encoding `(B, K, *S)` of labels laid out as `(B, *S)`.
pub fn one_hot(labels: &[usize], logits_shape: &[usize]) -> Result<Tensor> {
    let (b, k) = (logits_shape[0], logits_shape[1]);
    let spatial: usize = logits_shape[2..].iter().product();
    if labels.len() != b * spatial {
        return Err(Error::ShapeMismatch {
            op: "segmentation_loss",
            expected: vec![b * spatial],
            got: vec![labels.len()],
        });
    }
    let mut y = vec![0.0; b * k * spatial];
    for (i, &l) in labels.iter().enumerate() {
        if l >= k {
            return Err(Error::LabelOutOfRange {
                label: l as i64,
                classes: k,
            });
        }
        let (bi, si) = (i / spatial, i % spatial);
        y[(bi * k + l) * spatial + si] = 1.0;
    }
    Tensor::new(logits_shape, y)
}

/// Soft Dice (averaged over classes) plus mean pixel cross-entropy.
pub fn segmentation_loss(
    g: &mut Graph,
    logits: Var,
    labels: &[usize],
    dice_weight: f64,
    ce_weight: f64,
) -> Result<LossTerms> {
    let shape = g.shape(logits).to_vec();
    if shape.len() < 3 {
        return Err(Error::InvalidShape {
            op: "segmentation_loss",
            shape,
            reason: "expected (B, K, *spatial)",
        });
    }
    let k = shape[1];
    let pixels = (labels.len()) as f64;
    let y = g.constant(one_hot(labels, &shape)?);

    let logp = g.log_softmax(logits, 1)?;
    let picked = g.mul(logp, y)?;
    let total_logp = g.sum(picked)?;
    let ce = g.scale(total_logp, -1.0 / pixels)?;

    // per-class sums over batch and space
    let prob = g.softmax(logits, 1)?;
    let inter = g.mul(prob, y)?;
    let class_sums = |g: &mut Graph, v: Var| -> Result<Var> {
        let moved = g.permute(v, &swap_first_two(shape.len()))?;
        let flat = g.reshape(moved, &[k, labels.len()])?;
        g.sum_axis(flat, 1)
    };
    let i_c = class_sums(g, inter)?;
    let p_c = class_sums(g, prob)?;
    let y_c = class_sums(g, y)?;
    let num = g.scale(i_c, 2.0)?;
    let num = g.add_scalar(num, DICE_SMOOTH)?;
    let den = g.add(p_c, y_c)?;
    let den = g.add_scalar(den, DICE_SMOOTH)?;
    let ratio = g.div(num, den)?;
    let mean_dice = g.mean(ratio)?;
    let neg = g.neg(mean_dice)?;
    let dice = g.add_scalar(neg, 1.0)?;

    let a = g.scale(dice, dice_weight)?;
    let b = g.scale(ce, ce_weight)?;
    let total = g.add(a, b)?;
    Ok(LossTerms { total, dice, ce })
}

fn swap_first_two(rank: usize) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..rank).collect();
    perm.swap(0, 1);
    perm
}

/// Per-pixel argmax over the class axis of `(B, K, *S)` logits.
pub fn argmax_labels(logits: &Tensor) -> Vec<usize> {
    let s = logits.shape();
    let (b, k) = (s[0], s[1]);
    let spatial: usize = s[2..].iter().product();
    let d = logits.data();
    let mut out = Vec::with_capacity(b * spatial);
    for bi in 0..b {
        for si in 0..spatial {
            let mut best = 0;
            for c in 1..k {
                if d[(bi * k + c) * spatial + si] > d[(bi * k + best) * spatial + si] {
                    best = c;
                }
            }
            out.push(best);
        }
    }
    out
}
