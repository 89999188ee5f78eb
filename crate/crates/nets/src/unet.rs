//! U-Net variants: a shared encoder feeding one or two decoders.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{NetError, Result};
use crate::layers::{max_pool2, max_pool2_backward, CnaCache, Conv, ConvCache, ConvNormAct, UpConv};
use crate::params::{Grads, ParamStore};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub in_channels: usize,
    /// Channels of the first (stem) block; doubled at each level.
    pub base_width: usize,
    pub depth: usize,
    pub leaky_slope: f64,
    pub seg_out_channels: usize,
    pub femur_out_channels: usize,
    /// Seed for parameter initialisation.
    pub seed: u64,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            in_channels: 1,
            base_width: 32,
            depth: 4,
            leaky_slope: 0.01,
            seg_out_channels: 2,
            femur_out_channels: 1,
            seed: 0,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(NetError::InvalidConfig(m));
        if self.depth != 4 {
            return bad(format!("depth must be 4, got {}", self.depth));
        }
        if self.base_width < 8 || !self.base_width.is_power_of_two() {
            return bad(format!("base_width must be a power of two >= 8, got {}", self.base_width));
        }
        if self.in_channels == 0 || self.seg_out_channels == 0 || self.femur_out_channels == 0 {
            return bad("channel counts must be positive".into());
        }
        if !(self.leaky_slope >= 0.0 && self.leaky_slope < 1.0) {
            return bad(format!("leaky_slope must be in [0, 1), got {}", self.leaky_slope));
        }
        Ok(())
    }

    /// Spatial sides must be multiples of this.
    pub fn multiple(&self) -> usize {
        1 << self.depth
    }

    pub fn widths(&self) -> Vec<usize> {
        (0..=self.depth).map(|l| self.base_width << l).collect()
    }
}

/// Decoder selector of the segmentation model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Head,
    Abdomen,
}

impl Branch {
    pub const ALL: [Branch; 2] = [Branch::Head, Branch::Abdomen];

    pub fn index(self) -> usize {
        match self {
            Branch::Head => 0,
            Branch::Abdomen => 1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Branch::Head => "head",
            Branch::Abdomen => "abdomen",
        }
    }

    pub fn parse(tag: &str) -> Result<Branch> {
        match tag {
            "head" => Ok(Branch::Head),
            "abdomen" => Ok(Branch::Abdomen),
            other => Err(NetError::UnknownBranch(other.to_string())),
        }
    }
}

impl fmt::Display for Branch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// One encoder, head and abdomen decoders.
    SharedSeg,
    /// One encoder, one segmentation decoder.
    SingleSeg,
    /// One encoder, one single-channel regression decoder.
    Femur,
}

#[derive(Debug, Clone)]
struct DoubleConv {
    a: ConvNormAct,
    b: ConvNormAct,
}

impl DoubleConv {
    fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, cin: usize, cout: usize, rng: &mut ChaCha8Rng) -> Self {
        DoubleConv {
            a: ConvNormAct::new(store, &format!("{name}.a"), cin, cout, rng),
            b: ConvNormAct::new(store, &format!("{name}.b"), cout, cout, rng),
        }
    }

    fn forward<T: Scalar>(&self, p: &ParamStore<T>, x: &Tensor<T>, slope: T) -> (Tensor<T>, [CnaCache<T>; 2]) {
        let (y, ca) = self.a.forward(p, x, slope);
        let (z, cb) = self.b.forward(p, &y, slope);
        (z, [ca, cb])
    }

    fn backward<T: Scalar>(
        &self,
        p: &ParamStore<T>,
        g: &mut Grads<T>,
        cache: [CnaCache<T>; 2],
        dy: Tensor<T>,
        slope: T,
        need_dx: bool,
    ) -> Option<Tensor<T>> {
        let [ca, cb] = cache;
        let d = self.b.backward(p, g, cb, dy, slope, true).expect("inner gradient");
        self.a.backward(p, g, ca, d, slope, need_dx)
    }
}

#[derive(Debug, Clone)]
struct UpBlock {
    up: UpConv,
    conv: DoubleConv,
}

#[derive(Debug, Clone)]
struct Decoder {
    /// Deepest first.
    ups: Vec<UpBlock>,
    head: Conv,
}

#[derive(Debug, Clone)]
struct Encoder {
    stem: DoubleConv,
    downs: Vec<DoubleConv>,
}

struct EncoderCache<T> {
    stem: [CnaCache<T>; 2],
    downs: Vec<(Vec<u32>, (usize, usize, usize), [CnaCache<T>; 2])>,
}

struct DecoderCache<T> {
    ups: Vec<(Tensor<T>, [CnaCache<T>; 2])>,
    head: ConvCache<T>,
}

#[derive(Debug, Clone)]
pub struct UNet<T> {
    pub cfg: NetConfig,
    pub kind: ModelKind,
    pub params: ParamStore<T>,
    encoder: Encoder,
    decoders: Vec<Decoder>,
}

impl<T: Scalar> UNet<T> {
    fn build(cfg: &NetConfig, kind: ModelKind) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::default();
        let w = cfg.widths();
        let encoder = Encoder {
            stem: DoubleConv::new(&mut store, "enc.stem", cfg.in_channels, w[0], &mut rng),
            downs: (1..=cfg.depth)
                .map(|l| DoubleConv::new(&mut store, &format!("enc.down{l}"), w[l - 1], w[l], &mut rng))
                .collect(),
        };
        let (names, out): (Vec<&str>, usize) = match kind {
            ModelKind::SharedSeg => (vec!["dec.head", "dec.abdomen"], cfg.seg_out_channels),
            ModelKind::SingleSeg => (vec!["dec.seg"], cfg.seg_out_channels),
            ModelKind::Femur => (vec!["dec.femur"], cfg.femur_out_channels),
        };
        let decoders = names
            .into_iter()
            .map(|name| {
                let ups = (1..=cfg.depth)
                    .rev()
                    .map(|l| UpBlock {
                        // The up-sampling keeps the width; the convs after the
                        // concatenation bring it down to the skip's width.
                        up: UpConv::new(&mut store, &format!("{name}.up{l}.upconv"), w[l], w[l], &mut rng),
                        conv: DoubleConv::new(&mut store, &format!("{name}.up{l}"), w[l] + w[l - 1], w[l - 1], &mut rng),
                    })
                    .collect();
                let head = Conv::new(&mut store, &format!("{name}.out"), w[0], out, 1, &mut rng);
                Decoder { ups, head }
            })
            .collect();
        Ok(UNet {
            cfg: cfg.clone(),
            kind,
            params: store,
            encoder,
            decoders,
        })
    }

    /// Shared encoder with a head and an abdomen decoder.
    pub fn shared(cfg: &NetConfig) -> Result<Self> {
        Self::build(cfg, ModelKind::SharedSeg)
    }

    /// The independent single-decoder segmentation network.
    pub fn single(cfg: &NetConfig) -> Result<Self> {
        Self::build(cfg, ModelKind::SingleSeg)
    }

    pub fn femur(cfg: &NetConfig) -> Result<Self> {
        Self::build(cfg, ModelKind::Femur)
    }

    pub fn of_kind(cfg: &NetConfig, kind: ModelKind) -> Result<Self> {
        Self::build(cfg, kind)
    }

    pub fn decoder_count(&self) -> usize {
        self.decoders.len()
    }

    pub fn out_channels(&self) -> usize {
        match self.kind {
            ModelKind::Femur => self.cfg.femur_out_channels,
            _ => self.cfg.seg_out_channels,
        }
    }

    /// Index of the decoder serving `branch`.
    pub fn branch_decoder(&self, branch: Branch) -> Result<usize> {
        match self.kind {
            ModelKind::SharedSeg => Ok(branch.index()),
            ModelKind::SingleSeg | ModelKind::Femur => Err(NetError::BranchUnavailable {
                branch: branch.to_string(),
                decoders: self.decoders.len(),
            }),
        }
    }

    /// Zero the final 1x1 convolutions of every decoder.
    pub fn zero_heads(&mut self) {
        for d in &self.decoders {
            for id in [d.head.weight, d.head.bias] {
                self.params.get_mut(id).iter_mut().for_each(|v| *v = T::zero());
            }
        }
    }

    pub fn with_params(mut self, params: ParamStore<T>) -> Result<Self> {
        if params.info != self.params.info {
            return Err(NetError::ShapeMismatch("parameter layout differs from the model".into()));
        }
        self.params = params;
        Ok(self)
    }

    /// Layer-by-layer description of the architecture.
    pub fn census(&self) -> Vec<String> {
        let w = self.cfg.widths();
        let mut lines = vec![format!(
            "enc.stem: 2 x (conv3x3 -> InstanceNorm -> LeakyReLU({})), {} -> {}",
            self.cfg.leaky_slope, self.cfg.in_channels, w[0]
        )];
        for l in 1..=self.cfg.depth {
            lines.push(format!(
                "enc.down{l}: maxpool2x2, 2 x (conv3x3 -> InstanceNorm -> LeakyReLU), {} -> {}",
                w[l - 1],
                w[l]
            ));
        }
        let names: &[&str] = match self.kind {
            ModelKind::SharedSeg => &["dec.head", "dec.abdomen"],
            ModelKind::SingleSeg => &["dec.seg"],
            ModelKind::Femur => &["dec.femur"],
        };
        for name in names {
            for l in (1..=self.cfg.depth).rev() {
                lines.push(format!(
                    "{name}.up{l}: upconv2x2 stride 2 {a} -> {a}, concat skip {b}, 2 x (conv3x3 -> InstanceNorm -> LeakyReLU), {c} -> {b}",
                    a = w[l],
                    b = w[l - 1],
                    c = w[l] + w[l - 1]
                ));
            }
            lines.push(format!("{name}.out: conv1x1 {} -> {}", w[0], self.out_channels()));
        }
        lines
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let m = self.cfg.multiple();
        if x.c != self.cfg.in_channels {
            return Err(NetError::ShapeMismatch(format!(
                "expected {} input channel(s), got {}",
                self.cfg.in_channels, x.c
            )));
        }
        if x.h == 0 || x.w == 0 || !x.h.is_multiple_of(m) || !x.w.is_multiple_of(m) {
            return Err(NetError::InputShape { h: x.h, w: x.w, multiple: m });
        }
        Ok(())
    }

    fn slope(&self) -> T {
        T::from_f64_lossy(self.cfg.leaky_slope)
    }

    fn encode(&self, x: &Tensor<T>) -> (Vec<Tensor<T>>, EncoderCache<T>) {
        let p = &self.params;
        let s = self.slope();
        let (mut cur, stem) = self.encoder.stem.forward(p, x, s);
        let mut skips = Vec::with_capacity(self.cfg.depth + 1);
        let mut downs = Vec::with_capacity(self.cfg.depth);
        for block in &self.encoder.downs {
            let shape = cur.shape();
            let (pooled, arg) = max_pool2(&cur);
            skips.push(cur);
            let (next, cache) = block.forward(p, &pooled, s);
            downs.push((arg, shape, cache));
            cur = next;
        }
        skips.push(cur);
        (skips, EncoderCache { stem, downs })
    }

    /// `dskips[l]` is the gradient with respect to encoder level `l` output.
    fn encode_backward(&self, g: &mut Grads<T>, cache: EncoderCache<T>, mut dskips: Vec<Tensor<T>>) {
        let p = &self.params;
        let s = self.slope();
        let mut d = dskips.pop().expect("bottleneck gradient");
        for (block, (arg, shape, c)) in self.encoder.downs.iter().zip(cache.downs).rev() {
            let dpooled = block.backward(p, g, c, d, s, true).expect("input gradient");
            let mut dlevel = max_pool2_backward(&dpooled, &arg, shape);
            let from_skip = dskips.pop().expect("skip gradient");
            for (a, b) in dlevel.data.iter_mut().zip(&from_skip.data) {
                *a = *a + *b;
            }
            d = dlevel;
        }
        self.encoder.stem.backward(p, g, cache.stem, d, s, false);
    }

    fn decode(&self, k: usize, skips: &[Tensor<T>]) -> (Tensor<T>, DecoderCache<T>) {
        let p = &self.params;
        let s = self.slope();
        let dec = &self.decoders[k];
        let depth = self.cfg.depth;
        let mut cur = skips[depth].clone();
        let mut ups = Vec::with_capacity(depth);
        for (i, block) in dec.ups.iter().enumerate() {
            let level = depth - 1 - i;
            let upped = block.up.forward(p, &cur);
            let joined = Tensor::concat(&upped, &skips[level]);
            let (next, c) = block.conv.forward(p, &joined, s);
            ups.push((cur, c));
            cur = next;
        }
        let (out, head) = dec.head.forward(p, &cur);
        (out, DecoderCache { ups, head })
    }

    fn decode_backward(&self, k: usize, g: &mut Grads<T>, cache: DecoderCache<T>, dout: &Tensor<T>) -> Vec<Tensor<T>> {
        let p = &self.params;
        let s = self.slope();
        let dec = &self.decoders[k];
        let depth = self.cfg.depth;
        let mut d = dec.head.backward(p, g, cache.head, dout, true).expect("head input gradient");
        let mut dskips: Vec<Option<Tensor<T>>> = (0..=depth).map(|_| None).collect();
        for (i, (block, (x_in, c))) in dec.ups.iter().zip(cache.ups).enumerate().rev() {
            let level = depth - 1 - i;
            let djoined = block.conv.backward(p, g, c, d, s, true).expect("concat gradient");
            let (dupped, dskip) = djoined.split(block.up.cout);
            dskips[level] = Some(dskip);
            d = block.up.backward(p, g, &x_in, &dupped);
        }
        dskips[depth] = Some(d);
        dskips.into_iter().map(|t| t.expect("every level has a gradient")).collect()
    }

    /// Outputs of every decoder.
    pub fn forward_all(&self, x: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        self.check_input(x)?;
        let (skips, _) = self.encode(x);
        Ok((0..self.decoders.len()).map(|k| self.decode(k, &skips).0).collect())
    }

    /// Output of decoder `k` only.
    pub fn forward(&self, x: &Tensor<T>, k: usize) -> Result<Tensor<T>> {
        self.check_input(x)?;
        if k >= self.decoders.len() {
            return Err(NetError::BranchUnavailable {
                branch: k.to_string(),
                decoders: self.decoders.len(),
            });
        }
        let (skips, _) = self.encode(x);
        Ok(self.decode(k, &skips).0)
    }

    /// Forward through decoder `k`, evaluate `loss` on its output and
    /// accumulate gradients. Other decoders are not touched.
    pub fn loss_and_grad(
        &self,
        x: &Tensor<T>,
        k: usize,
        g: &mut Grads<T>,
        loss: impl FnOnce(&Tensor<T>) -> Result<(f64, Tensor<T>)>,
    ) -> Result<f64> {
        self.check_input(x)?;
        if k >= self.decoders.len() {
            return Err(NetError::BranchUnavailable {
                branch: k.to_string(),
                decoders: self.decoders.len(),
            });
        }
        let (skips, enc_cache) = self.encode(x);
        let (out, dec_cache) = self.decode(k, &skips);
        drop(skips);
        let (value, dout) = loss(&out)?;
        let dskips = self.decode_backward(k, g, dec_cache, &dout);
        self.encode_backward(g, enc_cache, dskips);
        Ok(value)
    }
}

/// Total number of trainable scalars.
pub fn count_parameters<T: Scalar>(model: &UNet<T>) -> usize {
    model.params.count()
}
