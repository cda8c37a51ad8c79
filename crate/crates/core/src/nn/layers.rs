//! Parameterised layers built on the graph primitives.
//!
//! Every layer is a small descriptor holding its parameter-name prefix and
//! shape information. Parameters live in a [`ParamStore`]; `declare`
//! allocates them and `forward` binds them into a [`Graph`].

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::conv::{Conv1dGeometry, ConvTranspose1dGeometry};
use super::norm::GrnPooling;
use super::params::{ParamInit, ParamStore, INIT_STD};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_size: usize,
    pub stride: usize,
    pub dilation: usize,
    pub causal: bool,
    #[serde(default = "one")]
    pub groups: usize,
}

fn one() -> usize {
    1
}

impl ConvSpec {
    pub fn new(in_channels: usize, out_channels: usize, kernel_size: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel_size,
            stride: 1,
            dilation: 1,
            causal: false,
            groups: 1,
        }
    }

    pub fn stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn causal(mut self, causal: bool) -> Self {
        self.causal = causal;
        self
    }

    pub fn groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel_size == 0 || self.stride == 0 || self.dilation == 0 || self.groups == 0 {
            return Err(Error::Config(format!(
                "kernel, stride, dilation and groups must be >= 1: {self:?}"
            )));
        }
        if self.in_channels % self.groups != 0 || self.out_channels % self.groups != 0 {
            return Err(Error::Config(format!(
                "channels {}→{} not divisible by groups {}",
                self.in_channels, self.out_channels, self.groups
            )));
        }
        if self.causal && self.stride > 1 && self.kernel_size > 2 * self.stride - 1 {
            return Err(Error::Config(format!(
                "causal downsampling kernel {} exceeds 2·stride−1 = {}",
                self.kernel_size,
                2 * self.stride - 1
            )));
        }
        Ok(())
    }

    /// Padding policy for a forward convolution.
    ///
    /// Causal strided convs align the end of the kernel with the last frame
    /// of each stride block, so output `j` reads frames `< (j+1)·stride`.
    pub fn geometry(&self) -> Conv1dGeometry {
        let span = self.dilation * (self.kernel_size - 1);
        let half = (span / 2) as isize;
        let (pad_left, pad_right) = match (self.causal, self.stride) {
            (false, 1) => (half, span as isize - half),
            // surplus frames at the end are dropped by the stride
            (false, _) => (half, half),
            (true, 1) => (span as isize, 0),
            (true, s) => (self.kernel_size as isize - s as isize, 0),
        };
        Conv1dGeometry {
            stride: self.stride,
            dilation: self.dilation,
            pad_left,
            pad_right,
            groups: self.groups,
        }
    }

    /// Trimming policy for a transposed convolution, giving exactly
    /// `frames·stride` outputs.
    pub fn transpose_geometry(&self) -> ConvTranspose1dGeometry {
        let excess = self.kernel_size.saturating_sub(self.stride);
        let (trim_left, trim_right) = if self.causal {
            (0, excess)
        } else {
            (excess / 2, excess - excess / 2)
        };
        ConvTranspose1dGeometry {
            stride: self.stride,
            trim_left,
            trim_right,
        }
    }
}

fn check_channels(g: &Graph, x: Var, expected: usize, layer: &str) -> Result<()> {
    let shape = g.shape(x);
    if shape.len() != 3 || shape[1] != expected {
        return Err(Error::Shape(format!(
            "{layer}: expected (batch, {expected}, frames), got {shape:?}"
        )));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv1d {
    pub name: String,
    pub spec: ConvSpec,
}

impl Conv1d {
    pub fn new(name: impl Into<String>, spec: ConvSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Self {
            name: name.into(),
            spec,
        })
    }

    pub fn weight_shape(&self) -> [usize; 3] {
        let s = &self.spec;
        [s.out_channels, s.in_channels / s.groups, s.kernel_size]
    }

    pub fn num_params(&self) -> usize {
        self.weight_shape().iter().product::<usize>() + self.spec.out_channels
    }

    pub fn declare(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        store.declare(
            &format!("{}.weight", self.name),
            &self.weight_shape(),
            ParamInit::TruncNormal(INIT_STD),
            rng,
        );
        store.declare(
            &format!("{}.bias", self.name),
            &[self.spec.out_channels],
            ParamInit::Zeros,
            rng,
        );
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        check_channels(g, x, self.spec.in_channels, &self.name)?;
        let w = store.bind(g, &format!("{}.weight", self.name))?;
        let b = store.bind(g, &format!("{}.bias", self.name))?;
        Ok(g.conv1d(x, w, Some(b), self.spec.geometry()))
    }
}

/// Per-frame affine map `channels → nodes`; a kernel-1 convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct FeedForward(pub Conv1d);

impl FeedForward {
    pub fn new(name: impl Into<String>, in_channels: usize, nodes: usize) -> Self {
        Self(Conv1d {
            name: name.into(),
            spec: ConvSpec::new(in_channels, nodes, 1),
        })
    }

    pub fn num_params(&self) -> usize {
        self.0.num_params()
    }

    pub fn declare(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        self.0.declare(store, rng)
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        self.0.forward(g, store, x)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvTranspose1d {
    pub name: String,
    pub spec: ConvSpec,
}

impl ConvTranspose1d {
    pub fn new(name: impl Into<String>, spec: ConvSpec) -> Result<Self> {
        if spec.kernel_size == 0 || spec.stride == 0 {
            return Err(Error::Config(format!("invalid deconvolution {spec:?}")));
        }
        if spec.kernel_size < spec.stride {
            return Err(Error::Config(format!(
                "deconvolution kernel {} shorter than stride {}",
                spec.kernel_size, spec.stride
            )));
        }
        Ok(Self {
            name: name.into(),
            spec,
        })
    }

    pub fn num_params(&self) -> usize {
        let s = &self.spec;
        s.in_channels * s.out_channels * s.kernel_size + s.out_channels
    }

    pub fn declare(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        let s = &self.spec;
        store.declare(
            &format!("{}.weight", self.name),
            &[s.in_channels, s.out_channels, s.kernel_size],
            ParamInit::TruncNormal(INIT_STD),
            rng,
        );
        store.declare(&format!("{}.bias", self.name), &[s.out_channels], ParamInit::Zeros, rng);
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        check_channels(g, x, self.spec.in_channels, &self.name)?;
        let w = store.bind(g, &format!("{}.weight", self.name))?;
        let b = store.bind(g, &format!("{}.bias", self.name))?;
        Ok(g.conv_transpose1d(x, w, Some(b), self.spec.transpose_geometry()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub name: String,
    pub channels: usize,
}

impl LayerNorm {
    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        Self {
            name: name.into(),
            channels,
        }
    }

    pub fn num_params(&self) -> usize {
        2 * self.channels
    }

    pub fn declare(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        store.declare(&format!("{}.gamma", self.name), &[self.channels], ParamInit::Ones, rng);
        store.declare(&format!("{}.beta", self.name), &[self.channels], ParamInit::Zeros, rng);
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        check_channels(g, x, self.channels, &self.name)?;
        let gamma = store.bind(g, &format!("{}.gamma", self.name))?;
        let beta = store.bind(g, &format!("{}.beta", self.name))?;
        Ok(g.layer_norm(x, gamma, beta))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Grn {
    pub name: String,
    pub channels: usize,
    pub pooling: GrnPooling,
}

impl Grn {
    pub fn num_params(&self) -> usize {
        2 * self.channels
    }

    pub fn declare(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        store.declare(&format!("{}.gamma", self.name), &[self.channels], ParamInit::Zeros, rng);
        store.declare(&format!("{}.beta", self.name), &[self.channels], ParamInit::Zeros, rng);
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        check_channels(g, x, self.channels, &self.name)?;
        let gamma = store.bind(g, &format!("{}.gamma", self.name))?;
        let beta = store.bind(g, &format!("{}.beta", self.name))?;
        Ok(g.grn(x, gamma, beta, self.pooling))
    }
}

/// Named intermediate outputs collected during a forward pass.
pub type Taps = Vec<(String, Var)>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvNextConfig {
    pub dim: usize,
    pub hidden: usize,
    pub dw_kernel: usize,
    pub causal: bool,
}

/// Temporal mixing stage of a ConvNeXt block.
#[derive(Clone, Debug, PartialEq)]
pub enum Mixer {
    Depthwise(Conv1d),
    FeedForward(FeedForward),
}

/// Modified ConvNeXt v2 block:
/// depthwise conv → LayerNorm → FF(hidden) → GELU → GRN → FF(dim) → + input.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvNextBlock {
    pub name: String,
    pub config: ConvNextConfig,
    pub mixer: Mixer,
    pub norm: LayerNorm,
    pub expand: FeedForward,
    pub grn: Grn,
    pub project: FeedForward,
}

impl ConvNextBlock {
    pub fn new(name: impl Into<String>, config: ConvNextConfig) -> Result<Self> {
        let name = name.into();
        let ConvNextConfig {
            dim,
            hidden,
            dw_kernel,
            causal,
        } = config;
        if hidden <= dim {
            tracing::warn!(dim, hidden, "ConvNeXt hidden width should exceed the block width");
        }
        let mixer = if causal {
            Mixer::FeedForward(FeedForward::new(format!("{name}.dwconv"), dim, dim))
        } else {
            Mixer::Depthwise(Conv1d::new(
                format!("{name}.dwconv"),
                ConvSpec::new(dim, dim, dw_kernel).groups(dim),
            )?)
        };
        Ok(Self {
            mixer,
            norm: LayerNorm::new(format!("{name}.norm"), dim),
            expand: FeedForward::new(format!("{name}.pwconv1"), dim, hidden),
            grn: Grn {
                name: format!("{name}.grn"),
                channels: hidden,
                pooling: if causal {
                    GrnPooling::PerFrame
                } else {
                    GrnPooling::Global
                },
            },
            project: FeedForward::new(format!("{name}.pwconv2"), hidden, dim),
            name,
            config,
        })
    }

    pub fn num_params(&self) -> usize {
        let mixer = match &self.mixer {
            Mixer::Depthwise(c) => c.num_params(),
            Mixer::FeedForward(f) => f.num_params(),
        };
        mixer
            + self.norm.num_params()
            + self.expand.num_params()
            + self.grn.num_params()
            + self.project.num_params()
    }

    pub fn declare(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        match &self.mixer {
            Mixer::Depthwise(c) => c.declare(store, rng),
            Mixer::FeedForward(f) => f.declare(store, rng),
        }
        self.norm.declare(store, rng);
        self.expand.declare(store, rng);
        self.grn.declare(store, rng);
        self.project.declare(store, rng);
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        self.forward_tapped(g, store, x, &mut Vec::new())
    }

    /// Forward pass that also records the mixer, both feed-forward layers
    /// and the block output under their parameter names.
    pub fn forward_tapped(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        taps: &mut Taps,
    ) -> Result<Var> {
        check_channels(g, x, self.config.dim, &self.name)?;
        let (h, mixer_name) = match &self.mixer {
            Mixer::Depthwise(c) => (c.forward(g, store, x)?, &c.name),
            Mixer::FeedForward(f) => (f.forward(g, store, x)?, &f.0.name),
        };
        taps.push((mixer_name.clone(), h));
        let h = self.norm.forward(g, store, h)?;
        let h = self.expand.forward(g, store, h)?;
        taps.push((self.expand.0.name.clone(), h));
        let h = g.gelu(h);
        let h = self.grn.forward(g, store, h)?;
        let h = self.project.forward(g, store, h)?;
        taps.push((self.project.0.name.clone(), h));
        let y = g.add(x, h);
        taps.push((self.name.clone(), y));
        Ok(y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| r.gen_range(-1.0..1.0))
    }

    #[test]
    fn downsampling_conv_frame_count() {
        for causal in [false, true] {
            let conv = Conv1d::new("d", ConvSpec::new(4, 4, 7).stride(8).causal(causal)).unwrap();
            let mut store = ParamStore::new();
            conv.declare(&mut store, &mut rng());
            let mut g = Graph::inference();
            let x = g.constant(random(&[1, 4, 64], 1));
            let y = conv.forward(&mut g, &store, x).unwrap();
            assert_eq!(g.shape(y), &[1, 4, 8]);
        }
    }

    #[test]
    fn causal_kernel_limit_enforced() {
        assert!(ConvSpec::new(2, 2, 16).stride(8).causal(true).validate().is_err());
        assert!(ConvSpec::new(2, 2, 15).stride(8).causal(true).validate().is_ok());
        assert!(ConvSpec::new(2, 2, 16).stride(8).validate().is_ok());
    }

    #[test]
    fn deconv_frame_count() {
        for causal in [false, true] {
            let d = ConvTranspose1d::new("u", ConvSpec::new(3, 5, 16).stride(8).causal(causal))
                .unwrap();
            let mut store = ParamStore::new();
            d.declare(&mut store, &mut rng());
            let mut g = Graph::inference();
            let x = g.constant(random(&[1, 3, 4], 2));
            let y = d.forward(&mut g, &store, x).unwrap();
            assert_eq!(g.shape(y), &[1, 5, 32]);
        }
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let conv = Conv1d::new("c", ConvSpec::new(3, 2, 3)).unwrap();
        let mut store = ParamStore::new();
        conv.declare(&mut store, &mut rng());
        let mut g = Graph::inference();
        let x = g.constant(Tensor::zeros(&[1, 4, 5]));
        assert!(matches!(conv.forward(&mut g, &store, x), Err(Error::Shape(_))));
    }

    #[test]
    fn feed_forward_identity_and_bias() {
        let ff = FeedForward::new("f", 3, 3);
        let mut store = ParamStore::new();
        ff.declare(&mut store, &mut rng());
        store.insert("f.weight", Tensor::from_fn(&[3, 3, 1], |i| if i % 4 == 0 { 1.0 } else { 0.0 }));
        let x = random(&[2, 3, 5], 3);
        let mut g = Graph::inference();
        let xv = g.constant(x.clone());
        let y = ff.forward(&mut g, &store, xv).unwrap();
        assert_eq!(g.value(y), &x);

        store.insert("f.weight", Tensor::zeros(&[3, 3, 1]));
        store.insert("f.bias", Tensor::new(&[3], vec![1.0, -2.0, 0.5]));
        let mut g = Graph::inference();
        let xv = g.constant(x);
        let y = ff.forward(&mut g, &store, xv).unwrap();
        for b in 0..2 {
            for c in 0..3 {
                for t in 0..5 {
                    assert_eq!(g.value(y).data()[(b * 3 + c) * 5 + t], [1.0, -2.0, 0.5][c]);
                }
            }
        }
    }

    #[test]
    fn feed_forward_matches_kernel_one_conv() {
        let ff = FeedForward::new("f", 4, 6);
        let mut store = ParamStore::new();
        ff.declare(&mut store, &mut rng());
        let x = random(&[1, 4, 9], 4);
        let mut g = Graph::inference();
        let xv = g.constant(x.clone());
        let y = ff.forward(&mut g, &store, xv).unwrap();
        let direct = super::super::conv::conv1d_forward(
            &x,
            store.get("f.weight").unwrap(),
            Some(store.get("f.bias").unwrap()),
            &Conv1dGeometry::same(1),
        );
        for (a, b) in g.value(y).data().iter().zip(direct.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn convnext_block_is_identity_with_zero_projection() {
        for causal in [false, true] {
            let cfg = ConvNextConfig {
                dim: 8,
                hidden: 16,
                dw_kernel: 7,
                causal,
            };
            let block = ConvNextBlock::new("b", cfg).unwrap();
            let mut store = ParamStore::new();
            block.declare(&mut store, &mut rng());
            store.insert("b.pwconv2.weight", Tensor::zeros(&[8, 16, 1]));
            let x = random(&[1, 8, 12], 5);
            let mut g = Graph::inference();
            let xv = g.constant(x.clone());
            let y = block.forward(&mut g, &store, xv).unwrap();
            assert_eq!(g.value(y), &x);
            assert_eq!(store.num_scalars(), block.num_params());
        }
    }

    #[test]
    fn stacked_default_blocks_preserve_shape() {
        let mut store = ParamStore::new();
        let mut r = rng();
        let blocks: Vec<_> = (0..8)
            .map(|i| {
                let b = ConvNextBlock::new(
                    format!("blk{i}"),
                    ConvNextConfig {
                        dim: 256,
                        hidden: 512,
                        dw_kernel: 7,
                        causal: false,
                    },
                )
                .unwrap();
                b.declare(&mut store, &mut r);
                b
            })
            .collect();
        let mut g = Graph::inference();
        let mut h = g.constant(random(&[1, 256, 6], 6));
        for b in &blocks {
            h = b.forward(&mut g, &store, h).unwrap();
        }
        assert_eq!(g.shape(h), &[1, 256, 6]);
    }

    #[test]
    fn frozen_store_yields_no_param_gradients() {
        let ff = FeedForward::new("f", 2, 2);
        let mut store = ParamStore::new();
        ff.declare(&mut store, &mut rng());
        store.freeze();
        let mut g = Graph::new();
        let x = g.leaf(random(&[1, 2, 3], 8));
        let y = ff.forward(&mut g, &store, x).unwrap();
        let s = g.sum(y);
        let grads = g.backward(s);
        assert!(grads.params().is_empty());
        assert!(grads.get(x).is_some());
    }
}
