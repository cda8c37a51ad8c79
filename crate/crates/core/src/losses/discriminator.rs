//! Multi-period and multi-resolution discriminators.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dsp::{Framing, StftConfig};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Conv2dGeometry, ParamInit, ParamStore};
use crate::tensor::Tensor;

pub const PERIODS: [usize; 5] = [2, 3, 5, 7, 11];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    /// Output channels of the five sub-MPD blocks.
    pub mpd_channels: [usize; 5],
    /// Channels of every sub-MRD layer.
    pub mrd_channels: usize,
    pub slope: f64,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            mpd_channels: [32, 128, 512, 1024, 1024],
            mrd_channels: 32,
            slope: 0.1,
        }
    }
}

impl DiscriminatorConfig {
    /// Narrow stacks for desk-scale runs.
    pub fn tiny() -> Self {
        Self {
            mpd_channels: [4, 8, 16, 16, 16],
            mrd_channels: 8,
            slope: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mpd_channels.contains(&0) || self.mrd_channels == 0 {
            return Err(Error::Config("discriminator channels must be positive".into()));
        }
        if !(self.slope >= 0.0 && self.slope < 1.0) {
            return Err(Error::Config(format!("leaky slope {} outside [0, 1)", self.slope)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Conv2d {
    name: String,
    cin: usize,
    cout: usize,
    kernel: (usize, usize),
    geo: Conv2dGeometry,
}

impl Conv2d {
    fn new(name: String, cin: usize, cout: usize, kernel: (usize, usize), stride: (usize, usize)) -> Self {
        Self {
            name,
            cin,
            cout,
            kernel,
            geo: Conv2dGeometry {
                stride,
                padding: (kernel.0 / 2, kernel.1 / 2),
            },
        }
    }

    fn declare(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        let fan_in = (self.cin * self.kernel.0 * self.kernel.1) as f64;
        store.declare(
            &format!("{}.weight", self.name),
            &[self.cout, self.cin, self.kernel.0, self.kernel.1],
            ParamInit::TruncNormal(fan_in.sqrt().recip()),
            rng,
        );
        store.declare(&format!("{}.bias", self.name), &[self.cout], ParamInit::Zeros, rng);
    }

    fn forward(&self, g: &mut Graph, store: &Store, x: Var) -> Result<Var> {
        let w = store.bind(g, &format!("{}.weight", self.name))?;
        let b = store.bind(g, &format!("{}.bias", self.name))?;
        Ok(g.conv2d(x, w, Some(b), self.geo))
    }
}

/// Parameters bound either as trainable leaves or as constants.
struct Store<'a> {
    params: &'a ParamStore,
    trainable: bool,
}

impl Store<'_> {
    fn bind(&self, g: &mut Graph, name: &str) -> Result<Var> {
        if self.trainable {
            self.params.bind(g, name)
        } else {
            Ok(g.constant(self.params.get(name)?.clone()))
        }
    }
}

/// Score map and intermediate activations of one sub-discriminator.
#[derive(Clone, Debug)]
pub struct SubOutput {
    pub score: Var,
    pub features: Vec<Var>,
}

fn run_stack(
    g: &mut Graph,
    store: &Store,
    layers: &[Conv2d],
    post: &Conv2d,
    slope: f64,
    mut h: Var,
) -> Result<SubOutput> {
    let mut features = Vec::with_capacity(layers.len() + 1);
    for layer in layers {
        h = layer.forward(g, store, h)?;
        h = g.leaky_relu(h, slope);
        features.push(h);
    }
    let out = post.forward(g, store, h)?;
    features.push(out);
    let n = g.value(out).numel();
    let score = g.reshape(out, &[n]);
    Ok(SubOutput { score, features })
}

#[derive(Clone, Debug)]
struct SubMpd {
    period: usize,
    layers: Vec<Conv2d>,
    post: Conv2d,
}

impl SubMpd {
    fn new(period: usize, cfg: &DiscriminatorConfig) -> Self {
        let prefix = format!("disc.mpd{period}");
        let mut cin = 1;
        let mut layers = Vec::new();
        for (i, &cout) in cfg.mpd_channels.iter().enumerate() {
            let stride = if i < 4 { 3 } else { 1 };
            layers.push(Conv2d::new(format!("{prefix}.conv{i}"), cin, cout, (5, 1), (stride, 1)));
            cin = cout;
        }
        let post = Conv2d::new(format!("{prefix}.post"), cin, 1, (3, 1), (1, 1));
        Self { period, layers, post }
    }

    fn forward(&self, g: &mut Graph, store: &Store, x: Var, slope: f64) -> Result<SubOutput> {
        let map = periodic_map(g, x, self.period)?;
        run_stack(g, store, &self.layers, &self.post, slope, map)
    }
}

/// Reflect-pad a `(B, T)` batch to a multiple of `p` and fold it into a
/// `(B, 1, T'/p, p)` map.
pub fn periodic_map(g: &mut Graph, x: Var, p: usize) -> Result<Var> {
    let (b, t) = match *g.shape(x) {
        [b, t] => (b, t),
        ref s => return Err(Error::Shape(format!("waveform batch must be (B, T), got {s:?}"))),
    };
    let pad = (p - t % p) % p;
    if pad >= t {
        return Err(Error::Validation(format!("{t} samples too short for period {p}")));
    }
    let index: Vec<usize> = (0..t + pad)
        .map(|i| if i < t { i } else { 2 * (t - 1) - i })
        .collect();
    let padded = gather_last(g, x, &index);
    Ok(g.reshape(padded, &[b, 1, (t + pad) / p, p]))
}

/// `y[b, j] = x[b, index[j]]` on a `(B, T)` batch.
fn gather_last(g: &mut Graph, x: Var, index: &[usize]) -> Var {
    let (b, t) = (g.shape(x)[0], g.shape(x)[1]);
    let n = index.len();
    let src = g.value(x).data();
    let mut data = Vec::with_capacity(b * n);
    for r in 0..b {
        data.extend(index.iter().map(|&i| src[r * t + i]));
    }
    let index = index.to_vec();
    g.op(&[x], Tensor::new(&[b, n], data), move |gy, _, _| {
        let mut gx = vec![0.0; b * t];
        for r in 0..b {
            for (j, &i) in index.iter().enumerate() {
                gx[r * t + i] += gy.data()[r * n + j];
            }
        }
        vec![Some(Tensor::new(&[b, t], gx))]
    })
}

#[derive(Clone, Debug)]
struct SubMrd {
    stft: StftConfig,
    layers: Vec<Conv2d>,
    post: Conv2d,
}

impl SubMrd {
    fn new(index: usize, stft: StftConfig, cfg: &DiscriminatorConfig) -> Self {
        let prefix = format!("disc.mrd{index}");
        let c = cfg.mrd_channels;
        let layers = vec![
            Conv2d::new(format!("{prefix}.conv0"), 1, c, (3, 9), (1, 1)),
            Conv2d::new(format!("{prefix}.conv1"), c, c, (3, 9), (1, 2)),
            Conv2d::new(format!("{prefix}.conv2"), c, c, (3, 9), (1, 2)),
            Conv2d::new(format!("{prefix}.conv3"), c, c, (3, 9), (1, 2)),
            Conv2d::new(format!("{prefix}.conv4"), c, c, (3, 3), (1, 1)),
        ];
        let post = Conv2d::new(format!("{prefix}.post"), c, 1, (3, 3), (1, 1));
        Self { stft, layers, post }
    }

    fn forward(&self, g: &mut Graph, store: &Store, x: Var, slope: f64) -> Result<SubOutput> {
        let (re, im) = g.stft(x, &self.stft)?;
        let mag = g.magnitude(re, im);
        let (b, n, f) = g.value(mag).dims3();
        let tf = g.permute(mag, &[0, 2, 1]);
        let map = g.reshape(tf, &[b, 1, f, n]);
        run_stack(g, store, &self.layers, &self.post, slope, map)
    }
}

/// The three sub-MRD resolutions: half, equal and double the codec STFT.
pub fn mrd_resolutions(base: &StftConfig) -> Result<[StftConfig; 3]> {
    let scaled = |num: usize, den: usize| -> Result<StftConfig> {
        let cfg = StftConfig::new(
            base.frame_length * num / den,
            base.frame_shift * num / den,
            base.fft_size * num / den,
            base.sample_rate,
        )?;
        Ok(cfg.with_framing(Framing::Centered))
    };
    Ok([scaled(1, 2)?, scaled(1, 1)?, scaled(2, 1)?])
}

/// Outputs of every sub-discriminator for one input batch.
#[derive(Clone, Debug)]
pub struct BankOutput {
    pub mpd: Vec<SubOutput>,
    pub mrd: Vec<SubOutput>,
}

/// Five sub-MPDs and three sub-MRDs with their parameters.
#[derive(Clone, Debug)]
pub struct DiscriminatorBank {
    pub config: DiscriminatorConfig,
    pub params: ParamStore,
    mpd: Vec<SubMpd>,
    mrd: Vec<SubMrd>,
}

impl DiscriminatorBank {
    pub fn new(config: DiscriminatorConfig, base: &StftConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mpd: Vec<SubMpd> = PERIODS.iter().map(|&p| SubMpd::new(p, &config)).collect();
        let mrd: Vec<SubMrd> = mrd_resolutions(base)?
            .into_iter()
            .enumerate()
            .map(|(i, s)| SubMrd::new(i, s, &config))
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for sub in &mpd {
            for l in sub.layers.iter().chain([&sub.post]) {
                l.declare(&mut params, &mut rng);
            }
        }
        for sub in &mrd {
            for l in sub.layers.iter().chain([&sub.post]) {
                l.declare(&mut params, &mut rng);
            }
        }
        Ok(Self {
            config,
            params,
            mpd,
            mrd,
        })
    }

    pub fn resolutions(&self) -> Vec<StftConfig> {
        self.mrd.iter().map(|m| m.stft).collect()
    }

    pub fn periods(&self) -> Vec<usize> {
        self.mpd.iter().map(|m| m.period).collect()
    }

    /// Run every sub-discriminator on a `(B, T)` batch. With `trainable`
    /// false the parameters enter the graph as constants.
    pub fn forward(&self, g: &mut Graph, x: Var, trainable: bool) -> Result<BankOutput> {
        let store = &Store {
            params: &self.params,
            trainable,
        };
        let slope = self.config.slope;
        let mpd = self
            .mpd
            .iter()
            .map(|m| m.forward(g, store, x, slope))
            .collect::<Result<_>>()?;
        let mrd = self
            .mrd
            .iter()
            .map(|m| m.forward(g, store, x, slope))
            .collect::<Result<_>>()?;
        Ok(BankOutput { mpd, mrd })
    }
}
