//! Helpers shared by the integration and acceptance test targets.
#![allow(dead_code)]

use apcodec::codec::{CodecConfig, CodecModel};
use apcodec::dsp::{Readout, StftConfig};
use apcodec::gradcheck::{self, GradCheck};
use apcodec::losses::{self, DiscriminatorBank, DiscriminatorConfig, LossWeights, MelConfig};
use apcodec::nn::{
    Conv1d, Conv1dGeometry, Conv2dGeometry, ConvNextBlock, ConvNextConfig, ConvSpec, ConvTranspose1d,
    ConvTranspose1dGeometry, FeedForward, Grn, GrnPooling, LayerNorm, ParamStore, Taps,
};
use apcodec::{Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rand_tensor(shape: &[usize], scale: f64, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(-scale..scale))
}

/// Values bounded away from zero, for ops with a kink at the origin.
pub fn off_zero(shape: &[usize], seed: u64) -> Tensor {
    rand_tensor(shape, 1.0, seed).map(|v| if v >= 0.0 { v + 0.2 } else { v - 0.2 })
}

pub fn noise(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen_range(-0.5..0.5)).collect()
}

/// Contract an output with a fixed random weighting into a scalar, so every
/// output element reaches the gradient.
pub fn project(g: &mut Graph, y: Var, seed: u64) -> Var {
    let r = rand_tensor(g.shape(y), 1.0, seed);
    let r = g.constant(r);
    let p = g.mul(y, r);
    g.sum(p)
}

fn store_for(declare: impl Fn(&mut ParamStore, &mut ChaCha8Rng), seed: u64) -> ParamStore {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    declare(&mut store, &mut rng);
    // perturb zero-initialised parameters so every path is exercised
    for (_, t) in store.iter_mut() {
        for v in t.data_mut() {
            *v += rng.gen_range(-0.3..0.3);
        }
    }
    store
}

fn case(out: &mut Vec<(String, f64)>, name: &str, f: impl Fn(&mut Graph, &[Var]) -> Var, inputs: &[Tensor]) {
    let r: GradCheck = gradcheck::check(f, inputs, 1e-6);
    out.push((name.to_string(), r.max_error()));
}

/// Finite-difference relative error of every primitive op, layer, model
/// graph and loss, on randomized small shapes.
pub fn gradient_suite(seed: u64) -> Vec<(String, f64)> {
    let mut out = Vec::new();
    let s = seed * 1000;
    let x = rand_tensor(&[2, 3, 5], 1.0, s + 1);
    let y = rand_tensor(&[2, 3, 5], 1.0, s + 2);
    let pos = rand_tensor(&[2, 3, 5], 1.0, s + 3).map(|v| v.abs() + 0.3);
    let kinked = off_zero(&[2, 3, 5], s + 4);

    // elementwise and reductions
    let unary: Vec<(&str, fn(&mut Graph, Var) -> Var, &Tensor)> = vec![
        ("exp", |g, v| g.exp(v), &x),
        ("exp_clamped", |g, v| g.exp_clamped(v, 1e8), &x),
        ("ln", |g, v| g.ln(v), &pos),
        ("sin", |g, v| g.sin(v), &x),
        ("cos", |g, v| g.cos(v), &x),
        ("square", |g, v| g.square(v), &x),
        ("abs", |g, v| g.abs(v), &kinked),
        ("sqrt_eps", |g, v| g.sqrt_eps(v, 1e-9), &pos),
        ("clamp_min", |g, v| g.clamp_min(v, 0.05), &kinked),
        ("relu", |g, v| g.relu(v), &kinked),
        ("leaky_relu", |g, v| g.leaky_relu(v, 0.1), &kinked),
        ("gelu", |g, v| g.gelu(v), &x),
        ("mean", |g, v| g.mean(v), &x),
        ("diff_axis1", |g, v| g.diff(v, 1), &x),
        ("diff_axis2", |g, v| g.diff(v, 2), &x),
        ("permute", |g, v| g.permute(v, &[2, 0, 1]), &x),
        ("reshape", |g, v| g.reshape(v, &[6, 5]), &x),
        ("slice", |g, v| g.slice(v, 2, 1, 3), &x),
        ("scale_shift", |g, v| {
            let a = g.scale(v, -1.7);
            g.add_scalar(a, 0.4)
        }, &x),
    ];
    for (i, (name, op, input)) in unary.into_iter().enumerate() {
        case(&mut out, name, |g, v| {
            let yv = op(g, v[0]);
            project(g, yv, s + 100 + i as u64)
        }, &[input.clone()]);
    }
    // anti-wrapping away from its kinks at multiples of π
    let aw = rand_tensor(&[2, 3, 5], 9.0, s + 5).map(|v| {
        let r = v.rem_euclid(std::f64::consts::PI);
        if r < 0.1 || r > std::f64::consts::PI - 0.1 { v + 0.3 } else { v }
    });
    case(&mut out, "anti_wrap", |g, v| {
        let a = g.anti_wrap(v[0]);
        project(g, a, s + 6)
    }, &[aw]);
    case(&mut out, "add_sub_mul", |g, v| {
        let a = g.add(v[0], v[1]);
        let b = g.sub(v[0], v[1]);
        let c = g.mul(a, b);
        project(g, c, s + 7)
    }, &[x.clone(), y.clone()]);
    case(&mut out, "concat", |g, v| {
        let c = g.concat(&[v[0], v[1]], 1);
        project(g, c, s + 8)
    }, &[x.clone(), y.clone()]);
    case(&mut out, "weighted_sum", |g, v| {
        let a = g.sum(v[0]);
        let b = g.sum(v[1]);
        g.weighted_sum(&[(0.3, a), (-2.0, b)])
    }, &[x.clone(), y.clone()]);
    case(&mut out, "phase", |g, v| {
        let p = g.phase(v[0], v[1]);
        project(g, p, s + 9)
    }, &[kinked.clone(), off_zero(&[2, 3, 5], s + 10)]);
    case(&mut out, "mse_mae", |g, v| {
        let a = g.mse(v[0], v[1]);
        let b = g.mae(v[0], v[1]);
        g.add(a, b)
    }, &[x.clone(), y.clone()]);

    // normalisation
    let gamma = rand_tensor(&[3], 1.0, s + 11);
    let beta = rand_tensor(&[3], 1.0, s + 12);
    case(&mut out, "layer_norm", |g, v| {
        let n = g.layer_norm(v[0], v[1], v[2]);
        project(g, n, s + 13)
    }, &[x.clone(), gamma.clone(), beta.clone()]);
    for (name, pooling) in [("grn_global", GrnPooling::Global), ("grn_per_frame", GrnPooling::PerFrame)] {
        case(&mut out, name, |g, v| {
            let n = g.grn(v[0], v[1], v[2], pooling);
            project(g, n, s + 14)
        }, &[x.clone(), gamma.clone(), beta.clone()]);
    }

    // convolutions
    let geometries = [
        ("conv1d_same", Conv1dGeometry::same(3), 4, 4, 3),
        ("conv1d_strided_causal", Conv1dGeometry { stride: 2, dilation: 1, pad_left: 1, pad_right: 0, groups: 1 }, 4, 2, 3),
        ("conv1d_grouped_dilated", Conv1dGeometry { stride: 1, dilation: 2, pad_left: 2, pad_right: 2, groups: 2 }, 4, 4, 3),
    ];
    for (i, (name, geo, cin, cout, k)) in geometries.into_iter().enumerate() {
        let xi = rand_tensor(&[2, cin, 7], 1.0, s + 20 + i as u64);
        let w = rand_tensor(&[cout, cin / geo.groups, k], 1.0, s + 30 + i as u64);
        let b = rand_tensor(&[cout], 1.0, s + 40 + i as u64);
        case(&mut out, name, |g, v| {
            let yv = g.conv1d(v[0], v[1], Some(v[2]), geo);
            project(g, yv, s + 50 + i as u64)
        }, &[xi, w, b]);
    }
    let tgeo = ConvTranspose1dGeometry { stride: 2, trim_left: 1, trim_right: 1 };
    case(&mut out, "conv_transpose1d", |g, v| {
        let yv = g.conv_transpose1d(v[0], v[1], Some(v[2]), tgeo);
        project(g, yv, s + 60)
    }, &[rand_tensor(&[2, 3, 4], 1.0, s + 61), rand_tensor(&[3, 2, 4], 1.0, s + 62), rand_tensor(&[2], 1.0, s + 63)]);
    let geo2 = Conv2dGeometry { stride: (2, 1), padding: (1, 1) };
    case(&mut out, "conv2d", |g, v| {
        let yv = g.conv2d(v[0], v[1], Some(v[2]), geo2);
        project(g, yv, s + 64)
    }, &[rand_tensor(&[1, 2, 6, 5], 1.0, s + 65), rand_tensor(&[3, 2, 3, 3], 1.0, s + 66), rand_tensor(&[3], 1.0, s + 67)]);

    // layers, with respect to their input
    let conv = Conv1d::new("c", ConvSpec::new(3, 4, 3).stride(2).causal(true)).unwrap();
    let deconv = ConvTranspose1d::new("d", ConvSpec::new(3, 2, 4).stride(2)).unwrap();
    let ff = FeedForward::new("f", 3, 6);
    let ln = LayerNorm::new("n", 3);
    let blocks = [
        ConvNextBlock::new("b", ConvNextConfig { dim: 3, hidden: 6, dw_kernel: 3, causal: false }).unwrap(),
        ConvNextBlock::new("b", ConvNextConfig { dim: 3, hidden: 6, dw_kernel: 3, causal: true }).unwrap(),
    ];
    let xl = rand_tensor(&[1, 3, 6], 1.0, s + 70);
    let st = store_for(|st, r| conv.declare(st, r), s + 71);
    case(&mut out, "layer_conv1d", |g, v| {
        let yv = conv.forward(g, &st, v[0]).unwrap();
        project(g, yv, s + 72)
    }, &[xl.clone()]);
    let st = store_for(|st, r| deconv.declare(st, r), s + 73);
    case(&mut out, "layer_deconv", |g, v| {
        let yv = deconv.forward(g, &st, v[0]).unwrap();
        project(g, yv, s + 74)
    }, &[xl.clone()]);
    let st = store_for(|st, r| ff.declare(st, r), s + 75);
    case(&mut out, "layer_feed_forward", |g, v| {
        let yv = ff.forward(g, &st, v[0]).unwrap();
        project(g, yv, s + 76)
    }, &[xl.clone()]);
    let st = store_for(|st, r| ln.declare(st, r), s + 77);
    case(&mut out, "layer_layer_norm", |g, v| {
        let yv = ln.forward(g, &st, v[0]).unwrap();
        project(g, yv, s + 78)
    }, &[xl.clone()]);
    for (i, pooling) in [GrnPooling::Global, GrnPooling::PerFrame].into_iter().enumerate() {
        let grn = Grn { name: "g".into(), channels: 3, pooling };
        let st = store_for(|st, r| grn.declare(st, r), s + 84 + i as u64);
        case(&mut out, &format!("layer_grn_{pooling:?}").to_lowercase(), |g, v| {
            let yv = grn.forward(g, &st, v[0]).unwrap();
            project(g, yv, s + 86 + i as u64)
        }, &[xl.clone()]);
    }
    for (i, block) in blocks.iter().enumerate() {
        let st = store_for(|st, r| block.declare(st, r), s + 80 + i as u64);
        let name = if block.config.causal { "layer_convnext_causal" } else { "layer_convnext" };
        case(&mut out, name, |g, v| {
            let yv = block.forward(g, &st, v[0]).unwrap();
            project(g, yv, s + 82 + i as u64)
        }, &[xl.clone()]);
    }

    // spectral transforms
    let stft = StftConfig::new(16, 4, 16, 8000).unwrap();
    let wave = rand_tensor(&[1, 24], 1.0, s + 90);
    case(&mut out, "stft", |g, v| {
        let (re, im) = g.stft(v[0], &stft).unwrap();
        let a = project(g, re, s + 91);
        let b = project(g, im, s + 92);
        g.add(a, b)
    }, &[wave.clone()]);
    for (name, readout) in [("istft_aligned", Readout::Aligned), ("istft_delayed", Readout::Delayed)] {
        case(&mut out, name, |g, v| {
            let w = g.istft(v[0], v[1], &stft, readout).unwrap();
            project(g, w, s + 93)
        }, &[rand_tensor(&[1, 9, 6], 1.0, s + 94), rand_tensor(&[1, 9, 6], 1.0, s + 95)]);
    }
    case(&mut out, "polar", |g, v| {
        let (re, im) = g.polar(v[0], v[1]);
        let a = project(g, re, s + 96);
        let b = project(g, im, s + 97);
        g.add(a, b)
    }, &[rand_tensor(&[1, 4, 3], 0.5, s + 98), rand_tensor(&[1, 4, 3], 3.0, s + 99)]);
    case(&mut out, "magnitude", |g, v| {
        let m = g.magnitude(v[0], v[1]);
        project(g, m, s + 100)
    }, &[off_zero(&[1, 4, 3], s + 101), off_zero(&[1, 4, 3], s + 102)]);
    let mel = MelConfig::new(stft, 4).unwrap();
    case(&mut out, "log_mel", |g, v| {
        let m = losses::log_mel(g, v[0], &mel).unwrap();
        project(g, m, s + 103)
    }, &[wave.clone()]);

    // model graphs
    for causal in [false, true] {
        let model = CodecModel::new(CodecConfig::micro().with_causal(causal), seed + 3).unwrap();
        let nb = model.config.stft.n_bins();
        let amp = rand_tensor(&[1, nb, 8], 1.0, s + 200);
        let pha = rand_tensor(&[1, nb, 8], 3.0, s + 201);
        let tag = if causal { "_causal" } else { "" };
        case(&mut out, &format!("encoder{tag}"), |g, v| {
            let c = model.encode_graph(g, v[0], v[1], &mut Taps::new()).unwrap();
            project(g, c, s + 202)
        }, &[amp, pha]);
        let code = rand_tensor(&[1, model.config.code_dim, 2], 1.0, s + 203);
        case(&mut out, &format!("decoder{tag}"), |g, v| {
            let [a, re, im, p] = model.decode_graph(g, v[0], &mut Taps::new()).unwrap();
            let terms = [project(g, a, s + 204), project(g, re, s + 205), project(g, im, s + 206), project(g, p, s + 207)];
            g.weighted_sum(&terms.map(|t| (1.0, t)))
        }, &[code]);
    }
    let books: Vec<Tensor> = (0..2).map(|q| rand_tensor(&[4, 3], 1.0, s + 210 + q)).collect();
    case(&mut out, "quantizer_loss", |g, v| {
        let bs: Vec<Var> = books.iter().map(|b| g.constant(b.clone())).collect();
        losses::quantize_graph(g, v[0], &bs).unwrap().loss
    }, &[rand_tensor(&[5, 3], 1.0, s + 212)]);
    case(&mut out, "gather_rows", |g, v| {
        let r = g.gather_rows(v[0], &[2, 0, 2, 1]);
        project(g, r, s + 213)
    }, &[rand_tensor(&[3, 2], 1.0, s + 214)]);

    // losses
    let a = rand_tensor(&[1, 5, 4], 1.0, s + 300);
    let b = rand_tensor(&[1, 5, 4], 1.0, s + 301);
    case(&mut out, "loss_amplitude", |g, v| losses::amplitude_loss(g, v[0], v[1]).unwrap(), &[a.clone(), b.clone()]);
    let pa = rand_tensor(&[1, 5, 4], 3.0, s + 302);
    let pb = rand_tensor(&[1, 5, 4], 3.0, s + 303);
    for (name, pick) in [
        ("loss_phase_ip", 0usize),
        ("loss_phase_gd", 1),
        ("loss_phase_iaf", 2),
    ] {
        case(&mut out, name, |g, v| {
            let p = losses::phase_loss(g, v[0], v[1]).unwrap();
            [p.ip, p.gd, p.iaf][pick]
        }, &[pa.clone(), pb.clone()]);
    }
    let nb = stft.n_bins();
    let parts: Vec<Tensor> = (0..4).map(|i| rand_tensor(&[1, nb, 6], 1.0, s + 310 + i)).collect();
    case(&mut out, "loss_complex", |g, v| {
        losses::complex_spectrum_loss(g, (v[0], v[1]), (v[2], v[3]), &stft, 2.25).unwrap().total
    }, &parts);
    case(&mut out, "loss_mel", |g, v| losses::mel_loss(g, v[0], v[1], &mel).unwrap(), &[wave.clone(), rand_tensor(&[1, 24], 1.0, s + 320)]);
    let target = rand_tensor(&[1, 24], 0.5, s + 321);
    let weights = LossWeights::default();
    case(&mut out, "loss_spectral_total", |g, v| {
        let pred = losses::decoded(g, v[0], v[1], &stft).unwrap();
        let tgt = losses::reference(g, &target, &stft).unwrap();
        losses::spectral_losses(g, &pred, &tgt, &mel, &weights).unwrap().total
    }, &[rand_tensor(&[1, nb, 6], 0.5, s + 322), rand_tensor(&[1, nb, 6], 3.0, s + 323)]);
    case(&mut out, "loss_adversarial", |g, v| {
        let (lg, ld) = losses::adversarial_losses(g, v[0], v[1]);
        g.add(lg, ld)
    }, &[off_zero(&[6], s + 330).map(|v| v * 2.0 + 1.0 * v.signum()), off_zero(&[6], s + 331).map(|v| 2.0 * v)]);
    case(&mut out, "loss_feature_matching", |g, v| {
        losses::feature_matching(g, &[v[0], v[1]], &[v[2], v[3]]).unwrap()
    }, &[
        rand_tensor(&[2, 3], 1.0, s + 332),
        rand_tensor(&[4], 1.0, s + 333),
        rand_tensor(&[2, 3], 1.0, s + 334),
        rand_tensor(&[4], 1.0, s + 335),
    ]);
    let teacher = rand_tensor(&[2, 3], 1.0, s + 340);
    case(&mut out, "loss_kd", |g, v| {
        let t = g.constant(teacher.clone());
        let tt: Taps = vec![("t".into(), t)];
        let ss: Taps = vec![("t".into(), v[0])];
        losses::kd_loss(g, &tt, &ss).unwrap()
    }, &[rand_tensor(&[2, 3], 1.0, s + 341)]);
    let dcfg = DiscriminatorConfig { mpd_channels: [2, 2, 2, 2, 2], mrd_channels: 2, slope: 0.1 };
    let bank = DiscriminatorBank::new(dcfg, &stft, seed + 9).unwrap();
    case(&mut out, "loss_gan_and_discriminators", |g, v| {
        let r = bank.forward(g, v[0], false).unwrap();
        let f = bank.forward(g, v[1], false).unwrap();
        let (lg, ld) = losses::gan_losses(g, &r, &f, 0.1).unwrap();
        g.add(lg, ld)
    }, &[rand_tensor(&[1, 48], 0.5, s + 350), rand_tensor(&[1, 48], 0.5, s + 351)]);
    out
}
