use super::*;
use rand::Rng;

fn noise(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen_range(-0.5..0.5)).collect()
}

fn micro(causal: bool) -> CodecModel {
    CodecModel::new(CodecConfig::micro().with_causal(causal), 11).unwrap()
}

#[test]
fn default_shapes_and_frame_rate() {
    let model = CodecModel::new(CodecConfig::default(), 0).unwrap();
    assert_eq!(model.config.code_frame_rate(), 150.0);
    assert!((model.config.latency_ms() - 6.6667).abs() < 1e-3);
    let x = noise(2560, 1);
    let frames = model.analyze(&x).unwrap();
    assert_eq!(frames.log_amplitude.shape(), &[64, 513]);
    let code = model.encode(&frames).unwrap();
    assert_eq!(code.values.shape(), &[8, 32]);
    let decoded = model.decode(&code).unwrap();
    assert_eq!(decoded.log_amplitude.shape(), &[64, 513]);
    assert_eq!(decoded.phase.shape(), &[64, 513]);
    assert_eq!(model.reconstruct(&code).unwrap().len(), 2560);
}

#[test]
fn param_count_formula_matches_allocation() {
    for causal in [false, true] {
        for cfg in [CodecConfig::micro(), CodecConfig::tiny()] {
            let cfg = cfg.with_causal(causal);
            let m = CodecModel::new(cfg, 0).unwrap();
            assert_eq!(m.num_params(), cfg.param_count(), "causal={causal}");
        }
    }
    let cfg = CodecConfig::default();
    assert_eq!(CodecModel::new(cfg, 0).unwrap().num_params(), cfg.param_count());
}

#[test]
fn encode_is_deterministic() {
    let model = micro(false);
    let x = noise(512, 2);
    let f = model.analyze(&x).unwrap();
    assert_eq!(model.encode(&f).unwrap(), model.encode(&f).unwrap());
    let again = micro(false);
    assert_eq!(model.encode(&f).unwrap(), again.encode(&f).unwrap());
}

#[test]
fn decoded_phase_in_principal_range() {
    for causal in [false, true] {
        let model = micro(causal);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let code = LatentCode {
            values: Tensor::from_fn(&[6, 4], |_| rng.gen_range(-50.0..50.0)),
            frame_rate: 1.0,
        };
        let d = model.decode(&code).unwrap();
        assert_eq!(d.frames(), 24);
        assert!(d.phase.data().iter().all(|&p| p > -std::f64::consts::PI && p <= std::f64::consts::PI));
    }
}

#[test]
fn frame_count_must_divide_ratio() {
    let model = micro(false);
    let x = noise(8 * 10, 4);
    let frames = dsp::stft(&x, &model.analysis_stft()).unwrap();
    assert!(matches!(
        model.encode(&frames),
        Err(Error::Framing { frames: 10, ratio: 4 })
    ));
}

#[test]
fn reconstruct_is_composition() {
    let model = micro(false);
    let code = model.encode(&model.analyze(&noise(256, 5)).unwrap()).unwrap();
    let direct = model.reconstruct(&code).unwrap();
    let spec = dsp::complex_from_amp_phase(&model.decode(&code).unwrap());
    assert_eq!(direct, dsp::istft(&spec).unwrap());
}

#[test]
fn zero_amplitude_decoder_is_near_silent() {
    let mut model = micro(false);
    let n = model.config.stft.n_bins();
    let w = model.params.get("dec.amp.out.weight").unwrap().shape().to_vec();
    model.params.insert("dec.amp.out.weight", Tensor::zeros(&w));
    model.params.insert("dec.amp.out.bias", Tensor::full(&[n], -30.0));
    let code = model.encode(&model.analyze(&noise(256, 6)).unwrap()).unwrap();
    let y = model.reconstruct(&code).unwrap();
    assert!(y.iter().all(|v| v.abs() < 1e-10));
}

#[test]
fn taps_follow_probe_points_and_align() {
    let teacher = micro(false);
    let student = micro(true);
    let names = teacher.distill_probe_points();
    assert_eq!(names, student.distill_probe_points());
    let x = noise(256, 7);
    let mut shapes = Vec::new();
    for model in [&teacher, &student] {
        let f = model.analyze(&x).unwrap();
        let mut g = Graph::inference();
        let a = g.constant(to_channels(&f.log_amplitude));
        let p = g.constant(to_channels(&f.phase));
        let out = model.forward_graph(&mut g, a, p).unwrap();
        let tap_names: Vec<_> = out.taps.iter().map(|(n, _)| n.clone()).collect();
        assert_eq!(tap_names, names);
        shapes.push(out.taps.iter().map(|(_, v)| g.shape(*v).to_vec()).collect::<Vec<_>>());
    }
    assert_eq!(shapes[0], shapes[1]);
}

#[test]
fn checkpoint_round_trip() {
    let model = micro(true);
    let ckpt = model.to_checkpoint(Precision::F64).unwrap();
    let back = CodecModel::from_checkpoint(&Checkpoint::from_bytes(&ckpt.to_bytes()).unwrap()).unwrap();
    assert_eq!(back.config, model.config);
    assert_eq!(back.params, model.params);
    assert_eq!(back.rvq, model.rvq);
}

#[test]
fn mismatched_checkpoint_is_rejected() {
    let model = micro(false);
    let mut ckpt = model.to_checkpoint(Precision::F32).unwrap();
    ckpt.tensors.insert("enc.fuse.bias".into(), Tensor::zeros(&[5]));
    assert!(CodecModel::from_checkpoint(&ckpt).is_err());
}

/// Earliest output sample that changes when input sample `t` is perturbed.
fn first_change(model: &CodecModel, x: &[f64], clean: &[f64], t: usize) -> Option<usize> {
    let mut y = x.to_vec();
    y[t] += 0.5;
    let out = model.round_trip_continuous(&y).unwrap();
    out.iter().zip(clean).position(|(a, b)| a != b)
}

#[test]
fn causal_model_respects_block_horizon() {
    let model = micro(true);
    let hop = model.config.hop();
    let x = noise(hop * 6, 8);
    let clean = model.round_trip_continuous(&x).unwrap();
    let mut latency = 0;
    for t in (0..x.len()).step_by(7).chain([hop - 1, 2 * hop - 1, 2 * hop]) {
        if let Some(n) = first_change(&model, &x, &clean, t) {
            assert!(n >= t / hop * hop, "t={t} changed output {n}");
            latency = latency.max(t + 1 - n.min(t + 1));
        }
    }
    assert_eq!(latency, hop);
}

#[test]
fn non_causal_model_looks_ahead() {
    let model = micro(false);
    let hop = model.config.hop();
    let x = noise(hop * 6, 9);
    let clean = model.round_trip_continuous(&x).unwrap();
    let n = first_change(&model, &x, &clean, 3 * hop).unwrap();
    assert!(n < 3 * hop);
}

#[test]
fn streaming_matches_batch() {
    let model = micro(true);
    let x = noise(model.config.hop() * 9 + 13, 10);
    let batch = model.round_trip(&x).unwrap();
    let batch_tokens = model.encode_waveform(&x).unwrap();
    for chunk in [1, 5, 32, 33, 1000] {
        let s = StreamSession::run_chunked(&model, &x, chunk).unwrap();
        assert_eq!(s.tokens, batch_tokens);
        assert_eq!(s.audio.len(), batch.len());
        let err = s.audio.iter().zip(&batch).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-12, "chunk {chunk}: {err}");
    }
}

#[test]
fn short_push_emits_nothing_and_reset_restarts() {
    let model = micro(true);
    let mut s = StreamSession::new(&model).unwrap();
    let x = noise(model.config.hop() * 2, 11);
    let out = s.push(&model, &x[..model.config.hop() - 1]).unwrap();
    assert!(out.tokens.is_empty() && out.audio.is_empty());
    assert_eq!(s.encoder.state.pending_samples(), model.config.hop() - 1);
    let first = s.push(&model, &x[model.config.hop() - 1..]).unwrap();
    s.reset();
    let again = s.push(&model, &x).unwrap();
    assert_eq!(first, again);
}

#[test]
fn non_causal_model_cannot_stream() {
    assert!(matches!(StreamSession::new(&micro(false)), Err(Error::Mode(_))));
}

#[test]
fn causal_config_limits_kernel() {
    let mut cfg = CodecConfig::default().with_causal(true);
    assert!(cfg.validate().is_ok());
    cfg.conv_kernel = 16;
    assert!(cfg.validate().is_err());
}

#[test]
fn latency_probe_reports_one_code_frame() {
    let model = micro(true);
    let x = noise(model.config.hop() * 5, 12);
    assert_eq!(model.probe_latency(&x).unwrap(), model.config.hop());
    assert!(matches!(micro(false).probe_latency(&x), Err(Error::Mode(_))));
}

#[test]
fn bitstream_round_trip_through_model() {
    let model = micro(false);
    let x = noise(model.config.hop() * 4 + 7, 13);
    let stream = model.encode_bitstream(&x).unwrap();
    assert_eq!(stream.header.frames, 4);
    let bytes = stream.to_bytes();
    let back = crate::quantizer::TokenBitstream::from_bytes(&bytes).unwrap();
    let y = model.decode_bitstream(&back).unwrap();
    assert_eq!(y, model.round_trip(&x).unwrap());
    let mut other = back.clone();
    other.header.codebook_size *= 2;
    assert!(model.decode_bitstream(&other).is_err());
}
