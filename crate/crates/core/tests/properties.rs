use std::f64::consts::PI;

use apcodec::dsp::StftConfig;
use apcodec::eval::{self, awpd_phases, EvalConfig};
use apcodec::losses::anti_wrap;
use apcodec::quantizer::{self, Codebook, RvqState, StreamHeader, TokenBitstream, TokenFrame};
use apcodec::Tensor;
use proptest::prelude::*;

fn small_eval() -> EvalConfig {
    let mut c = EvalConfig::new(16_000);
    c.stft = StftConfig::new(256, 64, 256, 16_000).unwrap();
    c.n_mel = 16;
    c
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn anti_wrap_is_two_pi_periodic(x in -100.0f64..100.0, k in -1000i64..1000) {
        let shifted = anti_wrap(x + 2.0 * PI * k as f64);
        prop_assert!((shifted - anti_wrap(x)).abs() < 1e-9);
        prop_assert!((0.0..=PI).contains(&anti_wrap(x)));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn awpd_ignores_whole_turns(
        a in prop::collection::vec(-PI..PI, 24),
        b in prop::collection::vec(-PI..PI, 24),
        turns in prop::collection::vec(-3i32..=3, 24),
    ) {
        let s = StftConfig::default();
        let p = Tensor::new(&[4, 6], a);
        let q = Tensor::new(&[4, 6], b);
        let wrapped = Tensor::new(
            &[4, 6],
            p.data().iter().zip(&turns).map(|(v, k)| v + 2.0 * PI * *k as f64).collect(),
        );
        let base = awpd_phases(&p, &q, &s).unwrap();
        let moved = awpd_phases(&wrapped, &q, &s).unwrap();
        prop_assert!((base.ip - moved.ip).abs() < 1e-9);
        prop_assert!((base.gd - moved.gd).abs() < 1e-12 * base.gd.max(1.0));
        prop_assert!((base.iaf - moved.iaf).abs() < 1e-9 * base.iaf.max(1.0));
    }

    #[test]
    fn metrics_are_symmetric(
        a in prop::collection::vec(-1.0f64..1.0, 640),
        b in prop::collection::vec(-1.0f64..1.0, 640),
    ) {
        let c = small_eval();
        let close = |x: f64, y: f64| (x - y).abs() <= 1e-9 * x.abs().max(1.0);
        prop_assert!(close(eval::lsd(&a, &b, &c).unwrap(), eval::lsd(&b, &a, &c).unwrap()));
        prop_assert!(close(eval::mcd(&a, &b, &c).unwrap(), eval::mcd(&b, &a, &c).unwrap()));
        let (ab, ba) = (eval::awpd(&a, &b, &c).unwrap(), eval::awpd(&b, &a, &c).unwrap());
        prop_assert!(close(ab.ip, ba.ip) && close(ab.gd, ba.gd) && close(ab.iaf, ba.iaf));
    }
}

fn token_case() -> impl Strategy<Value = (usize, Vec<TokenFrame>)> {
    (2usize..=4096, 1usize..=8, 0usize..40).prop_flat_map(|(m, q, frames)| {
        let frame = prop::collection::vec(0..m as u32, q).prop_map(|indices| TokenFrame { indices });
        (Just(m), prop::collection::vec(frame, frames))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn bitstream_round_trips((m, tokens) in token_case(), q in 1usize..=8) {
        let q = tokens.first().map_or(q, |t| t.indices.len());
        let books = (0..q).map(|_| Codebook::new(Tensor::zeros(&[m, 1])).unwrap()).collect();
        let rvq = RvqState::new(books).unwrap();
        let header = StreamHeader::new(&StftConfig::default(), 8, &rvq, tokens.len());
        let stream = quantizer::pack(&tokens, header).unwrap();
        let bits = tokens.len() * q * quantizer::bits_per_index(m) as usize;
        prop_assert_eq!(stream.payload.len(), bits.div_ceil(8));
        let parsed = TokenBitstream::from_bytes(&stream.to_bytes()).unwrap();
        prop_assert_eq!(quantizer::unpack(&parsed).unwrap(), tokens);
    }

    #[test]
    fn rvq_matches_exhaustive_search(
        q in 1usize..=4,
        m in 2usize..=16,
        dim in 1usize..=4,
        seed in any::<u64>(),
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let rvq = RvqState::random(q, m, dim, 1.0, &mut rng).unwrap();
        let code = Tensor::from_fn(&[3, dim], |_| rng.gen_range(-2.0..2.0));
        let out = quantizer::quantize(&code, &rvq).unwrap();
        // the greedy cascade equals the best single-stage choice at every stage
        for f in 0..3 {
            let mut r = code.data()[f * dim..(f + 1) * dim].to_vec();
            for (stage, book) in rvq.books.iter().enumerate() {
                let d: Vec<f64> = (0..m)
                    .map(|j| book.row(j).iter().zip(&r).map(|(a, b)| (a - b) * (a - b)).sum())
                    .collect();
                let got = out.tokens[f].indices[stage] as usize;
                prop_assert!(d.iter().all(|&v| d[got] <= v));
                prop_assert_eq!(got, d.iter().position(|&v| v == d[got]).unwrap());
                for (v, b) in r.iter_mut().zip(book.row(got)) {
                    *v -= b;
                }
            }
        }
        let back = quantizer::dequantize(&out.tokens, &rvq).unwrap();
        prop_assert!(back.zip_map(&out.quantized, |a, b| a - b).max_abs() < 1e-12);
    }
}
