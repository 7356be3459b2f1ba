//! Network definitions, initialization and the checkpointed model bundle.

mod adaon;
mod bundle;
mod checkpoint;
mod discriminator;
mod generator;
mod init;

pub use adaon::{stage_factors, AdaOnDecoder, AdaOnEncoder, ENCODER_STRIDES, ENCODER_WIDTHS};
pub use bundle::{param_digest, AdaOnSet, ModelBundle, Optimizers, Variant};
pub use checkpoint::{
    load_checkpoint, read_checkpoint_header, save_checkpoint, CheckpointHeader, OptimizerHeader,
    TensorEntry, FORMAT_VERSION, MAGIC,
};
pub use discriminator::{
    receptive_field, Discriminator, DISCRIMINATOR_LAYERS, DISCRIMINATOR_MIN_SIDE,
};
pub use generator::{
    Generator, ResidualTranslator, Segmenter, GENERATOR_BLOCKS, GENERATOR_DROPOUT,
    SEGMENTER_BLOCKS,
};
pub use init::{init_gaussian, init_he, INIT_STD};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{AdamConfig, ForwardCtx, HasParams};
    use crate::seed;
    use crate::{FeatureMap, FeatureMap64};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_image(side: usize, seed: u64) -> FeatureMap64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FeatureMap::from_fn(1, side, side, |_, _, _| rng.gen_range(-1.0..1.0))
    }

    /// Largest relative error between analytic and central-difference gradients
    /// of `loss` over `samples` randomly chosen parameters.
    fn gradcheck<N: HasParams<f64>>(
        net: &mut N,
        mut loss: impl FnMut(&mut N, bool) -> f64,
        samples: usize,
        seed: u64,
    ) -> f64 {
        net.zero_grad();
        loss(net, true);
        let mut picks = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sizes: Vec<(String, usize)> = net
            .params()
            .iter()
            .filter(|(n, _)| !n.contains("running"))
            .map(|(n, p)| (n.clone(), p.len()))
            .collect();
        let total: usize = sizes.iter().map(|(_, s)| s).sum();
        for _ in 0..samples {
            let mut k = rng.gen_range(0..total);
            let (name, _) = sizes
                .iter()
                .find(|(_, s)| {
                    if k < *s {
                        true
                    } else {
                        k -= s;
                        false
                    }
                })
                .unwrap();
            picks.push((name.clone(), k));
        }
        // small step: instance norm over 2x2 maps is strongly curved
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for (name, k) in picks {
            let analytic = net.params().iter().find(|(n, _)| *n == name).unwrap().1.grad[k];
            let nudge = |net: &mut N, d: f64| {
                for (n, p) in net.params_mut() {
                    if n == name {
                        p.value[k] += d;
                    }
                }
            };
            nudge(net, h);
            let up = loss(net, false);
            nudge(net, -2.0 * h);
            let down = loss(net, false);
            nudge(net, h);
            let numeric = (up - down) / (2.0 * h);
            let scale = analytic.abs().max(numeric.abs());
            if scale > 1e-7 {
                worst = worst.max((analytic - numeric).abs() / scale);
            }
        }
        worst
    }

    fn randomized<N: HasParams<f64>>(mut net: N, std: f64, seed: u64) -> N {
        init_gaussian(&mut net, std, &mut ChaCha8Rng::seed_from_u64(seed));
        // perturb norm parameters too so their gradients are exercised
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        for (n, p) in net.params_mut() {
            if n.ends_with("scale") || n.ends_with("shift") || n.ends_with("bias") {
                p.value.iter_mut().for_each(|v| *v += rng.gen_range(-0.2..0.2));
            }
        }
        net
    }

    #[test]
    fn generator_preserves_shape_and_range() {
        let mut g = ModelBundle::<f32>::initialized(8, Variant::Full, 1, AdamConfig::default())
            .unwrap()
            .generator;
        let x = rand_image(64, 2).cast::<f32>();
        let y = g.forward(&x, &mut ForwardCtx::eval()).unwrap();
        assert_eq!(y.shape(), [1, 64, 64]);
        assert!(y.data().iter().all(|v| v.abs() < 1.0));
        assert!(g.forward(&rand_image(62, 2).cast(), &mut ForwardCtx::eval()).is_err());
    }

    #[test]
    fn segmenter_outputs_distributions() {
        let mut s = Segmenter::<f64>::new(4, 4).unwrap();
        init_gaussian(&mut s, 0.3, &mut ChaCha8Rng::seed_from_u64(3));
        let p = s.forward(&rand_image(64, 4), &mut ForwardCtx::eval()).unwrap();
        assert_eq!(p.shape(), [4, 64, 64]);
        for i in 0..p.plane_len() {
            let sum: f64 = (0..4).map(|c| p.channel(c)[i]).sum();
            assert!((sum - 1.0).abs() < 1e-6);
        }
        // a zeroed last layer gives uniform logits
        for (n, p) in s.params_mut() {
            if n.starts_with("up.6.") {
                p.value.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let p = s.forward(&rand_image(32, 5), &mut ForwardCtx::eval()).unwrap();
        assert!(p.data().iter().all(|v| (v - 0.25).abs() < 1e-12));
    }

    #[test]
    fn discriminator_map_shape_and_minimum_side() {
        let mut d = Discriminator::<f64>::new(4).unwrap();
        init_gaussian(&mut d, 0.02, &mut ChaCha8Rng::seed_from_u64(1));
        let y = d.forward(&rand_image(64, 1), &mut ForwardCtx::eval()).unwrap();
        assert_eq!(y.shape(), [1, 16, 16]);
        assert_eq!(Discriminator::<f64>::output_side(64), 16);
        assert!(d.forward(&rand_image(4, 1), &mut ForwardCtx::eval()).is_err());
        let again = d.forward(&rand_image(64, 1), &mut ForwardCtx::eval()).unwrap();
        assert_eq!(y, again);
    }

    #[test]
    fn discriminator_responses_are_local_to_their_receptive_field() {
        let mut d = randomized(Discriminator::<f64>::new(4).unwrap(), 0.3, 9);
        // give the running statistics non-trivial values
        let mut ctx = ForwardCtx::train(ChaCha8Rng::seed_from_u64(0));
        for s in 0..3 {
            d.forward(&rand_image(64, 10 + s), &mut ctx).unwrap();
        }
        // window of output index o: [o*jump - pad_total, o*jump - pad_total + rf)
        let (mut jump, mut pad_total) = (1usize, 0usize);
        for (_, s) in DISCRIMINATOR_LAYERS {
            pad_total += jump;
            jump *= s;
        }
        let rf = receptive_field();
        assert_eq!(rf, 42);
        let x = rand_image(64, 20);
        let base = d.forward(&x, &mut ForwardCtx::eval()).unwrap();
        for &(py, px) in &[(0usize, 0usize), (31, 17), (63, 40), (10, 55)] {
            let mut x2 = x.clone();
            x2.set(0, py, px, x.get(0, py, px) + 0.7);
            let out = d.forward(&x2, &mut ForwardCtx::eval()).unwrap();
            let covers = |o: usize, p: usize| {
                let start = (o * jump) as isize - pad_total as isize;
                (p as isize) >= start && (p as isize) < start + rf as isize
            };
            for oy in 0..base.height() {
                for ox in 0..base.width() {
                    if !(covers(oy, py) && covers(ox, px)) {
                        assert_eq!(base.get(0, oy, ox), out.get(0, oy, ox));
                    }
                }
            }
            assert_ne!(base, out);
        }
    }

    /// Parameter count of the generator, enumerated layer by layer.
    fn generator_params_by_hand(c: usize) -> usize {
        let conv = |cin: usize, cout: usize, k: usize, bias: bool| cin * cout * k * k + if bias { cout } else { 0 };
        let norm = |ch: usize| 2 * ch;
        let stem = conv(1, c, 7, false) + norm(c);
        let down1 = conv(c + 1, 2 * c, 3, false) + norm(2 * c);
        let down2 = conv(2 * c + 1, 4 * c, 3, false) + norm(4 * c);
        let block = 2 * (conv(4 * c, 4 * c, 3, false) + norm(4 * c));
        let up = conv(4 * c, 2 * c, 3, false) + norm(2 * c) + conv(2 * c, c, 3, false) + norm(c) + conv(c, 1, 7, true);
        stem + down1 + down2 + GENERATOR_BLOCKS * block + up
    }

    #[test]
    fn parameter_count_matches_enumeration_and_grows_with_width() {
        for c in [4, 8, 16] {
            let g = Generator::<f32>::new(c).unwrap();
            assert_eq!(g.param_count(), generator_params_by_hand(c));
        }
        for c in [4, 8] {
            assert!(Generator::<f32>::new(2 * c).unwrap().param_count() > Generator::<f32>::new(c).unwrap().param_count());
            assert!(Segmenter::<f32>::new(2 * c, 4).unwrap().param_count() > Segmenter::<f32>::new(c, 4).unwrap().param_count());
            assert!(Discriminator::<f32>::new(2 * c).unwrap().param_count() > Discriminator::<f32>::new(c).unwrap().param_count());
        }
        assert!(Generator::<f32>::new(3).is_err());
    }

    #[test]
    fn zeroed_generator_block_is_identity() {
        let mut g = randomized(Generator::<f64>::new(4).unwrap(), 0.2, 1);
        let block = g.net.residual_blocks_mut().next().unwrap();
        for (_, p) in block.params_mut() {
            p.value.iter_mut().for_each(|v| *v = 0.0);
        }
        let x = FeatureMap::from_fn(16, 8, 8, |c, y, x| (c + 2 * y + 3 * x) as f64 * 0.01);
        let mut ctx = ForwardCtx::train(ChaCha8Rng::seed_from_u64(1));
        assert_eq!(block.forward(&x, &mut ctx), x);
    }

    #[test]
    fn initialization_statistics_and_determinism() {
        let b = ModelBundle::<f64>::initialized(8, Variant::Full, 42, AdamConfig::default()).unwrap();
        let weights: Vec<f64> = [b.generator.params(), b.discriminator.params(), b.segmenter.params()]
            .concat()
            .into_iter()
            .filter(|(n, _)| n.ends_with("weight"))
            .flat_map(|(_, p)| p.value.clone())
            .collect();
        let n = weights.len() as f64;
        assert!(n > 1e4);
        let mean = weights.iter().sum::<f64>() / n;
        let std = (weights.iter().map(|w| (w - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!(mean.abs() < 3.0 * INIT_STD / n.sqrt());
        assert!((std - INIT_STD).abs() < 0.05 * INIT_STD);
        for (name, p) in b.generator.params() {
            if name.ends_with("scale") {
                assert!(p.value.iter().all(|&v| v == 1.0));
            }
            if name.ends_with("shift") || name.ends_with("bias") {
                assert!(p.value.iter().all(|&v| v == 0.0));
            }
        }
        let again = ModelBundle::<f64>::initialized(8, Variant::Full, 42, AdamConfig::default()).unwrap();
        assert_eq!(param_digest(&b), param_digest(&again));
        let other = ModelBundle::<f64>::initialized(8, Variant::Full, 43, AdamConfig::default()).unwrap();
        assert_ne!(param_digest(&b), param_digest(&other));
    }

    #[test]
    fn dropout_only_in_training_passes() {
        let mut g = ModelBundle::<f64>::initialized(4, Variant::Full, 1, AdamConfig::default())
            .unwrap()
            .generator;
        let x = rand_image(16, 3);
        let a = g.forward(&x, &mut ForwardCtx::eval()).unwrap();
        let b = g.forward(&x, &mut ForwardCtx::eval()).unwrap();
        assert_eq!(a, b);
        let c = g.forward(&x, &mut ForwardCtx::train(seed::rng(1, &[1]))).unwrap();
        let d = g.forward(&x, &mut ForwardCtx::train(seed::rng(1, &[2]))).unwrap();
        assert_ne!(c, d);
    }

    fn l2(out: &FeatureMap64) -> (f64, FeatureMap64) {
        (0.5 * out.data().iter().map(|v| v * v).sum::<f64>(), out.clone())
    }

    #[test]
    fn generator_gradients_match_finite_differences() {
        let mut g = randomized(Generator::<f64>::new(4).unwrap(), 0.2, 5);
        let x = rand_image(8, 6);
        let worst = gradcheck(
            &mut g,
            |g, back| {
                let mut ctx = ForwardCtx::train(ChaCha8Rng::seed_from_u64(77));
                let (l, grad) = l2(&g.forward(&x, &mut ctx).unwrap());
                if back {
                    g.backward(&grad);
                }
                l
            },
            50,
            7,
        );
        assert!(worst < 1e-3, "worst relative error {worst}");
    }

    #[test]
    fn discriminator_gradients_match_finite_differences() {
        let mut d = randomized(Discriminator::<f64>::new(4).unwrap(), 0.2, 8);
        let x = rand_image(8, 9);
        let worst = gradcheck(
            &mut d,
            |d, back| {
                let mut ctx = ForwardCtx::frozen(ChaCha8Rng::seed_from_u64(0));
                let (l, grad) = l2(&d.forward(&x, &mut ctx).unwrap());
                if back {
                    d.backward(&grad);
                }
                l
            },
            50,
            10,
        );
        assert!(worst < 1e-3, "worst relative error {worst}");
    }

    #[test]
    fn segmenter_gradients_match_finite_differences() {
        let mut s = randomized(Segmenter::<f64>::new(4, 4).unwrap(), 0.2, 11);
        let x = rand_image(8, 12);
        let target = rand_image(8, 13);
        let worst = gradcheck(
            &mut s,
            |s, back| {
                let p = s.forward(&x, &mut ForwardCtx::eval()).unwrap();
                // weight the class channels differently so the softmax Jacobian matters
                let w = |c: usize, i: usize| target.data()[i] + c as f64;
                let n = p.plane_len();
                let l: f64 = p.data().iter().enumerate().map(|(k, v)| w(k / n, k % n) * v * v).sum();
                if back {
                    let g = FeatureMap::from_fn(4, 8, 8, |c, y, xx| 2.0 * w(c, y * 8 + xx) * p.get(c, y, xx));
                    s.backward(&g);
                }
                l
            },
            50,
            14,
        );
        assert!(worst < 1e-3, "worst relative error {worst}");
    }

    #[test]
    fn checkpoint_round_trip_reproduces_outputs_bit_for_bit() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let mut b = ModelBundle::<f32>::initialized(4, Variant::WoLexc, 5, AdamConfig::default()).unwrap();
        b.epoch = 3;
        b.optim.generator.step = 7;
        b.optim.generator.first[0][0] = 0.125;
        save_checkpoint(&b, &path).unwrap();
        let mut loaded = load_checkpoint::<f32>(&path).unwrap();
        assert_eq!(loaded.epoch, 3);
        assert_eq!(loaded.variant, Variant::WoLexc);
        assert_eq!(loaded.optim, b.optim);
        assert_eq!(param_digest(&loaded), param_digest(&b));
        let x = rand_image(32, 1).cast::<f32>();
        let ctx = ForwardCtx::eval;
        assert_eq!(
            b.generator.forward(&x, &mut ctx()).unwrap(),
            loaded.generator.forward(&x, &mut ctx()).unwrap()
        );
        assert_eq!(
            b.segmenter.forward(&x, &mut ctx()).unwrap(),
            loaded.segmenter.forward(&x, &mut ctx()).unwrap()
        );
        let header = read_checkpoint_header(&path).unwrap();
        assert_eq!(header.arch_hash, b.arch_hash());
        assert_eq!(header.scalar, "f32");
    }

    #[test]
    fn checkpoint_with_other_width_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let b = ModelBundle::<f32>::initialized(4, Variant::Full, 5, AdamConfig::default()).unwrap();
        save_checkpoint(&b, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        // corrupt the stored hash
        let pos = bytes.windows(9).position(|w| w == b"arch_hash").unwrap() + 12;
        bytes[pos] = if bytes[pos] == b'0' { b'1' } else { b'0' };
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_checkpoint::<f32>(&path),
            Err(crate::Error::ArchitectureMismatch { .. })
        ));
        std::fs::write(&path, b"not a checkpoint").unwrap();
        assert!(matches!(load_checkpoint::<f32>(&path), Err(crate::Error::Checkpoint(_))));
    }

    #[test]
    fn arch_hash_depends_on_width_only() {
        let h = |c, v| ModelBundle::<f32>::new(c, v, 0, AdamConfig::default()).unwrap().arch_hash();
        assert_eq!(h(4, Variant::Full), h(4, Variant::Cgan));
        assert_ne!(h(4, Variant::Full), h(8, Variant::Full));
    }
}
