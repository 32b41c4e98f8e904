mod common;

use common::{gradcheck, project, rng};
use proptest::prelude::*;
use skiptune::tensor::GroupNormSpec;
use skiptune::{Tape, Tensor};

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn randn(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, &mut rng(seed))
}

#[test]
fn conv2d_matches_finite_differences_on_4x4() {
    let x = randn(&[1, 1, 4, 4], 1);
    let w = randn(&[2, 1, 3, 3], 2);
    let b = randn(&[2], 3);
    let tape = Tape::new();
    let (xv, wv, bv) = (
        tape.leaf(x.clone()),
        tape.leaf(w.clone()),
        tape.leaf(b.clone()),
    );
    let loss = project(&xv.conv2d(&wv, Some(&bv), 1).unwrap(), 9).unwrap();
    let grads = tape.backward(&loss).unwrap();

    let f = |xs: &[Tensor]| {
        let t = Tape::inference();
        let y = t
            .constant(xs[0].clone())
            .conv2d(
                &t.constant(xs[1].clone()),
                Some(&t.constant(xs[2].clone())),
                1,
            )
            .unwrap();
        project(&y, 9).unwrap().value().item().unwrap()
    };
    let inputs = [x, w, b];
    for (i, v) in [&xv, &wv, &bv].iter().enumerate() {
        let num = common::numeric_grad(&f, &inputs, i, STEP);
        let diff = grads.get(v).unwrap().max_abs_diff(&num);
        assert!(diff <= 1e-6, "input {i}: max abs diff {diff}");
    }
}

#[test]
fn group_norm_scale_invariance() {
    let x = randn(&[2, 8, 3, 3], 4);
    let tape = Tape::inference();
    let gamma = tape.constant(randn(&[8], 5));
    let beta = tape.constant(randn(&[8], 6));
    let spec = GroupNormSpec::new(4);
    let base = tape
        .constant(x.clone())
        .group_norm(&spec, &gamma, &beta, None)
        .unwrap();
    for c in [0.3, 0.7, 2.5, 1e3] {
        let y = tape
            .constant(x.scale(c))
            .group_norm(&spec, &gamma, &beta, None)
            .unwrap();
        let d = y.value().max_abs_diff(base.value());
        assert!(d < 1e-12, "c = {c}: {d}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn elementwise_primitives(n in 1usize..6, seed in 0u64..1000) {
        let a = randn(&[n], seed);
        let b = randn(&[n], seed + 1);
        let inputs = [a, b];
        let worst = gradcheck(|_, v| {
            let s = v[0].add(&v[1])?.mul(&v[0])?.sub(&v[1].silu())?;
            Ok(s.sigmoid().mul_scalar(1.7).add_scalar(0.3).mean())
        }, &inputs, STEP).unwrap();
        prop_assert!(worst < TOL, "worst {worst}");
    }

    #[test]
    fn matmul_and_linear(m in 1usize..4, k in 1usize..4, n in 1usize..4, seed in 0u64..1000) {
        let inputs = [randn(&[m, k], seed), randn(&[k, n], seed + 1), randn(&[n, k], seed + 2), randn(&[n], seed + 3)];
        let worst = gradcheck(|_, v| {
            let p = v[0].matmul(&v[1])?;
            let l = v[0].linear(&v[2], Some(&v[3]))?;
            project(&p, 1)?.add(&project(&l, 2)?)
        }, &inputs, STEP).unwrap();
        prop_assert!(worst < TOL, "worst {worst}");
    }

    #[test]
    fn conv_pool_upsample(b in 1usize..3, ci in 1usize..3, co in 1usize..3, seed in 0u64..1000) {
        let inputs = [randn(&[b, ci, 4, 4], seed), randn(&[co, ci, 3, 3], seed + 1), randn(&[co], seed + 2)];
        let worst = gradcheck(|_, v| {
            let y = v[0].conv2d(&v[1], Some(&v[2]), 1)?.avg_pool2()?.upsample2()?;
            project(&y, 3)
        }, &inputs, STEP).unwrap();
        prop_assert!(worst < TOL, "worst {worst}");
    }

    #[test]
    fn group_norm_with_input_scale(b in 1usize..3, offset in 0usize..2, uniform in proptest::bool::ANY, seed in 0u64..1000) {
        let scale = if uniform {
            Tensor::full(&[b, 8], 0.6)
        } else {
            let mut s = Tensor::full(&[b, 8], 1.0);
            for row in s.data_mut().chunks_mut(8) { row[..4].fill(0.6); }
            s
        };
        let inputs = [randn(&[b, 8, 2, 2], seed), randn(&[8], seed + 1), randn(&[8], seed + 2), scale];
        let spec = GroupNormSpec::with_offset(4, offset);
        let worst = gradcheck(|_, v| {
            let y = v[0].group_norm(&spec, &v[1], &v[2], Some(&v[3]))?;
            project(&y, 4)
        }, &inputs, STEP).unwrap();
        prop_assert!(worst < TOL, "worst {worst}");
    }

    #[test]
    fn channel_ops(b in 1usize..3, seed in 0u64..1000) {
        let inputs = [randn(&[b, 2, 2, 2], seed), randn(&[b, 3, 2, 2], seed + 1), randn(&[b, 5], seed + 2), randn(&[b, 5], seed + 3)];
        let worst = gradcheck(|_, v| {
            let y = v[0].concat_channels(&v[1])?.scale_channels(&v[2])?.add_channelwise(&v[3])?;
            let y = y.scale_samples(&vec![0.5; b])?;
            y.weighted_sq_mean(&vec![1.5; b])
        }, &inputs, STEP).unwrap();
        prop_assert!(worst < TOL, "worst {worst}");
    }

    #[test]
    fn skip_scale_and_indexing(seed in 0u64..1000) {
        let inputs = [randn(&[3], seed), randn(&[2, 4, 1, 1], seed + 1), randn(&[4, 3], seed + 2)];
        let worst = gradcheck(|_, v| {
            let r = v[0].sigmoid().index(1)?;
            let s = r.broadcast_skip_scale(2, 2, 4)?;
            let y = v[1].scale_channels(&s)?;
            let e = v[2].gather_rows(&[3, 0])?.reshape(&[2, 3])?;
            let logits = e.add(&y.reshape(&[2, 4])?.linear(&v[2].reshape(&[3, 4])?, None)?)?;
            logits.cross_entropy(&[2, 0])?.add(&project(&y, 5)?.scale_by(&r)?)
        }, &inputs, STEP).unwrap();
        prop_assert!(worst < TOL, "worst {worst}");
    }
}
