mod common;

use skiptune::harness::file_hash;
use skiptune::skip_tuning::SkipProfile;
use skiptune::unet::{GroupAlignment, MiniUNet, UNetConfig};
use skiptune::{Error, Tensor};

fn toy(seed: u64) -> MiniUNet {
    MiniUNet::new(UNetConfig::toy(), seed).unwrap()
}

#[test]
fn items_do_not_interact() {
    let net = toy(1);
    let x = Tensor::randn(&[4, 1, 8, 8], &mut common::rng(2));
    let sigma = [0.1, 0.7, 3.0, 40.0];
    let profile = SkipProfile::linear(0.6, 1.0, net.k()).unwrap();
    for p in [None, Some(&profile)] {
        let (y, _) = net.forward(&x, &sigma, None, p, false).unwrap();
        for b in 0..4 {
            let (yb, _) = net
                .forward(&x.slice_batch(b, b + 1), &sigma[b..b + 1], None, p, false)
                .unwrap();
            let diff = yb
                .data()
                .iter()
                .zip(y.item_slice(b))
                .map(|(a, c)| (a - c).abs())
                .fold(0.0, f64::max);
            assert!(diff < 1e-12, "item {b}: {diff}");
        }
    }
}

#[test]
fn output_shape_and_tap_count() {
    for align in [GroupAlignment::Aligned, GroupAlignment::Straddling] {
        let net = MiniUNet::new(UNetConfig::toy().with_alignment(align), 3).unwrap();
        let x = Tensor::randn(&[2, 1, 8, 8], &mut common::rng(4));
        let (y, taps) = net.forward(&x, &[1.0, 1.0], None, None, true).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert_eq!(taps.len(), net.k());
        assert!(taps.iter().all(|t| t.d_norm > 0.0 && t.u_norm > 0.0));
    }
}

#[test]
fn checkpoint_file_round_trip_is_stable() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
    let net = toy(5);
    net.save(&a).unwrap();
    let back = MiniUNet::load(&a).unwrap();
    back.save(&b).unwrap();
    assert_eq!(file_hash(&a).unwrap(), file_hash(&b).unwrap());
    let x = Tensor::randn(&[2, 1, 8, 8], &mut common::rng(6));
    let y0 = net.forward(&x, &[0.5, 2.0], None, None, false).unwrap().0;
    let y1 = back.forward(&x, &[0.5, 2.0], None, None, false).unwrap().0;
    assert!(y0.bit_eq(&y1));
}

#[test]
fn corrupt_checkpoint_is_a_format_error() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.ckpt");
    toy(7).save(&p).unwrap();
    let bytes = std::fs::read(&p).unwrap();
    std::fs::write(&p, &bytes[..bytes.len() - 5]).unwrap();
    assert!(matches!(MiniUNet::load(&p), Err(Error::Format(_))));
    std::fs::write(&p, b"not a checkpoint\n").unwrap();
    assert!(matches!(MiniUNet::load(&p), Err(Error::Format(_))));
}

#[test]
fn init_is_seeded() {
    let x = Tensor::randn(&[1, 1, 8, 8], &mut common::rng(8));
    let f = |s| toy(s).forward(&x, &[1.0], None, None, false).unwrap().0;
    assert!(f(9).bit_eq(&f(9)));
    assert!(!f(9).bit_eq(&f(10)));
}

#[test]
fn wrong_profile_length_is_rejected() {
    let net = toy(11);
    let x = Tensor::zeros(&[1, 1, 8, 8]);
    let p = SkipProfile::uniform(0.8, net.k() + 1).unwrap();
    assert!(net.forward(&x, &[1.0], None, Some(&p), false).is_err());
}

#[test]
fn wrong_input_size_is_a_dimension_error() {
    let net = toy(12);
    let x = Tensor::zeros(&[1, 1, 6, 6]);
    assert!(matches!(
        net.forward(&x, &[1.0], None, None, false),
        Err(Error::Dimension(_))
    ));
}
