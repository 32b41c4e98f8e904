//! Unbiased MMD under every kernel, and a permutation test.
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use skiptune::metrics::{mmd_unbiased, permutation_test, KernelKind, KernelSpec};
use skiptune::Tensor;

fn main() -> skiptune::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Tensor::randn(&[300, 4], &mut rng);
    let same = Tensor::randn(&[300, 4], &mut rng);
    let shifted = Tensor::randn(&[300, 4], &mut rng).map(|v| v * 1.3 + 0.2);
    println!("{:>11} {:>12} {:>12}", "kernel", "same", "shifted");
    for spec in KernelSpec::all() {
        println!(
            "{:>11} {:>12.3e} {:>12.3e}",
            spec.kind,
            mmd_unbiased(&x, &same, &spec)?,
            mmd_unbiased(&x, &shifted, &spec)?
        );
    }
    let rbf = KernelSpec::new(KernelKind::Rbf);
    for (name, y) in [("same", &same), ("shifted", &shifted)] {
        let t = permutation_test(&x, y, &rbf, 200, 7)?;
        println!(
            "permutation test ({name}): stat {:.3e}, p = {:.3}",
            t.statistic, t.p_value
        );
    }
    Ok(())
}
