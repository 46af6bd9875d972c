//! Long-running trend checks, excluded from the default run. Invoke with
//! `cargo test -p bvae --test slow -- --ignored`.

use std::path::{Path, PathBuf};

use bvae::analysis::{run_sweep, SweepSpec};
use bvae::data::{load_mnist, ImageDataset};

fn mnist() -> (ImageDataset, ImageDataset) {
    let dir = match std::env::var_os("BVAE_DATA_DIR") {
        Some(d) => PathBuf::from(d),
        None => Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"),
    };
    assert!(
        dir.join("train-images-idx3-ubyte").exists()
            || dir.join("train-images-idx3-ubyte.gz").exists(),
        "MNIST files not found under {}; run tools/fetch_mnist.sh (or point BVAE_DATA_DIR at them)",
        dir.display()
    );
    load_mnist(&dir).expect("loading MNIST")
}

#[test]
#[ignore = "full 10-epoch radius sweep at d = 16; roughly 15 minutes"]
fn radius_sweep_shows_a_sweet_spot_at_d16() {
    let (train, test) = mnist();
    let spec = SweepSpec {
        d_values: vec![16],
        r_values: vec![0.0, 0.1, 0.5, 1.0, 2.0, 4.0],
        ..SweepSpec::default()
    };
    let grid = run_sweep(&spec, &train, &test, |c| {
        println!("d = {} r = {}: bce {:.3} nmi {:.4}", c.d, c.r, c.bce, c.nmi);
    })
    .unwrap();

    let at = |r: f64| grid.cells.iter().find(|c| c.r == r).unwrap();
    let base = at(0.0);
    let mid: Vec<_> = grid
        .cells
        .iter()
        .filter(|c| c.r >= 0.1 && c.r <= 2.0)
        .collect();
    let best_bce = mid.iter().map(|c| c.bce).fold(f64::INFINITY, f64::min);
    let best_nmi = mid.iter().map(|c| c.nmi).fold(0.0, f64::max);

    // The mid-range radii must beat the r = 0 baseline on reconstruction and
    // at least match it on clustering; an over-wide radius gives both back.
    assert!(
        best_bce < base.bce,
        "best mid-range bce {:.3} vs r = 0 {:.3}",
        best_bce,
        base.bce
    );
    assert!(
        best_nmi >= base.nmi,
        "best mid-range nmi {:.4} vs r = 0 {:.4}",
        best_nmi,
        base.nmi
    );
    assert!(
        at(4.0).bce > best_bce,
        "r = 4 bce {:.3} should exceed {:.3}",
        at(4.0).bce,
        best_bce
    );
}
