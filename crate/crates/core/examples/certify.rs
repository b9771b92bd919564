//! Certifies a freshly built bundle, shows the stepsize it admits, and shows a
//! corrupted weight being caught.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use voltvar::controller::{CommSetup, ControllerBundle, ReactiveBox};
use voltvar::grid::Grid;
use voltvar::icnn::IcnnConfig;
use voltvar::verify::{certify_bundle, check_monotonicity, inject_wz_fault, CertifyOptions};

fn main() -> voltvar::Result<()> {
    let grid = Grid::ucsd49();
    let bx = ReactiveBox::ucsd49(grid.net.base_mva());
    let c = grid.index().controllable().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let icnn = IcnnConfig { hidden: vec![32, 32], ..IcnnConfig::default() };
    let opts = CertifyOptions { monotonicity_pairs: 20_000, ..CertifyOptions::default() };

    let mut b = ControllerBundle::init("DC-2", c.clone(), CommSetup::Distributed2.partition(&c)?, &icnn, bx, 0.1, &mut rng)?;
    // an untrained bundle can be too steep for any useful stepsize; pick one
    // inside its bound
    let probe = certify_bundle(&mut b.clone(), &grid.mat, &opts)?;
    b.set_epsilon(0.5 * probe.eps_bound)?;
    let cert = certify_bundle(&mut b, &grid.mat, &opts)?;
    println!(
        "DC-2: L analytic {:.2}, sampled {:.2}, eps bound {:.4}, eps {:.4}, certified {}",
        cert.l_analytic, cert.l_sampled, cert.eps_bound, cert.eps_used, cert.ok
    );

    // sampling can miss a single bad weight when little signal flows through
    // it; the structural check on W_z cannot
    let region = opts.region;
    let bad = inject_wz_fault(&b, 0, 1, 0, 0, -50.0)?;
    let r = check_monotonicity(&bad, 20_000, region, 1)?;
    println!("after fault: {} of {} pairs violate monotonicity (worst {:.2e})", r.violations, r.pairs, r.worst_value);
    let cert = certify_bundle(&mut bad.clone(), &grid.mat, &opts)?;
    println!("certified {}: {}", cert.ok, cert.reasons.join("; "));
    Ok(())
}
